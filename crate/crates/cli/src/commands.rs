use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use ecl_core::data;
use ecl_core::metrics::{self, Embeddings};
use ecl_core::model::Checkpoint;
use ecl_core::trainer::{AblationMask, EpochRecord, Trainer};
use ecl_core::verify::{self, SuiteReport};
use ecl_core::Error;

use crate::config::{self, RunConfig};
use crate::{Common, Suite};

/// 2 for bad input or configuration, 3 for numerical failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite(_)
                | Error::Domain { .. }
                | Error::Degenerate(_)
                | Error::Evaluation { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn summary_row(name: &str, mask: AblationMask, rec: &EpochRecord) -> String {
    let g = &rec.evaluation.geometry;
    format!(
        "{name},{},{},{},{},{},{},{},{},{}\n",
        mask.bc_ecl,
        mask.cc_ge,
        mask.lc,
        rec.epoch,
        g.fc,
        g.ms,
        g.sd,
        rec.evaluation.accuracy,
        rec.evaluation.balanced_accuracy()
    )
}

pub fn train(common: &Common, sweep: bool, embeddings: bool) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    if !sweep {
        run_training(&cfg, &cfg.out_dir, embeddings)?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut summary = String::from("run,bc_ecl,cc_ge,lc,epoch,fc,ms,sd,acc_overall,acc_balanced\n");
    for (name, mask) in AblationMask::SWEEP {
        let mut run = cfg.clone();
        run.train.ablation = mask;
        let rec = run_training(&run, &cfg.out_dir.join(name), embeddings)?;
        summary.push_str(&summary_row(name, mask, &rec));
    }
    write(&cfg.out_dir.join("sweep.csv"), summary)?;
    Ok(ExitCode::SUCCESS)
}

fn run_training(cfg: &RunConfig, dir: &Path, embeddings: bool) -> Result<EpochRecord> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut train_cfg = cfg.train.clone();
    let (train, test) = train_cfg.load_data()?;
    let effective = RunConfig {
        out_dir: dir.to_path_buf(),
        train: train_cfg.clone(),
        ..cfg.clone()
    };
    write(&dir.join("config.toml"), effective.to_toml()?)?;

    let c = train.num_classes;
    let epochs = train_cfg.epochs;
    let report_every = (epochs / 10).max(1);
    let mut trainer = Trainer::with_data(train_cfg, train, test)?;
    while !trainer.is_done() {
        match trainer.step_epoch() {
            Ok(Some(rec)) if rec.epoch % report_every == 0 || rec.epoch == epochs => {
                let g = &rec.evaluation.geometry;
                eprintln!(
                    "[{}] epoch {}/{epochs} loss {:.4} acc {:.4} fc {:.4} ms {:.4} sd {:.4}",
                    dir.display(),
                    rec.epoch,
                    rec.losses.total,
                    rec.evaluation.accuracy,
                    g.fc,
                    g.ms,
                    g.sd
                );
            }
            Ok(_) => {}
            Err(e) => {
                write(&dir.join("history.csv"), trainer.history().to_csv(c))?;
                return Err(e).context(format!("training aborted in {}", dir.display()));
            }
        }
    }
    write(&dir.join("history.csv"), trainer.history().to_csv(c))?;
    let ck = Checkpoint::new(trainer.epoch(), trainer.params().clone());
    write(&dir.join("checkpoint.json"), ck.to_json()?)?;

    if embeddings {
        let test = trainer.test_set();
        let f = trainer.params().features(&test.inputs)?;
        let z = trainer.params().representations(&f)?;
        let ids: Vec<String> = (0..test.len()).map(|i| i.to_string()).collect();
        for (name, feats) in [("embeddings.csv", z), ("features.csv", f)] {
            let e = Embeddings {
                ids: ids.clone(),
                labels: test.labels.clone(),
                features: feats,
            };
            write(&dir.join(name), e.to_csv())?;
        }
    }

    let rec = trainer
        .history()
        .last()
        .cloned()
        .context("no evaluation recorded")?;
    let g = &rec.evaluation.geometry;
    println!(
        "{}: epoch {} acc {:.4} balanced {:.4} fc {:.6} ms {:.6} sd {:.6}",
        dir.display(),
        rec.epoch,
        rec.evaluation.accuracy,
        rec.evaluation.balanced_accuracy(),
        g.fc,
        g.ms,
        g.sd
    );
    Ok(rec)
}

fn print_report(r: &SuiteReport) {
    println!(
        "{}: {} checks, max violation {:e}, {} failures",
        r.suite,
        r.checks,
        r.max_violation,
        r.failures.len()
    );
}

pub fn verify(common: &Common, suite: Suite, instances: Option<usize>) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let v = &cfg.verify;
    let mut reports = Vec::new();
    if matches!(suite, Suite::Trivials | Suite::All) {
        reports.push(verify::trivials_suite()?);
    }
    if matches!(suite, Suite::Bounds | Suite::All) {
        reports.push(verify::bounds_suite(
            instances.unwrap_or(v.bounds_instances),
            v.seed,
        )?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        reports.push(verify::gradients_suite(
            instances.unwrap_or(v.gradient_instances),
            v.seed,
        )?);
    }
    if matches!(suite, Suite::Duplication | Suite::All) {
        let n = instances.unwrap_or(v.duplication_instances);
        reports.push(verify::duplication_suite(n, v.seed)?);
    }
    let mut ok = true;
    for r in &reports {
        print_report(r);
        if !r.passed() {
            ok = false;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg
                .out_dir
                .join(format!("verify-{}-failures.json", r.suite));
            write(&path, serde_json::to_string_pretty(&r.failures)?)?;
            for f in &r.failures {
                eprintln!("{} failed: {}", f.check, f.detail);
            }
            eprintln!("failing instances written to {}", path.display());
        }
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn metrics(common: &Common, embeddings: &Path, checkpoint: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let text = fs::read_to_string(embeddings)
        .with_context(|| format!("reading {}", embeddings.display()))?;
    let emb =
        Embeddings::from_csv(&text).with_context(|| format!("parsing {}", embeddings.display()))?;
    let ck = match checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let c = match &ck {
        Some(ck) => ck.params.config.num_classes,
        None => emb.num_classes(),
    };
    let (feats, labels) = (&emb.features, &emb.labels);
    let fc = metrics::fc(feats, labels, c)?;
    let ms = metrics::ms(feats, labels, c)?;
    let sd = match &ck {
        Some(ck) => Some(metrics::sd(&ck.params.w, feats, labels, c)?),
        None => None,
    };

    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let mut csv = String::from(if sd.is_some() {
        "fc,ms,sd\n"
    } else {
        "fc,ms\n"
    });
    match sd {
        Some(sd) => writeln!(csv, "{fc},{ms},{sd}")?,
        None => writeln!(csv, "{fc},{ms}")?,
    }
    write(&out.join("metrics.csv"), &csv)?;
    print!("{csv}");

    match metrics::pca2(feats) {
        Ok(p) => {
            write(
                &out.join("pca.csv"),
                metrics::pca_csv(&emb.ids, labels, &p.coords),
            )?;
            println!("pca explained variance {:.6}", p.explained);
        }
        Err(Error::Degenerate(m)) => eprintln!("warning: pca skipped: {m}"),
        Err(e) => return Err(e.into()),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gendata(common: &Common) -> Result<ExitCode> {
    let cfg = resolve(common)?;
    let spec = &cfg.train.data;
    let (train, test) = data::make_longtailed(spec)?;
    data::export_dir(&cfg.out_dir, spec, &train, &test)?;
    println!(
        "train counts {:?}, test counts {:?} -> {}",
        train.counts,
        test.counts,
        cfg.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
