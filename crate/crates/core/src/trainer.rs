//! Three-view training loop, SGD with momentum and evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Augmentation, Dataset, Split, SyntheticSpec};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::losses::{
    bc_ecl_loss_with, cc_ge_loss, lc_loss, total_loss, ContrastBatch, LossConfig, PriorMode,
    Priors, PrototypeSource,
};
use crate::metrics::{self, FeatureSpace, GeometrySnapshot, MetricSpaces};
use crate::model::{ModelParams, NetConfig};
use crate::tensor::Tensor;

/// Which of the three losses take part in the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMask {
    pub bc_ecl: bool,
    pub cc_ge: bool,
    pub lc: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self {
            bc_ecl: true,
            cc_ge: true,
            lc: true,
        }
    }
}

impl AblationMask {
    /// The four ablation rows: LC; CC-GE + LC; BC-ECL + LC; all three.
    pub const SWEEP: [(&'static str, AblationMask); 4] = [
        (
            "lc",
            AblationMask {
                bc_ecl: false,
                cc_ge: false,
                lc: true,
            },
        ),
        (
            "ccge-lc",
            AblationMask {
                bc_ecl: false,
                cc_ge: true,
                lc: true,
            },
        ),
        (
            "bcecl-lc",
            AblationMask {
                bc_ecl: true,
                cc_ge: false,
                lc: true,
            },
        ),
        (
            "full",
            AblationMask {
                bc_ecl: true,
                cc_ge: true,
                lc: true,
            },
        ),
    ];

    /// Loss weights with masked components zeroed.
    pub fn apply(&self, loss: &LossConfig) -> LossConfig {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        LossConfig {
            lambda_bc_ecl: pick(self.bc_ecl, loss.lambda_bc_ecl),
            lambda_cc_ge: pick(self.cc_ge, loss.lambda_cc_ge),
            lambda_lc: pick(self.lc, loss.lambda_lc),
            ..loss.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 1-based epochs at which the rate is multiplied by `lr_factor`;
    /// empty means 80% and 90% of `epochs`.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Seed for augmentation and batch order.
    pub seed: u64,
    pub ablation: AblationMask,
    /// Add `log h` to the logits before the argmax at evaluation.
    pub compensate_eval_logits: bool,
    pub metric_spaces: MetricSpaces,
    /// Split the geometry metrics are measured on.
    pub metric_split: Split,
    pub loss: LossConfig,
    pub net: NetConfig,
    pub data: SyntheticSpec,
    /// Read `train.csv`/`test.csv` from here instead of generating data.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            lr_factor: 0.1,
            eval_every: 1,
            seed: 0,
            ablation: AblationMask::default(),
            compensate_eval_logits: false,
            metric_spaces: MetricSpaces::default(),
            metric_split: Split::Train,
            loss: LossConfig {
                tau: 0.1,
                ..LossConfig::default()
            },
            net: NetConfig::default(),
            data: SyntheticSpec::default(),
            dataset_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!(
                "lr_factor must be in (0, 1], got {}",
                self.lr_factor
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            ));
        }
        self.loss.validate()?;
        self.net.validate()?;
        if self.dataset_dir.is_none() {
            self.data.validate()?;
        }
        Ok(())
    }

    /// Seeds data generation, initialization and batch order together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.net.seed = seed;
        self.data.seed = seed;
    }

    /// The ablation benchmark: four classes in eight dimensions at imbalance
    /// 50, 200 epochs, one evaluation at the end, SD measured on `z`.
    pub fn geometry_benchmark(seed: u64) -> Self {
        let mut cfg = TrainConfig {
            epochs: 200,
            weight_decay: 5e-3,
            eval_every: 200,
            metric_spaces: MetricSpaces {
                duality: FeatureSpace::Representation,
                ..MetricSpaces::default()
            },
            loss: LossConfig {
                tau: 0.2,
                ..LossConfig::default()
            },
            data: SyntheticSpec {
                rho: 50.0,
                n_test_per_class: 200,
                ..SyntheticSpec::default()
            },
            ..TrainConfig::default()
        };
        cfg.set_seed(seed);
        cfg
    }

    pub fn effective_milestones(&self) -> Vec<usize> {
        if !self.milestones.is_empty() {
            return self.milestones.clone();
        }
        let at = |frac: f64| ((self.epochs as f64 * frac).round() as usize).max(1);
        let mut m = vec![at(0.8), at(0.9)];
        m.dedup();
        m
    }

    /// Generates or loads the train/test splits and aligns the network's
    /// input and class dimensions with them.
    pub fn load_data(&mut self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset_dir {
            Some(dir) => {
                let (spec, train, test) = data::import_dir(dir)?;
                self.data = spec;
                (train, test)
            }
            None => data::make_longtailed(&self.data)?,
        };
        self.net.input_dim = train.input_dim();
        self.net.num_classes = train.num_classes;
        Ok((train, test))
    }
}

/// `base · factor^(#milestones ≤ epoch)`.
pub fn lr_schedule(epoch: usize, base: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base * factor.powi(passed as i32)
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.shape() != param.shape() || velocity.shape() != param.shape() {
        return Err(Error::Contract(format!(
            "sgd step on {:?} with gradient {:?} and velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (p, v) = (param.data_mut(), velocity.data_mut());
    for ((pk, vk), gk) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *vk = momentum * *vk + (gk + weight_decay * *pk);
        *pk -= lr * *vk;
    }
    Ok(())
}

/// Momentum buffers for every model tensor.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                tensors.len()
            )));
        }
        for ((p, g), v) in tensors.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, v, lr, momentum, weight_decay)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub geometry: GeometrySnapshot,
}

impl Evaluation {
    /// Unweighted mean of the per-class accuracies.
    pub fn balanced_accuracy(&self) -> f64 {
        self.per_class.iter().sum::<f64>() / self.per_class.len() as f64
    }
}

fn check_split(params: &ModelParams, ds: &Dataset) -> Result<()> {
    let c = params.config.num_classes;
    if ds.is_empty() {
        return Err(Error::Contract("evaluation on an empty split".into()));
    }
    if ds.num_classes != c {
        return Err(Error::Contract(format!(
            "split has {} classes, model has {c}",
            ds.num_classes
        )));
    }
    if let Some(missing) = ds.counts.iter().position(|&k| k == 0) {
        return Err(Error::Unavailable(format!(
            "class {missing} has no evaluation samples"
        )));
    }
    Ok(())
}

/// Geometry snapshot of `ds` in the configured spaces.
///
/// Metrics that are undefined for the current model are NaN: SD when every
/// class mean coincides, cosines when a centered mean is zero, and every
/// representation-space metric when some projector output row is zero.
pub fn geometry(
    params: &ModelParams,
    ds: &Dataset,
    spaces: MetricSpaces,
) -> Result<GeometrySnapshot> {
    check_split(params, ds)?;
    let c = params.config.num_classes;
    let f = params.features(&ds.inputs)?;
    let needs_z = spaces.cluster == FeatureSpace::Representation
        || spaces.duality == FeatureSpace::Representation;
    let z = if needs_z {
        match params.representations(&f) {
            Ok(z) => Some(z),
            Err(Error::Domain { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let nan_tensor = |r: usize, k: usize| Tensor::from_raw(r, k, vec![f64::NAN; r * k]);
    let pick = |space: FeatureSpace| match space {
        FeatureSpace::Representation => z.as_ref(),
        FeatureSpace::Feature => Some(&f),
    };
    let labels = &ds.labels;
    let lenient = |r: Result<f64>| match r {
        Ok(v) => Ok(v),
        Err(Error::Domain { .. } | Error::Degenerate(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    };
    let sd = match pick(spaces.duality) {
        Some(x) => lenient(metrics::sd(&params.w, x, labels, c))?,
        None => f64::NAN,
    };
    let Some(cluster) = pick(spaces.cluster) else {
        let d = f.cols();
        return Ok(GeometrySnapshot {
            fc: f64::NAN,
            ms: f64::NAN,
            sd,
            class_means: nan_tensor(c, d),
            global_mean: nan_tensor(1, d),
            mean_cosines: nan_tensor(c, c),
            pca2: None,
        });
    };
    let class_means = metrics::class_means(cluster, labels, c)?;
    Ok(GeometrySnapshot {
        fc: metrics::fc(cluster, labels, c)?,
        ms: metrics::ms(cluster, labels, c)?,
        sd,
        global_mean: metrics::global_mean(&class_means),
        class_means,
        mean_cosines: match metrics::mean_cosines(cluster, labels, c) {
            Ok(m) => m,
            Err(Error::Degenerate(_)) => nan_tensor(c, c),
            Err(e) => return Err(e),
        },
        pca2: None,
    })
}

/// Top-1 accuracy on `test` from `f` and `g` only, plus the geometry of
/// `geometry_split` (usually the training split).
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    geometry_split: &Dataset,
    spaces: MetricSpaces,
    compensation: Option<&Priors>,
) -> Result<Evaluation> {
    check_split(params, test)?;
    let c = params.config.num_classes;
    let f = params.features(&test.inputs)?;
    let mut logits = params.logits(&f)?;
    if let Some(h) = compensation {
        let log_h = h.log_row();
        for r in 0..logits.rows() {
            for k in 0..c {
                logits.set(r, k, logits.get(r, k) + log_h.get(0, k));
            }
        }
    }
    let predictions = metrics::argmax_rows(&logits);
    let (accuracy, per_class) = metrics::accuracy(&predictions, &test.labels, c);
    let geometry = geometry(params, geometry_split, spaces)?;
    Ok(Evaluation {
        accuracy,
        per_class,
        geometry,
    })
}

/// Epoch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub bc_ecl: f64,
    pub cc_ge: f64,
    pub lc: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub losses: EpochLosses,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,fc,ms,sd,acc_overall,acc_class_0..,lr,loss_bc_ecl,loss_cc_ge,loss_lc,loss_total`
    pub fn to_csv(&self, num_classes: usize) -> String {
        let mut out = String::from("epoch,fc,ms,sd,acc_overall");
        for c in 0..num_classes {
            let _ = write!(out, ",acc_class_{c}");
        }
        out.push_str(",lr,loss_bc_ecl,loss_cc_ge,loss_lc,loss_total\n");
        for r in &self.records {
            let g = &r.evaluation.geometry;
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.epoch, g.fc, g.ms, g.sd, r.evaluation.accuracy
            );
            for a in &r.evaluation.per_class {
                let _ = write!(out, ",{a}");
            }
            let l = &r.losses;
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                r.lr, l.bc_ecl, l.cc_ge, l.lc, l.total
            );
        }
        out
    }
}

/// Owns the model, optimizer state and random stream of one training run.
pub struct Trainer {
    config: TrainConfig,
    loss: LossConfig,
    milestones: Vec<usize>,
    train: Dataset,
    test: Dataset,
    augmentation: Augmentation,
    params: ModelParams,
    sgd: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    history: TrainHistory,
}

impl Trainer {
    /// Loads or generates data per the config, then initializes the model.
    pub fn new(mut config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.load_data()?;
        Self::with_data(config, train, test)
    }

    pub fn with_data(mut config: TrainConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.net.input_dim = train.input_dim();
        config.net.num_classes = train.num_classes;
        config.validate()?;
        if test.input_dim() != train.input_dim() || test.num_classes != train.num_classes {
            return Err(Error::Contract(
                "train and test splits disagree in shape".into(),
            ));
        }
        let params = ModelParams::init(&config.net, config.loss.prototype_source)?;
        Ok(Self {
            loss: config.ablation.apply(&config.loss),
            milestones: config.effective_milestones(),
            augmentation: config.data.augmentation(),
            sgd: Sgd::new(&params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            train,
            test,
            epoch: 0,
            history: TrainHistory::default(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let comp = self
            .config
            .compensate_eval_logits
            .then_some(&self.train.priors);
        let split = match self.config.metric_split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        evaluate(
            &self.params,
            &self.test,
            split,
            self.config.metric_spaces,
            comp,
        )
    }

    /// Runs one epoch of updates and returns its mean losses; evaluation
    /// and history bookkeeping are left to [`Trainer::step_epoch`].
    pub fn run_epoch(&mut self) -> Result<EpochLosses> {
        let epoch = self.epoch + 1;
        let lr = lr_schedule(
            epoch,
            self.config.lr,
            &self.milestones,
            self.config.lr_factor,
        );
        let snapshot = match self.loss.prototype_source {
            PrototypeSource::ClassMeans => {
                let f = self.params.features(&self.train.inputs)?;
                Some(self.params.representations(&f)?)
            }
            _ => None,
        };
        let order = data::batches(self.train.len(), self.config.batch_size, &mut self.rng)?;
        let mut sums = EpochLosses::default();
        for (b, idx) in order.iter().enumerate() {
            let parts = self
                .step_batch(idx, lr, snapshot.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(m) => {
                        Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}"))
                    }
                    Error::Domain { op, detail } => Error::Domain {
                        op,
                        detail: format!("{detail} (epoch {epoch}, batch {b})"),
                    },
                    other => other,
                })?;
            sums.bc_ecl += parts.bc_ecl;
            sums.cc_ge += parts.cc_ge;
            sums.lc += parts.lc;
            sums.total += parts.total;
        }
        let n = order.len() as f64;
        self.epoch = epoch;
        Ok(EpochLosses {
            bc_ecl: sums.bc_ecl / n,
            cc_ge: sums.cc_ge / n,
            lc: sums.lc / n,
            total: sums.total / n,
        })
    }

    /// One epoch plus evaluation when due; returns the record if one was made.
    pub fn step_epoch(&mut self) -> Result<Option<&EpochRecord>> {
        let losses = self.run_epoch()?;
        let epoch = self.epoch;
        if !epoch.is_multiple_of(self.config.eval_every) && epoch != self.config.epochs {
            return Ok(None);
        }
        let evaluation = self.evaluate()?;
        let lr = lr_schedule(
            epoch,
            self.config.lr,
            &self.milestones,
            self.config.lr_factor,
        );
        self.history.records.push(EpochRecord {
            epoch,
            lr,
            losses,
            evaluation,
        });
        Ok(self.history.records.last())
    }

    pub fn run(mut self) -> Result<(ModelParams, TrainHistory)> {
        while !self.is_done() {
            self.step_epoch()?;
        }
        Ok((self.params, self.history))
    }

    fn step_batch(
        &mut self,
        idx: &[usize],
        lr: f64,
        snapshot: Option<&Tensor>,
    ) -> Result<EpochLosses> {
        let c = self.train.num_classes;
        let x = self.train.inputs.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
        let v1 = self.augmentation.augment(&x, 1, &mut self.rng)?;
        let v2 = self.augmentation.augment(&x, 2, &mut self.rng)?;
        let v3 = self.augmentation.augment(&x, 3, &mut self.rng)?;

        let tape = Tape::new();
        let pv = self.params.on_tape(&tape);

        let f_cl = pv.extract(tape.constant(v2.vstack(&v3)?))?;
        let z = pv.project(f_cl)?;
        let cl_labels: Vec<usize> = y.iter().chain(&y).copied().collect();
        let batch = ContrastBatch::new(z, cl_labels, c)?;
        let snap = snapshot.map(|s| (tape.constant(s.clone()), self.train.labels.as_slice()));
        let protos = pv.prototypes(self.loss.prototype_source, snap)?;
        let l_ecl = bc_ecl_loss_with(&batch, &protos, self.loss.tau, self.loss.own_class_set)?;
        let l_ccge = cc_ge_loss(pv.w(), &protos)?;

        let logits = pv.classify(pv.extract(tape.constant(v1))?)?;
        let batch_priors;
        let priors = match self.loss.prior_mode {
            PriorMode::Dataset => &self.train.priors,
            PriorMode::Batch => {
                batch_priors = Priors::from_batch(&y, c)?;
                &batch_priors
            }
        };
        let l_lc = lc_loss(logits, &y, priors)?;
        let total = total_loss([l_ecl, l_ccge, l_lc], &self.loss)?;

        let parts = EpochLosses {
            bc_ecl: l_ecl.item(),
            cc_ge: l_ccge.item(),
            lc: l_lc.item(),
            total: total.item(),
        };
        for (name, v) in [
            ("bc_ecl", parts.bc_ecl),
            ("cc_ge", parts.cc_ge),
            ("lc", parts.lc),
            ("total", parts.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss {name} = {v}")));
            }
        }
        let grads = pv.gradients(&total.backward()?);
        self.sgd.step(
            &mut self.params,
            &grads,
            lr,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(parts)
    }
}

/// Trains to completion per `config`.
pub fn train(config: TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    Trainer::new(config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_milestones() {
        let m = [160, 180];
        assert_eq!(lr_schedule(159, 0.3, &m, 0.1), 0.3);
        assert!((lr_schedule(160, 0.3, &m, 0.1) - 0.03).abs() < 1e-15);
        assert!((lr_schedule(180, 0.3, &m, 0.1) - 0.003).abs() < 1e-15);
    }

    #[test]
    fn default_milestones_scale_with_epochs() {
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_milestones(), vec![160, 180]);
        let short = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(short.effective_milestones(), vec![1]);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.5, 0.25]]).unwrap();
        let mut v = Tensor::zeros(1, 2);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(
            p,
            Tensor::from_rows(&[vec![1.0 - 0.05, -2.0 - 0.025]]).unwrap()
        );
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let p0 = Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let mut p = p0.clone();
        let mut v = Tensor::zeros(1, 2);
        sgd_step(&mut p, &Tensor::zeros(1, 2), &mut v, 0.5, 0.9, 0.0).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut p = Tensor::scalar(0.0);
        let mut v = Tensor::scalar(0.0);
        for _ in 0..2 {
            sgd_step(&mut p, &Tensor::scalar(g), &mut v, lr, mu, 0.0).unwrap();
        }
        assert!((p.item().unwrap() + lr * g * (2.0 + mu)).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = Tensor::zeros(1, 2);
        let mut v = Tensor::zeros(1, 2);
        assert!(matches!(
            sgd_step(&mut p, &Tensor::zeros(2, 1), &mut v, 0.1, 0.0, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                milestones: vec![5, 5],
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_factor: 1.5,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn mask_zeroes_weights() {
        let mask = AblationMask {
            bc_ecl: false,
            cc_ge: true,
            lc: false,
        };
        let l = mask.apply(&LossConfig::default());
        assert_eq!(l.weights(), [0.0, 3.0, 0.0]);
    }
}
