//! Randomized property suites: loss lower bounds, reverse-mode vs. finite
//! differences, and exact reference values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diff::{check_gradient, Tape, Var};
use crate::error::Result;
use crate::losses::{
    bc_ecl_bound, bc_ecl_loss, bcl_bound, bcl_loss, cc_ge_loss, lc_loss, total_loss, ContrastBatch,
    LossConfig, Priors, PrototypeSet, PrototypeSource,
};
use crate::metrics;
use crate::model::{ModelParams, NetConfig};
use crate::tensor::Tensor;

pub const BOUND_SLACK: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_EPS: f64 = 1e-5;
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub check: String,
    pub detail: String,
    /// Enough data to replay the failing case.
    pub instance: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: usize,
    /// Worst observed value of the suite's error measure.
    pub max_violation: f64,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.into(),
            checks: 0,
            max_violation: f64::NEG_INFINITY,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, value: f64, ok: bool, failure: impl FnOnce() -> Failure) {
        self.checks += 1;
        self.max_violation = self.max_violation.max(value);
        if !ok {
            self.failures.push(failure());
        }
    }
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_raw(rows, cols, data)
}

/// Random unit rows (Gaussian directions).
pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    loop {
        if let Ok(t) = gaussian(rng, rows, cols).normalize_rows() {
            return t;
        }
    }
}

/// Labels in which every occurring class appears at least twice.
pub fn paired_labels(rng: &mut impl Rng, n: usize, num_classes: usize) -> Vec<usize> {
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let c = rng.gen_range(0..num_classes);
        labels.extend([c, c]);
    }
    if n % 2 == 1 {
        let c = labels.first().copied().unwrap_or(0);
        labels.push(c);
    }
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    labels
}

/// Random contrastive batch with prototypes, as plain data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContrastInstance {
    pub z: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub prototypes: Tensor,
}

impl ContrastInstance {
    pub fn random(rng: &mut impl Rng, num_classes: usize, dim: usize, batch: usize) -> Self {
        Self {
            z: unit_rows(rng, batch, dim),
            labels: paired_labels(rng, batch, num_classes),
            num_classes,
            prototypes: gaussian(rng, dim, num_classes),
        }
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Result<(ContrastBatch<'t>, PrototypeSet<'t>)> {
        Ok((
            ContrastBatch::new(
                tape.leaf(self.z.clone()),
                self.labels.clone(),
                self.num_classes,
            )?,
            PrototypeSet::new(
                tape.leaf(self.prototypes.clone()),
                PrototypeSource::LinearTransform,
            ),
        ))
    }

    fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or_default()
    }
}

/// Loss ≥ bound − slack for both the balanced loss and the baseline, at `τ = 1`.
pub fn bounds_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("bounds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (c, f, b) = (
            rng.gen_range(2..=4),
            rng.gen_range(2..=8),
            rng.gen_range(4..=16),
        );
        let inst = ContrastInstance::random(&mut rng, c, f, b);
        let tape = Tape::new();
        let (batch, protos) = inst.on_tape(&tape)?;
        let pairs = [
            (
                "bc_ecl",
                bc_ecl_loss(&batch, &protos, 1.0)?.item(),
                bc_ecl_bound(&batch, &protos)?,
            ),
            (
                "bcl",
                bcl_loss(&batch, &protos, 1.0)?.item(),
                bcl_bound(&batch, &protos)?,
            ),
        ];
        for (name, loss, bound) in pairs {
            let gap = bound - loss;
            report.record(gap, gap <= BOUND_SLACK, || Failure {
                check: name.into(),
                detail: format!("loss {loss} below bound {bound}"),
                instance: inst.json(),
            });
        }
    }
    Ok(report)
}

/// Smallest |pre-activation| over every ReLU the model applies to `inputs`.
pub fn min_relu_margin(params: &ModelParams, inputs: &Tensor) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let mut track = |t: &Tensor| {
        for v in t.data() {
            margin = margin.min(v.abs());
        }
    };
    let mut h = inputs.clone();
    for layer in &params.extractor {
        let mut a = h.matmul(&layer.weight.transpose())?;
        for r in 0..a.rows() {
            for k in 0..a.cols() {
                a.set(r, k, a.get(r, k) + layer.bias.get(0, k));
            }
        }
        track(&a);
        h = a.map(|v| v.max(0.0));
    }
    track(&h.matmul(&params.projector[0].transpose())?);
    if let Some(m) = &params.proto_mlp {
        track(&m[0].matmul(&params.w.transpose())?);
    }
    Ok(margin)
}

/// Minimum ReLU margin accepted for finite-difference instances.
const KINK_MARGIN: f64 = 1e-3;

/// Random small model plus three input views for end-to-end checks.
#[derive(Clone, Debug, Serialize)]
pub struct ModelInstance {
    pub params: ModelParams,
    pub views: [Tensor; 3],
    pub labels: Vec<usize>,
    pub priors: Vec<f64>,
    pub loss: LossConfig,
}

impl ModelInstance {
    /// `C=3, F=4, D=2, H=8`, 12 samples per view; resampled until no ReLU
    /// input sits near its kink and no projector row vanishes.
    pub fn random(rng: &mut impl Rng, source: PrototypeSource) -> Result<Self> {
        loop {
            let net = NetConfig {
                input_dim: 2,
                feature_dim: 4,
                proj_hidden: 8,
                num_classes: 3,
                extractor_hidden: vec![8],
                seed: rng.gen(),
            };
            let mut params = ModelParams::init(&net, source)?;
            params.t = gaussian(rng, 4, 4).scale(0.5);
            for i in 0..4 {
                params.t.set(i, i, params.t.get(i, i) + 1.0);
            }
            let x = gaussian(rng, 12, 2);
            let views = [
                x.zip_map(&gaussian(rng, 12, 2), |a, e| a + 0.1 * e),
                x.zip_map(&gaussian(rng, 12, 2), |a, e| a + 0.1 * e),
                x.zip_map(&gaussian(rng, 12, 2), |a, e| a + 0.1 * e),
            ];
            let all = views[0].vstack(&views[1])?.vstack(&views[2])?;
            if min_relu_margin(&params, &all)? < KINK_MARGIN {
                continue;
            }
            let f = params.features(&views[1].vstack(&views[2])?)?;
            let hidden = f
                .matmul(&params.projector[0].transpose())?
                .map(|v| v.max(0.0));
            let raw = hidden.matmul(&params.projector[1].transpose())?;
            if (0..raw.rows()).any(|r| raw.row(r).iter().map(|v| v * v).sum::<f64>() < 1e-6) {
                continue;
            }
            let labels = paired_labels(rng, 12, 3);
            let mut h: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= s);
            let loss = LossConfig {
                tau: rng.gen_range(0.2..1.0),
                prototype_source: source,
                ..LossConfig::default()
            };
            return Ok(Self {
                params,
                views,
                labels,
                priors: h,
                loss,
            });
        }
    }

    /// Total loss with every parameter tensor replaced by `vars`.
    pub fn total<'t>(&self, tape: &'t Tape, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let pv = crate::model::ParamVars::from_vars(&self.params, vars)?;
        let c = self.params.config.num_classes;
        let cl = tape.constant(self.views[1].vstack(&self.views[2])?);
        let z = pv.project(pv.extract(cl)?)?;
        let cl_labels: Vec<usize> = self.labels.iter().chain(&self.labels).copied().collect();
        let batch = ContrastBatch::new(z, cl_labels, c)?;
        let protos = pv.prototypes(self.loss.prototype_source, None)?;
        let l_ecl = bc_ecl_loss(&batch, &protos, self.loss.tau)?;
        let l_ccge = cc_ge_loss(pv.w(), &protos)?;
        let logits = pv.classify(pv.extract(tape.constant(self.views[0].clone()))?)?;
        let l_lc = lc_loss(logits, &self.labels, &Priors::new(self.priors.clone())?)?;
        total_loss([l_ecl, l_ccge, l_lc], &self.loss)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params
            .tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }
}

fn grad_check(
    report: &mut SuiteReport,
    check: &str,
    instance: serde_json::Value,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    params: &[Tensor],
) -> Result<()> {
    let r = check_gradient(f, params, GRAD_EPS)?;
    let worst = r.max_rel_error;
    report.record(worst, worst <= GRAD_TOL, || Failure {
        check: check.into(),
        detail: format!("relative error {worst:e} at {:?}", r.worst),
        instance,
    });
    Ok(())
}

fn contrastive<'t>(
    v: &[Var<'t>],
    labels: &[usize],
    c: usize,
    tau: f64,
    bcl: bool,
) -> Result<Var<'t>> {
    let batch = ContrastBatch::new(v[0].normalize_rows()?, labels.to_vec(), c)?;
    let protos = PrototypeSet::new(v[1], PrototypeSource::LinearTransform);
    if bcl {
        bcl_loss(&batch, &protos, tau)
    } else {
        bc_ecl_loss(&batch, &protos, tau)
    }
}

/// Reverse-mode gradients of every loss (and of the full model objective)
/// against central differences.
pub fn gradients_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let c = rng.gen_range(2..=4);
        let (f, b) = (rng.gen_range(2..=6), rng.gen_range(4..=10));
        let inst = ContrastInstance::random(&mut rng, c, f, b);
        let tau: f64 = rng.gen_range(0.2..1.0);
        let noise = gaussian(&mut rng, b, f);
        let raw_z = inst.z.zip_map(&noise, |a, e| a + 0.2 * e);
        let params = [raw_z, inst.prototypes.clone()];
        let labels = &inst.labels;
        let json = json!({ "instance": inst.json(), "tau": tau, "raw_z": params[0] });
        grad_check(
            &mut report,
            "bc_ecl_loss",
            json.clone(),
            |_, v| contrastive(v, labels, c, tau, false),
            &params,
        )?;
        grad_check(
            &mut report,
            "bcl_loss",
            json,
            |_, v| contrastive(v, labels, c, tau, true),
            &params,
        )?;

        let f = rng.gen_range(2..=6);
        let w = gaussian(&mut rng, c, f);
        let p = gaussian(&mut rng, f, c);
        grad_check(
            &mut report,
            "cc_ge_loss",
            json!({ "w": w, "p": p }),
            |_, v| {
                cc_ge_loss(
                    v[0],
                    &PrototypeSet::new(v[1], PrototypeSource::LinearTransform),
                )
            },
            &[w.clone(), p.clone()],
        )?;

        let n = rng.gen_range(1..=10);
        let logits = gaussian(&mut rng, n, c).scale(2.0);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut h: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= s);
        let priors = Priors::new(h.clone())?;
        grad_check(
            &mut report,
            "lc_loss",
            json!({ "logits": logits, "labels": y, "priors": h }),
            |_, v| lc_loss(v[0], &y, &priors),
            std::slice::from_ref(&logits),
        )?;

        let model = ModelInstance::random(&mut rng, PrototypeSource::LinearTransform)?;
        let tensors = model.tensors();
        grad_check(
            &mut report,
            "total_loss",
            serde_json::to_value(&model).unwrap_or_default(),
            |tape, v| model.total(tape, v),
            &tensors,
        )?;
    }
    Ok(report)
}

/// Fraction of instances in which the baseline must react to a duplicate.
pub const DUPLICATION_BCL_RATE: f64 = 0.95;
pub const DUPLICATION_BCL_MIN_CHANGE: f64 = 1e-6;

/// Random batch in which every view of class `labels[0]` sits at one point.
pub fn duplication_instance(rng: &mut impl Rng) -> ContrastInstance {
    let (c, f, b) = (
        rng.gen_range(2..=4),
        rng.gen_range(2..=8),
        rng.gen_range(4..=16),
    );
    let mut inst = ContrastInstance::random(rng, c, f, b);
    let target = inst.labels[0];
    let point = inst.z.row(0).to_vec();
    for (i, &y) in inst.labels.iter().enumerate() {
        if y == target {
            for (k, &v) in point.iter().enumerate() {
                inst.z.set(i, k, v);
            }
        }
    }
    inst
}

/// `|Δ bc_ecl|` and `|Δ bcl|` when a copy of row 0 joins the batch as a
/// contrast member (the anchor set is unchanged).
pub fn duplication_delta(inst: &ContrastInstance, tau: f64) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let (batch, protos) = inst.on_tape(&tape)?;
    let n = inst.labels.len();
    let z = inst.z.vstack(&inst.z.select_rows(&[0]))?;
    let mut labels = inst.labels.clone();
    labels.push(inst.labels[0]);
    let grown =
        ContrastBatch::with_anchors(tape.leaf(z), labels, inst.num_classes, (0..n).collect())?;
    let ecl = bc_ecl_loss(&grown, &protos, tau)?.item() - bc_ecl_loss(&batch, &protos, tau)?.item();
    let bcl = bcl_loss(&grown, &protos, tau)?.item() - bcl_loss(&batch, &protos, tau)?.item();
    Ok((ecl.abs(), bcl.abs()))
}

/// Per-instance `(|Δ bc_ecl|, |Δ bcl|)` over random duplication instances.
pub fn duplication_deltas(instances: usize, seed: u64, tau: f64) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| duplication_delta(&duplication_instance(&mut rng), tau))
        .collect()
}

/// Duplicating a view leaves the balanced loss unchanged while the baseline
/// moves in at least [`DUPLICATION_BCL_RATE`] of the instances.
pub fn duplication_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("duplication");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moved = 0;
    for _ in 0..instances {
        let inst = duplication_instance(&mut rng);
        let (ecl, bcl) = duplication_delta(&inst, 1.0)?;
        if bcl > DUPLICATION_BCL_MIN_CHANGE {
            moved += 1;
        }
        report.record(ecl, ecl <= EXACT_TOL, || Failure {
            check: "bc_ecl".into(),
            detail: format!("duplicate changed the loss by {ecl:e}"),
            instance: inst.json(),
        });
    }
    let rate = moved as f64 / instances.max(1) as f64;
    report.checks += 1;
    if rate < DUPLICATION_BCL_RATE {
        report.failures.push(Failure {
            check: "bcl".into(),
            detail: format!("baseline changed in only {moved} of {instances} instances"),
            instance: json!({ "moved": moved, "instances": instances }),
        });
    }
    Ok(report)
}

/// Exact reference values of the losses and of SD.
pub fn trivials_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport::new("trivials");
    let mut check = |name: &str, got: f64, want: f64| {
        let err = (got - want).abs();
        report.record(err, err <= EXACT_TOL, || Failure {
            check: name.into(),
            detail: format!("got {got}, expected {want}"),
            instance: json!({ "got": got, "expected": want }),
        });
    };

    let tape = Tape::new();
    let v = vec![0.6, 0.8];
    let collapsed = Tensor::from_rows(&[v.clone(), v.clone(), v.clone(), v.clone()])?;
    let batch = ContrastBatch::new(tape.leaf(collapsed), vec![0, 1, 0, 1], 2)?;
    let p = Tensor::from_rows(&[vec![0.6, 0.6], vec![0.8, 0.8]])?;
    let protos = PrototypeSet::new(tape.leaf(p), PrototypeSource::LinearTransform);
    check(
        "bc_ecl full collapse",
        bc_ecl_loss(&batch, &protos, 1.0)?.item(),
        4f64.ln(),
    );
    check(
        "bcl full collapse",
        bcl_loss(&batch, &protos, 1.0)?.item(),
        2f64.ln(),
    );

    let w = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.7, 0.1, -0.4]])?;
    let wv = tape.leaf(w.clone());
    let same = PrototypeSet::new(tape.leaf(w.transpose()), PrototypeSource::LinearTransform);
    let flip = PrototypeSet::new(
        tape.leaf(w.transpose().scale(-1.0)),
        PrototypeSource::LinearTransform,
    );
    check("cc_ge aligned", cc_ge_loss(wv, &same)?.item(), 0.0);
    check("cc_ge antipodal", cc_ge_loss(wv, &flip)?.item(), 4.0);

    let logits = tape.leaf(Tensor::zeros(3, 2));
    check(
        "lc uniform",
        lc_loss(logits, &[0, 1, 1], &Priors::uniform(2))?.item(),
        2f64.ln(),
    );

    // class means (1, 0.5, 0) and (-1, -0.5, 0) are already centered
    let feats = Tensor::from_rows(&[
        vec![1.5, 0.5, 0.2],
        vec![0.5, 0.5, -0.2],
        vec![-1.0, -0.5, 0.0],
    ])?;
    let m = Tensor::from_rows(&[vec![1.0, 0.5, 0.0], vec![-1.0, -0.5, 0.0]])?;
    check(
        "sd proportional",
        metrics::sd(&m.scale(2.5), &feats, &[0, 0, 1], 2)?,
        0.0,
    );
    Ok(report)
}
