//! Feature extractor, projector, linear classifier and prototype head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{PrototypeSet, PrototypeSource};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Hidden width of the projector (and of the nonlinear prototype head).
    pub proj_hidden: usize,
    pub num_classes: usize,
    /// Hidden widths of the extractor MLP; empty means a single layer `D→F`.
    pub extractor_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            feature_dim: 16,
            proj_hidden: 32,
            num_classes: 4,
            extractor_hidden: vec![32],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("proj_hidden", self.proj_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.extractor_hidden.contains(&0) {
            return Err(Error::Config("extractor widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x·Wᵀ + b` with `W` stored `out×in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Extractor,
    Projector,
    ClassifierWeight,
    ClassifierBias,
    Transform,
    PrototypeMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: NetConfig,
    pub extractor: Vec<Linear>,
    /// `[H×F, F×H]`, bias-free
    pub projector: [Tensor; 2],
    /// `C×F`
    pub w: Tensor,
    /// `1×C`
    pub b: Tensor,
    /// `F×F`, bias-free
    pub t: Tensor,
    /// `[H×F, F×H]`; only present for the nonlinear prototype head.
    pub proto_mlp: Option<[Tensor; 2]>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_raw(rows, cols, data)
}

impl ModelParams {
    /// Uniform `±1/√fan_in` initialization; `T` starts at the identity.
    pub fn init(config: &NetConfig, source: PrototypeSource) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, h, c) = (config.feature_dim, config.proj_hidden, config.num_classes);

        let mut widths = vec![config.input_dim];
        widths.extend(&config.extractor_hidden);
        widths.push(f);
        let extractor = widths
            .windows(2)
            .map(|io| Linear {
                weight: uniform(&mut rng, io[1], io[0], io[0]),
                bias: uniform(&mut rng, 1, io[1], io[0]),
            })
            .collect();
        let projector = [uniform(&mut rng, h, f, f), uniform(&mut rng, f, h, h)];
        let w = uniform(&mut rng, c, f, f);
        let b = uniform(&mut rng, 1, c, f);
        let t = Tensor::identity(f);
        let proto_mlp = (source == PrototypeSource::NonlinearMlp)
            .then(|| [uniform(&mut rng, h, f, f), uniform(&mut rng, f, h, h)]);

        Ok(Self {
            config: config.clone(),
            extractor,
            projector,
            w,
            b,
            t,
            proto_mlp,
        })
    }

    /// All tensors in a fixed order, tagged with their group.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for layer in &self.extractor {
            out.push((ParamGroup::Extractor, &layer.weight));
            out.push((ParamGroup::Extractor, &layer.bias));
        }
        out.push((ParamGroup::Projector, &self.projector[0]));
        out.push((ParamGroup::Projector, &self.projector[1]));
        out.push((ParamGroup::ClassifierWeight, &self.w));
        out.push((ParamGroup::ClassifierBias, &self.b));
        out.push((ParamGroup::Transform, &self.t));
        if let Some(m) = &self.proto_mlp {
            out.push((ParamGroup::PrototypeMlp, &m[0]));
            out.push((ParamGroup::PrototypeMlp, &m[1]));
        }
        out
    }

    /// Mutable tensors, in the order of [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.extractor {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        let [p0, p1] = &mut self.projector;
        out.push(p0);
        out.push(p1);
        out.push(&mut self.w);
        out.push(&mut self.b);
        out.push(&mut self.t);
        if let Some([m0, m1]) = &mut self.proto_mlp {
            out.push(m0);
            out.push(m1);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .tensors()
                .into_iter()
                .map(|(g, t)| (g, tape.leaf(t.clone())))
                .collect(),
            layers: self.extractor.len(),
        }
    }

    /// Inference-time features `f = extract(x)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let pv = self.on_tape(&tape);
        Ok(pv.extract(tape.constant(x.clone()))?.value())
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let pv = self.on_tape(&tape);
        Ok(pv.classify(tape.constant(features.clone()))?.value())
    }

    pub fn representations(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let pv = self.on_tape(&tape);
        Ok(pv.project(tape.constant(features.clone()))?.value())
    }
}

/// Model parameters registered on a tape.
pub struct ParamVars<'t> {
    vars: Vec<(ParamGroup, Var<'t>)>,
    layers: usize,
}

impl<'t> ParamVars<'t> {
    /// Wraps externally created vars, one per tensor of `params` in the order
    /// of [`ModelParams::tensors`].
    pub fn from_vars(params: &ModelParams, vars: &[Var<'t>]) -> Result<Self> {
        let tensors = params.tensors();
        if vars.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameter tensors",
                vars.len(),
                tensors.len()
            )));
        }
        for ((_, t), v) in tensors.iter().zip(vars) {
            if t.shape() != v.shape() {
                return Err(Error::shape("param vars", t.shape(), v.shape()));
            }
        }
        Ok(Self {
            vars: tensors
                .iter()
                .zip(vars)
                .map(|((g, _), v)| (*g, *v))
                .collect(),
            layers: params.extractor.len(),
        })
    }

    pub fn all(&self) -> &[(ParamGroup, Var<'t>)] {
        &self.vars
    }

    fn at(&self, k: usize) -> Var<'t> {
        self.vars[k].1
    }

    fn after_extractor(&self) -> usize {
        2 * self.layers
    }

    pub fn w(&self) -> Var<'t> {
        self.at(self.after_extractor() + 2)
    }

    pub fn b(&self) -> Var<'t> {
        self.at(self.after_extractor() + 3)
    }

    pub fn t(&self) -> Var<'t> {
        self.at(self.after_extractor() + 4)
    }

    /// Extractor MLP: every layer affine followed by ReLU.
    pub fn extract(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for l in 0..self.layers {
            let (w, b) = (self.at(2 * l), self.at(2 * l + 1));
            if h.shape().1 != w.shape().1 {
                return Err(Error::shape("extract", h.shape(), w.shape()));
            }
            h = h.matmul(w.transpose())?.add_row(b)?.relu();
        }
        Ok(h)
    }

    /// Projector `F→H→F` with ReLU between, then row ℓ2-normalization.
    pub fn project(&self, f: Var<'t>) -> Result<Var<'t>> {
        let k = self.after_extractor();
        let (p0, p1) = (self.at(k), self.at(k + 1));
        if f.shape().1 != p0.shape().1 {
            return Err(Error::shape("project", f.shape(), p0.shape()));
        }
        f.matmul(p0.transpose())?
            .relu()
            .matmul(p1.transpose())?
            .normalize_rows()
    }

    /// Logits `f·Wᵀ + b`.
    pub fn classify(&self, f: Var<'t>) -> Result<Var<'t>> {
        let w = self.w();
        if f.shape().1 != w.shape().1 {
            return Err(Error::shape("classify", f.shape(), w.shape()));
        }
        f.matmul(w.transpose())?.add_row(self.b())
    }

    /// Builds the prototype matrix `P` (`F×C`).
    ///
    /// `snapshot` supplies representations and labels for the class-means
    /// source and is ignored otherwise.
    pub fn prototypes(
        &self,
        source: PrototypeSource,
        snapshot: Option<(Var<'t>, &[usize])>,
    ) -> Result<PrototypeSet<'t>> {
        let w = self.w();
        let matrix = match source {
            PrototypeSource::LinearTransform => self.t().matmul(w.transpose())?,
            PrototypeSource::NonlinearMlp => {
                let k = self.after_extractor() + 5;
                if self.vars.len() < k + 2 {
                    return Err(Error::Unavailable(
                        "model was initialized without a nonlinear prototype head".into(),
                    ));
                }
                let (m0, m1) = (self.at(k), self.at(k + 1));
                m1.matmul(m0.matmul(w.transpose())?.relu())?
            }
            PrototypeSource::ClassMeans => {
                let (z, labels) = snapshot.ok_or_else(|| {
                    Error::Unavailable(
                        "class-means prototypes need a representation snapshot".into(),
                    )
                })?;
                let c = w.shape().0;
                let mut rows = vec![Vec::new(); c];
                for (i, &y) in labels.iter().enumerate() {
                    if y < c {
                        rows[y].push(i);
                    }
                }
                let means = rows
                    .iter()
                    .enumerate()
                    .map(|(cls, idx)| {
                        if idx.is_empty() {
                            Err(Error::Unavailable(format!(
                                "class {cls} has no samples, its mean cannot be computed"
                            )))
                        } else {
                            z.mean_rows(idx)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Var::stack_rows(&means)?.transpose()
            }
        };
        Ok(PrototypeSet::new(matrix, source))
    }

    /// Gradients in the order of [`ModelParams::tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|(_, v)| grads.wrt(v)).collect()
    }
}

const CHECKPOINT_FORMAT: &str = "ecl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus the epoch they were saved at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(epoch: usize, params: ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.params.config.validate()?;
        ck.params.check_shapes()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl ModelParams {
    fn check_shapes(&self) -> Result<()> {
        let cfg = &self.config;
        let (f, h, c) = (cfg.feature_dim, cfg.proj_hidden, cfg.num_classes);
        let mut widths = vec![cfg.input_dim];
        widths.extend(&cfg.extractor_hidden);
        widths.push(f);
        let mut expected: Vec<(usize, usize)> = Vec::new();
        for io in widths.windows(2) {
            expected.push((io[1], io[0]));
            expected.push((1, io[1]));
        }
        expected.extend([(h, f), (f, h), (c, f), (1, c), (f, f)]);
        if self.proto_mlp.is_some() {
            expected.extend([(h, f), (f, h)]);
        }
        let got: Vec<_> = self.tensors().iter().map(|(_, t)| t.shape()).collect();
        if got != expected {
            return Err(Error::Parse(format!(
                "parameter shapes {got:?} do not match config (expected {expected:?})"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            input_dim: 2,
            feature_dim: 2,
            proj_hidden: 2,
            num_classes: 2,
            extractor_hidden: vec![],
            seed: 3,
        }
    }

    #[test]
    fn identity_extractor_on_identity_input() {
        let mut p = ModelParams::init(&tiny(), PrototypeSource::LinearTransform).unwrap();
        p.extractor[0].weight = Tensor::identity(2);
        p.extractor[0].bias = Tensor::zeros(1, 2);
        assert_eq!(
            p.features(&Tensor::identity(2)).unwrap(),
            Tensor::identity(2)
        );
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let mut p =
            ModelParams::init(&NetConfig::default(), PrototypeSource::LinearTransform).unwrap();
        for l in &mut p.extractor {
            l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
            l.bias = Tensor::zeros(1, l.bias.cols());
        }
        let x = Tensor::filled(5, 8, 0.7);
        assert_eq!(p.features(&x).unwrap(), Tensor::zeros(5, 16));
    }

    #[test]
    fn identity_projector_only_normalizes() {
        let mut p = ModelParams::init(&tiny(), PrototypeSource::LinearTransform).unwrap();
        p.projector = [Tensor::identity(2), Tensor::identity(2)];
        let z = p
            .representations(&Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap())
            .unwrap();
        assert!((z.get(0, 0) - 0.6).abs() < 1e-15 && (z.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn projector_rows_are_unit() {
        let p = ModelParams::init(&NetConfig::default(), PrototypeSource::LinearTransform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&mut rng, 20, 8, 1);
        let z = p.representations(&p.features(&x).unwrap()).unwrap();
        for r in 0..z.rows() {
            let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn classifier_cases() {
        let mut p = ModelParams::init(&tiny(), PrototypeSource::LinearTransform).unwrap();
        p.w = Tensor::zeros(2, 2);
        p.b = Tensor::zeros(1, 2);
        assert_eq!(
            p.logits(&Tensor::filled(3, 2, 1.5)).unwrap(),
            Tensor::zeros(3, 2)
        );
        p.w = Tensor::identity(2);
        let e1 = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(p.logits(&e1).unwrap(), e1);
    }

    #[test]
    fn linear_prototypes_with_identity_transform() {
        let p = ModelParams::init(&NetConfig::default(), PrototypeSource::LinearTransform).unwrap();
        let tape = Tape::new();
        let pv = p.on_tape(&tape);
        let set = pv
            .prototypes(PrototypeSource::LinearTransform, None)
            .unwrap();
        assert_eq!(set.matrix().value(), p.w.transpose());
        let unit = set.unit_columns().unwrap().value();
        let expected = p.w.normalize_rows().unwrap().transpose();
        assert!(unit.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn class_means_prototypes() {
        let p = ModelParams::init(&tiny(), PrototypeSource::ClassMeans).unwrap();
        let tape = Tape::new();
        let pv = p.on_tape(&tape);
        let z = tape.constant(
            Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap(),
        );
        let labels = [0, 1, 0];
        let set = pv
            .prototypes(PrototypeSource::ClassMeans, Some((z, &labels)))
            .unwrap();
        assert_eq!(
            set.matrix().value(),
            Tensor::from_rows(&[vec![0.6, 1.0], vec![0.8, 0.0]]).unwrap()
        );

        let missing = [0, 0, 0];
        let err = pv
            .prototypes(PrototypeSource::ClassMeans, Some((z, &missing)))
            .unwrap_err();
        assert!(
            matches!(&err, Error::Unavailable(m) if m.contains("class 1")),
            "{err}"
        );
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&NetConfig::default(), PrototypeSource::NonlinearMlp).unwrap();
        let b = ModelParams::init(&NetConfig::default(), PrototypeSource::NonlinearMlp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let p = ModelParams::init(&NetConfig::default(), PrototypeSource::NonlinearMlp).unwrap();
        let ck = Checkpoint::new(7, p);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.params.tensors().iter().zip(back.params.tensors()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
