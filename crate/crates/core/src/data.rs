//! Synthetic long-tailed Gaussian blobs, view augmentation and batching.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Priors;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterLayout {
    /// Centered standard basis vectors of `R^C`, embedded in the first `C`
    /// input coordinates (needs `C ≤ D`).
    Simplex,
    /// Random directions with a minimum pairwise distance.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Training count of the largest class.
    pub n_max: usize,
    /// Imbalance factor `N_max / N_min`.
    pub rho: f64,
    pub n_test_per_class: usize,
    pub centers: CenterLayout,
    /// Norm of every class center.
    pub center_radius: f64,
    /// Only used by the random layout, as a fraction of `center_radius`.
    pub min_center_distance: f64,
    pub sigma_class: f64,
    pub sigma_aug: f64,
    pub scale_jitter: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 8,
            n_max: 200,
            rho: 10.0,
            n_test_per_class: 100,
            centers: CenterLayout::Simplex,
            center_radius: 1.0,
            min_center_distance: 0.5,
            sigma_class: 0.35,
            sigma_aug: 0.05,
            scale_jitter: [0.9, 1.1],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.input_dim == 0 || self.n_max == 0 {
            return bad("input_dim and n_max must be >= 1".into());
        }
        if !(self.rho.is_finite() && self.rho >= 1.0) {
            return bad(format!("rho must be >= 1, got {}", self.rho));
        }
        if self.centers == CenterLayout::Simplex && self.num_classes > self.input_dim {
            return bad(format!(
                "simplex centers need num_classes <= input_dim ({} > {})",
                self.num_classes, self.input_dim
            ));
        }
        for (name, v) in [
            ("center_radius", self.center_radius),
            ("min_center_distance", self.min_center_distance),
            ("sigma_class", self.sigma_class),
            ("sigma_aug", self.sigma_aug),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        let [lo, hi] = self.scale_jitter;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "scale_jitter must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            ));
        }
        Ok(())
    }

    /// Training counts `round(n_max · ρ^(−c/(C−1)))`, at least 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let cm1 = (self.num_classes - 1) as f64;
        (0..self.num_classes)
            .map(|c| {
                let n = self.n_max as f64 * self.rho.powf(-(c as f64) / cm1);
                (n.round() as usize).max(1)
            })
            .collect()
    }

    pub fn augmentation(&self) -> Augmentation {
        Augmentation {
            sigma_aug: self.sigma_aug,
            scale_jitter: self.scale_jitter,
        }
    }

    fn make_centers(&self, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (c, d) = (self.num_classes, self.input_dim);
        let mut centers = Tensor::zeros(c, d);
        match self.centers {
            CenterLayout::Simplex => {
                let off = 1.0 / c as f64;
                let norm = ((1.0 - off) * (1.0 - off) + (c as f64 - 1.0) * off * off).sqrt();
                for r in 0..c {
                    for k in 0..c {
                        let v = if r == k { 1.0 - off } else { -off };
                        centers.set(r, k, self.center_radius * v / norm);
                    }
                }
            }
            CenterLayout::Random => {
                let min_dist = self.min_center_distance * self.center_radius;
                let mut placed = 0;
                for _ in 0..100_000 {
                    if placed == c {
                        break;
                    }
                    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let v: Vec<f64> = v.iter().map(|x| self.center_radius * x / n).collect();
                    let far = (0..placed).all(|r| {
                        centers
                            .row(r)
                            .iter()
                            .zip(&v)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            >= min_dist * min_dist
                    });
                    if far {
                        for (k, x) in v.into_iter().enumerate() {
                            centers.set(placed, k, x);
                        }
                        placed += 1;
                    }
                }
                if placed < c {
                    return Err(Error::Config(format!(
                        "could not place {c} centers at distance >= {min_dist}"
                    )));
                }
            }
        }
        Ok(centers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
    pub counts: Vec<usize>,
    pub priors: Priors,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Contract(format!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            )));
        }
        let mut counts = vec![0; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::Contract(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Unavailable(format!(
                "class {c} has no {split:?} samples"
            )));
        }
        let priors = Priors::from_labels(&labels, num_classes)?;
        Ok(Self {
            inputs,
            labels,
            split,
            num_classes,
            counts,
            priors,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// `label,x1,...,xD` with one sample per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for k in 1..=self.input_dim() {
            let _ = write!(out, ",x{k}");
        }
        out.push('\n');
        for (i, &y) in self.labels.iter().enumerate() {
            let _ = write!(out, "{y}");
            for v in self.inputs.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, num_classes: usize, split: Split) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("line 1: empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let dim = cols.len() - 1;
        let header_ok = cols[0] == "label"
            && dim >= 1
            && cols[1..]
                .iter()
                .enumerate()
                .all(|(k, c)| *c == format!("x{}", k + 1));
        if !header_ok {
            return Err(Error::Parse(format!(
                "line 1: expected header label,x1,...,xD, got {header:?}"
            )));
        }
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected {} fields, got {}",
                    dim + 1,
                    fields.len()
                )));
            }
            let y: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("line {lineno}: bad label {:?}", fields[0])))?;
            if y >= num_classes {
                return Err(Error::Parse(format!(
                    "line {lineno}: label {y} out of range for {num_classes} classes"
                )));
            }
            labels.push(y);
            for f in &fields[1..] {
                let v: f64 = f
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: bad value {f:?}")))?;
                data.push(v);
            }
        }
        let inputs = Tensor::new(labels.len(), dim, data)?;
        Self::new(inputs, labels, num_classes, split)
    }
}

/// Generates a long-tailed training split and a balanced test split.
pub fn make_longtailed(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = spec.make_centers(&mut rng)?;
    let noise = Normal::new(0.0, spec.sigma_class)
        .map_err(|e| Error::Config(format!("sigma_class: {e}")))?;
    let mut sample = |counts: &[usize], split: Split| {
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                labels.push(c);
                data.extend(centers.row(c).iter().map(|m| m + noise.sample(&mut rng)));
            }
        }
        Dataset::new(
            Tensor::new(labels.len(), spec.input_dim, data)?,
            labels,
            spec.num_classes,
            split,
        )
    };
    let train = sample(&spec.class_counts(), Split::Train)?;
    let test = sample(
        &vec![spec.n_test_per_class.max(1); spec.num_classes],
        Split::Test,
    )?;
    Ok((train, test))
}

/// Noise-plus-scale augmentation `x̃ = s·(x + ε)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub sigma_aug: f64,
    pub scale_jitter: [f64; 2],
}

impl Augmentation {
    /// One augmented view; `view` is 1 (classifier branch) or 2, 3
    /// (contrastive branch). Every view uses the same recipe.
    pub fn augment(&self, x: &Tensor, view: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if !(1..=3).contains(&view) {
            return Err(Error::Contract(format!(
                "view index must be 1, 2 or 3, got {view}"
            )));
        }
        let noise = Normal::new(0.0, self.sigma_aug)
            .map_err(|e| Error::Config(format!("sigma_aug: {e}")))?;
        let [lo, hi] = self.scale_jitter;
        let mut out = x.clone();
        for r in 0..x.rows() {
            let s = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            for k in 0..x.cols() {
                out.set(r, k, s * (x.get(r, k) + noise.sample(rng)));
            }
        }
        Ok(out)
    }
}

/// Shuffles `0..n` once and cuts it into batches of `b` (last one may be short).
pub fn batches(n: usize, b: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if b == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(b).map(<[usize]>::to_vec).collect())
}

/// `class,count,prior` rows of a training split.
pub fn priors_csv(ds: &Dataset) -> String {
    let mut out = String::from("class,count,prior\n");
    for (c, (&k, h)) in ds.counts.iter().zip(ds.priors.values()).enumerate() {
        let _ = writeln!(out, "{c},{k},{h}");
    }
    out
}

pub const SIDECAR: &str = "dataset.json";

/// Writes `train.csv`, `test.csv`, `priors.csv` and the generating spec.
pub fn export_dir(dir: &Path, spec: &SyntheticSpec, train: &Dataset, test: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train.csv"), train.to_csv())?;
    std::fs::write(dir.join("test.csv"), test.to_csv())?;
    std::fs::write(dir.join("priors.csv"), priors_csv(train))?;
    std::fs::write(
        dir.join(SIDECAR),
        serde_json::to_string_pretty(spec)? + "\n",
    )?;
    Ok(())
}

/// Reads a directory written by [`export_dir`].
pub fn import_dir(dir: &Path) -> Result<(SyntheticSpec, Dataset, Dataset)> {
    let spec: SyntheticSpec = serde_json::from_str(&std::fs::read_to_string(dir.join(SIDECAR))?)?;
    let read = |name: &str, split| -> Result<Dataset> {
        let text = std::fs::read_to_string(dir.join(name))?;
        Dataset::from_csv(&text, spec.num_classes, split)
            .map_err(|e| Error::Parse(format!("{name}: {e}")))
    };
    let train = read("train.csv", Split::Train)?;
    let test = read("test.csv", Split::Test)?;
    Ok((spec, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_max: 100,
            rho,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn balanced_profile() {
        assert_eq!(spec(1.0).class_counts(), vec![100; 4]);
    }

    #[test]
    fn long_tail_profile() {
        assert_eq!(spec(100.0).class_counts(), vec![100, 22, 5, 1]);
    }

    #[test]
    fn splits_and_priors() {
        let (train, test) = make_longtailed(&spec(100.0)).unwrap();
        assert_eq!(train.counts, vec![100, 22, 5, 1]);
        assert_eq!(test.counts, vec![100; 4]);
        assert!((train.priors.values()[1] - 22.0 / 128.0).abs() < 1e-15);
    }

    #[test]
    fn simplex_centers_are_unit_and_equiangular() {
        let s = SyntheticSpec::default();
        let c = s.make_centers(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = c.matmul(&c.transpose()).unwrap();
        for a in 0..4 {
            assert!((g.get(a, a) - 1.0).abs() < 1e-12);
            for b in 0..4 {
                if a != b {
                    assert!((g.get(a, b) + 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_centers_respect_distance() {
        let s = SyntheticSpec {
            centers: CenterLayout::Random,
            min_center_distance: 1.0,
            ..SyntheticSpec::default()
        };
        let c = s.make_centers(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for a in 0..4 {
            for b in 0..a {
                let d: f64 = c
                    .row(a)
                    .iter()
                    .zip(c.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(d.sqrt() >= 1.0);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SyntheticSpec {
                rho: 0.5,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                num_classes: 1,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                num_classes: 9,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                scale_jitter: [1.2, 1.0],
                ..SyntheticSpec::default()
            },
        ] {
            assert!(matches!(make_longtailed(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn identity_augmentation() {
        let aug = Augmentation {
            sigma_aug: 0.0,
            scale_jitter: [1.0, 1.0],
        };
        let x = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.5, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(aug.augment(&x, 2, &mut rng).unwrap(), x);
        assert!(aug.augment(&x, 4, &mut rng).is_err());
    }

    #[test]
    fn batch_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(5, 2, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(batches(3, 10, &mut rng).unwrap().len(), 1);
        assert!(batches(3, 0, &mut rng).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (train, _) = make_longtailed(&spec(10.0)).unwrap();
        let back = Dataset::from_csv(&train.to_csv(), 4, Split::Train).unwrap();
        assert_eq!(back, train);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = Dataset::from_csv("label,x1\n0,1.0\n1,abc\n", 2, Split::Train).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = Dataset::from_csv("y,x1\n", 2, Split::Train).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
