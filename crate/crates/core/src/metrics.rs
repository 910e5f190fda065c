//! Geometry metrics: intra-class collapse (FC), class-mean spacing (MS),
//! classifier/mean self-duality (SD) and a 2-D PCA projection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which representation a metric is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSpace {
    /// Normalized projector outputs `z`.
    Representation,
    /// Extractor outputs `f`.
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpaces {
    /// Space for FC, MS, class means and mean cosines.
    pub cluster: FeatureSpace,
    /// Space for SD.
    pub duality: FeatureSpace,
}

impl Default for MetricSpaces {
    fn default() -> Self {
        Self {
            cluster: FeatureSpace::Representation,
            duality: FeatureSpace::Feature,
        }
    }
}

fn check_labels(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::Contract(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Contract(format!(
            "label {y} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn groups(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut g = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        g[y].push(i);
    }
    if let Some(c) = g.iter().position(Vec::is_empty) {
        return Err(Error::Unavailable(format!("class {c} has no samples")));
    }
    Ok(g)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-class mean rows `μ_c` (`C×d`).
pub fn class_means(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    check_labels(features, labels, num_classes)?;
    let g = groups(labels, num_classes)?;
    let d = features.cols();
    let mut out = Tensor::zeros(num_classes, d);
    for (c, idx) in g.iter().enumerate() {
        for &i in idx {
            for (k, v) in features.row(i).iter().enumerate() {
                out.set(c, k, out.get(c, k) + v);
            }
        }
        for k in 0..d {
            out.set(c, k, out.get(c, k) / idx.len() as f64);
        }
    }
    Ok(out)
}

/// Mean of the class means, `μ̇` (`1×d`).
pub fn global_mean(means: &Tensor) -> Tensor {
    let c = means.rows() as f64;
    let data = (0..means.cols())
        .map(|k| (0..means.rows()).map(|r| means.get(r, k)).sum::<f64>() / c)
        .collect();
    Tensor::from_raw(1, means.cols(), data)
}

fn centered_means(means: &Tensor) -> Tensor {
    let g = global_mean(means);
    let mut m = means.clone();
    for r in 0..m.rows() {
        for k in 0..m.cols() {
            m.set(r, k, m.get(r, k) - g.get(0, k));
        }
    }
    m
}

/// Average intra-class distance over ordered pairs, diagonal included.
pub fn fc(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<f64> {
    check_labels(features, labels, num_classes)?;
    let g = groups(labels, num_classes)?;
    let total: f64 = g
        .iter()
        .map(|idx| {
            let mut s = 0.0;
            for &i in idx {
                for &j in idx {
                    s += dist(features.row(i), features.row(j));
                }
            }
            s / (idx.len() * idx.len()) as f64
        })
        .sum();
    Ok(total / num_classes as f64)
}

/// Average distance between distinct class means.
pub fn ms(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::Contract(
            "mean spacing needs at least 2 classes".into(),
        ));
    }
    let m = class_means(features, labels, num_classes)?;
    let mut s = 0.0;
    for a in 0..num_classes {
        for b in 0..num_classes {
            if a != b {
                s += dist(m.row(a), m.row(b));
            }
        }
    }
    Ok(s / (num_classes * (num_classes - 1)) as f64)
}

/// `‖Wᵀ/‖W‖_F − M/‖M‖_F‖_F` with `M` the centered class means as columns.
pub fn sd(w: &Tensor, features: &Tensor, labels: &[usize], num_classes: usize) -> Result<f64> {
    if w.shape() != (num_classes, features.cols()) {
        return Err(Error::shape(
            "sd",
            (num_classes, features.cols()),
            w.shape(),
        ));
    }
    let m = centered_means(&class_means(features, labels, num_classes)?);
    let (wn, mn) = (w.frobenius_norm(), m.frobenius_norm());
    if wn == 0.0 {
        return Err(Error::domain(
            "sd",
            "classifier weights have zero Frobenius norm",
        ));
    }
    if mn == 0.0 {
        return Err(Error::domain("sd", "all class means coincide"));
    }
    // W and M are both C×F here, so compare row-wise.
    let s: f64 = w
        .data()
        .iter()
        .zip(m.data())
        .map(|(a, b)| {
            let d = a / wn - b / mn;
            d * d
        })
        .sum();
    Ok(s.sqrt())
}

/// Pairwise cosines of the centered class means (`C×C`).
pub fn mean_cosines(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let m = centered_means(&class_means(features, labels, num_classes)?);
    let unit = m
        .normalize_rows()
        .map_err(|_| Error::Degenerate("a centered class mean is zero".into()))?;
    unit.matmul(&unit.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// `n×2` projections.
    pub coords: Tensor,
    /// `2×d` principal directions.
    pub components: Tensor,
    pub eigenvalues: [f64; 2],
    /// Fraction of total variance carried by the two components.
    pub explained: f64,
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 1000;

fn sym_matvec(a: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|r| (0..d).map(|k| a[r * d + k] * v[k]).sum())
        .collect()
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Dominant eigenpair of a PSD matrix by power iteration.
fn power_iteration(a: &[f64], d: usize) -> (f64, Vec<f64>) {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let starts = std::iter::once(ones).chain((0..d).map(|k| {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        e
    }));
    for start in starts {
        let Some(mut v) = unit(sym_matvec(a, d, &start)) else {
            continue;
        };
        for _ in 0..PCA_MAX_ITERS {
            let Some(next) = unit(sym_matvec(a, d, &v)) else {
                break;
            };
            let delta = dist(&next, &v);
            v = next;
            if delta < PCA_TOL {
                break;
            }
        }
        let av = sym_matvec(a, d, &v);
        let lambda = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        return (lambda, v);
    }
    (0.0, vec![0.0; d])
}

/// Rows are ℓ2-normalized and centered, then projected onto the top two
/// principal directions.
pub fn pca2(features: &Tensor) -> Result<Pca2> {
    let (n, d) = features.shape();
    if n < 2 || d < 2 {
        return Err(Error::Contract(format!(
            "pca2 needs n >= 2 and d >= 2, got {n}x{d}"
        )));
    }
    let mut x = features.normalize_rows()?;
    let mean = global_mean(&x);
    for r in 0..n {
        for k in 0..d {
            x.set(r, k, x.get(r, k) - mean.get(0, k));
        }
    }
    let mut cov = x.transpose().matmul(&x)?.scale(1.0 / n as f64).into_data();
    let trace: f64 = (0..d).map(|k| cov[k * d + k]).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);

    let mut comps = Vec::with_capacity(2);
    let mut eig = [0.0; 2];
    for slot in &mut eig {
        let (lambda, mut v) = power_iteration(&cov, d);
        if lambda.is_nan() || lambda <= floor {
            return Err(Error::Degenerate(
                "covariance has fewer than 2 nonzero eigenvalues".into(),
            ));
        }
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for r in 0..d {
            for k in 0..d {
                cov[r * d + k] -= lambda * v[r] * v[k];
            }
        }
        *slot = lambda;
        comps.extend(v);
    }
    let components = Tensor::from_raw(2, d, comps);
    let coords = x.matmul(&components.transpose())?;
    Ok(Pca2 {
        coords,
        components,
        eigenvalues: eig,
        explained: (eig[0] + eig[1]) / trace,
    })
}

/// `id,label,pc1,pc2` rows.
pub fn pca_csv<I: std::fmt::Display>(ids: &[I], labels: &[usize], coords: &Tensor) -> String {
    let mut out = String::from("id,label,pc1,pc2\n");
    for (i, (id, y)) in ids.iter().zip(labels).enumerate() {
        let _ = writeln!(out, "{id},{y},{},{}", coords.get(i, 0), coords.get(i, 1));
    }
    out
}

/// Index of the largest entry per row (first one on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (1..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect()
}

/// Overall and per-class top-1 accuracy; classes without samples get NaN.
pub fn accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> (f64, Vec<f64>) {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let overall = hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| {
            if n == 0 {
                f64::NAN
            } else {
                h as f64 / n as f64
            }
        })
        .collect();
    (overall, per_class)
}

/// Labeled embedding rows as read from or written to `id,label,dim1,...,dimd`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub features: Tensor,
}

impl Embeddings {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label");
        for k in 1..=self.features.cols() {
            let _ = write!(out, ",dim{k}");
        }
        out.push('\n');
        for (i, (id, y)) in self.ids.iter().zip(&self.labels).enumerate() {
            let _ = write!(out, "{id},{y}");
            for v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV; errors name the first offending line.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("line 1: empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let dim = cols.len().saturating_sub(2);
        let header_ok = cols.len() >= 3
            && cols[0] == "id"
            && cols[1] == "label"
            && cols[2..]
                .iter()
                .enumerate()
                .all(|(k, c)| *c == format!("dim{}", k + 1));
        if !header_ok {
            return Err(Error::Parse(format!(
                "line 1: expected header id,label,dim1,...,dimd, got {header:?}"
            )));
        }
        let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected {} fields, got {}",
                    dim + 2,
                    fields.len()
                )));
            }
            ids.push(fields[0].to_string());
            labels.push(
                fields[1].parse().map_err(|_| {
                    Error::Parse(format!("line {lineno}: bad label {:?}", fields[1]))
                })?,
            );
            for f in &fields[2..] {
                let v = f
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: bad value {f:?}")))?;
                data.push(v);
            }
        }
        if labels.is_empty() {
            return Err(Error::Parse("no data rows".into()));
        }
        Ok(Self {
            features: Tensor::new(labels.len(), dim, data)?,
            ids,
            labels,
        })
    }

    /// `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometrySnapshot {
    pub fc: f64,
    pub ms: f64,
    pub sd: f64,
    pub class_means: Tensor,
    pub global_mean: Tensor,
    pub mean_cosines: Tensor,
    pub pca2: Option<Tensor>,
}

impl GeometrySnapshot {
    /// `cluster` feeds FC/MS/means/cosines/PCA, `duality` feeds SD.
    pub fn compute(
        cluster: &Tensor,
        duality: &Tensor,
        w: &Tensor,
        labels: &[usize],
        num_classes: usize,
        with_pca: bool,
    ) -> Result<Self> {
        let class_means = class_means(cluster, labels, num_classes)?;
        Ok(Self {
            fc: fc(cluster, labels, num_classes)?,
            ms: ms(cluster, labels, num_classes)?,
            sd: sd(w, duality, labels, num_classes)?,
            global_mean: global_mean(&class_means),
            class_means,
            mean_cosines: mean_cosines(cluster, labels, num_classes)?,
            pca2: if with_pca {
                Some(pca2(cluster)?.coords)
            } else {
                None
            },
        })
    }

    /// Largest deviation of an off-diagonal mean cosine from `−1/(C−1)`.
    pub fn simplex_deviation(&self) -> f64 {
        let c = self.mean_cosines.rows();
        let target = -1.0 / (c as f64 - 1.0);
        let mut worst: f64 = 0.0;
        for a in 0..c {
            for b in 0..c {
                if a != b {
                    worst = worst.max((self.mean_cosines.get(a, b) - target).abs());
                }
            }
        }
        worst
    }
}
