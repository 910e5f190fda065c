//! Attraction/repulsion lower bounds of the contrastive losses at `τ = 1`.
//!
//! Both bounds take the form `mean_i log(1 + (C−1)·exp(R(i) − A(i)))`.
//! A class absent from the batch is represented by its prototype alone.

use super::batch::{ContrastBatch, PrototypeSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Dots {
    z: Tensor,
    /// unit-column prototypes, F×C
    p: Tensor,
}

impl Dots {
    fn new(batch: &ContrastBatch<'_>, protos: &PrototypeSet<'_>) -> Result<Self> {
        if batch.num_classes() < 2 {
            return Err(Error::Contract(
                "bound undefined for fewer than 2 classes".into(),
            ));
        }
        let z = batch.z().value();
        let p = protos.unit_columns()?.value();
        if p.rows() != z.cols() || p.cols() != batch.num_classes() {
            return Err(Error::shape(
                "prototypes",
                (z.cols(), batch.num_classes()),
                p.shape(),
            ));
        }
        Ok(Self { z, p })
    }

    fn zz(&self, i: usize, k: usize) -> f64 {
        self.z
            .row(i)
            .iter()
            .zip(self.z.row(k))
            .fold(0.0, |s, (a, b)| s + a * b)
    }

    fn zp(&self, i: usize, c: usize) -> f64 {
        (0..self.p.rows()).fold(0.0, |s, f| s + self.z.get(i, f) * self.p.get(f, c))
    }

    fn mean_zz(&self, i: usize, rows: &[usize]) -> f64 {
        rows.iter().fold(0.0, |s, &k| s + self.zz(i, k)) / rows.len() as f64
    }
}

fn finish(terms: impl Iterator<Item = f64>, c: usize, count: usize) -> f64 {
    let cm1 = (c - 1) as f64;
    terms.fold(0.0, |s, gap| s + (1.0 + cm1 * gap.exp()).ln()) / count as f64
}

/// Lower bound of the balanced class-wise loss.
///
/// `A(i) = (1/2)·(mean_{j∈P(i)} z_i·z_j + z_i·p_{y_i})` and
/// `R(i) = 1/(2(C−1)) · Σ_{c≠y_i} (mean_{k∈B_c} z_i·z_k + z_i·p_c)`, where an
/// empty `B_c` uses `z_i·p_c` in place of the class mean.
pub fn bc_ecl_bound(batch: &ContrastBatch<'_>, protos: &PrototypeSet<'_>) -> Result<f64> {
    let d = Dots::new(batch, protos)?;
    let c = batch.num_classes();
    let labels = batch.labels();
    let gaps = batch.anchors().iter().map(|&i| {
        let yi = labels[i];
        let attraction = 0.5 * (d.mean_zz(i, batch.positives(i)) + d.zp(i, yi));
        let repulsion = (0..c)
            .filter(|&cls| cls != yi)
            .map(|cls| {
                let rows = batch.class_rows(cls);
                let proto = d.zp(i, cls);
                let mean = if rows.is_empty() {
                    proto
                } else {
                    d.mean_zz(i, rows)
                };
                mean + proto
            })
            .fold(0.0, |s, v| s + v)
            / (2.0 * (c - 1) as f64);
        repulsion - attraction
    });
    Ok(finish(gaps, c, batch.anchors().len()))
}

/// Lower bound of the baseline loss, with each prototype averaged into its
/// class with weight `1/(|B_c|+1)`.
pub fn bcl_bound(batch: &ContrastBatch<'_>, protos: &PrototypeSet<'_>) -> Result<f64> {
    let d = Dots::new(batch, protos)?;
    let c = batch.num_classes();
    let labels = batch.labels();
    let gaps = batch.anchors().iter().map(|&i| {
        let yi = labels[i];
        let pos = batch.positives(i);
        let attraction =
            (pos.iter().fold(0.0, |s, &j| s + d.zz(i, j)) + d.zp(i, yi)) / (pos.len() as f64 + 1.0);
        let repulsion = (0..c)
            .filter(|&cls| cls != yi)
            .map(|cls| {
                let rows = batch.class_rows(cls);
                (rows.iter().fold(0.0, |s, &k| s + d.zz(i, k)) + d.zp(i, cls))
                    / (rows.len() as f64 + 1.0)
            })
            .fold(0.0, |s, v| s + v)
            / (c - 1) as f64;
        repulsion - attraction
    });
    Ok(finish(gaps, c, batch.anchors().len()))
}
