//! Class-balanced contrastive losses with class prototypes.
//!
//! Both losses are written over the anchor-by-batch similarity matrix
//! `S = Z_a·Zᵀ/τ` and the anchor-by-class prototype similarity `Q = Z_a·P̂/τ`.
//! Rows of `S` and `exp(S)` are folded into per-class sums, which `C`-wide
//! weights turn into the class averages. Evaluation costs
//! `O(|B|·(|B| + C)·F)`.

use serde::{Deserialize, Serialize};

use super::batch::{ContrastBatch, PrototypeSet};
use crate::diff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Membership of the anchor in its own class's denominator set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OwnClassSet {
    /// Own-class average runs over the positives `P(i)`; the anchor is left out.
    #[default]
    Positives,
    /// Own-class average runs over every same-label row, anchor included.
    WholeClass,
}

struct Similarities<'t> {
    /// anchors × rows
    s: Var<'t>,
    /// anchors × classes
    q: Var<'t>,
}

fn check_inputs(batch: &ContrastBatch<'_>, protos: &PrototypeSet<'_>, tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let (_, f) = batch.z().shape();
    if protos.dim() != f || protos.num_classes() != batch.num_classes() {
        return Err(Error::shape(
            "prototypes",
            (f, batch.num_classes()),
            protos.matrix().shape(),
        ));
    }
    Ok(())
}

/// Similarities divided by `tau`; the temperature is folded into the
/// anchor rows so no extra `|B|×|B|` node is recorded.
fn similarities<'t>(
    batch: &ContrastBatch<'t>,
    protos: &PrototypeSet<'t>,
    tau: f64,
) -> Result<Similarities<'t>> {
    let tape = batch.z().tape();
    let z = batch.z();
    let za = if batch.all_rows_are_anchors() {
        z
    } else {
        let mut sel = Tensor::zeros(batch.anchors().len(), batch.len());
        for (r, &a) in batch.anchors().iter().enumerate() {
            sel.set(r, a, 1.0);
        }
        tape.constant(sel).matmul(z)?
    }
    .scale(1.0 / tau);
    let s = za.matmul(z.transpose())?;
    let q = za.matmul(protos.unit_columns()?)?;
    Ok(Similarities { s, q })
}

/// Size of the own-class denominator set of anchor `i`.
fn own_set_size(batch: &ContrastBatch<'_>, i: usize, own: OwnClassSet) -> usize {
    match own {
        OwnClassSet::Positives => batch.positives(i).len(),
        OwnClassSet::WholeClass => batch.class_rows(batch.labels()[i]).len(),
    }
}

/// Per-class sums of each anchor row, leaving out the anchor's own column
/// when `drop_self`.
fn per_class<'t>(batch: &ContrastBatch<'t>, m: Var<'t>, drop_self: bool) -> Result<Var<'t>> {
    let skip = batch
        .anchors()
        .iter()
        .map(|&i| drop_self.then_some(i))
        .collect();
    m.class_sums(batch.labels(), batch.num_classes(), skip)
}

/// Balanced class-wise loss: each class contributes the average of its
/// instance similarities plus its prototype similarity to the denominator;
/// the numerator averages each positive with the anchor's own prototype.
pub fn bc_ecl_loss<'t>(
    batch: &ContrastBatch<'t>,
    protos: &PrototypeSet<'t>,
    tau: f64,
) -> Result<Var<'t>> {
    bc_ecl_loss_with(batch, protos, tau, OwnClassSet::Positives)
}

pub fn bc_ecl_loss_with<'t>(
    batch: &ContrastBatch<'t>,
    protos: &PrototypeSet<'t>,
    tau: f64,
    own: OwnClassSet,
) -> Result<Var<'t>> {
    check_inputs(batch, protos, tau)?;
    let sims = similarities(batch, protos, tau)?;
    let na = batch.anchors().len();
    let c = batch.num_classes();
    let labels = batch.labels();

    let mut class_w = Tensor::zeros(na, c);
    let mut pos_w = Tensor::zeros(na, c);
    let mut own_proto = Tensor::zeros(na, c);
    for (r, &i) in batch.anchors().iter().enumerate() {
        let yi = labels[i];
        for cls in 0..c {
            let size = if cls == yi {
                own_set_size(batch, i, own)
            } else {
                batch.class_rows(cls).len()
            };
            if size > 0 {
                class_w.set(r, cls, 1.0 / size as f64);
            }
        }
        pos_w.set(r, yi, 1.0 / batch.positives(i).len() as f64);
        own_proto.set(r, yi, 1.0);
    }

    let exp_s = sims.s.exp();
    let inst = per_class(batch, exp_s, own == OwnClassSet::Positives)?.weighted_row_sum(class_w)?;
    let proto = sims.q.exp().row_sum();
    let log_denom = inst.add(proto)?.log()?;

    let pos = per_class(batch, sims.s, true)?.weighted_row_sum(pos_w)?;
    let own_q = sims.q.weighted_row_sum(own_proto)?;
    let numer = pos.add(own_q)?.scale(0.5);

    Ok(log_denom.sub(numer)?.mean())
}

/// Baseline balanced contrastive loss: each prototype enters its class as
/// one extra sample, with weights `1/(|P(i)|+1)` and `1/(|B_c|+1)`.
pub fn bcl_loss<'t>(
    batch: &ContrastBatch<'t>,
    protos: &PrototypeSet<'t>,
    tau: f64,
) -> Result<Var<'t>> {
    bcl_loss_with(batch, protos, tau, OwnClassSet::Positives)
}

pub fn bcl_loss_with<'t>(
    batch: &ContrastBatch<'t>,
    protos: &PrototypeSet<'t>,
    tau: f64,
    own: OwnClassSet,
) -> Result<Var<'t>> {
    check_inputs(batch, protos, tau)?;
    let sims = similarities(batch, protos, tau)?;
    let na = batch.anchors().len();
    let c = batch.num_classes();
    let labels = batch.labels();

    // a prototype counts as one more member of its class
    let mut class_w = Tensor::zeros(na, c);
    let mut pos_w = Tensor::zeros(na, c);
    for (r, &i) in batch.anchors().iter().enumerate() {
        let yi = labels[i];
        for cls in 0..c {
            let size = if cls == yi {
                own_set_size(batch, i, own)
            } else {
                batch.class_rows(cls).len()
            };
            class_w.set(r, cls, 1.0 / (size as f64 + 1.0));
        }
        pos_w.set(r, yi, 1.0 / (batch.positives(i).len() as f64 + 1.0));
    }

    let exp_s = sims.s.exp();
    let inst = per_class(batch, exp_s, own == OwnClassSet::Positives)?
        .weighted_row_sum(class_w.clone())?;
    let proto = sims.q.exp().weighted_row_sum(class_w)?;
    let log_denom = inst.add(proto)?.log()?;

    let pos = per_class(batch, sims.s, true)?.weighted_row_sum(pos_w.clone())?;
    let own_q = sims.q.weighted_row_sum(pos_w)?;
    let numer = pos.add(own_q)?;

    Ok(log_denom.sub(numer)?.mean())
}
