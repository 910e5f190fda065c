use super::batch::PrototypeSet;
use crate::diff::Var;
use crate::error::{Error, Result};

/// Squared Frobenius distance between the Frobenius-normalized classifier
/// weights `Wᵀ` (`W` is `C×F`) and prototype matrix `P` (`F×C`).
pub fn cc_ge_loss<'t>(w: Var<'t>, protos: &PrototypeSet<'t>) -> Result<Var<'t>> {
    let p = protos.matrix();
    let (c, f) = w.shape();
    if p.shape() != (f, c) {
        return Err(Error::shape("cc-ge", (f, c), p.shape()));
    }
    let wn = w.frobenius_norm();
    let pn = p.frobenius_norm();
    if wn.item() == 0.0 {
        return Err(Error::domain(
            "cc-ge",
            "classifier weights have zero Frobenius norm",
        ));
    }
    if pn.item() == 0.0 {
        return Err(Error::domain(
            "cc-ge",
            "prototype matrix has zero Frobenius norm",
        ));
    }
    let diff = w.transpose().div_scalar(wn)?.sub(p.div_scalar(pn)?)?;
    Ok(diff.mul(diff)?.sum())
}
