//! Contrastive, alignment and logit-compensation losses and their weighted sum.

mod alignment;
mod batch;
mod bounds;
mod compensation;
mod contrastive;

use serde::{Deserialize, Serialize};

pub use alignment::cc_ge_loss;
pub use batch::{ContrastBatch, PrototypeSet, PrototypeSource, UNIT_NORM_TOL};
pub use bounds::{bc_ecl_bound, bcl_bound};
pub use compensation::{lc_loss, Priors};
pub use contrastive::{bc_ecl_loss, bc_ecl_loss_with, bcl_loss, bcl_loss_with, OwnClassSet};

use crate::diff::Var;
use crate::error::{Error, Result};

/// Source of the class priors used by the logit-compensation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// Class frequencies of the whole training split.
    #[default]
    Dataset,
    /// Frequencies of the current mini-batch, floored at `1/(|B|·C)`.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature of the balanced class-wise loss.
    pub tau: f64,
    pub lambda_bc_ecl: f64,
    pub lambda_cc_ge: f64,
    pub lambda_lc: f64,
    pub prototype_source: PrototypeSource,
    pub own_class_set: OwnClassSet,
    pub prior_mode: PriorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda_bc_ecl: 0.5,
            lambda_cc_ge: 3.0,
            lambda_lc: 0.5,
            prototype_source: PrototypeSource::LinearTransform,
            own_class_set: OwnClassSet::Positives,
            prior_mode: PriorMode::Dataset,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_bc_ecl", self.lambda_bc_ecl),
            ("lambda_cc_ge", self.lambda_cc_ge),
            ("lambda_lc", self.lambda_lc),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.lambda_bc_ecl, self.lambda_cc_ge, self.lambda_lc]
    }
}

/// `λ_BC-ECL·L_BC-ECL + λ_CC-GE·L_CC-GE + λ_LC·L_LC`, components in that order.
pub fn total_loss<'t>(components: [Var<'t>; 3], config: &LossConfig) -> Result<Var<'t>> {
    config.validate()?;
    let [l_ecl, l_ccge, l_lc] = components;
    for c in &components {
        if c.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "loss component is {:?}, expected 1x1",
                c.shape()
            )));
        }
    }
    let [a, b, c] = config.weights();
    l_ecl.scale(a).add(l_ccge.scale(b))?.add(l_lc.scale(c))
}
