//! Segmentation and distillation losses and the two composed objectives.
//!
//! The inner objective trains the teacher against a frozen copy of the
//! student prediction; the outer objective trains the student against a
//! frozen copy of the teacher prediction.

use irkd_autograd::{bce_with_logits_per_sample, kd_per_sample, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_in: f64,
    pub lambda_out: f64,
    pub lambda_gate: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_in: 0.1,
            lambda_out: 1.0,
            lambda_gate: 5e-3,
            tau: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_in, self.lambda_out, self.lambda_gate, self.tau];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(
                "distillation temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of probabilities against a binary mask.
pub fn task_loss(p: &[f64], target: &Mask) -> Result<f64> {
    if p.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for a mask of {} pixels",
            p.len(),
            target.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    let total: f64 = p
        .iter()
        .zip(target.data())
        .map(|(&pi, &y)| {
            let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -pc.ln()
            } else {
                -(1.0 - pc).ln()
            }
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Mean squared difference of temperature-scaled sigmoids.
pub fn kd_loss(za: &[f64], zb: &[f64], tau: f64) -> Result<f64> {
    if za.len() != zb.len() {
        return Err(Error::Shape(format!(
            "logit maps of {} and {} pixels",
            za.len(),
            zb.len()
        )));
    }
    if za.is_empty() {
        return Err(Error::Shape("empty logit map".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let s: f64 = za
        .iter()
        .zip(zb)
        .map(|(&a, &b)| (sigmoid(a / tau) - sigmoid(b / tau)).powi(2))
        .sum();
    Ok(s / za.len() as f64)
}

/// Batch means of each loss term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_t: f64,
    pub kd_in: f64,
    pub gate: f64,
    pub task_s: f64,
    pub kd_out: f64,
    pub total_in: f64,
    pub total_out: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,L_task_t,L_kd_in,R_gate,L_task_s,L_kd_out,total_in,total_out";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.task_t,
            self.kd_in,
            self.gate,
            self.task_s,
            self.kd_out,
            self.total_in,
            self.total_out
        )
    }
}

fn mean_of(v: Var<'_>) -> f64 {
    let t = v.value();
    t.sum() / t.len() as f64
}

fn check_weights(weights: Var<'_>, batch: usize) -> Result<()> {
    if weights.value().len() != batch {
        return Err(Error::State(format!(
            "{} sample weights for a batch of {batch}",
            weights.value().len()
        )));
    }
    Ok(())
}

/// `mean_b w_b·(BCE(z_t) + λ_in·KD(z_t, sg(z_s))) + λ_gate·R_gate`.
/// The student logits are detached here, whatever their origin.
pub fn inner_objective<'t>(
    z_t: Var<'t>,
    z_s: Var<'t>,
    targets: &Tensor,
    weights: Var<'t>,
    gate_l1: Var<'t>,
    lw: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    if z_t.value().shape() != targets.shape() || z_s.value().shape() != targets.shape() {
        return Err(Error::Shape(
            "logits and pseudo-masks differ in shape".into(),
        ));
    }
    check_weights(weights, targets.shape()[0])?;
    let bce = bce_with_logits_per_sample(z_t, targets, PROB_EPS);
    let kd = kd_per_sample(z_t, z_s.detach(), lw.tau);
    let per = bce.add(kd.scale(lw.lambda_in));
    let total = weights.mul(per).mean().add(gate_l1.scale(lw.lambda_gate));
    let parts = LossBreakdown {
        task_t: mean_of(bce),
        kd_in: mean_of(kd),
        gate: gate_l1.item(),
        total_in: total.item(),
        ..Default::default()
    };
    Ok((total, parts))
}

/// `mean_b w_b·(BCE(z_s) + λ_out·KD(z_s, sg(z_t)))`. The teacher logits are
/// detached here.
pub fn outer_objective<'t>(
    z_s: Var<'t>,
    z_t: Var<'t>,
    targets: &Tensor,
    weights: Var<'t>,
    lw: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    if z_t.value().shape() != targets.shape() || z_s.value().shape() != targets.shape() {
        return Err(Error::Shape(
            "logits and pseudo-masks differ in shape".into(),
        ));
    }
    check_weights(weights, targets.shape()[0])?;
    let bce = bce_with_logits_per_sample(z_s, targets, PROB_EPS);
    let kd = kd_per_sample(z_s, z_t.detach(), lw.tau);
    let total = weights.mul(bce.add(kd.scale(lw.lambda_out))).mean();
    let parts = LossBreakdown {
        task_s: mean_of(bce),
        kd_out: mean_of(kd),
        total_out: total.item(),
        ..Default::default()
    };
    Ok((total, parts))
}

/// Weighted student segmentation loss used for θ in regular epochs.
pub fn weighted_task<'t>(z: Var<'t>, targets: &Tensor, weights: Var<'t>) -> Result<(Var<'t>, f64)> {
    if z.value().shape() != targets.shape() {
        return Err(Error::Shape(
            "logits and pseudo-masks differ in shape".into(),
        ));
    }
    check_weights(weights, targets.shape()[0])?;
    let bce = bce_with_logits_per_sample(z, targets, PROB_EPS);
    Ok((weights.mul(bce).mean(), mean_of(bce)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_values() {
        let m = Mask::from_vec(1, 2, vec![true, false]).unwrap();
        let v = task_loss(&[0.9, 0.2], &m).unwrap();
        assert!((v - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 0.16425).abs() < 1e-5);
        let half = task_loss(
            &[0.5; 4],
            &Mask::from_vec(2, 2, vec![true, false, false, true]).unwrap(),
        )
        .unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-15);
        assert!(task_loss(&[1.0, 0.0], &m).unwrap() < 1e-5);
        assert!(matches!(task_loss(&[0.5], &m), Err(Error::Shape(_))));
    }

    #[test]
    fn kd_reference_values() {
        let v = kd_loss(&[4.0], &[-4.0], 4.0).unwrap();
        let want = (sigmoid(1.0) - sigmoid(-1.0)).powi(2);
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.21355).abs() < 1e-5);
        assert_eq!(kd_loss(&[0.3, -2.0], &[0.3, -2.0], 4.0).unwrap(), 0.0);
        assert!(kd_loss(&[1.0], &[2.0, 3.0], 4.0).is_err());
        assert!(kd_loss(&[1.0], &[2.0], 0.0).is_err());
    }

    #[test]
    fn default_weights_validate() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
