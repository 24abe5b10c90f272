//! Bilevel state and the alternating inner/outer updates with the
//! gradient-alignment hypergradient for the cluster logits.

use irkd_autograd::{batch_softmax_weights, linear, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::optim::AdamW;
use crate::params::ParamSet;

/// Read-only view of the three parameter groups.
#[derive(Clone, Copy)]
pub struct ParamsRef<'a> {
    pub theta: &'a ParamSet,
    pub phi: &'a ParamSet,
    pub alpha: &'a [f64],
}

/// Loss value and flat gradients for every parameter group. Groups the
/// loss does not depend on carry zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub loss: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub breakdown: LossBreakdown,
}

impl GradBundle {
    fn all_finite(&self) -> bool {
        self.loss.is_finite()
            && self
                .theta
                .iter()
                .chain(&self.phi)
                .chain(&self.alpha)
                .all(|v| v.is_finite())
    }
}

/// A pair of objectives over `(θ, φ, α)`: the inner one adapts φ, the
/// outer one updates θ and α.
pub trait BilevelObjective {
    type Batch: ?Sized;
    fn inner(&self, p: ParamsRef<'_>, batch: &Self::Batch) -> Result<GradBundle>;
    fn outer(&self, p: ParamsRef<'_>, batch: &Self::Batch) -> Result<GradBundle>;
}

/// `⟨g_out, g_in⟩ / (‖g_in‖² + ε)`.
pub fn gn_coefficient(g_out_theta: &[f64], g_in_theta: &[f64], eps: f64) -> Result<f64> {
    if g_out_theta.len() != g_in_theta.len() {
        return Err(Error::Shape(format!(
            "gradients over {} and {} parameters",
            g_out_theta.len(),
            g_in_theta.len()
        )));
    }
    let dot: f64 = g_out_theta.iter().zip(g_in_theta).map(|(a, b)| a * b).sum();
    let nn: f64 = g_in_theta.iter().map(|v| v * v).sum();
    Ok(dot / (nn + eps))
}

/// `g_out_α + η·ρ·g_in_α`, elementwise.
pub fn hypergradient_alpha(
    g_out_alpha: &[f64],
    g_in_alpha: &[f64],
    eta: f64,
    rho: f64,
) -> Result<Vec<f64>> {
    if g_out_alpha.len() != g_in_alpha.len() {
        return Err(Error::Shape(format!(
            "cluster gradients of length {} and {}",
            g_out_alpha.len(),
            g_in_alpha.len()
        )));
    }
    Ok(g_out_alpha
        .iter()
        .zip(g_in_alpha)
        .map(|(o, i)| o + eta * rho * i)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilevelHyper {
    /// Inner plain-gradient step size; also the η of the hypergradient.
    pub eta: f64,
    pub eps: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_alpha: f64,
    pub weight_decay: f64,
    pub bilevel_period: usize,
    pub gn_steps: usize,
}

impl Default for BilevelHyper {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            eps: 1e-8,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            lr_alpha: 1e-3,
            weight_decay: 1e-4,
            bilevel_period: 5,
            gn_steps: 4,
        }
    }
}

impl BilevelHyper {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.eta, self.lr_theta, self.lr_phi, self.lr_alpha];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) || !(self.eta > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be finite, non-negative, with η > 0: {self:?}"
            )));
        }
        if !(self.eps > 0.0) || !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "ε must be positive and weight decay non-negative".into(),
            ));
        }
        if self.bilevel_period == 0 {
            return Err(Error::Config("bilevel_period must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether 1-based `epoch` ends with bilevel iterations.
    pub fn is_bilevel_epoch(&self, epoch: usize) -> bool {
        self.gn_steps > 0 && epoch > 0 && epoch % self.bilevel_period == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerReport {
    pub loss: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuterReport {
    pub loss: f64,
    pub rho: f64,
    pub breakdown: LossBreakdown,
}

/// Live parameters, optimizer states and the inner gradients cached for
/// the next outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilevelState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub alpha: Vec<f64>,
    pub hyper: BilevelHyper,
    pub epoch: usize,
    pub opt_theta: AdamW,
    pub opt_phi: AdamW,
    pub opt_alpha: AdamW,
    #[serde(skip)]
    cached_inner: Option<(Vec<f64>, Vec<f64>)>,
}

impl BilevelState {
    pub fn new(
        theta: ParamSet,
        phi: ParamSet,
        clusters: usize,
        hyper: BilevelHyper,
    ) -> Result<Self> {
        hyper.validate()?;
        if clusters == 0 {
            return Err(Error::Config(
                "at least one cluster logit is required".into(),
            ));
        }
        if theta.specs().iter().any(|s| phi.contains(&s.name)) {
            return Err(Error::Config(
                "student and teacher parameter names overlap".into(),
            ));
        }
        Ok(Self {
            opt_theta: AdamW::new(theta.len(), hyper.lr_theta, hyper.weight_decay),
            opt_phi: AdamW::new(phi.len(), hyper.lr_phi, hyper.weight_decay),
            opt_alpha: AdamW::new(clusters, hyper.lr_alpha, 0.0),
            theta,
            phi,
            alpha: vec![0.0; clusters],
            hyper,
            epoch: 0,
            cached_inner: None,
        })
    }

    pub fn params(&self) -> ParamsRef<'_> {
        ParamsRef {
            theta: &self.theta,
            phi: &self.phi,
            alpha: &self.alpha,
        }
    }

    fn checked(g: GradBundle, which: &str) -> Result<GradBundle> {
        if g.all_finite() {
            Ok(g)
        } else {
            log::warn!("{which} step skipped: non-finite loss or gradient");
            Err(Error::numeric(
                format!("{which} step"),
                "non-finite loss or gradient",
            ))
        }
    }

    /// `φ ← φ − η ∇_φ L_in`. θ and α are untouched; `∇_θ L_in` and
    /// `∇_α L_in` are kept for the following outer step.
    pub fn inner_step<O: BilevelObjective + ?Sized>(
        &mut self,
        obj: &O,
        batch: &O::Batch,
    ) -> Result<InnerReport> {
        let g = Self::checked(obj.inner(self.params(), batch)?, "inner")?;
        let eta = self.hyper.eta;
        for (p, d) in self.phi.values_mut().iter_mut().zip(&g.phi) {
            *p -= eta * d;
        }
        self.cached_inner = Some((g.theta, g.alpha));
        Ok(InnerReport {
            loss: g.loss,
            breakdown: g.breakdown,
        })
    }

    /// θ follows the direct outer gradient, α the corrected one; φ is
    /// untouched.
    pub fn outer_step<O: BilevelObjective + ?Sized>(
        &mut self,
        obj: &O,
        batch: &O::Batch,
    ) -> Result<OuterReport> {
        let (g_in_theta, g_in_alpha) = self
            .cached_inner
            .take()
            .ok_or_else(|| Error::State("outer step requires a preceding inner step".into()))?;
        let g = Self::checked(obj.outer(self.params(), batch)?, "outer")?;
        let rho = gn_coefficient(&g.theta, &g_in_theta, self.hyper.eps)?;
        let g_alpha = hypergradient_alpha(&g.alpha, &g_in_alpha, self.hyper.eta, rho)?;
        self.opt_theta.update(self.theta.values_mut(), &g.theta)?;
        self.opt_alpha.update(&mut self.alpha, &g_alpha)?;
        Ok(OuterReport {
            loss: g.loss,
            rho,
            breakdown: g.breakdown,
        })
    }
}

/// Linear bilevel problem with closed-form structure: teacher `t = x·(θ+φ)`,
/// student `s = x·θ`,
/// `L_in = mean w (t−y)²/2 + (λ/2)‖φ‖²`,
/// `L_out = mean w [(s−y)²/2 + λ_out (s−sg(t))²/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticToy {
    pub dim: usize,
    pub ridge: f64,
    pub lambda_out: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBatch {
    /// `(B, dim)`.
    pub x: Tensor,
    /// `(B)`.
    pub y: Vec<f64>,
    pub clusters: Vec<usize>,
}

impl QuadraticToy {
    pub fn param_set(&self, name: &str) -> Result<ParamSet> {
        ParamSet::zeros(vec![(name.to_string(), vec![self.dim, 1])])
    }

    fn check(&self, p: &ParamsRef<'_>, batch: &ToyBatch) -> Result<()> {
        let (b, d) = batch.x.dims2();
        if d != self.dim || batch.y.len() != b || batch.clusters.len() != b {
            return Err(Error::Shape(
                "toy batch does not match the problem size".into(),
            ));
        }
        if batch.clusters.iter().any(|&c| c >= p.alpha.len()) {
            return Err(Error::State(
                "toy sample refers to a missing cluster".into(),
            ));
        }
        Ok(())
    }
}

impl BilevelObjective for QuadraticToy {
    type Batch = ToyBatch;

    fn inner(&self, p: ParamsRef<'_>, batch: &ToyBatch) -> Result<GradBundle> {
        self.check(&p, batch)?;
        let b = batch.y.len();
        let tape = Tape::new();
        let th = p.theta.bind(&tape, true);
        let ph = p.phi.bind(&tape, true);
        let alpha = tape.leaf(Tensor::new(&[p.alpha.len()], p.alpha.to_vec()));
        let (theta, phi) = (th.var("theta"), ph.var("phi"));
        let x = tape.constant(batch.x.clone());
        let zero = tape.constant(Tensor::zeros(&[1]));
        let y = tape.constant(Tensor::new(&[b], batch.y.clone()));
        let t = linear(x, theta.add(phi), zero).reshape(&[b]);
        let r = t.sub(y);
        let w = batch_softmax_weights(alpha, &batch.clusters);
        let fit = w.mul(r.mul(r)).mean().scale(0.5);
        let loss = fit.add(phi.mul(phi).sum().scale(0.5 * self.ridge));
        let grads = tape.backward(loss);
        Ok(GradBundle {
            loss: loss.item(),
            theta: p.theta.gradient(&th, &grads),
            phi: p.phi.gradient(&ph, &grads),
            alpha: grads.get_or_zeros(alpha).into_data(),
            breakdown: LossBreakdown {
                total_in: loss.item(),
                ..Default::default()
            },
        })
    }

    fn outer(&self, p: ParamsRef<'_>, batch: &ToyBatch) -> Result<GradBundle> {
        self.check(&p, batch)?;
        let b = batch.y.len();
        let tape = Tape::new();
        let th = p.theta.bind(&tape, true);
        let ph = p.phi.bind(&tape, true);
        let alpha = tape.leaf(Tensor::new(&[p.alpha.len()], p.alpha.to_vec()));
        let (theta, phi) = (th.var("theta"), ph.var("phi"));
        let x = tape.constant(batch.x.clone());
        let zero = tape.constant(Tensor::zeros(&[1]));
        let y = tape.constant(Tensor::new(&[b], batch.y.clone()));
        let s = linear(x, theta, zero).reshape(&[b]);
        let t = linear(x, theta.add(phi), zero).reshape(&[b]).detach();
        let (rs, rt) = (s.sub(y), s.sub(t));
        let per = rs.mul(rs).add(rt.mul(rt).scale(self.lambda_out)).scale(0.5);
        let w = batch_softmax_weights(alpha, &batch.clusters);
        let loss = w.mul(per).mean();
        let grads = tape.backward(loss);
        Ok(GradBundle {
            loss: loss.item(),
            theta: p.theta.gradient(&th, &grads),
            phi: p.phi.gradient(&ph, &grads),
            alpha: grads.get_or_zeros(alpha).into_data(),
            breakdown: LossBreakdown {
                total_out: loss.item(),
                ..Default::default()
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_examples() {
        assert_eq!(gn_coefficient(&[0.0, 1.0], &[1.0, 0.0], 1e-8).unwrap(), 0.0);
        assert!((gn_coefficient(&[2.0, 0.0], &[2.0, 0.0], 1e-300).unwrap() - 1.0).abs() < 1e-15);
        assert!((gn_coefficient(&[1.0, 1.0], &[2.0, 0.0], 1e-12).unwrap() - 0.5).abs() < 1e-12);
        assert!(gn_coefficient(&[1.0], &[1.0, 2.0], 1e-8).is_err());
    }

    #[test]
    fn corrected_alpha_gradient_example() {
        let g = hypergradient_alpha(&[1.0, 0.0], &[2.0, 2.0], 0.1, 0.5).unwrap();
        assert!((g[0] - 1.1).abs() < 1e-15 && (g[1] - 0.1).abs() < 1e-15);
        assert_eq!(
            hypergradient_alpha(&[1.0, 2.0], &[5.0, 5.0], 0.0, 3.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            hypergradient_alpha(&[1.0, 2.0], &[5.0, 5.0], 0.1, 0.0).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn schedule_triggers() {
        let h = BilevelHyper::default();
        let t: Vec<usize> = (1..=12).filter(|&e| h.is_bilevel_epoch(e)).collect();
        assert_eq!(t, vec![5, 10]);
    }

    #[test]
    fn outer_without_inner_is_state_error() {
        let toy = QuadraticToy {
            dim: 1,
            ridge: 0.0,
            lambda_out: 1.0,
        };
        let mut s = BilevelState::new(
            toy.param_set("theta").unwrap(),
            toy.param_set("phi").unwrap(),
            1,
            BilevelHyper::default(),
        )
        .unwrap();
        let batch = ToyBatch {
            x: Tensor::new(&[1, 1], vec![1.0]),
            y: vec![1.0],
            clusters: vec![0],
        };
        assert!(matches!(s.outer_step(&toy, &batch), Err(Error::State(_))));
    }
}
