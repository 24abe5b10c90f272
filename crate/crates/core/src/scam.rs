//! Semantic-conditioned affine modulation: a pooled semantic vector is mapped
//! to per-channel `(γ, β)` which rescale and shift backbone features.

use irkd_autograd::{linear, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};

pub const GATE_INIT: f64 = 0.1;

/// Generator and gate of one modulated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScamLayer {
    pub layer_index: usize,
    pub channels: usize,
    pub dim: usize,
    pub hidden: usize,
    /// `dim × hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden × 2C`, row-major; the first `C` outputs are `γ_raw`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub gate: Vec<f64>,
}

pub fn param_name(layer: usize, field: &str) -> String {
    format!("scam.{layer}.{field}")
}

/// Named shapes of one layer's generator and gate.
pub fn layer_shapes(
    layer: usize,
    dim: usize,
    hidden: usize,
    channels: usize,
) -> Vec<(String, Vec<usize>)> {
    vec![
        (param_name(layer, "w1"), vec![dim, hidden]),
        (param_name(layer, "b1"), vec![hidden]),
        (param_name(layer, "w2"), vec![hidden, 2 * channels]),
        (param_name(layer, "b2"), vec![2 * channels]),
        (param_name(layer, "gate"), vec![channels]),
    ]
}

impl ScamLayer {
    pub fn from_params(phi: &ParamSet, layer: usize) -> Result<Self> {
        let w1 = phi.tensor(&param_name(layer, "w1"))?;
        let (dim, hidden) = w1.dims2();
        let gate = phi.get(&param_name(layer, "gate"))?.to_vec();
        Ok(Self {
            layer_index: layer,
            channels: gate.len(),
            dim,
            hidden,
            w1: w1.into_data(),
            b1: phi.get(&param_name(layer, "b1"))?.to_vec(),
            w2: phi.get(&param_name(layer, "w2"))?.to_vec(),
            b2: phi.get(&param_name(layer, "b2"))?.to_vec(),
            gate,
        })
    }

    /// Raw generator output `(γ_raw, β)`.
    pub fn generate(&self, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if g.len() != self.dim {
            return Err(Error::Shape(format!(
                "semantic vector has {} entries, layer expects {}",
                g.len(),
                self.dim
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("scam layer {}", self.layer_index),
                "non-finite semantic vector",
            ));
        }
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                (self.b1[j]
                    + (0..self.dim)
                        .map(|i| g[i] * self.w1[i * self.hidden + j])
                        .sum::<f64>())
                .tanh()
            })
            .collect();
        let c2 = 2 * self.channels;
        let out: Vec<f64> = (0..c2)
            .map(|k| {
                self.b2[k]
                    + (0..self.hidden)
                        .map(|j| h[j] * self.w2[j * c2 + k])
                        .sum::<f64>()
            })
            .collect();
        let (raw, beta) = out.split_at(self.channels);
        Ok((raw.to_vec(), beta.to_vec()))
    }
}

/// `γ = 1 + tanh(γ_raw ⊙ u)`; `β` passes through.
pub fn gate_scale(gamma_raw: &[f64], gate: &[f64]) -> Vec<f64> {
    gamma_raw
        .iter()
        .zip(gate)
        .map(|(r, u)| 1.0 + (r * u).tanh())
        .collect()
}

pub fn affine_params(g: &[f64], layer: &ScamLayer) -> Result<(Vec<f64>, Vec<f64>)> {
    let (raw, beta) = layer.generate(g)?;
    Ok((gate_scale(&raw, &layer.gate), beta))
}

/// `f̃ = f + (γ − 1) ⊙ f + β` for `f` of shape `(C, h, w)`.
pub fn modulate(f: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "feature map must be (C, h, w), got {shape:?}"
        )));
    }
    let c = shape[0];
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "{c} feature channels but {} scales and {} shifts",
            gamma.len(),
            beta.len()
        )));
    }
    let hw = shape[1] * shape[2];
    let mut out = f.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        for v in plane {
            *v = gamma[ch] * *v + beta[ch];
        }
    }
    Ok(out)
}

/// `Σ_ℓ ‖u_ℓ‖₁`.
pub fn gate_sparsity(layers: &[ScamLayer]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::Config(
            "gate sparsity needs at least one layer".into(),
        ));
    }
    Ok(layers.iter().flat_map(|l| &l.gate).map(|u| u.abs()).sum())
}

/// Graph version of [`affine_params`] for a batch of semantic vectors
/// `g (B, d)`. Returns `γ, β` of shape `(B, C)`.
pub fn affine_params_var<'t>(
    g: Var<'t>,
    phi: &Bound<'t>,
    layer: usize,
    channels: usize,
) -> (Var<'t>, Var<'t>) {
    let hidden = linear(
        g,
        phi.var(&param_name(layer, "w1")),
        phi.var(&param_name(layer, "b1")),
    )
    .tanh();
    let out = linear(
        hidden,
        phi.var(&param_name(layer, "w2")),
        phi.var(&param_name(layer, "b2")),
    );
    let gamma = out
        .slice_cols(0, channels)
        .mul_row(phi.var(&param_name(layer, "gate")))
        .tanh()
        .add_scalar(1.0);
    (gamma, out.slice_cols(channels, channels))
}

/// Graph version of [`gate_sparsity`] over `layers` hook indices.
pub fn gate_sparsity_var<'t>(phi: &Bound<'t>, layers: usize) -> Var<'t> {
    let mut total = phi.var(&param_name(0, "gate")).abs_sum();
    for l in 1..layers {
        total = total.add(phi.var(&param_name(l, "gate")).abs_sum());
    }
    total
}
