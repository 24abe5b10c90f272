//! Student backbone and the feature-conditioned teacher that shares its
//! weights.

use irkd_autograd::{
    attention_pool, conv2d, max_pool2, modulate, upsample2, weighted_block_sum, Tape, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::Frame;
use crate::params::{Bound, ParamSet};
use crate::scam::{affine_params_var, gate_sparsity_var, layer_shapes, param_name, GATE_INIT};

pub const HEAD_BIAS_INIT: f64 = -4.0;

/// Hook callback: receives the hook index and the stage output, returns the
/// feature map the rest of the network should consume.
pub type HookFn<'a, 't> = dyn FnMut(usize, Var<'t>) -> Result<Var<'t>> + 'a;

/// A segmentation network exposing encoder taps for modulation.
pub trait Backbone {
    fn name(&self) -> &str;
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)>;
    /// Channel count of each hooked feature map, in hook order.
    fn hook_channels(&self) -> Vec<usize>;
    fn init_params(&self, seed: u64) -> Result<ParamSet>;
    fn check_input(&self, height: usize, width: usize) -> Result<()>;
    /// `x (B, 1, H, W)` → logits `(B, 1, H, W)`.
    fn forward<'t>(
        &self,
        x: Var<'t>,
        theta: &Bound<'t>,
        hook: &mut HookFn<'_, 't>,
    ) -> Result<Var<'t>>;
}

/// Three-stage encoder–decoder with additive skips and a 1×1 logit head.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyUNet {
    pub channels: [usize; 3],
}

impl Default for TinyUNet {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
        }
    }
}

fn finite(v: Var<'_>, layer: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(
            format!("layer {layer}"),
            "non-finite activation",
        ))
    }
}

impl TinyUNet {
    fn conv<'t>(&self, x: Var<'t>, theta: &Bound<'t>, name: &str) -> Var<'t> {
        conv2d(
            x,
            theta.var(&format!("{name}.w")),
            theta.var(&format!("{name}.b")),
        )
    }
}

impl Backbone for TinyUNet {
    fn name(&self) -> &str {
        "tiny_unet"
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.channels;
        let conv = |name: &str, o: usize, i: usize, k: usize| {
            [
                (format!("{name}.w"), vec![o, i, k, k]),
                (format!("{name}.b"), vec![o]),
            ]
        };
        [
            conv("enc1", c1, 1, 3),
            conv("enc2", c2, c1, 3),
            conv("enc3", c3, c2, 3),
            conv("lat3", c2, c3, 1),
            conv("dec2", c2, c2, 3),
            conv("lat2", c1, c2, 1),
            conv("dec1", c1, c1, 3),
            conv("head", 1, c1, 1),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    fn hook_channels(&self) -> Vec<usize> {
        self.channels.to_vec()
    }

    fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let shapes = self.param_shapes();
        let mut p = ParamSet::zeros(shapes.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape) in &shapes {
            if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sigma");
                for v in p.get_mut(name)? {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        p.get_mut("head.b")?[0] = HEAD_BIAS_INIT;
        Ok(p)
    }

    fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width}: both sides must be positive multiples of 4"
            )));
        }
        Ok(())
    }

    fn forward<'t>(
        &self,
        x: Var<'t>,
        theta: &Bound<'t>,
        hook: &mut HookFn<'_, 't>,
    ) -> Result<Var<'t>> {
        let e1 = self.conv(x, theta, "enc1").relu();
        finite(e1, "enc1")?;
        let e1 = hook(0, e1)?;
        let e2 = self.conv(max_pool2(e1), theta, "enc2").relu();
        finite(e2, "enc2")?;
        let e2 = hook(1, e2)?;
        let e3 = self.conv(max_pool2(e2), theta, "enc3").relu();
        finite(e3, "enc3")?;
        let e3 = hook(2, e3)?;
        let d2 = upsample2(self.conv(e3, theta, "lat3")).add(e2);
        let d2 = self.conv(d2, theta, "dec2").relu();
        finite(d2, "dec2")?;
        let d1 = upsample2(self.conv(d2, theta, "lat2")).add(e1);
        let d1 = self.conv(d1, theta, "dec1").relu();
        finite(d1, "dec1")?;
        let z = self.conv(d1, theta, "head");
        finite(z, "head")?;
        Ok(z)
    }
}

/// Stack frames into `(B, 1, H, W)`.
pub fn batch_images(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if f.shape() != (h, w) {
            return Err(Error::Shape(format!(
                "mixed image sizes {:?} and {:?} in one batch",
                (h, w),
                f.shape()
            )));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::new(&[frames.len(), 1, h, w], data))
}

fn check_batch<B: Backbone + ?Sized>(backbone: &B, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!(
            "image batch must be (B, 1, H, W), got {s:?}"
        )));
    }
    backbone.check_input(s[2], s[3])
}

/// Student logits on the tape, with the unmodified hook features.
pub fn student_graph<'t, B: Backbone + ?Sized>(
    backbone: &B,
    x: Var<'t>,
    theta: &Bound<'t>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    check_batch(backbone, &x.value())?;
    let mut feats = Vec::new();
    let z = backbone.forward(x, theta, &mut |_, f| {
        feats.push(f);
        Ok(f)
    })?;
    Ok((z, feats))
}

/// Evaluation-mode student: logits `(B, 1, H, W)` and hook features.
pub fn student_forward<B: Backbone + ?Sized>(
    backbone: &B,
    theta: &ParamSet,
    images: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let tape = Tape::new();
    let th = theta.bind(&tape, false);
    let (z, feats) = student_graph(backbone, tape.constant(images.clone()), &th)?;
    let z = (*z.value()).clone();
    Ok((z, feats.iter().map(|f| (*f.value()).clone()).collect()))
}

/// Shape hyperparameters of the teacher's conditioning branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSpec {
    pub blocks: usize,
    pub dim: usize,
    pub hidden: usize,
    pub hook_channels: Vec<usize>,
}

impl TeacherSpec {
    pub fn phi_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = vec![
            ("fusion.logits".to_string(), vec![self.blocks]),
            ("tap.w".to_string(), vec![self.dim]),
        ];
        for (l, &c) in self.hook_channels.iter().enumerate() {
            shapes.extend(layer_shapes(l, self.dim, self.hidden, c));
        }
        shapes
    }

    /// Identity-state initialisation: zero final generator layer, uniform
    /// fusion, zero attention scorer, small positive gates.
    pub fn init_phi(&self, seed: u64) -> Result<ParamSet> {
        let mut phi = ParamSet::zeros(self.phi_shapes())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / self.dim as f64).sqrt()).expect("valid sigma");
        for l in 0..self.hook_channels.len() {
            for v in phi.get_mut(&param_name(l, "w1"))? {
                *v = normal.sample(&mut rng);
            }
            phi.get_mut(&param_name(l, "gate"))?.fill(GATE_INIT);
        }
        Ok(phi)
    }

    pub fn check_tokens(&self, tokens: &Tensor) -> Result<()> {
        let s = tokens.shape();
        if s.len() != 4 || s[1] != self.blocks || s[3] != self.dim {
            return Err(Error::Shape(format!(
                "token batch {s:?} does not match (B, {}, N, {})",
                self.blocks, self.dim
            )));
        }
        Ok(())
    }
}

pub struct TeacherOut<'t> {
    pub logits: Var<'t>,
    /// Semantic vector `g (B, d)`.
    pub pooled: Var<'t>,
    /// Token attention `(B, N)`.
    pub attention: Tensor,
    /// `Σ_ℓ ‖u_ℓ‖₁` on the tape.
    pub gate_l1: Var<'t>,
    /// Hook features before and after modulation.
    pub pre: Vec<Var<'t>>,
    pub post: Vec<Var<'t>>,
}

/// Teacher forward: fuse token depths, pool, generate per-hook `(γ, β)`
/// and run the shared backbone on modulated features.
pub fn teacher_graph<'t, B: Backbone + ?Sized>(
    backbone: &B,
    spec: &TeacherSpec,
    x: Var<'t>,
    tokens: Var<'t>,
    theta: &Bound<'t>,
    phi: &Bound<'t>,
) -> Result<TeacherOut<'t>> {
    check_batch(backbone, &x.value())?;
    spec.check_tokens(&tokens.value())?;
    if tokens.value().shape()[0] != x.value().shape()[0] {
        return Err(Error::Shape(
            "image and token batches differ in size".into(),
        ));
    }
    let pi = phi.var("fusion.logits").softmax();
    let fused = weighted_block_sum(tokens, pi);
    let (g, attention) = attention_pool(fused, phi.var("tap.w"));
    finite(g, "tap")?;
    let channels = spec.hook_channels.clone();
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    let z = backbone.forward(x, theta, &mut |l, f| {
        let c = *channels
            .get(l)
            .ok_or_else(|| Error::State(format!("backbone hook {l} has no modulator")))?;
        let (gamma, beta) = affine_params_var(g, phi, l, c);
        let m = modulate(f, gamma, beta);
        pre.push(f);
        post.push(m);
        Ok(m)
    })?;
    let gate_l1 = gate_sparsity_var(phi, spec.hook_channels.len());
    Ok(TeacherOut {
        logits: z,
        pooled: g,
        attention,
        gate_l1,
        pre,
        post,
    })
}

/// Evaluation-mode teacher logits and token attention.
pub fn teacher_forward<B: Backbone + ?Sized>(
    backbone: &B,
    spec: &TeacherSpec,
    theta: &ParamSet,
    phi: &ParamSet,
    images: &Tensor,
    tokens: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let th = theta.bind(&tape, false);
    let ph = phi.bind(&tape, false);
    let out = teacher_graph(
        backbone,
        spec,
        tape.constant(images.clone()),
        tape.constant(tokens.clone()),
        &th,
        &ph,
    )?;
    let z = (*out.logits.value()).clone();
    Ok((z, out.attention))
}
