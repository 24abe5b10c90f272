//! Batched prediction and student-only evaluation.

use irkd_autograd::Tensor;

use crate::error::{Error, Result};
use crate::mask::{Frame, Mask};
use crate::metrics::{characteristic_report, EvalReport, DECISION_THRESHOLD};
use crate::nets::{batch_images, student_forward, teacher_forward, Backbone, TeacherSpec};
use crate::params::ParamSet;
use crate::synthdata::InfraredSample;

/// Images evaluated per forward pass.
pub const EVAL_BATCH: usize = 16;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn split_probs(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    if !z.all_finite() {
        return Err(Error::numeric("prediction", "non-finite logits"));
    }
    let b = z.shape()[0];
    Ok((0..b)
        .map(|i| z.outer(i).iter().map(|&v| sigmoid(v)).collect())
        .collect())
}

/// Student probability maps, one per frame.
pub fn predict_student<B: Backbone + ?Sized>(
    backbone: &B,
    theta: &ParamSet,
    frames: &[&Frame],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_BATCH) {
        let (z, _) = student_forward(backbone, theta, &batch_images(chunk)?)?;
        out.extend(split_probs(&z)?);
    }
    Ok(out)
}

/// Stack per-image `(K, N, d)` token tensors into `(B, K, N, d)`.
pub fn stack_tokens(tokens: &[&Tensor]) -> Result<Tensor> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::Data("empty token batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(tokens.len() * first.len());
    for t in tokens {
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "token tensors {:?} and {:?} in one batch",
                shape,
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![tokens.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data))
}

/// Teacher probability maps and token attention, one per frame.
pub fn predict_teacher<B: Backbone + ?Sized>(
    backbone: &B,
    spec: &TeacherSpec,
    theta: &ParamSet,
    phi: &ParamSet,
    frames: &[&Frame],
    tokens: &[&Tensor],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if frames.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} frames with {} token sets",
            frames.len(),
            tokens.len()
        )));
    }
    let (mut probs, mut attn) = (Vec::new(), Vec::new());
    for (f, t) in frames.chunks(EVAL_BATCH).zip(tokens.chunks(EVAL_BATCH)) {
        let (z, a) = teacher_forward(
            backbone,
            spec,
            theta,
            phi,
            &batch_images(f)?,
            &stack_tokens(t)?,
        )?;
        probs.extend(split_probs(&z)?);
        let n = a.shape()[1];
        attn.extend(a.data().chunks(n).map(|r| r.to_vec()));
    }
    Ok((probs, attn))
}

pub fn binarize(probs: &[f64], shape: (usize, usize)) -> Result<Mask> {
    Mask::threshold(shape.0, shape.1, probs, DECISION_THRESHOLD)
}

/// Binarised student predictions for the given samples.
pub fn student_masks<B: Backbone + ?Sized>(
    backbone: &B,
    theta: &ParamSet,
    samples: &[&InfraredSample],
) -> Result<Vec<Mask>> {
    let frames: Vec<&Frame> = samples.iter().map(|s| &s.image).collect();
    let probs = predict_student(backbone, theta, &frames)?;
    samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| binarize(p, s.shape()))
        .collect()
}

/// Student-only characteristic report of `samples` against their hidden
/// ground truth. No teacher or feature provider is involved.
pub fn evaluate_student<B: Backbone + ?Sized>(
    backbone: &B,
    theta: &ParamSet,
    samples: &[&InfraredSample],
    split: &str,
) -> Result<EvalReport> {
    let preds = student_masks(backbone, theta, samples)?;
    let p: Vec<&Mask> = preds.iter().collect();
    let g: Vec<&Mask> = samples.iter().map(|s| &s.gt_mask).collect();
    let tags: Vec<_> = samples.iter().map(|s| s.tag).collect();
    characteristic_report(split, &tags, &p, &g)
}

/// Teacher internals for one image: probabilities, token attention and
/// per-hook features `(C, H, W)` before and after modulation.
pub struct TeacherView {
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

pub fn teacher_view<B: Backbone + ?Sized>(
    backbone: &B,
    spec: &TeacherSpec,
    theta: &ParamSet,
    phi: &ParamSet,
    frame: &Frame,
    tokens: &Tensor,
) -> Result<TeacherView> {
    let tape = irkd_autograd::Tape::new();
    let th = theta.bind(&tape, false);
    let ph = phi.bind(&tape, false);
    let x = tape.constant(batch_images(&[frame])?);
    let t = tape.constant(stack_tokens(&[tokens])?);
    let out = crate::nets::teacher_graph(backbone, spec, x, t, &th, &ph)?;
    let strip = |v: &irkd_autograd::Var<'_>| {
        let val = v.value();
        let s = val.shape();
        Tensor::new(&s[1..], val.data().to_vec())
    };
    Ok(TeacherView {
        probs: split_probs(&out.logits.value())?.remove(0),
        attention: out.attention.data().to_vec(),
        pre: out.pre.iter().map(strip).collect(),
        post: out.post.iter().map(strip).collect(),
    })
}
