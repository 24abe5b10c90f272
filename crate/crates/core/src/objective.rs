//! The detection networks as a bilevel objective, plus the regular
//! (non-bilevel) training step.

use irkd_autograd::{batch_softmax_weights, Tape, Tensor};

use crate::bilevel::{BilevelObjective, BilevelState, GradBundle, ParamsRef};
use crate::error::{Error, Result};
use crate::losses::{inner_objective, outer_objective, weighted_task, LossBreakdown, LossWeights};
use crate::nets::{student_graph, teacher_graph, Backbone, TeacherSpec, TinyUNet};

/// One mini-batch: images `(B,1,H,W)`, tokens `(B,K,N,d)`, pseudo-masks
/// `(B,1,H,W)` and the cluster of each sample.
#[derive(Clone, Debug)]
pub struct NetBatch {
    pub images: Tensor,
    pub tokens: Tensor,
    pub targets: Tensor,
    pub clusters: Vec<usize>,
}

impl NetBatch {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    fn check(&self, k: usize) -> Result<()> {
        let b = self.clusters.len();
        if self.images.shape()[0] != b
            || self.targets.shape()[0] != b
            || self.tokens.shape()[0] != b
        {
            return Err(Error::Shape("batch members differ in size".into()));
        }
        if let Some(&c) = self.clusters.iter().find(|&&c| c >= k) {
            return Err(Error::State(format!(
                "cluster {c} has no logit ({k} clusters)"
            )));
        }
        Ok(())
    }
}

pub struct NetObjective {
    pub backbone: TinyUNet,
    pub spec: TeacherSpec,
    pub weights: LossWeights,
}

impl BilevelObjective for NetObjective {
    type Batch = NetBatch;

    /// `L_in` through the teacher; the student prediction enters as a
    /// constant. Gradients for θ (teacher path), φ and α.
    fn inner(&self, p: ParamsRef<'_>, batch: &NetBatch) -> Result<GradBundle> {
        batch.check(p.alpha.len())?;
        let tape = Tape::new();
        let th = p.theta.bind(&tape, true);
        let th_fixed = p.theta.bind(&tape, false);
        let ph = p.phi.bind(&tape, true);
        let alpha = tape.leaf(Tensor::new(&[p.alpha.len()], p.alpha.to_vec()));
        let x = tape.constant(batch.images.clone());
        let tokens = tape.constant(batch.tokens.clone());
        let t = teacher_graph(&self.backbone, &self.spec, x, tokens, &th, &ph)?;
        let (z_s, _) = student_graph(&self.backbone, x, &th_fixed)?;
        let w = batch_softmax_weights(alpha, &batch.clusters);
        let (loss, breakdown) =
            inner_objective(t.logits, z_s, &batch.targets, w, t.gate_l1, &self.weights)?;
        let grads = tape.backward(loss);
        Ok(GradBundle {
            loss: loss.item(),
            theta: p.theta.gradient(&th, &grads),
            phi: p.phi.gradient(&ph, &grads),
            alpha: grads.get_or_zeros(alpha).into_data(),
            breakdown,
        })
    }

    /// `L_out` through the student; the teacher prediction is a constant.
    fn outer(&self, p: ParamsRef<'_>, batch: &NetBatch) -> Result<GradBundle> {
        batch.check(p.alpha.len())?;
        let tape = Tape::new();
        let th = p.theta.bind(&tape, true);
        let th_fixed = p.theta.bind(&tape, false);
        let ph = p.phi.bind(&tape, false);
        let alpha = tape.leaf(Tensor::new(&[p.alpha.len()], p.alpha.to_vec()));
        let x = tape.constant(batch.images.clone());
        let tokens = tape.constant(batch.tokens.clone());
        let (z_s, _) = student_graph(&self.backbone, x, &th)?;
        let t = teacher_graph(&self.backbone, &self.spec, x, tokens, &th_fixed, &ph)?;
        let w = batch_softmax_weights(alpha, &batch.clusters);
        let (loss, breakdown) = outer_objective(z_s, t.logits, &batch.targets, w, &self.weights)?;
        let grads = tape.backward(loss);
        Ok(GradBundle {
            loss: loss.item(),
            theta: p.theta.gradient(&th, &grads),
            phi: vec![0.0; p.phi.len()],
            alpha: grads.get_or_zeros(alpha).into_data(),
            breakdown,
        })
    }
}

impl NetObjective {
    /// Regular-epoch update: φ follows `L_in` with θ held fixed in the
    /// teacher, θ follows the weighted student segmentation loss, α is
    /// constant. Both go through their AdamW states.
    pub fn regular_step(
        &self,
        state: &mut BilevelState,
        batch: &NetBatch,
    ) -> Result<LossBreakdown> {
        batch.check(state.alpha.len())?;
        let tape = Tape::new();
        let th = state.theta.bind(&tape, true);
        let th_fixed = state.theta.bind(&tape, false);
        let ph = state.phi.bind(&tape, true);
        let alpha = tape.constant(Tensor::new(&[state.alpha.len()], state.alpha.clone()));
        let x = tape.constant(batch.images.clone());
        let tokens = tape.constant(batch.tokens.clone());
        let t = teacher_graph(&self.backbone, &self.spec, x, tokens, &th_fixed, &ph)?;
        let (z_s, _) = student_graph(&self.backbone, x, &th)?;
        let w = batch_softmax_weights(alpha, &batch.clusters);
        let (l_in, mut parts) =
            inner_objective(t.logits, z_s, &batch.targets, w, t.gate_l1, &self.weights)?;
        let (l_task, task_s) = weighted_task(z_s, &batch.targets, w)?;
        let grads = tape.backward(l_in.add(l_task));
        let g_theta = state.theta.gradient(&th, &grads);
        let g_phi = state.phi.gradient(&ph, &grads);
        if !(l_in.item().is_finite() && l_task.item().is_finite())
            || g_theta.iter().chain(&g_phi).any(|v| !v.is_finite())
        {
            log::warn!("regular step skipped: non-finite loss or gradient");
            return Err(Error::numeric(
                "regular step",
                "non-finite loss or gradient",
            ));
        }
        state.opt_phi.update(state.phi.values_mut(), &g_phi)?;
        state.opt_theta.update(state.theta.values_mut(), &g_theta)?;
        parts.task_s = task_s;
        parts.total_out = l_task.item();
        Ok(parts)
    }
}

/// Student-only update with unit weights, used by the baseline.
pub fn student_step(
    backbone: &TinyUNet,
    state: &mut BilevelState,
    images: &Tensor,
    targets: &Tensor,
) -> Result<f64> {
    let tape = Tape::new();
    let th = state.theta.bind(&tape, true);
    let x = tape.constant(images.clone());
    let (z_s, _) = student_graph(backbone, x, &th)?;
    let b = targets.shape()[0];
    let w = tape.constant(Tensor::full(&[b], 1.0));
    let (loss, _) = weighted_task(z_s, targets, w)?;
    let grads = tape.backward(loss);
    let g = state.theta.gradient(&th, &grads);
    if !loss.item().is_finite() || g.iter().any(|v| !v.is_finite()) {
        log::warn!("student step skipped: non-finite loss or gradient");
        return Err(Error::numeric(
            "student step",
            "non-finite loss or gradient",
        ));
    }
    state.opt_theta.update(state.theta.values_mut(), &g)?;
    Ok(loss.item())
}

/// Teacher spec whose hooks match the backbone's hook channels.
pub fn teacher_spec(backbone: &TinyUNet, blocks: usize, dim: usize, hidden: usize) -> TeacherSpec {
    TeacherSpec {
        blocks,
        dim,
        hidden,
        hook_channels: backbone.hook_channels(),
    }
}
