#![allow(dead_code)]

use irkd_autograd::Tensor;
use irkd_core::bilevel::{
    gn_coefficient, hypergradient_alpha, BilevelHyper, BilevelObjective, BilevelState,
    QuadraticToy, ToyBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_DIM: usize = 4;
pub const TOY_CLUSTERS: usize = 2;

/// Train batch where cluster 1 carries label noise, and a clean val batch.
pub fn toy_batches(seed: u64) -> (ToyBatch, ToyBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..TOY_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut make = |n: usize, noisy: bool| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut clusters = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = (0..TOY_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = i % TOY_CLUSTERS;
            let clean: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let noise = if noisy && c == 1 {
                rng.gen_range(-2.0..2.0)
            } else {
                0.0
            };
            x.extend(row);
            y.push(clean + noise);
            clusters.push(c);
        }
        ToyBatch {
            x: Tensor::new(&[n, TOY_DIM], x),
            y,
            clusters,
        }
    };
    let train = make(16, true);
    let val = make(16, false);
    (train, val)
}

pub fn toy_problem() -> QuadraticToy {
    QuadraticToy {
        dim: TOY_DIM,
        ridge: 0.1,
        lambda_out: 0.5,
    }
}

pub fn toy_state(toy: &QuadraticToy, eta: f64, lr: f64) -> BilevelState {
    let hyper = BilevelHyper {
        eta,
        lr_theta: lr,
        lr_phi: lr,
        lr_alpha: lr,
        ..BilevelHyper::default()
    };
    BilevelState::new(
        toy.param_set("theta").unwrap(),
        toy.param_set("phi").unwrap(),
        TOY_CLUSTERS,
        hyper,
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(b: &ToyBatch) -> Vec<&[f64]> {
    b.x.data().chunks(TOY_DIM).collect()
}

/// Batch-softmax weights and `∂w_i/∂α_m`, written out by hand.
fn weights_and_jacobian(alpha: &[f64], clusters: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = clusters.len() as f64;
    let e: Vec<f64> = clusters.iter().map(|&c| alpha[c].exp()).collect();
    let z: f64 = e.iter().sum::<f64>() / n;
    let w: Vec<f64> = e.iter().map(|v| v / z).collect();
    let share: Vec<f64> = (0..alpha.len())
        .map(|m| {
            clusters
                .iter()
                .zip(&w)
                .filter(|(&c, _)| c == m)
                .map(|(_, v)| v)
                .sum::<f64>()
                / n
        })
        .collect();
    let jac = clusters
        .iter()
        .zip(&w)
        .map(|(&c, &wi)| {
            (0..alpha.len())
                .map(|m| wi * (f64::from(u8::from(c == m)) - share[m]))
                .collect()
        })
        .collect();
    (w, jac)
}

/// `d/dα L_out(θ − η ∇_θ L_in(θ, φ_in, α), φ_out, α)` by the chain rule,
/// with the teacher target in `L_out` held constant.
pub fn unrolled_alpha_gradient(
    toy: &QuadraticToy,
    theta: &[f64],
    phi_in: &[f64],
    phi_out: &[f64],
    alpha: &[f64],
    eta: f64,
    train: &ToyBatch,
    val: &ToyBatch,
) -> Vec<f64> {
    let k = alpha.len();
    let (w, dw) = weights_and_jacobian(alpha, &train.clusters);
    let n = train.y.len() as f64;
    let tp: Vec<f64> = theta.iter().zip(phi_in).map(|(a, b)| a + b).collect();
    let resid: Vec<f64> = rows(train)
        .iter()
        .zip(&train.y)
        .map(|(x, y)| dot(x, &tp) - y)
        .collect();
    let mut grad_in = vec![0.0; TOY_DIM];
    let mut dgrad = vec![vec![0.0; TOY_DIM]; k];
    for (i, x) in rows(train).iter().enumerate() {
        for d in 0..TOY_DIM {
            grad_in[d] += w[i] * resid[i] * x[d] / n;
            for m in 0..k {
                dgrad[m][d] += dw[i][m] * resid[i] * x[d] / n;
            }
        }
    }
    let theta1: Vec<f64> = theta
        .iter()
        .zip(&grad_in)
        .map(|(t, g)| t - eta * g)
        .collect();

    let (v, dv) = weights_and_jacobian(alpha, &val.clusters);
    let nv = val.y.len() as f64;
    let teacher: Vec<f64> = theta1.iter().zip(phi_out).map(|(a, b)| a + b).collect();
    let mut direct = vec![0.0; k];
    let mut g_theta1 = vec![0.0; TOY_DIM];
    for (j, x) in rows(val).iter().enumerate() {
        let s = dot(x, &theta1);
        let t = dot(x, &teacher);
        let per = 0.5 * (s - val.y[j]).powi(2) + 0.5 * toy.lambda_out * (s - t).powi(2);
        for m in 0..k {
            direct[m] += dv[j][m] * per / nv;
        }
        let ds = v[j] * ((s - val.y[j]) + toy.lambda_out * (s - t)) / nv;
        for d in 0..TOY_DIM {
            g_theta1[d] += ds * x[d];
        }
    }
    (0..k)
        .map(|m| direct[m] - eta * dot(&g_theta1, &dgrad[m]))
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()).max(1e-300)
}

/// One bilevel iteration on the toy. Returns the validation loss after
/// the outer step and the cosine between the corrected α-gradient and
/// the unrolled oracle.
pub fn toy_iteration(
    toy: &QuadraticToy,
    state: &mut BilevelState,
    train: &ToyBatch,
    val: &ToyBatch,
) -> (f64, f64) {
    let eta = state.hyper.eta;
    let g_in = toy.inner(state.params(), train).unwrap();
    let theta = state.theta.values().to_vec();
    let phi_in = state.phi.values().to_vec();
    let alpha = state.alpha.clone();
    state.inner_step(toy, train).unwrap();
    let g_out = toy.outer(state.params(), val).unwrap();
    let rho = gn_coefficient(&g_out.theta, &g_in.theta, state.hyper.eps).unwrap();
    let corrected = hypergradient_alpha(&g_out.alpha, &g_in.alpha, eta, rho).unwrap();
    let oracle = unrolled_alpha_gradient(
        toy,
        &theta,
        &phi_in,
        state.phi.values(),
        &alpha,
        eta,
        train,
        val,
    );
    state.outer_step(toy, val).unwrap();
    let after = toy.outer(state.params(), val).unwrap().loss;
    (after, cosine(&corrected, &oracle))
}

// ---- finite-difference checks against the plain (non-tape) references ----

use irkd_autograd::{attention_pool, kd_per_sample, Tape};
use irkd_core::params::ParamSet;
use irkd_core::scam::{affine_params, affine_params_var, layer_shapes, ScamLayer};
use irkd_core::vfm::{tap_pool, TapHead};

pub const FD_STEP: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-6;

fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Largest relative error between `analytic` and central differences of
/// `f` around `x0`.
pub fn max_rel_err(x0: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        x[i] = x0[i] + FD_STEP;
        let up = f(&x);
        x[i] = x0[i] - FD_STEP;
        let down = f(&x);
        x[i] = x0[i];
        let num = (up - down) / (2.0 * FD_STEP);
        let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    worst
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Projection `r·modulate(f, γ, β)`, differentiated in `(f, γ, β)`.
pub fn modulate_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (
        rng.gen_range(1..5),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    );
    let f = randv(&mut rng, c * h * w, 1.0);
    let gamma = randv(&mut rng, c, 2.0);
    let beta = randv(&mut rng, c, 1.0);
    let r = randv(&mut rng, c * h * w, 1.0);
    let tape = Tape::new();
    let fv = tape.leaf(Tensor::new(&[1, c, h, w], f.clone()));
    let gv = tape.leaf(Tensor::new(&[1, c], gamma.clone()));
    let bv = tape.leaf(Tensor::new(&[1, c], beta.clone()));
    let rv = tape.constant(Tensor::new(&[1, c, h, w], r.clone()));
    let out = irkd_autograd::modulate(fv, gv, bv).mul(rv).sum();
    let g = tape.backward(out);
    let analytic = concat(&[
        g.get_or_zeros(fv).data(),
        g.get_or_zeros(gv).data(),
        g.get_or_zeros(bv).data(),
    ]);
    let n = c * h * w;
    max_rel_err(&concat(&[&f, &gamma, &beta]), &analytic, |x| {
        let m = irkd_core::scam::modulate(
            &Tensor::new(&[c, h, w], x[..n].to_vec()),
            &x[n..n + c],
            &x[n + c..],
        )
        .unwrap();
        dot(m.data(), &r)
    })
}

/// Projection of `(γ, β)` from one generator layer, differentiated in the
/// semantic vector and every layer parameter.
pub fn affine_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, hidden, c) = (
        rng.gen_range(2..7),
        rng.gen_range(2..6),
        rng.gen_range(1..5),
    );
    let mut phi = ParamSet::zeros(layer_shapes(0, d, hidden, c)).unwrap();
    let values = randv(&mut rng, phi.len(), 1.0);
    phi.set_values(values.clone()).unwrap();
    let g0 = randv(&mut rng, d, 1.0);
    let (rg, rb) = (randv(&mut rng, c, 1.0), randv(&mut rng, c, 1.0));
    let tape = Tape::new();
    let bound = phi.bind(&tape, true);
    let gv = tape.leaf(Tensor::new(&[1, d], g0.clone()));
    let (gamma, beta) = affine_params_var(gv, &bound, 0, c);
    let out = gamma
        .mul(tape.constant(Tensor::new(&[1, c], rg.clone())))
        .sum()
        .add(
            beta.mul(tape.constant(Tensor::new(&[1, c], rb.clone())))
                .sum(),
        );
    let grads = tape.backward(out);
    let analytic = concat(&[grads.get_or_zeros(gv).data(), &phi.gradient(&bound, &grads)]);
    max_rel_err(&concat(&[&g0, &values]), &analytic, |x| {
        let mut p = phi.clone();
        p.set_values(x[d..].to_vec()).unwrap();
        let layer = ScamLayer::from_params(&p, 0).unwrap();
        let (ga, be) = affine_params(&x[..d], &layer).unwrap();
        dot(&ga, &rg) + dot(&be, &rb)
    })
}

/// Projection of the pooled vector, differentiated in tokens and scorer.
pub fn tap_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (rng.gen_range(1..7), rng.gen_range(1..6));
    let f = randv(&mut rng, n * d, 1.0);
    let w = randv(&mut rng, d, 1.5);
    let r = randv(&mut rng, d, 1.0);
    let tape = Tape::new();
    let fv = tape.leaf(Tensor::new(&[1, n, d], f.clone()));
    let wv = tape.leaf(Tensor::new(&[d], w.clone()));
    let (pooled, _) = attention_pool(fv, wv);
    let out = pooled
        .mul(tape.constant(Tensor::new(&[1, d], r.clone())))
        .sum();
    let g = tape.backward(out);
    let analytic = concat(&[g.get_or_zeros(fv).data(), g.get_or_zeros(wv).data()]);
    max_rel_err(&concat(&[&f, &w]), &analytic, |x| {
        let (g, _) = tap_pool(
            &x[..n * d],
            n,
            &TapHead {
                w: x[n * d..].to_vec(),
            },
        )
        .unwrap();
        dot(&g, &r)
    })
}

/// Distillation loss, differentiated in both logit maps.
pub fn kd_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..20);
    let tau = rng.gen_range(0.5..6.0);
    let za = randv(&mut rng, n, 6.0);
    let zb = randv(&mut rng, n, 6.0);
    let tape = Tape::new();
    let av = tape.leaf(Tensor::new(&[1, n], za.clone()));
    let bv = tape.leaf(Tensor::new(&[1, n], zb.clone()));
    let out = kd_per_sample(av, bv, tau).sum();
    let g = tape.backward(out);
    let analytic = concat(&[g.get_or_zeros(av).data(), g.get_or_zeros(bv).data()]);
    max_rel_err(&concat(&[&za, &zb]), &analytic, |x| {
        irkd_core::losses::kd_loss(&x[..n], &x[n..], tau).unwrap()
    })
}

// ---- brute-force mask oracles ----

use irkd_core::mask::Mask;

/// 8-connected components by union–find, each as a sorted pixel list.
pub fn uf_components(m: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = m.shape();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) {
                continue;
            }
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0
                    || cc < 0
                    || rr >= h as i64
                    || cc >= w as i64
                    || !m.get(rr as usize, cc as usize)
                {
                    continue;
                }
                let a = find(&mut parent, r * w + c);
                let b = find(&mut parent, rr as usize * w + cc as usize);
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..h * w {
        if m.data()[i] {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

fn centroid(pixels: &[usize], w: usize) -> (f64, f64) {
    let n = pixels.len() as f64;
    let r: usize = pixels.iter().map(|p| p / w).sum();
    let c: usize = pixels.iter().map(|p| p % w).sum();
    (r as f64 / n, c as f64 / n)
}

/// `(targets, detected, false pixels)` with greedy nearest matching.
pub fn brute_detection(pred: &Mask, gt: &Mask, dist: f64) -> (usize, usize, usize) {
    let w = pred.width();
    let pc = uf_components(pred);
    let gc = uf_components(gt);
    let mut g_free = vec![true; gc.len()];
    let mut p_free = vec![true; pc.len()];
    let mut detected = 0;
    loop {
        // Closest remaining pair, ties by target then prediction order of
        // first pixel.
        let mut best: Option<(f64, usize, usize)> = None;
        for (gi, g) in gc.iter().enumerate().filter(|(i, _)| g_free[*i]) {
            for (pi, p) in pc.iter().enumerate().filter(|(i, _)| p_free[*i]) {
                let (a, b) = (centroid(g, w), centroid(p, w));
                let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                if d <= dist && best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, gi, pi));
                }
            }
        }
        match best {
            Some((_, gi, pi)) => {
                g_free[gi] = false;
                p_free[pi] = false;
                detected += 1;
            }
            None => break,
        }
    }
    let false_pixels = pc
        .iter()
        .zip(&p_free)
        .filter(|(_, f)| **f)
        .map(|(c, _)| c.len())
        .sum();
    (gc.len(), detected, false_pixels)
}

/// `(IoU, nIoU, P_d, F_a)` by direct pixel and component counting.
pub fn brute_metrics(preds: &[Mask], gts: &[Mask]) -> (f64, f64, f64, f64) {
    let (mut inter, mut union, mut niou) = (0usize, 0usize, 0.0);
    let (mut targets, mut detected, mut false_px, mut pixels) = (0, 0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let i = p
            .data()
            .iter()
            .zip(g.data())
            .filter(|(a, b)| **a && **b)
            .count();
        let u = p
            .data()
            .iter()
            .zip(g.data())
            .filter(|(a, b)| **a || **b)
            .count();
        inter += i;
        union += u;
        niou += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        let (t, d, f) = brute_detection(p, g, 3.0);
        targets += t;
        detected += d;
        false_px += f;
        pixels += p.len();
    }
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    let pd = if targets == 0 {
        1.0
    } else {
        detected as f64 / targets as f64
    };
    (
        iou,
        niou / preds.len() as f64,
        pd,
        false_px as f64 / pixels as f64,
    )
}

/// Random mask with a few rectangles and speckles.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for _ in 0..rng.gen_range(0..4) {
        let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (dh, dw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        for rr in r..(r + dh).min(h) {
            for cc in c..(c + dw).min(w) {
                m.set(rr, cc, true);
            }
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        m.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
    }
    m
}

/// 8-connected flood fill from `(r, c)` over `keep`, limited to the
/// inclusive window `(r0, c0, r1, c1)`.
pub fn flood(
    keep: impl Fn(usize, usize) -> bool,
    r: usize,
    c: usize,
    win: (usize, usize, usize, usize),
    w: usize,
) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    if !keep(r, c) {
        return vec![];
    }
    let mut stack = vec![(r, c)];
    seen.insert(r * w + c);
    while let Some((y, x)) = stack.pop() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy < win.0 as i64 || xx < win.1 as i64 || yy > win.2 as i64 || xx > win.3 as i64
                {
                    continue;
                }
                let (yy, xx) = (yy as usize, xx as usize);
                if keep(yy, xx) && seen.insert(yy * w + xx) {
                    stack.push((yy, xx));
                }
            }
        }
    }
    seen.into_iter().collect()
}

/// Single-point evolution written from the rule: 33×33 window, threshold
/// halfway between window max and mean, connected component through the
/// point, 1% cap, fallback to the previous component and then to the disk.
pub fn evolve_oracle(prev: &Mask, point: (usize, usize), prob: &[f64]) -> Mask {
    let (h, w) = prev.shape();
    let (r, c) = point;
    let win = (
        r.saturating_sub(16),
        c.saturating_sub(16),
        (r + 16).min(h - 1),
        (c + 16).min(w - 1),
    );
    let vals: Vec<f64> = (win.0..=win.2)
        .flat_map(|y| (win.1..=win.3).map(move |x| prob[y * w + x]))
        .collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let t = 0.5 * max + 0.5 * mean;
    let cap = (0.01 * (h * w) as f64).floor() as usize;
    let mut disk = Mask::empty(h, w);
    for (dr, dc) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let (y, x) = (r as i64 + dr, c as i64 + dc);
        if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
            disk.set(y as usize, x as usize, true);
        }
    }
    let with_disk = |pixels: &[usize]| {
        let mut m = disk.clone();
        for &p in pixels {
            m.set_flat(p, true);
        }
        m
    };
    let fits = |m: &Mask| uf_components(m).iter().all(|comp| comp.len() <= cap);
    let candidate = if max - mean > 1e-12 {
        flood(|y, x| prob[y * w + x] >= t, r, c, win, w)
    } else {
        vec![]
    };
    let previous = flood(|y, x| prev.get(y, x), r, c, (0, 0, h - 1, w - 1), w);
    if !candidate.is_empty() && candidate.len() <= cap {
        let m = with_disk(&candidate);
        if fits(&m) {
            return m;
        }
    }
    let m = with_disk(&previous);
    if fits(&m) {
        return m;
    }
    disk
}

// ---- identity-initialised teacher ----

use irkd_core::dataset::{Dataset, GenerateOptions};
use irkd_core::inference::stack_tokens;
use irkd_core::nets::{student_forward, teacher_forward, Backbone, TinyUNet};
use irkd_core::objective::teacher_spec;
use irkd_core::scam::param_name;
use irkd_core::synthdata::InfraredSample;
use irkd_core::trainer::extract_tokens;
use irkd_core::vfm::StubProvider;

/// Teacher and student logits of four scenes at the identity init.
pub fn teacher_and_student(zero_gates: bool) -> (Tensor, Tensor) {
    let data = Dataset::generate(&GenerateOptions {
        n_train: 10,
        n_test: 2,
        size: 32,
        seed: 9,
        val_ratio: 0.2,
    })
    .unwrap();
    let samples: Vec<&InfraredSample> = data.samples.values().take(4).collect();
    let provider = StubProvider::default();
    let tokens = extract_tokens(&provider, &samples, 12).unwrap();
    let net = TinyUNet::default();
    let theta = net.init_params(4).unwrap();
    let spec = teacher_spec(&net, 12, 384, 64);
    let mut phi = spec.init_phi(5).unwrap();
    if zero_gates {
        for l in 0..3 {
            phi.get_mut(&param_name(l, "gate")).unwrap().fill(0.0);
        }
    }
    let frames: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let images = irkd_core::nets::batch_images(&frames).unwrap();
    let t = stack_tokens(&samples.iter().map(|s| &tokens[&s.id]).collect::<Vec<_>>()).unwrap();
    let (zt, _) = teacher_forward(&net, &spec, &theta, &phi, &images, &t).unwrap();
    let (zs, _) = student_forward(&net, &theta, &images).unwrap();
    (zt, zs)
}
