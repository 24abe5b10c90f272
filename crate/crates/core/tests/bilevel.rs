mod common;

use common::*;
use irkd_core::bilevel::{
    gn_coefficient, hypergradient_alpha, BilevelHyper, BilevelObjective, BilevelState, GradBundle,
    ParamsRef, QuadraticToy,
};
use irkd_core::params::ParamSet;
use irkd_core::reweight::sample_weights;
use irkd_core::Result;
use proptest::prelude::*;

#[test]
fn toy_outer_loss_strictly_decreases_and_hypergradient_aligns() {
    let toy = toy_problem();
    let (train, val) = toy_batches(11);
    let mut state = toy_state(&toy, 0.05, 0.01);
    let mut last = toy.outer(state.params(), &val).unwrap().loss;
    let mut aligned = 0;
    for it in 0..50 {
        let (loss, cos) = toy_iteration(&toy, &mut state, &train, &val);
        assert!(loss < last, "iteration {it}: {loss} !< {last}");
        last = loss;
        aligned += usize::from(cos > 0.0);
    }
    assert!(aligned >= 45, "aligned in {aligned}/50 iterations");
}

#[test]
fn oracle_matches_finite_differences() {
    // Finite differences cannot honour the detached teacher target, so the
    // distillation term is switched off here.
    let toy = QuadraticToy {
        lambda_out: 0.0,
        ..toy_problem()
    };
    let (train, val) = toy_batches(5);
    let theta = [0.3, -0.2, 0.1, 0.5];
    let phi = [0.05, 0.0, -0.1, 0.2];
    let alpha = [0.4, -0.3];
    let eta = 0.1;
    let g = unrolled_alpha_gradient(&toy, &theta, &phi, &phi, &alpha, eta, &train, &val);
    // Independent route: the library objectives, one explicit θ step, and
    // central differences in α.
    let loss_at = |a: &[f64]| {
        let mut th = toy.param_set("theta").unwrap();
        th.set_values(theta.to_vec()).unwrap();
        let mut ph = toy.param_set("phi").unwrap();
        ph.set_values(phi.to_vec()).unwrap();
        let gi = toy
            .inner(
                ParamsRef {
                    theta: &th,
                    phi: &ph,
                    alpha: a,
                },
                &train,
            )
            .unwrap();
        let stepped: Vec<f64> = theta
            .iter()
            .zip(&gi.theta)
            .map(|(t, d)| t - eta * d)
            .collect();
        th.set_values(stepped).unwrap();
        toy.outer(
            ParamsRef {
                theta: &th,
                phi: &ph,
                alpha: a,
            },
            &val,
        )
        .unwrap()
        .loss
    };
    let h = 1e-6;
    for m in 0..2 {
        let mut up = alpha;
        let mut dn = alpha;
        up[m] += h;
        dn[m] -= h;
        let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
        assert!((fd - g[m]).abs() < 1e-7, "α{m}: fd {fd} vs oracle {}", g[m]);
    }
}

/// `L_in = φ²` on a single scalar; θ and α do not enter.
struct ScalarToy;

impl BilevelObjective for ScalarToy {
    type Batch = ();
    fn inner(&self, p: ParamsRef<'_>, _: &()) -> Result<GradBundle> {
        let phi = p.phi.values()[0];
        Ok(GradBundle {
            loss: phi * phi,
            theta: vec![0.0; p.theta.len()],
            phi: vec![2.0 * phi],
            alpha: vec![0.0; p.alpha.len()],
            breakdown: Default::default(),
        })
    }
    fn outer(&self, p: ParamsRef<'_>, _: &()) -> Result<GradBundle> {
        Ok(GradBundle {
            loss: 0.0,
            theta: vec![0.0; p.theta.len()],
            phi: vec![0.0; p.phi.len()],
            alpha: vec![0.0; p.alpha.len()],
            breakdown: Default::default(),
        })
    }
}

fn scalar(name: &str, v: f64) -> ParamSet {
    let mut p = ParamSet::zeros(vec![(name.into(), vec![1])]).unwrap();
    p.values_mut()[0] = v;
    p
}

#[test]
fn scalar_inner_step_is_plain_gradient_descent() {
    let eta = 0.1;
    let hyper = BilevelHyper {
        eta,
        ..BilevelHyper::default()
    };
    let mut s = BilevelState::new(scalar("theta", 0.7), scalar("phi", 1.5), 1, hyper).unwrap();
    s.inner_step(&ScalarToy, &()).unwrap();
    assert!((s.phi.values()[0] - 1.5 * (1.0 - 2.0 * eta)).abs() < 1e-15);
    assert_eq!(s.theta.values(), &[0.7]);
    assert_eq!(s.alpha, vec![0.0]);
}

#[test]
fn steps_touch_only_their_own_groups() {
    let toy = toy_problem();
    let (train, val) = toy_batches(2);
    let mut s = toy_state(&toy, 0.05, 0.01);
    s.theta.set_values(vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    let (theta0, alpha0, phi0) = (s.theta.checksum(), s.alpha.clone(), s.phi.checksum());
    s.inner_step(&toy, &train).unwrap();
    assert_eq!(s.theta.checksum(), theta0);
    assert_eq!(s.alpha, alpha0);
    assert_ne!(s.phi.checksum(), phi0);
    let phi1 = s.phi.checksum();
    s.outer_step(&toy, &val).unwrap();
    assert_eq!(s.phi.checksum(), phi1);
    assert_ne!(s.theta.checksum(), theta0);
    assert_ne!(s.alpha, alpha0);
}

#[test]
fn alpha_moves_toward_the_clean_cluster() {
    // Cluster 1 of the train batch is noisy; the val batch is clean, so
    // the weight of cluster 0 should grow.
    let toy = toy_problem();
    let (train, val) = toy_batches(7);
    let mut s = toy_state(&toy, 0.05, 0.02);
    s.theta.set_values(vec![0.0; 4]).unwrap();
    for _ in 0..40 {
        toy_iteration(&toy, &mut s, &train, &val);
    }
    let w = sample_weights(&s.alpha, &[0, 1]).unwrap();
    assert!(w[0] > w[1], "weights {w:?}, α {:?}", s.alpha);
}

proptest! {
    #[test]
    fn weights_have_unit_batch_mean(
        alpha in prop::collection::vec(-5.0f64..5.0, 1..8),
        raw in prop::collection::vec(0usize..64, 1..40),
    ) {
        let clusters: Vec<usize> = raw.iter().map(|c| c % alpha.len()).collect();
        let w = sample_weights(&alpha, &clusters).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v > 0.0));
        // Same cluster, same weight.
        for i in 0..w.len() {
            for j in 0..w.len() {
                if clusters[i] == clusters[j] {
                    prop_assert!((w[i] - w[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gn_coefficient_is_projection_length(
        pair in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..30),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let mut dot = 0.0;
        let mut nn = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            nn += b[i] * b[i];
        }
        let rho = gn_coefficient(&a, &b, 1e-8).unwrap();
        prop_assert!((rho - dot / (nn + 1e-8)).abs() <= 1e-10 * (1.0 + rho.abs()));
    }

    #[test]
    fn hypergradient_is_elementwise(
        g in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
        eta in 0.0f64..1.0,
        rho in -2.0f64..2.0,
    ) {
        let (o, i): (Vec<f64>, Vec<f64>) = g.into_iter().unzip();
        let h = hypergradient_alpha(&o, &i, eta, rho).unwrap();
        for k in 0..o.len() {
            prop_assert_eq!(h[k], o[k] + eta * rho * i[k]);
        }
    }
}
