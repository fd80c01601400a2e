//! Measurements shared by the focused test files and the acceptance
//! report. Each returns the worst error it saw so callers can apply their
//! own tolerance.

#![allow(dead_code)]

use cromo_core::autodiff::{Mat, Tape};
use cromo_core::data::TaskClassMap;
use cromo_core::eval::compute_la_wp_tp;
use cromo_core::losses::{
    barlow_twins, byol_mse, byol_mse_weighted, corinfomax, info_nce, info_nce_weighted, ssl_loss,
    CorInfoMaxParams, CovState, PairLoss, SslAux, SslKind, SslLossSpec,
};
use cromo_core::objective::cromo_loss;
use cromo_core::params::{ParamKind, ParamStore};
use rand::Rng;

use super::oracles::{self, Rows};
use super::{mat, numeric_grad, randn, rng, rows};

fn random_psd(r: &mut impl Rng, d: usize) -> Mat {
    let a = randn(r, d, d);
    a.dot(&a.t()) / d as f64
}

/// Worst absolute difference between each library loss and its loop
/// oracle over `instances` random problems with `B <= 8`, `D <= 4`.
pub fn loss_oracle_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 5];
    for k in 0..instances {
        let b = r.random_range(3..=8);
        let d = r.random_range(2..=4);
        let (z1, z2) = (randn(&mut r, b, d), randn(&mut r, b, d));
        let (o1, o2) = (rows(&z1), rows(&z2));
        let tau = r.random_range(0.1..1.0);
        let ones = vec![1.0; b];

        let lib = info_nce(z1.view(), z2.view(), tau, None).unwrap().value;
        worst[0] = worst[0].max((lib - oracles::info_nce(&o1, &o2, tau, &Vec::new(), &ones)).abs());
        let m = r.random_range(1..=4);
        let extra = randn(&mut r, m, d);
        let w: Vec<f64> = (0..b).map(|_| r.random_range(0.0..1.0)).collect();
        let lib = info_nce_weighted(z1.view(), z2.view(), tau, Some(extra.view()), &w)
            .unwrap()
            .value;
        worst[0] = worst[0].max((lib - oracles::info_nce(&o1, &o2, tau, &rows(&extra), &w)).abs());

        let lambda = if k % 2 == 0 {
            0.0051
        } else {
            r.random_range(0.0..1.0)
        };
        let lib = barlow_twins(z1.view(), z2.view(), lambda).unwrap().value;
        worst[1] = worst[1].max((lib - oracles::barlow(&o1, &o2, lambda)).abs());

        let lib = byol_mse(z1.view(), z2.view()).unwrap().value;
        worst[2] = worst[2].max((lib - oracles::byol(&o1, &o2, &ones)).abs());
        let lib = byol_mse_weighted(z1.view(), z2.view(), &w).unwrap().value;
        worst[2] = worst[2].max((lib - oracles::byol(&o1, &o2, &w)).abs());

        let p = CorInfoMaxParams {
            eps: r.random_range(1e-3..1e-1),
            lambda_cov: r.random_range(0.0..0.9),
            invariance_coeff: (k % 3 == 0).then_some(0.7),
            normalize: false,
        };
        let state = CovState {
            r1: random_psd(&mut r, d),
            r2: random_psd(&mut r, d),
        };
        let (loss, next) = corinfomax(z1.view(), z2.view(), &p, &state).unwrap();
        let (v, r1, r2) = oracles::corinfomax(
            &o1,
            &o2,
            &rows(&state.r1),
            &rows(&state.r2),
            p.eps,
            p.lambda_cov,
            p.invariance_coeff,
        );
        worst[3] = worst[3].max((loss.value - v).abs());
        let state_err = |a: &Mat, b: &Rows| {
            a.iter()
                .zip(mat(b).iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        worst[4] = worst[4]
            .max(state_err(&next.r1, &r1))
            .max(state_err(&next.r2, &r2));
    }
    vec![
        ("info_nce", worst[0]),
        ("barlow_twins", worst[1]),
        ("byol_mse", worst[2]),
        ("corinfomax", worst[3]),
        ("corinfomax state", worst[4]),
    ]
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, or the absolute error when both are tiny.
pub fn grad_rel_err(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(numeric.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn pair_check(z1: &Mat, z2: &Mat, f: impl Fn(&Mat, &Mat) -> PairLoss) -> f64 {
    const H: f64 = 1e-5;
    let base = f(z1, z2);
    let n1 = numeric_grad(z1, H, |x| f(x, z2).value);
    let n2 = numeric_grad(z2, H, |x| f(z1, x).value);
    grad_rel_err(&base.grad_a, &n1).max(grad_rel_err(&base.grad_b, &n2))
}

fn cromo_check(spec: &SslLossSpec, state: Option<&CovState>, z: [&Mat; 3], lambda: &[f64]) -> f64 {
    let eval = |z: [&Mat; 3]| -> (f64, Vec<Mat>) {
        let mut store = ParamStore::new();
        let ids: Vec<_> = z
            .iter()
            .enumerate()
            .map(|(i, m)| store.add(format!("z{i}"), ParamKind::Weight, (*m).clone()))
            .collect();
        let mut tape = Tape::new();
        let n: Vec<_> = ids
            .iter()
            .map(|&id| store.leaf(&mut tape, id, true))
            .collect();
        let root = cromo_loss(&mut tape, spec, state, n[0], n[1], n[2], lambda).unwrap();
        let g = tape.backward(root);
        let grads = ids
            .iter()
            .zip(&z)
            .map(|(&id, m)| g.get(id).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
            .collect();
        (tape.scalar(root), grads)
    };
    let (_, analytic) = eval(z);
    let mut worst = 0.0f64;
    for k in 0..3 {
        let num = numeric_grad(z[k], 1e-5, |x| {
            let mut zz = z;
            zz[k] = x;
            eval(zz).0
        });
        worst = worst.max(grad_rel_err(&analytic[k], &num));
    }
    worst
}

/// Worst relative gradient error per loss over `instances` random inputs.
pub fn gradient_errors(instances: usize, seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut record = |name: String, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => out.push((name, e)),
    };
    for _ in 0..instances {
        let b = r.random_range(4..=6);
        let d = r.random_range(2..=4);
        let (z1, z2) = (randn(&mut r, b, d), randn(&mut r, b, d));
        let extra = randn(&mut r, 3, d);
        let tau = r.random_range(0.2..1.0);
        let w: Vec<f64> = (0..b).map(|_| r.random_range(0.1..1.0)).collect();

        record(
            "info_nce".into(),
            pair_check(&z1, &z2, |a, c| {
                info_nce(a.view(), c.view(), tau, None).unwrap()
            }),
        );
        let base = info_nce_weighted(z1.view(), z2.view(), tau, Some(extra.view()), &w).unwrap();
        let num = numeric_grad(&extra, 1e-5, |x| {
            info_nce_weighted(z1.view(), z2.view(), tau, Some(x.view()), &w)
                .unwrap()
                .value
        });
        record(
            "info_nce negatives".into(),
            grad_rel_err(base.grad_extra.as_ref().unwrap(), &num),
        );
        record(
            "barlow_twins".into(),
            pair_check(&z1, &z2, |a, c| {
                barlow_twins(a.view(), c.view(), 0.0051).unwrap()
            }),
        );
        record(
            "byol_mse".into(),
            pair_check(&z1, &z2, |a, c| {
                byol_mse_weighted(a.view(), c.view(), &w).unwrap()
            }),
        );
        let p = CorInfoMaxParams {
            eps: 1e-2,
            lambda_cov: 0.3,
            invariance_coeff: None,
            normalize: false,
        };
        let state = CovState {
            r1: random_psd(&mut r, d),
            r2: random_psd(&mut r, d),
        };
        record(
            "corinfomax".into(),
            pair_check(&z1, &z2, |a, c| {
                corinfomax(a.view(), c.view(), &p, &state).unwrap().0
            }),
        );
        let spec = SslLossSpec {
            corinfomax: CorInfoMaxParams {
                normalize: true,
                ..p
            },
            ..SslLossSpec::new(SslKind::Corinfomax)
        };
        record(
            "corinfomax normalised".into(),
            pair_check(&z1, &z2, |a, c| {
                ssl_loss(&spec, Some(&state), a.view(), c.view(), SslAux::default())
                    .unwrap()
                    .loss
            }),
        );

        let zm = randn(&mut r, b, d);
        let lambda: Vec<f64> = (0..b).map(|_| r.random_range(0.0..1.0)).collect();
        for kind in SslKind::ALL {
            let mut spec = SslLossSpec::new(kind);
            spec.temperature = tau;
            spec.corinfomax = p;
            let st = (kind == SslKind::Corinfomax).then_some(&state);
            record(
                format!("cromo_loss {}", kind.name()),
                cromo_check(&spec, st, [&zm, &z1, &z2], &lambda),
            );
        }
    }
    out
}

/// Largest `|LA - WP·TP|` over random prediction sets with random task
/// maps, counting only sets with at least one task-correct prediction.
/// Also checks the count bounds and the agreement with the loop oracle.
pub fn metric_identity(trials: usize, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut used = 0;
    for _ in 0..trials {
        let classes = r.random_range(2..=12);
        let tasks = r.random_range(1..=classes);
        let mut task_of: Vec<usize> = (0..classes).map(|c| c % tasks).collect();
        for i in (1..classes).rev() {
            task_of.swap(i, r.random_range(0..=i));
        }
        let map = TaskClassMap::new(task_of.clone(), tasks).unwrap();
        let n = r.random_range(1..=200);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| {
                if r.random_bool(0.5) {
                    y
                } else {
                    r.random_range(0..classes)
                }
            })
            .collect();
        let m = compute_la_wp_tp(&preds, &labels, &map).unwrap();
        assert!(m.n_class_correct <= m.n_task_correct && m.n_task_correct <= m.n_total);
        let (la, tp, wp) = oracles::la_tp_wp(&preds, &labels, &task_of);
        assert!(
            (m.la - la).abs() < 1e-15 && (m.tp - tp).abs() < 1e-15 && (m.wp - wp).abs() < 1e-15
        );
        if m.n_task_correct > 0 {
            used += 1;
            worst = worst.max((m.la - m.wp * m.tp).abs());
        }
    }
    (worst, used)
}

/// Tasks {0,1} and {2,3}; true → predicted 0→0, 1→3, 2→2, 3→2.
pub fn four_sample_fixture() -> (f64, f64, f64) {
    let map = TaskClassMap::new(vec![0, 0, 1, 1], 2).unwrap();
    let m = compute_la_wp_tp(&[0, 3, 2, 2], &[0, 1, 2, 3], &map).unwrap();
    (m.la, m.tp, m.wp)
}
