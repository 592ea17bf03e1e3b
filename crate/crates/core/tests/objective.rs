use itl_core::matrix::Matrix;
use itl_core::objective::{
    amplitude_penalty, burst_regularizer, combined, rate_regularizer, task_loss, LossConfig, LossMode,
    ObjectiveError,
};
use proptest::prelude::*;

fn traces(rows: &[&[f64]]) -> Matrix {
    Matrix::from_fn(rows.len(), rows[0].len(), |t, k| rows[t][k])
}

#[test]
fn task_loss_examples() {
    let m = traces(&[&[1.0, -0.5], &[2.0, 0.0], &[0.5, -1.0]]);
    let (loss, adj) = task_loss(&m, 0, LossMode::MaxOverTime).unwrap();
    let oracle = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
    assert!((loss - oracle).abs() < 1e-12);
    assert!((loss - 0.126928).abs() < 1e-6);
    let p0 = 2f64.exp() / (2f64.exp() + 1.0);
    assert!((adj.get(1, 0) - (p0 - 1.0)).abs() < 1e-12);
    assert!((adj.get(1, 1) - (1.0 - p0)).abs() < 1e-12);
    assert_eq!(adj.get(0, 0), 0.0);
    assert_eq!(adj.get(2, 1), 0.0);

    for n in [2usize, 10, 20] {
        let tie = Matrix::filled(4, n, 0.3);
        let (l, _) = task_loss(&tie, n - 1, LossMode::MaxOverTime).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-12);
        let (l, adj) = task_loss(&Matrix::zeros(5, n), 1, LossMode::SumOverTime).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-12);
        for t in 0..5 {
            for k in 0..n {
                let want = 1.0 / n as f64 - if k == 1 { 1.0 } else { 0.0 };
                assert!((adj.get(t, k) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn task_loss_errors() {
    assert_eq!(task_loss(&Matrix::zeros(0, 3), 0, LossMode::MaxOverTime).unwrap_err(), ObjectiveError::EmptyTrace);
    assert!(matches!(
        task_loss(&Matrix::zeros(2, 3), 3, LossMode::SumOverTime),
        Err(ObjectiveError::Label { label: 3, n_out: 3 })
    ));
}

#[test]
fn amplitude_examples() {
    let m = traces(&[&[1.0, 0.0, 3.0], &[0.0, 2.0, 1.0]]);
    let (v, adj) = amplitude_penalty(&m, 4e-4);
    assert!((v - 4e-4 * 14.0 / 3.0).abs() < 1e-15);
    assert!((v - 1.8667e-3).abs() < 1e-7);
    assert!((adj.get(0, 2) - 2.0 * 4e-4 * 3.0 / 3.0).abs() < 1e-15);
    assert_eq!(adj.get(1, 2), 0.0);
    assert_eq!(amplitude_penalty(&Matrix::zeros(3, 4), 4e-4).0, 0.0);
    let single = traces(&[&[0.2], &[1.5], &[0.7]]);
    assert!((amplitude_penalty(&single, 0.3).0 - 0.3 * 1.5 * 1.5).abs() < 1e-15);
}

#[test]
fn burst_examples() {
    assert_eq!(burst_regularizer(&Matrix::zeros(4, 3), 0.005).0, 0.0);
    let s = traces(&[&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]]);
    let (v, adj) = burst_regularizer(&s, 0.005);
    assert!((v - 0.01).abs() < 1e-15);
    assert!((adj.get(1, 0) - 2.0 * 0.005 * 2.0 / 2.0).abs() < 1e-15);
    assert_eq!(adj.get(0, 1), 0.0);
    let doubled = s.map(|x| 2.0 * x);
    assert!((burst_regularizer(&doubled, 0.005).0 - 4.0 * v).abs() < 1e-15);
}

#[test]
fn rate_examples() {
    let spikes_total = |n: usize| Matrix::from_fn(n, 1, |_, _| 1.0);
    assert_eq!(rate_regularizer(&spikes_total(500), 6e-4, 600.0).0, 0.0);
    let (v, adj) = rate_regularizer(&spikes_total(700), 6e-4, 600.0);
    assert!((v - 6.0).abs() < 1e-9);
    assert!((adj.get(0, 0) - 2.0 * 6e-4 * 100.0).abs() < 1e-12);
    let (v, adj) = rate_regularizer(&spikes_total(600), 6e-4, 600.0);
    assert_eq!(v, 0.0);
    assert!(adj.as_slice().iter().all(|&a| a == 0.0));
}

#[test]
fn combined_adjoints_match_finite_differences() {
    // Distinct trace values keep the argmax locations fixed under small steps.
    let rows = 6;
    let n_out = 3;
    let n_hidden = 4;
    let tr = Matrix::from_fn(rows, n_out, |t, k| ((t * 7 + k * 5) % 11) as f64 * 0.13 - 0.4 + 0.01 * k as f64);
    let sp = Matrix::from_fn(rows, n_hidden, |t, j| ((t + 2 * j) % 3) as f64 * 0.5);
    for cfg in [
        LossConfig { rho_a: 0.05, rho_b: 0.02, ..LossConfig::mnist() },
        LossConfig { rho_r: 0.01, theta_r: 2.0, ..LossConfig::shd() },
    ] {
        let terms = combined(&cfg, &tr, &sp, 1).unwrap();
        let f = |tr: &Matrix, sp: &Matrix| combined(&cfg, tr, sp, 1).unwrap().total();
        let h = 1e-6;
        for t in 0..rows {
            for k in 0..n_out {
                let (mut a, mut b) = (tr.clone(), tr.clone());
                a.add_at(t, k, h);
                b.add_at(t, k, -h);
                let fd = (f(&a, &sp) - f(&b, &sp)) / (2.0 * h);
                assert!((fd - terms.d_traces.get(t, k)).abs() < 1e-7, "trace ({t},{k}): {fd} vs {}", terms.d_traces.get(t, k));
            }
            for j in 0..n_hidden {
                let (mut a, mut b) = (sp.clone(), sp.clone());
                a.add_at(t, j, h);
                b.add_at(t, j, -h);
                let fd = (f(&tr, &a) - f(&tr, &b)) / (2.0 * h);
                assert!((fd - terms.d_spikes.get(t, j)).abs() < 1e-7);
            }
        }
        let (task, _) = task_loss(&tr, 1, cfg.mode).unwrap();
        let total = task + amplitude_penalty(&tr, cfg.rho_a).0 + burst_regularizer(&sp, cfg.rho_b).0
            + rate_regularizer(&sp, cfg.rho_r, cfg.theta_r).0;
        assert!((terms.total() - total).abs() < 1e-12);
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn counts(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0u8..2, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v.into_iter().map(f64::from).collect()))
}

proptest! {
    #[test]
    fn losses_are_non_negative(m in matrix(5, 4), s in counts(5, 3), label in 0usize..4, sum in any::<bool>()) {
        let mode = if sum { LossMode::SumOverTime } else { LossMode::MaxOverTime };
        prop_assert!(task_loss(&m, label, mode).unwrap().0 >= 0.0);
        prop_assert!(amplitude_penalty(&m, 4e-4).0 >= 0.0);
        prop_assert!(burst_regularizer(&s, 0.005).0 >= 0.0);
        prop_assert!(rate_regularizer(&s, 0.1, 3.0).0 >= 0.0);
    }

    #[test]
    fn task_loss_is_shift_invariant(m in matrix(5, 4), c in -10.0f64..10.0, label in 0usize..4, sum in any::<bool>()) {
        let mode = if sum { LossMode::SumOverTime } else { LossMode::MaxOverTime };
        // A per-step shift of c/rows shifts every sum-over-time logit by c.
        let shift = if sum { c / 5.0 } else { c };
        let shifted = m.map(|x| x + shift);
        let a = task_loss(&m, label, mode).unwrap().0;
        let b = task_loss(&shifted, label, mode).unwrap().0;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn regularizers_are_monotone(s in counts(6, 4), t in 0usize..6, j in 0usize..4) {
        let mut more = s.clone();
        more.add_at(t, j, 1.0);
        prop_assert!(burst_regularizer(&more, 0.005).0 >= burst_regularizer(&s, 0.005).0);
        prop_assert!(rate_regularizer(&more, 6e-4, 5.0).0 >= rate_regularizer(&s, 6e-4, 5.0).0);
    }
}
