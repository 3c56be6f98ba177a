use proptest::prelude::*;

use gplvm::autodiff::Tape;
use gplvm::data::{make_s_curve_dataset, read_matrix, write_matrix};
use gplvm::dppca::{classify_regime, closed_form_log_likelihood, gram_eigs, log_likelihood, sigma2_mle, stationary_x, Slot};
use gplvm::eval::{affine_r2, impute_posterior_mean, knn_self_accuracy};
use gplvm::kernels::{feature_matrix, kernel_matrix, sample_spectral_points, BaseKernelConfig, Kernel, LinearKernel, SmKernelParams};
use gplvm::linalg::{sym_eig, Cholesky, DenseMatrix};
use gplvm::mask::ObservationMask;
use gplvm::model::{exact_log_marginal, kl_term, VariationalParams};
use gplvm::rng::{rng_from_seed, standard_normals};
use gplvm::trainer::Checkpoint;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
}

fn gaussian(seed: u64, rows: usize, cols: usize) -> DenseMatrix {
    let mut rng = rng_from_seed(seed);
    DenseMatrix::from_vec(rows, cols, standard_normals(&mut rng, rows * cols)).unwrap()
}

fn sm_params() -> impl Strategy<Value = SmKernelParams> {
    (
        prop::collection::vec(-1.0f64..1.0, 2),
        matrix(2, 2).prop_map(|m| m.scale(0.2)),
        matrix(2, 2).prop_map(|m| m.scale(0.3).map(|v| v - 2.0)),
    )
        .prop_map(|(w, mu, lv)| SmKernelParams::new(w, mu, lv, -2.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spd_solve_reproduces_rhs(a in matrix(6, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut spd = a.gram();
        spd.add_diag(0.5);
        let x = Cholesky::new(&spd).unwrap().solve_vec(&b).unwrap();
        let back = spd.matvec(&x).unwrap();
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (u, v) in back.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn eigenvalues_ignore_permutation(a in matrix(5, 5), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let s = a.add(&a.transpose()).unwrap();
        let p = DenseMatrix::from_fn(5, 5, |i, j| s[(perm[i], perm[j])]);
        let e1 = sym_eig(&s).unwrap().values;
        let e2 = sym_eig(&p).unwrap().values;
        for (u, v) in e1.iter().zip(&e2) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn tape_sum_rule(x in matrix(3, 2)) {
        let tape = Tape::new();
        let v = tape.input("x", x.clone());
        let f = v.sin().sum();
        let g = v.square().sum();
        let both = tape.backward(f.add(g).unwrap()).unwrap().get(v).unwrap().clone();
        let gf = tape.backward(f).unwrap().get(v).unwrap().clone();
        let gg = tape.backward(g).unwrap().get(v).unwrap().clone();
        prop_assert_eq!(both, gf.add(&gg).unwrap());
    }

    #[test]
    fn tape_fan_out(x in matrix(2, 3)) {
        let tape = Tape::new();
        let v = tape.input("x", x);
        let twice = tape.backward(v.mul(v).unwrap().sum()).unwrap().get(v).unwrap().clone();
        let square = tape.backward(v.square().sum()).unwrap().get(v).unwrap().clone();
        prop_assert_eq!(twice, square);
    }

    #[test]
    fn sm_kernel_symmetric_and_shift_invariant(p in sm_params(), x in matrix(1, 2), y in matrix(1, 2)) {
        let (a, b) = (x.row(0), y.row(0));
        let k = p.eval(a, b);
        prop_assert_eq!(k, p.eval(b, a));
        // lags are compared exactly for integer shifts that keep τ bit-identical
        let shift = |v: &[f64]| -> Vec<f64> { v.iter().map(|t| t + 4.0).collect() };
        let (sa, sb) = (shift(a), shift(b));
        let same_lag = sa.iter().zip(&sb).zip(a.iter().zip(b)).all(|((u, v), (s, t))| u - v == s - t);
        if same_lag {
            prop_assert_eq!(k, p.eval(&sa, &sb));
        }
    }

    #[test]
    fn random_feature_gram_is_psd(p in sm_params(), seed in 0u64..1000) {
        let x = gaussian(seed, 8, 2);
        let sample = sample_spectral_points(&p, 6, seed).unwrap();
        let phi = feature_matrix(&x, &sample, &p).unwrap();
        let min = sym_eig(&phi.outer_gram()).unwrap().values.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-10);
    }

    #[test]
    fn kl_is_nonnegative(mu in matrix(4, 2), log_s in matrix(4, 2)) {
        let vp = VariationalParams::new(mu, log_s).unwrap();
        prop_assert!(kl_term(&vp) >= 0.0);
    }

    #[test]
    fn likelihood_is_rotation_invariant(seed in 0u64..500, angle in 0.0f64..6.28) {
        let y = gaussian(seed, 12, 8);
        let eig = gram_eigs(&y).unwrap();
        let s2 = sigma2_mle(&eig.values, 2, 12).unwrap();
        let slots = [Slot::Eigen(0), Slot::Eigen(1)];
        let r = DenseMatrix::from_rows(&[[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]]).unwrap();
        let base = stationary_x(&eig, &slots, s2, None).unwrap();
        let rotated = stationary_x(&eig, &slots, s2, Some(&r)).unwrap();
        let l0 = log_likelihood(&y, &base.x_hat, s2).unwrap();
        let l1 = log_likelihood(&y, &rotated.x_hat, s2).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-10 * l0.abs().max(1.0));
    }

    #[test]
    fn regime_count_is_monotone(mut ev in prop::collection::vec(0.01f64..10.0, 6), q in 1usize..5) {
        ev.sort_by(|a, b| b.total_cmp(a));
        let mut prev = 0;
        for k in 1..400 {
            let s2 = k as f64 * 0.03;
            let c = classify_regime(&ev, s2, q).predicted_zero_cols;
            prop_assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn affine_r2_is_affine_invariant(seed in 0u64..1000, a in matrix(2, 2), shift in matrix(1, 2)) {
        let mut t = a;
        t.add_diag(4.0);
        prop_assume!((t[(0, 0)] * t[(1, 1)] - t[(0, 1)] * t[(1, 0)]).abs() > 0.5);
        let truth = gaussian(seed, 40, 2);
        let est = truth.add(&gaussian(seed + 1, 40, 2).scale(0.5)).unwrap();
        let moved = DenseMatrix::from_fn(40, 2, |r, c| {
            est[(r, 0)] * t[(0, c)] + est[(r, 1)] * t[(1, c)] + shift[(0, c)]
        });
        let r0 = affine_r2(&est, &truth).unwrap();
        let r1 = affine_r2(&moved, &truth).unwrap();
        prop_assert!((r0 - r1).abs() <= 1e-10);
        prop_assert!(r0 <= 1.0);
    }

    #[test]
    fn knn_recovers_training_labels(seed in 0u64..1000, classes in 2i64..5) {
        let x = gaussian(seed, 30, 2);
        let labels: Vec<i64> = (0..30).map(|i| i as i64 % classes).collect();
        prop_assert_eq!(knn_self_accuracy(&x, &labels, 1).unwrap(), 1.0);
    }

    #[test]
    fn imputation_keeps_observed_entries(seed in 0u64..1000, hidden in prop::collection::vec(any::<bool>(), 30)) {
        let x = gaussian(seed, 10, 2);
        let y = gaussian(seed + 7, 10, 3);
        let mut observed: Vec<bool> = hidden.iter().map(|h| !h).collect();
        for c in 0..3 {
            observed[c] = true;
        }
        let mask = ObservationMask::from_vec(10, 3, observed).unwrap();
        let params = SmKernelParams::new(vec![0.0], DenseMatrix::zeros(1, 2), DenseMatrix::filled(1, 2, -3.0), -3.0).unwrap();
        let out = impute_posterior_mean(&y, &mask, &x, &params).unwrap();
        for r in 0..10 {
            for c in 0..3 {
                if mask.is_observed(r, c) {
                    prop_assert_eq!(out[(r, c)].to_bits(), y[(r, c)].to_bits());
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact(m in matrix(5, 3).prop_map(|m| m.map(|v| v * 1e7 / 3.0))) {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, None).unwrap();
        let back = read_matrix(buf.as_slice()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000) {
        let y = gaussian(seed, 9, 3);
        let cfg = gplvm::trainer::TrainConfig { iterations: 2, latent_dim: 2, features: 4, seed, ..Default::default() };
        let out = gplvm::trainer::train(&y, &cfg, None).unwrap();
        let ck = out.checkpoint(3, 4);
        prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }
}

#[test]
fn linear_marginal_matches_closed_form() {
    for seed in 0..10 {
        let y = gaussian(seed, 15, 10);
        let eig = gram_eigs(&y).unwrap();
        let q = 3;
        let s2 = sigma2_mle(&eig.values, q, 15).unwrap();
        let x = stationary_x(&eig, &[Slot::Eigen(0), Slot::Eigen(1), Slot::Eigen(2)], s2, None)
            .unwrap()
            .x_hat;
        let dense = exact_log_marginal(&y, &x, &LinearKernel, s2).unwrap();
        let closed = closed_form_log_likelihood(&eig.values, &[0, 1, 2], s2, 10);
        assert!((dense - closed).abs() <= 1e-8 * closed.abs(), "{dense} vs {closed}");
    }
}

#[test]
fn s_curve_latents_are_well_conditioned() {
    for seed in 0..5 {
        let ds = make_s_curve_dataset(300, 2, &BaseKernelConfig::rbf_preset(), 0.01, seed).unwrap();
        let x = ds.x_true.unwrap();
        let n = x.rows() as f64;
        let mean: Vec<f64> = (0..2).map(|c| x.col(c).iter().sum::<f64>() / n).collect();
        let centered = DenseMatrix::from_fn(x.rows(), 2, |r, c| x[(r, c)] - mean[c]);
        let cov = centered.gram().scale(1.0 / (n - 1.0));
        let ev = sym_eig(&cov).unwrap().values;
        assert!(ev[0] / ev[1] < 100.0, "{ev:?}");
    }
}

#[test]
fn s_curve_column_covariance_matches_kernel() {
    let n = 30;
    let m = 2000;
    let kernel = BaseKernelConfig::rbf_preset();
    let ds = make_s_curve_dataset(n, m, &kernel, 0.01, 9).unwrap();
    let mut target = kernel_matrix(ds.x_true.as_ref().unwrap(), &kernel);
    target.add_diag(0.01);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..=i {
            let prods: Vec<f64> = (0..m).map(|c| ds.y[(i, c)] * ds.y[(j, c)]).collect();
            let mean = prods.iter().sum::<f64>() / m as f64;
            let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            let se = (var / m as f64).sqrt();
            worst = worst.max((mean - target[(i, j)]).abs() / se);
        }
    }
    assert!(worst <= 5.0, "{worst}");
}
