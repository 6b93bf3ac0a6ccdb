use c2vae::copula::*;
use c2vae::rng::seeded;
use c2vae::tensor::{softplus, Graph, Tensor};

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    best
}

fn min_eigenvalue(m: &[f64], d: usize) -> f64 {
    let na = nalgebra::DMatrix::from_row_slice(d, d, m);
    na.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn kl_closed_forms() {
    let q0 = DiagGaussian::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
    assert_eq!(kl_diag_gaussian(&q0), 0.0);
    let q1 = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
    assert!((kl_diag_gaussian(&q1) - 0.5).abs() < 1e-15);
    let q2 = DiagGaussian::new(vec![0.0], vec![4f64.ln()]).unwrap();
    let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
    assert!((kl_diag_gaussian(&q2) - expect).abs() < 1e-15);
    assert!((expect - 0.8069).abs() < 1e-4);
}

#[test]
fn diag_gaussian_validates() {
    assert!(DiagGaussian::new(vec![], vec![]).is_err());
    assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
    assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
}

#[test]
fn reparameterize_examples() {
    let q = DiagGaussian::new(vec![1.0, -2.0], vec![0.3, -0.4]).unwrap();
    assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
    let unit = DiagGaussian::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
    assert_eq!(reparameterize(&unit, &[0.7, -1.1]).unwrap(), vec![0.7, -1.1]);
    assert!(reparameterize(&q, &[0.0]).is_err());
}

#[test]
fn reparameterize_covariance_monte_carlo() {
    let q = DiagGaussian::new(vec![0.5, -1.0, 2.0], vec![0.0, (0.5f64).ln(), (0.25f64).ln()]).unwrap();
    let mut rng = seeded(11);
    let n = 100_000;
    let samples: Vec<Vec<f64>> =
        (0..n).map(|_| reparameterize(&q, &standard_normal_vec(&mut rng, 3)).unwrap()).collect();
    let mean: Vec<f64> = (0..3).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
    for a in 0..3 {
        for b in 0..3 {
            let c = samples.iter().map(|s| (s[a] - mean[a]) * (s[b] - mean[b])).sum::<f64>() / n as f64;
            let expect = if a == b { q.logvar[a].exp() } else { 0.0 };
            assert!((c - expect).abs() < 0.02, "cov[{a}][{b}] = {c}");
        }
    }
}

fn heads(f: usize, d: usize, scale: f64, seed: u64) -> CorrelationHeads {
    let mut rng = seeded(seed);
    let mut t = |r: usize, c: usize| {
        let data = standard_normal_vec(&mut rng, r * c).into_iter().map(|x| x * scale).collect();
        Tensor::new(if r == 1 { vec![c] } else { vec![r, c] }, data).unwrap()
    };
    CorrelationHeads { w_weight: t(f, d), w_bias: t(1, d), v_weight: t(f, d), v_bias: t(1, d) }
}

#[test]
fn build_correlation_without_coupling_is_identity() {
    let mut h = heads(6, 4, 0.5, 1);
    h.v_weight = Tensor::zeros(&[6, 4]);
    h.v_bias = Tensor::zeros(&[4]);
    let m = build_correlation(&[0.3, -0.2, 1.0, 0.0, 0.5, 0.9], &h).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let id = if i == j { 1.0 } else { 0.0 };
            assert_eq!(m.sigma[i * 4 + j], id);
            assert_eq!(m.l[i * 4 + j], id);
        }
    }
}

#[test]
fn two_dim_normalization_by_hand() {
    let m = CorrelationModel::from_wv(vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
    // M = [[1.25, .25], [.25, 1.25]] -> off-diagonal .25 / 1.25
    assert_eq!(m.sigma[0], 1.0);
    assert_eq!(m.sigma[3], 1.0);
    assert!((m.sigma[1] - 0.2).abs() < 1e-15);
    assert!((m.sigma[2] - 0.2).abs() < 1e-15);
}

#[test]
fn random_encoder_outputs_give_unit_diagonal_pd() {
    let h = heads(20, 10, 0.8, 2);
    let mut rng = seeded(3);
    for _ in 0..1000 {
        let raw: Vec<f64> = standard_normal_vec(&mut rng, 20).into_iter().map(|x| 3.0 * x).collect();
        let m = build_correlation(&raw, &h).unwrap();
        for i in 0..10 {
            assert_eq!(m.sigma[i * 10 + i], 1.0);
        }
        assert!(min_eigenvalue(&m.sigma, 10) > 0.0);
        let back = c2vae::linalg::lower_times_transpose(&m.l, 10);
        assert!(back.iter().zip(&m.sigma).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn build_correlation_rejects_width_mismatch() {
    let h = heads(5, 3, 0.1, 4);
    assert!(build_correlation(&[1.0, 2.0], &h).is_err());
}

#[test]
fn gaussian_copula_examples() {
    let l = vec![1.0, 0.0, 0.6, 0.8];
    assert_eq!(sample_gaussian_copula(&[1.0, 2.0], &l, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
    let id = vec![1.0, 0.0, 0.0, 1.0];
    let z = sample_gaussian_copula(&[1.0, 2.0], &id, &[0.3, -0.4]).unwrap();
    assert!((z[0] - 1.3).abs() < 1e-15 && (z[1] - 1.6).abs() < 1e-15);
    assert!(sample_gaussian_copula(&[1.0], &id, &[0.3, -0.4]).is_err());
}

#[test]
fn gaussian_copula_recovers_target_correlation() {
    let l = cholesky(&[1.0, 0.6, 0.6, 1.0], 2).unwrap();
    let mut rng = seeded(5);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let z = sample_gaussian_copula(&[0.0, 0.0], &l, &standard_normal_vec(&mut rng, 2)).unwrap();
        a.push(z[0]);
        b.push(z[1]);
    }
    assert!((pearson(&a, &b) - 0.6).abs() < 0.02);
}

#[test]
fn scaled_copula_marginal_variances_follow_sigma_c() {
    let l = cholesky(&[1.0, 0.6, 0.6, 1.0], 2).unwrap();
    let mut rng = seeded(6);
    let sc = [0.5, 2.0];
    let samples: Vec<Vec<f64>> = (0..100_000)
        .map(|_| sample_gaussian_copula_scaled(&[0.0, 0.0], &sc, &l, &standard_normal_vec(&mut rng, 2)).unwrap())
        .collect();
    for j in 0..2 {
        let var = samples.iter().map(|s| s[j] * s[j]).sum::<f64>() / samples.len() as f64;
        assert!((var / (sc[j] * sc[j]) - 1.0).abs() < 0.02);
    }
}

#[test]
fn student_copula_independence_in_the_gaussian_limit() {
    let p = StudentCopulaParams::new(vec![1.0, 0.0, 0.0, 1.0], 1e4).unwrap();
    let mut rng = seeded(7);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let z = sample_student_copula(&p, &[0.0, 0.0], &[1.0, 1.0], &mut rng).unwrap();
        a.push(z[0]);
        b.push(z[1]);
    }
    assert!(pearson(&a, &b).abs() < 0.02);
}

#[test]
fn student_copula_rank_correlation_near_gaussian() {
    let rho = 0.6f64;
    let p = StudentCopulaParams::new(vec![1.0, rho, rho, 1.0], 5.0).unwrap();
    let mut rng = seeded(8);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let z = sample_student_copula(&p, &[1.0, -1.0], &[2.0, 0.5], &mut rng).unwrap();
        a.push(z[0]);
        b.push(z[1]);
    }
    // Gaussian copula Spearman: (6/π) asin(ρ/2)
    let gaussian = 6.0 / std::f64::consts::PI * (rho / 2.0).asin();
    assert!((spearman(&a, &b) - gaussian).abs() < 0.03);
}

#[test]
fn student_copula_rejects_small_nu() {
    assert!(StudentCopulaParams::new(vec![1.0], 2.0).is_err());
    assert!(StudentCopulaParams::new(vec![1.0], f64::INFINITY).is_err());
    let mut rng = seeded(0);
    assert!(sample_student_with_factor(&[1.0], 1.5, &[0.0], &[1.0], &mut rng).is_err());
    assert_eq!(c2vae::special::student_t_cdf(0.0, 3.3), 0.5);
}

#[test]
fn gmm_single_component_matches_gaussian_copula_moments() {
    let corr = vec![1.0, -0.5, -0.5, 1.0];
    let p = GmmCopulaParams::new(vec![1.0], vec![vec![1.0, 2.0]], vec![vec![1.0, 1.0]], vec![corr.clone()]).unwrap();
    let l = cholesky(&corr, 2).unwrap();
    let mut rng = seeded(9);
    let mut rng2 = seeded(10);
    let n = 100_000;
    let gm: Vec<Vec<f64>> = (0..n).map(|_| sample_gmm_copula(&p, &mut rng).unwrap()).collect();
    let gc: Vec<Vec<f64>> =
        (0..n).map(|_| sample_gaussian_copula(&[1.0, 2.0], &l, &standard_normal_vec(&mut rng2, 2)).unwrap()).collect();
    for j in 0..2 {
        let a: Vec<f64> = gm.iter().map(|s| s[j]).collect();
        let b: Vec<f64> = gc.iter().map(|s| s[j]).collect();
        assert!(ks_two_sample(&a, &b) < 0.02);
    }
    let col = |s: &[Vec<f64>], j: usize| s.iter().map(|r| r[j]).collect::<Vec<_>>();
    assert!((pearson(&col(&gm, 0), &col(&gm, 1)) - pearson(&col(&gc, 0), &col(&gc, 1))).abs() < 0.02);
}

#[test]
fn gmm_zero_weight_component_is_never_selected() {
    let mut rng = seeded(12);
    for _ in 0..100_000 {
        assert_eq!(pick_component(&[1.0, 0.0], &mut rng), 0);
    }
}

#[test]
fn gmm_two_point_mixture_moments() {
    let sigma = 1.0;
    let p = GmmCopulaParams::new(
        vec![0.5, 0.5],
        vec![vec![2.0], vec![-2.0]],
        vec![vec![sigma], vec![sigma]],
        vec![vec![1.0], vec![1.0]],
    )
    .unwrap();
    let mut rng = seeded(13);
    let xs: Vec<f64> = (0..100_000).map(|_| sample_gmm_copula(&p, &mut rng).unwrap()[0]).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - (4.0 + sigma * sigma)).abs() < 0.1, "var {var}");
}

#[test]
fn gmm_validates_weights() {
    let bad = GmmCopulaParams::new(vec![0.7, 0.2], vec![vec![0.0]; 2], vec![vec![1.0]; 2], vec![vec![1.0]; 2]);
    assert!(bad.is_err());
}

#[test]
fn permute_dims_preserves_marginals() {
    let mut rng = seeded(14);
    let t = Tensor::new(vec![6, 1], vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0]).unwrap();
    let p = permute_dims(&t, &mut rng).unwrap();
    let mut a = t.data().to_vec();
    let mut b = p.data().to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
    assert!(permute_dims(&Tensor::zeros(&[1, 3]), &mut rng).is_err());
}

#[test]
fn permute_dims_destroys_dependence() {
    let l = cholesky(&[1.0, 0.9, 0.9, 1.0], 2).unwrap();
    let mut rng = seeded(15);
    let n = 10_000;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.extend(sample_gaussian_copula(&[0.0, 0.0], &l, &standard_normal_vec(&mut rng, 2)).unwrap());
    }
    let t = Tensor::new(vec![n, 2], data).unwrap();
    let col = |t: &Tensor, j: usize| (0..n).map(|i| t.at(i, j)).collect::<Vec<_>>();
    assert!(pearson(&col(&t, 0), &col(&t, 1)) > 0.85);
    let p = permute_dims(&t, &mut rng).unwrap();
    assert!(pearson(&col(&p, 0), &col(&p, 1)).abs() < 0.05);
}

#[test]
fn vanishing_coupling_matches_permuted_factorized_samples() {
    let d = 3;
    let m = CorrelationModel::from_wv(vec![1.0; d], vec![1e-8; d]).unwrap();
    let mu = [0.5, -1.0, 0.0];
    let sd = [0.3, 1.2, 2.0];
    let n = 100_000;
    let mut rng = seeded(16);
    let mut copula = Vec::with_capacity(n * d);
    let mut fact = Vec::with_capacity(n * d);
    for _ in 0..n {
        copula.extend(sample_gaussian_copula_scaled(&mu, &sd, &m.l, &standard_normal_vec(&mut rng, d)).unwrap());
        let e = standard_normal_vec(&mut rng, d);
        fact.extend((0..d).map(|j| mu[j] + sd[j] * e[j]));
    }
    let fact = permute_dims(&Tensor::new(vec![n, d], fact).unwrap(), &mut rng).unwrap();
    for j in 0..d {
        let a: Vec<f64> = (0..n).map(|i| copula[i * d + j]).collect();
        let b: Vec<f64> = (0..n).map(|i| fact.at(i, j)).collect();
        assert!(ks_two_sample(&a, &b) < 0.02);
    }
}

#[test]
fn copula_density_examples() {
    let id = vec![1.0, 0.0, 0.0, 1.0];
    for u in [[0.1, 0.9], [0.5, 0.5], [0.33, 0.01]] {
        assert!((gaussian_copula_density(&u, &id).unwrap() - 1.0).abs() < 1e-12);
    }
    let r = vec![1.0, 0.7, 0.7, 1.0];
    let det: f64 = 1.0 - 0.49;
    assert!((gaussian_copula_density(&[0.5, 0.5], &r).unwrap() - det.powf(-0.5)).abs() < 1e-12);
    assert!(gaussian_copula_density(&[0.0, 0.5], &r).is_err());
    assert!(gaussian_copula_density(&[0.5, 1.0], &r).is_err());
}

#[test]
fn copula_density_integrates_to_one() {
    use rand::Rng as _;
    let r = vec![1.0, 0.5, 0.5, 1.0];
    let mut rng = seeded(17);
    let n = 200_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let u: [f64; 2] = [rng.random_range(1e-12..1.0), rng.random_range(1e-12..1.0)];
        acc += gaussian_copula_density(&u, &r).unwrap();
    }
    assert!((acc / n as f64 - 1.0).abs() < 0.01);
}

fn coupled_loss(mu: &Tensor, s: &Tensor, w: &Tensor, v: &Tensor, eps: &Tensor, wt: &Tensor, grad: bool) -> (f64, Option<Vec<Tensor>>) {
    let mut g = Graph::new();
    let mk = |g: &mut Graph, t: &Tensor| if grad { g.param(t.clone()).unwrap() } else { g.constant(t.clone()).unwrap() };
    let vars = [mk(&mut g, mu), mk(&mut g, s), mk(&mut g, w), mk(&mut g, v)];
    let z = coupled_sample(&mut g, vars[0], vars[1], vars[2], vars[3], eps).unwrap();
    let wv = g.constant(wt.clone()).unwrap();
    let p = g.mul(z, wv).unwrap();
    let l = g.sum(p, None).unwrap();
    let val = g.value(l).item();
    if grad {
        let gr = g.backward(l).unwrap();
        (val, Some(vars.iter().map(|&v| gr.wrt(v)).collect()))
    } else {
        (val, None)
    }
}

#[test]
fn coupled_sample_gradients_match_finite_differences() {
    let (n, d) = (3, 4);
    for seed in 0..20 {
        let mut rng = seeded(100 + seed);
        let mut t = |f: &dyn Fn(f64) -> f64| Tensor::new(vec![n, d], standard_normal_vec(&mut rng, n * d).into_iter().map(f).collect()).unwrap();
        let mu = t(&|x| x);
        let s = t(&|x| 0.5 + 0.2 * x.abs());
        let w = t(&|x| softplus(x));
        let v = t(&|x| x.tanh());
        let eps = t(&|x| x);
        let wt = t(&|x| x);
        let (_, grads) = coupled_loss(&mu, &s, &w, &v, &eps, &wt, true);
        let grads = grads.unwrap();
        let inputs = [&mu, &s, &w, &v];
        for (k, base) in inputs.iter().enumerate() {
            for i in 0..n * d {
                let h = 1e-5;
                let shift = |delta: f64| {
                    let mut ins: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
                    ins[k].data_mut()[i] += delta;
                    coupled_loss(&ins[0], &ins[1], &ins[2], &ins[3], &eps, &wt, false).0
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let ad = grads[k].data()[i];
                let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
                assert!(err < 1e-4, "seed {seed} input {k} elem {i}: ad {ad} fd {fd}");
                let _ = base;
            }
        }
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn correlation_is_unit_diagonal_and_pd(
            w in proptest::collection::vec(1e-3f64..20.0, 1..9),
            seed in any::<u64>(),
        ) {
            let d = w.len();
            let mut rng = seeded(seed);
            let v: Vec<f64> = standard_normal_vec(&mut rng, d).into_iter().map(|x| (3.0 * x).tanh()).collect();
            let m = CorrelationModel::from_wv(w, v).unwrap();
            for i in 0..d {
                prop_assert_eq!(m.sigma[i * d + i], 1.0);
            }
            prop_assert!(min_eigenvalue(&m.sigma, d) > 0.0);
        }

        #[test]
        fn permutation_preserves_each_column(rows in 2usize..30, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let t = Tensor::new(vec![rows, cols], standard_normal_vec(&mut rng, rows * cols)).unwrap();
            let p = permute_dims(&t, &mut rng).unwrap();
            for j in 0..cols {
                let mut a: Vec<f64> = (0..rows).map(|i| t.at(i, j)).collect();
                let mut b: Vec<f64> = (0..rows).map(|i| p.at(i, j)).collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b);
            }
        }
    }
}
