//! Distributional primitives for the factorized and coupled branches.
//!
//! The factorized posterior is a [`DiagGaussian`]. Coupled samples are drawn
//! through a Gaussian copula whose unit-diagonal correlation matrix is built
//! from a positive vector `w` and a bounded vector `v` as the normalized
//! `diag(w) + v vᵀ`. Student-t and Gaussian-mixture copulas and the batch
//! permutation sampler provide the alternative negative distributions.

mod coupled;

pub use coupled::coupled_sample;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::rng::Rng;
use crate::special::{normal_quantile, student_t_to_normal};
use crate::tensor::{softplus, Tensor};

/// Diagonal Gaussian `N(mu, diag(exp(logvar)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != logvar.len() {
            return shape_err("DiagGaussian", format!("mu {} vs logvar {}", mu.len(), logvar.len()));
        }
        if !mu.iter().chain(&logvar).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("DiagGaussian"));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `KL(q || N(0, I)) = Σ ½(μ² + σ² − 1 − ln σ²)`.
pub fn kl_diag_gaussian(q: &DiagGaussian) -> f64 {
    q.mu.iter().zip(&q.logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// `z = μ + exp(½ logvar) ⊙ eps`.
pub fn reparameterize(q: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.dim() {
        return shape_err("reparameterize", format!("eps {} vs d {}", eps.len(), q.dim()));
    }
    Ok(q.mu.iter().zip(&q.logvar).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

pub fn standard_normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Learned dependence structure of the copula branch.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationModel {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    /// Unit-diagonal correlation matrix, row-major `d x d`.
    pub sigma: Vec<f64>,
    /// Lower Cholesky factor of `sigma`.
    pub l: Vec<f64>,
}

impl CorrelationModel {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Builds the model directly from `w > 0` and `v`.
    pub fn from_wv(w: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let d = w.len();
        if d == 0 || v.len() != d {
            return shape_err("CorrelationModel", format!("w {} vs v {}", d, v.len()));
        }
        if w.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::Domain { op: "build_correlation", detail: "w must be positive".into() });
        }
        let sigma = normalized_correlation(&w, &v);
        let l = cholesky(&sigma, d)?;
        Ok(Self { w, v, sigma, l })
    }
}

/// `D^{-1/2} (diag(w) + v vᵀ) D^{-1/2}` with `D = diag(diag(w) + v vᵀ)`.
/// The diagonal is set to exactly 1.
pub fn normalized_correlation(w: &[f64], v: &[f64]) -> Vec<f64> {
    let d = w.len();
    let diag: Vec<f64> = (0..d).map(|i| w[i] + v[i] * v[i]).collect();
    let mut sigma = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sigma[i * d + j] = if i == j { 1.0 } else { v[i] * v[j] / (diag[i] * diag[j]).sqrt() };
        }
    }
    sigma
}

/// Affine heads mapping covariance-encoder features to `w` and `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationHeads {
    /// `features x d`
    pub w_weight: Tensor,
    pub w_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
}

/// `w = softplus(raw W₁ + b₁)`, `v = tanh(raw W₂ + b₂)`, then the normalized
/// correlation and its Cholesky factor.
pub fn build_correlation(raw: &[f64], heads: &CorrelationHeads) -> Result<CorrelationModel> {
    let f = raw.len();
    if heads.w_weight.rows() != f || heads.v_weight.rows() != f {
        return shape_err("build_correlation", format!("raw width {f} vs heads {:?}", heads.w_weight.shape()));
    }
    let affine = |weight: &Tensor, bias: &Tensor| -> Vec<f64> {
        let d = weight.cols();
        (0..d)
            .map(|j| bias.data()[j] + (0..f).map(|k| raw[k] * weight.at(k, j)).sum::<f64>())
            .collect()
    };
    let w = affine(&heads.w_weight, &heads.w_bias).into_iter().map(softplus).collect();
    let v = affine(&heads.v_weight, &heads.v_bias).into_iter().map(f64::tanh).collect();
    CorrelationModel::from_wv(w, v)
}

/// Lower Cholesky factor; retries once with `1e-10 I` jitter.
pub fn cholesky(sigma: &[f64], d: usize) -> Result<Vec<f64>> {
    linalg::cholesky(sigma, d)
}

/// `z_p = mu_c + L eps`.
pub fn sample_gaussian_copula(mu_c: &[f64], l: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let d = mu_c.len();
    if eps.len() != d || l.len() != d * d {
        return shape_err("sample_gaussian_copula", format!("mu {d}, eps {}, L {}", eps.len(), l.len()));
    }
    Ok(linalg::lower_matvec(l, d, eps).into_iter().zip(mu_c).map(|(y, m)| m + y).collect())
}

/// Gaussian marginals `N(mu_c, sigma_c²)` coupled by the correlation whose
/// Cholesky factor is `l`: `z = mu_c + sigma_c ⊙ (L eps)`.
pub fn sample_gaussian_copula_scaled(mu_c: &[f64], sigma_c: &[f64], l: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if sigma_c.len() != mu_c.len() {
        return shape_err("sample_gaussian_copula_scaled", "sigma_c length");
    }
    let unit = sample_gaussian_copula(&vec![0.0; mu_c.len()], l, eps)?;
    Ok(unit.iter().zip(mu_c).zip(sigma_c).map(|((y, m), s)| m + s * y).collect())
}

#[derive(Clone, Debug)]
pub struct StudentCopulaParams {
    /// Unit-diagonal correlation, row-major `d x d`.
    pub rho: Vec<f64>,
    pub nu: f64,
}

impl StudentCopulaParams {
    pub fn new(rho: Vec<f64>, nu: f64) -> Result<Self> {
        if !(nu > 2.0) || !nu.is_finite() {
            return Err(Error::Domain { op: "student copula", detail: format!("nu = {nu} must be finite and > 2") });
        }
        let d = (rho.len() as f64).sqrt() as usize;
        if d * d != rho.len() || d == 0 {
            return shape_err("student copula", "rho must be square");
        }
        Ok(Self { rho, nu })
    }

    pub fn dim(&self) -> usize {
        (self.rho.len() as f64).sqrt() as usize
    }
}

/// Student-t dependence with Gaussian marginals `N(mu_c, sigma_c²)`.
pub fn sample_student_copula(p: &StudentCopulaParams, mu_c: &[f64], sigma_c: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    let l = cholesky(&p.rho, p.dim())?;
    sample_student_with_factor(&l, p.nu, mu_c, sigma_c, rng)
}

/// As [`sample_student_copula`] with a precomputed Cholesky factor of ρ.
pub fn sample_student_with_factor(l: &[f64], nu: f64, mu_c: &[f64], sigma_c: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if !(nu > 2.0) || !nu.is_finite() {
        return Err(Error::Domain { op: "student copula", detail: format!("nu = {nu} must be finite and > 2") });
    }
    let d = mu_c.len();
    if sigma_c.len() != d || l.len() != d * d {
        return shape_err("sample_student_copula", "dimension mismatch");
    }
    let eps = standard_normal_vec(rng, d);
    let chi2: f64 = ChiSquared::new(nu).expect("nu > 0").sample(rng);
    let scale = (nu / chi2).sqrt();
    let t = linalg::lower_matvec(l, d, &eps);
    Ok((0..d).map(|i| mu_c[i] + sigma_c[i] * student_t_to_normal(t[i] * scale, nu)).collect())
}

/// Mixture of Gaussian copulas with Gaussian marginals per component.
#[derive(Clone, Debug)]
pub struct GmmCopulaParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-component marginal standard deviations (positive).
    pub scales: Vec<Vec<f64>>,
    /// Per-component unit-diagonal correlations, row-major `d x d`.
    pub correlations: Vec<Vec<f64>>,
}

impl GmmCopulaParams {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, scales: Vec<Vec<f64>>, correlations: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || scales.len() != k || correlations.len() != k {
            return shape_err("GmmCopulaParams", "component counts differ");
        }
        if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid("mixture weights must be nonnegative and sum to 1".into()));
        }
        let d = means[0].len();
        for i in 0..k {
            if means[i].len() != d || scales[i].len() != d || correlations[i].len() != d * d {
                return shape_err("GmmCopulaParams", format!("component {i} dimension"));
            }
            if scales[i].iter().any(|&s| s <= 0.0) {
                return Err(Error::Invalid("component scales must be positive".into()));
            }
        }
        Ok(Self { weights, means, scales, correlations })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

/// Index drawn from a discrete distribution given by `weights` (sum 1).
pub fn pick_component(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return i;
        }
    }
    // rounding: last component with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws a component `i` with probability `wᵢ`, then `z = μᵢ + σᵢ ⊙ (Lᵢ ε)`.
pub fn sample_gmm_copula(p: &GmmCopulaParams, rng: &mut Rng) -> Result<Vec<f64>> {
    let i = pick_component(&p.weights, rng);
    let d = p.dim();
    let l = cholesky(&p.correlations[i], d)?;
    let eps = standard_normal_vec(rng, d);
    sample_gaussian_copula_scaled(&p.means[i], &p.scales[i], &l, &eps)
}

/// Shuffles every column independently across the batch (rows).
pub fn permute_dims(latents: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if latents.ndim() != 2 {
        return shape_err("permute_dims", format!("expected N x d, got {:?}", latents.shape()));
    }
    let (n, d) = (latents.rows(), latents.cols());
    if n < 2 {
        return Err(Error::Invalid(format!("permute_dims needs at least 2 rows, got {n}")));
    }
    let mut out = latents.clone();
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..d {
        order.shuffle(rng);
        let data = out.data_mut();
        for (i, &src) in order.iter().enumerate() {
            data[i * d + j] = latents.data()[src * d + j];
        }
    }
    Ok(out)
}

/// Gaussian copula density `|R|^{-1/2} exp(-½ qᵀ(R⁻¹ − I)q)`, `q = Φ⁻¹(u)`.
pub fn gaussian_copula_density(u: &[f64], sigma: &[f64]) -> Result<f64> {
    let d = u.len();
    if sigma.len() != d * d {
        return shape_err("gaussian_copula_density", "sigma must be d x d");
    }
    if let Some(bad) = u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Domain { op: "gaussian_copula_density", detail: format!("u = {bad} outside (0,1)") });
    }
    let q: Vec<f64> = u.iter().map(|&x| normal_quantile(x)).collect();
    let l = cholesky(sigma, d)?;
    let y = linalg::solve_lower(&l, d, &q);
    let quad_inv: f64 = y.iter().map(|v| v * v).sum();
    let quad: f64 = q.iter().map(|v| v * v).sum();
    let log_det = linalg::log_det_from_cholesky(&l, d);
    Ok((-0.5 * log_det - 0.5 * (quad_inv - quad)).exp())
}

