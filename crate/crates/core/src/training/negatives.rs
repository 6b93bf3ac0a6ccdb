//! Phase B negatives `z_p` recorded on the tape.

use rand_distr::{ChiSquared, Distribution};

use super::config::NegativeSource;
use crate::copula::{coupled_sample, permute_dims, pick_component, standard_normal_vec};
use crate::error::Result;
use crate::model::ModelBundle;
use crate::rng::Rng;
use crate::special::{student_t_to_normal, student_t_to_normal_deriv};
use crate::tensor::{Graph, Tensor, Var};

/// Inputs shared by every negative source for one batch.
pub struct NegativeInputs<'a> {
    pub x: Var,
    /// Posterior means and standard deviations (constants).
    pub mu: &'a Tensor,
    pub sigma: &'a Tensor,
    /// Reparameterized posterior samples of the same batch.
    pub zq: &'a Tensor,
    /// Covariance group bound on the tape (trainable or frozen).
    pub cov_params: &'a [Var],
    pub student_nu: f64,
}

fn normal_tensor(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], standard_normal_vec(rng, n * d)).expect("nonempty batch")
}

/// Builds `z_p` (`N x d`) for `source`.
pub fn negatives(g: &mut Graph, model: &ModelBundle, source: NegativeSource, inp: &NegativeInputs, rng: &mut Rng) -> Result<Var> {
    let (n, d) = (inp.mu.rows(), inp.mu.cols());
    match source {
        NegativeSource::Permute => g.constant(permute_dims(inp.zq, rng)?),
        NegativeSource::CopulaGaussian => {
            let cv = model.copula_on(g, inp.cov_params, inp.x)?;
            let mu = g.constant(inp.mu.clone())?;
            let sigma = g.constant(inp.sigma.clone())?;
            coupled_sample(g, mu, sigma, cv.w, cv.v, &normal_tensor(rng, n, d))
        }
        NegativeSource::CopulaStudent => {
            let cv = model.copula_on(g, inp.cov_params, inp.x)?;
            let zeros = g.constant(Tensor::zeros(&[n, d]))?;
            let ones = g.constant(Tensor::full(&[n, d], 1.0))?;
            let y = coupled_sample(g, zeros, ones, cv.w, cv.v, &normal_tensor(rng, n, d))?;
            let chi = ChiSquared::new(inp.student_nu).expect("nu validated");
            let scales: Vec<f64> = (0..n).map(|_| (inp.student_nu / chi.sample(rng)).sqrt()).collect();
            let m = student_marginals(g, y, scales, inp.student_nu)?;
            let sigma = g.constant(inp.sigma.clone())?;
            let scaled = g.mul(m, sigma)?;
            let mu = g.constant(inp.mu.clone())?;
            g.add(scaled, mu)
        }
        NegativeSource::CopulaGmm => {
            let gm = model.gmm_on(g, inp.cov_params, inp.x)?;
            let k = gm.delta.len();
            let logits = g.value(gm.logits).clone();
            let picks: Vec<usize> = (0..n)
                .map(|r| {
                    let row = logits.row(r);
                    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|l| (l - top).exp()).collect();
                    let s: f64 = e.iter().sum();
                    let w: Vec<f64> = e.iter().map(|x| x / s).collect();
                    pick_component(&w, rng)
                })
                .collect();
            let eps = normal_tensor(rng, n, d);
            let mu = g.constant(inp.mu.clone())?;
            let sigma = g.constant(inp.sigma.clone())?;
            let mut out: Option<Var> = None;
            for c in 0..k {
                let mask: Vec<f64> = (0..n).flat_map(|r| std::iter::repeat_n(f64::from(u8::from(picks[r] == c)), d)).collect();
                let mu_c = g.add(mu, gm.delta[c])?;
                let s = g.exp(gm.log_scale[c])?;
                let scale_c = g.mul(sigma, s)?;
                let z = coupled_sample(g, mu_c, scale_c, gm.w[c], gm.v[c], &eps)?;
                let m = g.constant(Tensor::new(vec![n, d], mask)?)?;
                let part = g.mul(z, m)?;
                out = Some(match out {
                    Some(acc) => g.add(acc, part)?,
                    None => part,
                });
            }
            Ok(out.expect("at least two components"))
        }
    }
}

/// Elementwise `Φ⁻¹(T_ν(s_r · y))` with a per-row scale `s_r`.
pub fn student_marginals(g: &mut Graph, y: Var, scales: Vec<f64>, nu: f64) -> Result<Var> {
    let yv = g.value(y).clone();
    let (n, d) = (yv.rows(), yv.cols());
    let mut value = vec![0.0; n * d];
    let mut deriv = vec![0.0; n * d];
    for r in 0..n {
        for j in 0..d {
            let t = scales[r] * yv.at(r, j);
            value[r * d + j] = student_t_to_normal(t, nu);
            deriv[r * d + j] = scales[r] * student_t_to_normal_deriv(t, nu);
        }
    }
    let value = Tensor::new(vec![n, d], value)?;
    g.custom(&[y], value, "student_marginals", move |gz| {
        let data = gz.data().iter().zip(&deriv).map(|(a, b)| a * b).collect();
        Ok(vec![Tensor::new(vec![n, d], data)?])
    })
}
