//! Differentiable batched coupled sampling on the tape.

use crate::copula::normalized_correlation;
use crate::error::{shape_err, Result};
use crate::linalg;
use crate::tensor::{Graph, Tensor, Var};

struct SampleCache {
    y: Vec<f64>,
    l: Vec<f64>,
    sigma: Vec<f64>,
    m_diag: Vec<f64>,
}

/// Records `z = mu + scale ⊙ (L eps)` per row, where `L` is the Cholesky
/// factor of the normalized `diag(w) + v vᵀ` of that row. Gradients flow to
/// `mu`, `scale`, `w` and `v`; `eps` is a constant `N x d` tensor.
pub fn coupled_sample(g: &mut Graph, mu: Var, scale: Var, w: Var, v: Var, eps: &Tensor) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    for (name, var) in [("scale", scale), ("w", w), ("v", v)] {
        if g.shape(var) != shape.as_slice() {
            return shape_err("coupled_sample", format!("{name} {:?} vs mu {:?}", g.shape(var), shape));
        }
    }
    if eps.shape() != shape.as_slice() || shape.len() != 2 {
        return shape_err("coupled_sample", format!("eps {:?} vs mu {:?}", eps.shape(), shape));
    }
    let (n, d) = (shape[0], shape[1]);
    let (mu_t, s_t, w_t, v_t) = (g.value(mu), g.value(scale), g.value(w), g.value(v));

    let mut out = vec![0.0; n * d];
    let mut caches = Vec::with_capacity(n);
    for r in 0..n {
        let wr = w_t.row(r);
        let vr = v_t.row(r);
        let sigma = normalized_correlation(wr, vr);
        let l = linalg::cholesky(&sigma, d)?;
        let y = linalg::lower_matvec(&l, d, eps.row(r));
        for j in 0..d {
            out[r * d + j] = mu_t.row(r)[j] + s_t.row(r)[j] * y[j];
        }
        let m_diag = (0..d).map(|i| wr[i] + vr[i] * vr[i]).collect();
        caches.push(SampleCache { y, l, sigma, m_diag });
    }
    let value = Tensor::new(shape.clone(), out)?;
    let eps = eps.clone();
    let s_val = s_t.clone();
    let v_val = v_t.clone();

    g.custom(&[mu, scale, w, v], value, "coupled_sample", move |gz| {
        let mut g_mu = vec![0.0; n * d];
        let mut g_s = vec![0.0; n * d];
        let mut g_w = vec![0.0; n * d];
        let mut g_v = vec![0.0; n * d];
        for (r, c) in caches.iter().enumerate() {
            let gzr = gz.row(r);
            let sr = s_val.row(r);
            let er = eps.row(r);
            let vr = v_val.row(r);
            let gy: Vec<f64> = (0..d).map(|j| gzr[j] * sr[j]).collect();
            for j in 0..d {
                g_mu[r * d + j] = gzr[j];
                g_s[r * d + j] = gzr[j] * c.y[j];
            }
            // dL (lower part) = gy epsᵀ
            let g_sigma = cholesky_backward(&c.l, d, |i, j| gy[i] * er[j]);
            // through the diagonal normalization
            let mut g_m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    g_m[i * d + j] = g_sigma[i * d + j] / (c.m_diag[i] * c.m_diag[j]).sqrt();
                }
            }
            for k in 0..d {
                let s: f64 = (0..d).map(|j| g_sigma[k * d + j] * c.sigma[k * d + j]).sum();
                g_m[k * d + k] -= s / c.m_diag[k];
            }
            // M = diag(w) + v vᵀ
            for i in 0..d {
                g_w[r * d + i] = g_m[i * d + i];
                g_v[r * d + i] = (0..d).map(|j| (g_m[i * d + j] + g_m[j * d + i]) * vr[j]).sum();
            }
        }
        Ok(vec![
            Tensor::new(vec![n, d], g_mu)?,
            Tensor::new(vec![n, d], g_s)?,
            Tensor::new(vec![n, d], g_w)?,
            Tensor::new(vec![n, d], g_v)?,
        ])
    })
}

/// Gradient wrt a symmetric `A = L Lᵀ` given the gradient wrt the lower
/// triangle of `L` (entries `gl(i, j)` for `i >= j`). Returns the symmetric
/// `½(G + Gᵀ)` with `G = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, where `Φ` keeps the lower
/// triangle and halves the diagonal.
fn cholesky_backward(l: &[f64], d: usize, gl: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut lbar = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            lbar[i * d + j] = gl(i, j);
        }
    }
    // P = Lᵀ L̄, then Φ(P)
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            p[i * d + j] = (0..d).map(|k| l[k * d + i] * lbar[k * d + j]).sum();
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            p[i * d + j] = 0.0;
        }
        p[i * d + i] *= 0.5;
    }
    let linv = linalg::invert_lower(l, d);
    // G = L⁻ᵀ Φ(P) L⁻¹
    let mut tmp = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            tmp[i * d + j] = (0..d).map(|k| p[i * d + k] * linv[k * d + j]).sum();
        }
    }
    let mut gm = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            gm[i * d + j] = (0..d).map(|k| linv[k * d + i] * tmp[k * d + j]).sum();
        }
    }
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (gm[i * d + j] + gm[j * d + i]);
        }
    }
    sym
}
