//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export wraps a plain function of the same name with an `_impl`
//! suffix so the logic stays testable off the browser.

use c2vae::copula::{sample_gaussian_copula, standard_normal_vec, CorrelationModel};
use c2vae::data::{render, FactorSpec, DEFAULT_RESOLUTION};
use c2vae::metrics::gaussian_dependence;
use c2vae::rng;
use c2vae::Result;
use wasm_bindgen::prelude::*;

fn js(e: c2vae::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn resolution() -> usize {
    DEFAULT_RESOLUTION
}

/// Cardinalities of shape, scale, posX, posY in the default dataset.
#[wasm_bindgen]
pub fn cardinalities() -> Vec<u32> {
    FactorSpec::default().cardinalities().into_iter().map(|c| c as u32).collect()
}

pub fn render_sprite_impl(shape: usize, scale: usize, pos_x: usize, pos_y: usize) -> Result<Vec<u8>> {
    let img = render(&FactorSpec::default(), &[shape, scale, pos_x, pos_y], DEFAULT_RESOLUTION)?;
    Ok(img.iter().map(|&p| if p > 0.5 { 255 } else { 0 }).collect())
}

/// Row-major gray bytes of one sprite.
#[wasm_bindgen]
pub fn render_sprite(shape: usize, scale: usize, pos_x: usize, pos_y: usize) -> std::result::Result<Vec<u8>, JsError> {
    render_sprite_impl(shape, scale, pos_x, pos_y).map_err(js)
}

pub fn copula_sigma_impl(w: Vec<f64>, v: Vec<f64>) -> Result<Vec<f64>> {
    Ok(CorrelationModel::from_wv(w, v)?.sigma)
}

/// Row-major correlation matrix of `diag(w) + v vᵀ` after normalization.
#[wasm_bindgen]
pub fn copula_sigma(w: Vec<f64>, v: Vec<f64>) -> std::result::Result<Vec<f64>, JsError> {
    copula_sigma_impl(w, v).map_err(js)
}

pub fn copula_samples_impl(w: Vec<f64>, v: Vec<f64>, n: usize, seed: u32) -> Result<Vec<f64>> {
    let m = CorrelationModel::from_wv(w, v)?;
    let d = m.dim();
    let mut r = rng::seeded(u64::from(seed));
    let zero = vec![0.0; d];
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        out.extend(sample_gaussian_copula(&zero, &m.l, &standard_normal_vec(&mut r, d))?);
    }
    Ok(out)
}

/// `n` draws `L ε` (flattened `n x d`).
#[wasm_bindgen]
pub fn copula_samples(w: Vec<f64>, v: Vec<f64>, n: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    copula_samples_impl(w, v, n, seed).map_err(js)
}

pub fn gaussian_scores_impl(rho: f64) -> Result<Vec<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(c2vae::Error::Invalid(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    let (tc, wcn, w2) = gaussian_dependence(&[1.0, rho, rho, 1.0], 2)?;
    Ok(vec![tc, wcn, w2])
}

/// `[tc, wcn, w2]` of a bivariate standard Gaussian with correlation `rho`.
#[wasm_bindgen]
pub fn gaussian_scores(rho: f64) -> std::result::Result<Vec<f64>, JsError> {
    gaussian_scores_impl(rho).map_err(js)
}
