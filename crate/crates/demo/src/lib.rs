//! Browser demo over `addm-core`: schedule curves, forward noising of a
//! phantom at any step, and lesion phantoms with their ground-truth mask.
//!
//! Images come back as RGBA bytes ready for `ImageData`.

use addm::diffusion::forward_marginal;
use addm::io::preview::to_u8;
use addm::phantoms::{self, PhantomSpec};
use addm::rng;
use addm::schedule::make_linear_schedule;
use addm::tensor::Tensor;
use wasm_bindgen::prelude::*;

fn spec(size: usize, seed: u64) -> PhantomSpec {
    PhantomSpec {
        size,
        seed,
        ..PhantomSpec::default()
    }
}

fn rgba(gray: &[f32], overlay: Option<&[f32]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(gray.len() * 4);
    for (i, &v) in gray.iter().enumerate() {
        let g = to_u8(v);
        let px = match overlay {
            Some(m) if m[i] > 0.5 => [255, g / 2, g / 2, 255],
            _ => [g, g, g, 255],
        };
        out.extend_from_slice(&px);
    }
    out
}

/// `[β_1..β_T, ᾱ_1..ᾱ_T, σ_1..σ_T]` concatenated.
pub fn schedule_curves_inner(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, String> {
    let s = make_linear_schedule(steps, beta_start, beta_end).map_err(|e| e.to_string())?;
    let mut out = s.betas().to_vec();
    out.extend_from_slice(s.alpha_bars());
    out.extend((1..=steps).map(|t| s.sigma(t)));
    Ok(out)
}

/// Normal phantom `index` noised to step `t` (0 returns it clean).
pub fn noised_phantom_inner(size: usize, index: u64, steps: usize, t: usize, seed: u64) -> Result<Vec<u8>, String> {
    let x0 = phantoms::generate_normal(&spec(size, seed), index).map_err(|e| e.to_string())?.image;
    if t == 0 {
        return Ok(rgba(x0.data(), None));
    }
    let schedule = make_linear_schedule(steps, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let eps: Tensor<f32> = rng::normal_tensor(&mut rng::seeded(seed ^ index), x0.shape());
    let xt = forward_marginal(&x0, t, &eps, &schedule).map_err(|e| e.to_string())?;
    Ok(rgba(xt.data(), None))
}

/// Anomalous phantom `index`; the lesion mask is tinted red when `show_mask`.
pub fn lesion_phantom_inner(size: usize, index: u64, seed: u64, show_mask: bool) -> Result<Vec<u8>, String> {
    let (image, mask) = phantoms::generate_anomalous(&spec(size, seed), index).map_err(|e| e.to_string())?;
    Ok(rgba(image.data(), show_mask.then_some(mask.data())))
}

#[wasm_bindgen]
pub fn schedule_curves(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, JsError> {
    schedule_curves_inner(steps, beta_start, beta_end).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn noised_phantom(size: usize, index: u32, steps: usize, t: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    noised_phantom_inner(size, index.into(), steps, t, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn lesion_phantom(size: usize, index: u32, seed: u32, show_mask: bool) -> Result<Vec<u8>, JsError> {
    lesion_phantom_inner(size, index.into(), seed.into(), show_mask).map_err(|e| JsError::new(&e))
}
