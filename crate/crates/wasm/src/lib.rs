//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions in [`demo`] hold the logic and are tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: conceptmix::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Number of non-empty caption lines.
#[wasm_bindgen]
pub fn caption_count(captions: &str) -> usize {
    demo::parse_lines(captions).len()
}

/// Mixes one embedding from the captions (one per line) and returns, for each
/// of the `m × d` entries in row-major order, the index of the caption it came from.
#[wasm_bindgen]
pub fn mix_sources(captions: &str, m: usize, d: usize, coarse: usize, fine: usize, seed: u32) -> Result<Vec<u32>, JsError> {
    demo::mix_sources(captions, m, d, coarse, fine, u64::from(seed)).map_err(js)
}

/// Cumulative signal fraction ᾱ_t for t = 1..=steps.
#[wasm_bindgen]
pub fn alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, JsError> {
    demo::alpha_bars(steps, beta_start, beta_end).map_err(js)
}

/// RGBA pixels of a random shape; `t = 0` gives the clean image, otherwise
/// the image after `t` forward diffusion steps.
#[wasm_bindgen]
pub fn shape_rgba(
    class: &str,
    size: usize,
    seed: u32,
    t: usize,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Vec<u8>, JsError> {
    let schedule = demo::Schedule { steps, beta_start, beta_end };
    demo::shape_rgba(class, size, u64::from(seed), t, schedule).map_err(js)
}

/// The caption the dataset generator would attach to the same shape.
#[wasm_bindgen]
pub fn shape_caption(class: &str, size: usize, seed: u32) -> Result<String, JsError> {
    demo::shape_caption(class, size, u64::from(seed)).map_err(js)
}
