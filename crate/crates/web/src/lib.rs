//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export has a plain Rust twin (`*_impl`) so the logic is testable
//! natively. Grids are returned row-major as flat `Float64Array`s.

use akl_core::attention::{attention, positional_embedding, AttentionVariant, AttentionWeights, TokenMatrix};
use akl_core::interpolation::{mask_scan_instance, restricted_attention, MaskScan};
use akl_core::rng;
use akl_core::stability::{continuum_tokens, propagate, stability_layers};
use akl_core::synth::SmoothField;
use wasm_bindgen::prelude::*;

const PATCH_SIDE: usize = 4;
const MAX_N: usize = 16;

fn check_n(n: usize) -> Result<(), String> {
    if (2..=MAX_N).contains(&n) {
        Ok(())
    } else {
        Err(format!("n must lie in [2, {MAX_N}]"))
    }
}

fn field_tokens(n: usize, seed: u64) -> Result<TokenMatrix, String> {
    let field = SmoothField::seeded(1, rng::sub_seed(seed, 0));
    let content = continuum_tokens(&field, n, PATCH_SIDE).map_err(|e| e.to_string())?;
    let d = PATCH_SIDE * PATCH_SIDE;
    let pos = positional_embedding(n, d).map_err(|e| e.to_string())?;
    TokenMatrix::embed(content.y(), pos).map_err(|e| e.to_string())
}

/// Attention matrix (`n² × n²`) of a smooth field cut into `n × n` patches.
pub fn attention_heatmap_impl(n: usize, gamma: f64, variant: &str, seed: u64) -> Result<Vec<f64>, String> {
    check_n(n)?;
    let variant: AttentionVariant = variant.parse().map_err(|e: akl_core::error::Error| e.to_string())?;
    let tokens = field_tokens(n, seed)?;
    let w = AttentionWeights::seeded(tokens.dim(), gamma, rng::sub_seed(seed, 1));
    let out = attention(&tokens, &w, variant).map_err(|e| e.to_string())?;
    Ok(out.a.transpose().as_slice().to_vec())
}

/// First-layer drift `max_i ‖z_i − y_i‖` for each grid size, same field and
/// layer stack throughout.
pub fn drift_curve_impl(n_values: &[u32], gamma: f64, variant: &str, seed: u64) -> Result<Vec<f64>, String> {
    let variant: AttentionVariant = variant.parse().map_err(|e: akl_core::error::Error| e.to_string())?;
    let d = PATCH_SIDE * PATCH_SIDE;
    let layers = stability_layers(d, 1, gamma, rng::sub_seed(seed, 1)).map_err(|e| e.to_string())?;
    let field = SmoothField::seeded(1, rng::sub_seed(seed, 0));
    n_values
        .iter()
        .map(|&n| {
            let n = n as usize;
            check_n(n)?;
            let tokens = continuum_tokens(&field, n, PATCH_SIDE).map_err(|e| e.to_string())?;
            let trace = propagate(&tokens, &layers, variant, true).map_err(|e| e.to_string())?;
            Ok(trace.drifts[0])
        })
        .collect()
}

/// Interpolation weights of masked token `query` over the visible tokens,
/// laid out on the `n × n` patch grid. Masked cells hold `NaN`; if `query` is
/// visible, every visible cell holds `0`.
pub fn masked_weights_impl(n: usize, mask_ratio: f64, query: usize, seed: u64) -> Result<Vec<f64>, String> {
    check_n(n)?;
    if query >= n * n {
        return Err(format!("query must be below {}", n * n));
    }
    let scan = MaskScan { n_values: vec![n], seeds: 1, mask_ratio, patch_side: PATCH_SIDE, seed };
    let (mt, w) = mask_scan_instance(&scan, n, 0).map_err(|e| e.to_string())?;
    let mut grid = vec![0.0; n * n];
    for &i in mt.masked() {
        grid[i] = f64::NAN;
    }
    if mt.masked().contains(&query) {
        let ra = restricted_attention(&mt, &w).map_err(|e| e.to_string())?;
        for (col, &j) in mt.unmasked().iter().enumerate() {
            grid[j] = ra.weights[(query, col)];
        }
    }
    Ok(grid)
}

#[wasm_bindgen]
pub fn attention_heatmap(n: usize, gamma: f64, variant: &str, seed: u64) -> Result<Vec<f64>, JsValue> {
    attention_heatmap_impl(n, gamma, variant, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn drift_curve(n_values: Vec<u32>, gamma: f64, variant: &str, seed: u64) -> Result<Vec<f64>, JsValue> {
    drift_curve_impl(&n_values, gamma, variant, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn masked_weights(n: usize, mask_ratio: f64, query: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    masked_weights_impl(n, mask_ratio, query, seed).map_err(|e| JsValue::from_str(&e))
}
