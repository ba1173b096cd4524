//! Shared mask-token mechanics in the decoder.
//!
//! When every masked row carries the same embedding `m`, all masked rows share
//! the key `k_m` and value `v_m = m W^V`. Row-stochasticity then gives, for
//! every row `i`,
//!
//! ```text
//! z_i = v_m + Σ_{j∈N} A_ij (v_j − v_m)
//! ```
//!
//! exactly. Dropping the masked mass `s_i = Σ_{j∈M} A_ij` and renormalising
//! the visible weights yields the restricted attention
//! `ẑ_i = v_m + Σ_{j∈N} Â_ij (v_j − v_m)`, `Â_ij = A_ij / (1 − s_i)`, with
//! `z_i − ẑ_i = −s_i/(1 − s_i) · Σ_{j∈N} A_ij (v_j − v_m)`.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{positional_embedding, scaled_dot_product, AttentionOutput, AttentionWeights, TokenMatrix};
use crate::error::{invalid, Error, Result};
use crate::grid::{ImageGrid, PatchValues, Patchification};
use crate::linalg::{log_log_fit, median};
use crate::parallel;
use crate::rng;
use crate::stability::continuum_tokens;
use crate::synth::SmoothField;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokenSet {
    tokens: TokenMatrix,
    masked: Vec<usize>,
    unmasked: Vec<usize>,
    m: DVector<f64>,
}

impl MaskedTokenSet {
    /// Replaces the rows in `masked` by `m`; positions and ids are kept.
    pub fn new(tokens: &TokenMatrix, masked: Vec<usize>, m: DVector<f64>) -> Result<Self> {
        let p = tokens.len();
        if m.len() != tokens.dim() {
            return Err(invalid("mask embedding width must equal d"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mask embedding must be finite"));
        }
        let mut is_masked = vec![false; p];
        for &i in &masked {
            if i >= p || std::mem::replace(&mut is_masked[i], true) {
                return Err(invalid("masked indices must be distinct and in range"));
            }
        }
        let unmasked: Vec<usize> = (0..p).filter(|&i| !is_masked[i]).collect();
        if unmasked.len() < 2 {
            return Err(Error::InvalidConfiguration(format!(
                "at least two unmasked tokens are required, got {}",
                unmasked.len()
            )));
        }
        let mut y = tokens.y().clone();
        for &i in &masked {
            y.set_row(i, &m.transpose());
        }
        let mut masked = masked;
        masked.sort_unstable();
        Ok(Self { tokens: tokens.with_values(y)?, masked, unmasked, m })
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.tokens
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn unmasked(&self) -> &[usize] {
        &self.unmasked
    }

    pub fn mask_embedding(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Masks `round(mask_ratio·p)` uniformly chosen tokens.
pub fn build_masked_input(
    tokens: &TokenMatrix,
    mask_ratio: f64,
    m: &DVector<f64>,
    seed: u64,
) -> Result<MaskedTokenSet> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(invalid(format!("mask ratio must lie in [0, 1), got {mask_ratio}")));
    }
    let p = tokens.len();
    let count = (mask_ratio * p as f64).round() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng::seeded(seed));
    order.truncate(count);
    MaskedTokenSet::new(tokens, order, m.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Absorption {
    pub z_full: DMatrix<f64>,
    pub z_decomposed: DMatrix<f64>,
    /// `max_i ‖z_full_i − z_decomposed_i‖`.
    pub discrepancy: f64,
    pub v_m: RowDVector<f64>,
}

pub fn mask_absorption_decomposition(mt: &MaskedTokenSet, w: &AttentionWeights) -> Result<Absorption> {
    let out = scaled_dot_product(mt.tokens(), w)?;
    let v = mt.tokens().y() * &w.wv;
    let v_m = mt.m.transpose() * &w.wv;
    let (p, d) = v.shape();
    let mut z = DMatrix::zeros(p, d);
    for i in 0..p {
        let mut row = v_m.clone();
        for &j in &mt.unmasked {
            for c in 0..d {
                row[c] += out.a[(i, j)] * (v[(j, c)] - v_m[c]);
            }
        }
        z.set_row(i, &row);
    }
    let discrepancy = max_row_diff(&out.z, &z);
    Ok(Absorption { z_full: out.z, z_decomposed: z, discrepancy, v_m })
}

fn max_row_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedAttention {
    /// Renormalised visible weights `Â`, one row per token, columns in
    /// `unmasked` order.
    pub weights: DMatrix<f64>,
    pub z_restricted: DMatrix<f64>,
    pub z_full: DMatrix<f64>,
    /// `‖z_i − ẑ_i‖` per row.
    pub row_errors: Vec<f64>,
    /// Masked attention mass `s_i` per row.
    pub masked_mass: Vec<f64>,
    /// `s_i/(1 − s_i) · ‖Σ_{j∈N} A_ij (v_j − v_m)‖` per row; equals the row
    /// error up to rounding.
    pub predicted_errors: Vec<f64>,
}

fn restricted(mt: &MaskedTokenSet, w: &AttentionWeights, out: &AttentionOutput) -> RestrictedAttention {
    if mt.masked.is_empty() {
        // Nothing to drop: the restriction is the full attention itself.
        let p = out.z.nrows();
        return RestrictedAttention {
            weights: out.a.clone(),
            z_restricted: out.z.clone(),
            z_full: out.z.clone(),
            row_errors: vec![0.0; p],
            masked_mass: vec![0.0; p],
            predicted_errors: vec![0.0; p],
        };
    }
    let v = mt.tokens().y() * &w.wv;
    let v_m = mt.m.transpose() * &w.wv;
    let p = v.nrows();
    let nv = mt.unmasked.len();
    let mut weights = DMatrix::zeros(p, nv);
    let mut z_restricted = DMatrix::zeros(p, v.ncols());
    let mut masked_mass = Vec::with_capacity(p);
    let mut predicted = Vec::with_capacity(p);
    for i in 0..p {
        let visible: f64 = mt.unmasked.iter().map(|&j| out.a[(i, j)]).sum();
        let mut shifted = RowDVector::zeros(v.ncols());
        for (col, &j) in mt.unmasked.iter().enumerate() {
            weights[(i, col)] = out.a[(i, j)] / visible;
            shifted += out.a[(i, j)] * (v.row(j) - &v_m);
        }
        let s = 1.0 - visible;
        masked_mass.push(s);
        predicted.push(s / visible * shifted.norm());
        let mut row = v_m.clone();
        for (col, &j) in mt.unmasked.iter().enumerate() {
            row += weights[(i, col)] * (v.row(j) - &v_m);
        }
        z_restricted.set_row(i, &row);
    }
    let row_errors = (&out.z - &z_restricted).row_iter().map(|r| r.norm()).collect();
    RestrictedAttention {
        weights,
        z_restricted,
        z_full: out.z.clone(),
        row_errors,
        masked_mass,
        predicted_errors: predicted,
    }
}

/// Full attention against its restriction to the visible tokens.
pub fn restricted_attention(mt: &MaskedTokenSet, w: &AttentionWeights) -> Result<RestrictedAttention> {
    let out = scaled_dot_product(mt.tokens(), w)?;
    Ok(restricted(mt, w, &out))
}

/// Max row error of the restricted attention.
pub fn restricted_attention_error(mt: &MaskedTokenSet, w: &AttentionWeights) -> Result<f64> {
    Ok(restricted_attention(mt, w)?.row_errors.into_iter().fold(0.0, f64::max))
}

/// Interpolation weights `a_j = Â_ij` over the visible tokens, in
/// `mt.unmasked()` order, for a masked token `i`.
pub fn interpolation_weights(mt: &MaskedTokenSet, w: &AttentionWeights, i: usize) -> Result<DVector<f64>> {
    if !mt.is_masked(i) {
        return Err(invalid(format!("token {i} is not masked")));
    }
    let out = scaled_dot_product(mt.tokens(), w)?;
    let row: Vec<f64> = mt.unmasked.iter().map(|&j| out.a[(i, j)]).collect();
    let total: f64 = row.iter().sum();
    Ok(DVector::from_iterator(row.len(), row.into_iter().map(|a| a / total)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskScan {
    pub n_values: Vec<usize>,
    pub seeds: usize,
    pub mask_ratio: f64,
    pub patch_side: usize,
    pub seed: u64,
}

impl Default for MaskScan {
    fn default() -> Self {
        Self { n_values: vec![4, 8, 16, 32], seeds: 8, mask_ratio: 0.75, patch_side: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskScanRow {
    pub n: usize,
    pub seed: u64,
    pub error: f64,
    /// Largest masked attention mass over rows.
    pub max_mass: f64,
    pub discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskScanReport {
    pub rows: Vec<MaskScanRow>,
    pub median_error: Vec<(usize, f64)>,
    pub slope: Option<f64>,
    pub max_discrepancy: f64,
}

/// Scan point `(n, s)`: tokens `content + positions` from the seeded smooth
/// field, weights and mask embedding that depend on `s` only, and a mask drawn
/// for this `n`.
pub fn mask_scan_instance(scan: &MaskScan, n: usize, s: u64) -> Result<(MaskedTokenSet, AttentionWeights)> {
    let d = scan.patch_side * scan.patch_side;
    let seed = rng::sub_seed(scan.seed, s);
    let field = SmoothField::seeded(1, rng::sub_seed(seed, 0));
    let content = continuum_tokens(&field, n, scan.patch_side)?;
    let tokens = TokenMatrix::embed(content.y(), positional_embedding(n, d)?)?;
    let w = AttentionWeights::seeded(d, 1.0, rng::sub_seed(seed, 1));
    let m = rng::gaussian_matrix(&mut rng::seeded(rng::sub_seed(seed, 2)), d, 1, 0.5).column(0).into_owned();
    let mt = build_masked_input(&tokens, scan.mask_ratio, &m, rng::sub_seed(seed, 3 + n as u64))?;
    Ok((mt, w))
}

pub fn restricted_attention_scan(scan: &MaskScan) -> Result<MaskScanReport> {
    if scan.n_values.is_empty() || scan.seeds == 0 {
        return Err(invalid("mask scan needs grid sizes and at least one seed"));
    }
    if scan.patch_side < 2 {
        return Err(invalid("mask scan needs patch_side >= 2"));
    }
    let jobs: Vec<(usize, u64)> =
        (0..scan.seeds as u64).flat_map(|s| scan.n_values.iter().map(move |&n| (n, s))).collect();
    let results = parallel::map(jobs, |(n, s)| -> Result<MaskScanRow> {
        let (mt, w) = mask_scan_instance(scan, n, s)?;
        let r = restricted_attention(&mt, &w)?;
        let absorbed = mask_absorption_decomposition(&mt, &w)?;
        Ok(MaskScanRow {
            n,
            seed: rng::sub_seed(scan.seed, s),
            error: r.row_errors.iter().copied().fold(0.0, f64::max),
            max_mass: r.masked_mass.iter().copied().fold(0.0, f64::max),
            discrepancy: absorbed.discrepancy,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let median_error: Vec<(usize, f64)> = scan
        .n_values
        .iter()
        .map(|&n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.error).collect();
            (n, median(&v).unwrap_or(0.0))
        })
        .collect();
    let xs: Vec<f64> = median_error.iter().map(|(n, _)| *n as f64).collect();
    let ys: Vec<f64> = median_error.iter().map(|(_, e)| *e).collect();
    Ok(MaskScanReport {
        slope: if scan.n_values.len() >= 2 { log_log_fit(&xs, &ys).map(|f| f.0) } else { None },
        max_discrepancy: rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max),
        median_error,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub masked_index: usize,
    /// `|R v_i − u_i|_BV(Ω_i)`.
    pub error: f64,
    /// `sup_{j∈N} |R v_j − u_j|_BV(Ω_j) + ‖u‖_∞ / n`.
    pub bound_rhs: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub masked_max: f64,
    pub unmasked_sup: f64,
    /// `‖u‖_∞ / n`.
    pub correction: f64,
    /// `masked_max / (unmasked_sup + correction)`; zero when both vanish.
    pub c_hat: f64,
}

/// Compares per-patch BV errors of the decoded masked and visible patches.
/// `reproj` maps decoder outputs to flattened patches (`d_dec × N_c²c`); with
/// `None` the output width must already be `N_c²c`.
pub fn reconstruction_error_bound(
    mt: &MaskedTokenSet,
    w: &AttentionWeights,
    ground_truth: &ImageGrid,
    patches: &Patchification,
    reproj: Option<&DMatrix<f64>>,
) -> Result<BoundReport> {
    let side = patches.side();
    let ch = ground_truth.channels();
    let patch_len = side * side * ch;
    if patches.grid_size() != ground_truth.size() || patches.count() != mt.tokens().len() {
        return Err(invalid("patchification does not match the image or the token count"));
    }
    let z = scaled_dot_product(mt.tokens(), w)?.z;
    let decoded = match reproj {
        Some(r) if r.nrows() == z.ncols() && r.ncols() == patch_len => z * r,
        Some(r) => {
            return Err(invalid(format!(
                "reprojection must be {}x{patch_len}, got {}x{}",
                z.ncols(),
                r.nrows(),
                r.ncols()
            )))
        }
        None if z.ncols() == patch_len => z,
        None => return Err(invalid(format!("decoder width {} is not a patch size {patch_len}", z.ncols()))),
    };
    let error = |i: usize| {
        let truth = patches.restrict(ground_truth, i);
        let mut diff = PatchValues::zeros(side, ch);
        for (k, v) in diff.data.iter_mut().enumerate() {
            *v = decoded[(i, k)] - truth.data[k];
        }
        diff.bv()
    };
    let unmasked_sup = mt.unmasked.iter().map(|&j| error(j)).fold(0.0, f64::max);
    let correction = ground_truth.max_abs() / patches.per_axis() as f64;
    let bound_rhs = unmasked_sup + correction;
    let rows: Vec<BoundRow> = mt
        .masked
        .iter()
        .map(|&i| {
            let e = error(i);
            BoundRow { masked_index: i, error: e, bound_rhs, ratio: if bound_rhs > 0.0 { e / bound_rhs } else { 0.0 } }
        })
        .collect();
    let masked_max = rows.iter().map(|r| r.error).fold(0.0, f64::max);
    Ok(BoundReport {
        c_hat: if bound_rhs > 0.0 { masked_max / bound_rhs } else { 0.0 },
        rows,
        masked_max,
        unmasked_sup,
        correction,
    })
}
