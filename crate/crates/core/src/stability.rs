//! Layer-wise drift of attention propagation and its scaling with the patch
//! grid resolution.
//!
//! The scan follows a fixed-continuum protocol: one smooth field on the unit
//! square is sampled at `N = n·N_c` pixels for every `n`, so the tokens at
//! different `n` are discretisations of the same object. Drift is measured in
//! the max-over-tokens row norm.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention, attention_block, positional_embedding, AttentionVariant, AttentionWeights, TokenMatrix,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{patchify, ImageGrid};
use crate::kernel::{grid_coordinates, DiscreteKernel};
use crate::linalg::{log_log_fit, max_row_norm, median, row_softmax};
use crate::parallel;
use crate::rng;
use crate::synth::SmoothField;

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationTrace {
    /// `v^(0) … v^(T)`.
    pub layers: Vec<TokenMatrix>,
    /// `max_i ‖v_i^(t+1) − v_i^(t)‖` for `t < T`.
    pub drifts: Vec<f64>,
    /// Same drift measured as the L2 norm over all tokens.
    pub drifts_l2: Vec<f64>,
    /// Per-layer max row norms.
    pub sup_values: Vec<f64>,
    /// Per-layer feature BV on the patch grid; `None` when `p` is not square.
    pub bv_values: Vec<Option<f64>>,
}

/// Runs `layers.len()` layers. With `pure_kernel` every layer is the bare
/// update `v ↦ A(v) v`, which requires `W^V = I` on every layer; otherwise
/// full attention blocks with skip connection are applied.
pub fn propagate(
    y0: &TokenMatrix,
    layers: &[AttentionWeights],
    variant: AttentionVariant,
    pure_kernel: bool,
) -> Result<PropagationTrace> {
    if pure_kernel {
        if let Some(t) = layers.iter().position(|w| !w.value_is_identity()) {
            return Err(Error::InvalidConfiguration(format!("pure-kernel propagation needs W^V = I (layer {t})")));
        }
    }
    let side = perfect_sqrt(y0.len());
    let mut trace = PropagationTrace {
        layers: vec![y0.clone()],
        drifts: Vec::new(),
        drifts_l2: Vec::new(),
        sup_values: vec![max_row_norm(y0.y())],
        bv_values: vec![side.map(|n| feature_bv_matrix(y0.y(), n))],
    };
    let mut current = y0.clone();
    for w in layers {
        let next = if pure_kernel {
            current.with_values(attention(&current, w, variant)?.z)?
        } else {
            attention_block(&current, w, variant, true)?
        };
        let diff = next.y() - current.y();
        trace.drifts.push(max_row_norm(&diff));
        trace.drifts_l2.push(diff.norm());
        trace.sup_values.push(max_row_norm(next.y()));
        trace.bv_values.push(side.map(|n| feature_bv_matrix(next.y(), n)));
        trace.layers.push(next.clone());
        current = next;
    }
    Ok(trace)
}

fn perfect_sqrt(p: usize) -> Option<usize> {
    let n = (p as f64).sqrt().round() as usize;
    (n * n == p).then_some(n)
}

/// `Σ_i (Σ_{j∈N(i)} ‖v_i − v_j‖²)^{1/2}` over the 4-neighbour `n×n` patch grid.
pub fn feature_bv(v: &TokenMatrix, n: usize) -> Result<f64> {
    if n * n != v.len() {
        return Err(invalid(format!("{} tokens do not form a {n}x{n} patch grid", v.len())));
    }
    Ok(feature_bv_matrix(v.y(), n))
}

pub(crate) fn feature_bv_matrix(v: &DMatrix<f64>, n: usize) -> f64 {
    // Channels share one square root per node (row-L2 aggregation), unlike
    // the per-channel sum used for pixel images.
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let mut acc = 0.0;
            for (r2, c2) in crate::grid::neighbours(n, r, c) {
                acc += (v.row(i) - v.row(r2 * n + c2)).norm_squared();
            }
            total += acc.sqrt();
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityScan {
    pub n_values: Vec<usize>,
    pub seeds: usize,
    pub gamma: f64,
    /// Patch side `N_c`; token width is `d = N_c²`.
    pub patch_side: usize,
    pub layers: usize,
    pub variant: AttentionVariant,
    pub seed: u64,
}

impl Default for StabilityScan {
    fn default() -> Self {
        Self {
            n_values: vec![4, 8, 16, 32],
            seeds: 20,
            gamma: 1.0,
            patch_side: 4,
            layers: 8,
            variant: AttentionVariant::Symmetrized,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub n: usize,
    pub seed: u64,
    pub t: usize,
    pub drift: f64,
    pub sup: f64,
    /// Feature BV rescaled by the grid spacing `1/n`.
    pub bv: f64,
    /// `drift / ((sup + bv)/n)`.
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    /// Median first-layer drift per `n`.
    pub median_drift: Vec<(usize, f64)>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// `ρ(n)`: median over seeds of the first-layer `rho`.
    pub rho_by_n: Vec<(usize, f64)>,
    /// Max and median of `ρ(n)` over the scanned `n`.
    pub max_rho: f64,
    pub median_rho: f64,
    /// Max drift of a constant field pushed through the same layers.
    pub constant_drift: f64,
    /// All drifts vanish, so no slope can be fitted.
    pub degenerate: bool,
    /// Slope of the same scan with a purely positional kernel of width `1/n`.
    pub local_control_slope: Option<f64>,
}

/// Patch tokens of the seeded smooth field at resolution `n`: row `i` is the
/// flattened `N_c×N_c` patch `i` (row-major patches).
pub fn continuum_tokens(field: &SmoothField, n: usize, side: usize) -> Result<TokenMatrix> {
    let size = n * side;
    let img = ImageGrid::from_fn(size, 1, |r, c, _| {
        field.eval(0, (r as f64 + 0.5) / size as f64, (c as f64 + 0.5) / size as f64)
    })?;
    let (_, patches) = patchify(&img, n)?;
    let d = side * side;
    let y = DMatrix::from_fn(n * n, d, |i, k| patches[i].data[k]);
    let positions = if d >= 4 && d.is_multiple_of(2) {
        positional_embedding(n, d)?
    } else {
        crate::attention::sequence_positions(n * n, d)
    };
    TokenMatrix::new(y, positions)
}

/// Layers in the stability form: `W^V = I`, `‖W^Q − W^K‖₂ ∈ [0.5, 2]`.
pub fn stability_layers(d: usize, count: usize, gamma: f64, seed: u64) -> Result<Vec<AttentionWeights>> {
    (0..count)
        .map(|t| AttentionWeights::seeded(d, gamma, rng::sub_seed(seed, t as u64)).into_stability_form(0.5, 2.0))
        .collect()
}

pub fn verify_bound(scan: &StabilityScan) -> Result<StabilityReport> {
    if scan.n_values.len() < 3 {
        return Err(invalid("the stability scan needs at least three grid sizes"));
    }
    let mut sorted = scan.n_values.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != scan.n_values.len() || sorted[0] == 0 {
        return Err(invalid("grid sizes must be distinct and positive"));
    }
    if scan.seeds == 0 || scan.patch_side == 0 {
        return Err(invalid("seeds and patch_side must be positive"));
    }
    let d = scan.patch_side * scan.patch_side;

    let jobs: Vec<(usize, u64)> =
        (0..scan.seeds as u64).flat_map(|s| scan.n_values.iter().map(move |&n| (n, s))).collect();
    let results = parallel::map(jobs, |(n, s)| -> Result<(usize, u64, PropagationTrace, f64)> {
        let seed = rng::sub_seed(scan.seed, s);
        let field = SmoothField::seeded(1, rng::sub_seed(seed, 0));
        let layers = stability_layers(d, scan.layers, scan.gamma, rng::sub_seed(seed, 1))?;
        let tokens = continuum_tokens(&field, n, scan.patch_side)?;
        let trace = propagate(&tokens, &layers, scan.variant, true)?;
        let constant = tokens.with_values(DMatrix::from_element(n * n, d, 0.5))?;
        let cdrift = propagate(&constant, &layers, scan.variant, true)?.drifts.into_iter().fold(0.0, f64::max);
        Ok((n, seed, trace, cdrift))
    });

    let mut rows = Vec::new();
    let mut first_drifts: Vec<(usize, f64)> = Vec::new();
    let mut constant_drift: f64 = 0.0;
    for res in results {
        let (n, seed, trace, cdrift) = res?;
        constant_drift = constant_drift.max(cdrift);
        for (t, &drift) in trace.drifts.iter().enumerate() {
            let sup = trace.sup_values[t];
            let bv = trace.bv_values[t].unwrap_or(f64::NAN) / n as f64;
            let scale = (sup + bv) / n as f64;
            rows.push(StabilityRow { n, seed, t, drift, sup, bv, rho: if scale > 0.0 { drift / scale } else { 0.0 } });
        }
        if let Some(&d0) = trace.drifts.first() {
            first_drifts.push((n, d0));
        }
    }

    let median_drift: Vec<(usize, f64)> = scan
        .n_values
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = first_drifts.iter().filter(|(m, _)| *m == n).map(|(_, d)| *d).collect();
            (n, median(&vals).unwrap_or(0.0))
        })
        .collect();
    let degenerate = rows.iter().all(|r| r.drift == 0.0);
    let fit = if degenerate {
        None
    } else {
        let xs: Vec<f64> = median_drift.iter().map(|(n, _)| *n as f64).collect();
        let ys: Vec<f64> = median_drift.iter().map(|(_, d)| *d).collect();
        log_log_fit(&xs, &ys)
    };
    let rho_by_n: Vec<(usize, f64)> = scan
        .n_values
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.n == n && r.t == 0).map(|r| r.rho).collect();
            (n, median(&vals).unwrap_or(0.0))
        })
        .collect();
    let rhos: Vec<f64> = rho_by_n.iter().map(|r| r.1).collect();
    Ok(StabilityReport {
        rho_by_n,
        median_drift,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
        max_rho: rhos.iter().copied().fold(0.0, f64::max),
        median_rho: median(&rhos).unwrap_or(0.0),
        constant_drift,
        degenerate,
        local_control_slope: local_control_slope(scan)?,
        rows,
    })
}

/// Drift slope for `A_ij ∝ exp(−γ n² ‖x_i − x_j‖²)` on unit-square patch
/// centres: a kernel whose width shrinks with the patch spacing. Used as a
/// reference for how a patch-local kernel scales on the same data.
fn local_control_slope(scan: &StabilityScan) -> Result<Option<f64>> {
    let field = SmoothField::seeded(1, rng::sub_seed(rng::sub_seed(scan.seed, 0), 0));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n in &scan.n_values {
        let tokens = continuum_tokens(&field, n, scan.patch_side)?;
        let x = grid_coordinates(n);
        let p = n * n;
        let g = scan.gamma * (n * n) as f64;
        let logits = DMatrix::from_fn(p, p, |i, j| -g * (x.row(i) - x.row(j)).norm_squared());
        let a = row_softmax(&logits);
        xs.push(n as f64);
        ys.push(max_row_norm(&(&a * tokens.y() - tokens.y())));
    }
    Ok(log_log_fit(&xs, &ys).map(|f| f.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulusSplit {
    /// Per-token drift contributions from pairs closer than `δ/n`.
    pub near: DMatrix<f64>,
    pub far: DMatrix<f64>,
    pub total: DMatrix<f64>,
    pub near_term: f64,
    pub far_term: f64,
    pub total_drift: f64,
}

/// Splits the drift `Σ_j Â_ij (v_j − v_i)` by unit-square grid distance.
pub fn modulus_decomposition(v: &TokenMatrix, k: &DiscreteKernel, n: usize, delta: f64) -> Result<ModulusSplit> {
    if !k.is_symmetric() {
        return Err(Error::UnsupportedVariant("modulus split needs a symmetric kernel".into()));
    }
    let p = v.len();
    if n * n != p || k.len() != p {
        return Err(invalid("tokens and kernel must live on the same n x n patch grid"));
    }
    let a = k.normalized();
    let x = grid_coordinates(n);
    let radius = delta / n as f64;
    let y = v.y();
    let d = v.dim();
    let mut near = DMatrix::zeros(p, d);
    let mut far = DMatrix::zeros(p, d);
    for i in 0..p {
        for j in 0..p {
            let contrib = a[(i, j)] * (y.row(j) - y.row(i));
            if (x.row(i) - x.row(j)).norm() < radius {
                let mut row = near.row_mut(i);
                row += &contrib;
            } else {
                let mut row = far.row_mut(i);
                row += &contrib;
            }
        }
    }
    let total = &near + &far;
    Ok(ModulusSplit {
        near_term: max_row_norm(&near),
        far_term: max_row_norm(&far),
        total_drift: max_row_norm(&total),
        near,
        far,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{extract_kernel, KernelVariant};

    fn random_tokens(n: usize, d: usize, seed: u64) -> TokenMatrix {
        TokenMatrix::with_default_positions(rng::gaussian_matrix(&mut rng::seeded(seed), n * n, d, 1.0)).unwrap()
    }

    #[test]
    fn constant_field_has_zero_drift() {
        let layers = stability_layers(4, 5, 1.0, 1).unwrap();
        let t = TokenMatrix::with_default_positions(DMatrix::from_element(9, 4, 0.3)).unwrap();
        for variant in [AttentionVariant::Symmetrized, AttentionVariant::Rbf, AttentionVariant::Softmax] {
            let trace = propagate(&t, &layers, variant, true).unwrap();
            assert!(trace.drifts.iter().all(|&d| d <= 1e-12));
        }
    }

    #[test]
    fn empty_stack_keeps_only_input() {
        let t = random_tokens(3, 4, 2);
        let trace = propagate(&t, &[], AttentionVariant::Symmetrized, true).unwrap();
        assert_eq!(trace.layers.len(), 1);
        assert!(trace.drifts.is_empty());
    }

    #[test]
    fn pure_kernel_requires_identity_values() {
        let t = random_tokens(2, 4, 3);
        let w = AttentionWeights::seeded(4, 1.0, 4);
        assert!(matches!(
            propagate(&t, std::slice::from_ref(&w), AttentionVariant::Symmetrized, true),
            Err(Error::InvalidConfiguration(_))
        ));
        assert!(propagate(&t, &[w], AttentionVariant::Symmetrized, false).is_ok());
    }

    #[test]
    fn random_run_is_finite() {
        let t = random_tokens(4, 8, 5);
        let layers = stability_layers(8, 8, 1.0, 6).unwrap();
        let trace = propagate(&t, &layers, AttentionVariant::Symmetrized, true).unwrap();
        assert_eq!(trace.drifts.len(), 8);
        assert!(trace.drifts.iter().all(|d| d.is_finite() && *d >= 0.0));
        assert!(trace.bv_values.iter().all(|b| b.is_some()));
    }

    #[test]
    fn rbf_drift_ignores_constant_shift() {
        let t = random_tokens(3, 4, 7);
        let layers = stability_layers(4, 3, 1.0, 8).unwrap();
        let shifted = t.with_values(t.y().map(|v| v + 2.5)).unwrap();
        let a = propagate(&t, &layers, AttentionVariant::Rbf, true).unwrap();
        let b = propagate(&shifted, &layers, AttentionVariant::Rbf, true).unwrap();
        for (x, y) in a.drifts.iter().zip(&b.drifts) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn feature_bv_examples() {
        let constant = TokenMatrix::with_default_positions(DMatrix::from_element(4, 3, 1.0)).unwrap();
        assert_eq!(feature_bv(&constant, 2).unwrap(), 0.0);

        // One-hot token 0 on the 2x2 grid: node 0 sees two unit differences,
        // nodes 1 and 2 one each, node 3 none.
        let mut y = DMatrix::zeros(4, 2);
        y[(0, 1)] = 1.0;
        let t = TokenMatrix::with_default_positions(y).unwrap();
        let expected = 2f64.sqrt() + 1.0 + 1.0;
        assert!((feature_bv(&t, 2).unwrap() - expected).abs() < 1e-15);

        let r = random_tokens(3, 5, 9);
        let scaled = r.with_values(r.y() * -2.5).unwrap();
        assert!((feature_bv(&scaled, 3).unwrap() - 2.5 * feature_bv(&r, 3).unwrap()).abs() < 1e-10);
        assert!(feature_bv(&r, 2).is_err());
    }

    #[test]
    fn scalar_features_match_pixel_bv() {
        let t = random_tokens(4, 1, 10);
        let pixel = crate::grid::grid_bv(4, |r, c| t.y()[(r * 4 + c, 0)], |_, _, _, _| 1.0);
        assert!((feature_bv(&t, 4).unwrap() - pixel).abs() < 1e-12);
    }

    #[test]
    fn modulus_split_limits_and_additivity() {
        let t = random_tokens(4, 3, 11);
        let w = AttentionWeights::seeded(3, 1.0, 12);
        let k = extract_kernel(&t, &w, KernelVariant::Rbf).unwrap();
        let all = modulus_decomposition(&t, &k, 4, 1e9).unwrap();
        assert_eq!(all.far_term, 0.0);
        assert!((all.near_term - all.total_drift).abs() < 1e-15);
        let none = modulus_decomposition(&t, &k, 4, 0.0).unwrap();
        assert_eq!(none.near_term, 0.0);
        let mid = modulus_decomposition(&t, &k, 4, 1.5).unwrap();
        assert!((&mid.near + &mid.far - &mid.total).abs().max() <= 1e-10);
        // The total equals A v − v for the normalised kernel.
        let direct = k.normalized() * t.y() - t.y();
        assert!((&mid.total - direct).abs().max() <= 1e-10);
        let asym = extract_kernel(&t, &w, KernelVariant::Asymmetric).unwrap();
        assert!(modulus_decomposition(&t, &asym, 4, 1.0).is_err());
    }

    #[test]
    fn scan_rejects_short_grids_and_flags_degenerate() {
        let scan = StabilityScan { n_values: vec![4, 8], ..Default::default() };
        assert!(verify_bound(&scan).is_err());
        let scan = StabilityScan { n_values: vec![2, 3, 4], seeds: 2, layers: 0, ..Default::default() };
        let rep = verify_bound(&scan).unwrap();
        assert!(rep.degenerate && rep.slope.is_none());
    }

    #[test]
    fn small_scan_is_deterministic() {
        let scan = StabilityScan { n_values: vec![2, 4, 6], seeds: 2, layers: 2, ..Default::default() };
        let a = verify_bound(&scan).unwrap();
        let b = verify_bound(&scan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3 * 2 * 2);
        assert!(a.constant_drift <= 1e-12);
    }
}
