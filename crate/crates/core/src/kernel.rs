//! Attention read as a discrete integral kernel.
//!
//! `extract_kernel` returns a [`DiscreteKernel`] `(K, α, μ)` such that the
//! normalised operator is `v ↦ diag(α)⁻¹ K diag(μ) v · p` on the token grid.
//! Three variants are kept strictly apart:
//!
//! * `Asymmetric` – `κ̃_ij = exp(q_i·k_j/√d)`, whose α-normalisation is the
//!   softmax attention matrix.
//! * `Rbf` – `κ_ij = exp(−γ‖δ_i − δ_j‖²)` with `δ = q − k`.
//! * `Bilinear` – `κ_ij = γ⟨δ_i, δ_j⟩`, the literal bilinear form. It is
//!   symmetric and PSD but not positive entrywise, so its row sums may vanish.
//!
//! `Symmetrized` additionally exposes `exp(−γ⟨δ_i, δ_j⟩)`, the kernel whose
//! α-normalisation is the symmetrized attention matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{project, AttentionWeights, TokenMatrix};
use crate::error::{invalid, Error, Result};
use crate::linalg::sorted_symmetric_eigen;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelVariant {
    Asymmetric,
    Rbf,
    Bilinear,
    Symmetrized,
}

impl std::str::FromStr for KernelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymmetric" => Ok(Self::Asymmetric),
            "rbf" => Ok(Self::Rbf),
            "bilinear" => Ok(Self::Bilinear),
            "symmetrized" => Ok(Self::Symmetrized),
            other => Err(invalid(format!("unknown kernel variant `{other}`"))),
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteKernel {
    k: DMatrix<f64>,
    alpha: DVector<f64>,
    measure: DVector<f64>,
    symmetric: bool,
    /// Per-row log offsets: the stored `k` row `i` equals the true kernel row
    /// times `exp(-log_scale_i)`. Zero unless extracted with overflow guard.
    log_scale: DVector<f64>,
}

impl DiscreteKernel {
    /// Kernel with uniform measure `1/p` and `α` set to the row sums.
    pub fn from_matrix(k: DMatrix<f64>, symmetric: bool) -> Result<Self> {
        let alpha = DVector::from_iterator(k.nrows(), k.row_iter().map(|r| r.sum()));
        Self::new(k, alpha, symmetric)
    }

    pub fn new(k: DMatrix<f64>, alpha: DVector<f64>, symmetric: bool) -> Result<Self> {
        let p = k.nrows();
        if p == 0 || k.ncols() != p {
            return Err(invalid("kernel matrix must be square and non-empty"));
        }
        if alpha.len() != p {
            return Err(invalid("alpha must have one entry per token"));
        }
        if k.iter().chain(alpha.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("kernel contains non-finite entries"));
        }
        if alpha.iter().any(|&a| a <= 0.0) {
            return Err(invalid("normalisation weights alpha must be positive"));
        }
        if symmetric && (&k - k.transpose()).abs().max() > SYMMETRY_TOL {
            return Err(invalid("kernel flagged symmetric is not symmetric"));
        }
        Ok(Self {
            k,
            alpha,
            measure: DVector::from_element(p, 1.0 / p as f64),
            symmetric,
            log_scale: DVector::zeros(p),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn measure(&self) -> &DVector<f64> {
        &self.measure
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }

    /// Row log offsets applied during overflow-safe extraction.
    pub fn log_scale(&self) -> &DVector<f64> {
        &self.log_scale
    }

    /// Replaces `α` (e.g. frozen from another input).
    pub fn with_alpha(mut self, alpha: DVector<f64>) -> Result<Self> {
        if alpha.len() != self.len() || alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(invalid("alpha must be a positive vector of length p"));
        }
        self.alpha = alpha;
        Ok(self)
    }

    /// `diag(α)⁻¹ K`, the attention-like row normalisation (`p·μ = 1`).
    pub fn normalized(&self) -> DMatrix<f64> {
        let mut m = self.k.clone();
        for (i, mut row) in m.row_iter_mut().enumerate() {
            row /= self.alpha[i];
        }
        m
    }
}

/// Discretises the attention kernel of `tokens` under `w`.
///
/// The asymmetric kernel is stored row-rescaled by `exp(−max_j s_ij)`, which
/// leaves `diag(α)⁻¹K` unchanged and never overflows; the offsets are
/// available through [`DiscreteKernel::log_scale`].
pub fn extract_kernel(tokens: &TokenMatrix, w: &AttentionWeights, variant: KernelVariant) -> Result<DiscreteKernel> {
    let pr = project(tokens, w)?;
    let p = tokens.len();
    let d = tokens.dim() as f64;
    match variant {
        KernelVariant::Asymmetric => {
            let s = &pr.q * pr.k.transpose() / d.sqrt();
            let mut k = DMatrix::zeros(p, p);
            let mut log_scale = DVector::zeros(p);
            for i in 0..p {
                let m = s.row(i).max();
                log_scale[i] = m;
                for j in 0..p {
                    k[(i, j)] = (s[(i, j)] - m).exp();
                }
            }
            let mut kernel = DiscreteKernel::from_matrix(k, false)?;
            kernel.log_scale = log_scale;
            Ok(kernel)
        }
        KernelVariant::Rbf | KernelVariant::Bilinear | KernelVariant::Symmetrized => {
            let delta = &pr.q - &pr.k;
            symmetric_kernel(&delta, w.gamma, variant)
        }
    }
}

/// Symmetric kernels of the shifted features `δ_i` (one per row).
pub fn symmetric_kernel(delta: &DMatrix<f64>, gamma: f64, variant: KernelVariant) -> Result<DiscreteKernel> {
    if !(gamma >= 0.0) {
        return Err(invalid("gamma must be nonnegative"));
    }
    let p = delta.nrows();
    let gram = delta * delta.transpose();
    let mut k = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = match variant {
                KernelVariant::Rbf => {
                    let sq = (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0);
                    (-gamma * sq).exp()
                }
                KernelVariant::Bilinear => gamma * gram[(i, j)],
                KernelVariant::Symmetrized => (-gamma * gram[(i, j)]).exp(),
                KernelVariant::Asymmetric => {
                    return Err(Error::UnsupportedVariant("asymmetric kernel from features".into()))
                }
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    DiscreteKernel::from_matrix(k, true)
}

/// `max_i |α_i⁻¹ Σ_j κ_ij μ_j p − 1|`.
pub fn check_normalization(k: &DiscreteKernel) -> f64 {
    let p = k.len() as f64;
    k.matrix()
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let integral: f64 = row.iter().zip(k.measure().iter()).map(|(a, m)| a * m).sum();
            (integral * p / k.alpha()[i] - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MercerSpectrum {
    /// Descending eigenvalues `a_i` of `M^{1/2} K M^{1/2}`.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors (columns), same order.
    pub eigenvectors: DMatrix<f64>,
    measure: DVector<f64>,
}

impl MercerSpectrum {
    /// Discrete eigenfunctions `ψ_i = M^{-1/2} e_i`, so that
    /// `K = Σ_i a_i ψ_i ψ_iᵀ`.
    pub fn eigenfunctions(&self) -> DMatrix<f64> {
        let mut psi = self.eigenvectors.clone();
        for (r, mut row) in psi.row_iter_mut().enumerate() {
            row /= self.measure[r].sqrt();
        }
        psi
    }

    /// `Σ_{i<terms} a_i ψ_i ψ_iᵀ`.
    pub fn reconstruct(&self, terms: usize) -> DMatrix<f64> {
        let psi = self.eigenfunctions();
        let p = psi.nrows();
        let mut k = DMatrix::zeros(p, p);
        for i in 0..terms.min(self.eigenvalues.len()) {
            let col = psi.column(i);
            k += self.eigenvalues[i] * col * col.transpose();
        }
        k
    }

    pub fn min_over_max(&self) -> f64 {
        let max = self.eigenvalues[0];
        if max == 0.0 {
            return 0.0;
        }
        self.eigenvalues[self.eigenvalues.len() - 1] / max.abs()
    }
}

pub fn mercer_spectrum(k: &DiscreteKernel) -> Result<MercerSpectrum> {
    if !k.is_symmetric() {
        return Err(Error::UnsupportedVariant(
            "Mercer spectrum needs a symmetric kernel; use singular values for the asymmetric one".into(),
        ));
    }
    let sqrt_mu = k.measure().map(f64::sqrt);
    let p = k.len();
    let weighted = DMatrix::from_fn(p, p, |i, j| sqrt_mu[i] * k.matrix()[(i, j)] * sqrt_mu[j]);
    let sym = (&weighted + weighted.transpose()) * 0.5;
    let (eigenvalues, eigenvectors) = sorted_symmetric_eigen(&sym);
    Ok(MercerSpectrum { eigenvalues, eigenvectors, measure: k.measure().clone() })
}

/// Row-major patch centres of an `n×n` grid in the unit square.
pub fn grid_coordinates(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n * n, 2, |i, c| {
        let idx = if c == 0 { i / n } else { i % n };
        (idx as f64 + 0.5) / n as f64
    })
}

/// Smallest `Ĉ` with `κ_ij ≤ Ĉ exp(−γ‖x_i − x_j‖)` over all pairs.
pub fn check_decay(k: &DiscreteKernel, positions: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    let p = k.len();
    if positions.nrows() != p {
        return Err(invalid("one position per kernel row is required"));
    }
    let mut c: f64 = 0.0;
    for i in 0..p {
        for j in 0..p {
            let dist = (positions.row(i) - positions.row(j)).norm();
            c = c.max(k.matrix()[(i, j)] * (gamma * dist).exp());
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayRow {
    pub n: usize,
    /// Fit against unit-square patch-grid coordinates.
    pub c_grid: f64,
    /// Fit against the feature-space positions `δ_i`.
    pub c_feature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayScan {
    pub rows: Vec<DecayRow>,
    /// `max Ĉ / min Ĉ` over the grid-coordinate fits.
    pub spread: f64,
    pub stable: bool,
}

/// Fits the decay constant of the RBF kernel of tokens built from patch
/// positions only, at each `n` with fixed seeded weights.
pub fn decay_scan(n_values: &[usize], d: usize, gamma: f64, seed: u64) -> Result<DecayScan> {
    if n_values.is_empty() {
        return Err(invalid("decay scan needs at least one grid size"));
    }
    let w = AttentionWeights::seeded(d, gamma, seed).into_stability_form(0.5, 2.0)?;
    let mut rows = Vec::new();
    for &n in n_values {
        let pos = crate::attention::positional_embedding(n, d)?;
        let tokens = TokenMatrix::new(pos.clone(), pos)?;
        let kernel = extract_kernel(&tokens, &w, KernelVariant::Rbf)?;
        let delta = tokens.y() * (&w.wq - &w.wk);
        rows.push(DecayRow {
            n,
            c_grid: check_decay(&kernel, &grid_coordinates(n), gamma)?,
            c_feature: check_decay(&kernel, &delta, gamma)?,
        });
    }
    let max = rows.iter().map(|r| r.c_grid).fold(f64::MIN, f64::max);
    let min = rows.iter().map(|r| r.c_grid).fold(f64::MAX, f64::min);
    let spread = max / min;
    Ok(DecayScan { rows, spread, stable: spread <= 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::scaled_dot_product;
    use crate::rng;

    fn tokens(p: usize, d: usize, seed: u64) -> TokenMatrix {
        TokenMatrix::with_default_positions(rng::gaussian_matrix(&mut rng::seeded(seed), p, d, 1.0)).unwrap()
    }

    #[test]
    fn asymmetric_kernel_reproduces_softmax() {
        let t = tokens(9, 6, 1);
        let w = AttentionWeights::seeded(6, 1.0, 2);
        let k = extract_kernel(&t, &w, KernelVariant::Asymmetric).unwrap();
        let a = scaled_dot_product(&t, &w).unwrap().a;
        assert!((k.normalized() - a).abs().max() <= 1e-10);
        assert!(check_normalization(&k) <= 1e-12);
        assert!(!k.is_symmetric());
        assert!(matches!(mercer_spectrum(&k), Err(Error::UnsupportedVariant(_))));
    }

    #[test]
    fn asymmetric_kernel_survives_huge_logits() {
        let t = TokenMatrix::with_default_positions(DMatrix::from_element(3, 2, 1e3)).unwrap();
        let mut w = AttentionWeights::seeded(2, 1.0, 0);
        w.wq = DMatrix::identity(2, 2);
        w.wk = DMatrix::identity(2, 2);
        let k = extract_kernel(&t, &w, KernelVariant::Asymmetric).unwrap();
        assert!(k.matrix().iter().all(|v| v.is_finite()));
        assert!(check_normalization(&k) <= 1e-12);
    }

    #[test]
    fn rbf_equal_shifts_give_ones() {
        let delta = DMatrix::from_fn(5, 3, |_, c| c as f64);
        let k = symmetric_kernel(&delta, 1.0, KernelVariant::Rbf).unwrap();
        assert_eq!(k.matrix(), &DMatrix::from_element(5, 5, 1.0));
        let spec = mercer_spectrum(&k).unwrap();
        // Uniform measure: M^{1/2} 1 1ᵀ M^{1/2} has eigenvalue p·(1/p) = 1.
        assert!((spec.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(spec.eigenvalues.iter().skip(1).all(|v| v.abs() < 1e-12));

        let random = rng::gaussian_matrix(&mut rng::seeded(3), 5, 3, 1.0);
        let k0 = symmetric_kernel(&random, 0.0, KernelVariant::Rbf).unwrap();
        assert_eq!(k0.matrix(), &DMatrix::from_element(5, 5, 1.0));
    }

    #[test]
    fn ones_kernel_spectrum_pattern() {
        let k = DiscreteKernel::from_matrix(DMatrix::from_element(4, 4, 1.0), true).unwrap();
        let spec = mercer_spectrum(&k).unwrap();
        let expected = [4.0 * 0.25, 0.0, 0.0, 0.0];
        for (a, b) in spec.eigenvalues.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rbf_is_psd_and_reconstructs() {
        let t = tokens(30, 8, 4);
        let w = AttentionWeights::seeded(8, 1.0, 5);
        let k = extract_kernel(&t, &w, KernelVariant::Rbf).unwrap();
        assert!(check_normalization(&k) <= 1e-12);
        let spec = mercer_spectrum(&k).unwrap();
        assert!(spec.eigenvalues.iter().all(|&v| v >= -1e-8));
        assert!(spec.min_over_max() >= -1e-8);
        assert!((spec.reconstruct(30) - k.matrix()).abs().max() <= 1e-10);
    }

    #[test]
    fn frozen_alpha_reports_mismatch() {
        let w = AttentionWeights::seeded(4, 1.0, 6);
        let k1 = extract_kernel(&tokens(8, 4, 7), &w, KernelVariant::Rbf).unwrap();
        let k2 = extract_kernel(&tokens(8, 4, 8), &w, KernelVariant::Rbf).unwrap();
        let frozen = k2.with_alpha(k1.alpha().clone()).unwrap();
        assert!(check_normalization(&frozen) > 0.0);
    }

    #[test]
    fn bilinear_is_symmetric_and_may_be_rejected() {
        let delta = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        // Row sums γ(1 − 1) = 0 are not admissible normalisation weights.
        assert!(symmetric_kernel(&delta, 1.0, KernelVariant::Bilinear).is_err());
        let delta = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let k = symmetric_kernel(&delta, 0.5, KernelVariant::Bilinear).unwrap();
        assert_eq!(k.matrix(), &DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn decay_constant_examples() {
        let k = DiscreteKernel::from_matrix(DMatrix::identity(4, 4), true).unwrap();
        assert_eq!(check_decay(&k, &grid_coordinates(2), 1.0).unwrap(), 1.0);

        let w = AttentionWeights::seeded(8, 1.0, 9).into_stability_form(0.5, 2.0).unwrap();
        let pos = crate::attention::positional_embedding(4, 8).unwrap();
        let t = TokenMatrix::new(pos.clone(), pos).unwrap();
        let k = extract_kernel(&t, &w, KernelVariant::Rbf).unwrap();
        let c = check_decay(&k, &grid_coordinates(4), 1.0).unwrap();
        assert!(c.is_finite() && c >= 1.0);
    }

    #[test]
    fn spectral_decay_strengthens_with_gamma() {
        let t = tokens(16, 4, 10);
        let ratio = |gamma: f64| {
            let w = AttentionWeights::seeded(4, gamma, 11);
            let spec = mercer_spectrum(&extract_kernel(&t, &w, KernelVariant::Rbf).unwrap()).unwrap();
            spec.eigenvalues[8] / spec.eigenvalues[0]
        };
        // Wider kernels (small γ) are smoother and have faster spectral decay.
        assert!(ratio(0.01) < ratio(1.0));
    }

    #[test]
    fn grid_coordinates_are_cell_centres() {
        let x = grid_coordinates(2);
        assert_eq!(x.row(3).iter().copied().collect::<Vec<_>>(), vec![0.75, 0.75]);
    }
}
