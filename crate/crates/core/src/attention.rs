//! Token matrices, positional embeddings and the single-head attention block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::MatrixBundle;
use crate::linalg::{row_softmax, spectral_norm};
use crate::rng;

/// `p×d` token embeddings together with their positional embeddings.
///
/// `y` is the attention input; `positions` is kept alongside so that the
/// patch ordering stays recoverable (rows are pairwise distinct).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    y: DMatrix<f64>,
    positions: DMatrix<f64>,
    patch_ids: Vec<usize>,
}

impl TokenMatrix {
    pub fn new(y: DMatrix<f64>, positions: DMatrix<f64>) -> Result<Self> {
        let ids = (0..y.nrows()).collect();
        Self::with_ids(y, positions, ids)
    }

    pub fn with_ids(y: DMatrix<f64>, positions: DMatrix<f64>, patch_ids: Vec<usize>) -> Result<Self> {
        let (p, d) = y.shape();
        if p == 0 || d == 0 {
            return Err(invalid("token matrix must have p >= 1 and d >= 1"));
        }
        if positions.shape() != (p, d) {
            return Err(invalid(format!("positions must be {p}x{d}, got {:?}", positions.shape())));
        }
        if patch_ids.len() != p {
            return Err(invalid("one patch id per token row is required"));
        }
        if y.iter().chain(positions.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("token matrix contains non-finite entries"));
        }
        for i in 0..p {
            for j in i + 1..p {
                if positions.row(i) == positions.row(j) {
                    return Err(invalid(format!("positions of tokens {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { y, positions, patch_ids })
    }

    /// Tokens with 1-D sinusoidal positions (metadata only, not added to `y`).
    pub fn with_default_positions(y: DMatrix<f64>) -> Result<Self> {
        let positions = sequence_positions(y.nrows(), y.ncols());
        Self::new(y, positions)
    }

    /// Tokens whose attention input is `content + positions`.
    pub fn embed(content: &DMatrix<f64>, positions: DMatrix<f64>) -> Result<Self> {
        if content.shape() != positions.shape() {
            return Err(invalid("content and positions must have equal shapes"));
        }
        Self::new(content + &positions, positions)
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn patch_ids(&self) -> &[usize] {
        &self.patch_ids
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    /// Same positions and ids, new values.
    pub fn with_values(&self, y: DMatrix<f64>) -> Result<Self> {
        if y.shape() != self.y.shape() {
            return Err(invalid("replacement values change the token shape"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("token matrix contains non-finite entries"));
        }
        Ok(Self { y, positions: self.positions.clone(), patch_ids: self.patch_ids.clone() })
    }

    /// Reorders rows (values, positions and ids together): row `k` of the
    /// result is row `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let p = self.len();
        let mut seen = vec![false; p];
        if perm.len() != p || perm.iter().any(|&i| i >= p || std::mem::replace(&mut seen[i], true)) {
            return Err(invalid("not a permutation of the token rows"));
        }
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(p, m.ncols(), |r, c| m[(perm[r], c)]);
        Ok(Self {
            y: pick(&self.y),
            positions: pick(&self.positions),
            patch_ids: perm.iter().map(|&i| self.patch_ids[i]).collect(),
        })
    }

    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = MatrixBundle::default();
        b.insert_matrix("y", &self.y);
        b.insert_matrix("positions", &self.positions);
        b.insert_matrix(
            "patch_ids",
            &DMatrix::from_iterator(1, self.patch_ids.len(), self.patch_ids.iter().map(|&i| i as f64)),
        );
        b
    }

    pub fn from_bundle(b: &MatrixBundle) -> Result<Self> {
        let ids = b.matrix("patch_ids")?.iter().map(|&v| v as usize).collect();
        Self::with_ids(b.matrix("y")?, b.matrix("positions")?, ids)
    }
}

/// 1-D sinusoidal positions: channel `c` uses frequency `10000^{-2⌊c/2⌋/d}`,
/// sine on even and cosine on odd channels.
pub fn sequence_positions(p: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, d, |i, c| sinusoid(i as f64, c, d))
}

fn sinusoid(pos: f64, channel: usize, width: usize) -> f64 {
    let k = (channel / 2) as f64;
    let omega = 10000f64.powf(-2.0 * k / width as f64);
    if channel.is_multiple_of(2) {
        (pos * omega).sin()
    } else {
        (pos * omega).cos()
    }
}

/// 2-D sinusoidal embedding on the `n×n` patch grid (row-major patches):
/// the first `d/2` channels encode the patch row, the rest the patch column,
/// each with a geometric frequency ladder.
pub fn positional_embedding(n: usize, d: usize) -> Result<DMatrix<f64>> {
    if d < 4 || !d.is_multiple_of(2) {
        return Err(invalid(format!("positional embedding width must be even and >= 4, got {d}")));
    }
    let half = d / 2;
    Ok(DMatrix::from_fn(n * n, d, |i, c| {
        let (row, col) = (i / n, i % n);
        if c < half {
            sinusoid(row as f64, c, half)
        } else {
            sinusoid(col as f64, c - half, half)
        }
    }))
}

/// Two-layer position-wise network `GELU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Ffn {
    /// Hidden width `4d`, Gaussian weights scaled by `1/√fan_in`, zero biases.
    pub fn seeded(d: usize, seed: u64) -> Self {
        let h = 4 * d;
        let mut rng = rng::seeded(seed);
        Self {
            w1: rng::gaussian_matrix(&mut rng, d, h, 1.0 / (d as f64).sqrt()),
            b1: DVector::zeros(h),
            w2: rng::gaussian_matrix(&mut rng, h, d, 1.0 / (h as f64).sqrt()),
            b2: DVector::zeros(d),
        }
    }

    pub fn zero(d: usize) -> Self {
        let h = 4 * d;
        Self { w1: DMatrix::zeros(d, h), b1: DVector::zeros(h), w2: DMatrix::zeros(h, d), b2: DVector::zeros(d) }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut hidden = x * &self.w1;
        for mut row in hidden.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b1.iter()) {
                *v = gelu(*v + b);
            }
        }
        let mut out = hidden * &self.w2;
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b2.iter()) {
                *v += b;
            }
        }
        out
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Parameters of one single-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    /// Scale of the symmetrized logits.
    pub gamma: f64,
    pub ln_scale: DVector<f64>,
    pub ln_shift: DVector<f64>,
    pub ffn: Ffn,
    /// `‖W^Q − W^K‖₂`, recorded when the stability form was enforced.
    pub qk_gap_norm: Option<f64>,
}

impl AttentionWeights {
    /// Gaussian projections with variance `1/d`, unit LN scale, zero shift and
    /// a seeded FFN.
    pub fn seeded(d: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let s = 1.0 / (d as f64).sqrt();
        Self {
            wq: rng::gaussian_matrix(&mut rng, d, d, s),
            wk: rng::gaussian_matrix(&mut rng, d, d, s),
            wv: rng::gaussian_matrix(&mut rng, d, d, s),
            gamma,
            ln_scale: DVector::from_element(d, 1.0),
            ln_shift: DVector::zeros(d),
            ffn: Ffn::seeded(d, rng::sub_seed(seed, 1)),
            qk_gap_norm: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    /// Sets `W^V = I` and rescales `W^K` so that `‖W^Q − W^K‖₂` lies in
    /// `[lo, hi]`; the resulting norm is recorded.
    pub fn into_stability_form(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid("stability band must satisfy 0 < lo <= hi"));
        }
        let d = self.dim();
        self.wv = DMatrix::identity(d, d);
        let gap = &self.wq - &self.wk;
        let norm = spectral_norm(&gap);
        let target = norm.clamp(lo, hi);
        let gap = if norm > 0.0 {
            gap * (target / norm)
        } else {
            let mut g = DMatrix::zeros(d, d);
            g[(0, 0)] = target;
            g
        };
        self.wk = &self.wq - &gap;
        self.qk_gap_norm = Some(spectral_norm(&gap));
        Ok(self)
    }

    pub fn value_is_identity(&self) -> bool {
        self.wv == DMatrix::identity(self.dim(), self.dim())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = |m: &DMatrix<f64>| m.shape() == (d, d);
        if !square(&self.wq) || !square(&self.wk) || !square(&self.wv) {
            return Err(invalid("projection matrices must all be d x d"));
        }
        if self.ln_scale.len() != d || self.ln_shift.len() != d {
            return Err(invalid("layer-norm parameters must have length d"));
        }
        if self.ffn.w1.nrows() != d || self.ffn.w2.ncols() != d || self.ffn.w1.ncols() != self.ffn.w2.nrows() {
            return Err(invalid("FFN shapes are inconsistent with d"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(invalid("gamma must be positive and finite"));
        }
        let all = [&self.wq, &self.wk, &self.wv, &self.ffn.w1, &self.ffn.w2];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(invalid("weights contain non-finite entries"));
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = MatrixBundle::default();
        b.insert_matrix("wq", &self.wq);
        b.insert_matrix("wk", &self.wk);
        b.insert_matrix("wv", &self.wv);
        b.insert_matrix("gamma", &DMatrix::from_element(1, 1, self.gamma));
        b.insert_vector("ln_scale", &self.ln_scale);
        b.insert_vector("ln_shift", &self.ln_shift);
        b.insert_matrix("ffn_w1", &self.ffn.w1);
        b.insert_vector("ffn_b1", &self.ffn.b1);
        b.insert_matrix("ffn_w2", &self.ffn.w2);
        b.insert_vector("ffn_b2", &self.ffn.b2);
        if let Some(g) = self.qk_gap_norm {
            b.insert_matrix("qk_gap_norm", &DMatrix::from_element(1, 1, g));
        }
        b
    }

    pub fn from_bundle(b: &MatrixBundle) -> Result<Self> {
        let w = Self {
            wq: b.matrix("wq")?,
            wk: b.matrix("wk")?,
            wv: b.matrix("wv")?,
            gamma: b.matrix("gamma")?[(0, 0)],
            ln_scale: b.vector("ln_scale")?,
            ln_shift: b.vector("ln_shift")?,
            ffn: Ffn {
                w1: b.matrix("ffn_w1")?,
                b1: b.vector("ffn_b1")?,
                w2: b.matrix("ffn_w2")?,
                b2: b.vector("ffn_b2")?,
            },
            qk_gap_norm: b.matrix("qk_gap_norm").ok().map(|m| m[(0, 0)]),
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// `softmax(QKᵀ/√d)`.
    Softmax,
    /// `softmax(−γ (q_i − k_i)·(q_j − k_j))`.
    Symmetrized,
    /// `softmax(−γ ‖δ_i − δ_j‖²)` with `δ = q − k`: the translation-invariant
    /// Gaussian form of the symmetrized kernel.
    Rbf,
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "symmetrized" => Ok(Self::Symmetrized),
            "rbf" => Ok(Self::Rbf),
            other => Err(invalid(format!("unknown attention variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub z: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

pub struct Projections {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

pub fn project(tokens: &TokenMatrix, w: &AttentionWeights) -> Result<Projections> {
    if w.wq.nrows() != tokens.dim() {
        return Err(invalid(format!("weights expect d = {}, tokens have d = {}", w.wq.nrows(), tokens.dim())));
    }
    w.validate()?;
    let y = tokens.y();
    Ok(Projections { q: y * &w.wq, k: y * &w.wk, v: y * &w.wv })
}

/// Attention logits for the chosen variant. Symmetric variants are filled
/// from the upper triangle so that `L = Lᵀ` holds exactly.
pub fn logits(tokens: &TokenMatrix, w: &AttentionWeights, variant: AttentionVariant) -> Result<DMatrix<f64>> {
    let pr = project(tokens, w)?;
    Ok(logits_from(&pr, w.gamma, variant))
}

pub(crate) fn logits_from(pr: &Projections, gamma: f64, variant: AttentionVariant) -> DMatrix<f64> {
    let p = pr.q.nrows();
    let d = pr.q.ncols();
    match variant {
        AttentionVariant::Softmax => &pr.q * pr.k.transpose() / (d as f64).sqrt(),
        AttentionVariant::Symmetrized | AttentionVariant::Rbf => {
            let delta = &pr.q - &pr.k;
            let gram = &delta * delta.transpose();
            let mut l = DMatrix::zeros(p, p);
            for i in 0..p {
                for j in i..p {
                    let v = match variant {
                        AttentionVariant::Symmetrized => -gamma * gram[(i, j)],
                        _ => -gamma * (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0),
                    };
                    l[(i, j)] = v;
                    l[(j, i)] = v;
                }
            }
            l
        }
    }
}

pub fn attention(tokens: &TokenMatrix, w: &AttentionWeights, variant: AttentionVariant) -> Result<AttentionOutput> {
    let pr = project(tokens, w)?;
    let logits = logits_from(&pr, w.gamma, variant);
    let a = row_softmax(&logits);
    let z = &a * &pr.v;
    Ok(AttentionOutput { z, a, logits })
}

/// `z = softmax(QKᵀ/√d) V`.
pub fn scaled_dot_product(tokens: &TokenMatrix, w: &AttentionWeights) -> Result<AttentionOutput> {
    attention(tokens, w, AttentionVariant::Softmax)
}

/// `z = softmax(−γ (q_i − k_i)(Q − K)ᵀ) V`.
pub fn symmetrized_attention(tokens: &TokenMatrix, w: &AttentionWeights) -> Result<AttentionOutput> {
    attention(tokens, w, AttentionVariant::Symmetrized)
}

/// Both sides of `q·k = ½ q·q + ½ k·k − ½ (q−k)·(q−k)`.
pub fn dot_product_shift_identity(q: &DVector<f64>, k: &DVector<f64>) -> Result<(f64, f64)> {
    if q.len() != k.len() {
        return Err(invalid("vectors must have equal length"));
    }
    let diff = q - k;
    Ok((q.dot(k), 0.5 * q.dot(q) + 0.5 * k.dot(k) - 0.5 * diff.dot(&diff)))
}

const LN_EPS: f64 = 1e-6;

/// Row-wise layer normalisation followed by the learnable column scaling and
/// shift.
pub fn layer_norm(x: &DMatrix<f64>, scale: &DVector<f64>, shift: &DVector<f64>) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * scale[c] + shift[c];
        }
    }
    out
}

/// `LN(s + FFN(LN(s)))` with `s = y + z` (or `s = z` without the skip).
pub fn attention_block(
    tokens: &TokenMatrix,
    w: &AttentionWeights,
    variant: AttentionVariant,
    skip: bool,
) -> Result<TokenMatrix> {
    let out = attention(tokens, w, variant)?;
    let s = if skip { tokens.y() + &out.z } else { out.z };
    let h = layer_norm(&s, &w.ln_scale, &w.ln_shift);
    let r = &s + w.ffn.forward(&h);
    tokens.with_values(layer_norm(&r, &w.ln_scale, &w.ln_shift))
}

/// Number of singular values above `tol` times the leading one (0 for the zero
/// matrix).
pub fn effective_rank(m: &DMatrix<f64>, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix contains non-finite entries"));
    }
    Ok(crate::lowrank::numerical_rank(m, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_tokens(p: usize, d: usize, seed: u64) -> TokenMatrix {
        let y = rng::gaussian_matrix(&mut rng::seeded(seed), p, d, 1.0);
        TokenMatrix::with_default_positions(y).unwrap()
    }

    /// Independent oracle for `z_i = Σ_j A_ij v_j`.
    fn loop_combination(a: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, d) = v.shape();
        let mut z = DMatrix::zeros(p, d);
        for i in 0..p {
            for j in 0..p {
                for c in 0..d {
                    z[(i, c)] += a[(i, j)] * v[(j, c)];
                }
            }
        }
        z
    }

    #[test]
    fn positional_rows_distinct_small() {
        let pe = positional_embedding(2, 4).unwrap();
        assert_eq!(pe.shape(), (4, 4));
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((pe.row(i) - pe.row(j)).norm() > 0.0);
            }
        }
    }

    #[test]
    fn positional_vit_shape() {
        let pe = positional_embedding(14, 768).unwrap();
        assert_eq!(pe.shape(), (196, 768));
        assert!(TokenMatrix::new(DMatrix::zeros(196, 768), pe).is_ok());
    }

    #[test]
    fn positional_row_and_column_channels() {
        let pe = positional_embedding(2, 8).unwrap();
        // Patch (0,0) is row 0, patch (1,1) is row 3.
        // Row-frequency channel 0 is sin(row), column channel 4 is sin(col).
        assert_eq!(pe[(0, 0)], 0.0);
        assert!((pe[(3, 0)] - 1f64.sin()).abs() < 1e-15);
        assert_eq!(pe[(0, 4)], 0.0);
        assert!((pe[(3, 4)] - 1f64.sin()).abs() < 1e-15);
        assert!(positional_embedding(2, 5).is_err());
        assert!(positional_embedding(2, 2).is_err());
    }

    #[test]
    fn zero_logits_give_uniform_attention() {
        let tokens = random_tokens(5, 6, 1);
        let mut w = AttentionWeights::seeded(6, 1.0, 2);
        w.wq = DMatrix::zeros(6, 6);
        w.wk = DMatrix::zeros(6, 6);
        w.wv = DMatrix::identity(6, 6);
        let out = scaled_dot_product(&tokens, &w).unwrap();
        assert!(out.a.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let mean = tokens.y().row_mean();
        for i in 0..5 {
            assert!((out.z.row(i) - &mean).norm() < 1e-12);
        }
    }

    #[test]
    fn single_token() {
        let tokens = random_tokens(1, 4, 3);
        let w = AttentionWeights::seeded(4, 1.0, 3);
        let out = scaled_dot_product(&tokens, &w).unwrap();
        assert_eq!(out.a, DMatrix::from_element(1, 1, 1.0));
        assert!((&out.z - tokens.y() * &w.wv).norm() < 1e-14);
    }

    #[test]
    fn rows_stochastic_and_match_loop_oracle() {
        let tokens = random_tokens(4, 8, 10);
        let w = AttentionWeights::seeded(8, 1.0, 11);
        let out = scaled_dot_product(&tokens, &w).unwrap();
        for r in out.a.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let v = tokens.y() * &w.wv;
        assert!((&out.z - loop_combination(&out.a, &v)).abs().max() < 1e-12);
    }

    #[test]
    fn symmetrized_special_cases() {
        let tokens = random_tokens(6, 4, 5);
        let mut w = AttentionWeights::seeded(4, 1.0, 6);
        w.wk = w.wq.clone();
        let out = symmetrized_attention(&tokens, &w).unwrap();
        assert!(out.a.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));

        let mut w = AttentionWeights::seeded(4, 1e-300, 6);
        w.gamma = 1e-300;
        let out = symmetrized_attention(&tokens, &w).unwrap();
        assert!(out.a.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));

        let w = AttentionWeights::seeded(4, 1.5, 7);
        let out = symmetrized_attention(&tokens, &w).unwrap();
        assert!((&out.logits - out.logits.transpose()).abs().max() <= 1e-12);
    }

    #[test]
    fn shift_identity_examples() {
        let q = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let (l, r) = dot_product_shift_identity(&q, &q).unwrap();
        assert!((l - 6.0).abs() < 1e-14 && (r - 6.0).abs() < 1e-14);
        let (l, r) =
            dot_product_shift_identity(&DVector::from_vec(vec![1.0, 0.0]), &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!((l, r), (0.0, 0.0));

        let mut rng = rng::seeded(42);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let q = rng::gaussian_matrix(&mut rng, 64, 1, 1.0).column(0).into_owned();
            let k = rng::gaussian_matrix(&mut rng, 64, 1, 1.0).column(0).into_owned();
            let (l, r) = dot_product_shift_identity(&q, &k).unwrap();
            worst = worst.max((l - r).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn block_collapses_to_layer_norm() {
        let tokens = random_tokens(5, 8, 20);
        let mut w = AttentionWeights::seeded(8, 1.0, 21);
        w.wv = DMatrix::zeros(8, 8);
        w.ffn = Ffn::zero(8);
        let out = attention_block(&tokens, &w, AttentionVariant::Softmax, true).unwrap();
        let expected = layer_norm(tokens.y(), &w.ln_scale, &w.ln_shift);
        assert!((out.y() - expected).abs().max() < 1e-12);
        assert_eq!(out.positions(), tokens.positions());
    }

    #[test]
    fn skip_changes_output() {
        let tokens = random_tokens(5, 8, 22);
        let w = AttentionWeights::seeded(8, 1.0, 23);
        let with = attention_block(&tokens, &w, AttentionVariant::Softmax, true).unwrap();
        let without = attention_block(&tokens, &w, AttentionVariant::Softmax, false).unwrap();
        assert_eq!(with.y().shape(), (5, 8));
        assert!((with.y() - without.y()).abs().max() > 1e-3);
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&DMatrix::zeros(3, 4), 1e-8).unwrap(), 0);
        assert_eq!(effective_rank(&DMatrix::identity(7, 7), 1e-8).unwrap(), 7);
        let g = rng::gaussian_matrix(&mut rng::seeded(1), 49, 768, 1.0);
        assert_eq!(effective_rank(&g, 1e-8).unwrap(), 49);
        assert!(effective_rank(&g, 0.0).is_err());
    }

    #[test]
    fn rejects_duplicate_positions_and_nan() {
        let y = DMatrix::zeros(2, 2);
        assert!(TokenMatrix::new(y.clone(), DMatrix::zeros(2, 2)).is_err());
        let mut bad = y.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(TokenMatrix::with_default_positions(bad).is_err());
    }

    #[test]
    fn stability_form_band() {
        let w = AttentionWeights::seeded(6, 1.0, 4).into_stability_form(0.5, 2.0).unwrap();
        assert!(w.value_is_identity());
        let g = w.qk_gap_norm.unwrap();
        assert!((0.5 - 1e-12..=2.0 + 1e-12).contains(&g));
        assert!((spectral_norm(&(&w.wq - &w.wk)) - g).abs() < 1e-12);
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let w = AttentionWeights::seeded(5, 0.7, 9).into_stability_form(0.5, 2.0).unwrap();
        let json = w.to_bundle().to_json().unwrap();
        let back = AttentionWeights::from_bundle(&MatrixBundle::from_json(&json).unwrap()).unwrap();
        assert_eq!(back, w);
        let t = random_tokens(4, 5, 3);
        let back =
            TokenMatrix::from_bundle(&MatrixBundle::from_json(&t.to_bundle().to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(seed in any::<u64>(), c in -50.0f64..50.0) {
            let tokens = random_tokens(6, 4, seed);
            let w = AttentionWeights::seeded(4, 1.0, seed ^ 1);
            let l = logits(&tokens, &w, AttentionVariant::Softmax).unwrap();
            let a = row_softmax(&l);
            let mut shifted = l.clone();
            for mut row in shifted.row_iter_mut() { row.add_scalar_mut(c); }
            prop_assert!((row_softmax(&shifted) - a).abs().max() <= 1e-12);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), rot in 0usize..7) {
            let tokens = random_tokens(7, 4, seed);
            let w = AttentionWeights::seeded(4, 1.0, seed ^ 2);
            let perm: Vec<usize> = (0..7).map(|i| (i + rot) % 7).collect();
            for variant in [AttentionVariant::Softmax, AttentionVariant::Symmetrized, AttentionVariant::Rbf] {
                let base = attention_block(&tokens, &w, variant, true).unwrap();
                let moved = attention_block(&tokens.permuted(&perm).unwrap(), &w, variant, true).unwrap();
                prop_assert!((moved.y() - base.permuted(&perm).unwrap().y()).abs().max() <= 1e-10);
            }
        }
    }
}
