//! Discrete Fredholm equations and the Tikhonov functional whose stationarity
//! condition is a second-kind equation.
//!
//! With `M = diag(μ)`, `Λ = diag(α)⁻¹` and `B = ΛKM` the functional is
//!
//! ```text
//! L(v) = ½ ‖Bv − z‖²_μ + β ⟨KMv, v⟩_μ
//!      = ½ (Bv − z)ᵀ M (Bv − z) + β vᵀ MKM v        (summed over channels)
//! ∇L   = MKΛM (Bv − z) + 2β MKM v
//! ```
//!
//! so `∇L = 0` iff `ΛM[(Bv − z) + 2βΛ⁻¹v] ∈ null(K)`. On `range(K)` this is
//! the second-kind equation `(diag(β') + B) v = z` with the variable
//! coefficient `β'_i = 2β α_i`; components in `M⁻¹ null(K)` are left free by
//! the functional and are projected out before comparing solutions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::io::MatrixBundle;
use crate::kernel::{grid_coordinates, DiscreteKernel};
use crate::linalg::{singular_values_desc, sorted_symmetric_eigen};
use crate::rng;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FredholmProblem {
    k: DMatrix<f64>,
    alpha: DVector<f64>,
    mu: DVector<f64>,
    z: DMatrix<f64>,
    beta: f64,
}

impl FredholmProblem {
    pub fn new(k: DMatrix<f64>, alpha: DVector<f64>, mu: DVector<f64>, z: DMatrix<f64>, beta: f64) -> Result<Self> {
        let p = k.nrows();
        if p == 0 || k.ncols() != p {
            return Err(invalid("kernel must be square and non-empty"));
        }
        if alpha.len() != p || mu.len() != p || z.nrows() != p || z.ncols() == 0 {
            return Err(invalid("alpha, mu and z must have one row per grid point"));
        }
        let mut values = k.iter().chain(alpha.iter()).chain(mu.iter()).chain(z.iter());
        if !values.all(|v| v.is_finite()) || !beta.is_finite() {
            return Err(invalid("problem data must be finite"));
        }
        if alpha.iter().any(|&a| a <= 0.0) || mu.iter().any(|&m| m <= 0.0) {
            return Err(invalid("alpha and mu must be positive"));
        }
        if beta < 0.0 {
            return Err(invalid("beta must be nonnegative"));
        }
        if (&k - k.transpose()).abs().max() > SYMMETRY_TOL {
            return Err(invalid("kernel must be symmetric"));
        }
        let (eig, _) = sorted_symmetric_eigen(&k);
        let max = eig[0].abs().max(eig[p - 1].abs());
        if eig[p - 1] < -PSD_TOL * max {
            return Err(invalid(format!("kernel is not positive semidefinite (min eigenvalue {})", eig[p - 1])));
        }
        Ok(Self { k, alpha, mu, z, beta })
    }

    /// Uses the kernel's `α` and measure.
    pub fn from_kernel(kernel: &DiscreteKernel, z: DMatrix<f64>, beta: f64) -> Result<Self> {
        if !kernel.is_symmetric() {
            return Err(Error::UnsupportedVariant("Fredholm problems need a symmetric kernel".into()));
        }
        Self::new(kernel.matrix().clone(), kernel.alpha().clone(), kernel.measure().clone(), z, beta)
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.k.clone(), self.alpha.clone(), self.mu.clone(), self.z.clone(), beta)
    }

    pub fn with_rhs(&self, z: DMatrix<f64>) -> Result<Self> {
        Self::new(self.k.clone(), self.alpha.clone(), self.mu.clone(), z, self.beta)
    }

    /// `B = diag(α)⁻¹ K diag(μ)`.
    pub fn normalized_operator(&self) -> DMatrix<f64> {
        let p = self.len();
        DMatrix::from_fn(p, p, |i, j| self.k[(i, j)] * self.mu[j] / self.alpha[i])
    }

    /// `βI + B`.
    pub fn second_kind_matrix(&self) -> DMatrix<f64> {
        let mut s = self.normalized_operator();
        for i in 0..self.len() {
            s[(i, i)] += self.beta;
        }
        s
    }

    pub fn to_bundle(&self) -> MatrixBundle {
        let mut b = MatrixBundle::default();
        b.insert_matrix("k", &self.k);
        b.insert_vector("alpha", &self.alpha);
        b.insert_vector("mu", &self.mu);
        b.insert_matrix("z", &self.z);
        b.insert_matrix("beta", &DMatrix::from_element(1, 1, self.beta));
        b
    }

    pub fn from_bundle(b: &MatrixBundle) -> Result<Self> {
        Self::new(b.matrix("k")?, b.vector("alpha")?, b.vector("mu")?, b.matrix("z")?, b.matrix("beta")?[(0, 0)])
    }

    fn check_rhs_shape(&self, v: &DMatrix<f64>) -> Result<()> {
        if v.shape() != self.z.shape() {
            return Err(invalid(format!("expected a {:?} field, got {:?}", self.z.shape(), v.shape())));
        }
        Ok(())
    }
}

/// `K diag(μ) v`, the quadrature of `∫ κ(x, x') v(x') dμ(x')`.
pub fn apply_operator(prob: &FredholmProblem, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    prob.check_rhs_shape(v)?;
    let mut mv = v.clone();
    for (i, mut row) in mv.row_iter_mut().enumerate() {
        row *= prob.mu[i];
    }
    Ok(&prob.k * mv)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    /// Largest over smallest retained singular value of `B`.
    pub condition: f64,
    pub retained: usize,
    pub total: usize,
    /// `‖Bv − z‖_F`.
    pub residual: f64,
}

/// Solves `Bv = z` with the pseudo-inverse of `B`, discarding singular values
/// not above the absolute threshold `pinv_tol`.
pub fn solve_first_kind(prob: &FredholmProblem, pinv_tol: f64) -> Result<(DMatrix<f64>, ConditionReport)> {
    if !(pinv_tol > 0.0) {
        return Err(invalid("pinv_tol must be positive"));
    }
    let b = prob.normalized_operator();
    let svd = b.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > pinv_tol).collect();
    if keep.is_empty() {
        return Err(Error::RankZero { tol: pinv_tol });
    }
    let p = prob.len();
    let mut v = DMatrix::zeros(p, prob.z.ncols());
    for &i in &keep {
        let s = svd.singular_values[i];
        let coeff = u.column(i).transpose() * &prob.z / s;
        v += vt.row(i).transpose() * coeff;
    }
    let retained: Vec<f64> = keep.iter().map(|&i| svd.singular_values[i]).collect();
    let max = retained.iter().copied().fold(0.0, f64::max);
    let min = retained.iter().copied().fold(f64::INFINITY, f64::min);
    let residual = (&b * &v - &prob.z).norm();
    Ok((v, ConditionReport { condition: max / min, retained: keep.len(), total: p, residual }))
}

/// Solves `(βI + B) v = z`.
pub fn solve_second_kind(prob: &FredholmProblem) -> Result<DMatrix<f64>> {
    if !(prob.beta > 0.0) {
        return Err(invalid("second-kind solves need beta > 0"));
    }
    solve_dense(prob.second_kind_matrix(), &prob.z)
}

fn solve_dense(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.lu().solve(rhs).ok_or_else(|| Error::Singular("second-kind system".into()))
}

/// `(diag(2βα) + B) v = z`: the stationarity condition of the functional on
/// `range(K)`.
pub fn solve_stationarity(prob: &FredholmProblem) -> Result<DMatrix<f64>> {
    if !(prob.beta > 0.0) {
        return Err(invalid("stationarity solves need beta > 0"));
    }
    let mut m = prob.normalized_operator();
    for i in 0..prob.len() {
        m[(i, i)] += effective_beta(prob.beta, prob.alpha[i]);
    }
    solve_dense(m, &prob.z)
}

/// Coefficient of the second-kind equation satisfied by minimisers of the
/// functional: `β' = 2βα`.
pub fn effective_beta(beta: f64, alpha: f64) -> f64 {
    2.0 * beta * alpha
}

fn mu_inner(mu: &DVector<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.row_iter().zip(b.row_iter()).enumerate().map(|(i, (ra, rb))| mu[i] * ra.dot(&rb)).sum()
}

pub fn tikhonov_functional(prob: &FredholmProblem, v: &DMatrix<f64>) -> Result<f64> {
    prob.check_rhs_shape(v)?;
    let r = prob.normalized_operator() * v - &prob.z;
    let kv = apply_operator(prob, v)?;
    Ok(0.5 * mu_inner(&prob.mu, &r, &r) + prob.beta * mu_inner(&prob.mu, &kv, v))
}

pub fn tikhonov_gradient(prob: &FredholmProblem, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    prob.check_rhs_shape(v)?;
    let b = prob.normalized_operator();
    let mut mr = &b * v - &prob.z;
    for (i, mut row) in mr.row_iter_mut().enumerate() {
        row *= prob.mu[i];
    }
    let mut g = b.transpose() * mr;
    let kv = apply_operator(prob, v)?;
    for (i, mut row) in g.row_iter_mut().enumerate() {
        let add = kv.row(i) * (2.0 * prob.beta * prob.mu[i]);
        row += add;
    }
    Ok(g)
}

/// Max over coordinates of `|g_fd − g| / max(‖g‖_∞, tiny)` with central
/// differences of step `h`.
pub fn gradient_check(prob: &FredholmProblem, v: &DMatrix<f64>, h: f64) -> Result<f64> {
    let g = tikhonov_gradient(prob, v)?;
    let scale = g.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    let mut probe = v.clone();
    for idx in 0..v.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = tikhonov_functional(prob, &probe)?;
        probe[idx] = orig - h;
        let down = tikhonov_functional(prob, &probe)?;
        probe[idx] = orig;
        worst = worst.max(((up - down) / (2.0 * h) - g[idx]).abs() / scale);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleStatus {
    Converged,
    NotConverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub v: DMatrix<f64>,
    pub iterations: usize,
    pub status: OracleStatus,
    pub gradient_norm: f64,
}

/// Minimises the functional by conjugate gradients driven only by its
/// gradient. The functional is quadratic, so Hessian products are gradients of
/// the same functional with `z = 0`. Independent of any direct solve of the
/// stationarity system.
pub fn minimize_functional(prob: &FredholmProblem, max_iters: usize, rel_tol: f64) -> Result<OracleResult> {
    let homogeneous = prob.with_rhs(DMatrix::zeros(prob.z.nrows(), prob.z.ncols()))?;
    let mut v = DMatrix::zeros(prob.z.nrows(), prob.z.ncols());
    let mut g = tikhonov_gradient(prob, &v)?;
    let target = rel_tol * g.norm().max(f64::MIN_POSITIVE);
    let mut dir = -&g;
    let mut iterations = 0;
    while iterations < max_iters && g.norm() > target {
        let hd = tikhonov_gradient(&homogeneous, &dir)?;
        let curv = dir.dot(&hd);
        if !(curv > 0.0) {
            break;
        }
        let gg = g.dot(&g);
        v += (gg / curv) * &dir;
        iterations += 1;
        // Recompute the true gradient periodically to shed accumulated error.
        let g_new = tikhonov_gradient(prob, &v)?;
        let restart = iterations % v.len().max(1) == 0;
        let beta = if restart { 0.0 } else { g_new.dot(&g_new) / gg };
        dir = -&g_new + beta * dir;
        g = g_new;
    }
    let gradient_norm = g.norm();
    let status = if gradient_norm <= target { OracleStatus::Converged } else { OracleStatus::NotConverged };
    Ok(OracleResult { v, iterations, status, gradient_norm })
}

/// Orthogonal projector onto `range(MK)`, the complement of the directions
/// `M⁻¹ null(K)` along which the functional is constant.
pub fn identifiable_projector(prob: &FredholmProblem, rel_tol: f64) -> DMatrix<f64> {
    let p = prob.len();
    let mk = DMatrix::from_fn(p, p, |i, j| prob.mu[i] * prob.k[(i, j)]);
    let svd = mk.svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let mut proj = DMatrix::zeros(p, p);
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > rel_tol * smax {
            let c = u.column(i);
            proj += c * c.transpose();
        }
    }
    proj
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EulerLagrangeReport {
    /// Finite-difference gradient check at a seeded point.
    pub gradient_check: f64,
    pub oracle_status: OracleStatus,
    pub oracle_iterations: usize,
    /// `‖P(v_oracle − v_solve)‖ / ‖P v_solve‖`.
    pub mismatch: f64,
    /// `‖∇L(v_solve)‖` relative to `‖∇L(0)‖`.
    pub stationarity_residual: f64,
    pub projected_rank: usize,
}

pub fn verify_euler_lagrange(prob: &FredholmProblem, seed: u64) -> Result<EulerLagrangeReport> {
    if !(prob.beta > 0.0) {
        return Err(invalid("Euler-Lagrange verification needs beta > 0"));
    }
    let probe = rng::gaussian_matrix(&mut rng::seeded(seed), prob.z.nrows(), prob.z.ncols(), 1.0);
    let gradient_check = gradient_check(prob, &probe, 1e-5)?;
    let oracle = minimize_functional(prob, 50 * prob.z.len(), 1e-13)?;
    let v_solve = solve_stationarity(prob)?;
    let proj = identifiable_projector(prob, 1e-10);
    let diff = &proj * (&oracle.v - &v_solve);
    let base = (&proj * &v_solve).norm();
    let mismatch = if base > 0.0 { diff.norm() / base } else { diff.norm() };
    let g0 = tikhonov_gradient(prob, &DMatrix::zeros(prob.z.nrows(), prob.z.ncols()))?.norm();
    let gs = tikhonov_gradient(prob, &v_solve)?.norm();
    Ok(EulerLagrangeReport {
        gradient_check,
        oracle_status: oracle.status,
        oracle_iterations: oracle.iterations,
        mismatch,
        stationarity_residual: if g0 > 0.0 { gs / g0 } else { gs },
        projected_rank: proj.trace().round() as usize,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub condition: f64,
    /// `(β + λ_max)/β` with `λ_max` the largest eigenvalue of `B`.
    pub bound: f64,
    pub lambda_max: f64,
}

/// 2-norm condition number of `βI + B` against the spectral bound.
pub fn condition_check(prob: &FredholmProblem) -> Result<ConditionCheck> {
    if !(prob.beta > 0.0) {
        return Err(invalid("condition check needs beta > 0"));
    }
    // B is similar to the symmetric M^{1/2} K M^{1/2} scaled by Λ, so its
    // eigenvalues are real; they are those of Λ^{1/2} M^{1/2} K M^{1/2} Λ^{1/2}.
    let p = prob.len();
    let s = DMatrix::from_fn(p, p, |i, j| {
        (prob.mu[i] / prob.alpha[i]).sqrt() * prob.k[(i, j)] * (prob.mu[j] / prob.alpha[j]).sqrt()
    });
    let (eig, _) = sorted_symmetric_eigen(&((&s + s.transpose()) * 0.5));
    let lambda_max = eig[0];
    let sv = singular_values_desc(&prob.second_kind_matrix());
    Ok(ConditionCheck { condition: sv[0] / sv[sv.len() - 1], bound: (prob.beta + lambda_max) / prob.beta, lambda_max })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseAmplification {
    pub noise_level: f64,
    /// Relative solution change over relative data change.
    pub first_kind: f64,
    pub second_kind: f64,
    pub ratio: f64,
    pub first_kind_condition: f64,
}

/// Perturbs `z` by seeded Gaussian noise of max-abs size `noise_level` and
/// compares how much each solution moves.
pub fn noise_amplification(
    prob: &FredholmProblem,
    noise_level: f64,
    pinv_tol: f64,
    seed: u64,
) -> Result<NoiseAmplification> {
    let noise = rng::gaussian_matrix(&mut rng::seeded(seed), prob.z.nrows(), prob.z.ncols(), 1.0);
    let noise = &noise * (noise_level / noise.amax());
    let perturbed = prob.with_rhs(&prob.z + &noise)?;
    let data_rel = noise.norm() / prob.z.norm();
    let (v1, report) = solve_first_kind(prob, pinv_tol)?;
    let (v1n, _) = solve_first_kind(&perturbed, pinv_tol)?;
    let v2 = solve_second_kind(prob)?;
    let v2n = solve_second_kind(&perturbed)?;
    let first_kind = (&v1n - &v1).norm() / v1.norm() / data_rel;
    let second_kind = (&v2n - &v2).norm() / v2.norm() / data_rel;
    Ok(NoiseAmplification {
        noise_level,
        first_kind,
        second_kind,
        ratio: first_kind / second_kind,
        first_kind_condition: report.condition,
    })
}

/// RBF kernel `exp(−γ‖x_i − x_j‖²)` on the `n×n` unit-square patch centres,
/// `α` the row sums, uniform `μ`, and a smooth right-hand side with `d`
/// channels.
pub fn rbf_test_problem(n: usize, gamma: f64, d: usize, beta: f64) -> Result<FredholmProblem> {
    if n == 0 || d == 0 {
        return Err(invalid("test problem needs n >= 1 and d >= 1"));
    }
    let x = grid_coordinates(n);
    let p = n * n;
    let k = DMatrix::from_fn(p, p, |i, j| (-gamma * (x.row(i) - x.row(j)).norm_squared()).exp());
    let k = (&k + k.transpose()) * 0.5;
    let alpha = DVector::from_iterator(p, k.row_iter().map(|r| r.sum()));
    let mu = DVector::from_element(p, 1.0 / p as f64);
    let z = DMatrix::from_fn(p, d, |i, c| {
        let phase = c as f64;
        (std::f64::consts::PI * (x[(i, 0)] + 0.5 * x[(i, 1)]) + phase).sin() + 0.25 * x[(i, 1)]
    });
    FredholmProblem::new(k, alpha, mu, z, beta)
}

/// RBF kernel of seeded Gaussian tokens (`p×d`) under seeded weights, with a
/// seeded right-hand side of `d` channels. Distinct tokens make the kernel
/// strictly positive definite.
pub fn seeded_problem(p: usize, d: usize, gamma: f64, beta: f64, seed: u64) -> Result<FredholmProblem> {
    use crate::attention::{AttentionWeights, TokenMatrix};
    use crate::kernel::{extract_kernel, KernelVariant};
    let y = rng::gaussian_matrix(&mut rng::seeded(rng::sub_seed(seed, 0)), p, d, 1.0);
    let tokens = TokenMatrix::with_default_positions(y)?;
    let w = AttentionWeights::seeded(d, gamma, rng::sub_seed(seed, 1));
    let kernel = extract_kernel(&tokens, &w, KernelVariant::Rbf)?;
    let z = rng::gaussian_matrix(&mut rng::seeded(rng::sub_seed(seed, 2)), p, d, 1.0);
    FredholmProblem::from_kernel(&kernel, z, beta)
}
