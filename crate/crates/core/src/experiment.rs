//! JSON-configured experiments that write CSV data, `summary.json` and
//! `provenance.txt` into an output directory.
//!
//! Data files and the summary are byte-identical across runs of the same
//! configuration; only the first line of `provenance.txt` (a timestamp)
//! changes.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    dot_product_shift_identity, logits, scaled_dot_product, AttentionVariant, AttentionWeights, TokenMatrix,
};
use crate::error::{Error, Result};
use crate::fredholm::{
    condition_check, noise_amplification, rbf_test_problem, seeded_problem, solve_second_kind, verify_euler_lagrange,
    FredholmProblem, OracleStatus,
};
use crate::geometry::{self_test, Geometry};
use crate::grid::{bv_seminorm, patchify, select_patches, ImageGrid};
use crate::interpolation::{
    mask_scan_instance, reconstruction_error_bound, restricted_attention, restricted_attention_scan, MaskScan,
    MaskedTokenSet,
};
use crate::io::{matrix_to_csv, read_image};
use crate::kernel::{check_normalization, decay_scan, extract_kernel, mercer_spectrum, KernelVariant};
use crate::linalg::{median, row_softmax};
use crate::lowrank::{verify_recovery, RecoveryConfig};
use crate::rng;
use crate::stability::{continuum_tokens, verify_bound, StabilityScan};
use crate::synth::{gen_synthetic, SmoothField, SyntheticKind, SyntheticParams};

pub const EXPERIMENTS: [&str; 10] =
    ["bv", "patchify", "lowrank", "kernel", "stability", "fredholm", "interpolation", "attention", "geometry", "all"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the hashed configuration.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    /// Input image (`.csv`, `.pgm`, `.ppm`), relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Grid sizes `n` for scans; each experiment has its own default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_values: Option<Vec<usize>>,
    #[serde(default = "defaults::seeds")]
    pub seeds: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::patch_side")]
    pub patch_side: usize,
    #[serde(default = "defaults::d")]
    pub d: usize,
    #[serde(default = "defaults::p")]
    pub p: usize,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::iters")]
    pub iters: usize,
    #[serde(default = "defaults::ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "defaults::sides")]
    pub sides: Vec<usize>,
    #[serde(default = "defaults::per_axis")]
    pub per_axis: Vec<usize>,
    #[serde(default = "defaults::noise_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default = "defaults::variant")]
    pub variant: AttentionVariant,
    #[serde(default = "defaults::instances")]
    pub instances: usize,
    /// Side of synthetic images when no `image` is given.
    #[serde(default = "defaults::size")]
    pub size: usize,
    #[serde(default)]
    pub geometry: Geometry,
}

mod defaults {
    use crate::attention::AttentionVariant;

    pub fn seeds() -> usize {
        20
    }
    pub fn layers() -> usize {
        8
    }
    pub fn gamma() -> f64 {
        1.0
    }
    pub fn patch_side() -> usize {
        4
    }
    pub fn d() -> usize {
        8
    }
    pub fn p() -> usize {
        16
    }
    pub fn beta() -> f64 {
        0.1
    }
    pub fn mask_ratio() -> f64 {
        0.75
    }
    pub fn trials() -> usize {
        100
    }
    pub fn iters() -> usize {
        500
    }
    pub fn ranks() -> Vec<usize> {
        vec![1]
    }
    pub fn sides() -> Vec<usize> {
        vec![16]
    }
    pub fn per_axis() -> Vec<usize> {
        vec![4]
    }
    pub fn noise_levels() -> Vec<f64> {
        vec![0.0, 1.0]
    }
    pub fn variant() -> AttentionVariant {
        AttentionVariant::Symmetrized
    }
    pub fn instances() -> usize {
        1000
    }
    pub fn size() -> usize {
        64
    }
}

impl ExperimentConfig {
    /// Defaults for `experiment`.
    pub fn new(experiment: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "experiment": experiment })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfiguration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `image` path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfiguration(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(img), Some(dir)) = (cfg.image.as_mut(), path.parent()) {
            if img.is_relative() {
                *img = dir.join(&*img);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfiguration(msg));
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return bad(format!(
                "unknown experiment `{}` (expected one of {})",
                self.experiment,
                EXPERIMENTS.join(", ")
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be positive".into());
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta must be positive".into());
        }
        if self.seeds == 0 || self.trials == 0 || self.iters == 0 || self.instances == 0 {
            return bad("seeds, trials, iters and instances must be positive".into());
        }
        if self.p < 2 || self.d < 4 || !self.d.is_multiple_of(2) {
            return bad("p must be >= 2 and d even and >= 4".into());
        }
        if self.patch_side < 2 || self.size < 2 {
            return bad("patch_side and size must be >= 2".into());
        }
        if self.noise_levels.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad("noise levels must be finite and nonnegative".into());
        }
        if self.ranks.is_empty() || self.sides.is_empty() || self.per_axis.is_empty() || self.noise_levels.is_empty() {
            return bad("ranks, sides, per_axis and noise_levels must be non-empty".into());
        }
        if let Some(ns) = &self.n_values {
            if ns.is_empty() || ns.contains(&0) {
                return bad("n_values must be non-empty and positive".into());
            }
        }
        Ok(())
    }

    /// Canonical JSON of the configuration (without `output_dir`).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    fn n_values_or(&self, default: &[usize]) -> Vec<usize> {
        self.n_values.clone().unwrap_or_else(|| default.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub experiment: String,
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
    /// Non-gating checks are reported but do not affect the exit status.
    pub gating: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub experiment: String,
    pub seed: u64,
    pub version: String,
    pub config_sha256: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub results: serde_json::Map<String, serde_json::Value>,
    pub files: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    checks: Vec<Check>,
    results: serde_json::Map<String, serde_json::Value>,
    files: Vec<String>,
    current: &'static str,
}

impl Ctx<'_> {
    fn check(&mut self, name: &str, value: f64, threshold: &str, pass: bool) {
        self.push(name, value, threshold, pass, true);
    }

    fn report(&mut self, name: &str, value: f64, threshold: &str, pass: bool) {
        self.push(name, value, threshold, pass, false);
    }

    fn push(&mut self, name: &str, value: f64, threshold: &str, pass: bool, gating: bool) {
        self.checks.push(Check {
            experiment: self.current.to_string(),
            name: name.to_string(),
            value,
            threshold: threshold.to_string(),
            pass,
            gating,
        });
    }

    fn result(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.results.insert(format!("{}.{key}", self.current), v);
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Minimal CSV builder; floats use Rust's shortest round-trip formatting.
struct Csv(String);

impl Csv {
    fn new(header: &[&str]) -> Self {
        Self(format!("{}\n", header.join(",")))
    }

    fn row(&mut self, cells: &[&dyn Display]) {
        let cells: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.0.push_str(&cells.join(","));
        self.0.push('\n');
    }
}

/// Runs the configured experiment, writing all artifacts into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut ctx =
        Ctx { cfg, dir: out_dir, checks: Vec::new(), results: Default::default(), files: Vec::new(), current: "" };
    let selected: Vec<&str> = if cfg.experiment == "all" {
        EXPERIMENTS.iter().copied().filter(|e| *e != "all").collect()
    } else {
        vec![cfg.experiment.as_str()]
    };
    for name in selected {
        ctx.current = EXPERIMENTS.iter().find(|e| **e == name).copied().unwrap_or("");
        match name {
            "bv" => run_bv(&mut ctx)?,
            "patchify" => run_patchify(&mut ctx)?,
            "lowrank" => run_lowrank(&mut ctx)?,
            "kernel" => run_kernel(&mut ctx)?,
            "stability" => run_stability(&mut ctx)?,
            "fredholm" => run_fredholm(&mut ctx)?,
            "interpolation" => run_interpolation(&mut ctx)?,
            "attention" => run_attention(&mut ctx)?,
            "geometry" => run_geometry(&mut ctx)?,
            other => return Err(Error::InvalidConfiguration(format!("unknown experiment `{other}`"))),
        }
    }
    let pass = ctx.checks.iter().filter(|c| c.gating).all(|c| c.pass);
    let mut files = ctx.files;
    files.push("summary.json".into());
    files.push("provenance.txt".into());
    let summary = RunSummary {
        experiment: cfg.experiment.clone(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        pass,
        checks: ctx.checks,
        results: ctx.results,
        files,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    std::fs::write(out_dir.join("provenance.txt"), provenance(cfg))?;
    Ok(summary)
}

fn provenance(cfg: &ExperimentConfig) -> String {
    let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!(
        "# generated at unix time {now}\nversion: {}\nexperiment: {}\nseed: {}\nconfig_sha256: {}\nconfig: {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.experiment,
        cfg.seed,
        cfg.hash(),
        cfg.canonical_json()
    )
}

/// The 2×2 image `[[1, 0], [0, 0]]`, used when no image is configured.
pub fn bundled_fixture() -> ImageGrid {
    ImageGrid::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).expect("fixture is valid")
}

fn load_image(cfg: &ExperimentConfig) -> Result<Option<ImageGrid>> {
    cfg.image.as_deref().map(read_image).transpose()
}

fn run_bv(ctx: &mut Ctx) -> Result<()> {
    let img = load_image(ctx.cfg)?.unwrap_or_else(bundled_fixture);
    let bv = bv_seminorm(&img);
    let mut csv = Csv::new(&["size", "channels", "bv"]);
    csv.row(&[&img.size(), &img.channels(), &bv]);
    ctx.write("bv.csv", &csv.0)?;
    let scaled = bv_seminorm(&img.scaled(-2.0));
    let homog = (scaled - 2.0 * bv).abs();
    ctx.check("bv_finite_nonnegative", bv, ">= 0", bv.is_finite() && bv >= 0.0);
    ctx.check("homogeneity_error", homog, "<= 1e-12 * (1 + bv)", homog <= 1e-12 * (1.0 + bv));
    ctx.result("bv", bv);
    Ok(())
}

fn run_patchify(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let img = match load_image(cfg)? {
        Some(img) => img,
        None => gen_synthetic(
            SyntheticKind::Lowfreq,
            cfg.size,
            SyntheticParams { channels: 3, ..Default::default() },
            cfg.seed,
        )?,
    };
    let n = cfg.per_axis[0];
    let (parts, tiles) = patchify(&img, n)?;
    let back = parts.extension_sum(&tiles)?;
    let intra = parts.intra_patch_bv(&img)?;
    let full = bv_seminorm(&img);
    let mut csv = Csv::new(&["index", "patch_row", "patch_col", "bv"]);
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = parts.coords(i);
        csv.row(&[&i, &r, &c, &t.bv()]);
    }
    ctx.write("patches.csv", &csv.0)?;
    let sel = select_patches(&parts, cfg.seed)?;
    let mut csv = Csv::new(&["patch_row", "patch_col", "index"]);
    for &i in sel.selection().unwrap_or(&[]) {
        let (r, c) = parts.coords(i);
        csv.row(&[&r, &c, &i]);
    }
    ctx.write("selection.csv", &csv.0)?;
    ctx.check("round_trip_exact", (back.pixels() == img.pixels()) as u8 as f64, "== 1", back.pixels() == img.pixels());
    ctx.check("intra_patch_bv_le_full", intra - full, "<= 0", intra <= full);
    ctx.check(
        "selection_is_row_permutation",
        sel.selection_is_row_permutation() as u8 as f64,
        "== 1",
        sel.selection_is_row_permutation(),
    );
    ctx.result("patches", parts.count());
    ctx.result("patch_side", parts.side());
    Ok(())
}

fn run_lowrank(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let spec = RecoveryConfig {
        ranks: cfg.ranks.clone(),
        sides: cfg.sides.clone(),
        per_axis: cfg.per_axis.clone(),
        noise_levels: cfg.noise_levels.clone(),
        trials: cfg.trials,
        iters: cfg.iters,
        seed: cfg.seed,
    };
    let report = verify_recovery(&spec)?;
    let mut csv = Csv::new(&[
        "r",
        "N_c",
        "n",
        "epsilon",
        "bv_error",
        "ratio",
        "als_status",
        "seed",
        "epsilon_spectral",
        "relative_bv_error",
    ]);
    for r in &report.rows {
        csv.row(&[
            &r.r,
            &r.side,
            &r.n,
            &r.epsilon,
            &r.bv_error,
            &r.ratio,
            &r.status,
            &r.seed,
            &r.epsilon_spectral,
            &r.relative_bv_error,
        ]);
    }
    ctx.write("lowrank.csv", &csv.0)?;
    let opt = |v: Option<f64>| v.map_or("NaN".to_string(), |x| x.to_string());
    let mut csv = Csv::new(&[
        "r",
        "N_c",
        "n",
        "epsilon",
        "trials",
        "failed",
        "exact_fraction",
        "median_ratio",
        "p95_ratio",
        "median_ratio_half",
        "rejected",
    ]);
    for c in &report.cells {
        csv.row(&[
            &c.r,
            &c.side,
            &c.n,
            &c.epsilon,
            &c.trials,
            &c.failed,
            &c.exact_fraction,
            &opt(c.median_ratio),
            &opt(c.p95_ratio),
            &opt(c.median_ratio_half),
            &c.rejected,
        ]);
    }
    ctx.write("lowrank_cells.csv", &csv.0)?;
    for c in report.cells.iter().filter(|c| !c.rejected) {
        let tag = format!("r{}_Nc{}_n{}_eps{}", c.r, c.side, c.n, c.epsilon);
        if c.epsilon == 0.0 {
            ctx.check(&format!("exact_recovery_fraction_{tag}"), c.exact_fraction, ">= 0.95", c.exact_fraction >= 0.95);
        } else {
            let drift = match (c.median_ratio, c.median_ratio_half) {
                (Some(a), Some(b)) if b > 0.0 => (a - b).abs() / b,
                _ => f64::NAN,
            };
            ctx.check(&format!("median_ratio_stability_{tag}"), drift, "<= 0.2", drift <= 0.2);
        }
    }
    for c in report.cells.iter().filter(|c| c.rejected) {
        ctx.report(&format!("rejected_r{}_Nc{}", c.r, c.side), c.r as f64, "r < N_c", false);
    }
    ctx.result("cells", &report.cells);
    Ok(())
}

fn run_kernel(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let (mut worst_norm, mut worst_rbf_norm, mut worst_psd, mut worst_recon, mut worst_softmax): (
        f64,
        f64,
        f64,
        f64,
        f64,
    ) = (0.0, 0.0, f64::INFINITY, 0.0, 0.0);
    for s in 0..cfg.seeds as u64 {
        let seed = rng::sub_seed(cfg.seed, s);
        let y = rng::gaussian_matrix(&mut rng::seeded(rng::sub_seed(seed, 0)), cfg.p, cfg.d, 1.0);
        let tokens = TokenMatrix::with_default_positions(y)?;
        let w = AttentionWeights::seeded(cfg.d, cfg.gamma, rng::sub_seed(seed, 1));
        let asym = extract_kernel(&tokens, &w, KernelVariant::Asymmetric)?;
        worst_norm = worst_norm.max(check_normalization(&asym));
        let a = scaled_dot_product(&tokens, &w)?.a;
        worst_softmax = worst_softmax.max((asym.normalized() - a).amax());
        let rbf = extract_kernel(&tokens, &w, KernelVariant::Rbf)?;
        worst_rbf_norm = worst_rbf_norm.max(check_normalization(&rbf));
        let spec = mercer_spectrum(&rbf)?;
        worst_psd = worst_psd.min(spec.min_over_max());
        worst_recon = worst_recon.max((spec.reconstruct(cfg.p) - rbf.matrix()).amax());
        if s == 0 {
            let mut csv = Csv::new(&["index", "eigenvalue"]);
            for (i, v) in spec.eigenvalues.iter().enumerate() {
                csv.row(&[&i, v]);
            }
            ctx.write("spectrum.csv", &csv.0)?;
            ctx.write("kernel_rbf.csv", &matrix_to_csv(rbf.matrix()))?;
        }
    }
    ctx.check("asymmetric_normalization_residual", worst_norm, "<= 1e-12", worst_norm <= 1e-12);
    ctx.check("asymmetric_matches_softmax", worst_softmax, "<= 1e-10", worst_softmax <= 1e-10);
    ctx.check("rbf_normalization_residual", worst_rbf_norm, "<= 1e-12", worst_rbf_norm <= 1e-12);
    ctx.check("rbf_min_eigenvalue_over_max", worst_psd, ">= -1e-8", worst_psd >= -1e-8);
    ctx.check("mercer_reconstruction_error", worst_recon, "<= 1e-10", worst_recon <= 1e-10);

    // Spectral decay against γ on one instance (reported).
    let y = rng::gaussian_matrix(&mut rng::seeded(rng::sub_seed(cfg.seed, 99)), cfg.p, cfg.d, 1.0);
    let tokens = TokenMatrix::with_default_positions(y)?;
    let mut csv = Csv::new(&["gamma", "mid_over_top"]);
    for gamma in [0.01, 0.1, 1.0, 10.0] {
        let w = AttentionWeights::seeded(cfg.d, gamma, rng::sub_seed(cfg.seed, 98));
        let spec = mercer_spectrum(&extract_kernel(&tokens, &w, KernelVariant::Rbf)?)?;
        let mid = spec.eigenvalues[cfg.p.div_ceil(2) - 1];
        csv.row(&[&gamma, &(mid / spec.eigenvalues[0])]);
    }
    ctx.write("spectral_decay.csv", &csv.0)?;

    let ns = ctx.cfg.n_values_or(&[4, 8, 16]);
    let scan = decay_scan(&ns, cfg.d, cfg.gamma, cfg.seed)?;
    let mut csv = Csv::new(&["n", "c_grid", "c_feature"]);
    for r in &scan.rows {
        csv.row(&[&r.n, &r.c_grid, &r.c_feature]);
    }
    ctx.write("decay.csv", &csv.0)?;
    ctx.report("decay_constant_spread", scan.spread, "<= 2", scan.stable);
    ctx.result("decay", &scan);
    Ok(())
}

fn run_stability(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let scan = StabilityScan {
        n_values: cfg.n_values_or(&[4, 8, 16, 32]),
        seeds: cfg.seeds,
        gamma: cfg.gamma,
        patch_side: cfg.patch_side,
        layers: cfg.layers,
        variant: cfg.variant,
        seed: cfg.seed,
    };
    let rep = verify_bound(&scan)?;
    let mut csv = Csv::new(&["n", "seed", "t", "drift", "sup", "bv", "rho"]);
    for r in &rep.rows {
        csv.row(&[&r.n, &r.seed, &r.t, &r.drift, &r.sup, &r.bv, &r.rho]);
    }
    ctx.write("stability.csv", &csv.0)?;
    let slope = rep.slope.unwrap_or(f64::NAN);
    if rep.degenerate {
        ctx.report("drift_slope", slope, "degenerate: all drifts vanish", true);
    } else {
        ctx.check("drift_slope", slope, "in [-1.4, -0.6]", (-1.4..=-0.6).contains(&slope));
    }
    let rho_ratio = if rep.median_rho > 0.0 { rep.max_rho / rep.median_rho } else { 0.0 };
    ctx.check("max_rho_over_median", rho_ratio, "<= 10", rho_ratio <= 10.0);
    ctx.check("constant_field_drift", rep.constant_drift, "<= 1e-12", rep.constant_drift <= 1e-12);
    ctx.report("local_kernel_control_slope", rep.local_control_slope.unwrap_or(f64::NAN), "reference only", true);
    ctx.result("slope", rep.slope);
    ctx.result("intercept", rep.intercept);
    ctx.result("rho_by_n", &rep.rho_by_n);
    ctx.result("max_rho", rep.max_rho);
    ctx.result("median_rho", rep.median_rho);
    ctx.result("median_drift", &rep.median_drift);
    ctx.result("degenerate", rep.degenerate);
    ctx.result("local_control_slope", rep.local_control_slope);
    Ok(())
}

fn run_fredholm(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let mut csv = Csv::new(&["quantity", "value"]);
    let prob = seeded_problem(cfg.p, 4, cfg.gamma, cfg.beta, cfg.seed)?;
    let el = verify_euler_lagrange(&prob, rng::sub_seed(cfg.seed, 1))?;
    csv.row(&[&"gradient_check", &el.gradient_check]);
    csv.row(&[&"euler_lagrange_mismatch", &el.mismatch]);
    csv.row(&[&"oracle_iterations", &el.oracle_iterations]);
    ctx.check("gradient_fd_relative_error", el.gradient_check, "<= 1e-6", el.gradient_check <= 1e-6);
    ctx.check("euler_lagrange_mismatch", el.mismatch, "<= 1e-4", el.mismatch <= 1e-4);
    ctx.report(
        "oracle_converged",
        el.oracle_iterations as f64,
        "converged",
        el.oracle_status == OracleStatus::Converged,
    );

    let ones = singular_problem(cfg.p, cfg.beta)?;
    let el1 = verify_euler_lagrange(&ones, rng::sub_seed(cfg.seed, 2))?;
    csv.row(&[&"singular_kernel_mismatch", &el1.mismatch]);
    ctx.check("euler_lagrange_mismatch_singular_kernel", el1.mismatch, "<= 1e-4", el1.mismatch <= 1e-4);

    let side = (cfg.p as f64).sqrt().round().max(2.0) as usize;
    let std_prob = rbf_test_problem(8, 1.0, 2, cfg.beta)?;
    let mut worst_cond: f64 = 0.0;
    for beta in [1e-3, 1e-2, cfg.beta, 1.0] {
        let c = condition_check(&rbf_test_problem(side, cfg.gamma, 1, beta)?)?;
        worst_cond = worst_cond.max(c.condition / c.bound);
        csv.row(&[&format!("condition_over_bound_beta_{beta}"), &(c.condition / c.bound)]);
    }
    ctx.check("condition_over_spectral_bound", worst_cond, "<= 1.05", worst_cond <= 1.05);

    let amp = noise_amplification(&std_prob, 1e-8, 1e-14, rng::sub_seed(cfg.seed, 3))?;
    csv.row(&[&"first_kind_amplification", &amp.first_kind]);
    csv.row(&[&"second_kind_amplification", &amp.second_kind]);
    csv.row(&[&"first_kind_condition", &amp.first_kind_condition]);
    ctx.check("noise_amplification_ratio", amp.ratio, ">= 10", amp.ratio >= 10.0);
    ctx.report("first_kind_condition", amp.first_kind_condition, ">= 1e6", amp.first_kind_condition >= 1e6);
    ctx.write("fredholm.csv", &csv.0)?;

    let mut csv = Csv::new(&["beta", "solution_norm"]);
    let mut monotone = true;
    let mut last = f64::INFINITY;
    for beta in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
        let n = solve_second_kind(&prob.with_beta(beta)?)?.norm();
        monotone &= n <= last + 1e-12;
        last = n;
        csv.row(&[&beta, &n]);
    }
    ctx.write("regularization.csv", &csv.0)?;
    ctx.check("solution_norm_monotone_in_beta", monotone as u8 as f64, "== 1", monotone);
    ctx.result("euler_lagrange", &el);
    ctx.result("noise_amplification", &amp);
    Ok(())
}

fn singular_problem(p: usize, beta: f64) -> Result<FredholmProblem> {
    FredholmProblem::new(
        DMatrix::from_element(p, p, 1.0),
        DVector::from_element(p, p as f64),
        DVector::from_element(p, 1.0 / p as f64),
        DMatrix::from_fn(p, 2, |i, c| (i as f64 * 0.7).sin() + c as f64),
        beta,
    )
}

fn run_interpolation(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let scan = MaskScan {
        n_values: cfg.n_values_or(&[4, 8, 16, 32]),
        seeds: cfg.seeds,
        mask_ratio: cfg.mask_ratio,
        patch_side: cfg.patch_side,
        seed: cfg.seed,
    };
    let rep = restricted_attention_scan(&scan)?;
    let mut csv = Csv::new(&["n", "seed", "error", "max_mass", "discrepancy"]);
    for r in &rep.rows {
        csv.row(&[&r.n, &r.seed, &r.error, &r.max_mass, &r.discrepancy]);
    }
    ctx.write("interpolation.csv", &csv.0)?;
    ctx.check("absorption_discrepancy", rep.max_discrepancy, "<= 1e-10", rep.max_discrepancy <= 1e-10);
    let slope = rep.slope.unwrap_or(f64::NAN);
    ctx.check("restricted_error_slope", slope, "<= -0.5", slope <= -0.5);

    let mut worst_sum: f64 = 0.0;
    let mut min_weight = f64::INFINITY;
    for &n in &scan.n_values {
        for s in 0..scan.seeds as u64 {
            let (mt, w) = mask_scan_instance(&scan, n, s)?;
            let ra = restricted_attention(&mt, &w)?;
            for &i in mt.masked() {
                let a = ra.weights.row(i);
                worst_sum = worst_sum.max((a.sum() - 1.0).abs());
                min_weight = min_weight.min(a.min());
            }
        }
    }
    ctx.check("weights_sum_to_one", worst_sum, "<= 1e-12", worst_sum <= 1e-12);
    ctx.check("weights_nonnegative", min_weight, ">= 0", min_weight >= 0.0 || min_weight == f64::INFINITY);

    let mut csv = Csv::new(&["n", "seed", "masked_index", "error", "bound_rhs", "ratio"]);
    let mut c_hats = Vec::new();
    for &n in &scan.n_values {
        let mut per_n = Vec::new();
        for s in 0..scan.seeds as u64 {
            let seed = rng::sub_seed(cfg.seed, s);
            let field = SmoothField::seeded(1, rng::sub_seed(seed, 0));
            let tokens = continuum_tokens(&field, n, cfg.patch_side)?;
            let size = n * cfg.patch_side;
            let truth = ImageGrid::from_fn(size, 1, |r, c, _| {
                field.eval(0, (r as f64 + 0.5) / size as f64, (c as f64 + 0.5) / size as f64)
            })?;
            let (parts, _) = patchify(&truth, n)?;
            let d = cfg.patch_side * cfg.patch_side;
            let mut w = AttentionWeights::seeded(d, 1.0, rng::sub_seed(seed, 1));
            w.wv = DMatrix::identity(d, d);
            let m = DVector::from_element(d, 0.5);
            let masked = bound_mask(&tokens, cfg.mask_ratio, &m, rng::sub_seed(seed, 3 + n as u64))?;
            let Some(mt) = masked else { continue };
            let b = reconstruction_error_bound(&mt, &w, &truth, &parts, None)?;
            for r in &b.rows {
                csv.row(&[&n, &seed, &r.masked_index, &r.error, &r.bound_rhs, &r.ratio]);
            }
            per_n.push(b.c_hat);
        }
        if let Some(med) = median(&per_n) {
            c_hats.push((n, med));
        }
    }
    ctx.write("interpolation_bound.csv", &csv.0)?;
    let max = c_hats.iter().map(|c| c.1).fold(0.0, f64::max);
    let min = c_hats.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let spread = if min > 0.0 { max / min } else { f64::INFINITY };
    ctx.report("c_hat_spread", spread, "<= 10", spread <= 10.0);
    ctx.result("median_error", &rep.median_error);
    ctx.result("slope", rep.slope);
    ctx.result("c_hat", &c_hats);
    Ok(())
}

fn bound_mask(tokens: &TokenMatrix, ratio: f64, m: &DVector<f64>, seed: u64) -> Result<Option<MaskedTokenSet>> {
    match crate::interpolation::build_masked_input(tokens, ratio, m, seed) {
        Ok(mt) => Ok(Some(mt)),
        Err(Error::InvalidConfiguration(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_attention(ctx: &mut Ctx) -> Result<()> {
    use rand::Rng;
    let cfg = ctx.cfg;
    let mut csv = Csv::new(&[
        "instance",
        "p",
        "d",
        "row_sum_error",
        "min_entry",
        "oracle_error",
        "identity_error",
        "symmetry_error",
    ]);
    let (mut w_sum, mut w_min, mut w_oracle, mut w_id, mut w_sym) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..cfg.instances as u64 {
        let seed = rng::sub_seed(cfg.seed, i);
        let mut r = rng::seeded(seed);
        let p = r.random_range(1..=64usize);
        let d = r.random_range(1..=128usize);
        let stats = attention_instance(p, d, cfg.gamma, seed)?;
        csv.row(&[&i, &p, &d, &stats[0], &stats[1], &stats[2], &stats[3], &stats[4]]);
        w_sum = w_sum.max(stats[0]);
        w_min = w_min.min(stats[1]);
        w_oracle = w_oracle.max(stats[2]);
        w_id = w_id.max(stats[3]);
        w_sym = w_sym.max(stats[4]);
    }
    ctx.write("attention.csv", &csv.0)?;
    ctx.check("row_sum_error", w_sum, "<= 1e-12", w_sum <= 1e-12);
    ctx.check("min_attention_entry", w_min, ">= 0", w_min >= 0.0);
    ctx.check("loop_oracle_error", w_oracle, "<= 1e-10", w_oracle <= 1e-10);
    ctx.check("shift_identity_error", w_id, "<= 1e-12", w_id <= 1e-12);
    ctx.check("symmetrized_logit_asymmetry", w_sym, "<= 1e-12", w_sym <= 1e-12);
    Ok(())
}

/// `[row-sum error, min entry, loop-oracle error, identity error, relative
/// logit asymmetry]` for one seeded instance.
pub fn attention_instance(p: usize, d: usize, gamma: f64, seed: u64) -> Result<[f64; 5]> {
    let y = rng::gaussian_matrix(&mut rng::seeded(rng::sub_seed(seed, 0)), p, d, 1.0);
    let tokens = TokenMatrix::with_default_positions(y)?;
    let w = AttentionWeights::seeded(d, gamma, rng::sub_seed(seed, 1));
    let out = scaled_dot_product(&tokens, &w)?;
    let row_sum = out.a.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let min_entry = out.a.min();
    let v = tokens.y() * &w.wv;
    let mut oracle: f64 = 0.0;
    for i in 0..p {
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..p {
                acc += out.a[(i, j)] * v[(j, c)];
            }
            oracle = oracle.max((acc - out.z[(i, c)]).abs());
        }
    }
    let q = tokens.y() * &w.wq;
    let k = tokens.y() * &w.wk;
    let mut identity: f64 = 0.0;
    for i in 0..p {
        let j = (i * 7 + 3) % p;
        let (l, r) = dot_product_shift_identity(&q.row(i).transpose(), &k.row(j).transpose())?;
        identity = identity.max((l - r).abs());
    }
    let l = logits(&tokens, &w, AttentionVariant::Symmetrized)?;
    let scale = l.amax().max(1.0);
    let sym = (&l - l.transpose()).amax() / scale;
    // The symmetrized attention matrix is still row-stochastic.
    let a_sym = row_softmax(&l);
    let sym_rows = a_sym.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    Ok([row_sum.max(sym_rows), min_entry.min(a_sym.min()), oracle, identity, sym])
}

fn run_geometry(ctx: &mut Ctx) -> Result<()> {
    let items = self_test(&ctx.cfg.geometry, ctx.cfg.seed)?;
    let mut csv = Csv::new(&["name", "expected", "actual", "pass"]);
    for it in &items {
        csv.row(&[&it.name, &it.expected, &it.actual, &it.pass]);
    }
    ctx.write("geometry.csv", &csv.0)?;
    for it in &items {
        ctx.check(it.name, it.actual, &format!("== {}", it.expected), it.pass);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_experiments_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"experiment":"bv","bogus":1}"#).is_err());
        assert!(matches!(ExperimentConfig::from_json(r#"{"experiment":"nope"}"#), Err(Error::InvalidConfiguration(_))));
        assert!(ExperimentConfig::from_json(r#"{"experiment":"bv","mask_ratio":1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment":"bv"}"#).is_ok());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::new("bv");
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bv_on_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let s = run(&ExperimentConfig::new("bv"), dir.path()).unwrap();
        assert!(s.pass);
        let csv = std::fs::read_to_string(dir.path().join("bv.csv")).unwrap();
        assert!(csv.contains("3.41421"), "{csv}");
        let prov = std::fs::read_to_string(dir.path().join("provenance.txt")).unwrap();
        assert!(prov.starts_with("# generated at unix time"));
        assert!(prov.contains(&s.config_sha256));
    }

    #[test]
    fn geometry_and_patchify_pass() {
        let dir = tempfile::tempdir().unwrap();
        assert!(run(&ExperimentConfig::new("geometry"), dir.path()).unwrap().pass);
        assert!(run(&ExperimentConfig::new("patchify"), dir.path()).unwrap().pass);
    }

    #[test]
    fn small_attention_suite_passes() {
        let mut cfg = ExperimentConfig::new("attention");
        cfg.instances = 20;
        let dir = tempfile::tempdir().unwrap();
        let s = run(&cfg, dir.path()).unwrap();
        assert!(s.pass, "{:?}", s.checks);
    }
}
