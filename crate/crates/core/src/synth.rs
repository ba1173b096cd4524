//! Seeded synthetic images.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Sum of at most four low-frequency sinusoids.
    Lowfreq,
    /// Sum of `rank` nonnegative outer products.
    Lowrank,
    /// Binary checkerboard.
    Checkerboard,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowfreq" => Ok(Self::Lowfreq),
            "lowrank" => Ok(Self::Lowrank),
            "checkerboard" => Ok(Self::Checkerboard),
            other => Err(invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub channels: usize,
    /// Rank for [`SyntheticKind::Lowrank`].
    pub rank: usize,
    /// Cell side in pixels for [`SyntheticKind::Checkerboard`].
    pub cell: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { channels: 1, rank: 1, cell: 1 }
    }
}

pub fn gen_synthetic(kind: SyntheticKind, size: usize, params: SyntheticParams, seed: u64) -> Result<ImageGrid> {
    if size < 2 {
        return Err(invalid("synthetic images need N >= 2"));
    }
    match kind {
        SyntheticKind::Lowfreq => {
            let field = SmoothField::seeded(params.channels, seed);
            ImageGrid::from_fn(size, params.channels, |r, c, ch| {
                let (x, y) = ((r as f64 + 0.5) / size as f64, (c as f64 + 0.5) / size as f64);
                field.eval(ch, x, y)
            })
        }
        SyntheticKind::Lowrank => lowrank_image(size, params.channels, params.rank, seed),
        SyntheticKind::Checkerboard => {
            if params.cell == 0 {
                return Err(invalid("checkerboard cell size must be positive"));
            }
            ImageGrid::from_fn(size, params.channels, |r, c, _| ((r / params.cell + c / params.cell) % 2) as f64)
        }
    }
}

fn lowrank_image(size: usize, channels: usize, rank: usize, seed: u64) -> Result<ImageGrid> {
    if rank == 0 || rank > size {
        return Err(invalid(format!("rank must lie in 1..={size}")));
    }
    let mut rng = rng::seeded(seed);
    let mut mats = Vec::with_capacity(channels);
    for _ in 0..channels {
        let a = nalgebra::DMatrix::from_fn(size, rank, |_, _| rng.random::<f64>());
        let b = nalgebra::DMatrix::from_fn(size, rank, |_, _| rng.random::<f64>());
        mats.push(&a * b.transpose() / rank as f64);
    }
    ImageGrid::from_channel_matrices(&mats)
}

/// A smooth function on the unit square with values in `[0, 1]`, used as the
/// fixed continuum object sampled at different resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField {
    /// Per channel: `(amplitude, fx, fy, phase)` terms.
    terms: Vec<Vec<(f64, f64, f64, f64)>>,
}

impl SmoothField {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let terms = (0..channels)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        (
                            rng.random_range(0.2..1.0),
                            rng.random_range(0.25..1.5),
                            rng.random_range(0.25..1.5),
                            rng.random_range(0.0..2.0 * PI),
                        )
                    })
                    .collect()
            })
            .collect();
        Self { terms }
    }

    pub fn channels(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, ch: usize, x: f64, y: f64) -> f64 {
        let terms = &self.terms[ch];
        let total: f64 = terms.iter().map(|t| t.0).sum();
        let s: f64 = terms.iter().map(|&(a, fx, fy, ph)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin()).sum();
        0.5 + 0.5 * s / total
    }
}
