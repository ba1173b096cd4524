//! Default ViT/MAE geometry and a self-test that instantiates it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::{positional_embedding, TokenMatrix};
use crate::error::{invalid, Result};
use crate::grid::{patchify, ImageGrid};
use crate::interpolation::build_masked_input;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub image_size: usize,
    pub per_axis: usize,
    pub channels: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub mask_ratio: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { image_size: 224, per_axis: 14, channels: 3, encoder_dim: 768, decoder_dim: 512, mask_ratio: 0.75 }
    }
}

impl Geometry {
    pub fn patches(&self) -> usize {
        self.per_axis * self.per_axis
    }

    pub fn patch_side(&self) -> usize {
        self.image_size / self.per_axis
    }

    /// Flattened patch length `N_c²·c`.
    pub fn patch_dim(&self) -> usize {
        self.patch_side().pow(2) * self.channels
    }

    pub fn visible(&self) -> usize {
        self.patches() - (self.mask_ratio * self.patches() as f64).round() as usize
    }

    /// Seeded `decoder_dim × patch_dim` map from decoder outputs to patches.
    pub fn reprojection(&self, seed: u64) -> DMatrix<f64> {
        let scale = 1.0 / (self.decoder_dim as f64).sqrt();
        rng::gaussian_matrix(&mut rng::seeded(seed), self.decoder_dim, self.patch_dim(), scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryItem {
    pub name: &'static str,
    pub expected: f64,
    pub actual: f64,
    pub pass: bool,
}

/// Builds each object of the geometry and compares its measured shape with the
/// expected one.
pub fn self_test(g: &Geometry, seed: u64) -> Result<Vec<GeometryItem>> {
    if g.per_axis == 0 || !g.image_size.is_multiple_of(g.per_axis) {
        return Err(invalid("per_axis must divide image_size"));
    }
    let img = ImageGrid::zeros(g.image_size, g.channels)?;
    let (parts, tiles) = patchify(&img, g.per_axis)?;
    let pos = positional_embedding(g.per_axis, g.encoder_dim)?;
    let enc_tokens = TokenMatrix::new(DMatrix::zeros(parts.count(), g.encoder_dim), pos)?;
    let dec_pos = positional_embedding(g.per_axis, g.decoder_dim)?;
    let dec_tokens = TokenMatrix::new(DMatrix::zeros(parts.count(), g.decoder_dim), dec_pos)?;
    let masked = build_masked_input(&dec_tokens, g.mask_ratio, &DVector::zeros(g.decoder_dim), seed)?;
    let reproj = g.reprojection(seed);
    let decoded = dec_tokens.y() * &reproj;

    let item = |name, expected: usize, actual: usize| GeometryItem {
        name,
        expected: expected as f64,
        actual: actual as f64,
        pass: expected == actual,
    };
    Ok(vec![
        item("patches", g.patches(), parts.count()),
        item("patch_side", g.patch_side(), tiles[0].side),
        item("encoder_dim", g.encoder_dim, enc_tokens.dim()),
        item("patch_dim_matches_encoder_dim", g.encoder_dim, tiles[0].data.len()),
        item("decoder_dim", g.decoder_dim, dec_tokens.dim()),
        item("visible_patches", g.visible(), masked.unmasked().len()),
        item("reprojected_width", g.patch_dim(), decoded.ncols()),
    ])
}
