//! Pixel grids, the graph BV seminorm, and non-overlapping patch
//! decomposition.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Weights on the undirected 4-neighbour edges of an `N×N` grid.
///
/// Each edge is stored once, so `w_ij = w_ji` holds by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights {
    size: usize,
    /// `(r, c)` to `(r, c+1)`, row-major `N×(N-1)`.
    horizontal: Vec<f64>,
    /// `(r, c)` to `(r+1, c)`, row-major `(N-1)×N`.
    vertical: Vec<f64>,
}

impl EdgeWeights {
    pub fn uniform(size: usize, w: f64) -> Self {
        let n_edges = size * size.saturating_sub(1);
        Self { size, horizontal: vec![w; n_edges], vertical: vec![w; n_edges] }
    }

    pub fn new(size: usize, horizontal: Vec<f64>, vertical: Vec<f64>) -> Result<Self> {
        let n_edges = size * size.saturating_sub(1);
        if horizontal.len() != n_edges || vertical.len() != n_edges {
            return Err(invalid(format!("expected {n_edges} horizontal and vertical edge weights")));
        }
        if horizontal.iter().chain(&vertical).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("edge weights must be finite and nonnegative"));
        }
        Ok(Self { size, horizontal, vertical })
    }

    /// Weight of the edge between `(r, c)` and `(r2, c2)`; zero for non-neighbours.
    pub fn between(&self, r: usize, c: usize, r2: usize, c2: usize) -> f64 {
        let n = self.size;
        if r == r2 && c.abs_diff(c2) == 1 {
            self.horizontal[r * (n - 1) + c.min(c2)]
        } else if c == c2 && r.abs_diff(r2) == 1 {
            self.vertical[r.min(r2) * n + c]
        } else {
            0.0
        }
    }
}

/// An `N×N×c` pixel field (`c ∈ {1, 3}`), row-major with channels interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    size: usize,
    channels: usize,
    pixels: Vec<f64>,
    weights: Option<EdgeWeights>,
}

impl ImageGrid {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!("grid size must be at least 2, got {size}")));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("channel count must be 1 or 3, got {channels}")));
        }
        if pixels.len() != size * size * channels {
            return Err(invalid(format!(
                "expected {} pixel values for a {size}x{size}x{channels} grid, got {}",
                size * size * channels,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite pixel value at flat index {i}")));
        }
        Ok(Self { size, channels, pixels, weights: None })
    }

    pub fn zeros(size: usize, channels: usize) -> Result<Self> {
        Self::new(size, channels, vec![0.0; size * size * channels])
    }

    pub fn from_fn(size: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(size * size * channels);
        for r in 0..size {
            for c in 0..size {
                for ch in 0..channels {
                    pixels.push(f(r, c, ch));
                }
            }
        }
        Self::new(size, channels, pixels)
    }

    /// Builds a single-channel grid from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(invalid("rows must form a square grid"));
        }
        Self::new(size, 1, rows.concat())
    }

    pub fn with_weights(mut self, weights: EdgeWeights) -> Result<Self> {
        if weights.size != self.size {
            return Err(invalid("edge weight grid size does not match the image"));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.pixels[(r * self.size + c) * self.channels + ch]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.pixels[(r * self.size + c) * self.channels + ch] = v;
    }

    pub fn weight(&self, r: usize, c: usize, r2: usize, c2: usize) -> f64 {
        match &self.weights {
            Some(w) => w.between(r, c, r2, c2),
            None => 1.0,
        }
    }

    /// Channel `ch` as an `N×N` matrix.
    pub fn channel_matrix(&self, ch: usize) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.size, self.size, |r, c| self.get(r, c, ch))
    }

    pub fn from_channel_matrices(channels: &[nalgebra::DMatrix<f64>]) -> Result<Self> {
        let first = channels.first().ok_or_else(|| invalid("no channel matrices"))?;
        let size = first.nrows();
        if channels.iter().any(|m| m.nrows() != size || m.ncols() != size) {
            return Err(invalid("channel matrices must be square and equally sized"));
        }
        Self::from_fn(size, channels.len(), |r, c, ch| channels[ch][(r, c)])
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|v| *v *= lambda);
        out
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.size != other.size || self.channels != other.channels {
            return Err(invalid("image shapes differ"));
        }
        let mut out = self.clone();
        out.pixels.iter_mut().zip(&other.pixels).for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.pixels.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Graph BV seminorm over the 4-neighbour graph:
/// `Σ_i ( Σ_{j ∈ N(i)} w_ij (u_i − u_j)² )^{1/2}`, evaluated per channel and
/// summed over channels.
pub fn bv_seminorm(img: &ImageGrid) -> f64 {
    (0..img.channels)
        .map(|ch| grid_bv(img.size, |r, c| img.get(r, c, ch), |r, c, r2, c2| img.weight(r, c, r2, c2)))
        .sum()
}

/// BV seminorm of a generic `n×n` field given by accessors. Boundary nodes have
/// fewer neighbours; no padding is applied.
pub(crate) fn grid_bv(
    n: usize,
    value: impl Fn(usize, usize) -> f64,
    weight: impl Fn(usize, usize, usize, usize) -> f64,
) -> f64 {
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..n {
            let u = value(r, c);
            let mut acc = 0.0;
            for (r2, c2) in neighbours(n, r, c) {
                let d = u - value(r2, c2);
                acc += weight(r, c, r2, c2) * d * d;
            }
            total += acc.sqrt();
        }
    }
    total
}

pub(crate) fn neighbours(n: usize, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (r > 0).then(|| (r - 1, c));
    let down = (r + 1 < n).then(|| (r + 1, c));
    let left = (c > 0).then(|| (r, c - 1));
    let right = (c + 1 < n).then(|| (r, c + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Pixel block of one patch, `N_c×N_c×c`, row-major with channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchValues {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PatchValues {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Self { side, channels, data: vec![0.0; side * side * channels] }
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.side + c) * self.channels + ch]
    }

    /// BV seminorm using only intra-patch edges with unit weights.
    pub fn bv(&self) -> f64 {
        (0..self.channels).map(|ch| grid_bv(self.side, |r, c| self.get(r, c, ch), |_, _, _, _| 1.0)).sum()
    }
}

/// Row/column offsets of patch `Ω_i` in the full grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRange {
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

impl PatchRange {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.side).contains(&r) && (self.col..self.col + self.side).contains(&c)
    }
}

/// Equal-sized `n×n` decomposition of an `N×N` grid into patches of side
/// `N_c = N / n`, numbered row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patchification {
    grid_size: usize,
    per_axis: usize,
    selection: Option<Vec<usize>>,
}

impl Patchification {
    pub fn new(grid_size: usize, per_axis: usize) -> Result<Self> {
        if per_axis == 0 || !grid_size.is_multiple_of(per_axis) {
            return Err(Error::InvalidPartition { size: grid_size, parts: per_axis });
        }
        Ok(Self { grid_size, per_axis, selection: None })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// `n`, patches per axis.
    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    /// `N_c`, the patch side length.
    pub fn side(&self) -> usize {
        self.grid_size / self.per_axis
    }

    pub fn count(&self) -> usize {
        self.per_axis * self.per_axis
    }

    pub fn patch(&self, i: usize) -> PatchRange {
        let side = self.side();
        PatchRange { row: (i / self.per_axis) * side, col: (i % self.per_axis) * side, side }
    }

    pub fn patches(&self) -> impl Iterator<Item = PatchRange> + '_ {
        (0..self.count()).map(|i| self.patch(i))
    }

    /// Patch-grid coordinates `(row, col)` of patch `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.per_axis, i % self.per_axis)
    }

    pub fn selection(&self) -> Option<&[usize]> {
        self.selection.as_deref()
    }

    /// Attaches an explicit selection of patch indices.
    pub fn with_selection(mut self, selection: Vec<usize>) -> Result<Self> {
        if selection.iter().any(|&i| i >= self.count()) {
            return Err(invalid("selected patch index out of range"));
        }
        let mut sorted = selection.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != selection.len() {
            return Err(invalid("selected patch indices must be distinct"));
        }
        self.selection = Some(selection);
        Ok(self)
    }

    /// Selects every patch (the degenerate, fully sampled case).
    pub fn select_all(self) -> Self {
        let all = (0..self.count()).collect();
        Self { selection: Some(all), ..self }
    }

    /// True when the selection has one patch per patch-row and its
    /// patch-columns form a permutation of `0..n`.
    pub fn selection_is_row_permutation(&self) -> bool {
        let Some(sel) = &self.selection else { return false };
        let n = self.per_axis;
        if sel.len() != n {
            return false;
        }
        let mut rows = vec![false; n];
        let mut cols = vec![false; n];
        for &i in sel {
            let (r, c) = self.coords(i);
            if rows[r] || cols[c] {
                return false;
            }
            rows[r] = true;
            cols[c] = true;
        }
        true
    }

    /// Restriction of `img` to patch `i`.
    pub fn restrict(&self, img: &ImageGrid, i: usize) -> PatchValues {
        let p = self.patch(i);
        let ch = img.channels();
        let mut data = Vec::with_capacity(p.side * p.side * ch);
        for r in p.row..p.row + p.side {
            for c in p.col..p.col + p.side {
                for k in 0..ch {
                    data.push(img.get(r, c, k));
                }
            }
        }
        PatchValues { side: p.side, channels: ch, data }
    }

    pub fn restrict_all(&self, img: &ImageGrid) -> Result<Vec<PatchValues>> {
        self.check_image(img)?;
        Ok((0..self.count()).map(|i| self.restrict(img, i)).collect())
    }

    /// `Σ_i E_i u_i`: zero-pads every patch into the full grid and sums.
    pub fn extension_sum(&self, patch_values: &[PatchValues]) -> Result<ImageGrid> {
        if patch_values.len() != self.count() {
            return Err(invalid(format!("expected {} patch arrays, got {}", self.count(), patch_values.len())));
        }
        let channels = patch_values[0].channels;
        let side = self.side();
        for pv in patch_values {
            if pv.side != side || pv.channels != channels || pv.data.len() != side * side * channels {
                return Err(invalid("patch array shape does not match the patchification"));
            }
        }
        let mut out = ImageGrid::zeros(self.grid_size, channels)?;
        for (i, pv) in patch_values.iter().enumerate() {
            let mut extended = ImageGrid::zeros(self.grid_size, channels)?;
            self.extend_into(&mut extended, i, pv);
            out.pixels.iter_mut().zip(&extended.pixels).for_each(|(a, b)| *a += b);
        }
        ImageGrid::new(out.size, out.channels, out.pixels)
    }

    /// `E_i u_i` written into `target` (zero outside `Ω_i` is the caller's job).
    pub fn extend_into(&self, target: &mut ImageGrid, i: usize, pv: &PatchValues) {
        let p = self.patch(i);
        for r in 0..p.side {
            for c in 0..p.side {
                for k in 0..pv.channels {
                    target.set(p.row + r, p.col + c, k, pv.get(r, c, k));
                }
            }
        }
    }

    /// Sum of per-patch BV seminorms using only intra-patch edges.
    pub fn intra_patch_bv(&self, img: &ImageGrid) -> Result<f64> {
        self.check_image(img)?;
        let side = self.side();
        let mut total = 0.0;
        for p in self.patches() {
            for ch in 0..img.channels() {
                total += grid_bv(
                    side,
                    |r, c| img.get(p.row + r, p.col + c, ch),
                    |r, c, r2, c2| img.weight(p.row + r, p.col + c, p.row + r2, p.col + c2),
                );
            }
        }
        Ok(total)
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        if img.size() != self.grid_size {
            return Err(invalid(format!(
                "image size {} does not match patchification grid size {}",
                img.size(),
                self.grid_size
            )));
        }
        Ok(())
    }
}

/// Splits `img` into `n×n` patches.
pub fn patchify(img: &ImageGrid, n: usize) -> Result<(Patchification, Vec<PatchValues>)> {
    let p = Patchification::new(img.size(), n)?;
    let values = p.restrict_all(img)?;
    Ok((p, values))
}

/// Picks one patch from every patch-row so that the chosen patch-columns form
/// a uniformly random permutation. Deterministic in `seed`.
pub fn select_patches(patches: &Patchification, seed: u64) -> Result<Patchification> {
    if patches.selection.is_some() {
        return Err(invalid("patchification already carries a selection"));
    }
    let n = patches.per_axis;
    let mut cols: Vec<usize> = (0..n).collect();
    cols.shuffle(&mut rng::seeded(seed));
    let sel = cols.iter().enumerate().map(|(row, &col)| row * n + col).collect();
    patches.clone().with_selection(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: walks every directed edge explicitly.
    fn brute_force_bv(rows: &[Vec<f64>]) -> f64 {
        let n = rows.len() as isize;
        let mut total = 0.0;
        for r in 0..n {
            for c in 0..n {
                let mut s = 0.0;
                for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (r2, c2) = (r + dr, c + dc);
                    if r2 >= 0 && r2 < n && c2 >= 0 && c2 < n {
                        let d = rows[r as usize][c as usize] - rows[r2 as usize][c2 as usize];
                        s += d * d;
                    }
                }
                total += s.sqrt();
            }
        }
        total
    }

    #[test]
    fn constant_image_has_zero_bv() {
        let img = ImageGrid::from_rows(&[vec![0.7, 0.7], vec![0.7, 0.7]]).unwrap();
        assert_eq!(bv_seminorm(&img), 0.0);
    }

    #[test]
    fn single_hot_pixel_2x2() {
        let img = ImageGrid::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let expected = 2f64.sqrt() + 2.0;
        assert!((bv_seminorm(&img) - expected).abs() < 1e-14);
        assert!((bv_seminorm(&img) - 3.41421).abs() < 1e-5);
    }

    #[test]
    fn checkerboard_matches_brute_force() {
        let rows: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| ((r + c) % 2) as f64).collect()).collect();
        let img = ImageGrid::from_rows(&rows).unwrap();
        let oracle = brute_force_bv(&rows);
        assert!((bv_seminorm(&img) - oracle).abs() < 1e-12);
        // 4 corners (√2), 8 edge pixels (√3), 4 interior (2).
        assert!((oracle - (4.0 * 2f64.sqrt() + 8.0 * 3f64.sqrt() + 8.0)).abs() < 1e-12);
    }

    #[test]
    fn multichannel_bv_sums_channels() {
        let img = ImageGrid::from_fn(3, 3, |r, c, ch| ((r * 3 + c) as f64) * (ch + 1) as f64).unwrap();
        let single = ImageGrid::from_fn(3, 1, |r, c, _| (r * 3 + c) as f64).unwrap();
        assert!((bv_seminorm(&img) - 6.0 * bv_seminorm(&single)).abs() < 1e-12);
    }

    #[test]
    fn edge_weights_enter_quadratically() {
        let img = ImageGrid::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let weighted = img.clone().with_weights(EdgeWeights::uniform(2, 4.0)).unwrap();
        assert!((bv_seminorm(&weighted) - 2.0 * bv_seminorm(&img)).abs() < 1e-14);
        assert!(EdgeWeights::new(2, vec![1.0, -1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn non_finite_pixels_rejected() {
        let err = ImageGrid::new(2, 1, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn patchify_round_trip_4x4() {
        let img = ImageGrid::from_fn(4, 1, |r, c, _| (r * 4 + c) as f64 * 0.1).unwrap();
        let (p, values) = patchify(&img, 2).unwrap();
        assert_eq!(values.len(), 4);
        assert!(values.iter().all(|v| v.side == 2));
        assert_eq!(p.extension_sum(&values).unwrap(), img);
    }

    #[test]
    fn vit_geometry_patch_count() {
        let p = Patchification::new(224, 14).unwrap();
        assert_eq!(p.count(), 196);
        assert_eq!(p.side(), 16);
        assert_eq!(p.side() * p.side() * 3, 768);
    }

    #[test]
    fn indivisible_partition_rejected() {
        assert!(matches!(Patchification::new(4, 3), Err(Error::InvalidPartition { size: 4, parts: 3 })));
    }

    #[test]
    fn patches_are_disjoint_and_cover() {
        let p = Patchification::new(12, 3).unwrap();
        for r in 0..12 {
            for c in 0..12 {
                assert_eq!(p.patches().filter(|q| q.contains(r, c)).count(), 1);
            }
        }
    }

    #[test]
    fn extension_sum_edge_cases() {
        let p = Patchification::new(4, 2).unwrap();
        let zeros = vec![PatchValues::zeros(2, 1); 4];
        assert_eq!(p.extension_sum(&zeros).unwrap(), ImageGrid::zeros(4, 1).unwrap());

        let mut single = zeros.clone();
        single[3] = PatchValues { side: 2, channels: 1, data: vec![1.0; 4] };
        let img = p.extension_sum(&single).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(img.get(r, c, 0) != 0.0, p.patch(3).contains(r, c));
            }
        }

        let bad = vec![PatchValues::zeros(3, 1); 4];
        assert!(p.extension_sum(&bad).is_err());
        assert!(p.extension_sum(&zeros[..3]).is_err());
    }

    #[test]
    fn selection_n2_is_a_permutation_pattern() {
        let p = Patchification::new(4, 2).unwrap();
        for seed in 0..20 {
            let s = select_patches(&p, seed).unwrap();
            let sel = s.selection().unwrap().to_vec();
            assert!(sel == vec![0, 3] || sel == vec![1, 2], "{sel:?}");
        }
    }

    #[test]
    fn selection_vit_mask_ratio() {
        let p = Patchification::new(224, 14).unwrap();
        let s = select_patches(&p, 3).unwrap();
        assert_eq!(s.selection().unwrap().len(), 14);
        let ratio: f64 = 1.0 - 14.0 / 196.0;
        assert!((ratio - 0.929).abs() < 1e-3);
        assert_eq!(select_patches(&p, 3).unwrap(), s);
        assert!(select_patches(&s, 3).is_err());
    }

    fn small_image() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(n, nc)| {
            let size = (n * nc).max(2);
            let n = if n * nc < 2 { 2 } else { n };
            (Just(size), Just(n), proptest::collection::vec(-1.0f64..1.0, size * size))
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_exact((size, n, px) in small_image()) {
            let img = ImageGrid::new(size, 1, px).unwrap();
            let (p, values) = patchify(&img, n).unwrap();
            prop_assert_eq!(p.extension_sum(&values).unwrap(), img);
        }

        #[test]
        fn bv_is_absolutely_homogeneous((size, _n, px) in small_image(), lambda in -3.0f64..3.0) {
            let img = ImageGrid::new(size, 1, px).unwrap();
            let lhs = bv_seminorm(&img.scaled(lambda));
            let rhs = lambda.abs() * bv_seminorm(&img);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn intra_patch_bv_is_dominated((size, n, px) in small_image()) {
            let img = ImageGrid::new(size, 1, px).unwrap();
            let p = Patchification::new(size, n).unwrap();
            prop_assert!(p.intra_patch_bv(&img).unwrap() <= bv_seminorm(&img) + 1e-12);
        }

        #[test]
        fn selection_always_permutation(n in 1usize..16, seed in any::<u64>()) {
            let p = Patchification::new(n * 2, n).unwrap();
            let s = select_patches(&p, seed).unwrap();
            prop_assert!(s.selection_is_row_permutation());
        }
    }
}
