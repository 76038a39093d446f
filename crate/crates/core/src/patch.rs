//! Sliding-window patch extraction and the pixel/cell/patch coordinate maps.

use crate::error::{Error, Result};
use crate::featureio::FeatureMap;

/// Patch side and stride in feature cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub side: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { side: 5, stride: 5 }
    }
}

/// The lattice of square windows laid over an `H × W` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_side: usize,
    pub stride: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_side: usize, stride: usize) -> Result<Self> {
        if patch_side == 0 || stride == 0 {
            return Err(Error::Geometry(format!(
                "patch side ({patch_side}) and stride ({stride}) must be at least 1"
            )));
        }
        if patch_side > height.min(width) {
            return Err(Error::Geometry(format!(
                "patch side {patch_side} exceeds min({height}, {width})"
            )));
        }
        Ok(Self {
            patch_side,
            stride,
            n_x: (width - patch_side) / stride + 1,
            n_y: (height - patch_side) / stride + 1,
            height,
            width,
        })
    }

    pub fn for_map(map: &FeatureMap, patch_side: usize, stride: usize) -> Result<Self> {
        Self::new(map.height(), map.width(), patch_side, stride)
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, grid_x: usize, grid_y: usize) -> usize {
        grid_y * self.n_x + grid_x
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.n_x, index / self.n_x)
    }

    /// Patches whose window contains feature cell `(cx, cy)`, in ascending
    /// index order.
    pub fn patches_containing(&self, cx: usize, cy: usize) -> Vec<usize> {
        let span = |c: usize, n: usize| -> std::ops::RangeInclusive<usize> {
            // g·s ≤ c < g·s + d  ⇔  (c + 1 − d)/s ≤ g ≤ c/s
            let lo = (c + 1).saturating_sub(self.patch_side).div_ceil(self.stride);
            let hi = (c / self.stride).min(n - 1);
            lo..=hi
        };
        let mut out = Vec::new();
        for gy in span(cy, self.n_y) {
            for gx in span(cx, self.n_x) {
                out.push(self.index(gx, gy));
            }
        }
        out
    }
}

/// Number of sliding-window patches, `⌊(H−d)/s + 1⌋ · ⌊(W−d)/s + 1⌋`.
pub fn patch_count(height: usize, width: usize, patch_side: usize, stride: usize) -> Result<usize> {
    PatchGrid::new(height, width, patch_side, stride).map(|g| g.len())
}

/// A `d × d` window of feature vectors, rows in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub index: usize,
    pub grid_x: usize,
    pub grid_y: usize,
    depth: usize,
    features: Vec<f32>,
}

impl Patch {
    pub fn new(index: usize, grid_x: usize, grid_y: usize, depth: usize, features: Vec<f32>) -> Result<Self> {
        if depth == 0 || features.is_empty() || !features.len().is_multiple_of(depth) {
            return Err(Error::Dimension(format!(
                "patch features of length {} do not split into rows of {depth}",
                features.len()
            )));
        }
        Ok(Self {
            index,
            grid_x,
            grid_y,
            depth,
            features,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn rows(&self) -> usize {
        self.features.len() / self.depth
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.depth..(i + 1) * self.depth]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.features.chunks_exact(self.depth)
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }
}

pub fn extract_patches(map: &FeatureMap, patch_side: usize, stride: usize) -> Result<Vec<Patch>> {
    let grid = PatchGrid::for_map(map, patch_side, stride)?;
    Ok(extract_with_grid(map, &grid))
}

pub(crate) fn extract_with_grid(map: &FeatureMap, grid: &PatchGrid) -> Vec<Patch> {
    let d = map.depth();
    let side = grid.patch_side;
    let mut out = Vec::with_capacity(grid.len());
    for gy in 0..grid.n_y {
        for gx in 0..grid.n_x {
            let mut features = Vec::with_capacity(side * side * d);
            for y in gy * grid.stride..gy * grid.stride + side {
                let row_start = (y * map.width() + gx * grid.stride) * d;
                features.extend_from_slice(&map.data()[row_start..row_start + side * d]);
            }
            out.push(Patch {
                index: grid.index(gx, gy),
                grid_x: gx,
                grid_y: gy,
                depth: d,
                features,
            });
        }
    }
    out
}

/// Whole map as a single patch; used for global descriptors.
pub fn full_map_patch(map: &FeatureMap) -> Patch {
    Patch {
        index: 0,
        grid_x: 0,
        grid_y: 0,
        depth: map.depth(),
        features: map.data().to_vec(),
    }
}

/// Maps a pixel to the feature cell under it, by proportional scaling and
/// flooring.
pub fn pixel_to_cell(
    px: f64,
    py: f64,
    image_height: usize,
    image_width: usize,
    grid: &PatchGrid,
) -> Result<(usize, usize)> {
    if !(px >= 0.0 && py >= 0.0 && px < image_width as f64 && py < image_height as f64) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({px}, {py}) outside {image_width}x{image_height} image"
        )));
    }
    let cx = ((px * grid.width as f64 / image_width as f64).floor() as usize).min(grid.width - 1);
    let cy = ((py * grid.height as f64 / image_height as f64).floor() as usize).min(grid.height - 1);
    Ok((cx, cy))
}

/// All patch indices whose window covers the cell under pixel `(px, py)`.
/// Empty when the cell lies in the uncovered margin.
pub fn patch_of_pixel(
    px: f64,
    py: f64,
    image_height: usize,
    image_width: usize,
    grid: &PatchGrid,
) -> Result<Vec<usize>> {
    let (cx, cy) = pixel_to_cell(px, py, image_height, image_width, grid)?;
    Ok(grid.patches_containing(cx, cy))
}
