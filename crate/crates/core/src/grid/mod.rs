//! Block grid geometry and the interchange types between the block reasoner
//! and the pixel decoder.
//!
//! Blocks are indexed in row-major order: block `r * cols + c` covers rows
//! `[r * bh, (r + 1) * bh)` and columns `[c * bw, (c + 1) * bw)` of the image,
//! where `bh = image_h / rows` and `bw = image_w / cols`.

mod runs;
mod structured;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use runs::{parse_runs, parse_runs_strict, serialize_runs, ParseError, ParseErrorKind};
pub use structured::{extract_structured, render_structured, FormatError, StructuredOutput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid must have at least one row and one column, got {rows}x{cols}")]
    EmptyGrid { rows: usize, cols: usize },
    #[error("image {image_h}x{image_w} is not divisible into a {rows}x{cols} grid")]
    Indivisible {
        rows: usize,
        cols: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("mask is {got_h}x{got_w}, grid expects {want_h}x{want_w}")]
    DimensionMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("block index {index} out of range for {count} blocks")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("label sets live on different grids ({a} vs {b})")]
    GridMismatch { a: String, b: String },
    #[error("block threshold must lie in [0, 1), got {0}")]
    BadThreshold(f64),
    #[error("mask has {got} values, expected {want}")]
    BadLength { got: usize, want: usize },
}

/// Partition of an `image_h x image_w` raster into `rows x cols` equal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct GridSpec {
    rows: usize,
    cols: usize,
    image_h: usize,
    image_w: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGridSpec {
    rows: usize,
    cols: usize,
    image_h: usize,
    image_w: usize,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = GridError;
    fn try_from(raw: RawGridSpec) -> Result<Self, GridError> {
        GridSpec::new(raw.rows, raw.cols, raw.image_h, raw.image_w)
    }
}

impl From<GridSpec> for RawGridSpec {
    fn from(g: GridSpec) -> Self {
        RawGridSpec {
            rows: g.rows,
            cols: g.cols,
            image_h: g.image_h,
            image_w: g.image_w,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            image_h: 64,
            image_w: 64,
        }
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, image_h: usize, image_w: usize) -> Result<Self, GridError> {
        if rows == 0 || cols == 0 {
            return Err(GridError::EmptyGrid { rows, cols });
        }
        if image_h == 0 || image_w == 0 || !image_h.is_multiple_of(rows) || !image_w.is_multiple_of(cols) {
            return Err(GridError::Indivisible {
                rows,
                cols,
                image_h,
                image_w,
            });
        }
        Ok(Self {
            rows,
            cols,
            image_h,
            image_w,
        })
    }

    /// Square `n x n` grid over a square image of side `image`.
    pub fn square(n: usize, image: usize) -> Result<Self, GridError> {
        Self::new(n, n, image, image)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn image_h(&self) -> usize {
        self.image_h
    }

    pub fn image_w(&self) -> usize {
        self.image_w
    }

    pub fn block_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn block_h(&self) -> usize {
        self.image_h / self.rows
    }

    pub fn block_w(&self) -> usize {
        self.image_w / self.cols
    }

    /// Row-major block index of the block containing pixel `(y, x)`.
    pub fn block_of(&self, y: usize, x: usize) -> usize {
        (y / self.block_h()) * self.cols + x / self.block_w()
    }

    /// Pixel rectangle `(y0, x0, y1, x1)` (half-open) covered by a block.
    pub fn block_rect(&self, index: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (index / self.cols, index % self.cols);
        let (bh, bw) = (self.block_h(), self.block_w());
        (r * bh, c * bw, (r + 1) * bh, (c + 1) * bw)
    }

    pub fn label(&self) -> String {
        format!("{}x{} over {}x{}", self.rows, self.cols, self.image_h, self.image_w)
    }
}

/// Set of changed block indices on a particular grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockLabelSet {
    grid: GridSpec,
    changed: BTreeSet<usize>,
}

impl BlockLabelSet {
    pub fn empty(grid: GridSpec) -> Self {
        Self {
            grid,
            changed: BTreeSet::new(),
        }
    }

    pub fn full(grid: GridSpec) -> Self {
        Self {
            grid,
            changed: (0..grid.block_count()).collect(),
        }
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(grid: GridSpec, indices: I) -> Result<Self, GridError> {
        let mut set = Self::empty(grid);
        for i in indices {
            set.insert(i)?;
        }
        Ok(set)
    }

    /// Builds a set from a per-block boolean vector.
    pub fn from_flags(grid: GridSpec, flags: &[bool]) -> Result<Self, GridError> {
        if flags.len() != grid.block_count() {
            return Err(GridError::BadLength {
                got: flags.len(),
                want: grid.block_count(),
            });
        }
        Ok(Self {
            grid,
            changed: flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(),
        })
    }

    pub fn insert(&mut self, index: usize) -> Result<bool, GridError> {
        let count = self.grid.block_count();
        if index >= count {
            return Err(GridError::IndexOutOfRange { index, count });
        }
        Ok(self.changed.insert(index))
    }

    pub fn remove(&mut self, index: usize) -> bool {
        self.changed.remove(&index)
    }

    pub fn contains(&self, index: usize) -> bool {
        self.changed.contains(&index)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.changed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty()
    }

    /// Ascending iterator over changed indices.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.changed.iter().copied()
    }

    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.grid.block_count()];
        for i in self.iter() {
            flags[i] = true;
        }
        flags
    }

    pub fn intersection_len(&self, other: &BlockLabelSet) -> Result<usize, GridError> {
        self.check_same_grid(other)?;
        Ok(self.changed.intersection(&other.changed).count())
    }

    pub fn check_same_grid(&self, other: &BlockLabelSet) -> Result<(), GridError> {
        if self.grid != other.grid {
            return Err(GridError::GridMismatch {
                a: self.grid.label(),
                b: other.grid.label(),
            });
        }
        Ok(())
    }
}

/// Binary per-pixel change map, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChangeMask {
    h: usize,
    w: usize,
    values: Vec<u8>,
}

impl ChangeMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![0; h * w],
        }
    }

    /// Wraps raw bytes; any nonzero byte becomes 1.
    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() != h * w {
            return Err(GridError::BadLength {
                got: bytes.len(),
                want: h * w,
            });
        }
        Ok(Self {
            h,
            w,
            values: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.w + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Pixelwise OR; dimensions must agree.
    pub fn union(&self, other: &ChangeMask) -> Result<ChangeMask, GridError> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(GridError::DimensionMismatch {
                got_h: other.h,
                got_w: other.w,
                want_h: self.h,
                want_w: self.w,
            });
        }
        Ok(ChangeMask {
            h: self.h,
            w: self.w,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a | b).collect(),
        })
    }

    /// Values as 0.0 / 1.0 floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A block is changed iff the fraction of changed pixels inside it exceeds `tau`.
pub fn block_labels_from_mask(mask: &ChangeMask, grid: GridSpec, tau: f64) -> Result<BlockLabelSet, GridError> {
    if !(0.0..1.0).contains(&tau) {
        return Err(GridError::BadThreshold(tau));
    }
    if mask.h != grid.image_h || mask.w != grid.image_w {
        return Err(GridError::DimensionMismatch {
            got_h: mask.h,
            got_w: mask.w,
            want_h: grid.image_h,
            want_w: grid.image_w,
        });
    }
    let mut counts = vec![0usize; grid.block_count()];
    for y in 0..mask.h {
        let row = &mask.values[y * mask.w..(y + 1) * mask.w];
        for (x, &v) in row.iter().enumerate() {
            if v != 0 {
                counts[grid.block_of(y, x)] += 1;
            }
        }
    }
    let area = (grid.block_h() * grid.block_w()) as f64;
    let flags: Vec<bool> = counts.iter().map(|&c| c as f64 / area > tau).collect();
    BlockLabelSet::from_flags(grid, &flags)
}

/// Rasterizes a block set to full image resolution.
pub fn coarse_mask_from_blocks(labels: &BlockLabelSet) -> ChangeMask {
    let grid = labels.grid;
    let mut mask = ChangeMask::zeros(grid.image_h, grid.image_w);
    for b in labels.iter() {
        let (y0, x0, y1, x1) = grid.block_rect(b);
        for y in y0..y1 {
            mask.values[y * grid.image_w + x0..y * grid.image_w + x1].fill(1);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g8() -> GridSpec {
        GridSpec::default()
    }

    // Independent oracle: counts every pixel against every block rectangle.
    fn brute_force_labels(mask: &ChangeMask, grid: GridSpec, tau: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for b in 0..grid.block_count() {
            let r = b / grid.cols();
            let c = b % grid.cols();
            let mut n = 0usize;
            let mut total = 0usize;
            for y in 0..mask.h() {
                for x in 0..mask.w() {
                    if y / grid.block_h() == r && x / grid.block_w() == c {
                        total += 1;
                        n += usize::from(mask.get(y, x));
                    }
                }
            }
            if n as f64 / total as f64 > tau {
                out.push(b);
            }
        }
        out
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(GridSpec::new(0, 8, 64, 64).is_err());
        assert!(GridSpec::new(8, 8, 60, 64).is_err());
        assert_eq!(GridSpec::default().block_count(), 64);
    }

    #[test]
    fn zero_and_full_masks() {
        let zero = ChangeMask::zeros(64, 64);
        assert!(block_labels_from_mask(&zero, g8(), 0.0).unwrap().is_empty());
        let ones = ChangeMask::from_bytes(64, 64, &[1; 64 * 64]).unwrap();
        let full = block_labels_from_mask(&ones, g8(), 0.0).unwrap();
        assert_eq!(full.iter().collect::<Vec<_>>(), (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn single_block_region_maps_to_index_ten() {
        let mut mask = ChangeMask::zeros(64, 64);
        for y in 8..16 {
            for x in 16..24 {
                mask.set(y, x, true);
            }
        }
        let labels = block_labels_from_mask(&mask, g8(), 0.0).unwrap();
        assert_eq!(labels.iter().collect::<Vec<_>>(), brute_force_labels(&mask, g8(), 0.0));
        assert_eq!(labels.iter().collect::<Vec<_>>(), vec![10]);
    }

    #[test]
    fn threshold_is_strict() {
        let mut mask = ChangeMask::zeros(64, 64);
        // 32 of 64 pixels in block 0
        for y in 0..4 {
            for x in 0..8 {
                mask.set(y, x, true);
            }
        }
        assert!(block_labels_from_mask(&mask, g8(), 0.5).unwrap().is_empty());
        assert_eq!(block_labels_from_mask(&mask, g8(), 0.49).unwrap().len(), 1);
        assert_eq!(
            block_labels_from_mask(&mask, g8(), 0.3).unwrap().iter().collect::<Vec<_>>(),
            brute_force_labels(&mask, g8(), 0.3)
        );
        assert!(block_labels_from_mask(&mask, g8(), 1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mask = ChangeMask::zeros(32, 64);
        assert!(matches!(
            block_labels_from_mask(&mask, g8(), 0.0),
            Err(GridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn coarse_mask_of_block_zero() {
        let labels = BlockLabelSet::from_indices(g8(), [0]).unwrap();
        let mask = coarse_mask_from_blocks(&labels);
        for y in 0..64 {
            for x in 0..64 {
                // enclosing-block oracle
                let inside = (y / 8) * 8 + x / 8 == 0;
                assert_eq!(mask.get(y, x), inside, "pixel ({y},{x})");
            }
        }
        assert_eq!(coarse_mask_from_blocks(&BlockLabelSet::empty(g8())).count_ones(), 0);
        assert_eq!(coarse_mask_from_blocks(&BlockLabelSet::full(g8())).count_ones(), 64 * 64);
    }

    #[test]
    fn insert_out_of_range() {
        let mut s = BlockLabelSet::empty(g8());
        assert!(s.insert(64).is_err());
        assert!(s.insert(63).unwrap());
        assert!(!s.insert(63).unwrap());
    }

    #[test]
    fn grid_serde_validates() {
        let ok: GridSpec = serde_json::from_str(r#"{"rows":4,"cols":4,"image_h":64,"image_w":64}"#).unwrap();
        assert_eq!(ok.block_h(), 16);
        assert!(serde_json::from_str::<GridSpec>(r#"{"rows":3,"cols":4,"image_h":64,"image_w":64}"#).is_err());
    }
}
