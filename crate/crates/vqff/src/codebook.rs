//! Codebooks and index maps shared by the local and global quantizers.

use crate::error::{Error, Result};
use crate::math::norm;

/// A K x D matrix of unit code vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    data: Vec<f32>,
}

impl Codebook {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid("codebook dim must be >= 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "codebook data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Codebook { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Codebook { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.dim, "row length disagrees with dim");
        self.data.extend_from_slice(row);
    }

    pub fn extend(&mut self, other: &Codebook) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::invalid(format!(
                "cannot concatenate codebooks of dim {} and {}",
                self.dim, other.dim
            )));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// Check that every row is unit-norm within `tol`.
    pub fn validate_unit_rows(&self, tol: f64) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > tol {
                return Err(Error::invalid(format!(
                    "codebook row {i} has norm {n}, outside 1 +/- {tol}"
                )));
            }
        }
        Ok(())
    }
}

/// H x W grid of codebook indices, stored in place of a feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
}

impl IndexMap {
    pub fn new(height: usize, width: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::invalid(format!(
                "index map length {} does not match {height}x{width}",
                indices.len()
            )));
        }
        Ok(IndexMap {
            height,
            width,
            indices,
        })
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }

    /// Every index must fall below `k`, and when `require_all_used` every
    /// entry in `[0, k)` must be referenced.
    pub fn validate_against(&self, k: usize, require_all_used: bool) -> Result<()> {
        let mut used = vec![false; k];
        for &ix in &self.indices {
            let ix = ix as usize;
            if ix >= k {
                return Err(Error::invalid(format!("index {ix} out of range 0..{k}")));
            }
            used[ix] = true;
        }
        if require_all_used && !used.iter().all(|&u| u) {
            return Err(Error::invalid("codebook has unreferenced entries"));
        }
        Ok(())
    }
}

/// Codebook produced by local quantization of one (image, scale) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCodebook {
    pub entries: Codebook,
    pub image_id: String,
    pub scale_id: String,
    /// Pixel count behind each entry.
    pub cell_sizes: Vec<usize>,
}
