//! Dense row-major H x W x C feature grids with an optional validity mask.
//!
//! Used for perspective-view feature maps (rows = v, cols = u), BEV feature
//! maps (rows = x cells, cols = y cells), and pseudo-label grids where the
//! mask marks supervised cells.

use crate::numerics::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {h}x{w}x{c}")]
    EmptyGrid { h: usize, w: usize, c: usize },
    #[error("data length {got} does not match {h}x{w}x{c}")]
    LengthMismatch { got: usize, h: usize, w: usize, c: usize },
    #[error("mask length {got} does not match {h}x{w} cells")]
    MaskMismatch { got: usize, h: usize, w: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
    /// Per-cell validity; `None` means every cell is valid.
    mask: Option<Vec<bool>>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(GridError::EmptyGrid { h, w, c });
        }
        if data.len() != h * w * c {
            return Err(GridError::LengthMismatch { got: data.len(), h, w, c });
        }
        Ok(FeatureGrid { h, w, c, data, mask: None })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self, GridError> {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, GridError> {
        if mask.len() != self.h * self.w {
            return Err(GridError::MaskMismatch { got: mask.len(), h: self.h, w: self.w });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        match &self.mask {
            None => true,
            Some(m) => m[row * self.w + col],
        }
    }

    /// Feature vector of one cell.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.w + col) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.w + col) * self.c;
        &mut self.data[base..base + self.c]
    }

    /// Bilinear sample at continuous coordinates (u along width, v along
    /// height). Outside `[0, W-1] x [0, H-1]` returns zeros and flags it.
    pub fn bilinear(&self, u: f64, v: f64) -> (Vec<f64>, bool) {
        if !(0.0..=(self.w - 1) as f64).contains(&u) || !(0.0..=(self.h - 1) as f64).contains(&v)
        {
            return (vec![0.0; self.c], true);
        }
        let x0 = (u.floor() as usize).min(self.w - 1);
        let y0 = (v.floor() as usize).min(self.h - 1);
        let du = u - x0 as f64;
        let dv = v - y0 as f64;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let mut out = vec![0.0; self.c];
        for (ch, o) in out.iter_mut().enumerate() {
            let g00 = self.data[(y0 * self.w + x0) * self.c + ch];
            let g01 = self.data[(y0 * self.w + x1) * self.c + ch];
            let g10 = self.data[(y1 * self.w + x0) * self.c + ch];
            let g11 = self.data[(y1 * self.w + x1) * self.c + ch];
            *o = (1.0 - dv) * ((1.0 - du) * g00 + du * g01)
                + dv * ((1.0 - du) * g10 + du * g11);
        }
        (out, false)
    }

    /// View as a `[H*W, C]` tensor (for tape consumption as a matrix).
    pub fn to_tensor_rows(&self) -> Tensor {
        Tensor::new(vec![self.h * self.w, self.c], self.data.clone())
            .expect("grid dimensions are validated at construction")
    }

    /// View as an `[H, W, C]` tensor (for tape bilinear sampling).
    pub fn to_tensor_3d(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w, self.c], self.data.clone())
            .expect("grid dimensions are validated at construction")
    }

    /// Builds a grid from a `[H, W, C]` or `[H*W, C]` tensor.
    pub fn from_tensor(t: &Tensor, h: usize, w: usize, c: usize) -> Result<Self, GridError> {
        if t.numel() != h * w * c {
            return Err(GridError::LengthMismatch { got: t.numel(), h, w, c });
        }
        Self::new(h, w, c, t.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_reproduce_cell_values() {
        let g = FeatureGrid::new(3, 5, 2, (0..30).map(|i| i as f64).collect()).unwrap();
        let (v, oob) = g.bilinear(3.0, 2.0);
        assert!(!oob);
        assert_eq!(v, g.at(2, 3));
    }

    #[test]
    fn midpoint_averages_four_neighbors() {
        let mut g = FeatureGrid::zeros(2, 2, 1).unwrap();
        g.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let (v, oob) = g.bilinear(0.5, 0.5);
        assert!(!oob);
        assert_eq!(v, vec![2.5]);
    }

    #[test]
    fn out_of_bounds_returns_zeros_with_flag() {
        let g = FeatureGrid::new(2, 2, 3, vec![7.0; 12]).unwrap();
        let (v, oob) = g.bilinear(-0.001, 0.5);
        assert!(oob);
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn mask_tracks_cell_validity() {
        let g = FeatureGrid::zeros(2, 2, 1)
            .unwrap()
            .with_mask(vec![true, false, false, true])
            .unwrap();
        assert!(g.is_valid(0, 0));
        assert!(!g.is_valid(0, 1));
        assert!(!g.is_valid(1, 0));
        assert!(g.is_valid(1, 1));
        assert!(FeatureGrid::zeros(2, 2, 1).unwrap().is_valid(1, 1));
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(FeatureGrid::new(0, 2, 1, vec![]).is_err());
        assert!(FeatureGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureGrid::zeros(2, 2, 1).unwrap().with_mask(vec![true; 3]).is_err());
    }
}
