//! Camera-to-BEV lifting network.
//!
//! Per camera: a small per-pixel perceptron predicts a depth distribution
//! over uniform bins, the outer product with the pixel's feature vector forms
//! frustum samples, and every sample is scatter-summed into the BEV cell its
//! precomputed 3D position falls in. A two-block residual convolutional
//! encoder then mixes the pooled grid. Everything runs on the autodiff tape,
//! so gradients flow to the image features and the depth logits.

use thiserror::Error;

use crate::featprov::Scale;
use crate::geometry::{scaled_extent, BevGridSpec, CameraModel, GeometryError};
use crate::numerics::{NumericsError, Tape, Var};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("bad depth bins: {0}")]
    BadBins(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Uniform depth discretization over `[min_depth, max_depth)` meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBins {
    pub d: usize,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl DepthBins {
    pub fn new(d: usize, min_depth: f64, max_depth: f64) -> Result<Self, LiftError> {
        if d < 2 || !(min_depth > 0.0 && max_depth > min_depth) {
            return Err(LiftError::BadBins(format!(
                "{d} bins over [{min_depth}, {max_depth}]"
            )));
        }
        Ok(DepthBins {
            d,
            min_depth,
            max_depth,
        })
    }

    pub fn desk_default() -> Self {
        DepthBins {
            d: 32,
            min_depth: 1.0,
            max_depth: 60.0,
        }
    }

    pub fn width(&self) -> f64 {
        (self.max_depth - self.min_depth) / self.d as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min_depth + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.center(i)).collect()
    }

    /// Bin containing `depth`, or None outside `[min_depth, max_depth)`.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if depth < self.min_depth || depth >= self.max_depth || depth.is_nan() {
            return None;
        }
        Some((((depth - self.min_depth) / self.width()) as usize).min(self.d - 1))
    }
}

/// Depth-head parameters: `w1 [C_in, hidden]`, `b1 [hidden]`,
/// `w2 [hidden, D]`, `b2 [D]`.
#[derive(Debug, Clone, Copy)]
pub struct DepthHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// One residual block: `x + conv2(relu(conv1(x)))`, channels preserved.
/// Weights are `[3, 3, C, C]`, biases `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct BevEncoderVars {
    pub blocks: Vec<ConvBlockVars>,
}

#[derive(Debug, Clone)]
pub struct LiftingVars {
    pub depth: DepthHeadVars,
    pub encoder: BevEncoderVars,
}

/// Hook refining the depth distribution after the softmax. Implementations
/// must keep each pixel's row summing to 1.
pub type RefineFn = fn(&mut Tape, Var) -> Result<Var, NumericsError>;

#[derive(Debug, Clone, Copy)]
pub struct LiftingConfig {
    pub bins: DepthBins,
    /// Pyramid level the lifting consumes.
    pub scale: Scale,
    /// Depth-head hidden width.
    pub hidden: usize,
    /// Optional depth refinement (identity when None).
    pub refine: Option<RefineFn>,
}

impl Default for LiftingConfig {
    fn default() -> Self {
        LiftingConfig {
            bins: DepthBins::desk_default(),
            scale: Scale::Eighth,
            hidden: 16,
            refine: None,
        }
    }
}

/// Per-pixel depth distribution: 2-layer perceptron then softmax over bins.
/// `pv` is `[N, C_in]`; the result is `[N, D]` with rows summing to 1.
pub fn depth_head(
    tape: &mut Tape,
    pv: Var,
    vars: &DepthHeadVars,
    refine: Option<RefineFn>,
) -> Result<Var, NumericsError> {
    let h = tape.matmul(pv, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, vars.w2)?;
    let logits = tape.add_bias(logits, vars.b2)?;
    let p = tape.softmax(logits, 1)?;
    match refine {
        Some(f) => f(tape, p),
        None => Ok(p),
    }
}

/// Outer-product lifting: frustum feature of pixel n at bin d is
/// `depth[n, d] * pv[n, :]`. Returns `[N*D, C]` with row `n*D + d`, ready for
/// pooling against positions in the same order.
pub fn lift(tape: &mut Tape, pv: Var, depth: Var) -> Result<Var, NumericsError> {
    let f = tape.outer_lift(depth, pv)?;
    let n = tape.shape(depth)[0];
    let d = tape.shape(depth)[1];
    let c = tape.shape(pv)[1];
    tape.reshape(f, &[n * d, c])
}

/// Ego-frame 3D position of every (pixel, bin) frustum sample of one camera,
/// pixel-major (image row-major) then bin, matching [`lift`] output rows.
pub fn frustum_positions(
    cam: &CameraModel,
    scale: Scale,
    bins: &DepthBins,
) -> Result<Vec<[f64; 3]>, GeometryError> {
    let s = scale.factor();
    let h = scaled_extent(cam.height, s);
    let w = scaled_extent(cam.width, s);
    let centers = bins.centers();
    let mut out = Vec::with_capacity(h * w * bins.d);
    for row in 0..h {
        for col in 0..w {
            let u = (col as f64 + 0.5) / s - 0.5;
            let v = (row as f64 + 0.5) / s - 0.5;
            for &depth in &centers {
                let p = cam.unproject(u, v, depth)?;
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    Ok(out)
}

/// BEV cell (flat index) of each sample position, None outside the grid.
pub fn frustum_cells(positions: &[[f64; 3]], grid: &BevGridSpec) -> Vec<Option<usize>> {
    positions
        .iter()
        .map(|p| {
            grid.cell_of(p[0], p[1])
                .map(|(ix, iy)| grid.flat_index(ix, iy))
        })
        .collect()
}

/// One camera's frustum samples ready for pooling.
pub struct Frustum {
    /// `[H*W*D, C]` lifted features.
    pub feat: Var,
    /// Target cell per sample row.
    pub cells: Vec<Option<usize>>,
}

/// Scatter-sum all cameras' frustum samples into the BEV grid. Cameras are
/// processed in slice order and samples in row order, so accumulation is
/// bit-reproducible. Returns `[cells, C]`.
pub fn bev_pool(
    tape: &mut Tape,
    frustums: &[Frustum],
    grid: &BevGridSpec,
) -> Result<Var, NumericsError> {
    let feats: Vec<Var> = frustums.iter().map(|f| f.feat).collect();
    let x = tape.concat_rows(&feats)?;
    let idx: Vec<Option<usize>> = frustums
        .iter()
        .flat_map(|f| f.cells.iter().copied())
        .collect();
    tape.pool_by_index(x, &idx, grid.n_cells())
}

/// Residual convolutional encoder over the pooled grid `[H, W, C]`. With all
/// weights zero each block is exactly the identity.
pub fn bev_encode(tape: &mut Tape, x: Var, vars: &BevEncoderVars) -> Result<Var, NumericsError> {
    let mut cur = x;
    for b in &vars.blocks {
        let h = tape.conv3x3(cur, b.w1, b.b1)?;
        let h = tape.relu(h)?;
        let h = tape.conv3x3(h, b.w2, b.b2)?;
        cur = tape.add(cur, h)?;
    }
    Ok(cur)
}

/// Everything the lifting stage hands downstream.
pub struct LiftOutput {
    /// Encoded BEV grid `[nx, ny, C]`.
    pub bev: Var,
    /// Pre-encoder pooled grid `[cells, C]` (kept for inspection).
    pub pooled: Var,
    /// Per-camera depth distributions `[N, D]` (for depth supervision).
    pub depths: Vec<Var>,
}

/// Full per-frame BEV construction. `pv[i]` is camera i's feature tensor
/// `[Hs*Ws, C]` at the configured scale.
pub fn lift_frame(
    tape: &mut Tape,
    cams: &[CameraModel],
    pv: &[Var],
    vars: &LiftingVars,
    cfg: &LiftingConfig,
    grid: &BevGridSpec,
) -> Result<LiftOutput, LiftError> {
    if cams.is_empty() || cams.len() != pv.len() {
        return Err(LiftError::Mismatch(format!(
            "{} cameras with {} feature tensors",
            cams.len(),
            pv.len()
        )));
    }
    let mut frustums = Vec::with_capacity(cams.len());
    let mut depths = Vec::with_capacity(cams.len());
    let mut channels = 0;
    for (cam, &p) in cams.iter().zip(pv) {
        let n = scaled_extent(cam.height, cfg.scale.factor())
            * scaled_extent(cam.width, cfg.scale.factor());
        if tape.shape(p)[0] != n {
            return Err(LiftError::Mismatch(format!(
                "camera expects {n} pixels, features have {}",
                tape.shape(p)[0]
            )));
        }
        channels = tape.shape(p)[1];
        let pd = depth_head(tape, p, &vars.depth, cfg.refine)?;
        let feat = lift(tape, p, pd)?;
        let positions = frustum_positions(cam, cfg.scale, &cfg.bins)?;
        let cells = frustum_cells(&positions, grid);
        debug_assert_eq!(cells.len(), tape.shape(feat)[0]);
        frustums.push(Frustum { feat, cells });
        depths.push(pd);
    }
    let pooled = bev_pool(tape, &frustums, grid)?;
    let grid3 = tape.reshape(pooled, &[grid.nx, grid.ny, channels])?;
    let bev = bev_encode(tape, grid3, &vars.encoder)?;
    Ok(LiftOutput {
        bev,
        pooled,
        depths,
    })
}
