//! Anchor-based query decoder over BEV and PV features.
//!
//! Each query is an 11-D box anchor plus an instance feature. Blocks run
//! temporal cross-attention (against propagated last-frame queries), self
//! attention, BEV then PV deformable aggregation at box keypoints, a feed
//! forward layer, and anchor refinement. The anchor embedding enters the
//! attention inputs and prediction heads additively; the residual stream
//! carries the instance feature alone, so zeroing every output projection
//! makes the whole block an exact identity on features and anchors.

use thiserror::Error;

use crate::featprov::Scale;
use crate::geometry::{BevGridSpec, Box3, CameraModel, GeometryError};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub const ANCHOR_DIM: usize = 11;
/// Center plus six face centers.
pub const N_FIXED_KEYPOINTS: usize = 7;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("bad decoder config: {0}")]
    BadConfig(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Box anchor: center, log dimensions, yaw vector, velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub log_w: f64,
    pub log_h: f64,
    pub log_l: f64,
    pub sin_yaw: f64,
    pub cos_yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl Anchor {
    pub fn from_array(a: [f64; ANCHOR_DIM]) -> Self {
        Anchor {
            x: a[0],
            y: a[1],
            z: a[2],
            log_w: a[3],
            log_h: a[4],
            log_l: a[5],
            sin_yaw: a[6],
            cos_yaw: a[7],
            vx: a[8],
            vy: a[9],
            vz: a[10],
        }
    }

    pub fn to_array(self) -> [f64; ANCHOR_DIM] {
        [
            self.x,
            self.y,
            self.z,
            self.log_w,
            self.log_h,
            self.log_l,
            self.sin_yaw,
            self.cos_yaw,
            self.vx,
            self.vy,
            self.vz,
        ]
    }

    pub fn yaw(&self) -> f64 {
        self.sin_yaw.atan2(self.cos_yaw)
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.vx, self.vy, self.vz]
    }

    pub fn to_box3(self) -> Box3 {
        Box3 {
            center: self.center(),
            width: self.log_w.exp(),
            length: self.log_l.exp(),
            height: self.log_h.exp(),
            yaw: self.yaw(),
        }
    }

    /// Yaw vector back on the unit circle (pointing +x if degenerate).
    pub fn renormalized(mut self) -> Self {
        let n = self.sin_yaw.hypot(self.cos_yaw);
        if n > 1e-12 {
            self.sin_yaw /= n;
            self.cos_yaw /= n;
        } else {
            self.sin_yaw = 0.0;
            self.cos_yaw = 1.0;
        }
        self
    }
}

/// A detached query as handed to and from the tracker.
#[derive(Debug, Clone)]
pub struct ObjectQuery {
    pub anchor: Anchor,
    pub feature: Vec<f64>,
    pub internal_id: u64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    /// Fresh queries entering the non-temporal block (M).
    pub n_queries: usize,
    /// Propagated-query budget (N_t).
    pub n_temporal: usize,
    /// Detections joining the temporal blocks after the first block.
    pub top_k: usize,
    /// Instance-feature width (C).
    pub embed: usize,
    /// Temporal blocks after the single non-temporal block.
    pub temporal_layers: usize,
    /// Learnable keypoints per query on top of the 7 fixed ones.
    pub n_learn_keypoints: usize,
    pub n_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_queries: 24,
            n_temporal: 16,
            top_k: 8,
            embed: 32,
            temporal_layers: 5,
            n_learn_keypoints: 6,
            n_classes: crate::scene::N_CLASSES,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.n_queries == 0
            || self.embed == 0
            || self.n_classes == 0
            || self.top_k == 0
            || self.top_k > self.n_queries
            || self.n_temporal > self.n_queries
        {
            return Err(DecodeError::BadConfig(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn keypoints_per_query(&self) -> usize {
        N_FIXED_KEYPOINTS + self.n_learn_keypoints
    }

    pub fn n_layers(&self) -> usize {
        1 + self.temporal_layers
    }
}

/// Two-layer perceptron embedding the 11-D anchor into the feature space:
/// `w1 [11, C]`, `b1 [C]`, `w2 [C, C]`, `b2 [C]`.
#[derive(Debug, Clone, Copy)]
pub struct AnchorEncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Single-head scaled dot-product attention: all square `[C, C]` with `[C]`
/// biases.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Deformable-aggregation parameters. `w_attn [C, n_weights]` predicts the
/// per-sample attention logits; `w_out [C_samples, C]` projects the fused
/// sample back to the feature width. The output projection deliberately has
/// no bias so that a query whose samples are all out of view stays exactly
/// unchanged.
#[derive(Debug, Clone, Copy)]
pub struct AggVars {
    pub w_attn: Var,
    pub b_attn: Var,
    pub w_out: Var,
}

/// Feed-forward block `w1 [C, 2C]`, `b1 [2C]`, `w2 [2C, C]`, `b2 [C]`.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Refinement heads: box residual `[C, 11]`, class logits `[C, n_classes]`,
/// quality logits `[C, 2]` (yawness, centerness).
#[derive(Debug, Clone, Copy)]
pub struct RefineVars {
    pub w_box: Var,
    pub b_box: Var,
    pub w_cls: Var,
    pub b_cls: Var,
    pub w_quality: Var,
    pub b_quality: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    /// Present on temporal blocks only.
    pub temporal: Option<AttnVars>,
    pub self_attn: AttnVars,
    /// Learned-keypoint head `[C, K_learn * 3]`, `[K_learn * 3]`; None when
    /// the config has no learnable keypoints.
    pub keypoint: Option<(Var, Var)>,
    pub bev: AggVars,
    pub pv: AggVars,
    pub ffn: FfnVars,
    pub refine: RefineVars,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub anchor_enc: AnchorEncoderVars,
    /// One element per block: `layers[0]` non-temporal, the rest temporal.
    pub layers: Vec<LayerVars>,
}

/// Propagated last-frame queries acting as temporal keys/values and as the
/// queries joined by the current top-k detections.
#[derive(Debug, Clone)]
pub struct MemoryInput {
    /// `[N_mem, 11]`.
    pub anchors: Var,
    /// `[N_mem, C]`.
    pub features: Var,
    pub ids: Vec<u64>,
}

/// Where a temporal-set query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryOrigin {
    /// Propagated from the previous frame with this internal ID.
    Propagated(u64),
    /// Born this frame from the non-temporal block (index into its queries).
    Fresh(usize),
}

/// Per-block outputs kept for deep supervision.
pub struct LayerOutput {
    /// `[Mi, 11]` refined anchors (yaw vector renormalized).
    pub anchors: Var,
    /// `[Mi, C]` instance features after the block.
    pub features: Var,
    /// `[Mi, n_classes]`.
    pub class_logits: Var,
    /// `[Mi, 2]` yawness and centerness logits.
    pub quality: Var,
    /// Detached per-query confidence: max class sigmoid.
    pub confidence: Vec<f64>,
}

pub struct DecodeOutput {
    /// One entry per block; entry 0 covers the fresh query set, the rest the
    /// temporal set.
    pub layers: Vec<LayerOutput>,
    /// Origin of each temporal-set row (empty if there are no temporal
    /// blocks).
    pub origins: Vec<QueryOrigin>,
    /// Fresh-set rows promoted into the temporal set, ascending.
    pub top_k_indices: Vec<usize>,
}

impl DecodeOutput {
    pub fn final_layer(&self) -> &LayerOutput {
        self.layers.last().expect("decoder always runs >= 1 block")
    }
}

/// Deterministic initial anchors: a near-square lattice over the grid range,
/// unit boxes at z = 0 facing +x, zero velocity.
pub fn init_anchors(cfg: &DecoderConfig, grid: &BevGridSpec) -> Tensor {
    let m = cfg.n_queries;
    let mut rows = (m as f64).sqrt().floor() as usize;
    while rows > 1 && !m.is_multiple_of(rows) {
        rows -= 1;
    }
    let rows = rows.max(1);
    let cols = m / rows;
    let mut data = Vec::with_capacity(m * ANCHOR_DIM);
    for i in 0..m {
        let (r, c) = (i / cols, i % cols);
        let x = -grid.x_range + (2.0 * grid.x_range) * (r as f64 + 0.5) / rows as f64;
        let y = -grid.y_range + (2.0 * grid.y_range) * (c as f64 + 0.5) / cols as f64;
        data.extend_from_slice(&[x, y, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }
    Tensor::new(vec![m, ANCHOR_DIM], data).expect("valid anchor lattice")
}

/// Anchor embedding `[M, C]` from anchors `[M, 11]`.
pub fn encode_anchor(
    tape: &mut Tape,
    anchors: Var,
    vars: &AnchorEncoderVars,
) -> Result<Var, NumericsError> {
    let h = tape.matmul(anchors, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, vars.w2)?;
    tape.add_bias(out, vars.b2)
}

/// Ego-frame keypoints of each query: 7 fixed box points (center + face
/// centers) plus learnable offsets predicted from the fused feature, all in
/// box-normalized coordinates (offset 1 reaches the face).
pub struct KeypointSet {
    /// `[M * per_query, 3]`, query-major.
    pub pts: Var,
    pub per_query: usize,
}

pub fn gen_query_keypoints(
    tape: &mut Tape,
    anchors: Var,
    fused: Var,
    keypoint_head: Option<(Var, Var)>,
    cfg: &DecoderConfig,
) -> Result<KeypointSet, NumericsError> {
    let m = tape.shape(anchors)[0];
    let fixed: [[f64; 3]; N_FIXED_KEYPOINTS] = [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let fixed_flat: Vec<f64> = fixed.iter().flatten().copied().collect();
    let fixed_row: Vec<f64> = (0..m).flat_map(|_| fixed_flat.iter().copied()).collect();
    let fixed_leaf = tape.leaf(Tensor::new(vec![m, N_FIXED_KEYPOINTS * 3], fixed_row)?);
    let offsets = match (keypoint_head, cfg.n_learn_keypoints) {
        (Some((w, b)), k) if k > 0 => {
            let learned = tape.matmul(fused, w)?;
            let learned = tape.add_bias(learned, b)?;
            tape.concat_cols(&[fixed_leaf, learned])?
        }
        _ => fixed_leaf,
    };
    let pts = tape.gen_keypoints(anchors, offsets)?;
    let per_query = tape.shape(pts)[0] / m;
    Ok(KeypointSet { pts, per_query })
}

/// Continuous BEV sample coordinates of 3D points: for `bilinear_sample`
/// over a `[nx, ny, C]` grid the row axis is x cells and the column axis is
/// y cells, so uv = (gy, gx).
fn bev_sample_coords(tape: &mut Tape, pts: Var, grid: &BevGridSpec) -> Result<Var, NumericsError> {
    let n = tape.shape(pts)[0];
    let (dx, dy) = grid.cell_size();
    let yx = tape.gather_cols(pts, &[1, 0])?;
    let sc = tape.leaf(Tensor::from_fn(&[n, 2], |i| {
        if i % 2 == 0 {
            1.0 / dy
        } else {
            1.0 / dx
        }
    }));
    let scaled = tape.mul(yx, sc)?;
    // Cell ix has center at -range + (ix + 0.5) * d, so gx = (x + range) / dx - 0.5.
    let off = tape.leaf(Tensor::new(
        vec![2],
        vec![grid.y_range / dy - 0.5, grid.x_range / dx - 0.5],
    )?);
    tape.add_bias(scaled, off)
}

/// Softmax attention weights `[M, n]` predicted from the fused feature.
fn agg_weights(tape: &mut Tape, fused: Var, vars: &AggVars) -> Result<Var, NumericsError> {
    let logits = tape.matmul(fused, vars.w_attn)?;
    let logits = tape.add_bias(logits, vars.b_attn)?;
    tape.softmax(logits, 1)
}

/// Weighted sum of per-query sample groups: `samples [M*K, C]` fused with
/// `weights [M, K]` into `[M, C]`.
fn weighted_pool(
    tape: &mut Tape,
    samples: Var,
    weights: Var,
    per_query: usize,
) -> Result<Var, NumericsError> {
    let m = tape.shape(weights)[0];
    let col = tape.reshape(weights, &[m * per_query, 1])?;
    let weighted = tape.mul_col(samples, col)?;
    tape.sum_row_groups(weighted, per_query)
}

/// BEV deformable aggregation: bilinear-sample the grid at every keypoint,
/// fuse with predicted softmax weights, project, and add residually.
/// Keypoints outside the grid contribute zero.
pub fn bev_deform_agg(
    tape: &mut Tape,
    features: Var,
    fused: Var,
    kps: &KeypointSet,
    bev: Var,
    grid: &BevGridSpec,
    vars: &AggVars,
) -> Result<Var, NumericsError> {
    let uv = bev_sample_coords(tape, kps.pts, grid)?;
    let samples = tape.bilinear_sample(bev, uv)?;
    let weights = agg_weights(tape, fused, vars)?;
    let pooled = weighted_pool(tape, samples, weights, kps.per_query)?;
    let out = tape.matmul(pooled, vars.w_out)?;
    tape.add(features, out)
}

/// PV deformable aggregation: project every keypoint into every camera at
/// every scale, bilinear-sample, fuse the keypoint x view x scale paths with
/// one softmax, project, add residually. Out-of-view samples contribute
/// zero, so a query invisible everywhere passes through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn pv_deform_agg(
    tape: &mut Tape,
    features: Var,
    fused: Var,
    kps: &KeypointSet,
    pv: &[Vec<Var>],
    cams: &[CameraModel],
    scales: &[Scale],
    vars: &AggVars,
) -> Result<Var, NumericsError> {
    let k = kps.per_query;
    let n_paths = cams.len() * scales.len();
    let weights = agg_weights(tape, fused, vars)?;
    if tape.shape(weights)[1] != k * n_paths {
        return Err(NumericsError::ShapeMismatch {
            op: "pv_deform_agg",
            details: format!(
                "attention head predicts {} weights, need {} keypoints x {} paths",
                tape.shape(weights)[1],
                k,
                n_paths
            ),
        });
    }
    let mut pooled: Option<Var> = None;
    for (ci, cam) in cams.iter().enumerate() {
        for (si, scale) in scales.iter().enumerate() {
            let params = cam.pinhole_params(scale.factor());
            let uv = tape.project_camera(kps.pts, &params)?;
            let samples = tape.bilinear_sample(pv[ci][si], uv)?;
            let path = ci * scales.len() + si;
            let idx: Vec<usize> = (0..k).map(|q| path * k + q).collect();
            let w_path = tape.gather_cols(weights, &idx)?;
            let part = weighted_pool(tape, samples, w_path, k)?;
            pooled = Some(match pooled {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
        }
    }
    let pooled = pooled.ok_or(NumericsError::ShapeMismatch {
        op: "pv_deform_agg",
        details: "no cameras or scales".into(),
    })?;
    let out = tape.matmul(pooled, vars.w_out)?;
    tape.add(features, out)
}

/// Single-head scaled dot-product attention. Queries and keys carry the
/// anchor embedding; values come from the plain features.
fn attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    vars: &AttnVars,
) -> Result<Var, NumericsError> {
    let c = tape.shape(q_in)[1];
    let q = tape.matmul(q_in, vars.wq)?;
    let q = tape.add_bias(q, vars.bq)?;
    let kk = tape.matmul(k_in, vars.wk)?;
    let kk = tape.add_bias(kk, vars.bk)?;
    let v = tape.matmul(v_in, vars.wv)?;
    let v = tape.add_bias(v, vars.bv)?;
    let logits = tape.matmul_tb(q, kk)?;
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt())?;
    let att = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(att, v)?;
    let out = tape.matmul(mixed, vars.wo)?;
    tape.add_bias(out, vars.bo)
}

fn ffn(tape: &mut Tape, features: Var, vars: &FfnVars) -> Result<Var, NumericsError> {
    let h = tape.matmul(features, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, vars.w2)?;
    let out = tape.add_bias(out, vars.b2)?;
    tape.add(features, out)
}

/// Anchor refinement: add the predicted 11-D residual, put the yaw vector
/// back on the unit circle, and read out class and quality logits.
pub fn refine(
    tape: &mut Tape,
    anchors: Var,
    fused: Var,
    vars: &RefineVars,
) -> Result<(Var, Var, Var), NumericsError> {
    let delta = tape.matmul(fused, vars.w_box)?;
    let delta = tape.add_bias(delta, vars.b_box)?;
    let raw = tape.add(anchors, delta)?;
    // Renormalize (sin, cos). The epsilon vanishes for unit inputs, so zero
    // residuals keep the anchor bit-identical.
    let m = tape.shape(raw)[0];
    let sc = tape.gather_cols(raw, &[6, 7])?;
    let sq = tape.mul(sc, sc)?;
    let n2 = tape.sum_rows(sq)?;
    let n2 = tape.add_scalar(n2, 1e-24)?;
    let norm = tape.sqrt(n2)?;
    let ones = tape.leaf(Tensor::full(&[m, 1], 1.0));
    let inv = tape.div(ones, norm)?;
    let sc = tape.mul_col(sc, inv)?;
    let head = tape.gather_cols(raw, &[0, 1, 2, 3, 4, 5])?;
    let tail = tape.gather_cols(raw, &[8, 9, 10])?;
    let new_anchors = tape.concat_cols(&[head, sc, tail])?;

    let cls = tape.matmul(fused, vars.w_cls)?;
    let cls = tape.add_bias(cls, vars.b_cls)?;
    let quality = tape.matmul(fused, vars.w_quality)?;
    let quality = tape.add_bias(quality, vars.b_quality)?;
    Ok((new_anchors, cls, quality))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Detached per-query confidence: max class sigmoid.
fn confidences(tape: &Tape, class_logits: Var) -> Vec<f64> {
    let t = tape.value(class_logits);
    let (m, k) = (t.dim(0), t.dim(1));
    (0..m)
        .map(|i| {
            t.data()[i * k..(i + 1) * k]
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        })
        .map(sigmoid)
        .collect()
}

struct BlockInputs<'a> {
    bev: Var,
    grid: &'a BevGridSpec,
    pv: &'a [Vec<Var>],
    cams: &'a [CameraModel],
    scales: &'a [Scale],
}

/// One decoder block. `memory_kv` carries the temporal keys/values (fused
/// features and plain features of the propagated queries).
#[allow(clippy::too_many_arguments)]
fn run_block(
    tape: &mut Tape,
    anchors: Var,
    mut features: Var,
    memory_kv: Option<(Var, Var)>,
    inputs: &BlockInputs,
    vars: &LayerVars,
    enc: &AnchorEncoderVars,
    cfg: &DecoderConfig,
) -> Result<(Var, Var, Var, Var), NumericsError> {
    let embed = encode_anchor(tape, anchors, enc)?;
    if let (Some(attn_vars), Some((kv_fused, kv_plain))) = (&vars.temporal, memory_kv) {
        let fused = tape.add(features, embed)?;
        let out = attention(tape, fused, kv_fused, kv_plain, attn_vars)?;
        features = tape.add(features, out)?;
    }
    let fused = tape.add(features, embed)?;
    let out = attention(tape, fused, fused, features, &vars.self_attn)?;
    features = tape.add(features, out)?;

    let fused = tape.add(features, embed)?;
    let kps = gen_query_keypoints(tape, anchors, fused, vars.keypoint, cfg)?;
    features = bev_deform_agg(tape, features, fused, &kps, inputs.bev, inputs.grid, &vars.bev)?;
    let fused = tape.add(features, embed)?;
    features = pv_deform_agg(
        tape,
        features,
        fused,
        &kps,
        inputs.pv,
        inputs.cams,
        inputs.scales,
        &vars.pv,
    )?;
    features = ffn(tape, features, &vars.ffn)?;
    let fused = tape.add(features, embed)?;
    let (anchors, cls, quality) = refine(tape, anchors, fused, &vars.refine)?;
    Ok((anchors, features, cls, quality))
}

/// Indices of the k most confident queries, ascending, ties kept in query
/// order.
fn top_k_indices(conf: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..conf.len()).collect();
    idx.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
    let mut top: Vec<usize> = idx.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Run the full block sequence for one frame: a non-temporal block over the
/// fresh queries, then temporal blocks over the propagated queries joined by
/// the top-k detections.
#[allow(clippy::too_many_arguments)]
pub fn decode_frame(
    tape: &mut Tape,
    init_anchors: Var,
    init_features: Var,
    bev: Var,
    grid: &BevGridSpec,
    pv: &[Vec<Var>],
    cams: &[CameraModel],
    scales: &[Scale],
    memory: Option<&MemoryInput>,
    vars: &DecoderVars,
    cfg: &DecoderConfig,
) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    if vars.layers.len() != cfg.n_layers() {
        return Err(DecodeError::Mismatch(format!(
            "{} layer parameter sets for {} blocks",
            vars.layers.len(),
            cfg.n_layers()
        )));
    }
    if cams.is_empty() || scales.is_empty() || pv.len() != cams.len() {
        return Err(DecodeError::Mismatch(format!(
            "{} cameras, {} feature pyramids",
            cams.len(),
            pv.len()
        )));
    }
    for maps in pv {
        if maps.len() != scales.len() {
            return Err(DecodeError::Mismatch(format!(
                "camera pyramid has {} scales, expected {}",
                maps.len(),
                scales.len()
            )));
        }
    }
    if let Some(mem) = memory {
        if mem.ids.len() != tape.shape(mem.anchors)[0]
            || mem.ids.len() != tape.shape(mem.features)[0]
            || mem.ids.len() > cfg.n_temporal
        {
            return Err(DecodeError::Mismatch(format!(
                "memory holds {} ids for anchors {:?} and features {:?} (N_t = {})",
                mem.ids.len(),
                tape.shape(mem.anchors),
                tape.shape(mem.features),
                cfg.n_temporal
            )));
        }
    }

    let inputs = BlockInputs {
        bev,
        grid,
        pv,
        cams,
        scales,
    };

    // Non-temporal block over the fresh queries.
    let (anchors, features, cls, quality) = run_block(
        tape,
        init_anchors,
        init_features,
        None,
        &inputs,
        &vars.layers[0],
        &vars.anchor_enc,
        cfg,
    )?;
    let conf = confidences(tape, cls);
    let mut layers = vec![LayerOutput {
        anchors,
        features,
        class_logits: cls,
        quality,
        confidence: conf.clone(),
    }];

    let top = top_k_indices(&conf, cfg.top_k.min(conf.len()));
    if cfg.temporal_layers == 0 {
        return Ok(DecodeOutput {
            layers,
            origins: Vec::new(),
            top_k_indices: top,
        });
    }

    // Assemble the temporal set: propagated queries, then promoted fresh
    // detections.
    let top_anchors = tape.gather_rows(anchors, &top)?;
    let top_features = tape.gather_rows(features, &top)?;
    let (mut cur_anchors, mut cur_features, origins) = match memory {
        Some(mem) if !mem.ids.is_empty() => {
            let a = tape.concat_rows(&[mem.anchors, top_anchors])?;
            let f = tape.concat_rows(&[mem.features, top_features])?;
            let mut o: Vec<QueryOrigin> =
                mem.ids.iter().map(|&id| QueryOrigin::Propagated(id)).collect();
            o.extend(top.iter().map(|&i| QueryOrigin::Fresh(i)));
            (a, f, o)
        }
        _ => {
            let o: Vec<QueryOrigin> = top.iter().map(|&i| QueryOrigin::Fresh(i)).collect();
            (top_anchors, top_features, o)
        }
    };

    // Temporal keys/values: the propagated queries with their anchor
    // embedding on the key side.
    let memory_kv = match memory {
        Some(mem) if !mem.ids.is_empty() => {
            let kv_embed = encode_anchor(tape, mem.anchors, &vars.anchor_enc)?;
            let kv_fused = tape.add(mem.features, kv_embed)?;
            Some((kv_fused, mem.features))
        }
        _ => None,
    };

    for layer in &vars.layers[1..] {
        let (a, f, cls, quality) = run_block(
            tape,
            cur_anchors,
            cur_features,
            memory_kv,
            &inputs,
            layer,
            &vars.anchor_enc,
            cfg,
        )?;
        let conf = confidences(tape, cls);
        cur_anchors = a;
        cur_features = f;
        layers.push(LayerOutput {
            anchors: a,
            features: f,
            class_logits: cls,
            quality,
            confidence: conf,
        });
    }
    Ok(DecodeOutput {
        layers,
        origins,
        top_k_indices: top,
    })
}
