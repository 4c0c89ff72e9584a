//! Training losses and ground-truth assignment.
//!
//! Detection supervision follows the one-to-one assignment recipe: a
//! Hungarian matching on classification-plus-box cost picks one query per
//! ground-truth box, matched queries receive L1 box, yawness, and centerness
//! terms, and every query enters the focal classification term. Dense BEV
//! supervision is a cosine distillation restricted to the pseudo-label mask,
//! and the depth head gets binary cross-entropy against LiDAR depth bins.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::decoder::ANCHOR_DIM;
use crate::featprov::Scale;
use crate::geometry::CameraModel;
use crate::lifting::DepthBins;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::pseudolabel::PseudoLabelGrid;
use crate::scene::GtBox;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("bad loss weights: {0}")]
    BadWeights(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Component weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub det: f64,
    pub distill: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            det: 1.0,
            distill: 7.0,
            depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, w) in [
            ("det", self.det),
            ("distill", self.distill),
            ("depth", self.depth),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::BadWeights(format!("{name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Detection-loss shape: focal parameters and the quality focal exponent.
#[derive(Debug, Clone, Copy)]
pub struct DetLossConfig {
    pub alpha: f64,
    /// Focal exponent, applied as an exact integer power.
    pub gamma: u32,
    /// Exponent of |target - sigma| in the centerness quality focal term.
    pub quality_beta: u32,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        DetLossConfig {
            alpha: 0.25,
            gamma: 2,
            quality_beta: 2,
        }
    }
}

/// One ground-truth box in anchor encoding.
#[derive(Debug, Clone, Copy)]
pub struct GtTarget {
    pub anchor: [f64; ANCHOR_DIM],
    pub class_id: usize,
}

impl GtTarget {
    pub fn from_gt(gt: &GtBox) -> Result<Self, LossError> {
        let [w, l, h] = gt.size;
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(LossError::Mismatch(format!(
                "box sizes must be positive, got {:?}",
                gt.size
            )));
        }
        Ok(GtTarget {
            anchor: [
                gt.center[0],
                gt.center[1],
                gt.center[2],
                w.ln(),
                h.ln(),
                l.ln(),
                gt.yaw.sin(),
                gt.yaw.cos(),
                gt.velocity[0],
                gt.velocity[1],
                gt.velocity[2],
            ],
            class_id: gt.class_id,
        })
    }
}

/// Minimum-cost injection of rows into columns (rows <= columns) by the
/// Hungarian algorithm with potentials. Returns the column of each row.
pub fn min_cost_assignment(cost: &Tensor) -> Result<Vec<usize>, LossError> {
    if cost.ndim() != 2 {
        return Err(LossError::Mismatch(format!(
            "cost must be a matrix, got {:?}",
            cost.shape()
        )));
    }
    let (n, m) = (cost.dim(0), cost.dim(1));
    if n > m {
        return Err(LossError::Mismatch(format!(
            "{n} rows cannot inject into {m} columns"
        )));
    }
    if !cost.is_finite() {
        return Err(LossError::Mismatch("cost has non-finite entries".into()));
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * m + (j - 1)];
    // 1-based arrays; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(out.iter().all(|&j| j != usize::MAX));
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const PROB_EPS: f64 = 1e-12;

/// One-to-one matching of ground truths to queries on detached values:
/// cost = focal classification cost + mean L1 box cost.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Query index per ground truth.
    pub gt_to_query: Vec<usize>,
}

pub fn assign(
    tape: &Tape,
    anchors: Var,
    class_logits: Var,
    gts: &[GtTarget],
    cfg: &DetLossConfig,
) -> Result<Assignment, LossError> {
    let a = tape.value(anchors);
    let logits = tape.value(class_logits);
    let m = a.dim(0);
    let k = logits.dim(1);
    if logits.dim(0) != m || a.dim(1) != ANCHOR_DIM {
        return Err(LossError::Mismatch(format!(
            "anchors {:?} vs logits {:?}",
            a.shape(),
            logits.shape()
        )));
    }
    if gts.is_empty() {
        return Ok(Assignment {
            gt_to_query: Vec::new(),
        });
    }
    if gts.len() > m {
        return Err(LossError::Mismatch(format!(
            "{} ground truths for {m} queries",
            gts.len()
        )));
    }
    if let Some(bad) = gts.iter().find(|g| g.class_id >= k) {
        return Err(LossError::Mismatch(format!(
            "class {} out of range ({k} classes)",
            bad.class_id
        )));
    }
    let mut cost = Vec::with_capacity(gts.len() * m);
    for gt in gts {
        for q in 0..m {
            let p = sigmoid(logits.data()[q * k + gt.class_id])
                .clamp(PROB_EPS, 1.0 - PROB_EPS);
            let cls = cfg.alpha * (1.0 - p).powi(cfg.gamma as i32) * (-p.ln())
                - (1.0 - cfg.alpha) * p.powi(cfg.gamma as i32) * (-(1.0 - p).ln());
            let l1: f64 = (0..ANCHOR_DIM)
                .map(|d| (a.data()[q * ANCHOR_DIM + d] - gt.anchor[d]).abs())
                .sum::<f64>()
                / ANCHOR_DIM as f64;
            cost.push(cls + l1);
        }
    }
    let cost = Tensor::new(vec![gts.len(), m], cost)?;
    Ok(Assignment {
        gt_to_query: min_cost_assignment(&cost)?,
    })
}

/// Detached supervision targets for the two quality outputs, computed from
/// the current predictions per the inherited recipe: centerness is
/// `exp(-|center error|)` and yawness is the sign agreement of the predicted
/// and true yaw vectors. Held fixed while the loss is differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTargets {
    pub yawness: Vec<f64>,
    pub centerness: Vec<f64>,
}

pub fn quality_targets(
    tape: &Tape,
    anchors: Var,
    assignment: &Assignment,
    gts: &[GtTarget],
) -> QualityTargets {
    let a = tape.value(anchors);
    let mut yawness = Vec::with_capacity(gts.len());
    let mut centerness = Vec::with_capacity(gts.len());
    for (gt, &q) in gts.iter().zip(&assignment.gt_to_query) {
        let row = &a.data()[q * ANCHOR_DIM..(q + 1) * ANCHOR_DIM];
        let dot = row[6] * gt.anchor[6] + row[7] * gt.anchor[7];
        yawness.push(if dot >= 0.0 { 1.0 } else { 0.0 });
        let dist = ((row[0] - gt.anchor[0]).powi(2)
            + (row[1] - gt.anchor[1]).powi(2)
            + (row[2] - gt.anchor[2]).powi(2))
        .sqrt();
        centerness.push((-dist).exp());
    }
    QualityTargets {
        yawness,
        centerness,
    }
}

/// `x^n` on the tape by repeated multiplication (`n >= 1`).
fn int_pow(tape: &mut Tape, x: Var, n: u32) -> Result<Var, NumericsError> {
    let mut out = x;
    for _ in 1..n.max(1) {
        out = tape.mul(out, x)?;
    }
    Ok(out)
}

/// Clamped sigmoid probabilities with their complements and logs.
fn prob_parts(tape: &mut Tape, logits: Var) -> Result<(Var, Var, Var, Var), NumericsError> {
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let shape = tape.shape(p).to_vec();
    let one = tape.leaf(Tensor::full(&shape, 1.0));
    let q = tape.sub(one, p)?;
    let ln_p = tape.ln(p)?;
    let ln_q = tape.ln(q)?;
    Ok((p, q, ln_p, ln_q))
}

/// Focal classification loss over every query and class, normalized by the
/// number of positives (at least 1). `positives` lists (query, class) pairs.
fn focal_loss(
    tape: &mut Tape,
    class_logits: Var,
    positives: &[(usize, usize)],
    cfg: &DetLossConfig,
) -> Result<Var, NumericsError> {
    let shape = tape.shape(class_logits).to_vec();
    let (m, k) = (shape[0], shape[1]);
    let mut pos = vec![0.0; m * k];
    for &(q, c) in positives {
        pos[q * k + c] = 1.0;
    }
    let neg: Vec<f64> = pos.iter().map(|&x| 1.0 - x).collect();
    let m_pos = tape.leaf(Tensor::new(shape.clone(), pos)?);
    let m_neg = tape.leaf(Tensor::new(shape, neg)?);

    let (p, q, ln_p, ln_q) = prob_parts(tape, class_logits)?;
    let q_pow = int_pow(tape, q, cfg.gamma)?;
    let p_pow = int_pow(tape, p, cfg.gamma)?;
    let pos_term = tape.mul(q_pow, ln_p)?;
    let pos_term = tape.scale(pos_term, -cfg.alpha)?;
    let neg_term = tape.mul(p_pow, ln_q)?;
    let neg_term = tape.scale(neg_term, -(1.0 - cfg.alpha))?;
    let pos_masked = tape.mul(m_pos, pos_term)?;
    let neg_masked = tape.mul(m_neg, neg_term)?;
    let total = tape.add(pos_masked, neg_masked)?;
    let total = tape.sum_all(total)?;
    tape.scale(total, 1.0 / positives.len().max(1) as f64)
}

/// Binary cross-entropy of a column of logits against fixed targets in
/// [0, 1], mean over rows. `weight` optionally scales each row's term before
/// the mean (used by the quality focal variant).
fn bce_column(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    weight: Option<Var>,
) -> Result<Var, NumericsError> {
    let n = targets.len();
    let (_, _, ln_p, ln_q) = prob_parts(tape, logits)?;
    let t = tape.leaf(Tensor::new(vec![n, 1], targets.to_vec())?);
    let tc: Vec<f64> = targets.iter().map(|&x| 1.0 - x).collect();
    let tc = tape.leaf(Tensor::new(vec![n, 1], tc)?);
    let a = tape.mul(t, ln_p)?;
    let b = tape.mul(tc, ln_q)?;
    let core = tape.add(a, b)?;
    let core = match weight {
        Some(w) => tape.mul(w, core)?,
        None => core,
    };
    let total = tape.sum_all(core)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Detection loss of one decoder layer: focal classification over all
/// queries plus L1 box, yawness cross-entropy, and centerness quality focal
/// over the matched ones. The assignment and quality targets are detached
/// inputs so the differentiated function is exactly what backward sees.
#[allow(clippy::too_many_arguments)]
pub fn det_loss(
    tape: &mut Tape,
    anchors: Var,
    class_logits: Var,
    quality: Var,
    gts: &[GtTarget],
    assignment: &Assignment,
    targets: &QualityTargets,
    cfg: &DetLossConfig,
) -> Result<Var, LossError> {
    if assignment.gt_to_query.len() != gts.len()
        || targets.yawness.len() != gts.len()
        || targets.centerness.len() != gts.len()
    {
        return Err(LossError::Mismatch(format!(
            "{} ground truths, {} matches, {} quality targets",
            gts.len(),
            assignment.gt_to_query.len(),
            targets.yawness.len()
        )));
    }
    let positives: Vec<(usize, usize)> = gts
        .iter()
        .zip(&assignment.gt_to_query)
        .map(|(gt, &q)| (q, gt.class_id))
        .collect();
    let mut loss = focal_loss(tape, class_logits, &positives, cfg)?;
    if gts.is_empty() {
        return Ok(loss);
    }

    let g = gts.len();
    let matched = &assignment.gt_to_query;
    let am = tape.gather_rows(anchors, matched)?;
    let tgt: Vec<f64> = gts.iter().flat_map(|gt| gt.anchor).collect();
    let tgt = tape.leaf(Tensor::new(vec![g, ANCHOR_DIM], tgt)?);
    let diff = tape.sub(am, tgt)?;
    let diff = tape.abs(diff)?;
    let l1 = tape.sum_all(diff)?;
    let l1 = tape.scale(l1, 1.0 / (g * ANCHOR_DIM) as f64)?;
    loss = tape.add(loss, l1)?;

    let qm = tape.gather_rows(quality, matched)?;
    let yaw_logit = tape.gather_cols(qm, &[0])?;
    let ctr_logit = tape.gather_cols(qm, &[1])?;
    let yawness = bce_column(tape, yaw_logit, &targets.yawness, None)?;
    loss = tape.add(loss, yawness)?;

    // Quality focal: |t - sigma|^beta modulates the cross-entropy.
    let (pc, _, _, _) = prob_parts(tape, ctr_logit)?;
    let t = tape.leaf(Tensor::new(vec![g, 1], targets.centerness.clone())?);
    let gap = tape.sub(t, pc)?;
    let gap = tape.abs(gap)?;
    let w = int_pow(tape, gap, cfg.quality_beta)?;
    let centerness = bce_column(tape, ctr_logit, &targets.centerness, Some(w))?;
    loss = tape.add(loss, centerness)?;
    Ok(loss)
}

/// Per-layer detection heads for deep supervision.
#[derive(Debug, Clone, Copy)]
pub struct DetHead {
    pub anchors: Var,
    pub class_logits: Var,
    pub quality: Var,
}

/// Deep supervision: assign and score every decoder layer independently,
/// then average.
pub fn det_loss_deep(
    tape: &mut Tape,
    layers: &[DetHead],
    gts: &[GtTarget],
    cfg: &DetLossConfig,
) -> Result<Var, LossError> {
    if layers.is_empty() {
        return Err(LossError::Mismatch("no layers to supervise".into()));
    }
    let mut total: Option<Var> = None;
    for head in layers {
        let assignment = assign(tape, head.anchors, head.class_logits, gts, cfg)?;
        let targets = quality_targets(tape, head.anchors, &assignment, gts);
        let l = det_loss(
            tape,
            head.anchors,
            head.class_logits,
            head.quality,
            gts,
            &assignment,
            &targets,
            cfg,
        )?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(tape.scale(total.expect("at least one layer"), 1.0 / layers.len() as f64)?)
}

/// Linear projection applied to BEV features before comparing with the
/// pseudo-label: `w [C_bev, C_pseudo]`, `b [C_pseudo]`.
#[derive(Debug, Clone, Copy)]
pub struct DistillHead {
    pub w: Var,
    pub b: Var,
}

pub struct DistillLoss {
    pub loss: Var,
    /// Number of supervised cells; 0 means the loss is a constant zero and
    /// callers should warn.
    pub n_valid: usize,
}

/// Mean cosine distillation over the supervised cells: per valid cell,
/// `1 - cos(g(F_BEV), pseudo)` with norm guard `sqrt(|x|^2 + 1e-12)`.
/// Cells outside the mask contribute nothing at all.
pub fn distill_loss(
    tape: &mut Tape,
    bev: Var,
    pseudo: &PseudoLabelGrid,
    head: &DistillHead,
) -> Result<DistillLoss, LossError> {
    let shape = tape.shape(bev).to_vec();
    let grid = pseudo.grid();
    if shape.len() != 3 || shape[0] != grid.height() || shape[1] != grid.width() {
        return Err(LossError::Mismatch(format!(
            "bev {:?} vs pseudo {}x{}",
            shape,
            grid.height(),
            grid.width()
        )));
    }
    let valid = pseudo.valid_indices();
    let n = valid.len();
    if n == 0 {
        return Ok(DistillLoss {
            loss: tape.leaf(Tensor::scalar(0.0)),
            n_valid: 0,
        });
    }
    let cells = shape[0] * shape[1];
    let rows = tape.reshape(bev, &[cells, shape[2]])?;
    let picked = tape.gather_rows(rows, &valid)?;
    let projected = tape.matmul(picked, head.w)?;
    let a = tape.add_bias(projected, head.b)?;

    let cp = grid.channels();
    let mut target = Vec::with_capacity(n * cp);
    for &cell in &valid {
        target.extend_from_slice(&grid.data()[cell * cp..(cell + 1) * cp]);
    }
    let b = tape.leaf(Tensor::new(vec![n, cp], target)?);

    let norm_guard = |tape: &mut Tape, x: Var| -> Result<Var, NumericsError> {
        let sq = tape.mul(x, x)?;
        let n2 = tape.sum_rows(sq)?;
        let n2 = tape.add_scalar(n2, 1e-12)?;
        tape.sqrt(n2)
    };
    let prod = tape.mul(a, b)?;
    let dot = tape.sum_rows(prod)?;
    let na = norm_guard(tape, a)?;
    let nb = norm_guard(tape, b)?;
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dot, denom)?;
    let ones = tape.leaf(Tensor::full(&[n, 1], 1.0));
    let per_cell = tape.sub(ones, cos)?;
    let total = tape.sum_all(per_cell)?;
    let loss = tape.scale(total, 1.0 / n as f64)?;
    Ok(DistillLoss { loss, n_valid: n })
}

/// Nearest-pixel LiDAR hits of one camera at one feature scale: pixel index
/// (row-major over the scaled map) and camera depth, keeping the closest
/// depth per pixel. Points out of view are dropped.
pub fn lidar_depth_hits(cam: &CameraModel, scale: Scale, points: &[[f64; 3]]) -> Vec<(usize, f64)> {
    let params = cam.pinhole_params(scale.factor());
    let (ws, hs) = (params.width, params.height);
    let s = scale.factor();
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for p in points {
        let Some(proj) = cam.project(&nalgebra::Vector3::new(p[0], p[1], p[2])) else {
            continue;
        };
        let us = (proj.u + 0.5) * s - 0.5;
        let vs = (proj.v + 0.5) * s - 0.5;
        let col = us.round();
        let row = vs.round();
        if col < 0.0 || row < 0.0 || col as usize >= ws || row as usize >= hs {
            continue;
        }
        let pixel = row as usize * ws + col as usize;
        let d = best.entry(pixel).or_insert(f64::INFINITY);
        if proj.depth < *d {
            *d = proj.depth;
        }
    }
    best.into_iter().collect()
}

pub struct DepthLoss {
    pub loss: Var,
    /// Supervised pixels (hits that fall into the bin range).
    pub n_hits: usize,
}

/// Depth supervision for one camera: binary cross-entropy between the
/// predicted bin distribution and the one-hot LiDAR bin, mean per hit pixel,
/// plus an L1 term on the auxiliary scalar depth when present. Hits outside
/// the bin range and pixels without LiDAR are excluded.
pub fn depth_loss(
    tape: &mut Tape,
    depth: Var,
    aux: Option<Var>,
    hits: &[(usize, f64)],
    bins: &DepthBins,
) -> Result<DepthLoss, LossError> {
    let shape = tape.shape(depth).to_vec();
    if shape.len() != 2 || shape[1] != bins.d {
        return Err(LossError::Mismatch(format!(
            "depth {:?} vs {} bins",
            shape, bins.d
        )));
    }
    let n_pixels = shape[0];
    let mut rows = Vec::new();
    let mut bin_ids = Vec::new();
    let mut depths = Vec::new();
    for &(pixel, d) in hits {
        if pixel >= n_pixels {
            return Err(LossError::Mismatch(format!(
                "hit pixel {pixel} outside {n_pixels} rows"
            )));
        }
        if let Some(b) = bins.bin_of(d) {
            rows.push(pixel);
            bin_ids.push(b);
            depths.push(d);
        }
    }
    let h = rows.len();
    if h == 0 {
        return Ok(DepthLoss {
            loss: tape.leaf(Tensor::scalar(0.0)),
            n_hits: 0,
        });
    }
    let picked = tape.gather_rows(depth, &rows)?;
    let mut hot = vec![0.0; h * bins.d];
    for (r, &b) in bin_ids.iter().enumerate() {
        hot[r * bins.d + b] = 1.0;
    }
    let cold: Vec<f64> = hot.iter().map(|&x| 1.0 - x).collect();
    let m1 = tape.leaf(Tensor::new(vec![h, bins.d], hot)?);
    let m0 = tape.leaf(Tensor::new(vec![h, bins.d], cold)?);
    let p = tape.clamp(picked, PROB_EPS, 1.0 - PROB_EPS)?;
    let one = tape.leaf(Tensor::full(&[h, bins.d], 1.0));
    let q = tape.sub(one, p)?;
    let ln_p = tape.ln(p)?;
    let ln_q = tape.ln(q)?;
    let pos = tape.mul(m1, ln_p)?;
    let neg = tape.mul(m0, ln_q)?;
    let sum = tape.add(pos, neg)?;
    let total = tape.sum_all(sum)?;
    let mut loss = tape.scale(total, -1.0 / h as f64)?;

    if let Some(aux) = aux {
        let ash = tape.shape(aux).to_vec();
        if ash != [n_pixels, 1] {
            return Err(LossError::Mismatch(format!(
                "aux depth {ash:?}, expected [{n_pixels}, 1]"
            )));
        }
        let am = tape.gather_rows(aux, &rows)?;
        let t = tape.leaf(Tensor::new(vec![h, 1], depths)?);
        let diff = tape.sub(am, t)?;
        let diff = tape.abs(diff)?;
        let l1 = tape.sum_all(diff)?;
        let l1 = tape.scale(l1, 1.0 / h as f64)?;
        loss = tape.add(loss, l1)?;
    }
    Ok(DepthLoss { loss, n_hits: h })
}

/// Weighted total: `w.det * det + w.distill * distill + w.depth * depth`.
pub fn total_loss(
    tape: &mut Tape,
    det: Var,
    distill: Var,
    depth: Var,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    weights.validate()?;
    let a = tape.scale(det, weights.det)?;
    let b = tape.scale(distill, weights.distill)?;
    let c = tape.scale(depth, weights.depth)?;
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::grid::FeatureGrid;
    use crate::numerics::grad_check;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn rand_leaf(tape: &mut Tape, shape: &[usize], rng: &mut ChaCha8Rng, amp: f64) -> Var {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
        leaf(tape, shape, data)
    }

    /// Cheapest injection of rows into columns by brute force.
    fn brute_force_cost(cost: &Tensor) -> f64 {
        fn rec(cost: &Tensor, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let (n, m) = (cost.dim(0), cost.dim(1));
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.data()[row * m + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.dim(1)], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for n in 1..=6usize {
            for extra in [0usize, 1, 2] {
                let m = n + extra;
                if m > 7 {
                    continue;
                }
                for _ in 0..20 {
                    let cost = Tensor::from_fn(&[n, m], |_| rng.gen_range(-3.0..3.0));
                    let sol = min_cost_assignment(&cost).unwrap();
                    // Valid injection.
                    let mut seen = sol.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    assert_eq!(seen.len(), n);
                    let total: f64 = sol
                        .iter()
                        .enumerate()
                        .map(|(i, &j)| cost.data()[i * m + j])
                        .sum();
                    let best = brute_force_cost(&cost);
                    assert!(
                        (total - best).abs() < 1e-9,
                        "{n}x{m}: hungarian {total} vs brute force {best}"
                    );
                }
            }
        }
        // Rows must not exceed columns.
        let wide = Tensor::from_fn(&[3, 2], |_| 1.0);
        assert!(min_cost_assignment(&wide).is_err());
    }

    fn gt_at(x: f64, y: f64, class_id: usize) -> GtTarget {
        GtTarget {
            anchor: [x, y, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            class_id,
        }
    }

    #[test]
    fn assignment_prefers_the_exact_query() {
        let mut tape = Tape::new();
        let gt = gt_at(2.0, -1.0, 1);
        // Query 1 sits exactly on the ground truth with a confident logit.
        let anchors = leaf(
            &mut tape,
            &[2, ANCHOR_DIM],
            vec![
                5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
                2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
            ],
        );
        let logits = leaf(&mut tape, &[2, 3], vec![-4.0, -4.0, -4.0, -4.0, 4.0, -4.0]);
        let a = assign(&tape, anchors, logits, &[gt], &DetLossConfig::default()).unwrap();
        assert_eq!(a.gt_to_query, vec![1]);

        // One query, one ground truth: always matched.
        let anchors = leaf(
            &mut tape,
            &[1, ANCHOR_DIM],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        );
        let logits = leaf(&mut tape, &[1, 3], vec![0.0, 0.0, 0.0]);
        let a = assign(&tape, anchors, logits, &[gt_at(9.0, 9.0, 0)], &DetLossConfig::default())
            .unwrap();
        assert_eq!(a.gt_to_query, vec![0]);
    }

    #[test]
    fn gt_targets_encode_boxes() {
        let gt = GtBox {
            frame: 0,
            track_id: 3,
            class_id: 2,
            center: [1.0, -2.0, 0.5],
            size: [0.8, 2.4, 1.6],
            yaw: 0.7,
            velocity: [1.0, -0.5, 0.0],
        };
        let t = GtTarget::from_gt(&gt).unwrap();
        assert_eq!(t.class_id, 2);
        let a = crate::decoder::Anchor::from_array(t.anchor);
        let b = a.to_box3();
        assert!((b.width - 0.8).abs() < 1e-12);
        assert!((b.length - 2.4).abs() < 1e-12);
        assert!((b.height - 1.6).abs() < 1e-12);
        assert!((b.yaw - 0.7).abs() < 1e-12);
        assert!((a.vx - 1.0).abs() < 1e-12);

        let bad = GtBox {
            size: [0.0, 1.0, 1.0],
            ..gt
        };
        assert!(GtTarget::from_gt(&bad).is_err());
    }

    fn naive_det_loss(
        anchors: &Tensor,
        logits: &Tensor,
        quality: &Tensor,
        gts: &[GtTarget],
        matched: &[usize],
        targets: &QualityTargets,
        cfg: &DetLossConfig,
    ) -> f64 {
        let (m, k) = (logits.dim(0), logits.dim(1));
        let mut pos = vec![false; m * k];
        for (gt, &q) in gts.iter().zip(matched) {
            pos[q * k + gt.class_id] = true;
        }
        let mut focal = 0.0;
        for (i, &is_pos) in pos.iter().enumerate() {
            let p = sigmoid(logits.data()[i]).clamp(PROB_EPS, 1.0 - PROB_EPS);
            focal += if is_pos {
                -cfg.alpha * (1.0 - p).powi(cfg.gamma as i32) * p.ln()
            } else {
                -(1.0 - cfg.alpha) * p.powi(cfg.gamma as i32) * (1.0 - p).ln()
            };
        }
        let mut total = focal / gts.len().max(1) as f64;
        if gts.is_empty() {
            return total;
        }
        let g = gts.len();
        let mut l1 = 0.0;
        for (gt, &q) in gts.iter().zip(matched) {
            for d in 0..ANCHOR_DIM {
                l1 += (anchors.data()[q * ANCHOR_DIM + d] - gt.anchor[d]).abs();
            }
        }
        total += l1 / (g * ANCHOR_DIM) as f64;
        let mut yaw = 0.0;
        let mut ctr = 0.0;
        for (i, &q) in matched.iter().enumerate() {
            let ylog = quality.data()[q * 2];
            let sp = sigmoid(ylog).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let t = targets.yawness[i];
            yaw += -(t * sp.ln() + (1.0 - t) * (1.0 - sp).ln());
            let clog = quality.data()[q * 2 + 1];
            let sc = sigmoid(clog).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let tc = targets.centerness[i];
            let w = (tc - sc).abs().powi(cfg.quality_beta as i32);
            ctr += -w * (tc * sc.ln() + (1.0 - tc) * (1.0 - sc).ln());
        }
        total + yaw / g as f64 + ctr / g as f64
    }

    #[test]
    fn det_loss_matches_naive_loop() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (m, k) = (4, 3);
        let anchors = rand_leaf(&mut tape, &[m, ANCHOR_DIM], &mut rng, 2.0);
        let logits = rand_leaf(&mut tape, &[m, k], &mut rng, 2.0);
        let quality = rand_leaf(&mut tape, &[m, 2], &mut rng, 2.0);
        let gts = vec![gt_at(0.5, 0.5, 0), gt_at(-1.0, 2.0, 2)];
        let cfg = DetLossConfig::default();
        let assignment = assign(&tape, anchors, logits, &gts, &cfg).unwrap();
        let targets = quality_targets(&tape, anchors, &assignment, &gts);
        let loss = det_loss(
            &mut tape, anchors, logits, quality, &gts, &assignment, &targets, &cfg,
        )
        .unwrap();
        let want = naive_det_loss(
            tape.value(anchors),
            tape.value(logits),
            tape.value(quality),
            &gts,
            &assignment.gt_to_query,
            &targets,
            &cfg,
        );
        let got = tape.value(loss).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got > 0.0);

        // No ground truth: pure negative focal term, still matches.
        let assignment = Assignment {
            gt_to_query: vec![],
        };
        let targets = QualityTargets {
            yawness: vec![],
            centerness: vec![],
        };
        let loss = det_loss(
            &mut tape, anchors, logits, quality, &[], &assignment, &targets, &cfg,
        )
        .unwrap();
        let want = naive_det_loss(
            tape.value(anchors),
            tape.value(logits),
            tape.value(quality),
            &[],
            &[],
            &targets,
            &cfg,
        );
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn det_loss_at_the_optimum_is_tiny() {
        let mut tape = Tape::new();
        let gts = vec![gt_at(1.0, 2.0, 0), gt_at(-2.0, 0.5, 1)];
        let mut adata = Vec::new();
        for gt in &gts {
            adata.extend_from_slice(&gt.anchor);
        }
        let anchors = leaf(&mut tape, &[2, ANCHOR_DIM], adata);
        // Strong correct-class logits, strong negatives elsewhere.
        let logits = leaf(&mut tape, &[2, 2], vec![30.0, -30.0, -30.0, 30.0]);
        // Perfect match: centerness target exp(0) = 1, yawness target 1.
        let quality = leaf(&mut tape, &[2, 2], vec![30.0, 30.0, 30.0, 30.0]);
        let cfg = DetLossConfig::default();
        let assignment = assign(&tape, anchors, logits, &gts, &cfg).unwrap();
        assert_eq!(assignment.gt_to_query, vec![0, 1]);
        let targets = quality_targets(&tape, anchors, &assignment, &gts);
        assert_eq!(targets.yawness, vec![1.0, 1.0]);
        assert!((targets.centerness[0] - 1.0).abs() < 1e-12);
        let loss = det_loss(
            &mut tape, anchors, logits, quality, &gts, &assignment, &targets, &cfg,
        )
        .unwrap();
        assert!(tape.value(loss).data()[0] < 1e-3);
    }

    #[test]
    fn quality_targets_follow_the_definitions() {
        let mut tape = Tape::new();
        // Query 0 agrees in yaw; query 1 points the opposite way, 1 m off.
        let anchors = leaf(
            &mut tape,
            &[2, ANCHOR_DIM],
            vec![
                0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0,
            ],
        );
        let gts = vec![gt_at(0.0, 0.0, 0), gt_at(0.0, 0.0, 1)];
        let assignment = Assignment {
            gt_to_query: vec![0, 1],
        };
        let t = quality_targets(&tape, anchors, &assignment, &gts);
        assert_eq!(t.yawness, vec![1.0, 0.0]);
        assert!((t.centerness[0] - 1.0).abs() < 1e-12);
        assert!((t.centerness[1] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn det_loss_gradients_match_finite_differences() {
        let mut seed = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (m, k) = (3, 2);
        let held = [
            Tensor::from_fn(&[m, ANCHOR_DIM], |_| rng.gen_range(-1.0..1.0)),
            Tensor::from_fn(&[m, k], |_| rng.gen_range(-1.5..1.5)),
            Tensor::from_fn(&[m, 2], |_| rng.gen_range(-1.5..1.5)),
        ];
        let gts = vec![gt_at(0.3, -0.4, 1)];
        let cfg = DetLossConfig::default();
        // Fixed assignment and targets: the loss is differentiated with both
        // detached, exactly as during training.
        let a0 = seed.leaf(held[0].clone());
        let l0 = seed.leaf(held[1].clone());
        let assignment = assign(&seed, a0, l0, &gts, &cfg).unwrap();
        let targets = quality_targets(&seed, a0, &assignment, &gts);

        for slot in 0..3 {
            let held_c = held.clone();
            let gts = gts.clone();
            let assignment = assignment.clone();
            let targets = targets.clone();
            let f = move |tape: &mut Tape, x: Var| {
                let vs: Vec<Var> = held_c
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == slot { x } else { tape.leaf(t.clone()) })
                    .collect();
                det_loss(
                    tape,
                    vs[0],
                    vs[1],
                    vs[2],
                    &gts,
                    &assignment,
                    &targets,
                    &cfg,
                )
                .map_err(|_| NumericsError::NonFinite("det_loss"))
            };
            let report = grad_check(f, &held[slot], 1e-6, 1e-4).unwrap();
            assert!(
                report.pass,
                "slot {slot}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    fn pseudo_grid(
        nx: usize,
        ny: usize,
        c: usize,
        rng: &mut ChaCha8Rng,
        valid_fraction: f64,
    ) -> PseudoLabelGrid {
        let data: Vec<f64> = (0..nx * ny * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask: Vec<bool> = (0..nx * ny).map(|_| rng.gen_bool(valid_fraction)).collect();
        let grid = FeatureGrid::new(nx, ny, c, data)
            .unwrap()
            .with_mask(mask)
            .unwrap();
        PseudoLabelGrid::from_grid(grid).unwrap()
    }

    fn identity_head(tape: &mut Tape, c: usize) -> DistillHead {
        let w = leaf(
            tape,
            &[c, c],
            (0..c * c)
                .map(|i| if i / c == i % c { 1.0 } else { 0.0 })
                .collect(),
        );
        let b = tape.leaf(Tensor::zeros(&[c]));
        DistillHead { w, b }
    }

    #[test]
    fn distill_loss_perfect_and_antipodal() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (nx, ny, c) = (4, 3, 5);
        let pseudo = pseudo_grid(nx, ny, c, &mut rng, 0.6);
        assert!(pseudo.n_valid() > 0);
        let head = identity_head(&mut tape, c);

        let aligned = leaf(&mut tape, &[nx, ny, c], pseudo.grid().data().to_vec());
        let out = distill_loss(&mut tape, aligned, &pseudo, &head).unwrap();
        assert_eq!(out.n_valid, pseudo.n_valid());
        assert!(tape.value(out.loss).data()[0].abs() < 1e-9);

        let flipped: Vec<f64> = pseudo.grid().data().iter().map(|x| -x).collect();
        let anti = leaf(&mut tape, &[nx, ny, c], flipped);
        let out = distill_loss(&mut tape, anti, &pseudo, &head).unwrap();
        assert!((tape.value(out.loss).data()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn distill_loss_matches_naive_loop() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (nx, ny, cb, cp) = (5, 4, 3, 4);
        let pseudo = pseudo_grid(nx, ny, cp, &mut rng, 0.5);
        let bev = rand_leaf(&mut tape, &[nx, ny, cb], &mut rng, 1.0);
        let head = DistillHead {
            w: rand_leaf(&mut tape, &[cb, cp], &mut rng, 0.8),
            b: rand_leaf(&mut tape, &[cp], &mut rng, 0.3),
        };
        let out = distill_loss(&mut tape, bev, &pseudo, &head).unwrap();

        let bd = tape.value(bev).data();
        let wd = tape.value(head.w).data();
        let bd2 = tape.value(head.b).data();
        let gd = pseudo.grid().data();
        let mut want = 0.0;
        for cell in pseudo.valid_indices() {
            let f = &bd[cell * cb..(cell + 1) * cb];
            let mut a = vec![0.0; cp];
            for (j, aj) in a.iter_mut().enumerate() {
                *aj = bd2[j] + (0..cb).map(|i| f[i] * wd[i * cp + j]).sum::<f64>();
            }
            let t = &gd[cell * cp..(cell + 1) * cp];
            let dot: f64 = a.iter().zip(t).map(|(x, y)| x * y).sum();
            let na = (a.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            let nt = (t.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            want += 1.0 - dot / (na * nt);
        }
        want /= pseudo.n_valid() as f64;
        let got = tape.value(out.loss).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn distill_loss_ignores_cells_outside_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (nx, ny, c) = (4, 4, 3);
        let pseudo = pseudo_grid(nx, ny, c, &mut rng, 0.4);
        let invalid: Vec<usize> = (0..nx * ny)
            .filter(|i| !pseudo.valid()[*i])
            .collect();
        assert!(!invalid.is_empty() && pseudo.n_valid() > 0);
        let base: Vec<f64> = (0..nx * ny * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |data: Vec<f64>| -> f64 {
            let mut tape = Tape::new();
            let head = identity_head(&mut tape, c);
            let bev = leaf(&mut tape, &[nx, ny, c], data);
            let out = distill_loss(&mut tape, bev, &pseudo, &head).unwrap();
            tape.value(out.loss).data()[0]
        };
        let reference = run(base.clone());
        for &cell in invalid.iter().take(4) {
            let mut perturbed = base.clone();
            for ch in 0..c {
                perturbed[cell * c + ch] += 1000.0 * (ch as f64 + 1.0);
            }
            let got = run(perturbed);
            assert!(
                got.to_bits() == reference.to_bits(),
                "perturbing masked-out cell {cell} changed the loss"
            );
        }
    }

    #[test]
    fn distill_loss_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let (nx, ny, cb, cp) = (3, 3, 2, 3);
            let pseudo = pseudo_grid(nx, ny, cp, &mut rng, 0.7);
            if pseudo.n_valid() == 0 {
                continue;
            }
            let bev = rand_leaf(&mut tape, &[nx, ny, cb], &mut rng, 3.0);
            let head = DistillHead {
                w: rand_leaf(&mut tape, &[cb, cp], &mut rng, 2.0),
                b: rand_leaf(&mut tape, &[cp], &mut rng, 1.0),
            };
            let out = distill_loss(&mut tape, bev, &pseudo, &head).unwrap();
            let v = tape.value(out.loss).data()[0];
            assert!((0.0..=2.0).contains(&v), "loss {v} out of [0, 2]");
        }
    }

    #[test]
    fn distill_loss_with_empty_mask_is_zero() {
        let mut tape = Tape::new();
        let (nx, ny, c) = (3, 3, 2);
        let grid = FeatureGrid::zeros(nx, ny, c)
            .unwrap()
            .with_mask(vec![false; nx * ny])
            .unwrap();
        let pseudo = PseudoLabelGrid::from_grid(grid).unwrap();
        let head = identity_head(&mut tape, c);
        let bev = tape.leaf(Tensor::full(&[nx, ny, c], 1.0));
        let out = distill_loss(&mut tape, bev, &pseudo, &head).unwrap();
        assert_eq!(out.n_valid, 0);
        assert_eq!(tape.value(out.loss).data()[0], 0.0);
    }

    #[test]
    fn distill_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (nx, ny, cb, cp) = (3, 3, 2, 2);
        let pseudo = pseudo_grid(nx, ny, cp, &mut rng, 0.8);
        assert!(pseudo.n_valid() > 0);
        let bev0 = Tensor::from_fn(&[nx, ny, cb], |_| rng.gen_range(-1.0..1.0));
        let w0 = Tensor::from_fn(&[cb, cp], |_| rng.gen_range(-0.8..0.8));
        let b0 = Tensor::from_fn(&[cp], |_| rng.gen_range(-0.3..0.3));
        let held = [bev0, w0, b0];
        for slot in 0..3 {
            let held_c = held.clone();
            let pseudo = pseudo.clone();
            let f = move |tape: &mut Tape, x: Var| {
                let vs: Vec<Var> = held_c
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == slot { x } else { tape.leaf(t.clone()) })
                    .collect();
                let head = DistillHead { w: vs[1], b: vs[2] };
                distill_loss(tape, vs[0], &pseudo, &head)
                    .map(|o| o.loss)
                    .map_err(|_| NumericsError::NonFinite("distill"))
            };
            let report = grad_check(f, &held[slot], 1e-6, 1e-4).unwrap();
            assert!(
                report.pass,
                "slot {slot}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn depth_loss_minimum_and_oracle() {
        let mut tape = Tape::new();
        let bins = DepthBins::new(4, 1.0, 9.0).unwrap();
        // Bin width 2: centers 2, 4, 6, 8.
        let n = 3;
        // Perfect one-hot prediction for pixel 0 (bin 1) and pixel 2 (bin 3).
        let mut ddata = vec![0.0; n * 4];
        ddata[1] = 1.0; // pixel 0, bin 1
        ddata[2 * 4 + 3] = 1.0; // pixel 2, bin 3
        ddata[4] = 1.0; // pixel 1 is unsupervised, value arbitrary
        let depth = leaf(&mut tape, &[n, 4], ddata.clone());
        let aux = leaf(&mut tape, &[n, 1], vec![4.0, 0.0, 8.0]);
        let hits = vec![(0usize, 4.0), (2usize, 8.0)];
        let out = depth_loss(&mut tape, depth, Some(aux), &hits, &bins).unwrap();
        assert_eq!(out.n_hits, 2);
        // Perfect prediction and aux: loss at the clamping floor.
        assert!(tape.value(out.loss).data()[0].abs() < 1e-9);

        // Random case matches a scalar loop.
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let raw: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.01..0.99)).collect();
        let depth = leaf(&mut tape, &[n, 4], raw.clone());
        let aux_raw = vec![3.0, 1.0, 5.5];
        let aux = leaf(&mut tape, &[n, 1], aux_raw.clone());
        let hits = vec![(0usize, 2.3), (1usize, 7.9), (2usize, 100.0)];
        let out = depth_loss(&mut tape, depth, Some(aux), &hits, &bins).unwrap();
        // The 100 m hit is outside the bin range and must be excluded.
        assert_eq!(out.n_hits, 2);
        let mut want = 0.0;
        for &(pixel, d) in &hits[..2] {
            let bin = bins.bin_of(d).unwrap();
            for b in 0..4 {
                let p = raw[pixel * 4 + b].clamp(PROB_EPS, 1.0 - PROB_EPS);
                want += if b == bin { -p.ln() } else { -(1.0 - p).ln() };
            }
            want += (aux_raw[pixel] - d).abs();
        }
        want /= 2.0;
        let got = tape.value(out.loss).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn depth_loss_gradients_match_finite_differences() {
        let bins = DepthBins::new(3, 1.0, 7.0).unwrap();
        let hits = vec![(0usize, 2.0), (2usize, 6.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let d0 = Tensor::from_fn(&[3, 3], |_| rng.gen_range(0.05..0.95));
        let hits_c = hits.clone();
        let f = move |tape: &mut Tape, x: Var| {
            let aux = tape.leaf(Tensor::new(vec![3, 1], vec![2.5, 0.0, 5.0]).unwrap());
            depth_loss(tape, x, Some(aux), &hits_c, &bins)
                .map(|o| o.loss)
                .map_err(|_| NumericsError::NonFinite("depth"))
        };
        let report = grad_check(f, &d0, 1e-6, 1e-4).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn lidar_hits_keep_the_nearest_depth() {
        // Camera at origin of ego, looking along +x.
        let rot = Matrix3::from_columns(&[
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        let cam = CameraModel::new(
            16.0,
            16.0,
            15.5,
            11.5,
            32,
            24,
            Pose::new(rot, Vector3::zeros()).unwrap().invert(),
        )
        .unwrap();
        // Two points on the optical axis at different depths, one behind.
        let pts = [[4.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let hits = lidar_depth_hits(&cam, Scale::Quarter, &pts);
        assert_eq!(hits.len(), 1);
        let (pixel, d) = hits[0];
        assert!((d - 2.0).abs() < 1e-12);
        // Principal point at full res (15.5, 11.5) -> quarter scale (3.5, 2.5)
        // -> rounds to pixel (4, 3) of the 8x6 map.
        assert_eq!(pixel, 3 * 8 + 4);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let mut tape = Tape::new();
        let det = tape.leaf(Tensor::scalar(0.3));
        let distill = tape.leaf(Tensor::scalar(0.2));
        let depth = tape.leaf(Tensor::scalar(0.7));
        let w = LossWeights::default();
        let total = total_loss(&mut tape, det, distill, depth, &w).unwrap();
        assert!((tape.value(total).data()[0] - (0.3 + 7.0 * 0.2 + 0.7)).abs() < 1e-12);

        let only_det = LossWeights {
            det: 1.0,
            distill: 0.0,
            depth: 0.0,
        };
        let total = total_loss(&mut tape, det, distill, depth, &only_det).unwrap();
        assert_eq!(tape.value(total).data()[0], 0.3);

        let bad = LossWeights {
            det: -1.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&mut tape, det, distill, depth, &bad).is_err());
    }

    #[test]
    fn deep_supervision_averages_layer_losses() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = DetLossConfig::default();
        let gts = vec![gt_at(0.0, 1.0, 1)];
        let mut heads = Vec::new();
        let mut singles = Vec::new();
        for _ in 0..3 {
            let anchors = rand_leaf(&mut tape, &[3, ANCHOR_DIM], &mut rng, 1.0);
            let logits = rand_leaf(&mut tape, &[3, 2], &mut rng, 1.0);
            let quality = rand_leaf(&mut tape, &[3, 2], &mut rng, 1.0);
            heads.push(DetHead {
                anchors,
                class_logits: logits,
                quality,
            });
            let assignment = assign(&tape, anchors, logits, &gts, &cfg).unwrap();
            let targets = quality_targets(&tape, anchors, &assignment, &gts);
            let l = det_loss(
                &mut tape, anchors, logits, quality, &gts, &assignment, &targets, &cfg,
            )
            .unwrap();
            singles.push(tape.value(l).data()[0]);
        }
        let deep = det_loss_deep(&mut tape, &heads, &gts, &cfg).unwrap();
        let want = singles.iter().sum::<f64>() / 3.0;
        assert!((tape.value(deep).data()[0] - want).abs() < 1e-12);
    }
}
