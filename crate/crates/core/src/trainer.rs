//! Sequential optimization loop: one frame per step with a temporal
//! instance memory, full-graph reverse-mode gradients, global-norm
//! clipping, and a warmup-plus-cosine learning-rate schedule.
//!
//! Each step rebinds the parameter store onto a fresh tape, so gradients
//! never flow across frames; temporal context reaches the decoder only
//! through detached propagated queries, exactly as at inference time. The
//! BEV augmentation op lives in [`crate::scene::augment_scene`] and is
//! re-exported here; it is applied per sequence by the caller, keeping
//! this loop deterministic.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::decoder::MemoryInput;
use crate::featprov::FeatureProvider;
use crate::losses::{
    depth_loss, det_loss_deep, distill_loss, lidar_depth_hits, total_loss, DetHead,
    DetLossConfig, GtTarget, LossError, LossWeights,
};
use crate::model::{bind, forward_frame, BoundModel, ForwardOutput, ModelConfig, ModelError, ParamStore};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::pseudolabel::PseudoLabelGrid;
use crate::scene::{Frame, Scene};
use crate::tracker::{detach_queries, InstanceMemory, TrackError, TrackerConfig};

pub use crate::scene::{augment_scene, AugmentParams};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("training diverged at step {step}: {details}")]
    NonFinite { step: usize, details: String },
    #[error(transparent)]
    Losses(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tracking(#[from] TrackError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Peak learning rate after warmup.
    pub lr: f64,
    /// Linear warmup steps from lr/warmup up to lr.
    pub warmup: usize,
    /// Cosine-decay the rate to zero over the remaining steps.
    pub cosine: bool,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub steps: usize,
    /// Reserved for stochastic choices made by the caller (weight init,
    /// augmentation draws); the loop itself is deterministic.
    pub seed: u64,
    pub weights: LossWeights,
    pub det: DetLossConfig,
    /// Momentum for plain SGD, beta1 for the adaptive variant.
    pub momentum: f64,
    /// Adam-style adaptive updates with decoupled weight decay instead of
    /// SGD with momentum.
    pub adaptive: bool,
    pub beta2: f64,
    pub adaptive_eps: f64,
    /// Decoupled weight decay (adaptive variant only).
    pub weight_decay: f64,
    /// Tracker emission threshold used for the training-time memory.
    pub confidence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            warmup: 500,
            cosine: true,
            clip: 5.0,
            steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            det: DetLossConfig::default(),
            momentum: 0.9,
            adaptive: false,
            beta2: 0.999,
            adaptive_eps: 1e-8,
            weight_decay: 0.0,
            confidence_threshold: 0.4,
        }
    }
}

impl TrainConfig {
    /// Zero lr is allowed: it must leave the weights bitwise unchanged, and
    /// that property is part of the contract.
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(TrainerError::BadConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(TrainerError::BadConfig(format!(
                "clip norm must be finite and > 0, got {}",
                self.clip
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainerError::BadConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(TrainerError::BadConfig(format!(
                "beta2 must lie in (0, 1), got {}",
                self.beta2
            )));
        }
        if !(self.adaptive_eps > 0.0) {
            return Err(TrainerError::BadConfig("adaptive eps must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(TrainerError::BadConfig("weight decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(TrainerError::BadConfig(
                "confidence threshold must lie in [0, 1]".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| TrainerError::BadConfig(e.to_string()))?;
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup to `lr`, then either constant or
/// cosine decay toward zero at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup > 0 && step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    if !cfg.cosine {
        return cfg.lr;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1);
    let progress = (step - cfg.warmup) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First-order optimizer over named flat gradients. Plain SGD with momentum
/// by default; an Adam-style adaptive variant with decoupled weight decay
/// behind `adaptive`. Clipping rescales the whole gradient set so its global
/// L2 norm never exceeds `clip`.
pub struct Optimizer {
    momentum: f64,
    adaptive: bool,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip: f64,
    velocity: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: u32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            momentum: cfg.momentum,
            adaptive: cfg.adaptive,
            beta2: cfg.beta2,
            eps: cfg.adaptive_eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.clip,
            velocity: BTreeMap::new(),
            second: BTreeMap::new(),
            t: 0,
        }
    }

    /// Apply one update in place. Returns (pre-clip gradient norm, applied
    /// update norm).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(f64, f64), TrainerError> {
        let sq_sum: f64 = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum();
        let grad_norm = sq_sum.sqrt();
        if !grad_norm.is_finite() {
            return Err(TrainerError::Mismatch(format!(
                "non-finite gradient norm {grad_norm}"
            )));
        }
        let scale = if grad_norm > self.clip { self.clip / grad_norm } else { 1.0 };
        self.t += 1;
        let mut update_sq = 0.0;
        for (name, g) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| TrainerError::Mismatch(format!("gradient for unknown parameter {name}")))?;
            let data = param.data_mut();
            if data.len() != g.len() {
                return Err(TrainerError::Mismatch(format!(
                    "parameter {name}: {} weights, {} gradient entries",
                    data.len(),
                    g.len()
                )));
            }
            if self.adaptive {
                let m = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let bc1 = 1.0 - self.momentum.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..g.len() {
                    let gs = g[i] * scale;
                    m[i] = self.momentum * m[i] + (1.0 - self.momentum) * gs;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gs * gs;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    let delta = lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
                    data[i] -= delta;
                    update_sq += delta * delta;
                }
            } else {
                let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                for i in 0..g.len() {
                    v[i] = self.momentum * v[i] + g[i] * scale;
                    let delta = lr * v[i];
                    data[i] -= delta;
                    update_sq += delta * delta;
                }
            }
        }
        Ok((grad_norm, update_sq.sqrt()))
    }
}

/// A scene with its per-frame distillation targets.
pub struct TrainDataset {
    pub scene: Scene,
    /// One pseudo-label grid per frame, aligned with `scene.frames`.
    pub pseudo: Vec<PseudoLabelGrid>,
}

impl TrainDataset {
    pub fn new(scene: Scene, pseudo: Vec<PseudoLabelGrid>) -> Result<Self, TrainerError> {
        if pseudo.len() != scene.frames.len() {
            return Err(TrainerError::Mismatch(format!(
                "{} pseudo-label grids for {} frames",
                pseudo.len(),
                scene.frames.len()
            )));
        }
        if scene.frames.is_empty() {
            return Err(TrainerError::Mismatch("dataset has no frames".into()));
        }
        Ok(TrainDataset { scene, pseudo })
    }
}

/// One logged optimization step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub frame_index: usize,
    pub lr: f64,
    /// Propagated queries visible to this step's decoder.
    pub memory_len: usize,
    pub det: f64,
    pub distill: f64,
    pub depth: f64,
    pub total: f64,
    pub grad_norm: f64,
}

struct FrameLoss {
    total: Var,
    det: f64,
    distill: f64,
    depth: f64,
}

fn scalar_value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Assemble the weighted loss for one frame from the forward outputs:
/// deep-supervised detection over every decoder block, cosine distillation
/// against the frame's pseudo-labels, and per-camera depth supervision from
/// the LiDAR hits (both skipped cleanly when the BEV branch is off).
fn frame_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    frame: &Frame,
    pseudo: &PseudoLabelGrid,
    bound: &BoundModel,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FrameLoss, TrainerError> {
    let gts: Vec<GtTarget> = frame
        .gt
        .iter()
        .map(GtTarget::from_gt)
        .collect::<Result<_, LossError>>()?;
    let heads: Vec<DetHead> = out
        .decode
        .layers
        .iter()
        .map(|l| DetHead {
            anchors: l.anchors,
            class_logits: l.class_logits,
            quality: l.quality,
        })
        .collect();
    let det = det_loss_deep(tape, &heads, &gts, &cfg.det)?;

    let distill = match out.bev {
        Some(bev) => distill_loss(tape, bev, pseudo, &bound.distill)?.loss,
        None => tape.leaf(Tensor::scalar(0.0)),
    };

    let depth = if out.depths.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        let points: Vec<[f64; 3]> = frame.lidar.iter().map(|p| p.pos).collect();
        let mut acc = tape.leaf(Tensor::scalar(0.0));
        for (ci, (&d, &aux)) in out.depths.iter().zip(&out.aux_depth).enumerate() {
            let hits = lidar_depth_hits(&frame.cameras[ci], model_cfg.lifting.scale, &points);
            let dl = depth_loss(tape, d, Some(aux), &hits, &model_cfg.lifting.bins)?;
            acc = tape.add(acc, dl.loss)?;
        }
        tape.scale(acc, 1.0 / out.depths.len() as f64)?
    };

    let total = total_loss(tape, det, distill, depth, &cfg.weights)?;
    Ok(FrameLoss {
        total,
        det: scalar_value(tape, det),
        distill: scalar_value(tape, distill),
        depth: scalar_value(tape, depth),
    })
}

/// Train over the dataset's frame sequence for `cfg.steps` steps, mutating
/// `store` in place (save it afterwards for a checkpoint). Frames are
/// visited in order, cyclically; the instance memory carries across frames
/// within each pass and is reset whenever the sequence restarts, so the
/// first frame always trains with empty memory. Deterministic: same inputs,
/// same curve, same weights.
pub fn train_sequence(
    dataset: &TrainDataset,
    provider: &dyn FeatureProvider,
    store: &mut ParamStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>, TrainerError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.pseudo.len() != dataset.scene.frames.len() {
        return Err(TrainerError::Mismatch(
            "dataset pseudo-label count does not match its frames".into(),
        ));
    }
    let n_frames = dataset.scene.frames.len();
    if n_frames == 0 {
        return Err(TrainerError::Mismatch("dataset has no frames".into()));
    }
    let tracker_cfg = TrackerConfig {
        confidence_threshold: cfg.confidence_threshold,
        n_temporal: model_cfg.decoder.n_temporal,
    };
    let mut optimizer = Optimizer::new(cfg);
    let mut memory = InstanceMemory::new();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let frame_index = step % n_frames;
        if frame_index == 0 {
            memory = InstanceMemory::new();
        }
        let frame = &dataset.scene.frames[frame_index];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, store, model_cfg)?;

        let propagated = memory.propagate(&frame.ego_pose, frame.timestamp)?;
        let memory_len = propagated.as_ref().map_or(0, |p| p.ids.len());
        let mem_input = propagated.map(|p| MemoryInput {
            anchors: tape.leaf(p.anchors),
            features: tape.leaf(p.features),
            ids: p.ids,
        });
        let out = forward_frame(
            &mut tape,
            &dataset.scene,
            frame_index,
            provider,
            mem_input.as_ref(),
            &bound,
            model_cfg,
        )?;
        let loss = frame_loss(
            &mut tape,
            &out,
            frame,
            &dataset.pseudo[frame_index],
            &bound,
            model_cfg,
            cfg,
        )?;
        let total = scalar_value(&tape, loss.total);
        if !total.is_finite() {
            return Err(TrainerError::NonFinite {
                step,
                details: format!(
                    "total {total} (det {}, distill {}, depth {}) on frame {frame_index}",
                    loss.det, loss.distill, loss.depth
                ),
            });
        }

        let grads = tape.backward(loss.total)?;
        let mut grad_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, &var) in &bound.vars {
            if let Some(g) = grads.get(var) {
                grad_map.insert(name.clone(), g.to_vec());
            }
        }
        let lr = lr_at(cfg, step);
        let (grad_norm, _) = optimizer.step(store, &grad_map, lr)?;

        // Refresh the instance memory from the detached final layer, exactly
        // like inference.
        let detections = detach_queries(&tape, &out.decode);
        memory.update_ids(
            frame_index,
            &frame.ego_pose,
            frame.timestamp,
            &detections,
            &tracker_cfg,
        )?;

        curve.push(StepRecord {
            step,
            frame_index,
            lr,
            memory_len,
            det: loss.det,
            distill: loss.distill,
            depth: loss.depth,
            total,
            grad_norm,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    pub(super) use super::*;
    use super::*;
    use crate::featprov::{ProceduralProvider, Scale};
    use crate::geometry::BevGridSpec;
    use crate::lifting::{DepthBins, LiftingConfig};
    use crate::model::init_params;
    use crate::pseudolabel::{build_pseudo_labels, PseudoLabelConfig};
    use crate::scene::{generate_scene_with, GenParams};
    use crate::DecoderConfig;

    pub(super) fn tiny_model() -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig {
                n_queries: 4,
                n_temporal: 2,
                top_k: 2,
                embed: 8,
                temporal_layers: 1,
                n_learn_keypoints: 1,
                n_classes: 3,
            },
            lifting: LiftingConfig {
                bins: DepthBins::new(4, 1.0, 12.0).unwrap(),
                scale: Scale::Quarter,
                hidden: 4,
                refine: None,
            },
            bev_blocks: 1,
            feature_channels: 8,
            pseudo_channels: 8,
            n_cameras: 3,
            scales: vec![Scale::Quarter],
            use_bev: true,
            use_pv: true,
        }
    }

    pub(super) fn tiny_dataset(seed: u64, n_frames: usize) -> (TrainDataset, ProceduralProvider) {
        let scene = generate_scene_with(&GenParams {
            seed,
            n_frames,
            n_objects: 2,
            n_cameras: 3,
            n_ground_points: 60,
            points_per_object: 12,
            points_per_static: 8,
            n_statics: 1,
            feature_channels: 8,
            grid: BevGridSpec::new(10.0, 10.0, 4, 4).unwrap(),
            image_width: 32,
            image_height: 16,
            focal: 16.0,
            ..GenParams::default()
        })
        .unwrap();
        let provider = ProceduralProvider::for_scene(&scene).unwrap();
        let pseudo = build_pseudo_labels(&scene, &provider, &PseudoLabelConfig::default()).unwrap();
        let dataset = TrainDataset::new(scene, pseudo).unwrap();
        (dataset, provider)
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            warmup: 0,
            cosine: false,
            steps,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { clip: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -0.1, ..TrainConfig::default() }.validate().is_err());
        // lr = 0 is explicitly allowed (bitwise no-op contract).
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup: 4,
            cosine: true,
            steps: 12,
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 0) - 0.25).abs() < 1e-15);
        assert!((lr_at(&cfg, 1) - 0.5).abs() < 1e-15);
        assert!((lr_at(&cfg, 3) - 1.0).abs() < 1e-15);
        // Decay starts at the peak and follows the half cosine.
        assert!((lr_at(&cfg, 4) - 1.0).abs() < 1e-15);
        let expect = 0.5 * (1.0 + (std::f64::consts::PI * 7.0 / 8.0).cos());
        assert!((lr_at(&cfg, 11) - expect).abs() < 1e-15);

        let flat = TrainConfig { cosine: false, ..cfg };
        assert!((lr_at(&flat, 11) - 1.0).abs() < 1e-15);
        assert!((lr_at(&flat, 1) - 0.5).abs() < 1e-15);
    }

    /// Clipping contract: a norm-100 gradient with clip 5 must produce an
    /// applied update of norm exactly 5 * lr (fresh momentum state).
    #[test]
    fn clipping_bounds_the_update_norm() {
        let cfg = TrainConfig { clip: 5.0, lr: 2e-4, ..TrainConfig::default() };
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![60.0, 0.0, -80.0, 0.0]); // norm 100
        let mut opt = Optimizer::new(&cfg);
        let (grad_norm, update_norm) = opt.step(&mut store, &grads, cfg.lr).unwrap();
        assert!((grad_norm - 100.0).abs() < 1e-9);
        assert!((update_norm - 5.0 * cfg.lr).abs() < 1e-12);
        let data = store.get("w").unwrap().data();
        // Direction preserved: -lr * 5/100 * g.
        assert!((data[0] + cfg.lr * 3.0).abs() < 1e-15);
        assert!((data[2] - cfg.lr * 4.0).abs() < 1e-15);

        // Below the ceiling the gradient passes through unscaled.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![3.0, 4.0]); // norm 5, at the ceiling
        let mut opt = Optimizer::new(&cfg);
        let (_, update_norm) = opt.step(&mut store, &grads, 1.0).unwrap();
        assert!((update_norm - 5.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_updates_follow_the_adam_recipe() {
        let cfg = TrainConfig {
            adaptive: true,
            momentum: 0.9,
            beta2: 0.999,
            adaptive_eps: 1e-8,
            weight_decay: 0.0,
            clip: 1e12,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5]);
        let mut opt = Optimizer::new(&cfg);
        opt.step(&mut store, &grads, 0.1).unwrap();
        // Step 1: m_hat = g, v_hat = g^2, so the update is lr * g/(|g|+eps).
        let expect = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8));
        assert!((store.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_weights_bitwise() {
        let model_cfg = tiny_model();
        let (dataset, provider) = tiny_dataset(21, 2);
        let mut store = init_params(&model_cfg, 5).unwrap();
        let before = store.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            warmup: 0,
            steps: 3,
            ..TrainConfig::default()
        };
        let curve = train_sequence(&dataset, &provider, &mut store, &model_cfg, &cfg).unwrap();
        assert_eq!(curve.len(), 3);
        for (name, tensor) in before.iter() {
            assert_eq!(
                tensor.data(),
                store.get(name).unwrap().data(),
                "{name} changed under lr = 0"
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_components() {
        let model_cfg = tiny_model();
        let (dataset, provider) = tiny_dataset(22, 2);
        let run = || {
            let mut store = init_params(&model_cfg, 6).unwrap();
            let curve = train_sequence(
                &dataset,
                &provider,
                &mut store,
                &model_cfg,
                &quick_config(4),
            )
            .unwrap();
            (curve, store)
        };
        let (curve_a, store_a) = run();
        let (curve_b, store_b) = run();
        assert_eq!(curve_a.len(), 4);
        for (a, b) in curve_a.iter().zip(&curve_b) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.det.to_bits(), b.det.to_bits());
            assert_eq!(a.distill.to_bits(), b.distill.to_bits());
            assert_eq!(a.depth.to_bits(), b.depth.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
        for (name, tensor) in store_a.iter() {
            assert_eq!(tensor.data(), store_b.get(name).unwrap().data(), "{name}");
        }
        // Components are finite, positive where supervised, and the weighted
        // sum matches the logged total.
        let w = &TrainConfig::default().weights;
        for rec in &curve_a {
            assert!(rec.total.is_finite() && rec.det > 0.0);
            let expect = w.det * rec.det + w.distill * rec.distill + w.depth * rec.depth;
            assert!((rec.total - expect).abs() < 1e-9);
        }
        // Frames are visited cyclically.
        let frames: Vec<usize> = curve_a.iter().map(|r| r.frame_index).collect();
        assert_eq!(frames, vec![0, 1, 0, 1]);
    }

    #[test]
    fn memory_resets_at_every_sequence_start() {
        let model_cfg = tiny_model();
        let (dataset, provider) = tiny_dataset(23, 2);
        let mut store = init_params(&model_cfg, 7).unwrap();
        let mut cfg = quick_config(4);
        // Guarantee admissions into the memory regardless of confidence.
        cfg.confidence_threshold = 0.0;
        let curve = train_sequence(&dataset, &provider, &mut store, &model_cfg, &cfg).unwrap();
        let lens: Vec<usize> = curve.iter().map(|r| r.memory_len).collect();
        assert_eq!(lens[0], 0, "first frame of sequence 1 must start empty");
        assert_eq!(lens[2], 0, "first frame of sequence 2 must start empty");
        assert!(lens[1] > 0, "second frame sees propagated queries");
        assert!(lens[3] > 0, "second frame sees propagated queries");
    }

    /// The spec's overfit example: a single-frame dataset for 500 steps must
    /// cut the total loss at least tenfold between step 10 and the end.
    #[test]
    fn single_frame_overfit_improves_tenfold() {
        let model_cfg = tiny_model();
        let (dataset, provider) = tiny_dataset(24, 1);
        let mut store = init_params(&model_cfg, 8).unwrap();
        let cfg = TrainConfig {
            lr: 2e-2,
            warmup: 50,
            cosine: true,
            steps: 500,
            ..TrainConfig::default()
        };
        let curve = train_sequence(&dataset, &provider, &mut store, &model_cfg, &cfg).unwrap();
        let early = curve[10].total;
        let last = curve.last().unwrap().total;
        assert!(
            last <= early / 10.0,
            "loss only moved from {early} (step 10) to {last} (step {})",
            curve.len() - 1
        );
    }

    #[test]
    fn divergence_aborts_with_a_diagnostic() {
        let model_cfg = tiny_model();
        let (dataset, provider) = tiny_dataset(25, 1);
        let mut store = init_params(&model_cfg, 9).unwrap();
        // Poison one weight so the forward pass or the loss blows up.
        store.get_mut("dec.l0.refine.w_box").unwrap().data_mut()[0] = f64::NAN;
        let err = train_sequence(
            &dataset,
            &provider,
            &mut store,
            &model_cfg,
            &quick_config(2),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            matches!(err, TrainerError::NonFinite { .. }) || msg.contains("finite"),
            "expected a divergence diagnostic, got: {msg}"
        );
    }

    #[test]
    fn dataset_requires_aligned_pseudo_labels() {
        let (dataset, _) = tiny_dataset(26, 2);
        let scene = dataset.scene;
        let mut pseudo = dataset.pseudo;
        pseudo.pop();
        assert!(matches!(
            TrainDataset::new(scene, pseudo),
            Err(TrainerError::Mismatch(_))
        ));
    }
}
