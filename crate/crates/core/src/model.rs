//! Full detector assembly: a named parameter store with seeded
//! initialisation and binary checkpoints, plus the per-frame forward pass
//! that wires camera features through depth lifting, BEV pooling, and the
//! query decoder.
//!
//! The store is the single source of truth for weights. [`bind`] turns it
//! into tape leaves each step; the same names key the gradient lookup, so
//! an optimiser can walk `BoundModel::vars` and update the store in place.
//! Feature sources can be disabled independently: a disabled branch feeds
//! zero grids, and because both aggregation paths fuse samples purely
//! multiplicatively before the output projection, a zero grid is an exact
//! no-op on the queries rather than an approximation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{
    decode_frame, init_anchors, AggVars, AnchorEncoderVars, AttnVars, DecodeError, DecodeOutput,
    DecoderConfig, DecoderVars, FfnVars, LayerVars, MemoryInput, RefineVars, ANCHOR_DIM,
};
use crate::featprov::{FeatError, FeatureProvider, Scale};
use crate::lifting::{
    lift_frame, BevEncoderVars, ConvBlockVars, DepthHeadVars, LiftError, LiftingConfig,
    LiftingVars,
};
use crate::losses::DistillHead;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::scene::{read_array, write_array, ArrayData, Scene, SceneError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("parameter {0} already present")]
    DuplicateParam(String),
    #[error("parameter {0} missing from the store")]
    MissingParam(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Features(#[from] FeatError),
    #[error(transparent)]
    Lifting(#[from] LiftError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dataset(#[from] SceneError),
}

/// Everything needed to size the parameter set and run the forward pass.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub lifting: LiftingConfig,
    /// Residual conv blocks in the BEV encoder.
    pub bev_blocks: usize,
    /// Channels of the camera feature maps, the pooled BEV grid, and the
    /// distillation input.
    pub feature_channels: usize,
    /// Channels of the distillation target grid.
    pub pseudo_channels: usize,
    pub n_cameras: usize,
    /// Feature-pyramid scales the decoder samples from (camera-major).
    pub scales: Vec<Scale>,
    /// Enable the lifted BEV branch (pooling, encoding, BEV aggregation).
    pub use_bev: bool,
    /// Enable perspective-view aggregation from the feature pyramid.
    pub use_pv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: DecoderConfig::default(),
            lifting: LiftingConfig::default(),
            bev_blocks: 1,
            feature_channels: 16,
            pseudo_channels: 16,
            n_cameras: 6,
            scales: Scale::ALL.to_vec(),
            use_bev: true,
            use_pv: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.decoder
            .validate()
            .map_err(|e| ModelError::BadConfig(e.to_string()))?;
        if !self.use_bev && !self.use_pv {
            return Err(ModelError::BadConfig(
                "at least one feature source (BEV or PV) must stay enabled".into(),
            ));
        }
        if self.feature_channels == 0 {
            return Err(ModelError::BadConfig("feature_channels must be > 0".into()));
        }
        if self.pseudo_channels == 0 {
            return Err(ModelError::BadConfig("pseudo_channels must be > 0".into()));
        }
        if self.n_cameras == 0 {
            return Err(ModelError::BadConfig("n_cameras must be > 0".into()));
        }
        if self.scales.is_empty() {
            return Err(ModelError::BadConfig("scales must not be empty".into()));
        }
        Ok(())
    }

    fn n_paths(&self) -> usize {
        self.n_cameras * self.scales.len()
    }
}

/// Named, ordered tensor map. Iteration order is the lexicographic name
/// order, so flattening weights or gradients is reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    /// Parameter name -> array file name.
    params: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), ModelError> {
        if self.params.contains_key(name) {
            return Err(ModelError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|t| t.data().len()).sum()
    }

    /// Write a checkpoint: a JSON manifest plus one binary array per
    /// parameter, in the same container format as the dataset arrays.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir).map_err(SceneError::from)?;
        let mut manifest = CheckpointManifest {
            version: 1,
            params: BTreeMap::new(),
        };
        for (i, (name, tensor)) in self.params.iter().enumerate() {
            let file = format!("p{i:04}.bin");
            write_array(
                &dir.join(&file),
                tensor.shape(),
                &ArrayData::F64(tensor.data().to_vec()),
            )?;
            manifest.params.insert(name.clone(), file);
        }
        let json = serde_json::to_string_pretty(&manifest).map_err(SceneError::from)?;
        std::fs::write(dir.join("params.json"), json).map_err(SceneError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(dir.join("params.json")).map_err(SceneError::from)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(SceneError::from)?;
        if manifest.version != 1 {
            return Err(ModelError::Mismatch(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, file) in &manifest.params {
            let (dims, data) = read_array(&dir.join(file))?;
            let vals = data.as_f64().ok_or_else(|| {
                ModelError::Mismatch(format!("parameter {name}: checkpoint array must be f64"))
            })?;
            store.insert(name, Tensor::new(dims, vals.to_vec())?)?;
        }
        Ok(store)
    }
}

/// Uniform `+-1/sqrt(fan_in)` with fan-in every axis but the last; this
/// keeps activations O(1) at any width and is exactly reproducible from the
/// seed because parameters are always created in the same order.
fn init_weight(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let fan_in: usize = dims[..dims.len() - 1].iter().product();
    let amp = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::new(dims.to_vec(), data).expect("init shape is consistent")
}

fn zeros(dims: &[usize]) -> Tensor {
    Tensor::zeros(dims)
}

/// The fixed parameter schema: every (name, shape) pair the model owns, in
/// creation order. Initialisation, binding, and checkpoint validation all
/// walk this same list.
fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let c = cfg.decoder.embed;
    let cf = cfg.feature_channels;
    let d = cfg.lifting.bins.d;
    let hidden = cfg.lifting.hidden;
    let k = cfg.decoder.keypoints_per_query();
    let n_paths = cfg.n_paths();
    let kl3 = cfg.decoder.n_learn_keypoints * 3;
    // (name, dims, is_bias): biases start at zero, weights at random.
    let mut out: Vec<(String, Vec<usize>, bool)> = Vec::new();
    let mut push = |name: String, dims: Vec<usize>, bias: bool| out.push((name, dims, bias));

    push("lift.depth.w1".into(), vec![cf, hidden], false);
    push("lift.depth.b1".into(), vec![hidden], true);
    push("lift.depth.w2".into(), vec![hidden, d], false);
    push("lift.depth.b2".into(), vec![d], true);
    for b in 0..cfg.bev_blocks {
        push(format!("lift.enc{b}.w1"), vec![3, 3, cf, cf], false);
        push(format!("lift.enc{b}.b1"), vec![cf], true);
        push(format!("lift.enc{b}.w2"), vec![3, 3, cf, cf], false);
        push(format!("lift.enc{b}.b2"), vec![cf], true);
    }
    push("dec.anchor_enc.w1".into(), vec![ANCHOR_DIM, c], false);
    push("dec.anchor_enc.b1".into(), vec![c], true);
    push("dec.anchor_enc.w2".into(), vec![c, c], false);
    push("dec.anchor_enc.b2".into(), vec![c], true);
    for i in 0..cfg.decoder.n_layers() {
        let attn = |tag: &str, out: &mut dyn FnMut(String, Vec<usize>, bool)| {
            for part in ["wq", "wk", "wv", "wo"] {
                out(format!("dec.l{i}.{tag}.{part}"), vec![c, c], false);
            }
            for part in ["bq", "bk", "bv", "bo"] {
                out(format!("dec.l{i}.{tag}.{part}"), vec![c], true);
            }
        };
        if i > 0 {
            attn("temporal", &mut push);
        }
        attn("self", &mut push);
        if kl3 > 0 {
            push(format!("dec.l{i}.kp.w"), vec![c, kl3], false);
            push(format!("dec.l{i}.kp.b"), vec![kl3], true);
        }
        push(format!("dec.l{i}.bev.w_attn"), vec![c, k], false);
        push(format!("dec.l{i}.bev.b_attn"), vec![k], true);
        push(format!("dec.l{i}.bev.w_out"), vec![cf, c], false);
        push(format!("dec.l{i}.pv.w_attn"), vec![c, k * n_paths], false);
        push(format!("dec.l{i}.pv.b_attn"), vec![k * n_paths], true);
        push(format!("dec.l{i}.pv.w_out"), vec![cf, c], false);
        push(format!("dec.l{i}.ffn.w1"), vec![c, 2 * c], false);
        push(format!("dec.l{i}.ffn.b1"), vec![2 * c], true);
        push(format!("dec.l{i}.ffn.w2"), vec![2 * c, c], false);
        push(format!("dec.l{i}.ffn.b2"), vec![c], true);
        push(format!("dec.l{i}.refine.w_box"), vec![c, ANCHOR_DIM], false);
        push(format!("dec.l{i}.refine.b_box"), vec![ANCHOR_DIM], true);
        push(
            format!("dec.l{i}.refine.w_cls"),
            vec![c, cfg.decoder.n_classes],
            false,
        );
        push(format!("dec.l{i}.refine.b_cls"), vec![cfg.decoder.n_classes], true);
        push(format!("dec.l{i}.refine.w_quality"), vec![c, 2], false);
        push(format!("dec.l{i}.refine.b_quality"), vec![2], true);
    }
    push(
        "dec.init_features".into(),
        vec![cfg.decoder.n_queries, c],
        false,
    );
    push("distill.w".into(), vec![cf, cfg.pseudo_channels], false);
    push("distill.b".into(), vec![cfg.pseudo_channels], true);
    push("aux_depth.w".into(), vec![cf, 1], false);
    push("aux_depth.b".into(), vec![1], true);
    out
}

/// Freshly initialised parameters for `cfg`, reproducible from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, dims, bias) in schema(cfg) {
        let tensor = if bias { zeros(&dims) } else { init_weight(&mut rng, &dims) };
        store.insert(&name, tensor)?;
    }
    Ok(store)
}

/// Parameters bound onto a tape as gradient-tracked leaves, in both the
/// structured shape the forward pass needs and a flat name -> leaf map the
/// optimiser walks.
#[derive(Debug)]
pub struct BoundModel {
    pub vars: BTreeMap<String, Var>,
    pub lifting: LiftingVars,
    pub decoder: DecoderVars,
    /// `[n_queries, C]` learned initial query features.
    pub init_features: Var,
    pub distill: DistillHead,
    /// Linear head predicting one auxiliary depth scalar per PV pixel.
    pub aux_depth_w: Var,
    pub aux_depth_b: Var,
}

struct Binder<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
    expected: BTreeMap<String, Vec<usize>>,
    vars: BTreeMap<String, Var>,
}

impl Binder<'_> {
    fn var(&mut self, name: &str) -> Result<Var, ModelError> {
        let tensor = self
            .store
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let dims = self
            .expected
            .remove(name)
            .ok_or_else(|| ModelError::Mismatch(format!("parameter {name} bound twice")))?;
        if tensor.shape() != dims.as_slice() {
            return Err(ModelError::Mismatch(format!(
                "parameter {name}: expected shape {:?}, stored {:?}",
                dims,
                tensor.shape()
            )));
        }
        let var = self.tape.leaf(tensor.clone().with_grad());
        self.vars.insert(name.to_string(), var);
        Ok(var)
    }

    fn attn(&mut self, layer: usize, tag: &str) -> Result<AttnVars, ModelError> {
        Ok(AttnVars {
            wq: self.var(&format!("dec.l{layer}.{tag}.wq"))?,
            bq: self.var(&format!("dec.l{layer}.{tag}.bq"))?,
            wk: self.var(&format!("dec.l{layer}.{tag}.wk"))?,
            bk: self.var(&format!("dec.l{layer}.{tag}.bk"))?,
            wv: self.var(&format!("dec.l{layer}.{tag}.wv"))?,
            bv: self.var(&format!("dec.l{layer}.{tag}.bv"))?,
            wo: self.var(&format!("dec.l{layer}.{tag}.wo"))?,
            bo: self.var(&format!("dec.l{layer}.{tag}.bo"))?,
        })
    }

    fn agg(&mut self, layer: usize, tag: &str) -> Result<AggVars, ModelError> {
        Ok(AggVars {
            w_attn: self.var(&format!("dec.l{layer}.{tag}.w_attn"))?,
            b_attn: self.var(&format!("dec.l{layer}.{tag}.b_attn"))?,
            w_out: self.var(&format!("dec.l{layer}.{tag}.w_out"))?,
        })
    }
}

/// Bind every parameter in the schema onto `tape` with gradients enabled.
/// Fails if the store is missing a name or holds a wrong shape, so a stale
/// checkpoint cannot be silently reinterpreted.
pub fn bind(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig) -> Result<BoundModel, ModelError> {
    cfg.validate()?;
    let expected: BTreeMap<String, Vec<usize>> = schema(cfg)
        .into_iter()
        .map(|(name, dims, _)| (name, dims))
        .collect();
    let mut b = Binder {
        tape,
        store,
        expected,
        vars: BTreeMap::new(),
    };

    let lifting = LiftingVars {
        depth: DepthHeadVars {
            w1: b.var("lift.depth.w1")?,
            b1: b.var("lift.depth.b1")?,
            w2: b.var("lift.depth.w2")?,
            b2: b.var("lift.depth.b2")?,
        },
        encoder: BevEncoderVars {
            blocks: (0..cfg.bev_blocks)
                .map(|blk| {
                    Ok(ConvBlockVars {
                        w1: b.var(&format!("lift.enc{blk}.w1"))?,
                        b1: b.var(&format!("lift.enc{blk}.b1"))?,
                        w2: b.var(&format!("lift.enc{blk}.w2"))?,
                        b2: b.var(&format!("lift.enc{blk}.b2"))?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()?,
        },
    };
    let anchor_enc = AnchorEncoderVars {
        w1: b.var("dec.anchor_enc.w1")?,
        b1: b.var("dec.anchor_enc.b1")?,
        w2: b.var("dec.anchor_enc.w2")?,
        b2: b.var("dec.anchor_enc.b2")?,
    };
    let mut layers = Vec::with_capacity(cfg.decoder.n_layers());
    for i in 0..cfg.decoder.n_layers() {
        let temporal = if i > 0 { Some(b.attn(i, "temporal")?) } else { None };
        let self_attn = b.attn(i, "self")?;
        let keypoint = if cfg.decoder.n_learn_keypoints > 0 {
            Some((
                b.var(&format!("dec.l{i}.kp.w"))?,
                b.var(&format!("dec.l{i}.kp.b"))?,
            ))
        } else {
            None
        };
        let bev = b.agg(i, "bev")?;
        let pv = b.agg(i, "pv")?;
        let ffn = FfnVars {
            w1: b.var(&format!("dec.l{i}.ffn.w1"))?,
            b1: b.var(&format!("dec.l{i}.ffn.b1"))?,
            w2: b.var(&format!("dec.l{i}.ffn.w2"))?,
            b2: b.var(&format!("dec.l{i}.ffn.b2"))?,
        };
        let refine = RefineVars {
            w_box: b.var(&format!("dec.l{i}.refine.w_box"))?,
            b_box: b.var(&format!("dec.l{i}.refine.b_box"))?,
            w_cls: b.var(&format!("dec.l{i}.refine.w_cls"))?,
            b_cls: b.var(&format!("dec.l{i}.refine.b_cls"))?,
            w_quality: b.var(&format!("dec.l{i}.refine.w_quality"))?,
            b_quality: b.var(&format!("dec.l{i}.refine.b_quality"))?,
        };
        layers.push(LayerVars {
            temporal,
            self_attn,
            keypoint,
            bev,
            pv,
            ffn,
            refine,
        });
    }
    let init_features = b.var("dec.init_features")?;
    let distill = DistillHead {
        w: b.var("distill.w")?,
        b: b.var("distill.b")?,
    };
    let aux_depth_w = b.var("aux_depth.w")?;
    let aux_depth_b = b.var("aux_depth.b")?;
    debug_assert!(b.expected.is_empty(), "schema entries left unbound");
    Ok(BoundModel {
        vars: b.vars,
        lifting,
        decoder: DecoderVars { anchor_enc, layers },
        init_features,
        distill,
        aux_depth_w,
        aux_depth_b,
    })
}

/// Everything the losses and the tracker need from one frame.
pub struct ForwardOutput {
    pub decode: DecodeOutput,
    /// Encoded BEV grid `[nx, ny, C]`; None when the BEV branch is off.
    pub bev: Option<Var>,
    /// Per-camera depth distributions `[N_pix, D]` at the lifting scale;
    /// empty when the BEV branch is off.
    pub depths: Vec<Var>,
    /// Per-camera auxiliary depth estimates `[N_pix, 1]`, same order.
    pub aux_depth: Vec<Var>,
}

/// Run the full forward pass for one frame. Feature maps come from the
/// provider at every (camera, scale) path; disabled branches substitute
/// zero grids, which the aggregation design turns into exact no-ops.
#[allow(clippy::too_many_arguments)]
pub fn forward_frame(
    tape: &mut Tape,
    scene: &Scene,
    frame_index: usize,
    provider: &dyn FeatureProvider,
    memory: Option<&MemoryInput>,
    bound: &BoundModel,
    cfg: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    cfg.validate()?;
    let frame = scene.frames.get(frame_index).ok_or_else(|| {
        ModelError::Mismatch(format!(
            "frame {frame_index} out of range ({} frames)",
            scene.frames.len()
        ))
    })?;
    if frame.cameras.len() != cfg.n_cameras {
        return Err(ModelError::Mismatch(format!(
            "config expects {} cameras, frame has {}",
            cfg.n_cameras,
            frame.cameras.len()
        )));
    }
    if provider.channels() != cfg.feature_channels {
        return Err(ModelError::Mismatch(format!(
            "provider emits {} channels, config expects {}",
            provider.channels(),
            cfg.feature_channels
        )));
    }

    // Perspective-view pyramid, camera-major: pv[camera][scale] = [h, w, C].
    let mut pv: Vec<Vec<Var>> = Vec::with_capacity(cfg.n_cameras);
    for (ci, cam) in frame.cameras.iter().enumerate() {
        let mut per_cam = Vec::with_capacity(cfg.scales.len());
        for &scale in &cfg.scales {
            let var = if cfg.use_pv {
                let map = provider.compute(scene, frame_index, ci, scale)?;
                tape.leaf(map.grid.to_tensor_3d())
            } else {
                let p = cam.pinhole_params(scale.factor());
                tape.leaf(Tensor::zeros(&[p.height, p.width, cfg.feature_channels]))
            };
            per_cam.push(var);
        }
        pv.push(per_cam);
    }

    // Lifted BEV branch plus the auxiliary depth head on the same features.
    let (bev, depths, aux_depth) = if cfg.use_bev {
        let mut lift_inputs = Vec::with_capacity(cfg.n_cameras);
        let mut aux = Vec::with_capacity(cfg.n_cameras);
        for ci in 0..frame.cameras.len() {
            let map = provider.compute(scene, frame_index, ci, cfg.lifting.scale)?;
            let feat = tape.leaf(map.grid.to_tensor_rows());
            let proj = tape.matmul(feat, bound.aux_depth_w)?;
            aux.push(tape.add_bias(proj, bound.aux_depth_b)?);
            lift_inputs.push(feat);
        }
        let lifted = lift_frame(
            tape,
            &frame.cameras,
            &lift_inputs,
            &bound.lifting,
            &cfg.lifting,
            &scene.grid,
        )?;
        (Some(lifted.bev), lifted.depths, aux)
    } else {
        (None, Vec::new(), Vec::new())
    };
    let bev_grid = match bev {
        Some(v) => v,
        None => tape.leaf(Tensor::zeros(&[
            scene.grid.nx,
            scene.grid.ny,
            cfg.feature_channels,
        ])),
    };

    let anchors = tape.leaf(init_anchors(&cfg.decoder, &scene.grid));
    let decode = decode_frame(
        tape,
        anchors,
        bound.init_features,
        bev_grid,
        &scene.grid,
        &pv,
        &frame.cameras,
        &cfg.scales,
        memory,
        &bound.decoder,
        &cfg.decoder,
    )?;
    Ok(ForwardOutput {
        decode,
        bev,
        depths,
        aux_depth,
    })
}
