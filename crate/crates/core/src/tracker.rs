//! Query-propagation tracking.
//!
//! Identity lives in the queries themselves: confident detections keep their
//! internal ID across frames because the decoder refines the propagated
//! query rather than re-associating boxes. The tracker owns the instance
//! memory (at most `N_t` queries), moves anchors to the next frame with a
//! constant-velocity step plus ego-motion compensation, and assigns output
//! track IDs.

use thiserror::Error;

use nalgebra::Vector3;

use crate::decoder::{Anchor, DecodeOutput, ObjectQuery, QueryOrigin, ANCHOR_DIM};
use crate::geometry::Pose;
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("time must advance: {0}")]
    Time(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("bad track line: {0}")]
    BadLine(String),
}

#[derive(Debug, Clone, Copy)]
pub struct TrackerConfig {
    /// Detections at or above this confidence are emitted (tau_track).
    pub confidence_threshold: f64,
    /// Memory budget N_t.
    pub n_temporal: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            confidence_threshold: 0.4,
            n_temporal: 16,
        }
    }
}

/// Last-frame queries with the context needed to move them forward.
#[derive(Debug, Clone)]
struct MemoryState {
    queries: Vec<ObjectQuery>,
    /// Ego-to-global pose at the remembered frame.
    ego_pose: Pose,
    timestamp: f64,
}

/// Persistent cross-frame state. `next_id` only grows, so an ID that falls
/// out of memory is never revived.
#[derive(Debug, Clone, Default)]
pub struct InstanceMemory {
    state: Option<MemoryState>,
    next_id: u64,
}

/// Detached propagated queries, ready to become a decoder `MemoryInput`.
#[derive(Debug, Clone)]
pub struct PropagatedQueries {
    /// `[N, 11]` anchors in the current ego frame.
    pub anchors: Tensor,
    /// `[N, C]` instance features, bit-copied from the stored queries.
    pub features: Tensor,
    pub ids: Vec<u64>,
}

/// One detection the tracker must label: the detached final-layer query.
#[derive(Debug, Clone)]
pub struct DetectedQuery {
    pub anchor: Anchor,
    pub feature: Vec<f64>,
    pub origin: QueryOrigin,
    pub class_id: usize,
    pub score: f64,
}

/// One output line of the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub frame: usize,
    pub track_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub anchor: Anchor,
}

impl TrackOutput {
    /// Space-separated line; `f64` Display round-trips exactly.
    pub fn to_line(&self) -> String {
        let a = self.anchor.to_array();
        let fields: Vec<String> = a.iter().map(|v| format!("{v}")).collect();
        format!(
            "{} {} {} {} {}",
            self.frame,
            self.track_id,
            self.class_id,
            self.score,
            fields.join(" ")
        )
    }

    pub fn parse_line(line: &str) -> Result<TrackOutput, TrackError> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 + ANCHOR_DIM {
            return Err(TrackError::BadLine(format!(
                "{} fields, expected {}",
                parts.len(),
                4 + ANCHOR_DIM
            )));
        }
        let bad = |what: &str| TrackError::BadLine(format!("{what}: {line}"));
        let mut a = [0.0; ANCHOR_DIM];
        for (slot, p) in a.iter_mut().zip(&parts[4..]) {
            *slot = p.parse().map_err(|_| bad("anchor field"))?;
        }
        Ok(TrackOutput {
            frame: parts[0].parse().map_err(|_| bad("frame"))?,
            track_id: parts[1].parse().map_err(|_| bad("track id"))?,
            class_id: parts[2].parse().map_err(|_| bad("class"))?,
            score: parts[3].parse().map_err(|_| bad("score"))?,
            anchor: Anchor::from_array(a),
        })
    }
}

/// Moves one anchor from the previous ego frame to the current one: constant
/// velocity step in the previous frame, then the rigid change of frame.
/// Heading is handled as a planar direction vector.
fn propagate_anchor(anchor: &Anchor, prev_to_cur: &Pose, dt: f64) -> Anchor {
    let c = anchor.center();
    let moved = Vector3::new(
        c[0] + anchor.vx * dt,
        c[1] + anchor.vy * dt,
        c[2] + anchor.vz * dt,
    );
    let center = prev_to_cur.apply(&moved);
    let rot = prev_to_cur.rotation();
    let heading = rot * Vector3::new(anchor.cos_yaw, anchor.sin_yaw, 0.0);
    let n = heading.x.hypot(heading.y);
    let (sin_yaw, cos_yaw) = if n > 1e-12 {
        (heading.y / n, heading.x / n)
    } else {
        (0.0, 1.0)
    };
    let vel = rot * Vector3::new(anchor.vx, anchor.vy, anchor.vz);
    Anchor {
        x: center.x,
        y: center.y,
        z: center.z,
        sin_yaw,
        cos_yaw,
        vx: vel.x,
        vy: vel.y,
        vz: vel.z,
        ..*anchor
    }
}

impl InstanceMemory {
    pub fn new() -> Self {
        InstanceMemory::default()
    }

    pub fn len(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.queries.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> &[ObjectQuery] {
        self.state.as_ref().map_or(&[], |s| &s.queries)
    }

    /// Moves the remembered queries into the current ego frame. Returns
    /// `None` on a cold start. The anchors are re-embedded by the decoder
    /// with its current encoder weights; the instance features are reused
    /// bit for bit.
    pub fn propagate(
        &self,
        cur_pose: &Pose,
        cur_time: f64,
    ) -> Result<Option<PropagatedQueries>, TrackError> {
        let Some(state) = &self.state else {
            return Ok(None);
        };
        let dt = cur_time - state.timestamp;
        if dt <= 0.0 || !dt.is_finite() {
            return Err(TrackError::Time(format!(
                "dt = {dt} (from {} to {cur_time})",
                state.timestamp
            )));
        }
        if state.queries.is_empty() {
            return Ok(None);
        }
        let prev_to_cur = cur_pose.invert().compose(&state.ego_pose);
        let n = state.queries.len();
        let c = state.queries[0].feature.len();
        let mut anchors = Vec::with_capacity(n * ANCHOR_DIM);
        let mut features = Vec::with_capacity(n * c);
        let mut ids = Vec::with_capacity(n);
        for q in &state.queries {
            let moved = propagate_anchor(&q.anchor, &prev_to_cur, dt);
            anchors.extend_from_slice(&moved.to_array());
            features.extend_from_slice(&q.feature);
            ids.push(q.internal_id);
        }
        Ok(Some(PropagatedQueries {
            anchors: Tensor::new(vec![n, ANCHOR_DIM], anchors).expect("valid anchor rows"),
            features: Tensor::new(vec![n, c], features).expect("valid feature rows"),
            ids,
        }))
    }

    /// Labels the frame's detections and refreshes the memory.
    ///
    /// Propagated queries keep their internal ID; fresh confident queries get
    /// a new monotonically increasing one. Detections below the confidence
    /// threshold produce no output but may stay in memory when they rank in
    /// the top `N_t` by confidence.
    pub fn update_ids(
        &mut self,
        frame: usize,
        ego_pose: &Pose,
        timestamp: f64,
        detections: &[DetectedQuery],
        cfg: &TrackerConfig,
    ) -> Result<Vec<TrackOutput>, TrackError> {
        {
            let mut seen: Vec<u64> = detections
                .iter()
                .filter_map(|d| match d.origin {
                    QueryOrigin::Propagated(id) => Some(id),
                    QueryOrigin::Fresh(_) => None,
                })
                .collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(TrackError::Mismatch(
                    "duplicate propagated IDs in one frame".into(),
                ));
            }
        }
        // Memory admission: top N_t by confidence, ties to the lower index.
        let mut ranked: Vec<usize> = (0..detections.len()).collect();
        ranked.sort_by(|&a, &b| {
            detections[b]
                .score
                .partial_cmp(&detections[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut admitted = vec![false; detections.len()];
        for &i in ranked.iter().take(cfg.n_temporal) {
            admitted[i] = true;
        }

        let mut outputs = Vec::new();
        let mut kept = Vec::new();
        for (i, det) in detections.iter().enumerate() {
            let confident = det.score >= cfg.confidence_threshold;
            let id = match det.origin {
                QueryOrigin::Propagated(id) => Some(id),
                QueryOrigin::Fresh(_) if confident || admitted[i] => {
                    let id = self.next_id;
                    self.next_id += 1;
                    Some(id)
                }
                QueryOrigin::Fresh(_) => None,
            };
            if let (Some(id), true) = (id, confident) {
                outputs.push(TrackOutput {
                    frame,
                    track_id: id,
                    class_id: det.class_id,
                    score: det.score,
                    anchor: det.anchor,
                });
            }
            if let (Some(id), true) = (id, admitted[i]) {
                kept.push(ObjectQuery {
                    anchor: det.anchor,
                    feature: det.feature.clone(),
                    internal_id: id,
                    confidence: det.score,
                });
            }
        }
        self.state = Some(MemoryState {
            queries: kept,
            ego_pose: ego_pose.clone(),
            timestamp,
        });
        Ok(outputs)
    }
}

/// Detaches the final decoder layer into tracker detections: anchor rows,
/// feature rows, argmax class, max-sigmoid score, and query origin.
pub fn detach_queries(tape: &Tape, out: &DecodeOutput) -> Vec<DetectedQuery> {
    let layer = out.final_layer();
    let anchors = tape.value(layer.anchors);
    let features = tape.value(layer.features);
    let logits = tape.value(layer.class_logits);
    let (m, c) = (features.dim(0), features.dim(1));
    let k = logits.dim(1);
    (0..m)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let class_id = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap_or(0);
            let a: [f64; ANCHOR_DIM] = anchors.data()[i * ANCHOR_DIM..(i + 1) * ANCHOR_DIM]
                .try_into()
                .expect("anchor row");
            DetectedQuery {
                anchor: Anchor::from_array(a),
                feature: features.data()[i * c..(i + 1) * c].to_vec(),
                origin: out
                    .origins
                    .get(i)
                    .copied()
                    .unwrap_or(QueryOrigin::Fresh(i)),
                class_id,
                score: layer.confidence[i],
            }
        })
        .collect()
}
