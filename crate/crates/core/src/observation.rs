//! Relational input encoding.
//!
//! Every sensor and every uncaptured object becomes an entity whose 5-value
//! frame (normalized box plus type tag) is stacked over the last four
//! observations into a 20-value vector. Relations are ordered entity pairs
//! with at least one sensor, each extended with the controlled sensor's
//! vector as the condition: `o_i ++ o_j ++ c`, 60 values per row.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::normalize_box;
use crate::sim::EnvState;

pub const HISTORY_LEN: usize = 4;
pub const FRAME_WIDTH: usize = 5;
pub const ENTITY_WIDTH: usize = HISTORY_LEN * FRAME_WIDTH;
pub const RELATION_WIDTH: usize = 3 * ENTITY_WIDTH;

pub const TAG_OBJECT: f64 = 0.0;
pub const TAG_SENSOR: f64 = 0.5;
pub const TAG_CONTROLLED: f64 = 1.0;

/// Identity of an entity in the scene. Sensors order before objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityId {
    Sensor(u32),
    Object(u64),
}

impl EntityId {
    pub fn is_sensor(self) -> bool {
        matches!(self, EntityId::Sensor(_))
    }
}

/// One entity at one time step: normalized box and type tag.
pub type EntityFrame = [f64; FRAME_WIDTH];

/// Last few observations, as seen from one controlled sensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameHistory {
    frames: VecDeque<BTreeMap<EntityId, EntityFrame>>,
}

impl FrameHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Records the current state. Captured objects are left out.
    pub fn push(&mut self, state: &EnvState, controlled: u32) -> Result<()> {
        if !state.sensors.iter().any(|s| s.id == controlled) {
            return Err(Error::Usage(format!("unknown sensor id {controlled}")));
        }
        let scene = state.scene();
        let mut frame = BTreeMap::new();
        for s in &state.sensors {
            let n = normalize_box(&s.view, scene)?;
            let tag = if s.id == controlled {
                TAG_CONTROLLED
            } else {
                TAG_SENSOR
            };
            frame.insert(EntityId::Sensor(s.id), [n.nx, n.ny, n.nw, n.nh, tag]);
        }
        for o in state.objects.iter().filter(|o| !o.captured) {
            let n = normalize_box(&o.bbox, scene)?;
            frame.insert(EntityId::Object(o.id), [n.nx, n.ny, n.nw, n.nh, TAG_OBJECT]);
        }
        self.frames.push_back(frame);
        while self.frames.len() > HISTORY_LEN {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Entities of the newest frame, in id order.
    pub fn entities(&self) -> Vec<EntityId> {
        self.frames
            .back()
            .map(|f| f.keys().copied().collect())
            .unwrap_or_default()
    }

    /// The four logical frames of `id`, oldest first. Slots before the
    /// entity's first appearance (or where it was missing) repeat the nearest
    /// newer frame.
    pub fn logical_frames(&self, id: EntityId) -> Option<[EntityFrame; HISTORY_LEN]> {
        let newest = *self.frames.back()?.get(&id)?;
        let mut out = [newest; HISTORY_LEN];
        let mut carry = newest;
        let n = self.frames.len();
        for slot in (0..HISTORY_LEN).rev() {
            // physical frame aligned with this slot, if it exists
            let back = HISTORY_LEN - 1 - slot;
            if back < n {
                if let Some(f) = self.frames[n - 1 - back].get(&id) {
                    carry = *f;
                }
            }
            out[slot] = carry;
        }
        Some(out)
    }

    /// The stacked 20-value vector of `id`.
    pub fn object_vector(&self, id: EntityId) -> Option<[f64; ENTITY_WIDTH]> {
        let frames = self.logical_frames(id)?;
        let mut v = [0.0; ENTITY_WIDTH];
        for (chunk, f) in v.chunks_exact_mut(FRAME_WIDTH).zip(frames.iter()) {
            chunk.copy_from_slice(f);
        }
        Some(v)
    }
}

/// The conditioned relation rows fed to the network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelationSet {
    /// Row-major `n x 60`.
    pub rows: Vec<f64>,
    pub pair_index: Vec<(EntityId, EntityId)>,
    pub condition: Vec<f64>,
    pub controlled: u32,
}

impl RelationSet {
    pub fn n_rows(&self) -> usize {
        self.pair_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_index.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * RELATION_WIDTH..(i + 1) * RELATION_WIDTH]
    }

    /// Copy with rows reordered so that row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> RelationSet {
        let mut rows = Vec::with_capacity(self.rows.len());
        let mut pairs = Vec::with_capacity(self.pair_index.len());
        for &p in perm {
            rows.extend_from_slice(self.row(p));
            pairs.push(self.pair_index[p]);
        }
        RelationSet {
            rows,
            pair_index: pairs,
            condition: self.condition.clone(),
            controlled: self.controlled,
        }
    }
}

/// Builds the relation set for `controlled` from the newest history frame.
pub fn encode(h: &FrameHistory, controlled: u32) -> Result<RelationSet> {
    if h.is_empty() {
        return Err(Error::Usage("cannot encode an empty history".into()));
    }
    let condition = h
        .object_vector(EntityId::Sensor(controlled))
        .ok_or_else(|| Error::Usage(format!("controlled sensor {controlled} not in history")))?;
    let ids = h.entities();
    let vectors: Vec<[f64; ENTITY_WIDTH]> = ids
        .iter()
        .map(|&id| h.object_vector(id).expect("entity from newest frame"))
        .collect();

    let mut rows = Vec::new();
    let mut pair_index = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for (j, &b) in ids.iter().enumerate() {
            if i == j || !(a.is_sensor() || b.is_sensor()) {
                continue;
            }
            rows.extend_from_slice(&vectors[i]);
            rows.extend_from_slice(&vectors[j]);
            rows.extend_from_slice(&condition);
            pair_index.push((a, b));
        }
    }
    Ok(RelationSet {
        rows,
        pair_index,
        condition: condition.to_vec(),
        controlled,
    })
}

/// One history per sensor, each marking its own sensor as controlled.
#[derive(Debug, Clone, Default)]
pub struct TeamObserver {
    histories: Vec<FrameHistory>,
}

impl TeamObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.histories.clear();
    }

    /// Pushes `state` into every sensor's history and encodes one relation
    /// set per sensor, indexed like `state.sensors`.
    pub fn observe(&mut self, state: &EnvState) -> Result<Vec<RelationSet>> {
        self.histories
            .resize_with(state.sensors.len(), FrameHistory::new);
        state
            .sensors
            .iter()
            .zip(self.histories.iter_mut())
            .map(|(s, h)| {
                h.push(state, s.id)?;
                encode(h, s.id)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Box2, SceneBounds};
    use crate::sim::{Dynamics, EpisodeParams, Sensor, SimObject};

    fn state(n_sensors: u32, n_objects: u64) -> EnvState {
        let params = EpisodeParams {
            scene: SceneBounds::default(),
            n_sensors,
            n_objects: n_objects as u32,
            time_scale: 1.0,
            horizon: 100,
            spawn_rate: 0.0,
        };
        let sensors = (0..n_sensors)
            .map(|id| Sensor {
                id,
                view: Box2::new(0.2 + 0.2 * id as f64, 0.5, 0.2, 0.2).unwrap(),
                speed: 0.02,
            })
            .collect();
        let objects = (0..n_objects)
            .map(|id| SimObject {
                id,
                bbox: Box2::new(0.1 + 0.1 * id as f64, 0.9, 0.04, 0.04).unwrap(),
                heading: 0.0,
                speed: 0.0,
                moving: false,
                captured: false,
            })
            .collect();
        let dynamics = Dynamics {
            p_toggle: 0.0,
            sigma_turn: 0.0,
            p_reverse: 0.0,
        };
        EnvState::from_parts(params, dynamics, sensors, objects, 0).unwrap()
    }

    #[test]
    fn single_push_replicates() {
        let s = state(1, 2);
        let mut h = FrameHistory::new();
        h.push(&s, 0).unwrap();
        let v = h.object_vector(EntityId::Object(1)).unwrap();
        for k in 1..HISTORY_LEN {
            assert_eq!(v[..5], v[5 * k..5 * k + 5]);
        }
        assert_eq!(v[4], TAG_OBJECT);
    }

    #[test]
    fn ring_eviction_keeps_last_four() {
        let mut s = state(1, 0);
        let mut h = FrameHistory::new();
        for k in 0..5 {
            s.sensors[0].view.cx = 0.2 + 0.1 * k as f64;
            h.push(&s, 0).unwrap();
        }
        assert_eq!(h.len(), 4);
        let v = h.object_vector(EntityId::Sensor(0)).unwrap();
        // pushes 2..=5 have cx = 0.3..0.6, normalized 2cx - 1
        let xs: Vec<f64> = (0..4).map(|k| v[5 * k]).collect();
        for (x, want) in xs.iter().zip([0.3, 0.4, 0.5, 0.6]) {
            assert!((x - (2.0 * want - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn captured_objects_disappear() {
        let mut s = state(1, 2);
        let mut h = FrameHistory::new();
        h.push(&s, 0).unwrap();
        h.push(&s, 0).unwrap();
        s.objects[0].captured = true;
        h.push(&s, 0).unwrap();
        assert!(!h.entities().contains(&EntityId::Object(0)));
        let rel = encode(&h, 0).unwrap();
        assert!(rel
            .pair_index
            .iter()
            .all(|&(a, b)| a != EntityId::Object(0) && b != EntityId::Object(0)));
    }

    #[test]
    fn row_counts() {
        let mut h = FrameHistory::new();
        h.push(&state(2, 3), 0).unwrap();
        assert_eq!(encode(&h, 0).unwrap().n_rows(), 5 * 4 - 3 * 2);

        let mut h = FrameHistory::new();
        h.push(&state(1, 0), 0).unwrap();
        assert_eq!(encode(&h, 0).unwrap().n_rows(), 0);

        let mut h = FrameHistory::new();
        h.push(&state(1, 1), 0).unwrap();
        let rel = encode(&h, 0).unwrap();
        assert_eq!(
            rel.pair_index,
            vec![
                (EntityId::Sensor(0), EntityId::Object(0)),
                (EntityId::Object(0), EntityId::Sensor(0))
            ]
        );
        let c = h.object_vector(EntityId::Sensor(0)).unwrap();
        for r in 0..2 {
            assert_eq!(&rel.row(r)[40..], &c[..]);
        }
        assert_eq!(rel.rows.len(), 2 * RELATION_WIDTH);
    }

    #[test]
    fn controlled_sensor_tagged_once() {
        let mut h = FrameHistory::new();
        let s = state(3, 4);
        h.push(&s, 1).unwrap();
        let rel = encode(&h, 1).unwrap();
        assert_eq!(rel.condition[4], TAG_CONTROLLED);
        let tagged: Vec<EntityId> = h
            .entities()
            .into_iter()
            .filter(|&id| h.object_vector(id).unwrap()[19] == TAG_CONTROLLED)
            .collect();
        assert_eq!(tagged, vec![EntityId::Sensor(1)]);
        assert_eq!(encode(&h, 1).unwrap(), rel);
    }

    #[test]
    fn errors() {
        let h = FrameHistory::new();
        assert!(matches!(encode(&h, 0), Err(Error::Usage(_))));
        let mut h = FrameHistory::new();
        assert!(h.push(&state(1, 1), 3).is_err());
        h.push(&state(1, 1), 0).unwrap();
        assert!(encode(&h, 2).is_err());
    }
}
