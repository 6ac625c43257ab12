//! Line-delimited detection traces: a header line `{scene_w, scene_h}`
//! followed by one `{t, track_id, cx, cy, w, h}` record per detection,
//! sorted by `t`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box2, SceneBounds};
use crate::sim::{Action, EnvConfig, EnvState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scene_w: f64,
    scene_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    t: u64,
    track_id: u64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub track_id: u64,
    pub bbox: Box2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFrame {
    pub t: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEpisode {
    pub scene: SceneBounds,
    /// Strictly increasing in `t`; every frame holds at least one detection
    /// and each track at most once.
    pub frames: Vec<TraceFrame>,
}

impl TraceEpisode {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for (i, f) in self.frames.iter().enumerate() {
            if i > 0 && f.t <= self.frames[i - 1].t {
                return Err(Error::Format(format!(
                    "frame times not increasing at t={}",
                    f.t
                )));
            }
            if f.detections.is_empty() {
                return Err(Error::Format(format!("frame t={} has no detections", f.t)));
            }
            let mut seen = BTreeSet::new();
            for d in &f.detections {
                d.bbox.validate()?;
                if !seen.insert(d.track_id) {
                    return Err(Error::Format(format!(
                        "track {} appears twice at t={}",
                        d.track_id, f.t
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn track_ids(&self) -> BTreeSet<u64> {
        self.frames
            .iter()
            .flat_map(|f| f.detections.iter().map(|d| d.track_id))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = Header {
            scene_w: self.scene.width,
            scene_h: self.scene.height,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .unwrap();
        for f in &self.frames {
            for d in &f.detections {
                let r = Record {
                    t: f.t,
                    track_id: d.track_id,
                    cx: d.bbox.cx,
                    cy: d.bbox.cy,
                    w: d.bbox.w,
                    h: d.bbox.h,
                };
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string(&r).expect("record serializes")
                )
                .unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<TraceEpisode> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let header: Header = serde_json::from_str(htext).map_err(|e| perr(hline, e.to_string()))?;
        let scene = SceneBounds::new(header.scene_w, header.scene_h)?;
        let mut frames: Vec<TraceFrame> = Vec::new();
        for (n, l) in lines {
            let r: Record = serde_json::from_str(l).map_err(|e| perr(n, e.to_string()))?;
            let bbox = Box2::new(r.cx, r.cy, r.w, r.h).map_err(|e| perr(n, e.to_string()))?;
            let det = Detection {
                track_id: r.track_id,
                bbox,
            };
            match frames.last_mut() {
                Some(f) if f.t == r.t => {
                    if f.detections.iter().any(|d| d.track_id == r.track_id) {
                        return Err(Error::Format(format!(
                            "line {n}: track {} repeated at t={}",
                            r.track_id, r.t
                        )));
                    }
                    f.detections.push(det);
                }
                Some(f) if f.t > r.t => {
                    return Err(Error::Format(format!(
                        "line {n}: t={} after t={}",
                        r.t, f.t
                    )));
                }
                _ => frames.push(TraceFrame {
                    t: r.t,
                    detections: vec![det],
                }),
            }
        }
        Ok(TraceEpisode { scene, frames })
    }
}

pub fn load_trace(path: &Path) -> Result<TraceEpisode> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TraceEpisode::parse(&text, path)
}

pub fn write_trace(trace: &TraceEpisode, path: &Path) -> Result<()> {
    trace.validate()?;
    std::fs::write(path, trace.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Records the objects of a simulated episode (sensors idle) as a trace,
/// dropping each detection independently with probability `dropout`.
pub fn synthetic_trace(env: &EnvConfig, seed: u64, dropout: f64) -> Result<TraceEpisode> {
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} outside [0, 1]")));
    }
    let mut state = EnvState::init_episode(env, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD7_0F);
    let idle = vec![Action::NoOp; state.sensors.len()];
    let mut frames = Vec::new();
    loop {
        let detections: Vec<Detection> = state
            .objects
            .iter()
            .filter(|_| !rng.random_bool(dropout))
            .map(|o| Detection {
                track_id: o.id,
                bbox: o.bbox,
            })
            .collect();
        if !detections.is_empty() {
            frames.push(TraceFrame {
                t: state.t as u64,
                detections,
            });
        }
        if state.is_done() {
            break;
        }
        state.step(&idle)?;
    }
    Ok(TraceEpisode {
        scene: *state.scene(),
        frames,
    })
}
