//! Abstract coverage environment: moving bounding-box objects, pan-only
//! sensor views, first-capture rewards and captured-object marking.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clamp_center_to_scene, contains, Box2, SceneBounds};

/// Closed real interval `[min, max]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub fn fixed(v: f64) -> Self {
        Span(v, v)
    }

    pub fn min(&self) -> f64 {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn check(&self, key: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::Config(format!(
                "{key}: expected finite [min, max] with min <= max, got [{}, {}]",
                self.0, self.1
            )));
        }
        if self.0 < lo || self.1 > hi {
            return Err(Error::Config(format!(
                "{key}: [{}, {}] outside allowed range [{lo}, {hi}]",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

/// Closed integer interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntSpan(pub u32, pub u32);

impl IntSpan {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.random_range(self.0..=self.1)
    }

    fn check(&self, key: &str, lo: u32, hi: u32) -> Result<()> {
        if self.0 > self.1 || self.0 < lo || self.1 > hi {
            return Err(Error::Config(format!(
                "{key}: expected {lo} <= min <= max <= {hi}, got [{}, {}]",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

/// Ranges from which every episode's parameters are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub scene: SceneBounds,
    pub n_sensors: IntSpan,
    pub n_objects: IntSpan,
    /// Object width and height, drawn independently.
    pub object_size: Span,
    /// Sensor view width and height, drawn independently.
    pub sensor_size: Span,
    pub sensor_speed: Span,
    pub object_speed: Span,
    pub time_scale: Span,
    pub horizon: IntSpan,
    /// Expected number of objects entering through the boundary per step.
    pub spawn_rate: f64,
    /// Per-step probability that an object flips between moving and stationary.
    pub p_toggle: f64,
    /// Standard deviation of the per-step heading change of a moving object.
    pub sigma_turn: f64,
    /// Per-step probability that a moving object reverses direction.
    pub p_reverse: f64,
    /// Probability that an initial object starts out moving.
    pub p_moving: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            scene: SceneBounds::default(),
            n_sensors: IntSpan(1, 5),
            n_objects: IntSpan(1, 50),
            object_size: Span(0.02, 0.08),
            sensor_size: Span(0.10, 0.25),
            sensor_speed: Span(0.01, 0.05),
            object_speed: Span(0.0, 0.02),
            time_scale: Span(0.5, 2.0),
            horizon: IntSpan(500, 1500),
            spawn_rate: 0.01,
            p_toggle: 0.02,
            sigma_turn: 0.2,
            p_reverse: 0.005,
            p_moving: 0.5,
        }
    }
}

fn check_prob(key: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "{key}: probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

impl EnvConfig {
    /// Checks every range; `prefix` is prepended to key names in diagnostics.
    pub fn validate_with_prefix(&self, prefix: &str) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        self.scene
            .validate()
            .map_err(|e| Error::Config(format!("{}: {e}", k("scene"))))?;
        self.n_sensors.check(&k("n_sensors"), 1, 5)?;
        self.n_objects.check(&k("n_objects"), 1, 50)?;
        let min_extent = self.scene.width.min(self.scene.height);
        self.object_size
            .check(&k("object_size"), f64::MIN_POSITIVE, min_extent)?;
        self.sensor_size
            .check(&k("sensor_size"), f64::MIN_POSITIVE, min_extent)?;
        self.sensor_speed
            .check(&k("sensor_speed"), f64::MIN_POSITIVE, f64::MAX)?;
        self.object_speed.check(&k("object_speed"), 0.0, f64::MAX)?;
        self.time_scale
            .check(&k("time_scale"), f64::MIN_POSITIVE, f64::MAX)?;
        self.horizon.check(&k("horizon"), 1, u32::MAX)?;
        if !(self.spawn_rate.is_finite() && self.spawn_rate >= 0.0) {
            return Err(Error::Config(format!(
                "{}: must be finite and >= 0, got {}",
                k("spawn_rate"),
                self.spawn_rate
            )));
        }
        check_prob(&k("p_toggle"), self.p_toggle)?;
        check_prob(&k("p_reverse"), self.p_reverse)?;
        check_prob(&k("p_moving"), self.p_moving)?;
        if !(self.sigma_turn.is_finite() && self.sigma_turn >= 0.0) {
            return Err(Error::Config(format!(
                "{}: must be finite and >= 0, got {}",
                k("sigma_turn"),
                self.sigma_turn
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_prefix("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: u64,
    pub bbox: Box2,
    pub heading: f64,
    pub speed: f64,
    pub moving: bool,
    pub captured: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: u32,
    pub view: Box2,
    pub speed: f64,
}

/// Values drawn once per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub scene: SceneBounds,
    pub n_sensors: u32,
    pub n_objects: u32,
    pub time_scale: f64,
    /// Hidden from the agent.
    pub horizon: u32,
    pub spawn_rate: f64,
}

/// Per-step motion dynamics shared by all objects of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub p_toggle: f64,
    pub sigma_turn: f64,
    pub p_reverse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    NoOp,
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::NoOp,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Unit displacement; `+y` is up.
    pub fn direction(self) -> (f64, f64) {
        match self {
            Action::NoOp => (0.0, 0.0),
            Action::Up => (0.0, 1.0),
            Action::Down => (0.0, -1.0),
            Action::Left => (-1.0, 0.0),
            Action::Right => (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// First captures attributed to each sensor this step, indexed like `EnvState::sensors`.
    pub rewards: Vec<u32>,
    pub newly_captured: Vec<u64>,
    pub done: bool,
}

impl StepResult {
    pub fn total_reward(&self) -> u32 {
        self.rewards.iter().sum()
    }
}

/// Full simulator state. One instance is owned by one worker at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub params: EpisodeParams,
    pub dynamics: Dynamics,
    pub objects: Vec<SimObject>,
    pub sensors: Vec<Sensor>,
    pub t: u32,
    object_size: Span,
    object_speed: Span,
    next_object_id: u64,
    captured_count: u64,
    done: bool,
    rng: ChaCha8Rng,
}

/// Random draws consumed by one object update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionNoise {
    pub toggle: bool,
    pub turn: f64,
    pub reverse: bool,
}

impl MotionNoise {
    pub const NONE: MotionNoise = MotionNoise {
        toggle: false,
        turn: 0.0,
        reverse: false,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, dynamics: &Dynamics) -> Self {
        let toggle = rng.random_bool(dynamics.p_toggle);
        let turn = if dynamics.sigma_turn > 0.0 {
            Normal::new(0.0, dynamics.sigma_turn)
                .expect("sigma validated")
                .sample(rng)
        } else {
            0.0
        };
        let reverse = rng.random_bool(dynamics.p_reverse);
        MotionNoise {
            toggle,
            turn,
            reverse,
        }
    }
}

/// Applies one step of object motion given pre-drawn noise.
pub fn apply_motion(o: &SimObject, noise: MotionNoise, time_scale: f64) -> SimObject {
    let mut next = o.clone();
    if noise.toggle {
        next.moving = !next.moving;
    }
    if next.moving {
        next.heading += noise.turn;
        if noise.reverse {
            next.heading += PI;
        }
        next.heading = next.heading.rem_euclid(2.0 * PI);
        let d = next.speed * time_scale;
        next.bbox.cx += d * next.heading.cos();
        next.bbox.cy += d * next.heading.sin();
    }
    next
}

/// Draws motion noise from `rng` and advances the object one step.
pub fn object_dynamics<R: Rng + ?Sized>(
    o: &SimObject,
    rng: &mut R,
    time_scale: f64,
    dynamics: &Dynamics,
) -> SimObject {
    let noise = MotionNoise::draw(rng, dynamics);
    apply_motion(o, noise, time_scale)
}

/// Moves each sensor by its action and clamps it back into the scene.
pub fn move_sensors(
    sensors: &mut [Sensor],
    actions: &[Action],
    time_scale: f64,
    scene: &SceneBounds,
) -> Result<()> {
    if actions.len() != sensors.len() {
        return Err(Error::Usage(format!(
            "expected {} actions, got {}",
            sensors.len(),
            actions.len()
        )));
    }
    for (s, a) in sensors.iter_mut().zip(actions) {
        let (dx, dy) = a.direction();
        let step = s.speed * time_scale;
        let moved = Box2 {
            cx: s.view.cx + dx * step,
            cy: s.view.cy + dy * step,
            ..s.view
        };
        s.view = clamp_center_to_scene(&moved, scene)?;
    }
    Ok(())
}

/// Marks every uncaptured object fully inside some sensor view. The lowest
/// sensor index wins ties. Returns per-sensor counts and captured ids.
pub fn capture_pass(objects: &mut [SimObject], sensors: &[Sensor]) -> (Vec<u32>, Vec<u64>) {
    let mut rewards = vec![0u32; sensors.len()];
    let mut newly = Vec::new();
    for o in objects.iter_mut().filter(|o| !o.captured) {
        if let Some(k) = sensors.iter().position(|s| contains(&s.view, &o.bbox)) {
            o.captured = true;
            rewards[k] += 1;
            newly.push(o.id);
        }
    }
    (rewards, newly)
}

fn uniform_inside<R: Rng + ?Sized>(rng: &mut R, extent: f64, size: f64) -> f64 {
    let lo = 0.5 * size;
    let hi = extent - 0.5 * size;
    if hi <= lo {
        0.5 * extent
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws `n` sensors with sizes and speeds from `config`, multiplied by
/// `unit`, placed uniformly so that their views lie inside `scene`.
pub fn place_sensors<R: Rng + ?Sized>(
    config: &EnvConfig,
    scene: &SceneBounds,
    n: u32,
    unit: f64,
    rng: &mut R,
) -> Result<Vec<Sensor>> {
    let mut sensors = Vec::with_capacity(n as usize);
    for id in 0..n {
        let w = (config.sensor_size.sample(rng) * unit).min(scene.width);
        let h = (config.sensor_size.sample(rng) * unit).min(scene.height);
        let speed = config.sensor_speed.sample(rng) * unit;
        let cx = uniform_inside(rng, scene.width, w);
        let cy = uniform_inside(rng, scene.height, h);
        sensors.push(Sensor {
            id,
            view: Box2::new(cx, cy, w, h)?,
            speed,
        });
    }
    Ok(sensors)
}

impl EnvState {
    /// Starts a fresh randomized episode. Identical `(config, seed)` pairs give
    /// identical states.
    pub fn init_episode(config: &EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = config.scene;
        let n_sensors = config.n_sensors.sample(&mut rng);
        let n_objects = config.n_objects.sample(&mut rng);
        let time_scale = config.time_scale.sample(&mut rng);
        let horizon = config.horizon.sample(&mut rng);

        let sensors = place_sensors(config, &scene, n_sensors, 1.0, &mut rng)?;

        let mut objects = Vec::with_capacity(n_objects as usize);
        for id in 0..n_objects as u64 {
            let w = config.object_size.sample(&mut rng);
            let h = config.object_size.sample(&mut rng);
            let speed = config.object_speed.sample(&mut rng);
            let heading = rng.random_range(0.0..2.0 * PI);
            let moving = rng.random_bool(config.p_moving);
            let cx = uniform_inside(&mut rng, scene.width, w);
            let cy = uniform_inside(&mut rng, scene.height, h);
            objects.push(SimObject {
                id,
                bbox: Box2::new(cx, cy, w, h)?,
                heading,
                speed,
                moving,
                captured: false,
            });
        }

        Ok(EnvState {
            params: EpisodeParams {
                scene,
                n_sensors,
                n_objects,
                time_scale,
                horizon,
                spawn_rate: config.spawn_rate,
            },
            dynamics: Dynamics {
                p_toggle: config.p_toggle,
                sigma_turn: config.sigma_turn,
                p_reverse: config.p_reverse,
            },
            objects,
            sensors,
            t: 0,
            object_size: config.object_size,
            object_speed: config.object_speed,
            next_object_id: n_objects as u64,
            captured_count: 0,
            done: false,
            rng,
        })
    }

    /// Assembles a state from explicit parts. Object ids must be unique; new
    /// spawns receive ids above the largest one given.
    pub fn from_parts(
        params: EpisodeParams,
        dynamics: Dynamics,
        sensors: Vec<Sensor>,
        objects: Vec<SimObject>,
        seed: u64,
    ) -> Result<Self> {
        params.scene.validate()?;
        let scene_box = params.scene.as_box();
        for s in &sensors {
            s.view.validate()?;
            if !contains(&scene_box, &s.view) {
                return Err(Error::InvalidGeometry(format!(
                    "sensor {} view lies outside the scene",
                    s.id
                )));
            }
        }
        for o in &objects {
            o.bbox.validate()?;
        }
        let next_object_id = objects.iter().map(|o| o.id + 1).max().unwrap_or(0);
        let captured_count = objects.iter().filter(|o| o.captured).count() as u64;
        Ok(EnvState {
            params,
            dynamics,
            objects,
            sensors,
            t: 0,
            object_size: Span(0.02, 0.08),
            object_speed: Span(0.0, 0.02),
            next_object_id,
            captured_count,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn scene(&self) -> &SceneBounds {
        &self.params.scene
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Number of distinct object ids that have existed this episode.
    pub fn objects_total(&self) -> u64 {
        self.next_object_id
    }

    /// Number of distinct object ids captured so far.
    pub fn captured_total(&self) -> u64 {
        self.captured_count
    }

    /// Advances the episode by one step.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Lifecycle("episode already finished".into()));
        }
        if actions.len() != self.sensors.len() {
            return Err(Error::Usage(format!(
                "expected {} actions, got {}",
                self.sensors.len(),
                actions.len()
            )));
        }
        let scene = self.params.scene;
        let ts = self.params.time_scale;
        move_sensors(&mut self.sensors, actions, ts, &scene)?;

        let dynamics = self.dynamics;
        let rng = &mut self.rng;
        let mut kept = Vec::with_capacity(self.objects.len() + 1);
        for o in &self.objects {
            let next = object_dynamics(o, rng, ts, &dynamics);
            if scene.contains_point(next.bbox.cx, next.bbox.cy) {
                kept.push(next);
            }
        }
        self.objects = kept;

        if self.params.spawn_rate > 0.0 {
            let n_new = Poisson::new(self.params.spawn_rate)
                .expect("spawn rate validated")
                .sample(&mut self.rng) as u64;
            for _ in 0..n_new {
                let o = self.spawn_object();
                self.objects.push(o);
            }
        }

        let (rewards, newly_captured) = capture_pass(&mut self.objects, &self.sensors);
        self.captured_count += newly_captured.len() as u64;
        self.t += 1;
        self.done = self.t >= self.params.horizon;
        Ok(StepResult {
            rewards,
            newly_captured,
            done: self.done,
        })
    }

    /// New object on a uniformly chosen boundary edge, heading inward.
    fn spawn_object(&mut self) -> SimObject {
        let rng = &mut self.rng;
        let scene = self.params.scene;
        let w = self.object_size.sample(rng).min(scene.width);
        let h = self.object_size.sample(rng).min(scene.height);
        let speed = self.object_speed.sample(rng);
        let jitter = rng.random_range(-0.25 * PI..=0.25 * PI);
        let (cx, cy, inward) = match rng.random_range(0..4u8) {
            0 => (0.5 * w, uniform_inside(rng, scene.height, h), 0.0),
            1 => (
                scene.width - 0.5 * w,
                uniform_inside(rng, scene.height, h),
                PI,
            ),
            2 => (uniform_inside(rng, scene.width, w), 0.5 * h, 0.5 * PI),
            _ => (
                uniform_inside(rng, scene.width, w),
                scene.height - 0.5 * h,
                1.5 * PI,
            ),
        };
        let id = self.next_object_id;
        self.next_object_id += 1;
        SimObject {
            id,
            bbox: Box2 { cx, cy, w, h },
            heading: (inward + jitter).rem_euclid(2.0 * PI),
            speed,
            moving: true,
            captured: false,
        }
    }
}
