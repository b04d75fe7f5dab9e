//! Synthetic driving scenes: kinematic agents, lane polylines, ego motion.
//!
//! Scenes are a pure function of `(seed, WorldConfig)`. Two world presets
//! (`city_a`: dense traffic on near-straight roads, `city_b`: sparse traffic on
//! curvier roads) support cross-world generalization studies, and a skewed
//! `longtail` preset concentrates 6% of the class mass in five rare classes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::geometry::{boxes_intersect, OrientedBox};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Agent forecast steps at 2 Hz.
pub const T_PRED: usize = 6;
/// Ego plan steps at 2 Hz (3 seconds).
pub const PLAN_STEPS: usize = 6;
/// Past ego positions fed to the planner.
pub const PAST_STEPS: usize = 4;
pub const STEP_SECONDS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentClass {
    Car,
    Truck,
    Bus,
    Pedestrian,
    Cyclist,
    Motorcycle,
    Trailer,
    Construction,
}

impl AgentClass {
    pub const ALL: [AgentClass; 8] = [
        AgentClass::Car,
        AgentClass::Truck,
        AgentClass::Bus,
        AgentClass::Pedestrian,
        AgentClass::Cyclist,
        AgentClass::Motorcycle,
        AgentClass::Trailer,
        AgentClass::Construction,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AgentClass::Car => "car",
            AgentClass::Truck => "truck",
            AgentClass::Bus => "bus",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Cyclist => "cyclist",
            AgentClass::Motorcycle => "motorcycle",
            AgentClass::Trailer => "trailer",
            AgentClass::Construction => "construction",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }

    /// Nominal (length, width) footprint in meters before jitter.
    fn base_size(&self) -> (f64, f64) {
        match self {
            AgentClass::Car => (4.5, 1.9),
            AgentClass::Truck => (7.5, 2.5),
            AgentClass::Bus => (11.0, 2.9),
            AgentClass::Pedestrian => (0.8, 0.7),
            AgentClass::Cyclist => (1.8, 0.6),
            AgentClass::Motorcycle => (2.1, 0.8),
            AgentClass::Trailer => (10.0, 2.6),
            AgentClass::Construction => (5.5, 2.8),
        }
    }

    /// Fraction of the sampled world speed this class actually moves at.
    fn speed_factor(&self) -> f64 {
        match self {
            AgentClass::Pedestrian => 0.18,
            AgentClass::Cyclist => 0.5,
            AgentClass::Construction => 0.35,
            AgentClass::Trailer => 0.7,
            AgentClass::Bus => 0.8,
            AgentClass::Truck => 0.85,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TurnLeft,
    TurnRight,
    GoStraight,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::TurnLeft, Command::TurnRight, Command::GoStraight];

    pub fn name(&self) -> &'static str {
        match self {
            Command::TurnLeft => "turn-left",
            Command::TurnRight => "turn-right",
            Command::GoStraight => "go-straight",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneKind {
    Divider,
    Boundary,
    Crossing,
}

impl LaneKind {
    pub fn name(&self) -> &'static str {
        match self {
            LaneKind::Divider => "divider",
            LaneKind::Boundary => "boundary",
            LaneKind::Crossing => "crossing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorldTag {
    #[serde(rename = "cityA")]
    CityA,
    #[serde(rename = "cityB")]
    CityB,
}

impl WorldTag {
    pub fn name(&self) -> &'static str {
        match self {
            WorldTag::CityA => "cityA",
            WorldTag::CityB => "cityB",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: u64,
    pub label: AgentClass,
    pub bev_box: OrientedBox,
    pub velocity: [f64; 2],
    /// T_PRED future positions in the ego frame, 2 Hz.
    pub future_traj: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneElement {
    pub kind: LaneKind,
    pub polyline: Vec<[f64; 2]>,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoRecord {
    /// Ego footprint centered at the origin, heading +x.
    pub footprint: OrientedBox,
    pub command: Command,
    /// PLAN_STEPS future waypoints at 2 Hz.
    pub gt_plan: Vec<[f64; 2]>,
    /// PAST_STEPS past positions, oldest first.
    pub past: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub seed: u64,
    pub world_tag: WorldTag,
    pub grid_spec: GridSpec,
    pub ego: EgoRecord,
    pub agents: Vec<AgentRecord>,
    pub lanes: Vec<LaneElement>,
}

/// Generation parameters for one synthetic world distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub tag: WorldTag,
    pub grid: GridSpec,
    /// Inclusive range of agents per scene.
    pub agent_count: (usize, usize),
    /// Class sampling frequencies, indexed like [`AgentClass::ALL`]; must sum to 1.
    pub class_freq: [f64; 8],
    pub lane_count: (usize, usize),
    /// Maximum unsigned curvature of lane arcs, 1/m.
    pub lane_curvature_max: f64,
    pub lane_width: (f64, f64),
    /// World speed range; per-class factors scale it down for slow classes.
    pub agent_speed: (f64, f64),
    pub agent_curvature_max: f64,
    pub ego_speed: (f64, f64),
    /// Unsigned curvature range used for turn commands, 1/m.
    pub ego_turn_curvature: (f64, f64),
    /// Sampling weights for [turn-left, turn-right, go-straight]; must sum to 1.
    pub command_mix: [f64; 3],
}

impl WorldConfig {
    /// Dense traffic, near-straight roads.
    pub fn city_a() -> Self {
        WorldConfig {
            tag: WorldTag::CityA,
            grid: GridSpec::default(),
            agent_count: (4, 8),
            class_freq: [0.40, 0.14, 0.08, 0.18, 0.08, 0.05, 0.04, 0.03],
            lane_count: (2, 4),
            lane_curvature_max: 0.008,
            lane_width: (2.5, 4.0),
            agent_speed: (1.0, 9.0),
            agent_curvature_max: 0.03,
            ego_speed: (3.0, 8.0),
            ego_turn_curvature: (0.02, 0.05),
            command_mix: [0.25, 0.25, 0.5],
        }
    }

    /// Sparse traffic, curvier roads, more vulnerable road users.
    pub fn city_b() -> Self {
        WorldConfig {
            tag: WorldTag::CityB,
            grid: GridSpec::default(),
            agent_count: (1, 4),
            class_freq: [0.30, 0.10, 0.06, 0.26, 0.12, 0.08, 0.04, 0.04],
            lane_count: (1, 3),
            lane_curvature_max: 0.045,
            lane_width: (2.2, 3.6),
            agent_speed: (0.8, 7.0),
            agent_curvature_max: 0.06,
            ego_speed: (2.0, 6.5),
            ego_turn_curvature: (0.035, 0.09),
            command_mix: [0.3, 0.3, 0.4],
        }
    }

    /// Heavily skewed class frequencies: the five rarest classes carry 6% of the
    /// mass in total, with a 61x spread between the most and least common class.
    pub fn longtail() -> Self {
        WorldConfig {
            class_freq: [0.55, 0.24, 0.015, 0.15, 0.015, 0.012, 0.009, 0.009],
            ..WorldConfig::city_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let fsum: f64 = self.class_freq.iter().sum();
        if self.class_freq.iter().any(|&f| f < 0.0) || (fsum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "class_freq must be non-negative and sum to 1 (sum = {fsum})"
            )));
        }
        if self.class_freq.iter().all(|&f| f == 0.0) {
            return Err(Error::Config("class_freq must name at least one class".into()));
        }
        let csum: f64 = self.command_mix.iter().sum();
        if self.command_mix.iter().any(|&f| f < 0.0) || (csum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "command_mix must be non-negative and sum to 1 (sum = {csum})"
            )));
        }
        if self.agent_count.0 > self.agent_count.1 {
            return Err(Error::Config("agent_count range inverted".into()));
        }
        if self.lane_count.0 > self.lane_count.1 {
            return Err(Error::Config("lane_count range inverted".into()));
        }
        for (name, lo, hi, pos) in [
            ("lane_width", self.lane_width.0, self.lane_width.1, true),
            ("agent_speed", self.agent_speed.0, self.agent_speed.1, true),
            ("ego_speed", self.ego_speed.0, self.ego_speed.1, true),
            ("ego_turn_curvature", self.ego_turn_curvature.0, self.ego_turn_curvature.1, true),
        ] {
            if lo > hi || (pos && lo <= 0.0) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is degenerate")));
            }
        }
        if self.lane_curvature_max < 0.0 || self.agent_curvature_max < 0.0 {
            return Err(Error::Config("curvature maxima must be non-negative".into()));
        }
        Ok(())
    }

    /// Classes making up the lowest `mass` of frequency (ascending), used for
    /// rare/common splits. Ties resolved by class order.
    pub fn rare_classes(&self, mass: f64) -> Vec<AgentClass> {
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| {
            self.class_freq[a].partial_cmp(&self.class_freq[b]).unwrap().then(a.cmp(&b))
        });
        let mut rare = Vec::new();
        let mut acc = 0.0;
        for i in order {
            if acc + self.class_freq[i] <= mass + 1e-9 {
                acc += self.class_freq[i];
                rare.push(AgentClass::ALL[i]);
            } else {
                break;
            }
        }
        rare
    }
}

/// Constant-speed arc from `(x0, y0)` with initial heading `yaw`, signed
/// curvature `kappa`, evaluated at time `t`.
fn arc_position(x0: f64, y0: f64, yaw: f64, speed: f64, kappa: f64, t: f64) -> [f64; 2] {
    let (sy, cy) = yaw.sin_cos();
    let (dx, dy) = if kappa.abs() < 1e-9 {
        (speed * t, 0.0)
    } else {
        let th = kappa * speed * t;
        (th.sin() / kappa, (1.0 - th.cos()) / kappa)
    };
    [x0 + cy * dx - sy * dy, y0 + sy * dx + cy * dy]
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn generate_ego(rng: &mut ChaCha8Rng, config: &WorldConfig) -> EgoRecord {
    let command = Command::ALL[sample_categorical(rng, &config.command_mix)];
    let speed = sample_range(rng, config.ego_speed);
    let kappa = match command {
        Command::GoStraight => rng.gen_range(-0.003..0.003),
        Command::TurnLeft => sample_range(rng, config.ego_turn_curvature),
        Command::TurnRight => -sample_range(rng, config.ego_turn_curvature),
    };
    let gt_plan: Vec<[f64; 2]> = (1..=PLAN_STEPS)
        .map(|k| arc_position(0.0, 0.0, 0.0, speed, kappa, k as f64 * STEP_SECONDS))
        .collect();
    let past: Vec<[f64; 2]> = (0..PAST_STEPS)
        .map(|k| {
            let t = (PAST_STEPS - k) as f64 * STEP_SECONDS;
            [-speed * t, 0.0]
        })
        .collect();
    EgoRecord {
        footprint: OrientedBox::new(0.0, 0.0, 4.6, 1.9, 0.0),
        command,
        gt_plan,
        past,
    }
}

/// Ego footprint translated to plan step `t` with heading from the plan chord.
pub fn ego_box_at_plan_step(ego: &EgoRecord, plan: &[[f64; 2]], t: usize) -> OrientedBox {
    let p = plan[t];
    let (a, b) = if t + 1 < plan.len() {
        (plan[t], plan[t + 1])
    } else if plan.len() >= 2 {
        (plan[t - 1], plan[t])
    } else {
        ([0.0, 0.0], plan[t])
    };
    let (dy, dx) = (b[1] - a[1], b[0] - a[0]);
    let yaw = if dx.abs() < 1e-12 && dy.abs() < 1e-12 { ego.footprint.yaw } else { dy.atan2(dx) };
    OrientedBox { cx: p[0], cy: p[1], yaw, ..ego.footprint }
}

struct AgentDraft {
    bev_box: OrientedBox,
    velocity: [f64; 2],
    future_traj: Vec<[f64; 2]>,
}

fn draft_agent(
    rng: &mut ChaCha8Rng,
    config: &WorldConfig,
    label: AgentClass,
    size: (f64, f64),
) -> AgentDraft {
    let (xmin, xmax, ymin, ymax) = config.grid.extent;
    // Keep the whole footprint inside the grid extent.
    let margin = 0.5 * (size.0 * size.0 + size.1 * size.1).sqrt();
    let cx = rng.gen_range(xmin + margin..xmax - margin);
    let cy = rng.gen_range(ymin + margin..ymax - margin);
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = sample_range(rng, config.agent_speed) * label.speed_factor();
    let mut kappa = if config.agent_curvature_max > 0.0 {
        rng.gen_range(-config.agent_curvature_max..config.agent_curvature_max)
    } else {
        0.0
    };
    // Bound lateral acceleration so trajectories stay kinematically plausible.
    let max_lat = 2.5;
    if speed > 0.1 && kappa.abs() * speed * speed > max_lat {
        kappa = kappa.signum() * max_lat / (speed * speed);
    }
    let future_traj: Vec<[f64; 2]> =
        (1..=T_PRED).map(|k| arc_position(cx, cy, yaw, speed, kappa, k as f64 * STEP_SECONDS)).collect();
    AgentDraft {
        bev_box: OrientedBox::new(cx, cy, size.0, size.1, yaw),
        velocity: [speed * yaw.cos(), speed * yaw.sin()],
        future_traj,
    }
}

/// True when the agent never meets the planned ego footprint over the horizon,
/// with a safety margin (so ground-truth plans are collision-free).
fn clear_of_ego_plan(ego: &EgoRecord, draft: &AgentDraft) -> bool {
    let inflated = draft.bev_box.inflate(0.6);
    if boxes_intersect(&inflated, &ego.footprint.inflate(0.6)) {
        return false;
    }
    for t in 0..PLAN_STEPS {
        let ego_box = ego_box_at_plan_step(ego, &ego.gt_plan, t);
        let agent_box = inflated.at_position(draft.future_traj[t][0], draft.future_traj[t][1]);
        if boxes_intersect(&agent_box, &ego_box) {
            return false;
        }
    }
    true
}

fn generate_agents(rng: &mut ChaCha8Rng, config: &WorldConfig, ego: &EgoRecord) -> Vec<AgentRecord> {
    let n = if config.agent_count.0 == config.agent_count.1 {
        config.agent_count.0
    } else {
        rng.gen_range(config.agent_count.0..=config.agent_count.1)
    };
    let mut agents: Vec<AgentRecord> = Vec::with_capacity(n);
    for id in 0..n {
        // Label and size are fixed up front so placement retries cannot bias
        // the empirical class distribution.
        let label = AgentClass::ALL[sample_categorical(rng, &config.class_freq)];
        let base = label.base_size();
        let size = (base.0 * rng.gen_range(0.9..1.1), base.1 * rng.gen_range(0.9..1.1));
        let mut placed: Option<AgentDraft> = None;
        // First pass: keep clear of the ego plan and other agents.
        for _ in 0..80 {
            let d = draft_agent(rng, config, label, size);
            let spaced = agents
                .iter()
                .all(|a| !boxes_intersect(&a.bev_box.inflate(0.2), &d.bev_box));
            if spaced && clear_of_ego_plan(ego, &d) {
                placed = Some(d);
                break;
            }
        }
        // Crowded fallback: only the ego-plan constraint (keeps GT plans clean).
        if placed.is_none() {
            for _ in 0..200 {
                let d = draft_agent(rng, config, label, size);
                if clear_of_ego_plan(ego, &d) {
                    placed = Some(d);
                    break;
                }
            }
        }
        let d = placed.unwrap_or_else(|| draft_agent(rng, config, label, size));
        agents.push(AgentRecord {
            id: id as u64,
            label,
            bev_box: d.bev_box,
            velocity: d.velocity,
            future_traj: d.future_traj,
        });
    }
    agents
}

fn generate_lanes(rng: &mut ChaCha8Rng, config: &WorldConfig) -> Vec<LaneElement> {
    let n = if config.lane_count.0 == config.lane_count.1 {
        config.lane_count.0
    } else {
        rng.gen_range(config.lane_count.0..=config.lane_count.1)
    };
    let (xmin, xmax, ymin, ymax) = config.grid.extent;
    let mut lanes = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = match sample_categorical(rng, &[0.4, 0.4, 0.2]) {
            0 => LaneKind::Divider,
            1 => LaneKind::Boundary,
            _ => LaneKind::Crossing,
        };
        let width = sample_range(rng, config.lane_width);
        let margin = 0.5 * width + 0.1;
        let mut polyline = Vec::new();
        for _ in 0..20 {
            let x0 = rng.gen_range(0.6 * xmin..0.6 * xmax);
            let y0 = rng.gen_range(0.6 * ymin..0.6 * ymax);
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let kappa = if config.lane_curvature_max > 0.0 {
                rng.gen_range(-config.lane_curvature_max..config.lane_curvature_max)
            } else {
                0.0
            };
            let length = rng.gen_range(18.0..40.0_f64);
            let steps = (length / 2.0).ceil() as usize;
            let mut pts: Vec<[f64; 2]> = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                // Reuse the arc kinematics with unit "speed" = 2 m per step.
                let p = arc_position(x0, y0, heading, 2.0, kappa, k as f64);
                let inside = p[0] > xmin + margin
                    && p[0] < xmax - margin
                    && p[1] > ymin + margin
                    && p[1] < ymax - margin;
                if !inside {
                    break;
                }
                pts.push(p);
            }
            if pts.len() >= 4 {
                polyline = pts;
                break;
            }
        }
        if polyline.is_empty() {
            // Degenerate fallback: a short straight stub through the center.
            polyline = vec![[-8.0, 0.0], [0.0, 0.0], [8.0, 0.0]];
        }
        lanes.push(LaneElement { kind, polyline, width });
    }
    lanes
}

/// Deterministic scene synthesis: identical `(seed, config)` yields an
/// identical [`Scene`], field for field.
pub fn generate_scene(seed: u64, config: &WorldConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego = generate_ego(&mut rng, config);
    let agents = generate_agents(&mut rng, config, &ego);
    let lanes = generate_lanes(&mut rng, config);
    Ok(Scene {
        schema_version: SCHEMA_VERSION,
        seed,
        world_tag: config.tag,
        grid_spec: config.grid,
        ego,
        agents,
        lanes,
    })
}

/// `n` scenes with seeds `seed0 .. seed0 + n`, in seed order.
pub fn make_dataset(config: &WorldConfig, n: usize, seed0: u64) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Argument("make_dataset: n must be >= 1".into()));
    }
    (0..n as u64).map(|i| generate_scene(seed0 + i, config)).collect()
}

impl Scene {
    /// Checks every structural invariant; loaders call this on deserialized data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Persistence(format!(
                "scene schema version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.grid_spec.validate()?;
        self.ego.footprint.validate()?;
        if self.ego.gt_plan.len() != PLAN_STEPS {
            return Err(Error::Config(format!(
                "gt_plan must have {PLAN_STEPS} waypoints, got {}",
                self.ego.gt_plan.len()
            )));
        }
        if self.ego.past.len() != PAST_STEPS {
            return Err(Error::Config(format!(
                "past must have {PAST_STEPS} positions, got {}",
                self.ego.past.len()
            )));
        }
        let (xmin, xmax, ymin, ymax) = self.grid_spec.extent;
        for a in &self.agents {
            a.bev_box.validate()?;
            if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&a.bev_box.yaw) {
                return Err(Error::Config(format!("agent {} yaw {} outside [-pi, pi)", a.id, a.bev_box.yaw)));
            }
            if a.future_traj.len() != T_PRED
                || a.future_traj.iter().flatten().any(|v| !v.is_finite())
            {
                return Err(Error::Config(format!("agent {} future_traj invalid", a.id)));
            }
            for c in a.bev_box.corners() {
                if c[0] < xmin || c[0] > xmax || c[1] < ymin || c[1] > ymax {
                    return Err(Error::Config(format!("agent {} extends outside grid extent", a.id)));
                }
            }
        }
        for (i, l) in self.lanes.iter().enumerate() {
            if l.polyline.len() < 2 {
                return Err(Error::Config(format!("lane {i} has fewer than 2 points")));
            }
            if l.width <= 0.0 {
                return Err(Error::Config(format!("lane {i} has non-positive width")));
            }
            for p in &l.polyline {
                if p[0] < xmin || p[0] > xmax || p[1] < ymin || p[1] > ymax {
                    return Err(Error::Config(format!("lane {i} point outside grid extent")));
                }
            }
        }
        Ok(())
    }
}

/// Boolean H*W grid (row-major): true iff the cell center lies within
/// `width/2` of the element's polyline.
pub fn rasterize_lane_mask(scene: &Scene, element: &LaneElement) -> Result<Vec<bool>> {
    if !scene.lanes.iter().any(|l| l == element) {
        return Err(Error::Argument("rasterize_lane_mask: element does not belong to scene".into()));
    }
    let spec = &scene.grid_spec;
    let pts = &element.polyline;
    let total_len: f64 = pts.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum();
    if total_len < 1e-9 {
        return Err(Error::Argument("rasterize_lane_mask: polyline has zero length".into()));
    }
    let (h, w) = (spec.h(), spec.w());
    let mut mask = vec![false; h * w];
    let half = 0.5 * element.width;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        // Candidate cells: the segment's bounding box grown by the half width.
        let x_lo = a[0].min(b[0]) - half;
        let x_hi = a[0].max(b[0]) + half;
        let y_lo = a[1].min(b[1]) - half;
        let y_hi = a[1].max(b[1]) + half;
        let (c_lo, c_hi) = spec.col_range(x_lo, x_hi);
        let (r_lo, r_hi) = spec.row_range(y_lo, y_hi);
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                if mask[r * w + c] {
                    continue;
                }
                let (cx, cy) = spec.cell_center(r, c);
                if dist_point_segment(cx, cy, a, b) <= half {
                    mask[r * w + c] = true;
                }
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        let (xmin, xmax, ymin, ymax) = spec.extent;
        let all_outside = pts
            .iter()
            .all(|p| p[0] < xmin || p[0] > xmax || p[1] < ymin || p[1] > ymax);
        if all_outside {
            return Err(Error::EmptyMask("polyline lies entirely outside the grid extent".into()));
        }
    }
    Ok(mask)
}

pub(crate) fn dist_point_segment(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (px - a[0], py - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 < 1e-18 { 0.0 } else { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// One scene per line, standard JSON lines.
pub fn save_jsonl(scenes: &[Scene], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path)?;
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(line)
            .map_err(|e| Error::Persistence(format!("line {}: {e}", i + 1)))?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_and_config_reproduce_the_scene() {
        let cfg = WorldConfig::city_a();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn zero_agent_config_still_builds_a_valid_scene() {
        let mut cfg = WorldConfig::city_a();
        cfg.agent_count = (0, 0);
        let s = generate_scene(0, &cfg).unwrap();
        assert!(s.agents.is_empty());
        assert_eq!(s.ego.gt_plan.len(), PLAN_STEPS);
        assert!(!s.lanes.is_empty());
        s.validate().unwrap();
    }

    #[test]
    fn single_class_frequency_forces_all_labels() {
        let mut cfg = WorldConfig::city_a();
        cfg.class_freq = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let s = generate_scene(7, &cfg).unwrap();
        assert!(!s.agents.is_empty());
        assert!(s.agents.iter().all(|a| a.label == AgentClass::Car));
    }

    #[test]
    fn datasets_are_ordered_and_scenes_differ() {
        let cfg = WorldConfig::city_a();
        let ds = make_dataset(&cfg, 5, 0).unwrap();
        assert_eq!(ds.len(), 5);
        for (i, s) in ds.iter().enumerate() {
            assert_eq!(s.seed, i as u64);
        }
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(ds[i], ds[j], "scenes {i} and {j} identical");
            }
        }
        assert!(make_dataset(&cfg, 0, 0).is_err());
        let single = make_dataset(&cfg, 1, 3).unwrap();
        assert_eq!(single[0], generate_scene(3, &cfg).unwrap());
    }

    #[test]
    fn scene_invariants_hold_across_many_seeds() {
        for cfg in [WorldConfig::city_a(), WorldConfig::city_b()] {
            for seed in 0..50 {
                let s = generate_scene(seed, &cfg).unwrap();
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn command_sign_matches_recomputed_plan_curvature() {
        let cfg = WorldConfig::city_a();
        for seed in 0..60 {
            let s = generate_scene(seed, &cfg).unwrap();
            let plan = &s.ego.gt_plan;
            // Heading change between the first and last plan chord.
            let first = (plan[1][1] - plan[0][1]).atan2(plan[1][0] - plan[0][0]);
            let last = (plan[5][1] - plan[4][1]).atan2(plan[5][0] - plan[4][0]);
            let mut dth = last - first;
            while dth > std::f64::consts::PI {
                dth -= 2.0 * std::f64::consts::PI;
            }
            while dth < -std::f64::consts::PI {
                dth += 2.0 * std::f64::consts::PI;
            }
            match s.ego.command {
                Command::TurnLeft => assert!(dth > 0.05, "seed {seed}: left turn but dtheta = {dth}"),
                Command::TurnRight => assert!(dth < -0.05, "seed {seed}: right turn but dtheta = {dth}"),
                Command::GoStraight => assert!(dth.abs() < 0.05, "seed {seed}: straight but dtheta = {dth}"),
            }
        }
    }

    #[test]
    fn agent_trajectories_have_bounded_acceleration() {
        let cfg = WorldConfig::city_b();
        for seed in 0..30 {
            let s = generate_scene(seed, &cfg).unwrap();
            for a in &s.agents {
                let mut pts = vec![[a.bev_box.cx, a.bev_box.cy]];
                pts.extend_from_slice(&a.future_traj);
                for w in pts.windows(3) {
                    let ddx = w[2][0] - 2.0 * w[1][0] + w[0][0];
                    let ddy = w[2][1] - 2.0 * w[1][1] + w[0][1];
                    let accel = (ddx * ddx + ddy * ddy).sqrt() / (STEP_SECONDS * STEP_SECONDS);
                    assert!(accel < 3.5, "agent {} accel {accel} m/s^2", a.id);
                }
            }
        }
    }

    #[test]
    fn class_frequencies_converge_to_config() {
        let cfg = WorldConfig::city_a();
        let mut counts = [0usize; 8];
        let mut total = 0usize;
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg).unwrap();
            for a in &s.agents {
                counts[a.label.index()] += 1;
                total += 1;
            }
        }
        for (i, &cnt) in counts.iter().enumerate() {
            let p = cfg.class_freq[i];
            let emp = cnt as f64 / total as f64;
            let se = (p * (1.0 - p) / total as f64).sqrt();
            assert!(
                (emp - p).abs() <= 3.0 * se + 1e-12,
                "class {i}: empirical {emp:.4} vs config {p:.4} (se {se:.5})"
            );
        }
    }

    #[test]
    fn longtail_rare_mass_is_six_percent() {
        let cfg = WorldConfig::longtail();
        let rare = cfg.rare_classes(0.06);
        assert_eq!(rare.len(), 5);
        assert!(!rare.contains(&AgentClass::Car) && !rare.contains(&AgentClass::Pedestrian));
        let mut rare_count = 0usize;
        let mut total = 0usize;
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg).unwrap();
            for a in &s.agents {
                if rare.contains(&a.label) {
                    rare_count += 1;
                }
                total += 1;
            }
        }
        let share = rare_count as f64 / total as f64;
        assert!((share - 0.06).abs() <= 0.02, "rare share {share:.4}");
    }

    #[test]
    fn ground_truth_plans_are_collision_free() {
        // The generator rejects agents whose futures meet the planned ego
        // footprint; verify with the geometry module directly.
        for cfg in [WorldConfig::city_a(), WorldConfig::city_b()] {
            for seed in 100..160 {
                let s = generate_scene(seed, &cfg).unwrap();
                for t in 0..PLAN_STEPS {
                    let ego_box = ego_box_at_plan_step(&s.ego, &s.ego.gt_plan, t);
                    for a in &s.agents {
                        let abox = a.bev_box.at_position(a.future_traj[t][0], a.future_traj[t][1]);
                        assert!(
                            !boxes_intersect(&ego_box, &abox),
                            "seed {seed} t {t}: GT plan collides with agent {}",
                            a.id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lane_mask_of_center_row_polyline_is_a_single_row() {
        // Polyline along y = 0.4 (a row of cell centers), width = one cell.
        let mut scene = generate_scene(0, &WorldConfig::city_a()).unwrap();
        let lane = LaneElement {
            kind: LaneKind::Divider,
            polyline: vec![[-10.0, 0.4], [10.0, 0.4]],
            width: 0.8,
        };
        scene.lanes = vec![lane.clone()];
        let mask = rasterize_lane_mask(&scene, &lane).unwrap();
        let spec = &scene.grid_spec;
        // Independent oracle: plain per-cell distance check over every cell.
        let mut oracle = Vec::new();
        for r in 0..spec.h() {
            for c in 0..spec.w() {
                let (cx, cy) = spec.cell_center(r, c);
                oracle.push(dist_point_segment(cx, cy, [-10.0, 0.4], [10.0, 0.4]) <= 0.4);
            }
        }
        assert_eq!(mask, oracle);
        let rows: std::collections::BTreeSet<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i / spec.w())
            .collect();
        assert_eq!(rows.len(), 1, "expected a single row, got {rows:?}");
        assert_eq!(mask.iter().filter(|&&m| m).count(), 26);
    }

    #[test]
    fn degenerate_and_out_of_extent_lanes_error() {
        let mut scene = generate_scene(0, &WorldConfig::city_a()).unwrap();
        let coincident = LaneElement {
            kind: LaneKind::Divider,
            polyline: vec![[1.0, 1.0], [1.0, 1.0]],
            width: 2.0,
        };
        scene.lanes = vec![coincident.clone()];
        assert!(matches!(rasterize_lane_mask(&scene, &coincident), Err(Error::Argument(_))));

        let outside = LaneElement {
            kind: LaneKind::Boundary,
            polyline: vec![[100.0, 100.0], [120.0, 100.0]],
            width: 2.0,
        };
        scene.lanes = vec![outside.clone()];
        assert!(matches!(rasterize_lane_mask(&scene, &outside), Err(Error::EmptyMask(_))));

        let foreign = LaneElement {
            kind: LaneKind::Crossing,
            polyline: vec![[0.0, 0.0], [5.0, 0.0]],
            width: 2.0,
        };
        assert!(rasterize_lane_mask(&scene, &foreign).is_err());
    }

    #[test]
    fn generated_lane_masks_are_never_empty() {
        for cfg in [WorldConfig::city_a(), WorldConfig::city_b()] {
            for seed in 0..25 {
                let s = generate_scene(seed, &cfg).unwrap();
                for lane in &s.lanes {
                    let mask = rasterize_lane_mask(&s, lane).unwrap();
                    assert!(mask.iter().any(|&m| m), "seed {seed}: empty lane mask");
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip_preserves_scenes_and_checks_schema() {
        let cfg = WorldConfig::city_b();
        let scenes = make_dataset(&cfg, 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        save_jsonl(&scenes, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(scenes, loaded);

        // A tampered schema version must be rejected.
        let text = std::fs::read_to_string(&path).unwrap();
        let bad = text.replace("\"schema_version\":1", "\"schema_version\":99");
        std::fs::write(&path, bad).unwrap();
        assert!(load_jsonl(&path).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = WorldConfig::city_a();
        cfg.class_freq = [0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Config(_))));

        let mut cfg = WorldConfig::city_a();
        cfg.agent_speed = (5.0, 1.0);
        assert!(cfg.validate().is_err());

        let mut cfg = WorldConfig::city_a();
        cfg.lane_width = (0.0, 2.0);
        assert!(cfg.validate().is_err());
    }
}
