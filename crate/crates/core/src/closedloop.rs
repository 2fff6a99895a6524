//! Closed-loop safety evaluation.
//!
//! Scripted hazard scenarios (a blocked lane, an oncoming vehicle, a
//! cutting-in motorcycle) are rolled out with a policy in the control loop:
//! each control step renders the current scene from the ego's frame, asks
//! the policy for a short waypoint plan, tracks the first waypoint with a
//! proportional controller, and advances the world. Collisions are checked
//! at sub-step resolution with the oriented-rectangle separating-axis test;
//! the first contact records the relative speed along the contact normal
//! ("impact velocity"). Episodes score 0-5, where 5 means no collision and
//! the score decays linearly with impact velocity against a per-scenario
//! reference speed.

use alloc::string::String;
use alloc::vec::Vec;

use crate::distill::plan_scene;
use crate::encoders::build_lift_table;
use crate::math;
use crate::model::ModelSpec;
use crate::obb::{obb_intersect, Obb};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{LiftCell, ParamSet};
use crate::world::{
    expert_driver, render_views, Agent, CameraRig, Category, SceneGraph, LANE_WIDTH, PLAN_DT,
    PLAN_STEPS,
};

// ---------------------------------------------------------------------------
// Scenario scripting
// ---------------------------------------------------------------------------

/// The three scripted hazard families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScenarioKind {
    /// A stalled vehicle in the ego lane with both neighbor lanes blocked;
    /// the only safe response is to brake in lane.
    BlockedLane,
    /// A vehicle driving against traffic straight at the ego.
    Oncoming,
    /// A slower motorcycle merging from the left lane into the ego lane.
    CutIn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] =
        [ScenarioKind::BlockedLane, ScenarioKind::Oncoming, ScenarioKind::CutIn];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::BlockedLane => "blocked-lane",
            ScenarioKind::Oncoming => "oncoming",
            ScenarioKind::CutIn => "cut-in",
        }
    }

    pub fn from_name(name: &str) -> Option<ScenarioKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Timed position sample of a scripted actor (world frame).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScriptKey {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// A scripted actor: piecewise-linear waypoint schedule in the world frame.
/// Velocity is the segment slope; outside the keyed time span the actor
/// holds the nearest endpoint at zero velocity.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActorScript {
    pub category: Category,
    /// Heading used while the actor is (momentarily) stationary.
    pub rest_heading: f64,
    /// Keys sorted by strictly increasing time; at least one required.
    pub keys: Vec<ScriptKey>,
}

impl ActorScript {
    fn stationary(category: Category, heading: f64, x: f64, y: f64) -> ActorScript {
        ActorScript { category, rest_heading: heading, keys: alloc::vec![ScriptKey { t: 0.0, x, y }] }
    }

    /// World-frame position and velocity at time `t`.
    pub fn state_at(&self, t: f64) -> (f64, f64, f64, f64) {
        assert!(!self.keys.is_empty(), "actor script needs at least one key");
        let first = self.keys[0];
        let last = self.keys[self.keys.len() - 1];
        if t <= first.t {
            return (first.x, first.y, 0.0, 0.0);
        }
        if t >= last.t {
            return (last.x, last.y, 0.0, 0.0);
        }
        for w in self.keys.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t < b.t {
                let span = b.t - a.t;
                assert!(span > 0.0, "script keys must have increasing times");
                let f = (t - a.t) / span;
                let vx = (b.x - a.x) / span;
                let vy = (b.y - a.y) / span;
                return (a.x + f * span * vx, a.y + f * span * vy, vx, vy);
            }
        }
        unreachable!()
    }

    /// The actor as a world-frame agent at time `t`.
    pub fn agent_at(&self, t: f64, id: u32) -> Agent {
        let (x, y, vx, vy) = self.state_at(t);
        let speed = math::hypot(vx, vy);
        let heading = if speed > 1e-9 { math::atan2(vy, vx) } else { self.rest_heading };
        let (half_len, half_wid, height) = self.category.dims();
        Agent { id, category: self.category, x, y, heading, speed, half_len, half_wid, height }
    }
}

/// A fully specified episode: scripted actors, ego start state, duration and
/// the reference speed used by the score ramp.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Ego speed at t = 0 (m/s); ego starts at the world origin heading +x.
    pub ego_speed: f64,
    /// Episode length in seconds.
    pub duration: f64,
    /// Reference impact speed for scoring: the closing speed a non-reacting
    /// ego would hit the hazard with.
    pub v_ref: f64,
    pub actors: Vec<ActorScript>,
}

/// Sampling ranges for scenario randomization.
#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub ego_speed: (f64, f64),
    /// Initial forward gap to the primary hazard (m).
    pub hazard_dist: (f64, f64),
    /// Oncoming adversary speed (m/s).
    pub oncoming_speed: (f64, f64),
    /// Cut-in speed as a fraction of the ego speed.
    pub cutin_speed_frac: (f64, f64),
    /// Cut-in merge start time and merge duration (s).
    pub cutin_merge_start: (f64, f64),
    pub cutin_merge_dur: (f64, f64),
    pub duration: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            ego_speed: (5.5, 7.5),
            hazard_dist: (12.0, 15.5),
            oncoming_speed: (3.0, 5.0),
            cutin_speed_frac: (0.45, 0.6),
            cutin_merge_start: (0.4, 0.9),
            cutin_merge_dur: (1.0, 1.6),
            duration: 8.0,
        }
    }
}

/// Deterministic scenario synthesis: samples start gap, speeds and timing
/// from `cfg` under the episode seed.
pub fn make_scenario(kind: ScenarioKind, seed: u64, cfg: &ScenarioConfig) -> ScenarioSpec {
    let tag = match kind {
        ScenarioKind::BlockedLane => 0x51,
        ScenarioKind::Oncoming => 0x52,
        ScenarioKind::CutIn => 0x53,
    };
    let mut rng = SplitMix64::new(derive_seed(seed, tag));
    let ego_speed = rng.range_f64(cfg.ego_speed.0, cfg.ego_speed.1);
    let d = rng.range_f64(cfg.hazard_dist.0, cfg.hazard_dist.1);
    let dur = cfg.duration;
    let (v_ref, actors) = match kind {
        ScenarioKind::BlockedLane => {
            // Stalled car ahead plus stopped flankers in both neighbor
            // lanes, so lane changes are not an escape route.
            let lat = rng.range_f64(-0.4, 0.4);
            let cat = if rng.range_f64(0.0, 1.0) < 0.3 { Category::Truck } else { Category::Car };
            let mut actors = alloc::vec![ActorScript::stationary(cat, 0.0, d, lat)];
            for side in [-1.0, 1.0] {
                let fx = d + rng.range_f64(-2.0, 2.0);
                actors.push(ActorScript::stationary(Category::Car, 0.0, fx, side * LANE_WIDTH));
            }
            (ego_speed, actors)
        }
        ScenarioKind::Oncoming => {
            let adv = rng.range_f64(cfg.oncoming_speed.0, cfg.oncoming_speed.1);
            let keys = alloc::vec![
                ScriptKey { t: 0.0, x: d, y: 0.0 },
                ScriptKey { t: dur, x: d - adv * dur, y: 0.0 },
            ];
            let script =
                ActorScript { category: Category::Car, rest_heading: math::PI, keys };
            (ego_speed + adv, alloc::vec![script])
        }
        ScenarioKind::CutIn => {
            let frac = rng.range_f64(cfg.cutin_speed_frac.0, cfg.cutin_speed_frac.1);
            let adv = frac * ego_speed;
            let d0 = rng.range_f64(cfg.hazard_dist.0 - 3.0, cfg.hazard_dist.1 - 3.0);
            let t1 = rng.range_f64(cfg.cutin_merge_start.0, cfg.cutin_merge_start.1);
            let t2 = t1 + rng.range_f64(cfg.cutin_merge_dur.0, cfg.cutin_merge_dur.1);
            let keys = alloc::vec![
                ScriptKey { t: 0.0, x: d0, y: LANE_WIDTH },
                ScriptKey { t: t1, x: d0 + adv * t1, y: LANE_WIDTH },
                ScriptKey { t: t2, x: d0 + adv * t2, y: 0.0 },
                ScriptKey { t: dur, x: d0 + adv * dur, y: 0.0 },
            ];
            let script =
                ActorScript { category: Category::Motorcycle, rest_heading: 0.0, keys };
            (ego_speed - adv, alloc::vec![script])
        }
    };
    let spec = ScenarioSpec { kind, seed, ego_speed, duration: dur, v_ref, actors };
    assert!(spec.duration > 0.0 && spec.v_ref > 0.0);
    spec
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// A learned policy: frozen encoder + waypoint head, fed rendered views of
/// the ego-frame scene every control step.
pub struct NeuralPolicy<'a> {
    pub spec: &'a ModelSpec,
    pub enc: &'a ParamSet,
    pub planner: &'a ParamSet,
    lift: Vec<LiftCell>,
    rig: CameraRig,
}

impl<'a> NeuralPolicy<'a> {
    pub fn new(spec: &'a ModelSpec, enc: &'a ParamSet, planner: &'a ParamSet) -> Self {
        NeuralPolicy { spec, enc, planner, lift: build_lift_table(spec), rig: spec.rig() }
    }
}

/// Policies map the current ego-frame scene to ego-frame waypoints at
/// `PLAN_DT` spacing. The scripted variants are controller/kinematics
/// oracles for tests and bounds.
pub enum Policy<'a> {
    /// The rule-based driver used to generate imitation targets.
    Expert,
    /// Hold the current speed straight ahead, never react.
    ConstantSpeed,
    /// Demand an immediate stop regardless of the scene.
    FullBrake,
    Neural(NeuralPolicy<'a>),
}

impl Policy<'_> {
    pub fn plan(&self, scene: &SceneGraph) -> Vec<(f64, f64)> {
        match self {
            Policy::Expert => expert_driver(scene).waypoints,
            Policy::ConstantSpeed => (1..=PLAN_STEPS)
                .map(|k| (scene.ego_speed * k as f64 * PLAN_DT, 0.0))
                .collect(),
            Policy::FullBrake => alloc::vec![(0.0, 0.0); PLAN_STEPS],
            Policy::Neural(p) => {
                let views = render_views(scene, &p.rig);
                plan_scene(p.spec, p.enc, p.planner, &p.lift, &views)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Expert => "expert",
            Policy::ConstantSpeed => "constant-speed",
            Policy::FullBrake => "full-brake",
            Policy::Neural(_) => "neural",
        }
    }
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

/// Controller and integration constants.
#[derive(Clone, Debug)]
pub struct EpisodeConfig {
    /// Control period (s); the policy replans once per period.
    pub dt: f64,
    /// Collision-check substeps per control period.
    pub substeps: usize,
    /// Acceleration limits (m/s^2): forward and braking.
    pub accel_max: f64,
    pub brake_max: f64,
    /// Yaw-rate limit (rad/s) and proportional gains.
    pub yaw_rate_max: f64,
    pub speed_gain: f64,
    pub yaw_gain: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            dt: 0.5,
            substeps: 5,
            accel_max: 2.5,
            brake_max: 6.0,
            yaw_rate_max: 0.6,
            speed_gain: 2.0,
            yaw_gain: 1.5,
        }
    }
}

/// World-frame ego state.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// One control step of an episode: world-frame ego state at replanning time
/// plus the ego-frame plan the policy produced there.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub ego: EgoState,
    pub plan: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeResult {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub collided: bool,
    /// Relative speed along the contact normal at first contact; 0 without
    /// a collision.
    pub impact_velocity: f64,
    /// 0-5; 5 exactly when the episode ends collision-free.
    pub score: f64,
    pub trace: Vec<TraceStep>,
}

/// Ego footprint (car dimensions).
fn ego_box(ego: &EgoState) -> Obb {
    let (half_len, half_wid, _) = Category::Car.dims();
    Obb { cx: ego.x, cy: ego.y, half_len, half_wid, heading: ego.heading }
}

/// The scene as the ego sees it: actors transformed into the ego frame.
/// Actor speeds stay ground speeds (a parked car is "still" no matter how
/// the ego moves), matching the training-scene convention.
pub fn ego_frame_scene(scenario: &ScenarioSpec, ego: &EgoState, t: f64) -> SceneGraph {
    let (c, s) = (math::cos(ego.heading), math::sin(ego.heading));
    let agents = scenario
        .actors
        .iter()
        .enumerate()
        .map(|(i, script)| {
            let a = script.agent_at(t, i as u32);
            let (dx, dy) = (a.x - ego.x, a.y - ego.y);
            Agent {
                x: dx * c + dy * s,
                y: -dx * s + dy * c,
                heading: a.heading - ego.heading,
                ..a
            }
        })
        .collect();
    SceneGraph { scene_id: scenario.seed, seed: scenario.seed, ego_speed: ego.speed, agents }
}

/// Separating-axis contact check of the ego against every scripted actor.
/// Returns the approach speed along the contact normal of the actor hit
/// hardest (normals point from the ego toward the actor, so positive means
/// closing).
pub fn first_contact(
    ego: &Obb,
    ego_v: (f64, f64),
    actors: &[(Obb, f64, f64)],
) -> Option<f64> {
    assert!(ego.half_len > 0.0 && ego.half_wid > 0.0, "degenerate ego box");
    let mut worst: Option<f64> = None;
    for (obb, vx, vy) in actors {
        assert!(obb.half_len > 0.0 && obb.half_wid > 0.0, "degenerate actor box");
        if let Some((nx, ny)) = obb_intersect(ego, obb) {
            let closing = (ego_v.0 - vx) * nx + (ego_v.1 - vy) * ny;
            let impact = closing.max(0.0);
            if worst.map_or(true, |w| impact > w) {
                worst = Some(impact);
            }
        }
    }
    worst
}

/// 5 when no collision; otherwise a linear ramp that reaches 0 once the
/// impact speed matches the reference speed.
pub fn score_episode(collided: bool, impact_velocity: f64, v_ref: f64) -> f64 {
    assert!(v_ref > 0.0, "reference speed must be positive");
    if !collided {
        5.0
    } else {
        5.0 * (1.0 - impact_velocity / v_ref).max(0.0)
    }
}

/// Roll one episode forward until its duration elapses or the ego collides.
///
/// Every control period the policy replans on the rendered ego-frame scene;
/// a proportional controller tracks the first waypoint (its distance sets
/// the demanded speed, its bearing the yaw rate); dynamics integrate at
/// sub-step resolution where each substep also runs the contact check.
pub fn run_episode(
    policy: &Policy<'_>,
    scenario: &ScenarioSpec,
    ecfg: &EpisodeConfig,
) -> EpisodeResult {
    assert!(scenario.duration > 0.0 && scenario.v_ref > 0.0 && ecfg.dt > 0.0);
    assert!(ecfg.substeps > 0);
    let mut ego = EgoState { x: 0.0, y: 0.0, heading: 0.0, speed: scenario.ego_speed };
    let steps = (scenario.duration / ecfg.dt + 0.5) as usize;
    let mut trace = Vec::with_capacity(steps);
    let mut collided = false;
    let mut impact_velocity = 0.0;

    let actor_boxes = |t: f64| -> Vec<(Obb, f64, f64)> {
        scenario
            .actors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let a = s.agent_at(t, i as u32);
                (a.obb(), a.vx(), a.vy())
            })
            .collect()
    };
    let ego_vel = |e: &EgoState| {
        (e.speed * math::cos(e.heading), e.speed * math::sin(e.heading))
    };

    // Scenarios must start separated; a contact at t=0 is a scripting bug.
    assert!(
        first_contact(&ego_box(&ego), ego_vel(&ego), &actor_boxes(0.0)).is_none(),
        "scenario starts in contact"
    );

    'outer: for step in 0..steps {
        let t = step as f64 * ecfg.dt;
        let scene = ego_frame_scene(scenario, &ego, t);
        let plan = policy.plan(&scene);
        trace.push(TraceStep { t, ego, plan: plan.clone() });

        // Track the first waypoint: its distance sets the speed demand, its
        // bearing the steering demand. The demand is the end-of-period speed
        // whose average with the current speed covers the waypoint distance
        // exactly, so decelerating plans are tracked without overshoot. A
        // (near-)origin waypoint demands a stop with the heading held.
        let (wx, wy) = plan.first().copied().unwrap_or((0.0, 0.0));
        let dist = math::hypot(wx, wy);
        let v_des = (2.0 * dist / PLAN_DT - ego.speed).max(0.0);
        let bearing = if dist > 0.05 { math::atan2(wy, wx) } else { 0.0 };
        let accel =
            (ecfg.speed_gain * (v_des - ego.speed)).clamp(-ecfg.brake_max, ecfg.accel_max);
        let yaw_rate =
            (ecfg.yaw_gain * bearing).clamp(-ecfg.yaw_rate_max, ecfg.yaw_rate_max);

        let h = ecfg.dt / ecfg.substeps as f64;
        for sub in 1..=ecfg.substeps {
            ego.speed = (ego.speed + accel * h).max(0.0);
            ego.heading += yaw_rate * h;
            ego.x += ego.speed * math::cos(ego.heading) * h;
            ego.y += ego.speed * math::sin(ego.heading) * h;
            let t_sub = t + sub as f64 * h;
            let boxes = actor_boxes(t_sub);
            if let Some(impact) = first_contact(&ego_box(&ego), ego_vel(&ego), &boxes) {
                let speed_sum = ego.speed
                    + boxes.iter().map(|(_, vx, vy)| math::hypot(*vx, *vy)).fold(0.0, f64::max);
                assert!(
                    impact <= speed_sum + 1e-9,
                    "impact {impact} exceeds kinematic bound {speed_sum}"
                );
                collided = true;
                impact_velocity = impact;
                break 'outer;
            }
        }
    }

    let score = score_episode(collided, impact_velocity, scenario.v_ref);
    EpisodeResult { kind: scenario.kind, seed: scenario.seed, collided, impact_velocity, score, trace }
}

/// Build the scenario for `(kind, seed)` and roll it out.
pub fn run_scenario(
    policy: &Policy<'_>,
    kind: ScenarioKind,
    seed: u64,
    scfg: &ScenarioConfig,
    ecfg: &EpisodeConfig,
) -> EpisodeResult {
    run_episode(policy, &make_scenario(kind, seed, scfg), ecfg)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Collision rate, mean score and mean impact speed for one scenario kind
/// (or the overall pool). The impact mean covers collision episodes only and
/// is absent when none collided.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KindStats {
    pub kind: String,
    pub episodes: usize,
    pub collisions: usize,
    pub collision_rate: f64,
    pub mean_score: f64,
    pub mean_impact_velocity: Option<f64>,
}

fn stats_of<'a>(kind: &str, pool: impl Iterator<Item = &'a EpisodeResult>) -> KindStats {
    let mut episodes = 0usize;
    let mut collisions = 0usize;
    let mut score_sum = 0.0;
    let mut impact_sum = 0.0;
    for e in pool {
        episodes += 1;
        score_sum += e.score;
        if e.collided {
            collisions += 1;
            impact_sum += e.impact_velocity;
        }
    }
    assert!(episodes > 0, "empty episode pool for {kind}");
    KindStats {
        kind: String::from(kind),
        episodes,
        collisions,
        collision_rate: collisions as f64 / episodes as f64,
        mean_score: score_sum / episodes as f64,
        mean_impact_velocity: (collisions > 0).then(|| impact_sum / collisions as f64),
    }
}

/// Per-kind and pooled statistics over a set of episodes; order-invariant.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClosedLoopReport {
    pub per_kind: Vec<KindStats>,
    pub overall: KindStats,
    /// Sorted distinct episode seeds, for provenance.
    pub seeds: Vec<u64>,
}

pub fn aggregate(episodes: &[EpisodeResult]) -> ClosedLoopReport {
    assert!(!episodes.is_empty(), "cannot aggregate zero episodes");
    let per_kind = ScenarioKind::ALL
        .iter()
        .filter(|k| episodes.iter().any(|e| e.kind == **k))
        .map(|k| stats_of(k.name(), episodes.iter().filter(|e| e.kind == *k)))
        .collect();
    let overall = stats_of("overall", episodes.iter());
    let mut seeds: Vec<u64> = episodes.iter().map(|e| e.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    ClosedLoopReport { per_kind, overall, seeds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_encoder, init_planner, EncoderKind};

    #[test]
    fn score_formula_endpoints() {
        assert_eq!(score_episode(false, 0.0, 4.0), 5.0);
        assert!((score_episode(true, 4.0, 4.0) - 0.0).abs() < 1e-12);
        assert!((score_episode(true, 2.0, 4.0) - 2.5).abs() < 1e-12);
        // Above the reference speed the ramp clamps at zero.
        assert_eq!(score_episode(true, 9.0, 4.0), 0.0);
    }

    #[test]
    fn script_interpolation_matches_closed_form() {
        let s = ActorScript {
            category: Category::Car,
            rest_heading: 0.3,
            keys: alloc::vec![
                ScriptKey { t: 0.0, x: 0.0, y: 0.0 },
                ScriptKey { t: 2.0, x: 4.0, y: 0.0 },
                ScriptKey { t: 4.0, x: 4.0, y: -2.0 },
            ],
        };
        let (x, y, vx, vy) = s.state_at(1.0);
        assert!((x - 2.0).abs() < 1e-12 && y.abs() < 1e-12);
        assert!((vx - 2.0).abs() < 1e-12 && vy.abs() < 1e-12);
        let (x, y, vx, vy) = s.state_at(3.0);
        assert!((x - 4.0).abs() < 1e-12 && (y + 1.0).abs() < 1e-12);
        assert!(vx.abs() < 1e-12 && (vy + 1.0).abs() < 1e-12);
        // Outside the keyed span the actor holds position at rest.
        let (x, y, vx, vy) = s.state_at(9.0);
        assert!((x - 4.0).abs() < 1e-12 && (y + 2.0).abs() < 1e-12);
        assert_eq!((vx, vy), (0.0, 0.0));
        // Heading comes from motion when moving, from rest_heading when not.
        assert!((s.agent_at(1.0, 0).heading - 0.0).abs() < 1e-12);
        assert!((s.agent_at(3.0, 0).heading + crate::math::PI / 2.0).abs() < 1e-12);
        assert!((s.agent_at(9.0, 0).heading - 0.3).abs() < 1e-12);
    }

    #[test]
    fn scenarios_are_deterministic_perceivable_and_start_separated() {
        let cfg = ScenarioConfig::default();
        for kind in ScenarioKind::ALL {
            for seed in 0..20u64 {
                let a = make_scenario(kind, seed, &cfg);
                let b = make_scenario(kind, seed, &cfg);
                assert_eq!(a, b, "scenario synthesis must be deterministic");
                assert!(a.duration > 0.0 && a.v_ref > 0.0);
                // The primary hazard starts within sensing range.
                let hazard = a.actors[0].agent_at(0.0, 0);
                assert!(hazard.distance() < 16.0, "hazard too far: {}", hazard.distance());
                // And nothing overlaps the ego at t=0 (run_episode asserts
                // this too; here we fail with the offending seed).
                let ego = EgoState { x: 0.0, y: 0.0, heading: 0.0, speed: a.ego_speed };
                let boxes: Vec<_> = a
                    .actors
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let ag = s.agent_at(0.0, i as u32);
                        (ag.obb(), ag.vx(), ag.vy())
                    })
                    .collect();
                assert!(
                    first_contact(&ego_box(&ego), (a.ego_speed, 0.0), &boxes).is_none(),
                    "{kind:?} seed {seed} starts in contact"
                );
            }
        }
    }

    #[test]
    fn expert_policy_clears_blocked_lane() {
        let cfg = ScenarioConfig::default();
        let ecfg = EpisodeConfig::default();
        for seed in 0..10u64 {
            let r = run_scenario(&Policy::Expert, ScenarioKind::BlockedLane, seed, &cfg, &ecfg);
            assert!(!r.collided, "expert collided on seed {seed}");
            assert_eq!(r.score, 5.0);
            assert_eq!(r.impact_velocity, 0.0);
            // The expert must actually brake for the stalled car, not stop
            // merely because the episode ended.
            let final_speed = r.trace.last().unwrap().ego.speed;
            assert!(final_speed < 1.0, "expert still moving at {final_speed} m/s");
        }
    }

    #[test]
    fn non_reacting_policy_hits_oncoming_at_closing_speed() {
        // Hand-built head-on scenario: ego at 6 m/s, adversary at 4 m/s
        // straight at it. Both hold speed, so the impact speed along the
        // (axis-aligned) contact normal is the 10 m/s closing speed.
        let dur = 8.0;
        let scenario = ScenarioSpec {
            kind: ScenarioKind::Oncoming,
            seed: 7,
            ego_speed: 6.0,
            duration: dur,
            v_ref: 10.0,
            actors: alloc::vec![ActorScript {
                category: Category::Car,
                rest_heading: crate::math::PI,
                keys: alloc::vec![
                    ScriptKey { t: 0.0, x: 14.0, y: 0.0 },
                    ScriptKey { t: dur, x: 14.0 - 4.0 * dur, y: 0.0 },
                ],
            }],
        };
        let r = run_episode(&Policy::ConstantSpeed, &scenario, &EpisodeConfig::default());
        assert!(r.collided);
        assert!(
            (r.impact_velocity - 10.0).abs() / 10.0 < 0.05,
            "impact {} vs kinematic 10.0",
            r.impact_velocity
        );
        assert_eq!(r.score, 0.0);
        // First contact when the gap (14 m minus both half-lengths) closes
        // at 10 m/s: t = (14 - 4.5) / 10 = 0.95 s, at substep resolution.
        let t_contact = r.trace.last().unwrap().t + 0.5;
        assert!((0.6..=1.2).contains(&t_contact), "contact at {t_contact} s");
    }

    #[test]
    fn braking_beats_never_braking_on_every_kind() {
        let cfg = ScenarioConfig::default();
        let ecfg = EpisodeConfig::default();
        let mut brake_total = 0.0;
        let mut rush_total = 0.0;
        for kind in ScenarioKind::ALL {
            for seed in 0..5u64 {
                let brake = run_scenario(&Policy::FullBrake, kind, seed, &cfg, &ecfg);
                let rush = run_scenario(&Policy::ConstantSpeed, kind, seed, &cfg, &ecfg);
                assert!(
                    brake.score >= rush.score - 1e-12,
                    "{kind:?} seed {seed}: braking scored {} vs {}",
                    brake.score,
                    rush.score
                );
                if brake.collided && rush.collided {
                    assert!(brake.impact_velocity <= rush.impact_velocity + 1e-9);
                }
                // A never-reacting ego must hit the scripted hazard.
                assert!(rush.collided, "{kind:?} seed {seed} did not challenge the ego");
                brake_total += brake.score;
                rush_total += rush.score;
            }
        }
        assert!(
            brake_total > rush_total + 1.0,
            "braking {brake_total} not clearly above never-braking {rush_total}"
        );
    }

    #[test]
    fn episodes_are_deterministic() {
        let cfg = ScenarioConfig::default();
        let ecfg = EpisodeConfig::default();
        for kind in ScenarioKind::ALL {
            let a = run_scenario(&Policy::FullBrake, kind, 3, &cfg, &ecfg);
            let b = run_scenario(&Policy::FullBrake, kind, 3, &cfg, &ecfg);
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
        }
    }

    #[test]
    fn untrained_neural_policy_runs_and_is_deterministic() {
        let spec = ModelSpec::default();
        let enc = init_encoder(&spec, EncoderKind::Bev, 11);
        let planner = init_planner(&spec, 12);
        let policy = Policy::Neural(NeuralPolicy::new(&spec, &enc, &planner));
        let cfg = ScenarioConfig::default();
        let ecfg = EpisodeConfig::default();
        let a = run_scenario(&policy, ScenarioKind::BlockedLane, 1, &cfg, &ecfg);
        let b = run_scenario(&policy, ScenarioKind::BlockedLane, 1, &cfg, &ecfg);
        assert_eq!(a, b, "neural rollouts must be reproducible");
        assert!(!a.trace.is_empty());
        assert!((0.0..=5.0).contains(&a.score));
        if !a.collided {
            assert_eq!(a.impact_velocity, 0.0);
            assert_eq!(a.score, 5.0);
        } else {
            assert!(a.impact_velocity >= 0.0);
        }
    }

    /// Dense point-sampling overlap oracle (grid inside each box tested for
    /// membership in the other), mirroring the separating-axis test oracle.
    fn sampled_overlap(a: &Obb, b: &Obb, n: usize) -> bool {
        for (r, other) in [(a, b), (b, a)] {
            let (c, s) = (crate::math::cos(r.heading), crate::math::sin(r.heading));
            for i in 0..n {
                for j in 0..n {
                    let u = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    let v = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    let px = r.cx + c * u * r.half_len - s * v * r.half_wid;
                    let py = r.cy + s * u * r.half_len + c * v * r.half_wid;
                    if other.contains(px, py) {
                        return true;
                    }
                }
            }
        }
        false
    }

    #[test]
    fn contact_check_agrees_with_sampling_and_respects_kinematic_bound() {
        let mut rng = SplitMix64::new(0xCAB);
        let mut disagreements = 0usize;
        let mut contacts = 0usize;
        let total = 1000;
        for _ in 0..total {
            let mut mk = |r: &mut SplitMix64| Obb {
                cx: r.range_f64(-3.0, 3.0),
                cy: r.range_f64(-3.0, 3.0),
                half_len: r.range_f64(0.3, 1.5),
                half_wid: r.range_f64(0.3, 1.5),
                heading: r.range_f64(0.0, 2.0 * crate::math::PI),
            };
            let ego = mk(&mut rng);
            let actor = mk(&mut rng);
            let ego_v = (rng.range_f64(-8.0, 8.0), rng.range_f64(-8.0, 8.0));
            let actor_v = (rng.range_f64(-8.0, 8.0), rng.range_f64(-8.0, 8.0));
            let hit = first_contact(&ego, ego_v, &[(actor, actor_v.0, actor_v.1)]);
            // Refine with a denser grid before declaring a disagreement, so
            // only overlap slivers thinner than the fine pitch slip through.
            let sampled =
                sampled_overlap(&ego, &actor, 60) || sampled_overlap(&ego, &actor, 300);
            if sampled && hit.is_none() {
                panic!("sampling found an overlap the contact check missed");
            }
            if hit.is_some() != sampled {
                disagreements += 1;
            }
            if let Some(impact) = hit {
                contacts += 1;
                let bound = crate::math::hypot(ego_v.0, ego_v.1)
                    + crate::math::hypot(actor_v.0, actor_v.1);
                assert!((0.0..=bound + 1e-9).contains(&impact));
            }
        }
        assert!(contacts > 100 && contacts < 900, "degenerate draw: {contacts}");
        let agreement = 1.0 - disagreements as f64 / total as f64;
        assert!(agreement >= 0.999, "agreement {agreement}");
    }

    #[test]
    fn aggregation_matches_hand_computation_and_ignores_order() {
        let ep = |kind, seed, impact: f64, v_ref: f64| {
            let collided = impact > 0.0;
            EpisodeResult {
                kind,
                seed,
                collided,
                impact_velocity: impact,
                score: score_episode(collided, impact, v_ref),
                trace: Vec::new(),
            }
        };
        let episodes = alloc::vec![
            ep(ScenarioKind::BlockedLane, 0, 0.0, 6.0),
            ep(ScenarioKind::Oncoming, 1, 4.0, 10.0),
            ep(ScenarioKind::Oncoming, 2, 2.0, 10.0),
        ];
        let rep = aggregate(&episodes);
        assert_eq!(rep.overall.episodes, 3);
        assert_eq!(rep.overall.collisions, 2);
        assert!((rep.overall.collision_rate - 2.0 / 3.0).abs() < 1e-12);
        // Scores: 5.0, 3.0, 4.0 -> mean 4.0; impacts over collisions: 3.0.
        assert!((rep.overall.mean_score - 4.0).abs() < 1e-12);
        assert!((rep.overall.mean_impact_velocity.unwrap() - 3.0).abs() < 1e-12);
        let blocked = &rep.per_kind[0];
        assert_eq!((blocked.kind.as_str(), blocked.collisions), ("blocked-lane", 0));
        assert_eq!(blocked.mean_impact_velocity, None);
        let oncoming = &rep.per_kind[1];
        assert_eq!((oncoming.kind.as_str(), oncoming.collisions), ("oncoming", 2));
        assert_eq!(rep.seeds, alloc::vec![0, 1, 2]);

        let mut shuffled = episodes.clone();
        shuffled.reverse();
        assert_eq!(aggregate(&shuffled), rep);
    }
}
