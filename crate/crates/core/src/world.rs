//! Synthetic driving world: scene graphs, the six-camera rig, raster
//! rendering, BEV target rasterization, constant-velocity dynamics and a
//! rule-based expert driver.
//!
//! Frames and conventions:
//! * ego frame: x forward, y left, meters; headings are radians CCW from +x.
//! * bearings: degrees CCW, 0 = straight ahead (see [`crate::sector`]).
//! * BEV grids: row index walks x from `x_min` to `x_max`, column index
//!   walks y from `y_min` to `y_max`; a left-right scene mirror is a column
//!   flip.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::obb::{obb_intersect, Obb};
use crate::rng::{derive_seed, SplitMix64};
use crate::sector::bearing_deg;
use crate::tensor::Tensor;

/// Speed strictly above this counts as "moving" (m/s).
pub const MOVING_SPEED_THRESHOLD: f64 = 0.2;

/// Implicit straight-lane width used by the expert driver (m).
pub const LANE_WIDTH: f64 = 3.5;

/// Waypoints per plan and their spacing (s).
pub const PLAN_STEPS: usize = 6;
pub const PLAN_DT: f64 = 0.5;

// ---------------------------------------------------------------------------
// Categories and agents
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Category {
    Car,
    Truck,
    Bus,
    Trailer,
    ConstructionVehicle,
    Pedestrian,
    Motorcycle,
    Bicycle,
    TrafficCone,
    Barrier,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Car,
        Category::Truck,
        Category::Bus,
        Category::Trailer,
        Category::ConstructionVehicle,
        Category::Pedestrian,
        Category::Motorcycle,
        Category::Bicycle,
        Category::TrafficCone,
        Category::Barrier,
    ];

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Category {
        Category::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Truck => "truck",
            Category::Bus => "bus",
            Category::Trailer => "trailer",
            Category::ConstructionVehicle => "construction vehicle",
            Category::Pedestrian => "pedestrian",
            Category::Motorcycle => "motorcycle",
            Category::Bicycle => "bicycle",
            Category::TrafficCone => "traffic cone",
            Category::Barrier => "barrier",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Category::Car => "cars",
            Category::Truck => "trucks",
            Category::Bus => "buses",
            Category::Trailer => "trailers",
            Category::ConstructionVehicle => "construction vehicles",
            Category::Pedestrian => "pedestrians",
            Category::Motorcycle => "motorcycles",
            Category::Bicycle => "bicycles",
            Category::TrafficCone => "traffic cones",
            Category::Barrier => "barriers",
        }
    }

    /// Whether this category can ever have nonzero speed.
    pub fn movable(self) -> bool {
        !matches!(self, Category::TrafficCone | Category::Barrier)
    }

    /// Word for the not-moving state ("parked car", "standing pedestrian").
    pub fn still_word(self) -> &'static str {
        match self {
            Category::Pedestrian => "standing",
            _ => "parked",
        }
    }

    /// (half_len, half_wid, height) in meters.
    pub fn dims(self) -> (f64, f64, f64) {
        match self {
            Category::Car => (2.25, 0.9, 1.6),
            Category::Truck => (3.4, 1.25, 3.0),
            Category::Bus => (5.5, 1.45, 3.2),
            Category::Trailer => (6.0, 1.4, 3.8),
            Category::ConstructionVehicle => (3.2, 1.4, 3.2),
            Category::Pedestrian => (0.35, 0.35, 1.75),
            Category::Motorcycle => (1.05, 0.4, 1.4),
            Category::Bicycle => (0.85, 0.3, 1.4),
            Category::TrafficCone => (0.25, 0.25, 0.8),
            Category::Barrier => (1.0, 0.25, 1.0),
        }
    }
}

/// Number of raster channels: one per category plus signed (vx, vy) planes.
pub const RASTER_CHANNELS: usize = Category::ALL.len() + 2;
pub const VX_CHANNEL: usize = Category::ALL.len();
pub const VY_CHANNEL: usize = Category::ALL.len() + 1;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Agent {
    pub id: u32,
    pub category: Category,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub half_len: f64,
    pub half_wid: f64,
    pub height: f64,
}

impl Agent {
    pub fn obb(&self) -> Obb {
        Obb {
            cx: self.x,
            cy: self.y,
            half_len: self.half_len,
            half_wid: self.half_wid,
            heading: self.heading,
        }
    }

    pub fn vx(&self) -> f64 {
        self.speed * math::cos(self.heading)
    }

    pub fn vy(&self) -> f64 {
        self.speed * math::sin(self.heading)
    }

    /// Strictly-greater-than-threshold rule: exactly 0.2 m/s is *not* moving.
    pub fn is_moving(&self) -> bool {
        self.speed > MOVING_SPEED_THRESHOLD
    }

    pub fn distance(&self) -> f64 {
        math::hypot(self.x, self.y)
    }

    pub fn bearing_deg(&self) -> f64 {
        bearing_deg(self.x, self.y)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SceneGraph {
    pub scene_id: u64,
    pub seed: u64,
    pub ego_speed: f64,
    pub agents: Vec<Agent>,
}

impl SceneGraph {
    /// Left-right mirror (y -> -y). Useful for symmetry oracles.
    pub fn mirrored(&self) -> SceneGraph {
        let mut out = self.clone();
        for a in &mut out.agents {
            a.y = -a.y;
            a.heading = -a.heading;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// BEV range
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BevRange {
    pub x_min: f64,
    pub y_min: f64,
    pub z_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub z_max: f64,
}

impl Default for BevRange {
    fn default() -> Self {
        BevRange { x_min: -51.2, y_min: -51.2, z_min: -5.0, x_max: 51.2, y_max: 51.2, z_max: 3.0 }
    }
}

impl BevRange {
    pub fn square(half: f64) -> Self {
        BevRange { x_min: -half, y_min: -half, z_min: -5.0, x_max: half, y_max: half, z_max: 3.0 }
    }

    pub fn cell_center(&self, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
        let dx = (self.x_max - self.x_min) / h as f64;
        let dy = (self.y_max - self.y_min) / w as f64;
        (self.x_min + (i as f64 + 0.5) * dx, self.y_min + (j as f64 + 0.5) * dy)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Agents whose center lies inside the BEV range.
pub fn spatial_range_filter<'a>(scene: &'a SceneGraph, range: &BevRange) -> Vec<&'a Agent> {
    scene.agents.iter().filter(|a| range.contains_point(a.x, a.y)).collect()
}

// ---------------------------------------------------------------------------
// Camera rig and projection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub name: String,
    pub yaw_deg: f64,
    pub fov_deg: f64,
}

impl Camera {
    /// Bearing relative to the camera axis, wrapped to (-180, 180].
    pub fn local_deg(&self, bearing: f64) -> f64 {
        math::rad_to_deg(math::wrap_pi(math::deg_to_rad(bearing - self.yaw_deg)))
    }

    pub fn sees(&self, bearing: f64) -> bool {
        math::abs(self.local_deg(bearing)) <= self.fov_deg / 2.0
    }

    /// Continuous image column of a bearing under a pinhole model. Columns
    /// grow rightward, so positive local bearings (left of axis) map low.
    pub fn column_of_bearing(&self, bearing: f64, width: usize) -> f64 {
        let local = math::deg_to_rad(self.local_deg(bearing));
        let half = math::deg_to_rad(self.fov_deg / 2.0);
        width as f64 * 0.5 * (1.0 - libm::tan(local) / libm::tan(half))
    }

    /// Inverse of [`Camera::column_of_bearing`]: world bearing of a column.
    pub fn bearing_of_column(&self, u: f64, width: usize) -> f64 {
        let half = math::deg_to_rad(self.fov_deg / 2.0);
        let t = (1.0 - 2.0 * u / width as f64) * libm::tan(half);
        math::wrap_deg(self.yaw_deg + math::rad_to_deg(libm::atan(t)))
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub width: usize,
    pub height: usize,
    /// Vertical field of view for row extents (degrees).
    pub vfov_deg: f64,
}

impl CameraRig {
    /// The standard six-camera rig: front and side cameras at 70 degrees,
    /// rear at 110 degrees.
    pub fn standard(height: usize, width: usize) -> CameraRig {
        let cam = |name: &str, yaw: f64, fov: f64| Camera {
            name: name.to_string(),
            yaw_deg: yaw,
            fov_deg: fov,
        };
        CameraRig {
            cameras: vec![
                cam("FRONT", 0.0, 70.0),
                cam("FRONT_LEFT", 55.0, 70.0),
                cam("FRONT_RIGHT", -55.0, 70.0),
                cam("BACK_LEFT", 110.0, 70.0),
                cam("BACK_RIGHT", -110.0, 70.0),
                cam("BACK", 180.0, 110.0),
            ],
            width,
            height,
            vfov_deg: 40.0,
        }
    }

    pub fn mirrored(&self) -> CameraRig {
        let mut out = self.clone();
        for c in &mut out.cameras {
            c.yaw_deg = -c.yaw_deg;
        }
        out
    }

    pub fn camera(&self, name: &str) -> &Camera {
        self.cameras
            .iter()
            .find(|c| c.name == name)
            .unwrap_or_else(|| panic!("no camera named {name:?}"))
    }

    pub fn camera_index(&self, name: &str) -> usize {
        self.cameras
            .iter()
            .position(|c| c.name == name)
            .unwrap_or_else(|| panic!("no camera named {name:?}"))
    }
}

/// Projected image-plane box of an agent in one camera (continuous
/// coordinates; `u` in `[0, width]`, `v` in `[0, height]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageBox {
    pub u_lo: f64,
    pub u_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

impl ImageBox {
    pub fn iou(&self, other: &ImageBox) -> f64 {
        let iw = (self.u_hi.min(other.u_hi) - self.u_lo.max(other.u_lo)).max(0.0);
        let ih = (self.v_hi.min(other.v_hi) - self.v_lo.max(other.v_lo)).max(0.0);
        let inter = iw * ih;
        let a = (self.u_hi - self.u_lo).max(0.0) * (self.v_hi - self.v_lo).max(0.0);
        let b = (other.u_hi - other.u_lo).max(0.0) * (other.v_hi - other.v_lo).max(0.0);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (a + b - inter)
    }
}

/// Projection shared by the renderer and the pixel-to-ego converter: the
/// agent's center bearing must be inside the camera FOV, otherwise `None`.
pub fn project_agent(cam: &Camera, rig: &CameraRig, agent: &Agent) -> Option<ImageBox> {
    let d = agent.distance();
    if d < 1e-6 {
        return None;
    }
    let bearing = agent.bearing_deg();
    if !cam.sees(bearing) {
        return None;
    }
    let r_obj = agent.half_len.max(agent.half_wid);
    let half_ang = math::rad_to_deg(libm::atan(r_obj / d));
    let u_a = cam.column_of_bearing(bearing + half_ang, rig.width);
    let u_b = cam.column_of_bearing(bearing - half_ang, rig.width);
    let (u_lo, u_hi) = if u_a <= u_b { (u_a, u_b) } else { (u_b, u_a) };
    let half_v = math::deg_to_rad(rig.vfov_deg / 2.0);
    let h_px = rig.height as f64 * agent.height / (2.0 * d * libm::tan(half_v));
    let mid = rig.height as f64 * 0.5;
    Some(ImageBox {
        u_lo: u_lo.max(0.0),
        u_hi: u_hi.min(rig.width as f64),
        v_lo: (mid - h_px * 0.5).max(0.0),
        v_hi: (mid + h_px * 0.5).min(rig.height as f64),
    })
}

/// Render intensity falls off with distance as `1 / (1 + k d)`.
pub const RENDER_DIST_FALLOFF: f64 = 0.05;

/// Speeds are encoded in the velocity channel relative to this scale (m/s).
pub const RENDER_SPEED_SCALE: f64 = 10.0;

/// Render all rig views of a scene. Each view is `[RASTER_CHANNELS, H, W]`:
/// category channels painted with distance-attenuated intensity
/// (max-composited, no occlusion), plus signed (vx, vy) planes painted only
/// by moving agents, scaled by speed and composited by magnitude.
pub fn render_views(scene: &SceneGraph, rig: &CameraRig) -> Vec<Tensor> {
    let (h, w) = (rig.height, rig.width);
    let mut views = vec![Tensor::zeros(&[RASTER_CHANNELS, h, w]); rig.cameras.len()];
    for (ci, cam) in rig.cameras.iter().enumerate() {
        let img = &mut views[ci].data;
        for agent in &scene.agents {
            let Some(bx) = project_agent(cam, rig, agent) else { continue };
            let d = agent.distance();
            let intensity = 1.0 / (1.0 + RENDER_DIST_FALLOFF * d);
            let mut cols: Vec<usize> = (0..w)
                .filter(|&j| {
                    let c = j as f64 + 0.5;
                    c >= bx.u_lo && c <= bx.u_hi
                })
                .collect();
            if cols.is_empty() {
                let u = ((bx.u_lo + bx.u_hi) * 0.5).clamp(0.0, w as f64 - 1.0);
                cols.push(u as usize);
            }
            let mut rows: Vec<usize> = (0..h)
                .filter(|&i| {
                    let c = i as f64 + 0.5;
                    c >= bx.v_lo && c <= bx.v_hi
                })
                .collect();
            if rows.is_empty() {
                rows.push(h / 2);
            }
            let cat = agent.category.index();
            let (pvx, pvy) = if agent.is_moving() {
                (
                    intensity * (agent.vx() / RENDER_SPEED_SCALE).clamp(-1.0, 1.0),
                    intensity * (agent.vy() / RENDER_SPEED_SCALE).clamp(-1.0, 1.0),
                )
            } else {
                (0.0, 0.0)
            };
            for &r in &rows {
                for &c in &cols {
                    let idx = (cat * h + r) * w + c;
                    if intensity > img[idx] {
                        img[idx] = intensity;
                    }
                    let xidx = (VX_CHANNEL * h + r) * w + c;
                    if math::abs(pvx) > math::abs(img[xidx]) {
                        img[xidx] = pvx;
                    }
                    let yidx = (VY_CHANNEL * h + r) * w + c;
                    if math::abs(pvy) > math::abs(img[yidx]) {
                        img[yidx] = pvy;
                    }
                }
            }
        }
    }
    views
}

// ---------------------------------------------------------------------------
// BEV target rasterization
// ---------------------------------------------------------------------------

/// Class planes per category plus one background plane.
pub const BEV_CLASS_PLANES: usize = Category::ALL.len() + 1;
pub const BEV_BACKGROUND_PLANE: usize = Category::ALL.len();
/// Total planes: classes + background + (vx, vy).
pub const BEV_TARGET_PLANES: usize = BEV_CLASS_PLANES + 2;

/// Rasterize detection targets: `[BEV_TARGET_PLANES, h, w]` where a cell is
/// assigned to a category when its cell rectangle intersects the agent's
/// oriented rectangle (later agents overwrite earlier ones on the rare shared
/// boundary cells); velocity planes carry the ego-frame (vx, vy) of moving
/// agents and stay zero elsewhere.
pub fn rasterize_bev_targets(scene: &SceneGraph, range: &BevRange, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[BEV_TARGET_PLANES, h, w]);
    let dx = (range.x_max - range.x_min) / h as f64;
    let dy = (range.y_max - range.y_min) / w as f64;
    let hw = h * w;
    // start all-background
    for c in 0..hw {
        out.data[BEV_BACKGROUND_PLANE * hw + c] = 1.0;
    }
    for agent in &scene.agents {
        let obb = agent.obb();
        let reach = agent.half_len.max(agent.half_wid) + 0.5 * math::hypot(dx, dy);
        let i_lo = (((agent.x - reach) - range.x_min) / dx).max(0.0) as usize;
        let i_hi = ((((agent.x + reach) - range.x_min) / dx).max(0.0) as usize).min(h.saturating_sub(1));
        let j_lo = (((agent.y - reach) - range.y_min) / dy).max(0.0) as usize;
        let j_hi = ((((agent.y + reach) - range.y_min) / dy).max(0.0) as usize).min(w.saturating_sub(1));
        if i_lo >= h || j_lo >= w {
            continue;
        }
        let cat = agent.category.index();
        let (vx, vy) = if agent.is_moving() { (agent.vx(), agent.vy()) } else { (0.0, 0.0) };
        for i in i_lo..=i_hi {
            for j in j_lo..=j_hi {
                let (cx, cy) = range.cell_center(i, j, h, w);
                let cell = Obb::axis_aligned(cx, cy, dx * 0.5, dy * 0.5);
                if obb_intersect(&cell, &obb).is_none() {
                    continue;
                }
                let cell_idx = i * w + j;
                for plane in 0..BEV_CLASS_PLANES {
                    out.data[plane * hw + cell_idx] = 0.0;
                }
                out.data[cat * hw + cell_idx] = 1.0;
                out.data[(BEV_CLASS_PLANES) * hw + cell_idx] = vx;
                out.data[(BEV_CLASS_PLANES + 1) * hw + cell_idx] = vy;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scene generation and dynamics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorldConfig {
    pub agents_min: usize,
    pub agents_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub moving_fraction: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    pub category_weights: [f64; 10],
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            agents_min: 5,
            agents_max: 9,
            radius_min: 6.0,
            radius_max: 16.0,
            moving_fraction: 0.55,
            speed_min: 1.0,
            speed_max: 8.0,
            ego_speed_min: 5.0,
            ego_speed_max: 8.0,
            // mildly flattened so rarer categories still appear often enough
            // for per-category question balancing
            category_weights: [0.16, 0.10, 0.10, 0.10, 0.10, 0.14, 0.08, 0.08, 0.07, 0.07],
        }
    }
}

/// Deterministic scene synthesis. Agents are placed by rejection sampling so
/// that no two oriented rectangles overlap (including the ego's own
/// footprint at the origin).
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> SceneGraph {
    let mut rng = SplitMix64::new(derive_seed(seed, 0x5CE8E));
    let ego_speed = rng.range_f64(cfg.ego_speed_min, cfg.ego_speed_max);
    let n = cfg.agents_min + rng.below(cfg.agents_max - cfg.agents_min + 1);
    let ego_obb = {
        let (hl, hwid, _) = Category::Car.dims();
        Obb::axis_aligned(0.0, 0.0, hl, hwid)
    };
    let mut agents: Vec<Agent> = Vec::with_capacity(n);
    for id in 0..n {
        let cat = Category::from_index(rng.weighted(&cfg.category_weights));
        let (half_len, half_wid, height) = cat.dims();
        let mut placed = None;
        for _try in 0..64 {
            let bearing = rng.range_f64(0.0, 2.0 * math::PI);
            let r = rng.range_f64(cfg.radius_min, cfg.radius_max);
            let (x, y) = (r * math::cos(bearing), r * math::sin(bearing));
            let heading = rng.range_f64(0.0, 2.0 * math::PI);
            let cand = Obb { cx: x, cy: y, half_len, half_wid, heading };
            let clear = obb_intersect(&cand, &ego_obb).is_none()
                && agents.iter().all(|a| obb_intersect(&cand, &a.obb()).is_none());
            if clear {
                placed = Some((x, y, heading));
                break;
            }
        }
        let Some((x, y, heading)) = placed else { continue };
        let speed = if cat.movable() && rng.chance(cfg.moving_fraction) {
            rng.range_f64(cfg.speed_min, cfg.speed_max)
        } else {
            0.0
        };
        agents.push(Agent {
            id: id as u32,
            category: cat,
            x,
            y,
            heading,
            speed,
            half_len,
            half_wid,
            height,
        });
    }
    SceneGraph { scene_id: seed, seed, ego_speed, agents }
}

/// Constant-velocity update of every agent.
pub fn step_dynamics(scene: &mut SceneGraph, dt: f64) {
    for a in &mut scene.agents {
        a.x += a.vx() * dt;
        a.y += a.vy() * dt;
    }
}

// ---------------------------------------------------------------------------
// Expert driver
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Maneuver {
    KeepSpeed,
    Brake,
    ChangeLeft,
    ChangeRight,
}

impl Maneuver {
    /// Answer sentence for behavior questions.
    pub fn behavior_sentence(self) -> &'static str {
        match self {
            Maneuver::KeepSpeed => "The ego car should keep its lane and maintain speed .",
            Maneuver::Brake => "The ego car should brake and keep its lane .",
            Maneuver::ChangeLeft => "The ego car should change to the left lane and slow down .",
            Maneuver::ChangeRight => "The ego car should change to the right lane and slow down .",
        }
    }

    /// Short answer for planning questions.
    pub fn plan_phrase(self) -> &'static str {
        match self {
            Maneuver::KeepSpeed => "keep lane",
            Maneuver::Brake => "brake",
            Maneuver::ChangeLeft => "change left",
            Maneuver::ChangeRight => "change right",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertPlan {
    pub maneuver: Maneuver,
    /// `PLAN_STEPS` ego-frame waypoints at `PLAN_DT` spacing.
    pub waypoints: Vec<(f64, f64)>,
}

const LOOKAHEAD: f64 = 28.0;
const PLAN_HORIZON: f64 = PLAN_STEPS as f64 * PLAN_DT;

/// Is any agent predicted to cross a straight corridor centered at lateral
/// offset `y_off` within the horizon? Returns the closest blocking near-face
/// x (the agent's extent toward the ego, conservatively its larger half
/// dimension).
fn corridor_blocked(scene: &SceneGraph, y_off: f64) -> Option<f64> {
    let corridor = Obb::axis_aligned(LOOKAHEAD * 0.5 + 1.0, y_off, LOOKAHEAD * 0.5, LANE_WIDTH * 0.5);
    let mut nearest: Option<f64> = None;
    let samples = 7; // test at 0.5 s steps across the horizon
    for a in &scene.agents {
        for s in 0..samples {
            let t = s as f64 * PLAN_HORIZON / (samples - 1) as f64;
            let mut fut = a.clone();
            fut.x += fut.vx() * t;
            fut.y += fut.vy() * t;
            if obb_intersect(&fut.obb(), &corridor).is_some() {
                let d = (fut.x - fut.half_len.max(fut.half_wid)).max(0.5);
                nearest = Some(nearest.map_or(d, |n: f64| n.min(d)));
                break;
            }
        }
    }
    nearest
}

/// Distance the expert keeps between its own center and a blocking agent's
/// near face when braking to a stop: the ego footprint is a car
/// (half-length 2.25 m) plus a safety gap.
const STOP_MARGIN: f64 = 2.25 + 2.5;

/// Rule-based expert: keep lane when clear; otherwise change toward a free
/// neighbor lane (right preferred) while slowing, or brake in lane when
/// boxed in. Produces the maneuver and the imitation-target waypoints.
pub fn expert_driver(scene: &SceneGraph) -> ExpertPlan {
    let v = scene.ego_speed;
    let blocked = corridor_blocked(scene, 0.0);
    let (maneuver, lateral, speed_factor, stop_at) = match blocked {
        None => (Maneuver::KeepSpeed, 0.0, 1.0, None),
        Some(hazard_x) => {
            let right_free = corridor_blocked(scene, -LANE_WIDTH).is_none();
            let left_free = corridor_blocked(scene, LANE_WIDTH).is_none();
            if right_free {
                (Maneuver::ChangeRight, -LANE_WIDTH, 0.7, None)
            } else if left_free {
                (Maneuver::ChangeLeft, LANE_WIDTH, 0.7, None)
            } else {
                (Maneuver::Brake, 0.0, 1.0, Some((hazard_x - STOP_MARGIN).max(0.0)))
            }
        }
    };
    let mut waypoints = Vec::with_capacity(PLAN_STEPS);
    for k in 1..=PLAN_STEPS {
        let t = k as f64 * PLAN_DT;
        let x = match stop_at {
            Some(stop) => {
                // constant deceleration to reach `stop` by the horizon
                let decel = 2.0 * (v * PLAN_HORIZON - stop).max(0.0) / (PLAN_HORIZON * PLAN_HORIZON);
                (v * t - 0.5 * decel * t * t).clamp(0.0, stop)
            }
            None => v * speed_factor * t,
        };
        let s = (t / PLAN_HORIZON).clamp(0.0, 1.0);
        let y = lateral * (3.0 * s * s - 2.0 * s * s * s);
        waypoints.push((x, y));
    }
    ExpertPlan { maneuver, waypoints }
}
