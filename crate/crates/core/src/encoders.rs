//! Feature encoders for both scene pathways.
//!
//! A shared two-stage convolution stack turns each rendered camera view
//! into an `enc_channels x feat_h x feat_w` map. The per-view pathway uses
//! those maps directly as tokens. The BEV pathway lifts them onto the
//! top-down raster grid along camera rays (each BEV cell reads a bilinear
//! pair of feature columns from the camera covering its bearing), appends
//! two constant coordinate planes so later convolutions can reason about
//! range, and refines with a 3x3 convolution.
//!
//! Two task heads operate on BEV features: a 1x1-conv detection head
//! (per-cell class logits plus signed velocity) and a pooled waypoint
//! planner used by the closed-loop evaluation.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::ModelSpec;
use crate::optim::{init_normal, param_rng};
use crate::tensor::{BoundParams, LiftCell, ParamSet, PoolMode, Tape, Tensor};
use crate::world::{BEV_CLASS_PLANES, PLAN_STEPS, RASTER_CHANNELS};

/// Which pathway an encoder parameter set serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EncoderKind {
    /// View stack + lift refinement (produces BEV feature maps).
    Bev,
    /// View stack only (produces per-view feature maps).
    Pv,
}

/// Build the ray table mapping every BEV raster cell to a camera and a
/// bilinear pair of feature columns at the cell's bearing.
pub fn build_lift_table(spec: &ModelSpec) -> Vec<LiftCell> {
    let rig = spec.rig();
    let range = spec.bev_range();
    let hw = spec.raster_hw;
    let patch = spec.patch_px() as f64;
    let fw = spec.feat_w();
    let mut cells = Vec::with_capacity(hw * hw);
    for i in 0..hw {
        for j in 0..hw {
            let (x, y) = range.cell_center(i, j, hw, hw);
            let bearing = crate::math::rad_to_deg(crate::math::atan2(y, x));
            // camera whose axis is closest to the bearing always sees it
            let mut view = 0;
            let mut best = f64::INFINITY;
            for (vi, cam) in rig.cameras.iter().enumerate() {
                let off = crate::math::abs(cam.local_deg(bearing));
                if off < best {
                    best = off;
                    view = vi;
                }
            }
            let u = rig.cameras[view].column_of_bearing(bearing, rig.width);
            let cf = (u - 0.5 * patch) / patch;
            let col0 = (cf.max(0.0) as usize).min(fw - 1);
            let col1 = (col0 + 1).min(fw - 1);
            let w1 = (cf - col0 as f64).clamp(0.0, 1.0);
            cells.push(LiftCell { view, col0, col1, w0: 1.0 - w1, w1 });
        }
    }
    cells
}

/// Initialize an encoder parameter set ("enc.*").
pub fn init_encoder(spec: &ModelSpec, kind: EncoderKind, seed: u64) -> ParamSet {
    let c = spec.enc_channels;
    let cin = RASTER_CHANNELS;
    let mut p = ParamSet::new();
    let name = "enc.v1.w";
    p.insert(name, init_normal(&mut param_rng(seed, name), &[c, cin, 3, 3], cin * 9, c));
    p.insert("enc.v1.b", Tensor::zeros(&[1, c]));
    let name = "enc.v2.w";
    p.insert(name, init_normal(&mut param_rng(seed, name), &[c, c, 3, 3], c * 9, c));
    p.insert("enc.v2.b", Tensor::zeros(&[1, c]));
    if kind == EncoderKind::Bev {
        let name = "enc.ref.w";
        p.insert(
            name,
            init_normal(&mut param_rng(seed, name), &[c, c + 2, 3, 3], (c + 2) * 9, c),
        );
        p.insert("enc.ref.b", Tensor::zeros(&[1, c]));
    }
    p
}

/// Run the shared view stack over every rendered view.
pub fn encode_views(tape: &mut Tape, bp: &BoundParams, views: &[Tensor]) -> Vec<Tensor> {
    views
        .iter()
        .map(|v| {
            let c1 = tape.conv2d(v, bp.get("enc.v1.w"), 2, 1, 1);
            let c1b = tape.add_channel_bias(&c1, bp.get("enc.v1.b"));
            let a1 = tape.gelu(&c1b);
            let c2 = tape.conv2d(&a1, bp.get("enc.v2.w"), 2, 1, 1);
            let c2b = tape.add_channel_bias(&c2, bp.get("enc.v2.b"));
            tape.gelu(&c2b)
        })
        .collect()
}

/// Constant normalized (x, y) coordinate planes over the raster grid.
pub fn coord_planes(spec: &ModelSpec) -> Tensor {
    let hw = spec.raster_hw;
    let range = spec.bev_range();
    let mut data = vec![0.0; 2 * hw * hw];
    for i in 0..hw {
        for j in 0..hw {
            let (x, y) = range.cell_center(i, j, hw, hw);
            data[i * hw + j] = x / spec.half_extent_m;
            data[hw * hw + i * hw + j] = y / spec.half_extent_m;
        }
    }
    Tensor::new(&[2, hw, hw], data)
}

/// Full BEV encoder: view stack, ray lift onto the raster grid, coordinate
/// planes, 3x3 refinement. Output is `[enc_channels, raster, raster]`.
pub fn encode_bev(
    tape: &mut Tape,
    bp: &BoundParams,
    spec: &ModelSpec,
    views: &[Tensor],
    lift: &[LiftCell],
) -> Tensor {
    let hw = spec.raster_hw;
    let feats = encode_views(tape, bp, views);
    let lifted = tape.view_lift(&feats, lift, hw, hw);
    let coords = tape.constant(&coord_planes(spec));
    let lf = tape.reshape(&lifted, &[spec.enc_channels, hw * hw]);
    let cf = tape.reshape(&coords, &[2, hw * hw]);
    let cat = tape.concat_rows(&[&lf, &cf]);
    let stacked = tape.reshape(&cat, &[spec.enc_channels + 2, hw, hw]);
    let r = tape.conv2d(&stacked, bp.get("enc.ref.w"), 1, 1, 1);
    let rb = tape.add_channel_bias(&r, bp.get("enc.ref.b"));
    tape.gelu(&rb)
}

// ---------------------------------------------------------------------------
// Detection head
// ---------------------------------------------------------------------------

/// Hidden width of the detection head.
pub const DET_HIDDEN: usize = 24;
/// Output planes: one logit per class (incl. background) plus (vx, vy).
pub const DET_PLANES: usize = BEV_CLASS_PLANES + 2;

pub fn init_det_head(spec: &ModelSpec, seed: u64) -> ParamSet {
    let c = spec.enc_channels;
    let mut p = ParamSet::new();
    let name = "det.h1.w";
    p.insert(name, init_normal(&mut param_rng(seed, name), &[DET_HIDDEN, c, 1, 1], c, DET_HIDDEN));
    p.insert("det.h1.b", Tensor::zeros(&[1, DET_HIDDEN]));
    let name = "det.h2.w";
    p.insert(
        name,
        init_normal(&mut param_rng(seed, name), &[DET_PLANES, DET_HIDDEN, 1, 1], DET_HIDDEN, DET_PLANES),
    );
    p.insert("det.h2.b", Tensor::zeros(&[1, DET_PLANES]));
    p
}

/// Per-cell class logits and velocity predictions `[DET_PLANES, h, w]`.
pub fn det_forward(tape: &mut Tape, bp: &BoundParams, feats: &Tensor) -> Tensor {
    let h1 = tape.conv2d(feats, bp.get("det.h1.w"), 1, 0, 1);
    let h1b = tape.add_channel_bias(&h1, bp.get("det.h1.b"));
    let a = tape.gelu(&h1b);
    let h2 = tape.conv2d(&a, bp.get("det.h2.w"), 1, 0, 1);
    tape.add_channel_bias(&h2, bp.get("det.h2.b"))
}

/// Losses of the detection head; `total` is exactly `ce + vel`.
pub struct DetLoss {
    pub total: Tensor,
    pub ce: Tensor,
    pub vel: Tensor,
}

/// Cross-entropy over per-cell classes plus mean squared velocity error on
/// cells whose target velocity is nonzero. `target` comes from
/// [`crate::world::rasterize_bev_targets`].
pub fn detection_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> DetLoss {
    let (planes, h, w) = pred.dim3();
    assert_eq!(planes, DET_PLANES);
    assert_eq!(target.shape, pred.shape);
    let cells = h * w;
    let nc = BEV_CLASS_PLANES;

    // per-cell class index from the one-hot target planes
    let mut classes = vec![0usize; cells];
    for cell in 0..cells {
        for k in 0..nc {
            if target.data[k * cells + cell] == 1.0 {
                classes[cell] = k;
                break;
            }
        }
    }
    // velocity mask: cells with a nonzero target velocity vector
    let mut vmask = vec![0.0; cells];
    let mut moving = 0usize;
    for cell in 0..cells {
        let vx = target.data[nc * cells + cell];
        let vy = target.data[(nc + 1) * cells + cell];
        if vx != 0.0 || vy != 0.0 {
            vmask[cell] = 1.0;
            moving += 1;
        }
    }

    let flat = tape.reshape(pred, &[planes, cells]);
    let class_logits = tape.slice_rows(&flat, 0, nc);
    let per_cell = tape.transpose2d(&class_logits);
    let ce = tape.softmax_cross_entropy(&per_cell, &classes, &vec![1.0; cells]);

    let pred_vel = tape.slice_rows(&flat, nc, 2);
    let mut tdata = vec![0.0; 2 * cells];
    tdata[..cells].copy_from_slice(&target.data[nc * cells..(nc + 1) * cells]);
    tdata[cells..].copy_from_slice(&target.data[(nc + 1) * cells..(nc + 2) * cells]);
    let tvel = tape.constant(&Tensor::new(&[2, cells], tdata));
    let mut mdata = vec![0.0; 2 * cells];
    mdata[..cells].copy_from_slice(&vmask);
    mdata[cells..].copy_from_slice(&vmask);
    let mask = tape.constant(&Tensor::new(&[2, cells], mdata));
    let diff = tape.sub(&pred_vel, &tvel);
    let sq = tape.mul(&diff, &diff);
    let masked = tape.mul(&sq, &mask);
    let s = tape.sum(&masked);
    let vel = tape.scale(&s, 1.0 / (2 * moving.max(1)) as f64);

    let total = tape.add(&ce, &vel);
    DetLoss { total, ce, vel }
}

// ---------------------------------------------------------------------------
// Waypoint planner head
// ---------------------------------------------------------------------------

/// Hidden width of the planner head.
pub const PLAN_HIDDEN: usize = 32;
/// Average-pool window before the planner MLP: a coarse spatial grid
/// (48 -> 6 per side) keeps enough layout information to distinguish
/// scenes, which a single global average would wash out.
pub const PLAN_POOL: usize = 8;

fn plan_in(spec: &ModelSpec) -> usize {
    let side = spec.raster_hw / PLAN_POOL;
    spec.enc_channels * side * side
}

pub fn init_planner(spec: &ModelSpec, seed: u64) -> ParamSet {
    let d_in = plan_in(spec);
    let out = 2 * PLAN_STEPS;
    let mut p = ParamSet::new();
    let name = "plan.w1";
    p.insert(name, init_normal(&mut param_rng(seed, name), &[d_in, PLAN_HIDDEN], d_in, PLAN_HIDDEN));
    p.insert("plan.b1", Tensor::zeros(&[1, PLAN_HIDDEN]));
    let name = "plan.w2";
    p.insert(name, init_normal(&mut param_rng(seed, name), &[PLAN_HIDDEN, out], PLAN_HIDDEN, out));
    p.insert("plan.b2", Tensor::zeros(&[1, out]));
    p
}

/// Pool BEV features to a coarse grid and regress `PLAN_STEPS` (x, y)
/// waypoints, flattened as `[1, 2 * PLAN_STEPS]` in step order.
pub fn plan_forward(tape: &mut Tape, bp: &BoundParams, feats: &Tensor) -> Tensor {
    let (c, h, _w) = feats.dim3();
    let side = h / PLAN_POOL;
    let pooled = tape.pool2d(feats, PLAN_POOL, PoolMode::Avg);
    let g = tape.reshape(&pooled, &[1, c * side * side]);
    let h1 = tape.matmul(&g, bp.get("plan.w1"));
    let h1b = tape.add_row_vector(&h1, bp.get("plan.b1"));
    let a = tape.gelu(&h1b);
    let h2 = tape.matmul(&a, bp.get("plan.w2"));
    tape.add_row_vector(&h2, bp.get("plan.b2"))
}

/// Mean squared error against expert waypoints.
pub fn planning_loss(tape: &mut Tape, pred: &Tensor, expert: &[(f64, f64)]) -> Tensor {
    assert_eq!(pred.shape, vec![1, 2 * expert.len()]);
    let mut flat = Vec::with_capacity(2 * expert.len());
    for &(x, y) in expert {
        flat.push(x);
        flat.push(y);
    }
    let t = tape.constant(&Tensor::new(&[1, flat.len()], flat));
    let diff = tape.sub(pred, &t);
    let sq = tape.mul(&diff, &diff);
    tape.mean(&sq)
}

/// Decode a planner output row into waypoints.
pub fn waypoints_of(pred: &Tensor) -> Vec<(f64, f64)> {
    assert_eq!(pred.shape[0], 1);
    pred.data.chunks(2).map(|c| (c[0], c[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamW, AdamWConfig};
    use crate::rng::derive_seed;
    use crate::tensor::collect_grads;
    use crate::world::{
        expert_driver, generate_scene, rasterize_bev_targets, render_views, SceneGraph,
        WorldConfig,
    };

    fn spec() -> ModelSpec {
        ModelSpec::default()
    }

    #[test]
    fn lift_table_reconstructs_cell_bearings() {
        let s = spec();
        let rig = s.rig();
        let table = build_lift_table(&s);
        let range = s.bev_range();
        let hw = s.raster_hw;
        let patch = s.patch_px() as f64;
        let mut tested = 0;
        for i in 0..hw {
            for j in 0..hw {
                let cell = &table[i * hw + j];
                let (x, y) = range.cell_center(i, j, hw, hw);
                let bearing = crate::math::rad_to_deg(crate::math::atan2(y, x));
                let cam = &rig.cameras[cell.view];
                assert!(cam.sees(bearing), "cell ({i},{j}) assigned a blind camera");
                // interpolated column must invert back to the bearing
                // (skip cells clamped at the view edge)
                let cf = cell.col0 as f64 * cell.w0 + cell.col1 as f64 * cell.w1;
                let u = cf * patch + 0.5 * patch;
                if cell.col0 == cell.col1 || cell.w1 == 0.0 && cell.col0 == 0 {
                    continue;
                }
                let back = cam.bearing_of_column(u, rig.width);
                assert!(
                    crate::sector::ang_dist_deg(back, bearing) < 3.0,
                    "cell ({i},{j}): bearing {bearing:.2} reconstructed {back:.2}"
                );
                tested += 1;
            }
        }
        assert!(tested as f64 > 0.9 * (hw * hw) as f64, "only {tested} cells tested");
    }

    #[test]
    fn straight_ahead_cell_uses_front_camera_center() {
        let s = spec();
        let table = build_lift_table(&s);
        let hw = s.raster_hw;
        // cell just ahead of the ego on the +x axis: i = hw/2, j near center
        let cell = &table[(hw - 4) * hw + hw / 2];
        assert_eq!(cell.view, 0, "forward cell must use the FRONT camera");
        let cf = cell.col0 as f64 * cell.w0 + cell.col1 as f64 * cell.w1;
        let center = (s.feat_w() as f64 - 1.0) / 2.0;
        assert!(
            (cf - center).abs() < 0.6,
            "forward cell reads column {cf:.2}, expected near {center}"
        );
    }

    #[test]
    fn zero_views_give_spatially_constant_features() {
        let s = spec();
        let params = init_encoder(&s, EncoderKind::Pv, 5);
        let mut tape = Tape::new();
        let bp = tape.bind(&params, false);
        let zero = Tensor::zeros(&[RASTER_CHANNELS, s.view_h, s.view_w]);
        let views: Vec<Tensor> = (0..6).map(|_| tape.constant(&zero)).collect();
        let feats = encode_views(&mut tape, &bp, &views);
        assert_eq!(feats.len(), 6);
        for f in &feats {
            assert_eq!(f.shape, vec![s.enc_channels, s.feat_h(), s.feat_w()]);
            // bias-only output: every spatial position in a channel equal
            let hw = s.feat_h() * s.feat_w();
            for ch in 0..s.enc_channels {
                let v0 = f.data[ch * hw];
                assert!(f.data[ch * hw..(ch + 1) * hw].iter().all(|&v| v == v0));
            }
        }
    }

    #[test]
    fn coordinate_planes_match_cell_centers() {
        let s = spec();
        let planes = coord_planes(&s);
        let hw = s.raster_hw;
        // corner cells
        let (x0, y0) = s.bev_range().cell_center(0, 0, hw, hw);
        assert!((planes.data[0] - x0 / s.half_extent_m).abs() < 1e-12);
        assert!((planes.data[hw * hw] - y0 / s.half_extent_m).abs() < 1e-12);
        // x varies along i, y along j
        assert!(planes.data[(hw - 1) * hw] > planes.data[0]);
        assert!(planes.data[hw * hw + hw - 1] > planes.data[hw * hw]);
    }

    #[test]
    fn detection_loss_components_sum_exactly() {
        let s = spec();
        let wcfg = WorldConfig::default();
        let scene = generate_scene(derive_seed(8, 1), &wcfg);
        let target = rasterize_bev_targets(&scene, &s.bev_range(), s.raster_hw, s.raster_hw);
        let enc = init_encoder(&s, EncoderKind::Bev, 2);
        let det = init_det_head(&s, 3);
        let lift = build_lift_table(&s);
        let mut tape = Tape::new();
        let be = tape.bind(&enc, true);
        let bd = tape.bind(&det, true);
        let views: Vec<Tensor> =
            render_views(&scene, &s.rig()).into_iter().map(|v| tape.constant(&v)).collect();
        let feats = encode_bev(&mut tape, &be, &s, &views, &lift);
        let pred = det_forward(&mut tape, &bd, &feats);
        let loss = detection_loss(&mut tape, &pred, &target);
        assert_eq!(loss.total.item(), loss.ce.item() + loss.vel.item());
        assert!(loss.total.item().is_finite());
        // gradient reaches both heads and the whole encoder
        let grads = tape.backward(&loss.total);
        for (name, g) in collect_grads(&grads, &be).iter().chain(collect_grads(&grads, &bd).iter())
        {
            assert!(g.iter().any(|&x| x != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn detection_overfits_two_scenes() {
        let s = spec();
        let wcfg = WorldConfig::default();
        let scenes: Vec<SceneGraph> =
            (0..2).map(|k| generate_scene(derive_seed(400, k), &wcfg)).collect();
        let rig = s.rig();
        let lift = build_lift_table(&s);
        let rendered: Vec<Vec<Tensor>> = scenes.iter().map(|sc| render_views(sc, &rig)).collect();
        let targets: Vec<Tensor> = scenes
            .iter()
            .map(|sc| rasterize_bev_targets(sc, &s.bev_range(), s.raster_hw, s.raster_hw))
            .collect();
        let mut enc = init_encoder(&s, EncoderKind::Bev, 11);
        let mut det = init_det_head(&s, 12);
        let mut opt_e = AdamW::new(AdamWConfig { lr: 3e-3, ..AdamWConfig::default() });
        let mut opt_d = AdamW::new(AdamWConfig { lr: 3e-3, ..AdamWConfig::default() });
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..30 {
            let mut total = 0.0;
            for k in 0..scenes.len() {
                let mut tape = Tape::new();
                let be = tape.bind(&enc, true);
                let bd = tape.bind(&det, true);
                let views: Vec<Tensor> =
                    rendered[k].iter().map(|v| tape.constant(v)).collect();
                let feats = encode_bev(&mut tape, &be, &s, &views, &lift);
                let pred = det_forward(&mut tape, &bd, &feats);
                let loss = detection_loss(&mut tape, &pred, &targets[k]);
                total += loss.total.item();
                let grads = tape.backward(&loss.total);
                opt_e.step(&mut enc, &collect_grads(&grads, &be));
                opt_d.step(&mut det, &collect_grads(&grads, &bd));
            }
            if step == 0 {
                first = total;
            }
            last = total;
        }
        assert!(
            last < 0.4 * first,
            "detection failed to overfit: {first:.4} -> {last:.4}"
        );
    }

    #[test]
    fn planner_overfits_one_scene() {
        let s = spec();
        let wcfg = WorldConfig::default();
        let scene = generate_scene(derive_seed(41, 0), &wcfg);
        let expert = expert_driver(&scene);
        let lift = build_lift_table(&s);
        let enc = init_encoder(&s, EncoderKind::Bev, 21);
        let mut plan = init_planner(&s, 22);
        let rig = s.rig();
        let rendered = render_views(&scene, &rig);
        // freeze the encoder; train only the planner head
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..60 {
            let mut tape = Tape::new();
            let be = tape.bind(&enc, false);
            let bpl = tape.bind(&plan, true);
            let views: Vec<Tensor> = rendered.iter().map(|v| tape.constant(v)).collect();
            let feats = encode_bev(&mut tape, &be, &s, &views, &lift);
            let pred = plan_forward(&mut tape, &bpl, &feats);
            let loss = planning_loss(&mut tape, &pred, &expert.waypoints);
            if step == 0 {
                first = loss.item();
            }
            last = loss.item();
            let grads = tape.backward(&loss);
            opt.step(&mut plan, &collect_grads(&grads, &bpl));
        }
        assert!(last < 0.05 * first, "planner failed to fit: {first:.5} -> {last:.5}");
        // decoded waypoints have the right arity
        let mut tape = Tape::new();
        let be = tape.bind(&enc, false);
        let bpl = tape.bind(&plan, false);
        let views: Vec<Tensor> = rendered.iter().map(|v| tape.constant(v)).collect();
        let feats = encode_bev(&mut tape, &be, &s, &views, &lift);
        let pred = plan_forward(&mut tape, &bpl, &feats);
        assert_eq!(waypoints_of(&pred).len(), PLAN_STEPS);
    }

    #[test]
    fn encoder_init_is_deterministic() {
        let s = spec();
        let a = init_encoder(&s, EncoderKind::Bev, 77);
        let b = init_encoder(&s, EncoderKind::Bev, 77);
        assert_eq!(a.digest(), b.digest());
        let c = init_encoder(&s, EncoderKind::Bev, 78);
        assert_ne!(a.digest(), c.digest());
        // the PV variant omits the refinement parameters
        let pv = init_encoder(&s, EncoderKind::Pv, 77);
        assert!(!pv.contains("enc.ref.w"));
        assert!(a.contains("enc.ref.w"));
    }
}
