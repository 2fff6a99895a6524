//! Training stages that connect the world, the encoders, and the frozen
//! teacher:
//!
//! * Stage 0 — detection pretraining of the BEV encoder (the baseline
//!   every comparison starts from).
//! * Stage A — projector-and-delimiter alignment: the frozen teacher
//!   scores answers conditioned on projected visual tokens, and only the
//!   projector (plus the two dialect delimiters) learns.
//! * Stage B — semantic distillation: the answer likelihood gradient is
//!   allowed into the encoder, jointly with the detection loss at equal
//!   weight.
//! * Stage C — task heads (detection + planner) trained on a frozen
//!   encoder, used to compare baseline and distilled features.
//!
//! Every stage runs digest checks on its frozen inputs and emits a
//! [`RunRecord`] whose per-step loss components always sum to the recorded
//! total.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::{
    build_lift_table, det_forward, detection_loss, encode_bev, encode_views, plan_forward,
    planning_loss, waypoints_of, EncoderKind,
};
use crate::lm::{
    embed_prefix_continuous, embed_suffix, prefix_forward, suffix_logits, suffix_targets, Dialect,
    LmConfig, Teacher, TeacherHandles, TeacherInfer, Vocab,
};
use crate::model::ModelSpec;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::oracles::ExistenceScore;
use crate::projector::{project_bev, project_pv, ProjectorConfig, Reduce};
use crate::qa::{generate_corpus, QaGenConfig, QaKind, QaSample};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{collect_grads, BoundParams, LiftCell, ParamSet, Tape, Tensor};
use crate::world::{
    expert_driver, generate_scene, rasterize_bev_targets, render_views, SceneGraph, WorldConfig,
};

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// One optimizer step: the learning rate used, the loss components in
/// `RunRecord::part_names` order (already weighted), and their total.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub parts: Vec<f64>,
    pub total: f64,
}

/// Manifest of one training run: enough to audit it (seeds, digests,
/// every step's losses) and to reproduce it bit-for-bit.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub seed: u64,
    pub part_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn new(stage: &str, seed: u64, part_names: &[&str]) -> RunRecord {
        RunRecord {
            stage: String::from(stage),
            seed,
            part_names: part_names.iter().map(|s| String::from(*s)).collect(),
            steps: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, lr: f64, parts: Vec<f64>, total: f64) {
        self.steps.push(StepRecord { step: self.steps.len(), lr, parts, total });
    }

    pub fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    pub fn final_total(&self) -> f64 {
        self.steps.last().map(|s| s.total).unwrap_or(0.0)
    }

    /// Mean total over the last `n` steps (loss-curve summaries).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.steps.len()).max(1);
        let s: f64 = self.steps[self.steps.len() - k..].iter().map(|s| s.total).sum();
        s / k as f64
    }

    pub fn head_mean(&self, n: usize) -> f64 {
        let k = n.min(self.steps.len()).max(1);
        let s: f64 = self.steps[..k].iter().map(|s| s.total).sum();
        s / k as f64
    }

    /// Every step's components must sum to its total (left-to-right float
    /// addition, tolerance `tol`).
    pub fn verify_sums(&self, tol: f64) -> bool {
        self.steps.iter().all(|s| {
            let mut acc = 0.0;
            for &p in &s.parts {
                acc += p;
            }
            (acc - s.total).abs() <= tol * (1.0 + s.total.abs())
        })
    }
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// Everything one scene contributes to training: rendered camera views,
/// the rasterized detection target, the expert plan, and tokenized QA.
pub struct TrainScene {
    pub scene: SceneGraph,
    pub views: Vec<Tensor>,
    pub raster: Tensor,
    pub expert: Vec<(f64, f64)>,
    /// `(question ids, answer ids)` pairs for the teacher-scored loss.
    pub suffixes: Vec<(Vec<u32>, Vec<u32>)>,
}

/// Deterministic dataset over world seeds `first .. first+count`
/// (derived from `seed`), with per-scene QA when `qa_per_scene > 0`.
pub fn build_train_scenes(
    spec: &ModelSpec,
    wcfg: &WorldConfig,
    qcfg: &QaGenConfig,
    vocab: &Vocab,
    seed: u64,
    first: u64,
    count: u64,
) -> Vec<TrainScene> {
    let rig = spec.rig();
    let range = spec.bev_range();
    let hw = spec.raster_hw;
    (0..count)
        .map(|i| {
            let scene = generate_scene(derive_seed(seed, 0x5C00 + first + i), wcfg);
            let corpus = generate_corpus(
                core::slice::from_ref(&scene),
                qcfg,
                derive_seed(seed, 0xA500 + first + i),
            );
            let suffixes = corpus
                .iter()
                .map(|q| (vocab.encode(&q.question), vocab.encode(&q.answer)))
                .collect();
            TrainScene {
                views: render_views(&scene, &rig),
                raster: rasterize_bev_targets(&scene, &range, hw, hw),
                expert: expert_driver(&scene).waypoints,
                suffixes,
                scene,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pathways and cached features
// ---------------------------------------------------------------------------

/// A full visual pathway: which encoder, which token dialect, and which
/// projector downsampling variant.
#[derive(Clone, Copy, Debug)]
pub struct PathwaySpec {
    pub kind: EncoderKind,
    pub reduce: Reduce,
}

impl PathwaySpec {
    pub fn bev(reduce: Reduce) -> PathwaySpec {
        PathwaySpec { kind: EncoderKind::Bev, reduce }
    }

    /// The per-view pathway applies no spatial reduction; the config is
    /// pooling-shaped so it owns zero reduction parameters.
    pub fn pv() -> PathwaySpec {
        PathwaySpec { kind: EncoderKind::Pv, reduce: Reduce::AvgPool }
    }

    pub fn dialect(&self) -> Dialect {
        match self.kind {
            EncoderKind::Bev => Dialect::Bev,
            EncoderKind::Pv => Dialect::Pv,
        }
    }

    pub fn projector_config(&self, spec: &ModelSpec, out_dim: usize) -> ProjectorConfig {
        ProjectorConfig::for_spec(spec, self.reduce, out_dim)
    }
}

/// Frozen-encoder features cached once per scene.
pub enum PathFeats {
    /// Fused top-down feature grid `[c, raster, raster]`.
    Bev(Tensor),
    /// Per-view feature maps, rig order.
    Pv(Vec<Tensor>),
}

/// Run the (frozen) encoder once, off any gradient tape.
pub fn cache_feats(
    spec: &ModelSpec,
    enc: &ParamSet,
    kind: EncoderKind,
    lift: &[LiftCell],
    views: &[Tensor],
) -> PathFeats {
    let mut tape = Tape::new();
    let bp = tape.bind(enc, false);
    let vconst: Vec<Tensor> = views.iter().map(|v| tape.constant(v)).collect();
    match kind {
        EncoderKind::Bev => {
            let f = encode_bev(&mut tape, &bp, spec, &vconst, lift);
            PathFeats::Bev(Tensor::new(&f.shape, f.data))
        }
        EncoderKind::Pv => {
            let fs = encode_views(&mut tape, &bp, &vconst);
            PathFeats::Pv(fs.iter().map(|f| Tensor::new(&f.shape, f.data.clone())).collect())
        }
    }
}

/// Taped projection of cached features into teacher-width tokens.
fn project_cached(
    tape: &mut Tape,
    bp_proj: &BoundParams,
    pcfg: &ProjectorConfig,
    feats: &PathFeats,
) -> Tensor {
    match feats {
        PathFeats::Bev(f) => {
            let c = tape.constant(f);
            project_bev(tape, bp_proj, pcfg, &c)
        }
        PathFeats::Pv(fs) => {
            let cs: Vec<Tensor> = fs.iter().map(|f| tape.constant(f)).collect();
            project_pv(tape, bp_proj, pcfg, &cs)
        }
    }
}

/// Mean answer cross-entropy of one scene's suffixes given a continuous
/// token prefix (the alignment / distillation objective).
fn tokens_nll(
    tape: &mut Tape,
    th: &TeacherHandles,
    cfg: &LmConfig,
    tokens: &Tensor,
    dialect: Dialect,
    suffixes: &[(Vec<u32>, Vec<u32>)],
) -> Tensor {
    let prefix = embed_prefix_continuous(tape, th, cfg, tokens, dialect);
    let kv = prefix_forward(tape, th, cfg, &prefix);
    let mut total: Option<Tensor> = None;
    for (q, a) in suffixes {
        let emb = embed_suffix(tape, th, cfg, dialect, kv.len, q, a);
        let logits = suffix_logits(tape, th, cfg, &kv, &emb);
        let (targets, mask) = suffix_targets(q, a);
        let ce = tape.softmax_cross_entropy(&logits, &targets, &mask);
        total = Some(match total {
            Some(acc) => tape.add(&acc, &ce),
            None => ce,
        });
    }
    let total = total.expect("scene has at least one suffix");
    tape.scale(&total, 1.0 / suffixes.len() as f64)
}

/// End-to-end token rows for one scene (encoder + projector, no tape
/// bookkeeping kept): flattened `[tokens * dim]`, ready for the
/// incremental decoder.
pub fn scene_token_rows(
    spec: &ModelSpec,
    enc: &ParamSet,
    proj: &ParamSet,
    path: &PathwaySpec,
    pcfg: &ProjectorConfig,
    lift: &[LiftCell],
    views: &[Tensor],
) -> Vec<f64> {
    let feats = cache_feats(spec, enc, path.kind, lift, views);
    let mut tape = Tape::new();
    let bp = tape.bind(proj, false);
    let tokens = project_cached(&mut tape, &bp, pcfg, &feats);
    tokens.data
}

// ---------------------------------------------------------------------------
// Stage 0: detection pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct DetPretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DetPretrainConfig {
    fn default() -> Self {
        DetPretrainConfig { epochs: 3, lr: 3e-3, seed: 0xD0 }
    }
}

/// Train the BEV encoder and detection head from scratch on the
/// rasterized detection target. Returns `(encoder, det head, manifest)`.
pub fn pretrain_det(
    spec: &ModelSpec,
    data: &[TrainScene],
    cfg: &DetPretrainConfig,
) -> (ParamSet, ParamSet, RunRecord) {
    let lift = build_lift_table(spec);
    let mut enc = crate::encoders::init_encoder(spec, EncoderKind::Bev, derive_seed(cfg.seed, 1));
    let mut det = crate::encoders::init_det_head(spec, derive_seed(cfg.seed, 2));
    let mut rec = RunRecord::new("pretrain-det", cfg.seed, &["class-ce", "velocity"]);

    let total = (data.len() * cfg.epochs) as u64;
    let mut opt_e = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut opt_d = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = SplitMix64::new(derive_seed(cfg.seed, 0x0D0));
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for &si in &order {
            let ts = &data[si];
            let mut tape = Tape::new();
            let bp_e = tape.bind(&enc, true);
            let bp_d = tape.bind(&det, true);
            let views: Vec<Tensor> = ts.views.iter().map(|v| tape.constant(v)).collect();
            let feats = encode_bev(&mut tape, &bp_e, spec, &views, &lift);
            let pred = det_forward(&mut tape, &bp_d, &feats);
            let target = tape.constant(&ts.raster);
            let dl = detection_loss(&mut tape, &pred, &target);
            let grads = tape.backward(&dl.total);
            let lr = cosine_lr(cfg.lr, cfg.lr * 0.1, step, total);
            opt_e.step_with_lr(&mut enc, &collect_grads(&grads, &bp_e), |_| lr);
            opt_d.step_with_lr(&mut det, &collect_grads(&grads, &bp_d), |_| lr);
            rec.push(lr, vec![dl.ce.item(), dl.vel.item()], dl.total.item());
            step += 1;
        }
    }
    (enc, det, rec)
}

/// Fraction of foreground target cells (non-background true class) whose
/// predicted class matches. The regression metric for distillation.
pub fn detection_cell_accuracy(
    spec: &ModelSpec,
    enc: &ParamSet,
    det: &ParamSet,
    data: &[TrainScene],
) -> f64 {
    use crate::world::BEV_CLASS_PLANES;
    let lift = build_lift_table(spec);
    let hw = spec.raster_hw * spec.raster_hw;
    let background = BEV_CLASS_PLANES - 1;
    let mut hits = 0usize;
    let mut total = 0usize;
    for ts in data {
        let mut tape = Tape::new();
        let bp_e = tape.bind(enc, false);
        let bp_d = tape.bind(det, false);
        let views: Vec<Tensor> = ts.views.iter().map(|v| tape.constant(v)).collect();
        let feats = encode_bev(&mut tape, &bp_e, spec, &views, &lift);
        let pred = det_forward(&mut tape, &bp_d, &feats);
        for cell in 0..hw {
            let mut t_best = 0;
            let mut p_best = 0;
            for p in 1..BEV_CLASS_PLANES {
                if ts.raster.data[p * hw + cell] > ts.raster.data[t_best * hw + cell] {
                    t_best = p;
                }
                if pred.data[p * hw + cell] > pred.data[p_best * hw + cell] {
                    p_best = p;
                }
            }
            if t_best == background {
                continue;
            }
            total += 1;
            if p_best == t_best {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// Stage A: projector alignment
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AlignConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { epochs: 4, lr: 1e-3, seed: 0xA11 }
    }
}

/// Outcome of an alignment run: the trained projector, the updated
/// delimiter embeddings, and the manifest.
pub struct Aligned {
    pub proj: ParamSet,
    pub delim: ParamSet,
    pub record: RunRecord,
}

/// Stage A: minimize answer cross-entropy over projected tokens. The
/// encoder and the teacher are frozen (digest-enforced); only the
/// projector and the two delimiter embeddings of the pathway's dialect
/// train. Cosine learning-rate decay to a tenth of the base rate.
pub fn train_alignment(
    spec: &ModelSpec,
    teacher: &Teacher,
    enc: &ParamSet,
    path: &PathwaySpec,
    data: &[TrainScene],
    cfg: &AlignConfig,
) -> Aligned {
    let lift = build_lift_table(spec);
    let lm_cfg = &teacher.cfg;
    let teacher_digest = teacher.params.digest();
    let enc_digest = enc.digest();
    let pcfg = path.projector_config(spec, lm_cfg.dim);
    let mut proj = crate::projector::init_projector(&pcfg, derive_seed(cfg.seed, 3));
    let mut delim = teacher.delim.clone();
    let dialect = path.dialect();

    let feats: Vec<PathFeats> =
        data.iter().map(|ts| cache_feats(spec, enc, path.kind, &lift, &ts.views)).collect();

    let mut rec = RunRecord::new("train-align", cfg.seed, &["answer-nll"]);
    rec.note(format!("dialect {:?}, reduce {}", dialect, path.reduce.name()));
    rec.note(format!("teacher digest {:016x}", teacher_digest.0));
    rec.note(format!("encoder digest {:016x}", enc_digest.0));

    let total = (data.len() * cfg.epochs) as u64;
    let mut opt_p = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut opt_d = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = SplitMix64::new(derive_seed(cfg.seed, 0x0D0));
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for &si in &order {
            if data[si].suffixes.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let (th, _bt, bd) =
                crate::lm::bind_teacher(&mut tape, lm_cfg, &teacher.params, &delim, false, true);
            let bp_p = tape.bind(&proj, true);
            let tokens = project_cached(&mut tape, &bp_p, &pcfg, &feats[si]);
            let loss = tokens_nll(&mut tape, &th, lm_cfg, &tokens, dialect, &data[si].suffixes);
            let grads = tape.backward(&loss);
            let lr = cosine_lr(cfg.lr, cfg.lr * 0.1, step, total);
            opt_p.step_with_lr(&mut proj, &collect_grads(&grads, &bp_p), |_| lr);
            opt_d.step_with_lr(&mut delim, &collect_grads(&grads, &bd), |_| lr);
            rec.push(lr, vec![loss.item()], loss.item());
            step += 1;
        }
    }

    assert_eq!(teacher.params.digest(), teacher_digest, "teacher changed during alignment");
    assert_eq!(enc.digest(), enc_digest, "encoder changed during alignment");
    Aligned { proj, delim, record: rec }
}

// ---------------------------------------------------------------------------
// Stage B: semantic distillation into the encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    /// Encoder fine-tune rate (kept well below the projector's, mirroring
    /// the two-rate fine-tuning convention).
    pub lr_enc: f64,
    pub lr_proj: f64,
    pub lr_det: f64,
    /// Weight on the answer-likelihood term; detection weight is fixed at
    /// 1. Zero skips the semantic branch entirely, making each step
    /// bit-identical to pure detection training.
    pub w_distill: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 1,
            lr_enc: 1e-4,
            lr_proj: 1e-3,
            lr_det: 1e-3,
            w_distill: 1.0,
            seed: 0xD157,
        }
    }
}

/// Outcome of Stage B.
pub struct Distilled {
    pub enc: ParamSet,
    pub proj: ParamSet,
    pub det: ParamSet,
    pub record: RunRecord,
}

/// Stage B: joint loss `detection + w * answer-nll`, with the semantic
/// gradient flowing through the projector *into the encoder*. The teacher
/// and the delimiters stay frozen (digest-enforced).
pub fn train_distillation(
    spec: &ModelSpec,
    teacher: &Teacher,
    delim: &ParamSet,
    enc0: &ParamSet,
    proj0: &ParamSet,
    det0: &ParamSet,
    path: &PathwaySpec,
    data: &[TrainScene],
    cfg: &DistillConfig,
) -> Distilled {
    assert_eq!(path.kind, EncoderKind::Bev, "distillation targets the fused pathway");
    let lift = build_lift_table(spec);
    let lm_cfg = &teacher.cfg;
    let teacher_digest = teacher.params.digest();
    let delim_digest = delim.digest();
    let pcfg = path.projector_config(spec, lm_cfg.dim);
    let dialect = path.dialect();
    let mut enc = enc0.clone();
    let mut proj = proj0.clone();
    let mut det = det0.clone();

    let mut rec = RunRecord::new("distill", cfg.seed, &["class-ce", "velocity", "answer-nll"]);
    rec.note(format!("w_distill {}", cfg.w_distill));
    rec.note(format!("teacher digest {:016x}", teacher_digest.0));

    let mut opt_e = AdamW::new(AdamWConfig { lr: cfg.lr_enc, ..AdamWConfig::default() });
    let mut opt_d = AdamW::new(AdamWConfig { lr: cfg.lr_det, ..AdamWConfig::default() });
    let mut opt_p = AdamW::new(AdamWConfig { lr: cfg.lr_proj, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = SplitMix64::new(derive_seed(cfg.seed, 0x0D0));
    for _epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for &si in &order {
            let ts = &data[si];
            let mut tape = Tape::new();
            let bp_e = tape.bind(&enc, true);
            let bp_d = tape.bind(&det, true);
            let views: Vec<Tensor> = ts.views.iter().map(|v| tape.constant(v)).collect();
            let feats = encode_bev(&mut tape, &bp_e, spec, &views, &lift);
            let pred = det_forward(&mut tape, &bp_d, &feats);
            let target = tape.constant(&ts.raster);
            let dl = detection_loss(&mut tape, &pred, &target);

            if cfg.w_distill != 0.0 && !ts.suffixes.is_empty() {
                let (th, _bt, _bd) = crate::lm::bind_teacher(
                    &mut tape,
                    lm_cfg,
                    &teacher.params,
                    delim,
                    false,
                    false,
                );
                let bp_p = tape.bind(&proj, true);
                let tokens = project_bev(&mut tape, &bp_p, &pcfg, &feats);
                let nll = tokens_nll(&mut tape, &th, lm_cfg, &tokens, dialect, &ts.suffixes);
                let scaled = tape.scale(&nll, cfg.w_distill);
                let total = tape.add(&dl.total, &scaled);
                let grads = tape.backward(&total);
                opt_e.step_with_lr(&mut enc, &collect_grads(&grads, &bp_e), |_| cfg.lr_enc);
                opt_d.step_with_lr(&mut det, &collect_grads(&grads, &bp_d), |_| cfg.lr_det);
                opt_p.step_with_lr(&mut proj, &collect_grads(&grads, &bp_p), |_| cfg.lr_proj);
                rec.push(
                    cfg.lr_enc,
                    vec![dl.ce.item(), dl.vel.item(), scaled.item()],
                    total.item(),
                );
            } else {
                let grads = tape.backward(&dl.total);
                opt_e.step_with_lr(&mut enc, &collect_grads(&grads, &bp_e), |_| cfg.lr_enc);
                opt_d.step_with_lr(&mut det, &collect_grads(&grads, &bp_d), |_| cfg.lr_det);
                rec.push(cfg.lr_enc, vec![dl.ce.item(), dl.vel.item(), 0.0], dl.total.item());
            }
        }
    }

    assert_eq!(teacher.params.digest(), teacher_digest, "teacher changed during distillation");
    assert_eq!(delim.digest(), delim_digest, "delimiters changed during distillation");
    Distilled { enc, proj, det, record: rec }
}

// ---------------------------------------------------------------------------
// Stage C: task heads on a frozen encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct HeadsConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig { epochs: 12, lr: 3e-3, seed: 0xE2E }
    }
}

/// Outcome of Stage C.
pub struct Heads {
    pub det: ParamSet,
    pub planner: ParamSet,
    pub record: RunRecord,
}

/// Stage C: train fresh detection and planning heads on top of a frozen
/// encoder (distilled or baseline). Features are computed once per scene
/// since the encoder cannot change.
pub fn train_e2e_heads(
    spec: &ModelSpec,
    enc: &ParamSet,
    data: &[TrainScene],
    cfg: &HeadsConfig,
) -> Heads {
    let lift = build_lift_table(spec);
    let enc_digest = enc.digest();
    let mut det = crate::encoders::init_det_head(spec, derive_seed(cfg.seed, 7));
    let mut planner = crate::encoders::init_planner(spec, derive_seed(cfg.seed, 8));

    let feats: Vec<Tensor> = data
        .iter()
        .map(|ts| match cache_feats(spec, enc, EncoderKind::Bev, &lift, &ts.views) {
            PathFeats::Bev(f) => f,
            PathFeats::Pv(_) => unreachable!(),
        })
        .collect();

    let mut rec = RunRecord::new("train-e2e", cfg.seed, &["class-ce", "velocity", "planning"]);
    rec.note(format!("encoder digest {:016x}", enc_digest.0));

    let total_steps = (data.len() * cfg.epochs) as u64;
    let mut opt_d = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut opt_p = AdamW::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = SplitMix64::new(derive_seed(cfg.seed, 0x0D0));
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for &si in &order {
            let ts = &data[si];
            let mut tape = Tape::new();
            let bp_d = tape.bind(&det, true);
            let bp_p = tape.bind(&planner, true);
            let f = tape.constant(&feats[si]);
            let pred = det_forward(&mut tape, &bp_d, &f);
            let target = tape.constant(&ts.raster);
            let dl = detection_loss(&mut tape, &pred, &target);
            let plan = plan_forward(&mut tape, &bp_p, &f);
            let pl = planning_loss(&mut tape, &plan, &ts.expert);
            let total = tape.add(&dl.total, &pl);
            let grads = tape.backward(&total);
            let lr = cosine_lr(cfg.lr, cfg.lr * 0.1, step, total_steps);
            opt_d.step_with_lr(&mut det, &collect_grads(&grads, &bp_d), |_| lr);
            opt_p.step_with_lr(&mut planner, &collect_grads(&grads, &bp_p), |_| lr);
            rec.push(lr, vec![dl.ce.item(), dl.vel.item(), pl.item()], total.item());
            step += 1;
        }
    }

    assert_eq!(enc.digest(), enc_digest, "encoder changed during head training");
    Heads { det, planner, record: rec }
}

/// Planned waypoints for one scene under a frozen encoder + planner.
pub fn plan_scene(
    spec: &ModelSpec,
    enc: &ParamSet,
    planner: &ParamSet,
    lift: &[LiftCell],
    views: &[Tensor],
) -> Vec<(f64, f64)> {
    let feats = match cache_feats(spec, enc, EncoderKind::Bev, lift, views) {
        PathFeats::Bev(f) => f,
        PathFeats::Pv(_) => unreachable!(),
    };
    let mut tape = Tape::new();
    let bp = tape.bind(planner, false);
    let f = tape.constant(&feats);
    let pred = plan_forward(&mut tape, &bp, &f);
    waypoints_of(&pred)
}

/// Mean Euclidean waypoint error (meters) of the planner against the
/// expert across scenes: the open-loop displacement metric.
pub fn open_loop_l2(
    spec: &ModelSpec,
    enc: &ParamSet,
    planner: &ParamSet,
    data: &[TrainScene],
) -> f64 {
    let lift = build_lift_table(spec);
    let mut sum = 0.0;
    let mut n = 0usize;
    for ts in data {
        let wp = plan_scene(spec, enc, planner, &lift, &ts.views);
        for (p, e) in wp.iter().zip(ts.expert.iter()) {
            sum += crate::math::hypot(p.0 - e.0, p.1 - e.1);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// The zero-policy reference: predict staying at the origin.
pub fn zero_policy_l2(data: &[TrainScene]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ts in data {
        for e in &ts.expert {
            sum += crate::math::hypot(e.0, e.1);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

// ---------------------------------------------------------------------------
// VQA evaluation of an aligned pathway
// ---------------------------------------------------------------------------

/// Accuracy report of a full question-answering evaluation.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct VqaReport {
    pub existence: ExistenceScore,
    pub mcq_correct: usize,
    pub mcq_total: usize,
    pub behavior_correct: usize,
    pub behavior_total: usize,
    pub numeric_total: usize,
    pub numeric_abs_err_sum: f64,
    pub exact_correct: usize,
    pub total: usize,
}

impl VqaReport {
    pub fn mcq_accuracy(&self) -> f64 {
        if self.mcq_total == 0 {
            0.0
        } else {
            self.mcq_correct as f64 / self.mcq_total as f64
        }
    }

    pub fn exact_match(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.exact_correct as f64 / self.total as f64
        }
    }

    pub fn mean_numeric_error(&self) -> f64 {
        if self.numeric_total == 0 {
            0.0
        } else {
            self.numeric_abs_err_sum / self.numeric_total as f64
        }
    }
}

/// Greedily answer every question against precomputed scene token rows
/// (`(scene seed, flattened rows)`), scoring exact string match per kind.
/// The scene prefix is primed once per scene and the key/value cache is
/// cloned per question.
pub fn eval_vqa(
    teacher: &Teacher,
    vocab: &Vocab,
    dialect: Dialect,
    scene_rows: &[(u64, Vec<f64>)],
    corpus: &[QaSample],
) -> VqaReport {
    let infer = TeacherInfer::new(teacher);
    let mut report = VqaReport::default();
    for (seed, rows) in scene_rows {
        let primed = infer.prime_continuous(rows, dialect);
        for q in corpus.iter().filter(|q| q.scene_seed == *seed) {
            let mut cache = primed.clone();
            infer.feed_text(&mut cache, &vocab.encode(&q.question));
            let out = vocab.decode(&infer.greedy_answer(&mut cache, 16));
            let ok = out == q.answer;
            report.total += 1;
            if ok {
                report.exact_correct += 1;
            }
            match q.kind {
                QaKind::Existence => {
                    if let Some(cat) = q.category {
                        report.existence.add(cat, ok);
                    }
                }
                QaKind::LocalizationMcq | QaKind::AbsDistMcq | QaKind::RelDistMcq => {
                    report.mcq_total += 1;
                    if ok {
                        report.mcq_correct += 1;
                    }
                }
                QaKind::Behavior => {
                    report.behavior_total += 1;
                    if ok {
                        report.behavior_correct += 1;
                    }
                }
                QaKind::AbsDistNumeric => {
                    report.numeric_total += 1;
                    let truth = q.numeric.unwrap_or(0.0);
                    let got = out
                        .split_whitespace()
                        .next()
                        .and_then(|w| w.parse::<f64>().ok())
                        .unwrap_or(f64::NAN);
                    let err = if got.is_finite() {
                        (got - truth).abs()
                    } else {
                        truth.abs().max(10.0)
                    };
                    report.numeric_abs_err_sum += err;
                }
            }
        }
    }
    report
}
