//! Experiment configuration: a TOML schema covering every pipeline stage,
//! strict validation (unknown keys are rejected, invalid values are listed
//! by name), and a content hash that stamps all artifacts a run produces.

use std::path::Path;

use anyhow::Result;
use bevlm_core::closedloop::ScenarioKind;
use bevlm_core::digest::digest_bytes;
use bevlm_core::distill::{AlignConfig, DetPretrainConfig, DistillConfig, HeadsConfig};
use bevlm_core::lm::{LmConfig, PretrainConfig, Vocab};
use bevlm_core::model::ModelSpec;
use bevlm_core::projector::Reduce;
use bevlm_core::qa::QaGenConfig;
use bevlm_core::rng::derive_seed;
use bevlm_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

/// Error carrying one message per offending configuration key; mapped to
/// exit code 1 by the CLI.
#[derive(Debug)]
pub struct ValidationError(pub Vec<String>);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for msg in &self.0 {
            writeln!(f, "  - {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// Error for a failed report check (`report --check`); exit code 3.
#[derive(Debug)]
pub struct ThresholdError(pub Vec<String>);

impl std::fmt::Display for ThresholdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "report checks failed:")?;
        for msg in &self.0 {
            writeln!(f, "  - {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ThresholdError {}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Questions generated per scene for one dataset split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct QaCfg {
    pub existence_per_scene: usize,
    pub crossview_per_scene: usize,
    pub behavior: bool,
}

impl Default for QaCfg {
    fn default() -> Self {
        QaCfg { existence_per_scene: 3, crossview_per_scene: 2, behavior: true }
    }
}

impl QaCfg {
    pub fn to_core(&self) -> QaGenConfig {
        QaGenConfig {
            existence_per_scene: self.existence_per_scene,
            crossview_per_scene: self.crossview_per_scene,
            include_behavior: self.behavior,
            ..QaGenConfig::default()
        }
    }
}

/// Scene counts per split and the per-split question budgets. Training
/// questions stay sparse (they set the distillation token budget); the
/// evaluation splits carry the dense question sets reports are scored on.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    pub train_scenes: u64,
    pub val_scenes: u64,
    pub test_scenes: u64,
    pub train_qa: QaCfg,
    pub eval_qa: QaCfg,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            train_scenes: 90,
            val_scenes: 12,
            test_scenes: 80,
            train_qa: QaCfg::default(),
            eval_qa: QaCfg {
                existence_per_scene: 25,
                crossview_per_scene: 6,
                behavior: true,
            },
        }
    }
}

/// Frozen-teacher pretraining knobs. `preset` selects the transformer
/// size: "S" (64-dim, 2 layers) or "M" (96-dim, 3 layers).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherCfg {
    pub preset: String,
    pub scenes: usize,
    pub eval_scenes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub existence_per_scene: usize,
    pub crossview_per_scene: usize,
}

impl Default for TeacherCfg {
    fn default() -> Self {
        TeacherCfg {
            preset: "S".into(),
            scenes: 150,
            eval_scenes: 12,
            epochs: 2,
            lr: 3e-3,
            existence_per_scene: 3,
            crossview_per_scene: 2,
        }
    }
}

impl TeacherCfg {
    pub fn lm_config(&self, spec: &ModelSpec) -> LmConfig {
        let vocab = Vocab::closed();
        match self.preset.to_ascii_uppercase().as_str() {
            "M" => LmConfig::medium(vocab.len(), spec.dist_buckets),
            _ => LmConfig::small(vocab.len(), spec.dist_buckets),
        }
    }

    pub fn pretrain_config(&self, experiment_seed: u64) -> PretrainConfig {
        PretrainConfig {
            scenes: self.scenes,
            eval_scenes: self.eval_scenes,
            epochs: self.epochs,
            lr: self.lr,
            seed: derive_seed(experiment_seed, 0x7EAC),
            existence_per_scene: self.existence_per_scene,
            crossview_per_scene: self.crossview_per_scene,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DetStageCfg {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for DetStageCfg {
    fn default() -> Self {
        DetStageCfg { epochs: 3, lr: 3e-3 }
    }
}

impl DetStageCfg {
    pub fn to_core(&self, experiment_seed: u64) -> DetPretrainConfig {
        DetPretrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed: derive_seed(experiment_seed, 0x0DE7),
        }
    }
}

/// Alignment-stage knobs. `pathway` is "bev" (fused top-down tokens) or
/// "pv" (per-view tokens); `projector` picks the BEV downsampling variant.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AlignStageCfg {
    pub epochs: usize,
    pub lr: f64,
    pub pathway: String,
    pub projector: String,
}

impl Default for AlignStageCfg {
    fn default() -> Self {
        AlignStageCfg { epochs: 4, lr: 1e-3, pathway: "bev".into(), projector: "conv".into() }
    }
}

impl AlignStageCfg {
    pub fn to_core(&self, experiment_seed: u64) -> AlignConfig {
        AlignConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed: derive_seed(experiment_seed, 0xA11),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DistillStageCfg {
    pub epochs: usize,
    pub lr_enc: f64,
    pub lr_proj: f64,
    pub lr_det: f64,
    pub w_distill: f64,
}

impl Default for DistillStageCfg {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillStageCfg {
            epochs: d.epochs,
            lr_enc: d.lr_enc,
            lr_proj: d.lr_proj,
            lr_det: d.lr_det,
            w_distill: d.w_distill,
        }
    }
}

impl DistillStageCfg {
    pub fn to_core(&self, experiment_seed: u64) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            lr_enc: self.lr_enc,
            lr_proj: self.lr_proj,
            lr_det: self.lr_det,
            w_distill: self.w_distill,
            seed: derive_seed(experiment_seed, 0xD157),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct E2eStageCfg {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for E2eStageCfg {
    fn default() -> Self {
        E2eStageCfg { epochs: 12, lr: 3e-3 }
    }
}

impl E2eStageCfg {
    pub fn to_core(&self, experiment_seed: u64) -> HeadsConfig {
        HeadsConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed: derive_seed(experiment_seed, 0xE2E),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopCfg {
    pub episodes_per_kind: usize,
    pub kinds: Vec<String>,
    pub dt: f64,
    /// Dump per-step ego traces as JSON lines next to the report.
    pub traces: bool,
}

impl Default for ClosedLoopCfg {
    fn default() -> Self {
        ClosedLoopCfg {
            episodes_per_kind: 50,
            kinds: ScenarioKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            dt: 0.5,
            traces: false,
        }
    }
}

/// The whole experiment: a seed, a stage pipeline, and per-stage knobs.
/// Every artifact a run emits embeds this configuration's content hash.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Stages executed by `run`, in order. An entry is a stage name with
    /// an optional `:argument`, e.g. `train-e2e:distilled`.
    pub pipeline: Vec<String>,
    pub world: WorldConfig,
    pub data: DataCfg,
    pub teacher: TeacherCfg,
    pub pretrain_det: DetStageCfg,
    pub align: AlignStageCfg,
    pub distill: DistillStageCfg,
    pub e2e: E2eStageCfg,
    pub closedloop: ClosedLoopCfg,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            pipeline: Vec::new(),
            world: WorldConfig::default(),
            data: DataCfg::default(),
            teacher: TeacherCfg::default(),
            pretrain_det: DetStageCfg::default(),
            align: AlignStageCfg::default(),
            distill: DistillStageCfg::default(),
            e2e: E2eStageCfg::default(),
            closedloop: ClosedLoopCfg::default(),
        }
    }
}

/// Stage names the runner understands (the `:argument` part excluded).
pub const STAGE_NAMES: [&str; 13] = [
    "simgen",
    "qagen",
    "pretrain-teacher",
    "pretrain-det",
    "train-align",
    "distill",
    "train-e2e",
    "eval-vqa",
    "eval-baselines",
    "eval-openloop",
    "eval-closedloop",
    "ablate-projector",
    "report",
];

impl ExperimentConfig {
    /// Content hash over the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        digest_bytes(text.as_bytes()).to_hex()
    }

    /// Collect every invalid value, named by its key.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut errs = Vec::new();
        let preset = self.teacher.preset.to_ascii_uppercase();
        if preset != "S" && preset != "M" {
            errs.push(format!("teacher.preset: expected \"S\" or \"M\", got {:?}", self.teacher.preset));
        }
        if Reduce::parse(&self.align.projector).is_none() {
            errs.push(format!(
                "align.projector: expected one of max/avg/concat/conv/dwconv, got {:?}",
                self.align.projector
            ));
        }
        if self.align.pathway != "bev" && self.align.pathway != "pv" {
            errs.push(format!("align.pathway: expected \"bev\" or \"pv\", got {:?}", self.align.pathway));
        }
        for k in &self.closedloop.kinds {
            if ScenarioKind::from_name(k).is_none() {
                errs.push(format!("closedloop.kinds: unknown scenario kind {k:?}"));
            }
        }
        for entry in &self.pipeline {
            let name = entry.split(':').next().unwrap_or_default();
            if !STAGE_NAMES.contains(&name) {
                errs.push(format!("pipeline: unknown stage {entry:?}"));
            }
        }
        let positive_usize: [(&str, usize); 7] = [
            ("teacher.scenes", self.teacher.scenes),
            ("teacher.epochs", self.teacher.epochs),
            ("pretrain_det.epochs", self.pretrain_det.epochs),
            ("align.epochs", self.align.epochs),
            ("e2e.epochs", self.e2e.epochs),
            ("closedloop.episodes_per_kind", self.closedloop.episodes_per_kind),
            ("data.train_scenes", self.data.train_scenes as usize),
        ];
        for (key, v) in positive_usize {
            if v == 0 {
                errs.push(format!("{key}: must be positive"));
            }
        }
        let positive_f64 = [
            ("teacher.lr", self.teacher.lr),
            ("pretrain_det.lr", self.pretrain_det.lr),
            ("align.lr", self.align.lr),
            ("distill.lr_enc", self.distill.lr_enc),
            ("distill.lr_proj", self.distill.lr_proj),
            ("distill.lr_det", self.distill.lr_det),
            ("e2e.lr", self.e2e.lr),
            ("closedloop.dt", self.closedloop.dt),
        ];
        for (key, v) in positive_f64 {
            if !(v > 0.0) {
                errs.push(format!("{key}: must be positive, got {v}"));
            }
        }
        if self.distill.w_distill < 0.0 {
            errs.push(format!("distill.w_distill: must be >= 0, got {}", self.distill.w_distill));
        }
        if self.data.test_scenes == 0 || self.data.val_scenes == 0 {
            errs.push("data.val_scenes / data.test_scenes: must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationError(errs))
        }
    }
}

/// Parse and validate a TOML config file. Unknown keys are reported as a
/// validation error naming the key.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| ValidationError(vec![format!("{}: {e}", path.display())]))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: [&str; 4] =
    ["repro-table1", "repro-crossview", "repro-ablation-projector", "repro-ncap"];

/// Built-in one-command pipelines. Each covers one headline comparison:
/// baseline-vs-aligned QA accuracy, fused-vs-per-view tokens, projector
/// downsampling variants, and the closed-loop safety comparison.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let pipeline: Vec<&str> = match name {
        "repro-table1" => vec![
            "simgen",
            "qagen",
            "pretrain-teacher",
            "pretrain-det",
            "train-align",
            "eval-baselines",
            "eval-vqa:baseline",
            "report",
        ],
        "repro-crossview" => vec![
            "simgen",
            "qagen",
            "pretrain-teacher",
            "pretrain-det",
            "train-align:bev",
            "train-align:pv",
            "eval-vqa:baseline",
            "eval-vqa:pv",
            "report",
        ],
        "repro-ablation-projector" => vec![
            "simgen",
            "qagen",
            "pretrain-teacher",
            "pretrain-det",
            "ablate-projector",
            "report",
        ],
        "repro-ncap" => vec![
            "simgen",
            "qagen",
            "pretrain-teacher",
            "pretrain-det",
            "train-align",
            "distill",
            "train-e2e:baseline",
            "train-e2e:distilled",
            "eval-openloop",
            "eval-closedloop:baseline",
            "eval-closedloop:distilled",
            "report",
        ],
        _ => return None,
    };
    cfg.pipeline = pipeline.into_iter().map(String::from).collect();
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().expect("default config valid");
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(cfg.hash(), other.hash(), "seed must change the hash");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = 3\nnot_a_real_key = 1\n").unwrap();
        let err = load_config(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("not_a_real_key"), "error must name the key: {msg}");
    }

    #[test]
    fn invalid_values_are_listed_by_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.teacher.preset = "XL".into();
        cfg.align.projector = "octopus".into();
        cfg.closedloop.kinds = vec!["blocked-lane".into(), "meteor".into()];
        cfg.pipeline = vec!["simgen".into(), "fly-to-moon".into()];
        let err = cfg.validate().unwrap_err();
        let msg = format!("{err}");
        for needle in ["teacher.preset", "align.projector", "meteor", "fly-to-moon"] {
            assert!(msg.contains(needle), "missing {needle} in: {msg}");
        }
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let cfg = preset("repro-ncap").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn presets_exist_and_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).expect(name);
            cfg.validate().expect(name);
            assert!(!cfg.pipeline.is_empty());
        }
        assert!(preset("repro-unknown").is_none());
    }
}
