//! End-to-end flow: source/target adaptation, pseudo-label generation with
//! the updated cloud model, edge retraining on those labels, the repeating
//! cloud-edge cycle, and mAP evaluation.

mod eval;
mod snapshot;
mod train;

pub use eval::{
    evaluate_map, evaluate_map_bruteforce, rank_detections, rank_pseudo_labels, RankedDetection,
    MAP_IOU_THRESHOLD,
};
pub use snapshot::{config_hash, load_snapshot, save_snapshot, LoadedSnapshot};
pub use train::{
    adapt_cloud_model, generate_pseudo_labels, init_cloud_state, init_edge_params,
    pretrain_cloud, retrain_edge_model, run_collaboration_cycle, run_collaboration_cycle_from,
    AdaptTrace,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::AdvLossWeights;
use crate::autodiff::{AdamW, ParamSet};
use crate::detector::{init_detector_params, DetectionLossWeights, DetectorConfig};
use crate::error::{Error, Result};
use crate::synthdata::{DatasetConfig, DomainDataset, TargetSplit};
use crate::vpg::{PromptBank, VpgConfig};

/// Which adaptation components are active. Flags change the computation
/// graph itself: with everything off, adaptation degenerates to supervised
/// fine-tuning on the source split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentFlags {
    pub dqfa: bool,
    pub tiafa: bool,
    pub vpg: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        ComponentFlags { dqfa: true, tiafa: true, vpg: true }
    }
}

impl ComponentFlags {
    pub fn none() -> Self {
        ComponentFlags { dqfa: false, tiafa: false, vpg: false }
    }

    pub fn any(&self) -> bool {
        self.dqfa || self.tiafa || self.vpg
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.dqfa {
            parts.push("dqfa");
        }
        if self.tiafa {
            parts.push("tiafa");
        }
        if self.vpg {
            parts.push("vpg");
        }
        if parts.is_empty() {
            "none".into()
        } else if parts.len() == 3 {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// The five rows of the component study, mildest to fullest.
pub fn ablation_grid() -> [ComponentFlags; 5] {
    [
        ComponentFlags::none(),
        ComponentFlags { dqfa: true, tiafa: false, vpg: false },
        ComponentFlags { dqfa: false, tiafa: true, vpg: false },
        ComponentFlags { dqfa: true, tiafa: true, vpg: false },
        ComponentFlags::default(),
    ]
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub cloud_lr: f64,
    pub vpg_lr: f64,
    /// Discriminator learning rate. The domain discriminators chase a moving
    /// feature distribution, so they train on their own (faster) schedule.
    pub disc_lr: f64,
    /// Learning rate for the detector path during the adaptation phase.
    /// `None` keeps `cloud_lr`. The adversarial phase is run well below the
    /// pretraining rate so alignment reshapes features instead of the
    /// supervised loss re-fitting them.
    pub adapt_lr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            cloud_lr: 1e-4,
            vpg_lr: 1e-3,
            disc_lr: 1e-3,
            adapt_lr: None,
            weight_decay: 1e-4,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cloud_lr", self.cloud_lr),
            ("vpg_lr", self.vpg_lr),
            ("disc_lr", self.disc_lr),
            ("adapt_lr", self.adapt_lr.unwrap_or(self.cloud_lr)),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.cloud_lr == 0.0 || self.vpg_lr == 0.0 || self.disc_lr == 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.adapt_lr == Some(0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Detector-path learning rate in effect during adaptation.
    pub fn effective_adapt_lr(&self) -> f64 {
        self.adapt_lr.unwrap_or(self.cloud_lr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub pretrain_epochs: usize,
    /// Supervised epochs appended to pretraining at the adaptation-phase
    /// rate, so the detector is already settled at that rate before any
    /// adaptation starts. Only meaningful when `adapt_lr` differs from
    /// `cloud_lr`.
    pub settle_epochs: usize,
    pub adapt_epochs: usize,
    pub edge_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { pretrain_epochs: 30, settle_epochs: 0, adapt_epochs: 10, edge_epochs: 15 }
    }
}

fn default_edge_config() -> DetectorConfig {
    DetectorConfig {
        d_model: 32,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        n_queries: 10,
        num_classes: 3,
        ffn_dim: 64,
        backbone_channels: vec![8, 16, 32],
        prompt_tokens: 1,
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_name() -> String {
    "experiment".into()
}

/// Everything one experiment needs, resolvable from a single config file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label; names the output directory.
    pub name: String,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_edge_config")]
    pub edge: DetectorConfig,
    #[serde(default)]
    pub vpg: VpgConfig,
    #[serde(default)]
    pub loss: DetectionLossWeights,
    #[serde(default)]
    pub adversarial: AdvLossWeights,
    #[serde(default)]
    pub components: ComponentFlags,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: default_name(),
            detector: DetectorConfig::default(),
            edge: default_edge_config(),
            vpg: VpgConfig::default(),
            loss: DetectionLossWeights::default(),
            adversarial: AdvLossWeights::default(),
            components: ComponentFlags::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            dataset: DatasetConfig::default(),
            seeds: default_seeds(),
        }
    }
}

fn detector_scalar_count(cfg: &DetectorConfig) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    init_detector_params(cfg, &mut rng).scalar_count()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must be non-empty".into()));
        }
        self.detector.validate()?;
        self.edge.validate()?;
        self.vpg.validate()?;
        self.adversarial.validate()?;
        self.optim.validate()?;
        self.dataset.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.vpg.prompt_dim != self.detector.d_model {
            return Err(Error::Config(format!(
                "vpg.prompt_dim {} != detector.d_model {}",
                self.vpg.prompt_dim, self.detector.d_model
            )));
        }
        if self.vpg.prompt_tokens != self.detector.prompt_tokens {
            return Err(Error::Config(format!(
                "vpg.prompt_tokens {} != detector.prompt_tokens {}",
                self.vpg.prompt_tokens, self.detector.prompt_tokens
            )));
        }
        for (which, det) in [("detector", &self.detector), ("edge", &self.edge)] {
            if det.num_classes != self.dataset.classes() {
                return Err(Error::Config(format!(
                    "{which} expects {} classes, dataset provides {}",
                    det.num_classes,
                    self.dataset.classes()
                )));
            }
            if self.dataset.max_objects() > det.n_queries.saturating_sub(2) {
                return Err(Error::Config(format!(
                    "dataset max_objects {} must stay at most {} ({} queries minus 2)",
                    self.dataset.max_objects(),
                    det.n_queries.saturating_sub(2),
                    which
                )));
            }
        }
        let cloud = detector_scalar_count(&self.detector);
        let edge = detector_scalar_count(&self.edge);
        if edge >= cloud {
            return Err(Error::Config(format!(
                "edge model ({edge} parameters) must be smaller than the cloud model ({cloud})"
            )));
        }
        Ok(())
    }
}

/// Adapted-model state that travels through the cycle.
#[derive(Debug, Clone)]
pub struct CloudModelState {
    pub params: ParamSet,
    pub bank: PromptBank,
    pub opt: AdamW,
    pub cycle: usize,
    pub config_hash: String,
}

/// One source/target pairing consumed by one cycle.
#[derive(Debug, Clone)]
pub struct Stream {
    pub source: DomainDataset,
    pub target: TargetSplit,
}

/// Per-cycle record: what the adapted model produced and how the retrained
/// edge model scored, both on the held-out target split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub stream: String,
    pub seed: u64,
    pub flags: ComponentFlags,
    pub tau: f64,
    pub pseudo_label_count: usize,
    pub pseudo_label_map: f64,
    pub edge_map: f64,
}

impl CycleReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pseudo_label_map", self.pseudo_label_map), ("edge_map", self.edge_map)]
        {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} {v} outside [0, 100]")));
            }
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn minimal_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("name = \"demo\"").unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.optim.batch_size, OptimConfig::default().batch_size);
        assert_eq!(cfg.seeds, vec![0]);
    }

    #[test]
    fn missing_name_is_a_config_error() {
        let err = ExperimentConfig::from_toml("[optim]\nbatch_size = 4").unwrap_err();
        assert!(err.to_string().contains("name"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err =
            ExperimentConfig::from_toml("name = \"x\"\n[optim]\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(ExperimentConfig::from_toml("name = \"x\"\nturbo = true").is_err());
    }

    #[test]
    fn validation_cross_checks_dimensions() {
        let mut cfg = ExperimentConfig::default();
        cfg.vpg.prompt_dim = 32;
        assert!(cfg.validate().is_err(), "prompt width must match the model");

        let mut cfg = ExperimentConfig::default();
        cfg.dataset.source.palette.pop();
        assert!(cfg.validate().is_err(), "palette size must match num_classes");

        let mut cfg = ExperimentConfig::default();
        for t in &mut cfg.dataset.targets {
            t.max_objects = 9;
        }
        assert!(cfg.validate().is_err(), "max_objects must leave two spare queries");
    }

    #[test]
    fn edge_must_be_smaller_than_cloud() {
        let mut cfg = ExperimentConfig::default();
        cfg.edge = cfg.detector.clone();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("smaller"), "{err}");
    }

    #[test]
    fn flag_labels_and_grid_order() {
        let grid = ablation_grid();
        let labels: Vec<String> = grid.iter().map(|f| f.label()).collect();
        assert_eq!(labels, ["none", "dqfa", "tiafa", "dqfa+tiafa", "full"]);
        assert!(!grid[0].any());
        assert!(grid[4].any());
    }

    #[test]
    fn report_bounds_checked() {
        let report = CycleReport {
            cycle: 1,
            stream: "target1".into(),
            seed: 0,
            flags: ComponentFlags::default(),
            tau: 0.7,
            pseudo_label_count: 4,
            pseudo_label_map: 55.0,
            edge_map: 101.0,
        };
        assert!(report.validate().is_err());
    }
}
