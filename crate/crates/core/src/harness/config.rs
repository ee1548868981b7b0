//! Pipeline configuration, one TOML section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{FeatureSpace, OptimizerConfig};
use crate::detector::{DetectorConfig, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::scenesim::{derive_seed, ObjectClass, PhotometricModel, SceneConfig, TrajectorySpec};
use crate::sitnet::SitTrainConfig;

/// The default configuration file, shipped with the crate.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub scene: SceneConfig,
    pub photometric: PhotometricModel,
    pub dataset: DatasetSection,
    pub detector: DetectorSection,
    pub sitnet: SitnetSection,
    pub attack: AttackSection,
    pub evaluate: EvaluateSection,
    pub heatmap: HeatmapSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            scene: SceneConfig::default(),
            photometric: PhotometricModel::default(),
            dataset: DatasetSection::default(),
            detector: DetectorSection::default(),
            sitnet: SitnetSection::default(),
            attack: AttackSection::default(),
            evaluate: EvaluateSection::default(),
            heatmap: HeatmapSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed. Every module seed below is mixed with it.
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Frames for detector training; every sign class including stop.
    pub detector_frames: usize,
    /// Per attacked sign: frames the patches are optimized on.
    pub attack_frames: usize,
    /// Per attacked sign: held-out frames from the training scene distribution.
    pub similar_frames: usize,
    /// Per attacked sign: frames from disjoint backgrounds and sign placements.
    pub unseen_frames: usize,
    pub trajectory: TrajectorySpec,
    pub unseen_background_seeds: Vec<u64>,
    pub unseen_sign_lateral_range: [f64; 2],
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            detector_frames: 2000,
            attack_frames: 720,
            similar_frames: 120,
            unseen_frames: 120,
            trajectory: TrajectorySpec::default(),
            unseen_background_seeds: (6..12).collect(),
            unseen_sign_lateral_range: [0.46, 0.56],
        }
    }
}

impl DatasetSection {
    pub fn unseen_trajectory(&self) -> TrajectorySpec {
        TrajectorySpec {
            background_seeds: self.unseen_background_seeds.clone(),
            sign_lateral_range: self.unseen_sign_lateral_range,
            ..self.trajectory.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub arch: DetectorConfig,
    pub train: DetectorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SitnetSection {
    /// Displayed/captured training pairs.
    pub pairs: usize,
    pub train: SitTrainConfig,
}

impl Default for SitnetSection {
    fn default() -> Self {
        Self {
            pairs: 500,
            train: SitTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub scenarios: Vec<ObjectClass>,
    pub clusters: usize,
    pub feature_space: FeatureSpace,
    pub kmeans_seed: u64,
    pub patch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            scenarios: ObjectClass::ATTACKED_SIGNS.to_vec(),
            clusters: 3,
            feature_space: FeatureSpace::Distances,
            kmeans_seed: 0,
            patch_size: 64,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub decode_confidence: f64,
    pub nms_iou: f64,
    /// A stop detection must be strictly more confident than this.
    pub success_confidence: f64,
    /// ... and overlap the ground-truth sign box by strictly more than this IoU.
    pub min_iou: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            decode_confidence: 0.25,
            nms_iou: 0.5,
            success_confidence: 0.5,
            min_iou: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSection {
    /// Frames per scenario rendered with and without the dynamic patch.
    pub frames: usize,
    /// Detector block whose activation is decomposed.
    pub layer: usize,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        Self { frames: 3, layer: 4 }
    }
}

/// Tags separating the seed streams of the pipeline.
pub(crate) mod seed_tag {
    pub const DETECTOR_DATA: u64 = 1;
    pub const SCREEN_PAIRS: u64 = 2;
    pub const DETECTOR_TRAIN: u64 = 4;
    pub const SITNET: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const OPTIMIZER: u64 = 7;
    pub const ATTACK_DATA: u64 = 100;
    pub const SIMILAR_DATA: u64 = 200;
    pub const UNSEEN_DATA: u64 = 300;
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.photometric.validate()?;
        self.dataset.trajectory.validate()?;
        self.dataset.unseen_trajectory().validate()?;
        self.detector.arch.validate()?;
        self.sitnet.train.weights.validate()?;
        self.attack.optimizer.validate()?;
        if self.detector.arch.input_size != self.scene.image_size {
            return Err(Error::validation(format!(
                "detector input size {} differs from the rendered image size {}",
                self.detector.arch.input_size, self.scene.image_size
            )));
        }
        if self.attack.scenarios.is_empty() || self.attack.scenarios.iter().any(|c| !c.is_sign() || *c == ObjectClass::Stop) {
            return Err(Error::validation("attack scenarios must be non-stop sign classes"));
        }
        if self.attack.clusters == 0 || self.attack.patch_size == 0 {
            return Err(Error::validation("clusters and patch size must be positive"));
        }
        if self.dataset.attack_frames < self.attack.clusters {
            return Err(Error::validation("need at least one attack frame per cluster"));
        }
        let [a, b] = self.dataset.trajectory.sign_lateral_range;
        let [c, d] = self.dataset.unseen_sign_lateral_range;
        if c <= b && a <= d {
            return Err(Error::validation("unseen sign placements must not overlap the training range"));
        }
        if self
            .dataset
            .unseen_background_seeds
            .iter()
            .any(|s| self.dataset.trajectory.background_seeds.contains(s))
        {
            return Err(Error::validation("unseen background seeds must differ from the training seeds"));
        }
        let e = &self.evaluate;
        for (name, v) in [
            ("decode_confidence", e.decode_confidence),
            ("nms_iou", e.nms_iou),
            ("success_confidence", e.success_confidence),
            ("min_iou", e.min_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("evaluate.{name} must lie in [0, 1]")));
            }
        }
        if self.heatmap.layer >= self.detector.arch.widths.len() {
            return Err(Error::validation("heatmap layer exceeds the detector depth"));
        }
        Ok(())
    }

    /// Seed of one pipeline stream, mixed with the master seed.
    pub fn seed(&self, tag: u64, module_seed: u64) -> u64 {
        derive_seed(derive_seed(self.run.seed, tag), module_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_matches_defaults() {
        let cfg = PipelineConfig::from_toml_str(DEFAULT_CONFIG_TOML, Path::new("default.toml")).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |edit: fn(&mut PipelineConfig)| {
            let mut c = PipelineConfig::default();
            edit(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.attack.scenarios = vec![ObjectClass::Stop]));
        assert!(bad(|c| c.dataset.unseen_sign_lateral_range = [0.4, 0.5]));
        assert!(bad(|c| c.dataset.unseen_background_seeds = vec![0]));
        assert!(bad(|c| c.evaluate.min_iou = 1.5));
        assert!(bad(|c| c.detector.arch.input_size = 256));
        assert!(PipelineConfig::from_toml_str("[run]\nbogus = 1\n", Path::new("x")).is_err());
    }
}
