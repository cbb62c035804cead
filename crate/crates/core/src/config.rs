//! Run configuration: a TOML file with one table per concern. Unknown keys are
//! rejected and every value is checked before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::ColorJitter;
use crate::backbone::BackboneConfig;
use crate::detector::{AnchorSet, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::loss::{AlphaGrad, BoxMode, LossConfig, LossWeights, DEFAULT_IGNORE_THRESHOLD};
use crate::model::{ModelConfig, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub input_size: Option<usize>,
    pub head_width: Option<usize>,
    pub stem_channels: Option<usize>,
    pub growth_rate: Option<usize>,
    pub layers_per_block: Option<[usize; 3]>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            input_size: None,
            head_width: None,
            stem_channels: None,
            growth_rate: None,
            layers_per_block: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> ModelConfig {
        let mut m = ModelConfig::preset(self.preset);
        let b: &mut BackboneConfig = &mut m.backbone;
        if let Some(v) = self.input_size {
            b.input_size = v;
        }
        if let Some(v) = self.stem_channels {
            b.stem_channels = v;
        }
        if let Some(v) = self.growth_rate {
            b.growth_rate = v;
        }
        if let Some(v) = self.layers_per_block {
            b.layers_per_block = v;
        }
        if let Some(v) = self.head_width {
            m.head_width = v;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorSource {
    /// k-means over the training boxes.
    Kmeans,
    /// COCO priors rescaled to the input size.
    Fallback,
    /// The `values` list, in input pixels.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    pub source: AnchorSource,
    pub values: Option<Vec<[f64; 2]>>,
}

impl Default for AnchorSection {
    fn default() -> Self {
        Self {
            source: AnchorSource::Kmeans,
            values: None,
        }
    }
}

impl AnchorSection {
    pub fn explicit(&self) -> Result<AnchorSet> {
        let v = self
            .values
            .as_ref()
            .ok_or_else(|| Error::Config("anchors.source = \"explicit\" needs anchors.values".into()))?;
        let arr: [[f64; 2]; 9] = v
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config(format!("anchors.values needs 9 pairs, found {}", v.len())))?;
        AnchorSet::new(arr.map(|[w, h]| (w, h)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub box_mode: BoxMode,
    pub alpha_grad: AlphaGrad,
    pub ignore_threshold: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            lambda_coord: d.weights.lambda_coord,
            lambda_noobj: d.weights.lambda_noobj,
            box_mode: d.box_mode,
            alpha_grad: d.alpha_grad,
            ignore_threshold: DEFAULT_IGNORE_THRESHOLD,
        }
    }
}

impl LossSection {
    pub fn to_loss_config(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                lambda_coord: self.lambda_coord,
                lambda_noobj: self.lambda_noobj,
            },
            box_mode: self.box_mode,
            alpha_grad: self.alpha_grad,
            ignore_threshold: self.ignore_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: Task,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Chance that a batch item is a Mosaic of four training images.
    pub mosaic_prob: f64,
    pub flip_prob: f64,
    pub jitter: ColorJitter,
    /// Re-estimate BN running statistics over the training set after the last step.
    pub bn_recalibrate: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            task: Task::Detect,
            steps: 300,
            batch_size: 4,
            learning_rate: 1e-2,
            momentum: 0.9,
            mosaic_prob: 1.0,
            flip_prob: 0.5,
            jitter: ColorJitter::default(),
            bn_recalibrate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    /// Fire when the probability reaches this value.
    pub threshold: f64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub train_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub anchors: AnchorSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub detect: DetectSection,
    pub classify: ClassifySection,
    pub paths: PathsSection,
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its value, defaults filled in; parses back to `self`.
    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        let m = self.model.resolve();
        c.model.input_size = Some(m.backbone.input_size);
        c.model.head_width = Some(m.head_width);
        c.model.stem_channels = Some(m.backbone.stem_channels);
        c.model.growth_rate = Some(m.backbone.growth_rate);
        c.model.layers_per_block = Some(m.backbone.layers_per_block);
        toml::to_string(&c).expect("config is always serializable")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.resolve()
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss.to_loss_config()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.loss_config()
            .weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.anchors.source == AnchorSource::Explicit {
            self.anchors.explicit()?;
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        unit("train.mosaic_prob", t.mosaic_prob)?;
        unit("train.flip_prob", t.flip_prob)?;
        unit("detect.conf_threshold", self.detect.conf_threshold)?;
        unit("detect.nms_iou", self.detect.nms_iou)?;
        unit("classify.threshold", self.classify.threshold)?;
        unit("loss.ignore_threshold", self.loss.ignore_threshold)?;
        let j = &t.jitter;
        if j.hue < 0.0 || j.saturation < 1.0 || j.brightness < 0.0 {
            return Err(Error::Config(
                "train.jitter needs hue >= 0, saturation >= 1, brightness >= 0".into(),
            ));
        }
        Ok(())
    }
}
