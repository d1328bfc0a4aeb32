use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::AeTrainOptions;
use crate::codec::{CodecConfig, TrainOptions};
use crate::editsim::{DenoiserConfig, DenoiserTrainOptions, DiffusionSchedule, EditSpec};
use crate::error::{Error, Result};
use crate::evalgame::DistinguisherOptions;
use crate::extract::ReconstructorOptions;
use crate::imaging::WatermarkSpec;
use crate::riw::InjectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory of PNG images to use instead of the procedural generator.
    pub path: Option<PathBuf>,
    pub size: usize,
    /// Images used to train the codec, denoiser and baselines.
    pub train: usize,
    /// Images injected with random texts to train the reconstructor.
    pub recon: usize,
    /// Images used for distinguisher training and Bob's calibration.
    pub distinguisher: usize,
    /// Held-out evaluation images.
    pub eval: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            size: 64,
            train: 200,
            recon: 300,
            distinguisher: 120,
            eval: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecStage {
    pub epochs: usize,
    pub config: CodecConfig,
    pub options: TrainOptions,
}

impl Default for CodecStage {
    fn default() -> Self {
        Self {
            epochs: 30,
            config: CodecConfig::default(),
            options: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserStage {
    pub epochs: usize,
    pub config: DenoiserConfig,
    pub options: DenoiserTrainOptions,
}

impl Default for DenoiserStage {
    fn default() -> Self {
        Self {
            epochs: 40,
            config: DenoiserConfig::default(),
            options: DenoiserTrainOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecognizerMode {
    Template,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractStage {
    pub use_reconstructor: bool,
    pub epochs: usize,
    /// PGD steps when injecting reconstructor training images.
    pub inject_steps: usize,
    /// Every n-th training image also contributes clean edited segments
    /// mapped to an empty target; 0 disables.
    pub negative_every: usize,
    /// Render a random text per training image instead of the configured
    /// watermark text; required by the classifier recognizer.
    pub random_texts: bool,
    /// Every n-th training image also contributes its unedited watermarked
    /// and clean segments; 0 disables.
    pub identity_every: usize,
    /// Fraction of training images injected at an α drawn from `alpha_grid`
    /// instead of the default α.
    pub alpha_mix: f64,
    pub options: ReconstructorOptions,
    pub recognizer: RecognizerMode,
    pub classifier_epochs: usize,
}

impl Default for ExtractStage {
    fn default() -> Self {
        Self {
            use_reconstructor: true,
            epochs: 120,
            inject_steps: 100,
            negative_every: 2,
            random_texts: false,
            identity_every: 3,
            alpha_mix: 0.5,
            options: ReconstructorOptions::default(),
            recognizer: RecognizerMode::Template,
            classifier_epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineStage {
    pub ae_epochs: usize,
    pub ae_lam: f64,
    pub ae_alpha_noise: f64,
    pub ae_finetune_epochs: usize,
    /// Training images edited to build the decoder fine-tuning set.
    pub ae_finetune_images: usize,
    /// Length of the random per-image baseline payloads.
    pub payload_bits: usize,
    pub dct_strength: f64,
    pub dct_margin: f64,
    pub dct_key: u64,
    pub ae_options: AeTrainOptions,
}

impl Default for BaselineStage {
    fn default() -> Self {
        Self {
            ae_epochs: 15,
            ae_lam: 1.0,
            ae_alpha_noise: 0.05,
            ae_finetune_epochs: 10,
            ae_finetune_images: 100,
            payload_bits: 24,
            dct_strength: 0.25,
            dct_margin: 0.125,
            dct_key: 4,
            ae_options: AeTrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistinguisherStage {
    pub epochs: usize,
    pub options: DistinguisherOptions,
}

impl Default for DistinguisherStage {
    fn default() -> Self {
        Self {
            epochs: 30,
            options: DistinguisherOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameStage {
    pub trials: usize,
    pub calibration_images: usize,
}

impl Default for GameStage {
    fn default() -> Self {
        Self {
            trials: 100,
            calibration_images: 20,
        }
    }
}

/// Thresholds applied by `eval --check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckThresholds {
    pub min_d_word: f64,
    pub min_margin_over_baselines: f64,
    pub auc_range: (f64, f64),
}

impl Default for CheckThresholds {
    fn default() -> Self {
        Self {
            min_d_word: 0.8,
            min_margin_over_baselines: 0.3,
            auc_range: (0.4, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub codec: CodecStage,
    pub denoiser: DenoiserStage,
    pub watermark: WatermarkSpec,
    pub injection: InjectionConfig,
    pub alpha_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// Evaluation images injected at each off-default grid point.
    pub sweep_images: usize,
    pub edits: Vec<EditSpec>,
    pub extract: ExtractStage,
    pub baselines: BaselineStage,
    pub distinguisher: DistinguisherStage,
    pub game: GameStage,
    pub check: CheckThresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            codec: CodecStage::default(),
            denoiser: DenoiserStage::default(),
            watermark: WatermarkSpec::default(),
            injection: InjectionConfig::default(),
            alpha_grid: [1.0, 15.0, 51.0, 102.0, 153.0, 255.0]
                .iter()
                .map(|v| v / 255.0)
                .collect(),
            lambda_grid: (0..8).map(|k| 0.5f64.powi(k)).collect(),
            sweep_images: 8,
            edits: vec![EditSpec::default(), EditSpec::with_prompt("warm", 1)],
            extract: ExtractStage::default(),
            baselines: BaselineStage::default(),
            distinguisher: DistinguisherStage::default(),
            game: GameStage::default(),
            check: CheckThresholds::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; a missing path gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        Ok(cfg)
    }

    /// Applies `RIW_SEED` and `RIW_OUT`, then explicit command-line values.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
        if let Ok(v) = std::env::var("RIW_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| Error::Config(format!("RIW_SEED={v:?} is not an unsigned integer")))?;
        }
        if let Ok(v) = std::env::var("RIW_OUT") {
            self.out = PathBuf::from(v);
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.train == 0 || c.eval == 0 {
            return Err(Error::Config("corpus.train and corpus.eval must be positive".into()));
        }
        if self.alpha_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(Error::Config("alpha_grid and lambda_grid must be non-empty".into()));
        }
        if self.edits.is_empty() {
            return Err(Error::Config("at least one edit is required".into()));
        }
        if self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha_grid values must lie in [0, 1]".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lambda_grid values must be positive".into()));
        }
        if self.watermark.grid.0 * self.watermark.grid.1 == 0 {
            return Err(Error::Config("watermark grid must have at least one segment".into()));
        }
        self.watermark.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.injection.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.extract.use_reconstructor && self.corpus.recon == 0 {
            return Err(Error::Config("the reconstructor needs corpus.recon > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.extract.alpha_mix) {
            return Err(Error::Config("extract.alpha_mix must lie in [0, 1]".into()));
        }
        if self.extract.recognizer == RecognizerMode::Classifier && !self.extract.random_texts {
            return Err(Error::Config(
                "the classifier recognizer needs extract.random_texts so it sees every glyph".into(),
            ));
        }
        if self.corpus.distinguisher < 4 {
            return Err(Error::Config("corpus.distinguisher must be at least 4".into()));
        }
        if self.baselines.payload_bits == 0 {
            return Err(Error::Config("baselines.payload_bits must be positive".into()));
        }
        let schedule = DiffusionSchedule::default();
        let mut labels = std::collections::BTreeSet::new();
        for e in &self.edits {
            e.validate(&schedule)
                .map_err(|err| Error::Config(format!("edit {}: {err}", e.label())))?;
            if !labels.insert(e.label()) {
                return Err(Error::Config(format!("duplicate edit {}", e.label())));
            }
        }
        if let Some(p) = &c.path {
            let n = std::fs::read_dir(p)
                .map_err(|e| Error::Config(format!("corpus path {}: {e}", p.display())))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
                .count();
            if n < self.corpus_total() {
                return Err(Error::Config(format!(
                    "corpus path {} holds {n} PNG images, the splits need {}",
                    p.display(),
                    self.corpus_total()
                )));
            }
        }
        Ok(())
    }

    pub fn corpus_total(&self) -> usize {
        let c = &self.corpus;
        c.train + c.recon + c.distinguisher + c.eval
    }

    /// SHA-256 of the canonical JSON with the output directory removed.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        hash_value(&v)
    }
}

pub(crate) fn hash_value(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
