//! Command-line front end: configuration, stage orchestration with caching,
//! artifact persistence and report emission.

mod apply;
pub mod config;
pub mod manifest;
pub mod plot;
mod report;
mod train;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use apply::BaselineScore;
pub use config::ExperimentConfig;
pub use manifest::{RunManifest, StageRecord};
pub use report::{CheckResult, CurveRow, EvalSummary, GameReport};

use crate::codec::Codec;
use crate::editsim::Denoiser;
use crate::error::{Error, Result};
use crate::extract::{Extractor, GlyphClassifier, Recognizer, Reconstructor};
use crate::imaging::{load_png, render_watermark, save_png, Image, SegmentLayout};
use config::RecognizerMode;
use manifest::{rel, stage_key, Timer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "riw", about = "Robust invisible watermark experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run only the named stage of the chosen verb.
    #[arg(long = "stage-filter", global = true)]
    pub stage_filter: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    Train,
    Inject,
    Edit,
    Extract,
    Eval {
        /// Exit with status 4 when an acceptance threshold fails.
        #[arg(long)]
        check: bool,
    },
    Game,
    All,
}

pub const STAGES: [&str; 11] = [
    "corpus",
    "codec",
    "denoiser",
    "reconstructor",
    "ae",
    "distinguisher",
    "inject",
    "edit",
    "extract",
    "eval",
    "game",
];

impl Command {
    fn stages(self) -> &'static [&'static str] {
        match self {
            Command::Train => &STAGES[..6],
            Command::Inject => &STAGES[6..7],
            Command::Edit => &STAGES[7..8],
            Command::Extract => &STAGES[8..9],
            Command::Eval { .. } => &STAGES[9..10],
            Command::Game => &STAGES[10..],
            Command::All => &STAGES,
        }
    }
}

/// Outcome of a verb that ran to completion.
#[derive(Debug, Default)]
pub struct Outcome {
    pub check_failed: bool,
}

/// An experiment directory with its resolved config and manifest.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Split {
    Train,
    Recon,
    Distinguisher,
    Eval,
}

impl Run {
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out.clone();
        std::fs::create_dir_all(&out)?;
        let manifest = RunManifest::load_or_new(&out, &cfg.hash())?;
        std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        Ok(Self { cfg, out, manifest })
    }

    pub(crate) fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub(crate) fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.bin"))
    }

    fn key_of(&self, stage: &str) -> String {
        self.manifest
            .stages
            .get(stage)
            .map(|r| r.key.clone())
            .unwrap_or_default()
    }

    fn stage_slice(&self, stage: &str) -> (serde_json::Value, Vec<&'static str>) {
        let c = serde_json::to_value(&self.cfg).expect("config serializes");
        let pick = |keys: &[&str]| {
            let mut m = serde_json::Map::new();
            for k in keys {
                m.insert((*k).to_string(), c[*k].clone());
            }
            serde_json::Value::Object(m)
        };
        match stage {
            "corpus" => (pick(&["seed", "corpus"]), vec![]),
            "codec" => (pick(&["seed", "codec"]), vec!["corpus"]),
            "denoiser" => (pick(&["seed", "denoiser"]), vec!["codec"]),
            "reconstructor" => (
                pick(&["seed", "extract", "watermark", "injection", "edits"]),
                vec!["denoiser"],
            ),
            "ae" => (pick(&["seed", "baselines", "edits"]), vec!["denoiser"]),
            "distinguisher" => (
                pick(&["seed", "distinguisher", "watermark", "injection", "edits"]),
                vec!["denoiser"],
            ),
            "inject" => (
                pick(&[
                    "seed",
                    "watermark",
                    "injection",
                    "alpha_grid",
                    "lambda_grid",
                    "sweep_images",
                    "baselines",
                ]),
                vec!["codec", "ae"],
            ),
            "edit" => (pick(&["seed", "edits"]), vec!["inject", "denoiser"]),
            "extract" => (pick(&["seed", "watermark"]), vec!["edit", "reconstructor", "ae"]),
            "eval" => (pick(&["check", "injection"]), vec!["extract", "distinguisher"]),
            "game" => (
                pick(&["seed", "game", "edits", "watermark", "injection"]),
                vec!["corpus", "reconstructor", "distinguisher"],
            ),
            other => unreachable!("unknown stage {other}"),
        }
    }

    /// Runs `stage` unless its cached record is still fresh.
    fn run_stage(&mut self, stage: &str, exec: impl FnOnce(&mut Run) -> Result<Vec<PathBuf>>) -> Result<bool> {
        let (slice, upstream) = self.stage_slice(stage);
        let up: Vec<String> = upstream.iter().map(|u| self.key_of(u)).collect();
        let key = stage_key(&slice, &up.iter().map(String::as_str).collect::<Vec<_>>());
        if self.manifest.is_fresh(&self.out, stage, &key) {
            log(stage, "up to date, skipped");
            return Ok(false);
        }
        let t = Timer::start();
        log(stage, "running");
        let artifacts = exec(self)?;
        let record = StageRecord {
            key,
            artifacts: artifacts.iter().map(|p| rel(&self.out, p)).collect(),
            wall_ms: t.ms(),
        };
        log(stage, &format!("done in {:.1} s", record.wall_ms / 1e3));
        self.manifest.stages.insert(stage.to_string(), record);
        self.manifest.save(&self.out)?;
        Ok(true)
    }

    pub(crate) fn split(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.cfg.corpus;
        let a = c.train;
        let b = a + c.recon;
        let d = b + c.distinguisher;
        match split {
            Split::Train => 0..a,
            Split::Recon => a..b,
            Split::Distinguisher => b..d,
            Split::Eval => d..d + c.eval,
        }
    }

    pub(crate) fn image_id(index: usize) -> String {
        format!("img_{index:04}")
    }

    pub(crate) fn corpus_path(&self, index: usize) -> PathBuf {
        self.out.join("corpus").join(format!("{}.png", Self::image_id(index)))
    }

    pub(crate) fn load_split(&self, split: Split) -> Result<Vec<(String, Image)>> {
        self.split(split)
            .map(|i| Ok((Self::image_id(i), load_image(&self.corpus_path(i))?)))
            .collect()
    }

    pub fn layout(&self) -> Result<SegmentLayout> {
        let s = self.cfg.corpus.size;
        SegmentLayout::for_spec(&self.cfg.watermark, s, s)
    }

    pub(crate) fn glyphs(&self) -> usize {
        self.cfg.watermark.text.chars().count()
    }

    pub fn watermark_image(&self) -> Result<Image> {
        let s = self.cfg.corpus.size;
        render_watermark(&self.cfg.watermark, &self.layout()?, s, s, 3)
    }

    pub fn load_codec(&self) -> Result<Codec> {
        Codec::load(&require(self.checkpoint("codec"))?)
    }

    pub fn load_denoiser(&self) -> Result<Denoiser> {
        Denoiser::load(&require(self.checkpoint("denoiser"))?)
    }

    pub fn load_extractor(&self) -> Result<Extractor> {
        let reconstructor = if self.cfg.extract.use_reconstructor {
            Some(Reconstructor::load(&require(self.checkpoint("reconstructor"))?)?)
        } else {
            None
        };
        let recognizer = match self.cfg.extract.recognizer {
            RecognizerMode::Template => Recognizer::default(),
            RecognizerMode::Classifier => {
                Recognizer::Classifier(GlyphClassifier::load(&require(self.checkpoint("classifier"))?)?)
            }
        };
        Ok(Extractor {
            recognizer,
            reconstructor,
            layout: self.layout()?,
            glyphs: self.glyphs(),
        })
    }
}

pub(crate) fn log(stage: &str, msg: &str) {
    eprintln!("[{stage}] {msg}");
}

pub(crate) fn require(p: PathBuf) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(p))
    }
}

pub(crate) fn load_image(p: &Path) -> Result<Image> {
    load_png(&require(p.to_path_buf())?)
}

pub(crate) fn store_image(img: &Image, p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    save_png(img, p)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(p: &Path, v: &T) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(p, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(require(p.to_path_buf())?)?;
    Ok(serde_json::from_str(&text)?)
}

/// Executes the stages of `command` on an already resolved config.
pub fn execute(cfg: ExperimentConfig, command: Command, filter: Option<&str>) -> Result<Outcome> {
    let stages: Vec<&str> = match filter {
        None => command.stages().to_vec(),
        Some(f) if command.stages().contains(&f) => vec![f],
        Some(f) if STAGES.contains(&f) => {
            return Err(Error::Config(format!("stage {f:?} is not part of this command")));
        }
        Some(f) => {
            return Err(Error::Config(format!(
                "unknown stage {f:?}; expected one of {STAGES:?}"
            )))
        }
    };
    let mut run = Run::open(cfg)?;
    let mut outcome = Outcome::default();
    for stage in stages {
        match stage {
            "corpus" => run.run_stage(stage, train::corpus)?,
            "codec" => run.run_stage(stage, train::codec)?,
            "denoiser" => run.run_stage(stage, train::denoiser)?,
            "reconstructor" => run.run_stage(stage, train::reconstructor)?,
            "ae" => run.run_stage(stage, train::ae)?,
            "distinguisher" => run.run_stage(stage, train::distinguisher)?,
            "inject" => run.run_stage(stage, apply::inject)?,
            "edit" => run.run_stage(stage, apply::edit)?,
            "extract" => run.run_stage(stage, apply::extract)?,
            "eval" => run.run_stage(stage, report::eval)?,
            "game" => run.run_stage(stage, report::game)?,
            _ => unreachable!(),
        };
        if stage == "eval" && matches!(command, Command::Eval { check: true } | Command::All) {
            let summary: EvalSummary = read_json(&run.path("eval/summary.json"))?;
            for c in &summary.checks {
                println!(
                    "check {:<28} {} ({})",
                    c.name,
                    if c.passed { "pass" } else { "FAIL" },
                    c.detail
                );
            }
            outcome.check_failed = summary.checks.iter().any(|c| !c.passed);
        }
    }
    run.manifest.verify(&run.out)?;
    Ok(outcome)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

/// Parses arguments, applies overrides and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = (|| {
        let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
        cfg.apply_overrides(cli.seed, cli.out.clone())?;
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.jobs {
            if j == 0 {
                return Err(Error::Config("--jobs must be at least 1".into()));
            }
            pool = pool.num_threads(j);
        }
        let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| execute(cfg, cli.command, cli.stage_filter.as_deref()))
    })();
    match result {
        Ok(o) if o.check_failed && matches!(cli.command, Command::Eval { check: true }) => EXIT_CHECK,
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbs_cover_all_stages() {
        assert_eq!(Command::All.stages().len(), STAGES.len());
        let mut joined: Vec<&str> = [
            Command::Train,
            Command::Inject,
            Command::Edit,
            Command::Extract,
            Command::Eval { check: false },
            Command::Game,
        ]
        .iter()
        .flat_map(|c| c.stages().iter().copied())
        .collect();
        joined.dedup();
        assert_eq!(joined, STAGES);
    }

    #[test]
    fn bad_filters_and_flags_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(
            execute(cfg.clone(), Command::Train, Some("nope")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            execute(cfg, Command::Train, Some("game")),
            Err(Error::Config(_))
        ));
        assert_eq!(main_with_args(["riw", "frobnicate"]), EXIT_CONFIG);
        let missing = dir.path().join("missing.json");
        assert_eq!(
            main_with_args(["riw", "train", "--config", missing.to_str().unwrap()]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn stage_without_inputs_fails_as_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(main_with_args(["riw", "inject", "--out", out]), EXIT_STAGE);
    }
}
