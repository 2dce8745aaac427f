//! The TOML run configuration. Every section is optional; unknown keys are
//! rejected with their full key path.

use std::path::{Path, PathBuf};

use lupi_core::dataset::{EnhanceParams, ExtractionParams};
use lupi_core::evaluation::{ExperimentSpec, F1Mode, ReportFormat, SelectionRule};
use lupi_core::synthetic::SyntheticSceneSpec;
use lupi_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds patch extraction and, when `map.seeds` is empty, the map
    /// repetitions.
    pub seed: u64,
    /// Worker threads for `run-map`; absent means one per logical core.
    pub workers: Option<usize>,
    pub runs_dir: PathBuf,
    pub synthetic: SyntheticSceneSpec,
    pub extraction: ExtractionParams,
    pub enhance: EnhanceParams,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub map: MapConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: None,
            runs_dir: PathBuf::from("runs"),
            synthetic: SyntheticSceneSpec::default(),
            extraction: ExtractionParams::default(),
            enhance: EnhanceParams::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            map: MapConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Patients (in order of first appearance) assigned to training.
    pub train_patients: usize,
    pub folds: usize,
    /// Shuffles patients before the cut when set.
    pub shuffle_seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_patients: 88,
            folds: 4,
            shuffle_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// 1-based training folds.
    pub folds: Vec<usize>,
    /// Each experiment trains on samples `1..=end` of its fold.
    pub range_ends: Vec<usize>,
    pub repetitions: usize,
    pub alphas: Vec<f64>,
    pub cv_folds: usize,
    /// Empty means `seed, seed + 1, ...`.
    pub seeds: Vec<u64>,
    pub selection: SelectionRule,
    pub f1_mode: F1Mode,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            folds: vec![1, 2, 3, 4],
            range_ends: vec![400, 600, 800, 1000],
            repetitions: 5,
            alphas: vec![0.8, 0.6, 0.4],
            cv_folds: 5,
            seeds: Vec::new(),
            selection: SelectionRule::default(),
            f1_mode: F1Mode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub formats: Vec<ReportFormat>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            formats: vec![ReportFormat::TableText, ReportFormat::Csv, ReportFormat::PlotData],
        }
    }
}

fn invalid(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::config(format!("{key}: {e}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            CliError::config(format!("{path}: {msg}"))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synthetic.validate().map_err(|e| invalid("synthetic", e))?;
        self.extraction.validate().map_err(|e| invalid("extraction", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        let e = &self.enhance;
        if !(0.0 <= e.p_low && e.p_low < e.p_high && e.p_high <= 100.0) {
            return Err(invalid("enhance", "need 0 <= p_low < p_high <= 100"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be >= 1"));
        }
        if self.split.folds == 0 {
            return Err(invalid("split.folds", "must be >= 1"));
        }
        let m = &self.map;
        if m.folds.is_empty() || m.range_ends.is_empty() {
            return Err(invalid("map", "folds and range_ends must be nonempty"));
        }
        if m.repetitions == 0 {
            return Err(invalid("map.repetitions", "must be >= 1"));
        }
        if !m.seeds.is_empty() && m.seeds.len() != m.repetitions {
            return Err(invalid("map.seeds", "need one seed per repetition"));
        }
        if let Some(a) = m.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid("map.alphas", format!("{a} outside [0, 1]")));
        }
        if self.report.formats.is_empty() {
            return Err(invalid("report.formats", "must be nonempty"));
        }
        Ok(())
    }

    pub fn map_seeds(&self) -> Vec<u64> {
        if self.map.seeds.is_empty() {
            (0..self.map.repetitions as u64).map(|r| self.seed + r).collect()
        } else {
            self.map.seeds.clone()
        }
    }

    /// Template shared by every cell of the map.
    pub fn experiment_template(&self) -> ExperimentSpec {
        ExperimentSpec {
            repetitions: self.map.repetitions,
            alphas: self.map.alphas.clone(),
            cv_folds: self.map.cv_folds,
            seeds: self.map_seeds(),
            train: self.train.clone(),
            selection: self.map.selection,
            f1_mode: self.map.f1_mode,
            ..ExperimentSpec::default()
        }
    }
}
