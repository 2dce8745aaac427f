//! Pixel-wise F1, t-based confidence intervals, the experiment-map runner
//! and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{enhance_patch, partition_blocks, DatasetSplit, EnhancedPatch, PatchRecord};
use crate::error::{Error, Result};
use crate::imaging::MaskImage;
use crate::nn::Scalar;
use crate::training::{
    batch_input, train_pi_student, train_student, train_teacher, ModelInput, TrainConfig, TrainedModel,
};
use crate::unet::UNetModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Mode {
    /// Counts pooled over every pixel of every mask.
    #[default]
    Micro,
    /// Mean of per-mask scores.
    Macro,
}

/// `(TP, FP, FN)` for the tumor class.
pub fn confusion(pred: &MaskImage, truth: &MaskImage) -> Result<(u64, u64, u64)> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::arg(format!(
            "mask dims differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let (mut tp, mut fp, mut fne) = (0, 0, 0);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fne))
}

fn f1_from_counts(tp: u64, fp: u64, fne: u64) -> f64 {
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn f1_score(pred: &[MaskImage], truth: &[MaskImage], mode: F1Mode) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::arg(format!(
            "{} predictions vs {} ground-truth masks",
            pred.len(),
            truth.len()
        )));
    }
    let counts = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| confusion(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(match mode {
        F1Mode::Micro => {
            let (tp, fp, fne) = counts
                .iter()
                .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            f1_from_counts(tp, fp, fne)
        }
        F1Mode::Macro if counts.is_empty() => 1.0,
        F1Mode::Macro => {
            counts.iter().map(|&(a, b, c)| f1_from_counts(a, b, c)).sum::<f64>() / counts.len() as f64
        }
    })
}

/// Mean and half-width `t(0.975, n-1) * s / sqrt(n)`.
pub fn confidence_interval_95(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::arg(format!("confidence interval needs >= 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / nf.sqrt()))
}

/// Eval-mode segmentation: a pixel is tumor when its tumor probability
/// exceeds the healthy one.
pub fn predict_masks<T: Scalar, S: ModelInput>(
    model: &UNetModel<T>,
    samples: &[S],
    batch_size: usize,
) -> Result<Vec<MaskImage>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = batch_input::<T, S>(samples, chunk)?;
        let probs = model.predict(&x)?;
        let [n, _, h, w] = probs.dims4()?;
        let hw = h * w;
        let d = probs.data();
        for b in 0..n {
            let base = b * 2 * hw;
            let labels = (0..hw).map(|p| u8::from(d[base + hw + p] > d[base + p])).collect();
            out.push(MaskImage::new(w, h, labels)?);
        }
    }
    Ok(out)
}

/// F1 of `model` on `samples` against their own masks.
pub fn evaluate_model<T: Scalar, S: ModelInput>(model: &UNetModel<T>, samples: &[S], mode: F1Mode) -> Result<f64> {
    let pred = predict_masks(model, samples, 8)?;
    let truth: Vec<MaskImage> = samples.iter().map(|s| s.mask().clone()).collect();
    f1_score(&pred, &truth, mode)
}

/// How the per-fold models of one CV cycle become one test score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// The fold model with the highest final validation F1 (earliest on ties).
    #[default]
    BestValidation,
    /// Mean test F1 over all fold models.
    Average,
    /// The model whose validation block is the last one.
    LastFold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub experiment_id: String,
    /// 1-based index into the split's training folds.
    pub training_fold: usize,
    /// 1-based inclusive range of samples within the fold.
    pub sample_range: (usize, usize),
    pub repetitions: usize,
    pub alphas: Vec<f64>,
    pub cv_folds: usize,
    /// One seed per repetition.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub selection: SelectionRule,
    pub f1_mode: F1Mode,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiment_id: "E1".into(),
            training_fold: 1,
            sample_range: (1, 400),
            repetitions: 5,
            alphas: vec![0.8, 0.6, 0.4],
            cv_folds: 5,
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            selection: SelectionRule::default(),
            f1_mode: F1Mode::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self, split: &DatasetSplit) -> Result<()> {
        self.train.validate()?;
        if self.repetitions == 0 {
            return Err(Error::arg("repetitions must be >= 1"));
        }
        if self.seeds.len() != self.repetitions {
            return Err(Error::arg(format!(
                "{}: {} seeds for {} repetitions",
                self.experiment_id,
                self.seeds.len(),
                self.repetitions
            )));
        }
        if self.training_fold == 0 || self.training_fold > split.folds.len() {
            return Err(Error::arg(format!(
                "{}: training_fold {} outside 1..={}",
                self.experiment_id,
                self.training_fold,
                split.folds.len()
            )));
        }
        let fold_len = split.folds[self.training_fold - 1].len();
        let (start, end) = self.sample_range;
        if start == 0 || start > end || end > fold_len {
            return Err(Error::arg(format!(
                "{}: sample_range {start}-{end} outside fold of {fold_len}",
                self.experiment_id
            )));
        }
        if self.cv_folds < 2 || self.cv_folds > end - start + 1 {
            return Err(Error::arg(format!(
                "{}: cv_folds {} invalid for {} samples",
                self.experiment_id,
                self.cv_folds,
                end - start + 1
            )));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::arg(format!("alpha {a} outside [0, 1]")));
        }
        if split.test_patches.is_empty() {
            return Err(Error::arg("test set is empty"));
        }
        Ok(())
    }

    pub fn range_label(&self) -> String {
        format!("{}-{}", self.sample_range.0, self.sample_range.1)
    }
}

/// Fold-major grid of experiments: ids `E1, E2, ...` walk the ranges of
/// fold 1 first. Ranges are `1-r` for each `r`.
pub fn experiment_map(folds: &[usize], range_ends: &[usize], template: &ExperimentSpec) -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for &fold in folds {
        for &end in range_ends {
            out.push(ExperimentSpec {
                experiment_id: format!("E{}", out.len() + 1),
                training_fold: fold,
                sample_range: (1, end),
                ..template.clone()
            });
        }
    }
    out
}

/// The 16-cell map: folds 1-4 by ranges 1-400, 1-600, 1-800, 1-1000.
pub fn full_map(template: &ExperimentSpec) -> Vec<ExperimentSpec> {
    experiment_map(&[1, 2, 3, 4], &[400, 600, 800, 1000], template)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Variant {
    Teacher,
    Student,
    Pi { alpha: f64 },
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Self::Teacher => "teacher".into(),
            Self::Student => "student".into(),
            Self::Pi { alpha } => format!("pi({alpha})"),
        }
    }

    /// Teacher scores are reported but never marked best.
    pub fn competes(&self) -> bool {
        !matches!(self, Self::Teacher)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    pub mean_f1: f64,
    /// Absent when there is a single repetition. Not clipped to [0, 1].
    pub ci_half_width: Option<f64>,
    /// Test F1 per repetition, in repetition order.
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub training_fold: usize,
    pub sample_range: (usize, usize),
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantMetrics>,
}

impl MetricsRow {
    pub fn range_label(&self) -> String {
        format!("{}-{}", self.sample_range.0, self.sample_range.1)
    }

    pub fn get(&self, v: Variant) -> Option<&VariantMetrics> {
        self.variants.iter().find(|m| m.variant == v)
    }

    /// Competing variants whose mean, rounded to 3 decimals, is maximal.
    pub fn best(&self) -> Vec<Variant> {
        let key = |m: &VariantMetrics| (m.mean_f1 * 1000.0).round() as i64;
        let top = self.variants.iter().filter(|m| m.variant.competes()).map(key).max();
        self.variants
            .iter()
            .filter(|m| m.variant.competes() && Some(key(m)) == top)
            .map(|m| m.variant)
            .collect()
    }
}

/// Per-fold models of one CV cycle with their final validation F1.
struct FoldModels<T> {
    models: Vec<TrainedModel<T>>,
}

impl<T: Scalar> FoldModels<T> {
    fn test_f1<S: ModelInput>(&self, rule: SelectionRule, test: &[S], mode: F1Mode) -> Result<f64> {
        match rule {
            SelectionRule::BestValidation => {
                let mut best = 0;
                for (i, m) in self.models.iter().enumerate() {
                    let score = |k: usize| self.models[k].history.last_val_f1().unwrap_or(f64::NEG_INFINITY);
                    if m.history.last_val_f1().unwrap_or(f64::NEG_INFINITY) > score(best) {
                        best = i;
                    }
                }
                evaluate_model(&self.models[best].model, test, mode)
            }
            SelectionRule::Average => {
                let mut sum = 0.0;
                for m in &self.models {
                    sum += evaluate_model(&m.model, test, mode)?;
                }
                Ok(sum / self.models.len() as f64)
            }
            SelectionRule::LastFold => evaluate_model(&self.models.last().expect("cv folds").model, test, mode),
        }
    }
}

/// Deterministic per-run seed from the repetition seed, CV fold and role.
fn derive_seed(rep_seed: u64, fold: usize, role: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(rep_seed.to_le_bytes());
    h.update((fold as u64).to_le_bytes());
    h.update(role.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn pick<X: Clone>(xs: &[X], idx: impl Iterator<Item = usize>) -> Vec<X> {
    idx.map(|i| xs[i].clone()).collect()
}

/// Test F1 of every variant for one repetition, in [`variants_of`] order.
fn run_repetition<T: Scalar>(
    spec: &ExperimentSpec,
    raw: &[PatchRecord],
    enhanced: &[EnhancedPatch],
    test_raw: &[PatchRecord],
    test_enh: &[EnhancedPatch],
    rep: usize,
) -> Result<Vec<f64>> {
    let seed = spec.seeds[rep];
    let blocks = partition_blocks(raw.len(), spec.cv_folds);
    let mut teachers = FoldModels { models: Vec::new() };
    let mut students = FoldModels { models: Vec::new() };
    let mut pis: Vec<FoldModels<T>> = spec.alphas.iter().map(|_| FoldModels { models: Vec::new() }).collect();
    for (k, val) in blocks.iter().enumerate() {
        let train_idx = || (0..raw.len()).filter(|i| !val.contains(i));
        let (tr_raw, tr_enh) = (pick(raw, train_idx()), pick(enhanced, train_idx()));
        let (va_raw, va_enh) = (&raw[val.clone()], &enhanced[val.clone()]);
        log::info!(
            "{} rep={} cv_fold={}/{} train={} val={}",
            spec.experiment_id,
            rep + 1,
            k + 1,
            blocks.len(),
            tr_raw.len(),
            va_raw.len()
        );

        let teacher_cfg = TrainConfig {
            seed: derive_seed(seed, k, 0),
            ..spec.train.clone()
        };
        let teacher = train_teacher::<T>(&tr_enh, va_enh, &teacher_cfg)?;
        // baseline and PI students share an initialization and batch order
        let student_cfg = TrainConfig {
            seed: derive_seed(seed, k, 1),
            ..spec.train.clone()
        };
        students.models.push(train_student::<T>(&tr_raw, va_raw, &student_cfg)?);
        for (slot, &alpha) in pis.iter_mut().zip(&spec.alphas) {
            let cfg = TrainConfig {
                alpha,
                ..student_cfg.clone()
            };
            slot.models
                .push(train_pi_student(&tr_raw, &tr_enh, &teacher.model, va_raw, &cfg)?);
        }
        teachers.models.push(teacher);
    }

    let mode = spec.f1_mode;
    let mut out = vec![
        teachers.test_f1(spec.selection, test_enh, mode)?,
        students.test_f1(spec.selection, test_raw, mode)?,
    ];
    for p in &pis {
        out.push(p.test_f1(spec.selection, test_raw, mode)?);
    }
    Ok(out)
}

fn variants_of(spec: &ExperimentSpec) -> Vec<Variant> {
    let mut v = vec![Variant::Teacher, Variant::Student];
    v.extend(spec.alphas.iter().map(|&alpha| Variant::Pi { alpha }));
    v
}

/// Runs one experiment cell: per repetition a full CV cycle training the
/// teacher, baseline student and one PI student per alpha, then test-set
/// scoring and aggregation across repetitions.
pub fn run_experiment<T: Scalar>(spec: &ExperimentSpec, split: &DatasetSplit) -> Result<MetricsRow> {
    spec.validate(split)?;
    let fold = split.fold(spec.training_fold - 1);
    let raw = &fold[spec.sample_range.0 - 1..spec.sample_range.1];
    let enhanced: Vec<EnhancedPatch> = raw.par_iter().map(enhance_patch).collect();
    let test_raw = &split.test_patches;
    let test_enh: Vec<EnhancedPatch> = test_raw.par_iter().map(enhance_patch).collect();

    // repetitions are independent; collect keeps repetition order
    let per_rep = (0..spec.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition::<T>(spec, raw, &enhanced, test_raw, &test_enh, rep))
        .collect::<Result<Vec<_>>>()?;

    let variants = variants_of(spec)
        .into_iter()
        .enumerate()
        .map(|(j, variant)| {
            let samples: Vec<f64> = per_rep.iter().map(|r| r[j]).collect();
            let (mean_f1, ci_half_width) = if samples.len() >= 2 {
                let (m, h) = confidence_interval_95(&samples)?;
                (m, Some(h))
            } else {
                (samples[0], None)
            };
            Ok(VariantMetrics {
                variant,
                mean_f1,
                ci_half_width,
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRow {
        experiment_id: spec.experiment_id.clone(),
        training_fold: spec.training_fold,
        sample_range: spec.sample_range,
        repetitions: spec.repetitions,
        seeds: spec.seeds.clone(),
        variants,
    })
}

/// Rows completed before a failure, if any.
#[derive(Debug)]
pub struct MapOutcome {
    pub rows: Vec<MetricsRow>,
    pub failure: Option<(String, Error)>,
}

/// Runs cells in parallel. Rows keep the order of `specs`; a failing cell
/// is dropped and the first failure (in input order) is reported alongside
/// the rows that completed.
pub fn run_map<T: Scalar>(specs: &[ExperimentSpec], split: &DatasetSplit) -> MapOutcome {
    use rayon::prelude::*;
    let results: Vec<Result<MetricsRow>> = specs.par_iter().map(|s| run_experiment::<T>(s, split)).collect();
    let mut rows = Vec::with_capacity(specs.len());
    let mut failure = None;
    for (spec, r) in specs.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::error!("{} failed: {e}", spec.experiment_id);
                failure.get_or_insert((spec.experiment_id.clone(), e));
            }
        }
    }
    MapOutcome { rows, failure }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    hex::encode(Sha256::digest(json))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    TableText,
    Csv,
    PlotData,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::TableText => "txt",
            Self::Csv => "csv",
            Self::PlotData => "plot.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

fn fmt_cell(m: &VariantMetrics) -> String {
    match m.ci_half_width {
        Some(h) => format!("{:.3} ± {:.3}", m.mean_f1, h),
        None => format!("{:.3}", m.mean_f1),
    }
}

/// Rows grouped by sample range, ranges in first-appearance order.
pub fn plot_groups(rows: &[MetricsRow]) -> Vec<(String, Vec<&MetricsRow>)> {
    let mut groups: Vec<(String, Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        let label = r.range_label();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, g)) => g.push(r),
            None => groups.push((label, vec![r])),
        }
    }
    groups
}

/// Renders rows as an aligned table (best competing variant wrapped in
/// `*...*`), per-repetition CSV, or range-grouped plot data.
pub fn render_report(rows: &[MetricsRow], format: ReportFormat, meta: &ReportMeta) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::arg("no rows to report"));
    }
    let seeds = meta.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    let mut out = format!("# config_hash: {}\n# seeds: {seeds}\n", meta.config_hash);
    match format {
        ReportFormat::TableText => {
            let mut header = vec!["experiment".to_string(), "fold".into(), "range".into(), "iters".into()];
            header.extend(rows[0].variants.iter().map(|m| m.variant.label()));
            let mut lines = vec![header];
            let mut notes = Vec::new();
            for r in rows {
                let best = r.best();
                let mut line = vec![
                    r.experiment_id.clone(),
                    r.training_fold.to_string(),
                    r.range_label(),
                    r.repetitions.to_string(),
                ];
                for m in &r.variants {
                    let cell = fmt_cell(m);
                    line.push(if best.contains(&m.variant) { format!("*{cell}*") } else { cell });
                }
                if best.len() > 1 {
                    let names = best.iter().map(Variant::label).collect::<Vec<_>>().join(", ");
                    notes.push(format!("{}: tie between {names}", r.experiment_id));
                }
                lines.push(line);
            }
            let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
            let widths: Vec<usize> = (0..cols)
                .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
                .collect();
            for l in &lines {
                let cells: Vec<String> = l
                    .iter()
                    .zip(&widths)
                    .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                    .collect();
                writeln!(out, "{}", cells.join(" | ").trim_end()).expect("string write");
            }
            writeln!(out, "\n* best among student and PI variants (means rounded to 3 decimals)")
                .expect("string write");
            for n in notes {
                writeln!(out, "{n}").expect("string write");
            }
        }
        ReportFormat::Csv => {
            out.push_str("experiment_id,training_fold,range_start,range_end,variant,repetition,seed,f1\n");
            for r in rows {
                for m in &r.variants {
                    for (i, f1) in m.samples.iter().enumerate() {
                        writeln!(
                            out,
                            "{},{},{},{},{},{},{},{}",
                            r.experiment_id,
                            r.training_fold,
                            r.sample_range.0,
                            r.sample_range.1,
                            m.variant.label(),
                            i + 1,
                            r.seeds.get(i).map_or(String::new(), u64::to_string),
                            f1
                        )
                        .expect("string write");
                    }
                }
            }
        }
        ReportFormat::PlotData => {
            out.push_str("group,experiment_id,variant,mean_f1,ci_half_width,best\n");
            for (label, group) in plot_groups(rows) {
                for r in group {
                    let best = r.best();
                    for m in &r.variants {
                        writeln!(
                            out,
                            "{label},{},{},{},{},{}",
                            r.experiment_id,
                            m.variant.label(),
                            m.mean_f1,
                            m.ci_half_width.map_or(String::new(), |h| h.to_string()),
                            u8::from(best.contains(&m.variant))
                        )
                        .expect("string write");
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_report(path: impl AsRef<Path>, rows: &[MetricsRow], format: ReportFormat, meta: &ReportMeta) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(rows, format, meta)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: &[u8]) -> MaskImage {
        MaskImage::new(4, 4, labels.to_vec()).unwrap()
    }

    #[test]
    fn f1_examples() {
        let t = [mask(&[1; 16])];
        assert_eq!(f1_score(&t, &t, F1Mode::Micro).unwrap(), 1.0);
        assert_eq!(f1_score(&[mask(&[0; 16])], &t, F1Mode::Micro).unwrap(), 0.0);
        let empty = mask(&[0; 16]);
        assert_eq!(f1_score(std::slice::from_ref(&empty), std::slice::from_ref(&empty), F1Mode::Micro).unwrap(), 1.0);

        // TP 3, FP 1, FN 2
        let mut p = [0u8; 16];
        let mut g = [0u8; 16];
        p[..4].fill(1);
        g[..3].fill(1);
        g[4..6].fill(1);
        let f = f1_score(&[mask(&p)], &[mask(&g)], F1Mode::Micro).unwrap();
        assert!((f - 6.0 / 9.0).abs() < 1e-15);

        let small = MaskImage::zeros(2, 2);
        assert!(f1_score(&[small], &[mask(&g)], F1Mode::Micro).is_err());
        assert!(f1_score(&[], &[mask(&g)], F1Mode::Micro).is_err());
    }

    #[test]
    fn macro_averages_per_mask() {
        let full = mask(&[1; 16]);
        let empty = mask(&[0; 16]);
        let f = f1_score(&[full.clone(), empty], &[full.clone(), full], F1Mode::Macro).unwrap();
        assert_eq!(f, 0.5);
    }

    #[test]
    fn ci_examples() {
        assert_eq!(confidence_interval_95(&[0.6, 0.6, 0.6]).unwrap(), (0.6, 0.0));
        assert!(confidence_interval_95(&[0.6]).is_err());
    }

    fn row(id: &str, means: &[(Variant, f64)]) -> MetricsRow {
        MetricsRow {
            experiment_id: id.into(),
            training_fold: 1,
            sample_range: (1, 400),
            repetitions: 2,
            seeds: vec![0, 1],
            variants: means
                .iter()
                .map(|&(variant, mean_f1)| VariantMetrics {
                    variant,
                    mean_f1,
                    ci_half_width: Some(0.01),
                    samples: vec![mean_f1, mean_f1],
                })
                .collect(),
        }
    }

    #[test]
    fn best_marker_excludes_teacher_and_marks_ties() {
        let r = row(
            "E1",
            &[
                (Variant::Teacher, 0.9),
                (Variant::Student, 0.55),
                (Variant::Pi { alpha: 0.6 }, 0.65),
            ],
        );
        assert_eq!(r.best(), vec![Variant::Pi { alpha: 0.6 }]);
        let r = row(
            "E2",
            &[
                (Variant::Student, 0.6502),
                (Variant::Pi { alpha: 0.8 }, 0.6498),
                (Variant::Pi { alpha: 0.4 }, 0.61),
            ],
        );
        assert_eq!(r.best(), vec![Variant::Student, Variant::Pi { alpha: 0.8 }]);
        let meta = ReportMeta {
            config_hash: "abc".into(),
            seeds: vec![0, 1],
        };
        let text = render_report(&[r], ReportFormat::TableText, &meta).unwrap();
        assert!(text.starts_with("# config_hash: abc\n# seeds: 0 1\n"));
        assert!(text.contains("*0.650 ± 0.010*"));
        assert!(text.contains("E2: tie between student, pi(0.8)"));
        assert!(render_report(&[], ReportFormat::Csv, &meta).is_err());
    }

    #[test]
    fn full_map_shape() {
        let map = full_map(&ExperimentSpec::default());
        assert_eq!(map.len(), 16);
        assert_eq!(map[0].experiment_id, "E1");
        assert_eq!((map[0].training_fold, map[0].sample_range), (1, (1, 400)));
        assert_eq!((map[4].training_fold, map[4].sample_range), (2, (1, 400)));
        assert_eq!((map[15].training_fold, map[15].sample_range), (4, (1, 1000)));
        assert_eq!(variants_of(&map[0]).len(), 5);
    }
}
