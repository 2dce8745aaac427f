//! Validity-gated random patch extraction, teacher-channel enhancement,
//! patient-disjoint splits and the on-disk patch archive.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    adjust_contrast, histogram_equalize, load_gray_image, load_mask, save_gray_image, save_mask,
    GrayImage, MaskImage, DEFAULT_P_HIGH, DEFAULT_P_LOW,
};

/// Patch extraction parameters. Defaults are the full-scale values
/// (40 + 40 patches per image, 1024 px patches).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionParams {
    /// Healthy patches per image.
    pub h_ppi: usize,
    /// Non-healthy patches per image.
    pub nh_ppi: usize,
    /// Minimum tumor fraction of a non-healthy patch.
    pub mar: f64,
    /// Minimum tissue fraction of any patch.
    pub bar: f64,
    pub patch_size: usize,
    pub max_attempts_per_patch: usize,
    /// Pixels brighter than this count as breast tissue.
    pub background_threshold: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            h_ppi: 40,
            nh_ppi: 40,
            mar: 0.01,
            bar: 0.8,
            patch_size: 1024,
            max_attempts_per_patch: 200,
            background_threshold: 0.02,
        }
    }
}

impl ExtractionParams {
    /// Default ratios and counts with a smaller patch side.
    pub fn with_patch_size(patch_size: usize) -> Self {
        Self {
            patch_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mar) {
            return Err(Error::arg(format!("mar {} outside [0, 1]", self.mar)));
        }
        if !(0.0..=1.0).contains(&self.bar) {
            return Err(Error::arg(format!("bar {} outside [0, 1]", self.bar)));
        }
        if !(0.0..=1.0).contains(&self.background_threshold) {
            return Err(Error::arg("background_threshold outside [0, 1]"));
        }
        if self.patch_size == 0 {
            return Err(Error::arg("patch_size must be >= 1"));
        }
        if self.max_attempts_per_patch == 0 {
            return Err(Error::arg("max_attempts_per_patch must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassTag {
    Healthy,
    NonHealthy,
}

/// A full-size image with its annotation and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pub image: GrayImage,
    pub mask: MaskImage,
    pub patient_id: String,
    pub image_id: String,
}

/// A validated square crop and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image: GrayImage,
    pub mask: MaskImage,
    pub patient_id: String,
    pub source_image_id: String,
    /// Top-left `(x, y)` in the source image.
    pub origin: (usize, usize),
    pub class_tag: ClassTag,
}

/// Three stacked channels (raw, equalized, stretched) and the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedPatch {
    pub channels: [GrayImage; 3],
    pub mask: MaskImage,
}

/// Patches the extractor could not find within its attempt budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub healthy: usize,
    pub non_healthy: usize,
}

impl Shortfall {
    pub fn total(&self) -> usize {
        self.healthy + self.non_healthy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub patches: Vec<PatchRecord>,
    pub shortfall: Shortfall,
}

/// Fraction of tumor pixels.
pub fn mass_area_ratio(mask: &MaskImage) -> f64 {
    let total = mask.labels().len();
    if total == 0 {
        return 0.0;
    }
    mask.tumor_pixels() as f64 / total as f64
}

/// Fraction of pixels brighter than `background_threshold`.
pub fn breast_area_ratio(img: &GrayImage, background_threshold: f64) -> f64 {
    let total = img.data().len();
    if total == 0 {
        return 0.0;
    }
    img.data().iter().filter(|&&v| v > background_threshold).count() as f64 / total as f64
}

/// Summed-area table for O(1) window counts.
struct Integral {
    width: usize,
    sums: Vec<u64>,
}

impl Integral {
    fn new(width: usize, height: usize, hit: impl Fn(usize) -> bool) -> Self {
        let stride = width + 1;
        let mut sums = vec![0u64; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0u64;
            for x in 0..width {
                row += u64::from(hit(y * width + x));
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { width, sums }
    }

    fn window(&self, x: usize, y: usize, size: usize) -> u64 {
        let s = self.width + 1;
        let (x1, y1) = (x + size, y + size);
        self.sums[y1 * s + x1] + self.sums[y * s + x] - self.sums[y * s + x1] - self.sums[y1 * s + x]
    }
}

/// 64-bit FNV-1a, used to derive per-image RNG streams.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(image_id.as_bytes()));
    rng
}

/// Randomly locates up to `h_ppi` healthy and `nh_ppi` non-healthy patches.
///
/// Candidate origins are drawn uniformly over positions that keep the patch
/// inside the image. A healthy patch has no tumor pixel; a non-healthy one
/// reaches `mar`; both need `bar` tissue coverage. Each class gets
/// `max_attempts_per_patch * requested` draws; whatever is still missing
/// is reported as shortfall. The RNG stream depends only on `(seed,
/// image_id)`.
pub fn extract_patches(
    source: &SourceImage,
    params: &ExtractionParams,
    seed: u64,
) -> Result<Extraction> {
    params.validate()?;
    let (img, mask) = (&source.image, &source.mask);
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::arg(format!(
            "image {}x{} and mask {}x{} differ",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    let ps = params.patch_size;
    if img.width() < ps || img.height() < ps {
        return Err(Error::arg(format!(
            "image {}x{} smaller than patch size {ps}",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let tumor = Integral::new(w, h, |i| mask.labels()[i] == 1);
    let tissue = Integral::new(w, h, |i| img.data()[i] > params.background_threshold);
    let area = (ps * ps) as f64;
    let mut rng = image_rng(seed, &source.image_id);
    let mut used = HashSet::new();
    let mut patches = Vec::with_capacity(params.h_ppi + params.nh_ppi);
    let mut shortfall = Shortfall::default();

    for (class, wanted) in [
        (ClassTag::Healthy, params.h_ppi),
        (ClassTag::NonHealthy, params.nh_ppi),
    ] {
        let budget = params.max_attempts_per_patch.saturating_mul(wanted);
        let mut found = 0;
        let mut attempts = 0;
        while found < wanted && attempts < budget {
            attempts += 1;
            let x = rng.gen_range(0..=w - ps);
            let y = rng.gen_range(0..=h - ps);
            if used.contains(&(x, y)) {
                continue;
            }
            if (tissue.window(x, y, ps) as f64) / area < params.bar {
                continue;
            }
            let tumor_px = tumor.window(x, y, ps);
            let ok = match class {
                ClassTag::Healthy => tumor_px == 0,
                ClassTag::NonHealthy => tumor_px as f64 / area >= params.mar,
            };
            if !ok {
                continue;
            }
            used.insert((x, y));
            patches.push(PatchRecord {
                image: img.crop(x, y, ps)?,
                mask: mask.crop(x, y, ps)?,
                patient_id: source.patient_id.clone(),
                source_image_id: source.image_id.clone(),
                origin: (x, y),
                class_tag: class,
            });
            found += 1;
        }
        match class {
            ClassTag::Healthy => shortfall.healthy = wanted - found,
            ClassTag::NonHealthy => shortfall.non_healthy = wanted - found,
        }
    }
    if shortfall.total() > 0 {
        log::warn!(
            "image {}: shortfall of {} healthy and {} non-healthy patches",
            source.image_id,
            shortfall.healthy,
            shortfall.non_healthy
        );
    }
    Ok(Extraction { patches, shortfall })
}

/// Extracts from many images in parallel; output order follows `sources`.
pub fn extract_all(
    sources: &[SourceImage],
    params: &ExtractionParams,
    seed: u64,
) -> Result<(Vec<PatchRecord>, Shortfall)> {
    use rayon::prelude::*;
    let parts: Vec<Extraction> = sources
        .par_iter()
        .map(|s| extract_patches(s, params, seed))
        .collect::<Result<_>>()?;
    let mut all = Vec::new();
    let mut shortfall = Shortfall::default();
    for part in parts {
        shortfall.healthy += part.shortfall.healthy;
        shortfall.non_healthy += part.shortfall.non_healthy;
        all.extend(part.patches);
    }
    Ok((all, shortfall))
}

/// Percentiles of the contrast-stretch channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceParams {
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        Self {
            p_low: DEFAULT_P_LOW,
            p_high: DEFAULT_P_HIGH,
        }
    }
}

/// Stacks `[raw, histogram_equalize(raw), adjust_contrast(raw)]`.
pub fn enhance_patch(p: &PatchRecord) -> EnhancedPatch {
    enhance_patch_with(p, &EnhanceParams::default()).expect("default percentiles are valid")
}

pub fn enhance_patch_with(p: &PatchRecord, params: &EnhanceParams) -> Result<EnhancedPatch> {
    let stretched = adjust_contrast(&p.image, params.p_low, params.p_high)?;
    Ok(EnhancedPatch {
        channels: [
            p.image.clone(),
            histogram_equalize(&p.image),
            stretched.image,
        ],
        mask: p.mask.clone(),
    })
}

/// Patient-disjoint train/test split with the train set cut into folds.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_patches: Vec<PatchRecord>,
    pub test_patches: Vec<PatchRecord>,
    /// Contiguous index ranges into `train_patches`.
    pub folds: Vec<Range<usize>>,
}

impl DatasetSplit {
    pub fn fold(&self, k: usize) -> &[PatchRecord] {
        &self.train_patches[self.folds[k].clone()]
    }

    pub fn train_patients(&self) -> BTreeSet<&str> {
        self.train_patches.iter().map(|p| p.patient_id.as_str()).collect()
    }

    pub fn test_patients(&self) -> BTreeSet<&str> {
        self.test_patches.iter().map(|p| p.patient_id.as_str()).collect()
    }
}

/// Splits `len` items into `k` contiguous blocks whose sizes differ by at
/// most one (larger blocks first).
pub fn partition_blocks(len: usize, k: usize) -> Vec<Range<usize>> {
    let (base, extra) = (len / k, len % k);
    let mut start = 0;
    (0..k)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Sends every patch of the first `train_patient_count` patients (in order
/// of first appearance, or a seeded shuffle of that order) to the train
/// set and the rest to the test set.
pub fn build_split(
    patches: Vec<PatchRecord>,
    train_patient_count: usize,
    fold_count: usize,
    shuffle_seed: Option<u64>,
) -> Result<DatasetSplit> {
    if patches.is_empty() {
        return Err(Error::arg("build_split: no patches"));
    }
    if fold_count == 0 {
        return Err(Error::arg("build_split: fold_count must be >= 1"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for p in &patches {
        if seen.insert(p.patient_id.clone()) {
            order.push(p.patient_id.clone());
        }
    }
    if train_patient_count == 0 || train_patient_count >= order.len() {
        return Err(Error::arg(format!(
            "build_split: need 0 < train patients ({train_patient_count}) < distinct patients ({})",
            order.len()
        )));
    }
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let train_ids: HashSet<&str> = order[..train_patient_count].iter().map(String::as_str).collect();
    let rank: HashMap<&str, usize> = order.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut indexed: Vec<(usize, usize, PatchRecord)> = Vec::with_capacity(patches.len());
    for (i, p) in patches.into_iter().enumerate() {
        indexed.push((rank[p.patient_id.as_str()], i, p));
    }
    // patient blocks become contiguous; order within a patient is preserved
    indexed.sort_by_key(|(r, i, _)| (*r, *i));
    let (train, test): (Vec<_>, Vec<_>) = indexed
        .into_iter()
        .map(|(_, _, p)| p)
        .partition(|p| train_ids.contains(p.patient_id.as_str()));
    if fold_count > train.len() {
        return Err(Error::arg(format!(
            "build_split: {fold_count} folds for {} train patches",
            train.len()
        )));
    }
    Ok(DatasetSplit {
        folds: partition_blocks(train.len(), fold_count),
        train_patches: train,
        test_patches: test,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_file: String,
    pub mask_file: String,
    pub patient_id: String,
    pub source_image_id: String,
    pub origin: [usize; 2],
    pub class_tag: ClassTag,
}

/// Provenance of one archive directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub params: Option<ExtractionParams>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub patches: Vec<ManifestEntry>,
}

/// Writes patches as `pNNNNN_image.png` / `pNNNNN_mask.png` plus a
/// manifest into `dir` (created if needed).
pub fn write_archive(
    dir: impl AsRef<Path>,
    patches: &[PatchRecord],
    params: Option<&ExtractionParams>,
    seed: Option<u64>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        let image_file = format!("p{i:05}_image.png");
        let mask_file = format!("p{i:05}_mask.png");
        save_gray_image(&p.image, dir.join(&image_file))?;
        save_mask(&p.mask, dir.join(&mask_file))?;
        entries.push(ManifestEntry {
            image_file,
            mask_file,
            patient_id: p.patient_id.clone(),
            source_image_id: p.source_image_id.clone(),
            origin: [p.origin.0, p.origin.1],
            class_tag: p.class_tag,
        });
    }
    let manifest = Manifest {
        params: params.cloned(),
        seed,
        patches: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })
}

/// Loads every patch listed in `dir`'s manifest.
pub fn read_archive(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<PatchRecord>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut patches = Vec::with_capacity(manifest.patches.len());
    for e in &manifest.patches {
        let image = load_gray_image(dir.join(&e.image_file))?;
        let mask = load_mask(dir.join(&e.mask_file))?;
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(Error::Corrupt {
                path: dir.join(&e.image_file),
                reason: "image and mask sizes differ".into(),
            });
        }
        patches.push(PatchRecord {
            image,
            mask,
            patient_id: e.patient_id.clone(),
            source_image_id: e.source_image_id.clone(),
            origin: (e.origin[0], e.origin[1]),
            class_tag: e.class_tag,
        });
    }
    Ok((manifest, patches))
}

pub const SCENES_FILE: &str = "scenes.json";

/// One full-size image and its mask in a scene directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub image_file: String,
    pub mask_file: String,
    pub patient_id: String,
    pub image_id: String,
}

/// Writes full-size images (`sNNNN_image.png`, 16-bit) and masks plus
/// `scenes.json`.
pub fn write_sources(dir: impl AsRef<Path>, sources: &[SourceImage]) -> Result<Vec<SceneEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let image_file = format!("s{i:04}_image.png");
        let mask_file = format!("s{i:04}_mask.png");
        save_gray_image(&s.image, dir.join(&image_file))?;
        save_mask(&s.mask, dir.join(&mask_file))?;
        entries.push(SceneEntry {
            image_file,
            mask_file,
            patient_id: s.patient_id.clone(),
            image_id: s.image_id.clone(),
        });
    }
    let path = dir.join(SCENES_FILE);
    let text = serde_json::to_string_pretty(&entries).expect("scene list serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Loads the images listed in `dir/scenes.json`. Any PNG/PGM pair at 8 or
/// 16 bits can be listed, so user data enters the same way.
pub fn read_sources(dir: impl AsRef<Path>) -> Result<Vec<SourceImage>> {
    let dir = dir.as_ref();
    let path = dir.join(SCENES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<SceneEntry> = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    entries
        .iter()
        .map(|e| {
            Ok(SourceImage {
                image: load_gray_image(dir.join(&e.image_file))?,
                mask: load_mask(dir.join(&e.mask_file))?,
                patient_id: e.patient_id.clone(),
                image_id: e.image_id.clone(),
            })
        })
        .collect()
}
