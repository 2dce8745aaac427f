//! Grayscale rasters, binary masks, raster I/O and the two enhancement
//! filters (histogram equalization, percentile contrast stretch) that make up
//! the privileged teacher channels.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bin count used by [`histogram_equalize`] regardless of source depth.
pub const EQUALIZATION_BINS: usize = 256;

/// Default lower/upper percentiles of the contrast stretch.
pub const DEFAULT_P_LOW: f64 = 2.0;
pub const DEFAULT_P_HIGH: f64 = 98.0;

/// Row-major grayscale image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    source_bit_depth: u8,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, source_bit_depth: u8) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if source_bit_depth != 8 && source_bit_depth != 16 {
            return Err(Error::Format(format!(
                "unsupported bit depth {source_bit_depth}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
            source_bit_depth,
        })
    }

    /// Uniform image, 8-bit provenance.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
            source_bit_depth: 8,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn source_bit_depth(&self) -> u8 {
        self.source_bit_depth
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Copies the `size`x`size` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<Self> {
        if x + size > self.width || y + size > self.height {
            return Err(Error::arg(format!(
                "crop ({x},{y})+{size} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(size * size);
        for row in y..y + size {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + size]);
        }
        Ok(Self {
            width: size,
            height: size,
            data,
            source_bit_depth: self.source_bit_depth,
        })
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data,
            source_bit_depth: self.source_bit_depth,
        }
    }
}

/// Row-major binary annotation: 0 = healthy tissue, 1 = tumor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "mask has {} labels, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::arg("mask labels must be 0 or 1"));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn tumor_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<Self> {
        if x + size > self.width || y + size > self.height {
            return Err(Error::arg(format!(
                "crop ({x},{y})+{size} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut labels = Vec::with_capacity(size * size);
        for row in y..y + size {
            let start = row * self.width + x;
            labels.extend_from_slice(&self.labels[start..start + size]);
        }
        Ok(Self {
            width: size,
            height: size,
            labels,
        })
    }
}

/// Raster container chosen from the file extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RasterFormat {
    Png,
    Pgm,
}

impl RasterFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("png") => Ok(RasterFormat::Png),
            Some("pgm") => Ok(RasterFormat::Pgm),
            other => Err(Error::Format(format!(
                "unsupported raster extension {other:?} for {}",
                path.display()
            ))),
        }
    }

    fn image_format(self) -> image::ImageFormat {
        match self {
            RasterFormat::Png => image::ImageFormat::Png,
            RasterFormat::Pgm => image::ImageFormat::Pnm,
        }
    }
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    let format = RasterFormat::from_path(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, format.image_format())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads an 8- or 16-bit grayscale PNG/PGM, dividing by `2^depth - 1`.
pub fn load_gray_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match open_raster(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            GrayImage::new(w as usize, h as usize, data, 8)
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect();
            GrayImage::new(w as usize, h as usize, data, 16)
        }
        other => Err(Error::Format(format!(
            "{}: expected 8/16-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes `img` at its source bit depth. Intensities are quantized by
/// rounding, so images loaded from disk re-encode bit-exactly.
pub fn save_gray_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = RasterFormat::from_path(path)?;
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match img.source_bit_depth {
        8 => {
            let raw: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).unwrap())
        }
        _ => {
            let raw: Vec<u16> = img
                .data
                .iter()
                .map(|v| (v * 65535.0).round() as u16)
                .collect();
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).unwrap())
        }
    };
    dynamic
        .save_with_format(path, format.image_format())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads a mask raster; any nonzero pixel is tumor.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    let (w, h, labels) = match open_raster(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (w, h, buf.into_raw().into_iter().map(|v| u8::from(v != 0)).collect())
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            (w, h, buf.into_raw().into_iter().map(|v| u8::from(v != 0)).collect())
        }
        other => {
            return Err(Error::Format(format!(
                "{}: mask must be grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    MaskImage::new(w as usize, h as usize, labels)
}

/// Writes a mask as an 8-bit raster with tumor pixels at 255.
pub fn save_mask(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = RasterFormat::from_path(path)?;
    let raw: Vec<u8> = mask.labels.iter().map(|&l| l * 255).collect();
    let buf =
        ImageBuffer::<Luma<u8>, _>::from_raw(mask.width as u32, mask.height as u32, raw).unwrap();
    DynamicImage::ImageLuma8(buf)
        .save_with_format(path, format.image_format())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Histogram equalization over [`EQUALIZATION_BINS`] bins.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    histogram_equalize_bins(img, EQUALIZATION_BINS)
}

/// Maps every pixel to the normalized cumulative count of its bin.
pub fn histogram_equalize_bins(img: &GrayImage, bins: usize) -> GrayImage {
    assert!(bins > 0, "bin count must be positive");
    let mut hist = vec![0usize; bins];
    for &v in &img.data {
        hist[bin_of(v, bins)] += 1;
    }
    let total = img.data.len() as f64;
    let mut running = 0usize;
    let cdf: Vec<f64> = hist
        .iter()
        .map(|&count| {
            running += count;
            running as f64 / total
        })
        .collect();
    img.with_data(img.data.iter().map(|&v| cdf[bin_of(v, bins)]).collect())
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Output of [`adjust_contrast`]; `degenerate` is set when the two
/// percentiles coincide and the image was zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastStretch {
    pub image: GrayImage,
    pub degenerate: bool,
}

/// Linear stretch taking the `p_low` percentile to 0 and the `p_high`
/// percentile to 1, clamping outside values.
pub fn adjust_contrast(img: &GrayImage, p_low: f64, p_high: f64) -> Result<ContrastStretch> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(Error::arg(format!(
            "percentiles must satisfy 0 <= p_low < p_high <= 100, got {p_low}, {p_high}"
        )));
    }
    let mut sorted = img.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, p_low);
    let hi = percentile(&sorted, p_high);
    if hi <= lo {
        log::warn!("degenerate contrast stretch: percentile range collapsed at {lo}");
        return Ok(ContrastStretch {
            image: img.with_data(vec![0.0; img.data.len()]),
            degenerate: true,
        });
    }
    let span = hi - lo;
    let data = img
        .data
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect();
    Ok(ContrastStretch {
        image: img.with_data(data),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> GrayImage {
        GrayImage::new(values.len(), 1, values.to_vec(), 8).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3], 8).is_err());
        assert!(GrayImage::new(1, 1, vec![1.5], 8).is_err());
        assert!(GrayImage::new(1, 1, vec![0.5], 12).is_err());
        assert!(MaskImage::new(1, 1, vec![2]).is_err());
    }

    #[test]
    fn equalize_constant_image_maps_to_one() {
        let out = histogram_equalize(&GrayImage::filled(4, 3, 0.5));
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equalize_two_pixels() {
        let out = histogram_equalize(&row(&[0.0, 1.0]));
        assert_eq!(out.data(), &[0.5, 1.0]);
    }

    #[test]
    fn equalize_uniform_histogram_is_near_identity() {
        let values: Vec<f64> = (0..256).map(|k| k as f64 / 255.0).collect();
        let img = GrayImage::new(16, 16, values.clone(), 8).unwrap();
        let out = histogram_equalize(&img);
        // brute-force CDF: fraction of pixels whose bin is <= this pixel's bin
        for (i, &v) in values.iter().enumerate() {
            let b = bin_of(v, 256);
            let cdf = values.iter().filter(|&&u| bin_of(u, 256) <= b).count() as f64 / 256.0;
            assert_eq!(out.data()[i], cdf);
            assert!((out.data()[i] - v).abs() <= 1.0 / 256.0 + 1e-15);
        }
    }

    #[test]
    fn contrast_identity_and_linear_map() {
        let img = row(&[0.0, 0.25, 1.0]);
        assert_eq!(adjust_contrast(&img, 0.0, 100.0).unwrap().image, img);

        let out = adjust_contrast(&row(&[0.2, 0.4, 0.6]), 0.0, 100.0).unwrap();
        assert!(!out.degenerate);
        let expected = [0.0, 0.5, 1.0];
        for (a, b) in out.image.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contrast_degenerate_zeroes_image() {
        let out = adjust_contrast(&GrayImage::filled(3, 3, 0.4), 2.0, 98.0).unwrap();
        assert!(out.degenerate);
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrast_rejects_bad_percentiles() {
        let img = row(&[0.1, 0.2]);
        assert!(adjust_contrast(&img, 50.0, 50.0).is_err());
        assert!(adjust_contrast(&img, -1.0, 50.0).is_err());
        assert!(adjust_contrast(&img, 10.0, 101.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.0), 0.0);
        assert_eq!(percentile(&s, 100.0), 4.0);
        assert_eq!(percentile(&s, 50.0), 2.0);
        assert!((percentile(&s, 10.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn eight_bit_extremes_and_sixteen_bit_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.png");
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(2, 1, vec![0u8, 255]).unwrap();
        buf.save(&p8).unwrap();
        let img = load_gray_image(&p8).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert_eq!(img.source_bit_depth(), 8);

        let p16 = dir.path().join("b.png");
        let buf = ImageBuffer::<Luma<u16>, _>::from_raw(1, 1, vec![32767u16]).unwrap();
        buf.save(&p16).unwrap();
        let img = load_gray_image(&p16).unwrap();
        assert_eq!(img.source_bit_depth(), 16);
        assert_eq!(img.data()[0], 32767.0 / 65535.0);
        assert!((img.data()[0] - 0.49999).abs() < 1e-5);
    }

    #[test]
    fn color_raster_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::RgbImage::new(2, 2).save(&p).unwrap();
        assert!(matches!(load_gray_image(&p), Err(Error::Format(_))));
        assert!(matches!(
            load_gray_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        assert!(matches!(
            load_gray_image(dir.path().join("x.tif")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn mask_nonzero_is_tumor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        ImageBuffer::<Luma<u8>, _>::from_raw(3, 1, vec![0u8, 1, 200])
            .unwrap()
            .save(&p)
            .unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.labels(), &[0, 1, 1]);
        let q = dir.path().join("m2.pgm");
        save_mask(&m, &q).unwrap();
        assert_eq!(load_mask(&q).unwrap(), m);
    }

    fn raw_roundtrip(depth: u8, ext: &str, raw: Vec<u16>) {
        let dir = tempfile::tempdir().unwrap();
        let max = if depth == 8 { 255.0 } else { 65535.0 };
        let n = raw.len();
        let img = GrayImage::new(n, 1, raw.iter().map(|&v| v as f64 / max).collect(), depth)
            .unwrap();
        let p = dir.path().join(format!("r.{ext}"));
        save_gray_image(&img, &p).unwrap();
        let back = load_gray_image(&p).unwrap();
        assert_eq!(back, img);
        let q = dir.path().join(format!("s.{ext}"));
        save_gray_image(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn raster_roundtrip_is_bit_exact(
            raw8 in prop::collection::vec(0u16..=255, 1..40),
            raw16 in prop::collection::vec(0u16..=65535, 1..40),
        ) {
            raw_roundtrip(8, "png", raw8.clone());
            raw_roundtrip(8, "pgm", raw8);
            raw_roundtrip(16, "png", raw16.clone());
            raw_roundtrip(16, "pgm", raw16);
        }

        #[test]
        fn filters_preserve_shape_range_and_equalize_is_monotone(
            w in 1usize..12, h in 1usize..12, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
            let img = GrayImage::new(w, h, data, 16).unwrap();
            let eq = histogram_equalize(&img);
            let st = adjust_contrast(&img, DEFAULT_P_LOW, DEFAULT_P_HIGH).unwrap().image;
            for out in [&eq, &st] {
                prop_assert_eq!((out.width(), out.height()), (w, h));
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            for i in 0..w * h {
                for j in 0..w * h {
                    if img.data()[i] <= img.data()[j] {
                        prop_assert!(eq.data()[i] <= eq.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn full_range_stretch_is_identity(inner in prop::collection::vec(0.0f64..=1.0, 0..30)) {
            let mut data = vec![0.0, 1.0];
            data.extend(inner);
            let img = GrayImage::new(data.len(), 1, data, 16).unwrap();
            let out = adjust_contrast(&img, 0.0, 100.0).unwrap().image;
            for (a, b) in out.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
