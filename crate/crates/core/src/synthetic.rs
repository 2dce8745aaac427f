//! Deterministic mammogram-like scenes: a soft-edged half-ellipse of tissue
//! on a near-black background with brighter elliptical "tumors" and their
//! exact masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SourceImage;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, MaskImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Gradient,
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub image_size: usize,
    pub patient_count: usize,
    pub images_per_patient: usize,
    /// Inclusive range of tumors per image.
    pub tumor_count_range: (usize, usize),
    /// Inclusive range of tumor semi-axes, pixels.
    pub tumor_axis_range: (usize, usize),
    pub background_texture: Texture,
    /// Intensity added on top of the tissue inside a tumor.
    pub contrast_gap: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            patient_count: 4,
            images_per_patient: 2,
            tumor_count_range: (1, 2),
            tumor_axis_range: (8, 18),
            background_texture: Texture::Speckle,
            contrast_gap: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (amin, amax) = self.tumor_axis_range;
        let (cmin, cmax) = self.tumor_count_range;
        if self.image_size < 8 {
            return Err(Error::arg("image_size must be >= 8"));
        }
        if amin == 0 || amin > amax || 2 * amax >= self.image_size {
            return Err(Error::arg(format!(
                "tumor axes {:?} must be positive and below image_size/2",
                self.tumor_axis_range
            )));
        }
        if cmin > cmax {
            return Err(Error::arg("tumor_count_range min exceeds max"));
        }
        if !(self.contrast_gap > 0.0 && self.contrast_gap <= 1.0) {
            return Err(Error::arg("contrast_gap must lie in (0, 1]"));
        }
        if self.patient_count == 0 || self.images_per_patient == 0 {
            return Err(Error::arg("need at least one patient and one image"));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.004;
const BACKGROUND_NOISE: f64 = 0.008;
const TISSUE: f64 = 0.4;
const EDGE: f64 = 0.04;
/// Breast semi-axes relative to the image side; centered on the left edge.
const BREAST_AX: f64 = 0.92;
const BREAST_AY: f64 = 0.62;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn radius2(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.a).powi(2) + ((y - self.cy) / self.b).powi(2)
    }
}

fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

fn render(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> (GrayImage, MaskImage) {
    let s = spec.image_size;
    let sf = s as f64;
    let breast = Ellipse {
        cx: 0.0,
        cy: sf / 2.0,
        a: BREAST_AX * sf,
        b: BREAST_AY * sf,
    };
    let core = (1.0 - EDGE) * (1.0 - EDGE);

    let count = rng.gen_range(spec.tumor_count_range.0..=spec.tumor_count_range.1);
    let mut tumors = Vec::with_capacity(count);
    while tumors.len() < count {
        let a = rng.gen_range(spec.tumor_axis_range.0..=spec.tumor_axis_range.1) as f64;
        let b = rng.gen_range(spec.tumor_axis_range.0..=spec.tumor_axis_range.1) as f64;
        let cx = rng.gen_range(a..sf - a);
        let cy = rng.gen_range(b..sf - b);
        // the bounding box lies in the (convex) tissue core, so the tumor does
        let corners = [(cx - a, cy - b), (cx + a, cy - b), (cx - a, cy + b), (cx + a, cy + b)];
        if corners.iter().all(|&(x, y)| breast.radius2(x, y) <= core) {
            tumors.push(Ellipse { cx, cy, a, b });
        }
    }

    let mut data = Vec::with_capacity(s * s);
    let mut labels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let noise = rng.gen::<f64>();
            let speckle = rng.gen_range(-0.04..0.04);
            let tissue = match spec.background_texture {
                Texture::Flat => TISSUE,
                Texture::Gradient => TISSUE + 0.05 - 0.1 * px / sf,
                Texture::Speckle => TISSUE + speckle,
            };
            let r = breast.radius2(px, py).sqrt();
            let soft = ((1.0 - r) / EDGE).clamp(0.0, 1.0);
            let in_tumor = tumors.iter().any(|t| t.radius2(px, py) <= 1.0);
            let mut v = BACKGROUND + BACKGROUND_NOISE * noise + tissue * soft;
            if in_tumor {
                v += spec.contrast_gap;
            }
            data.push(quantize16(v));
            labels.push(u8::from(in_tumor));
        }
    }
    (
        GrayImage::new(s, s, data, 16).expect("valid synthetic image"),
        MaskImage::new(s, s, labels).expect("valid synthetic mask"),
    )
}

/// Generates `patient_count * images_per_patient` scenes, patient-major.
/// Patient ids are `P000, P001, ...`; image ids `P000-I00, ...`.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<Vec<SourceImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.patient_count * spec.images_per_patient);
    for p in 0..spec.patient_count {
        for i in 0..spec.images_per_patient {
            let (image, mask) = render(spec, &mut rng);
            out.push(SourceImage {
                image,
                mask,
                patient_id: format!("P{p:03}"),
                image_id: format!("P{p:03}-I{i:02}"),
            });
        }
    }
    Ok(out)
}

/// The tissue region of a generated image: pixels above the background.
pub fn tissue_region(img: &GrayImage) -> Vec<bool> {
    img.data().iter().map(|&v| v > BACKGROUND + BACKGROUND_NOISE).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_tumors_means_empty_masks() {
        let spec = SyntheticSceneSpec {
            tumor_count_range: (0, 0),
            image_size: 64,
            tumor_axis_range: (4, 6),
            ..Default::default()
        };
        for s in generate_scene(&spec).unwrap() {
            assert_eq!(s.mask.tumor_pixels(), 0);
        }
    }

    #[test]
    fn rasterized_area_tracks_ellipse_area() {
        for axis in [8usize, 12, 20] {
            let spec = SyntheticSceneSpec {
                patient_count: 1,
                images_per_patient: 3,
                tumor_count_range: (1, 1),
                tumor_axis_range: (axis, axis),
                seed: axis as u64,
                ..Default::default()
            };
            let analytic = std::f64::consts::PI * (axis * axis) as f64;
            for scene in generate_scene(&spec).unwrap() {
                let count = scene.mask.tumor_pixels() as f64;
                assert!((count - analytic).abs() / analytic < 0.02, "{count} vs {analytic}");
            }
        }
    }

    #[test]
    fn deterministic_and_masks_inside_tissue() {
        let spec = SyntheticSceneSpec::default();
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let tissue = tissue_region(&s.image);
            assert!(s
                .mask
                .labels()
                .iter()
                .zip(&tissue)
                .all(|(&l, &t)| l == 0 || t));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SyntheticSceneSpec {
            tumor_axis_range: (10, 200),
            ..Default::default()
        };
        assert!(generate_scene(&bad).is_err());
        let bad = SyntheticSceneSpec {
            contrast_gap: 0.0,
            ..Default::default()
        };
        assert!(generate_scene(&bad).is_err());
    }
}
