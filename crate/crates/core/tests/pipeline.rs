use lupi_core::dataset::{
    build_split, extract_all, extract_patches, mass_area_ratio, read_archive, write_archive, ClassTag,
    ExtractionParams, PatchRecord,
};
use lupi_core::imaging::{GrayImage, MaskImage};
use lupi_core::synthetic::{generate_scene, SyntheticSceneSpec};
use proptest::prelude::*;

fn scenes(patients: usize, seed: u64) -> Vec<lupi_core::dataset::SourceImage> {
    generate_scene(&SyntheticSceneSpec {
        patient_count: patients,
        images_per_patient: 2,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn stub(patient: usize, k: usize) -> PatchRecord {
    PatchRecord {
        image: GrayImage::filled(8, 8, 0.5),
        mask: MaskImage::zeros(8, 8),
        patient_id: format!("P{patient:03}"),
        source_image_id: format!("P{patient:03}-I{k}"),
        origin: (k, 0),
        class_tag: ClassTag::Healthy,
    }
}

#[test]
fn extraction_fills_quotas_inside_the_image() {
    let src = scenes(2, 3);
    let params = ExtractionParams::with_patch_size(32);
    for s in &src {
        let ex = extract_patches(s, &params, 17).unwrap();
        assert_eq!(ex.shortfall.total(), 0);
        let healthy: Vec<_> = ex.patches.iter().filter(|p| p.class_tag == ClassTag::Healthy).collect();
        assert_eq!(healthy.len(), 40);
        assert_eq!(ex.patches.len(), 80);
        for p in &ex.patches {
            let (x, y) = p.origin;
            assert!(x + 32 <= s.image.width() && y + 32 <= s.image.height());
            assert_eq!(p.image, s.image.crop(x, y, 32).unwrap());
            assert_eq!(p.mask, s.mask.crop(x, y, 32).unwrap());
            match p.class_tag {
                ClassTag::Healthy => assert_eq!(p.mask.tumor_pixels(), 0),
                ClassTag::NonHealthy => assert!(mass_area_ratio(&p.mask) >= params.mar),
            }
        }
    }
}

#[test]
fn extraction_depends_on_the_seed_only() {
    let src = scenes(2, 4);
    let params = ExtractionParams {
        h_ppi: 5,
        nh_ppi: 5,
        ..ExtractionParams::with_patch_size(32)
    };
    let a = extract_all(&src, &params, 1).unwrap();
    let b = extract_all(&src, &params, 1).unwrap();
    let c = extract_all(&src, &params, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn unreachable_quota_is_a_shortfall_not_an_error() {
    let src = scenes(1, 5);
    let params = ExtractionParams {
        h_ppi: 2,
        nh_ppi: 2,
        mar: 1.0,
        max_attempts_per_patch: 5,
        ..ExtractionParams::with_patch_size(64)
    };
    let (patches, shortfall) = extract_all(&src, &params, 0).unwrap();
    assert_eq!(shortfall.non_healthy, 2 * src.len());
    assert!(patches.iter().all(|p| p.class_tag == ClassTag::Healthy));
}

#[test]
fn archive_roundtrip_preserves_patches() {
    let src = scenes(1, 6);
    let params = ExtractionParams {
        h_ppi: 3,
        nh_ppi: 3,
        ..ExtractionParams::with_patch_size(32)
    };
    let (patches, _) = extract_all(&src, &params, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_archive(dir.path(), &patches, Some(&params), Some(8)).unwrap();
    let (manifest, back) = read_archive(dir.path()).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(manifest.params, Some(params));
    assert_eq!(back, patches);
}

#[test]
fn full_scale_split_sizes() {
    // 88 train patients yielding 4500 patches, 20 test patients yielding 1128
    let mut patches = Vec::new();
    for p in 0..108 {
        let n = match p {
            0..=75 => 51,
            76..=87 => 52,
            88..=99 => 56,
            _ => 57,
        };
        patches.extend((0..n).map(|k| stub(p, k)));
    }
    let split = build_split(patches, 88, 4, None).unwrap();
    assert_eq!(split.train_patches.len(), 4500);
    assert_eq!(split.test_patches.len(), 1128);
    assert!(split.folds.iter().all(|f| f.len() == 1125));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_patient_disjoint_and_complete(
        counts in prop::collection::vec(3usize..6, 2..12),
        train_frac in 0.1f64..0.9,
        folds in 1usize..4,
        shuffle in prop::option::of(any::<u64>()),
    ) {
        let patients = counts.len();
        let train = ((patients as f64 * train_frac) as usize).clamp(1, patients - 1);
        let mut patches = Vec::new();
        // interleave patients so grouping is exercised
        for k in 0..*counts.iter().max().unwrap() {
            for (p, &c) in counts.iter().enumerate() {
                if k < c {
                    patches.push(stub(p, k));
                }
            }
        }
        let total = patches.len();
        let split = build_split(patches, train, folds, shuffle).unwrap();
        let a = split.train_patients();
        let b = split.test_patients();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len(), train);
        prop_assert_eq!(split.train_patches.len() + split.test_patches.len(), total);
        let sizes: Vec<usize> = split.folds.iter().map(|f| f.len()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), split.train_patches.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for w in split.train_patches.windows(2) {
            // each patient forms one contiguous block
            if w[0].patient_id != w[1].patient_id {
                prop_assert!(!split.train_patches.iter().skip_while(|p| p.patient_id != w[1].patient_id)
                    .any(|p| p.patient_id == w[0].patient_id));
            }
        }
    }
}
