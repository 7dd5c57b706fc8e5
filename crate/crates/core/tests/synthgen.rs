use std::collections::BTreeMap;

use dcis_core::datamodel::{consensus_of, DatasetManifest};
use dcis_core::patchkit::RegionImage;
use dcis_core::seed;
use dcis_core::synthgen::{generate_dataset, generate_lesion_image, read_truth_csv, SynthSpec};
use dcis_core::Grade;

fn is_dark(img: &RegionImage, x: usize, y: usize) -> bool {
    img.at(x, y, 0) < 150 && img.at(x, y, 1) < 120
}

/// Mean equivalent radius sqrt(area / pi) of 4-connected dark blobs.
fn mean_blob_radius(img: &RegionImage) -> f64 {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut radii = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !is_dark(img, start % w, start / w) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0usize;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |nx: usize, ny: usize| {
                let j = ny * w + nx;
                if !seen[j] && is_dark(img, nx, ny) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        if area >= 3 {
            radii.push((area as f64 / std::f64::consts::PI).sqrt());
        }
    }
    radii.iter().sum::<f64>() / radii.len().max(1) as f64
}

fn classify(radius: f64) -> Grade {
    if radius < 5.0 {
        Grade::ONE
    } else if radius < 7.5 {
        Grade::TWO
    } else {
        Grade::THREE
    }
}

#[test]
fn grade_one_and_three_blob_sizes_differ() {
    let r1 = mean_blob_radius(&generate_lesion_image(Grade::ONE, 300, 0.88, &mut seed::stream(5)).unwrap().image);
    let r3 = mean_blob_radius(&generate_lesion_image(Grade::THREE, 300, 0.88, &mut seed::stream(5)).unwrap().image);
    assert!(r3 / r1 >= 1.8, "radius ratio {r3} / {r1}");
}

#[test]
fn grade_three_has_dark_free_center() {
    let l = generate_lesion_image(Grade::THREE, 400, 0.88, &mut seed::stream(8)).unwrap();
    let c = l.image.width / 2;
    for y in c - 20..c + 20 {
        for x in c - 20..c + 20 {
            assert!(!is_dark(&l.image, x, y));
        }
    }
    let l1 = generate_lesion_image(Grade::ONE, 400, 0.88, &mut seed::stream(8)).unwrap();
    let dark = (c - 20..c + 20)
        .flat_map(|y| (c - 20..c + 20).map(move |x| (x, y)))
        .filter(|&(x, y)| is_dark(&l1.image, x, y))
        .count();
    assert!(dark > 100);
}

#[test]
fn blob_radius_classifier_recovers_grade() {
    let mut correct = 0;
    let mut total = 0;
    for (i, g) in Grade::ALL.iter().cycle().take(60).enumerate() {
        let size = 256 + (i * 37) % 400;
        let l = generate_lesion_image(*g, size, 0.88, &mut seed::stream(100 + i as u64)).unwrap();
        correct += usize::from(classify(mean_blob_radius(&l.image)) == *g);
        total += 1;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn minimal_dataset_loads() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_patients: 1,
        lesions_per_patient: (1, 1),
        lesion_size_px: (64, 64),
        ..Default::default()
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    assert_eq!(ds.manifest.lesions.len(), 1);
    assert_eq!(ds.manifest.patients.len(), 1);
    let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.lesions[0].lesion_id, ds.manifest.lesions[0].lesion_id);
    assert_eq!(read_truth_csv(&dir.path().join("truth.csv")).unwrap(), ds.truth);
}

#[test]
fn noiseless_dataset_propagates_truth_and_is_reproducible() {
    let spec = SynthSpec {
        n_patients: 6,
        lesions_per_patient: (1, 3),
        observer_error_rate: 0.0,
        lesion_size_px: (48, 96),
        seed: 11,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = generate_dataset(&spec, a.path()).unwrap();
    let db = generate_dataset(&spec, b.path()).unwrap();
    for l in &da.manifest.lesions {
        let label = consensus_of(l.observer_grades());
        assert_eq!(label.agreement_count, 3);
        assert_eq!(label.consensus, da.truth[&l.lesion_id]);
    }
    assert_eq!(da.truth, db.truth);
    for l in &da.manifest.lesions {
        let name = l.image.file_name().unwrap();
        assert_eq!(
            std::fs::read(a.path().join("images").join(name)).unwrap(),
            std::fs::read(b.path().join("images").join(name)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(a.path().join("truth.csv")).unwrap(),
        std::fs::read(b.path().join("truth.csv")).unwrap()
    );
}

/// Lesion grade histogram at 50 patients. Lesion size does not affect the
/// grade draws, so tiny images keep this fast.
#[test]
fn lesion_histogram_tracks_grade_mix() {
    for s in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_patients: 50,
            lesion_size_px: (32, 32),
            seed: s,
            ..Default::default()
        };
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        let mut hist: BTreeMap<Grade, usize> = BTreeMap::new();
        for g in ds.truth.values() {
            *hist.entry(*g).or_default() += 1;
        }
        let n = ds.truth.len() as f64;
        for (i, g) in Grade::ALL.iter().enumerate() {
            let share = *hist.get(g).unwrap_or(&0) as f64 / n;
            assert!(
                (share - spec.grade_mix[i]).abs() <= 0.05,
                "seed {s}: grade {g} share {share:.3} vs {:.3}",
                spec.grade_mix[i]
            );
        }
    }
}
