use std::fs;
use std::path::Path;

use objprop_core::io::dataset::Dataset;
use objprop_core::{read_dataset, standard_suite, write_dataset};

/// Instance count of `standard_suite(7)`, recorded at first generation.
const SEED7_INSTANCES: usize = 57;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn seed_7_bundle_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_dataset(&a, &Dataset::from_suite(standard_suite(7).unwrap())).unwrap();
    write_dataset(&b, &Dataset::from_suite(standard_suite(7).unwrap())).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 3 + 20 * 24);
    assert!(fa == fb, "bundles differ");
    assert_eq!(read_dataset(&a).unwrap().videos.len(), 20);
}

#[test]
fn standard_suite_shape_and_golden_count() {
    let suite = standard_suite(7).unwrap();
    assert_eq!(suite.videos.len(), 20);
    for v in &suite.videos {
        assert_eq!((v.width, v.height, v.frames.len()), (128, 128, 24));
        assert!((2..=4).contains(&v.gt.len()));
    }
    assert_eq!(suite.instance_count(), SEED7_INSTANCES);
    assert_ne!(standard_suite(8).unwrap().videos[0].frames, suite.videos[0].frames);
}

#[test]
fn detections_never_exceed_ground_truth() {
    let suite = standard_suite(7).unwrap();
    for (v, dets) in suite.videos.iter().zip(&suite.detections) {
        for (t, list) in dets.iter().enumerate() {
            let visible = v.gt.iter().filter(|g| g.entries.contains_key(&t)).count();
            assert!(list.len() <= visible);
            for d in list {
                let covered = v.gt.iter().filter_map(|g| g.entries.get(&t)).any(|g| {
                    d.mask.intersection_area(&g.mask) == d.mask.area() && d.category == g.category
                });
                assert!(covered, "detection at frame {t} is not inside any ground truth");
            }
        }
    }
}
