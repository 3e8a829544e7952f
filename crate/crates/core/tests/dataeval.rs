mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use ssrc_core::dataeval::*;
use ssrc_core::{Error, Tensor};

fn shares(spec: &DomainSpec, seeds: std::ops::Range<u64>) -> [f64; N_CLASSES] {
    let mut c = [0usize; N_CLASSES];
    let mut total = 0;
    for s in seeds {
        let sc = generate_scene(spec, s, 64, 64).unwrap();
        for (a, b) in c.iter_mut().zip(sc.class_counts()) {
            *a += b;
        }
        total += 64 * 64;
    }
    c.map(|v| v as f64 / total as f64)
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(&DomainSpec::toy_source(), 42, 32, 48).unwrap();
    let b = generate_scene(&DomainSpec::toy_source(), 42, 32, 48).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels.len(), 32 * 48);
    assert_eq!(a.image.shape(), &[3, 32, 48]);
    assert!(a.image.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn frequencies_track_the_spec() {
    for spec in [DomainSpec::toy_source(), DomainSpec::toy_target()] {
        let f100 = shares(&spec, 0..100);
        let f1000 = shares(&spec, 0..1000);
        for k in 0..N_CLASSES {
            let want = spec.frequencies[k];
            assert!((f100[k] - want).abs() <= 0.10 * want, "{k}: {} vs {want}", f100[k]);
            assert!((f1000[k] - want).abs() <= 0.05 * want, "{k}: {} vs {want}", f1000[k]);
        }
    }
}

#[test]
fn target_has_more_vegetation_and_cars() {
    let s = shares(&DomainSpec::toy_source(), 0..100);
    let t = shares(&DomainSpec::toy_target(), 0..100);
    let vc = |f: [f64; N_CLASSES]| f[VEGETATION as usize] + f[CAR as usize];
    assert!(vc(t) > vc(s));
}

#[test]
fn noise_free_scene_is_segmented_exactly() {
    for spec in [DomainSpec::toy_source(), DomainSpec::toy_target()] {
        let clean = DomainSpec { noise: 0.0, ..spec };
        let sc = generate_scene(&clean, 7, 64, 64).unwrap();
        // every pixel carries the paint of its label
        let hw = 64 * 64;
        for (i, &l) in sc.labels.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(sc.image.data()[c * hw + i], clean.palette[l as usize][c].clamp(-0.999, 0.999));
            }
        }
        let r = segmentation_scores(&oracle_segment(&sc.image, &clean).unwrap(), &sc.labels, N_CLASSES).unwrap();
        assert_eq!(r.pixel_acc, 1.0);
    }
}

#[test]
fn oracle_is_accurate_at_spec_noise() {
    for spec in [DomainSpec::toy_source(), DomainSpec::toy_target()] {
        let mut cm = ConfusionMatrix::new(N_CLASSES);
        for s in 0..100 {
            let sc = generate_scene(&spec, s, 64, 64).unwrap();
            cm.add(&oracle_segment(&sc.image, &spec).unwrap(), &sc.labels).unwrap();
        }
        let r = MetricReport::from_confusion(cm);
        assert!(r.pixel_acc >= 0.95, "{}", r.pixel_acc);
    }
}

#[test]
fn uniform_gray_maps_to_one_class() {
    let spec = DomainSpec::toy_source();
    let gray = Tensor::full(vec![3, 8, 8], 0.0);
    let labels = oracle_segment(&gray, &spec).unwrap();
    let nearest = (0..N_CLASSES)
        .min_by(|&a, &b| color_distance(&spec.palette[a], &[0.0; 3]).total_cmp(&color_distance(&spec.palette[b], &[0.0; 3])))
        .unwrap();
    assert!(labels.iter().all(|&l| l as usize == nearest));
}

#[test]
fn ties_go_to_lowest_class() {
    let mut spec = DomainSpec::toy_source();
    spec.palette[0] = [0.5, 0.0, 0.0];
    spec.palette[1] = [-0.5, 0.0, 0.0];
    let labels = oracle_segment(&Tensor::zeros(vec![3, 1, 1]), &spec).unwrap();
    assert_eq!(labels, vec![0]);
}

#[test]
fn hand_computed_two_class_example() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 2]]).unwrap();
    let r = MetricReport::from_confusion(cm);
    assert_eq!(r.pixel_acc, 0.625);
    assert_eq!(r.class_acc, 0.625);
    assert!((r.mean_iou - 0.45).abs() < 1e-15);
    assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.4)]);
    // same numbers through label maps
    let truth = [0u8, 0, 0, 0, 1, 1, 1, 1];
    let pred = [0u8, 0, 0, 1, 0, 0, 1, 1];
    assert_eq!(segmentation_scores(&pred, &truth, 2).unwrap(), r);
}

fn random_matrix(seed: u64) -> ConfusionMatrix {
    let mut r = rng(seed);
    let n = r.gen_range(2..8);
    let rows: Vec<Vec<u64>> = (0..n)
        .map(|_| {
            let empty = r.gen_bool(0.15);
            (0..n).map(|_| if empty { 0 } else { r.gen_range(0..50) }).collect()
        })
        .collect();
    ConfusionMatrix::from_rows(&rows).unwrap()
}

#[test]
fn iou_never_exceeds_class_accuracy_on_random_matrices() {
    for seed in 0..1000 {
        let cm = random_matrix(seed);
        let r = MetricReport::from_confusion(cm.clone());
        for (i, iou) in r.per_class_iou.iter().enumerate() {
            let t = cm.truth_total(i);
            match iou {
                Some(v) => {
                    let acc = cm.get(i, i) as f64 / t as f64;
                    assert!((0.0..=acc).contains(v), "seed {seed} class {i}");
                }
                None => assert_eq!(t, 0),
            }
        }
        for v in [r.pixel_acc, r.class_acc, r.mean_iou] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #[test]
    fn report_is_recomputable_from_its_matrix(seed in 0u64..1_000_000) {
        let r = MetricReport::from_confusion(random_matrix(seed));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(MetricReport::from_confusion(back.confusion.clone()), back);
    }
}

#[test]
fn identity_refiner_with_shared_palette_matches_oracle_baseline() {
    let src = DomainSpec::toy_source();
    let tgt = DomainSpec { domain: Domain::Target, ..src.clone() };
    let scenes: Vec<ToyScene> = (0..10).map(|s| generate_scene(&src, s, 32, 32).unwrap()).collect();
    let r = evaluate_refiner(&identity, &scenes, &tgt).unwrap();
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    for sc in &scenes {
        cm.add(&oracle_segment(&sc.image, &src).unwrap(), &sc.labels).unwrap();
    }
    assert_eq!(r, MetricReport::from_confusion(cm));
}

#[test]
fn png_round_trip_is_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let sc = generate_scene(&DomainSpec::toy_target(), 3, 32, 32).unwrap();
    let p = dir.path().join("a.png");
    save_image(&sc.image, &p).unwrap();
    let back = load_image(&p, 32).unwrap();
    let worst = sc.image.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0 + 1e-12, "{worst}");

    let lp = dir.path().join("a_labels.png");
    save_labels(&sc.labels, 32, 32, &lp).unwrap();
    assert_eq!(load_labels(&lp).unwrap(), (sc.labels.clone(), 32, 32));
}

#[test]
fn folder_loads_sorted_and_resized() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["e.png", "b.png", "d.png", "a.png", "c.png"].iter().enumerate() {
        let sc = generate_scene(&DomainSpec::toy_source(), i as u64, 32, 32).unwrap();
        save_image(&sc.image, &dir.path().join(name)).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
    let f = load_image_folder(dir.path(), 16).unwrap();
    assert_eq!(f.len(), 5);
    assert_eq!(f.names, ["a.png", "b.png", "c.png", "d.png", "e.png"]);
    assert!(f.images.iter().all(|t| t.shape() == [3, 16, 16]));
}

#[test]
fn bad_files_are_named_in_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.png");
    std::fs::write(&empty, b"").unwrap();
    match load_image(&empty, 8) {
        Err(Error::Image { path, .. }) => assert_eq!(path, empty),
        other => panic!("{other:?}"),
    }
    assert!(load_image_folder(dir.path(), 8).unwrap_err().to_string().contains("empty.png"));

    let gray = dir.path().join("gray.png");
    save_labels(&[0; 64], 8, 8, &gray).unwrap();
    let msg = load_image(&gray, 8).unwrap_err().to_string();
    assert!(msg.contains("gray.png") && msg.contains("RGB"), "{msg}");
}

#[test]
fn spec_json_round_trip_and_field_errors() {
    let text = serde_json::to_string_pretty(&DomainSpec::toy_target()).unwrap();
    assert_eq!(DomainSpec::from_json_str(&text).unwrap(), DomainSpec::toy_target());
    let mut spec = DomainSpec::toy_target();
    spec.palette[4] = spec.palette[3];
    match spec.validate() {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "palette"),
        other => panic!("{other:?}"),
    }
}
