use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssrc_core::dataeval::{DomainSpec, MetricReport};
use ssrc_core::TrainConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ssrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssrc")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, count: usize, seed: u64) -> Output {
    let spec = configs().join("toy_source.json");
    ssrc(&["gen-data", "--spec", s(&spec), "--out", s(out), "--count", &count.to_string(), "--seed", &seed.to_string()])
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

/// Smoke config with paths rewritten to absolute ones inside `dir`.
fn smoke_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(configs().join("smoke.json")).unwrap();
    let mut cfg = TrainConfig::from_json_str(&text).unwrap();
    cfg.source_spec = Some(configs().join("toy_source.json"));
    cfg.target_spec = Some(configs().join("toy_target.json"));
    cfg.steps = 6;
    cfg.log_every = 0;
    let path = dir.join("smoke.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn shipped_specs_are_the_builtin_pair() {
    let read = |n: &str| DomainSpec::from_json_str(&fs::read_to_string(configs().join(n)).unwrap()).unwrap();
    assert_eq!(read("toy_source.json"), DomainSpec::toy_source());
    assert_eq!(read("toy_target.json"), DomainSpec::toy_target());
    for n in ["full.json", "ablation.json", "smoke.json"] {
        let cfg = TrainConfig::from_json_str(&fs::read_to_string(configs().join(n)).unwrap()).unwrap();
        assert!(cfg.steps > 0, "{n}");
    }
}

#[test]
fn gen_data_writes_images_labels_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&gen(&out, 10, 4));
    assert_eq!(files(&out.join("images")).len(), 10);
    assert_eq!(files(&out.join("labels")), files(&out.join("images")));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 10);
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 10);
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&gen(&a, 3, 9));
    ok(&gen(&b, 3, 9));
    for sub in ["images", "labels"] {
        for name in files(&a.join(sub)) {
            assert_eq!(fs::read(a.join(sub).join(&name)).unwrap(), fs::read(b.join(sub).join(&name)).unwrap());
        }
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn bad_spec_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DomainSpec::toy_source();
    spec.frequencies[0] += 0.2;
    let path = dir.path().join("bad.json");
    fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let out = ssrc(&["gen-data", "--spec", s(&path), "--out", s(&dir.path().join("o")), "--count", "1", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frequencies"));

    fs::write(&path, "{\n  \"domain\": \"source\",\n  \"noise\": oops\n}").unwrap();
    let out = ssrc(&["gen-data", "--spec", s(&path), "--out", s(&dir.path().join("o")), "--count", "1", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn missing_paths_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nope");
    let out = ssrc(&["plot", "--log", s(&nowhere.join("log.csv")), "--out", s(&dir.path().join("p.svg"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = ssrc(&["train", "--config", s(&nowhere.join("c.json")), "--out", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = ssrc(&["refine", "--ckpt", s(&nowhere), "--in", s(dir.path()), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_3_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = smoke_config(dir.path());
    let mut cfg = TrainConfig::from_json_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.lr_g = 1e300;
    cfg.lr_d = 1e300;
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = ssrc(&["train", "--config", s(&cfg_path), "--out", s(&dir.path().join("t"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{err}");
    assert!(err.contains("at step"), "{err}");
}

#[test]
fn train_refine_eval_plot_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = smoke_config(root);
    let run = root.join("run");
    ok(&ssrc(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let ckpt = run.join("checkpoint.ckpt");
    assert!(ckpt.exists());
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);

    let data = root.join("data");
    ok(&gen(&data, 4, 2));
    let refined = root.join("refined");
    ok(&ssrc(&["refine", "--ckpt", s(&ckpt), "--in", s(&data.join("images")), "--out", s(&refined)]));
    assert_eq!(files(&refined), files(&data.join("images")));

    // eval works at the model's size, so give it scenes of that size
    let small = root.join("small");
    fs::create_dir_all(small.join("images")).unwrap();
    fs::create_dir_all(small.join("labels")).unwrap();
    for i in 0..3u64 {
        let scene = ssrc_core::dataeval::generate_scene(&DomainSpec::toy_source(), 500 + i, 16, 16).unwrap();
        let name = format!("s{i}.png");
        ssrc_core::dataeval::save_image(&scene.image, &small.join("images").join(&name)).unwrap();
        ssrc_core::dataeval::save_labels(&scene.labels, 16, 16, &small.join("labels").join(&name)).unwrap();
    }
    let report = root.join("report.csv");
    ok(&ssrc(&["eval", "--ckpt", s(&ckpt), "--data", s(&small), "--report", s(&report)]));
    let parsed: MetricReport = serde_json::from_str(&fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    let again = MetricReport::from_confusion(parsed.confusion.clone());
    assert_eq!(again.mean_iou.to_bits(), parsed.mean_iou.to_bits());
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 2);

    // labels at the wrong size are a user error
    let out = ssrc(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(2));

    let svg = root.join("loss.svg");
    ok(&ssrc(&["plot", "--log", s(&run.join("log.csv")), "--out", s(&svg)]));
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 6);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = smoke_config(root);
    let straight = root.join("straight");
    ok(&ssrc(&["train", "--config", s(&cfg_path), "--out", s(&straight)]));

    let mut cfg = TrainConfig::from_json_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg.steps = 3;
    let short_cfg = root.join("short.json");
    fs::write(&short_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let part = root.join("part");
    ok(&ssrc(&["train", "--config", s(&short_cfg), "--out", s(&part)]));
    let resumed = root.join("resumed");
    ok(&ssrc(&[
        "train",
        "--config",
        s(&cfg_path),
        "--out",
        s(&resumed),
        "--resume",
        s(&part.join("checkpoint.ckpt")),
    ]));
    let params = |p: &Path| {
        let t = ssrc_core::Trainer::load(&p.join("checkpoint.ckpt")).unwrap();
        t.model.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(params(&straight), params(&resumed));

    cfg.lr_g *= 2.0;
    fs::write(&short_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = ssrc(&["train", "--config", s(&short_cfg), "--out", s(&resumed), "--resume", s(&part.join("checkpoint.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_of_100_rows_has_six_curves() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = ssrc_core::harness::RunLog::header() + "\n";
    for i in 1..=100 {
        let v = 1.0 / i as f64;
        csv.push_str(&format!("{i},{v},{},{},{},{},{},1.0\n", -v, 2.0 * v, 0.7, 1.3, 3.0 * v));
    }
    let log = dir.path().join("log.csv");
    fs::write(&log, csv).unwrap();
    let svg = dir.path().join("out/loss.svg");
    ok(&ssrc(&["plot", "--log", s(&log), "--out", s(&svg)]));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    assert_eq!(text.matches("<polyline").count(), 6);
}
