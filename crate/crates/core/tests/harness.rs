mod common;

use common::tiny_config;
use ssrc_core::checkpoint::Checkpoint;
use ssrc_core::losses::weighted_total;
use ssrc_core::{Error, Group, TrainData, Trainer};

fn param_bits(t: &Trainer) -> Vec<u64> {
    t.model
        .store
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn data_for(cfg: &ssrc_core::TrainConfig) -> TrainData {
    TrainData::from_config(cfg).unwrap()
}

#[test]
fn same_seed_gives_bitwise_identical_runs() {
    let cfg = tiny_config(3);
    let data = data_for(&cfg);
    let a = ssrc_core::harness::train(cfg.clone(), &data).unwrap();
    let b = ssrc_core::harness::train(cfg, &data).unwrap();
    assert!(a.log.same_values(&b.log));
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn different_seeds_diverge() {
    let data = data_for(&tiny_config(0));
    let a = ssrc_core::harness::train(tiny_config(1), &data).unwrap();
    let b = ssrc_core::harness::train(tiny_config(2), &data).unwrap();
    assert_ne!(param_bits(&a), param_bits(&b));
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let cfg = tiny_config(5);
    let data = data_for(&cfg);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.run(&data, 6, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(cfg).unwrap();
    first.run(&data, 3, |_, _| Ok(())).unwrap();
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&data, 3, |_, _| Ok(())).unwrap();

    assert_eq!(param_bits(&straight), param_bits(&resumed));
    assert!(straight.log.same_values(&resumed.log));
    assert_eq!(straight.opt_g.t, resumed.opt_g.t);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny_config(8);
    let data = data_for(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    t.run(&data, 2, |_, _| Ok(())).unwrap();
    let bytes = t.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(param_bits(&t), param_bits(&back));
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let cfg = tiny_config(9);
    let t = Trainer::new(cfg).unwrap();
    let mut bytes = t.to_checkpoint().unwrap().to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::<serde_json::Value>::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    let short = &bytes[..bytes.len() - 9];
    assert!(matches!(Checkpoint::<serde_json::Value>::from_bytes(short), Err(Error::Checkpoint(_))));
}

#[test]
fn gradients_stay_inside_their_groups() {
    let cfg = tiny_config(11);
    let data = data_for(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let (_, grads) = t.train_step_inspect(&data).unwrap();
    let store = &t.model.store;
    let norm = |g: &ssrc_core::Gradients, group: Group| -> (usize, f64) {
        let mut seen = 0;
        let mut sq = 0.0;
        for (id, p) in store.iter() {
            if p.group == group {
                if let Some(v) = g.param(id) {
                    seen += 1;
                    sq += v.data().iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
        (seen, sq.sqrt())
    };
    assert_eq!(norm(&grads.discriminator, Group::Generator).0, 0);
    assert_eq!(norm(&grads.discriminator, Group::Heads).0, 0);
    assert_eq!(norm(&grads.generator, Group::Discriminator).0, 0);
    for (g, group) in [
        (&grads.discriminator, Group::Discriminator),
        (&grads.generator, Group::Generator),
        (&grads.generator, Group::Heads),
    ] {
        let (seen, n) = norm(g, group);
        assert!(seen > 0 && n > 0.0 && n.is_finite(), "{group:?}: {seen} tensors, norm {n}");
    }
}

#[test]
fn heads_do_not_move_without_contrastive_terms() {
    let mut cfg = tiny_config(12);
    cfg.lambda_src = 0.0;
    cfg.lambda_scc = 0.0;
    cfg.lambda_hdce = 0.0;
    let data = data_for(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    let heads = |t: &Trainer| -> Vec<u64> {
        t.model
            .store
            .iter()
            .filter(|(_, p)| p.group == Group::Heads)
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let before = heads(&t);
    let gen_before = param_bits(&t);
    t.run(&data, 3, |_, _| Ok(())).unwrap();
    assert_eq!(heads(&t), before);
    assert_ne!(param_bits(&t), gen_before);
}

#[test]
fn log_rows_hold_the_weighted_total() {
    let cfg = tiny_config(13);
    let data = data_for(&cfg);
    let t = ssrc_core::harness::train(cfg.clone(), &data).unwrap();
    assert_eq!(t.log.len() as u64, cfg.steps);
    let w = cfg.loss_weights();
    for (i, r) in t.log.rows.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert!(r.losses().iter().all(|v| v.is_finite()));
        let want = weighted_total(r.src, r.scc, r.hdce, r.gan_g, &w);
        assert!((r.total - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn log_survives_csv() {
    let cfg = tiny_config(14);
    let data = data_for(&cfg);
    let mut t = Trainer::new(cfg).unwrap();
    t.run(&data, 2, |_, _| Ok(())).unwrap();
    let back = ssrc_core::harness::RunLog::from_csv(&t.log.to_csv()).unwrap();
    assert!(back.same_values(&t.log));
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = tiny_config(0);
    cfg.patches = 40;
    match Trainer::new(cfg) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "patches"),
        other => panic!("expected a validation error, got {:?}", other.err()),
    }
    let err = ssrc_core::TrainConfig::from_json_str(r#"{"lr_g": 1e-4, "lr_gg": 1}"#).unwrap_err();
    assert!(err.to_string().contains("lr_gg"), "{err}");
}
