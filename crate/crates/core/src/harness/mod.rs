//! Training loop: one discriminator update then one generator update per
//! step, Adam for both, per-step RNG derived from `(seed, step)` so a
//! resumed run replays exactly what an uninterrupted one would have drawn.

mod config;
mod log;

pub use config::TrainConfig;
pub use log::{LogRow, RunLog, LOSS_COLUMNS};

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataeval::{self, generate_scene, DomainSpec, ToyScene};
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms};
use crate::nets::Model;
use crate::optim::Adam;
use crate::params::Group;
use crate::patches;
use crate::rsmi;
use crate::tensor::{Gradients, Graph, Tensor};

/// Held-out source scenes used for scoring.
pub const TEST_SCENES: usize = 100;

/// Seed of the `index`-th scene of a domain. Source and target draw from
/// disjoint ranges so their layouts are unrelated.
pub fn scene_seed(data_seed: u64, target: bool, index: u64) -> u64 {
    data_seed.wrapping_mul(1 << 33) + if target { 1 << 32 } else { 0 } + index
}

/// Unpaired training images, each `3×H×W`.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source: Vec<Tensor>,
    pub target: Vec<Tensor>,
}

impl TrainData {
    pub fn toy(source: &DomainSpec, target: &DomainSpec, count: usize, size: usize, data_seed: u64) -> Result<Self> {
        let gen = |spec: &DomainSpec, tgt: bool| {
            (0..count as u64)
                .map(|i| generate_scene(spec, scene_seed(data_seed, tgt, i), size, size).map(|s| s.image))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            source: gen(source, false)?,
            target: gen(target, true)?,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        if let (Some(s), Some(t)) = (&cfg.source_dir, &cfg.target_dir) {
            let data = Self {
                source: dataeval::load_image_folder(s, cfg.image_size)?.images,
                target: dataeval::load_image_folder(t, cfg.image_size)?.images,
            };
            if data.source.is_empty() || data.target.is_empty() {
                return Err(Error::Validation {
                    field: "source_dir".into(),
                    detail: "image folders must each hold at least one PNG".into(),
                });
            }
            return Ok(data);
        }
        let (src, tgt) = domain_specs(cfg)?;
        Self::toy(&src, &tgt, cfg.train_scenes, cfg.image_size, cfg.data_seed)
    }
}

/// Source and target specs named by the config, or the built-in toy pair.
pub fn domain_specs(cfg: &TrainConfig) -> Result<(DomainSpec, DomainSpec)> {
    let load = |p: &Option<std::path::PathBuf>, fallback: DomainSpec| match p {
        Some(p) => DomainSpec::from_json_str(&std::fs::read_to_string(p)?),
        None => Ok(fallback),
    };
    Ok((
        load(&cfg.source_spec, DomainSpec::toy_source())?,
        load(&cfg.target_spec, DomainSpec::toy_target())?,
    ))
}

/// Source scenes right after the training range, never seen in training.
pub fn test_scenes(cfg: &TrainConfig, spec: &DomainSpec, count: usize) -> Result<Vec<ToyScene>> {
    (0..count as u64)
        .map(|i| {
            let seed = scene_seed(cfg.data_seed, false, cfg.train_scenes as u64 + i);
            generate_scene(spec, seed, cfg.image_size, cfg.image_size)
        })
        .collect()
}

/// Stream 0 initialises the networks; stream `k` drives step `k`.
pub fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Gradients of the two updates of one step, for inspection.
pub struct StepGradients {
    pub discriminator: Gradients,
    pub generator: Gradients,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    step: u64,
    opt_g_t: u64,
    opt_d_t: u64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Steps completed.
    pub step: u64,
    pub log: RunLog,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model_config(), &mut step_rng(config.seed, 0))?;
        let g_ids = model
            .store
            .ids()
            .filter(|&id| model.store.get(id).group != Group::Discriminator)
            .collect();
        let d_ids = model.store.ids_in(Group::Discriminator).collect();
        let opt_g = Adam::new(&model.store, g_ids, config.lr_g, config.beta1, config.beta2);
        let opt_d = Adam::new(&model.store, d_ids, config.lr_d, config.beta1, config.beta2);
        Ok(Self {
            config,
            model,
            opt_g,
            opt_d,
            step: 0,
            log: RunLog::default(),
        })
    }

    pub fn train_step(&mut self, data: &TrainData) -> Result<LogRow> {
        Ok(self.train_step_inspect(data)?.0)
    }

    /// One step, also returning both gradient sets.
    pub fn train_step_inspect(&mut self, data: &TrainData) -> Result<(LogRow, StepGradients)> {
        if data.source.is_empty() || data.target.is_empty() {
            return Err(Error::Contract("training needs source and target images".into()));
        }
        let started = Instant::now();
        let step = self.step + 1;
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step);
        let pick = |pool: &[Tensor], rng: &mut ChaCha8Rng| -> Vec<Tensor> {
            (0..cfg.batch_size).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
        };
        let xs = pick(&data.source, &mut rng);
        let ys = pick(&data.target, &mut rng);
        let x = dataeval::stack(&xs.iter().collect::<Vec<_>>())?;
        let real = dataeval::stack(&ys.iter().collect::<Vec<_>>())?;
        let non_finite = |term: &'static str| Error::NonFinite { term, step: Some(step) };

        // generator forward, shared by both updates
        let m = &mut self.model;
        let mut gg = Graph::with_frozen(&[Group::Discriminator]);
        let xv = gg.constant(x.clone());
        let (y, taps_x) = m.generator.generate(&mut gg, &m.store, xv)?;

        // discriminator update on the detached refinement
        let mut gd = Graph::with_frozen(&[Group::Generator, Group::Heads]);
        let real_v = gd.constant(real);
        let fake_v = gd.constant(gg.value(y).clone());
        let sr = m.discriminator.discriminate(&mut gd, &m.store, real_v)?;
        let sf = m.discriminator.discriminate(&mut gd, &m.store, fake_v)?;
        let ld = losses::gan_loss_d(&mut gd, sr, sf);
        let gan_d = gd.value(ld).item()?;
        if !gan_d.is_finite() {
            return Err(non_finite("gan_d"));
        }
        let d_grads = gd.backward(ld)?;
        self.opt_d.step(&mut m.store, &d_grads)?;

        // generator update against the updated, frozen discriminator
        let taps_y = m.generator.encode_taps(&mut gg, &m.store, y)?;
        let plan = patches::sample_plan_with(&patches::tap_sizes(&gg, &taps_x), cfg.patches, &mut rng)?;
        let pairs = patches::build_pairs(&mut gg, &m.store, &m.heads, &plan, &taps_x, &taps_y)?;
        let weights = cfg.loss_weights();
        let src = losses::src_loss(&mut gg, &pairs)?;
        let hdce = losses::hdce_loss(&mut gg, &pairs, weights.tau, weights.beta)?;
        let scc = rsmi::scc_loss(&mut gg, &x, y, &cfg.rsmi_params(), &mut rng)?;
        let sg = m.discriminator.discriminate(&mut gg, &m.store, y)?;
        let gan_g = losses::gan_loss_g(&mut gg, sg);
        let terms = LossTerms { src, scc, hdce, gan_g };
        let total = losses::total_loss(&mut gg, terms, &weights).map_err(|e| match e {
            Error::NonFinite { term, .. } => non_finite(term),
            other => other,
        })?;
        let total_v = gg.value(total).item()?;
        if !total_v.is_finite() {
            return Err(non_finite("total"));
        }
        let g_grads = gg.backward(total)?;
        self.opt_g.step(&mut m.store, &g_grads)?;

        let row = LogRow {
            step,
            src: gg.value(src).item()?,
            scc: gg.value(scc).item()?,
            hdce: gg.value(hdce).item()?,
            gan_g: gg.value(gan_g).item()?,
            gan_d,
            total: total_v,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.step = step;
        self.log.push(row);
        Ok((
            row,
            StepGradients {
                discriminator: d_grads,
                generator: g_grads,
            },
        ))
    }

    /// Run `steps` more steps, calling `after` once per completed step.
    pub fn run(
        &mut self,
        data: &TrainData,
        steps: u64,
        mut after: impl FnMut(&Trainer, &LogRow) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let row = self.train_step(data)?;
            after(self, &row)?;
        }
        Ok(())
    }

    /// Refine a `B×3×H×W` batch with the current generator.
    pub fn refine(&self, x: &Tensor) -> Result<Tensor> {
        self.model.generator.refine(&self.model.store, x)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<serde_json::Value>> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            step: self.step,
            opt_g_t: self.opt_g.t,
            opt_d_t: self.opt_d.t,
        };
        let store = &self.model.store;
        let mut tensors: Vec<(String, Tensor)> =
            store.iter().map(|(_, p)| (format!("param/{}", p.name), p.value.clone())).collect();
        for (tag, opt) in [("g", &self.opt_g), ("d", &self.opt_d)] {
            for (k, id) in opt.ids.iter().enumerate() {
                let name = &store.get(*id).name;
                tensors.push((format!("adam_{tag}/m/{name}"), opt.m[k].clone()));
                tensors.push((format!("adam_{tag}/v/{name}"), opt.v[k].clone()));
            }
        }
        let rows: Vec<f64> = self
            .log
            .rows
            .iter()
            .flat_map(|r| {
                let mut v = vec![r.step as f64];
                v.extend(r.losses());
                v.push(r.wall_ms);
                v
            })
            .collect();
        tensors.push(("log".into(), Tensor::new(vec![self.log.len(), 8], rows)?));
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<serde_json::Value>) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut t = Self::new(meta.config)?;
        let assign = |dst: &mut Tensor, name: &str| -> Result<()> {
            let src = ckpt.tensor(name)?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            Ok(())
        };
        let ids: Vec<_> = t.model.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", t.model.store.get(id).name);
            assign(t.model.store.value_mut(id), &name)?;
        }
        for (tag, opt) in [("g", &mut t.opt_g), ("d", &mut t.opt_d)] {
            for k in 0..opt.ids.len() {
                let name = t.model.store.get(opt.ids[k]).name.clone();
                assign(&mut opt.m[k], &format!("adam_{tag}/m/{name}"))?;
                assign(&mut opt.v[k], &format!("adam_{tag}/v/{name}"))?;
            }
        }
        t.opt_g.t = meta.opt_g_t;
        t.opt_d.t = meta.opt_d_t;
        t.step = meta.step;
        let log = ckpt.tensor("log")?;
        if log.shape().len() != 2 || log.shape()[1] != 8 || log.shape()[0] as u64 != meta.step {
            return Err(Error::Checkpoint(format!(
                "log table has shape {:?}, expected [{}, 8]",
                log.shape(),
                meta.step
            )));
        }
        for r in log.data().chunks_exact(8) {
            t.log.push(LogRow {
                step: r[0] as u64,
                src: r[1],
                scc: r[2],
                hdce: r[3],
                gan_g: r[4],
                gan_d: r[5],
                total: r[6],
                wall_ms: r[7],
            });
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Fresh run of `config.steps` steps.
pub fn train(config: TrainConfig, data: &TrainData) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    let steps = t.config.steps;
    t.run(data, steps, |_, _| Ok(()))?;
    Ok(t)
}
