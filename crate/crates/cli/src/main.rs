use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use ssrc_core::dataeval::{self, DomainSpec, MetricReport, ToyScene, CLASS_NAMES};
use ssrc_core::harness::{self, RunLog};
use ssrc_core::{plot, Error, Tensor, TrainConfig, TrainData, Trainer};

#[derive(Parser)]
#[command(name = "ssrc", version, about = "Contrastive image refinement on toy domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labelled toy scenes from a domain spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train a refiner; writes a checkpoint and a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint up to the config's step count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Refine every PNG of a folder with a trained generator.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score refined scenes with the oracle segmenter.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render loss curves from a log CSV.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const SCENE_SIZE: usize = 64;
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const LOG_FILE: &str = "log.csv";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numerical failures, 2 for everything the user can fix.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { spec, out, count, seed } => gen_data(&spec, &out, count, seed),
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Refine { ckpt, input, out } => refine(&ckpt, &input, &out),
        Command::Eval { ckpt, data, report } => eval(&ckpt, &data, &report),
        Command::Plot { log, out } => {
            let log = RunLog::read(&log)?;
            write(&out, plot::loss_curves_svg(&log))
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_spec(path: &Path) -> anyhow::Result<DomainSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(DomainSpec::from_json_str(&text).with_context(|| format!("in {}", path.display()))?)
}

fn gen_data(spec_path: &Path, out: &Path, count: usize, seed: u64) -> anyhow::Result<()> {
    let spec = read_spec(spec_path)?;
    let target = spec.domain == dataeval::Domain::Target;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("labels"))?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = harness::scene_seed(seed, target, i as u64);
        let scene = dataeval::generate_scene(&spec, scene_seed, SCENE_SIZE, SCENE_SIZE)?;
        let name = format!("scene_{i:05}.png");
        dataeval::save_image(&scene.image, &out.join("images").join(&name))?;
        dataeval::save_labels(&scene.labels, scene.height, scene.width, &out.join("labels").join(&name))?;
        scenes.push(json!({
            "image": format!("images/{name}"),
            "labels": format!("labels/{name}"),
            "seed": scene_seed,
            "class_counts": scene.class_counts(),
        }));
    }
    let manifest = json!({
        "seed": seed,
        "count": count,
        "height": SCENE_SIZE,
        "width": SCENE_SIZE,
        "classes": CLASS_NAMES,
        "spec": spec,
        "scenes": scenes,
    });
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")
}

/// Config paths are taken relative to the config file.
fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = TrainConfig::from_json_str(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.source_spec, &mut cfg.target_spec, &mut cfg.source_dir, &mut cfg.target_dir]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?,
        None => Trainer::new(load_config(config)?)?,
    };
    if resume.is_some() {
        // only the run length and cadence may change on resume
        let fresh = load_config(config)?;
        let mut stored = trainer.config.clone();
        stored.steps = fresh.steps;
        stored.checkpoint_every = fresh.checkpoint_every;
        stored.log_every = fresh.log_every;
        if fresh != stored {
            bail!("--config differs from the checkpoint's configuration beyond steps/checkpoint_every/log_every");
        }
        trainer.config = fresh;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.json"), serde_json::to_string_pretty(&trainer.config)? + "\n")?;
    let data = TrainData::from_config(&trainer.config)?;
    let remaining = trainer.config.steps.saturating_sub(trainer.step);
    let (every, log_every) = (trainer.config.checkpoint_every, trainer.config.log_every);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let result = trainer.run(&data, remaining, |t, row| {
        if log_every > 0 && row.step % log_every == 0 {
            eprintln!(
                "step {:>6}  total {:.4}  src {:.4}  scc {:.4}  hdce {:.4}  gan_g {:.4}  gan_d {:.4}",
                row.step, row.total, row.src, row.scc, row.hdce, row.gan_g, row.gan_d
            );
        }
        if every > 0 && row.step % every == 0 {
            t.save(&ckpt_path)?;
        }
        Ok(())
    });
    // keep what was learned before a failure
    trainer.log.write(&out.join(LOG_FILE))?;
    result?;
    trainer.save(&ckpt_path)?;
    Ok(())
}

fn refine(ckpt: &Path, input: &Path, out: &Path) -> anyhow::Result<()> {
    let trainer = Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let folder = dataeval::load_image_folder(input, trainer.config.image_size)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, image) in folder.names.iter().zip(&folder.images) {
        let refined = refine_one(&trainer, image)?;
        dataeval::save_image(&refined, &out.join(name))?;
    }
    Ok(())
}

fn refine_one(trainer: &Trainer, image: &Tensor) -> anyhow::Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let out = trainer.refine(&image.reshape(shape)?)?;
    Ok(out.reshape(image.shape().to_vec())?)
}

/// `--data` is a `gen-data` folder: `images/` and `labels/` with matching names.
fn eval(ckpt: &Path, data: &Path, report: &Path) -> anyhow::Result<()> {
    let trainer = Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let size = trainer.config.image_size;
    let (_, target) = harness::domain_specs(&trainer.config)?;
    let folder = dataeval::load_image_folder(&data.join("images"), size)?;
    let mut scenes = Vec::with_capacity(folder.len());
    for (name, image) in folder.names.iter().zip(folder.images) {
        let label_path = data.join("labels").join(name);
        let (labels, h, w) = dataeval::load_labels(&label_path)?;
        if (h, w) != (size, size) {
            bail!(
                "{}: labels are {h}x{w} but the model works at {size}x{size}",
                label_path.display()
            );
        }
        scenes.push(ToyScene {
            image,
            labels,
            height: h,
            width: w,
            domain: dataeval::Domain::Source,
        });
    }
    if scenes.is_empty() {
        bail!("{} holds no PNG images", data.join("images").display());
    }
    let refiner = |x: &Tensor| trainer.refine(x);
    let result = dataeval::evaluate_refiner(&refiner, &scenes, &target)?;
    let csv = format!("{}\n{}\n", MetricReport::csv_header(&CLASS_NAMES), result.csv_row());
    write(&report.with_extension("csv"), csv)?;
    write(&report.with_extension("json"), serde_json::to_string_pretty(&result)? + "\n")?;
    Ok(())
}
