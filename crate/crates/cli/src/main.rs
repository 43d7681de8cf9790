use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hrda_core::data::{self, io as dio, BenchmarkSpec, Dataset, Domain, LabelMap, Split};
use hrda_core::train::{ablation, PreparedData};
use hrda_core::{infer_image, run_experiment, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "hrda",
    version,
    about = "Multi-resolution domain-adaptive segmentation on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a benchmark into a dataset directory.
    GenerateData {
        /// Benchmark spec (TOML); built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration; writes metrics.csv, checkpoint.bin and config.toml.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the target validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Writes metrics.csv, predictions/ and attention/ here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant of a named sweep, one CSV per variant.
    Ablate {
        /// One of: resolution, attention, pseudolabel, detail_loss, lambda_d, context_scale, source_only.
        #[arg(long)]
        sweep: String,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a single image into a palette PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Training config (TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set crop.scale=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset directory from `generate-data`; the default benchmark is
    /// generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            TrainConfig::load(p).with_context(|| format!("cannot load config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(overrides)
        .context("invalid --set override")?;
    Ok(cfg)
}

fn load_data(dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => {
            data::load_dataset(d).with_context(|| format!("cannot load dataset {}", d.display()))
        }
        None => Ok(data::generate_benchmark(&BenchmarkSpec::default())?),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
}

fn train_one(cfg: &TrainConfig, data: &PreparedData, csv_path: &Path) -> Result<Checkpoint> {
    let f = fs::File::create(csv_path)
        .with_context(|| format!("cannot create {}", csv_path.display()))?;
    let mut w = BufWriter::new(f);
    let r = run_experiment(cfg, data, &mut w)?;
    let fin = r.final_eval();
    eprintln!("{}: mIoU {:.4}", csv_path.display(), fin.miou);
    Ok(Checkpoint {
        model: cfg.model.clone(),
        student: r.state.student,
        teacher: r.state.teacher,
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData { spec, seed, out } => {
            let mut b = match &spec {
                Some(p) => BenchmarkSpec::load(p)
                    .with_context(|| format!("cannot load spec {}", p.display()))?,
                None => BenchmarkSpec::default(),
            };
            if let Some(s) = seed {
                b.seed = s;
            }
            let d = data::generate_benchmark(&b)?;
            data::save_dataset(&out, &d)?;
            fs::write(out.join("spec.toml"), b.to_toml())?;
            eprintln!("wrote {} samples to {}", d.len(), out.display());
        }
        Command::Train { run, out } => {
            let cfg = load_config(run.config.as_deref(), &run.overrides)?;
            let data = PreparedData::from_dataset(&load_data(run.data.as_deref())?)?;
            create_dir(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let ck = train_one(&cfg, &data, &out.join("metrics.csv"))?;
            ck.save(&out.join("checkpoint.bin"))?;
        }
        Command::Eval {
            checkpoint,
            run,
            out,
        } => {
            let mut cfg = load_config(run.config.as_deref(), &run.overrides)?;
            let ck = Checkpoint::load(&checkpoint)?;
            cfg.model = ck.model.clone();
            let params = match cfg.eval_model {
                hrda_core::train::EvalModel::Student => &ck.student,
                hrda_core::train::EvalModel::Teacher => &ck.teacher.params,
            };
            let d = load_data(run.data.as_deref())?;
            let inf = cfg.inference();
            for sub in ["predictions", "attention"] {
                create_dir(&out.join(sub))?;
            }
            let mut cm = data::ConfusionMatrix::new(cfg.model.num_classes);
            let mut n = 0;
            for (id, s) in d
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.domain == Domain::Target && s.split == Split::Val)
            {
                let o = infer_image(params, &s.image.to_tensor(), &inf)?;
                if let Some(l) = &s.label {
                    cm.add(&o.classes, &l.classes)?;
                }
                let pred = LabelMap {
                    height: o.height,
                    width: o.width,
                    classes: o.classes.clone(),
                };
                dio::write_label_png(&out.join(format!("predictions/{id:05}.png")), &pred)?;
                if let Some(a) = &o.attention {
                    dio::write_gray_png(
                        &out.join(format!("attention/{id:05}.png")),
                        o.width,
                        o.height,
                        a,
                    )?;
                }
                n += 1;
            }
            if n == 0 {
                bail!("dataset has no target validation samples");
            }
            let mut text = String::from("class,iou\n");
            for (name, iou) in data::CLASS_NAMES.iter().zip(cm.iou()) {
                text += &format!(
                    "{name},{}\n",
                    iou.map(|v| format!("{v:.6}")).unwrap_or_default()
                );
            }
            text += &format!("miou,{:.6}\n", cm.miou());
            fs::write(out.join("metrics.csv"), &text)?;
            print!("{text}");
        }
        Command::Ablate { sweep, run, out } => {
            let base = load_config(run.config.as_deref(), &run.overrides)?;
            let variants = ablation::sweep(&sweep, &base)?;
            let data = PreparedData::from_dataset(&load_data(run.data.as_deref())?)?;
            create_dir(&out)?;
            for (label, cfg) in &variants {
                train_one(cfg, &data, &out.join(format!("{label}.csv")))?;
            }
        }
        Command::Infer {
            checkpoint,
            image,
            config,
            overrides,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            let ck = Checkpoint::load(&checkpoint)?;
            cfg.model = ck.model.clone();
            let img = dio::read_rgb_png(&image)?;
            let o = infer_image(&ck.student, &img.to_tensor(), &cfg.inference())?;
            dio::write_label_png(
                &out,
                &LabelMap {
                    height: o.height,
                    width: o.width,
                    classes: o.classes,
                },
            )?;
        }
    }
    Ok(())
}
