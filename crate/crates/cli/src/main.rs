use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use midccnn::checkpoint::{load_checkpoint, save_checkpoint};
use midccnn::data::{load_image, load_image_dir, synth_generate, write_dataset_dir, LabeledDataset};
use midccnn::eval::{evaluate_oa, protocol};
use midccnn::mil::export_attention_map;
use midccnn::train::{gradcheck, gradcheck_network, train_with, write_history_csv, GradcheckOptions};
use midccnn::{HeadKind, Network, PoolingMethod, RunConfig, Tensor};

#[derive(Parser)]
#[command(name = "midccnn", version, about = "Dense connected CNN with attention MIL pooling for scene classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset in directory-per-class layout.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a whole dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overall accuracy of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Confusion JSON path; defaults to confusion.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated split / train / evaluate runs with mean and std of the OA.
    Protocol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Also write every repetition's checkpoint under out/models.
        #[arg(long)]
        save_models: bool,
    },
    /// Compare backpropagated gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        #[arg(long, required_if_eq("profile", "custom"))]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 256)]
        coordinates: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the attention map of one image as CSV and PGM.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Base path; `.csv` and `.pgm` are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// 64 px input, c0 = 8, k = 4, hidden 8, three classes.
    Desk,
    /// Backbone and head taken from --config.
    Custom,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth {
            classes,
            per_class,
            size,
            seed,
            out,
            force,
        } => cmd_synth(classes, per_class, size, seed, &out, force),
        Command::Train { config, data, out } => cmd_train(&config, data, &out),
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, out),
        Command::Protocol {
            config,
            data,
            out,
            reps,
            save_models,
        } => cmd_protocol(&config, data, &out, reps, save_models),
        Command::Gradcheck {
            profile,
            config,
            tolerance,
            coordinates,
            batch,
            seed,
            out,
        } => {
            let opts = GradcheckOptions {
                coordinates,
                tolerance,
                seed,
                ..GradcheckOptions::default()
            };
            cmd_gradcheck(profile, config.as_deref(), &opts, batch, out.as_deref())
        }
        Command::Attention { checkpoint, image, out } => cmd_attention(&checkpoint, &image, &out),
    }
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

fn cmd_synth(classes: usize, per_class: usize, size: usize, seed: u64, out: &Path, force: bool) -> Result<ExitCode> {
    if out.exists() && !out.is_dir() {
        bail!("{} exists and is not a directory", out.display());
    }
    if is_non_empty_dir(out) {
        if !force {
            bail!("{} is not empty; pass --force to replace it", out.display());
        }
        fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    let ds = synth_generate(classes, per_class, size, seed)?;
    let written = write_dataset_dir(&ds, out)?;
    println!("wrote {written} images in {} classes to {}", ds.num_classes(), out.display());
    Ok(ExitCode::SUCCESS)
}

/// Loads the config, applies the `--data` override and loads the dataset at
/// the configured input size.
fn load_run(config: &Path, data: Option<PathBuf>) -> Result<(RunConfig, LabeledDataset)> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    if let Some(d) = data {
        cfg.data.root = Some(d);
    }
    let root = cfg
        .data
        .root
        .clone()
        .ok_or_else(|| anyhow!("no dataset: pass --data or set data.root in the config"))?;
    let ds = load_image_dir(&root, cfg.dccnn.input_size)?;
    cfg.check_dataset(&ds)?;
    Ok((cfg, ds))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("resolved_config.json");
    fs::write(&path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config: &Path, data: Option<PathBuf>, out: &Path) -> Result<ExitCode> {
    let (cfg, ds) = load_run(config, data)?;
    prepare_out(out, &cfg)?;
    let mut net = Network::new(&cfg.dccnn, &cfg.mil)?;
    eprintln!("training on {} images, {} classes", ds.len(), ds.num_classes());
    let outcome = train_with(&mut net, &ds, &cfg.train, |r, _| {
        eprintln!("epoch {:>4}  lr {:.1e}  loss {:.6}  train acc {:.2}%", r.epoch, r.lr, r.mean_loss, r.train_acc);
        Ok(ControlFlow::Continue(()))
    })?;
    write_history_csv(&outcome.history, &out.join("history.csv"))?;
    save_checkpoint(&out.join("model.midc"), &net, &ds.class_names, Some(&cfg.train), Some(&outcome.adam))?;
    let (oa, confusion) = evaluate_oa(&net, &ds)?;
    write_json(
        &out.join("train_eval.json"),
        &json!({ "oa": oa, "confusion": confusion, "class_names": ds.class_names }),
    )?;
    println!("OA {oa:.4}% on {} training images", ds.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_image_dir(data, ck.network.config.input_size)?;
    if ds.num_classes() != ck.network.num_classes() {
        bail!(
            "checkpoint has {} classes but {} has {}",
            ck.network.num_classes(),
            data.display(),
            ds.num_classes()
        );
    }
    if ds.class_names != ck.meta.class_names {
        eprintln!(
            "warning: class names differ from the checkpoint ({:?} vs {:?})",
            ds.class_names, ck.meta.class_names
        );
    }
    let (oa, confusion) = evaluate_oa(&ck.network, &ds)?;
    let path = out.unwrap_or_else(|| checkpoint.with_file_name("confusion.json"));
    write_json(&path, &json!({ "oa": oa, "confusion": confusion, "class_names": ds.class_names }))?;
    println!("OA {oa:.4}% on {} images", ds.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_protocol(config: &Path, data: Option<PathBuf>, out: &Path, reps: Option<usize>, save_models: bool) -> Result<ExitCode> {
    let (mut cfg, ds) = load_run(config, data)?;
    if let Some(r) = reps {
        cfg.protocol.repetitions = r;
        cfg.validate()?;
    }
    prepare_out(out, &cfg)?;
    let models = out.join("models");
    if save_models {
        fs::create_dir_all(&models).with_context(|| format!("creating {}", models.display()))?;
    }
    let spec = cfg.protocol_spec();
    eprintln!(
        "{} repetitions on {} images, train ratio {}",
        spec.repetitions,
        ds.len(),
        spec.train_ratio
    );
    let report = protocol(&ds, &spec, |r| {
        let epochs = r.outcome.history.len();
        eprintln!("rep {:>2}  OA {:.4}%  ({epochs} epochs)", r.rep, r.oa);
        if save_models {
            let path = models.join(format!("rep{:02}.midc", r.rep));
            let train = midccnn::train::TrainConfig {
                seed: spec.seeds.model_base.wrapping_add(r.rep as u64),
                ..spec.train.clone()
            };
            save_checkpoint(&path, r.network, &ds.class_names, Some(&train), Some(&r.outcome.adam))?;
        }
        Ok(())
    })?;
    write_json(&out.join("report.json"), &report)?;
    println!("OA {:.2} ± {:.2} over {} repetitions", report.mean_oa, report.std_oa, report.per_rep_oa.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(profile: Profile, config: Option<&Path>, opts: &GradcheckOptions, batch: usize, out: Option<&Path>) -> Result<ExitCode> {
    if batch == 0 {
        bail!("--batch must be at least 1");
    }
    let net = match profile {
        Profile::Desk => gradcheck_network(opts.seed)?,
        Profile::Custom => {
            let path = config.ok_or_else(|| anyhow!("--profile custom needs --config"))?;
            let cfg = RunConfig::load(path).with_context(|| format!("config {}", path.display()))?;
            Network::new(&cfg.dccnn, &cfg.mil)?
        }
    };
    let size = net.config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let input = Tensor::from_fn(&[batch, net.config.in_channels, size, size], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|i| i % net.num_classes()).collect();
    let start = std::time::Instant::now();
    let report = gradcheck(&net, &input, &labels, opts)?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    println!(
        "max rel err {:.3e} over {} coordinates in {} tensors ({:.1}s), tolerance {:.0e}",
        report.max_rel_err,
        report.checked,
        report.tensors,
        start.elapsed().as_secs_f64(),
        report.tolerance
    );
    if let Some(w) = &report.worst {
        println!("worst: {}[{}] analytic {:e} numeric {:e}", w.param, w.index, w.analytic, w.numeric);
    }
    if report.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL: {} coordinates above tolerance", report.failures.len());
        Ok(ExitCode::from(1))
    }
}

fn cmd_attention(checkpoint: &Path, image: &Path, out: &Path) -> Result<ExitCode> {
    let ck = load_checkpoint(checkpoint)?;
    let net = &ck.network;
    if net.config.head != HeadKind::Mil {
        bail!("checkpoint uses the gap_fc head, which has no attention map");
    }
    let method = ck.meta.mil.method;
    if method != PoolingMethod::Attention {
        bail!("checkpoint uses {} pooling; attention maps need the attention method", method.as_str());
    }
    let size = net.config.input_size;
    let x = load_image(image, size)?;
    let batch = Tensor::stack(&[&x])?;
    let pred = net.predict(&batch)?.into_iter().next().expect("one prediction");
    let files = export_attention_map(&pred, size, out)?;
    let class = pred.predicted_class();
    let name = ck.meta.class_names.get(class).map_or("?", String::as_str);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "predicted {class} ({name}), p = {:.4}", pred.p_bag[class])?;
    writeln!(stdout, "wrote {} and {}", files.csv.display(), files.pgm.display())?;
    Ok(ExitCode::SUCCESS)
}
