use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gancompress::arch::GeneratorKind;
use gancompress::data::Dataset;
use gancompress::export::{count_layers, count_params};
use gancompress::nn::{ClassInput, Init};
use gancompress::pipeline::{self, Interpolation, RunConfig, SWEEP_ALPHAS};
use gancompress::report::save_png_grid;
use gancompress::train::{load_model, Ablation, DiscModel, GenModel};
use gancompress::verify::{gradcheck_suite, GRADCHECK_STEP, GRADCHECK_TOL};

#[derive(Parser, Debug)]
#[command(
    name = "gancompress",
    version,
    about = "Prune and distill class-conditional GAN generators"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Binarization threshold on the fraction of closed gates.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    steps_per_epoch: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Write the synthetic dataset to OUT/dataset.ppcd.
    Synth,
    /// Train the wide unmasked teacher into OUT.
    TeacherTrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the masked student into OUT.
    Train {
        /// Teacher checkpoint; trained into OUT/teacher when omitted and needed.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Strip frozen masks from a student and write the pruned model and report.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Write a PNG of samples or of an interpolation path.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        interpolate: Option<InterpKind>,
        /// Images along the path.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Class held fixed (noise path) or the path's start (class path).
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// End class of a class path.
        #[arg(long, default_value_t = 1)]
        to_class: usize,
        /// Samples per class without --interpolate.
        #[arg(long, default_value_t = 4)]
        per_class: usize,
    },
    /// Parameter and MAC counts per layer.
    Count {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// One student run and export per α.
    SweepAlpha {
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InterpKind {
    Z,
    Class,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: gancompress::Error| e.to_string())
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(alpha) = cli.alpha {
        cfg.set_alpha(alpha);
    }
    if let Some(a) = cli.ablation {
        cfg.train.ablation = a;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
        cfg.train.lr_drop_epochs.retain(|&d| d < e);
    }
    if let Some(s) = cli.steps_per_epoch {
        cfg.train.steps_per_epoch = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    Ok(match path {
        Some(p) => Dataset::load(p).with_context(|| format!("reading dataset {}", p.display()))?,
        None => pipeline::dataset(cfg)?,
    })
}

/// The given teacher, or one trained into `out/teacher` when distillation
/// needs it.
fn ensure_teacher(cfg: &RunConfig, data: &Dataset, given: Option<PathBuf>, out: &Path) -> Result<Option<PathBuf>> {
    if given.is_some() || !cfg.train.uses_cd() {
        return Ok(given);
    }
    let dir = out.join("teacher");
    println!("training teacher into {}", dir.display());
    let run = pipeline::run_teacher(cfg, data, &dir)?;
    Ok(Some(run.checkpoint))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = effective_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Config => println!("{}", cfg.to_json()?),
        Command::Synth => {
            let data = pipeline::dataset(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("dataset.ppcd");
            data.save(&path)?;
            println!(
                "wrote {} images ({} classes, {}px) to {}",
                data.len(),
                data.num_classes,
                data.image_size,
                path.display()
            );
        }
        Command::TeacherTrain { data } => {
            let data = load_data(&cfg, data.as_deref())?;
            let run = pipeline::run_teacher(&cfg, &data, &out)?;
            println!("teacher: {} steps, checkpoint {}", run.steps, run.checkpoint.display());
        }
        Command::Train { teacher, data } => {
            let data = load_data(&cfg, data.as_deref())?;
            let teacher = ensure_teacher(&cfg, &data, teacher, &out)?;
            let run = pipeline::run_student(&cfg, &data, teacher.as_deref(), &out)?;
            println!(
                "student: {} steps over {} epochs, all masks frozen: {}, checkpoint {}",
                run.steps,
                run.epochs_run,
                run.all_frozen,
                run.checkpoint.display()
            );
        }
        Command::Compress { checkpoint, trials } => {
            let trials = trials.unwrap_or(cfg.equivalence_trials);
            let c = pipeline::compress(&checkpoint, &out, trials, cfg.train.seed)?;
            print!("{}", c.report.to_table());
            println!("max deviation over {trials} trials: {:e}", c.max_deviation);
            println!("pruned model {}", c.pruned.display());
        }
        Command::Generate {
            checkpoint,
            interpolate,
            steps,
            class,
            to_class,
            per_class,
        } => {
            let mut gen = load_model::<f32>(&checkpoint)?.gen;
            let seed = cfg.train.seed;
            let (imgs, name, cols) = match interpolate {
                Some(InterpKind::Z) => (
                    pipeline::interpolate(&mut gen, Interpolation::Noise { class }, steps, seed)?,
                    "interpolate_z.png",
                    steps,
                ),
                Some(InterpKind::Class) => (
                    pipeline::interpolate(
                        &mut gen,
                        Interpolation::Class {
                            from: class,
                            to: to_class,
                        },
                        steps,
                        seed,
                    )?,
                    "interpolate_class.png",
                    steps,
                ),
                None => {
                    let k = gen.arch.cfg.num_classes;
                    let n = k * per_class;
                    let z = Init::new(seed).normal::<f32>(&[n, gen.arch.cfg.z_dim], 1.0);
                    let cls = ClassInput::Labels((0..n).map(|i| i % k).collect());
                    (gen.generate(&z, &cls)?, "samples.png", k)
                }
            };
            std::fs::create_dir_all(&out)?;
            let path = out.join(name);
            save_png_grid(&path, &imgs, cols)?;
            println!("wrote {} images to {}", imgs.shape()[0], path.display());
        }
        Command::Count { checkpoint } => {
            let (gen, disc) = match &checkpoint {
                Some(p) => {
                    let loaded = load_model::<f32>(p)?;
                    (loaded.gen, loaded.disc)
                }
                None => (
                    GenModel::<f32>::build(&cfg.generator)?,
                    Some(DiscModel::<f32>::build(&cfg.discriminator)?),
                ),
            };
            println!(
                "{:<22} {:<11} {:>10} {:>12} {:>8}",
                "layer", "role", "params", "MACs", "channels"
            );
            let rows = count_layers(&gen.arch)?;
            for r in &rows {
                println!(
                    "{:<22} {:<11} {:>10} {:>12} {:>8}",
                    r.name,
                    r.role.as_str(),
                    r.params,
                    r.macs,
                    r.channels
                );
            }
            let params = count_params(&gen.arch)?;
            let brute = gen.store.trainable_numel() as u64;
            let kind = match gen.arch.cfg.kind {
                GeneratorKind::Student => "student",
                GeneratorKind::Teacher => "teacher",
                GeneratorKind::Pruned => "pruned",
            };
            println!("generator ({kind}) params {params}");
            println!("generator stored values {brute}");
            println!("generator MACs {}", rows.iter().map(|r| r.macs).sum::<u64>());
            if let Some(d) = disc {
                println!("discriminator params {}", d.store.trainable_numel());
            }
            if params != brute {
                bail!("formula count {params} disagrees with stored values {brute}");
            }
        }
        Command::Gradcheck => {
            let checks = gradcheck_suite(cfg.train.seed, GRADCHECK_STEP, GRADCHECK_TOL)?;
            let mut failed = 0;
            for c in &checks {
                let ok = c.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{} {:<26} max rel error {:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    c.name,
                    c.report.worst()
                );
            }
            println!(
                "{} of {} checks passed at tolerance {GRADCHECK_TOL:e}",
                checks.len() - failed,
                checks.len()
            );
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::SweepAlpha { alphas, teacher, data } => {
            let alphas = alphas.unwrap_or_else(|| SWEEP_ALPHAS.to_vec());
            let data = load_data(&cfg, data.as_deref())?;
            let teacher = ensure_teacher(&cfg, &data, teacher, &out)?;
            let points = pipeline::sweep_alpha(&cfg, &alphas, &data, teacher.as_deref(), &out)?;
            for p in &points {
                match &p.compressed {
                    Some(c) => println!(
                        "alpha {:<4} params {} -> {} (prunable conv reduction {:.1}%)",
                        p.alpha,
                        c.report.totals.params_before,
                        c.report.totals.params_after,
                        100.0 * c.report.net_prunable_reduction()
                    ),
                    None => println!("alpha {:<4} masks did not all freeze; not exported", p.alpha),
                }
            }
            println!("summary {}", out.join("sweep.csv").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
