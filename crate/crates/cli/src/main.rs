use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use refdiff::config::{Arm, ExperimentConfig};
use refdiff::error::{CliError, Result};
use refdiff::pipeline::{network_input, Experiment};
use refdiff::report::{compare_arms, comparison_csv, read_metrics_csv, render_table, summarize_arms, summary_csv};
use refdiff::store::{create_dir, load_dataset, save_dataset, write_file};
use refdiff::sweep::{sample_images, sweep_reference, usable_scales, SWEEP_SCALES, SWEEP_STRENGTHS};
use refdiff_core::grid::denormalize_unit;
use refdiff_core::io::{encode_pgm, load_ngv, mosaic, save_ngv};
use refdiff_core::metrics::{evaluate_case, MetricReport};
use refdiff_core::nn::{
    load_checkpoint, save_checkpoint, train_denoiser, train_segmenter, DenoiserTraining, NeuralDenoiser, Segmenter,
    SegmenterTraining, TrainingMeta,
};
use refdiff_core::phantom::generate_dataset;
use refdiff_core::{adapt, DomainTag, NoiseSchedule, RefinementConfig, Respacing, ScheduleKind, SeededRng};

#[derive(Parser)]
#[command(name = "refdiff", version, about = "Reference-guided diffusion adaptation experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config; missing fields take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the reference-scale protocol instead of the desk one.
    #[arg(long, global = true)]
    paper_protocol: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Lower intensity percentile of the preprocessing window.
    #[arg(long, global = true)]
    clip_lo: Option<f64>,
    /// Upper intensity percentile of the preprocessing window.
    #[arg(long, global = true)]
    clip_hi: Option<f64>,
    #[arg(long, global = true, value_parser = ["linear", "cosine"])]
    schedule: Option<String>,
    /// Training diffusion steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Sampling steps: a count or a comma separated list of timesteps.
    #[arg(long, global = true)]
    respace: Option<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Baseline,
    Da,
    Dg,
    Mixed,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Baseline => Arm::Baseline,
            ArmArg::Da => Arm::Da,
            ArmArg::Dg => Arm::Dg,
            ArmArg::Mixed => Arm::Mixed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Write the per-iteration loss curve here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom cases as NGV files.
    PhantomGen {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum)]
        domain: Domain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the diffusion noise predictor on a dataset directory.
    TrainDm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Draw unconditional samples and write them as PGM.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt one image with reference-guided sampling.
    Adapt {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "D")]
        scale: Option<usize>,
        #[arg(long = "N")]
        range: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step residual trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a segmenter on a dataset directory.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score predictions against ground truth, one CSV row per case and class.
    Evaluate {
        /// Directory of NGV records whose labels are predictions.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        /// Segment the ground-truth images with this model instead.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment arm, reusing any artifacts already in the run root.
    Experiment {
        #[arg(long, value_enum)]
        arm: Vec<ArmArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a reference over a grid of block sizes and strengths.
    Sweep {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "N")]
        range: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise arm directories into a table and pairwise Welch tests.
    Report {
        /// Arm directories holding metrics.csv; the directory name labels the arm.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match (&g.config, g.paper_protocol) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, true) => ExperimentConfig::paper_protocol(),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(v) = g.clip_lo {
        cfg.clip.lo = v;
    }
    if let Some(v) = g.clip_hi {
        cfg.clip.hi = v;
    }
    if let Some(s) = &g.schedule {
        cfg.diffusion.schedule = s.parse::<ScheduleKind>()?;
    }
    if let Some(t) = g.steps {
        cfg.diffusion.steps = t;
    }
    if let Some(r) = &g.respace {
        cfg.diffusion.respace = Respacing::parse(r)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_train(opt: &mut refdiff::config::OptimConfig, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        opt.epochs = e;
    }
    if let Some(b) = a.batch_size {
        opt.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        opt.learning_rate = lr;
    }
}

fn load_denoiser(path: &Path) -> Result<NeuralDenoiser> {
    Ok(NeuralDenoiser::from_checkpoint(load_checkpoint(path)?)?)
}

fn load_segmenter(path: &Path) -> Result<Segmenter> {
    Ok(Segmenter::from_checkpoint(load_checkpoint(path)?)?)
}

/// The sampling schedule for a trained model: its own schedule kind and
/// length, respaced per the config. Explicit flags that contradict the
/// checkpoint are rejected.
fn model_schedule(g: &Global, cfg: &ExperimentConfig, model: &NeuralDenoiser) -> Result<NoiseSchedule> {
    let d = model.diffusion();
    if g.steps.is_some_and(|t| t != d.steps) || g.schedule.as_ref().is_some_and(|s| s.parse().ok() != Some(d.schedule)) {
        return Err(CliError::Config(format!(
            "checkpoint was trained with a {:?} schedule of {} steps",
            d.schedule, d.steps
        )));
    }
    let parent = NoiseSchedule::build(d.schedule, d.steps)?;
    Ok(cfg.diffusion.respace.apply(&parent)?.schedule)
}

fn pgm(path: &Path, img: &refdiff_core::Grid2D) -> Result<()> {
    write_file(path, &encode_pgm(img))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match cli.command {
        Command::PhantomGen { n, domain, out } => {
            let style = match domain {
                Domain::Source => &cfg.data.source_style,
                Domain::Target => &cfg.data.target_style,
            };
            let cases = generate_dataset(n, &cfg.data.phantom, style, cfg.seed)?;
            let hash = save_dataset(&out, &cases)?;
            println!("{} cases -> {} (sha256 {hash})", cases.len(), out.display());
        }
        Command::TrainDm { data, out, train } => {
            let (cases, _) = load_dataset(&data)?;
            let images = cases.iter().map(|c| network_input(&cfg, &c.image)).collect::<Result<Vec<_>>>()?;
            let mut opt = cfg.diffusion.training.clone();
            apply_train(&mut opt, &train);
            let d = &cfg.diffusion;
            let training = DenoiserTraining {
                train: opt.with_seed(cfg.seed),
                schedule: d.schedule,
                steps: d.steps,
                learn_sigma: d.learn_sigma,
                vlb_weight: d.vlb_weight,
            };
            let (model, log) = train_denoiser(&images, &d.network, &training, &mut |_, _| {})?;
            let meta = TrainingMeta {
                seed: cfg.seed,
                epochs: opt.epochs,
                iterations: log.loss.len(),
                loss_curve: log.loss.clone(),
            };
            save_checkpoint(&out, &model.to_checkpoint(Some(meta)))?;
            if let Some(p) = train.log {
                write_file(&p, log.to_csv().as_bytes())?;
            }
            println!("denoiser -> {}", out.display());
        }
        Command::Sample { model, n, out } => {
            let model = load_denoiser(&model)?;
            let sched = model_schedule(g, &cfg, &model)?;
            let size = cfg.data.phantom.size;
            let images = sample_images(&model, &sched, n, size, cfg.seed)?;
            create_dir(&out)?;
            for (i, img) in images.iter().enumerate() {
                pgm(&out.join(format!("sample_{i:04}.pgm")), img)?;
            }
            if let Some(m) = mosaic(&images, (n as f64).sqrt().ceil() as usize) {
                pgm(&out.join("mosaic.pgm"), &m)?;
            }
            println!("{n} samples ({} steps) -> {}", sched.steps(), out.display());
        }
        Command::Adapt {
            reference,
            model,
            scale,
            range,
            tau,
            out,
            trace,
        } => {
            let case = load_ngv(&reference)?;
            let model = load_denoiser(&model)?;
            let sched = model_schedule(g, &cfg, &model)?;
            let base = cfg.diffusion.refinement;
            let rc = RefinementConfig {
                range: range.unwrap_or(base.range),
                scale: scale.unwrap_or(base.scale),
                strength: tau.unwrap_or(base.strength),
                ..base
            };
            let input = network_input(&cfg, &case.image)?;
            let (y, tr) = adapt(&input, &model, &sched, &rc, &mut SeededRng::new(cfg.seed))?;
            save_ngv(&case.with_image(denormalize_unit(&y), DomainTag::AdaptedB)?, &out)?;
            if let Some(p) = trace {
                write_file(&p, tr.to_csv().as_bytes())?;
            }
            println!("adapted {} -> {}", case.subject_id, out.display());
        }
        Command::TrainSeg { data, out, train } => {
            let (cases, _) = load_dataset(&data)?;
            let pairs = cases
                .iter()
                .map(|c| Ok((network_input(&cfg, &c.image)?, c.labels.clone())))
                .collect::<Result<Vec<_>>>()?;
            let mut opt = cfg.segmenter.training.clone();
            apply_train(&mut opt, &train);
            let training = SegmenterTraining {
                train: opt.with_seed(cfg.seed),
            };
            let (model, log) = train_segmenter(&pairs, &cfg.segmenter.network, &training, &mut |_, _| {})?;
            let meta = TrainingMeta {
                seed: cfg.seed,
                epochs: opt.epochs,
                iterations: log.loss.len(),
                loss_curve: log.loss.clone(),
            };
            save_checkpoint(&out, &model.to_checkpoint(Some(meta)))?;
            if let Some(p) = train.log {
                write_file(&p, log.to_csv().as_bytes())?;
            }
            println!("segmenter -> {}", out.display());
        }
        Command::Evaluate { pred, model, gt, out } => {
            let (truth, _) = load_dataset(&gt)?;
            let reports: Vec<MetricReport> = match (pred, model) {
                (Some(dir), _) => {
                    let (preds, _) = load_dataset(&dir)?;
                    truth
                        .iter()
                        .map(|t| {
                            let p = preds.iter().find(|p| p.subject_id == t.subject_id).ok_or_else(|| {
                                CliError::Data(format!("no prediction for {}", t.subject_id))
                            })?;
                            Ok(evaluate_case(&t.subject_id, &p.labels, &t.labels)?)
                        })
                        .collect::<Result<_>>()?
                }
                (None, Some(m)) => {
                    let seg = load_segmenter(&m)?;
                    truth
                        .par_iter()
                        .map(|t| {
                            let p = seg.segment(&network_input(&cfg, &t.image)?)?;
                            Ok(evaluate_case(&t.subject_id, &p, &t.labels)?)
                        })
                        .collect::<Result<_>>()?
                }
                (None, None) => return Err(CliError::Config("evaluate needs --pred or --model".into())),
            };
            refdiff::report::write_metrics_csv(&out, &reports)?;
            println!("{} cases -> {}", reports.len(), out.display());
        }
        Command::Experiment { arm, out } => {
            if arm.is_empty() {
                return Err(CliError::Config("--arm is required".into()));
            }
            let mut exp = Experiment::new(cfg, &out)?;
            for a in arm {
                let outcome = exp.run_arm(a.into())?;
                println!("{}: {} cases -> {}", outcome.arm.name(), outcome.reports.len(), out.display());
            }
            exp.save_manifest(&out.join("manifest.json"))?;
        }
        Command::Sweep {
            reference,
            model,
            range,
            out,
        } => {
            let case = load_ngv(&reference)?;
            let model = load_denoiser(&model)?;
            let sched = model_schedule(g, &cfg, &model)?;
            let input = network_input(&cfg, &case.image)?;
            let scales = usable_scales(&SWEEP_SCALES, input.width().min(input.height()));
            let n = range.unwrap_or(cfg.diffusion.refinement.range);
            let (rows, grid) =
                sweep_reference(&case.subject_id, &input, &model, &sched, n, &scales, &SWEEP_STRENGTHS, cfg.seed)?;
            create_dir(&out)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            write_file(&out.join("sweep.csv"), &w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)?;
            pgm(&out.join("sweep.pgm"), &grid)?;
            println!("{} settings -> {}", rows.len(), out.display());
        }
        Command::Report { runs, out } => {
            if runs.len() < 2 {
                return Err(CliError::Config("report needs at least two arms".into()));
            }
            let mut arms = Vec::new();
            for dir in &runs {
                let name = dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| CliError::Config(format!("cannot name arm {}", dir.display())))?;
                arms.push((name, read_metrics_csv(&dir.join("metrics.csv"))?));
            }
            let rows = summarize_arms(&arms)?;
            let mut welch = Vec::new();
            for i in 0..arms.len() {
                for j in i + 1..arms.len() {
                    welch.extend(compare_arms((&arms[i].0, &arms[i].1), (&arms[j].0, &arms[j].1))?);
                }
            }
            let names: Vec<String> = arms.iter().map(|a| a.0.clone()).collect();
            let table = render_table(&rows, &names);
            write_file(&out.join("summary.csv"), &summary_csv(&rows)?)?;
            write_file(&out.join("welch.csv"), &comparison_csv(&welch)?)?;
            write_file(&out.join("report.txt"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("refdiff: {e}");
        std::process::exit(e.exit_code());
    }
}
