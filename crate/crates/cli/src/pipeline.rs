//! The four experiment arms and the stages they share.
//!
//! Every stage writes its artifact under the run root and reuses it when it
//! is already there, so arms run one after another in the same root share
//! datasets, the denoiser, segmenters and adapted images.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use refdiff_core::grid::{denormalize_unit, preprocess};
use refdiff_core::io::{decode_ngv, encode_ngv};
use refdiff_core::metrics::{evaluate_case, MetricReport};
use refdiff_core::nn::{
    load_checkpoint, save_checkpoint, train_denoiser, train_segmenter, DenoiserTraining, ModelKind, NeuralDenoiser,
    Segmenter, SegmenterTraining, TrainingMeta,
};
use refdiff_core::phantom::{generate_dataset, DomainStyle};
use refdiff_core::{adapt, CaseRecord, DomainTag, Grid2D, LabelMap, NoiseSchedule, SeededRng};

use crate::config::{Arm, ExperimentConfig, Stage};
use crate::error::{CliError, Result};
use crate::report::{compare_arms, comparison_csv, metrics_csv, Comparison};
use crate::store::{create_dir, load_dataset, save_dataset, sha256_hex, write_file, RunManifest};

pub struct Datasets {
    pub source_train: Vec<CaseRecord>,
    pub source_test: Vec<CaseRecord>,
    pub target_test: Vec<CaseRecord>,
}

/// Metric reports of one arm. `reference` holds the reports the arm is
/// compared against (source-domain test for the baseline, the raw-target
/// evaluation of the same segmenter for DA and Mixed, the baseline for DG).
pub struct ArmOutcome {
    pub arm: Arm,
    pub reports: Vec<MetricReport>,
    pub reference: Vec<MetricReport>,
    pub comparison: Vec<Comparison>,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
    sched: NoiseSchedule,
    started: Instant,
}

/// Map an image onto the network range with the configured window.
pub fn network_input(cfg: &ExperimentConfig, img: &Grid2D) -> Result<Grid2D> {
    Ok(preprocess(img, cfg.clip.lo, cfg.clip.hi)?)
}

fn segment_and_score(cfg: &ExperimentConfig, seg: &Segmenter, cases: &[CaseRecord]) -> Result<Vec<MetricReport>> {
    cases
        .par_iter()
        .map(|c| {
            let pred = seg.segment(&network_input(cfg, &c.image)?)?;
            Ok(evaluate_case(&c.subject_id, &pred, &c.labels)?)
        })
        .collect()
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        create_dir(root)?;
        let sched = cfg.sampling_schedule()?;
        let config_path = root.join("config.json");
        // Artifacts under the root were built from its config; reusing them
        // under another one would silently mix experiments.
        if config_path.exists() {
            let existing = ExperimentConfig::load(&config_path)?;
            if existing != cfg {
                return Err(CliError::Config(format!(
                    "{} holds a run with a different config",
                    root.display()
                )));
            }
        }
        write_file(&config_path, cfg.to_json().as_bytes())?;
        log::debug!("resolved config:\n{}", cfg.to_json());
        let manifest = RunManifest {
            config: serde_json::to_value(&cfg).expect("config serialises"),
            ..RunManifest::default()
        };
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
            manifest,
            sched,
            started: Instant::now(),
        })
    }

    pub fn sampling_schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self)?;
        let secs = t0.elapsed().as_secs_f64();
        log::info!("{stage}: {secs:.1}s");
        *self.manifest.stage_seconds.entry(stage.to_string()).or_default() += secs;
        Ok(out)
    }

    fn dataset(&mut self, name: &str, n: usize, style: &DomainStyle, stage: Stage) -> Result<Vec<CaseRecord>> {
        let dir = self.root.join("data").join(name);
        let (cases, hash) = if dir.is_dir() {
            load_dataset(&dir)?
        } else {
            let cases = generate_dataset(n, &self.cfg.data.phantom, style, self.cfg.stage_seed(stage))?;
            let hash = save_dataset(&dir, &cases)?;
            (cases, hash)
        };
        if cases.len() != n {
            return Err(CliError::Data(format!("{} holds {} cases, config asks for {n}", dir.display(), cases.len())));
        }
        self.manifest.inputs.insert(format!("data/{name}"), hash);
        Ok(cases)
    }

    pub fn datasets(&mut self) -> Result<Datasets> {
        self.timed("data", |e| {
            let d = e.cfg.data.clone();
            Ok(Datasets {
                source_train: e.dataset("source_train", d.source_train, &d.source_style, Stage::SourceTrain)?,
                source_test: e.dataset("source_test", d.source_test, &d.source_style, Stage::SourceTest)?,
                target_test: e.dataset("target_test", d.target_test, &d.target_style, Stage::TargetTest)?,
            })
        })
    }

    fn inputs(&self, cases: &[CaseRecord]) -> Result<Vec<Grid2D>> {
        cases.iter().map(|c| network_input(&self.cfg, &c.image)).collect()
    }

    /// Train the noise predictor on preprocessed source training images, or
    /// load it. Returns the model and its checkpoint hash.
    pub fn denoiser(&mut self, ds: &Datasets) -> Result<(NeuralDenoiser, String)> {
        let path = self.root.join("models/denoiser.ckpt");
        if !path.exists() {
            let images = self.inputs(&ds.source_train)?;
            self.timed("train-denoiser", |e| {
                let d = &e.cfg.diffusion;
                let training = DenoiserTraining {
                    train: d.training.with_seed(e.cfg.stage_seed(Stage::Denoiser)),
                    schedule: d.schedule,
                    steps: d.steps,
                    learn_sigma: d.learn_sigma,
                    vlb_weight: d.vlb_weight,
                };
                let (model, log) = train_denoiser(&images, &d.network, &training, &mut |_, _| {})?;
                let meta = TrainingMeta {
                    seed: training.train.seed,
                    epochs: training.train.epochs,
                    iterations: log.loss.len(),
                    loss_curve: log.loss.clone(),
                };
                create_dir(&e.root.join("models"))?;
                save_checkpoint(&path, &model.to_checkpoint(Some(meta)))?;
                let log_path = e.root.join("logs/denoiser_loss.csv");
                write_file(&log_path, log.to_csv().as_bytes())?;
                e.manifest.record("train-denoiser", &log_path)?;
                Ok(())
            })?;
        }
        let hash = self.manifest.record("train-denoiser", &path)?;
        let ck = load_checkpoint(&path)?;
        if ck.kind != ModelKind::Denoiser {
            return Err(CliError::Data(format!("{} is not a denoiser checkpoint", path.display())));
        }
        Ok((NeuralDenoiser::from_checkpoint(ck)?, hash))
    }

    /// Train a segmenter on `(image, label)` pairs, or load it by name.
    pub fn segmenter(&mut self, name: &str, cases: &[CaseRecord], stage: Stage) -> Result<(Segmenter, String)> {
        let path = self.root.join(format!("models/segmenter_{name}.ckpt"));
        let stage_name = format!("train-segmenter-{name}");
        if !path.exists() {
            let data: Vec<(Grid2D, LabelMap)> = self
                .inputs(cases)?
                .into_iter()
                .zip(cases.iter().map(|c| c.labels.clone()))
                .collect();
            self.timed(&stage_name.clone(), |e| {
                let training = SegmenterTraining {
                    train: e.cfg.segmenter.training.with_seed(e.cfg.stage_seed(stage)),
                };
                let (model, log) = train_segmenter(&data, &e.cfg.segmenter.network, &training, &mut |_, _| {})?;
                let meta = TrainingMeta {
                    seed: training.train.seed,
                    epochs: training.train.epochs,
                    iterations: log.loss.len(),
                    loss_curve: log.loss.clone(),
                };
                create_dir(&e.root.join("models"))?;
                save_checkpoint(&path, &model.to_checkpoint(Some(meta)))?;
                let log_path = e.root.join(format!("logs/segmenter_{name}_loss.csv"));
                write_file(&log_path, log.to_csv().as_bytes())?;
                e.manifest.record(&stage_name, &log_path)?;
                Ok(())
            })?;
        }
        let hash = self.manifest.record(&stage_name, &path)?;
        let ck = load_checkpoint(&path)?;
        if ck.kind != ModelKind::Segmenter {
            return Err(CliError::Data(format!("{} is not a segmenter checkpoint", path.display())));
        }
        Ok((Segmenter::from_checkpoint(ck)?, hash))
    }

    /// Cache key of one adaptation: model, reference, `(N, D, τ)`, sampling
    /// steps and seed.
    pub fn adaptation_key(&self, model_hash: &str, reference: &CaseRecord) -> String {
        let r = &self.cfg.diffusion.refinement;
        sha256_hex(
            format!(
                "{model_hash}|{}|N={}|D={}|tau={:?}|respace={}|seed={}",
                sha256_hex(&encode_ngv(reference)),
                r.range,
                r.scale,
                r.strength,
                self.cfg.diffusion.respace,
                self.cfg.stage_seed(Stage::Adaptation)
            )
            .as_bytes(),
        )
    }

    /// Adapt every case through reference-guided sampling with the case's
    /// own image as reference. Results are cached by [`Self::adaptation_key`];
    /// labels pass through untouched.
    pub fn adapt_cases(
        &mut self,
        model: &NeuralDenoiser,
        model_hash: &str,
        cases: &[CaseRecord],
        tag: DomainTag,
    ) -> Result<Vec<CaseRecord>> {
        let cache = self.root.join("cache/adapted");
        create_dir(&cache)?;
        let stage = format!("adapt-{}", tag_name(tag));
        let (cfg, sched) = (&self.cfg, &self.sched);
        let t0 = Instant::now();
        let out: Vec<CaseRecord> = cases
            .par_iter()
            .map(|case| {
                let key = self.adaptation_key(model_hash, case);
                let path = cache.join(format!("{key}.ngv"));
                let adapted = match std::fs::read(&path) {
                    Ok(bytes) => decode_ngv(&bytes)?,
                    Err(_) => {
                        let seed = u64::from_str_radix(&key[..16], 16).expect("hex digest");
                        let input = network_input(cfg, &case.image)?;
                        let (y, _) = adapt(&input, model, sched, &cfg.diffusion.refinement, &mut SeededRng::new(seed))?;
                        let rec = case.with_image(denormalize_unit(&y), tag)?;
                        write_file(&path, &encode_ngv(&rec))?;
                        rec
                    }
                };
                if adapted.labels != case.labels || adapted.subject_id != case.subject_id {
                    return Err(CliError::Data(format!(
                        "adapted record {} does not carry the reference labels",
                        case.subject_id
                    )));
                }
                Ok(adapted)
            })
            .collect::<Result<_>>()?;
        let secs = t0.elapsed().as_secs_f64();
        log::info!("{stage}: {} cases, {secs:.1}s", out.len());
        *self.manifest.stage_seconds.entry(stage).or_default() += secs;
        Ok(out)
    }

    pub fn evaluate(&mut self, seg: &Segmenter, cases: &[CaseRecord]) -> Result<Vec<MetricReport>> {
        let cfg = self.cfg.clone();
        self.timed("evaluate", |_| segment_and_score(&cfg, seg, cases))
    }

    fn dg_segmenter(&mut self, ds: &Datasets, model: &NeuralDenoiser, model_hash: &str) -> Result<(Segmenter, String)> {
        let synthetic = self.adapt_cases(model, model_hash, &ds.source_train, DomainTag::SyntheticA)?;
        self.segmenter("dg", &synthetic, Stage::DgSegmenter)
    }

    /// Run one arm and write `arms/<arm>/{metrics,reference_metrics,comparison}.csv`
    /// plus the manifest so far.
    pub fn run_arm(&mut self, arm: Arm) -> Result<ArmOutcome> {
        let ds = self.datasets()?;
        let (reports, reference, ref_name) = match arm {
            Arm::Baseline => {
                let (seg, _) = self.segmenter("baseline", &ds.source_train, Stage::Segmenter)?;
                let target = self.evaluate(&seg, &ds.target_test)?;
                let source = self.evaluate(&seg, &ds.source_test)?;
                (target, source, "source")
            }
            Arm::Da => {
                let (model, model_hash) = self.denoiser(&ds)?;
                let (seg, _) = self.segmenter("baseline", &ds.source_train, Stage::Segmenter)?;
                let adapted = self.adapt_cases(&model, &model_hash, &ds.target_test, DomainTag::AdaptedB)?;
                let da = self.evaluate(&seg, &adapted)?;
                let raw = self.evaluate(&seg, &ds.target_test)?;
                (da, raw, "baseline")
            }
            Arm::Dg => {
                let (model, model_hash) = self.denoiser(&ds)?;
                let (seg, _) = self.dg_segmenter(&ds, &model, &model_hash)?;
                let dg = self.evaluate(&seg, &ds.target_test)?;
                let (base, _) = self.segmenter("baseline", &ds.source_train, Stage::Segmenter)?;
                let baseline = self.evaluate(&base, &ds.target_test)?;
                (dg, baseline, "baseline")
            }
            Arm::Mixed => {
                let (model, model_hash) = self.denoiser(&ds)?;
                let (seg, seg_hash) = self.dg_segmenter(&ds, &model, &model_hash)?;
                self.manifest.inputs.insert("mixed/dg_segmenter".into(), seg_hash);
                let adapted = self.adapt_cases(&model, &model_hash, &ds.target_test, DomainTag::AdaptedB)?;
                let mixed = self.evaluate(&seg, &adapted)?;
                let dg = self.evaluate(&seg, &ds.target_test)?;
                (mixed, dg, "dg")
            }
        };
        let comparison = compare_arms((arm.name(), &reports), (ref_name, &reference))?;
        let dir = self.root.join("arms").join(arm.name());
        for (file, bytes) in [
            ("metrics.csv", metrics_csv(&reports)?),
            ("reference_metrics.csv", metrics_csv(&reference)?),
            ("comparison.csv", comparison_csv(&comparison)?),
        ] {
            let path = dir.join(file);
            write_file(&path, &bytes)?;
            self.manifest.record(arm.name(), &path)?;
        }
        self.save_manifest(&dir.join("manifest.json"))?;
        Ok(ArmOutcome {
            arm,
            reports,
            reference,
            comparison,
        })
    }

    pub fn save_manifest(&mut self, path: &Path) -> Result<()> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        self.manifest.save(path)
    }
}

fn tag_name(tag: DomainTag) -> &'static str {
    match tag {
        DomainTag::SourceA => "source",
        DomainTag::TargetB => "target",
        DomainTag::SyntheticA => "synthetic",
        DomainTag::AdaptedB => "adapted",
    }
}
