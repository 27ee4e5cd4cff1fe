use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refdiff::config::ExperimentConfig;
use refdiff::report::read_metrics_csv;
use refdiff::store::load_dataset;
use refdiff::Arm;
use refdiff_core::nn::ConvUNetSpec;
use refdiff_core::Respacing;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refdiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A configuration small enough for every stage to finish in seconds.
fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 11;
    cfg.data.source_train = 4;
    cfg.data.source_test = 3;
    cfg.data.target_test = 3;
    cfg.diffusion.steps = 40;
    cfg.diffusion.respace = Respacing::Count(8);
    cfg.diffusion.network = ConvUNetSpec::desk_denoiser(2, true);
    cfg.diffusion.network.depth = 1;
    cfg.diffusion.network.bottleneck_mult = 2;
    cfg.diffusion.training.epochs = 1;
    cfg.diffusion.training.batch_size = 2;
    cfg.diffusion.refinement.range = 4;
    cfg.diffusion.refinement.scale = 2;
    cfg.segmenter.network = ConvUNetSpec::new(1, 2, 1, 4);
    cfg.segmenter.training.epochs = 1;
    cfg.segmenter.training.batch_size = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn tiny_config_is_valid() {
    tiny_config().validate().unwrap();
}

#[test]
fn config_json_fills_defaults_and_rejects_unknown_fields() {
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.diffusion, ExperimentConfig::default().diffusion);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"clip": {"lo": 1.0}}"#).unwrap();
    assert_eq!((partial.clip.lo, partial.clip.hi), (1.0, 99.5));
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 5}"#).is_err());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"clip": {"low": 1.0}}"#).is_err());
    let round: ExperimentConfig = serde_json::from_str(&tiny_config().to_json()).unwrap();
    assert_eq!(round, tiny_config());
}

#[test]
fn bad_configuration_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"seeed": 1}"#).unwrap();
    let out = dir.path().join("x");
    let o = run(&["--config", p(&path), "phantom-gen", "--n", "2", "--domain", "source", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["--clip-lo", "60", "--clip-hi", "40", "phantom-gen", "--n", "2", "--domain", "source", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["--respace", "0", "phantom-gen", "--n", "2", "--domain", "source", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unusable_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let model = dir.path().join("m.ckpt");
    let o = run(&["--config", p(&cfg), "train-seg", "--data", p(&empty), "--out", p(&model)]);
    assert_eq!(code(&o), 3);

    let corrupt = dir.path().join("corrupt");
    std::fs::create_dir(&corrupt).unwrap();
    std::fs::write(corrupt.join("a.ngv"), b"not a record").unwrap();
    let o = run(&["--config", p(&cfg), "train-seg", "--data", p(&corrupt), "--out", p(&model)]);
    assert_eq!(code(&o), 3);

    std::fs::write(&model, b"garbage").unwrap();
    let o = run(&["--config", p(&cfg), "evaluate", "--model", p(&model), "--gt", p(&empty), "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let data = dir.path().join("data");
    assert!(run(&["--config", p(&cfg), "phantom-gen", "--n", "4", "--domain", "source", "--out", p(&data)]).status.success());
    let o = run(&[
        "--config",
        p(&cfg),
        "train-seg",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m.ckpt")),
        "--learning-rate",
        "1e300",
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ground_truth_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let data = dir.path().join("gt");
    let o = run(&["--config", p(&cfg), "phantom-gen", "--n", "3", "--domain", "target", "--out", p(&data)]);
    assert!(o.status.success());
    let (cases, _) = load_dataset(&data).unwrap();
    assert_eq!(cases.len(), 3);
    let csv = dir.path().join("metrics.csv");
    let o = run(&["--config", p(&cfg), "evaluate", "--pred", p(&data), "--gt", p(&data), "--out", p(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = read_metrics_csv(&csv).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        for c in &r.classes {
            assert_eq!(c.dsc.value, Some(1.0));
            assert_eq!(c.hd95.value, Some(0.0));
            assert_eq!(c.assd.value, Some(0.0));
        }
    }
}

#[test]
fn phantom_generation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        assert!(run(&["--seed", seed, "phantom-gen", "--n", "2", "--domain", "source", "--out", p(&out)]).status.success());
        load_dataset(&out).unwrap().1
    };
    assert_eq!(gen("3", "a"), gen("3", "b"));
    assert_ne!(gen("3", "c"), gen("4", "d"));
}

#[test]
fn report_over_identical_arms_finds_no_difference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let data = dir.path().join("gt");
    assert!(run(&["--config", p(&cfg), "phantom-gen", "--n", "4", "--domain", "source", "--out", p(&data)]).status.success());
    for arm in ["left", "right"] {
        let o = run(&[
            "--config",
            p(&cfg),
            "evaluate",
            "--pred",
            p(&data),
            "--gt",
            p(&data),
            "--out",
            p(&dir.path().join(arm).join("metrics.csv")),
        ]);
        assert!(o.status.success());
    }
    let out = dir.path().join("report");
    let o = run(&["report", "--runs", p(&dir.path().join("left")), p(&dir.path().join("right")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut welch = csv::Reader::from_path(out.join("welch.csv")).unwrap();
    let headers = welch.headers().unwrap().clone();
    let p_col = headers.iter().position(|h| h == "p").expect("p column");
    let mut rows = 0;
    for rec in welch.records() {
        let rec = rec.unwrap();
        if !rec[p_col].is_empty() {
            assert_eq!(rec[p_col].parse::<f64>().unwrap(), 1.0);
        }
        rows += 1;
    }
    assert!(rows > 0);

    // Ties mark both arms as best.
    let mut summary = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let headers = summary.headers().unwrap().clone();
    let best = headers.iter().position(|h| h == "best").unwrap();
    for rec in summary.records() {
        assert_eq!(&rec.unwrap()[best], "1");
    }
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.contains("left") && table.contains("right"));

    let o = run(&["report", "--runs", p(&dir.path().join("left")), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn end_to_end_pipeline_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let c = p(&cfg);
    let data = dir.path().join("src");
    let tgt = dir.path().join("tgt");
    assert!(run(&["--config", c, "phantom-gen", "--n", "4", "--domain", "source", "--out", p(&data)]).status.success());
    assert!(run(&["--config", c, "phantom-gen", "--n", "2", "--domain", "target", "--out", p(&tgt)]).status.success());

    let dm = dir.path().join("dm.ckpt");
    let log = dir.path().join("dm_loss.csv");
    let o = run(&["--config", c, "train-dm", "--data", p(&data), "--out", p(&dm), "--log", p(&log)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&log).unwrap().lines().count() > 1);

    let samples = dir.path().join("samples");
    let o = run(&["--config", c, "sample", "--model", p(&dm), "--n", "2", "--out", p(&samples)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(samples.join("sample_0001.pgm").exists());
    // A schedule that contradicts the checkpoint is a config error.
    let o = run(&["--config", c, "--steps", "80", "sample", "--model", p(&dm), "--out", p(&samples)]);
    assert_eq!(code(&o), 2);

    let (targets, _) = load_dataset(&tgt).unwrap();
    let reference = tgt.join(format!("{}.ngv", targets[0].subject_id));
    let adapted = dir.path().join("adapted.ngv");
    let trace = dir.path().join("trace.csv");
    let o = run(&[
        "--config",
        c,
        "adapt",
        "--ref",
        p(&reference),
        "--model",
        p(&dm),
        "--D",
        "2",
        "--N",
        "3",
        "--tau",
        "6",
        "--out",
        p(&adapted),
        "--trace",
        p(&trace),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = refdiff_core::io::load_ngv(&adapted).unwrap();
    assert_eq!(out.labels, targets[0].labels);
    assert_eq!(out.subject_id, targets[0].subject_id);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 1 + 3);
    // A block size that does not divide the image is rejected.
    let o = run(&["--config", c, "adapt", "--ref", p(&reference), "--model", p(&dm), "--D", "5", "--out", p(&adapted)]);
    assert_eq!(code(&o), 2);

    let sweep = dir.path().join("sweep");
    let o = run(&["--config", c, "sweep", "--ref", p(&reference), "--model", p(&dm), "--N", "2", "--out", p(&sweep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count() > 1);

    let seg = dir.path().join("seg.ckpt");
    let o = run(&["--config", c, "train-seg", "--data", p(&data), "--out", p(&seg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = dir.path().join("eval.csv");
    let o = run(&["--config", c, "evaluate", "--model", p(&seg), "--gt", p(&tgt), "--out", p(&metrics)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_metrics_csv(&metrics).unwrap().len(), 2);
}

#[test]
fn experiment_arms_reuse_artifacts_and_keep_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let root = dir.path().join("run");
    let o = run(&["--config", p(&cfg), "experiment", "--arm", "da", "--out", p(&root)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = root.join("arms").join("da").join("metrics.csv");
    let first = std::fs::read(&metrics).unwrap();
    let cached: Vec<PathBuf> = std::fs::read_dir(root.join("cache").join("adapted"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(cached.len(), 3);
    let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let before: Vec<_> = cached.iter().map(|p| stamp(p)).collect();

    let (targets, _) = load_dataset(&root.join("data").join("target_test")).unwrap();
    for path in &cached {
        let a = refdiff_core::io::load_ngv(path).unwrap();
        let t = targets.iter().find(|t| t.subject_id == a.subject_id).unwrap();
        assert_eq!(a.labels, t.labels);
    }

    let o = run(&["--config", p(&cfg), "experiment", "--arm", "da", "--arm", "mixed", "--out", p(&root)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&metrics).unwrap(), first);
    let after: Vec<_> = cached.iter().map(|p| stamp(p)).collect();
    assert_eq!(before, after, "cached adaptations were rewritten");
    assert!(root.join("arms").join(Arm::Mixed.name()).join("comparison.csv").exists());
    let manifest = std::fs::read_to_string(root.join("manifest.json")).unwrap();
    assert!(manifest.contains("mixed/dg_segmenter"));

    // The mixed arm regenerates the source training set: new pixels, same labels.
    let (sources, _) = load_dataset(&root.join("data").join("source_train")).unwrap();
    let synthetic: Vec<_> = std::fs::read_dir(root.join("cache").join("adapted"))
        .unwrap()
        .map(|e| refdiff_core::io::load_ngv(&e.unwrap().path()).unwrap())
        .filter(|c| c.domain_tag == refdiff_core::DomainTag::SyntheticA)
        .collect();
    assert_eq!(synthetic.len(), sources.len());
    for s in &synthetic {
        let src = sources.iter().find(|c| c.subject_id == s.subject_id).unwrap();
        assert_eq!(s.labels, src.labels);
        assert_ne!(s.image.data(), src.image.data());
    }

    // Changing the config under an existing run root is refused.
    let mut other = tiny_config();
    other.seed += 1;
    let cfg2 = dir.path().join("other.json");
    std::fs::write(&cfg2, other.to_json()).unwrap();
    let o = run(&["--config", p(&cfg2), "experiment", "--arm", "baseline", "--out", p(&root)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
