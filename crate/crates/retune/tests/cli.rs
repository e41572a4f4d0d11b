//! End-to-end checks of the `retune` binary: exit codes, artifact layout,
//! and determinism of whole invocations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use retune::audio::CorpusSpec;
use retune::checkpoint;
use retune::extractor::ConvStackSpec;
use retune::losses::PretrainHyper;
use retune::model::{MaskSpec, Model, ModelSpec};
use retune::optim::OptimizerConfig;
use retune::training::{InitSpec, Objective, PipelineConfig, StageConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_retune")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn retune")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_model(head: Option<usize>) -> ModelSpec {
    let mut spec = ModelSpec::toy(head);
    spec.extractor = ConvStackSpec::base_16k(8);
    spec.encoder.num_blocks = 1;
    spec.encoder.d = 16;
    spec.encoder.heads = 2;
    spec.encoder.ffn = 32;
    spec.encoder.posconv_kernel = 3;
    spec.encoder.posconv_groups = 2;
    spec.quantizer.groups = 2;
    spec.quantizer.entries = 4;
    spec.quantizer.code_dim = 16;
    spec
}

fn small_corpus(seed: u64) -> CorpusSpec {
    let mut cs = CorpusSpec::toy(3, 3, 16000, seed);
    cs.duration = (0.3, 0.4);
    cs.segment_duration = (0.08, 0.15);
    cs
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

/// Synthesize a corpus through the CLI and return the manifest path.
fn synth(dir: &Path, seed: u64) -> PathBuf {
    let spec_path = dir.join("corpus.json");
    write_json(&spec_path, &small_corpus(seed));
    let out = run(&[
        "synth",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        dir.join("corpus").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "synth failed: {}", stderr(&out));
    let manifest = PathBuf::from(stdout(&out).trim());
    assert!(manifest.exists(), "missing manifest {}", manifest.display());
    manifest
}

fn finetune_config(manifest: &Path, steps: u64) -> StageConfig {
    StageConfig {
        name: "ft".into(),
        objective: Objective::Finetune,
        init: InitSpec::Random { model: small_model(Some(3)) },
        manifests: vec![manifest.to_path_buf()],
        dev_manifest: Some(manifest.to_path_buf()),
        freeze: Default::default(),
        optimizer: OptimizerConfig { peak_lr: 2e-3, ..Default::default() },
        steps,
        batch_size: 2,
        mask: MaskSpec { p: 0.4, span: 4 },
        hyper: PretrainHyper { k: 2, ..Default::default() },
        eval_every: 3,
        seed: None,
    }
}

#[test]
fn synth_writes_wavs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 11);
    let lines: Vec<String> =
        fs::read_to_string(&manifest).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    for line in &lines {
        let entry: serde_json::Value = serde_json::from_str(line).unwrap();
        let rel = entry["path"].as_str().unwrap();
        assert!(manifest.parent().unwrap().join(rel).exists());
    }
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("surgery"));
}

#[test]
fn malformed_config_exits_one_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, b"{ \"name\": ").unwrap();
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn objective_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 12);
    let cfg_path = dir.path().join("ft.json");
    write_json(&cfg_path, &finetune_config(&manifest, 4));
    let out = run(&[
        "pretrain",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("objective"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_exits_two() {
    let out = run(&["inspect", "--input", "/nonexistent/model.w2vs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.w2vs");
    let model: Model<f32> = Model::init(small_model(None), 3).unwrap();
    checkpoint::save(&model, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    let out = run(&["inspect", "--input", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).to_lowercase().contains("corrupt"), "{}", stderr(&out));
}

#[test]
fn surgery_truncates_and_attaches_a_head() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.w2vs");
    let output = dir.path().join("out.w2vs");
    let mut spec = small_model(None);
    spec.encoder.num_blocks = 3;
    let model: Model<f32> = Model::init(spec, 4).unwrap();
    checkpoint::save(&model, &input).unwrap();
    let out = run(&[
        "surgery",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--op",
        "truncate:2",
        "--op",
        "attach_head:5",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let inspect = run(&["inspect", "--input", output.to_str().unwrap(), "--json"]);
    assert!(inspect.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&inspect)).unwrap();
    assert_eq!(report["num_blocks"], 2);
    assert_eq!(report["spec"]["head"]["num_classes"], 5);
    assert!(!report["provenance"].as_array().unwrap().is_empty());
}

#[test]
fn bad_surgery_grammar_exits_one() {
    let out = run(&[
        "surgery",
        "--input",
        "x.w2vs",
        "--output",
        "y.w2vs",
        "--op",
        "truncate:zero",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn finetune_is_deterministic_and_set_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 13);
    let cfg_path = dir.path().join("ft.json");
    write_json(&cfg_path, &finetune_config(&manifest, 5));

    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "finetune",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert_eq!(summary["stage"], "ft");
        assert!(summary["final_eval"]["fce"].as_f64().unwrap().is_finite());
        outputs.push(out_dir.join("ft"));
    }
    for file in ["checkpoint.w2vs", "metrics.jsonl", "eval.jsonl"] {
        let a = fs::read(outputs[0].join(file)).unwrap();
        let b = fs::read(outputs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }

    let out_dir = dir.path().join("short");
    let out = run(&[
        "finetune",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "steps=3",
        "--set",
        "name=short",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = fs::read_to_string(out_dir.join("short/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn diff_separates_identical_from_changed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.w2vs");
    let b = dir.path().join("b.w2vs");
    let model: Model<f32> = Model::init(small_model(None), 5).unwrap();
    checkpoint::save(&model, &a).unwrap();
    let mut other = model.clone();
    other.params["proj.bias"].data_mut()[0] += 0.5;
    checkpoint::save(&other, &b).unwrap();

    let same = run(&["diff", "--a", a.to_str().unwrap(), "--b", a.to_str().unwrap()]);
    assert!(same.status.success());
    assert!(stdout(&same).contains("no differences"));

    let changed = run(&["diff", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--json"]);
    assert!(changed.status.success());
    let entries: Vec<serde_json::Value> = serde_json::from_str(&stdout(&changed)).unwrap();
    let touched: Vec<&str> = entries
        .iter()
        .filter(|e| e["status"] != "identical")
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert_eq!(touched, vec!["proj.bias"]);
}

#[test]
fn pipeline_chains_pretrain_into_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 14);
    let mut pre = finetune_config(&manifest, 4);
    pre.name = "pre".into();
    pre.objective = Objective::Pretrain;
    pre.init = InitSpec::Random { model: small_model(None) };
    pre.dev_manifest = None;
    let mut ft = finetune_config(&manifest, 4);
    ft.init = InitSpec::Stage {
        stage: "pre".into(),
        surgery: vec![checkpoint::SurgeryOp::AttachHead(3)],
    };
    let cfg = PipelineConfig { seed: 21, stages: vec![pre, ft] };
    let cfg_path = dir.path().join("pipe.json");
    write_json(&cfg_path, &cfg);

    let out_dir = dir.path().join("run");
    let out = run(&[
        "pipeline",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 2);
    let ft_ckpt = out_dir.join("ft/checkpoint.w2vs");
    let loaded = checkpoint::load(&ft_ckpt).unwrap();
    assert!(loaded.provenance.iter().any(|p| p.contains("stage pre")));
    assert!(loaded.provenance.iter().any(|p| p.contains("attach_head")));
}

#[test]
fn verify_reports_all_suites() {
    let out = run(&["verify", "--grad-points", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 4);
}
