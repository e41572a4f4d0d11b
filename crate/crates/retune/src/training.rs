//! Stage and pipeline runners: batch assembly, the optimizer step with
//! freezing, metrics emission, dev evaluation, and checkpointing.
//!
//! Everything here is deterministic given the config and seed. Batches are
//! drawn from named streams, graphs are walked in construction order, and
//! gradients accumulate over batch items sequentially, so repeated runs
//! produce bit-identical checkpoints and metrics files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio::{self, AudioBuffer};
use crate::checkpoint::{self, SurgeryOp};
use crate::error::{Error, Result};
use crate::freeze::FreezePlan;
use crate::graph::Graph;
use crate::losses::{self, PretrainHyper, PretrainRngs};
use crate::model::{MaskSpec, Model, ModelSpec};
use crate::optim::{AdamState, OptimizerConfig};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Pretrain,
    Finetune,
    Adapt,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Pretrain => "pretrain",
            Objective::Finetune => "finetune",
            Objective::Adapt => "adapt",
        }
    }

    fn is_labeled(self) -> bool {
        !matches!(self, Objective::Pretrain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// Fresh parameters from the given architecture.
    Random { model: ModelSpec },
    /// Load a container file, then apply surgeries in order.
    Checkpoint {
        path: PathBuf,
        #[serde(default)]
        surgery: Vec<SurgeryOp>,
    },
    /// Use an earlier pipeline stage's checkpoint.
    Stage {
        stage: String,
        #[serde(default)]
        surgery: Vec<SurgeryOp>,
    },
}

impl InitSpec {
    fn describe(&self) -> String {
        match self {
            InitSpec::Random { .. } => "random".into(),
            InitSpec::Checkpoint { path, .. } => format!("checkpoint:{}", path.display()),
            InitSpec::Stage { stage, .. } => format!("stage:{stage}"),
        }
    }
}

fn default_batch() -> usize {
    8
}

fn default_eval_every() -> u64 {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub objective: Objective,
    pub init: InitSpec,
    /// Training manifests; several are concatenated in order.
    pub manifests: Vec<PathBuf>,
    #[serde(default)]
    pub dev_manifest: Option<PathBuf>,
    #[serde(default)]
    pub freeze: FreezePlan,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub hyper: PretrainHyper,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Overrides the seed derived from the pipeline root seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!(
                "stage name `{}` must be non-empty and slash-free",
                self.name
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("stage step budget must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be at least 1".into()));
        }
        if self.manifests.is_empty() {
            return Err(Error::InvalidArgument("stage needs at least one manifest".into()));
        }
        if self.objective == Objective::Pretrain && self.dev_manifest.is_some() {
            return Err(Error::InvalidArgument(
                "dev evaluation computes fCE and needs an output head; \
                 drop dev_manifest from the pre-training stage"
                    .into(),
            ));
        }
        self.freeze.validate()?;
        self.optimizer.validate()?;
        self.mask.validate()?;
        self.hyper.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("pipeline has no stages".into()));
        }
        let mut seen: Vec<&str> = Vec::new();
        for s in &self.stages {
            s.validate()?;
            if seen.contains(&s.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate stage name `{}`", s.name)));
            }
            if let InitSpec::Stage { stage, .. } = &s.init {
                if !seen.contains(&stage.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "stage `{}` initializes from `{stage}`, which does not run before it",
                        s.name
                    )));
                }
            }
            seen.push(&s.name);
        }
        Ok(())
    }
}

/// An utterance ready for training: decoded audio plus per-frame labels
/// (empty when the stage is unlabeled).
#[derive(Debug)]
pub struct TrainUtterance {
    pub id: String,
    pub audio: AudioBuffer,
    pub labels: Vec<usize>,
}

/// Load manifests and align labels to the model's frame geometry.
pub fn prepare_corpus(
    model: &Model<f32>,
    manifests: &[PathBuf],
    with_labels: bool,
) -> Result<Vec<TrainUtterance>> {
    let geometry = model.geometry()?;
    let num_classes = model.spec.head.map(|h| h.num_classes);
    let mut out = Vec::new();
    for manifest in manifests {
        let entries = audio::read_manifest(manifest)?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        for entry in entries {
            let utt = audio::load_utterance(&entry, base)?;
            if utt.audio.sample_rate != model.spec.extractor.sample_rate {
                return Err(Error::RateMismatch {
                    audio_hz: utt.audio.sample_rate,
                    model_hz: model.spec.extractor.sample_rate,
                });
            }
            let labels = if with_labels {
                let labels =
                    audio::frame_labels(&utt.segments, utt.audio.samples.len(), &geometry)?;
                if let (Some(&max), Some(classes)) = (labels.iter().max(), num_classes) {
                    if max >= classes {
                        return Err(Error::InvalidArgument(format!(
                            "utterance `{}` has class {max} but the head has {classes} classes",
                            utt.id
                        )));
                    }
                }
                labels
            } else {
                Vec::new()
            };
            out.push(TrainUtterance { id: utt.id, audio: utt.audio, labels });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    Ok(out)
}

/// One optimizer step's observable results.
#[derive(Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub terms: serde_json::Value,
    pub masked_fraction: Option<f64>,
}

/// Forward/backward over a batch and apply Adam to the trainable set.
///
/// Frozen parameters are never written, and their optimizer moments are
/// never created or advanced.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    batch: &[&TrainUtterance],
    objective: Objective,
    mask: &MaskSpec,
    hyper: &PretrainHyper,
    flags: &IndexMap<String, bool>,
    adam: &mut AdamState<f32>,
    lr: f64,
    seed: u64,
    step: u64,
) -> Result<StepOutcome> {
    let mut accum: IndexMap<String, Tensor<f32>> = IndexMap::new();
    let mut loss_sum = 0.0f64;
    let mut contrastive_sum = 0.0f64;
    let mut diversity_sum = 0.0f64;
    let mut perplexity_sum = 0.0f64;
    let mut masked_sum = 0.0f64;

    for (j, utt) in batch.iter().enumerate() {
        let g: Graph<f32> = Graph::new();
        let leaves = model.leaves(&g);
        let slot = j as u64;
        let total = match objective {
            Objective::Pretrain => {
                let mut rngs = PretrainRngs {
                    mask: stream(seed, "mask", &[step, slot]),
                    gumbel: stream(seed, "gumbel", &[step, slot]),
                    distractors: stream(seed, "distractors", &[step, slot]),
                    dropout: Some(stream(seed, "dropout", &[step, slot])),
                };
                let terms = losses::pretrain_utterance_loss(
                    &g, model, &leaves, &utt.audio, mask, hyper, &mut rngs,
                )?;
                contrastive_sum += g.item(terms.contrastive)? as f64;
                diversity_sum += g.item(terms.diversity)? as f64;
                perplexity_sum += terms.perplexity;
                masked_sum += terms.masked_fraction;
                terms.total
            }
            Objective::Finetune | Objective::Adapt => {
                let mut dropout = stream(seed, "dropout", &[step, slot]);
                let arts = model.encode(&g, &leaves, &utt.audio, &[], Some(&mut dropout))?;
                let logits = model.head_logits(&g, &leaves, arts.context)?;
                losses::fce_loss(&g, logits, &utt.labels)?
            }
        };
        let value = g.item(total)? as f64;
        if !value.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("non-finite loss {value} on utterance `{}`", utt.id),
            });
        }
        loss_sum += value;
        let mut grads = g.backward(total)?;
        for (name, &leaf) in &leaves {
            if let Some(grad) = grads.take(leaf) {
                match accum.get_mut(name) {
                    Some(t) => t.add_assign(&grad),
                    None => {
                        accum.insert(name.clone(), grad);
                    }
                }
            }
        }
    }

    let inv_b = 1.0 / batch.len() as f32;
    for t in accum.values_mut() {
        for v in t.data_mut() {
            *v *= inv_b;
        }
    }
    for (name, param) in model.params.iter_mut() {
        if !flags.get(name).copied().unwrap_or(false) {
            continue;
        }
        if let Some(grad) = accum.get(name) {
            adam.update(name, param, grad, lr);
        }
    }

    let b = batch.len() as f64;
    let (terms, masked_fraction) = match objective {
        Objective::Pretrain => (
            json!({
                "contrastive": contrastive_sum / b,
                "diversity": diversity_sum / b,
                "perplexity": perplexity_sum / b,
            }),
            Some(masked_sum / b),
        ),
        _ => (json!({ "fce": loss_sum / b }), None),
    };
    Ok(StepOutcome { loss: loss_sum / b, terms, masked_fraction })
}

/// Dev-set fCE and frame accuracy, eval mode (no masking, no dropout).
pub fn evaluate(model: &Model<f32>, utts: &[TrainUtterance]) -> Result<(f64, f64)> {
    if utts.is_empty() {
        return Err(Error::InvalidArgument("evaluation corpus is empty".into()));
    }
    let mut fce_sum = 0.0f64;
    let mut acc_sum = 0.0f64;
    for utt in utts {
        let g: Graph<f32> = Graph::new();
        let leaves = model.leaves(&g);
        let arts = model.encode(&g, &leaves, &utt.audio, &[], None)?;
        let logits = model.head_logits(&g, &leaves, arts.context)?;
        let loss = losses::fce_loss(&g, logits, &utt.labels)?;
        fce_sum += g.item(loss)? as f64;
        acc_sum += losses::frame_accuracy(&g.tensor(logits), &utt.labels);
    }
    let n = utts.len() as f64;
    Ok((fce_sum / n, acc_sum / n))
}

#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    loss: f64,
    terms: serde_json::Value,
    lr: f64,
    trainable_param_count: usize,
    masked_fraction: Option<f64>,
}

#[derive(Serialize)]
struct EvalLine {
    step: u64,
    fce: f64,
    frame_accuracy: f64,
}

/// Artifacts of a completed stage.
#[derive(Debug)]
pub struct StageOutput {
    pub model: Model<f32>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub eval_path: Option<PathBuf>,
    /// Final dev (fCE, frame accuracy), when a dev manifest was given.
    pub final_eval: Option<(f64, f64)>,
}

fn resolve_init(
    cfg: &StageConfig,
    stage_seed: u64,
    prior: &IndexMap<String, PathBuf>,
) -> Result<Model<f32>> {
    match &cfg.init {
        InitSpec::Random { model } => Model::init(model.clone(), derive_seed(stage_seed, "init")),
        InitSpec::Checkpoint { path, surgery } => {
            let m = checkpoint::load(path)?;
            checkpoint::apply_surgery(&m, surgery, stage_seed)
        }
        InitSpec::Stage { stage, surgery } => {
            let path = prior.get(stage).ok_or_else(|| {
                Error::Config {
                    path: "init.stage".into(),
                    reason: format!("no completed stage named `{stage}`"),
                }
            })?;
            let m = checkpoint::load(path)?;
            checkpoint::apply_surgery(&m, surgery, stage_seed)
        }
    }
}

/// Run one stage: init, train for the budget, write metrics and an atomic
/// checkpoint under `out_dir/<stage name>/`.
pub fn run_stage(
    cfg: &StageConfig,
    root_seed: u64,
    out_dir: &Path,
    prior: &IndexMap<String, PathBuf>,
) -> Result<StageOutput> {
    cfg.validate()?;
    let stage_seed = cfg.seed.unwrap_or_else(|| derive_seed(root_seed, &cfg.name));
    let mut model = resolve_init(cfg, stage_seed, prior)?;
    match cfg.objective {
        Objective::Pretrain => {
            if model.spec.head.is_some() {
                return Err(Error::InvalidArgument(
                    "pre-training model must not carry an output head; add a detach_head surgery"
                        .into(),
                ));
            }
        }
        Objective::Finetune | Objective::Adapt => {
            if model.spec.head.is_none() {
                return Err(Error::NoOutputHead);
            }
        }
    }
    let corpus = prepare_corpus(&model, &cfg.manifests, cfg.objective.is_labeled())?;
    let dev = match &cfg.dev_manifest {
        Some(p) => Some(prepare_corpus(&model, std::slice::from_ref(p), true)?),
        None => None,
    };

    let stage_dir = out_dir.join(&cfg.name);
    fs::create_dir_all(&stage_dir)?;
    let metrics_path = stage_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    let eval_path = dev.as_ref().map(|_| stage_dir.join("eval.jsonl"));
    let mut eval_file = match &eval_path {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };

    let mut adam = AdamState::new(cfg.optimizer)?;
    let mut final_eval = None;
    for step in 0..cfg.steps {
        let flags = crate::freeze::resolve_freeze(&cfg.freeze, &model.spec, step)?;
        let trainable_param_count: usize = model
            .params
            .iter()
            .filter(|(n, _)| flags.get(n.as_str()).copied().unwrap_or(false))
            .map(|(_, t)| t.numel())
            .sum();
        let batch_idx = pick_batch(corpus.len(), cfg.batch_size, stage_seed, step);
        let batch: Vec<&TrainUtterance> = batch_idx.iter().map(|&i| &corpus[i]).collect();
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        let outcome = train_step(
            &mut model,
            &batch,
            cfg.objective,
            &cfg.mask,
            &cfg.hyper,
            &flags,
            &mut adam,
            lr,
            stage_seed,
            step,
        )?;
        let line = MetricsLine {
            step: step + 1,
            loss: outcome.loss,
            terms: outcome.terms,
            lr,
            trainable_param_count,
            masked_fraction: outcome.masked_fraction,
        };
        serde_json::to_writer(&mut metrics, &line)?;
        metrics.write_all(b"\n")?;

        if let (Some(dev), Some(file)) = (&dev, eval_file.as_mut()) {
            let last = step + 1 == cfg.steps;
            if (step + 1) % cfg.eval_every == 0 || last {
                let (fce, acc) = evaluate(&model, dev)?;
                let line = EvalLine { step: step + 1, fce, frame_accuracy: acc };
                serde_json::to_writer(&mut *file, &line)?;
                file.write_all(b"\n")?;
                if last {
                    final_eval = Some((fce, acc));
                }
            }
        }
    }
    metrics.flush()?;
    if let Some(f) = eval_file.as_mut() {
        f.flush()?;
    }

    model.provenance.push(format!(
        "stage {} objective={} init={} seed={} steps={}",
        cfg.name,
        cfg.objective.as_str(),
        cfg.init.describe(),
        stage_seed,
        cfg.steps
    ));
    let checkpoint_path = stage_dir.join("checkpoint.w2vs");
    checkpoint::save(&model, &checkpoint_path)?;
    Ok(StageOutput { model, checkpoint_path, metrics_path, eval_path, final_eval })
}

/// Distinct indices when the corpus is large enough, otherwise draws with
/// replacement.
fn pick_batch(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut r = stream(seed, "batch", &[step]);
    if batch <= n {
        let mut idx: Vec<usize> = (0..n).collect();
        for j in 0..batch {
            let pick = j + r.gen_range(0..n - j);
            idx.swap(j, pick);
        }
        idx.truncate(batch);
        idx
    } else {
        (0..batch).map(|_| r.gen_range(0..n)).collect()
    }
}

/// Results of a pipeline run, keyed by stage name in execution order.
#[derive(Debug)]
pub struct PipelineOutput {
    pub stages: IndexMap<String, StageOutput>,
}

/// Execute stages in order; stage references resolve to earlier outputs.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut produced: IndexMap<String, PathBuf> = IndexMap::new();
    let mut stages = IndexMap::new();
    for stage in &cfg.stages {
        let out = run_stage(stage, cfg.seed, out_dir, &produced).map_err(|e| Error::Stage {
            stage: stage.name.clone(),
            source: Box::new(e),
        })?;
        produced.insert(stage.name.clone(), out.checkpoint_path.clone());
        stages.insert(stage.name.clone(), out);
    }
    Ok(PipelineOutput { stages })
}
