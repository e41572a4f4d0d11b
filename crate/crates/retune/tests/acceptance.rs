//! Release gate: ten end-to-end checks over geometry, numerics, surgery,
//! freezing, the bundled experiments, and the container format. Each check
//! prints one pass/fail line; run with `--nocapture` to watch them land.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::Rng;

use retune::audio::{self, AudioBuffer, CorpusSpec, ToneClass};
use retune::checkpoint::{self, DiffStatus, SurgeryOp};
use retune::error::{Error, Result};
use retune::extractor::{self, ConvStackSpec, StrideSurgeryPlan, SurgeryMethod, TargetLayer};
use retune::freeze::{self, FreezeDescriptor, FreezePlan};
use retune::graph::Graph;
use retune::losses::{self, PretrainHyper};
use retune::model::{EncoderSpec, MaskSpec, Model, ModelSpec, QuantizerSpec};
use retune::ops;
use retune::optim::OptimizerConfig;
use retune::rng::stream;
use retune::tensor::Tensor;
use retune::training::{self, InitSpec, Objective, PipelineConfig, StageConfig};
use retune::verify;

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(Error::Verification(format!($($arg)+)));
        }
    };
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// Three tone vocabularies in staggered bands, standing in for languages.
const LOW_BANDS: [(f64, f64); 3] = [(400.0, 700.0), (1200.0, 1500.0), (2000.0, 2300.0)];
const MID_BANDS: [(f64, f64); 3] = [(800.0, 1100.0), (1600.0, 1900.0), (2400.0, 2700.0)];
const TARGET_BANDS: [(f64, f64); 3] = [(600.0, 900.0), (1400.0, 1700.0), (2200.0, 2500.0)];
/// The in-domain channel: every class sits 350 Hz above its in-house band,
/// with more noise and a telephony low-pass on top.
const SHIFTED_BANDS: [(f64, f64); 3] = [(950.0, 1250.0), (1750.0, 2050.0), (2550.0, 2850.0)];

fn tone_corpus(
    bands: &[(f64, f64)],
    utterances: usize,
    noise: f64,
    amplitude: f64,
    band_limited: bool,
    seed: u64,
    dir: &Path,
) -> Result<PathBuf> {
    let spec = CorpusSpec {
        num_utterances: utterances,
        duration: (0.45, 0.6),
        segment_duration: (0.1, 0.2),
        sample_rate: 16000,
        classes: bands.iter().map(|&(lo, hi)| ToneClass { freq_lo: lo, freq_hi: hi }).collect(),
        noise_level: noise,
        amplitude,
        band_limit_4k: band_limited,
        seed,
    };
    audio::synth_corpus(&spec, dir)
}

/// Small model used by the experiment checks: wide enough to learn tone
/// classes, narrow enough that a hundred optimizer steps take seconds.
fn trend_model(head: Option<usize>) -> ModelSpec {
    let mut spec = ModelSpec::toy(head);
    spec.extractor = ConvStackSpec::base_16k(12);
    spec.encoder = EncoderSpec {
        num_blocks: 2,
        d: 16,
        heads: 2,
        ffn: 48,
        dropout: 0.0,
        posconv_kernel: 5,
        posconv_groups: 4,
    };
    spec.quantizer = QuantizerSpec { groups: 2, entries: 6, code_dim: 16, temperature: 2.0 };
    spec
}

fn stage_cfg(
    name: &str,
    objective: Objective,
    init: InitSpec,
    manifests: Vec<PathBuf>,
    steps: u64,
    lr: f64,
) -> StageConfig {
    StageConfig {
        name: name.to_string(),
        objective,
        init,
        manifests,
        dev_manifest: None,
        freeze: FreezePlan::default(),
        optimizer: OptimizerConfig { peak_lr: lr, ..OptimizerConfig::default() },
        steps,
        batch_size: 4,
        mask: MaskSpec { p: 0.65, span: 2 },
        hyper: PretrainHyper { k: 3, kappa: 0.1, alpha: 0.1, hard_quantizer: true },
        eval_every: steps,
        seed: None,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn final_fce(out: &training::StageOutput) -> Result<f64> {
    Ok(out
        .final_eval
        .ok_or_else(|| Error::Verification("stage produced no dev evaluation".into()))?
        .0)
}

fn metric_losses(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let loss = v["loss"]
            .as_f64()
            .ok_or_else(|| Error::Verification(format!("metrics line without a loss: {line}")))?;
        out.push(loss);
    }
    Ok(out)
}

fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Duplicate every time step of x [C, L] -> [C, 2L].
fn upsample_cols(x: &Tensor<f32>) -> Tensor<f32> {
    let (c, l) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(vec![c, 2 * l]);
    for ci in 0..c {
        for t in 0..l {
            let v = x.data()[ci * l + t];
            out.data_mut()[ci * 2 * l + 2 * t] = v;
            out.data_mut()[ci * 2 * l + 2 * t + 1] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Check 1: frame geometry
// ---------------------------------------------------------------------------

fn frame_geometry_everywhere() -> Result<String> {
    let base = ConvStackSpec::base_16k(4);
    let g = extractor::geometry(&base)?;
    check!(
        g.frame_shift_ms == 20.0 && g.receptive_field_samples == 400,
        "base stack: shift {} ms, receptive field {} samples",
        g.frame_shift_ms,
        g.receptive_field_samples
    );

    let mut plans = vec![
        StrideSurgeryPlan {
            target: TargetLayer::First,
            method: SurgeryMethod::FractionalFirst,
            fold_kernel: false,
        },
        StrideSurgeryPlan {
            target: TargetLayer::First,
            method: SurgeryMethod::FractionalFirst,
            fold_kernel: true,
        },
        StrideSurgeryPlan {
            target: TargetLayer::Last,
            method: SurgeryMethod::HalveEven,
            fold_kernel: false,
        },
    ];
    for i in 1..base.layers.len() {
        plans.push(StrideSurgeryPlan {
            target: TargetLayer::Index(i),
            method: SurgeryMethod::HalveEven,
            fold_kernel: false,
        });
    }
    for plan in &plans {
        let adapted = extractor::adapt_stack_spec(&base, plan)?;
        let ag = extractor::geometry(&adapted)?;
        check!(
            ag.sample_rate == 8000 && ag.frame_shift_ms == 20.0,
            "{}: shift {} ms at {} Hz",
            plan.describe(),
            ag.frame_shift_ms,
            ag.sample_rate
        );
    }
    Ok(format!(
        "base stack 20 ms / 400 samples at 16 kHz; {} surgery variants all 20 ms at 8 kHz",
        plans.len()
    ))
}

// ---------------------------------------------------------------------------
// Check 2: route equivalence and kernel folding
// ---------------------------------------------------------------------------

fn routes_agree_and_folding_is_exact() -> Result<String> {
    let mut pairs = 0usize;
    for case in 0..100u64 {
        let mut r = stream(0x2A, "route", &[case]);
        let cin = r.gen_range(1..=3usize);
        let cout = r.gen_range(1..=3usize);
        let kernel = r.gen_range(2..=10usize);
        let len = r.gen_range(kernel.max(16)..=96);
        let x_data: Vec<f32> = (0..cin * len).map(|_| r.gen_range(-2.0..2.0)).collect();
        let k_data: Vec<f32> = (0..cout * cin * kernel).map(|_| r.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(vec![cin, len], x_data)?;
        let k = Tensor::from_vec(vec![cout, cin, kernel], k_data)?;
        let frac = ops::fractional_conv_fwd(&x, &k, 5, 2)?;
        let dil = ops::conv1d_fwd(&upsample_cols(&x), &k, 5, 2)?;
        let (tf, td) = (frac.shape()[1], dil.shape()[1]);
        for co in 0..cout {
            for t in 0..tf.min(td) {
                let a = frac.data()[co * tf + t];
                let b = dil.data()[co * td + t];
                check!(a.to_bits() == b.to_bits(), "case {case}: routes differ at [{co},{t}]");
            }
        }
        pairs += 1;
    }

    // folding halves even kernels by pairwise tap sums; on dyadic grids every
    // product and partial sum is exact, so even output frames must match the
    // unfolded 16 kHz route bit for bit
    let mut folded = 0usize;
    for case in 0..100u64 {
        let mut r = stream(0x2B, "fold", &[case]);
        let cin = r.gen_range(1..=2usize);
        let cout = r.gen_range(1..=2usize);
        let kernel = 2 * r.gen_range(1..=5usize);
        let len = r.gen_range(48..=96usize);
        let xi: Vec<f32> =
            (0..cin * len).map(|_| r.gen_range(-256i32..=256) as f32 * 2f32.powi(-8)).collect();
        let ki: Vec<f32> = (0..cout * cin * kernel)
            .map(|_| r.gen_range(-512i32..=512) as f32 * 2f32.powi(-10))
            .collect();
        let x = Tensor::from_vec(vec![cin, len], xi)?;
        let k = Tensor::from_vec(vec![cout, cin, kernel], ki)?;
        let out8 = ops::fractional_conv_fwd(&x, &extractor::fold_kernel(&k)?, 5, 2)?;
        let out16 = ops::conv1d_fwd(&upsample_cols(&x), &k, 5, 1)?;
        let (t8, t16) = (out8.shape()[1], out16.shape()[1]);
        for co in 0..cout {
            let mut t = 0;
            while t < t8 && t < t16 {
                let a = out8.data()[co * t8 + t];
                let b = out16.data()[co * t16 + t];
                check!(a.to_bits() == b.to_bits(), "fold case {case}: frame [{co},{t}] differs");
                folded += 1;
                t += 2;
            }
        }
    }
    Ok(format!("{pairs} random route pairs bit-identical; {folded} folded frames exact"))
}

// ---------------------------------------------------------------------------
// Check 3: gradients
// ---------------------------------------------------------------------------

fn gradients_match_finite_differences() -> Result<String> {
    let suite = verify::gradient_suite(10);
    check!(suite.passed, "{}", suite.detail);
    Ok(suite.detail)
}

// ---------------------------------------------------------------------------
// Check 4: losses at their reference points
// ---------------------------------------------------------------------------

fn losses_hit_reference_points() -> Result<String> {
    // identical positive and distractor codes score every candidate the
    // same, so the contrastive loss must be ln(K + 1) whatever the context
    let g: Graph<f32> = Graph::new();
    let frames = 101;
    let mut r = stream(0x4A, "ctx", &[]);
    let ctx: Vec<f32> = (0..frames * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let row = [0.3f32, -0.7, 0.2, 0.9];
    let codes: Vec<f32> = (0..frames).flat_map(|_| row).collect();
    let context = g.leaf(Tensor::from_vec(vec![frames, 4], ctx)?);
    let codes = g.leaf(Tensor::from_vec(vec![frames, 4], codes)?);
    let masked: Vec<usize> = (0..frames).collect();
    let mut dr = stream(0x4A, "distractors", &[]);
    let loss = losses::contrastive_loss(&g, context, codes, &masked, 100, 0.1, &mut dr)?;
    let got = g.item(loss)? as f64;
    let want = 101f64.ln();
    check!((got - want).abs() <= 1e-5, "contrastive at K=100: got {got:.7}, want {want:.7}");

    // diversity: exactly 0 when the averaged code distribution is uniform,
    // exactly 1 - 1/V when it collapses to one entry per group
    let g2: Graph<f32> = Graph::new();
    let (rows, v) = (6usize, 8usize);
    let uniform = g2.leaf(Tensor::from_vec(vec![rows, v], vec![1.0 / v as f32; rows * v])?);
    let (lu, pu) = losses::diversity_loss(&g2, uniform, 2, v)?;
    check!(g2.item(lu)? == 0.0, "diversity at uniform: {}", g2.item(lu)?);
    check!(pu == 8.0, "perplexity at uniform: {pu}");
    let mut hot = vec![0.0f32; rows * v];
    for rix in 0..rows {
        hot[rix * v + if rix % 2 == 0 { 2 } else { 5 }] = 1.0;
    }
    let collapsed = g2.leaf(Tensor::from_vec(vec![rows, v], hot)?);
    let (lc, pc) = losses::diversity_loss(&g2, collapsed, 2, v)?;
    check!(g2.item(lc)? == 0.875, "diversity at one-hot: {}", g2.item(lc)?);
    check!(pc == 1.0, "perplexity at one-hot: {pc}");

    // frame cross-entropy at uniform logits is ln(classes)
    let g3: Graph<f32> = Graph::new();
    let (t, classes) = (11usize, 7usize);
    let logits = g3.leaf(Tensor::zeros(vec![t, classes]));
    let labels: Vec<usize> = (0..t).map(|i| (i * 5) % classes).collect();
    let fce = g3.item(losses::fce_loss(&g3, logits, &labels)?)? as f64;
    let want = (classes as f64).ln();
    check!((fce - want).abs() <= 1e-6, "fce at uniform logits: got {fce:.8}, want {want:.8}");

    Ok("contrastive ln(101), diversity {0, 0.875}, fce ln(7)".to_string())
}

// ---------------------------------------------------------------------------
// Check 5: encoder truncation
// ---------------------------------------------------------------------------

fn truncation_matches_block_activations() -> Result<String> {
    let full = Model::init(ModelSpec::toy(None), 0x5A)?;
    let mut r = stream(0x5A, "audio", &[]);
    let rate = 16000u32;
    let (f1, f2) = (r.gen_range(300.0..1500.0f64), r.gen_range(1500.0..3400.0f64));
    let samples: Vec<f32> = (0..6400)
        .map(|i| {
            let x = i as f64 / rate as f64;
            let tone = 0.4 * (2.0 * std::f64::consts::PI * f1 * x).sin()
                + 0.3 * (2.0 * std::f64::consts::PI * f2 * x).sin();
            (tone + 0.02 * r.gen_range(-1.0..1.0f64)) as f32
        })
        .collect();
    let audio = AudioBuffer::new(rate, samples)?;

    let g: Graph<f32> = Graph::new();
    let leaves = full.leaves(&g);
    let arts = full.encode(&g, &leaves, &audio, &[], None)?;
    let refs: Vec<Tensor<f32>> = arts.block_outputs.iter().map(|&v| g.tensor(v)).collect();

    let total = full.spec.encoder.num_blocks;
    for n in 1..=total {
        let cut = full.truncate(n)?;
        let gt: Graph<f32> = Graph::new();
        let lt = cut.leaves(&gt);
        let out = cut.encode(&gt, &lt, &audio, &[], None)?;
        let got = gt.tensor(out.context);
        check!(
            bits_equal(&got, &refs[n - 1]),
            "keeping {n} of {total} blocks does not reproduce the block-{n} activation"
        );
    }
    Ok(format!("all {total} truncations bit-identical to the full model's block activations"))
}

// ---------------------------------------------------------------------------
// Check 6: freezing
// ---------------------------------------------------------------------------

fn frozen_parameters_never_move() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut corpus = CorpusSpec::toy(3, 6, 16000, 0x6C);
    corpus.duration = (0.4, 0.55);
    let manifest = audio::synth_corpus(&corpus, &dir.path().join("corpus"))?;

    let mut spec = ModelSpec::toy(Some(3));
    spec.extractor = ConvStackSpec::base_16k(8);
    spec.encoder = EncoderSpec {
        num_blocks: 2,
        d: 16,
        heads: 2,
        ffn: 32,
        dropout: 0.1,
        posconv_kernel: 3,
        posconv_groups: 2,
    };
    spec.quantizer = QuantizerSpec { groups: 2, entries: 4, code_dim: 16, temperature: 2.0 };

    let descriptors = [
        FreezeDescriptor::All,
        FreezeDescriptor::OutputHeadOnly,
        FreezeDescriptor::AllExceptFeatureExtractor,
        FreezeDescriptor::LastBlocks(1),
    ];
    let none = IndexMap::new();
    let mut frozen_total = 0usize;
    for (i, desc) in descriptors.iter().enumerate() {
        let init = Model::init(spec.clone(), 0x600 + i as u64)?;
        let init_path = dir.path().join(format!("init{i}.w2vs"));
        checkpoint::save(&init, &init_path)?;
        let mut cfg = stage_cfg(
            &format!("frz{i}"),
            Objective::Finetune,
            InitSpec::Checkpoint { path: init_path, surgery: vec![] },
            vec![manifest.clone()],
            100,
            3e-3,
        );
        cfg.freeze = FreezePlan::single(*desc);
        cfg.batch_size = 2;
        let out = training::run_stage(&cfg, 0x66, dir.path(), &none)?;

        let flags = freeze::resolve_freeze(&cfg.freeze, &spec, 0)?;
        for entry in checkpoint::diff(&init, &out.model) {
            let trainable = flags.get(&entry.name).copied().unwrap_or(false);
            if !trainable {
                check!(
                    entry.status == DiffStatus::Identical && entry.max_abs_delta == Some(0.0),
                    "{desc:?}: frozen `{}` moved by {:?}",
                    entry.name,
                    entry.max_abs_delta
                );
                frozen_total += 1;
            }
        }

        let losses = metric_losses(&out.metrics_path)?;
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        check!(
            tail < head,
            "{desc:?}: loss did not decrease over 100 steps ({head:.4} -> {tail:.4})"
        );
    }
    Ok(format!(
        "{} descriptors: {frozen_total} frozen tensors at max delta 0 while losses fell",
        descriptors.len()
    ))
}

// ---------------------------------------------------------------------------
// Check 7: pre-training transfers
// ---------------------------------------------------------------------------

fn pretraining_transfers() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let low = tone_corpus(&LOW_BANDS, 12, 0.02, 0.8, false, 0x71, &root.join("low"))?;
    let mid = tone_corpus(&MID_BANDS, 12, 0.02, 0.8, false, 0x72, &root.join("mid"))?;
    let pool = tone_corpus(&TARGET_BANDS, 12, 0.02, 0.8, false, 0x73, &root.join("pool"))?;
    let train = tone_corpus(&TARGET_BANDS, 8, 0.02, 0.8, false, 0x74, &root.join("train"))?;
    let dev = tone_corpus(&TARGET_BANDS, 8, 0.02, 0.8, false, 0x75, &root.join("dev"))?;

    let none = IndexMap::new();
    let (mut scratch, mut mono, mut multi) = (Vec::new(), Vec::new(), Vec::new());
    for (si, seed) in [0xA11u64, 0xA22, 0xA33].into_iter().enumerate() {
        let sd = root.join(format!("seed{si}"));
        let pre_mono = training::run_stage(
            &stage_cfg(
                "pre-mono",
                Objective::Pretrain,
                InitSpec::Random { model: trend_model(None) },
                vec![low.clone()],
                80,
                3e-3,
            ),
            seed,
            &sd,
            &none,
        )?;
        let pre_multi = training::run_stage(
            &stage_cfg(
                "pre-multi",
                Objective::Pretrain,
                InitSpec::Random { model: trend_model(None) },
                vec![low.clone(), mid.clone(), pool.clone()],
                80,
                3e-3,
            ),
            seed,
            &sd,
            &none,
        )?;

        let finetune = |name: &str, init: InitSpec| -> StageConfig {
            let mut cfg =
                stage_cfg(name, Objective::Finetune, init, vec![train.clone()], 60, 3e-3);
            cfg.dev_manifest = Some(dev.clone());
            cfg.freeze = FreezePlan::single(FreezeDescriptor::AllExceptFeatureExtractor);
            cfg
        };
        let s = training::run_stage(
            &finetune("ft-scratch", InitSpec::Random { model: trend_model(Some(3)) }),
            seed,
            &sd,
            &none,
        )?;
        let m = training::run_stage(
            &finetune(
                "ft-mono",
                InitSpec::Checkpoint {
                    path: pre_mono.checkpoint_path.clone(),
                    surgery: vec![SurgeryOp::AttachHead(3)],
                },
            ),
            seed,
            &sd,
            &none,
        )?;
        let x = training::run_stage(
            &finetune(
                "ft-multi",
                InitSpec::Checkpoint {
                    path: pre_multi.checkpoint_path.clone(),
                    surgery: vec![SurgeryOp::AttachHead(3)],
                },
            ),
            seed,
            &sd,
            &none,
        )?;
        scratch.push(final_fce(&s)?);
        mono.push(final_fce(&m)?);
        multi.push(final_fce(&x)?);
    }

    let (ms, mm, mx) = (median(scratch), median(mono), median(multi));
    check!(mm < ms, "mono pre-training did not beat scratch: {mm:.4} vs {ms:.4}");
    check!(mx < ms, "multi-domain pre-training did not beat scratch: {mx:.4} vs {ms:.4}");
    check!(mx <= mm + 0.02, "multi-domain fell behind mono past tolerance: {mx:.4} vs {mm:.4}");
    Ok(format!("dev fce medians: scratch {ms:.3}, mono {mm:.3}, multi {mx:.3}"))
}

// ---------------------------------------------------------------------------
// Check 8: staged adaptation
// ---------------------------------------------------------------------------

fn adaptation_recovers_domain_shift() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let inhouse = tone_corpus(&TARGET_BANDS, 12, 0.02, 0.8, false, 0x81, &root.join("inhouse"))?;
    let indomain = tone_corpus(&SHIFTED_BANDS, 6, 0.06, 0.7, true, 0x82, &root.join("indomain"))?;
    let dev = tone_corpus(&SHIFTED_BANDS, 8, 0.06, 0.7, true, 0x83, &root.join("dev"))?;

    let none = IndexMap::new();
    let (mut direct, mut adapted) = (Vec::new(), Vec::new());
    for (si, seed) in [0xB11u64, 0xB22, 0xB33].into_iter().enumerate() {
        let sd = root.join(format!("seed{si}"));
        let pre = training::run_stage(
            &stage_cfg(
                "pre",
                Objective::Pretrain,
                InitSpec::Random { model: trend_model(None) },
                vec![inhouse.clone()],
                40,
                3e-3,
            ),
            seed,
            &sd,
            &none,
        )?;
        let mut ft = stage_cfg(
            "ft-inhouse",
            Objective::Finetune,
            InitSpec::Checkpoint {
                path: pre.checkpoint_path.clone(),
                surgery: vec![SurgeryOp::AttachHead(3)],
            },
            vec![inhouse.clone()],
            70,
            3e-3,
        );
        ft.dev_manifest = Some(dev.clone());
        let a = training::run_stage(&ft, seed, &sd, &none)?;

        let mut adapt = stage_cfg(
            "adapt-indomain",
            Objective::Adapt,
            InitSpec::Checkpoint { path: a.checkpoint_path.clone(), surgery: vec![] },
            vec![indomain.clone()],
            30,
            1e-3,
        );
        adapt.dev_manifest = Some(dev.clone());
        let b = training::run_stage(&adapt, seed, &sd, &none)?;

        direct.push(final_fce(&a)?);
        adapted.push(final_fce(&b)?);
    }
    let (ma, mb) = (median(direct), median(adapted));
    check!(mb < ma, "adaptation did not improve shifted-dev fce: {mb:.4} vs {ma:.4}");
    Ok(format!("shifted-dev fce medians: in-house only {ma:.3}, plus adaptation {mb:.3}"))
}

// ---------------------------------------------------------------------------
// Check 9: determinism
// ---------------------------------------------------------------------------

fn reruns_are_bit_identical() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let unlab = tone_corpus(&TARGET_BANDS, 6, 0.02, 0.8, false, 0x91, &root.join("unlab"))?;
    let lab = tone_corpus(&TARGET_BANDS, 6, 0.02, 0.8, false, 0x92, &root.join("lab"))?;
    let dev = tone_corpus(&TARGET_BANDS, 4, 0.02, 0.8, false, 0x93, &root.join("dev"))?;

    // dropout on, so the seeded noise paths are covered too
    let mut arch = trend_model(None);
    arch.encoder.dropout = 0.1;
    let pre = stage_cfg(
        "pre",
        Objective::Pretrain,
        InitSpec::Random { model: arch },
        vec![unlab],
        10,
        3e-3,
    );
    let mut ft = stage_cfg(
        "ft",
        Objective::Finetune,
        InitSpec::Stage { stage: "pre".into(), surgery: vec![SurgeryOp::AttachHead(3)] },
        vec![lab],
        10,
        2e-3,
    );
    ft.dev_manifest = Some(dev);
    ft.eval_every = 5;
    let cfg = PipelineConfig { seed: 0x99, stages: vec![pre, ft] };

    training::run_pipeline(&cfg, &root.join("run-a"))?;
    training::run_pipeline(&cfg, &root.join("run-b"))?;

    let files = [
        "pre/checkpoint.w2vs",
        "pre/metrics.jsonl",
        "ft/checkpoint.w2vs",
        "ft/metrics.jsonl",
        "ft/eval.jsonl",
    ];
    for rel in files {
        let a = fs::read(root.join("run-a").join(rel))?;
        let b = fs::read(root.join("run-b").join(rel))?;
        check!(a == b, "{rel} differs between identical runs");
    }
    Ok(format!("{} artifacts byte-identical across reruns", files.len()))
}

// ---------------------------------------------------------------------------
// Check 10: container integrity
// ---------------------------------------------------------------------------

fn container_rejects_corruption() -> Result<String> {
    let mut spec = ModelSpec::toy(Some(2));
    spec.extractor = ConvStackSpec::base_16k(2);
    spec.encoder = EncoderSpec {
        num_blocks: 1,
        d: 4,
        heads: 1,
        ffn: 8,
        dropout: 0.0,
        posconv_kernel: 3,
        posconv_groups: 1,
    };
    spec.quantizer = QuantizerSpec { groups: 1, entries: 2, code_dim: 4, temperature: 2.0 };
    let model = Model::init(spec, 0xA7)?;

    let bytes = checkpoint::to_bytes(&model)?;
    let reloaded = checkpoint::from_bytes(&bytes)?;
    check!(checkpoint::to_bytes(&reloaded)? == bytes, "round trip is not bit-exact");

    // every byte position, three flip patterns each: low bit, case bit, high
    // bit, which between them cover the value-preserving rewrites a lenient
    // parser would wave through
    let mut rejected = 0usize;
    for i in 0..bytes.len() {
        for pattern in [0x01u8, 0x20, 0x80] {
            let mut corrupt = bytes.clone();
            corrupt[i] ^= pattern;
            check!(
                checkpoint::from_bytes(&corrupt).is_err(),
                "corruption at byte {i} (xor {pattern:#04x}) loaded successfully"
            );
            rejected += 1;
        }
    }
    Ok(format!(
        "{}-byte container round-trips bit-exact; {rejected} single-byte corruptions rejected",
        bytes.len()
    ))
}

// ---------------------------------------------------------------------------
// The gate
// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    type Check = fn() -> Result<String>;
    let checks: [(&str, Option<f64>, Check); 10] = [
        ("frame geometry", Some(1.0), frame_geometry_everywhere),
        ("route equivalence", Some(5.0), routes_agree_and_folding_is_exact),
        ("gradient checks", Some(60.0), gradients_match_finite_differences),
        ("loss reference points", None, losses_hit_reference_points),
        ("encoder truncation", None, truncation_matches_block_activations),
        ("freeze enforcement", None, frozen_parameters_never_move),
        ("transfer trend", Some(900.0), pretraining_transfers),
        ("adaptation trend", Some(600.0), adaptation_recovers_domain_shift),
        ("rerun determinism", None, reruns_are_bit_identical),
        ("container integrity", None, container_rejects_corruption),
    ];

    let mut failures = Vec::new();
    for (name, budget, run) in checks {
        let start = Instant::now();
        let result = run();
        let dt = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => match budget {
                Some(limit) if dt > limit => {
                    println!("FAIL  {name:<24} finished in {dt:.1}s, budget {limit:.0}s");
                    failures.push(name);
                }
                _ => println!("pass  {name:<24} {detail} [{dt:.1}s]"),
            },
            Err(e) => {
                println!("FAIL  {name:<24} {e} [{dt:.1}s]");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "acceptance failures: {}", failures.join(", "));
}
