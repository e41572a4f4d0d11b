//! Training objectives.
//!
//! The contrastive loss scores each masked frame's context vector against
//! its own quantized target and `k` distractor targets drawn from the other
//! masked frames of the same utterance. Diversity pushes the averaged
//! selection probabilities toward uniform use of the codebook. Both are
//! assembled from graph ops so gradients flow through everything, including
//! the straight-through quantizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::model::{sample_mask, MaskSpec, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainHyper {
    /// Number of distractors per masked frame.
    pub k: usize,
    /// Contrastive temperature.
    pub kappa: f64,
    /// Weight of the diversity term.
    pub alpha: f64,
    /// Hard straight-through selections (the training default) versus the
    /// soft relaxation, which keeps the whole loss differentiable.
    #[serde(default = "default_hard")]
    pub hard_quantizer: bool,
}

fn default_hard() -> bool {
    true
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper { k: 10, kappa: 0.1, alpha: 0.1, hard_quantizer: true }
    }
}

impl PretrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("need at least one distractor".into()));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "contrastive temperature {} must be positive",
                self.kappa
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "diversity weight {} must be non-negative",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// InfoNCE over cosine similarities at temperature `kappa`.
///
/// Distractors are sampled without replacement from the other masked frames,
/// so at least `k + 1` frames must be masked.
pub fn contrastive_loss<T: Scalar>(
    g: &Graph<T>,
    context: Value,
    codes: Value,
    masked: &[usize],
    k: usize,
    kappa: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Value> {
    if masked.len() < k + 1 {
        return Err(Error::TooFewMaskedFrames { masked: masked.len(), k });
    }
    let m = masked.len();
    let c = g.gather_rows(context, masked)?;
    let pos = g.gather_rows(codes, masked)?;
    let mut cols = vec![g.cosine_rows(c, pos)?];

    // distractor draw j for every anchor, one gather per column
    let mut draws: Vec<Vec<usize>> = Vec::with_capacity(m);
    for (i, _) in masked.iter().enumerate() {
        let mut others: Vec<usize> =
            masked.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &t)| t).collect();
        let n = others.len();
        for j in 0..k {
            let pick = j + rng.gen_range(0..n - j);
            others.swap(j, pick);
        }
        others.truncate(k);
        draws.push(others);
    }
    for j in 0..k {
        let idx: Vec<usize> = draws.iter().map(|d| d[j]).collect();
        let neg = g.gather_rows(codes, &idx)?;
        cols.push(g.cosine_rows(c, neg)?);
    }
    let logits = g.scale(g.stack_cols(&cols)?, T::from_f64c(1.0 / kappa));
    g.cross_entropy(logits, &vec![0usize; m])
}

/// Diversity penalty over selection probabilities.
///
/// `probs` holds one row per (frame, group) pair, frame-major. Rows are
/// averaged per group and scored by the exponentiated entropy `e_g`; the
/// loss is `1 - sum(e_g) / (G * V)`, clamped to its feasible range
/// `[0, 1 - 1/V]`. Returns the loss node and the mean `e_g` (perplexity).
pub fn diversity_loss<T: Scalar>(
    g: &Graph<T>,
    probs: Value,
    groups: usize,
    entries: usize,
) -> Result<(Value, f64)> {
    let shape = g.shape(probs);
    if shape.len() != 2 || shape[1] != entries || shape[0] % groups != 0 || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "diversity expects [frames * {groups}, {entries}] probabilities, got {shape:?}"
        )));
    }
    {
        let t = g.value_ref(probs);
        for r in 0..shape[0] {
            let mut s = T::zero();
            let mut ok = true;
            for &p in t.row(r) {
                if p < T::zero() {
                    ok = false;
                }
                s += p;
            }
            let dev = (s - T::one()).abs();
            if !ok || dev > T::from_f64c(1e-4) {
                return Err(Error::InvalidArgument(format!(
                    "diversity input row {r} is not a probability vector (sum {})",
                    s.to_f64().unwrap_or(f64::NAN)
                )));
            }
        }
    }
    let m = shape[0] / groups;
    let grouped = g.reshape(probs, vec![m, groups, entries])?;
    let mean = g.mean_axis0(grouped)?;
    let e = g.exp_entropy_rows(mean)?;
    // the exp-entropy of a V-outcome distribution lies in [1, V]; the exp/ln
    // round trip can land one ulp outside at the degenerate ends, and the
    // one-hot value is pinned down only if we pull it back onto the range
    let e = g.clamp(e, T::one(), T::from_f64c(entries as f64));
    let s = g.sum_all(e);
    let perplexity = {
        let t = g.value_ref(e);
        let total: f64 = t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        total / groups as f64
    };
    let scaled = g.add_const(
        g.scale(s, T::from_f64c(-1.0 / (groups * entries) as f64)),
        T::one(),
    );
    let hi = T::from_f64c(1.0 - 1.0 / entries as f64);
    Ok((g.clamp(scaled, T::zero(), hi), perplexity))
}

/// Mean cross entropy of frame logits against integer labels.
pub fn fce_loss<T: Scalar>(g: &Graph<T>, logits: Value, labels: &[usize]) -> Result<Value> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels do not match logits shape {shape:?}",
            labels.len()
        )));
    }
    g.cross_entropy(logits, labels)
}

/// Fraction of frames whose argmax logit matches the label.
pub fn frame_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let t = labels.len();
    if t == 0 || logits.shape().len() != 2 || logits.shape()[0] != t {
        return 0.0;
    }
    let mut hits = 0usize;
    for (r, &want) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == want {
            hits += 1;
        }
    }
    hits as f64 / t as f64
}

/// RNG streams consumed by one utterance's pre-training forward pass.
pub struct PretrainRngs {
    pub mask: ChaCha8Rng,
    pub gumbel: ChaCha8Rng,
    pub distractors: ChaCha8Rng,
    pub dropout: Option<ChaCha8Rng>,
}

/// Loss terms for one utterance.
pub struct PretrainTerms {
    pub total: Value,
    pub contrastive: Value,
    pub diversity: Value,
    pub perplexity: f64,
    pub masked_frames: usize,
    pub masked_fraction: f64,
}

/// Masked-prediction loss for a single utterance: contrastive plus
/// `alpha` times diversity, both restricted to the masked frames.
pub fn pretrain_utterance_loss<T: Scalar>(
    g: &Graph<T>,
    model: &Model<T>,
    leaves: &indexmap::IndexMap<String, Value>,
    audio: &AudioBuffer,
    mask_spec: &MaskSpec,
    hyper: &PretrainHyper,
    rngs: &mut PretrainRngs,
) -> Result<PretrainTerms> {
    mask_spec.validate()?;
    hyper.validate()?;
    let frames = model.geometry()?.output_len(audio.samples.len())?;
    let masked = sample_mask(frames, mask_spec, &mut rngs.mask);
    if masked.len() < hyper.k + 1 {
        return Err(Error::TooFewMaskedFrames { masked: masked.len(), k: hyper.k });
    }
    let arts = model.encode(g, leaves, audio, &masked, rngs.dropout.as_mut())?;
    let qz =
        model.quantize(g, leaves, arts.features, Some(&mut rngs.gumbel), hyper.hard_quantizer)?;
    let contrastive = contrastive_loss(
        g,
        arts.context,
        qz.codes,
        &masked,
        hyper.k,
        hyper.kappa,
        &mut rngs.distractors,
    )?;
    let groups = model.spec.quantizer.groups;
    let rows: Vec<usize> =
        masked.iter().flat_map(|&t| (0..groups).map(move |gi| t * groups + gi)).collect();
    let masked_probs = g.gather_rows(qz.probs, &rows)?;
    let (diversity, perplexity) =
        diversity_loss(g, masked_probs, groups, model.spec.quantizer.entries)?;
    let total = g.add(contrastive, g.scale(diversity, T::from_f64c(hyper.alpha)))?;
    Ok(PretrainTerms {
        total,
        contrastive,
        diversity,
        perplexity,
        masked_frames: masked.len(),
        masked_fraction: masked.len() as f64 / frames as f64,
    })
}
