//! The full network: layer fusion, attentive pooling, four task heads and
//! co-attention, with a per-utterance forward pass and its backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coattention::{coattend_backward, coattend_forward, AuxInputs, CoAttentionCache, CoAttentionParams};
use crate::data::{Utterance, NUM_EMOTIONS, NUM_GENDERS};
use crate::error::{Error, Result};
use crate::fusion::{fuse_layers_backward, fuse_layers_forward, select_last, FusionParams, LayerStack};
use crate::heads::{
    AsrCache, AsrHeadParams, ClassifierHeadParams, FirstBlockCache, Phase, DEFAULT_DROPOUT,
};
use crate::losses::TaskMask;
use crate::numerics::Tensor;
use crate::params::{join, ParamSet};
use crate::pooling::{
    attentive_stats_pool_backward, attentive_stats_pool_forward, default_attention_dim, PoolingCache,
    PoolingParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Learnable,
    Last,
}

/// Width settings that are not implied by the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width shared by every head and by co-attention.
    pub hidden_dim: usize,
    pub lstm_hidden: usize,
    /// Pooling bottleneck width; `None` means half the feature width.
    pub attn_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            lstm_hidden: 16,
            attn_dim: None,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be >= 1"));
        }
        if self.lstm_hidden == 0 {
            return Err(Error::config("model.lstm_hidden", "must be >= 1"));
        }
        if self.attn_dim == Some(0) {
            return Err(Error::config("model.attn_dim", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Every extent needed to build a [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub feat_dim: usize,
    pub attn_dim: usize,
    pub hidden_dim: usize,
    pub lstm_hidden: usize,
    pub n_emotions: usize,
    pub n_genders: usize,
    pub n_speakers: usize,
    /// Token vocabulary without the blank.
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelDims {
    /// Reads layer count, feature width, speaker count and vocabulary from
    /// the training corpus.
    pub fn infer(corpus: &[Utterance], cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let first = corpus.first().ok_or(Error::Empty {
            op: "train",
            what: "corpus",
        })?;
        let (layers, feat_dim) = (first.stack.num_layers(), first.stack.feature_dim());
        let mut n_speakers = 2;
        let mut vocab_size = 1;
        for u in corpus {
            u.validate()?;
            if u.stack.num_layers() != layers || u.stack.feature_dim() != feat_dim {
                return Err(Error::dim(
                    "corpus",
                    format!("[{layers}, T, {feat_dim}]"),
                    format!("{:?} in utterance {}", u.stack.tensor().shape(), u.id),
                ));
            }
            n_speakers = n_speakers.max(u.speaker + 1);
            vocab_size = u.tokens.iter().copied().fold(vocab_size, usize::max);
        }
        Ok(ModelDims {
            layers,
            feat_dim,
            attn_dim: cfg.attn_dim.unwrap_or_else(|| default_attention_dim(feat_dim)),
            hidden_dim: cfg.hidden_dim,
            lstm_hidden: cfg.lstm_hidden,
            n_emotions: NUM_EMOTIONS,
            n_genders: NUM_GENDERS,
            n_speakers,
            vocab_size,
            dropout: cfg.dropout,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub pooling: PoolingParams,
    pub emotion: ClassifierHeadParams,
    pub gender: ClassifierHeadParams,
    pub speaker: ClassifierHeadParams,
    pub asr: AsrHeadParams,
    pub coattention: CoAttentionParams,
}

impl ParamSet for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.pooling.visit(&join(prefix, "pooling"), f);
        self.emotion.visit(&join(prefix, "emotion"), f);
        self.gender.visit(&join(prefix, "gender"), f);
        self.speaker.visit(&join(prefix, "speaker"), f);
        self.asr.visit(&join(prefix, "asr"), f);
        self.coattention.visit(&join(prefix, "coattention"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.pooling.visit_mut(&join(prefix, "pooling"), f);
        self.emotion.visit_mut(&join(prefix, "emotion"), f);
        self.gender.visit_mut(&join(prefix, "gender"), f);
        self.speaker.visit_mut(&join(prefix, "speaker"), f);
        self.asr.visit_mut(&join(prefix, "asr"), f);
        self.coattention.visit_mut(&join(prefix, "coattention"), f);
    }
}

impl ModelParams {
    /// Draws every parameter in a fixed order, whatever the ablation toggles,
    /// so runs that differ only in toggles share their initial weights.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &ModelDims) -> Self {
        let pooled = 2 * dims.feat_dim;
        let h = dims.hidden_dim;
        ModelParams {
            fusion: FusionParams::new(dims.layers),
            pooling: PoolingParams::init(rng, dims.feat_dim, dims.attn_dim),
            emotion: ClassifierHeadParams::init(rng, pooled, h, dims.n_emotions, dims.dropout),
            gender: ClassifierHeadParams::init(rng, pooled, h, dims.n_genders, dims.dropout),
            speaker: ClassifierHeadParams::init(rng, pooled, h, dims.n_speakers, dims.dropout),
            asr: AsrHeadParams::init(rng, dims.feat_dim, dims.lstm_hidden, h, dims.vocab_size, dims.dropout),
            coattention: CoAttentionParams::init(rng, h, h, h, h, h),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.fusion.layer_logits.len(),
            feat_dim: self.pooling.feature_dim(),
            attn_dim: self.pooling.v_att.len(),
            hidden_dim: self.emotion.d_hidden(),
            lstm_hidden: self.asr.lstm.hidden_dim(),
            n_emotions: self.emotion.n_outputs(),
            n_genders: self.gender.n_outputs(),
            n_speakers: self.speaker.n_outputs(),
            vocab_size: self.asr.vocab_size(),
            dropout: self.emotion.dropout,
        }
    }
}

/// Which parts of the graph are live for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardPlan {
    pub fusion: FusionMode,
    /// Auxiliary heads to run; `TaskMask::NONE` is single-task.
    pub tasks: TaskMask,
    pub coattention: bool,
}

impl ForwardPlan {
    pub const BASELINE: ForwardPlan = ForwardPlan {
        fusion: FusionMode::Learnable,
        tasks: TaskMask::NONE,
        coattention: false,
    };
}

#[derive(Debug, Clone)]
pub struct Outputs {
    /// Pooled utterance vector `[2D]`.
    pub pooled: Tensor,
    pub emotion: Tensor,
    pub gender: Option<Tensor>,
    pub speaker: Option<Tensor>,
    /// Frame logits `[T, vocab + 1]`.
    pub asr: Option<Tensor>,
    pub fusion_weights: Option<Vec<f64>>,
    pub coattention_weights: Option<Vec<f64>>,
}

struct HeadTrace {
    first: FirstBlockCache,
    hidden1: Tensor,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    plan: ForwardPlan,
    seq: Tensor,
    pooling: PoolingCache,
    emotion: HeadTrace,
    emotion_second_input: Tensor,
    coattention: Option<CoAttentionCache>,
    gender: Option<HeadTrace>,
    speaker: Option<HeadTrace>,
    asr: Option<AsrCache>,
}

fn first_block(
    head: &ClassifierHeadParams,
    pooled: &Tensor,
    phase: &mut Phase<'_>,
) -> Result<HeadTrace> {
    let (hidden1, first) = head.first_block(pooled, phase)?;
    Ok(HeadTrace { first, hidden1 })
}

/// Runs the network on one utterance. Dropout draws follow the order
/// emotion, gender, speaker, speech.
pub fn forward(
    params: &ModelParams,
    stack: &LayerStack,
    plan: &ForwardPlan,
    phase: &mut Phase<'_>,
) -> Result<(Outputs, ForwardCache)> {
    let (seq, fusion_weights) = match plan.fusion {
        FusionMode::Learnable => {
            let (s, w) = fuse_layers_forward(stack, &params.fusion)?;
            (s, Some(w))
        }
        FusionMode::Last => (select_last(stack), None),
    };
    let (pooled, pooling) = attentive_stats_pool_forward(&seq, &params.pooling)?;
    let pooled_row = Tensor::matrix(1, pooled.len(), pooled.data().to_vec())?;

    let emotion = first_block(&params.emotion, &pooled_row, &mut phase.reborrow())?;
    let gender = match plan.tasks.gender {
        true => Some(first_block(&params.gender, &pooled_row, &mut phase.reborrow())?),
        false => None,
    };
    let speaker = match plan.tasks.speaker {
        true => Some(first_block(&params.speaker, &pooled_row, &mut phase.reborrow())?),
        false => None,
    };
    let (asr_logits, asr) = match plan.tasks.asr {
        true => {
            let (act, cache) = params.asr.forward(&seq, &mut phase.reborrow())?;
            (Some(act.logits), Some(cache))
        }
        false => (None, None),
    };

    let (emotion_second_input, coattention) = if plan.coattention && plan.tasks.any() {
        let aux = AuxInputs {
            gender: gender.as_ref().map(|g| &g.hidden1),
            speaker: speaker.as_ref().map(|s| &s.hidden1),
            asr: asr.as_ref().map(|a| &a.head.second_input),
        };
        let (z, cache) = coattend_forward(&emotion.hidden1, aux, &params.coattention)?;
        (Tensor::matrix(1, z.len(), z.into_data())?, Some(cache))
    } else {
        (emotion.hidden1.clone(), None)
    };

    let emotion_logits = params.emotion.second_block(&emotion_second_input)?;
    let gender_logits = match &gender {
        Some(g) => Some(params.gender.second_block(&g.hidden1)?),
        None => None,
    };
    let speaker_logits = match &speaker {
        Some(s) => Some(params.speaker.second_block(&s.hidden1)?),
        None => None,
    };

    let outputs = Outputs {
        pooled,
        emotion: Tensor::vector(emotion_logits.into_data()),
        gender: gender_logits.map(|t| Tensor::vector(t.into_data())),
        speaker: speaker_logits.map(|t| Tensor::vector(t.into_data())),
        asr: asr_logits,
        fusion_weights,
        coattention_weights: coattention.as_ref().map(|c| c.weights.clone()),
    };
    let cache = ForwardCache {
        plan: *plan,
        seq,
        pooling,
        emotion,
        emotion_second_input,
        coattention,
        gender,
        speaker,
        asr,
    };
    Ok((outputs, cache))
}

/// Loss gradients with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub emotion: Tensor,
    pub gender: Option<Tensor>,
    pub speaker: Option<Tensor>,
    pub asr: Option<Tensor>,
    /// Gradient arriving directly on the pooled vector (contrastive term).
    pub pooled: Option<Vec<f64>>,
}

fn as_row(v: &Tensor) -> Tensor {
    Tensor::matrix(1, v.len(), v.data().to_vec()).expect("row vector")
}

/// Accumulates parameter gradients for one utterance into `grads`.
pub fn backward(
    params: &ModelParams,
    stack: &LayerStack,
    cache: &ForwardCache,
    d_out: &OutputGrads,
    grads: &mut ModelParams,
) {
    let mut d_pooled = vec![0.0; cache.pooling_width()];
    if let Some(p) = &d_out.pooled {
        crate::numerics::axpy(&mut d_pooled, 1.0, p);
    }

    let d_z = params
        .emotion
        .second_block_backward(&cache.emotion_second_input, &as_row(&d_out.emotion), &mut grads.emotion);
    let mut d_gender_h1 = None;
    let mut d_speaker_h1 = None;
    let mut d_asr_h1 = None;
    let d_emo_h1 = match &cache.coattention {
        Some(co) => {
            let g = coattend_backward(&params.coattention, co, d_z.data(), &mut grads.coattention);
            d_gender_h1 = g.gender.map(|t| as_row(&t));
            d_speaker_h1 = g.speaker.map(|t| as_row(&t));
            d_asr_h1 = g.asr;
            as_row(&g.emotion)
        }
        None => d_z,
    };
    let dx = params
        .emotion
        .first_block_backward(&cache.emotion.first, &d_emo_h1, &mut grads.emotion);
    crate::numerics::axpy(&mut d_pooled, 1.0, dx.data());

    for (trace, head, grad, d_logits, extra) in [
        (&cache.gender, &params.gender, &mut grads.gender, &d_out.gender, d_gender_h1),
        (&cache.speaker, &params.speaker, &mut grads.speaker, &d_out.speaker, d_speaker_h1),
    ] {
        let Some(trace) = trace else { continue };
        let mut d_h = match d_logits {
            Some(dl) => head.second_block_backward(&trace.hidden1, &as_row(dl), grad),
            None => Tensor::zeros(trace.hidden1.shape()),
        };
        if let Some(e) = extra {
            d_h.add_assign(&e);
        }
        let dx = head.first_block_backward(&trace.first, &d_h, grad);
        crate::numerics::axpy(&mut d_pooled, 1.0, dx.data());
    }

    let mut d_seq = attentive_stats_pool_backward(&cache.seq, &params.pooling, &cache.pooling, &d_pooled);
    grads.pooling.w_att.add_assign(&d_seq.params.w_att);
    grads.pooling.b_att.add_assign(&d_seq.params.b_att);
    grads.pooling.v_att.add_assign(&d_seq.params.v_att);

    if let Some(asr) = &cache.asr {
        let d_logits = match &d_out.asr {
            Some(d) => d.clone(),
            None => Tensor::zeros(&[cache.seq.rows(), params.asr.head.n_outputs()]),
        };
        let dx = params.asr.backward(asr, &d_logits, d_asr_h1.as_ref(), &mut grads.asr);
        d_seq.seq.add_assign(&dx);
    }

    if cache.plan.fusion == FusionMode::Learnable {
        let weights = params.fusion.weights();
        let g = fuse_layers_backward(stack, &weights, &d_seq.seq);
        grads.fusion.layer_logits.add_assign(&g.layer_logits);
    }
}

impl ForwardCache {
    fn pooling_width(&self) -> usize {
        2 * self.seq.cols()
    }
}
