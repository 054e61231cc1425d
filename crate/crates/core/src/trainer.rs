//! Mini-batch training with Adam.
//!
//! Runs are a pure function of the corpus and the config: parameters are
//! drawn from stream 0 of a ChaCha8 generator seeded with `seed`, and epoch
//! `e` (0-based) shuffles and samples dropout from stream `e + 1`. Resuming
//! from a checkpoint therefore replays the remaining epochs exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{class_counts, Utterance};
use crate::error::{Error, Result};
use crate::heads::Phase;
use crate::losses::{
    cross_entropy_with_grad, ctc_loss_with_grad, swfc_loss_with_grad, LossBreakdown, LossWeights, ObjectiveConfig,
    SwfcConfig, TaskLosses, TaskMask,
};
use crate::model::{backward, forward, FusionMode, ForwardPlan, ModelConfig, ModelDims, ModelParams, OutputGrads};
use crate::numerics::Tensor;
use crate::params::ParamSet;

/// Learning rate reported for fine-tuning a large pretrained backbone.
pub const BACKBONE_FINETUNE_LR: f64 = 1e-5;
/// Default for the small from-scratch heads trained here.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub swfc: SwfcConfig,
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_mtl: bool,
    pub use_coattention: bool,
    pub use_swfc: bool,
    pub fusion_mode: FusionMode,
    pub tasks: TaskMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            swfc: SwfcConfig::default(),
            model: ModelConfig::default(),
            lr: DEFAULT_LEARNING_RATE,
            batch_size: 16,
            epochs: 60,
            seed: 0,
            use_mtl: true,
            use_coattention: true,
            use_swfc: true,
            fusion_mode: FusionMode::Learnable,
            tasks: TaskMask::ALL,
        }
    }
}

impl TrainConfig {
    /// Single-task emotion training with no contrastive term.
    pub fn baseline() -> Self {
        TrainConfig {
            use_mtl: false,
            use_coattention: false,
            use_swfc: false,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.swfc.validate()?;
        self.model.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.use_swfc && self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be >= 2 when use_swfc is set"));
        }
        if self.use_coattention && !self.use_mtl {
            return Err(Error::config("train.use_coattention", "requires use_mtl"));
        }
        Ok(())
    }

    /// Auxiliary heads run only when they carry weight, so `alpha = 0` or an
    /// empty task mask is the single-task graph.
    pub fn plan(&self) -> ForwardPlan {
        let mtl = self.use_mtl && self.objective.alpha > 0.0 && self.tasks.any();
        ForwardPlan {
            fusion: self.fusion_mode,
            tasks: if mtl { self.tasks } else { TaskMask::NONE },
            coattention: mtl && self.use_coattention,
        }
    }

    pub fn swfc_active(&self) -> bool {
        self.use_swfc && self.objective.beta > 0.0
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::new(&self.objective, self.plan().tasks, self.swfc_active())
    }

    /// Fingerprint of everything that shapes the trajectory except the epoch
    /// budget, so a run may be resumed with a larger `epochs`.
    pub fn config_hash(&self) -> u64 {
        let canonical = TrainConfig {
            epochs: 0,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    /// Number of steps taken.
    pub t: u64,
}

impl<P: ParamSet + Clone> AdamState<P> {
    pub fn new(params: &P) -> Self {
        AdamState {
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient
/// entry is non-finite.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState<P>, lr: f64) -> Result<()> {
    for (name, g) in grads.named_tensors() {
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}[{pos}]"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let grads = grads.named_tensors();
    let ms = state.m.named_tensors_mut();
    let vs = state.v.named_tensors_mut();
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.named_tensors_mut().into_iter().zip(grads).zip(ms.into_iter().zip(vs)) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState<ModelParams>,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&mut rng, dims);
        let adam = AdamState::new(&params);
        TrainState { params, adam, epoch: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub batches: Vec<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Contiguous batches of `size`; a trailing singleton joins the previous
/// batch so every batch can form contrastive pairs.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 && size > 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn scaled_vector(t: Tensor, factor: f64) -> Tensor {
    let mut v = Tensor::vector(t.into_data());
    v.scale(factor);
    v
}

struct BatchContext<'a> {
    cfg: &'a TrainConfig,
    plan: ForwardPlan,
    weights: LossWeights,
    class_counts: Vec<usize>,
}

fn train_batch(
    ctx: &BatchContext<'_>,
    params: &ModelParams,
    corpus: &[Utterance],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, ModelParams)> {
    let n = batch.len() as f64;
    let w = &ctx.weights;
    let mut parts = TaskLosses::default();
    let mut traces = Vec::with_capacity(batch.len());
    let mut d_outs = Vec::with_capacity(batch.len());
    for &i in batch {
        let u = &corpus[i];
        let (out, cache) = forward(params, &u.stack, &ctx.plan, &mut Phase::Train(&mut *rng))?;
        let (l, g) = cross_entropy_with_grad(&out.emotion, &[u.emotion])?;
        parts.emotion += l / n;
        let mut d = OutputGrads {
            emotion: scaled_vector(g, w.emotion / n),
            gender: None,
            speaker: None,
            asr: None,
            pooled: None,
        };
        if let Some(logits) = &out.gender {
            let (l, g) = cross_entropy_with_grad(logits, &[u.gender])?;
            parts.gender += l / n;
            d.gender = Some(scaled_vector(g, w.gender / n));
        }
        if let Some(logits) = &out.speaker {
            let (l, g) = cross_entropy_with_grad(logits, &[u.speaker])?;
            parts.speaker += l / n;
            d.speaker = Some(scaled_vector(g, w.speaker / n));
        }
        if let Some(logits) = &out.asr {
            let (l, mut g) = ctc_loss_with_grad(logits, &u.tokens)?;
            parts.asr += l / n;
            g.scale(w.asr / n);
            d.asr = Some(g);
        }
        traces.push((out.pooled, cache));
        d_outs.push(d);
    }

    if ctx.cfg.swfc_active() && batch.len() >= 2 {
        let rows: Vec<&[f64]> = traces.iter().map(|(p, _)| p.data()).collect();
        let emb = Tensor::from_rows(&rows)?;
        let labels: Vec<usize> = batch.iter().map(|&i| corpus[i].emotion).collect();
        let (l, g) = swfc_loss_with_grad(&emb, &labels, &ctx.cfg.swfc, &ctx.class_counts)?;
        parts.swfc = l;
        for (k, d) in d_outs.iter_mut().enumerate() {
            d.pooled = Some(g.row(k).iter().map(|v| v * w.swfc).collect());
        }
    }

    let breakdown = LossBreakdown::from_parts(parts, *w);
    let mut grads = params.zeroed();
    for ((&i, (_, cache)), d) in batch.iter().zip(&traces).zip(&d_outs) {
        backward(params, &corpus[i].stack, cache, d, &mut grads);
    }
    Ok((breakdown, grads))
}

/// Runs one epoch and advances `state`.
pub fn train_epoch(state: &mut TrainState, corpus: &[Utterance], cfg: &TrainConfig) -> Result<EpochLog> {
    let ctx = BatchContext {
        cfg,
        plan: cfg.plan(),
        weights: cfg.loss_weights(),
        class_counts: class_counts(corpus),
    };
    let mut rng = epoch_rng(cfg.seed, state.epoch);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);

    let epoch = state.epoch + 1;
    let mut logs = Vec::new();
    let mut sum = TaskLosses::default();
    for (b, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
        let (loss, grads) = train_batch(&ctx, &state.params, corpus, batch, &mut rng)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at epoch {epoch}, batch {}", b + 1),
            });
        }
        adam_step(&mut state.params, &grads, &mut state.adam, cfg.lr).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} at epoch {epoch}, batch {}", b + 1),
            },
            other => other,
        })?;
        let k = batch.len() as f64 / corpus.len() as f64;
        sum.emotion += k * loss.l_emotion;
        sum.gender += k * loss.l_gender;
        sum.speaker += k * loss.l_speaker;
        sum.asr += k * loss.l_asr;
        sum.swfc += k * loss.l_swfc;
        logs.push(loss);
    }
    state.epoch = epoch;
    Ok(EpochLog {
        epoch,
        loss: LossBreakdown::from_parts(sum, ctx.weights),
        batches: logs,
    })
}

/// Trains from `state` until `cfg.epochs` epochs are complete, calling
/// `on_epoch` after each one.
pub fn fit(
    state: &mut TrainState,
    corpus: &[Utterance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_corpus(&state.params, corpus)?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let entry = train_epoch(state, corpus, cfg)?;
        log::debug!(
            "epoch {} total {:.6} emotion {:.6} swfc {:.6}",
            entry.epoch,
            entry.loss.total,
            entry.loss.l_emotion,
            entry.loss.l_swfc
        );
        on_epoch(&entry, state)?;
        log.push(entry);
    }
    Ok(log)
}

fn check_corpus(params: &ModelParams, corpus: &[Utterance]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty {
            op: "train",
            what: "corpus",
        });
    }
    let dims = params.dims();
    for u in corpus {
        u.validate()?;
        if u.speaker >= dims.n_speakers {
            return Err(Error::LabelOutOfRange {
                what: "speaker",
                value: u.speaker as i64,
                limit: dims.n_speakers,
            });
        }
        if let Some(&t) = u.tokens.iter().find(|&&t| t > dims.vocab_size) {
            return Err(Error::LabelOutOfRange {
                what: "token",
                value: t as i64,
                limit: dims.vocab_size + 1,
            });
        }
    }
    Ok(())
}

/// Fresh run: infers model dimensions from `corpus` and trains for
/// `cfg.epochs` epochs.
pub fn train(corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = ModelDims::infer(corpus, &cfg.model)?;
    let mut state = TrainState::new(&dims, cfg.seed);
    let log = fit(&mut state, corpus, cfg, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        params: state.params,
        log,
    })
}
