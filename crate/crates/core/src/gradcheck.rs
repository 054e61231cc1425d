//! Finite-difference verification of every hand-written backward pass.
//!
//! Each op is checked at many random points. The objective is a random
//! projection `<probe, op(inputs, params)>` (or the loss itself for loss
//! functions), and inputs and parameters are perturbed jointly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coattention::{coattend_backward, coattend_forward, AuxInputs, CoAttentionParams};
use crate::error::Result;
use crate::fusion::{fuse_layers_backward, fuse_layers_forward, FusionParams, LayerStack};
use crate::heads::{ClassifierHeadParams, LstmParams, Phase};
use crate::losses::{
    cross_entropy_with_grad, ctc_loss_with_grad, ctc_min_frames, swfc_loss_with_grad, SwfcConfig, SwfcVariant,
    TaskMask, WeightMode,
};
use crate::model::{backward, forward, FusionMode, ForwardPlan, ModelDims, ModelParams, OutputGrads};
use crate::numerics::{
    affine, affine_backward, dot, finite_diff_check, layer_norm_backward, layer_norm_forward, relu, relu_backward,
    sigmoid, sigmoid_backward, softmax, softmax_backward, tanh, tanh_backward, GradCheckReport, Tensor,
    LAYER_NORM_EPS,
};
use crate::params::ParamSet;
use crate::pooling::{attentive_stats_pool_backward, attentive_stats_pool_forward, PoolingParams};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRAD_CHECK_POINTS: usize = 100;

/// One random instance: a flat point, the analytic gradient there, and the
/// scalar function it claims to differentiate.
struct Case {
    point: Vec<f64>,
    analytic: Vec<f64>,
    eval: Box<dyn Fn(&[f64]) -> f64>,
}

type Maker = fn(&mut ChaCha8Rng) -> Result<Case>;

const OPS: [(&str, Maker); 15] = [
    ("affine", affine_case),
    ("softmax", softmax_case),
    ("layer_norm", layer_norm_case),
    ("relu", relu_case),
    ("tanh", tanh_case),
    ("sigmoid", sigmoid_case),
    ("layer_fusion", fusion_case),
    ("attentive_pooling", pooling_case),
    ("classifier_head", classifier_case),
    ("lstm", lstm_case),
    ("coattention", coattention_case),
    ("cross_entropy", cross_entropy_case),
    ("ctc", ctc_case),
    ("swfc_eq2_literal", |r| swfc_case(r, SwfcVariant::Eq2Literal)),
    ("swfc_focal_supcon", |r| swfc_case(r, SwfcVariant::FocalSupcon)),
];

/// Names of the individually checked ops, in report order (the full model
/// check comes last).
pub fn grad_check_ops() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).chain(["full_model"]).collect()
}

/// Checks every op at `points` random points; the report holds the worst
/// relative error seen per op.
pub fn run_grad_checks(points: usize, seed: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::with_capacity(OPS.len() + 1);
    for (i, (name, make)) in OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        reports.push(check_op(name, points, tolerance, &mut rng, *make)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(OPS.len() as u64 + 1);
    // The whole network is far more expensive per point.
    let model_points = points.div_ceil(10).max(1);
    reports.push(check_op("full_model", model_points, tolerance, &mut rng, model_case)?);
    Ok(reports)
}

fn check_op(name: &str, points: usize, tolerance: f64, rng: &mut ChaCha8Rng, make: Maker) -> Result<GradCheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..points {
        let case = make(rng)?;
        let r = finite_diff_check(name, &case.point, &case.analytic, tolerance, |x| (case.eval)(x))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, scale)).expect("shape")
}

/// Splits a flat vector into tensors of the given shapes.
fn unpack(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).expect("shape");
            off += n;
            t
        })
        .collect()
}

fn pack(parts: &[&Tensor]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn shapes(parts: &[&Tensor]) -> Vec<Vec<usize>> {
    parts.iter().map(|t| t.shape().to_vec()).collect()
}

fn affine_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (x, w, b) = (random(rng, &[3, 4], 1.0), random(rng, &[4, 5], 1.0), random(rng, &[5], 1.0));
    let probe = random(rng, &[3, 5], 1.0);
    let g = affine_backward(&x, &w, &probe);
    let sh = shapes(&[&x, &w, &b]);
    Ok(Case {
        point: pack(&[&x, &w, &b]),
        analytic: pack(&[&g.dx, &g.dw, &g.db]),
        eval: Box::new(move |f| {
            let t = unpack(f, &sh);
            dot(affine(&t[0], &t[1], &t[2]).expect("affine").data(), probe.data())
        }),
    })
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = random(rng, &[3, 5], 2.0);
    let probe = random(rng, &[3, 5], 1.0);
    let y = softmax(&x, 1)?;
    let g = softmax_backward(&y, &probe, 1)?;
    Ok(Case {
        point: x.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(3, 5, f.to_vec()).expect("shape");
            dot(softmax(&x, 1).expect("softmax").data(), probe.data())
        }),
    })
}

fn layer_norm_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = random(rng, &[3, 6], 2.0);
    let gain = random(rng, &[6], 1.5);
    let bias = random(rng, &[6], 1.0);
    let probe = random(rng, &[3, 6], 1.0);
    let (_, cache) = layer_norm_forward(&x, &gain, &bias, LAYER_NORM_EPS)?;
    let (dx, dg, db) = layer_norm_backward(&cache, &gain, &probe);
    let sh = shapes(&[&x, &gain, &bias]);
    Ok(Case {
        point: pack(&[&x, &gain, &bias]),
        analytic: pack(&[&dx, &dg, &db]),
        eval: Box::new(move |f| {
            let t = unpack(f, &sh);
            let (y, _) = layer_norm_forward(&t[0], &t[1], &t[2], LAYER_NORM_EPS).expect("layer norm");
            dot(y.data(), probe.data())
        }),
    })
}

/// Inputs are kept at least 0.1 away from the kink.
fn relu_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let data = (0..20)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::matrix(4, 5, data)?;
    let probe = random(rng, &[4, 5], 1.0);
    let g = relu_backward(&x, &probe);
    Ok(Case {
        point: x.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(4, 5, f.to_vec()).expect("shape");
            dot(relu(&x).data(), probe.data())
        }),
    })
}

fn tanh_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = random(rng, &[4, 5], 2.0);
    let probe = random(rng, &[4, 5], 1.0);
    let g = tanh_backward(&tanh(&x), &probe);
    Ok(Case {
        point: x.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(4, 5, f.to_vec()).expect("shape");
            dot(tanh(&x).data(), probe.data())
        }),
    })
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let x = random(rng, &[4, 5], 3.0);
    let probe = random(rng, &[4, 5], 1.0);
    let g = sigmoid_backward(&sigmoid(&x), &probe);
    Ok(Case {
        point: x.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(4, 5, f.to_vec()).expect("shape");
            dot(sigmoid(&x).data(), probe.data())
        }),
    })
}

fn fusion_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (l, t, d) = (4, 3, 3);
    let stack = random(rng, &[l, t, d], 1.0);
    let logits = random(rng, &[l], 1.5);
    let probe = random(rng, &[t, d], 1.0);
    let st = LayerStack::new(stack.clone())?;
    let params = FusionParams { layer_logits: logits.clone() };
    let (_, weights) = fuse_layers_forward(&st, &params)?;
    let g = fuse_layers_backward(&st, &weights, &probe);
    let sh = shapes(&[&stack, &logits]);
    Ok(Case {
        point: pack(&[&stack, &logits]),
        analytic: pack(&[&g.stack, &g.layer_logits]),
        eval: Box::new(move |f| {
            let mut parts = unpack(f, &sh).into_iter();
            let st = LayerStack::new(parts.next().unwrap()).expect("stack");
            let params = FusionParams { layer_logits: parts.next().unwrap() };
            dot(fuse_layers_forward(&st, &params).expect("fusion").0.data(), probe.data())
        }),
    })
}

fn pooling_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let seq = random(rng, &[5, 4], 1.5);
    let params = PoolingParams::init(rng, 4, 3);
    let probe = uniform(rng, 8, 1.0);
    let (_, cache) = attentive_stats_pool_forward(&seq, &params)?;
    let g = attentive_stats_pool_backward(&seq, &params, &cache, &probe);
    let mut point = seq.data().to_vec();
    point.extend(params.flatten());
    let mut analytic = g.seq.into_data();
    analytic.extend(g.params.flatten());
    let n = seq.len();
    Ok(Case {
        point,
        analytic,
        eval: Box::new(move |f| {
            let seq = Tensor::matrix(5, 4, f[..n].to_vec()).expect("shape");
            let mut p = params.clone();
            p.assign_flat(&f[n..]);
            dot(attentive_stats_pool_forward(&seq, &p).expect("pool").0.data(), &probe)
        }),
    })
}

/// Both head blocks in evaluation mode on a small batch.
fn classifier_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut params = ClassifierHeadParams::init(rng, 5, 6, 4, 0.0);
    params.ln_gain = random(rng, &[6], 1.5);
    params.ln_bias = random(rng, &[6], 0.5);
    let x = random(rng, &[3, 5], 1.5);
    let probe = random(rng, &[3, 4], 1.0);
    let (_, cache) = params.forward(&x, &mut Phase::Eval)?;
    let mut grads = params.zeroed();
    let dx = params.backward(&cache, &probe, &mut grads);
    let mut point = x.data().to_vec();
    point.extend(params.flatten());
    let mut analytic = dx.into_data();
    analytic.extend(grads.flatten());
    let n = x.len();
    Ok(Case {
        point,
        analytic,
        eval: Box::new(move |f| {
            let x = Tensor::matrix(3, 5, f[..n].to_vec()).expect("shape");
            let mut p = params.clone();
            p.assign_flat(&f[n..]);
            let (act, _) = p.forward(&x, &mut Phase::Eval).expect("head");
            dot(act.logits.data(), probe.data())
        }),
    })
}

fn lstm_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut params = LstmParams::init(rng, 3, 3);
    params.b = random(rng, &[12], 1.0);
    let seq = random(rng, &[4, 3], 1.5);
    let probe = random(rng, &[4, 3], 1.0);
    let (_, cache) = params.forward(&seq)?;
    let mut grads = params.zeroed();
    let d_seq = params.backward(&cache, &probe, &mut grads);
    let mut point = seq.data().to_vec();
    point.extend(params.flatten());
    let mut analytic = d_seq.into_data();
    analytic.extend(grads.flatten());
    let n = seq.len();
    Ok(Case {
        point,
        analytic,
        eval: Box::new(move |f| {
            let seq = Tensor::matrix(4, 3, f[..n].to_vec()).expect("shape");
            let mut p = params.clone();
            p.assign_flat(&f[n..]);
            dot(p.forward(&seq).expect("lstm").0.data(), probe.data())
        }),
    })
}

fn coattention_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let d = 4;
    let params = CoAttentionParams::init(rng, d, d, d, d, 3);
    let emo = random(rng, &[d], 1.0);
    let gen = random(rng, &[d], 1.0);
    let spk = random(rng, &[d], 1.0);
    let asr = random(rng, &[5, d], 1.0);
    let probe = uniform(rng, 3, 1.0);
    let aux = AuxInputs {
        gender: Some(&gen),
        speaker: Some(&spk),
        asr: Some(&asr),
    };
    let (_, cache) = coattend_forward(&emo, aux, &params)?;
    let mut grads = params.zeroed();
    let g = coattend_backward(&params, &cache, &probe, &mut grads);
    let sh = shapes(&[&emo, &gen, &spk, &asr]);
    let mut point = pack(&[&emo, &gen, &spk, &asr]);
    let n = point.len();
    point.extend(params.flatten());
    let mut analytic = pack(&[&g.emotion, g.gender.as_ref().unwrap(), g.speaker.as_ref().unwrap(), g.asr.as_ref().unwrap()]);
    analytic.extend(grads.flatten());
    Ok(Case {
        point,
        analytic,
        eval: Box::new(move |f| {
            let t = unpack(&f[..n], &sh);
            let mut p = params.clone();
            p.assign_flat(&f[n..]);
            let aux = AuxInputs {
                gender: Some(&t[1]),
                speaker: Some(&t[2]),
                asr: Some(&t[3]),
            };
            dot(coattend_forward(&t[0], aux, &p).expect("coattend").0.data(), &probe)
        }),
    })
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let logits = random(rng, &[3, 5], 2.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    let (_, g) = cross_entropy_with_grad(&logits, &labels)?;
    Ok(Case {
        point: logits.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(3, 5, f.to_vec()).expect("shape");
            cross_entropy_with_grad(&x, &labels).expect("ce").0
        }),
    })
}

fn ctc_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (t_len, vocab) = (7, 3);
    let target = loop {
        let len = rng.random_range(1..=4);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=vocab)).collect();
        if ctc_min_frames(&target) <= t_len {
            break target;
        }
    };
    let logits = random(rng, &[t_len, vocab + 1], 2.0);
    let (_, g) = ctc_loss_with_grad(&logits, &target)?;
    Ok(Case {
        point: logits.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(t_len, vocab + 1, f.to_vec()).expect("shape");
            ctc_loss_with_grad(&x, &target).expect("ctc").0
        }),
    })
}

fn swfc_case(rng: &mut ChaCha8Rng, variant: SwfcVariant) -> Result<Case> {
    let (n, e) = (6, 4);
    let emb = random(rng, &[n, e], 1.0);
    let labels: Vec<usize> = (0..n).map(|i| if i < 3 { i } else { rng.random_range(0..3) }).collect();
    let cfg = SwfcConfig {
        tau: 0.5,
        gamma: 2.0,
        variant,
        weight_mode: WeightMode::InverseFrequency,
    };
    let counts = [5, 3, 2];
    let (_, g) = swfc_loss_with_grad(&emb, &labels, &cfg, &counts)?;
    Ok(Case {
        point: emb.data().to_vec(),
        analytic: g.into_data(),
        eval: Box::new(move |f| {
            let x = Tensor::matrix(n, e, f.to_vec()).expect("shape");
            swfc_loss_with_grad(&x, &labels, &cfg, &counts).expect("swfc").0
        }),
    })
}

const MODEL_DIMS: ModelDims = ModelDims {
    layers: 3,
    feat_dim: 4,
    attn_dim: 2,
    hidden_dim: 5,
    lstm_hidden: 3,
    n_emotions: 4,
    n_genders: 2,
    n_speakers: 3,
    vocab_size: 2,
    dropout: 0.0,
};

const MODEL_PLAN: ForwardPlan = ForwardPlan {
    fusion: FusionMode::Learnable,
    tasks: TaskMask::ALL,
    coattention: true,
};

/// Sum of every task loss plus a projection of the pooled vector.
fn model_objective(params: &ModelParams, stack: &LayerStack, probe: &[f64], target: &[usize]) -> (f64, OutputGrads) {
    let (out, _) = forward(params, stack, &MODEL_PLAN, &mut Phase::Eval).expect("forward");
    let (le, ge) = cross_entropy_with_grad(&out.emotion, &[1]).expect("ce");
    let (lg, gg) = cross_entropy_with_grad(out.gender.as_ref().unwrap(), &[0]).expect("ce");
    let (ls, gs) = cross_entropy_with_grad(out.speaker.as_ref().unwrap(), &[2]).expect("ce");
    let (la, ga) = ctc_loss_with_grad(out.asr.as_ref().unwrap(), target).expect("ctc");
    let total = le + lg + ls + la + dot(out.pooled.data(), probe);
    let grads = OutputGrads {
        emotion: Tensor::vector(ge.into_data()),
        gender: Some(Tensor::vector(gg.into_data())),
        speaker: Some(Tensor::vector(gs.into_data())),
        asr: Some(ga),
        pooled: Some(probe.to_vec()),
    };
    (total, grads)
}

fn model_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut params = ModelParams::init(rng, &MODEL_DIMS);
    params.fusion.layer_logits = random(rng, &[3], 0.5);
    let stack = LayerStack::new(random(rng, &[3, 5, 4], 1.0))?;
    let probe = uniform(rng, 8, 0.5);
    let target = vec![1, 2];
    let (_, d_out) = model_objective(&params, &stack, &probe, &target);
    let (_, cache) = forward(&params, &stack, &MODEL_PLAN, &mut Phase::Eval)?;
    let mut grads = params.zeroed();
    backward(&params, &stack, &cache, &d_out, &mut grads);
    Ok(Case {
        point: params.flatten(),
        analytic: grads.flatten(),
        eval: Box::new(move |f| {
            let mut p = params.clone();
            p.assign_flat(f);
            model_objective(&p, &stack, &probe, &target).0
        }),
    })
}
