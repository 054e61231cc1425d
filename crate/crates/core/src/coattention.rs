//! Co-attention between the emotion branch and the auxiliary branches.
//!
//! All branch features are projected to a common width `d_c`. The speech
//! branch contributes a frame sequence, which is first summarized by
//! attention with the projected emotion feature as query. Each auxiliary
//! value is then scored against the query, the scores are normalized with a
//! softmax across auxiliaries, and the weighted sum of values is added back
//! onto the projected emotion feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax_backward_slice, softmax_slice, Tensor};
use crate::params::{join, Linear, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionParams {
    pub emotion: Linear,
    pub gender: Linear,
    pub speaker: Linear,
    pub asr: Linear,
}

impl ParamSet for CoAttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.emotion.visit(&join(prefix, "emotion"), f);
        self.gender.visit(&join(prefix, "gender"), f);
        self.speaker.visit(&join(prefix, "speaker"), f);
        self.asr.visit(&join(prefix, "asr"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.emotion.visit_mut(&join(prefix, "emotion"), f);
        self.gender.visit_mut(&join(prefix, "gender"), f);
        self.speaker.visit_mut(&join(prefix, "speaker"), f);
        self.asr.visit_mut(&join(prefix, "asr"), f);
    }
}

impl CoAttentionParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_emotion: usize,
        d_gender: usize,
        d_speaker: usize,
        d_asr: usize,
        d_c: usize,
    ) -> Self {
        CoAttentionParams {
            emotion: Linear::init(rng, d_emotion, d_c),
            gender: Linear::init(rng, d_gender, d_c),
            speaker: Linear::init(rng, d_speaker, d_c),
            asr: Linear::init(rng, d_asr, d_c),
        }
    }

    pub fn d_c(&self) -> usize {
        self.emotion.d_out()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_c() as f64).sqrt()
    }

    fn validate(&self) -> Result<()> {
        let d_c = self.d_c();
        for (name, l) in [("gender", &self.gender), ("speaker", &self.speaker), ("asr", &self.asr)] {
            if l.d_out() != d_c {
                return Err(Error::dim("coattend", format!("{name} projection width {d_c}"), l.d_out()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Auxiliary {
    Gender,
    Speaker,
    Asr,
}

/// Auxiliary branch features; absent branches are excluded from the softmax.
#[derive(Debug, Clone, Copy, Default)]
pub struct AuxInputs<'a> {
    pub gender: Option<&'a Tensor>,
    pub speaker: Option<&'a Tensor>,
    /// First-layer features of the speech branch, `[T, d]`.
    pub asr: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
struct AuxEntry {
    kind: Auxiliary,
    input: Tensor,
    value: Vec<f64>,
    /// Projected frames and frame weights (speech branch only).
    frames: Option<(Tensor, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct CoAttentionCache {
    emo_input: Tensor,
    q: Vec<f64>,
    entries: Vec<AuxEntry>,
    /// Softmax weights across auxiliaries, in gender, speaker, asr order.
    pub weights: Vec<f64>,
}

impl CoAttentionCache {
    pub fn weight_of(&self, kind: Auxiliary) -> Option<f64> {
        self.entries.iter().position(|e| e.kind == kind).map(|i| self.weights[i])
    }
}

fn row_matrix(v: &Tensor) -> Tensor {
    Tensor::matrix(1, v.len(), v.data().to_vec()).expect("row")
}

/// Fuses the emotion feature with gender, speaker and speech features.
pub fn coattend(
    emo: &Tensor,
    gen: &Tensor,
    spk: &Tensor,
    asr_seq: &Tensor,
    params: &CoAttentionParams,
) -> Result<Tensor> {
    let aux = AuxInputs {
        gender: Some(gen),
        speaker: Some(spk),
        asr: Some(asr_seq),
    };
    coattend_forward(emo, aux, params).map(|(o, _)| o)
}

pub fn coattend_forward(
    emo: &Tensor,
    aux: AuxInputs<'_>,
    params: &CoAttentionParams,
) -> Result<(Tensor, CoAttentionCache)> {
    params.validate()?;
    let emo_input = row_matrix(emo);
    if emo_input.cols() != params.emotion.d_in() {
        return Err(Error::dim("coattend", params.emotion.d_in(), emo_input.cols()));
    }
    let q = params.emotion.forward(&emo_input)?.into_data();
    let scale = params.scale();

    let mut entries = Vec::with_capacity(3);
    for (kind, input, proj) in [
        (Auxiliary::Gender, aux.gender, &params.gender),
        (Auxiliary::Speaker, aux.speaker, &params.speaker),
    ] {
        if let Some(x) = input {
            let input = row_matrix(x);
            if input.cols() != proj.d_in() {
                return Err(Error::dim("coattend", proj.d_in(), input.cols()));
            }
            let value = proj.forward(&input)?.into_data();
            entries.push(AuxEntry {
                kind,
                input,
                value,
                frames: None,
            });
        }
    }
    if let Some(seq) = aux.asr {
        if seq.rank() != 2 || seq.cols() != params.asr.d_in() {
            return Err(Error::dim("coattend", format!("[T, {}]", params.asr.d_in()), format!("{:?}", seq.shape())));
        }
        if seq.rows() == 0 {
            return Err(Error::Empty {
                op: "coattend",
                what: "speech frame sequence",
            });
        }
        let projected = params.asr.forward(seq)?;
        let scores: Vec<f64> = (0..projected.rows())
            .map(|t| dot(&q, projected.row(t)) * scale)
            .collect();
        let frame_w = softmax_slice(&scores);
        let mut value = vec![0.0; q.len()];
        for (t, &w) in frame_w.iter().enumerate() {
            axpy(&mut value, w, projected.row(t));
        }
        entries.push(AuxEntry {
            kind: Auxiliary::Asr,
            input: seq.clone(),
            value,
            frames: Some((projected, frame_w)),
        });
    }
    if entries.is_empty() {
        return Err(Error::Empty {
            op: "coattend",
            what: "auxiliary features",
        });
    }

    let scores: Vec<f64> = entries.iter().map(|e| dot(&q, &e.value) * scale).collect();
    let weights = softmax_slice(&scores);
    let mut out = q.clone();
    for (e, &w) in entries.iter().zip(&weights) {
        axpy(&mut out, w, &e.value);
    }
    Ok((
        Tensor::vector(out),
        CoAttentionCache {
            emo_input,
            q,
            entries,
            weights,
        },
    ))
}

/// Input gradients of [`coattend_forward`]; `None` for absent branches.
#[derive(Debug, Clone)]
pub struct CoAttentionInputGrads {
    pub emotion: Tensor,
    pub gender: Option<Tensor>,
    pub speaker: Option<Tensor>,
    pub asr: Option<Tensor>,
}

pub fn coattend_backward(
    params: &CoAttentionParams,
    cache: &CoAttentionCache,
    d_out: &[f64],
    grads: &mut CoAttentionParams,
) -> CoAttentionInputGrads {
    let scale = params.scale();
    let q = &cache.q;
    // out = q + sum_a w_a v_a, w = softmax(scale * <q, v_a>)
    let mut dq = d_out.to_vec();
    let d_w: Vec<f64> = cache.entries.iter().map(|e| dot(d_out, &e.value)).collect();
    let d_scores = softmax_backward_slice(&cache.weights, &d_w);
    let mut result = CoAttentionInputGrads {
        emotion: Tensor::zeros(&[0]),
        gender: None,
        speaker: None,
        asr: None,
    };
    for ((e, &w), &ds) in cache.entries.iter().zip(&cache.weights).zip(&d_scores) {
        let mut dv = vec![0.0; q.len()];
        axpy(&mut dv, w, d_out);
        axpy(&mut dv, ds * scale, q);
        axpy(&mut dq, ds * scale, &e.value);
        match e.kind {
            Auxiliary::Gender | Auxiliary::Speaker => {
                let (proj, grad) = match e.kind {
                    Auxiliary::Gender => (&params.gender, &mut grads.gender),
                    _ => (&params.speaker, &mut grads.speaker),
                };
                let dx = proj.backward(&e.input, &row_matrix(&Tensor::vector(dv)), grad);
                let dx = Tensor::vector(dx.into_data());
                if e.kind == Auxiliary::Gender {
                    result.gender = Some(dx);
                } else {
                    result.speaker = Some(dx);
                }
            }
            Auxiliary::Asr => {
                let (projected, frame_w) = e.frames.as_ref().expect("speech frames");
                // value = sum_t b_t P_t, b = softmax(scale * <q, P_t>)
                let d_b: Vec<f64> = (0..projected.rows()).map(|t| dot(&dv, projected.row(t))).collect();
                let d_fs = softmax_backward_slice(frame_w, &d_b);
                let mut d_proj = Tensor::zeros(&[projected.rows(), projected.cols()]);
                for t in 0..projected.rows() {
                    let row = d_proj.row_mut(t);
                    axpy(row, frame_w[t], &dv);
                    axpy(row, d_fs[t] * scale, q);
                    axpy(&mut dq, d_fs[t] * scale, projected.row(t));
                }
                result.asr = Some(params.asr.backward(&e.input, &d_proj, &mut grads.asr));
            }
        }
    }
    let d_emo = params
        .emotion
        .backward(&cache.emo_input, &row_matrix(&Tensor::vector(dq)), &mut grads.emotion);
    result.emotion = Tensor::vector(d_emo.into_data());
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Linear {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.row_mut(i)[i] = 1.0;
        }
        Linear {
            w,
            b: Tensor::zeros(&[d]),
        }
    }

    fn identity_params(d: usize) -> CoAttentionParams {
        CoAttentionParams {
            emotion: identity(d),
            gender: identity(d),
            speaker: identity(d),
            asr: identity(d),
        }
    }

    #[test]
    fn zero_auxiliary_values_return_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = CoAttentionParams::init(&mut rng, 3, 3, 3, 2, 4);
        p.gender = Linear::zeros(3, 4);
        p.speaker = Linear::zeros(3, 4);
        p.asr = Linear::zeros(2, 4);
        let emo = Tensor::vector(vec![0.4, -1.0, 2.0]);
        let g = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let seq = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = coattend(&emo, &g, &g, &seq, &p).unwrap();
        let q = p.emotion.forward(&row_matrix(&emo)).unwrap();
        assert_eq!(out.data(), q.data());
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let p = identity_params(2);
        let emo = Tensor::vector(vec![1.0, 0.0]);
        let v = Tensor::vector(vec![0.0, 3.0]);
        let seq = Tensor::matrix(1, 2, vec![0.0, -1.0]).unwrap();
        let (_, cache) = coattend_forward(
            &emo,
            AuxInputs {
                gender: Some(&v),
                speaker: Some(&v),
                asr: Some(&seq),
            },
            &p,
        )
        .unwrap();
        for w in &cache.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_dim_worked_example() {
        let p = identity_params(2);
        let emo = Tensor::vector(vec![1.0, 0.0]);
        let g = Tensor::vector(vec![0.0, 1.0]);
        let s = Tensor::vector(vec![0.0, -1.0]);
        let seq = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let (out, cache) = coattend_forward(
            &emo,
            AuxInputs {
                gender: Some(&g),
                speaker: Some(&s),
                asr: Some(&seq),
            },
            &p,
        )
        .unwrap();
        // scores (0, 0, 1/sqrt 2), softmax by hand
        let e = (1.0 / 2f64.sqrt()).exp();
        let z = 2.0 + e;
        let oracle = [1.0 / z, 1.0 / z, e / z];
        for (w, o) in cache.weights.iter().zip(oracle) {
            assert!((w - o).abs() < 1e-15);
        }
        assert!((cache.weights[0] - 0.2483).abs() < 1e-3 && (cache.weights[2] - 0.5034).abs() < 1e-3);
        assert!((out.data()[0] - (1.0 + e / z)).abs() < 1e-15);
        assert!((out.data()[0] - 1.5034).abs() < 1e-3);
        assert!(out.data()[1].abs() < 1e-15);
    }

    #[test]
    fn speech_frame_order_does_not_change_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = CoAttentionParams::init(&mut rng, 3, 3, 3, 2, 4);
        let emo = Tensor::vector(vec![0.3, 0.1, -0.6]);
        let seq = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.5, 0.9, 1.3, -0.4]).unwrap();
        let rev = Tensor::matrix(3, 2, vec![1.3, -0.4, -0.5, 0.9, 0.1, 0.2]).unwrap();
        let run = |s: &Tensor| {
            coattend_forward(
                &emo,
                AuxInputs {
                    asr: Some(s),
                    ..Default::default()
                },
                &p,
            )
            .unwrap()
            .0
        };
        for (a, b) in run(&seq).data().iter().zip(run(&rev).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn missing_auxiliaries_and_bad_dims_are_errors() {
        let p = identity_params(2);
        let emo = Tensor::vector(vec![1.0, 0.0]);
        assert!(coattend_forward(&emo, AuxInputs::default(), &p).is_err());
        let bad = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let r = coattend_forward(
            &emo,
            AuxInputs {
                gender: Some(&bad),
                ..Default::default()
            },
            &p,
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
        let empty = Tensor::zeros(&[0, 2]);
        let r = coattend_forward(
            &emo,
            AuxInputs {
                asr: Some(&empty),
                ..Default::default()
            },
            &p,
        );
        assert!(matches!(r, Err(Error::Empty { .. })));
    }
}
