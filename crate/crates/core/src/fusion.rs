//! Softmax-weighted fusion of per-layer hidden representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax_backward_slice, softmax_slice, Tensor};
use crate::params::{join, ParamSet};

/// Hidden states of every backbone layer for one utterance, shaped `[L, T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Tensor,
}

impl LayerStack {
    pub fn new(layers: Tensor) -> Result<Self> {
        if layers.rank() != 3 {
            return Err(Error::dim(
                "layer_stack",
                "rank-3 [L, T, D]",
                format!("{:?}", layers.shape()),
            ));
        }
        let s = layers.shape();
        if s[0] == 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Empty {
                op: "layer_stack",
                what: "layer, frame or feature extent",
            });
        }
        if !layers.all_finite() {
            return Err(Error::NonFinite {
                context: "layer_stack".into(),
            });
        }
        Ok(LayerStack { layers })
    }

    pub fn from_layers(layers: &[Tensor]) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty {
            op: "layer_stack",
            what: "layers",
        })?;
        let (t, d) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(layers.len() * t * d);
        for l in layers {
            if l.shape() != [t, d] {
                return Err(Error::dim("layer_stack", format!("[{t}, {d}]"), format!("{:?}", l.shape())));
            }
            data.extend_from_slice(l.data());
        }
        LayerStack::new(Tensor::new(vec![layers.len(), t, d], data)?)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.layers.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.layers
    }

    /// Row-major `[T, D]` data of layer `l`.
    pub fn layer(&self, l: usize) -> &[f64] {
        let n = self.num_frames() * self.feature_dim();
        &self.layers.data()[l * n..(l + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub layer_logits: Tensor,
}

impl FusionParams {
    /// Uniform weights over `num_layers`.
    pub fn new(num_layers: usize) -> Self {
        FusionParams {
            layer_logits: Tensor::zeros(&[num_layers]),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax_slice(self.layer_logits.data())
    }
}

impl ParamSet for FusionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "layer_logits"), &self.layer_logits);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "layer_logits"), &mut self.layer_logits);
    }
}

pub fn fuse_layers(stack: &LayerStack, params: &FusionParams) -> Result<Tensor> {
    fuse_layers_forward(stack, params).map(|(out, _)| out)
}

/// Returns the fused `[T, D]` sequence and the layer weights used.
pub fn fuse_layers_forward(stack: &LayerStack, params: &FusionParams) -> Result<(Tensor, Vec<f64>)> {
    let l = stack.num_layers();
    if params.layer_logits.shape() != [l] {
        return Err(Error::dim(
            "fuse_layers",
            format!("{l} layer logits"),
            format!("{:?}", params.layer_logits.shape()),
        ));
    }
    let weights = params.weights();
    let (t, d) = (stack.num_frames(), stack.feature_dim());
    let mut out = vec![0.0; t * d];
    for (i, &w) in weights.iter().enumerate() {
        axpy(&mut out, w, stack.layer(i));
    }
    Ok((Tensor::matrix(t, d, out)?, weights))
}

pub struct FusionGrads {
    pub layer_logits: Tensor,
    /// Gradient with respect to the stack, `[L, T, D]`.
    pub stack: Tensor,
}

/// Backward of [`fuse_layers`] given the weights from the forward pass.
pub fn fuse_layers_backward(stack: &LayerStack, weights: &[f64], d_out: &Tensor) -> FusionGrads {
    let l = stack.num_layers();
    let d_weights: Vec<f64> = (0..l).map(|i| dot(stack.layer(i), d_out.data())).collect();
    let layer_logits = Tensor::vector(softmax_backward_slice(weights, &d_weights));
    let mut data = Vec::with_capacity(stack.tensor().len());
    for &w in weights {
        data.extend(d_out.data().iter().map(|g| w * g));
    }
    FusionGrads {
        layer_logits,
        stack: Tensor::new(stack.tensor().shape().to_vec(), data).expect("stack shape"),
    }
}

/// The last layer's `[T, D]` features, unchanged.
pub fn select_last(stack: &LayerStack) -> Tensor {
    let l = stack.num_layers();
    Tensor::matrix(stack.num_frames(), stack.feature_dim(), stack.layer(l - 1).to_vec())
        .expect("layer shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_layer() -> LayerStack {
        LayerStack::from_layers(&[
            Tensor::from_rows(&[[1.0, 2.0]]).unwrap(),
            Tensor::from_rows(&[[3.0, 4.0]]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn uniform_logits_average_layers() {
        let out = fuse_layers(&two_layer(), &FusionParams::new(2)).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
        assert_eq!(out.shape(), &[1, 2]);
    }

    #[test]
    fn ln3_logit_gives_quarter_three_quarter_weights() {
        let p = FusionParams {
            layer_logits: Tensor::vector(vec![0.0, 3f64.ln()]),
        };
        let w = p.weights();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        let out = fuse_layers(&two_layer(), &p).unwrap();
        assert!((out.data()[0] - 2.5).abs() < 1e-12);
        assert!((out.data()[1] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn one_hot_limit_selects_last_layer() {
        let stack = two_layer();
        let p = FusionParams {
            layer_logits: Tensor::vector(vec![0.0, 40.0]),
        };
        let out = fuse_layers(&stack, &p).unwrap();
        let last = select_last(&stack);
        for (a, b) in out.data().iter().zip(last.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn select_last_definition() {
        let only = LayerStack::from_layers(&[Tensor::from_rows(&[[7.0]]).unwrap()]).unwrap();
        assert_eq!(select_last(&only).data(), &[7.0]);
        let three = LayerStack::from_layers(&[
            Tensor::from_rows(&[[1.0]]).unwrap(),
            Tensor::from_rows(&[[2.0]]).unwrap(),
            Tensor::from_rows(&[[3.0]]).unwrap(),
        ])
        .unwrap();
        assert_eq!(select_last(&three).data(), &[3.0]);
    }

    #[test]
    fn logit_count_mismatch_is_dimension_error() {
        let err = fuse_layers(&two_layer(), &FusionParams::new(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn stack_rejects_empty_and_non_finite() {
        assert!(LayerStack::new(Tensor::zeros(&[0, 1, 1])).is_err());
        let bad = Tensor::new(vec![1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(LayerStack::new(bad), Err(Error::NonFinite { .. })));
    }

    proptest! {
        #[test]
        fn weights_are_a_probability_vector(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
            let w = FusionParams { layer_logits: Tensor::vector(logits) }.weights();
            prop_assert!(w.iter().all(|&v| v > 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn fusion_is_permutation_equivariant(
            vals in prop::collection::vec(-5.0f64..5.0, 4 * 3 * 2),
            logits in prop::collection::vec(-3.0f64..3.0, 4),
            rot in 0usize..4,
        ) {
            let layers: Vec<Tensor> = vals.chunks(6).map(|c| Tensor::matrix(3, 2, c.to_vec()).unwrap()).collect();
            let base = fuse_layers(
                &LayerStack::from_layers(&layers).unwrap(),
                &FusionParams { layer_logits: Tensor::vector(logits.clone()) },
            ).unwrap();
            let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
            let pl: Vec<Tensor> = perm.iter().map(|&i| layers[i].clone()).collect();
            let plog: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
            let permuted = fuse_layers(
                &LayerStack::from_layers(&pl).unwrap(),
                &FusionParams { layer_logits: Tensor::vector(plog) },
            ).unwrap();
            for (a, b) in base.data().iter().zip(permuted.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
