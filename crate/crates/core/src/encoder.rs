//! Convolutional feature extractor producing unit-norm embeddings.
//!
//! The configurable trunk is followed by an implicit head: flatten (when the
//! trunk output is still spatial), an affine map to the embedding size and
//! l2 normalization, so every emitted row has unit length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{Conv2dAttrs, Graph, KernelError, NodeId, Pool2dAttrs, Tensor};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("layer {index}: {reason}")]
    IncompatibleLayers { index: usize, reason: String },
    #[error("expected images of shape [*, {expected:?}], got {got:?}")]
    InputShape { expected: [usize; 3], got: Vec<usize> },
    #[error("parameter {index} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Affine {
        out_dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Channels, height, width.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub embed_dim: usize,
    /// Per-channel constants subtracted from `[0, 1]` pixels before the trunk.
    pub channel_mean: Vec<f64>,
}

/// Mean pixel value per channel of the CIFAR-10 training set.
pub const CIFAR10_CHANNEL_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];

impl EncoderSpec {
    /// conv(16)-relu-pool-conv(32)-relu-pool-flatten, then the head.
    pub fn desk_default(input: [usize; 3], embed_dim: usize) -> Self {
        Self::small(input, [16, 32], embed_dim)
    }

    /// Two conv blocks with the given widths.
    pub fn small(input: [usize; 3], widths: [usize; 2], embed_dim: usize) -> Self {
        let channel_mean = if input[0] == 3 {
            CIFAR10_CHANNEL_MEAN.to_vec()
        } else {
            vec![0.5; input[0]]
        };
        let conv = |out_channels| Layer::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let pool = Layer::MaxPool { size: 2, stride: 2 };
        Self {
            input,
            layers: vec![
                conv(widths[0]),
                Layer::Relu,
                pool.clone(),
                conv(widths[1]),
                Layer::Relu,
                pool,
                Layer::Flatten,
            ],
            embed_dim,
            channel_mean,
        }
    }

    /// Shapes of every parameter tensor, head included, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>, EncoderError> {
        if self.input.iter().any(|&v| v == 0) {
            return Err(EncoderError::IncompatibleLayers {
                index: 0,
                reason: format!("input shape {:?} has a zero dimension", self.input),
            });
        }
        if self.embed_dim == 0 {
            return Err(EncoderError::IncompatibleLayers {
                index: self.layers.len(),
                reason: "embedding dimension must be positive".into(),
            });
        }
        if self.channel_mean.len() != self.input[0] {
            return Err(EncoderError::IncompatibleLayers {
                index: 0,
                reason: format!("{} channel means for {} channels", self.channel_mean.len(), self.input[0]),
            });
        }
        let mut shape: Vec<usize> = self.input.to_vec();
        let mut params = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| EncoderError::IncompatibleLayers { index, reason };
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("conv needs a spatial input, got {shape:?}")));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(fail("conv sizes must be positive".into()));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if kernel > h || kernel > w {
                        return Err(fail(format!("kernel {kernel} larger than padded input {shape:?}")));
                    }
                    params.push(vec![out_channels, shape[0], kernel, kernel]);
                    params.push(vec![out_channels]);
                    shape = vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                }
                Layer::Relu => {}
                Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("pooling needs a spatial input, got {shape:?}")));
                    }
                    if size == 0 || stride == 0 || size > shape[1] || size > shape[2] {
                        return Err(fail(format!("pool window {size} does not fit {shape:?}")));
                    }
                    shape = vec![shape[0], (shape[1] - size) / stride + 1, (shape[2] - size) / stride + 1];
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Affine { out_dim } => {
                    if shape.len() != 1 {
                        return Err(fail(format!("affine needs a flat input, got {shape:?}")));
                    }
                    if out_dim == 0 {
                        return Err(fail("affine output must be positive".into()));
                    }
                    params.push(vec![out_dim, shape[0]]);
                    params.push(vec![out_dim]);
                    shape = vec![out_dim];
                }
            }
        }
        let flat: usize = shape.iter().product();
        params.push(vec![self.embed_dim, flat]);
        params.push(vec![self.embed_dim]);
        Ok(params)
    }
}

/// Weights and biases in the order given by [`EncoderSpec::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T: Real> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
pub fn init_params<T: Real>(spec: &EncoderSpec, seed: u64) -> Result<EncoderParams<T>, EncoderError> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = shapes
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let data = (0..shape.iter().product::<usize>())
                .map(|_| T::of_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::new(shape, data).expect("shape from spec")
        })
        .collect();
    Ok(EncoderParams { tensors })
}

/// A spec with its parameters.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real> {
    spec: EncoderSpec,
    params: EncoderParams<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(spec: EncoderSpec, params: EncoderParams<T>) -> Result<Self, EncoderError> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.tensors.len() {
            return Err(EncoderError::ParamShape {
                index: params.tensors.len().min(shapes.len()),
                expected: vec![shapes.len()],
                got: vec![params.tensors.len()],
            });
        }
        for (index, (want, have)) in shapes.iter().zip(&params.tensors).enumerate() {
            if want.as_slice() != have.shape() {
                return Err(EncoderError::ParamShape {
                    index,
                    expected: want.clone(),
                    got: have.shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: EncoderSpec, seed: u64) -> Result<Self, EncoderError> {
        let params = init_params(&spec, seed)?;
        Self::new(spec, params)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &EncoderParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params.tensors
    }

    pub fn into_params(self) -> EncoderParams<T> {
        self.params
    }

    fn centered_input(&self, images: &Tensor<T>) -> Result<Tensor<T>, EncoderError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(EncoderError::InputShape {
                expected: self.spec.input,
                got: shape.to_vec(),
            });
        }
        let plane = shape[2] * shape[3];
        let means: Vec<T> = self.spec.channel_mean.iter().map(|&m| T::of_f64(m)).collect();
        let mut centered = images.clone();
        for (i, v) in centered.data_mut().iter_mut().enumerate() {
            *v -= means[(i / plane) % means.len()];
        }
        Ok(centered)
    }

    /// Records the forward pass on `g`. Returns the embedding node and the
    /// parameter leaves in storage order.
    pub fn record(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<(NodeId, Vec<NodeId>), EncoderError> {
        let x = g.input(self.centered_input(images)?);
        let ids: Vec<NodeId> = self.params.tensors.iter().map(|t| g.param(t.clone())).collect();
        let mut next_param = ids.iter().copied();
        let mut h = x;
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = (next_param.next().expect("weight"), next_param.next().expect("bias"));
                    g.conv2d(h, w, b, Conv2dAttrs { stride, padding })?
                }
                Layer::Relu => g.relu(h)?,
                Layer::MaxPool { size, stride } => g.max_pool2d(h, Pool2dAttrs { size, stride })?,
                Layer::AvgPool { size, stride } => g.avg_pool2d(h, Pool2dAttrs { size, stride })?,
                Layer::Flatten => g.flatten(h)?,
                Layer::Affine { .. } => {
                    let (w, b) = (next_param.next().expect("weight"), next_param.next().expect("bias"));
                    g.affine(h, w, b)?
                }
            };
        }
        if g.value(h).shape().len() != 2 {
            h = g.flatten(h)?;
        }
        let (w, b) = (next_param.next().expect("head weight"), next_param.next().expect("head bias"));
        let z = g.affine(h, w, b)?;
        let out = g.l2_normalize(z)?;
        Ok((out, ids))
    }

    /// Unit-norm embeddings for a batch of images `[B, C, H, W]`.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>, EncoderError> {
        let mut g = Graph::new();
        let (out, _) = self.record(&mut g, images)?;
        Ok(g.value(out).clone())
    }

    /// Embeds in chunks to bound tape memory.
    pub fn embed_chunked(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>, EncoderError> {
        let count = images.shape()[0];
        let per_image: usize = images.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(count * self.spec.embed_dim);
        for start in (0..count).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(count);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, images.data()[start * per_image..end * per_image].to_vec())?;
            out.extend_from_slice(self.embed(&part)?.data());
        }
        Ok(Tensor::new(vec![count, self.spec.embed_dim], out)?)
    }
}
