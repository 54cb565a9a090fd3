//! Encoder-decoder depth network: 3 strided convolutions down, 7 transposed
//! convolutions back up to the depth-map grid, with a bounded output unit.
//!
//! Channel widths are configuration; the spatial plan is derived: the
//! encoder halves each axis per layer, and the decoder doubles each axis as
//! many times as that axis needs, finishing with a small fix-up kernel so
//! the composed shape arithmetic lands exactly on the configured output.

mod adam;
mod ops;
mod tensor;

pub use adam::AdamState;
pub use tensor::{Graph, NodeId, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

use ops::conv_out_len;

/// One convolution or transposed-convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Complete architecture description; serializable into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub conv_layers: Vec<LayerSpec>,
    pub deconv_layers: Vec<LayerSpec>,
    pub input_shape: (usize, usize, usize),
    pub output_shape: (usize, usize),
    pub max_depth: f64,
}

impl NetworkConfig {
    /// Derive the full layer plan from channel widths alone. The encoder is
    /// three kernel-4 stride-2 pad-1 layers; the decoder doubles each axis
    /// (kernel 4) until it can finish with stride-1 layers and a fix-up
    /// kernel of at most 9 on the last layer.
    pub fn plan(
        input_shape: (usize, usize, usize),
        output_shape: (usize, usize),
        conv_widths: [usize; 3],
        max_depth: f64,
    ) -> Result<Self> {
        if conv_widths.contains(&0) || input_shape.0 == 0 {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        let mut conv_layers = Vec::with_capacity(3);
        let (mut c, mut h, mut w) = input_shape;
        for &width in &conv_widths {
            conv_layers.push(LayerSpec {
                in_channels: c,
                out_channels: width,
                kernel: (4, 4),
                stride: (2, 2),
                padding: (1, 1),
            });
            c = width;
            h = conv_out_len(h, 4, 2, 1).filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidConfig(format!("input axis too small to encode: {input_shape:?}"))
            })?;
            w = conv_out_len(w, 4, 2, 1).filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidConfig(format!("input axis too small to encode: {input_shape:?}"))
            })?;
        }

        let [w0, w1, w2] = conv_widths;
        let deconv_widths = [w2, w1, w1, w0, w0, (w0 / 2).max(1), 1];
        let dh = plan_axis(h, output_shape.0)?;
        let dw = plan_axis(w, output_shape.1)?;
        let mut deconv_layers = Vec::with_capacity(7);
        let (mut ch, mut cw) = (h, w);
        for (i, &width) in deconv_widths.iter().enumerate() {
            let (sh, kh, sw, kw);
            if i == 6 {
                (sh, sw) = (1, 1);
                kh = output_shape.0 + 3 - ch;
                kw = output_shape.1 + 3 - cw;
            } else {
                sh = if i < dh { 2 } else { 1 };
                sw = if i < dw { 2 } else { 1 };
                kh = if sh == 2 { 4 } else { 3 };
                kw = if sw == 2 { 4 } else { 3 };
            }
            deconv_layers.push(LayerSpec {
                in_channels: c,
                out_channels: width,
                kernel: (kh, kw),
                stride: (sh, sw),
                padding: (1, 1),
            });
            c = width;
            ch = (ch - 1) * sh + kh - 2;
            cw = (cw - 1) * sw + kw - 2;
        }

        let config = Self {
            conv_layers,
            deconv_layers,
            input_shape,
            output_shape,
            max_depth,
        };
        config.validate()?;
        Ok(config)
    }

    /// Re-derive every shape and fail on the first inconsistency.
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.len() != 3 || self.deconv_layers.len() != 7 {
            return Err(Error::InvalidConfig(format!(
                "expected 3 convolution and 7 deconvolution layers, got {} and {}",
                self.conv_layers.len(),
                self.deconv_layers.len()
            )));
        }
        if !(self.max_depth > 0.0) || !self.max_depth.is_finite() {
            return Err(Error::InvalidConfig("max depth must be positive".into()));
        }
        let (mut c, mut h, mut w) = self.input_shape;
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.in_channels != c {
                return Err(Error::InvalidConfig(format!(
                    "conv layer {i} expects {} channels, gets {c}",
                    l.in_channels
                )));
            }
            if l.kernel.0 == 0 || l.kernel.1 == 0 || l.stride.0 == 0 || l.stride.1 == 0 {
                return Err(Error::InvalidConfig(format!("conv layer {i} degenerate")));
            }
            h = conv_out_len(h, l.kernel.0, l.stride.0, l.padding.0)
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("conv layer {i} output height vanishes"))
                })?;
            w = conv_out_len(w, l.kernel.1, l.stride.1, l.padding.1)
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("conv layer {i} output width vanishes"))
                })?;
            c = l.out_channels;
        }
        for (i, l) in self.deconv_layers.iter().enumerate() {
            if l.in_channels != c {
                return Err(Error::InvalidConfig(format!(
                    "deconv layer {i} expects {} channels, gets {c}",
                    l.in_channels
                )));
            }
            if l.kernel.0 == 0 || l.kernel.1 == 0 || l.stride.0 == 0 || l.stride.1 == 0 {
                return Err(Error::InvalidConfig(format!("deconv layer {i} degenerate")));
            }
            h = ((h - 1) * l.stride.0 + l.kernel.0)
                .checked_sub(2 * l.padding.0)
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("deconv layer {i} output height vanishes"))
                })?;
            w = ((w - 1) * l.stride.1 + l.kernel.1)
                .checked_sub(2 * l.padding.1)
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("deconv layer {i} output width vanishes"))
                })?;
            c = l.out_channels;
        }
        if c != 1 {
            return Err(Error::InvalidConfig(format!(
                "final layer must emit 1 channel, emits {c}"
            )));
        }
        if (h, w) != self.output_shape {
            return Err(Error::InvalidConfig(format!(
                "layer arithmetic yields {h}x{w}, configured output is {:?}",
                self.output_shape
            )));
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.conv_layers.iter().chain(&self.deconv_layers)
    }
}

/// Number of stride-2 doublings that lets a 7-layer decoder axis reach
/// `target` from `start` with a final fix-up kernel in [1, 9].
fn plan_axis(start: usize, target: usize) -> Result<usize> {
    for d in 0..=6usize {
        let reached = start << d;
        let diff = target as isize - reached as isize;
        if diff.abs() <= 6 && diff + 3 >= 1 {
            return Ok(d);
        }
    }
    Err(Error::InvalidConfig(format!(
        "no 7-layer decoder plan from {start} to {target}"
    )))
}

/// A planned graph execution: the output node plus the parameter leaves in
/// `Network::params` order.
pub struct ForwardPass {
    pub output: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Parameterized network instance. `params` holds weight and bias tensors
/// per layer, convolutions first.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Tensor>,
}

impl Network {
    /// He-normal weights, zero biases, reproducible from the seed.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(20);
        let conv_count = config.conv_layers.len();
        for (i, l) in config.layers().enumerate() {
            let (kh, kw) = l.kernel;
            let std = (2.0 / (l.in_channels * kh * kw) as f64).sqrt();
            let wshape = if i < conv_count {
                vec![l.out_channels, l.in_channels, kh, kw]
            } else {
                vec![l.in_channels, l.out_channels, kh, kw]
            };
            let n: usize = wshape.iter().product();
            let data = (0..n).map(|_| std * standard_normal(&mut rng)).collect();
            params.push(Tensor::new(wshape, data)?);
            params.push(Tensor::zeros(vec![l.out_channels]));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Build the forward graph from an existing input node and return the
    /// bounded depth output (shape [1, H, W]).
    pub fn forward_graph(&self, g: &mut Graph, input: NodeId) -> Result<ForwardPass> {
        let param_nodes: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p)).collect();
        let output = self.forward_from(g, input, &param_nodes)?;
        Ok(ForwardPass {
            output,
            param_nodes,
        })
    }

    /// Forward pass reusing existing parameter leaves, so several branches
    /// of one graph can share (and jointly backpropagate into) one
    /// parameter set.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        input: NodeId,
        param_nodes: &[NodeId],
    ) -> Result<NodeId> {
        let expect = self.config.input_shape;
        if g.shape(input) != [expect.0, expect.1, expect.2] {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect:?}"),
                actual: format!("{:?}", g.shape(input)),
            });
        }
        if param_nodes.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                param_nodes.len()
            )));
        }
        let mut x = input;
        let conv_count = self.config.conv_layers.len();
        let deconv_count = self.config.deconv_layers.len();
        for (i, l) in self.config.layers().enumerate() {
            let w = param_nodes[2 * i];
            let b = param_nodes[2 * i + 1];
            if i < conv_count {
                x = g.conv2d(x, w, b, l.stride, l.padding)?;
                x = g.relu(x);
            } else {
                x = g.deconv2d(x, w, b, l.stride, l.padding)?;
                if i + 1 < conv_count + deconv_count {
                    x = g.relu(x);
                }
            }
        }
        Ok(g.scaled_sigmoid(x, self.config.max_depth))
    }

    /// Inference: depth predictions for one feature spectrogram, row-major
    /// H×W, each value in [0, max_depth].
    pub fn predict(&self, features: &Spectrogram) -> Result<Vec<f64>> {
        let t = spectrogram_tensor(features)?;
        let mut g = Graph::new();
        let input = g.leaf(&t);
        let pass = self.forward_graph(&mut g, input)?;
        Ok(g.data(pass.output).to_vec())
    }
}

/// View a spectrogram as a [channels, bins, frames] input tensor.
pub fn spectrogram_tensor(features: &Spectrogram) -> Result<Tensor> {
    Tensor::new(
        vec![features.channels(), features.bins(), features.frames()],
        features.data().to_vec(),
    )
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 shifted into (0, 1] so the log never sees zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
