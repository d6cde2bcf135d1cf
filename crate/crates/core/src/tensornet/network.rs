//! Layer graphs for the refinement generator (a U-Net) and the patch
//! discriminator.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{conv_out_size, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seeding::Rng;

/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of the leaky activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// Slope 0 gives a ReLU.
    LeakyRelu(f32),
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbour ×2 upsampling.
    Upsample,
    /// Instance normalization.
    Norm,
    Act(Activation),
    /// Channel concatenation of two inputs.
    Concat,
}

/// A layer and the nodes it reads. Input index 0 is the network input;
/// index `i + 1` is the output of layer `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetRole {
    Generator { depth: usize },
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 8,
            in_channels: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    role: NetRole,
    input_channels: usize,
    nodes: Vec<LayerNode>,
    params: Vec<Tensor<T>>,
}

struct Builder {
    nodes: Vec<LayerNode>,
}

impl Builder {
    fn add(&mut self, spec: LayerSpec, inputs: &[usize]) -> usize {
        self.nodes.push(LayerNode {
            spec,
            inputs: inputs.to_vec(),
        });
        self.nodes.len()
    }

    fn conv(&mut self, from: usize, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        self.add(
            LayerSpec::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                pad,
            },
            &[from],
        )
    }

    fn unary(&mut self, from: usize, spec: LayerSpec) -> usize {
        self.add(spec, &[from])
    }
}

/// U-Net with a normalized full-resolution 3×3 stem, `depth` stride-2 4×4 encoder
/// stages, `depth` upsample + 3×3 decoder stages joined to the encoder by
/// skip concatenations, and a 1-channel sigmoid head.
pub fn build_generator<T: Scalar>(cfg: &GeneratorConfig) -> Result<Network<T>> {
    if cfg.depth == 0 || cfg.base_channels == 0 || cfg.in_channels == 0 {
        return Err(Error::InvalidConfig("generator depth and channel counts must be positive".into()));
    }
    let b = cfg.base_channels;
    let leaky = LayerSpec::Act(Activation::LeakyRelu(LEAKY_SLOPE as f32));
    let relu = LayerSpec::Act(Activation::LeakyRelu(0.0));
    let mut g = Builder { nodes: Vec::new() };

    let stem = g.conv(0, cfg.in_channels, b, 3, 1, 1);
    let stem = g.unary(stem, LayerSpec::Norm);
    let mut skips = vec![(g.unary(stem, leaky), b)];
    for level in 1..=cfg.depth {
        let (prev, cin) = *skips.last().expect("stem present");
        let cout = b << level;
        let c = g.conv(prev, cin, cout, 4, 2, 1);
        let n = g.unary(c, LayerSpec::Norm);
        skips.push((g.unary(n, leaky), cout));
    }
    let (mut cur, mut cur_ch) = skips.pop().expect("bottleneck");
    while let Some((skip, skip_ch)) = skips.pop() {
        let up = g.unary(cur, LayerSpec::Upsample);
        let c = g.conv(up, cur_ch, skip_ch, 3, 1, 1);
        let n = g.unary(c, LayerSpec::Norm);
        let a = g.unary(n, relu);
        cur = g.add(LayerSpec::Concat, &[a, skip]);
        cur_ch = 2 * skip_ch;
    }
    let head = g.conv(cur, cur_ch, 1, 3, 1, 1);
    g.unary(head, LayerSpec::Act(Activation::Sigmoid));
    Network::from_nodes(NetRole::Generator { depth: cfg.depth }, cfg.in_channels, g.nodes)
}

/// Patch discriminator: five 4×4 convolutions with strides (2, 2, 2, 1, 1)
/// and padding 1, leaky activations in between, instance normalization on
/// the three middle layers, and a sigmoid score map.
pub fn build_discriminator<T: Scalar>(cfg: &DiscriminatorConfig) -> Result<Network<T>> {
    if cfg.base_channels == 0 || cfg.in_channels == 0 {
        return Err(Error::InvalidConfig("discriminator channel counts must be positive".into()));
    }
    let b = cfg.base_channels;
    let leaky = LayerSpec::Act(Activation::LeakyRelu(LEAKY_SLOPE as f32));
    let mut d = Builder { nodes: Vec::new() };
    let plan = [
        (cfg.in_channels, b, 2, false),
        (b, 2 * b, 2, true),
        (2 * b, 4 * b, 2, true),
        (4 * b, 8 * b, 1, true),
    ];
    let mut cur = 0;
    for (cin, cout, stride, norm) in plan {
        cur = d.conv(cur, cin, cout, 4, stride, 1);
        if norm {
            cur = d.unary(cur, LayerSpec::Norm);
        }
        cur = d.unary(cur, leaky);
    }
    let score = d.conv(cur, 8 * b, 1, 4, 1, 1);
    d.unary(score, LayerSpec::Act(Activation::Sigmoid));
    Network::from_nodes(NetRole::Discriminator, cfg.in_channels, d.nodes)
}

impl<T: Scalar> Network<T> {
    /// Assembles a network with zero parameters from a validated layer list.
    pub fn from_nodes(role: NetRole, input_channels: usize, nodes: Vec<LayerNode>) -> Result<Self> {
        let mut channels = vec![input_channels];
        let mut params = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            let arity = if matches!(node.spec, LayerSpec::Concat) { 2 } else { 1 };
            if node.inputs.len() != arity || node.inputs.iter().any(|&j| j > i) {
                return Err(Error::InvalidConfig(format!("layer {i} has invalid inputs {:?}", node.inputs)));
            }
            let cin = channels[node.inputs[0]];
            let cout = match node.spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if in_channels != cin || kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: conv expects {in_channels} channels, receives {cin}"
                        )));
                    }
                    params.push(Tensor::zeros(&[out_channels, in_channels, kernel, kernel]).with_grad());
                    params.push(Tensor::zeros(&[out_channels]).with_grad());
                    out_channels
                }
                LayerSpec::Concat => cin + channels[node.inputs[1]],
                _ => cin,
            };
            channels.push(cout);
        }
        if nodes.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        Ok(Network {
            role,
            input_channels,
            nodes,
            params,
        })
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Output channels of every convolution, in order.
    pub fn conv_widths(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n.spec {
                LayerSpec::Conv { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect()
    }

    /// Zero-mean Gaussian weights with std [`INIT_STD`]; zero biases.
    pub fn init_weights(&mut self, rng: &mut Rng) {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for p in &mut self.params {
            let is_weight = p.shape().len() == 4;
            for v in p.data_mut() {
                *v = if is_weight { T::lit(normal.sample(rng)) } else { T::zero() };
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Spatial size of the output for an `h × w` input, or an error when
    /// the input is incompatible.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if let NetRole::Generator { depth } = self.role {
            let m = 1usize << depth;
            if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
                return Err(Error::Shape(format!(
                    "generator input {h}x{w} is not divisible by 2^{depth}"
                )));
            }
        }
        let mut sizes = vec![(h, w)];
        for node in &self.nodes {
            let (ih, iw) = sizes[node.inputs[0]];
            let next = match node.spec {
                LayerSpec::Conv { kernel, stride, pad, .. } => {
                    match (conv_out_size(ih, kernel, stride, pad), conv_out_size(iw, kernel, stride, pad)) {
                        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                        _ => {
                            return Err(Error::Shape(format!(
                                "input {h}x{w} is too small for the receptive field"
                            )))
                        }
                    }
                }
                LayerSpec::Upsample => (2 * ih, 2 * iw),
                _ => (ih, iw),
            };
            sizes.push(next);
        }
        Ok(*sizes.last().expect("nonempty"))
    }

    /// Pushes every parameter onto `tape`; `trainable` decides whether they
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p.detached()) })
            .collect()
    }

    /// Adds the gradients gathered on `tape` for `vars` (from [`bind`](Self::bind)).
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn forward_on(&self, tape: &mut Tape<T>, input: Var, params: &[Var]) -> Result<Var> {
        let [_, c, h, w] = tape.value(input).dims4()?;
        if c != self.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.input_channels
            )));
        }
        self.output_size(h, w)?;
        let mut outs = vec![input];
        let mut next_param = 0;
        for node in &self.nodes {
            let x = outs[node.inputs[0]];
            let y = match node.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let (wv, bv) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    tape.conv2d(x, wv, bv, stride, pad)?
                }
                LayerSpec::Upsample => tape.upsample2x(x)?,
                LayerSpec::Norm => tape.instance_norm(x)?,
                LayerSpec::Act(Activation::LeakyRelu(s)) => tape.leaky_relu(x, T::lit(s as f64)),
                LayerSpec::Act(Activation::Sigmoid) => tape.sigmoid(x),
                LayerSpec::Concat => tape.concat(x, outs[node.inputs[1]])?,
            };
            outs.push(y);
        }
        Ok(*outs.last().expect("nonempty"))
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(input.detached());
        let y = self.forward_on(&mut tape, x, &params)?;
        Ok(tape.value(y).detached())
    }

    /// Same topology and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            role: self.role,
            input_channels: self.input_channels,
            nodes: self.nodes.clone(),
            params: self.params.iter().map(|p| p.cast::<U>()).collect(),
        }
    }

    /// Replaces parameter values, keeping shapes.
    pub fn load_values(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.numel() {
                return Err(Error::Checkpoint("parameter size mismatch".into()));
            }
            p.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }
}
