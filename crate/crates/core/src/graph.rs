//! The dynamic network: an ordered layer list whose widths change at runtime.
//!
//! A *unit* of parameterized layer `l` is one output row of its weights (a
//! conv filter or an fc neuron's fan-in row). Every unit edit is paired with
//! the matching edit on the input side of the next parameterized layer (the
//! consumer), so adjacent layers always agree on widths. Across a flatten
//! boundary the consumer's columns are grouped channel-major: unit `j` owns
//! the contiguous block `j*H*W .. (j+1)*H*W`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward_opt, conv2d_forward, conv_output_extent, fc_backward, fc_forward, maxpool2, maxpool2_backward,
    relu, relu_backward, ConvParams, FcParams, GradientBundle, PoolIndices, WeightMask,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Flatten,
    Fc,
}

/// Structural description of one layer, without any weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool,
    Flatten,
    Fc {
        out: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Maxpool => LayerKind::Maxpool,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Fc { .. } => LayerKind::Fc,
        }
    }
}

/// Input shape plus layer list. The class count is the width of the last fc layer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// LeNet-5 style: two conv5/ReLU/pool blocks, one hidden fc, class output.
    pub fn lenet5(conv1: usize, conv2: usize, hidden: usize, classes: usize) -> Self {
        Self::lenet5_for_input((1, 28, 28), conv1, conv2, hidden, classes)
    }

    pub fn lenet5_for_input(
        input: (usize, usize, usize),
        conv1: usize,
        conv2: usize,
        hidden: usize,
        classes: usize,
    ) -> Self {
        use LayerSpec::*;
        let conv = |out| Conv {
            out,
            kernel: 5,
            stride: 1,
            padding: 0,
        };
        Self {
            input,
            layers: vec![
                conv(conv1),
                Relu,
                Maxpool,
                conv(conv2),
                Relu,
                Maxpool,
                Flatten,
                Fc { out: hidden },
                Relu,
                Fc { out: classes },
            ],
        }
    }

    /// VGG-style stack of 3x3/pad-1 convolutions. Each inner slice of
    /// `blocks` is one block of conv widths followed by a 2x2 max pool; the
    /// head is `fc(hidden) -> ReLU -> fc(classes)`.
    pub fn vgg(input: (usize, usize, usize), blocks: &[Vec<usize>], hidden: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        for block in blocks {
            for &out in block {
                layers.push(LayerSpec::Conv {
                    out,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Maxpool);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Fc { out: hidden });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Fc { out: classes });
        Self { input, layers }
    }

    /// VGG-16 with two fc layers on 32x32 inputs.
    pub fn vgg16(classes: usize) -> Self {
        Self::vgg_depth(&[2, 2, 3, 3, 3], 64, classes)
    }

    /// VGG-19 with two fc layers on 32x32 inputs.
    pub fn vgg19(classes: usize) -> Self {
        Self::vgg_depth(&[2, 2, 4, 4, 4], 64, classes)
    }

    /// VGG layout whose block widths follow the seed convention
    /// `seed * [1, 2, 4, 8, 8]`; the hidden fc width is the last block width.
    pub fn vgg_depth(layers_per_block: &[usize], seed: usize, classes: usize) -> Self {
        let mult = [1, 2, 4, 8, 8];
        let blocks: Vec<Vec<usize>> = layers_per_block
            .iter()
            .enumerate()
            .map(|(b, &n)| vec![seed * mult[b.min(4)]; n])
            .collect();
        let hidden = seed * 8;
        Self::vgg((3, 32, 32), &blocks, hidden, classes)
    }

    pub fn class_count(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Fc { out } => Some(*out),
            _ => None,
        })
    }
}

/// Optimizer/mask state carried next to a layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub mask: WeightMask,
    pub velocity_w: Tensor,
    pub velocity_b: Tensor,
}

impl Trainable {
    fn fresh(weight_shape: &[usize], units: usize) -> Self {
        Self {
            mask: WeightMask::all_active(weight_shape),
            velocity_w: Tensor::zeros(weight_shape),
            velocity_b: Tensor::zeros(&[units]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvParams, Trainable),
    Fc(FcParams, Trainable),
    Relu,
    Maxpool,
    Flatten,
}

/// One layer together with its cached per-sample input/output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub layer: Layer,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl LayerNode {
    fn new(layer: Layer) -> Self {
        Self {
            layer,
            in_shape: Vec::new(),
            out_shape: Vec::new(),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self.layer {
            Layer::Conv(..) => LayerKind::Conv,
            Layer::Fc(..) => LayerKind::Fc,
            Layer::Relu => LayerKind::Relu,
            Layer::Maxpool => LayerKind::Maxpool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self.layer, Layer::Conv(..) | Layer::Fc(..))
    }

    /// Per-sample input shape for the current structure.
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    /// Per-sample output shape for the current structure.
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Spatial `(height, width)` of the output, `(1, 1)` for flat outputs.
    pub fn spatial_out(&self) -> (usize, usize) {
        match self.out_shape[..] {
            [_, h, w] => (h, w),
            _ => (1, 1),
        }
    }

    pub fn weights(&self) -> Option<&Tensor> {
        match &self.layer {
            Layer::Conv(p, _) => Some(&p.weights),
            Layer::Fc(p, _) => Some(&p.weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match &self.layer {
            Layer::Conv(p, _) => Some(&p.bias),
            Layer::Fc(p, _) => Some(&p.bias),
            _ => None,
        }
    }

    pub fn trainable(&self) -> Option<&Trainable> {
        match &self.layer {
            Layer::Conv(_, t) | Layer::Fc(_, t) => Some(t),
            _ => None,
        }
    }

    pub fn mask(&self) -> Option<&WeightMask> {
        self.trainable().map(|t| &t.mask)
    }

    /// `(weights, bias, trainable state)` for parameterized layers.
    pub fn parts_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor, &mut Trainable)> {
        match &mut self.layer {
            Layer::Conv(p, t) => Some((&mut p.weights, &mut p.bias, t)),
            Layer::Fc(p, t) => Some((&mut p.weights, &mut p.bias, t)),
            _ => None,
        }
    }

    /// Output width (filters or neurons).
    pub fn units(&self) -> Option<usize> {
        self.weights().map(|w| w.shape()[0])
    }

    /// Number of weights feeding one unit (`I*K*K` or `I`).
    pub fn fan_in(&self) -> Option<usize> {
        self.weights().map(|w| w.len() / w.shape()[0])
    }
}

/// An fc junction between an incoming matrix `A` (`layer`) and the
/// outgoing matrix `B` (the next parameterized layer). Hidden neuron `i`
/// owns row `i` of `A` (+ bias) and column `i` of `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Junction {
    pub incoming: usize,
    pub outgoing: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Filter,
    Neuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitRef {
    pub layer_index: usize,
    pub unit_index: usize,
    pub unit_kind: UnitKind,
}

/// One broken invariant found by [`DynamicNetwork::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: usize,
    pub expected: usize,
    pub actual: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer {}: {} (expected {}, actual {})",
            self.layer, self.message, self.expected, self.actual
        )
    }
}

/// Width vector and parameter counts, e.g. `[20-50-500-10]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Description {
    pub widths: Vec<usize>,
    /// All physically present weights and biases.
    pub params: usize,
    /// Unmasked weights plus the biases of units that still have an unmasked weight.
    pub effective_params: usize,
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(f, "[{}]", w.join("-"))
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every layer, then the final output (logits) last.
    activations: Vec<Tensor>,
    pools: Vec<Option<PoolIndices>>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace always holds the network input")
    }
}

/// Ordered layers with mutable widths, masks and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicNetwork {
    layers: Vec<LayerNode>,
    input_shape: (usize, usize, usize),
    class_count: usize,
    revision: u64,
}

impl DynamicNetwork {
    /// Allocates a network for `spec`. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn build<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let class_count = spec
            .class_count()
            .ok_or_else(|| Error::structural("network has no fc output layer"))?;
        let (c, h, w) = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::dim("input shape has a zero extent"));
        }
        let mut shape = vec![c, h, w];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, ls) in spec.layers.iter().enumerate() {
            let layer = match *ls {
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [cin, hi, wi] = shape[..] else {
                        return Err(Error::dim(format!("layer {idx}: conv needs a 3D input")));
                    };
                    let fan_in = cin * kernel * kernel;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let wshape = [out, cin, kernel, kernel];
                    let params = ConvParams::new(
                        Tensor::uniform(&wshape, bound, rng),
                        Tensor::uniform(&[out], bound, rng),
                        stride,
                        padding,
                    )?;
                    shape = vec![
                        out,
                        conv_output_extent(hi, kernel, stride, padding)?,
                        conv_output_extent(wi, kernel, stride, padding)?,
                    ];
                    Layer::Conv(params, Trainable::fresh(&wshape, out))
                }
                LayerSpec::Fc { out } => {
                    let [fan_in] = shape[..] else {
                        return Err(Error::dim(format!("layer {idx}: fc needs a flat input")));
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let params = FcParams::new(
                        Tensor::uniform(&[out, fan_in], bound, rng),
                        Tensor::uniform(&[out], bound, rng),
                    )?;
                    shape = vec![out];
                    Layer::Fc(params, Trainable::fresh(&[out, fan_in], out))
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(Error::geometry(format!("layer {idx}: cannot 2x2-pool shape {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    Layer::Maxpool
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
            };
            layers.push(LayerNode::new(layer));
        }
        let mut net = Self {
            layers,
            input_shape: spec.input,
            class_count,
            revision: 0,
        };
        net.refresh_shapes()?;
        Ok(net)
    }

    /// Reassembles a network from explicit layers (checkpoint loading).
    pub fn from_layers(input_shape: (usize, usize, usize), class_count: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut net = Self {
            layers: layers.into_iter().map(LayerNode::new).collect(),
            input_shape,
            class_count,
            revision: 0,
        };
        net.refresh_shapes()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Option<&LayerNode> {
        self.layers.get(l)
    }

    /// Mutable access to a layer's parameters. Shape-changing edits must go
    /// through the structural operations instead.
    pub fn layer_mut(&mut self, l: usize) -> Option<&mut LayerNode> {
        self.layers.get_mut(l)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Incremented by every structural edit; lets dependents detect staleness.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Indices of conv and fc layers, input to output.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parameterized())
            .collect()
    }

    /// The next parameterized layer after `l`.
    pub fn consumer_of(&self, l: usize) -> Option<usize> {
        (l + 1..self.layers.len()).find(|&i| self.layers[i].is_parameterized())
    }

    /// Index of the class-output layer (the last parameterized layer).
    pub fn output_layer(&self) -> Option<usize> {
        self.param_layers().last().copied()
    }

    /// Layers whose units can grow or be pruned: every conv layer and every
    /// fc layer except the class output.
    pub fn unit_layers(&self) -> Vec<usize> {
        let out = self.output_layer();
        self.param_layers().into_iter().filter(|&l| Some(l) != out).collect()
    }

    pub fn spec(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|n| match &n.layer {
                Layer::Conv(p, _) => LayerSpec::Conv {
                    out: p.out_channels(),
                    kernel: p.kernel(),
                    stride: p.stride,
                    padding: p.padding,
                },
                Layer::Fc(p, _) => LayerSpec::Fc { out: p.outputs() },
                Layer::Relu => LayerSpec::Relu,
                Layer::Maxpool => LayerSpec::Maxpool,
                Layer::Flatten => LayerSpec::Flatten,
            })
            .collect();
        NetworkSpec {
            input: self.input_shape,
            layers,
        }
    }

    fn refresh_shapes(&mut self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let mut shape = vec![c, h, w];
        for (idx, node) in self.layers.iter_mut().enumerate() {
            node.in_shape = shape.clone();
            shape = match (&node.layer, &shape[..]) {
                (Layer::Conv(p, _), &[_, hi, wi]) => {
                    vec![p.out_channels(), p.output_extent(hi)?, p.output_extent(wi)?]
                }
                (Layer::Fc(p, _), _) => vec![p.outputs()],
                (Layer::Relu, _) => shape.clone(),
                (Layer::Maxpool, &[ch, hi, wi]) if hi % 2 == 0 && wi % 2 == 0 => {
                    vec![ch, hi / 2, wi / 2]
                }
                (Layer::Flatten, s) => vec![s.iter().product()],
                (layer, s) => {
                    return Err(Error::geometry(format!(
                        "layer {idx} ({:?}) cannot take input shape {s:?}",
                        LayerNode::new(layer.clone()).kind()
                    )))
                }
            };
            node.out_shape = shape.clone();
        }
        Ok(())
    }

    /// Lists every broken structural invariant; empty means the network is consistent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |layer, expected, actual, message: &str| {
            v.push(Violation {
                layer,
                expected,
                actual,
                message: message.to_string(),
            })
        };
        let (c, h, w) = self.input_shape;
        let mut shape = vec![c, h, w];
        for (idx, node) in self.layers.iter().enumerate() {
            match &node.layer {
                Layer::Conv(p, t) => {
                    let ws = p.weights.shape();
                    if ws.len() != 4 || ws[2] != ws[3] {
                        push(idx, 4, ws.len(), "conv weights must be [O, I, K, K]");
                        continue;
                    }
                    if shape.len() != 3 {
                        push(idx, 3, shape.len(), "conv input rank");
                    } else {
                        if ws[1] != shape[0] {
                            push(idx, shape[0], ws[1], "conv input channels vs producer width");
                        }
                        for extent in [shape[1], shape[2]] {
                            if p.output_extent(extent).is_err() {
                                push(idx, 1, 0, "conv geometry has no whole output grid");
                            }
                        }
                    }
                    check_trainable(idx, &p.weights, &p.bias, t, &mut push);
                    let (hi, wi) = (shape.get(1).copied().unwrap_or(1), shape.get(2).copied().unwrap_or(1));
                    shape = vec![
                        ws[0],
                        p.output_extent(hi).unwrap_or(1),
                        p.output_extent(wi).unwrap_or(1),
                    ];
                }
                Layer::Fc(p, t) => {
                    let ws = p.weights.shape();
                    if ws.len() != 2 {
                        push(idx, 2, ws.len(), "fc weights must be [O, I]");
                        continue;
                    }
                    if shape.len() != 1 {
                        push(idx, 1, shape.len(), "fc input must be flat");
                    } else if ws[1] != shape[0] {
                        push(idx, shape[0], ws[1], "fc input width vs producer width");
                    }
                    check_trainable(idx, &p.weights, &p.bias, t, &mut push);
                    shape = vec![ws[0]];
                }
                Layer::Relu => {}
                Layer::Maxpool => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        push(idx, 0, shape.len(), "max pooling needs an even 3D input");
                    } else {
                        shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    }
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
            }
        }
        match self.output_layer().map(|l| (l, &self.layers[l].layer)) {
            Some((l, Layer::Fc(p, _))) => {
                if p.outputs() != self.class_count {
                    push(l, self.class_count, p.outputs(), "output width vs class count");
                }
            }
            Some((l, _)) => push(l, 0, 0, "output layer must be fully connected"),
            None => push(0, 1, 0, "network has no parameterized layer"),
        }
        v
    }

    pub fn describe(&self) -> Description {
        let mut widths = Vec::new();
        let (mut params, mut effective) = (0, 0);
        for node in &self.layers {
            let (Some(w), Some(b), Some(m)) = (node.weights(), node.bias(), node.mask()) else {
                continue;
            };
            let units = w.shape()[0];
            widths.push(units);
            params += w.len() + b.len();
            let fan_in = w.len() / units;
            for u in 0..units {
                let live = m.bits()[u * fan_in..(u + 1) * fan_in].iter().filter(|&&a| a).count();
                if live > 0 {
                    effective += live + 1;
                }
            }
        }
        Description {
            widths,
            params,
            effective_params: effective,
        }
    }

    // ---------------------------------------------------------------------
    // forward / backward

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for node in &self.layers {
            cur = match &node.layer {
                Layer::Conv(p, _) => conv2d_forward(&cur, p)?,
                Layer::Fc(p, _) => fc_forward(&cur, p)?,
                Layer::Relu => relu(&cur),
                Layer::Maxpool => maxpool2(&cur)?.0,
                Layer::Flatten => flatten(cur)?,
            };
        }
        Ok(cur)
    }

    /// Forward pass that keeps every intermediate activation.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pools = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for node in &self.layers {
            let cur = activations.last().expect("non-empty");
            let (next, pool) = match &node.layer {
                Layer::Conv(p, _) => (conv2d_forward(cur, p)?, None),
                Layer::Fc(p, _) => (fc_forward(cur, p)?, None),
                Layer::Relu => (relu(cur), None),
                Layer::Maxpool => {
                    let (y, idx) = maxpool2(cur)?;
                    (y, Some(idx))
                }
                Layer::Flatten => (flatten(cur.clone())?, None),
            };
            activations.push(next);
            pools.push(pool);
        }
        Ok(Trace { activations, pools })
    }

    /// Backpropagates `d_logits`; returns one bundle per layer (`None` for
    /// layers without parameters). The first layer's input gradient is not computed.
    pub fn backward(&self, trace: &Trace, d_logits: Tensor) -> Result<Vec<Option<GradientBundle>>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::dim("trace does not belong to this network"));
        }
        let first_param = self.param_layers().first().copied().unwrap_or(0);
        let mut grads: Vec<Option<GradientBundle>> = vec![None; self.layers.len()];
        let mut dy = d_logits;
        for (idx, node) in self.layers.iter().enumerate().rev() {
            let x = &trace.activations[idx];
            if idx < first_param {
                break;
            }
            dy = match &node.layer {
                Layer::Conv(p, _) => {
                    let g = conv2d_backward_opt(x, p, &dy, idx != first_param)?;
                    let dx = g.d_input.clone();
                    grads[idx] = Some(g);
                    dx
                }
                Layer::Fc(p, _) => {
                    let g = fc_backward(x, p, &dy)?;
                    let dx = g.d_input.clone();
                    grads[idx] = Some(g);
                    dx
                }
                Layer::Relu => relu_backward(x, &dy)?,
                Layer::Maxpool => {
                    let pool = trace.pools[idx].as_ref().expect("pool indices recorded");
                    maxpool2_backward(&dy, pool)?
                }
                Layer::Flatten => dy.reshape(x.shape())?,
            };
        }
        Ok(grads)
    }

    /// One masked momentum-SGD step on every parameterized layer.
    pub fn sgd_step(
        &mut self,
        grads: &[Option<GradientBundle>],
        lr: f32,
        momentum: f32,
        weight_decay: f32,
    ) -> Result<()> {
        for (node, g) in self.layers.iter_mut().zip(grads) {
            let (Some((w, b, t)), Some(g)) = (node.parts_mut(), g.as_ref()) else {
                continue;
            };
            crate::nn::sgd_update(
                w,
                &g.d_weights,
                &mut t.velocity_w,
                lr,
                momentum,
                weight_decay,
                Some(&t.mask),
            )?;
            crate::nn::sgd_update(b, &g.d_bias, &mut t.velocity_b, lr, momentum, weight_decay, None)?;
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // structural primitives

    fn check_unit_layer(&self, l: usize) -> Result<usize> {
        let node = self
            .layers
            .get(l)
            .ok_or_else(|| Error::structural(format!("layer {l} does not exist")))?;
        if !node.is_parameterized() {
            return Err(Error::structural(format!("layer {l} has no units")));
        }
        let consumer = self
            .consumer_of(l)
            .ok_or_else(|| Error::structural(format!("layer {l} is the class-output layer; its width is fixed")))?;
        Ok(consumer)
    }

    /// Shape of the consumer's weights viewed as `[O_c, units_of_l, block]`,
    /// where `block` is the slab one unit of `l` owns in each consumer row.
    fn consumer_view(&self, l: usize, consumer: usize) -> Vec<usize> {
        let cw = self.layers[consumer].weights().expect("parameterized").shape();
        let units = self.layers[l].units().expect("parameterized");
        let rows = cw[0];
        let inner = cw[1..].iter().product::<usize>() / units;
        vec![rows, units, inner]
    }

    /// Width of the consumer-side slab owned by one unit of layer `l`:
    /// `O_c * K * K` for conv consumers, `O_c * H * W` across a flatten,
    /// `O_c` for fc consumers.
    pub fn consumer_slice_len(&self, l: usize) -> Result<usize> {
        let consumer = self.check_unit_layer(l)?;
        let v = self.consumer_view(l, consumer);
        Ok(v[0] * v[2])
    }

    /// Copies out unit `j` of layer `l`: its own weights, bias and consumer slice.
    pub fn unit_parts(&self, l: usize, j: usize) -> Result<UnitParts> {
        let consumer = self.check_unit_layer(l)?;
        let node = &self.layers[l];
        let units = node.units().expect("parameterized");
        if j >= units {
            return Err(Error::structural(format!("unit {j} out of bounds for width {units}")));
        }
        let w = node.weights().expect("parameterized");
        let own = crate::tensor::axis_slice(w.shape(), w.data(), 0, j)?;
        let own_mask = node.mask().expect("parameterized").slice_axis(0, j)?;
        let view = self.consumer_view(l, consumer);
        let cnode = &self.layers[consumer];
        let consumer_slice = crate::tensor::axis_slice(&view, cnode.weights().expect("p").data(), 1, j)?;
        let consumer_mask = crate::tensor::axis_slice(&view, cnode.mask().expect("p").bits(), 1, j)?;
        Ok(UnitParts {
            own,
            own_mask,
            bias: node.bias().expect("parameterized").data()[j],
            consumer: consumer_slice,
            consumer_mask,
        })
    }

    /// Overwrites the values of unit `j` of layer `l` (masks untouched, masked
    /// positions forced to zero).
    pub fn write_unit(&mut self, l: usize, j: usize, own: &[f32], bias: f32, consumer_slice: &[f32]) -> Result<()> {
        let consumer = self.check_unit_layer(l)?;
        let view = self.consumer_view(l, consumer);
        {
            let (w, b, t) = self.layers[l].parts_mut().expect("parameterized");
            let shape = w.shape().to_vec();
            crate::tensor::axis_write(&shape, w.data_mut(), 0, j, own)?;
            t.mask.apply(w.data_mut());
            b.data_mut()[j] = bias;
        }
        let (w, _, t) = self.layers[consumer].parts_mut().expect("parameterized");
        crate::tensor::axis_write(&view, w.data_mut(), 1, j, consumer_slice)?;
        t.mask.apply(w.data_mut());
        Ok(())
    }

    /// Inserts a unit at index `j` of layer `l` plus its consumer-side slab.
    /// Masks for the new entries are given explicitly; velocities start at zero.
    pub fn insert_unit(&mut self, l: usize, j: usize, unit: &UnitParts) -> Result<()> {
        let consumer = self.check_unit_layer(l)?;
        let node = &self.layers[l];
        let units = node.units().expect("parameterized");
        let fan_in = node.fan_in().expect("parameterized");
        if j > units {
            return Err(Error::structural(format!("insert index {j} beyond width {units}")));
        }
        if unit.own.len() != fan_in || unit.own_mask.len() != fan_in {
            return Err(Error::dim(format!(
                "new unit has {} weights / {} mask bits, layer {l} needs {fan_in}",
                unit.own.len(),
                unit.own_mask.len()
            )));
        }
        let view = self.consumer_view(l, consumer);
        let slice_len = view[0] * view[2];
        if unit.consumer.len() != slice_len || unit.consumer_mask.len() != slice_len {
            return Err(Error::dim(format!(
                "consumer slice has {} values / {} mask bits, layer {consumer} needs {slice_len}",
                unit.consumer.len(),
                unit.consumer_mask.len()
            )));
        }

        let mut own = unit.own.clone();
        zero_masked(&mut own, &unit.own_mask);
        {
            let (w, b, t) = self.layers[l].parts_mut().expect("parameterized");
            w.insert_axis(0, j, &own)?;
            b.insert_axis(0, j, &[unit.bias])?;
            t.mask.insert_axis(0, j, &unit.own_mask)?;
            t.velocity_w.insert_axis(0, j, &vec![0.0; fan_in])?;
            t.velocity_b.insert_axis(0, j, &[0.0])?;
        }
        let mut slab = unit.consumer.clone();
        zero_masked(&mut slab, &unit.consumer_mask);
        self.edit_consumer(consumer, &view, |shape, w, mask, vel| {
            crate::tensor::axis_insert(shape, w, 1, j, &slab)?;
            let mut mshape = view.clone();
            crate::tensor::axis_insert(&mut mshape, mask, 1, j, &unit.consumer_mask)?;
            let mut vshape = view.clone();
            crate::tensor::axis_insert(&mut vshape, vel, 1, j, &vec![0.0; slice_len])
        })?;
        self.revision += 1;
        self.refresh_shapes()
    }

    /// Deletes unit `j` of layer `l` and its consumer slab. Refuses to empty a layer.
    pub fn remove_unit(&mut self, l: usize, j: usize) -> Result<()> {
        let consumer = self.check_unit_layer(l)?;
        let units = self.layers[l].units().expect("parameterized");
        if j >= units {
            return Err(Error::structural(format!("unit {j} out of bounds for width {units}")));
        }
        if units < 2 {
            return Err(Error::structural(format!(
                "layer {l} has a single unit; removing it would empty the layer"
            )));
        }
        let view = self.consumer_view(l, consumer);
        {
            let (w, b, t) = self.layers[l].parts_mut().expect("parameterized");
            w.remove_axis(0, j)?;
            b.remove_axis(0, j)?;
            t.mask.remove_axis(0, j)?;
            t.velocity_w.remove_axis(0, j)?;
            t.velocity_b.remove_axis(0, j)?;
        }
        self.edit_consumer(consumer, &view, |shape, w, mask, vel| {
            crate::tensor::axis_remove(shape, w, 1, j)?;
            let mut mshape = view.clone();
            crate::tensor::axis_remove(&mut mshape, mask, 1, j)?;
            let mut vshape = view.clone();
            crate::tensor::axis_remove(&mut vshape, vel, 1, j)
        })?;
        self.revision += 1;
        self.refresh_shapes()
    }

    /// Runs `edit` on the consumer's weights/mask/velocity in the 3D unit view,
    /// then restores the layer's native shapes.
    fn edit_consumer<F>(&mut self, consumer: usize, view: &[usize], edit: F) -> Result<()>
    where
        F: FnOnce(&mut [usize], &mut Vec<f32>, &mut Vec<bool>, &mut Vec<f32>) -> Result<()>,
    {
        let (w, _, t) = self.layers[consumer].parts_mut().expect("parameterized");
        let native = w.shape().to_vec();
        let mut shape = view.to_vec();
        let mut wdata = w.data().to_vec();
        let mut mbits = t.mask.bits().to_vec();
        let mut vdata = t.velocity_w.data().to_vec();
        edit(&mut shape, &mut wdata, &mut mbits, &mut vdata)?;
        // [O_c, units, block] -> native with the unit axis (axis 1) rescaled
        let mut new_shape = native.clone();
        if native.len() == 4 {
            new_shape[1] = shape[1];
        } else {
            new_shape[1] = shape[1] * shape[2];
        }
        *w = Tensor::from_vec(&new_shape, wdata)?;
        t.velocity_w = Tensor::from_vec(&new_shape, vdata)?;
        t.mask = WeightMask::from_bits(&new_shape, mbits)?;
        Ok(())
    }

    /// Adds output channel `j` to conv layer `l`.
    ///
    /// `new_filter` is `[I, K, K]`; `consumer_slice` is `[O_next, 1, K, K]` for
    /// a conv consumer or `[O_fc, H*W]` when the consumer is fc across a flatten.
    pub fn insert_output_channel(
        &mut self,
        l: usize,
        j: usize,
        new_filter: &Tensor,
        new_bias: f32,
        consumer_slice: &Tensor,
    ) -> Result<()> {
        self.expect_kind(l, LayerKind::Conv)?;
        self.insert_unit(
            l,
            j,
            &UnitParts::active(new_filter.data(), new_bias, consumer_slice.data()),
        )
    }

    pub fn remove_output_channel(&mut self, l: usize, j: usize) -> Result<()> {
        self.expect_kind(l, LayerKind::Conv)?;
        self.remove_unit(l, j)
    }

    /// The fc junction whose incoming matrix is layer `incoming`.
    pub fn junction(&self, incoming: usize) -> Result<Junction> {
        self.expect_kind(incoming, LayerKind::Fc)?;
        let outgoing = self
            .consumer_of(incoming)
            .ok_or_else(|| Error::structural(format!("layer {incoming} is the class-output layer")))?;
        self.expect_kind(outgoing, LayerKind::Fc)?;
        Ok(Junction { incoming, outgoing })
    }

    /// Adds hidden neuron `i`: row `i` of the incoming matrix (with `bias`) and
    /// column `i` of the outgoing matrix.
    pub fn insert_hidden_neuron(
        &mut self,
        junction: Junction,
        i: usize,
        fan_in_row: &Tensor,
        fan_out_col: &Tensor,
        bias: f32,
    ) -> Result<()> {
        let j = self.junction(junction.incoming)?;
        if j != junction {
            return Err(Error::structural(format!(
                "{junction:?} is not an fc junction of this network"
            )));
        }
        self.insert_unit(
            j.incoming,
            i,
            &UnitParts::active(fan_in_row.data(), bias, fan_out_col.data()),
        )
    }

    pub fn remove_hidden_neuron(&mut self, junction: Junction, i: usize) -> Result<()> {
        let j = self.junction(junction.incoming)?;
        if j != junction {
            return Err(Error::structural(format!(
                "{junction:?} is not an fc junction of this network"
            )));
        }
        self.remove_unit(j.incoming, i)
    }

    fn expect_kind(&self, l: usize, kind: LayerKind) -> Result<()> {
        match self.layers.get(l) {
            Some(n) if n.kind() == kind => Ok(()),
            Some(n) => Err(Error::structural(format!(
                "layer {l} is {:?}, expected {kind:?}",
                n.kind()
            ))),
            None => Err(Error::structural(format!("layer {l} does not exist"))),
        }
    }
}

/// Values and masks of one unit: its own fan-in weights and bias plus the
/// slab it owns in the consumer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParts {
    pub own: Vec<f32>,
    pub own_mask: Vec<bool>,
    pub bias: f32,
    pub consumer: Vec<f32>,
    pub consumer_mask: Vec<bool>,
}

impl UnitParts {
    pub fn active(own: &[f32], bias: f32, consumer: &[f32]) -> Self {
        Self {
            own: own.to_vec(),
            own_mask: vec![true; own.len()],
            bias,
            consumer: consumer.to_vec(),
            consumer_mask: vec![true; consumer.len()],
        }
    }
}

fn zero_masked(values: &mut [f32], mask: &[bool]) {
    for (v, &m) in values.iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
}

fn flatten(x: Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let rest = x.len() / n;
    x.reshape(&[n, rest])
}

fn check_trainable<F>(idx: usize, w: &Tensor, b: &Tensor, t: &Trainable, push: &mut F)
where
    F: FnMut(usize, usize, usize, &str),
{
    let units = w.shape()[0];
    if b.len() != units {
        push(idx, units, b.len(), "bias length vs unit count");
    }
    if t.mask.shape() != w.shape() {
        push(idx, w.len(), t.mask.len(), "mask shape vs weight shape");
    } else {
        let live_masked = w
            .data()
            .iter()
            .zip(t.mask.bits())
            .filter(|(&v, &m)| !m && v != 0.0)
            .count();
        if live_masked > 0 {
            push(idx, 0, live_masked, "masked weights holding non-zero values");
        }
    }
    if t.velocity_w.shape() != w.shape() {
        push(idx, w.len(), t.velocity_w.len(), "weight velocity shape");
    }
    if t.velocity_b.len() != units {
        push(idx, units, t.velocity_b.len(), "bias velocity length");
    }
}
