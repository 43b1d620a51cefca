//! Pooling-free U-Net ("MU-Net"): a stack of 3x3x3 convolutions at full
//! resolution with ReLU after every layer but the last, and mirrored
//! encoder-to-decoder skips realized as channel concatenation.
//!
//! Layer `l` reads the output of layer `l - 1`; when `(i, l)` is a skip pair
//! the output of layer `i` is appended after it along the channel axis. The
//! final layer has one output channel and no activation, and predicts the
//! residual between the interpolated input and the high-resolution target.

use rand_distr::{Distribution, Normal};

use super::conv::{conv3d_backward, conv3d_forward, ConvGrads, ConvLayer, TAPS};
use super::tensor::{concat_channels, relu_backward, relu_forward, split_channels, Real, Tensor5};
use crate::error::{Result, SrnrError};
use crate::rng::seeded_rng;

/// Depth (number of conv layers) and hidden width of a MU-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetShape {
    pub depth: usize,
    pub width: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            depth: 10,
            width: 32,
        }
    }
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(SrnrError::InvalidArgument(format!(
                "network depth and width must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Skip pairs `(source, destination)`: layer `i` feeds layer
    /// `depth - 1 - i` for every `i` whose mirror is not its direct successor.
    pub fn skips(&self) -> Vec<(usize, usize)> {
        let d = self.depth;
        (0..d / 2)
            .map(|i| (i, d - 1 - i))
            .filter(|&(i, dst)| dst > i + 1)
            .collect()
    }

    pub fn skip_source(&self, layer: usize) -> Option<usize> {
        self.skips().into_iter().find(|&(_, dst)| dst == layer).map(|(s, _)| s)
    }

    /// `(c_out, c_in)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let skips = self.skips();
        (0..self.depth)
            .map(|l| {
                let c_out = if l + 1 == self.depth { 1 } else { self.width };
                let mut c_in = if l == 0 { 1 } else { self.width };
                if skips.iter().any(|&(_, dst)| dst == l) {
                    c_in += self.width;
                }
                (c_out, c_in)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(co, ci)| co * ci * TAPS + co)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MuNet<T> {
    shape: NetShape,
    layers: Vec<ConvLayer<T>>,
}

/// Flattened parameters (or gradients): each layer's weights followed by its
/// bias, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    pub shape: NetShape,
    pub values: Vec<T>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(shape: NetShape) -> Self {
        NetParams {
            shape,
            values: vec![T::zero(); shape.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Activations retained by [`munet_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    input: Tensor5<T>,
    /// Output of every layer, after ReLU for all but the last.
    outputs: Vec<Tensor5<T>>,
}

impl<T: Real> Tape<T> {
    pub fn input(&self) -> &Tensor5<T> {
        &self.input
    }

    /// Output of every layer, in layer order.
    pub fn outputs(&self) -> &[Tensor5<T>] {
        &self.outputs
    }
}

impl<T: Real> MuNet<T> {
    /// All-zero network: predicts a zero residual.
    pub fn zeros(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let layers = shape
            .layer_shapes()
            .into_iter()
            .map(|(co, ci)| ConvLayer::zeros(co, ci))
            .collect();
        Ok(MuNet { shape, layers })
    }

    pub fn from_layers(shape: NetShape, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        shape.validate()?;
        let expected = shape.layer_shapes();
        if layers.len() != expected.len()
            || layers
                .iter()
                .zip(&expected)
                .any(|(l, &(co, ci))| l.c_out != co || l.c_in != ci || l.weights.len() != co * ci * TAPS || l.bias.len() != co)
        {
            return Err(SrnrError::Shape(format!(
                "layers do not match network shape {shape:?}"
            )));
        }
        Ok(MuNet { shape, layers })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn params(&self) -> NetParams<T> {
        let mut values = Vec::with_capacity(self.shape.param_count());
        for l in &self.layers {
            values.extend_from_slice(&l.weights);
            values.extend_from_slice(&l.bias);
        }
        NetParams {
            shape: self.shape,
            values,
        }
    }

    pub fn set_params(&mut self, params: &NetParams<T>) -> Result<()> {
        if params.shape != self.shape || params.values.len() != self.shape.param_count() {
            return Err(SrnrError::Shape(format!(
                "parameter vector for {:?} ({} values) does not fit {:?}",
                params.shape,
                params.values.len(),
                self.shape
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params.values[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params.values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn from_params(params: &NetParams<T>) -> Result<Self> {
        let mut net = Self::zeros(params.shape)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> MuNet<U> {
        MuNet {
            shape: self.shape,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    c_out: l.c_out,
                    c_in: l.c_in,
                    weights: l.weights.iter().map(|v| U::of(v.f64())).collect(),
                    bias: l.bias.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(ConvLayer::all_finite)
    }

    fn layer_input<'a>(&self, tape: &'a Tape<T>, l: usize) -> Result<std::borrow::Cow<'a, Tensor5<T>>> {
        use std::borrow::Cow;
        if l == 0 {
            return Ok(Cow::Borrowed(&tape.input));
        }
        match self.shape.skip_source(l) {
            Some(src) => Ok(Cow::Owned(concat_channels(&tape.outputs[l - 1], &tape.outputs[src])?)),
            None => Ok(Cow::Borrowed(&tape.outputs[l - 1])),
        }
    }
}

/// He-normal weights (`std = sqrt(2 / (c_in * 27))`) and zero biases.
pub fn init_params<T: Real>(shape: NetShape, seed: u64) -> Result<MuNet<T>> {
    let mut net = MuNet::zeros(shape)?;
    let mut rng = seeded_rng(seed);
    for layer in &mut net.layers {
        let std = (2.0 / (layer.c_in * TAPS) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut layer.weights {
            *w = T::of(normal.sample(&mut rng));
        }
    }
    Ok(net)
}

/// Runs the network; returns the predicted residual and the tape.
pub fn munet_forward<T: Real>(net: &MuNet<T>, x: &Tensor5<T>) -> Result<(Tensor5<T>, Tape<T>)> {
    if x.channels() != 1 {
        return Err(SrnrError::Shape(format!(
            "MU-Net input must have one channel, got {}",
            x.channels()
        )));
    }
    let mut tape = Tape {
        input: x.clone(),
        outputs: Vec::with_capacity(net.layers.len()),
    };
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let input = net.layer_input(&tape, l)?;
        let pre = conv3d_forward(&input, layer)?;
        drop(input);
        let out = if l == last { pre } else { relu_forward(&pre) };
        tape.outputs.push(out);
    }
    let residual = tape.outputs[last].clone();
    Ok((residual, tape))
}

/// Super-resolved prediction `x + residual`.
pub fn munet_predict<T: Real>(net: &MuNet<T>, x: &Tensor5<T>) -> Result<Tensor5<T>> {
    let (residual, _) = munet_forward(net, x)?;
    x.add(&residual)
}

/// Gradients of a scalar loss with respect to all parameters and the input.
#[derive(Clone, Debug)]
pub struct MuNetGrads<T> {
    pub params: NetParams<T>,
    pub input: Tensor5<T>,
}

pub fn munet_backward<T: Real>(
    net: &MuNet<T>,
    tape: &Tape<T>,
    grad_residual: &Tensor5<T>,
) -> Result<MuNetGrads<T>> {
    let depth = net.layers.len();
    if tape.outputs.len() != depth {
        return Err(SrnrError::InvalidTape(format!(
            "tape has {} layer outputs, network has {depth} layers",
            tape.outputs.len()
        )));
    }
    for (l, (out, layer)) in tape.outputs.iter().zip(&net.layers).enumerate() {
        if out.channels() != layer.c_out || out.spatial() != tape.input.spatial() || out.batch() != tape.input.batch() {
            return Err(SrnrError::InvalidTape(format!("layer {l} output does not match the network")));
        }
    }
    if grad_residual.shape() != tape.outputs[depth - 1].shape() {
        return Err(SrnrError::InvalidTape(format!(
            "upstream gradient shape {:?} does not match the residual {:?}",
            grad_residual.shape(),
            tape.outputs[depth - 1].shape()
        )));
    }

    let mut upstream: Vec<Option<Tensor5<T>>> = vec![None; depth];
    upstream[depth - 1] = Some(grad_residual.clone());
    let mut layer_grads: Vec<Option<ConvGrads<T>>> = vec![None; depth];
    let mut grad_input = None;

    for l in (0..depth).rev() {
        let g_out = match upstream[l].take() {
            Some(g) => g,
            None => Tensor5::zeros(tape.outputs[l].shape()),
        };
        let g_pre = if l + 1 == depth {
            g_out
        } else {
            relu_backward(&tape.outputs[l], &g_out)?
        };
        let input = net.layer_input(tape, l)?;
        let (g_in, grads) = conv3d_backward(&input, &net.layers[l], &g_pre)?;
        drop(input);
        layer_grads[l] = Some(grads);

        if l == 0 {
            grad_input = Some(g_in);
            break;
        }
        let (to_prev, to_skip) = match net.shape.skip_source(l) {
            Some(src) => {
                let (a, b) = split_channels(&g_in, tape.outputs[l - 1].channels())?;
                (a, Some((src, b)))
            }
            None => (g_in, None),
        };
        accumulate(&mut upstream[l - 1], to_prev);
        if let Some((src, g)) = to_skip {
            accumulate(&mut upstream[src], g);
        }
    }

    let mut values = Vec::with_capacity(net.shape.param_count());
    for g in layer_grads {
        let g = g.expect("every layer visited");
        values.extend(g.weights);
        values.extend(g.bias);
    }
    Ok(MuNetGrads {
        params: NetParams {
            shape: net.shape,
            values,
        },
        input: grad_input.expect("layer 0 visited"),
    })
}

fn accumulate<T: Real>(slot: &mut Option<Tensor5<T>>, g: Tensor5<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
