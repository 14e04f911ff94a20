use rand::Rng;
use sha2::{Digest, Sha256};

use super::layers::{self, Conv, ConvTranspose, MaxPool};
use super::{NnError, Tensor};

/// One stage of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    ConvTranspose(ConvTranspose),
    MaxPool(MaxPool),
    Relu,
    /// Clamp to `[0, 1]`. Acts as the identity while training.
    Clamp,
    /// Zero-pad spatial axes up to the given `[d, h, w]`.
    Pad([usize; 3]),
    /// Crop spatial axes to the given `[d, h, w]`.
    Crop([usize; 3]),
    /// Resample spatial axes to the given `[d, h, w]`.
    Rescale([usize; 3]),
    /// Channel-aware downsampling of an encoded problem; see
    /// [`layers::encoded_rescale`]. Not differentiable.
    InputRescale([usize; 3]),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::ConvTranspose(_) => "conv_transpose",
            Layer::MaxPool(_) => "max_pool",
            Layer::Relu => "relu",
            Layer::Clamp => "clamp",
            Layer::Pad(_) => "pad",
            Layer::Crop(_) => "crop",
            Layer::Rescale(_) => "rescale",
            Layer::InputRescale(_) => "input_rescale",
        }
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::ConvTranspose(c) => Some((&c.weight, &c.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::ConvTranspose(c) => Some((&mut c.weight, &mut c.bias)),
            _ => None,
        }
    }

    pub fn out_channels(&self, input: usize) -> usize {
        match self {
            Layer::Conv(c) => c.out_ch,
            Layer::ConvTranspose(c) => c.out_ch,
            _ => input,
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3], NnError> {
        match self {
            Layer::Conv(c) => c.out_dims(input),
            Layer::ConvTranspose(c) => c.out_dims(input),
            Layer::MaxPool(p) => p.out_dims(input),
            Layer::Relu | Layer::Clamp => Ok(input),
            Layer::Pad(d) | Layer::Crop(d) | Layer::Rescale(d) | Layer::InputRescale(d) => Ok(*d),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        match self {
            Layer::Conv(c) => c.init_he(rng),
            Layer::ConvTranspose(c) => c.init_he(rng),
            _ => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Train,
}

#[derive(Debug)]
enum Cache {
    None,
    Argmax(Vec<usize>),
}

/// Saved activations of a forward pass starting at some layer.
#[derive(Debug)]
pub struct Trace {
    start: usize,
    inputs: Vec<Tensor>,
    caches: Vec<Cache>,
    pub output: Tensor,
}

/// Parameter gradient buffers for one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A feed-forward chain of layers with per-layer freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    /// Input channels.
    pub in_channels: usize,
    /// Input spatial extents `[d, h, w]`; `d == 1` for 2D networks.
    pub in_dims: [usize; 3],
    /// Spatial rank (2 or 3); decides the tensor layout at the boundary.
    pub rank: usize,
    pub layers: Vec<Layer>,
    pub frozen: Vec<bool>,
}

impl Sequential {
    pub fn new(in_channels: usize, in_dims: [usize; 3], rank: usize) -> Self {
        Sequential { in_channels, in_dims, rank, layers: Vec::new(), frozen: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
        self.frozen.push(false);
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let [d, h, w] = self.in_dims;
        if self.rank == 2 {
            vec![batch, self.in_channels, h, w]
        } else {
            vec![batch, self.in_channels, d, h, w]
        }
    }

    /// `(channels, [d, h, w])` after every layer.
    pub fn shape_walk(&self) -> Result<Vec<(usize, [usize; 3])>, NnError> {
        let mut ch = self.in_channels;
        let mut dims = self.in_dims;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = layer {
                if c.in_ch != ch {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer {i}: conv expects {} channels, receives {ch}",
                        c.in_ch
                    )));
                }
            }
            if let Layer::ConvTranspose(c) = layer {
                if c.in_ch != ch {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer {i}: transposed conv expects {} channels, receives {ch}",
                        c.in_ch
                    )));
                }
            }
            ch = layer.out_channels(ch);
            dims = layer.out_dims(dims)?;
            out.push((ch, dims));
        }
        Ok(out)
    }

    pub fn output_dims(&self) -> Result<(usize, [usize; 3]), NnError> {
        Ok(self.shape_walk()?.last().copied().unwrap_or((self.in_channels, self.in_dims)))
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params()).map(|(w, b)| w.len() + b.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        let expected = self.input_shape(x.shape()[0]);
        if x.shape() != expected.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "network expects input {:?}, got {:?}",
                expected,
                x.shape()
            )));
        }
        Ok(())
    }

    fn apply(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache), NnError> {
        Ok(match layer {
            Layer::Conv(c) => (c.forward(x)?, Cache::None),
            Layer::ConvTranspose(c) => (c.forward(x)?, Cache::None),
            Layer::MaxPool(p) => {
                let (y, arg) = p.forward(x)?;
                (y, Cache::Argmax(arg))
            }
            Layer::Relu => (layers::relu(x), Cache::None),
            Layer::Clamp => match mode {
                Mode::Inference => (layers::clamp01(x), Cache::None),
                Mode::Train => (x.clone(), Cache::None),
            },
            Layer::Pad(d) => (layers::pad_to(x, *d)?, Cache::None),
            Layer::Crop(d) => (layers::crop_to(x, *d)?, Cache::None),
            Layer::Rescale(d) => (layers::rescale_to(x, *d)?, Cache::None),
            Layer::InputRescale(d) => (layers::encoded_rescale(x, *d)?, Cache::None),
        })
    }

    /// Inference forward pass over the whole network.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        self.forward_range(0, self.layers.len(), x, Mode::Inference)
    }

    /// Runs layers `start..end` without keeping activations.
    pub fn forward_range(
        &self,
        start: usize,
        end: usize,
        x: &Tensor,
        mode: Mode,
    ) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers[start..end] {
            cur = Self::apply(layer, &cur, mode)?.0;
        }
        Ok(cur)
    }

    /// Forward pass from layer `start`, keeping what the backward pass needs.
    pub fn forward_trace(&self, start: usize, x: &Tensor, mode: Mode) -> Result<Trace, NnError> {
        let mut inputs = Vec::with_capacity(self.layers.len() - start);
        let mut caches = Vec::with_capacity(self.layers.len() - start);
        let mut cur = x.clone();
        for layer in &self.layers[start..] {
            let (y, cache) = Self::apply(layer, &cur, mode)?;
            inputs.push(std::mem::replace(&mut cur, y));
            caches.push(cache);
        }
        Ok(Trace { start, inputs, caches, output: cur })
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| match l.params() {
                Some((w, b)) => LayerGrad { weight: vec![0.0; w.len()], bias: vec![0.0; b.len()] },
                None => LayerGrad::default(),
            })
            .collect()
    }

    /// Backpropagates `dy` through a trace, accumulating parameter gradients
    /// of unfrozen layers into `grads`. Returns the gradient with respect to
    /// the trace input when `need_input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        dy: Tensor,
        grads: &mut [LayerGrad],
        mode: Mode,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>, NnError> {
        let start = trace.start;
        // Below the lowest trainable layer nothing needs a gradient.
        let lowest = if need_input_grad {
            start
        } else {
            match (start..self.layers.len()).find(|&i| !self.frozen[i] && self.layers[i].params().is_some()) {
                Some(i) => i,
                None => return Ok(None),
            }
        };
        let mut g = dy;
        for i in (lowest..self.layers.len()).rev() {
            let x = &trace.inputs[i - start];
            let need_dx = i > lowest || need_input_grad;
            let trainable = !self.frozen[i];
            let next = match &self.layers[i] {
                Layer::Conv(c) => {
                    let lg = &mut grads[i];
                    let pg = trainable.then_some((lg.weight.as_mut_slice(), lg.bias.as_mut_slice()));
                    c.backward(x, &g, pg, need_dx)?
                }
                Layer::ConvTranspose(c) => {
                    let lg = &mut grads[i];
                    let pg = trainable.then_some((lg.weight.as_mut_slice(), lg.bias.as_mut_slice()));
                    c.backward(x, &g, pg, need_dx)?
                }
                Layer::MaxPool(_) => match &trace.caches[i - start] {
                    Cache::Argmax(arg) => Some(MaxPool::backward(x, arg, &g)),
                    Cache::None => unreachable!("max pool always caches its argmax"),
                },
                Layer::Relu => Some(layers::relu_backward(x, &g)),
                Layer::Clamp => match mode {
                    Mode::Inference => Some(layers::clamp01_backward(x, &g)),
                    Mode::Train => Some(g.clone()),
                },
                Layer::Pad(_) => {
                    let d = x.dims5()?;
                    Some(layers::crop_to(&g, [d[2], d[3], d[4]])?)
                }
                Layer::Crop(_) => {
                    let d = x.dims5()?;
                    Some(layers::pad_to(&g, [d[2], d[3], d[4]])?)
                }
                Layer::Rescale(d) => Some(layers::rescale_backward(x, &g, *d)?),
                Layer::InputRescale(_) => return Err(NnError::NotDifferentiable("input_rescale")),
            };
            match next {
                Some(n) => g = n,
                None => return Ok(None),
            }
        }
        Ok(need_input_grad.then_some(g))
    }

    /// SHA-256 over the little-endian f32 parameters of `layers[range]`.
    pub fn param_hash(&self, range: std::ops::Range<usize>) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers[range] {
            if let Some((w, b)) = layer.params() {
                for v in w.iter().chain(b) {
                    h.update((*v as f32).to_le_bytes());
                }
            }
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
