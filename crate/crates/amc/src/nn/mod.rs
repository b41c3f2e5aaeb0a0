//! Minimal dense/convolutional network framework.
//!
//! Supports exactly what the compression environment needs: forward
//! inference, reverse-mode gradients, SGD with frozen pruning masks,
//! accuracy evaluation, and a versioned binary weight format.
//!
//! Weights are stored as `f32` (the on-disk type); every dot product and
//! reduction runs in `f64`, which keeps finite-difference gradient checks
//! meaningful at small step sizes.

mod io;
mod train;

pub use io::{load_weights, save_weights};
pub use train::{evaluate, gradient_check, train_epoch, softmax_cross_entropy, LossKind};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Dense,
    Relu,
    MaxPool,
    Flatten,
}

impl LayerKind {
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Dense)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// Static description of one layer, with its input geometry resolved.
///
/// Conventions: dense layers have `k = stride = input_h = input_w = 1`;
/// activation/pool layers carry `n == c` and no weights. `input_h/input_w`
/// are the spatial dims of this layer's input (1 once flattened).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl LayerSpec {
    /// Output spatial size for the valid-padding sliding window.
    pub fn out_h(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d | LayerKind::MaxPool => (self.input_h - self.k) / self.stride + 1,
            _ => 1,
        }
    }

    pub fn out_w(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d | LayerKind::MaxPool => (self.input_w - self.k) / self.stride + 1,
            _ => 1,
        }
    }

    /// Number of weights this layer carries (0 for unweighted kinds).
    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.n * self.c * self.k * self.k,
            LayerKind::Dense => self.n * self.c,
            _ => 0,
        }
    }

    /// Flat length of this layer's input.
    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d | LayerKind::MaxPool | LayerKind::Relu => {
                self.c * self.input_h * self.input_w
            }
            LayerKind::Flatten => self.c * self.input_h * self.input_w,
            LayerKind::Dense => self.c,
        }
    }

    /// Flat length of this layer's output.
    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.n * self.out_h() * self.out_w(),
            LayerKind::MaxPool => self.c * self.out_h() * self.out_w(),
            LayerKind::Relu => self.input_len(),
            LayerKind::Flatten => self.c * self.input_h * self.input_w,
            LayerKind::Dense => self.n,
        }
    }
}

/// A layer plus its parameters and (for fine-grained pruning) its mask.
///
/// Masked weights are kept physically zero; the mask is reapplied after
/// every optimizer step so a pruned weight receives no effective update.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Layer {
    fn unweighted(spec: LayerSpec) -> Layer {
        Layer {
            spec,
            weights: Vec::new(),
            biases: Vec::new(),
            mask: None,
        }
    }

    /// Install a 0/1 mask and zero the masked weights.
    pub fn apply_mask(&mut self, mask: Vec<u8>) -> Result<()> {
        if mask.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "mask length {} does not match weight count {}",
                mask.len(),
                self.weights.len()
            )));
        }
        for (w, &m) in self.weights.iter_mut().zip(&mask) {
            if m == 0 {
                *w = 0.0;
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    /// Re-zero masked weights (after an optimizer step).
    pub fn enforce_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &m) in self.weights.iter_mut().zip(mask) {
                if m == 0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// Number of weights not removed by the mask.
    pub fn unmasked_count(&self) -> usize {
        match &self.mask {
            Some(mask) => mask.iter().filter(|&&m| m != 0).count(),
            None => self.weights.len(),
        }
    }
}

/// Building block for [`Network::chain`].
#[derive(Debug, Clone, Copy)]
pub enum LayerDef {
    Conv { n: usize, k: usize, stride: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    Flatten,
    Dense { n: usize },
}

/// A feed-forward chain network.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_c: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
}

impl Network {
    /// Builds a chain from layer definitions, resolving every layer's
    /// input geometry and validating adjacency.
    pub fn chain(input: (usize, usize, usize), defs: &[LayerDef]) -> Result<Network> {
        let (mut c, mut h, mut w) = input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("network input dims must be positive".into()));
        }
        let mut flattened = false;
        let mut layers = Vec::with_capacity(defs.len());
        for (i, def) in defs.iter().enumerate() {
            let spec = match *def {
                LayerDef::Conv { n, k, stride } => {
                    if flattened {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: "conv after flatten".into(),
                        });
                    }
                    if n == 0 || k == 0 || stride == 0 || k > h || k > w {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: format!("conv n={n} k={k} stride={stride} on {c}x{h}x{w}"),
                        });
                    }
                    let spec = LayerSpec {
                        kind: LayerKind::Conv2d,
                        n,
                        c,
                        k,
                        stride,
                        input_h: h,
                        input_w: w,
                    };
                    h = spec.out_h();
                    w = spec.out_w();
                    c = n;
                    spec
                }
                LayerDef::Relu => LayerSpec {
                    kind: LayerKind::Relu,
                    n: c,
                    c,
                    k: 1,
                    stride: 1,
                    input_h: h,
                    input_w: w,
                },
                LayerDef::MaxPool { k, stride } => {
                    if flattened || k == 0 || stride == 0 || k > h || k > w {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: format!("maxpool k={k} stride={stride} on {c}x{h}x{w}"),
                        });
                    }
                    let spec = LayerSpec {
                        kind: LayerKind::MaxPool,
                        n: c,
                        c,
                        k,
                        stride,
                        input_h: h,
                        input_w: w,
                    };
                    h = spec.out_h();
                    w = spec.out_w();
                    spec
                }
                LayerDef::Flatten => {
                    if flattened {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: "flatten applied twice".into(),
                        });
                    }
                    let spec = LayerSpec {
                        kind: LayerKind::Flatten,
                        n: c * h * w,
                        c,
                        k: 1,
                        stride: 1,
                        input_h: h,
                        input_w: w,
                    };
                    flattened = true;
                    c = spec.n;
                    h = 1;
                    w = 1;
                    spec
                }
                LayerDef::Dense { n } => {
                    if !flattened && (h != 1 || w != 1) {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: "dense before flatten".into(),
                        });
                    }
                    if n == 0 {
                        return Err(Error::ShapeMismatch {
                            layer: i,
                            detail: "dense n=0".into(),
                        });
                    }
                    let spec = LayerSpec {
                        kind: LayerKind::Dense,
                        n,
                        c,
                        k: 1,
                        stride: 1,
                        input_h: 1,
                        input_w: 1,
                    };
                    c = n;
                    spec
                }
            };
            let wl = spec.weight_len();
            let bl = if spec.kind.is_weighted() { spec.n } else { 0 };
            layers.push(Layer {
                spec,
                weights: vec![0.0; wl],
                biases: vec![0.0; bl],
                mask: None,
            });
        }
        let num_classes = match layers.last() {
            Some(l) if l.spec.kind == LayerKind::Dense => l.spec.n,
            _ => return Err(Error::Config("network must end with a dense layer".into())),
        };
        Ok(Network {
            layers,
            input_c: input.0,
            input_h: input.1,
            input_w: input.2,
            num_classes,
        })
    }

    /// The default 6-weighted-layer convolutional classifier.
    pub fn conv6(input: (usize, usize, usize), num_classes: usize) -> Result<Network> {
        Network::chain(
            input,
            &[
                LayerDef::Conv { n: 8, k: 3, stride: 1 },
                LayerDef::Relu,
                LayerDef::Conv { n: 8, k: 3, stride: 1 },
                LayerDef::Relu,
                LayerDef::MaxPool { k: 2, stride: 2 },
                LayerDef::Conv { n: 16, k: 3, stride: 1 },
                LayerDef::Relu,
                LayerDef::Conv { n: 16, k: 3, stride: 1 },
                LayerDef::Relu,
                LayerDef::Flatten,
                LayerDef::Dense { n: 32 },
                LayerDef::Relu,
                LayerDef::Dense { n: num_classes },
            ],
        )
    }

    /// A small 3-weighted-layer net for fast tests.
    pub fn conv3(input: (usize, usize, usize), num_classes: usize) -> Result<Network> {
        Network::chain(
            input,
            &[
                LayerDef::Conv { n: 4, k: 3, stride: 1 },
                LayerDef::Relu,
                LayerDef::MaxPool { k: 2, stride: 2 },
                LayerDef::Flatten,
                LayerDef::Dense { n: 16 },
                LayerDef::Relu,
                LayerDef::Dense { n: num_classes },
            ],
        )
    }

    /// Uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = stream(seed, "net-init");
        for layer in &mut self.layers {
            if !layer.spec.kind.is_weighted() {
                continue;
            }
            let fan_in = match layer.spec.kind {
                LayerKind::Conv2d => layer.spec.c * layer.spec.k * layer.spec.k,
                _ => layer.spec.c,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound) as f32;
            }
            for b in &mut layer.biases {
                *b = 0.0;
            }
        }
    }

    /// Indices of the weighted (prunable) layers, in order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.kind.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    /// Total weight count over weighted layers (biases excluded).
    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Total unmasked weight count.
    pub fn total_unmasked(&self) -> usize {
        self.layers.iter().map(|l| l.unmasked_count()).sum()
    }

    pub fn input_len(&self) -> usize {
        self.input_c * self.input_h * self.input_w
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let d = batch.dims();
        let ok = d.len() == 4
            && d[1] == self.input_c
            && d[2] == self.input_h
            && d[3] == self.input_w;
        if !ok {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "batch dims {:?} vs network input {}x{}x{}",
                    d, self.input_c, self.input_h, self.input_w
                ),
            });
        }
        Ok(())
    }

    /// Forward one flat sample; returns logits.
    pub fn forward_sample(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("sample len {} vs input {}", x.len(), self.input_len()),
            });
        }
        let mut cur: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            if cur.len() != layer.spec.input_len() {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    detail: format!(
                        "activation len {} vs expected {}",
                        cur.len(),
                        layer.spec.input_len()
                    ),
                });
            }
            cur = layer_forward(layer, &cur);
        }
        Ok(cur)
    }

    /// Forward a whole batch; returns `batch×num_classes` logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let n = batch.outer();
        let mut out = vec![0.0f32; n * self.num_classes];
        for i in 0..n {
            let logits = self.forward_sample(batch.slice(i))?;
            for (j, v) in logits.iter().enumerate() {
                out[i * self.num_classes + j] = *v as f32;
            }
        }
        Tensor::new(vec![n, self.num_classes], out)
    }

    /// Forward one sample keeping every layer's input (for backprop).
    pub(crate) fn forward_recorded(&self, x: &[f32]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for layer in &self.layers {
            let next = layer_forward(layer, &cur);
            inputs.push(cur);
            cur = next;
        }
        (inputs, cur)
    }

    /// Backward from `dlogits`, accumulating weight/bias grads into `grads`.
    /// Returns the gradient w.r.t. the network input.
    pub(crate) fn backward(
        &self,
        inputs: &[Vec<f64>],
        dlogits: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let mut up = dlogits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            up = layer_backward(layer, &inputs[i], &up, &mut grads.layers[i]);
        }
        up
    }
}

/// Per-layer parameter gradients; empty vectors for unweighted layers.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Gradients {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dw: vec![0.0; l.weights.len()],
                    db: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.dw.iter_mut().zip(&b.dw) {
                *x += y;
            }
            for (x, y) in a.db.iter_mut().zip(&b.db) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in &mut self.layers {
            for x in &mut g.dw {
                *x *= f;
            }
            for x in &mut g.db {
                *x *= f;
            }
        }
    }
}

fn layer_forward(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let s = &layer.spec;
    match s.kind {
        LayerKind::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        LayerKind::Flatten => x.to_vec(),
        LayerKind::MaxPool => {
            let (c, h, w) = (s.c, s.input_h, s.input_w);
            let (oh, ow) = (s.out_h(), s.out_w());
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..s.k {
                            let row = (oy * s.stride + ky) * w + ox * s.stride;
                            for kx in 0..s.k {
                                let v = plane[row + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(ci * oh + oy) * ow + ox] = best;
                    }
                }
            }
            out
        }
        LayerKind::Dense => {
            let mut out = vec![0.0; s.n];
            for o in 0..s.n {
                let mut acc = layer.biases[o] as f64;
                let row = &layer.weights[o * s.c..(o + 1) * s.c];
                for (wi, xi) in row.iter().zip(x) {
                    acc += *wi as f64 * xi;
                }
                out[o] = acc;
            }
            out
        }
        LayerKind::Conv2d => {
            let (n, c, k, h, w) = (s.n, s.c, s.k, s.input_h, s.input_w);
            let (oh, ow) = (s.out_h(), s.out_w());
            let mut out = vec![0.0; n * oh * ow];
            for co in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = layer.biases[co] as f64;
                        for ci in 0..c {
                            let wbase = ((co * c + ci) * k) * k;
                            let ibase = ci * h * w;
                            for ky in 0..k {
                                let irow = ibase + (oy * s.stride + ky) * w + ox * s.stride;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    acc += layer.weights[wrow + kx] as f64 * x[irow + kx];
                                }
                            }
                        }
                        out[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            out
        }
    }
}

fn layer_backward(layer: &Layer, x: &[f64], dy: &[f64], grad: &mut LayerGrad) -> Vec<f64> {
    let s = &layer.spec;
    match s.kind {
        LayerKind::Relu => x
            .iter()
            .zip(dy)
            .map(|(&xi, &d)| if xi > 0.0 { d } else { 0.0 })
            .collect(),
        LayerKind::Flatten => dy.to_vec(),
        LayerKind::MaxPool => {
            let (c, h, w) = (s.c, s.input_h, s.input_w);
            let (oh, ow) = (s.out_h(), s.out_w());
            let mut dx = vec![0.0; x.len()];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        // first maximum in scan order wins, matching forward
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for ky in 0..s.k {
                            let row = (oy * s.stride + ky) * w + ox * s.stride;
                            for kx in 0..s.k {
                                let v = plane[row + kx];
                                if v > best {
                                    best = v;
                                    arg = row + kx;
                                }
                            }
                        }
                        dx[ci * h * w + arg] += dy[(ci * oh + oy) * ow + ox];
                    }
                }
            }
            dx
        }
        LayerKind::Dense => {
            let mut dx = vec![0.0; s.c];
            for o in 0..s.n {
                let d = dy[o];
                grad.db[o] += d;
                let row = o * s.c;
                for i in 0..s.c {
                    grad.dw[row + i] += d * x[i];
                    dx[i] += d * layer.weights[row + i] as f64;
                }
            }
            dx
        }
        LayerKind::Conv2d => {
            let (n, c, k, h, w) = (s.n, s.c, s.k, s.input_h, s.input_w);
            let (oh, ow) = (s.out_h(), s.out_w());
            let mut dx = vec![0.0; x.len()];
            for co in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = dy[(co * oh + oy) * ow + ox];
                        if d == 0.0 {
                            continue;
                        }
                        grad.db[co] += d;
                        for ci in 0..c {
                            let wbase = ((co * c + ci) * k) * k;
                            let ibase = ci * h * w;
                            for ky in 0..k {
                                let irow = ibase + (oy * s.stride + ky) * w + ox * s.stride;
                                let wrow = wbase + ky * k;
                                for kx in 0..k {
                                    grad.dw[wrow + kx] += d * x[irow + kx];
                                    dx[irow + kx] += d * layer.weights[wrow + kx] as f64;
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
    }
}
