//! Masked feed-forward networks with hand-written backpropagation.
//!
//! The layer set is fixed: 2-D convolution (stride 1, no padding), 2×2 max
//! pooling, fully connected, ReLU and flatten. Only convolution and fully
//! connected layers carry parameters; their weights are subject to a
//! [`SparseMask`], their biases are always dense.

use rand::Rng;
use serde::Serialize;

use crate::error::{FlashError, Result};
use crate::mask::SparseMask;
use crate::tensor::{axpy, dot, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    MaxPool2,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Layer::Linear {
            in_features,
            out_features,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Linear { .. })
    }
}

/// Spatial geometry of one weight layer, in the notation of the FLOPs model:
/// `C_i × H × W` input, `C_o × R × S` output, `h × w` kernel. Fully connected
/// layers are 1×1 convolutions on a 1×1 map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Validated layer stack with its per-sample activation shapes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    input: Vec<usize>,
    layers: Vec<Layer>,
    num_classes: usize,
    #[serde(skip)]
    shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    /// Checks that consecutive layers compose and that the network ends in a
    /// `num_classes`-wide vector. `input` is `[channels, height, width]`.
    pub fn new(input: &[usize], layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        if input.len() != 3 || input.iter().any(|&d| d == 0) {
            return Err(FlashError::Config(format!(
                "input shape must be [C, H, W] with positive dims, got {input:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        let mut cur = input.to_vec();
        shapes.push(cur.clone());
        for (i, layer) in layers.iter().enumerate() {
            let bad = |msg: String| FlashError::Config(format!("layer {i} ({layer:?}): {msg}"));
            cur = match *layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(format!("expects [{in_channels}, H, W], got {cur:?}")));
                    }
                    if kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                        return Err(bad("zero-sized kernel or channel count".into()));
                    }
                    if cur[1] < kernel_h || cur[2] < kernel_w {
                        return Err(bad(format!("kernel larger than input {cur:?}")));
                    }
                    vec![out_channels, cur[1] - kernel_h + 1, cur[2] - kernel_w + 1]
                }
                Layer::MaxPool2 => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(bad(format!("pooling needs [C, H>=2, W>=2], got {cur:?}")));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                Layer::Linear {
                    in_features,
                    out_features,
                } => {
                    if cur.len() != 1 || cur[0] != in_features {
                        return Err(bad(format!("expects [{in_features}], got {cur:?}")));
                    }
                    if out_features == 0 {
                        return Err(bad("zero output features".into()));
                    }
                    vec![out_features]
                }
                Layer::Relu => cur,
                Layer::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        if cur != [num_classes] {
            return Err(FlashError::Config(format!(
                "network output {cur:?} does not match {num_classes} classes"
            )));
        }
        if !layers.iter().any(Layer::has_weights) {
            return Err(FlashError::Config("network has no weight layers".into()));
        }
        Ok(Self {
            input: input.to_vec(),
            layers,
            num_classes,
            shapes,
        })
    }

    /// CNN for 28×28 MNIST digits: two 5×5 convolutions (10 and 20 filters)
    /// each followed by ReLU and 2×2 max pooling, then FC(320, 50) and
    /// FC(50, 10). The first FC width follows from the unpadded geometry.
    pub fn mnist_net() -> Self {
        Self::new(
            &[1, 28, 28],
            vec![
                Layer::conv(1, 10, 5),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::conv(10, 20, 5),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::linear(320, 50),
                Layer::Relu,
                Layer::linear(50, 10),
            ],
            10,
        )
        .expect("mnist net is well formed")
    }

    /// Fully connected network over `[1, 1, inputs]` samples with ReLU between
    /// layers. `widths` lists hidden widths followed by the class count.
    pub fn mlp(inputs: usize, widths: &[usize]) -> Result<Self> {
        let mut layers = vec![Layer::Flatten];
        let mut prev = inputs;
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(Layer::linear(prev, w));
            prev = w;
        }
        let classes = *widths
            .last()
            .ok_or_else(|| FlashError::Config("mlp needs at least one layer".into()))?;
        Self::new(&[1, 1, inputs], layers, classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample activation shape after layer `i` (index 0 is the input).
    pub fn activation_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn num_weight_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.has_weights()).count()
    }

    /// Weight tensor shapes: `[C_o, C_i, h, w]` for convolutions and
    /// `[out, in]` for fully connected layers.
    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => Some(vec![out_channels, in_channels, kernel_h, kernel_w]),
                Layer::Linear {
                    in_features,
                    out_features,
                } => Some(vec![out_features, in_features]),
                _ => None,
            })
            .collect()
    }

    pub fn bias_shapes(&self) -> Vec<Vec<usize>> {
        self.weight_shapes().iter().map(|s| vec![s[0]]).collect()
    }

    /// `k^l`, the dense parameter count of each weight tensor.
    pub fn weight_counts(&self) -> Vec<usize> {
        self.weight_shapes()
            .iter()
            .map(|s| s.iter().product())
            .collect()
    }

    /// `K`, the total number of maskable weights.
    pub fn total_weights(&self) -> usize {
        self.weight_counts().iter().sum()
    }

    pub fn total_params(&self) -> usize {
        self.total_weights() + self.bias_shapes().iter().map(|s| s[0]).sum::<usize>()
    }

    pub fn geometry(&self) -> Vec<LayerGeometry> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let inp = &self.shapes[i];
                let out = &self.shapes[i + 1];
                match *l {
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel_h,
                        kernel_w,
                    } => Some(LayerGeometry {
                        in_channels,
                        out_channels,
                        kernel_h,
                        kernel_w,
                        in_h: inp[1],
                        in_w: inp[2],
                        out_h: out[1],
                        out_w: out[2],
                    }),
                    Layer::Linear {
                        in_features,
                        out_features,
                    } => Some(LayerGeometry {
                        in_channels: in_features,
                        out_channels: out_features,
                        kernel_h: 1,
                        kernel_w: 1,
                        in_h: 1,
                        in_w: 1,
                        out_h: 1,
                        out_w: 1,
                    }),
                    _ => None,
                }
            })
            .collect()
    }

    fn fan_in(&self, weight_layer: usize) -> usize {
        let s = &self.weight_shapes()[weight_layer];
        s[1..].iter().product()
    }
}

/// Gradients of every weight and bias tensor, in weight-layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(spec: &ModelSpec) -> Self {
        Self {
            weights: spec.weight_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
            biases: spec.bias_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// Which weight-gradient entries the backward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightGrad {
    /// Every position, masked ones included (needed for regrowth).
    Dense,
    /// Live positions only; masked entries are left unspecified.
    LiveOnly,
}

/// Network parameters plus the mask that gates the weights.
///
/// Invariant: every masked weight is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModel<T> {
    spec: ModelSpec,
    pub(crate) weights: Vec<Tensor<T>>,
    pub(crate) biases: Vec<Tensor<T>>,
    pub(crate) mask: SparseMask,
}

enum Cache<T> {
    Conv { cols: Vec<T> },
    Pool { argmax: Vec<u32> },
    Relu { active: Vec<bool> },
    Linear { input: Vec<T> },
    Flatten,
}

impl<T: Scalar> MaskedModel<T> {
    /// Zero weights and biases under `mask`.
    pub fn zeros(spec: &ModelSpec, mask: SparseMask) -> Result<Self> {
        mask.check_shapes(&spec.weight_shapes())?;
        Ok(Self {
            weights: spec.weight_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
            biases: spec.bias_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
            spec: spec.clone(),
            mask,
        })
    }

    /// Kaiming-uniform weights over the live fan-in (bound
    /// `sqrt(6 / (fan_in · d_l))`, `d_l` the layer's mask density), zero
    /// biases, then masked. The uniform draws do not depend on the mask, so
    /// two masks with the same seed share the underlying values up to a
    /// per-layer scale.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, mask: SparseMask, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(spec, mask)?;
        let densities = model.mask.layer_densities();
        for (l, w) in model.weights.iter_mut().enumerate() {
            let fan_in = spec.fan_in(l) as f64;
            let live_fan_in = (fan_in * densities[l]).max(1.0);
            let bound = (6.0 / live_fan_in).sqrt();
            for v in w.data_mut() {
                *v = T::from_f64(rng.random_range(-1.0..1.0) * bound);
            }
        }
        model.apply_mask();
        Ok(model)
    }

    /// Builds a model from explicit tensors, zeroing anything the mask hides.
    pub fn from_parts(
        spec: &ModelSpec,
        weights: Vec<Tensor<T>>,
        biases: Vec<Tensor<T>>,
        mask: SparseMask,
    ) -> Result<Self> {
        mask.check_shapes(&spec.weight_shapes())?;
        let ws = spec.weight_shapes();
        let bs = spec.bias_shapes();
        if weights.len() != ws.len()
            || biases.len() != bs.len()
            || weights.iter().zip(&ws).any(|(t, s)| t.shape() != s.as_slice())
            || biases.iter().zip(&bs).any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(FlashError::Shape(
                "parameter tensors do not match the model spec".into(),
            ));
        }
        let mut model = Self {
            spec: spec.clone(),
            weights,
            biases,
            mask,
        };
        model.apply_mask();
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor<T>] {
        &self.biases
    }

    pub fn mask(&self) -> &SparseMask {
        &self.mask
    }

    /// Mutable access for tools and tests; callers must restore the
    /// mask-zero invariant (e.g. via [`MaskedModel::apply_mask`]).
    pub fn weights_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.biases
    }

    /// Same parameters under a different mask: newly masked weights become
    /// zero, newly live weights keep their current (possibly zero) value.
    pub fn with_mask(&self, mask: SparseMask) -> Result<Self> {
        mask.check_shapes(&self.spec.weight_shapes())?;
        let mut out = self.clone();
        out.mask = mask;
        out.apply_mask();
        Ok(out)
    }

    /// Replaces the mask in place and zeroes every masked weight.
    pub fn set_mask(&mut self, mask: SparseMask) -> Result<()> {
        mask.check_shapes(&self.spec.weight_shapes())?;
        self.mask = mask;
        self.apply_mask();
        Ok(())
    }

    pub fn apply_mask(&mut self) {
        for (w, m) in self.weights.iter_mut().zip(self.mask.layers()) {
            for (v, &live) in w.data_mut().iter_mut().zip(m.bits()) {
                if !live {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> MaskedModel<U> {
        MaskedModel {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
            mask: self.mask.clone(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.spec.input[..] || shape[0] == 0 {
            return Err(FlashError::Config(format!(
                "batch shape {shape:?} does not match model input [B, {:?}]",
                self.spec.input
            )));
        }
        Ok(shape[0])
    }

    /// Logits of shape `(batch, num_classes)`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        let (logits, _) = self.run_forward(batch.data(), b, false)?;
        Tensor::from_vec(&[b, self.spec.num_classes], logits)
    }

    /// Mean softmax cross-entropy and gradients of every weight (masked
    /// positions included) and bias.
    pub fn loss_and_backward(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(T, Grads<T>)> {
        self.loss_and_backward_with(batch, labels, WeightGrad::Dense)
    }

    pub fn loss_and_backward_with(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: WeightGrad,
    ) -> Result<(T, Grads<T>)> {
        let b = self.check_batch(batch)?;
        if labels.len() != b {
            return Err(FlashError::Shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        let k = self.spec.num_classes;
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(FlashError::Config(format!(
                "label {bad} outside [0, {k})"
            )));
        }
        let (logits, caches) = self.run_forward(batch.data(), b, true)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, k);
        if !loss.is_finite() {
            return Err(FlashError::Numerical {
                layer: self.spec.layers.len(),
                detail: "non-finite loss".into(),
            });
        }
        let grads = self.run_backward(dlogits, caches, b, mode);
        Ok((loss, grads))
    }

    /// Plain SGD on live weights and all biases; masked weights stay zero.
    pub fn sgd_step(&mut self, grads: &Grads<T>, lr: T) {
        for ((w, g), m) in self.weights.iter_mut().zip(&grads.weights).zip(self.mask.layers()) {
            for ((v, &gv), &live) in w.data_mut().iter_mut().zip(g.data()).zip(m.bits()) {
                if live {
                    *v -= lr * gv;
                } else {
                    *v = T::zero();
                }
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (v, &gv) in b.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * gv;
            }
        }
    }

    fn run_forward(&self, input: &[T], b: usize, keep: bool) -> Result<(Vec<T>, Vec<Cache<T>>)> {
        let mut act = input.to_vec();
        let mut caches = Vec::with_capacity(if keep { self.spec.layers.len() } else { 0 });
        let mut wl = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &self.spec.shapes[i];
            let out_shape = &self.spec.shapes[i + 1];
            let (next, cache) = match *layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    let geo = ConvGeo {
                        c: in_channels,
                        h: in_shape[1],
                        w: in_shape[2],
                        kh: kernel_h,
                        kw: kernel_w,
                        oh: out_shape[1],
                        ow: out_shape[2],
                        co: out_channels,
                    };
                    let (out, cols) =
                        conv_forward(&act, b, &geo, self.weights[wl].data(), self.biases[wl].data());
                    wl += 1;
                    (out, Cache::Conv { cols })
                }
                Layer::Linear {
                    in_features,
                    out_features,
                } => {
                    let out = linear_forward(
                        &act,
                        b,
                        in_features,
                        out_features,
                        self.weights[wl].data(),
                        self.biases[wl].data(),
                    );
                    wl += 1;
                    (out, Cache::Linear { input: act })
                }
                Layer::MaxPool2 => {
                    let (out, argmax) = maxpool_forward(&act, b, in_shape);
                    (out, Cache::Pool { argmax })
                }
                Layer::Relu => {
                    let mut out = act;
                    let active: Vec<bool> = out
                        .iter_mut()
                        .map(|v| {
                            if *v > T::zero() {
                                true
                            } else {
                                *v = T::zero();
                                false
                            }
                        })
                        .collect();
                    (out, Cache::Relu { active })
                }
                Layer::Flatten => (act, Cache::Flatten),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(FlashError::Numerical {
                    layer: i,
                    detail: format!("non-finite activation after {layer:?}"),
                });
            }
            if keep {
                caches.push(cache);
            }
            act = next;
        }
        Ok((act, caches))
    }

    fn run_backward(&self, dlogits: Vec<T>, mut caches: Vec<Cache<T>>, b: usize, mode: WeightGrad) -> Grads<T> {
        let mut grads = Grads::zeros_like(&self.spec);
        let mut delta = dlogits;
        let mut wl = self.weights.len();
        let first_weight = self.spec.layers.iter().position(Layer::has_weights).unwrap_or(0);
        for i in (0..self.spec.layers.len()).rev() {
            let cache = caches.pop().expect("one cache per layer");
            let in_shape = &self.spec.shapes[i];
            let out_shape = &self.spec.shapes[i + 1];
            // no input gradient is needed below the first weight layer
            let need_dx = i > first_weight;
            delta = match (&self.spec.layers[i], cache) {
                (
                    &Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel_h,
                        kernel_w,
                    },
                    Cache::Conv { cols },
                ) => {
                    wl -= 1;
                    let geo = ConvGeo {
                        c: in_channels,
                        h: in_shape[1],
                        w: in_shape[2],
                        kh: kernel_h,
                        kw: kernel_w,
                        oh: out_shape[1],
                        ow: out_shape[2],
                        co: out_channels,
                    };
                    let live = match mode {
                        WeightGrad::Dense => None,
                        WeightGrad::LiveOnly => Some(self.mask.layers()[wl].bits()),
                    };
                    let (dw, db) = (&mut grads.weights[wl], &mut grads.biases[wl]);
                    conv_backward(
                        &delta,
                        &cols,
                        b,
                        &geo,
                        self.weights[wl].data(),
                        live,
                        dw.data_mut(),
                        db.data_mut(),
                        need_dx,
                    )
                }
                (
                    &Layer::Linear {
                        in_features,
                        out_features,
                    },
                    Cache::Linear { input },
                ) => {
                    wl -= 1;
                    let (dw, db) = (&mut grads.weights[wl], &mut grads.biases[wl]);
                    linear_backward(
                        &delta,
                        &input,
                        b,
                        in_features,
                        out_features,
                        self.weights[wl].data(),
                        dw.data_mut(),
                        db.data_mut(),
                        need_dx,
                    )
                }
                (Layer::MaxPool2, Cache::Pool { argmax }) => {
                    let in_len: usize = in_shape.iter().product();
                    let out_len: usize = out_shape.iter().product();
                    let mut dx = vec![T::zero(); b * in_len];
                    for s in 0..b {
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        for j in 0..out_len {
                            dxs[argmax[s * out_len + j] as usize] += delta[s * out_len + j];
                        }
                    }
                    dx
                }
                (Layer::Relu, Cache::Relu { active }) => {
                    let mut dx = delta;
                    for (v, &a) in dx.iter_mut().zip(&active) {
                        if !a {
                            *v = T::zero();
                        }
                    }
                    dx
                }
                (Layer::Flatten, Cache::Flatten) => delta,
                _ => unreachable!("cache kind follows layer kind"),
            };
        }
        grads
    }
}

struct ConvGeo {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    co: usize,
}

fn conv_forward<T: Scalar>(x: &[T], b: usize, g: &ConvGeo, weight: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let ck = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); b * ck * p];
    let mut out = vec![T::zero(); b * g.co * p];
    for s in 0..b {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cs = &mut cols[s * ck * p..(s + 1) * ck * p];
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let row = &mut cs[r * p..(r + 1) * p];
                    for oy in 0..g.oh {
                        let src = c * g.h * g.w + (oy + ki) * g.w + kj;
                        row[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&xs[src..src + g.ow]);
                    }
                }
            }
        }
        let os = &mut out[s * g.co * p..(s + 1) * g.co * p];
        for o in 0..g.co {
            let orow = &mut os[o * p..(o + 1) * p];
            orow.iter_mut().for_each(|v| *v = bias[o]);
            for r in 0..ck {
                let wv = weight[o * ck + r];
                if wv != T::zero() {
                    axpy(orow, wv, &cs[r * p..(r + 1) * p]);
                }
            }
        }
    }
    (out, cols)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    b: usize,
    g: &ConvGeo,
    weight: &[T],
    live: Option<&[bool]>,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let ck = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    let in_len = g.c * g.h * g.w;
    let mut dx = if need_dx { vec![T::zero(); b * in_len] } else { Vec::new() };
    let mut dcols = vec![T::zero(); if need_dx { ck * p } else { 0 }];
    for s in 0..b {
        let ds = &dout[s * g.co * p..(s + 1) * g.co * p];
        let cs = &cols[s * ck * p..(s + 1) * ck * p];
        for o in 0..g.co {
            let drow = &ds[o * p..(o + 1) * p];
            db[o] += drow.iter().copied().sum::<T>();
            for r in 0..ck {
                if live.is_none_or(|m| m[o * ck + r]) {
                    dw[o * ck + r] += dot(drow, &cs[r * p..(r + 1) * p]);
                }
            }
        }
        if need_dx {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            for o in 0..g.co {
                let drow = &ds[o * p..(o + 1) * p];
                for r in 0..ck {
                    let wv = weight[o * ck + r];
                    if wv != T::zero() {
                        axpy(&mut dcols[r * p..(r + 1) * p], wv, drow);
                    }
                }
            }
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            for c in 0..g.c {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let r = (c * g.kh + ki) * g.kw + kj;
                        let row = &dcols[r * p..(r + 1) * p];
                        for oy in 0..g.oh {
                            let dst = c * g.h * g.w + (oy + ki) * g.w + kj;
                            for (d, &v) in dxs[dst..dst + g.ow].iter_mut().zip(&row[oy * g.ow..(oy + 1) * g.ow]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn linear_forward<T: Scalar>(x: &[T], b: usize, inf: usize, outf: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); b * outf];
    for s in 0..b {
        let xs = &x[s * inf..(s + 1) * inf];
        for o in 0..outf {
            out[s * outf + o] = bias[o] + dot(&weight[o * inf..(o + 1) * inf], xs);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    b: usize,
    inf: usize,
    outf: usize,
    weight: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let mut dx = if need_dx { vec![T::zero(); b * inf] } else { Vec::new() };
    for s in 0..b {
        let xs = &x[s * inf..(s + 1) * inf];
        for o in 0..outf {
            let d = dout[s * outf + o];
            db[o] += d;
            if d == T::zero() {
                continue;
            }
            axpy(&mut dw[o * inf..(o + 1) * inf], d, xs);
            if need_dx {
                axpy(&mut dx[s * inf..(s + 1) * inf], d, &weight[o * inf..(o + 1) * inf]);
            }
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(x: &[T], b: usize, in_shape: &[usize]) -> (Vec<T>, Vec<u32>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let in_len = c * h * w;
    let out_len = c * oh * ow;
    let mut out = vec![T::zero(); b * out_len];
    let mut argmax = vec![0u32; b * out_len];
    for s in 0..b {
        let xs = &x[s * in_len..(s + 1) * in_len];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let j = s * out_len + (ch * oh + oy) * ow + ox;
                    out[j] = xs[best];
                    argmax[j] = best as u32;
                }
            }
        }
    }
    (out, argmax)
}

/// Mean cross-entropy of `logits` (row-major `b × k`) and its gradient.
fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], k: usize) -> (T, Vec<T>) {
    let b = labels.len();
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (s, &y) in labels.iter().enumerate() {
        let z = &logits[s * k..(s + 1) * k];
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - z[y];
        let g = &mut grad[s * k..(s + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            *gv = (p - if j == y { T::one() } else { T::zero() }) * inv_b;
        }
    }
    (total * inv_b, grad)
}

/// Exponentially decayed learning rate: `eta_init · (eta_end/eta_init)^(t/T)`.
pub fn lr_at_round(t: usize, total: usize, eta_init: f64, eta_end: f64) -> f64 {
    if total == 0 {
        return eta_init;
    }
    eta_init * (eta_end / eta_init).powf(t as f64 / total as f64)
}
