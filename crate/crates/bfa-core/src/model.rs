//! Layer stack with shadow full-precision weights, per-layer int8 views,
//! and reverse-mode differentiation.
//!
//! Every forward pass runs on the *dequantized quantized* weights (`w_eff`),
//! never on the shadow weights directly; gradients are therefore taken with
//! respect to the values actually stored in memory, which is what both
//! quantization-aware training (straight-through to the shadow weights) and
//! the bit-flip attack need. Biases stay full precision and are neither
//! quantized nor attackable.
//!
//! Convolution is valid-padding, stride 1. Conv activations are laid out
//! channel-last, `(row, col, filter)`, so the flatten that follows is a
//! pure reshape.

use crate::error::{Error, Result};
use crate::loss;
use crate::quant::{self, QuantizedTensor};
use crate::rng::CounterRng;
use crate::tensor::{matmul, matmul_acc, transpose, Tensor};

/// Architecture description, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { fan_in: usize, fan_out: usize },
    Conv2d { in_channels: usize, filters: usize, kernel: usize, in_h: usize, in_w: usize },
    Relu,
    Flatten,
    Dropout { rate: f64 },
}

/// Shadow weights plus the quantized view the network actually runs on.
#[derive(Debug, Clone)]
pub struct WeightedParams {
    /// Full-precision weights updated by SGD.
    pub shadow: Tensor,
    /// Full-precision bias (never quantized, never attacked).
    pub bias: Tensor,
    /// Int8 codes + scale; the object bits are flipped in.
    pub quant: QuantizedTensor,
    /// Dequantized view of `quant`, kept coherent at all times.
    w_eff: Tensor,
    /// max|shadow| captured at the last requantization; the straight-through
    /// estimator passes gradients only inside [-clamp_bound, clamp_bound].
    clamp_bound: f64,
}

impl WeightedParams {
    fn new(weight_shape: &[usize], bias_len: usize) -> WeightedParams {
        let shadow = Tensor::zeros(weight_shape);
        let quant = quant::quantize_layer(&shadow);
        let w_eff = quant::dequantize(&quant);
        WeightedParams {
            shadow,
            bias: Tensor::zeros(&[bias_len]),
            quant,
            w_eff,
            clamp_bound: 0.0,
        }
    }

    /// The dequantized weights used by forward passes.
    pub fn effective(&self) -> &Tensor {
        &self.w_eff
    }

    pub fn clamp_bound(&self) -> f64 {
        self.clamp_bound
    }

    /// Requantizes from the shadow weights (scale recomputed) and refreshes
    /// the effective view in place.
    pub fn refresh_from_shadow(&mut self) {
        let max_abs = self.shadow.max_abs();
        let n = self.shadow.len();
        self.clamp_bound = max_abs;
        if max_abs == 0.0 {
            self.quant.scale = 0.0;
            self.quant.codes[..n].fill(0);
            self.w_eff.values_mut()[..n].fill(0.0);
            return;
        }
        let scale = max_abs / 127.0;
        self.quant.scale = scale;
        let shadow = self.shadow.values();
        let eff = self.w_eff.values_mut();
        for i in 0..n {
            let code = (shadow[i].clamp(-max_abs, max_abs) / scale).round() as i8;
            self.quant.codes[i] = code;
            eff[i] = scale * code as f64;
        }
    }

    /// Toggles one stored bit and patches the effective view.
    pub fn flip_bit(&mut self, index: usize, bit: u8) -> Result<()> {
        quant::flip_bit(&mut self.quant, index, bit)?;
        self.w_eff.values_mut()[index] = quant::dequantize_code(self.quant.scale, self.quant.codes[index]);
        Ok(())
    }

    /// Restores persisted state: shadow, bias, and the quantized view as
    /// stored (which, after an on-disk attack, may differ from
    /// quantize(shadow)). The effective view is rebuilt from the codes.
    pub(crate) fn restore(&mut self, shadow: Tensor, bias: Tensor, scale: f64, codes: Vec<i8>) {
        debug_assert_eq!(shadow.len(), codes.len());
        self.clamp_bound = shadow.max_abs();
        self.quant = QuantizedTensor {
            codes,
            scale,
            shape: shadow.shape().to_vec(),
        };
        self.w_eff = quant::dequantize(&self.quant);
        self.shadow = shadow;
        self.bias = bias;
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        fan_in: usize,
        fan_out: usize,
        params: WeightedParams,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        params: WeightedParams,
    },
    Relu,
    Flatten,
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn params(&self) -> Option<&WeightedParams> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv2d { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut WeightedParams> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv2d { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { fan_in, fan_out, .. } => LayerSpec::Dense { fan_in: *fan_in, fan_out: *fan_out },
            Layer::Conv2d { in_channels, filters, kernel, in_h, in_w, .. } => LayerSpec::Conv2d {
                in_channels: *in_channels,
                filters: *filters,
                kernel: *kernel,
                in_h: *in_h,
                in_w: *in_w,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
        }
    }
}

/// Training / attack provenance carried inside checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    /// Canonical key=value rendering of the training configuration.
    pub config: String,
    pub seed: u64,
    pub final_test_accuracy: Option<f64>,
    /// Free-form notes (padding convention, deviations, ...).
    pub notes: String,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch_id: String,
    pub layers: Vec<Layer>,
    pub provenance: Provenance,
    input_dim: usize,
    num_classes: usize,
}

/// Everything saved by a cached forward pass plus, after [`Model::backward`],
/// the per-layer weight gradients and upstream signals.
#[derive(Debug)]
pub struct BackwardState {
    n: usize,
    train_mode: bool,
    /// acts[i] = input of layer i; acts[layers.len()] = logits.
    acts: Vec<Tensor>,
    /// Extra per-layer buffers (dropout masks, conv im2col panels).
    saved: Vec<Saved>,
    /// Filled by backward: gradient w.r.t. each weighted layer's effective
    /// weights and bias, indexed by layer position.
    pub weight_grads: Vec<Option<WeightGrad>>,
    /// Filled by backward: gradient w.r.t. each layer's output.
    pub rho: Vec<Option<Tensor>>,
    done: bool,
}

#[derive(Debug)]
pub struct WeightGrad {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug)]
enum Saved {
    None,
    DropoutMask(Tensor),
    ConvCols(Vec<f64>),
}

impl BackwardState {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().expect("nonempty")
    }

    pub fn batch_len(&self) -> usize {
        self.n
    }

    /// Whether the pass ran with live dropout.
    pub fn train_mode(&self) -> bool {
        self.train_mode
    }
}

enum ShapeCtx {
    Flat(usize),
    Spatial { c: usize, h: usize, w: usize },
}

impl Model {
    /// Assembles a model from layer specs, checking adjacent compatibility.
    pub fn from_specs(arch_id: &str, specs: &[LayerSpec]) -> Result<Model> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("empty layer list".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut ctx = match &specs[0] {
            LayerSpec::Dense { fan_in, .. } => ShapeCtx::Flat(*fan_in),
            LayerSpec::Conv2d { in_channels, in_h, in_w, .. } => ShapeCtx::Spatial {
                c: *in_channels,
                h: *in_h,
                w: *in_w,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "first layer must be dense or conv2d, got {other:?}"
                )))
            }
        };
        let input_dim = match ctx {
            ShapeCtx::Flat(d) => d,
            ShapeCtx::Spatial { c, h, w } => c * h * w,
        };
        for spec in specs {
            match spec {
                LayerSpec::Dense { fan_in, fan_out } => {
                    match ctx {
                        ShapeCtx::Flat(d) if d == *fan_in => {}
                        ShapeCtx::Flat(d) => {
                            return Err(Error::ShapeMismatch(format!(
                                "dense fan_in {fan_in} after width {d}"
                            )))
                        }
                        ShapeCtx::Spatial { .. } => {
                            return Err(Error::ShapeMismatch("dense after spatial output needs a flatten".into()))
                        }
                    }
                    layers.push(Layer::Dense {
                        fan_in: *fan_in,
                        fan_out: *fan_out,
                        params: WeightedParams::new(&[*fan_in, *fan_out], *fan_out),
                    });
                    ctx = ShapeCtx::Flat(*fan_out);
                }
                LayerSpec::Conv2d { in_channels, filters, kernel, in_h, in_w } => {
                    match ctx {
                        ShapeCtx::Spatial { c, h, w } if c == *in_channels && h == *in_h && w == *in_w => {}
                        _ => {
                            if !layers.is_empty() {
                                return Err(Error::ShapeMismatch("conv2d input shape mismatch".into()));
                            }
                        }
                    }
                    if *kernel > *in_h || *kernel > *in_w {
                        return Err(Error::ShapeMismatch("kernel larger than input".into()));
                    }
                    let (out_h, out_w) = (in_h - kernel + 1, in_w - kernel + 1);
                    layers.push(Layer::Conv2d {
                        in_channels: *in_channels,
                        filters: *filters,
                        kernel: *kernel,
                        in_h: *in_h,
                        in_w: *in_w,
                        out_h,
                        out_w,
                        params: WeightedParams::new(&[*filters, in_channels * kernel * kernel], *filters),
                    });
                    ctx = ShapeCtx::Spatial { c: *filters, h: out_h, w: out_w };
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => {
                    if let LayerSpec::Dropout { rate } = spec {
                        if !(0.0..1.0).contains(rate) {
                            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
                        }
                        layers.push(Layer::Dropout { rate: *rate });
                    } else {
                        layers.push(Layer::Relu);
                    }
                }
                LayerSpec::Flatten => {
                    if let ShapeCtx::Spatial { c, h, w } = ctx {
                        ctx = ShapeCtx::Flat(c * h * w);
                    }
                    layers.push(Layer::Flatten);
                }
            }
        }
        let num_classes = match ctx {
            ShapeCtx::Flat(d) => d,
            // A spatial tail is stored flat anyway; its width is the class count.
            ShapeCtx::Spatial { c, h, w } => c * h * w,
        };
        Ok(Model {
            arch_id: arch_id.to_string(),
            layers,
            provenance: Provenance::default(),
            input_dim,
            num_classes,
        })
    }

    /// The four-dense-layer MNIST perceptron, 784-512-256-128-10.
    pub fn build_mlp() -> Model {
        Model::mlp_from_dims(&[784, 512, 256, 128, 10]).expect("fixed arch")
    }

    /// Dense stack with ReLU between layers (none after the last).
    pub fn mlp_from_dims(dims: &[usize]) -> Result<Model> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("mlp needs at least two dims".into()));
        }
        let mut specs = Vec::new();
        for i in 0..dims.len() - 1 {
            specs.push(LayerSpec::Dense { fan_in: dims[i], fan_out: dims[i + 1] });
            if i + 2 < dims.len() {
                specs.push(LayerSpec::Relu);
            }
        }
        let id = format!(
            "mlp-{}",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
        );
        Model::from_specs(&id, &specs)
    }

    /// The MLP with a leading 32-filter 3x3 valid-padding convolution.
    pub fn build_ccnn() -> Model {
        let mut specs = vec![
            LayerSpec::Conv2d { in_channels: 1, filters: 32, kernel: 3, in_h: 28, in_w: 28 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
        ];
        let dims = [32 * 26 * 26, 512, 256, 128, 10];
        for i in 0..dims.len() - 1 {
            specs.push(LayerSpec::Dense { fan_in: dims[i], fan_out: dims[i + 1] });
            if i + 2 < dims.len() {
                specs.push(LayerSpec::Relu);
            }
        }
        Model::from_specs("ccnn-32f3", &specs).expect("fixed arch")
    }

    /// Builds the architecture named by `id` ("mlp-<d0>-<d1>-..." or "ccnn-32f3").
    pub fn from_arch_id(id: &str) -> Result<Model> {
        if id == "ccnn-32f3" {
            return Ok(Model::build_ccnn());
        }
        if let Some(rest) = id.strip_prefix("mlp-") {
            let dims: Result<Vec<usize>> = rest
                .split('-')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad arch id {id}")))
                })
                .collect();
            return Model::mlp_from_dims(&dims?);
        }
        Err(Error::InvalidArgument(format!("unknown architecture id {id}")))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Total trainable parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|p| p.shadow.len() + p.bias.len())
            .sum()
    }

    /// Positions of the weighted layers, in network order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Report name of the `ordinal`-th weighted layer ("conv1", "dense2", ...).
    pub fn weighted_layer_name(&self, ordinal: usize) -> String {
        let (mut conv, mut dense) = (0usize, 0usize);
        for (i, pos) in self.weighted_layers().into_iter().enumerate() {
            match &self.layers[pos] {
                Layer::Conv2d { .. } => {
                    conv += 1;
                    if i == ordinal {
                        return format!("conv{conv}");
                    }
                }
                Layer::Dense { .. } => {
                    dense += 1;
                    if i == ordinal {
                        return format!("dense{dense}");
                    }
                }
                _ => unreachable!(),
            }
        }
        format!("layer{ordinal}")
    }

    /// Params of the `ordinal`-th weighted layer.
    pub fn weighted_params(&self, ordinal: usize) -> Option<&WeightedParams> {
        let pos = *self.weighted_layers().get(ordinal)?;
        self.layers[pos].params()
    }

    pub fn weighted_params_mut(&mut self, ordinal: usize) -> Option<&mut WeightedParams> {
        let pos = *self.weighted_layers().get(ordinal)?;
        self.layers[pos].params_mut()
    }

    /// Sets the `ordinal`-th weighted layer's shadow weights and bias, then
    /// requantizes (the effective view stays the dequantized codes).
    pub fn set_params(&mut self, ordinal: usize, w: &[f64], b: &[f64]) -> Result<()> {
        let p = self
            .weighted_params_mut(ordinal)
            .ok_or_else(|| Error::InvalidArgument(format!("no weighted layer {ordinal}")))?;
        if w.len() != p.shadow.len() || b.len() != p.bias.len() {
            return Err(Error::ShapeMismatch("weight/bias length".into()));
        }
        p.shadow.values_mut().copy_from_slice(w);
        p.bias.values_mut().copy_from_slice(b);
        p.refresh_from_shadow();
        Ok(())
    }

    /// Like [`Model::set_params`] but makes the effective weights exactly `w`
    /// instead of their quantized values, so forward/backward run at full
    /// precision. Meant for gradient checks and float-exact diagnostics; the
    /// quantized view is left out of sync on purpose.
    pub fn set_params_full_precision(&mut self, ordinal: usize, w: &[f64], b: &[f64]) -> Result<()> {
        self.set_params(ordinal, w, b)?;
        let p = self.weighted_params_mut(ordinal).expect("checked");
        p.w_eff.values_mut().copy_from_slice(w);
        Ok(())
    }

    /// Requantizes every weighted layer from its shadow weights.
    pub fn refresh_quantized(&mut self) {
        for layer in &mut self.layers {
            if let Some(p) = layer.params_mut() {
                p.refresh_from_shadow();
            }
        }
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input shape {shape:?}, expected (N, {})",
                self.input_dim
            )));
        }
        if shape[0] == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(shape[0])
    }

    /// Inference forward pass; dropout is the identity.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let n = self.check_input(inputs)?;
        let mut x = inputs.clone();
        for layer in &self.layers {
            x = layer_forward(layer, &x, n, None)?.0;
        }
        Ok(x)
    }

    /// Forward pass that records everything backprop needs. `rng` enables
    /// training mode (live dropout); pass `None` for eval-mode caching.
    pub fn forward_cached(&self, inputs: &Tensor, rng: Option<&mut CounterRng>) -> Result<(Tensor, BackwardState)> {
        let n = self.check_input(inputs)?;
        let train_mode = rng.is_some();
        let mut rng = rng;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut saved = Vec::with_capacity(self.layers.len());
        acts.push(inputs.clone());
        for layer in &self.layers {
            let (out, extra) = layer_forward(layer, acts.last().unwrap(), n, rng.as_deref_mut())?;
            acts.push(out);
            saved.push(extra);
        }
        let logits = acts.last().unwrap().clone();
        let state = BackwardState {
            n,
            train_mode,
            acts,
            saved,
            weight_grads: (0..self.layers.len()).map(|_| None).collect(),
            rho: (0..self.layers.len()).map(|_| None).collect(),
            done: false,
        };
        Ok((logits, state))
    }

    /// Reverse pass: fills `state.weight_grads` and `state.rho`, returns the
    /// batch loss. Gradients are w.r.t. the effective (dequantized) weights.
    pub fn backward(&self, state: &mut BackwardState, labels: &[u8]) -> Result<f64> {
        if state.done {
            return Err(Error::InvalidArgument("backward already ran on this state".into()));
        }
        if labels.len() != state.n {
            return Err(Error::ShapeMismatch(format!(
                "{} cached rows vs {} labels",
                state.n,
                labels.len()
            )));
        }
        let (loss, dlogits) = loss::cross_entropy_grad(state.logits(), labels)?;
        let mut delta = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            // delta currently holds dL/d(output of layer i).
            let (dx, wg) = layer_backward(layer, &state.acts[i], &state.saved[i], &delta, state.n, i > 0)?;
            state.rho[i] = Some(delta);
            state.weight_grads[i] = wg;
            match dx {
                Some(d) => delta = d,
                None => break,
            }
        }
        state.done = true;
        Ok(loss)
    }

    /// Gradient of the attack loss for the `ordinal`-th weighted layer.
    pub fn weighted_grad<'s>(&self, state: &'s BackwardState, ordinal: usize) -> Option<&'s WeightGrad> {
        let pos = *self.weighted_layers().get(ordinal)?;
        state.weight_grads[pos].as_ref()
    }

    /// Classification accuracy over a dataset, evaluated in chunks.
    pub fn evaluate_accuracy(&self, inputs: &Tensor, labels: &[u8]) -> Result<f64> {
        let shape = inputs.shape();
        let n = shape[0];
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} inputs vs {} labels", labels.len())));
        }
        const CHUNK: usize = 512;
        let dim = shape[1];
        let mut hits = 0usize;
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let chunk = Tensor::from_values(
                &[len, dim],
                inputs.values()[start * dim..(start + len) * dim].to_vec(),
            )?;
            let logits = self.forward(&chunk)?;
            hits += loss::count_correct(&logits, &labels[start..start + len])?;
            start += len;
        }
        Ok(hits as f64 / n as f64)
    }

    /// Mean loss over a batch without caching.
    pub fn evaluate_loss(&self, inputs: &Tensor, labels: &[u8]) -> Result<f64> {
        let logits = self.forward(inputs)?;
        loss::cross_entropy(&logits, labels)
    }
}

fn layer_forward(
    layer: &Layer,
    x: &Tensor,
    n: usize,
    rng: Option<&mut CounterRng>,
) -> Result<(Tensor, Saved)> {
    match layer {
        Layer::Dense { fan_in, fan_out, params } => {
            let width = x.len() / n;
            if width != *fan_in {
                return Err(Error::ShapeMismatch(format!("dense expects width {fan_in}, got {width}")));
            }
            let mut out = vec![0.0; n * fan_out];
            matmul_acc(&mut out, x.values(), params.w_eff.values(), n, *fan_in, *fan_out);
            let bias = params.bias.values();
            for row in out.chunks_mut(*fan_out) {
                for (o, b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
            Ok((Tensor::from_values(&[n, *fan_out], out)?, Saved::None))
        }
        Layer::Conv2d { in_channels, filters, kernel, in_h, in_w, out_h, out_w, params } => {
            let width = x.len() / n;
            if width != in_channels * in_h * in_w {
                return Err(Error::ShapeMismatch(format!(
                    "conv expects width {}, got {width}",
                    in_channels * in_h * in_w
                )));
            }
            let (c, k) = (*in_channels, *kernel);
            let patch = c * k * k;
            let rows = n * out_h * out_w;
            let cols = im2col(x.values(), n, c, *in_h, *in_w, k, *out_h, *out_w);
            // filters are stored (F, patch); transpose once so the GEMM runs
            // (rows x patch) . (patch x F).
            let wt = transpose(params.w_eff.values(), *filters, patch);
            let mut out = vec![0.0; rows * filters];
            matmul_acc(&mut out, &cols, &wt, rows, patch, *filters);
            let bias = params.bias.values();
            for row in out.chunks_mut(*filters) {
                for (o, b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
            // Channel-last layout: the (rows x F) result is already the
            // (N, out_h * out_w * F) activation.
            Ok((Tensor::from_values(&[n, out_h * out_w * filters], out)?, Saved::ConvCols(cols)))
        }
        Layer::Relu => {
            let out = x.values().iter().map(|&v| v.max(0.0)).collect();
            Ok((Tensor::from_values(x.shape(), out)?, Saved::None))
        }
        Layer::Flatten => Ok((x.clone(), Saved::None)),
        Layer::Dropout { rate } => match rng {
            None => Ok((x.clone(), Saved::None)),
            Some(rng) => {
                let keep_scale = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = x
                    .values()
                    .iter()
                    .map(|_| if rng.uniform() < *rate { 0.0 } else { keep_scale })
                    .collect();
                let out = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
                Ok((
                    Tensor::from_values(x.shape(), out)?,
                    Saved::DropoutMask(Tensor::from_values(x.shape(), mask)?),
                ))
            }
        },
    }
}

/// Returns (dL/d input if requested, weight gradients if weighted).
fn layer_backward(
    layer: &Layer,
    x: &Tensor,
    saved: &Saved,
    delta: &Tensor,
    n: usize,
    want_dx: bool,
) -> Result<(Option<Tensor>, Option<WeightGrad>)> {
    match layer {
        Layer::Dense { fan_in, fan_out, params } => {
            let xt = transpose(x.values(), n, *fan_in);
            let dw = matmul(&xt, delta.values(), *fan_in, n, *fan_out);
            let mut db = vec![0.0; *fan_out];
            for row in delta.values().chunks(*fan_out) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            let dx = if want_dx {
                // dx = delta . W^T, computed as (W . delta^T)^T so the big
                // weight matrix streams through memory once.
                let dt = transpose(delta.values(), n, *fan_out);
                let dxt = matmul(params.w_eff.values(), &dt, *fan_in, *fan_out, n);
                Some(Tensor::from_values(&[n, *fan_in], transpose(&dxt, *fan_in, n))?)
            } else {
                None
            };
            Ok((
                dx,
                Some(WeightGrad {
                    w: Tensor::from_values(&[*fan_in, *fan_out], dw)?,
                    b: Tensor::from_values(&[*fan_out], db)?,
                }),
            ))
        }
        Layer::Conv2d { in_channels, filters, kernel, in_h, in_w, out_h, out_w, params } => {
            let Saved::ConvCols(cols) = saved else {
                return Err(Error::InvalidArgument("missing conv cache".into()));
            };
            let (c, k) = (*in_channels, *kernel);
            let patch = c * k * k;
            let rows = n * out_h * out_w;
            // dW^T = cols^T . delta, then transpose to the (F, patch) layout.
            let colst = transpose(cols, rows, patch);
            let dwt = matmul(&colst, delta.values(), patch, rows, *filters);
            let dw = transpose(&dwt, patch, *filters);
            let mut db = vec![0.0; *filters];
            for row in delta.values().chunks(*filters) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            let dx = if want_dx {
                let dcols = matmul(delta.values(), params.w_eff.values(), rows, *filters, patch);
                Some(Tensor::from_values(
                    &[n, c * in_h * in_w],
                    col2im(&dcols, n, c, *in_h, *in_w, k, *out_h, *out_w),
                )?)
            } else {
                None
            };
            Ok((
                dx,
                Some(WeightGrad {
                    w: Tensor::from_values(&[*filters, patch], dw)?,
                    b: Tensor::from_values(&[*filters], db)?,
                }),
            ))
        }
        Layer::Relu => {
            let dx = if want_dx {
                let d = x
                    .values()
                    .iter()
                    .zip(delta.values())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Some(Tensor::from_values(x.shape(), d)?)
            } else {
                None
            };
            Ok((dx, None))
        }
        Layer::Flatten => Ok((want_dx.then(|| delta.clone()), None)),
        Layer::Dropout { .. } => {
            let dx = if want_dx {
                match saved {
                    Saved::DropoutMask(mask) => {
                        let d = delta
                            .values()
                            .iter()
                            .zip(mask.values())
                            .map(|(&g, &m)| g * m)
                            .collect();
                        Some(Tensor::from_values(delta.shape(), d)?)
                    }
                    // Eval mode: identity.
                    _ => Some(delta.clone()),
                }
            } else {
                None
            };
            Ok((dx, None))
        }
    }
}

/// Patch extraction for valid-padding stride-1 convolution. Row r encodes
/// (sample, out_row, out_col); column order is (channel, k_row, k_col).
fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize) -> Vec<f64> {
    let patch = c * k * k;
    let mut cols = vec![0.0; n * oh * ow * patch];
    let mut r = 0;
    for s in 0..n {
        let img = &x[s * c * h * w..(s + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[r * patch..(r + 1) * patch];
                let mut p = 0;
                for ch in 0..c {
                    for ky in 0..k {
                        let src = (ch * h + oy + ky) * w + ox;
                        dst[p..p + k].copy_from_slice(&img[src..src + k]);
                        p += k;
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
fn col2im(dcols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize) -> Vec<f64> {
    let patch = c * k * k;
    let mut dx = vec![0.0; n * c * h * w];
    let mut r = 0;
    for s in 0..n {
        let img = &mut dx[s * c * h * w..(s + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &dcols[r * patch..(r + 1) * patch];
                let mut p = 0;
                for ch in 0..c {
                    for ky in 0..k {
                        let dst = (ch * h + oy + ky) * w + ox;
                        for kx in 0..k {
                            img[dst + kx] += src[p + kx];
                        }
                        p += k;
                    }
                }
                r += 1;
            }
        }
    }
    dx
}
