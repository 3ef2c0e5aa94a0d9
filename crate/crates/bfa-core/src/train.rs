//! Quantization-aware SGD training.
//!
//! Every step requantizes each layer from its shadow weights (scale tracks
//! max|W_l|), runs forward/backward on the dequantized view, and applies the
//! gradient straight through to the shadow weights (identity inside the
//! clamp range, zero outside). Weight decay applies to weight tensors only;
//! biases stay full precision and undecayed.
//!
//! Epoch shuffling, weight init and dropout masks each draw from their own
//! counter-RNG stream (see [`crate::rng`]), so the data order is a pure
//! function of (seed, epoch) and whole runs replay bit-identically.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::rng::{stream, CounterRng, StreamPurpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheduler {
    None,
    /// lr(epoch) = lr0 * gamma^epoch.
    Exponential { gamma: f64 },
    /// lr divided by 10 at each listed epoch.
    Step { drops: [usize; 4], len: usize },
}

impl Scheduler {
    pub fn exponential(gamma: f64) -> Scheduler {
        Scheduler::Exponential { gamma }
    }

    pub fn step(drops: &[usize]) -> Result<Scheduler> {
        if drops.len() > 4 {
            return Err(Error::InvalidArgument("at most 4 step drops".into()));
        }
        let mut d = [usize::MAX; 4];
        d[..drops.len()].copy_from_slice(drops);
        Ok(Scheduler::Step { drops: d, len: drops.len() })
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheduler::None => write!(f, "none"),
            Scheduler::Exponential { gamma } => write!(f, "exponential:{gamma}"),
            Scheduler::Step { drops, len } => {
                let list: Vec<String> = drops[..*len].iter().map(|d| d.to_string()).collect();
                write!(f, "step:{}", list.join(","))
            }
        }
    }
}

impl FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scheduler> {
        if s == "none" {
            return Ok(Scheduler::None);
        }
        if let Some(g) = s.strip_prefix("exponential:") {
            let gamma: f64 = g
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad scheduler gamma {g:?}")))?;
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::InvalidArgument(format!("scheduler gamma {gamma} out of (0,1]")));
            }
            return Ok(Scheduler::exponential(gamma));
        }
        if let Some(list) = s.strip_prefix("step:") {
            let drops: std::result::Result<Vec<usize>, _> = list.split(',').map(|p| p.trim().parse()).collect();
            let drops = drops.map_err(|_| Error::InvalidArgument(format!("bad step drops {list:?}")))?;
            return Scheduler::step(&drops);
        }
        Err(Error::InvalidArgument(format!(
            "unknown scheduler {s:?} (expected none, exponential:<gamma> or step:<e1,e2,...>)"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// N(0, 0.1^2)
    Normal,
    /// U(-0.1, 0.1)
    Uniform,
    /// N(0, 2/(fan_in+fan_out))
    XavierNormal,
    /// U(+-sqrt(6/(fan_in+fan_out)))
    XavierUniform,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InitScheme::Normal => "normal",
            InitScheme::Uniform => "uniform",
            InitScheme::XavierNormal => "xavier-normal",
            InitScheme::XavierUniform => "xavier-uniform",
        };
        write!(f, "{s}")
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<InitScheme> {
        match s {
            "normal" => Ok(InitScheme::Normal),
            "uniform" => Ok(InitScheme::Uniform),
            "xavier-normal" => Ok(InitScheme::XavierNormal),
            "xavier-uniform" => Ok(InitScheme::XavierUniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown init scheme {other:?} (normal, uniform, xavier-normal, xavier-uniform)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub scheduler: Scheduler,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub init: InitScheme,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    /// The MNIST recipe: lr 0.01, exponential 0.95, 40 epochs, batch 128,
    /// weight decay 3e-4, normal init, no dropout.
    fn default() -> Self {
        TrainingConfig {
            lr: 0.01,
            scheduler: Scheduler::exponential(0.95),
            epochs: 40,
            batch_size: 128,
            weight_decay: 3e-4,
            init: InitScheme::Normal,
            dropout: 0.0,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Canonical key=value rendering, used for provenance and plan hashing.
    pub fn canonical_text(&self, arch_id: &str) -> String {
        format!(
            "arch = {arch_id}\nlr = {}\nscheduler = {}\nepochs = {}\nbatch_size = {}\nweight_decay = {}\ninit = {}\ndropout = {}\nseed = {}\n",
            self.lr, self.scheduler, self.epochs, self.batch_size, self.weight_decay, self.init, self.dropout, self.seed
        )
    }
}

/// Learning rate at the given epoch.
pub fn schedule(lr0: f64, scheduler: Scheduler, epoch: usize) -> f64 {
    match scheduler {
        Scheduler::None => lr0,
        Scheduler::Exponential { gamma } => lr0 * gamma.powi(epoch as i32),
        Scheduler::Step { drops, len } => {
            let passed = drops[..len].iter().filter(|&&d| epoch >= d).count();
            lr0 / 10f64.powi(passed as i32)
        }
    }
}

/// Draws the initial weight tensor for a weighted layer spec.
pub fn init_weights(spec: &LayerSpec, scheme: InitScheme, seed: u64) -> Result<Tensor> {
    let mut rng = CounterRng::new(seed, stream(StreamPurpose::Init, 0));
    match spec {
        LayerSpec::Dense { fan_in, fan_out } => Ok(draw(&mut rng, &[*fan_in, *fan_out], *fan_in, *fan_out, scheme)),
        LayerSpec::Conv2d { in_channels, filters, kernel, .. } => {
            let rf = kernel * kernel;
            Ok(draw(
                &mut rng,
                &[*filters, in_channels * rf],
                in_channels * rf,
                filters * rf,
                scheme,
            ))
        }
        other => Err(Error::InvalidArgument(format!("{other:?} has no weights"))),
    }
}

fn draw(rng: &mut CounterRng, shape: &[usize], fan_in: usize, fan_out: usize, scheme: InitScheme) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = match scheme {
        InitScheme::Normal => (0..n).map(|_| 0.1 * rng.normal()).collect(),
        InitScheme::Uniform => (0..n).map(|_| rng.uniform_in(-0.1, 0.1)).collect(),
        InitScheme::XavierNormal => {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| std * rng.normal()).collect()
        }
        InitScheme::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()
        }
    };
    Tensor::from_values(shape, values).expect("finite draws")
}

/// Initializes every weighted layer (stream per layer ordinal), zero biases,
/// and refreshes the quantized views.
pub fn init_model(model: &mut Model, scheme: InitScheme, seed: u64) {
    let positions = model.weighted_layers();
    for (ordinal, pos) in positions.into_iter().enumerate() {
        let spec = model.layers[pos].spec();
        let (shape, fan_in, fan_out) = match spec {
            LayerSpec::Dense { fan_in, fan_out } => (vec![fan_in, fan_out], fan_in, fan_out),
            LayerSpec::Conv2d { in_channels, filters, kernel, .. } => {
                let rf = kernel * kernel;
                (vec![filters, in_channels * rf], in_channels * rf, filters * rf)
            }
            _ => unreachable!(),
        };
        let mut rng = CounterRng::new(seed, stream(StreamPurpose::Init, ordinal as u64));
        let w = draw(&mut rng, &shape, fan_in, fan_out, scheme);
        let p = model.layers[pos].params_mut().expect("weighted");
        p.shadow = w;
        p.bias.values_mut().fill(0.0);
        p.refresh_from_shadow();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// One SGD step on one batch: requantize, forward on the dequantized
/// weights, backward, straight-through update of the shadow weights.
pub fn sgd_step(
    model: &mut Model,
    batch_inputs: &Tensor,
    batch_labels: &[u8],
    lr: f64,
    weight_decay: f64,
    dropout_rng: Option<&mut CounterRng>,
) -> Result<StepStats> {
    model.refresh_quantized();
    let (logits, mut state) = model.forward_cached(batch_inputs, dropout_rng)?;
    let loss = model.backward(&mut state, batch_labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let correct = crate::loss::count_correct(&logits, batch_labels)?;
    let positions = model.weighted_layers();
    for pos in positions {
        let grad = state.weight_grads[pos]
            .take()
            .ok_or_else(|| Error::InvalidArgument("missing gradient".into()))?;
        if !grad.w.is_finite() || !grad.b.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let p = model.layers[pos].params_mut().expect("weighted");
        let bound = p.clamp_bound();
        let shadow = p.shadow.values_mut();
        for (w, &g) in shadow.iter_mut().zip(grad.w.values()) {
            // Straight-through estimator: identity inside the clamp range,
            // zero outside. The bound is max|W| at quantization time, so the
            // mask only matters if the shadow drifted past it.
            if w.abs() <= bound {
                *w -= lr * (g + weight_decay * *w);
            }
        }
        for (b, &g) in p.bias.values_mut().iter_mut().zip(grad.b.values()) {
            *b -= lr * g;
        }
    }
    model.refresh_quantized();
    Ok(StepStats {
        loss,
        correct,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
}

/// Per-epoch training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_acc,lr\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", i, e.train_loss, e.train_acc, e.test_acc, e.lr));
        }
        out
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }
}

/// Trains `arch_id` on the dataset. `on_epoch` observes progress.
pub fn train_with_progress(
    arch_id: &str,
    dataset: &Dataset,
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(usize, &EpochStats),
) -> Result<(Model, TrainRecord)> {
    config.validate()?;
    let mut model = Model::from_arch_id(arch_id)?;
    if model.input_dim() != dataset.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "arch expects {} inputs, dataset provides {}",
            model.input_dim(),
            dataset.input_dim()
        )));
    }
    if model.num_classes() != dataset.classes {
        return Err(Error::ShapeMismatch(format!(
            "arch emits {} classes, dataset has {}",
            model.num_classes(),
            dataset.classes
        )));
    }
    apply_dropout_rate(&mut model, config.dropout);
    init_model(&mut model, config.init, config.seed);

    let n = dataset.train_len();
    let mut record = TrainRecord::default();
    let mut global_step: u64 = 0;
    for epoch in 0..config.epochs {
        let lr_t = schedule(config.lr, config.scheduler, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        CounterRng::new(config.seed, stream(StreamPurpose::Shuffle, epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.train_batch(chunk)?;
            let mut drop_rng = CounterRng::new(config.seed, stream(StreamPurpose::Dropout, global_step));
            let needs_rng = config.dropout > 0.0;
            let stats = sgd_step(
                &mut model,
                &batch.inputs,
                &batch.labels,
                lr_t,
                config.weight_decay,
                needs_rng.then_some(&mut drop_rng),
            )
            .map_err(|e| Error::TrainingDiverged { epoch, detail: e.to_string() })?;
            loss_sum += stats.loss;
            correct += stats.correct;
            batches += 1;
            global_step += 1;
        }
        let stats = EpochStats {
            train_loss: loss_sum / batches as f64,
            train_acc: correct as f64 / n as f64,
            test_acc: model.evaluate_accuracy(&dataset.test_inputs, &dataset.test_labels)?,
            lr: lr_t,
        };
        on_epoch(epoch, &stats);
        record.epochs.push(stats);
    }
    model.provenance = crate::model::Provenance {
        config: config.canonical_text(arch_id),
        seed: config.seed,
        final_test_accuracy: record.final_test_accuracy(),
        notes: "conv: valid padding, stride 1, no pooling; normal init std 0.1; uniform init +-0.1; decay on weights only".into(),
    };
    Ok((model, record))
}

/// [`train_with_progress`] without the callback.
pub fn train(arch_id: &str, dataset: &Dataset, config: &TrainingConfig) -> Result<(Model, TrainRecord)> {
    train_with_progress(arch_id, dataset, config, |_, _| {})
}

/// Applies the config dropout rate to the architecture: updates existing
/// dropout layers, or inserts one after each ReLU when the arch has none.
fn apply_dropout_rate(model: &mut Model, rate: f64) {
    use crate::model::Layer;
    let has_dropout = model.layers.iter().any(|l| matches!(l, Layer::Dropout { .. }));
    if has_dropout {
        for l in &mut model.layers {
            if let Layer::Dropout { rate: r } = l {
                *r = rate;
            }
        }
    } else if rate > 0.0 {
        let mut layers = Vec::with_capacity(model.layers.len() * 2);
        for l in model.layers.drain(..) {
            let is_relu = matches!(l, Layer::Relu);
            layers.push(l);
            if is_relu {
                layers.push(Layer::Dropout { rate });
            }
        }
        model.layers = layers;
    }
}
