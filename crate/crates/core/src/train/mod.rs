//! Deterministic desk-scale quantization-aware training.
//!
//! The network keeps full-precision master weights. Every step quantizes each
//! filter of every parametric layer with the configured method (warm-started
//! from the previous step's levels), runs forward and backward on the
//! quantized weights, routes the weight gradient through the method's backward
//! rule and applies an SGD-with-momentum update to the master weights. Biases
//! stay in float.

pub mod data;
pub mod net;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backward::BackwardContext;
use crate::baselines::{quantize_with, MethodId};
use crate::error::{Error, Result};
use crate::metrics::{distribution_report, LayerReport, DEFAULT_BINS};
use crate::quantizer::{LevelSet, QuantConfig};
use crate::record::Record;
use crate::tensor::{QuantizedFilter, WeightTensor};

pub use data::{Dataset, DatasetKind};
pub use net::{softmax_cross_entropy, LayerSpec, Param, ParamGrad, Shape, TinyNet};

/// Quantizer used in the forward pass, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMethod {
    Fp,
    Quant(MethodId),
}

impl TrainMethod {
    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Fp => "fp",
            TrainMethod::Quant(m) => m.name(),
        }
    }

    pub fn method(self) -> Option<MethodId> {
        match self {
            TrainMethod::Fp => None,
            TrainMethod::Quant(m) => Some(m),
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fp" {
            Ok(TrainMethod::Fp)
        } else {
            s.parse().map(TrainMethod::Quant)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub bits: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Steps of the (quantized) training phase.
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub samples: usize,
    /// Hidden widths of the fully-connected network.
    pub hidden: Vec<usize>,
    /// Render points as small images and put a conv layer in front.
    pub conv: bool,
    /// Full-precision steps run before the quantized phase (fine-tuning).
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Alternating iterations for the first quantization of each filter.
    pub init_iters: usize,
    pub tol: f64,
    /// Steps between evaluation and layer-report records; 0 means once per epoch.
    pub report_every: usize,
    pub bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Quant(MethodId::Wnq),
            bits: 2,
            lr: 0.005,
            momentum: 0.9,
            steps: 2000,
            batch: 32,
            seed: 0,
            dataset: DatasetKind::GaussianBlobs,
            samples: 512,
            hidden: vec![32, 32],
            conv: false,
            pretrain_steps: 2000,
            pretrain_lr: 0.05,
            init_iters: 20,
            tol: 1e-8,
            report_every: 0,
            bins: DEFAULT_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant_config().validate()?;
        if self.batch == 0 || self.samples == 0 {
            return Err(Error::Config("batch and samples must be positive".into()));
        }
        if self.batch > self.samples {
            return Err(Error::Config("batch larger than the dataset".into()));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be positive".into()));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            init_iters: self.init_iters,
            train_iters: 1,
            tol: self.tol,
        }
    }

    pub fn report_interval(&self) -> usize {
        if self.report_every > 0 {
            self.report_every
        } else {
            (self.samples / self.batch).max(1)
        }
    }

    pub fn to_record(&self) -> Record {
        Record::new("config")
            .field("method", self.method)
            .field("bits", self.bits)
            .field("lr", self.lr)
            .field("momentum", self.momentum)
            .field("steps", self.steps)
            .field("batch", self.batch)
            .field("seed", self.seed)
            .field("dataset", self.dataset)
            .field("samples", self.samples)
            .list("hidden", &self.hidden)
            .field("conv", self.conv)
            .field("pretrain_steps", self.pretrain_steps)
            .field("pretrain_lr", self.pretrain_lr)
            .field("init_iters", self.init_iters)
    }
}

const IMAGE_SIDE: usize = 6;
const IMAGE_EXTENT: f64 = 3.5;
const IMAGE_SIGMA: f64 = 1.5;

/// Renders a point as a Gaussian bump on a `6 x 6` grid over `[-3.5, 3.5]^2`.
pub fn render_point(p: [f64; 2]) -> Vec<f64> {
    let step = 2.0 * IMAGE_EXTENT / (IMAGE_SIDE - 1) as f64;
    let mut img = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for r in 0..IMAGE_SIDE {
        let gy = -IMAGE_EXTENT + r as f64 * step;
        for c in 0..IMAGE_SIDE {
            let gx = -IMAGE_EXTENT + c as f64 * step;
            let d2 = (gx - p[0]).powi(2) + (gy - p[1]).powi(2);
            img.push((-d2 / (2.0 * IMAGE_SIGMA * IMAGE_SIGMA)).exp());
        }
    }
    img
}

/// The quantized images of all master weights, plus backward state.
#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    pub weights: Vec<Vec<f64>>,
    /// Per layer, per filter; empty for full-precision runs.
    pub contexts: Vec<Vec<BackwardContext>>,
    /// Fitted levels per layer and filter (`None` for DoReFa and FP).
    pub alphas: Vec<Vec<Option<Vec<f64>>>>,
    /// Ascending level values in weight units, per layer and filter.
    pub level_sets: Vec<Vec<Vec<f64>>>,
    /// Packed filters per layer (`None` for DoReFa and FP).
    pub packed: Vec<Vec<Option<QuantizedFilter>>>,
}

impl QuantizedWeights {
    pub fn refs(&self) -> Vec<&[f64]> {
        self.weights.iter().map(|w| w.as_slice()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

pub struct Trainer {
    config: TrainConfig,
    net: TinyNet,
    data: Dataset,
    inputs: Vec<f64>,
    velocity: Vec<ParamGrad>,
    warm: Vec<Vec<Option<Vec<f64>>>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

fn zero_grads(net: &TinyNet) -> Vec<ParamGrad> {
    net.params()
        .iter()
        .map(|p| ParamGrad {
            weight: vec![0.0; p.weight.len()],
            bias: vec![0.0; p.bias.len()],
        })
        .collect()
}

impl Trainer {
    /// Generates the dataset and a freshly initialized network from the seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let data = Dataset::generate(config.dataset, config.samples, &mut rng);
        let classes = data.classes;
        let (net, inputs) = if config.conv {
            let specs = vec![
                LayerSpec::Conv { out_ch: 8, size: 3 },
                LayerSpec::Relu,
                LayerSpec::Fc { outputs: classes },
            ];
            let net = TinyNet::new(Shape::image(1, IMAGE_SIDE, IMAGE_SIDE), specs, &mut rng)?;
            let inputs = (0..data.len()).flat_map(|i| render_point(data.point(i))).collect();
            (net, inputs)
        } else {
            (TinyNet::mlp(2, &config.hidden, classes, &mut rng)?, data.points.clone())
        };
        Ok(Self::assemble(config, net, data, inputs, rng))
    }

    fn assemble(config: TrainConfig, net: TinyNet, data: Dataset, inputs: Vec<f64>, rng: ChaCha8Rng) -> Self {
        let warm = net
            .params()
            .iter()
            .map(|p| vec![None; p.weight.filter_count()])
            .collect();
        let order = (0..data.len()).collect();
        Self {
            velocity: zero_grads(&net),
            config,
            net,
            data,
            inputs,
            warm,
            rng,
            order,
            cursor: usize::MAX,
            step: 0,
        }
    }

    /// Switches to another method, keeping weights, data and the batch stream.
    ///
    /// Momentum and warm-start state are reset.
    pub fn switch_method(&mut self, method: TrainMethod, lr: f64) {
        self.config.method = method;
        self.config.lr = lr;
        self.velocity = zero_grads(&self.net);
        for w in &mut self.warm {
            w.fill(None);
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &TinyNet {
        &self.net
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Quantizes every filter with the current method and warm starts.
    ///
    /// Master weights are only read.
    pub fn quantize(&self) -> Result<QuantizedWeights> {
        let params = self.net.params();
        let Some(method) = self.config.method.method() else {
            return Ok(QuantizedWeights {
                weights: params.iter().map(|p| p.weight.data().to_vec()).collect(),
                contexts: vec![Vec::new(); params.len()],
                alphas: params.iter().map(|p| vec![None; p.weight.filter_count()]).collect(),
                level_sets: vec![Vec::new(); params.len()],
                packed: params.iter().map(|p| vec![None; p.weight.filter_count()]).collect(),
            });
        };
        let qc = self.config.quant_config();
        let mut out = QuantizedWeights {
            weights: Vec::with_capacity(params.len()),
            contexts: Vec::with_capacity(params.len()),
            alphas: Vec::with_capacity(params.len()),
            level_sets: Vec::with_capacity(params.len()),
            packed: Vec::with_capacity(params.len()),
        };
        for (p, param) in params.iter().enumerate() {
            let mut weights = Vec::with_capacity(param.weight.len());
            let mut contexts = Vec::new();
            let mut alphas = Vec::new();
            let mut levels = Vec::new();
            let mut packed = Vec::new();
            for view in param.weight.filter_views() {
                let warm = self.warm[p][view.index].as_deref();
                let q = quantize_with(method, view.values, &qc, warm)?;
                weights.extend_from_slice(&q.values);
                contexts.push(q.context);
                match q.quantization {
                    Some(fq) => {
                        let mav = fq.filter.mav();
                        levels.push(
                            LevelSet::new(fq.alpha())
                                .levels()
                                .iter()
                                .map(|l| mav * l.value)
                                .collect(),
                        );
                        alphas.push(Some(fq.alpha().to_vec()));
                        packed.push(Some(fq.filter));
                    }
                    None => {
                        alphas.push(None);
                        packed.push(None);
                    }
                }
            }
            out.weights.push(weights);
            out.contexts.push(contexts);
            out.alphas.push(alphas);
            out.level_sets.push(levels);
            out.packed.push(packed);
        }
        Ok(out)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.config.batch;
        if self.cursor == usize::MAX || self.cursor + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        idx
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let len = self.net.input_shape().len();
        let x = idx
            .iter()
            .flat_map(|&i| self.inputs[i * len..(i + 1) * len].iter().copied())
            .collect();
        let y = idx.iter().map(|&i| self.data.labels[i]).collect();
        (x, y)
    }

    /// Gradient of the batch loss with respect to the master weights.
    ///
    /// The upstream gradient at the quantized weights is routed through the
    /// method's per-filter backward rule; FP passes it through.
    pub fn master_gradients(
        &self,
        qw: &QuantizedWeights,
        x: &[f64],
        labels: &[usize],
    ) -> Result<(StepStats, Vec<ParamGrad>)> {
        let refs = qw.refs();
        let fwd = self.net.forward(&refs, x, labels.len());
        let (loss, d_out, correct) = softmax_cross_entropy(fwd.output(), labels, self.net.output_len());
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        let mut grads = self.net.backward(&refs, &fwd, &d_out);
        if let Some(method) = self.config.method.method() {
            for (p, g) in grads.iter_mut().enumerate() {
                let m = self.net.params()[p].weight.filter_len();
                for (n, ctx) in qw.contexts[p].iter().enumerate() {
                    let slice = &mut g.weight[n * m..(n + 1) * m];
                    let routed = method.backward(ctx, slice);
                    slice.copy_from_slice(&routed);
                }
            }
        }
        let stats = StepStats {
            loss,
            accuracy: correct as f64 / labels.len() as f64,
        };
        Ok((stats, grads))
    }

    /// Applies one SGD-with-momentum update: `v = mu v + g; w -= lr v`.
    pub fn apply_update(&mut self, grads: &[ParamGrad]) {
        let (lr, mu) = (self.config.lr, self.config.momentum);
        for ((param, vel), g) in self.net.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, v), g) in param.weight.data_mut().iter_mut().zip(&mut vel.weight).zip(&g.weight) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
            for ((b, v), g) in param.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = mu * *v + g;
                *b -= lr * *v;
            }
        }
    }

    /// One training step on the next mini-batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let idx = self.next_batch();
        let (x, labels) = self.gather(&idx);
        let qw = self.quantize()?;
        let (stats, grads) = self.master_gradients(&qw, &x, &labels)?;
        self.apply_update(&grads);
        for (warm, alphas) in self.warm.iter_mut().zip(qw.alphas) {
            for (slot, a) in warm.iter_mut().zip(alphas) {
                *slot = a;
            }
        }
        self.step += 1;
        Ok(stats)
    }

    /// Loss and accuracy on the full dataset with the current quantization.
    pub fn evaluate(&self) -> Result<StepStats> {
        let qw = self.quantize()?;
        let fwd = self.net.forward(&qw.refs(), &self.inputs, self.data.len());
        let (loss, _, correct) = softmax_cross_entropy(fwd.output(), &self.data.labels, self.net.output_len());
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        Ok(StepStats {
            loss,
            accuracy: correct as f64 / self.data.len() as f64,
        })
    }

    /// Distribution and quantization-error report for every parametric layer.
    pub fn layer_reports(&self) -> Result<Vec<LayerReport>> {
        let qw = self.quantize()?;
        let method = self.config.method.method();
        let bits = method.map(|_| self.config.bits);
        self.net
            .params()
            .iter()
            .enumerate()
            .map(|(p, param)| {
                let report =
                    distribution_report(&param.weight, method, bits, self.config.bins)?.with_name(param.name.clone());
                if method.is_none() {
                    return Ok(report);
                }
                let quantized = param.weight.with_data(qw.weights[p].clone())?;
                Ok(report
                    .with_quantized(&param.weight, &quantized)?
                    .with_levels(qw.level_sets[p].clone()))
            })
            .collect()
    }

    /// Master weights as tensors.
    pub fn master_tensors(&self) -> Vec<(String, WeightTensor)> {
        self.net
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.weight.clone()))
            .collect()
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub records: Vec<Record>,
    pub final_stats: StepStats,
    pub final_reports: Vec<LayerReport>,
    /// Accuracy at the end of the full-precision phase, if there was one.
    pub pretrain_stats: Option<StepStats>,
}

impl TrainingLog {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }
}

fn run_phase(trainer: &mut Trainer, steps: usize, phase: &'static str, records: &mut Vec<Record>) -> Result<StepStats> {
    let interval = trainer.config().report_interval();
    for i in 0..steps {
        let s = trainer.step()?;
        records.push(
            Record::new("step")
                .field("phase", phase)
                .field("step", trainer.step_count())
                .field("loss", s.loss)
                .field("accuracy", s.accuracy),
        );
        if (i + 1) % interval == 0 || i + 1 == steps {
            let eval = trainer.evaluate()?;
            records.push(
                Record::new("epoch")
                    .field("phase", phase)
                    .field("step", trainer.step_count())
                    .field("loss", eval.loss)
                    .field("accuracy", eval.accuracy),
            );
            for r in trainer.layer_reports()? {
                records.push(r.to_record(Some(trainer.step_count())));
            }
        }
    }
    trainer.evaluate()
}

/// Runs an experiment: optional full-precision pretraining, then `steps`
/// steps with the configured method.
pub fn run_experiment(config: &TrainConfig) -> Result<(TrainingLog, Trainer)> {
    let mut trainer = Trainer::new(TrainConfig {
        method: if config.pretrain_steps > 0 {
            TrainMethod::Fp
        } else {
            config.method
        },
        lr: if config.pretrain_steps > 0 {
            config.pretrain_lr
        } else {
            config.lr
        },
        ..config.clone()
    })?;
    let mut records = vec![config.to_record()];
    let mut pretrain_stats = None;
    if config.pretrain_steps > 0 {
        pretrain_stats = Some(run_phase(
            &mut trainer,
            config.pretrain_steps,
            "pretrain",
            &mut records,
        )?);
        trainer.switch_method(config.method, config.lr);
    }
    let final_stats = run_phase(&mut trainer, config.steps, "train", &mut records)?;
    let final_reports = trainer.layer_reports()?;
    records.push(
        Record::new("final")
            .field("method", config.method)
            .field("bits", config.bits)
            .field("seed", config.seed)
            .field("loss", final_stats.loss)
            .field("accuracy", final_stats.accuracy),
    );
    Ok((
        TrainingLog {
            records,
            final_stats,
            final_reports,
            pretrain_stats,
        },
        trainer,
    ))
}
