//! Quantization error and weight distribution diagnostics.
//!
//! The main statistic is the relative quantization error of a layer, the mean
//! over filters of `||w_n - wq_n||^2 / ||w_n||^2`. The distribution report adds
//! a histogram and `tail_ratio = max|w| / std(w)`, a scalar proxy for how long
//! the tail of the weight distribution is.

use crate::baselines::MethodId;
use crate::error::{Error, Result};
use crate::record::Record;
use crate::tensor::WeightTensor;

pub const DEFAULT_BINS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMse {
    /// Mean over filters with nonzero norm; `None` if there are none.
    pub mean: Option<f64>,
    /// Per-filter ratio, `None` for zero-norm filters.
    pub per_filter: Vec<Option<f64>>,
    pub zero_filters: usize,
}

pub fn relative_mse_detail(layer: &WeightTensor, quantized: &WeightTensor) -> Result<RelativeMse> {
    layer.same_shape(quantized)?;
    let per_filter: Vec<Option<f64>> = layer
        .filter_views()
        .zip(quantized.filter_views())
        .map(|(w, q)| {
            let norm: f64 = w.values.iter().map(|v| v * v).sum();
            (norm > 0.0).then(|| {
                let err: f64 = w.values.iter().zip(q.values).map(|(a, b)| (a - b) * (a - b)).sum();
                err / norm
            })
        })
        .collect();
    let defined: Vec<f64> = per_filter.iter().flatten().copied().collect();
    let zero_filters = per_filter.len() - defined.len();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RelativeMse {
        mean,
        per_filter,
        zero_filters,
    })
}

/// Mean relative squared error over filters with nonzero norm.
pub fn relative_mse(layer: &WeightTensor, quantized: &WeightTensor) -> Result<f64> {
    relative_mse_detail(layer, quantized)?
        .mean
        .ok_or_else(|| Error::Config("every filter has zero norm".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; the top edge belongs to the last bin.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins > 0);
        let mut counts = vec![0u64; bins];
        let width = hi - lo;
        for &v in values {
            let idx = if width > 0.0 {
                (((v - lo) / width) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize
            } else {
                bins / 2
            };
            counts[idx] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    /// `None` when no quantizer is involved.
    pub method: Option<MethodId>,
    pub bits: Option<usize>,
    pub count: usize,
    pub max_abs: f64,
    pub std: f64,
    /// `None` when the layer is constant (`std = 0`).
    pub tail_ratio: Option<f64>,
    pub histogram: Histogram,
    pub relative_mse: Option<f64>,
    pub per_filter_mse: Vec<Option<f64>>,
    pub zero_filters: usize,
    /// Per-filter quantization levels in weight units, ascending.
    pub level_sets: Vec<Vec<f64>>,
}

impl LayerReport {
    /// Level sets averaged over filters.
    pub fn mean_levels(&self) -> Vec<f64> {
        let Some(first) = self.level_sets.first() else {
            return Vec::new();
        };
        let n = self.level_sets.len() as f64;
        (0..first.len())
            .map(|j| self.level_sets.iter().map(|ls| ls[j]).sum::<f64>() / n)
            .collect()
    }

    /// Attaches the error of `quantized` against the reported layer.
    pub fn with_quantized(mut self, layer: &WeightTensor, quantized: &WeightTensor) -> Result<Self> {
        let detail = relative_mse_detail(layer, quantized)?;
        self.relative_mse = detail.mean;
        self.per_filter_mse = detail.per_filter;
        self.zero_filters = detail.zero_filters;
        Ok(self)
    }

    pub fn with_levels(mut self, level_sets: Vec<Vec<f64>>) -> Self {
        self.level_sets = level_sets;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Fields, in order: kind, step, name, method, bits, count, max_abs, std,
    /// tail_ratio, relative_mse, zero_filters, hist_lo, hist_hi, hist, levels.
    pub fn to_record(&self, step: Option<usize>) -> Record {
        Record::new("layer")
            .opt("step", step)
            .field("name", &self.name)
            .opt("method", self.method)
            .opt("bits", self.bits)
            .field("count", self.count)
            .field("max_abs", self.max_abs)
            .field("std", self.std)
            .opt("tail_ratio", self.tail_ratio)
            .opt("relative_mse", self.relative_mse)
            .field("zero_filters", self.zero_filters)
            .field("hist_lo", self.histogram.lo)
            .field("hist_hi", self.histogram.hi)
            .list("hist", &self.histogram.counts)
            .list("levels", &self.mean_levels())
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

pub fn tail_ratio(values: &[f64]) -> Option<f64> {
    let sd = std_dev(values);
    let max = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    (sd > 0.0).then(|| max / sd)
}

/// Histogram and tail statistics of all weights in `layer`.
pub fn distribution_report(
    layer: &WeightTensor,
    method: Option<MethodId>,
    bits: Option<usize>,
    bins: usize,
) -> Result<LayerReport> {
    if layer.is_empty() {
        return Err(Error::EmptyLayer);
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let data = layer.data();
    let max_abs = data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let std = std_dev(data);
    Ok(LayerReport {
        name: String::new(),
        method,
        bits,
        count: data.len(),
        max_abs,
        std,
        tail_ratio: (std > 0.0).then(|| max_abs / std),
        histogram: Histogram::build(data, -max_abs, max_abs, bins),
        relative_mse: None,
        per_filter_mse: Vec::new(),
        zero_filters: 0,
        level_sets: Vec::new(),
    })
}
