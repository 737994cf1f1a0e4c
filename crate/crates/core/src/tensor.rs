//! Dense weight tensors, per-filter views and bit-plane packed quantized filters.
//!
//! A filter is one output channel of a conv layer (`C x s x s` values) or one
//! row of a fully-connected layer (`C` values). Every quantizer in this crate
//! works on one filter at a time.

use std::fmt;

use crate::error::{Error, Result};

/// Largest supported bit width.
pub const MAX_BITS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    FullyConnected,
    Conv,
}

impl LayerKind {
    pub fn expected_dims(self) -> usize {
        match self {
            LayerKind::FullyConnected => 2,
            LayerKind::Conv => 4,
        }
    }

    pub fn as_byte(self) -> u8 {
        match self {
            LayerKind::FullyConnected => 0,
            LayerKind::Conv => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(LayerKind::FullyConnected),
            1 => Ok(LayerKind::Conv),
            other => Err(Error::UnknownKind(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::FullyConnected => "fc",
            LayerKind::Conv => "conv",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major real tensor holding one layer's weights.
///
/// Conv weights are `N x C x s x s`, fully-connected weights `N x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    kind: LayerKind,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl WeightTensor {
    pub fn new(kind: LayerKind, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != kind.expected_dims() {
            return Err(Error::DimCount {
                kind: kind.name(),
                expected: kind.expected_dims(),
                found: shape.len(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape {
                shape: shape.clone(),
                reason: "element count overflows".into(),
            })?;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Self { kind, shape, data })
    }

    pub fn fc(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(LayerKind::FullyConnected, vec![rows, cols], data)
    }

    pub fn conv(out_ch: usize, in_ch: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(LayerKind::Conv, vec![out_ch, in_ch, size, size], data)
    }

    pub fn zeros_like(other: &WeightTensor) -> Self {
        Self {
            kind: other.kind,
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    /// Same kind and shape as `self`, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, self.shape.clone(), data)
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of filters, `N`.
    pub fn filter_count(&self) -> usize {
        self.shape[0]
    }

    /// Elements per filter, `M` (`C s^2` for conv, `C` for fully-connected).
    pub fn filter_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn filter(&self, n: usize) -> &[f64] {
        let m = self.filter_len();
        &self.data[n * m..(n + 1) * m]
    }

    pub fn filter_mut(&mut self, n: usize) -> &mut [f64] {
        let m = self.filter_len();
        &mut self.data[n * m..(n + 1) * m]
    }

    pub fn filter_views(&self) -> impl ExactSizeIterator<Item = FilterView<'_>> + '_ {
        self.data
            .chunks_exact(self.filter_len())
            .enumerate()
            .map(|(index, values)| FilterView { index, values })
    }

    pub fn same_shape(&self, other: &WeightTensor) -> Result<()> {
        if self.kind != other.kind || self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// One quantization group: the contiguous weights of filter `index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterView<'a> {
    pub index: usize,
    pub values: &'a [f64],
}

/// Binary codes of a filter: one `K`-bit label per element.
///
/// Bit `K-1-k` of a label holds code component `k` (1 for +1, 0 for -1), so
/// numeric label order is the lexicographic order of codes with -1 before +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codes {
    bits: usize,
    labels: Vec<u8>,
}

impl Codes {
    pub fn new(bits: usize, labels: Vec<u8>) -> Result<Self> {
        check_bits(bits)?;
        let limit = 1usize << bits;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= limit) {
            return Err(Error::Config(format!("code label {bad} does not fit in {bits} bits")));
        }
        Ok(Self { bits, labels })
    }

    /// Builds codes from an `M x K` sign matrix (row-major, entries +-1).
    pub fn from_signs(bits: usize, signs: &[i8]) -> Result<Self> {
        check_bits(bits)?;
        if !signs.len().is_multiple_of(bits) {
            return Err(Error::Length {
                what: "signs (multiple of K)",
                expected: signs.len() / bits * bits,
                found: signs.len(),
            });
        }
        let labels = signs
            .chunks_exact(bits)
            .map(|row| row.iter().fold(0u8, |acc, &s| (acc << 1) | u8::from(s > 0)))
            .collect();
        Ok(Self { bits, labels })
    }

    pub fn filled(bits: usize, m: usize, label: u8) -> Self {
        Self {
            bits,
            labels: vec![label; m],
        }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Code component `k` of element `i`, as -1.0 or +1.0.
    #[inline]
    pub fn sign(&self, i: usize, k: usize) -> f64 {
        label_sign(self.labels[i], k, self.bits)
    }

    /// Row-major `M x K` matrix of +-1.
    pub fn to_signs(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.labels.len() * self.bits);
        for i in 0..self.labels.len() {
            for k in 0..self.bits {
                out.push(if self.sign(i, k) > 0.0 { 1 } else { -1 });
            }
        }
        out
    }
}

#[inline]
pub fn label_sign(label: u8, k: usize, bits: usize) -> f64 {
    if (label >> (bits - 1 - k)) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// `alpha^T e` for the code with the given label, summed in component order.
#[inline]
pub fn code_value(alpha: &[f64], label: u8) -> f64 {
    let bits = alpha.len();
    alpha
        .iter()
        .enumerate()
        .fold(0.0, |acc, (k, &a)| acc + a * label_sign(label, k, bits))
}

pub fn check_bits(bits: usize) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitsOutOfRange(bits))
    }
}

/// Bytes needed to store one bit-plane of `m` elements.
pub fn plane_stride(m: usize) -> usize {
    m.div_ceil(8)
}

/// A filter in packed form: level parameters, `K` bit-planes and the scale.
///
/// Plane `k` holds code component `k` of all `M` elements, LSB-first within
/// each byte; a set bit means +1. Planes are padded to whole bytes with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFilter {
    alpha: Vec<f64>,
    planes: Vec<u8>,
    mav: f64,
    m: usize,
}

impl QuantizedFilter {
    pub fn pack(alpha: &[f64], codes: &Codes, mav: f64) -> Result<Self> {
        let bits = alpha.len();
        check_bits(bits)?;
        if codes.bits() != bits {
            return Err(Error::Length {
                what: "code bits",
                expected: bits,
                found: codes.bits(),
            });
        }
        let m = codes.len();
        if m == 0 {
            return Err(Error::EmptyFilter);
        }
        check_mav(mav)?;
        let stride = plane_stride(m);
        let mut planes = vec![0u8; bits * stride];
        for (i, &label) in codes.labels().iter().enumerate() {
            for k in 0..bits {
                if (label >> (bits - 1 - k)) & 1 == 1 {
                    planes[k * stride + i / 8] |= 1 << (i % 8);
                }
            }
        }
        Ok(Self {
            alpha: alpha.to_vec(),
            planes,
            mav,
            m,
        })
    }

    /// Rebuilds a filter from stored planes; padding bits are cleared.
    pub fn from_planes(alpha: Vec<f64>, mut planes: Vec<u8>, mav: f64, m: usize) -> Result<Self> {
        let bits = alpha.len();
        check_bits(bits)?;
        if m == 0 {
            return Err(Error::EmptyFilter);
        }
        check_mav(mav)?;
        let stride = plane_stride(m);
        if planes.len() != bits * stride {
            return Err(Error::Length {
                what: "plane bytes",
                expected: bits * stride,
                found: planes.len(),
            });
        }
        if !m.is_multiple_of(8) {
            let mask = (1u8 << (m % 8)) - 1;
            for k in 0..bits {
                planes[k * stride + stride - 1] &= mask;
            }
        }
        Ok(Self { alpha, planes, mav, m })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn bits(&self) -> usize {
        self.alpha.len()
    }

    pub fn mav(&self) -> f64 {
        self.mav
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn plane(&self, k: usize) -> &[u8] {
        let stride = plane_stride(self.m);
        &self.planes[k * stride..(k + 1) * stride]
    }

    pub fn planes(&self) -> &[u8] {
        &self.planes
    }

    pub fn codes(&self) -> Codes {
        let bits = self.bits();
        let labels = (0..self.m)
            .map(|i| {
                (0..bits).fold(0u8, |acc, k| {
                    let bit = (self.plane(k)[i / 8] >> (i % 8)) & 1;
                    (acc << 1) | bit
                })
            })
            .collect();
        Codes { bits, labels }
    }

    /// `mav * alpha^T e_i` for every element.
    pub fn unpack(&self) -> Vec<f64> {
        self.codes()
            .labels()
            .iter()
            .map(|&l| self.mav * code_value(&self.alpha, l))
            .collect()
    }
}

fn check_mav(mav: f64) -> Result<()> {
    if mav.is_finite() && mav >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "scale must be finite and nonnegative, got {mav}"
        )))
    }
}

/// Convenience wrapper matching [`QuantizedFilter::pack`].
pub fn pack_filter(alpha: &[f64], codes: &Codes, mav: f64) -> Result<QuantizedFilter> {
    QuantizedFilter::pack(alpha, codes, mav)
}

pub fn unpack_filter(qf: &QuantizedFilter) -> Vec<f64> {
    qf.unpack()
}

/// All quantized filters of one layer, as stored in a WNQQ file.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub kind: LayerKind,
    pub filters: Vec<QuantizedFilter>,
}

impl QuantizedLayer {
    pub fn new(kind: LayerKind, filters: Vec<QuantizedFilter>) -> Result<Self> {
        let first = filters.first().ok_or(Error::EmptyLayer)?;
        let (bits, m) = (first.bits(), first.len());
        for f in &filters {
            if f.bits() != bits || f.len() != m {
                return Err(Error::Config("all filters of a layer must share K and M".into()));
            }
        }
        Ok(Self { kind, filters })
    }

    pub fn bits(&self) -> usize {
        self.filters[0].bits()
    }

    pub fn filter_len(&self) -> usize {
        self.filters[0].len()
    }

    pub fn filter_count(&self) -> usize {
        self.filters.len()
    }

    /// Dequantized weights as a tensor of the given shape.
    ///
    /// The file format keeps only `N` and `M`; without a reference shape a
    /// conv layer comes back as `N x M x 1 x 1`.
    pub fn dequantize(&self, shape: Option<&[usize]>) -> Result<WeightTensor> {
        let (n, m) = (self.filter_count(), self.filter_len());
        let shape = match shape {
            Some(s) => s.to_vec(),
            None => match self.kind {
                LayerKind::FullyConnected => vec![n, m],
                LayerKind::Conv => vec![n, m, 1, 1],
            },
        };
        let data = self.filters.iter().flat_map(|f| f.unpack()).collect();
        let t = WeightTensor::new(self.kind, shape, data)?;
        if t.filter_count() != n || t.filter_len() != m {
            return Err(Error::ShapeMismatch {
                left: t.shape().to_vec(),
                right: vec![n, m],
            });
        }
        Ok(t)
    }

    /// Per-filter level parameters.
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.filters.iter().map(|f| f.alpha().to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn views_conv_1x1() {
        let t = WeightTensor::conv(2, 3, 1, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let views: Vec<_> = t.filter_views().collect();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].values, &[1., 2., 3.]);
        assert_eq!(views[1].values, &[4., 5., 6.]);
        assert_eq!(views[1].index, 1);
    }

    #[test]
    fn views_fc_single_row() {
        let t = WeightTensor::fc(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let views: Vec<_> = t.filter_views().collect();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].values.len(), 4);
    }

    #[test]
    fn views_conv_3x3() {
        let t = WeightTensor::conv(2, 2, 3, (0..36).map(f64::from).collect()).unwrap();
        assert_eq!(t.filter_len(), 18);
        let views: Vec<_> = t.filter_views().collect();
        assert_eq!(views.len(), 2);
        assert_eq!(views[1].values[0], 18.0);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(matches!(
            WeightTensor::new(LayerKind::Conv, vec![2, 3], vec![0.0; 6]),
            Err(Error::DimCount { .. })
        ));
        assert!(matches!(
            WeightTensor::fc(2, 3, vec![0.0; 5]),
            Err(Error::DataLength { .. })
        ));
        assert!(matches!(
            WeightTensor::fc(0, 3, vec![]),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn unpack_single_bit() {
        let codes = Codes::from_signs(1, &[1, -1]).unwrap();
        let qf = pack_filter(&[0.5], &codes, 2.0).unwrap();
        assert_eq!(qf.unpack(), vec![1.0, -1.0]);
    }

    #[test]
    fn unpack_two_bits() {
        let codes = Codes::from_signs(2, &[1, -1]).unwrap();
        let qf = pack_filter(&[0.5, 0.25], &codes, 1.0).unwrap();
        assert_eq!(qf.unpack(), vec![0.25]);
    }

    #[test]
    fn plane_storage_is_padded_to_bytes() {
        let codes = Codes::filled(2, 10, 0b11);
        let qf = pack_filter(&[0.5, 0.25], &codes, 1.0).unwrap();
        assert_eq!(qf.planes().len(), 4);
        assert_eq!(qf.plane(0), &[0xff, 0x03]);
        assert_eq!(qf.plane(1), &[0xff, 0x03]);
    }

    #[test]
    fn plane_major_lsb_first() {
        // element 0: (+1, -1), element 1: (-1, +1), element 2: (+1, +1)
        let codes = Codes::from_signs(2, &[1, -1, -1, 1, 1, 1]).unwrap();
        let qf = pack_filter(&[1.0, 0.5], &codes, 1.0).unwrap();
        assert_eq!(qf.plane(0), &[0b101]);
        assert_eq!(qf.plane(1), &[0b110]);
    }

    #[test]
    fn pack_rejects_bad_inputs() {
        let codes = Codes::filled(1, 0, 0);
        assert!(matches!(pack_filter(&[1.0], &codes, 1.0), Err(Error::EmptyFilter)));
        assert!(matches!(
            pack_filter(&[1.0; 9], &Codes::filled(1, 1, 0), 1.0),
            Err(Error::BitsOutOfRange(9))
        ));
        assert!(Codes::new(9, vec![0]).is_err());
        assert!(pack_filter(&[1.0], &Codes::filled(1, 2, 0), -1.0).is_err());
    }

    #[test]
    fn from_planes_clears_padding() {
        let qf = QuantizedFilter::from_planes(vec![1.0], vec![0xff], 1.0, 3).unwrap();
        assert_eq!(qf.plane(0), &[0b111]);
        assert_eq!(qf.unpack(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn exhaustive_small_pack_roundtrip() {
        for bits in 1..=3usize {
            for m in 1..=3usize {
                let levels = 1usize << bits;
                let total = levels.pow(m as u32);
                for combo in 0..total {
                    let labels: Vec<u8> = (0..m)
                        .map(|i| ((combo / levels.pow(i as u32)) % levels) as u8)
                        .collect();
                    let codes = Codes::new(bits, labels).unwrap();
                    let alpha: Vec<f64> = (0..bits).map(|k| 1.0 / (k + 1) as f64).collect();
                    let qf = pack_filter(&alpha, &codes, 0.75).unwrap();
                    assert_eq!(qf.codes(), codes);
                    assert_eq!(qf.alpha(), &alpha[..]);
                    assert_eq!(qf.mav(), 0.75);
                }
            }
        }
    }

    #[test]
    fn dequantize_respects_reference_shape() {
        let codes = Codes::from_signs(1, &[1, -1, 1, 1]).unwrap();
        let qf = pack_filter(&[1.0], &codes, 1.0).unwrap();
        let layer = QuantizedLayer::new(LayerKind::Conv, vec![qf]).unwrap();
        assert_eq!(layer.dequantize(None).unwrap().shape(), &[1, 4, 1, 1]);
        let t = layer.dequantize(Some(&[1, 1, 2, 2])).unwrap();
        assert_eq!(t.data(), &[1.0, -1.0, 1.0, 1.0]);
        assert!(layer.dequantize(Some(&[1, 1, 3, 3])).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_lossless(
            bits in 1usize..=8,
            m in 1usize..40,
            seed_labels in proptest::collection::vec(any::<u8>(), 40),
            alpha in proptest::collection::vec(-2.0f64..2.0, 8),
            mav in 0.0f64..10.0,
        ) {
            let mask = ((1u16 << bits) - 1) as u8;
            let labels: Vec<u8> = seed_labels[..m].iter().map(|l| l & mask).collect();
            let codes = Codes::new(bits, labels).unwrap();
            let qf = pack_filter(&alpha[..bits], &codes, mav).unwrap();
            prop_assert_eq!(qf.codes(), codes.clone());
            let out = qf.unpack();
            for (i, v) in out.iter().enumerate() {
                let direct: f64 = (0..bits).map(|k| alpha[k] * codes.sign(i, k)).sum();
                prop_assert!((v - mav * direct).abs() <= 1e-12 * (1.0 + mav));
            }
        }

        #[test]
        fn views_partition_tensor(n in 1usize..6, c in 1usize..5, s in 1usize..4) {
            let len = n * c * s * s;
            let data: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let t = WeightTensor::conv(n, c, s, data.clone()).unwrap();
            let joined: Vec<f64> = t.filter_views().flat_map(|v| v.values.iter().copied()).collect();
            prop_assert_eq!(joined, data);
            prop_assert_eq!(t.filter_views().count(), n);
        }
    }
}
