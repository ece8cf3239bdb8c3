//! Uniform affine quantization.
//!
//! For a group of weights `W` with clipping multipliers `γ` (max side) and
//! `β` (min side):
//!
//! ```text
//! s  = (γ·max(W) − β·min(W)) / (2^N − 1)
//! z  = clamp(−round(β·min(W) / s), 0, 2^N − 1)
//! Wq = clamp(round(W / s) + z, 0, 2^N − 1)
//! Ŵ  = s · (Wq − z)                  (or 2σ(v)·s·(Wq − z) with a tuned
//!                                     dequantization factor v)
//! ```
//!
//! Weights are laid out `[out_features × in_features]`; groups tile the
//! `in_features` axis, so the group of flat element `i` is `i / group_size`.

pub mod container;
pub mod pack;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, data_err, dim_err, Result};
use crate::graph::sigmoid;
use crate::tensor::Tensor;

pub use container::{record_bytes, Container, Record};
pub use pack::{pack_codes, pack_rows, packed_len, unpack_codes, unpack_rows};

/// Scale assigned to groups whose values are all equal.
pub const DEGENERATE_SCALE: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One (s, z) pair per output row.
    PerChannel,
    /// One (s, z) pair per `group_size` contiguous inputs of a row.
    PerGroup { group_size: usize },
    /// One (s, z) pair per row of an activation matrix.
    PerToken,
}

/// Tie-breaking rule for round-to-nearest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingRule {
    #[default]
    HalfAwayFromZero,
    HalfToEven,
}

impl RoundingRule {
    #[inline]
    pub fn round(self, x: f32) -> f32 {
        match self {
            RoundingRule::HalfAwayFromZero => x.round(),
            RoundingRule::HalfToEven => x.round_ties_even(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub gamma: f32,
    pub beta: f32,
    #[serde(default)]
    pub rounding: RoundingRule,
}

impl QuantSpec {
    pub fn new(bits: u8, granularity: Granularity) -> Result<Self> {
        let spec = Self {
            bits,
            granularity,
            gamma: 1.0,
            beta: 1.0,
            rounding: RoundingRule::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn per_channel(bits: u8) -> Result<Self> {
        Self::new(bits, Granularity::PerChannel)
    }

    pub fn per_group(bits: u8, group_size: usize) -> Result<Self> {
        Self::new(bits, Granularity::PerGroup { group_size })
    }

    pub fn with_clipping(mut self, gamma: f32, beta: f32) -> Result<Self> {
        self.gamma = gamma;
        self.beta = beta;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(arg_err!("bits must be in 2..=8, got {}", self.bits));
        }
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(arg_err!("{name} must be in (0, 1], got {v}"));
            }
        }
        if let Granularity::PerGroup { group_size: 0 } = self.granularity {
            return Err(arg_err!("group size must be positive"));
        }
        Ok(())
    }

    /// Largest code, `2^N − 1`.
    pub fn qmax(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Group length for a row of `cols` values.
    pub fn group_size(&self, cols: usize) -> Result<usize> {
        match self.granularity {
            Granularity::PerChannel | Granularity::PerToken => Ok(cols),
            Granularity::PerGroup { group_size } => {
                if group_size == 0 || !cols.is_multiple_of(group_size) {
                    Err(arg_err!(
                        "group size {group_size} does not divide the {cols}-wide quantized axis"
                    ))
                } else {
                    Ok(group_size)
                }
            }
        }
    }
}

/// Per-group step sizes and zero points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub zeros: Vec<u8>,
    pub group_size: usize,
}

impl QuantParams {
    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    #[inline]
    pub fn group_of(&self, flat: usize) -> usize {
        flat / self.group_size
    }

    /// `w / s` for the element's group; degenerate groups map to zero so
    /// every code in them is 0.
    #[inline]
    pub fn scaled(&self, flat: usize, w: f32) -> f32 {
        let s = self.scales[self.group_of(flat)];
        if s == DEGENERATE_SCALE {
            0.0
        } else {
            w / s
        }
    }

    /// Per-element scale, expanded from groups.
    pub fn expand_scales(&self) -> Vec<f32> {
        self.scales
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, self.group_size))
            .collect()
    }

    /// Per-element zero point as f32, expanded from groups.
    pub fn expand_zeros(&self) -> Vec<f32> {
        self.zeros
            .iter()
            .flat_map(|&z| std::iter::repeat_n(z as f32, self.group_size))
            .collect()
    }
}

/// Integer codes with their quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: [usize; 2],
    /// Row-major packed codes, each row padded to a byte boundary.
    pub packed: Vec<u8>,
    pub params: QuantParams,
    /// Dequantization scale logits, one per group.
    pub dst: Option<Vec<f32>>,
    pub spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn from_codes(
        shape: [usize; 2],
        codes: &[u8],
        params: QuantParams,
        dst: Option<Vec<f32>>,
        spec: QuantSpec,
    ) -> Result<Self> {
        if codes.len() != shape[0] * shape[1] {
            return Err(dim_err!("{} codes for shape {:?}", codes.len(), shape));
        }
        if params.num_groups() * params.group_size != codes.len() {
            return Err(dim_err!(
                "{} groups of {} do not cover {} codes",
                params.num_groups(),
                params.group_size,
                codes.len()
            ));
        }
        if let Some(v) = &dst {
            if v.len() != params.num_groups() {
                return Err(dim_err!("{} dst logits for {} groups", v.len(), params.num_groups()));
            }
        }
        let packed = pack_rows(codes, spec.bits, shape[1])?;
        Ok(Self { shape, packed, params, dst, spec })
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_rows(&self.packed, self.spec.bits, self.shape[0], self.shape[1])
            .expect("packed buffer validated at construction")
    }

    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
}

fn as_weight_matrix(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(dim_err!("expected a matrix, got shape {s:?}")),
    }
}

fn check_finite(w: &[f32]) -> Result<()> {
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(data_err!("non-finite value {} at index {i}", w[i]));
    }
    Ok(())
}

fn group_params(group: &[f32], bits: u8, gamma: f32, beta: f32, rule: RoundingRule) -> (f32, u8) {
    let qmax = ((1u16 << bits) - 1) as f32;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in group {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return (DEGENERATE_SCALE, 0);
    }
    let s = (gamma * hi - beta * lo) / qmax;
    if !(s > 0.0) {
        return (DEGENERATE_SCALE, 0);
    }
    let z = (-rule.round(beta * lo / s)).clamp(0.0, qmax);
    (s, z as u8)
}

/// Per-group `(s, z)` with the spec's global clipping multipliers.
pub fn compute_qparams(w: &Tensor, spec: &QuantSpec) -> Result<QuantParams> {
    let (rows, cols) = as_weight_matrix(w)?;
    let g = spec.group_size(cols)?;
    let clip = vec![(spec.gamma, spec.beta); rows * cols / g];
    compute_qparams_clipped(w, spec, &clip)
}

/// Per-group `(s, z)` with one `(γ, β)` pair per group.
pub fn compute_qparams_clipped(
    w: &Tensor,
    spec: &QuantSpec,
    clip: &[(f32, f32)],
) -> Result<QuantParams> {
    spec.validate()?;
    let (_, cols) = as_weight_matrix(w)?;
    check_finite(w.data())?;
    let g = spec.group_size(cols)?;
    let n_groups = w.numel() / g;
    if clip.len() != n_groups {
        return Err(dim_err!("{} clipping pairs for {n_groups} groups", clip.len()));
    }
    let mut scales = Vec::with_capacity(n_groups);
    let mut zeros = Vec::with_capacity(n_groups);
    for (group, &(gamma, beta)) in w.data().chunks(g).zip(clip) {
        let (s, z) = group_params(group, spec.bits, gamma, beta, spec.rounding);
        scales.push(s);
        zeros.push(z);
    }
    Ok(QuantParams { scales, zeros, group_size: g })
}

/// `clamp(round(w/s) + z, 0, 2^N − 1)` for every element.
pub fn quantize_with_params(w: &[f32], params: &QuantParams, spec: &QuantSpec) -> Vec<u8> {
    let qmax = spec.qmax() as f32;
    w.iter()
        .enumerate()
        .map(|(i, &v)| {
            let z = params.zeros[params.group_of(i)] as f32;
            (spec.rounding.round(params.scaled(i, v)) + z).clamp(0.0, qmax) as u8
        })
        .collect()
}

/// Round-to-nearest quantization.
pub fn quantize_rtn(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let params = compute_qparams(w, spec)?;
    quantize_rtn_with(w, params, spec)
}

/// Round-to-nearest quantization against precomputed parameters.
pub fn quantize_rtn_with(w: &Tensor, params: QuantParams, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let (rows, cols) = as_weight_matrix(w)?;
    check_finite(w.data())?;
    let codes = quantize_with_params(w.data(), &params, spec);
    QuantizedTensor::from_codes([rows, cols], &codes, params, None, *spec)
}

/// Effective dequantization factor `2σ(v)`.
#[inline]
pub fn dst_factor(v: f32) -> f32 {
    2.0 * sigmoid(v)
}

/// `s·(code − z)`, times `2σ(v)` when dequantization logits are present.
pub fn dequantize_codes(codes: &[u8], params: &QuantParams, dst: Option<&[f32]>) -> Vec<f32> {
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let gidx = params.group_of(i);
            let s = match dst {
                Some(v) => dst_factor(v[gidx]) * params.scales[gidx],
                None => params.scales[gidx],
            };
            s * (c as f32 - params.zeros[gidx] as f32)
        })
        .collect()
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = dequantize_codes(&q.codes(), &q.params, q.dst.as_deref());
    Tensor::new(q.shape.to_vec(), data).expect("shape checked at construction")
}

/// Per-token dynamic quantize-dequantize of an activation matrix with
/// `γ = β = 1`. Rows whose values are all equal are returned unchanged.
pub fn fake_quant_activations(x: &Tensor, bits: u8) -> Result<Tensor> {
    let spec = QuantSpec::new(bits, Granularity::PerToken)?;
    let (_, cols) = x.as_matrix();
    let qmax = spec.qmax() as f32;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols.max(1)) {
        let (s, z) = group_params(row, bits, 1.0, 1.0, spec.rounding);
        if s == DEGENERATE_SCALE {
            continue;
        }
        let z = z as f32;
        for v in row.iter_mut() {
            let c = (spec.rounding.round(*v / s) + z).clamp(0.0, qmax);
            *v = s * (c - z);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Candidate clipping multipliers `1 − j/(2·grid)`, `j = 0..=grid`.
pub fn clipping_grid(grid: usize) -> Vec<f32> {
    if grid == 0 {
        return vec![1.0];
    }
    (0..=grid)
        .map(|j| 1.0 - j as f32 / (2 * grid) as f32)
        .collect()
}

/// Per-group grid search over `(γ, β)` minimizing the RTN reconstruction
/// error. Ties keep the earlier candidate, so `(1, 1)` wins unless strictly
/// beaten.
pub fn search_clipping(w: &Tensor, spec: &QuantSpec, grid: usize) -> Result<Vec<(f32, f32)>> {
    spec.validate()?;
    let (_, cols) = as_weight_matrix(w)?;
    check_finite(w.data())?;
    let g = spec.group_size(cols)?;
    let candidates = clipping_grid(grid);
    let qmax = spec.qmax() as f32;
    let mut out = Vec::with_capacity(w.numel() / g);
    for group in w.data().chunks(g) {
        let mut best = (f64::INFINITY, 1.0f32, 1.0f32);
        for &gamma in &candidates {
            for &beta in &candidates {
                let (s, z) = group_params(group, spec.bits, gamma, beta, spec.rounding);
                let err = if s == DEGENERATE_SCALE {
                    group.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
                } else {
                    let z = z as f32;
                    group
                        .iter()
                        .map(|&v| {
                            let c = (spec.rounding.round(v / s) + z).clamp(0.0, qmax);
                            ((s * (c - z) - v) as f64).powi(2)
                        })
                        .sum()
                };
                if err < best.0 {
                    best = (err, gamma, beta);
                }
            }
        }
        out.push((best.1, best.2));
    }
    Ok(out)
}

/// Squared reconstruction error of RTN under per-group clipping.
pub fn rtn_error(w: &Tensor, spec: &QuantSpec, clip: &[(f32, f32)]) -> Result<f64> {
    let params = compute_qparams_clipped(w, spec, clip)?;
    let codes = quantize_with_params(w.data(), &params, spec);
    let deq = dequantize_codes(&codes, &params, None);
    Ok(deq
        .iter()
        .zip(w.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum())
}
