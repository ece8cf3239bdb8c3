//! Soft rounding variables and the harden / merge steps.
//!
//! Each weight's rounding direction is relaxed to `α = σ(ν)`. A hardened
//! variable stores `ν = ±∞`, so `σ(ν)` is exactly 0 or 1 and contributes
//! exactly zero gradient; no separate mask is kept.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::quant::{QuantParams, QuantSpec, DEGENERATE_SCALE};
use crate::tensor::Tensor;

/// Fractional parts are clamped into `[FRAC_GUARD, 1 − FRAC_GUARD]` before
/// taking the logit so every initial ν is finite.
pub const FRAC_GUARD: f32 = 1e-4;

pub fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

/// Hardening score `|σ(ν) − 0.5|`; low means undecided.
pub fn hs_score(nu: f32) -> f32 {
    (sigmoid(nu) - 0.5).abs()
}

/// Hard rounding `1{ν > 0}`.
#[inline]
pub fn hard_alpha(nu: f32) -> u8 {
    u8::from(nu > 0.0)
}

/// Number of variables hardened at cumulative percentage `p` of `d`.
pub fn target_count(p: f64, d: usize) -> usize {
    let x = p / 100.0 * d as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(d)
}

/// Which soft variables a harden step freezes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardenOrder {
    /// Most decided first: highest `|σ(ν) − 0.5|`.
    #[default]
    HighestScore,
    /// Least decided first: lowest `|σ(ν) − 0.5|`.
    LowestScore,
}

/// Rounding logits for every weight in a block (all linear layers
/// concatenated).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingState {
    pub nu: Vec<f32>,
    hardened: usize,
}

impl RoundingState {
    /// `ν = logit(frac(θ/s))` with the guard clamp. Weights in degenerate
    /// groups start hardened at `−∞` (their code is always 0).
    pub fn init(theta: &[f32], params: &QuantParams) -> Self {
        let mut hardened = 0;
        let nu = theta
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if params.scales[params.group_of(i)] == DEGENERATE_SCALE {
                    hardened += 1;
                    return f32::NEG_INFINITY;
                }
                let x = params.scaled(i, w);
                let frac = (x - x.floor()).clamp(FRAC_GUARD, 1.0 - FRAC_GUARD);
                logit(frac)
            })
            .collect();
        Self { nu, hardened }
    }

    /// State from explicit logits; non-finite entries count as hardened.
    pub fn from_logits(nu: Vec<f32>) -> Self {
        let hardened = nu.iter().filter(|v| !v.is_finite()).count();
        Self { nu, hardened }
    }

    /// Concatenates per-layer states into one block-wide state.
    pub fn concat(parts: impl IntoIterator<Item = RoundingState>) -> Self {
        let mut nu = Vec::new();
        let mut hardened = 0;
        for p in parts {
            hardened += p.hardened;
            nu.extend(p.nu);
        }
        Self { nu, hardened }
    }

    /// The variables in `range` as a standalone state.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let nu = self.nu[range].to_vec();
        let hardened = nu.iter().filter(|v| !v.is_finite()).count();
        Self { nu, hardened }
    }

    pub fn total(&self) -> usize {
        self.nu.len()
    }

    pub fn hardened_count(&self) -> usize {
        self.hardened
    }

    pub fn hardened_percent(&self) -> f64 {
        if self.nu.is_empty() {
            100.0
        } else {
            self.hardened as f64 / self.nu.len() as f64 * 100.0
        }
    }

    pub fn is_fully_hardened(&self) -> bool {
        self.hardened == self.nu.len()
    }

    /// Hardens the lowest-score soft variables until `ceil(p/100 · d)` are
    /// hard in total. Ties go to the lower flat index. Returns the indices
    /// hardened by this call in ascending order.
    pub fn harden(&mut self, p: f64) -> Result<Vec<usize>> {
        self.harden_ordered(p, HardenOrder::LowestScore)
    }

    /// [`RoundingState::harden`] with an explicit selection order. Ties go
    /// to the lower flat index in either order.
    pub fn harden_ordered(&mut self, p: f64, order: HardenOrder) -> Result<Vec<usize>> {
        if !(0.0..=100.0).contains(&p) {
            return Err(arg_err!("harden percentage {p} outside [0, 100]"));
        }
        let target = target_count(p, self.nu.len());
        if target < self.hardened {
            return Err(arg_err!(
                "harden percentage {p} is below the current {:.4}% ({} of {} hardened)",
                self.hardened_percent(),
                self.hardened,
                self.nu.len()
            ));
        }
        let need = target - self.hardened;
        if need == 0 {
            return Ok(Vec::new());
        }
        let mut soft: Vec<(f32, usize)> = self
            .nu
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (hs_score(v), i))
            .collect();
        let by_score = |a: &(f32, usize), b: &(f32, usize)| {
            let primary = match order {
                HardenOrder::LowestScore => a.0.total_cmp(&b.0),
                HardenOrder::HighestScore => b.0.total_cmp(&a.0),
            };
            primary.then(a.1.cmp(&b.1))
        };
        if need < soft.len() {
            soft.select_nth_unstable_by(need - 1, by_score);
            soft.truncate(need);
        }
        let mut chosen: Vec<usize> = soft.into_iter().map(|(_, i)| i).collect();
        chosen.sort_unstable();
        for &i in &chosen {
            self.nu[i] = if self.nu[i] > 0.0 {
                f32::INFINITY
            } else {
                f32::NEG_INFINITY
            };
        }
        self.hardened += chosen.len();
        Ok(chosen)
    }

    fn require_hardened(&self) -> Result<()> {
        if !self.is_fully_hardened() {
            return Err(Error::State(format!(
                "{} of {} rounding variables are still soft",
                self.nu.len() - self.hardened,
                self.nu.len()
            )));
        }
        Ok(())
    }
}

/// Per-layer constants for the differentiable soft quantizer
/// `θ̂ = 2σ(v) · s · (clamp(⌊θ/s⌋ + σ(ν) + z, 0, 2^N − 1) − z)`.
#[derive(Debug, Clone)]
pub struct SoftQuantizer {
    pub shape: [usize; 2],
    floor_plus_zero: Tensor,
    zeros: Tensor,
    scales: Tensor,
    group_size: usize,
    qmax: f32,
}

impl SoftQuantizer {
    pub fn new(theta: &Tensor, params: &QuantParams, spec: &QuantSpec) -> Result<Self> {
        let shape = match theta.shape() {
            [r, c] => [*r, *c],
            s => return Err(dim_err!("soft quantizer expects a matrix, got {s:?}")),
        };
        if params.num_groups() * params.group_size != theta.numel() {
            return Err(dim_err!("quantization groups do not cover weight {shape:?}"));
        }
        let zeros = params.expand_zeros();
        let floor_plus_zero = theta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &w)| params.scaled(i, w).floor() + zeros[i])
            .collect();
        Ok(Self {
            shape,
            floor_plus_zero: Tensor::vector(floor_plus_zero),
            zeros: Tensor::vector(zeros),
            scales: Tensor::vector(params.expand_scales()),
            group_size: params.group_size,
            qmax: spec.qmax() as f32,
        })
    }

    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    /// Records the soft quantizer on `g`. `nu` is flat over the layer; `dst`
    /// holds one logit per group when scale tuning is enabled.
    pub fn forward(&self, g: &mut Graph, nu: Var, dst: Option<Var>) -> Result<Var> {
        if g.value(nu).numel() != self.numel() {
            return Err(dim_err!(
                "{} rounding logits for a {:?} weight",
                g.value(nu).numel(),
                self.shape
            ));
        }
        let alpha = g.sigmoid(nu);
        let fz = g.constant(self.floor_plus_zero.clone());
        let codes = g.add(alpha, fz)?;
        let codes = g.clamp(codes, 0.0, self.qmax)?;
        let z = g.constant(self.zeros.clone());
        let centered = g.sub(codes, z)?;
        let s = g.constant(self.scales.clone());
        let mut w = g.mul(centered, s)?;
        if let Some(v) = dst {
            let sv = g.sigmoid(v);
            let factor = g.scale(sv, 2.0);
            w = g.group_scale(w, factor, self.group_size)?;
        }
        g.reshape(w, &self.shape)
    }
}

/// Non-differentiable evaluation of the soft quantizer.
pub fn soft_forward(
    theta: &Tensor,
    nu: &[f32],
    params: &QuantParams,
    dst: Option<&[f32]>,
    spec: &QuantSpec,
) -> Result<Tensor> {
    let sq = SoftQuantizer::new(theta, params, spec)?;
    let mut g = Graph::new();
    let nu = g.constant(Tensor::vector(nu.to_vec()));
    let v = dst.map(|v| g.constant(Tensor::vector(v.to_vec())));
    let out = sq.forward(&mut g, nu, v)?;
    Ok(g.value(out).clone())
}

/// Codes selected by fully hardened rounding logits:
/// `clamp(⌊θ/s⌋ + 1{ν>0} + z, 0, 2^N − 1)`.
pub fn hardened_codes(
    theta: &[f32],
    nu: &[f32],
    params: &QuantParams,
    spec: &QuantSpec,
) -> Result<Vec<u8>> {
    if theta.len() != nu.len() {
        return Err(dim_err!("{} weights, {} rounding logits", theta.len(), nu.len()));
    }
    if let Some(i) = nu.iter().position(|v| v.is_finite()) {
        return Err(Error::State(format!("rounding variable {i} is still soft")));
    }
    let qmax = spec.qmax() as f32;
    Ok(theta
        .iter()
        .zip(nu)
        .enumerate()
        .map(|(i, (&w, &v))| {
            let z = params.zeros[params.group_of(i)] as f32;
            (params.scaled(i, w).floor() + hard_alpha(v) as f32 + z).clamp(0.0, qmax) as u8
        })
        .collect())
}

/// Folds hard rounding decisions into the full-precision weights,
/// `θ ← θ + s · (1{ν>0} − 0.5)`, so that plain round-to-nearest with the
/// same parameters reproduces the chosen codes.
///
/// Where the shifted value lands exactly on a rounding tie (θ already on the
/// grid) or float error carries it across a bin edge, the element is placed
/// at the bin center `s · (⌊θ/s⌋ + α)` instead.
pub fn finalize_merge(
    theta: &[f32],
    state: &RoundingState,
    params: &QuantParams,
    spec: &QuantSpec,
) -> Result<Vec<f32>> {
    state.require_hardened()?;
    let target = hardened_codes(theta, &state.nu, params, spec)?;
    let qmax = spec.qmax() as f32;
    let requant = |i: usize, w: f32| -> u8 {
        let z = params.zeros[params.group_of(i)] as f32;
        (spec.rounding.round(params.scaled(i, w)) + z).clamp(0.0, qmax) as u8
    };
    Ok(theta
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let s = params.scales[params.group_of(i)];
            let alpha = hard_alpha(state.nu[i]) as f32;
            let merged = w + s * (alpha - 0.5);
            if requant(i, merged) == target[i] {
                merged
            } else {
                s * (params.scaled(i, w).floor() + alpha)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_with_params;
    use proptest::prelude::*;

    fn params(s: f32, z: u8, n: usize) -> QuantParams {
        QuantParams { scales: vec![s], zeros: vec![z], group_size: n }
    }

    fn w2() -> QuantSpec {
        QuantSpec::per_channel(2).unwrap()
    }

    #[test]
    fn init_examples() {
        let st = RoundingState::init(&[0.7], &params(1.0, 0, 1));
        assert!((st.nu[0] - 0.8473).abs() < 1e-4);
        let st = RoundingState::init(&[2.0], &params(1.0, 0, 1));
        assert!((st.nu[0] - logit(1e-4)).abs() < 1e-6);
        assert!((st.nu[0] + 9.21).abs() < 1e-2);
        let st = RoundingState::init(&[-1.3], &params(0.5, 0, 1));
        assert!((st.nu[0] + 0.4055).abs() < 1e-3);
        assert_eq!(st.hardened_count(), 0);
    }

    #[test]
    fn init_reconstructs_weight() {
        let theta = Tensor::new([1, 1], vec![0.7]).unwrap();
        let p = params(1.0, 0, 1);
        let st = RoundingState::init(theta.data(), &p);
        let out = soft_forward(&theta, &st.nu, &p, None, &w2()).unwrap();
        assert!((out.data()[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn degenerate_groups_start_hardened() {
        let st = RoundingState::init(&[5.0, 5.0], &params(DEGENERATE_SCALE, 0, 2));
        assert_eq!(st.hardened_count(), 2);
        assert!(st.is_fully_hardened());
    }

    #[test]
    fn hs_examples() {
        assert_eq!(hs_score(0.0), 0.0);
        assert_eq!(hs_score(f32::INFINITY), 0.5);
        assert_eq!(hs_score(f32::NEG_INFINITY), 0.5);
        assert!((hs_score(2.197_224_6) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn harden_examples() {
        let mut st = RoundingState { nu: vec![-3.0, 0.1, 2.0, -0.1], hardened: 0 };
        assert_eq!(st.harden(0.0).unwrap(), Vec::<usize>::new());
        assert_eq!(st.harden(50.0).unwrap(), vec![1, 3]);
        assert_eq!(st.nu, vec![-3.0, f32::INFINITY, 2.0, f32::NEG_INFINITY]);
        assert!(matches!(st.harden(25.0), Err(Error::Argument(_))));
        st.harden(100.0).unwrap();
        assert!(st.nu.iter().all(|v| v.is_infinite()));
        assert_eq!(st.nu[0], f32::NEG_INFINITY);
        assert_eq!(st.nu[2], f32::INFINITY);
    }

    #[test]
    fn zero_logit_hardens_down() {
        let mut st = RoundingState { nu: vec![0.0], hardened: 0 };
        st.harden(100.0).unwrap();
        assert_eq!(st.nu[0], f32::NEG_INFINITY);
    }

    #[test]
    fn harden_ties_break_by_index() {
        let mut st = RoundingState { nu: vec![5.0, 1.0, 1.0, 1.0], hardened: 0 };
        assert_eq!(st.harden(25.0).unwrap(), vec![1]);
        assert_eq!(st.harden(50.0).unwrap(), vec![2]);
        let mut hi = RoundingState { nu: vec![5.0, 1.0, 1.0, 5.0], hardened: 0 };
        assert_eq!(hi.harden_ordered(50.0, HardenOrder::HighestScore).unwrap(), vec![0, 3]);
        assert_eq!(hi.harden_ordered(75.0, HardenOrder::HighestScore).unwrap(), vec![1]);
    }

    #[test]
    fn soft_forward_saturated_matches_round_up() {
        let theta = Tensor::new([1, 4], vec![0.2, 1.4, -0.6, 0.9]).unwrap();
        let p = params(0.5, 2, 4);
        let nu = vec![f32::INFINITY; 4];
        let out = soft_forward(&theta, &nu, &p, Some(&[0.0]), &w2()).unwrap();
        let want: Vec<f32> = theta
            .data()
            .iter()
            .map(|&w| {
                let c = ((w / 0.5).floor() + 1.0 + 2.0).clamp(0.0, 3.0);
                0.5 * (c - 2.0)
            })
            .collect();
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn soft_forward_gradient_at_single_weight() {
        let theta = Tensor::new([1, 1], vec![0.7]).unwrap();
        let p = params(1.0, 0, 1);
        let sq = SoftQuantizer::new(&theta, &p, &w2()).unwrap();
        let mut g = Graph::new();
        let nu = g.param(Tensor::vector(vec![logit(0.7)]));
        let out = sq.forward(&mut g, nu, None).unwrap();
        let l = g.sum(out);
        g.backward(l).unwrap();
        assert!((g.grad(nu).unwrap()[0] - 0.21).abs() < 1e-6);
    }

    #[test]
    fn merge_examples() {
        let p = params(1.0, 0, 1);
        let up = RoundingState { nu: vec![f32::INFINITY], hardened: 1 };
        let m = finalize_merge(&[0.7], &up, &p, &w2()).unwrap();
        assert!((m[0] - 1.2).abs() < 1e-6);
        assert_eq!(quantize_with_params(&m, &p, &w2()), vec![1]);
        let down = RoundingState { nu: vec![f32::NEG_INFINITY], hardened: 1 };
        let m = finalize_merge(&[0.7], &down, &p, &w2()).unwrap();
        assert!((m[0] - 0.2).abs() < 1e-6);
        assert_eq!(quantize_with_params(&m, &p, &w2()), vec![0]);

        let soft = RoundingState { nu: vec![0.3], hardened: 0 };
        assert!(matches!(finalize_merge(&[0.7], &soft, &p, &w2()), Err(Error::State(_))));
    }

    #[test]
    fn merge_handles_on_grid_weights() {
        // θ/s exactly integer: the shifted value sits on a rounding tie.
        let p = params(1.0, 2, 4);
        let theta = [0.0, -1.0, 1.0, -2.0];
        for nu in [f32::INFINITY, f32::NEG_INFINITY] {
            let st = RoundingState { nu: vec![nu; 4], hardened: 4 };
            let merged = finalize_merge(&theta, &st, &p, &w2()).unwrap();
            assert_eq!(
                quantize_with_params(&merged, &p, &w2()),
                hardened_codes(&theta, &st.nu, &p, &w2()).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn merge_requantizes_to_chosen_codes(
            theta in prop::collection::vec(-3.0f32..3.0, 16),
            signs in prop::collection::vec(any::<bool>(), 16),
            s in 0.01f32..1.5,
            z in 0u8..4,
        ) {
            let spec = w2();
            let p = QuantParams { scales: vec![s; 4], zeros: vec![z; 4], group_size: 4 };
            let nu: Vec<f32> = signs.iter().map(|&b| if b { f32::INFINITY } else { f32::NEG_INFINITY }).collect();
            let st = RoundingState { nu, hardened: 16 };
            let merged = finalize_merge(&theta, &st, &p, &spec).unwrap();
            prop_assert_eq!(
                quantize_with_params(&merged, &p, &spec),
                hardened_codes(&theta, &st.nu, &p, &spec).unwrap()
            );
        }

        #[test]
        fn init_identity_for_interior_codes(
            theta in prop::collection::vec(-1.0f32..1.0, 8),
            s in 0.05f32..0.5,
        ) {
            let spec = QuantSpec::per_channel(8).unwrap();
            let p = QuantParams { scales: vec![s], zeros: vec![128], group_size: 8 };
            let t = Tensor::new([1, 8], theta.clone()).unwrap();
            let st = RoundingState::init(&theta, &p);
            let out = soft_forward(&t, &st.nu, &p, Some(&[0.0]), &spec).unwrap();
            for (a, b) in out.data().iter().zip(&theta) {
                prop_assert!((a - b).abs() <= s * 2e-4 + 1e-6);
            }
        }
    }
}
