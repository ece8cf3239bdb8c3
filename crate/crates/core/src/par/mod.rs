//! Progressive adaptive rounding state and update rules, plus the learnable
//! dequantization scale factor.

pub mod adam;
pub mod rounding;
pub mod schedule;

pub use adam::{Adam, AdamConfig};
pub use rounding::{
    finalize_merge, hard_alpha, HardenOrder, hardened_codes, hs_score, logit, soft_forward, target_count,
    RoundingState, SoftQuantizer, FRAC_GUARD,
};
pub use schedule::{ParSchedule, ScheduleKind};

use crate::quant::dst_factor;

/// Default decoupled weight decay applied to the scale logits.
pub const DST_WEIGHT_DECAY: f32 = 1e-4;

/// Per-group dequantization scale logits `v`; the effective factor is
/// `2σ(v) ∈ (0, 2)`, exactly 1 at `v = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DstState {
    pub v: Vec<f32>,
    pub weight_decay: f32,
}

impl DstState {
    pub fn new(groups: usize) -> Self {
        Self { v: vec![0.0; groups], weight_decay: DST_WEIGHT_DECAY }
    }

    pub fn factors(&self) -> Vec<f32> {
        self.v.iter().map(|&v| dst_factor(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_dst_is_identity() {
        let d = DstState::new(3);
        assert_eq!(d.factors(), vec![1.0; 3]);
        assert_eq!(d.weight_decay, 1e-4);
    }
}
