//! Hardening schedules: the cumulative percentage of rounding variables
//! that are hard after each outer iteration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Soft rate `exp(−t·k/K)`.
    Exponential { temperature: f64 },
    Handcrafted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParSchedule {
    pub kind: ScheduleKind,
    /// Hard percentage after iteration `k = 1..=K`. A final forced step to
    /// 100% always follows the last entry.
    pub percents: Vec<f64>,
}

impl ParSchedule {
    /// `P_k = 100 · (1 − exp(−t·k/K))` for `k = 1..=K`.
    pub fn exponential(temperature: f64, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(arg_err!("schedule needs at least one iteration"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(arg_err!("temperature must be positive, got {temperature}"));
        }
        let k_total = iterations as f64;
        let percents = (1..=iterations)
            .map(|k| 100.0 * (1.0 - (-temperature * k as f64 / k_total).exp()))
            .collect();
        Ok(Self { kind: ScheduleKind::Exponential { temperature }, percents })
    }

    /// User-supplied cumulative percentages, which must be non-decreasing
    /// and lie in `[0, 100]`. An empty list is the zero-iteration schedule.
    pub fn handcrafted(percents: Vec<f64>) -> Result<Self> {
        for (i, p) in percents.iter().enumerate() {
            if !(0.0..=100.0).contains(p) {
                return Err(arg_err!("schedule entry {i} = {p} outside [0, 100]"));
            }
        }
        if let Some(i) = percents.windows(2).position(|w| w[1] < w[0]) {
            return Err(arg_err!(
                "schedule must be non-decreasing: entry {} = {} follows {}",
                i + 1,
                percents[i + 1],
                percents[i]
            ));
        }
        Ok(Self { kind: ScheduleKind::Handcrafted, percents })
    }

    /// Checked constructor taking the iteration count explicitly.
    pub fn handcrafted_with_k(percents: Vec<f64>, iterations: usize) -> Result<Self> {
        if percents.len() != iterations {
            return Err(arg_err!(
                "schedule lists {} percentages for K = {iterations}",
                percents.len()
            ));
        }
        Self::handcrafted(percents)
    }

    pub fn iterations(&self) -> usize {
        self.percents.len()
    }

    pub fn default_exponential() -> Self {
        Self::exponential(4.0, 20).expect("valid defaults")
    }
}

impl fmt::Display for ParSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Exponential { temperature } => {
                write!(f, "exp:t={temperature},K={}", self.percents.len())
            }
            ScheduleKind::Handcrafted => {
                let items: Vec<String> = self.percents.iter().map(|p| p.to_string()).collect();
                write!(f, "list:{}", items.join(","))
            }
        }
    }
}

impl FromStr for ParSchedule {
    type Err = Error;

    /// `exp:t=4,K=20` or `list:10,30,50,70,85,95,100`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("exp:") {
            let (mut t, mut k) = (None, None);
            for part in rest.split(',') {
                let (key, val) = part
                    .split_once('=')
                    .ok_or_else(|| arg_err!("expected key=value in schedule, got {part:?}"))?;
                match key.trim() {
                    "t" => t = Some(val.trim().parse::<f64>().map_err(|e| arg_err!("bad t: {e}"))?),
                    "K" | "k" => {
                        k = Some(val.trim().parse::<usize>().map_err(|e| arg_err!("bad K: {e}"))?)
                    }
                    other => return Err(arg_err!("unknown schedule key {other:?}")),
                }
            }
            Self::exponential(t.unwrap_or(4.0), k.unwrap_or(20))
        } else if let Some(rest) = s.strip_prefix("list:") {
            let percents = if rest.trim().is_empty() {
                Vec::new()
            } else {
                rest.split(',')
                    .map(|p| p.trim().parse::<f64>().map_err(|e| arg_err!("bad percentage {p:?}: {e}")))
                    .collect::<Result<Vec<_>>>()?
            };
            Self::handcrafted(percents)
        } else {
            Err(arg_err!("schedule must start with \"exp:\" or \"list:\", got {s:?}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_values() {
        let s = ParSchedule::exponential(4.0, 20).unwrap();
        assert_eq!(s.iterations(), 20);
        assert!((s.percents[0] - 18.126_924_692_201_8).abs() < 1e-9);
        assert!((s.percents[19] - 98.168_436_111_126_6).abs() < 1e-9);
        assert!(s.percents.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn handcrafted_validation() {
        let s = ParSchedule::handcrafted_with_k(vec![10.0, 50.0, 100.0], 3).unwrap();
        assert_eq!(s.percents, vec![10.0, 50.0, 100.0]);
        assert!(ParSchedule::handcrafted(vec![10.0, 5.0]).is_err());
        assert!(ParSchedule::handcrafted(vec![10.0, 101.0]).is_err());
        assert!(ParSchedule::handcrafted_with_k(vec![10.0], 2).is_err());
        assert!(ParSchedule::exponential(0.0, 20).is_err());
        assert!(ParSchedule::exponential(4.0, 0).is_err());
    }

    #[test]
    fn parse_and_display() {
        let s: ParSchedule = "exp:t=4,K=20".parse().unwrap();
        assert_eq!(s, ParSchedule::default_exponential());
        assert_eq!(s.to_string(), "exp:t=4,K=20");
        let l: ParSchedule = "list:10,30,50,70,85,95,100".parse().unwrap();
        assert_eq!(l.iterations(), 7);
        assert_eq!(l.to_string(), "list:10,30,50,70,85,95,100");
        assert_eq!(l.to_string().parse::<ParSchedule>().unwrap(), l);
        assert!("list:".parse::<ParSchedule>().unwrap().percents.is_empty());
        assert!("cosine:t=2".parse::<ParSchedule>().is_err());
        assert!("list:50,20".parse::<ParSchedule>().is_err());
        assert!("exp:t=4,q=2".parse::<ParSchedule>().is_err());
    }
}
