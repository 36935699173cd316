//! Per-epoch schedules. Temperature follows a linear anneal (large early so
//! every kernel receives gradient, settling to its final value); learning
//! rate follows either a single cosine cycle to zero or milestone steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TauSchedule {
    Constant { tau: f64 },
    /// Linear from `start` at epoch 0 to exactly `end` at epoch `epochs`,
    /// flat afterwards.
    Anneal { start: f64, end: f64, epochs: usize },
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule::Anneal {
            start: 30.0,
            end: 1.0,
            epochs: 10,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "temperature {what} must be positive and finite, got {v}"
                )));
            }
            Ok(())
        };
        match *self {
            TauSchedule::Constant { tau } => positive(tau, "value"),
            TauSchedule::Anneal { start, end, epochs } => {
                positive(start, "start")?;
                positive(end, "end")?;
                if epochs == 0 {
                    return Err(Error::Config("anneal span must be at least one epoch".into()));
                }
                if start < end {
                    return Err(Error::Config(format!(
                        "anneal must not increase temperature ({start} -> {end})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn tau_at(&self, epoch: usize) -> f64 {
        match *self {
            TauSchedule::Constant { tau } => tau,
            TauSchedule::Anneal { start, end, epochs } => {
                if epoch >= epochs {
                    end
                } else {
                    start + (end - start) * epoch as f64 / epochs as f64
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// lr0 * 0.5 * (1 + cos(pi * e / E)): one half-cosine arriving at zero.
    Cosine,
    /// Multiply by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Cosine => Ok(()),
            LrSchedule::Step { milestones, factor } => {
                if !factor.is_finite() || *factor <= 0.0 {
                    return Err(Error::Config(format!(
                        "step factor must be positive and finite, got {factor}"
                    )));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "milestones must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn lr_at(&self, lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Cosine => {
                let t = epoch as f64 / total_epochs.max(1) as f64;
                lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                lr0 * factor.powi(passed as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_hits_endpoints_exactly() {
        let s = TauSchedule::default();
        assert_eq!(s.tau_at(0), 30.0);
        assert_eq!(s.tau_at(10), 1.0);
        assert_eq!(s.tau_at(5), 15.5);
        assert_eq!(s.tau_at(200), 1.0);
    }

    #[test]
    fn schedules_never_increase() {
        for s in [
            TauSchedule::default(),
            TauSchedule::Constant { tau: 4.0 },
            TauSchedule::Anneal {
                start: 12.0,
                end: 3.0,
                epochs: 7,
            },
        ] {
            s.validate().unwrap();
            let mut prev = f64::INFINITY;
            for e in 0..50 {
                let t = s.tau_at(e);
                assert!(t <= prev && t > 0.0);
                prev = t;
            }
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.lr_at(0.4, 0, 100), 0.4);
        assert!(s.lr_at(0.4, 100, 100).abs() < 1e-16);
        assert!((s.lr_at(0.4, 50, 100) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn step_drops_at_each_milestone() {
        let s = LrSchedule::Step {
            milestones: vec![30, 60, 90],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0.1, 0, 120), 0.1);
        assert!((s.lr_at(0.1, 30, 120) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(0.1, 65, 120) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(0.1, 95, 120) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_are_refused() {
        assert!(TauSchedule::Constant { tau: 0.0 }.validate().is_err());
        assert!(TauSchedule::Anneal {
            start: 1.0,
            end: 30.0,
            epochs: 10
        }
        .validate()
        .is_err());
        assert!(TauSchedule::Anneal {
            start: 30.0,
            end: 1.0,
            epochs: 0
        }
        .validate()
        .is_err());
        assert!(LrSchedule::Step {
            milestones: vec![10, 10],
            factor: 0.1
        }
        .validate()
        .is_err());
        assert!(LrSchedule::Step {
            milestones: vec![10],
            factor: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn schedule_json_round_trips() {
        let s: TauSchedule =
            serde_json::from_str(r#"{"kind": "anneal", "start": 30, "end": 1, "epochs": 10}"#)
                .unwrap();
        assert_eq!(s, TauSchedule::default());
        let l: LrSchedule = serde_json::from_str(r#"{"kind": "cosine"}"#).unwrap();
        assert_eq!(l, LrSchedule::Cosine);
        let l = LrSchedule::Step {
            milestones: vec![3, 7],
            factor: 0.5,
        };
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<LrSchedule>(&s).unwrap(), l);
    }
}
