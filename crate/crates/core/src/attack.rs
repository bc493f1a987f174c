//! Coordinated measurement attacks: signal injection and classification of
//! whether the trusted remainder still supports standard estimation.
//!
//! Detection and localization are assumed done elsewhere; the attacked index
//! set is ground-truth input here.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::lti::{observability_rank, LtiSystem};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attacked index {index} out of range (m = {m})")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("attack window [{0}, {1}] is empty or reversed")]
    BadWindow(f64, f64),
    #[error("non-finite signal parameter")]
    NonFiniteParameter,
    #[error("{got} signals for {expected} attacked indices")]
    SignalCountMismatch { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Injected signal shape for one attacked measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AttackSignal {
    /// Constant offset.
    Bias { value: f64 },
    /// `rate * (t - t_start)` inside the window.
    Ramp { rate: f64 },
    /// `amplitude * sin(2π f (t - t_start) + phase)`.
    Sinusoid {
        amplitude: f64,
        frequency_hz: f64,
        phase: f64,
    },
}

impl AttackSignal {
    fn value(&self, t_rel: f64) -> f64 {
        match *self {
            AttackSignal::Bias { value } => value,
            AttackSignal::Ramp { rate } => rate * t_rel,
            AttackSignal::Sinusoid {
                amplitude,
                frequency_hz,
                phase,
            } => amplitude * (2.0 * std::f64::consts::PI * frequency_hz * t_rel + phase).sin(),
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            AttackSignal::Bias { value } => value.is_finite(),
            AttackSignal::Ramp { rate } => rate.is_finite(),
            AttackSignal::Sinusoid {
                amplitude,
                frequency_hz,
                phase,
            } => amplitude.is_finite() && frequency_hz.is_finite() && phase.is_finite(),
        }
    }
}

/// A coordinated attack: which outputs are corrupted, by what signals, and
/// when. `signals[k]` drives `attacked[k]`.
#[derive(Debug, Clone, Serialize)]
pub struct AttackScenario {
    pub attacked: Vec<usize>,
    pub signals: Vec<AttackSignal>,
    /// `[t_start, t_end)` in seconds.
    pub window: (f64, f64),
}

impl AttackScenario {
    pub fn new(
        attacked: Vec<usize>,
        signals: Vec<AttackSignal>,
        window: (f64, f64),
        m: usize,
    ) -> Result<Self> {
        if let Some(&index) = attacked.iter().find(|&&i| i >= m) {
            return Err(AttackError::IndexOutOfRange { index, m });
        }
        if signals.len() != attacked.len() {
            return Err(AttackError::SignalCountMismatch {
                got: signals.len(),
                expected: attacked.len(),
            });
        }
        if !(window.0 < window.1) || !window.0.is_finite() || !window.1.is_finite() {
            return Err(AttackError::BadWindow(window.0, window.1));
        }
        if signals.iter().any(|s| !s.is_finite()) {
            return Err(AttackError::NonFiniteParameter);
        }
        Ok(AttackScenario {
            attacked,
            signals,
            window,
        })
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.window.0 && t < self.window.1
    }

    /// Additive corruption per output at time `t` (zero off the attacked set
    /// and outside the window).
    pub fn corruption(&self, m: usize, t: f64) -> DVector<f64> {
        let mut a = DVector::zeros(m);
        if !self.active(t) {
            return a;
        }
        let t_rel = t - self.window.0;
        for (k, &i) in self.attacked.iter().enumerate() {
            a[i] += self.signals[k].value(t_rel);
        }
        a
    }
}

/// Corrupt a measurement vector: `ỹ_i = y_i + a_i(t)` on attacked indices
/// inside the window, identity elsewhere.
pub fn inject(y: &DVector<f64>, scenario: &AttackScenario, t: f64) -> DVector<f64> {
    y + scenario.corruption(y.len(), t)
}

/// Outcome of removing the attacked rows from the sensor fleet.
#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    /// `(𝒜, C₁)` passes the PBH rank test: standard estimation suffices.
    Observable,
    /// Trusted rows alone lose observability; surrogate augmentation needed.
    RequiresAugmentation,
}

/// Split `C` into trusted/attacked rows and test whether the trusted block
/// `C₁` keeps `(𝒜, C₁)` observable. Returns the classification together with
/// `C₁` and the trusted row indices (ascending).
pub fn classify(
    sys: &LtiSystem,
    c: &DMatrix<f64>,
    attacked: &[usize],
) -> Result<(Classification, DMatrix<f64>, Vec<usize>)> {
    let m = c.nrows();
    if let Some(&index) = attacked.iter().find(|&&i| i >= m) {
        return Err(AttackError::IndexOutOfRange { index, m });
    }
    let mut is_attacked = vec![false; m];
    for &i in attacked {
        is_attacked[i] = true;
    }
    let trusted: Vec<usize> = (0..m).filter(|&i| !is_attacked[i]).collect();
    let mut c1 = DMatrix::zeros(trusted.len(), c.ncols());
    for (r, &i) in trusted.iter().enumerate() {
        c1.set_row(r, &c.row(i));
    }
    let report = observability_rank(sys.a(), &c1, 1e-8);
    let class = if report.is_observable {
        Classification::Observable
    } else {
        Classification::RequiresAugmentation
    };
    Ok((class, c1, trusted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn scenario(attacked: Vec<usize>, signals: Vec<AttackSignal>, m: usize) -> AttackScenario {
        AttackScenario::new(attacked, signals, (1.0, 2.0), m).unwrap()
    }

    #[test]
    fn inject_identity_outside_window() {
        let s = scenario(vec![0], vec![AttackSignal::Bias { value: 0.5 }], 2);
        let y = DVector::from_row_slice(&[1.0, -1.0]);
        assert_eq!(inject(&y, &s, 0.5), y);
        assert_eq!(inject(&y, &s, 2.0), y); // window is half-open
    }

    #[test]
    fn inject_bias_inside_window() {
        let s = scenario(vec![1], vec![AttackSignal::Bias { value: 0.5 }], 3);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let yt = inject(&y, &s, 1.5);
        assert_eq!(yt[0], 1.0);
        assert_eq!(yt[1], 2.5);
        assert_eq!(yt[2], 3.0);
    }

    #[test]
    fn ramp_grows_from_window_start() {
        let s = scenario(vec![0], vec![AttackSignal::Ramp { rate: 2.0 }], 1);
        let y = DVector::from_row_slice(&[0.0]);
        assert_eq!(inject(&y, &s, 1.0)[0], 0.0);
        assert!((inject(&y, &s, 1.25)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sinusoid_support_is_exactly_the_attacked_set() {
        let m = 16;
        let attacked: Vec<usize> = (0..10).map(|k| k + 3).collect();
        let signals: Vec<AttackSignal> = (0..10)
            .map(|k| AttackSignal::Sinusoid {
                amplitude: 0.1 + 0.05 * k as f64,
                frequency_hz: 0.5,
                phase: 0.3 * k as f64,
            })
            .collect();
        let s = scenario(attacked.clone(), signals, m);
        let y = DVector::from_fn(m, |i, _| i as f64 * 0.1);
        let diff = inject(&y, &s, 1.37) - &y;
        for i in 0..m {
            if attacked.contains(&i) {
                assert!(diff[i] != 0.0, "index {i} should be corrupted");
            } else {
                assert_eq!(diff[i], 0.0, "index {i} must be untouched");
            }
        }
    }

    #[test]
    fn scenario_validation() {
        assert!(matches!(
            AttackScenario::new(vec![5], vec![AttackSignal::Bias { value: 1.0 }], (0.0, 1.0), 3),
            Err(AttackError::IndexOutOfRange { index: 5, m: 3 })
        ));
        assert!(matches!(
            AttackScenario::new(vec![0], vec![AttackSignal::Bias { value: 1.0 }], (2.0, 1.0), 3),
            Err(AttackError::BadWindow(..))
        ));
        assert!(matches!(
            AttackScenario::new(vec![0], vec![], (0.0, 1.0), 3),
            Err(AttackError::SignalCountMismatch { .. })
        ));
        assert!(matches!(
            AttackScenario::new(
                vec![0],
                vec![AttackSignal::Bias { value: f64::NAN }],
                (0.0, 1.0),
                3
            ),
            Err(AttackError::NonFiniteParameter)
        ));
    }

    fn two_state_system() -> LtiSystem {
        // stable diagonal, each output sees one state
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let c = DMatrix::identity(2, 2);
        LtiSystem::new(a, c).unwrap()
    }

    #[test]
    fn classify_no_attack_is_observable() {
        let sys = two_state_system();
        let (class, c1, trusted) = classify(&sys, &sys.c().clone(), &[]).unwrap();
        assert_eq!(class, Classification::Observable);
        assert_eq!(c1.nrows(), 2);
        assert_eq!(trusted, vec![0, 1]);
    }

    #[test]
    fn classify_all_attacked_requires_augmentation() {
        let sys = two_state_system();
        let (class, c1, trusted) = classify(&sys, &sys.c().clone(), &[0, 1]).unwrap();
        assert_eq!(class, Classification::RequiresAugmentation);
        assert_eq!(c1.nrows(), 0);
        assert!(trusted.is_empty());
    }

    #[test]
    fn classify_partial_attack_keeps_detectability_when_rows_overlap() {
        // the surviving row excites both eigenvectors: losing the other row
        // keeps observability
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, -1.0]);
        let sys = LtiSystem::new(a, c).unwrap();
        let (class, ..) = classify(&sys, &sys.c().clone(), &[1]).unwrap();
        assert_eq!(class, Classification::Observable);
    }
}
