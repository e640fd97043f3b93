use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-6;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Classical (heavy-ball) momentum:
///
/// ```text
/// v <- momentum * v + g
/// p <- p - learning_rate * v
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    /// One buffer per parameter tensor; empty until the first step.
    #[serde(skip)]
    pub velocity: Vec<Vec<f64>>,
}

impl Default for OptimState {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            velocity: Vec::new(),
        }
    }
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }
}

pub fn sgd_momentum_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            format!("{} gradient buffers", params.len()),
            format!("{} buffers", grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(
                format!("buffer {i} with {} elements", p.len()),
                format!("{} gradient elements", g.len()),
            ));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    } else if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
    {
        return Err(Error::shape(
            "velocity buffers mirroring the parameters",
            "buffers of a different layout",
        ));
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut p = vec![1.0, -2.0, 0.3];
        let g = [0.5, 0.25, -4.0];
        let expected: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - 0.1 * b).collect();
        let mut state = OptimState::new(0.1, 0.0).unwrap();
        sgd_momentum_step(&mut [p.as_mut_slice()], &[&g], &mut state).unwrap();
        assert_eq!(p, expected);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![1.5, 2.5];
        let mut state = OptimState::new(0.3, 0.9).unwrap();
        for _ in 0..5 {
            sgd_momentum_step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]], &mut state).unwrap();
        }
        assert_eq!(p, vec![1.5, 2.5]);
    }

    #[test]
    fn two_steps_unrolled() {
        let g = 2.0;
        let mut p = vec![0.0];
        let mut state = OptimState::new(1.0, 0.9).unwrap();
        sgd_momentum_step(&mut [p.as_mut_slice()], &[&[g]], &mut state).unwrap();
        sgd_momentum_step(&mut [p.as_mut_slice()], &[&[g]], &mut state).unwrap();
        assert!((p[0] + g * (1.0 + 1.9)).abs() < 1e-15);
        assert!((state.velocity[0][0] - 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut state = OptimState::default();
        assert!(matches!(
            sgd_momentum_step(&mut [p.as_mut_slice()], &[&[1.0, 2.0]], &mut state),
            Err(Error::Shape { .. })
        ));
        assert!(OptimState::new(0.1, 1.0).is_err());
    }
}
