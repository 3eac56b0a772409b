use serde::{Deserialize, Serialize};

use crate::error::{DneError, Result};

/// `lr(epoch) = base * factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn constant(lr: f64) -> Self {
        StepDecay {
            base: lr,
            factor: 1.0,
            every: 1,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

/// In place `p -= lr * g` over matching tensor lists.
pub fn sgd_step(params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(DneError::shape("sgd tensors", params.len(), grads.len()));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if p.len() != g.len() {
            return Err(DneError::shape("sgd tensor", p.len(), g.len()));
        }
        p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_or_rate_is_noop() {
        let mut p = vec![1.0, -2.0];
        sgd_step(vec![&mut p], vec![&[0.0, 0.0]], 0.3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        sgd_step(vec![&mut p], vec![&[5.0, 7.0]], 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn decay_schedule() {
        let s = StepDecay {
            base: 1.0,
            factor: 0.5,
            every: 10,
        };
        assert_eq!(s.rate(0), 1.0);
        assert_eq!(s.rate(9), 1.0);
        assert_eq!(s.rate(10), 0.5);
        assert_eq!(s.rate(25), 0.25);
    }

    #[test]
    fn quadratic_bowl_decreases() {
        // f(x) = 0.5 x^T A x with A = diag(1, 4, 9); stable for lr < 2/9.
        let a = [1.0, 4.0, 9.0];
        let mut x = vec![1.0, -1.0, 0.5];
        let f = |x: &[f64]| 0.5 * x.iter().zip(a).map(|(x, a)| a * x * x).sum::<f64>();
        let mut prev = f(&x);
        for _ in 0..100 {
            let g: Vec<f64> = x.iter().zip(a).map(|(x, a)| a * x).collect();
            sgd_step(vec![&mut x], vec![&g], 0.2).unwrap();
            let now = f(&x);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn mismatched_lists() {
        let mut p = vec![0.0; 2];
        assert!(sgd_step(vec![&mut p], vec![], 0.1).is_err());
        assert!(sgd_step(vec![&mut p], vec![&[1.0]], 0.1).is_err());
    }
}
