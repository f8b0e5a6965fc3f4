//! Adam.

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn adam(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("gradient {:?} for {name} {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one();
        let mut opt = OptimizerState::adam(&p, 0.01);
        opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, one());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // At t = 1, m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
        let mut p = one();
        let mut opt = OptimizerState::adam(&p, 0.01);
        let g = [3.0, -0.2, 1e-3];
        opt.step(&mut p, &[Tensor::vector(g.to_vec()).unwrap()]).unwrap();
        for ((after, before), gi) in p.flatten().iter().zip(one().flatten()).zip(g) {
            let expect = 0.01 * gi / (gi.abs() + 1e-8);
            assert!((before - after - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one();
        let mut opt = OptimizerState::adam(&p, 0.01);
        let err = opt.step(&mut p, &[Tensor::vector(vec![0.0, f64::NAN, 0.0]).unwrap()]).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains(" w")), "{err}");
        assert_eq!(p, one());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn trajectories_repeat() {
        let run = || {
            let mut p = one();
            let mut opt = OptimizerState::adam(&p, 0.05);
            for i in 0..20 {
                let g: Vec<f64> = p.flatten().iter().map(|x| 2.0 * x + i as f64 * 0.01).collect();
                opt.step(&mut p, &[Tensor::vector(g).unwrap()]).unwrap();
            }
            p.flatten()
        };
        assert_eq!(run(), run());
    }
}
