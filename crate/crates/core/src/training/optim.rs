use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{invalid, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;

/// `base_lr · (1 − step/max_steps)^power`.
pub fn poly_lr(base_lr: f64, step: usize, max_steps: usize, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(invalid("poly_lr needs max_steps > 0"));
    }
    if step > max_steps {
        return Err(invalid(format!("step {step} exceeds max_steps {max_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / max_steps as f64).powf(power))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v ← μ·v + g + λ·w`, `w ← w − lr·v`. Frozen parameters are
/// skipped and keep no velocity.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new() }
    }

    pub fn step(&mut self, params: &mut dyn Parameterized<T>, prefix: &str, lr: f64) {
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        let lr = T::lit(lr);
        params.visit_mut(prefix, &mut |name, p| {
            if p.frozen {
                return;
            }
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut *v).and(&p.grad).and(&p.value).for_each(|v, &g, &w| {
                *v = mu * *v + g + wd * w;
            });
            p.value.scaled_add(-lr, v);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.0025, 0, 100, 0.9).unwrap(), 0.0025);
        assert_eq!(poly_lr(0.0025, 100, 100, 0.9).unwrap(), 0.0);
        let half = poly_lr(0.0025, 50, 100, 0.9).unwrap();
        assert!((half - 0.0025 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(0.1, 101, 100, 0.9).is_err());
    }

    struct One(Param<f64>);

    impl Parameterized<f64> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(prefix, &self.0)
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(prefix, &mut self.0)
        }
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut p = One(Param::new(ndarray::arr1(&[1.0]).into_dyn()));
        let mut opt = Sgd::new(0.9, 0.1);
        p.0.grad.fill(2.0);
        opt.step(&mut p, "w", 0.5);
        // v = 2 + 0.1 = 2.1, w = 1 - 1.05
        assert!((p.0.value[[0]] + 0.05).abs() < 1e-12);
        opt.step(&mut p, "w", 0.5);
        let v2 = 0.9 * 2.1 + 2.0 + 0.1 * -0.05;
        assert!((p.0.value[[0]] - (-0.05 - 0.5 * v2)).abs() < 1e-12);
    }

    #[test]
    fn frozen_is_untouched() {
        let mut p = One(Param::new(ndarray::arr1(&[1.0]).into_dyn()));
        p.0.frozen = true;
        p.0.grad.fill(3.0);
        Sgd::new(0.9, 1e-4).step(&mut p, "w", 1.0);
        assert_eq!(p.0.value[[0]], 1.0);
    }
}
