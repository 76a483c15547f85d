use crate::numerics::{ParamSet, Tensor};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Decay multiplies each decaying weight by `1 − lr·wd` before the moment
/// update, independently of the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` belongs to the i-th parameter.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &[Tensor<f32>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (p, g) in params.iter().zip(grads) {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
                *w = ((*w as f64) * shrink - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32, decay: bool) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(vec![value]), decay);
        p
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut p = single(1.5, true);
        let mut opt = AdamW::new(&p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::from_vec(vec![0.0])], 0.1, 0.0).unwrap();
        }
        assert_eq!(p.get(0).value.data(), &[1.5]);
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let mut p = single(0.75, true);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[Tensor::from_vec(vec![3.0])], 0.0, 0.0).unwrap();
        assert_eq!(p.get(0).value.data(), &[0.75]);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = single(2.0, true);
        let mut opt = AdamW::new(&p);
        let (lr, wd) = (0.01, 0.14);
        let mut expected = 2.0f64;
        for _ in 0..10 {
            opt.step(&mut p, &[Tensor::from_vec(vec![0.0])], lr, wd).unwrap();
            expected *= 1.0 - lr * wd;
        }
        assert!((p.get(0).value.data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        // With g constant the bias-corrected moments are exactly g and g², so
        // every update equals lr·g/(|g| + ε).
        let mut p = single(0.0, false);
        let mut opt = AdamW::new(&p);
        let (lr, g) = (1e-3, -0.37f32);
        let mut prev = 0.0f64;
        for _ in 0..50 {
            opt.step(&mut p, &[Tensor::from_vec(vec![g])], lr, 0.0).unwrap();
            let now = p.get(0).value.data()[0] as f64;
            let expected = lr * (g as f64).signum() * (g as f64).abs() / ((g as f64).abs() + EPSILON);
            assert!(((prev - now) - expected).abs() < 1e-7, "{}", prev - now);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = single(0.0, false);
        let mut opt = AdamW::new(&p);
        let bad = Tensor::from_parts(vec![1], vec![f32::NAN]);
        match opt.step(&mut p, &[bad], 0.1, 0.0) {
            Err(TrainError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::from_vec(vec![3.0f32, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].l2_norm() - 1.0).abs() < 1e-6);
    }
}
