use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSProp with momentum on the preconditioned gradient and L2 weight decay
/// folded into the raw gradient:
///
/// ```text
/// g' = g + wd·θ
/// v  = α·v + (1-α)·g'²
/// m  = μ·m + g' / (√v + eps)
/// θ  = θ - lr·m
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rmsprop {
    pub lr: f64,
    pub alpha: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// Per-parameter square-average and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState<T = f32> {
    pub square_avg: Vec<Tensor<T>>,
    pub momentum: Vec<Tensor<T>>,
}

impl<T: Scalar> RmspropState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            square_avg: zeros.clone(),
            momentum: zeros,
        }
    }
}

impl Rmsprop {
    pub fn step<T: Scalar>(&self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut RmspropState<T>) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.square_avg.len() {
            return Err(Error::contract(format!(
                "rmsprop: {} parameters, {} gradients, {} state buffers",
                params.len(),
                grads.len(),
                state.square_avg.len()
            )));
        }
        let (lr, alpha, mu, wd, eps) = (
            T::lit(self.lr),
            T::lit(self.alpha),
            T::lit(self.momentum),
            T::lit(self.weight_decay),
            T::lit(self.eps),
        );
        let one = T::one();
        for (i, (theta, g)) in params.iter_mut().zip(grads).enumerate() {
            let (v, m) = (&mut state.square_avg[i], &mut state.momentum[i]);
            if theta.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::shape("rmsprop_step", theta.shape(), g.shape()));
            }
            let it = theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut().zip(m.data_mut()));
            for ((th, &gi), (vi, mi)) in it {
                let gd = gi + wd * *th;
                *vi = alpha * *vi + (one - alpha) * gd * gd;
                *mi = mu * *mi + gd / (vi.sqrt() + eps);
                *th = *th - lr * *mi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, wd: f64) -> Rmsprop {
        Rmsprop {
            lr,
            alpha: 0.99,
            momentum: 0.9,
            weight_decay: wd,
            eps: RMSPROP_EPS,
        }
    }

    #[test]
    fn zero_gradient_at_zero_is_fixed_point() {
        let mut p = Tensor::<f32>::zeros([2, 2]);
        let mut st = RmspropState::new([&p]);
        for _ in 0..5 {
            opt(0.1, 1e-4).step(&mut [&mut p], &[Tensor::zeros([2, 2])], &mut st).unwrap();
        }
        assert_eq!(p, Tensor::zeros([2, 2]));
    }

    #[test]
    fn single_step_recurrence() {
        let mut p = Tensor::<f32>::zeros([1, 1]);
        let mut st = RmspropState::new([&p]);
        opt(0.1, 0.0).step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert!((st.square_avg[0].data()[0] - 0.01).abs() < 1e-6);
        assert!((st.momentum[0].data()[0] - 10.0).abs() < 1e-5);
        assert!((p.data()[0] + 1.0).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn nonzero_params_with_zero_grad_and_no_decay_stay_put() {
        let mut p = Tensor::<f32>::row(vec![0.5, -2.0]);
        let before = p.clone();
        let mut st = RmspropState::new([&p]);
        opt(0.01, 0.0).step(&mut [&mut p], &[Tensor::zeros([1, 2])], &mut st).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn twins_stay_identical() {
        let mut a = Tensor::<f32>::row(vec![0.3, -0.1, 0.7]);
        let mut b = a.clone();
        let mut st = RmspropState::new([&a, &b]);
        for step in 0..20 {
            let g = Tensor::row(vec![step as f32 * 0.1, -1.0, 0.25]);
            opt(0.01, 1e-4).step(&mut [&mut a, &mut b], &[g.clone(), g], &mut st).unwrap();
        }
        assert!(a.bit_eq(&b));
        assert!(st.square_avg.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f32>::zeros([2, 2]);
        let mut st = RmspropState::new([&p]);
        assert!(opt(0.1, 0.0).step(&mut [&mut p], &[Tensor::zeros([1, 4])], &mut st).is_err());
    }
}
