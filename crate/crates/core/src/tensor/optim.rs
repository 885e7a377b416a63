use super::{Parameter, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum SGD: `v <- mu v + g + lambda w`, `w <- w - lr v`, then the
/// gradients are zeroed. Decay applies only to parameters that opt in.
pub fn sgd_step<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, cfg: SgdConfig) {
    let lr = T::from_f64(cfg.lr);
    let mu = T::from_f64(cfg.momentum);
    for p in params {
        if p.frozen {
            p.zero_grad();
            continue;
        }
        let decay = if p.weight_decay {
            T::from_f64(cfg.weight_decay)
        } else {
            T::zero()
        };
        let Parameter { tensor, momentum, .. } = p;
        let grad = tensor.grad.get_or_insert_with(|| vec![T::zero(); tensor.data.len()]);
        for ((w, v), g) in tensor.data.iter_mut().zip(momentum.iter_mut()).zip(grad.iter_mut()) {
            *v = mu * *v + *g + decay * *w;
            *w -= lr * *v;
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("p", Tensor::from_vec(&[1], vec![w]).unwrap(), true);
        p.grad_mut()[0] = g;
        p
    }

    #[test]
    fn zero_everything_is_a_no_op() {
        let mut p = param(1.5, 0.0);
        sgd_step([&mut p], SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        assert_eq!(p.value().data(), &[1.5]);
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 0.5);
        sgd_step([&mut p], SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        assert_eq!(p.value().data(), &[1.0 - 0.1 * 0.5]);
        assert_eq!(p.grad(), &[0.0]);
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = param(1.0, 0.5);
        let cfg = SgdConfig { lr, momentum: mu, weight_decay: wd };
        sgd_step([&mut p], cfg);
        p.grad_mut()[0] = -0.25;
        sgd_step([&mut p], cfg);
        let v1 = 0.5 + wd * 1.0;
        let w1 = 1.0 - lr * v1;
        let v2 = mu * v1 - 0.25 + wd * w1;
        let w2 = w1 - lr * v2;
        assert!((p.value().data()[0] - w2).abs() < 1e-15);
    }
}
