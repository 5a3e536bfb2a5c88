use crate::real::Real;

use super::{KernelError, Tensor};

/// SGD-with-momentum hyperparameters for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One heavy-ball step with coupled weight decay:
/// `v ← momentum·v + grad + weight_decay·param`, then `param ← param − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    hyper: Sgd,
) -> Result<(), KernelError> {
    if grads.len() < params.len() {
        return Err(KernelError::MissingGrad(grads.len()));
    }
    if velocity.len() != params.len() {
        return Err(KernelError::InvalidAttr {
            op: "sgd_step",
            reason: format!("{} velocity buffers for {} parameters", velocity.len(), params.len()),
        });
    }
    if !(hyper.lr > 0.0) || !(0.0..1.0).contains(&hyper.momentum) || hyper.weight_decay < 0.0 {
        return Err(KernelError::InvalidAttr {
            op: "sgd_step",
            reason: format!("invalid hyperparameters {hyper:?}"),
        });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "sgd_step",
                shapes: vec![p.shape().to_vec(), g.shape().to_vec(), v.shape().to_vec()],
            });
        }
    }
    let lr = T::of_f64(hyper.lr);
    let mu = T::of_f64(hyper.momentum);
    let wd = T::of_f64(hyper.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![scalar(3.0)];
        let mut v = vec![scalar(0.0)];
        let hyper = Sgd { lr: 1.0, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, &[scalar(0.25)], &mut v, hyper).unwrap();
        assert_eq!(p[0].item(), 2.75);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let mut p = vec![scalar(0.0)];
        let mut v = vec![scalar(1.0)];
        let hyper = Sgd { lr: 0.1, momentum: 0.5, weight_decay: 0.0 };
        let mut expected = 1.0;
        for _ in 0..5 {
            sgd_step(&mut p, &[scalar(0.0)], &mut v, hyper).unwrap();
            expected *= 0.5;
            assert_eq!(v[0].item(), expected);
        }
    }

    #[test]
    fn matches_scalar_recurrence_with_momentum_and_decay() {
        let hyper = Sgd { lr: 0.03, momentum: 0.9, weight_decay: 5e-4 };
        let grads = [0.7, -0.2, 0.05];
        let (mut p_ref, mut v_ref) = (1.5f64, 0.0f64);
        let mut p = vec![scalar(1.5)];
        let mut v = vec![scalar(0.0)];
        for &g in &grads {
            v_ref = 0.9 * v_ref + g + 5e-4 * p_ref;
            p_ref -= 0.03 * v_ref;
            sgd_step(&mut p, &[scalar(g)], &mut v, hyper).unwrap();
        }
        assert!((p[0].item() - p_ref).abs() < 1e-15);
        assert!((v[0].item() - v_ref).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = vec![scalar(1.0), scalar(2.0)];
        let mut v = vec![scalar(0.0), scalar(0.0)];
        let hyper = Sgd { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let err = sgd_step(&mut p, &[scalar(1.0)], &mut v, hyper).unwrap_err();
        assert_eq!(err, KernelError::MissingGrad(1));
    }
}
