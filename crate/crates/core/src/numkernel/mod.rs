//! Differentiable tensor primitives, losses, and the finite-difference
//! checker every other module is verified with.

mod gradcheck;
mod graph;
mod optim;
mod rng;
mod store;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{sigmoid, Gradients, Graph, GridResample, Var};
pub use optim::{AdamW, LrSchedule, ScheduleKind};
pub use rng::{child_seed, Rng, RNG_ALGORITHM};
pub use store::{Bound, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Stabilizer shared by every layer norm in the encoder and decoders.
pub const LN_EPS: f32 = 1e-6;

fn eval2(
    a: &Tensor,
    b: &Tensor,
    op: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = op(&mut g, va, vb)?;
    Ok(g.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval2(a, b, |g, a, b| g.matmul(a, b))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let out = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.value(out).clone())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    eval2(a, b, |g, a, b| g.mse(a, b)).map(|t| t.item())
}

pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f32> {
    eval2(pred, target, |g, a, b| g.smooth_l1(a, b)).map(|t| t.item())
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f32> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let out = g.cross_entropy(v, targets)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let b = t(&[3, 4], &[1.5; 12]);
        assert_eq!(
            matmul(&Tensor::zeros(&[2, 3]), &b).unwrap(),
            Tensor::zeros(&[2, 4])
        );
        let c = matmul(&a, &t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(c.data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&t(&[1, 2], &[5., 5.]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0., 0.]);
        let y = layer_norm(&t(&[1, 2], &[1., 3.]), &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1., 1.]);
        let bias = t(&[2], &[0.25, -2.0]);
        let z = layer_norm(&t(&[2, 2], &[1., 3., -4., 9.]), &zeros, &bias, 1e-5).unwrap();
        assert_eq!(z.data(), &[0.25, -2.0, 0.25, -2.0]);
    }

    #[test]
    fn zero_width_axis_cannot_exist() {
        assert!(Tensor::new(vec![3, 0], vec![]).is_err());
    }

    #[test]
    fn smooth_l1_huber_values() {
        let z = Tensor::zeros(&[1]);
        assert_eq!(smooth_l1(&z, &z).unwrap(), 0.0);
        assert_eq!(smooth_l1(&t(&[1], &[0.5]), &z).unwrap(), 0.125);
        assert_eq!(smooth_l1(&t(&[1], &[2.0]), &z).unwrap(), 1.5);
        assert_eq!(smooth_l1(&t(&[1], &[-2.0]), &z).unwrap(), 1.5);
    }

    #[test]
    fn cross_entropy_uniform_and_range() {
        let l = cross_entropy(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 4]), &[7]),
            Err(Error::ClassRange {
                index: 7,
                classes: 4
            })
        ));
    }

    #[test]
    fn cross_entropy_vanishes_as_correct_logit_grows() {
        let mut prev = f32::INFINITY;
        for big in [0.0f32, 2.0, 5.0, 10.0, 20.0, 40.0] {
            let l = cross_entropy(&t(&[1, 3], &[0.3, big, -0.2]), &[1]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn mse_symmetric_and_zero_on_self() {
        let a = t(&[2, 2], &[0.1, -3.0, 2.5, 7.0]);
        let b = t(&[2, 2], &[1.0, 0.0, -2.0, 7.5]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }
}
