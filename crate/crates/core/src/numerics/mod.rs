//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub(crate) use tensor::softmax_in_place;
pub use tensor::{log_softmax_rows, matmul, softmax_rows, Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[3, 5], 2.0, &mut rng(1)));
        let s = g.softmax_rows(x);
        let root = g.sum(s);
        g.backward(root).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dot_with_constant_has_constant_gradient() {
        let c = vec![0.5, -1.0, 2.0, 3.0];
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mul_const(x, &c).unwrap();
        let root = g.sum(y);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), c.as_slice());
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let root = g.sum(y);
        g.backward(root).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grads();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn grad_check_rejects_non_positive_step() {
        let t = Tensor::zeros(&[2]);
        assert!(grad_check(&t, 0.0, |g, x| Ok(g.sum(x))).is_err());
    }

    #[test]
    fn grad_check_is_exact_for_linear_functions() {
        let t = Tensor::randn(&[6], 1.0, &mut rng(2));
        let c: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        for step in [1e-3, 1e-1, 1.0] {
            let err = grad_check(&t, step, |g, x| {
                let y = g.mul_const(x, &c)?;
                Ok(g.sum(y))
            })
            .unwrap();
            assert!(err <= 1e-12, "step {step}: {err}");
        }
    }

    #[test]
    fn softmax_cross_entropy_grad_check() {
        let t = Tensor::randn(&[4, 6], 1.5, &mut rng(3));
        let targets = [0, 5, 2, 3];
        let err = grad_check(&t, 1e-5, |g, x| {
            let ls = g.log_softmax_rows(x);
            let picked = g.pick_per_row(ls, &targets)?;
            let m = g.mean(picked);
            Ok(g.scale(m, -1.0))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn regrouping_gives_identical_gradients() {
        let mut r = rng(4);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 5], 1.0, &mut r);
        let c = Tensor::randn(&[5, 2], 1.0, &mut r);
        let grads = |left: bool| {
            let mut g = Graph::new();
            let (va, vb, vc) = (g.param(a.clone()), g.param(b.clone()), g.param(c.clone()));
            let out = if left {
                let ab = g.matmul(va, vb).unwrap();
                g.matmul(ab, vc).unwrap()
            } else {
                let bc = g.matmul(vb, vc).unwrap();
                g.matmul(va, bc).unwrap()
            };
            let root = g.sum(out);
            g.backward(root).unwrap();
            [va, vb, vc].map(|v| g.grad(v).unwrap().to_vec())
        };
        let (l, r) = (grads(true), grads(false));
        for (x, y) in l.iter().zip(&r) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}
