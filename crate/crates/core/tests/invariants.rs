use proptest::prelude::*;

use mmes_core::autoencoder::AdamState;
use mmes_core::degradation::{make_random_mask, Degradation};
use mmes_core::embedding::{mdt_adjoint, mdt_forward, mdt_pinv};
use mmes_core::{DenseTensor, EmbedShape, Matrix};

/// Shape, a valid window and a value seed.
fn geometry() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, u64)> {
    prop::collection::vec(1usize..9, 1..=3)
        .prop_flat_map(|shape| {
            let tau = shape.iter().map(|&i| 1..=i).collect::<Vec<_>>();
            (Just(shape), tau, any::<u64>())
        })
}

fn values(len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

proptest! {
    #[test]
    fn hankel_adjoint_matches_inner_product((shape, tau, seed) in geometry()) {
        let tau = EmbedShape::new(tau).unwrap();
        let n: usize = shape.iter().product();
        let x = DenseTensor::new(shape.clone(), values(n, seed)).unwrap();
        let hx = mdt_forward(&x, &tau).unwrap().into_values();
        let m = Matrix::new(hx.rows(), hx.cols(), values(hx.rows() * hx.cols(), seed ^ 1)).unwrap();
        let lhs = hx.dot(&m);
        let rhs = x.dot(&mdt_adjoint(&m, &shape, &tau).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn pinv_inverts_and_projects((shape, tau, seed) in geometry()) {
        let tau = EmbedShape::new(tau).unwrap();
        let n: usize = shape.iter().product();
        let x = DenseTensor::new(shape.clone(), values(n, seed)).unwrap();
        let h = mdt_forward(&x, &tau).unwrap();
        prop_assert!(h.pinv().unwrap().max_abs_diff(&x) <= 1e-12);
        let m = Matrix::new(h.values().rows(), h.values().cols(), values(h.values().rows() * h.values().cols(), seed ^ 2)).unwrap();
        let p = mdt_forward(&mdt_pinv(&m, &shape, &tau).unwrap(), &tau).unwrap().into_values();
        let pp = mdt_forward(&mdt_pinv(&p, &shape, &tau).unwrap(), &tau).unwrap().into_values();
        prop_assert!(pp.max_abs_diff(&p) <= 1e-10);
    }

    #[test]
    fn mask_is_a_self_adjoint_projection(rows in 1usize..12, cols in 1usize..12, rate in 0.0f64..0.99, seed in any::<u64>()) {
        let f = Degradation::Mask(make_random_mask(&[rows, cols], rate, seed).unwrap());
        let x = DenseTensor::new(vec![rows, cols], values(rows * cols, seed)).unwrap();
        let fx = f.apply(&x).unwrap();
        prop_assert_eq!(f.apply(&fx).unwrap(), fx.clone());
        prop_assert_eq!(f.adjoint(&x).unwrap(), fx);
    }

    #[test]
    fn adam_first_step_moves_by_lr(grads in prop::collection::vec(-1e3f64..1e3, 1..20), lr in 1e-4f64..1.0) {
        let mut state = AdamState::new(grads.len(), lr);
        let mut params = vec![0.0; grads.len()];
        state.step(&mut params, &grads).unwrap();
        for (p, g) in params.iter().zip(&grads) {
            // the bias-corrected first step is lr·g/(|g| + eps)
            let expected = -lr * g / (g.abs() + state.eps);
            prop_assert!((p - expected).abs() <= 1e-12 * lr.max(1.0));
            prop_assert!(p.abs() <= lr * (1.0 + 1e-12));
        }
        prop_assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_never_steps_further_than_a_bound(grads in prop::collection::vec(prop::collection::vec(-10f64..10.0, 5), 1..30)) {
        let lr = 0.01;
        let mut state = AdamState::new(5, lr);
        let mut params = vec![0.0; 5];
        for g in &grads {
            let before = params.clone();
            state.step(&mut params, g).unwrap();
            for (a, b) in before.iter().zip(&params) {
                prop_assert!((a - b).abs() <= lr * 10.0);
            }
        }
    }
}
