//! Tensor substrate: dense arrays, reverse-mode differentiation, convolution,
//! the Lion optimizer and a finite-difference gradient checker.

mod conv;
pub mod gradcheck;
pub mod graph;
pub mod lion;
pub mod nn;
pub mod params;
pub mod tensor;

pub use conv::Padding;
pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use lion::{lion_step, LionConfig, LionState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::Result;

/// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kh, kw]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<Tensor> {
    let geom = graph::conv_geom(input, kernels, padding)?;
    let out = conv::forward(&geom, input.data(), kernels.data());
    Tensor::new(&[geom.cout, geom.oh, geom.ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn delta_kernel(k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[1, 1, k, k]);
        t.data_mut()[(k / 2) * k + k / 2] = 1.0;
        t
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 5, 6], |i| (i as f32 * 0.37).sin());
        let y = conv2d(&x, &delta_kernel(3), Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let k = Tensor::from_fn(&[2, 3, 3, 3], |i| i as f32);
        let y = conv2d(&Tensor::zeros(&[3, 4, 4]), &k, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn valid_sum_of_ones() {
        let y = conv2d(&Tensor::ones(&[1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), Padding::Same).unwrap_err();
        assert!(err.to_string().contains("channels"));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 3]), Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), Padding::Valid).is_err());
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[2, 6, 5], 1.0, &mut rng);
            let y = Tensor::randn(&[2, 6, 5], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let mix = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = conv2d(&mix, &k, Padding::Same).unwrap();
            let rhs = conv2d(&x, &k, Padding::Same).unwrap().scale(a)
                .add(&conv2d(&y, &k, Padding::Same).unwrap().scale(b)).unwrap();
            let scale = rhs.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5 * scale);
        }
    }
}
