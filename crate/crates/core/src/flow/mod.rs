//! Invertible conditional blocks, stacks of them, and the likelihood objective.

mod layers;
mod stack;

pub use layers::{AffineParams, ConditionalAffineLayer, ConditionalCouplingLayer, PermutationLayer};
pub use stack::{
    nll, nll_graph, BlockType, FlowLayer, FlowOutput, FlowStack, FlowTrace, PreparedStack,
    StackSpec, DEFAULT_CLAMP,
};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::numerics::{ParamStore, Tensor};
    use rand::Rng;

    /// Replace every parameter with small random values so no block is an identity.
    pub fn randomize<R: Rng>(store: &mut ParamStore, std: f32, rng: &mut R) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::randn(&shape, std, rng);
        }
    }

    /// log|det| of a dense row-major matrix via partial-pivot elimination.
    pub fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
        let mut acc = 0.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap();
            if piv != col {
                for k in 0..n {
                    a.swap(piv * n + k, col * n + k);
                }
            }
            let d = a[col * n + col];
            acc += d.abs().ln();
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
            }
        }
        acc
    }
}
