//! Helpers shared by unit and integration tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::init;
use crate::diffcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Uniform(-1, 1) tensor from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor_as(shape, seed)
}

pub fn random_tensor_as<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init::uniform(shape, -1.0, 1.0, &mut rng)
}

use crate::diffcore::graph::{Graph, Var};
use crate::error::Result;

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over checked coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with central
/// differences of step `h`. `build` records the function on a fresh graph each call.
/// At most `max_coords` coordinates per input are probed (evenly strided).
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, max_coords: usize, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let stride = t.numel().div_ceil(max_coords).max(1);
        for i in (0..t.numel()).step_by(stride) {
            let orig = t.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[k].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, checked })
}
