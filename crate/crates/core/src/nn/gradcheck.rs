use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Worst relative error found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `loss` must return the loss at the given parameters and write the analytic
/// gradient into the supplied buffer (pre-zeroed, one tensor per parameter).
/// Up to `samples_per_tensor` coordinates per tensor are drawn with `seed`;
/// tensors smaller than that are checked exhaustively.
pub fn grad_check<F>(
    loss: F,
    params: &mut ParamStore<f64>,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut [Tensor<f64>]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Argument(format!("finite-difference step {eps} must be > 0")));
    }
    let mut analytic = params.grad_buffer();
    let base = loss(params, &mut analytic)?;
    let mut scratch = params.grad_buffer();
    let again = loss(params, &mut scratch)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Check(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for i in 0..params.len() {
        let len = params.values[i].len();
        let coords: Vec<usize> = if samples_per_tensor >= len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, samples_per_tensor).into_vec()
        };
        let mut worst = TensorCheck {
            name: params.names()[i].clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &j in &coords {
            let orig = params.values[i].data()[j];
            params.values[i].data_mut()[j] = orig + eps;
            let mut sink = params.grad_buffer();
            let plus = loss(params, &mut sink)?;
            params.values[i].data_mut()[j] = orig - eps;
            let minus = loss(params, &mut sink)?;
            params.values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_analytic = a;
                worst.worst_numeric = numeric;
            }
        }
        overall = overall.max(worst.max_rel_error);
        tensors.push(worst);
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_error: overall,
    })
}
