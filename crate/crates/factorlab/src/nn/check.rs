use thiserror::Error;

use super::loss::{batch_softmax_cross_entropy, LossError};
use super::net::{NetError, Network};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("epsilon must lie in (0, 1e-2], got {0}")]
    BadEpsilon(f64),
    #[error("gradient checking needs a flat [classes] output, got {0:?}")]
    NonFlatOutput(Vec<usize>),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Scale-aware relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares every analytic parameter gradient against a central finite
/// difference of the softmax cross-entropy loss and returns the worst
/// relative error. Labels are fixed to `row % classes` so the check is fully
/// deterministic; dropout is inactive in every pass. Parameters and any
/// pre-existing gradients are restored on return.
pub fn grad_check(net: &mut Network, input: &Tensor, epsilon: f64) -> Result<f64, CheckError> {
    grad_check_with(net, input, epsilon, |_| {})
}

/// [`grad_check`] with a fault-injection hook: `tamper` runs on the analytic
/// gradients right after backward, before they are compared against finite
/// differences. Used to confirm the checker actually catches a broken
/// backward rule.
pub fn grad_check_with(
    net: &mut Network,
    input: &Tensor,
    epsilon: f64,
    tamper: impl FnOnce(&mut crate::nn::ParamSet),
) -> Result<f64, CheckError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(CheckError::BadEpsilon(epsilon));
    }
    let out_shape = net.output_shape().to_vec();
    let [classes] = out_shape[..] else {
        return Err(CheckError::NonFlatOutput(out_shape));
    };
    let n = input.shape()[0];
    let labels: Vec<Option<usize>> = (0..n).map(|r| Some(r % classes)).collect();

    let saved: Vec<Option<Vec<f64>>> = net
        .params
        .iter_mut()
        .map(|p| p.tensor.take_grad())
        .collect();

    let (out, tape) = net.forward_traced(input, None)?;
    let (_, loss_grad) = batch_softmax_cross_entropy(&out, &labels)?;
    net.backward(&tape, &loss_grad)?;
    tamper(&mut net.params);
    let analytic: Vec<(String, Vec<f64>)> = net
        .params
        .iter()
        .map(|p| (p.name().to_string(), p.tensor.grad().expect("just ran backward").to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = net.params.get(name).expect("name from iteration").tensor.values()[i];
            let mut probe = |v: f64| -> Result<f64, CheckError> {
                net.params.get_mut(name).unwrap().tensor.values_mut()[i] = v;
                let out = net.forward(input)?;
                Ok(batch_softmax_cross_entropy(&out, &labels)?.0)
            };
            let hi = probe(orig + epsilon)?;
            let lo = probe(orig - epsilon)?;
            net.params.get_mut(name).unwrap().tensor.values_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * epsilon);
            worst = worst.max(relative_error(grads[i], numeric));
        }
    }

    for (p, g) in net.params.iter_mut().zip(saved) {
        p.tensor.restore_grad(g).expect("saved from the same tensor");
    }
    Ok(worst)
}
