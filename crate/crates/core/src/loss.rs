use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, Tensor};

/// Mean negative log-likelihood (nats/token) of `targets` under `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<T> {
    Ok(per_token_nll(logits, targets)?.into_iter().sum::<T>() / T::from_usize(targets.len()).unwrap())
}

/// Negative log-likelihood of each target, in order.
pub fn per_token_nll<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<Vec<T>> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Input(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let vocab = logits.cols();
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            if y as usize >= vocab {
                return Err(Error::Input(format!("target {y} outside vocab {vocab}")));
            }
            Ok(-log_softmax(logits.row(t))[y as usize])
        })
        .collect()
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<(T, Tensor<T>)> {
    let loss = cross_entropy(logits, targets)?;
    let inv_n = T::one() / T::from_usize(targets.len()).unwrap();
    let mut grad = Tensor::zeros(&logits.shape);
    for (t, &y) in targets.iter().enumerate() {
        let lp = log_softmax(logits.row(t));
        for (g, l) in grad.row_mut(t).iter_mut().zip(lp) {
            *g = l.exp() * inv_n;
        }
        grad.row_mut(t)[y as usize] -= inv_n;
    }
    Ok((loss, grad))
}
