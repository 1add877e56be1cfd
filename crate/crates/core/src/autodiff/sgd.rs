use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named, mutable parameter slot handed to [`sgd_step`].
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
}

/// Plain gradient descent, `p <- p - lr * g`, applied in place.
///
/// All gradients are validated before any parameter is touched, so a
/// rejected step leaves every parameter unchanged.
pub fn sgd_step(params: &mut [ParamSlot<'_>], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.to_string()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}
