use crate::error::{KwsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Parameter-free attention: each neuron is scaled by the sigmoid of its
/// inverse minimal energy, with mean and population variance taken over
/// its whole `H x W` channel plane (the neuron included).
///
/// Accepts `C x H x W` or `N x C x H x W`.
pub fn simam<T: Scalar>(x: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    let plane = match x.shape() {
        [_, h, w] | [_, _, h, w] => h * w,
        s => {
            return Err(KwsError::Dimension(format!(
                "simam input must be rank 3 or 4, got {s:?}"
            )))
        }
    };
    if plane == 0 {
        return Err(KwsError::Contract("simam over an empty plane".into()));
    }
    if lambda <= T::zero() {
        return Err(KwsError::Contract("simam lambda must be positive".into()));
    }
    let (y, _) = ops::simam_forward(x.data(), plane, lambda);
    Tensor::new(x.shape().to_vec(), y)
}
