use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Negative slope used by the encoder's LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

fn check_slope(slope: f64) -> Result<()> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::invalid(format!(
            "leaky_relu slope must lie in [0, 1), got {slope}"
        )));
    }
    Ok(())
}

/// `max(x, slope * x)` elementwise.
pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    check_slope(slope)?;
    let s = T::of(slope);
    Ok(input.map(|x| if x > T::zero() { x } else { s * x }))
}

/// Gradient w.r.t. the pre-activation. At exactly zero the negative branch
/// is taken.
pub fn leaky_relu_backward<T: Real>(
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    slope: f64,
) -> Result<Tensor<T>> {
    check_slope(slope)?;
    let s = T::of(slope);
    input.zip_map(grad_output, "leaky_relu_backward", |x, g| {
        if x > T::zero() {
            g
        } else {
            s * g
        }
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    leaky_relu_backward(input, grad_output, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap();
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn relu_is_leaky_relu_with_zero_slope() {
        let x = Tensor::new(vec![5], vec![-3.0f32, -0.0, 0.0, 0.5, 7.0]).unwrap();
        assert_eq!(relu(&x), leaky_relu(&x, 0.0).unwrap());
    }

    #[test]
    fn slope_out_of_range_rejected() {
        let x = Tensor::<f32>::zeros(&[2]);
        assert!(leaky_relu(&x, 1.0).is_err());
        assert!(leaky_relu(&x, -0.1).is_err());
    }

    #[test]
    fn backward_at_zero_takes_negative_branch() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 1.0]).unwrap();
        let g = Tensor::full(&[3], 1.0);
        let d = leaky_relu_backward(&x, &g, 0.2).unwrap();
        assert_eq!(d.data(), &[0.2, 0.2, 1.0]);
    }
}
