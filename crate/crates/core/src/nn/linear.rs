use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, d) = input.dims2(op)?;
    let (wd, k) = weight.dims2(op)?;
    if wd != d {
        return Err(Error::shape(
            op,
            format!("weight with {d} rows"),
            weight.shape_str(),
        ));
    }
    Ok((n, d, k))
}

/// `input[N, D] * weight[D, K] + bias[K]`.
pub fn fully_connected<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d, k) = check("fully_connected", input, weight)?;
    bias.expect_shape("fully_connected", &[k])?;
    let mut out: Vec<T> = bias.data().iter().copied().cycle().take(n * k).collect();
    T::gemm(n, d, k, input.data(), false, weight.data(), false, T::one(), &mut out);
    Tensor::new(vec![n, k], out)
}

pub fn fully_connected_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, d, k) = check("fully_connected_backward", input, weight)?;
    grad_output.expect_shape("fully_connected_backward", &[n, k])?;
    let dy = grad_output.data();
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, k, d, dy, false, weight.data(), true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, n, k, input.data(), true, dy, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in dy.chunks(k) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, d], dx)?,
        weight: Tensor::new(vec![d, k], dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = fully_connected(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_multiplied_example() {
        let x = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap();
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        let w = Tensor::zeros(&[3, 2]);
        assert!(fully_connected(&x, &w, &Tensor::zeros(&[2])).is_err());
    }
}
