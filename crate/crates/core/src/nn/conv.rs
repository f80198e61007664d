//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Batches are processed one sample per rayon task. Weight gradients are
//! computed per sample and then summed in sample order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Geometry of one convolution layer.
///
/// Weights are `[out, in, k, k]` for a forward convolution and
/// `[in, out, k, k]` for a transposed one, matching the adjoint relation
/// between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// 4x4 stride-2 convolution halving the spatial size.
    pub fn down(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 4,
            stride: 2,
            padding: 1,
            transposed: false,
        }
    }

    /// 4x4 stride-2 transposed convolution doubling the spatial size.
    pub fn up(in_channels: usize, out_channels: usize) -> Self {
        Self {
            transposed: true,
            ..Self::down(in_channels, out_channels)
        }
    }

    /// 3x3 stride-1 convolution preserving the spatial size.
    pub fn same(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            transposed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution channel counts must be positive"));
        }
        let geom = (self.kernel, self.stride, self.padding);
        let ok = match self.transposed {
            false => geom == (4, 2, 1) || geom == (3, 1, 1),
            true => geom == (4, 2, 1),
        };
        if !ok {
            return Err(Error::invalid(format!(
                "unsupported convolution geometry kernel={} stride={} padding={} transposed={}",
                self.kernel, self.stride, self.padding, self.transposed
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k]
        }
    }

    /// Output side length for an input side length.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if self.transposed {
            Ok((size - 1) * s + k - 2 * p)
        } else if size + 2 * p < k {
            Err(Error::shape(
                "conv2d",
                format!("spatial size >= {}", k - 2 * p),
                size,
            ))
        } else {
            Ok((size + 2 * p - k) / s + 1)
        }
    }
}

/// Gradients of a (transposed) convolution w.r.t. input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Walks every (patch row, output pixel, source pixel) triple that lies
    /// inside the image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.padding as isize);
        let cols = self.cols();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(row * cols + oy * self.out_w + ox, src_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(img: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    g.for_each_tap(|dst, src| cols[dst] = img[src]);
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, img: &mut [T]) {
    g.for_each_tap(|src, dst| img[dst] = img[dst] + cols[src]);
}

fn check_params<T: Real>(
    op: &'static str,
    spec: &ConvSpec,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4(op)?;
    if c != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("{} input channels", spec.in_channels),
            format!("{} channels in {}", c, input.shape_str()),
        ));
    }
    weight.expect_shape(op, &spec.weight_shape())?;
    bias.expect_shape(op, &[spec.out_channels])?;
    Ok((n, c, h, w))
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Real>(dy: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let off = (b * channels + c) * plane;
            *acc = *acc + dy[off..off + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_ordered<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a = *a + p;
        }
    }
    acc
}

/// Cross-correlation of `input` (`[N, C_in, H, W]`) with `weight`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if spec.transposed {
        return Err(Error::invalid("conv2d called with a transposed spec"));
    }
    let (n, c, h, w) = check_params("conv2d", spec, input, weight, bias)?;
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        out_h: spec.output_size(h)?,
        out_w: spec.output_size(w)?,
    };
    let oc = spec.out_channels;
    let plane = g.cols();
    let mut out = vec![T::zero(); n * oc * plane];
    out.par_chunks_mut(oc * plane)
        .zip(input.data().par_chunks(c * h * w))
        .for_each(|(y, x)| {
            let cols = im2col(x, &g);
            T::gemm(oc, g.rows(), plane, weight.data(), false, &cols, false, T::zero(), y);
        });
    add_bias(&mut out, bias.data(), plane);
    Tensor::new(vec![n, oc, g.out_h, g.out_w], out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let bias = Tensor::zeros(&[spec.out_channels]);
    let (n, c, h, w) = check_params("conv2d_backward", spec, input, weight, &bias)?;
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        out_h: spec.output_size(h)?,
        out_w: spec.output_size(w)?,
    };
    let oc = spec.out_channels;
    let plane = g.cols();
    grad_output.expect_shape("conv2d_backward", &[n, oc, g.out_h, g.out_w])?;

    let mut dx = vec![T::zero(); n * c * h * w];
    let dw_parts: Vec<Vec<T>> = dx
        .par_chunks_mut(c * h * w)
        .zip(input.data().par_chunks(c * h * w))
        .zip(grad_output.data().par_chunks(oc * plane))
        .map(|((dx_n, x_n), dy_n)| {
            let cols = im2col(x_n, &g);
            let mut dw = vec![T::zero(); oc * g.rows()];
            T::gemm(oc, plane, g.rows(), dy_n, false, &cols, true, T::zero(), &mut dw);
            let mut dcols = vec![T::zero(); g.rows() * plane];
            T::gemm(g.rows(), oc, plane, weight.data(), true, dy_n, false, T::zero(), &mut dcols);
            col2im(&dcols, &g, dx_n);
            dw
        })
        .collect();

    Ok(ConvGrads {
        input: Tensor::new(vec![n, c, h, w], dx)?,
        weight: Tensor::new(
            spec.weight_shape().to_vec(),
            sum_ordered(dw_parts, weight.len()),
        )?,
        bias: Tensor::new(vec![oc], bias_grad(grad_output.data(), n, oc, plane))?,
    })
}

fn transposed_geometry(spec: &ConvSpec, h: usize, w: usize) -> Result<Geometry> {
    // The output of the transposed conv plays the role of the image that a
    // forward conv with the same kernel would map back onto `h x w`.
    Ok(Geometry {
        channels: spec.out_channels,
        height: spec.output_size(h)?,
        width: spec.output_size(w)?,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        out_h: h,
        out_w: w,
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernel.
pub fn deconv2d<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !spec.transposed {
        return Err(Error::invalid("deconv2d requires a transposed spec"));
    }
    let (n, c, h, w) = check_params("deconv2d", spec, input, weight, bias)?;
    let g = transposed_geometry(spec, h, w)?;
    let oc = spec.out_channels;
    let out_plane = g.height * g.width;
    let mut out = vec![T::zero(); n * oc * out_plane];
    out.par_chunks_mut(oc * out_plane)
        .zip(input.data().par_chunks(c * h * w))
        .for_each(|(y, x)| {
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            T::gemm(g.rows(), c, g.cols(), weight.data(), true, x, false, T::zero(), &mut cols);
            col2im(&cols, &g, y);
        });
    add_bias(&mut out, bias.data(), out_plane);
    Tensor::new(vec![n, oc, g.height, g.width], out)
}

pub fn deconv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let bias = Tensor::zeros(&[spec.out_channels]);
    let (n, c, h, w) = check_params("deconv2d_backward", spec, input, weight, &bias)?;
    let g = transposed_geometry(spec, h, w)?;
    let oc = spec.out_channels;
    let out_plane = g.height * g.width;
    grad_output.expect_shape("deconv2d_backward", &[n, oc, g.height, g.width])?;

    let mut dx = vec![T::zero(); n * c * h * w];
    let dw_parts: Vec<Vec<T>> = dx
        .par_chunks_mut(c * h * w)
        .zip(input.data().par_chunks(c * h * w))
        .zip(grad_output.data().par_chunks(oc * out_plane))
        .map(|((dx_n, x_n), dy_n)| {
            let cols = im2col(dy_n, &g);
            T::gemm(c, g.rows(), g.cols(), weight.data(), false, &cols, false, T::zero(), dx_n);
            let mut dw = vec![T::zero(); c * g.rows()];
            T::gemm(c, g.cols(), g.rows(), x_n, false, &cols, true, T::zero(), &mut dw);
            dw
        })
        .collect();

    Ok(ConvGrads {
        input: Tensor::new(vec![n, c, h, w], dx)?,
        weight: Tensor::new(
            spec.weight_shape().to_vec(),
            sum_ordered(dw_parts, weight.len()),
        )?,
        bias: Tensor::new(vec![oc], bias_grad(grad_output.data(), n, oc, out_plane))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation over the zero-padded grid.
    fn conv_oracle(x: &Tensor<f64>, spec: &ConvSpec, wt: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (n, c, h, w) = x.dims4("oracle").unwrap();
        let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let oc = spec.out_channels;
        let mut out = vec![0.0; n * oc * oh * ow];
        for bn in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((o * c + ci) * k + ky) * k + kx]
                                        * x.data()[((bn * c + ci) * h + iy as usize) * w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((bn * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn down_conv_halves_spatial_size() {
        let spec = ConvSpec::down(1, 3);
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let w = Tensor::zeros(&spec.weight_shape());
        let y = conv2d(&x, &spec, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_counts_valid_taps() {
        let spec = ConvSpec::down(1, 1);
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::full(&spec.weight_shape(), 1.0);
        let y = conv2d(&x, &spec, &w, &Tensor::zeros(&[1])).unwrap();
        // Padded grid is 6x6; each 4x4 window at stride 2 covers 3x3 real pixels.
        assert_eq!(y.data(), &[9.0, 9.0, 9.0, 9.0]);
        assert_eq!(y.data(), &conv_oracle(&x, &spec, &w, &[0.0])[..]);
    }

    #[test]
    fn conv_matches_direct_summation() {
        for spec in [ConvSpec::down(3, 2), ConvSpec::same(3, 4)] {
            let x = Tensor::new(vec![2, 3, 6, 6], pseudo(216, 0.7)).unwrap();
            let w = Tensor::new(spec.weight_shape().to_vec(), pseudo(spec.weight_shape().iter().product(), 1.3)).unwrap();
            let b = pseudo(spec.out_channels, 2.1);
            let y = conv2d(&x, &spec, &w, &Tensor::new(vec![spec.out_channels], b.clone()).unwrap()).unwrap();
            let want = conv_oracle(&x, &spec, &w, &b);
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_doubles_and_zero_kernel_gives_bias() {
        let spec = ConvSpec::up(2, 3);
        let x = Tensor::<f32>::new(vec![1, 2, 4, 4], (0..32).map(|i| i as f32).collect()).unwrap();
        let w = Tensor::zeros(&spec.weight_shape());
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = deconv2d(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
        assert!(y.data()[..64].iter().all(|&v| v == 0.5));
        assert!(y.data()[64..128].iter().all(|&v| v == -1.0));
        assert!(y.data()[128..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn deconv_input_gradient_is_conv_forward() {
        let up = ConvSpec::up(3, 2);
        let x = Tensor::new(vec![1, 3, 5, 5], pseudo(75, 0.3)).unwrap();
        let w = Tensor::new(up.weight_shape().to_vec(), pseudo(96, 0.9)).unwrap();
        let dy = Tensor::new(vec![1, 2, 10, 10], pseudo(200, 1.7)).unwrap();
        let grads = deconv2d_backward(&x, &up, &w, &dy).unwrap();
        // Same weight array viewed as a [3 out, 2 in] forward kernel.
        let down = ConvSpec::down(2, 3);
        let via_conv = conv2d(&dy, &down, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(via_conv.shape(), grads.input.shape());
        for (a, b) in via_conv.data().iter().zip(grads.input.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> with the same kernel.
        let down = ConvSpec::down(2, 3);
        let up = ConvSpec::up(3, 2);
        let x = Tensor::new(vec![1, 2, 8, 8], pseudo(128, 0.41)).unwrap();
        let y = Tensor::new(vec![1, 3, 4, 4], pseudo(48, 1.11)).unwrap();
        let w = Tensor::new(down.weight_shape().to_vec(), pseudo(96, 0.77)).unwrap();
        let cx = conv2d(&x, &down, &w, &Tensor::zeros(&[3])).unwrap();
        let dy = deconv2d(&y, &up, &w, &Tensor::zeros(&[2])).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let spec = ConvSpec::same(2, 2);
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let err = conv2d(&x, &spec, &Tensor::zeros(&spec.weight_shape()), &Tensor::zeros(&[2]))
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(err.to_string().contains("2 input channels"));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut spec = ConvSpec::same(1, 1);
        spec.kernel = 5;
        assert!(spec.validate().is_err());
        let mut spec = ConvSpec::same(1, 1);
        spec.transposed = true;
        assert!(spec.validate().is_err());
    }
}
