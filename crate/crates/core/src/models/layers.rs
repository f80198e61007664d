//! Layers that read their weights from a [`ModelParams`] and accumulate
//! gradients back into it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nn::{
    batchnorm2d_backward, batchnorm2d_forward, conv2d, conv2d_backward, deconv2d,
    deconv2d_backward, fully_connected, fully_connected_backward, leaky_relu,
    leaky_relu_backward, relu, relu_backward, update_running_stats, BnCache, ConvSpec, Mode,
    ModelParams, ParamId, ParamKind, Real, Tensor, BN_EPSILON, BN_MOMENTUM, LEAKY_SLOPE,
};

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

fn normal_tensor<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn register<T: Real>(
        params: &mut ModelParams<T>,
        prefix: &str,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let weight = params.register(
            format!("{prefix}.weight"),
            ParamKind::Trainable,
            normal_tensor(&spec.weight_shape(), rng),
        )?;
        let bias = params.register(
            format!("{prefix}.bias"),
            ParamKind::Trainable,
            Tensor::zeros(&[spec.out_channels]),
        )?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, p: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (w, b) = (p.get(self.weight), p.get(self.bias));
        if self.spec.transposed {
            deconv2d(x, &self.spec, w, b)
        } else {
            conv2d(x, &self.spec, w, b)
        }
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let w = p.get(self.weight);
        let g = if self.spec.transposed {
            deconv2d_backward(x, &self.spec, w, dy)?
        } else {
            conv2d_backward(x, &self.spec, w, dy)?
        };
        p.accumulate_grad(self.weight, g.weight.data());
        p.accumulate_grad(self.bias, g.bias.data());
        Ok(g.input)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNormLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNormLayer {
    pub fn register<T: Real>(params: &mut ModelParams<T>, prefix: &str, channels: usize) -> Result<Self> {
        let c = [channels];
        Ok(Self {
            gamma: params.register(format!("{prefix}.gamma"), ParamKind::Trainable, Tensor::full(&c, T::one()))?,
            beta: params.register(format!("{prefix}.beta"), ParamKind::Trainable, Tensor::zeros(&c))?,
            running_mean: params.register(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&c))?,
            running_var: params.register(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(&c, T::one()))?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        p: &ModelParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        batchnorm2d_forward(
            x,
            p.get(self.gamma).data(),
            p.get(self.beta).data(),
            p.get(self.running_mean).data(),
            p.get(self.running_var).data(),
            mode,
            BN_EPSILON,
        )
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dgamma, dbeta) = batchnorm2d_backward(dy, p.get(self.gamma).data(), cache)?;
        p.accumulate_grad(self.gamma, &dgamma);
        p.accumulate_grad(self.beta, &dbeta);
        Ok(dx)
    }

    pub fn commit<T: Real>(&self, p: &mut ModelParams<T>, cache: &BnCache<T>) {
        let mut mean = p.get(self.running_mean).data().to_vec();
        let mut var = p.get(self.running_var).data().to_vec();
        update_running_stats(&mut mean, &mut var, cache, BN_MOMENTUM);
        p.get_mut(self.running_mean).data_mut().copy_from_slice(&mean);
        p.get_mut(self.running_var).data_mut().copy_from_slice(&var);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
}

impl LinearLayer {
    pub fn register<T: Real>(
        params: &mut ModelParams<T>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: params.register(
                format!("{prefix}.weight"),
                ParamKind::Trainable,
                normal_tensor(&[inputs, outputs], rng),
            )?,
            bias: params.register(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[outputs]))?,
        })
    }

    pub fn forward<T: Real>(&self, p: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        fully_connected(x, p.get(self.weight), p.get(self.bias))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = fully_connected_backward(x, p.get(self.weight), dy)?;
        p.accumulate_grad(self.weight, g.weight.data());
        p.accumulate_grad(self.bias, g.bias.data());
        Ok(g.input)
    }
}

/// `relu(x + conv2(relu(conv1(x))))` with channel count preserved.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct ResidualTape<T> {
    x: Tensor<T>,
    h: Tensor<T>,
    a: Tensor<T>,
    s: Tensor<T>,
}

impl ResidualBlock {
    pub fn register<T: Real>(
        params: &mut ModelParams<T>,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ConvLayer::register(params, &format!("{prefix}.conv1"), ConvSpec::same(channels, channels), rng)?,
            conv2: ConvLayer::register(params, &format!("{prefix}.conv2"), ConvSpec::same(channels, channels), rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.spec.in_channels
    }

    pub fn forward<T: Real>(
        &self,
        p: &ModelParams<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, ResidualTape<T>)> {
        let h = self.conv1.forward(p, x)?;
        let a = relu(&h);
        let u = self.conv2.forward(p, &a)?;
        let s = x.zip_map(&u, "residual_block", |a, b| a + b)?;
        let y = relu(&s);
        Ok((
            y,
            ResidualTape {
                x: x.clone(),
                h,
                a,
                s,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        tape: &ResidualTape<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let ds = relu_backward(&tape.s, dy)?;
        let da = self.conv2.backward(p, &tape.a, &ds)?;
        let dh = relu_backward(&tape.h, &da)?;
        let dx = self.conv1.backward(p, &tape.x, &dh)?;
        dx.zip_map(&ds, "residual_block_backward", |a, b| a + b)
    }
}

/// Residual block, 4x4 stride-2 conv, batch norm, LeakyReLU.
#[derive(Debug, Clone)]
pub(crate) struct DownBlock {
    res: ResidualBlock,
    conv: ConvLayer,
    bn: BatchNormLayer,
}

/// Residual block, 4x4 stride-2 transposed conv, batch norm, ReLU.
#[derive(Debug, Clone)]
pub(crate) struct UpBlock {
    res: ResidualBlock,
    conv: ConvLayer,
    bn: BatchNormLayer,
}

#[derive(Debug, Clone)]
pub struct SamplingTape<T> {
    res: ResidualTape<T>,
    r: Tensor<T>,
    bn: BnCache<T>,
    z: Tensor<T>,
}

impl<T> SamplingTape<T> {
    pub(crate) fn bn_cache(&self) -> &BnCache<T> {
        &self.bn
    }
}

macro_rules! sampling_block {
    ($name:ident, $conv_name:literal, $spec:path, $act:expr, $act_back:expr) => {
        impl $name {
            pub fn register<T: Real>(
                params: &mut ModelParams<T>,
                prefix: &str,
                in_channels: usize,
                out_channels: usize,
                rng: &mut impl Rng,
            ) -> Result<Self> {
                let res = ResidualBlock::register(params, &format!("{prefix}.res"), in_channels, rng)?;
                let conv = ConvLayer::register(
                    params,
                    &format!("{prefix}.{}", $conv_name),
                    $spec(in_channels, out_channels),
                    rng,
                )?;
                let bn = BatchNormLayer::register(params, &format!("{prefix}.bn"), out_channels)?;
                Ok(Self { res, conv, bn })
            }

            pub fn forward<T: Real>(
                &self,
                p: &ModelParams<T>,
                x: &Tensor<T>,
                mode: Mode,
            ) -> Result<(Tensor<T>, SamplingTape<T>)> {
                let (r, res) = self.res.forward(p, x)?;
                let c = self.conv.forward(p, &r)?;
                let (z, bn) = self.bn.forward(p, &c, mode)?;
                let y = $act(&z)?;
                Ok((y, SamplingTape { res, r, bn, z }))
            }

            pub fn backward<T: Real>(
                &self,
                p: &mut ModelParams<T>,
                tape: &SamplingTape<T>,
                dy: &Tensor<T>,
            ) -> Result<Tensor<T>> {
                let dz = $act_back(&tape.z, dy)?;
                let dc = self.bn.backward(p, &tape.bn, &dz)?;
                let dr = self.conv.backward(p, &tape.r, &dc)?;
                self.res.backward(p, &tape.res, &dr)
            }

            pub fn commit<T: Real>(&self, p: &mut ModelParams<T>, tape: &SamplingTape<T>) {
                self.bn.commit(p, tape.bn_cache());
            }
        }
    };
}

fn leaky<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    leaky_relu(z, LEAKY_SLOPE)
}

fn leaky_back<T: Real>(z: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    leaky_relu_backward(z, dy, LEAKY_SLOPE)
}

fn plain_relu<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(relu(z))
}

sampling_block!(DownBlock, "down", ConvSpec::down, leaky, leaky_back);
sampling_block!(UpBlock, "up", ConvSpec::up, plain_relu, relu_backward);
