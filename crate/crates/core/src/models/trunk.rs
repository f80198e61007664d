//! Skip-free convolutional encoder-decoder shared by all three networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Mode, ModelParams, Real, Tensor};

use super::layers::{ConvLayer, DownBlock, LinearLayer, SamplingTape, UpBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDecoderConfig {
    pub in_channels: usize,
    /// Encoder widths are `base_channels * 2^i` for `i < depth`.
    pub base_channels: usize,
    pub depth: usize,
    pub with_classifier: bool,
    pub num_classes: usize,
    pub input_size: usize,
}

impl EncoderDecoderConfig {
    pub fn pretrainnet(base_channels: usize, input_size: usize) -> Self {
        Self {
            in_channels: 1,
            base_channels,
            depth: 4,
            with_classifier: true,
            num_classes: 3,
            input_size,
        }
    }

    pub fn cpnet(base_channels: usize, input_size: usize) -> Self {
        Self {
            with_classifier: false,
            ..Self::pretrainnet(base_channels, input_size)
        }
    }

    pub fn refinenet(base_channels: usize, input_size: usize) -> Self {
        Self {
            in_channels: 2,
            depth: 2,
            with_classifier: false,
            ..Self::pretrainnet(base_channels, input_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != 2 && self.depth != 4 {
            return Err(Error::invalid(format!("depth must be 2 or 4, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.with_classifier && self.num_classes < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        let factor = 1 << self.depth;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::shape(
                "encoder-decoder",
                format!("input size divisible by {factor}"),
                self.input_size,
            ));
        }
        Ok(())
    }

    pub fn encoder_width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_shape(&self, batch: usize) -> [usize; 4] {
        let side = self.input_size >> self.depth;
        [batch, self.encoder_width(self.depth - 1), side, side]
    }
}

/// Intermediate values of one forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct TrunkTape<T> {
    batch: usize,
    down: Vec<SamplingTape<T>>,
    up: Vec<SamplingTape<T>>,
    bottleneck: Tensor<T>,
    head_input: Tensor<T>,
}

impl<T> TrunkTape<T> {
    pub fn bottleneck(&self) -> &Tensor<T> {
        &self.bottleneck
    }
}

#[derive(Debug, Clone)]
pub struct TrunkOutput<T> {
    pub image: Tensor<T>,
    pub logits: Option<Tensor<T>>,
    pub tape: TrunkTape<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    config: EncoderDecoderConfig,
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    head: ConvLayer,
    classifier: Option<LinearLayer>,
}

impl EncoderDecoder {
    /// Builds the layer graph and its freshly initialized parameters.
    /// Classifier weights are drawn last so the trunk initialization does
    /// not depend on whether the head exists.
    pub fn build<T: Real>(config: EncoderDecoderConfig, seed: u64) -> Result<(Self, ModelParams<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let d = config.depth;

        let mut down = Vec::with_capacity(d);
        let mut ch = config.in_channels;
        for i in 0..d {
            let out = config.encoder_width(i);
            down.push(DownBlock::register(&mut p, &format!("enc.{i}"), ch, out, &mut rng)?);
            ch = out;
        }
        let mut up = Vec::with_capacity(d);
        for j in 0..d {
            let out = if j + 1 < d {
                config.encoder_width(d - 2 - j)
            } else {
                config.base_channels
            };
            up.push(UpBlock::register(&mut p, &format!("dec.{j}"), ch, out, &mut rng)?);
            ch = out;
        }
        let head = ConvLayer::register(&mut p, "dec.out", ConvSpec::same(ch, 1), &mut rng)?;
        let classifier = if config.with_classifier {
            let features: usize = config.bottleneck_shape(1).iter().product();
            Some(LinearLayer::register(&mut p, "cls.fc", features, config.num_classes, &mut rng)?)
        } else {
            None
        };
        Ok((
            Self {
                config,
                down,
                up,
                head,
                classifier,
            },
            p,
        ))
    }

    pub fn config(&self) -> &EncoderDecoderConfig {
        &self.config
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = x.dims4("encoder-decoder")?;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape(
                "encoder-decoder",
                format!("[N x {} x {s} x {s}]", self.config.in_channels),
                x.shape_str(),
            ));
        }
        Ok(n)
    }

    /// Runs the encoder only, returning the bottleneck features.
    pub fn encode<T: Real>(
        &self,
        p: &ModelParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<SamplingTape<T>>)> {
        self.check_input(x)?;
        let mut tapes = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for block in &self.down {
            let (y, tape) = block.forward(p, &h, mode)?;
            tapes.push(tape);
            h = y;
        }
        Ok((h, tapes))
    }

    /// Runs the decoder and output head from bottleneck features.
    pub fn decode<T: Real>(
        &self,
        p: &ModelParams<T>,
        z: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<SamplingTape<T>>, Tensor<T>)> {
        let (n, _, _, _) = z.dims4("decode")?;
        z.expect_shape("decode", &self.config.bottleneck_shape(n))?;
        let mut tapes = Vec::with_capacity(self.up.len());
        let mut h = z.clone();
        for block in &self.up {
            let (y, tape) = block.forward(p, &h, mode)?;
            tapes.push(tape);
            h = y;
        }
        let out = self.head.forward(p, &h)?;
        Ok((out, tapes, h))
    }

    pub fn forward<T: Real>(
        &self,
        p: &ModelParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<TrunkOutput<T>> {
        let n = self.check_input(x)?;
        let (z, down) = self.encode(p, x, mode)?;
        let (image, up, head_input) = self.decode(p, &z, mode)?;
        let logits = match &self.classifier {
            Some(fc) => {
                let flat = z.clone().reshape(&[n, z.len() / n])?;
                Some(fc.forward(p, &flat)?)
            }
            None => None,
        };
        Ok(TrunkOutput {
            image,
            logits,
            tape: TrunkTape {
                batch: n,
                down,
                up,
                bottleneck: z,
                head_input,
            },
        })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        tape: &TrunkTape<T>,
        d_image: &Tensor<T>,
        d_logits: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = self.head.backward(p, &tape.head_input, d_image)?;
        for (block, t) in self.up.iter().zip(&tape.up).rev() {
            g = block.backward(p, t, &g)?;
        }
        if let (Some(fc), Some(dl)) = (&self.classifier, d_logits) {
            let z = &tape.bottleneck;
            let flat = z.clone().reshape(&[tape.batch, z.len() / tape.batch])?;
            let dz = fc.backward(p, &flat, dl)?.reshape(z.shape())?;
            g = g.zip_map(&dz, "bottleneck", |a, b| a + b)?;
        }
        for (block, t) in self.down.iter().zip(&tape.down).rev() {
            g = block.backward(p, t, &g)?;
        }
        Ok(g)
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates of every batch-norm layer.
    pub fn commit_running_stats<T: Real>(&self, p: &mut ModelParams<T>, tape: &TrunkTape<T>) {
        for (block, t) in self.down.iter().zip(&tape.down) {
            block.commit(p, t);
        }
        for (block, t) in self.up.iter().zip(&tape.up) {
            block.commit(p, t);
        }
    }
}
