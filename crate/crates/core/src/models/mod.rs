//! PretrainNet, CPNet and RefineNet.
//!
//! All three are instances of one skip-free encoder-decoder. PretrainNet adds
//! a dose classifier on the flattened bottleneck; CPNet is the same trunk
//! without it; RefineNet is a depth-2 trunk fed with `[coarse, lpet]`.

mod layers;
mod trunk;

pub use layers::{ResidualBlock, ResidualTape, INIT_STD};
pub use trunk::{EncoderDecoder, EncoderDecoderConfig, TrunkOutput, TrunkTape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Mode, ModelParams, ParamGroup, Real, Tensor};

/// Builds a standalone residual block with its own parameter set (all
/// names under `enc.res`).
pub fn residual_block<T: Real>(channels: usize, seed: u64) -> Result<(ResidualBlock, ModelParams<T>)> {
    let mut p = ModelParams::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = ResidualBlock::register(&mut p, "enc.res", channels, &mut rng)?;
    Ok((block, p))
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<T> {
    pub recon: Tensor<T>,
    pub logits: Tensor<T>,
    pub tape: TrunkTape<T>,
}

/// Encoder-decoder with dose classifier, trained on self-reconstruction and
/// DRF classification.
#[derive(Debug, Clone)]
pub struct PretrainNet {
    pub trunk: EncoderDecoder,
}

impl PretrainNet {
    pub fn build<T: Real>(base_channels: usize, input_size: usize, seed: u64) -> Result<(Self, ModelParams<T>)> {
        let (trunk, p) =
            EncoderDecoder::build(EncoderDecoderConfig::pretrainnet(base_channels, input_size), seed)?;
        Ok((Self { trunk }, p))
    }

    pub fn forward<T: Real>(
        &self,
        p: &ModelParams<T>,
        lpet: &Tensor<T>,
        mode: Mode,
    ) -> Result<PretrainOutput<T>> {
        let out = self.trunk.forward(p, lpet, mode)?;
        Ok(PretrainOutput {
            recon: out.image,
            logits: out.logits.expect("PretrainNet always has a classifier"),
            tape: out.tape,
        })
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        tape: &TrunkTape<T>,
        d_recon: &Tensor<T>,
        d_logits: &Tensor<T>,
    ) -> Result<()> {
        self.trunk.backward(p, tape, d_recon, Some(d_logits)).map(|_| ())
    }
}

/// Coarse prediction network: LPET to a preliminary SPET estimate.
#[derive(Debug, Clone)]
pub struct CpNet {
    pub trunk: EncoderDecoder,
}

impl CpNet {
    pub fn build<T: Real>(base_channels: usize, input_size: usize, seed: u64) -> Result<(Self, ModelParams<T>)> {
        let (trunk, p) =
            EncoderDecoder::build(EncoderDecoderConfig::cpnet(base_channels, input_size), seed)?;
        Ok((Self { trunk }, p))
    }

    pub fn forward<T: Real>(
        &self,
        p: &ModelParams<T>,
        lpet: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, TrunkTape<T>)> {
        let out = self.trunk.forward(p, lpet, mode)?;
        Ok((out.image, out.tape))
    }

    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        tape: &TrunkTape<T>,
        d_coarse: &Tensor<T>,
    ) -> Result<()> {
        self.trunk.backward(p, tape, d_coarse, None).map(|_| ())
    }
}

/// Residual estimator fed with the coarse prediction and the LPET input.
/// Its output is signed and never clamped.
#[derive(Debug, Clone)]
pub struct RefineNet {
    pub trunk: EncoderDecoder,
}

impl RefineNet {
    pub fn build<T: Real>(base_channels: usize, input_size: usize, seed: u64) -> Result<(Self, ModelParams<T>)> {
        let (trunk, p) =
            EncoderDecoder::build(EncoderDecoderConfig::refinenet(base_channels, input_size), seed)?;
        Ok((Self { trunk }, p))
    }

    pub fn forward<T: Real>(
        &self,
        p: &ModelParams<T>,
        coarse: &Tensor<T>,
        lpet: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, TrunkTape<T>)> {
        if coarse.shape() != lpet.shape() {
            return Err(Error::shape("refinenet", lpet.shape_str(), coarse.shape_str()));
        }
        let input = Tensor::concat_channels(&[coarse, lpet])?;
        let out = self.trunk.forward(p, &input, mode)?;
        Ok((out.image, out.tape))
    }

    /// Returns the gradient w.r.t. the coarse input.
    pub fn backward<T: Real>(
        &self,
        p: &mut ModelParams<T>,
        tape: &TrunkTape<T>,
        d_residual: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dx = self.trunk.backward(p, tape, d_residual, None)?;
        let mut parts = dx.split_channels(&[1, 1])?;
        Ok(parts.swap_remove(0))
    }
}

/// `clamp(coarse + residual, 0, 1)`: the evaluation-time RPET.
pub fn compose_rpet<T: Real>(coarse: &Tensor<T>, residual: &Tensor<T>) -> Result<Tensor<T>> {
    coarse.zip_map(residual, "compose_rpet", |c, r| (c + r).max(T::zero()).min(T::one()))
}

/// Copies every `enc.*` tensor, including batch-norm running statistics,
/// from a PretrainNet into a CPNet.
pub fn transfer_encoder<T: Real>(source: &ModelParams<T>, dest: &mut ModelParams<T>) -> Result<()> {
    dest.copy_group_from(source, ParamGroup::Encoder)
}
