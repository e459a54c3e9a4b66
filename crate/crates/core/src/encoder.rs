//! Embedding backbones: Conv-4 for images, an MLP for feature vectors, and
//! the identity.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::network::{init_conv_block, init_linear, Forward};
use crate::numerics::{ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Conv4,
    Mlp,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Per-sample input extents: `[C, H, W]` for conv4, `[len]` otherwise.
    pub input_shape: Vec<usize>,
    /// Filters per conv block.
    pub channels: usize,
    /// Hidden widths of the MLP.
    pub mlp_dims: Vec<usize>,
    /// Embedding length for mlp / identity.
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_shape: vec![16],
            channels: 64,
            mlp_dims: vec![32],
            out_dim: 16,
        }
    }
}

const CONV_BLOCKS: usize = 4;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.kind {
            EncoderKind::Conv4 => {
                let &[_, h, w] = self.input_shape.as_slice() else {
                    return bad(format!(
                        "conv4 needs [C, H, W] input, got {:?}",
                        self.input_shape
                    ));
                };
                if (h >> CONV_BLOCKS) == 0 || (w >> CONV_BLOCKS) == 0 {
                    return bad(format!(
                        "conv4 input {h}x{w} vanishes after {CONV_BLOCKS} pools"
                    ));
                }
                if self.channels == 0 {
                    return bad("conv4 needs at least one channel".into());
                }
            }
            EncoderKind::Mlp => {
                if self.input_shape.len() != 1 || self.out_dim == 0 || self.mlp_dims.contains(&0) {
                    return bad(format!(
                        "mlp needs flat input and positive widths, got {:?} -> {:?} -> {}",
                        self.input_shape, self.mlp_dims, self.out_dim
                    ));
                }
            }
            EncoderKind::Identity => {
                if self.input_shape != [self.out_dim] {
                    return bad(format!(
                        "identity needs flat input of length out_dim={}, got {:?}",
                        self.out_dim, self.input_shape
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-sample embedding extents.
    pub fn feature_shape(&self) -> Vec<usize> {
        match self.kind {
            EncoderKind::Conv4 => {
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                vec![self.channels, h >> CONV_BLOCKS, w >> CONV_BLOCKS]
            }
            _ => vec![self.out_dim],
        }
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

pub fn init_encoder(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    match cfg.kind {
        EncoderKind::Conv4 => {
            let mut in_ch = cfg.input_shape[0];
            for b in 0..CONV_BLOCKS {
                init_conv_block(
                    store,
                    &format!("encoder.block{b}"),
                    in_ch,
                    cfg.channels,
                    rng,
                );
                in_ch = cfg.channels;
            }
        }
        EncoderKind::Mlp => {
            let mut widths = vec![cfg.input_shape[0]];
            widths.extend(&cfg.mlp_dims);
            widths.push(cfg.out_dim);
            for (i, w) in widths.windows(2).enumerate() {
                init_linear(store, &format!("encoder.fc{i}"), w[0], w[1], rng);
            }
        }
        EncoderKind::Identity => {}
    }
    Ok(())
}

/// Embed a batch shaped `(B, input_shape...)`. Conv4 yields `(B, C, h, w)`
/// feature maps, the others `(B, out_dim)`.
pub fn encode<'t>(fwd: &Forward<'_, 't>, cfg: &EncoderConfig, batch: Var<'t>) -> Result<Var<'t>> {
    let shape = batch.shape();
    if shape.len() != cfg.input_shape.len() + 1 || shape[1..] != cfg.input_shape[..] {
        return shape_err(
            "encode",
            format!(
                "batch {shape:?} does not match input shape {:?}",
                cfg.input_shape
            ),
        );
    }
    match cfg.kind {
        EncoderKind::Identity => Ok(batch),
        EncoderKind::Mlp => {
            let layers = cfg.mlp_dims.len() + 1;
            let mut x = batch;
            for i in 0..layers {
                x = fwd.linear(&format!("encoder.fc{i}"), x)?;
                if i + 1 < layers {
                    x = x.relu()?;
                }
            }
            Ok(x)
        }
        EncoderKind::Conv4 => {
            let mut x = batch;
            for b in 0..CONV_BLOCKS {
                x = fwd.conv_block(&format!("encoder.block{b}"), x)?;
            }
            Ok(x)
        }
    }
}
