//! Spectral-normalized, fully convolutional patch critic shared by every
//! adversarial term.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{leaky_relu, Network, ParamStore, SpectralConv2d};

/// Number of stride-2 stages; score maps are `input / 16` on each side.
pub const CRITIC_DOWNSAMPLING: usize = 4;

pub struct PatchCritic {
    store: ParamStore,
    convs: Vec<SpectralConv2d>,
    head: SpectralConv2d,
}

impl PatchCritic {
    pub fn new(mut store: ParamStore, in_channels: usize, base_width: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = in_channels;
        for i in 0..CRITIC_DOWNSAMPLING {
            let out = base_width << i.min(2);
            convs.push(SpectralConv2d::new(&mut store, &format!("conv{i}"), c, out, 5, 2)?);
            c = out;
        }
        let head = SpectralConv2d::new(&mut store, "head", c, 1, 3, 1)?;
        Ok(Self { store, convs, head })
    }

    /// `[B, C, H, W] -> [B, 1, H/16, W/16]`. `train` advances the spectral
    /// power iteration.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h, train)?, 0.2)?;
        }
        self.head.forward(&h, train)
    }
}

impl Network for PatchCritic {
    fn store(&self) -> &ParamStore {
        &self.store
    }
}
