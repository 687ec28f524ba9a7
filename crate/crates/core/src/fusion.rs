//! Residual harmonizer applied to the composited scene.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::critic::PatchCritic;
use crate::error::{dim_err, Error, Result};
use crate::nn::{leaky_relu, scalar, upsample2x, Conv2d, Network, ParamStore};
use crate::objectives::{compose_objective, hinge_d_loss, hinge_g_loss, perceptual_loss, FeaturePyramid, LossWeights, Stage, Term};
use crate::train::{finish_report, Adam, LossReport, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub base_width: usize,
    pub num_down: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            base_width: 48,
            num_down: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, scene_size: usize) -> Result<()> {
        if self.base_width == 0 || self.num_down == 0 || scene_size % (1 << self.num_down) != 0 {
            return Err(Error::Config(format!("invalid fusion config {self:?} for scene {scene_size}")));
        }
        Ok(())
    }
}

pub struct FusionNet {
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    residual: Conv2d,
}

impl FusionNet {
    pub fn new(mut store: ParamStore, config: &FusionConfig, num_classes: usize) -> Result<Self> {
        let w = |l: usize| config.base_width << l.min(3);
        let stem = Conv2d::new(&mut store, "stem", 3 + num_classes + 1, w(0), 3, 1)?;
        let mut down = Vec::new();
        for l in 0..config.num_down {
            down.push(Conv2d::new(&mut store, &format!("down{l}"), w(l), w(l + 1), 4, 2)?);
        }
        let mut up = Vec::new();
        for l in (0..config.num_down).rev() {
            up.push(Conv2d::new(&mut store, &format!("up{l}"), w(l + 1) + w(l), w(l), 3, 1)?);
        }
        let residual = Conv2d::new_constant(&mut store, "residual", w(0), 3, 3, 0.0)?;
        Ok(Self {
            store,
            stem,
            down,
            up,
            residual,
        })
    }

    /// Per-pixel offset predicted for the composite.
    pub fn residual(&self, composite: &Tensor, one_hot: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = composite.dims4()?;
        if c != 3 || one_hot.dims()[2..] != [h, w] || mask.dims()[2..] != [h, w] {
            return Err(dim_err!(
                "fusion inputs {:?} {:?} {:?}",
                composite.dims(),
                one_hot.dims(),
                mask.dims()
            ));
        }
        let x = Tensor::cat(&[composite, one_hot, mask], 1)?;
        let mut skips = vec![leaky_relu(&self.stem.forward(&x)?, 0.2)?];
        for d in &self.down {
            let h = leaky_relu(&d.forward(skips.last().expect("stem present"))?, 0.2)?;
            skips.push(h);
        }
        let mut h = skips.pop().expect("stem present");
        for u in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = leaky_relu(&u.forward(&Tensor::cat(&[&upsample2x(&h)?, &skip], 1)?)?, 0.2)?;
        }
        self.residual.forward(&h)
    }

    /// `clamp(composite + residual, -1, 1)`.
    pub fn forward(&self, composite: &Tensor, one_hot: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let r = self.residual(composite, one_hot, mask)?;
        Ok((composite + r)?.maximum(-1.0)?.minimum(1.0)?)
    }
}

impl Network for FusionNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Network-space fusion batch; `composite` comes from frozen upstream stages.
#[derive(Debug, Clone)]
pub struct FusionBatch {
    pub composite: Tensor,
    pub target: Tensor,
    pub one_hot: Tensor,
    pub edit: Tensor,
}

pub struct FusionTrainer {
    pub net: FusionNet,
    pub critic: PatchCritic,
    opt_g: Adam,
    opt_d: Adam,
    pub weights: LossWeights,
    pyramid: FeaturePyramid,
    pub adversarial: bool,
}

impl FusionTrainer {
    pub fn new(net: FusionNet, critic: PatchCritic, optim: &OptimConfig, weights: LossWeights, pyramid: FeaturePyramid) -> Result<Self> {
        weights.validate()?;
        optim.validate()?;
        Ok(Self {
            opt_g: optim.generator(net.store().vars())?,
            opt_d: optim.critic(critic.store().vars())?,
            net,
            critic,
            weights,
            pyramid,
            adversarial: true,
        })
    }

    pub fn step(&mut self, batch: &FusionBatch) -> Result<LossReport> {
        let stage = Stage::Fusion;
        let out = self.net.forward(&batch.composite, &batch.one_hot, &batch.edit)?;
        let cond = |x: &Tensor| -> Result<Tensor> { Ok(Tensor::cat(&[x, &batch.one_hot], 1)?) };
        let mut critic = BTreeMap::new();
        if self.adversarial {
            let real = self.critic.forward(&cond(&batch.target)?, true)?;
            let fake = self.critic.forward(&cond(&out.detach())?, true)?;
            let loss = hinge_d_loss(&real, &fake)?;
            critic.insert("d_fusion".to_string(), scalar(&loss)?);
            self.opt_d.step(&loss)?;
        }
        let mut parts = BTreeMap::new();
        parts.insert(Term::Perceptual, perceptual_loss(&out, &batch.target, &self.pyramid)?);
        let gan = if self.adversarial {
            hinge_g_loss(&self.critic.forward(&cond(&out)?, false)?)?
        } else {
            Tensor::zeros((), out.dtype(), out.device())?
        };
        parts.insert(Term::Gan, gan);
        let total = compose_objective(stage, &parts, &self.weights)?;
        let report = finish_report(stage, &parts, &total, critic)?;
        self.opt_g.step(&total)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn untrained_net_is_identity_on_composite() {
        let dev = Device::Cpu;
        let net = FusionNet::new(ParamStore::new(4, DType::F32), &FusionConfig { base_width: 4, num_down: 2 }, 3).unwrap();
        let comp = Tensor::rand(-1f32, 1f32, (2, 3, 16, 16), &dev).unwrap();
        let seg = Tensor::rand(0f32, 1f32, (2, 3, 16, 16), &dev).unwrap();
        let mask = Tensor::ones((2, 1, 16, 16), DType::F32, &dev).unwrap();
        let out = net.forward(&comp, &seg, &mask).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            comp.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let loud = (comp * 3.0).unwrap();
        let out = net.forward(&loud, &seg, &mask).unwrap();
        assert!(out.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() <= 1.0);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let dev = Device::Cpu;
        let net = FusionNet::new(ParamStore::new(4, DType::F32), &FusionConfig { base_width: 4, num_down: 2 }, 3).unwrap();
        let comp = Tensor::zeros((1, 3, 16, 16), DType::F32, &dev).unwrap();
        let seg = Tensor::zeros((1, 3, 8, 8), DType::F32, &dev).unwrap();
        let mask = Tensor::zeros((1, 1, 16, 16), DType::F32, &dev).unwrap();
        assert!(net.forward(&comp, &seg, &mask).is_err());
    }
}
