//! Low-rank adapters applied as weight-space deltas.

use osr_autodiff::{ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum AdapterSet {
    Stage1,
    Stage2,
}

impl AdapterSet {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Stage1 => "lora.s1.",
            Self::Stage2 => "lora.s2.",
        }
    }
}

/// Which adapter sets contribute to the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdapterSets {
    pub stage1: bool,
    pub stage2: bool,
}

impl AdapterSets {
    pub const NONE: Self = Self {
        stage1: false,
        stage2: false,
    };
    pub const ALL: Self = Self {
        stage1: true,
        stage2: true,
    };
    pub const STAGE1: Self = Self {
        stage1: true,
        stage2: false,
    };

    pub fn contains(self, set: AdapterSet) -> bool {
        match set {
            AdapterSet::Stage1 => self.stage1,
            AdapterSet::Stage2 => self.stage2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank_encoder: usize,
    pub rank_unet: usize,
    pub rank_crossattn_stage2: usize,
    pub scaling: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank_encoder: 4,
            rank_unet: 16,
            rank_crossattn_stage2: 16,
            scaling: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank_encoder == 0 || self.rank_unet == 0 || self.rank_crossattn_stage2 == 0 {
            return Err(Error::Config("LoRA ranks must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adapter {
    pub site: String,
    pub set: AdapterSet,
    pub rank: usize,
    pub scale: f64,
}

impl Adapter {
    pub fn param_a(&self) -> String {
        format!("{}{}.a", self.set.prefix(), self.site)
    }

    pub fn param_b(&self) -> String {
        format!("{}{}.b", self.set.prefix(), self.site)
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraRegistry {
    adapters: Vec<Adapter>,
}

impl LoraRegistry {
    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn at_site<'a>(&'a self, site: &'a str) -> impl Iterator<Item = &'a Adapter> + 'a {
        self.adapters.iter().filter(move |a| a.site == site)
    }

    /// Adds a rank-`rank` adapter on `site.w` with `B = 0`, so the forward pass is unchanged.
    pub fn inject<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        site: &str,
        set: AdapterSet,
        rank: usize,
        scale: f64,
    ) -> Result<()> {
        if rank == 0 {
            return Err(Error::Config(format!("LoRA rank must be >= 1 at `{site}`")));
        }
        if self.adapters.iter().any(|a| a.site == site && a.set == set) {
            return Err(Error::Config(format!("duplicate {set:?} adapter at `{site}`")));
        }
        let id = store
            .id(&format!("{site}.w"))
            .ok_or_else(|| Error::Config(format!("no injectable weight at `{site}`")))?;
        let shape = store.value(id).shape().to_vec();
        let ad = Adapter {
            site: site.to_string(),
            set,
            rank,
            scale,
        };
        let (a_shape, b_shape, fan_in) = match shape.as_slice() {
            [o, i, kh, kw] => (vec![rank, i * kh * kw], vec![*o, rank], i * kh * kw),
            [i, o] => (vec![*i, rank], vec![rank, *o], *i),
            other => return Err(Error::Config(format!("cannot adapt weight of shape {other:?}"))),
        };
        let std = (1.0 / fan_in as f64).sqrt();
        let a = Tensor::from_fn(&a_shape, |_| {
            let e: f64 = rng.sample(StandardNormal);
            T::from_f64(e * std)
        });
        store.insert(&ad.param_a(), a).map_err(|e| Error::Config(e.to_string()))?;
        store
            .insert(&ad.param_b(), Tensor::zeros(&b_shape))
            .map_err(|e| Error::Config(e.to_string()))?;
        self.adapters.push(ad);
        Ok(())
    }
}
