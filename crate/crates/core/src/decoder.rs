//! Decoder-only transformer with cross-attention to image patch features in
//! every block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, BlockCache, LayerNorm};
use crate::params::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_vision: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_vision == 0 || self.vocab_size == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

/// Decoder output `[B, L, d]` with the prompt/explanation partition of each
/// row.
#[derive(Debug, Clone, Copy)]
pub struct HiddenStates {
    pub full: Var,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("decoder.blocks.{i}"),
                    config.d_model,
                    config.n_heads,
                    Some(config.d_vision),
                    4 * config.d_model,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            config,
            blocks,
            ln_final: LayerNorm::new(store, "decoder.ln_final", config.d_model),
        })
    }

    /// Runs every block over `f_s` (`[B, L, d]`) attending to `f_i`
    /// (`[B, K, d_v]`). `valid[b][t]` marks non-padding positions; padding keys
    /// are never attended to.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_s: Var, f_i: Var, valid: &[Vec<bool>]) -> Result<HiddenStates> {
        let s = ctx.tape.shape(f_s).to_vec();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(Error::Config(format!(
                "decoder expects [B, L, {}] text features, got {s:?}",
                self.config.d_model
            )));
        }
        let si = ctx.tape.shape(f_i).to_vec();
        if si.len() != 3 || si[2] != self.config.d_vision || si[0] != s[0] {
            return Err(Error::Config(format!(
                "decoder expects [{}, K, {}] image features, got {si:?}",
                s[0], self.config.d_vision
            )));
        }
        if valid.len() != s[0] || valid.iter().any(|v| v.len() != s[1]) {
            return Err(Error::Config("padding mask does not match the text batch".into()));
        }
        let mask = causal_mask(s[0], self.config.n_heads, s[1], s[1], 0, valid);
        let mut x = f_s;
        for block in &self.blocks {
            x = block.forward(ctx, x, mask.clone(), Some(f_i))?;
        }
        Ok(HiddenStates {
            full: self.ln_final.forward(ctx, x)?,
        })
    }

    pub fn new_cache<T: Scalar>(&self) -> Vec<BlockCache<T>> {
        vec![BlockCache::default(); self.blocks.len()]
    }

    /// Incremental forward for new rows `x` (`[1, n, d]`) of a single
    /// sequence. `f_i` is only read on the first call, when the per-block
    /// cross-attention keys/values are computed and cached.
    pub fn forward_cached<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        f_i: Option<Var>,
        caches: &mut [BlockCache<T>],
    ) -> Result<Var> {
        let mut h = x;
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            h = block.forward_cached(ctx, h, cache, f_i)?;
        }
        self.ln_final.forward(ctx, h)
    }
}
