//! Transformer building blocks over the autodiff tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.register(&format!("{prefix}.w"), &[d_in, d_out], Init::Normal(INIT_STD)),
            b: store.register(&format!("{prefix}.b"), &[d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(&self.w)?, ctx.p(&self.b)?);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: String,
    pub b: String,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        LayerNorm {
            g: store.register(&format!("{prefix}.g"), &[d], Init::Ones),
            b: store.register(&format!("{prefix}.b"), &[d], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(&self.g)?, ctx.p(&self.b)?);
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc: Linear,
    pub proj: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, hidden: usize) -> Self {
        Mlp {
            fc: Linear::new(store, &format!("{prefix}.fc"), d, hidden),
            proj: Linear::new(store, &format!("{prefix}.proj"), hidden, d),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        let y = self.proj.forward(ctx, h)?;
        ctx.dropout(y)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

/// Keys and values of earlier positions, `[1, H, len, d_head]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache<T> {
    pub k: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[2])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends `new` (`[1, H, n, dh]`) along the sequence axis of `old`.
fn append_seq<T: Scalar>(old: Option<&Tensor<T>>, new: &Tensor<T>) -> Tensor<T> {
    let Some(old) = old else {
        return new.clone();
    };
    let (h, lo, ln, dh) = (old.shape()[1], old.shape()[2], new.shape()[2], old.shape()[3]);
    let mut data = Vec::with_capacity(old.numel() + new.numel());
    for head in 0..h {
        data.extend_from_slice(&old.data()[head * lo * dh..(head + 1) * lo * dh]);
        data.extend_from_slice(&new.data()[head * ln * dh..(head + 1) * ln * dh]);
    }
    Tensor::new(vec![1, h, lo + ln, dh], data).expect("consistent cache shapes")
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, d_kv: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{prefix}.q"), d, d),
            k: Linear::new(store, &format!("{prefix}.k"), d_kv, d),
            v: Linear::new(store, &format!("{prefix}.v"), d_kv, d),
            o: Linear::new(store, &format!("{prefix}.o"), d, d),
            heads,
            d,
        })
    }

    fn split_heads<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let x = ctx.tape.reshape(x, &[b, l, self.heads, self.d / self.heads])?;
        ctx.tape.permute(x, &[0, 2, 1, 3])
    }

    fn merge_heads<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let (b, l) = (s[0], s[2]);
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        ctx.tape.reshape(x, &[b, l, self.d])
    }

    /// Projects a key/value source `[B, Lk, d_kv]` into per-head keys and values.
    pub fn project_kv<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, src: Var) -> Result<(Var, Var)> {
        let k = self.k.forward(ctx, src)?;
        let k = self.split_heads(ctx, k)?;
        let v = self.v.forward(ctx, src)?;
        let v = self.split_heads(ctx, v)?;
        Ok((k, v))
    }

    /// Attends queries from `x` (`[B, Lq, d]`) over per-head keys/values.
    /// `allowed` has shape `[B, H, Lq, Lk]`.
    pub fn attend<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        k: Var,
        v: Var,
        allowed: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let q = self.q.forward(ctx, x)?;
        let q = self.split_heads(ctx, q)?;
        let scores = ctx.tape.matmul_nt(q, k)?;
        let dh = self.d / self.heads;
        let scores = ctx.tape.scale(scores, T::one() / T::lit(dh as f64).sqrt());
        let probs = ctx.tape.softmax_last(scores, allowed)?;
        let probs = ctx.dropout(probs)?;
        let out = ctx.tape.matmul(probs, v)?;
        let out = self.merge_heads(ctx, out)?;
        self.o.forward(ctx, out)
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        src: Var,
        allowed: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(ctx, src)?;
        self.attend(ctx, x, k, v, allowed)
    }

    /// Causal self-attention for new rows `x` (`[1, n, d]`) appended after the
    /// cached positions. The cache is extended in place.
    pub fn forward_cached<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, cache: &mut KvCache<T>) -> Result<Var> {
        let n = ctx.tape.shape(x)[1];
        let past = cache.len();
        let (k_new, v_new) = self.project_kv(ctx, x)?;
        let k_all = append_seq(cache.k.as_ref(), ctx.tape.value(k_new));
        let v_all = append_seq(cache.v.as_ref(), ctx.tape.value(v_new));
        let k = ctx.tape.constant(k_all.clone());
        let v = ctx.tape.constant(v_all.clone());
        cache.k = Some(k_all);
        cache.v = Some(v_all);
        let total = past + n;
        let mask = causal_mask(1, self.heads, n, total, past, &[vec![true; total]]);
        self.attend(ctx, x, k, v, Some(mask))
    }
}

/// Attention mask `[B, H, Lq, Lk]`: query row `i` (absolute position
/// `offset + i`) may see key `j` when `j <= offset + i` and the key is valid.
pub fn causal_mask(b: usize, h: usize, lq: usize, lk: usize, offset: usize, key_valid: &[Vec<bool>]) -> Arc<[bool]> {
    let mut m = Vec::with_capacity(b * h * lq * lk);
    for valid in key_valid.iter().take(b) {
        for _ in 0..h {
            for i in 0..lq {
                for (j, &ok) in valid.iter().enumerate().take(lk) {
                    m.push(ok && j <= offset + i);
                }
            }
        }
    }
    m.into()
}

/// Attention mask `[B, H, Lq, Lk]` allowing every valid key.
pub fn key_mask(h: usize, lq: usize, key_valid: &[Vec<bool>]) -> Arc<[bool]> {
    let mut m = Vec::new();
    for valid in key_valid {
        for _ in 0..h * lq {
            m.extend_from_slice(valid);
        }
    }
    m.into()
}

/// Pre-norm transformer block: self-attention, optional cross-attention,
/// then MLP, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Per-block cache for incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    pub self_kv: KvCache<T>,
    /// Cross-attention keys/values, computed once per image.
    pub cross_kv: Option<(Tensor<T>, Tensor<T>)>,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        cross_kv_width: Option<usize>,
        mlp_hidden: usize,
    ) -> Result<Self> {
        let cross = match cross_kv_width {
            Some(dkv) => Some((
                LayerNorm::new(store, &format!("{prefix}.ln_cross"), d),
                Attention::new(store, &format!("{prefix}.cross_attn"), d, dkv, heads)?,
            )),
            None => None,
        };
        Ok(Block {
            ln_self: LayerNorm::new(store, &format!("{prefix}.ln_self"), d),
            self_attn: Attention::new(store, &format!("{prefix}.self_attn"), d, d, heads)?,
            cross,
            ln_mlp: LayerNorm::new(store, &format!("{prefix}.ln_mlp"), d),
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), d, mlp_hidden),
        })
    }

    /// Full-sequence forward. `cross_src` is `[B, K, d_kv]`, attended without masking.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        self_mask: Arc<[bool]>,
        cross_src: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(ctx, x)?;
        let a = self.self_attn.forward(ctx, h, h, Some(self_mask))?;
        let a = ctx.dropout(a)?;
        let mut x = ctx.tape.add(x, a)?;
        if let Some((ln, attn)) = &self.cross {
            let src = cross_src.ok_or_else(|| Error::Config("cross-attention block needs image features".into()))?;
            let h = ln.forward(ctx, x)?;
            let c = attn.forward(ctx, h, src, None)?;
            let c = ctx.dropout(c)?;
            x = ctx.tape.add(x, c)?;
        }
        let h = self.ln_mlp.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }

    /// Incremental forward of new rows `x` (`[1, n, d]`).
    pub fn forward_cached<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        cache: &mut BlockCache<T>,
        cross_src: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(ctx, x)?;
        let a = self.self_attn.forward_cached(ctx, h, &mut cache.self_kv)?;
        let mut x = ctx.tape.add(x, a)?;
        if let Some((ln, attn)) = &self.cross {
            let (k, v) = match &cache.cross_kv {
                Some((k, v)) => (ctx.tape.constant(k.clone()), ctx.tape.constant(v.clone())),
                None => {
                    let src = cross_src.ok_or_else(|| Error::Config("cross-attention block needs image features".into()))?;
                    let (k, v) = attn.project_kv(ctx, src)?;
                    cache.cross_kv = Some((ctx.tape.value(k).clone(), ctx.tape.value(v).clone()));
                    (k, v)
                }
            };
            let h = ln.forward(ctx, x)?;
            let c = attn.attend(ctx, h, k, v, None)?;
            x = ctx.tape.add(x, c)?;
        }
        let h = self.ln_mlp.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(1, 1, 3, 3, 0, &[vec![true, true, false]]);
        assert_eq!(
            &*m,
            &[true, false, false, true, true, false, true, true, false]
        );
    }

    #[test]
    fn single_token_self_attention_returns_value_projection() {
        let mut store = ParamStore::<f64>::new(1);
        let attn = Attention::new(&mut store, "a", 4, 4, 2).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::from_fn(&[1, 1, 4], |i| 0.3 * i as f64 - 0.2));
        let mask = causal_mask(1, 2, 1, 1, 0, &[vec![true]]);
        let y = attn.forward(&mut ctx, x, x, Some(mask)).unwrap();
        let v = attn.v.forward(&mut ctx, x).unwrap();
        let expect = attn.o.forward(&mut ctx, v).unwrap();
        assert_eq!(ctx.tape.value(y), ctx.tape.value(expect));
    }
}
