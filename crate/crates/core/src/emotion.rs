//! VAD emotion modeling: the emotion encoder over per-word VAD vectors, the
//! fusion of its output into explanation embeddings, the VAD regression head
//! and its loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, Linear};
use crate::params::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const ENCODER_PREFIX: &str = "emotion_encoder.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const VAD_HEAD_PREFIX: &str = "vad_head.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmotionEncoderConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Internal width; input and output stay 3-dimensional.
    pub width: usize,
    /// Restrict each position to itself and earlier explanation words.
    pub causal: bool,
}

impl Default for EmotionEncoderConfig {
    fn default() -> Self {
        EmotionEncoderConfig {
            blocks: 3,
            heads: 1,
            width: 3,
            causal: true,
        }
    }
}

/// Sinusoidal position table `[len, width]`.
pub fn sinusoidal<T: Scalar>(positions: &[usize], width: usize) -> Tensor<T> {
    Tensor::from_fn(&[positions.len(), width], |i| {
        let (t, c) = (positions[i / width] as f64, i % width);
        let freq = 10000f64.powf((2 * (c / 2)) as f64 / width as f64);
        T::lit(if c % 2 == 0 { (t / freq).sin() } else { (t / freq).cos() })
    })
}

/// Transformer encoder mapping a VAD sequence `[T, 3]` to emotion features `[T, 3]`.
#[derive(Debug, Clone)]
pub struct EmotionEncoder {
    pub config: EmotionEncoderConfig,
    pub input: Option<Linear>,
    pub blocks: Vec<Block>,
    pub output: Option<Linear>,
}

impl EmotionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: EmotionEncoderConfig) -> Result<Self> {
        if config.blocks == 0 || config.width == 0 {
            return Err(Error::Config("emotion encoder needs at least one block of positive width".into()));
        }
        let w = config.width;
        let (input, output) = if w == 3 {
            (None, None)
        } else {
            (
                Some(Linear::new(store, "emotion_encoder.input", 3, w)),
                Some(Linear::new(store, "emotion_encoder.output", w, 3)),
            )
        };
        let blocks = (0..config.blocks)
            .map(|i| Block::new(store, &format!("emotion_encoder.blocks.{i}"), w, config.heads, None, 4 * w))
            .collect::<Result<_>>()?;
        Ok(EmotionEncoder {
            config,
            input,
            blocks,
            output,
        })
    }

    fn embed_input<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, vad: Var, positions: &[usize]) -> Result<Var> {
        let s = ctx.tape.shape(vad).to_vec();
        let x = match &self.input {
            Some(l) => l.forward(ctx, vad)?,
            None => vad,
        };
        let pe = sinusoidal::<T>(positions, self.config.width).reshape(&[s[0], s[1], self.config.width])?;
        let pe = ctx.tape.constant(pe);
        ctx.tape.add(x, pe)
    }

    fn project_out<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.output {
            Some(l) => l.forward(ctx, x),
            None => Ok(x),
        }
    }

    /// Encodes `[B, L, 3]` VAD rows; only rows inside `spans[b]` interact.
    /// Rows outside the span attend to themselves and carry no meaning.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, vad: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let s = ctx.tape.shape(vad).to_vec();
        if s.len() != 3 || s[2] != 3 || spans.len() != s[0] {
            return Err(Error::Config(format!("emotion encoder expects [B, L, 3] input, got {s:?}")));
        }
        let (b, l) = (s[0], s[1]);
        if spans.iter().any(|&(st, en)| st >= en || en > l) {
            return Err(Error::EmptySequence("explanation span for the emotion encoder"));
        }
        let positions: Vec<usize> = spans
            .iter()
            .flat_map(|&(st, en)| (0..l).map(move |t| if (st..en).contains(&t) { t - st } else { 0 }))
            .collect();
        let h = self.config.heads;
        let mut mask = Vec::with_capacity(b * h * l * l);
        for &(st, en) in spans {
            for _ in 0..h {
                for i in 0..l {
                    let inside_i = (st..en).contains(&i);
                    for j in 0..l {
                        let ok = if inside_i {
                            (st..en).contains(&j) && (!self.config.causal || j <= i)
                        } else {
                            i == j
                        };
                        mask.push(ok);
                    }
                }
            }
        }
        let mask: std::sync::Arc<[bool]> = mask.into();
        let mut x = self.embed_input(ctx, vad, &positions)?;
        for block in &self.blocks {
            x = block.forward(ctx, x, mask.clone(), None)?;
        }
        self.project_out(ctx, x)
    }

    /// Encodes a single sequence `[T, 3]` → `[T, 3]`.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, vad: Var) -> Result<Var> {
        let s = ctx.tape.shape(vad).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::EmptySequence("VAD sequence"));
        }
        let x = ctx.tape.reshape(vad, &[1, s[0], 3])?;
        let y = self.forward(ctx, x, &[(0, s[0])])?;
        ctx.tape.reshape(y, &[s[0], 3])
    }

    pub fn new_cache<T: Scalar>(&self) -> Vec<BlockCache<T>> {
        vec![BlockCache::default(); self.blocks.len()]
    }

    /// Incremental causal encoding of the explanation word at position `t`.
    pub fn forward_cached<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        vad_row: Var,
        t: usize,
        caches: &mut [BlockCache<T>],
    ) -> Result<Var> {
        if !self.config.causal {
            return Err(Error::Config("incremental encoding requires a causal emotion encoder".into()));
        }
        let mut x = self.embed_input(ctx, vad_row, &[t])?;
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            x = block.forward_cached(ctx, x, cache, None)?;
        }
        self.project_out(ctx, x)
    }
}

/// Affine map of `[text embedding ⊕ emotion feature]` back to model width.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub linear: Linear,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_model: usize) -> Self {
        Fusion {
            linear: Linear::new(store, "fusion", d_model + 3, d_model),
        }
    }

    /// `W·(f_x ⊕ f_e) + b` row-wise.
    pub fn fuse<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f_x: Var, f_e: Var) -> Result<Var> {
        let (sx, se) = (ctx.tape.shape(f_x), ctx.tape.shape(f_e));
        if sx[..sx.len() - 1] != se[..se.len() - 1] {
            return Err(Error::DimMismatch {
                op: "fuse",
                lhs: sx.to_vec(),
                rhs: se.to_vec(),
            });
        }
        let cat = ctx.tape.concat_last(f_x, f_e)?;
        self.linear.forward(ctx, cat)
    }
}

/// Per-word affine VAD readout, unbounded.
#[derive(Debug, Clone)]
pub struct VadHead {
    pub linear: Linear,
}

impl VadHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_model: usize) -> Self {
        VadHead {
            linear: Linear::new(store, "vad_head", d_model, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, hidden: Var) -> Result<Var> {
        self.linear.forward(ctx, hidden)
    }
}

/// Mean squared error over the three components of every unmasked row.
pub fn emotion_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, pred: Var, target: Tensor<T>, mask: &[bool]) -> Result<Var> {
    ctx.tape.mse(pred, target, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_identity_and_constant() {
        let d = 4;
        let mut store = ParamStore::<f64>::new(0);
        let fusion = Fusion::new(&mut store, d);
        let eye = Tensor::from_fn(&[d + 3, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        store.set("fusion.w", eye).unwrap();
        let fx = Tensor::from_fn(&[2, d], |i| i as f64 * 0.1 - 0.3);
        let fe = Tensor::from_fn(&[2, 3], |i| 0.5 - i as f64 * 0.2);
        let mut ctx = Ctx::eval(&store);
        let (a, b) = (ctx.tape.constant(fx.clone()), ctx.tape.constant(fe.clone()));
        let y = fusion.fuse(&mut ctx, a, b).unwrap();
        assert_eq!(ctx.tape.value(y), &fx);

        let mut store2 = ParamStore::<f64>::new(0);
        let fusion = Fusion::new(&mut store2, d);
        store2.set("fusion.w", Tensor::zeros(&[d + 3, d])).unwrap();
        store2.set("fusion.b", Tensor::from_f64(&[d], &[1., 2., 3., 4.]).unwrap()).unwrap();
        let mut ctx = Ctx::eval(&store2);
        let (a, b) = (ctx.tape.constant(fx), ctx.tape.constant(fe));
        let y = fusion.fuse(&mut ctx, a, b).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[1., 2., 3., 4., 1., 2., 3., 4.]);
    }

    #[test]
    fn vad_head_zero_weight_gives_bias() {
        let mut store = ParamStore::<f64>::new(0);
        let head = VadHead::new(&mut store, 5);
        store.set("vad_head.w", Tensor::zeros(&[5, 3])).unwrap();
        store.set("vad_head.b", Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap()).unwrap();
        let mut ctx = Ctx::eval(&store);
        let h = ctx.tape.constant(Tensor::from_fn(&[2, 5], |i| i as f64));
        let y = head.forward(&mut ctx, h).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
    }

    #[test]
    fn emotion_loss_constant_residual() {
        let store = ParamStore::<f64>::new(0);
        let mut ctx = Ctx::eval(&store);
        let target = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin() * 0.9);
        let pred = ctx.tape.constant(target.map(|x| x + 0.1));
        let l = emotion_loss(&mut ctx, pred, target.clone(), &[true; 4]).unwrap();
        assert!((ctx.tape.value(l).item() - 0.01).abs() < 1e-15);
        let same = ctx.tape.constant(target.clone());
        let l = emotion_loss(&mut ctx, same, target.clone(), &[true; 4]).unwrap();
        assert_eq!(ctx.tape.value(l).item(), 0.0);
        assert!(emotion_loss(&mut ctx, same, target, &[false; 4]).is_err());
    }

    #[test]
    fn single_word_sequence_has_no_mixing() {
        let mut store = ParamStore::<f64>::new(9);
        let enc = EmotionEncoder::new(&mut store, EmotionEncoderConfig::default()).unwrap();
        let one = Tensor::from_f64(&[1, 3], &[0.53, 0.142, 0.2]).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(one.clone());
        let y1 = enc.encode(&mut ctx, x).unwrap();
        let y1 = ctx.tape.value(y1).clone();
        // Same word as the first row of a longer causal sequence.
        let two = Tensor::from_f64(&[2, 3], &[0.53, 0.142, 0.2, -0.854, -0.24, -0.214]).unwrap();
        let x2 = ctx.tape.constant(two);
        let y2 = enc.encode(&mut ctx, x2).unwrap();
        let y2 = ctx.tape.value(y2).clone();
        assert_eq!(y1.data(), &y2.data()[..3]);
        assert_eq!(y1.shape(), &[1, 3]);
    }

    #[test]
    fn zero_input_gives_position_only_rows() {
        let mut store = ParamStore::<f64>::new(2);
        let enc = EmotionEncoder::new(&mut store, EmotionEncoderConfig::default()).unwrap();
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".o.w") || n.ends_with(".proj.w")).map(String::from).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::zeros(&[3, 3]));
        let y = enc.encode(&mut ctx, x).unwrap();
        let expect: Tensor<f64> = sinusoidal(&[0, 1, 2], 3);
        assert_eq!(ctx.tape.value(y).data(), expect.data());
    }
}
