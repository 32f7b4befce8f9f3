//! Transformer building blocks over a shared [`ParamStore`]. Each layer holds
//! only parameter ids; forward passes return a cache consumed by the matching
//! backward pass, which accumulates into a gradient buffer laid out like the
//! store.

use rand_distr::{Distribution, Normal};

use crate::nn::ops::{self, AttnCache, AttnMask, LnCache};
use crate::nn::{ParamId, ParamStore, Scalar, Tensor};
use crate::rng::Rng;
use crate::Result;

pub const INIT_STD: f64 = 0.02;

pub(crate) fn two_mut<X>(v: &mut [X], a: usize, b: usize) -> (&mut X, &mut X) {
    assert_ne!(a, b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Registers parameters with names under a common prefix.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = trunc_normal(shape, INIT_STD, self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        t.fill(T::lit(v));
        self.store.add(name, t)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            w: b.normal(&format!("{name}.w"), &[din, dout])?,
            b: Some(b.constant(&format!("{name}.b"), &[dout], 0.0)?),
        })
    }

    pub fn without_bias<T: Scalar>(b: &mut Builder<'_, T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            w: b.normal(&format!("{name}.w"), &[din, dout])?,
            b: None,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        ops::linear(x, p.value(self.w), self.b.map(|b| p.value(b)))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut [Tensor<T>],
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        match self.b {
            Some(b) => {
                let (dw, db) = two_mut(g, self.w.0, b.0);
                ops::linear_backward(x, p.value(self.w), dy, dw, Some(db))
            }
            None => ops::linear_backward(x, p.value(self.w), dy, &mut g[self.w.0], None),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.constant(&format!("{name}.g"), &[d], 1.0)?,
            bias: b.constant(&format!("{name}.b"), &[d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, LnCache<T>) {
        ops::layer_norm(x, p.value(self.gain), p.value(self.bias))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut [Tensor<T>],
        cache: &LnCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (dg, db) = two_mut(g, self.gain.0, self.bias.0);
        ops::layer_norm_backward(cache, p.value(self.gain), dy, dg, db)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    ctx: Tensor<T>,
    attn: AttnCache<T>,
}

impl Attention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(b, &format!("{name}.q"), d, d)?,
            k: Linear::without_bias(b, &format!("{name}.k"), d, d)?,
            v: Linear::new(b, &format!("{name}.v"), d, d)?,
            o: Linear::new(b, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    /// Keys/values for a fixed source sequence (cross-attention memory).
    pub fn project_kv<T: Scalar>(&self, p: &ParamStore<T>, src: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        (self.k.forward(p, src), self.v.forward(p, src))
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        mask: AttnMask<'_>,
    ) -> (Tensor<T>, AttentionCache<T>) {
        let q = self.q.forward(p, xq);
        let (k, v) = self.project_kv(p, xkv);
        let (ctx, attn) = ops::attention(&q, &k, &v, self.heads, mask);
        let out = self.o.forward(p, &ctx);
        (out, AttentionCache { q, k, v, ctx, attn })
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut [Tensor<T>],
        xq: &Tensor<T>,
        xkv: &Tensor<T>,
        c: &AttentionCache<T>,
        dout: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let dctx = self.o.backward(p, g, &c.ctx, dout);
        let (dq, dk, dv) = ops::attention_backward(&c.q, &c.k, &c.v, self.heads, &c.attn, &dctx);
        let dxq = self.q.backward(p, g, xq, &dq);
        let mut dxkv = self.k.backward(p, g, xkv, &dk);
        dxkv.add_assign(&self.v.backward(p, g, xkv, &dv));
        (dxq, dxkv)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache<T> {
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl FeedForward {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(b, &format!("{name}.up"), d, 4 * d)?,
            down: Linear::new(b, &format!("{name}.down"), 4 * d, d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(p, x);
        let act = ops::gelu(&pre);
        let out = self.down.forward(p, &act);
        (out, FeedForwardCache { pre, act })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut [Tensor<T>],
        x: &Tensor<T>,
        c: &FeedForwardCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let dact = self.down.backward(p, g, &c.act, dy);
        let dpre = ops::gelu_backward(&c.pre, &dact);
        self.up.backward(p, g, x, &dpre)
    }
}

/// Pre-norm self-attention block: `h = x + attn(ln1 x)`, `y = h + ff(ln2 h)`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

pub struct EncoderBlockCache<T> {
    a: Tensor<T>,
    ln1: LnCache<T>,
    attn: AttentionCache<T>,
    b: Tensor<T>,
    ln2: LnCache<T>,
    ff: FeedForwardCache<T>,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
            attn: Attention::new(b, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
            ff: FeedForward::new(b, &format!("{name}.ff"), d)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
        mask: AttnMask<'_>,
    ) -> (Tensor<T>, EncoderBlockCache<T>) {
        let (a, ln1) = self.ln1.forward(p, x);
        let (att, attn) = self.attn.forward(p, &a, &a, mask);
        let mut h = x.clone();
        h.add_assign(&att);
        let (b, ln2) = self.ln2.forward(p, &h);
        let (f, ff) = self.ff.forward(p, &b);
        h.add_assign(&f);
        (
            h,
            EncoderBlockCache {
                a,
                ln1,
                attn,
                b,
                ln2,
                ff,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut [Tensor<T>],
        c: &EncoderBlockCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let db = self.ff.backward(p, g, &c.b, &c.ff, dy);
        let mut dh = dy.clone();
        dh.add_assign(&self.ln2.backward(p, g, &c.ln2, &db));
        let (dq, dkv) = self.attn.backward(p, g, &c.a, &c.a, &c.attn, &dh);
        let mut da = dq;
        da.add_assign(&dkv);
        let mut dx = dh;
        dx.add_assign(&self.ln1.backward(p, g, &c.ln1, &da));
        dx
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// fused memory, then the feed-forward sublayer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross: Attention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

pub struct DecoderBlockCache<T> {
    a: Tensor<T>,
    ln1: LnCache<T>,
    self_attn: AttentionCache<T>,
    b: Tensor<T>,
    ln2: LnCache<T>,
    cross: AttentionCache<T>,
    c: Tensor<T>,
    ln3: LnCache<T>,
    ff: FeedForwardCache<T>,
}

impl DecoderBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(DecoderBlock {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(b, &format!("{name}.self"), d, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
            cross: Attention::new(b, &format!("{name}.cross"), d, heads)?,
            ln3: LayerNorm::new(b, &format!("{name}.ln3"), d)?,
            ff: FeedForward::new(b, &format!("{name}.ff"), d)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
        memory: &Tensor<T>,
        memory_mask: Option<&[bool]>,
    ) -> (Tensor<T>, DecoderBlockCache<T>) {
        let causal = AttnMask {
            causal: Some(0),
            keys: None,
        };
        let (a, ln1) = self.ln1.forward(p, x);
        let (sa, self_attn) = self.self_attn.forward(p, &a, &a, causal);
        let mut h = x.clone();
        h.add_assign(&sa);
        let (b, ln2) = self.ln2.forward(p, &h);
        let cross_mask = AttnMask {
            causal: None,
            keys: memory_mask,
        };
        let (ca, cross) = self.cross.forward(p, &b, memory, cross_mask);
        h.add_assign(&ca);
        let (c, ln3) = self.ln3.forward(p, &h);
        let (f, ff) = self.ff.forward(p, &c);
        h.add_assign(&f);
        (
            h,
            DecoderBlockCache {
                a,
                ln1,
                self_attn,
                b,
                ln2,
                cross,
                c,
                ln3,
                ff,
            },
        )
    }

    /// Returns `(dx, d memory)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut [Tensor<T>],
        memory: &Tensor<T>,
        c: &DecoderBlockCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let dc = self.ff.backward(p, g, &c.c, &c.ff, dy);
        let mut dh = dy.clone();
        dh.add_assign(&self.ln3.backward(p, g, &c.ln3, &dc));
        let (db, dmem) = self.cross.backward(p, g, &c.b, memory, &c.cross, &dh);
        dh.add_assign(&self.ln2.backward(p, g, &c.ln2, &db));
        let (dq, dkv) = self.self_attn.backward(p, g, &c.a, &c.a, &c.self_attn, &dh);
        let mut da = dq;
        da.add_assign(&dkv);
        dh.add_assign(&self.ln1.backward(p, g, &c.ln1, &da));
        (dh, dmem)
    }
}
