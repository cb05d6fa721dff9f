//! Scaled dot-product attention, multi-head attention, and the pre-LN
//! residual blocks built from them. Forward passes return caches; backward
//! passes consume them and accumulate parameter gradients into the store.

use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::{
    gelu, gelu_backward, layer_norm_backward, layer_norm_fwd, softmax_rows,
    softmax_rows_backward, LayerNormCache, Tensor,
};

pub const INIT_STD: f64 = 0.02;
const MASK_PENALTY: f64 = -1e9;

/// Boolean visibility matrix: `allowed[i][j]` says key j is visible to query i.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    t_q: usize,
    t_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(t_q: usize, t_k: usize) -> Self {
        AttentionMask {
            t_q,
            t_k,
            allowed: vec![true; t_q * t_k],
        }
    }

    /// Every query sees exactly the keys marked real.
    pub fn from_key_mask(key_real: &[bool], t_q: usize) -> Self {
        let t_k = key_real.len();
        let mut allowed = Vec::with_capacity(t_q * t_k);
        for _ in 0..t_q {
            allowed.extend_from_slice(key_real);
        }
        AttentionMask { t_q, t_k, allowed }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t_q, self.t_k)
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.t_k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.allowed[i * self.t_k + j] = v;
    }

    /// Each query row must see at least one key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.t_q {
            if !self.allowed[i * self.t_k..(i + 1) * self.t_k]
                .iter()
                .any(|&v| v)
            {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        Ok(())
    }
}

fn apply_mask(scores: &mut Tensor, mask: &AttentionMask) {
    let (m, n) = (scores.rows(), scores.cols());
    for i in 0..m {
        for j in 0..n {
            if !mask.allowed(i, j) {
                scores.data_mut()[i * n + j] += MASK_PENALTY;
            }
        }
    }
}

/// Plain single-head attention: softmax(q k^T / sqrt(d)) v.
/// Returns the output and the attention weights.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if mask.dims() != (q.rows(), k.rows()) {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention mask",
            lhs: vec![q.rows(), k.rows()],
            rhs: vec![mask.dims().0, mask.dims().1],
        });
    }
    mask.validate()?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_nt(k)?.scale(scale);
    apply_mask(&mut scores, mask);
    let weights = softmax_rows(&scores);
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

fn slice_cols(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let w = hi - lo;
    let mut out = Tensor::zeros(&[m, w]);
    for i in 0..m {
        out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&t.data()[i * n + lo..i * n + hi]);
    }
    out
}

fn write_cols(dst: &mut Tensor, src: &Tensor, lo: usize) {
    let (m, n) = (dst.rows(), dst.cols());
    let w = src.cols();
    for i in 0..m {
        dst.data_mut()[i * n + lo..i * n + lo + w].copy_from_slice(&src.data()[i * w..(i + 1) * w]);
    }
}

/// Shaw-style clipped relative offsets, added to keys in self-attention.
#[derive(Debug, Clone, Copy)]
pub struct RelativePosition {
    pub k_max: usize,
}

impl RelativePosition {
    pub fn table_rows(&self) -> usize {
        2 * self.k_max + 1
    }

    pub fn index(&self, query: usize, key: usize) -> usize {
        let k = self.k_max as i64;
        let off = (key as i64 - query as i64).clamp(-k, k);
        (off + k) as usize
    }
}

/// Multi-head attention per the usual split-project-attend-concat recipe.
/// Parameter names live under the construction scope: wq/bq, wk/bk, wv/bv,
/// wo/bo, and rel when a relative-position table is attached.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    scope: Scope,
    pub d_model: usize,
    pub heads: usize,
    pub rel: Option<RelativePosition>,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    q_src: Tensor,
    kv_src: Tensor,
    qp: Tensor,
    kp: Tensor,
    vp: Tensor,
    weights: Vec<Tensor>,
    concat: Tensor,
}

impl MhaCache {
    /// Head-averaged attention weights, one row per query.
    pub fn mean_weights(&self) -> Tensor {
        let (m, n) = (self.weights[0].rows(), self.weights[0].cols());
        let mut out = Tensor::zeros(&[m, n]);
        for w in &self.weights {
            out.add_assign(w);
        }
        out.scale(1.0 / self.weights.len() as f64)
    }
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        d_model: usize,
        heads: usize,
        rel: Option<RelativePosition>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(scope.name(w), Tensor::randn(&[d_model, d_model], INIT_STD, rng));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert(scope.name(b), Tensor::zeros(&[d_model]));
        }
        if let Some(r) = rel {
            store.insert(
                scope.name("rel"),
                Tensor::randn(&[r.table_rows(), d_model / heads], INIT_STD, rng),
            );
        }
        Ok(MultiHeadAttention {
            scope: scope.clone(),
            d_model,
            heads,
            rel,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        q_src: &Tensor,
        kv_src: &Tensor,
        mask: &AttentionMask,
    ) -> Result<(Tensor, MhaCache)> {
        if q_src.cols() != self.d_model || kv_src.cols() != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                lhs: q_src.shape().to_vec(),
                rhs: vec![self.d_model],
            });
        }
        if mask.dims() != (q_src.rows(), kv_src.rows()) {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention mask",
                lhs: vec![q_src.rows(), kv_src.rows()],
                rhs: vec![mask.dims().0, mask.dims().1],
            });
        }
        mask.validate()?;

        let s = &self.scope;
        let qp = q_src
            .matmul(store.value(&s.name("wq")))?
            .add_row_broadcast(store.value(&s.name("bq")))?;
        let kp = kv_src
            .matmul(store.value(&s.name("wk")))?
            .add_row_broadcast(store.value(&s.name("bk")))?;
        let vp = kv_src
            .matmul(store.value(&s.name("wv")))?
            .add_row_broadcast(store.value(&s.name("bv")))?;

        let dh = self.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let (t_q, t_k) = (q_src.rows(), kv_src.rows());
        let mut concat = Tensor::zeros(&[t_q, self.d_model]);
        let mut weights = Vec::with_capacity(self.heads);

        let rel_table = self.rel.map(|_| store.value(&s.name("rel")));

        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = slice_cols(&qp, lo, hi);
            let kh = slice_cols(&kp, lo, hi);
            let vh = slice_cols(&vp, lo, hi);

            let mut scores = qh.matmul_nt(&kh)?.scale(scale);
            if let (Some(rel), Some(table)) = (self.rel, rel_table) {
                for i in 0..t_q {
                    let qrow = qh.row(i);
                    for j in 0..t_k {
                        let arow = table.row(rel.index(i, j));
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qrow[c] * arow[c];
                        }
                        scores.data_mut()[i * t_k + j] += dot * scale;
                    }
                }
            }
            apply_mask(&mut scores, mask);
            let wh = softmax_rows(&scores);
            let oh = wh.matmul(&vh)?;
            write_cols(&mut concat, &oh, lo);
            weights.push(wh);
        }

        let out = concat
            .matmul(store.value(&s.name("wo")))?
            .add_row_broadcast(store.value(&s.name("bo")))?;

        Ok((
            out,
            MhaCache {
                q_src: q_src.clone(),
                kv_src: kv_src.clone(),
                qp,
                kp,
                vp,
                weights,
                concat,
            },
        ))
    }

    /// Accumulates parameter gradients and returns (d q_src, d kv_src).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MhaCache,
        dout: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let s = &self.scope;
        let dh = self.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let (t_q, t_k) = (cache.q_src.rows(), cache.kv_src.rows());

        // output projection
        let dwo = cache.concat.matmul_tn(dout)?;
        store.acc_grad(&s.name("wo"), &dwo);
        store.acc_grad(&s.name("bo"), &dout.sum_rows());
        let dconcat = dout.matmul_nt(store.value(&s.name("wo")))?;

        let mut dqp = Tensor::zeros(&[t_q, self.d_model]);
        let mut dkp = Tensor::zeros(&[t_k, self.d_model]);
        let mut dvp = Tensor::zeros(&[t_k, self.d_model]);
        let mut drel = self
            .rel
            .map(|r| Tensor::zeros(&[r.table_rows(), dh]));

        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = slice_cols(&cache.qp, lo, hi);
            let kh = slice_cols(&cache.kp, lo, hi);
            let vh = slice_cols(&cache.vp, lo, hi);
            let wh = &cache.weights[h];
            let doh = slice_cols(&dconcat, lo, hi);

            let dwh = doh.matmul_nt(&vh)?;
            let dvh = wh.matmul_tn(&doh)?;
            let ds = softmax_rows_backward(wh, &dwh);

            let mut dqh = ds.matmul(&kh)?.scale(scale);
            let dkh = ds.matmul_tn(&qh)?.scale(scale);

            if let (Some(rel), Some(dr)) = (self.rel, drel.as_mut()) {
                let table = store.value(&s.name("rel")).clone();
                for i in 0..t_q {
                    for j in 0..t_k {
                        let g = ds.at2(i, j) * scale;
                        if g == 0.0 {
                            continue;
                        }
                        let idx = rel.index(i, j);
                        let arow = table.row(idx);
                        let qrow = &qh.data()[i * dh..(i + 1) * dh];
                        for c in 0..dh {
                            dqh.data_mut()[i * dh + c] += g * arow[c];
                            dr.data_mut()[idx * dh + c] += g * qrow[c];
                        }
                    }
                }
            }

            write_cols(&mut dqp, &dqh, lo);
            write_cols(&mut dkp, &dkh, lo);
            write_cols(&mut dvp, &dvh, lo);
        }

        if let Some(dr) = drel {
            store.acc_grad(&s.name("rel"), &dr);
        }

        // input projections
        store.acc_grad(&s.name("wq"), &cache.q_src.matmul_tn(&dqp)?);
        store.acc_grad(&s.name("bq"), &dqp.sum_rows());
        store.acc_grad(&s.name("wk"), &cache.kv_src.matmul_tn(&dkp)?);
        store.acc_grad(&s.name("bk"), &dkp.sum_rows());
        store.acc_grad(&s.name("wv"), &cache.kv_src.matmul_tn(&dvp)?);
        store.acc_grad(&s.name("bv"), &dvp.sum_rows());

        let dq_src = dqp.matmul_nt(store.value(&s.name("wq")))?;
        let mut dkv_src = dkp.matmul_nt(store.value(&s.name("wk")))?;
        dkv_src.add_assign(&dvp.matmul_nt(store.value(&s.name("wv")))?);

        Ok((dq_src, dkv_src))
    }
}

/// Layer norm with learned affine; parameters "<scope>.g" and "<scope>.b".
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    scope: Scope,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, scope: &Scope, d: usize) -> Self {
        store.insert(scope.name("g"), Tensor::filled(&[d], 1.0));
        store.insert(scope.name("b"), Tensor::zeros(&[d]));
        LayerNormLayer {
            scope: scope.clone(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        layer_norm_fwd(
            x,
            store.value(&self.scope.name("g")),
            store.value(&self.scope.name("b")),
            self.eps,
        )
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let gamma = store.value(&self.scope.name("g")).clone();
        let (dx, dgamma, dbeta) = layer_norm_backward(cache, &gamma, dy);
        store.acc_grad(&self.scope.name("g"), &dgamma);
        store.acc_grad(&self.scope.name("b"), &dbeta);
        dx
    }
}

/// Two-layer GELU feed-forward, d_model -> d_ff -> d_model.
#[derive(Debug, Clone)]
pub struct FeedForward {
    scope: Scope,
    pub d_model: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, scope: &Scope, d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        store.insert(scope.name("w1"), Tensor::randn(&[d_model, d_ff], INIT_STD, rng));
        store.insert(scope.name("b1"), Tensor::zeros(&[d_ff]));
        store.insert(scope.name("w2"), Tensor::randn(&[d_ff, d_model], INIT_STD, rng));
        store.insert(scope.name("b2"), Tensor::zeros(&[d_model]));
        FeedForward {
            scope: scope.clone(),
            d_model,
            d_ff,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let s = &self.scope;
        let pre = x
            .matmul(store.value(&s.name("w1")))?
            .add_row_broadcast(store.value(&s.name("b1")))?;
        let hidden = gelu(&pre);
        let out = hidden
            .matmul(store.value(&s.name("w2")))?
            .add_row_broadcast(store.value(&s.name("b2")))?;
        Ok((
            out,
            FfnCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &FfnCache, dy: &Tensor) -> Result<Tensor> {
        let s = &self.scope;
        store.acc_grad(&s.name("w2"), &cache.hidden.matmul_tn(dy)?);
        store.acc_grad(&s.name("b2"), &dy.sum_rows());
        let dhidden = dy.matmul_nt(store.value(&s.name("w2")))?;
        let dpre = gelu_backward(&cache.pre, &dhidden);
        store.acc_grad(&s.name("w1"), &cache.x.matmul_tn(&dpre)?);
        store.acc_grad(&s.name("b1"), &dpre.sum_rows());
        dpre.matmul_nt(store.value(&s.name("w1")))
    }
}

/// Pre-LN residual transformer block: attention sublayer then feed-forward,
/// each behind a layer norm and a residual connection. Serves both as a
/// self-attention block (queries = keys/values) and as a cross-attention
/// block (keys/values from the other stream, taken raw).
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNormLayer,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    mha: MhaCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
}

impl BlockCache {
    pub fn attention_weights(&self) -> Tensor {
        self.mha.mean_weights()
    }
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        d_model: usize,
        heads: usize,
        rel: Option<RelativePosition>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ln1 = LayerNormLayer::init(store, &scope.sub("ln1"), d_model);
        let attn = MultiHeadAttention::init(store, &scope.sub("attn"), d_model, heads, rel, rng)?;
        let ln2 = LayerNormLayer::init(store, &scope.sub("ln2"), d_model);
        let ffn = FeedForward::init(store, &scope.sub("ffn"), d_model, 4 * d_model, rng);
        Ok(Block { ln1, attn, ln2, ffn })
    }

    /// y = x + MHA(LN1(x)); out = y + FFN(LN2(y)).
    pub fn forward_self(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mask: &AttentionMask,
    ) -> Result<(Tensor, BlockCache)> {
        let (z1, c_ln1) = self.ln1.forward(store, x);
        let (a, c_mha) = self.attn.forward(store, &z1, &z1, mask)?;
        let y = x.add(&a)?;
        self.finish_forward(store, y, c_ln1, c_mha)
    }

    /// y = q + MHA(LN1(q) as queries, kv raw); out = y + FFN(LN2(y)).
    pub fn forward_cross(
        &self,
        store: &ParamStore,
        q_stream: &Tensor,
        kv_stream: &Tensor,
        mask: &AttentionMask,
    ) -> Result<(Tensor, BlockCache)> {
        debug_assert!(self.attn.rel.is_none(), "cross blocks carry no relative bias");
        let (z1, c_ln1) = self.ln1.forward(store, q_stream);
        let (a, c_mha) = self.attn.forward(store, &z1, kv_stream, mask)?;
        let y = q_stream.add(&a)?;
        self.finish_forward(store, y, c_ln1, c_mha)
    }

    fn finish_forward(
        &self,
        store: &ParamStore,
        y: Tensor,
        c_ln1: LayerNormCache,
        c_mha: MhaCache,
    ) -> Result<(Tensor, BlockCache)> {
        let (z2, c_ln2) = self.ln2.forward(store, &y);
        let (f, c_ffn) = self.ffn.forward(store, &z2)?;
        let out = y.add(&f)?;
        Ok((
            out,
            BlockCache {
                ln1: c_ln1,
                mha: c_mha,
                ln2: c_ln2,
                ffn: c_ffn,
            },
        ))
    }

    /// Backward through a self-attention block; returns dx.
    pub fn backward_self(
        &self,
        store: &mut ParamStore,
        cache: &BlockCache,
        dout: &Tensor,
    ) -> Result<Tensor> {
        let (dq, dkv, mut dy) = self.backward_common(store, cache, dout)?;
        let dz1 = dq.add(&dkv)?;
        dy.add_assign(&self.ln1.backward(store, &cache.ln1, &dz1));
        Ok(dy)
    }

    /// Backward through a cross-attention block; returns (d q_stream, d kv_stream).
    pub fn backward_cross(
        &self,
        store: &mut ParamStore,
        cache: &BlockCache,
        dout: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (dq, dkv, mut dy) = self.backward_common(store, cache, dout)?;
        dy.add_assign(&self.ln1.backward(store, &cache.ln1, &dq));
        Ok((dy, dkv))
    }

    /// Shared tail: FFN and attention backward. Returns the attention input
    /// grads (dq on LN1 output, dkv on the raw kv stream) and dy, the grad on
    /// the residual y accumulated so far.
    fn backward_common(
        &self,
        store: &mut ParamStore,
        cache: &BlockCache,
        dout: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let mut dy = dout.clone();
        let dz2 = self.ffn.backward(store, &cache.ffn, dout)?;
        dy.add_assign(&self.ln2.backward(store, &cache.ln2, &dz2));
        let (dq, dkv) = self.attn.backward(store, &cache.mha, &dy)?;
        Ok((dq, dkv, dy))
    }
}
