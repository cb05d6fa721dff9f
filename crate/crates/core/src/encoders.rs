//! Speech and text encoders. The speech side runs a 2-layer strided conv
//! frontend (4x downsampling) into a stack of pre-LN self-attention blocks;
//! the text side embeds token ids and runs blocks with Shaw relative-position
//! bias. Both end in a final layer norm. A masked-reconstruction pretext task
//! stands in for large-scale pretraining.

use crate::attention::{AttentionMask, Block, LayerNormLayer, RelativePosition, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::{gelu, gelu_backward, LayerNormCache, Tensor};

/// Encoder output: a time-major sequence of d_model vectors plus a
/// real-position mask (true = real).
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub seq: Tensor,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.seq.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.rows() == 0
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One 1-d convolution layer, kernel 3, stride 2, pad 1, as an im2col matmul.
/// Weight layout: [3*d_in, d_out], rows ordered (tap, channel).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    scope: Scope,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    patches: Tensor,
    t_in: usize,
}

pub fn conv_out_len(t_in: usize) -> usize {
    t_in.div_ceil(2)
}

impl ConvLayer {
    const K: usize = 3;

    pub fn init(store: &mut ParamStore, scope: &Scope, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        store.insert(scope.name("w"), Tensor::randn(&[Self::K * d_in, d_out], INIT_STD, rng));
        store.insert(scope.name("b"), Tensor::zeros(&[d_out]));
        ConvLayer {
            scope: scope.clone(),
            d_in,
            d_out,
        }
    }

    fn gather_patches(&self, x: &Tensor) -> Tensor {
        let t_in = x.rows();
        let t_out = conv_out_len(t_in);
        let mut patches = Tensor::zeros(&[t_out, Self::K * self.d_in]);
        for p in 0..t_out {
            for tap in 0..Self::K {
                // input index for output p, tap k: 2p - 1 + k (pad 1)
                let idx = 2 * p as i64 - 1 + tap as i64;
                if idx < 0 || idx >= t_in as i64 {
                    continue; // zero padding
                }
                let src = x.row(idx as usize);
                let dst = p * Self::K * self.d_in + tap * self.d_in;
                patches.data_mut()[dst..dst + self.d_in].copy_from_slice(src);
            }
        }
        patches
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        if x.cols() != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let patches = self.gather_patches(x);
        let out = patches
            .matmul(store.value(&self.scope.name("w")))?
            .add_row_broadcast(store.value(&self.scope.name("b")))?;
        Ok((
            out,
            ConvCache {
                patches,
                t_in: x.rows(),
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &ConvCache, dy: &Tensor) -> Result<Tensor> {
        store.acc_grad(&self.scope.name("w"), &cache.patches.matmul_tn(dy)?);
        store.acc_grad(&self.scope.name("b"), &dy.sum_rows());
        let dpatches = dy.matmul_nt(store.value(&self.scope.name("w")))?;
        // scatter patch grads back to input positions (overlaps sum)
        let mut dx = Tensor::zeros(&[cache.t_in, self.d_in]);
        let t_out = dy.rows();
        for p in 0..t_out {
            for tap in 0..Self::K {
                let idx = 2 * p as i64 - 1 + tap as i64;
                if idx < 0 || idx >= cache.t_in as i64 {
                    continue;
                }
                let src = p * Self::K * self.d_in + tap * self.d_in;
                let dst = idx as usize * self.d_in;
                for c in 0..self.d_in {
                    dx.data_mut()[dst + c] += dpatches.data()[src + c];
                }
            }
        }
        Ok(dx)
    }
}

/// Speech encoder: conv frontend (two k3/s2 layers with GELU), block stack,
/// final layer norm. Output length is ceil(ceil(T_in/2)/2).
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub conv0: ConvLayer,
    pub conv1: ConvLayer,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormLayer,
    pub d_in: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
pub struct SpeechCache {
    conv0: ConvCache,
    pre0: Tensor,
    conv1: ConvCache,
    pre1: Tensor,
    blocks: Vec<crate::attention::BlockCache>,
    final_ln: LayerNormCache,
}

pub const MIN_SPEECH_FRAMES: usize = 4;

impl SpeechEncoder {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        d_in: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        assert!(layers >= 1, "speech encoder needs at least one block");
        let conv0 = ConvLayer::init(store, &scope.sub("conv0"), d_in, d_model, rng);
        let conv1 = ConvLayer::init(store, &scope.sub("conv1"), d_model, d_model, rng);
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            blocks.push(Block::init(
                store,
                &scope.sub(&format!("block{i}")),
                d_model,
                heads,
                None,
                rng,
            )?);
        }
        let final_ln = LayerNormLayer::init(store, &scope.sub("ln"), d_model);
        Ok(SpeechEncoder {
            conv0,
            conv1,
            blocks,
            final_ln,
            d_in,
            d_model,
        })
    }

    /// Downsampled real length after the two stride-2 convs.
    pub fn out_len(t_in: usize) -> usize {
        conv_out_len(conv_out_len(t_in))
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        frames: &Tensor,
        frame_mask: &[bool],
    ) -> Result<(EncoderOutput, SpeechCache)> {
        let t_in = frames.rows();
        if t_in < MIN_SPEECH_FRAMES {
            return Err(Error::InputTooShort {
                len: t_in,
                min: MIN_SPEECH_FRAMES,
            });
        }
        if frames.cols() != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "encode_speech",
                lhs: frames.shape().to_vec(),
                rhs: vec![t_in, self.d_in],
            });
        }
        if frame_mask.len() != t_in {
            return Err(Error::LengthMismatch {
                left: frame_mask.len(),
                right: t_in,
            });
        }

        // Zero padded rows so junk past the real length can never leak
        // through the conv receptive field into real positions.
        let mut x = frames.clone();
        for (i, &real) in frame_mask.iter().enumerate() {
            if !real {
                x.row_mut(i).fill(0.0);
            }
        }

        let real_in = frame_mask.iter().filter(|&&m| m).count();
        if real_in == 0 {
            return Err(Error::Empty("speech frame mask"));
        }
        let real_out = Self::out_len(real_in);

        let (c0, cache0) = self.conv0.forward(store, &x)?;
        let h0 = gelu(&c0);
        let (c1, cache1) = self.conv1.forward(store, &h0)?;
        let mut h = gelu(&c1);

        let t_out = h.rows();
        let mask: Vec<bool> = (0..t_out).map(|i| i < real_out).collect();
        let attn_mask = AttentionMask::from_key_mask(&mask, t_out);

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_self(store, &h, &attn_mask)?;
            block_caches.push(cache);
            h = next;
        }
        let (out, ln_cache) = self.final_ln.forward(store, &h);

        Ok((
            EncoderOutput {
                seq: out,
                mask: mask.clone(),
            },
            SpeechCache {
                conv0: cache0,
                pre0: c0,
                conv1: cache1,
                pre1: c1,
                blocks: block_caches,
                final_ln: ln_cache,
            },
        ))
    }

    /// Returns the gradient w.r.t. the input frames.
    pub fn backward(&self, store: &mut ParamStore, cache: &SpeechCache, dout: &Tensor) -> Result<Tensor> {
        let mut d = self.final_ln.backward(store, &cache.final_ln, dout);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward_self(store, bc, &d)?;
        }
        let d = gelu_backward(&cache.pre1, &d);
        let d = self.conv1.backward(store, &cache.conv1, &d)?;
        let d = gelu_backward(&cache.pre0, &d);
        self.conv0.backward(store, &cache.conv0, &d)
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const EOU: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const EOU_TOKEN: &str = "[EOU]";

/// Token-string <-> id table. Ids 0..4 are the fixed specials.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: std::collections::HashMap<String, usize>,
}

impl Vocab {
    pub fn specials() -> Vec<String> {
        vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            CLS_TOKEN.to_string(),
            EOU_TOKEN.to_string(),
        ]
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Build from a token iterator: specials first, then unique tokens by
    /// descending frequency (ties lexicographic). Deterministic.
    pub fn build<'a>(words: impl Iterator<Item = &'a str>, cap: Option<usize>) -> Self {
        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        for w in words {
            *counts.entry(w).or_insert(0) += 1;
        }
        let mut by_freq: Vec<(&str, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = Self::specials();
        for (w, _) in by_freq {
            if let Some(cap) = cap {
                if tokens.len() >= cap {
                    break;
                }
            }
            tokens.push(w.to_string());
        }
        Vocab::from_tokens(tokens)
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Text encoder: embedding table, pre-LN blocks with relative positions,
/// final layer norm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    scope: Scope,
    pub vocab_size: usize,
    pub d_model: usize,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormLayer,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    ids: Vec<usize>,
    blocks: Vec<crate::attention::BlockCache>,
    final_ln: LayerNormCache,
}

impl TextEncoder {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        vocab_size: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        k_max: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        assert!(layers >= 1, "text encoder needs at least one block");
        store.insert(scope.name("emb"), Tensor::randn(&[vocab_size, d_model], INIT_STD, rng));
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            blocks.push(Block::init(
                store,
                &scope.sub(&format!("block{i}")),
                d_model,
                heads,
                Some(RelativePosition { k_max }),
                rng,
            )?);
        }
        let final_ln = LayerNormLayer::init(store, &scope.sub("ln"), d_model);
        Ok(TextEncoder {
            scope: scope.clone(),
            vocab_size,
            d_model,
            blocks,
            final_ln,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        ids: &[usize],
        token_mask: &[bool],
    ) -> Result<(EncoderOutput, TextCache)> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if token_mask.len() != ids.len() {
            return Err(Error::LengthMismatch {
                left: token_mask.len(),
                right: ids.len(),
            });
        }
        let emb = store.value(&self.scope.name("emb"));
        let mut h = Tensor::zeros(&[ids.len(), self.d_model]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size {
                return Err(Error::VocabId {
                    id,
                    vocab: self.vocab_size,
                });
            }
            h.row_mut(i).copy_from_slice(emb.row(id));
        }

        let attn_mask = AttentionMask::from_key_mask(token_mask, ids.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_self(store, &h, &attn_mask)?;
            block_caches.push(cache);
            h = next;
        }
        let (out, ln_cache) = self.final_ln.forward(store, &h);
        Ok((
            EncoderOutput {
                seq: out,
                mask: token_mask.to_vec(),
            },
            TextCache {
                ids: ids.to_vec(),
                blocks: block_caches,
                final_ln: ln_cache,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &TextCache, dout: &Tensor) -> Result<()> {
        let mut d = self.final_ln.backward(store, &cache.final_ln, dout);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward_self(store, bc, &d)?;
        }
        // scatter embedding gradients
        let d_model = self.d_model;
        let mut demb = Tensor::zeros(&[self.vocab_size, d_model]);
        for (i, &id) in cache.ids.iter().enumerate() {
            for c in 0..d_model {
                demb.data_mut()[id * d_model + c] += d.data()[i * d_model + c];
            }
        }
        store.acc_grad(&self.scope.name("emb"), &demb);
        Ok(())
    }
}

/// Keep only the first `keep` blocks of a stack.
pub fn truncate_layers(blocks: &[Block], keep: usize) -> Result<Vec<Block>> {
    if keep == 0 || keep > blocks.len() {
        return Err(Error::Config(format!(
            "keep {keep} out of range for a stack of {}",
            blocks.len()
        )));
    }
    Ok(blocks[..keep].to_vec())
}

/// Config for the masked-reconstruction pretext task.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_prob: 0.15,
            steps: 500,
            lr: 1e-3,
            seed: 0x5eed,
        }
    }
}

const PRETRAIN_SCOPE: &str = "pretrain_head";

/// Masked-frame reconstruction pretext for the speech encoder: random frames
/// are zeroed, the encoder plus a temporary projection reconstructs the
/// originals at the downsampled positions, squared error is minimized with
/// plain SGD. The reconstruction head is dropped afterwards. Returns the
/// per-step loss curve.
pub fn pretrain_masked_frames(
    store: &mut ParamStore,
    encoder: &SpeechEncoder,
    corpus: &[Tensor],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(losses);
    }

    let scope = Scope::root(PRETRAIN_SCOPE);
    store.insert(
        scope.name("w"),
        Tensor::randn(&[encoder.d_model, encoder.d_in], INIT_STD, &mut rng),
    );
    store.insert(scope.name("b"), Tensor::zeros(&[encoder.d_in]));

    for _ in 0..cfg.steps {
        let frames = &corpus[rng.below(corpus.len())];
        let t_in = frames.rows();
        let mut masked = frames.clone();
        let mut positions: Vec<usize> = Vec::new();
        for i in 0..t_in {
            if rng.chance(cfg.mask_prob) {
                masked.row_mut(i).fill(0.0);
                positions.push(i);
            }
        }
        if positions.is_empty() {
            positions.push(rng.below(t_in));
            masked.row_mut(positions[0]).fill(0.0);
        }

        let all_real = vec![true; t_in];
        store.zero_grads();
        let (enc, cache) = encoder.forward(store, &masked, &all_real)?;
        let w = store.value(&scope.name("w")).clone();
        let b = store.value(&scope.name("b")).clone();
        let pred = enc.seq.matmul(&w)?.add_row_broadcast(&b)?;

        // squared error over masked input positions, each read from its
        // downsampled output row
        let mut loss = 0.0;
        let mut dpred = Tensor::zeros(pred.shape());
        let n = (positions.len() * encoder.d_in) as f64;
        for &p in &positions {
            let o = (p / 4).min(pred.rows() - 1);
            for c in 0..encoder.d_in {
                let diff = pred.at2(o, c) - frames.at2(p, c);
                loss += diff * diff / n;
                dpred.data_mut()[o * encoder.d_in + c] += 2.0 * diff / n;
            }
        }
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: losses.len(),
                loss,
            });
        }

        store.acc_grad(&scope.name("w"), &enc.seq.matmul_tn(&dpred)?);
        store.acc_grad(&scope.name("b"), &dpred.sum_rows());
        let denc = dpred.matmul_nt(&w)?;
        encoder.backward(store, &cache, &denc)?;

        // SGD step on every trainable entry
        for (_, p) in store.iter_mut() {
            if p.trainable {
                p.value.add_scaled(&p.grad, -cfg.lr);
            }
        }
    }

    store.remove_prefix(PRETRAIN_SCOPE);
    store.zero_grads();
    Ok(losses)
}

/// Masked-token reconstruction pretext for the text encoder: random tokens
/// are replaced by [UNK] and the encoder plus a temporary projection predicts
/// the original ids with cross-entropy. Same shape as the frame variant.
pub fn pretrain_masked_tokens(
    store: &mut ParamStore,
    encoder: &TextEncoder,
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(losses);
    }

    let scope = Scope::root(PRETRAIN_SCOPE);
    store.insert(
        scope.name("w"),
        Tensor::randn(&[encoder.d_model, encoder.vocab_size], INIT_STD, &mut rng),
    );
    store.insert(scope.name("b"), Tensor::zeros(&[encoder.vocab_size]));

    for _ in 0..cfg.steps {
        let ids = &corpus[rng.below(corpus.len())];
        let mut masked = ids.clone();
        let mut positions: Vec<usize> = Vec::new();
        for (i, slot) in masked.iter_mut().enumerate() {
            if rng.chance(cfg.mask_prob) {
                *slot = UNK;
                positions.push(i);
            }
        }
        if positions.is_empty() {
            let p = rng.below(masked.len());
            masked[p] = UNK;
            positions.push(p);
        }

        let all_real = vec![true; masked.len()];
        store.zero_grads();
        let (enc, cache) = encoder.forward(store, &masked, &all_real)?;
        let w = store.value(&scope.name("w")).clone();
        let b = store.value(&scope.name("b")).clone();
        let logits = enc.seq.matmul(&w)?.add_row_broadcast(&b)?;

        let probs = crate::tensor::softmax_rows(&logits);
        let mut loss = 0.0;
        let mut dlogits = Tensor::zeros(logits.shape());
        let n = positions.len() as f64;
        for &p in &positions {
            let gold = ids[p];
            loss += -(probs.at2(p, gold).max(1e-300)).ln() / n;
            for c in 0..encoder.vocab_size {
                let onehot = if c == gold { 1.0 } else { 0.0 };
                dlogits.data_mut()[p * encoder.vocab_size + c] = (probs.at2(p, c) - onehot) / n;
            }
        }
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: losses.len(),
                loss,
            });
        }

        store.acc_grad(&scope.name("w"), &enc.seq.matmul_tn(&dlogits)?);
        store.acc_grad(&scope.name("b"), &dlogits.sum_rows());
        let denc = dlogits.matmul_nt(&w)?;
        encoder.backward(store, &cache, &denc)?;

        for (_, p) in store.iter_mut() {
            if p.trainable {
                p.value.add_scaled(&p.grad, -cfg.lr);
            }
        }
    }

    store.remove_prefix(PRETRAIN_SCOPE);
    store.zero_grads();
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{grad_check, GradCheckOpts};

    fn rng() -> Rng {
        Rng::new(0xE11C0DE)
    }

    fn small_speech(store: &mut ParamStore, layers: usize, r: &mut Rng) -> SpeechEncoder {
        SpeechEncoder::init(store, &Scope::root("speech"), 4, 8, 2, layers, r).unwrap()
    }

    #[test]
    fn speech_output_length_is_quarter() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        let frames = Tensor::randn(&[8, 4], 1.0, &mut r);
        let (out, _) = enc.forward(&store, &frames, &vec![true; 8]).unwrap();
        assert_eq!(out.seq.shape(), [2, 8]);
        assert_eq!(out.mask, vec![true, true]);
    }

    #[test]
    fn speech_output_length_formula_holds() {
        for t_in in 4..=40 {
            let expect = ((t_in + 1) / 2 + 1) / 2;
            assert_eq!(SpeechEncoder::out_len(t_in), expect, "t_in {t_in}");
        }
    }

    #[test]
    fn too_short_input_errors() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        let frames = Tensor::randn(&[3, 4], 1.0, &mut r);
        assert!(matches!(
            enc.forward(&store, &frames, &vec![true; 3]),
            Err(Error::InputTooShort { len: 3, min: 4 })
        ));
    }

    #[test]
    fn zero_frames_zero_bias_give_zero_conv_output() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        let frames = Tensor::zeros(&[8, 4]);
        let (c0, _) = enc.conv0.forward(&store, &frames).unwrap();
        assert!(c0.data().iter().all(|&v| v == 0.0));
        let (c1, _) = enc.conv1.forward(&store, &gelu(&c0)).unwrap();
        assert!(c1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padded_frames_do_not_influence_real_positions() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 2, &mut r);

        let real = Tensor::randn(&[7, 4], 1.0, &mut r);
        let mut padded = Tensor::zeros(&[12, 4]);
        for i in 0..7 {
            padded.row_mut(i).copy_from_slice(real.row(i));
        }
        // junk in the padding; the encoder must erase it
        for i in 7..12 {
            padded.row_mut(i).fill(1e9);
        }
        let mut mask = vec![true; 7];
        mask.extend(vec![false; 5]);

        let (out_unpadded, _) = enc.forward(&store, &real, &vec![true; 7]).unwrap();
        let (out_padded, _) = enc.forward(&store, &padded, &mask).unwrap();
        let real_out = SpeechEncoder::out_len(7);
        for i in 0..real_out {
            for c in 0..8 {
                let a = out_unpadded.seq.at2(i, c);
                let b = out_padded.seq.at2(i, c);
                assert!((a - b).abs() < 1e-10, "row {i} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn speech_encoder_gradients_pass() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        store.randomize(0.4, &mut r);
        let frames = Tensor::randn(&[8, 4], 1.0, &mut r);
        let mask = vec![true; 8];

        store.zero_grads();
        let (out, cache) = enc.forward(&store, &frames, &mask).unwrap();
        let dy = Tensor::filled(out.seq.shape(), 1.0 / out.seq.numel() as f64);
        enc.backward(&mut store, &cache, &dy).unwrap();

        let enc2 = enc.clone();
        let (frames2, mask2) = (frames.clone(), mask.clone());
        let report = grad_check(
            move |p: &ParamStore| {
                let (out, _) = enc2.forward(p, &frames2, &mask2)?;
                Ok(out.seq.mean())
            },
            &mut store,
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.all_pass(), "worst: {:?}", report.worst());
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let conv = ConvLayer::init(&mut store, &Scope::root("c"), 3, 2, &mut r);
        store.randomize(0.5, &mut r);
        let x = Tensor::randn(&[6, 3], 1.0, &mut r);
        let (y, cache) = conv.forward(&store, &x).unwrap();
        let dy = Tensor::filled(y.shape(), 1.0);
        store.zero_grads();
        let dx = conv.backward(&mut store, &cache, &dy).unwrap();
        let h = 1e-6;
        for idx in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let (yp, _) = conv.forward(&store, &xp).unwrap();
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let (ym, _) = conv.forward(&store, &xm).unwrap();
            let fd = (yp.sum() - ym.sum()) / (2.0 * h);
            assert!((dx.data()[idx] - fd).abs() < 1e-6);
        }
    }

    fn small_text(store: &mut ParamStore, r: &mut Rng) -> TextEncoder {
        TextEncoder::init(store, &Scope::root("text"), 12, 8, 2, 2, 4, r).unwrap()
    }

    #[test]
    fn single_cls_token_encodes() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        let (out, _) = enc.forward(&store, &[CLS], &[true]).unwrap();
        assert_eq!(out.seq.shape(), [1, 8]);
    }

    #[test]
    fn out_of_vocab_id_errors() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        assert!(matches!(
            enc.forward(&store, &[CLS, 99], &[true, true]),
            Err(Error::VocabId { id: 99, vocab: 12 })
        ));
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        let ids = [CLS, 5, 6, 7];
        let mask = [true; 4];
        let (a, _) = enc.forward(&store, &ids, &mask).unwrap();
        let (b, _) = enc.forward(&store, &ids, &mask).unwrap();
        assert_eq!(a.seq, b.seq);
    }

    #[test]
    fn prepadded_masked_positions_leave_real_outputs_unchanged() {
        // relative positions + key masking: shifting a sentence right by
        // prepending masked padding must not change real-position outputs
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        let ids = [CLS, 5, 6, 7, 8];
        let mask = [true; 5];
        let (plain, _) = enc.forward(&store, &ids, &mask).unwrap();

        let shifted_ids = [PAD, PAD, CLS, 5, 6, 7, 8];
        let shifted_mask = [false, false, true, true, true, true, true];
        let (shifted, _) = enc.forward(&store, &shifted_ids, &shifted_mask).unwrap();

        for i in 0..5 {
            for c in 0..8 {
                let a = plain.seq.at2(i, c);
                let b = shifted.seq.at2(i + 2, c);
                assert!((a - b).abs() < 1e-10, "pos {i} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn text_encoder_gradients_pass() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        store.randomize(0.4, &mut r);
        let ids = vec![CLS, 4, 9, 5];
        let mask = vec![true; 4];

        store.zero_grads();
        let (out, cache) = enc.forward(&store, &ids, &mask).unwrap();
        let dy = Tensor::filled(out.seq.shape(), 1.0 / out.seq.numel() as f64);
        enc.backward(&mut store, &cache, &dy).unwrap();

        let enc2 = enc.clone();
        let (ids2, mask2) = (ids.clone(), mask.clone());
        let report = grad_check(
            move |p: &ParamStore| {
                let (out, _) = enc2.forward(p, &ids2, &mask2)?;
                Ok(out.seq.mean())
            },
            &mut store,
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.all_pass(), "worst: {:?}", report.worst());
    }

    #[test]
    fn truncate_keep_all_is_identity() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        let kept = truncate_layers(&enc.blocks, enc.blocks.len()).unwrap();
        assert_eq!(kept.len(), enc.blocks.len());
    }

    #[test]
    fn truncate_out_of_range_errors() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        assert!(truncate_layers(&enc.blocks, 0).is_err());
        assert!(truncate_layers(&enc.blocks, 3).is_err());
    }

    #[test]
    fn truncated_stack_equals_intermediate_activation() {
        // run a 4-block speech encoder, tap the activation after block 2,
        // and compare with a 2-block truncation (same conv frontend)
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 4, &mut r);
        let frames = Tensor::randn(&[12, 4], 1.0, &mut r);
        let mask = vec![true; 12];

        // manual tap: conv frontend then first 2 blocks
        let (c0, _) = enc.conv0.forward(&store, &frames).unwrap();
        let (c1, _) = enc.conv1.forward(&store, &gelu(&c0)).unwrap();
        let mut h = gelu(&c1);
        let t_out = h.rows();
        let attn_mask = AttentionMask::from_key_mask(&vec![true; t_out], t_out);
        for block in &enc.blocks[..2] {
            let (next, _) = block.forward_self(&store, &h, &attn_mask).unwrap();
            h = next;
        }

        let truncated = truncate_layers(&enc.blocks, 2).unwrap();
        let mut h2 = gelu(&c1);
        for block in &truncated {
            let (next, _) = block.forward_self(&store, &h2, &attn_mask).unwrap();
            h2 = next;
        }
        for (a, b) in h.data().iter().zip(h2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // single-block truncation still runs end to end
        let single = truncate_layers(&enc.blocks, 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn pretrain_zero_steps_leaves_params_unchanged() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        let before: Vec<(String, Tensor)> = store
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        let corpus = vec![Tensor::randn(&[8, 4], 1.0, &mut r)];
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        pretrain_masked_frames(&mut store, &enc, &corpus, &cfg).unwrap();
        for (name, value) in before {
            assert_eq!(store.value(&name), &value, "{name} changed");
        }
        assert_eq!(store.iter().count(), store.names().len());
    }

    #[test]
    fn pretrain_reduces_reconstruction_loss() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        let corpus: Vec<Tensor> = (0..8)
            .map(|_| Tensor::randn(&[12, 4], 1.0, &mut r))
            .collect();
        let cfg = PretrainConfig {
            steps: 500,
            lr: 1e-3,
            ..Default::default()
        };
        let losses = pretrain_masked_frames(&mut store, &enc, &corpus, &cfg).unwrap();
        let head = losses[..20].iter().sum::<f64>() / 20.0;
        let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not drop: {head} -> {tail}");
        // the reconstruction head is gone
        assert!(!store.contains("pretrain_head.w"));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let run = || {
            let mut r = Rng::new(99);
            let mut store = ParamStore::new();
            let enc = small_speech(&mut store, 1, &mut r);
            let corpus = vec![Tensor::randn(&[8, 4], 1.0, &mut r)];
            let cfg = PretrainConfig {
                steps: 50,
                ..Default::default()
            };
            pretrain_masked_frames(&mut store, &enc, &corpus, &cfg).unwrap();
            store
                .iter()
                .map(|(n, p)| (n.to_string(), p.value.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretrain_empty_corpus_errors() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_speech(&mut store, 1, &mut r);
        let res = pretrain_masked_frames(&mut store, &enc, &[], &PretrainConfig::default());
        assert!(matches!(res, Err(Error::Empty(_))));
    }

    #[test]
    fn pretrain_tokens_reduces_loss() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = small_text(&mut store, &mut r);
        let corpus: Vec<Vec<usize>> = (0..8)
            .map(|_| (0..10).map(|_| r.range(4, 11)).collect())
            .collect();
        let cfg = PretrainConfig {
            steps: 400,
            lr: 3e-3,
            ..Default::default()
        };
        let losses = pretrain_masked_tokens(&mut store, &enc, &corpus, &cfg).unwrap();
        let head = losses[..20].iter().sum::<f64>() / 20.0;
        let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not drop: {head} -> {tail}");
        assert!(!store.contains("pretrain_head.w"));
    }

    #[test]
    fn vocab_build_is_deterministic_and_caps() {
        let words = ["b", "a", "b", "c", "a", "b"];
        let v1 = Vocab::build(words.iter().copied(), None);
        let v2 = Vocab::build(words.iter().copied(), None);
        assert_eq!(v1.tokens(), v2.tokens());
        // frequency order: b(3), a(2), c(1) after the 4 specials
        assert_eq!(v1.token(4), "b");
        assert_eq!(v1.token(5), "a");
        assert_eq!(v1.token(6), "c");
        let capped = Vocab::build(words.iter().copied(), Some(5));
        assert_eq!(capped.len(), 5);
        assert_eq!(capped.id("c"), UNK);
    }
}
