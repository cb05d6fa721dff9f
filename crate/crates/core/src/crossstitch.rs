//! Two-way multi-head cross-modal attention. Each direction first runs
//! self-attention on the target query stream, then a cross-attention block
//! whose keys/values come from the other modality's original encoder output.
//! The two directions are independent: both read the raw encoder outputs.

use crate::attention::{AttentionMask, Block, BlockCache};
use crate::encoders::EncoderOutput;
use crate::error::Result;
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Text queries attend over speech keys (the tagging alignment).
    TextFromSpeech,
    /// Speech queries attend over text keys.
    SpeechFromText,
}

#[derive(Debug, Clone)]
pub struct CrossStitch {
    pub text_self: Block,
    pub speech_self: Block,
    pub text_cross: Block,
    pub speech_cross: Block,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
pub struct CrossStitchOutput {
    pub text_fused: EncoderOutput,
    pub speech_fused: EncoderOutput,
}

#[derive(Debug, Clone)]
pub struct CrossStitchCache {
    text_self: BlockCache,
    text_cross: BlockCache,
    speech_self: BlockCache,
    speech_cross: BlockCache,
}

impl CrossStitch {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        d_model: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        // no relative-position tables anywhere in the fusion stage; the
        // cross-modal alignment is purely content-based
        let text_self = Block::init(store, &scope.sub("text_self"), d_model, heads, None, rng)?;
        let speech_self = Block::init(store, &scope.sub("speech_self"), d_model, heads, None, rng)?;
        let text_cross = Block::init(store, &scope.sub("text_cross"), d_model, heads, None, rng)?;
        let speech_cross = Block::init(store, &scope.sub("speech_cross"), d_model, heads, None, rng)?;
        Ok(CrossStitch {
            text_self,
            speech_self,
            text_cross,
            speech_cross,
            d_model,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        k_s: &EncoderOutput,
        k_t: &EncoderOutput,
    ) -> Result<(CrossStitchOutput, CrossStitchCache)> {
        let (t_s, t_t) = (k_s.len(), k_t.len());
        let text_self_mask = AttentionMask::from_key_mask(&k_t.mask, t_t);
        let speech_self_mask = AttentionMask::from_key_mask(&k_s.mask, t_s);
        let text_cross_mask = AttentionMask::from_key_mask(&k_s.mask, t_t);
        let speech_cross_mask = AttentionMask::from_key_mask(&k_t.mask, t_s);

        let (t1, c_ts) = self.text_self.forward_self(store, &k_t.seq, &text_self_mask)?;
        let (text_fused, c_tc) = self
            .text_cross
            .forward_cross(store, &t1, &k_s.seq, &text_cross_mask)?;

        let (s1, c_ss) = self
            .speech_self
            .forward_self(store, &k_s.seq, &speech_self_mask)?;
        let (speech_fused, c_sc) = self
            .speech_cross
            .forward_cross(store, &s1, &k_t.seq, &speech_cross_mask)?;

        Ok((
            CrossStitchOutput {
                text_fused: EncoderOutput {
                    seq: text_fused,
                    mask: k_t.mask.clone(),
                },
                speech_fused: EncoderOutput {
                    seq: speech_fused,
                    mask: k_s.mask.clone(),
                },
            },
            CrossStitchCache {
                text_self: c_ts,
                text_cross: c_tc,
                speech_self: c_ss,
                speech_cross: c_sc,
            },
        ))
    }

    /// Backward through both directions; returns (d k_s.seq, d k_t.seq).
    /// Either upstream gradient may be zero when a head only reads one side.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &CrossStitchCache,
        d_text_fused: &Tensor,
        d_speech_fused: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        // text direction: k_t -> text_self -> text_cross(kv = k_s)
        let (d_t1, mut d_ks) = self
            .text_cross
            .backward_cross(store, &cache.text_cross, d_text_fused)?;
        let d_kt_text = self.text_self.backward_self(store, &cache.text_self, &d_t1)?;

        // speech direction: k_s -> speech_self -> speech_cross(kv = k_t)
        let (d_s1, d_kt_cross) = self
            .speech_cross
            .backward_cross(store, &cache.speech_cross, d_speech_fused)?;
        let d_ks_speech = self
            .speech_self
            .backward_self(store, &cache.speech_self, &d_s1)?;

        d_ks.add_assign(&d_ks_speech);
        let mut d_kt = d_kt_text;
        d_kt.add_assign(&d_kt_cross);
        Ok((d_ks, d_kt))
    }

    /// Head-averaged cross-attention weights for one direction; a diagnostic
    /// soft-alignment matrix with one row per query position.
    pub fn attention_map(
        &self,
        store: &ParamStore,
        k_s: &EncoderOutput,
        k_t: &EncoderOutput,
        direction: Direction,
    ) -> Result<Tensor> {
        let (_, cache) = self.forward(store, k_s, k_t)?;
        Ok(match direction {
            Direction::TextFromSpeech => cache.text_cross.attention_weights(),
            Direction::SpeechFromText => cache.speech_cross.attention_weights(),
        })
    }
}
