//! Task models: wiring of encoders, cross-stitch fusion, and heads for each
//! (task, fusion) combination, with per-utterance forward/backward passes and
//! batch-level loss assembly.

use serde::{Deserialize, Serialize};

use crate::attention::BlockCache;
use crate::crossstitch::{CrossStitch, CrossStitchCache, Direction};
use crate::data::gen::Task;
use crate::data::Batch;
use crate::encoders::{
    EncoderOutput, SpeechCache, SpeechEncoder, TextCache, TextEncoder,
};
use crate::error::{Error, Result};
use crate::heads::{
    cross_entropy_with_grad, fuse_shallow, fuse_shallow_backward, pool, pool_backward,
    FusePath, FusionMode, MultiHeadedClassifier, PoolCache, PoolMode, TagHead, TagHeadCache,
    UttHead, UttHeadCache,
};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SPEECH_PREFIX: &str = "speech.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub speech_layers: usize,
    pub text_layers: usize,
    pub d_in: usize,
    pub k_max: usize,
    pub vocab_size: usize,
    pub task: Task,
    pub fusion: FusionMode,
    pub n_tags: Option<usize>,
    pub n_classes: Option<usize>,
    pub n_classes2: Option<usize>,
}

impl ModelConfig {
    /// Desk-scale defaults; vocab_size is filled in once the vocab is built.
    pub fn for_task(task: Task, fusion: FusionMode) -> Self {
        ModelConfig {
            d_model: 64,
            heads: 8,
            speech_layers: 4,
            text_layers: 4,
            d_in: crate::data::gen::D_IN,
            k_max: 8,
            vocab_size: 0,
            task,
            fusion,
            n_tags: task.n_tags(),
            n_classes: task.n_classes(),
            n_classes2: task.n_classes2(),
        }
    }

    pub fn needs_speech_encoder(&self) -> bool {
        !matches!(self.fusion, FusionMode::Te)
    }

    pub fn needs_text_encoder(&self) -> bool {
        !(matches!(self.fusion, FusionMode::Se) && !self.task.is_tagging())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.task.is_tagging() {
            if !matches!(self.fusion, FusionMode::Te | FusionMode::Xse) {
                return Err(Error::Config(format!(
                    "tagging tasks read the text stream; fusion {:?} has no per-token text output",
                    self.fusion.as_str()
                )));
            }
            if self.n_tags.is_none() {
                return Err(Error::Config("tagging task without n_tags".into()));
            }
        } else if self.n_classes.is_none() {
            return Err(Error::Config("classification task without n_classes".into()));
        }
        if self.needs_text_encoder() && self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} too small (specials take 4 slots)",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub speech: Option<SpeechEncoder>,
    pub text: Option<TextEncoder>,
    pub stitch: Option<CrossStitch>,
    pub tag_head: Option<TagHead>,
    pub utt_head: Option<UttHead>,
    pub multi_head: Option<MultiHeadedClassifier>,
}

impl Model {
    /// Register all parameters (speech first so the freeze prefix works) and
    /// return the wiring.
    pub fn build(store: &mut ParamStore, cfg: ModelConfig, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let speech = if cfg.needs_speech_encoder() {
            Some(SpeechEncoder::init(
                store,
                &Scope::root("speech"),
                cfg.d_in,
                cfg.d_model,
                cfg.heads,
                cfg.speech_layers,
                rng,
            )?)
        } else {
            None
        };
        let text = if cfg.needs_text_encoder() {
            Some(TextEncoder::init(
                store,
                &Scope::root("text"),
                cfg.vocab_size,
                cfg.d_model,
                cfg.heads,
                cfg.text_layers,
                cfg.k_max,
                rng,
            )?)
        } else {
            None
        };
        let stitch = if matches!(cfg.fusion, FusionMode::Xse) {
            Some(CrossStitch::init(
                store,
                &Scope::root("stitch"),
                cfg.d_model,
                cfg.heads,
                rng,
            )?)
        } else {
            None
        };

        let mut tag_head = None;
        let mut utt_head = None;
        let mut multi_head = None;
        if self_is_tagging(&cfg) {
            tag_head = Some(TagHead::init(
                store,
                &Scope::root("head.tag"),
                cfg.d_model,
                cfg.n_tags.unwrap(),
                rng,
            ));
        } else if cfg.n_classes2.is_some() {
            multi_head = Some(MultiHeadedClassifier::init(
                store,
                &Scope::root("head"),
                cfg.fusion,
                cfg.d_model,
                cfg.n_classes.unwrap(),
                cfg.n_classes2.unwrap(),
                rng,
            ));
        } else {
            utt_head = Some(UttHead::init(
                store,
                &Scope::root("head.utt"),
                cfg.fusion,
                cfg.d_model,
                cfg.n_classes.unwrap(),
                rng,
            ));
        }

        Ok(Model {
            cfg,
            speech,
            text,
            stitch,
            tag_head,
            utt_head,
            multi_head,
        })
    }

    fn encode_speech(
        &self,
        store: &ParamStore,
        frames: &Tensor,
    ) -> Result<(EncoderOutput, SpeechCache)> {
        let enc = self
            .speech
            .as_ref()
            .ok_or_else(|| Error::Config("model has no speech encoder".into()))?;
        let mask = vec![true; frames.rows()];
        enc.forward(store, frames, &mask)
    }

    fn encode_text(
        &self,
        store: &ParamStore,
        tokens: &[usize],
    ) -> Result<(EncoderOutput, TextCache)> {
        let enc = self
            .text
            .as_ref()
            .ok_or_else(|| Error::Config("model has no text encoder".into()))?;
        let mask = vec![true; tokens.len()];
        enc.forward(store, tokens, &mask)
    }

    // ------------------------------------------------------------------
    // tagging
    // ------------------------------------------------------------------

    pub fn forward_tagging(
        &self,
        store: &ParamStore,
        frames: Option<&Tensor>,
        tokens: &[usize],
    ) -> Result<(Tensor, TaggingCache)> {
        let head = self
            .tag_head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no tagging head".into()))?;
        let (k_t, text_cache) = self.encode_text(store, tokens)?;

        match (&self.stitch, frames) {
            (Some(stitch), Some(frames)) => {
                let (k_s, speech_cache) = self.encode_speech(store, frames)?;
                let (out, stitch_cache) = stitch.forward(store, &k_s, &k_t)?;
                let (logits, tag_cache) = head.forward(store, &out.text_fused)?;
                Ok((
                    logits,
                    TaggingCache {
                        text: text_cache,
                        speech: Some(speech_cache),
                        stitch: Some(stitch_cache),
                        speech_rows: k_s.len(),
                        tag: tag_cache,
                    },
                ))
            }
            (Some(_), None) => Err(Error::Data(
                "cross-stitched tagging needs speech frames".into(),
            )),
            (None, _) => {
                let (logits, tag_cache) = head.forward(store, &k_t)?;
                Ok((
                    logits,
                    TaggingCache {
                        text: text_cache,
                        speech: None,
                        stitch: None,
                        speech_rows: 0,
                        tag: tag_cache,
                    },
                ))
            }
        }
    }

    pub fn backward_tagging(
        &self,
        store: &mut ParamStore,
        cache: &TaggingCache,
        dlogits: &Tensor,
    ) -> Result<()> {
        let head = self.tag_head.as_ref().expect("tag head");
        let d_text_fused = head.backward(store, &cache.tag, dlogits)?;
        match (&self.stitch, &cache.stitch) {
            (Some(stitch), Some(stitch_cache)) => {
                let d_speech_fused = Tensor::zeros(&[cache.speech_rows, self.cfg.d_model]);
                let (d_ks, d_kt) =
                    stitch.backward(store, stitch_cache, &d_text_fused, &d_speech_fused)?;
                self.speech.as_ref().expect("speech encoder").backward(
                    store,
                    cache.speech.as_ref().expect("speech cache"),
                    &d_ks,
                )?;
                self.text
                    .as_ref()
                    .expect("text encoder")
                    .backward(store, &cache.text, &d_kt)
            }
            _ => self
                .text
                .as_ref()
                .expect("text encoder")
                .backward(store, &cache.text, &d_text_fused),
        }
    }

    /// Argmax tag per non-[CLS] position.
    pub fn predict_tags(
        &self,
        store: &ParamStore,
        frames: Option<&Tensor>,
        tokens: &[usize],
    ) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_tagging(store, frames, tokens)?;
        Ok((1..tokens.len()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Head-averaged soft alignment of text queries over speech keys.
    pub fn alignment_map(
        &self,
        store: &ParamStore,
        frames: &Tensor,
        tokens: &[usize],
        direction: Direction,
    ) -> Result<Tensor> {
        let stitch = self
            .stitch
            .as_ref()
            .ok_or_else(|| Error::Config("alignment maps need the cross-stitched model".into()))?;
        let (k_s, _) = self.encode_speech(store, frames)?;
        let (k_t, _) = self.encode_text(store, tokens)?;
        stitch.attention_map(store, &k_s, &k_t, direction)
    }

    // ------------------------------------------------------------------
    // utterance classification
    // ------------------------------------------------------------------

    pub fn forward_classify(
        &self,
        store: &ParamStore,
        frames: Option<&Tensor>,
        tokens: Option<&[usize]>,
    ) -> Result<(ClassLogits, ClassifyCache)> {
        let mut cache = ClassifyCache::default();
        let fused = match self.cfg.fusion {
            FusionMode::Te => {
                let tokens = tokens.ok_or_else(|| Error::Data("text-only model given no text".into()))?;
                let (k_t, tc) = self.encode_text(store, tokens)?;
                let (pooled, pc) = pool(&k_t, PoolMode::Cls)?;
                cache.text = Some(tc);
                cache.pool_t = Some(pc);
                cache.text_rows = k_t.len();
                pooled
            }
            FusionMode::Se => {
                let frames =
                    frames.ok_or_else(|| Error::Data("speech-only model given no speech".into()))?;
                let (k_s, sc) = self.encode_speech(store, frames)?;
                let (pooled, pc) = pool(&k_s, PoolMode::Max)?;
                cache.speech = Some(sc);
                cache.pool_s = Some(pc);
                cache.speech_rows = k_s.len();
                pooled
            }
            FusionMode::SeTe => {
                let mut pooled_s = None;
                if let Some(frames) = frames {
                    let (k_s, sc) = self.encode_speech(store, frames)?;
                    let (p, pc) = pool(&k_s, PoolMode::Max)?;
                    cache.speech = Some(sc);
                    cache.pool_s = Some(pc);
                    cache.speech_rows = k_s.len();
                    pooled_s = Some(p);
                }
                let mut pooled_t = None;
                if let Some(tokens) = tokens {
                    let (k_t, tc) = self.encode_text(store, tokens)?;
                    let (p, pc) = pool(&k_t, PoolMode::Cls)?;
                    cache.text = Some(tc);
                    cache.pool_t = Some(pc);
                    cache.text_rows = k_t.len();
                    pooled_t = Some(p);
                }
                let (fused, path) = fuse_shallow(pooled_s.as_ref(), pooled_t.as_ref())?;
                cache.fuse_path = Some(path);
                fused
            }
            FusionMode::Xse => {
                let stitch = self.stitch.as_ref().expect("xse model has a stitch");
                match (frames, tokens) {
                    (Some(frames), Some(tokens)) => {
                        let (k_s, sc) = self.encode_speech(store, frames)?;
                        let (k_t, tc) = self.encode_text(store, tokens)?;
                        cache.speech_rows = k_s.len();
                        cache.text_rows = k_t.len();
                        let (out, stc) = stitch.forward(store, &k_s, &k_t)?;
                        let (ps, pcs) = pool(&out.speech_fused, PoolMode::Max)?;
                        let (pt, pct) = pool(&out.text_fused, PoolMode::Cls)?;
                        cache.speech = Some(sc);
                        cache.text = Some(tc);
                        cache.stitch = Some(stc);
                        cache.pool_s = Some(pcs);
                        cache.pool_t = Some(pct);
                        let (fused, path) = fuse_shallow(Some(&ps), Some(&pt))?;
                        cache.fuse_path = Some(path);
                        fused
                    }
                    (None, Some(tokens)) => {
                        // missing speech: the text-side self block still runs,
                        // then the pooled vector fills both halves
                        let (k_t, tc) = self.encode_text(store, tokens)?;
                        cache.text_rows = k_t.len();
                        let mask = crate::attention::AttentionMask::from_key_mask(
                            &k_t.mask,
                            k_t.len(),
                        );
                        let (t1, bc) = stitch.text_self.forward_self(store, &k_t.seq, &mask)?;
                        let t1_out = EncoderOutput {
                            seq: t1,
                            mask: k_t.mask.clone(),
                        };
                        let (pt, pct) = pool(&t1_out, PoolMode::Cls)?;
                        cache.text = Some(tc);
                        cache.text_self = Some(bc);
                        cache.pool_t = Some(pct);
                        let (fused, path) = fuse_shallow(None, Some(&pt))?;
                        cache.fuse_path = Some(path);
                        fused
                    }
                    (Some(frames), None) => {
                        let (k_s, sc) = self.encode_speech(store, frames)?;
                        cache.speech_rows = k_s.len();
                        let mask = crate::attention::AttentionMask::from_key_mask(
                            &k_s.mask,
                            k_s.len(),
                        );
                        let (s1, bc) = stitch.speech_self.forward_self(store, &k_s.seq, &mask)?;
                        let s1_out = EncoderOutput {
                            seq: s1,
                            mask: k_s.mask.clone(),
                        };
                        let (ps, pcs) = pool(&s1_out, PoolMode::Max)?;
                        cache.speech = Some(sc);
                        cache.speech_self = Some(bc);
                        cache.pool_s = Some(pcs);
                        let (fused, path) = fuse_shallow(Some(&ps), None)?;
                        cache.fuse_path = Some(path);
                        fused
                    }
                    (None, None) => return Err(Error::Data("utterance with no modality".into())),
                }
            }
        };

        if let Some(mh) = &self.multi_head {
            let ((li, le), (ci, ce)) = mh.forward(store, &fused)?;
            cache.head = Some(HeadCache::Multi(ci, ce));
            Ok((ClassLogits::Pair(li, le), cache))
        } else {
            let head = self.utt_head.as_ref().expect("utterance head");
            let (logits, hc) = head.forward(store, &fused)?;
            cache.head = Some(HeadCache::Single(hc));
            Ok((ClassLogits::Single(logits), cache))
        }
    }

    pub fn backward_classify(
        &self,
        store: &mut ParamStore,
        cache: &ClassifyCache,
        dlogits: &ClassGrads,
    ) -> Result<()> {
        let dfused = match (&self.multi_head, cache.head.as_ref().expect("head cache"), dlogits) {
            (Some(mh), HeadCache::Multi(ci, ce), ClassGrads::Pair(di, de)) => {
                mh.backward(store, &(ci.clone(), ce.clone()), di, de)?
            }
            (None, HeadCache::Single(hc), ClassGrads::Single(d)) => self
                .utt_head
                .as_ref()
                .expect("utterance head")
                .backward(store, hc, d)?,
            _ => return Err(Error::Config("head/gradient arity mismatch".into())),
        };

        match self.cfg.fusion {
            FusionMode::Te => {
                let d_seq = pool_backward(cache.pool_t.as_ref().unwrap(), &dfused);
                self.text
                    .as_ref()
                    .unwrap()
                    .backward(store, cache.text.as_ref().unwrap(), &d_seq)
            }
            FusionMode::Se => {
                let d_seq = pool_backward(cache.pool_s.as_ref().unwrap(), &dfused);
                self.speech
                    .as_ref()
                    .unwrap()
                    .backward(store, cache.speech.as_ref().unwrap(), &d_seq)
                    .map(|_| ())
            }
            FusionMode::SeTe => {
                let (ds, dt) = fuse_shallow_backward(cache.fuse_path.unwrap(), &dfused);
                if let Some(ds) = ds {
                    let d_seq = pool_backward(cache.pool_s.as_ref().unwrap(), &ds);
                    self.speech.as_ref().unwrap().backward(
                        store,
                        cache.speech.as_ref().unwrap(),
                        &d_seq,
                    )?;
                }
                if let Some(dt) = dt {
                    let d_seq = pool_backward(cache.pool_t.as_ref().unwrap(), &dt);
                    self.text.as_ref().unwrap().backward(
                        store,
                        cache.text.as_ref().unwrap(),
                        &d_seq,
                    )?;
                }
                Ok(())
            }
            FusionMode::Xse => {
                let stitch = self.stitch.as_ref().unwrap();
                let (ds, dt) = fuse_shallow_backward(cache.fuse_path.unwrap(), &dfused);
                match cache.fuse_path.unwrap() {
                    FusePath::Both => {
                        let d_speech_fused =
                            pool_backward(cache.pool_s.as_ref().unwrap(), &ds.unwrap());
                        let d_text_fused =
                            pool_backward(cache.pool_t.as_ref().unwrap(), &dt.unwrap());
                        let (d_ks, d_kt) = stitch.backward(
                            store,
                            cache.stitch.as_ref().unwrap(),
                            &d_text_fused,
                            &d_speech_fused,
                        )?;
                        self.speech.as_ref().unwrap().backward(
                            store,
                            cache.speech.as_ref().unwrap(),
                            &d_ks,
                        )?;
                        self.text.as_ref().unwrap().backward(
                            store,
                            cache.text.as_ref().unwrap(),
                            &d_kt,
                        )
                    }
                    FusePath::TextOnly => {
                        let d_t1 = pool_backward(cache.pool_t.as_ref().unwrap(), &dt.unwrap());
                        let d_kt = stitch.text_self.backward_self(
                            store,
                            cache.text_self.as_ref().unwrap(),
                            &d_t1,
                        )?;
                        self.text.as_ref().unwrap().backward(
                            store,
                            cache.text.as_ref().unwrap(),
                            &d_kt,
                        )
                    }
                    FusePath::SpeechOnly => {
                        let d_s1 = pool_backward(cache.pool_s.as_ref().unwrap(), &ds.unwrap());
                        let d_ks = stitch.speech_self.backward_self(
                            store,
                            cache.speech_self.as_ref().unwrap(),
                            &d_s1,
                        )?;
                        self.speech
                            .as_ref()
                            .unwrap()
                            .backward(store, cache.speech.as_ref().unwrap(), &d_ks)
                            .map(|_| ())
                    }
                }
            }
        }
    }

    pub fn predict_class(
        &self,
        store: &ParamStore,
        frames: Option<&Tensor>,
        tokens: Option<&[usize]>,
    ) -> Result<Prediction> {
        let (logits, _) = self.forward_classify(store, frames, tokens)?;
        Ok(match logits {
            ClassLogits::Single(l) => Prediction::Class(argmax(l.data())),
            ClassLogits::Pair(li, le) => Prediction::Pair(argmax(li.data()), argmax(le.data())),
        })
    }
}

fn self_is_tagging(cfg: &ModelConfig) -> bool {
    cfg.task.is_tagging()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    Pair(usize, usize),
}

#[derive(Debug, Clone)]
pub enum ClassLogits {
    Single(Tensor),
    Pair(Tensor, Tensor),
}

#[derive(Debug, Clone)]
pub enum ClassGrads {
    Single(Tensor),
    Pair(Tensor, Tensor),
}

#[derive(Debug, Clone)]
pub enum HeadCache {
    Single(UttHeadCache),
    Multi(UttHeadCache, UttHeadCache),
}

#[derive(Debug, Clone, Default)]
pub struct ClassifyCache {
    speech: Option<SpeechCache>,
    text: Option<TextCache>,
    stitch: Option<CrossStitchCache>,
    text_self: Option<BlockCache>,
    speech_self: Option<BlockCache>,
    pool_s: Option<PoolCache>,
    pool_t: Option<PoolCache>,
    fuse_path: Option<FusePath>,
    head: Option<HeadCache>,
    speech_rows: usize,
    text_rows: usize,
}

#[derive(Debug, Clone)]
pub struct TaggingCache {
    text: TextCache,
    speech: Option<SpeechCache>,
    stitch: Option<CrossStitchCache>,
    speech_rows: usize,
    tag: TagHeadCache,
}

// ---------------------------------------------------------------------------
// batch-level loss
// ---------------------------------------------------------------------------

/// Per-utterance forward pass plus loss. Returns the unweighted utterance
/// loss, its weight denominator contribution, and what backward needs.
enum UttPass {
    Tagging {
        cache: TaggingCache,
        dlogits: Tensor,
        kept: usize,
    },
    Classify {
        cache: ClassifyCache,
        dgrads: ClassGrads,
    },
}

fn utterance_pass(model: &Model, store: &ParamStore, batch: &Batch, b: usize) -> Result<Option<(f64, UttPass)>> {
    if model.cfg.task.is_tagging() {
        let tags = batch.utt_tags(b);
        let kept = tags.iter().filter(|&&t| t != crate::data::TAG_IGNORE).count();
        if kept == 0 {
            return Ok(None);
        }
        let tokens = batch.utt_tokens(b);
        let frames = batch.utt_frames(b);
        let labels: Vec<usize> = tags.iter().map(|&t| t.max(0) as usize).collect();
        let ignore: Vec<bool> = tags.iter().map(|&t| t == crate::data::TAG_IGNORE).collect();
        let (logits, cache) = model.forward_tagging(store, frames.as_ref(), &tokens)?;
        let (loss, dlogits) = cross_entropy_with_grad(&logits, &labels, Some(&ignore))?;
        Ok(Some((loss, UttPass::Tagging { cache, dlogits, kept })))
    } else {
        let Some(gold) = batch.labels[b] else {
            return Ok(None);
        };
        let tokens = batch.utt_tokens(b);
        let frames = batch.utt_frames(b);
        let token_arg = if tokens.len() > 1 {
            Some(tokens.as_slice())
        } else {
            None // [CLS] alone means no text modality
        };
        // single-modality models cannot train on samples lacking that
        // modality; such samples count as misses at evaluation time
        if matches!(model.cfg.fusion, FusionMode::Se) && frames.is_none() {
            return Ok(None);
        }
        if matches!(model.cfg.fusion, FusionMode::Te) && token_arg.is_none() {
            return Ok(None);
        }
        let (logits, cache) = model.forward_classify(store, frames.as_ref(), token_arg)?;
        match logits {
            ClassLogits::Pair(li, le) => {
                let gold2 = batch.labels2[b]
                    .ok_or_else(|| Error::Data("intent task utterance missing label2".into()))?;
                let li2 = Tensor::new(vec![1, li.numel()], li.into_data())?;
                let le2 = Tensor::new(vec![1, le.numel()], le.into_data())?;
                let (l1, d1) = cross_entropy_with_grad(&li2, &[gold], None)?;
                let (l2, d2) = cross_entropy_with_grad(&le2, &[gold2], None)?;
                let dgrads = ClassGrads::Pair(
                    Tensor::vector(d1.scale(0.5).into_data()),
                    Tensor::vector(d2.scale(0.5).into_data()),
                );
                Ok(Some((0.5 * (l1 + l2), UttPass::Classify { cache, dgrads })))
            }
            ClassLogits::Single(l) => {
                let l2 = Tensor::new(vec![1, l.numel()], l.into_data())?;
                let (loss, d) = cross_entropy_with_grad(&l2, &[gold], None)?;
                let dgrads = ClassGrads::Single(Tensor::vector(d.into_data()));
                Ok(Some((loss, UttPass::Classify { cache, dgrads })))
            }
        }
    }
}

/// Weight of each utterance in the batch loss: tagging weighs by kept-token
/// count (token-weighted mean), classification weighs utterances equally.
fn batch_denominator(model: &Model, batch: &Batch) -> Result<f64> {
    if model.cfg.task.is_tagging() {
        let total: usize = (0..batch.len())
            .map(|b| {
                batch
                    .utt_tags(b)
                    .iter()
                    .filter(|&&t| t != crate::data::TAG_IGNORE)
                    .count()
            })
            .sum();
        if total == 0 {
            return Err(Error::Empty("batch with no tagged tokens"));
        }
        Ok(total as f64)
    } else {
        let usable = (0..batch.len())
            .filter(|&b| {
                batch.labels[b].is_some()
                    && !(matches!(model.cfg.fusion, FusionMode::Se)
                        && batch.utt_frames(b).is_none())
                    && !(matches!(model.cfg.fusion, FusionMode::Te)
                        && batch.utt_tokens(b).len() <= 1)
            })
            .count();
        if usable == 0 {
            return Err(Error::Empty("batch with no usable labeled utterances"));
        }
        Ok(usable as f64)
    }
}

/// Pure forward batch loss. Tagging: token-count-weighted mean of per-token
/// cross-entropies. Classification: mean over labeled utterances (intent
/// tasks average the two head losses).
pub fn batch_loss(model: &Model, store: &ParamStore, batch: &Batch) -> Result<f64> {
    let denom = batch_denominator(model, batch)?;
    let mut loss = 0.0;
    for b in 0..batch.len() {
        if let Some((utt_loss, pass)) = utterance_pass(model, store, batch, b)? {
            let weight = match &pass {
                UttPass::Tagging { kept, .. } => *kept as f64 / denom,
                UttPass::Classify { .. } => 1.0 / denom,
            };
            loss += utt_loss * weight;
        }
    }
    Ok(loss)
}

/// Forward + backward over a batch; gradients accumulate into the store
/// scaled to be exactly d(batch_loss)/d(params). Returns the batch loss.
pub fn batch_forward_backward(model: &Model, store: &mut ParamStore, batch: &Batch) -> Result<f64> {
    let denom = batch_denominator(model, batch)?;
    let mut loss = 0.0;
    for b in 0..batch.len() {
        let Some((utt_loss, pass)) = utterance_pass(model, store, batch, b)? else {
            continue;
        };
        match pass {
            UttPass::Tagging { cache, dlogits, kept } => {
                let weight = kept as f64 / denom;
                loss += utt_loss * weight;
                model.backward_tagging(store, &cache, &dlogits.scale(weight))?;
            }
            UttPass::Classify { cache, dgrads } => {
                let weight = 1.0 / denom;
                loss += utt_loss * weight;
                let scaled = match dgrads {
                    ClassGrads::Single(d) => ClassGrads::Single(d.scale(weight)),
                    ClassGrads::Pair(di, de) => {
                        ClassGrads::Pair(di.scale(weight), de.scale(weight))
                    }
                };
                model.backward_classify(store, &cache, &scaled)?;
            }
        }
    }
    Ok(loss)
}
