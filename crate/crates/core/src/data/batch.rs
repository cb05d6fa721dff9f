//! Batch assembly: pad frames and tokens to the batch maxima, insert [CLS],
//! and mark padding so it never reaches a loss or a metric.

use crate::encoders::{Vocab, CLS, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Utterance;

/// Marker for tag positions excluded from loss and metrics.
pub const TAG_IGNORE: i64 = -1;

#[derive(Debug, Clone)]
pub struct Batch {
    /// [B, T_f, d_in] zero-padded frames; None when no member has speech.
    pub frames: Option<Tensor>,
    /// [B][T_f] true = real frame.
    pub frame_mask: Vec<Vec<bool>>,
    /// [B][T_t] PAD-padded token ids, [CLS] at position 0.
    pub tokens: Vec<Vec<usize>>,
    /// [B][T_t] true = real position (including [CLS]).
    pub token_mask: Vec<Vec<bool>>,
    /// [B][T_t] tag ids aligned with tokens; TAG_IGNORE on [CLS] and padding.
    pub tags: Vec<Vec<i64>>,
    pub labels: Vec<Option<usize>>,
    pub labels2: Vec<Option<usize>>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Real-length token ids for one member (includes the leading [CLS]).
    pub fn utt_tokens(&self, b: usize) -> Vec<usize> {
        self.tokens[b]
            .iter()
            .zip(&self.token_mask[b])
            .filter(|&(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Real-length gold tags aligned with utt_tokens ([CLS] slot = ignore).
    pub fn utt_tags(&self, b: usize) -> Vec<i64> {
        self.tags[b]
            .iter()
            .zip(&self.token_mask[b])
            .filter(|&(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Real-length frames for one member, if it has speech.
    pub fn utt_frames(&self, b: usize) -> Option<Tensor> {
        let frames = self.frames.as_ref()?;
        let real = self.frame_mask[b].iter().filter(|&&m| m).count();
        if real == 0 {
            return None;
        }
        let d_in = frames.shape()[2];
        let t_f = frames.shape()[1];
        let start = b * t_f * d_in;
        let data = frames.data()[start..start + real * d_in].to_vec();
        Some(Tensor::new(vec![real, d_in], data).expect("frame slice"))
    }
}

/// Pad a nonempty utterance list into a batch.
pub fn batch_pad(utts: &[Utterance], vocab: &Vocab) -> Result<Batch> {
    if utts.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for u in utts {
        u.validate()?;
    }

    let t_tokens = utts.iter().map(|u| u.tokens.len() + 1).max().unwrap_or(1);
    let mut tokens = Vec::with_capacity(utts.len());
    let mut token_mask = Vec::with_capacity(utts.len());
    let mut tags = Vec::with_capacity(utts.len());

    for u in utts {
        let mut ids = vec![PAD; t_tokens];
        let mut mask = vec![false; t_tokens];
        let mut tag_row = vec![TAG_IGNORE; t_tokens];
        ids[0] = CLS;
        mask[0] = true;
        for (i, tok) in u.tokens.iter().enumerate() {
            ids[i + 1] = vocab.id(tok);
            mask[i + 1] = true;
        }
        if let Some(gold) = &u.tags {
            for (i, &t) in gold.iter().enumerate() {
                tag_row[i + 1] = t as i64;
            }
        }
        tokens.push(ids);
        token_mask.push(mask);
        tags.push(tag_row);
    }

    let d_in = utts
        .iter()
        .find_map(|u| u.frames.as_ref().map(|f| f.cols()));
    let (frames, frame_mask) = match d_in {
        Some(d_in) => {
            let t_frames = utts
                .iter()
                .filter_map(|u| u.frames.as_ref().map(|f| f.rows()))
                .max()
                .unwrap_or(0);
            let mut big = Tensor::zeros(&[utts.len(), t_frames, d_in]);
            let mut masks = Vec::with_capacity(utts.len());
            for (b, u) in utts.iter().enumerate() {
                let mut mask = vec![false; t_frames];
                if let Some(f) = &u.frames {
                    if f.cols() != d_in {
                        return Err(Error::ShapeMismatch {
                            op: "batch_pad frames",
                            lhs: f.shape().to_vec(),
                            rhs: vec![t_frames, d_in],
                        });
                    }
                    let start = b * t_frames * d_in;
                    big.data_mut()[start..start + f.numel()].copy_from_slice(f.data());
                    mask[..f.rows()].iter_mut().for_each(|m| *m = true);
                }
                masks.push(mask);
            }
            (Some(big), masks)
        }
        None => (None, utts.iter().map(|_| Vec::new()).collect()),
    };

    Ok(Batch {
        frames,
        frame_mask,
        tokens,
        token_mask,
        tags,
        labels: utts.iter().map(|u| u.label).collect(),
        labels2: utts.iter().map(|u| u.label2).collect(),
        ids: utts.iter().map(|u| u.id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["alpha", "beta", "gamma", "delta"].into_iter(), None)
    }

    fn utt(id: &str, words: &[&str], tags: Option<Vec<usize>>) -> Utterance {
        Utterance {
            id: id.into(),
            frames: None,
            tokens: words.iter().map(|s| s.to_string()).collect(),
            tags,
            label: None,
            label2: None,
        }
    }

    #[test]
    fn single_utterance_masks_all_true() {
        let v = vocab();
        let batch = batch_pad(&[utt("a", &["alpha", "beta"], None)], &v).unwrap();
        assert_eq!(batch.token_mask[0], vec![true, true, true]); // CLS + 2
        assert_eq!(batch.tokens[0][0], CLS);
    }

    #[test]
    fn mixed_lengths_pad_to_batch_maximum() {
        let v = vocab();
        let batch = batch_pad(
            &[
                utt("a", &["alpha", "beta", "gamma"], Some(vec![0, 1, 0])),
                utt("b", &["alpha", "beta", "gamma", "delta", "alpha"], Some(vec![1, 0, 1, 0, 1])),
            ],
            &v,
        )
        .unwrap();
        // width 6 = CLS + 5
        assert_eq!(batch.tokens[0].len(), 6);
        assert_eq!(
            batch.token_mask[0],
            vec![true, true, true, true, false, false]
        );
        assert_eq!(batch.token_mask[1], vec![true; 6]);
        assert_eq!(batch.tags[0], vec![TAG_IGNORE, 0, 1, 0, TAG_IGNORE, TAG_IGNORE]);
        assert_eq!(batch.tokens[0][4], PAD);
    }

    #[test]
    fn oov_tokens_map_to_unk() {
        let v = vocab();
        let batch = batch_pad(&[utt("a", &["alpha", "zeta"], None)], &v).unwrap();
        assert_eq!(batch.tokens[0][2], crate::encoders::UNK);
    }

    #[test]
    fn frames_pad_with_zeros_and_mask() {
        let v = vocab();
        let mut u1 = utt("a", &["alpha"], None);
        u1.frames = Some(Tensor::filled(&[4, 2], 1.5));
        let mut u2 = utt("b", &["beta"], None);
        u2.frames = Some(Tensor::filled(&[6, 2], -0.5));
        let batch = batch_pad(&[u1.clone(), u2], &v).unwrap();
        let frames = batch.frames.as_ref().unwrap();
        assert_eq!(frames.shape(), [2, 6, 2]);
        assert_eq!(batch.frame_mask[0], vec![true, true, true, true, false, false]);
        // padding is zero
        assert_eq!(frames.data()[4 * 2..6 * 2], [0.0; 4]);
        // per-utterance view strips padding
        assert_eq!(batch.utt_frames(0).unwrap(), u1.frames.unwrap());
    }

    #[test]
    fn invalid_utterance_is_rejected() {
        let v = vocab();
        let bad = utt("a", &["alpha", "beta"], Some(vec![0]));
        assert!(batch_pad(&[bad], &v).is_err());
        assert!(batch_pad(&[], &v).is_err());
    }

    #[test]
    fn mixed_modalities_leave_frame_mask_empty_for_text_only() {
        let v = vocab();
        let mut with_speech = utt("a", &["alpha"], None);
        with_speech.frames = Some(Tensor::filled(&[4, 2], 1.0));
        let text_only = utt("b", &["beta"], None);
        let batch = batch_pad(&[with_speech, text_only], &v).unwrap();
        assert!(batch.frames.is_some());
        assert!(batch.frame_mask[1].iter().all(|&m| !m));
        assert!(batch.utt_frames(1).is_none());
    }
}
