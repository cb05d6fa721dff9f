//! Dataset records, tag codecs, synthetic corpus generation, on-disk
//! serialization, and batching.

pub mod batch;
pub mod codec;
pub mod gen;
pub mod io;

pub use batch::{batch_pad, Batch, TAG_IGNORE};
pub use codec::{
    concat_nbest, decode_tags, encode_rich_text, role_label, Punct, RichTag, ROLE_AGENT,
    ROLE_CLIENT,
};
pub use gen::{gen_corpus, Corpus, CorpusMeta, Task, AROUSAL_CHANNEL, TIMBRE_CHANNEL, D_IN};
pub use io::{load_records, load_split, save_corpus, save_split};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One dataset record. Speech is a [T_in, d_in] frame tensor; text is a
/// token sequence; token-level tags and utterance-level labels are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Option<Tensor>,
    pub tokens: Vec<String>,
    pub tags: Option<Vec<usize>>,
    pub label: Option<usize>,
    pub label2: Option<usize>,
}

impl Utterance {
    pub fn has_speech(&self) -> bool {
        self.frames.is_some()
    }

    pub fn has_text(&self) -> bool {
        !self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.has_speech() && !self.has_text() {
            return Err(Error::Data(format!("utterance {} has no modality", self.id)));
        }
        if let Some(tags) = &self.tags {
            if tags.len() != self.tokens.len() {
                return Err(Error::Data(format!(
                    "utterance {}: {} tags for {} tokens",
                    self.id,
                    tags.len(),
                    self.tokens.len()
                )));
            }
        }
        if let Some(f) = &self.frames {
            if f.shape().len() != 2 {
                return Err(Error::Data(format!("utterance {}: frames not 2-d", self.id)));
            }
        }
        Ok(())
    }
}
