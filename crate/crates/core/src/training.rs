//! Adam, the fine-tuning loop (speech-encoder freeze schedule, seeded batch
//! order, epoch-level early stopping on a validation metric), and bit-exact
//! checkpoint persistence.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_pad, Utterance};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{batch_forward_backward, Model, ModelConfig, SPEECH_PREFIX};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_steps: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 2,
            freeze_steps: 2000,
            patience: 3,
            max_epochs: 20,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "train config fields must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
    t: usize,
}

/// Adam with bias correction. Moment buffers and step counts are kept per
/// parameter so entries unfrozen mid-run start with a fresh correction.
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed optimizer steps.
    pub t: usize,
    slots: HashMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: HashMap::new(),
        }
    }

    /// One update over every trainable entry; gradients are zeroed after.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.t += 1;
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                t: 0,
            });
            if slot.m.shape() != p.grad.shape() {
                return Err(Error::Config(format!(
                    "adam state shape mismatch for parameter {name:?}"
                )));
            }
            slot.t += 1;
            let b1t = 1.0 - self.beta1.powi(slot.t as i32);
            let b2t = 1.0 - self.beta2.powi(slot.t as i32);
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                let m = self.beta1 * slot.m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * slot.v.data()[i] + (1.0 - self.beta2) * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let m_hat = m / b1t;
                let v_hat = v / b2t;
                p.value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// checkpoint format: magic "XSTITCH1", u32-LE header length, UTF-8 JSON
// header, then the raw little-endian f64 payload in manifest order.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XSTITCH1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vec<String>,
    pub step: usize,
    pub val_metric: Option<f64>,
    pub manifest: Vec<TensorEntry>,
}

/// Serialize every store entry. The manifest order is the store's insertion
/// order; offsets are contiguous.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.manifest.clear();
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        meta.manifest.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            byte_offset: offset,
        });
        offset += (p.value.numel() * 8) as u64;
    }
    let header = serde_json::to_vec(&meta)?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a checkpoint into a fresh store (entries in manifest order, all
/// trainable). Every tensor is bitwise the saved value.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut lenbuf = [0u8; 4];
    file.read_exact(&mut lenbuf).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(lenbuf) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;

    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for entry in &meta.manifest {
        if entry.byte_offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "manifest offset for {:?} is {} but expected {}",
                entry.name, entry.byte_offset, expected_offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let bytes = numel * 8;
        let start = entry.byte_offset as usize;
        if start + bytes > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload too short for {:?} ({} bytes needed past offset {})",
                entry.name, bytes, start
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[start + i * 8..start + (i + 1) * 8]);
            data.push(f64::from_le_bytes(buf));
        }
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_offset += bytes as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but manifest covers {}",
            payload.len(),
            expected_offset
        )));
    }
    Ok((store, meta))
}

/// Copy checkpoint tensors into an existing store, rejecting any name or
/// shape mismatch. Used to restore weights into a freshly built model.
pub fn load_checkpoint_into(path: &Path, store: &mut ParamStore) -> Result<CheckpointMeta> {
    let (loaded, meta) = load_checkpoint(path)?;
    if loaded.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, p) in loaded.iter() {
        let dst = store.get_mut(name).map_err(|_| {
            Error::Checkpoint(format!("checkpoint tensor {name:?} unknown to this model"))
        })?;
        if dst.value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                p.value.shape(),
                dst.value.shape()
            )));
        }
        dst.value = p.value.clone();
    }
    Ok(meta)
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_metric: f64,
    pub is_best: bool,
}

pub struct TrainOutcome {
    pub best_store: ParamStore,
    pub best_step: usize,
    pub best_val_metric: f64,
    pub history: Vec<EpochStats>,
    pub final_store: ParamStore,
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    train_set: Vec<Utterance>,
    val_set: Vec<Utterance>,
    shuffle_rng: Rng,
    /// Completed optimizer steps.
    pub step: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(
        model: Model,
        store: ParamStore,
        vocab: Vocab,
        train_set: Vec<Utterance>,
        val_set: Vec<Utterance>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        // a single-modality model can only train on samples carrying that
        // modality; evaluation scores the rest as misses
        let train_set: Vec<Utterance> = train_set
            .into_iter()
            .filter(|u| match model.cfg.fusion {
                crate::heads::FusionMode::Se => u.has_speech(),
                crate::heads::FusionMode::Te => u.has_text(),
                _ => u.has_speech() || u.has_text(),
            })
            .collect();
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::Empty("training or validation split"));
        }
        let shuffle_rng = Rng::new(cfg.seed);
        let mut trainer = Trainer {
            adam: AdamState::new(cfg.lr),
            model,
            store,
            cfg,
            vocab,
            train_set,
            val_set,
            shuffle_rng,
            step: 0,
            order: Vec::new(),
            cursor: 0,
        };
        trainer.begin_epoch();
        Ok(trainer)
    }

    fn begin_epoch(&mut self) {
        self.order = (0..self.train_set.len()).collect();
        self.shuffle_rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_set.len().div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step over the next seeded-order minibatch.
    pub fn train_step(&mut self) -> Result<f64> {
        if self.cursor >= self.order.len() {
            self.begin_epoch();
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let utts: Vec<Utterance> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.train_set[i].clone())
            .collect();
        self.cursor = end;

        // freeze schedule: speech encoder fixed while step < freeze_steps
        self.store
            .set_trainable_prefix(SPEECH_PREFIX, self.step >= self.cfg.freeze_steps);

        let batch = batch_pad(&utts, &self.vocab)?;
        self.store.zero_grads();
        let loss = batch_forward_backward(&self.model, &mut self.store, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss,
            });
        }
        self.adam.step(&mut self.store)?;
        self.step += 1;
        Ok(loss)
    }

    /// Steps through the remainder of the current epoch; mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut total = 0.0;
        let mut batches = 0usize;
        loop {
            total += self.train_step()?;
            batches += 1;
            if self.cursor >= self.order.len() {
                break;
            }
        }
        self.begin_epoch();
        Ok(total / batches as f64)
    }

    /// Validation metric, higher is better: macro-F1 for tagging, accuracy
    /// fraction for classification (joint accuracy for two-label tasks).
    pub fn evaluate_val(&self) -> Result<f64> {
        let report = evaluate(&self.model, &self.store, &self.vocab, &self.val_set)?;
        Ok(match report {
            EvalReport::Tagging(t) => t.report.macro_f1,
            EvalReport::Classification(c) => {
                c.joint_accuracy.unwrap_or(c.accuracy) / 100.0
            }
        })
    }

    /// Full loop: epochs with early stopping on the validation metric.
    /// The best parameter snapshot is kept in memory and returned.
    pub fn train(mut self) -> Result<TrainOutcome> {
        let mut best_store = self.store.clone();
        let mut best_metric = f64::NEG_INFINITY;
        let mut best_step = 0;
        let mut stale_epochs = 0usize;
        let mut history = Vec::new();

        for epoch in 0..self.cfg.max_epochs {
            let mean_loss = self.run_epoch()?;
            let val_metric = self.evaluate_val()?;
            let is_best = val_metric > best_metric;
            if is_best {
                best_metric = val_metric;
                best_store = self.store.clone();
                best_step = self.step;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
            }
            history.push(EpochStats {
                epoch,
                mean_train_loss: mean_loss,
                val_metric,
                is_best,
            });
            if stale_epochs >= self.cfg.patience {
                break;
            }
        }

        Ok(TrainOutcome {
            best_store,
            best_step,
            best_val_metric: best_metric,
            history,
            final_store: self.store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen::{gen_corpus, Task};
    use crate::heads::FusionMode;
    use crate::model::Model;

    fn tiny_model(
        task: Task,
        fusion: FusionMode,
        vocab: &Vocab,
        seed: u64,
    ) -> (Model, ParamStore) {
        let mut store = ParamStore::new();
        let mut cfg = ModelConfig::for_task(task, fusion);
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.speech_layers = 1;
        cfg.text_layers = 1;
        cfg.k_max = 3;
        cfg.vocab_size = vocab.len();
        let mut rng = Rng::new(seed);
        let model = Model::build(&mut store, cfg, &mut rng).unwrap();
        (model, store)
    }

    fn build_vocab(utts: &[Utterance]) -> Vocab {
        Vocab::build(
            utts.iter().flat_map(|u| u.tokens.iter().map(|s| s.as_str())),
            None,
        )
    }

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let before = store.value("w").clone();
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value("w"), &before);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // g != 0: bias-corrected m/sqrt(v) = g/|g|, so the step is -lr*sign(g)
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![2.0, -3.0]));
        store.get_mut("w").unwrap().grad = Tensor::vector(vec![0.7, -0.2]);
        let lr = 1e-3;
        let mut adam = AdamState::new(lr);
        adam.step(&mut store).unwrap();
        let w = store.value("w").data();
        assert!((w[0] - (2.0 - lr)).abs() < 1e-6, "{}", w[0]);
        assert!((w[1] - (-3.0 + lr)).abs() < 1e-6, "{}", w[1]);
        // gradients were zeroed
        assert!(store.get("w").unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_runs_are_bitwise_deterministic() {
        let run = || {
            let mut rng = Rng::new(10);
            let mut store = ParamStore::new();
            store.insert("w", Tensor::randn(&[4, 4], 1.0, &mut rng));
            let mut adam = AdamState::new(1e-2);
            for _ in 0..10 {
                let g = Tensor::randn(&[4, 4], 1.0, &mut rng);
                store.get_mut("w").unwrap().grad = g;
                adam.step(&mut store).unwrap();
            }
            store.value("w").clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_skips_frozen_entries() {
        let mut store = ParamStore::new();
        store.insert("speech.w", Tensor::vector(vec![1.0]));
        store.insert("text.w", Tensor::vector(vec![1.0]));
        store.set_trainable_prefix("speech.", false);
        store.get_mut("speech.w").unwrap().grad = Tensor::vector(vec![5.0]);
        store.get_mut("text.w").unwrap().grad = Tensor::vector(vec![5.0]);
        let mut adam = AdamState::new(1e-2);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value("speech.w").data()[0], 1.0);
        assert_ne!(store.value("text.w").data()[0], 1.0);
    }

    #[test]
    fn adam_state_shape_mismatch_names_the_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        store.get_mut("w").unwrap().grad = Tensor::vector(vec![0.1, 0.2]);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut store).unwrap();
        // swap the parameter for a different shape behind the optimizer's back
        let p = store.get_mut("w").unwrap();
        p.value = Tensor::vector(vec![1.0, 2.0, 3.0]);
        p.grad = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn non_finite_loss_aborts_with_step_diagnostic() {
        let corpus = gen_corpus(Task::Punct, 30, 37).unwrap();
        let vocab = build_vocab(&corpus.train);
        let (model, mut store) = tiny_model(Task::Punct, FusionMode::Te, &vocab, 7);
        // poison one weight so the forward pass emits NaN
        store.value_mut("text.emb").data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 30,
            freeze_steps: 0,
            patience: 1,
            max_epochs: 1,
            seed: 3,
        };
        let mut trainer = Trainer::new(
            model,
            store,
            vocab,
            corpus.train.clone(),
            corpus.val.clone(),
            cfg,
        )
        .unwrap();
        let err = loop {
            match trainer.train_step() {
                Ok(_) => continue,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.insert("b.w", Tensor::randn(&[5], 1.0, &mut rng));
        let meta = CheckpointMeta {
            config: ModelConfig::for_task(Task::Punct, FusionMode::Te),
            train_config: TrainConfig::default(),
            vocab: vec!["[PAD]".into()],
            step: 42,
            val_metric: Some(0.5),
            manifest: Vec::new(),
        };
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &store, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.step, 42);
        assert_eq!(meta2.manifest.len(), store.len());
        for (name, p) in store.iter() {
            assert_eq!(loaded.value(name), &p.value);
        }

        // save -> load -> save is byte-identical
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &loaded, &meta2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let meta = CheckpointMeta {
            config: ModelConfig::for_task(Task::Punct, FusionMode::Te),
            train_config: TrainConfig::default(),
            vocab: vec![],
            step: 0,
            val_metric: None,
            manifest: Vec::new(),
        };
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &store, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loading_into_mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(Task::Punct, 30, 5).unwrap();
        let vocab = build_vocab(&corpus.train);
        let (_, store8) = tiny_model(Task::Punct, FusionMode::Te, &vocab, 1);
        let meta = CheckpointMeta {
            config: ModelConfig::for_task(Task::Punct, FusionMode::Te),
            train_config: TrainConfig::default(),
            vocab: vocab.tokens().to_vec(),
            step: 0,
            val_metric: None,
            manifest: Vec::new(),
        };
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &store8, &meta).unwrap();

        // same task but d_model 16: shapes differ
        let mut store16 = ParamStore::new();
        let mut cfg = ModelConfig::for_task(Task::Punct, FusionMode::Te);
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.speech_layers = 1;
        cfg.text_layers = 1;
        cfg.vocab_size = vocab.len();
        let mut rng = Rng::new(2);
        Model::build(&mut store16, cfg, &mut rng).unwrap();
        assert!(matches!(
            load_checkpoint_into(&path, &mut store16),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn freeze_schedule_holds_speech_tensors_until_the_step() {
        let corpus = gen_corpus(Task::Punct, 40, 21).unwrap();
        let vocab = build_vocab(&corpus.train);
        let (model, store) = tiny_model(Task::Punct, FusionMode::Xse, &vocab, 7);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            freeze_steps: 5,
            patience: 3,
            max_epochs: 10,
            seed: 3,
        };
        let mut trainer = Trainer::new(
            model,
            store,
            vocab,
            corpus.train.clone(),
            corpus.val.clone(),
            cfg,
        )
        .unwrap();

        let snapshot: Vec<(String, Tensor)> = trainer
            .store
            .iter()
            .filter(|(n, _)| n.starts_with(SPEECH_PREFIX))
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();

        for _ in 0..4 {
            trainer.train_step().unwrap();
        }
        // step counter = 4 < freeze_steps: bitwise unchanged
        for (name, value) in &snapshot {
            assert_eq!(trainer.store.value(name), value, "{name} moved while frozen");
        }
        for _ in 0..4 {
            trainer.train_step().unwrap();
        }
        let changed = snapshot
            .iter()
            .any(|(name, value)| trainer.store.value(name) != value);
        assert!(changed, "speech encoder never unfroze");
    }

    #[test]
    fn patience_one_with_flat_metric_runs_two_epochs() {
        // the val metric cannot improve when the lr is zero-like; epoch 1 is
        // the initial best, epoch 2 exhausts patience=1
        let corpus = gen_corpus(Task::Punct, 30, 23).unwrap();
        let vocab = build_vocab(&corpus.train);
        let (model, store) = tiny_model(Task::Punct, FusionMode::Te, &vocab, 7);
        let cfg = TrainConfig {
            lr: 1e-30,
            batch_size: 8,
            freeze_steps: 0,
            patience: 1,
            max_epochs: 50,
            seed: 3,
        };
        let trainer = Trainer::new(
            model,
            store,
            vocab,
            corpus.train.clone(),
            corpus.val.clone(),
            cfg,
        )
        .unwrap();
        let outcome = trainer.train().unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert!(outcome.history[0].is_best);
        assert!(!outcome.history[1].is_best);
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let run = || {
            let corpus = gen_corpus(Task::Punct, 30, 29).unwrap();
            let vocab = build_vocab(&corpus.train);
            let (model, store) = tiny_model(Task::Punct, FusionMode::Te, &vocab, 7);
            let cfg = TrainConfig {
                lr: 1e-3,
                batch_size: 2,
                freeze_steps: 0,
                patience: 2,
                max_epochs: 2,
                seed: 3,
            };
            let mut trainer =
                Trainer::new(model, store, vocab, corpus.train.clone(), corpus.val.clone(), cfg)
                    .unwrap();
            let mut losses = Vec::new();
            for _ in 0..10 {
                losses.push(trainer.train_step().unwrap());
            }
            (
                losses,
                trainer
                    .store
                    .iter()
                    .map(|(n, p)| (n.to_string(), p.value.clone()))
                    .collect::<Vec<_>>(),
            )
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn best_checkpoint_metric_matches_reevaluation() {
        let corpus = gen_corpus(Task::Punct, 50, 31).unwrap();
        let vocab = build_vocab(&corpus.train);
        let (model, store) = tiny_model(Task::Punct, FusionMode::Te, &vocab, 7);
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            freeze_steps: 0,
            patience: 2,
            max_epochs: 3,
            seed: 3,
        };
        let trainer = Trainer::new(
            model.clone(),
            store,
            vocab.clone(),
            corpus.train.clone(),
            corpus.val.clone(),
            cfg,
        )
        .unwrap();
        let outcome = trainer.train().unwrap();

        // re-evaluate the best snapshot on the val set: identical metric
        let report = evaluate(&model, &outcome.best_store, &vocab, &corpus.val).unwrap();
        let metric = match report {
            EvalReport::Tagging(t) => t.report.macro_f1,
            EvalReport::Classification(c) => c.joint_accuracy.unwrap_or(c.accuracy) / 100.0,
        };
        assert_eq!(metric, outcome.best_val_metric);
    }
}
