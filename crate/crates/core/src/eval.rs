//! Split-level evaluation: runs the model over a list of utterances and
//! aggregates the task's metrics into a serializable report.

use serde::{Deserialize, Serialize};

use crate::data::gen::Task;
use crate::data::{batch_pad, role_label, RichTag, Utterance};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, joint_accuracy, per_tag_f1_named, segment_turns, token_error_rate, TagReport,
    TurnReport,
};
use crate::model::{Model, Prediction};
use crate::params::ParamStore;

/// Accuracy over the utterance-final token of lexically ambiguous samples;
/// the gold mark there is only recoverable from the audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousEval {
    pub count: usize,
    pub final_tag_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggingEval {
    pub report: TagReport,
    pub token_error_rate: f64,
    pub turn: Option<TurnReport>,
    pub ambiguous: Option<AmbiguousEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub accuracy: f64,
    pub intent_accuracy: Option<f64>,
    pub entity_accuracy: Option<f64>,
    pub joint_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalReport {
    Tagging(TaggingEval),
    Classification(ClassificationEval),
}

/// Lexically ambiguous utterances carry an "-amb" id suffix; their final
/// token's mark lives only in the audio.
pub fn ambiguous_final_position(utt: &Utterance) -> Option<usize> {
    if utt.id.ends_with("-amb") && !utt.tokens.is_empty() {
        Some(utt.tokens.len() - 1)
    } else {
        None
    }
}

/// Evaluate a split. Utterances with "-amb" ids feed the ambiguous-subset
/// accuracy for the punct task; the roles task adds turn-level P/R/F.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    vocab: &Vocab,
    utts: &[Utterance],
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if model.cfg.task.is_tagging() {
        evaluate_tagging(model, store, vocab, utts).map(EvalReport::Tagging)
    } else {
        evaluate_classification(model, store, vocab, utts).map(EvalReport::Classification)
    }
}

fn evaluate_tagging(
    model: &Model,
    store: &ParamStore,
    vocab: &Vocab,
    utts: &[Utterance],
) -> Result<TaggingEval> {
    let mut all_pred = Vec::new();
    let mut all_gold = Vec::new();
    let mut turn_correct = 0usize;
    let mut turn_detected = 0usize;
    let mut turn_actual = 0usize;
    let mut amb_total = 0usize;
    let mut amb_right = 0usize;

    for utt in utts {
        let gold = utt
            .tags
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance {} has no gold tags", utt.id)))?;
        let batch = batch_pad(std::slice::from_ref(utt), vocab)?;
        let pred = model.predict_tags(
            store,
            batch.utt_frames(0).as_ref(),
            &batch.utt_tokens(0),
        )?;
        debug_assert_eq!(pred.len(), gold.len());

        if model.cfg.task == Task::Roles {
            let pred_turns = segment_turns(&pred);
            let gold_turns = segment_turns(gold);
            let gold_set: std::collections::HashSet<_> = gold_turns.iter().copied().collect();
            turn_correct += pred_turns.iter().filter(|t| gold_set.contains(t)).count();
            turn_detected += pred_turns.len();
            turn_actual += gold_turns.len();
        }
        if let Some(pos) = ambiguous_final_position(utt) {
            amb_total += 1;
            if pred[pos] == gold[pos] {
                amb_right += 1;
            }
        }
        all_pred.extend_from_slice(&pred);
        all_gold.extend_from_slice(gold);
    }

    let name: Box<dyn Fn(usize) -> String> = match model.cfg.task {
        Task::Punct => Box::new(RichTag::label_of_id),
        _ => Box::new(|id| role_label(id).to_string()),
    };
    let report = per_tag_f1_named(&all_pred, &all_gold, name)?;
    let ter = token_error_rate(&all_pred, &all_gold)?;

    let turn = if model.cfg.task == Task::Roles {
        let precision = if turn_detected > 0 {
            turn_correct as f64 / turn_detected as f64
        } else {
            0.0
        };
        let recall = if turn_actual > 0 {
            turn_correct as f64 / turn_actual as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Some(TurnReport {
            precision,
            recall,
            f1,
            correct: turn_correct,
            detected: turn_detected,
            actual: turn_actual,
        })
    } else {
        None
    };

    let ambiguous = if amb_total > 0 {
        Some(AmbiguousEval {
            count: amb_total,
            final_tag_accuracy: 100.0 * amb_right as f64 / amb_total as f64,
        })
    } else {
        None
    };

    Ok(TaggingEval {
        report,
        token_error_rate: ter,
        turn,
        ambiguous,
    })
}

fn evaluate_classification(
    model: &Model,
    store: &ParamStore,
    vocab: &Vocab,
    utts: &[Utterance],
) -> Result<ClassificationEval> {
    let mut pred_single = Vec::new();
    let mut gold_single = Vec::new();
    let mut pred_pairs = Vec::new();
    let mut gold_pairs = Vec::new();

    let mut forced_misses = 0usize;
    for utt in utts {
        let gold = utt
            .label
            .ok_or_else(|| Error::Data(format!("utterance {} has no label", utt.id)))?;
        let batch = batch_pad(std::slice::from_ref(utt), vocab)?;
        let tokens = batch.utt_tokens(0);
        let token_arg = if tokens.len() > 1 { Some(tokens.as_slice()) } else { None };
        // a single-modality model cannot run a sample lacking that modality;
        // it scores as a miss rather than an error
        use crate::heads::FusionMode;
        if (matches!(model.cfg.fusion, FusionMode::Se) && batch.utt_frames(0).is_none())
            || (matches!(model.cfg.fusion, FusionMode::Te) && token_arg.is_none())
        {
            forced_misses += 1;
            continue;
        }
        match model.predict_class(store, batch.utt_frames(0).as_ref(), token_arg)? {
            Prediction::Class(p) => {
                pred_single.push(p);
                gold_single.push(gold);
            }
            Prediction::Pair(pi, pe) => {
                let gold2 = utt
                    .label2
                    .ok_or_else(|| Error::Data(format!("utterance {} has no label2", utt.id)))?;
                pred_pairs.push((pi, pe));
                gold_pairs.push((gold, gold2));
            }
        }
    }

    let with_misses = |right_pct: f64, n: usize| -> f64 {
        // fold the unpredictable samples back in as misses
        right_pct * n as f64 / (n + forced_misses) as f64
    };
    if !pred_pairs.is_empty() {
        let intents: (Vec<_>, Vec<_>) = (
            pred_pairs.iter().map(|p| p.0).collect(),
            gold_pairs.iter().map(|g| g.0).collect(),
        );
        let entities: (Vec<_>, Vec<_>) = (
            pred_pairs.iter().map(|p| p.1).collect(),
            gold_pairs.iter().map(|g| g.1).collect(),
        );
        let n = pred_pairs.len();
        let joint = with_misses(joint_accuracy(&pred_pairs, &gold_pairs)?, n);
        Ok(ClassificationEval {
            accuracy: joint,
            intent_accuracy: Some(with_misses(accuracy(&intents.0, &intents.1)?, n)),
            entity_accuracy: Some(with_misses(accuracy(&entities.0, &entities.1)?, n)),
            joint_accuracy: Some(joint),
        })
    } else {
        let n = pred_single.len();
        Ok(ClassificationEval {
            accuracy: with_misses(accuracy(&pred_single, &gold_single)?, n),
            intent_accuracy: None,
            entity_accuracy: None,
            joint_accuracy: None,
        })
    }
}
