//! Decoding a split under one biasing condition and scoring the result.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::biasing::BiasList;
use crate::corpus::{build_eval_bias_list, eval_list_seed, Corpus, Split, Utterance};
use crate::decoding::{format_hypothesis, greedy_decode, parallel_map, DecodeConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_utterance, EvalReport};
use crate::model::Model;

/// Bias-list size and decoding settings for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCondition {
    pub list_size: usize,
    pub list_seed: u64,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug)]
pub struct UtteranceOutcome {
    pub id: String,
    pub list: BiasList,
    pub hypothesis: Hypothesis,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub condition: EvalCondition,
    pub report: EvalReport,
    pub utterances: Vec<UtteranceOutcome>,
}

impl Evaluation {
    /// Hypotheses file contents, one line per utterance in split order.
    pub fn hypotheses_text(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&format_hypothesis(&u.id, &u.hypothesis, &u.list));
            out.push('\n');
        }
        out
    }

    pub fn truncated(&self) -> usize {
        self.utterances.iter().filter(|u| u.hypothesis.truncated).count()
    }
}

/// Decodes and scores one utterance. `index` is its position in the split
/// and selects the distractors of its bias list.
pub fn evaluate_utterance(
    model: &Model,
    corpus: &Corpus,
    utt: &Utterance,
    index: usize,
    condition: &EvalCondition,
    bias_words: &HashSet<String>,
) -> Result<UtteranceOutcome> {
    let list = build_eval_bias_list(
        &[utt],
        &corpus.inventory,
        condition.list_size,
        eval_list_seed(condition.list_seed, condition.list_size, index),
    )?;
    let enc = model.encode(&utt.features)?;
    let hypothesis = greedy_decode(model, &enc, &list, &condition.decode)?;
    let reference = corpus.vocab.detokenize(&utt.transcript);
    let words = corpus.vocab.detokenize(&hypothesis.tokens);
    let report = score_utterance(&reference, &words, bias_words)?;
    Ok(UtteranceOutcome {
        id: utt.id.clone(),
        list,
        hypothesis,
        report,
    })
}

/// Evaluates `split` (optionally only its first `limit` utterances).
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    condition: &EvalCondition,
    limit: Option<usize>,
    jobs: usize,
) -> Result<Evaluation> {
    if model.config().vocab_size != corpus.vocab.size() {
        return Err(Error::Checkpoint(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            model.config().vocab_size,
            corpus.vocab.size()
        )));
    }
    condition.decode.validate()?;
    let utts = corpus.split(split);
    let utts = &utts[..limit.unwrap_or(utts.len()).min(utts.len())];
    let bias_words = corpus.entity_surfaces();
    let outcomes = parallel_map(utts, jobs, |i, u| {
        evaluate_utterance(model, corpus, u, i, condition, &bias_words)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = aggregate(outcomes.iter().map(|o| &o.report));
    Ok(Evaluation {
        condition: condition.clone(),
        report,
        utterances: outcomes,
    })
}

/// Decodes `split` against one fixed bias list instead of per-utterance
/// lists built from the inventory.
pub fn evaluate_with_list(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    list: &BiasList,
    decode: &DecodeConfig,
    limit: Option<usize>,
    jobs: usize,
) -> Result<Evaluation> {
    if model.config().vocab_size != corpus.vocab.size() {
        return Err(Error::Checkpoint(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            model.config().vocab_size,
            corpus.vocab.size()
        )));
    }
    decode.validate()?;
    let utts = corpus.split(split);
    let utts = &utts[..limit.unwrap_or(utts.len()).min(utts.len())];
    let bias_words = corpus.entity_surfaces();
    let outcomes = parallel_map(utts, jobs, |_, u| {
        let enc = model.encode(&u.features)?;
        let hypothesis = greedy_decode(model, &enc, list, decode)?;
        let reference = corpus.vocab.detokenize(&u.transcript);
        let words = corpus.vocab.detokenize(&hypothesis.tokens);
        let report = score_utterance(&reference, &words, &bias_words)?;
        Ok(UtteranceOutcome {
            id: u.id.clone(),
            list: list.clone(),
            hypothesis,
            report,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = aggregate(outcomes.iter().map(|o| &o.report));
    Ok(Evaluation {
        condition: EvalCondition {
            list_size: list.real_count(),
            list_seed: 0,
            decode: decode.clone(),
        },
        report,
        utterances: outcomes,
    })
}
