//! Greedy decoding over the unified search space of static tokens and
//! whole bias-list entities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use mtpbias_tensor::Real;

use crate::biasing::{score_entities, BiasList, EntityScorer};
use crate::error::{Error, Result};
use crate::model::{EncoderStates, Model, MtpLogits};
use crate::vocab::{TokenId, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub max_len: usize,
    pub scorer: EntityScorer,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.0,
            max_len: 64,
            scorer: EntityScorer::Learned,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("decode.lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("decode.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode.max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<R: Real>(x: &[R]) -> Vec<R> {
    let max = x.iter().copied().fold(R::neg_infinity(), R::max);
    let mut out: Vec<R> = x.iter().map(|v| (*v - max).exp()).collect();
    let total = out.iter().copied().fold(R::zero(), |a, b| a + b);
    for v in &mut out {
        *v = *v / total;
    }
    out
}

/// Confidence gate: when no real entity reaches `gamma`, the posterior
/// collapses onto the null entity.
pub fn apply_threshold<R: Real>(pe: &[R], gamma: f64) -> Vec<R> {
    let best = pe[1..].iter().copied().fold(R::zero(), R::max);
    if best < R::lit(gamma) {
        let mut out = vec![R::zero(); pe.len()];
        out[0] = R::one();
        out
    } else {
        pe.to_vec()
    }
}

/// Unnormalized scores `Q`: `P_e(∅)·P₁(i)` for static tokens and
/// `λ·P_e(E_n)` for real entities.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedScores<R: Real = f32> {
    pub static_scores: Vec<R>,
    pub entity_scores: Vec<R>,
}

/// Builds `Q` from head-1 probabilities and the raw entity posterior.
pub fn unified_scores<R: Real>(p1: &[R], pe: &[R], lambda: f64, gamma: f64) -> UnifiedScores<R> {
    let gated = apply_threshold(pe, gamma);
    let lambda = R::lit(lambda);
    UnifiedScores {
        static_scores: p1.iter().map(|p| gated[0] * *p).collect(),
        entity_scores: gated[1..].iter().map(|p| lambda * *p).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    Token(TokenId),
    /// Index into the bias list (1-based, since 0 is the null entity).
    Entity(usize),
}

fn argmax<R: Real>(xs: &[R]) -> Option<(usize, R)> {
    let mut best: Option<(usize, R)> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.map_or(true, |(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best
}

/// Argmax over `Q`. Ties go to the static branch, then to the lowest index.
pub fn select<R: Real>(q: &UnifiedScores<R>) -> Choice {
    let (token, best_static) = argmax(&q.static_scores).expect("non-empty vocabulary");
    match argmax(&q.entity_scores) {
        Some((n, score)) if score > best_static => Choice::Entity(n + 1),
        _ => Choice::Token(token),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    /// Offset of the entity's first token in `Hypothesis::tokens`.
    pub position: usize,
    /// Bias-list index.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypothesis {
    /// Emitted tokens after BOS, ending with EOS unless truncated.
    pub tokens: Vec<TokenId>,
    pub emissions: Vec<Emission>,
    pub trace: Vec<Choice>,
    pub truncated: bool,
}

/// The posterior `P_e` for one step, skipping the scorer when biasing is
/// disabled by `λ = 0`.
pub fn entity_posterior<R: Real>(
    model: &Model<R>,
    logits: &MtpLogits<R>,
    list: &BiasList,
    cfg: &DecodeConfig,
) -> Result<Vec<R>> {
    if cfg.lambda == 0.0 {
        let mut pe = vec![R::zero(); list.len()];
        pe[0] = R::one();
        return Ok(pe);
    }
    score_entities(model, logits, list, &cfg.scorer)
}

/// Greedy search over `Q`. `advance` feeds newly emitted tokens to the
/// decoder (BOS first) and returns the logits for the next step; `posterior`
/// maps those logits to `P_e`. An emitted entity contributes all of its
/// tokens, which are then fed back as ordinary history.
pub fn greedy_search<R, A, P>(mut advance: A, mut posterior: P, list: &BiasList, cfg: &DecodeConfig) -> Result<Hypothesis>
where
    R: Real,
    A: FnMut(&[TokenId]) -> Result<MtpLogits<R>>,
    P: FnMut(&MtpLogits<R>) -> Result<Vec<R>>,
{
    cfg.validate()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        emissions: Vec::new(),
        trace: Vec::new(),
        truncated: false,
    };
    let mut logits = advance(&[BOS])?;
    loop {
        let p1 = softmax(logits.row(0));
        let pe = posterior(&logits)?;
        if pe.len() != list.len() {
            return Err(Error::Validation(format!(
                "entity posterior has {} entries for a list of {}",
                pe.len(),
                list.len()
            )));
        }
        let q = unified_scores(&p1, &pe, cfg.lambda, cfg.gamma);
        let choice = select(&q);
        hyp.trace.push(choice);
        let emitted: Vec<TokenId> = match choice {
            Choice::Token(t) => vec![t],
            Choice::Entity(n) => {
                hyp.emissions.push(Emission {
                    position: hyp.tokens.len(),
                    index: n,
                });
                list.entries()[n].tokens().to_vec()
            }
        };
        hyp.tokens.extend_from_slice(&emitted);
        if choice == Choice::Token(EOS) {
            return Ok(hyp);
        }
        if hyp.tokens.len() >= cfg.max_len {
            hyp.truncated = true;
            log::warn!("decode stopped at max_len {} without EOS", cfg.max_len);
            return Ok(hyp);
        }
        logits = advance(&emitted)?;
    }
}

/// Greedy decoding of one utterance with the model's heads and scorer.
pub fn greedy_decode<R: Real>(
    model: &Model<R>,
    enc: &EncoderStates<R>,
    list: &BiasList,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    if let Some(e) = list.entries().iter().find(|e| e.tokens().iter().any(|&t| t >= model.config().vocab_size)) {
        return Err(Error::Validation(format!(
            "entity {:?} uses ids beyond the model vocabulary",
            e.surface()
        )));
    }
    let mut dec = model.start_decoder(enc)?;
    let advance = |tokens: &[TokenId]| {
        let mut hidden = Vec::new();
        for &t in tokens {
            hidden = dec.step(t)?;
        }
        model.mtp_heads(&hidden)
    };
    let posterior = |logits: &MtpLogits<R>| entity_posterior(model, logits, list, cfg);
    greedy_search(advance, posterior, list, cfg)
}

/// Plain greedy decoding with head 1: `argmax P₁` until EOS.
pub fn baseline_greedy_decode<R: Real>(model: &Model<R>, enc: &EncoderStates<R>, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("decode.max_len must be positive".into()));
    }
    let mut dec = model.start_decoder(enc)?;
    let mut hidden = dec.step(BOS)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        emissions: Vec::new(),
        trace: Vec::new(),
        truncated: false,
    };
    loop {
        let p1 = softmax(&model.head_logits(&hidden, 0)?);
        let (t, _) = argmax(&p1).expect("non-empty vocabulary");
        hyp.trace.push(Choice::Token(t));
        hyp.tokens.push(t);
        if t == EOS {
            return Ok(hyp);
        }
        if hyp.tokens.len() >= max_len {
            hyp.truncated = true;
            log::warn!("decode stopped at max_len {max_len} without EOS");
            return Ok(hyp);
        }
        hidden = dec.step(t)?;
    }
}

/// One hypotheses-file line: `id<TAB>token ids<TAB>position:surface …`.
pub fn format_hypothesis(id: &str, hyp: &Hypothesis, list: &BiasList) -> String {
    let ids: Vec<String> = hyp.tokens.iter().map(|t| t.to_string()).collect();
    let mut trace = String::new();
    for (i, e) in hyp.emissions.iter().enumerate() {
        if i > 0 {
            trace.push(' ');
        }
        let _ = write!(trace, "{}:{}", e.position, list.entries()[e.index].surface());
    }
    format!("{id}\t{}\t{trace}", ids.join(" "))
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
pub fn parallel_map<T: Sync, U: Send, F>(items: &[T], jobs: usize, f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decode worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gated_entity_wins() {
        let q = unified_scores(&[0.5f64, 0.5], &[0.8, 0.2], 4.4, 0.0);
        assert!((q.static_scores[0] - 0.4).abs() < 1e-12);
        assert!((q.entity_scores[0] - 0.88).abs() < 1e-12);
        assert_eq!(select(&q), Choice::Entity(1));
    }

    #[test]
    fn threshold_restores_static_branch() {
        let q = unified_scores(&[0.7f64, 0.3], &[0.7, 0.3], 10.0, 0.5);
        assert_eq!(q.static_scores, vec![0.7, 0.3]);
        assert_eq!(q.entity_scores, vec![0.0]);
        assert_eq!(select(&q), Choice::Token(0));
    }

    #[test]
    fn zero_lambda_never_selects_entities() {
        let q = unified_scores(&[0.1f64, 0.9], &[0.01, 0.99], 0.0, 0.0);
        assert_eq!(select(&q), Choice::Token(1));
    }

    #[test]
    fn ties_prefer_static_then_lowest_index() {
        let q = UnifiedScores {
            static_scores: vec![0.25f64, 0.5, 0.5],
            entity_scores: vec![0.5, 0.5],
        };
        assert_eq!(select(&q), Choice::Token(1));
        let q = UnifiedScores {
            static_scores: vec![0.1f64],
            entity_scores: vec![0.3, 0.3],
        };
        assert_eq!(select(&q), Choice::Entity(1));
    }

    #[test]
    fn config_validation() {
        let bad = DecodeConfig {
            gamma: 1.5,
            ..DecodeConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DecodeConfig {
            lambda: -1.0,
            ..DecodeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<usize> = (0..37).collect();
        let ys = parallel_map(&xs, 4, |i, x| i * 100 + x);
        assert_eq!(ys, (0..37).map(|i| i * 101).collect::<Vec<_>>());
    }
}
