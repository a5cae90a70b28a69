//! Teacher-forced optimization of the multi-token objective plus the entity
//! classification loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use mtpbias_tensor::{adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Real, Tape, Tensor, Var};

use crate::biasing::{entity_logits_on, BiasList, Entity, EntityScorer};
use crate::corpus::{sample_bias_list, Corpus, EntitySpan, SamplerConfig, Split, Utterance};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalCondition};
use crate::metrics::RateSummary;
use crate::model::{Bound, Model, ModelConfig};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Weighted multi-head cross-entropy, plus the entity loss when enabled.
    Joint,
    /// Plain next-token negative log-likelihood of head 1.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Per-head loss weights; the length must equal the number of heads.
    pub alpha: Vec<f32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub objective: Objective,
    pub entity_loss: bool,
    pub kappa: usize,
    pub min_positives: usize,
    pub max_positives: usize,
    /// Dev evaluation after every `dev_every` epochs; 0 disables it.
    pub dev_every: usize,
    pub dev_limit: Option<usize>,
    pub dev_list_size: usize,
    pub dev_lambda: f64,
    pub dev_gamma: f64,
    pub max_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: vec![1.0, 0.2, 0.1, 0.05],
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            seed: 17,
            objective: Objective::Joint,
            entity_loss: true,
            kappa: 2,
            min_positives: 1,
            max_positives: 4,
            dev_every: 1,
            dev_limit: None,
            dev_list_size: 100,
            dev_lambda: 1.0,
            dev_gamma: 0.0,
            max_len: 64,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.alpha.len() != model.mtp_heads {
            return Err(Error::Config(format!(
                "training.alpha has {} weights but model.mtp_heads is {}",
                self.alpha.len(),
                model.mtp_heads
            )));
        }
        if !(self.alpha[0] > 0.0) || self.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config(
                "training.alpha must be finite and non-negative with alpha[0] > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        self.sampler().validate()?;
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            min_positives: self.min_positives,
            max_positives: self.max_positives,
            kappa: self.kappa,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            warmup_steps: self.warmup_steps,
        }
    }

    fn uses_entity_loss(&self) -> bool {
        self.objective == Objective::Joint && self.entity_loss
    }
}

/// `τ_s` for every decoding step: the list index of the entity starting at
/// the token predicted from step `s`, or 0 for the null entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityTargets(pub Vec<usize>);

/// Builds `τ` for a transcript with `steps` decoding steps. `spans` pairs a
/// transcript index with the entity starting there; every entity must be in
/// `list`. When two entities start at the same index the longer one wins.
pub fn build_entity_targets(steps: usize, spans: &[(usize, &Entity)], list: &BiasList) -> Result<EntityTargets> {
    let mut tau = vec![0usize; steps];
    let mut len_at = vec![0usize; steps];
    for &(start, entity) in spans {
        let index = list.index_of(entity.surface()).ok_or_else(|| {
            Error::Supervision(format!("entity {:?} is not in the bias list", entity.surface()))
        })?;
        if start == 0 || start > steps {
            return Err(Error::Supervision(format!(
                "entity {:?} starts at {start}, outside 1..={steps}",
                entity.surface()
            )));
        }
        let s = start - 1;
        if entity.tokens().len() > len_at[s] {
            tau[s] = index;
            len_at[s] = entity.tokens().len();
        }
    }
    Ok(EntityTargets(tau))
}

/// Targets for the supervised spans of an utterance.
pub fn utterance_targets(
    utt: &Utterance,
    spans: &[EntitySpan],
    corpus: &Corpus,
    list: &BiasList,
) -> Result<EntityTargets> {
    let resolved = spans
        .iter()
        .map(|s| Ok((s.start, corpus.inventory.entity(s.entity)?)))
        .collect::<Result<Vec<_>>>()?;
    build_entity_targets(utt.steps(), &resolved, list)
}

/// Weighted multi-head cross-entropy. `head_logits[k]` is `[S × V]` (or
/// `None` for a head that is not evaluated); head `k` at step `s` predicts
/// `transcript[s + k + 1]`, and rows past the end are dropped from both the
/// sum and its normalization.
pub fn mtp_loss_on<R: Real>(
    tape: &mut Tape<'_, R>,
    head_logits: &[Option<Var>],
    transcript: &[TokenId],
    alpha: &[f32],
) -> Result<Var> {
    let steps = transcript.len() - 1;
    let mut total: Option<Var> = None;
    for (k, (logits, &a)) in head_logits.iter().zip(alpha).enumerate() {
        let Some(logits) = *logits else { continue };
        if a == 0.0 || k >= steps {
            continue;
        }
        let valid = steps - k;
        let rows = if valid == steps {
            logits
        } else {
            tape.slice(logits, 0, 0, valid)?
        };
        let ce = tape.cross_entropy(rows, &transcript[k + 1..k + 1 + valid])?;
        let sum = tape.sum(ce);
        let term = tape.scale(sum, R::lit(a as f64 / valid as f64));
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Validation("no head contributes to the loss".into()))
}

/// `-(1/S) Σ_s log P_e(τ_s)` from entity logits `z [S × (N+1)]`.
pub fn entity_loss_on<R: Real>(tape: &mut Tape<'_, R>, z: Var, targets: &EntityTargets) -> Result<Var> {
    let ce = tape.cross_entropy(z, &targets.0)?;
    let sum = tape.sum(ce);
    Ok(tape.scale(sum, R::lit(1.0 / targets.0.len() as f64)))
}

/// Negative log-likelihood of the plain encoder-decoder: head 1 only.
pub fn aed_nll_on<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    model: &Model<R>,
    b: &Bound,
    features: Var,
    transcript: &[TokenId],
) -> Result<Var> {
    let steps = transcript.len() - 1;
    let enc = model.encode_on(tape, b, features)?;
    let h = model.decode_on(tape, b, &transcript[..steps], enc)?;
    let logits = model.head_logits_on(tape, b, h, 0)?;
    let ce = tape.cross_entropy(logits, &transcript[1..])?;
    let sum = tape.sum(ce);
    Ok(tape.scale(sum, R::lit(1.0 / steps as f64)))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mtp: Var,
    pub entity: Option<Var>,
}

/// `L_MTP + L_entity` for one utterance; the entity term is present when
/// `entity` supplies a list and its targets.
pub fn joint_loss_on<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    model: &Model<R>,
    b: &Bound,
    features: Var,
    transcript: &[TokenId],
    alpha: &[f32],
    entity: Option<(&BiasList, &EntityTargets)>,
) -> Result<LossParts> {
    if transcript.len() < 2 {
        return Err(Error::Validation("transcript needs BOS and at least one target".into()));
    }
    let steps = transcript.len() - 1;
    let enc = model.encode_on(tape, b, features)?;
    let h = model.decode_on(tape, b, &transcript[..steps], enc)?;
    let mut heads = Vec::with_capacity(alpha.len());
    for (k, &a) in alpha.iter().enumerate() {
        heads.push(if a != 0.0 || entity.is_some() {
            Some(model.head_logits_on(tape, b, h, k)?)
        } else {
            None
        });
    }
    let mtp = mtp_loss_on(tape, &heads, transcript, alpha)?;
    let Some((list, targets)) = entity else {
        return Ok(LossParts {
            total: mtp,
            mtp,
            entity: None,
        });
    };
    if targets.0.len() != steps {
        return Err(Error::Supervision(format!(
            "{} entity targets for {steps} steps",
            targets.0.len()
        )));
    }
    let all: Vec<Var> = heads.into_iter().map(|v| v.expect("all heads evaluated")).collect();
    let z = entity_logits_on(tape, model, b, &all, list, &EntityScorer::Learned)?;
    let ent = entity_loss_on(tape, z, targets)?;
    let total = tape.add(mtp, ent)?;
    Ok(LossParts {
        total,
        mtp,
        entity: Some(ent),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: u64,
    pub l_mtp: f32,
    pub l_entity: f32,
    pub dev: Option<RateSummary>,
}

pub const CURVE_HEADER: &str = "epoch,step,l_mtp,l_entity,dev_wer,dev_bwer,dev_uwer";

pub fn format_curve(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for p in points {
        let (w, b, u) = p.dev.map_or((None, None, None), |d| (d.wer, d.b_wer, d.u_wer));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.epoch,
            p.step,
            p.l_mtp,
            p.l_entity,
            opt(w),
            opt(b),
            opt(u)
        );
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    next_epoch: usize,
    step: u64,
    best_dev_wer: Option<f64>,
    best_epoch: Option<usize>,
    curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Model,
    /// Parameters with the lowest dev WER (the last ones without dev runs).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub curve: Vec<CurvePoint>,
}

fn stream_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    for v in [a, b] {
        x = (x ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x ^= x >> 29;
    }
    x
}

const SHUFFLE_STREAM: u64 = 1;
const LIST_STREAM: u64 = 2;

/// Accumulated per-utterance gradients, one slot per parameter.
fn add_gradients(model: &mut Model, grads: Vec<Option<Vec<f32>>>) -> Result<()> {
    for (t, g) in model.params_mut().tensors_mut().iter_mut().zip(grads) {
        if let Some(g) = g {
            t.accumulate_grad(&g)?;
        }
    }
    Ok(())
}

/// One optimizer step on `batch`. Returns the batch means of `L_MTP` and
/// `L_entity`.
fn train_batch(
    model: &mut Model,
    adam: &mut AdamState,
    corpus: &Corpus,
    batch: &[&Utterance],
    cfg: &TrainingConfig,
    list_seed: u64,
) -> Result<(f32, f32)> {
    let lists = if cfg.uses_entity_loss() {
        Some(sample_bias_list(batch, &corpus.inventory, &cfg.sampler(), list_seed)?)
    } else {
        None
    };
    model.params_mut().zero_grad();
    let mut sum_mtp = 0.0f32;
    let mut sum_ent = 0.0f32;
    let mut sum_total = 0.0f32;
    for (i, utt) in batch.iter().enumerate() {
        let targets = match &lists {
            Some(tl) => Some(utterance_targets(utt, &tl.supervised[i], corpus, &tl.list)?),
            None => None,
        };
        let grads = {
            let mut tape = Tape::new();
            let b = model.params().bind(&mut tape);
            let x = tape.leaf(&utt.features);
            let (total, mtp, ent) = match cfg.objective {
                Objective::Baseline => {
                    let l = aed_nll_on(&mut tape, model, &b, x, &utt.transcript)?;
                    (l, l, None)
                }
                Objective::Joint => {
                    let entity = lists.as_ref().zip(targets.as_ref()).map(|(tl, t)| (&tl.list, t));
                    let parts = joint_loss_on(&mut tape, model, &b, x, &utt.transcript, &cfg.alpha, entity)?;
                    (parts.total, parts.mtp, parts.entity)
                }
            };
            sum_total += tape.value(total)[0];
            sum_mtp += tape.value(mtp)[0];
            if let Some(e) = ent {
                sum_ent += tape.value(e)[0];
            }
            let mut g = tape.backward(total)?;
            b.vars().iter().map(|v| g.take(*v)).collect::<Vec<_>>()
        };
        add_gradients(model, grads)?;
    }
    let n = batch.len() as f32;
    let step = adam.step_count + 1;
    if !sum_total.is_finite() {
        return Err(Error::NonFinite {
            step,
            learning_rate: adam.learning_rate_at(step),
        });
    }
    for t in model.params_mut().tensors_mut() {
        t.scale_grad(1.0 / n);
    }
    adam_step(model.params_mut().tensors_mut(), adam)?;
    Ok((sum_mtp / n, sum_ent / n))
}

fn dev_condition(cfg: &TrainingConfig) -> EvalCondition {
    EvalCondition {
        list_size: if cfg.uses_entity_loss() { cfg.dev_list_size } else { 0 },
        list_seed: cfg.seed,
        decode: DecodeConfig {
            lambda: cfg.dev_lambda,
            gamma: cfg.dev_gamma,
            max_len: cfg.max_len,
            scorer: EntityScorer::Learned,
        },
    }
}

const LAST: &str = "last";
const BEST: &str = "best";
const OPTIM: &str = "last.optim";
const STATE: &str = "last.state.json";
pub const CURVE_FILE: &str = "curve.csv";

pub fn save_model(model: &Model, stem: &Path) -> Result<()> {
    save_checkpoint(stem, model.params().iter())?;
    Ok(())
}

/// Loads a checkpoint written by [`save_model`] into a fresh model.
pub fn load_model(config: &ModelConfig, stem: &Path) -> Result<Model> {
    let mut model = Model::new(config.clone())?;
    model.load_named(load_checkpoint(stem)?)?;
    Ok(model)
}

fn save_optimizer(model: &Model, adam: &AdamState, stem: &Path) -> Result<()> {
    let names = model.params().names();
    let m_names: Vec<String> = names.iter().map(|n| format!("m.{n}")).collect();
    let v_names: Vec<String> = names.iter().map(|n| format!("v.{n}")).collect();
    let mut entries: Vec<(&str, &Tensor)> = Vec::with_capacity(2 * names.len());
    entries.extend(m_names.iter().map(String::as_str).zip(&adam.first_moment));
    entries.extend(v_names.iter().map(String::as_str).zip(&adam.second_moment));
    save_checkpoint(stem, entries)?;
    Ok(())
}

fn load_optimizer(model: &Model, cfg: AdamConfig, step: u64, stem: &Path) -> Result<AdamState> {
    let mut state = AdamState::new(model.params().tensors(), cfg);
    state.step_count = step;
    let n = model.params().len();
    let loaded = load_checkpoint(stem)?;
    if loaded.len() != 2 * n {
        return Err(Error::Checkpoint(format!("optimizer state has {} tensors, expected {}", loaded.len(), 2 * n)));
    }
    for (i, (name, t)) in loaded.into_iter().enumerate() {
        let (slot, expect) = if i < n {
            (&mut state.first_moment[i], format!("m.{}", model.params().names()[i]))
        } else {
            (&mut state.second_moment[i - n], format!("v.{}", model.params().names()[i - n]))
        };
        if name != expect || t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("optimizer tensor {name} does not match {expect}")));
        }
        *slot = t;
    }
    Ok(state)
}

/// Trains a fresh model (or resumes from `out_dir`). With `out_dir` set,
/// the last and best checkpoints, optimizer state and loss curve are
/// written there after every epoch.
pub fn train(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate(model_cfg)?;
    if model_cfg.vocab_size != corpus.vocab.size() {
        return Err(Error::Config(format!(
            "model.vocab_size {} does not match corpus vocabulary {}",
            model_cfg.vocab_size,
            corpus.vocab.size()
        )));
    }
    if corpus.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut adam = AdamState::new(model.params().tensors(), cfg.adam());
    let mut state = TrainState {
        next_epoch: 0,
        step: 0,
        best_dev_wer: None,
        best_epoch: None,
        curve: Vec::new(),
    };
    let mut best = model.clone();
    if let (true, Some(dir)) = (resume, out_dir) {
        state = serde_json::from_str(&fs::read_to_string(dir.join(STATE))?)?;
        model = load_model(model_cfg, &dir.join(LAST))?;
        adam = load_optimizer(&model, cfg.adam(), state.step, &dir.join(OPTIM))?;
        best = if state.best_epoch.is_some() {
            load_model(model_cfg, &dir.join(BEST))?
        } else {
            model.clone()
        };
        log::info!("resuming at epoch {} (step {})", state.next_epoch, state.step);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let condition = dev_condition(cfg);
    for epoch in state.next_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(stream_seed(
            cfg.seed,
            SHUFFLE_STREAM,
            epoch as u64,
            0,
        )));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let seed = stream_seed(cfg.seed, LIST_STREAM, epoch as u64, b as u64);
            let (l_mtp, l_entity) = train_batch(&mut model, &mut adam, corpus, &batch, cfg, seed).map_err(|e| {
                if e.is_numeric() {
                    let step = adam.step_count + 1;
                    Error::NonFinite {
                        step,
                        learning_rate: adam.learning_rate_at(step),
                    }
                } else {
                    e
                }
            })?;
            state.step = adam.step_count;
            state.curve.push(CurvePoint {
                epoch,
                step: state.step,
                l_mtp,
                l_entity,
                dev: None,
            });
        }
        if cfg.dev_every > 0 && (epoch + 1) % cfg.dev_every == 0 && !corpus.dev.is_empty() {
            let eval = evaluate(&model, corpus, Split::Dev, &condition, cfg.dev_limit, 1)?;
            let summary = eval.report.summary();
            if let Some(p) = state.curve.last_mut() {
                p.dev = Some(summary);
            }
            let wer = summary.wer.unwrap_or(f64::INFINITY);
            if state.best_dev_wer.map_or(true, |b| wer < b) {
                state.best_dev_wer = Some(wer);
                state.best_epoch = Some(epoch);
                best = model.clone();
            }
            log::info!("epoch {epoch}: dev {summary}");
        } else if state.best_epoch.is_none() {
            best = model.clone();
        }
        let last = state.curve.last().expect("non-empty epoch");
        log::info!("epoch {epoch} step {}: l_mtp {} l_entity {}", last.step, last.l_mtp, last.l_entity);
        state.next_epoch = epoch + 1;
        if let Some(dir) = out_dir {
            save_model(&model, &dir.join(LAST))?;
            save_model(&best, &dir.join(BEST))?;
            save_optimizer(&model, &adam, &dir.join(OPTIM))?;
            fs::write(dir.join(STATE), serde_json::to_string(&state)? + "\n")?;
            fs::write(dir.join(CURVE_FILE), format_curve(&state.curve))?;
        }
    }
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch: state.best_epoch,
        curve: state.curve,
    })
}
