//! Entity scoring from future-token logits.
//!
//! Each candidate entity is read off the `K` head logits at its aligned
//! sub-word ids (padding short entities, truncating long ones) and the
//! resulting `K`-vector is mapped to a score by a shared scorer. A softmax
//! over the list, including the null entity at index 0, gives `P_e`.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use mtpbias_tensor::{Real, Tape, Var};

use crate::error::{Error, Result};
use crate::model::{Bound, Model, MtpLogits};
use crate::vocab::{TokenId, PAD};

pub const NULL_SURFACE: &str = "<null>";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    tokens: Vec<TokenId>,
    surface: String,
}

impl Entity {
    pub fn new(surface: impl Into<String>, tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        let surface = surface.into();
        if tokens.is_empty() {
            return Err(Error::Validation(format!("entity {surface:?} has no tokens")));
        }
        if tokens.contains(&PAD) {
            return Err(Error::Validation(format!("entity {surface:?} contains the padding token")));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Validation(format!(
                "entity {surface:?}: token {bad} outside vocabulary of {vocab_size}"
            )));
        }
        if surface.is_empty() || surface.contains(['\t', '\n']) || surface.starts_with('#') {
            return Err(Error::Validation(format!("invalid entity surface {surface:?}")));
        }
        Ok(Self { tokens, surface })
    }

    /// The null entity: a single padding token.
    pub fn null() -> Self {
        Self {
            tokens: vec![PAD],
            surface: NULL_SURFACE.to_string(),
        }
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [PAD]
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    /// The first `k` tokens, padded with `PAD` when the entity is shorter.
    pub fn aligned(&self, k: usize) -> Vec<TokenId> {
        (0..k).map(|i| self.tokens.get(i).copied().unwrap_or(PAD)).collect()
    }
}

/// Candidate list with the null entity fixed at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiasList {
    entries: Vec<Entity>,
}

impl BiasList {
    /// The degenerate list `{∅}`.
    pub fn null_only() -> Self {
        Self {
            entries: vec![Entity::null()],
        }
    }

    /// `{∅} ∪ entities`, rejecting duplicate surfaces.
    pub fn from_entities<I: IntoIterator<Item = Entity>>(entities: I) -> Result<Self> {
        let mut entries = vec![Entity::null()];
        entries.extend(entities);
        Self::from_entries(entries)
    }

    /// A raw list whose first entry must be the null entity.
    pub fn from_entries(entries: Vec<Entity>) -> Result<Self> {
        match entries.first() {
            Some(e) if e.is_null() => {}
            _ => {
                return Err(Error::Validation(
                    "bias list must start with the null entity".into(),
                ))
            }
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.surface()) {
                return Err(Error::Validation(format!("duplicate entity surface {:?}", e.surface())));
            }
        }
        if entries.iter().skip(1).any(Entity::is_null) {
            return Err(Error::Validation("null entity may appear only at index 0".into()));
        }
        Ok(Self { entries })
    }

    /// Entries including the null entity.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of real entities `N`.
    pub fn real_count(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn get(&self, index: usize) -> Option<&Entity> {
        self.entries.get(index)
    }

    pub fn entries(&self) -> &[Entity] {
        &self.entries
    }

    pub fn index_of(&self, surface: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.surface() == surface)
    }

    /// Aligned token grid, `[N+1][K]`.
    pub fn aligned(&self, k: usize) -> Vec<Vec<TokenId>> {
        self.entries.iter().map(|e| e.aligned(k)).collect()
    }

    /// Returns a copy with entities `1..=N` reordered by `order`, a
    /// permutation of `0..N`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.real_count() {
            return Err(Error::Validation("permutation length mismatch".into()));
        }
        let mut entries = vec![Entity::null()];
        entries.extend(order.iter().map(|&i| self.entries[i + 1].clone()));
        Self::from_entries(entries)
    }
}

/// Parses the bias-list text format: one `surface<TAB>ids` line per entity,
/// `#` comments and blank lines ignored. The null entity is implicit.
pub fn parse_bias_list(text: &str, vocab_size: usize) -> Result<BiasList> {
    let mut entities = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (surface, ids) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("bias list line {}: expected surface<TAB>ids", lineno + 1)))?;
        let tokens = ids
            .split_whitespace()
            .map(|t| {
                t.parse::<TokenId>()
                    .map_err(|_| Error::Data(format!("bias list line {}: bad token id {t:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        entities.push(Entity::new(surface, tokens, vocab_size)?);
    }
    BiasList::from_entities(entities)
}

pub fn format_bias_list(list: &BiasList) -> String {
    let mut out = String::new();
    for e in list.entries().iter().skip(1) {
        let ids: Vec<String> = e.tokens().iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{}\t{}", e.surface(), ids.join(" "));
    }
    out
}

/// `p_n`: head `k`'s logit at the entity's `k`-th aligned token.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityLogitVector<R: Real = f32>(pub Vec<R>);

pub fn build_entity_vector<R: Real>(logits: &MtpLogits<R>, entity: &Entity, k: usize) -> Result<EntityLogitVector<R>> {
    if k != logits.heads() {
        return Err(Error::Validation(format!(
            "entity vector for K={k} from logits with {} heads",
            logits.heads()
        )));
    }
    let values = entity
        .aligned(k)
        .iter()
        .enumerate()
        .map(|(row, &tok)| logits.row(row)[tok])
        .collect();
    Ok(EntityLogitVector(values))
}

/// Entity scoring function used to turn `p_n` into a score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EntityScorer {
    /// The trained feed-forward scorer stored with the model.
    Learned,
    /// Fixed weighted sum of logits.
    Heuristic { weights: Vec<f32> },
}

impl EntityScorer {
    pub fn uniform_heuristic(k: usize) -> Self {
        EntityScorer::Heuristic {
            weights: vec![1.0 / k as f32; k],
        }
    }
}

/// `Σ_k w[k]·p[k]`
pub fn heuristic_score<R: Real>(p: &EntityLogitVector<R>, weights: &[R]) -> Result<R> {
    if weights.len() != p.0.len() {
        return Err(Error::Validation(format!(
            "heuristic weights have length {}, entity vector {}",
            weights.len(),
            p.0.len()
        )));
    }
    Ok(p.0.iter().zip(weights).map(|(a, b)| *a * *b).sum())
}

/// Gathers every list entry's aligned logits for every step.
///
/// `head_logits[k]` is `[S × V]`; the result is `[S·(N+1) × K]` with rows
/// ordered step-major.
pub fn entity_logit_matrix<'a, R: Real>(tape: &mut Tape<'a, R>, head_logits: &[Var], list: &BiasList) -> Result<Var> {
    let k = head_logits.len();
    let shape = tape.shape(head_logits[0]).to_vec();
    let (steps, vocab) = (shape[0], shape[1]);
    let grid = list.aligned(k);
    let mut columns = Vec::with_capacity(k);
    for (head, &logits) in head_logits.iter().enumerate() {
        let idx: Vec<usize> = (0..steps)
            .flat_map(|s| grid.iter().map(move |row| s * vocab + row[head]))
            .collect();
        let col = tape.gather(logits, &idx)?;
        columns.push(tape.reshape(col, vec![steps * grid.len(), 1])?);
    }
    Ok(tape.concat(&columns, 1)?)
}

/// Applies the scorer to `p [M × K]`, returning `[M]` scores.
pub fn scorer_on<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    model: &Model<R>,
    bound: &Bound,
    p: Var,
    scorer: &EntityScorer,
) -> Result<Var> {
    let rows = tape.shape(p)[0];
    let k = tape.shape(p)[1];
    let z = match scorer {
        EntityScorer::Learned => {
            let s = model.scorer_params();
            let h = tape.matmul(p, bound.var(s.hidden_w))?;
            let h = tape.add(h, bound.var(s.hidden_b))?;
            let h = tape.gelu(h);
            let z = tape.matmul(h, bound.var(s.out_w))?;
            tape.add(z, bound.var(s.out_b))?
        }
        EntityScorer::Heuristic { weights } => {
            if weights.len() != k {
                return Err(Error::Validation(format!(
                    "heuristic weights have length {}, expected K={k}",
                    weights.len()
                )));
            }
            let w = tape.constant(vec![k, 1], weights.iter().map(|w| R::lit(*w as f64)).collect())?;
            tape.matmul(p, w)?
        }
    };
    Ok(tape.reshape(z, vec![rows])?)
}

/// Entity logits `z_s` for every step, `[S × (N+1)]`.
pub fn entity_logits_on<'a, R: Real>(
    tape: &mut Tape<'a, R>,
    model: &Model<R>,
    bound: &Bound,
    head_logits: &[Var],
    list: &BiasList,
    scorer: &EntityScorer,
) -> Result<Var> {
    let steps = tape.shape(head_logits[0])[0];
    let p = entity_logit_matrix(tape, head_logits, list)?;
    let z = scorer_on(tape, model, bound, p, scorer)?;
    Ok(tape.reshape(z, vec![steps, list.len()])?)
}

/// `P_e = softmax(f(p_n))` over the `N+1` list entries for one step.
pub fn score_entities<R: Real>(
    model: &Model<R>,
    logits: &MtpLogits<R>,
    list: &BiasList,
    scorer: &EntityScorer,
) -> Result<Vec<R>> {
    let k = model.config().mtp_heads;
    if logits.heads() != k {
        return Err(Error::Validation(format!(
            "logits have {} heads, model has {k}",
            logits.heads()
        )));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let heads = (0..k)
        .map(|row| tape.borrowed(vec![1, logits.vocab()], logits.row(row)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let z = entity_logits_on(&mut tape, model, &bound, &heads, list, scorer)?;
    let pe = tape.softmax(z, 1)?;
    Ok(tape.value(pe).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(k: usize, v: usize) -> MtpLogits<f64> {
        let data = (0..k * v).map(|i| i as f64 * 0.5 - 3.0).collect();
        MtpLogits::new(k, v, data).unwrap()
    }

    #[test]
    fn pads_short_entities() {
        let l = logits(4, 10);
        let e = Entity::new("x", vec![7, 3], 10).unwrap();
        let p = build_entity_vector(&l, &e, 4).unwrap();
        assert_eq!(p.0, vec![l.row(0)[7], l.row(1)[3], l.row(2)[0], l.row(3)[0]]);
    }

    #[test]
    fn truncates_long_entities() {
        let l = logits(4, 10);
        let e = Entity::new("x", vec![5, 6, 7, 8, 9, 4], 10).unwrap();
        let p = build_entity_vector(&l, &e, 4).unwrap();
        assert_eq!(p.0, vec![l.row(0)[5], l.row(1)[6], l.row(2)[7], l.row(3)[8]]);
    }

    #[test]
    fn null_entity_reads_padding() {
        let l = logits(4, 10);
        let p = build_entity_vector(&l, &Entity::null(), 4).unwrap();
        assert_eq!(p.0, (0..4).map(|k| l.row(k)[PAD]).collect::<Vec<_>>());
        assert!(build_entity_vector(&l, &Entity::null(), 3).is_err());
    }

    #[test]
    fn heuristic_examples() {
        let p = EntityLogitVector(vec![2.0f64, 4.0, -1.0, 3.0]);
        assert_eq!(heuristic_score(&p, &[1.0, 0.0, 0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(heuristic_score(&p, &[0.25; 4]).unwrap(), 2.0);
        let zero = EntityLogitVector(vec![0.0f64; 4]);
        assert_eq!(heuristic_score(&zero, &[0.3, -2.0, 7.0, 1.0]).unwrap(), 0.0);
        assert!(heuristic_score(&p, &[1.0; 3]).is_err());
    }

    #[test]
    fn list_requires_leading_null_and_unique_surfaces() {
        let a = Entity::new("kara", vec![40, 45], 64).unwrap();
        assert!(BiasList::from_entries(vec![a.clone()]).is_err());
        assert!(BiasList::from_entries(vec![]).is_err());
        assert!(BiasList::from_entities(vec![a.clone(), a.clone()]).is_err());
        let l = BiasList::from_entities(vec![a]).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.real_count(), 1);
        assert!(l.get(0).unwrap().is_null());
    }

    #[test]
    fn entity_validation() {
        assert!(Entity::new("x", vec![], 64).is_err());
        assert!(Entity::new("x", vec![PAD, 3], 64).is_err());
        assert!(Entity::new("x", vec![64], 64).is_err());
        assert!(Entity::new("#x", vec![5], 64).is_err());
    }

    #[test]
    fn bias_list_file_format() {
        let text = "# names\nkara\t40 45\n\nmotu\t42 43 44\n";
        let list = parse_bias_list(text, 64).unwrap();
        assert_eq!(list.real_count(), 2);
        assert_eq!(list.get(2).unwrap().tokens(), &[42, 43, 44]);
        assert_eq!(format_bias_list(&list), "kara\t40 45\nmotu\t42 43 44\n");
        assert!(parse_bias_list("kara 40 45\n", 64).is_err());
        assert!(parse_bias_list("kara\t40 x\n", 64).is_err());
        assert_eq!(parse_bias_list("", 64).unwrap(), BiasList::null_only());
    }
}
