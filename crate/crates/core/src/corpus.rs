//! Synthetic transcription corpus.
//!
//! Transcripts are random carrier words with up to a few multi-piece entities
//! inserted at non-adjacent positions. Every token is rendered as `repeat`
//! noisy copies of a per-token prototype vector. Training utterances use one
//! entity inventory, dev/test another, so test entities are never seen in
//! training.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, WeightedIndex};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use mtpbias_tensor::{load_checkpoint, save_checkpoint, Tensor};

use crate::biasing::{format_bias_list, parse_bias_list, BiasList, Entity};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, VocabConfig, Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab: VocabConfig,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_carriers: usize,
    pub max_carriers: usize,
    /// Relative frequency of utterances with 0, 1, 2, ... entities.
    pub entity_count_weights: Vec<f64>,
    /// Relative frequency of entity lengths `2, 3, 4, 5, ...` pieces.
    pub entity_length_weights: Vec<f64>,
    pub train_entities: usize,
    pub heldout_entities: usize,
    pub feature_dim: usize,
    pub repeat: usize,
    pub noise_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            vocab: VocabConfig::default(),
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            min_carriers: 5,
            max_carriers: 15,
            entity_count_weights: vec![0.2, 0.5, 0.3],
            entity_length_weights: vec![0.30, 0.35, 0.22, 0.13],
            train_entities: 300,
            heldout_entities: 600,
            feature_dim: 16,
            repeat: 2,
            noise_sigma: 0.25,
        }
    }
}

const MIN_ENTITY_LEN: usize = 2;

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab.clone())?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "corpus.noise_sigma must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.repeat == 0 {
            return Err(Error::Config("corpus.repeat must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("corpus.feature_dim must be positive".into()));
        }
        if self.min_carriers == 0 || self.min_carriers > self.max_carriers {
            return Err(Error::Config(
                "corpus.min_carriers must be in 1..=corpus.max_carriers".into(),
            ));
        }
        for (key, w) in [
            ("corpus.entity_count_weights", &self.entity_count_weights),
            ("corpus.entity_length_weights", &self.entity_length_weights),
        ] {
            if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("{key} must be non-negative with a positive sum")));
            }
        }
        if self.entity_count_weights.len() > self.min_carriers + 2 {
            return Err(Error::Config(
                "corpus.entity_count_weights allows more entities than carrier gaps".into(),
            ));
        }
        Ok(())
    }

    /// Largest number of entities one utterance can hold.
    pub fn max_entities_per_utterance(&self) -> usize {
        self.entity_count_weights.len() - 1
    }
}

/// An entity occurrence: `start` indexes the transcript (BOS is index 0)
/// and `entity` the inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub entity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `BOS … EOS`
    pub transcript: Vec<TokenId>,
    /// `[T × feature_dim]` with `T = repeat × transcript.len()`
    pub features: Tensor,
    pub spans: Vec<EntitySpan>,
}

impl Utterance {
    /// Decoder inputs: the transcript without its final EOS.
    pub fn decoder_inputs(&self) -> &[TokenId] {
        &self.transcript[..self.transcript.len() - 1]
    }

    /// Number of decoding steps `S` (targets after BOS).
    pub fn steps(&self) -> usize {
        self.transcript.len() - 1
    }
}

/// Entities available to the generator, addressed by a global id: training
/// entities first, then held-out ones.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityInventory {
    pub train: Vec<Entity>,
    pub test: Vec<Entity>,
}

impl EntityInventory {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: usize) -> Option<&Entity> {
        if id < self.train.len() {
            self.train.get(id)
        } else {
            self.test.get(id - self.train.len())
        }
    }

    pub fn is_train(&self, id: usize) -> bool {
        id < self.train.len()
    }

    pub fn train_ids(&self) -> std::ops::Range<usize> {
        0..self.train.len()
    }

    pub fn test_ids(&self) -> std::ops::Range<usize> {
        self.train.len()..self.len()
    }

    pub fn entity(&self, id: usize) -> Result<&Entity> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("entity id {id} outside inventory of {}", self.len())))
    }

    pub fn stats(&self) -> InventoryStats {
        let lengths: Vec<usize> = self
            .train
            .iter()
            .chain(&self.test)
            .map(|e| e.tokens().len())
            .collect();
        let n = lengths.len().max(1) as f64;
        let mut histogram: Vec<usize> = Vec::new();
        for &l in &lengths {
            if histogram.len() <= l {
                histogram.resize(l + 1, 0);
            }
            histogram[l] += 1;
        }
        InventoryStats {
            entities: lengths.len(),
            mean_tokens: lengths.iter().sum::<usize>() as f64 / n,
            fraction_at_most_4: lengths.iter().filter(|&&l| l <= 4).count() as f64 / n,
            length_histogram: histogram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InventoryStats {
    pub entities: usize,
    pub mean_tokens: f64,
    pub fraction_at_most_4: f64,
    /// `length_histogram[l]` counts entities of `l` tokens.
    pub length_histogram: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub inventory: EntityInventory,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Surfaces of every inventory entity; words scored as biased.
    pub fn entity_surfaces(&self) -> HashSet<String> {
        self.inventory
            .train
            .iter()
            .chain(&self.inventory.test)
            .map(|e| e.surface().to_string())
            .collect()
    }
}

fn contains_run(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.len() <= haystack.len() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn sample_entities(
    rng: &mut Xoshiro256PlusPlus,
    vocab: &Vocabulary,
    lengths: &WeightedIndex<f64>,
    count: usize,
    taken: &mut HashSet<Vec<TokenId>>,
    forbidden_inside: &[Entity],
) -> Result<Vec<Entity>> {
    let pieces: Vec<TokenId> = vocab.entity_range().collect();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 1000 + 10_000 {
            return Err(Error::Config(format!(
                "cannot draw {count} distinct entities from {} pieces",
                pieces.len()
            )));
        }
        let len = MIN_ENTITY_LEN + lengths.sample(rng);
        let tokens: Vec<TokenId> = (0..len).map(|_| *pieces.choose(rng).expect("pieces")).collect();
        if taken.contains(&tokens) || forbidden_inside.iter().any(|e| contains_run(e.tokens(), &tokens)) {
            continue;
        }
        taken.insert(tokens.clone());
        out.push(Entity::new(vocab.join_pieces(&tokens), tokens, vocab.size())?);
    }
    Ok(out)
}

fn utterance_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index)
}

fn render_features(
    transcript: &[TokenId],
    prototypes: &[Vec<f32>],
    cfg: &CorpusConfig,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<Tensor> {
    let width = cfg.feature_dim;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(transcript.len() * cfg.repeat * width);
    for &t in transcript {
        for _ in 0..cfg.repeat {
            for &p in &prototypes[t] {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                data.push(p + n);
            }
        }
    }
    Ok(Tensor::new(vec![transcript.len() * cfg.repeat, width], data)?)
}

/// Per-token prototype vectors with entries drawn from `N(0, 1/feature_dim)`.
pub fn prototypes(cfg: &CorpusConfig) -> Vec<Vec<f32>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x7072_6f74_6f74_7970);
    let scale = 1.0 / (cfg.feature_dim as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("positive scale");
    (0..cfg.vocab.size)
        .map(|_| (0..cfg.feature_dim).map(|_| normal.sample(&mut rng) as f32).collect())
        .collect()
}

fn generate_utterance(
    id: String,
    seed: u64,
    pool: &[usize],
    inventory: &EntityInventory,
    vocab: &Vocabulary,
    protos: &[Vec<f32>],
    cfg: &CorpusConfig,
) -> Result<Utterance> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let carriers: Vec<TokenId> = vocab.carrier_range().collect();
    let count_dist = WeightedIndex::new(&cfg.entity_count_weights).map_err(|e| Error::Config(e.to_string()))?;
    let n_carriers = rng.gen_range(cfg.min_carriers..=cfg.max_carriers);
    let words: Vec<TokenId> = (0..n_carriers)
        .map(|_| *carriers.choose(&mut rng).expect("carriers"))
        .collect();
    let n_entities = count_dist.sample(&mut rng).min(pool.len());
    // distinct gaps keep entities apart from each other
    let mut gaps: Vec<usize> = (0..=n_carriers).collect();
    gaps.shuffle(&mut rng);
    let mut chosen_gaps: Vec<usize> = gaps.into_iter().take(n_entities).collect();
    chosen_gaps.sort_unstable();
    let mut picked: Vec<usize> = Vec::with_capacity(n_entities);
    while picked.len() < n_entities {
        let e = *pool.choose(&mut rng).expect("non-empty pool");
        if !picked.contains(&e) {
            picked.push(e);
        }
    }
    let mut transcript = vec![BOS];
    let mut spans = Vec::new();
    let mut next_entity = 0;
    for gap in 0..=n_carriers {
        if next_entity < n_entities && chosen_gaps[next_entity] == gap {
            let ent = picked[next_entity];
            spans.push(EntitySpan {
                start: transcript.len(),
                entity: ent,
            });
            transcript.extend_from_slice(inventory.entity(ent)?.tokens());
            next_entity += 1;
        }
        if gap < n_carriers {
            transcript.push(words[gap]);
        }
    }
    transcript.push(EOS);
    let features = render_features(&transcript, protos, cfg, &mut rng)?;
    Ok(Utterance {
        id,
        transcript,
        features,
        spans,
    })
}

/// Builds the inventory and all three splits; fully determined by the seed.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab.clone())?;
    let lengths = WeightedIndex::new(&cfg.entity_length_weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x656e_7469_7469_6573);
    let mut taken = HashSet::new();
    let train = sample_entities(&mut rng, &vocab, &lengths, cfg.train_entities, &mut taken, &[])?;
    let test = sample_entities(&mut rng, &vocab, &lengths, cfg.heldout_entities, &mut taken, &train)?;
    let inventory = EntityInventory { train, test };
    let protos = prototypes(cfg);

    let train_pool: Vec<usize> = inventory.train_ids().collect();
    let test_pool: Vec<usize> = inventory.test_ids().collect();
    let mut index = 0u64;
    let mut make = |split: Split, size: usize, pool: &[usize]| -> Result<Vec<Utterance>> {
        (0..size)
            .map(|i| {
                let seed = utterance_seed(cfg.seed, index);
                index += 1;
                let id = format!("{}-{i:05}", split.name());
                generate_utterance(id, seed, pool, &inventory, &vocab, &protos, cfg)
            })
            .collect()
    };
    let train_utts = make(Split::Train, cfg.train_size, &train_pool)?;
    let dev = make(Split::Dev, cfg.dev_size, &test_pool)?;
    let test_utts = make(Split::Test, cfg.test_size, &test_pool)?;
    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        inventory,
        train: train_utts,
        dev,
        test: test_utts,
    })
}

/// Scans a transcript for maximal runs of entity pieces and matches each
/// run against the inventory.
pub fn scan_spans(transcript: &[TokenId], vocab: &Vocabulary, inventory: &EntityInventory) -> Vec<EntitySpan> {
    let lookup: HashMap<&[TokenId], usize> = inventory
        .train
        .iter()
        .chain(&inventory.test)
        .enumerate()
        .map(|(i, e)| (e.tokens(), i))
        .collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < transcript.len() {
        if vocab.is_entity_piece(transcript[i]) {
            let start = i;
            while i < transcript.len() && vocab.is_entity_piece(transcript[i]) {
                i += 1;
            }
            if let Some(&entity) = lookup.get(&transcript[start..i]) {
                spans.push(EntitySpan { start, entity });
            }
        } else {
            i += 1;
        }
    }
    spans
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub min_positives: usize,
    pub max_positives: usize,
    /// Negatives drawn per positive.
    pub kappa: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_positives: 1,
            max_positives: 4,
            kappa: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_positives > self.max_positives {
            return Err(Error::Config(
                "training.min_positives must not exceed training.max_positives".into(),
            ));
        }
        Ok(())
    }
}

/// Batch-level training list and the spans it supervises.
#[derive(Clone, Debug)]
pub struct TrainingList {
    pub list: BiasList,
    /// Per utterance, the spans whose entity made it into the list.
    pub supervised: Vec<Vec<EntitySpan>>,
}

/// Samples `B = {∅} ∪ B₊ ∪ negatives` for one batch: up to
/// `min..=max_positives` true entities per utterance, deduplicated by surface,
/// plus `kappa × |B₊|` negatives from training entities absent from the batch.
pub fn sample_bias_list(
    batch: &[&Utterance],
    inventory: &EntityInventory,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<TrainingList> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut positives: Vec<usize> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut supervised = Vec::with_capacity(batch.len());
    for utt in batch {
        let mut distinct: Vec<usize> = Vec::new();
        for span in &utt.spans {
            if !distinct.contains(&span.entity) {
                distinct.push(span.entity);
            }
        }
        let want = rng.gen_range(cfg.min_positives..=cfg.max_positives);
        distinct.shuffle(&mut rng);
        distinct.truncate(want);
        for &id in &distinct {
            let surface = inventory.entity(id)?.surface();
            if seen.insert(surface) {
                positives.push(id);
            }
        }
        supervised.push(
            utt.spans
                .iter()
                .filter(|s| distinct.contains(&s.entity))
                .copied()
                .collect(),
        );
    }
    let wanted = cfg.kappa * positives.len();
    // negatives exclude every entity spoken in the batch, sampled or not
    let spoken: HashSet<usize> = batch.iter().flat_map(|u| u.spans.iter().map(|s| s.entity)).collect();
    let pool: Vec<usize> = inventory
        .train_ids()
        .filter(|id| !spoken.contains(id) && !seen.contains(inventory.train[*id].surface()))
        .collect();
    if pool.len() < wanted {
        return Err(Error::Sampling(format!(
            "need {wanted} negatives but only {} training entities remain",
            pool.len()
        )));
    }
    let negatives: Vec<usize> = pool.choose_multiple(&mut rng, wanted).copied().collect();
    let mut members: Vec<usize> = positives.into_iter().chain(negatives).collect();
    members.shuffle(&mut rng);
    let list = BiasList::from_entities(
        members
            .iter()
            .map(|&id| inventory.entity(id).cloned())
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(TrainingList { list, supervised })
}

/// Evaluation list of exactly `n` real entities: every true entity of
/// `utterances` plus held-out distractors. `n = 0` gives `{∅}`.
pub fn build_eval_bias_list(
    utterances: &[&Utterance],
    inventory: &EntityInventory,
    n: usize,
    seed: u64,
) -> Result<BiasList> {
    if n == 0 {
        return Ok(BiasList::null_only());
    }
    let mut truth: Vec<usize> = Vec::new();
    for utt in utterances {
        for span in &utt.spans {
            if !truth.contains(&span.entity) {
                truth.push(span.entity);
            }
        }
    }
    if n < truth.len() {
        return Err(Error::Validation(format!(
            "bias list size {n} is smaller than the {} true entities",
            truth.len()
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let pool: Vec<usize> = inventory.test_ids().filter(|id| !truth.contains(id)).collect();
    let wanted = n - truth.len();
    if pool.len() < wanted {
        return Err(Error::Sampling(format!(
            "need {wanted} distractors but only {} held-out entities remain",
            pool.len()
        )));
    }
    let mut members = truth;
    members.extend(pool.choose_multiple(&mut rng, wanted).copied());
    members.shuffle(&mut rng);
    BiasList::from_entities(
        members
            .iter()
            .map(|&id| inventory.entity(id).cloned())
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Seed of the evaluation list for utterance `index` of a split.
pub fn eval_list_seed(base: u64, n: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((n as u64) << 32)
        .wrapping_add(index as u64)
}

const METADATA_FILE: &str = "corpus.json";

#[derive(Serialize, Deserialize)]
struct CorpusMetadata {
    config: CorpusConfig,
    stats: InventoryStats,
    splits: Vec<(String, usize)>,
}

fn write_split(dir: &Path, split: Split, utts: &[Utterance]) -> Result<()> {
    let name = split.name();
    let mut transcripts = String::new();
    let mut spans = String::new();
    for u in utts {
        let ids: Vec<String> = u.transcript.iter().map(|t| t.to_string()).collect();
        transcripts.push_str(&ids.join(" "));
        transcripts.push('\n');
        for s in &u.spans {
            spans.push_str(&format!("{}\t{}\t{}\n", u.id, s.start, s.entity));
        }
    }
    fs::write(dir.join(format!("{name}.transcripts")), transcripts)?;
    fs::write(dir.join(format!("{name}.spans")), spans)?;
    save_checkpoint(
        &dir.join(format!("{name}.features")),
        utts.iter().map(|u| (u.id.as_str(), &u.features)),
    )?;
    Ok(())
}

fn read_split(dir: &Path, split: Split, vocab_size: usize) -> Result<Vec<Utterance>> {
    let name = split.name();
    let transcripts = fs::read_to_string(dir.join(format!("{name}.transcripts")))?;
    let features = load_checkpoint(&dir.join(format!("{name}.features")))?;
    let lines: Vec<&str> = transcripts.lines().collect();
    if lines.len() != features.len() {
        return Err(Error::Data(format!(
            "{name}: {} transcripts but {} feature matrices",
            lines.len(),
            features.len()
        )));
    }
    let mut utts = Vec::with_capacity(lines.len());
    let mut by_id = HashMap::new();
    for (line, (id, feats)) in lines.iter().zip(features) {
        let transcript = line
            .split_whitespace()
            .map(|t| {
                t.parse::<TokenId>()
                    .ok()
                    .filter(|&v| v < vocab_size)
                    .ok_or_else(|| Error::Data(format!("{name}: bad token {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if transcript.first() != Some(&BOS) || transcript.last() != Some(&EOS) || transcript.len() < 2 {
            return Err(Error::Data(format!("{name} {id}: transcript must be BOS … EOS")));
        }
        by_id.insert(id.clone(), utts.len());
        utts.push(Utterance {
            id,
            transcript,
            features: feats,
            spans: Vec::new(),
        });
    }
    let spans = fs::read_to_string(dir.join(format!("{name}.spans")))?;
    for line in spans.lines().filter(|l| !l.is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        let parsed = match parts.as_slice() {
            [id, start, entity] => start.parse().ok().zip(entity.parse().ok()).map(|(s, e)| (*id, s, e)),
            _ => None,
        };
        let (id, start, entity) = parsed.ok_or_else(|| Error::Data(format!("{name}: bad span line {line:?}")))?;
        let idx = by_id
            .get(id)
            .ok_or_else(|| Error::Data(format!("{name}: span for unknown utterance {id}")))?;
        utts[*idx].spans.push(EntitySpan { start, entity });
    }
    Ok(utts)
}

impl Corpus {
    /// Writes transcripts, spans, features, inventories and metadata.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (split, utts) in [
            (Split::Train, &self.train),
            (Split::Dev, &self.dev),
            (Split::Test, &self.test),
        ] {
            write_split(dir, split, utts)?;
        }
        for (name, entities) in [("train", &self.inventory.train), ("test", &self.inventory.test)] {
            let list = BiasList::from_entities(entities.iter().cloned())?;
            fs::write(dir.join(format!("entities.{name}.txt")), format_bias_list(&list))?;
        }
        let meta = CorpusMetadata {
            config: self.config.clone(),
            stats: self.inventory.stats(),
            splits: vec![
                ("train".into(), self.train.len()),
                ("dev".into(), self.dev.len()),
                ("test".into(), self.test.len()),
            ],
        };
        fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CorpusMetadata = serde_json::from_str(&fs::read_to_string(dir.join(METADATA_FILE))?)?;
        let config = meta.config;
        let vocab = Vocabulary::new(config.vocab.clone())?;
        let read_inv = |name: &str| -> Result<Vec<Entity>> {
            let text = fs::read_to_string(dir.join(format!("entities.{name}.txt")))?;
            Ok(parse_bias_list(&text, vocab.size())?.entries()[1..].to_vec())
        };
        let inventory = EntityInventory {
            train: read_inv("train")?,
            test: read_inv("test")?,
        };
        let train = read_split(dir, Split::Train, vocab.size())?;
        let dev = read_split(dir, Split::Dev, vocab.size())?;
        let test = read_split(dir, Split::Test, vocab.size())?;
        for u in train.iter().chain(&dev).chain(&test) {
            for s in &u.spans {
                let e = inventory.entity(s.entity)?;
                if u.transcript.get(s.start..s.start + e.tokens().len()) != Some(e.tokens()) {
                    return Err(Error::Data(format!("{}: span at {} does not match entity", u.id, s.start)));
                }
            }
        }
        Ok(Self {
            config,
            vocab,
            inventory,
            train,
            dev,
            test,
        })
    }
}
