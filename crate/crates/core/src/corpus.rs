//! Annotated sentences, corpus I/O, the synthetic generator and the
//! partition of event types into a stream of disjoint tasks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive token span `[start, end]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(i: usize) -> Self {
        Self { start: i, end: i }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Candidate argument entity.
pub type EntitySpan = Span;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentMention {
    pub span: Span,
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMention {
    pub trigger: Span,
    #[serde(rename = "type")]
    pub event_type: String,
    #[serde(rename = "args", default)]
    pub arguments: Vec<ArgumentMention>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSentence {
    #[serde(rename = "id")]
    pub sentence_id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub events: Vec<EventMention>,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_negative(&self) -> bool {
        self.events.is_empty()
    }

    /// Copy keeping only events whose type passes `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> TokenizedSentence {
        TokenizedSentence {
            events: self
                .events
                .iter()
                .filter(|e| keep(&e.event_type))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    fn check_span(&self, span: Span, what: &str) -> Result<()> {
        if span.start > span.end || span.end >= self.tokens.len() {
            return Err(Error::Validation(format!(
                "sentence {}: {what} span [{}, {}] outside 0..{}",
                self.sentence_id,
                span.start,
                span.end,
                self.tokens.len()
            )));
        }
        Ok(())
    }

    /// Offset and uniqueness checks, plus schema membership when a schema is given.
    pub fn validate(&self, schema: Option<&EventSchema>) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!(
                "sentence {} has no tokens",
                self.sentence_id
            )));
        }
        let mut seen = BTreeSet::new();
        for ev in &self.events {
            self.check_span(ev.trigger, "trigger")?;
            if ev.event_type == NA {
                return Err(Error::Validation(format!(
                    "sentence {}: explicit {NA} mention",
                    self.sentence_id
                )));
            }
            if !seen.insert((ev.trigger, ev.event_type.as_str())) {
                return Err(Error::Validation(format!(
                    "sentence {}: duplicate ({}, {}) mention",
                    self.sentence_id, ev.trigger.start, ev.event_type
                )));
            }
            for arg in &ev.arguments {
                self.check_span(arg.span, "argument")?;
            }
            if let Some(schema) = schema {
                let roles = schema.roles_of.get(&ev.event_type).ok_or_else(|| {
                    Error::Validation(format!(
                        "sentence {}: unknown event type {:?}",
                        self.sentence_id, ev.event_type
                    ))
                })?;
                for arg in &ev.arguments {
                    if !roles.contains(&arg.role) {
                        return Err(Error::Validation(format!(
                            "sentence {}: role {:?} not defined for {:?}",
                            self.sentence_id, arg.role, ev.event_type
                        )));
                    }
                }
            }
        }
        for ent in &self.entities {
            self.check_span(*ent, "entity")?;
        }
        Ok(())
    }
}

/// Label of tokens that trigger no visible event.
pub const NA: &str = "NA";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSchema {
    #[serde(rename = "types")]
    pub event_types: Vec<String>,
    #[serde(rename = "roles")]
    pub roles_of: BTreeMap<String, Vec<String>>,
}

impl EventSchema {
    pub fn new(event_types: Vec<String>, roles_of: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let schema = Self {
            event_types,
            roles_of,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.event_types {
            if t == NA {
                return Err(Error::Validation(format!("{NA} is reserved")));
            }
            if !seen.insert(t) {
                return Err(Error::Validation(format!("duplicate event type {t:?}")));
            }
        }
        for t in self.roles_of.keys() {
            if !seen.contains(t) {
                return Err(Error::Validation(format!("roles given for unknown type {t:?}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, event_type: &str) -> bool {
        self.roles_of.contains_key(event_type) || self.event_types.iter().any(|t| t == event_type)
    }

    pub fn roles(&self, event_type: &str) -> &[String] {
        self.roles_of.get(event_type).map_or(&[], Vec::as_slice)
    }

    /// Schema listing types and roles in order of first appearance.
    pub fn infer(sentences: &[TokenizedSentence]) -> Self {
        let mut event_types = Vec::new();
        let mut roles_of: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in sentences {
            for ev in &s.events {
                let roles = roles_of.entry(ev.event_type.clone()).or_insert_with(|| {
                    event_types.push(ev.event_type.clone());
                    Vec::new()
                });
                for arg in &ev.arguments {
                    if !roles.contains(&arg.role) {
                        roles.push(arg.role.clone());
                    }
                }
            }
        }
        Self {
            event_types,
            roles_of,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut schema: EventSchema = serde_json::from_reader(BufReader::new(file))?;
        for t in &schema.event_types {
            schema.roles_of.entry(t.clone()).or_default();
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }
}

/// Reads a JSON-lines corpus. Without a schema, one is inferred from the
/// mentions; with one, every mention is checked against it.
pub fn load_corpus(
    path: &Path,
    schema: Option<&EventSchema>,
) -> Result<(EventSchema, Vec<TokenizedSentence>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sentences = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: TokenizedSentence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        sentence.validate(schema).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {}: {msg}", i + 1)),
            other => other,
        })?;
        if !ids.insert(sentence.sentence_id.clone()) {
            return Err(Error::Validation(format!(
                "line {}: duplicate sentence id {:?}",
                i + 1,
                sentence.sentence_id
            )));
        }
        sentences.push(sentence);
    }
    let schema = match schema {
        Some(s) => s.clone(),
        None => EventSchema::infer(&sentences),
    };
    Ok((schema, sentences))
}

pub fn write_corpus(path: &Path, sentences: &[TokenizedSentence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_types: usize,
    /// Exact number of trigger mentions emitted per type.
    pub instances_per_type: Vec<usize>,
    /// Number of filler words.
    pub vocab_size: usize,
    pub seed: u64,
    /// Probability that a sentence carries a second mention of another type.
    pub multi_type_prob: f64,
    /// Negative (all-NA) sentences per positive sentence.
    pub negative_ratio: f64,
    pub trigger_words_per_type: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub with_arguments: bool,
}

impl SyntheticConfig {
    pub fn new(instances_per_type: Vec<usize>, vocab_size: usize, seed: u64) -> Self {
        Self {
            n_types: instances_per_type.len(),
            instances_per_type,
            vocab_size,
            seed,
            multi_type_prob: 0.3,
            negative_ratio: 0.3,
            trigger_words_per_type: 3,
            min_len: 8,
            max_len: 14,
            with_arguments: true,
        }
    }
}

/// Power-law instance counts from `max` (first type) down to `min` (last).
pub fn power_law_counts(n_types: usize, max: usize, min: usize) -> Vec<usize> {
    if n_types == 1 {
        return vec![max];
    }
    let exponent = (max as f64 / min as f64).ln() / (n_types as f64).ln();
    (0..n_types)
        .map(|i| {
            let c = max as f64 / ((i + 1) as f64).powf(exponent);
            (c.round() as usize).clamp(min, max)
        })
        .collect()
}

const ROLE_POOL: [&str; 6] = ["Agent", "Patient", "Place", "Time", "Instrument", "Target"];
const ENTITY_WORDS_PER_ROLE: usize = 4;

pub fn synthetic_type_name(i: usize) -> String {
    format!("Type{i:02}")
}

/// Emits a corpus where each type has its own trigger vocabulary and argument
/// roles are carried by role-specific entity words.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(EventSchema, Vec<TokenizedSentence>)> {
    let n = config.n_types;
    if n == 0 {
        return Err(Error::InvalidArgument("n_types must be at least 1".into()));
    }
    if config.instances_per_type.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} instance counts for {n} types",
            config.instances_per_type.len()
        )));
    }
    if let Some(t) = config.instances_per_type.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "type {t} has zero instances"
        )));
    }
    if config.vocab_size == 0 || config.min_len < 3 || config.max_len < config.min_len {
        return Err(Error::InvalidArgument("degenerate vocabulary or length range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let types: Vec<String> = (0..n).map(synthetic_type_name).collect();
    let mut roles_of = BTreeMap::new();
    for (i, t) in types.iter().enumerate() {
        let roles = if config.with_arguments {
            vec![
                ROLE_POOL[i % ROLE_POOL.len()].to_string(),
                ROLE_POOL[(i + 1 + i / ROLE_POOL.len()) % ROLE_POOL.len()].to_string(),
            ]
        } else {
            Vec::new()
        };
        roles_of.insert(t.clone(), roles);
    }
    let schema = EventSchema::new(types.clone(), roles_of)?;

    let trigger_word = |t: usize, k: usize| format!("trg{t:02}_{k}");
    let entity_word = |role: usize, k: usize| format!("ent_{}_{k}", ROLE_POOL[role].to_lowercase());
    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..config.vocab_size));

    let mut slots: Vec<usize> = config
        .instances_per_type
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat_n(t, c))
        .collect();
    slots.shuffle(&mut rng);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    while let Some(first) = slots.pop() {
        let mut group = vec![first];
        if rng.random_bool(config.multi_type_prob) {
            if let Some(pos) = slots.iter().rposition(|&t| t != first) {
                group.push(slots.remove(pos));
            }
        }
        groups.push(group);
    }
    let n_negative = (groups.len() as f64 * config.negative_ratio).round() as usize;

    let mut sentences = Vec::with_capacity(groups.len() + n_negative);
    let mut plans: Vec<Option<Vec<usize>>> = groups.into_iter().map(Some).collect();
    plans.extend(std::iter::repeat_n(None, n_negative));
    plans.shuffle(&mut rng);

    for (idx, plan) in plans.into_iter().enumerate() {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut tokens: Vec<String> = (0..len).map(|_| filler(&mut rng)).collect();
        let mut used = vec![false; len];
        let mut events = Vec::new();
        let mut entities = Vec::new();
        if let Some(group) = plan {
            let mut placed_roles: BTreeMap<usize, Span> = BTreeMap::new();
            for &t in &group {
                let pos = free_position(&mut rng, &used, 1).expect("sentence has room");
                used[pos] = true;
                tokens[pos] = trigger_word(t, rng.random_range(0..config.trigger_words_per_type));
                events.push((t, Span::single(pos)));
            }
            if config.with_arguments {
                for &t in &group {
                    for role in schema.roles(&types[t]) {
                        let r = ROLE_POOL.iter().position(|p| p == role).unwrap();
                        if placed_roles.contains_key(&r) || !rng.random_bool(0.8) {
                            continue;
                        }
                        let width = if rng.random_bool(0.3) { 2 } else { 1 };
                        if let Some(start) = free_position(&mut rng, &used, width) {
                            for k in 0..width {
                                used[start + k] = true;
                                tokens[start + k] = entity_word(r, rng.random_range(0..ENTITY_WORDS_PER_ROLE));
                            }
                            let span = Span::new(start, start + width - 1);
                            placed_roles.insert(r, span);
                            entities.push(span);
                        }
                    }
                }
                // One distractor entity whose role class fits none of the events.
                let fitting: BTreeSet<usize> = group
                    .iter()
                    .flat_map(|&t| schema.roles(&types[t]).iter())
                    .map(|role| ROLE_POOL.iter().position(|p| p == role).unwrap())
                    .collect();
                let others: Vec<usize> = (0..ROLE_POOL.len()).filter(|r| !fitting.contains(r)).collect();
                if !others.is_empty() && rng.random_bool(0.5) {
                    let r = others[rng.random_range(0..others.len())];
                    if let Some(start) = free_position(&mut rng, &used, 1) {
                        used[start] = true;
                        tokens[start] = entity_word(r, rng.random_range(0..ENTITY_WORDS_PER_ROLE));
                        entities.push(Span::single(start));
                    }
                }
            }
            let events_out = events
                .iter()
                .map(|&(t, trigger)| EventMention {
                    trigger,
                    event_type: types[t].clone(),
                    arguments: schema
                        .roles(&types[t])
                        .iter()
                        .filter_map(|role| {
                            let r = ROLE_POOL.iter().position(|p| p == role).unwrap();
                            placed_roles.get(&r).map(|&span| ArgumentMention {
                                span,
                                role: role.clone(),
                            })
                        })
                        .collect(),
                })
                .collect();
            entities.sort();
            sentences.push(TokenizedSentence {
                sentence_id: format!("s{idx:05}"),
                tokens,
                events: events_out,
                entities,
            });
        } else {
            if config.with_arguments && rng.random_bool(0.5) {
                let r = rng.random_range(0..ROLE_POOL.len());
                let pos = rng.random_range(0..len);
                tokens[pos] = entity_word(r, rng.random_range(0..ENTITY_WORDS_PER_ROLE));
                entities.push(Span::single(pos));
            }
            sentences.push(TokenizedSentence {
                sentence_id: format!("s{idx:05}"),
                tokens,
                events: Vec::new(),
                entities,
            });
        }
    }
    Ok((schema, sentences))
}

fn free_position(rng: &mut impl Rng, used: &[bool], width: usize) -> Option<usize> {
    let candidates: Vec<usize> = (0..used.len().saturating_sub(width - 1))
        .filter(|&s| (s..s + width).all(|i| !used[i]))
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

const SPLIT_SALT: u64 = 0x5eed_0017;

/// Fractions of positive sentences routed to the dev and test pools.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { dev: 0.1, test: 0.2 }
    }
}

/// One task of the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub event_types: Vec<String>,
    /// Training view: only this task's types are annotated.
    pub train: Vec<TokenizedSentence>,
    /// Gold mentions hidden from `train`, keyed by sentence id.
    pub masked: BTreeMap<String, Vec<EventMention>>,
    /// Sentences with at least one mention of this task's types; full gold.
    pub dev: Vec<TokenizedSentence>,
    pub test: Vec<TokenizedSentence>,
}

impl Task {
    pub fn has_type(&self, t: &str) -> bool {
        self.event_types.iter().any(|e| e == t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub schema: EventSchema,
    pub permutation_seed: u64,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    /// 1-based stage access.
    pub fn task(&self, stage: usize) -> Result<&Task> {
        if stage == 0 || stage > self.tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} outside 1..={}",
                self.tasks.len()
            )));
        }
        Ok(&self.tasks[stage - 1])
    }

    /// Types introduced in stages `1..=stage`, in stream order.
    pub fn seen_types(&self, stage: usize) -> Vec<String> {
        self.tasks[..stage.min(self.tasks.len())]
            .iter()
            .flat_map(|t| t.event_types.iter().cloned())
            .collect()
    }

    /// Task index (1-based) that introduces `event_type`.
    pub fn stage_of(&self, event_type: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.has_type(event_type)).map(|i| i + 1)
    }

    pub fn has_arguments(&self) -> bool {
        self.tasks
            .iter()
            .flat_map(|t| &t.train)
            .any(|s| s.events.iter().any(|e| !e.arguments.is_empty()))
    }

    /// Union of the test views of tasks `1..=stage`, deduplicated by sentence id.
    pub fn accumulated_test(&self, stage: usize) -> Result<Vec<TokenizedSentence>> {
        self.accumulated(stage, |t| &t.test)
    }

    pub fn accumulated_dev(&self, stage: usize) -> Result<Vec<TokenizedSentence>> {
        self.accumulated(stage, |t| &t.dev)
    }

    fn accumulated(
        &self,
        stage: usize,
        view: impl Fn(&Task) -> &Vec<TokenizedSentence>,
    ) -> Result<Vec<TokenizedSentence>> {
        self.task(stage)?;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for task in &self.tasks[..stage] {
            for s in view(task) {
                if seen.insert(s.sentence_id.clone()) {
                    out.push(s.clone());
                }
            }
        }
        Ok(out)
    }

    /// Training sentences of tasks `1..=stage` annotated with every seen type.
    pub fn accumulated_train_gold(&self, stage: usize) -> Result<Vec<TokenizedSentence>> {
        self.task(stage)?;
        let seen: BTreeSet<String> = self.seen_types(stage).into_iter().collect();
        let mut by_id: BTreeMap<String, TokenizedSentence> = BTreeMap::new();
        for task in &self.tasks[..stage] {
            for s in &task.train {
                let mut full = s.clone();
                if let Some(hidden) = task.masked.get(&s.sentence_id) {
                    full.events.extend(hidden.iter().cloned());
                }
                full.events.retain(|e| seen.contains(&e.event_type));
                full.events.sort_by(|a, b| a.trigger.cmp(&b.trigger).then(a.event_type.cmp(&b.event_type)));
                by_id.entry(s.sentence_id.clone()).or_insert(full);
            }
        }
        Ok(by_id.into_values().collect())
    }
}

/// Shuffles types with `seed` and deals them round-robin into `k` tasks.
pub fn assign_types(schema: &EventSchema, k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let n = schema.event_types.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} event types into {k} tasks"
        )));
    }
    let mut types = schema.event_types.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    types.shuffle(&mut rng);
    let mut groups = vec![Vec::new(); k];
    for (i, t) in types.into_iter().enumerate() {
        groups[i % k].push(t);
    }
    Ok(groups)
}

pub fn partition_tasks(
    schema: &EventSchema,
    sentences: &[TokenizedSentence],
    k: usize,
    seed: u64,
) -> Result<TaskStream> {
    partition_tasks_with(schema, sentences, k, seed, SplitRatios::default())
}

/// Builds the task stream: seeded round-robin type assignment, a stratified
/// train/dev/test split of positive sentences, and per-task views.
pub fn partition_tasks_with(
    schema: &EventSchema,
    sentences: &[TokenizedSentence],
    k: usize,
    seed: u64,
    ratios: SplitRatios,
) -> Result<TaskStream> {
    let groups = assign_types(schema, k, seed)?;
    let task_of: HashMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |t| (t.as_str(), i)))
        .collect();
    for s in sentences {
        for ev in &s.events {
            if !task_of.contains_key(ev.event_type.as_str()) {
                return Err(Error::Validation(format!(
                    "sentence {}: type {:?} missing from schema",
                    s.sentence_id, ev.event_type
                )));
            }
        }
    }

    // Stratify positives by their first mention's type so rare types still reach dev/test.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut negatives = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        match s.events.first() {
            Some(ev) => strata.entry(ev.event_type.as_str()).or_default().push(i),
            None => negatives.push(i),
        }
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Pool {
        Train,
        Dev,
        Test,
    }
    let mut pool = vec![Pool::Train; sentences.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_test = (n as f64 * ratios.test).round() as usize;
        let mut n_dev = (n as f64 * ratios.dev).round() as usize;
        if n >= 3 {
            n_test = n_test.max(1);
        }
        if n >= 4 {
            n_dev = n_dev.max(1);
        }
        while n_test + n_dev >= n && (n_test + n_dev) > 0 {
            if n_dev > 0 {
                n_dev -= 1;
            } else {
                n_test -= 1;
            }
        }
        for (j, &i) in members.iter().enumerate() {
            pool[i] = if j < n_test {
                Pool::Test
            } else if j < n_test + n_dev {
                Pool::Dev
            } else {
                Pool::Train
            };
        }
    }

    let mut tasks: Vec<Task> = groups
        .iter()
        .map(|g| Task {
            event_types: g.clone(),
            train: Vec::new(),
            masked: BTreeMap::new(),
            dev: Vec::new(),
            test: Vec::new(),
        })
        .collect();

    for (i, s) in sentences.iter().enumerate() {
        if s.events.is_empty() {
            continue;
        }
        let involved: BTreeSet<usize> = s.events.iter().map(|e| task_of[e.event_type.as_str()]).collect();
        for &t in &involved {
            let task = &mut tasks[t];
            match pool[i] {
                Pool::Train => {
                    let (visible, hidden): (Vec<_>, Vec<_>) = s
                        .events
                        .iter()
                        .cloned()
                        .partition(|e| task_of[e.event_type.as_str()] == t);
                    if !hidden.is_empty() {
                        task.masked.insert(s.sentence_id.clone(), hidden);
                    }
                    task.train.push(TokenizedSentence {
                        events: visible,
                        ..s.clone()
                    });
                }
                Pool::Dev => task.dev.push(s.clone()),
                Pool::Test => task.test.push(s.clone()),
            }
        }
    }
    for (j, &i) in negatives.iter().enumerate() {
        tasks[j % k].train.push(sentences[i].clone());
    }

    Ok(TaskStream {
        schema: schema.clone(),
        permutation_seed: seed,
        tasks,
    })
}
