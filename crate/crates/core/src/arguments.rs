//! Argument extraction: a BIO entity tagger (encoder, bidirectional GRU,
//! CRF decoding) and per-event-type role heads over `[f_start ; f_end]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Graph, Matrix, ParamId, ParamStore, Var};
use crate::checkpoint;
use crate::corpus::{ArgumentMention, EntitySpan, EventMention, Span, TokenizedSentence};
use crate::detection::cls_loss_sum;
use crate::encoder::{normal_matrix, EncoderConfig, FeatureProjector, ToyEncoder, Vocab};
use crate::error::{Error, Result};
use crate::memory::{select_exemplars, ExemplarStore};
use crate::rng::{derive_seed, seeded, tag, SeededRng};

/// Label of a candidate that fills no role.
pub const NONE_ROLE: &str = "None";

const O: usize = 0;
const B: usize = 1;
const I: usize = 2;
const N_TAGS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArgumentConfig {
    pub feature_dim: usize,
    pub gru_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub memory_size: usize,
    pub seed: u64,
}

impl Default for ArgumentConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            gru_hidden: 32,
            epochs: 8,
            batch_size: 8,
            lr: 1e-3,
            memory_size: 10,
            seed: 0,
        }
    }
}

/// BIO tags for a sentence's entity spans (overlaps: first span wins).
pub fn bio_tags(n: usize, entities: &[EntitySpan]) -> Vec<usize> {
    let mut tags = vec![O; n];
    let mut sorted = entities.to_vec();
    sorted.sort();
    for s in sorted {
        if s.end >= n || (s.start..=s.end).any(|i| tags[i] != O) {
            continue;
        }
        tags[s.start] = B;
        for t in &mut tags[s.start + 1..=s.end] {
            *t = I;
        }
    }
    tags
}

fn allowed(prev: Option<usize>, next: usize) -> bool {
    !(next == I && matches!(prev, None | Some(O)))
}

/// Constrained Viterbi over `[n × 3]` emission scores with `trans[i][j]`
/// scoring `i → j`: `I` may not open a sentence or follow `O`.
pub fn viterbi(emissions: &Matrix, trans: &Matrix, start: &[f64], end: &[f64]) -> Vec<usize> {
    let n = emissions.rows();
    if n == 0 {
        return Vec::new();
    }
    let neg = f64::NEG_INFINITY;
    let mut score: Vec<f64> = (0..N_TAGS)
        .map(|j| if allowed(None, j) { start[j] + emissions.get(0, j) } else { neg })
        .collect();
    let mut back = vec![[0usize; N_TAGS]; n];
    for t in 1..n {
        let mut next = [neg; N_TAGS];
        for j in 0..N_TAGS {
            for i in 0..N_TAGS {
                if !allowed(Some(i), j) {
                    continue;
                }
                let s = score[i] + trans.get(i, j);
                if s > next[j] {
                    next[j] = s;
                    back[t][j] = i;
                }
            }
            next[j] += emissions.get(t, j);
        }
        score = next.to_vec();
    }
    let mut best = 0;
    for j in 0..N_TAGS {
        if score[j] + end[j] > score[best] + end[best] {
            best = j;
        }
    }
    let mut path = vec![best; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Spans of `B I*` runs.
pub fn spans_from_tags(tags: &[usize]) -> Vec<EntitySpan> {
    let mut out: Vec<EntitySpan> = Vec::new();
    for (i, &t) in tags.iter().enumerate() {
        match t {
            B => out.push(Span::single(i)),
            I => {
                if let Some(last) = out.last_mut().filter(|s| s.end + 1 == i) {
                    last.end = i;
                }
            }
            _ => {}
        }
    }
    out
}

/// `[f_start ; f_end]`.
pub fn encode_candidate(features: &Matrix, span: Span) -> Result<Vec<f64>> {
    if span.start > span.end || span.end >= features.rows() {
        return Err(Error::InvalidArgument(format!("span {span:?} outside {} tokens", features.rows())));
    }
    let mut v = features.row(span.start).to_vec();
    v.extend_from_slice(features.row(span.end));
    Ok(v)
}

fn encode_candidates_var(g: &mut Graph, features: Var, spans: &[Span]) -> Var {
    let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.end).collect();
    let a = g.gather_rows(features, &starts);
    let b = g.gather_rows(features, &ends);
    g.concat_cols(&[a, b])
}

/// `−(1/|Q|) Σ_q log P(gold_q | q)` over candidate role distributions.
pub fn role_loss(probs: &Matrix, gold: &[usize]) -> Result<f64> {
    crate::detection::classification_loss(probs, gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GruIds {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RoleHead {
    roles: Vec<String>,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArgumentMeta {
    kind: String,
    encoder: ToyEncoder,
    projector: FeatureProjector,
    forward_gru: GruIds,
    backward_gru: GruIds,
    emit_w: ParamId,
    emit_b: ParamId,
    trans: ParamId,
    start: ParamId,
    end: ParamId,
    heads: BTreeMap<String, RoleHead>,
    gru_hidden: usize,
    trained: bool,
    seed: u64,
}

const ARGUMENT_KIND: &str = "arguments";

/// Loss nodes of one sentence.
pub struct SentenceLoss {
    /// CRF negative log-likelihood of the gold BIO tags.
    pub crf: Var,
    /// Summed role cross-entropy, absent when no mention has candidates.
    pub roles: Option<Var>,
    pub n_candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArgumentModel {
    pub store: ParamStore,
    meta: ArgumentMeta,
}

struct ArgTrace {
    features: Var,
    emissions: Var,
}

impl ArgumentModel {
    pub fn new(encoder_config: EncoderConfig, vocab: Vocab, cfg: &ArgumentConfig) -> Result<Self> {
        let mut rng = seeded(cfg.seed, &[tag("argument-init")]);
        let mut store = ParamStore::new();
        let d = encoder_config.d;
        let dropout = encoder_config.dropout_rate;
        let encoder = ToyEncoder::new(encoder_config, vocab, &mut store, "arg_encoder", &mut rng)?;
        let h = cfg.feature_dim;
        let projector = FeatureProjector::new(&mut store, "arg_projector", d, h, dropout, &mut rng);
        let hg = cfg.gru_hidden;
        let mut gru = |name: &str, store: &mut ParamStore| GruIds {
            w: store.add(format!("{name}.w"), normal_matrix(&mut rng, h, 3 * hg, (1.0 / h as f64).sqrt())),
            u: store.add(format!("{name}.u"), normal_matrix(&mut rng, hg, 3 * hg, (1.0 / hg as f64).sqrt())),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, 3 * hg)),
        };
        let forward_gru = gru("gru_fwd", &mut store);
        let backward_gru = gru("gru_bwd", &mut store);
        let emit_w = store.add("tagger.emit.weight", normal_matrix(&mut rng, N_TAGS, 2 * hg, 0.1));
        let emit_b = store.add("tagger.emit.bias", Matrix::zeros(1, N_TAGS));
        let trans = store.add("tagger.trans", Matrix::zeros(N_TAGS, N_TAGS));
        let start = store.add("tagger.start", Matrix::zeros(1, N_TAGS));
        let end = store.add("tagger.end", Matrix::zeros(1, N_TAGS));
        Ok(Self {
            store,
            meta: ArgumentMeta {
                kind: ARGUMENT_KIND.into(),
                encoder,
                projector,
                forward_gru,
                backward_gru,
                emit_w,
                emit_b,
                trans,
                start,
                end,
                heads: BTreeMap::new(),
                gru_hidden: hg,
                trained: false,
                seed: cfg.seed,
            },
        })
    }

    pub fn has_head(&self, event_type: &str) -> bool {
        self.meta.heads.contains_key(event_type)
    }

    pub fn head_types(&self) -> impl Iterator<Item = &str> {
        self.meta.heads.keys().map(String::as_str)
    }

    pub fn is_trained(&self) -> bool {
        self.meta.trained
    }

    /// Adds a role head per new type; existing heads are untouched.
    pub fn add_heads(&mut self, types: &[(String, Vec<String>)]) -> Result<()> {
        let in_dim = 2 * self.meta.projector.out_dim;
        for (t, roles) in types {
            if self.meta.heads.contains_key(t) {
                return Err(Error::InvalidArgument(format!("role head for {t:?} exists")));
            }
            let mut rng = seeded(self.meta.seed, &[tag("head"), tag(t)]);
            let n = roles.len() + 1;
            let head = RoleHead {
                roles: roles.clone(),
                weight: self
                    .store
                    .add(format!("role.{t}.weight"), normal_matrix(&mut rng, n, in_dim, 0.02)),
                bias: self.store.add(format!("role.{t}.bias"), Matrix::zeros(1, n)),
            };
            self.meta.heads.insert(t.clone(), head);
        }
        Ok(())
    }

    fn gru(&self, g: &mut Graph, ids: &GruIds, x: Var, reverse: bool) -> Var {
        let n = g.value(x).rows();
        let hg = self.meta.gru_hidden;
        let w = g.param(&self.store, ids.w);
        let u = g.param(&self.store, ids.u);
        let b = g.param(&self.store, ids.b);
        let xw = g.matmul(x, w);
        let xw = g.add_row(xw, b);
        let mut h = g.constant(Matrix::zeros(1, hg));
        let mut outs = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = g.gather_rows(xw, &[t]);
            let hu = g.matmul(h, u);
            let xz = g.slice_cols(xt, 0, hg);
            let xr = g.slice_cols(xt, hg, hg);
            let xn = g.slice_cols(xt, 2 * hg, hg);
            let hz = g.slice_cols(hu, 0, hg);
            let hr = g.slice_cols(hu, hg, hg);
            let hn = g.slice_cols(hu, 2 * hg, hg);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let rh = g.mul(r, hn);
            let cand = g.add(xn, rh);
            let cand = g.tanh(cand);
            // h' = n + z·(h − n)
            let diff = g.sub(h, cand);
            let gated = g.mul(z, diff);
            h = g.add(cand, gated);
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }

    fn forward(&self, g: &mut Graph, tokens: &[String], mut rng: Option<&mut SeededRng>) -> Result<ArgTrace> {
        let m = &self.meta;
        let enc = m.encoder.forward(g, &self.store, tokens, rng.as_deref_mut())?;
        let features = m.projector.forward(g, &self.store, enc.hidden, rng)?;
        let fw = self.gru(g, &m.forward_gru, features, false);
        let bw = self.gru(g, &m.backward_gru, features, true);
        let hcat = g.concat_cols(&[fw, bw]);
        let w = g.param(&self.store, m.emit_w);
        let b = g.param(&self.store, m.emit_b);
        let e = g.matmul_t(hcat, w);
        let emissions = g.add_row(e, b);
        Ok(ArgTrace { features, emissions })
    }

    /// CRF negative log-likelihood of `tags` given emissions.
    fn crf_nll(&self, g: &mut Graph, emissions: Var, tags: &[usize]) -> Var {
        let n = tags.len();
        let trans = g.param(&self.store, self.meta.trans);
        let start = g.param(&self.store, self.meta.start);
        let end = g.param(&self.store, self.meta.end);

        let mut onehot = Matrix::zeros(n, N_TAGS);
        let mut counts = Matrix::zeros(N_TAGS, N_TAGS);
        for (t, &y) in tags.iter().enumerate() {
            onehot.set(t, y, 1.0);
            if t > 0 {
                counts.set(tags[t - 1], y, counts.get(tags[t - 1], y) + 1.0);
            }
        }
        let mut first = Matrix::zeros(1, N_TAGS);
        first.set(0, tags[0], 1.0);
        let mut last = Matrix::zeros(1, N_TAGS);
        last.set(0, tags[n - 1], 1.0);
        let terms = [
            (emissions, onehot),
            (trans, counts),
            (start, first),
            (end, last),
        ];
        let mut gold = None;
        for (v, mask) in terms {
            let c = g.constant(mask);
            let s = g.mul(v, c);
            let s = g.sum_all(s);
            gold = Some(match gold {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let gold = gold.expect("four terms");

        let log_z = crf_log_partition(g, emissions, trans, start, end);
        g.sub(log_z, gold)
    }

    /// Records the losses of one annotated sentence on `g`. Role candidates
    /// are the gold entities plus `tagged`; `rng` enables dropout.
    pub fn sentence_loss(
        &self,
        g: &mut Graph,
        sentence: &TokenizedSentence,
        tagged: &[EntitySpan],
        rng: Option<&mut SeededRng>,
    ) -> Result<SentenceLoss> {
        let tr = self.forward(g, &sentence.tokens, rng)?;
        let tags = bio_tags(sentence.tokens.len(), &sentence.entities);
        let crf = self.crf_nll(g, tr.emissions, &tags);
        let mut terms = Vec::new();
        let mut n_candidates = 0;
        for ex in role_examples(self, sentence, tagged)? {
            let head = self.head(&ex.event_type)?;
            let c = encode_candidates_var(g, tr.features, &ex.spans);
            let p = self.role_probs(g, head, c);
            terms.push(cls_loss_sum(g, p, &ex.labels)?);
            n_candidates += ex.spans.len();
        }
        let roles = terms.split_first().map(|(&first, rest)| rest.iter().fold(first, |a, &v| g.add(a, v)));
        Ok(SentenceLoss {
            crf,
            roles,
            n_candidates,
        })
    }

    /// Evaluation-mode projected features and emissions.
    fn evaluate(&self, tokens: &[String]) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let tr = self.forward(&mut g, tokens, None)?;
        Ok((g.value(tr.features).clone(), g.value(tr.emissions).clone()))
    }

    fn decode(&self, emissions: &Matrix) -> Vec<EntitySpan> {
        let trans = self.store.get(self.meta.trans);
        let start = self.store.get(self.meta.start).data();
        let end = self.store.get(self.meta.end).data();
        spans_from_tags(&viterbi(emissions, trans, start, end))
    }

    /// Entity spans recognized in a sentence.
    pub fn tag_entities(&self, tokens: &[String]) -> Result<Vec<EntitySpan>> {
        if !self.meta.trained {
            return Err(Error::NotReady("entity tagger has not been trained".into()));
        }
        let (_, emissions) = self.evaluate(tokens)?;
        Ok(self.decode(&emissions))
    }

    fn head(&self, event_type: &str) -> Result<&RoleHead> {
        self.meta
            .heads
            .get(event_type)
            .ok_or_else(|| Error::NotReady(format!("no role head for {event_type:?}")))
    }

    fn role_probs(&self, g: &mut Graph, head: &RoleHead, candidates: Var) -> Var {
        let w = g.param(&self.store, head.weight);
        let b = g.param(&self.store, head.bias);
        let logits = g.matmul_t(candidates, w);
        let logits = g.add_row(logits, b);
        g.softmax_rows(logits)
    }

    /// Role distributions (`None` at column 0) for `spans` under `event_type`.
    pub fn classify_roles(&self, tokens: &[String], event_type: &str, spans: &[Span]) -> Result<Matrix> {
        let head = self.head(event_type)?;
        let mut g = Graph::new();
        let tr = self.forward(&mut g, tokens, None)?;
        let c = encode_candidates_var(&mut g, tr.features, spans);
        let p = self.role_probs(&mut g, head, c);
        Ok(g.value(p).clone())
    }

    /// Fills `arguments` of each detected mention with tagged entities whose
    /// best role is not `None`.
    pub fn extract_arguments(&self, tokens: &[String], detected: &[EventMention]) -> Result<Vec<EventMention>> {
        if detected.is_empty() {
            return Ok(Vec::new());
        }
        for ev in detected {
            self.head(&ev.event_type)?;
        }
        let entities = self.tag_entities(tokens)?;
        let mut out = Vec::with_capacity(detected.len());
        for ev in detected {
            let mut ev = ev.clone();
            ev.arguments.clear();
            if !entities.is_empty() {
                let head = self.head(&ev.event_type)?;
                let probs = self.classify_roles(tokens, &ev.event_type, &entities)?;
                for (r, span) in entities.iter().enumerate() {
                    let best = probs.argmax_row(r);
                    if best > 0 {
                        ev.arguments.push(ArgumentMention {
                            span: *span,
                            role: head.roles[best - 1].clone(),
                        });
                    }
                }
            }
            out.push(ev);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &serde_json::to_value(&self.meta)?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load(path)?;
        let meta: ArgumentMeta = serde_json::from_value(meta).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("metadata: {e}"),
        })?;
        if meta.kind != ARGUMENT_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected an argument model, found {:?}", meta.kind),
            });
        }
        Ok(Self { store, meta })
    }
}

/// `log Σ_paths exp(score)` by the forward algorithm.
fn crf_log_partition(g: &mut Graph, emissions: Var, trans: Var, start: Var, end: Var) -> Var {
    let n = g.value(emissions).rows();
    let e0 = g.gather_rows(emissions, &[0]);
    let mut alpha = g.add(start, e0);
    let trans_t = g.transpose(trans);
    for t in 1..n {
        // row j, column i: alpha_i + trans[i][j]
        let m = g.add_row(trans_t, alpha);
        let lse = g.log_sum_exp_rows(m);
        let lse = g.transpose(lse);
        let et = g.gather_rows(emissions, &[t]);
        alpha = g.add(lse, et);
    }
    let fin = g.add(alpha, end);
    g.log_sum_exp_rows(fin)
}

/// A stored argument instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArgumentExemplar {
    pub event_type: String,
    pub trigger: Span,
    pub sentence: TokenizedSentence,
}

pub type ArgumentMemory = ExemplarStore<ArgumentExemplar>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArgumentStageLog {
    pub stage: usize,
    pub losses: Vec<f64>,
}

pub struct ArgumentStageData<'a> {
    pub stage: usize,
    /// New types with their role inventories.
    pub new_types: &'a [(String, Vec<String>)],
    pub train: &'a [TokenizedSentence],
}

struct RoleExample {
    event_type: String,
    spans: Vec<Span>,
    labels: Vec<usize>,
}

fn role_examples(model: &ArgumentModel, s: &TokenizedSentence, tagged: &[Span]) -> Result<Vec<RoleExample>> {
    let mut out = Vec::new();
    for ev in &s.events {
        let Ok(head) = model.head(&ev.event_type) else {
            continue;
        };
        let mut spans: Vec<Span> = s.entities.clone();
        for sp in tagged {
            if !spans.contains(sp) {
                spans.push(*sp);
            }
        }
        for a in &ev.arguments {
            if !spans.contains(&a.span) {
                spans.push(a.span);
            }
        }
        if spans.is_empty() {
            continue;
        }
        let labels = spans
            .iter()
            .map(|sp| {
                ev.arguments
                    .iter()
                    .find(|a| a.span == *sp)
                    .and_then(|a| head.roles.iter().position(|r| *r == a.role))
                    .map_or(0, |k| k + 1)
            })
            .collect();
        out.push(RoleExample {
            event_type: ev.event_type.clone(),
            spans,
            labels,
        });
    }
    Ok(out)
}

/// Trains tagger and role heads on the task data plus argument memory, then
/// stores exemplars of the new types.
pub fn train_argument_task(
    model: &mut ArgumentModel,
    data: &ArgumentStageData,
    memory: &mut ArgumentMemory,
    cfg: &ArgumentConfig,
) -> Result<ArgumentStageLog> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("argument batch size, epochs and learning rate must be positive".into()));
    }
    model.add_heads(data.new_types)?;
    let mut train: Vec<TokenizedSentence> = data.train.to_vec();
    let mut replay: BTreeMap<&str, TokenizedSentence> = BTreeMap::new();
    for (_, exemplars) in memory.iter() {
        for ex in exemplars {
            replay
                .entry(ex.sentence.sentence_id.as_str())
                .and_modify(|s| {
                    for ev in &ex.sentence.events {
                        if !s.events.contains(ev) {
                            s.events.push(ev.clone());
                        }
                    }
                })
                .or_insert_with(|| ex.sentence.clone());
        }
    }
    train.extend(replay.into_values());

    let stage_seed = derive_seed(cfg.seed, &[data.stage as u64, tag("arguments")]);
    let mut order_rng = seeded(stage_seed, &[tag("order")]);
    let mut dropout_rng = seeded(stage_seed, &[tag("dropout")]);
    let mut adam = Adam::new();
    let mut log = ArgumentStageLog {
        stage: data.stage,
        losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut crf_terms = Vec::new();
            let mut role_terms = Vec::new();
            let mut n_candidates = 0usize;
            for &i in batch {
                let s = &train[i];
                let tagged = if epoch > 0 && model.meta.trained {
                    let (_, em) = model.evaluate(&s.tokens)?;
                    model.decode(&em)
                } else {
                    Vec::new()
                };
                let l = model.sentence_loss(&mut g, s, &tagged, Some(&mut dropout_rng))?;
                crf_terms.push(l.crf);
                role_terms.extend(l.roles);
                n_candidates += l.n_candidates;
            }
            let crf = crf_terms[1..].iter().fold(crf_terms[0], |a, &v| g.add(a, v));
            let mut loss = g.scale(crf, 1.0 / batch.len() as f64);
            if let Some((&first, rest)) = role_terms.split_first() {
                let roles = rest.iter().fold(first, |a, &v| g.add(a, v));
                let roles = g.scale(roles, 1.0 / n_candidates as f64);
                loss = g.add(loss, roles);
            }
            total += g.scalar(loss);
            batches += 1;
            let grads = g.backward(loss);
            adam.step(&mut model.store, &grads, |_| cfg.lr);
        }
        // tagger outputs join the candidate pool once it has seen one epoch
        model.meta.trained = true;
        log.losses.push(total / batches.max(1) as f64);
        debug!("arguments stage {} epoch {}: {:.4}", data.stage, epoch + 1, total / batches.max(1) as f64);
    }

    if cfg.memory_size > 0 {
        let new: BTreeSet<&str> = data.new_types.iter().map(|(t, _)| t.as_str()).collect();
        let mut instances: BTreeMap<&str, Vec<(usize, &EventMention)>> = BTreeMap::new();
        for (i, s) in data.train.iter().enumerate() {
            for ev in &s.events {
                if new.contains(ev.event_type.as_str()) {
                    instances.entry(ev.event_type.as_str()).or_default().push((i, ev));
                }
            }
        }
        let mut feats_cache: HashMap<usize, Matrix> = HashMap::new();
        let mut selections = BTreeMap::new();
        for (t, _) in data.new_types {
            let list = instances.get(t.as_str()).cloned().unwrap_or_default();
            let mut chosen = Vec::new();
            if !list.is_empty() {
                let mut feats = Vec::with_capacity(list.len());
                for &(i, ev) in &list {
                    if !feats_cache.contains_key(&i) {
                        feats_cache.insert(i, model.evaluate(&data.train[i].tokens)?.0);
                    }
                    let f = &feats_cache[&i];
                    let spans: Vec<Span> = if ev.arguments.is_empty() {
                        vec![ev.trigger]
                    } else {
                        ev.arguments.iter().map(|a| a.span).collect()
                    };
                    let mut mean = vec![0.0; 2 * f.cols()];
                    for sp in &spans {
                        for (m, v) in mean.iter_mut().zip(encode_candidate(f, *sp)?) {
                            *m += v / spans.len() as f64;
                        }
                    }
                    feats.push(mean);
                }
                let picked = select_exemplars(&feats, cfg.memory_size, derive_seed(stage_seed, &[tag(t)]))?;
                for k in picked {
                    let (i, ev) = list[k];
                    chosen.push(ArgumentExemplar {
                        event_type: t.clone(),
                        trigger: ev.trigger,
                        sentence: data.train[i].clone(),
                    });
                }
            }
            selections.insert(t.clone(), chosen);
        }
        memory.update(selections)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_rows;
    use crate::rng::seeded;
    use rand::Rng;

    fn toks(w: &[&str]) -> Vec<String> {
        w.iter().map(|s| s.to_string()).collect()
    }

    fn small(vocab_words: &[&str], seed: u64) -> ArgumentModel {
        let enc = EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d: 16,
            attn_layers: 2,
            ffn_dim: 32,
            dropout_rate: 0.0,
            seed,
            ..EncoderConfig::default()
        };
        let cfg = ArgumentConfig {
            feature_dim: 16,
            gru_hidden: 8,
            seed,
            ..ArgumentConfig::default()
        };
        ArgumentModel::new(enc, Vocab::build(vocab_words.iter().copied()), &cfg).unwrap()
    }

    #[test]
    fn viterbi_respects_transitions() {
        // emissions favor I at the start and right after O
        let em = Matrix::from_rows(&[vec![0.0, 0.5, 3.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        let path = viterbi(&em, &Matrix::zeros(3, 3), &[0.0; 3], &[0.0; 3]);
        for t in 0..path.len() {
            assert!(allowed(if t == 0 { None } else { Some(path[t - 1]) }, path[t]), "{path:?}");
        }
        let all_o = Matrix::from_rows(&[vec![5.0, 0.0, 0.0], vec![5.0, 0.0, 0.0]]).unwrap();
        assert!(spans_from_tags(&viterbi(&all_o, &Matrix::zeros(3, 3), &[0.0; 3], &[0.0; 3])).is_empty());
    }

    #[test]
    fn bio_round_trip() {
        let ents = vec![Span::new(0, 1), Span::single(3), Span::new(4, 6)];
        let tags = bio_tags(8, &ents);
        assert_eq!(tags, vec![B, I, O, B, B, I, I, O]);
        assert_eq!(spans_from_tags(&tags), ents);
    }

    #[test]
    fn crf_partition_matches_enumeration() {
        let m = small(&["a"], 3);
        let mut rng = seeded(7, &[]);
        let n = 3;
        let em = Matrix::from_vec(n, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tr = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let st = [0.3, -0.2, 0.1];
        let en = [-0.4, 0.2, 0.0];
        let score = |p: &[usize]| {
            let mut s = st[p[0]] + en[p[n - 1]];
            for t in 0..n {
                s += em.get(t, p[t]);
                if t > 0 {
                    s += tr.get(p[t - 1], p[t]);
                }
            }
            s
        };
        let mut z = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    z += score(&[a, b, c]).exp();
                }
            }
        }
        let mut g = Graph::new();
        let e = g.constant(em.clone());
        let t = g.constant(tr.clone());
        let s = g.constant(Matrix::row_vector(&st));
        let f = g.constant(Matrix::row_vector(&en));
        let lz = crf_log_partition(&mut g, e, t, s, f);
        assert!((g.scalar(lz) - z.ln()).abs() < 1e-9);

        // nll of a gold path = log Z − score
        let mut m = m;
        m.store.set(m.meta.trans, tr.clone());
        m.store.set(m.meta.start, Matrix::row_vector(&st));
        m.store.set(m.meta.end, Matrix::row_vector(&en));
        let mut g = Graph::new();
        let e = g.constant(em.clone());
        let nll = m.crf_nll(&mut g, e, &[1, 2, 0]);
        assert!((g.scalar(nll) - (z.ln() - score(&[1, 2, 0]))).abs() < 1e-9);
    }

    #[test]
    fn candidate_encoding() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(encode_candidate(&f, Span::single(1)).unwrap(), vec![3.0, 4.0, 3.0, 4.0]);
        assert_eq!(encode_candidate(&f, Span::new(0, 2)).unwrap(), vec![1.0, 2.0, 5.0, 6.0]);
        assert!(encode_candidate(&f, Span::new(2, 3)).is_err());
    }

    #[test]
    fn role_loss_cases() {
        let perfect = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(role_loss(&perfect, &[1, 0]).unwrap(), 0.0);
        let uniform = Matrix::filled(2, 3, 1.0 / 3.0);
        assert!((role_loss(&uniform, &[2, 1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        let p = softmax_rows(&Matrix::from_rows(&[vec![0.2, -0.7, 1.1], vec![0.5, 0.4, -0.3]]).unwrap());
        let oracle = -(p.get(0, 2).ln() + p.get(1, 0).ln()) / 2.0;
        assert!((role_loss(&p, &[2, 0]).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn untrained_tagger_and_missing_head() {
        let m = small(&["a", "b"], 1);
        assert!(matches!(m.tag_entities(&toks(&["a", "b"])), Err(Error::NotReady(_))));
        assert!(m.extract_arguments(&toks(&["a"]), &[]).unwrap().is_empty());
        let ev = EventMention {
            trigger: Span::single(0),
            event_type: "X".into(),
            arguments: vec![],
        };
        assert!(m.extract_arguments(&toks(&["a"]), &[ev]).is_err());
    }

    #[test]
    fn new_heads_leave_old_ones_alone() {
        let mut m = small(&["a", "b", "c"], 2);
        m.add_heads(&[("X".into(), vec!["R1".into(), "R2".into()])]).unwrap();
        let t = toks(&["a", "b", "c"]);
        let spans = [Span::single(0), Span::new(1, 2)];
        let before = m.classify_roles(&t, "X", &spans).unwrap();
        m.add_heads(&[("Y".into(), vec!["R3".into()])]).unwrap();
        assert_eq!(m.classify_roles(&t, "X", &spans).unwrap(), before);
        assert!(m.add_heads(&[("X".into(), vec![])]).is_err());
    }

    #[test]
    fn memorizes_one_sentence() {
        let words = ["john", "hit", "bob", "in", "paris", "today"];
        let mut m = small(&words, 4);
        let s = TokenizedSentence {
            sentence_id: "s".into(),
            tokens: toks(&words),
            events: vec![EventMention {
                trigger: Span::single(1),
                event_type: "Attack".into(),
                arguments: vec![
                    ArgumentMention {
                        span: Span::single(0),
                        role: "Attacker".into(),
                    },
                    ArgumentMention {
                        span: Span::single(4),
                        role: "Place".into(),
                    },
                ],
            }],
            entities: vec![Span::single(0), Span::single(2), Span::single(4)],
        };
        let roles = vec![("Attack".to_string(), vec!["Attacker".to_string(), "Place".to_string()])];
        let cfg = ArgumentConfig {
            epochs: 150,
            lr: 1e-2,
            memory_size: 2,
            ..ArgumentConfig::default()
        };
        let mut memory = ArgumentMemory::new(2);
        let data = ArgumentStageData {
            stage: 1,
            new_types: &roles,
            train: std::slice::from_ref(&s),
        };
        train_argument_task(&mut m, &data, &mut memory, &cfg).unwrap();
        assert_eq!(m.tag_entities(&s.tokens).unwrap(), s.entities);
        let detected = vec![EventMention {
            arguments: vec![],
            ..s.events[0].clone()
        }];
        let out = m.extract_arguments(&s.tokens, &detected).unwrap();
        assert_eq!(out, s.events);
        assert_eq!(memory.get("Attack").unwrap().len(), 1);
    }
}
