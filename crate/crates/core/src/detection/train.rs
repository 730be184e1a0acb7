//! One stage of continual detection training.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{afd_loss_sum, cls_loss_sum, combined_loss_var, spd_loss_sum, DistillationConfig};
use super::prototype::{associated_std, compute_prototype, long_tail_noise, long_tail_types, PrototypeStore};
use super::pseudo::{augment_with_pseudo_labels, relabel_memory, PseudoLabel, PseudoLabelConfig};
use super::{DetectionModel, DetectionView, TrainSentence};
use crate::autograd::{Adam, Graph, Var};
use crate::corpus::TokenizedSentence;
use crate::encoder::{attentive_features_var, context_attention_var};
use crate::error::{Error, Result};
use crate::eval::{detection_f1_where, Prf};
use crate::memory::{select_exemplars, Exemplar, MemoryStore};
use crate::rng::{derive_seed, seeded, tag, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTrainConfig {
    pub epochs: usize,
    /// Classification-only epochs before prototypes are computed.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pseudo: PseudoLabelConfig,
    pub distill: DistillationConfig,
    pub use_pseudo_labels: bool,
    pub use_afd: bool,
    pub use_spd: bool,
    pub use_prototypes: bool,
    /// Exemplars kept per type; 0 disables replay.
    pub memory_size: usize,
    pub seed: u64,
}

impl Default for DetectionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            warmup_epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            pseudo: PseudoLabelConfig::default(),
            distill: DistillationConfig::default(),
            use_pseudo_labels: true,
            use_afd: true,
            use_spd: true,
            use_prototypes: true,
            memory_size: 10,
            seed: 0,
        }
    }
}

impl DetectionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pseudo.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || self.distill.alpha < 0.0 || self.distill.beta < 0.0 {
            return Err(Error::Config("learning rate must be positive, alpha and beta non-negative".into()));
        }
        Ok(())
    }
}

/// State carried across stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualState {
    pub memory: MemoryStore,
    /// Gold trigger count of each type in the training view that introduced it.
    pub type_counts: BTreeMap<String, usize>,
}

impl ContinualState {
    pub fn new(memory_size: usize) -> Self {
        Self {
            memory: MemoryStore::new(memory_size),
            type_counts: BTreeMap::new(),
        }
    }
}

pub struct StageData<'a> {
    pub stage: usize,
    pub new_types: &'a [String],
    /// Visible training view of this task.
    pub train: &'a [TokenizedSentence],
    /// Development sentences used for checkpoint selection.
    pub dev: &'a [TokenizedSentence],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub afd: f64,
    pub spd: f64,
    pub dev_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub pseudo_labels: Vec<PseudoLabel>,
    pub memory_relabels: Vec<PseudoLabel>,
    pub prototypes: Option<PrototypeStore>,
    pub long_tail: Vec<String>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

/// Detection score with gold restricted to the model's seen types.
pub fn evaluate_detection(model: &DetectionModel, sentences: &[TokenizedSentence]) -> Result<Prf> {
    let preds = model.predict_all(sentences)?;
    let seen = model.label_space();
    detection_f1_where(&preds, sentences, |t| seen.contains(t))
}

struct Objective<'a> {
    teacher: Option<&'a DetectionModel>,
    afd: bool,
    spd: bool,
    new_types: &'a BTreeSet<String>,
    n_prev: usize,
    n_seen: usize,
    distill: DistillationConfig,
    long_tail: Option<&'a HashMap<String, Vec<f64>>>,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    cls: f64,
    afd: f64,
    spd: f64,
    batches: usize,
}

fn gold_indices(model: &DetectionModel, s: &TrainSentence) -> Result<Vec<usize>> {
    s.tags
        .iter()
        .map(|t| match t.event_type() {
            None => Ok(0),
            Some(e) => model
                .label_space()
                .index(e)
                .ok_or_else(|| Error::InvalidArgument(format!("sentence {}: unseen type {e:?}", s.sentence_id))),
        })
        .collect()
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| g.add(acc, v)))
}

fn teacher_view<'c>(
    cache: &'c mut HashMap<usize, DetectionView>,
    teacher: &DetectionModel,
    index: usize,
    s: &TrainSentence,
) -> Result<&'c DetectionView> {
    if !cache.contains_key(&index) {
        cache.insert(index, teacher.view(&s.tokens)?);
    }
    Ok(&cache[&index])
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut DetectionModel,
    data: &[TrainSentence],
    obj: &Objective,
    adam: &mut Adam,
    cfg: &DetectionTrainConfig,
    order_rng: &mut SeededRng,
    dropout_rng: &mut SeededRng,
    noise_rng: &mut SeededRng,
    cache: &mut HashMap<usize, DetectionView>,
) -> Result<Totals> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(order_rng);
    let mut totals = Totals::default();
    let attn_layers = model.attn_layers();
    for batch in order.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let (mut cls, mut afd, mut spd) = (Vec::new(), Vec::new(), Vec::new());
        let (mut n_tokens, mut n_tilde) = (0usize, 0usize);
        for &i in batch {
            let s = &data[i];
            let gold = gold_indices(model, s)?;
            let noise = match obj.long_tail {
                Some(assoc) => {
                    let mask: Vec<Option<&str>> = s
                        .tags
                        .iter()
                        .map(|t| t.event_type().filter(|e| assoc.contains_key(*e)))
                        .collect();
                    mask.iter()
                        .any(Option::is_some)
                        .then(|| long_tail_noise(&mask, model.feature_dim(), assoc, noise_rng))
                        .transpose()?
                }
                None => None,
            };
            let trace = model.forward(&mut g, &s.tokens, Some(dropout_rng), noise.as_ref())?;
            cls.push(cls_loss_sum(&mut g, trace.probs, &gold)?);
            n_tokens += s.tokens.len();
            if let Some(teacher) = obj.teacher {
                if !(obj.afd || obj.spd) {
                    continue;
                }
                let target = teacher_view(cache, teacher, i, s)?;
                if obj.afd {
                    let attn = context_attention_var(&mut g, &trace.encoder.attention, attn_layers)?;
                    let a = attentive_features_var(&mut g, trace.features, attn)?;
                    let t = g.constant(target.attentive.clone());
                    afd.push(afd_loss_sum(&mut g, a, t)?);
                }
                if obj.spd {
                    let rows: Vec<usize> = s
                        .tags
                        .iter()
                        .enumerate()
                        .filter(|(_, t)| t.event_type().is_none_or(|e| !obj.new_types.contains(e)))
                        .map(|(r, _)| r)
                        .collect();
                    n_tilde += rows.len();
                    if !rows.is_empty() {
                        spd.push(spd_loss_sum(&mut g, trace.clean_probs, &target.probs, &rows)?);
                    }
                }
            }
        }
        let cls_sum = sum_vars(&mut g, &cls).expect("non-empty batch");
        let l_cls = g.scale(cls_sum, 1.0 / n_tokens as f64);
        let l_afd = sum_vars(&mut g, &afd).map(|v| g.scale(v, 1.0 / n_tokens as f64));
        let l_spd = match sum_vars(&mut g, &spd) {
            Some(v) if n_tilde > 0 => Some(g.scale(v, 1.0 / n_tilde as f64)),
            _ => None,
        };
        let loss = if obj.teacher.is_some() {
            combined_loss_var(&mut g, l_cls, l_afd, l_spd, obj.n_prev, obj.n_seen, &obj.distill)?
        } else {
            l_cls
        };
        totals.loss += g.scalar(loss);
        totals.cls += g.scalar(l_cls);
        totals.afd += l_afd.map_or(0.0, |v| g.scalar(v));
        totals.spd += l_spd.map_or(0.0, |v| g.scalar(v));
        totals.batches += 1;
        let grads = g.backward(loss);
        adam.step(&mut model.store, &grads, |_| cfg.lr);
    }
    Ok(totals)
}

fn record(stage: usize, phase: &str, epoch: usize, t: &Totals, dev_f1: Option<f64>) -> EpochRecord {
    let n = t.batches.max(1) as f64;
    EpochRecord {
        stage,
        phase: phase.to_string(),
        epoch,
        loss: t.loss / n,
        cls: t.cls / n,
        afd: t.afd / n,
        spd: t.spd / n,
        dev_f1,
    }
}

/// Trains `model` on one task: pseudo-label augmentation, warm-up, prototype
/// computation, main training with distillation and long-tail enhancement,
/// exemplar selection and memory relabeling. `teacher` is the frozen model
/// of the previous stage, or `None` for plain classification training.
pub fn train_task(
    model: &mut DetectionModel,
    teacher: Option<&DetectionModel>,
    data: &StageData,
    state: &mut ContinualState,
    cfg: &DetectionTrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    let stage = data.stage;
    let n_prev = model.label_space().types().len();
    model.add_types(data.new_types)?;
    let n_seen = model.label_space().types().len();
    let new_types: BTreeSet<String> = data.new_types.iter().cloned().collect();
    let continual = n_prev > 0 && teacher.is_some();
    let stage_seed = derive_seed(cfg.seed, &[stage as u64]);
    let mut log = StageLog {
        stage,
        ..StageLog::default()
    };

    for t in data.new_types {
        let count = data
            .train
            .iter()
            .flat_map(|s| &s.events)
            .filter(|e| &e.event_type == t)
            .count();
        state.type_counts.insert(t.clone(), count);
    }

    // (1) pseudo labels from the previous model
    let base: Vec<TrainSentence> = data.train.iter().map(TrainSentence::from_sentence).collect();
    let current = match teacher {
        Some(t) if continual && cfg.use_pseudo_labels => {
            let (augmented, audit) = augment_with_pseudo_labels(&base, t, cfg.pseudo.tau)?;
            info!("stage {stage}: {} pseudo labels", audit.len());
            log.pseudo_labels = audit;
            augmented
        }
        _ => base,
    };

    let mut dropout_rng = seeded(stage_seed, &[tag("dropout")]);
    let mut order_rng = seeded(stage_seed, &[tag("order")]);
    let mut noise_rng = seeded(stage_seed, &[tag("noise")]);
    let mut cache = HashMap::new();

    // (2)-(3) warm-up and prototypes
    let pkt = continual && cfg.use_prototypes;
    let mut assoc: HashMap<String, Vec<f64>> = HashMap::new();
    if pkt {
        let plain = Objective {
            teacher: None,
            afd: false,
            spd: false,
            new_types: &new_types,
            n_prev,
            n_seen,
            distill: cfg.distill,
            long_tail: None,
        };
        let mut adam = Adam::new();
        for epoch in 1..=cfg.warmup_epochs {
            let t = run_epoch(
                model,
                &current,
                &plain,
                &mut adam,
                cfg,
                &mut order_rng,
                &mut dropout_rng,
                &mut noise_rng,
                &mut cache,
            )?;
            log.curve.push(record(stage, "warmup", epoch, &t, None));
        }

        let mut feats: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        let mut collect = |s: &TrainSentence, keep: &dyn Fn(&str) -> bool| -> Result<()> {
            let wanted: Vec<(usize, &str)> = s
                .tags
                .iter()
                .enumerate()
                .filter(|(_, t)| t.is_gold())
                .filter_map(|(r, t)| t.event_type().filter(|e| keep(e)).map(|e| (r, e)))
                .collect();
            if wanted.is_empty() {
                return Ok(());
            }
            let view = model.view(&s.tokens)?;
            for (r, e) in wanted {
                feats.entry(e.to_string()).or_default().push(view.features.row(r).to_vec());
            }
            Ok(())
        };
        for s in &current {
            collect(s, &|e| new_types.contains(e))?;
        }
        for (event_type, exemplars) in state.memory.iter() {
            for ex in exemplars {
                collect(&ex.sentence, &|e| e == event_type)?;
            }
        }
        let mut protos = PrototypeStore::default();
        for (t, fs) in &feats {
            protos.insert(compute_prototype(t, fs)?);
        }
        let seen_counts: BTreeMap<String, usize> = model
            .label_space()
            .types()
            .iter()
            .map(|t| (t.clone(), state.type_counts.get(t).copied().unwrap_or(0)))
            .collect();
        log.long_tail = long_tail_types(&seen_counts);
        for t in &log.long_tail {
            match protos.get(t) {
                Some(p) => {
                    assoc.insert(t.clone(), associated_std(p, &protos));
                }
                None => debug!("long-tail type {t:?} has no tokens for a prototype"),
            }
        }
        log.prototypes = Some(protos);
    }

    // (4) main training on augmented data and replay
    let mut train_set = current.clone();
    if cfg.memory_size > 0 {
        train_set.extend(state.memory.training_sentences());
    }
    cache.clear();
    let objective = Objective {
        teacher: teacher.filter(|_| continual),
        afd: cfg.use_afd,
        spd: cfg.use_spd,
        new_types: &new_types,
        n_prev,
        n_seen,
        distill: cfg.distill,
        long_tail: pkt.then_some(&assoc),
    };
    let mut adam = Adam::new();
    let mut best: Option<(f64, usize, crate::autograd::ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let t = run_epoch(
            model,
            &train_set,
            &objective,
            &mut adam,
            cfg,
            &mut order_rng,
            &mut dropout_rng,
            &mut noise_rng,
            &mut cache,
        )?;
        let dev_f1 = if data.dev.is_empty() {
            None
        } else {
            Some(evaluate_detection(model, data.dev)?.f1)
        };
        debug!("stage {stage} epoch {epoch}: loss {:.4} dev {:?}", t.loss / t.batches.max(1) as f64, dev_f1);
        log.curve.push(record(stage, "main", epoch, &t, dev_f1));
        let score = dev_f1.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.store.clone()));
        }
    }
    if let Some((score, epoch, store)) = best {
        model.store = store;
        log.best_epoch = epoch;
        log.best_dev_f1 = (!data.dev.is_empty()).then_some(score);
    }

    // (5) exemplar selection for the new types
    if cfg.memory_size > 0 {
        let mut instances: BTreeMap<&str, Vec<(usize, crate::corpus::Span)>> = BTreeMap::new();
        for (i, s) in data.train.iter().enumerate() {
            for ev in &s.events {
                if new_types.contains(&ev.event_type) {
                    instances.entry(ev.event_type.as_str()).or_default().push((i, ev.trigger));
                }
            }
        }
        let mut views: HashMap<usize, DetectionView> = HashMap::new();
        let mut selections = BTreeMap::new();
        for t in data.new_types {
            let list = instances.get(t.as_str()).cloned().unwrap_or_default();
            let mut chosen = Vec::new();
            if !list.is_empty() {
                let mut feats = Vec::with_capacity(list.len());
                for &(i, span) in &list {
                    if !views.contains_key(&i) {
                        views.insert(i, model.view(&data.train[i].tokens)?);
                    }
                    let f = &views[&i].features;
                    let mut mean = vec![0.0; f.cols()];
                    for r in span.start..=span.end {
                        for (m, v) in mean.iter_mut().zip(f.row(r)) {
                            *m += v / span.len() as f64;
                        }
                    }
                    feats.push(mean);
                }
                let picked = select_exemplars(&feats, cfg.memory_size, derive_seed(stage_seed, &[tag(t)]))?;
                for k in picked {
                    let (i, span) = list[k];
                    chosen.push(Exemplar {
                        sentence_id: data.train[i].sentence_id.clone(),
                        trigger: span,
                        event_type: t.clone(),
                        sentence: current[i].clone(),
                    });
                }
            }
            selections.insert(t.clone(), chosen);
        }
        state.memory.update(selections)?;

        // (6) pseudo labels for stored exemplars from the new model
        if cfg.use_pseudo_labels {
            log.memory_relabels = relabel_memory(&mut state.memory, model, cfg.pseudo.tau)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, partition_tasks, SyntheticConfig};
    use crate::encoder::{EncoderConfig, Vocab};

    fn small_model(train: &[TokenizedSentence], seed: u64) -> DetectionModel {
        let vocab = Vocab::build(train.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
        let cfg = EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d: 32,
            attn_layers: 2,
            ffn_dim: 64,
            seed,
            ..EncoderConfig::default()
        };
        DetectionModel::new(cfg, vocab, 128, seed).unwrap()
    }

    #[test]
    fn single_stage_learns_separable_types() {
        let mut syn = SyntheticConfig::new(vec![40, 30, 20], 60, 5);
        syn.multi_type_prob = 0.0;
        let (schema, sentences) = generate_synthetic(&syn).unwrap();
        let stream = partition_tasks(&schema, &sentences, 1, 3).unwrap();
        let task = stream.task(1).unwrap();
        let mut model = small_model(&task.train, 1);
        let mut state = ContinualState::new(10);
        let cfg = DetectionTrainConfig {
            epochs: 6,
            seed: 2,
            ..DetectionTrainConfig::default()
        };
        let data = StageData {
            stage: 1,
            new_types: &task.event_types,
            train: &task.train,
            dev: &task.dev,
        };
        let log = train_task(&mut model, None, &data, &mut state, &cfg).unwrap();
        assert!(log.pseudo_labels.is_empty() && log.prototypes.is_none());

        let (mut correct, mut total) = (0, 0);
        for s in &task.train {
            let t = TrainSentence::from_sentence(s);
            let gold = gold_indices(&model, &t).unwrap();
            let p = model.classify_tokens(&s.tokens).unwrap();
            for (r, &y) in gold.iter().enumerate() {
                correct += usize::from(p.argmax_row(r) == y);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "token accuracy {acc}");
        let f1 = evaluate_detection(&model, &task.test).unwrap().f1;
        assert!(f1 >= 0.9, "test f1 {f1}");

        assert!(state.memory.iter().all(|(_, v)| v.len() <= 10));
        assert_eq!(state.memory.types().count(), 3);
        assert_eq!(state.type_counts.len(), 3);
    }
}
