//! Continual trigger detection: a shared encoder and projector feeding a
//! token classifier whose label space grows with every task.

mod losses;
mod prototype;
mod pseudo;
mod train;

pub use losses::{
    afd_loss, afd_loss_sum, classification_loss, cls_loss_sum, combined_loss, combined_loss_var, rho,
    spd_loss, spd_loss_sum, DistillationConfig,
};
pub use prototype::{
    associated_std, compute_prototype, enhance_long_tail, long_tail_noise, long_tail_types,
    sample_intensive_vector, Prototype, PrototypeStore,
};
pub use pseudo::{
    augment_with_pseudo_labels, pseudo_label_tags, relabel_memory, PseudoLabel, PseudoLabelConfig,
};
pub use train::{
    evaluate_detection, train_task, ContinualState, DetectionTrainConfig, EpochRecord, StageData, StageLog,
};

use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::checkpoint;
use crate::corpus::{EventMention, Span, TokenizedSentence, NA};
use crate::encoder::{
    attentive_features, context_attention, normal_matrix, EncoderConfig, EncoderTrace, FeatureProjector,
    ToyEncoder, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::PredictedSentence;
use crate::rng::{seeded, tag, SeededRng};

/// Std of freshly initialized classifier rows.
pub const NEW_ROW_STD: f64 = 0.02;

/// Ordered seen types with `NA` fixed at index 0. Only ever appended to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            labels: vec![NA.to_string()],
        }
    }
}

impl LabelSpace {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Seen event types, without `NA`.
    pub fn types(&self) -> &[String] {
        &self.labels[1..]
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, event_type: &str) -> bool {
        event_type != NA && self.index(event_type).is_some()
    }

    fn extend(&mut self, new_types: &[String]) -> Result<()> {
        for t in new_types {
            if t == NA || self.index(t).is_some() {
                return Err(Error::InvalidArgument(format!("type {t:?} already in label space")));
            }
        }
        self.labels.extend(new_types.iter().cloned());
        Ok(())
    }
}

/// Training label of one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenTag {
    Na,
    Gold { event_type: String },
    Pseudo { event_type: String, confidence: f64 },
}

impl TokenTag {
    pub fn event_type(&self) -> Option<&str> {
        match self {
            TokenTag::Na => None,
            TokenTag::Gold { event_type } | TokenTag::Pseudo { event_type, .. } => Some(event_type),
        }
    }

    pub fn is_gold(&self) -> bool {
        matches!(self, TokenTag::Gold { .. })
    }

    pub fn is_pseudo(&self) -> bool {
        matches!(self, TokenTag::Pseudo { .. })
    }

    fn rank(&self) -> u8 {
        match self {
            TokenTag::Na => 0,
            TokenTag::Pseudo { .. } => 1,
            TokenTag::Gold { .. } => 2,
        }
    }
}

/// Token-level view of a sentence used for detection training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSentence {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<TokenTag>,
}

impl TrainSentence {
    /// Tags every token of a visible trigger span with its type. When spans
    /// overlap the first listed mention wins.
    pub fn from_sentence(s: &TokenizedSentence) -> Self {
        let mut tags = vec![TokenTag::Na; s.tokens.len()];
        for ev in &s.events {
            for i in ev.trigger.start..=ev.trigger.end.min(s.tokens.len().saturating_sub(1)) {
                if tags[i] == TokenTag::Na {
                    tags[i] = TokenTag::Gold {
                        event_type: ev.event_type.clone(),
                    };
                }
            }
        }
        Self {
            sentence_id: s.sentence_id.clone(),
            tokens: s.tokens.clone(),
            tags,
        }
    }

    /// Token-wise union with another view of the same sentence; gold beats
    /// pseudo beats NA, and the existing tag wins ties.
    pub fn merge(&mut self, other: &TrainSentence) {
        for (mine, theirs) in self.tags.iter_mut().zip(&other.tags) {
            if theirs.rank() > mine.rank() {
                *mine = theirs.clone();
            }
        }
    }

    pub fn gold_types(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().filter(|t| t.is_gold()).filter_map(TokenTag::event_type)
    }
}

/// Merges consecutive tokens with the same non-NA argmax into trigger spans.
pub fn decode_triggers(probs: &Matrix, labels: &LabelSpace) -> Vec<EventMention> {
    let mut out: Vec<EventMention> = Vec::new();
    let mut prev: Option<usize> = None;
    for r in 0..probs.rows() {
        let best = probs.argmax_row(r);
        if best == 0 {
            prev = None;
            continue;
        }
        match (prev, out.last_mut()) {
            (Some(p), Some(last)) if p == best && last.trigger.end + 1 == r => last.trigger.end = r,
            _ => out.push(EventMention {
                trigger: Span::single(r),
                event_type: labels.label(best).to_string(),
                arguments: Vec::new(),
            }),
        }
        prev = Some(best);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassifierIds {
    weight: ParamId,
    bias: ParamId,
}

/// Graph nodes of one detection forward pass.
pub struct DetectionTrace {
    pub encoder: EncoderTrace,
    /// Projected features `f` before any long-tail enhancement.
    pub features: Var,
    /// Distribution from the enhanced features; drives the classification loss.
    pub probs: Var,
    /// Distribution from `features`; equals `probs` without enhancement.
    pub clean_probs: Var,
}

/// Evaluation-mode outputs for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionView {
    pub features: Matrix,
    pub attentive: Matrix,
    pub probs: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    encoder: ToyEncoder,
    projector: FeatureProjector,
    classifier: ClassifierIds,
    label_space: LabelSpace,
    seed: u64,
}

const DETECTION_KIND: &str = "detection";

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionModel {
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub projector: FeatureProjector,
    classifier: ClassifierIds,
    label_space: LabelSpace,
    seed: u64,
}

impl DetectionModel {
    /// Fresh model whose classifier knows only `NA`.
    pub fn new(encoder_config: EncoderConfig, vocab: Vocab, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, &[tag("detection-init")]);
        let mut store = ParamStore::new();
        let dropout = encoder_config.dropout_rate;
        let d = encoder_config.d;
        let encoder = ToyEncoder::new(encoder_config, vocab, &mut store, "encoder", &mut rng)?;
        let projector = FeatureProjector::new(&mut store, "projector", d, feature_dim, dropout, &mut rng);
        let classifier = ClassifierIds {
            weight: store.add("classifier.weight", normal_matrix(&mut rng, 1, feature_dim, NEW_ROW_STD)),
            bias: store.add("classifier.bias", Matrix::zeros(1, 1)),
        };
        Ok(Self {
            store,
            encoder,
            projector,
            classifier,
            label_space: LabelSpace::default(),
            seed,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn feature_dim(&self) -> usize {
        self.projector.out_dim
    }

    pub fn attn_layers(&self) -> usize {
        self.encoder.config.attn_layers
    }

    pub fn classifier_params(&self) -> [ParamId; 2] {
        [self.classifier.weight, self.classifier.bias]
    }

    /// Appends rows for `new_types`; existing rows are left untouched.
    pub fn add_types(&mut self, new_types: &[String]) -> Result<()> {
        self.label_space.extend(new_types)?;
        let start = self.store.get(self.classifier.weight).rows();
        let mut rng = seeded(self.seed, &[tag("widen"), start as u64]);
        let h = self.feature_dim();
        let fresh = normal_matrix(&mut rng, new_types.len(), h, NEW_ROW_STD);

        let mut rows = self.store.get(self.classifier.weight).to_rows();
        rows.extend(fresh.to_rows());
        self.store.set(self.classifier.weight, Matrix::from_rows(&rows)?);
        let mut bias = self.store.get(self.classifier.bias).data().to_vec();
        bias.resize(bias.len() + new_types.len(), 0.0);
        self.store.set(self.classifier.bias, Matrix::row_vector(&bias));
        Ok(())
    }

    /// Records a forward pass. `rng` enables dropout; `noise` is added to the
    /// projected features before the classifier.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[String],
        mut rng: Option<&mut SeededRng>,
        noise: Option<&Matrix>,
    ) -> Result<DetectionTrace> {
        let encoder = self.encoder.forward(g, &self.store, tokens, rng.as_deref_mut())?;
        let features = self.projector.forward(g, &self.store, encoder.hidden, rng)?;
        let clean_probs = self.classify(g, features);
        let probs = match noise {
            Some(n) => {
                if n.shape() != g.value(features).shape() {
                    return Err(Error::Shape("noise does not match features".into()));
                }
                let c = g.constant(n.clone());
                let enhanced = g.add(features, c);
                self.classify(g, enhanced)
            }
            None => clean_probs,
        };
        Ok(DetectionTrace {
            encoder,
            features,
            probs,
            clean_probs,
        })
    }

    /// Linear softmax head over `[n × h]` features.
    pub fn classify(&self, g: &mut Graph, features: Var) -> Var {
        let w = g.param(&self.store, self.classifier.weight);
        let b = g.param(&self.store, self.classifier.bias);
        let logits = g.matmul_t(features, w);
        let logits = g.add_row(logits, b);
        g.softmax_rows(logits)
    }

    /// `P(· | x_j)` for every token, evaluation mode.
    pub fn classify_tokens(&self, tokens: &[String]) -> Result<Matrix> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, tokens, None, None)?;
        Ok(g.value(trace.probs).clone())
    }

    /// Features, attentive features and probabilities in evaluation mode.
    pub fn view(&self, tokens: &[String]) -> Result<DetectionView> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, tokens, None, None)?;
        let output = trace.encoder.output(&g);
        let features = g.value(trace.features).clone();
        let attn = context_attention(&output, self.attn_layers())?;
        let attentive = attentive_features(&features, &attn)?;
        Ok(DetectionView {
            features,
            attentive,
            probs: g.value(trace.probs).clone(),
        })
    }

    pub fn predict(&self, sentence: &TokenizedSentence) -> Result<PredictedSentence> {
        let probs = self.classify_tokens(&sentence.tokens)?;
        Ok(PredictedSentence {
            sentence_id: sentence.sentence_id.clone(),
            events: decode_triggers(&probs, &self.label_space),
        })
    }

    pub fn predict_all(&self, sentences: &[TokenizedSentence]) -> Result<Vec<PredictedSentence>> {
        sentences.iter().map(|s| self.predict(s)).collect()
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(Arc::new(self.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: DETECTION_KIND.into(),
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            classifier: self.classifier.clone(),
            label_space: self.label_space.clone(),
            seed: self.seed,
        };
        checkpoint::save(path, &serde_json::to_value(meta)?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load(path)?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let meta: ModelMeta = serde_json::from_value(meta).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.kind != DETECTION_KIND {
            return Err(bad(format!("expected a detection model, found {:?}", meta.kind)));
        }
        let w = meta.classifier.weight;
        if w.0 >= store.len() || store.get(w).rows() != meta.label_space.len() {
            return Err(bad("classifier does not match label space".into()));
        }
        Ok(Self {
            store,
            encoder: meta.encoder,
            projector: meta.projector,
            classifier: meta.classifier,
            label_space: meta.label_space,
            seed: meta.seed,
        })
    }
}

/// Frozen copy of a model, used as a distillation and pseudo-labeling teacher.
#[derive(Clone, Debug)]
pub struct ModelSnapshot(Arc<DetectionModel>);

impl Deref for ModelSnapshot {
    type Target = DetectionModel;

    fn deref(&self) -> &DetectionModel {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_model(seed: u64) -> DetectionModel {
        let words = ["a", "b", "c", "d", "fire", "wed", "die"];
        let vocab = Vocab::build(words.iter().copied());
        let cfg = EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d: 16,
            attn_layers: 2,
            ffn_dim: 16,
            seed,
            ..EncoderConfig::default()
        };
        DetectionModel::new(cfg, vocab, 8, seed).unwrap()
    }

    fn toks(w: &[&str]) -> Vec<String> {
        w.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut m = toy_model(1);
        m.add_types(&["X".into(), "Y".into(), "Z".into()]).unwrap();
        let [w, b] = m.classifier_params();
        let (r, c) = m.store.get(w).shape();
        m.store.set(w, Matrix::zeros(r, c));
        m.store.set(b, Matrix::zeros(1, r));
        let p = m.classify_tokens(&toks(&["a", "fire", "b"])).unwrap();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn widening_keeps_old_logits() {
        let mut m = toy_model(2);
        m.add_types(&["X".into(), "Y".into()]).unwrap();
        let tokens = toks(&["c", "wed", "d", "a"]);
        let logits = |m: &DetectionModel| {
            let mut g = Graph::new();
            let trace = m.forward(&mut g, &tokens, None, None).unwrap();
            let [w, b] = m.classifier_params();
            let w = g.param(&m.store, w);
            let b = g.param(&m.store, b);
            let l = g.matmul_t(trace.features, w);
            let l = g.add_row(l, b);
            g.value(l).clone()
        };
        let before = logits(&m);
        m.add_types(&["Z".into()]).unwrap();
        let after = logits(&m);
        assert_eq!(after.cols(), 4);
        for r in 0..before.rows() {
            assert_eq!(&after.row(r)[..3], before.row(r));
        }
        assert_eq!(m.label_space().types(), &["X", "Y", "Z"]);
        assert!(m.add_types(&["X".into()]).is_err());
    }

    #[test]
    fn rows_are_distributions() {
        let mut m = toy_model(3);
        m.add_types(&["X".into()]).unwrap();
        let p = m.classify_tokens(&toks(&["a", "b", "zzz"])).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_merges_adjacent_tokens() {
        let labels = {
            let mut l = LabelSpace::default();
            l.extend(&["A".into(), "B".into()]).unwrap();
            l
        };
        let probs = Matrix::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.7, 0.2],
            vec![0.1, 0.2, 0.7],
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
        ])
        .unwrap();
        let ev = decode_triggers(&probs, &labels);
        let got: Vec<_> = ev.iter().map(|e| (e.trigger, e.event_type.as_str())).collect();
        assert_eq!(
            got,
            vec![(Span::new(1, 2), "A"), (Span::new(3, 3), "B"), (Span::new(5, 5), "A")]
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = toy_model(4);
        m.add_types(&["X".into(), "Y".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = DetectionModel::load(&path).unwrap();
        assert_eq!(back, m);
        let t = toks(&["fire", "a"]);
        assert_eq!(back.classify_tokens(&t).unwrap(), m.classify_tokens(&t).unwrap());
    }

    #[test]
    fn train_sentence_tags_and_merge() {
        let s = TokenizedSentence {
            sentence_id: "s".into(),
            tokens: toks(&["a", "b", "c", "d"]),
            events: vec![EventMention {
                trigger: Span::new(1, 2),
                event_type: "X".into(),
                arguments: vec![],
            }],
            entities: vec![],
        };
        let mut t = TrainSentence::from_sentence(&s);
        assert_eq!(t.tags[0], TokenTag::Na);
        assert!(t.tags[1].is_gold() && t.tags[2].is_gold());
        let mut other = t.clone();
        other.tags[1] = TokenTag::Pseudo {
            event_type: "Y".into(),
            confidence: 0.9,
        };
        other.tags[3] = TokenTag::Pseudo {
            event_type: "Y".into(),
            confidence: 0.9,
        };
        t.merge(&other);
        assert!(t.tags[1].is_gold());
        assert!(t.tags[3].is_pseudo());
    }
}
