//! Confidence-thresholded pseudo labels for tokens whose gold was masked.

use serde::{Deserialize, Serialize};

use super::{DetectionModel, LabelSpace, TokenTag, TrainSentence};
use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::memory::MemoryStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub tau: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { tau: 0.8 }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Audit record of one assigned pseudo label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sentence_id: String,
    pub token: usize,
    pub event_type: String,
    pub confidence: f64,
}

/// Relabels NA tokens whose best non-NA probability reaches `tau`. Gold and
/// existing pseudo tags are left alone. Returns `(token, type, confidence)`
/// for each new label.
pub fn pseudo_label_tags(
    probs: &Matrix,
    labels: &LabelSpace,
    tags: &mut [TokenTag],
    tau: f64,
) -> Result<Vec<(usize, String, f64)>> {
    if probs.rows() != tags.len() || probs.cols() != labels.len() {
        return Err(Error::Shape(format!(
            "probabilities {:?} for {} tokens and {} labels",
            probs.shape(),
            tags.len(),
            labels.len()
        )));
    }
    let mut added = Vec::new();
    for (r, tag) in tags.iter_mut().enumerate() {
        if *tag != TokenTag::Na {
            continue;
        }
        let row = probs.row(r);
        let Some((best, &conf)) = row
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        if conf >= tau {
            let event_type = labels.label(best).to_string();
            *tag = TokenTag::Pseudo {
                event_type: event_type.clone(),
                confidence: conf,
            };
            added.push((r, event_type, conf));
        }
    }
    Ok(added)
}

fn label_sentence(s: &mut TrainSentence, model: &DetectionModel, tau: f64) -> Result<Vec<PseudoLabel>> {
    let probs = model.classify_tokens(&s.tokens)?;
    let added = pseudo_label_tags(&probs, model.label_space(), &mut s.tags, tau)?;
    Ok(added
        .into_iter()
        .map(|(token, event_type, confidence)| PseudoLabel {
            sentence_id: s.sentence_id.clone(),
            token,
            event_type,
            confidence,
        })
        .collect())
}

/// Copy of `data` with teacher pseudo labels on confident NA tokens.
pub fn augment_with_pseudo_labels(
    data: &[TrainSentence],
    teacher: &DetectionModel,
    tau: f64,
) -> Result<(Vec<TrainSentence>, Vec<PseudoLabel>)> {
    let mut out = data.to_vec();
    let mut audit = Vec::new();
    for s in &mut out {
        audit.extend(label_sentence(s, teacher, tau)?);
    }
    debug_assert!(data
        .iter()
        .zip(&out)
        .all(|(a, b)| a.tags.iter().zip(&b.tags).all(|(x, y)| !x.is_gold() || x == y)));
    Ok((out, audit))
}

/// Applies the same rule to every stored exemplar using the just-trained model.
pub fn relabel_memory(memory: &mut MemoryStore, model: &DetectionModel, tau: f64) -> Result<Vec<PseudoLabel>> {
    let mut audit = Vec::new();
    for ex in memory.exemplars_mut() {
        audit.extend(label_sentence(&mut ex.sentence, model, tau)?);
    }
    Ok(audit)
}
