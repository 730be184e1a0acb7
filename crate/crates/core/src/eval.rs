//! Micro-averaged scoring, per-stage reports and backward transfer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EventMention, Span, TokenizedSentence};
use crate::error::{Error, Result};

/// Model output for one sentence, in corpus format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedSentence {
    #[serde(rename = "id")]
    pub sentence_id: String,
    #[serde(default)]
    pub events: Vec<EventMention>,
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictedSentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictedSentence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, predictions: &[PredictedSentence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_pred: usize,
    pub n_gold: usize,
    pub n_correct: usize,
}

impl Prf {
    pub fn from_counts(n_correct: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(n_correct, n_pred);
        let recall = ratio(n_correct, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            n_pred,
            n_gold,
            n_correct,
        }
    }
}

fn align<'a>(
    predictions: &'a [PredictedSentence],
    gold: &[TokenizedSentence],
) -> Result<HashMap<&'a str, &'a PredictedSentence>> {
    let known: BTreeSet<&str> = gold.iter().map(|s| s.sentence_id.as_str()).collect();
    let mut by_id = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !known.contains(p.sentence_id.as_str()) {
            return Err(Error::Validation(format!(
                "prediction for unknown sentence {:?}",
                p.sentence_id
            )));
        }
        by_id.insert(p.sentence_id.as_str(), p);
    }
    Ok(by_id)
}

fn score<K: Ord>(
    predictions: &[PredictedSentence],
    gold: &[TokenizedSentence],
    keys: impl Fn(&[EventMention]) -> BTreeSet<K>,
) -> Result<Prf> {
    let by_id = align(predictions, gold)?;
    let (mut correct, mut n_pred, mut n_gold) = (0, 0, 0);
    for s in gold {
        let g = keys(&s.events);
        let p = by_id.get(s.sentence_id.as_str()).map(|p| keys(&p.events)).unwrap_or_default();
        correct += g.intersection(&p).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    Ok(Prf::from_counts(correct, n_pred, n_gold))
}

/// Trigger scoring restricted to types passing `keep`: a hit needs the exact
/// span and type.
pub fn detection_f1_where(
    predictions: &[PredictedSentence],
    gold: &[TokenizedSentence],
    keep: impl Fn(&str) -> bool,
) -> Result<Prf> {
    score(predictions, gold, |events| {
        events
            .iter()
            .filter(|e| keep(&e.event_type))
            .map(|e| (e.trigger, e.event_type.clone()))
            .collect::<BTreeSet<(Span, String)>>()
    })
}

pub fn detection_f1(predictions: &[PredictedSentence], gold: &[TokenizedSentence]) -> Result<Prf> {
    detection_f1_where(predictions, gold, |_| true)
}

/// Argument scoring over (event type, argument span, role) triples.
pub fn argument_f1_where(
    predictions: &[PredictedSentence],
    gold: &[TokenizedSentence],
    keep: impl Fn(&str) -> bool,
) -> Result<Prf> {
    score(predictions, gold, |events| {
        events
            .iter()
            .filter(|e| keep(&e.event_type))
            .flat_map(|e| {
                e.arguments
                    .iter()
                    .map(move |a| (e.event_type.clone(), a.span, a.role.clone()))
            })
            .collect::<BTreeSet<(String, Span, String)>>()
    })
}

pub fn argument_f1(predictions: &[PredictedSentence], gold: &[TokenizedSentence]) -> Result<Prf> {
    argument_f1_where(predictions, gold, |_| true)
}

/// Detection score over long-tail types only; `None` when the split holds no
/// gold mention of those types.
pub fn long_tail_slice(
    predictions: &[PredictedSentence],
    gold: &[TokenizedSentence],
    long_tail: &BTreeSet<String>,
) -> Result<Option<Prf>> {
    let prf = detection_f1_where(predictions, gold, |t| long_tail.contains(t))?;
    Ok((prf.n_gold > 0).then_some(prf))
}

/// Lower-triangular `F1[i][j]`: score on task `j` after stage `i` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Matrix {
    rows: Vec<Vec<f64>>,
}

impl F1Matrix {
    pub fn new(k: usize) -> Self {
        Self {
            rows: (1..=k).map(|i| vec![f64::NAN; i]).collect(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Shape(format!("row {} has {} entries", i + 1, r.len())));
            }
        }
        Ok(Self { rows })
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, stage: usize, task: usize, value: f64) -> Result<()> {
        if task == 0 || task > stage || stage > self.k() {
            return Err(Error::InvalidArgument(format!("entry ({stage}, {task}) outside the triangle")));
        }
        self.rows[stage - 1][task - 1] = value;
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows
            .get(stage.checked_sub(1)?)?
            .get(task.checked_sub(1)?)
            .copied()
            .filter(|v| !v.is_nan())
    }

    pub fn row(&self, stage: usize) -> &[f64] {
        &self.rows[stage - 1]
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().flatten().all(|v| !v.is_nan())
    }
}

/// Mean drop from the score right after learning each task to the final score.
pub fn bwt(m: &F1Matrix) -> Result<f64> {
    let k = m.k();
    if k < 2 {
        return Err(Error::InvalidArgument("backward transfer needs at least two stages".into()));
    }
    let mut total = 0.0;
    for i in 1..k {
        let last = m.get(k, i).ok_or_else(|| Error::NotReady(format!("F1[{k}][{i}] missing")))?;
        let first = m.get(i, i).ok_or_else(|| Error::NotReady(format!("F1[{i}][{i}] missing")))?;
        total += last - first;
    }
    Ok(total / (k - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub detection: Prf,
    pub arguments: Option<Prf>,
    pub long_tail: Option<Prf>,
    /// Gold trigger mentions per seen type in the stage's training view.
    pub type_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub f1_matrix: F1Matrix,
    pub bwt: Option<f64>,
    pub long_tail_types: Vec<String>,
}

impl RunReport {
    pub fn final_f1(&self) -> Option<f64> {
        self.stages.last().map(|s| s.detection.f1)
    }

    pub fn final_long_tail_f1(&self) -> Option<f64> {
        self.stages.last().and_then(|s| s.long_tail).map(|p| p.f1)
    }

    /// One row per stage and metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "metric", "precision", "recall", "f1"])?;
        for s in &self.stages {
            let mut row = |name: &str, p: &Prf| {
                w.write_record([
                    s.stage.to_string(),
                    name.to_string(),
                    format!("{:.6}", p.precision),
                    format!("{:.6}", p.recall),
                    format!("{:.6}", p.f1),
                ])
            };
            row("detection", &s.detection)?;
            if let Some(a) = &s.arguments {
                row("arguments", a)?;
            }
            if let Some(lt) = &s.long_tail {
                row("long_tail", lt)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Mean and population std of each named metric across runs.
pub fn aggregate(values: &BTreeMap<String, Vec<f64>>) -> BTreeMap<String, (f64, f64)> {
    values
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (k.clone(), (mean, var.sqrt()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ArgumentMention;

    fn ev(s: usize, e: usize, t: &str) -> EventMention {
        EventMention {
            trigger: Span::new(s, e),
            event_type: t.into(),
            arguments: vec![],
        }
    }

    fn sent(id: &str, events: Vec<EventMention>) -> TokenizedSentence {
        TokenizedSentence {
            sentence_id: id.into(),
            tokens: (0..8).map(|i| format!("w{i}")).collect(),
            events,
            entities: vec![],
        }
    }

    fn pred(id: &str, events: Vec<EventMention>) -> PredictedSentence {
        PredictedSentence {
            sentence_id: id.into(),
            events,
        }
    }

    #[test]
    fn three_gold_two_predicted_one_correct() {
        let gold = vec![
            sent("a", vec![ev(0, 0, "Attack"), ev(3, 3, "Die")]),
            sent("b", vec![ev(1, 2, "Marry")]),
        ];
        let preds = vec![pred("a", vec![ev(0, 0, "Attack")]), pred("b", vec![ev(1, 1, "Marry")])];
        let p = detection_f1(&preds, &gold).unwrap();
        assert_eq!((p.n_correct, p.n_pred, p.n_gold), (1, 2, 3));
        assert!((p.precision - 0.5).abs() < 1e-12);
        assert!((p.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let gold = vec![sent("a", vec![ev(0, 0, "X")])];
        let same: Vec<_> = gold.iter().map(|s| pred(&s.sentence_id, s.events.clone())).collect();
        assert_eq!(detection_f1(&same, &gold).unwrap().f1, 1.0);
        assert_eq!(detection_f1(&[], &gold).unwrap().f1, 0.0);
        assert!(detection_f1(&[pred("zzz", vec![])], &gold).is_err());
    }

    #[test]
    fn argument_triples_need_matching_type() {
        let arg = |s, e, r: &str| ArgumentMention {
            span: Span::new(s, e),
            role: r.into(),
        };
        let mut g1 = ev(2, 2, "Attack");
        g1.arguments = vec![arg(0, 1, "Attacker"), arg(4, 4, "Place")];
        let mut g2 = ev(1, 1, "Die");
        g2.arguments = vec![arg(3, 3, "Victim")];
        let gold = vec![sent("a", vec![g1]), sent("b", vec![g2])];

        let mut p1 = ev(2, 2, "Attack");
        p1.arguments = vec![arg(0, 1, "Attacker"), arg(5, 5, "Place")];
        // right span and role under the wrong event type
        let mut p2 = ev(1, 1, "Injure");
        p2.arguments = vec![arg(3, 3, "Victim")];
        let preds = vec![pred("a", vec![p1]), pred("b", vec![p2])];
        let p = argument_f1(&preds, &gold).unwrap();
        // 1 correct of 3 predicted and 3 gold
        assert_eq!((p.n_correct, p.n_pred, p.n_gold), (1, 3, 3));
        assert!((p.f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn long_tail_slice_counts_only_tail_type() {
        let gold = vec![
            sent("a", vec![ev(0, 0, "Pop"), ev(2, 2, "Rare")]),
            sent("b", vec![ev(1, 1, "Pop"), ev(3, 3, "Rare")]),
        ];
        let preds = vec![
            pred("a", vec![ev(0, 0, "Pop"), ev(2, 2, "Rare"), ev(5, 5, "Rare")]),
            pred("b", vec![ev(1, 1, "Pop")]),
        ];
        let tail: BTreeSet<String> = ["Rare".to_string()].into();
        let p = long_tail_slice(&preds, &gold, &tail).unwrap().unwrap();
        // Rare: 1 correct, 2 predicted, 2 gold
        assert_eq!((p.n_correct, p.n_pred, p.n_gold), (1, 2, 2));
        assert!((p.f1 - 0.5).abs() < 1e-12);

        let everything: BTreeSet<String> = ["Pop".to_string(), "Rare".to_string()].into();
        let all = long_tail_slice(&preds, &gold, &everything).unwrap().unwrap();
        assert_eq!(all, detection_f1(&preds, &gold).unwrap());

        let none: BTreeSet<String> = ["Other".to_string()].into();
        assert!(long_tail_slice(&preds, &gold, &none).unwrap().is_none());
    }

    #[test]
    fn bwt_by_substitution() {
        let m = F1Matrix::from_rows(vec![vec![0.8], vec![0.5, 0.9]]).unwrap();
        assert!((bwt(&m).unwrap() - (-0.3)).abs() < 1e-12);
        let flat = F1Matrix::from_rows(vec![vec![0.7], vec![0.7, 0.6], vec![0.7, 0.6, 0.9]]).unwrap();
        assert_eq!(bwt(&flat).unwrap(), 0.0);
        assert!(bwt(&F1Matrix::from_rows(vec![vec![0.5]]).unwrap()).is_err());
        assert!(bwt(&F1Matrix::new(3)).is_err());
    }

    #[test]
    fn aggregate_mean_and_std() {
        let mut v = BTreeMap::new();
        v.insert("f1".to_string(), vec![0.2, 0.4, 0.6]);
        let agg = aggregate(&v);
        let (mean, std) = agg["f1"];
        assert!((mean - 0.4).abs() < 1e-12);
        assert!((std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn order_invariant(perm_seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let gold: Vec<_> = (0..6).map(|i| sent(&format!("s{i}"), vec![ev(i % 4, i % 4, if i % 2 == 0 { "A" } else { "B" })])).collect();
            let preds: Vec<_> = (0..6).map(|i| pred(&format!("s{i}"), vec![ev(i % 3, i % 3, "A")])).collect();
            let base = detection_f1(&preds, &gold).unwrap();
            let mut rng = crate::rng::seeded(perm_seed, &[]);
            let mut g2 = gold.clone();
            let mut p2 = preds.clone();
            g2.shuffle(&mut rng);
            p2.shuffle(&mut rng);
            proptest::prop_assert_eq!(detection_f1(&p2, &g2).unwrap(), base);
        }

        #[test]
        fn micro_average_decomposes(split in 0usize..4) {
            let types = ["A", "B", "C", "D"];
            let gold: Vec<_> = (0..8).map(|i| sent(&format!("s{i}"), vec![ev(i % 5, i % 5, types[i % 4]), ev(6, 6, types[(i + 1) % 4])])).collect();
            let preds: Vec<_> = (0..8).map(|i| pred(&format!("s{i}"), vec![ev(i % 5, i % 5, types[(i / 2) % 4]), ev(7, 7, "A")])).collect();
            let tail: BTreeSet<String> = types[..split].iter().map(|s| s.to_string()).collect();
            let all = detection_f1(&preds, &gold).unwrap();
            let t = detection_f1_where(&preds, &gold, |x| tail.contains(x)).unwrap();
            let p = detection_f1_where(&preds, &gold, |x| !tail.contains(x)).unwrap();
            proptest::prop_assert_eq!(t.n_correct + p.n_correct, all.n_correct);
            proptest::prop_assert_eq!(t.n_gold + p.n_gold, all.n_gold);
            proptest::prop_assert_eq!(t.n_pred + p.n_pred, all.n_pred);
            let lo = t.recall.min(p.recall);
            let hi = t.recall.max(p.recall);
            proptest::prop_assert!(all.recall >= lo - 1e-12 && all.recall <= hi + 1e-12);
        }
    }
}
