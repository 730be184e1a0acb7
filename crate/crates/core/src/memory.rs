//! Experience replay: per-type exemplar stores filled by k-means selection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Span, NA};
use crate::detection::TrainSentence;
use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_RESTARTS: u64 = 4;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Picks at most `m` representatives: all instances when there are no more
/// than `m`, otherwise the instance nearest each of `m` k-means centroids
/// (best of a few seeded restarts by inertia).
/// Returned indices are sorted.
pub fn select_exemplars(features: &[Vec<f64>], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no instances to select from".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if n <= m {
        return Ok((0..n).collect());
    }

    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = seeded(seed, &[n as u64, m as u64, restart]);
        let (centroids, assign) = kmeans(features, m, &mut rng);
        let inertia: f64 = features
            .iter()
            .zip(&assign)
            .map(|(f, &c)| sq_dist(f, &centroids[c]))
            .sum();
        if best.as_ref().is_none_or(|(b, _, _)| inertia < *b) {
            best = Some((inertia, centroids, assign));
        }
    }
    let (_, centroids, assign) = best.expect("at least one restart");

    let mut chosen = vec![false; n];
    let mut picked = Vec::with_capacity(m);
    for (c, centroid) in centroids.iter().enumerate() {
        // Cluster members first; an emptied cluster falls back to any unpicked instance.
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c && !chosen[i]).collect();
        let pool: Vec<usize> = if members.is_empty() {
            (0..n).filter(|&i| !chosen[i]).collect()
        } else {
            members
        };
        let mut best: Option<(usize, f64)> = None;
        for i in pool {
            let d = sq_dist(&features[i], centroid);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            chosen[i] = true;
            picked.push(i);
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Lloyd iterations from a D²-weighted choice of distinct data points.
fn kmeans(features: &[Vec<f64>], m: usize, rng: &mut SeededRng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = features.len();
    let dim = features[0].len();
    let mut picked = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &features[picked[0]])).collect();
    while picked.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut choice = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    choice = i;
                    break;
                }
                target -= d;
            }
            if picked.contains(&choice) {
                (0..n).find(|i| !picked.contains(i)).expect("n > m")
            } else {
                choice
            }
        } else {
            // duplicates only: any unpicked index
            (0..n).find(|i| !picked.contains(i)).expect("n > m")
        };
        picked.push(next);
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(f, &features[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = picked.iter().map(|&i| features[i].clone()).collect();

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        for (i, f) in features.iter().enumerate() {
            assign[i] = nearest(f, &centroids);
        }
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (i, f) in features.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..m {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if movement < KMEANS_TOL {
            break;
        }
    }
    for (i, f) in features.iter().enumerate() {
        assign[i] = nearest(f, &centroids);
    }
    (centroids, assign)
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(f, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// A stored detection instance: the trigger reference plus a frozen copy of
/// the sentence's token labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sentence_id: String,
    pub trigger: Span,
    pub event_type: String,
    pub sentence: TrainSentence,
}

/// Per-type bounded store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore<E> {
    capacity: usize,
    entries: BTreeMap<String, Vec<E>>,
}

pub type MemoryStore = ExemplarStore<Exemplar>;

impl<E> ExemplarStore<E> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, event_type: &str) -> Option<&[E]> {
        self.entries.get(event_type).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[E])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn exemplars_mut(&mut self) -> impl Iterator<Item = &mut E> {
        self.entries.values_mut().flatten()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds the selections of a new stage; existing types are never touched.
    pub fn update(&mut self, selections: BTreeMap<String, Vec<E>>) -> Result<()> {
        for (t, exemplars) in &selections {
            if t == NA {
                return Err(Error::InvalidArgument("negative instances are not stored".into()));
            }
            if self.entries.contains_key(t) {
                return Err(Error::InvalidArgument(format!("type {t:?} already in memory")));
            }
            if exemplars.len() > self.capacity {
                return Err(Error::InvalidArgument(format!(
                    "{} exemplars for {t:?} exceed capacity {}",
                    exemplars.len(),
                    self.capacity
                )));
            }
        }
        self.entries.extend(selections);
        Ok(())
    }
}

impl<E: Serialize + for<'de> Deserialize<'de>> ExemplarStore<E> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

impl MemoryStore {
    /// Stored sentences merged by id, for replay.
    pub fn training_sentences(&self) -> Vec<TrainSentence> {
        let mut merged: BTreeMap<&str, TrainSentence> = BTreeMap::new();
        for ex in self.entries.values().flatten() {
            merged
                .entry(ex.sentence_id.as_str())
                .and_modify(|s| s.merge(&ex.sentence))
                .or_insert_with(|| ex.sentence.clone());
        }
        merged.into_values().collect()
    }
}
