//! Per-type feature statistics and the long-tail enhancement they drive.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::{debug, warn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{cosine, Matrix};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Share of seen types (least frequent first) treated as long-tailed.
pub const LONG_TAIL_SHARE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub event_type: String,
    pub mu: Vec<f64>,
    /// Population standard deviation per dimension.
    pub sigma: Vec<f64>,
    pub count: usize,
}

/// Mean and population std of the feature vectors of one type.
pub fn compute_prototype(event_type: &str, features: &[Vec<f64>]) -> Result<Prototype> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no tokens of type {event_type:?}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let mut mu = vec![0.0; dim];
    for f in features {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mu) {
            *s += (v - m).powi(2);
        }
    }
    let sigma = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(Prototype {
        event_type: event_type.to_string(),
        mu,
        sigma,
        count: n,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub prototypes: BTreeMap<String, Prototype>,
}

impl PrototypeStore {
    pub fn insert(&mut self, p: Prototype) {
        self.prototypes.insert(p.event_type.clone(), p);
    }

    pub fn get(&self, event_type: &str) -> Option<&Prototype> {
        self.prototypes.get(event_type)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

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

/// `σ̃_e = Σ_{e' ≠ e} max(0, cos(μ_e, μ_e'))·σ_e'`.
pub fn associated_std(target: &Prototype, store: &PrototypeStore) -> Vec<f64> {
    let mut out = vec![0.0; target.mu.len()];
    let mut any = false;
    for (name, p) in &store.prototypes {
        if *name == target.event_type {
            continue;
        }
        let w = cosine(&target.mu, &p.mu).unwrap_or(0.0).max(0.0);
        if w > 0.0 {
            any = true;
            for (o, s) in out.iter_mut().zip(&p.sigma) {
                *o += w * s;
            }
        }
    }
    if !any {
        debug!("type {:?} has no positively associated prototype", target.event_type);
    }
    out
}

/// Independent zero-mean Gaussian draw with std `sigma[k]` per dimension.
pub fn sample_intensive_vector(sigma: &[f64], rng: &mut SeededRng) -> Vec<f64> {
    sigma
        .iter()
        .map(|&s| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect()
}

/// The `floor(0.8·n)` least frequent types; ties broken by name.
pub fn long_tail_types(counts: &BTreeMap<String, usize>) -> Vec<String> {
    let n_tail = (LONG_TAIL_SHARE * counts.len() as f64).floor() as usize;
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(n_tail).map(|(t, _)| t.clone()).collect()
}

/// Noise rows for one sentence: a fresh intensive sample for every token
/// whose type is in `assoc`, zeros elsewhere.
pub fn long_tail_noise(
    mask: &[Option<&str>],
    dim: usize,
    assoc: &HashMap<String, Vec<f64>>,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    let mut noise = Matrix::zeros(mask.len(), dim);
    for (r, t) in mask.iter().enumerate() {
        if let Some(t) = t {
            let sigma = assoc
                .get(*t)
                .ok_or_else(|| Error::InvalidArgument(format!("no prototype for long-tail type {t:?}")))?;
            if sigma.len() != dim {
                return Err(Error::Shape("associated std width".into()));
            }
            noise.row_mut(r).copy_from_slice(&sample_intensive_vector(sigma, rng));
        }
    }
    Ok(noise)
}

/// `f* = f + f̃_e` on tokens of long-tail types (`mask[j] = Some(type)`);
/// other rows are returned unchanged.
pub fn enhance_long_tail(
    features: &Matrix,
    mask: &[Option<&str>],
    prototypes: &PrototypeStore,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    if mask.len() != features.rows() {
        return Err(Error::Shape(format!("{} mask entries for {} tokens", mask.len(), features.rows())));
    }
    let mut assoc = HashMap::new();
    for t in mask.iter().flatten() {
        if !assoc.contains_key(*t) {
            let p = prototypes
                .get(t)
                .ok_or_else(|| Error::InvalidArgument(format!("no prototype for long-tail type {t:?}")))?;
            let s = associated_std(p, prototypes);
            if s.iter().all(|&v| v == 0.0) {
                warn!("associated std of {t:?} is zero; enhancement is a no-op");
            }
            assoc.insert(t.to_string(), s);
        }
    }
    let noise = long_tail_noise(mask, features.cols(), &assoc, rng)?;
    let mut out = features.clone();
    for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn proto(name: &str, mu: Vec<f64>, sigma: Vec<f64>) -> Prototype {
        Prototype {
            event_type: name.into(),
            mu,
            sigma,
            count: 1,
        }
    }

    #[test]
    fn prototype_cases() {
        let p = compute_prototype("A", &[vec![1.0, -2.0]]).unwrap();
        assert_eq!((p.mu.clone(), p.sigma.clone()), (vec![1.0, -2.0], vec![0.0, 0.0]));
        let p = compute_prototype("A", &[vec![1.5, -2.0], vec![-1.5, 2.0]]).unwrap();
        assert_eq!(p.mu, vec![0.0, 0.0]);
        assert_eq!(p.sigma, vec![1.5, 2.0]);
        assert!(compute_prototype("A", &[]).is_err());

        let mut rng = seeded(4, &[]);
        let fs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let p = compute_prototype("B", &fs).unwrap();
        for k in 0..3 {
            let mean = fs.iter().map(|f| f[k]).sum::<f64>() / 5.0;
            let var = fs.iter().map(|f| (f[k] - mean) * (f[k] - mean)).sum::<f64>() / 5.0;
            assert!((p.mu[k] - mean).abs() < 1e-9);
            assert!((p.sigma[k] - var.sqrt()).abs() < 1e-9);
        }
        assert_eq!(p.count, 5);
    }

    #[test]
    fn associated_std_cases() {
        let target = proto("T", vec![1.0, 0.0], vec![9.0, 9.0]);
        let mut store = PrototypeStore::default();
        store.insert(target.clone());
        assert_eq!(associated_std(&target, &store), vec![0.0, 0.0]);

        store.insert(proto("Same", vec![2.0, 0.0], vec![0.3, 0.7]));
        let s = associated_std(&target, &store);
        assert!((s[0] - 0.3).abs() < 1e-12 && (s[1] - 0.7).abs() < 1e-12);

        // three prototypes: one aligned at 45 degrees, one opposed (clamped out)
        store.insert(proto("Diag", vec![1.0, 1.0], vec![1.0, 2.0]));
        store.insert(proto("Opp", vec![-1.0, 0.2], vec![5.0, 5.0]));
        let s = associated_std(&target, &store);
        let w = 1.0 / 2f64.sqrt();
        assert!((s[0] - (0.3 + w * 1.0)).abs() < 1e-9);
        assert!((s[1] - (0.7 + w * 2.0)).abs() < 1e-9);
    }

    #[test]
    fn sampling_statistics() {
        let mut rng = seeded(10, &[]);
        let sigma = [1.0, 0.5, 2.0];
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_intensive_vector(&sigma, &mut rng)).collect();
        for (k, &s) in sigma.iter().enumerate() {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05 * s.max(1.0), "mean {mean}");
            assert!((var.sqrt() / s - 1.0).abs() < 0.05, "std {}", var.sqrt());
        }
        let mut a = seeded(3, &[]);
        let mut b = seeded(3, &[]);
        assert_eq!(sample_intensive_vector(&sigma, &mut a), sample_intensive_vector(&sigma, &mut b));
        assert_eq!(sample_intensive_vector(&[0.0; 4], &mut a), vec![0.0; 4]);
    }

    #[test]
    fn long_tail_rule() {
        let counts: BTreeMap<String, usize> = (0..168).map(|i| (format!("T{i:03}"), 1000 - i)).collect();
        let tail = long_tail_types(&counts);
        assert_eq!(tail.len(), 134);
        // least frequent first
        assert_eq!(tail[0], "T167");
        let tied: BTreeMap<String, usize> = [("b", 1), ("a", 1), ("c", 5), ("d", 9), ("e", 1)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        assert_eq!(long_tail_types(&tied), vec!["a", "b", "e", "c"]);
    }

    #[test]
    fn enhancement_identities() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut store = PrototypeStore::default();
        store.insert(proto("Rare", vec![1.0, 0.0], vec![0.0, 0.0]));
        store.insert(proto("Pop", vec![1.0, 0.1], vec![0.0, 0.0]));
        let mut rng = seeded(1, &[]);
        assert_eq!(enhance_long_tail(&f, &[None, None], &store, &mut rng).unwrap(), f);
        // zero associated std leaves features exactly unchanged
        assert_eq!(enhance_long_tail(&f, &[Some("Rare"), None], &store, &mut rng).unwrap(), f);

        store.insert(proto("Pop", vec![1.0, 0.1], vec![1.0, 1.0]));
        let out = enhance_long_tail(&f, &[Some("Rare"), None], &store, &mut rng).unwrap();
        assert_ne!(out.row(0), f.row(0));
        assert_eq!(out.row(1), f.row(1));
        assert!(enhance_long_tail(&f, &[Some("Missing"), None], &store, &mut rng).is_err());
    }
}
