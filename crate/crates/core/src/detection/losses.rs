//! Classification, attention-feature distillation, selective prediction
//! distillation and their weighted combination.
//!
//! The `*_sum` functions record summed losses on a graph; the plain
//! functions are the evaluated means over a token set.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var, LOG_CLAMP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// `−Σ_x log P(gold_x | x)`.
pub fn cls_loss_sum(g: &mut Graph, probs: Var, gold: &[usize]) -> Result<Var> {
    let p = g.value(probs);
    let (rows, cols) = p.shape();
    if gold.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} tokens", gold.len())));
    }
    let mut onehot = Matrix::zeros(rows, cols);
    for (r, &y) in gold.iter().enumerate() {
        if y >= cols {
            return Err(Error::InvalidArgument(format!("label {y} outside {cols} classes")));
        }
        if p.get(r, y) < LOG_CLAMP {
            warn!("gold probability {:e} clamped at token {r}", p.get(r, y));
        }
        onehot.set(r, y, 1.0);
    }
    let y = g.constant(onehot);
    let logp = g.ln(probs);
    let picked = g.mul(y, logp);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0))
}

pub fn classification_loss(probs: &Matrix, gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::InvalidArgument("empty token set".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = cls_loss_sum(&mut g, p, gold)?;
    Ok(g.scalar(l) / gold.len() as f64)
}

/// `Σ_x (1 − cos(A_x^student, A_x^teacher))`.
pub fn afd_loss_sum(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let (s, t) = (g.value(student), g.value(teacher));
    if s.shape() != t.shape() {
        return Err(Error::Shape(format!("attentive features {:?} vs {:?}", s.shape(), t.shape())));
    }
    let zero_norm = (0..s.rows())
        .filter(|&r| s.row(r).iter().all(|&v| v == 0.0) || t.row(r).iter().all(|&v| v == 0.0))
        .count();
    if zero_norm > 0 {
        warn!("{zero_norm} zero-norm attentive feature rows; cosine taken as 0");
    }
    let n = s.rows() as f64;
    let cos = g.cosine_rows(student, teacher);
    let total = g.sum_all(cos);
    let neg = g.scale(total, -1.0);
    Ok(g.add_scalar(neg, n))
}

pub fn afd_loss(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    if student.rows() == 0 {
        return Err(Error::InvalidArgument("empty token set".into()));
    }
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let l = afd_loss_sum(&mut g, s, t)?;
    Ok(g.scalar(l) / student.rows() as f64)
}

/// `−Σ_{x ∈ rows} Σ_{e prev} P_T(e|x) log P_S(e|x)` over the previous-type
/// columns `1..teacher.cols()`, with student probabilities read from its full
/// softmax. NA carries no teacher weight.
pub fn spd_loss_sum(g: &mut Graph, student_probs: Var, teacher_probs: &Matrix, rows: &[usize]) -> Result<Var> {
    let s = g.value(student_probs);
    let n_prev = teacher_probs.cols().saturating_sub(1);
    if s.rows() != teacher_probs.rows() {
        return Err(Error::Shape("student and teacher cover different tokens".into()));
    }
    if s.cols() < teacher_probs.cols() {
        return Err(Error::Shape("student label space smaller than teacher's".into()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= s.rows()) {
        return Err(Error::InvalidArgument(format!("token {r} out of range")));
    }
    if n_prev == 0 || rows.is_empty() {
        return Ok(g.constant(Matrix::zeros(1, 1)));
    }
    let mut weights = Matrix::zeros(rows.len(), n_prev);
    for (i, &r) in rows.iter().enumerate() {
        weights.row_mut(i).copy_from_slice(&teacher_probs.row(r)[1..]);
    }
    let picked = g.gather_rows(student_probs, rows);
    let prev = g.slice_cols(picked, 1, n_prev);
    let logp = g.ln(prev);
    let w = g.constant(weights);
    let weighted = g.mul(w, logp);
    let cross = g.sum_all(weighted);
    Ok(g.scale(cross, -1.0))
}

pub fn spd_loss(student_probs: &Matrix, teacher_probs: &Matrix, rows: &[usize]) -> Result<f64> {
    if teacher_probs.cols() <= 1 {
        return Ok(0.0);
    }
    if rows.is_empty() {
        debug!("no tokens outside the new types; prediction distillation is 0");
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let s = g.constant(student_probs.clone());
    let l = spd_loss_sum(&mut g, s, teacher_probs, rows)?;
    Ok(g.scalar(l) / rows.len() as f64)
}

/// `ρ = |Ẽ_{i−1}| / |Ẽ_i|`.
pub fn rho(n_prev_types: usize, n_seen_types: usize) -> Result<f64> {
    if n_prev_types > n_seen_types {
        return Err(Error::InvalidArgument(format!(
            "{n_prev_types} previous types exceed {n_seen_types} seen types"
        )));
    }
    if n_seen_types == 0 {
        return Ok(0.0);
    }
    Ok(n_prev_types as f64 / n_seen_types as f64)
}

/// `(1 − ρ)·l_cls + ρ·(α·l_afd + β·l_spd)`.
pub fn combined_loss(
    l_cls: f64,
    l_afd: f64,
    l_spd: f64,
    n_prev_types: usize,
    n_seen_types: usize,
    config: &DistillationConfig,
) -> Result<f64> {
    let r = rho(n_prev_types, n_seen_types)?;
    Ok((1.0 - r) * l_cls + r * (config.alpha * l_afd + config.beta * l_spd))
}

/// Graph form of [`combined_loss`]; `None` terms contribute nothing.
pub fn combined_loss_var(
    g: &mut Graph,
    l_cls: Var,
    l_afd: Option<Var>,
    l_spd: Option<Var>,
    n_prev_types: usize,
    n_seen_types: usize,
    config: &DistillationConfig,
) -> Result<Var> {
    let r = rho(n_prev_types, n_seen_types)?;
    let mut total = g.scale(l_cls, 1.0 - r);
    if let Some(a) = l_afd {
        let t = g.scale(a, r * config.alpha);
        total = g.add(total, t);
    }
    if let Some(s) = l_spd {
        let t = g.scale(s, r * config.beta);
        total = g.add(total, t);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_rows;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_probs(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = seeded(seed, &[]);
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        softmax_rows(&Matrix::from_vec(rows, cols, logits).unwrap())
    }

    #[test]
    fn classification_cases() {
        let onehot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(classification_loss(&onehot, &[0, 1]).unwrap(), 0.0);
        let uniform = Matrix::filled(3, 4, 0.25);
        assert!((classification_loss(&uniform, &[0, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = random_probs(1, 3, 3);
        let gold = [2, 0, 1];
        let oracle = -(p.get(0, 2).ln() + p.get(1, 0).ln() + p.get(2, 1).ln()) / 3.0;
        assert!((classification_loss(&p, &gold).unwrap() - oracle).abs() < 1e-9);
        assert!(classification_loss(&p, &[3, 0, 0]).is_err());
    }

    #[test]
    fn zero_probability_is_clamped() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l = classification_loss(&p, &[1]).unwrap();
        assert!((l - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn afd_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]).unwrap();
        assert!(afd_loss(&a, &a).unwrap().abs() < 1e-12);
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.0, 3.0], vec![-1.0, 0.0]]).unwrap();
        assert!((afd_loss(&s, &t).unwrap() - 1.0).abs() < 1e-12);

        let b = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]).unwrap();
        let cos = |x: &[f64], y: &[f64]| {
            let dot = x[0] * y[0] + x[1] * y[1];
            dot / ((x[0] * x[0] + x[1] * x[1]).sqrt() * (y[0] * y[0] + y[1] * y[1]).sqrt())
        };
        let oracle = ((1.0 - cos(a.row(0), b.row(0))) + (1.0 - cos(a.row(1), b.row(1)))) / 2.0;
        assert!((afd_loss(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    /// Scalar reference for prediction distillation.
    fn spd_oracle(student: &Matrix, teacher: &Matrix, rows: &[usize]) -> f64 {
        let mut total = 0.0;
        for &r in rows {
            for e in 1..teacher.cols() {
                total -= teacher.get(r, e) * student.get(r, e).ln();
            }
        }
        total / rows.len() as f64
    }

    /// Student rows carrying the teacher's previous-type mass, spread at random.
    fn same_mass_student(teacher: &Matrix, seed: u64, extra: usize) -> Matrix {
        let k = teacher.cols();
        let shape = random_probs(seed, teacher.rows(), k - 1);
        let rest = random_probs(seed + 1, teacher.rows(), 1 + extra);
        let mut out = Matrix::zeros(teacher.rows(), k + extra);
        for r in 0..teacher.rows() {
            let mass: f64 = (1..k).map(|e| teacher.get(r, e)).sum();
            for e in 1..k {
                out.set(r, e, mass * shape.get(r, e - 1));
            }
            out.set(r, 0, (1.0 - mass) * rest.get(r, 0));
            for j in 0..extra {
                out.set(r, k + j, (1.0 - mass) * rest.get(r, 1 + j));
            }
        }
        out
    }

    #[test]
    fn spd_cases() {
        // student has one extra new-type column
        let teacher = random_probs(2, 2, 3);
        let student = random_probs(3, 2, 4);
        let l = spd_loss(&student, &teacher, &[0, 1]).unwrap();
        assert!((l - spd_oracle(&student, &teacher, &[0, 1])).abs() < 1e-9);

        // only token 1 outside the new types
        let l = spd_loss(&student, &teacher, &[1]).unwrap();
        assert!((l - spd_oracle(&student, &teacher, &[1])).abs() < 1e-9);

        // hand case: −(0.2·ln 0.5 + 0.6·ln 0.25)
        let t = Matrix::from_rows(&[vec![0.2, 0.2, 0.6]]).unwrap();
        let s = Matrix::from_rows(&[vec![0.2, 0.5, 0.25, 0.05]]).unwrap();
        let hand = -(0.2 * 0.5f64.ln() + 0.6 * 0.25f64.ln());
        assert!((spd_loss(&s, &t, &[0]).unwrap() - hand).abs() < 1e-12);

        assert_eq!(spd_loss(&student, &teacher, &[]).unwrap(), 0.0);
        let stage_one = Matrix::filled(2, 1, 1.0);
        assert_eq!(spd_loss(&student, &stage_one, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn spd_minimum_at_teacher() {
        let teacher = random_probs(5, 3, 3);
        let own = spd_loss(&teacher, &teacher, &[0, 1, 2]).unwrap();
        let entropy = -(0..3)
            .map(|r| (1..3).map(|e| teacher.get(r, e) * teacher.get(r, e).ln()).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!((own - entropy).abs() < 1e-12);
        // how the remaining mass is split between NA and new types does not matter
        let mut student = same_mass_student(&teacher, 9, 2);
        for r in 0..3 {
            for e in 1..3 {
                student.set(r, e, teacher.get(r, e));
            }
        }
        assert!((spd_loss(&student, &teacher, &[0, 1, 2]).unwrap() - own).abs() < 1e-12);
    }

    #[test]
    fn combined_cases() {
        let cfg = DistillationConfig::default();
        assert_eq!(combined_loss(0.7, 5.0, 9.0, 0, 7, &cfg).unwrap(), 0.7);
        let c = combined_loss(0.6, 0.2, 0.3, 26, 33, &cfg).unwrap();
        let oracle = (7.0 / 33.0) * 0.6 + (26.0 / 33.0) * (0.2 + 0.3);
        assert!((c - oracle).abs() < 1e-12);
        let zero = DistillationConfig { alpha: 0.0, beta: 0.0 };
        let c = combined_loss(0.6, 0.2, 0.3, 26, 33, &zero).unwrap();
        assert!((c - (7.0 / 33.0) * 0.6).abs() < 1e-12);
        assert!(combined_loss(0.1, 0.1, 0.1, 5, 4, &cfg).is_err());
    }

    proptest::proptest! {
        #[test]
        fn spd_minimized_by_matching_teacher(seed in 0u64..300, student_seed in 300u64..600) {
            // Among students giving the previous types the teacher's total mass,
            // none beats the teacher itself.
            let teacher = random_probs(seed, 2, 3);
            let base = spd_loss(&teacher, &teacher, &[0, 1]).unwrap();
            let student = same_mass_student(&teacher, student_seed, 1);
            proptest::prop_assert!(spd_loss(&student, &teacher, &[0, 1]).unwrap() >= base - 1e-12);
        }
    }
}
