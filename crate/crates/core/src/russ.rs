//! Reliable unlabeled sample selection.
//!
//! Each unlabeled sample is scored by how stable the model's class-probability
//! vector stays across its augmented copies: the negated sum over classes of
//! the per-class standard deviation. Within a batch the `q` highest-scoring
//! samples are kept, with `q` ramped up over training.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::network::ProbabilityMap;
use crate::tensor::Real;

/// Scores of one unlabeled sample under both models.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRecord {
    pub sample_id: String,
    /// `M × K` per-copy class-probability vectors of the student.
    pub probs_student: Vec<Vec<f64>>,
    pub probs_teacher: Vec<Vec<f64>>,
    pub cons_student: f64,
    pub cons_teacher: f64,
}

impl ConsistencyRecord {
    pub fn new(
        sample_id: impl Into<String>,
        probs_student: Vec<Vec<f64>>,
        probs_teacher: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let cons_student = consistency_score(&probs_student)?;
        let cons_teacher = consistency_score(&probs_teacher)?;
        Ok(Self {
            sample_id: sample_id.into(),
            probs_student,
            probs_teacher,
            cons_student,
            cons_teacher,
        })
    }

    /// Ranking key: both models' scores summed.
    pub fn combined_score(&self) -> f64 {
        self.cons_student + self.cons_teacher
    }
}

/// Spatial average of each class's probability.
pub fn class_probability_vector(map: &ProbabilityMap) -> Vec<f64> {
    let values: Vec<f32> = map.0.iter().copied().collect();
    class_vector_of(&values, map.n_classes())
}

/// Same reduction over a flat `(k, h·w)` block.
pub(crate) fn class_vector_of<T: Real>(block: &[T], n_classes: usize) -> Vec<f64> {
    let p = block.len() / n_classes;
    (0..n_classes)
        .map(|k| {
            block[k * p..(k + 1) * p]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>()
                / p as f64
        })
        .collect()
}

/// `-Σ_j std_m(probs[m][j])` with the population standard deviation.
pub fn consistency_score(probs: &[Vec<f64>]) -> Result<f64> {
    let first = probs.first().ok_or_else(|| {
        Error::InvalidArgument("consistency score needs at least one copy".into())
    })?;
    let k = first.len();
    if probs.iter().any(|row| row.len() != k) {
        return Err(Error::ShapeMismatch(
            "probability vectors of different lengths".into(),
        ));
    }
    let m = probs.len() as f64;
    let mut total = 0.0;
    for j in 0..k {
        let column = probs.iter().map(|row| row[j]);
        let x0 = first[j];
        if probs.iter().all(|row| row[j] == x0) {
            continue;
        }
        let mean = column.clone().sum::<f64>() / m;
        let var = column.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        total += var.sqrt();
    }
    Ok(-total)
}

/// `clamp(round(b * exp(-(1 - epoch/total)^2)), 1, b)` for a 1-based `epoch`.
pub fn q_schedule(epoch: usize, total_epochs: usize, batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "q schedule needs a nonempty batch".into(),
        ));
    }
    if epoch == 0 || epoch > total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 1..={total_epochs}"
        )));
    }
    let ratio = epoch as f64 / total_epochs as f64;
    let q = (batch_size as f64 * (-(1.0 - ratio).powi(2)).exp()).round() as usize;
    Ok(q.clamp(1, batch_size))
}

/// Outcome of top-`q` selection over one batch, in batch order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub sample_ids: Vec<String>,
    pub selected: Vec<bool>,
    pub q_used: usize,
}

impl SelectionMask {
    /// Every sample selected, as when selection is disabled.
    pub fn all(sample_ids: Vec<String>) -> Self {
        let n = sample_ids.len();
        Self {
            sample_ids,
            selected: vec![true; n],
            q_used: n,
        }
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn selected_ids(&self) -> Vec<String> {
        self.selected_indices()
            .into_iter()
            .map(|i| self.sample_ids[i].clone())
            .collect()
    }
}

fn rank_order(a: &ConsistencyRecord, b: &ConsistencyRecord) -> Ordering {
    b.combined_score()
        .total_cmp(&a.combined_score())
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Keeps the `q` records with the largest combined score; ties go to the
/// smaller sample id.
pub fn select(records: &[ConsistencyRecord], q: usize) -> Result<SelectionMask> {
    if q == 0 || q > records.len() {
        return Err(Error::InvalidArgument(format!(
            "q = {q} outside 1..={}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| rank_order(&records[i], &records[j]));
    let mut selected = vec![false; records.len()];
    for &i in &order[..q] {
        selected[i] = true;
    }
    Ok(SelectionMask {
        sample_ids: records.iter().map(|r| r.sample_id.clone()).collect(),
        selected,
        q_used: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn record(id: &str, score: f64) -> ConsistencyRecord {
        ConsistencyRecord {
            sample_id: id.into(),
            probs_student: vec![],
            probs_teacher: vec![],
            cons_student: score,
            cons_teacher: 0.0,
        }
    }

    #[test]
    fn class_vector_examples() {
        let uniform = ProbabilityMap(Array3::from_elem((2, 4, 4), 0.5));
        assert_eq!(class_probability_vector(&uniform), vec![0.5, 0.5]);
        let quarter = ProbabilityMap(Array3::from_shape_fn((2, 4, 4), |(k, r, _)| {
            let fg = r == 0;
            if (k == 1) == fg {
                1.0
            } else {
                0.0
            }
        }));
        assert_eq!(class_probability_vector(&quarter), vec![0.75, 0.25]);
    }

    #[test]
    fn score_examples() {
        assert_eq!(consistency_score(&vec![vec![0.7, 0.3]; 3]).unwrap(), 0.0);
        assert_eq!(
            consistency_score(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            -1.0
        );
        assert!(consistency_score(&[]).is_err());
    }

    #[test]
    fn q_schedule_examples() {
        assert_eq!(q_schedule(200, 200, 10).unwrap(), 10);
        assert_eq!(q_schedule(1, 200, 10).unwrap(), 4);
        assert_eq!(q_schedule(100, 200, 10).unwrap(), 8);
        assert!(q_schedule(1, 200, 0).is_err());
        assert!(q_schedule(0, 200, 4).is_err());
        assert_eq!(q_schedule(1, 1000, 1).unwrap(), 1);
    }

    #[test]
    fn select_examples() {
        let recs = vec![record("a", -0.1), record("b", -0.5), record("c", -0.01)];
        let mask = select(&recs, 1).unwrap();
        assert_eq!(mask.selected, vec![false, false, true]);
        assert_eq!(mask.q_used, 1);
        let same = vec![record("x", -0.2); 4];
        assert!(select(&same, 4).unwrap().selected.iter().all(|&s| s));
        assert!(select(&recs, 0).is_err());
        assert!(select(&recs, 4).is_err());
    }

    #[test]
    fn ties_break_by_sample_id() {
        let recs = vec![record("s2", -0.3), record("s1", -0.3), record("s3", -0.3)];
        assert_eq!(
            select(&recs, 2).unwrap().selected_ids(),
            vec!["s2".to_string(), "s1".to_string()]
        );
    }
}
