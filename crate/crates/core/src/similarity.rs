//! Cosine similarity matrices and the threshold decision matrix.
//!
//! A zero vector has similarity 0.0 with everything, so an empty subtask
//! always falls below any positive threshold and goes back to the planner.

use serde::{Deserialize, Serialize};

use crate::vectorizer::FeatureVector;

/// Default alignment threshold. The value has no ground truth behind it and
/// is exposed through [`crate::orchestrator::OrchestratorConfig`].
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("skill registry is empty")]
    EmptyRegistry,
    #[error("{skills} skill ids given for {vectors} skill vectors")]
    IdCountMismatch { skills: usize, vectors: usize },
}

/// Row-major `rows × cols` matrix of cosine values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == m), "ragged rows");
        Self { rows: n, cols: m, values: rows.into_iter().flatten().collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `flags[i][j]` is true when the source similarity is strictly below the
/// threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMatrix {
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
}

impl DecisionMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i < self.rows && j < self.cols);
        self.flags[i * self.cols + j]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count_flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> Result<f64, SimilarityError> {
    if a.dimension() != b.dimension() {
        return Err(SimilarityError::DimensionMismatch { left: a.dimension(), right: b.dimension() });
    }
    if a.is_zero() || b.is_zero() {
        return Ok(0.0);
    }
    // Iterate the shorter support.
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small.entries().iter().map(|(&i, &w)| w * large.get(i)).sum();
    // sqrt(x * x) == x in IEEE arithmetic, so identical vectors give exactly 1.0.
    let value = dot / (squared_norm(a) * squared_norm(b)).sqrt();
    Ok(value.clamp(-1.0, 1.0))
}

/// Square matrix of subtask-vs-subtask similarities. The upper triangle is
/// computed and mirrored, so the result is exactly symmetric.
pub fn pairwise_matrix(vectors: &[FeatureVector]) -> Result<SimilarityMatrix, SimilarityError> {
    check_dimensions(vectors.iter())?;
    let n = vectors.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = cosine(&vectors[i], &vectors[j])?;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix { rows: n, cols: n, values })
}

/// Rectangular subtask-vs-skill matrix.
pub fn alignment_matrix(
    subtasks: &[FeatureVector],
    skills: &[FeatureVector],
) -> Result<SimilarityMatrix, SimilarityError> {
    check_dimensions(subtasks.iter().chain(skills))?;
    let mut values = Vec::with_capacity(subtasks.len() * skills.len());
    for s in subtasks {
        for k in skills {
            values.push(cosine(s, k)?);
        }
    }
    Ok(SimilarityMatrix { rows: subtasks.len(), cols: skills.len(), values })
}

pub fn decide(matrix: &SimilarityMatrix, threshold: f64) -> DecisionMatrix {
    assert!(threshold.is_finite(), "threshold must be finite");
    DecisionMatrix {
        rows: matrix.rows,
        cols: matrix.cols,
        flags: matrix.values.iter().map(|&v| v < threshold).collect(),
    }
}

fn squared_norm(v: &FeatureVector) -> f64 {
    v.entries().values().map(|w| w * w).sum()
}

fn check_dimensions<'a>(mut vs: impl Iterator<Item = &'a FeatureVector>) -> Result<(), SimilarityError> {
    let Some(first) = vs.next() else { return Ok(()) };
    for v in vs {
        if v.dimension() != first.dimension() {
            return Err(SimilarityError::DimensionMismatch { left: first.dimension(), right: v.dimension() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskAlignment {
    pub best_skill: String,
    pub best_score: f64,
    pub needs_decomposition: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub threshold: f64,
    pub matrix: SimilarityMatrix,
    pub subtasks: Vec<SubtaskAlignment>,
}

/// Best skill per subtask. Equal scores go to the lexicographically lowest
/// skill id. A subtask needs decomposition when its best score is below
/// `threshold`.
pub fn report(
    subtasks: &[FeatureVector],
    skill_ids: &[&str],
    skills: &[FeatureVector],
    threshold: f64,
) -> Result<AlignmentReport, SimilarityError> {
    if skills.is_empty() {
        return Err(SimilarityError::EmptyRegistry);
    }
    if skill_ids.len() != skills.len() {
        return Err(SimilarityError::IdCountMismatch { skills: skill_ids.len(), vectors: skills.len() });
    }
    let matrix = alignment_matrix(subtasks, skills)?;
    let subtasks = (0..matrix.rows())
        .map(|i| {
            let row = matrix.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] || (row[j] == row[best] && skill_ids[j] < skill_ids[best]) {
                    best = j;
                }
            }
            SubtaskAlignment {
                best_skill: skill_ids[best].to_owned(),
                best_score: row[best],
                needs_decomposition: row[best] < threshold,
            }
        })
        .collect();
    Ok(AlignmentReport { threshold, matrix, subtasks })
}
