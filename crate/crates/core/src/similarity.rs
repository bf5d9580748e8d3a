//! Batch-level relational structure.
//!
//! A feature batch `X` (b×m) is summarized by its cosine-similarity matrix
//! `S = (X·Xᵀ) ⊘ (n·nᵀ)` with `n` the column of row norms. Distillation
//! compares a teacher and a student through a b×k slice of these matrices:
//! the k columns belonging to the batch's most isolated samples (anchors),
//! chosen in the teacher space and reused for the student.

use crate::error::{Error, Result};
use crate::features::FeatureBatch;
use crate::tensor::{Matrix, Tape, Var};

/// Whose representations a similarity matrix summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilaritySource {
    Teacher,
    Student,
}

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
    anchors: Option<Vec<usize>>,
    source: SimilaritySource,
}

impl SimilarityMatrix {
    /// Wrap a full b×b matrix, checking symmetry, unit diagonal and range.
    pub fn full(values: Matrix, source: SimilaritySource) -> Result<Self> {
        let b = values.rows();
        if values.cols() != b {
            return Err(Error::contract(format!(
                "full similarity matrix must be square, got {}x{}",
                b,
                values.cols()
            )));
        }
        for i in 0..b {
            if (values.get(i, i) - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::contract(format!(
                    "diagonal entry {i} is {}, expected 1",
                    values.get(i, i)
                )));
            }
            for j in 0..i {
                if (values.get(i, j) - values.get(j, i)).abs() > SYMMETRY_TOL {
                    return Err(Error::contract(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        if values.as_slice().iter().any(|v| v.abs() > 1.0 + SYMMETRY_TOL) {
            return Err(Error::contract("similarity outside [-1, 1]"));
        }
        Ok(Self {
            values,
            anchors: None,
            source,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Column indices kept by [`reduce_to_anchors`]; `None` for the full form.
    pub fn anchor_indices(&self) -> Option<&[usize]> {
        self.anchors.as_deref()
    }

    pub fn source(&self) -> SimilaritySource {
        self.source
    }

    pub fn is_full(&self) -> bool {
        self.anchors.is_none()
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }
}

/// Cosine-similarity matrix of the rows of `features`, recorded on `tape`.
pub fn cosine_similarity(tape: &mut Tape, features: Var) -> Result<Var> {
    let b = tape.value(features).rows();
    if b < 2 {
        return Err(Error::contract(format!("similarity needs at least 2 samples, got {b}")));
    }
    let xt = tape.transpose(features);
    let gram = tape.matmul(features, xt)?;
    let norms = tape.rowwise_l2norm(features)?;
    let norms_t = tape.transpose(norms);
    let outer = tape.matmul(norms, norms_t)?;
    tape.div(gram, outer)
}

pub fn cosine_similarity_matrix(features: &FeatureBatch, source: SimilaritySource) -> Result<SimilarityMatrix> {
    let mut tape = Tape::new();
    let x = tape.constant(features.values.clone());
    let s = cosine_similarity(&mut tape, x)?;
    let mut values = tape.value(s).clone();
    // Round-off can leave the diagonal a few ulps from 1 or entries a hair
    // beyond ±1; pin them so downstream invariants hold exactly.
    for i in 0..values.rows() {
        values.set(i, i, 1.0);
    }
    values.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    SimilarityMatrix::full(values, source)
}

/// The `k` samples whose summed similarity to the rest of the batch is
/// lowest, ordered by that sum (ties to the lower index).
pub fn select_anchors(teacher_sim: &SimilarityMatrix, k: usize) -> Result<Vec<usize>> {
    if !teacher_sim.is_full() {
        return Err(Error::contract("anchor selection needs a full similarity matrix"));
    }
    let b = teacher_sim.batch_size();
    if k == 0 || k > b {
        return Err(Error::Bounds { index: k, len: b });
    }
    Ok(rank_by_offdiagonal_sum(teacher_sim.values())
        .into_iter()
        .take(k)
        .collect())
}

fn rank_by_offdiagonal_sum(s: &Matrix) -> Vec<usize> {
    let sums: Vec<f64> = (0..s.rows())
        .map(|i| {
            s.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..s.rows()).collect();
    order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)));
    order
}

/// Sorted, deduplicated copy of `anchors`, validated against `len` columns.
fn canonical_anchors(anchors: &[usize], len: usize) -> Result<Vec<usize>> {
    let mut sorted = anchors.to_vec();
    sorted.sort_unstable();
    if let Some(&bad) = sorted.iter().find(|&&j| j >= len) {
        return Err(Error::Bounds { index: bad, len });
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("duplicate anchor index"));
    }
    if sorted.is_empty() {
        return Err(Error::contract("empty anchor set"));
    }
    Ok(sorted)
}

/// Keep only the anchor columns of a full similarity matrix.
///
/// Columns come out in increasing index order regardless of the order of
/// `anchors`; the reduced matrix records that order.
pub fn reduce_to_anchors(sim: &SimilarityMatrix, anchors: &[usize]) -> Result<SimilarityMatrix> {
    if !sim.is_full() {
        return Err(Error::contract("matrix is already reduced"));
    }
    let cols = canonical_anchors(anchors, sim.batch_size())?;
    let s = sim.values();
    let values = Matrix::from_fn(s.rows(), cols.len(), |i, j| s.get(i, cols[j]));
    Ok(SimilarityMatrix {
        values,
        anchors: Some(cols),
        source: sim.source,
    })
}

/// Tape counterpart of [`reduce_to_anchors`]; gradient flows only into the
/// kept columns. Returns the column order used.
pub fn reduce_on_tape(tape: &mut Tape, sim: Var, anchors: &[usize]) -> Result<(Var, Vec<usize>)> {
    let cols = canonical_anchors(anchors, tape.value(sim).cols())?;
    let v = tape.gather_cols(sim, &cols)?;
    Ok((v, cols))
}

/// Reduced similarity matrix rebuilt from a tape value, e.g. for dumps.
pub fn reduced_from_values(values: Matrix, anchors: Vec<usize>, source: SimilaritySource) -> Result<SimilarityMatrix> {
    let cols = canonical_anchors(&anchors, values.rows())?;
    if cols != anchors || values.cols() != anchors.len() {
        return Err(Error::contract("anchor list does not describe these columns"));
    }
    Ok(SimilarityMatrix {
        values,
        anchors: Some(anchors),
        source,
    })
}
