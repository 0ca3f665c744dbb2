//! Dense linear algebra for basis accumulation and projection.
//!
//! Every probe rowspace is orthogonalized against the directions already
//! accumulated, so the stored basis is orthonormal and the removal projector
//! `I - QᵀQ` and the retention projector `QᵀQ` are exact complements.
//! Arithmetic is `f64` throughout.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative drop tolerance for candidates that are numerically dependent on
/// the accumulated span.
pub const DROP_RELATIVE: f64 = 1e-8;
/// Absolute drop tolerance on the residual norm.
pub const DROP_ABSOLUTE: f64 = 1e-10;

/// An `n × d` matrix of encoded examples, one example per row.
///
/// Entries are finite and both dimensions are positive. The matrix is never
/// mutated in place; projections return new matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    data: Array2<f64>,
}

impl RepresentationMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::input(format!(
                "representation matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite entry at row {}, col {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { data })
    }

    pub fn from_shape_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::input(format!("bad matrix shape {rows}x{cols}: {e}")))?;
        Self::new(data)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::input(format!(
                    "row {i} has length {}, expected {cols}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_shape_vec(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows()) {
            return Err(Error::input(format!(
                "row index {bad} out of range for {} rows",
                self.rows()
            )));
        }
        Self::new(self.data.select(Axis(0), indices))
    }

    // Internal constructor for results of arithmetic on valid matrices.
    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }
}

/// Ordered orthonormal directions accumulated over successive probe steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatedBasis {
    dim: usize,
    directions: Array2<f64>,
    /// Exclusive end offset of each step's group of directions.
    step_ends: Vec<usize>,
}

impl AccumulatedBasis {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            directions: Array2::zeros((0, dim)),
            step_ends: Vec::new(),
        }
    }

    /// Builds a basis by feeding each group of rows through [`extend_basis`]
    /// in order. Groups that contribute nothing leave no step behind.
    pub fn from_groups<R: AsRef<[f64]>>(dim: usize, groups: &[Vec<R>]) -> Result<Self> {
        let mut basis = Self::empty(dim);
        for group in groups {
            let candidates: Vec<Array1<f64>> = group
                .iter()
                .map(|r| Array1::from(r.as_ref().to_vec()))
                .collect();
            basis = extend_basis(&basis, &candidates)?;
        }
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of accumulated directions, `k`.
    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `k × d` matrix of unit rows.
    pub fn directions(&self) -> ArrayView2<'_, f64> {
        self.directions.view()
    }

    pub fn direction(&self, i: usize) -> ArrayView1<'_, f64> {
        self.directions.row(i)
    }

    pub fn step_count(&self) -> usize {
        self.step_ends.len()
    }

    pub fn step_ends(&self) -> &[usize] {
        &self.step_ends
    }

    /// Index range of the directions contributed by each step.
    pub fn step_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.step_ends
            .iter()
            .map(|&end| {
                let r = start..end;
                start = end;
                r
            })
            .collect()
    }

    /// The basis restricted to its first `steps` step groups.
    pub fn prefix(&self, steps: usize) -> Self {
        let steps = steps.min(self.step_count());
        let k = if steps == 0 {
            0
        } else {
            self.step_ends[steps - 1]
        };
        Self {
            dim: self.dim,
            directions: self.directions.slice(ndarray::s![..k, ..]).to_owned(),
            step_ends: self.step_ends[..steps].to_vec(),
        }
    }

    /// The basis restricted to its first `k` directions, one step per direction.
    pub fn first_directions(&self, k: usize) -> Self {
        let k = k.min(self.len());
        Self {
            dim: self.dim,
            directions: self.directions.slice(ndarray::s![..k, ..]).to_owned(),
            step_ends: (1..=k).collect(),
        }
    }

    /// Largest absolute deviation of the Gram matrix from the identity.
    pub fn gram_deviation(&self) -> f64 {
        let gram = self.directions.dot(&self.directions.t());
        gram.indexed_iter()
            .map(|((i, j), &g)| (g - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }
}

/// Shared-directionality score in `[0, 1]`: 0 for orthogonal, 1 for contained.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AlignmentScore(f64);

impl AlignmentScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::input(format!("alignment {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Appends the orthonormalized residue of `candidates` to `basis` as one new
/// step.
///
/// Each candidate is orthogonalized against every direction already present
/// (including ones added earlier in this call) by two passes of modified
/// Gram–Schmidt. Candidates whose residual norm falls below
/// `max(DROP_RELATIVE * |c|, DROP_ABSOLUTE)` are dropped. A step boundary is
/// recorded only if at least one direction survives.
pub fn extend_basis(
    basis: &AccumulatedBasis,
    candidates: &[Array1<f64>],
) -> Result<AccumulatedBasis> {
    let dim = basis.dim;
    for (i, c) in candidates.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::dims("extend_basis candidate", dim, c.len()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("candidate {i} has non-finite entries")));
        }
    }

    let mut rows: Vec<Array1<f64>> = basis.directions.outer_iter().map(|r| r.to_owned()).collect();
    let before = rows.len();
    for c in candidates {
        let original = c.dot(c).sqrt();
        let mut v = c.clone();
        for _ in 0..2 {
            for q in &rows {
                let coef = q.dot(&v);
                v.scaled_add(-coef, q);
            }
        }
        let residual = v.dot(&v).sqrt();
        if residual < (DROP_RELATIVE * original).max(DROP_ABSOLUTE) || rows.len() >= dim {
            continue;
        }
        v /= residual;
        rows.push(v);
    }

    let mut step_ends = basis.step_ends.clone();
    if rows.len() > before {
        step_ends.push(rows.len());
    }
    let mut directions = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in directions.outer_iter_mut().zip(&rows) {
        dst.assign(src);
    }
    Ok(AccumulatedBasis {
        dim,
        directions,
        step_ends,
    })
}

fn check_dims(x: &RepresentationMatrix, basis: &AccumulatedBasis, ctx: &'static str) -> Result<()> {
    if x.cols() != basis.dim {
        return Err(Error::dims(ctx, basis.dim, x.cols()));
    }
    Ok(())
}

/// Component of every row inside span(basis).
fn span_component(x: &RepresentationMatrix, basis: &AccumulatedBasis) -> Array2<f64> {
    if basis.is_empty() {
        return Array2::zeros(x.data.raw_dim());
    }
    let coefs = x.data.dot(&basis.directions.t());
    coefs.dot(&basis.directions)
}

/// Removes from every row its orthogonal projection onto span(basis).
pub fn amnesic_project(
    x: &RepresentationMatrix,
    basis: &AccumulatedBasis,
) -> Result<RepresentationMatrix> {
    check_dims(x, basis, "amnesic_project")?;
    if basis.is_empty() {
        return Ok(x.clone());
    }
    let kept = span_component(x, basis);
    Ok(RepresentationMatrix::from_array_unchecked(&x.data - &kept))
}

/// Keeps only the orthogonal projection of every row onto span(basis).
pub fn mnestic_project(
    x: &RepresentationMatrix,
    basis: &AccumulatedBasis,
) -> Result<RepresentationMatrix> {
    check_dims(x, basis, "mnestic_project")?;
    Ok(RepresentationMatrix::from_array_unchecked(span_component(x, basis)))
}

/// `|proj_span(basis) v| / |v|`.
pub fn subspace_alignment(v: ArrayView1<'_, f64>, basis: &AccumulatedBasis) -> Result<AlignmentScore> {
    if v.len() != basis.dim {
        return Err(Error::dims("subspace_alignment", basis.dim, v.len()));
    }
    let norm = v.dot(&v).sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::input("alignment of a zero or non-finite vector"));
    }
    if basis.is_empty() {
        return AlignmentScore::new(0.0);
    }
    let coefs = basis.directions.dot(&v);
    let inside = coefs.dot(&coefs).sqrt();
    AlignmentScore::new((inside / norm).clamp(0.0, 1.0))
}
