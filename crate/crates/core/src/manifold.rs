//! Geometry of the unit sphere for row-constrained weight matrices.
//!
//! Every row of a norm-preserving matrix lives on `S^{d-1}`. Gradients are
//! moved into the tangent space with [`project_tangent`] and updated points
//! are pulled back onto the sphere with [`retract`]. All operations act on
//! one row at a time.

use crate::error::{Error, Result};
use crate::numcore::{dot, norm, Matrix, RngStream};

/// Tolerance on `‖w‖ − 1` accepted as input.
pub const UNIT_TOL_INPUT: f64 = 1e-9;
/// Tolerance on `‖w‖ − 1` guaranteed on output.
pub const UNIT_TOL_OUTPUT: f64 = 1e-12;

fn check_unit(w: &[f64], context: &str) -> Result<()> {
    let n = norm(w);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL_INPUT {
        return Err(Error::contract(format!(
            "{context}: ‖w‖ = {n}, expected 1 ± {UNIT_TOL_INPUT}"
        )));
    }
    Ok(())
}

/// Removes the radial component of `g` at the unit vector `w`: `g − (g·w) w`.
pub fn project_tangent(w: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if w.len() != g.len() {
        return Err(Error::shape("project_tangent", w.len(), g.len()));
    }
    check_unit(w, "project_tangent")?;
    let mut out = g.to_vec();
    project_in_place(w, &mut out);
    Ok(out)
}

/// Projection without the precondition check. `w` must be nonzero.
///
/// Divides by `‖w‖²` so that rows sitting within the input tolerance of the
/// sphere are still projected onto the exact orthogonal complement.
pub(crate) fn project_in_place(w: &[f64], g: &mut [f64]) {
    let c = dot(g, w) / dot(w, w);
    for (gi, wi) in g.iter_mut().zip(w) {
        *gi -= c * wi;
    }
}

/// Maps a nonzero vector onto the unit sphere.
pub fn retract(w_tilde: &[f64]) -> Result<Vec<f64>> {
    let mut out = w_tilde.to_vec();
    retract_in_place(&mut out, "retract")?;
    Ok(out)
}

pub(crate) fn retract_in_place(w: &mut [f64], context: &str) -> Result<()> {
    let n = norm(w);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Retraction {
            context: context.to_string(),
            norm: n,
        });
    }
    for x in w.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// A matrix whose rows are all unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitRowMatrix(Matrix);

impl UnitRowMatrix {
    /// Wraps `m`, checking every row against the input tolerance.
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.row_iter().enumerate() {
            check_unit(row, &format!("UnitRowMatrix row {i}"))?;
        }
        Ok(Self(m))
    }

    /// Normalizes every row of `m`.
    pub fn from_retracted(mut m: Matrix) -> Result<Self> {
        for i in 0..m.rows() {
            retract_in_place(m.row_mut(i), &format!("row {i}"))?;
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl AsRef<Matrix> for UnitRowMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// Gaussian rows pushed onto the sphere; entries then have std ≈ `1/√cols`.
///
/// Each row draws from its own substream of `rng`, so the result does not
/// depend on the order rows are produced in.
pub fn sphere_init(rows: usize, cols: usize, rng: &RngStream) -> Result<UnitRowMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::contract(format!(
            "sphere_init needs rows, cols >= 1, got {rows}x{cols}"
        )));
    }
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut r = rng.derive(i as u64);
        let row = m.row_mut(i);
        loop {
            for x in row.iter_mut() {
                *x = r.normal();
            }
            if norm(row) > 0.0 {
                break;
            }
        }
    }
    UnitRowMatrix::from_retracted(m)
}

/// Largest `|‖row‖ − 1|` over all rows; zero rows count as deviation 1.
pub fn max_row_norm_deviation(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| (norm(r) - 1.0).abs())
        .fold(0.0, f64::max)
}
