//! Objectives that can be sampled on a grid.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mmps::{ConvexSegment, MmpsFunction};
use crate::polytope::{Grid, Polytope};

pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<f64>;

    /// Evaluates and rejects non-finite values.
    fn eval_finite(&self, x: &[f64]) -> Result<f64> {
        let v = self.eval(x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation {
                point: x.to_vec(),
                value: v,
            })
        }
    }
}

impl<T: ScalarField + ?Sized> ScalarField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        (**self).eval(x)
    }
}

impl ScalarField for MmpsFunction {
    fn dim(&self) -> usize {
        MmpsFunction::dim(self)
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.evaluate(x)
    }
}

impl ScalarField for ConvexSegment {
    fn dim(&self) -> usize {
        ConvexSegment::dim(self)
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.value(x)
    }
}

/// Wraps a closure.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> ScalarField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }
}

/// Objective tabulated on a full tensor grid and interpolated
/// multilinearly between grid nodes.
#[derive(Debug, Clone)]
pub struct TabulatedField {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl TabulatedField {
    /// Reads CSV rows `x_1, ..., x_n, value` after a header line.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Format(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() < 2 {
                return Err(Error::Format("rows need coordinates and a value".into()));
            }
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Format("ragged CSV rows".into()));
                }
            }
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Input(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_csv(file)
    }

    fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Format("empty table".into()));
        };
        let dim = first.len() - 1;
        let mut axes: Vec<Vec<f64>> = (0..dim)
            .map(|d| rows.iter().map(|r| r[d]).collect())
            .collect();
        for axis in &mut axes {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
            if axis.len() < 2 {
                return Err(Error::Format("every coordinate needs at least two distinct values".into()));
            }
        }
        let total: usize = axes.iter().map(Vec::len).product();
        if total != rows.len() {
            return Err(Error::Format(format!(
                "table is not a full tensor grid: {} rows for {} nodes",
                rows.len(),
                total
            )));
        }
        let mut values = vec![f64::NAN; total];
        for row in &rows {
            let mut flat = 0;
            for (d, axis) in axes.iter().enumerate() {
                let i = axis.partition_point(|v| *v < row[d]);
                flat = flat * axis.len() + i;
            }
            if !values[flat].is_nan() {
                return Err(Error::Format(format!("duplicate node {:?}", &row[..dim])));
            }
            values[flat] = row[dim];
        }
        Ok(Self { axes, values })
    }

    pub fn domain(&self) -> Result<Polytope> {
        let lo: Vec<f64> = self.axes.iter().map(|a| a[0]).collect();
        let hi: Vec<f64> = self.axes.iter().map(|a| a[a.len() - 1]).collect();
        Polytope::from_box(&lo, &hi)
    }
}

impl ScalarField for TabulatedField {
    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.axes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.axes.len(),
                got: x.len(),
            });
        }
        // cell index and local coordinate per axis
        let mut cell = Vec::with_capacity(x.len());
        for (axis, &xi) in self.axes.iter().zip(x) {
            let (lo, hi) = (axis[0], axis[axis.len() - 1]);
            let tol = 1e-9 * (hi - lo);
            if xi < lo - tol || xi > hi + tol {
                return Err(Error::DomainViolation { point: x.to_vec() });
            }
            let xi = xi.clamp(lo, hi);
            let i = (axis.partition_point(|v| *v <= xi).max(1) - 1).min(axis.len() - 2);
            let t = (xi - axis[i]) / (axis[i + 1] - axis[i]);
            cell.push((i, t));
        }
        let mut total = 0.0;
        for corner in 0..(1usize << x.len()) {
            let mut weight = 1.0;
            let mut flat = 0;
            for (d, (axis, &(i, t))) in self.axes.iter().zip(&cell).enumerate() {
                let upper = corner >> d & 1 == 1;
                weight *= if upper { t } else { 1.0 - t };
                flat = flat * axis.len() + i + usize::from(upper);
            }
            if weight != 0.0 {
                total += weight * self.values[flat];
            }
        }
        Ok(total)
    }
}

/// Grid minima of two fields and the largest absolute gap between them,
/// each with the flat grid index where it occurs (smallest index on ties).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct GridExtremes {
    pub min_a: Option<(f64, usize)>,
    pub min_b: Option<(f64, usize)>,
    pub max_gap: Option<(f64, usize)>,
}

fn pick(a: Option<(f64, usize)>, b: Option<(f64, usize)>, larger: bool) -> Option<(f64, usize)> {
    match (a, b) {
        (Some(x), Some(y)) => {
            let ord = if larger { y.0.total_cmp(&x.0) } else { x.0.total_cmp(&y.0) };
            Some(if ord.is_lt() || (ord.is_eq() && x.1 <= y.1) { x } else { y })
        }
        (x, None) => x,
        (None, y) => y,
    }
}

impl GridExtremes {
    fn merge(self, other: Self) -> Self {
        Self {
            min_a: pick(self.min_a, other.min_a, false),
            min_b: pick(self.min_b, other.min_b, false),
            max_gap: pick(self.max_gap, other.max_gap, true),
        }
    }
}

pub(crate) fn grid_extremes(
    grid: &Grid,
    region: &Polytope,
    a: &dyn ScalarField,
    b: &dyn ScalarField,
) -> Result<GridExtremes> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.point(i);
            if !region.contains(&x) {
                return Ok(GridExtremes::default());
            }
            let va = a.eval_finite(&x)?;
            let vb = b.eval_finite(&x)?;
            Ok(GridExtremes {
                min_a: Some((va, i)),
                min_b: Some((vb, i)),
                max_gap: Some(((va - vb).abs(), i)),
            })
        })
        .try_reduce(GridExtremes::default, |x, y| Ok(x.merge(y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_bilinear() {
        let csv = "u,v,value\n0,0,0\n0,1,1\n1,0,2\n1,1,3\n";
        let t = TabulatedField::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(t.dim(), 2);
        // f = 2u + v is reproduced exactly
        assert!((t.eval(&[0.25, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        assert!((t.eval(&[1.0, 1.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(t.eval(&[2.0, 0.0]), Err(Error::DomainViolation { .. })));
        assert_eq!(t.domain().unwrap().diameter().unwrap(), 2f64.sqrt());
    }

    #[test]
    fn tabulated_rejects_scattered_data() {
        let csv = "x,y,value\n0,0,1\n1,1,2\n0,1,3\n";
        assert!(matches!(TabulatedField::from_csv(csv.as_bytes()), Err(Error::Format(_))));
        assert!(matches!(TabulatedField::from_csv("x,value\n0,abc\n".as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let f = FnField::new(1, |x: &[f64]| 1.0 / x[0]);
        assert!(matches!(f.eval_finite(&[0.0]), Err(Error::Evaluation { .. })));
        assert_eq!(f.eval_finite(&[2.0]).unwrap(), 0.5);
    }
}
