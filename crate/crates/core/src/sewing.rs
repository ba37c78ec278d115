//! Rough integration of operator-valued controlled paths.
//!
//! The integrand `Y ∈ L(R^d, R^m)` is stored flattened column-major, so
//! `Y` has `m·d` components and `Y e_j` is the block `j·m .. (j+1)·m`.
//! The integral is the compensated sum over the grid steps, which is the
//! finest mesh available.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::controlled::ControlledPathGrid;
use crate::error::{Error, Result};
use crate::tensor::SigElement;

fn check_shape(y: &ControlledPathGrid, m: usize) -> Result<usize> {
    let d = y.base().dim();
    if y.value_dim() != m * d {
        return Err(Error::DimensionMismatch {
            expected: m * d,
            found: y.value_dim(),
            context: "integrand shape",
        });
    }
    Ok(d)
}

/// `Y_s δX + Y¹_s 𝕏² + Y²_s 𝕏³` for the element `g`.
pub fn germ(y: &ControlledPathGrid, m: usize, s: usize, g: &SigElement) -> DVector<f64> {
    let d = g.dim();
    let (v, y1, y2) = (y.value(s), y.d1(s), y.d2(s));
    let mut out = DVector::zeros(m);
    for j in 0..d {
        let a = g.a()[j];
        if a != 0.0 {
            out.axpy(a, &v.rows(j * m, m), 1.0);
        }
    }
    for i in 0..d {
        for j in 0..d {
            let b = g.b_at(i, j);
            if b != 0.0 {
                out.axpy(b, &y1.column(i).rows(j * m, m), 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let c = g.c_at(i, j, k);
                if c != 0.0 {
                    out.axpy(c, &y2.column(i * d + j).rows(k * m, m), 1.0);
                }
            }
        }
    }
    out
}

fn check_exponents(y: &ControlledPathGrid) -> Result<()> {
    let value = 3.0 * y.gamma1() + y.base().gamma();
    if value <= 1.0 {
        return Err(Error::ExponentCondition { value });
    }
    Ok(())
}

/// Compensated running sums `∫_{i0}^{t} Y dX` for `t = i0 ..= i1`.
fn running_integral(y: &ControlledPathGrid, m: usize, i0: usize, i1: usize) -> Vec<DVector<f64>> {
    let base = y.base();
    let mut sum = DVector::<f64>::zeros(m);
    let mut comp = DVector::<f64>::zeros(m);
    let mut out = Vec::with_capacity(i1 - i0 + 1);
    out.push(sum.clone());
    for k in i0..i1 {
        let term = germ(y, m, k, base.step(k));
        // Kahan summation per component
        for r in 0..m {
            let yk = term[r] - comp[r];
            let t = sum[r] + yk;
            comp[r] = (t - sum[r]) - yk;
            sum[r] = t;
        }
        out.push(sum.clone());
    }
    out
}

/// `(∫_{i0}^· Y dX, Y, Y¹)` as a controlled path on the window `[i0, i1]`.
pub fn rough_integral(y: &ControlledPathGrid, m: usize, i0: usize, i1: usize) -> Result<ControlledPathGrid> {
    let d = check_shape(y, m)?;
    check_exponents(y)?;
    if i1 >= y.nodes() || i0 >= i1 {
        return Err(Error::InvalidArgument(format!("bad integration interval [{i0}, {i1}]")));
    }
    let values = running_integral(y, m, i0, i1);
    let mut z1 = Vec::with_capacity(values.len());
    let mut z2 = Vec::with_capacity(values.len());
    for t in i0..=i1 {
        z1.push(DMatrix::from_column_slice(m, d, y.value(t).as_slice()));
        let y1 = y.d1(t);
        let mut d2 = DMatrix::zeros(m, d * d);
        for i in 0..d {
            for j in 0..d {
                d2.set_column(i * d + j, &y1.column(i).rows(j * m, m));
            }
        }
        z2.push(d2);
    }
    let base = Arc::new(y.base().window(i0, i1)?);
    ControlledPathGrid::new(base, values, z1, z2, y.base().gamma())
}

/// Value of `∫_u^v Y dX` only.
pub fn integral_value(y: &ControlledPathGrid, m: usize, u: usize, v: usize) -> Result<DVector<f64>> {
    check_shape(y, m)?;
    check_exponents(y)?;
    if v >= y.nodes() || u > v {
        return Err(Error::InvalidArgument(format!("bad integration interval [{u}, {v}]")));
    }
    Ok(running_integral(y, m, u, v).pop().expect("non-empty"))
}

/// `‖∫_u^v Y dX − Y_u δX − Y¹_u 𝕏² − Y²_u 𝕏³‖`.
pub fn local_defect(y: &ControlledPathGrid, m: usize, u: usize, v: usize) -> Result<f64> {
    let total = integral_value(y, m, u, v)?;
    let g = y.base().sig(u, v)?;
    Ok((total - germ(y, m, u, &g)).norm())
}
