//! Truncated step-3 tensor algebra over `R^d`.
//!
//! A [`SigElement`] holds the increment `a`, the second level `b` and the
//! third level `c` of a rough path over one interval. Tensors are stored
//! dense and row-major: `(i, j)` lives at `i * d + j` and `(i, j, k)` at
//! `(i * d + j) * d + k`.
//!
//! Index order follows time order: `b[i, j]` integrates `dX^i` before `dX^j`
//! and `c[i, j, k]` integrates `dX^i`, then `dX^j`, then `dX^k`. With this
//! convention the Chen product is
//!
//! ```text
//! a = g.a + h.a
//! b = g.b + h.b + g.a ⊗ h.a
//! c = g.c + h.c + g.b ⊗ h.a + g.a ⊗ h.b
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One interval's truncated level-3 signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigElement {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl SigElement {
    /// The group identity (all levels zero).
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            a: vec![0.0; dim],
            b: vec![0.0; dim * dim],
            c: vec![0.0; dim * dim * dim],
        }
    }

    /// Builds an element from raw level data; lengths must be `d`, `d²`, `d³`.
    pub fn from_parts(dim: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if dim == 0 || a.len() != dim || b.len() != dim * dim || c.len() != dim * dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: a.len(),
                context: "signature level lengths",
            });
        }
        Ok(Self { dim, a, b, c })
    }

    /// Signature of the straight segment with increment `v`:
    /// `(v, v⊗v/2, v⊗v⊗v/6)`.
    pub fn segment_exp(v: &[f64]) -> Self {
        let d = v.len();
        let mut out = Self::zero(d);
        out.a.copy_from_slice(v);
        for i in 0..d {
            for j in 0..d {
                let vij = v[i] * v[j];
                out.b[i * d + j] = vij / 2.0;
                for k in 0..d {
                    out.c[(i * d + j) * d + k] = vij * v[k] / 6.0;
                }
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Level-1 increment `δX`.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    /// Level-2 tensor, row-major `d × d`.
    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Level-3 tensor, row-major `d × d × d`.
    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    pub fn c_mut(&mut self) -> &mut [f64] {
        &mut self.c
    }

    #[inline]
    pub fn b_at(&self, i: usize, j: usize) -> f64 {
        self.b[i * self.dim + j]
    }

    #[inline]
    pub fn c_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[(i * self.dim + j) * self.dim + k]
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).chain(&self.c).all(|x| x.is_finite())
    }

    /// Chen product `self ⊗ other` (signature of the concatenation).
    pub fn chen_mul(&self, other: &SigElement) -> Result<SigElement> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
                context: "chen_mul",
            });
        }
        let mut out = self.clone();
        out.chen_mul_assign(other);
        Ok(out)
    }

    /// In-place Chen product; panics on dimension mismatch.
    pub fn chen_mul_assign(&mut self, h: &SigElement) {
        assert_eq!(self.dim, h.dim, "chen_mul_assign: dimension mismatch");
        let d = self.dim;
        // level 3 reads the old level 1/2 values, so update top-down
        for i in 0..d {
            for j in 0..d {
                let gb = self.b[i * d + j];
                let ga = self.a[i];
                let row = (i * d + j) * d;
                for k in 0..d {
                    self.c[row + k] += h.c[row + k] + gb * h.a[k] + ga * h.b[j * d + k];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                self.b[i * d + j] += h.b[i * d + j] + self.a[i] * h.a[j];
            }
        }
        for i in 0..d {
            self.a[i] += h.a[i];
        }
    }

    /// Largest violation of the level-2 and level-3 shuffle identities.
    pub fn shuffle_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let lhs = self.b_at(i, j) + self.b_at(j, i);
                worst = worst.max((lhs - self.a[i] * self.a[j]).abs());
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let sum = self.c_at(i, j, k)
                        + self.c_at(i, k, j)
                        + self.c_at(j, i, k)
                        + self.c_at(j, k, i)
                        + self.c_at(k, i, j)
                        + self.c_at(k, j, i);
                    worst = worst.max((sum - self.a[i] * self.a[j] * self.a[k]).abs());
                }
            }
        }
        worst
    }

    /// Time reversal `(a, b, c) ↦ (−a, −b, −c)`, index order unchanged.
    ///
    /// This is the sign/argument-swap rule for a driver read backwards from a
    /// fixed terminal time; it is paired with right-point evaluation of the
    /// compensated sums, not with the group inverse.
    pub fn reverse_element(&self) -> SigElement {
        SigElement {
            dim: self.dim,
            a: self.a.iter().map(|x| -x).collect(),
            b: self.b.iter().map(|x| -x).collect(),
            c: self.c.iter().map(|x| -x).collect(),
        }
    }

    /// Product rule matching [`SigElement::reverse_element`]: for reversed
    /// elements `g̃ = −g`, `h̃ = −h` of consecutive original intervals
    /// (`h` earlier than `g`), returns the reversed element of the union.
    pub fn reversed_chen_mul(&self, other: &SigElement) -> Result<SigElement> {
        let orig = other.reverse_element().chen_mul(&self.reverse_element())?;
        Ok(orig.reverse_element())
    }

    /// Drops the third level (level-2-only mode).
    pub fn truncate_level2(&self) -> SigElement {
        let mut out = self.clone();
        out.c.iter_mut().for_each(|x| *x = 0.0);
        out
    }

    /// Restriction to the coordinates `keep` (a group homomorphism).
    pub fn project(&self, keep: &[usize]) -> SigElement {
        let d = self.dim;
        let e = keep.len();
        let mut out = SigElement::zero(e);
        for (p, &i) in keep.iter().enumerate() {
            out.a[p] = self.a[i];
            for (q, &j) in keep.iter().enumerate() {
                out.b[p * e + q] = self.b[i * d + j];
                for (r, &k) in keep.iter().enumerate() {
                    out.c[(p * e + q) * e + r] = self.c[(i * d + j) * d + k];
                }
            }
        }
        out
    }

    /// Max-abs distance between two elements of equal dimension.
    pub fn max_abs_diff(&self, other: &SigElement) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.a
            .iter()
            .zip(&other.a)
            .chain(self.b.iter().zip(&other.b))
            .chain(self.c.iter().zip(&other.c))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norms of the three levels.
    pub fn level_norms(&self) -> [f64; 3] {
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        [n(&self.a), n(&self.b), n(&self.c)]
    }
}

/// Folds a sequence of elements with the Chen product; `None` on empty input.
pub fn chen_fold<'a, I>(items: I) -> Option<SigElement>
where
    I: IntoIterator<Item = &'a SigElement>,
{
    let mut it = items.into_iter();
    let mut acc = it.next()?.clone();
    for g in it {
        acc.chen_mul_assign(g);
    }
    Some(acc)
}
