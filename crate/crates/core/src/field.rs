//! Smooth maps with derivatives up to order three, and vector fields built
//! from them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A map `G: R^n → R^p` with multilinear derivatives up to order three.
///
/// Implementations must return symmetric `d2`/`d3`.
pub trait SmoothMap: Send + Sync + fmt::Debug {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn eval(&self, z: &DVector<f64>) -> DVector<f64>;
    /// `DG(z)[w]`
    fn d1(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    /// `D²G(z)[u, w]`
    fn d2(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    /// `D³G(z)[u, v, w]`
    fn d3(
        &self,
        z: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64>;

    /// Jacobian matrix `DG(z)` (p × n).
    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.in_dim();
        let mut out = DMatrix::zeros(self.out_dim(), n);
        for k in 0..n {
            let col = self.d1(z, &unit(n, k));
            out.set_column(k, &col);
        }
        out
    }
}

pub(crate) fn unit(n: usize, k: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[k] = 1.0;
    e
}

/// Polynomial map of degree at most three,
/// `G(z) = c + L z + Q[z, z] + K[z, z, z]` with symmetric `Q`, `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial3 {
    n: usize,
    p: usize,
    constant: DVector<f64>,
    linear: DMatrix<f64>,
    // quad[o][i*n + j], cubic[o][(i*n + j)*n + k]
    quad: Vec<Vec<f64>>,
    cubic: Vec<Vec<f64>>,
}

impl Polynomial3 {
    pub fn zero(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            constant: DVector::zeros(p),
            linear: DMatrix::zeros(p, n),
            quad: vec![vec![0.0; n * n]; p],
            cubic: vec![vec![0.0; n * n * n]; p],
        }
    }

    pub fn linear(l: DMatrix<f64>) -> Self {
        let mut out = Self::zero(l.ncols(), l.nrows());
        out.linear = l;
        out
    }

    pub fn with_constant(mut self, c: DVector<f64>) -> Self {
        assert_eq!(c.len(), self.p);
        self.constant = c;
        self
    }

    /// Adds `coef · z_i z_j` to output `o`.
    pub fn add_quadratic(&mut self, o: usize, i: usize, j: usize, coef: f64) {
        let n = self.n;
        self.quad[o][i * n + j] += coef / 2.0;
        self.quad[o][j * n + i] += coef / 2.0;
    }

    /// Adds `coef · z_i z_j z_k` to output `o`.
    pub fn add_cubic(&mut self, o: usize, i: usize, j: usize, k: usize, coef: f64) {
        let n = self.n;
        for (x, y, w) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
            self.cubic[o][(x * n + y) * n + w] += coef / 6.0;
        }
    }

    /// Adds the monomial `coef · Π z_{idx}` (degree 0..=3).
    pub fn add_monomial(&mut self, o: usize, idx: &[usize], coef: f64) -> Result<()> {
        if o >= self.p || idx.iter().any(|&i| i >= self.n) {
            return Err(Error::InvalidArgument("monomial index out of range".into()));
        }
        match *idx {
            [] => self.constant[o] += coef,
            [i] => self.linear[(o, i)] += coef,
            [i, j] => self.add_quadratic(o, i, j, coef),
            [i, j, k] => self.add_cubic(o, i, j, k, coef),
            _ => return Err(Error::InvalidArgument("monomial degree above 3".into())),
        }
        Ok(())
    }

    fn q(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(self.p, |o, _| {
            let q = &self.quad[o];
            let mut s = 0.0;
            for i in 0..n {
                if u[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    s += q[i * n + j] * u[i] * w[j];
                }
            }
            s
        })
    }

    fn k(&self, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(self.p, |o, _| {
            let c = &self.cubic[o];
            let mut s = 0.0;
            for i in 0..n {
                if u[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let uv = u[i] * v[j];
                    if uv == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        s += c[(i * n + j) * n + k] * uv * w[k];
                    }
                }
            }
            s
        })
    }
}

impl SmoothMap for Polynomial3 {
    fn in_dim(&self) -> usize {
        self.n
    }
    fn out_dim(&self) -> usize {
        self.p
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.constant + &self.linear * z + self.q(z, z) + self.k(z, z, z)
    }
    fn d1(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.linear * w + self.q(z, w) * 2.0 + self.k(z, z, w) * 3.0
    }
    fn d2(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.q(u, w) * 2.0 + self.k(z, u, w) * 6.0
    }
    fn d3(
        &self,
        _z: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.k(u, v, w) * 6.0
    }
}

/// `G(z)_o = Σ_i M[o, i] sin(z_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SineMix {
    m: DMatrix<f64>,
}

impl SineMix {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self { m }
    }

    fn weighted(&self, z: &DVector<f64>, f: fn(f64) -> f64, w: DVector<f64>) -> DVector<f64> {
        let diag = DVector::from_fn(z.len(), |i, _| f(z[i]) * w[i]);
        &self.m * diag
    }
}

impl SmoothMap for SineMix {
    fn in_dim(&self) -> usize {
        self.m.ncols()
    }
    fn out_dim(&self) -> usize {
        self.m.nrows()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.weighted(z, f64::sin, DVector::from_element(z.len(), 1.0))
    }
    fn d1(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.weighted(z, f64::cos, w.clone())
    }
    fn d2(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        -self.weighted(z, f64::sin, u.component_mul(w))
    }
    fn d3(
        &self,
        z: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        -self.weighted(z, f64::cos, u.component_mul(v).component_mul(w))
    }
}

/// Pointwise sum of maps with equal shapes.
#[derive(Debug, Clone)]
pub struct MapSum(pub Vec<Arc<dyn SmoothMap>>);

impl SmoothMap for MapSum {
    fn in_dim(&self) -> usize {
        self.0[0].in_dim()
    }
    fn out_dim(&self) -> usize {
        self.0[0].out_dim()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.0.iter().map(|m| m.eval(z)).fold(DVector::zeros(self.out_dim()), |a, b| a + b)
    }
    fn d1(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.0.iter().map(|m| m.d1(z, w)).fold(DVector::zeros(self.out_dim()), |a, b| a + b)
    }
    fn d2(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.0
            .iter()
            .map(|m| m.d2(z, u, w))
            .fold(DVector::zeros(self.out_dim()), |a, b| a + b)
    }
    fn d3(
        &self,
        z: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.0
            .iter()
            .map(|m| m.d3(z, u, v, w))
            .fold(DVector::zeros(self.out_dim()), |a, b| a + b)
    }
}

/// `c · G`.
#[derive(Debug, Clone)]
pub struct Scaled(pub f64, pub Arc<dyn SmoothMap>);

impl SmoothMap for Scaled {
    fn in_dim(&self) -> usize {
        self.1.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.1.out_dim()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.1.eval(z) * self.0
    }
    fn d1(&self, z: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.1.d1(z, w) * self.0
    }
    fn d2(&self, z: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.1.d2(z, u, w) * self.0
    }
    fn d3(
        &self,
        z: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        self.1.d3(z, u, v, w) * self.0
    }
}

/// Drift `V₀` and noise columns `V_1..V_d` of an RDE on `R^m`.
///
/// Columns are indexed space-time style: column 0 is the drift, column
/// `i ≥ 1` multiplies `dX^i`.
#[derive(Debug, Clone)]
pub struct VectorFieldOracle {
    columns: Vec<Arc<dyn SmoothMap>>,
    lip_meta: String,
}

impl VectorFieldOracle {
    pub fn new(
        drift: Arc<dyn SmoothMap>,
        noise: Vec<Arc<dyn SmoothMap>>,
        lip_meta: impl Into<String>,
    ) -> Result<Self> {
        let m = drift.in_dim();
        let mut columns = vec![drift];
        columns.extend(noise);
        if columns.len() < 2 {
            return Err(Error::InvalidArgument("at least one noise column required".into()));
        }
        for c in &columns {
            if c.in_dim() != m || c.out_dim() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: if c.in_dim() != m { c.in_dim() } else { c.out_dim() },
                    context: "vector field column",
                });
            }
        }
        Ok(Self {
            columns,
            lip_meta: lip_meta.into(),
        })
    }

    /// State dimension `m`.
    pub fn state_dim(&self) -> usize {
        self.columns[0].in_dim()
    }

    /// Driver dimension `d`.
    pub fn noise_dim(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn lip_meta(&self) -> &str {
        &self.lip_meta
    }

    /// Space-time column `k` (0 = drift).
    pub fn column(&self, k: usize) -> &dyn SmoothMap {
        self.columns[k].as_ref()
    }

    pub fn columns(&self) -> &[Arc<dyn SmoothMap>] {
        &self.columns
    }

    pub fn drift(&self) -> &dyn SmoothMap {
        self.columns[0].as_ref()
    }

    pub fn noise(&self, i: usize) -> &dyn SmoothMap {
        self.columns[i + 1].as_ref()
    }

    /// `V(z)` as an `m × d` matrix.
    pub fn v(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<_> = (0..self.noise_dim()).map(|i| self.noise(i).eval(z)).collect();
        DMatrix::from_columns(&cols)
    }

    /// `DV(z)[V(z)]` as an `m × d²` matrix, column `i·d + j` = `DV_j[V_i]`.
    pub fn dv_v(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = self.noise_dim();
        let vs: Vec<_> = (0..d).map(|i| self.noise(i).eval(z)).collect();
        let mut out = DMatrix::zeros(self.state_dim(), d * d);
        for i in 0..d {
            for j in 0..d {
                out.set_column(i * d + j, &self.noise(j).d1(z, &vs[i]));
            }
        }
        out
    }

    pub fn v0(&self, z: &DVector<f64>) -> DVector<f64> {
        self.drift().eval(z)
    }

    pub fn dv0(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.drift().jacobian(z)
    }

    /// Same noise, drift multiplied by `c`.
    pub fn with_scaled_drift(&self, c: f64) -> Self {
        let mut columns = self.columns.clone();
        columns[0] = Arc::new(Scaled(c, columns[0].clone()));
        Self {
            columns,
            lip_meta: self.lip_meta.clone(),
        }
    }

    /// Largest relative asymmetry of `D²V_k`, `D³V_k` over the given probe
    /// directions.
    pub fn symmetry_defect(&self, z: &DVector<f64>, dirs: &[DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / a.norm().max(b.norm()).max(1e-300);
        for col in &self.columns {
            for u in dirs {
                for v in dirs {
                    let a = col.d2(z, u, v);
                    let b = col.d2(z, v, u);
                    if a.norm() > 0.0 || b.norm() > 0.0 {
                        worst = worst.max(rel(&a, &b));
                    }
                    for w in dirs {
                        let base = col.d3(z, u, v, w);
                        for other in [col.d3(z, v, u, w), col.d3(z, w, v, u), col.d3(z, u, w, v)] {
                            if base.norm() > 0.0 || other.norm() > 0.0 {
                                worst = worst.max(rel(&base, &other));
                            }
                        }
                    }
                }
            }
        }
        worst
    }

    /// Largest relative error of `DV_k[w]` (and of `D²V_k`, `D³V_k`)
    /// against central differences with step `eps`.
    pub fn derivative_fd_error(&self, z: &DVector<f64>, w: &DVector<f64>, eps: f64) -> f64 {
        let mut worst: f64 = 0.0;
        let zp = z + w * eps;
        let zm = z - w * eps;
        let rel = |exact: DVector<f64>, fd: DVector<f64>| {
            (&exact - &fd).norm() / exact.norm().max(1.0)
        };
        for col in &self.columns {
            worst = worst.max(rel(col.d1(z, w), (col.eval(&zp) - col.eval(&zm)) / (2.0 * eps)));
            worst = worst.max(rel(
                col.d2(z, w, w),
                (col.d1(&zp, w) - col.d1(&zm, w)) / (2.0 * eps),
            ));
            worst = worst.max(rel(
                col.d3(z, w, w, w),
                (col.d2(&zp, w, w) - col.d2(&zm, w, w)) / (2.0 * eps),
            ));
        }
        worst
    }
}

/// Precomputed Davie-step coefficients of one state: `F1[i] = Ṽ_i`,
/// `F2[i·D+j] = DṼ_j[Ṽ_i]`,
/// `F3[(i·D+j)·D+k] = D²Ṽ_k[Ṽ_i, Ṽ_j] + DṼ_k[DṼ_j[Ṽ_i]]`,
/// all over space-time columns.
#[derive(Debug, Clone)]
pub struct StepCoefficients {
    dim: usize,
    f1: Vec<DVector<f64>>,
    f2: Vec<DVector<f64>>,
    f3: Vec<DVector<f64>>,
}

impl StepCoefficients {
    pub fn at(vf: &VectorFieldOracle, z: &DVector<f64>) -> Self {
        let cols = vf.columns();
        let big_d = cols.len();
        let f1: Vec<_> = cols.iter().map(|c| c.eval(z)).collect();
        let mut f2 = Vec::with_capacity(big_d * big_d);
        for v_i in &f1 {
            for c in cols {
                f2.push(c.d1(z, v_i));
            }
        }
        let mut f3 = Vec::with_capacity(big_d * big_d * big_d);
        for i in 0..big_d {
            for j in 0..big_d {
                let f2_ij = &f2[i * big_d + j];
                for c in cols {
                    f3.push(c.d2(z, &f1[i], &f1[j]) + c.d1(z, f2_ij));
                }
            }
        }
        Self {
            dim: big_d,
            f1,
            f2,
            f3,
        }
    }

    /// `Σ F1_i a_i + Σ F2_ij b_ij + Σ F3_ijk c_ijk`.
    pub fn increment(&self, g: &crate::tensor::SigElement) -> DVector<f64> {
        debug_assert_eq!(g.dim(), self.dim);
        let mut out = DVector::zeros(self.f1[0].len());
        for (f, &x) in self.f1.iter().zip(g.a()) {
            if x != 0.0 {
                out.axpy(x, f, 1.0);
            }
        }
        for (f, &x) in self.f2.iter().zip(g.b()) {
            if x != 0.0 {
                out.axpy(x, f, 1.0);
            }
        }
        for (f, &x) in self.f3.iter().zip(g.c()) {
            if x != 0.0 {
                out.axpy(x, f, 1.0);
            }
        }
        out
    }
}

/// Coefficient matrices of the linearized Davie step at one state, so that
/// the step Jacobian is `I + Σ L1_i a_i + Σ L2_ij b_ij + Σ L3_ijk c_ijk`.
#[derive(Debug, Clone)]
pub struct LinearizedCoefficients {
    dim: usize,
    l1: Vec<DMatrix<f64>>,
    l2: Vec<DMatrix<f64>>,
    l3: Vec<DMatrix<f64>>,
}

impl LinearizedCoefficients {
    pub fn at(vf: &VectorFieldOracle, z: &DVector<f64>) -> Self {
        let cols = vf.columns();
        let big_d = cols.len();
        let m = vf.state_dim();
        let basis: Vec<_> = (0..m).map(|k| unit(m, k)).collect();
        let f1: Vec<_> = cols.iter().map(|c| c.eval(z)).collect();
        let jac: Vec<DMatrix<f64>> = cols.iter().map(|c| c.jacobian(z)).collect();

        let l1 = jac.clone();
        let mut l2 = Vec::with_capacity(big_d * big_d);
        for i in 0..big_d {
            for j in 0..big_d {
                // w ↦ D²Ṽ_j[Ṽ_i, w] + DṼ_j[DṼ_i w]
                let mut mat = &jac[j] * &jac[i];
                for (k, e) in basis.iter().enumerate() {
                    let col = cols[j].d2(z, &f1[i], e);
                    let mut target = mat.column_mut(k);
                    target += col;
                }
                l2.push(mat);
            }
        }
        let mut l3 = Vec::with_capacity(big_d * big_d * big_d);
        for i in 0..big_d {
            for j in 0..big_d {
                let dvj_vi = &jac[j] * &f1[i];
                for k in 0..big_d {
                    let ck = &cols[k];
                    // DṼ_k[D²Ṽ_j[Ṽ_i, w] + DṼ_j DṼ_i w]
                    let mut mat = &jac[k] * &l2[i * big_d + j];
                    for (w, e) in basis.iter().enumerate() {
                        let dvi_w = &jac[i] * e;
                        let dvj_w = &jac[j] * e;
                        let col = ck.d3(z, &f1[i], &f1[j], e)
                            + ck.d2(z, &f1[i], &dvj_w)
                            + ck.d2(z, &f1[j], &dvi_w)
                            + ck.d2(z, &dvj_vi, e);
                        let mut target = mat.column_mut(w);
                        target += col;
                    }
                    l3.push(mat);
                }
            }
        }
        Self { dim: big_d, l1, l2, l3 }
    }

    /// Step Jacobian for the space-time element `g`.
    pub fn propagator(&self, g: &crate::tensor::SigElement) -> DMatrix<f64> {
        debug_assert_eq!(g.dim(), self.dim);
        let m = self.l1[0].nrows();
        let mut out = DMatrix::identity(m, m);
        let terms = self
            .l1
            .iter()
            .zip(g.a())
            .chain(self.l2.iter().zip(g.b()))
            .chain(self.l3.iter().zip(g.c()));
        for (l, &x) in terms {
            if x != 0.0 {
                out.zip_apply(l, |o, v| *o += x * v);
            }
        }
        out
    }
}
