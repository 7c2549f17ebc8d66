//! Uniform vertex-centred space-time grids and the discrete calculus used by
//! every other module.
//!
//! Fields are stored flat with `x1` fastest, then `x2`, then `t`:
//! `index = (k * ny + j) * nx + i`. All derivative operators are linear maps
//! on these flat arrays and come with an exact transpose, which the objective
//! gradient relies on.

use crate::error::{Error, Result};

/// Tensor grid on `(x1_min, x1_max) x (x2_min, x2_max) x [0, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimeGrid {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub t_max: f64,
    /// Spatial cells along `x1`.
    pub n1: usize,
    /// Spatial cells along `x2`.
    pub n2: usize,
    /// Time cells; always even so that `t = T/2` is a node.
    pub nt: usize,
}

impl SpaceTimeGrid {
    pub fn new(
        x1: (f64, f64),
        x2: (f64, f64),
        t_max: f64,
        n1: usize,
        n2: usize,
        nt: usize,
    ) -> Result<Self> {
        if !(x1.0 < x1.1 && x2.0 < x2.1 && t_max > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "degenerate extents x1={x1:?} x2={x2:?} T={t_max}"
            )));
        }
        if n1 < 4 || n2 < 4 {
            return Err(Error::InvalidGrid(format!(
                "need at least 4 spatial cells per axis, got {n1}x{n2}"
            )));
        }
        if nt < 2 || nt % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "time cells must be even and >= 2, got {nt}"
            )));
        }
        Ok(Self { x1_min: x1.0, x1_max: x1.1, x2_min: x2.0, x2_max: x2.1, t_max, n1, n2, nt })
    }

    /// Unit square `(1,2)^2`, `T = 1`.
    pub fn unit_square(n: usize, nt: usize) -> Result<Self> {
        Self::new((1.0, 2.0), (1.0, 2.0), 1.0, n, n, nt)
    }

    pub fn nx(&self) -> usize {
        self.n1 + 1
    }
    pub fn ny(&self) -> usize {
        self.n2 + 1
    }
    pub fn n_times(&self) -> usize {
        self.nt + 1
    }
    pub fn h1(&self) -> f64 {
        (self.x1_max - self.x1_min) / self.n1 as f64
    }
    pub fn h2(&self) -> f64 {
        (self.x2_max - self.x2_min) / self.n2 as f64
    }
    pub fn ht(&self) -> f64 {
        self.t_max / self.nt as f64
    }
    pub fn x1(&self, i: usize) -> f64 {
        self.x1_min + i as f64 * self.h1()
    }
    pub fn x2(&self, j: usize) -> f64 {
        self.x2_min + j as f64 * self.h2()
    }
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.ht()
    }
    /// Index of the time node at `T/2`.
    pub fn mid(&self) -> usize {
        self.nt / 2
    }
    pub fn spatial_len(&self) -> usize {
        self.nx() * self.ny()
    }
    pub fn len(&self) -> usize {
        self.spatial_len() * self.n_times()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn sidx(&self, i: usize, j: usize) -> usize {
        j * self.nx() + i
    }
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny() + j) * self.nx() + i
    }
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n1 || j == self.n2
    }

    /// Spatial indices of all nodes on the boundary, ordered by `(j, i)`.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * (self.nx() + self.ny()));
        for j in 0..self.ny() {
            for i in 0..self.nx() {
                if self.is_boundary(i, j) {
                    out.push(self.sidx(i, j));
                }
            }
        }
        out
    }

    pub fn space_time_dims(&self) -> Dims {
        Dims([self.nx(), self.ny(), self.n_times()])
    }
    pub fn spatial_dims(&self) -> Dims {
        Dims([self.nx(), self.ny(), 1])
    }

    /// Integer refinement factors `(r1, r2, rt)` such that every node of
    /// `coarse` is a node of `self`.
    pub fn refinement_of(&self, coarse: &SpaceTimeGrid) -> Result<(usize, usize, usize)> {
        let same_box = (self.x1_min - coarse.x1_min).abs() < 1e-12
            && (self.x1_max - coarse.x1_max).abs() < 1e-12
            && (self.x2_min - coarse.x2_min).abs() < 1e-12
            && (self.x2_max - coarse.x2_max).abs() < 1e-12
            && (self.t_max - coarse.t_max).abs() < 1e-12;
        let ok = same_box
            && self.n1 % coarse.n1 == 0
            && self.n2 % coarse.n2 == 0
            && self.nt % coarse.nt == 0;
        if !ok {
            return Err(Error::NotARefinement {
                fine: (self.n1, self.n2, self.nt),
                coarse: (coarse.n1, coarse.n2, coarse.nt),
            });
        }
        Ok((self.n1 / coarse.n1, self.n2 / coarse.n2, self.nt / coarse.nt))
    }

    /// Trapezoidal weights along `x1`, `x2` and `t`.
    pub fn trapezoid_weights(&self) -> [Vec<f64>; 3] {
        [
            trapezoid_1d(self.nx(), self.h1()),
            trapezoid_1d(self.ny(), self.h2()),
            trapezoid_1d(self.n_times(), self.ht()),
        ]
    }

    /// Node-wise tensor trapezoid weights over `Q_T`.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let [w1, w2, wt] = self.trapezoid_weights();
        let mut out = Vec::with_capacity(self.len());
        for wk in &wt {
            for wj in &w2 {
                for wi in &w1 {
                    out.push(wi * wj * wk);
                }
            }
        }
        out
    }

    /// Node-wise tensor trapezoid weights over `Omega`.
    pub fn spatial_quadrature_weights(&self) -> Vec<f64> {
        let [w1, w2, _] = self.trapezoid_weights();
        w2.iter().flat_map(|wj| w1.iter().map(move |wi| wi * wj)).collect()
    }

    /// Samples `f(x1, x2, t)` at every node.
    pub fn sample(&self, f: impl Fn(f64, f64, f64) -> f64) -> ScalarField {
        let mut values = Vec::with_capacity(self.len());
        for k in 0..self.n_times() {
            let t = self.t(k);
            for j in 0..self.ny() {
                let x2 = self.x2(j);
                for i in 0..self.nx() {
                    values.push(f(self.x1(i), x2, t));
                }
            }
        }
        ScalarField { grid: *self, values }
    }

    /// Samples `f(x1, x2)` at every spatial node.
    pub fn sample_spatial(&self, f: impl Fn(f64, f64) -> f64) -> SpatialField {
        let mut values = Vec::with_capacity(self.spatial_len());
        for j in 0..self.ny() {
            for i in 0..self.nx() {
                values.push(f(self.x1(i), self.x2(j)));
            }
        }
        SpatialField { grid: *self, values }
    }
}

fn trapezoid_1d(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Shape of a flat array: `[nx, ny, nt + 1]` (spatial arrays use `nt + 1 = 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.0[0],
            _ => self.0[0] * self.0[1],
        }
    }
}

/// A 1D finite-difference stencil: row `m` is a list of `(column, coefficient)`.
#[derive(Clone, Debug)]
pub struct Stencil1d {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Stencil1d {
    /// Second-order first derivative: central inside, 3-point one-sided at the ends.
    pub fn first(n: usize, h: f64) -> Self {
        assert!(n >= 3, "first-derivative stencil needs 3 nodes");
        let c = 1.0 / (2.0 * h);
        let mut rows = Vec::with_capacity(n);
        rows.push(vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]);
        for m in 1..n - 1 {
            rows.push(vec![(m - 1, -c), (m + 1, c)]);
        }
        rows.push(vec![(n - 3, c), (n - 2, -4.0 * c), (n - 1, 3.0 * c)]);
        Self { rows }
    }

    /// Second derivative: 3-point central inside, 4-point one-sided at the ends
    /// (falls back to the shifted 3-point stencil when only 3 nodes exist).
    pub fn second(n: usize, h: f64) -> Self {
        assert!(n >= 3, "second-derivative stencil needs 3 nodes");
        let c = 1.0 / (h * h);
        let mut rows = Vec::with_capacity(n);
        if n >= 4 {
            rows.push(vec![(0, 2.0 * c), (1, -5.0 * c), (2, 4.0 * c), (3, -c)]);
        } else {
            rows.push(vec![(0, c), (1, -2.0 * c), (2, c)]);
        }
        for m in 1..n - 1 {
            rows.push(vec![(m - 1, c), (m, -2.0 * c), (m + 1, c)]);
        }
        if n >= 4 {
            rows.push(vec![(n - 4, -c), (n - 3, 4.0 * c), (n - 2, -5.0 * c), (n - 1, 2.0 * c)]);
        } else {
            rows.push(vec![(n - 3, c), (n - 2, -2.0 * c), (n - 1, c)]);
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Applies the stencil along `axis` of `src`.
    pub fn apply(&self, src: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        self.apply_into(src, dims, axis, &mut out, false);
        out
    }

    /// Applies the transposed stencil along `axis`.
    pub fn apply_transpose(&self, src: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        self.apply_into(src, dims, axis, &mut out, true);
        out
    }

    fn apply_into(&self, src: &[f64], dims: Dims, axis: usize, out: &mut [f64], transpose: bool) {
        let n = dims.0[axis];
        assert_eq!(n, self.rows.len(), "stencil length does not match axis");
        assert_eq!(src.len(), dims.len());
        let stride = dims.stride(axis);
        let block = stride * n;
        for hi in (0..src.len()).step_by(block) {
            for lo in 0..stride {
                let base = hi + lo;
                for (m, row) in self.rows.iter().enumerate() {
                    if transpose {
                        let s = src[base + m * stride];
                        for &(col, c) in row {
                            out[base + col * stride] += c * s;
                        }
                    } else {
                        let mut acc = 0.0;
                        for &(col, c) in row {
                            acc += c * src[base + col * stride];
                        }
                        out[base + m * stride] = acc;
                    }
                }
            }
        }
    }
}

/// Partial derivative operators available on space-time fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Deriv {
    X1,
    X2,
    T,
    X1X1,
    X2X2,
    TT,
    X1X2,
    X1T,
    X2T,
}

impl Deriv {
    /// The ten terms of the discrete `H^2(Q_T)` inner product (identity first).
    pub const H2_TERMS: [Option<Deriv>; 10] = [
        None,
        Some(Deriv::X1),
        Some(Deriv::X2),
        Some(Deriv::T),
        Some(Deriv::X1X1),
        Some(Deriv::X1X2),
        Some(Deriv::X2X2),
        Some(Deriv::X1T),
        Some(Deriv::X2T),
        Some(Deriv::TT),
    ];
}

/// Precomputed stencils for one grid; cheap to build, reused by hot loops.
#[derive(Clone, Debug)]
pub struct Stencils {
    pub dims: Dims,
    pub spatial: Dims,
    d1: [Stencil1d; 3],
    d2: [Stencil1d; 3],
}

impl Stencils {
    pub fn new(grid: &SpaceTimeGrid) -> Self {
        let (nx, ny, nt) = (grid.nx(), grid.ny(), grid.n_times());
        Self {
            dims: grid.space_time_dims(),
            spatial: grid.spatial_dims(),
            d1: [
                Stencil1d::first(nx, grid.h1()),
                Stencil1d::first(ny, grid.h2()),
                Stencil1d::first(nt, grid.ht()),
            ],
            d2: [
                Stencil1d::second(nx, grid.h1()),
                Stencil1d::second(ny, grid.h2()),
                Stencil1d::second(nt, grid.ht()),
            ],
        }
    }

    fn dims_for(&self, len: usize) -> Dims {
        if len == self.dims.len() {
            self.dims
        } else {
            assert_eq!(len, self.spatial.len(), "array does not match the grid");
            self.spatial
        }
    }

    /// First derivative along `axis` (0 = x1, 1 = x2, 2 = t).
    pub fn d1(&self, axis: usize, f: &[f64]) -> Vec<f64> {
        self.d1[axis].apply(f, self.dims_for(f.len()), axis)
    }
    pub fn d1_t(&self, axis: usize, f: &[f64]) -> Vec<f64> {
        self.d1[axis].apply_transpose(f, self.dims_for(f.len()), axis)
    }
    pub fn d2(&self, axis: usize, f: &[f64]) -> Vec<f64> {
        self.d2[axis].apply(f, self.dims_for(f.len()), axis)
    }
    pub fn d2_t(&self, axis: usize, f: &[f64]) -> Vec<f64> {
        self.d2[axis].apply_transpose(f, self.dims_for(f.len()), axis)
    }

    /// Spatial Laplacian of a spatial or space-time array.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.d2(0, f);
        add_assign(&mut out, &self.d2(1, f));
        out
    }
    pub fn laplacian_t(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.d2_t(0, f);
        add_assign(&mut out, &self.d2_t(1, f));
        out
    }

    pub fn divergence(&self, v1: &[f64], v2: &[f64]) -> Vec<f64> {
        let mut out = self.d1(0, v1);
        add_assign(&mut out, &self.d1(1, v2));
        out
    }
    /// Transpose of the divergence: returns the two component cotangents.
    pub fn divergence_t(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.d1_t(0, g), self.d1_t(1, g))
    }

    pub fn apply(&self, d: Deriv, f: &[f64]) -> Vec<f64> {
        match d {
            Deriv::X1 => self.d1(0, f),
            Deriv::X2 => self.d1(1, f),
            Deriv::T => self.d1(2, f),
            Deriv::X1X1 => self.d2(0, f),
            Deriv::X2X2 => self.d2(1, f),
            Deriv::TT => self.d2(2, f),
            Deriv::X1X2 => self.d1(1, &self.d1(0, f)),
            Deriv::X1T => self.d1(2, &self.d1(0, f)),
            Deriv::X2T => self.d1(2, &self.d1(1, f)),
        }
    }

    pub fn apply_t(&self, d: Deriv, f: &[f64]) -> Vec<f64> {
        match d {
            Deriv::X1 => self.d1_t(0, f),
            Deriv::X2 => self.d1_t(1, f),
            Deriv::T => self.d1_t(2, f),
            Deriv::X1X1 => self.d2_t(0, f),
            Deriv::X2X2 => self.d2_t(1, f),
            Deriv::TT => self.d2_t(2, f),
            Deriv::X1X2 => self.d1_t(0, &self.d1_t(1, f)),
            Deriv::X1T => self.d1_t(0, &self.d1_t(2, f)),
            Deriv::X2T => self.d1_t(1, &self.d1_t(2, f)),
        }
    }
}

/// Signed trapezoidal `int_{T/2}^{t} f d tau` along the time axis.
pub fn volterra(f: &[f64], dims: Dims, ht: f64) -> Vec<f64> {
    let nt1 = dims.0[2];
    let plane = dims.0[0] * dims.0[1];
    assert_eq!(f.len(), plane * nt1);
    let mid = (nt1 - 1) / 2;
    let half = 0.5 * ht;
    let mut out = vec![0.0; f.len()];
    for k in mid + 1..nt1 {
        for s in 0..plane {
            out[k * plane + s] = out[(k - 1) * plane + s] + half * (f[(k - 1) * plane + s] + f[k * plane + s]);
        }
    }
    for k in (0..mid).rev() {
        for s in 0..plane {
            out[k * plane + s] = out[(k + 1) * plane + s] - half * (f[(k + 1) * plane + s] + f[k * plane + s]);
        }
    }
    out
}

/// Transpose of [`volterra`].
pub fn volterra_t(g: &[f64], dims: Dims, ht: f64) -> Vec<f64> {
    let nt1 = dims.0[2];
    let plane = dims.0[0] * dims.0[1];
    assert_eq!(g.len(), plane * nt1);
    let mid = (nt1 - 1) / 2;
    let half = 0.5 * ht;
    let mut out = vec![0.0; g.len()];
    // Forward half: I_k = I_{k-1} + half (f_{k-1} + f_k), so the cotangent of
    // I_{k-1} accumulates every later g.
    let mut acc = vec![0.0; plane];
    for k in (mid + 1..nt1).rev() {
        for s in 0..plane {
            acc[s] += g[k * plane + s];
            out[k * plane + s] += half * acc[s];
            out[(k - 1) * plane + s] += half * acc[s];
        }
    }
    acc.iter_mut().for_each(|a| *a = 0.0);
    for k in 0..mid {
        for s in 0..plane {
            acc[s] += g[k * plane + s];
            out[k * plane + s] -= half * acc[s];
            out[(k + 1) * plane + s] -= half * acc[s];
        }
    }
    out
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A nodal function on `Omega x [0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: SpaceTimeGrid,
    pub values: Vec<f64>,
}

/// A nodal function on `Omega`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialField {
    pub grid: SpaceTimeGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self { grid: *grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_values(grid: &SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at flat index {p}")));
        }
        Ok(Self { grid: *grid, values })
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.idx(i, j, k)]
    }

    /// The spatial slice at time index `k`.
    pub fn slice(&self, k: usize) -> SpatialField {
        let n = self.grid.spatial_len();
        SpatialField { grid: self.grid, values: self.values[k * n..(k + 1) * n].to_vec() }
    }

    /// Builds a field by stacking the same spatial field at every time node.
    pub fn broadcast(s: &SpatialField) -> Self {
        let mut values = Vec::with_capacity(s.grid.len());
        for _ in 0..s.grid.n_times() {
            values.extend_from_slice(&s.values);
        }
        Self { grid: s.grid, values }
    }

    /// Gradient of the time slice `k`.
    pub fn gradient(&self, k: usize) -> (SpatialField, SpatialField) {
        self.slice(k).gradient()
    }

    pub fn laplacian(&self, k: usize) -> SpatialField {
        self.slice(k).laplacian()
    }

    /// First or second time derivative.
    pub fn time_derivative(&self, order: u8) -> Result<ScalarField> {
        let st = Stencils::new(&self.grid);
        let values = match order {
            1 => st.d1(2, &self.values),
            2 => st.d2(2, &self.values),
            o => return Err(Error::InvalidOrder(o)),
        };
        Ok(ScalarField { grid: self.grid, values })
    }

    /// `int_{T/2}^{t} f d tau` at every node.
    pub fn volterra_integral(&self) -> ScalarField {
        let values = volterra(&self.values, self.grid.space_time_dims(), self.grid.ht());
        ScalarField { grid: self.grid, values }
    }

    /// Tensor trapezoid over `Q_T`.
    pub fn integrate(&self) -> f64 {
        dot(&self.grid.quadrature_weights(), &self.values)
    }

    /// Discrete `H^2(Q_T)` inner product.
    pub fn h2_inner(&self, other: &ScalarField) -> f64 {
        h2_inner(&self.grid, &self.values, &other.values)
    }

    pub fn h2_norm(&self) -> f64 {
        self.h2_inner(self).max(0.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl SpatialField {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self { grid: *grid, values: vec![0.0; grid.spatial_len()] }
    }

    pub fn constant(grid: &SpaceTimeGrid, c: f64) -> Self {
        Self { grid: *grid, values: vec![c; grid.spatial_len()] }
    }

    pub fn from_values(grid: &SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.spatial_len() {
            return Err(Error::ShapeMismatch { expected: grid.spatial_len(), got: values.len() });
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("spatial value at flat index {p}")));
        }
        Ok(Self { grid: *grid, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.sidx(i, j)]
    }

    pub fn gradient(&self) -> (SpatialField, SpatialField) {
        let st = Stencils::new(&self.grid);
        (
            SpatialField { grid: self.grid, values: st.d1(0, &self.values) },
            SpatialField { grid: self.grid, values: st.d1(1, &self.values) },
        )
    }

    pub fn laplacian(&self) -> SpatialField {
        let st = Stencils::new(&self.grid);
        SpatialField { grid: self.grid, values: st.laplacian(&self.values) }
    }

    pub fn divergence(v1: &SpatialField, v2: &SpatialField) -> SpatialField {
        let st = Stencils::new(&v1.grid);
        SpatialField { grid: v1.grid, values: st.divergence(&v1.values, &v2.values) }
    }

    pub fn integrate(&self) -> f64 {
        dot(&self.grid.spatial_quadrature_weights(), &self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Discrete `H^2(Q_T)` inner product of two flat space-time arrays.
pub fn h2_inner(grid: &SpaceTimeGrid, u: &[f64], v: &[f64]) -> f64 {
    let st = Stencils::new(grid);
    let w = grid.quadrature_weights();
    let mut total = 0.0;
    for term in Deriv::H2_TERMS {
        let (du, dv) = match term {
            None => (u.to_vec(), v.to_vec()),
            Some(d) => (st.apply(d, u), st.apply(d, v)),
        };
        total += du.iter().zip(&dv).zip(&w).map(|((a, b), c)| a * b * c).sum::<f64>();
    }
    total
}

/// Applies the `H^2` Gram operator: returns `g` with `<g, v> = h2_inner(u, v)`.
pub fn h2_gram_apply(st: &Stencils, weights: &[f64], u: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = u.iter().zip(weights).map(|(a, w)| a * w).collect();
    for d in Deriv::H2_TERMS.iter().flatten() {
        let du = st.apply(*d, u);
        let wdu: Vec<f64> = du.iter().zip(weights).map(|(a, w)| a * w).collect();
        add_assign(&mut out, &st.apply_t(*d, &wdu));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid20() -> SpaceTimeGrid {
        SpaceTimeGrid::unit_square(20, 10).unwrap()
    }

    fn max_err(a: &[f64], f: impl Fn(usize) -> f64) -> f64 {
        a.iter().enumerate().map(|(n, v)| (v - f(n)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SpaceTimeGrid::unit_square(20, 9).is_err());
        assert!(SpaceTimeGrid::unit_square(3, 10).is_err());
        assert!(SpaceTimeGrid::new((2.0, 1.0), (1.0, 2.0), 1.0, 8, 8, 4).is_err());
        assert!(SpaceTimeGrid::unit_square(4, 2).is_ok());
    }

    #[test]
    fn gradient_of_linear_and_constant() {
        let g = grid20();
        let f = g.sample_spatial(|x1, _| x1);
        let (d1, d2) = f.gradient();
        assert!(max_err(&d1.values, |_| 1.0) < 1e-12);
        assert!(max_err(&d2.values, |_| 0.0) < 1e-12);
        let c = SpatialField::constant(&g, 3.0);
        let (d1, d2) = c.gradient();
        assert!(d1.max().abs() < 1e-12 && d2.min().abs() < 1e-12);
    }

    #[test]
    fn gradient_exact_on_per_axis_quadratics() {
        let g = grid20();
        let f = g.sample_spatial(|x1, x2| x1 * x1 * x2 * x2);
        let (d1, d2) = f.gradient();
        // node (1.5, 1.5) is (10, 10)
        assert!((d1.at(10, 10) - 6.75).abs() < 1e-11);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let (x1, x2) = (g.x1(i), g.x2(j));
                assert!((d1.at(i, j) - 2.0 * x1 * x2 * x2).abs() < 1e-10);
                assert!((d2.at(i, j) - 2.0 * x1 * x1 * x2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_exact_on_quadratics() {
        let g = grid20();
        let f = g.sample_spatial(|x1, x2| x1 * x1 + x2 * x2);
        assert!(max_err(&f.laplacian().values, |_| 4.0) < 1e-9);
        let lin = g.sample_spatial(|x1, x2| 2.0 * x1 - x2 + 1.0);
        assert!(max_err(&lin.laplacian().values, |_| 0.0) < 1e-9);
        let q = g.sample_spatial(|x1, x2| x1 * x1 * x2 * x2);
        let l = q.laplacian();
        assert!((l.at(10, 10) - 9.0).abs() < 1e-9);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let (x1, x2) = (g.x1(i), g.x2(j));
                assert!((l.at(i, j) - 2.0 * (x1 * x1 + x2 * x2)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn divergence_examples() {
        let g = grid20();
        let a = g.sample_spatial(|x1, _| x1);
        let b = g.sample_spatial(|_, x2| x2);
        assert!(max_err(&SpatialField::divergence(&a, &b).values, |_| 2.0) < 1e-12);
        let a = g.sample_spatial(|_, x2| x2);
        let b = g.sample_spatial(|x1, _| -x1);
        assert!(max_err(&SpatialField::divergence(&a, &b).values, |_| 0.0) < 1e-12);
        let a = g.sample_spatial(|x1, x2| x1 * x1 * x2);
        let z = SpatialField::zeros(&g);
        let d = SpatialField::divergence(&a, &z);
        assert!((d.at(10, 10) - 4.5).abs() < 1e-11);
    }

    #[test]
    fn time_derivative_examples() {
        let g = grid20();
        let f = g.sample(|_, _, t| t);
        assert!(max_err(&f.time_derivative(1).unwrap().values, |_| 1.0) < 1e-12);
        assert!(max_err(&f.time_derivative(2).unwrap().values, |_| 0.0) < 1e-9);
        let u = g.sample(|x1, x2, t| x1 * x1 * x2 * x2 * (1.0 + t));
        let ut = u.time_derivative(1).unwrap();
        let expect = g.sample(|x1, x2, _| x1 * x1 * x2 * x2);
        assert!(max_err(&ut.values, |n| expect.values[n]) < 1e-11);
        let p = g.sample(|_, _, t| (t - 0.5) * (t - 0.5));
        assert!(max_err(&p.time_derivative(2).unwrap().values, |_| 2.0) < 1e-9);
        assert!(matches!(f.time_derivative(3), Err(Error::InvalidOrder(3))));
    }

    #[test]
    fn volterra_examples() {
        let g = grid20();
        let one = g.sample(|_, _, _| 1.0);
        let i1 = one.volterra_integral();
        let expect = g.sample(|_, _, t| t - 0.5);
        assert!(max_err(&i1.values, |n| expect.values[n]) < 1e-12);
        let tau = g.sample(|_, _, t| t);
        let it = tau.volterra_integral();
        let expect = g.sample(|_, _, t| (t * t - 0.25) / 2.0);
        assert!(max_err(&it.values, |n| expect.values[n]) < 1e-12);
        let any = g.sample(|x1, x2, t| (x1 * t).sin() + x2);
        assert!(any.volterra_integral().slice(g.mid()).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadrature_examples() {
        let g = grid20();
        assert!((g.sample(|_, _, _| 1.0).integrate() - 1.0).abs() < 1e-12);
        assert!((g.sample(|x1, _, _| x1).integrate() - 1.5).abs() < 1e-12);
        // Trapezoid error for x^2 on [1,2] is exactly h^2/6 per axis factor.
        let f = g.sample(|x1, x2, _| x1 * x1 * x2 * x2);
        let h = g.h1();
        let axis = 7.0 / 3.0 + h * h / 6.0;
        assert!((f.integrate() - axis * axis).abs() < 1e-12);
        let fine = SpaceTimeGrid::unit_square(80, 10).unwrap();
        let ff = fine.sample(|x1, x2, _| x1 * x1 * x2 * x2);
        let exact = 49.0 / 9.0;
        let (e20, e80) = ((f.integrate() - exact).abs(), (ff.integrate() - exact).abs());
        assert!(e20 / e80 > 15.0 && e20 / e80 < 17.0);
    }

    #[test]
    fn h2_norm_examples() {
        let g = grid20();
        assert_eq!(ScalarField::zeros(&g).h2_norm(), 0.0);
        assert!((g.sample(|_, _, _| 1.0).h2_norm() - 1.0).abs() < 1e-12);
        let x = g.sample(|x1, _, _| x1);
        // continuum: int (x1^2 + 1) = 7/3 + 1; trapezoid adds h^2/6.
        let h = g.h1();
        let discrete = 7.0 / 3.0 + h * h / 6.0 + 1.0;
        assert!((x.h2_norm().powi(2) - discrete).abs() < 1e-10);
        assert!((x.h2_norm().powi(2) - 10.0 / 3.0).abs() < h * h);
    }

    #[test]
    fn stencil_transposes_are_adjoint() {
        let g = SpaceTimeGrid::unit_square(6, 4).unwrap();
        let st = Stencils::new(&g);
        let u: Vec<f64> = (0..g.len()).map(|n| ((n * 37 % 11) as f64).sin()).collect();
        let v: Vec<f64> = (0..g.len()).map(|n| ((n * 17 % 13) as f64).cos()).collect();
        for d in Deriv::H2_TERMS.iter().flatten() {
            let lhs = dot(&st.apply(*d, &u), &v);
            let rhs = dot(&u, &st.apply_t(*d, &v));
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{d:?}");
        }
        let dims = g.space_time_dims();
        let lhs = dot(&volterra(&u, dims, g.ht()), &v);
        let rhs = dot(&u, &volterra_t(&v, dims, g.ht()));
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = dot(&st.laplacian(&u), &v);
        let rhs = dot(&u, &st.laplacian_t(&v));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn gram_matches_inner_product() {
        let g = SpaceTimeGrid::unit_square(6, 4).unwrap();
        let st = Stencils::new(&g);
        let w = g.quadrature_weights();
        let u: Vec<f64> = (0..g.len()).map(|n| (n as f64 * 0.37).sin()).collect();
        let v: Vec<f64> = (0..g.len()).map(|n| (n as f64 * 0.11).cos()).collect();
        let lhs = dot(&h2_gram_apply(&st, &w, &u), &v);
        assert!((lhs - h2_inner(&g, &u, &v)).abs() < 1e-9 * lhs.abs());
    }

    #[test]
    fn refinement_detection() {
        let fine = SpaceTimeGrid::unit_square(160, 320).unwrap();
        let coarse = SpaceTimeGrid::unit_square(20, 10).unwrap();
        assert_eq!(fine.refinement_of(&coarse).unwrap(), (8, 8, 32));
        let odd = SpaceTimeGrid::unit_square(30, 10).unwrap();
        assert!(fine.refinement_of(&odd).is_err());
    }
}
