//! Synthetic data generation: solve the Fokker-Planck equation for a chosen
//! coefficient and value function, back out the running cost `f` from the
//! Hamilton-Jacobi-Bellman equation, and sample the observations the inverse
//! solver is allowed to see.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{ScalarField, SpaceTimeGrid, SpatialField, Stencils};
use crate::linalg::{bicgstab, BandedLu, CsrMatrix};
use crate::model::{Kernel, KernelOp, ValueFunction};
use crate::residuals::compute_big_f;

pub type Field3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Linear solver used for each implicit step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearSolver {
    /// Banded LU with partial pivoting.
    Banded,
    /// Jacobi-preconditioned BiCGSTAB.
    BiCgStab { tol: f64, max_iter: usize },
    /// Banded for small systems, BiCGSTAB otherwise.
    Auto,
}

/// Spatial discretization of `div(k m grad u)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advection {
    /// Product-rule expansion at nodes with central differences.
    NonConservative,
    /// Face fluxes with averaged `k` and `m`.
    Conservative,
}

#[derive(Clone)]
pub struct ForwardConfig {
    pub grid: SpaceTimeGrid,
    /// Dirichlet data for the density on the lateral boundary.
    pub boundary: Field3,
    /// Initial density.
    pub initial: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub density_floor: f64,
    pub solver: LinearSolver,
    pub advection: Advection,
}

impl std::fmt::Debug for ForwardConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardConfig")
            .field("grid", &self.grid)
            .field("density_floor", &self.density_floor)
            .field("solver", &self.solver)
            .field("advection", &self.advection)
            .finish()
    }
}

impl ForwardConfig {
    /// `m(x, 0) = 1`, `m = 1 + x1 x2 t` on the boundary.
    pub fn standard(grid: SpaceTimeGrid) -> Self {
        Self {
            grid,
            boundary: Arc::new(|x1, x2, t| 1.0 + x1 * x2 * t),
            initial: Arc::new(|_, _| 1.0),
            density_floor: 1e-6,
            solver: LinearSolver::Auto,
            advection: Advection::NonConservative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density_floor > 0.0) {
            return Err(Error::InvalidConfig("density floor must be positive".into()));
        }
        let g = &self.grid;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                if g.is_boundary(i, j) {
                    let (x1, x2) = (g.x1(i), g.x2(j));
                    let (b, m) = ((self.boundary)(x1, x2, 0.0), (self.initial)(x1, x2));
                    if (b - m).abs() > 1e-12 * m.abs().max(1.0) {
                        return Err(Error::InvalidConfig(format!(
                            "boundary datum {b} differs from initial density {m} at ({x1}, {x2}, 0)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Backward-Euler solve of `m_t - Lap m - div(k m grad u) = source`.
pub fn solve_fokker_planck(
    k: &SpatialField,
    vf: &dyn ValueFunction,
    cfg: &ForwardConfig,
    source: Option<&(dyn Fn(f64, f64, f64) -> f64 + Sync)>,
) -> Result<ScalarField> {
    cfg.validate()?;
    let g = cfg.grid;
    if k.values.len() != g.spatial_len() {
        return Err(Error::ShapeMismatch { expected: g.spatial_len(), got: k.values.len() });
    }
    let (n1, n2) = (g.n1, g.n2);
    let (h1, h2, ht) = (g.h1(), g.h2(), g.ht());
    let (mx, my) = (n1 - 1, n2 - 1);
    let n = mx * my;
    let unknown = |i: usize, j: usize| (j - 1) * mx + (i - 1);
    let st = Stencils::new(&g);
    let kx = st.d1(0, &k.values);
    let ky = st.d1(1, &k.values);
    let solver = match cfg.solver {
        LinearSolver::Auto => {
            if (n as f64) * (mx as f64) * (2 * mx) as f64 <= 2.5e8 {
                LinearSolver::Banded
            } else {
                LinearSolver::BiCgStab { tol: 1e-13, max_iter: 5000 }
            }
        }
        s => s,
    };

    let mut out = Vec::with_capacity(g.len());
    let mut current: Vec<f64> = Vec::with_capacity(g.spatial_len());
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            current.push((cfg.initial)(g.x1(i), g.x2(j)));
        }
    }
    out.extend_from_slice(&current);

    let mut x: Vec<f64> = vec![0.0; n];
    for step in 1..g.n_times() {
        let t = g.t(step);
        let mut next = vec![0.0; g.spatial_len()];
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                if g.is_boundary(i, j) {
                    next[g.sidx(i, j)] = (cfg.boundary)(g.x1(i), g.x2(j), t);
                }
            }
        }
        let mut a = CsrMatrix::with_capacity(n, 5 * n);
        let mut rhs = vec![0.0; n];
        for j in 1..=my {
            for i in 1..=mx {
                let s = g.sidx(i, j);
                let (x1, x2) = (g.x1(i), g.x2(j));
                // Coefficients of -Lap m - div(k m grad u) on (W, E, S, N, C).
                let mut w = -1.0 / (h1 * h1);
                let mut e = -1.0 / (h1 * h1);
                let mut so = -1.0 / (h2 * h2);
                let mut no = -1.0 / (h2 * h2);
                let mut c = 2.0 / (h1 * h1) + 2.0 / (h2 * h2);
                match cfg.advection {
                    Advection::NonConservative => {
                        let (b1, b2) = vf.grad(x1, x2, t);
                        let kk = k.values[s];
                        e -= kk * b1 / (2.0 * h1);
                        w += kk * b1 / (2.0 * h1);
                        no -= kk * b2 / (2.0 * h2);
                        so += kk * b2 / (2.0 * h2);
                        c -= kx[s] * b1 + ky[s] * b2 + kk * vf.laplacian(x1, x2, t);
                    }
                    Advection::Conservative => {
                        let ke = 0.5 * (k.values[s] + k.values[s + 1]);
                        let kw = 0.5 * (k.values[s] + k.values[s - 1]);
                        let kn = 0.5 * (k.values[s] + k.values[s + g.nx()]);
                        let ks = 0.5 * (k.values[s] + k.values[s - g.nx()]);
                        let fe = ke * vf.grad(x1 + 0.5 * h1, x2, t).0 / (2.0 * h1);
                        let fw = kw * vf.grad(x1 - 0.5 * h1, x2, t).0 / (2.0 * h1);
                        let fn_ = kn * vf.grad(x1, x2 + 0.5 * h2, t).1 / (2.0 * h2);
                        let fs = ks * vf.grad(x1, x2 - 0.5 * h2, t).1 / (2.0 * h2);
                        e -= fe;
                        c -= fe - fw;
                        w += fw;
                        no -= fn_;
                        c -= fn_ - fs;
                        so += fs;
                    }
                }
                let r = unknown(i, j);
                let mut b = current[s];
                if let Some(src) = source {
                    b += ht * src(x1, x2, t);
                }
                let mut row = Vec::with_capacity(5);
                let mut couple = |ii: usize, jj: usize, coef: f64, row: &mut Vec<(usize, f64)>| {
                    if g.is_boundary(ii, jj) {
                        b -= ht * coef * next[g.sidx(ii, jj)];
                    } else {
                        row.push((unknown(ii, jj), ht * coef));
                    }
                };
                couple(i, j - 1, so, &mut row);
                couple(i - 1, j, w, &mut row);
                row.push((r, 1.0 + ht * c));
                couple(i + 1, j, e, &mut row);
                couple(i, j + 1, no, &mut row);
                a.push_row(row);
                rhs[r] = b;
            }
        }
        match solver {
            LinearSolver::Banded | LinearSolver::Auto => {
                let lu = BandedLu::factor(&a).map_err(|col| Error::LinearSolve {
                    step,
                    reason: format!("zero pivot in column {col}"),
                })?;
                lu.solve(&mut rhs);
                x.copy_from_slice(&rhs);
            }
            LinearSolver::BiCgStab { tol, max_iter } => {
                for jj in 1..=my {
                    for ii in 1..=mx {
                        x[unknown(ii, jj)] = current[g.sidx(ii, jj)];
                    }
                }
                bicgstab(&a, &rhs, &mut x, tol, max_iter)
                    .map_err(|reason| Error::LinearSolve { step, reason })?;
            }
        }
        for j in 1..=my {
            for i in 1..=mx {
                next[g.sidx(i, j)] = x[unknown(i, j)];
            }
        }
        if let Some(p) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::LinearSolve { step, reason: format!("non-finite density at spatial node {p}") });
        }
        out.extend_from_slice(&next);
        current = next;
    }
    let m = ScalarField { grid: g, values: out };
    check_density_floor(&m, cfg.density_floor)?;
    Ok(m)
}

pub fn check_density_floor(m: &ScalarField, floor: f64) -> Result<()> {
    let (pos, min) = m
        .values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(p, v), (n, x)| if x.abs() < v { (n, x.abs()) } else { (p, v) });
    if min < floor {
        let g = m.grid;
        let plane = g.spatial_len();
        let (k, s) = (pos / plane, pos % plane);
        return Err(Error::DensityFloor { min, floor, i: s % g.nx(), j: s / g.nx(), k });
    }
    Ok(())
}

/// `f = -(u_t + Lap u - k |grad u|^2 / 2 + K m) / m`, derivatives of `u` exact.
pub fn synthesize_f(
    vf: &dyn ValueFunction,
    m: &ScalarField,
    k: &SpatialField,
    kernel: &Kernel,
    density_floor: f64,
) -> Result<ScalarField> {
    check_density_floor(m, density_floor)?;
    let g = m.grid;
    let conv = KernelOp::new(kernel, &g).apply(&m.values);
    let mut values = Vec::with_capacity(g.len());
    let plane = g.spatial_len();
    for kt in 0..g.n_times() {
        let t = g.t(kt);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let (x1, x2) = (g.x1(i), g.x2(j));
                let n = kt * plane + g.sidx(i, j);
                let (a, b) = vf.grad(x1, x2, t);
                let num = vf.dt(x1, x2, t) + vf.laplacian(x1, x2, t) - 0.5 * k.values[g.sidx(i, j)] * (a * a + b * b)
                    + conv[n];
                values.push(-num / m.values[n]);
            }
        }
    }
    Ok(ScalarField { grid: g, values })
}

/// Time derivatives of one traced quantity on the lateral boundary.
///
/// `dirichlet` is laid out `[time][boundary node]` following
/// [`SpaceTimeGrid::boundary_nodes`]; `neumann` holds the `x1 = b` face,
/// `[time][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTrace {
    pub dirichlet: Vec<f64>,
    pub neumann: Vec<f64>,
}

impl BoundaryTrace {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            dirichlet: vec![0.0; grid.boundary_nodes().len() * grid.n_times()],
            neumann: vec![0.0; grid.ny() * grid.n_times()],
        }
    }

    pub fn conforms(&self, grid: &SpaceTimeGrid) -> bool {
        self.dirichlet.len() == grid.boundary_nodes().len() * grid.n_times()
            && self.neumann.len() == grid.ny() * grid.n_times()
    }

    /// Dirichlet part of a full field.
    pub fn from_fields(dirichlet: &ScalarField, neumann: &ScalarField) -> Self {
        let g = dirichlet.grid;
        let nodes = g.boundary_nodes();
        let plane = g.spatial_len();
        let mut d = Vec::with_capacity(nodes.len() * g.n_times());
        let mut nm = Vec::with_capacity(g.ny() * g.n_times());
        for k in 0..g.n_times() {
            d.extend(nodes.iter().map(|s| dirichlet.values[k * plane + s]));
            nm.extend((0..g.ny()).map(|j| neumann.values[g.idx(g.n1, j, k)]));
        }
        Self { dirichlet: d, neumann: nm }
    }
}

/// Raw (undifferentiated) boundary observations `g0, g1, p0, p1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTraces {
    /// `u` on the lateral boundary.
    pub g0: Vec<f64>,
    /// `u_x1` on `x1 = b`.
    pub g1: Vec<f64>,
    /// `m` on the lateral boundary.
    pub p0: Vec<f64>,
    /// `m_x1` on `x1 = b`.
    pub p1: Vec<f64>,
}

/// Everything the inverse solver may use.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub grid: SpaceTimeGrid,
    pub u0: SpatialField,
    pub m0: SpatialField,
    /// `Lap u0 + K m0 + f(., T/2) m0`.
    pub big_f: SpatialField,
    pub f: ScalarField,
    pub f_t: ScalarField,
    pub f_tt: ScalarField,
    /// Traces for `v, w, p, q`.
    pub traces: [BoundaryTrace; 4],
    pub raw: RawTraces,
    pub grad_floor: f64,
}

impl ProblemData {
    /// Checks trace shapes and the lower bound on `|grad u0|^2`.
    pub fn validate(&self) -> Result<()> {
        for (n, tr) in self.traces.iter().enumerate() {
            if !tr.conforms(&self.grid) {
                return Err(Error::MissingTraces(format!("trace {n} does not match the grid")));
            }
        }
        let (gx, gy) = self.u0.gradient();
        for j in 0..self.grid.ny() {
            for i in 0..self.grid.nx() {
                let v = gx.at(i, j).powi(2) + gy.at(i, j).powi(2);
                if v < self.grad_floor {
                    return Err(Error::GradientFloor { value: v, floor: self.grad_floor, i, j });
                }
            }
        }
        Ok(())
    }

    /// Data with every input set to zero (useful as a null problem).
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        let z = ScalarField::zeros(grid);
        let zs = SpatialField::zeros(grid);
        let tr = BoundaryTrace::zeros(grid);
        Self {
            grid: *grid,
            u0: zs.clone(),
            m0: zs.clone(),
            big_f: zs,
            f: z.clone(),
            f_t: z.clone(),
            f_tt: z,
            traces: [tr.clone(), tr.clone(), tr.clone(), tr.clone()],
            raw: RawTraces {
                g0: tr.dirichlet.clone(),
                g1: tr.neumann.clone(),
                p0: tr.dirichlet.clone(),
                p1: tr.neumann.clone(),
            },
            grad_floor: 0.0,
        }
    }
}

/// Quantities known only to the data generator, kept for scoring.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Target coefficient injected onto the inversion grid.
    pub k: SpatialField,
    /// Exact `(u_t, u_tt, m_t, m_tt)` on the inversion grid.
    pub state: [ScalarField; 4],
}

/// Fine-grid forward solution.
#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub k: SpatialField,
    pub m: ScalarField,
    pub f: ScalarField,
}

/// Runs the full generator on the fine grid.
pub fn generate(
    k: &SpatialField,
    vf: &dyn ValueFunction,
    kernel: &Kernel,
    cfg: &ForwardConfig,
) -> Result<ForwardSolution> {
    kernel.validate()?;
    let m = solve_fokker_planck(k, vf, cfg, None)?;
    let f = synthesize_f(vf, &m, k, kernel, cfg.density_floor)?;
    Ok(ForwardSolution { k: k.clone(), m, f })
}

fn inject(fine: &ScalarField, coarse: &SpaceTimeGrid, r: (usize, usize, usize)) -> ScalarField {
    let mut values = Vec::with_capacity(coarse.len());
    for k in 0..coarse.n_times() {
        for j in 0..coarse.ny() {
            for i in 0..coarse.nx() {
                values.push(fine.at(i * r.0, j * r.1, k * r.2));
            }
        }
    }
    ScalarField { grid: *coarse, values }
}

fn inject_spatial(fine: &SpatialField, coarse: &SpaceTimeGrid, r: (usize, usize, usize)) -> SpatialField {
    let mut values = Vec::with_capacity(coarse.spatial_len());
    for j in 0..coarse.ny() {
        for i in 0..coarse.nx() {
            values.push(fine.at(i * r.0, j * r.1));
        }
    }
    SpatialField { grid: *coarse, values }
}

/// Samples observations and ground truth onto the inversion grid.
pub fn extract_observations(
    vf: &dyn ValueFunction,
    sol: &ForwardSolution,
    kernel: &Kernel,
    coarse: &SpaceTimeGrid,
    grad_floor: f64,
) -> Result<(ProblemData, GroundTruth)> {
    let fine = sol.m.grid;
    let r = fine.refinement_of(coarse)?;
    let g = *coarse;
    let mid = g.mid();
    let fst = Stencils::new(&fine);

    // Density-derived quantities are differentiated on the fine grid.
    let m_t = sol.m.time_derivative(1)?;
    let m_tt = sol.m.time_derivative(2)?;
    let m_x1 = ScalarField { grid: fine, values: fst.d1(0, &sol.m.values) };
    let m_x1_t = m_x1.time_derivative(1)?;
    let m_x1_tt = m_x1.time_derivative(2)?;
    let f_t = sol.f.time_derivative(1)?;
    let f_tt = sol.f.time_derivative(2)?;

    let m_c = inject(&sol.m, &g, r);
    let f_c = inject(&sol.f, &g, r);
    let u0 = g.sample_spatial(|a, b| vf.value(a, b, g.t(mid)));
    let m0 = m_c.slice(mid);
    let big_f = compute_big_f(&u0, &m0, &f_c.slice(mid), kernel);

    let u_field = g.sample(|a, b, t| vf.value(a, b, t));
    let u_x1 = g.sample(|a, b, t| vf.grad(a, b, t).0);
    let traces = [
        BoundaryTrace::from_fields(
            &g.sample(|a, b, t| vf.dt(a, b, t)),
            &g.sample(|a, b, t| vf.grad_t(a, b, t).0),
        ),
        BoundaryTrace::from_fields(
            &g.sample(|a, b, t| vf.dtt(a, b, t)),
            &g.sample(|a, b, t| vf.grad_tt(a, b, t).0),
        ),
        BoundaryTrace::from_fields(&inject(&m_t, &g, r), &inject(&m_x1_t, &g, r)),
        BoundaryTrace::from_fields(&inject(&m_tt, &g, r), &inject(&m_x1_tt, &g, r)),
    ];
    let raw_u = BoundaryTrace::from_fields(&u_field, &u_x1);
    let raw_m = BoundaryTrace::from_fields(&m_c, &inject(&m_x1, &g, r));
    let data = ProblemData {
        grid: g,
        u0,
        m0,
        big_f,
        f: f_c,
        f_t: inject(&f_t, &g, r),
        f_tt: inject(&f_tt, &g, r),
        traces,
        raw: RawTraces { g0: raw_u.dirichlet, g1: raw_u.neumann, p0: raw_m.dirichlet, p1: raw_m.neumann },
        grad_floor,
    };
    data.validate()?;
    let truth = GroundTruth {
        k: inject_spatial(&sol.k, &g, r),
        state: [
            g.sample(|a, b, t| vf.dt(a, b, t)),
            g.sample(|a, b, t| vf.dtt(a, b, t)),
            inject(&m_t, &g, r),
            inject(&m_tt, &g, r),
        ],
    };
    Ok((data, truth))
}

/// Node-wise residuals of both equations of the mean field games system for
/// a generated tuple, evaluated with the grid operators.
///
/// The Fokker-Planck residual uses the backward difference in time (the
/// generator's time integrator) and the divergence of the nodal flux
/// `k m grad u`; the HJB residual uses central time differences of `u`.
/// Returns `(hjb, fp)` as space-time fields; the Fokker-Planck residual is
/// zero on boundary nodes and at `t = 0`.
pub fn mfgs_residuals(
    vf: &dyn ValueFunction,
    sol: &ForwardSolution,
    kernel: &Kernel,
) -> Result<(ScalarField, ScalarField)> {
    let g = sol.m.grid;
    let st = Stencils::new(&g);
    let u = g.sample(|a, b, t| vf.value(a, b, t));
    let u_t = u.time_derivative(1)?;
    let ux = st.d1(0, &u.values);
    let uy = st.d1(1, &u.values);
    let lap_u = st.laplacian(&u.values);
    let conv = KernelOp::new(kernel, &g).apply(&sol.m.values);
    let plane = g.spatial_len();
    let kfull = ScalarField::broadcast(&sol.k).values;
    let hjb: Vec<f64> = (0..g.len())
        .map(|n| {
            u_t.values[n] + lap_u[n] - 0.5 * kfull[n] * (ux[n] * ux[n] + uy[n] * uy[n])
                + conv[n]
                + sol.f.values[n] * sol.m.values[n]
        })
        .collect();

    let m = &sol.m.values;
    let flux1: Vec<f64> = (0..g.len()).map(|n| kfull[n] * m[n] * ux[n]).collect();
    let flux2: Vec<f64> = (0..g.len()).map(|n| kfull[n] * m[n] * uy[n]).collect();
    let div = st.divergence(&flux1, &flux2);
    let lap_m = st.laplacian(m);
    let ht = g.ht();
    let mut fp = vec![0.0; g.len()];
    for k in 1..g.n_times() {
        for j in 1..g.n2 {
            for i in 1..g.n1 {
                let n = k * plane + g.sidx(i, j);
                fp[n] = (m[n] - m[n - plane]) / ht - lap_m[n] - div[n];
            }
        }
    }
    Ok((ScalarField { grid: g, values: hjb }, ScalarField { grid: g, values: fp }))
}

/// Discrete `L2(Q_T)` norm.
pub fn l2_norm(f: &ScalarField) -> f64 {
    let w = f.grid.quadrature_weights();
    f.values.iter().zip(&w).map(|(v, w)| v * v * w).sum::<f64>().sqrt()
}
