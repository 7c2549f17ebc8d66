//! The Carleman-weighted functional, its exact discrete gradient, and the
//! elimination of boundary conditions into a free-node parameterization.

use crate::error::{Error, Result};
use crate::forward::ProblemData;
use crate::grid::{h2_gram_apply, h2_inner, ScalarField, SpaceTimeGrid, Stencils};
use crate::model::Kernel;
use crate::residuals::{Operators, StateVector, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarlemanConfig {
    pub lambda: f64,
    pub beta: f64,
    /// Right end of the `x1` interval.
    pub b: f64,
    pub t_max: f64,
}

impl CarlemanConfig {
    pub fn new(lambda: f64, beta: f64, grid: &SpaceTimeGrid) -> Result<Self> {
        let c = Self { lambda, beta, b: grid.x1_max, t_max: grid.t_max };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        Ok(())
    }

    /// `log(e^{-2 lambda b^2} phi_lambda)`, never positive on the domain.
    pub fn log_scaled_weight(&self, x1: f64, t: f64) -> f64 {
        let s = t - 0.5 * self.t_max;
        2.0 * self.lambda * (x1 * x1 - self.b * self.b) - 2.0 * self.lambda * s * s
    }
}

/// `phi_lambda = exp(2 lambda (x1^2 - (t - T/2)^2))` at every node.
pub fn cwf(lambda: f64, grid: &SpaceTimeGrid) -> ScalarField {
    let half = 0.5 * grid.t_max;
    grid.sample(|x1, _, t| (2.0 * lambda * (x1 * x1 - (t - half) * (t - half))).exp())
}

/// `e^{-2 lambda b^2} phi_lambda`, evaluated in log space.
pub fn cwf_scaled(cfg: &CarlemanConfig, grid: &SpaceTimeGrid) -> ScalarField {
    grid.sample(|x1, _, t| cfg.log_scaled_weight(x1, t).exp())
}

/// Role of a node within one component of `U`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeClass {
    Dirichlet,
    /// Second-to-last column on the `x1 = b` side, fixed by the one-sided
    /// Neumann stencil.
    Neumann,
    Free,
}

/// Boundary-condition elimination shared by the four components.
#[derive(Clone, Debug)]
pub struct ConstraintMap {
    grid: SpaceTimeGrid,
    /// Flat space-time indices of the free nodes of one component.
    free: Vec<usize>,
    /// `(dependent index, partner index, k, j)` for every Neumann node.
    neumann: Vec<(usize, usize, usize, usize)>,
    /// `(flat index, position in the Dirichlet trace)`.
    dirichlet: Vec<(usize, usize)>,
}

impl ConstraintMap {
    pub fn new(grid: &SpaceTimeGrid) -> Self {
        let g = *grid;
        let bnodes = g.boundary_nodes();
        let mut free = Vec::new();
        let mut neumann = Vec::new();
        let mut dirichlet = Vec::new();
        for k in 0..g.n_times() {
            for (pos, s) in bnodes.iter().enumerate() {
                dirichlet.push((k * g.spatial_len() + s, k * bnodes.len() + pos));
            }
            for j in 1..g.n2 {
                for i in 1..g.n1 - 1 {
                    free.push(g.idx(i, j, k));
                }
                neumann.push((g.idx(g.n1 - 1, j, k), g.idx(g.n1 - 2, j, k), k, j));
            }
        }
        Self { grid: g, free, neumann, dirichlet }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    /// Free nodes per component.
    pub fn free_per_component(&self) -> usize {
        self.free.len()
    }

    /// Length of the free vector (all four components).
    pub fn free_len(&self) -> usize {
        4 * self.free.len()
    }

    pub fn classify(&self, i: usize, j: usize) -> NodeClass {
        let g = &self.grid;
        if g.is_boundary(i, j) {
            NodeClass::Dirichlet
        } else if i == g.n1 - 1 {
            NodeClass::Neumann
        } else {
            NodeClass::Free
        }
    }

    /// Scatters free values, fills Dirichlet nodes from the traces and
    /// solves the Neumann relation `v(n1-1) = (v(n1-2) - rhs) / 4` with
    /// `rhs = 2 h1 dg1 - 3 dg0`.
    pub fn apply_constraints(&self, free: &[f64], data: &ProblemData) -> Result<StateVector> {
        if free.len() != self.free_len() {
            return Err(Error::ShapeMismatch { expected: self.free_len(), got: free.len() });
        }
        let g = &self.grid;
        if data.grid != *g {
            return Err(Error::InvalidGrid("data and constraint map use different grids".into()));
        }
        for (c, tr) in data.traces.iter().enumerate() {
            if !tr.conforms(g) {
                return Err(Error::MissingTraces(format!("trace {c} does not match the grid")));
            }
        }
        let nf = self.free.len();
        let h1 = g.h1();
        let mut u = StateVector::zeros(g);
        for c in 0..4 {
            let comp = &mut u.components[c];
            let tr = &data.traces[c];
            for (n, &idx) in self.free.iter().enumerate() {
                comp[idx] = free[c * nf + n];
            }
            for &(idx, pos) in &self.dirichlet {
                comp[idx] = tr.dirichlet[pos];
            }
            for &(dep, partner, k, j) in &self.neumann {
                let edge = comp[g.idx(g.n1, j, k)];
                let rhs = 2.0 * h1 * tr.neumann[k * g.ny() + j] - 3.0 * edge;
                comp[dep] = (comp[partner] - rhs) / 4.0;
            }
        }
        Ok(u)
    }

    /// Gathers the free nodes; the left inverse of [`Self::apply_constraints`].
    pub fn extract_free(&self, u: &StateVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.free_len());
        for c in 0..4 {
            out.extend(self.free.iter().map(|&i| u.components[c][i]));
        }
        out
    }

    /// Pulls a gradient with respect to every node back to the free nodes.
    pub fn pullback(&self, full: &[Vec<f64>; 4]) -> Vec<f64> {
        let mut grad = full.clone();
        for comp in grad.iter_mut() {
            for &(dep, partner, _, _) in &self.neumann {
                comp[partner] += 0.25 * comp[dep];
            }
        }
        self.extract_free(&StateVector { grid: self.grid, components: grad })
    }
}

/// `J` split into its two parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Breakdown {
    pub total: f64,
    /// Weighted residual integrals.
    pub residual: f64,
    /// `beta ||U||^2_{H^2}`.
    pub regularization: f64,
}

/// The convexified functional on one data set.
#[derive(Clone)]
pub struct Objective {
    pub cfg: CarlemanConfig,
    pub data: ProblemData,
    pub map: ConstraintMap,
    ops: Operators,
    st: Stencils,
    quad: Vec<f64>,
    /// Quadrature weight times scaled CWF times the `lambda^{3/2}` factor,
    /// per residual.
    weights: [Vec<f64>; 4],
}

impl Objective {
    pub fn new(data: &ProblemData, kernel: &Kernel, cfg: CarlemanConfig) -> Result<Self> {
        cfg.validate()?;
        let g = data.grid;
        let ops = Operators::new(data, kernel)?;
        let quad = g.quadrature_weights();
        let phi = cwf_scaled(&cfg, &g);
        let base: Vec<f64> = quad.iter().zip(&phi.values).map(|(q, w)| q * w).collect();
        let lam = cfg.lambda.powf(1.5);
        let odd: Vec<f64> = base.iter().map(|w| lam * w).collect();
        Ok(Self {
            cfg,
            data: data.clone(),
            map: ConstraintMap::new(&g),
            st: Stencils::new(&g),
            ops,
            quad,
            weights: [odd.clone(), base.clone(), odd, base],
        })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.data.grid
    }

    pub fn free_len(&self) -> usize {
        self.map.free_len()
    }

    pub fn state(&self, free: &[f64]) -> Result<StateVector> {
        self.map.apply_constraints(free, &self.data)
    }

    fn check_finite(&self, tape: &Tape) -> Result<()> {
        let g = self.grid();
        for (c, r) in tape.residuals.iter().enumerate() {
            if let Some(n) = r.iter().position(|v| !v.is_finite()) {
                let plane = g.spatial_len();
                let s = n % plane;
                return Err(Error::NonFinite(format!(
                    "residual L{} at node ({}, {}, {})",
                    c + 1,
                    s % g.nx(),
                    s / g.nx(),
                    n / plane
                )));
            }
        }
        Ok(())
    }

    fn residual_part(&self, tape: &Tape) -> f64 {
        (0..4)
            .map(|c| tape.residuals[c].iter().zip(&self.weights[c]).map(|(l, w)| w * l * l).sum::<f64>())
            .sum()
    }

    /// Both parts of `J` at a full state (boundary conditions not enforced).
    pub fn breakdown_state(&self, u: &StateVector) -> Result<Breakdown> {
        let tape = self.ops.evaluate(u);
        self.check_finite(&tape)?;
        let residual = self.residual_part(&tape);
        let regularization =
            self.cfg.beta * u.components.iter().map(|c| h2_inner(self.grid(), c, c)).sum::<f64>();
        Ok(Breakdown { total: residual + regularization, residual, regularization })
    }

    pub fn breakdown(&self, free: &[f64]) -> Result<Breakdown> {
        self.breakdown_state(&self.state(free)?)
    }

    pub fn value(&self, free: &[f64]) -> Result<f64> {
        Ok(self.breakdown(free)?.total)
    }

    /// Gradient of `J` with respect to every node of a full state.
    pub fn state_gradient(&self, u: &StateVector) -> Result<(Breakdown, [Vec<f64>; 4])> {
        let tape = self.ops.evaluate(u);
        self.check_finite(&tape)?;
        let residual = self.residual_part(&tape);
        let cot: [Vec<f64>; 4] = std::array::from_fn(|c| {
            tape.residuals[c].iter().zip(&self.weights[c]).map(|(l, w)| 2.0 * w * l).collect()
        });
        let mut grad = self.ops.vjp(&tape, &cot);
        let mut regularization = 0.0;
        for c in 0..4 {
            let gram = h2_gram_apply(&self.st, &self.quad, &u.components[c]);
            regularization += gram.iter().zip(&u.components[c]).map(|(a, b)| a * b).sum::<f64>();
            grad[c].iter_mut().zip(&gram).for_each(|(g, r)| *g += 2.0 * self.cfg.beta * r);
        }
        regularization *= self.cfg.beta;
        Ok((Breakdown { total: residual + regularization, residual, regularization }, grad))
    }

    /// `J` and its gradient with respect to the free nodes.
    pub fn value_and_gradient(&self, free: &[f64]) -> Result<(f64, Vec<f64>)> {
        let u = self.state(free)?;
        let (b, full) = self.state_gradient(&u)?;
        Ok((b.total, self.map.pullback(&full)))
    }

    pub fn gradient(&self, free: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(free)?.1)
    }
}
