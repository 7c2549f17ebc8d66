//! The transformed system for `U = (v, w, p, q) = (u_t, u_tt, m_t, m_tt)`:
//! the four residual operators, their exact reverse-mode derivative, and the
//! formula that recovers `k` from `v(., T/2)`.
//!
//! With `Psi = [v - int w + F] / |grad u0|^2`, `G = int grad v + grad u0` and
//! `M = int p + m0` (all integrals from `T/2`):
//!
//! ```text
//! L1 = v_t + Lap v - 2 (grad v . G) Psi + K p + f p + f_t M
//! L2 = p_t - Lap p - 2 div(Psi (p G + M grad v))
//! L3 = w_t + Lap w - 2 (grad w . G + |grad v|^2) Psi + K q + f q + 2 f_t p + f_tt M
//! L4 = q_t - Lap q - 2 div(Psi (q G + 2 p grad v + M grad w))
//! ```

use crate::error::{Error, Result};
use crate::forward::ProblemData;
use crate::grid::{add_assign, volterra, volterra_t, Dims, ScalarField, SpaceTimeGrid, SpatialField, Stencils};
use crate::model::{Kernel, KernelOp};

/// The unknown quadruple on the inversion grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub grid: SpaceTimeGrid,
    /// `[v, w, p, q]`, each a flat space-time array.
    pub components: [Vec<f64>; 4],
}

impl StateVector {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        let z = vec![0.0; grid.len()];
        Self { grid: *grid, components: [z.clone(), z.clone(), z.clone(), z] }
    }

    pub fn from_fields(fields: [ScalarField; 4]) -> Result<Self> {
        let grid = fields[0].grid;
        if fields.iter().any(|f| f.grid != grid) {
            return Err(Error::InvalidGrid("state components live on different grids".into()));
        }
        let [a, b, c, d] = fields;
        Ok(Self { grid, components: [a.values, b.values, c.values, d.values] })
    }

    pub fn v(&self) -> &[f64] {
        &self.components[0]
    }
    pub fn w(&self) -> &[f64] {
        &self.components[1]
    }
    pub fn p(&self) -> &[f64] {
        &self.components[2]
    }
    pub fn q(&self) -> &[f64] {
        &self.components[3]
    }

    pub fn field(&self, c: usize) -> ScalarField {
        ScalarField { grid: self.grid, values: self.components[c].clone() }
    }

    /// Sum of the four discrete `H^2(Q_T)` norms squared.
    pub fn h2_norm_sq(&self) -> f64 {
        self.components.iter().map(|c| crate::grid::h2_inner(&self.grid, c, c)).sum()
    }
}

/// `F = Lap u0 + K m0 + f(., T/2) m0`.
pub fn compute_big_f(u0: &SpatialField, m0: &SpatialField, f_mid: &SpatialField, kernel: &Kernel) -> SpatialField {
    let lap = u0.laplacian();
    let conv = kernel.apply_spatial(m0);
    let values = (0..u0.values.len())
        .map(|n| lap.values[n] + conv.values[n] + f_mid.values[n] * m0.values[n])
        .collect();
    SpatialField { grid: u0.grid, values }
}

/// `F` recomputed from the stored data.
pub fn compute_f(data: &ProblemData, kernel: &Kernel) -> SpatialField {
    compute_big_f(&data.u0, &data.m0, &data.f.slice(data.grid.mid()), kernel)
}

/// `k = 2 [v(., T/2) + F] / |grad u0|^2`.
pub fn reconstruct_k(v: &ScalarField, data: &ProblemData) -> Result<SpatialField> {
    let g = data.grid;
    if v.grid != g {
        return Err(Error::InvalidGrid("v is not on the data grid".into()));
    }
    let (gx, gy) = data.u0.gradient();
    let vm = v.slice(g.mid());
    let mut values = Vec::with_capacity(g.spatial_len());
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let s = g.sidx(i, j);
            let n2 = gx.values[s].powi(2) + gy.values[s].powi(2);
            if n2 < data.grad_floor || n2 == 0.0 {
                return Err(Error::GradientFloor { value: n2, floor: data.grad_floor, i, j });
            }
            values.push(2.0 * (vm.values[s] + data.big_f.values[s]) / n2);
        }
    }
    Ok(SpatialField { grid: g, values })
}

/// Data-dependent operators and coefficient fields, built once per problem.
#[derive(Clone)]
pub struct Operators {
    pub grid: SpaceTimeGrid,
    pub st: Stencils,
    kernel: KernelOp,
    dims: Dims,
    /// `grad u0`, spatial.
    u0x: Vec<f64>,
    u0y: Vec<f64>,
    /// `1 / |grad u0|^2`, spatial.
    inv_grad2: Vec<f64>,
    big_f: Vec<f64>,
    m0: Vec<f64>,
    f: Vec<f64>,
    f_t: Vec<f64>,
    f_tt: Vec<f64>,
}

impl Operators {
    pub fn new(data: &ProblemData, kernel: &Kernel) -> Result<Self> {
        data.validate()?;
        let g = data.grid;
        let st = Stencils::new(&g);
        let u0x = st.d1(0, &data.u0.values);
        let u0y = st.d1(1, &data.u0.values);
        let mut inv_grad2 = Vec::with_capacity(g.spatial_len());
        for s in 0..g.spatial_len() {
            let n2 = u0x[s] * u0x[s] + u0y[s] * u0y[s];
            if n2 == 0.0 {
                return Err(Error::GradientFloor { value: 0.0, floor: data.grad_floor, i: s % g.nx(), j: s / g.nx() });
            }
            inv_grad2.push(1.0 / n2);
        }
        Ok(Self {
            grid: g,
            kernel: KernelOp::new(kernel, &g),
            dims: g.space_time_dims(),
            st,
            u0x,
            u0y,
            inv_grad2,
            big_f: data.big_f.values.clone(),
            m0: data.m0.values.clone(),
            f: data.f.values.clone(),
            f_t: data.f_t.values.clone(),
            f_tt: data.f_tt.values.clone(),
        })
    }

    fn plane(&self) -> usize {
        self.grid.spatial_len()
    }

    fn vol(&self, f: &[f64]) -> Vec<f64> {
        volterra(f, self.dims, self.grid.ht())
    }
    fn vol_t(&self, f: &[f64]) -> Vec<f64> {
        volterra_t(f, self.dims, self.grid.ht())
    }

    /// Evaluates the four residuals, keeping the intermediates needed for
    /// the reverse pass.
    pub fn evaluate(&self, u: &StateVector) -> Tape {
        assert_eq!(u.grid, self.grid, "state is not on the operator grid");
        let st = &self.st;
        let plane = self.plane();
        let (v, w, p, q) = (u.v(), u.w(), u.p(), u.q());
        let a1 = st.d1(0, v);
        let a2 = st.d1(1, v);
        let b1 = st.d1(0, w);
        let b2 = st.d1(1, w);
        let iw = self.vol(w);
        let ip = self.vol(p);
        let ia1 = self.vol(&a1);
        let ia2 = self.vol(&a2);
        let len = v.len();
        let mut psi = vec![0.0; len];
        let mut g1 = vec![0.0; len];
        let mut g2 = vec![0.0; len];
        let mut mm = vec![0.0; len];
        for n in 0..len {
            let s = n % plane;
            psi[n] = (v[n] - iw[n] + self.big_f[s]) * self.inv_grad2[s];
            g1[n] = ia1[n] + self.u0x[s];
            g2[n] = ia2[n] + self.u0y[s];
            mm[n] = ip[n] + self.m0[s];
        }

        let kp = self.kernel.apply(p);
        let kq = self.kernel.apply(q);
        let mut l1 = st.d1(2, v);
        add_assign(&mut l1, &st.laplacian(v));
        let mut l3 = st.d1(2, w);
        add_assign(&mut l3, &st.laplacian(w));
        let mut phi2 = (vec![0.0; len], vec![0.0; len]);
        let mut phi4 = (vec![0.0; len], vec![0.0; len]);
        for n in 0..len {
            let ag = a1[n] * g1[n] + a2[n] * g2[n];
            let bg = b1[n] * g1[n] + b2[n] * g2[n];
            let aa = a1[n] * a1[n] + a2[n] * a2[n];
            l1[n] += -2.0 * ag * psi[n] + kp[n] + self.f[n] * p[n] + self.f_t[n] * mm[n];
            l3[n] += -2.0 * (bg + aa) * psi[n]
                + kq[n]
                + self.f[n] * q[n]
                + 2.0 * self.f_t[n] * p[n]
                + self.f_tt[n] * mm[n];
            phi2.0[n] = psi[n] * (p[n] * g1[n] + mm[n] * a1[n]);
            phi2.1[n] = psi[n] * (p[n] * g2[n] + mm[n] * a2[n]);
            phi4.0[n] = psi[n] * (q[n] * g1[n] + 2.0 * p[n] * a1[n] + mm[n] * b1[n]);
            phi4.1[n] = psi[n] * (q[n] * g2[n] + 2.0 * p[n] * a2[n] + mm[n] * b2[n]);
        }
        let mut l2 = st.d1(2, p);
        let lap_p = st.laplacian(p);
        let div2 = st.divergence(&phi2.0, &phi2.1);
        let mut l4 = st.d1(2, q);
        let lap_q = st.laplacian(q);
        let div4 = st.divergence(&phi4.0, &phi4.1);
        for n in 0..len {
            l2[n] -= lap_p[n] + 2.0 * div2[n];
            l4[n] -= lap_q[n] + 2.0 * div4[n];
        }
        Tape {
            residuals: [l1, l2, l3, l4],
            state: u.clone(),
            a: [a1, a2],
            b: [b1, b2],
            g: [g1, g2],
            psi,
            mm,
        }
    }

    /// Vector-Jacobian product: given cotangents of `[L1, L2, L3, L4]`,
    /// returns the cotangents of `[v, w, p, q]`.
    pub fn vjp(&self, tape: &Tape, cot: &[Vec<f64>; 4]) -> [Vec<f64>; 4] {
        let st = &self.st;
        let plane = self.plane();
        let [c1, c2, c3, c4] = cot;
        let u = &tape.state;
        let (p, q) = (u.p(), u.q());
        let [a1, a2] = &tape.a;
        let [b1, b2] = &tape.b;
        let [g1, g2] = &tape.g;
        let (psi, mm) = (&tape.psi, &tape.mm);
        let len = p.len();

        // Flux cotangents of the divergence terms.
        let (f2x, f2y) = st.divergence_t(c2);
        let (f4x, f4y) = st.divergence_t(c4);

        let mut psi_bar = vec![0.0; len];
        let mut a_bar = (vec![0.0; len], vec![0.0; len]);
        let mut b_bar = (vec![0.0; len], vec![0.0; len]);
        let mut g_bar = (vec![0.0; len], vec![0.0; len]);
        let mut m_bar = vec![0.0; len];
        let mut p_bar = self.kernel.apply_t(c1);
        let mut q_bar = self.kernel.apply_t(c3);
        for n in 0..len {
            let (p2x, p2y) = (-2.0 * f2x[n], -2.0 * f2y[n]);
            let (p4x, p4y) = (-2.0 * f4x[n], -2.0 * f4y[n]);
            let ag = a1[n] * g1[n] + a2[n] * g2[n];
            let bg = b1[n] * g1[n] + b2[n] * g2[n];
            let aa = a1[n] * a1[n] + a2[n] * a2[n];
            let ps = psi[n];

            psi_bar[n] = -2.0 * ag * c1[n] - 2.0 * (bg + aa) * c3[n]
                + p2x * (p[n] * g1[n] + mm[n] * a1[n])
                + p2y * (p[n] * g2[n] + mm[n] * a2[n])
                + p4x * (q[n] * g1[n] + 2.0 * p[n] * a1[n] + mm[n] * b1[n])
                + p4y * (q[n] * g2[n] + 2.0 * p[n] * a2[n] + mm[n] * b2[n]);
            a_bar.0[n] = -2.0 * ps * g1[n] * c1[n] - 4.0 * ps * a1[n] * c3[n]
                + ps * mm[n] * p2x
                + 2.0 * ps * p[n] * p4x;
            a_bar.1[n] = -2.0 * ps * g2[n] * c1[n] - 4.0 * ps * a2[n] * c3[n]
                + ps * mm[n] * p2y
                + 2.0 * ps * p[n] * p4y;
            b_bar.0[n] = -2.0 * ps * g1[n] * c3[n] + ps * mm[n] * p4x;
            b_bar.1[n] = -2.0 * ps * g2[n] * c3[n] + ps * mm[n] * p4y;
            g_bar.0[n] = -2.0 * ps * (a1[n] * c1[n] + b1[n] * c3[n]) + ps * (p[n] * p2x + q[n] * p4x);
            g_bar.1[n] = -2.0 * ps * (a2[n] * c1[n] + b2[n] * c3[n]) + ps * (p[n] * p2y + q[n] * p4y);
            m_bar[n] = self.f_t[n] * c1[n]
                + self.f_tt[n] * c3[n]
                + ps * (p2x * a1[n] + p2y * a2[n] + p4x * b1[n] + p4y * b2[n]);
            p_bar[n] += self.f[n] * c1[n]
                + 2.0 * self.f_t[n] * c3[n]
                + ps * (p2x * g1[n] + p2y * g2[n])
                + 2.0 * ps * (p4x * a1[n] + p4y * a2[n]);
            q_bar[n] += self.f[n] * c3[n] + ps * (p4x * g1[n] + p4y * g2[n]);
        }

        // Linear parts.
        let mut v_bar = st.d1_t(2, c1);
        add_assign(&mut v_bar, &st.laplacian_t(c1));
        let mut w_bar = st.d1_t(2, c3);
        add_assign(&mut w_bar, &st.laplacian_t(c3));
        add_assign(&mut p_bar, &st.d1_t(2, c2));
        add_assign(&mut q_bar, &st.d1_t(2, c4));
        let lt2 = st.laplacian_t(c2);
        let lt4 = st.laplacian_t(c4);
        for n in 0..len {
            p_bar[n] -= lt2[n];
            q_bar[n] -= lt4[n];
        }

        // Psi = (v - vol w + F) / |grad u0|^2.
        let psi_s: Vec<f64> = (0..len).map(|n| psi_bar[n] * self.inv_grad2[n % plane]).collect();
        add_assign(&mut v_bar, &psi_s);
        let vt = self.vol_t(&psi_s);
        for n in 0..len {
            w_bar[n] -= vt[n];
        }
        // M = vol p + m0.
        add_assign(&mut p_bar, &self.vol_t(&m_bar));
        // G = vol grad v + grad u0, with grad v also used directly.
        add_assign(&mut a_bar.0, &self.vol_t(&g_bar.0));
        add_assign(&mut a_bar.1, &self.vol_t(&g_bar.1));
        add_assign(&mut v_bar, &st.d1_t(0, &a_bar.0));
        add_assign(&mut v_bar, &st.d1_t(1, &a_bar.1));
        add_assign(&mut w_bar, &st.d1_t(0, &b_bar.0));
        add_assign(&mut w_bar, &st.d1_t(1, &b_bar.1));
        [v_bar, w_bar, p_bar, q_bar]
    }
}

/// Forward intermediates of one residual evaluation.
#[derive(Clone, Debug)]
pub struct Tape {
    /// `[L1, L2, L3, L4]`.
    pub residuals: [Vec<f64>; 4],
    pub state: StateVector,
    a: [Vec<f64>; 2],
    b: [Vec<f64>; 2],
    g: [Vec<f64>; 2],
    /// `Psi`, the bracket shared by all four operators (`k / 2` at `T/2`).
    pub psi: Vec<f64>,
    mm: Vec<f64>,
}

impl Tape {
    pub fn residual(&self, i: usize) -> ScalarField {
        ScalarField { grid: self.state.grid, values: self.residuals[i].clone() }
    }
}

pub fn residual_l1(u: &StateVector, ops: &Operators) -> ScalarField {
    ops.evaluate(u).residual(0)
}
pub fn residual_l2(u: &StateVector, ops: &Operators) -> ScalarField {
    ops.evaluate(u).residual(1)
}
pub fn residual_l3(u: &StateVector, ops: &Operators) -> ScalarField {
    ops.evaluate(u).residual(2)
}
pub fn residual_l4(u: &StateVector, ops: &Operators) -> ScalarField {
    ops.evaluate(u).residual(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ProblemData;
    use crate::grid::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::unit_square(8, 6).unwrap()
    }

    /// `u0 = x1 + x2`, `m0 = 1`, `f = c`, everything else zero.
    fn linear_data(g: &SpaceTimeGrid, f: f64) -> ProblemData {
        let mut d = ProblemData::zeros(g);
        d.u0 = g.sample_spatial(|a, b| a + b);
        d.m0 = SpatialField::constant(g, 1.0);
        d.f = g.sample(|_, _, _| f);
        d.big_f = compute_f(&d, &Kernel::Zero);
        d.grad_floor = 1.0;
        d
    }

    fn state(g: &SpaceTimeGrid, fs: [&dyn Fn(f64, f64, f64) -> f64; 4]) -> StateVector {
        StateVector::from_fields(fs.map(|f| g.sample(f))).unwrap()
    }

    fn assert_field(f: &ScalarField, expect: impl Fn(f64, f64, f64) -> f64, tol: f64) {
        let g = f.grid;
        for k in 0..g.n_times() {
            for j in 0..g.ny() {
                for i in 0..g.nx() {
                    let e = expect(g.x1(i), g.x2(j), g.t(k));
                    let got = f.at(i, j, k);
                    assert!((got - e).abs() <= tol, "({i},{j},{k}): {got} vs {e}");
                }
            }
        }
    }

    #[test]
    fn big_f_examples() {
        let g = grid();
        let z = SpatialField::zeros(&g);
        let lin = g.sample_spatial(|a, b| 3.0 * a - b);
        assert!(compute_big_f(&lin, &z, &z, &Kernel::gaussian(0.2)).values.iter().all(|v| v.abs() < 1e-10));
        let quad = g.sample_spatial(|a, b| a * a + b * b);
        assert!(compute_big_f(&quad, &z, &z, &Kernel::Zero).values.iter().all(|v| (v - 4.0).abs() < 1e-9));
    }

    #[test]
    fn zero_state_with_zero_density_vanishes() {
        let g = grid();
        let mut d = linear_data(&g, 0.0);
        d.m0 = SpatialField::zeros(&g);
        let ops = Operators::new(&d, &Kernel::gaussian(0.2)).unwrap();
        let tape = ops.evaluate(&StateVector::zeros(&g));
        for r in &tape.residuals {
            assert!(r.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn l1_time_probe() {
        let g = grid();
        let d = linear_data(&g, 0.0);
        let ops = Operators::new(&d, &Kernel::Zero).unwrap();
        let mut d0 = d.clone();
        d0.m0 = SpatialField::zeros(&g);
        let ops0 = Operators::new(&d0, &Kernel::Zero).unwrap();
        // v - int w = T/2 - T/2 = 0 so Psi vanishes; only v_t survives.
        let u = state(&g, [&|_, _, t| t - 0.5, &|_, _, _| 1.0, &|_, _, _| 0.0, &|_, _, _| 0.0]);
        assert_field(&residual_l1(&u, &ops0), |_, _, _| 1.0, 1e-12);
        assert_field(&residual_l1(&u, &ops), |_, _, _| 1.0, 1e-12);
    }

    #[test]
    fn gradient_squared_probe() {
        let g = grid();
        let d = linear_data(&g, 0.0);
        let ops = Operators::new(&d, &Kernel::Zero).unwrap();
        // v = x1: Psi = x1 / 2, G = (1 + (t - 1/2), 1).
        let u = state(&g, [&|x1, _, _| x1, &|_, _, _| 0.0, &|_, _, _| 0.0, &|_, _, _| 0.0]);
        let tape = ops.evaluate(&u);
        assert_field(&tape.residual(2), |x1, _, _| -x1, 1e-12);
        assert_field(&tape.residual(0), |x1, _, t| -x1 * (0.5 + t), 1e-12);
    }

    #[test]
    fn divergence_probes() {
        let g = grid();
        let d = linear_data(&g, 2.0);
        let ops = Operators::new(&d, &Kernel::Zero).unwrap();
        // F = 2, Psi = 1, G = (1, 1).
        let u = state(&g, [&|_, _, _| 0.0, &|_, _, _| 0.0, &|_, x2, _| x2, &|x1, _, _| x1]);
        let tape = ops.evaluate(&u);
        assert_field(&tape.residual(1), |_, _, _| -2.0, 1e-10);
        // q G + 2 p grad v + M grad w = (x1, x1).
        assert_field(&tape.residual(3), |_, _, _| -2.0, 1e-10);
        assert_field(&tape.residual(0), |_, x2, _| 2.0 * x2, 1e-12);
        assert_field(&tape.residual(2), |x1, _, _| 2.0 * x1, 1e-12);
    }

    fn random_state(g: &SpaceTimeGrid, rng: &mut ChaCha8Rng, scale: f64) -> StateVector {
        let mut u = StateVector::zeros(g);
        for c in u.components.iter_mut() {
            c.iter_mut().for_each(|x| *x = scale * rng.gen_range(-1.0..1.0));
        }
        u
    }

    fn paper_like_data(g: &SpaceTimeGrid) -> ProblemData {
        let mut d = ProblemData::zeros(g);
        d.u0 = g.sample_spatial(|a, b| 1.5 * a * a * b * b);
        d.m0 = g.sample_spatial(|a, b| 1.0 + 0.5 * a * b);
        d.f = g.sample(|a, b, t| -(a * b) * (1.0 + t));
        d.f_t = g.sample(|a, b, _| -(a * b));
        d.f_tt = g.sample(|a, _, t| 0.1 * a * t);
        d.big_f = compute_f(&d, &Kernel::gaussian(0.2));
        d.grad_floor = 1.0;
        d
    }

    #[test]
    fn kernel_enters_only_l1_and_l3() {
        let g = grid();
        let d = paper_like_data(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_state(&g, &mut rng, 1.0);
        let mut d0 = d.clone();
        d0.big_f = d.big_f.clone();
        let a = Operators::new(&d, &Kernel::gaussian(0.2)).unwrap().evaluate(&u);
        let b = Operators::new(&d0, &Kernel::Zero).unwrap().evaluate(&u);
        assert_eq!(a.residuals[1], b.residuals[1]);
        assert_eq!(a.residuals[3], b.residuals[3]);
        assert_ne!(a.residuals[0], b.residuals[0]);
        assert_ne!(a.residuals[2], b.residuals[2]);
    }

    #[test]
    fn residuals_are_cubic_in_the_state() {
        let g = grid();
        let d = paper_like_data(&g);
        let ops = Operators::new(&d, &Kernel::gaussian(0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_state(&g, &mut rng, 1.0);
        let h = random_state(&g, &mut rng, 0.5);
        let at = |s: f64| {
            let mut x = u.clone();
            for (c, hc) in x.components.iter_mut().zip(&h.components) {
                c.iter_mut().zip(hc).for_each(|(a, b)| *a += s * b);
            }
            ops.evaluate(&x).residuals
        };
        let r: Vec<_> = (0..5).map(|s| at(s as f64)).collect();
        for c in 0..4 {
            let scale = r.iter().flat_map(|x| x[c].iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
            for n in 0..g.len() {
                let fourth = r[4][c][n] - 4.0 * r[3][c][n] + 6.0 * r[2][c][n] - 4.0 * r[1][c][n] + r[0][c][n];
                assert!(fourth.abs() <= 1e-10 * scale, "component {c} node {n}: {fourth}");
            }
        }
    }

    #[test]
    fn volterra_terms_vanish_at_midpoint() {
        let g = grid();
        let d = paper_like_data(&g);
        let ops = Operators::new(&d, &Kernel::gaussian(0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_state(&g, &mut rng, 1.0);
        let tape = ops.evaluate(&u);
        let plane = g.spatial_len();
        let mid = g.mid();
        let (gx, gy) = d.u0.gradient();
        for s in 0..plane {
            let n = mid * plane + s;
            assert_eq!(tape.g[0][n], gx.values[s]);
            assert_eq!(tape.g[1][n], gy.values[s]);
            assert_eq!(tape.mm[n], d.m0.values[s]);
            let psi = (u.v()[n] + d.big_f.values[s]) / (gx.values[s].powi(2) + gy.values[s].powi(2));
            assert!((tape.psi[n] - psi).abs() < 1e-12 * psi.abs().max(1.0));
        }
    }

    #[test]
    fn vjp_matches_directional_derivative() {
        let g = grid();
        let d = paper_like_data(&g);
        let ops = Operators::new(&d, &Kernel::gaussian(0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_state(&g, &mut rng, 1.0);
        let dir = random_state(&g, &mut rng, 1.0);
        let cot = random_state(&g, &mut rng, 1.0).components;
        let tape = ops.evaluate(&u);
        let back = ops.vjp(&tape, &cot);
        let analytic: f64 = (0..4).map(|c| dot(&back[c], &dir.components[c])).sum();
        // Central difference is exact up to rounding for a cubic map.
        let eps = 1e-3;
        let shifted = |s: f64| {
            let mut x = u.clone();
            for (c, hc) in x.components.iter_mut().zip(&dir.components) {
                c.iter_mut().zip(hc).for_each(|(a, b)| *a += s * b);
            }
            let r = ops.evaluate(&x).residuals;
            (0..4).map(|c| dot(&r[c], &cot[c])).sum::<f64>()
        };
        // Remove the cubic term with a Richardson step.
        let d1 = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let d2 = (shifted(2.0 * eps) - shifted(-2.0 * eps)) / (4.0 * eps);
        let fd = (4.0 * d1 - d2) / 3.0;
        assert!((fd - analytic).abs() <= 1e-7 * analytic.abs(), "{fd} vs {analytic}");
    }

    #[test]
    fn reconstruct_k_examples() {
        let g = grid();
        let d = paper_like_data(&g);
        let v = ScalarField::broadcast(&SpatialField {
            grid: g,
            values: d.big_f.values.iter().map(|x| -x).collect(),
        });
        assert!(reconstruct_k(&v, &d).unwrap().values.iter().all(|k| k.abs() < 1e-12));

        let v = g.sample(|a, b, t| a * b * (1.0 + t));
        let k1 = reconstruct_k(&v, &d).unwrap();
        let mut d2 = d.clone();
        d2.u0.values.iter_mut().for_each(|x| *x *= 2.0_f64.sqrt());
        d2.big_f.values.iter_mut().for_each(|x| *x *= 2.0);
        let v2 = ScalarField { grid: g, values: v.values.iter().map(|x| 2.0 * x).collect() };
        let k2 = reconstruct_k(&v2, &d2).unwrap();
        for (a, b) in k1.values.iter().zip(&k2.values) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }

        let mut flat = d.clone();
        flat.u0 = g.sample_spatial(|a, _| 0.1 * a);
        assert!(matches!(reconstruct_k(&v, &flat), Err(Error::GradientFloor { .. })));
    }
}
