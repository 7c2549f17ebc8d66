//! Multiplicative noise on the time-dependent boundary observations and
//! natural cubic spline differentiation of the noisy series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::{BoundaryTrace, ProblemData, RawTraces};
use crate::linalg::thomas;

/// Identifier recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.3), one stream per trace";

/// Stream indices of the four independent draws.
pub const STREAM_G0: u64 = 0;
pub const STREAM_P0: u64 = 1;
pub const STREAM_G1: u64 = 2;
pub const STREAM_P1: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(delta: f64, seed: u64) -> Result<Self> {
        let s = Self { delta, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("noise level must lie in [0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// `n` uniform draws on `[-1, 1]` from the given stream.
    pub fn draws(&self, stream: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
    }
}

/// `value(x, t) (1 + delta xi(t))` for a trace stored `[time][node]`.
pub fn perturb(trace: &[f64], nodes_per_time: usize, delta: f64, xi: &[f64]) -> Vec<f64> {
    assert_eq!(trace.len(), nodes_per_time * xi.len(), "trace does not match the draw count");
    trace
        .iter()
        .enumerate()
        .map(|(n, v)| v * (1.0 + delta * xi[n / nodes_per_time]))
        .collect()
}

/// Interpolating cubic spline with zero second derivative at both ends.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn fit(t: &[f64], y: &[f64]) -> Result<Self> {
        let n = t.len();
        if n < 4 {
            return Err(Error::TooFewSamples(n));
        }
        if y.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: y.len() });
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("spline knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let inner = n - 2;
        let mut sub = vec![0.0; inner];
        let mut diag = vec![0.0; inner];
        let mut sup = vec![0.0; inner];
        let mut rhs = vec![0.0; inner];
        for r in 0..inner {
            let i = r + 1;
            sub[r] = h[i - 1];
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            sup[r] = h[i];
            rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        thomas(&sub, &diag, &sup, &mut rhs);
        let mut m = vec![0.0; n];
        m[1..n - 1].copy_from_slice(&rhs);
        Ok(Self { t: t.to_vec(), y: y.to_vec(), m })
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.t.len();
        match self.t.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.clamp(1, n - 1) - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let (a, b) = ((self.t[i + 1] - x) / h, (x - self.t[i]) / h);
        a * self.y[i] + b * self.y[i + 1] + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let (a, b) = ((self.t[i + 1] - x) / h, (x - self.t[i]) / h);
        (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * self.m[i]
            + (3.0 * b * b - 1.0) / 6.0 * h * self.m[i + 1]
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.t[i + 1] - self.t[i];
        let b = (x - self.t[i]) / h;
        (1.0 - b) * self.m[i] + b * self.m[i + 1]
    }
}

/// First or second derivative of the natural spline through `(t, y)`,
/// evaluated at the knots.
pub fn spline_differentiate(t: &[f64], y: &[f64], order: u8) -> Result<Vec<f64>> {
    let s = NaturalSpline::fit(t, y)?;
    match order {
        1 => Ok(t.iter().map(|&x| s.derivative(x)).collect()),
        2 => Ok(s.m.clone()),
        o => Err(Error::InvalidOrder(o)),
    }
}

/// Differentiates every node's time series of a `[time][node]` trace.
fn differentiate_trace(times: &[f64], trace: &[f64], order: u8) -> Result<Vec<f64>> {
    let nt = times.len();
    let nodes = trace.len() / nt;
    let mut out = vec![0.0; trace.len()];
    let mut series = vec![0.0; nt];
    for s in 0..nodes {
        for k in 0..nt {
            series[k] = trace[k * nodes + s];
        }
        let d = spline_differentiate(times, &series, order)?;
        for k in 0..nt {
            out[k * nodes + s] = d[k];
        }
    }
    Ok(out)
}

/// Time derivatives of the raw observations by spline differentiation, in
/// the layout of [`ProblemData::traces`].
pub fn traces_from_raw(times: &[f64], raw: &RawTraces) -> Result<[BoundaryTrace; 4]> {
    let pair = |d: &[f64], n: &[f64], order: u8| -> Result<BoundaryTrace> {
        Ok(BoundaryTrace { dirichlet: differentiate_trace(times, d, order)?, neumann: differentiate_trace(times, n, order)? })
    };
    Ok([
        pair(&raw.g0, &raw.g1, 1)?,
        pair(&raw.g0, &raw.g1, 2)?,
        pair(&raw.p0, &raw.p1, 1)?,
        pair(&raw.p0, &raw.p1, 2)?,
    ])
}

/// Perturbs the four raw traces and re-derives the boundary data for
/// `(v, w, p, q)`. With `delta = 0` the data are returned unchanged.
pub fn apply_noise(data: &ProblemData, spec: &NoiseSpec) -> Result<ProblemData> {
    spec.validate()?;
    if spec.delta == 0.0 {
        return Ok(data.clone());
    }
    let g = data.grid;
    let nt = g.n_times();
    let nb = g.boundary_nodes().len();
    let ny = g.ny();
    if data.raw.g0.len() != nb * nt || data.raw.p0.len() != nb * nt || data.raw.g1.len() != ny * nt || data.raw.p1.len() != ny * nt {
        return Err(Error::MissingTraces("raw traces do not match the grid".into()));
    }
    let raw = RawTraces {
        g0: perturb(&data.raw.g0, nb, spec.delta, &spec.draws(STREAM_G0, nt)),
        g1: perturb(&data.raw.g1, ny, spec.delta, &spec.draws(STREAM_G1, nt)),
        p0: perturb(&data.raw.p0, nb, spec.delta, &spec.draws(STREAM_P0, nt)),
        p1: perturb(&data.raw.p1, ny, spec.delta, &spec.draws(STREAM_P1, nt)),
    };
    let times: Vec<f64> = (0..nt).map(|k| g.t(k)).collect();
    let traces = traces_from_raw(&times, &raw)?;
    Ok(ProblemData { traces, raw, ..data.clone() })
}
