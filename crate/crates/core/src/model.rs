//! Problem geometry, interaction kernels, phantom coefficients and the
//! manufactured value function used to synthesize data.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Dims, ScalarField, SpaceTimeGrid, SpatialField};

/// Rectangle `Omega = (a, b) x (c, d)`, horizon `T`, and the lower bound
/// `c_grad` required of `|grad u0|^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
    pub t_max: f64,
    pub grad_floor: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self { x1: (1.0, 2.0), x2: (1.0, 2.0), t_max: 1.0, grad_floor: 1.0 }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x1.0 < self.x1.1 && self.x2.0 < self.x2.1) {
            return Err(Error::InvalidConfig("domain needs a < b on both axes".into()));
        }
        if !(self.t_max > 0.0 && self.grad_floor > 0.0) {
            return Err(Error::InvalidConfig("T and the gradient floor must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self, n1: usize, n2: usize, nt: usize) -> Result<SpaceTimeGrid> {
        self.validate()?;
        SpaceTimeGrid::new(self.x1, self.x2, self.t_max, n1, n2, nt)
    }
}

/// Bounded factor `Y2(x1, x2, y1, y2)` of the Heaviside kernel.
pub type KernelFactor = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;

/// The global interaction kernel `K(x, y)`.
#[derive(Clone)]
pub enum Kernel {
    /// `delta(x1 - y1) exp(-(x2 - y2)^2 / sigma^2)`; the delta collapses the
    /// `y1` integral exactly.
    DeltaGaussian { sigma: f64 },
    /// `H(y1 - x1) Y2(x, y)` with `|Y2| <= bound`.
    HeavisideProduct { factor: KernelFactor, bound: f64 },
    /// No interaction term.
    Zero,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::DeltaGaussian { sigma } => write!(f, "DeltaGaussian {{ sigma: {sigma} }}"),
            Kernel::HeavisideProduct { bound, .. } => {
                write!(f, "HeavisideProduct {{ bound: {bound} }}")
            }
            Kernel::Zero => write!(f, "Zero"),
        }
    }
}

impl Kernel {
    pub fn gaussian(sigma: f64) -> Self {
        Kernel::DeltaGaussian { sigma }
    }

    pub fn parse(tag: &str, sigma: f64) -> Result<Self> {
        match tag {
            "delta-gaussian" | "DeltaGaussian" => Ok(Kernel::DeltaGaussian { sigma }),
            "heaviside-unit" => Ok(Kernel::HeavisideProduct { factor: Arc::new(|_, _, _, _| 1.0), bound: 1.0 }),
            "zero" => Ok(Kernel::Zero),
            other => Err(Error::InvalidConfig(format!("unknown kernel variant `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::DeltaGaussian { sigma } if !(*sigma > 0.0) => {
                Err(Error::InvalidConfig(format!("kernel width must be positive, got {sigma}")))
            }
            Kernel::HeavisideProduct { bound, .. } if !(*bound > 0.0) => {
                Err(Error::InvalidConfig("kernel bound must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// `int_Omega K(x, y) m(y, t) dy` at every node of `m`.
    pub fn apply(&self, m: &ScalarField) -> ScalarField {
        let op = KernelOp::new(self, &m.grid);
        ScalarField { grid: m.grid, values: op.apply(&m.values) }
    }

    pub fn apply_spatial(&self, m: &SpatialField) -> SpatialField {
        let op = KernelOp::new(self, &m.grid);
        SpatialField { grid: m.grid, values: op.apply(&m.values) }
    }
}

/// The kernel quadrature discretized on one grid, with its transpose.
#[derive(Clone)]
pub struct KernelOp {
    kind: KernelKind,
    grid: SpaceTimeGrid,
}

#[derive(Clone)]
enum KernelKind {
    Zero,
    /// Row-major `ny x ny` weights acting along `x2`.
    Line(Vec<f64>),
    Heaviside(KernelFactor),
}

impl KernelOp {
    pub fn new(kernel: &Kernel, grid: &SpaceTimeGrid) -> Self {
        let kind = match kernel {
            Kernel::Zero => KernelKind::Zero,
            Kernel::DeltaGaussian { sigma } => {
                let ny = grid.ny();
                let [_, w2, _] = grid.trapezoid_weights();
                let s2 = sigma * sigma;
                let mut mat = vec![0.0; ny * ny];
                for j in 0..ny {
                    for jj in 0..ny {
                        let d = grid.x2(j) - grid.x2(jj);
                        mat[j * ny + jj] = w2[jj] * (-d * d / s2).exp();
                    }
                }
                KernelKind::Line(mat)
            }
            Kernel::HeavisideProduct { factor, .. } => KernelKind::Heaviside(factor.clone()),
        };
        Self { kind, grid: *grid }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, KernelKind::Zero)
    }

    fn dims(&self, len: usize) -> Dims {
        if len == self.grid.len() {
            self.grid.space_time_dims()
        } else {
            assert_eq!(len, self.grid.spatial_len(), "array does not match the kernel grid");
            self.grid.spatial_dims()
        }
    }

    pub fn apply(&self, m: &[f64]) -> Vec<f64> {
        self.apply_impl(m, false)
    }

    pub fn apply_t(&self, g: &[f64]) -> Vec<f64> {
        self.apply_impl(g, true)
    }

    fn apply_impl(&self, m: &[f64], transpose: bool) -> Vec<f64> {
        let dims = self.dims(m.len());
        let (nx, ny, nt1) = (dims.0[0], dims.0[1], dims.0[2]);
        let plane = nx * ny;
        let mut out = vec![0.0; m.len()];
        match &self.kind {
            KernelKind::Zero => {}
            KernelKind::Line(mat) => {
                for k in 0..nt1 {
                    let base = k * plane;
                    for j in 0..ny {
                        for jj in 0..ny {
                            let c = if transpose { mat[jj * ny + j] } else { mat[j * ny + jj] };
                            if c == 0.0 {
                                continue;
                            }
                            let (dst, src) = (base + j * nx, base + jj * nx);
                            for i in 0..nx {
                                out[dst + i] += c * m[src + i];
                            }
                        }
                    }
                }
            }
            KernelKind::Heaviside(factor) => {
                let g = &self.grid;
                let h1 = g.h1();
                let [_, w2, _] = g.trapezoid_weights();
                let n1 = g.n1;
                // Trapezoid weight of node ii on [x1_i, b].
                let w1 = |i: usize, ii: usize| -> f64 {
                    if ii < i || i == n1 {
                        0.0
                    } else if ii == i || ii == n1 {
                        0.5 * h1
                    } else {
                        h1
                    }
                };
                let mut mat = vec![0.0; plane * plane];
                for j in 0..ny {
                    for i in 0..nx {
                        let row = j * nx + i;
                        for jj in 0..ny {
                            for ii in i..nx {
                                let w = w1(i, ii) * w2[jj];
                                if w != 0.0 {
                                    mat[row * plane + jj * nx + ii] =
                                        w * factor(g.x1(i), g.x2(j), g.x1(ii), g.x2(jj));
                                }
                            }
                        }
                    }
                }
                for k in 0..nt1 {
                    let base = k * plane;
                    for r in 0..plane {
                        for c in 0..plane {
                            let a = mat[r * plane + c];
                            if a == 0.0 {
                                continue;
                            }
                            if transpose {
                                out[base + c] += a * m[base + r];
                            } else {
                                out[base + r] += a * m[base + c];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Built-in and user-supplied inclusion shapes.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Empty,
    LetterA,
    LetterOmega,
    LettersSZ,
    /// Rows of `0`/`1` characters, first row at the top (largest `x2`),
    /// stretched over the whole domain.
    Bitmap(Vec<Vec<bool>>),
}

impl Shape {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "A" | "a" => Ok(Shape::LetterA),
            "Omega" | "omega" => Ok(Shape::LetterOmega),
            "SZ" | "sz" => Ok(Shape::LettersSZ),
            "empty" => Ok(Shape::Empty),
            other => {
                if let Some(path) = other.strip_prefix("bitmap:") {
                    Shape::load_bitmap(Path::new(path))
                } else {
                    Err(Error::InvalidConfig(format!("unknown phantom shape `{other}`")))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Empty => "empty",
            Shape::LetterA => "A",
            Shape::LetterOmega => "Omega",
            Shape::LettersSZ => "SZ",
            Shape::Bitmap(_) => "bitmap",
        }
    }

    pub fn parse_bitmap(text: &str) -> Result<Self> {
        let rows: Vec<Vec<bool>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::InvalidConfig(format!("bitmap character `{other}`"))),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidConfig("bitmap rows must be non-empty and equal length".into()));
        }
        Ok(Shape::Bitmap(rows))
    }

    pub fn load_bitmap(path: &Path) -> Result<Self> {
        Self::parse_bitmap(&std::fs::read_to_string(path)?)
    }

    /// Membership test in unit coordinates `(s1, s2) in [0, 1]^2`.
    pub fn contains_unit(&self, s1: f64, s2: f64) -> bool {
        match self {
            Shape::Empty => false,
            Shape::LetterA => strokes_contain(&letter_a_strokes(), 0.05, s1, s2),
            Shape::LetterOmega => strokes_contain(&letter_omega_strokes(), 0.05, s1, s2),
            Shape::LettersSZ => strokes_contain(&letters_sz_strokes(), 0.04, s1, s2),
            Shape::Bitmap(rows) => {
                let (h, w) = (rows.len(), rows[0].len());
                let col = ((s1 * w as f64).floor() as isize).clamp(0, w as isize - 1) as usize;
                let row = (((1.0 - s2) * h as f64).floor() as isize).clamp(0, h as isize - 1) as usize;
                rows[row][col]
            }
        }
    }

    /// Node mask on the spatial grid.
    pub fn mask(&self, grid: &SpaceTimeGrid) -> Vec<bool> {
        let (l1, l2) = (grid.x1_max - grid.x1_min, grid.x2_max - grid.x2_min);
        let mut out = Vec::with_capacity(grid.spatial_len());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                let s1 = (grid.x1(i) - grid.x1_min) / l1;
                let s2 = (grid.x2(j) - grid.x2_min) / l2;
                out.push(self.contains_unit(s1, s2));
            }
        }
        out
    }
}

type Segment = ((f64, f64), (f64, f64));

fn letter_a_strokes() -> Vec<Segment> {
    vec![
        ((0.25, 0.2), (0.5, 0.8)),
        ((0.5, 0.8), (0.75, 0.2)),
        ((0.375, 0.5), (0.625, 0.5)),
    ]
}

fn letter_omega_strokes() -> Vec<Segment> {
    // Arc of radius 0.22 about (0.5, 0.55) from -55 to 235 degrees, plus feet.
    let (cx, cy, r) = (0.5, 0.55, 0.22);
    let (a0, a1) = ((-55.0_f64).to_radians(), 235.0_f64.to_radians());
    let n = 24;
    let pt = |s: usize| {
        let a = a0 + (a1 - a0) * s as f64 / n as f64;
        (cx + r * a.cos(), cy + r * a.sin())
    };
    let mut segs: Vec<Segment> = (0..n).map(|s| (pt(s), pt(s + 1))).collect();
    let (right, left) = (pt(0), pt(n));
    segs.push((right, (right.0 + 0.12, right.1)));
    segs.push((left, (left.0 - 0.12, left.1)));
    segs
}

fn letters_sz_strokes() -> Vec<Segment> {
    vec![
        // S
        ((0.42, 0.75), (0.15, 0.75)),
        ((0.15, 0.75), (0.15, 0.5)),
        ((0.15, 0.5), (0.40, 0.5)),
        ((0.40, 0.5), (0.40, 0.25)),
        ((0.40, 0.25), (0.12, 0.25)),
        // Z
        ((0.58, 0.75), (0.88, 0.75)),
        ((0.88, 0.75), (0.58, 0.25)),
        ((0.58, 0.25), (0.88, 0.25)),
    ]
}

fn strokes_contain(segs: &[Segment], half_width: f64, x: f64, y: f64) -> bool {
    segs.iter().any(|&((ax, ay), (bx, by))| {
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let s = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (ax + s * dx - x, ay + s * dy - y);
        px * px + py * py <= half_width * half_width + 1e-12
    })
}

/// A piecewise-constant coefficient `c_a` inside a shape, background outside,
/// smoothed by repeated 3x3 binomial averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub shape: Shape,
    pub amplitude: f64,
    pub background: f64,
    /// Number of smoothing passes (in cells of the target grid).
    pub smoothing: usize,
}

impl Phantom {
    pub fn new(shape: Shape, amplitude: f64) -> Self {
        Self { shape, amplitude, background: 1.0, smoothing: 4 }
    }

    pub fn with_smoothing(mut self, passes: usize) -> Self {
        self.smoothing = passes;
        self
    }

    pub fn rasterize(&self, grid: &SpaceTimeGrid) -> Result<SpatialField> {
        if !(self.amplitude >= self.background) {
            return Err(Error::InvalidConfig(format!(
                "inclusion amplitude {} below background {}",
                self.amplitude, self.background
            )));
        }
        let mask = self.shape.mask(grid);
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                if grid.is_boundary(i, j) && mask[grid.sidx(i, j)] {
                    return Err(Error::MaskTouchesBoundary(i, j));
                }
            }
        }
        Ok(blend_mask(grid, &mask, self.background, self.amplitude, self.smoothing))
    }
}

/// Builds `background + (amplitude - background) * smooth(mask)`; points
/// outside the grid count as background during smoothing.
pub fn blend_mask(
    grid: &SpaceTimeGrid,
    mask: &[bool],
    background: f64,
    amplitude: f64,
    passes: usize,
) -> SpatialField {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut ind: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    const W: [f64; 3] = [0.25, 0.5, 0.25];
    for _ in 0..passes {
        let mut next = vec![0.0; ind.len()];
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                for (dj, wj) in W.iter().enumerate() {
                    for (di, wi) in W.iter().enumerate() {
                        let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                            acc += wi * wj * ind[jj as usize * nx + ii as usize];
                        }
                    }
                }
                next[j * nx + i] = acc;
            }
        }
        ind = next;
    }
    let values = ind.iter().map(|s| background + (amplitude - background) * s.clamp(0.0, 1.0)).collect();
    SpatialField { grid: *grid, values }
}

/// A closed-form value function with all derivatives the pipeline needs.
pub trait ValueFunction: Send + Sync {
    fn value(&self, x1: f64, x2: f64, t: f64) -> f64;
    fn dt(&self, x1: f64, x2: f64, t: f64) -> f64;
    fn dtt(&self, x1: f64, x2: f64, t: f64) -> f64;
    fn grad(&self, x1: f64, x2: f64, t: f64) -> (f64, f64);
    fn grad_t(&self, x1: f64, x2: f64, t: f64) -> (f64, f64);
    fn grad_tt(&self, x1: f64, x2: f64, t: f64) -> (f64, f64);
    fn laplacian(&self, x1: f64, x2: f64, t: f64) -> f64;
}

/// `u(x, t) = x1^2 x2^2 (1 + t)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProductValue;

impl ValueFunction for ProductValue {
    fn value(&self, x1: f64, x2: f64, t: f64) -> f64 {
        x1 * x1 * x2 * x2 * (1.0 + t)
    }
    fn dt(&self, x1: f64, x2: f64, _t: f64) -> f64 {
        x1 * x1 * x2 * x2
    }
    fn dtt(&self, _x1: f64, _x2: f64, _t: f64) -> f64 {
        0.0
    }
    fn grad(&self, x1: f64, x2: f64, t: f64) -> (f64, f64) {
        (2.0 * x1 * x2 * x2 * (1.0 + t), 2.0 * x1 * x1 * x2 * (1.0 + t))
    }
    fn grad_t(&self, x1: f64, x2: f64, _t: f64) -> (f64, f64) {
        (2.0 * x1 * x2 * x2, 2.0 * x1 * x1 * x2)
    }
    fn grad_tt(&self, _x1: f64, _x2: f64, _t: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn laplacian(&self, x1: f64, x2: f64, t: f64) -> f64 {
        2.0 * (x1 * x1 + x2 * x2) * (1.0 + t)
    }
}

/// Nodal samples of a value function and its derivatives.
#[derive(Clone, Debug)]
pub struct ValueFields {
    pub u: ScalarField,
    pub u_t: ScalarField,
    pub u_tt: ScalarField,
    pub grad_x1: ScalarField,
    pub grad_x2: ScalarField,
    pub lap: ScalarField,
}

pub fn analytic_value_fields(vf: &dyn ValueFunction, grid: &SpaceTimeGrid) -> ValueFields {
    ValueFields {
        u: grid.sample(|a, b, t| vf.value(a, b, t)),
        u_t: grid.sample(|a, b, t| vf.dt(a, b, t)),
        u_tt: grid.sample(|a, b, t| vf.dtt(a, b, t)),
        grad_x1: grid.sample(|a, b, t| vf.grad(a, b, t).0),
        grad_x2: grid.sample(|a, b, t| vf.grad(a, b, t).1),
        lap: grid.sample(|a, b, t| vf.laplacian(a, b, t)),
    }
}

/// 4-connected components of a node mask; returns one index list per component.
pub fn connected_components(grid: &SpaceTimeGrid, mask: &[bool]) -> Vec<Vec<usize>> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut label = vec![usize::MAX; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![];
        let mut stack = vec![start];
        label[start] = id;
        while let Some(n) = stack.pop() {
            members.push(n);
            let (i, j) = (n % nx, n / nx);
            let mut push = |m: usize| {
                if mask[m] && label[m] == usize::MAX {
                    label[m] = id;
                    stack.push(m);
                }
            };
            if i > 0 {
                push(n - 1);
            }
            if i + 1 < nx {
                push(n + 1);
            }
            if j > 0 {
                push(n - nx);
            }
            if j + 1 < ny {
                push(n + nx);
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}
