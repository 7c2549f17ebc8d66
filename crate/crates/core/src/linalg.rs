//! Small sparse and banded solvers for the implicit Fokker-Planck steps.

/// Compressed sparse row matrix.
#[derive(Clone, Debug, Default)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self { n, row_ptr, cols: Vec::with_capacity(nnz), vals: Vec::with_capacity(nnz) }
    }

    /// Appends one row given as `(column, value)` pairs.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, v) in entries {
            self.cols.push(c);
            self.vals.push(v);
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .find(|&p| self.cols[p] == r)
                    .map(|p| self.vals[p])
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Lower and upper bandwidth.
    pub fn bandwidths(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for r in 0..self.n {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[p];
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

/// LU factorization of a band matrix with partial pivoting (LAPACK `gbtf2` layout).
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    fn at(&self, r: usize, c: usize) -> usize {
        c * self.ldab + (self.kl + self.ku + r - c)
    }

    /// Factorizes; returns `Err(column)` on an exactly singular pivot.
    pub fn factor(a: &CsrMatrix) -> Result<Self, usize> {
        let n = a.n;
        let (kl, ku) = a.bandwidths();
        let ldab = 2 * kl + ku + 1;
        let mut lu = Self { n, kl, ku, ldab, ab: vec![0.0; ldab * n], piv: vec![0; n] };
        for r in 0..n {
            for p in a.row_ptr[r]..a.row_ptr[r + 1] {
                let idx = lu.at(r, a.cols[p]);
                lu.ab[idx] += a.vals[p];
            }
        }
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = j;
            let mut best = lu.ab[lu.at(j, j)].abs();
            for r in j + 1..=j + km {
                let v = lu.ab[lu.at(r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            lu.piv[j] = p;
            if best == 0.0 {
                return Err(j);
            }
            ju = ju.max((j + ku + (p - j)).min(n - 1));
            if p != j {
                for c in j..=ju {
                    let (i1, i2) = (lu.at(j, c), lu.at(p, c));
                    lu.ab.swap(i1, i2);
                }
            }
            let d = lu.ab[lu.at(j, j)];
            for r in j + 1..=j + km {
                let idx = lu.at(r, j);
                lu.ab[idx] /= d;
            }
            for c in j + 1..=ju {
                let ujc = lu.ab[lu.at(j, c)];
                if ujc == 0.0 {
                    continue;
                }
                for r in j + 1..=j + km {
                    let l = lu.ab[lu.at(r, j)];
                    let idx = lu.at(r, c);
                    lu.ab[idx] -= l * ujc;
                }
            }
        }
        Ok(lu)
    }

    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = self.kl.min(n - 1 - j);
            let bj = b[j];
            for r in j + 1..=j + km {
                b[r] -= self.ab[self.at(r, j)] * bj;
            }
        }
        let w = self.kl + self.ku;
        for j in (0..n).rev() {
            b[j] /= self.ab[self.at(j, j)];
            let bj = b[j];
            for r in j.saturating_sub(w)..j {
                b[r] -= self.ab[self.at(r, j)] * bj;
            }
        }
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Copy, Debug)]
pub struct IterativeStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned BiCGSTAB; `x` holds the initial guess on entry.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<IterativeStats, String> {
    let n = a.n;
    let dinv: Vec<f64> = a.diagonal().iter().map(|d| if *d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dotp = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut res = norm(&r) / bnorm;
    if res <= tol {
        return Ok(IterativeStats { iterations: 0, relative_residual: res });
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dotp(&r_hat, &r);
        if rho_new == 0.0 {
            return Err(format!("breakdown (rho = 0) at iteration {it}"));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = dinv[i] * p[i];
        }
        a.mul_vec(&y, &mut v);
        let rv = dotp(&r_hat, &v);
        if rv == 0.0 {
            return Err(format!("breakdown (r.v = 0) at iteration {it}"));
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(IterativeStats { iterations: it, relative_residual: norm(&s) / bnorm });
        }
        for i in 0..n {
            z[i] = dinv[i] * s[i];
        }
        a.mul_vec(&z, &mut t);
        let tt = dotp(&t, &t);
        omega = if tt > 0.0 { dotp(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / bnorm;
        if !res.is_finite() {
            return Err(format!("non-finite residual at iteration {it}"));
        }
        if res <= tol {
            return Ok(IterativeStats { iterations: it, relative_residual: res });
        }
        if omega == 0.0 {
            return Err(format!("breakdown (omega = 0) at iteration {it}"));
        }
    }
    Err(format!("no convergence in {max_iter} iterations (relative residual {res:e})"))
}

/// Solves a tridiagonal system in place (`sub[i]` couples rows `i+1` and `i`).
pub fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = diag.to_vec();
    c[..n - 1].copy_from_slice(&sup[..n - 1]);
    for i in 1..n {
        let m = sub[i - 1] / d[i - 1];
        d[i] -= m * c[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    rhs[n - 1] /= d[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - c[i] * rhs[i + 1]) / d[i];
    }
}
