//! Dataset directories, CSV matrices and 16-bit graymap export.
//!
//! Matrices are written one scan line per row: spatial fields have one row
//! per `x2` index (ascending), space-time fields stack those rows time slice
//! by time slice, and boundary traces have one row per time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::Dataset;
use crate::forward::{BoundaryTrace, GroundTruth, ProblemData, RawTraces};
use crate::grid::{ScalarField, SpaceTimeGrid, SpatialField};

pub const DATASET_SCHEMA: &str = "mfg-convex-dataset/1";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn write_matrix(path: &Path, values: &[f64], width: usize) -> Result<()> {
    if width == 0 || values.len() % width != 0 {
        return Err(Error::ShapeMismatch { expected: width, got: values.len() });
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    for row in values.chunks(width) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rectangular matrix; returns `(values, width)`.
pub fn read_matrix(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    let mut values = Vec::new();
    let mut width = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Dataset(format!("{}: ragged row {}", path.display(), line + 1)));
        }
        for cell in rec.iter() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("{}: bad number `{cell}` on row {}", path.display(), line + 1)))?;
            values.push(v);
        }
    }
    Ok((values, width.unwrap_or(0)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(e.to_string())
}

fn read_sized(path: &Path, len: usize, width: usize) -> Result<Vec<f64>> {
    let (v, w) = read_matrix(path)?;
    if v.len() != len || w != width {
        return Err(Error::Dataset(format!(
            "{}: expected {} values in rows of {width}, found {} in rows of {w}",
            path.display(),
            len,
            v.len()
        )));
    }
    Ok(v)
}

pub fn write_spatial(path: &Path, f: &SpatialField) -> Result<()> {
    write_matrix(path, &f.values, f.grid.nx())
}

pub fn read_spatial(path: &Path, grid: &SpaceTimeGrid) -> Result<SpatialField> {
    SpatialField::from_values(grid, read_sized(path, grid.spatial_len(), grid.nx())?)
}

pub fn write_scalar(path: &Path, f: &ScalarField) -> Result<()> {
    write_matrix(path, &f.values, f.grid.nx())
}

pub fn read_scalar(path: &Path, grid: &SpaceTimeGrid) -> Result<ScalarField> {
    ScalarField::from_values(grid, read_sized(path, grid.len(), grid.nx())?)
}

/// Ordered `key: value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest(pub BTreeMap<String, String>);

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Dataset(format!("manifest lacks `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Dataset(format!("manifest `{key}` has bad value `{raw}`")))
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Dataset(format!("manifest line without `:`: {line}")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest(m))
    }
}

fn dims_text(g: &SpaceTimeGrid) -> String {
    format!("{} {} {}", g.n1, g.n2, g.nt)
}

fn grid_from_manifest(m: &Manifest) -> Result<SpaceTimeGrid> {
    let dims: Vec<usize> = m
        .get("coarse_grid")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Dataset("bad coarse_grid".into())))
        .collect::<Result<_>>()?;
    let dom: Vec<f64> = m
        .get("domain")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Dataset("bad domain".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dom.len() != 5 {
        return Err(Error::Dataset("manifest grid description is malformed".into()));
    }
    SpaceTimeGrid::new((dom[0], dom[1]), (dom[2], dom[3]), dom[4], dims[0], dims[1], dims[2])
}

const COMPONENTS: [&str; 4] = ["v", "w", "p", "q"];

/// Writes a dataset directory. `extra` entries (config hash, seed, ...) are
/// added to the manifest.
pub fn save_dataset(dir: &Path, ds: &Dataset, fine: (usize, usize), extra: &Manifest) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let d = &ds.data;
    let g = d.grid;
    let mut m = extra.clone();
    m.set("schema", DATASET_SCHEMA);
    m.set("code_version", CODE_VERSION);
    m.set("shape", &ds.shape);
    m.set("c_a", ds.contrast);
    m.set("coarse_grid", dims_text(&g));
    m.set("fine_grid", format!("{} {} {}", fine.0, fine.0, fine.1));
    m.set("domain", format!("{} {} {} {} {}", g.x1_min, g.x1_max, g.x2_min, g.x2_max, g.t_max));
    m.set("grad_floor", d.grad_floor);
    m.set("min_density", ds.min_density);
    fs::write(dir.join("manifest.txt"), m.to_text())?;

    write_spatial(&dir.join("u0.csv"), &d.u0)?;
    write_spatial(&dir.join("m0.csv"), &d.m0)?;
    write_spatial(&dir.join("big_f.csv"), &d.big_f)?;
    write_scalar(&dir.join("f.csv"), &d.f)?;
    write_scalar(&dir.join("f_t.csv"), &d.f_t)?;
    write_scalar(&dir.join("f_tt.csv"), &d.f_tt)?;
    let nb = g.boundary_nodes().len();
    for (name, tr) in COMPONENTS.iter().zip(&d.traces) {
        write_matrix(&dir.join(format!("trace_{name}_dirichlet.csv")), &tr.dirichlet, nb)?;
        write_matrix(&dir.join(format!("trace_{name}_neumann.csv")), &tr.neumann, g.ny())?;
    }
    write_matrix(&dir.join("raw_g0.csv"), &d.raw.g0, nb)?;
    write_matrix(&dir.join("raw_g1.csv"), &d.raw.g1, g.ny())?;
    write_matrix(&dir.join("raw_p0.csv"), &d.raw.p0, nb)?;
    write_matrix(&dir.join("raw_p1.csv"), &d.raw.p1, g.ny())?;
    write_spatial(&dir.join("k_true.csv"), &ds.truth.k)?;
    let mask: Vec<f64> = ds.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_matrix(&dir.join("mask.csv"), &mask, g.nx())?;
    for (name, f) in COMPONENTS.iter().zip(&ds.truth.state) {
        write_scalar(&dir.join(format!("truth_{name}.csv")), f)?;
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let mpath = dir.join("manifest.txt");
    if !mpath.is_file() {
        return Err(Error::Dataset(format!("no dataset at {} (manifest.txt missing)", dir.display())));
    }
    let m = Manifest::parse(&fs::read_to_string(mpath)?)?;
    if m.get("schema")? != DATASET_SCHEMA {
        return Err(Error::Dataset(format!("unsupported dataset schema `{}`", m.get("schema")?)));
    }
    let g = grid_from_manifest(&m)?;
    let nb = g.boundary_nodes().len();
    let nt = g.n_times();
    let trace = |name: &str| -> Result<BoundaryTrace> {
        Ok(BoundaryTrace {
            dirichlet: read_sized(&dir.join(format!("trace_{name}_dirichlet.csv")), nb * nt, nb)?,
            neumann: read_sized(&dir.join(format!("trace_{name}_neumann.csv")), g.ny() * nt, g.ny())?,
        })
    };
    let data = ProblemData {
        grid: g,
        u0: read_spatial(&dir.join("u0.csv"), &g)?,
        m0: read_spatial(&dir.join("m0.csv"), &g)?,
        big_f: read_spatial(&dir.join("big_f.csv"), &g)?,
        f: read_scalar(&dir.join("f.csv"), &g)?,
        f_t: read_scalar(&dir.join("f_t.csv"), &g)?,
        f_tt: read_scalar(&dir.join("f_tt.csv"), &g)?,
        traces: [trace("v")?, trace("w")?, trace("p")?, trace("q")?],
        raw: RawTraces {
            g0: read_sized(&dir.join("raw_g0.csv"), nb * nt, nb)?,
            g1: read_sized(&dir.join("raw_g1.csv"), g.ny() * nt, g.ny())?,
            p0: read_sized(&dir.join("raw_p0.csv"), nb * nt, nb)?,
            p1: read_sized(&dir.join("raw_p1.csv"), g.ny() * nt, g.ny())?,
        },
        grad_floor: m.parse_value("grad_floor")?,
    };
    data.validate()?;
    let truth = GroundTruth {
        k: read_spatial(&dir.join("k_true.csv"), &g)?,
        state: [
            read_scalar(&dir.join("truth_v.csv"), &g)?,
            read_scalar(&dir.join("truth_w.csv"), &g)?,
            read_scalar(&dir.join("truth_p.csv"), &g)?,
            read_scalar(&dir.join("truth_q.csv"), &g)?,
        ],
    };
    let mask = read_sized(&dir.join("mask.csv"), g.spatial_len(), g.nx())?.iter().map(|&v| v != 0.0).collect();
    let ds = Dataset {
        shape: m.get("shape")?.to_string(),
        contrast: m.parse_value("c_a")?,
        mask,
        min_density: m.parse_value("min_density")?,
        data,
        truth,
    };
    Ok((ds, m))
}

/// Binary 16-bit portable graymap. Row-major `values` with `width` columns,
/// first row at the bottom of the image (smallest `x2`); `[lo, hi]` maps
/// linearly onto `0..=65535` with clamping.
pub fn encode_pgm16(values: &[f64], width: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if width == 0 || values.len() % width != 0 {
        return Err(Error::ShapeMismatch { expected: width, got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graymap input".into()));
    }
    let height = values.len() / width;
    let header = format!("P5\n# value = {lo} + ({hi} - {lo}) * gray / 65535\n{width} {height}\n65535\n");
    let mut out = header.into_bytes();
    let span = hi - lo;
    for row in values.chunks(width).rev() {
        for &v in row {
            let s = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            out.extend_from_slice(&((s * 65535.0).round() as u16).to_be_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode_pgm16`]'s pixel layout: `(width, height, gray)` with
/// rows in file order (top first).
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let bad = || Error::Dataset("malformed graymap".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(pos..pos + 2 * w * h).ok_or_else(bad)?;
    Ok((w, h, body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}
