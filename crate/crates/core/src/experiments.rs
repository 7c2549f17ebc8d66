//! Reconstruction runs on synthetic phantoms: data generation, inversion,
//! metrics, and the standard experiment plans.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{extract_observations, generate, Advection, ForwardConfig, GroundTruth, LinearSolver, ProblemData};
use crate::grid::{SpaceTimeGrid, SpatialField};
use crate::minimize::{run_inversion, IterationTrace, MinimizerConfig, StopReason};
use crate::model::{connected_components, DomainSpec, Kernel, Phantom, ProductValue, Shape};
use crate::noise::NoiseSpec;
use crate::objective::CarlemanConfig;

pub const REPORT_SCHEMA: &str = "mfg-convex-report/1";
pub const SUMMARY_HEADER: &str =
    "id,shape,c_a,lambda,beta,delta,seed,iterations,grad_norm,stop,contrast,rel_l2,iou,component_contrasts";
pub const LAMBDAS: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 5.0, 10.0];
pub const NOISE_LEVELS: [f64; 2] = [0.03, 0.05];

/// Everything shared by the runs of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    /// `(n, nt)`: `n x n` spatial cells and `nt` time steps.
    pub fine: (usize, usize),
    pub coarse: (usize, usize),
    /// Phantom smoothing passes on the fine grid.
    pub smoothing: usize,
    pub kernel: Kernel,
    pub beta: f64,
    pub solver: LinearSolver,
    pub advection: Advection,
    pub minimizer: MinimizerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domain: DomainSpec::default(),
            fine: (160, 320),
            coarse: (20, 10),
            smoothing: 4,
            kernel: Kernel::gaussian(0.2),
            beta: 0.001,
            solver: LinearSolver::Auto,
            advection: Advection::NonConservative,
            minimizer: MinimizerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn fine_grid(&self) -> Result<SpaceTimeGrid> {
        self.domain.grid(self.fine.0, self.fine.0, self.fine.1)
    }

    pub fn coarse_grid(&self) -> Result<SpaceTimeGrid> {
        self.domain.grid(self.coarse.0, self.coarse.0, self.coarse.1)
    }

    pub fn forward_config(&self) -> Result<ForwardConfig> {
        let mut cfg = ForwardConfig::standard(self.fine_grid()?);
        cfg.solver = self.solver;
        cfg.advection = self.advection;
        Ok(cfg)
    }
}

/// One inversion of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub id: String,
    pub shape: Shape,
    pub contrast: f64,
    pub lambda: f64,
    pub noise: NoiseSpec,
}

impl RunSpec {
    pub fn new(shape: Shape, contrast: f64, lambda: f64, noise: NoiseSpec) -> Self {
        let id = format!("{}-c{}-l{}-d{}-s{}", shape.name(), contrast, lambda, noise.delta, noise.seed);
        Self { id, shape, contrast, lambda, noise }
    }
}

pub fn lambda_sweep_plan() -> Vec<RunSpec> {
    LAMBDAS.iter().map(|&l| RunSpec::new(Shape::LetterA, 2.0, l, NoiseSpec::default())).collect()
}

pub fn contrast_series_plan() -> Vec<RunSpec> {
    [4.0, 8.0].iter().map(|&c| RunSpec::new(Shape::LetterA, c, 3.0, NoiseSpec::default())).collect()
}

pub fn shape_plan() -> Vec<RunSpec> {
    [Shape::LetterOmega, Shape::LettersSZ]
        .into_iter()
        .map(|s| RunSpec::new(s, 2.0, 3.0, NoiseSpec::default()))
        .collect()
}

pub fn noise_plan(seeds: &[u64]) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for shape in [Shape::LetterA, Shape::LetterOmega] {
        for &delta in &NOISE_LEVELS {
            for &seed in seeds {
                out.push(RunSpec::new(shape.clone(), 2.0, 3.0, NoiseSpec { delta, seed }));
            }
        }
    }
    out
}

/// Quantitative comparison of a reconstruction with its phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Maximum of the computed `k` over the inclusion mask (background is 1).
    pub contrast: f64,
    /// The same maximum per connected component of the mask.
    pub component_contrasts: Vec<f64>,
    /// `||k - k_true|| / ||k_true||` over all nodes.
    pub rel_l2: f64,
    /// Intersection over union of `{k > threshold}` with the mask.
    pub iou: f64,
    pub threshold: f64,
}

pub fn compute_metrics(k: &SpatialField, truth: &SpatialField, mask: &[bool], threshold: f64) -> Result<Metrics> {
    let n = k.values.len();
    if truth.values.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: truth.values.len().min(mask.len()) });
    }
    let max_over = |nodes: &mut dyn Iterator<Item = usize>| nodes.map(|i| k.values[i]).fold(f64::NAN, f64::max);
    let contrast = max_over(&mut (0..n).filter(|&i| mask[i]));
    let component_contrasts = connected_components(&k.grid, mask)
        .into_iter()
        .map(|c| max_over(&mut c.into_iter()))
        .collect();
    let num: f64 = k.values.iter().zip(&truth.values).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.values.iter().map(|b| b * b).sum();
    let (mut inter, mut union) = (0usize, 0usize);
    for (v, &m) in k.values.iter().zip(mask) {
        let hit = *v > threshold;
        inter += (hit && m) as usize;
        union += (hit || m) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(Metrics { contrast, component_contrasts, rel_l2: (num / den).sqrt(), iou, threshold })
}

#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    pub run: RunSpec,
    pub beta: f64,
    pub fine: (usize, usize),
    pub coarse: (usize, usize),
    pub k: SpatialField,
    pub metrics: Metrics,
    pub trace: IterationTrace,
    pub objective_scale: f64,
}

impl ReconstructionReport {
    pub fn iterations(&self) -> usize {
        self.trace.iterations()
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.trace.final_record().grad_norm
    }

    pub fn stop(&self) -> StopReason {
        self.trace.stop
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let comps: Vec<String> = m.component_contrasts.iter().map(|c| format!("{c:.6}")).collect();
        let _ = writeln!(s, "schema: {REPORT_SCHEMA}");
        let _ = writeln!(s, "id: {}", self.run.id);
        let _ = writeln!(s, "shape: {}", self.run.shape.name());
        let _ = writeln!(s, "c_a: {}", self.run.contrast);
        let _ = writeln!(s, "lambda: {}", self.run.lambda);
        let _ = writeln!(s, "beta: {}", self.beta);
        let _ = writeln!(s, "delta: {}", self.run.noise.delta);
        let _ = writeln!(s, "seed: {}", self.run.noise.seed);
        let _ = writeln!(s, "fine_grid: {}x{}x{}", self.fine.0, self.fine.0, self.fine.1);
        let _ = writeln!(s, "coarse_grid: {}x{}x{}", self.coarse.0, self.coarse.0, self.coarse.1);
        let _ = writeln!(s, "iterations: {}", self.iterations());
        let _ = writeln!(s, "final_grad_norm: {:e}", self.final_grad_norm());
        let _ = writeln!(s, "stop: {}", self.stop().as_str());
        let _ = writeln!(s, "objective_scale: {:e}", self.objective_scale);
        let _ = writeln!(s, "correct_contrast: {}", self.run.contrast);
        let _ = writeln!(s, "computed_contrast: {:.6}", m.contrast);
        let _ = writeln!(s, "component_contrasts: {}", comps.join(" "));
        let _ = writeln!(s, "rel_l2_error: {:.6}", m.rel_l2);
        let _ = writeln!(s, "iou_threshold: {}", m.threshold);
        let _ = writeln!(s, "iou: {:.6}", m.iou);
        s
    }

    pub fn summary_row(&self) -> String {
        let m = &self.metrics;
        let comps: Vec<String> = m.component_contrasts.iter().map(|c| format!("{c:.6}")).collect();
        format!(
            "{},{},{},{},{},{},{},{},{:e},{},{:.6},{:.6},{:.6},{}",
            self.run.id,
            self.run.shape.name(),
            self.run.contrast,
            self.run.lambda,
            self.beta,
            self.run.noise.delta,
            self.run.noise.seed,
            self.iterations(),
            self.final_grad_norm(),
            self.stop().as_str(),
            m.contrast,
            m.rel_l2,
            m.iou,
            comps.join(";"),
        )
    }
}

pub fn summary_csv(reports: &[ReconstructionReport]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in reports {
        s.push_str(&r.summary_row());
        s.push('\n');
    }
    s
}

/// Noise-free observations and ground truth for one phantom.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub shape: String,
    pub contrast: f64,
    /// Inclusion mask on the inversion grid.
    pub mask: Vec<bool>,
    /// Smallest generated density on the fine grid.
    pub min_density: f64,
    pub data: ProblemData,
    pub truth: GroundTruth,
}

pub fn generate_dataset(shape: &Shape, contrast: f64, cfg: &ExperimentConfig) -> Result<Dataset> {
    let fwd = cfg.forward_config()?;
    let k = Phantom::new(shape.clone(), contrast).with_smoothing(cfg.smoothing).rasterize(&fwd.grid)?;
    let sol = generate(&k, &ProductValue, &cfg.kernel, &fwd)?;
    let (data, truth) =
        extract_observations(&ProductValue, &sol, &cfg.kernel, &cfg.coarse_grid()?, cfg.domain.grad_floor)?;
    let mask = shape.mask(&data.grid);
    let min_density = sol.m.values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Dataset { shape: shape.name().to_string(), contrast, mask, min_density, data, truth })
}

/// Inverts one run against an already generated dataset.
pub fn run_single(ds: &Dataset, run: &RunSpec, cfg: &ExperimentConfig) -> Result<ReconstructionReport> {
    if ds.shape != run.shape.name() || ds.contrast != run.contrast {
        return Err(Error::Dataset(format!("dataset for {} c_a={} used for run {}", ds.shape, ds.contrast, run.id)));
    }
    let data = crate::noise::apply_noise(&ds.data, &run.noise)?;
    let carleman = CarlemanConfig::new(run.lambda, cfg.beta, &data.grid)?;
    let inv = run_inversion(&data, &cfg.kernel, carleman, &cfg.minimizer)?;
    let metrics = compute_metrics(&inv.k, &ds.truth.k, &ds.mask, 0.5 * (1.0 + run.contrast))?;
    Ok(ReconstructionReport {
        run: run.clone(),
        beta: cfg.beta,
        fine: cfg.fine,
        coarse: cfg.coarse,
        k: inv.k,
        metrics,
        trace: inv.trace,
        objective_scale: inv.scale,
    })
}

fn dataset_key(shape: &str, contrast: f64) -> String {
    format!("{shape}/{contrast}")
}

/// Generates each distinct phantom once, then inverts all runs in parallel.
/// Reports come back in plan order.
pub fn run_plan(plan: &[RunSpec], cfg: &ExperimentConfig) -> Result<Vec<ReconstructionReport>> {
    let mut ids = std::collections::BTreeSet::new();
    for r in plan {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate run id `{}`", r.id)));
        }
    }
    let mut wanted: BTreeMap<String, (Shape, f64)> = BTreeMap::new();
    for r in plan {
        wanted.entry(dataset_key(r.shape.name(), r.contrast)).or_insert((r.shape.clone(), r.contrast));
    }
    let datasets: BTreeMap<String, Dataset> = wanted
        .into_par_iter()
        .map(|(key, (shape, c))| generate_dataset(&shape, c, cfg).map(|d| (key, d)))
        .collect::<Result<_>>()?;
    run_with_datasets(plan, &datasets, cfg)
}

/// Like [`run_plan`] with datasets supplied by the caller, keyed by
/// [`Dataset::key`].
pub fn run_with_datasets(
    plan: &[RunSpec],
    datasets: &BTreeMap<String, Dataset>,
    cfg: &ExperimentConfig,
) -> Result<Vec<ReconstructionReport>> {
    plan.par_iter()
        .map(|r| {
            let ds = datasets
                .get(&dataset_key(r.shape.name(), r.contrast))
                .ok_or_else(|| Error::Dataset(format!("no dataset for run {}", r.id)))?;
            run_single(ds, r, cfg)
        })
        .collect()
}

impl Dataset {
    pub fn key(&self) -> String {
        dataset_key(&self.shape, self.contrast)
    }
}
