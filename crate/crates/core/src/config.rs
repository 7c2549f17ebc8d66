//! Sectioned TOML run configuration. Defaults reproduce the reference setup:
//! `Omega = (1, 2)^2`, `T = 1`, `sigma = 0.2`, `lambda = 3`, `beta = 0.001`,
//! fine grid `160^2 x 320`, inversion grid `20^2 x 10`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, RunSpec};
use crate::forward::{Advection, LinearSolver};
use crate::minimize::{Method, MinimizerConfig, Scaling, StepRule};
use crate::model::{DomainSpec, Kernel, Shape};
use crate::noise::NoiseSpec;
use crate::objective::CarlemanConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSection,
    pub grid: GridSection,
    pub phantom: PhantomSection,
    pub kernel: KernelSection,
    pub forward: ForwardSection,
    pub carleman: CarlemanSection,
    pub minimizer: MinimizerSection,
    pub noise: NoiseSection,
    pub io: IoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
    pub t_max: f64,
    pub grad_floor: f64,
}

impl Default for DomainSection {
    fn default() -> Self {
        let d = DomainSpec::default();
        Self { x1: [d.x1.0, d.x1.1], x2: [d.x2.0, d.x2.1], t_max: d.t_max, grad_floor: d.grad_floor }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub fine_n: usize,
    pub fine_nt: usize,
    pub coarse_n: usize,
    pub coarse_nt: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { fine_n: 160, fine_nt: 320, coarse_n: 20, coarse_nt: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// `A`, `Omega`, `SZ`, `empty` or `bitmap:<path>`.
    pub shape: String,
    pub contrast: f64,
    pub smoothing: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { shape: "A".into(), contrast: 2.0, smoothing: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub variant: String,
    pub sigma: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self { variant: "delta-gaussian".into(), sigma: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSection {
    /// `auto`, `banded` or `bicgstab`.
    pub solver: String,
    pub tol: f64,
    pub max_iter: usize,
    /// `non-conservative` or `conservative`.
    pub advection: String,
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self { solver: "auto".into(), tol: 1e-13, max_iter: 5000, advection: "non-conservative".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarlemanSection {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for CarlemanSection {
    fn default() -> Self {
        Self { lambda: 3.0, beta: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimizerSection {
    /// `gd` or `lbfgs`.
    pub method: String,
    pub memory: usize,
    /// Fixed initial step; absent means backtracking from 1.
    pub step: Option<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub backtracking: bool,
    pub step_growth: f64,
    /// `bb` or `growth`.
    pub step_rule: String,
    pub ball_radius: f64,
    /// `initial-gradient`, `initial-value` or `none`.
    pub scaling: String,
}

impl Default for MinimizerSection {
    fn default() -> Self {
        let m = MinimizerConfig::default();
        Self {
            method: "gd".into(),
            memory: 10,
            step: m.step,
            max_iter: m.max_iter,
            grad_tol: m.grad_tol,
            backtracking: m.backtracking,
            step_growth: m.step_growth,
            step_rule: "bb".into(),
            ball_radius: m.ball_radius,
            scaling: "initial-gradient".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub delta: f64,
    /// Root seed; noise plans use `seed, seed + 1, ...`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub dataset: String,
    pub out: String,
}

impl Default for IoSection {
    fn default() -> Self {
        Self { dataset: "dataset".into(), out: "out".into() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks every section by building the typed configurations.
    pub fn validate(&self) -> Result<()> {
        let exp = self.experiment()?;
        exp.domain.validate()?;
        exp.minimizer.validate()?;
        exp.kernel.validate()?;
        self.shape()?;
        self.noise_spec()?;
        let coarse = exp.coarse_grid()?;
        exp.fine_grid()?.refinement_of(&coarse)?;
        CarlemanConfig::new(self.carleman.lambda, self.carleman.beta, &coarse)?;
        if !(self.phantom.contrast >= 1.0) {
            return Err(Error::InvalidConfig("phantom contrast must be >= 1".into()));
        }
        Ok(())
    }

    pub fn domain(&self) -> DomainSpec {
        let d = &self.domain;
        DomainSpec { x1: (d.x1[0], d.x1[1]), x2: (d.x2[0], d.x2[1]), t_max: d.t_max, grad_floor: d.grad_floor }
    }

    pub fn shape(&self) -> Result<Shape> {
        Shape::parse(&self.phantom.shape)
    }

    pub fn kernel(&self) -> Result<Kernel> {
        Kernel::parse(&self.kernel.variant, self.kernel.sigma)
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.noise.delta, self.noise.seed)
    }

    pub fn solver(&self) -> Result<LinearSolver> {
        match self.forward.solver.as_str() {
            "auto" => Ok(LinearSolver::Auto),
            "banded" => Ok(LinearSolver::Banded),
            "bicgstab" => Ok(LinearSolver::BiCgStab { tol: self.forward.tol, max_iter: self.forward.max_iter }),
            other => Err(Error::InvalidConfig(format!("unknown solver `{other}`"))),
        }
    }

    pub fn advection(&self) -> Result<Advection> {
        match self.forward.advection.as_str() {
            "non-conservative" => Ok(Advection::NonConservative),
            "conservative" => Ok(Advection::Conservative),
            other => Err(Error::InvalidConfig(format!("unknown advection form `{other}`"))),
        }
    }

    pub fn minimizer(&self) -> Result<MinimizerConfig> {
        let m = &self.minimizer;
        let method = match m.method.as_str() {
            "gd" => Method::GradientDescent,
            "lbfgs" => Method::Lbfgs { memory: m.memory },
            other => return Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        };
        let scaling = match m.scaling.as_str() {
            "initial-gradient" => Scaling::InitialGradient,
            "initial-value" => Scaling::InitialValue,
            "none" => Scaling::None,
            other => return Err(Error::InvalidConfig(format!("unknown scaling `{other}`"))),
        };
        let step_rule = match m.step_rule.as_str() {
            "bb" => StepRule::BarzilaiBorwein,
            "growth" => StepRule::Growth,
            other => return Err(Error::InvalidConfig(format!("unknown step rule `{other}`"))),
        };
        let cfg = MinimizerConfig {
            method,
            step: m.step,
            max_iter: m.max_iter,
            grad_tol: m.grad_tol,
            backtracking: m.backtracking,
            step_growth: m.step_growth,
            step_rule,
            ball_radius: m.ball_radius,
            scaling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            domain: self.domain(),
            fine: (self.grid.fine_n, self.grid.fine_nt),
            coarse: (self.grid.coarse_n, self.grid.coarse_nt),
            smoothing: self.phantom.smoothing,
            kernel: self.kernel()?,
            beta: self.carleman.beta,
            solver: self.solver()?,
            advection: self.advection()?,
            minimizer: self.minimizer()?,
        })
    }

    /// The single run described by the `phantom`, `carleman` and `noise` sections.
    pub fn run_spec(&self) -> Result<RunSpec> {
        Ok(RunSpec::new(self.shape()?, self.phantom.contrast, self.carleman.lambda, self.noise_spec()?))
    }

    /// SHA-256 over the sections that determine generated data.
    pub fn generation_hash(&self) -> String {
        #[derive(Serialize)]
        struct Gen<'a> {
            domain: &'a DomainSection,
            grid: &'a GridSection,
            phantom: &'a PhantomSection,
            kernel: &'a KernelSection,
            forward: &'a ForwardSection,
        }
        let text = toml::to_string(&Gen {
            domain: &self.domain,
            grid: &self.grid,
            phantom: &self.phantom,
            kernel: &self.kernel,
            forward: &self.forward,
        })
        .expect("serializable");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_setup() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let e = c.experiment().unwrap();
        assert_eq!((e.fine, e.coarse), ((160, 320), (20, 10)));
        assert_eq!(e.domain, DomainSpec::default());
        assert_eq!((c.carleman.lambda, c.carleman.beta, c.kernel.sigma), (3.0, 0.001, 0.2));
        assert!(matches!(e.kernel, Kernel::DeltaGaussian { sigma } if sigma == 0.2));
        assert_eq!(e.minimizer, MinimizerConfig::default());
    }

    #[test]
    fn sections_override_and_round_trip() {
        let c = RunConfig::parse(
            "[carleman]\nlambda = 5.0\n[minimizer]\nmethod = \"lbfgs\"\nstep = 0.5\n[noise]\ndelta = 0.03\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(c.carleman.lambda, 5.0);
        assert_eq!(c.minimizer().unwrap().method, Method::Lbfgs { memory: 10 });
        assert_eq!(c.minimizer().unwrap().step, Some(0.5));
        assert_eq!(c.run_spec().unwrap().noise, NoiseSpec { delta: 0.03, seed: 9 });
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "[carleman]\nlamda = 3.0\n",
            "[nonsense]\n",
            "[carleman]\nbeta = 2.0\n",
            "[grid]\nfine_n = 30\n",
            "[phantom]\nshape = \"Q\"\n",
            "[minimizer]\nmethod = \"newton\"\n",
            "[noise]\ndelta = -0.1\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::InvalidConfig(_) | Error::NotARefinement { .. })), "{text}");
        }
    }

    #[test]
    fn generation_hash_ignores_inversion_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.carleman.lambda = 1.0;
        b.noise.seed = 4;
        assert_eq!(a.generation_hash(), b.generation_hash());
        b.phantom.contrast = 4.0;
        assert_ne!(a.generation_hash(), b.generation_hash());
        assert_eq!(a.generation_hash().len(), 64);
    }
}
