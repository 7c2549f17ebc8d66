use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_convex::config::RunConfig;
use mfg_convex::experiments::{
    contrast_series_plan, generate_dataset, noise_plan, run_plan, run_single, run_with_datasets, shape_plan,
    summary_csv, Dataset, ReconstructionReport, RunSpec, LAMBDAS,
};
use mfg_convex::io::{self, Manifest};
use mfg_convex::model::Shape;
use mfg_convex::{Error, Result};

#[derive(Parser)]
#[command(name = "mfg-convex", version, about = "Recover the interaction coefficient of a mean field games system")]
struct Cli {
    /// TOML run configuration; defaults to the reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `io.out`, or `io.dataset` for `generate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for multi-run commands.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root seed (overrides `noise.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward problem and write a dataset directory.
    Generate,
    /// Invert one dataset.
    Invert {
        /// Dataset directory (overrides `io.dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Invert one dataset for every lambda in {0, 1, 2, 3, 5, 10}.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Noisy runs on A and Omega at 3% and 5% with three seeds.
    Noise,
    /// Omega and SZ phantoms.
    Shapes,
    /// Letter A at contrasts 4 and 8.
    Contrasts,
    /// Export a CSV matrix as a 16-bit graymap.
    Render {
        /// CSV matrix, one `x2` scan line per row.
        input: PathBuf,
        /// Value mapped to black (default: minimum).
        #[arg(long)]
        lo: Option<f64>,
        /// Value mapped to white (default: maximum).
        #[arg(long)]
        hi: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.noise.seed = seed;
    }
    let pool = rayon_pool(cli.jobs)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.io.out));
    pool.install(|| match cli.command {
        Command::Generate => generate(&cfg, cli.out.unwrap_or_else(|| PathBuf::from(&cfg.io.dataset))),
        Command::Invert { dataset } => invert(&cfg, &dataset_dir(&cfg, dataset), &out),
        Command::Sweep { dataset } => sweep(&cfg, &dataset_dir(&cfg, dataset), &out),
        Command::Noise => {
            let s = cfg.noise.seed;
            plan(&cfg, &noise_plan(&[s, s + 1, s + 2]), &out, "noise")
        }
        Command::Shapes => plan(&cfg, &shape_plan(), &out, "shapes"),
        Command::Contrasts => plan(&cfg, &contrast_series_plan(), &out, "contrasts"),
        Command::Render { input, lo, hi } => render(&input, lo, hi, &out),
    })
}

fn rayon_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::InvalidConfig("--jobs must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn dataset_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from(&cfg.io.dataset))
}

fn generate(cfg: &RunConfig, dir: PathBuf) -> Result<()> {
    let exp = cfg.experiment()?;
    let ds = generate_dataset(&cfg.shape()?, cfg.phantom.contrast, &exp)?;
    let mut extra = Manifest::default();
    extra.set("config_hash", cfg.generation_hash());
    extra.set("seed", cfg.noise.seed);
    extra.set("rng", mfg_convex::noise::RNG_ALGORITHM);
    io::save_dataset(&dir, &ds, exp.fine, &extra)?;
    println!("dataset: {}", dir.display());
    println!("min_density: {:e}", ds.min_density);
    Ok(())
}

fn load_checked(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let (ds, manifest) = io::load_dataset(dir)?;
    let g = &cfg.grid;
    let want_coarse = format!("{} {} {}", g.coarse_n, g.coarse_n, g.coarse_nt);
    let want_fine = format!("{} {} {}", g.fine_n, g.fine_n, g.fine_nt);
    for (key, want) in [("coarse_grid", want_coarse), ("fine_grid", want_fine)] {
        let have = manifest.get(key)?;
        if have != want {
            return Err(Error::Dataset(format!("dataset {key} is `{have}` but the configuration asks for `{want}`")));
        }
    }
    Ok(ds)
}

fn dataset_shape(ds: &Dataset) -> Result<Shape> {
    Shape::parse(&ds.shape)
        .map_err(|_| Error::Dataset(format!("dataset shape `{}` is not a built-in phantom", ds.shape)))
}

fn write_report(dir: &Path, r: &ReconstructionReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{}.report.txt", r.run.id)), r.to_text())?;
    fs::write(dir.join(format!("{}.trace.csv", r.run.id)), r.trace.to_csv())?;
    io::write_spatial(&dir.join(format!("{}.k.csv", r.run.id)), &r.k)
}

fn invert(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let ds = load_checked(cfg, dataset)?;
    let exp = cfg.experiment()?;
    let run = RunSpec::new(dataset_shape(&ds)?, ds.contrast, cfg.carleman.lambda, cfg.noise_spec()?);
    let report = run_single(&ds, &run, &exp)?;
    write_report(out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn sweep(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let ds = load_checked(cfg, dataset)?;
    let shape = dataset_shape(&ds)?;
    let noise = cfg.noise_spec()?;
    let plan: Vec<RunSpec> = LAMBDAS.iter().map(|&l| RunSpec::new(shape.clone(), ds.contrast, l, noise)).collect();
    let mut map = std::collections::BTreeMap::new();
    map.insert(ds.key(), ds);
    let reports = run_with_datasets(&plan, &map, &cfg.experiment()?)?;
    finish(&reports, out, "sweep")
}

fn plan(cfg: &RunConfig, plan: &[RunSpec], out: &Path, name: &str) -> Result<()> {
    let reports = run_plan(plan, &cfg.experiment()?)?;
    finish(&reports, out, name)
}

fn finish(reports: &[ReconstructionReport], out: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    for r in reports {
        write_report(out, r)?;
    }
    let csv = summary_csv(reports);
    fs::write(out.join(format!("{name}_summary.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

fn render(input: &Path, lo: Option<f64>, hi: Option<f64>, out: &Path) -> Result<()> {
    let (values, width) = io::read_matrix(input)?;
    if values.is_empty() {
        return Err(Error::Dataset(format!("{} holds no values", input.display())));
    }
    let lo = lo.unwrap_or_else(|| values.iter().copied().fold(f64::INFINITY, f64::min));
    let hi = hi.unwrap_or_else(|| values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("field");
    fs::create_dir_all(out)?;
    let pgm = out.join(format!("{stem}.pgm"));
    fs::write(&pgm, io::encode_pgm16(&values, width, lo, hi)?)?;
    let csv = out.join(format!("{stem}.csv"));
    if fs::canonicalize(input).ok() != fs::canonicalize(&csv).ok() {
        io::write_matrix(&csv, &values, width)?;
    }
    println!("{}", pgm.display());
    Ok(())
}
