use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfg_convex::experiments::SUMMARY_HEADER;
use mfg_convex::io::{decode_pgm16, read_matrix};

const SMALL: &str = "[grid]\nfine_n = 20\nfine_nt = 12\ncoarse_n = 10\ncoarse_nt = 6\n[phantom]\nsmoothing = 0\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg-convex"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn generate(cfg: &Path, out: &Path) {
    ok(&run(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "generate"]));
}

#[test]
fn generate_is_deterministic_and_records_density() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&cfg, &a);
    generate(&cfg, &b);
    let ma = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("manifest.txt")).unwrap());
    assert_eq!(fs::read(a.join("f.csv")).unwrap(), fs::read(b.join("f.csv")).unwrap());
    let min: f64 = ma.lines().find_map(|l| l.strip_prefix("min_density: ")).unwrap().parse().unwrap();
    assert!(min > 0.0);
    assert!(ma.contains("config_hash: ") && ma.contains("code_version: ") && ma.contains("seed: 0"));
}

#[test]
fn contrast_change_touches_only_k_dependent_files() {
    let tmp = tempfile::tempdir().unwrap();
    let c2 = write_config(tmp.path(), "c2.toml", SMALL);
    let c4 = write_config(tmp.path(), "c4.toml", &SMALL.replace("smoothing = 0", "smoothing = 0\ncontrast = 4.0"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&c2, &a);
    generate(&c4, &b);
    let same = |f: &str| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
    for f in ["u0.csv", "trace_v_dirichlet.csv", "trace_v_neumann.csv", "trace_w_dirichlet.csv", "raw_g0.csv", "raw_g1.csv", "mask.csv"] {
        assert!(same(f), "{f} changed");
    }
    for f in ["k_true.csv", "m0.csv", "f.csv", "manifest.txt"] {
        assert!(!same(f), "{f} unchanged");
    }
}

#[test]
fn invert_reports_and_checks_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = tmp.path().join("data");
    generate(&cfg, &data);
    let out = tmp.path().join("out");
    let text = ok(&run(&[
        "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "invert", "--dataset", data.to_str().unwrap(),
    ]));
    assert!(text.contains("lambda: 3\n") && text.contains("beta: 0.001\n"));
    assert!(out.join("A-c2-l3-d0-s0.k.csv").is_file());
    assert!(fs::read_to_string(out.join("A-c2-l3-d0-s0.trace.csv")).unwrap().starts_with("iteration,J,grad_norm,step"));

    let missing = run(&["--config", cfg.to_str().unwrap(), "invert", "--dataset", tmp.path().join("nope").to_str().unwrap()]);
    assert!(error_line(&missing).starts_with("error[E_DATASET]"));

    let other = write_config(tmp.path(), "o.toml", &SMALL.replace("coarse_nt = 6", "coarse_nt = 4"));
    let mismatch = run(&["--config", other.to_str().unwrap(), "invert", "--dataset", data.to_str().unwrap()]);
    assert!(error_line(&mismatch).contains("coarse_grid"));
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[carleman]\nlamda = 3.0\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "generate"]);
    assert!(error_line(&o).starts_with("error[E_CONFIG]"));
}

#[test]
fn sweep_emits_six_rows_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = tmp.path().join("data");
    generate(&cfg, &data);
    let mut csvs = Vec::new();
    for name in ["o1", "o2"] {
        let out = tmp.path().join(name);
        ok(&run(&[
            "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2",
            "sweep", "--dataset", data.to_str().unwrap(),
        ]));
        csvs.push(fs::read_to_string(out.join("sweep_summary.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let lines: Vec<&str> = csvs[0].lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines.len(), 7);
}

#[test]
fn render_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("img");
    let flat = tmp.path().join("flat.csv");
    fs::write(&flat, "2.5,2.5,2.5\n2.5,2.5,2.5\n").unwrap();
    ok(&run(&["--out", out.to_str().unwrap(), "render", flat.to_str().unwrap()]));
    let (w, h, px) = decode_pgm16(&fs::read(out.join("flat.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (3, 2));
    assert!(px.windows(2).all(|p| p[0] == p[1]));

    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = tmp.path().join("data");
    generate(&cfg, &data);
    ok(&run(&["--out", out.to_str().unwrap(), "render", data.join("k_true.csv").to_str().unwrap(), "--lo", "1", "--hi", "2"]));
    let (_, _, px) = decode_pgm16(&fs::read(out.join("k_true.pgm")).unwrap()).unwrap();
    let (mask, _) = read_matrix(&data.join("mask.csv")).unwrap();
    let inside = mask.iter().filter(|&&m| m != 0.0).count();
    assert!(inside > 0);
    assert_eq!(px.iter().filter(|&&g| g == 65535).count(), inside);
    assert_eq!(px.iter().filter(|&&g| g == 0).count(), mask.len() - inside);
    assert_eq!(read_matrix(&out.join("k_true.csv")).unwrap(), read_matrix(&data.join("k_true.csv")).unwrap());
}
