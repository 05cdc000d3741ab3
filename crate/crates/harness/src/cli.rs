//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentKind;
use crate::{emit, run_experiment, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(
    name = "shrinkage-sim",
    version,
    about = "Shrinkage-debiased resolvent estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resolvent estimation error against local sample size.
    Resolvent(RunArgs),
    /// Distributed Newton with averaged local inverse Hessians.
    Newton(RunArgs),
    /// Inexact Newton with distributed preconditioned CG.
    InexactNewton(RunArgs),
    /// Iterative Hessian Sketch for ridge regression.
    Ihs(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Aggregated CSV; written to stdout when neither this nor the config
    /// names a file.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    /// Per-trial curves as CSV.
    #[arg(long)]
    out_raw: Option<PathBuf>,
    /// Worker threads. Changes speed only, never results.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(kind: ExperimentKind, args: RunArgs, stdout: &mut dyn Write) -> Result<(), HarnessError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.experiment != kind {
        return Err(HarnessError::Config(format!(
            "experiment: config is `{}` but the `{}` subcommand was used",
            config.experiment.name(),
            kind.name()
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        if trials == 0 {
            return Err(HarnessError::Config("trials: must be at least 1".into()));
        }
        config.trials = trials;
    }
    let pool = match args.threads {
        Some(0) => return Err(HarnessError::Config("threads: must be at least 1".into())),
        Some(t) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| HarnessError::Io(e.to_string()))?,
        ),
        None => None,
    };
    let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
    let csv_path = args
        .out_csv
        .or_else(|| config.output.csv.as_ref().map(|p| base.join(p)));
    let svg_path = args
        .out_svg
        .or_else(|| config.output.svg.as_ref().map(|p| base.join(p)));

    let output = match &pool {
        Some(p) => p.install(|| run_experiment(&config))?,
        None => run_experiment(&config)?,
    };
    match csv_path {
        Some(p) => emit::emit_csv(&output.series, &p)?,
        None => emit::write_csv(&output.series, stdout)?,
    }
    if let Some(p) = svg_path {
        emit::emit_svg(&output.series, &p)?;
    }
    if let Some(p) = args.out_raw {
        emit::emit_raw_csv(&output.outcomes, &p)?;
    }
    Ok(())
}

/// Parses `args` (program name first), runs the experiment and returns the
/// process exit code: 0 on success, 1 for usage or config errors, 2 for
/// runtime and I/O errors.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                1
            } else {
                let _ = stdout.write_all(text.as_bytes());
                0
            };
        }
    };
    let (kind, args) = match cli.command {
        Command::Resolvent(a) => (ExperimentKind::Resolvent, a),
        Command::Newton(a) => (ExperimentKind::Newton, a),
        Command::InexactNewton(a) => (ExperimentKind::InexactNewton, a),
        Command::Ihs(a) => (ExperimentKind::Ihs, a),
    };
    match run(kind, args, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "shrinkage-sim: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use std::path::{Path, PathBuf};

    use super::run_cli;
    use crate::config::{DataSource, ExperimentConfig};
    use crate::emit::{csv_string, read_csv, render_svg};
    use crate::run_experiment;

    struct Outcome {
        code: i32,
        stdout: Vec<u8>,
        stderr: Vec<u8>,
    }

    fn run(args: &[&str]) -> Outcome {
        let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
        let code = run_cli(
            std::iter::once("shrinkage-sim").chain(args.iter().copied()),
            &mut stdout,
            &mut stderr,
        );
        Outcome { code, stdout, stderr }
    }

    fn configs_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
    }

    fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    const SMALL_NEWTON: &str = r#"
    experiment = "newton"
    lambda = 0.05
    agents = 4
    trials = 3
    seed = 11
    estimators = ["shrinkage", "average", "determinantal"]

    [data.synthetic]
    n = 800
    d = 12
    covariance = "power-law"

    [stopping]
    max-rounds = 8
    "#;

    const SMALL_RESOLVENT: &str = r#"
    experiment = "resolvent"
    lambda = 0.1
    agents = 10
    trials = 4
    seed = 3
    local-samples = [20, 40]
    d-lambda = 30.0
    estimators = ["shrinkage", "average"]

    [data.synthetic]
    d = 8
    "#;

    #[test]
    fn valid_run_exits_zero_and_prints_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "n.toml", SMALL_NEWTON);
        let out = run(&["newton", "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.code, 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.starts_with("x,estimator,median,q20,q80,skipped\n"));
        let rows = read_csv(text.as_bytes()).unwrap();
        assert!(rows.iter().any(|r| r.estimator == "determinantal"));
    }

    #[test]
    fn config_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_config(dir.path(), "n.toml", SMALL_NEWTON);
        let bad = write_config(
            dir.path(),
            "bad.toml",
            &SMALL_NEWTON.replace("lambda = 0.05", "lambda = -1"),
        );
        let cases: Vec<Vec<&str>> = vec![
            vec!["newton", "--config", bad.to_str().unwrap()],
            vec!["newton", "--config", "/definitely/not/here.toml"],
            vec!["ihs", "--config", good.to_str().unwrap()],
            vec!["newton", "--config", good.to_str().unwrap(), "--trials", "0"],
            vec!["newton", "--config", good.to_str().unwrap(), "--bogus"],
            vec!["newton"],
            vec!["frobnicate"],
        ];
        for args in cases {
            let out = run(&args);
            assert_eq!(out.code, 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            assert!(!out.stderr.is_empty());
        }
        let out = run(&["newton", "--config", bad.to_str().unwrap()]);
        assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let missing = write_config(
            dir.path(),
            "m.toml",
            "experiment = \"newton\"\nlambda = 0.1\n[data]\nlibsvm = \"nope.libsvm\"\n",
        );
        assert_eq!(run(&["newton", "--config", missing.to_str().unwrap()]).code, 2);
        std::fs::write(dir.path().join("broken.libsvm"), "1 1:0.5\n-1 2:x\n").unwrap();
        let broken = write_config(
            dir.path(),
            "b.toml",
            "experiment = \"newton\"\nlambda = 0.1\n[data]\nlibsvm = \"broken.libsvm\"\n",
        );
        let out = run(&["newton", "--config", broken.to_str().unwrap()]);
        assert_eq!(out.code, 2);
        assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
        let good = write_config(dir.path(), "n.toml", SMALL_NEWTON);
        let unwritable = dir.path().join("no/such/dir/out.csv");
        let out = run(&[
            "newton",
            "--config",
            good.to_str().unwrap(),
            "--out-csv",
            unwritable.to_str().unwrap(),
        ]);
        assert_eq!(out.code, 2);
    }

    #[test]
    fn output_is_byte_identical_across_runs_and_thread_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "n.toml", SMALL_NEWTON);
        let mut outputs = Vec::new();
        for threads in [None, None, Some("1"), Some("8")] {
            let csv = dir.path().join(format!("out{}.csv", outputs.len()));
            let mut args = vec![
                "newton",
                "--config",
                cfg.to_str().unwrap(),
                "--out-csv",
                csv.to_str().unwrap(),
            ];
            if let Some(t) = threads {
                args.extend(["--threads", t]);
            }
            assert_eq!(run(&args).code, 0);
            outputs.push(std::fs::read(&csv).unwrap());
        }
        assert!(outputs.windows(2).all(|w| w[0] == w[1]));
        let other_seed = dir.path().join("seed.csv");
        run(&[
            "newton",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "12",
            "--out-csv",
            other_seed.to_str().unwrap(),
        ]);
        assert_ne!(std::fs::read(other_seed).unwrap(), outputs[0]);
    }

    #[test]
    fn csv_reparse_reproduces_the_series() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(&write_config(dir.path(), "n.toml", SMALL_NEWTON)).unwrap();
        let series = run_experiment(&cfg).unwrap().series;
        let back = read_csv(csv_string(&series).unwrap().as_bytes()).unwrap();
        assert_eq!(back.len(), series.rows.len());
        for (a, b) in back.iter().zip(&series.rows) {
            assert_eq!(
                (a.x.to_bits(), &a.estimator, a.skipped),
                (b.x.to_bits(), &b.estimator, b.skipped)
            );
            for (u, v) in [(a.median, b.median), (a.q20, b.q20), (a.q80, b.q80)] {
                assert!(u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()));
            }
        }
    }

    #[test]
    fn svg_has_one_polyline_per_estimator() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "n.toml", SMALL_NEWTON);
        let svg = dir.path().join("plot.svg");
        let csv = dir.path().join("plot.csv");
        let out = run(&[
            "newton",
            "--config",
            cfg.to_str().unwrap(),
            "--out-svg",
            svg.to_str().unwrap(),
            "--out-csv",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(out.code, 0);
        let text = std::fs::read_to_string(svg).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(lines.len(), 3);
        assert!(text.contains("log10 gap"));
        for name in ["shrinkage", "average", "determinantal"] {
            assert!(doc.descendants().any(|n| n.text() == Some(name)));
        }
    }

    #[test]
    fn single_trial_band_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::load(&write_config(dir.path(), "n.toml", SMALL_NEWTON)).unwrap();
        cfg.trials = 1;
        let series = run_experiment(&cfg).unwrap().series;
        for r in &series.rows {
            assert_eq!(r.q20.to_bits(), r.median.to_bits());
            assert_eq!(r.q80.to_bits(), r.median.to_bits());
        }
    }

    #[test]
    fn budget_violations_are_flagged_not_fabricated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::load(&write_config(dir.path(), "r.toml", SMALL_RESOLVENT)).unwrap();
        let out = run_experiment(&cfg).unwrap();
        let shrink: Vec<_> = out.series.rows_for("shrinkage").collect();
        assert!(shrink[0].skipped && shrink[0].median.is_nan());
        assert!(!shrink[1].skipped && shrink[1].median.is_finite());
        assert!(out.series.rows_for("average").all(|r| !r.skipped));
    }

    #[test]
    fn synthetic_identity_resolvent_orders_shrinkage_below_average() {
        let cfg = ExperimentConfig::load(&configs_dir().join("resolvent-identity.toml")).unwrap();
        let series = run_experiment(&cfg).unwrap().series;
        let avg: Vec<f64> = series.rows_for("average").map(|r| r.median).collect();
        let shrink: Vec<f64> = series.rows_for("shrinkage").map(|r| r.median).collect();
        assert_eq!(shrink.len(), cfg.local_samples.len());
        for (s, a) in shrink.iter().zip(&avg) {
            assert!(s < a, "{s} vs {a}");
        }
        let svg = render_svg(&series);
        assert!(svg.contains("relative spectral error"));
    }

    #[test]
    fn every_committed_config_loads() {
        let mut n = 0;
        for entry in std::fs::read_dir(configs_dir()).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                if let DataSource::Libsvm(p) = &cfg.data {
                    assert!(p.exists(), "{}", p.display());
                }
                n += 1;
            }
        }
        assert!(n >= 10);
    }
}
