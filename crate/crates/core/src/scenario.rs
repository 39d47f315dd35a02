//! Solver dispatch and file output for configured scenarios.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::collective::{evolve_collective, TrackedLayout};
use crate::config::{Method, ScenarioConfig};
use crate::couplings::{coupling_matrices, CouplingMatrices};
use crate::cumulant2::evolve_individual;
use crate::error::{Error, Result};
use crate::exact::{run_exact, FockLayout};
use crate::lattice::{build_array, EmitterArray};
use crate::modes::{
    apply_truncation, asymptotic_fraction, radiant_fraction, radiant_fraction_exact,
    spin_wave_modes, ModeSet,
};
use crate::observables::{self, ObservableSample, Peak};
use crate::odeint::{uniform_grid, Stats};

pub const THREADS_ENV: &str = "COLLRAD_THREADS";
pub const CSV_HEADER: &str = "t,p_exc,p_out,g2,g2_reliable";

/// Exit status for an error: 3 for integration failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_solver_failure() {
        3
    } else {
        2
    }
}

/// Sizes the global rayon pool from `explicit`, falling back to
/// `COLLRAD_THREADS`. Returns the thread count in effect.
pub fn configure_threads(explicit: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "{THREADS_ENV} must be a positive integer, got `{v}`"
                    ))
                })?,
        ),
        _ => None,
    };
    if let Some(n) = explicit.or(from_env) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn build_system(cfg: &ScenarioConfig) -> Result<(EmitterArray, CouplingMatrices)> {
    let array = build_array(
        cfg.geometry,
        cfg.n1d,
        cfg.spacing,
        cfg.polarization.vector(),
    )?;
    let couplings = coupling_matrices(&array, cfg.environment)?;
    Ok((array, couplings))
}

pub fn build_modes(
    cfg: &ScenarioConfig,
    array: &EmitterArray,
    couplings: &CouplingMatrices,
) -> Result<ModeSet> {
    let modes = spin_wave_modes(couplings, array)?;
    apply_truncation(&modes, cfg.truncation, cfg.spacing)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub method: Method,
    pub samples: Vec<ObservableSample>,
    pub n_emitters: usize,
    /// Collective modes kept; the individual-basis methods report N.
    pub kept_modes: usize,
    /// Unknowns integrated: tracked moments, stored ρ entries, or
    /// individual correlators.
    pub tracked_equations: usize,
    pub stats: Stats,
    pub wall_time_s: f64,
}

impl RunOutput {
    pub fn peak(&self) -> Option<Peak> {
        observables::peak(&self.samples)
    }
}

/// Runs the configured solver from full inversion.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let (array, couplings) = build_system(cfg)?;
    let grid = uniform_grid(cfg.t_max, cfg.points);
    let n = array.len();
    let (samples, kept, tracked, stats) = match cfg.method {
        Method::Collective => {
            let modes = build_modes(cfg, &array, &couplings)?;
            let run = evolve_collective(&modes, &grid, &cfg.integrator)?;
            (run.samples, run.kept, run.tracked, run.stats)
        }
        Method::Exact => {
            let mut run = run_exact(&couplings, &grid, &cfg.integrator, cfg.oracle_cap)?;
            observables::flag_post_peak(&mut run.samples);
            (run.samples, n, FockLayout::new(n).storage(), run.stats)
        }
        Method::Cumulant2 => {
            let run = evolve_individual(&couplings, &grid, &cfg.integrator)?;
            (run.samples, n, n + n * (n - 1) + n * (n - 1) / 2, run.stats)
        }
    };
    Ok(RunOutput {
        method: cfg.method,
        samples,
        n_emitters: n,
        kept_modes: kept,
        tracked_equations: tracked,
        stats,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn write_samples<W: Write>(mut w: W, samples: &[ObservableSample]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for s in samples {
        match s.g2 {
            Some(g) => writeln!(
                w,
                "{},{},{},{},{}",
                fmt17(s.t),
                fmt17(s.p_exc),
                fmt17(s.p_out),
                fmt17(g),
                s.g2_reliable as u8
            )?,
            None => writeln!(w, "{},{},{},,", fmt17(s.t), fmt17(s.p_exc), fmt17(s.p_out))?,
        }
    }
    Ok(())
}

/// Reads a file written by [`write_samples`].
pub fn read_samples(path: &Path) -> Result<Vec<ObservableSample>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, what: &str| {
        Error::Config(format!("{}: line {line}: bad {what}", path.display()))
    };
    let head = rdr
        .headers()
        .map_err(|e| Error::Config(e.to_string()))?
        .clone();
    if head.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
        let f = |k: usize, what: &str| f64::from_str(&rec[k]).map_err(|_| bad(line, what));
        let g2 = if rec[3].is_empty() {
            None
        } else {
            Some(f(3, "g2")?)
        };
        out.push(ObservableSample {
            t: f(0, "t")?,
            p_exc: f(1, "p_exc")?,
            p_out: f(2, "p_out")?,
            g2,
            g2_reliable: &rec[4] == "1",
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub csv: PathBuf,
    pub metadata: PathBuf,
    pub kept_modes: usize,
    pub tracked_equations: usize,
    pub peak: Option<Peak>,
    pub wall_time_s: f64,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn metadata(cfg: &ScenarioConfig, out: &RunOutput, csv_name: &str) -> serde_json::Value {
    let peak = out.peak();
    json!({
        "program": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_text": cfg.to_text(),
        "csv": csv_name,
        "n_emitters": out.n_emitters,
        "kept_modes": out.kept_modes,
        "tracked_equations": out.tracked_equations,
        "wall_time_s": out.wall_time_s,
        "threads": rayon::current_num_threads(),
        "steps_accepted": out.stats.accepted,
        "steps_rejected": out.stats.rejected,
        "rhs_evals": out.stats.rhs_evals,
        "peak": peak,
        // later g2 values are written but flagged in the CSV
        "g2_reliable_until": peak.map(|p| p.t),
    })
}

/// Runs one scenario into `cfg.output/<stem>.csv` plus a `.json` sidecar.
pub fn run(cfg: &ScenarioConfig) -> Result<RunReport> {
    run_named(cfg, &cfg.stem())
}

fn run_named(cfg: &ScenarioConfig, stem: &str) -> Result<RunReport> {
    cfg.validate()?;
    ensure_dir(&cfg.output)?;
    let out = simulate(cfg)?;
    let csv = cfg.output.join(format!("{stem}.csv"));
    let meta = cfg.output.join(format!("{stem}.json"));
    write_file(&csv, |w| write_samples(w, &out.samples))?;
    let csv_name = csv.file_name().unwrap().to_string_lossy().into_owned();
    write_file(&meta, |w| {
        serde_json::to_writer_pretty(&mut *w, &metadata(cfg, &out, &csv_name))
            .map_err(std::io::Error::from)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(RunReport {
        csv,
        metadata: meta,
        kept_modes: out.kept_modes,
        tracked_equations: out.tracked_equations,
        peak: out.peak(),
        wall_time_s: out.wall_time_s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    N,
    A,
    DropK,
    Method,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::A => "a",
            SweepAxis::DropK => "drop_k",
            SweepAxis::Method => "method",
        }
    }

    fn apply(self, cfg: &mut ScenarioConfig, value: &str) -> Result<()> {
        match self {
            SweepAxis::N => cfg.set("n", value),
            SweepAxis::A => cfg.set("spacing", value),
            SweepAxis::DropK => cfg.set("truncation", &format!("drop_k:{value}")),
            SweepAxis::Method => cfg.set("method", value),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" => Ok(SweepAxis::N),
            "a" | "spacing" => Ok(SweepAxis::A),
            "drop_k" => Ok(SweepAxis::DropK),
            "method" => Ok(SweepAxis::Method),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (n | a | drop_k | method)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub index: usize,
    pub value: String,
    pub outcome: std::result::Result<RunReport, String>,
    pub exit_code: i32,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub summary: PathBuf,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// 0 if every point ran, otherwise the worst point's code.
    pub fn exit_code(&self) -> i32 {
        self.points.iter().map(|p| p.exit_code).max().unwrap_or(0)
    }
}

pub const SUMMARY_HEADER: &str =
    "index,axis,value,status,peak_t,peak_p_out,peak_g2,kept_modes,tracked_equations,csv";

/// One run per value of `axis`; failures are recorded and the sweep
/// continues. Points land in `template.output` as `p<index>_<stem>`.
pub fn sweep(template: &ScenarioConfig, axis: SweepAxis, values: &[String]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    ensure_dir(&template.output)?;
    let mut points = Vec::with_capacity(values.len());
    for (index, value) in values.iter().enumerate() {
        let mut cfg = template.clone();
        let result = axis
            .apply(&mut cfg, value)
            .and_then(|_| run_named(&cfg, &format!("p{index:03}_{}", cfg.stem())));
        let (outcome, code) = match result {
            Ok(r) => (Ok(r), 0),
            Err(e) => (Err(e.to_string()), exit_code(&e)),
        };
        points.push(SweepPoint {
            index,
            value: value.clone(),
            outcome,
            exit_code: code,
        });
    }
    let summary = template.output.join(format!("sweep_{}.csv", axis.name()));
    let file = File::create(&summary)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", summary.display())))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(SUMMARY_HEADER.split(',')).map_err(io)?;
    for p in &points {
        let mut row = vec![
            p.index.to_string(),
            axis.name().to_string(),
            p.value.clone(),
        ];
        match &p.outcome {
            Ok(r) => {
                let pk = r.peak.as_ref();
                row.push("ok".into());
                row.push(pk.map(|p| fmt17(p.t)).unwrap_or_default());
                row.push(pk.map(|p| fmt17(p.p_out)).unwrap_or_default());
                row.push(pk.and_then(|p| p.g2).map(fmt17).unwrap_or_default());
                row.push(r.kept_modes.to_string());
                row.push(r.tracked_equations.to_string());
                row.push(r.csv.file_name().unwrap().to_string_lossy().into_owned());
            }
            Err(msg) => {
                let kind = if p.exit_code == 3 {
                    "solver_failure"
                } else {
                    "error"
                };
                row.push(format!("{kind}: {msg}"));
                row.extend(std::iter::repeat(String::new()).take(6));
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(SweepReport { summary, points })
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeReport {
    pub n_emitters: usize,
    pub kept_modes: usize,
    pub tracked_equations: usize,
    /// Share of spin-wave rates above γ₀/N.
    pub radiant_fraction: f64,
    /// Share of exact decay rates above γ₀/N.
    pub radiant_fraction_exact: f64,
    pub asymptotic_fraction: f64,
    pub files: Vec<PathBuf>,
}

/// Writes mode table, positions and couplings for the configured array.
pub fn modes_report(cfg: &ScenarioConfig) -> Result<ModeReport> {
    cfg.validate()?;
    ensure_dir(&cfg.output)?;
    let (array, couplings) = build_system(cfg)?;
    let all = spin_wave_modes(&couplings, &array)?;
    let modes = apply_truncation(&all, cfg.truncation, cfg.spacing)?;
    let stem = cfg.stem();
    let files = vec![
        cfg.output.join(format!("{stem}_modes.csv")),
        cfg.output.join(format!("{stem}_positions.csv")),
        cfg.output.join(format!("{stem}_couplings.csv")),
    ];
    write_file(&files[0], |w| modes.write_csv(w))?;
    write_file(&files[1], |w| array.write_positions_csv(w))?;
    write_file(&files[2], |w| couplings.write_csv(w))?;
    Ok(ModeReport {
        n_emitters: array.len(),
        kept_modes: modes.kept_count(),
        tracked_equations: TrackedLayout::new(&modes)?.len(),
        radiant_fraction: radiant_fraction(&all),
        radiant_fraction_exact: radiant_fraction_exact(&couplings),
        asymptotic_fraction: asymptotic_fraction(cfg.spacing, array.dims()),
        files,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub method: Method,
    pub n_emitters: usize,
    pub kept_modes: usize,
    pub tracked_equations: usize,
    pub repeats: usize,
    pub wall_time_min_s: f64,
    pub wall_time_mean_s: f64,
    pub rhs_evals: usize,
    pub peak: Option<Peak>,
    /// Peak emission relative to the exact solver when N is within its cap.
    pub exact_peak_p_out: Option<f64>,
    pub peak_rel_error: Option<f64>,
    pub threads: usize,
}

/// Times `repeats` runs; compares against the exact solver when feasible.
pub fn bench(cfg: &ScenarioConfig, repeats: usize) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let out = simulate(cfg)?;
        times.push(out.wall_time_s);
        last = Some(out);
    }
    let out = last.unwrap();
    let peak = out.peak();
    let n = out.n_emitters;
    let exact_peak =
        if cfg.method != Method::Exact && n <= cfg.oracle_cap.min(crate::exact::HARD_CAP) {
            let ecfg = ScenarioConfig {
                method: Method::Exact,
                truncation: crate::modes::Truncation::None,
                ..cfg.clone()
            };
            simulate(&ecfg)?.peak().map(|p| p.p_out)
        } else {
            None
        };
    Ok(BenchReport {
        method: cfg.method,
        n_emitters: n,
        kept_modes: out.kept_modes,
        tracked_equations: out.tracked_equations,
        repeats,
        wall_time_min_s: times.iter().cloned().fold(f64::INFINITY, f64::min),
        wall_time_mean_s: times.iter().sum::<f64>() / repeats as f64,
        rhs_evals: out.stats.rhs_evals,
        peak,
        exact_peak_p_out: exact_peak,
        peak_rel_error: exact_peak.zip(peak).map(|(e, p)| (p.p_out - e).abs() / e),
        threads: rayon::current_num_threads(),
    })
}
