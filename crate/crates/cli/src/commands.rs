//! The four subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use purge_core::simulate::{simulate_teacher_requests, SimConfig, SimOutcome};
use purge_core::unlearning::{load_requests, unlearn, verify_exactness, UnlearnReport, Verdict};
use serde::Serialize;

use crate::config::{default_config, load_config, load_grid, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    self, write_json, write_ledger, AccuracyReport, ACCURACY_FILE, LEDGER_FILE, REQUESTS_FILE,
    SYSTEM_FILE,
};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const VERDICTS_FILE: &str = "verification.jsonl";
pub const SIMULATE_FILE: &str = "simulate.csv";
pub const CUMULATIVE_FILE: &str = "cumulative.csv";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const ACCURACY_TABLE: &str = "accuracy_vs_n.csv";
pub const SPEEDUP_TABLE: &str = "speedup_vs_n.csv";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn resolve_config(
    config: Option<&Path>,
    seed: Option<u64>,
    sets: &[String],
) -> CliResult<ExperimentConfig> {
    let mut sets = sets.to_vec();
    if let Some(s) = seed {
        sets.push(format!("seed={s}"));
    }
    match config {
        Some(p) => load_config(p, &sets),
        None => crate::config::config_from_value(
            serde_json::to_value(default_config()).expect("default config serializes"),
            &sets,
        ),
    }
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub sets: &'a [String],
    pub parallel: bool,
}

/// Returns the run directory.
pub fn train(args: TrainArgs<'_>) -> CliResult<PathBuf> {
    let cfg = resolve_config(args.config, args.seed, args.sets)?;
    let dir = args
        .out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::config("output", "give --out or set output in the config"))?;
    create_dir(&dir)?;
    pipeline::train_into(&cfg, &dir, args.parallel)?;
    Ok(dir)
}

pub struct UnlearnArgs<'a> {
    pub system: &'a Path,
    pub requests: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub verify: bool,
    /// Delete superseded checkpoint generations afterwards.
    pub prune: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictLine<'a> {
    pub request_id: u64,
    #[serde(flatten)]
    pub verdict: &'a Verdict,
}

/// Applies a request stream to a run directory in place. Reports go to
/// `out` (the run directory by default).
pub fn unlearn_cmd(args: UnlearnArgs<'_>) -> CliResult<Vec<UnlearnReport>> {
    let mut run = pipeline::load_run(args.system)?;
    let req_path = args
        .requests
        .map(Path::to_path_buf)
        .unwrap_or_else(|| args.system.join(REQUESTS_FILE));
    let requests = load_requests(&req_path).map_err(|e| CliError::Data(format!("{}: {e}", req_path.display())))?;
    let out = args.out.unwrap_or(args.system);
    create_dir(out)?;
    let open = |name: &str| -> CliResult<(PathBuf, fs::File)> {
        let p = out.join(name);
        let f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
        Ok((p, f))
    };
    let (rpath, mut rfile) = open(REPORTS_FILE)?;
    let mut vfile = if args.verify { Some(open(VERDICTS_FILE)?) } else { None };

    let mut reports = Vec::with_capacity(requests.len());
    let mut failure = None;
    for (line, req) in &requests {
        let before = args.verify.then(|| run.system.clone());
        let report = unlearn(&mut run.system, req, &run.store, &mut run.ledger).map_err(|e| {
            CliError::Data(format!("{} line {line}: {e}", req_path.display()))
        })?;
        writeln!(rfile, "{}", serde_json::to_string(&report).expect("report serializes"))
            .map_err(|e| CliError::io(&rpath, e))?;
        if let (Some(before), Some((vpath, vf))) = (before, vfile.as_mut()) {
            let verdict = verify_exactness(&before, req, &run.system)?;
            let line_json = serde_json::to_string(&VerdictLine {
                request_id: req.request_id,
                verdict: &verdict,
            })
            .expect("verdict serializes");
            writeln!(vf, "{line_json}").map_err(|e| CliError::io(vpath.as_path(), e))?;
            if !verdict.pass && failure.is_none() {
                failure = Some(format!(
                    "request {} (line {line}): {}",
                    req.request_id,
                    verdict.problems.join("; ")
                ));
            }
        }
        reports.push(report);
    }
    pipeline::write_json(&run.dir.join(SYSTEM_FILE), &run.system)?;
    write_ledger(&run.dir.join(LEDGER_FILE), &run.ledger)?;
    if args.prune {
        run.store.prune()?;
    }
    match failure {
        Some(f) => Err(CliError::Verification(f)),
        None => Ok(reports),
    }
}

pub struct SimulateArgs<'a> {
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub sets: &'a [String],
}

/// One row of the simulation table.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SimRow {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Empty when `M/N` is not an integer.
    pub c: Option<u64>,
    pub r: usize,
    pub e_prime: u64,
    pub requests: usize,
    pub mean_steps: f64,
    pub predicted: Option<f64>,
    pub measured_ratio: f64,
    pub deviation: Option<f64>,
}

pub fn simulate_cmd(args: SimulateArgs<'_>) -> CliResult<Vec<(SimRow, SimOutcome)>> {
    let mut sets = args.sets.to_vec();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    let grid = load_grid(args.config, &sets)?;
    let mut rows = Vec::new();
    for &m in &grid.teachers {
        for &r in &grid.slices_per_chunk {
            for &n in &grid.students {
                if n > m {
                    continue;
                }
                let out = simulate_teacher_requests(&SimConfig {
                    teachers: m,
                    students: n,
                    slices_per_chunk: r,
                    e_prime: grid.e_prime,
                    points: grid.points,
                    requests: grid.requests,
                    mode: grid.mode,
                    seed: grid.seed,
                })?;
                let rep = &out.report;
                rows.push((
                    SimRow {
                        m,
                        n,
                        c: rep.params.chunks(),
                        r,
                        e_prime: grid.e_prime,
                        requests: rep.requests,
                        mean_steps: rep.measured_mean_steps,
                        predicted: rep.predicted_ratio_vs_n,
                        measured_ratio: rep.measured_ratio,
                        deviation: rep.relative_deviation,
                    },
                    out,
                ));
            }
        }
    }
    create_dir(args.out)?;
    let path = args.out.join(SIMULATE_FILE);
    let err = |p: &Path, e: csv::Error| CliError::Data(format!("{}: {e}", p.display()));
    let mut w = csv::Writer::from_path(&path).map_err(|e| err(&path, e))?;
    for (row, _) in &rows {
        w.serialize(row).map_err(|e| err(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let cpath = args.out.join(CUMULATIVE_FILE);
    let mut w = csv::Writer::from_path(&cpath).map_err(|e| err(&cpath, e))?;
    w.write_record(["M", "N", "r", "request", "steps", "cumulative_steps"])
        .map_err(|e| err(&cpath, e))?;
    for (row, out) in &rows {
        for (i, (s, c)) in out.per_request_steps.iter().zip(out.cumulative_steps()).enumerate() {
            w.write_record([
                row.m.to_string(),
                row.n.to_string(),
                row.r.to_string(),
                i.to_string(),
                s.to_string(),
                c.to_string(),
            ])
            .map_err(|e| err(&cpath, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&cpath, e))?;
    let reports: Vec<_> = rows.iter().map(|(_, o)| &o.report).collect();
    write_json(&args.out.join(COMPARISON_FILE), &reports)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub mode: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub runs: usize,
    pub mean_student_accuracy: f64,
    pub std_student_accuracy: f64,
    pub mean_teacher_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub r: usize,
    pub rows: usize,
    pub mean_measured_ratio: f64,
    pub predicted: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn accuracy_table(reports: &[AccuracyReport]) -> Vec<AccuracyRow> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<&AccuracyReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.mode.as_str().to_string(), r.teachers, r.students))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((mode, m, n), rs)| {
            let s: Vec<f64> = rs.iter().map(|r| r.student_accuracy).collect();
            let t: Vec<f64> = rs.iter().map(|r| r.teacher_accuracy).collect();
            AccuracyRow {
                mode,
                m,
                n,
                runs: rs.len(),
                mean_student_accuracy: mean(&s),
                std_student_accuracy: std_dev(&s),
                mean_teacher_accuracy: mean(&t),
            }
        })
        .collect()
}

pub fn speedup_table(rows: &[SimRow]) -> Vec<SpeedupRow> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&SimRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.m, r.n, r.r)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((m, n, r), rs)| {
            let measured: Vec<f64> = rs.iter().map(|x| x.measured_ratio).collect();
            SpeedupRow {
                m,
                n,
                r,
                rows: rs.len(),
                mean_measured_ratio: mean(&measured),
                predicted: rs[0].predicted,
            }
        })
        .collect()
}

fn read_sim_rows(path: &Path) -> CliResult<Vec<SimRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub struct AnalyzeArgs<'a> {
    /// Run directories, `accuracy.json` files or `simulate.csv` files.
    pub inputs: &'a [PathBuf],
    pub out: &'a Path,
}

pub fn analyze_cmd(args: AnalyzeArgs<'_>) -> CliResult<(Vec<AccuracyRow>, Vec<SpeedupRow>)> {
    let mut accuracy = Vec::new();
    let mut sims = Vec::new();
    for input in args.inputs {
        let mut matched = false;
        let candidates = if input.is_dir() {
            vec![input.join(ACCURACY_FILE), input.join(SIMULATE_FILE)]
        } else {
            vec![input.clone()]
        };
        for p in candidates {
            if !p.is_file() {
                continue;
            }
            match p.file_name().and_then(|n| n.to_str()) {
                Some(n) if n.ends_with(".json") => {
                    accuracy.push(pipeline::read_json::<AccuracyReport>(&p)?);
                    matched = true;
                }
                Some(n) if n.ends_with(".csv") => {
                    sims.extend(read_sim_rows(&p)?);
                    matched = true;
                }
                _ => {}
            }
        }
        if !matched {
            return Err(CliError::Data(format!(
                "{}: neither a run directory nor an accuracy or simulation file",
                input.display()
            )));
        }
    }
    let acc = accuracy_table(&accuracy);
    let speed = speedup_table(&sims);
    create_dir(args.out)?;
    write_table(
        &args.out.join(ACCURACY_TABLE),
        &["mode", "M", "N", "runs", "mean_student_accuracy", "std_student_accuracy", "mean_teacher_accuracy"],
        &acc,
    )?;
    write_table(
        &args.out.join(SPEEDUP_TABLE),
        &["M", "N", "r", "rows", "mean_measured_ratio", "predicted"],
        &speed,
    )?;
    Ok((acc, speed))
}
