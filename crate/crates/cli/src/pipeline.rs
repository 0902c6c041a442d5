//! End-to-end training of a system from an [`ExperimentConfig`], and the
//! files a run directory holds.

use std::fs;
use std::path::{Path, PathBuf};

use purge_core::checkpoint::{CheckpointStore, Role, StorageReport};
use purge_core::costmodel::{CostLedger, Phase};
use purge_core::data::{gen_synthetic, load_csv, Dataset, Point, SyntheticSpec};
use purge_core::model::{evaluate_accuracy, ModelArch, TrainHyper};
use purge_core::seed;
use purge_core::student::{
    max_loss_jump, train_student_network, ConstituentMapping, StudentConfig, StudentMode,
};
use purge_core::teacher::{train_teacher_ensemble, TeacherConfig, TrainBudget};
use purge_core::unlearning::{generate_requests, System, UnlearnRequest};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig, Seeds, Sharing};
use crate::error::{CliError, CliResult};

pub const SYSTEM_FILE: &str = "system.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const ACCURACY_FILE: &str = "accuracy.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Training and held-out data.
pub fn load_datasets(cfg: &ExperimentConfig, seeds: &Seeds) -> CliResult<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            num_classes,
            points_per_class,
            test_points_per_class,
            feature_dim,
            class_center_spread,
            within_class_stddev,
        } => {
            let spec = |per_class, seed, id_offset| SyntheticSpec {
                id_offset,
                ..SyntheticSpec::new(
                    *num_classes,
                    per_class,
                    *feature_dim,
                    *class_center_spread,
                    *within_class_stddev,
                    seed,
                )
            };
            let train = gen_synthetic(&spec(*points_per_class, seeds.data, 0))?;
            let offset = (*num_classes * *points_per_class) as u64;
            let test = gen_synthetic(&spec(*test_points_per_class, seeds.test_data, offset))?;
            Ok((train, test))
        }
        DatasetConfig::Csv {
            train,
            test,
            has_header,
        } => {
            let tr = load_csv(train, *has_header)?;
            let te = match test {
                Some(p) => load_csv(p, *has_header)?,
                None => tr.clone(),
            };
            if te.feature_dim() != tr.feature_dim() {
                return Err(CliError::Data(format!(
                    "test data has {} features, training data {}",
                    te.feature_dim(),
                    tr.feature_dim()
                )));
            }
            Ok((tr, te))
        }
    }
}

/// Teacher and student training sets.
pub fn split_for_sharing(
    data: &Dataset,
    sharing: Sharing,
    seed_value: u64,
) -> CliResult<(Dataset, Dataset)> {
    match sharing {
        Sharing::Shared => Ok((data.clone(), data.clone())),
        Sharing::Disjoint => {
            let mut points: Vec<Point> = data.points().to_vec();
            points.shuffle(&mut seed::rng(seed_value));
            let student = points.split_off(points.len() / 2);
            let make = |p: Vec<Point>| Dataset::new(p, data.num_classes(), data.feature_dim());
            Ok((make(points)?, make(student)?))
        }
    }
}

fn arch(kind: purge_core::model::ArchKind, data: &Dataset) -> ModelArch {
    ModelArch {
        kind,
        feature_dim: data.feature_dim(),
        num_classes: data.num_classes(),
    }
}

pub struct TrainedRun {
    pub system: System,
    pub ledger: CostLedger,
    pub test: Dataset,
    pub seeds: Seeds,
}

/// Trains teachers, then students, saving every checkpoint to `store`.
pub fn train_system(
    cfg: &ExperimentConfig,
    store: &CheckpointStore,
    parallel: bool,
) -> CliResult<TrainedRun> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let (train, test) = load_datasets(cfg, &seeds)?;
    let (teacher_data, student_data) = split_for_sharing(&train, cfg.sharing, seeds.sharing)?;
    let budget = TrainBudget::new(cfg.e_prime)?;
    let mut entries = Vec::new();
    let t = &cfg.teacher;
    let teachers = train_teacher_ensemble(
        &teacher_data,
        TeacherConfig {
            members: t.members,
            slices: t.slices,
            arch: arch(t.arch, &teacher_data),
            hyper: TrainHyper::new(t.learning_rate, t.batch_size, seeds.teacher_train),
            partition_seed: seeds.teacher_partition,
        },
        budget,
        store,
        &mut entries,
    )?;
    let s = &cfg.student;
    let mapping = ConstituentMapping::build(t.members, s.constituents, s.mapping_sizes.as_deref())?;
    let hyper = TrainHyper {
        hard_label_weight: s.hard_label_weight,
        temperature: s.temperature,
        ..TrainHyper::new(s.learning_rate, s.batch_size, seeds.student_train)
    };
    let students = train_student_network(
        &student_data,
        mapping,
        &teachers,
        StudentConfig {
            mode: s.mode,
            arch: arch(s.arch, &student_data),
            hyper,
            slices_per_chunk: s.slices_per_chunk,
            explicit_slices: s.explicit_slices.clone(),
            partition_seed: seeds.student_partition,
            trace: s.trace,
        },
        budget,
        store,
        &mut entries,
        parallel,
    )?;
    let mut ledger = CostLedger::new();
    ledger.extend(entries);
    Ok(TrainedRun {
        system: System {
            teacher_data,
            student_data,
            teachers,
            students,
            student_budget: budget,
            deterministic: cfg.deterministic,
        },
        ledger,
        test,
        seeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub mode: StudentMode,
    pub teachers: usize,
    pub students: usize,
    pub seed: u64,
    pub test_points: usize,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    /// Largest round-to-round loss change per student constituent; empty
    /// when tracing is off.
    pub max_loss_jump: Vec<f64>,
}

pub fn accuracy_report(run: &TrainedRun, master_seed: u64) -> CliResult<AccuracyReport> {
    let sys = &run.system;
    let jumps = if sys.students.config.trace {
        sys.students.traces.iter().map(|t| max_loss_jump(t)).collect()
    } else {
        Vec::new()
    };
    Ok(AccuracyReport {
        mode: sys.students.config.mode,
        teachers: sys.teachers.len(),
        students: sys.students.len(),
        seed: master_seed,
        test_points: run.test.len(),
        teacher_accuracy: evaluate_accuracy(&sys.teachers, &run.test)?,
        student_accuracy: evaluate_accuracy(&sys.students, &run.test)?,
        max_loss_jump: jumps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTotals {
    pub teacher_initial: u64,
    pub student_initial: u64,
    pub relabel_inference: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub teacher_points: usize,
    pub student_points: usize,
    pub teacher_epochs_per_slice: usize,
    pub student_epochs_per_slice: Vec<usize>,
    pub mapping: Vec<Vec<usize>>,
    pub checkpoints: StorageReport,
    pub steps: StepTotals,
}

pub fn manifest(cfg: &ExperimentConfig, run: &TrainedRun, store: &CheckpointStore) -> Manifest {
    let sys = &run.system;
    Manifest {
        config: cfg.clone(),
        seeds: run.seeds,
        teacher_points: sys.teacher_data.len(),
        student_points: sys.student_data.len(),
        teacher_epochs_per_slice: sys.teachers.epochs_per_slice,
        student_epochs_per_slice: sys.students.epochs_per_slice.clone(),
        mapping: sys.students.mapping.groups().to_vec(),
        checkpoints: store.storage_report(),
        steps: StepTotals {
            teacher_initial: run.ledger.total(Phase::InitialTrain, Role::Teacher),
            student_initial: run.ledger.total(Phase::InitialTrain, Role::Student),
            relabel_inference: run.ledger.total(Phase::RelabelInference, Role::Student),
        },
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_ledger(path: &Path, ledger: &CostLedger) -> CliResult<()> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    ledger.write_csv(std::io::BufWriter::new(f))?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> CliResult<CostLedger> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(CostLedger::read_csv(f)?)
}

fn write_traces(path: &Path, sys: &System) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(["constituent", "round", "chunk", "slice", "loss"]).map_err(err)?;
    for (k, trace) in sys.students.traces.iter().enumerate() {
        for t in trace {
            w.write_record([
                k.to_string(),
                t.round.to_string(),
                t.chunk.to_string(),
                t.slice.to_string(),
                format!("{:?}", t.loss),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Persists a freshly trained run into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    run: &TrainedRun,
    store: &CheckpointStore,
    requests: Option<&[UnlearnRequest]>,
) -> CliResult<()> {
    write_json(&dir.join(SYSTEM_FILE), &run.system)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest(cfg, run, store))?;
    write_ledger(&dir.join(LEDGER_FILE), &run.ledger)?;
    write_json(&dir.join(ACCURACY_FILE), &accuracy_report(run, cfg.seed)?)?;
    if run.system.students.config.trace {
        write_traces(&dir.join(TRACE_FILE), &run.system)?;
    }
    if let Some(reqs) = requests {
        let path = dir.join(REQUESTS_FILE);
        let f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        purge_core::unlearning::write_requests(f, reqs)?;
    }
    Ok(())
}

/// Trains per `cfg` into `dir`, with checkpoints under `dir/checkpoints`.
pub fn train_into(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> CliResult<TrainedRun> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    }
    fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    let store = CheckpointStore::open(&ckpt)?;
    let run = train_system(cfg, &store, parallel)?;
    let requests = match &cfg.requests {
        Some(r) => Some(generate_requests(&run.system, r.mix, r.count, run.seeds.requests)?),
        None => None,
    };
    write_run(dir, cfg, &run, &store, requests.as_deref())?;
    Ok(run)
}

/// A run directory opened for unlearning.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub system: System,
    pub ledger: CostLedger,
    pub store: CheckpointStore,
}

pub fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let system: System = read_json(&dir.join(SYSTEM_FILE))?;
    let ledger = read_ledger(&dir.join(LEDGER_FILE))?;
    let store = CheckpointStore::open(dir.join(CHECKPOINT_DIR))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        system,
        ledger,
        store,
    })
}
