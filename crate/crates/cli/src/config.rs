//! Experiment configuration: one JSON document, overridable by dotted path.

use std::path::{Path, PathBuf};

use purge_core::model::ArchKind;
use purge_core::seed;
use purge_core::student::StudentMode;
use purge_core::unlearning::RequestMix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        points_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_points_per_class: usize,
        feature_dim: usize,
        class_center_spread: f64,
        within_class_stddev: f64,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "yes")]
        has_header: bool,
    },
}

fn default_test_per_class() -> usize {
    200
}

fn yes() -> bool {
    true
}

/// Whether teachers and students learn from the same points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Both sides see the full training set; simultaneous requests work.
    Shared,
    /// The training set is split in half by position.
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub members: usize,
    pub slices: usize,
    pub arch: ArchKind,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub constituents: usize,
    pub mode: StudentMode,
    pub slices_per_chunk: usize,
    #[serde(default)]
    pub explicit_slices: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub mapping_sizes: Option<Vec<usize>>,
    pub arch: ArchKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub hard_label_weight: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "yes")]
    pub trace: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSection {
    pub count: usize,
    pub mix: RequestMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed derives from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub sharing: Sharing,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub e_prime: u64,
    #[serde(default)]
    pub requests: Option<RequestSection>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "yes")]
    pub deterministic: bool,
}

/// Seeds for each stochastic stage, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub test_data: u64,
    pub sharing: u64,
    pub teacher_partition: u64,
    pub teacher_train: u64,
    pub student_partition: u64,
    pub student_train: u64,
    pub requests: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let s = |i: u64| seed::derive(master, &[i]);
        Seeds {
            data: s(1),
            test_data: s(2),
            sharing: s(3),
            teacher_partition: s(4),
            teacher_train: s(5),
            student_partition: s(6),
            student_train: s(7),
            requests: s(8),
        }
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    /// Rejects inconsistent settings, naming the offending field.
    pub fn validate(&self) -> CliResult<()> {
        let t = &self.teacher;
        let s = &self.student;
        let positive = [
            ("teacher.members", t.members),
            ("teacher.slices", t.slices),
            ("teacher.batch_size", t.batch_size),
            ("student.constituents", s.constituents),
            ("student.slices_per_chunk", s.slices_per_chunk),
            ("student.batch_size", s.batch_size),
            ("e_prime", self.e_prime as usize),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(CliError::config(path, "must be positive"));
            }
        }
        for (path, v) in [
            ("teacher.learning_rate", t.learning_rate),
            ("student.learning_rate", s.learning_rate),
            ("student.temperature", s.temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::config(path, "must be a positive number"));
            }
        }
        if !(0.0..=1.0).contains(&s.hard_label_weight) {
            return Err(CliError::config("student.hard_label_weight", "must lie in [0, 1]"));
        }
        match &s.mapping_sizes {
            Some(sizes) => {
                if sizes.len() != s.constituents {
                    return Err(CliError::config(
                        "student.mapping_sizes",
                        format!("has {} entries for {} constituents", sizes.len(), s.constituents),
                    ));
                }
                if sizes.iter().sum::<usize>() != t.members {
                    return Err(CliError::config(
                        "student.mapping_sizes",
                        format!("must sum to teacher.members = {}", t.members),
                    ));
                }
            }
            None if s.constituents > t.members => {
                return Err(CliError::config(
                    "student.constituents",
                    format!("exceeds teacher.members = {} without mapping_sizes", t.members),
                ));
            }
            None => {}
        }
        if let Some(r) = &self.requests {
            let m = r.mix;
            let w = [m.student, m.teacher, m.aligned, m.misaligned];
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(CliError::config("requests.mix", "weights must be non-negative with a positive sum"));
            }
            if self.sharing == Sharing::Disjoint && (m.aligned > 0.0 || m.misaligned > 0.0) {
                return Err(CliError::config(
                    "requests.mix",
                    "simultaneous requests need sharing = \"shared\"",
                ));
            }
        }
        if let DatasetConfig::Synthetic {
            num_classes,
            points_per_class,
            feature_dim,
            ..
        } = &self.dataset
        {
            if *num_classes < 2 || *points_per_class == 0 || *feature_dim == 0 {
                return Err(CliError::config("dataset", "synthetic counts must be positive with at least two classes"));
            }
        }
        Ok(())
    }
}

/// Loads a config file, applies `key=value` overrides and validates.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(path.display().to_string(), e))?;
    config_from_value(value, overrides)
}

pub fn config_from_value(mut value: Value, overrides: &[String]) -> CliResult<ExperimentConfig> {
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_path(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn serde_path<T: serde::de::DeserializeOwned>(value: Value) -> CliResult<T> {
    serde_json::from_value(value).map_err(|e| CliError::config("config", e))
}

/// Sets `a.b.c` in `root` to `raw`, parsed as JSON when possible and as a
/// string otherwise. Intermediate objects are created as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like key.path=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::config(path, "empty path segment"));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::config(keys[..i].join("."), "is not an object"))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields a segment")
}

/// Small shared-data system used by `purge train` without a config file.
pub fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        dataset: DatasetConfig::Synthetic {
            num_classes: 3,
            points_per_class: 1000,
            test_points_per_class: 200,
            feature_dim: 2,
            class_center_spread: 2.0,
            within_class_stddev: 1.0,
        },
        sharing: Sharing::Shared,
        teacher: TeacherSection {
            members: 8,
            slices: 2,
            arch: ArchKind::SoftmaxLinear,
            learning_rate: 0.1,
            batch_size: 16,
        },
        student: StudentSection {
            constituents: 4,
            mode: StudentMode::Purge,
            slices_per_chunk: 2,
            explicit_slices: None,
            mapping_sizes: None,
            arch: ArchKind::SoftmaxLinear,
            learning_rate: 0.1,
            batch_size: 16,
            hard_label_weight: 0.0,
            temperature: 1.0,
            trace: true,
        },
        e_prime: 20,
        requests: Some(RequestSection {
            count: 50,
            mix: RequestMix::uniform(),
        }),
        output: None,
        deterministic: true,
    }
}

/// Parameter grid for `purge simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimGrid {
    pub teachers: Vec<usize>,
    pub students: Vec<usize>,
    pub slices_per_chunk: Vec<usize>,
    pub e_prime: u64,
    /// Student dataset size.
    pub points: usize,
    pub requests: usize,
    #[serde(default = "purge_mode")]
    pub mode: StudentMode,
    pub seed: u64,
}

fn purge_mode() -> StudentMode {
    StudentMode::Purge
}

impl Default for SimGrid {
    fn default() -> Self {
        SimGrid {
            teachers: vec![32],
            students: vec![1, 2, 4, 8, 16, 32],
            slices_per_chunk: vec![1, 4],
            e_prime: 120,
            points: 3200,
            requests: 100,
            mode: StudentMode::Purge,
            seed: 1,
        }
    }
}

pub fn load_grid(path: Option<&Path>, overrides: &[String]) -> CliResult<SimGrid> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(p.display().to_string(), e))?
        }
        None => serde_json::to_value(SimGrid::default()).expect("grid serializes"),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let grid: SimGrid = serde_path(value)?;
    for (path, v) in [("e_prime", grid.e_prime as usize), ("points", grid.points), ("requests", grid.requests)] {
        if v == 0 {
            return Err(CliError::config(path, "must be positive"));
        }
    }
    for (path, list) in [
        ("teachers", &grid.teachers),
        ("students", &grid.students),
        ("slices_per_chunk", &grid.slices_per_chunk),
    ] {
        if list.is_empty() || list.contains(&0) {
            return Err(CliError::config(path, "must be a non-empty list of positive integers"));
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_json() {
        let cfg = default_config();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(config_from_value(v, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_by_dotted_path() {
        let v = serde_json::to_value(default_config()).unwrap();
        let cfg = config_from_value(
            v,
            &[
                "student.mode=naive_sisa".into(),
                "teacher.members=12".into(),
                "student.arch={\"kind\":\"one_hidden_layer\",\"hidden_units\":5}".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.student.mode, StudentMode::NaiveSisa);
        assert_eq!(cfg.teacher.members, 12);
        assert_eq!(cfg.student.arch, ArchKind::OneHiddenLayer { hidden_units: 5 });
    }

    #[test]
    fn errors_name_the_field() {
        let v = serde_json::to_value(default_config()).unwrap();
        let err = config_from_value(v.clone(), &["student.constituents=9".into()]).unwrap_err();
        assert!(err.to_string().contains("student.constituents"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = config_from_value(v.clone(), &["teacher.learning_rate=0".into()]).unwrap_err();
        assert!(err.to_string().contains("teacher.learning_rate"));
        let err = config_from_value(v.clone(), &["sharing=disjoint".into()]).unwrap_err();
        assert!(err.to_string().contains("requests.mix"));
        let err = config_from_value(v, &["teacher.members.x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("teacher.members"));
    }

    #[test]
    fn seeds_differ_per_stage() {
        let s = Seeds::from_master(3);
        let all = [s.data, s.test_data, s.sharing, s.teacher_partition, s.teacher_train, s.student_partition, s.student_train, s.requests];
        let set: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(s, Seeds::from_master(3));
    }
}
