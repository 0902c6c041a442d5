//! Student network: constituent mapping plus incremental multi-teacher
//! distillation over chunks and slices.
//!
//! Student `k` owns shard `k` and the teacher group `mapping[k]`. Its shard
//! is split into one chunk per mapped teacher; chunk `l` is labelled by the
//! teachers whose provenance the mode selects (see [`StudentMode`]) and
//! split into slices. Training visits rounds `(l, j)` in order; each round
//! starts from the previous round's state, trains on every earlier chunk
//! plus slices `0..=j` of chunk `l`, and is checkpointed under
//! `student/k/l/j`.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointStore, Role, Slot};
use crate::costmodel::{LedgerEntry, Phase};
use crate::data::{even_split, Dataset, Layout, Location, PartitionPlan, PointId};
use crate::model::{
    aggregate, init_model, mean_loss, predict, subensemble_soft_labels, train, Classifier,
    Example, ModelArch, ModelState, SoftLabelChunk, TrainHyper,
};
use crate::seed::{self, tag};
use crate::teacher::{RevertPoint, TeacherEnsemble, TrainBudget};
use crate::{Error, Result};

/// Which teachers label chunk `(k, l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentMode {
    /// The first `l + 1` teachers of `mapping[k]`.
    Purge,
    /// Every teacher; any teacher update invalidates every chunk.
    NaiveSisa,
    /// Teacher `mapping[k][l]` alone.
    SingleTeacher,
}

impl StudentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentMode::Purge => "purge",
            StudentMode::NaiveSisa => "naive_sisa",
            StudentMode::SingleTeacher => "single_teacher",
        }
    }
}

impl std::str::FromStr for StudentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "purge" => Ok(StudentMode::Purge),
            "naive_sisa" => Ok(StudentMode::NaiveSisa),
            "single_teacher" => Ok(StudentMode::SingleTeacher),
            other => Err(Error::InvalidArgument(format!("unknown student mode {other:?}"))),
        }
    }
}

/// Partition of teacher indices `0..M` into `N` ordered groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstituentMapping {
    groups: Vec<Vec<usize>>,
}

impl ConstituentMapping {
    /// Assigns teachers in index order. Without `sizes`, group sizes differ
    /// by at most one with larger groups first.
    pub fn build(teachers: usize, students: usize, sizes: Option<&[usize]>) -> Result<Self> {
        if students == 0 {
            return Err(Error::Mapping("need at least one student constituent".into()));
        }
        let sizes: Vec<usize> = match sizes {
            Some(s) => {
                if s.len() != students {
                    return Err(Error::Mapping(format!(
                        "{} group sizes given for {students} students",
                        s.len()
                    )));
                }
                if s.iter().sum::<usize>() != teachers {
                    return Err(Error::Mapping(format!(
                        "group sizes sum to {}, expected {teachers}",
                        s.iter().sum::<usize>()
                    )));
                }
                if s.contains(&0) {
                    return Err(Error::Mapping("every student needs at least one teacher".into()));
                }
                s.to_vec()
            }
            None => {
                if students > teachers {
                    return Err(Error::Mapping(format!(
                        "{students} students cannot each get a teacher from {teachers}"
                    )));
                }
                even_split(teachers, students).iter().map(|r| r.len()).collect()
            }
        };
        let mut next = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g: Vec<usize> = (next..next + s).collect();
                next += s;
                g
            })
            .collect();
        Ok(ConstituentMapping { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn students(&self) -> usize {
        self.groups.len()
    }

    pub fn teachers(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// `c_k`.
    pub fn chunks(&self, student: usize) -> usize {
        self.groups[student].len()
    }

    /// `(student, position)` of a teacher.
    pub fn owner(&self, teacher: usize) -> Option<(usize, usize)> {
        self.groups.iter().enumerate().find_map(|(k, g)| {
            g.iter().position(|&t| t == teacher).map(|pos| (k, pos))
        })
    }

    /// Teachers whose outputs label chunk `(student, chunk)` under `mode`.
    pub fn provenance(&self, mode: StudentMode, student: usize, chunk: usize) -> Vec<usize> {
        match mode {
            StudentMode::Purge => self.groups[student][..=chunk].to_vec(),
            StudentMode::NaiveSisa => (0..self.teachers()).collect(),
            StudentMode::SingleTeacher => vec![self.groups[student][chunk]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub mode: StudentMode,
    pub arch: ModelArch,
    pub hyper: TrainHyper,
    /// Slices per chunk, used when `explicit_slices` is absent.
    pub slices_per_chunk: usize,
    /// `R_{k,l}` given per shard and chunk.
    #[serde(default)]
    pub explicit_slices: Option<Vec<Vec<usize>>>,
    pub partition_seed: u64,
    /// Record a per-round loss trace.
    #[serde(default)]
    pub trace: bool,
}

impl StudentConfig {
    pub fn layout(&self, mapping: &ConstituentMapping) -> Layout {
        let chunks: Vec<usize> = (0..mapping.students()).map(|k| mapping.chunks(k)).collect();
        match &self.explicit_slices {
            Some(s) => Layout {
                chunks_per_shard: chunks,
                slices_per_chunk: s.clone(),
            },
            None => Layout::with_chunks(&chunks, self.slices_per_chunk),
        }
    }
}

/// Mean loss over one round's cumulative data, taken at the round's end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub round: usize,
    pub chunk: usize,
    pub slice: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentNetwork {
    pub config: StudentConfig,
    pub mapping: ConstituentMapping,
    pub plan: PartitionPlan,
    /// `e_R` per constituent.
    pub epochs_per_slice: Vec<usize>,
    pub constituents: Vec<ModelState>,
    /// Cached soft labels per `(k, l)`.
    pub labels: Vec<Vec<SoftLabelChunk>>,
    /// Teachers that produced each cached chunk.
    pub provenance: Vec<Vec<Vec<usize>>>,
    /// Loss traces per constituent; empty unless tracing is on.
    pub traces: Vec<Vec<TracePoint>>,
}

/// Round `(chunk, slice)` positions of a shard, in training order.
pub fn rounds(plan: &PartitionPlan, shard: usize) -> Vec<(usize, usize)> {
    (0..plan.num_chunks(shard))
        .flat_map(|l| (0..plan.num_slices(shard, l)).map(move |j| (l, j)))
        .collect()
}

/// Size of the cumulative training set at each round of a shard.
pub fn cumulative_sizes(plan: &PartitionPlan, shard: usize) -> Vec<usize> {
    let mut acc = 0;
    rounds(plan, shard)
        .into_iter()
        .map(|(l, j)| {
            acc += plan.slice(shard, l, j).len();
            acc
        })
        .collect()
}

/// Data-point steps to replay rounds `from..` of a shard at `epochs` per round.
pub fn replay_steps(plan: &PartitionPlan, shard: usize, from: usize, epochs: usize) -> u64 {
    cumulative_sizes(plan, shard)
        .into_iter()
        .skip(from)
        .map(|n| (n * epochs) as u64)
        .sum()
}

pub fn constituent_init(config: &StudentConfig, k: usize) -> Result<ModelState> {
    init_model(
        config.arch,
        seed::derive(config.hyper.seed, &[tag::STUDENT_INIT, k as u64]),
    )
}

fn round_id(k: usize, l: usize, j: usize) -> u64 {
    seed::derive(tag::STUDENT_ROUND, &[k as u64, l as u64, j as u64])
}

/// Soft labels for the current points of chunk `(k, l)` from `teachers`.
/// Returns the chunk and the number of teacher forward passes.
pub fn generate_chunk_labels(
    dataset: &Dataset,
    plan: &PartitionPlan,
    k: usize,
    l: usize,
    teachers: &TeacherEnsemble,
    provenance: &[usize],
    temperature: f64,
) -> Result<(SoftLabelChunk, u64)> {
    let models: Vec<&ModelState> = provenance
        .iter()
        .map(|&t| {
            teachers
                .members
                .get(t)
                .ok_or_else(|| Error::Mapping(format!("teacher {t} does not exist")))
        })
        .collect::<Result<_>>()?;
    let points = plan
        .chunk_ids(k, l)
        .map(|id| dataset.point(id).map(|p| (id, p.features.as_slice())))
        .collect::<Result<Vec<_>>>()?;
    let inferences = (points.len() * models.len()) as u64;
    let chunk = subensemble_soft_labels(&models, points, temperature)?;
    Ok((chunk, inferences))
}

/// Output of replaying rounds of one constituent.
#[derive(Debug, Clone)]
pub struct ConstituentRun {
    pub state: ModelState,
    /// `((chunk, slice), state)` after each replayed round.
    pub checkpoints: Vec<((usize, usize), ModelState)>,
    pub steps: u64,
    pub trace: Vec<TracePoint>,
}

/// Replays rounds `from..` of constituent `k` starting at `start`, using
/// the cached `labels` of that constituent.
#[allow(clippy::too_many_arguments)]
pub fn replay_constituent(
    dataset: &Dataset,
    plan: &PartitionPlan,
    config: &StudentConfig,
    k: usize,
    labels: &[SoftLabelChunk],
    epochs: usize,
    from: usize,
    start: ModelState,
) -> Result<ConstituentRun> {
    let order = rounds(plan, k);
    let lookup: Vec<HashMap<PointId, &[f64]>> = labels
        .iter()
        .map(|c| c.entries.iter().map(|(id, v)| (*id, v.as_slice())).collect())
        .collect();
    let mut cumulative: Vec<Example<'_>> = Vec::new();
    let mut state = start;
    let mut checkpoints = Vec::with_capacity(order.len().saturating_sub(from));
    let mut trace = Vec::new();
    let mut steps = 0;
    for (round, &(l, j)) in order.iter().enumerate() {
        for &id in plan.slice(k, l, j) {
            let p = dataset.point(id)?;
            let soft_label = lookup
                .get(l)
                .and_then(|m| m.get(&id))
                .copied()
                .ok_or_else(|| Error::NotFound(format!("no soft label for point {id} in chunk ({k},{l})")))?;
            cumulative.push(Example {
                features: &p.features,
                soft_label,
                hard_label: p.label,
            });
        }
        if round < from {
            continue;
        }
        if !cumulative.is_empty() {
            state = train(&state, &cumulative, epochs, &config.hyper, round_id(k, l, j))?;
            steps += (epochs * cumulative.len()) as u64;
            if config.trace {
                trace.push(TracePoint {
                    round,
                    chunk: l,
                    slice: j,
                    loss: mean_loss(&state, &cumulative, config.hyper.hard_label_weight)?,
                });
            }
        }
        checkpoints.push(((l, j), state.clone()));
    }
    Ok(ConstituentRun {
        state,
        checkpoints,
        steps,
        trace,
    })
}

/// Union of teacher indices seen by a state checkpointed in chunk `l`.
fn seen_teachers(provenance: &[Vec<usize>], l: usize) -> Vec<u32> {
    provenance[..=l]
        .iter()
        .flatten()
        .map(|&t| t as u32)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn save_run(
    store: &CheckpointStore,
    k: usize,
    provenance: &[Vec<usize>],
    run: &ConstituentRun,
) -> Result<()> {
    for ((l, j), s) in &run.checkpoints {
        store.save(Slot::student(k, *l, *j), s, &seen_teachers(provenance, *l))?;
    }
    Ok(())
}

/// Everything produced by training one constituent from scratch.
#[derive(Debug, Clone)]
pub struct ConstituentOutput {
    pub run: ConstituentRun,
    pub labels: Vec<SoftLabelChunk>,
    pub provenance: Vec<Vec<usize>>,
    pub inferences: u64,
}

fn check_consistency(
    plan: &PartitionPlan,
    mapping: &ConstituentMapping,
    teachers: &TeacherEnsemble,
) -> Result<()> {
    if mapping.teachers() != teachers.len() {
        return Err(Error::Mapping(format!(
            "mapping covers {} teachers, ensemble has {}",
            mapping.teachers(),
            teachers.len()
        )));
    }
    if plan.num_shards() != mapping.students() {
        return Err(Error::Mapping(format!(
            "plan has {} shards, mapping has {} students",
            plan.num_shards(),
            mapping.students()
        )));
    }
    for k in 0..mapping.students() {
        if plan.num_chunks(k) != mapping.chunks(k) {
            return Err(Error::Mapping(format!(
                "shard {k} has {} chunks but {} mapped teachers",
                plan.num_chunks(k),
                mapping.chunks(k)
            )));
        }
    }
    Ok(())
}

/// Trains constituent `k` from its initial state over every round.
/// Saves checkpoints when a store is given.
#[allow(clippy::too_many_arguments)]
pub fn train_student_constituent(
    k: usize,
    dataset: &Dataset,
    plan: &PartitionPlan,
    mapping: &ConstituentMapping,
    teachers: &TeacherEnsemble,
    config: &StudentConfig,
    budget: TrainBudget,
    store: Option<&CheckpointStore>,
) -> Result<ConstituentOutput> {
    check_consistency(plan, mapping, teachers)?;
    let mut labels = Vec::with_capacity(plan.num_chunks(k));
    let mut provenance = Vec::with_capacity(plan.num_chunks(k));
    let mut inferences = 0;
    for l in 0..plan.num_chunks(k) {
        let prov = mapping.provenance(config.mode, k, l);
        let (chunk, n) = generate_chunk_labels(
            dataset,
            plan,
            k,
            l,
            teachers,
            &prov,
            config.hyper.temperature,
        )?;
        labels.push(chunk);
        provenance.push(prov);
        inferences += n;
    }
    let epochs = budget.epochs_per_slice(plan.total_slices(k))?;
    let run = replay_constituent(
        dataset,
        plan,
        config,
        k,
        &labels,
        epochs,
        0,
        constituent_init(config, k)?,
    )?;
    if let Some(store) = store {
        save_run(store, k, &provenance, &run)?;
    }
    Ok(ConstituentOutput {
        run,
        labels,
        provenance,
        inferences,
    })
}

/// Trains every constituent. With `parallel`, constituents train on the
/// rayon pool; the result is identical either way.
pub fn train_student_network(
    dataset: &Dataset,
    mapping: ConstituentMapping,
    teachers: &TeacherEnsemble,
    config: StudentConfig,
    budget: TrainBudget,
    store: &CheckpointStore,
    ledger: &mut Vec<LedgerEntry>,
    parallel: bool,
) -> Result<StudentNetwork> {
    config.hyper.validate()?;
    crate::teacher::check_arch(&config.arch, dataset)?;
    let plan = PartitionPlan::from_ids(
        dataset.ids().collect(),
        &config.layout(&mapping),
        config.partition_seed,
    )?;
    check_consistency(&plan, &mapping, teachers)?;
    let work = |k: usize| {
        train_student_constituent(k, dataset, &plan, &mapping, teachers, &config, budget, Some(store))
    };
    let outputs: Vec<ConstituentOutput> = if parallel {
        (0..mapping.students()).into_par_iter().map(work).collect::<Result<_>>()?
    } else {
        (0..mapping.students()).map(work).collect::<Result<_>>()?
    };
    let mut net = StudentNetwork {
        epochs_per_slice: (0..mapping.students())
            .map(|k| budget.epochs_per_slice(plan.total_slices(k)))
            .collect::<Result<_>>()?,
        config,
        mapping,
        plan,
        constituents: Vec::with_capacity(outputs.len()),
        labels: Vec::with_capacity(outputs.len()),
        provenance: Vec::with_capacity(outputs.len()),
        traces: Vec::with_capacity(outputs.len()),
    };
    for (k, out) in outputs.into_iter().enumerate() {
        ledger.push(LedgerEntry {
            request: None,
            phase: Phase::RelabelInference,
            role: Role::Student,
            constituent: k,
            steps: out.inferences,
        });
        ledger.push(LedgerEntry {
            request: None,
            phase: Phase::InitialTrain,
            role: Role::Student,
            constituent: k,
            steps: out.run.steps,
        });
        net.constituents.push(out.run.state);
        net.labels.push(out.labels);
        net.provenance.push(out.provenance);
        net.traces.push(out.run.trace);
    }
    Ok(net)
}

impl StudentNetwork {
    pub fn len(&self) -> usize {
        self.constituents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constituents.is_empty()
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        if self.constituents.is_empty() {
            return Err(Error::InvalidArgument("student network has no constituents".into()));
        }
        let preds = self
            .constituents
            .iter()
            .map(|m| predict(m, features))
            .collect::<Result<Vec<_>>>()?;
        aggregate(&preds)
    }

    pub fn loss_trace(&self, k: usize) -> Result<&[TracePoint]> {
        if !self.config.trace {
            return Err(Error::InvalidArgument("loss tracing was disabled".into()));
        }
        self.traces
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::NotFound(format!("student constituent {k}")))
    }

    /// Chunks of constituent `k` whose cached labels came from `teacher`.
    pub fn chunks_using_teacher(&self, k: usize, teacher: usize) -> Vec<usize> {
        self.provenance[k]
            .iter()
            .enumerate()
            .filter(|(_, p)| p.contains(&teacher))
            .map(|(l, _)| l)
            .collect()
    }

    /// Constituents with at least one chunk labelled by `teacher`.
    pub fn constituents_using_teacher(&self, teacher: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| !self.chunks_using_teacher(k, teacher).is_empty())
            .collect()
    }

    pub fn locate(&self, id: PointId) -> Result<Location> {
        self.plan
            .locate(id)
            .map_err(|_| Error::NotFound(format!("point {id} is not in the student dataset")))
    }

    /// Removes a point from its slice and drops its cached soft label.
    pub fn remove_point(&mut self, id: PointId) -> Result<Location> {
        let loc = self
            .plan
            .remove_point(id)
            .map_err(|_| Error::NotFound(format!("point {id} is not in the student dataset")))?;
        self.labels[loc.shard][loc.chunk].remove(id);
        Ok(loc)
    }

    /// Regenerates the cached labels of the given chunks of constituent `k`
    /// from the current teachers. Returns teacher forward passes.
    pub fn relabel(
        &mut self,
        dataset: &Dataset,
        k: usize,
        chunks: &[usize],
        teachers: &TeacherEnsemble,
    ) -> Result<u64> {
        let mut inferences = 0;
        for &l in chunks {
            let prov = self.mapping.provenance(self.config.mode, k, l);
            let (chunk, n) = generate_chunk_labels(
                dataset,
                &self.plan,
                k,
                l,
                teachers,
                &prov,
                self.config.hyper.temperature,
            )?;
            self.labels[k][l] = chunk;
            self.provenance[k][l] = prov;
            inferences += n;
        }
        Ok(inferences)
    }

    /// Ordinal of round `(chunk, slice)` for constituent `k`.
    pub fn round_index(&self, k: usize, chunk: usize, slice: usize) -> usize {
        rounds(&self.plan, k)
            .iter()
            .position(|&r| r == (chunk, slice))
            .expect("round exists in plan")
    }

    /// Reverts constituent `k` to the state before round `from` (loaded from
    /// the store, or re-derived when `from` is the first round) and replays
    /// every later round, checkpointing each.
    pub fn retrain_from(
        &mut self,
        dataset: &Dataset,
        k: usize,
        from: usize,
        store: &CheckpointStore,
    ) -> Result<(RevertPoint, u64)> {
        let order = rounds(&self.plan, k);
        let (start, reverted_to) = if from == 0 {
            (
                constituent_init(&self.config, k)?,
                RevertPoint::Initial { role: Role::Student, constituent: k },
            )
        } else {
            let (l, j) = order[from - 1];
            let rec = store.load_slot(Slot::student(k, l, j), None)?;
            (rec.state, RevertPoint::Checkpoint(rec.key))
        };
        let run = replay_constituent(
            dataset,
            &self.plan,
            &self.config,
            k,
            &self.labels[k],
            self.epochs_per_slice[k],
            from,
            start,
        )?;
        save_run(store, k, &self.provenance[k], &run)?;
        if self.config.trace {
            let trace = &mut self.traces[k];
            trace.retain(|t| t.round < from);
            trace.extend(run.trace.iter().copied());
        }
        self.constituents[k] = run.state;
        Ok((reverted_to, run.steps))
    }
}

impl Classifier for StudentNetwork {
    fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.predict(features)
    }
}

/// Largest absolute change in loss between consecutive trace points.
pub fn max_loss_jump(trace: &[TracePoint]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[1].loss - w[0].loss).abs())
        .fold(0.0, f64::max)
}
