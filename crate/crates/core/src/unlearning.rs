//! Unlearning requests against a trained teacher/student system, and an
//! independent from-scratch oracle that checks the result.
//!
//! Every request is handled by one repair routine. The point is removed
//! from whichever partition plans hold it; a teacher removal reverts and
//! replays the owning member; every student chunk whose cached labels came
//! from that member is relabelled; each touched student constituent is then
//! reverted to the round before its earliest invalidated round and replayed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointStore, Role};
use crate::costmodel::{CostLedger, LedgerEntry, Phase};
use crate::data::{Dataset, PointId};
use crate::model::{ModelState, SoftLabelChunk};
use crate::seed;
use crate::student::{rounds, train_student_constituent, StudentNetwork};
use crate::teacher::{RevertPoint, TeacherEnsemble, TrainBudget};
use crate::{Error, Result};

/// A trained teacher ensemble and student network plus the data they saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub teacher_data: Dataset,
    pub student_data: Dataset,
    pub teachers: TeacherEnsemble,
    pub students: StudentNetwork,
    pub student_budget: TrainBudget,
    /// Training is reproducible bit for bit. Verification requires it.
    pub deterministic: bool,
}

impl System {
    /// Teacher and student data hold the same ids, so simultaneous
    /// requests are possible.
    pub fn shared_dataset(&self) -> bool {
        self.teacher_data.len() == self.student_data.len()
            && self.teacher_data.ids().all(|id| self.student_data.contains(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Student,
    Teacher,
    Simultaneous,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Student => "student",
            TargetKind::Teacher => "teacher",
            TargetKind::Simultaneous => "simultaneous",
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(TargetKind::Student),
            "teacher" => Ok(TargetKind::Teacher),
            "simultaneous" => Ok(TargetKind::Simultaneous),
            other => Err(Error::InvalidArgument(format!("unknown target kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub request_id: u64,
    pub target: TargetKind,
    pub point_id: PointId,
}

/// For simultaneous requests: whether the point's student chunk is the one
/// labelled last by the teacher that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Aligned,
    Misaligned,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub teacher: u64,
    pub student: u64,
    /// Teacher forward passes spent regenerating soft labels.
    pub relabel_inference: u64,
    /// Student training rounds replayed.
    pub student_rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub request_id: u64,
    pub target: TargetKind,
    pub point_id: PointId,
    pub scenario: Option<Scenario>,
    pub affected_teacher_members: Vec<usize>,
    pub affected_student_constituents: Vec<usize>,
    pub reverted_to: Vec<RevertPoint>,
    /// `(k, l)` pairs.
    pub chunks_relabeled: Vec<(usize, usize)>,
    pub steps: StepCounts,
    /// Informational only.
    pub wall_time_secs: f64,
}

fn student_missing(id: PointId) -> Error {
    Error::NotFound(format!("point {id} is not in the student dataset"))
}

fn teacher_missing(id: PointId) -> Error {
    Error::NotFound(format!("point {id} is not in the teacher dataset"))
}

/// Applies one request, updating `system`, `store` and `ledger`.
pub fn unlearn(
    system: &mut System,
    request: &UnlearnRequest,
    store: &CheckpointStore,
    ledger: &mut CostLedger,
) -> Result<UnlearnReport> {
    let started = Instant::now();
    let id = request.point_id;
    let (on_student, on_teacher) = match request.target {
        TargetKind::Student => (true, false),
        TargetKind::Teacher => (false, true),
        TargetKind::Simultaneous => (true, true),
    };
    // Resolve both sides before mutating anything.
    let student_loc = if on_student {
        Some(system.students.locate(id).map_err(|_| student_missing(id))?)
    } else {
        None
    };
    let member = if on_teacher {
        Some(system.teachers.owner(id).map_err(|_| teacher_missing(id))?)
    } else {
        None
    };
    let scenario = match (student_loc, member) {
        (Some(loc), Some(m)) => Some(
            if system.students.mapping.owner(m) == Some((loc.shard, loc.chunk)) {
                Scenario::Aligned
            } else {
                Scenario::Misaligned
            },
        ),
        _ => None,
    };

    let req = Some(request.request_id);
    let mut steps = StepCounts::default();
    // Earliest invalidated round per student constituent.
    let mut restart: BTreeMap<usize, usize> = BTreeMap::new();
    let mut relabeled = Vec::new();

    if let Some(loc) = student_loc {
        system.students.remove_point(id)?;
        let round = system.students.round_index(loc.shard, loc.chunk, loc.slice);
        restart.insert(loc.shard, round);
    }
    if let Some(m) = member {
        let outcome = system.teachers.unlearn(&system.teacher_data, id, store)?;
        steps.teacher = outcome.steps;
        ledger.record(LedgerEntry {
            request: req,
            phase: Phase::TeacherRetrain,
            role: Role::Teacher,
            constituent: m,
            steps: outcome.steps,
        });
        for k in system.students.constituents_using_teacher(m) {
            let chunks = system.students.chunks_using_teacher(k, m);
            let inferences =
                system
                    .students
                    .relabel(&system.student_data, k, &chunks, &system.teachers)?;
            steps.relabel_inference += inferences;
            ledger.record(LedgerEntry {
                request: req,
                phase: Phase::RelabelInference,
                role: Role::Student,
                constituent: k,
                steps: inferences,
            });
            relabeled.extend(chunks.iter().map(|&l| (k, l)));
            let round = system.students.round_index(k, chunks[0], 0);
            restart
                .entry(k)
                .and_modify(|r| *r = (*r).min(round))
                .or_insert(round);
        }
    }

    let mut reverted_to = Vec::new();
    for (&k, &from) in &restart {
        let (revert, s) = system
            .students
            .retrain_from(&system.student_data, k, from, store)?;
        steps.student += s;
        steps.student_rounds += (rounds(&system.students.plan, k).len() - from) as u64;
        reverted_to.push(revert);
        ledger.record(LedgerEntry {
            request: req,
            phase: Phase::StudentRetrain,
            role: Role::Student,
            constituent: k,
            steps: s,
        });
    }

    Ok(UnlearnReport {
        request_id: request.request_id,
        target: request.target,
        point_id: id,
        scenario,
        affected_teacher_members: member.into_iter().collect(),
        affected_student_constituents: restart.keys().copied().collect(),
        reverted_to,
        chunks_relabeled: relabeled,
        steps,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Outcome of [`verify_exactness`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    /// Largest parameter difference between the unlearned system and the
    /// scratch oracle, over every constituent.
    pub max_abs_diff: f64,
    /// Constituents whose oracle differs from the pre-request state.
    pub changed_teacher_members: Vec<usize>,
    pub changed_student_constituents: Vec<usize>,
    /// Cached label chunks that disagree with the oracle's labels.
    pub label_mismatches: Vec<(usize, usize)>,
    /// Human-readable reasons for failure.
    pub problems: Vec<String>,
}

fn diff(a: &ModelState, b: &ModelState) -> f64 {
    a.max_abs_diff(b)
}

fn labels_eq(a: &[SoftLabelChunk], b: &[SoftLabelChunk]) -> Vec<usize> {
    (0..a.len().max(b.len()))
        .filter(|&l| match (a.get(l), b.get(l)) {
            (Some(x), Some(y)) => !x.bit_eq(y),
            _ => true,
        })
        .collect()
}

/// Recomputes the post-request system from scratch and compares it with
/// `after` parameter by parameter.
///
/// The oracle removes the point from copies of `before`'s plans, retrains
/// every teacher member and student constituent from its initial state with
/// the same seeds, regenerates every soft label, and requires exact
/// equality. Constituents the oracle does not change must also be
/// bit-identical to `before`.
pub fn verify_exactness(
    before: &System,
    request: &UnlearnRequest,
    after: &System,
) -> Result<Verdict> {
    if !before.deterministic || !after.deterministic {
        return Err(Error::VerificationUnavailable(
            "system was trained without determinism".into(),
        ));
    }
    let id = request.point_id;
    let mut teacher_plan = before.teachers.plan.clone();
    let mut student_plan = before.students.plan.clone();
    if matches!(request.target, TargetKind::Teacher | TargetKind::Simultaneous) {
        teacher_plan.remove_point(id).map_err(|_| teacher_missing(id))?;
    }
    if matches!(request.target, TargetKind::Student | TargetKind::Simultaneous) {
        student_plan.remove_point(id).map_err(|_| student_missing(id))?;
    }

    let mut problems = Vec::new();
    let mut max_abs_diff: f64 = 0.0;

    let mut oracle_teachers = before.teachers.clone();
    oracle_teachers.plan = teacher_plan.clone();
    let mut changed_teacher_members = Vec::new();
    for m in 0..before.teachers.len() {
        let scratch =
            before
                .teachers
                .retrain_member_from_scratch(&before.teacher_data, &teacher_plan, m)?;
        if !scratch.bit_eq(&before.teachers.members[m]) {
            changed_teacher_members.push(m);
        }
        let d = diff(&scratch, &after.teachers.members[m]);
        max_abs_diff = max_abs_diff.max(d);
        if !scratch.bit_eq(&after.teachers.members[m]) {
            problems.push(format!("teacher {m} differs from its scratch retrain by {d:e}"));
        }
        oracle_teachers.members[m] = scratch;
    }

    let s = &before.students;
    let mut changed_student_constituents = Vec::new();
    let mut label_mismatches = Vec::new();
    for k in 0..s.len() {
        let out = train_student_constituent(
            k,
            &before.student_data,
            &student_plan,
            &s.mapping,
            &oracle_teachers,
            &s.config,
            before.student_budget,
            None,
        )?;
        if !out.run.state.bit_eq(&s.constituents[k]) {
            changed_student_constituents.push(k);
        }
        let d = diff(&out.run.state, &after.students.constituents[k]);
        max_abs_diff = max_abs_diff.max(d);
        if !out.run.state.bit_eq(&after.students.constituents[k]) {
            problems.push(format!("student {k} differs from its scratch retrain by {d:e}"));
        }
        for l in labels_eq(&out.labels, &after.students.labels[k]) {
            label_mismatches.push((k, l));
            problems.push(format!("cached labels of chunk ({k},{l}) differ from the oracle"));
        }
        if out.provenance != after.students.provenance[k] {
            problems.push(format!("label provenance of student {k} differs from the oracle"));
        }
    }
    if after.teachers.plan != teacher_plan || after.students.plan != student_plan {
        problems.push("partition plans differ from the oracle's".into());
    }

    Ok(Verdict {
        pass: problems.is_empty(),
        max_abs_diff,
        changed_teacher_members,
        changed_student_constituents,
        label_mismatches,
        problems,
    })
}

/// Relative frequency of each request kind in a generated stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestMix {
    pub student: f64,
    pub teacher: f64,
    pub aligned: f64,
    pub misaligned: f64,
}

impl RequestMix {
    pub fn teacher_only() -> Self {
        RequestMix {
            student: 0.0,
            teacher: 1.0,
            aligned: 0.0,
            misaligned: 0.0,
        }
    }

    pub fn uniform() -> Self {
        RequestMix {
            student: 1.0,
            teacher: 1.0,
            aligned: 1.0,
            misaligned: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let w = [self.student, self.teacher, self.aligned, self.misaligned];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(
                "request mix weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Draw {
    Student,
    Teacher,
    Simultaneous(Scenario),
}

/// Draws `count` requests valid when applied in order. Teacher requests
/// pick a uniform member that still has data, then a uniform surviving
/// point of its shard.
pub fn generate_requests(
    system: &System,
    mix: RequestMix,
    count: usize,
    seed: u64,
) -> Result<Vec<UnlearnRequest>> {
    mix.validate()?;
    let shared = system.shared_dataset();
    if !shared && (mix.aligned > 0.0 || mix.misaligned > 0.0) {
        return Err(Error::InvalidArgument(
            "simultaneous requests need the teacher and student datasets to share ids".into(),
        ));
    }
    let mut rng = seed::rng(seed);
    let mut tplan = system.teachers.plan.clone();
    let mut splan = system.students.plan.clone();
    let mapping = &system.students.mapping;
    let kinds = [
        (Draw::Student, mix.student),
        (Draw::Teacher, mix.teacher),
        (Draw::Simultaneous(Scenario::Aligned), mix.aligned),
        (Draw::Simultaneous(Scenario::Misaligned), mix.misaligned),
    ];
    let total: f64 = kinds.iter().map(|(_, w)| w).sum();
    let mut out = Vec::with_capacity(count);
    for request_id in 0..count as u64 {
        let mut u = rng.random::<f64>() * total;
        let mut draw = kinds[kinds.len() - 1].0;
        for (d, w) in kinds {
            if u < w {
                draw = d;
                break;
            }
            u -= w;
        }
        let (target, point_id) = match draw {
            Draw::Student => {
                let ids = splan.all_ids().collect::<Vec<_>>();
                let id = *ids
                    .choose(&mut rng)
                    .ok_or_else(|| Error::InvalidArgument("student data exhausted".into()))?;
                (TargetKind::Student, id)
            }
            Draw::Teacher => {
                let members: Vec<usize> =
                    (0..tplan.num_shards()).filter(|&m| tplan.shard_len(m) > 0).collect();
                let m = *members
                    .choose(&mut rng)
                    .ok_or_else(|| Error::InvalidArgument("teacher data exhausted".into()))?;
                let ids: Vec<PointId> = tplan.shard_ids(m).collect();
                (TargetKind::Teacher, *ids.choose(&mut rng).expect("member has data"))
            }
            Draw::Simultaneous(want) => {
                let candidates: Vec<PointId> = splan
                    .all_ids()
                    .filter(|&id| {
                        let (Ok(s), Ok(t)) = (splan.locate(id), tplan.locate(id)) else {
                            return false;
                        };
                        let aligned = mapping.owner(t.shard) == Some((s.shard, s.chunk));
                        aligned == (want == Scenario::Aligned)
                    })
                    .collect();
                let id = *candidates.choose(&mut rng).ok_or_else(|| {
                    Error::InvalidArgument(format!("no point left for a {want:?} simultaneous request"))
                })?;
                (TargetKind::Simultaneous, id)
            }
        };
        if target != TargetKind::Teacher {
            splan.remove_point(point_id)?;
        }
        if target != TargetKind::Student {
            tplan.remove_point(point_id)?;
        }
        out.push(UnlearnRequest {
            request_id,
            target,
            point_id,
        });
    }
    Ok(out)
}

const REQUEST_HEADER: [&str; 3] = ["seq", "target_kind", "point_id"];

pub fn write_requests<W: Write>(writer: W, requests: &[UnlearnRequest]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("writing requests: {e}"));
    w.write_record(REQUEST_HEADER).map_err(csv_err)?;
    for r in requests {
        w.write_record([
            r.request_id.to_string(),
            r.target.as_str().to_string(),
            r.point_id.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidArgument(format!("writing requests: {e}")))?;
    Ok(())
}

/// Parses a request stream. A header row is optional. Errors carry the
/// 1-based line number; ids must strictly increase.
pub fn read_requests<R: Read>(reader: R) -> Result<Vec<UnlearnRequest>> {
    Ok(read_request_lines(reader)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`read_requests`], keeping each request's line number.
pub fn read_request_lines<R: Read>(reader: R) -> Result<Vec<(u64, UnlearnRequest)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out: Vec<(u64, UnlearnRequest)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if out.is_empty() && rec.get(0) == Some(REQUEST_HEADER[0]) {
            continue;
        }
        let parse = |message: String| Error::Parse { line, message };
        if rec.len() != 3 {
            return Err(parse(format!("expected 3 fields, found {}", rec.len())));
        }
        let request_id: u64 = rec[0]
            .parse()
            .map_err(|e| parse(format!("bad seq {:?}: {e}", &rec[0])))?;
        let target = rec[1].parse().map_err(|e: Error| parse(e.to_string()))?;
        let point_id: PointId = rec[2]
            .parse()
            .map_err(|e| parse(format!("bad point id {:?}: {e}", &rec[2])))?;
        if out.last().is_some_and(|(_, p)| p.request_id >= request_id) {
            return Err(parse(format!("seq {request_id} is not increasing")));
        }
        out.push((
            line,
            UnlearnRequest {
                request_id,
                target,
                point_id,
            },
        ));
    }
    Ok(out)
}

pub fn load_requests(path: &Path) -> Result<Vec<(u64, UnlearnRequest)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_request_lines(f)
}

/// Teacher members whose current state differs bitwise between two systems.
pub fn changed_teachers(a: &System, b: &System) -> BTreeSet<usize> {
    (0..a.teachers.len())
        .filter(|&m| !a.teachers.members[m].bit_eq(&b.teachers.members[m]))
        .collect()
}

/// Student constituents whose current state differs bitwise.
pub fn changed_students(a: &System, b: &System) -> BTreeSet<usize> {
    (0..a.students.len())
        .filter(|&k| !a.students.constituents[k].bit_eq(&b.students.constituents[k]))
        .collect()
}
