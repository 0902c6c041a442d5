//! Sliced, checkpointed teacher ensemble.
//!
//! Member `m` trains only on teacher shard `m`. The shard is split into
//! `R_T` slices; round `j` trains on slices `0..=j` for `e_R` epochs and
//! checkpoints the result under `teacher/m/0/j`. Removing a point reverts
//! its member to the checkpoint before the point's slice and replays the
//! remaining rounds.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointKey, CheckpointStore, Role, Slot};
use crate::costmodel::{practical_epochs, LedgerEntry, Phase};
use crate::data::{Dataset, Layout, PartitionPlan, PointId};
use crate::model::{
    aggregate, init_model, one_hot, predict, train, Classifier, Example, ModelArch, ModelState,
    TrainHyper,
};
use crate::seed::{self, tag};
use crate::{Error, Result};

/// Training effort expressed as equivalent full-dataset epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub e_prime: u64,
}

impl TrainBudget {
    pub fn new(e_prime: u64) -> Result<Self> {
        if e_prime == 0 {
            return Err(Error::InvalidArgument("e_prime must be at least 1".into()));
        }
        Ok(TrainBudget { e_prime })
    }

    /// `ceil(2e′ / (slices + 1))`.
    pub fn epochs_per_slice(&self, slices: usize) -> Result<usize> {
        practical_epochs(self.e_prime, slices)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub members: usize,
    pub slices: usize,
    pub arch: ModelArch,
    pub hyper: TrainHyper,
    pub partition_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEnsemble {
    pub config: TeacherConfig,
    pub epochs_per_slice: usize,
    pub plan: PartitionPlan,
    pub members: Vec<ModelState>,
}

/// Where a teacher revert landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RevertPoint {
    /// Freshly initialised state, re-derived from its seed.
    Initial { role: Role, constituent: usize },
    Checkpoint(CheckpointKey),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherUnlearnOutcome {
    pub member: usize,
    pub slice: usize,
    pub reverted_to: RevertPoint,
    pub steps: u64,
}

pub fn member_init(config: &TeacherConfig, member: usize) -> Result<ModelState> {
    init_model(
        config.arch,
        seed::derive(config.hyper.seed, &[tag::TEACHER_INIT, member as u64]),
    )
}

fn round_id(member: usize, slice: usize) -> u64 {
    seed::derive(tag::TEACHER_ROUND, &[member as u64, slice as u64])
}

/// Result of replaying rounds of one member.
pub struct MemberRun {
    pub state: ModelState,
    /// `(slice, state)` after each replayed round.
    pub checkpoints: Vec<(usize, ModelState)>,
    pub steps: u64,
}

/// Trains `member` over rounds `from_slice..R_T` starting at `start`.
///
/// Teachers learn from hard labels: the soft target is the one-hot label.
pub fn replay_member(
    dataset: &Dataset,
    plan: &PartitionPlan,
    config: &TeacherConfig,
    epochs: usize,
    member: usize,
    from_slice: usize,
    start: ModelState,
) -> Result<MemberRun> {
    let slices = plan.slices(member, 0);
    let k = dataset.num_classes();
    let mut state = start;
    let mut checkpoints = Vec::with_capacity(slices.len().saturating_sub(from_slice));
    let mut steps = 0u64;
    let mut feats: Vec<&[f64]> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    let mut hard: Vec<usize> = Vec::new();
    for (j, slice) in slices.iter().enumerate() {
        for &id in slice {
            let p = dataset.point(id)?;
            feats.push(&p.features);
            targets.push(one_hot(p.label, k));
            hard.push(p.label);
        }
        if j < from_slice {
            continue;
        }
        if !feats.is_empty() {
            let examples: Vec<Example<'_>> = (0..feats.len())
                .map(|i| Example {
                    features: feats[i],
                    soft_label: &targets[i],
                    hard_label: hard[i],
                })
                .collect();
            state = train(&state, &examples, epochs, &config.hyper, round_id(member, j))?;
            steps += (epochs * examples.len()) as u64;
        }
        checkpoints.push((j, state.clone()));
    }
    Ok(MemberRun { state, checkpoints, steps })
}

fn save_run(store: &CheckpointStore, member: usize, run: &MemberRun) -> Result<()> {
    for (j, s) in &run.checkpoints {
        store.save(Slot::teacher(member, *j), s, &[])?;
    }
    Ok(())
}

pub fn train_teacher_ensemble(
    dataset: &Dataset,
    config: TeacherConfig,
    budget: TrainBudget,
    store: &CheckpointStore,
    ledger: &mut Vec<LedgerEntry>,
) -> Result<TeacherEnsemble> {
    if config.members == 0 || config.slices == 0 {
        return Err(Error::InvalidArgument(
            "teacher ensemble needs at least one member and one slice".into(),
        ));
    }
    config.hyper.validate()?;
    check_arch(&config.arch, dataset)?;
    let plan = PartitionPlan::from_ids(
        dataset.ids().collect(),
        &Layout::uniform(config.members, 1, config.slices),
        config.partition_seed,
    )?;
    let epochs = budget.epochs_per_slice(config.slices)?;
    let mut members = Vec::with_capacity(config.members);
    for m in 0..config.members {
        let run = replay_member(dataset, &plan, &config, epochs, m, 0, member_init(&config, m)?)?;
        save_run(store, m, &run)?;
        ledger.push(LedgerEntry {
            request: None,
            phase: Phase::InitialTrain,
            role: Role::Teacher,
            constituent: m,
            steps: run.steps,
        });
        members.push(run.state);
    }
    Ok(TeacherEnsemble {
        config,
        epochs_per_slice: epochs,
        plan,
        members,
    })
}

pub(crate) fn check_arch(arch: &ModelArch, dataset: &Dataset) -> Result<()> {
    arch.validate()?;
    if arch.feature_dim != dataset.feature_dim() {
        return Err(Error::Dimension {
            expected: dataset.feature_dim(),
            found: arch.feature_dim,
        });
    }
    if arch.num_classes != dataset.num_classes() {
        return Err(Error::Dimension {
            expected: dataset.num_classes(),
            found: arch.num_classes,
        });
    }
    Ok(())
}

impl TeacherEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member that owns `id`.
    pub fn owner(&self, id: PointId) -> Result<usize> {
        self.plan
            .locate(id)
            .map(|loc| loc.shard)
            .map_err(|_| Error::NotFound(format!("point {id} is not in the teacher dataset")))
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        let preds = self
            .members
            .iter()
            .map(|m| predict(m, features))
            .collect::<Result<Vec<_>>>()?;
        aggregate(&preds)
    }

    /// Removes `id` from its member's shard, reverts that member to the
    /// checkpoint preceding the point's slice and replays the rest.
    pub fn unlearn(
        &mut self,
        dataset: &Dataset,
        id: PointId,
        store: &CheckpointStore,
    ) -> Result<TeacherUnlearnOutcome> {
        let loc = self
            .plan
            .remove_point(id)
            .map_err(|_| Error::NotFound(format!("point {id} is not in the teacher dataset")))?;
        let member = loc.shard;
        let (start, reverted_to) = if loc.slice == 0 {
            (
                member_init(&self.config, member)?,
                RevertPoint::Initial { role: Role::Teacher, constituent: member },
            )
        } else {
            let rec = store.load_slot(Slot::teacher(member, loc.slice - 1), None)?;
            (rec.state, RevertPoint::Checkpoint(rec.key))
        };
        let run = replay_member(
            dataset,
            &self.plan,
            &self.config,
            self.epochs_per_slice,
            member,
            loc.slice,
            start,
        )?;
        save_run(store, member, &run)?;
        self.members[member] = run.state;
        Ok(TeacherUnlearnOutcome {
            member,
            slice: loc.slice,
            reverted_to,
            steps: run.steps,
        })
    }

    /// Trains `member` from scratch on its current shard, without touching
    /// any store.
    pub fn retrain_member_from_scratch(&self, dataset: &Dataset, plan: &PartitionPlan, member: usize) -> Result<ModelState> {
        let run = replay_member(
            dataset,
            plan,
            &self.config,
            self.epochs_per_slice,
            member,
            0,
            member_init(&self.config, member)?,
        )?;
        Ok(run.state)
    }
}

impl Classifier for TeacherEnsemble {
    fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.predict(features)
    }
}
