//! Step-count simulation of request streams without training any model.
//!
//! A student network is laid out exactly as training would lay it out, and
//! each request is charged the data-point steps its replay would cost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Role;
use crate::costmodel::{
    predict_vs_measured, practical_epochs, ComparisonReport, CostLedger, CostParams, LedgerEntry,
    Phase,
};
use crate::data::{Layout, PartitionPlan};
use crate::seed;
use crate::student::{cumulative_sizes, replay_steps, rounds, ConstituentMapping, StudentMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub teachers: usize,
    pub students: usize,
    pub slices_per_chunk: usize,
    pub e_prime: u64,
    /// Student dataset size.
    pub points: usize,
    pub requests: usize,
    pub mode: StudentMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub report: ComparisonReport,
    /// Student retrain steps of each request, in order.
    pub per_request_steps: Vec<u64>,
    /// `M/N` did not divide evenly; predictions are absent.
    pub uneven: bool,
}

impl SimOutcome {
    pub fn cumulative_steps(&self) -> Vec<u64> {
        self.per_request_steps
            .iter()
            .scan(0u64, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect()
    }
}

/// Simulates `requests` teacher-side requests, each targeting a uniformly
/// chosen teacher member.
pub fn simulate_teacher_requests(config: &SimConfig) -> Result<SimOutcome> {
    if config.requests == 0 {
        return Err(Error::InvalidArgument("simulation needs at least one request".into()));
    }
    let mapping = ConstituentMapping::build(config.teachers, config.students, None)?;
    let chunks: Vec<usize> = (0..config.students).map(|k| mapping.chunks(k)).collect();
    let layout = Layout::with_chunks(&chunks, config.slices_per_chunk);
    let plan = PartitionPlan::from_ids((0..config.points as u64).collect(), &layout, config.seed)?;
    let epochs: Vec<usize> = (0..config.students)
        .map(|k| practical_epochs(config.e_prime, plan.total_slices(k)))
        .collect::<Result<_>>()?;

    let mut ledger = CostLedger::new();
    for (k, &e) in epochs.iter().enumerate() {
        ledger.record(LedgerEntry {
            request: None,
            phase: Phase::InitialTrain,
            role: Role::Student,
            constituent: k,
            steps: replay_steps(&plan, k, 0, e),
        });
    }

    let mut rng = seed::rng(seed::derive(config.seed, &[0x5151]));
    let mut per_request = Vec::with_capacity(config.requests);
    for request in 0..config.requests as u64 {
        let teacher = rng.random_range(0..config.teachers);
        let mut steps = 0;
        for k in 0..config.students {
            let first = (0..mapping.chunks(k))
                .find(|&l| mapping.provenance(config.mode, k, l).contains(&teacher));
            let Some(l) = first else { continue };
            let from = rounds(&plan, k).iter().position(|&r| r == (l, 0)).expect("chunk has a first slice");
            let s = replay_steps(&plan, k, from, epochs[k]);
            ledger.record(LedgerEntry {
                request: Some(request),
                phase: Phase::StudentRetrain,
                role: Role::Student,
                constituent: k,
                steps: s,
            });
            steps += s;
        }
        per_request.push(steps);
    }

    let params = CostParams {
        n: config.students as u64,
        m: config.teachers as u64,
        r: config.slices_per_chunk as u64,
        e_prime: config.e_prime,
        d: config.points as u64,
    };
    let ids: Vec<u64> = (0..config.requests as u64).collect();
    let report = predict_vs_measured(&ledger, params, &ids)?;
    Ok(SimOutcome {
        uneven: params.chunks().is_none(),
        report,
        per_request_steps: per_request,
    })
}

/// Expected cost of a student-side request relative to retraining the
/// shard from scratch, by enumerating every point of a single shard of
/// `points` points cut into `slices` even slices.
///
/// A point in round `i` forces replay of rounds `i..` over data that no
/// longer contains it; the reference is training all rounds on that same
/// reduced data.
pub fn student_fraction_by_enumeration(points: usize, slices: usize) -> Result<f64> {
    let plan = PartitionPlan::from_ids(
        (0..points as u64).collect(),
        &Layout::uniform(1, 1, slices),
        0,
    )?;
    let sizes = cumulative_sizes(&plan, 0);
    let mut ratio_sum = 0.0;
    for (i, _) in rounds(&plan, 0).iter().enumerate() {
        let in_slice = plan.slice(0, 0, i).len();
        let reduced = |t: usize, n: usize| (n - usize::from(t >= i)) as u64;
        let replay: u64 = sizes.iter().enumerate().skip(i).map(|(t, &n)| reduced(t, n)).sum();
        let full: u64 = sizes.iter().enumerate().map(|(t, &n)| reduced(t, n)).sum();
        ratio_sum += in_slice as f64 * replay as f64 / full as f64;
    }
    Ok(ratio_sum / points as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{student_side_cost_fraction, to_f64};

    fn cfg(m: usize, n: usize, r: usize) -> SimConfig {
        SimConfig {
            teachers: m,
            students: n,
            slices_per_chunk: r,
            e_prime: 120,
            points: 3200,
            requests: 100,
            mode: StudentMode::Purge,
            seed: 9,
        }
    }

    #[test]
    fn one_teacher_per_student_gives_exactly_n() {
        let out = simulate_teacher_requests(&cfg(32, 32, 1)).unwrap();
        assert_eq!(out.report.measured_ratio, 32.0);
        assert_eq!(out.report.relative_deviation, Some(0.0));
    }

    #[test]
    fn naive_mode_ratio_is_one() {
        let out = simulate_teacher_requests(&SimConfig {
            mode: StudentMode::NaiveSisa,
            ..cfg(8, 4, 2)
        })
        .unwrap();
        assert_eq!(out.report.measured_ratio, 1.0);
    }

    #[test]
    fn uneven_rows_are_flagged() {
        let out = simulate_teacher_requests(&cfg(32, 3, 1)).unwrap();
        assert!(out.uneven);
        assert_eq!(out.report.predicted_ratio_vs_n, None);
    }

    #[test]
    fn cumulative_is_running_sum() {
        let out = simulate_teacher_requests(&cfg(8, 2, 1)).unwrap();
        let cum = out.cumulative_steps();
        assert_eq!(*cum.last().unwrap(), out.per_request_steps.iter().sum::<u64>());
        assert!(cum.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fraction_without_slicing_is_one() {
        assert_eq!(student_fraction_by_enumeration(50, 1).unwrap(), 1.0);
    }

    #[test]
    fn fraction_tracks_closed_form() {
        for r in [2u64, 4, 8] {
            let got = student_fraction_by_enumeration(100 * r as usize, r as usize).unwrap();
            let want = to_f64(&student_side_cost_fraction(r).unwrap());
            assert!((got - want).abs() / want < 0.02, "R={r}: {got} vs {want}");
        }
    }
}
