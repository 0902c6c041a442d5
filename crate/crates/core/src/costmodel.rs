//! Retraining cost: closed forms and the measured step ledger.
//!
//! The unit of cost is a *data-point step*: one data point processed for one
//! epoch. All closed forms are evaluated in exact rational arithmetic so
//! that they can be compared for equality against enumeration. The
//! predictions assume an even configuration (every student has `c = M/N`
//! chunks of `r` equally sized slices).

use std::io::{Read, Write};

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Role;
use crate::{Error, Result};

pub type Rational = Ratio<i128>;

fn int(v: u64) -> Rational {
    Rational::from_integer(i128::from(v))
}

pub fn to_f64(r: &Rational) -> f64 {
    let n = r.numer().to_f64().unwrap_or(f64::NAN);
    let d = r.denom().to_f64().unwrap_or(f64::NAN);
    n / d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochsPerSlice {
    /// `2e′ / (cr + 1)`.
    pub exact: Rational,
    /// `ceil(exact)`, the value actually used for training.
    pub practical: u64,
}

/// Per-slice epochs that give the same total effort as `e_prime` epochs
/// over the whole shard when training incrementally over `c·r` slices.
pub fn epochs_per_slice(e_prime: u64, c: u64, r: u64) -> Result<EpochsPerSlice> {
    if e_prime == 0 || c == 0 || r == 0 {
        return Err(Error::InvalidArgument(
            "e_prime, c and r must be positive".into(),
        ));
    }
    let exact = Rational::new(2 * i128::from(e_prime), i128::from(c * r + 1));
    let practical = exact.ceil().to_integer() as u64;
    Ok(EpochsPerSlice { exact, practical })
}

/// Practical per-slice epochs for a shard with `total_slices` slices.
pub fn practical_epochs(e_prime: u64, total_slices: usize) -> Result<usize> {
    Ok(epochs_per_slice(e_prime, total_slices as u64, 1)?.practical as usize)
}

/// Slice-rounds, weighted by cumulative slice count, needed to retrain a
/// student from chunk `l` (1-based) onwards: rounds `(l-1)r+1 ..= cr`, the
/// round over `i` slices costing `e_R · i`.
pub fn retrain_steps(l: u64, c: u64, r: u64, e_r: Rational) -> Result<Rational> {
    if l == 0 || l > c {
        return Err(Error::InvalidArgument(format!("chunk {l} outside 1..={c}")));
    }
    let first = (l - 1) * r + 1;
    let last = c * r;
    Ok(e_r * int((first + last) * (last - first + 1)) / int(2))
}

/// Mean of [`retrain_steps`] over a uniformly chosen affected chunk, via the
/// closed form `(e_R/c)·Σ_{i=0}^{c-1} ((ir+1)+cr)((c-i)r)/2`.
pub fn avg_retrain_steps(c: u64, r: u64, e_r: Rational) -> Result<Rational> {
    if c == 0 || r == 0 {
        return Err(Error::InvalidArgument("c and r must be positive".into()));
    }
    let sum = (0..c)
        .map(|i| int(((i * r + 1) + c * r) * ((c - i) * r)) / int(2))
        .fold(Rational::zero(), |a, b| a + b);
    Ok(e_r / int(c) * sum)
}

/// Independent enumeration of the same average: for each affected chunk,
/// add `e_R · cumulative_slices` for every round from the first slice of
/// that chunk to the end.
pub fn brute_force_avg_steps(c: u64, r: u64, e_r: Rational) -> Result<Rational> {
    if c == 0 || r == 0 {
        return Err(Error::InvalidArgument("c and r must be positive".into()));
    }
    let mut total = Rational::zero();
    for affected in 1..=c {
        let mut cumulative = 0u64;
        for chunk in 1..=c {
            for _slice in 1..=r {
                cumulative += 1;
                if chunk >= affected {
                    total += e_r * int(cumulative);
                }
            }
        }
    }
    Ok(total / int(c))
}

/// `N · (6c²r + 6c) / (4c²r + 3cr + 3c − r + 3)`.
pub fn speedup_vs_n(n: u64, c: u64, r: u64) -> Result<Rational> {
    if n == 0 || c == 0 || r == 0 {
        return Err(Error::InvalidArgument("N, c and r must be positive".into()));
    }
    let (c, r) = (i128::from(c), i128::from(r));
    let num = 6 * c * c * r + 6 * c;
    let den = 4 * c * c * r + 3 * c * r + 3 * c - r + 3;
    Ok(Rational::from_integer(i128::from(n)) * Rational::new(num, den))
}

/// `M · (6cr + 6) / (4c²r + 3cr + 3c − r + 3)`.
pub fn speedup_vs_m(m: u64, c: u64, r: u64) -> Result<Rational> {
    if m == 0 || c == 0 || r == 0 {
        return Err(Error::InvalidArgument("M, c and r must be positive".into()));
    }
    let (c, r) = (i128::from(c), i128::from(r));
    let num = 6 * c * r + 6;
    let den = 4 * c * c * r + 3 * c * r + 3 * c - r + 3;
    Ok(Rational::from_integer(i128::from(m)) * Rational::new(num, den))
}

/// Expected fraction of a full shard retrain spent on a student-side
/// request when the shard has `r_total` slices: `2/3 + 1/(3R)`.
pub fn student_side_cost_fraction(r_total: u64) -> Result<Rational> {
    if r_total == 0 {
        return Err(Error::InvalidArgument("R must be positive".into()));
    }
    Ok(Rational::new(2, 3) + Rational::new(1, 3 * i128::from(r_total)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitialTrain,
    TeacherRetrain,
    StudentRetrain,
    RelabelInference,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::InitialTrain => "initial_train",
            Phase::TeacherRetrain => "teacher_retrain",
            Phase::StudentRetrain => "student_retrain",
            Phase::RelabelInference => "relabel_inference",
        }
    }
}

/// One ledger line. For [`Phase::RelabelInference`] `steps` counts teacher
/// forward passes rather than training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub request: Option<u64>,
    pub phase: Phase,
    pub role: Role,
    pub constituent: usize,
    pub steps: u64,
}

/// Append-only record of counted work.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = LedgerEntry>) {
        self.entries.extend(entries);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self, phase: Phase, role: Role) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.phase == phase && e.role == role)
            .map(|e| e.steps)
            .sum()
    }

    pub fn request_total(&self, request: u64, phase: Phase) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.request == Some(request) && e.phase == phase)
            .map(|e| e.steps)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::InvalidArgument(format!("ledger write failed: {e}"));
        w.write_record(["request", "phase", "role", "constituent", "steps"])
            .map_err(err)?;
        for e in &self.entries {
            w.write_record([
                e.request.map(|r| r.to_string()).unwrap_or_default(),
                e.phase.as_str().to_string(),
                e.role.as_str().to_string(),
                e.constituent.to_string(),
                e.steps.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidArgument(format!("ledger write failed: {e}")))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let bad = |m: &str| Error::Parse { line, message: m.to_string() };
            if rec.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let request = if rec[0].is_empty() {
                None
            } else {
                Some(rec[0].parse().map_err(|_| bad("bad request id"))?)
            };
            let phase = match &rec[1] {
                "initial_train" => Phase::InitialTrain,
                "teacher_retrain" => Phase::TeacherRetrain,
                "student_retrain" => Phase::StudentRetrain,
                "relabel_inference" => Phase::RelabelInference,
                _ => return Err(bad("unknown phase")),
            };
            let role = match &rec[2] {
                "teacher" => Role::Teacher,
                "student" => Role::Student,
                _ => return Err(bad("unknown role")),
            };
            entries.push(LedgerEntry {
                request,
                phase,
                role,
                constituent: rec[3].parse().map_err(|_| bad("bad constituent"))?,
                steps: rec[4].parse().map_err(|_| bad("bad step count"))?,
            });
        }
        Ok(CostLedger { entries })
    }
}

/// Configuration the predictions are evaluated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub n: u64,
    pub m: u64,
    pub r: u64,
    pub e_prime: u64,
    /// Student dataset size.
    pub d: u64,
}

impl CostParams {
    /// `M/N` when it divides evenly.
    pub fn chunks(&self) -> Option<u64> {
        (self.n > 0 && self.m.is_multiple_of(self.n)).then(|| self.m / self.n)
    }
}

/// Measured versus predicted speed-up of teacher-side unlearning over
/// retraining the whole student network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub params: CostParams,
    pub requests: usize,
    /// Naive baseline cost per request: the student initial-training total.
    pub naive_steps: u64,
    pub measured_mean_steps: f64,
    /// Standard error of the per-request mean.
    pub measured_stderr_steps: f64,
    /// `None` when `M/N` is not an integer.
    pub predicted_ratio_vs_n: Option<f64>,
    pub predicted_ratio_vs_m: Option<f64>,
    pub measured_ratio: f64,
    pub relative_deviation: Option<f64>,
    /// `|ceil(e_R) − e_R| / e_R`.
    pub ceiling_bound: Option<f64>,
}

/// Compares the ledger's student retraining against the closed forms.
///
/// `requests` lists the request ids to average over (normally the
/// teacher-side ones).
pub fn predict_vs_measured(
    ledger: &CostLedger,
    params: CostParams,
    requests: &[u64],
) -> Result<ComparisonReport> {
    if requests.is_empty() {
        return Err(Error::InvalidArgument("empty request log".into()));
    }
    let naive_steps = ledger.total(Phase::InitialTrain, Role::Student);
    let per_request: Vec<f64> = requests
        .iter()
        .map(|&r| ledger.request_total(r, Phase::StudentRetrain) as f64)
        .collect();
    let n = per_request.len() as f64;
    let mean = per_request.iter().sum::<f64>() / n;
    let var = if per_request.len() > 1 {
        per_request.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let measured_ratio = naive_steps as f64 / mean;
    let (vs_n, vs_m, bound) = match params.chunks() {
        Some(c) => {
            let vs_n = to_f64(&speedup_vs_n(params.n, c, params.r)?);
            let vs_m = to_f64(&speedup_vs_m(params.m, c, params.r)?);
            let e = epochs_per_slice(params.e_prime, c, params.r)?;
            let bound = to_f64(&((int(e.practical) - e.exact) / e.exact));
            (Some(vs_n), Some(vs_m), Some(bound))
        }
        None => (None, None, None),
    };
    Ok(ComparisonReport {
        params,
        requests: requests.len(),
        naive_steps,
        measured_mean_steps: mean,
        measured_stderr_steps: (var / n).sqrt(),
        predicted_ratio_vs_n: vs_n,
        predicted_ratio_vs_m: vs_m,
        measured_ratio,
        relative_deviation: vs_n.map(|p| (measured_ratio - p).abs() / p),
        ceiling_bound: bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn epochs_examples() {
        let e = epochs_per_slice(120, 4, 1).unwrap();
        assert_eq!((e.exact, e.practical), (q(48, 1), 48));
        let e = epochs_per_slice(37, 1, 1).unwrap();
        assert_eq!((e.exact, e.practical), (q(37, 1), 37));
        let e = epochs_per_slice(120, 3, 4).unwrap();
        assert_eq!((e.exact, e.practical), (q(240, 13), 19));
        assert!(epochs_per_slice(0, 1, 1).is_err());
    }

    #[test]
    fn retrain_steps_examples() {
        let one = q(1, 1);
        assert_eq!(retrain_steps(1, 2, 2, one).unwrap(), q(10, 1));
        assert_eq!(retrain_steps(2, 2, 2, one).unwrap(), q(7, 1));
        for c in 1..10 {
            assert_eq!(retrain_steps(c, c, 1, one).unwrap(), q(c as i128, 1));
        }
        assert!(retrain_steps(0, 2, 2, one).is_err());
        assert!(retrain_steps(3, 2, 2, one).is_err());
    }

    #[test]
    fn avg_examples() {
        assert_eq!(avg_retrain_steps(2, 2, q(1, 1)).unwrap(), q(17, 2));
        for r in 1..6u64 {
            let e = q(3, 1);
            assert_eq!(
                avg_retrain_steps(1, r, e).unwrap(),
                e * q(((1 + r) * r) as i128, 2)
            );
        }
        assert_eq!(brute_force_avg_steps(1, 1, q(5, 1)).unwrap(), q(5, 1));
        assert_eq!(brute_force_avg_steps(2, 1, q(1, 1)).unwrap(), q(5, 2));
    }

    #[test]
    fn closed_form_matches_enumeration_on_grid() {
        for c in 1..=8 {
            for r in 1..=8 {
                let e = q(7, 3);
                assert_eq!(
                    avg_retrain_steps(c, r, e).unwrap(),
                    brute_force_avg_steps(c, r, e).unwrap()
                );
            }
        }
    }

    #[test]
    fn speedup_examples() {
        for r in 1..20 {
            assert_eq!(speedup_vs_n(7, 1, r).unwrap(), q(7, 1));
        }
        assert_eq!(speedup_vs_n(16, 2, 1).unwrap(), q(96, 5));
        assert_eq!(speedup_vs_m(32, 1, 1).unwrap(), q(32, 1));
        assert_eq!(speedup_vs_m(32, 2, 1).unwrap(), q(96, 5));
    }

    #[test]
    fn speedup_decreasing_in_c() {
        for r in 1..5 {
            for c in 1..16 {
                assert!(speedup_vs_m(32, c + 1, r).unwrap() < speedup_vs_m(32, c, r).unwrap());
            }
        }
    }

    #[test]
    fn speedup_matches_ratio_of_costs() {
        // e′D / (K̄ · D/(Ncr)) with e_R = 2e′/(cr+1), evaluated directly.
        for n in [1u64, 3, 8] {
            for c in 1..6u64 {
                for r in 1..5u64 {
                    let e_prime = q(11, 1);
                    let e_r = e_prime * q(2, (c * r + 1) as i128);
                    let kbar = avg_retrain_steps(c, r, e_r).unwrap();
                    let d = q((n * c * r * 10) as i128, 1);
                    let ratio = e_prime * d / (kbar * d / q((n * c * r) as i128, 1));
                    assert_eq!(ratio, speedup_vs_n(n, c, r).unwrap());
                }
            }
        }
    }

    #[test]
    fn student_fraction_examples() {
        assert_eq!(student_side_cost_fraction(1).unwrap(), q(1, 1));
        assert_eq!(student_side_cost_fraction(4).unwrap(), q(3, 4));
        let mut prev = student_side_cost_fraction(1).unwrap();
        for r in 2..200 {
            let f = student_side_cost_fraction(r).unwrap();
            assert!(f < prev && f > q(2, 3));
            prev = f;
        }
    }

    #[test]
    fn ledger_csv_roundtrip() {
        let mut ledger = CostLedger::new();
        ledger.record(LedgerEntry {
            request: None,
            phase: Phase::InitialTrain,
            role: Role::Student,
            constituent: 2,
            steps: 40,
        });
        ledger.record(LedgerEntry {
            request: Some(3),
            phase: Phase::RelabelInference,
            role: Role::Teacher,
            constituent: 1,
            steps: 7,
        });
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        assert_eq!(CostLedger::read_csv(buf.as_slice()).unwrap(), ledger);
        assert!(CostLedger::read_csv("request,phase,role,constituent,steps\n,bogus,student,0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn predict_vs_measured_naive_is_one() {
        // Naive baseline: every teacher request retrains the whole network.
        let mut ledger = CostLedger::new();
        for k in 0..4 {
            ledger.record(LedgerEntry {
                request: None,
                phase: Phase::InitialTrain,
                role: Role::Student,
                constituent: k,
                steps: 100,
            });
        }
        for req in 0..3 {
            for k in 0..4 {
                ledger.record(LedgerEntry {
                    request: Some(req),
                    phase: Phase::StudentRetrain,
                    role: Role::Student,
                    constituent: k,
                    steps: 100,
                });
            }
        }
        let params = CostParams { n: 4, m: 8, r: 1, e_prime: 10, d: 40 };
        let rep = predict_vs_measured(&ledger, params, &[0, 1, 2]).unwrap();
        assert_eq!(rep.measured_ratio, 1.0);
        assert!(predict_vs_measured(&ledger, params, &[]).is_err());
    }
}
