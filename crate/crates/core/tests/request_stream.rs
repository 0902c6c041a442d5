use proptest::prelude::*;
use purge_core::checkpoint::CheckpointStore;
use purge_core::costmodel::CostLedger;
use purge_core::data::{gen_synthetic, SyntheticSpec};
use purge_core::model::{ModelArch, TrainHyper};
use purge_core::student::{train_student_network, ConstituentMapping, StudentConfig, StudentMode};
use purge_core::teacher::{train_teacher_ensemble, TeacherConfig, TrainBudget};
use purge_core::unlearning::{generate_requests, unlearn, verify_exactness, RequestMix, System};

struct Fixture {
    m: usize,
    n: usize,
    r: usize,
    mode: StudentMode,
    data_seed: u64,
}

fn build(f: &Fixture, store: &CheckpointStore) -> (System, CostLedger) {
    let data = gen_synthetic(&SyntheticSpec::new(3, 30, 2, 2.0, 1.0, f.data_seed)).unwrap();
    let mut entries = Vec::new();
    let teachers = train_teacher_ensemble(
        &data,
        TeacherConfig {
            members: f.m,
            slices: 2,
            arch: ModelArch::softmax_linear(2, 3),
            hyper: TrainHyper::new(0.1, 8, 1),
            partition_seed: f.data_seed + 1,
        },
        TrainBudget::new(3).unwrap(),
        store,
        &mut entries,
    )
    .unwrap();
    let budget = TrainBudget::new(3).unwrap();
    let students = train_student_network(
        &data,
        ConstituentMapping::build(f.m, f.n, None).unwrap(),
        &teachers,
        StudentConfig {
            mode: f.mode,
            arch: ModelArch::softmax_linear(2, 3),
            hyper: TrainHyper::new(0.1, 8, 2),
            slices_per_chunk: f.r,
            explicit_slices: None,
            partition_seed: f.data_seed + 2,
            trace: false,
        },
        budget,
        store,
        &mut entries,
        false,
    )
    .unwrap();
    let mut ledger = CostLedger::new();
    ledger.extend(entries);
    let system = System {
        teacher_data: data.clone(),
        student_data: data,
        teachers,
        students,
        student_budget: budget,
        deterministic: true,
    };
    (system, ledger)
}

#[test]
fn reopened_directory_store_supports_unlearning() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Fixture { m: 4, n: 2, r: 2, mode: StudentMode::Purge, data_seed: 5 };
    let (mut system, mut ledger) = {
        let store = CheckpointStore::open(dir.path()).unwrap();
        build(&fixture, &store)
    };
    let reqs = generate_requests(&system, RequestMix::uniform(), 12, 9).unwrap();
    let store = CheckpointStore::open(dir.path()).unwrap();
    for req in &reqs {
        let before = system.clone();
        unlearn(&mut system, req, &store, &mut ledger).unwrap();
        let verdict = verify_exactness(&before, req, &system).unwrap();
        assert!(verdict.pass, "request {}: {:?}", req.request_id, verdict.problems);
        assert_eq!(verdict.max_abs_diff, 0.0);
    }
    assert!(store.prune().unwrap() > 0);
    let again = CheckpointStore::open(dir.path()).unwrap();
    for (slot, gens) in again.generations() {
        assert_eq!(gens.len(), 1, "{slot:?} kept {gens:?}");
    }
}

#[test]
fn identical_inputs_give_identical_systems() {
    let fixture = Fixture { m: 3, n: 3, r: 1, mode: StudentMode::NaiveSisa, data_seed: 8 };
    let (a, la) = build(&fixture, &CheckpointStore::in_memory());
    let (b, lb) = build(&fixture, &CheckpointStore::in_memory());
    assert_eq!(a, b);
    assert_eq!(la.entries(), lb.entries());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_request_in_a_stream_is_exact(
        m in 2usize..5,
        n_pick in 0usize..4,
        r in 1usize..3,
        mode_pick in 0usize..3,
        seed in 0u64..1000,
    ) {
        let n = 1 + n_pick % m;
        let mode = [StudentMode::Purge, StudentMode::NaiveSisa, StudentMode::SingleTeacher][mode_pick];
        let fixture = Fixture { m, n, r, mode, data_seed: seed };
        let store = CheckpointStore::in_memory();
        let (mut system, mut ledger) = build(&fixture, &store);
        let reqs = generate_requests(&system, RequestMix::uniform(), 6, seed ^ 0x5a).unwrap();
        for req in &reqs {
            let before = system.clone();
            unlearn(&mut system, req, &store, &mut ledger).unwrap();
            let verdict = verify_exactness(&before, req, &system).unwrap();
            prop_assert!(verdict.pass, "request {:?}: {:?}", req, verdict.problems);
        }
    }
}
