use std::collections::BTreeSet;

use poflsc_core::fedavg::{aggregate_sync, apply_async, run_global_round, StalenessDecay, TrainingContext};
use poflsc_core::learner::{shard_dataset, synth_dataset, Architecture, Dataset, GradientUpdate, ModelParams, Shard};
use poflsc_core::pool::{split_merge, weighted_mean, Partnership};
use poflsc_core::subchain::{Phase, Subchain};
use poflsc_core::verification::{audit_replay, AuditOutcome};
use poflsc_core::{Error, MinerId, SubchainId};
use proptest::prelude::*;

fn arch(dim: usize) -> Architecture {
    // Logistic with two classes has 2 * (inputs + 1) parameters.
    Architecture::Logistic { inputs: dim / 2 - 1, classes: 2 }
}

fn update(miner: u32, delta: Vec<f64>, samples: usize) -> GradientUpdate {
    GradientUpdate { miner: MinerId(miner), delta, samples_used: samples, round: 0 }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn identical_deltas_equal_one_delta(p in vector(6), d in vector(6), k in 1usize..12, samples in 1usize..50) {
        let params = ModelParams { arch: arch(6), values: p.clone() };
        let ups: Vec<_> = (0..k as u32).map(|m| update(m, d.clone(), samples)).collect();
        let out = aggregate_sync(&params, &ups).unwrap();
        for i in 0..6 {
            prop_assert!(close(out.values[i], p[i] + d[i]));
        }
    }

    #[test]
    fn weighted_mean_matches_arithmetic(p in vector(6), ds in prop::collection::vec((vector(6), 1usize..40), 1..6)) {
        let params = ModelParams { arch: arch(6), values: p.clone() };
        let ups: Vec<_> = ds.iter().enumerate().map(|(m, (d, s))| update(m as u32, d.clone(), *s)).collect();
        let total: usize = ds.iter().map(|x| x.1).sum();
        let out = aggregate_sync(&params, &ups).unwrap();
        for i in 0..6 {
            let direct = p[i] + ds.iter().map(|(d, s)| *s as f64 / total as f64 * d[i]).sum::<f64>();
            prop_assert!(close(out.values[i], direct));
        }
    }

    #[test]
    fn fresh_async_equals_single_sync(p in vector(6), d in vector(6), samples in 0usize..50, round in 0u64..100) {
        let params = ModelParams { arch: arch(6), values: p };
        let mut u = update(3, d, samples);
        u.round = round;
        prop_assert_eq!(apply_async(&params, &u, round, StalenessDecay::Inverse).unwrap(), aggregate_sync(&params, &[u]).unwrap());
    }

    #[test]
    fn sync_is_order_independent(p in vector(6), ds in prop::collection::vec((vector(6), 1usize..40), 1..6)) {
        let params = ModelParams { arch: arch(6), values: p };
        let ups: Vec<_> = ds.iter().enumerate().map(|(m, (d, s))| update(m as u32, d.clone(), *s)).collect();
        let mut reversed = ups.clone();
        reversed.reverse();
        prop_assert_eq!(aggregate_sync(&params, &ups).unwrap(), aggregate_sync(&params, &reversed).unwrap());
    }
}

#[test]
fn stale_updates_are_discounted() {
    let p = ModelParams { arch: arch(4), values: vec![0.0; 4] };
    let u = update(0, vec![4.0, 8.0, -4.0, 1.0], 1);
    let out = apply_async(&p, &u, 3, StalenessDecay::Inverse).unwrap();
    assert_eq!(out.values, vec![1.0, 2.0, -1.0, 0.25]);
}

#[test]
fn merge_weights_follow_member_counts() {
    let a = ModelParams { arch: arch(4), values: vec![1.0, 0.0, 10.0, -1.0] };
    let b = ModelParams { arch: arch(4), values: vec![0.0, 1.0, 20.0, -2.0] };
    let c = ModelParams { arch: arch(4), values: vec![0.0, 0.0, 30.0, 5.0] };
    let out = weighted_mean(&[(3, &a), (5, &b), (2, &c)]).unwrap();
    for k in 0..4 {
        let direct = 0.3 * a.values[k] + 0.5 * b.values[k] + 0.2 * c.values[k];
        assert!(close(out.values[k], direct));
    }

    let sub = |id: u32, members: &[u32], m: &ModelParams| {
        let members: BTreeSet<MinerId> = members.iter().map(|&i| MinerId(i)).collect();
        let mut s = Subchain::new(SubchainId(id), members, MinerId(0), [0u8; 32]);
        s.start_training(m.clone());
        s
    };
    let subs = vec![sub(0, &[0, 1, 2], &a), sub(1, &[3, 4, 5, 6, 7], &b), sub(2, &[8, 9], &c), sub(3, &[10, 11, 12], &a)];
    let p = Partnership {
        pools: [SubchainId(0), SubchainId(1), SubchainId(2)].into_iter().collect(),
        managers: [MinerId(0), MinerId(3), MinerId(8)].into_iter().collect(),
    };
    let out = split_merge(subs, &[p], 10, |m| *m.iter().next().unwrap()).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].id, SubchainId(3));
    let merged = &out[1];
    assert_eq!(merged.id, SubchainId(10));
    assert_eq!(merged.members.len(), 10);
    assert_eq!(merged.model.as_ref().unwrap().values, out_values(&a, &b, &c));
}

fn out_values(a: &ModelParams, b: &ModelParams, c: &ModelParams) -> Vec<f64> {
    weighted_mean(&[(3, a), (5, b), (2, c)]).unwrap().values
}

struct Setup {
    dataset: Dataset,
    shards: Vec<Shard>,
}

fn setup() -> Setup {
    let dataset = synth_dataset(3, 40, 5, 2.0, 8).unwrap();
    let shards = shard_dataset(&dataset, 6, 10, 8).unwrap();
    Setup { dataset, shards }
}

fn ctx(s: &Setup) -> TrainingContext<'_> {
    TrainingContext {
        dataset: &s.dataset,
        shards: &s.shards,
        local_epochs: 2,
        learning_rate: 0.1,
        decay: StalenessDecay::Inverse,
        master_seed: 17,
    }
}

/// Runs two core rounds then three asynchronous rounds; `perturb` names the
/// round whose first update gets one component moved by one ulp.
fn history(s: &Setup, perturb: Option<(u64, usize)>) -> Subchain {
    let members: BTreeSet<MinerId> = (0..6).map(MinerId).collect();
    let mut sub = Subchain::new(SubchainId(0), members, MinerId(0), [0u8; 32]);
    sub.start_training(ModelParams::init(Architecture::Mlp { inputs: 5, hidden: 4, classes: 3 }, 2));
    let c = ctx(s);
    for round in 0..5u64 {
        if round == 2 {
            sub.advance_to(Phase::Secondary);
        }
        let contributors: Vec<MinerId> = [3, 0, 5, 1].iter().map(|&i| MinerId(i)).collect();
        let mut first = true;
        let mut hook = |u: &mut GradientUpdate| {
            if let Some((r, k)) = perturb {
                if r == round && first {
                    u.delta[k] = u.delta[k].next_up();
                }
            }
            first = false;
        };
        run_global_round(&mut sub, &contributors, round, &c, Some(&mut hook)).unwrap();
    }
    sub
}

#[test]
fn untouched_history_replays() {
    let s = setup();
    let sub = history(&s, None);
    assert_eq!(sub.records.len(), 5);
    let outcome = audit_replay(sub.genesis.as_ref().unwrap(), &sub.records, &s.dataset, &s.shards).unwrap();
    assert_eq!(outcome, AuditOutcome::Pass { rounds: 5 });
    assert_eq!(sub.records.last().unwrap().post_hash, sub.model_hash());
}

#[test]
fn one_ulp_fails_at_the_perturbed_round() {
    let s = setup();
    let dim = Architecture::Mlp { inputs: 5, hidden: 4, classes: 3 }.dim();
    for round in 0..5u64 {
        for k in [0, dim / 2, dim - 1] {
            let sub = history(&s, Some((round, k)));
            let outcome = audit_replay(sub.genesis.as_ref().unwrap(), &sub.records, &s.dataset, &s.shards).unwrap();
            assert_eq!(outcome, AuditOutcome::Fail { round }, "component {k}");
        }
    }
}

#[test]
fn tampered_seed_fails_and_missing_seed_errors() {
    let s = setup();
    let sub = history(&s, None);
    let genesis = sub.genesis.as_ref().unwrap();
    let mut records = sub.records.clone();
    *records[3].seeds_used.get_mut(&MinerId(5)).unwrap() ^= 1 << 40;
    assert_eq!(audit_replay(genesis, &records, &s.dataset, &s.shards).unwrap(), AuditOutcome::Fail { round: 3 });

    let mut records = sub.records.clone();
    records[1].seeds_used.remove(&MinerId(0));
    assert!(matches!(
        audit_replay(genesis, &records, &s.dataset, &s.shards),
        Err(Error::MissingSeeds { round: 1, miner: MinerId(0) })
    ));
}

#[test]
fn round_errors_and_activations() {
    let s = setup();
    let members: BTreeSet<MinerId> = (0..6).map(MinerId).collect();
    let mut sub = Subchain::new(SubchainId(4), members, MinerId(2), [0u8; 32]);
    assert!(run_global_round(&mut sub, &[MinerId(0)], 0, &ctx(&s), None).is_err());
    sub.start_training(ModelParams::zeros(Architecture::Logistic { inputs: 5, classes: 3 }));
    assert_eq!(run_global_round(&mut sub, &[], 0, &ctx(&s), None), Err(Error::NoContributors(SubchainId(4))));
    let all: Vec<MinerId> = (0..6).map(MinerId).collect();
    run_global_round(&mut sub, &all, 0, &ctx(&s), None).unwrap();
    assert_eq!(sub.pending().len(), 6);
}
