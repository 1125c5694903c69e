mod common;

use seqret_core::corpus::{generate_synthetic, CandidatePool, Example, SyntheticGrammar};
use seqret_core::encoder::{TriEncoder, Vocabulary};
use seqret_core::optim::OptimizerKind;
use seqret_core::rl::{
    sample_group, train_rl, AdvantageMethod, Environment, Policy, RewardContext, RlConfig, Target,
};
use seqret_core::sft::{build_sft_dataset, pool_index, train_sft, SftConfig, SftInstance};
use seqret_core::util::seeded_rng;
use seqret_core::StructureConfig;

use common::*;

fn toy_pool() -> CandidatePool {
    CandidatePool::new(
        vec![
            Example::new(0, "how many dogs", "count ( find ( dog ) )"),
            Example::new(1, "is there a cat", "exists ( find ( cat ) )"),
            Example::new(2, "black things", "filter ( black , find ( thing ) )"),
            Example::new(3, "a mouse", "find ( mouse )"),
        ],
        StructureConfig::raw(3),
    )
    .unwrap()
}

fn toy_encoder(pool: &CandidatePool, seed: u64) -> TriEncoder {
    let queries = [Example::new(9, "how many black cats", "count ( filter ( black , find ( cat ) ) )")];
    let vocab = Vocabulary::from_corpus(pool.examples(), &queries);
    TriEncoder::new(vocab, 8, 0.2, 0.5, &mut seeded_rng(seed)).unwrap()
}

#[test]
fn single_instance_loss_goes_to_zero() {
    let pool = toy_pool();
    let mut tri = toy_encoder(&pool, 1);
    let data = vec![SftInstance {
        query: "how many black cats".into(),
        prefix: vec![2],
        positive: 0,
        hard_negatives: vec![1, 3],
    }];
    let cfg = SftConfig {
        k: 2,
        batch_size: 1,
        epochs: 200,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Adam,
        ..SftConfig::default()
    };
    let report = train_sft(&mut tri, &pool, &data, &cfg).unwrap();
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(first > 0.5, "initial loss {first}");
    assert!(last < 0.01, "final loss {last}");
}

#[test]
fn sft_is_deterministic() {
    let grammar = SyntheticGrammar::visual_reasoning();
    let (pool, queries) = generate_synthetic(&grammar, &StructureConfig::raw(4), 40, 8, 3).unwrap();
    let cfg = SftConfig {
        k: 2,
        batch_size: 8,
        epochs: 3,
        learning_rate: 0.01,
        optimizer: OptimizerKind::Adam,
        seed: 5,
        ..SftConfig::default()
    };
    let data = build_sft_dataset(&pool, &pool_index(&pool, Default::default()), &queries, &cfg).unwrap();
    assert_eq!(data.len(), queries.len() * 2);
    let run = || {
        let vocab = Vocabulary::from_corpus(pool.examples(), &queries);
        let mut tri = TriEncoder::new(vocab, 8, 0.1, 0.2, &mut seeded_rng(5)).unwrap();
        let report = train_sft(&mut tri, &pool, &data, &cfg).unwrap();
        (report, tri)
    };
    assert_eq!(run(), run());
}

fn rl_queries() -> Vec<Example> {
    vec![
        Example::new(10, "how many black dogs", "count ( filter ( black , find ( dog ) ) )"),
        Example::new(11, "is there a mouse", "exists ( find ( mouse ) )"),
    ]
}

#[test]
fn rl_with_zero_learning_rate_keeps_parameters() {
    let pool = toy_pool();
    let mut tri = toy_encoder(&pool, 2);
    let before = tri.clone();
    for method in [AdvantageMethod::Nb, AdvantageMethod::Remax, AdvantageMethod::Rloo, AdvantageMethod::Grpo] {
        let cfg = RlConfig {
            method,
            group_size: 4,
            batch_size: 2,
            epochs: 2,
            learning_rate: 0.0,
            k: 2,
            ..RlConfig::default()
        };
        let report = train_rl(&mut tri, &before, &pool, &rl_queries(), &Environment::Coverage, &cfg).unwrap();
        assert_eq!(report.epoch_mean_rewards.len(), 2);
        assert_eq!(tri, before, "{method} moved parameters");
    }
}

#[test]
fn rl_runs_every_method_deterministically() {
    let pool = toy_pool();
    for method in [AdvantageMethod::Nb, AdvantageMethod::Remax, AdvantageMethod::Rloo, AdvantageMethod::Grpo] {
        let run = || {
            let mut tri = toy_encoder(&pool, 4);
            let reference = tri.clone();
            let cfg = RlConfig {
                method,
                group_size: 4,
                batch_size: 1,
                epochs: 3,
                learning_rate: 0.01,
                optimizer: OptimizerKind::Adam,
                k: 2,
                seed: 8,
                ..RlConfig::default()
            };
            let env = Environment::Composer { threshold: 0.8 };
            let report = train_rl(&mut tri, &reference, &pool, &rl_queries(), &env, &cfg).unwrap();
            (report.epoch_mean_rewards, report.records, tri)
        };
        let (rewards, records, tri) = run();
        assert!(rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(records.iter().all(|r| r.method == method && r.loss.is_finite()));
        assert_eq!((rewards, records, tri), run(), "{method}");
    }
}

#[test]
fn full_pool_groups_are_permutations() {
    let pool = toy_pool();
    let tri = toy_encoder(&pool, 6);
    let enc = tri.encode_pool(&pool);
    let policy = Policy::new(&tri, &enc);
    let query = &rl_queries()[0];
    let target = Target::new(query.target.as_str(), pool.structure_config()).unwrap();
    let ctx = RewardContext {
        pool: &pool,
        env: &Environment::Coverage,
        target: &target,
    };
    let group = sample_group(
        policy,
        policy,
        &ctx,
        query,
        &[],
        6,
        pool.len(),
        AdvantageMethod::Grpo,
        &mut seeded_rng(0),
    )
    .unwrap();
    assert_eq!(group.trajectories.len(), 6);
    for t in &group.trajectories {
        let mut a = t.actions.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
        // Every trajectory covers the same union, so rewards agree.
        assert_eq!(t.reward, group.trajectories[0].reward);
        assert_eq!(t.logp_old, t.logp_ref);
    }
}

#[test]
fn rl_masks_the_query_pair() {
    let mut rng = seeded_rng(11);
    let mut pool_examples = random_pool(&mut rng, 3, 4, 3).examples().to_vec();
    let own = Example::new(99, "own pair", "f ( a , b )");
    pool_examples.push(own.clone());
    let pool = CandidatePool::new(pool_examples, StructureConfig::raw(3)).unwrap();
    let mut tri = small_encoder(&pool, &[], 4, 0.1, 3);
    let reference = tri.clone();
    let cfg = RlConfig {
        group_size: 4,
        epochs: 1,
        k: 3,
        ..RlConfig::default()
    };
    // With the own entry masked exactly three candidates remain.
    train_rl(&mut tri, &reference, &pool, std::slice::from_ref(&own), &Environment::Coverage, &cfg).unwrap();
    let too_many = RlConfig { k: 4, ..cfg };
    assert!(train_rl(&mut tri, &reference, &pool, &[own], &Environment::Coverage, &too_many).is_err());
}
