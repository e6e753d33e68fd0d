use ockl::config::{BudgetConfig, CoresetMethod, LearnerSpec, RunConfig, StreamSource};
use ockl::datagen::{StreamConfig, StreamMode};
use ockl::learners::{Eviction, StrategyConfig, StrategyKind};
use ockl::metrics::{bwt, fwt};
use ockl::scheduler::{budget_prefix, execute};
use ockl::AccuracyMatrix;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn stream_config() -> impl Strategy<Value = StreamConfig> {
    (any::<u64>(), 3usize..12, 1usize..6, 0.0..=1.0f64, 20u32..200, 1u32..4, 2usize..8, 1usize..20, any::<bool>()).prop_map(
        |(seed, e, r, vf, horizon, upd, steps, ips, redundant)| StreamConfig {
            seed,
            n_entities: e,
            n_relations: r,
            variant_fraction: vf,
            horizon,
            updates_per_variant: upd,
            n_steps: steps,
            items_per_step: ips,
            mode: if redundant { StreamMode::Redundant } else { StreamMode::RedundancyFree },
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_streams_keep_their_contract(cfg in stream_config()) {
        let Ok((universe, stream)) = cfg.generate() else { return Ok(()); };
        let mut emitted = BTreeSet::new();
        let mut dates = Vec::new();
        for step in &stream.steps {
            dates.push(step.date);
            for k in &step.knowledge {
                prop_assert_eq!(k.token_count, ockl::tokenize(&k.text).len());
                emitted.insert(k.source.clone());
            }
            for q in &step.qa {
                prop_assert!(emitted.contains(&q.source));
                prop_assert!(!q.gold.is_empty());
            }
        }
        prop_assert!(dates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(emitted.len(), universe.versions().count());
        if cfg.mode == StreamMode::RedundancyFree {
            prop_assert_eq!(stream.knowledge().count(), emitted.len());
        }
    }

    #[test]
    fn generation_is_deterministic(cfg in stream_config()) {
        let a = cfg.generate().map(|(_, s)| s).ok();
        let b = cfg.generate().map(|(_, s)| s).ok();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn budget_prefix_is_the_longest_affordable_prefix(
        costs in prop::collection::vec(0.0..2.0f64, 0..30),
        budget in 0.0..20.0f64,
    ) {
        let k = budget_prefix(&costs, budget).unwrap();
        let spent: f64 = costs[..k].iter().sum();
        prop_assert!(spent <= budget);
        if k < costs.len() {
            prop_assert!(spent + costs[k] > budget);
        }
    }

    #[test]
    fn transfer_metrics_stay_in_unit_range(t in 2usize..12, values in prop::collection::vec(0.0..=1.0f64, 144)) {
        let mut m = AccuracyMatrix::new();
        for i in 1..=t {
            for j in 1..=t {
                m.set(i, j, values[(i - 1) * 12 + (j - 1)]).unwrap();
            }
        }
        let b = bwt(&m, t).unwrap();
        let f = fwt(&m, t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&b));
        prop_assert!((-1.0..=1.0).contains(&f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scheduler_conserves_tokens_and_is_monotone(
        seed in any::<u64>(),
        kind in 0usize..6,
        method in 0usize..4,
        ratio in 0.1..=1.0f64,
        budget in prop_oneof![Just(None), (0.0..0.3f64).prop_map(Some)],
        fact_memory in any::<bool>(),
    ) {
        let stream = StreamConfig { n_entities: 8, n_relations: 3, n_steps: 4, horizon: 80, ..StreamConfig::default() };
        let kind = if fact_memory { StrategyKind::Vanilla } else { StrategyKind::ALL[kind] };
        let mut strategy = StrategyConfig::of(kind);
        strategy.lowrank.rank = 2;
        let mut cfg = RunConfig {
            seed,
            stream: StreamSource::Generate(stream),
            learner: if fact_memory {
                LearnerSpec::FactMemory { capacity: Some(20), eviction: Eviction::Random }
            } else {
                LearnerSpec::default()
            },
            strategy,
            budget: budget.map_or(BudgetConfig::Unlimited, |seconds| BudgetConfig::PerStep { seconds }),
            kg_probes: 8,
            ..RunConfig::default()
        };
        cfg.coreset.method = [CoresetMethod::None, CoresetMethod::Random, CoresetMethod::Kcenter, CoresetMethod::ModelBased][method];
        if cfg.coreset.method != CoresetMethod::None {
            cfg.coreset.ratio = ratio;
        }
        let r = execute(&cfg).unwrap();
        prop_assert_eq!(r.records.len(), 4);
        for s in &r.steps {
            prop_assert!(s.conserves_tokens(), "{:?}", s);
            // Replays ride on top of the budget, which only gates arrivals.
            if let Some(b) = s.budget_s {
                let replay = cfg.cost_model().seconds(s.tokens_replayed);
                prop_assert!(s.time_s - replay <= b + 1e-12, "{:?}", s);
            }
        }
        for w in r.records.windows(2) {
            prop_assert!(w[1].tokens_trained >= w[0].tokens_trained);
            prop_assert!(w[1].train_time_s >= w[0].train_time_s);
        }
        prop_assert!(r.records.iter().all(|x| (0.0..=1.0).contains(&x.em)));
        prop_assert_eq!(r.totals.tokens_trained, r.steps.iter().map(|s| s.tokens_trained).sum::<u64>());
        prop_assert_eq!(r.totals.items_arrived, r.steps.iter().map(|s| s.items_arrived).sum::<usize>());
    }
}
