use proptest::prelude::*;
use rareval::env::{Action, Intersection2d, Lander1d, State, StateKind, TransitionRecord};
use rareval::gp::{GpConfig, GpValueModel};
use rareval::report::{ConvergenceDetector, ReportSink};
use rareval::scalable::{
    frozen_policy_estimate, lambda_targets, pretrained_flow, run_scalable_ape, FlowUpdateMode, ScalableConfig,
};
use rareval::{seeded_rng, Error};

/// Ten-million-episode Monte Carlo value of the easy intersection.
const EASY_ORACLE: f64 = 0.063_516;

fn small(budget: u64) -> ScalableConfig {
    ScalableConfig {
        budget_steps: budget,
        pretrain_steps: 30,
        pretrain_batch: 64,
        gp: GpConfig {
            capacity: 64,
            ..GpConfig::default()
        },
        ..ScalableConfig::default()
    }
}

fn sink(seed: u64) -> ReportSink {
    ReportSink::new("ape_scalable", "test", seed, ConvergenceDetector::new(2000, 0.01))
}

fn record(s: State, s_next: State, reward: f64, rho: f64) -> TransitionRecord {
    let done = s_next.is_terminal();
    TransitionRecord {
        s,
        a_agent: Action::Continuous(vec![0.05]),
        a_adv: Action::Continuous(vec![0.0, 0.0]),
        s_next,
        reward,
        rho,
        sampler_density: 0.5,
        done,
    }
}

#[test]
fn full_returns_are_weighted_tails() {
    let env = Intersection2d::easy();
    let p = |x: f64| env.state(x, 0.5);
    let hit = State::new(vec![0.0, 0.0], StateKind::RareTerminal);
    let ep = [record(p(0.9), p(0.8), 0.0, 0.5), record(p(0.8), p(0.7), 0.0, 2.0), record(p(0.7), hit, 1.0, 0.25)];
    let gp = GpValueModel::from_config(&GpConfig::default(), 2).unwrap();
    let targets: Vec<f64> = lambda_targets(&gp, &ep, 1.0).into_iter().map(|(_, y)| y).collect();
    assert_eq!(targets, vec![0.25, 0.5, 0.25]);
    // with an empty GP the one-step targets only see the final reward
    let td: Vec<f64> = lambda_targets(&gp, &ep, 0.0).into_iter().map(|(_, y)| y).collect();
    assert_eq!(td, vec![0.0, 0.0, 0.25]);
}

#[test]
fn same_seed_same_run() {
    let env = Intersection2d::easy();
    let cfg = small(1500);
    let a = run_scalable_ape(&env, &cfg, 3, sink(3)).unwrap();
    let b = run_scalable_ape(&env, &cfg, 3, sink(3)).unwrap();
    let c = run_scalable_ape(&env, &cfg, 4, sink(4)).unwrap();
    assert_eq!(a.report.to_csv(false), b.report.to_csv(false));
    assert_eq!(a.flow.params(), b.flow.params());
    assert_ne!(a.report.to_csv(false), c.report.to_csv(false));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn estimates_stay_in_the_unit_interval(seed in 0u64..1000, per_step in any::<bool>()) {
        let env = Lander1d::new(0.26, 0.1).unwrap();
        let cfg = ScalableConfig {
            flow_update: if per_step { FlowUpdateMode::PerStep } else { FlowUpdateMode::RareEpisode },
            ..small(600)
        };
        let run = run_scalable_ape(&env, &cfg, seed, sink(seed)).unwrap();
        prop_assert_eq!(run.report.rows.len(), 600);
        for r in &run.report.rows {
            prop_assert!((0.0..=1.0).contains(&r.estimate) && r.estimate.is_finite());
        }
    }
}

#[test]
fn per_step_mode_moves_the_flow() {
    let env = Intersection2d::easy();
    let cfg = ScalableConfig {
        flow_update: FlowUpdateMode::PerStep,
        ..small(400)
    };
    let start = pretrained_flow(&env, &cfg, &mut seeded_rng(8)).unwrap();
    let run = run_scalable_ape(&env, &cfg, 8, sink(8)).unwrap();
    assert_ne!(start.params(), run.flow.params());
    assert!(run.report.diagnostics["kl_steps"] > 0.0);
}

#[test]
fn frozen_flow_alone_leaves_the_flow_untouched() {
    let env = Intersection2d::easy();
    let cfg = ScalableConfig {
        train_flow: false,
        ..small(400)
    };
    let start = pretrained_flow(&env, &cfg, &mut seeded_rng(2)).unwrap();
    let run = run_scalable_ape(&env, &cfg, 2, sink(2)).unwrap();
    assert_eq!(start.params(), run.flow.params());
}

#[test]
fn pretrained_flow_gives_an_unbiased_frozen_estimate() {
    let env = Intersection2d::easy();
    let cfg = ScalableConfig::default();
    let flow = pretrained_flow(&env, &cfg, &mut seeded_rng(1)).unwrap();
    let est = frozen_policy_estimate(&env, &flow, 4000, 5).unwrap();
    assert!(
        (est.mean - EASY_ORACLE).abs() < 4.0 * est.std_error,
        "{} +- {} vs {EASY_ORACLE}",
        est.mean,
        est.std_error
    );
}

#[test]
fn bad_settings_are_rejected() {
    let env = Intersection2d::easy();
    for cfg in [
        ScalableConfig {
            td_lambda: 1.5,
            ..small(10)
        },
        ScalableConfig {
            append_stride: 0,
            ..small(10)
        },
        ScalableConfig {
            kernel_interval: 0,
            ..small(10)
        },
    ] {
        assert!(matches!(run_scalable_ape(&env, &cfg, 0, sink(0)), Err(Error::Usage(_))));
    }
}

#[test]
fn discrete_adversaries_are_rejected() {
    let env = rareval::env::GamblersRuin::new(3, 0.3).unwrap();
    assert!(run_scalable_ape(&env, &small(10), 0, sink(0)).is_err());
}
