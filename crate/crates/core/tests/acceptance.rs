//! Acceptance suite. Runs every criterion in order and prints one line
//! each; exits non-zero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};
use rareval::baselines::{mc_estimate, run_cem, CemConfig, Discretizer, Grid};
use rareval::env::{
    rollout, Action, AdversaryAction, AdversarySampler, AgentAction, Environment, GamblersRuin, GridworldLava,
    Intersection2d, State,
};
use rareval::flow::{Flow, FlowConfig, Mixture1d};
use rareval::gp::{GpConfig, GpValueModel, KernelParams};
use rareval::harness::{run_experiment, ConvergenceConfig, EnvConfig, ExperimentConfig, IntersectionPreset, MethodConfig};
use rareval::oracle::{enumerate_is_expectation, exact_value_oracle, finite_horizon_value, zero_variance_sampler};
use rareval::report::{ConvergenceDetector, EstimatorReport, ReportSink};
use rareval::scalable::{frozen_policy_estimate, run_scalable_ape, ScalableConfig};
use rareval::tabular::{run_tabular_ape, TabularConfig};
use rareval::{seeded_rng, Result};

/// Easy intersection: 1e7 ground-truth Monte Carlo episodes, SE 7.7e-5.
const EASY_ORACLE: f64 = 0.063_516;
/// Hard intersection: 1e7 importance-sampled episodes under a fixed
/// skewed proposal (std x1.1, mean shifted 8% toward the box face),
/// SE 1.7e-8. Equal to the ground-truth rare frequency.
const HARD_ORACLE: f64 = 1.392_69e-5;
const HARD_ORACLE_SE: f64 = 1.7e-8;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// pinned tolerances
const ENUM_REL_TOL: f64 = 1e-12;
const ZV_REL_TOL: f64 = 1e-9;
const TABULAR_REL_TOL: f64 = 0.10;
const TABULAR_SPEEDUP: f64 = 0.2;
const GP_GRAD_TOL: f64 = 1e-4;
const GP_RMSE_TOL: f64 = 0.1;
const FLOW_ROUND_TRIP_TOL: f64 = 1e-6;
const FLOW_MASS_TOL: f64 = 1e-3;
const FLOW_KL_TOL: f64 = 0.05;
const FLOW_GRAD_TOL: f64 = 1e-3;
const EASY_REL_TOL: f64 = 0.20;
const EASY_RATE_FACTOR: f64 = 3.0;
const HARD_RATE_FACTOR: f64 = 100.0;
const HARD_SE_MULTIPLE: f64 = 3.0;
const FROZEN_EPISODES: u64 = 20_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome {
        pass: false,
        detail: format!("error: {e}"),
    });
    let took = start.elapsed();
    let pass = out.pass && took <= limit;
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} [{verdict}] {name}: {} ({:.1}s, limit {}s)",
        out.detail,
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn sink(method: &str, env: &str, seed: u64) -> ReportSink {
    ReportSink::new(method, env, seed, ConvergenceDetector::new(2000, 0.01))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Fixed two-action proposal indexed by position.
struct TableSampler(Vec<f64>);

impl TableSampler {
    fn probs(&self, s: &State) -> [f64; 2] {
        let p = self.0[s.coords[0] as usize % self.0.len()];
        [p, 1.0 - p]
    }
}

impl AdversarySampler for TableSampler {
    fn sample(
        &self,
        _env: &dyn Environment,
        s: &State,
        _a: &AgentAction,
        rng: &mut dyn RngCore,
    ) -> Result<(AdversaryAction, f64)> {
        let p = self.probs(s);
        let i = usize::from(rng.random::<f64>() >= p[0]);
        Ok((Action::Discrete(i), p[i]))
    }

    fn density(&self, _env: &dyn Environment, s: &State, _a: &AgentAction, e: &AdversaryAction) -> Result<f64> {
        Ok(match e {
            Action::Discrete(i) => self.probs(s)[*i],
            _ => 0.0,
        })
    }
}

fn unbiasedness() -> Result<Outcome> {
    let env = GamblersRuin::new(3, 0.3)?.with_max_steps(6);
    let truth = finite_horizon_value(&env, 6)?.value(&env, &env.initial_state());
    let samplers = [TableSampler(vec![0.5]), TableSampler(vec![0.9, 0.2, 0.7, 0.4]), TableSampler(vec![0.05, 0.95])];
    let mut worst: f64 = 0.0;
    for s in &samplers {
        let est = enumerate_is_expectation(&env, s)?;
        worst = worst.max((est - truth).abs() / truth);
    }
    Ok(Outcome {
        pass: worst < ENUM_REL_TOL,
        detail: format!("worst relative error {worst:.2e} (tol {ENUM_REL_TOL:e})"),
    })
}

fn zero_variance() -> Result<Outcome> {
    let env = GamblersRuin::new(5, 0.3)?;
    let values = exact_value_oracle(&env)?;
    let zv = zero_variance_sampler(&env, &values);
    let truth = env.closed_form(1);
    let mut rng = seeded_rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let t = rollout(&env, &zv, &mut rng)?;
        worst = worst.max((t.is_estimate() - truth).abs() / truth);
    }
    Ok(Outcome {
        pass: worst < ZV_REL_TOL,
        detail: format!("worst per-trajectory relative error {worst:.2e} over 1e4 rollouts"),
    })
}

fn tabular_efficiency() -> Result<Outcome> {
    let env = GridworldLava::standard();
    let truth = exact_value_oracle(&env)?.value(&env, &env.initial_state());
    let cfg = TabularConfig::default();
    let mut ape = Vec::new();
    let mut mc = Vec::new();
    for seed in SEEDS {
        ape.push(run_tabular_ape(&env, &cfg, seed, sink("ape", "grid", seed))?.summary());
        mc.push(mc_estimate(&env, 40_000, seed, sink("mc", "grid", seed))?.summary());
    }
    let worst = ape.iter().map(|r| (r.final_estimate - truth).abs() / truth).fold(0.0, f64::max);
    let conv = |rs: &[rareval::report::RunSummary]| {
        rs.iter().map(|r| r.transitions as f64).sum::<f64>() / rs.len() as f64
    };
    let (ape_t, mc_t) = (conv(&ape), conv(&mc));
    let (_, ape_sd) = mean_std(&ape.iter().map(|r| r.final_estimate).collect::<Vec<_>>());
    let (_, mc_sd) = mean_std(&mc.iter().map(|r| r.final_estimate).collect::<Vec<_>>());
    let pass = worst < TABULAR_REL_TOL && ape_t <= TABULAR_SPEEDUP * mc_t && ape_sd <= mc_sd;
    Ok(Outcome {
        pass,
        detail: format!(
            "oracle {truth:.4e}; worst APE error {:.1}%; mean transitions to convergence APE {ape_t:.0} vs MC {mc_t:.0} (ratio {:.3}); final std APE {ape_sd:.2e} vs MC {mc_sd:.2e}",
            100.0 * worst,
            ape_t / mc_t
        ),
    })
}

fn gp_correctness() -> Result<Outcome> {
    let mut rng = seeded_rng(4);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..20 {
        let inv: Vec<f64> = (0..2).map(|_| rng.random_range(0.3..5.0)).collect();
        let params = KernelParams::new(rng.random_range(0.2..1.5), &inv, rng.random_range(0.05..0.5))?;
        let mut m = GpValueModel::new(params, 64);
        for _ in 0..12 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.append(&x, rng.random_range(0.0..1.0))?;
        }
        let g = m.nll_gradient(1e-3)?;
        let base = m.params().to_log_vec();
        let mut fd = Vec::new();
        for i in 0..base.len() {
            let h = 1e-5;
            let at = |d: f64| -> Result<f64> {
                let mut p = base.clone();
                p[i] += d;
                let mut c = m.clone();
                c.set_params(KernelParams::from_log_vec(&p)?)?;
                c.penalized_nll(1e-3)
            };
            fd.push((at(h)? - at(-h)?) / (2.0 * h));
        }
        let num = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
        worst_grad = worst_grad.max(num / den);
    }

    let mut negative = 0;
    for _ in 0..10_000 {
        let inv: Vec<f64> = (0..2).map(|_| rng.random_range(0.3..5.0)).collect();
        let params = KernelParams::new(rng.random_range(0.2..1.5), &inv, rng.random_range(0.01..0.5))?;
        let mut m = GpValueModel::new(params, 16);
        for _ in 0..rng.random_range(1..10) {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.append(&x, rng.random_range(0.0..1.0))?;
        }
        let q = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        if !(m.predict(&q).1 >= 0.0) {
            negative += 1;
        }
    }

    let f = |x: f64| 0.5 + 0.35 * (2.0 * std::f64::consts::PI * x).sin();
    let cfg = GpConfig::default();
    let mut m = GpValueModel::from_config(&cfg, 1)?;
    let noise = rand_distr::Normal::new(0.0, 0.05).expect("valid normal");
    for _ in 0..30 {
        let x: f64 = rng.random_range(0.0..1.0);
        m.append(&[x], f(x) + rand_distr::Distribution::sample(&noise, &mut rng))?;
    }
    for _ in 0..500 {
        m.nll_step(cfg.learning_rate, cfg.l1)?;
    }
    let rmse = ((0..100).map(|i| (i as f64 + 0.5) / 100.0).map(|x| (m.predict_mean(&[x]) - f(x)).powi(2)).sum::<f64>()
        / 100.0)
        .sqrt();
    Ok(Outcome {
        pass: worst_grad < GP_GRAD_TOL && negative == 0 && rmse < GP_RMSE_TOL,
        detail: format!(
            "NLL gradient rel error {worst_grad:.2e} over 20 buffers; {negative} negative variances in 1e4 queries; 1-D RMSE {rmse:.3}"
        ),
    })
}

fn flow_correctness() -> Result<Outcome> {
    let cfg = FlowConfig::default();
    let mut rng = seeded_rng(5);
    let mut free = Flow::new(2, (vec![-1.0; 3], vec![1.0; 3]), None, &cfg, &mut seeded_rng(1))?;
    let p: Vec<f64> = free.params().iter().map(|_| rng.random_range(-0.4..0.4)).collect();
    free.set_params(p)?;
    let mut round_trip: f64 = 0.0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = free.inverse(&free.forward(&z, &c), &c);
        round_trip = z.iter().zip(&back).fold(round_trip, |w, (a, b)| w.max((a - b).abs()));
    }

    let target = Mixture1d(vec![(0.5, -2.0, 0.5), (0.5, 2.0, 0.5)]);
    let mut f = Flow::new(1, (vec![], vec![]), None, &cfg, &mut seeded_rng(1))?;
    let quad = |f: &Flow, lo: f64, hi: f64| -> (f64, f64) {
        let n = 16_000;
        let h = (hi - lo) / n as f64;
        let (mut mass, mut kl) = (0.0, 0.0);
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            let lq = f.log_prob(&[x], &[]);
            mass += lq.exp() * h;
            kl += lq.exp() * (lq - target.density(x).ln()) * h;
        }
        (mass, kl)
    };
    let (mass_before, _) = quad(&f, -10.0, 10.0);
    let mut train_rng = seeded_rng(101);
    for t in 0..500 {
        let lr = 0.02 * ((t + 1) as f64 / 50.0).min(1.0) * (1.0 - t as f64 / 500.0).max(0.02);
        f.kl_step(&target, &[], 256, lr, &mut train_rng)?;
    }
    let (mass_after, kl) = quad(&f, -12.0, 12.0);

    let zs = vec![(0..64).map(|_| rng.random_range(-2.5..2.5)).collect::<Vec<f64>>()];
    let mut g = Flow::new(1, (vec![], vec![]), None, &cfg, &mut seeded_rng(42))?;
    let p: Vec<f64> = g.params().iter().map(|_| rng.random_range(-0.2..0.2)).collect();
    g.set_params(p)?;
    let (_, grad) = g.kl_loss_grad(&target, &[], &zs)?;
    let h = 1e-6;
    let mut fd = Vec::with_capacity(g.num_params());
    for i in 0..g.num_params() {
        let shifted = |d: f64| -> Result<f64> {
            let mut p = g.params().to_vec();
            p[i] += d;
            let mut c = g.clone();
            c.set_params(p)?;
            Ok(c.kl_loss_grad(&target, &[], &zs)?.0)
        };
        fd.push((shifted(h)? - shifted(-h)?) / (2.0 * h));
    }
    let grad_err = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        / fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);

    let pass = round_trip < FLOW_ROUND_TRIP_TOL
        && (mass_before - 1.0).abs() < FLOW_MASS_TOL
        && (mass_after - 1.0).abs() < FLOW_MASS_TOL
        && kl < FLOW_KL_TOL
        && grad_err < FLOW_GRAD_TOL;
    Ok(Outcome {
        pass,
        detail: format!(
            "round trip {round_trip:.1e}; mass {mass_before:.5} before / {mass_after:.5} after; bimodal KL {kl:.4}; gradient rel error {grad_err:.1e}"
        ),
    })
}

fn scalable_easy() -> Result<Outcome> {
    let env = Intersection2d::easy();
    let cfg = ScalableConfig::default();
    let mut errors = Vec::new();
    let mut rates = Vec::new();
    for seed in SEEDS {
        let run = run_scalable_ape(&env, &cfg, seed, sink("ape_scalable", "easy", seed))?;
        errors.push((run.report.final_estimate - EASY_ORACLE) / EASY_ORACLE);
        rates.push(run.report.final_rare_rate);
    }
    let worst = errors.iter().map(|e| e.abs()).fold(0.0, f64::max);
    let min_rate = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let errs: Vec<String> = errors.iter().map(|e| format!("{:+.1}%", 100.0 * e)).collect();
    Ok(Outcome {
        pass: worst < EASY_REL_TOL && min_rate >= EASY_RATE_FACTOR * EASY_ORACLE,
        detail: format!(
            "oracle {EASY_ORACLE}; relative errors [{}] after {} steps; min rare rate {min_rate:.3} (need {:.3})",
            errs.join(", "),
            cfg.budget_steps,
            EASY_RATE_FACTOR * EASY_ORACLE
        ),
    })
}

fn scalable_hard() -> Result<Outcome> {
    let env = Intersection2d::hard();
    let cfg = ScalableConfig {
        warm_start: true,
        ..ScalableConfig::default()
    };
    let mc_std = (HARD_ORACLE * (1.0 - HARD_ORACLE)).sqrt();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in [1, 2] {
        let run = run_scalable_ape(&env, &cfg, seed, sink("ape_scalable", "hard", seed))?;
        let rate = run.report.final_rare_rate;
        let frozen = frozen_policy_estimate(&env, &run.flow, FROZEN_EPISODES, 1000 + seed)?;
        let se = (frozen.std_error.powi(2) + HARD_ORACLE_SE.powi(2)).sqrt();
        let z = (frozen.mean - HARD_ORACLE) / se;
        pass &= rate >= HARD_RATE_FACTOR * HARD_ORACLE && z.abs() <= HARD_SE_MULTIPLE && frozen.episode_std < mc_std;
        parts.push(format!(
            "seed {seed}: rate {rate:.3}, frozen {:.4e} ({z:+.2} SE), episode std {:.2e}",
            frozen.mean, frozen.episode_std
        ));
    }
    Ok(Outcome {
        pass,
        detail: format!("oracle {HARD_ORACLE:.4e}, MC episode std {mc_std:.2e}; {}", parts.join("; ")),
    })
}

fn intersection_grid() -> Discretizer {
    Discretizer {
        state: Grid::new(vec![-1.0; 2], vec![1.0; 2], vec![20; 2]).expect("valid grid"),
        action: Some(Grid::new(vec![-2.0; 2], vec![2.0; 2], vec![9; 2]).expect("valid grid")),
    }
}

fn cem_behaviour() -> Result<Outcome> {
    let inner = std::sync::Arc::new(Intersection2d::easy());
    let env = rareval::baselines::discretize_env(inner, intersection_grid())?;
    let cfg = CemConfig::default();
    let a = run_cem(&env, &cfg, 1, sink("cem", "easy", 1))?;
    let b = run_cem(&env, &cfg, 1, sink("cem", "easy", 1))?;
    let same = a.to_csv(false) == b.to_csv(false);
    let bias = (a.final_estimate - EASY_ORACLE) / EASY_ORACLE;
    Ok(Outcome {
        pass: same && a.final_rare_rate > EASY_ORACLE,
        detail: format!(
            "rare rate {:.3} vs ground truth {EASY_ORACLE:.3}; estimate {:.4e}, bias {:+.1}% (informational); deterministic rerun: {same}",
            a.final_rare_rate,
            a.final_estimate,
            100.0 * bias
        ),
    })
}

fn experiment(env: EnvConfig, method: MethodConfig, discretize: Option<Discretizer>) -> ExperimentConfig {
    ExperimentConfig {
        env,
        method,
        seeds: vec![7],
        output_dir: None::<PathBuf>,
        convergence: ConvergenceConfig::default(),
        discretize,
    }
}

fn determinism() -> Result<Outcome> {
    let gamblers = || EnvConfig::GamblersRuin {
        n: 5,
        p: 0.3,
        start: None,
        max_steps: None,
    };
    let grid = || EnvConfig::GridworldLava {
        width: 7,
        lava_start: 0,
        max_steps: None,
    };
    let inter = || EnvConfig::Intersection2d {
        preset: IntersectionPreset::Easy,
        max_steps: None,
    };
    let lander = || EnvConfig::Lander1d {
        crash_speed: 0.26,
        noise_std: 0.1,
        max_steps: None,
    };
    let lander_grid = || Discretizer {
        state: Grid::new(vec![0.0, -4.0], vec![2.0, 2.0], vec![20, 20]).expect("valid grid"),
        action: Some(Grid::new(vec![-1.0], vec![1.0], vec![7]).expect("valid grid")),
    };
    let mc = || MethodConfig::Mc { budget_episodes: 300 };
    let cem = || {
        MethodConfig::CemDiscrete(CemConfig {
            budget_steps: 3000,
            ..CemConfig::default()
        })
    };
    let ape = || {
        MethodConfig::ApeDiscrete(TabularConfig {
            budget_steps: 3000,
            ..TabularConfig::default()
        })
    };
    let scalable = || {
        MethodConfig::ApeScalable(ScalableConfig {
            budget_steps: 1500,
            pretrain_steps: 50,
            ..ScalableConfig::default()
        })
    };
    let mut cases = Vec::new();
    for (env, grid_for) in [
        (gamblers(), None),
        (grid(), None),
        (inter(), Some(intersection_grid())),
        (lander(), Some(lander_grid())),
    ] {
        cases.push(experiment(env.clone(), mc(), None));
        cases.push(experiment(env.clone(), cem(), grid_for.clone()));
        cases.push(experiment(env.clone(), ape(), grid_for.clone()));
        if grid_for.is_some() {
            cases.push(experiment(env, scalable(), None));
        }
    }
    let mut failed = Vec::new();
    for cfg in &cases {
        let csv = |r: &[EstimatorReport]| r[0].to_csv(false);
        let a = run_experiment(cfg)?;
        let b = run_experiment(cfg)?;
        if csv(&a.reports) != csv(&b.reports) {
            failed.push(format!("{}/{}", cfg.method.name(), a.reports[0].env));
        }
    }
    Ok(Outcome {
        pass: failed.is_empty(),
        detail: format!("{} method/env pairs rerun; mismatches: {:?}", cases.len(), failed),
    })
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        check(1, "exact unbiasedness", secs(1), unbiasedness),
        check(2, "zero-variance oracle", secs(5), zero_variance),
        check(3, "tabular sample efficiency", secs(600), tabular_efficiency),
        check(4, "GP correctness", secs(30), gp_correctness),
        check(5, "flow correctness", secs(120), flow_correctness),
        check(6, "scalable APE, easy instance", secs(1800), scalable_easy),
        check(7, "scalable APE, hard instance", secs(3600), scalable_hard),
        check(8, "CEM baseline behaviour", secs(600), cem_behaviour),
        check(9, "determinism", secs(600), determinism),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
