//! Continuous-space APE: a conditional flow proposes adversary actions, a
//! sparse GP tracks the value function, and both learn online from the
//! same importance-weighted transitions.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{
    finish_record, importance_weight, rollout, step, Action, ActionSpace, AdversaryAction, AdversarySampler,
    AgentAction, Environment, State, StateKind, TransitionRecord,
};
use crate::error::{Error, Result};
use crate::flow::{densify_and_train, online_step, DenseUpdate, Flow, FlowConfig};
use crate::gp::{GpConfig, GpValueModel};
use crate::report::{EstimatorReport, RareRateWindow, ReportSink, DEFAULT_RARE_WINDOW};
use crate::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalableConfig {
    pub budget_steps: u64,
    pub gp: GpConfig,
    pub flow: FlowConfig,
    /// Transitions between kernel-hyperparameter steps.
    pub kernel_interval: u64,
    /// Lower bound on `v(s)` when forming flow targets.
    pub value_floor: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
    /// Pretrain toward the environment's warm-start proposal when it has one.
    pub warm_start: bool,
    /// Flow training pauses while the windowed rare rate exceeds this.
    pub rare_rate_stop: f64,
    /// Episodes in the rare-rate window.
    pub rare_window: usize,
    pub train_flow: bool,
    pub flow_update: FlowUpdateMode,
    /// Mix between one-step TD targets (0) and importance-weighted returns
    /// (1). Positive values defer appends to the episode end.
    pub td_lambda: f64,
    /// Only every `append_stride`-th step of an episode (counting from the
    /// first) becomes a GP training pair, so the buffer spans more episodes.
    pub append_stride: usize,
}

/// When the flow is retrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowUpdateMode {
    /// Dense-reward pass over each rare episode once it ends.
    RareEpisode,
    /// One step per transition from that transition's own target.
    PerStep,
}

impl Default for ScalableConfig {
    fn default() -> Self {
        ScalableConfig {
            budget_steps: 30_000,
            gp: GpConfig::default(),
            flow: FlowConfig::default(),
            kernel_interval: 50,
            value_floor: 1e-3,
            pretrain_steps: 300,
            pretrain_batch: 256,
            pretrain_learning_rate: 0.01,
            warm_start: false,
            rare_rate_stop: 0.5,
            rare_window: DEFAULT_RARE_WINDOW,
            train_flow: true,
            flow_update: FlowUpdateMode::RareEpisode,
            td_lambda: 1.0,
            append_stride: 24,
        }
    }
}

impl ScalableConfig {
    pub fn validate(&self) -> Result<()> {
        self.gp.validate()?;
        self.flow.validate()?;
        if self.kernel_interval == 0 || self.rare_window == 0 || self.append_stride == 0 {
            return Err(Error::Usage(
                "kernel_interval, rare_window and append_stride must be positive".into(),
            ));
        }
        if !(self.value_floor > 0.0) {
            return Err(Error::Usage(format!("value_floor must be positive, got {}", self.value_floor)));
        }
        if !(0.0..=1.0).contains(&self.td_lambda) {
            return Err(Error::Usage(format!("td_lambda must lie in [0, 1], got {}", self.td_lambda)));
        }
        if self.pretrain_steps > 0 && (self.pretrain_batch == 0 || !(self.pretrain_learning_rate > 0.0)) {
            return Err(Error::Usage("pretraining needs a positive batch and learning rate".into()));
        }
        Ok(())
    }
}

/// The flow as an adversary proposal.
pub struct FlowSampler<'a>(pub &'a Flow);

impl AdversarySampler for FlowSampler<'_> {
    fn sample(
        &self,
        _env: &dyn Environment,
        s: &State,
        a_agent: &AgentAction,
        rng: &mut dyn RngCore,
    ) -> Result<(AdversaryAction, f64)> {
        let cond = self.0.embed(&a_agent.to_vec(), s);
        let (a, lp) = self.0.sample(&cond, rng)?;
        Ok((Action::Continuous(a), lp.exp()))
    }

    fn density(
        &self,
        _env: &dyn Environment,
        s: &State,
        a_agent: &AgentAction,
        a_adv: &AdversaryAction,
    ) -> Result<f64> {
        let a = a_adv
            .as_slice()
            .ok_or_else(|| Error::Domain("flow needs a continuous action".into()))?;
        let cond = self.0.embed(&a_agent.to_vec(), s);
        Ok(self.0.log_prob(a, &cond).exp())
    }
}

/// Std of the retargeting bump per action dimension: `bump_scale` times
/// the ground-truth std, or a quarter of the box width when unknown.
pub fn bump_std(env: &dyn Environment, bump_scale: f64) -> Result<Vec<f64>> {
    let base = match (env.adversary_std(), env.adversary_space()) {
        (Some(sd), _) => sd,
        (None, ActionSpace::Box { low, high }) => low.iter().zip(&high).map(|(l, h)| (h - l) / 4.0).collect(),
        (None, ActionSpace::Discrete(_)) => {
            return Err(Error::Usage(format!("{} has a discrete adversary", env.name())))
        }
    };
    Ok(base.iter().map(|s| s * bump_scale).collect())
}

/// Fits a fresh flow to the ground truth (or warm-start) proposal over
/// conditions drawn uniformly from the condition box.
pub fn pretrained_flow(env: &dyn Environment, cfg: &ScalableConfig, rng: &mut dyn RngCore) -> Result<Flow> {
    let mut flow = Flow::for_env(env, &cfg.flow, rng)?;
    if cfg.pretrain_steps == 0 {
        return Ok(flow);
    }
    let (lo, hi) = env.condition_bounds();
    let agent_dim = lo.len() - env.state_dim();
    let warm = cfg.warm_start;
    let density = |c: &[f64], a: &[f64]| {
        let raw: Vec<f64> = c
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(x, (l, h))| l + (x + 1.0) * 0.5 * (h - l))
            .collect();
        let agent = Action::Continuous(raw[..agent_dim].to_vec());
        let s = State::new(raw[agent_dim..].to_vec(), StateKind::Interior);
        let adv = Action::Continuous(a.to_vec());
        let gt = env.gt_density(&s, &agent, &adv);
        if warm {
            env.warm_start_density(&s, &agent, &adv).unwrap_or(gt)
        } else {
            gt
        }
    };
    let dim = flow.cond_dim();
    let mut conds = |r: &mut dyn RngCore| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    flow.pretrain(
        cfg.pretrain_steps,
        cfg.pretrain_batch,
        cfg.pretrain_learning_rate,
        rng,
        &mut conds,
        &density,
    )?;
    Ok(flow)
}

fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::Numerical(_) | Error::IllConditioned { .. })
}

fn append_counted(gp: &mut GpValueModel, x: &[f64], target: f64, sink: &mut ReportSink) -> Result<()> {
    match gp.append(x, target) {
        Err(e) if is_recoverable(&e) => {
            sink.skip_update();
            Ok(())
        }
        Err(e) => Err(e),
        Ok(_) => Ok(()),
    }
}

/// Importance-weighted lambda-returns for every step of a finished
/// episode: `G_t = rho_t (r_t + (1 - lambda) v(s_t+1) + lambda G_t+1)`.
pub fn lambda_targets(gp: &GpValueModel, episode: &[TransitionRecord], lambda: f64) -> Vec<(Vec<f64>, f64)> {
    let mut out = Vec::with_capacity(episode.len());
    let mut tail = 0.0;
    for rec in episode.iter().rev() {
        let boot = if rec.done { 0.0 } else { gp.value(&rec.s_next) };
        tail = rec.rho * (rec.reward + (1.0 - lambda) * boot + lambda * tail);
        out.push((rec.s.coords.clone(), tail));
    }
    out.reverse();
    out
}

/// Final state of a scalable run, kept for artifacts and frozen checks.
pub struct ScalableRun {
    pub report: EstimatorReport,
    pub flow: Flow,
    pub gp: GpValueModel,
}

/// Runs scalable APE for `cfg.budget_steps` transitions. The streamed
/// estimate is the GP mean at the initial state; a zero budget reports
/// the prior value 0.
pub fn run_scalable_ape(
    env: &dyn Environment,
    cfg: &ScalableConfig,
    seed: u64,
    mut sink: ReportSink,
) -> Result<ScalableRun> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed);
    let s0 = env.initial_state();
    if s0.is_terminal() {
        return Err(Error::Usage("initial state must be interior".into()));
    }
    let mut flow = pretrained_flow(env, cfg, &mut rng)?;
    let mut gp = GpValueModel::from_config(&cfg.gp, env.state_dim())?.with_anchor(&s0.coords);
    let bump = bump_std(env, cfg.flow.bump_scale)?;
    let mut window = RareRateWindow::new(cfg.rare_window);
    sink.set_initial_estimate(0.0);

    let mut n = 0u64;
    let mut kl_steps = 0usize;
    let mut flow_updates = 0u64;
    let (mut is_sum, mut weight_sum, mut episodes) = (0.0, 0.0, 0u64);
    'run: while n < cfg.budget_steps {
        let mut s = s0.clone();
        let mut episode: Vec<TransitionRecord> = Vec::new();
        for t in 0..env.max_steps() {
            let a_agent = env.agent_action(&s, &mut rng);
            let (a_adv, q) = FlowSampler(&flow).sample(env, &s, &a_agent, &mut rng)?;
            let rho = importance_weight(env, q, &s, &a_agent, &a_adv)?;
            let (s_next, r) = step(env, &s, &a_agent, &a_adv)?;
            let rec = finish_record(env, s.clone(), a_agent, a_adv, s_next, r, rho, q, t);
            n += 1;

            let done = rec.done;
            s = rec.s_next.clone();
            episode.push(rec);
            if cfg.td_lambda == 0.0 {
                if t % cfg.append_stride == 0 {
                    let rec = &episode[episode.len() - 1];
                    let target = gp.td_target(rec);
                    append_counted(&mut gp, &rec.s.coords, target, &mut sink)?;
                }
            } else if done {
                let targets = lambda_targets(&gp, &episode, cfg.td_lambda);
                for (x, target) in targets.into_iter().step_by(cfg.append_stride) {
                    append_counted(&mut gp, &x, target, &mut sink)?;
                }
            }
            let saturated = window.is_full() && window.rate() > cfg.rare_rate_stop;
            if cfg.train_flow && cfg.flow_update == FlowUpdateMode::PerStep && !saturated {
                let value = |st: &State| gp.value(st);
                let up = DenseUpdate {
                    env,
                    value: &value,
                    value_floor: cfg.value_floor,
                    bump_std: bump.clone(),
                    cfg: &cfg.flow,
                };
                match online_step(&mut flow, &episode[episode.len() - 1], &up, &mut rng) {
                    Ok(true) => kl_steps += 1,
                    Ok(false) => {}
                    Err(e) if is_recoverable(&e) => sink.skip_update(),
                    Err(e) => return Err(e),
                }
            }
            if n % cfg.kernel_interval == 0 && gp.appending() && gp.len() >= 2 {
                match gp.nll_step(cfg.gp.learning_rate, cfg.gp.l1) {
                    Err(e) if is_recoverable(&e) => sink.skip_update(),
                    Err(e) => return Err(e),
                    Ok(_) => {}
                }
            }

            if done {
                let rare = episode.last().is_some_and(|r| r.reward > 0.0);
                let lr: f64 = episode.iter().map(|r| r.rho).product();
                let ret: f64 = episode.iter().map(|r| r.reward).sum();
                is_sum += lr * ret;
                weight_sum += lr;
                episodes += 1;
                sink.end_episode(rare);
                window.push(rare);
                let saturated = window.is_full() && window.rate() > cfg.rare_rate_stop;
                if cfg.train_flow && cfg.flow_update == FlowUpdateMode::RareEpisode && rare && !saturated {
                    let value = |st: &State| gp.value(st);
                    let up = DenseUpdate {
                        env,
                        value: &value,
                        value_floor: cfg.value_floor,
                        bump_std: bump.clone(),
                        cfg: &cfg.flow,
                    };
                    match densify_and_train(&mut flow, &episode, &up, &mut rng) {
                        Ok(k) => {
                            kl_steps += k;
                            flow_updates += 1;
                        }
                        Err(e) if is_recoverable(&e) => sink.skip_update(),
                        Err(e) => return Err(e),
                    }
                }
            }
            sink.record(n, gp.value(&s0));
            if done {
                break;
            }
            if n >= cfg.budget_steps {
                break 'run;
            }
        }
    }

    if episodes > 0 {
        sink.diagnostic("is_estimate", is_sum / episodes as f64);
        sink.diagnostic("snis_estimate", if weight_sum > 0.0 { is_sum / weight_sum } else { 0.0 });
    }
    sink.diagnostic("flow_updates", flow_updates as f64);
    sink.diagnostic("kl_steps", kl_steps as f64);
    sink.diagnostic("gp_size", gp.len() as f64);
    sink.diagnostic("gp_skipped_appends", gp.skipped_appends() as f64);
    sink.diagnostic("gp_noise", gp.params().noise());
    sink.diagnostic("gp_scale", gp.params().scale());
    for (j, w) in gp.params().inv_lengthscales().iter().enumerate() {
        sink.diagnostic(&format!("gp_inv_lengthscale_{j}"), *w);
    }
    Ok(ScalableRun {
        report: sink.finish(),
        flow,
        gp,
    })
}

/// Plain importance-sampling estimate under a fixed flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Std of the per-episode estimate `(prod rho)(sum r)`.
    pub episode_std: f64,
    pub rare_rate: f64,
    pub episodes: u64,
}

pub fn frozen_policy_estimate(env: &dyn Environment, flow: &Flow, episodes: u64, seed: u64) -> Result<FrozenEstimate> {
    if episodes == 0 {
        return Err(Error::Usage("frozen estimate needs at least one episode".into()));
    }
    let mut rng = seeded_rng(seed);
    let sampler = FlowSampler(flow);
    let (mut sum, mut sq, mut rare) = (0.0, 0.0, 0u64);
    for _ in 0..episodes {
        let traj = rollout(env, &sampler, &mut rng)?;
        let x = traj.is_estimate();
        sum += x;
        sq += x * x;
        rare += traj.is_rare() as u64;
    }
    let m = episodes as f64;
    let mean = sum / m;
    let var = if episodes > 1 { ((sq - m * mean * mean) / (m - 1.0)).max(0.0) } else { 0.0 };
    Ok(FrozenEstimate {
        mean,
        std_error: (var / m).sqrt(),
        episode_std: var.sqrt(),
        rare_rate: rare as f64 / m,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Intersection2d;
    use crate::report::ConvergenceDetector;

    fn small() -> ScalableConfig {
        ScalableConfig {
            budget_steps: 200,
            pretrain_steps: 20,
            pretrain_batch: 32,
            gp: GpConfig {
                capacity: 64,
                ..GpConfig::default()
            },
            ..ScalableConfig::default()
        }
    }

    fn sink() -> ReportSink {
        ReportSink::new("scalable", "intersection", 0, ConvergenceDetector::new(2000, 0.01))
    }

    #[test]
    fn zero_budget_reports_prior() {
        let env = Intersection2d::easy();
        let cfg = ScalableConfig {
            budget_steps: 0,
            ..small()
        };
        let run = run_scalable_ape(&env, &cfg, 1, sink()).unwrap();
        assert_eq!(run.report.final_estimate, 0.0);
        assert!(run.report.rows.is_empty());
    }

    #[test]
    fn short_run_streams_bounded_estimates() {
        let env = Intersection2d::easy();
        let run = run_scalable_ape(&env, &small(), 3, sink()).unwrap();
        assert_eq!(run.report.rows.len(), 200);
        assert!(run.report.rows.iter().all(|r| (0.0..=1.0).contains(&r.estimate)));
    }

    #[test]
    fn bump_std_scales_ground_truth() {
        let env = Intersection2d::easy();
        assert_eq!(bump_std(&env, 0.1).unwrap(), vec![0.05, 0.05]);
    }
}
