//! Goal-conditioned planning through the world model with the cross-entropy
//! method, and the goal-error metrics used to score plans.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::encoder::ReprSequence;
use crate::error::{shape_err, Error, Result};
use crate::lam::ModelBundle;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::worldgen::Episode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemCfg {
    pub samples: usize,
    pub elites: usize,
    pub iterations: usize,
    pub horizon: usize,
    pub init_std: f64,
    pub std_floor: f64,
    /// Candidates are clipped to `[-bound, bound]` per coordinate.
    pub bound: f64,
    /// Plan a single action repeated over the horizon.
    pub straight_line: bool,
}

impl Default for CemCfg {
    fn default() -> Self {
        Self::manip()
    }
}

impl CemCfg {
    pub fn manip() -> Self {
        Self {
            samples: 300,
            elites: 10,
            iterations: 15,
            horizon: 3,
            init_std: 1.0,
            std_floor: 0.01,
            bound: 1.0,
            straight_line: false,
        }
    }

    pub fn nav() -> Self {
        Self {
            samples: 120,
            elites: 10,
            iterations: 1,
            horizon: 8,
            straight_line: true,
            ..Self::manip()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "manip" => Ok(Self::manip()),
            "nav" => Ok(Self::nav()),
            other => Err(Error::Config(format!("unknown planner preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.samples {
            return Err(Error::Config(format!(
                "need 1 <= elites ({}) <= samples ({})",
                self.elites, self.samples
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("CEM needs at least one iteration".into()));
        }
        if !(self.init_std > 0.0 && self.std_floor >= 0.0 && self.bound > 0.0) {
            return Err(Error::Config("CEM std and bound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub elite_mean: f64,
    pub elite_min: f64,
    pub elite_max: f64,
    pub best: f64,
}

/// Outcome of a CEM search over flat parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CemOutcome {
    pub best: Vec<f64>,
    pub best_cost: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub iterations: Vec<IterStats>,
    pub refits: usize,
    pub first_iteration_min: f64,
    pub zero_cost: f64,
}

/// Minimize `cost` (evaluated on a batch of candidates) over `dim`
/// parameters. Each iteration samples all candidates before evaluating
/// any, adds the current mean and the previous elites to the pool, keeps the
/// `elites` cheapest and refits a diagonal Gaussian to them.
pub fn cem_optimize(
    dim: usize,
    cfg: &CemCfg,
    rng: &mut Rng,
    mut cost: impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
) -> Result<CemOutcome> {
    cfg.validate()?;
    let clip = |v: f64| v.clamp(-cfg.bound, cfg.bound);
    let mut mean = vec![0.0; dim];
    let mut std = vec![cfg.init_std; dim];
    let zero_cost = cost(&[vec![0.0; dim]])?[0];
    let mut best = vec![0.0; dim];
    let mut best_cost = zero_cost;
    let mut elites: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut first_iteration_min = f64::INFINITY;
    let mut refits = 0;

    for it in 0..cfg.iterations {
        let mut fresh: Vec<Vec<f64>> = (0..cfg.samples)
            .map(|_| {
                (0..dim)
                    .map(|j| clip(mean[j] + std[j] * rng.normal()))
                    .collect()
            })
            .collect();
        fresh.push(mean.iter().map(|&m| clip(m)).collect());
        let costs = cost(&fresh)?;
        if costs.len() != fresh.len() || costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("CEM cost at iteration {it}")));
        }
        if it == 0 {
            first_iteration_min = costs[..cfg.samples].iter().copied().fold(f64::INFINITY, f64::min);
        }
        let mut pool: Vec<(f64, Vec<f64>)> = costs.into_iter().zip(fresh).collect();
        pool.append(&mut elites);
        pool.sort_by(|a, b| a.0.total_cmp(&b.0));
        pool.truncate(cfg.elites);
        elites = pool;

        if elites[0].0 < best_cost {
            best_cost = elites[0].0;
            best = elites[0].1.clone();
        }
        let k = elites.len() as f64;
        for j in 0..dim {
            let m = elites.iter().map(|e| e.1[j]).sum::<f64>() / k;
            let var = elites.iter().map(|e| (e.1[j] - m).powi(2)).sum::<f64>() / k;
            mean[j] = m;
            std[j] = var.sqrt().max(cfg.std_floor);
        }
        refits += 1;
        iterations.push(IterStats {
            elite_mean: elites.iter().map(|e| e.0).sum::<f64>() / k,
            elite_min: elites[0].0,
            elite_max: elites[elites.len() - 1].0,
            best: best_cost,
        });
    }
    Ok(CemOutcome {
        best,
        best_cost,
        mean,
        std,
        iterations,
        refits,
        first_iteration_min,
        zero_cost,
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Costs `‖s_g − ŝ_{t+H}‖₂` for a batch of action sequences, unrolling
/// `ŝ_{i+1} = p(ŝ_{≤i}, c(a_i, ŝ_i))` from the observed `past` (last row is
/// `s_t`).
pub fn plan_costs(
    past: &[Vec<f64>],
    seqs: &[Vec<Vec<f64>>],
    goal: &[f64],
    bundle: &ModelBundle,
    ctl: &Controller,
) -> Result<Vec<f64>> {
    let r = bundle.repr_dim();
    if past.is_empty() || past.iter().any(|s| s.len() != r) || goal.len() != r {
        return Err(shape_err("plan_cost", "past states and goal must have repr dim"));
    }
    let n = seqs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let h = seqs[0].len();
    if seqs.iter().any(|s| s.len() != h) {
        return Err(shape_err("plan_cost", "action sequences differ in length"));
    }
    let w = bundle.window();
    // history[k] holds the k-th most recent state of every candidate.
    let mut history: Vec<Vec<Vec<f64>>> = (0..n).map(|_| past.to_vec()).collect();
    for i in 0..h {
        let mut ctx = Vec::with_capacity(n * r);
        let mut acts = Vec::with_capacity(n * ctl.action_dim);
        let mut windows = Vec::with_capacity(n * w * r);
        for (c, hist) in history.iter().enumerate() {
            if seqs[c][i].len() != ctl.action_dim {
                return Err(shape_err("plan_cost", "action dimension"));
            }
            ctx.extend_from_slice(hist.last().expect("non-empty history"));
            acts.extend_from_slice(&seqs[c][i]);
            let last = hist.len() - 1;
            windows.extend(crate::lam::window_of(hist, last, w));
        }
        let z = ctl.forward_batch(
            &Tensor::matrix(n, ctl.action_dim, acts)?,
            &Tensor::matrix(n, r, ctx)?,
        )?;
        let next = bundle.predict(&Tensor::matrix(n, w * r, windows)?, &z)?;
        for (c, hist) in history.iter_mut().enumerate() {
            hist.push(next.row(c).to_vec());
        }
    }
    Ok(history
        .iter()
        .map(|hist| l2(goal, hist.last().expect("non-empty history")))
        .collect())
}

pub fn plan_cost(
    past: &[Vec<f64>],
    actions: &[Vec<f64>],
    goal: &[f64],
    bundle: &ModelBundle,
    ctl: &Controller,
) -> Result<f64> {
    Ok(plan_costs(past, &[actions.to_vec()], goal, bundle, ctl)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub delta_xyz: f64,
    pub ate: f64,
    pub rpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub actions: Vec<Vec<f64>>,
    pub iterations: Vec<IterStats>,
    pub final_cost: f64,
    pub zero_cost: f64,
    pub refits: usize,
    pub metrics: Option<PlanMetrics>,
}

impl PlanResult {
    pub fn first_action(&self) -> Option<&[f64]> {
        self.actions.first().map(Vec::as_slice)
    }

    pub fn score(&mut self, gt: &[Vec<f64>]) -> Result<()> {
        self.metrics = Some(metrics_of(&self.actions, gt)?);
        Ok(())
    }
}

fn unflatten(flat: &[f64], cfg: &CemCfg, a: usize) -> Vec<Vec<f64>> {
    if cfg.straight_line {
        vec![flat.to_vec(); cfg.horizon]
    } else {
        flat.chunks(a).map(<[f64]>::to_vec).collect()
    }
}

pub fn cem_plan(
    past: &[Vec<f64>],
    goal: &[f64],
    cfg: &CemCfg,
    bundle: &ModelBundle,
    ctl: &Controller,
    rng: &mut Rng,
) -> Result<PlanResult> {
    let a = ctl.action_dim;
    if cfg.horizon == 0 {
        cfg.validate()?;
        let cost = plan_cost(past, &[], goal, bundle, ctl)?;
        return Ok(PlanResult {
            actions: Vec::new(),
            iterations: Vec::new(),
            final_cost: cost,
            zero_cost: cost,
            refits: 0,
            metrics: None,
        });
    }
    let dim = if cfg.straight_line { a } else { a * cfg.horizon };
    let out = cem_optimize(dim, cfg, rng, |cands| {
        let seqs: Vec<Vec<Vec<f64>>> = cands.iter().map(|c| unflatten(c, cfg, a)).collect();
        plan_costs(past, &seqs, goal, bundle, ctl)
    })?;
    Ok(PlanResult {
        actions: unflatten(&out.best, cfg, a),
        iterations: out.iterations,
        final_cost: out.best_cost,
        zero_cost: out.zero_cost,
        refits: out.refits,
        metrics: None,
    })
}

fn check_pair(plan: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<usize> {
    if plan.len() != gt.len() {
        return Err(shape_err(
            "plan metrics",
            format!("{} planned vs {} ground-truth steps", plan.len(), gt.len()),
        ));
    }
    let d = gt.first().map_or(0, Vec::len);
    if plan.iter().chain(gt).any(|a| a.len() != d) {
        return Err(shape_err("plan metrics", "action dimensions differ"));
    }
    Ok(d)
}

/// `‖Σ a_plan − Σ a_gt‖₁`.
pub fn delta_xyz(plan: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    let d = check_pair(plan, gt)?;
    Ok((0..d)
        .map(|j| {
            let p: f64 = plan.iter().map(|a| a[j]).sum();
            let g: f64 = gt.iter().map(|a| a[j]).sum();
            (p - g).abs()
        })
        .sum())
}

/// ATE and RPE between trajectories integrated from a shared origin. With
/// `H` steps, positions `p_1..p_H` are compared for ATE and the `H` step
/// displacements for RPE, both averaged over `H`.
pub fn traj_errors(plan: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<(f64, f64)> {
    let d = check_pair(plan, gt)?;
    let h = plan.len();
    if h == 0 {
        return Ok((0.0, 0.0));
    }
    let mut p = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut ate = 0.0;
    let mut rpe = 0.0;
    for (a, b) in plan.iter().zip(gt) {
        for j in 0..d {
            p[j] += a[j];
            q[j] += b[j];
        }
        ate += l2(&p, &q);
        rpe += l2(a, b);
    }
    Ok((ate / h as f64, rpe / h as f64))
}

/// One planning problem cut from a held-out episode: observed states up to
/// `s_t`, the goal `s_{t+H}` and the actions that actually led there.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTask {
    pub episode: usize,
    pub t0: usize,
    pub past: Vec<Vec<f64>>,
    pub goal: Vec<f64>,
    pub gt: Vec<Vec<f64>>,
}

/// Cut a task at `t0` from an encoded episode.
pub fn plan_task(
    index: usize,
    seq: &ReprSequence,
    ep: &Episode,
    t0: usize,
    horizon: usize,
    window: usize,
) -> Result<PlanTask> {
    if t0 + horizon >= seq.rows() || ep.actions.len() < t0 + horizon {
        return Err(Error::Config(format!(
            "plan task t0={t0} H={horizon} exceeds episode of {} frames",
            seq.rows()
        )));
    }
    let first = (t0 + 1).saturating_sub(window);
    Ok(PlanTask {
        episode: index,
        t0,
        past: (first..=t0).map(|i| seq.row(i).to_vec()).collect(),
        goal: seq.row(t0 + horizon).to_vec(),
        gt: ep.actions[t0..t0 + horizon].to_vec(),
    })
}

/// Uniform actions in `[-bound, bound]`, shaped like `gt`.
pub fn random_plan(gt: &[Vec<f64>], bound: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    gt.iter()
        .map(|a| a.iter().map(|_| rng.uniform_range(-bound, bound)).collect())
        .collect()
}

fn metrics_of(plan: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<PlanMetrics> {
    let (ate, rpe) = traj_errors(plan, gt)?;
    Ok(PlanMetrics {
        delta_xyz: delta_xyz(plan, gt)?,
        ate,
        rpe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub episode: usize,
    pub t0: usize,
    pub gt: Vec<Vec<f64>>,
    pub plan: PlanResult,
    pub random: PlanMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub episodes: usize,
    pub planned: PlanMetrics,
    pub random: PlanMetrics,
}

fn mean_metrics<'a>(ms: impl Iterator<Item = &'a PlanMetrics>) -> PlanMetrics {
    let (mut n, mut d, mut a, mut r) = (0usize, 0.0, 0.0, 0.0);
    for m in ms {
        n += 1;
        d += m.delta_xyz;
        a += m.ate;
        r += m.rpe;
    }
    let n = n.max(1) as f64;
    PlanMetrics {
        delta_xyz: d / n,
        ate: a / n,
        rpe: r / n,
    }
}

impl PlanSummary {
    pub fn of(plans: &[EpisodePlan]) -> Self {
        Self {
            episodes: plans.len(),
            planned: mean_metrics(plans.iter().filter_map(|p| p.plan.metrics.as_ref())),
            random: mean_metrics(plans.iter().map(|p| &p.random)),
        }
    }
}

/// Plan every episode once from a seeded start frame and score the plan and
/// a uniform random policy against the true actions. Episodes are solved in
/// parallel; each owns an rng stream keyed by its index.
pub fn plan_episodes(
    episodes: &[Episode],
    cfg: &CemCfg,
    bundle: &ModelBundle,
    ctl: &Controller,
    seed: u64,
) -> Result<Vec<EpisodePlan>> {
    cfg.validate()?;
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let seq = bundle.encoder.encode_episode(ep)?;
            let t = seq.rows();
            if t <= cfg.horizon {
                return Err(Error::Config(format!(
                    "horizon {} needs episodes longer than {t} frames",
                    cfg.horizon
                )));
            }
            let mut rng = Rng::new(seed, &format!("plan/episode/{i}"));
            let lo = (bundle.window() - 1).min(t - 1 - cfg.horizon);
            let t0 = lo + rng.below(t - cfg.horizon - lo);
            let task = plan_task(i, &seq, ep, t0, cfg.horizon, bundle.window())?;
            let mut plan = cem_plan(&task.past, &task.goal, cfg, bundle, ctl, &mut rng)?;
            plan.score(&task.gt)?;
            let random = metrics_of(&random_plan(&task.gt, cfg.bound, &mut rng), &task.gt)?;
            Ok(EpisodePlan {
                episode: i,
                t0,
                gt: task.gt,
                plan,
                random,
            })
        })
        .collect()
}
