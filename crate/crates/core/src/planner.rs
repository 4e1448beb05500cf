//! View-sequence policies: fixed uniform plans, a greedy hole heuristic, a
//! linear actor-critic and a linear double-Q learner.
//!
//! Both learners act on [`ViewFeatures`], a handcrafted summary of the
//! episode state. Actions are one-based view indices.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::LearnerConfig;
use crate::error::{Error, Result};
use crate::inpaint::InpainterKind;
use crate::mdp::{EnvSettings, Environment, EpisodeInput, GroundTruth, Mode, Scenario, TraceRecord};
use crate::volume::project_depth;

/// Every this-many hole pixel of a view is ray cast for the guidance depth
/// feature.
pub const GUIDANCE_STRIDE: usize = 32;

/// Per-view channels of [`ViewFeatures`].
const CHANNELS: usize = 4;

/// Length of the critic input built by [`ViewFeatures::pooled`].
pub const POOLED_DIM: usize = 6;

/// State summary. For each action view: its hole count over `area0`, a
/// visited flag, the mean guidance depth over its holes divided by the far
/// plane, and its hole count over its own count at reset. Then the step
/// count over the step cap. All entries lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFeatures {
    values: Vec<f64>,
}

impl ViewFeatures {
    pub fn from_parts(holes: &[f64], visited: &[bool], guidance_depth: &[f64], remaining: &[f64], step: f64) -> Result<Self> {
        let n = holes.len();
        if n == 0 || visited.len() != n || guidance_depth.len() != n || remaining.len() != n {
            return Err(Error::InvalidInput("feature channels differ in length".into()));
        }
        let mut values = Vec::with_capacity(CHANNELS * n + 1);
        values.extend_from_slice(holes);
        values.extend(visited.iter().map(|&v| if v { 1.0 } else { 0.0 }));
        values.extend_from_slice(guidance_depth);
        values.extend_from_slice(remaining);
        values.push(step);
        if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::OutOfRange("features must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    /// Features of the current state of `env`.
    pub fn observe(env: &mut Environment) -> Result<Self> {
        let n = env.settings().num_actions();
        let area0 = env.area0().max(1) as f64;
        let counts = env.hole_counts();
        let holes: Vec<f64> = counts.iter().map(|&h| h as f64 / area0).collect();
        let remaining: Vec<f64> = counts
            .iter()
            .zip(env.initial_hole_counts())
            .map(|(&h, &h0)| if h0 == 0 { 0.0 } else { h as f64 / h0 as f64 })
            .collect();
        let visited = env.visited().to_vec();
        let settings = env.settings().clone();
        let far = settings.camera.far;
        let mut depth = vec![0.0; n];
        if !env.is_done() {
            let vol = env.completed_volume()?;
            for (a, d) in depth.iter_mut().enumerate() {
                let pixels: Vec<usize> = env.hole_pixels(a + 1)?.into_iter().step_by(GUIDANCE_STRIDE).collect();
                if pixels.is_empty() {
                    continue;
                }
                let pose = env.pose(a + 1)?;
                let depths = project_depth(&vol, &pose, &settings.camera, &pixels);
                let mean = depths.iter().sum::<f64>() / depths.len() as f64;
                *d = (mean / far).clamp(0.0, 1.0);
            }
        }
        let step = (env.step_index() as f64 / settings.episode.max_steps as f64).min(1.0);
        Self::from_parts(&holes, &visited, &depth, &remaining, step)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn num_actions(&self) -> usize {
        (self.values.len() - 1) / CHANNELS
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.num_actions();
        &self.values[c * n..(c + 1) * n]
    }

    /// Hole count of each view over `area0`.
    pub fn holes(&self) -> &[f64] {
        self.channel(0)
    }

    /// Critic input: the total hole share `Area^h / area0`, the largest
    /// remaining share of any view, the visited share, the mean guidance
    /// depth, the step share and a constant 1.
    pub fn pooled(&self) -> [f64; POOLED_DIM] {
        let n = self.num_actions() as f64;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / n;
        [
            self.holes().iter().sum::<f64>().min(1.0),
            self.channel(3).iter().copied().fold(0.0, f64::max),
            mean(self.channel(1)),
            mean(self.channel(2)),
            self.values[self.values.len() - 1],
            1.0,
        ]
    }

    /// Channel `c` of view `j` (zero-based).
    pub fn view(&self, c: usize, j: usize) -> f64 {
        self.values[c * self.num_actions() + j]
    }

    pub fn step_share(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Softmax with the maximum subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Linear map from features to one score per view, with weights tied
/// across views: `z_j = Σ_c w_c f_{c,j} + w_step · step + b_j`.
///
/// Layout of `weights`: the per-channel weights, the step weight, then one
/// bias per view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub actions: usize,
    pub weights: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(actions: usize) -> Self {
        Self {
            actions,
            weights: vec![0.0; CHANNELS + 1 + actions],
        }
    }

    /// Length of the feature vectors this head reads.
    pub fn feature_dim(&self) -> usize {
        CHANNELS * self.actions + 1
    }

    fn check(&self, f: &ViewFeatures) -> Result<()> {
        if f.dim() != self.feature_dim() {
            return Err(Error::GeometryMismatch(format!(
                "features of length {} do not fit a head over {} actions",
                f.dim(),
                self.actions
            )));
        }
        Ok(())
    }

    pub fn forward(&self, f: &ViewFeatures) -> Result<Vec<f64>> {
        self.check(f)?;
        let w = &self.weights;
        Ok((0..self.actions)
            .map(|j| (0..CHANNELS).map(|c| w[c] * f.view(c, j)).sum::<f64>() + w[CHANNELS] * f.step_share() + w[CHANNELS + 1 + j])
            .collect())
    }

    /// Adds `scale` times the gradient of score `j` (zero-based).
    fn add_score_gradient(&self, grad: &mut [f64], j: usize, scale: f64, f: &ViewFeatures) {
        for c in 0..CHANNELS {
            grad[c] += scale * f.view(c, j);
        }
        grad[CHANNELS] += scale * f.step_share();
        grad[CHANNELS + 1 + j] += scale;
    }
}

/// Actor logits from a [`LinearHead`] and critic value `θ_v · pooled(f)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: LinearHead,
    pub critic: [f64; POOLED_DIM],
}

impl PolicyParams {
    pub fn zeros(actions: usize) -> Self {
        Self {
            actor: LinearHead::zeros(actions),
            critic: [0.0; POOLED_DIM],
        }
    }

    pub fn value(&self, f: &ViewFeatures) -> f64 {
        self.critic.iter().zip(f.pooled()).map(|(w, x)| w * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.actor.weights.iter().chain(&self.critic).all(|w| w.is_finite())
    }

    fn flat(&self) -> Vec<f64> {
        self.actor.weights.iter().chain(&self.critic).copied().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_params(path.as_ref(), ParamsKind::ActorCritic, self.actor.actions, self.actor.feature_dim(), &self.flat())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (actions, dim, flat) = load_params(path.as_ref(), ParamsKind::ActorCritic)?;
        let mut p = Self::zeros(actions);
        if dim != p.actor.feature_dim() || flat.len() != p.actor.weights.len() + POOLED_DIM {
            return Err(Error::InvalidInput("parameter count does not match the header".into()));
        }
        let (a, c) = flat.split_at(p.actor.weights.len());
        p.actor.weights.copy_from_slice(a);
        p.critic.copy_from_slice(c);
        Ok(p)
    }
}

/// `π = softmax(actor logits)` and the critic value.
pub fn policy_forward(params: &PolicyParams, f: &ViewFeatures) -> Result<(Vec<f64>, f64)> {
    let logits = params.actor.forward(f)?;
    Ok((softmax(&logits), params.value(f)))
}

/// One transition `(f_{i-1}, v_i, r_i, f_i, done)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: ViewFeatures,
    /// One-based.
    pub action: usize,
    pub reward: f64,
    pub next: ViewFeatures,
    pub done: bool,
}

/// Gradients of the actor loss `-log π(a) A` and the critic loss
/// `(y - v(s))^2`, with the advantage `A` and the target
/// `y = r + δ v(s') (1 - done)` held constant.
#[derive(Clone, Debug, PartialEq)]
pub struct A3cGradient {
    pub actor: Vec<f64>,
    pub critic: [f64; POOLED_DIM],
    pub advantage: f64,
}

impl A3cGradient {
    pub fn norm(&self) -> f64 {
        self.actor.iter().chain(&self.critic).map(|g| g * g).sum::<f64>().sqrt()
    }

    fn scale(&mut self, s: f64) {
        self.actor.iter_mut().chain(self.critic.iter_mut()).for_each(|g| *g *= s);
    }
}

fn check_action(action: usize, n: usize) -> Result<()> {
    if action == 0 || action > n {
        return Err(Error::OutOfRange(format!("action {action} outside 1..={n}")));
    }
    Ok(())
}

fn check_discount(d: f64) -> Result<()> {
    if !(0.0..1.0).contains(&d) {
        return Err(Error::param("discount", format!("{d} outside [0, 1)")));
    }
    Ok(())
}

pub fn a3c_gradient(params: &PolicyParams, t: &Transition, discount: f64) -> Result<A3cGradient> {
    check_discount(discount)?;
    check_action(t.action, params.actor.actions)?;
    let (pi, v) = policy_forward(params, &t.state)?;
    let v_next = if t.done { 0.0 } else { params.value(&t.next) };
    let advantage = t.reward + discount * v_next - v;

    let mut actor = vec![0.0; params.actor.weights.len()];
    for (j, p) in pi.iter().enumerate() {
        let indicator = if j + 1 == t.action { 1.0 } else { 0.0 };
        params.actor.add_score_gradient(&mut actor, j, -(indicator - p) * advantage, &t.state);
    }
    let pooled = t.state.pooled();
    let critic = pooled.map(|x| -2.0 * advantage * x);
    Ok(A3cGradient { actor, critic, advantage })
}

/// Clips the gradient to norm `clip`, rejecting non-finite results.
fn clip_gradient(g: &mut A3cGradient, clip: f64) -> Result<()> {
    let norm = g.norm();
    if norm > clip {
        g.scale(clip / norm);
    }
    if !(g.actor.iter().chain(&g.critic).all(|x| x.is_finite())) {
        return Err(Error::NonFinite("actor-critic gradient"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
}

impl From<&LearnerConfig> for StepSizes {
    fn from(l: &LearnerConfig) -> Self {
        Self {
            actor_lr: l.actor_lr,
            critic_lr: l.critic_lr,
            grad_clip: l.grad_clip,
        }
    }
}

fn apply_gradient(params: &mut PolicyParams, g: &A3cGradient, steps: &StepSizes) {
    for (w, d) in params.actor.weights.iter_mut().zip(&g.actor) {
        *w -= steps.actor_lr * d;
    }
    for (w, d) in params.critic.iter_mut().zip(&g.critic) {
        *w -= steps.critic_lr * d;
    }
}

/// Computes the clipped gradient of one transition and applies it.
pub fn a3c_update(params: &mut PolicyParams, t: &Transition, discount: f64, steps: &StepSizes) -> Result<A3cGradient> {
    let mut g = a3c_gradient(params, t, discount)?;
    clip_gradient(&mut g, steps.grad_clip)?;
    apply_gradient(params, &g, steps);
    Ok(g)
}

/// Online and target Q heads plus the replay buffer.
#[derive(Clone, Debug)]
pub struct QParams {
    pub online: LinearHead,
    pub target: LinearHead,
    pub replay: VecDeque<Transition>,
    pub capacity: usize,
    pub updates: usize,
}

impl QParams {
    pub fn new(actions: usize, capacity: usize) -> Self {
        let head = LinearHead::zeros(actions);
        Self {
            online: head.clone(),
            target: head,
            replay: VecDeque::with_capacity(capacity),
            capacity,
            updates: 0,
        }
    }

    pub fn remember(&mut self, t: Transition) {
        if self.replay.len() == self.capacity {
            self.replay.pop_front();
        }
        self.replay.push_back(t);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_params(path.as_ref(), ParamsKind::DoubleQ, self.online.actions, self.online.feature_dim(), &self.online.weights)
    }

    /// Loads online weights; the target is set equal to them and the
    /// replay buffer is empty.
    pub fn load(path: impl AsRef<Path>, capacity: usize) -> Result<Self> {
        let (actions, dim, flat) = load_params(path.as_ref(), ParamsKind::DoubleQ)?;
        let mut q = Self::new(actions, capacity);
        if dim != q.online.feature_dim() || flat.len() != q.online.weights.len() {
            return Err(Error::InvalidInput("parameter count does not match the header".into()));
        }
        q.online.weights = flat;
        q.target = q.online.clone();
        Ok(q)
    }
}

/// Double-Q target `r + γ Q_target(s', argmax_a Q_online(s', a))`, or `r`
/// on terminal transitions.
pub fn double_q_target(q: &QParams, t: &Transition, discount: f64) -> Result<f64> {
    if t.done {
        return Ok(t.reward);
    }
    let a = argmax(&q.online.forward(&t.next)?);
    Ok(t.reward + discount * q.target.forward(&t.next)?[a])
}

/// Mean squared TD error over `batch` and its gradient with respect to the
/// online weights, targets held constant.
pub fn dqn_loss_gradient(q: &QParams, batch: &[&Transition], discount: f64) -> Result<(f64, Vec<f64>)> {
    check_discount(discount)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grad = vec![0.0; q.online.weights.len()];
    let mut loss = 0.0;
    let b = batch.len() as f64;
    for t in batch {
        check_action(t.action, q.online.actions)?;
        let y = double_q_target(q, t, discount)?;
        let err = y - q.online.forward(&t.state)?[t.action - 1];
        loss += err * err / b;
        q.online.add_score_gradient(&mut grad, t.action - 1, -2.0 * err / b, &t.state);
    }
    Ok((loss, grad))
}

/// Samples a batch, takes one clipped gradient step on the online weights
/// and copies them to the target every `target_refresh` updates. Returns the
/// batch loss.
pub fn dqn_update(
    q: &mut QParams,
    batch_size: usize,
    discount: f64,
    lr: f64,
    grad_clip: f64,
    target_refresh: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if q.replay.len() < batch_size || batch_size == 0 {
        return Err(Error::InvalidInput(format!(
            "replay holds {} transitions, batch needs {batch_size}",
            q.replay.len()
        )));
    }
    let idx = rand::seq::index::sample(rng, q.replay.len(), batch_size);
    let batch: Vec<&Transition> = idx.iter().map(|i| &q.replay[i]).collect();
    let (loss, mut grad) = dqn_loss_gradient(q, &batch, discount)?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > grad_clip {
        grad.iter_mut().for_each(|g| *g *= grad_clip / norm);
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("Q gradient"));
    }
    for (w, g) in q.online.weights.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    q.updates += 1;
    if q.updates.is_multiple_of(target_refresh.max(1)) {
        q.target = q.online.clone();
    }
    Ok(loss)
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    /// Draw from the scores read as a probability distribution.
    Sample,
    Argmax,
    /// Uniform with probability ε, otherwise argmax.
    Epsilon(f64),
}

/// Picks a one-based action from probabilities or values.
pub fn select_action(scores: &[f64], mode: SelectMode, rng: &mut impl Rng) -> Result<usize> {
    if scores.is_empty() || !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite and non-empty".into()));
    }
    let zero_based = match mode {
        SelectMode::Argmax => argmax(scores),
        SelectMode::Sample => {
            let sum: f64 = scores.iter().sum();
            if scores.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput("sampling needs a probability distribution".into()));
            }
            WeightedIndex::new(scores)
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(rng)
        }
        SelectMode::Epsilon(eps) => {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::param("epsilon", format!("{eps} outside [0, 1]")));
            }
            if eps > 0.0 && rng.random::<f64>() < eps {
                rng.random_range(0..scores.len())
            } else {
                argmax(scores)
            }
        }
    };
    Ok(zero_based + 1)
}

/// `k` views from action 1 with stride `n / k`.
pub fn uniform_plan(k: usize, n: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n || !n.is_multiple_of(k) {
        return Err(Error::param("k", format!("{k} does not divide {n}")));
    }
    Ok((0..k).map(|i| 1 + i * (n / k)).collect())
}

/// The unvisited view with the most holes, ties to the lowest index. When
/// every view has been visited, the view with the fewest holes.
pub fn greedy_hole(hole_counts: &[usize], visited: &[bool]) -> Result<usize> {
    if hole_counts.is_empty() || hole_counts.len() != visited.len() {
        return Err(Error::InvalidInput("hole counts and visited flags differ in length".into()));
    }
    let best = (0..hole_counts.len()).filter(|&j| !visited[j]).fold(None, |best: Option<usize>, j| match best {
        Some(b) if hole_counts[b] >= hole_counts[j] => Some(b),
        _ => Some(j),
    });
    Ok(1 + match best {
        Some(j) => j,
        None => (0..hole_counts.len()).min_by_key(|&j| hole_counts[j]).unwrap_or(0),
    })
}

/// A view-selection strategy for whole episodes.
#[derive(Clone, Debug)]
pub enum Planner {
    Uniform(usize),
    Greedy,
    Random,
    ActorCritic(PolicyParams),
    DoubleQ(LinearHead),
}

impl Planner {
    pub fn name(&self) -> String {
        match self {
            Planner::Uniform(k) => format!("uniform-{k}"),
            Planner::Greedy => "greedy".into(),
            Planner::Random => "random".into(),
            Planner::ActorCritic(_) => "a3c".into(),
            Planner::DoubleQ(_) => "dqn".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scene_seed: u64,
    pub actions: Vec<usize>,
    /// Undiscounted sum of `r_total`; zero in inference mode.
    pub episode_return: f64,
    pub steps: usize,
    pub terminal: bool,
    pub final_ratio: f64,
    pub trace: Vec<TraceRecord>,
}

/// Runs `planner` on one scenario until the episode ends or a uniform plan
/// runs out. Learned policies act greedily.
pub fn run_episode(
    settings: Arc<EnvSettings>,
    scenario: &Scenario,
    planner: &Planner,
    inpainter: InpainterKind,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(EpisodeSummary, Environment)> {
    let env = Environment::reset(settings, &scenario.input, Some(scenario.gt.clone()), mode, inpainter)?;
    drive_episode(env, scenario.spec.seed, planner, rng)
}

/// Like [`run_episode`] on bare input maps; without ground truth only
/// inference mode with a non-oracle inpainter works.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_on(
    settings: Arc<EnvSettings>,
    input: &EpisodeInput,
    gt: Option<Arc<GroundTruth>>,
    scene_seed: u64,
    planner: &Planner,
    inpainter: InpainterKind,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(EpisodeSummary, Environment)> {
    let env = Environment::reset(settings, input, gt, mode, inpainter)?;
    drive_episode(env, scene_seed, planner, rng)
}

fn drive_episode(mut env: Environment, scene_seed: u64, planner: &Planner, rng: &mut impl Rng) -> Result<(EpisodeSummary, Environment)> {
    let n = env.settings().num_actions();
    let plan = match planner {
        Planner::Uniform(k) => Some(uniform_plan(*k, n)?),
        _ => None,
    };
    let mut summary = EpisodeSummary {
        scene_seed,
        actions: Vec::new(),
        episode_return: 0.0,
        steps: 0,
        terminal: env.is_terminal(),
        final_ratio: 0.0,
        trace: Vec::new(),
    };
    while !env.is_done() {
        let action = match planner {
            Planner::Uniform(_) => match plan.as_ref().and_then(|p| p.get(summary.steps)) {
                Some(&a) => a,
                None => break,
            },
            Planner::Greedy => greedy_hole(&env.hole_counts(), env.visited())?,
            Planner::Random => rng.random_range(1..=n),
            Planner::ActorCritic(p) => {
                let f = ViewFeatures::observe(&mut env)?;
                select_action(&policy_forward(p, &f)?.0, SelectMode::Argmax, rng)?
            }
            Planner::DoubleQ(q) => {
                let f = ViewFeatures::observe(&mut env)?;
                select_action(&q.forward(&f)?, SelectMode::Argmax, rng)?
            }
        };
        let out = env.step(action)?;
        summary.trace.push(out.trace());
        summary.actions.push(action);
        summary.steps += 1;
        if let Some(r) = &out.rewards {
            summary.episode_return += r.r_total;
        }
    }
    summary.terminal = env.is_terminal();
    summary.final_ratio = if env.area0() == 0 { 0.0 } else { env.area() as f64 / env.area0() as f64 };
    Ok((summary, env))
}

/// One line of a learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub episode: usize,
    pub worker: usize,
    pub scene_seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub steps: usize,
    pub terminal: bool,
}

impl CurveRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("curve records serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOptions {
    pub workers: usize,
    pub episodes: usize,
    pub discount: f64,
    pub steps: StepSizes,
    pub seed: u64,
    pub inpainter: InpainterKind,
}

impl TrainingOptions {
    pub fn from_config(l: &LearnerConfig, seed: u64) -> Self {
        Self {
            workers: l.workers,
            episodes: l.episodes,
            discount: l.discount,
            steps: StepSizes::from(l),
            seed,
            inpainter: l.inpainter,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained<P> {
    pub params: P,
    pub curve: Vec<CurveRecord>,
}

fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(worker as u64 + 1)))
}

/// Asynchronous advantage actor-critic. Episode `e` runs on worker
/// `e % workers` and scene `e % scenes.len()`. Each worker snapshots the
/// shared parameters before every step and applies its clipped gradient
/// after it. With one worker the run is deterministic.
pub fn train_a3c(settings: Arc<EnvSettings>, scenes: &[Scenario], opts: &TrainingOptions) -> Result<Trained<PolicyParams>> {
    if opts.workers == 0 || scenes.is_empty() {
        return Err(Error::Config("training needs at least one worker and one scene".into()));
    }
    check_discount(opts.discount)?;
    let store = Mutex::new(PolicyParams::zeros(settings.num_actions()));
    let curve = Mutex::new(Vec::new());
    let worker = |w: usize| -> Result<()> {
        let mut rng = worker_rng(opts.seed, w);
        for e in (w..opts.episodes).step_by(opts.workers) {
            let scenario = &scenes[e % scenes.len()];
            let mut env =
                Environment::reset(settings.clone(), &scenario.input, Some(scenario.gt.clone()), Mode::Train, opts.inpainter)?;
            let mut f = ViewFeatures::observe(&mut env)?;
            let (mut ret, mut steps) = (0.0, 0);
            while !env.is_done() {
                let snapshot = store.lock().expect("parameter store poisoned").clone();
                let (pi, _) = policy_forward(&snapshot, &f)?;
                let action = select_action(&pi, SelectMode::Sample, &mut rng)?;
                let out = env.step(action)?;
                let reward = out.rewards()?.r_total;
                let next = ViewFeatures::observe(&mut env)?;
                let t = Transition {
                    state: f,
                    action,
                    reward,
                    next: next.clone(),
                    done: out.done,
                };
                let mut g = a3c_gradient(&snapshot, &t, opts.discount)?;
                clip_gradient(&mut g, opts.steps.grad_clip)?;
                apply_gradient(&mut store.lock().expect("parameter store poisoned"), &g, &opts.steps);
                f = next;
                ret += reward;
                steps += 1;
            }
            curve.lock().expect("curve poisoned").push(CurveRecord {
                episode: e,
                worker: w,
                scene_seed: scenario.spec.seed,
                episode_return: ret,
                steps,
                terminal: env.is_terminal(),
            });
        }
        Ok(())
    };
    if opts.workers == 1 {
        worker(0)?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..opts.workers).map(|w| s.spawn(move || worker(w))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Result<Vec<()>>>()
        })?;
    }
    let params = store.into_inner().expect("parameter store poisoned");
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters"));
    }
    let mut curve = curve.into_inner().expect("curve poisoned");
    curve.sort_by_key(|r| r.episode);
    Ok(Trained { params, curve })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnOptions {
    pub episodes: usize,
    pub discount: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub target_refresh: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_steps: usize,
    pub seed: u64,
    pub inpainter: InpainterKind,
}

impl DqnOptions {
    pub fn from_config(l: &LearnerConfig, seed: u64) -> Self {
        Self {
            episodes: l.episodes,
            discount: l.q_discount,
            lr: l.q_lr,
            grad_clip: l.grad_clip,
            target_refresh: l.target_refresh,
            replay_capacity: l.replay_capacity,
            batch_size: l.batch_size,
            epsilon_start: l.epsilon_start,
            epsilon_end: l.epsilon_end,
            epsilon_steps: l.epsilon_steps,
            seed,
            inpainter: l.inpainter,
        }
    }

    fn epsilon(&self, step: usize) -> f64 {
        if step >= self.epsilon_steps {
            return self.epsilon_end;
        }
        let t = step as f64 / self.epsilon_steps.max(1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// Single-worker double-Q learning with ε-greedy exploration. One update
/// per environment step once the buffer holds a batch.
pub fn train_dqn(settings: Arc<EnvSettings>, scenes: &[Scenario], opts: &DqnOptions) -> Result<Trained<QParams>> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    check_discount(opts.discount)?;
    let mut rng = worker_rng(opts.seed, 0);
    let mut q = QParams::new(settings.num_actions(), opts.replay_capacity);
    let mut curve = Vec::new();
    let mut total_steps = 0;
    for e in 0..opts.episodes {
        let scenario = &scenes[e % scenes.len()];
        let mut env = Environment::reset(settings.clone(), &scenario.input, Some(scenario.gt.clone()), Mode::Train, opts.inpainter)?;
        let mut f = ViewFeatures::observe(&mut env)?;
        let (mut ret, mut steps) = (0.0, 0);
        while !env.is_done() {
            let values = q.online.forward(&f)?;
            let action = select_action(&values, SelectMode::Epsilon(opts.epsilon(total_steps)), &mut rng)?;
            let out = env.step(action)?;
            let reward = out.rewards()?.r_total;
            let next = ViewFeatures::observe(&mut env)?;
            q.remember(Transition {
                state: f,
                action,
                reward,
                next: next.clone(),
                done: out.done,
            });
            if q.replay.len() >= opts.batch_size {
                dqn_update(&mut q, opts.batch_size, opts.discount, opts.lr, opts.grad_clip, opts.target_refresh, &mut rng)?;
            }
            f = next;
            ret += reward;
            steps += 1;
            total_steps += 1;
        }
        curve.push(CurveRecord {
            episode: e,
            worker: 0,
            scene_seed: scenario.spec.seed,
            episode_return: ret,
            steps,
            terminal: env.is_terminal(),
        });
    }
    Ok(Trained { params: q, curve })
}

const MAGIC: &[u8; 4] = b"SFPL";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
enum ParamsKind {
    ActorCritic = 1,
    DoubleQ = 2,
}

/// Header: magic, format version, kind, action count, feature length and
/// value count, then the values, all little-endian.
fn save_params(path: &Path, kind: ParamsKind, actions: usize, dim: usize, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    for x in [FORMAT_VERSION, kind as u32, actions as u32, dim as u32] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

fn load_params(path: &Path, kind: ParamsKind) -> Result<(usize, usize, Vec<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.into(),
    };
    if buf.len() < 28 || &buf[..4] != MAGIC {
        return Err(parse_err(0, "not a parameter file"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != FORMAT_VERSION {
        return Err(parse_err(4, &format!("unsupported format version {}", word(0))));
    }
    if word(1) != kind as u32 {
        return Err(parse_err(8, "parameter file holds a different learner"));
    }
    let count = u64::from_le_bytes(buf[20..28].try_into().expect("8 bytes")) as usize;
    if buf.len() != 28 + 8 * count {
        return Err(parse_err(20, "value count does not match the file length"));
    }
    let values = buf[28..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((word(2) as usize, word(3) as usize, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(n: usize, seed: u64) -> ViewFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let holes: Vec<f64> = (0..n).map(|_| rng.random::<f64>() / n as f64).collect();
        let visited: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let depth: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let remaining: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        ViewFeatures::from_parts(&holes, &visited, &depth, &remaining, rng.random()).unwrap()
    }

    #[test]
    fn uniform_plans() {
        assert_eq!(uniform_plan(5, 20).unwrap(), vec![1, 5, 9, 13, 17]);
        assert_eq!(uniform_plan(20, 20).unwrap(), (1..=20).collect::<Vec<_>>());
        let u10 = uniform_plan(10, 20).unwrap();
        assert_eq!(u10.len(), 10);
        assert!(u10.windows(2).all(|w| w[1] - w[0] == 2));
        assert!(uniform_plan(3, 20).is_err());
        assert!(uniform_plan(0, 20).is_err());
    }

    #[test]
    fn greedy_cases() {
        let mut holes = vec![0; 20];
        holes[6] = 100;
        assert_eq!(greedy_hole(&holes, &[false; 20]).unwrap(), 7);
        assert_eq!(greedy_hole(&[5; 20], &[false; 20]).unwrap(), 1);
        let mut visited = [false; 20];
        visited[6] = true;
        holes[2] = 3;
        assert_eq!(greedy_hole(&holes, &visited).unwrap(), 3);
        holes[4] = 0;
        holes.iter_mut().for_each(|h| *h += 1);
        holes[11] = 0;
        assert_eq!(greedy_hole(&holes, &[true; 20]).unwrap(), 12);
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let p = PolicyParams::zeros(20);
        let (pi, v) = policy_forward(&p, &features(20, 1)).unwrap();
        assert!(pi.iter().all(|&x| (x - 0.05).abs() < 1e-15));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn features_reject_out_of_range() {
        assert!(ViewFeatures::from_parts(&[1.5], &[false], &[0.0], &[0.0], 0.0).is_err());
        assert!(ViewFeatures::from_parts(&[0.5, 0.5], &[false], &[0.0], &[0.0], 0.0).is_err());
        let f = features(20, 2);
        assert_eq!(f.dim(), 81);
        assert_eq!(f.num_actions(), 20);
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let p = PolicyParams::zeros(20);
        let t = Transition {
            state: features(20, 3),
            action: 4,
            reward: 0.0,
            next: features(20, 4),
            done: false,
        };
        let g = a3c_gradient(&p, &t, 0.9).unwrap();
        assert_eq!(g.advantage, 0.0);
        assert!(g.actor.iter().chain(&g.critic).all(|&x| x == 0.0));
    }

    #[test]
    fn positive_advantage_raises_taken_action() {
        let mut p = PolicyParams::zeros(20);
        let t = Transition {
            state: features(20, 5),
            action: 9,
            reward: 1.0,
            next: features(20, 6),
            done: true,
        };
        let before = policy_forward(&p, &t.state).unwrap().0[8];
        let steps = StepSizes {
            actor_lr: 0.1,
            critic_lr: 0.1,
            grad_clip: 10.0,
        };
        let g = a3c_update(&mut p, &t, 0.9, &steps).unwrap();
        assert!(g.advantage > 0.0);
        assert!(policy_forward(&p, &t.state).unwrap().0[8] > before);
        assert!(p.value(&t.state) > 0.0);
    }

    #[test]
    fn clipping_bounds_gradient_norm() {
        let p = PolicyParams::zeros(20);
        let t = Transition {
            state: features(20, 7),
            action: 1,
            reward: 1e6,
            next: features(20, 8),
            done: true,
        };
        let mut g = a3c_gradient(&p, &t, 0.9).unwrap();
        assert!(g.norm() > 10.0);
        clip_gradient(&mut g, 10.0).unwrap();
        assert!((g.norm() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn terminal_target_is_reward() {
        let mut q = QParams::new(20, 10);
        q.target.weights.iter_mut().for_each(|w| *w = 0.3);
        let t = Transition {
            state: features(20, 9),
            action: 2,
            reward: 0.7,
            next: features(20, 10),
            done: true,
        };
        assert_eq!(double_q_target(&q, &t, 0.9).unwrap(), 0.7);
        let open = Transition { done: false, ..t };
        assert!(double_q_target(&q, &open, 0.9).unwrap() > 0.7);
    }

    #[test]
    fn select_action_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pi = vec![0.0; 20];
        pi[13] = 1.0;
        for mode in [SelectMode::Sample, SelectMode::Argmax, SelectMode::Epsilon(0.0)] {
            assert_eq!(select_action(&pi, mode, &mut rng).unwrap(), 14);
        }
        assert_eq!(select_action(&[0.2, 0.5, 0.5, 0.1], SelectMode::Argmax, &mut rng).unwrap(), 2);
        assert!(select_action(&[0.2, 0.2], SelectMode::Sample, &mut rng).is_err());
        assert!(select_action(&[], SelectMode::Argmax, &mut rng).is_err());
    }

    #[test]
    fn params_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = PolicyParams::zeros(20);
        p.actor.weights.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 0.01 - 3.0);
        p.critic = [0.1, -0.2, 0.3, -0.4, 0.5, -0.6];
        let path = dir.path().join("a3c.bin");
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);
        assert!(QParams::load(&path, 10).is_err());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(PolicyParams::load(&path), Err(Error::Parse { offset: 4, .. })));

        let mut q = QParams::new(20, 10);
        q.online.weights[5] = 2.5;
        let qpath = dir.path().join("q.bin");
        q.save(&qpath).unwrap();
        let back = QParams::load(&qpath, 10).unwrap();
        assert_eq!(back.online, q.online);
        assert_eq!(back.target, q.online);
    }
}
