//! Asynchronous advantage actor-critic with a shared policy across sensors.
//!
//! Every sensor of an environment is steered by the same network, each from
//! its own relation set. Only the main agent (sensor 0) contributes
//! transitions, and it is credited with the reward of every sensor. Workers
//! copy the global parameters, roll out up to `t_max` steps, compute
//! gradients locally and apply them to the global store under a lock.

use std::collections::VecDeque;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    forward, forward_batch, forward_many, init_params, select_action, ActionMode, Aggregation,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Controller, EpisodeStat, EvalReport};
use crate::nn::{clip_global_norm, Gradients, ParameterStore, RmsProp, Tape, Tensor, Var};
use crate::observation::{RelationSet, TeamObserver};
use crate::parallel::{derive_seed, Exec};
use crate::sim::{Action, EnvConfig, EnvState, Span};

/// Model options shared by training, evaluation and analysis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub n_workers: usize,
    pub t_max: usize,
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
    pub value_loss_weight: f64,
    pub max_grad_norm: f64,
    /// RMSProp squared-gradient decay.
    pub rms_decay: f64,
    /// RMSProp epsilon, added under the square root.
    pub rms_epsilon: f64,
    /// Decay the learning rate linearly to zero over `total_env_steps`.
    pub anneal_lr: bool,
    pub total_env_steps: u64,
    pub seed: u64,
    /// Interleave workers round-robin on one thread instead of running them
    /// on their own threads. Makes multi-worker runs reproducible.
    pub lockstep: bool,
    /// Number of most recent finished episodes averaged into the logged
    /// capture percentage.
    pub log_window: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_workers: 16,
            t_max: 5,
            gamma: 0.95,
            beta: 0.01,
            lr: 3e-4,
            value_loss_weight: 0.5,
            max_grad_norm: 40.0,
            rms_decay: RmsProp::DEFAULT_DECAY,
            rms_epsilon: 1e-5,
            anneal_lr: false,
            total_env_steps: 1_000_000,
            seed: 0,
            lockstep: false,
            log_window: 16,
        }
    }
}

impl TrainerConfig {
    pub fn validate_with_prefix(&self, prefix: &str) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{prefix}{key}: {why}")));
        if self.n_workers == 0 {
            return bad("n_workers", "must be at least 1".into());
        }
        if self.t_max == 0 {
            return bad("t_max", "must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", format!("{} outside (0, 1]", self.gamma));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta", format!("{} must be >= 0", self.beta));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("{} must be > 0", self.lr));
        }
        if !(self.value_loss_weight.is_finite() && self.value_loss_weight > 0.0) {
            return bad(
                "value_loss_weight",
                format!("{} must be > 0", self.value_loss_weight),
            );
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return bad(
                "max_grad_norm",
                format!("{} must be > 0", self.max_grad_norm),
            );
        }
        if !(self.rms_decay >= 0.0 && self.rms_decay < 1.0) {
            return bad("rms_decay", format!("{} outside [0, 1)", self.rms_decay));
        }
        if !(self.rms_epsilon.is_finite() && self.rms_epsilon > 0.0) {
            return bad("rms_epsilon", format!("{} must be > 0", self.rms_epsilon));
        }
        if self.log_window == 0 {
            return bad("log_window", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_prefix("")
    }

    /// Learning rate once `env_steps` steps have been consumed.
    pub fn lr_at(&self, env_steps: u64) -> f64 {
        if !self.anneal_lr || self.total_env_steps == 0 {
            return self.lr;
        }
        let done = env_steps.min(self.total_env_steps) as f64 / self.total_env_steps as f64;
        self.lr * (1.0 - done)
    }
}

/// One main-agent step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub relations: RelationSet,
    pub action: Action,
    /// Sum of every sensor's reward for this step.
    pub reward: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    /// Value of the state after the last transition; 0 when the episode ended.
    pub bootstrap: f64,
    pub episode_done: bool,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// An environment together with the per-sensor histories and the relation
/// sets of its current state.
pub struct EnvRunner {
    pub env: EnvState,
    observer: TeamObserver,
    current: Vec<RelationSet>,
}

impl EnvRunner {
    pub fn new(env: EnvState) -> Result<Self> {
        let mut observer = TeamObserver::new();
        let current = observer.observe(&env)?;
        Ok(EnvRunner {
            env,
            observer,
            current,
        })
    }

    /// Relation sets of the current state, one per sensor.
    pub fn current(&self) -> &[RelationSet] {
        &self.current
    }
}

/// Runs up to `t_max` steps with every sensor acting under `params`, keeping
/// the main agent's transitions.
pub fn rollout<R: Rng + ?Sized>(
    runner: &mut EnvRunner,
    params: &ParameterStore,
    aggregation: Aggregation,
    t_max: usize,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    if runner.env.is_done() {
        return Err(Error::Lifecycle("rollout on a finished episode".into()));
    }
    let mut buf = RolloutBuffer::default();
    for _ in 0..t_max {
        let refs: Vec<&RelationSet> = runner.current.iter().collect();
        let outs = forward_many(params, &refs, aggregation)?;
        let actions: Vec<Action> = outs
            .iter()
            .map(|o| select_action(&o.probs, ActionMode::Stochastic, rng))
            .collect();
        let result = runner.env.step(&actions)?;
        buf.transitions.push(Transition {
            relations: std::mem::take(&mut runner.current[0]),
            action: actions[0],
            reward: result.total_reward() as f64,
            value: outs[0].value,
        });
        if result.done {
            buf.episode_done = true;
            buf.bootstrap = 0.0;
            return Ok(buf);
        }
        runner.current = runner.observer.observe(&runner.env)?;
    }
    buf.bootstrap = forward::<ChaCha8Rng>(params, &runner.current[0], aggregation, None)?.value;
    Ok(buf)
}

/// Fills discounted bootstrapped returns and advantages.
pub fn compute_targets(buf: &mut RolloutBuffer, gamma: f64) {
    let n = buf.transitions.len();
    buf.returns = vec![0.0; n];
    buf.advantages = vec![0.0; n];
    let mut ret = buf.bootstrap;
    for i in (0..n).rev() {
        ret = buf.transitions[i].reward + gamma * ret;
        buf.returns[i] = ret;
        buf.advantages[i] = ret - buf.transitions[i].value;
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Per-transition averages of the loss terms of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Loss graph nodes of one update.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// Negated objective; the quantity that is differentiated.
    pub loss: Var,
    pub policy_objective: Var,
    pub neg_entropy: Var,
    pub value_sq: Var,
}

/// Records the negated actor-critic objective
/// `sum_i [ln pi(a_i|s_i) A_i + beta H(pi(s_i))] - c sum_i (R_i - V(s_i))^2`
/// on `tape`. Advantages and returns enter as constants.
pub fn build_loss<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    buf: &RolloutBuffer,
    beta: f64,
    value_loss_weight: f64,
    aggregation: Aggregation,
    dropout_rng: Option<&mut R>,
) -> Result<LossVars> {
    let n = buf.len();
    if n == 0 || buf.returns.len() != n || buf.advantages.len() != n {
        return Err(Error::Usage(
            "targets must be computed on a non-empty buffer".into(),
        ));
    }
    let sets: Vec<&RelationSet> = buf.transitions.iter().map(|t| &t.relations).collect();
    let fv = forward_batch(tape, &sets, aggregation, None, dropout_rng)?;

    let log_probs = tape.log_softmax(fv.logits)?;
    let probs = tape.exp(log_probs)?;
    let plogp = tape.mul(probs, log_probs)?;
    let neg_ent_rows = tape.sum_last(plogp)?;
    let neg_entropy = tape.sum(neg_ent_rows)?;

    let actions: Vec<usize> = buf.transitions.iter().map(|t| t.action.index()).collect();
    let taken = tape.gather(log_probs, actions)?;
    let adv = tape.input(Tensor::new(vec![n], buf.advantages.clone())?, false)?;
    let weighted = tape.mul(taken, adv)?;
    let policy_objective = tape.sum(weighted)?;

    let ret = tape.input(Tensor::new(vec![n], buf.returns.clone())?, false)?;
    let diff = tape.sub(ret, fv.value)?;
    let sq = tape.square(diff)?;
    let value_sq = tape.sum(sq)?;

    let neg_policy = tape.scale(policy_objective, -1.0)?;
    let ent_term = tape.scale(neg_entropy, beta)?;
    let val_term = tape.scale(value_sq, value_loss_weight)?;
    let partial = tape.add(neg_policy, ent_term)?;
    let loss = tape.add(partial, val_term)?;
    Ok(LossVars {
        loss,
        policy_objective,
        neg_entropy,
        value_sq,
    })
}

/// Gradients of the negated objective built by [`build_loss`] plus
/// per-transition averages of its terms.
pub fn loss_and_grads<R: Rng + ?Sized>(
    buf: &RolloutBuffer,
    params: &ParameterStore,
    beta: f64,
    value_loss_weight: f64,
    aggregation: Aggregation,
    dropout_rng: Option<&mut R>,
) -> Result<(Gradients, LossMetrics)> {
    let mut tape = Tape::new(params);
    let v = build_loss(
        &mut tape,
        buf,
        beta,
        value_loss_weight,
        aggregation,
        dropout_rng,
    )?;
    let n = buf.len() as f64;
    let metrics = LossMetrics {
        policy_loss: -tape.value(v.policy_objective).data()[0] / n,
        value_loss: tape.value(v.value_sq).data()[0] / n,
        entropy: -tape.value(v.neg_entropy).data()[0] / n,
    };
    let grads = tape.backward(v.loss)?.into_params();
    Ok((grads, metrics))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: u64,
    pub env_steps: u64,
    /// Mean capture percentage of the most recent finished episodes.
    pub capture_pct: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
    pub worker: usize,
}

pub struct TrainOutcome {
    pub params: ParameterStore,
    pub optimizer: RmsProp,
    pub log: Vec<LogRecord>,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes: Vec<EpisodeStat>,
}

struct Global {
    params: ParameterStore,
    optimizer: RmsProp,
    updates: u64,
    recent: VecDeque<f64>,
    episodes: Vec<EpisodeStat>,
}

struct Shared<'a> {
    cfg: &'a TrainerConfig,
    agent: &'a AgentConfig,
    env: &'a EnvConfig,
    global: Mutex<Global>,
    env_steps: AtomicU64,
    stop: AtomicBool,
}

struct Worker {
    id: usize,
    runner: EnvRunner,
    episode: u64,
    rng: ChaCha8Rng,
}

fn worker_episode_seed(seed: u64, worker: usize, episode: u64) -> u64 {
    derive_seed(derive_seed(seed, worker as u64), episode)
}

impl Worker {
    fn new(id: usize, cfg: &TrainerConfig, env: &EnvConfig) -> Result<Self> {
        let state = EnvState::init_episode(env, worker_episode_seed(cfg.seed, id, 0))?;
        Ok(Worker {
            id,
            runner: EnvRunner::new(state)?,
            episode: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x0005_EED0_FAC7, id as u64)),
        })
    }

    /// One snapshot/rollout/update cycle. Returns `None` once the step budget
    /// is spent.
    fn iterate(&mut self, sh: &Shared<'_>) -> Result<Option<LogRecord>> {
        let cfg = sh.cfg;
        if sh.stop.load(Ordering::Relaxed)
            || sh.env_steps.load(Ordering::SeqCst) >= cfg.total_env_steps
        {
            return Ok(None);
        }
        let snapshot = sh.global.lock().expect("global lock").params.clone();
        let agg = sh.agent.aggregation;
        let mut buf = rollout(&mut self.runner, &snapshot, agg, cfg.t_max, &mut self.rng)?;
        let steps = sh.env_steps.fetch_add(buf.len() as u64, Ordering::SeqCst) + buf.len() as u64;
        compute_targets(&mut buf, cfg.gamma);
        let (mut grads, metrics) = loss_and_grads(
            &buf,
            &snapshot,
            cfg.beta,
            cfg.value_loss_weight,
            agg,
            Some(&mut self.rng),
        )?;
        let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm)?;

        let finished = buf.episode_done.then(|| EpisodeStat {
            objects_total: self.runner.env.objects_total(),
            objects_captured: self.runner.env.captured_total(),
        });
        if finished.is_some() {
            self.episode += 1;
            let seed = worker_episode_seed(cfg.seed, self.id, self.episode);
            self.runner = EnvRunner::new(EnvState::init_episode(sh.env, seed)?)?;
        }

        let mut g = sh.global.lock().expect("global lock");
        let lr = cfg.lr_at(steps);
        let Global {
            params, optimizer, ..
        } = &mut *g;
        optimizer.lr = lr;
        optimizer.update(params, &grads)?;
        g.updates += 1;
        if let Some(stat) = finished {
            g.recent.push_back(stat.pct());
            while g.recent.len() > cfg.log_window {
                g.recent.pop_front();
            }
            g.episodes.push(stat);
        }
        let capture_pct =
            (!g.recent.is_empty()).then(|| g.recent.iter().sum::<f64>() / g.recent.len() as f64);
        Ok(Some(LogRecord {
            update: g.updates,
            env_steps: steps,
            capture_pct,
            policy_loss: metrics.policy_loss,
            value_loss: metrics.value_loss,
            entropy: metrics.entropy,
            grad_norm,
            lr,
            beta: cfg.beta,
            gamma: cfg.gamma,
            worker: self.id,
        }))
    }
}

fn write_record(sink: &mut Option<&mut (dyn Write + Send)>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Trains from freshly initialized parameters until `total_env_steps`
/// environment steps have been consumed across all workers.
pub fn train(
    cfg: &TrainerConfig,
    agent: &AgentConfig,
    env: &EnvConfig,
    sink: Option<&mut (dyn Write + Send)>,
) -> Result<TrainOutcome> {
    let params = init_params(cfg.seed);
    let optimizer = RmsProp::new(&params, cfg.lr);
    train_from(cfg, agent, env, params, optimizer, sink)
}

/// Continues training from the given parameters and optimizer statistics.
pub fn train_from(
    cfg: &TrainerConfig,
    agent: &AgentConfig,
    env: &EnvConfig,
    params: ParameterStore,
    mut optimizer: RmsProp,
    mut sink: Option<&mut (dyn Write + Send)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    env.validate()?;
    crate::agent::check_architecture(&params)?;
    optimizer.lr = cfg.lr;
    optimizer.decay = cfg.rms_decay;
    optimizer.epsilon = cfg.rms_epsilon;
    let shared = Shared {
        cfg,
        agent,
        env,
        global: Mutex::new(Global {
            params,
            optimizer,
            updates: 0,
            recent: VecDeque::new(),
            episodes: Vec::new(),
        }),
        env_steps: AtomicU64::new(0),
        stop: AtomicBool::new(false),
    };
    let mut workers = (0..cfg.n_workers)
        .map(|id| Worker::new(id, cfg, env))
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();

    let threaded = cfg!(feature = "parallel") && !cfg.lockstep && cfg.n_workers > 1;
    if threaded {
        let (tx, rx) = mpsc::channel::<LogRecord>();
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .iter_mut()
                .map(|w| {
                    let tx = tx.clone();
                    let sh = &shared;
                    scope.spawn(move || {
                        let run = catch_unwind(AssertUnwindSafe(|| -> Result<()> {
                            while let Some(rec) = w.iterate(sh)? {
                                let _ = tx.send(rec);
                            }
                            Ok(())
                        }));
                        let out = match run {
                            Ok(r) => r,
                            Err(p) => Err(Error::Worker(format!(
                                "worker {} panicked: {}",
                                w.id,
                                panic_message(p)
                            ))),
                        };
                        if out.is_err() {
                            sh.stop.store(true, Ordering::SeqCst);
                        }
                        out
                    })
                })
                .collect();
            drop(tx);
            let mut write_err = Ok(());
            for rec in rx {
                if write_err.is_ok() {
                    write_err = write_record(&mut sink, &rec);
                    if write_err.is_err() {
                        shared.stop.store(true, Ordering::SeqCst);
                    }
                }
                log.push(rec);
            }
            let mut results: Vec<Result<()>> = handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|p| Err(Error::Worker(panic_message(p))))
                })
                .collect();
            results.push(write_err);
            results
        });
        for r in results {
            r?;
        }
    } else {
        let mut active = true;
        while active {
            active = false;
            for w in workers.iter_mut() {
                if let Some(rec) = w.iterate(&shared)? {
                    write_record(&mut sink, &rec)?;
                    log.push(rec);
                    active = true;
                }
            }
        }
    }

    let g = shared.global.into_inner().expect("global lock");
    Ok(TrainOutcome {
        params: g.params,
        optimizer: g.optimizer,
        log,
        env_steps: shared.env_steps.load(Ordering::SeqCst),
        updates: g.updates,
        episodes: g.episodes,
    })
}

/// Ranges for the random hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub agents: usize,
    /// Log-uniform.
    pub lr: Span,
    /// Log-uniform.
    pub beta: Span,
    pub gamma: Vec<f64>,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            agents: 4,
            lr: Span(1e-5, 1e-3),
            beta: Span(1e-3, 5e-2),
            gamma: vec![0.9, 0.95, 0.99, 0.995],
        }
    }
}

impl SearchSpec {
    pub fn validate_with_prefix(&self, prefix: &str) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Config(format!("{prefix}agents: must be at least 1")));
        }
        for (key, s) in [("lr", self.lr), ("beta", self.beta)] {
            if !(s.min() > 0.0 && s.min() <= s.max() && s.max().is_finite()) {
                return Err(Error::Config(format!(
                    "{prefix}{key}: need 0 < min <= max, got [{}, {}]",
                    s.min(),
                    s.max()
                )));
            }
        }
        if self.gamma.is_empty() || self.gamma.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::Config(format!(
                "{prefix}gamma: need a non-empty list of values in (0, 1]"
            )));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, f64) {
        let log_uniform = |s: Span, rng: &mut R| {
            if s.min() == s.max() {
                s.min()
            } else {
                rng.random_range(s.min().ln()..=s.max().ln()).exp()
            }
        };
        let lr = log_uniform(self.lr, rng);
        let beta = log_uniform(self.beta, rng);
        let gamma = self.gamma[rng.random_range(0..self.gamma.len())];
        (lr, beta, gamma)
    }
}

/// Evaluation protocol used to rank trained agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub action_mode: ActionMode,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            action_mode: ActionMode::Deterministic,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRun {
    pub agent: usize,
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub params: Option<ParameterStore>,
}

impl SearchRun {
    pub fn score(&self) -> f64 {
        self.report
            .as_ref()
            .map_or(f64::NEG_INFINITY, |r| r.capture_pct)
    }
}

/// Trains `spec.agents` agents with randomly drawn `(lr, beta, gamma)` and
/// ranks them by evaluation capture percentage. Failed runs are kept and
/// ranked last.
pub fn hyperparameter_search(
    spec: &SearchSpec,
    base: &TrainerConfig,
    agent: &AgentConfig,
    env: &EnvConfig,
    eval: &EvalConfig,
    eval_seed: u64,
) -> Result<Vec<SearchRun>> {
    spec.validate_with_prefix("search.")?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, 0x5EA2C4));
    let mut runs = Vec::with_capacity(spec.agents);
    for k in 0..spec.agents {
        let (lr, beta, gamma) = spec.draw(&mut rng);
        let cfg = TrainerConfig {
            lr,
            beta,
            gamma,
            seed: derive_seed(base.seed, k as u64 + 1),
            ..base.clone()
        };
        let mut run = SearchRun {
            agent: k,
            lr,
            beta,
            gamma,
            seed: cfg.seed,
            report: None,
            error: None,
            params: None,
        };
        let trained = train(&cfg, agent, env, None).and_then(|out| {
            let ctl = Controller::Learned {
                params: Arc::new(out.params.clone()),
                aggregation: agent.aggregation,
                mode: eval.action_mode,
            };
            let report = evaluate(&ctl, env, eval.episodes, eval_seed, eval.exec)?;
            Ok((out.params, report))
        });
        match trained {
            Ok((params, report)) => {
                run.report = Some(report);
                run.params = Some(params);
            }
            Err(e) => run.error = Some(e.to_string()),
        }
        runs.push(run);
    }
    runs.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.agent.cmp(&b.agent)));
    Ok(runs)
}
