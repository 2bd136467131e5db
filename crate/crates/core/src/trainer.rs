//! Rollouts, Adam updates over batched trajectories, the epoch loop, and
//! test-set evaluation.
//!
//! Trajectories are processed in fixed-size chunks of 32: one tape holds a
//! whole chunk (one trajectory per column), the chunk's masked batch loss is
//! backpropagated with a `1/b` seed, and per-chunk gradients are summed in
//! chunk order. Columns never interact before the final masked reduction and
//! the reduction order is fixed, so results are bitwise-reproducible for any
//! thread count. Chunks run in parallel when more than one thread is
//! configured.

use std::io::Write as IoWrite;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::agent::{forward_tape, AgentArch, AgentParams, TapeBindings};
use crate::autodiff::{NodeId, Tape, TapeSystem};
use crate::integrator::{evolve_interval_tape, StepSpec};
use crate::losses::{self, LossParts, LossWeights};
use crate::realspace::{fidelity_probes, ControlSystem, ControlVector, RealState};
use crate::systems::{stream_rng, TaskSpec};
use crate::{Error, Result};

/// Trajectories per tape. Fixed so that gradient accumulation order, and
/// therefore every result, is independent of the thread count.
pub(crate) const CHUNK: usize = 32;

/// Norm-drift budget per trajectory, asserted on evaluation rollouts.
pub const NORM_DRIFT_LIMIT: f64 = 1e-4;

/// The stream index used for evaluation-set sampling, outside the training
/// epoch range.
const EVAL_STREAM: u64 = u64::MAX;

/// Everything recorded about one rollout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `n_steps + 1` states, starting with the initial state.
    pub states: Vec<RealState>,
    /// `n_steps` actions.
    pub actions: Vec<ControlVector>,
    /// `n_steps` fidelities; entry `i` is `F(states[i + 1], target)`.
    pub fidelities: Vec<f64>,
    /// `| ||psi(t_N)|| - 1 |`.
    pub final_norm_drift: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Full training configuration for one run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub weights: LossWeights,
    pub arch: AgentArch,
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_set_size: usize,
    /// 0 means all available cores.
    pub threads: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Gaussian policy variance, used by the policy-gradient baseline only.
    pub sigma_sq: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(Error::Config("policy variance must be positive".into()));
        }
        self.weights.validate()?;
        let system = self.task.kind.build_system()?;
        self.arch.validate_for(system.dim(), system.num_controls())?;
        Ok(())
    }
}

/// One epoch's summary line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_f: f64,
    pub loss_fn: f64,
    pub loss_amp: f64,
    pub loss_amp_sq: f64,
    pub mean_final_infidelity: f64,
}

/// Per-epoch training history.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// CSV with a provenance comment line, then
    /// `epoch,loss_total,loss_F,loss_FN,loss_amp,loss_amp_sq,mean_final_infidelity`.
    /// The `loss_*` columns are the unweighted elementary losses averaged
    /// over the batch; `loss_total` is their weighted combination.
    pub fn write_csv(&self, w: &mut impl IoWrite, config_hash: &str, seed: u64) -> std::io::Result<()> {
        writeln!(w, "# config_hash={config_hash} seed={seed}")?;
        writeln!(w, "epoch,loss_total,loss_F,loss_FN,loss_amp,loss_amp_sq,mean_final_infidelity")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss_total, r.loss_f, r.loss_fn, r.loss_amp, r.loss_amp_sq,
                r.mean_final_infidelity
            )?;
        }
        Ok(())
    }
}

/// Per-step statistics of an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalStepStat {
    /// 1-based control-interval index.
    pub step: usize,
    /// Time at the end of the interval.
    pub t: f64,
    pub fid_mean: f64,
    pub fid_std: f64,
    /// Per-control mean of the action applied during this interval.
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
}

/// Test-set evaluation: mean/std fidelity and action curves plus final stats.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_step: Vec<EvalStepStat>,
    pub final_fid_mean: f64,
    pub final_fid_std: f64,
    pub max_norm_drift: f64,
    pub num_states: usize,
}

impl EvalReport {
    /// CSV with a provenance comment line, then
    /// `step,t,fid_mean,fid_std,u1_mean,u1_std,...`.
    pub fn write_csv(&self, w: &mut impl IoWrite, config_hash: &str, seed: u64) -> std::io::Result<()> {
        writeln!(w, "# config_hash={config_hash} seed={seed}")?;
        let k = self.per_step.first().map_or(0, |s| s.u_mean.len());
        let mut header = String::from("step,t,fid_mean,fid_std");
        for i in 1..=k {
            header.push_str(&format!(",u{i}_mean,u{i}_std"));
        }
        writeln!(w, "{header}")?;
        for s in &self.per_step {
            let mut line = format!("{},{},{},{}", s.step, s.t, s.fid_mean, s.fid_std);
            for i in 0..k {
                line.push_str(&format!(",{},{}", s.u_mean[i], s.u_std[i]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// How the per-step action is chosen during a rollout.
pub(crate) enum RolloutPolicy<'a> {
    /// The network output is the action (the differentiable path).
    Network,
    /// Actions are sampled from a Gaussian centered on the network output;
    /// the sampled actions enter the physics as constants.
    Gaussian {
        sigma: f64,
        rngs: &'a mut [ChaCha8Rng],
    },
}

/// Node ids and abort flags of one chunk rollout.
pub(crate) struct TapeRollout {
    pub state_nodes: Vec<NodeId>,
    pub action_nodes: Vec<NodeId>,
    /// For Gaussian rollouts: the network mean nodes, one per step.
    pub mean_nodes: Vec<NodeId>,
    pub fid_rows: Vec<NodeId>,
    pub aborted: Vec<bool>,
    pub abort_step: Vec<usize>,
}

impl TapeRollout {
    pub fn mask(&self) -> Vec<f64> {
        self.aborted.iter().map(|&a| if a { 0.0 } else { 1.0 }).collect()
    }

    pub fn num_aborted(&self) -> usize {
        self.aborted.iter().filter(|&&a| a).count()
    }
}

/// Rolls out one chunk of trajectories on the tape: at each control interval
/// the agent maps the stacked state and previous action to the next action,
/// the integrator evolves the chunk, and the fidelity row is recorded. All
/// quantities stay on the tape, so the composite loss differentiates through
/// the entire unrolled feedback loop.
pub(crate) fn rollout_chunk(
    tape: &mut Tape,
    sys: &Arc<TapeSystem>,
    arch: &AgentArch,
    bindings: &TapeBindings,
    initial: &[RealState],
    steps: &StepSpec,
    target: &RealState,
    mut policy: RolloutPolicy<'_>,
) -> TapeRollout {
    let c = initial.len();
    let d2 = 2 * sys.dim();
    let k = sys.num_controls();
    let (probe_re, probe_im) = fidelity_probes(target);
    let (probe_re, probe_im) = (Arc::new(probe_re), Arc::new(probe_im));

    let mut flat = Vec::with_capacity(d2 * c);
    for s in initial {
        assert_eq!(2 * s.dim(), d2, "initial state dimension mismatch");
        flat.extend_from_slice(&s.stacked());
    }
    let mut state = tape.leaf(d2, c, &flat);
    let mut u_prev = tape.zeros(k, c);

    let mut out = TapeRollout {
        state_nodes: vec![state],
        action_nodes: Vec::with_capacity(steps.n_steps),
        mean_nodes: Vec::with_capacity(steps.n_steps),
        fid_rows: Vec::with_capacity(steps.n_steps),
        aborted: vec![false; c],
        abort_step: vec![usize::MAX; c],
    };

    for i in 0..steps.n_steps {
        let mean = forward_tape(tape, arch, bindings, state, u_prev);
        let action = match &mut policy {
            RolloutPolicy::Network => mean,
            RolloutPolicy::Gaussian { sigma, rngs } => {
                let mu = tape.val(mean).to_vec();
                let mut sampled = mu;
                for (j, rng) in rngs.iter_mut().enumerate() {
                    for v in &mut sampled[j * k..(j + 1) * k] {
                        *v += *sigma * standard_normal(rng);
                    }
                }
                tape.leaf(k, c, &sampled)
            }
        };
        state = evolve_interval_tape(tape, sys, state, action, steps.n_sub, steps.dt);

        // quarantine any trajectory that just went non-finite
        let mut fresh_abort = false;
        {
            let sv = tape.val(state);
            for j in 0..c {
                if !out.aborted[j] && sv[j * d2..(j + 1) * d2].iter().any(|v| !v.is_finite()) {
                    out.aborted[j] = true;
                    out.abort_step[j] = i;
                    fresh_abort = true;
                }
            }
        }
        if fresh_abort {
            tape.sanitize_non_finite();
        }

        let re_part = tape.dot_const_cols(state, Arc::clone(&probe_re));
        let im_part = tape.dot_const_cols(state, Arc::clone(&probe_im));
        let re_sq = tape.square(re_part);
        let im_sq = tape.square(im_part);
        let fid = tape.add(re_sq, im_sq);

        out.mean_nodes.push(mean);
        out.action_nodes.push(action);
        out.state_nodes.push(state);
        out.fid_rows.push(fid);
        u_prev = action;
    }
    out
}

/// Box-Muller standard normal; draws two uniforms per sample.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            break v;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Extracts the plain trajectory of column `j` from a finished rollout.
pub(crate) fn extract_trajectory(tape: &Tape, roll: &TapeRollout, j: usize) -> Trajectory {
    let d2 = tape.rows(roll.state_nodes[0]);
    let k = tape.rows(roll.action_nodes[0]);
    let states: Vec<RealState> = roll
        .state_nodes
        .iter()
        .map(|&n| RealState::from_stacked_unnormalized(&tape.val(n)[j * d2..(j + 1) * d2]))
        .collect();
    let actions: Vec<ControlVector> = roll
        .action_nodes
        .iter()
        .map(|&n| ControlVector(tape.val(n)[j * k..(j + 1) * k].to_vec()))
        .collect();
    let fidelities: Vec<f64> = roll.fid_rows.iter().map(|&n| tape.val(n)[j]).collect();
    let final_norm_drift = (states.last().unwrap().norm_sq().sqrt() - 1.0).abs();
    Trajectory {
        states,
        actions,
        fidelities,
        final_norm_drift,
    }
}

/// Rolls out a single trajectory and returns it with its elementary loss
/// values.
pub fn rollout(
    system: &ControlSystem,
    params: &AgentParams,
    initial: &RealState,
    steps: &StepSpec,
    target: &RealState,
    weights: &LossWeights,
) -> Result<(Trajectory, LossParts)> {
    params.arch().validate_for(system.dim(), system.num_controls())?;
    let sys = Arc::new(TapeSystem::new(system));
    let mut tape = Tape::new();
    let bindings = TapeBindings::bind(&mut tape, params);
    let roll = rollout_chunk(
        &mut tape,
        &sys,
        params.arch(),
        &bindings,
        std::slice::from_ref(initial),
        steps,
        target,
        RolloutPolicy::Network,
    );
    if roll.aborted[0] {
        return Err(Error::NonFinite {
            context: "rollout",
            epoch: 0,
            trajectory: 0,
            step: roll.abort_step[0],
        });
    }
    let traj = extract_trajectory(&tape, &roll, 0);
    let parts = LossParts {
        loss_f: losses::loss_f(&traj.fidelities, weights.gamma)?,
        loss_fn: losses::loss_fn_final(*traj.fidelities.last().unwrap())?,
        loss_amp: losses::loss_amp(&traj.actions, false),
        loss_amp_sq: losses::loss_amp(&traj.actions, true),
    };
    Ok((traj, parts))
}

/// Per-trajectory values harvested from one chunk during training.
struct ChunkResult {
    grads: Vec<f64>,
    totals: Vec<f64>,
    parts: Vec<LossParts>,
    final_fids: Vec<f64>,
    aborted: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn train_chunk(
    tape: &mut Tape,
    sys: &Arc<TapeSystem>,
    config: &TrainConfig,
    params: &AgentParams,
    initial: &[RealState],
    target: &RealState,
    batch_total: usize,
) -> Result<ChunkResult> {
    tape.clear();
    let bindings = TapeBindings::bind(tape, params);
    let roll = rollout_chunk(
        tape,
        sys,
        &config.arch,
        &bindings,
        initial,
        &config.task.horizon,
        target,
        RolloutPolicy::Network,
    );
    let tl = losses::build_losses_tape(tape, &roll.fid_rows, &roll.action_nodes, &config.weights);
    let mask = Arc::new(roll.mask());
    let loss = tape.masked_sum(tl.total, Arc::clone(&mask), 1.0 / batch_total as f64);
    tape.backward(loss)?;

    let mut grads = Vec::with_capacity(params.num_params());
    bindings.collect_grads(tape, &mut grads);

    let c = initial.len();
    let mut res = ChunkResult {
        grads,
        totals: Vec::with_capacity(c),
        parts: Vec::with_capacity(c),
        final_fids: Vec::with_capacity(c),
        aborted: roll.aborted.clone(),
        };
    let (tot, lf, lfn, la, la2, fid_last) = (
        tape.val(tl.total).to_vec(),
        tape.val(tl.loss_f).to_vec(),
        tape.val(tl.loss_fn).to_vec(),
        tape.val(tl.loss_amp).to_vec(),
        tape.val(tl.loss_amp_sq).to_vec(),
        tape.val(*roll.fid_rows.last().unwrap()).to_vec(),
    );
    for j in 0..c {
        res.totals.push(tot[j]);
        res.parts.push(LossParts {
            loss_f: lf[j],
            loss_fn: lfn[j],
            loss_amp: la[j],
            loss_amp_sq: la2[j],
        });
        res.final_fids.push(fid_last[j]);
        // guard against silent integrator drift on surviving trajectories
        if !roll.aborted[j] {
            losses::loss_f(&[fid_last[j]], 1.0)?;
        }
    }
    Ok(res)
}

fn effective_threads(threads: usize) -> usize {
    if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
}

/// Trains the agent: per epoch, `batch` fresh initial states are sampled,
/// rolled out in chunks, and one Adam step is taken on the batch-mean loss.
pub fn train(config: &TrainConfig) -> Result<(AgentParams, History)> {
    config.validate()?;
    let system = config.task.kind.build_system()?;
    let sys = Arc::new(TapeSystem::new(&system));
    let target = config.task.target().clone();
    let mut params = AgentParams::init(config.arch.clone(), config.seed);
    let mut adam = AdamState::new(params.num_params(), config.learning_rate);
    let mut history = History::default();

    log::info!(
        "training {} for {} epochs: batch {}, lr {}, N = {}, N_sub = {}, dt = {} (substep), horizon T = {}",
        config.task.kind.name(),
        config.epochs,
        config.batch,
        config.learning_rate,
        config.task.horizon.n_steps,
        config.task.horizon.n_sub,
        config.task.horizon.dt,
        config.task.horizon.total_time()
    );

    let threads = effective_threads(config.threads);
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut serial_tape = Tape::new();

    for epoch in 0..config.epochs {
        let initial: Vec<RealState> = (0..config.batch)
            .map(|i| {
                let mut rng = stream_rng(config.seed, epoch as u64, i as u64);
                config.task.kind.sample_initial(&mut rng)
            })
            .collect();

        let chunks: Vec<&[RealState]> = initial.chunks(CHUNK).collect();
        let results: Vec<Result<ChunkResult>> = match &pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                chunks
                    .par_iter()
                    .map_init(Tape::new, |tape, chunk| {
                        train_chunk(tape, &sys, config, &params, chunk, &target, config.batch)
                    })
                    .collect()
            }),
            None => chunks
                .iter()
                .map(|chunk| {
                    train_chunk(&mut serial_tape, &sys, config, &params, chunk, &target, config.batch)
                })
                .collect(),
        };

        let mut grads = vec![0.0; params.num_params()];
        let mut sums = LossParts::default();
        let mut total_sum = 0.0;
        let mut infid_sum = 0.0;
        let mut valid = 0usize;
        let mut aborted = 0usize;
        for res in results {
            let res = res?;
            crate::kernels::axpy(&mut grads, 1.0, &res.grads);
            for j in 0..res.totals.len() {
                if res.aborted[j] {
                    aborted += 1;
                    continue;
                }
                valid += 1;
                total_sum += res.totals[j];
                sums.loss_f += res.parts[j].loss_f;
                sums.loss_fn += res.parts[j].loss_fn;
                sums.loss_amp += res.parts[j].loss_amp;
                sums.loss_amp_sq += res.parts[j].loss_amp_sq;
                infid_sum += 1.0 - res.final_fids[j];
            }
        }
        if aborted * 100 > config.batch {
            return Err(Error::FailureBudget(aborted, config.batch));
        }
        if valid == 0 {
            return Err(Error::FailureBudget(aborted, config.batch));
        }

        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("epoch {epoch}: non-finite gradient, skipping update");
        } else {
            if let Some(clip) = config.clip_grad_norm {
                let norm = crate::kernels::norm_sq(&grads).sqrt();
                if norm > clip {
                    let scale = clip / norm;
                    for g in &mut grads {
                        *g *= scale;
                    }
                }
            }
            adam.step(params.data_mut(), &grads);
        }

        let n = valid as f64;
        let record = EpochRecord {
            epoch,
            loss_total: total_sum / n,
            loss_f: sums.loss_f / n,
            loss_fn: sums.loss_fn / n,
            loss_amp: sums.loss_amp / n,
            loss_amp_sq: sums.loss_amp_sq / n,
            mean_final_infidelity: infid_sum / n,
        };
        history.records.push(record);
        if epoch % 50 == 0 || epoch + 1 == config.epochs {
            log::info!(
                "epoch {epoch}: loss {:.6e}, mean final infidelity {:.6e}{}",
                record.loss_total,
                record.mean_final_infidelity,
                if aborted > 0 { format!(", {aborted} aborted") } else { String::new() }
            );
        }
    }
    Ok((params, history))
}

/// Samples the deterministic evaluation set of a task.
pub fn sample_eval_states(task: &TaskSpec, seed: u64, count: usize) -> Vec<RealState> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, EVAL_STREAM, i as u64);
            task.kind.sample_initial(&mut rng)
        })
        .collect()
}

/// Runs the trained agent on a test set without recording gradients and
/// gathers the per-step statistics behind the evaluation curves.
///
/// Every trajectory's norm drift is asserted against [`NORM_DRIFT_LIMIT`].
pub fn evaluate(
    system: &ControlSystem,
    params: &AgentParams,
    test_states: &[RealState],
    steps: &StepSpec,
    target: &RealState,
) -> Result<EvalReport> {
    if test_states.is_empty() {
        return Err(Error::Config("evaluation needs at least one state".into()));
    }
    params.arch().validate_for(system.dim(), system.num_controls())?;
    let sys = Arc::new(TapeSystem::new(system));
    let k = system.num_controls();
    let n_steps = steps.n_steps;

    // accumulators over the test set, per step
    let mut fid_sum = vec![0.0; n_steps];
    let mut fid_sq = vec![0.0; n_steps];
    let mut u_sum = vec![0.0; n_steps * k];
    let mut u_sq = vec![0.0; n_steps * k];
    let mut max_drift = 0.0f64;

    let mut tape = Tape::new();
    for chunk in test_states.chunks(CHUNK) {
        tape.clear();
        let bindings = TapeBindings::bind(&mut tape, params);
        let roll = rollout_chunk(
            &mut tape,
            &sys,
            params.arch(),
            &bindings,
            chunk,
            steps,
            target,
            RolloutPolicy::Network,
        );
        if let Some(j) = roll.aborted.iter().position(|&a| a) {
            return Err(Error::NonFinite {
                context: "evaluate",
                epoch: 0,
                trajectory: j,
                step: roll.abort_step[j],
            });
        }
        let c = chunk.len();
        let d2 = 2 * sys.dim();
        for (i, &fid) in roll.fid_rows.iter().enumerate() {
            let fv = tape.val(fid);
            for j in 0..c {
                fid_sum[i] += fv[j];
                fid_sq[i] += fv[j] * fv[j];
            }
        }
        for (i, &act) in roll.action_nodes.iter().enumerate() {
            let av = tape.val(act);
            for j in 0..c {
                for q in 0..k {
                    let v = av[j * k + q];
                    u_sum[i * k + q] += v;
                    u_sq[i * k + q] += v * v;
                }
            }
        }
        let last = *roll.state_nodes.last().unwrap();
        let sv = tape.val(last);
        for j in 0..c {
            let nrm = crate::kernels::norm_sq(&sv[j * d2..(j + 1) * d2]).sqrt();
            let drift = (nrm - 1.0).abs();
            max_drift = max_drift.max(drift);
            if drift > NORM_DRIFT_LIMIT {
                return Err(Error::NormDrift { drift });
            }
        }
    }

    let n = test_states.len() as f64;
    let std_of = |sum: f64, sq: f64| {
        let mean = sum / n;
        (sq / n - mean * mean).max(0.0).sqrt()
    };
    let per_step = (0..n_steps)
        .map(|i| EvalStepStat {
            step: i + 1,
            t: (i + 1) as f64 * steps.interval_len(),
            fid_mean: fid_sum[i] / n,
            fid_std: std_of(fid_sum[i], fid_sq[i]),
            u_mean: (0..k).map(|q| u_sum[i * k + q] / n).collect(),
            u_std: (0..k).map(|q| std_of(u_sum[i * k + q], u_sq[i * k + q])).collect(),
        })
        .collect();

    Ok(EvalReport {
        per_step,
        final_fid_mean: fid_sum[n_steps - 1] / n,
        final_fid_std: std_of(fid_sum[n_steps - 1], fid_sq[n_steps - 1]),
        max_norm_drift: max_drift,
        num_states: test_states.len(),
    })
}
