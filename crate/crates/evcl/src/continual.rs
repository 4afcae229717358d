//! The per-task training loop, posterior propagation, baselines and coresets.
//!
//! A continual run owns one Bayesian network. For each task in a stream it
//! trains the live posterior against the previous one, snapshots the result
//! as the next prior, refreshes the elastic anchor and Fisher diagonal where
//! the method calls for them, and evaluates on every task seen so far. The
//! [`Method`] enum decides which loss the inner loop minimizes and how
//! coresets participate; everything else is shared.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bayes::{self, BayesError, NetworkSpec, PosteriorSnapshot, VariationalParams};
use crate::data::{DataError, Dataset, TaskStream};
use crate::grad::Tensor;
use crate::objectives::{
    estimate_fisher_diag, evcl_loss, point_loss, vcl_loss, EwcTerm, FisherDiag, LossBreakdown,
    ObjectiveError,
};
use crate::optim::Adam;
use crate::seeding::{self, tag};

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("task has no training data")]
    EmptyTask,
    #[error("coreset size {k} exceeds task size {n}")]
    CoresetTooLarge { k: usize, n: usize },
    #[error("invalid method configuration: {0}")]
    BadConfig(String),
    #[error("stream does not fit the network: {0}")]
    StreamMismatch(String),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
}

// ─── methods ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Variational training with both the KL term and the elastic penalty.
    Evcl,
    /// Variational training with the KL term only.
    Vcl,
    /// VCL trained on non-coreset data; prediction via a clone fine-tuned on
    /// a uniformly sampled coreset.
    VclRandomCoreset,
    /// As above with greedy k-center coreset selection.
    VclKCenterCoreset,
    /// Deterministic training of the means with the elastic penalty; the
    /// variances never move from initialization.
    Ewc,
    /// Variational training on the accumulated coreset alone.
    CoresetOnly,
    /// Deterministic training of the means with no regularization at all.
    Finetune,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Evcl,
        Method::Vcl,
        Method::VclRandomCoreset,
        Method::VclKCenterCoreset,
        Method::Ewc,
        Method::CoresetOnly,
        Method::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Evcl => "evcl",
            Method::Vcl => "vcl",
            Method::VclRandomCoreset => "vcl-random-coreset",
            Method::VclKCenterCoreset => "vcl-kcenter-coreset",
            Method::Ewc => "ewc",
            Method::CoresetOnly => "coreset-only",
            Method::Finetune => "finetune",
        }
    }

    /// Methods that maintain an elastic anchor and Fisher diagonal.
    pub fn uses_lambda(self) -> bool {
        matches!(self, Method::Evcl | Method::Ewc)
    }

    pub fn uses_coreset(self) -> bool {
        matches!(
            self,
            Method::VclRandomCoreset | Method::VclKCenterCoreset | Method::CoresetOnly
        )
    }

    /// Point methods train and predict at the posterior means; the rest are
    /// variational.
    pub fn is_point(self) -> bool {
        matches!(self, Method::Ewc | Method::Finetune)
    }

    pub fn coreset_strategy(self) -> Option<CoresetStrategy> {
        match self {
            Method::VclRandomCoreset | Method::CoresetOnly => Some(CoresetStrategy::Random),
            Method::VclKCenterCoreset => Some(CoresetStrategy::KCenter),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ContinualError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ContinualError::UnknownMethod(s.to_string()))
    }
}

/// Everything one run needs besides the stream and the network shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub lambda: f64,
    pub coreset_size: usize,
    pub mc_train: usize,
    pub mc_eval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fisher_samples: usize,
    pub seed: u64,
}

impl MethodConfig {
    /// Standard settings: 100 epochs of batch 256 at learning rate 1e-3,
    /// lambda 100 and 5000 Fisher samples where the method uses them, and a
    /// 200-point coreset where it does not.
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            lambda: if method.uses_lambda() { 100.0 } else { 0.0 },
            coreset_size: if method.uses_coreset() { 200 } else { 0 },
            mc_train: 10,
            mc_eval: 100,
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            fisher_samples: 5000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ContinualError> {
        let bad = |m: String| Err(ContinualError::BadConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.method.uses_lambda() {
            if !(self.lambda.is_finite() && self.lambda >= 0.0) {
                return bad(format!("lambda {} must be non-negative", self.lambda));
            }
            if self.fisher_samples == 0 {
                return bad("fisher sample count must be at least 1".into());
            }
        } else if self.lambda != 0.0 {
            return bad(format!("method {} does not use lambda", self.method));
        }
        if self.method.uses_coreset() {
            if self.coreset_size == 0 {
                return bad(format!("method {} needs a coreset size", self.method));
            }
        } else if self.coreset_size != 0 {
            return bad(format!("method {} does not use a coreset", self.method));
        }
        if !self.method.is_point() && (self.mc_train == 0 || self.mc_eval == 0) {
            return bad("variational methods need at least 1 Monte Carlo sample".into());
        }
        Ok(())
    }
}

// ─── state ───

/// One selected slice of past task data, kept with the head it trains.
#[derive(Debug, Clone)]
pub struct CoresetPart {
    pub data: Dataset,
    pub head: usize,
}

/// Mutable state threaded through a task sequence.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub params: VariationalParams,
    /// Previous posterior; the KL target. Equal to `params` right after a
    /// task is finalized.
    pub prior: PosteriorSnapshot,
    /// Elastic anchor and its Fisher diagonal, both from the latest finalized
    /// task; present only for methods that use lambda, and always together.
    pub anchor: Option<(PosteriorSnapshot, FisherDiag)>,
    pub coreset: Vec<CoresetPart>,
    pub completed: usize,
}

impl ContinualState {
    pub fn new(net: &NetworkSpec, seed: u64) -> Result<Self, ContinualError> {
        let params = VariationalParams::init(net, seed)?;
        let prior = params.snapshot(0);
        Ok(ContinualState {
            params,
            prior,
            anchor: None,
            coreset: Vec::new(),
            completed: 0,
        })
    }

    /// Total number of retained coreset points across all tasks.
    pub fn coreset_len(&self) -> usize {
        self.coreset.iter().map(|p| p.data.len()).sum()
    }

    fn push_coreset(&mut self, data: Dataset, head: usize) {
        self.coreset.push(CoresetPart { data, head });
    }
}

// ─── loss dispatch ───

/// Maps a method to its per-batch loss. `anchor` is ignored by methods that
/// do not use lambda; `kl_scale` and the Monte Carlo samples by point
/// methods.
#[allow(clippy::too_many_arguments)]
pub fn dispatch_loss(
    cfg: &MethodConfig,
    params: &VariationalParams,
    x: &Tensor,
    labels: &[usize],
    prior: &PosteriorSnapshot,
    anchor: Option<&(PosteriorSnapshot, FisherDiag)>,
    kl_scale: f64,
    head: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<f64>), ContinualError> {
    let terms: Vec<EwcTerm> = match anchor {
        Some((a, f)) if cfg.method.uses_lambda() => vec![EwcTerm {
            anchor: a,
            fisher: f,
            lambda: cfg.lambda,
        }],
        _ => Vec::new(),
    };
    let out = match cfg.method {
        Method::Evcl => evcl_loss(
            params, x, labels, prior, &terms, cfg.mc_train, kl_scale, head, rng,
        )?,
        Method::Vcl
        | Method::VclRandomCoreset
        | Method::VclKCenterCoreset
        | Method::CoresetOnly => {
            vcl_loss(params, x, labels, prior, cfg.mc_train, kl_scale, head, rng)?
        }
        Method::Ewc => point_loss(params, x, labels, &terms, head)?,
        Method::Finetune => point_loss(params, x, labels, &[], head)?,
    };
    Ok(out)
}

// ─── training ───

const PHASE_MAIN: u64 = 0;
const PHASE_CORESET: u64 = 1;

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Minimizes the method's loss over every part with Adam, one optimizer for
/// the whole call. Returns the per-batch loss trace, `epochs * sum over
/// parts of ceil(n_part / batch)` entries long. The KL is scaled by one over
/// the total number of points.
fn fit_parts(
    params: &mut VariationalParams,
    parts: &[(&Dataset, usize)],
    prior: &PosteriorSnapshot,
    anchor: Option<&(PosteriorSnapshot, FisherDiag)>,
    cfg: &MethodConfig,
    task_index: usize,
    phase: u64,
) -> Result<Vec<f64>, ContinualError> {
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    if total == 0 {
        return Err(ContinualError::EmptyTask);
    }
    let kl_scale = 1.0 / total as f64;
    let batches_per_epoch: usize = parts
        .iter()
        .map(|(d, _)| d.len().div_ceil(cfg.batch_size))
        .sum();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs * batches_per_epoch);
    for epoch in 0..cfg.epochs {
        for (pi, (data, head)) in parts.iter().enumerate() {
            let n = data.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut srng = seeding::rng_for(&[
                cfg.seed,
                tag::SHUFFLE,
                phase,
                task_index as u64,
                epoch as u64,
                pi as u64,
            ]);
            shuffle(&mut order, &mut srng);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch = data.gather(chunk)?;
                let mut mrng = seeding::rng_for(&[
                    cfg.seed,
                    tag::MC_TRAIN,
                    phase,
                    task_index as u64,
                    epoch as u64,
                    pi as u64,
                    b as u64,
                ]);
                let (breakdown, grads) = dispatch_loss(
                    cfg,
                    params,
                    batch.inputs(),
                    batch.labels(),
                    prior,
                    anchor,
                    kl_scale,
                    *head,
                    &mut mrng,
                )?;
                adam.update(&mut flat, &grads);
                params.copy_from_flat(&flat);
                trace.push(breakdown.total);
            }
        }
    }
    Ok(trace)
}

/// Trains the live posterior on one task's data. The prior and anchor are
/// read from the state but only `params` changes.
pub fn train_one_task(
    state: &mut ContinualState,
    data: &Dataset,
    head: usize,
    cfg: &MethodConfig,
    task_index: usize,
) -> Result<Vec<f64>, ContinualError> {
    fit_parts(
        &mut state.params,
        &[(data, head)],
        &state.prior,
        state.anchor.as_ref(),
        cfg,
        task_index,
        PHASE_MAIN,
    )
}

/// Ends a task: the live posterior becomes the next prior, and for elastic
/// methods also the new anchor, with a fresh Fisher diagonal estimated at
/// the means from at most `fisher_samples` of the task's data.
pub fn finalize_task(
    state: &mut ContinualState,
    data: &Dataset,
    head: usize,
    cfg: &MethodConfig,
    task_index: usize,
) -> Result<(), ContinualError> {
    state.prior = state.params.snapshot(task_index + 1);
    if cfg.method.uses_lambda() {
        let n = cfg.fisher_samples.min(data.len());
        let mut fisher = estimate_fisher_diag(
            &state.params,
            data.inputs(),
            data.labels(),
            head,
            n,
            seeding::mix(&[cfg.seed, task_index as u64]),
        )?;
        fisher.task_index = task_index;
        state.anchor = Some((state.prior.clone(), fisher));
    }
    state.completed = task_index + 1;
    Ok(())
}

// ─── coreset selection ───

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoresetStrategy {
    Random,
    KCenter,
}

/// Picks `k` indices from the task data: uniformly without replacement, or
/// by greedy k-center with a random first center.
pub fn select_coreset(
    data: &Dataset,
    k: usize,
    strategy: CoresetStrategy,
    seed: u64,
) -> Result<Vec<usize>, ContinualError> {
    use rand::Rng;
    let n = data.len();
    if k > n {
        return Err(ContinualError::CoresetTooLarge { k, n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut rng = seeding::rng_for(&[seed, tag::CORESET]);
    match strategy {
        CoresetStrategy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            shuffle(&mut idx, &mut rng);
            idx.truncate(k);
            Ok(idx)
        }
        CoresetStrategy::KCenter => {
            let first = rng.random_range(0..n);
            kcenter_greedy(data.inputs(), k, first)
        }
    }
}

/// Greedy farthest-point selection on raw input rows under Euclidean
/// distance, starting from `first`. Each step adds the point farthest from
/// the chosen set; ties go to the lowest index.
pub fn kcenter_greedy(
    inputs: &Tensor,
    k: usize,
    first: usize,
) -> Result<Vec<usize>, ContinualError> {
    let (n, d) = inputs
        .dims2("kcenter_greedy")
        .map_err(ObjectiveError::from)?;
    if k > n {
        return Err(ContinualError::CoresetTooLarge { k, n });
    }
    if first >= n {
        return Err(ContinualError::BadConfig(format!(
            "first center {first} out of range for {n} points"
        )));
    }
    let x = inputs.data();
    let mut dist = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(k);
    let add = |c: usize, dist: &mut [f64], taken: &mut [bool]| {
        taken[c] = true;
        for i in 0..n {
            let mut d2 = 0.0;
            for j in 0..d {
                let diff = x[i * d + j] - x[c * d + j];
                d2 += diff * diff;
            }
            if d2 < dist[i] {
                dist[i] = d2;
            }
        }
    };
    chosen.push(first);
    add(first, &mut dist, &mut taken);
    while chosen.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        chosen.push(best);
        add(best, &mut dist, &mut taken);
    }
    Ok(chosen)
}

// ─── evaluation ───

fn fraction_correct(probs: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = probs.dims2("accuracy").expect("predictions are a matrix");
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = 0;
        for j in 1..c {
            if probs.get2(i, j) > probs.get2(i, best) {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Test accuracy of the given parameters on one dataset. Variational methods
/// average the predictive distribution over `mc_eval` samples; point methods
/// predict at the means. Read-only.
pub fn evaluate(
    params: &VariationalParams,
    cfg: &MethodConfig,
    test: &Dataset,
    head: usize,
    seed: u64,
) -> Result<f64, ContinualError> {
    let probs = if cfg.method.is_point() {
        bayes::predict_point(params, test.inputs(), head)?
    } else {
        bayes::predict(params, test.inputs(), head, cfg.mc_eval, seed)?
    };
    Ok(fraction_correct(&probs, test.labels()))
}

/// Lower-triangular accuracy record: row `t` holds the accuracy on tasks
/// `0..=t` after training through task `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(
            row.len(),
            self.rows.len() + 1,
            "row t must hold exactly t+1 accuracies"
        );
        self.rows.push(row);
    }

    pub fn tasks_seen(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `tau` after training through task `t`; defined only
    /// for `tau <= t`.
    pub fn get(&self, t: usize, tau: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(tau)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Mean accuracy over all tasks seen after training through task `t`.
    pub fn avg_through(&self, t: usize) -> Option<f64> {
        self.rows
            .get(t)
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }
}

// ─── the sequence loop ───

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    /// Posterior snapshot stored at the end of each task, in order.
    pub snapshots: Vec<PosteriorSnapshot>,
    /// Per-task, per-batch training loss traces.
    pub traces: Vec<Vec<f64>>,
    pub state: ContinualState,
}

/// Runs the full task sequence for one method and seed.
///
/// Per task: train, finalize, evaluate on all tasks so far. Coreset variants
/// train on the non-coreset remainder and are evaluated through a throwaway
/// clone fine-tuned on the accumulated coreset; the propagated state never
/// sees coreset gradients. The coreset-only baseline instead trains the
/// propagated state on the accumulated coreset and nothing else.
pub fn run_task_sequence(
    stream: &TaskStream,
    net: &NetworkSpec,
    cfg: &MethodConfig,
) -> Result<RunOutcome, ContinualError> {
    cfg.validate()?;
    let mismatch = |m: String| Err(ContinualError::StreamMismatch(m));
    if net.input_dim != stream.input_dim {
        return mismatch(format!(
            "network expects {} inputs, stream provides {}",
            net.input_dim, stream.input_dim
        ));
    }
    if net.output_dim != stream.classes_per_task {
        return mismatch(format!(
            "network has {} outputs, tasks have {} classes",
            net.output_dim, stream.classes_per_task
        ));
    }
    if net.n_heads != stream.n_heads {
        return mismatch(format!(
            "network has {} heads, stream needs {}",
            net.n_heads, stream.n_heads
        ));
    }

    let mut state = ContinualState::new(net, cfg.seed)?;
    let mut matrix = AccuracyMatrix::new();
    let mut snapshots = Vec::with_capacity(stream.tasks.len());
    let mut traces = Vec::with_capacity(stream.tasks.len());

    for (t, task) in stream.tasks.iter().enumerate() {
        // The parameters this round's evaluation should use; None means the
        // propagated state itself.
        let mut eval_override: Option<VariationalParams> = None;
        let trace;
        match cfg.method {
            Method::CoresetOnly => {
                let sel = select_coreset(
                    &task.train,
                    cfg.coreset_size,
                    CoresetStrategy::Random,
                    seeding::mix(&[cfg.seed, t as u64]),
                )?;
                state.push_coreset(task.train.gather(&sel)?, task.head);
                let parts: Vec<(&Dataset, usize)> =
                    state.coreset.iter().map(|p| (&p.data, p.head)).collect();
                trace = fit_parts(
                    &mut state.params,
                    &parts,
                    &state.prior,
                    None,
                    cfg,
                    t,
                    PHASE_MAIN,
                )?;
                state.prior = state.params.snapshot(t + 1);
                state.completed = t + 1;
            }
            m if m.uses_coreset() => {
                let strategy = m.coreset_strategy().expect("coreset method");
                let sel = select_coreset(
                    &task.train,
                    cfg.coreset_size,
                    strategy,
                    seeding::mix(&[cfg.seed, t as u64]),
                )?;
                let mut in_coreset = vec![false; task.train.len()];
                for &i in &sel {
                    in_coreset[i] = true;
                }
                let rest: Vec<usize> =
                    (0..task.train.len()).filter(|&i| !in_coreset[i]).collect();
                if rest.is_empty() {
                    return Err(ContinualError::EmptyTask);
                }
                let train_ds = task.train.gather(&rest)?;
                trace = train_one_task(&mut state, &train_ds, task.head, cfg, t)?;
                finalize_task(&mut state, &train_ds, task.head, cfg, t)?;
                state.push_coreset(task.train.gather(&sel)?, task.head);

                let mut tuned = state.params.clone();
                let parts: Vec<(&Dataset, usize)> =
                    state.coreset.iter().map(|p| (&p.data, p.head)).collect();
                fit_parts(
                    &mut tuned,
                    &parts,
                    &state.prior,
                    None,
                    cfg,
                    t,
                    PHASE_CORESET,
                )?;
                eval_override = Some(tuned);
            }
            _ => {
                trace = train_one_task(&mut state, &task.train, task.head, cfg, t)?;
                finalize_task(&mut state, &task.train, task.head, cfg, t)?;
            }
        }
        snapshots.push(state.prior.clone());
        traces.push(trace);

        let eval_params = eval_override.as_ref().unwrap_or(&state.params);
        let mut row = Vec::with_capacity(t + 1);
        for (tau, seen) in stream.tasks.iter().take(t + 1).enumerate() {
            row.push(evaluate(
                eval_params,
                cfg,
                &seen.test,
                seen.head,
                seeding::mix(&[cfg.seed, t as u64, tau as u64]),
            )?);
        }
        matrix.push_row(row);
    }

    Ok(RunOutcome {
        matrix,
        snapshots,
        traces,
        state,
    })
}
