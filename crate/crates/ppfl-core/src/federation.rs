//! Synchronous federated training orchestrator and baselines.
//!
//! One round: the server broadcasts the shared block φ, every client runs
//! its local update on `θ = [φ, ψ_m]`, clips the full update, obfuscates
//! the shared-layer delta, and sends exactly that delta back; the server
//! averages the deltas and applies FedAdam. Personalized blocks ψ never
//! leave a client — the only client→server payload is a
//! [`ClientMessage`] carrying |φ| floats.
//!
//! Execution is deterministic for a fixed seed and config regardless of
//! worker count: every random draw comes from a substream keyed by
//! `(seed, domain, client id, round)`, and aggregation always sums in
//! dataset order. The [`ClientExecutor`] trait abstracts how per-round
//! client tasks run; the serial executor lives here, a threaded one in
//! the CLI crate.
//!
//! Baselines: `local` trains one model per client with plain Adam,
//! `pooled` trains one model on all clients' samples with an enlarged
//! batch, `fl` is the all-shared/no-noise configuration, and
//! `personalized` is the encoder-shared/no-noise configuration.

use alloc::string::String;

use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::Tape;
use crate::data::{ClientDataset, DataError, MinibatchCursor, SampleSet};
use crate::metrics::{mape, ClientEval, EvalReport, MaseOutcome, MetricsError};
use crate::model::{
    forecast_batch, ModelDims, ModelError, ModelSpec, PartitionScheme,
};
use crate::optim::{
    adam_train, client_update, server_update, AdamHyper, AdamState, FedAdamHyper, FedAdamState,
    OptimError,
};
use crate::privacy::{noise_update, DpConfig, PrivacyError};
use crate::rng::{substream, StreamDomain};

#[derive(Debug, Clone, PartialEq)]
pub enum FedError {
    Config(String),
    Data(DataError),
    Optim(OptimError),
    Privacy(PrivacyError),
    Model(ModelError),
    Metrics(MetricsError),
}

impl fmt::Display for FedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FedError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            FedError::Data(e) => write!(f, "{e}"),
            FedError::Optim(e) => write!(f, "{e}"),
            FedError::Privacy(e) => write!(f, "{e}"),
            FedError::Model(e) => write!(f, "{e}"),
            FedError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for FedError {}

impl From<DataError> for FedError {
    fn from(e: DataError) -> Self {
        FedError::Data(e)
    }
}
impl From<OptimError> for FedError {
    fn from(e: OptimError) -> Self {
        FedError::Optim(e)
    }
}
impl From<PrivacyError> for FedError {
    fn from(e: PrivacyError) -> Self {
        FedError::Privacy(e)
    }
}
impl From<ModelError> for FedError {
    fn from(e: ModelError) -> Self {
        FedError::Model(e)
    }
}
impl From<MetricsError> for FedError {
    fn from(e: MetricsError) -> Self {
        FedError::Metrics(e)
    }
}

/// Training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Personalization layers plus obfuscated shared updates.
    Ppfl,
    /// One model per client, trained only on its own data.
    Local,
    /// One model on everyone's data.
    Pooled,
    /// Classical federation: all layers shared, no noise.
    Fl,
    /// Personalization layers, no noise.
    Personalized,
}

impl Mode {
    pub fn is_federated(&self) -> bool {
        matches!(self, Mode::Ppfl | Mode::Fl | Mode::Personalized)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ppfl => "ppfl",
            Mode::Local => "local",
            Mode::Pooled => "pooled",
            Mode::Fl => "fl",
            Mode::Personalized => "personalized",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl core::str::FromStr for Mode {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ppfl" => Ok(Mode::Ppfl),
            "local" => Ok(Mode::Local),
            "pooled" => Ok(Mode::Pooled),
            "fl" => Ok(Mode::Fl),
            "personalized" => Ok(Mode::Personalized),
            other => Err(FedError::Config(alloc::format!("unknown mode '{other}'"))),
        }
    }
}

/// Everything a run needs. `partition` overrides the mode's default
/// scheme (only meaningful for `ppfl`).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Server rounds K.
    pub server_epochs: usize,
    /// Local minibatch steps per round K̃.
    pub client_epochs: usize,
    pub batch: usize,
    pub clip: f64,
    pub dp: DpConfig,
    pub dims: ModelDims,
    pub seed: u64,
    /// Validation-loss cadence in rounds.
    pub eval_every: usize,
    /// Pooled-mode batch override; defaults to `M × batch`.
    pub pooled_batch: Option<usize>,
    pub partition: Option<PartitionScheme>,
    /// Snapshot cadence in rounds for interval checkpoints (0 = final only).
    pub checkpoint_every: usize,
    pub client_opt: AdamHyper,
    pub server_opt: FedAdamHyper,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 200 rounds, 16-wide states.
    pub fn desk(mode: Mode, seed: u64) -> Self {
        ExperimentConfig {
            mode,
            server_epochs: 200,
            client_epochs: 5,
            batch: 64,
            clip: 200.0,
            dp: DpConfig::off(200.0),
            dims: ModelDims::desk(),
            seed,
            eval_every: 25,
            pooled_batch: None,
            checkpoint_every: 0,
            partition: None,
            client_opt: AdamHyper::default(),
            server_opt: FedAdamHyper::default(),
        }
    }

    /// Full-scale defaults: 4000 rounds, 30-wide states.
    pub fn full_scale(mode: Mode, seed: u64) -> Self {
        ExperimentConfig {
            server_epochs: 4000,
            dims: ModelDims::full(),
            ..Self::desk(mode, seed)
        }
    }

    pub fn scheme(&self) -> PartitionScheme {
        match self.mode {
            Mode::Fl => PartitionScheme::AllShared,
            _ => self.partition.unwrap_or(PartitionScheme::EncoderShared),
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        if self.client_epochs == 0 {
            return Err(FedError::Config(String::from("client epochs must be >= 1")));
        }
        if self.batch == 0 {
            return Err(FedError::Config(String::from("batch size must be >= 1")));
        }
        if self.eval_every == 0 {
            return Err(FedError::Config(String::from("eval cadence must be >= 1")));
        }
        if self.clip <= 0.0 {
            return Err(FedError::Config(String::from("clip value must be positive")));
        }
        let noise_on = !self.dp.epsilon.is_off();
        if noise_on && self.mode != Mode::Ppfl {
            return Err(FedError::Config(alloc::format!(
                "epsilon must be off for mode '{}'",
                self.mode
            )));
        }
        if self.mode == Mode::Fl && self.partition == Some(PartitionScheme::EncoderShared) {
            return Err(FedError::Config(String::from(
                "mode 'fl' shares all layers; partition override conflicts",
            )));
        }
        self.dp.validate(self.clip)?;
        let d = &self.dims;
        if d.features == 0 || d.window == 0 || d.horizon == 0 || d.hidden == 0 || d.stack == 0 {
            return Err(FedError::Config(String::from("model dimensions must be positive")));
        }
        Ok(())
    }
}

/// One client→server payload: the noisy shared-layer delta and nothing
/// else. Serialization is little-endian f64, so the float count is
/// auditable from the byte length.
#[derive(Debug, Clone)]
pub struct ClientMessage {
    pub round: usize,
    pub client: u32,
    pub payload: Vec<f64>,
}

impl ClientMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() * 8);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn float_count(&self) -> usize {
        self.payload.len()
    }
}

/// Per-(round, client) training telemetry.
#[derive(Debug, Clone)]
pub struct RoundTelemetry {
    pub round: usize,
    pub client: u32,
    pub train_loss: f64,
    pub delta_l1_pre: f64,
    pub delta_l1_post: f64,
    pub noise_l1: f64,
    pub seconds: f64,
}

/// Validation loss snapshot.
#[derive(Debug, Clone)]
pub struct ValRecord {
    pub round: usize,
    pub client: u32,
    pub val_loss: f64,
}

/// Size audit of one client→server message.
#[derive(Debug, Clone, Copy)]
pub struct MessageAudit {
    pub round: usize,
    pub client: u32,
    pub floats: usize,
}

/// A trained model for one dataset slot.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub client_id: u32,
    pub theta: Vec<f64>,
}

/// Mid-run parameter snapshot for interval checkpoints.
#[derive(Debug, Clone)]
pub struct RoundSnapshot {
    pub round: usize,
    pub server_phi: Vec<f64>,
    pub models: Vec<ClientModel>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub scheme: PartitionScheme,
    pub dims: ModelDims,
    /// Final server φ; empty for local/pooled.
    pub server_phi: Vec<f64>,
    /// One model per dataset slot (each client's own last local copy for
    /// federated modes; the single pooled model is replicated per slot).
    pub models: Vec<ClientModel>,
    pub telemetry: Vec<RoundTelemetry>,
    pub val_records: Vec<ValRecord>,
    pub message_audits: Vec<MessageAudit>,
    /// Interval snapshots when `checkpoint_every > 0`.
    pub snapshots: Vec<RoundSnapshot>,
}

impl RunResult {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(self.dims, self.scheme)
    }
}

/// Per-client state owned by the orchestrator and moved through tasks.
pub struct ClientWorker {
    pub id: u32,
    pub data: ClientDataset,
    pub psi: Vec<f64>,
    pub last_phi: Vec<f64>,
    cursor: MinibatchCursor,
    tape: Tape,
    solo_state: Option<AdamState>,
}

/// One unit of client work for a round.
pub struct ClientTask {
    pub round: usize,
    pub phi: Vec<f64>,
    pub compute_val: bool,
    pub worker: ClientWorker,
}

/// What a task returns; `seconds` is filled in by the executor.
pub struct TaskOutput {
    pub worker: ClientWorker,
    pub train_loss: f64,
    pub delta_l1_pre: f64,
    pub delta_l1_post: f64,
    pub noise_l1: f64,
    pub message: Option<ClientMessage>,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// Runs a round's client tasks. Implementations must return outputs in
/// task order and may parallelize freely: task math is self-contained and
/// keyed by `(client id, round)`, so scheduling cannot change results.
pub trait ClientExecutor {
    fn run(
        &self,
        tasks: Vec<ClientTask>,
        work: &(dyn Fn(ClientTask) -> Result<TaskOutput, FedError> + Sync),
    ) -> Vec<Result<TaskOutput, FedError>>;
}

/// In-order, single-context executor.
pub struct SerialExecutor;

impl ClientExecutor for SerialExecutor {
    fn run(
        &self,
        tasks: Vec<ClientTask>,
        work: &(dyn Fn(ClientTask) -> Result<TaskOutput, FedError> + Sync),
    ) -> Vec<Result<TaskOutput, FedError>> {
        tasks.into_iter().map(work).collect()
    }
}

/// Mean squared forecast error of `theta` over a sample set, computed in
/// bounded-size chunks.
pub fn dataset_mean_loss(
    spec: &ModelSpec,
    theta: &[f64],
    set: &SampleSet,
    tape: &mut Tape,
) -> Result<f64, FedError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(256) {
        let batch = set.gather(chunk);
        let forecasts = forecast_batch(tape, spec, theta, &batch)?;
        for (f, y) in forecasts.iter().zip(&batch.y_target) {
            let d = f - y;
            total += d * d;
        }
    }
    Ok(total / set.len() as f64)
}

fn make_workers(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    datasets: Vec<ClientDataset>,
) -> Result<Vec<ClientWorker>, FedError> {
    if datasets.is_empty() {
        return Err(FedError::Config(String::from("need at least one client dataset")));
    }
    let mut workers = Vec::with_capacity(datasets.len());
    for data in datasets {
        if data.train.is_empty() {
            return Err(FedError::Optim(OptimError::EmptyDataset));
        }
        let id = data.client_id;
        let mut psi_rng = substream(cfg.seed, StreamDomain::PersonalInit, id as u64, 0);
        let psi = spec.init_personal(&mut psi_rng);
        let cursor = MinibatchCursor::new(
            data.train.len(),
            substream(cfg.seed, StreamDomain::Minibatch, id as u64, 0),
        );
        workers.push(ClientWorker {
            id,
            data,
            psi,
            last_phi: Vec::new(),
            cursor,
            tape: Tape::new(),
            solo_state: None,
        });
    }
    Ok(workers)
}

fn ppfl_client_round(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    mut task: ClientTask,
) -> Result<TaskOutput, FedError> {
    let worker = &mut task.worker;
    let out = client_update(
        spec,
        &task.phi,
        &worker.psi,
        &worker.data.train,
        &mut worker.cursor,
        cfg.client_epochs,
        cfg.clip,
        cfg.batch,
        &cfg.client_opt,
        &mut worker.tape,
    )?;
    let delta: Vec<f64> = out.phi.iter().zip(&task.phi).map(|(a, b)| a - b).collect();
    let mut noise_rng =
        substream(cfg.seed, StreamDomain::Noise, worker.id as u64, task.round as u64);
    let (noisy, noise_l1) = noise_update(&delta, &cfg.dp, &mut noise_rng)?;
    worker.psi = out.psi;
    worker.last_phi = out.phi;
    let val_loss = if task.compute_val {
        let theta = spec.merge(&worker.last_phi, &worker.psi)?;
        Some(dataset_mean_loss(spec, &theta, &worker.data.val, &mut worker.tape)?)
    } else {
        None
    };
    let message =
        ClientMessage { round: task.round, client: worker.id, payload: noisy };
    Ok(TaskOutput {
        worker: task.worker,
        train_loss: out.train_loss,
        delta_l1_pre: out.delta_l1_pre,
        delta_l1_post: out.delta_l1_post,
        noise_l1,
        message: Some(message),
        val_loss,
        seconds: 0.0,
    })
}

/// The synchronous federated protocol: K rounds of broadcast → client
/// update → obfuscate → aggregate. Returns the final server φ, each
/// client's own last `(φ_m, ψ_m)`, and the full telemetry.
pub fn run_ppfl<E: ClientExecutor>(
    cfg: &ExperimentConfig,
    datasets: Vec<ClientDataset>,
    executor: &E,
) -> Result<RunResult, FedError> {
    cfg.validate()?;
    if !cfg.mode.is_federated() {
        return Err(FedError::Config(alloc::format!(
            "run_ppfl handles federated modes, got '{}'",
            cfg.mode
        )));
    }
    let spec = ModelSpec::new(cfg.dims, cfg.scheme());
    let mut workers = make_workers(cfg, &spec, datasets)?;

    let mut phi_rng = substream(cfg.seed, StreamDomain::SharedInit, 0, 0);
    let mut phi = spec.init_shared(&mut phi_rng);
    for w in workers.iter_mut() {
        w.last_phi = phi.clone();
    }
    let mut server_state = FedAdamState::new(phi.len());

    let mut telemetry = Vec::new();
    let mut val_records = Vec::new();
    let mut message_audits = Vec::new();
    let mut snapshots = Vec::new();

    for round in 1..=cfg.server_epochs {
        let compute_val = round % cfg.eval_every == 0 || round == cfg.server_epochs;
        let tasks: Vec<ClientTask> = workers
            .drain(..)
            .map(|worker| ClientTask { round, phi: phi.clone(), compute_val, worker })
            .collect();
        let outputs = executor.run(tasks, &|task| ppfl_client_round(cfg, &spec, task));

        let mut deltas = Vec::with_capacity(outputs.len());
        workers = Vec::with_capacity(outputs.len());
        for out in outputs {
            let out = out?;
            let message = out.message.expect("federated task always produces a message");
            message_audits.push(MessageAudit {
                round,
                client: message.client,
                floats: message.float_count(),
            });
            telemetry.push(RoundTelemetry {
                round,
                client: out.worker.id,
                train_loss: out.train_loss,
                delta_l1_pre: out.delta_l1_pre,
                delta_l1_post: out.delta_l1_post,
                noise_l1: out.noise_l1,
                seconds: out.seconds,
            });
            if let Some(val_loss) = out.val_loss {
                val_records.push(ValRecord { round, client: out.worker.id, val_loss });
            }
            deltas.push(message.payload);
            workers.push(out.worker);
        }
        phi = server_update(&phi, &deltas, &mut server_state, &cfg.server_opt)?;
        if cfg.checkpoint_every > 0
            && round % cfg.checkpoint_every == 0
            && round != cfg.server_epochs
        {
            snapshots.push(RoundSnapshot {
                round,
                server_phi: phi.clone(),
                models: collect_models(&spec, &workers)?,
            });
        }
    }

    let models = collect_models(&spec, &workers)?;
    Ok(RunResult {
        mode: cfg.mode,
        scheme: cfg.scheme(),
        dims: cfg.dims,
        server_phi: phi,
        models,
        telemetry,
        val_records,
        message_audits,
        snapshots,
    })
}

fn collect_models(spec: &ModelSpec, workers: &[ClientWorker]) -> Result<Vec<ClientModel>, FedError> {
    workers
        .iter()
        .map(|w| {
            let theta = spec.merge(&w.last_phi, &w.psi)?;
            Ok(ClientModel { client_id: w.id, theta })
        })
        .collect()
}

fn solo_init(cfg: &ExperimentConfig, spec: &ModelSpec, id: u32) -> Vec<f64> {
    let mut shared_rng = substream(cfg.seed, StreamDomain::SharedInit, id as u64, 0);
    let mut theta = spec.init_shared(&mut shared_rng);
    let mut personal_rng = substream(cfg.seed, StreamDomain::PersonalInit, id as u64, 0);
    theta.extend(spec.init_personal(&mut personal_rng));
    theta
}

fn solo_chunk(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    mut task: ClientTask,
) -> Result<TaskOutput, FedError> {
    let worker = &mut task.worker;
    let mut theta = spec.merge(&task.phi, &worker.psi)?;
    let state = worker
        .solo_state
        .get_or_insert_with(|| AdamState::new(theta.len(), &cfg.client_opt));
    let theta_before = theta.clone();
    let stats = adam_train(
        spec,
        &mut theta,
        state,
        &worker.data.train,
        &mut worker.cursor,
        cfg.client_epochs,
        cfg.batch,
        &cfg.client_opt,
        &mut worker.tape,
    )?;
    let train_loss = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len() as f64;
    let moved: f64 =
        theta.iter().zip(&theta_before).map(|(a, b)| libm::fabs(a - b)).sum();
    let (phi, psi) = spec.partition(&theta)?;
    worker.last_phi = phi;
    worker.psi = psi;
    let val_loss = if task.compute_val {
        Some(dataset_mean_loss(spec, &theta, &worker.data.val, &mut worker.tape)?)
    } else {
        None
    };
    Ok(TaskOutput {
        worker: task.worker,
        train_loss,
        delta_l1_pre: moved,
        delta_l1_post: moved,
        noise_l1: 0.0,
        message: None,
        val_loss,
        seconds: 0.0,
    })
}

fn run_local<E: ClientExecutor>(
    cfg: &ExperimentConfig,
    datasets: Vec<ClientDataset>,
    executor: &E,
) -> Result<RunResult, FedError> {
    let spec = ModelSpec::new(cfg.dims, cfg.scheme());
    let mut workers = make_workers(cfg, &spec, datasets)?;
    // Solo training owns the full θ; the φ/ψ split is bookkeeping only.
    for w in workers.iter_mut() {
        let theta = solo_init(cfg, &spec, w.id);
        let (phi, psi) = spec.partition(&theta)?;
        w.last_phi = phi;
        w.psi = psi;
    }

    let mut telemetry = Vec::new();
    let mut val_records = Vec::new();
    let mut snapshots = Vec::new();
    for round in 1..=cfg.server_epochs {
        let compute_val = round % cfg.eval_every == 0 || round == cfg.server_epochs;
        let tasks: Vec<ClientTask> = workers
            .drain(..)
            .map(|worker| ClientTask {
                round,
                phi: worker.last_phi.clone(),
                compute_val,
                worker,
            })
            .collect();
        let outputs = executor.run(tasks, &|task| solo_chunk(cfg, &spec, task));
        workers = Vec::with_capacity(outputs.len());
        for out in outputs {
            let out = out?;
            telemetry.push(RoundTelemetry {
                round,
                client: out.worker.id,
                train_loss: out.train_loss,
                delta_l1_pre: out.delta_l1_pre,
                delta_l1_post: out.delta_l1_post,
                noise_l1: 0.0,
                seconds: out.seconds,
            });
            if let Some(val_loss) = out.val_loss {
                val_records.push(ValRecord { round, client: out.worker.id, val_loss });
            }
            workers.push(out.worker);
        }
        if cfg.checkpoint_every > 0
            && round % cfg.checkpoint_every == 0
            && round != cfg.server_epochs
        {
            snapshots.push(RoundSnapshot {
                round,
                server_phi: Vec::new(),
                models: collect_models(&spec, &workers)?,
            });
        }
    }

    let models = collect_models(&spec, &workers)?;
    Ok(RunResult {
        mode: cfg.mode,
        scheme: cfg.scheme(),
        dims: cfg.dims,
        server_phi: Vec::new(),
        models,
        telemetry,
        val_records,
        message_audits: Vec::new(),
        snapshots,
    })
}

fn run_pooled(
    cfg: &ExperimentConfig,
    datasets: Vec<ClientDataset>,
) -> Result<RunResult, FedError> {
    if datasets.is_empty() {
        return Err(FedError::Config(String::from("need at least one client dataset")));
    }
    let spec = ModelSpec::new(cfg.dims, cfg.scheme());
    // Concatenate normalized training windows in dataset order; stream
    // keys follow the first client so a single-client pool reduces to
    // that client's local run.
    let lead_id = datasets[0].client_id;
    let mut pooled = SampleSet::with_capacity(cfg.dims.window, cfg.dims.features, 0);
    for ds in &datasets {
        if ds.train.is_empty() {
            return Err(FedError::Optim(OptimError::EmptyDataset));
        }
        pooled.extend_from(&ds.train);
    }
    let batch = cfg.pooled_batch.unwrap_or(datasets.len() * cfg.batch);
    let steps = cfg.server_epochs * cfg.client_epochs;

    let mut theta = solo_init(cfg, &spec, lead_id);
    let mut state = AdamState::new(theta.len(), &cfg.client_opt);
    let mut cursor = MinibatchCursor::new(
        pooled.len(),
        substream(cfg.seed, StreamDomain::Minibatch, lead_id as u64, 0),
    );
    let mut tape = Tape::new();

    let mut telemetry = Vec::with_capacity(steps);
    let mut val_records = Vec::new();
    for step in 1..=steps {
        let theta_before = theta.clone();
        let stats = adam_train(
            &spec,
            &mut theta,
            &mut state,
            &pooled,
            &mut cursor,
            1,
            batch,
            &cfg.client_opt,
            &mut tape,
        )?;
        let moved: f64 =
            theta.iter().zip(&theta_before).map(|(a, b)| libm::fabs(a - b)).sum();
        telemetry.push(RoundTelemetry {
            round: step,
            client: lead_id,
            train_loss: stats[0].loss,
            delta_l1_pre: moved,
            delta_l1_post: moved,
            noise_l1: 0.0,
            seconds: 0.0,
        });
        if step % (cfg.eval_every * cfg.client_epochs) == 0 || step == steps {
            let mut total = 0.0;
            for ds in &datasets {
                total += dataset_mean_loss(&spec, &theta, &ds.val, &mut tape)?;
            }
            val_records.push(ValRecord {
                round: step,
                client: lead_id,
                val_loss: total / datasets.len() as f64,
            });
        }
    }

    let models = datasets
        .iter()
        .map(|ds| ClientModel { client_id: ds.client_id, theta: theta.clone() })
        .collect();
    Ok(RunResult {
        mode: cfg.mode,
        scheme: cfg.scheme(),
        dims: cfg.dims,
        server_phi: Vec::new(),
        models,
        telemetry,
        val_records,
        message_audits: Vec::new(),
        snapshots: Vec::new(),
    })
}

/// Local and pooled baselines.
pub fn run_baseline<E: ClientExecutor>(
    cfg: &ExperimentConfig,
    datasets: Vec<ClientDataset>,
    executor: &E,
) -> Result<RunResult, FedError> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Local => run_local(cfg, datasets, executor),
        Mode::Pooled => run_pooled(cfg, datasets),
        other => Err(FedError::Config(alloc::format!(
            "run_baseline handles local/pooled, got '{other}'"
        ))),
    }
}

/// Dispatch on the configured mode.
pub fn run_experiment<E: ClientExecutor>(
    cfg: &ExperimentConfig,
    datasets: Vec<ClientDataset>,
    executor: &E,
) -> Result<RunResult, FedError> {
    if cfg.mode.is_federated() {
        run_ppfl(cfg, datasets, executor)
    } else {
        run_baseline(cfg, datasets, executor)
    }
}

/// Which parameters evaluation combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalVariant {
    /// Each client's own final `(φ_m, ψ_m)`.
    ClientOwn,
    /// The server's final φ combined with each client's ψ.
    ServerShared,
}

/// Evaluate a run on each client's test split, in original units.
pub fn evaluate(
    run: &RunResult,
    datasets: &[ClientDataset],
    variant: EvalVariant,
) -> Result<EvalReport, FedError> {
    let spec = run.spec();
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(run.models.len());
    for (model, ds) in run.models.iter().zip(datasets) {
        let theta = match variant {
            EvalVariant::ClientOwn => model.theta.clone(),
            EvalVariant::ServerShared => {
                if run.server_phi.is_empty() {
                    model.theta.clone()
                } else {
                    let (_, psi) = spec.partition(&model.theta)?;
                    spec.merge(&run.server_phi, &psi)?
                }
            }
        };
        let mut forecasts_kwh = Vec::with_capacity(ds.test.len());
        let indices: Vec<usize> = (0..ds.test.len()).collect();
        for chunk in indices.chunks(256) {
            let batch = ds.test.gather(chunk);
            for f in forecast_batch(&mut tape, &spec, &theta, &batch)? {
                forecasts_kwh.push(ds.scaler.denorm_load(f));
            }
        }
        let mase_out = mase_against_reference(
            &ds.test_actual_kwh,
            &forecasts_kwh,
            &ds.test_persistence_kwh,
        )?;
        let mape_out = mape(&ds.test_actual_kwh, &forecasts_kwh)?;
        rows.push(ClientEval {
            client: model.client_id,
            mase: mase_out.value,
            mase_zero_denominator: mase_out.zero_denominator,
            mape: mape_out.percent,
            n_points: ds.test.len(),
            n_excluded: mape_out.excluded,
        });
    }
    Ok(EvalReport::from_rows(rows))
}

/// MASE with explicit persistence references (`y_{t-L}` per point).
pub fn mase_against_reference(
    actual: &[f64],
    forecast: &[f64],
    persistence: &[f64],
) -> Result<MaseOutcome, MetricsError> {
    if actual.is_empty() {
        return Err(MetricsError::Empty);
    }
    if forecast.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            what: "forecast",
            expected: actual.len(),
            got: forecast.len(),
        });
    }
    if persistence.len() != actual.len() {
        return Err(MetricsError::LengthMismatch {
            what: "persistence",
            expected: actual.len(),
            got: persistence.len(),
        });
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for ((y, f), p) in actual.iter().zip(forecast).zip(persistence) {
        numerator += libm::fabs(y - f);
        denominator += libm::fabs(y - p);
    }
    if denominator == 0.0 {
        return Ok(MaseOutcome { value: f64::INFINITY, zero_denominator: true });
    }
    Ok(MaseOutcome { value: numerator / denominator, zero_denominator: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_client, synth_generate, SplitSpec};
    use crate::privacy::Epsilon;

    fn tiny_cfg(mode: Mode, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            server_epochs: 3,
            client_epochs: 2,
            batch: 8,
            dims: ModelDims {
                features: 9,
                window: 4,
                horizon: 2,
                hidden: 3,
                stack: 2,
                fc_hidden: 3,
            },
            ..ExperimentConfig::desk(mode, seed)
        }
    }

    fn tiny_datasets(cfg: &ExperimentConfig, clients: usize, days: usize) -> Vec<ClientDataset> {
        synth_generate(clients, days, cfg.seed)
            .unwrap()
            .iter()
            .map(|s| prepare_client(s, cfg.dims.window, cfg.dims.horizon, &SplitSpec::default()).unwrap())
            .collect()
    }

    fn theta_bits_equal(a: &RunResult, b: &RunResult) -> bool {
        a.models.len() == b.models.len()
            && a.models.iter().zip(&b.models).all(|(x, y)| {
                x.theta.len() == y.theta.len()
                    && x.theta.iter().zip(&y.theta).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn config_validation_rules() {
        let mut cfg = tiny_cfg(Mode::Fl, 1);
        cfg.dp.epsilon = Epsilon::Budget(1.0);
        assert!(matches!(cfg.validate(), Err(FedError::Config(_))));

        let mut cfg = tiny_cfg(Mode::Personalized, 1);
        cfg.dp.epsilon = Epsilon::Budget(1.0);
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg(Mode::Ppfl, 1);
        cfg.dp.epsilon = Epsilon::Budget(10.0);
        assert!(cfg.validate().is_ok());
        cfg.dp.clip = cfg.clip + 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg(Mode::Fl, 1);
        cfg.partition = Some(PartitionScheme::EncoderShared);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_rounds_returns_initial_parameters() {
        let mut cfg = tiny_cfg(Mode::Ppfl, 7);
        cfg.server_epochs = 0;
        let datasets = tiny_datasets(&cfg, 2, 4);
        let run = run_ppfl(&cfg, datasets, &SerialExecutor).unwrap();
        let spec = run.spec();
        // Initial parameters are reproducible from the seed streams.
        let mut phi_rng = substream(cfg.seed, StreamDomain::SharedInit, 0, 0);
        let phi0 = spec.init_shared(&mut phi_rng);
        assert_eq!(run.server_phi, phi0);
        for model in &run.models {
            let (phi_m, psi_m) = spec.partition(&model.theta).unwrap();
            assert_eq!(phi_m, phi0);
            let mut psi_rng =
                substream(cfg.seed, StreamDomain::PersonalInit, model.client_id as u64, 0);
            assert_eq!(psi_m, spec.init_personal(&mut psi_rng));
        }
        assert!(run.telemetry.is_empty());
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let cfg = tiny_cfg(Mode::Ppfl, 11);
        let a = run_ppfl(&cfg, tiny_datasets(&cfg, 2, 4), &SerialExecutor).unwrap();
        let b = run_ppfl(&cfg, tiny_datasets(&cfg, 2, 4), &SerialExecutor).unwrap();
        assert!(theta_bits_equal(&a, &b));
        assert_eq!(a.server_phi, b.server_phi);
    }

    #[test]
    fn personalized_equals_ppfl_with_noise_off() {
        for seed in [1, 42, 1234] {
            let cfg_p = tiny_cfg(Mode::Personalized, seed);
            let cfg_q = tiny_cfg(Mode::Ppfl, seed); // dp off by default
            let a = run_ppfl(&cfg_p, tiny_datasets(&cfg_p, 2, 4), &SerialExecutor).unwrap();
            let b = run_ppfl(&cfg_q, tiny_datasets(&cfg_q, 2, 4), &SerialExecutor).unwrap();
            assert!(theta_bits_equal(&a, &b), "seed {seed}");
        }
    }

    #[test]
    fn ppfl_empty_personal_partition_equals_fl() {
        let seed = 5;
        let mut cfg_a = tiny_cfg(Mode::Ppfl, seed);
        cfg_a.partition = Some(PartitionScheme::AllShared);
        let cfg_b = tiny_cfg(Mode::Fl, seed);
        let a = run_ppfl(&cfg_a, tiny_datasets(&cfg_a, 2, 4), &SerialExecutor).unwrap();
        let b = run_ppfl(&cfg_b, tiny_datasets(&cfg_b, 2, 4), &SerialExecutor).unwrap();
        assert!(theta_bits_equal(&a, &b));
        assert_eq!(a.server_phi, b.server_phi);
    }

    #[test]
    fn messages_carry_exactly_the_shared_block() {
        let mut cfg = tiny_cfg(Mode::Ppfl, 3);
        cfg.dp.epsilon = Epsilon::Budget(10.0);
        let datasets = tiny_datasets(&cfg, 2, 4);
        let spec = ModelSpec::new(cfg.dims, cfg.scheme());
        let run = run_ppfl(&cfg, datasets, &SerialExecutor).unwrap();
        assert_eq!(run.message_audits.len(), cfg.server_epochs * 2);
        for audit in &run.message_audits {
            assert_eq!(audit.floats, spec.shared_len());
        }
        // Serialized payload length agrees: 8 bytes per float.
        let msg = ClientMessage { round: 1, client: 0, payload: alloc::vec![0.5; 7] };
        assert_eq!(msg.to_bytes().len(), 56);
    }

    #[test]
    fn single_client_aggregate_receives_its_clipped_delta() {
        // M=1, noise off: the averaged update equals the one client's
        // clipped delta, so FedAdam sees it unchanged.
        let cfg = tiny_cfg(Mode::Personalized, 9);
        let datasets = tiny_datasets(&cfg, 1, 4);
        let run = run_ppfl(&cfg, datasets, &SerialExecutor).unwrap();
        assert_eq!(run.message_audits.len(), cfg.server_epochs);
        assert!(run.telemetry.iter().all(|t| t.noise_l1 == 0.0));
        // Message size is |φ| and pre/post clip norms were recorded.
        for t in &run.telemetry {
            assert!(t.delta_l1_post <= cfg.clip + 1e-9);
        }
    }

    #[test]
    fn local_models_do_not_depend_on_slot_order() {
        let cfg = tiny_cfg(Mode::Local, 13);
        let mut sets_a = tiny_datasets(&cfg, 2, 4);
        let a = run_baseline(&cfg, sets_a.clone(), &SerialExecutor).unwrap();
        sets_a.swap(0, 1);
        let b = run_baseline(&cfg, sets_a, &SerialExecutor).unwrap();
        // Permuted slots, same per-client models.
        for model in &a.models {
            let twin = b.models.iter().find(|m| m.client_id == model.client_id).unwrap();
            assert!(model.theta.iter().zip(&twin.theta).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn pooled_single_client_equals_local() {
        let cfg_local = tiny_cfg(Mode::Local, 17);
        let cfg_pooled =
            ExperimentConfig { pooled_batch: Some(8), ..tiny_cfg(Mode::Pooled, 17) };
        let local = run_baseline(&cfg_local, tiny_datasets(&cfg_local, 1, 4), &SerialExecutor)
            .unwrap();
        let pooled =
            run_baseline(&cfg_pooled, tiny_datasets(&cfg_pooled, 1, 4), &SerialExecutor).unwrap();
        assert!(theta_bits_equal(&local, &pooled));
    }

    #[test]
    fn telemetry_row_counts_follow_the_mode() {
        let cfg = tiny_cfg(Mode::Personalized, 21);
        let run = run_ppfl(&cfg, tiny_datasets(&cfg, 2, 4), &SerialExecutor).unwrap();
        assert_eq!(run.telemetry.len(), cfg.server_epochs * 2);

        let cfg = tiny_cfg(Mode::Local, 21);
        let run = run_baseline(&cfg, tiny_datasets(&cfg, 2, 4), &SerialExecutor).unwrap();
        assert_eq!(run.telemetry.len(), cfg.server_epochs * 2);

        let cfg = tiny_cfg(Mode::Pooled, 21);
        let run = run_baseline(&cfg, tiny_datasets(&cfg, 2, 4), &SerialExecutor).unwrap();
        assert_eq!(run.telemetry.len(), cfg.server_epochs * cfg.client_epochs);
    }

    #[test]
    fn objective_matches_hand_average_on_zero_model() {
        // Zero parameters forecast 0, so the per-sample loss is y² and
        // the two-client objective is the mean of the per-client means.
        let cfg = tiny_cfg(Mode::Personalized, 23);
        let spec = ModelSpec::new(cfg.dims, cfg.scheme());
        let datasets = tiny_datasets(&cfg, 2, 4);
        let theta = alloc::vec![0.0; spec.total_len()];
        let mut tape = Tape::new();
        let mut by_hand = 0.0;
        let mut by_code = 0.0;
        for ds in &datasets {
            let mut client_mean = 0.0;
            for i in 0..ds.train.len() {
                let y = ds.train.sample(i).y_target;
                client_mean += y * y;
            }
            by_hand += client_mean / ds.train.len() as f64;
            by_code += dataset_mean_loss(&spec, &theta, &ds.train, &mut tape).unwrap();
        }
        by_hand /= 2.0;
        by_code /= 2.0;
        assert!((by_hand - by_code).abs() < 1e-12);
    }

    #[test]
    fn evaluation_supports_both_variants() {
        let cfg = tiny_cfg(Mode::Personalized, 29);
        let datasets = tiny_datasets(&cfg, 2, 6);
        let run = run_ppfl(&cfg, datasets.clone(), &SerialExecutor).unwrap();
        let own = evaluate(&run, &datasets, EvalVariant::ClientOwn).unwrap();
        let shared = evaluate(&run, &datasets, EvalVariant::ServerShared).unwrap();
        assert_eq!(own.rows.len(), 2);
        assert_eq!(shared.rows.len(), 2);
        for row in own.rows.iter().chain(&shared.rows) {
            assert!(row.mase.is_finite() && row.mape.is_finite());
        }
    }
}
