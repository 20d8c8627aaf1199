//! Whole-run orchestration: generate a scenario, stand the chosen training
//! mode up end to end on a transport, and collect per-round logs, byte
//! counts, and summary artifacts.
//!
//! Every run is a pure function of its [`RunConfig`]: data, model
//! initialization, shuffling, and the embedding projection all derive their
//! seeds from the scenario seed, and nothing records wall-clock time. The
//! in-process and TCP transports move identical frames, so switching
//! between them changes no output byte.

use std::fmt;
use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::aggregation::Weighting;
use crate::client::{
    run_central_baseline, run_session, split_train_validation, ClientState, SessionEntry,
    SessionResult,
};
use crate::clustering::{ClusterParams, Label};
use crate::datagen::{derive_seed, gen_extra_client, gen_scenario, Scenario, ScenarioConfig};
use crate::embedding::Extractor;
use crate::error::RunError;
use crate::learner::{ArchSpec, TrainConfig};
use crate::metrics::{
    adjusted_rand_index, comm_summary, improvement_rate, rounds_to_target, ClientRound,
    CommSummary, RoundLog,
};
use crate::protocol::{measure, Message};
use crate::server::{serve, AggregationMode, ServerConfig, ServerRoundReport, Snapshot};
use crate::transport::{inproc_network, tcp_connect, Connection, InProcConnector, TcpAcceptor};
use crate::{Dataset, Embedding, Params};

/// Seed salt for the embedding projection.
pub const SALT_EXTRACTOR: u64 = 0xE7;
/// Seed salt for the shared model initialization.
pub const SALT_INIT: u64 = 0x11;
/// Seed salt base for per-client shuffle streams; client `i` uses
/// `SALT_SHUFFLE_BASE + i`.
pub const SALT_SHUFFLE_BASE: u64 = 0x5000;
/// Seed salt for the pooled-training shuffle stream.
pub const SALT_CENTRAL: u64 = 0xCE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Cluster clients by embedding, one aggregate model per cluster.
    FedEc,
    /// One aggregate model over everyone.
    FedAvg,
    /// Every client trains alone; no communication.
    Local,
    /// One model on pooled raw data; clients ship their training data once.
    Central,
}

impl RunMode {
    pub fn is_federated(self) -> bool {
        matches!(self, RunMode::FedEc | RunMode::FedAvg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::FedEc => "fedec",
            RunMode::FedAvg => "fedavg",
            RunMode::Local => "local",
            RunMode::Central => "central",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedec" => Ok(RunMode::FedEc),
            "fedavg" => Ok(RunMode::FedAvg),
            "local" => Ok(RunMode::Local),
            "central" => Ok(RunMode::Central),
            other => Err(format!(
                "unknown mode `{}` (expected fedec, fedavg, local, or central)",
                other
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Tcp,
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!(
                "unknown transport `{}` (expected inproc or tcp)",
                other
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: RunMode,
    pub scenario: ScenarioConfig,
    /// `None` trains a plain linear model; `Some(h)` one hidden layer of
    /// width `h`.
    pub hidden_dim: Option<usize>,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-round multiplier on the learning rate, shared by every mode.
    pub lr_decay: f64,
    pub embed_dim: usize,
    /// Neighborhood radius for embedding clustering.
    pub eps: f64,
    pub min_pts: usize,
    pub weighting: Weighting,
    pub transport: TransportKind,
    /// Bind address for the TCP transport; `None` picks an ephemeral local
    /// port. Ignored by the in-process transport.
    pub tcp_bind: Option<String>,
    /// Bound on every wait: registration, upload barriers, client receives.
    pub timeout: Duration,
    /// Also run the isolated-training reference and report the share of
    /// clients the federated run improved.
    pub compute_ipr: bool,
}

impl RunConfig {
    /// The stock setup: a linear model, six rounds of five epochs (30 total,
    /// matching the one-shot baselines), a per-round learning-rate decay that
    /// quenches step noise by the final round, and clustering thresholds wide
    /// enough for same-source clients and narrow enough to keep sources
    /// apart. Constants were picked so the four modes separate cleanly on
    /// the stock scenario; see README for the reasoning.
    pub fn new(mode: RunMode, scenario: ScenarioConfig) -> Self {
        RunConfig {
            mode,
            scenario,
            hidden_dim: None,
            rounds: 6,
            epochs_per_round: 5,
            batch_size: 16,
            learning_rate: 0.088,
            lr_decay: 0.68,
            embed_dim: 16,
            eps: 4.0,
            min_pts: 2,
            weighting: Weighting::Uniform,
            transport: TransportKind::InProc,
            tcp_bind: None,
            timeout: Duration::from_secs(60),
            compute_ipr: false,
        }
    }

    pub fn arch(&self) -> ArchSpec {
        match self.hidden_dim {
            None => ArchSpec::linear(self.scenario.input_dim, self.scenario.output_dim),
            Some(h) => ArchSpec::mlp(self.scenario.input_dim, h, self.scenario.output_dim),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.scenario.validate().map_err(RunError::Core)?;
        self.arch().validate().map_err(RunError::Core)?;
        if self.rounds == 0 || self.epochs_per_round == 0 {
            return Err(RunError::Config(
                "rounds and epochs_per_round must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(RunError::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(RunError::Config(
                "learning_rate must be finite and positive".into(),
            ));
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(RunError::Config(
                "lr_decay must be in (0, 1]".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(RunError::Config("embed_dim must be >= 1".into()));
        }
        if self.mode == RunMode::FedEc {
            ClusterParams::new(self.eps, self.min_pts)
                .validate()
                .map_err(RunError::Core)?;
        }
        Ok(())
    }

    fn train_cfg(&self, shuffle_salt: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_per_round,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            shuffle_seed: derive_seed(self.scenario.seed, shuffle_salt),
        }
    }

    fn init_seed(&self) -> u64 {
        derive_seed(self.scenario.seed, SALT_INIT)
    }

    pub fn extractor(&self) -> Result<Extractor<f64>, RunError> {
        Extractor::new(
            self.embed_dim,
            self.scenario.input_dim,
            derive_seed(self.scenario.seed, SALT_EXTRACTOR),
        )
        .map_err(RunError::Core)
    }
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: RunMode,
    pub rounds: Vec<RoundLog>,
    /// Per client (ascending id), the validation loss after the last round.
    pub final_client_losses: Vec<f64>,
    /// Last-round cluster membership; `None` for the serverless modes.
    pub final_labels: Option<Vec<Label>>,
    /// Per-client mean embeddings of the training splits.
    pub embeddings: Vec<Embedding>,
    pub env_ids: Vec<usize>,
    /// The server's own per-round record; empty for the serverless modes.
    pub server_rounds: Vec<ServerRoundReport>,
    pub snapshot: Option<Snapshot>,
    pub comm: CommSummary,
    /// What shipping every client's raw training split would cost, framed
    /// exactly like the real data-upload message.
    pub raw_data_bytes: u64,
    /// Share of clients (percent) whose final loss beats their isolated
    /// baseline; present when the run was asked to compute it.
    pub ipr: Option<f64>,
}

impl RunOutput {
    pub fn final_mean_loss(&self) -> f64 {
        match self.rounds.last() {
            Some(r) => r.mean_val_loss(),
            None => f64::NAN,
        }
    }
}

fn build_states(cfg: &RunConfig, scenario: &Scenario<f64>) -> Result<Vec<ClientState>, RunError> {
    let extractor = cfg.extractor()?;
    let arch = cfg.arch();
    let init_seed = cfg.init_seed();
    scenario
        .clients
        .iter()
        .enumerate()
        .map(|(i, data)| {
            let mut state = ClientState::new(
                i as u64,
                data.clone(),
                arch,
                &extractor,
                cfg.train_cfg(SALT_SHUFFLE_BASE + i as u64),
                init_seed,
            )
            .map_err(RunError::Core)?;
            state.lr_decay = cfg.lr_decay;
            Ok(state)
        })
        .collect()
}

fn raw_upload_bytes(states: &[ClientState]) -> u64 {
    states
        .iter()
        .map(|s| {
            measure(&Message::RawData {
                client_id: s.id,
                inputs: s.train.inputs.clone(),
                targets: s.train.targets.clone(),
            })
        })
        .sum()
}

enum ClientConnector {
    InProc(InProcConnector),
    Tcp(SocketAddr),
}

impl ClientConnector {
    fn connect(&self) -> Result<Connection, RunError> {
        match self {
            ClientConnector::InProc(c) => c.connect().map_err(RunError::Transport),
            ClientConnector::Tcp(addr) => tcp_connect(*addr).map_err(RunError::Transport),
        }
    }
}

fn run_federated(
    cfg: &RunConfig,
    states: Vec<ClientState>,
) -> Result<(crate::server::ServerReport, Vec<SessionResult>), RunError> {
    let server_cfg = ServerConfig {
        expected_clients: states.len(),
        rounds: cfg.rounds as u64,
        mode: match cfg.mode {
            RunMode::FedEc => AggregationMode::Clustered {
                eps: cfg.eps,
                min_pts: cfg.min_pts,
            },
            RunMode::FedAvg => AggregationMode::Single,
            _ => unreachable!("serverless mode in run_federated"),
        },
        weighting: cfg.weighting,
        barrier_timeout: cfg.timeout,
    };

    let (server, connectors): (std::thread::JoinHandle<_>, Vec<ClientConnector>) =
        match cfg.transport {
            TransportKind::InProc => {
                let (acceptor, connector) = inproc_network();
                let handle = std::thread::spawn(move || serve(acceptor, server_cfg));
                let connectors = states
                    .iter()
                    .map(|_| ClientConnector::InProc(connector.clone()))
                    .collect();
                (handle, connectors)
            }
            TransportKind::Tcp => {
                let bind = cfg.tcp_bind.as_deref().unwrap_or("127.0.0.1:0");
                let (acceptor, addr) = TcpAcceptor::bind(bind).map_err(RunError::Transport)?;
                let handle = std::thread::spawn(move || serve(acceptor, server_cfg));
                let connectors = states.iter().map(|_| ClientConnector::Tcp(addr)).collect();
                (handle, connectors)
            }
        };

    let timeout = cfg.timeout;
    let workers: Vec<_> = states
        .into_iter()
        .zip(connectors)
        .map(|(mut state, connector)| {
            std::thread::spawn(move || -> Result<(u64, SessionResult), RunError> {
                let conn = connector.connect()?;
                let result = run_session(&mut state, conn, SessionEntry::Register, timeout)?;
                Ok((state.id, result))
            })
        })
        .collect();

    let mut sessions: Vec<Option<SessionResult>> = Vec::new();
    let mut first_client_err: Option<RunError> = None;
    let mut collected: Vec<(u64, SessionResult)> = Vec::new();
    for w in workers {
        match w.join() {
            Ok(Ok(pair)) => collected.push(pair),
            Ok(Err(e)) => {
                if first_client_err.is_none() {
                    first_client_err = Some(e);
                }
            }
            Err(_) => {
                if first_client_err.is_none() {
                    first_client_err = Some(RunError::WorkerPanic("client thread".into()));
                }
            }
        }
    }
    let report = match server.join() {
        Ok(r) => r,
        Err(_) => return Err(RunError::WorkerPanic("server thread".into())),
    };
    let report = match report {
        Ok(r) => r,
        Err(e) => return Err(e),
    };
    if let Some(e) = first_client_err {
        return Err(e);
    }
    collected.sort_by_key(|(id, _)| *id);
    for (_, s) in collected {
        sessions.push(Some(s));
    }
    Ok((report, sessions.into_iter().map(|s| s.unwrap()).collect()))
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let scenario = gen_scenario::<f64>(&cfg.scenario).map_err(RunError::Core)?;
    let states = build_states(cfg, &scenario)?;
    let embeddings: Vec<Embedding> = states.iter().map(|s| s.embedding.clone()).collect();
    let env_ids: Vec<usize> = scenario.clients.iter().map(|c| c.env_id).collect();
    let raw_data_bytes = raw_upload_bytes(&states);
    let n = states.len();

    let mut output = match cfg.mode {
        RunMode::Local => {
            let mut states = states;
            let mut rounds = Vec::with_capacity(cfg.rounds);
            for r in 1..=cfg.rounds {
                let mut clients = Vec::with_capacity(n);
                for s in states.iter_mut() {
                    let outcome = s.local_round().map_err(RunError::Core)?;
                    clients.push(ClientRound {
                        client_id: s.id,
                        label: None,
                        val_loss: outcome.val_loss,
                        upload_bytes: 0,
                        download_bytes: 0,
                    });
                }
                rounds.push(RoundLog {
                    round: r,
                    num_clusters: 0,
                    overhead_bytes: 0,
                    clients,
                });
            }
            let final_client_losses = rounds
                .last()
                .map(|r| r.clients.iter().map(|c| c.val_loss).collect())
                .unwrap_or_default();
            RunOutput {
                mode: cfg.mode,
                comm: comm_summary(&rounds),
                rounds,
                final_client_losses,
                final_labels: None,
                embeddings,
                env_ids,
                server_rounds: Vec::new(),
                snapshot: None,
                raw_data_bytes,
                ipr: None,
            }
        }
        RunMode::Central => {
            let trains: Vec<&Dataset> = states.iter().map(|s| &s.train).collect();
            let pooled = Dataset::concat(&trains).map_err(RunError::Core)?;
            let validations: Vec<&Dataset> = states.iter().map(|s| &s.validation).collect();
            let outcome = run_central_baseline(
                &pooled,
                &validations,
                cfg.arch(),
                cfg.train_cfg(SALT_CENTRAL),
                cfg.rounds,
                cfg.init_seed(),
                cfg.lr_decay,
            )
            .map_err(RunError::Core)?;
            let per_client_raw: Vec<u64> = states
                .iter()
                .map(|s| {
                    measure(&Message::RawData {
                        client_id: s.id,
                        inputs: s.train.inputs.clone(),
                        targets: s.train.targets.clone(),
                    })
                })
                .collect();
            let mut rounds = Vec::with_capacity(cfg.rounds);
            for (r, losses) in outcome.per_round_client_losses.iter().enumerate() {
                let clients = states
                    .iter()
                    .zip(losses)
                    .map(|(s, &val_loss)| ClientRound {
                        client_id: s.id,
                        label: None,
                        val_loss,
                        // the one-time data shipment lands in round 1
                        upload_bytes: if r == 0 { per_client_raw[s.id as usize] } else { 0 },
                        download_bytes: 0,
                    })
                    .collect();
                rounds.push(RoundLog {
                    round: r + 1,
                    num_clusters: 0,
                    overhead_bytes: 0,
                    clients,
                });
            }
            let final_client_losses = outcome
                .per_round_client_losses
                .last()
                .cloned()
                .unwrap_or_default();
            RunOutput {
                mode: cfg.mode,
                comm: comm_summary(&rounds),
                rounds,
                final_client_losses,
                final_labels: None,
                embeddings,
                env_ids,
                server_rounds: Vec::new(),
                snapshot: None,
                raw_data_bytes,
                ipr: None,
            }
        }
        RunMode::FedEc | RunMode::FedAvg => {
            let (report, sessions) = run_federated(cfg, states)?;
            let mut rounds = Vec::with_capacity(cfg.rounds);
            for (idx, sr) in report.rounds.iter().enumerate() {
                let clients = sessions
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let rec = &s.rounds[idx];
                        ClientRound {
                            client_id: i as u64,
                            label: Some(rec.label),
                            val_loss: rec.val_loss,
                            upload_bytes: rec.upload_bytes,
                            download_bytes: rec.download_bytes,
                        }
                    })
                    .collect();
                rounds.push(RoundLog {
                    round: sr.round as usize,
                    num_clusters: sr.num_clusters,
                    overhead_bytes: sr.overhead_bytes,
                    clients,
                });
            }
            let last = rounds.last().ok_or_else(|| {
                RunError::Config("federated run produced no rounds".into())
            })?;
            let final_client_losses = last.clients.iter().map(|c| c.val_loss).collect();
            let final_labels = Some(
                last.clients
                    .iter()
                    .map(|c| c.label.expect("federated rounds always carry labels"))
                    .collect(),
            );
            RunOutput {
                mode: cfg.mode,
                comm: comm_summary(&rounds),
                rounds,
                final_client_losses,
                final_labels,
                embeddings,
                env_ids,
                server_rounds: report.rounds,
                snapshot: Some(report.snapshot),
                raw_data_bytes,
                ipr: None,
            }
        }
    };

    if cfg.compute_ipr && cfg.mode.is_federated() {
        let mut reference = build_states(cfg, &scenario)?;
        let mut local_losses = vec![0.0; n];
        for _ in 0..cfg.rounds {
            for (i, s) in reference.iter_mut().enumerate() {
                local_losses[i] = s.local_round().map_err(RunError::Core)?.val_loss;
            }
        }
        output.ipr = Some(improvement_rate(&output.final_client_losses, &local_losses));
    }

    Ok(output)
}

// ---- mid-run joins against a saved run ----

/// What a brand-new client would get from a finished run: its assignment
/// under the frozen cluster structure and the model that comes with it.
#[derive(Debug, Clone)]
pub struct JoinProbe {
    pub env: usize,
    pub label: Label,
    pub served: Option<Params>,
    /// The joiner's own held-out split, for scoring candidate models.
    pub validation: Dataset,
}

pub fn probe_join(
    cfg: &RunConfig,
    snapshot: &Snapshot,
    env: usize,
    extra_index: usize,
) -> Result<JoinProbe, RunError> {
    let data = gen_extra_client::<f64>(&cfg.scenario, env, extra_index).map_err(RunError::Core)?;
    let (train, validation) = split_train_validation(&data).map_err(RunError::Core)?;
    let extractor = cfg.extractor()?;
    let embedding = extractor.mean_embedding(&train).map_err(RunError::Core)?;
    let (label, served) = snapshot.assign(&embedding)?;
    Ok(JoinProbe {
        env,
        label,
        served: served.cloned(),
        validation,
    })
}

// ---- epoch/round trade-off sweeps ----

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub epochs_per_round: usize,
    pub rounds_run: usize,
    pub final_mean_loss: f64,
    /// First round whose mean loss reached the sweep's target, if any.
    pub rounds_to_target: Option<usize>,
}

/// Run the same setup at several local-epoch counts, holding the total
/// epoch budget fixed, and report how many rounds each needed to reach a
/// common loss target (by default the worst final loss across the grid, so
/// every point can in principle reach it).
pub fn run_sweep(
    base: &RunConfig,
    epoch_grid: &[usize],
    total_epochs: usize,
    target: Option<f64>,
) -> Result<Vec<SweepPoint>, RunError> {
    if epoch_grid.is_empty() {
        return Err(RunError::Config("epoch grid is empty".into()));
    }
    for &e in epoch_grid {
        if e == 0 || total_epochs % e != 0 {
            return Err(RunError::Config(format!(
                "total epoch budget {} is not a whole number of rounds of {}",
                total_epochs, e
            )));
        }
    }
    let mut runs = Vec::with_capacity(epoch_grid.len());
    for &e in epoch_grid {
        let mut cfg = base.clone();
        cfg.epochs_per_round = e;
        cfg.rounds = total_epochs / e;
        let out = run_experiment(&cfg)?;
        runs.push((e, out));
    }
    let target = target.unwrap_or_else(|| {
        runs.iter()
            .map(|(_, out)| out.final_mean_loss())
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(runs
        .into_iter()
        .map(|(e, out)| SweepPoint {
            epochs_per_round: e,
            rounds_run: out.rounds.len(),
            final_mean_loss: out.final_mean_loss(),
            rounds_to_target: rounds_to_target(&out.rounds, target),
        })
        .collect())
}

// ---- run directory ----

/// The key-value view of a config, exactly as embedded in reports and
/// `config.txt`. The pairs round-trip: feeding them back as a config file
/// reproduces the run.
pub fn config_pairs(cfg: &RunConfig) -> Vec<(String, String)> {
    let s = &cfg.scenario;
    let counts = s
        .client_counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut pairs = vec![
        ("mode".into(), cfg.mode.to_string()),
        ("transport".into(), cfg.transport.to_string()),
        ("client_counts".into(), counts),
        ("samples_min".into(), s.samples_min.to_string()),
        ("samples_max".into(), s.samples_max.to_string()),
        ("input_dim".into(), s.input_dim.to_string()),
        ("output_dim".into(), s.output_dim.to_string()),
        ("input_spread".into(), s.input_spread.to_string()),
        ("env_separation".into(), s.env_separation.to_string()),
        ("base_scale".into(), s.base_scale.to_string()),
        ("env_scale".into(), s.env_scale.to_string()),
        ("label_noise".into(), s.label_noise.to_string()),
        ("seed".into(), s.seed.to_string()),
        (
            "arch".into(),
            match cfg.hidden_dim {
                None => "linear".into(),
                Some(h) => format!("mlp:{}", h),
            },
        ),
        ("rounds".into(), cfg.rounds.to_string()),
        ("epochs_per_round".into(), cfg.epochs_per_round.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("learning_rate".into(), cfg.learning_rate.to_string()),
        ("lr_decay".into(), cfg.lr_decay.to_string()),
        ("embed_dim".into(), cfg.embed_dim.to_string()),
        ("weighting".into(), match cfg.weighting {
            Weighting::Uniform => "uniform".into(),
            Weighting::SampleCount => "samples".to_string(),
        }),
    ];
    if cfg.mode == RunMode::FedEc {
        pairs.push(("eps".into(), cfg.eps.to_string()));
        pairs.push(("min_pts".into(), cfg.min_pts.to_string()));
    }
    pairs
}

fn metric_pairs(out: &RunOutput) -> Vec<(String, String)> {
    let mut pairs = vec![
        (
            "final_mean_val_loss".into(),
            out.final_mean_loss().to_string(),
        ),
        ("upload_bytes".into(), out.comm.upload_bytes.to_string()),
        (
            "download_bytes".into(),
            out.comm.download_bytes.to_string(),
        ),
        (
            "overhead_bytes".into(),
            out.comm.overhead_bytes.to_string(),
        ),
        ("total_bytes".into(), out.comm.total().to_string()),
        ("raw_data_bytes".into(), out.raw_data_bytes.to_string()),
    ];
    if out.mode.is_federated() && out.comm.total() > 0 {
        pairs.push((
            "raw_over_federated".into(),
            (out.raw_data_bytes as f64 / out.comm.total() as f64).to_string(),
        ));
    }
    if let Some(ipr) = out.ipr {
        pairs.push(("improvement_rate".into(), ipr.to_string()));
    }
    if let Some(last) = out.rounds.last() {
        if out.mode.is_federated() {
            pairs.push(("final_num_clusters".into(), last.num_clusters.to_string()));
        }
    }
    if let Some(labels) = &out.final_labels {
        let truth: Vec<Label> = out
            .env_ids
            .iter()
            .map(|&e| Label::Cluster(e as u32))
            .collect();
        pairs.push((
            "cluster_env_agreement".into(),
            adjusted_rand_index(labels, &truth).to_string(),
        ));
    }
    pairs
}

/// Write a run's artifacts into `dir`: the resolved config, the per-round
/// CSV, a summary report, a 2-d cluster view when the mode clusters, and
/// the server snapshot when there is one.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    let config = config_pairs(cfg);
    let mut config_txt = String::new();
    for (k, v) in &config {
        config_txt.push_str(&format!("{} = {}\n", k, v));
    }
    std::fs::write(dir.join("config.txt"), config_txt)?;
    std::fs::write(dir.join("rounds.csv"), crate::metrics::rounds_csv(&out.rounds))?;
    std::fs::write(
        dir.join("report.csv"),
        crate::metrics::report_csv(&config, &metric_pairs(out)),
    )?;
    if let Some(labels) = &out.final_labels {
        let ids: Vec<u64> = (0..out.embeddings.len() as u64).collect();
        let coords = crate::metrics::pca_2d(&out.embeddings);
        std::fs::write(
            dir.join("clusters.csv"),
            crate::metrics::clusters_csv(&ids, labels, &coords),
        )?;
    }
    if let Some(snapshot) = &out.snapshot {
        snapshot.save(&dir.join("snapshot.bin"))?;
    }
    Ok(())
}
