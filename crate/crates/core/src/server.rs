//! The aggregation server: collects per-round uploads, groups clients by
//! embedding proximity (or into one pool), averages each group's weights,
//! and hands every client its group model.
//!
//! [`ServerState`] is pure bookkeeping with no I/O, so round logic is
//! testable without a transport. [`serve`] wraps it in a threaded session:
//! an acceptor thread feeds new connections into a command queue, one
//! reader thread per connection decodes inbound frames into the same
//! queue, and the main loop owns all the sinks and the state.
//!
//! Both aggregation modes run the identical code path; the single-pool
//! mode simply labels every upload with cluster 0. With one cluster the
//! two modes therefore produce bit-identical models.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use crate::aggregation::{aggregate_clusters, ClusterModelSet, Weighting};
use crate::clustering::{assign_new, dbscan, ClusterAssignment, ClusterParams, Label};
use crate::error::RunError;
use crate::protocol::{
    self, decode_frame, encode, Message, ProtocolError, Reader,
};
use crate::transport::{Connection, FrameSink, Listener, TransportError};
use crate::{Embedding, Params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationMode {
    /// Cluster uploads by embedding distance; one model per cluster, none
    /// for noise.
    Clustered { eps: f64, min_pts: usize },
    /// Average every upload into one global model.
    Single,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Registrations to wait for before round 1 starts.
    pub expected_clients: usize,
    pub rounds: u64,
    pub mode: AggregationMode,
    pub weighting: Weighting,
    /// Budget for collecting registrations, and then for each round's
    /// uploads.
    pub barrier_timeout: Duration,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.expected_clients == 0 {
            return Err(RunError::Config("expected_clients must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(RunError::Config("rounds must be >= 1".into()));
        }
        if let AggregationMode::Clustered { eps, min_pts } = self.mode {
            ClusterParams::new(eps, min_pts)
                .validate()
                .map_err(RunError::Core)?;
        }
        Ok(())
    }
}

struct UploadEntry {
    params: Params,
    embedding: Embedding,
    num_samples: u64,
}

struct LastRound {
    client_ids: Vec<u64>,
    embeddings: Vec<Embedding>,
    assignment: ClusterAssignment,
    models: ClusterModelSet<f64>,
}

/// Transport-free server core: registrations, upload collection, and the
/// per-round cluster-and-average step.
pub struct ServerState {
    mode: AggregationMode,
    weighting: Weighting,
    round: u64,
    registered: BTreeSet<u64>,
    uploads: BTreeMap<u64, UploadEntry>,
    last: Option<LastRound>,
}

/// Outcome of one aggregation step.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: u64,
    pub num_clusters: u32,
    /// Ascending by client id; noise clients carry no model.
    pub replies: Vec<(u64, Label, Option<Params>)>,
    pub models: BTreeMap<u32, Params>,
}

impl ServerState {
    pub fn new(mode: AggregationMode, weighting: Weighting) -> Self {
        ServerState {
            mode,
            weighting,
            round: 1,
            registered: BTreeSet::new(),
            uploads: BTreeMap::new(),
            last: None,
        }
    }

    /// Round currently being collected (1-based).
    pub fn current_round(&self) -> u64 {
        self.round
    }

    pub fn register(&mut self, client_id: u64) -> Result<(), RunError> {
        if !self.registered.insert(client_id) {
            return Err(RunError::DuplicateClient(client_id));
        }
        Ok(())
    }

    pub fn registered_ids(&self) -> Vec<u64> {
        self.registered.iter().copied().collect()
    }

    pub fn uploaded_ids(&self) -> Vec<u64> {
        self.uploads.keys().copied().collect()
    }

    pub fn record_upload(
        &mut self,
        client_id: u64,
        round: u64,
        num_samples: u64,
        params: Params,
        embedding: Embedding,
    ) -> Result<(), RunError> {
        if round != self.round {
            return Err(RunError::MixedRound {
                client: client_id,
                expected: self.round,
                got: round,
            });
        }
        if !self.registered.contains(&client_id) {
            return Err(RunError::UnexpectedMessage {
                context: "collecting uploads",
                got: "an upload from an unregistered client",
            });
        }
        if self.uploads.contains_key(&client_id) {
            return Err(RunError::UnexpectedMessage {
                context: "collecting uploads",
                got: "a second upload from one client in the same round",
            });
        }
        self.uploads.insert(
            client_id,
            UploadEntry {
                params,
                embedding,
                num_samples,
            },
        );
        Ok(())
    }

    /// Cluster and average everything uploaded this round, then advance.
    pub fn run_round(&mut self) -> Result<RoundResult, RunError> {
        if self.uploads.is_empty() {
            return Err(RunError::Config("round has no uploads".into()));
        }
        let client_ids: Vec<u64> = self.uploads.keys().copied().collect();
        let embeddings: Vec<Embedding> = client_ids
            .iter()
            .map(|id| self.uploads[id].embedding.clone())
            .collect();
        let assignment = match self.mode {
            AggregationMode::Clustered { eps, min_pts } => {
                dbscan(&embeddings, &ClusterParams::new(eps, min_pts)).map_err(RunError::Core)?
            }
            AggregationMode::Single => ClusterAssignment {
                labels: vec![Label::Cluster(0); client_ids.len()],
                core: vec![true; client_ids.len()],
                num_clusters: 1,
            },
        };
        let models: Vec<Params> = client_ids
            .iter()
            .map(|id| self.uploads[id].params.clone())
            .collect();
        let counts: Vec<usize> = client_ids
            .iter()
            .map(|id| self.uploads[id].num_samples as usize)
            .collect();
        let set = aggregate_clusters(&assignment.labels, &models, &counts, self.weighting)
            .map_err(RunError::Core)?;
        let replies: Vec<(u64, Label, Option<Params>)> = client_ids
            .iter()
            .zip(&assignment.labels)
            .map(|(id, l)| (*id, *l, set.get(*l).cloned()))
            .collect();
        let result = RoundResult {
            round: self.round,
            num_clusters: assignment.num_clusters,
            replies,
            models: set.models.clone(),
        };
        self.last = Some(LastRound {
            client_ids,
            embeddings,
            assignment,
            models: set,
        });
        self.uploads.clear();
        self.round += 1;
        Ok(result)
    }

    /// Admit a client that shows up mid-run: register it and assign it to
    /// the structure of the most recent round. Before any aggregation there
    /// is nothing to assign to, so the reply is noise with no model.
    pub fn handle_join(
        &mut self,
        client_id: u64,
        embedding: &Embedding,
    ) -> Result<(Label, Option<Params>), RunError> {
        self.register(client_id)?;
        let last = match &self.last {
            None => return Ok((Label::Noise, None)),
            Some(l) => l,
        };
        let label = match self.mode {
            AggregationMode::Single => Label::Cluster(0),
            AggregationMode::Clustered { eps, min_pts } => assign_new(
                embedding,
                &last.embeddings,
                &last.assignment,
                &ClusterParams::new(eps, min_pts),
            )
            .map_err(RunError::Core)?,
        };
        Ok((label, last.models.get(label).cloned()))
    }

    /// Freeze the latest cluster structure for later joins.
    pub fn snapshot(&self) -> Snapshot {
        let (single_mode, eps, min_pts) = match self.mode {
            AggregationMode::Single => (true, 0.0, 0),
            AggregationMode::Clustered { eps, min_pts } => (false, eps, min_pts as u32),
        };
        match &self.last {
            None => Snapshot {
                single_mode,
                eps,
                min_pts,
                client_ids: Vec::new(),
                embeddings: Vec::new(),
                labels: Vec::new(),
                core: Vec::new(),
                models: BTreeMap::new(),
            },
            Some(l) => Snapshot {
                single_mode,
                eps,
                min_pts,
                client_ids: l.client_ids.clone(),
                embeddings: l.embeddings.clone(),
                labels: l.assignment.labels.clone(),
                core: l.assignment.core.clone(),
                models: l.models.models.clone(),
            },
        }
    }
}

// ---- snapshot persistence ----

const SNAPSHOT_VERSION: u8 = 1;

/// The server's final cluster structure, persistable so a run directory can
/// answer join requests after the fact.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub single_mode: bool,
    pub eps: f64,
    pub min_pts: u32,
    pub client_ids: Vec<u64>,
    pub embeddings: Vec<Embedding>,
    pub labels: Vec<Label>,
    pub core: Vec<bool>,
    pub models: BTreeMap<u32, Params>,
}

impl Snapshot {
    /// Assignment a joiner with this embedding would get, with the model
    /// it would be served.
    pub fn assign(&self, embedding: &Embedding) -> Result<(Label, Option<&Params>), RunError> {
        if self.client_ids.is_empty() {
            return Ok((Label::Noise, None));
        }
        let label = if self.single_mode {
            Label::Cluster(0)
        } else {
            let assignment = ClusterAssignment {
                labels: self.labels.clone(),
                core: self.core.clone(),
                num_clusters: self.models.len() as u32,
            };
            assign_new(
                embedding,
                &self.embeddings,
                &assignment,
                &ClusterParams::new(self.eps, self.min_pts as usize),
            )
            .map_err(RunError::Core)?
        };
        let model = match label {
            Label::Noise => None,
            Label::Cluster(c) => self.models.get(&c),
        };
        Ok((label, model))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![SNAPSHOT_VERSION, self.single_mode as u8];
        out.extend_from_slice(&self.eps.to_le_bytes());
        out.extend_from_slice(&self.min_pts.to_le_bytes());
        let n = self.client_ids.len() as u32;
        out.extend_from_slice(&n.to_le_bytes());
        let dim = self.embeddings.first().map_or(0, |e| e.dim()) as u32;
        out.extend_from_slice(&dim.to_le_bytes());
        for id in &self.client_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for e in &self.embeddings {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for l in &self.labels {
            let v: i32 = match l {
                Label::Noise => -1,
                Label::Cluster(c) => *c as i32,
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &c in &self.core {
            out.push(c as u8);
        }
        out.extend_from_slice(&(self.models.len() as u32).to_le_bytes());
        for (id, m) in &self.models {
            out.extend_from_slice(&id.to_le_bytes());
            protocol::write_params_blob(m, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RunError> {
        let mut r = Reader::new(bytes);
        let version = r.u8("snapshot version")?;
        if version != SNAPSHOT_VERSION {
            return Err(
                ProtocolError::UnsupportedVersion(version).into(),
            );
        }
        let single_mode = match r.u8("mode flag")? {
            0 => false,
            1 => true,
            v => {
                return Err(ProtocolError::InvalidPayload(format!(
                    "mode flag {} is not 0 or 1",
                    v
                ))
                .into())
            }
        };
        let eps = r.f64("eps")?;
        let min_pts = r.u32("min_pts")?;
        let n = r.u32("client count")? as usize;
        let dim = r.u32("embedding dim")? as usize;
        let mut client_ids = Vec::with_capacity(n);
        for _ in 0..n {
            client_ids.push(r.u64("client id")?);
        }
        let mut embeddings = Vec::with_capacity(n);
        for _ in 0..n {
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(r.f64("embedding value")?);
            }
            embeddings.push(Embedding::new(values));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.label("label")?);
        }
        let mut core = Vec::with_capacity(n);
        for _ in 0..n {
            core.push(r.u8("core flag")? != 0);
        }
        let model_count = r.u32("model count")? as usize;
        let mut models = BTreeMap::new();
        for _ in 0..model_count {
            let id = r.u32("cluster id")?;
            let params = protocol::read_params_blob(&mut r)?;
            models.insert(id, params);
        }
        r.finish().map_err(RunError::Protocol)?;
        Ok(Snapshot {
            single_mode,
            eps,
            min_pts,
            client_ids,
            embeddings,
            labels,
            core,
            models,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let bytes = std::fs::read(path)?;
        Snapshot::from_bytes(&bytes)
    }
}

// ---- threaded session ----

/// One round as the server saw it.
#[derive(Debug, Clone)]
pub struct ServerRoundReport {
    pub round: u64,
    pub num_clusters: u32,
    pub client_ids: Vec<u64>,
    pub labels: Vec<Label>,
    pub models: BTreeMap<u32, Params>,
    pub upload_bytes: BTreeMap<u64, u64>,
    pub download_bytes: BTreeMap<u64, u64>,
    /// Control traffic attributed to this round: registrations and round
    /// markers, joins handled while it was collecting, and for the final
    /// round the shutdown frames.
    pub overhead_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct JoinEvent {
    pub client_id: u64,
    /// Round that was collecting when the join arrived; 0 when it arrived
    /// before round 1.
    pub during_round: u64,
    pub label: Label,
    pub served_model: bool,
}

#[derive(Debug)]
pub struct ServerReport {
    pub rounds: Vec<ServerRoundReport>,
    pub join_events: Vec<JoinEvent>,
    pub snapshot: Snapshot,
    /// Every frame byte that crossed the server's connections, both ways.
    pub total_bytes: u64,
}

enum Command {
    Accepted(Connection),
    Inbound {
        conn: usize,
        bytes: u64,
        msg: Message,
    },
    BadFrame {
        err: ProtocolError,
    },
    Gone {
        conn: usize,
        err: Option<TransportError>,
    },
}

struct ServeGuts {
    state: ServerState,
    sinks: BTreeMap<usize, Box<dyn FrameSink>>,
    conn_of_client: BTreeMap<u64, usize>,
    client_of_conn: BTreeMap<usize, u64>,
    total_bytes: u64,
    overhead_acc: u64,
    join_events: Vec<JoinEvent>,
}

impl ServeGuts {
    fn send_to_conn(&mut self, conn: usize, msg: &Message) -> Result<u64, RunError> {
        let frame = encode(msg);
        let sink = self.sinks.get_mut(&conn).ok_or(RunError::ClientLost {
            client: self.client_of_conn.get(&conn).copied().unwrap_or(0),
            reason: "connection already gone".into(),
        })?;
        sink.send(&frame)?;
        self.total_bytes += frame.len() as u64;
        Ok(frame.len() as u64)
    }

    fn send_to_client(&mut self, client: u64, msg: &Message) -> Result<u64, RunError> {
        let conn = *self
            .conn_of_client
            .get(&client)
            .ok_or(RunError::ClientLost {
                client,
                reason: "no connection on record".into(),
            })?;
        self.send_to_conn(conn, msg).map_err(|e| match e {
            RunError::Transport(t) => RunError::ClientLost {
                client,
                reason: t.to_string(),
            },
            other => other,
        })
    }

    fn broadcast_shutdown(&mut self) {
        let conns: Vec<usize> = self.sinks.keys().copied().collect();
        for conn in conns {
            // best effort; peers may already be gone
            let _ = self.send_to_conn(conn, &Message::Shutdown);
        }
    }
}

/// Run a whole session over any listener and return the server-side log.
/// Blocks until the last round is dispatched or a protocol violation,
/// timeout, or lost client aborts the run; on abort every connected client
/// still gets a best-effort shutdown so nothing hangs.
pub fn serve<L: Listener + 'static>(
    listener: L,
    cfg: ServerConfig,
) -> Result<ServerReport, RunError> {
    cfg.validate()?;
    let (cmd_tx, cmd_rx) = mpsc::channel::<Command>();
    let stop = Arc::new(AtomicBool::new(false));

    let acceptor = {
        let tx = cmd_tx.clone();
        let stop = stop.clone();
        let mut listener = listener;
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept_timeout(Duration::from_millis(20)) {
                    Ok(Some(conn)) => {
                        if tx.send(Command::Accepted(conn)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        })
    };

    let mut readers: Vec<std::thread::JoinHandle<()>> = Vec::new();
    let mut next_conn_id = 0usize;
    let mut guts = ServeGuts {
        state: ServerState::new(cfg.mode, cfg.weighting),
        sinks: BTreeMap::new(),
        conn_of_client: BTreeMap::new(),
        client_of_conn: BTreeMap::new(),
        total_bytes: 0,
        overhead_acc: 0,
        join_events: Vec::new(),
    };

    let result = serve_loop(
        &cfg,
        &cmd_rx,
        &cmd_tx,
        &mut guts,
        &mut readers,
        &mut next_conn_id,
    );

    if result.is_err() {
        guts.broadcast_shutdown();
    }
    stop.store(true, Ordering::SeqCst);
    drop(cmd_tx);
    drop(guts.sinks);
    let _ = acceptor.join();
    for r in readers {
        let _ = r.join();
    }

    result.map(|rounds| ServerReport {
        rounds,
        join_events: guts.join_events,
        snapshot: guts.state.snapshot(),
        total_bytes: guts.total_bytes,
    })
}

fn spawn_reader(
    conn_id: usize,
    mut source: Box<dyn crate::transport::FrameSource>,
    tx: mpsc::Sender<Command>,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || loop {
        match source.recv() {
            Ok(frame) => {
                let bytes = frame.len() as u64;
                match decode_frame(&frame) {
                    Ok(msg) => {
                        if tx
                            .send(Command::Inbound {
                                conn: conn_id,
                                bytes,
                                msg,
                            })
                            .is_err()
                        {
                            break;
                        }
                    }
                    Err(err) => {
                        let _ = tx.send(Command::BadFrame { err });
                        break;
                    }
                }
            }
            Err(TransportError::Closed) => {
                let _ = tx.send(Command::Gone {
                    conn: conn_id,
                    err: None,
                });
                break;
            }
            Err(e) => {
                let _ = tx.send(Command::Gone {
                    conn: conn_id,
                    err: Some(e),
                });
                break;
            }
        }
    })
}

enum Step {
    Registered,
    Uploaded,
    Other,
}

/// Handle one command during a collection phase; `collecting` is the round
/// waiting on uploads, or 0 during registration. Returns which barrier
/// counter may have advanced.
fn handle_command(
    cmd: Command,
    guts: &mut ServeGuts,
    cmd_tx: &mpsc::Sender<Command>,
    readers: &mut Vec<std::thread::JoinHandle<()>>,
    next_conn_id: &mut usize,
    upload_bytes: &mut BTreeMap<u64, u64>,
    collecting: u64,
) -> Result<Step, RunError> {
    match cmd {
        Command::Accepted(conn) => {
            let id = *next_conn_id;
            *next_conn_id += 1;
            let (sink, source) = conn.split();
            guts.sinks.insert(id, sink);
            readers.push(spawn_reader(id, source, cmd_tx.clone()));
            Ok(Step::Other)
        }
        Command::Inbound { conn, bytes, msg } => {
            guts.total_bytes += bytes;
            match msg {
                Message::Register { client_id } => {
                    guts.state.register(client_id)?;
                    guts.conn_of_client.insert(client_id, conn);
                    guts.client_of_conn.insert(conn, client_id);
                    guts.overhead_acc += bytes;
                    Ok(Step::Registered)
                }
                Message::Upload {
                    client_id,
                    round,
                    num_samples,
                    params,
                    embedding,
                } => {
                    guts.state
                        .record_upload(client_id, round, num_samples, params, embedding)?;
                    upload_bytes.insert(client_id, bytes);
                    Ok(Step::Uploaded)
                }
                Message::Join {
                    client_id,
                    embedding,
                } => {
                    guts.overhead_acc += bytes;
                    let (label, model) = guts.state.handle_join(client_id, &embedding)?;
                    guts.conn_of_client.insert(client_id, conn);
                    guts.client_of_conn.insert(conn, client_id);
                    let served_model = model.is_some();
                    let reply_bytes = guts.send_to_client(
                        client_id,
                        &Message::JoinReply {
                            label,
                            params: model,
                        },
                    )?;
                    guts.overhead_acc += reply_bytes;
                    guts.join_events.push(JoinEvent {
                        client_id,
                        during_round: collecting,
                        label,
                        served_model,
                    });
                    Ok(Step::Other)
                }
                _ => Err(RunError::UnexpectedMessage {
                    context: "serving",
                    got: "a server-bound message of the wrong kind",
                }),
            }
        }
        Command::BadFrame { err } => Err(RunError::Protocol(err)),
        Command::Gone { conn, err } => {
            guts.sinks.remove(&conn);
            if let Some(client) = guts.client_of_conn.remove(&conn) {
                guts.conn_of_client.remove(&client);
                Err(RunError::ClientLost {
                    client,
                    reason: err
                        .map(|e| e.to_string())
                        .unwrap_or_else(|| "connection closed".into()),
                })
            } else {
                // a connection that never spoke; just forget it
                Ok(Step::Other)
            }
        }
    }
}

fn serve_loop(
    cfg: &ServerConfig,
    cmd_rx: &mpsc::Receiver<Command>,
    cmd_tx: &mpsc::Sender<Command>,
    guts: &mut ServeGuts,
    readers: &mut Vec<std::thread::JoinHandle<()>>,
    next_conn_id: &mut usize,
) -> Result<Vec<ServerRoundReport>, RunError> {
    // phase 1: registrations
    let deadline = Instant::now() + cfg.barrier_timeout;
    let mut scratch_uploads: BTreeMap<u64, u64> = BTreeMap::new();
    while guts.state.registered_ids().len() < cfg.expected_clients {
        let remaining = deadline
            .checked_duration_since(Instant::now())
            .ok_or(RunError::Barrier {
                round: 0,
                missing: Vec::new(),
            })?;
        let cmd = cmd_rx
            .recv_timeout(remaining)
            .map_err(|_| RunError::Barrier {
                round: 0,
                missing: Vec::new(),
            })?;
        handle_command(
            cmd,
            guts,
            cmd_tx,
            readers,
            next_conn_id,
            &mut scratch_uploads,
            0,
        )?;
    }

    // phase 2: rounds
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let participants: Vec<u64> = guts.state.registered_ids();
        for &client in &participants {
            let n = guts.send_to_client(client, &Message::RoundBegin { round })?;
            guts.overhead_acc += n;
        }

        let mut upload_bytes: BTreeMap<u64, u64> = BTreeMap::new();
        let deadline = Instant::now() + cfg.barrier_timeout;
        let barrier_err = |upload_bytes: &BTreeMap<u64, u64>| {
            RunError::Barrier {
                round,
                missing: participants
                    .iter()
                    .copied()
                    .filter(|id| !upload_bytes.contains_key(id))
                    .collect(),
            }
        };
        while !participants.iter().all(|id| upload_bytes.contains_key(id)) {
            let remaining = deadline
                .checked_duration_since(Instant::now())
                .ok_or_else(|| barrier_err(&upload_bytes))?;
            let cmd = cmd_rx
                .recv_timeout(remaining)
                .map_err(|_| barrier_err(&upload_bytes))?;
            handle_command(
                cmd,
                guts,
                cmd_tx,
                readers,
                next_conn_id,
                &mut upload_bytes,
                round,
            )?;
        }

        let result = guts.state.run_round()?;
        let mut download_bytes = BTreeMap::new();
        for (client, label, model) in &result.replies {
            let n = guts.send_to_client(
                *client,
                &Message::Global {
                    round,
                    label: *label,
                    params: model.clone(),
                },
            )?;
            download_bytes.insert(*client, n);
        }

        if round == cfg.rounds {
            // shutdown frames count against the round that caused them
            let clients: Vec<u64> = guts.conn_of_client.keys().copied().collect();
            for client in clients {
                let n = guts.send_to_client(client, &Message::Shutdown)?;
                guts.overhead_acc += n;
            }
        }

        let labels: Vec<Label> = result.replies.iter().map(|(_, l, _)| *l).collect();
        let client_ids: Vec<u64> = result.replies.iter().map(|(id, _, _)| *id).collect();
        reports.push(ServerRoundReport {
            round,
            num_clusters: result.num_clusters,
            client_ids,
            labels,
            models: result.models,
            upload_bytes,
            download_bytes,
            overhead_bytes: std::mem::take(&mut guts.overhead_acc),
        });
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{ArchSpec, ModelParams};
    use crate::transport::inproc_network;

    fn params(values: Vec<f64>) -> Params {
        ModelParams::new(ArchSpec::linear(2, 1), values).unwrap()
    }

    fn emb(values: Vec<f64>) -> Embedding {
        Embedding::new(values)
    }

    fn clustered_state() -> ServerState {
        ServerState::new(
            AggregationMode::Clustered {
                eps: 1.0,
                min_pts: 2,
            },
            Weighting::Uniform,
        )
    }

    fn upload(
        state: &mut ServerState,
        id: u64,
        round: u64,
        values: Vec<f64>,
        embedding: Vec<f64>,
    ) {
        state
            .record_upload(id, round, 10, params(values), emb(embedding))
            .unwrap();
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut s = clustered_state();
        s.register(4).unwrap();
        assert!(matches!(
            s.register(4),
            Err(RunError::DuplicateClient(4))
        ));
    }

    #[test]
    fn upload_round_must_match() {
        let mut s = clustered_state();
        s.register(1).unwrap();
        let err = s
            .record_upload(1, 2, 10, params(vec![0.0; 3]), emb(vec![0.0]))
            .unwrap_err();
        assert!(matches!(
            err,
            RunError::MixedRound {
                client: 1,
                expected: 1,
                got: 2
            }
        ));
    }

    #[test]
    fn unregistered_and_double_uploads_are_rejected() {
        let mut s = clustered_state();
        assert!(s
            .record_upload(5, 1, 10, params(vec![0.0; 3]), emb(vec![0.0]))
            .is_err());
        s.register(5).unwrap();
        upload(&mut s, 5, 1, vec![0.0; 3], vec![0.0]);
        assert!(s
            .record_upload(5, 1, 10, params(vec![0.0; 3]), emb(vec![0.0]))
            .is_err());
    }

    #[test]
    fn round_groups_by_embedding_and_averages() {
        let mut s = clustered_state();
        for id in 1..=4 {
            s.register(id).unwrap();
        }
        // ids 1 and 2 sit together, 3 and 4 together, far apart
        upload(&mut s, 1, 1, vec![0.0, 2.0, 4.0], vec![0.0, 0.0]);
        upload(&mut s, 2, 1, vec![2.0, 0.0, 0.0], vec![0.5, 0.0]);
        upload(&mut s, 3, 1, vec![8.0, 8.0, 8.0], vec![10.0, 0.0]);
        upload(&mut s, 4, 1, vec![6.0, 6.0, 6.0], vec![10.5, 0.0]);
        let r = s.run_round().unwrap();
        assert_eq!(r.round, 1);
        assert_eq!(r.num_clusters, 2);
        assert_eq!(r.replies.len(), 4);
        let by_id: BTreeMap<u64, (Label, Option<Params>)> = r
            .replies
            .iter()
            .map(|(id, l, m)| (*id, (*l, m.clone())))
            .collect();
        assert_eq!(by_id[&1].0, Label::Cluster(0));
        assert_eq!(by_id[&2].0, Label::Cluster(0));
        assert_eq!(by_id[&3].0, Label::Cluster(1));
        assert_eq!(by_id[&4].0, Label::Cluster(1));
        assert_eq!(by_id[&1].1.as_ref().unwrap().values(), &[1.0, 1.0, 2.0]);
        assert_eq!(by_id[&3].1.as_ref().unwrap().values(), &[7.0, 7.0, 7.0]);
        assert_eq!(s.current_round(), 2);
        assert!(s.uploaded_ids().is_empty());
    }

    #[test]
    fn lone_distant_client_is_noise_and_keeps_nothing() {
        let mut s = clustered_state();
        for id in 1..=3 {
            s.register(id).unwrap();
        }
        upload(&mut s, 1, 1, vec![0.0, 2.0, 4.0], vec![0.0]);
        upload(&mut s, 2, 1, vec![2.0, 0.0, 0.0], vec![0.5]);
        upload(&mut s, 3, 1, vec![9.0, 9.0, 9.0], vec![50.0]);
        let r = s.run_round().unwrap();
        assert_eq!(r.num_clusters, 1);
        let noise = r.replies.iter().find(|(id, _, _)| *id == 3).unwrap();
        assert_eq!(noise.1, Label::Noise);
        assert!(noise.2.is_none());
    }

    #[test]
    fn single_mode_pools_everyone() {
        let mut s = ServerState::new(AggregationMode::Single, Weighting::Uniform);
        for id in 1..=3 {
            s.register(id).unwrap();
        }
        // embeddings would form two clusters, but the mode ignores that
        upload(&mut s, 1, 1, vec![0.0, 0.0, 0.0], vec![0.0]);
        upload(&mut s, 2, 1, vec![3.0, 3.0, 3.0], vec![0.1]);
        upload(&mut s, 3, 1, vec![6.0, 6.0, 6.0], vec![99.0]);
        let r = s.run_round().unwrap();
        assert_eq!(r.num_clusters, 1);
        for (_, label, model) in &r.replies {
            assert_eq!(*label, Label::Cluster(0));
            assert_eq!(model.as_ref().unwrap().values(), &[3.0, 3.0, 3.0]);
        }
    }

    #[test]
    fn join_before_any_round_gets_nothing() {
        let mut s = clustered_state();
        let (label, model) = s.handle_join(9, &emb(vec![0.0])).unwrap();
        assert_eq!(label, Label::Noise);
        assert!(model.is_none());
        // the joiner is now registered
        assert!(matches!(
            s.register(9),
            Err(RunError::DuplicateClient(9))
        ));
    }

    #[test]
    fn join_lands_in_the_nearest_cluster() {
        let mut s = clustered_state();
        for id in 1..=4 {
            s.register(id).unwrap();
        }
        upload(&mut s, 1, 1, vec![0.0, 2.0, 4.0], vec![0.0, 0.0]);
        upload(&mut s, 2, 1, vec![2.0, 0.0, 0.0], vec![0.5, 0.0]);
        upload(&mut s, 3, 1, vec![8.0, 8.0, 8.0], vec![10.0, 0.0]);
        upload(&mut s, 4, 1, vec![6.0, 6.0, 6.0], vec![10.5, 0.0]);
        s.run_round().unwrap();

        let (label, model) = s.handle_join(50, &emb(vec![10.2, 0.1])).unwrap();
        assert_eq!(label, Label::Cluster(1));
        assert_eq!(model.unwrap().values(), &[7.0, 7.0, 7.0]);

        let (label, model) = s.handle_join(51, &emb(vec![500.0, 0.0])).unwrap();
        assert_eq!(label, Label::Noise);
        assert!(model.is_none());
    }

    #[test]
    fn snapshot_round_trips_and_assigns_like_the_server() {
        let mut s = clustered_state();
        for id in 1..=4 {
            s.register(id).unwrap();
        }
        upload(&mut s, 1, 1, vec![0.0, 2.0, 4.0], vec![0.0, 0.0]);
        upload(&mut s, 2, 1, vec![2.0, 0.0, 0.0], vec![0.5, 0.0]);
        upload(&mut s, 3, 1, vec![8.0, 8.0, 8.0], vec![10.0, 0.0]);
        upload(&mut s, 4, 1, vec![6.0, 6.0, 6.0], vec![10.5, 0.0]);
        s.run_round().unwrap();

        let snap = s.snapshot();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snapshot.bin");
        snap.save(&path).unwrap();
        let back = Snapshot::load(&path).unwrap();
        assert_eq!(back, snap);

        let probe = emb(vec![0.2, 0.0]);
        let (label, model) = back.assign(&probe).unwrap();
        assert_eq!(label, Label::Cluster(0));
        assert_eq!(model.unwrap().values(), &[1.0, 1.0, 2.0]);
        let (direct_label, direct_model) = s.handle_join(60, &probe).unwrap();
        assert_eq!(direct_label, label);
        assert_eq!(direct_model.unwrap().values(), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let snap = clustered_state().snapshot();
        let bytes = snap.to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[0] = 9;
        assert!(Snapshot::from_bytes(&wrong_version).is_err());
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Snapshot::from_bytes(&truncated).is_err());
        let mut padded = bytes;
        padded.push(0);
        assert!(Snapshot::from_bytes(&padded).is_err());
    }

    // -- serve() against hand-driven fake clients --

    use crate::protocol::measure;

    fn fake_client(
        connector: crate::transport::InProcConnector,
        id: u64,
        embedding: Vec<f64>,
        model: Vec<f64>,
        rounds: u64,
    ) -> std::thread::JoinHandle<Result<(Vec<(Label, bool)>, u64, u64), RunError>> {
        std::thread::spawn(move || {
            let conn = connector.connect()?;
            let (mut sink, mut source) = conn.split();
            let mut sent = 0u64;
            let mut received = 0u64;
            let reg = encode(&Message::Register { client_id: id });
            sink.send(&reg)?;
            sent += reg.len() as u64;
            let mut seen = Vec::new();
            for _ in 0..rounds {
                let frame = source.recv_timeout(Duration::from_secs(5))?;
                received += frame.len() as u64;
                let round = match decode_frame(&frame)? {
                    Message::RoundBegin { round } => round,
                    other => panic!("expected round begin, got {:?}", other),
                };
                let up = encode(&Message::Upload {
                    client_id: id,
                    round,
                    num_samples: 10,
                    params: params(model.clone()),
                    embedding: emb(embedding.clone()),
                });
                sink.send(&up)?;
                sent += up.len() as u64;
                let frame = source.recv_timeout(Duration::from_secs(5))?;
                received += frame.len() as u64;
                match decode_frame(&frame)? {
                    Message::Global { label, params, .. } => {
                        seen.push((label, params.is_some()))
                    }
                    other => panic!("expected global, got {:?}", other),
                }
            }
            let frame = source.recv_timeout(Duration::from_secs(5))?;
            received += frame.len() as u64;
            assert!(matches!(decode_frame(&frame)?, Message::Shutdown));
            Ok((seen, sent, received))
        })
    }

    #[test]
    fn serve_runs_two_rounds_end_to_end() {
        let (acceptor, connector) = inproc_network();
        let cfg = ServerConfig {
            expected_clients: 3,
            rounds: 2,
            mode: AggregationMode::Clustered {
                eps: 1.0,
                min_pts: 2,
            },
            weighting: Weighting::Uniform,
            barrier_timeout: Duration::from_secs(5),
        };
        let clients = vec![
            fake_client(connector.clone(), 1, vec![0.0], vec![0.0, 2.0, 4.0], 2),
            fake_client(connector.clone(), 2, vec![0.5], vec![2.0, 0.0, 0.0], 2),
            fake_client(connector.clone(), 3, vec![40.0], vec![9.0, 9.0, 9.0], 2),
        ];
        let report = serve(acceptor, cfg).unwrap();

        assert_eq!(report.rounds.len(), 2);
        let r1 = &report.rounds[0];
        assert_eq!(r1.client_ids, vec![1, 2, 3]);
        assert_eq!(
            r1.labels,
            vec![Label::Cluster(0), Label::Cluster(0), Label::Noise]
        );
        assert_eq!(r1.num_clusters, 1);
        assert_eq!(r1.models[&0].values(), &[1.0, 1.0, 2.0]);

        let mut client_sent = 0u64;
        let mut client_received = 0u64;
        for c in clients {
            let (seen, sent, received) = c.join().unwrap().unwrap();
            assert_eq!(seen.len(), 2);
            client_sent += sent;
            client_received += received;
        }
        // every byte the clients moved matches what the server counted
        assert_eq!(report.total_bytes, client_sent + client_received);

        // per-round bookkeeping adds up to the same total
        let mut acc = 0u64;
        for r in &report.rounds {
            acc += r.overhead_bytes;
            acc += r.upload_bytes.values().sum::<u64>();
            acc += r.download_bytes.values().sum::<u64>();
        }
        assert_eq!(acc, report.total_bytes);

        // round 1 carries registrations + round marker; round 2 the marker
        // plus shutdowns
        let reg = measure(&Message::Register { client_id: 1 });
        let begin = measure(&Message::RoundBegin { round: 1 });
        let sd = measure(&Message::Shutdown);
        assert_eq!(report.rounds[0].overhead_bytes, 3 * reg + 3 * begin);
        assert_eq!(report.rounds[1].overhead_bytes, 3 * begin + 3 * sd);

        // noise client never receives a model
        let snap = report.snapshot;
        assert_eq!(snap.labels, vec![Label::Cluster(0), Label::Cluster(0), Label::Noise]);
    }

    #[test]
    fn serve_times_out_when_a_client_stalls() {
        let (acceptor, connector) = inproc_network();
        let cfg = ServerConfig {
            expected_clients: 2,
            rounds: 1,
            mode: AggregationMode::Single,
            weighting: Weighting::Uniform,
            barrier_timeout: Duration::from_millis(300),
        };
        let _good = fake_client(connector.clone(), 1, vec![0.0], vec![0.0; 3], 1);
        // the silent client registers and then never uploads
        let silent = std::thread::spawn({
            let connector = connector.clone();
            move || -> Result<(), RunError> {
                let conn = connector.connect()?;
                let (mut sink, mut source) = conn.split();
                sink.send(&encode(&Message::Register { client_id: 2 }))?;
                // sit there until the server gives up and shuts us down
                loop {
                    let frame = source.recv_timeout(Duration::from_secs(5))?;
                    if matches!(decode_frame(&frame)?, Message::Shutdown) {
                        return Ok(());
                    }
                }
            }
        });
        let err = serve(acceptor, cfg).unwrap_err();
        match err {
            RunError::Barrier { round: 1, missing } => assert_eq!(missing, vec![2]),
            other => panic!("expected a barrier timeout, got {:?}", other),
        }
        silent.join().unwrap().unwrap();
    }

    #[test]
    fn serve_rejects_uploads_for_the_wrong_round() {
        let (acceptor, connector) = inproc_network();
        let cfg = ServerConfig {
            expected_clients: 1,
            rounds: 2,
            mode: AggregationMode::Single,
            weighting: Weighting::Uniform,
            barrier_timeout: Duration::from_secs(5),
        };
        let rogue = std::thread::spawn(move || -> Result<(), RunError> {
            let conn = connector.connect()?;
            let (mut sink, mut source) = conn.split();
            sink.send(&encode(&Message::Register { client_id: 1 }))?;
            let frame = source.recv_timeout(Duration::from_secs(5))?;
            assert!(matches!(
                decode_frame(&frame)?,
                Message::RoundBegin { round: 1 }
            ));
            sink.send(&encode(&Message::Upload {
                client_id: 1,
                round: 7,
                num_samples: 10,
                params: params(vec![0.0; 3]),
                embedding: emb(vec![0.0]),
            }))?;
            // server aborts; we still expect the courtesy shutdown
            loop {
                let frame = source.recv_timeout(Duration::from_secs(5))?;
                if matches!(decode_frame(&frame)?, Message::Shutdown) {
                    return Ok(());
                }
            }
        });
        let err = serve(acceptor, cfg).unwrap_err();
        assert!(matches!(
            err,
            RunError::MixedRound {
                client: 1,
                expected: 1,
                got: 7
            }
        ));
        rogue.join().unwrap().unwrap();
    }

    /// A client that holds its round-2 upload until `joined` fires, so the
    /// joiner's request is guaranteed to land inside round 2's collection
    /// window. Returns the number of globals it received.
    fn gated_client(
        connector: crate::transport::InProcConnector,
        id: u64,
        embedding: Vec<f64>,
        model: Vec<f64>,
        round1_done: Option<mpsc::Sender<()>>,
        joined: mpsc::Receiver<()>,
    ) -> std::thread::JoinHandle<Result<usize, RunError>> {
        std::thread::spawn(move || {
            let conn = connector.connect()?;
            let (mut sink, mut source) = conn.split();
            sink.send(&encode(&Message::Register { client_id: id }))?;
            let mut globals = 0usize;
            loop {
                let frame = source.recv_timeout(Duration::from_secs(5))?;
                match decode_frame(&frame)? {
                    Message::RoundBegin { round } => {
                        if round == 2 {
                            joined.recv().expect("joiner never signalled");
                        }
                        sink.send(&encode(&Message::Upload {
                            client_id: id,
                            round,
                            num_samples: 10,
                            params: params(model.clone()),
                            embedding: emb(embedding.clone()),
                        }))?;
                    }
                    Message::Global { round, .. } => {
                        globals += 1;
                        if round == 1 {
                            if let Some(tx) = &round1_done {
                                let _ = tx.send(());
                            }
                        }
                    }
                    Message::Shutdown => return Ok(globals),
                    other => panic!("unexpected {:?}", other),
                }
            }
        })
    }

    #[test]
    fn mid_run_joiner_gets_round_one_model_and_plays_round_three() {
        let (acceptor, connector) = inproc_network();
        let cfg = ServerConfig {
            expected_clients: 2,
            rounds: 3,
            mode: AggregationMode::Clustered {
                eps: 1.0,
                min_pts: 2,
            },
            weighting: Weighting::Uniform,
            barrier_timeout: Duration::from_secs(5),
        };
        let (r1_tx, r1_rx) = mpsc::channel();
        let (j1_tx, j1_rx) = mpsc::channel();
        let (j2_tx, j2_rx) = mpsc::channel();
        let c1 = gated_client(
            connector.clone(),
            1,
            vec![0.0],
            vec![3.0, 3.0, 3.0],
            Some(r1_tx),
            j1_rx,
        );
        let c2 = gated_client(connector.clone(), 2, vec![0.4], vec![1.0, 1.0, 1.0], None, j2_rx);
        // the joiner waits until round 1 has aggregated, joins while round 2
        // is still collecting, then plays round 3
        let joiner = std::thread::spawn({
            let connector = connector.clone();
            move || -> Result<(Label, Vec<f64>, usize), RunError> {
                r1_rx.recv().expect("round 1 never finished");
                let conn = connector.connect()?;
                let (mut sink, mut source) = conn.split();
                sink.send(&encode(&Message::Join {
                    client_id: 30,
                    embedding: emb(vec![0.2]),
                }))?;
                let frame = source.recv_timeout(Duration::from_secs(5))?;
                let (label, served) = match decode_frame(&frame)? {
                    Message::JoinReply { label, params } => {
                        (label, params.expect("expected a model").into_values())
                    }
                    other => panic!("expected join reply, got {:?}", other),
                };
                j1_tx.send(()).unwrap();
                j2_tx.send(()).unwrap();
                let mut rounds_played = 0usize;
                loop {
                    let frame = source.recv_timeout(Duration::from_secs(5))?;
                    match decode_frame(&frame)? {
                        Message::RoundBegin { round } => {
                            sink.send(&encode(&Message::Upload {
                                client_id: 30,
                                round,
                                num_samples: 10,
                                params: params(vec![2.0, 2.0, 2.0]),
                                embedding: emb(vec![0.2]),
                            }))?;
                        }
                        Message::Global { .. } => rounds_played += 1,
                        Message::Shutdown => return Ok((label, served, rounds_played)),
                        other => panic!("unexpected {:?}", other),
                    }
                }
            }
        });

        let report = serve(acceptor, cfg).unwrap();
        let (label, served, rounds_played) = joiner.join().unwrap().unwrap();
        assert_eq!(c1.join().unwrap().unwrap(), 3);
        assert_eq!(c2.join().unwrap().unwrap(), 3);

        // the reply reflects round 1: both uploads in cluster 0, averaged
        assert_eq!(label, Label::Cluster(0));
        assert_eq!(served, vec![2.0, 2.0, 2.0]);
        assert_eq!(rounds_played, 1);
        assert_eq!(report.join_events.len(), 1);
        assert_eq!(report.join_events[0].client_id, 30);
        assert_eq!(report.join_events[0].during_round, 2);
        assert!(report.join_events[0].served_model);
        // round 2 still ran with the original pair; round 3 includes the
        // joiner
        assert_eq!(report.rounds[1].client_ids, vec![1, 2]);
        assert_eq!(report.rounds[2].client_ids, vec![1, 2, 30]);
    }
}
