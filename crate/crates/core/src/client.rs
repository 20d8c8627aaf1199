//! Client-side behavior: local training state, the baselines that need no
//! server, and the message loop a client runs against one.
//!
//! Session layers exchange f64 on the wire, so everything here works on the
//! crate's concrete [`Real`](crate::Real) types.

use std::time::Duration;

use crate::clustering::Label;
use crate::embedding::Extractor;
use crate::error::{CoreError, RunError};
use crate::learner::{eval_loss, init_model, train_epochs, ArchSpec, TrainConfig};
use crate::protocol::{decode_frame, encode, Message};
use crate::transport::Connection;
use crate::{Dataset, Embedding, Params};

/// Hold out the last `max(1, n/5)` examples for validation; the rest train.
pub fn split_train_validation(data: &Dataset) -> Result<(Dataset, Dataset), CoreError> {
    let n = data.len();
    let held = (n / 5).max(1);
    if held >= n {
        return Err(CoreError::InvalidConfig(format!(
            "{} examples cannot give both a train and a validation split",
            n
        )));
    }
    let cut = n - held;
    let train = Dataset::new(
        data.inputs[..cut].to_vec(),
        data.targets[..cut].to_vec(),
        data.env_id,
    )?;
    let validation = Dataset::new(
        data.inputs[cut..].to_vec(),
        data.targets[cut..].to_vec(),
        data.env_id,
    )?;
    Ok((train, validation))
}

/// One client's local world: its split data, current model, and the fixed
/// mean embedding of its training inputs.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u64,
    pub train: Dataset,
    pub validation: Dataset,
    pub model: Params,
    pub embedding: Embedding,
    /// Per-round training config; `shuffle_seed` advances by `epochs` after
    /// every round so consecutive rounds continue one deterministic epoch
    /// sequence.
    pub train_cfg: TrainConfig,
    /// The learning rate is multiplied by this after every round; 1 keeps
    /// it constant.
    pub lr_decay: f64,
}

/// What one round of local training produced.
#[derive(Debug, Clone)]
pub struct LocalRoundOutcome {
    pub val_loss: f64,
}

impl ClientState {
    pub fn new(
        id: u64,
        data: Dataset,
        arch: ArchSpec,
        extractor: &Extractor<f64>,
        train_cfg: TrainConfig,
        init_seed: u64,
    ) -> Result<Self, CoreError> {
        data.check_arch(arch)?;
        train_cfg.validate()?;
        let (train, validation) = split_train_validation(&data)?;
        let embedding = extractor.mean_embedding(&train)?;
        let model = init_model(arch, init_seed)?;
        Ok(ClientState {
            id,
            train,
            validation,
            model,
            embedding,
            train_cfg,
            lr_decay: 1.0,
        })
    }

    /// Train `train_cfg.epochs` epochs from the current model, advance the
    /// shuffle seed past them, and decay the learning rate for the next
    /// round.
    pub fn local_round(&mut self) -> Result<LocalRoundOutcome, CoreError> {
        self.model = train_epochs(&self.model, &self.train, &self.train_cfg)?;
        self.train_cfg.shuffle_seed = self
            .train_cfg
            .shuffle_seed
            .wrapping_add(self.train_cfg.epochs as u64);
        self.train_cfg.learning_rate *= self.lr_decay;
        Ok(LocalRoundOutcome {
            val_loss: self.val_loss()?,
        })
    }

    /// Replace the local model with a served one of the same shape.
    pub fn adopt(&mut self, params: Params) -> Result<(), CoreError> {
        if params.arch() != self.model.arch() {
            return Err(CoreError::ArchMismatch(format!(
                "server sent {:?}, client holds {:?}",
                params.arch(),
                self.model.arch()
            )));
        }
        self.model = params;
        Ok(())
    }

    pub fn val_loss(&self) -> Result<f64, CoreError> {
        eval_loss(&self.model, &self.validation)
    }
}

/// Isolated training, one client, no communication: `rounds` segments of
/// `train_cfg.epochs` epochs each. Returns the validation loss after each
/// segment. Because the shuffle seed advances per epoch, the trajectory is
/// bit-identical to one unsegmented run over the same total epochs.
pub fn run_local_baseline(
    state: &mut ClientState,
    rounds: usize,
) -> Result<Vec<f64>, CoreError> {
    let mut losses = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        losses.push(state.local_round()?.val_loss);
    }
    Ok(losses)
}

/// Result of pooled-data training.
#[derive(Debug, Clone)]
pub struct CentralOutcome {
    pub model: Params,
    /// `per_round_client_losses[r][c]` is client `c`'s validation loss under
    /// the pooled model after round `r`.
    pub per_round_client_losses: Vec<Vec<f64>>,
}

/// Train one model on everyone's pooled training data, evaluating it on
/// each client's validation split after every round. `lr_decay` follows
/// the same per-round schedule the clients use.
pub fn run_central_baseline(
    pooled_train: &Dataset,
    validations: &[&Dataset],
    arch: ArchSpec,
    train_cfg: TrainConfig,
    rounds: usize,
    init_seed: u64,
    lr_decay: f64,
) -> Result<CentralOutcome, CoreError> {
    train_cfg.validate()?;
    let mut model = init_model(arch, init_seed)?;
    let mut cfg = train_cfg;
    let mut per_round = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        model = train_epochs(&model, pooled_train, &cfg)?;
        cfg.shuffle_seed = cfg.shuffle_seed.wrapping_add(cfg.epochs as u64);
        cfg.learning_rate *= lr_decay;
        let losses = validations
            .iter()
            .map(|v| eval_loss(&model, v))
            .collect::<Result<Vec<_>, _>>()?;
        per_round.push(losses);
    }
    Ok(CentralOutcome {
        model,
        per_round_client_losses: per_round,
    })
}

/// How a client introduces itself to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEntry {
    /// Present from the start; waits for the first round marker.
    Register,
    /// Arrives mid-run: asks for a cluster assignment first, then follows
    /// the remaining rounds.
    Join,
}

/// One completed round from the client's point of view.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundRecord {
    pub round: u64,
    pub label: Label,
    /// Validation loss of the model held after the server's reply (the
    /// cluster model, or the local one for noise clients).
    pub val_loss: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

/// Reply to a mid-run join, before any further training.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    pub label: Label,
    /// Validation loss right after adopting the served model; `None` when
    /// the server had none to offer.
    pub zero_shot_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub join: Option<JoinOutcome>,
    pub rounds: Vec<ClientRoundRecord>,
    /// Every byte sent over the connection, control frames included.
    pub sent_bytes: u64,
    /// Every byte received over the connection.
    pub received_bytes: u64,
}

/// Drive one client through a whole session until the server says stop.
pub fn run_session(
    state: &mut ClientState,
    conn: Connection,
    entry: SessionEntry,
    recv_timeout: Duration,
) -> Result<SessionResult, RunError> {
    let (mut sink, mut source) = conn.split();
    let mut sent_bytes = 0u64;
    let mut received_bytes = 0u64;
    let send = |sink: &mut Box<dyn crate::transport::FrameSink>,
                    msg: &Message,
                    sent: &mut u64|
     -> Result<u64, RunError> {
        let frame = encode(msg);
        sink.send(&frame)?;
        *sent += frame.len() as u64;
        Ok(frame.len() as u64)
    };

    let join = match entry {
        SessionEntry::Register => {
            send(
                &mut sink,
                &Message::Register {
                    client_id: state.id,
                },
                &mut sent_bytes,
            )?;
            None
        }
        SessionEntry::Join => {
            send(
                &mut sink,
                &Message::Join {
                    client_id: state.id,
                    embedding: state.embedding.clone(),
                },
                &mut sent_bytes,
            )?;
            let frame = source.recv_timeout(recv_timeout)?;
            received_bytes += frame.len() as u64;
            match decode_frame(&frame)? {
                Message::JoinReply { label, params } => {
                    let zero_shot_loss = match params {
                        Some(p) => {
                            state.adopt(p)?;
                            Some(state.val_loss()?)
                        }
                        None => None,
                    };
                    Some(JoinOutcome {
                        label,
                        zero_shot_loss,
                    })
                }
                _ => {
                    return Err(RunError::UnexpectedMessage {
                        context: "waiting for join reply",
                        got: "another message",
                    })
                }
            }
        }
    };

    let mut rounds = Vec::new();
    let mut pending_upload: Option<(u64, u64)> = None; // (round, bytes)
    loop {
        let frame = source.recv_timeout(recv_timeout)?;
        received_bytes += frame.len() as u64;
        match decode_frame(&frame)? {
            Message::RoundBegin { round } => {
                if pending_upload.is_some() {
                    return Err(RunError::UnexpectedMessage {
                        context: "waiting for the round's global model",
                        got: "round begin",
                    });
                }
                state.local_round()?;
                let upload = Message::Upload {
                    client_id: state.id,
                    round,
                    num_samples: state.train.len() as u64,
                    params: state.model.clone(),
                    embedding: state.embedding.clone(),
                };
                let n = send(&mut sink, &upload, &mut sent_bytes)?;
                pending_upload = Some((round, n));
            }
            Message::Global {
                round,
                label,
                params,
            } => {
                let (upload_round, upload_bytes) =
                    pending_upload.take().ok_or(RunError::UnexpectedMessage {
                        context: "waiting for a round to begin",
                        got: "global model",
                    })?;
                if upload_round != round {
                    return Err(RunError::MixedRound {
                        client: state.id,
                        expected: upload_round,
                        got: round,
                    });
                }
                if let Some(p) = params {
                    state.adopt(p)?;
                }
                rounds.push(ClientRoundRecord {
                    round,
                    label,
                    val_loss: state.val_loss()?,
                    upload_bytes,
                    download_bytes: frame.len() as u64,
                });
            }
            Message::Shutdown => break,
            _ => {
                return Err(RunError::UnexpectedMessage {
                    context: "inside the round loop",
                    got: "a client-bound message of the wrong kind",
                })
            }
        }
    }

    Ok(SessionResult {
        join,
        rounds,
        sent_bytes,
        received_bytes,
    })
}
