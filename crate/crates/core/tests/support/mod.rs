//! Helpers shared by the end-to-end suite: an independently written
//! clustering reference, a finite-difference gradient, a random wire
//! message source, and a hand-driven federated session runner.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fedec_core::client::{run_session, ClientState, SessionEntry, SessionResult};
use fedec_core::clustering::{ClusterAssignment, Label};
use fedec_core::datagen::{derive_seed, gen_scenario};
use fedec_core::embedding::EmbeddingVector;
use fedec_core::experiment::{RunConfig, SALT_INIT, SALT_SHUFFLE_BASE};
use fedec_core::learner::{eval_loss, ArchSpec, ModelParams, TrainConfig};
use fedec_core::protocol::Message;
use fedec_core::server::{serve, AggregationMode, ServerConfig, ServerReport};
use fedec_core::transport::inproc_network;
use fedec_core::{Dataset, Embedding, Params};

/// A labeling reduced to what it states: the set of clusters (each a sorted
/// index list) and the noise indices.
pub type Partition = (BTreeSet<Vec<usize>>, Vec<usize>);

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Clustering reference built the slow way: full neighbor matrix, core
/// flags, transitive closure of core-to-core adjacency, then each border
/// point claimed by the component whose lowest core index is smallest (the
/// component a scan in index order discovers first). Returns the partition
/// and the core flags.
pub fn reference_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> (Partition, Vec<bool>) {
    let n = points.len();
    let mut within = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            within[i][j] = euclid(&points[i], &points[j]) <= eps;
        }
    }
    let core: Vec<bool> = (0..n)
        .map(|i| within[i].iter().filter(|&&w| w).count() >= min_pts)
        .collect();

    // reach[i][j]: cores i and j are density-connected
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && within[i][j];
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // a component is named by its lowest core index
    let comp = |i: usize| (0..n).find(|&j| reach[i][j]).unwrap();

    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut noise = Vec::new();
    for i in 0..n {
        if core[i] {
            clusters.entry(comp(i)).or_default().push(i);
        } else {
            let claim = (0..n).filter(|&j| core[j] && within[i][j]).map(comp).min();
            match claim {
                Some(c) => clusters.entry(c).or_default().push(i),
                None => noise.push(i),
            }
        }
    }
    ((clusters.into_values().collect(), noise), core)
}

/// The same reduced form for the library's assignment type.
pub fn canon_assignment(a: &ClusterAssignment) -> Partition {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut noise = Vec::new();
    for (i, l) in a.labels.iter().enumerate() {
        match l {
            Label::Cluster(c) => groups.entry(*c).or_default().push(i),
            Label::Noise => noise.push(i),
        }
    }
    (groups.into_values().collect(), noise)
}

/// Central finite differences of the batch loss around `model`.
pub fn fd_gradient(model: &Params, data: &Dataset, h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.values().len());
    for p in 0..model.values().len() {
        let mut plus = model.values().to_vec();
        let mut minus = plus.clone();
        plus[p] += h;
        minus[p] -= h;
        let lp = eval_loss(&ModelParams::new(model.arch(), plus).unwrap(), data).unwrap();
        let lm = eval_loss(&ModelParams::new(model.arch(), minus).unwrap(), data).unwrap();
        out.push((lp - lm) / (2.0 * h));
    }
    out
}

fn random_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..10) {
        0 => 0.0,
        1 => -0.0,
        2 => 1e300,
        3 => -1e300,
        4 => 5e-324,
        5 => -1e-308,
        _ => rng.gen_range(-1e6..1e6),
    }
}

fn random_u64(rng: &mut ChaCha8Rng) -> u64 {
    match rng.gen_range(0..8) {
        0 => 0,
        1 => u64::MAX,
        _ => rng.gen(),
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> Params {
    let arch = if rng.gen_bool(0.5) {
        ArchSpec::linear(rng.gen_range(1..=5), rng.gen_range(1..=3))
    } else {
        ArchSpec::mlp(
            rng.gen_range(1..=4),
            rng.gen_range(1..=5),
            rng.gen_range(1..=3),
        )
    };
    let values = (0..arch.parameter_count())
        .map(|_| random_f64(rng))
        .collect();
    ModelParams::new(arch, values).unwrap()
}

fn random_embedding(rng: &mut ChaCha8Rng) -> Embedding {
    let dim = rng.gen_range(1..=8);
    EmbeddingVector::new((0..dim).map(|_| random_f64(rng)).collect())
}

// labels ride as i32 on the wire, so cluster ids stay in i32 range
fn random_label(rng: &mut ChaCha8Rng) -> Label {
    match rng.gen_range(0..6) {
        0 => Label::Noise,
        1 => Label::Cluster(i32::MAX as u32),
        _ => Label::Cluster(rng.gen_range(0..1000)),
    }
}

/// One message of a random kind with randomized contents, covering every
/// variant and the numeric edge values.
pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    match rng.gen_range(0..8) {
        0 => Message::Register {
            client_id: random_u64(rng),
        },
        1 => Message::Upload {
            client_id: random_u64(rng),
            round: random_u64(rng),
            num_samples: random_u64(rng),
            params: random_params(rng),
            embedding: random_embedding(rng),
        },
        2 => {
            let label = random_label(rng);
            // only clustered labels may carry a model
            let params = match label {
                Label::Noise => None,
                Label::Cluster(_) if rng.gen_bool(0.3) => None,
                Label::Cluster(_) => Some(random_params(rng)),
            };
            Message::Global {
                round: random_u64(rng),
                label,
                params,
            }
        }
        3 => Message::Join {
            client_id: random_u64(rng),
            embedding: random_embedding(rng),
        },
        4 => {
            let label = random_label(rng);
            let params = match label {
                Label::Noise => None,
                Label::Cluster(_) if rng.gen_bool(0.3) => None,
                Label::Cluster(_) => Some(random_params(rng)),
            };
            Message::JoinReply { label, params }
        }
        5 => Message::RoundBegin {
            round: random_u64(rng),
        },
        6 => Message::Shutdown,
        _ => {
            let rows = rng.gen_range(0..4);
            let d_in = rng.gen_range(1..=3);
            let d_out = rng.gen_range(1..=2);
            Message::RawData {
                client_id: random_u64(rng),
                inputs: (0..rows)
                    .map(|_| (0..d_in).map(|_| random_f64(rng)).collect())
                    .collect(),
                targets: (0..rows)
                    .map(|_| (0..d_out).map(|_| random_f64(rng)).collect())
                    .collect(),
            }
        }
    }
}

/// Client states exactly as the experiment driver builds them.
pub fn build_states(cfg: &RunConfig) -> Vec<ClientState> {
    let scenario = gen_scenario::<f64>(&cfg.scenario).unwrap();
    let extractor = cfg.extractor().unwrap();
    let init_seed = derive_seed(cfg.scenario.seed, SALT_INIT);
    scenario
        .clients
        .iter()
        .enumerate()
        .map(|(i, data)| {
            let mut s = ClientState::new(
                i as u64,
                data.clone(),
                cfg.arch(),
                &extractor,
                TrainConfig {
                    epochs: cfg.epochs_per_round,
                    batch_size: cfg.batch_size,
                    learning_rate: cfg.learning_rate,
                    shuffle_seed: derive_seed(cfg.scenario.seed, SALT_SHUFFLE_BASE + i as u64),
                },
                init_seed,
            )
            .unwrap();
            s.lr_decay = cfg.lr_decay;
            s
        })
        .collect()
}

/// Run a clustered session by hand on the in-process transport and keep the
/// final client states, which the library driver discards.
pub fn drive_clustered(cfg: &RunConfig) -> (ServerReport, Vec<(ClientState, SessionResult)>) {
    let states = build_states(cfg);
    let server_cfg = ServerConfig {
        expected_clients: states.len(),
        rounds: cfg.rounds as u64,
        mode: AggregationMode::Clustered {
            eps: cfg.eps,
            min_pts: cfg.min_pts,
        },
        weighting: cfg.weighting,
        barrier_timeout: cfg.timeout,
    };
    let (acceptor, connector) = inproc_network();
    let server = std::thread::spawn(move || serve(acceptor, server_cfg));
    let workers: Vec<_> = states
        .into_iter()
        .map(|mut state| {
            let connector = connector.clone();
            std::thread::spawn(move || {
                let conn = connector.connect().unwrap();
                let result =
                    run_session(&mut state, conn, SessionEntry::Register, Duration::from_secs(60))
                        .unwrap();
                (state, result)
            })
        })
        .collect();
    let mut clients: Vec<(ClientState, SessionResult)> =
        workers.into_iter().map(|w| w.join().unwrap()).collect();
    clients.sort_by_key(|(s, _)| s.id);
    let report = server.join().unwrap().unwrap();
    (report, clients)
}
