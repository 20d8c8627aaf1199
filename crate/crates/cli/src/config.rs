//! Config resolution: a `key = value` file plus flag overrides.
//!
//! One dialect covers the whole artifact chain. The file a user writes, the
//! `config.txt` a finished run embeds, and the `scenario.txt` inside a
//! generated scenario directory all parse the same way, so any of them can
//! seed the next run: `fedec run --config somerun/config.txt` replays it.
//!
//! Precedence, lowest to highest: stock defaults, the scenario directory's
//! `scenario.txt`, the config file, flags.

use std::collections::BTreeMap;
use std::fmt;
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use fedec_core::aggregation::Weighting;
use fedec_core::datagen::{parse_kv, ScenarioConfig};
use fedec_core::error::{CoreError, RunError};
use fedec_core::experiment::{RunConfig, RunMode, TransportKind};

/// A command failure, split by exit code: bad input (1) versus a run that
/// started and then broke (2).
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "config error: {}", msg),
            Failure::Runtime(msg) => write!(f, "error: {}", msg),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match &e {
            RunError::Config(_)
            | RunError::Core(CoreError::InvalidConfig(_))
            | RunError::Core(CoreError::Parse { .. }) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::from(RunError::Core(e))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Flag overrides shared by `run` and `sweep`; every flag mirrors a config
/// file key.
#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// `key = value` config file; flags override its keys
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// fedec | fedavg | local | central
    #[arg(long)]
    pub mode: Option<String>,

    /// Scenario seed; every random stream in the run re-keys from it
    #[arg(long)]
    pub seed: Option<u64>,

    /// Directory from `gen`; its scenario.txt supplies the scenario keys
    #[arg(long)]
    pub scenario: Option<PathBuf>,

    /// Clients per environment, e.g. 3,3,1
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,

    #[arg(long)]
    pub rounds: Option<usize>,

    #[arg(long)]
    pub epochs_per_round: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    /// Per-round multiplier on the learning rate
    #[arg(long)]
    pub lr_decay: Option<f64>,

    #[arg(long)]
    pub embed_dim: Option<usize>,

    /// Clustering radius in embedding space (fedec)
    #[arg(long)]
    pub eps: Option<f64>,

    /// Neighborhood size that makes a point a core (fedec)
    #[arg(long)]
    pub min_pts: Option<usize>,

    /// linear | mlp:<hidden width>
    #[arg(long)]
    pub arch: Option<String>,

    /// uniform | samples
    #[arg(long)]
    pub weighting: Option<String>,

    /// inproc | tcp | tcp:<address>
    #[arg(long)]
    pub transport: Option<String>,

    /// Also run the isolated-training reference and report how many clients
    /// the federated run improved
    #[arg(long)]
    pub ipr: bool,
}

/// A fully resolved run plus the sweep target carried alongside it.
#[derive(Debug)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub target_loss: Option<f64>,
}

const SCENARIO_KEYS: &[&str] = &[
    "client_counts",
    "samples_min",
    "samples_max",
    "input_dim",
    "output_dim",
    "input_spread",
    "env_separation",
    "base_scale",
    "env_scale",
    "label_noise",
    "seed",
];

const RUN_KEYS: &[&str] = &[
    "mode",
    "arch",
    "rounds",
    "epochs_per_round",
    "batch_size",
    "learning_rate",
    "lr_decay",
    "embed_dim",
    "eps",
    "min_pts",
    "weighting",
    "transport",
    "scenario_dir",
    "compute_ipr",
    "target_loss",
    "timeout_secs",
];

type Map = BTreeMap<String, String>;

fn read_kv(path: &Path) -> Result<Map, Failure> {
    // any problem reading a config file is the caller's input, not a run
    // failure, so it always lands on exit code 1
    parse_kv(path).map_err(|e| Failure::Config(e.to_string()))
}

fn bad_key(src: &Path, key: &str, msg: impl fmt::Display) -> Failure {
    Failure::Config(format!("{}: key `{}`: {}", src.display(), key, msg))
}

fn set_num<T: std::str::FromStr>(
    map: &Map,
    src: &Path,
    key: &str,
    slot: &mut T,
) -> Result<(), Failure> {
    if let Some(raw) = map.get(key) {
        *slot = raw
            .parse()
            .map_err(|_| bad_key(src, key, format_args!("cannot parse `{}`", raw)))?;
    }
    Ok(())
}

pub fn parse_counts(raw: &str) -> Result<Vec<usize>, String> {
    let counts: Vec<usize> = raw
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|tok| !tok.is_empty())
        .map(|tok| tok.parse().map_err(|_| format!("bad count `{}`", tok)))
        .collect::<Result<_, _>>()?;
    if counts.is_empty() {
        return Err("expected at least one environment".into());
    }
    Ok(counts)
}

pub fn parse_arch(raw: &str) -> Result<Option<usize>, String> {
    if raw == "linear" {
        return Ok(None);
    }
    if let Some(h) = raw.strip_prefix("mlp:") {
        let width: usize = h.parse().map_err(|_| format!("bad hidden width `{}`", h))?;
        return Ok(Some(width));
    }
    Err(format!(
        "unknown arch `{}` (expected linear or mlp:<width>)",
        raw
    ))
}

pub fn parse_weighting(raw: &str) -> Result<Weighting, String> {
    match raw {
        "uniform" => Ok(Weighting::Uniform),
        "samples" => Ok(Weighting::SampleCount),
        other => Err(format!(
            "unknown weighting `{}` (expected uniform or samples)",
            other
        )),
    }
}

/// `inproc`, `tcp` (ephemeral local port), or `tcp:<address>`.
pub fn parse_transport(raw: &str) -> Result<(TransportKind, Option<String>), String> {
    if raw == "inproc" {
        return Ok((TransportKind::InProc, None));
    }
    if raw == "tcp" {
        return Ok((TransportKind::Tcp, None));
    }
    if let Some(addr) = raw.strip_prefix("tcp:") {
        let resolves = addr
            .to_socket_addrs()
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if !resolves {
            return Err(format!("bad tcp address `{}`", addr));
        }
        return Ok((TransportKind::Tcp, Some(addr.to_string())));
    }
    Err(format!(
        "unknown transport `{}` (expected inproc, tcp, or tcp:<address>)",
        raw
    ))
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got `{}`", other)),
    }
}

fn apply_scenario_keys(s: &mut ScenarioConfig, map: &Map, src: &Path) -> Result<(), Failure> {
    if let Some(raw) = map.get("client_counts") {
        s.client_counts = parse_counts(raw).map_err(|e| bad_key(src, "client_counts", e))?;
    }
    set_num(map, src, "samples_min", &mut s.samples_min)?;
    set_num(map, src, "samples_max", &mut s.samples_max)?;
    set_num(map, src, "input_dim", &mut s.input_dim)?;
    set_num(map, src, "output_dim", &mut s.output_dim)?;
    set_num(map, src, "input_spread", &mut s.input_spread)?;
    set_num(map, src, "env_separation", &mut s.env_separation)?;
    set_num(map, src, "base_scale", &mut s.base_scale)?;
    set_num(map, src, "env_scale", &mut s.env_scale)?;
    set_num(map, src, "label_noise", &mut s.label_noise)?;
    set_num(map, src, "seed", &mut s.seed)?;
    Ok(())
}

fn apply_run_keys(
    cfg: &mut RunConfig,
    map: &Map,
    src: &Path,
) -> Result<Option<f64>, Failure> {
    if let Some(raw) = map.get("arch") {
        cfg.hidden_dim = parse_arch(raw).map_err(|e| bad_key(src, "arch", e))?;
    }
    set_num(map, src, "rounds", &mut cfg.rounds)?;
    set_num(map, src, "epochs_per_round", &mut cfg.epochs_per_round)?;
    set_num(map, src, "batch_size", &mut cfg.batch_size)?;
    set_num(map, src, "learning_rate", &mut cfg.learning_rate)?;
    set_num(map, src, "lr_decay", &mut cfg.lr_decay)?;
    set_num(map, src, "embed_dim", &mut cfg.embed_dim)?;
    set_num(map, src, "eps", &mut cfg.eps)?;
    set_num(map, src, "min_pts", &mut cfg.min_pts)?;
    if let Some(raw) = map.get("weighting") {
        cfg.weighting = parse_weighting(raw).map_err(|e| bad_key(src, "weighting", e))?;
    }
    if let Some(raw) = map.get("transport") {
        let (kind, bind) = parse_transport(raw).map_err(|e| bad_key(src, "transport", e))?;
        cfg.transport = kind;
        cfg.tcp_bind = bind;
    }
    if let Some(raw) = map.get("compute_ipr") {
        cfg.compute_ipr = parse_bool(raw).map_err(|e| bad_key(src, "compute_ipr", e))?;
    }
    if let Some(raw) = map.get("timeout_secs") {
        let secs: u64 = raw
            .parse()
            .map_err(|_| bad_key(src, "timeout_secs", format_args!("cannot parse `{}`", raw)))?;
        if secs == 0 {
            return Err(bad_key(src, "timeout_secs", "must be >= 1"));
        }
        cfg.timeout = Duration::from_secs(secs);
    }
    let mut target = None;
    if let Some(raw) = map.get("target_loss") {
        let t: f64 = raw
            .parse()
            .map_err(|_| bad_key(src, "target_loss", format_args!("cannot parse `{}`", raw)))?;
        target = Some(t);
    }
    Ok(target)
}

/// Build the run from defaults, the config file, and flags, in that order.
pub fn resolve(args: &CommonArgs) -> Result<Resolved, Failure> {
    let file = args.config.as_deref();
    let map = match file {
        Some(p) => read_kv(p)?,
        None => Map::new(),
    };
    if let Some(p) = file {
        for key in map.keys() {
            if !SCENARIO_KEYS.contains(&key.as_str()) && !RUN_KEYS.contains(&key.as_str()) {
                return Err(Failure::Config(format!(
                    "{}: unknown key `{}`",
                    p.display(),
                    key
                )));
            }
        }
    }

    let mut scenario = ScenarioConfig::uniform(3, 3);

    // a generated scenario directory seeds the scenario keys; inline keys
    // and flags still apply on top
    let dir = args
        .scenario
        .clone()
        .or_else(|| map.get("scenario_dir").map(PathBuf::from));
    if let Some(dir) = &dir {
        let spath = dir.join("scenario.txt");
        if !spath.is_file() {
            return Err(Failure::Config(format!(
                "scenario directory {} has no scenario.txt",
                dir.display()
            )));
        }
        let smap = read_kv(&spath)?;
        apply_scenario_keys(&mut scenario, &smap, &spath)?;
    }
    if let Some(p) = file {
        apply_scenario_keys(&mut scenario, &map, p)?;
    }
    if let Some(counts) = &args.counts {
        scenario.client_counts = counts.clone();
    }
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }

    let mode = match (&args.mode, map.get("mode")) {
        (Some(raw), _) => raw.parse::<RunMode>().map_err(Failure::Config)?,
        (None, Some(raw)) => raw
            .parse::<RunMode>()
            .map_err(|e| bad_key(file.unwrap(), "mode", e))?,
        (None, None) => RunMode::FedEc,
    };

    let mut cfg = RunConfig::new(mode, scenario);
    let mut target_loss = None;
    if let Some(p) = file {
        target_loss = apply_run_keys(&mut cfg, &map, p)?;
    }

    if let Some(raw) = &args.arch {
        cfg.hidden_dim = parse_arch(raw).map_err(Failure::Config)?;
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.epochs_per_round {
        cfg.epochs_per_round = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lr_decay {
        cfg.lr_decay = v;
    }
    if let Some(v) = args.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = args.eps {
        cfg.eps = v;
    }
    if let Some(v) = args.min_pts {
        cfg.min_pts = v;
    }
    if let Some(raw) = &args.weighting {
        cfg.weighting = parse_weighting(raw).map_err(Failure::Config)?;
    }
    if let Some(raw) = &args.transport {
        let (kind, bind) = parse_transport(raw).map_err(Failure::Config)?;
        cfg.transport = kind;
        cfg.tcp_bind = bind;
    }
    if args.ipr {
        cfg.compute_ipr = true;
    }

    Ok(Resolved { cfg, target_loss })
}
