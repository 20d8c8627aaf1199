//! Synthetic regression scenarios: a handful of environments, each with its
//! own linear ground truth, and several clients per environment sampling
//! noisy data around the environment's input mean.
//!
//! Environment truths share a common slope; intercepts sit at fixed spaced
//! offsets on the `env_scale` scale plus a small seeded jitter, so truths
//! genuinely contradict each other by a guaranteed margin while staying
//! jointly learnable by a model with enough capacity (separated input means
//! let a pooled fit tell the environments apart). Input means sit on
//! scaled coordinate axes (axis `e % d`, length `separation * (1 + e / d)`),
//! which keeps every pair of means at least `separation` apart for any
//! number of environments.
//!
//! Everything is driven by one base seed; per-purpose seeds come from
//! [`derive_seed`], so adding clients never disturbs the data of existing
//! ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;
use crate::learner::{ArchSpec, ClientDataset, ModelParams};
use crate::scalar::Scalar;

/// Seed salt for environment ground truths.
pub const SALT_TRUTH: u64 = 0xA1;
/// Seed salt base for per-client data; client `i` uses `SALT_CLIENT_BASE + i`.
pub const SALT_CLIENT_BASE: u64 = 0xC000;
/// Seed salt base for clients created after the fact; extra client `j` uses
/// `SALT_EXTRA_BASE + j`, disjoint from the scenario's own clients.
pub const SALT_EXTRA_BASE: u64 = 0xE000;

/// Splitmix-style derivation of independent stream seeds from one base seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Clients per environment; one entry per environment.
    pub client_counts: Vec<usize>,
    pub samples_min: usize,
    pub samples_max: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Standard deviation of inputs around their environment mean.
    pub input_spread: f64,
    /// Minimum distance between any two environment input means.
    pub env_separation: f64,
    /// Scale of the shared base mapping, uniform in [-base_scale, base_scale].
    pub base_scale: f64,
    /// Half-width of the spread of environment intercept offsets; every pair
    /// of environment truths disagrees by an offset on this scale.
    pub env_scale: f64,
    /// Standard deviation of additive target noise.
    pub label_noise: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    /// `num_envs` environments with `clients_per_env` clients each and the
    /// stock sampling ranges.
    pub fn uniform(num_envs: usize, clients_per_env: usize) -> Self {
        ScenarioConfig {
            client_counts: vec![clients_per_env; num_envs],
            samples_min: 450,
            samples_max: 1000,
            input_dim: 256,
            output_dim: 1,
            input_spread: 0.2,
            env_separation: 3.0,
            base_scale: 0.5,
            env_scale: 0.5,
            label_noise: 0.2,
            seed: 42,
        }
    }

    pub fn num_envs(&self) -> usize {
        self.client_counts.len()
    }

    pub fn num_clients(&self) -> usize {
        self.client_counts.iter().sum()
    }

    /// Environment of the `i`-th client under the flat client ordering
    /// (env 0 clients first, then env 1, ...).
    pub fn env_of_client(&self, client_index: usize) -> usize {
        let mut rest = client_index;
        for (e, &c) in self.client_counts.iter().enumerate() {
            if rest < c {
                return e;
            }
            rest -= c;
        }
        panic!("client index {} out of range", client_index);
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.client_counts.is_empty() {
            return Err(CoreError::InvalidConfig("no environments".into()));
        }
        if self.client_counts.iter().any(|&c| c == 0) {
            return Err(CoreError::InvalidConfig(
                "every environment needs at least one client".into(),
            ));
        }
        if self.samples_min < 2 {
            return Err(CoreError::InvalidConfig(
                "samples_min must be >= 2 so a validation split exists".into(),
            ));
        }
        if self.samples_min > self.samples_max {
            return Err(CoreError::InvalidConfig(
                "samples_min must not exceed samples_max".into(),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(CoreError::InvalidConfig(
                "input_dim and output_dim must be >= 1".into(),
            ));
        }
        for (name, v) in [
            ("input_spread", self.input_spread),
            ("env_separation", self.env_separation),
            ("base_scale", self.base_scale),
            ("env_scale", self.env_scale),
            ("label_noise", self.label_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "{} must be finite and >= 0",
                    name
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth of one environment: input mean plus the linear mapping
/// (row-major `output_dim x input_dim` weights and a bias) behind its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTruth<T> {
    pub mean: Vec<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> EnvTruth<T> {
    /// The truth as a linear model, usable with the learner's evaluation.
    pub fn model(&self) -> Result<ModelParams<T>, CoreError> {
        let input_dim = self.mean.len();
        let output_dim = self.bias.len();
        let mut values = self.weights.clone();
        values.extend_from_slice(&self.bias);
        ModelParams::new(ArchSpec::linear(input_dim, output_dim), values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub config: ScenarioConfig,
    pub envs: Vec<EnvTruth<T>>,
    /// Flat client list, env 0 first; `env_id` is set on each dataset.
    pub clients: Vec<ClientDataset<T>>,
}

/// Input mean of environment `e`: axis `e % input_dim`, scaled so that any
/// two means are at least `env_separation` apart.
pub fn env_mean(cfg: &ScenarioConfig, env: usize) -> Vec<f64> {
    let d = cfg.input_dim;
    let mut mean = vec![0.0; d];
    mean[env % d] = cfg.env_separation * (1 + env / d) as f64;
    mean
}

fn uniform_pm<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    (rng.gen::<f64>() * 2.0 - 1.0) * scale
}

/// Relative intercept offsets for the first environments, in units of
/// `env_scale`. Spaced so that any two environments disagree by at least
/// half a unit and, for up to four environments, no environment sits near
/// the average offset (a parameter-averaged model stays wrong everywhere).
const ENV_OFFSETS: [f64; 4] = [-1.0, 0.5, 1.0, -0.5];

fn gen_truths<T: Scalar>(cfg: &ScenarioConfig) -> Vec<EnvTruth<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_TRUTH));
    let wn = cfg.output_dim * cfg.input_dim;
    let base_w: Vec<f64> = (0..wn).map(|_| uniform_pm(&mut rng, cfg.base_scale)).collect();
    let base_b: Vec<f64> = (0..cfg.output_dim)
        .map(|_| uniform_pm(&mut rng, cfg.base_scale))
        .collect();
    (0..cfg.num_envs())
        .map(|e| {
            // Environments share the slope and disagree in the intercept.
            // The first few offsets are fixed and spaced (see ENV_OFFSETS),
            // later ones draw uniformly; either way a small seeded jitter is
            // added. Offsets never move when environments are appended.
            let center = match ENV_OFFSETS.get(e) {
                Some(&o) => cfg.env_scale * o,
                None => uniform_pm(&mut rng, cfg.env_scale),
            };
            let weights: Vec<T> = base_w.iter().map(|&w| T::from_real(w)).collect();
            let bias: Vec<T> = base_b
                .iter()
                .map(|&b| T::from_real(b + center + uniform_pm(&mut rng, cfg.env_scale / 8.0)))
                .collect();
            let mean: Vec<T> = env_mean(cfg, e).into_iter().map(T::from_real).collect();
            EnvTruth { mean, weights, bias }
        })
        .collect()
}

fn gen_client<T: Scalar>(
    cfg: &ScenarioConfig,
    truth: &EnvTruth<T>,
    env_id: usize,
    salt: u64,
) -> Result<ClientDataset<T>, CoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, salt));
    let n = rng.gen_range(cfg.samples_min..=cfg.samples_max);
    let d_in = cfg.input_dim;
    let d_out = cfg.output_dim;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<T> = (0..d_in)
            .map(|j| {
                let g: f64 = rng.sample(StandardNormal);
                truth.mean[j] + T::from_real(cfg.input_spread * g)
            })
            .collect();
        let y: Vec<T> = (0..d_out)
            .map(|o| {
                let mut acc = truth.bias[o];
                for j in 0..d_in {
                    acc += truth.weights[o * d_in + j] * x[j];
                }
                let g: f64 = rng.sample(StandardNormal);
                acc + T::from_real(cfg.label_noise * g)
            })
            .collect();
        inputs.push(x);
        targets.push(y);
    }
    ClientDataset::new(inputs, targets, env_id)
}

pub fn gen_scenario<T: Scalar>(cfg: &ScenarioConfig) -> Result<Scenario<T>, CoreError> {
    cfg.validate()?;
    let envs = gen_truths::<T>(cfg);
    let mut clients = Vec::with_capacity(cfg.num_clients());
    let mut idx = 0;
    for (e, &count) in cfg.client_counts.iter().enumerate() {
        for _ in 0..count {
            clients.push(gen_client(cfg, &envs[e], e, SALT_CLIENT_BASE + idx as u64)?);
            idx += 1;
        }
    }
    Ok(Scenario {
        config: cfg.clone(),
        envs,
        clients,
    })
}

/// A fresh client for environment `env`, drawn from a seed stream disjoint
/// from the scenario's own clients; the original datasets stay untouched.
pub fn gen_extra_client<T: Scalar>(
    cfg: &ScenarioConfig,
    env: usize,
    extra_index: usize,
) -> Result<ClientDataset<T>, CoreError> {
    cfg.validate()?;
    if env >= cfg.num_envs() {
        return Err(CoreError::InvalidConfig(format!(
            "environment {} does not exist",
            env
        )));
    }
    let envs = gen_truths::<T>(cfg);
    gen_client(cfg, &envs[env], env, SALT_EXTRA_BASE + extra_index as u64)
}

// ---- persistence ----
//
// Plain-text columnar files in one directory: `scenario.txt` holds the
// config, `env_<e>.txt` one truth each, `client_<i>.txt` one dataset each
// (one example per line, inputs then targets). Floats print in shortest
// round-trip form, so save followed by load reproduces every bit.

fn fmt_floats<T: Scalar>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| format!("{}", v.to_real()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse a `key = value` file into a map; blank lines and `#` comments are
/// skipped. The dialect shared by `scenario.txt`, run `config.txt`, and the
/// front end's config files.
pub fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>, CoreError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CoreError::Parse {
            file: file.clone(),
            msg: format!("line {}: expected `key = value`", lineno + 1),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn kv_get<'m>(
    map: &'m BTreeMap<String, String>,
    file: &Path,
    key: &str,
) -> Result<&'m str, CoreError> {
    map.get(key).map(|s| s.as_str()).ok_or_else(|| CoreError::Parse {
        file: file.display().to_string(),
        msg: format!("missing key `{}`", key),
    })
}

fn parse_num<F: std::str::FromStr>(file: &Path, key: &str, raw: &str) -> Result<F, CoreError> {
    raw.parse().map_err(|_| CoreError::Parse {
        file: file.display().to_string(),
        msg: format!("key `{}`: cannot parse `{}`", key, raw),
    })
}

fn parse_float_row<T: Scalar>(file: &Path, lineno: usize, line: &str) -> Result<Vec<T>, CoreError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map(T::from_real).map_err(|_| CoreError::Parse {
                file: file.display().to_string(),
                msg: format!("line {}: bad float `{}`", lineno, tok),
            })
        })
        .collect()
}

pub fn save_scenario<T: Scalar>(scenario: &Scenario<T>, dir: &Path) -> Result<(), CoreError> {
    fs::create_dir_all(dir)?;
    let cfg = &scenario.config;
    let counts = cfg
        .client_counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let scenario_txt = format!(
        "client_counts = {}\nsamples_min = {}\nsamples_max = {}\ninput_dim = {}\noutput_dim = {}\n\
         input_spread = {}\nenv_separation = {}\nbase_scale = {}\nenv_scale = {}\nlabel_noise = {}\nseed = {}\n",
        counts,
        cfg.samples_min,
        cfg.samples_max,
        cfg.input_dim,
        cfg.output_dim,
        cfg.input_spread,
        cfg.env_separation,
        cfg.base_scale,
        cfg.env_scale,
        cfg.label_noise,
        cfg.seed,
    );
    fs::write(dir.join("scenario.txt"), scenario_txt)?;

    for (e, truth) in scenario.envs.iter().enumerate() {
        let text = format!(
            "mean = {}\nweights = {}\nbias = {}\n",
            fmt_floats(&truth.mean),
            fmt_floats(&truth.weights),
            fmt_floats(&truth.bias),
        );
        fs::write(dir.join(format!("env_{}.txt", e)), text)?;
    }

    for (i, client) in scenario.clients.iter().enumerate() {
        let mut text = format!(
            "env_id = {}\nrows = {}\ninput_dim = {}\noutput_dim = {}\n",
            client.env_id,
            client.len(),
            client.input_dim(),
            client.output_dim(),
        );
        for (x, y) in client.inputs.iter().zip(&client.targets) {
            text.push_str(&fmt_floats(x));
            text.push(' ');
            text.push_str(&fmt_floats(y));
            text.push('\n');
        }
        fs::write(dir.join(format!("client_{}.txt", i)), text)?;
    }
    Ok(())
}

pub fn load_scenario<T: Scalar>(dir: &Path) -> Result<Scenario<T>, CoreError> {
    let spath = dir.join("scenario.txt");
    let map = parse_kv(&spath)?;
    let counts_raw = kv_get(&map, &spath, "client_counts")?;
    let client_counts = counts_raw
        .split_whitespace()
        .map(|tok| parse_num::<usize>(&spath, "client_counts", tok))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = ScenarioConfig {
        client_counts,
        samples_min: parse_num(&spath, "samples_min", kv_get(&map, &spath, "samples_min")?)?,
        samples_max: parse_num(&spath, "samples_max", kv_get(&map, &spath, "samples_max")?)?,
        input_dim: parse_num(&spath, "input_dim", kv_get(&map, &spath, "input_dim")?)?,
        output_dim: parse_num(&spath, "output_dim", kv_get(&map, &spath, "output_dim")?)?,
        input_spread: parse_num(&spath, "input_spread", kv_get(&map, &spath, "input_spread")?)?,
        env_separation: parse_num(
            &spath,
            "env_separation",
            kv_get(&map, &spath, "env_separation")?,
        )?,
        base_scale: parse_num(&spath, "base_scale", kv_get(&map, &spath, "base_scale")?)?,
        env_scale: parse_num(&spath, "env_scale", kv_get(&map, &spath, "env_scale")?)?,
        label_noise: parse_num(&spath, "label_noise", kv_get(&map, &spath, "label_noise")?)?,
        seed: parse_num(&spath, "seed", kv_get(&map, &spath, "seed")?)?,
    };
    cfg.validate()?;

    let mut envs = Vec::with_capacity(cfg.num_envs());
    for e in 0..cfg.num_envs() {
        let epath = dir.join(format!("env_{}.txt", e));
        let emap = parse_kv(&epath)?;
        let mean = parse_float_row::<T>(&epath, 0, kv_get(&emap, &epath, "mean")?)?;
        let weights = parse_float_row::<T>(&epath, 0, kv_get(&emap, &epath, "weights")?)?;
        let bias = parse_float_row::<T>(&epath, 0, kv_get(&emap, &epath, "bias")?)?;
        if mean.len() != cfg.input_dim
            || weights.len() != cfg.output_dim * cfg.input_dim
            || bias.len() != cfg.output_dim
        {
            return Err(CoreError::Parse {
                file: epath.display().to_string(),
                msg: "truth dimensions disagree with scenario config".into(),
            });
        }
        envs.push(EnvTruth { mean, weights, bias });
    }

    let mut clients = Vec::with_capacity(cfg.num_clients());
    for i in 0..cfg.num_clients() {
        let cpath = dir.join(format!("client_{}.txt", i));
        let text = fs::read_to_string(&cpath)?;
        let mut env_id = None;
        let mut rows = None;
        let mut d_in = None;
        let mut d_out = None;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "env_id" => env_id = Some(parse_num::<usize>(&cpath, "env_id", v)?),
                    "rows" => rows = Some(parse_num::<usize>(&cpath, "rows", v)?),
                    "input_dim" => d_in = Some(parse_num::<usize>(&cpath, "input_dim", v)?),
                    "output_dim" => d_out = Some(parse_num::<usize>(&cpath, "output_dim", v)?),
                    other => {
                        return Err(CoreError::Parse {
                            file: cpath.display().to_string(),
                            msg: format!("line {}: unknown key `{}`", lineno + 1, other),
                        })
                    }
                }
                continue;
            }
            let (d_in, d_out) = match (d_in, d_out) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(CoreError::Parse {
                        file: cpath.display().to_string(),
                        msg: format!("line {}: data before dimensions", lineno + 1),
                    })
                }
            };
            let row = parse_float_row::<T>(&cpath, lineno + 1, line)?;
            if row.len() != d_in + d_out {
                return Err(CoreError::Parse {
                    file: cpath.display().to_string(),
                    msg: format!(
                        "line {}: expected {} numbers, got {}",
                        lineno + 1,
                        d_in + d_out,
                        row.len()
                    ),
                });
            }
            inputs.push(row[..d_in].to_vec());
            targets.push(row[d_in..].to_vec());
        }
        let env_id = env_id.ok_or_else(|| CoreError::Parse {
            file: cpath.display().to_string(),
            msg: "missing key `env_id`".into(),
        })?;
        let rows = rows.unwrap_or(inputs.len());
        if rows != inputs.len() {
            return Err(CoreError::Parse {
                file: cpath.display().to_string(),
                msg: format!("declared {} rows, found {}", rows, inputs.len()),
            });
        }
        clients.push(ClientDataset::new(inputs, targets, env_id)?);
    }

    Ok(Scenario {
        config: cfg,
        envs,
        clients,
    })
}
