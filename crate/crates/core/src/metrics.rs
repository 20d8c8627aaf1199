//! Run bookkeeping: per-round logs, summary metrics, and the CSV formats
//! the command line tool writes.
//!
//! All output here is deterministic in the run's inputs; nothing records
//! wall-clock time, so replaying a run reproduces every output file byte
//! for byte.

use std::collections::BTreeMap;

use crate::clustering::Label;
use crate::embedding::EmbeddingVector;

/// One client's view of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRound {
    pub client_id: u64,
    /// Cluster membership this round; `None` when the mode has no server
    /// (local and central baselines).
    pub label: Option<Label>,
    pub val_loss: f64,
    /// Bytes the client sent as model upload this round.
    pub upload_bytes: u64,
    /// Bytes the client received as global model this round.
    pub download_bytes: u64,
}

/// One aggregation round across all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    /// 1-based round number.
    pub round: usize,
    pub num_clusters: u32,
    /// Control traffic (registration, round markers, shutdown) in bytes,
    /// not attributable to a single client's model exchange.
    pub overhead_bytes: u64,
    pub clients: Vec<ClientRound>,
}

impl RoundLog {
    pub fn mean_val_loss(&self) -> f64 {
        if self.clients.is_empty() {
            return f64::NAN;
        }
        self.clients.iter().map(|c| c.val_loss).sum::<f64>() / self.clients.len() as f64
    }
}

/// Total traffic over a run, split by direction plus control overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommSummary {
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub overhead_bytes: u64,
}

impl CommSummary {
    pub fn total(&self) -> u64 {
        self.upload_bytes + self.download_bytes + self.overhead_bytes
    }
}

pub fn comm_summary(rounds: &[RoundLog]) -> CommSummary {
    let mut s = CommSummary::default();
    for r in rounds {
        s.overhead_bytes += r.overhead_bytes;
        for c in &r.clients {
            s.upload_bytes += c.upload_bytes;
            s.download_bytes += c.download_bytes;
        }
    }
    s
}

/// Percentage of clients whose federated loss strictly beats their
/// locally-trained loss. Entries are matched by position.
pub fn improvement_rate(federated: &[f64], local: &[f64]) -> f64 {
    assert_eq!(federated.len(), local.len(), "client count mismatch");
    if federated.is_empty() {
        return 0.0;
    }
    let better = federated
        .iter()
        .zip(local)
        .filter(|(f, l)| f < l)
        .count();
    100.0 * better as f64 / federated.len() as f64
}

/// First round whose mean validation loss reaches `target`, if any.
pub fn rounds_to_target(rounds: &[RoundLog], target: f64) -> Option<usize> {
    rounds
        .iter()
        .find(|r| r.mean_val_loss() <= target)
        .map(|r| r.round)
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points. Noise is
/// treated as a singleton cluster per point, so two labelings agree on a
/// noise point only when both isolate it.
pub fn adjusted_rand_index(a: &[Label], b: &[Label]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    // map labels to dense group ids, giving each noise point its own group
    let to_groups = |labels: &[Label]| -> Vec<usize> {
        let mut next = 0usize;
        let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
        let mut out = Vec::with_capacity(labels.len());
        for l in labels {
            match l {
                Label::Cluster(c) => {
                    let id = *seen.entry(*c).or_insert_with(|| {
                        let id = next;
                        next += 1;
                        id
                    });
                    out.push(id);
                }
                Label::Noise => {
                    out.push(next);
                    next += 1;
                }
            }
        }
        out
    };
    let ga = to_groups(a);
    let gb = to_groups(b);

    let mut contingency: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for i in 0..n {
        *contingency.entry((ga[i], gb[i])).or_insert(0) += 1;
        *rows.entry(ga[i]).or_insert(0) += 1;
        *cols.entry(gb[i]).or_insert(0) += 1;
    }
    let sum_ij: f64 = contingency.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n as u64);
    let max_index = 0.5 * (sum_a + sum_b);
    let num = sum_ij - expected;
    let den = max_index - expected;
    if den == 0.0 {
        // both labelings are trivial; identical contingency means agreement
        return if num == 0.0 { 1.0 } else { 0.0 };
    }
    num / den
}

// ---- 2-d projection for cluster plots ----

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenvector of a symmetric PSD matrix by power iteration, or
/// `None` when the matrix is (numerically) zero in every probed direction.
fn top_eigenvector(m: &[Vec<f64>]) -> Option<(Vec<f64>, f64)> {
    use rand::Rng;
    use rand::SeedableRng;
    let d = m.len();
    // fixed-seed start; a deterministic axis start could be orthogonal to
    // the dominant eigenvector
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9E3779B9);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let nv = norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = mat_vec(m, &v);
        let nw = norm(&w);
        if nw < 1e-300 {
            return None;
        }
        let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        lambda = nw;
        if delta < 1e-14 {
            break;
        }
    }
    // deterministic sign: largest-magnitude component is positive
    let lead = v
        .iter()
        .cloned()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    Some((v, lambda))
}

/// Project points onto their top two principal directions. Degenerate
/// inputs (no spread, one dimension) produce zero coordinates in the
/// missing directions.
pub fn pca_2d(points: &[EmbeddingVector<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].dim();
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p.values[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.values.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += row[i] * row[j] / n as f64;
            }
        }
    }
    let project = |axis: &Option<(Vec<f64>, f64)>, row: &[f64]| -> f64 {
        match axis {
            Some((v, _)) => row.iter().zip(v).map(|(a, b)| a * b).sum(),
            None => 0.0,
        }
    };
    let first = top_eigenvector(&cov);
    if let Some((v, lambda)) = &first {
        // deflate the dominant direction before extracting the second
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    let second = top_eigenvector(&cov);
    centered
        .iter()
        .map(|row| (project(&first, row), project(&second, row)))
        .collect()
}

// ---- CSV writers ----

fn label_field(label: Option<Label>) -> String {
    match label {
        None => String::new(),
        Some(Label::Noise) => "-1".into(),
        Some(Label::Cluster(c)) => c.to_string(),
    }
}

/// Long-format per-round, per-client table.
pub fn rounds_csv(rounds: &[RoundLog]) -> String {
    let mut out = String::from(
        "round,k,client_id,label,val_loss,upload_bytes,download_bytes,round_overhead_bytes\n",
    );
    for r in rounds {
        for c in &r.clients {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.round,
                r.num_clusters,
                c.client_id,
                label_field(c.label),
                c.val_loss,
                c.upload_bytes,
                c.download_bytes,
                r.overhead_bytes,
            ));
        }
    }
    out
}

/// Final cluster structure with a 2-d projection of each client embedding.
pub fn clusters_csv(client_ids: &[u64], labels: &[Label], coords: &[(f64, f64)]) -> String {
    assert_eq!(client_ids.len(), labels.len());
    assert_eq!(client_ids.len(), coords.len());
    let mut out = String::from("client_id,label,pc1,pc2\n");
    for i in 0..client_ids.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            client_ids[i],
            label_field(Some(labels[i])),
            coords[i].0,
            coords[i].1,
        ));
    }
    out
}

/// Summary metrics preceded by the resolved configuration as `#` comments.
pub fn report_csv(config: &[(String, String)], metrics: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in config {
        out.push_str(&format!("# {} = {}\n", k, v));
    }
    out.push_str("metric,value\n");
    for (k, v) in metrics {
        out.push_str(&format!("{},{}\n", k, v));
    }
    out
}
