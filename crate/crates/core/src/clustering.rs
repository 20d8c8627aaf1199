//! Density-based clustering of client embeddings (DBSCAN) and nearest-core
//! assignment for clients that join later.
//!
//! Semantics follow the classic formulation: the eps-neighborhood of a point
//! includes the point itself and is inclusive at the boundary
//! (`distance <= eps`); a point is core when its neighborhood holds at least
//! `min_pts` points; clusters are the transitive closure of core points over
//! shared neighborhoods, plus the border points within eps of one of their
//! cores. Points reachable from no core are noise.
//!
//! Everything is deterministic: points are scanned in index order, expansion
//! queues pop the smallest pending index, cluster ids count up in the order
//! the first core point of each cluster is discovered, and a border point in
//! range of several clusters keeps the first claim.

use std::collections::BTreeSet;

use crate::embedding::EmbeddingVector;
use crate::error::CoreError;
use crate::scalar::Scalar;

/// Cluster membership of one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Noise,
    Cluster(u32),
}

impl Label {
    pub fn is_noise(&self) -> bool {
        matches!(self, Label::Noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams<T> {
    pub eps: T,
    pub min_pts: usize,
}

impl<T: Scalar> ClusterParams<T> {
    pub fn new(eps: T, min_pts: usize) -> Self {
        ClusterParams { eps, min_pts }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !self.eps.is_finite() || self.eps <= T::zero() {
            return Err(CoreError::InvalidConfig(
                "eps must be positive and finite".into(),
            ));
        }
        if self.min_pts == 0 {
            return Err(CoreError::InvalidConfig("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one clustering pass over an indexed point set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<Label>,
    /// Which points are core points; core points are never noise.
    pub core: Vec<bool>,
    pub num_clusters: u32,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_dims<T: Scalar>(points: &[EmbeddingVector<T>]) -> Result<(), CoreError> {
    if let Some(first) = points.first() {
        for p in points {
            if p.dim() != first.dim() {
                return Err(CoreError::DimMismatch {
                    what: "embedding dims across points",
                    expected: first.dim(),
                    got: p.dim(),
                });
            }
        }
    }
    Ok(())
}

/// DBSCAN over `points`. The empty set yields an empty assignment.
pub fn dbscan<T: Scalar>(
    points: &[EmbeddingVector<T>],
    params: &ClusterParams<T>,
) -> Result<ClusterAssignment, CoreError> {
    params.validate()?;
    check_dims(points)?;
    let n = points.len();
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut ns = Vec::new();
        for j in 0..n {
            if points[i].distance(&points[j]) <= params.eps {
                ns.push(j);
            }
        }
        neighbors.push(ns);
    }

    let mut labels = vec![Label::Noise; n];
    let mut core = vec![false; n];
    let mut visited = vec![false; n];
    let mut next_cluster: u32 = 0;

    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if neighbors[i].len() < params.min_pts {
            continue; // provisional noise; a later cluster may claim it as border
        }
        let cid = next_cluster;
        next_cluster += 1;
        core[i] = true;
        labels[i] = Label::Cluster(cid);
        let mut seeds: BTreeSet<usize> = neighbors[i].iter().copied().filter(|&j| j != i).collect();
        while let Some(j) = seeds.iter().next().copied() {
            seeds.remove(&j);
            if labels[j] == Label::Noise {
                labels[j] = Label::Cluster(cid);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if neighbors[j].len() >= params.min_pts {
                core[j] = true;
                for &q in &neighbors[j] {
                    if !visited[q] || labels[q] == Label::Noise {
                        seeds.insert(q);
                    }
                }
            }
        }
    }

    Ok(ClusterAssignment {
        labels,
        core,
        num_clusters: next_cluster,
    })
}

/// Label for a point that was not part of the clustering pass: the cluster
/// of the nearest core point within eps, or noise if none is in range.
/// Exact distance ties go to the core point with the lowest index.
pub fn assign_new<T: Scalar>(
    point: &EmbeddingVector<T>,
    points: &[EmbeddingVector<T>],
    assignment: &ClusterAssignment,
    params: &ClusterParams<T>,
) -> Result<Label, CoreError> {
    params.validate()?;
    check_dims(points)?;
    if assignment.len() != points.len() {
        return Err(CoreError::DimMismatch {
            what: "assignment vs points",
            expected: points.len(),
            got: assignment.len(),
        });
    }
    if let Some(first) = points.first() {
        if point.dim() != first.dim() {
            return Err(CoreError::DimMismatch {
                what: "new point dim",
                expected: first.dim(),
                got: point.dim(),
            });
        }
    }
    let mut best: Option<(T, Label)> = None;
    for (i, p) in points.iter().enumerate() {
        if !assignment.core[i] {
            continue;
        }
        let d = point.distance(p);
        if d > params.eps {
            continue;
        }
        // strict < keeps the lowest-index core on exact ties
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, assignment.labels[i]));
        }
    }
    Ok(best.map_or(Label::Noise, |(_, l)| l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(coords: &[&[f64]]) -> Vec<EmbeddingVector<f64>> {
        coords
            .iter()
            .map(|c| EmbeddingVector::new(c.to_vec()))
            .collect()
    }

    fn params(eps: f64, min_pts: usize) -> ClusterParams<f64> {
        ClusterParams::new(eps, min_pts)
    }

    #[test]
    fn three_tight_groups_make_three_clusters() {
        // groups near (0,0), (10,0), (0,10); within-group distances < 1
        let points = pts(&[
            &[0.0, 0.0],
            &[0.3, 0.1],
            &[0.1, 0.4],
            &[10.0, 0.0],
            &[10.2, 0.3],
            &[9.8, 0.1],
            &[0.0, 10.0],
            &[0.4, 9.9],
            &[0.2, 10.3],
        ]);
        let a = dbscan(&points, &params(1.0, 2)).unwrap();
        assert_eq!(a.num_clusters, 3);
        assert_eq!(
            a.labels,
            vec![
                Label::Cluster(0),
                Label::Cluster(0),
                Label::Cluster(0),
                Label::Cluster(1),
                Label::Cluster(1),
                Label::Cluster(1),
                Label::Cluster(2),
                Label::Cluster(2),
                Label::Cluster(2),
            ]
        );
        assert!(a.core.iter().all(|&c| c));
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let points = pts(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let a = dbscan(&points, &params(0.5, 5)).unwrap();
        assert_eq!(a.num_clusters, 1);
        assert!(a.labels.iter().all(|&l| l == Label::Cluster(0)));
    }

    #[test]
    fn two_distant_points_are_noise() {
        let points = pts(&[&[0.0], &[5.0]]);
        let a = dbscan(&points, &params(1.0, 2)).unwrap();
        assert_eq!(a.num_clusters, 0);
        assert_eq!(a.labels, vec![Label::Noise, Label::Noise]);
        assert_eq!(a.core, vec![false, false]);
    }

    #[test]
    fn eps_boundary_is_inclusive() {
        // distance exactly eps: neighborhood includes both points
        let points = pts(&[&[0.0], &[1.0]]);
        let a = dbscan(&points, &params(1.0, 2)).unwrap();
        assert_eq!(a.num_clusters, 1);
        assert_eq!(a.labels, vec![Label::Cluster(0), Label::Cluster(0)]);
    }

    #[test]
    fn eps_of_full_diameter_collapses_everything() {
        let points = pts(&[&[0.0, 0.0], &[3.0, 0.0], &[0.0, 4.0], &[3.0, 4.0]]);
        let a = dbscan(&points, &params(5.0, 2)).unwrap();
        assert_eq!(a.num_clusters, 1);
        assert!(a.labels.iter().all(|&l| l == Label::Cluster(0)));
    }

    #[test]
    fn border_point_goes_to_first_discovered_cluster() {
        // Two four-point groups plus a point b at 1.25 that is within eps of
        // exactly one core from each group (0.3 and 2.15) but has only three
        // neighbors itself, so with min_pts 4 it stays border. The group
        // containing index 0 is discovered first and keeps the claim.
        let points = pts(&[
            &[0.0],
            &[0.1],
            &[0.2],
            &[0.3],
            &[2.15],
            &[2.5],
            &[2.6],
            &[2.7],
            &[1.25],
        ]);
        let a = dbscan(&points, &params(1.0, 4)).unwrap();
        assert_eq!(a.num_clusters, 2);
        for i in 0..4 {
            assert_eq!(a.labels[i], Label::Cluster(0));
            assert!(a.core[i]);
        }
        for i in 4..8 {
            assert_eq!(a.labels[i], Label::Cluster(1));
            assert!(a.core[i]);
        }
        assert_eq!(a.labels[8], Label::Cluster(0));
        assert!(!a.core[8]);
    }

    #[test]
    fn empty_input_yields_empty_assignment() {
        let a = dbscan::<f64>(&[], &params(1.0, 2)).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.num_clusters, 0);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let points = vec![
            EmbeddingVector::new(vec![0.0, 1.0]),
            EmbeddingVector::new(vec![0.0]),
        ];
        assert!(matches!(
            dbscan(&points, &params(1.0, 2)),
            Err(CoreError::DimMismatch { .. })
        ));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let points = pts(&[&[0.0]]);
        assert!(dbscan(&points, &params(0.0, 2)).is_err());
        assert!(dbscan(&points, &params(-1.0, 2)).is_err());
        assert!(dbscan(&points, &params(1.0, 0)).is_err());
    }

    #[test]
    fn assign_new_coincident_with_core() {
        let points = pts(&[&[0.0, 0.0], &[0.2, 0.0], &[5.0, 5.0], &[5.2, 5.0]]);
        let a = dbscan(&points, &params(0.5, 2)).unwrap();
        let l = assign_new(
            &EmbeddingVector::new(vec![5.0, 5.0]),
            &points,
            &a,
            &params(0.5, 2),
        )
        .unwrap();
        assert_eq!(l, Label::Cluster(1));
    }

    #[test]
    fn assign_new_beyond_eps_is_noise() {
        let points = pts(&[&[0.0], &[0.1]]);
        let a = dbscan(&points, &params(0.5, 2)).unwrap();
        let l = assign_new(&EmbeddingVector::new(vec![10.0]), &points, &a, &params(0.5, 2)).unwrap();
        assert_eq!(l, Label::Noise);
    }

    #[test]
    fn assign_new_tie_breaks_to_lower_index() {
        // Two two-point clusters mirrored around the origin; the query at 0
        // is exactly 1.0 from the nearest core of each.
        let points = pts(&[&[-1.0], &[-1.5], &[1.0], &[1.5]]);
        let p = params(0.5, 2);
        let a = dbscan(&points, &p).unwrap();
        assert_eq!(a.num_clusters, 2);
        let q = EmbeddingVector::new(vec![0.0]);
        let d_left = q.distance(&points[0]);
        let d_right = q.distance(&points[2]);
        assert_eq!(d_left, d_right, "construction gives an exact tie");
        let l = assign_new(&q, &points, &a, &params(1.0, 2)).unwrap();
        assert_eq!(l, Label::Cluster(0), "tie goes to the lower point index");
    }

    #[test]
    fn cores_are_never_noise() {
        let points = pts(&[&[0.0], &[0.5], &[0.9], &[7.0]]);
        let a = dbscan(&points, &params(1.0, 2)).unwrap();
        for i in 0..points.len() {
            if a.core[i] {
                assert!(!a.labels[i].is_noise());
            }
        }
        assert_eq!(a.labels[3], Label::Noise);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Canonical form of an assignment: the set of clusters, each the
        /// sorted set of member indices, plus the noise set.
        fn canonical(a: &ClusterAssignment) -> (BTreeSet<Vec<usize>>, Vec<usize>) {
            let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
            let mut noise = Vec::new();
            for (i, l) in a.labels.iter().enumerate() {
                match l {
                    Label::Cluster(c) => groups.entry(*c).or_default().push(i),
                    Label::Noise => noise.push(i),
                }
            }
            (groups.into_values().collect(), noise)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Relabeling points permutes the partition but not its shape.
            #[test]
            fn permutation_covariance(
                seed in 0u64..500,
                n in 2usize..14,
                eps in 0.2f64..1.5,
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let points: Vec<EmbeddingVector<f64>> = (0..n)
                    .map(|_| EmbeddingVector::new(vec![
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ]))
                    .collect();
                let p = ClusterParams::new(eps, 2);
                let a = dbscan(&points, &p).unwrap();

                // rotate the point order by one
                let mut rotated = points.clone();
                rotated.rotate_left(1);
                let b = dbscan(&rotated, &p).unwrap();

                // map rotated indices back to originals
                let mut b_back = vec![Label::Noise; n];
                let mut core_back = vec![false; n];
                for i in 0..n {
                    b_back[(i + 1) % n] = b.labels[i];
                    core_back[(i + 1) % n] = b.core[i];
                }
                let b_assign = ClusterAssignment {
                    labels: b_back,
                    core: core_back,
                    num_clusters: b.num_clusters,
                };
                prop_assert_eq!(canonical(&a), canonical(&b_assign));
            }
        }
    }
}
