//! Parameter averaging: one model per cluster from the member uploads.
//!
//! Noise points get no aggregate; those clients keep training alone. Both
//! the clustered mode and the single-cluster baseline go through the same
//! entry points so that when everyone lands in one cluster the two modes
//! produce bit-identical averages.

use std::collections::BTreeMap;

use crate::clustering::Label;
use crate::error::CoreError;
use crate::learner::ModelParams;
use crate::scalar::Scalar;

/// How member models are weighted inside a cluster average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Plain mean over members.
    Uniform,
    /// Mean weighted by each member's training-sample count.
    SampleCount,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Uniform
    }
}

/// Weighted average of models sharing one architecture. `weights` of `None`
/// means uniform; given weights must be positive and finite and are
/// normalized by their sum.
pub fn average_params<T: Scalar>(
    models: &[&ModelParams<T>],
    weights: Option<&[f64]>,
) -> Result<ModelParams<T>, CoreError> {
    let first = models.first().ok_or(CoreError::EmptyDataset)?;
    let arch = first.arch();
    for m in models {
        if m.arch() != arch {
            return Err(CoreError::ArchMismatch(format!(
                "cannot average {:?} with {:?}",
                m.arch(),
                arch
            )));
        }
    }
    if let Some(ws) = weights {
        if ws.len() != models.len() {
            return Err(CoreError::DimMismatch {
                what: "weights vs models",
                expected: models.len(),
                got: ws.len(),
            });
        }
        for &w in ws {
            if !w.is_finite() || w <= 0.0 {
                return Err(CoreError::InvalidConfig(
                    "model weights must be positive and finite".into(),
                ));
            }
        }
    }

    let count = arch.parameter_count();
    let mut acc = vec![T::zero(); count];
    let mut total = T::zero();
    for (k, m) in models.iter().enumerate() {
        let w = match weights {
            Some(ws) => T::from_real(ws[k]),
            None => T::one(),
        };
        total += w;
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += w * v;
        }
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    ModelParams::new(arch, acc)
}

/// The per-cluster models produced by one aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModelSet<T> {
    pub models: BTreeMap<u32, ModelParams<T>>,
}

impl<T> ClusterModelSet<T> {
    pub fn empty() -> Self {
        ClusterModelSet {
            models: BTreeMap::new(),
        }
    }

    /// Model for a label; noise has none.
    pub fn get(&self, label: Label) -> Option<&ModelParams<T>> {
        match label {
            Label::Noise => None,
            Label::Cluster(id) => self.models.get(&id),
        }
    }
}

/// Average the member models of every cluster. `labels`, `models`, and
/// `sample_counts` are parallel, one entry per uploading client; noise
/// entries are skipped.
pub fn aggregate_clusters<T: Scalar>(
    labels: &[Label],
    models: &[ModelParams<T>],
    sample_counts: &[usize],
    weighting: Weighting,
) -> Result<ClusterModelSet<T>, CoreError> {
    if labels.len() != models.len() {
        return Err(CoreError::DimMismatch {
            what: "labels vs models",
            expected: models.len(),
            got: labels.len(),
        });
    }
    if sample_counts.len() != models.len() {
        return Err(CoreError::DimMismatch {
            what: "sample counts vs models",
            expected: models.len(),
            got: sample_counts.len(),
        });
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Label::Cluster(id) = l {
            members.entry(*id).or_default().push(i);
        }
    }
    let mut out = BTreeMap::new();
    for (id, idx) in members {
        let group: Vec<&ModelParams<T>> = idx.iter().map(|&i| &models[i]).collect();
        let averaged = match weighting {
            Weighting::Uniform => average_params(&group, None)?,
            Weighting::SampleCount => {
                let ws: Vec<f64> = idx.iter().map(|&i| sample_counts[i] as f64).collect();
                average_params(&group, Some(&ws))?
            }
        };
        out.insert(id, averaged);
    }
    Ok(ClusterModelSet { models: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::ArchSpec;

    fn linear_model(values: Vec<f64>) -> ModelParams<f64> {
        // linear 2 -> 1: two weights and a bias
        ModelParams::new(ArchSpec::linear(2, 1), values).unwrap()
    }

    #[test]
    fn copies_average_to_themselves() {
        // dyadic values keep every intermediate sum exact
        let m = linear_model(vec![0.25, -0.5, 1.0]);
        let avg = average_params(&[&m, &m, &m], None).unwrap();
        assert_eq!(avg.values(), m.values());
    }

    #[test]
    fn uniform_mean_of_two_models() {
        let a = linear_model(vec![0.0, 2.0, 4.0]);
        let b = linear_model(vec![2.0, 0.0, 0.0]);
        let avg = average_params(&[&a, &b], None).unwrap();
        assert_eq!(avg.values(), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn explicit_weights_shift_the_mean() {
        let a = linear_model(vec![0.0, 2.0, 4.0]);
        let b = linear_model(vec![2.0, 0.0, 0.0]);
        let avg = average_params(&[&a, &b], Some(&[3.0, 1.0])).unwrap();
        assert_eq!(avg.values(), &[0.5, 1.5, 3.0]);
    }

    #[test]
    fn weight_scale_does_not_matter() {
        let a = linear_model(vec![0.0, 2.0, 4.0]);
        let b = linear_model(vec![2.0, 0.0, 0.0]);
        let x = average_params(&[&a, &b], Some(&[3.0, 1.0])).unwrap();
        let y = average_params(&[&a, &b], Some(&[6.0, 2.0])).unwrap();
        assert_eq!(x.values(), y.values());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            average_params::<f64>(&[], None),
            Err(CoreError::EmptyDataset)
        ));
    }

    #[test]
    fn mixed_architectures_are_rejected() {
        let a = linear_model(vec![0.0; 3]);
        let b = ModelParams::new(ArchSpec::linear(3, 1), vec![0.0; 4]).unwrap();
        assert!(matches!(
            average_params(&[&a, &b], None),
            Err(CoreError::ArchMismatch(_))
        ));
    }

    #[test]
    fn bad_weights_are_rejected() {
        let a = linear_model(vec![0.0; 3]);
        let b = linear_model(vec![1.0; 3]);
        assert!(average_params(&[&a, &b], Some(&[1.0])).is_err());
        assert!(average_params(&[&a, &b], Some(&[1.0, 0.0])).is_err());
        assert!(average_params(&[&a, &b], Some(&[1.0, -2.0])).is_err());
        assert!(average_params(&[&a, &b], Some(&[1.0, f64::NAN])).is_err());
    }

    #[test]
    fn clusters_average_only_their_members() {
        let models = vec![
            linear_model(vec![0.0, 2.0, 4.0]),
            linear_model(vec![9.0, 9.0, 9.0]),
            linear_model(vec![2.0, 0.0, 0.0]),
        ];
        let labels = vec![Label::Cluster(0), Label::Noise, Label::Cluster(0)];
        let set = aggregate_clusters(&labels, &models, &[1, 1, 1], Weighting::Uniform).unwrap();
        assert_eq!(set.models.len(), 1);
        assert_eq!(set.models[&0].values(), &[1.0, 1.0, 2.0]);
        assert!(set.get(Label::Noise).is_none());
    }

    #[test]
    fn sample_count_weighting_uses_member_sizes() {
        let models = vec![
            linear_model(vec![0.0, 2.0, 4.0]),
            linear_model(vec![2.0, 0.0, 0.0]),
        ];
        let labels = vec![Label::Cluster(0), Label::Cluster(0)];
        let set = aggregate_clusters(&labels, &models, &[3, 1], Weighting::SampleCount).unwrap();
        assert_eq!(set.models[&0].values(), &[0.5, 1.5, 3.0]);
    }

    #[test]
    fn singleton_clusters_pass_models_through() {
        let models = vec![
            linear_model(vec![1.0, 2.0, 3.0]),
            linear_model(vec![4.0, 5.0, 6.0]),
        ];
        let labels = vec![Label::Cluster(0), Label::Cluster(1)];
        let set = aggregate_clusters(&labels, &models, &[5, 7], Weighting::Uniform).unwrap();
        assert_eq!(set.models.len(), 2);
        assert_eq!(set.models[&0].values(), &[1.0, 2.0, 3.0]);
        assert_eq!(set.models[&1].values(), &[4.0, 5.0, 6.0]);
        assert_eq!(
            set.get(Label::Cluster(1)).unwrap().values(),
            &[4.0, 5.0, 6.0]
        );
    }

    #[test]
    fn no_uploads_yield_no_models() {
        let set =
            aggregate_clusters::<f64>(&[], &[], &[], Weighting::Uniform).unwrap();
        assert!(set.models.is_empty());
    }

    #[test]
    fn parallel_slice_lengths_are_checked() {
        let models = vec![linear_model(vec![0.0; 3])];
        assert!(aggregate_clusters(&[], &models, &[1], Weighting::Uniform).is_err());
        assert!(
            aggregate_clusters(&[Label::Cluster(0)], &models, &[], Weighting::Uniform).is_err()
        );
    }
}
