//! Synthetic analytic reward committee and unanimous-consensus partitioning.
//!
//! Each committee member scores one interpretable facet of a sample:
//!
//! | kind        | `r(x, c)`                | stand-in for        |
//! |-------------|--------------------------|---------------------|
//! | `alignment` | `−‖x − c‖²`              | prompt alignment    |
//! | `magnitude` | `−(‖x‖ − ρ)²`            | aesthetics          |
//! | `roughness` | `−Σ (x_{i+1} − x_i)²`    | detail / smoothness |
//! | `axis`      | `⟨x, u⟩`, `‖u‖ = 1`      | a stylistic axis    |

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dpo::PreferencePair;
use crate::error::{check_dim, Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Alignment,
    Magnitude { radius: f64 },
    Roughness,
    Axis { direction: Vec<f64> },
}

impl RewardSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RewardSpec::Alignment => "alignment",
            RewardSpec::Magnitude { .. } => "magnitude",
            RewardSpec::Roughness => "roughness",
            RewardSpec::Axis { .. } => "axis",
        }
    }

    pub fn eval(&self, x: &[f64], c: &[f64]) -> Result<f64> {
        let r = match self {
            RewardSpec::Alignment => {
                check_dim("alignment reward condition", x.len(), c.len())?;
                -math::sq_dist(x, c)
            }
            RewardSpec::Magnitude { radius } => {
                let gap = libm::sqrt(math::norm_sq(x)) - radius;
                -gap * gap
            }
            RewardSpec::Roughness => -x.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum::<f64>(),
            RewardSpec::Axis { direction } => {
                check_dim("axis reward direction", direction.len(), x.len())?;
                math::dot(x, direction) / libm::sqrt(math::norm_sq(direction))
            }
        };
        Ok(r)
    }

    /// A high-scoring point for condition `c` in dimension `d`, used to seed
    /// candidate generation. `c` is truncated or zero-padded to `d`.
    pub fn anchor(&self, c: &[f64], d: usize) -> Vec<f64> {
        let mut base: Vec<f64> = (0..d).map(|i| c.get(i).copied().unwrap_or(0.0)).collect();
        match self {
            RewardSpec::Alignment => base,
            RewardSpec::Magnitude { radius } => {
                let n = libm::sqrt(math::norm_sq(&base));
                if n > 1e-12 {
                    base.iter_mut().for_each(|v| *v *= radius / n);
                } else {
                    base = vec![0.0; d];
                    base[0] = *radius;
                }
                base
            }
            RewardSpec::Roughness => {
                let mean = base.iter().sum::<f64>() / d as f64;
                vec![mean; d]
            }
            RewardSpec::Axis { direction } => {
                let n = libm::sqrt(math::norm_sq(direction));
                base.iter_mut()
                    .zip(direction)
                    .for_each(|(b, u)| *b += u / n);
                base
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RewardSpec::Magnitude { radius } if !(radius.is_finite() && *radius >= 0.0) => {
                Err(Error::invalid("magnitude reward", alloc::format!("radius {radius}")))
            }
            RewardSpec::Axis { direction }
                if direction.is_empty()
                    || !math::all_finite(direction)
                    || math::norm_sq(direction) == 0.0 =>
            {
                Err(Error::invalid("axis reward", "direction must be finite and nonzero"))
            }
            _ => Ok(()),
        }
    }
}

/// An ordered list of reward dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RewardSpec>", into = "Vec<RewardSpec>")]
pub struct RewardCommittee {
    specs: Vec<RewardSpec>,
}

impl RewardCommittee {
    pub fn new(specs: Vec<RewardSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("committee", "needs at least one reward"));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(Self { specs })
    }

    /// Alignment, magnitude (ρ = 1) and roughness.
    pub fn standard() -> Self {
        Self {
            specs: vec![
                RewardSpec::Alignment,
                RewardSpec::Magnitude { radius: 1.0 },
                RewardSpec::Roughness,
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[RewardSpec] {
        &self.specs
    }

    /// The first `k` members.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::RewardIndex {
                index: k,
                size: self.len(),
            });
        }
        Ok(Self {
            specs: self.specs[..k].to_vec(),
        })
    }

    pub fn spec(&self, k: usize) -> Result<&RewardSpec> {
        self.specs.get(k).ok_or(Error::RewardIndex {
            index: k,
            size: self.len(),
        })
    }

    pub fn eval_all(&self, x: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.specs.iter().map(|s| s.eval(x, c)).collect()
    }
}

impl TryFrom<Vec<RewardSpec>> for RewardCommittee {
    type Error = Error;

    fn try_from(specs: Vec<RewardSpec>) -> Result<Self> {
        Self::new(specs)
    }
}

impl From<RewardCommittee> for Vec<RewardSpec> {
    fn from(c: RewardCommittee) -> Self {
        c.specs
    }
}

pub fn reward_eval(committee: &RewardCommittee, k: usize, x: &[f64], c: &[f64]) -> Result<f64> {
    committee.spec(k)?.eval(x, c)
}

/// `Δr_k = r_k(x0_w, c) − r_k(x0_l, c)`.
pub fn reward_diff(committee: &RewardCommittee, k: usize, pair: &PreferencePair) -> Result<f64> {
    let spec = committee.spec(k)?;
    Ok(spec.eval(&pair.x0_w, &pair.c)? - spec.eval(&pair.x0_l, &pair.c)?)
}

pub fn reward_diffs(committee: &RewardCommittee, pair: &PreferencePair) -> Result<Vec<f64>> {
    (0..committee.len())
        .map(|k| reward_diff(committee, k, pair))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub n_total: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Per dimension, the number of pairs with `Δr_k > 0`.
    pub agreement: Vec<usize>,
}

impl PartitionStats {
    pub fn labeled_fraction(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_labeled as f64 / self.n_total as f64
        }
    }
}

/// Clean (unanimous) and noisy subsets with their source indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    pub labeled: Vec<PreferencePair>,
    pub unlabeled: Vec<PreferencePair>,
    pub labeled_index: Vec<usize>,
    pub unlabeled_index: Vec<usize>,
    pub stats: PartitionStats,
}

/// A pair is labeled iff every committee member strictly prefers its winner.
/// Ties go to the unlabeled side. Input order is kept on both sides.
pub fn consensus_partition(
    dataset: &[PreferencePair],
    committee: &RewardCommittee,
) -> Result<PartitionedDataset> {
    let mut out = PartitionedDataset {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        labeled_index: Vec::new(),
        unlabeled_index: Vec::new(),
        stats: PartitionStats {
            n_total: dataset.len(),
            n_labeled: 0,
            n_unlabeled: 0,
            agreement: vec![0; committee.len()],
        },
    };
    for (i, pair) in dataset.iter().enumerate() {
        let diffs = reward_diffs(committee, pair)?;
        for (count, d) in out.stats.agreement.iter_mut().zip(&diffs) {
            if *d > 0.0 {
                *count += 1;
            }
        }
        if diffs.iter().all(|d| *d > 0.0) {
            out.labeled.push(pair.clone());
            out.labeled_index.push(i);
        } else {
            out.unlabeled.push(pair.clone());
            out.unlabeled_index.push(i);
        }
    }
    out.stats.n_labeled = out.labeled.len();
    out.stats.n_unlabeled = out.unlabeled.len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: Vec<f64>, l: Vec<f64>, c: Vec<f64>) -> PreferencePair {
        PreferencePair::new(c, w, l)
    }

    #[test]
    fn reward_values() {
        let c = RewardCommittee::standard();
        assert_eq!(reward_eval(&c, 0, &[0.5, -1.0], &[0.5, -1.0]).unwrap(), 0.0);
        let m = RewardSpec::Magnitude { radius: 0.0 };
        assert_eq!(m.eval(&[0.0, 0.0], &[]).unwrap(), 0.0);
        assert_eq!(RewardSpec::Roughness.eval(&[1.0, -1.0, 1.0], &[]).unwrap(), -8.0);
        let ax = RewardSpec::Axis { direction: vec![0.0, 2.0] };
        assert_eq!(ax.eval(&[3.0, 4.0], &[]).unwrap(), 4.0);
        assert!(matches!(reward_eval(&c, 3, &[0.0], &[0.0]), Err(Error::RewardIndex { .. })));
        assert!(reward_eval(&c, 0, &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn reward_differences() {
        let c = RewardCommittee::standard();
        let p = pair(vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]);
        assert_eq!(reward_diff(&c, 2, &p).unwrap(), 0.0);
        let p = pair(vec![0.2, 0.4], vec![1.0, -0.5], vec![0.1, 0.1]);
        let d = reward_diff(&c, 0, &p).unwrap();
        // −(0.01 + 0.09) − (−(0.81 + 0.36))
        assert!((d - 1.07).abs() < 1e-12);
        assert_eq!(reward_diff(&c, 0, &p.swapped()).unwrap(), -d);
    }

    #[test]
    fn partition_rules() {
        let c = RewardCommittee::new(vec![
            RewardSpec::Axis { direction: vec![1.0, 0.0] },
            RewardSpec::Axis { direction: vec![0.0, 1.0] },
        ])
        .unwrap();
        let data = vec![
            pair(vec![1.0, 1.0], vec![0.0, 0.0], vec![]),  // (+,+)
            pair(vec![1.0, -1.0], vec![0.0, 0.0], vec![]), // (+,−)
            pair(vec![1.0, 0.0], vec![0.0, 0.0], vec![]),  // (+,0)
            pair(vec![2.0, 3.0], vec![1.0, 1.0], vec![]),  // (+,+)
        ];
        let part = consensus_partition(&data, &c).unwrap();
        assert_eq!(part.labeled_index, vec![0, 3]);
        assert_eq!(part.unlabeled_index, vec![1, 2]);
        assert_eq!(part.stats.agreement, vec![4, 2]);
        assert_eq!(part.stats.n_labeled + part.stats.n_unlabeled, 4);
    }

    #[test]
    fn committee_validation_and_serde_shape() {
        assert!(RewardCommittee::new(vec![]).is_err());
        assert!(RewardCommittee::new(vec![RewardSpec::Axis { direction: vec![0.0] }]).is_err());
        assert!(RewardCommittee::new(vec![RewardSpec::Magnitude { radius: -1.0 }]).is_err());
        assert_eq!(RewardCommittee::standard().prefix(2).unwrap().len(), 2);
        assert!(RewardCommittee::standard().prefix(4).is_err());
    }

    #[test]
    fn anchors_score_well() {
        let c = [0.3, -0.6, 0.9];
        for spec in RewardCommittee::standard().specs() {
            let a = spec.anchor(&c, 3);
            let at = spec.eval(&a, &c).unwrap();
            let off = spec.eval(&[a[0] + 0.5, a[1] - 0.5, a[2]], &c).unwrap();
            assert!(at > off, "{}", spec.name());
        }
    }
}
