//! Training-side utilities: route losses, per-expert data subsets, balanced
//! subset sampling, the target-fraction learning rate, the two-sample
//! Kolmogorov-Smirnov statistic and the three-route supervision plan.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dispatcher::ExpertKind;
use crate::error::{Error, Result};

/// Lower clamp applied to the labelled probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(Error::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

pub const DEFAULT_BETA: f64 = 1.0;

/// Summed smooth-L1: `0.5 x^2 / beta` inside `|x| < beta`, `|x| - 0.5 beta`
/// outside, with `x = pred - target`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    check_smooth_l1(pred, target, beta)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_scalar(p - t, beta))
        .sum())
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_smooth_l1(pred, target, beta)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < beta {
                x / beta
            } else {
                x.signum()
            }
        })
        .collect())
}

fn smooth_l1_scalar(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

fn check_smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Shape(format!("beta {beta} must be positive")));
    }
    Ok(())
}

/// Route loss: classification terms plus regression terms.
pub fn route_loss(cls_terms: &[f64], reg_terms: &[f64]) -> f64 {
    cls_terms.iter().sum::<f64>() + reg_terms.iter().sum::<f64>()
}

pub type SceneId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSubset {
    pub expert: ExpertKind,
    pub targets: Vec<SceneId>,
    pub auxiliaries: Vec<SceneId>,
    /// Set when the auxiliary pool was smaller than the target set, so
    /// auxiliaries were drawn with replacement (or left empty when the pool
    /// had nothing to draw from).
    pub with_replacement: bool,
}

impl ExpertSubset {
    pub fn size(&self) -> usize {
        self.targets.len() + self.auxiliaries.len()
    }
}

/// Per-expert target and auxiliary scene sets for LPE, VEE and APE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAssignment {
    pub subsets: Vec<ExpertSubset>,
}

impl SubsetAssignment {
    pub fn subset(&self, expert: ExpertKind) -> Option<&ExpertSubset> {
        self.subsets.iter().find(|s| s.expert == expert)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.subsets.iter().map(ExpertSubset::size).collect()
    }
}

pub const TRAINED_EXPERTS: [ExpertKind; 3] = [ExpertKind::Lpe, ExpertKind::Vee, ExpertKind::Ape];

/// Partition scenes into per-expert targets by label, then draw each
/// expert's auxiliaries uniformly without replacement from the other
/// experts' targets, matching the target count.
pub fn divide_subsets(scenes: &[(SceneId, ExpertKind)], seed: u64) -> Result<SubsetAssignment> {
    let mut targets: [Vec<SceneId>; 3] = Default::default();
    for &(id, label) in scenes {
        let slot = TRAINED_EXPERTS
            .iter()
            .position(|&e| e == label)
            .ok_or_else(|| Error::InvalidSample(format!("scene {id} labelled {label}")))?;
        targets[slot].push(id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets = Vec::with_capacity(3);
    for (slot, &expert) in TRAINED_EXPERTS.iter().enumerate() {
        let want = targets[slot].len();
        let pool: Vec<SceneId> = (0..3)
            .filter(|&o| o != slot)
            .flat_map(|o| targets[o].iter().copied())
            .collect();
        let (auxiliaries, with_replacement) = if pool.len() >= want {
            let mut picked: Vec<SceneId> = sample_indices(&mut rng, pool.len(), want)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            (picked, false)
        } else if pool.is_empty() {
            (Vec::new(), true)
        } else {
            let picked = (0..want)
                .map(|_| pool[rng.gen_range(0..pool.len())])
                .collect();
            (picked, true)
        };
        subsets.push(ExpertSubset {
            expert,
            targets: targets[slot].clone(),
            auxiliaries,
            with_replacement,
        });
    }
    Ok(SubsetAssignment { subsets })
}

/// Selection probabilities with `P_i * N_i` equal across subsets and summing
/// to one, i.e. `P_i` proportional to `1 / N_i`.
pub fn balanced_probs(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::InvalidSize("no subsets".into()));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidSize(format!("subset {i} is empty")));
    }
    let inv: Vec<f64> = sizes.iter().map(|&n| 1.0 / n as f64).collect();
    let norm: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / norm).collect())
}

/// Draws subset indices under [`balanced_probs`].
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl BalancedSampler {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        let probs = balanced_probs(sizes)?;
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::InvalidSize(format!("sampler weights: {e}")))?;
        Ok(BalancedSampler { probs, dist })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// Base rate and per-sample "is a target of this expert" flags for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLrInput {
    pub base_rate: f64,
    pub batch_flags: Vec<bool>,
}

/// `alpha0 * (1 + p)` with `p` the fraction of target samples in the batch.
pub fn adaptive_lr(input: &AdaptiveLrInput) -> Result<f64> {
    if input.batch_flags.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    if !(input.base_rate > 0.0) {
        return Err(Error::InvalidBatch(format!(
            "base rate {} must be positive",
            input.base_rate
        )));
    }
    let hits = input.batch_flags.iter().filter(|&&f| f).count();
    let p = hits as f64 / input.batch_flags.len() as f64;
    Ok((1.0 + p) * input.base_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test: the largest gap between the two
/// right-continuous empirical CDFs, with the asymptotic p-value at effective
/// size `n m / (n + m)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidSample(
            "both samples must be non-empty".into(),
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidSample("NaN in sample".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());

    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let effective = (n * m) as f64 / (n + m) as f64;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(effective.sqrt() * d),
    })
}

/// Complementary Kolmogorov distribution,
/// `2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2)`, first 100 terms.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    // below this the truncated series has not converged and Q is 1 to
    // double precision anyway
    if lambda < 0.1 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        sum += sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub const GROUP_AMDB_LIDAR: &str = "amdb.lidar";
pub const GROUP_AMDB_IMAGE: &str = "amdb.image";

pub fn expert_group(expert: ExpertKind) -> String {
    format!("expert.{}", expert.tag().to_ascii_lowercase())
}

/// Named parameter groups of the model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamRegistry {
    groups: BTreeSet<String>,
}

impl ParamRegistry {
    pub fn new<I, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ParamRegistry {
            groups: groups.into_iter().map(Into::into).collect(),
        }
    }

    /// Both AMDB branches plus the three trained experts.
    pub fn standard() -> Self {
        let mut r = Self::new([GROUP_AMDB_LIDAR, GROUP_AMDB_IMAGE]);
        for e in TRAINED_EXPERTS {
            r.groups.insert(expert_group(e));
        }
        r
    }

    pub fn contains(&self, group: &str) -> bool {
        self.groups.contains(group)
    }

    pub fn remove(&mut self, group: &str) -> bool {
        self.groups.remove(group)
    }

    fn require(&self, group: &str) -> Result<String> {
        if self.contains(group) {
            Ok(group.to_string())
        } else {
            Err(Error::Registry(group.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteSource {
    LidarBranch,
    ImageBranch,
    ExpertOutputs,
}

/// Parameter groups receiving gradients from one supervised output. For
/// expert routes `expert` names the expert whose predictions are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTarget {
    pub expert: Option<ExpertKind>,
    pub groups: Vec<String>,
}

/// One back-propagation route, supervised by classification plus
/// regression loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRoute {
    pub source: RouteSource,
    pub targets: Vec<RouteTarget>,
}

impl SupervisionRoute {
    pub fn references(&self, group: &str) -> bool {
        self.targets
            .iter()
            .any(|t| t.groups.iter().any(|g| g == group))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionPlan {
    pub routes: Vec<SupervisionRoute>,
    pub joint_phase: bool,
}

/// Three routes: LiDAR-branch outputs to the LiDAR group, image-branch
/// outputs to the image group, and expert outputs to each expert's group.
/// In the joint phase only the APE target also reaches the AMDB groups.
pub fn build_supervision_plan(
    registry: &ParamRegistry,
    joint_phase: bool,
) -> Result<SupervisionPlan> {
    let lidar = registry.require(GROUP_AMDB_LIDAR)?;
    let image = registry.require(GROUP_AMDB_IMAGE)?;
    let mut expert_targets = Vec::with_capacity(3);
    for e in TRAINED_EXPERTS {
        let mut groups = vec![registry.require(&expert_group(e))?];
        if joint_phase && e == ExpertKind::Ape {
            groups.push(lidar.clone());
            groups.push(image.clone());
        }
        expert_targets.push(RouteTarget {
            expert: Some(e),
            groups,
        });
    }
    Ok(SupervisionPlan {
        routes: vec![
            SupervisionRoute {
                source: RouteSource::LidarBranch,
                targets: vec![RouteTarget {
                    expert: None,
                    groups: vec![lidar],
                }],
            },
            SupervisionRoute {
                source: RouteSource::ImageBranch,
                targets: vec![RouteTarget {
                    expert: None,
                    groups: vec![image],
                }],
            },
            SupervisionRoute {
                source: RouteSource::ExpertOutputs,
                targets: expert_targets,
            },
        ],
        joint_phase,
    })
}
