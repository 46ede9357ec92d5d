//! Group-based relatively balanced batch sampling (GRBS) and the baseline
//! random / class-balanced samplers.
//!
//! Classes are ranked by sample count, assigned to `G` groups by stride, and
//! every batch is drawn from a single group with per-class probabilities
//! lifted to at least `r_min` for the tail of that group.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale threshold above which GRBS batches become class-balanced.
pub const SCALE_THRESHOLD: f64 = 10.0;

const SUM_TOLERANCE: f64 = 1e-12;

/// Per-class sample counts ranked in descending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInventory {
    /// `Q`, sorted descending.
    pub counts: Vec<usize>,
    /// `class_ids[rank]` is the original label of the class at `rank`.
    pub class_ids: Vec<usize>,
}

impl ClassInventory {
    /// Ranks classes by count; ties keep ascending class id order.
    pub fn from_counts(counts_by_class: &[usize]) -> Result<Self> {
        if counts_by_class.is_empty() {
            return Err(Error::InvalidArgument("inventory needs at least one class".into()));
        }
        if let Some(id) = counts_by_class.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!("class {id} has no samples")));
        }
        let mut class_ids: Vec<usize> = (0..counts_by_class.len()).collect();
        class_ids.sort_by(|&a, &b| counts_by_class[b].cmp(&counts_by_class[a]).then(a.cmp(&b)));
        let counts = class_ids.iter().map(|&i| counts_by_class[i]).collect();
        Ok(Self { counts, class_ids })
    }

    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        Self::from_counts(&count_labels(labels, num_classes))
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// `Q_N`
    pub fn smallest(&self) -> usize {
        *self.counts.last().expect("non-empty inventory")
    }

    /// `γ = Q_1 / Q_N`
    pub fn imbalance_factor(&self) -> f64 {
        self.counts[0] as f64 / self.smallest() as f64
    }

    pub fn rank_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

pub fn count_labels(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    counts
}

/// One GRBS group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Zero-based class ranks, stride `G` apart.
    pub ranks: Vec<usize>,
    /// Original class labels, aligned with `ranks`.
    pub classes: Vec<usize>,
    /// `R`: natural within-group proportions.
    pub ratios: Vec<f64>,
    /// `r`: corrected sampling probabilities; empty until `compute_probs`.
    pub probs: Vec<f64>,
    /// `F'`: number of boosted classes.
    pub boosted: usize,
    /// Original labels of the boosted classes, in rank order.
    pub boosted_classes: Vec<usize>,
    /// Set when every class fell below `r_min` without summing to one.
    pub degenerate: bool,
}

impl Group {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// Full GRBS artifact: grouping, natural ratios, corrected probabilities and
/// the scalars that determined them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    #[serde(rename = "G")]
    pub num_groups: usize,
    /// Nominal classes per group, `⌊N/G⌋`. The last group also holds any
    /// remainder.
    #[serde(rename = "F")]
    pub classes_per_group: usize,
    pub groups: Vec<Group>,
    pub r_min: f64,
    pub r0: f64,
    pub alpha: f64,
    #[serde(rename = "S")]
    pub scale: f64,
    #[serde(rename = "S0")]
    pub scale_threshold: f64,
    #[serde(rename = "B")]
    pub batch_size: usize,
}

impl GroupPlan {
    pub fn is_complete(&self) -> bool {
        self.groups.iter().all(|g| g.probs.len() == g.len())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// GRBS hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrbsParams {
    pub groups: usize,
    pub r0: f64,
    pub alpha: f64,
}

impl Default for GrbsParams {
    fn default() -> Self {
        Self {
            groups: 1,
            r0: 0.05,
            alpha: 2.0,
        }
    }
}

/// Stride grouping: group `i` holds ranks `i, i+G, …, i+(F−1)G`; ranks past
/// `G·F` join the last group.
pub fn build_groups(inventory: &ClassInventory, num_groups: usize) -> Result<GroupPlan> {
    let n = inventory.num_classes();
    if num_groups == 0 || num_groups > n {
        return Err(Error::InvalidArgument(format!(
            "group count must lie in 1..={n}, got {num_groups}"
        )));
    }
    let f = n / num_groups;
    let mut groups: Vec<Group> = (0..num_groups)
        .map(|i| {
            let ranks: Vec<usize> = (0..f).map(|k| i + k * num_groups).collect();
            Group {
                ranks,
                classes: Vec::new(),
                ratios: Vec::new(),
                probs: Vec::new(),
                boosted: 0,
                boosted_classes: Vec::new(),
                degenerate: false,
            }
        })
        .collect();
    groups
        .last_mut()
        .expect("at least one group")
        .ranks
        .extend(num_groups * f..n);
    for g in &mut groups {
        let total: usize = g.ranks.iter().map(|&r| inventory.counts[r]).sum();
        g.classes = g.ranks.iter().map(|&r| inventory.class_ids[r]).collect();
        g.ratios = g
            .ranks
            .iter()
            .map(|&r| inventory.counts[r] as f64 / total as f64)
            .collect();
    }
    Ok(GroupPlan {
        num_groups,
        classes_per_group: f,
        groups,
        r_min: 0.0,
        r0: 0.0,
        alpha: 0.0,
        scale: 0.0,
        scale_threshold: SCALE_THRESHOLD,
        batch_size: 0,
    })
}

/// `S = (Q_N / α) / (B / F)`
pub fn scale_parameter(smallest: usize, alpha: f64, batch_size: usize, classes_per_group: usize) -> f64 {
    (smallest as f64 / alpha) / (batch_size as f64 / classes_per_group as f64)
}

/// Minimum per-class probability from the scale parameter `S`: `r0` below 1,
/// `S·r0` (capped at `1/F`) up to `S0`, and `1/F` beyond.
///
/// Records `S`, `r0`, `α` and `B` on the plan.
pub fn compute_r_min(
    inventory: &ClassInventory,
    plan: &mut GroupPlan,
    r0: f64,
    alpha: f64,
    batch_size: usize,
) -> Result<f64> {
    let f = plan.classes_per_group;
    let balanced = 1.0 / f as f64;
    if !(r0 > 0.0 && r0 <= balanced) {
        return Err(Error::InvalidArgument(format!(
            "r0 must lie in (0, 1/F = {balanced}], got {r0}"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if batch_size < f {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} is smaller than classes per group {f}"
        )));
    }
    let s = scale_parameter(inventory.smallest(), alpha, batch_size, f);
    let r_min = if s < 1.0 {
        r0
    } else if s < SCALE_THRESHOLD {
        (s * r0).min(balanced)
    } else {
        balanced
    };
    plan.scale = s;
    plan.r0 = r0;
    plan.alpha = alpha;
    plan.batch_size = batch_size;
    plan.r_min = r_min;
    Ok(r_min)
}

/// Fills in per-group probabilities.
///
/// Classes with `R ≤ r_min` get exactly `r_min`; the rest share
/// `1 − F'·r_min` in proportion to their natural counts. When `r_min`
/// reaches the group's `1/F` the group is sampled class-balanced.
pub fn compute_probs(plan: &mut GroupPlan, r_min: f64) {
    plan.r_min = r_min;
    for g in &mut plan.groups {
        let f = g.len();
        let balanced = 1.0 / f as f64;
        g.degenerate = false;
        let boosted: Vec<bool> = g.ratios.iter().map(|&r| r <= r_min).collect();
        let n_boosted = boosted.iter().filter(|&&b| b).count();
        g.boosted = n_boosted;
        g.boosted_classes = g
            .classes
            .iter()
            .zip(&boosted)
            .filter(|(_, &b)| b)
            .map(|(&c, _)| c)
            .collect();
        if r_min >= balanced - SUM_TOLERANCE {
            g.probs = vec![balanced; f];
            continue;
        }
        if n_boosted == f {
            g.degenerate = true;
            g.probs = vec![balanced; f];
            continue;
        }
        let rest: f64 = g.ratios.iter().zip(&boosted).filter(|(_, &b)| !b).map(|(r, _)| r).sum();
        let remaining = 1.0 - n_boosted as f64 * r_min;
        g.probs = g
            .ratios
            .iter()
            .zip(&boosted)
            .map(|(&r, &b)| if b { r_min } else { remaining * r / rest })
            .collect();
    }
}

/// Builds a complete plan in one call.
pub fn plan_grbs(inventory: &ClassInventory, params: &GrbsParams, batch_size: usize) -> Result<GroupPlan> {
    let mut plan = build_groups(inventory, params.groups)?;
    let r_min = compute_r_min(inventory, &mut plan, params.r0, params.alpha, batch_size)?;
    compute_probs(&mut plan, r_min);
    Ok(plan)
}

fn class_members(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < num_classes {
            members[l].push(i);
        }
    }
    members
}

/// A source of training batches (sample indices).
pub trait BatchSampler {
    fn next_batch(&mut self) -> Vec<usize>;
}

/// GRBS batch generator. Groups are visited round-robin; within a batch class
/// labels are drawn i.i.d. from the group's `r`, then a sample uniformly with
/// replacement from each drawn class.
#[derive(Debug, Clone)]
pub struct GrbsSampler {
    groups: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    members: Vec<Vec<usize>>,
    batch_size: usize,
    next_group: usize,
    rng: ChaCha8Rng,
}

impl GrbsSampler {
    pub fn new(plan: &GroupPlan, labels: &[usize], seed: u64) -> Result<Self> {
        if !plan.is_complete() {
            return Err(Error::InvalidArgument("GRBS plan has no probabilities yet".into()));
        }
        if plan.batch_size == 0 {
            return Err(Error::InvalidArgument("GRBS plan has zero batch size".into()));
        }
        let num_classes = plan
            .groups
            .iter()
            .flat_map(|g| g.classes.iter())
            .max()
            .map_or(0, |m| m + 1);
        let members = class_members(labels, num_classes);
        let mut groups = Vec::with_capacity(plan.groups.len());
        for g in &plan.groups {
            if let Some(&c) = g.classes.iter().find(|&&c| members[c].is_empty()) {
                return Err(Error::InvalidArgument(format!("class {c} has no samples")));
            }
            let dist = WeightedIndex::new(&g.probs)
                .map_err(|e| Error::InvalidArgument(format!("invalid group probabilities: {e}")))?;
            groups.push((g.classes.clone(), dist));
        }
        Ok(Self {
            groups,
            members,
            batch_size: plan.batch_size,
            next_group: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Next batch as `(sample_id, class_id)` pairs.
    pub fn next_grbs_batch(&mut self) -> Vec<(usize, usize)> {
        let (classes, dist) = &self.groups[self.next_group];
        self.next_group = (self.next_group + 1) % self.groups.len();
        (0..self.batch_size)
            .map(|_| {
                let class = classes[dist.sample(&mut self.rng)];
                let pool = &self.members[class];
                (pool[self.rng.random_range(0..pool.len())], class)
            })
            .collect()
    }
}

impl BatchSampler for GrbsSampler {
    fn next_batch(&mut self) -> Vec<usize> {
        self.next_grbs_batch().into_iter().map(|(s, _)| s).collect()
    }
}

/// Uniform sampling without replacement within an epoch: the index set is
/// shuffled and consumed in batches, reshuffling when fewer than a full batch
/// remains.
#[derive(Debug, Clone)]
pub struct RandomSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl RandomSampler {
    pub fn new(num_samples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if num_samples == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument(
                "random sampler needs samples and a batch size".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..num_samples).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            cursor: 0,
            batch_size: batch_size.min(num_samples),
            rng,
        })
    }

    /// Full batches per pass over the data.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl BatchSampler for RandomSampler {
    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        batch
    }
}

/// Uniform over classes, then uniform within the class, with replacement.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    members: Vec<Vec<usize>>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl ClassBalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let members: Vec<Vec<usize>> = class_members(labels, num_classes)
            .into_iter()
            .filter(|m| !m.is_empty())
            .collect();
        if members.is_empty() || batch_size == 0 {
            return Err(Error::InvalidArgument(
                "class-balanced sampler needs samples and a batch size".into(),
            ));
        }
        Ok(Self {
            members,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BatchSampler for ClassBalancedSampler {
    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| {
                let pool = &self.members[self.rng.random_range(0..self.members.len())];
                pool[self.rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

macro_rules! impl_infinite_iter {
    ($($t:ty),*) => {$(
        impl Iterator for $t {
            type Item = Vec<usize>;
            fn next(&mut self) -> Option<Vec<usize>> {
                Some(self.next_batch())
            }
        }
    )*};
}

impl_infinite_iter!(GrbsSampler, RandomSampler, ClassBalancedSampler);
