//! Per-part mask budgets that move from proportional masking inside every
//! part (easy) to masking whole parts (hard) as training progresses.
//!
//! For a segmentation with part sizes `counts` (summing to `L`) and ratio
//! `r`:
//!
//! * proportional: `r * counts[i]` patches from each part;
//! * whole-part: parts are visited in a random order and masked entirely
//!   until the `L * r` budget runs out, the last one partially;
//! * the two are mixed with weight `alpha = (epoch / total)^gamma` and the
//!   real-valued result is integerized by largest remainder so every plan
//!   masks exactly `round(L * r)` patches.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::partlearn::PartSegmentation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub mask_ratio: f64,
    pub gamma: f64,
    pub total_epochs: usize,
    /// Decreasing curriculum, `alpha = 1 - (epoch / total)^gamma`.
    pub reverse: bool,
}

impl ScheduleConfig {
    pub fn new(mask_ratio: f64, gamma: f64, total_epochs: usize) -> Result<Self> {
        let cfg = Self {
            mask_ratio,
            gamma,
            total_epochs,
            reverse: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Interpolation weight for `epoch`.
pub fn alpha(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} beyond schedule length {}",
            cfg.total_epochs
        )));
    }
    let a = (epoch as f64 / cfg.total_epochs as f64).powf(cfg.gamma).clamp(0.0, 1.0);
    Ok(if cfg.reverse { 1.0 - a } else { a })
}

/// Number of patches masked in total for `l` patches.
pub fn mask_budget(l: usize, mask_ratio: f64) -> usize {
    (l as f64 * mask_ratio).round() as usize
}

/// Real-valued proportional quotas `r * counts[i]`.
pub fn proportional(counts: &[usize], mask_ratio: f64) -> Vec<f64> {
    counts.iter().map(|&c| mask_ratio * c as f64).collect()
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::Contract(format!("order has {} entries for {n} parts", order.len())));
    }
    for &i in order {
        if i >= n || seen[i] {
            return Err(Error::Contract(format!("order {order:?} is not a permutation of 0..{n}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Whole-part budget allocation in `order`.
///
/// `marks = L*r - cumsum(shuffled) + shuffled`, negatives clamped to zero,
/// then capped at each part's size and mapped back to part order.
pub fn budget_whole_parts(counts: &[usize], mask_ratio: f64, order: &[usize]) -> Result<Vec<f64>> {
    check_permutation(order, counts.len())?;
    let l: usize = counts.iter().sum();
    let budget = l as f64 * mask_ratio;
    let mut out = vec![0.0; counts.len()];
    let mut cumsum = 0.0;
    for &part in order {
        let size = counts[part] as f64;
        cumsum += size;
        let marks = (budget - cumsum + size).max(0.0);
        out[part] = marks.min(size);
    }
    Ok(out)
}

/// Integerizes `quotas` to sum exactly to `total`, each entry within
/// `[0, caps[i]]`.
///
/// Floors first, then hands out the remaining units one at a time in
/// descending fractional order (ties to the lower index), skipping parts at
/// capacity and cycling until the total is met.
pub fn largest_remainder(quotas: &[f64], caps: &[usize], total: usize) -> Result<Vec<usize>> {
    if quotas.len() != caps.len() {
        return Err(Error::Contract("quota and capacity lengths differ".into()));
    }
    if total > caps.iter().sum() {
        return Err(Error::Contract(format!("cannot place {total} units in capacity {}", caps.iter().sum::<usize>())));
    }
    const SNAP: f64 = 1e-9;
    let mut ints: Vec<usize> = Vec::with_capacity(quotas.len());
    let mut fracs: Vec<f64> = Vec::with_capacity(quotas.len());
    for (&q, &cap) in quotas.iter().zip(caps) {
        let q = q.max(0.0);
        let mut f = q.floor();
        if q - f > 1.0 - SNAP {
            f += 1.0;
        }
        let frac = (q - f).max(0.0);
        ints.push((f as usize).min(cap));
        fracs.push(if (f as usize) < cap { frac } else { 0.0 });
    }
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]).then(a.cmp(&b)));

    let mut placed: usize = ints.iter().sum();
    while placed > total {
        // only reachable through snapping; take back from the smallest remainders
        let &i = order.iter().rev().find(|&&i| ints[i] > 0).expect("placed > 0");
        ints[i] -= 1;
        placed -= 1;
    }
    while placed < total {
        for &i in &order {
            if placed == total {
                break;
            }
            if ints[i] < caps[i] {
                ints[i] += 1;
                placed += 1;
            }
        }
    }
    Ok(ints)
}

/// Masked-patch counts per part for one image and epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub num_mask: Vec<usize>,
    pub alpha: f64,
    pub total_masked: usize,
    /// Shuffled part order used for the whole-part budget.
    pub order: Vec<usize>,
    pub masked_indices: Option<Vec<usize>>,
}

/// Builds a plan for a given interpolation weight and part order.
pub fn plan_with_alpha(counts: &[usize], mask_ratio: f64, alpha: f64, order: &[usize]) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let l: usize = counts.iter().sum();
    let per_part = proportional(counts, mask_ratio);
    let whole = budget_whole_parts(counts, mask_ratio, order)?;
    let mixed: Vec<f64> = per_part
        .iter()
        .zip(&whole)
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    let total = mask_budget(l, mask_ratio);
    let num_mask = largest_remainder(&mixed, counts, total)?;
    Ok(MaskPlan {
        num_mask,
        alpha,
        total_masked: total,
        order: order.to_vec(),
        masked_indices: None,
    })
}

/// Plan at an explicit `alpha`, drawing the part order from `rng`.
pub fn compute_num_mask_at(seg: &PartSegmentation, mask_ratio: f64, alpha: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if seg.counts.iter().sum::<usize>() != seg.len() {
        return Err(Error::Contract(format!(
            "part counts sum to {}, segmentation has {} patches",
            seg.counts.iter().sum::<usize>(),
            seg.len()
        )));
    }
    let order = rng.permutation(seg.parts());
    plan_with_alpha(&seg.counts, mask_ratio, alpha, &order)
}

/// Plan for `epoch` under the curriculum in `cfg`.
pub fn compute_num_mask(seg: &PartSegmentation, cfg: &ScheduleConfig, epoch: usize, rng: &mut Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    let a = alpha(epoch, cfg)?;
    compute_num_mask_at(seg, cfg.mask_ratio, a, rng)
}

/// Draws `num_mask[i]` distinct patches from each part by partial
/// Fisher-Yates; the result is sorted ascending.
pub fn sample_mask_indices(seg: &PartSegmentation, plan: &MaskPlan, rng: &mut Rng) -> Result<MaskPlan> {
    if plan.num_mask.len() != seg.parts() {
        return Err(Error::Contract(format!(
            "plan has {} parts, segmentation {}",
            plan.num_mask.len(),
            seg.parts()
        )));
    }
    let mut masked = Vec::with_capacity(plan.total_masked);
    for (part, &k) in plan.num_mask.iter().enumerate() {
        if k > seg.counts[part] {
            return Err(Error::Contract(format!(
                "part {part} asks for {k} masked patches but has {}",
                seg.counts[part]
            )));
        }
        let mut members = seg.members(part);
        for j in 0..k {
            let pick = j + rng.below(members.len() - j);
            members.swap(j, pick);
        }
        masked.extend_from_slice(&members[..k]);
    }
    masked.sort_unstable();
    Ok(MaskPlan {
        masked_indices: Some(masked),
        ..plan.clone()
    })
}

/// Masking strategies compared in the curriculum ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Curriculum `alpha = (epoch/total)^gamma`.
    Semantic,
    /// Uniform random masking, i.e. the scheduler on a one-part segmentation.
    Random,
    /// `alpha = 1` throughout.
    WholePartsOnly,
    /// `alpha = 0` throughout.
    PerPartOnly,
    /// `alpha = 1 - (epoch/total)^gamma`.
    Reverse,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Semantic => "semantic",
            Strategy::Random => "random",
            Strategy::WholePartsOnly => "whole-parts-only",
            Strategy::PerPartOnly => "per-part-only",
            Strategy::Reverse => "reverse",
        }
    }

    pub fn needs_segmentation(&self) -> bool {
        !matches!(self, Strategy::Random)
    }

    pub fn alpha(&self, epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
        match self {
            Strategy::Semantic | Strategy::Random => alpha(epoch, cfg),
            Strategy::WholePartsOnly => Ok(1.0),
            Strategy::PerPartOnly => Ok(0.0),
            Strategy::Reverse => alpha(epoch, &ScheduleConfig { reverse: !cfg.reverse, ..*cfg }),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "semantic" => Strategy::Semantic,
            "random" => Strategy::Random,
            "whole-parts-only" => Strategy::WholePartsOnly,
            "per-part-only" => Strategy::PerPartOnly,
            "reverse" => Strategy::Reverse,
            other => return Err(Error::Config(format!("unknown masking strategy {other:?}"))),
        })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partlearn::Grid;

    fn seg_from_counts(counts: &[usize]) -> PartSegmentation {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat(i).take(c)).collect();
        let l = labels.len();
        PartSegmentation::from_labels(labels, counts.len(), Grid::new(1, l)).unwrap()
    }

    #[test]
    fn alpha_examples() {
        let cfg = ScheduleConfig::new(0.75, 2.0, 800).unwrap();
        assert_eq!(alpha(0, &cfg).unwrap(), 0.0);
        assert_eq!(alpha(800, &cfg).unwrap(), 1.0);
        assert_eq!(alpha(400, &cfg).unwrap(), 0.25);
        assert!(matches!(alpha(801, &cfg), Err(Error::Contract(_))));
        let rev = ScheduleConfig { reverse: true, ..cfg };
        assert_eq!(alpha(0, &rev).unwrap(), 1.0);
        assert_eq!(alpha(800, &rev).unwrap(), 0.0);
    }

    #[test]
    fn schedule_config_validation() {
        assert!(ScheduleConfig::new(1.0, 2.0, 10).is_err());
        assert!(ScheduleConfig::new(0.5, 0.0, 10).is_err());
        assert!(ScheduleConfig::new(0.5, 2.0, 0).is_err());
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_whole_parts(&[3, 3, 2], 0.5, &[0, 1, 2]).unwrap(), vec![3.0, 1.0, 0.0]);
        assert_eq!(budget_whole_parts(&[16], 0.75, &[0]).unwrap(), vec![12.0]);
        assert!(matches!(budget_whole_parts(&[1, 2], 0.5, &[0, 0]), Err(Error::Contract(_))));
        assert!(matches!(budget_whole_parts(&[1, 2], 0.5, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn epoch_zero_is_proportional() {
        let plan = plan_with_alpha(&[6, 6, 4], 0.75, 0.0, &[2, 0, 1]).unwrap();
        assert_eq!(plan.num_mask, vec![5, 4, 3]);
        assert_eq!(plan.total_masked, 12);
    }

    #[test]
    fn half_alpha_example() {
        let plan = plan_with_alpha(&[3, 3, 2], 0.5, 0.5, &[0, 1, 2]).unwrap();
        assert_eq!(plan.num_mask, vec![2, 1, 1]);
    }

    #[test]
    fn full_alpha_is_whole_part_budget() {
        let plan = plan_with_alpha(&[3, 3, 2], 0.5, 1.0, &[0, 1, 2]).unwrap();
        assert_eq!(plan.num_mask, vec![3, 1, 0]);
        let plan = plan_with_alpha(&[3, 3, 2], 0.5, 1.0, &[2, 1, 0]).unwrap();
        assert_eq!(plan.num_mask, vec![0, 2, 2]);
    }

    #[test]
    fn largest_remainder_respects_caps() {
        // part 0 is full after flooring; its share moves on
        assert_eq!(largest_remainder(&[2.0, 0.6, 0.4], &[2, 3, 3], 3).unwrap(), vec![2, 1, 0]);
        assert_eq!(largest_remainder(&[0.9, 0.9, 0.2], &[0, 1, 5], 2).unwrap(), vec![0, 1, 1]);
        assert!(largest_remainder(&[1.0], &[1], 2).is_err());
    }

    #[test]
    fn empty_parts_get_nothing() {
        let plan = plan_with_alpha(&[0, 5, 3], 0.5, 0.3, &[0, 1, 2]).unwrap();
        assert_eq!(plan.num_mask[0], 0);
        assert_eq!(plan.num_mask.iter().sum::<usize>(), 4);
    }

    #[test]
    fn compute_num_mask_rejects_bad_counts() {
        let mut seg = seg_from_counts(&[2, 2]);
        seg.counts = vec![3, 2];
        let cfg = ScheduleConfig::new(0.5, 2.0, 10).unwrap();
        assert!(matches!(compute_num_mask(&seg, &cfg, 0, &mut Rng::new(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_examples() {
        let seg = seg_from_counts(&[3, 2]);
        let all = MaskPlan {
            num_mask: vec![3, 2],
            alpha: 0.0,
            total_masked: 5,
            order: vec![0, 1],
            masked_indices: None,
        };
        let got = sample_mask_indices(&seg, &all, &mut Rng::new(1)).unwrap();
        assert_eq!(got.masked_indices.unwrap(), vec![0, 1, 2, 3, 4]);

        let none = MaskPlan { num_mask: vec![0, 0], total_masked: 0, ..all.clone() };
        assert!(sample_mask_indices(&seg, &none, &mut Rng::new(1)).unwrap().masked_indices.unwrap().is_empty());

        let too_many = MaskPlan { num_mask: vec![4, 0], ..all };
        assert!(matches!(sample_mask_indices(&seg, &too_many, &mut Rng::new(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_draws_one_per_part() {
        let seg = PartSegmentation::from_labels(vec![1, 0, 0, 1], 2, Grid::new(2, 2)).unwrap();
        let plan = MaskPlan {
            num_mask: vec![1, 1],
            alpha: 0.0,
            total_masked: 2,
            order: vec![0, 1],
            masked_indices: None,
        };
        for seed in 0..20 {
            let idx = sample_mask_indices(&seg, &plan, &mut Rng::new(seed)).unwrap().masked_indices.unwrap();
            assert_eq!(idx.len(), 2);
            let labels: Vec<usize> = idx.iter().map(|&p| seg.labels[p]).collect();
            assert!(labels.contains(&0) && labels.contains(&1));
        }
    }

    #[test]
    fn strategies_parse_and_fix_alpha() {
        let cfg = ScheduleConfig::new(0.75, 2.0, 10).unwrap();
        for s in ["semantic", "random", "whole-parts-only", "per-part-only", "reverse"] {
            assert_eq!(s.parse::<Strategy>().unwrap().name(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!(Strategy::PerPartOnly.alpha(7, &cfg).unwrap(), 0.0);
        assert_eq!(Strategy::WholePartsOnly.alpha(0, &cfg).unwrap(), 1.0);
        assert_eq!(Strategy::Reverse.alpha(0, &cfg).unwrap(), 1.0);
        assert_eq!(Strategy::Semantic.alpha(10, &cfg).unwrap(), 1.0);
    }
}
