//! Ranking scored units into a keep/drop plan.
//!
//! * **local** scope treats every layer independently: it keeps the top
//!   `ceil((1 − rate) · n)` units of each layer by score.
//! * **global** scope first normalizes each layer's scores by the layer's
//!   score sum (so layers with different score magnitudes become
//!   comparable), pools all units into one ranking, and drops the bottom
//!   `floor(rate · total)` — but never a layer's last unit; a drop that
//!   would empty a layer is redistributed to the next-worst unit elsewhere.
//!
//! Ties always resolve in favor of keeping the lower unit index (and the
//! earlier layer, in global scope), which keeps plans deterministic.

use super::criteria::CriterionScores;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Whether units compete within their layer or across the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Local,
    Global,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Local => "local",
            Scope::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Scope> {
        match s {
            "local" => Ok(Scope::Local),
            "global" => Ok(Scope::Global),
            other => Err(Error::config(format!(
                "unknown scope `{other}` (expected local or global)"
            ))),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which units each prunable layer keeps, as sorted current-width indices.
/// Layers absent from the map keep everything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimPlan {
    pub kept: BTreeMap<usize, Vec<usize>>,
}

impl TrimPlan {
    /// Total units the plan removes, given the scored widths it was built from.
    pub fn dropped_units(&self, scores: &CriterionScores) -> usize {
        self.kept
            .iter()
            .map(|(li, kept)| scores.per_layer[li].len() - kept.len())
            .sum()
    }
}

/// Builds a [`TrimPlan`] from per-unit scores.
pub fn rank_units(scores: &CriterionScores, rate: f64, scope: Scope) -> Result<TrimPlan> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::range(format!(
            "prune rate must lie strictly between 0 and 1, got {rate}"
        )));
    }
    for (li, s) in &scores.per_layer {
        if s.is_empty() {
            return Err(Error::contract(format!("layer {li} has no units to rank")));
        }
        if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(format!(
                "layer {li}: scores must be finite and non-negative"
            )));
        }
    }
    let kept = match scope {
        Scope::Local => rank_local(scores, rate),
        Scope::Global => rank_global(scores, rate),
    };
    Ok(TrimPlan { kept })
}

fn rank_local(scores: &CriterionScores, rate: f64) -> BTreeMap<usize, Vec<usize>> {
    let mut plan = BTreeMap::new();
    for (&li, s) in &scores.per_layer {
        let n = s.len();
        let keep = (((1.0 - rate) * n as f64).ceil() as usize).max(1);
        // Highest score first; ties keep the lower index.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<usize> = order[..keep].to_vec();
        kept.sort_unstable();
        plan.insert(li, kept);
    }
    plan
}

fn rank_global(scores: &CriterionScores, rate: f64) -> BTreeMap<usize, Vec<usize>> {
    // Normalize each layer's scores to fractions of the layer's total, so
    // layers with different score magnitudes share one scale. An all-zero
    // layer stays all-zero (its units rank worst, protected by the floor).
    let mut pool: Vec<(usize, usize, f64)> = Vec::new();
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    for (&li, s) in &scores.per_layer {
        let sum: f64 = s.iter().sum();
        remaining.insert(li, s.len());
        for (u, &v) in s.iter().enumerate() {
            let norm = if sum > 0.0 { v / sum } else { 0.0 };
            pool.push((li, u, norm));
        }
    }
    let total = pool.len();
    let want_drop = (rate * total as f64).floor() as usize;
    // Worst first: lowest normalized score, then the later layer, then the
    // higher unit index — so ties keep earlier layers and lower indices.
    pool.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap()
            .then(b.0.cmp(&a.0))
            .then(b.1.cmp(&a.1))
    });
    let mut dropped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut n_dropped = 0;
    for &(li, u, _) in &pool {
        if n_dropped == want_drop {
            break;
        }
        let left = remaining.get_mut(&li).unwrap();
        if *left <= 1 {
            continue; // would empty the layer; redistribute to the next-worst
        }
        *left -= 1;
        dropped.entry(li).or_default().push(u);
        n_dropped += 1;
    }
    let mut plan = BTreeMap::new();
    for (&li, s) in &scores.per_layer {
        let drop = dropped.remove(&li).unwrap_or_default();
        let mut kept: Vec<usize> = (0..s.len()).filter(|u| !drop.contains(u)).collect();
        kept.sort_unstable();
        plan.insert(li, kept);
    }
    plan
}
