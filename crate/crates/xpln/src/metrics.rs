//! Evaluation: ROC/AUC, precision-recall, grade cascading with cutoffs,
//! agreement statistics, and matching lesion types to map channels.
//!
//! Everything here runs in f64 on detached values; nothing touches the graph.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Scores paired with binary relevance labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {bad}")));
        }
        Ok(Self { scores, labels })
    }
}

/// Square count table: `counts[pred * k + truth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_pairs(pred: &[usize], truth: &[usize], k: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} ground-truth grades",
                pred.len(),
                truth.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::Config(format!(
                    "grade pair ({p}, {t}) out of range for {k} categories"
                )));
            }
            cm.counts[p * k + t] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.k + truth]
    }

    pub fn record(&mut self, pred: usize, truth: usize) {
        self.counts[pred * self.k + truth] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let agree: u64 = (0..self.k).map(|i| self.count(i, i)).sum();
        agree as f64 / self.total() as f64
    }
}

fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// ROC curve (false-positive rate, true-positive rate) over every distinct
/// cutoff, plus its trapezoid area. Ties get half credit, so the area equals
/// the midrank Mann-Whitney statistic.
pub fn roc_auc(set: &ScoredSet) -> Result<(Vec<(f64, f64)>, f64)> {
    let pos = set.labels.iter().filter(|&&l| l).count();
    let neg = set.labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Numeric(
            "area under ROC undefined: only one class present".into(),
        ));
    }
    let idx = order_desc(&set.scores);
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while i < idx.len() && set.scores[idx[i]] == s {
            if set.labels[idx[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        auc += (dfp as f64 / neg as f64) * ((2 * tp + dtp) as f64 / (2 * pos) as f64);
        tp += dtp;
        fp += dfp;
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok((curve, auc))
}

/// Precision-recall curve points (recall, precision) over every distinct
/// cutoff, plus the step area over recall.
pub fn pr_map(set: &ScoredSet) -> Result<(Vec<(f64, f64)>, f64)> {
    let pos = set.labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Numeric(
            "precision-recall undefined: no positives".into(),
        ));
    }
    let idx = order_desc(&set.scores);
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        while i < idx.len() && set.scores[idx[i]] == s {
            if set.labels[idx[i]] {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let precision = tp as f64 / seen as f64;
        let recall = tp as f64 / pos as f64;
        curve.push((recall, precision));
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok((curve, area))
}

/// Collapse per-label probabilities to a single grade: walk the labels from
/// most to least severe and return the first whose probability clears its
/// cutoff; none → grade 0.
pub fn severity_from_probs(p: &[f64], tau: &[f64]) -> usize {
    debug_assert_eq!(p.len(), tau.len());
    for n in (0..p.len()).rev() {
        if p[n] >= tau[n] {
            return n + 1;
        }
    }
    0
}

/// Chance-corrected agreement with squared distance weights.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    let total = cm.total();
    if total == 0 {
        return Err(Error::Numeric("agreement undefined on empty table".into()));
    }
    let rows: Vec<u64> = (0..k).map(|i| (0..k).map(|j| cm.count(i, j)).sum()).collect();
    let cols: Vec<u64> = (0..k).map(|j| (0..k).map(|i| cm.count(i, j)).sum()).collect();
    let weight = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / ((k - 1) as f64).powi(2)
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            observed += weight(i, j) * cm.count(i, j) as f64;
            expected += weight(i, j) * (rows[i] as f64 * cols[j] as f64 / total as f64);
        }
    }
    if expected == 0.0 {
        return Err(Error::Numeric(
            "agreement undefined: no off-diagonal mass expected".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

fn kappa_for(probs: &[Vec<f64>], grades: &[usize], tau: &[f64], k: usize) -> Option<f64> {
    let pred: Vec<usize> = probs.iter().map(|p| severity_from_probs(p, tau)).collect();
    let cm = ConfusionMatrix::from_pairs(&pred, grades, k).ok()?;
    quadratic_weighted_kappa(&cm).ok()
}

fn candidate_values(probs: &[Vec<f64>], label: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = probs.iter().map(|p| p[label]).collect();
    vals.push(0.0);
    vals.push(1.0);
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    vals
}

// Covers four labels with up to 32 candidate values each (30 distinct
// predictions plus the 0 and 1 sentinels).
const EXHAUSTIVE_BUDGET: usize = 1_100_000;

/// Pick per-label cutoffs maximizing quadratic-weighted agreement of the
/// cascaded grades. Candidates per label are the distinct predicted values
/// plus 0 and 1. Small candidate grids are searched exhaustively (first
/// maximum in ascending lexicographic order wins); larger ones by coordinate
/// ascent, sweeping each coordinate over its candidates until a full pass
/// changes nothing.
pub fn select_cutoffs(probs: &[Vec<f64>], grades: &[usize]) -> Result<Vec<f64>> {
    if probs.is_empty() || probs.len() != grades.len() {
        return Err(Error::Shape(format!(
            "{} probability vectors vs {} grades",
            probs.len(),
            grades.len()
        )));
    }
    let n = probs[0].len();
    if probs.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("ragged probability vectors".into()));
    }
    let k = n + 1;
    let candidates: Vec<Vec<f64>> = (0..n).map(|l| candidate_values(probs, l)).collect();
    let grid: usize = candidates.iter().map(|c| c.len()).product();
    let mut best_tau = vec![0.5; n];
    let mut best = f64::NEG_INFINITY;
    if grid <= EXHAUSTIVE_BUDGET {
        let mut cursor = vec![0usize; n];
        loop {
            let tau: Vec<f64> = cursor.iter().zip(&candidates).map(|(&c, v)| v[c]).collect();
            if let Some(kappa) = kappa_for(probs, grades, &tau, k) {
                if kappa > best {
                    best = kappa;
                    best_tau = tau;
                }
            }
            // odometer increment, last coordinate fastest; ascending order
            // plus strict improvement keeps the lexicographically smallest
            // maximizer
            let mut pos = n;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                cursor[pos] += 1;
                if cursor[pos] < candidates[pos].len() {
                    break;
                }
                cursor[pos] = 0;
            }
            if cursor.iter().all(|&c| c == 0) {
                break;
            }
        }
    } else {
        let mut tau: Vec<f64> = candidates.iter().map(|c| c[c.len() / 2]).collect();
        best = kappa_for(probs, grades, &tau, k).unwrap_or(f64::NEG_INFINITY);
        for _sweep in 0..8 {
            let mut changed = false;
            for l in 0..n {
                let mut coord_best = best;
                let mut coord_val = tau[l];
                for &c in &candidates[l] {
                    let mut trial = tau.clone();
                    trial[l] = c;
                    if let Some(kappa) = kappa_for(probs, grades, &trial, k) {
                        if kappa > coord_best {
                            coord_best = kappa;
                            coord_val = c;
                        }
                    }
                }
                if coord_val != tau[l] {
                    tau[l] = coord_val;
                    best = coord_best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        best_tau = tau;
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Numeric(
            "no cutoff candidate yields a defined agreement score".into(),
        ));
    }
    Ok(best_tau)
}

/// For each lesion type, the foreground channel whose values best rank that
/// type's mask pixels, with the achieved area; `None` when the type had no
/// positive pixels anywhere.
#[derive(Debug, Clone)]
pub struct LesionAssignment {
    /// Per lesion type: (channel index into the map stack, pixel AUC).
    pub per_type: Vec<Option<(usize, f64)>>,
    /// Pixel AUC of total foreground probability against the union mask.
    pub combined_auc: f64,
}

/// Match lesion types to map channels by pixel-ranking quality, pooling
/// pixels across the whole dataset.
///
/// `stacks[s]` holds sample `s`'s maps as `m * h * w` values; `masks[t][s]`
/// holds lesion type `t`'s ground truth for sample `s` as `h * w` booleans.
pub fn lesion_map_assignment(
    stacks: &[&[f64]],
    shape: (usize, usize, usize),
    masks: &[Vec<&[bool]>],
) -> Result<LesionAssignment> {
    let (m, h, w) = shape;
    let hw = h * w;
    if m < 2 {
        return Err(Error::Shape(format!("need at least 2 channels, got {m}")));
    }
    for (s, stack) in stacks.iter().enumerate() {
        if stack.len() != m * hw {
            return Err(Error::Shape(format!(
                "sample {s}: {} map values, expected {}",
                stack.len(),
                m * hw
            )));
        }
    }
    for (t, per_sample) in masks.iter().enumerate() {
        if per_sample.len() != stacks.len() {
            return Err(Error::Shape(format!(
                "lesion type {t}: {} masks for {} samples",
                per_sample.len(),
                stacks.len()
            )));
        }
        if per_sample.iter().any(|mask| mask.len() != hw) {
            return Err(Error::Shape(format!("lesion type {t}: mask size mismatch")));
        }
    }
    let mut per_type = Vec::with_capacity(masks.len());
    for per_sample in masks {
        let labels: Vec<bool> = per_sample.iter().flat_map(|m| m.iter().copied()).collect();
        if !labels.iter().any(|&l| l) {
            per_type.push(None);
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for ch in 1..m {
            let scores: Vec<f64> = stacks
                .iter()
                .flat_map(|stack| stack[ch * hw..(ch + 1) * hw].iter().copied())
                .collect();
            let (_, auc) = roc_auc(&ScoredSet::new(scores, labels.clone())?)?;
            if best.map_or(true, |(_, b)| auc > b) {
                best = Some((ch, auc));
            }
        }
        per_type.push(best);
    }
    let union: Vec<bool> = (0..stacks.len() * hw)
        .map(|i| masks.iter().any(|per_sample| per_sample[i / hw][i % hw]))
        .collect();
    let foreground: Vec<f64> = stacks
        .iter()
        .flat_map(|stack| stack[..hw].iter().map(|&bg| 1.0 - bg))
        .collect();
    let (_, combined_auc) = roc_auc(&ScoredSet::new(foreground, union)?).map_err(|_| {
        Error::Numeric("combined lesion evaluation undefined: union mask empty".into())
    })?;
    Ok(LesionAssignment { per_type, combined_auc })
}
