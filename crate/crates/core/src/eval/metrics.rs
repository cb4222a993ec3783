//! Ranking metrics, per-region overlap, and forgetting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; equal scores keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mann-Whitney AUROC with tied scores earning half credit.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positives, {neg} negatives"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let group_pos = idx[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += mid * group_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: precision at each threshold times the recall step.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::DegenerateLabels("no positives".into()));
    }
    let idx = descending(scores);
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        tp += idx[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Binary ground truth for one map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape(format!("{} mask values for {h}x{w}", values.len())));
        }
        Ok(Self { h, w, values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![false; h * w],
        }
    }

    /// 8-connected components; returns per-pixel component ids and the count.
    pub fn components(&self) -> (Vec<Option<usize>>, usize) {
        let mut ids = vec![None; self.values.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.values.len() {
            if !self.values[start] || ids[start].is_some() {
                continue;
            }
            ids[start] = Some(count);
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (r, c) = ((p / self.w) as i64, (p % self.w) as i64);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= self.h as i64 || nc >= self.w as i64 {
                            continue;
                        }
                        let q = nr as usize * self.w + nc as usize;
                        if self.values[q] && ids[q].is_none() {
                            ids[q] = Some(count);
                            stack.push(q);
                        }
                    }
                }
            }
            count += 1;
        }
        (ids, count)
    }
}

pub const DEFAULT_FPR_CAP: f64 = 0.3;

/// Normalized area under the per-region-overlap curve up to `fpr_cap`.
///
/// One sweep over every distinct score: per-region overlap is the mean over
/// connected components of the fraction of the component above threshold.
pub fn pro(maps: &[Matrix], masks: &[BinaryMask], fpr_cap: f64) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::Config(format!("fpr cap {fpr_cap} outside (0, 1]")));
    }
    let mut scores = Vec::new();
    // component index per pixel, offset across images
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != (mask.h, mask.w) {
            return Err(Error::shape(format!(
                "map {:?} does not match mask {}x{}",
                map.shape(),
                mask.h,
                mask.w
            )));
        }
        let (ids, count) = mask.components();
        let base = sizes.len();
        sizes.resize(base + count, 0);
        for (p, id) in ids.iter().enumerate() {
            if let Some(c) = id {
                sizes[base + c] += 1;
            }
            scores.push(map.data()[p]);
            region.push(id.map(|c| base + c));
        }
    }
    let negatives = region.iter().filter(|r| r.is_none()).count();
    if sizes.is_empty() || negatives == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{} anomalous regions, {negatives} normal pixels",
            sizes.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("map value {s}")));
    }

    let idx = descending(&scores);
    let (mut overlap_sum, mut fp) = (0.0, 0usize);
    let (mut prev_fpr, mut prev_pro, mut area) = (0.0, 0.0, 0.0);
    let n_regions = sizes.len() as f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            match region[k] {
                Some(c) => {
                    overlap_sum += 1.0 / sizes[c] as f64;
                }
                None => fp += 1,
            }
        }
        let fpr = fp as f64 / negatives as f64;
        let pro_now = overlap_sum / n_regions;
        if fpr >= fpr_cap {
            let t = if fpr > prev_fpr {
                (fpr_cap - prev_fpr) / (fpr - prev_fpr)
            } else {
                0.0
            };
            let at_cap = prev_pro + t * (pro_now - prev_pro);
            area += (fpr_cap - prev_fpr) * (prev_pro + at_cap) / 2.0;
            return Ok((area / fpr_cap).clamp(0.0, 1.0));
        }
        area += (fpr - prev_fpr) * (prev_pro + pro_now) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro_now;
        i = j + 1;
    }
    // every negative has been seen, so fpr reached 1 >= cap above
    unreachable!("threshold sweep ended below the fpr cap")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmNormalization {
    /// Divide by k - 1.
    #[default]
    Standard,
    /// Divide by (k - 1)·k.
    TaskScaled,
}

impl std::str::FromStr for FmNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(FmNormalization::Standard),
            "task_scaled" | "task-scaled" => Ok(FmNormalization::TaskScaled),
            other => Err(Error::Config(format!("unknown fm normalization {other:?}"))),
        }
    }
}

/// Lower-triangular metric table: `get(l, j)` is task `j` after training task `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResultMatrix {
    pub metric: String,
    pub task_names: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

impl TaskResultMatrix {
    pub fn new(metric: impl Into<String>, task_names: Vec<String>) -> Self {
        let k = task_names.len();
        Self {
            metric: metric.into(),
            task_names,
            values: (0..k).map(|l| vec![None; l + 1]).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.task_names.len()
    }

    pub fn set(&mut self, l: usize, j: usize, v: f64) -> Result<()> {
        if j > l || l >= self.k() {
            return Err(Error::Lookup(j));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!(
                "{} value {v} outside [0, 1]",
                self.metric
            )));
        }
        self.values[l][j] = Some(v);
        Ok(())
    }

    pub fn get(&self, l: usize, j: usize) -> Option<f64> {
        self.values.get(l).and_then(|row| row.get(j).copied().flatten())
    }

    /// The last row (j ↦ value after the final task).
    pub fn final_row(&self) -> Vec<Option<f64>> {
        self.values.last().cloned().unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint");
        for name in &self.task_names {
            write!(out, ",{name}").unwrap();
        }
        out.push('\n');
        for (l, row) in self.values.iter().enumerate() {
            out.push_str(&self.task_names[l]);
            for j in 0..self.k() {
                out.push(',');
                if let Some(v) = row.get(j).copied().flatten() {
                    write!(out, "{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Average drop of each earlier task from its best earlier value to its final value.
///
/// Columns with a missing final or historical value are skipped, and the
/// normalizer counts only contributing columns.
pub fn forgetting_measure(t: &TaskResultMatrix, norm: FmNormalization) -> Result<f64> {
    let k = t.k();
    if k < 2 {
        return Err(Error::Size(format!("forgetting needs 2 checkpoints, have {k}")));
    }
    let mut total = 0.0;
    let mut cols = 0usize;
    for j in 0..k - 1 {
        let best = (j..k - 1)
            .filter_map(|l| t.get(l, j))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        if let (Some(best), Some(last)) = (best, t.get(k - 1, j)) {
            total += best - last;
            cols += 1;
        }
    }
    if cols == 0 {
        return Err(Error::DegenerateLabels(format!(
            "no {} values to compare",
            t.metric
        )));
    }
    Ok(match norm {
        FmNormalization::Standard => total / cols as f64,
        FmNormalization::TaskScaled => total / (cols as f64 * k as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        let v = aupr(&[0.9, 0.8, 0.7], &[0, 1, 1]).unwrap();
        assert!((v - (0.25 + 1.0 / 3.0)).abs() < 1e-12);
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut labels = vec![0u8; n];
        labels[n - 1] = 1;
        assert!((aupr(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-12);
        assert!(matches!(aupr(&[0.1], &[0]), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn aupr_tracks_prevalence_for_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 0)).collect();
        let trials = 1000;
        let mut mean = 0.0;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            mean += aupr(&scores, &labels).unwrap() / trials as f64;
        }
        assert!((mean - 0.25).abs() < 0.05, "{mean}");
    }

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(r, c) in on {
            m.values[r * w + c] = true;
        }
        m
    }

    fn indicator(m: &BinaryMask, inverted: bool) -> Matrix {
        Matrix::new(
            m.h,
            m.w,
            m.values
                .iter()
                .map(|&v| f64::from(u8::from(v != inverted)))
                .collect(),
        )
        .unwrap()
    }

    /// Recompute every curve point from scratch at each distinct threshold.
    fn pro_oracle(maps: &[Matrix], masks: &[BinaryMask], cap: f64) -> f64 {
        let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut pts = vec![(0.0, 0.0)];
        for &t in &thresholds {
            let (mut fp, mut neg, mut overlaps, mut regions) = (0.0, 0.0, 0.0, 0.0);
            for (map, mask) in maps.iter().zip(masks) {
                let (ids, count) = mask.components();
                for c in 0..count {
                    let members: Vec<usize> = (0..ids.len()).filter(|&p| ids[p] == Some(c)).collect();
                    let hit = members.iter().filter(|&&p| map.data()[p] >= t).count();
                    overlaps += hit as f64 / members.len() as f64;
                    regions += 1.0;
                }
                for p in 0..ids.len() {
                    if ids[p].is_none() {
                        neg += 1.0;
                        if map.data()[p] >= t {
                            fp += 1.0;
                        }
                    }
                }
            }
            pts.push((fp / neg, overlaps / regions));
        }
        let mut area = 0.0;
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x1 >= cap {
                let y = if x1 > x0 {
                    y0 + (cap - x0) / (x1 - x0) * (y1 - y0)
                } else {
                    y0
                };
                area += (cap - x0) * (y0 + y) / 2.0;
                break;
            }
            area += (x1 - x0) * (y0 + y1) / 2.0;
        }
        area / cap
    }

    #[test]
    fn pro_cases() {
        let m = mask(6, 6, &[(0, 0), (0, 1), (1, 1), (4, 4), (5, 5), (4, 5)]);
        assert_eq!(m.components().1, 2);
        assert!((pro(&[indicator(&m, false)], &[m.clone()], 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert!(pro(&[indicator(&m, true)], &[m.clone()], 0.3).unwrap() < 1e-12);

        // region A scored high, region B as low as the background
        let mut map = Matrix::zeros(6, 6);
        for &(r, c) in &[(0, 0), (0, 1), (1, 1)] {
            map.set(r, c, 1.0);
        }
        let got = pro(&[map.clone()], &[m.clone()], 0.3).unwrap();
        // after the high group: fpr 0, pro 1/2; then fpr jumps to 1 with pro 1
        let hand = (0.3 * (0.5 + (0.5 + 0.3 * 0.5)) / 2.0) / 0.3;
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
        assert!((got - pro_oracle(&[map], &[m], 0.3)).abs() < 1e-12);

        assert!(matches!(
            pro(&[Matrix::zeros(2, 2)], &[BinaryMask::zeros(2, 2)], 0.3),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn diagonal_pixels_join_one_component() {
        let m = mask(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m.components().1, 1);
    }

    #[test]
    fn forgetting_cases() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut t = TaskResultMatrix::new("auroc", names.clone());
        t.set(0, 0, 0.9).unwrap();
        t.set(1, 0, 0.8).unwrap();
        t.set(1, 1, 0.7).unwrap();
        let std = forgetting_measure(&t, FmNormalization::Standard).unwrap();
        let scaled = forgetting_measure(&t, FmNormalization::TaskScaled).unwrap();
        assert!((std - 0.1).abs() < 1e-15);
        assert!((scaled - 0.05).abs() < 1e-15);

        t.set(1, 0, 0.95).unwrap();
        assert!(forgetting_measure(&t, FmNormalization::Standard).unwrap() < 0.0);
        t.set(1, 0, 0.9).unwrap();
        assert_eq!(forgetting_measure(&t, FmNormalization::Standard).unwrap(), 0.0);

        let one = TaskResultMatrix::new("auroc", vec!["a".into()]);
        assert!(matches!(
            forgetting_measure(&one, FmNormalization::Standard),
            Err(Error::Size(_))
        ));
        assert!(t.set(0, 1, 0.5).is_err());
        assert_eq!(t.to_csv(), "checkpoint,a,b\na,0.9,\nb,0.9,0.7\n");
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (4usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_count((scores, labels) in arb_case()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let got = auroc(&scores, &labels).unwrap();
            prop_assert!((got - pairwise_auroc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auroc_monotone_invariant((scores, labels) in arb_case(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
        }

        #[test]
        fn auroc_complement((scores, labels) in arb_case()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pro_matches_dense_sweep(
            vals in proptest::collection::vec(0u8..4, 25),
            on in proptest::collection::vec(any::<bool>(), 25),
            cap in 0.05f64..1.0,
        ) {
            prop_assume!(on.iter().any(|&b| b) && on.iter().any(|&b| !b));
            let m = BinaryMask::new(5, 5, on).unwrap();
            let map = Matrix::new(5, 5, vals.iter().map(|&v| v as f64).collect()).unwrap();
            let got = pro(&[map.clone()], &[m.clone()], cap).unwrap();
            prop_assert!((got - pro_oracle(&[map], &[m], cap)).abs() < 1e-12);
        }

        #[test]
        fn perfect_ranking_aupr_is_one((scores, labels) in arb_case()) {
            prop_assume!(labels.contains(&1));
            let ranked: Vec<f64> = labels.iter().zip(&scores).map(|(&l, s)| s.abs() + 100.0 * l as f64).collect();
            let ap = aupr(&ranked, &labels).unwrap();
            let prevalence = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
            prop_assert!((ap - 1.0).abs() < 1e-12 && ap >= prevalence);
        }
    }
}
