//! VOC-style detection evaluation: per-image greedy matching, precision /
//! recall accumulation, per-class average precision (11-point interpolation
//! by default, all-point behind a flag), and base/novel aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datamodel::{iou, BBox, ClassSplit, Detection};
use crate::error::{Error, Result};

/// Per-detection TP/FP flags for one image and one class, in descending
/// score order, plus the ground-truth count.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// `(score, is_true_positive)` in descending score order.
    pub scored_flags: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy matching for a single image and class: detections in descending
/// score order (ties by ascending index) each claim the highest-IoU unmatched
/// ground-truth box with IoU at or above the threshold; every ground-truth
/// box is matched at most once and duplicates become false positives.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut scored_flags = Vec::with_capacity(dets.len());
    for i in order {
        let mut best = (0.0f64, None);
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if v > best.0 {
                best = (v, Some(j));
            }
        }
        let tp = best.0 >= iou_thresh && best.1.is_some();
        if tp {
            taken[best.1.unwrap()] = true;
        }
        scored_flags.push((dets[i].score, tp));
    }
    MatchResult {
        scored_flags,
        num_gt: gts.len(),
    }
}

/// AP interpolation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// VOC 2007 11-point interpolation (default).
    ElevenPoint,
    /// Area under the monotone precision envelope.
    AllPoint,
}

/// Average precision from pooled `(score, tp)` flags and the ground-truth
/// count. Flags are re-sorted by descending score with the stable original
/// order breaking ties, so AP depends only on the score ranking.
pub fn average_precision(
    scored_flags: &[(f64, bool)],
    num_gt: usize,
    interp: Interpolation,
) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut flags = scored_flags.to_vec();
    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp_cum = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flags.len()); // (recall, precision)
    for (k, (_, tp)) in flags.iter().enumerate() {
        if *tp {
            tp_cum += 1;
        }
        let recall = tp_cum as f64 / num_gt as f64;
        let precision = tp_cum as f64 / (k + 1) as f64;
        curve.push((recall, precision));
    }
    match interp {
        Interpolation::ElevenPoint => {
            let mut sum = 0.0;
            for i in 0..=10 {
                let anchor = i as f64 / 10.0;
                let p = curve
                    .iter()
                    .filter(|(r, _)| *r >= anchor - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0f64, f64::max);
                sum += p;
            }
            sum / 11.0
        }
        Interpolation::AllPoint => {
            // monotone envelope from the right, integrate over recall steps
            let mut env = curve.clone();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i].1 = env[i].1.max(env[i + 1].1);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in env {
                if r > prev_recall {
                    ap += (r - prev_recall) * p;
                    prev_recall = r;
                }
            }
            ap
        }
    }
}

/// Per-class AP entry in a report.
#[derive(Debug, Clone)]
pub struct ClassAp {
    pub name: String,
    pub novel: bool,
    /// `None` when the class had no ground truth and was excluded.
    pub ap: Option<f64>,
    pub num_gt: usize,
}

/// Evaluation summary: per-class AP plus base/novel/overall means.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub base_mean: f64,
    pub novel_mean: f64,
    pub map: f64,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

/// Aggregates per-class APs into base/novel/overall arithmetic means.
/// `aps` maps class id to (AP, num_gt); classes whose ground-truth count is
/// zero may be absent and are excluded from the means. Any other missing
/// class is an error.
pub fn mean_ap(
    aps: &BTreeMap<usize, (f64, usize)>,
    split: &ClassSplit,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<EvalReport> {
    let mut per_class = Vec::with_capacity(split.len());
    let mut sums = (0.0, 0usize, 0.0, 0usize); // base sum/count, novel sum/count
    for class_id in 0..split.len() {
        let novel = split.is_novel(class_id);
        match aps.get(&class_id) {
            None => {
                return Err(Error::Evaluation(format!(
                    "missing AP for class {:?}",
                    split.name(class_id)
                )));
            }
            Some(&(ap, num_gt)) if num_gt > 0 => {
                per_class.push(ClassAp {
                    name: split.name(class_id).to_string(),
                    novel,
                    ap: Some(ap),
                    num_gt,
                });
                if novel {
                    sums.2 += ap;
                    sums.3 += 1;
                } else {
                    sums.0 += ap;
                    sums.1 += 1;
                }
            }
            // present but zero ground truth: excluded with a warning flag
            Some(_) => {
                per_class.push(ClassAp {
                    name: split.name(class_id).to_string(),
                    novel,
                    ap: None,
                    num_gt: 0,
                });
            }
        }
    }
    let base_mean = if sums.1 > 0 { sums.0 / sums.1 as f64 } else { 0.0 };
    let novel_mean = if sums.3 > 0 { sums.2 / sums.3 as f64 } else { 0.0 };
    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        per_class,
        base_mean,
        novel_mean,
        map,
        iou_threshold,
        interpolation,
    })
}

/// Full dataset evaluation: `items` holds per-image `(detections, ground
/// truth)` pairs with class ids in vocabulary order.
pub fn evaluate_dataset(
    items: &[(Vec<Detection>, Vec<(BBox, usize)>)],
    split: &ClassSplit,
    iou_thresh: f64,
    interp: Interpolation,
) -> Result<EvalReport> {
    let mut aps = BTreeMap::new();
    for class_id in 0..split.len() {
        let mut pooled: Vec<(f64, bool)> = Vec::new();
        let mut num_gt = 0usize;
        for (dets, gts) in items {
            let class_dets: Vec<Detection> = dets
                .iter()
                .filter(|d| d.class_id == class_id)
                .cloned()
                .collect();
            let class_gts: Vec<BBox> = gts
                .iter()
                .filter(|(_, c)| *c == class_id)
                .map(|(b, _)| *b)
                .collect();
            let m = match_detections(&class_dets, &class_gts, iou_thresh);
            pooled.extend(m.scored_flags);
            num_gt += m.num_gt;
        }
        let ap = average_precision(&pooled, num_gt, interp);
        aps.insert(class_id, (ap, num_gt));
    }
    mean_ap(&aps, split, iou_thresh, interp)
}

impl EvalReport {
    /// Per-class AP table plus the aggregate means, as plain text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# detection evaluation (iou {:.2}, {} interpolation)",
            self.iou_threshold,
            match self.interpolation {
                Interpolation::ElevenPoint => "11-point",
                Interpolation::AllPoint => "all-point",
            }
        );
        let _ = writeln!(out, "{:<12} {:<6} {:>8} {:>6}", "class", "set", "ap", "n_gt");
        for c in &self.per_class {
            let set = if c.novel { "novel" } else { "base" };
            match c.ap {
                Some(ap) => {
                    let _ = writeln!(out, "{:<12} {:<6} {:>8.4} {:>6}", c.name, set, ap, c.num_gt);
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<12} {:<6} {:>8} {:>6}  (no ground truth; excluded)",
                        c.name, set, "-", 0
                    );
                }
            }
        }
        let _ = writeln!(out, "base_mean  {:.4}", self.base_mean);
        let _ = writeln!(out, "novel_mean {:.4}", self.novel_mean);
        let _ = writeln!(out, "map        {:.4}", self.map);
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "iou_threshold={}", self.iou_threshold);
        for c in &self.per_class {
            match c.ap {
                Some(ap) => {
                    let _ = writeln!(out, "ap.{}={ap}", c.name);
                }
                None => {
                    let _ = writeln!(out, "ap.{}=excluded", c.name);
                }
            }
        }
        let _ = writeln!(out, "base_mean={}", self.base_mean);
        let _ = writeln!(out, "novel_mean={}", self.novel_mean);
        let _ = writeln!(out, "map={}", self.map);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, x + w, y + h).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection::new(b, 0, score).unwrap()
    }

    /// Independent PR-staircase oracle: walks prefixes explicitly and
    /// evaluates the interpolation from the raw point list.
    pub(super) fn staircase_oracle(flags: &[bool], num_gt: usize, interp: Interpolation) -> f64 {
        if num_gt == 0 {
            return 0.0;
        }
        let mut points = Vec::new();
        for k in 1..=flags.len() {
            let tp = flags[..k].iter().filter(|&&f| f).count();
            points.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
        }
        match interp {
            Interpolation::ElevenPoint => {
                let mut total = 0.0;
                for i in 0..=10 {
                    let anchor = i as f64 / 10.0;
                    let mut best = 0.0f64;
                    for &(r, p) in &points {
                        if r >= anchor - 1e-12 && p > best {
                            best = p;
                        }
                    }
                    total += best;
                }
                total / 11.0
            }
            Interpolation::AllPoint => {
                // integrate max-precision-at-recall>=r over each recall jump
                let mut ap = 0.0;
                let mut prev_r = 0.0;
                for idx in 0..points.len() {
                    let (r, _) = points[idx];
                    if r > prev_r {
                        let best = points[idx..]
                            .iter()
                            .map(|&(_, p)| p)
                            .fold(0.0f64, f64::max);
                        ap += (r - prev_r) * best;
                        prev_r = r;
                    }
                }
                ap
            }
        }
    }

    #[test]
    fn single_detection_above_threshold_is_tp() {
        let gt = bbox(0.0, 0.0, 10.0, 10.0);
        let d = det(bbox(0.0, 0.0, 10.0, 6.0), 0.9); // iou 0.6
        let m = match_detections(&[d], &[gt], 0.5);
        assert_eq!(m.scored_flags, vec![(0.9, true)]);
    }

    #[test]
    fn low_iou_detection_is_fp() {
        let gt = bbox(0.0, 0.0, 10.0, 10.0);
        let d = det(bbox(0.0, 0.0, 10.0, 4.0), 0.9); // iou 0.4
        let m = match_detections(&[d], &[gt], 0.5);
        assert_eq!(m.scored_flags, vec![(0.9, false)]);
    }

    #[test]
    fn duplicate_detections_on_one_gt_are_tp_then_fp() {
        let gt = bbox(0.0, 0.0, 10.0, 10.0);
        let d1 = det(bbox(0.0, 0.0, 10.0, 9.0), 0.9);
        let d2 = det(bbox(0.0, 1.0, 10.0, 9.0), 0.8);
        let m = match_detections(&[d1, d2], &[gt], 0.5);
        assert_eq!(m.scored_flags, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn perfect_single_detection_has_ap_one() {
        for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
            let ap = average_precision(&[(0.9, true)], 1, interp);
            assert_eq!(ap, 1.0);
        }
    }

    #[test]
    fn zero_detections_zero_ap() {
        assert_eq!(average_precision(&[], 3, Interpolation::ElevenPoint), 0.0);
    }

    #[test]
    fn three_detection_mixed_case_matches_staircase_oracle_exactly() {
        // TP, FP, TP with 2 GT boxes
        let flags = [(0.9, true), (0.8, false), (0.7, true)];
        let raw: Vec<bool> = flags.iter().map(|f| f.1).collect();
        for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
            let got = average_precision(&flags, 2, interp);
            let want = staircase_oracle(&raw, 2, interp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn exhaustive_small_battery_matches_oracle_exactly() {
        // every TP/FP pattern with up to 5 detections and 1..=3 GT boxes
        for n_det in 0..=5usize {
            for pattern in 0..(1u32 << n_det) {
                let flags: Vec<bool> = (0..n_det).map(|i| pattern & (1 << i) != 0).collect();
                let n_tp = flags.iter().filter(|&&f| f).count();
                for n_gt in 1..=3usize {
                    if n_tp > n_gt {
                        continue; // impossible configuration
                    }
                    let scored: Vec<(f64, bool)> = flags
                        .iter()
                        .enumerate()
                        .map(|(i, &f)| (1.0 - 0.1 * i as f64, f))
                        .collect();
                    for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
                        let got = average_precision(&scored, n_gt, interp);
                        let want = staircase_oracle(&flags, n_gt, interp);
                        assert!(
                            got == want,
                            "pattern {flags:?} n_gt {n_gt} {interp:?}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    fn shapes_split() -> ClassSplit {
        ClassSplit::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            &["c".into(), "d".into()],
        )
        .unwrap()
    }

    #[test]
    fn mean_ap_aggregates_per_partition() {
        let split = shapes_split();
        let mut aps = BTreeMap::new();
        for c in 0..4 {
            aps.insert(c, (0.5, 3));
        }
        let report = mean_ap(&aps, &split, 0.5, Interpolation::ElevenPoint).unwrap();
        assert_eq!(report.base_mean, 0.5);
        assert_eq!(report.novel_mean, 0.5);
        assert_eq!(report.map, 0.5);
    }

    #[test]
    fn novel_mean_ignores_base_ap_changes() {
        let split = shapes_split();
        let mut aps = BTreeMap::new();
        aps.insert(0, (0.2, 3));
        aps.insert(1, (0.4, 3));
        aps.insert(2, (0.6, 3));
        aps.insert(3, (0.8, 3));
        let before = mean_ap(&aps, &split, 0.5, Interpolation::ElevenPoint).unwrap();
        aps.insert(0, (0.9, 3));
        let after = mean_ap(&aps, &split, 0.5, Interpolation::ElevenPoint).unwrap();
        assert_eq!(before.novel_mean, after.novel_mean);
        assert!(after.base_mean > before.base_mean);
    }

    #[test]
    fn missing_class_is_error_and_zero_gt_is_excluded() {
        let split = shapes_split();
        let mut aps = BTreeMap::new();
        aps.insert(0, (0.5, 3));
        assert!(mean_ap(&aps, &split, 0.5, Interpolation::ElevenPoint).is_err());

        for c in 1..4 {
            aps.insert(c, (0.5, 3));
        }
        aps.insert(1, (0.0, 0)); // no ground truth for class b
        let report = mean_ap(&aps, &split, 0.5, Interpolation::ElevenPoint).unwrap();
        assert!(report.per_class[1].ap.is_none());
        assert_eq!(report.base_mean, 0.5); // only class a counts toward base
    }

    #[test]
    fn evaluate_dataset_end_to_end_toy_case() {
        let split = ClassSplit::new(vec!["a".into(), "b".into()], &["b".into()]).unwrap();
        let gt_a = bbox(0.0, 0.0, 10.0, 10.0);
        let gt_b = bbox(30.0, 30.0, 12.0, 12.0);
        let items = vec![(
            vec![
                Detection::new(gt_a, 0, 0.95).unwrap(),
                Detection::new(gt_b, 1, 0.9).unwrap(),
            ],
            vec![(gt_a, 0usize), (gt_b, 1usize)],
        )];
        let report =
            evaluate_dataset(&items, &split, 0.5, Interpolation::ElevenPoint).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.base_mean, 1.0);
        assert_eq!(report.novel_mean, 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_flags() -> impl Strategy<Value = Vec<(f64, bool)>> {
            proptest::collection::vec((0.01f64..1.0, proptest::bool::ANY), 0..12)
        }

        proptest! {
            #[test]
            fn ap_in_unit_interval(flags in arb_flags(), num_gt in 1usize..6) {
                // matching never yields more true positives than ground truth
                prop_assume!(flags.iter().filter(|f| f.1).count() <= num_gt);
                for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
                    let ap = average_precision(&flags, num_gt, interp);
                    prop_assert!((0.0..=1.0).contains(&ap));
                }
            }

            #[test]
            fn ap_invariant_to_monotone_score_rescaling(flags in arb_flags(), num_gt in 1usize..6) {
                let rescaled: Vec<(f64, bool)> = flags
                    .iter()
                    .map(|&(s, f)| (0.2 + 0.5 * s, f))
                    .collect();
                for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
                    prop_assert_eq!(
                        average_precision(&flags, num_gt, interp).to_bits(),
                        average_precision(&rescaled, num_gt, interp).to_bits()
                    );
                }
            }

            #[test]
            fn lowest_score_fp_never_increases_ap(flags in arb_flags(), num_gt in 1usize..6) {
                let min_score = flags.iter().map(|f| f.0).fold(1.0f64, f64::min);
                let mut extended = flags.clone();
                extended.push((min_score / 2.0, false));
                for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
                    prop_assert!(
                        average_precision(&extended, num_gt, interp)
                            <= average_precision(&flags, num_gt, interp) + 1e-12
                    );
                }
            }

            #[test]
            fn top_score_tp_never_decreases_ap(flags in arb_flags(), num_gt in 1usize..6) {
                let n_tp = flags.iter().filter(|f| f.1).count();
                prop_assume!(n_tp < num_gt);
                let mut extended = vec![(1.0, true)];
                extended.extend(flags.iter().cloned());
                for interp in [Interpolation::ElevenPoint, Interpolation::AllPoint] {
                    prop_assert!(
                        average_precision(&extended, num_gt, interp)
                            >= average_precision(&flags, num_gt, interp) - 1e-12
                    );
                }
            }
        }
    }
}
