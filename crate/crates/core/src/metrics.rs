//! CLEAR-MOT and recall-averaged tracking metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::hungarian;
use crate::motion::BBox3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-distance gate for a prediction to match ground truth, meters.
    pub match_distance: f64,
    pub n_recall: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_distance: 2.0,
            n_recall: 40,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_distance > 0.0 && self.match_distance.is_finite()) {
            return Err(Error::Config(format!(
                "match_distance = {} must be positive",
                self.match_distance
            )));
        }
        if self.n_recall == 0 {
            return Err(Error::Config("n_recall must be at least 1".into()));
        }
        Ok(())
    }
}

/// One box with its identity: a ground-truth object or a tracker output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub scene: String,
    pub frame: i64,
    pub track_id: u64,
    pub bbox: BBox3D,
}

/// Totals of one CLEAR-MOT evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearMot {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub distance_sum: f64,
    pub mt: usize,
    pub ml: usize,
    pub gt_tracks: usize,
}

impl ClearMot {
    pub fn mota(&self) -> f64 {
        if self.gt == 0 {
            return 0.0;
        }
        1.0 - (self.fn_ + self.fp + self.ids) as f64 / self.gt as f64
    }

    /// Mean matched center distance; 0 when nothing matched.
    pub fn motp(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.distance_sum / self.tp as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            0.0
        } else {
            self.tp as f64 / self.gt as f64
        }
    }
}

type FrameKey<'a> = (&'a str, i64);

fn group<'a>(
    records: impl Iterator<Item = &'a TrackRecord>,
) -> BTreeMap<FrameKey<'a>, Vec<&'a TrackRecord>> {
    let mut out: BTreeMap<FrameKey<'a>, Vec<&'a TrackRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.scene.as_str(), r.frame)).or_default().push(r);
    }
    out
}

fn check_coverage(predictions: &[TrackRecord], ground_truth: &[TrackRecord]) -> Result<()> {
    let mut ranges: HashMap<&str, (i64, i64)> = HashMap::new();
    for g in ground_truth {
        let e = ranges.entry(g.scene.as_str()).or_insert((g.frame, g.frame));
        e.0 = e.0.min(g.frame);
        e.1 = e.1.max(g.frame);
    }
    for p in predictions {
        match ranges.get(p.scene.as_str()) {
            None => {
                return Err(Error::Input(format!(
                    "prediction for unknown scene {:?}",
                    p.scene
                )))
            }
            Some(&(lo, hi)) if p.frame < lo || p.frame > hi => {
                return Err(Error::Input(format!(
                    "prediction at frame {} outside ground-truth frames {lo}..={hi} of scene {:?}",
                    p.frame, p.scene
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-frame optimal matching under the distance gate, with identity
/// switches, mostly-tracked and mostly-lost counts.
pub fn clear_mot(
    predictions: &[TrackRecord],
    ground_truth: &[TrackRecord],
    config: &EvalConfig,
) -> Result<ClearMot> {
    config.validate()?;
    check_coverage(predictions, ground_truth)?;
    evaluate(predictions.iter(), ground_truth, config.match_distance)
}

fn evaluate<'a>(
    predictions: impl Iterator<Item = &'a TrackRecord>,
    ground_truth: &'a [TrackRecord],
    gate: f64,
) -> Result<ClearMot> {
    let preds = group(predictions);
    let gts = group(ground_truth.iter());
    let mut keys: Vec<FrameKey> = preds.keys().chain(gts.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();

    let mut out = ClearMot::default();
    let mut last_match: HashMap<(&str, u64), u64> = HashMap::new();
    let mut coverage: HashMap<(&str, u64), (usize, usize)> = HashMap::new();
    let empty = Vec::new();
    for key in keys {
        let g = gts.get(&key).unwrap_or(&empty);
        let p = preds.get(&key).unwrap_or(&empty);
        out.gt += g.len();
        let (n, m) = (g.len(), p.len());
        let infeasible = gate * (n.min(m) as f64 + 1.0) * 10.0;
        let mut cost = Vec::with_capacity(n * m);
        for gi in g {
            for pj in p {
                let d = gi.bbox.distance(&pj.bbox);
                cost.push(if d <= gate { d } else { infeasible });
            }
        }
        let mut matched_gt = vec![false; n];
        let mut tp = 0;
        for (i, j) in hungarian(&cost, n, m)? {
            let d = cost[i * m + j];
            if d > gate {
                continue;
            }
            tp += 1;
            matched_gt[i] = true;
            out.distance_sum += d;
            let gid = (key.0, g[i].track_id);
            if let Some(prev) = last_match.insert(gid, p[j].track_id) {
                if prev != p[j].track_id {
                    out.ids += 1;
                }
            }
        }
        for (i, gi) in g.iter().enumerate() {
            let c = coverage.entry((key.0, gi.track_id)).or_insert((0, 0));
            c.0 += 1;
            c.1 += usize::from(matched_gt[i]);
        }
        out.tp += tp;
        out.fp += m - tp;
        out.fn_ += n - tp;
    }
    out.gt_tracks = coverage.len();
    for &(present, matched) in coverage.values() {
        let ratio = matched as f64 / present as f64;
        if ratio >= 0.8 {
            out.mt += 1;
        } else if ratio <= 0.2 {
            out.ml += 1;
        }
    }
    Ok(out)
}

/// `max(0, 1 − (IDS + FP + FN − (1 − r)·GT) / (r·GT))`.
pub fn motar(ids: usize, fp: usize, fn_: usize, gt: usize, r: f64) -> Result<f64> {
    if gt == 0 {
        return Err(Error::Input(
            "MOTAR is undefined without ground truth".into(),
        ));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Input(format!("recall {r} outside (0, 1]")));
    }
    let gt = gt as f64;
    let errors = (ids + fp + fn_) as f64;
    Ok((1.0 - (errors - (1.0 - r) * gt) / (r * gt)).max(0.0))
}

/// One point of the recall sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub target_recall: f64,
    /// Highest score threshold reaching the target, `None` if unreachable.
    pub threshold: Option<f64>,
    pub recall: f64,
    pub motar: f64,
    pub motp: f64,
}

/// AMOTA, AMOTP and the per-recall table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSweep {
    pub amota: f64,
    pub amotp: f64,
    pub points: Vec<RecallPoint>,
}

/// Averages MOTAR over target recalls `1/n, 2/n, …, 1`.
///
/// Each target is realized by the highest score threshold whose surviving
/// predictions reach it; MOTAR is then evaluated at the recall actually
/// realized, so a perfect tracker scores exactly 1. Unreachable targets
/// contribute MOTAR 0 and MOTP equal to the match distance.
pub fn amota(
    predictions: &[TrackRecord],
    ground_truth: &[TrackRecord],
    config: &EvalConfig,
) -> Result<RecallSweep> {
    config.validate()?;
    if ground_truth.is_empty() {
        return Err(Error::Input(
            "AMOTA is undefined without ground truth".into(),
        ));
    }
    check_coverage(predictions, ground_truth)?;
    let mut thresholds: Vec<f64> = predictions.iter().map(|p| p.bbox.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut cache: HashMap<usize, ClearMot> = HashMap::new();
    let mut at = |k: usize| -> Result<ClearMot> {
        if let Some(r) = cache.get(&k) {
            return Ok(r.clone());
        }
        let s = thresholds[k];
        let r = evaluate(
            predictions.iter().filter(|p| p.bbox.score >= s),
            ground_truth,
            config.match_distance,
        )?;
        cache.insert(k, r.clone());
        Ok(r)
    };

    let n = config.n_recall;
    let mut points = Vec::with_capacity(n);
    for step in 1..=n {
        let target = step as f64 / n as f64;
        // Recall is non-decreasing as the threshold drops, so the first
        // threshold index reaching the target can be bisected.
        let reached = |r: &ClearMot| r.tp as f64 >= target * r.gt as f64 - 1e-9;
        let found = if thresholds.is_empty() || !reached(&at(thresholds.len() - 1)?) {
            None
        } else {
            let (mut lo, mut hi) = (0, thresholds.len() - 1);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if reached(&at(mid)?) {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            Some(lo)
        };
        points.push(match found {
            Some(k) => {
                let r = at(k)?;
                RecallPoint {
                    target_recall: target,
                    threshold: Some(thresholds[k]),
                    recall: r.recall(),
                    motar: motar(r.ids, r.fp, r.fn_, r.gt, r.recall())?,
                    motp: r.motp(),
                }
            }
            None => RecallPoint {
                target_recall: target,
                threshold: None,
                recall: 0.0,
                motar: 0.0,
                motp: config.match_distance,
            },
        });
    }
    let mean = |f: fn(&RecallPoint) -> f64| points.iter().map(f).sum::<f64>() / n as f64;
    Ok(RecallSweep {
        amota: mean(|p| p.motar),
        amotp: mean(|p| p.motp),
        points,
    })
}

/// Every reported metric, keyed by its conventional name in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct MotReport {
    pub amota: f64,
    pub amotp: f64,
    pub mota: f64,
    pub motp: f64,
    pub recall: f64,
    pub ids: usize,
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    pub gt: usize,
    pub mt: usize,
    pub ml: usize,
    #[serde(rename = "MOTAR")]
    pub motar_per_recall: Vec<RecallPoint>,
}

impl MotReport {
    pub fn compute(
        predictions: &[TrackRecord],
        ground_truth: &[TrackRecord],
        config: &EvalConfig,
    ) -> Result<Self> {
        let c = clear_mot(predictions, ground_truth, config)?;
        let sweep = amota(predictions, ground_truth, config)?;
        Ok(Self {
            amota: sweep.amota,
            amotp: sweep.amotp,
            mota: c.mota(),
            motp: c.motp(),
            recall: c.recall(),
            ids: c.ids,
            fp: c.fp,
            fn_: c.fn_,
            gt: c.gt,
            mt: c.mt,
            ml: c.ml,
            motar_per_recall: sweep.points,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 11] = [
            ("AMOTA", format!("{:.4}", self.amota)),
            ("AMOTP (m)", format!("{:.4}", self.amotp)),
            ("MOTA", format!("{:.4}", self.mota)),
            ("MOTP (m)", format!("{:.4}", self.motp)),
            ("RECALL", format!("{:.4}", self.recall)),
            ("IDS", self.ids.to_string()),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("GT", self.gt.to_string()),
            ("MT", self.mt.to_string()),
            ("ML", self.ml.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<10} {v:>10}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Category;

    fn rec(scene: &str, frame: i64, id: u64, x: f64, score: f64) -> TrackRecord {
        TrackRecord {
            scene: scene.into(),
            frame,
            track_id: id,
            bbox: BBox3D {
                position: [x, 0.0, 0.0],
                theta: 0.0,
                size: [1.0, 1.0, 1.0],
                category: Category::Car,
                score,
            },
        }
    }

    fn two_objects(frames: i64) -> Vec<TrackRecord> {
        (0..frames)
            .flat_map(|f| [rec("s", f, 0, 0.0, 1.0), rec("s", f, 1, 50.0, 1.0)])
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let gt = two_objects(6);
        let c = clear_mot(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!((c.fp, c.fn_, c.ids, c.tp, c.gt), (0, 0, 0, 12, 12));
        assert_eq!(c.motp(), 0.0);
        assert_eq!((c.mt, c.ml), (2, 0));
        let r = amota(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.amota, 1.0);
    }

    #[test]
    fn empty_predictions() {
        let gt = two_objects(6);
        let r = amota(&[], &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.amota, 0.0);
        assert_eq!(r.amotp, 2.0);
        let c = clear_mot(&[], &gt, &EvalConfig::default()).unwrap();
        assert_eq!((c.fn_, c.ml), (12, 2));
    }

    #[test]
    fn split_track_counts_one_switch() {
        let gt: Vec<_> = (0..10).map(|f| rec("s", f, 0, f as f64, 1.0)).collect();
        let pred: Vec<_> = (0..10)
            .map(|f| rec("s", f, u64::from(f >= 5), f as f64 + 0.1, 1.0))
            .collect();
        let c = clear_mot(&pred, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(c.ids, 1);
        assert!((c.motp() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn hand_counted_false_positives_and_negatives() {
        let gt: Vec<_> = (0..10)
            .map(|k| rec("s", 0, k, 10.0 * k as f64, 1.0))
            .collect();
        let mut pred: Vec<_> = (0..5)
            .map(|k| rec("s", 0, k, 10.0 * k as f64 + 0.5, 1.0))
            .collect();
        pred.push(rec("s", 0, 99, 500.0, 1.0));
        let c = clear_mot(&pred, &gt, &EvalConfig::default()).unwrap();
        assert_eq!((c.fn_, c.fp, c.tp), (5, 1, 5));
    }

    #[test]
    fn motar_examples() {
        assert_eq!(motar(0, 0, 0, 10, 1.0).unwrap(), 1.0);
        assert_eq!(motar(0, 1, 5, 10, 0.5).unwrap(), 0.8);
        assert_eq!(motar(10, 10, 10, 10, 0.5).unwrap(), 0.0);
        assert!(matches!(motar(0, 0, 0, 0, 1.0), Err(Error::Input(_))));
        assert!(motar(0, 0, 0, 5, 0.0).is_err());
    }

    #[test]
    fn motar_is_non_increasing_in_each_error_count() {
        for base in 0..6 {
            for r in [0.25, 0.5, 1.0] {
                let m = motar(base, base, base, 20, r).unwrap();
                assert!(motar(base + 1, base, base, 20, r).unwrap() <= m);
                assert!(motar(base, base + 1, base, 20, r).unwrap() <= m);
                assert!(motar(base, base, base + 1, 20, r).unwrap() <= m);
            }
        }
    }

    #[test]
    fn half_tracked_scene_averages_the_reachable_recall() {
        let gt = two_objects(4);
        let pred: Vec<_> = (0..4).map(|f| rec("s", f, 7, 0.0, 0.9)).collect();
        let cfg = EvalConfig {
            n_recall: 2,
            ..EvalConfig::default()
        };
        let r = amota(&pred, &gt, &cfg).unwrap();
        let m_half = motar(0, 0, 4, 8, 0.5).unwrap();
        assert_eq!(m_half, 1.0);
        assert_eq!(r.points[1].threshold, None);
        assert_eq!(r.amota, m_half / 2.0);
    }

    #[test]
    fn low_score_false_positives_are_cut_by_the_sweep() {
        let gt = two_objects(5);
        let mut pred = gt.clone();
        pred.extend((0..5).map(|f| rec("s", f, 9, 25.0, 0.2)));
        let cfg = EvalConfig::default();
        let r = amota(&pred, &gt, &cfg).unwrap();
        assert_eq!(r.amota, 1.0);
        let c = clear_mot(&pred, &gt, &cfg).unwrap();
        assert!((c.mota() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_errors() {
        let gt = two_objects(3);
        assert!(matches!(
            clear_mot(&[rec("other", 0, 0, 0.0, 1.0)], &gt, &EvalConfig::default()),
            Err(Error::Input(_))
        ));
        assert!(clear_mot(&[rec("s", 3, 0, 0.0, 1.0)], &gt, &EvalConfig::default()).is_err());
        assert!(amota(&[], &[], &EvalConfig::default()).is_err());
    }

    #[test]
    fn report_json_has_every_field() {
        let gt = two_objects(3);
        let rep = MotReport::compute(&gt, &gt, &EvalConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for k in [
            "AMOTA", "AMOTP", "MOTA", "MOTP", "RECALL", "IDS", "FP", "FN", "GT", "MT", "ML",
            "MOTAR",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(rep.to_table().contains("AMOTA"));
    }
}
