//! Glue between simulated scenes, the tracker and the metrics.

use crate::error::Result;
use crate::matcher::{Tracker, TrackerConfig};
use crate::metrics::{EvalConfig, MotReport, TrackRecord};
use crate::model::MomaModel;
use crate::scalar::Scalar;
use crate::simulator::GroundTruthScene;

pub fn ground_truth_records(scene: &GroundTruthScene) -> Vec<TrackRecord> {
    scene
        .frames
        .iter()
        .flat_map(|f| {
            f.objects.iter().map(move |o| TrackRecord {
                scene: scene.name.clone(),
                frame: f.frame,
                track_id: o.track_id,
                bbox: o.bbox,
            })
        })
        .collect()
}

/// Runs a fresh tracker over the scene's detections.
pub fn track_scene<T: Scalar>(
    model: Option<&MomaModel<T>>,
    config: &TrackerConfig,
    scene: &GroundTruthScene,
) -> Result<Vec<TrackRecord>> {
    let mut tracker = Tracker::new(model, config.clone())?;
    let mut out = Vec::new();
    for f in &scene.frames {
        let step = tracker.step(&f.detection_boxes(), f.frame)?;
        out.extend(step.objects.into_iter().map(|o| TrackRecord {
            scene: scene.name.clone(),
            frame: f.frame,
            track_id: o.track_id,
            bbox: o.bbox,
        }));
    }
    Ok(out)
}

/// Tracks every scene and scores the result against its ground truth.
pub fn evaluate_tracker<T: Scalar>(
    model: Option<&MomaModel<T>>,
    tracker: &TrackerConfig,
    scenes: &[GroundTruthScene],
    eval: &EvalConfig,
) -> Result<MotReport> {
    let mut predictions = Vec::new();
    let mut truth = Vec::new();
    for s in scenes {
        predictions.extend(track_scene(model, tracker, s)?);
        truth.extend(ground_truth_records(s));
    }
    MotReport::compute(&predictions, &truth, eval)
}
