use std::fs;
use std::path::Path;

use moma_core::metrics::MotReport;
use moma_core::nn::Checkpoint;
use moma_core::simulator::generate_dataset;
use moma_core::trainer::{format_loss_log, model_from_checkpoint, Trainer, TrainingSet};
use moma_core::{Association, Scalar, Tracker};

use crate::config::{Precision, RunConfig};
use crate::error::CliError;
use crate::records::{
    by_scene_frame, check_writable, labeled_scenes, read_records, scene_records, track_records,
    write_records, DetectionRecord,
};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const LOSS_LOG_FILE: &str = "loss.log";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn simulate(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let det_path = out.join(DETECTIONS_FILE);
    let gt_path = out.join(GROUND_TRUTH_FILE);
    check_writable(&det_path, force)?;
    check_writable(&gt_path, force)?;
    let scenes = generate_dataset(&cfg.scene, cfg.num_scenes)?;
    let (mut dets, mut gt) = (Vec::new(), Vec::new());
    for s in &scenes {
        let (d, g) = scene_records(s);
        dets.extend(d);
        gt.extend(g);
    }
    ensure_dir(out)?;
    write_records(&det_path, &dets)?;
    write_records(&gt_path, &gt)?;
    log::info!(
        "wrote {} scenes: {} detections, {} ground-truth boxes",
        scenes.len(),
        dets.len(),
        gt.len()
    );
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    if !data.is_dir() {
        return Err(CliError::Data(format!(
            "data directory {} not found",
            data.display()
        )));
    }
    let model_path = out.join(MODEL_FILE);
    check_writable(&model_path, force)?;
    let dets = read_records(&data.join(DETECTIONS_FILE))?;
    let gt = read_records(&data.join(GROUND_TRUTH_FILE))?;
    let scenes = labeled_scenes(&dets, &gt)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, &scenes, out, resume),
        Precision::F64 => train_as::<f64>(cfg, &scenes, out, resume),
    }
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    scenes: &[moma_core::simulator::GroundTruthScene],
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::<T>::from_checkpoint(&Checkpoint::load(p)?)?;
            log::info!("resuming from {} after epoch {}", p.display(), t.epoch);
            t
        }
        None => Trainer::<T>::new(cfg.model.clone(), cfg.train.clone(), cfg.seed)?,
    };
    let data = TrainingSet::new(scenes, trainer.config.max_misses)?;
    log::info!(
        "{} training samples from {} scenes",
        data.len(),
        scenes.len()
    );
    ensure_dir(out)?;
    while trainer.epoch < trainer.config.epochs {
        let entry = trainer.train_epoch(&data)?;
        eprintln!("{entry}");
        trainer
            .checkpoint()
            .save(&out.join(format!("epoch-{:03}.json", trainer.epoch)))?;
    }
    trainer.model.save(&out.join(MODEL_FILE))?;
    fs::write(out.join(LOSS_LOG_FILE), format_loss_log(&trainer.log))?;
    Ok(())
}

pub fn track(
    cfg: &RunConfig,
    detections: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<(), CliError> {
    check_writable(out, force)?;
    let model = match (cfg.tracker.association, checkpoint) {
        (Association::Learned, None) => {
            return Err(CliError::Usage(
                "the learned tracker needs --checkpoint (or pass --baseline)".into(),
            ))
        }
        (Association::Learned, Some(p)) => {
            Some(model_from_checkpoint::<f64>(&Checkpoint::load(p)?)?)
        }
        _ => None,
    };
    let records = read_records(detections)?;
    let mut output = Vec::new();
    for (scene, frames) in by_scene_frame(&records) {
        let mut tracker = Tracker::new(model.as_ref(), cfg.tracker.clone())?;
        for (&frame, recs) in &frames {
            let boxes = recs
                .iter()
                .map(|r| r.bbox())
                .collect::<moma_core::Result<Vec<_>>>()?;
            let mut step = tracker.step(&boxes, frame)?;
            step.objects.sort_by_key(|o| o.track_id);
            output.extend(step.objects.iter().map(|o| DetectionRecord {
                track_id: Some(o.track_id),
                ..DetectionRecord::new(scene, frame, &o.bbox)
            }));
        }
        if tracker.rejected_births() > 0 {
            log::warn!(
                "scene {scene}: {} births rejected by a full bank",
                tracker.rejected_births()
            );
        }
    }
    write_records(out, &output)?;
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    tracks: &Path,
    ground_truth: &Path,
    out: Option<&Path>,
    bev_dump: Option<&Path>,
    force: bool,
) -> Result<MotReport, CliError> {
    for p in out.iter().chain(bev_dump.iter()) {
        check_writable(p, force)?;
    }
    let predicted = read_records(tracks)?;
    let truth = read_records(ground_truth)?;
    let report = MotReport::compute(
        &track_records(&predicted)?,
        &track_records(&truth)?,
        &cfg.eval,
    )?;
    if let Some(p) = out {
        let json =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(p, json + "\n")?;
    }
    if let Some(p) = bev_dump {
        let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", p.display()));
        let mut w = csv::Writer::from_path(p).map_err(csv_err)?;
        w.write_record(["source", "scene", "frame", "track_id", "x", "y"])
            .map_err(csv_err)?;
        for (source, recs) in [("track", &predicted), ("gt", &truth)] {
            for r in recs {
                w.serialize((source, &r.scene, r.frame, r.track_id, r.x, r.y))
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(report)
}
