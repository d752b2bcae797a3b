//! JSONL wire format shared by every command.
//!
//! Files open with a `#schema=1` line; every further line is one box.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use moma_core::metrics::TrackRecord;
use moma_core::motion::{BBox3D, Category};
use moma_core::simulator::{GroundTruthObject, GroundTruthScene, LabeledDetection, SceneFrame};

use crate::error::CliError;

pub const SCHEMA_HEADER: &str = "#schema=1";

/// One box in global coordinates. Ground-truth and track files also carry
/// `track_id`; simulated files link detections and ground truth through
/// `detection_id`, unique within a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub scene: String,
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub category: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_id: Option<usize>,
}

impl DetectionRecord {
    pub fn new(scene: &str, frame: i64, b: &BBox3D) -> Self {
        Self {
            scene: scene.to_string(),
            frame,
            x: b.position[0],
            y: b.position[1],
            z: b.position[2],
            theta: b.theta,
            h: b.size[0],
            w: b.size[1],
            l: b.size[2],
            category: b.category.as_str().to_string(),
            score: b.score,
            track_id: None,
            detection_id: None,
        }
    }

    pub fn bbox(&self) -> moma_core::Result<BBox3D> {
        let b = BBox3D {
            position: [self.x, self.y, self.z],
            theta: self.theta,
            size: [self.h, self.w, self.l],
            category: self.category.parse::<Category>()?,
            score: self.score,
        };
        b.validate()?;
        Ok(b)
    }

    fn require_track_id(&self) -> Result<u64, CliError> {
        self.track_id.ok_or_else(|| {
            CliError::Data(format!(
                "record for scene {} frame {} has no track_id",
                self.scene, self.frame
            ))
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut header = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("schema=") {
                if v.trim() != "1" {
                    return Err(CliError::Data(format!(
                        "{}: unsupported schema version {v}",
                        path.display()
                    )));
                }
                header = true;
            }
            continue;
        }
        if !header {
            return Err(CliError::Data(format!(
                "{}: missing {SCHEMA_HEADER} header before line {}",
                path.display(),
                i + 1
            )));
        }
        let rec: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.bbox()
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Fails when `path` exists and `force` is off.
pub fn check_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_records(path: &Path, records: &[DetectionRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{SCHEMA_HEADER}")?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Records grouped by scene and then frame, both in ascending order.
pub fn by_scene_frame(
    records: &[DetectionRecord],
) -> BTreeMap<&str, BTreeMap<i64, Vec<&DetectionRecord>>> {
    let mut out: BTreeMap<&str, BTreeMap<i64, Vec<&DetectionRecord>>> = BTreeMap::new();
    for r in records {
        out.entry(r.scene.as_str())
            .or_default()
            .entry(r.frame)
            .or_default()
            .push(r);
    }
    out
}

/// Detection and ground-truth files of a simulated scene.
pub fn scene_records(scene: &GroundTruthScene) -> (Vec<DetectionRecord>, Vec<DetectionRecord>) {
    let mut dets = Vec::new();
    let mut gt = Vec::new();
    for f in &scene.frames {
        for (k, d) in f.detections.iter().enumerate() {
            dets.push(DetectionRecord {
                detection_id: Some(k),
                ..DetectionRecord::new(&scene.name, f.frame, &d.bbox)
            });
        }
        for o in &f.objects {
            let produced = f
                .detections
                .iter()
                .position(|d| d.true_id == Some(o.track_id));
            gt.push(DetectionRecord {
                track_id: Some(o.track_id),
                detection_id: produced,
                ..DetectionRecord::new(&scene.name, f.frame, &o.bbox)
            });
        }
    }
    (dets, gt)
}

/// Rebuilds labeled scenes from a detection file and its ground truth.
pub fn labeled_scenes(
    detections: &[DetectionRecord],
    ground_truth: &[DetectionRecord],
) -> Result<Vec<GroundTruthScene>, CliError> {
    let dets = by_scene_frame(detections);
    let gts = by_scene_frame(ground_truth);
    let mut scenes = Vec::new();
    let names: std::collections::BTreeSet<&str> = dets.keys().chain(gts.keys()).copied().collect();
    for name in names {
        let empty = BTreeMap::new();
        let d = dets.get(name).unwrap_or(&empty);
        let g = gts.get(name).unwrap_or(&empty);
        let frames: std::collections::BTreeSet<i64> = d.keys().chain(g.keys()).copied().collect();
        let mut out = Vec::new();
        for frame in frames {
            let objects: Vec<&DetectionRecord> = g.get(&frame).cloned().unwrap_or_default();
            let mut labels: BTreeMap<usize, u64> = BTreeMap::new();
            for o in &objects {
                if let Some(k) = o.detection_id {
                    labels.insert(k, o.require_track_id()?);
                }
            }
            let detections = d
                .get(&frame)
                .map(|v| v.as_slice())
                .unwrap_or_default()
                .iter()
                .map(|r| {
                    let k = r.detection_id.ok_or_else(|| {
                        CliError::Data(format!(
                            "detection in scene {name} frame {frame} has no detection_id to link it to ground truth"
                        ))
                    })?;
                    Ok(LabeledDetection {
                        bbox: r.bbox()?,
                        true_id: labels.get(&k).copied(),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let objects = objects
                .iter()
                .map(|o| {
                    Ok(GroundTruthObject {
                        track_id: o.require_track_id()?,
                        bbox: o.bbox()?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            out.push(SceneFrame {
                frame,
                objects,
                detections,
            });
        }
        scenes.push(GroundTruthScene {
            name: name.to_string(),
            frames: out,
        });
    }
    Ok(scenes)
}

pub fn track_records(records: &[DetectionRecord]) -> Result<Vec<TrackRecord>, CliError> {
    records
        .iter()
        .map(|r| {
            Ok(TrackRecord {
                scene: r.scene.clone(),
                frame: r.frame,
                track_id: r.require_track_id()?,
                bbox: r.bbox()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use moma_core::simulator::{generate_scene, SceneConfig};

    #[test]
    fn simulated_scene_round_trips_through_records() {
        let scene = generate_scene(&SceneConfig::default(), "s").unwrap();
        let (d, g) = scene_records(&scene);
        let back = labeled_scenes(&d, &g).unwrap();
        assert_eq!(back.len(), 1);
        let mut want = scene.clone();
        want.frames
            .retain(|f| !f.objects.is_empty() || !f.detections.is_empty());
        assert_eq!(back[0], want);
    }

    #[test]
    fn unknown_fields_and_bad_boxes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let good = DetectionRecord::new(
            "s",
            0,
            &generate_scene(&SceneConfig::default(), "s").unwrap().frames[0].objects[0].bbox,
        );
        write_records(&p, std::slice::from_ref(&good)).unwrap();
        assert_eq!(read_records(&p).unwrap(), vec![good.clone()]);

        let line = serde_json::to_string(&good)
            .unwrap()
            .replace("\"score\"", "\"bogus\":1,\"score\"");
        fs::write(&p, format!("{SCHEMA_HEADER}\n{line}\n")).unwrap();
        assert!(matches!(read_records(&p), Err(CliError::Data(_))));

        let bad = DetectionRecord {
            h: -1.0,
            ..good.clone()
        };
        write_records(&p, &[bad]).unwrap();
        assert!(matches!(read_records(&p), Err(CliError::Data(_))));

        fs::write(&p, serde_json::to_string(&good).unwrap()).unwrap();
        let e = read_records(&p).unwrap_err();
        assert!(e.to_string().contains("schema"), "{e}");
    }
}
