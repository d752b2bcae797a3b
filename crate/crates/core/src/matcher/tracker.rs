use serde::{Deserialize, Serialize};

use super::{hungarian, AffinityMatrix};
use crate::bank::FeatureBank;
use crate::error::{Error, Result};
use crate::model::MomaModel;
use crate::motion::{conditioned_states, distance, BBox3D, Category, MotionState};
use crate::nn::Graph;
use crate::scalar::Scalar;

/// How detections are scored against live tracklets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Association {
    /// Learned affinity with Hungarian assignment.
    #[default]
    Learned,
    /// Distance to a constant-velocity prediction, Hungarian assignment.
    OutputSpace,
    /// Distance to the latest position, greedy nearest-first assignment.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Pairs are accepted only with affinity strictly above this.
    pub match_threshold: f64,
    pub birth_threshold: f64,
    /// A tracklet unmatched for more than this many steps is terminated.
    pub max_misses: u32,
    pub bank_capacity: usize,
    pub bank_depth: usize,
    pub association: Association,
    /// Distance in meters at which the distance-based affinities reach 0.5.
    pub gate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.5,
            birth_threshold: 0.3,
            max_misses: 10,
            bank_capacity: 50,
            bank_depth: 10,
            association: Association::Learned,
            gate: 5.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.match_threshold) {
            return Err(Error::Config(format!(
                "match_threshold {} outside [0, 1)",
                self.match_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.birth_threshold) {
            return Err(Error::Config(format!(
                "birth_threshold {} outside [0, 1]",
                self.birth_threshold
            )));
        }
        if !(self.gate > 0.0 && self.gate.is_finite()) {
            return Err(Error::Config(format!(
                "gate {} must be positive",
                self.gate
            )));
        }
        Ok(())
    }
}

/// A live track and where its history lives in the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub track_id: u64,
    pub slot: usize,
    /// Box of the most recent matched detection.
    pub bbox: BBox3D,
    pub latest_frame: i64,
    pub misses: u32,
}

impl Tracklet {
    pub fn category(&self) -> Category {
        self.bbox.category
    }

    pub fn latest_position(&self) -> [f64; 3] {
        self.bbox.position
    }

    pub fn confidence(&self) -> f64 {
        self.bbox.score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedObject {
    pub track_id: u64,
    pub bbox: BBox3D,
    pub score: f64,
}

/// Tracks reported at one frame, sorted by id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackerOutput {
    pub frame: i64,
    pub objects: Vec<TrackedObject>,
}

/// Online tracker state for one sequence.
#[derive(Debug, Clone)]
pub struct Tracker<'m, T: Scalar> {
    model: Option<&'m MomaModel<T>>,
    config: TrackerConfig,
    bank: FeatureBank<T>,
    tracklets: Vec<Tracklet>,
    next_id: u64,
    last_frame: Option<i64>,
    rejected_births: usize,
}

impl<'m, T: Scalar> Tracker<'m, T> {
    /// A tracker using `model` for learned association. Distance-based
    /// associations run without a model.
    pub fn new(model: Option<&'m MomaModel<T>>, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        let channels = match (model, config.association) {
            (Some(m), _) => m.channels(),
            (None, Association::Learned) => {
                return Err(Error::Config("learned association needs a model".into()));
            }
            (None, _) => 1,
        };
        Ok(Self {
            model,
            bank: FeatureBank::new(config.bank_capacity, config.bank_depth, channels)?,
            config,
            tracklets: Vec::new(),
            next_id: 0,
            last_frame: None,
            rejected_births: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Live tracklets in ascending id order.
    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn bank(&self) -> &FeatureBank<T> {
        &self.bank
    }

    /// Births dropped because the bank was full.
    pub fn rejected_births(&self) -> usize {
        self.rejected_births
    }

    /// Associates one frame of detections and advances the track lifecycle.
    pub fn step(&mut self, detections: &[BBox3D], frame: i64) -> Result<TrackerOutput> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::Ordering(format!(
                    "frame {frame} does not follow frame {last}"
                )));
            }
        }
        for d in detections {
            d.validate()?;
        }
        let (n, m) = (detections.len(), self.tracklets.len());

        let (mut aff, pair_features) = match self.config.association {
            Association::Learned => self.learned_affinity(detections, frame)?,
            Association::OutputSpace => (self.distance_affinity(detections, frame, true)?, None),
            Association::Greedy => (self.distance_affinity(detections, frame, false)?, None),
        };
        for (i, d) in detections.iter().enumerate() {
            for (j, t) in self.tracklets.iter().enumerate() {
                if d.category != t.category() {
                    aff.set(i, j, 0.0);
                }
            }
        }
        let candidates = match self.config.association {
            Association::Greedy => greedy(&aff),
            _ => hungarian(&aff.cost(), n, m)?,
        };
        let accepted: Vec<(usize, usize)> = candidates
            .into_iter()
            .filter(|&(i, j)| aff.get(i, j) > self.config.match_threshold)
            .collect();

        let channels = self.bank.channels();
        let mut det_used = vec![false; n];
        let mut track_used = vec![false; m];
        for &(i, j) in &accepted {
            det_used[i] = true;
            track_used[j] = true;
            let feature = match &pair_features {
                Some(f) => f[(i * m + j) * channels..(i * m + j + 1) * channels].to_vec(),
                None => vec![T::zero(); channels],
            };
            let t = &mut self.tracklets[j];
            self.bank
                .push(t.slot, frame, feature, detections[i].position)?;
            t.bbox = detections[i];
            t.latest_frame = frame;
            t.misses = 0;
        }

        let mut objects: Vec<TrackedObject> = Vec::with_capacity(n);
        let mut survivors = Vec::with_capacity(m);
        for (j, mut t) in std::mem::take(&mut self.tracklets).into_iter().enumerate() {
            if track_used[j] {
                objects.push(TrackedObject {
                    track_id: t.track_id,
                    bbox: t.bbox,
                    score: t.confidence(),
                });
                survivors.push(t);
                continue;
            }
            t.misses += 1;
            if t.misses > self.config.max_misses {
                self.bank.release(t.slot)?;
            } else {
                survivors.push(t);
            }
        }
        self.tracklets = survivors;

        let births: Vec<usize> = (0..n)
            .filter(|&i| !det_used[i] && detections[i].score >= self.config.birth_threshold)
            .collect();
        let features = self.birth_features(detections, &births)?;
        for (k, &i) in births.iter().enumerate() {
            let slot = match self.bank.allocate() {
                Ok(s) => s,
                Err(Error::Capacity { capacity }) => {
                    log::warn!(
                        "frame {frame}: feature bank full ({capacity} slots), birth rejected"
                    );
                    self.rejected_births += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            self.bank.push(
                slot,
                frame,
                features[k * channels..(k + 1) * channels].to_vec(),
                detections[i].position,
            )?;
            let t = Tracklet {
                track_id: self.next_id,
                slot,
                bbox: detections[i],
                latest_frame: frame,
                misses: 0,
            };
            self.next_id += 1;
            objects.push(TrackedObject {
                track_id: t.track_id,
                bbox: t.bbox,
                score: t.confidence(),
            });
            self.tracklets.push(t);
        }
        self.last_frame = Some(frame);
        Ok(TrackerOutput { frame, objects })
    }

    fn learned_affinity(
        &self,
        detections: &[BBox3D],
        frame: i64,
    ) -> Result<(AffinityMatrix, Option<Vec<T>>)> {
        let (n, m) = (detections.len(), self.tracklets.len());
        let model = self
            .model
            .ok_or_else(|| Error::Config("learned association needs a model".into()))?;
        if n == 0 || m == 0 {
            return Ok((AffinityMatrix::new(n, m, Vec::new())?, None));
        }
        let slots: Vec<usize> = self.tracklets.iter().map(|t| t.slot).collect();
        let latest: Vec<[f64; 3]> = self
            .tracklets
            .iter()
            .map(Tracklet::latest_position)
            .collect();
        let mut g = Graph::with_params(&model.params);
        let tracks = model
            .transformer
            .encode_bank(&mut g, &self.bank, &slots, frame)?
            .ok_or_else(|| Error::Contract("no tracklet features".into()))?;
        let pairs = model
            .encoder
            .encode_states(&mut g, &conditioned_states(detections, &latest))?;
        let z = model.head.pair_logits(&mut g, pairs, tracks, n, m)?;
        let a = g.sigmoid(z)?;
        let aff = AffinityMatrix::new(n, m, g.value(a).iter().map(|v| v.as_f64()).collect())?;
        Ok((aff, Some(g.value(pairs).to_vec())))
    }

    /// `exp(−ln 2 · (d / gate)²)` from each detection to each tracklet's
    /// latest or constant-velocity predicted position.
    fn distance_affinity(
        &self,
        detections: &[BBox3D],
        frame: i64,
        predict: bool,
    ) -> Result<AffinityMatrix> {
        let mut anchors = Vec::with_capacity(self.tracklets.len());
        for t in &self.tracklets {
            let mut p = t.latest_position();
            let hist = self.bank.history(t.slot)?;
            if predict && hist.len() >= 2 {
                let (a, b) = (&hist[hist.len() - 2], &hist[hist.len() - 1]);
                let dt = (frame - b.frame) as f64 / (b.frame - a.frame) as f64;
                for ((pk, bk), ak) in p.iter_mut().zip(&b.position).zip(&a.position) {
                    *pk += (bk - ak) * dt;
                }
            }
            anchors.push(p);
        }
        let gate = self.config.gate;
        let values = detections
            .iter()
            .flat_map(|d| {
                anchors.iter().map(move |&p| {
                    (-std::f64::consts::LN_2 * (distance(d.position, p) / gate).powi(2)).exp()
                })
            })
            .collect();
        AffinityMatrix::new(detections.len(), anchors.len(), values)
    }

    fn birth_features(&self, detections: &[BBox3D], births: &[usize]) -> Result<Vec<T>> {
        let channels = self.bank.channels();
        match self
            .model
            .filter(|_| !births.is_empty() && self.config.association == Association::Learned)
        {
            Some(model) => {
                let states: Vec<MotionState> = births
                    .iter()
                    .map(|&i| MotionState::stationary(&detections[i]))
                    .collect();
                let mut g = Graph::with_params(&model.params);
                let f = model.encoder.encode_states(&mut g, &states)?;
                Ok(g.value(f).to_vec())
            }
            None => Ok(vec![T::zero(); births.len() * channels]),
        }
    }

    /// Runs [`Tracker::step`] over consecutive frames.
    pub fn run<'a, I>(&mut self, frames: I) -> Result<Vec<TrackerOutput>>
    where
        I: IntoIterator<Item = (i64, &'a [BBox3D])>,
    {
        frames
            .into_iter()
            .map(|(f, dets)| self.step(dets, f))
            .collect()
    }
}

/// Highest-affinity-first assignment; ties go to the lower `(i, j)`.
fn greedy(aff: &AffinityMatrix) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..aff.rows)
        .flat_map(|i| (0..aff.cols).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&a, &b| {
        aff.get(b.0, b.1)
            .total_cmp(&aff.get(a.0, a.1))
            .then(a.cmp(&b))
    });
    let mut row_used = vec![false; aff.rows];
    let mut col_used = vec![false; aff.cols];
    let mut out = Vec::new();
    for (i, j) in order {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;

    fn det(x: f64, y: f64, category: Category, score: f64) -> BBox3D {
        BBox3D {
            position: [x, y, 0.0],
            theta: 0.0,
            size: [1.5, 1.8, 4.0],
            category,
            score,
        }
    }

    fn small_model() -> MomaModel<f64> {
        MomaModel::new(
            TransformerConfig {
                channels: 8,
                heads: 2,
                ..TransformerConfig::default()
            },
            4,
        )
        .unwrap()
    }

    fn baseline(association: Association) -> TrackerConfig {
        TrackerConfig {
            association,
            ..TrackerConfig::default()
        }
    }

    #[test]
    fn cold_start_births_every_confident_detection() {
        let model = small_model();
        let mut tr = Tracker::new(Some(&model), TrackerConfig::default()).unwrap();
        let dets = [
            det(0.0, 0.0, Category::Car, 0.9),
            det(10.0, 0.0, Category::Car, 0.5),
            det(0.0, 10.0, Category::Pedestrian, 0.3),
            det(5.0, 5.0, Category::Car, 0.29),
        ];
        let out = tr.step(&dets, 0).unwrap();
        let ids: Vec<u64> = out.objects.iter().map(|o| o.track_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(tr.bank().occupied_count(), 3);
        assert!(matches!(tr.step(&dets, 0), Err(Error::Ordering(_))));
    }

    #[test]
    fn affinity_of_exactly_one_half_is_rejected() {
        let mut model = small_model();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
        let mut tr = Tracker::new(Some(&model), TrackerConfig::default()).unwrap();
        let d = [det(1.0, 1.0, Category::Car, 0.9)];
        tr.step(&d, 0).unwrap();
        let out = tr.step(&d, 1).unwrap();
        assert_eq!(out.objects.len(), 1);
        assert_eq!(out.objects[0].track_id, 1);
        assert_eq!(tr.tracklets().len(), 2);
        assert_eq!(tr.tracklets()[0].misses, 1);
    }

    #[test]
    fn categories_never_match_across() {
        for association in [Association::Greedy, Association::OutputSpace] {
            let mut tr = Tracker::<f64>::new(None, baseline(association)).unwrap();
            tr.step(&[det(0.0, 0.0, Category::Car, 0.9)], 0).unwrap();
            let out = tr.step(&[det(0.1, 0.0, Category::Truck, 0.9)], 1).unwrap();
            assert_eq!(out.objects[0].track_id, 1);
        }
    }

    #[test]
    fn lifecycle_retains_ten_misses_and_terminates_on_eleven() {
        for gap in [10i64, 11] {
            let mut tr = Tracker::<f64>::new(None, baseline(Association::Greedy)).unwrap();
            tr.step(&[det(0.0, 0.0, Category::Car, 0.9)], 0).unwrap();
            for f in 1..=gap {
                tr.step(&[], f).unwrap();
            }
            let out = tr
                .step(&[det(0.5, 0.0, Category::Car, 0.9)], gap + 1)
                .unwrap();
            let expected = if gap == 10 { 0 } else { 1 };
            assert_eq!(out.objects[0].track_id, expected, "gap {gap}");
            assert_eq!(tr.bank().occupied_count(), 1);
        }
    }

    #[test]
    fn output_space_follows_constant_velocity_through_a_crossing() {
        let mut tr = Tracker::<f64>::new(None, baseline(Association::OutputSpace)).unwrap();
        let mut ids = Vec::new();
        for f in 0..12 {
            let x = f as f64 * 2.0 - 11.0;
            let out = tr
                .step(
                    &[
                        det(x, 0.0, Category::Car, 0.9),
                        det(-x, 0.3, Category::Car, 0.9),
                    ],
                    f,
                )
                .unwrap();
            ids.push(
                out.objects
                    .iter()
                    .map(|o| (o.track_id, o.bbox.position[0]))
                    .collect::<Vec<_>>(),
            );
        }
        for frame in &ids[1..] {
            for &(id, x) in frame {
                let first = ids[0].iter().find(|o| o.0 == id).expect("no new ids");
                assert_eq!((x - first.1 > 0.0), first.1 < 0.0);
            }
        }
    }

    #[test]
    fn full_bank_rejects_births() {
        let mut tr = Tracker::<f64>::new(
            None,
            TrackerConfig {
                bank_capacity: 2,
                ..baseline(Association::Greedy)
            },
        )
        .unwrap();
        let dets: Vec<_> = (0..3)
            .map(|k| det(20.0 * k as f64, 0.0, Category::Car, 0.9))
            .collect();
        let out = tr.step(&dets, 0).unwrap();
        assert_eq!(out.objects.len(), 2);
        assert_eq!(tr.rejected_births(), 1);
    }

    #[test]
    fn learned_tracking_is_deterministic_and_one_to_one() {
        let model = small_model();
        let frames: Vec<Vec<BBox3D>> = (0..8)
            .map(|f| {
                (0..4)
                    .map(|k| {
                        det(
                            k as f64 * 3.0 + f as f64 * 0.5,
                            k as f64,
                            Category::Car,
                            0.8,
                        )
                    })
                    .collect()
            })
            .collect();
        let run = || {
            let mut tr = Tracker::new(Some(&model), TrackerConfig::default()).unwrap();
            tr.run(
                frames
                    .iter()
                    .enumerate()
                    .map(|(f, d)| (f as i64, d.as_slice())),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        for out in &a {
            let mut ids: Vec<u64> = out.objects.iter().map(|o| o.track_id).collect();
            let len = ids.len();
            ids.dedup();
            assert_eq!(ids.len(), len);
        }
    }

    #[test]
    fn learned_association_requires_a_model() {
        assert!(Tracker::<f64>::new(None, TrackerConfig::default()).is_err());
    }
}
