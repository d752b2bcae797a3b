//! Learning the matcher from labeled scenes.
//!
//! Each training sample is one frame of one scene: the identities seen
//! recently become tracklets whose histories are built from their labeled
//! (noisy) detections, and the frame's detections are scored against them
//! with a focal loss. Pairs of random sub-trajectories of the same
//! identities are pulled together by a supervised contrastive loss.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MomaModel;
use crate::motion::{relative_movement, state_matrix, BBox3D, MotionState, STATE_DIM};
use crate::nn::{AdamConfig, AdamState, Checkpoint, ContrastiveGroup, Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::simulator::GroundTruthScene;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied every `decay_every` epochs.
    pub decay_rate: f64,
    pub decay_every: usize,
    pub tracklets_per_sample: usize,
    pub detections_per_sample: usize,
    /// Sub-trajectories drawn per identity for the contrastive loss.
    pub k: usize,
    pub tau: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the contrastive loss; 0 disables it.
    pub contrastive_weight: f64,
    /// Identities unseen for more than this many frames are not tracklets.
    pub max_misses: i64,
    /// Caps the samples visited per epoch; `None` visits all of them.
    pub samples_per_epoch: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-4,
            decay_rate: 0.5,
            decay_every: 20,
            tracklets_per_sample: 16,
            detections_per_sample: 16,
            k: 2,
            tau: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            contrastive_weight: 1.0,
            max_misses: 10,
            samples_per_epoch: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("decay_every", self.decay_every),
            ("tracklets_per_sample", self.tracklets_per_sample),
            ("detections_per_sample", self.detections_per_sample),
            ("k", self.k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let positive = [
            ("lr", self.lr),
            ("decay_rate", self.decay_rate),
            ("tau", self.tau),
            ("focal_alpha", self.focal_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.focal_gamma >= 0.0 && self.contrastive_weight >= 0.0) {
            return Err(Error::Config(
                "focal_gamma and contrastive_weight must be non-negative".into(),
            ));
        }
        if self.max_misses < 0 {
            return Err(Error::Config("max_misses must be non-negative".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_rate.powi((epoch / self.decay_every) as i32)
    }
}

/// Mean of `σ`-space binary focal loss over all entries.
///
/// Probabilities are clamped into `[ε, 1 − ε]` before taking logarithms.
pub fn focal_loss(a: &[f64], a_hat: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    if a.len() != a_hat.len() {
        return Err(Error::shape("focal_loss", &[a.len()], &[a_hat.len()]));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .iter()
        .zip(a_hat)
        .map(|(&p, &y)| crate::nn::focal_probs(p, y, alpha, gamma).0)
        .sum();
    Ok(total / a.len() as f64)
}

/// Supervised contrastive loss of the rows of `embeddings` (normalized
/// first), where rows sharing a label are positives of each other.
pub fn contrastive_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    tau: f64,
) -> Result<T> {
    let mut g = Graph::new();
    let x = g.input(embeddings.clone());
    let e = g.l2_normalize_rows(x);
    let groups = [ContrastiveGroup {
        start: 0,
        labels: labels.to_vec(),
        weight: T::one(),
    }];
    let l = g.contrastive(e, &groups, T::of(tau))?;
    Ok(g.scalar_value(l))
}

/// Motion states of a sequence of boxes, each relative to the one before
/// it; the first is relative to `previous` or stationary.
fn chain_states(boxes: &[(i64, BBox3D)], previous: Option<[f64; 3]>) -> Vec<MotionState> {
    let mut prev = previous;
    boxes
        .iter()
        .map(|(_, b)| {
            let s = match prev {
                Some(p) => MotionState::new(relative_movement(b.position, p), b),
                None => MotionState::stationary(b),
            };
            prev = Some(b.position);
            s
        })
        .collect()
}

/// A tracklet's stored window as the tracker would hold it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletHistory {
    pub track_id: u64,
    pub frames: Vec<i64>,
    pub states: Vec<MotionState>,
    pub latest_position: [f64; 3],
}

/// A contiguous run of one identity's detections, viewed from the frame
/// after its last entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectory {
    /// Index of the tracklet it was drawn from.
    pub label: usize,
    pub frames: Vec<i64>,
    pub states: Vec<MotionState>,
    pub current_frame: i64,
    pub last_position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSample {
    pub scene: String,
    pub frame: i64,
    pub tracklets: Vec<TrackletHistory>,
    pub detections: Vec<BBox3D>,
    /// `N × M` ground-truth affinity, detection-major.
    pub affinity: Vec<f64>,
    /// `k` draws, each one sub-trajectory per eligible tracklet.
    pub subtrajectories: Vec<Vec<SubTrajectory>>,
}

type LabeledFrame = (i64, Vec<(BBox3D, Option<u64>)>);

struct SceneIndex {
    name: String,
    tracks: BTreeMap<u64, Vec<(i64, BBox3D)>>,
    frames: Vec<LabeledFrame>,
}

/// Labeled scenes indexed for sampling.
pub struct TrainingSet {
    scenes: Vec<SceneIndex>,
    samples: Vec<(usize, usize)>,
    max_misses: i64,
}

impl TrainingSet {
    /// Indexes every frame that has at least one detection and one live
    /// identity behind it.
    pub fn new(scenes: &[GroundTruthScene], max_misses: i64) -> Result<Self> {
        let mut indexed = Vec::with_capacity(scenes.len());
        let mut samples = Vec::new();
        let mut has_long_track = false;
        for (si, scene) in scenes.iter().enumerate() {
            let mut tracks: BTreeMap<u64, Vec<(i64, BBox3D)>> = BTreeMap::new();
            let mut frames: Vec<_> = scene
                .frames
                .iter()
                .map(|f| {
                    (
                        f.frame,
                        f.detections
                            .iter()
                            .map(|d| (d.bbox, d.true_id))
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            frames.sort_by_key(|f| f.0);
            for (frame, dets) in &frames {
                for (b, id) in dets {
                    if let Some(id) = id {
                        tracks.entry(*id).or_default().push((*frame, *b));
                    }
                }
            }
            has_long_track |= tracks.values().any(|t| t.len() >= 2);
            let idx = SceneIndex {
                name: scene.name.clone(),
                tracks,
                frames,
            };
            for fi in 0..idx.frames.len() {
                let t = idx.frames[fi].0;
                if !idx.frames[fi].1.is_empty() && idx.live(t, max_misses).next().is_some() {
                    samples.push((si, fi));
                }
            }
            indexed.push(idx);
        }
        if !has_long_track || samples.is_empty() {
            return Err(Error::Dataset(
                "no scene has an identity detected in two frames with a later detection to match"
                    .into(),
            ));
        }
        Ok(Self {
            scenes: indexed,
            samples,
            max_misses,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(scene, frame index)` of every usable sample.
    pub fn sample_refs(&self) -> &[(usize, usize)] {
        &self.samples
    }

    /// Builds one sample, subsampling tracklets and detections.
    pub fn sample<R: Rng>(
        &self,
        at: (usize, usize),
        window: usize,
        config: &TrainConfig,
        rng: &mut R,
    ) -> MatchSample {
        let scene = &self.scenes[at.0];
        let (t, dets) = &scene.frames[at.1];
        let t = *t;
        let mut live: Vec<(u64, &[(i64, BBox3D)])> = scene.live(t, self.max_misses).collect();
        if live.len() > config.tracklets_per_sample {
            let mut keep = index::sample(rng, live.len(), config.tracklets_per_sample).into_vec();
            keep.sort_unstable();
            live = keep.into_iter().map(|i| live[i]).collect();
        }
        let tracklets: Vec<TrackletHistory> = live
            .iter()
            .map(|&(id, past)| {
                let start = past.len().saturating_sub(window);
                let previous = start.checked_sub(1).map(|p| past[p].1.position);
                TrackletHistory {
                    track_id: id,
                    frames: past[start..].iter().map(|e| e.0).collect(),
                    states: chain_states(&past[start..], previous),
                    latest_position: past[past.len() - 1].1.position,
                }
            })
            .collect();

        let mut chosen: Vec<usize> = (0..dets.len()).collect();
        if dets.len() > config.detections_per_sample {
            chosen = index::sample(rng, dets.len(), config.detections_per_sample).into_vec();
            chosen.sort_unstable();
        }
        let detections: Vec<BBox3D> = chosen.iter().map(|&i| dets[i].0).collect();
        let affinity = chosen
            .iter()
            .flat_map(|&i| {
                let id = dets[i].1;
                tracklets
                    .iter()
                    .map(move |tr| f64::from(u8::from(id == Some(tr.track_id))))
            })
            .collect();

        let mut subtrajectories = Vec::with_capacity(config.k);
        for _ in 0..config.k {
            let mut draw = Vec::new();
            for (label, tr) in tracklets.iter().enumerate() {
                let all = &scene.tracks[&tr.track_id];
                if all.len() < 2 {
                    continue;
                }
                let len = rng.gen_range(2..=window.max(2).min(all.len()));
                let off = rng.gen_range(0..=all.len() - len);
                let run = &all[off..off + len];
                draw.push(SubTrajectory {
                    label,
                    frames: run.iter().map(|e| e.0).collect(),
                    states: chain_states(run, None),
                    current_frame: run[len - 1].0 + 1,
                    last_position: run[len - 1].1.position,
                });
            }
            subtrajectories.push(draw);
        }
        MatchSample {
            scene: scene.name.clone(),
            frame: t,
            tracklets,
            detections,
            affinity,
            subtrajectories,
        }
    }

    /// A batch of samples drawn uniformly with replacement.
    pub fn sample_batch<R: Rng>(
        &self,
        size: usize,
        window: usize,
        config: &TrainConfig,
        rng: &mut R,
    ) -> Vec<MatchSample> {
        (0..size)
            .map(|_| {
                let at = self.samples[rng.gen_range(0..self.samples.len())];
                self.sample(at, window, config, rng)
            })
            .collect()
    }
}

impl SceneIndex {
    /// Identities with a detection before `t` and within the retention
    /// horizon, each with its detections before `t`.
    fn live(&self, t: i64, max_misses: i64) -> impl Iterator<Item = (u64, &[(i64, BBox3D)])> + '_ {
        self.tracks.iter().filter_map(move |(&id, dets)| {
            let n = dets.partition_point(|e| e.0 < t);
            (n > 0 && dets[n - 1].0 >= t - 1 - max_misses).then(|| (id, &dets[..n]))
        })
    }
}

/// The objective recorded on a graph, with its two terms as plain numbers.
pub struct BatchLoss {
    pub total: Var,
    /// Matching logits of every pair, sample after sample, detection-major.
    pub logits: Var,
    /// Mean over samples of the matching loss.
    pub match_loss: f64,
    /// Mean over samples of the contrastive loss, before weighting.
    pub contrastive_loss: f64,
}

#[derive(Default)]
struct Packed {
    gaps: Vec<i64>,
    spans: Vec<(usize, usize)>,
    positions: Vec<f64>,
    groups: Vec<(usize, usize)>,
}

impl Packed {
    fn push(
        &mut self,
        states: &mut Vec<MotionState>,
        own: &[MotionState],
        frames: &[i64],
        current: i64,
        position: [f64; 3],
    ) {
        self.spans.push((self.gaps.len(), own.len()));
        self.gaps.extend(frames.iter().map(|f| current - f));
        self.positions.extend(position);
        states.extend_from_slice(own);
    }
}

/// `ℒ_match + λ·ℒ_con` averaged over the samples of `batch`.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &MomaModel<T>,
    batch: &[MatchSample],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let b = batch.len() as f64;
    let use_con = config.contrastive_weight > 0.0;
    let mut states: Vec<MotionState> = Vec::new();

    let mut win = Packed::default();
    for s in batch {
        let start = win.spans.len();
        for tr in &s.tracklets {
            win.push(
                &mut states,
                &tr.states,
                &tr.frames,
                s.frame,
                tr.latest_position,
            );
        }
        win.groups.push((start, s.tracklets.len()));
    }
    let win_rows = states.len();

    let mut track_rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut offset = 0;
    for s in batch {
        let (n, m) = (s.detections.len(), s.tracklets.len());
        if s.affinity.len() != n * m {
            return Err(Error::shape("match_sample", &[n, m], &[s.affinity.len()]));
        }
        let w = T::of(1.0 / (n * m) as f64 / b);
        for d in &s.detections {
            for (j, tr) in s.tracklets.iter().enumerate() {
                states.push(MotionState::between(d, tr.latest_position));
                track_rows.push(offset + j);
                weights.push(w);
            }
        }
        targets.extend(s.affinity.iter().map(|&a| T::of(a)));
        offset += m;
    }
    let pair_rows = states.len();

    let mut sub = Packed::default();
    let mut con_groups = Vec::new();
    if use_con {
        for s in batch {
            let first = sub.spans.len();
            let mut labels = Vec::new();
            for draw in &s.subtrajectories {
                let start = sub.spans.len();
                for st in draw {
                    sub.push(
                        &mut states,
                        &st.states,
                        &st.frames,
                        st.current_frame,
                        st.last_position,
                    );
                    labels.push(st.label);
                }
                if sub.spans.len() > start {
                    sub.groups.push((start, sub.spans.len() - start));
                }
            }
            if !labels.is_empty() {
                con_groups.push(ContrastiveGroup {
                    start: first,
                    labels,
                    weight: T::of(1.0 / b),
                });
            }
        }
    }

    if win_rows == 0 || pair_rows == win_rows {
        return Err(Error::Contract(
            "batch has no tracklet-detection pairs".into(),
        ));
    }
    let x = g.input_matrix(states.len(), STATE_DIM, state_matrix::<T>(&states)?)?;
    let f = model.encoder.forward(g, x)?;
    let range = |a: usize, z: usize| (a..z).collect::<Vec<_>>();

    let win_feats = g.gather_rows(f, &range(0, win_rows))?;
    let pos = g.input_matrix(
        win.spans.len(),
        3,
        win.positions.iter().map(|&v| T::of(v)).collect(),
    )?;
    let tracks = model
        .transformer
        .encode(g, win_feats, &win.gaps, &win.spans, pos, &win.groups)?;
    let pair_feats = g.gather_rows(f, &range(win_rows, pair_rows))?;
    let z = model.head.logits(g, pair_feats, tracks, &track_rows)?;
    let alpha = T::of(config.focal_alpha);
    let gamma = T::of(config.focal_gamma);
    let fl = g.focal_loss_logits(z, &targets, alpha, gamma)?;
    let lm = g.weighted_sum(fl, weights)?;
    let match_loss = g.scalar_value(lm).as_f64();

    if con_groups.is_empty() {
        return Ok(BatchLoss {
            total: lm,
            logits: z,
            match_loss,
            contrastive_loss: 0.0,
        });
    }
    let sub_feats = g.gather_rows(f, &range(pair_rows, states.len()))?;
    let sub_pos = g.input_matrix(
        sub.spans.len(),
        3,
        sub.positions.iter().map(|&v| T::of(v)).collect(),
    )?;
    let emb =
        model
            .transformer
            .encode(g, sub_feats, &sub.gaps, &sub.spans, sub_pos, &sub.groups)?;
    let emb = g.l2_normalize_rows(emb);
    let lc = g.contrastive(emb, &con_groups, T::of(config.tau))?;
    let contrastive_loss = g.scalar_value(lc).as_f64();
    let lc = g.scale(lc, T::of(config.contrastive_weight));
    let total = g.add(lm, lc)?;
    Ok(BatchLoss {
        total,
        logits: z,
        match_loss,
        contrastive_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub match_loss: f64,
    pub contrastive_loss: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.17e} {:.17e} {:e}",
            self.epoch, self.match_loss, self.contrastive_loss, self.lr
        )
    }
}

/// Header line of the plain-text loss log.
pub const LOSS_LOG_HEADER: &str = "# epoch L_match L_con lr";

pub fn format_loss_log(log: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

/// Model, optimizer state and schedule position of a training run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: MomaModel<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_config: TransformerConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = MomaModel::new(model_config, seed)?;
        let adam = AdamState::new(&model.params, config.adam);
        Ok(Self {
            model,
            adam,
            config,
            seed,
            epoch: 0,
            log: Vec::new(),
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// One pass over (a shuffled prefix of) the training samples.
    pub fn train_epoch(&mut self, data: &TrainingSet) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order = data.sample_refs().to_vec();
        order.shuffle(&mut rng);
        if let Some(limit) = self.config.samples_per_epoch {
            order.truncate(limit.max(1));
        }
        let window = self.model.config().window;
        let (mut lm, mut lc) = (0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<MatchSample> = chunk
                .iter()
                .map(|&at| data.sample(at, window, &self.config, &mut rng))
                .collect();
            let grads = {
                let mut g = Graph::with_params(&self.model.params);
                let loss = batch_loss(&mut g, &self.model, &batch, &self.config)?;
                if !g.scalar_value(loss.total).is_finite() {
                    let ids: Vec<String> = batch
                        .iter()
                        .map(|s| format!("{}@{}", s.scene, s.frame))
                        .collect();
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}; batch samples: {}",
                        ids.join(", ")
                    )));
                }
                lm += loss.match_loss * batch.len() as f64;
                lc += loss.contrastive_loss * batch.len() as f64;
                g.backward(loss.total)?
            };
            self.model.params.zero_grads();
            self.model.params.accumulate(&grads)?;
            self.adam.step(&mut self.model.params, lr)?;
        }
        let entry = EpochLog {
            epoch,
            match_loss: lm / order.len() as f64,
            contrastive_loss: lc / order.len() as f64,
            lr,
        };
        log::info!("{entry}");
        self.log.push(entry);
        self.epoch += 1;
        Ok(entry)
    }

    /// Trains until `config.epochs`, saving `epoch-NNN.json` into
    /// `checkpoint_dir` after every epoch when given.
    pub fn fit(
        &mut self,
        data: &TrainingSet,
        checkpoint_dir: Option<&Path>,
    ) -> Result<&[EpochLog]> {
        while self.epoch < self.config.epochs {
            self.train_epoch(data)?;
            if let Some(dir) = checkpoint_dir {
                self.checkpoint()
                    .save(&dir.join(format!("epoch-{:03}.json", self.epoch)))?;
            }
        }
        Ok(&self.log)
    }

    /// Model tensors plus optimizer moments and schedule position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta["train"] = serde_json::to_value(&self.config).unwrap_or_default();
        ck.meta["seed"] = self.seed.into();
        ck.meta["epoch"] = self.epoch.into();
        ck.meta["adam_step"] = self.adam.step_count.into();
        ck.meta["log"] = serde_json::to_value(&self.log).unwrap_or_default();
        for id in self.model.params.ids() {
            let name = self.model.params.name(id);
            let shape = self.model.params.get(id).shape();
            for (tag, buf) in [
                ("m", &self.adam.first_moment),
                ("v", &self.adam.second_moment),
            ] {
                let t = Tensor::new(shape, buf[id.index()].clone())
                    .expect("moment matches parameter shape");
                ck.insert(format!("adam.{tag}.{name}"), &t);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| {
            ck.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {key} entry")))
        };
        let parse = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let config: TrainConfig = serde_json::from_value(meta("train")?).map_err(parse)?;
        let seed: u64 = serde_json::from_value(meta("seed")?).map_err(parse)?;
        let epoch: usize = serde_json::from_value(meta("epoch")?).map_err(parse)?;
        let step_count: u64 = serde_json::from_value(meta("adam_step")?).map_err(parse)?;
        let log: Vec<EpochLog> = serde_json::from_value(meta("log")?).map_err(parse)?;

        let model = model_from_checkpoint::<T>(ck)?;
        let mut adam = AdamState::new(&model.params, config.adam);
        adam.step_count = step_count;
        for id in model.params.ids() {
            let name = model.params.name(id);
            let shape = model.params.get(id).shape();
            adam.first_moment[id.index()] = ck
                .tensor::<T>(&format!("adam.m.{name}"), shape)?
                .into_data();
            adam.second_moment[id.index()] = ck
                .tensor::<T>(&format!("adam.v.{name}"), shape)?
                .into_data();
        }
        Ok(Self {
            model,
            adam,
            config,
            seed,
            epoch,
            log,
        })
    }
}

/// The model held in either a model or a training checkpoint.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<MomaModel<T>> {
    if !ck.tensors.keys().any(|k| k.starts_with("adam.")) {
        return MomaModel::from_checkpoint(ck);
    }
    let mut model_only = ck.clone();
    model_only.tensors.retain(|k, _| !k.starts_with("adam."));
    MomaModel::from_checkpoint(&model_only)
}

/// Trains a fresh model on `scenes` and returns it with its loss log.
pub fn train<T: Scalar>(
    scenes: &[GroundTruthScene],
    model_config: TransformerConfig,
    config: TrainConfig,
    seed: u64,
) -> Result<(MomaModel<T>, Vec<EpochLog>)> {
    let data = TrainingSet::new(scenes, config.max_misses)?;
    let mut trainer = Trainer::<T>::new(model_config, config, seed)?;
    trainer.fit(&data, None)?;
    Ok((trainer.model, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use crate::simulator::{generate_dataset, SceneConfig};

    fn scenes(count: usize, objects: usize) -> Vec<GroundTruthScene> {
        generate_dataset(
            &SceneConfig {
                num_objects: objects,
                num_frames: 8,
                seed: 3,
                ..SceneConfig::default()
            },
            count,
        )
        .unwrap()
    }

    #[test]
    fn focal_loss_closed_forms() {
        let v = focal_loss(&[0.5], &[1.0], 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        let exact = focal_loss(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 0.25, 2.0).unwrap();
        assert!(exact.abs() < 1e-12);
        let p = [0.9, 0.2, 0.4];
        let bce = focal_loss(&p, &[1.0; 3], 0.25, 0.0).unwrap();
        let want = -p.iter().map(|x: &f64| 0.25 * x.ln()).sum::<f64>() / 3.0;
        assert!((bce - want).abs() < 1e-12);
        let neg = focal_loss(&p, &[0.0; 3], 0.25, 0.0).unwrap();
        let want = -p.iter().map(|x: &f64| 0.75 * (1.0 - x).ln()).sum::<f64>() / 3.0;
        assert!((neg - want).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_is_symmetric_under_transposition() {
        let a = [0.1, 0.7, 0.3, 0.95, 0.5, 0.05];
        let y = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = |m: &[f64]| -> Vec<f64> {
            (0..3)
                .flat_map(|j| (0..2).map(move |i| m[i * 3 + j]))
                .collect()
        };
        let l = focal_loss(&a, &y, 0.25, 2.0).unwrap();
        let lt = focal_loss(&t(&a), &t(&y), 0.25, 2.0).unwrap();
        assert!((l - lt).abs() < 1e-15);
        assert!(l >= 0.0);
    }

    #[test]
    fn contrastive_closed_forms() {
        let k = 5;
        let emb = Tensor::new(&[k + 1, 3], [0.3, -1.0, 2.0].repeat(k + 1)).unwrap();
        let labels = [0, 0, 0, 1, 1, 1];
        let l = contrastive_loss(&emb, &labels, 0.1).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-9);
        assert!(contrastive_loss(&emb, &(0..k + 1).collect::<Vec<_>>(), 0.1).is_err());

        let base: Tensor<f64> =
            Tensor::new(&[4, 2], vec![1.0, 0.2, 0.9, -0.4, -0.3, 1.0, 0.1, -1.0]).unwrap();
        let lab = [0, 0, 1, 1];
        let scaled = Tensor::new(&[4, 2], base.data().iter().map(|v| v * 7.5).collect()).unwrap();
        let l0 = contrastive_loss(&base, &lab, 0.1).unwrap();
        assert!((l0 - contrastive_loss(&scaled, &lab, 0.1).unwrap()).abs() < 1e-12);
        let mut closer = base.clone();
        closer.data_mut()[2..4].copy_from_slice(&[1.0, 0.0]);
        assert!(contrastive_loss(&closer, &lab, 0.1).unwrap() < l0);
        assert!(l0 >= 0.0);
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(19), 1e-4);
        assert_eq!(c.lr_at(20), 5e-5);
        assert_eq!(c.lr_at(40), 2.5e-5);
    }

    #[test]
    fn samples_are_reproducible_and_one_to_one() {
        let data = TrainingSet::new(&scenes(3, 20), 10).unwrap();
        let cfg = TrainConfig::default();
        let draw = |seed| data.sample_batch(8, 6, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(draw(5), draw(5));
        for s in draw(6) {
            let (n, m) = (s.detections.len(), s.tracklets.len());
            assert!(n <= 16 && m <= 16 && n > 0 && m > 0);
            for i in 0..n {
                assert!((0..m).map(|j| s.affinity[i * m + j]).sum::<f64>() <= 1.0);
            }
            for j in 0..m {
                assert!((0..n).map(|i| s.affinity[i * m + j]).sum::<f64>() <= 1.0);
            }
            assert_eq!(s.subtrajectories.len(), 2);
            for draw in &s.subtrajectories {
                for st in draw {
                    assert!((2..=6).contains(&st.states.len()));
                    assert_eq!(st.states[0].r, [0.0; 3]);
                    assert!(st.frames.windows(2).all(|w| w[0] < w[1]));
                }
            }
            for tr in &s.tracklets {
                assert!(tr.frames.len() <= 6 && *tr.frames.last().unwrap() < s.frame);
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let single = generate_dataset(
            &SceneConfig {
                num_frames: 1,
                ..SceneConfig::default()
            },
            2,
        )
        .unwrap();
        assert!(matches!(
            TrainingSet::new(&single, 10),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn full_objective_passes_gradient_check() {
        let data = TrainingSet::new(&scenes(2, 3), 10).unwrap();
        let cfg = TrainConfig {
            tracklets_per_sample: 3,
            detections_per_sample: 3,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = data.sample_batch(2, 3, &cfg, &mut rng);
        let model = MomaModel::<f64>::new(
            TransformerConfig {
                channels: 16,
                window: 3,
                ..TransformerConfig::default()
            },
            2,
        )
        .unwrap();
        let err = grad_check_params(
            &model.params,
            |g| Ok(batch_loss(g, &model, &batch, &cfg)?.total),
            1e-5,
            Some(6),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_contrastive_weight_drops_the_term() {
        let data = TrainingSet::new(&scenes(2, 5), 10).unwrap();
        let cfg = TrainConfig {
            contrastive_weight: 0.0,
            ..TrainConfig::default()
        };
        let batch = data.sample_batch(3, 6, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let model = MomaModel::<f64>::new(
            TransformerConfig {
                channels: 8,
                heads: 2,
                ..TransformerConfig::default()
            },
            2,
        )
        .unwrap();
        let mut g = Graph::with_params(&model.params);
        let l = batch_loss(&mut g, &model, &batch, &cfg).unwrap();
        assert_eq!(l.contrastive_loss, 0.0);
        assert_eq!(g.scalar_value(l.total), l.match_loss);
    }

    #[test]
    fn loss_log_lines() {
        let log = [EpochLog {
            epoch: 3,
            match_loss: 0.5,
            contrastive_loss: 1.25,
            lr: 1e-4,
        }];
        let text = format_loss_log(&log);
        let line = text.lines().nth(1).unwrap();
        let fields: Vec<f64> = line.split(' ').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields, vec![3.0, 0.5, 1.25, 1e-4]);
    }
}
