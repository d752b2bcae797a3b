//! Synthetic labeled scenes with monocular-style detection noise.
//!
//! Objects move at constant speed with a constant turn rate in a fixed
//! global frame observed from a static viewpoint. Detections are noisy
//! copies of the true boxes, with most of the position error along the
//! viewing ray, plus dropouts and uniformly placed false positives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{wrap_angle, BBox3D, Category};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Position noise orthogonal to the viewing ray, meters.
    pub sigma_lateral: f64,
    /// Position noise along the viewing ray, meters.
    pub sigma_depth: f64,
    pub sigma_theta: f64,
    /// Relative size noise.
    pub sigma_size: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_lateral: 0.2,
            sigma_depth: 1.0,
            sigma_theta: 0.05,
            sigma_size: 0.05,
        }
    }
}

impl NoiseModel {
    pub const ZERO: NoiseModel = NoiseModel {
        sigma_lateral: 0.0,
        sigma_depth: 0.0,
        sigma_theta: 0.0,
        sigma_size: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub num_frames: usize,
    /// Speed range in meters per frame.
    pub speed_range: [f64; 2],
    /// Turn-rate range in radians per frame.
    pub turn_rate_range: [f64; 2],
    /// Initial positions are drawn from `[-arena, arena]²`.
    pub arena: f64,
    pub noise: NoiseModel,
    pub p_dropout: f64,
    /// Expected false positives per frame, per object slot.
    pub false_positive_rate: f64,
    /// Probability that an object enters after the first frame, and
    /// separately that it leaves before the last.
    pub p_partial_lifespan: f64,
    pub viewpoint_origin: [f64; 3],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 8,
            num_frames: 20,
            speed_range: [0.5, 2.5],
            turn_rate_range: [-0.05, 0.05],
            arena: 25.0,
            noise: NoiseModel::default(),
            p_dropout: 0.1,
            false_positive_rate: 0.05,
            p_partial_lifespan: 0.2,
            viewpoint_origin: [0.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let probabilities = [
            ("p_dropout", self.p_dropout),
            ("false_positive_rate", self.false_positive_rate),
            ("p_partial_lifespan", self.p_partial_lifespan),
        ];
        for (name, p) in probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let sigmas = [
            ("noise.sigma_lateral", self.noise.sigma_lateral),
            ("noise.sigma_depth", self.noise.sigma_depth),
            ("noise.sigma_theta", self.noise.sigma_theta),
            ("noise.sigma_size", self.noise.sigma_size),
        ];
        for (name, s) in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {s} must be finite and non-negative"
                )));
            }
        }
        let [lo, hi] = self.speed_range;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "speed_range {:?} is not an interval",
                self.speed_range
            )));
        }
        let [lo, hi] = self.turn_rate_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config(format!(
                "turn_rate_range {:?} is not an interval",
                self.turn_rate_range
            )));
        }
        if !(self.arena > 0.0 && self.arena.is_finite()) {
            return Err(Error::Config(format!(
                "arena = {} must be positive",
                self.arena
            )));
        }
        if self.num_frames == 0 {
            return Err(Error::Config("num_frames must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub track_id: u64,
    pub bbox: BBox3D,
}

/// A detection with the identity it came from, `None` for false positives.
/// The label is for training and evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    pub bbox: BBox3D,
    pub true_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub frame: i64,
    pub objects: Vec<GroundTruthObject>,
    pub detections: Vec<LabeledDetection>,
}

impl SceneFrame {
    pub fn detection_boxes(&self) -> Vec<BBox3D> {
        self.detections.iter().map(|d| d.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub name: String,
    pub frames: Vec<SceneFrame>,
}

/// Category, relative frequency and mean `(h, w, l)`.
const CATEGORY_PRIORS: [(Category, f64, [f64; 3]); 7] = [
    (Category::Car, 0.45, [1.6, 1.9, 4.6]),
    (Category::Pedestrian, 0.2, [1.75, 0.65, 0.7]),
    (Category::Truck, 0.1, [2.8, 2.5, 6.9]),
    (Category::Bus, 0.05, [3.4, 2.9, 11.0]),
    (Category::Bicycle, 0.07, [1.3, 0.6, 1.8]),
    (Category::Motorcycle, 0.06, [1.5, 0.8, 2.1]),
    (Category::Trailer, 0.07, [3.8, 2.9, 12.0]),
];

fn sample_category<R: Rng>(rng: &mut R) -> (Category, [f64; 3]) {
    let mut u = rng.gen::<f64>();
    for &(c, p, size) in &CATEGORY_PRIORS {
        if u < p {
            return (c, size);
        }
        u -= p;
    }
    let (c, _, size) = CATEGORY_PRIORS[0];
    (c, size)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit viewing ray from `origin` to `p` and two unit vectors orthogonal to it.
pub fn viewing_frame(p: [f64; 3], origin: [f64; 3]) -> [[f64; 3]; 3] {
    let ray = normalize([p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]])
        .unwrap_or([1.0, 0.0, 0.0]);
    let side = normalize(cross(ray, [0.0, 0.0, 1.0])).unwrap_or([0.0, 1.0, 0.0]);
    let up = cross(side, ray);
    [ray, side, up]
}

/// A noisy copy of `true_box` as a monocular detector would report it.
///
/// The score falls from 1 toward 0.4 as the normalized position error grows.
pub fn corrupt<R: Rng>(
    true_box: &BBox3D,
    noise: &NoiseModel,
    rng: &mut R,
    viewpoint_origin: [f64; 3],
) -> BBox3D {
    let [ray, side, up] = viewing_frame(true_box.position, viewpoint_origin);
    let (n_depth, n_side, n_up) = (normal(rng), normal(rng), normal(rng));
    let mut b = *true_box;
    for k in 0..3 {
        b.position[k] += noise.sigma_depth * n_depth * ray[k]
            + noise.sigma_lateral * (n_side * side[k] + n_up * up[k]);
    }
    b.theta = wrap_angle(b.theta + noise.sigma_theta * normal(rng));
    for k in 0..3 {
        let scale = (1.0 + noise.sigma_size * normal(rng)).max(0.1);
        b.size[k] *= scale;
    }
    let mut z2 = 0.0;
    if noise.sigma_depth > 0.0 {
        z2 += n_depth * n_depth;
    }
    if noise.sigma_lateral > 0.0 {
        z2 += n_side * n_side + n_up * n_up;
    }
    b.score = 0.4 + 0.6 * (-z2 / 6.0).exp();
    b
}

struct Trajectory {
    category: Category,
    size: [f64; 3],
    position: [f64; 3],
    heading: f64,
    speed: f64,
    turn_rate: f64,
    first: usize,
    last: usize,
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One scene, fully determined by `config` (including its seed).
pub fn generate_scene(config: &SceneConfig, name: impl Into<String>) -> Result<GroundTruthScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nf = config.num_frames;
    let mut objects: Vec<Trajectory> = (0..config.num_objects)
        .map(|_| {
            let (category, mean) = sample_category(&mut rng);
            let size = mean.map(|s| s * rng.gen_range(0.9..1.1));
            let first = if nf > 2 && rng.gen_bool(config.p_partial_lifespan) {
                rng.gen_range(1..nf / 2 + 1)
            } else {
                0
            };
            let last = if nf > 2 && rng.gen_bool(config.p_partial_lifespan) {
                rng.gen_range(nf / 2..nf).max(first)
            } else {
                nf - 1
            };
            Trajectory {
                category,
                size,
                position: [
                    rng.gen_range(-config.arena..config.arena),
                    rng.gen_range(-config.arena..config.arena),
                    size[0] / 2.0,
                ],
                heading: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                speed: uniform(&mut rng, config.speed_range),
                turn_rate: uniform(&mut rng, config.turn_rate_range),
                first,
                last,
            }
        })
        .collect();
    let fp_count = Binomial::new(config.num_objects as u64, config.false_positive_rate)
        .map_err(|e| Error::Config(format!("false_positive_rate: {e}")))?;

    let mut frames = Vec::with_capacity(nf);
    for t in 0..nf {
        let mut gt = Vec::new();
        let mut detections = Vec::new();
        for (id, obj) in objects.iter_mut().enumerate() {
            if (obj.first..=obj.last).contains(&t) {
                let bbox = BBox3D {
                    position: obj.position,
                    theta: wrap_angle(obj.heading),
                    size: obj.size,
                    category: obj.category,
                    score: 1.0,
                };
                gt.push(GroundTruthObject {
                    track_id: id as u64,
                    bbox,
                });
                if !rng.gen_bool(config.p_dropout) {
                    detections.push(LabeledDetection {
                        bbox: corrupt(&bbox, &config.noise, &mut rng, config.viewpoint_origin),
                        true_id: Some(id as u64),
                    });
                }
            }
            if t >= obj.first {
                obj.position[0] += obj.speed * obj.heading.cos();
                obj.position[1] += obj.speed * obj.heading.sin();
                obj.heading += obj.turn_rate;
            }
        }
        for _ in 0..fp_count.sample(&mut rng) {
            let (category, size) = sample_category(&mut rng);
            let reach = config.arena + config.speed_range[1] * nf as f64 / 2.0;
            detections.push(LabeledDetection {
                bbox: BBox3D {
                    position: [
                        rng.gen_range(-reach..reach),
                        rng.gen_range(-reach..reach),
                        size[0] / 2.0,
                    ],
                    theta: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                    size,
                    category,
                    score: rng.gen_range(0.1..0.6),
                },
                true_id: None,
            });
        }
        detections.shuffle(&mut rng);
        frames.push(SceneFrame {
            frame: t as i64,
            objects: gt,
            detections,
        });
    }
    Ok(GroundTruthScene {
        name: name.into(),
        frames,
    })
}

/// `count` scenes named `scene-0000`, `scene-0001`, …, seeded from
/// `config.seed` onward.
pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<GroundTruthScene>> {
    (0..count)
        .map(|k| {
            let cfg = SceneConfig {
                seed: config.seed.wrapping_add(k as u64),
                ..config.clone()
            };
            generate_scene(&cfg, format!("scene-{k:04}"))
        })
        .collect()
}
