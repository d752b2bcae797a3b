//! Motion states and the motion encoder.
//!
//! A detection's motion state is its displacement from a reference
//! position (a tracklet's latest position) together with its heading and
//! box size. Encoding the state for every detection–tracklet pair gives the
//! tracklet-conditioned motion features used for matching.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Width of a motion state row: `r` (3), heading, `h`, `w`, `l`.
pub const STATE_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Car,
    Pedestrian,
    Bicycle,
    Bus,
    Motorcycle,
    Trailer,
    Truck,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Car,
        Category::Pedestrian,
        Category::Bicycle,
        Category::Bus,
        Category::Motorcycle,
        Category::Trailer,
        Category::Truck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Pedestrian => "pedestrian",
            Category::Bicycle => "bicycle",
            Category::Bus => "bus",
            Category::Motorcycle => "motorcycle",
            Category::Trailer => "trailer",
            Category::Truck => "truck",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown category {s:?}")))
    }
}

/// A 3D box in global coordinates: center, heading and size `(h, w, l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub position: [f64; 3],
    pub theta: f64,
    pub size: [f64; 3],
    pub category: Category,
    pub score: f64,
}

impl BBox3D {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .position
            .iter()
            .chain(&self.size)
            .chain([&self.theta, &self.score])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Input("box has non-finite values".into()));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Input(format!(
                "box size {:?} must be positive",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Input(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Center distance to another box, in meters.
    pub fn distance(&self, other: &BBox3D) -> f64 {
        distance(self.position, other.position)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let r = relative_movement(a, b);
    (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
}

/// One observed box at a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox3D,
    pub frame: i64,
    pub detection_id: usize,
}

/// Displacement and box attributes fed to the motion encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub r: [f64; 3],
    pub theta: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
}

impl MotionState {
    /// State of `bbox` having moved by `r`; the heading is wrapped to (−π, π].
    pub fn new(r: [f64; 3], bbox: &BBox3D) -> Self {
        Self {
            r,
            theta: wrap_angle(bbox.theta),
            h: bbox.size[0],
            w: bbox.size[1],
            l: bbox.size[2],
        }
    }

    /// State of `bbox` relative to a previous position.
    pub fn between(bbox: &BBox3D, previous: [f64; 3]) -> Self {
        Self::new(relative_movement(bbox.position, previous), bbox)
    }

    pub fn stationary(bbox: &BBox3D) -> Self {
        Self::new([0.0; 3], bbox)
    }

    pub fn to_row<T: Scalar>(&self) -> [T; STATE_DIM] {
        [
            T::of(self.r[0]),
            T::of(self.r[1]),
            T::of(self.r[2]),
            T::of(self.theta),
            T::of(self.h),
            T::of(self.w),
            T::of(self.l),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.r
            .iter()
            .chain([&self.theta, &self.h, &self.w, &self.l])
            .all(|v| v.is_finite())
    }
}

/// `p_a − p_b`: the movement from `b` to `a`.
pub fn relative_movement(p_a: [f64; 3], p_b: [f64; 3]) -> [f64; 3] {
    [p_a[0] - p_b[0], p_a[1] - p_b[1], p_a[2] - p_b[2]]
}

/// Maps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Packs states into an `n × 7` row-major matrix.
pub fn state_matrix<T: Scalar>(states: &[MotionState]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(states.len() * STATE_DIM);
    for s in states {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite motion state {s:?}")));
        }
        out.extend_from_slice(&s.to_row::<T>());
    }
    Ok(out)
}

/// States of every observation conditioned on every latest position,
/// detection-major: entry `i·M + j` pairs observation `i` with position `j`.
/// With no positions, each observation gets one zero-movement state.
pub fn conditioned_states(
    observations: &[BBox3D],
    latest_positions: &[[f64; 3]],
) -> Vec<MotionState> {
    if latest_positions.is_empty() {
        return observations.iter().map(MotionState::stationary).collect();
    }
    observations
        .iter()
        .flat_map(|b| {
            latest_positions
                .iter()
                .map(move |&p| MotionState::between(b, p))
        })
        .collect()
}

/// Two-layer MLP `7 → C → C` mapping a motion state to a motion feature.
#[derive(Debug, Clone, Copy)]
pub struct MotionEncoder {
    pub mlp: Mlp,
    pub channels: usize,
}

impl MotionEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "encoder", (STATE_DIM, channels, channels), rng)?,
            channels,
        })
    }

    /// Encodes an `n × 7` state matrix into `n × C` features.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, states: Var) -> Result<Var> {
        self.mlp.forward(g, states)
    }

    /// Records the states as a constant input and encodes them.
    pub fn encode_states<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        states: &[MotionState],
    ) -> Result<Var> {
        let data = state_matrix::<T>(states)?;
        let x = g.input_matrix(states.len(), STATE_DIM, data)?;
        self.forward(g, x)
    }

    pub fn encode_motion<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &MotionState,
    ) -> Result<Vec<T>> {
        let mut g = Graph::with_params(store);
        let f = self.encode_states(&mut g, std::slice::from_ref(state))?;
        Ok(g.value(f).to_vec())
    }

    /// `N × M × C` tracklet-conditioned features (`N × 1 × C` when `M = 0`).
    pub fn tracklet_conditioned_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        observations: &[BBox3D],
        latest_positions: &[[f64; 3]],
    ) -> Result<Tensor<T>> {
        let cols = latest_positions.len().max(1);
        let states = conditioned_states(observations, latest_positions);
        let mut g = Graph::with_params(store);
        let f = self.encode_states(&mut g, &states)?;
        Tensor::new(
            &[observations.len(), cols, self.channels],
            g.value(f).to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bbox(p: [f64; 3]) -> BBox3D {
        BBox3D {
            position: p,
            theta: 0.3,
            size: [1.5, 1.8, 4.2],
            category: Category::Car,
            score: 0.9,
        }
    }

    fn encoder(channels: usize) -> (ParamStore<f64>, MotionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = MotionEncoder::new(&mut store, channels, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn relative_movement_examples() {
        assert_eq!(
            relative_movement([1.0, 2.0, 3.0], [0.0; 3]),
            [1.0, 2.0, 3.0]
        );
        let p = [4.5, -2.0, 0.25];
        assert_eq!(relative_movement(p, p), [0.0; 3]);
    }

    proptest! {
        #[test]
        fn relative_movement_is_antisymmetric(a in prop::array::uniform3(-1e3f64..1e3), b in prop::array::uniform3(-1e3f64..1e3)) {
            let ab = relative_movement(a, b);
            let ba = relative_movement(b, a);
            for k in 0..3 {
                prop_assert_eq!(ab[k], -ba[k]);
            }
        }

        #[test]
        fn wrapped_angles_land_in_half_open_interval(t in -50.0f64..50.0) {
            let w = wrap_angle(t);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            prop_assert!(((w - t) / (2.0 * std::f64::consts::PI)).fract().abs().min(1.0 - ((w - t) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-9);
        }
    }

    #[test]
    fn encode_motion_width_zero_network_and_determinism() {
        let (mut store, enc) = encoder(128);
        let s = MotionState::between(&bbox([3.0, 1.0, 0.5]), [1.0, 1.0, 0.0]);
        let f = enc.encode_motion(&store, &s).unwrap();
        assert_eq!(f.len(), 128);
        assert_eq!(f, enc.encode_motion(&store, &s).unwrap());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        assert!(enc
            .encode_motion(&store, &s)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let (store, enc) = encoder(8);
        let mut s = MotionState::stationary(&bbox([0.0; 3]));
        s.r[1] = f64::INFINITY;
        assert!(matches!(
            enc.encode_motion(&store, &s),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn conditioned_features_shapes() {
        let (store, enc) = encoder(128);
        let obs = [bbox([1.0, 2.0, 0.0]), bbox([5.0, -1.0, 0.0])];
        let latest = [[0.0; 3], [1.0, 1.0, 0.0], [9.0, 9.0, 0.0]];
        let f = enc
            .tracklet_conditioned_features(&store, &obs, &latest)
            .unwrap();
        assert_eq!(f.shape(), &[2, 3, 128]);
        let f0 = enc
            .tracklet_conditioned_features(&store, &obs, &[])
            .unwrap();
        assert_eq!(f0.shape(), &[2, 1, 128]);
        let zero = enc
            .encode_motion(&store, &MotionState::stationary(&obs[1]))
            .unwrap();
        assert_eq!(f0.row(1), &zero[..]);
    }

    #[test]
    fn common_translation_leaves_features_unchanged() {
        let (store, enc) = encoder(32);
        let obs = [bbox([1.25, 2.5, 0.0]), bbox([5.0, -1.75, 0.5])];
        let latest = [[0.5, 0.0, 0.0], [1.0, 1.0, 0.25], [9.0, 9.0, 0.0]];
        let base = enc
            .tracklet_conditioned_features(&store, &obs, &latest)
            .unwrap();
        // Shifts with few mantissa bits keep every coordinate exactly representable.
        for shift in [[64.0, -32.0, 2.0], [-1024.5, 512.25, -8.0]] {
            let moved: Vec<BBox3D> = obs
                .iter()
                .map(|b| BBox3D {
                    position: std::array::from_fn(|k| b.position[k] + shift[k]),
                    ..*b
                })
                .collect();
            let moved_latest: Vec<[f64; 3]> = latest
                .iter()
                .map(|p| std::array::from_fn(|k| p[k] + shift[k]))
                .collect();
            let f = enc
                .tracklet_conditioned_features(&store, &moved, &moved_latest)
                .unwrap();
            assert_eq!(f.data(), base.data());
        }
    }

    #[test]
    fn changing_one_latest_position_touches_one_column() {
        let (store, enc) = encoder(16);
        let obs = [bbox([1.0, 2.0, 0.0]), bbox([5.0, -1.0, 0.0])];
        let mut latest = vec![[0.0; 3], [1.0, 1.0, 0.0], [9.0, 9.0, 0.0]];
        let before = enc
            .tracklet_conditioned_features(&store, &obs, &latest)
            .unwrap();
        latest[1] = [2.0, -3.0, 0.5];
        let after = enc
            .tracklet_conditioned_features(&store, &obs, &latest)
            .unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let same = (0..16).all(|c| before.at(&[i, j, c]) == after.at(&[i, j, c]));
                assert_eq!(same, j != 1, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn encoder_gradients_pass_finite_difference_check() {
        let (store, enc) = encoder(6);
        let states = [
            MotionState::between(&bbox([1.0, 2.0, 0.0]), [0.5, 1.0, 0.0]),
            MotionState::between(&bbox([-3.0, 0.0, 0.2]), [-2.0, 0.4, 0.0]),
        ];
        let err = crate::nn::grad_check_params(
            &store,
            |g| {
                let f = enc.encode_states(g, &states)?;
                let sq = g.mul(f, f)?;
                Ok(g.sum(sq))
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let theta = Tensor::new(&[2, STATE_DIM], state_matrix::<f64>(&states).unwrap()).unwrap();
        let err = crate::nn::grad_check_input(
            &store,
            |g, x| {
                let f = enc.forward(g, x)?;
                let sq = g.mul(f, f)?;
                Ok(g.sum(sq))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
