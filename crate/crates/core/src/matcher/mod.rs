//! Detection–tracklet affinity, assignment and the online tracker.

mod hungarian;
mod tracker;

pub use hungarian::hungarian;
pub use tracker::{Association, TrackedObject, Tracker, TrackerConfig, TrackerOutput, Tracklet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Mlp, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// MLP `C → C → 1` scoring the difference between a tracklet-conditioned
/// detection feature and the tracklet's motion feature.
#[derive(Debug, Clone, Copy)]
pub struct MatchingHead {
    pub mlp: Mlp,
}

impl MatchingHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "matcher", (channels, channels, 1), rng)?,
        })
    }

    /// Logits for pair rows of `pair_features`, where row `p` is scored
    /// against row `track_rows[p]` of `tracklets`.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        pair_features: Var,
        tracklets: Var,
        track_rows: &[usize],
    ) -> Result<Var> {
        let t = g.gather_rows(tracklets, track_rows)?;
        let d = g.sub(pair_features, t)?;
        self.mlp.forward(g, d)
    }

    /// Logits of a detection-major `N·M` pair block against `M` tracklets.
    pub fn pair_logits<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        pair_features: Var,
        tracklets: Var,
        n: usize,
        m: usize,
    ) -> Result<Var> {
        let rows: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
        self.logits(g, pair_features, tracklets, &rows)
    }
}

/// Matching probabilities, `rows × cols`, detection-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("affinity", &[rows, cols], &[values.len()]));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("affinity outside [0, 1]".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    /// `1 − A`, the cost handed to the assignment solver.
    pub fn cost(&self) -> Vec<f64> {
        self.values.iter().map(|a| 1.0 - a).collect()
    }
}

/// `A_ij = σ(MLP(f_{i|p_j} − F̃_j))` for `N × M × C` conditioned features
/// and `M × C` tracklet features.
pub fn affinity<T: Scalar>(
    head: &MatchingHead,
    store: &ParamStore<T>,
    obs_features: &Tensor<T>,
    tracklet_features: &Tensor<T>,
) -> Result<AffinityMatrix> {
    let (os, ts) = (obs_features.shape(), tracklet_features.shape());
    if os.len() != 3 || ts.len() != 2 || os[1] != ts[0] || os[2] != ts[1] {
        return Err(Error::shape("affinity", os, ts));
    }
    let (n, m, c) = (os[0], os[1], os[2]);
    let mut g = Graph::with_params(store);
    let pairs = g.input_matrix(n * m, c, obs_features.data().to_vec())?;
    let tracks = g.input(tracklet_features.clone());
    let z = head.pair_logits(&mut g, pairs, tracks, n, m)?;
    let a = g.sigmoid(z)?;
    AffinityMatrix::new(n, m, g.value(a).iter().map(|v| v.as_f64()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(c: usize) -> (ParamStore<f64>, MatchingHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let h = MatchingHead::new(&mut store, c, &mut rng).unwrap();
        (store, h)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_head_gives_one_half_everywhere() {
        let (mut store, h) = head(4);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let a = affinity(&h, &store, &random(&[2, 3, 4], 1), &random(&[3, 4], 2)).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shape_range_and_column_locality() {
        let (store, h) = head(4);
        let obs = random(&[2, 3, 4], 1);
        let mut tracks = random(&[3, 4], 2);
        let a = affinity(&h, &store, &obs, &tracks).unwrap();
        assert_eq!((a.rows, a.cols), (2, 3));
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        tracks.data_mut()[2 * 4 + 1] += 0.7;
        let b = affinity(&h, &store, &obs, &tracks).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(a.get(i, j) == b.get(i, j), j != 2);
            }
        }
        assert!(affinity(&h, &store, &obs, &random(&[2, 4], 3)).is_err());
    }
}
