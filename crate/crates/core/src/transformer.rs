//! Temporal and spatial attention over tracklet feature histories.
//!
//! Each tracklet's window of stored motion features gets a learned time
//! embedding per frame gap, then a motion token appended to the window
//! attends over it for `temporal_layers` rounds. The resulting per-tracklet
//! tokens attend to one another, keyed by their global positions, to give
//! the final tracklet motion features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{BankWindow, FeatureBank};
use crate::error::{Error, Result};
use crate::nn::{
    Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Segment, Tensor, Var,
};
use crate::scalar::Scalar;

/// Standard deviation of the time embedding and motion token at init.
const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub channels: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub spatial_layers: usize,
    /// Window length `T` taken from the bank.
    pub window: usize,
    pub max_gap: usize,
    /// Adds residual connections and layer normalization around every
    /// attention and feed-forward block.
    pub residual_norm: bool,
    pub use_time_encoding: bool,
    /// When off, a tracklet's token is its newest stored feature.
    pub use_temporal: bool,
    pub use_spatial: bool,
    /// When off, the spatial keys see zeros in place of positional features.
    pub use_global_position: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            heads: 4,
            temporal_layers: 2,
            spatial_layers: 1,
            window: 6,
            max_gap: 10,
            residual_norm: false,
            use_time_encoding: true,
            use_temporal: true,
            use_spatial: true,
            use_global_position: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("temporal_layers", self.temporal_layers),
            ("spatial_layers", self.spatial_layers),
            ("window", self.window),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Attention followed by a one-layer ReLU feed-forward block.
#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: Linear,
    norms: Option<(LayerNorm, LayerNorm)>,
}

impl EncoderLayer {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kv_dim: usize,
        config: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.channels;
        let attn = MultiHeadAttention::new(
            store,
            &format!("{prefix}.attn"),
            c,
            kv_dim,
            c,
            config.heads,
            rng,
        )?;
        let ffn = Linear::new(store, &format!("{prefix}.ffn"), c, c, rng)?;
        let norms = if config.residual_norm {
            Some((
                LayerNorm::new(store, &format!("{prefix}.norm1"), c)?,
                LayerNorm::new(store, &format!("{prefix}.norm2"), c)?,
            ))
        } else {
            None
        };
        Ok(Self { attn, ffn, norms })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        kv: Var,
        segments: Vec<Segment>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, q, kv, segments)?;
        match self.norms {
            None => {
                let h = self.ffn.forward(g, a)?;
                g.relu(h)
            }
            Some((n1, n2)) => {
                let h = g.add(q, a)?;
                let h = n1.forward(g, h)?;
                let f = self.ffn.forward(g, h)?;
                let f = g.relu(f)?;
                let out = g.add(h, f)?;
                n2.forward(g, out)
            }
        }
    }
}

/// Windows of several tracklets packed row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWindows<T> {
    pub channels: usize,
    /// `rows × C` stored features, window after window.
    pub features: Vec<T>,
    pub gaps: Vec<i64>,
    /// `(first row, length)` of each window.
    pub spans: Vec<(usize, usize)>,
}

impl<T: Scalar> PackedWindows<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            features: Vec::new(),
            gaps: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.gaps.len()
    }

    pub fn push(&mut self, window: &BankWindow<T>) -> Result<()> {
        if window.is_empty() {
            return Err(Error::Contract("empty tracklet window".into()));
        }
        self.spans.push((self.rows(), window.len()));
        for (f, &gap) in window.features.iter().zip(&window.gaps) {
            if f.len() != self.channels {
                return Err(Error::shape("pack_window", &[self.channels], &[f.len()]));
            }
            self.features.extend_from_slice(f);
            self.gaps.push(gap);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MotionTransformer {
    pub config: TransformerConfig,
    pub time_embedding: ParamId,
    pub motion_token: ParamId,
    temporal: Vec<EncoderLayer>,
    position: Mlp,
    spatial: Vec<EncoderLayer>,
}

impl MotionTransformer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let time_embedding = store.add_normal(
            "transformer.time_embedding",
            &[config.max_gap + 1, c],
            TOKEN_INIT_STD,
            rng,
        )?;
        let motion_token =
            store.add_normal("transformer.motion_token", &[1, c], TOKEN_INIT_STD, rng)?;
        let temporal = (0..config.temporal_layers)
            .map(|k| {
                EncoderLayer::new(
                    store,
                    &format!("transformer.temporal.layer{k}"),
                    c,
                    &config,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let position = Mlp::new(store, "transformer.position", (3, c, c), rng)?;
        let spatial = (0..config.spatial_layers)
            .map(|k| {
                EncoderLayer::new(
                    store,
                    &format!("transformer.spatial.layer{k}"),
                    2 * c,
                    &config,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            time_embedding,
            motion_token,
            temporal,
            position,
            spatial,
        })
    }

    /// Adds the embedding row `min(gap, max_gap)` to each feature row.
    pub fn time_encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        gaps: &[i64],
    ) -> Result<Var> {
        if !self.config.use_time_encoding {
            return Ok(features);
        }
        let rows: Vec<usize> = gaps
            .iter()
            .map(|&gap| {
                if gap < 0 {
                    Err(Error::Ordering(format!("negative frame gap {gap}")))
                } else {
                    Ok((gap as usize).min(self.config.max_gap))
                }
            })
            .collect::<Result<_>>()?;
        let table = g.param(self.time_embedding)?;
        let emb = g.gather_rows(table, &rows)?;
        g.add(features, emb)
    }

    /// Runs the temporal layers over each span of `encoded` followed by the
    /// motion token and returns the token outputs, one row per span.
    pub fn temporal_encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        encoded: Var,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        if !self.config.use_temporal {
            let last: Vec<usize> = spans.iter().map(|&(s, l)| s + l - 1).collect();
            return g.gather_rows(encoded, &last);
        }
        let rows = g.shape(encoded)[0];
        let token = g.param(self.motion_token)?;
        let all = g.concat_rows(&[encoded, token])?;
        let mut index = Vec::with_capacity(rows + spans.len());
        let mut segments = Vec::with_capacity(spans.len());
        let mut token_rows = Vec::with_capacity(spans.len());
        for &(start, len) in spans {
            if len == 0 {
                return Err(Error::Contract("empty tracklet window".into()));
            }
            segments.push(Segment::self_attention(index.len(), len + 1));
            index.extend(start..start + len);
            token_rows.push(index.len());
            index.push(rows);
        }
        let mut x = g.gather_rows(all, &index)?;
        for layer in &self.temporal {
            x = layer.forward(g, x, x, segments.clone())?;
        }
        g.gather_rows(x, &token_rows)
    }

    /// Positional features `X_p` of an `M × 3` position matrix.
    pub fn positional_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        positions: Var,
    ) -> Result<Var> {
        if self.config.use_global_position {
            self.position.forward(g, positions)
        } else {
            let m = g.shape(positions)[0];
            Ok(g.input(Tensor::zeros(&[m, self.config.channels])))
        }
    }

    /// Cross-tracklet attention within each `(start, len)` group of rows.
    pub fn spatial_encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        positions: Var,
        groups: &[(usize, usize)],
    ) -> Result<Var> {
        if !self.config.use_spatial {
            return Ok(tokens);
        }
        let xp = self.positional_features(g, positions)?;
        let segments: Vec<Segment> = groups
            .iter()
            .map(|&(s, l)| Segment::self_attention(s, l))
            .collect();
        let mut x = tokens;
        for layer in &self.spatial {
            let kv = g.concat_cols(xp, x)?;
            x = layer.forward(g, x, kv, segments.clone())?;
        }
        Ok(x)
    }

    /// Full pass from packed stored features to final tracklet features.
    ///
    /// `features` holds the window rows described by `gaps` and `spans`;
    /// `positions` holds one latest position per span.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        gaps: &[i64],
        spans: &[(usize, usize)],
        positions: Var,
        groups: &[(usize, usize)],
    ) -> Result<Var> {
        let encoded = self.time_encode(g, features, gaps)?;
        let tokens = self.temporal_encode(g, encoded, spans)?;
        self.spatial_encode(g, tokens, positions, groups)
    }

    /// Records the windows and latest positions of `slots` onto `g`.
    /// Returns the `M × C` features, or `None` when `slots` is empty.
    pub fn encode_bank<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        bank: &FeatureBank<T>,
        slots: &[usize],
        current_frame: i64,
    ) -> Result<Option<Var>> {
        if slots.is_empty() {
            return Ok(None);
        }
        let mut windows = PackedWindows::new(self.config.channels);
        let mut positions = Vec::with_capacity(3 * slots.len());
        for &slot in slots {
            windows.push(&bank.window(slot, current_frame, self.config.window)?)?;
            positions.extend(bank.latest(slot)?.position.map(T::of));
        }
        let rows = windows.rows();
        let features = g.input_matrix(rows, self.config.channels, windows.features.clone())?;
        let positions = g.input_matrix(slots.len(), 3, positions)?;
        let out = self.encode(
            g,
            features,
            &windows.gaps,
            &windows.spans,
            positions,
            &[(0, slots.len())],
        )?;
        Ok(Some(out))
    }

    /// `M × C` motion features of the tracklets held in `slots`.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        bank: &FeatureBank<T>,
        slots: &[usize],
        current_frame: i64,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(store);
        match self.encode_bank(&mut g, bank, slots, current_frame)? {
            Some(v) => Ok(g.tensor(v)),
            None => Ok(Tensor::zeros(&[0, self.config.channels])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(config: TransformerConfig) -> (ParamStore<f64>, MotionTransformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let t = MotionTransformer::new(&mut store, config, &mut rng).unwrap();
        (store, t)
    }

    fn small() -> TransformerConfig {
        TransformerConfig {
            channels: 8,
            heads: 2,
            ..TransformerConfig::default()
        }
    }

    fn filled_bank(
        rng: &mut ChaCha8Rng,
        channels: usize,
        tracks: usize,
        frames: i64,
    ) -> (FeatureBank<f64>, Vec<usize>) {
        let mut bank = FeatureBank::new(16, 10, channels).unwrap();
        let mut slots = Vec::new();
        for k in 0..tracks {
            let s = bank.allocate().unwrap();
            for frame in (0..frames).filter(|f| (f + k as i64) % 3 != 1) {
                let feat = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let pos = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.0];
                bank.push(s, frame, feat, pos).unwrap();
            }
            slots.push(s);
        }
        (bank, slots)
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig {
            channels: 10,
            heads: 4,
            ..TransformerConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TransformerConfig {
            spatial_layers: 0,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn time_encoding_adds_clamped_embedding_rows() {
        let (store, t) = setup(small());
        let table = store.get(t.time_embedding).clone();
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(&[5, 8]));
        let y = t.time_encode(&mut g, x, &[0, 7, 6, 4, 25]).unwrap();
        let y = g.tensor(y);
        for (r, row) in [0, 7, 6, 4, 10].into_iter().enumerate() {
            assert_eq!(y.row(r), table.row(row));
        }
        assert!(matches!(
            t.time_encode(&mut g, x, &[0, 0, 0, 0, -1]),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn zero_embedding_table_makes_time_encoding_the_identity() {
        let (mut store, t) = setup(small());
        store.get_mut(t.time_embedding).data_mut().fill(0.0);
        let feats = Tensor::new(&[2, 8], (0..16).map(|v| v as f64 * 0.37 - 2.0).collect()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.input(feats.clone());
        let y = t.time_encode(&mut g, x, &[3, 0]).unwrap();
        assert_eq!(g.value(y), feats.data());
    }

    #[test]
    fn temporal_output_width_and_duplicate_rows() {
        let (store, t) = setup(TransformerConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rows = Vec::new();
        for _ in 0..6 {
            rows.extend_from_slice(&row);
        }
        rows.extend_from_slice(&other);
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::new(&[7, 128], rows).unwrap());
        let out = t.temporal_encode(&mut g, x, &[(0, 6), (6, 1)]).unwrap();
        assert_eq!(g.shape(out), &[2, 128]);

        // Identical rows in any order: the spans (0..3) and (3..6) hold the same rows.
        let out2 = t.temporal_encode(&mut g, x, &[(0, 3), (3, 3)]).unwrap();
        let v = g.value(out2);
        assert_eq!(&v[..128], &v[128..]);
    }

    #[test]
    fn single_tracklet_spatial_output_is_ffn_of_value_projection() {
        let (store, t) = setup(small());
        let mut g = Graph::with_params(&store);
        let tok =
            g.input(Tensor::new(&[1, 8], (0..8).map(|v| v as f64 * 0.1 - 0.3).collect()).unwrap());
        let pos = g.input(Tensor::new(&[1, 3], vec![3.0, -2.0, 0.5]).unwrap());
        let out = t.spatial_encode(&mut g, tok, pos, &[(0, 1)]).unwrap();
        let layer = t.spatial[0];
        let xp = t.position.forward(&mut g, pos).unwrap();
        let kv = g.concat_cols(xp, tok).unwrap();
        let v = layer.attn.value.forward(&mut g, kv).unwrap();
        let o = layer.attn.output.forward(&mut g, v).unwrap();
        let f = layer.ffn.forward(&mut g, o).unwrap();
        let f = g.relu(f).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(f)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_encoding_is_exactly_permutation_equivariant() {
        let (store, t) = setup(small());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 5;
        let toks: Vec<f64> = (0..m * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pos: Vec<f64> = (0..m * 3).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let perm = [3, 0, 4, 1, 2];
        let permute = |data: &[f64], w: usize| -> Vec<f64> {
            perm.iter()
                .flat_map(|&p| data[p * w..(p + 1) * w].to_vec())
                .collect()
        };
        let run = |toks: Vec<f64>, pos: Vec<f64>| {
            let mut g = Graph::with_params(&store);
            let a = g.input_matrix(m, 8, toks).unwrap();
            let p = g.input_matrix(m, 3, pos).unwrap();
            let y = t.spatial_encode(&mut g, a, p, &[(0, m)]).unwrap();
            g.value(y).to_vec()
        };
        let base = run(toks.clone(), pos.clone());
        let permuted = run(permute(&toks, 8), permute(&pos, 3));
        assert_eq!(permuted, permute(&base, 8));
    }

    #[test]
    fn forward_shapes_and_empty_input() {
        let (store, t) = setup(TransformerConfig {
            channels: 128,
            ..TransformerConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bank, slots) = filled_bank(&mut rng, 128, 4, 9);
        let out = t.forward(&store, &bank, &slots, 9).unwrap();
        assert_eq!(out.shape(), &[4, 128]);
        assert_eq!(out, t.forward(&store, &bank, &slots, 9).unwrap());
        assert_eq!(t.forward(&store, &bank, &[], 9).unwrap().shape(), &[0, 128]);
        assert!(matches!(
            t.forward(&store, &bank, &[11], 9),
            Err(Error::Lookup(_))
        ));

        let mut one = FeatureBank::new(1, 10, 128).unwrap();
        let s = one.allocate().unwrap();
        one.push(s, 4, vec![0.5; 128], [1.0, 2.0, 0.0]).unwrap();
        assert!(t.forward(&store, &one, &[s], 4).unwrap().all_finite());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let (mut store, t) = setup(TransformerConfig {
            channels: 8,
            heads: 2,
            temporal_layers: 1,
            spatial_layers: 1,
            ..TransformerConfig::default()
        });
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bank, slots) = filled_bank(&mut rng, 8, 3, 6);
        let out = t.forward(&store, &bank, &slots, 7).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_gradients_pass_finite_difference_check() {
        for residual_norm in [false, true] {
            let (store, t) = setup(TransformerConfig {
                channels: 8,
                heads: 2,
                window: 3,
                residual_norm,
                ..TransformerConfig::default()
            });
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (bank, slots) = filled_bank(&mut rng, 8, 3, 5);
            let weights: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = grad_check_params(
                &store,
                |g| {
                    let y = t.encode_bank(g, &bank, &slots, 6)?.expect("non-empty");
                    g.weighted_sum(y, weights.clone())
                },
                1e-5,
                Some(12),
            )
            .unwrap();
            assert!(err < 1e-4, "residual_norm={residual_norm}: {err}");
        }
    }
}
