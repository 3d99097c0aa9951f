//! Point-token pose and shape network: fused coordinate/feature tokens, a
//! two-stage edge-convolution encoder, a mixture-of-experts transformer with
//! a geometric branch in its first block, and pose, size and coarse-to-fine
//! shape heads. Everything runs on one autodiff tape.

mod graph;
mod layers;
mod transformer;

pub use graph::{downsample_graph, edge_features, knn_graph, pool_edges, EdgeGraph};
pub use transformer::{Moe, MoeOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::geometry::sampling::{fps, SamplingError};
use crate::geometry::{GeometryError, PointSet, Rot6D, RotationMatrix, SizeVec, Vec3};
use crate::synthdata::SceneSample;
use layers::{EdgeMlp, LayerNorm, Mlp2};
use transformer::Block;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_points: usize,
    pub d_f: usize,
    /// Points kept by the first downsampling stage.
    pub stage1_points: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    pub knn_k: usize,
    pub blocks: usize,
    pub heads: usize,
    pub experts: usize,
    pub active_experts: usize,
    pub coarse_points: usize,
    pub fold_factor: usize,
    pub dense_points: usize,
    pub head_hidden: usize,
    /// Folding grid spacing in meters.
    pub fold_grid_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            d_f: 32,
            stage1_points: 512,
            token_count: 128,
            embed_dim: 256,
            knn_k: 16,
            blocks: 4,
            heads: 4,
            experts: 8,
            active_experts: 2,
            coarse_points: 512,
            fold_factor: 4,
            dense_points: 2048,
            head_hidden: 256,
            fold_grid_scale: 0.05,
        }
    }
}

impl ModelConfig {
    /// Small enough for finite-difference checks of the whole network.
    pub fn tiny() -> Self {
        Self {
            n_points: 64,
            d_f: 8,
            stage1_points: 32,
            token_count: 16,
            embed_dim: 32,
            knn_k: 8,
            blocks: 2,
            heads: 4,
            experts: 4,
            active_experts: 2,
            coarse_points: 32,
            fold_factor: 4,
            dense_points: 128,
            head_hidden: 32,
            fold_grid_scale: 0.05,
        }
    }

    /// Single-CPU training scale.
    pub fn desk() -> Self {
        Self {
            n_points: 256,
            d_f: 16,
            stage1_points: 128,
            token_count: 32,
            embed_dim: 64,
            knn_k: 8,
            blocks: 2,
            heads: 4,
            experts: 4,
            active_experts: 2,
            coarse_points: 128,
            fold_factor: 4,
            dense_points: 512,
            head_hidden: 128,
            fold_grid_scale: 0.05,
        }
    }

    /// Same network with `active` of `experts` routed per token.
    pub fn with_moe(mut self, active: usize, experts: usize) -> Self {
        self.active_experts = active;
        self.experts = experts;
        self
    }

    pub fn fold_side(&self) -> usize {
        (self.fold_factor as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("n_points", self.n_points),
            ("d_f", self.d_f),
            ("stage1_points", self.stage1_points),
            ("token_count", self.token_count),
            ("embed_dim", self.embed_dim),
            ("knn_k", self.knn_k),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("experts", self.experts),
            ("active_experts", self.active_experts),
            ("coarse_points", self.coarse_points),
            ("fold_factor", self.fold_factor),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if !(self.token_count <= self.stage1_points && self.stage1_points <= self.n_points) {
            return fail(format!(
                "need token_count ({}) <= stage1_points ({}) <= n_points ({})",
                self.token_count, self.stage1_points, self.n_points
            ));
        }
        if self.knn_k > self.token_count {
            return fail(format!("knn_k ({}) exceeds token_count ({})", self.knn_k, self.token_count));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim ({}) not divisible by heads ({})", self.embed_dim, self.heads));
        }
        if self.active_experts > self.experts {
            return fail(format!("active_experts ({}) exceeds experts ({})", self.active_experts, self.experts));
        }
        if self.coarse_points * self.fold_factor != self.dense_points {
            return fail(format!(
                "coarse_points·fold_factor = {} but dense_points = {}",
                self.coarse_points * self.fold_factor,
                self.dense_points
            ));
        }
        if self.fold_side().pow(2) != self.fold_factor {
            return fail(format!("fold_factor ({}) must be a perfect square", self.fold_factor));
        }
        if self.coarse_points > self.n_points {
            return fail(format!("coarse_points ({}) exceeds n_points ({})", self.coarse_points, self.n_points));
        }
        if !(self.fold_grid_scale > 0.0 && self.fold_grid_scale.is_finite()) {
            return fail(format!("fold_grid_scale {}", self.fold_grid_scale));
        }
        Ok(())
    }

    fn stage1_width(&self) -> usize {
        (self.embed_dim / 2).max(1)
    }

    /// 2D folding offsets, evenly spaced on `[-0.5, 0.5]²·g`.
    pub fn fold_offsets(&self) -> Vec<[f64; 2]> {
        let s = self.fold_side();
        let at = |i: usize| if s == 1 { 0.0 } else { (i as f64 / (s - 1) as f64 - 0.5) * self.fold_grid_scale };
        (0..s).flat_map(|i| (0..s).map(move |j| [at(i), at(j)])).collect()
    }
}

/// Per-point concatenation `[x, y, z, f_1, …, f_df]` of `N×3` and `N×d_f`.
pub fn fuse_inputs<'t>(partial: Var<'t>, features: Var<'t>) -> Result<Var<'t>, ModelError> {
    let (ps, fs) = (partial.shape(), features.shape());
    if ps.len() != 2 || fs.len() != 2 || ps[1] != 3 || ps[0] != fs[0] {
        return Err(ModelError::ShapeMismatch(format!("fuse_inputs: {ps:?} with {fs:?}")));
    }
    Ok(Var::concat(&[partial, features], 1)?)
}

/// Borrowed network input for one observation.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// `N × 3`, camera frame.
    pub partial: &'a [f64],
    /// `N × d_f`.
    pub features: &'a [f64],
}

/// Network outputs for a stacked batch, still on the tape. Point outputs are
/// in the camera frame (centroid added back).
pub struct BatchOutput<'t> {
    pub batch: usize,
    /// `[B, 6]`.
    pub rot6d: Var<'t>,
    /// `[B, 3]`, relative to the input centroid.
    pub trans_offset: Var<'t>,
    /// `[B, 3]`, centroid + offset.
    pub translation: Var<'t>,
    /// `[B, 3]`, positive.
    pub size: Var<'t>,
    /// `[B·C, 3]`.
    pub coarse: Var<'t>,
    /// `[B·C, 3]`.
    pub fused: Var<'t>,
    /// `[B, C]`, in (0, 1).
    pub confidence: Var<'t>,
    /// `[B·C·F, 3]`.
    pub dense: Var<'t>,
    /// `[B, d]`.
    pub global: Var<'t>,
    pub centroids: Vec<Vec3>,
    /// `[layer][sample][expert]` token counts.
    pub routing: Vec<Vec<Vec<usize>>>,
    /// Candidate confidences `[B, 2C]` before selection.
    pub candidate_confidence: Var<'t>,
}

impl BatchOutput<'_> {
    /// Concrete prediction for sample `i`.
    pub fn prediction(&self, i: usize) -> Result<Prediction, ModelError> {
        let rows = |v: &Var<'_>| -> Vec<f64> {
            let d = v.data();
            let per = d.len() / self.batch;
            d[i * per..(i + 1) * per].to_vec()
        };
        let rot6d = Rot6D::from_slice(&rows(&self.rot6d));
        let off = rows(&self.trans_offset);
        let tr = rows(&self.translation);
        let sz = rows(&self.size);
        Ok(Prediction {
            rotation: rotation_with_fallback(&rot6d),
            rot6d,
            trans_offset: Vec3::new(off[0], off[1], off[2]),
            translation: Vec3::new(tr[0], tr[1], tr[2]),
            size: SizeVec::new(sz[0], sz[1], sz[2])?,
            coarse: PointSet::from_flat(&rows(&self.coarse))?,
            fused: PointSet::from_flat(&rows(&self.fused))?,
            confidences: rows(&self.confidence),
            dense: PointSet::from_flat(&rows(&self.dense))?,
            routing_stats: self.routing.iter().map(|l| l[i].clone()).collect(),
        })
    }
}

/// Gram-Schmidt of the 6D output; a degenerate pair is nudged toward the
/// identity columns by 1e-6 until it orthogonalizes.
pub fn rotation_with_fallback(r: &Rot6D) -> RotationMatrix {
    let mut r = *r;
    loop {
        match r.to_matrix() {
            Ok(m) => return m,
            Err(_) => {
                r = Rot6D::new(r.a1 + Vec3::x() * 1e-6, r.a2 + Vec3::y() * 1e-6);
            }
        }
    }
}

/// One sample's network output, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub rot6d: Rot6D,
    pub rotation: RotationMatrix,
    pub trans_offset: Vec3,
    pub translation: Vec3,
    pub size: SizeVec,
    pub coarse: PointSet,
    pub fused: PointSet,
    pub confidences: Vec<f64>,
    pub dense: PointSet,
    /// Tokens per expert, one row per transformer block.
    pub routing_stats: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    stage1: EdgeMlp,
    stage2: EdgeMlp,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    rot_head: Mlp2,
    trans_head: Mlp2,
    size_head: Mlp2,
    coarse_head: Mlp2,
    conf_head: Mlp2,
    fold_head: Mlp2,
}

/// Softplus preimage of 0.1 m, the starting size guess.
const SIZE_BIAS_INIT: f64 = -2.252_168_461_044_090_6;

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, c_in, w1, h) = (cfg.embed_dim, 3 + cfg.d_f, cfg.stage1_width(), cfg.head_hidden);
        let stage1 = EdgeMlp::new(&mut s, "enc.stage1", [2 * c_in, w1, w1], &mut rng)?;
        let stage2 = EdgeMlp::new(&mut s, "enc.stage2", [2 * w1, d, d], &mut rng)?;
        let blocks = (0..cfg.blocks)
            .map(|b| Block::new(&mut s, &format!("block{b}"), d, cfg.heads, cfg.experts, cfg.active_experts, b == 0, &mut rng))
            .collect::<Result<_, _>>()?;
        let final_norm = LayerNorm::new(&mut s, "final_norm", d)?;
        let rot_head = Mlp2::new(&mut s, "head.rot", [d, h, 6], &mut rng, false)?;
        let trans_head = Mlp2::new(&mut s, "head.trans", [d, h, 3], &mut rng, false)?;
        let size_head = Mlp2::new(&mut s, "head.size", [d, h, 3], &mut rng, false)?;
        let coarse_head = Mlp2::new(&mut s, "head.coarse", [d, h, 3 * cfg.coarse_points], &mut rng, false)?;
        let conf_head = Mlp2::new(&mut s, "head.conf", [3 + d, h, 1], &mut rng, false)?;
        let fold_head = Mlp2::new(&mut s, "head.fold", [3 + 2 + d, h, 3], &mut rng, true)?;
        // rotation starts near the identity and size near 10 cm
        s.params_mut()[rot_head.l2.b].value = Tensor::new(&[6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
        s.params_mut()[size_head.l2.b].value = Tensor::filled(&[3], SIZE_BIAS_INIT);
        Ok(Self { cfg, store: s, stage1, stage2, blocks, final_norm, rot_head, trans_head, size_head, coarse_head, conf_head, fold_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_inputs(&self, inputs: &[ModelInput<'_>]) -> Result<(), ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        for (i, x) in inputs.iter().enumerate() {
            if x.partial.len() != self.cfg.n_points * 3 || x.features.len() != self.cfg.n_points * self.cfg.d_f {
                return Err(ModelError::ShapeMismatch(format!(
                    "sample {i}: {} coords and {} features for N = {}, d_f = {}",
                    x.partial.len(),
                    x.features.len(),
                    self.cfg.n_points,
                    self.cfg.d_f
                )));
            }
        }
        Ok(())
    }

    /// Centroids and centroid-relative coordinates, stacked.
    fn center(&self, inputs: &[ModelInput<'_>]) -> (Vec<Vec3>, Vec<f64>) {
        let mut cents = Vec::with_capacity(inputs.len());
        let mut rel = Vec::with_capacity(inputs.len() * self.cfg.n_points * 3);
        for x in inputs {
            let c: Vec<f64> = (0..3)
                .map(|a| crate::numeric::compensated_sum(x.partial.iter().skip(a).step_by(3).copied()) / self.cfg.n_points as f64)
                .collect();
            rel.extend(x.partial.chunks_exact(3).flat_map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]));
            cents.push(Vec3::new(c[0], c[1], c[2]));
        }
        (cents, rel)
    }

    fn fused_tensor<'t>(&self, tape: &'t Tape, inputs: &[ModelInput<'_>], rel: &[f64]) -> Result<Var<'t>, ModelError> {
        let rows = inputs.len() * self.cfg.n_points;
        let feats: Vec<f64> = inputs.iter().flat_map(|x| x.features.iter().copied()).collect();
        fuse_inputs(tape.constant(Tensor::new(&[rows, 3], rel.to_vec())?), tape.constant(Tensor::new(&[rows, self.cfg.d_f], feats)?))
    }

    /// Raw stage-1 edge tensor `[B·M·k, 2(3+d_f)]` of the encoder, computed
    /// on centroid-relative inputs as in the full forward pass.
    pub fn stage1_edges(&self, inputs: &[ModelInput<'_>]) -> Result<Tensor, ModelError> {
        self.check_inputs(inputs)?;
        let tape = Tape::inference();
        let (_, rel) = self.center(inputs);
        let fused = self.fused_tensor(&tape, inputs, &rel)?;
        let (g, _) = downsample_graph(&rel, inputs.len(), self.cfg.n_points, self.cfg.stage1_points, self.cfg.knn_k)?;
        Ok(edge_features(fused, &g)?.to_tensor())
    }

    /// Two edge-convolution stages: `[B·N, 3+d_f] → ([B·n, d], token coords)`.
    pub fn edgeconv_encoder<'t>(
        &self,
        p: &[Var<'t>],
        fused: Var<'t>,
        coords: &[f64],
        batch: usize,
    ) -> Result<(Var<'t>, Vec<f64>), ModelError> {
        let c = &self.cfg;
        let (g1, coords1) = downsample_graph(coords, batch, c.n_points, c.stage1_points, c.knn_k)?;
        let h1 = pool_edges(self.stage1.forward(p, &self.store, edge_features(fused, &g1)?)?, &g1)?;
        let (g2, coords2) = downsample_graph(&coords1, batch, c.stage1_points, c.token_count, c.knn_k)?;
        let h2 = pool_edges(self.stage2.forward(p, &self.store, edge_features(h1, &g2)?)?, &g2)?;
        Ok((h2, coords2))
    }

    /// Transformer over tokens, max-pooled per sample to `[B, d]`. Also
    /// returns `[layer][sample][expert]` routing counts.
    pub fn encoder_forward<'t>(
        &self,
        p: &[Var<'t>],
        tokens: Var<'t>,
        token_coords: &[f64],
        batch: usize,
    ) -> Result<(Var<'t>, Vec<Vec<Vec<usize>>>), ModelError> {
        let (n, d) = (self.cfg.token_count, self.cfg.embed_dim);
        if tokens.shape() != [batch * n, d] {
            return Err(ModelError::ShapeMismatch(format!("tokens {:?}, expected [{}, {d}]", tokens.shape(), batch * n)));
        }
        let graph = knn_graph(token_coords, batch, n, self.cfg.knn_k)?;
        let mut x = tokens;
        let mut routing = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, assign) = b.forward(p, x, batch, &graph)?;
            x = y;
            let mut counts = vec![vec![0usize; self.cfg.experts]; batch];
            for (t, es) in assign.iter().enumerate() {
                for &e in es {
                    counts[t / n][e] += 1;
                }
            }
            routing.push(counts);
        }
        let x = self.final_norm.forward(p, x)?;
        Ok((x.reshape(&[batch, n, d])?.max_axis(1)?, routing))
    }

    /// Pose/size outputs `(rot6d [B,6], trans_offset [B,3], size [B,3])`.
    pub fn pose_size_head<'t>(&self, p: &[Var<'t>], global: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>), ModelError> {
        Ok((
            self.rot_head.forward(p, global)?,
            self.trans_head.forward(p, global)?,
            self.size_head.forward(p, global)?.softplus(),
        ))
    }

    /// Coarse shape, confidence-ranked fused points and folded dense points,
    /// all centroid-relative. `partial_rel` is the stacked relative input.
    /// Returns `(coarse, fused, confidence [B,C], dense, candidate confidence)`.
    #[allow(clippy::type_complexity)]
    pub fn shape_heads<'t>(
        &self,
        p: &[Var<'t>],
        global: Var<'t>,
        partial_rel: &[f64],
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>, Var<'t>), ModelError> {
        let tape = global.tape();
        let c = self.cfg.coarse_points;
        let (batch, d) = (global.shape()[0], self.cfg.embed_dim);
        let n = self.cfg.n_points;
        if partial_rel.len() != batch * n * 3 {
            return Err(ModelError::ShapeMismatch(format!("{} partial coordinates for batch {batch}", partial_rel.len())));
        }
        let coarse = self.coarse_head.forward(p, global)?.reshape(&[batch, c, 3])?;
        let mut sampled = Vec::with_capacity(batch * c * 3);
        for b in 0..batch {
            let pts = &partial_rel[b * n * 3..(b + 1) * n * 3];
            for i in fps(pts, c)? {
                sampled.extend_from_slice(&pts[i * 3..i * 3 + 3]);
            }
        }
        let sampled = tape.constant(Tensor::new(&[batch, c, 3], sampled)?);
        let cand = Var::concat(&[coarse, sampled], 1)?.reshape(&[batch * 2 * c, 3])?;
        let g_rows: Vec<usize> = (0..batch * 2 * c).map(|r| r / (2 * c)).collect();
        let scored = Var::concat(&[cand, global.index_select(&g_rows)?], 1)?;
        let cand_conf = self.conf_head.forward(p, scored)?.sigmoid().reshape(&[batch, 2 * c])?;
        let (conf, local) = cand_conf.topk(c)?;
        let sel: Vec<usize> = local.iter().enumerate().map(|(j, &l)| (j / c) * 2 * c + l).collect();
        let fused = cand.index_select(&sel)?.mul_rows(conf.reshape(&[batch * c])?)?;

        let offsets = self.cfg.fold_offsets();
        let f = offsets.len();
        let rep: Vec<usize> = (0..batch * c * f).map(|r| r / f).collect();
        let fused_rep = fused.index_select(&rep)?;
        let grid: Vec<f64> = (0..batch * c * f).flat_map(|r| offsets[r % f]).collect();
        let grid = tape.constant(Tensor::new(&[batch * c * f, 2], grid)?);
        let g_rows: Vec<usize> = (0..batch * c * f).map(|r| r / (c * f)).collect();
        let fold_in = Var::concat(&[fused_rep, grid, global.index_select(&g_rows)?], 1)?;
        debug_assert_eq!(fold_in.shape()[1], 5 + d);
        let dense = fused_rep.add(self.fold_head.forward(p, fold_in)?)?;
        Ok((coarse.reshape(&[batch * c, 3])?, fused, conf, dense, cand_conf))
    }

    /// Full network on a stacked batch, recording onto `tape`. `p` must be
    /// `tape.bind(&self.store)`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], inputs: &[ModelInput<'_>]) -> Result<BatchOutput<'t>, ModelError> {
        self.check_inputs(inputs)?;
        let batch = inputs.len();
        let (centroids, rel) = self.center(inputs);
        let fused_in = self.fused_tensor(tape, inputs, &rel)?;
        let (tokens, token_coords) = self.edgeconv_encoder(p, fused_in, &rel, batch)?;
        let (global, routing) = self.encoder_forward(p, tokens, &token_coords, batch)?;
        let (rot6d, trans_offset, size) = self.pose_size_head(p, global)?;
        let (coarse, fused, confidence, dense, candidate_confidence) = self.shape_heads(p, global, &rel)?;
        let shift = |per: usize| -> Result<Var<'t>, ModelError> {
            let data: Vec<f64> = centroids.iter().flat_map(|c| (0..per).flat_map(move |_| [c.x, c.y, c.z])).collect();
            Ok(tape.constant(Tensor::new(&[batch * per, 3], data)?))
        };
        let c = self.cfg.coarse_points;
        Ok(BatchOutput {
            batch,
            rot6d,
            translation: trans_offset.add(shift(1)?)?,
            trans_offset,
            size,
            coarse: coarse.add(shift(c)?)?,
            fused: fused.add(shift(c)?)?,
            confidence,
            dense: dense.add(shift(c * self.cfg.fold_factor)?)?,
            global,
            centroids,
            routing,
            candidate_confidence,
        })
    }

    /// Inference on one sample (eval-mode normalization, nothing recorded).
    pub fn predict(&self, input: ModelInput<'_>) -> Result<Prediction, ModelError> {
        let tape = Tape::inference();
        let p = tape.bind(&self.store);
        self.forward(&tape, &p, &[input])?.prediction(0)
    }

    pub fn model_forward(&self, sample: &SceneSample) -> Result<Prediction, ModelError> {
        let partial = sample.partial_flat();
        self.predict(ModelInput { partial: &partial, features: &sample.features })
    }
}
