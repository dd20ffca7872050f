//! Demonstration encoder, learned prior and latent-conditioned cross-pose
//! decoder, all built on [`crate::tape`].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{weighted_rigid_fit, PointCloud, RigidTransform, Segment};
use crate::latent::{CategoricalPointDistribution, LatentSelection};
use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CHECKPOINT_VERSION: &str = "taxposed-ckpt-v1";
const SLOPE: f32 = 0.2;

/// What the decoder is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    /// One latent point per object, fed through distance features.
    Spatial,
    /// A global Gaussian vector appended to every point's input.
    Continuous,
    /// No latent; objects are mean-centered.
    None,
}

/// Which rigid motions the decoder's per-point features are invariant to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariance {
    /// Rotations about the vertical axis: heights are kept as features.
    Yaw,
    /// All rotations: only distances are kept.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub knn: usize,
    pub encoder_radius: f32,
    pub z_dim: usize,
    pub latent: LatentKind,
    /// Learned prior network; otherwise uniform (spatial) or standard normal
    /// (continuous).
    pub learned_prior: bool,
    pub invariance: Invariance,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            knn: 16,
            encoder_radius: 0.15,
            z_dim: 8,
            latent: LatentKind::Spatial,
            learned_prior: true,
            invariance: Invariance::Yaw,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), i, o, rng),
            b: store.add_uniform(format!("{name}.b"), 1, o, 1.0 / (i as f32).sqrt(), rng),
        }
    }

    fn fwd(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Fused edge-convolution layer: `max_j act(x_i A + x_j B + e_ij C + b)`.
#[derive(Clone, Copy, Debug)]
struct EdgeLayer {
    center: ParamId,
    neighbor: ParamId,
    edge: Option<ParamId>,
    b: ParamId,
}

impl EdgeLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        i: usize,
        edge_dim: usize,
        o: usize,
        rng: &mut R,
    ) -> Self {
        // Bounds follow the fan-in of the concatenated edge input.
        let bound = 1.0 / ((2 * i + edge_dim) as f32).sqrt();
        Self {
            center: store.add_uniform(format!("{name}.center"), i, o, bound, rng),
            neighbor: store.add_uniform(format!("{name}.neighbor"), i, o, bound, rng),
            edge: (edge_dim > 0).then(|| store.add_uniform(format!("{name}.edge"), edge_dim, o, bound, rng)),
            b: store.add_uniform(format!("{name}.b"), 1, o, bound, rng),
        }
    }

    fn fwd(&self, g: &mut Graph, x: Var, edge_attr: Option<Var>, nbrs: &[usize], k: usize) -> Var {
        let a = g.param(self.center);
        let bn = g.param(self.neighbor);
        let bias = g.param(self.b);
        let c = g.matmul(x, a);
        let c = g.add_row(c, bias);
        let n = g.matmul(x, bn);
        let e = match (self.edge, edge_attr) {
            (Some(w), Some(attr)) => {
                let w = g.param(w);
                Some(g.matmul(attr, w))
            }
            _ => None,
        };
        g.edge_max_with(c, n, e, nbrs, k, SLOPE)
    }
}

/// Indices of the `k` nearest points (self included) for every point,
/// flattened row-major. Ties break by index.
pub fn knn_indices(points: &[Vector3<f32>], k: usize) -> (Vec<usize>, usize) {
    let n = points.len();
    let k = k.min(n).max(1);
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<(f32, usize)> = Vec::with_capacity(n);
    for p in points {
        order.clear();
        order.extend(points.iter().enumerate().map(|(j, q)| ((q - p).norm_squared(), j)));
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut top: Vec<(f32, usize)> = order[..k].to_vec();
        top.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(top.iter().map(|t| t.1));
    }
    (out, k)
}

fn points_tensor(points: &[Vector3<f32>]) -> Tensor {
    Tensor::from_points(points)
}

fn mean_centered(points: &[Vector3<f32>]) -> Vec<Vector3<f32>> {
    let c = crate::geometry::centroid(points);
    points.iter().map(|p| p - c).collect()
}

/// Point features shared by the per-object encoders: edge conv, edge conv,
/// then a pointwise layer over both plus their global max.
#[derive(Clone, Copy, Debug)]
struct ObjectEncoder {
    e1: EdgeLayer,
    e2: EdgeLayer,
    mix: Linear,
}

impl ObjectEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, edge_dim: usize, d: usize, rng: &mut R) -> Self {
        Self {
            e1: EdgeLayer::new(store, &format!("{name}.e1"), input, edge_dim, d, rng),
            e2: EdgeLayer::new(store, &format!("{name}.e2"), d, 0, d, rng),
            mix: Linear::new(store, &format!("{name}.mix"), 4 * d, d, rng),
        }
    }

    fn fwd(&self, g: &mut Graph, x: Var, edge_attr: Option<Var>, nbrs: &[usize], k: usize) -> Var {
        let h1 = self.e1.fwd(g, x, edge_attr, nbrs, k);
        let h2 = self.e2.fwd(g, h1, None, nbrs, k);
        let both = g.concat_cols(&[h1, h2]);
        let glob = g.col_max(both);
        let n = g.shape(x).0;
        let glob = g.broadcast_rows(glob, n);
        let cat = g.concat_cols(&[both, glob]);
        self.mix.fwd(g, cat)
    }
}

/// Single-head scaled dot-product attention from `a` onto `b`, with a
/// residual connection.
#[derive(Clone, Copy, Debug)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    fn fwd(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let d = g.shape(a).1;
        let q = self.q.fwd(g, a);
        let k = self.k.fwd(g, b);
        let v = self.v.fwd(g, b);
        let s = g.matmul_t(q, false, k, true);
        let s = g.scale(s, 1.0 / (d as f32).sqrt());
        let att = g.softmax_rows(s);
        let m = g.matmul(att, v);
        let m = self.o.fwd(g, m);
        g.add(a, m)
    }
}

/// Demonstration encoder: one level of radius-limited neighborhood grouping
/// with a shared transform and max aggregation, then a per-point head.
#[derive(Clone, Copy, Debug)]
pub struct DemoEncoder {
    group_pos: ParamId,
    group_label: ParamId,
    group_b: ParamId,
    mlp1: Linear,
    mlp2: Linear,
    head1: Linear,
    head2: Linear,
    gauss: Option<Linear>,
}

/// Tape outputs of the encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `N×1` logits in cloud order.
    pub logits: Var,
    /// `1×2z` mean and log-variance for continuous latents.
    pub gauss: Option<Var>,
}

impl DemoEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let bound = 0.5;
        let group_pos = store.add_uniform("enc.group.pos", 3, d, bound, rng);
        let group_label = store.add_uniform("enc.group.label", 1, d, bound, rng);
        let group_b = store.add_uniform("enc.group.b", 1, d, bound, rng);
        Self {
            group_pos,
            group_label,
            group_b,
            mlp1: Linear::new(store, "enc.mlp1", d, d, rng),
            mlp2: Linear::new(store, "enc.mlp2", d, d, rng),
            head1: Linear::new(store, "enc.head1", 2 * d, d, rng),
            head2: Linear::new(store, "enc.head2", d, 1, rng),
            gauss: (cfg.latent == LatentKind::Continuous)
                .then(|| Linear::new(store, "enc.gauss", 2 * d, 2 * cfg.z_dim, rng)),
        }
    }

    /// `cloud` is mean-centered here, so the output ignores its placement.
    pub fn fwd(&self, g: &mut Graph, cfg: &ModelConfig, cloud: &PointCloud) -> EncoderVars {
        let pts = mean_centered(cloud.points());
        let (mut nbrs, k) = knn_indices(&pts, cfg.knn);
        let r2 = cfg.encoder_radius * cfg.encoder_radius;
        for i in 0..pts.len() {
            for j in &mut nbrs[i * k..(i + 1) * k] {
                if (pts[*j] - pts[i]).norm_squared() > r2 {
                    *j = i;
                }
            }
        }
        let x = g.constant(points_tensor(&pts));
        let labels: Vec<f32> = cloud
            .segments()
            .iter()
            .map(|s| if *s == Segment::Action { 1.0 } else { 0.0 })
            .collect();
        let lab = g.constant(Tensor::from_vec(pts.len(), 1, labels));
        // Grouping on relative offsets (x_j - x_i) / r and the neighbor label.
        let wp = g.param(self.group_pos);
        let wl = g.param(self.group_label);
        let b = g.param(self.group_b);
        let p = g.matmul(x, wp);
        let p = g.scale(p, 1.0 / cfg.encoder_radius);
        let neg = g.scale(p, -1.0);
        let center = g.add_row(neg, b);
        let lw = g.matmul(lab, wl);
        let neighbor = g.add(p, lw);
        let h0 = g.edge_max(center, neighbor, &nbrs, k, 0.0);
        let h1 = self.mlp1.fwd(g, h0);
        let h1 = g.relu(h1);
        let h2 = self.mlp2.fwd(g, h1);
        let h2 = g.relu(h2);
        let glob = g.col_max(h2);
        let n = pts.len();
        let gb = g.broadcast_rows(glob, n);
        let cat = g.concat_cols(&[h2, gb]);
        let t = self.head1.fwd(g, cat);
        let t = g.relu(t);
        let logits = self.head2.fwd(g, t);
        let gauss = self.gauss.map(|lin| {
            let mean_feat = g.mean_rows(h2);
            let pooled = g.concat_cols(&[glob, mean_feat]);
            lin.fwd(g, pooled)
        });
        EncoderVars { logits, gauss }
    }
}

/// Learned prior over latent points (or over continuous latents) from an
/// observation alone.
#[derive(Clone, Copy, Debug)]
pub struct LearnedPrior {
    enc_a: ObjectEncoder,
    enc_b: ObjectEncoder,
    att_a: CrossAttention,
    att_b: CrossAttention,
    head_a: (Linear, Linear),
    head_b: (Linear, Linear),
    gauss: Option<Linear>,
}

/// Tape outputs of the prior.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub logits_a: Var,
    pub logits_b: Var,
    pub gauss: Option<Var>,
}

impl LearnedPrior {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        Self {
            enc_a: ObjectEncoder::new(store, "prior.enc_a", 1, DECODER_EDGE_ATTRS, d, rng),
            enc_b: ObjectEncoder::new(store, "prior.enc_b", 1, DECODER_EDGE_ATTRS, d, rng),
            att_a: CrossAttention::new(store, "prior.att_a", d, rng),
            att_b: CrossAttention::new(store, "prior.att_b", d, rng),
            head_a: (
                Linear::new(store, "prior.head_a1", d, d, rng),
                Linear::new(store, "prior.head_a2", d, 1, rng),
            ),
            head_b: (
                Linear::new(store, "prior.head_b1", d, d, rng),
                Linear::new(store, "prior.head_b2", d, 1, rng),
            ),
            gauss: (cfg.latent == LatentKind::Continuous)
                .then(|| Linear::new(store, "prior.gauss", 2 * d, 2 * cfg.z_dim, rng)),
        }
    }

    /// Per-point input is the height above the object's mean; edges carry
    /// the same attributes as the decoder, so identical parts at different
    /// yaws score alike.
    pub fn fwd(&self, g: &mut Graph, cfg: &ModelConfig, cloud: &PointCloud) -> PriorVars {
        let object = |g: &mut Graph, enc: &ObjectEncoder, segment: Segment| {
            let pts = mean_centered(&cloud.segment_points(segment));
            let (nbrs, k) = knn_indices(&pts, cfg.knn);
            let attr = g.constant(edge_attrs(&pts, &nbrs, k, cfg.invariance));
            let heights: Vec<f32> = match cfg.invariance {
                Invariance::Yaw => pts.iter().map(|p| p.z).collect(),
                Invariance::Full => vec![0.0; pts.len()],
            };
            let x = g.constant(Tensor::from_vec(pts.len(), 1, heights));
            enc.fwd(g, x, Some(attr), &nbrs, k)
        };
        let ha = object(g, &self.enc_a, Segment::Action);
        let hb = object(g, &self.enc_b, Segment::Anchor);
        let ha2 = self.att_a.fwd(g, ha, hb);
        let hb2 = self.att_b.fwd(g, hb, ha);
        let head = |g: &mut Graph, h: Var, (l1, l2): (Linear, Linear)| {
            let t = l1.fwd(g, h);
            let t = g.relu(t);
            l2.fwd(g, t)
        };
        let logits_a = head(g, ha2, self.head_a);
        let logits_b = head(g, hb2, self.head_b);
        let gauss = self.gauss.map(|lin| {
            let ga = g.col_max(ha2);
            let gb = g.col_max(hb2);
            let pooled = g.concat_cols(&[ga, gb]);
            lin.fwd(g, pooled)
        });
        PriorVars {
            logits_a,
            logits_b,
            gauss,
        }
    }
}

/// Rotation-free edge attributes `[‖x_j − x_i‖, (x_j − x_i)_z]`.
fn edge_attrs(points: &[Vector3<f32>], nbrs: &[usize], k: usize, inv: Invariance) -> Tensor {
    let mut t = Tensor::zeros(nbrs.len(), DECODER_EDGE_ATTRS);
    for (e, &j) in nbrs.iter().enumerate() {
        let d = points[j] - points[e / k];
        t.data[e * 2] = d.norm();
        if inv == Invariance::Yaw {
            t.data[e * 2 + 1] = d.z;
        }
    }
    t
}

/// Latent-conditioned cross-pose decoder.
#[derive(Clone, Copy, Debug)]
pub struct CrossPoseDecoder {
    enc_a: ObjectEncoder,
    enc_b: ObjectEncoder,
    att_a: CrossAttention,
    att_b: CrossAttention,
    corr_q: Linear,
    corr_k: Linear,
    head1: Linear,
    head2: Linear,
    /// Pre-softplus scale of the squared-distance penalty on correspondence
    /// scores, used under spatial conditioning.
    locality: ParamId,
}

/// How the decoder is conditioned for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning {
    /// Convex weights over action (`1×Na`) and anchor (`1×Nb`) points.
    Spatial { weights_a: Var, weights_b: Var },
    /// A `1×z` latent vector.
    Continuous(Var),
    None,
}

/// Tape outputs of the decoder. Coordinates are in the observation frame.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// Action points moved by the predicted transform.
    pub placed: Var,
    /// Corrected correspondences `ṽ`.
    pub correspondences: Var,
    pub weights: Var,
    /// Fitted transform in latent-centered frames, `1×12`.
    pub pose: Var,
    /// Latent-centered action points (the fit source).
    pub centered_a: Var,
    pub origin_a: Var,
    pub origin_b: Var,
}

/// Per-point scalar inputs of the decoder beyond the latent vector.
const DECODER_SCALARS: usize = 2;
/// Per-edge attributes of the decoder's first layer.
const DECODER_EDGE_ATTRS: usize = 2;

impl CrossPoseDecoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let input = DECODER_SCALARS + if cfg.latent == LatentKind::Continuous { cfg.z_dim } else { 0 };
        Self {
            enc_a: ObjectEncoder::new(store, "dec.enc_a", input, DECODER_EDGE_ATTRS, d, rng),
            enc_b: ObjectEncoder::new(store, "dec.enc_b", input, DECODER_EDGE_ATTRS, d, rng),
            att_a: CrossAttention::new(store, "dec.att_a", d, rng),
            att_b: CrossAttention::new(store, "dec.att_b", d, rng),
            corr_q: Linear::new(store, "dec.corr_q", d, d, rng),
            corr_k: Linear::new(store, "dec.corr_k", d, d, rng),
            head1: Linear::new(store, "dec.head1", d, d, rng),
            head2: Linear::new(store, "dec.head2", d, 4, rng),
            locality: store.add("dec.locality", Tensor::scalar(1.0)),
        }
    }

    /// Builds the decoder on the tape. Features are computed from the
    /// latent-centered coordinates: distance to the latent point and, under
    /// yaw invariance, height relative to it.
    pub fn fwd(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        cloud: &PointCloud,
        cond: Conditioning,
    ) -> Result<DecoderVars> {
        let pa = cloud.segment_points(Segment::Action);
        let pb = cloud.segment_points(Segment::Anchor);
        if pa.is_empty() {
            return Err(Error::EmptySegment(Segment::Action.name()));
        }
        if pb.is_empty() {
            return Err(Error::EmptySegment(Segment::Anchor.name()));
        }
        let (na, ka) = knn_indices(&pa, cfg.knn);
        let (nb, kb) = knn_indices(&pb, cfg.knn);
        let attr_a = g.constant(edge_attrs(&pa, &na, ka, cfg.invariance));
        let attr_b = g.constant(edge_attrs(&pb, &nb, kb, cfg.invariance));
        let xa = g.constant(points_tensor(&pa));
        let xb = g.constant(points_tensor(&pb));

        let (origin_a, origin_b, use_distance, zvec) = match cond {
            Conditioning::Spatial { weights_a, weights_b } => {
                let oa = g.matmul(weights_a, xa);
                let ob = g.matmul(weights_b, xb);
                (oa, ob, true, None)
            }
            Conditioning::Continuous(z) => {
                let oa = g.mean_rows(xa);
                let ob = g.mean_rows(xb);
                (oa, ob, false, Some(z))
            }
            Conditioning::None => {
                let oa = g.mean_rows(xa);
                let ob = g.mean_rows(xb);
                (oa, ob, false, None)
            }
        };
        let inputs = |g: &mut Graph, x: Var, origin: Var| -> (Var, Var) {
            let n = g.shape(x).0;
            let ob = g.broadcast_rows(origin, n);
            let c = g.sub(x, ob);
            let dist = if use_distance {
                g.row_norm(c)
            } else {
                g.constant(Tensor::zeros(n, 1))
            };
            let height = if cfg.invariance == Invariance::Yaw {
                g.slice_cols(c, 2, 1)
            } else {
                g.constant(Tensor::zeros(n, 1))
            };
            let mut parts = vec![dist, height];
            if let Some(z) = zvec {
                parts.push(g.broadcast_rows(z, n));
            }
            (c, g.concat_cols(&parts))
        };
        let (ca, sa) = inputs(g, xa, origin_a);
        let (cb, sb) = inputs(g, xb, origin_b);

        let ha = self.enc_a.fwd(g, sa, Some(attr_a), &na, ka);
        let hb = self.enc_b.fwd(g, sb, Some(attr_b), &nb, kb);
        let ha2 = self.att_a.fwd(g, ha, hb);
        let hb2 = self.att_b.fwd(g, hb, ha);

        let q = self.corr_q.fwd(g, ha2);
        let k = self.corr_k.fwd(g, hb2);
        let s = g.matmul_t(q, false, k, true);
        let mut s = g.scale(s, 1.0 / (cfg.hidden as f32).sqrt());
        if use_distance {
            // Favor anchor points near the anchor latent point.
            let d = g.row_norm(cb);
            let d2 = g.mul(d, d);
            let d2 = g.transpose(d2);
            let raw = g.param(self.locality);
            let beta = g.softplus(raw);
            let pen = g.matmul(beta, d2);
            let pen = g.broadcast_rows(pen, pa.len());
            s = g.sub(s, pen);
        }
        let alpha = g.softmax_rows(s);
        let v = g.matmul(alpha, cb);

        let t = self.head1.fwd(g, ha2);
        let t = g.relu(t);
        let out = self.head2.fwd(g, t);
        let delta = g.slice_cols(out, 0, 3);
        let wraw = g.slice_cols(out, 3, 1);
        let w = g.softplus(wraw);
        let eps = g.constant(Tensor::from_vec(1, 1, vec![1e-6]));
        let weights = g.add_row(w, eps);
        let corr_c = g.add(v, delta);

        let pose = g.rigid_fit(ca, corr_c, weights)?;
        let moved = g.rigid_apply(pose, ca);
        let n = pa.len();
        let ob = g.broadcast_rows(origin_b, n);
        let placed = g.add(moved, ob);
        let correspondences = g.add(corr_c, ob);
        Ok(DecoderVars {
            placed,
            correspondences,
            weights,
            pose,
            centered_a: ca,
            origin_a,
            origin_b,
        })
    }
}

/// A decoded placement in the observation frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub transform: RigidTransform,
    pub correspondences: Vec<Vector3<f32>>,
    pub weights: Vec<f32>,
}

/// All trainable components and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: DemoEncoder,
    pub prior: Option<LearnedPrior>,
    pub decoder: CrossPoseDecoder,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    model: ModelConfig,
    extra: serde_json::Value,
    params: Vec<CheckpointEntry>,
}

fn row_logits(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let encoder = DemoEncoder::new(&mut store, &config, rng);
        let prior = config.learned_prior.then(|| LearnedPrior::new(&mut store, &config, rng));
        let decoder = CrossPoseDecoder::new(&mut store, &config, rng);
        Self {
            config,
            store,
            encoder,
            prior,
            decoder,
        }
    }

    fn split_logits(cloud: &PointCloud, logits: &Tensor) -> Result<(CategoricalPointDistribution, CategoricalPointDistribution)> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (s, v) in cloud.segments().iter().zip(&logits.data) {
            match s {
                Segment::Action => a.push(*v as f64),
                Segment::Anchor => b.push(*v as f64),
            }
        }
        Ok((
            CategoricalPointDistribution::new(a, Segment::Action)?,
            CategoricalPointDistribution::new(b, Segment::Anchor)?,
        ))
    }

    fn check_segments(cloud: &PointCloud) -> Result<()> {
        for seg in [Segment::Action, Segment::Anchor] {
            if cloud.segment_len(seg) == 0 {
                return Err(Error::EmptySegment(seg.name()));
            }
        }
        Ok(())
    }

    /// Per-object latent distributions of a demonstration.
    pub fn encode_demo(&self, y: &PointCloud) -> Result<(CategoricalPointDistribution, CategoricalPointDistribution)> {
        Self::check_segments(y)?;
        let mut g = Graph::new(&self.store);
        let out = self.encoder.fwd(&mut g, &self.config, y);
        Self::split_logits(y, g.value(out.logits))
    }

    /// Per-object latent distributions predicted from an observation. Without
    /// a learned prior these are uniform.
    pub fn prior_logits(&self, x: &PointCloud) -> Result<(CategoricalPointDistribution, CategoricalPointDistribution)> {
        Self::check_segments(x)?;
        match &self.prior {
            Some(prior) => {
                let mut g = Graph::new(&self.store);
                let out = prior.fwd(&mut g, &self.config, x);
                Ok((
                    CategoricalPointDistribution::new(row_logits(g.value(out.logits_a)), Segment::Action)?,
                    CategoricalPointDistribution::new(row_logits(g.value(out.logits_b)), Segment::Anchor)?,
                ))
            }
            None => Ok((
                CategoricalPointDistribution::uniform(x.segment_len(Segment::Action), Segment::Action),
                CategoricalPointDistribution::uniform(x.segment_len(Segment::Anchor), Segment::Anchor),
            )),
        }
    }

    /// Mean and log-variance of the continuous prior for `x`.
    pub fn prior_gaussian(&self, x: &PointCloud) -> Result<(Vec<f32>, Vec<f32>)> {
        Self::check_segments(x)?;
        let z = self.config.z_dim;
        match &self.prior {
            Some(prior) if self.config.latent == LatentKind::Continuous => {
                let mut g = Graph::new(&self.store);
                let out = prior.fwd(&mut g, &self.config, x);
                let v = &g.value(out.gauss.expect("continuous prior head")).data;
                Ok((v[..z].to_vec(), v[z..].to_vec()))
            }
            _ => Ok((vec![0.0; z], vec![0.0; z])),
        }
    }

    fn decode(&self, x: &PointCloud, build: impl FnOnce(&mut Graph) -> Conditioning) -> Result<Decoded> {
        Self::check_segments(x)?;
        let mut g = Graph::new(&self.store);
        let cond = build(&mut g);
        let out = self.decoder.fwd(&mut g, &self.config, x, cond)?;
        let ca = g.value(out.centered_a).to_points();
        let corr = g.value(out.correspondences).to_points();
        let ob = g.value(out.origin_b).to_points()[0];
        let oa = g.value(out.origin_a).to_points()[0];
        let w: Vec<f32> = g.value(out.weights).data.clone();
        // Refit in f64 on the centered frames and conjugate back to the
        // observation frame: T = Trans(p_B) ∘ T_c ∘ Trans(−p_A).
        let src: Vec<Vector3<f64>> = ca.iter().map(|p| p.cast()).collect();
        let tgt: Vec<Vector3<f64>> = corr.iter().map(|p| (p - ob).cast()).collect();
        let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let tc = weighted_rigid_fit(&src, &tgt, &wf)?;
        let transform = RigidTransform::from_translation(ob.cast())
            .compose(&tc)
            .compose(&RigidTransform::from_translation(-oa.cast::<f64>()));
        Ok(Decoded {
            transform,
            correspondences: corr,
            weights: w,
        })
    }

    /// Cross-pose for an observation given latent points on both objects.
    pub fn decode_cross_pose(&self, x: &PointCloud, z: &LatentSelection) -> Result<Decoded> {
        let na = x.segment_len(Segment::Action);
        let nb = x.segment_len(Segment::Anchor);
        if z.weights_a.len() != na || z.weights_b.len() != nb {
            return Err(Error::SegmentMismatch {
                expected: na + nb,
                actual: z.weights_a.len() + z.weights_b.len(),
            });
        }
        let row = |w: &[f64]| Tensor::from_vec(1, w.len(), w.iter().map(|&v| v as f32).collect());
        self.decode(x, |g| Conditioning::Spatial {
            weights_a: g.constant(row(&z.weights_a)),
            weights_b: g.constant(row(&z.weights_b)),
        })
    }

    pub fn decode_continuous(&self, x: &PointCloud, z: &[f32]) -> Result<Decoded> {
        if z.len() != self.config.z_dim {
            return Err(Error::LengthMismatch(z.len(), self.config.z_dim));
        }
        self.decode(x, |g| Conditioning::Continuous(g.constant(Tensor::from_vec(1, z.len(), z.to_vec()))))
    }

    pub fn decode_unconditioned(&self, x: &PointCloud) -> Result<Decoded> {
        self.decode(x, |_| Conditioning::None)
    }

    /// Draws one placement: a latent from the prior (categorical draws for
    /// spatial latents), then a decode.
    pub fn sample_placement<R: Rng + ?Sized>(&self, x: &PointCloud, rng: &mut R) -> Result<Decoded> {
        match self.config.latent {
            LatentKind::Spatial => {
                let (da, db) = self.prior_logits(x)?;
                let ia = crate::latent::sample_categorical(&da.probabilities(), rng);
                let ib = crate::latent::sample_categorical(&db.probabilities(), rng);
                self.decode_cross_pose(x, &LatentSelection::from_indices(x, ia, ib)?)
            }
            LatentKind::Continuous => {
                let (mean, logvar) = self.prior_gaussian(x)?;
                let z: Vec<f32> = mean
                    .iter()
                    .zip(&logvar)
                    .map(|(m, lv)| {
                        let e: f64 = rng.sample(rand_distr::StandardNormal);
                        m + (0.5 * lv).exp() * e as f32
                    })
                    .collect();
                self.decode_continuous(x, &z)
            }
            LatentKind::None => self.decode_unconditioned(x),
        }
    }

    /// Writes a little-endian checkpoint: an 8-byte header length, a JSON
    /// header, then every parameter's `f32` values in header order.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION.to_string(),
            model: self.config.clone(),
            extra,
            params: self
                .store
                .iter()
                .map(|(_, p)| CheckpointEntry {
                    name: p.name.clone(),
                    rows: p.value.rows,
                    cols: p.value.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        for (_, p) in self.store.iter() {
            for v in &p.value.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the model and the header's `extra`.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = fs::read(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().expect("8 bytes")) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION.to_string(),
                found: header.version,
            });
        }
        let mut model = Model::new(header.model, &mut rand::rngs::mock::StepRng::new(0, 1));
        let mut offset = 8 + len;
        for entry in &header.params {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| bad(&format!("unknown parameter {}", entry.name)))?;
            let t = model.store.get_mut(id);
            if (t.rows, t.cols) != (entry.rows, entry.cols) {
                return Err(bad(&format!("shape mismatch for {}", entry.name)));
            }
            let n = entry.rows * entry.cols * 4;
            let raw = bytes.get(offset..offset + n).ok_or_else(|| bad("truncated data"))?;
            for (v, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
            offset += n;
        }
        if header.params.len() != model.store.len() {
            return Err(bad("parameter count mismatch"));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((model, header.extra))
    }
}
