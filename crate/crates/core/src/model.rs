//! The segmentation network and its self-supervised tuning stage.
//!
//! A shared encoder maps query and support images to feature maps at a
//! quarter of the input resolution. The support features are pooled under
//! the support mask into a descriptor, tiled, concatenated with the query
//! features and compared by a small relation network; a decoder upsamples
//! the two-channel relation map to per-pixel logits.
//!
//! Before the descriptor is built, the support features can be refined by
//! segmenting the support image against itself and stepping the features
//! down the gradient of that loss. Network parameters stay fixed during
//! this step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Episode;
use crate::nn::{ArchSpec, BoundParams, ConvLayerSpec, NnError, ParameterStore};
use crate::tensor::{resize_nearest, softmax_channels, Graph, Tensor, TensorError, Var};

pub const FEATURE_CHANNELS: usize = 64;
pub const FEATURE_STRIDE: usize = 4;

const ENCODER: [(usize, usize, usize); 4] = [(3, 16, 1), (16, 32, 2), (32, 64, 2), (64, 64, 1)];
const RELATION: [(usize, usize); 3] = [(2 * FEATURE_CHANNELS, 64), (64, 32), (32, 2)];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite value in the support feature gradient")]
    NonFiniteGradient,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which self-segmentation prediction scores a support in weighted fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// The prediction computed inside the tuning step, before the update.
    #[default]
    PreTuning,
    /// The support segmented again with its tuned descriptor.
    PostTuning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Weighted,
    Average,
    Maximum,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Weighted, FusionMode::Average, FusionMode::Maximum];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Weighted => "weighted",
            FusionMode::Average => "average",
            FusionMode::Maximum => "maximum",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weighted" => Ok(FusionMode::Weighted),
            "average" => Ok(FusionMode::Average),
            "maximum" => Ok(FusionMode::Maximum),
            other => Err(format!("unknown fusion mode `{other}`")),
        }
    }
}

/// Tuning hyperparameters. The layer shapes are fixed; see [`ModelSpec::arch`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Step size of the support feature update.
    pub eta: f32,
    /// Number of feature updates.
    pub inner_steps: usize,
    /// Disables the tuning stage entirely when false.
    pub tuning: bool,
    pub score_source: ScoreSource,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            eta: 1.0,
            inner_steps: 1,
            tuning: true,
            score_source: ScoreSource::PreTuning,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(ModelError::InvalidInput(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if self.inner_steps == 0 {
            return Err(ModelError::InvalidInput("inner_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn without_tuning(self) -> ModelSpec {
        ModelSpec { tuning: false, ..self }
    }

    /// Layer list: `enc.0..3`, `rel.0..2`, `dec.0`.
    pub fn arch() -> ArchSpec {
        let mut layers: Vec<ConvLayerSpec> = ENCODER
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, _))| ConvLayerSpec::new(format!("enc.{i}"), ci, co, 3))
            .collect();
        layers.extend(
            RELATION
                .iter()
                .enumerate()
                .map(|(i, &(ci, co))| ConvLayerSpec::new(format!("rel.{i}"), ci, co, 3)),
        );
        layers.push(ConvLayerSpec::new("dec.0", 2, 2, 3));
        ArchSpec { layers }
    }
}

/// Spatial size of the encoder output for an `h × w` input.
pub fn feature_size(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(FEATURE_STRIDE), w.div_ceil(FEATURE_STRIDE))
}

fn conv(g: &mut Graph, p: &BoundParams, layer: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{layer}.weight"));
    let b = p.var(&format!("{layer}.bias"));
    Ok(g.conv2d(x, w, b, stride, 1)?)
}

/// Encoder on a recorded `[3,H,W]` image.
pub fn encode_in(g: &mut Graph, p: &BoundParams, image: Var) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    match shape[..] {
        [3, h, w] if h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0 => {}
        _ => {
            return Err(TensorError::shape(
                "encode",
                format!("expected [3,H,W] with H and W multiples of 4, got {shape:?}"),
            )
            .into())
        }
    }
    let mut x = image;
    for (i, &(_, _, stride)) in ENCODER.iter().enumerate() {
        x = conv(g, p, &format!("enc.{i}"), x, stride)?;
        x = g.relu(x);
    }
    Ok(x)
}

/// Downsamples a binary image-resolution mask to the feature grid.
pub fn feature_mask(mask: &Tensor, feat_hw: (usize, usize)) -> Result<Tensor> {
    Ok(resize_nearest(mask, feat_hw.0, feat_hw.1)?)
}

/// Descriptor of recorded features under a feature-resolution mask.
/// Returns the tiled descriptor and whether the mask was empty.
pub fn descriptor_in(g: &mut Graph, feat: Var, small_mask: &Tensor) -> Result<(Var, bool)> {
    let (_, h, w) = g.value(feat).dims3()?;
    let pooled = g.masked_global_pool(feat, small_mask)?;
    Ok((g.tile_spatial(pooled.value, h, w)?, pooled.empty_mask))
}

/// Relation map `[2,h,w]` between query features and a tiled descriptor.
pub fn relate_in(g: &mut Graph, p: &BoundParams, query: Var, desc: Var) -> Result<Var> {
    if g.shape(query) != g.shape(desc) {
        return Err(TensorError::shape(
            "relate",
            format!("query {:?} and descriptor {:?} differ", g.shape(query), g.shape(desc)),
        )
        .into());
    }
    let mut x = g.concat_channels(&[query, desc])?;
    for i in 0..RELATION.len() {
        x = conv(g, p, &format!("rel.{i}"), x, 1)?;
        if i + 1 < RELATION.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Upsamples a relation map to `out` and applies the decoder convolution.
pub fn decode_in(g: &mut Graph, p: &BoundParams, relation: Var, out: (usize, usize)) -> Result<Var> {
    let up = g.bilinear_resize(relation, out.0, out.1)?;
    conv(g, p, "dec.0", up, 1)
}

/// Prediction for one image.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub logits: Tensor,
    pub prob_fg: Tensor,
    pub mask: Tensor,
}

impl SegOutput {
    pub fn from_logits(logits: Tensor) -> Result<SegOutput> {
        let (c, h, w) = logits.dims3()?;
        if c != 2 {
            return Err(TensorError::shape("SegOutput", format!("expected 2 channels, got {c}")).into());
        }
        let probs = softmax_channels(&logits)?;
        let fg = probs.data()[h * w..].to_vec();
        let mask = fg.iter().map(|&p| (p >= 0.5) as u8 as f32).collect();
        Ok(SegOutput {
            prob_fg: Tensor::new(vec![1, h, w], fg)?,
            mask: Tensor::new(vec![1, h, w], mask)?,
            logits,
        })
    }

    pub fn bitwise_eq(&self, other: &SegOutput) -> bool {
        self.logits.bitwise_eq(&other.logits)
    }
}

fn check_image(image: &Tensor, what: &str) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(ModelError::InvalidInput(format!("{what}: expected [3,H,W], got {s:?}"))),
    }
}

fn check_mask(mask: &Tensor, hw: (usize, usize), what: &str) -> Result<()> {
    if mask.shape() != [1, hw.0, hw.1] {
        return Err(ModelError::InvalidInput(format!(
            "{what}: mask {:?} does not match image {}x{}",
            mask.shape(),
            hw.0,
            hw.1
        )));
    }
    Ok(())
}

/// Image-resolution size corresponding to a feature map.
fn image_size_of(feat: &Tensor) -> Result<(usize, usize)> {
    let (_, h, w) = feat.dims3()?;
    Ok((h * FEATURE_STRIDE, w * FEATURE_STRIDE))
}

pub fn encode(image: &Tensor, params: &ParameterStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let r = encode_in(&mut g, &p, x)?;
    Ok(g.value(r).clone())
}

#[derive(Clone, Debug)]
pub struct Descriptor {
    pub features: Tensor,
    pub empty_mask: bool,
}

/// Pools `features` under the image-resolution `mask` and tiles the result.
pub fn build_descriptor(features: &Tensor, mask: &Tensor) -> Result<Descriptor> {
    let (_, h, w) = features.dims3()?;
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let (d, empty_mask) = descriptor_in(&mut g, f, &feature_mask(mask, (h, w))?)?;
    Ok(Descriptor {
        features: g.value(d).clone(),
        empty_mask,
    })
}

pub fn relate_and_decode(
    query: &Tensor,
    descriptor: &Tensor,
    params: &ParameterStore,
    out: (usize, usize),
) -> Result<SegOutput> {
    SegOutput::from_logits(decode_relation(
        &relation_map(query, descriptor, params)?,
        params,
        out,
    )?)
}

/// Relation map `[2,h,w]` for already computed features.
pub fn relation_map(query: &Tensor, descriptor: &Tensor, params: &ParameterStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let q = g.constant(query.clone());
    let d = g.constant(descriptor.clone());
    let m = relate_in(&mut g, &p, q, d)?;
    Ok(g.value(m).clone())
}

pub fn decode_relation(relation: &Tensor, params: &ParameterStore, out: (usize, usize)) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let m = g.constant(relation.clone());
    let logits = decode_in(&mut g, &p, m, out)?;
    Ok(g.value(logits).clone())
}

/// Self-segmentation on a graph: the support features play both the
/// descriptor source and the query. Returns `(logits, loss, empty_mask)`.
pub fn self_segment_in(g: &mut Graph, p: &BoundParams, features: Var, mask: &Tensor) -> Result<(Var, Var, bool)> {
    let (_, h, w) = g.value(features).dims3()?;
    let out = (mask.shape()[1], mask.shape()[2]);
    let (desc, empty) = descriptor_in(g, features, &feature_mask(mask, (h, w))?)?;
    let rel = relate_in(g, p, features, desc)?;
    let logits = decode_in(g, p, rel, out)?;
    let loss = g.softmax_cross_entropy(logits, mask)?;
    Ok((logits, loss, empty))
}

#[derive(Clone, Debug)]
pub struct SelfSegmentation {
    pub output: SegOutput,
    pub loss: f32,
    pub empty_mask: bool,
}

pub fn self_segment(features: &Tensor, mask: &Tensor, params: &ParameterStore) -> Result<SelfSegmentation> {
    check_mask(mask, image_size_of(features)?, "self_segment")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(features.clone());
    let (logits, loss, empty_mask) = self_segment_in(&mut g, &p, f, mask)?;
    Ok(SelfSegmentation {
        output: SegOutput::from_logits(g.value(logits).clone())?,
        loss: g.value(loss).item(),
        empty_mask,
    })
}

/// Self-segmentation loss and its gradient with respect to the features.
/// The gradient collects both uses of the features.
pub fn self_segment_gradient(
    features: &Tensor,
    mask: &Tensor,
    params: &ParameterStore,
) -> Result<(SelfSegmentation, Tensor)> {
    check_mask(mask, image_size_of(features)?, "self_segment")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.variable(features.clone());
    let (logits, loss, empty_mask) = self_segment_in(&mut g, &p, f, mask)?;
    let seg = SelfSegmentation {
        output: SegOutput::from_logits(g.value(logits).clone())?,
        loss: g.value(loss).item(),
        empty_mask,
    };
    let mut grads = g.backward(loss)?;
    let grad = grads.take(f).unwrap_or_else(|| Tensor::zeros(features.shape()));
    if !grad.all_finite() {
        return Err(ModelError::NonFiniteGradient);
    }
    Ok((seg, grad))
}

/// Outcome of the support feature update.
#[derive(Clone, Debug)]
pub struct Tuned {
    pub features: Tensor,
    /// Gradient of the self-segmentation loss at the original features.
    pub gradient: Tensor,
    /// Self-segmentation before the update.
    pub self_seg: SelfSegmentation,
}

/// Runs `steps` updates `R ← R − η·∂L_sup/∂R`. With `η = 0` the features
/// are returned unchanged.
pub fn tune_support_features(
    features: &Tensor,
    mask: &Tensor,
    params: &ParameterStore,
    eta: f32,
    steps: usize,
) -> Result<Tuned> {
    let (self_seg, gradient) = self_segment_gradient(features, mask, params)?;
    let mut tuned = features.clone();
    if eta != 0.0 {
        let mut grad = gradient.clone();
        for step in 0..steps.max(1) {
            if step > 0 {
                grad = self_segment_gradient(&tuned, mask, params)?.1;
            }
            for (r, gv) in tuned.data_mut().iter_mut().zip(grad.data()) {
                *r -= eta * gv;
            }
        }
    }
    Ok(Tuned {
        features: tuned,
        gradient,
        self_seg,
    })
}

/// Magnitudes below this never reach full brightness in [`gradient_image`].
pub const GRADMAP_FLOOR: f32 = 1e-3;

/// Per-position L2 norm of a `[C, h, w]` gradient over channels,
/// nearest-upsampled to `out` and divided by `max(peak, GRADMAP_FLOOR)`.
/// A near-zero gradient therefore renders dark instead of being stretched.
pub fn gradient_image(gradient: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = gradient.dims3()?;
    let plane = h * w;
    let norms: Vec<f32> = (0..plane)
        .map(|i| {
            (0..c)
                .map(|ch| (gradient.data()[ch * plane + i] as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32
        })
        .collect();
    let peak = norms.iter().copied().fold(0.0f32, f32::max).max(GRADMAP_FLOOR);
    let map = Tensor::new(vec![1, h, w], norms.iter().map(|n| n / peak).collect())?;
    Ok(resize_nearest(&map, out.0, out.1)?)
}

/// Segments the support image as a query using its tuned descriptor.
pub fn post_tuning_self_segment(
    features: &Tensor,
    tuned: &Tensor,
    mask: &Tensor,
    params: &ParameterStore,
) -> Result<SegOutput> {
    let desc = build_descriptor(tuned, mask)?;
    relate_and_decode(features, &desc.features, params, (mask.shape()[1], mask.shape()[2]))
}

#[derive(Clone, Debug)]
pub struct OneShotOutput {
    pub query: SegOutput,
    /// Present when the tuning stage ran.
    pub tuning: Option<Tuned>,
    pub support_features: Tensor,
    pub query_features: Tensor,
    pub empty_support_mask: bool,
}

fn one_shot_inner(
    query_image: &Tensor,
    support_image: &Tensor,
    support_mask: &Tensor,
    params: &ParameterStore,
    spec: &ModelSpec,
) -> Result<(Tensor, OneShotOutput)> {
    let hw = check_image(query_image, "query")?;
    let shw = check_image(support_image, "support")?;
    check_mask(support_mask, shw, "support")?;
    let rq = encode(query_image, params)?;
    let rs = encode(support_image, params)?;
    if rq.shape() != rs.shape() {
        return Err(ModelError::InvalidInput(format!(
            "query features {:?} and support features {:?} differ",
            rq.shape(),
            rs.shape()
        )));
    }
    let tuning = if spec.tuning {
        Some(tune_support_features(
            &rs,
            support_mask,
            params,
            spec.eta,
            spec.inner_steps,
        )?)
    } else {
        None
    };
    let source = tuning.as_ref().map_or(&rs, |t| &t.features);
    let desc = build_descriptor(source, support_mask)?;
    let relation = relation_map(&rq, &desc.features, params)?;
    let query = SegOutput::from_logits(decode_relation(&relation, params, hw)?)?;
    Ok((
        relation,
        OneShotOutput {
            query,
            tuning,
            support_features: rs,
            query_features: rq,
            empty_support_mask: desc.empty_mask,
        },
    ))
}

fn single_support(episode: &Episode) -> Result<&crate::episodes::Shot> {
    match &episode.supports[..] {
        [shot] => Ok(shot),
        s => Err(ModelError::InvalidInput(format!("expected 1 support, got {}", s.len()))),
    }
}

/// Full one-shot pipeline for the episode's query.
pub fn forward_one_shot(episode: &Episode, params: &ParameterStore, spec: &ModelSpec) -> Result<OneShotOutput> {
    let shot = single_support(episode)?;
    Ok(one_shot_inner(&episode.query_image, &shot.image, &shot.mask, params, spec)?.1)
}

/// The one-shot pipeline with the tuning stage removed.
pub fn forward_without_tuning(episode: &Episode, params: &ParameterStore) -> Result<SegOutput> {
    let shot = single_support(episode)?;
    let rq = encode(&episode.query_image, params)?;
    let rs = encode(&shot.image, params)?;
    let desc = build_descriptor(&rs, &shot.mask)?;
    let hw = (episode.query_image.shape()[1], episode.query_image.shape()[2]);
    relate_and_decode(&rq, &desc.features, params, hw)
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn mask_iou(pred: &Tensor, gt: &Tensor) -> Result<f32> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::shape("iou", format!("{:?} vs {:?}", pred.shape(), gt.shape())).into());
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        let (p, t) = (p >= 0.5, t >= 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f32 / union as f32 })
}

/// Per-support relation maps and self-segmentation scores of a K-shot episode.
#[derive(Clone, Debug)]
pub struct MultiShot {
    pub relations: Vec<Tensor>,
    pub scores: Vec<f32>,
    pub out_size: (usize, usize),
}

pub fn multi_shot_relations(episode: &Episode, params: &ParameterStore, spec: &ModelSpec) -> Result<MultiShot> {
    if episode.supports.is_empty() {
        return Err(ModelError::InvalidInput("episode has no supports".into()));
    }
    let out_size = check_image(&episode.query_image, "query")?;
    let mut relations = Vec::with_capacity(episode.supports.len());
    let mut scores = Vec::with_capacity(episode.supports.len());
    for shot in &episode.supports {
        let (relation, out) = one_shot_inner(&episode.query_image, &shot.image, &shot.mask, params, spec)?;
        let score = match (&out.tuning, spec.score_source) {
            (Some(t), ScoreSource::PreTuning) => mask_iou(&t.self_seg.output.mask, &shot.mask)?,
            (Some(t), ScoreSource::PostTuning) => {
                let post = post_tuning_self_segment(&out.support_features, &t.features, &shot.mask, params)?;
                mask_iou(&post.mask, &shot.mask)?
            }
            (None, _) => {
                let seg = self_segment(&out.support_features, &shot.mask, params)?;
                mask_iou(&seg.output.mask, &shot.mask)?
            }
        };
        relations.push(relation);
        scores.push(score);
    }
    Ok(MultiShot {
        relations,
        scores,
        out_size,
    })
}

/// Normalised fusion weights. Uniform for averaging, when the scores sum
/// below `1e-6`, or when all scores are equal.
pub fn fusion_weights(scores: &[f32], mode: FusionMode) -> Vec<f64> {
    let n = scores.len() as f64;
    let total: f64 = scores.iter().map(|&s| s as f64).sum();
    let all_equal = scores.windows(2).all(|w| w[0] == w[1]);
    match mode {
        FusionMode::Weighted if total >= 1e-6 && !all_equal => scores.iter().map(|&s| s as f64 / total).collect(),
        _ => vec![1.0 / n; scores.len()],
    }
}

/// Combines relation maps by weighted sum, mean or elementwise maximum.
/// Sums accumulate in `f64`, so fusing identical maps returns them unchanged.
pub fn fuse_relations(relations: &[Tensor], scores: &[f32], mode: FusionMode) -> Result<Tensor> {
    let first = relations
        .first()
        .ok_or_else(|| ModelError::InvalidInput("no relation maps to fuse".into()))?;
    if relations.iter().any(|r| r.shape() != first.shape()) || scores.len() != relations.len() {
        return Err(ModelError::InvalidInput(
            "relation maps or scores disagree in shape".into(),
        ));
    }
    let out = match mode {
        FusionMode::Maximum => {
            let mut out = first.data().to_vec();
            for r in &relations[1..] {
                out.iter_mut().zip(r.data()).for_each(|(o, &v)| *o = o.max(v));
            }
            out
        }
        FusionMode::Weighted | FusionMode::Average => {
            let mut acc = vec![0.0f64; first.len()];
            for (r, w) in relations.iter().zip(fusion_weights(scores, mode)) {
                acc.iter_mut().zip(r.data()).for_each(|(o, &v)| *o += w * v as f64);
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    };
    Ok(Tensor::new(first.shape().to_vec(), out)?)
}

impl MultiShot {
    pub fn decode(&self, params: &ParameterStore, mode: FusionMode) -> Result<SegOutput> {
        let fused = fuse_relations(&self.relations, &self.scores, mode)?;
        SegOutput::from_logits(decode_relation(&fused, params, self.out_size)?)
    }
}

/// K-shot prediction with the chosen fusion of per-support relation maps.
pub fn fuse_five_shot(
    episode: &Episode,
    params: &ParameterStore,
    spec: &ModelSpec,
    mode: FusionMode,
) -> Result<SegOutput> {
    if episode.supports.len() != 5 {
        return Err(ModelError::InvalidInput(format!(
            "expected 5 supports, got {}",
            episode.supports.len()
        )));
    }
    multi_shot_relations(episode, params, spec)?.decode(params, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_parameters;

    fn params() -> ParameterStore {
        init_parameters(&ModelSpec::arch(), 3).unwrap()
    }

    fn image(seed: u32, h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 1000.0)
            .collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn arch_has_expected_shapes() {
        let arch = ModelSpec::arch();
        arch.validate().unwrap();
        assert_eq!(arch.layers.len(), 8);
        assert_eq!(arch.layers[4].c_in, 128);
        assert_eq!(arch.layers[6].c_out, 2);
    }

    #[test]
    fn encoder_output_size() {
        let p = params();
        let r = encode(&image(1, 64, 64), &p).unwrap();
        assert_eq!(r.shape(), &[64, 16, 16]);
        let r = encode(&image(1, 32, 48), &p).unwrap();
        assert_eq!(r.shape(), &[64, 8, 12]);
        assert!(matches!(encode(&image(1, 30, 32), &p), Err(ModelError::Tensor(_))));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let r = encode(&Tensor::zeros(&[3, 32, 32]), &params()).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_is_spatially_constant() {
        let feats = encode(&image(2, 32, 32), &params()).unwrap();
        let mut mask = Tensor::zeros(&[1, 32, 32]);
        mask.data_mut()[4 * 32 + 8] = 1.0;
        let d = build_descriptor(&feats, &mask).unwrap();
        assert!(!d.empty_mask);
        // One foreground pixel at (4, 8) lands on feature cell (1, 2).
        for c in 0..64 {
            let want = feats.data()[c * 64 + 8 + 2];
            assert!(d.features.data()[c * 64..(c + 1) * 64].iter().all(|&v| v == want));
        }
        let full = build_descriptor(&feats, &Tensor::full(&[1, 32, 32], 1.0)).unwrap();
        for c in 0..64 {
            let mean = feats.data()[c * 64..(c + 1) * 64]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / 64.0;
            assert!((full.features.data()[c * 64] as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_mask_is_flagged() {
        let feats = encode(&image(2, 32, 32), &params()).unwrap();
        let d = build_descriptor(&feats, &Tensor::zeros(&[1, 32, 32])).unwrap();
        assert!(d.empty_mask);
        assert!(d.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seg_output_is_normalised() {
        let p = params();
        let q = encode(&image(4, 32, 32), &p).unwrap();
        let d = build_descriptor(&q, &Tensor::full(&[1, 32, 32], 1.0)).unwrap();
        let out = relate_and_decode(&q, &d.features, &p, (32, 32)).unwrap();
        assert_eq!(out.logits.shape(), &[2, 32, 32]);
        let probs = softmax_channels(&out.logits).unwrap();
        for i in 0..1024 {
            assert!((probs.data()[i] + probs.data()[1024 + i] - 1.0).abs() < 1e-5);
        }
        assert!(out.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
    }

    #[test]
    fn iou_cases() {
        let full = Tensor::full(&[1, 2, 2], 1.0);
        let left = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let right = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(mask_iou(&left, &full).unwrap(), 0.5);
        assert_eq!(mask_iou(&left, &right).unwrap(), 0.0);
        assert_eq!(mask_iou(&left, &left).unwrap(), 1.0);
        let empty = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn fusion_weights_fall_back_to_uniform() {
        assert_eq!(fusion_weights(&[0.0; 5], FusionMode::Weighted), vec![0.2; 5]);
        assert_eq!(fusion_weights(&[0.37; 5], FusionMode::Weighted), vec![0.2; 5]);
        let w = fusion_weights(&[1.0, 3.0], FusionMode::Weighted);
        assert_eq!(w, vec![0.25, 0.75]);
        assert_eq!(fusion_weights(&[1.0, 3.0], FusionMode::Average), vec![0.5, 0.5]);
    }

    #[test]
    fn maximum_fusion_is_elementwise() {
        let a = Tensor::new(vec![2, 1, 1], vec![1.0, -2.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 1], vec![0.5, 3.0]).unwrap();
        let m = fuse_relations(&[a, b], &[0.0, 0.0], FusionMode::Maximum).unwrap();
        assert_eq!(m.data(), &[1.0, 3.0]);
    }
}
