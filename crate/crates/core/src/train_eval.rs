//! Episodic training with query and self-segmentation losses, and
//! episodic evaluation reporting mean-IoU and FB-IoU.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{mix_seed, ClassId, Episode, EpisodeError, EpisodeSource, FoldSplit, Mode};
use crate::model::{
    self, decode_in, descriptor_in, encode_in, feature_mask, relate_in, self_segment_in, FusionMode, ModelError,
    ModelSpec,
};
use crate::nn::{sgd_step, NnError, OptimizerConfig, ParameterStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

const TRAIN_STREAM: u64 = 0x7261_696E;
const EVAL_STREAM: u64 = 0x6576_616C;

/// Seed of the `index`-th training episode of a run.
pub fn train_episode_seed(seed: u64, index: u64) -> u64 {
    mix_seed(mix_seed(seed, TRAIN_STREAM), index)
}

/// Seed of the `index`-th evaluation episode.
pub fn eval_episode_seed(seed: u64, index: u64) -> u64 {
    mix_seed(mix_seed(seed, EVAL_STREAM), index)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub main_loss: f32,
    pub aux_loss: f32,
    pub total: f32,
}

impl LossReport {
    pub fn new(main_loss: f32, aux_loss: f32, lambda: f32) -> LossReport {
        LossReport {
            main_loss,
            aux_loss,
            total: main_loss + lambda * aux_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.main_loss.is_finite() && self.aux_loss.is_finite() && self.total.is_finite()
    }
}

struct EpisodeLosses {
    main: Var,
    aux: Option<Var>,
    aux_value: f32,
}

/// Records the losses of one single-support episode on the outer graph.
///
/// The tuned support features are `R_s − η·∇` with `∇` computed on a
/// separate graph, so the main loss does not differentiate through the
/// gradient map. The auxiliary loss reaches every parameter directly.
fn record_episode(
    g: &mut Graph,
    bound: &crate::nn::BoundParams,
    params: &ParameterStore,
    episode: &Episode,
    spec: &ModelSpec,
    with_aux: bool,
) -> Result<EpisodeLosses> {
    let shot = match &episode.supports[..] {
        [shot] => shot,
        s => {
            return Err(TrainError::Config(format!(
                "training episodes need 1 support, got {}",
                s.len()
            )))
        }
    };
    let q = g.constant(episode.query_image.clone());
    let s = g.constant(shot.image.clone());
    let rq = encode_in(g, bound, q)?;
    let rs = encode_in(g, bound, s)?;

    let mut aux_value = None;
    let tuned = if spec.tuning {
        let tuned = model::tune_support_features(g.value(rs), &shot.mask, params, spec.eta, spec.inner_steps)?;
        aux_value = Some(tuned.self_seg.loss);
        if spec.eta == 0.0 {
            rs
        } else {
            let delta: Vec<f32> = g
                .value(rs)
                .data()
                .iter()
                .zip(tuned.features.data())
                .map(|(a, b)| a - b)
                .collect();
            let delta = g.constant(Tensor::new(tuned.features.shape().to_vec(), delta)?);
            g.sub(rs, delta)?
        }
    } else {
        rs
    };

    let (_, h, w) = g.value(rs).dims3()?;
    let small = feature_mask(&shot.mask, (h, w))?;
    let (desc, _) = descriptor_in(g, tuned, &small)?;
    let rel = relate_in(g, bound, rq, desc)?;
    let out = (episode.query_mask.shape()[1], episode.query_mask.shape()[2]);
    let logits = decode_in(g, bound, rel, out)?;
    let main = g.softmax_cross_entropy(logits, &episode.query_mask)?;

    let aux = if with_aux {
        // The auxiliary loss trains the relation and decoder layers only.
        let rs_fixed = g.constant(g.value(rs).clone());
        let (_, loss, _) = self_segment_in(g, bound, rs_fixed, &shot.mask)?;
        aux_value = Some(g.value(loss).item());
        Some(loss)
    } else {
        None
    };
    let aux_value = match aux_value {
        Some(v) => v,
        None => model::self_segment(g.value(rs), &shot.mask, params)?.loss,
    };
    Ok(EpisodeLosses { main, aux, aux_value })
}

/// One optimisation step on `batch`: `mean(main) + λ·mean(aux)`.
pub fn train_step(
    batch: &[Episode],
    params: &mut ParameterStore,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    lambda: f32,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let with_aux = lambda != 0.0;
    let mut mains = Vec::with_capacity(batch.len());
    let mut auxes = Vec::with_capacity(batch.len());
    let (mut main_sum, mut aux_sum) = (0.0f64, 0.0f64);
    for episode in batch {
        let losses = record_episode(&mut g, &bound, params, episode, spec, with_aux)?;
        main_sum += g.value(losses.main).item() as f64;
        aux_sum += losses.aux_value as f64;
        mains.push(losses.main);
        auxes.extend(losses.aux);
    }
    let inv = 1.0 / batch.len() as f32;
    let mut total = sum_vars(&mut g, &mains)?;
    total = g.scale(total, inv);
    if with_aux {
        let aux = sum_vars(&mut g, &auxes)?;
        let aux = g.scale(aux, inv * lambda);
        total = g.add(total, aux)?;
    }
    let grads = g.backward(total)?;
    params.accumulate_grads(&bound, &grads);
    sgd_step(params, optimizer)?;
    let n = batch.len() as f64;
    Ok(LossReport::new((main_sum / n) as f32, (aux_sum / n) as f32, lambda))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_episodes: usize,
    pub batch_size: usize,
    pub lambda_aux: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_episodes: 2000,
            batch_size: 4,
            lambda_aux: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_aux.is_finite() && self.lambda_aux >= 0.0) {
            return Err(TrainError::Config("lambda_aux must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.n_episodes.div_ceil(self.batch_size)
    }
}

/// Trains on the split's training classes. `on_step` sees every step's
/// losses. Training stops with an error on a non-finite loss.
pub fn train(
    split: &FoldSplit,
    source: &EpisodeSource,
    params: &mut ParameterStore,
    spec: &ModelSpec,
    optimizer: &OptimizerConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    spec.validate()?;
    optimizer.validate()?;
    let mut log = Vec::with_capacity(cfg.steps());
    for step in 0..cfg.steps() {
        let start = step * cfg.batch_size;
        let end = (start + cfg.batch_size).min(cfg.n_episodes);
        let batch = (start..end)
            .map(|i| source.sample(split, Mode::Train, 1, train_episode_seed(cfg.seed, i as u64)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let report = train_step(&batch, params, spec, optimizer, cfg.lambda_aux)?;
        if !report.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        on_step(step, &report);
        log.push(report);
    }
    Ok(log)
}

/// Pixel counts of one prediction against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode_id: u64,
    pub class_id: ClassId,
    pub fg_intersection: u64,
    pub fg_union: u64,
    pub bg_intersection: u64,
    pub bg_union: u64,
    pub iou_fg: f64,
}

impl MetricsRecord {
    pub fn new(episode_id: u64, class_id: ClassId, pred: &Tensor, gt: &Tensor) -> Result<MetricsRecord> {
        if pred.shape() != gt.shape() {
            return Err(TensorError::shape("iou", format!("{:?} vs {:?}", pred.shape(), gt.shape())).into());
        }
        let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            let (p, t) = (p >= 0.5, t >= 0.5);
            fi += (p && t) as u64;
            fu += (p || t) as u64;
            bi += (!p && !t) as u64;
            bu += (!p || !t) as u64;
        }
        Ok(MetricsRecord {
            episode_id,
            class_id,
            fg_intersection: fi,
            fg_union: fu,
            bg_intersection: bi,
            bg_union: bu,
            iou_fg: ratio(fi, fu),
        })
    }
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground IoU of two binary masks; 1 when the union is empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(MetricsRecord::new(0, 0, pred, gt)?.iou_fg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Mean over classes of the per-class mean foreground IoU.
    pub mean_iou: f64,
    /// Mean of foreground and background IoU from pixel counts summed over episodes.
    pub fb_iou: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub episodes: usize,
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let mut per_class: BTreeMap<ClassId, (f64, usize)> = BTreeMap::new();
    let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
    for r in records {
        let e = per_class.entry(r.class_id).or_default();
        e.0 += r.iou_fg;
        e.1 += 1;
        fi += r.fg_intersection;
        fu += r.fg_union;
        bi += r.bg_intersection;
        bu += r.bg_union;
    }
    let per_class: BTreeMap<ClassId, f64> = per_class.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let mean_iou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Summary {
        mean_iou,
        fb_iou: (ratio(fi, fu) + ratio(bi, bu)) / 2.0,
        per_class,
        episodes: records.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: 1000,
            k: 1,
            seed: 0,
        }
    }
}

/// Records and summary of one prediction rule.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub label: String,
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

fn thread_cap() -> Option<usize> {
    std::env::var("SST_THREADS").ok()?.parse().ok().filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
    match thread_cap() {
        Some(threads) => match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    let _ = thread_cap();
    (0..n).map(f).collect()
}

/// Evaluates arbitrary predictors on `cfg.n_episodes` test episodes.
///
/// `predict` returns one `(prediction, ground truth)` pair per label;
/// episodes are scored in parallel and merged in episode order.
pub fn evaluate_pairs<F>(
    split: &FoldSplit,
    source: &EpisodeSource,
    mode: Mode,
    cfg: &EvalConfig,
    labels: &[String],
    predict: F,
) -> Result<Vec<Evaluation>>
where
    F: Fn(&Episode) -> Result<Vec<(Tensor, Tensor)>> + Sync + Send,
{
    if cfg.n_episodes == 0 {
        return Err(TrainError::Config("n_episodes must be at least 1".into()));
    }
    let per_episode = map_indices(cfg.n_episodes, |i| -> Result<Vec<MetricsRecord>> {
        let episode = source.sample(split, mode, cfg.k, eval_episode_seed(cfg.seed, i as u64))?;
        let pairs = predict(&episode)?;
        if pairs.len() != labels.len() {
            return Err(TrainError::Config(format!(
                "predictor returned {} outputs for {} labels",
                pairs.len(),
                labels.len()
            )));
        }
        pairs
            .iter()
            .map(|(pred, gt)| MetricsRecord::new(i as u64, episode.class_id, pred, gt))
            .collect()
    });
    let mut columns: Vec<Vec<MetricsRecord>> = vec![Vec::with_capacity(cfg.n_episodes); labels.len()];
    for records in per_episode {
        for (col, r) in columns.iter_mut().zip(records?) {
            col.push(r);
        }
    }
    Ok(labels
        .iter()
        .zip(columns)
        .map(|(label, records)| Evaluation {
            label: label.clone(),
            summary: summarize(&records),
            records,
        })
        .collect())
}

/// Query predictions of the model on test episodes. One-shot runs yield a
/// single evaluation; five-shot runs yield one per fusion mode in `modes`.
pub fn evaluate(
    split: &FoldSplit,
    source: &EpisodeSource,
    params: &ParameterStore,
    spec: &ModelSpec,
    cfg: &EvalConfig,
    modes: &[FusionMode],
) -> Result<Vec<Evaluation>> {
    spec.validate()?;
    if cfg.k == 1 {
        let labels = vec!["one_shot".to_string()];
        return evaluate_pairs(split, source, Mode::Test, cfg, &labels, |ep| {
            let out = model::forward_one_shot(ep, params, spec)?;
            Ok(vec![(out.query.mask, ep.query_mask.clone())])
        });
    }
    if modes.is_empty() {
        return Err(TrainError::Config("no fusion mode requested".into()));
    }
    let labels: Vec<String> = modes.iter().map(|m| m.name().to_string()).collect();
    evaluate_pairs(split, source, Mode::Test, cfg, &labels, |ep| {
        let shots = model::multi_shot_relations(ep, params, spec)?;
        modes
            .iter()
            .map(|&m| Ok((shots.decode(params, m)?.mask, ep.query_mask.clone())))
            .collect()
    })
}

/// Self-segmentation quality: each support segmented against its own mask.
pub fn evaluate_self_segmentation(
    split: &FoldSplit,
    source: &EpisodeSource,
    mode: Mode,
    params: &ParameterStore,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let labels = vec!["self_segmentation".to_string()];
    let mut evals = evaluate_pairs(split, source, mode, cfg, &labels, |ep| {
        let shot = &ep.supports[0];
        let feats = model::encode(&shot.image, params)?;
        let seg = model::self_segment(&feats, &shot.mask, params)?;
        Ok(vec![(seg.output.mask, shot.mask.clone())])
    })?;
    Ok(evals.remove(0))
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    kind: &'static str,
    label: &'a str,
    episode_id: u64,
    class_id: ClassId,
    iou_fg: f64,
}

#[derive(Serialize)]
struct SummaryLine<'a, C: Serialize> {
    kind: &'static str,
    label: &'a str,
    mean_iou: f64,
    fb_iou: f64,
    per_class: &'a BTreeMap<ClassId, f64>,
    episodes: usize,
    config: &'a C,
}

/// Writes one JSON object per episode followed by one summary object per
/// evaluation. `config` is echoed into every summary.
pub fn write_metrics<W: Write, C: Serialize>(out: &mut W, evals: &[Evaluation], config: &C) -> Result<()> {
    for e in evals {
        for r in &e.records {
            let line = EpisodeLine {
                kind: "episode",
                label: &e.label,
                episode_id: r.episode_id,
                class_id: r.class_id,
                iou_fg: r.iou_fg,
            };
            serde_json::to_writer(&mut *out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    for e in evals {
        let line = SummaryLine {
            kind: "summary",
            label: &e.label,
            mean_iou: e.summary.mean_iou,
            fb_iou: e.summary.fb_iou,
            per_class: &e.summary.per_class,
            episodes: e.summary.episodes,
            config,
        };
        serde_json::to_writer(&mut *out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(class_id: ClassId, iou_fg: f64) -> MetricsRecord {
        MetricsRecord {
            episode_id: 0,
            class_id,
            fg_intersection: 0,
            fg_union: 0,
            bg_intersection: 0,
            bg_union: 0,
            iou_fg,
        }
    }

    #[test]
    fn iou_examples() {
        let full = Tensor::full(&[1, 4, 4], 1.0);
        let left = Tensor::new(vec![1, 4, 4], (0..16).map(|i| ((i % 4) < 2) as u8 as f32).collect()).unwrap();
        assert_eq!(iou(&left, &full).unwrap(), 0.5);
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        let right = left.map(|v| 1.0 - v);
        assert_eq!(iou(&left, &right).unwrap(), 0.0);
        assert!(iou(&left, &Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn mean_iou_averages_classes_not_episodes() {
        let mut records = vec![record(1, 0.2)];
        records.extend(std::iter::repeat_with(|| record(2, 0.8)).take(9));
        let s = summarize(&records);
        assert!((s.mean_iou - 0.5).abs() < 1e-12);
        assert_eq!(s.per_class.len(), 2);
    }

    #[test]
    fn fb_iou_uses_global_counts() {
        let pred = Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let gt = Tensor::new(vec![1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = MetricsRecord::new(0, 1, &pred, &gt).unwrap();
        assert_eq!(
            (r.fg_intersection, r.fg_union, r.bg_intersection, r.bg_union),
            (1, 2, 2, 3)
        );
        let s = summarize(&[r]);
        assert!((s.fb_iou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_report_total_is_exact() {
        let r = LossReport::new(0.3, 0.7, 0.0);
        assert_eq!(r.total, r.main_loss);
        let a = LossReport::new(0.3, 0.7, 0.5);
        let b = LossReport::new(0.3, 0.7, 1.5);
        assert!(b.total > a.total);
        assert_eq!(a.total, 0.3 + 0.5 * 0.7);
    }
}
