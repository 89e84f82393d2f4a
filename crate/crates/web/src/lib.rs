//! WebAssembly bindings for the browser demo in `www/`.
//!
//! [`Session`] holds the state and is plain Rust so it can be tested
//! natively; [`Demo`] is the thin JavaScript-facing wrapper.

use sst_core::episodes::{make_fold, sample_episode, Episode, FoldSplit, FoldStride, Mode};
use sst_core::model::{forward_one_shot, gradient_image, mask_iou, self_segment, ModelSpec};
use sst_core::nn::{decode_checkpoint, init_parameters, OptimizerConfig, ParameterStore};
use sst_core::tensor::Tensor;
use sst_core::train_eval::{train_episode_seed, train_step};
use wasm_bindgen::prelude::*;

pub const IMAGE_SIZE: usize = 64;

/// Everything the page shows for one segmentation of the current episode.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub query: Vec<u8>,
    pub support: Vec<u8>,
    pub truth: Vec<u8>,
    pub before: Vec<u8>,
    pub after: Vec<u8>,
    pub gradient: Vec<u8>,
    pub iou_before: f32,
    pub iou_after: f32,
    pub self_loss_before: f32,
    pub self_loss_after: f32,
}

pub struct Session {
    params: ParameterStore,
    split: FoldSplit,
    episode: Option<Episode>,
    train_steps: u64,
    train_seed: u64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Session {
    pub fn new(seed: u64) -> Result<Session, String> {
        Ok(Session {
            params: init_parameters(&ModelSpec::arch(), seed).map_err(err)?,
            split: make_fold(0, FoldStride::Five).map_err(err)?,
            episode: None,
            train_steps: 0,
            train_seed: seed,
        })
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), String> {
        let params = decode_checkpoint(bytes).map_err(err)?;
        params.check_arch(&ModelSpec::arch()).map_err(err)?;
        self.params = params;
        Ok(())
    }

    pub fn set_fold(&mut self, fold: u8, stride: u8) -> Result<(), String> {
        let stride = FoldStride::try_from(stride)?;
        self.split = make_fold(fold, stride).map_err(err)?;
        self.episode = None;
        Ok(())
    }

    pub fn split(&self) -> &FoldSplit {
        &self.split
    }

    /// Draws a one-shot episode and returns its class.
    pub fn sample(&mut self, test: bool, seed: u64) -> Result<u8, String> {
        let mode = if test { Mode::Test } else { Mode::Train };
        let ep = sample_episode(&self.split, mode, 1, seed, (IMAGE_SIZE, IMAGE_SIZE)).map_err(err)?;
        let class = ep.class_id;
        self.episode = Some(ep);
        Ok(class)
    }

    pub fn segment(&self, eta: f32) -> Result<Segmentation, String> {
        let ep = self.episode.as_ref().ok_or("no episode sampled")?;
        let spec = ModelSpec {
            eta,
            ..ModelSpec::default()
        };
        spec.validate().map_err(err)?;
        let before = forward_one_shot(ep, &self.params, &ModelSpec { eta: 0.0, ..spec }).map_err(err)?;
        let after = forward_one_shot(ep, &self.params, &spec).map_err(err)?;
        let tuned = after.tuning.as_ref().ok_or("tuning did not run")?;
        let shot = &ep.supports[0];
        let self_after = self_segment(&tuned.features, &shot.mask, &self.params).map_err(err)?;
        let grad = gradient_image(&tuned.gradient, (IMAGE_SIZE, IMAGE_SIZE)).map_err(err)?;
        Ok(Segmentation {
            query: rgba_image(&ep.query_image),
            support: overlay(&shot.image, &shot.mask, [40, 220, 90]),
            truth: overlay(&ep.query_image, &ep.query_mask, [40, 220, 90]),
            before: overlay(&ep.query_image, &before.query.mask, [240, 60, 60]),
            after: overlay(&ep.query_image, &after.query.mask, [240, 60, 60]),
            gradient: rgba_heat(&grad),
            iou_before: mask_iou(&before.query.mask, &ep.query_mask).map_err(err)?,
            iou_after: mask_iou(&after.query.mask, &ep.query_mask).map_err(err)?,
            self_loss_before: tuned.self_seg.loss,
            self_loss_after: self_after.loss,
        })
    }

    /// Runs `steps` training steps of four episodes each on the fold's
    /// training classes and returns the last total loss.
    pub fn train(&mut self, steps: u32, learning_rate: f32) -> Result<f32, String> {
        let opt = OptimizerConfig {
            learning_rate,
            ..OptimizerConfig::default()
        };
        opt.validate().map_err(err)?;
        let spec = ModelSpec::default();
        let mut last = f32::NAN;
        for _ in 0..steps {
            let batch = (0..4)
                .map(|i| {
                    let seed = train_episode_seed(self.train_seed, self.train_steps * 4 + i);
                    sample_episode(&self.split, Mode::Train, 1, seed, (IMAGE_SIZE, IMAGE_SIZE))
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            let report = train_step(&batch, &mut self.params, &spec, &opt, 1.0).map_err(err)?;
            self.train_steps += 1;
            last = report.total;
        }
        Ok(last)
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar `[3, H, W]` in `[0, 1]` to interleaved RGBA.
pub fn rgba_image(image: &Tensor) -> Vec<u8> {
    let plane = image.len() / 3;
    let d = image.data();
    (0..plane)
        .flat_map(|i| [byte(d[i]), byte(d[plane + i]), byte(d[2 * plane + i]), 255])
        .collect()
}

/// Tints the masked pixels of `image` with `color`.
pub fn overlay(image: &Tensor, mask: &Tensor, color: [u8; 3]) -> Vec<u8> {
    let mut out = rgba_image(image);
    for (px, &m) in out.chunks_exact_mut(4).zip(mask.data()) {
        if m >= 0.5 {
            for (c, &t) in px.iter_mut().zip(&color) {
                *c = ((*c as u16 * 2 + t as u16 * 3) / 5) as u8;
            }
        }
    }
    out
}

/// Single-channel map in `[0, 1]` to a black-red-yellow ramp.
pub fn rgba_heat(map: &Tensor) -> Vec<u8> {
    map.data()
        .iter()
        .flat_map(|&v| {
            let v = v.clamp(0.0, 1.0);
            [byte(v * 2.0), byte(v * 2.0 - 1.0), byte(v * 4.0 - 3.0), 255]
        })
        .collect()
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    /// Starts from randomly initialised parameters.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            session: Session::new(seed as u64).map_err(js)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        IMAGE_SIZE
    }

    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), JsError> {
        self.session.load_checkpoint(bytes).map_err(js)
    }

    /// Selects the fold and returns its split as JSON.
    #[wasm_bindgen(js_name = setFold)]
    pub fn set_fold(&mut self, fold: u8, stride: u8) -> Result<String, JsError> {
        self.session.set_fold(fold, stride).map_err(js)?;
        serde_json::to_string(self.session.split()).map_err(|e| js(e.to_string()))
    }

    pub fn sample(&mut self, test: bool, seed: u32) -> Result<u8, JsError> {
        self.session.sample(test, seed as u64).map_err(js)
    }

    pub fn segment(&self, eta: f32) -> Result<SegmentationView, JsError> {
        self.session
            .segment(eta)
            .map(|inner| SegmentationView { inner })
            .map_err(js)
    }

    pub fn train(&mut self, steps: u32, learning_rate: f32) -> Result<f32, JsError> {
        self.session.train(steps, learning_rate).map_err(js)
    }

    #[wasm_bindgen(getter, js_name = trainSteps)]
    pub fn train_steps(&self) -> u32 {
        self.session.train_steps() as u32
    }
}

#[wasm_bindgen]
pub struct SegmentationView {
    inner: Segmentation,
}

#[wasm_bindgen]
impl SegmentationView {
    #[wasm_bindgen(getter)]
    pub fn query(&self) -> Vec<u8> {
        self.inner.query.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn support(&self) -> Vec<u8> {
        self.inner.support.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<u8> {
        self.inner.truth.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn before(&self) -> Vec<u8> {
        self.inner.before.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn after(&self) -> Vec<u8> {
        self.inner.after.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn gradient(&self) -> Vec<u8> {
        self.inner.gradient.clone()
    }
    #[wasm_bindgen(getter, js_name = iouBefore)]
    pub fn iou_before(&self) -> f32 {
        self.inner.iou_before
    }
    #[wasm_bindgen(getter, js_name = iouAfter)]
    pub fn iou_after(&self) -> f32 {
        self.inner.iou_after
    }
    #[wasm_bindgen(getter, js_name = selfLossBefore)]
    pub fn self_loss_before(&self) -> f32 {
        self.inner.self_loss_before
    }
    #[wasm_bindgen(getter, js_name = selfLossAfter)]
    pub fn self_loss_after(&self) -> f32 {
        self.inner.self_loss_after
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_needs_an_episode() {
        let s = Session::new(0).unwrap();
        assert!(s.segment(1.0).is_err());
    }

    #[test]
    fn zero_eta_shows_identical_predictions() {
        let mut s = Session::new(1).unwrap();
        s.sample(true, 4).unwrap();
        let seg = s.segment(0.0).unwrap();
        assert_eq!(seg.before, seg.after);
        assert_eq!(seg.query.len(), IMAGE_SIZE * IMAGE_SIZE * 4);
        assert_eq!(seg.gradient.len(), IMAGE_SIZE * IMAGE_SIZE * 4);
        assert_eq!(seg.self_loss_before, seg.self_loss_after);
    }

    #[test]
    fn large_eta_lowers_self_loss() {
        let mut s = Session::new(2).unwrap();
        s.sample(false, 9).unwrap();
        let seg = s.segment(100.0).unwrap();
        assert!(seg.self_loss_after < seg.self_loss_before);
    }

    #[test]
    fn sampled_class_follows_the_fold() {
        let mut s = Session::new(0).unwrap();
        s.set_fold(2, 5).unwrap();
        for seed in 0..20 {
            let c = s.sample(true, seed).unwrap();
            assert!(s.split().test_classes.contains(&c));
            let c = s.sample(false, seed).unwrap();
            assert!(s.split().train_classes.contains(&c));
        }
        assert!(s.set_fold(4, 5).is_err());
        assert!(s.set_fold(0, 3).is_err());
    }

    #[test]
    fn training_steps_advance_and_change_parameters() {
        let mut s = Session::new(3).unwrap();
        let before = s.params.clone();
        let loss = s.train(1, 0.005).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(s.train_steps(), 1);
        assert!(!s.params.bitwise_eq(&before));
    }

    #[test]
    fn checkpoints_load_and_bad_bytes_are_rejected() {
        let mut s = Session::new(0).unwrap();
        let other = init_parameters(&ModelSpec::arch(), 9).unwrap();
        s.load_checkpoint(&sst_core::nn::encode_checkpoint(&other)).unwrap();
        assert!(s.params.bitwise_eq(&other));
        assert!(s.load_checkpoint(b"not a checkpoint").is_err());
    }

    #[test]
    fn heat_ramp_endpoints() {
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(rgba_heat(&t), vec![0, 0, 0, 255, 255, 255, 255, 255]);
    }
}
