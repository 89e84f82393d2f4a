//! Learnable parameters, initialisation, SGD and checkpoint files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SSTCKPT1"                      8-byte magic, includes the format version
//! u32 tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8 ndim, ndim × u32 dims
//!   product(dims) × f32 values
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, Graph, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSTCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid optimizer config: {0}")]
    InvalidOptimizer(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not match architecture: {0}")]
    ShapeConflict(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One square-kernel convolution layer: `{name}.weight` `[c_out, c_in, k, k]`
/// and `{name}.bias` `[c_out]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl ConvLayerSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvLayerSpec {
            name: name.into(),
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec("no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if l.c_in == 0 || l.c_out == 0 || l.kernel == 0 || l.kernel % 2 == 0 {
                return Err(NnError::InvalidSpec(format!(
                    "layer `{}` needs positive channels and an odd kernel",
                    l.name
                )));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(NnError::InvalidSpec(format!("duplicate layer `{}`", l.name)));
            }
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter in registration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.weight_name(), l.weight_shape()), (l.bias_name(), vec![l.c_out])])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    velocity: Option<Tensor>,
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
    step: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn format_version(&self) -> u32 {
        FORMAT_VERSION
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::InvalidSpec(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                grad: None,
                velocity: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of optimizer steps applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Same names in the same order with bit-identical values.
    pub fn bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.bitwise_eq(&b.value))
    }

    pub fn check_arch(&self, arch: &ArchSpec) -> Result<()> {
        let expected = arch.parameter_shapes();
        if expected.len() != self.entries.len() {
            return Err(NnError::ShapeConflict(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(&self.entries) {
            if name != have_name || shape.as_slice() != have.value.shape() {
                return Err(NnError::ShapeConflict(format!(
                    "expected `{name}` {shape:?}, found `{have_name}` {:?}",
                    have.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `graph`, as a differentiable leaf when
    /// `trainable` and as a constant otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients of a backward pass to the stored gradient buffers.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (name, &var) in &bound.vars {
            let (Some(param), Some(g)) = (self.entries.get_mut(name), grads.get(var)) else {
                continue;
            };
            match &mut param.grad {
                Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let param = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::InvalidSpec(format!("unknown parameter `{name}`")))?;
        if grad.shape() != param.value.shape() {
            return Err(NnError::ShapeConflict(format!(
                "gradient {:?} for `{name}` {:?}",
                grad.shape(),
                param.value.shape()
            )));
        }
        param.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.grad = None);
    }
}

/// Graph handles for every entry of a [`ParameterStore`].
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Panics on unknown names; stores are validated against their
    /// architecture before binding.
    pub fn var(&self, name: &str) -> Var {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// He-uniform weights (`U(−b, b)`, `b = √(6 / fan_in)`) and zero biases,
/// drawn layer by layer from a ChaCha8 stream seeded with `seed`.
pub fn init_parameters(arch: &ArchSpec, seed: u64) -> Result<ParameterStore> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for layer in &arch.layers {
        let bound = (6.0 / layer.fan_in() as f64).sqrt() as f32;
        let shape = layer.weight_shape();
        let n = shape.iter().product();
        let weights = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert(layer.weight_name(), Tensor::new(shape, weights)?)?;
        store.insert(layer.bias_name(), Tensor::zeros(&[layer.c_out]))?;
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    /// Inverse-time decay `lr / (1 + lr_decay · step)`; zero disables it.
    pub lr_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.0005,
            weight_decay: 0.0005,
            momentum: 0.9,
            lr_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NnError::InvalidOptimizer(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be non-negative");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f32 {
        self.learning_rate / (1.0 + self.lr_decay * step as f32)
    }
}

/// SGD with momentum and L2 weight decay folded into the update:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`. Clears every gradient.
pub fn sgd_step(store: &mut ParameterStore, cfg: &OptimizerConfig) -> Result<()> {
    if let Some(name) = store.entries.iter().find(|(_, p)| p.grad.is_none()).map(|(k, _)| k) {
        return Err(NnError::MissingGrad(name.clone()));
    }
    let lr = cfg.learning_rate_at(store.step);
    for param in store.entries.values_mut() {
        let grad = param.grad.take().expect("checked above");
        let velocity = param.velocity.get_or_insert_with(|| Tensor::zeros(param.value.shape()));
        for ((w, v), g) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(grad.data())
        {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
    }
    store.step += 1;
    Ok(())
}

pub fn encode_checkpoint(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(NnError::CorruptCheckpoint(format!(
                "file ends while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(NnError::CorruptCheckpoint("bad magic".into()));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| NnError::CorruptCheckpoint("name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u8("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if ndim == 0 || shape.contains(&0) {
            return Err(NnError::CorruptCheckpoint(format!("`{name}` has an empty shape")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NnError::CorruptCheckpoint(format!("`{name}` is too large")))?;
        let raw = r.take(n.saturating_mul(4), "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| NnError::CorruptCheckpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(NnError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(store)).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against `arch`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, arch: &ArchSpec) -> Result<ParameterStore> {
    let store = load_checkpoint(path)?;
    store.check_arch(arch)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            layers: vec![ConvLayerSpec::new("a", 3, 4, 3), ConvLayerSpec::new("b", 4, 2, 1)],
        }
    }

    fn single(value: f32, grad: f32) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::full(&[1], value)).unwrap();
        s.set_grad("w", Tensor::full(&[1], grad)).unwrap();
        s
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_parameters(&small_arch(), 11).unwrap();
        let b = init_parameters(&small_arch(), 11).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&init_parameters(&small_arch(), 12).unwrap()));
        assert!(a.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("b.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let names: Vec<_> = a.names().collect();
        assert_eq!(names, ["a.weight", "a.bias", "b.weight", "b.bias"]);
    }

    #[test]
    fn init_weights_follow_he_uniform_law() {
        // 10_000 draws from one layer; fan_in = 100 * 1 * 1.
        let arch = ArchSpec {
            layers: vec![ConvLayerSpec::new("big", 100, 100, 1)],
        };
        let store = init_parameters(&arch, 5).unwrap();
        let w = store.get("big.weight").unwrap().data();
        assert_eq!(w.len(), 10_000);
        let bound = (6.0f64 / 100.0).sqrt();
        assert!(w.iter().all(|&v| (v as f64).abs() <= bound));
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01 * bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let even = ArchSpec {
            layers: vec![ConvLayerSpec::new("x", 1, 1, 2)],
        };
        assert!(matches!(init_parameters(&even, 0), Err(NnError::InvalidSpec(_))));
        assert!(init_parameters(&ArchSpec::default(), 0).is_err());
        let dup = ArchSpec {
            layers: vec![ConvLayerSpec::new("x", 1, 1, 1), ConvLayerSpec::new("x", 1, 1, 1)],
        };
        assert!(init_parameters(&dup, 0).is_err());
    }

    #[test]
    fn sgd_plain_step_and_zero_lr() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            momentum: 0.0,
            lr_decay: 0.0,
        };
        let mut s = single(1.0, 2.0);
        sgd_step(&mut s, &cfg).unwrap();
        assert!((s.get("w").unwrap().item() - 0.8).abs() < 1e-7);
        assert!(s.grad("w").is_none());

        let mut s = single(1.0, 2.0);
        let frozen = OptimizerConfig {
            learning_rate: 0.0,
            ..cfg
        };
        sgd_step(&mut s, &frozen).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        // v1 = g + wd·w0, w1 = w0 − lr·v1; v2 = μ·v1 + g + wd·w1, w2 = w1 − lr·v2.
        let (lr, mu, wd, g, w0) = (0.1f32, 0.9f32, 0.01f32, 0.5f32, 2.0f32);
        let cfg = OptimizerConfig {
            learning_rate: lr,
            weight_decay: wd,
            momentum: mu,
            lr_decay: 0.0,
        };
        let mut s = single(w0, g);
        sgd_step(&mut s, &cfg).unwrap();
        s.set_grad("w", Tensor::full(&[1], g)).unwrap();
        sgd_step(&mut s, &cfg).unwrap();
        let v1 = g + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g + wd * w1;
        let w2 = w1 - lr * v2;
        assert_eq!(s.get("w").unwrap().item(), w2);
        assert_eq!(s.steps(), 2);
    }

    #[test]
    fn weight_decay_equals_descent_on_penalised_quadratic() {
        // loss = ½ a (w − c)² + (wd/2) w²  ⇒  ∇ = a (w − c) + wd·w.
        let (a, c, wd, lr, w0) = (3.0f32, 0.5f32, 0.1f32, 0.05f32, 1.5f32);
        let cfg = OptimizerConfig {
            learning_rate: lr,
            weight_decay: wd,
            momentum: 0.0,
            lr_decay: 0.0,
        };
        let mut s = single(w0, a * (w0 - c));
        sgd_step(&mut s, &cfg).unwrap();
        let expected = w0 - lr * (a * (w0 - c) + wd * w0);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-7);
    }

    #[test]
    fn sgd_requires_all_gradients() {
        let mut s = single(1.0, 1.0);
        s.insert("other", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            sgd_step(&mut s, &OptimizerConfig::default()),
            Err(NnError::MissingGrad(name)) if name == "other"
        ));
    }

    #[test]
    fn optimizer_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = [
            OptimizerConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            OptimizerConfig {
                weight_decay: -1.0,
                ..Default::default()
            },
            OptimizerConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let decayed = OptimizerConfig {
            lr_decay: 1.0,
            ..Default::default()
        };
        assert_eq!(decayed.learning_rate_at(1), 0.00025);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let store = init_parameters(&small_arch(), 3).unwrap();
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint_for(&path, &small_arch()).unwrap();
        assert!(loaded.bitwise_eq(&store));

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"SSTCKPT1");
        let truncated = dir.path().join("t.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(NnError::CorruptCheckpoint(_))
        ));
        assert!(matches!(
            decode_checkpoint(b"NOTACKPT\0\0\0\0"),
            Err(NnError::CorruptCheckpoint(_))
        ));
        assert!(matches!(decode_checkpoint(b"SSTC"), Err(NnError::CorruptCheckpoint(_))));

        let other = ArchSpec {
            layers: vec![ConvLayerSpec::new("a", 3, 5, 3)],
        };
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(NnError::ShapeConflict(_))
        ));
        assert!(matches!(
            load_checkpoint(dir.path().join("missing.ckpt")),
            Err(NnError::Io { .. })
        ));
    }
}
