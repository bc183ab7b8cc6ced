//! Flat parameter storage.
//!
//! All model parameters live in one contiguous `Vec<T>` addressed through a
//! [`Layout`]: an ordered list of named tensors with shapes and offsets. The
//! flat form is what the optimizer, checkpoint format, and gradient
//! accumulation operate on; the forward pass materializes per-layer views
//! from it. Layout order is also initialization order, so a seed fully
//! determines every parameter.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KernelError, Result};
use crate::gates::{init_gate_params, GateInit, GateParams};
use crate::numerics::Matrix;
use crate::real::Real;

use super::ModelConfig;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered map from tensor names to slices of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let h = cfg.heads;
        let dk = cfg.head_dk;
        let dv = cfg.head_dv;
        let w = cfg.conv_width;
        let m = cfg.mlp_hidden();
        let mut b = LayoutBuilder::default();
        b.push("embed.weight", vec![cfg.vocab, d]);
        for l in 0..cfg.layers {
            b.push(format!("layers.{l}.norm1.g"), vec![d]);
            b.push(format!("layers.{l}.wq"), vec![d, h * dk]);
            b.push(format!("layers.{l}.wk"), vec![d, h * dk]);
            b.push(format!("layers.{l}.wv"), vec![d, h * dv]);
            b.push(format!("layers.{l}.conv_q"), vec![w, h * dk]);
            b.push(format!("layers.{l}.conv_k"), vec![w, h * dk]);
            b.push(format!("layers.{l}.conv_v"), vec![w, h * dv]);
            b.push(format!("layers.{l}.gates.w_delta"), vec![d, h]);
            b.push(format!("layers.{l}.gates.w_beta"), vec![d, h]);
            b.push(format!("layers.{l}.gates.a_log"), vec![h]);
            b.push(format!("layers.{l}.gates.delta_bias"), vec![h]);
            b.push(format!("layers.{l}.gates.b_logit"), vec![h]);
            b.push(format!("layers.{l}.gates.d_value"), vec![h]);
            b.push(format!("layers.{l}.w_outgate"), vec![d, h * dv]);
            b.push(format!("layers.{l}.w_out"), vec![h * dv, d]);
            b.push(format!("layers.{l}.norm2.g"), vec![d]);
            b.push(format!("layers.{l}.mlp.w1"), vec![d, m]);
            b.push(format!("layers.{l}.mlp.w2"), vec![m, d]);
        }
        b.push("final_norm.g", vec![d]);
        b.finish()
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&LayoutEntry> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| KernelError::contract("parameter layout", format!("no tensor named {name:?}")))
    }
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        let name = name.into();
        let len: usize = shape.iter().product();
        let prev = self.by_name.insert(name.clone(), self.entries.len());
        assert!(prev.is_none(), "duplicate tensor name {name:?}");
        self.entries.push(LayoutEntry { name, offset: self.total, shape });
        self.total += len;
    }

    fn finish(self) -> Layout {
        Layout { entries: self.entries, by_name: self.by_name, total: self.total }
    }
}

/// The model's parameters (or a gradient of the same shape) as one flat
/// vector plus its layout.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    layout: Arc<Layout>,
    data: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = Arc::new(Layout::for_config(cfg));
        let data = vec![T::zero(); layout.total_len()];
        ModelParams { layout, data }
    }

    /// Zero tensor sharing an existing layout (gradient accumulators).
    pub fn zeros_like(other: &ModelParams<T>) -> Self {
        ModelParams {
            layout: Arc::clone(&other.layout),
            data: vec![T::zero(); other.layout.total_len()],
        }
    }

    pub fn from_layout_data(layout: Arc<Layout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(KernelError::dim(
                "model parameters",
                format!("{}", layout.total_len()),
                format!("{}", data.len()),
            ));
        }
        Ok(ModelParams { layout, data })
    }

    /// Seeded initialization. Layout order is draw order, so the result is a
    /// pure function of `(cfg, seed)`:
    /// - embedding: normal, std 0.02;
    /// - projections and MLP weights: normal, std `1/sqrt(fan_in)`;
    /// - convolutions: identity (current-token tap 1, history taps 0);
    /// - norm scales: 1;
    /// - gate parameters: see [`init_gate_params`].
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let hdv = cfg.heads * cfg.head_dv;
        let m = cfg.mlp_hidden();

        fill_normal(p.slice_mut("embed.weight").unwrap(), 0.02, &mut rng);
        for l in 0..cfg.layers {
            let n = |suffix: &str| format!("layers.{l}.{suffix}");
            fill_ones(p.slice_mut(&n("norm1.g")).unwrap());
            fill_normal(p.slice_mut(&n("wq")).unwrap(), (1.0 / d as f64).sqrt(), &mut rng);
            fill_normal(p.slice_mut(&n("wk")).unwrap(), (1.0 / d as f64).sqrt(), &mut rng);
            fill_normal(p.slice_mut(&n("wv")).unwrap(), (1.0 / d as f64).sqrt(), &mut rng);
            fill_identity_conv(p.slice_mut(&n("conv_q")).unwrap(), cfg.heads * cfg.head_dk);
            fill_identity_conv(p.slice_mut(&n("conv_k")).unwrap(), cfg.heads * cfg.head_dk);
            fill_identity_conv(p.slice_mut(&n("conv_v")).unwrap(), hdv);
            let gates: GateParams<T> =
                init_gate_params(&GateInit::new(d, cfg.heads, cfg.d_init), &mut rng);
            p.slice_mut(&n("gates.w_delta")).unwrap().copy_from_slice(gates.w_delta.as_slice());
            p.slice_mut(&n("gates.w_beta")).unwrap().copy_from_slice(gates.w_beta.as_slice());
            p.slice_mut(&n("gates.a_log")).unwrap().copy_from_slice(&gates.a_log);
            p.slice_mut(&n("gates.delta_bias")).unwrap().copy_from_slice(&gates.delta_bias);
            p.slice_mut(&n("gates.b_logit")).unwrap().copy_from_slice(&gates.b_logit);
            p.slice_mut(&n("gates.d_value")).unwrap().copy_from_slice(&gates.d_value);
            fill_normal(p.slice_mut(&n("w_outgate")).unwrap(), (1.0 / d as f64).sqrt(), &mut rng);
            fill_normal(p.slice_mut(&n("w_out")).unwrap(), (1.0 / hdv as f64).sqrt(), &mut rng);
            fill_ones(p.slice_mut(&n("norm2.g")).unwrap());
            fill_normal(p.slice_mut(&n("mlp.w1")).unwrap(), (1.0 / d as f64).sqrt(), &mut rng);
            fill_normal(p.slice_mut(&n("mlp.w2")).unwrap(), (1.0 / m as f64).sqrt(), &mut rng);
        }
        fill_ones(p.slice_mut("final_norm.g").unwrap());
        p
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn slice(&self, name: &str) -> Result<&[T]> {
        let e = self.layout.entry(name)?;
        Ok(&self.data[e.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let e = self.layout.entry(name)?;
        let r = e.range();
        Ok(&mut self.data[r])
    }

    /// Copy a 2-D entry out as a [`Matrix`].
    pub fn matrix(&self, name: &str) -> Result<Matrix<T>> {
        let e = self.layout.entry(name)?;
        if e.shape.len() != 2 {
            return Err(KernelError::contract(
                "parameter layout",
                format!("tensor {name:?} has shape {:?}, expected 2-D", e.shape),
            ));
        }
        Matrix::from_vec(e.shape[0], e.shape[1], self.data[e.range()].to_vec())
    }

    /// Accumulate `m` into the named 2-D entry.
    pub fn add_matrix(&mut self, name: &str, m: &Matrix<T>) -> Result<()> {
        let e = self.layout.entry(name)?;
        if e.shape != [m.rows(), m.cols()] {
            return Err(KernelError::dim(
                "parameter tensor",
                format!("{name}: {:?}", e.shape),
                format!("[{}, {}]", m.rows(), m.cols()),
            ));
        }
        let r = e.range();
        for (dst, src) in self.data[r].iter_mut().zip(m.as_slice()) {
            *dst = *dst + *src;
        }
        Ok(())
    }

    /// Accumulate a flat slice into the named entry.
    pub fn add_slice(&mut self, name: &str, src: &[T]) -> Result<()> {
        let dst = self.slice_mut(name)?;
        if dst.len() != src.len() {
            return Err(KernelError::dim(
                "parameter tensor",
                format!("{name}: {} values", dst.len()),
                format!("{}", src.len()),
            ));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *d + *s;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

fn fill_normal<T: Real, R: rand::Rng>(dst: &mut [T], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).unwrap();
    for x in dst {
        *x = T::from_f64(dist.sample(rng));
    }
}

fn fill_ones<T: Real>(dst: &mut [T]) {
    for x in dst {
        *x = T::one();
    }
}

/// Depthwise-conv identity: tap 0 (the current token) is 1 for every channel,
/// the history taps are 0. Kernel storage is `width x channels`, row = lag.
fn fill_identity_conv<T: Real>(dst: &mut [T], channels: usize) {
    for (i, x) in dst.iter_mut().enumerate() {
        *x = if i < channels { T::one() } else { T::zero() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            model_dim: 6,
            layers: 2,
            heads: 2,
            head_dk: 3,
            head_dv: 2,
            conv_width: 3,
            mlp_expansion: 1.5,
            chunk_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn layout_is_contiguous_and_complete() {
        let cfg = tiny_cfg();
        let layout = Layout::for_config(&cfg);
        let mut cursor = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, cursor, "{} not contiguous", e.name);
            assert!(!e.is_empty(), "{} empty", e.name);
            cursor += e.len();
        }
        assert_eq!(cursor, layout.total_len());
        // Two layers plus embedding and final norm.
        assert_eq!(layout.entries().len(), 2 * 18 + 2);
        assert!(layout.entry("does.not.exist").is_err());
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let cfg = tiny_cfg();
        let a: ModelParams<f64> = ModelParams::init(&cfg, 9);
        let b: ModelParams<f64> = ModelParams::init(&cfg, 9);
        assert_eq!(a.data(), b.data());
        let c: ModelParams<f64> = ModelParams::init(&cfg, 10);
        assert_ne!(a.data(), c.data());

        // Norm scales start at one.
        assert!(a.slice("layers.0.norm1.g").unwrap().iter().all(|&x| x == 1.0));
        assert!(a.slice("final_norm.g").unwrap().iter().all(|&x| x == 1.0));
        // Convolution starts as the identity over the current token.
        let conv = a.matrix("layers.1.conv_k").unwrap();
        for c in 0..conv.cols() {
            assert_eq!(conv.get(0, c), 1.0);
            for w in 1..conv.rows() {
                assert_eq!(conv.get(w, c), 0.0);
            }
        }
        // Delta projection starts at zero; beta projection does not.
        assert!(a.slice("layers.0.gates.w_delta").unwrap().iter().all(|&x| x == 0.0));
        assert!(a.slice("layers.0.gates.w_beta").unwrap().iter().any(|&x| x != 0.0));
        assert!(a.slice("layers.0.gates.b_logit").unwrap().iter().all(|&x| x == 0.0));
        assert!(a
            .slice("layers.0.gates.d_value")
            .unwrap()
            .iter()
            .all(|&x| (x - 0.02).abs() < 1e-12));
    }

    #[test]
    fn embedding_std_matches_init_scale() {
        let cfg = ModelConfig { vocab: 256, model_dim: 64, ..ModelConfig::default() };
        let p: ModelParams<f64> = ModelParams::init(&cfg, 1);
        let e = p.slice("embed.weight").unwrap();
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.02).abs() < 0.02 * 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn add_matrix_checks_shape() {
        let cfg = tiny_cfg();
        let mut g: ModelParams<f64> = ModelParams::zeros(&cfg);
        let bad = Matrix::<f64>::zeros(3, 3);
        assert!(g.add_matrix("layers.0.wq", &bad).is_err());
        let ok = Matrix::<f64>::from_fn(6, 6, |i, j| (i * 6 + j) as f64);
        g.add_matrix("layers.0.wq", &ok).unwrap();
        g.add_matrix("layers.0.wq", &ok).unwrap();
        assert_eq!(g.matrix("layers.0.wq").unwrap().get(1, 2), 16.0);
    }

    #[test]
    fn cast_roundtrip_preserves_f32_values() {
        let cfg = tiny_cfg();
        let p: ModelParams<f32> = ModelParams::init(&cfg, 3);
        let q: ModelParams<f32> = p.cast::<f64>().cast::<f32>();
        assert_eq!(p.data(), q.data());
    }
}
