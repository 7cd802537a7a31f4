//! The rotary Transformer backbone: configuration, parameter storage,
//! initialization, parameter accounting, and checkpoint persistence.

pub mod backward;
pub mod checkpoint;
pub mod forward;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, zeros_like, GradStore};
pub use forward::{forward, relay_transform, ForwardCache, ForwardOutput, RelayState};

/// Scalar type for model arithmetic: f32 for training and evaluation, f64
/// for finite-difference verification.
pub trait Real: ndarray::NdFloat + std::iter::Sum {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Initial value of the relay norm scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelayGammaInit {
    Ones,
    Zeros,
}

/// Architecture hyperparameters. Defaults match the full-size Sudoku
/// model; tests shrink them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Leading head dimensions receiving the rotary rotation; 0 disables
    /// position information entirely.
    pub rotary_width: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    pub relay_enabled: bool,
    pub relay_gamma_init: RelayGammaInit,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 384,
            d_ff: 1536,
            n_heads: 6,
            head_dim: 64,
            rotary_width: 64,
            dropout: 0.1,
            vocab_size: 17,
            tie_embeddings: true,
            relay_enabled: true,
            relay_gamma_init: RelayGammaInit::Ones,
            seq_len: 81,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            d_ff: 128,
            n_heads: 2,
            head_dim: 16,
            rotary_width: 16,
            dropout: 0.0,
            vocab_size: 17,
            tie_embeddings: false,
            relay_enabled: true,
            relay_gamma_init: RelayGammaInit::Ones,
            seq_len: 81,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} must equal n_heads x head_dim {}x{}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.rotary_width > self.head_dim {
            return Err(Error::Config(format!(
                "rotary_width {} exceeds head_dim {}",
                self.rotary_width, self.head_dim
            )));
        }
        if self.rotary_width % 2 != 0 {
            return Err(Error::Config("rotary_width must be even".into()));
        }
        if self.vocab_size < 11 {
            return Err(Error::Config(format!(
                "vocab_size {} too small for digits, blank, and mask",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.seq_len == 0 {
            return Err(Error::Config("zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// Affine normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Real> Norm<F> {
    fn identity(d: usize) -> Norm<F> {
        Norm {
            gamma: Array1::from_elem(d, F::one()),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Norm<F> {
        Norm {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }
}

/// One pre-norm Transformer block. Attention projections are bias-free;
/// the MLP carries biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub norm1: Norm<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub norm2: Norm<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// All learnable arrays. When `config.tie_embeddings` is set the
/// unembedding slot is empty and logits use the transpose of `embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// vocab_size x d_model.
    pub embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Norm<F>,
    /// Present iff `config.relay_enabled`.
    pub relay_norm: Option<Norm<F>>,
    /// d_model x vocab_size; present iff untied.
    pub unembedding: Option<Array2<F>>,
}

/// Closed-form learnable scalar count for a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let per_layer = 4 * d * d + 2 * d * cfg.d_ff + cfg.d_ff + d + 2 * (2 * d);
    let mut total = cfg.vocab_size * d + cfg.n_layers * per_layer + 2 * d;
    if cfg.relay_enabled {
        total += 2 * d;
    }
    if !cfg.tie_embeddings {
        total += d * cfg.vocab_size;
    }
    total
}

/// Normal(0, 0.02) resampled beyond two standard deviations. Draws happen
/// in f64 so every precision builds the same weights.
fn init_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let dist = Normal::new(0.0f64, 0.02).expect("valid sigma");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v = dist.sample(rng);
        if v.abs() <= 0.04 {
            return F::from_f64(v);
        }
    })
}

/// Allocates and initializes parameters: truncated-normal projections and
/// embeddings, identity norms, zero biases, relay scale per config.
pub fn build_model<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    use rand::SeedableRng;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let embedding = init_matrix(&mut rng, cfg.vocab_size, d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            norm1: Norm::identity(d),
            wq: init_matrix(&mut rng, d, d),
            wk: init_matrix(&mut rng, d, d),
            wv: init_matrix(&mut rng, d, d),
            wo: init_matrix(&mut rng, d, d),
            norm2: Norm::identity(d),
            w1: init_matrix(&mut rng, d, cfg.d_ff),
            b1: Array1::zeros(cfg.d_ff),
            w2: init_matrix(&mut rng, cfg.d_ff, d),
            b2: Array1::zeros(d),
        })
        .collect();
    let relay_norm = cfg.relay_enabled.then(|| match cfg.relay_gamma_init {
        RelayGammaInit::Ones => Norm::identity(d),
        RelayGammaInit::Zeros => Norm::zeros(d),
    });
    let unembedding =
        (!cfg.tie_embeddings).then(|| init_matrix(&mut rng, d, cfg.vocab_size));
    Ok(ModelParams {
        config: cfg.clone(),
        embedding,
        layers,
        final_norm: Norm::identity(d),
        relay_norm,
        unembedding,
    })
}

/// Canonical array names for a configuration, fixing checkpoint manifest
/// order and optimizer slot order.
pub fn array_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for i in 0..cfg.n_layers {
        for field in [
            "norm1.gamma",
            "norm1.beta",
            "wq",
            "wk",
            "wv",
            "wo",
            "norm2.gamma",
            "norm2.beta",
            "w1",
            "b1",
            "w2",
            "b2",
        ] {
            names.push(format!("layer{i}.{field}"));
        }
    }
    names.push("final_norm.gamma".to_string());
    names.push("final_norm.beta".to_string());
    if cfg.relay_enabled {
        names.push("relay_norm.gamma".to_string());
        names.push("relay_norm.beta".to_string());
    }
    if !cfg.tie_embeddings {
        names.push("unembedding".to_string());
    }
    names
}

/// Either rank of array, borrowed dynamically for uniform traversal.
pub enum ArrayRef<'a, F> {
    D1(&'a Array1<F>),
    D2(&'a Array2<F>),
}

pub enum ArrayMut<'a, F> {
    D1(&'a mut Array1<F>),
    D2(&'a mut Array2<F>),
}

impl<'a, F> From<&'a Array1<F>> for ArrayRef<'a, F> {
    fn from(a: &'a Array1<F>) -> Self {
        ArrayRef::D1(a)
    }
}

impl<'a, F> From<&'a Array2<F>> for ArrayRef<'a, F> {
    fn from(a: &'a Array2<F>) -> Self {
        ArrayRef::D2(a)
    }
}

impl<'a, F> From<&'a mut Array1<F>> for ArrayMut<'a, F> {
    fn from(a: &'a mut Array1<F>) -> Self {
        ArrayMut::D1(a)
    }
}

impl<'a, F> From<&'a mut Array2<F>> for ArrayMut<'a, F> {
    fn from(a: &'a mut Array2<F>) -> Self {
        ArrayMut::D2(a)
    }
}

impl<'a, F> ArrayRef<'a, F> {
    pub fn view(&self) -> ArrayViewD<'_, F> {
        match self {
            ArrayRef::D1(a) => a.view().into_dyn(),
            ArrayRef::D2(a) => a.view().into_dyn(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayRef::D1(a) => a.len(),
            ArrayRef::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<'a, F> ArrayMut<'a, F> {
    pub fn view_mut(&mut self) -> ArrayViewMutD<'_, F> {
        match self {
            ArrayMut::D1(a) => a.view_mut().into_dyn(),
            ArrayMut::D2(a) => a.view_mut().into_dyn(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayMut::D1(a) => a.len(),
            ArrayMut::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<F: Real> ModelParams<F> {
    /// Arrays in canonical order, aligned with [`array_names`].
    pub fn arrays(&self) -> Vec<ArrayRef<'_, F>> {
        let mut out: Vec<ArrayRef<'_, F>> = vec![(&self.embedding).into()];
        for layer in &self.layers {
            out.push((&layer.norm1.gamma).into());
            out.push((&layer.norm1.beta).into());
            out.push((&layer.wq).into());
            out.push((&layer.wk).into());
            out.push((&layer.wv).into());
            out.push((&layer.wo).into());
            out.push((&layer.norm2.gamma).into());
            out.push((&layer.norm2.beta).into());
            out.push((&layer.w1).into());
            out.push((&layer.b1).into());
            out.push((&layer.w2).into());
            out.push((&layer.b2).into());
        }
        out.push((&self.final_norm.gamma).into());
        out.push((&self.final_norm.beta).into());
        if let Some(n) = &self.relay_norm {
            out.push((&n.gamma).into());
            out.push((&n.beta).into());
        }
        if let Some(u) = &self.unembedding {
            out.push(u.into());
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<ArrayMut<'_, F>> {
        let mut out: Vec<ArrayMut<'_, F>> = vec![(&mut self.embedding).into()];
        for layer in &mut self.layers {
            out.push((&mut layer.norm1.gamma).into());
            out.push((&mut layer.norm1.beta).into());
            out.push((&mut layer.wq).into());
            out.push((&mut layer.wk).into());
            out.push((&mut layer.wv).into());
            out.push((&mut layer.wo).into());
            out.push((&mut layer.norm2.gamma).into());
            out.push((&mut layer.norm2.beta).into());
            out.push((&mut layer.w1).into());
            out.push((&mut layer.b1).into());
            out.push((&mut layer.w2).into());
            out.push((&mut layer.b2).into());
        }
        out.push((&mut self.final_norm.gamma).into());
        out.push((&mut self.final_norm.beta).into());
        if let Some(n) = &mut self.relay_norm {
            out.push((&mut n.gamma).into());
            out.push((&mut n.beta).into());
        }
        if let Some(u) = &mut self.unembedding {
            out.push(u.into());
        }
        out
    }

    /// Scalars actually allocated; must equal [`parameter_count`].
    pub fn allocated_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }
}
