use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::Scalar;
use crate::error::{Error, Result};
use crate::seed;

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

/// Affine map `y = x W + b` with `W: [in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

/// Separate query/key/value projections used by globally attending tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalProjections<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub attn_norm: Norm<F>,
    pub global: Option<GlobalProjections<F>>,
    pub ffn_inner: Linear<F>,
    pub ffn_outer: Linear<F>,
    pub ffn_norm: Norm<F>,
}

/// Dense layer + norm in front of the tied output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<F> {
    pub dense: Linear<F>,
    pub norm: Norm<F>,
    pub decoder_bias: Array1<F>,
}

/// Every tensor of the encoder. The MLM output projection reuses
/// `token_embedding`; there is no separate decoder matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub embed_norm: Norm<F>,
    pub layers: Vec<LayerParams<F>>,
    pub mlm_head: MlmHead<F>,
    pub classifier: Option<Linear<F>>,
}

/// Role of a tensor; decides weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    Norm,
}

impl TensorKind {
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Embedding | TensorKind::Weight)
    }
}

#[derive(Debug)]
pub struct TensorRef<'a, F> {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

#[derive(Debug)]
pub struct TensorMut<'a, F> {
    pub name: String,
    pub kind: TensorKind,
    pub data: &'a mut [F],
}

macro_rules! emit_ref {
    ($out:ident, $name:expr, $kind:ident, $a:expr) => {{
        let a = &$a;
        $out.push(TensorRef {
            name: $name,
            kind: TensorKind::$kind,
            shape: a.shape().to_vec(),
            data: a.as_slice().expect("standard layout"),
        });
    }};
}

macro_rules! emit_mut {
    ($out:ident, $name:expr, $kind:ident, $a:expr) => {{
        $out.push(TensorMut {
            name: $name,
            kind: TensorKind::$kind,
            data: $a.as_slice_mut().expect("standard layout"),
        });
    }};
}

/// Enumerates every tensor in a fixed order (the checkpoint order).
macro_rules! visit_tensors {
    ($p:expr, $out:ident, $emit:ident, $iter:ident, $opt:ident) => {{
        $emit!($out, "embeddings.token".to_string(), Embedding, $p.token_embedding);
        $emit!($out, "embeddings.position".to_string(), Embedding, $p.position_embedding);
        $emit!($out, "embeddings.norm.gain".to_string(), Norm, $p.embed_norm.gain);
        $emit!($out, "embeddings.norm.bias".to_string(), Norm, $p.embed_norm.bias);
        for (i, layer) in $p.layers.$iter().enumerate() {
            let n = |s: &str| format!("layers.{i}.{s}");
            $emit!($out, n("attention.query.weight"), Weight, layer.query.weight);
            $emit!($out, n("attention.query.bias"), Bias, layer.query.bias);
            $emit!($out, n("attention.key.weight"), Weight, layer.key.weight);
            $emit!($out, n("attention.key.bias"), Bias, layer.key.bias);
            $emit!($out, n("attention.value.weight"), Weight, layer.value.weight);
            $emit!($out, n("attention.value.bias"), Bias, layer.value.bias);
            $emit!($out, n("attention.output.weight"), Weight, layer.output.weight);
            $emit!($out, n("attention.output.bias"), Bias, layer.output.bias);
            $emit!($out, n("attention.norm.gain"), Norm, layer.attn_norm.gain);
            $emit!($out, n("attention.norm.bias"), Norm, layer.attn_norm.bias);
            if let Some(g) = layer.global.$opt() {
                $emit!($out, n("attention.global_query.weight"), Weight, g.query.weight);
                $emit!($out, n("attention.global_query.bias"), Bias, g.query.bias);
                $emit!($out, n("attention.global_key.weight"), Weight, g.key.weight);
                $emit!($out, n("attention.global_key.bias"), Bias, g.key.bias);
                $emit!($out, n("attention.global_value.weight"), Weight, g.value.weight);
                $emit!($out, n("attention.global_value.bias"), Bias, g.value.bias);
            }
            $emit!($out, n("ffn.inner.weight"), Weight, layer.ffn_inner.weight);
            $emit!($out, n("ffn.inner.bias"), Bias, layer.ffn_inner.bias);
            $emit!($out, n("ffn.outer.weight"), Weight, layer.ffn_outer.weight);
            $emit!($out, n("ffn.outer.bias"), Bias, layer.ffn_outer.bias);
            $emit!($out, n("ffn.norm.gain"), Norm, layer.ffn_norm.gain);
            $emit!($out, n("ffn.norm.bias"), Norm, layer.ffn_norm.bias);
        }
        $emit!($out, "mlm_head.dense.weight".to_string(), Weight, $p.mlm_head.dense.weight);
        $emit!($out, "mlm_head.dense.bias".to_string(), Bias, $p.mlm_head.dense.bias);
        $emit!($out, "mlm_head.norm.gain".to_string(), Norm, $p.mlm_head.norm.gain);
        $emit!($out, "mlm_head.norm.bias".to_string(), Norm, $p.mlm_head.norm.bias);
        $emit!($out, "mlm_head.decoder_bias".to_string(), Bias, $p.mlm_head.decoder_bias);
        if let Some(c) = $p.classifier.$opt() {
            $emit!($out, "classifier.weight".to_string(), Weight, c.weight);
            $emit!($out, "classifier.bias".to_string(), Bias, c.bias);
        }
    }};
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn random(inputs: usize, outputs: usize, rng: &mut seed::Rng) -> Self {
        Linear {
            weight: truncated_normal((inputs, outputs), rng),
            bias: Array1::zeros(outputs),
        }
    }
}

impl<F: Scalar> Norm<F> {
    pub fn identity(width: usize) -> Self {
        Norm {
            gain: Array1::ones(width),
            bias: Array1::zeros(width),
        }
    }
}

/// Draws `N(0, INIT_STD^2)` samples, redrawing anything beyond two standard
/// deviations.
pub fn truncated_normal<F: Scalar>(shape: (usize, usize), rng: &mut seed::Rng) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return F::from_f64(z * INIT_STD).expect("finite");
        }
    })
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh parameters for `config`, reproducible per seed. Sliding configs
    /// get global projections copied from the local ones.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut rng = seed::rng(seed, &[seed::INIT]);
        let token_embedding = truncated_normal((config.vocab_size, h), &mut rng);
        let position_embedding = truncated_normal((config.max_positions, h), &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| {
                let query = Linear::random(h, h, &mut rng);
                let key = Linear::random(h, h, &mut rng);
                let value = Linear::random(h, h, &mut rng);
                let global = config.is_sliding().then(|| GlobalProjections {
                    query: query.clone(),
                    key: key.clone(),
                    value: value.clone(),
                });
                LayerParams {
                    query,
                    key,
                    value,
                    output: Linear::random(h, h, &mut rng),
                    attn_norm: Norm::identity(h),
                    global,
                    ffn_inner: Linear::random(h, config.ffn_inner, &mut rng),
                    ffn_outer: Linear::random(config.ffn_inner, h, &mut rng),
                    ffn_norm: Norm::identity(h),
                }
            })
            .collect();
        let mlm_head = MlmHead {
            dense: Linear::random(h, h, &mut rng),
            norm: Norm::identity(h),
            decoder_bias: Array1::zeros(config.vocab_size),
        };
        Ok(ModelParams {
            config: config.clone(),
            token_embedding,
            position_embedding,
            embed_norm: Norm::identity(h),
            layers,
            mlm_head,
            classifier: None,
        })
    }

    /// Attaches a freshly initialised token-classification head.
    pub fn with_classifier(mut self, num_labels: usize, seed: u64) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::invalid("classifier needs at least one label"));
        }
        let mut rng = seed::rng(seed, &[seed::INIT, 0xC1A5]);
        self.classifier = Some(Linear::random(self.config.hidden, num_labels, &mut rng));
        Ok(self)
    }

    pub fn num_labels(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.bias.len())
    }

    /// The MLM output projection. Shares storage with `token_embedding`.
    pub fn mlm_output_weight(&self) -> &Array2<F> {
        &self.token_embedding
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::new();
        visit_tensors!(self, out, emit_ref, iter, as_ref);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        let mut out = Vec::new();
        visit_tensors!(self, out, emit_mut, iter_mut, as_mut);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Same structure, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| F::zero())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = f(*x));
        }
        out
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let c = |x: &F| G::from_f64(x.to_f64().expect("float")).expect("float");
        let lin = |l: &Linear<F>| Linear {
            weight: l.weight.map(c),
            bias: l.bias.map(c),
        };
        let norm = |n: &Norm<F>| Norm {
            gain: n.gain.map(c),
            bias: n.bias.map(c),
        };
        ModelParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.map(c),
            position_embedding: self.position_embedding.map(c),
            embed_norm: norm(&self.embed_norm),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    query: lin(&l.query),
                    key: lin(&l.key),
                    value: lin(&l.value),
                    output: lin(&l.output),
                    attn_norm: norm(&l.attn_norm),
                    global: l.global.as_ref().map(|g| GlobalProjections {
                        query: lin(&g.query),
                        key: lin(&g.key),
                        value: lin(&g.value),
                    }),
                    ffn_inner: lin(&l.ffn_inner),
                    ffn_outer: lin(&l.ffn_outer),
                    ffn_norm: norm(&l.ffn_norm),
                })
                .collect(),
            mlm_head: MlmHead {
                dense: lin(&self.mlm_head.dense),
                norm: norm(&self.mlm_head.norm),
                decoder_bias: self.mlm_head.decoder_bias.map(c),
            },
            classifier: self.classifier.as_ref().map(lin),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Checks that every tensor's shape matches what `config` implies.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = ModelParams::<F>::skeleton(&self.config, self.num_labels(), self.layers.iter().any(|l| l.global.is_some()));
        let ours = self.tensors();
        let expected = reference.tensors();
        if ours.len() != expected.len() {
            return Err(Error::Shape(format!(
                "{} tensors present, config implies {}",
                ours.len(),
                expected.len()
            )));
        }
        for (a, b) in ours.iter().zip(&expected) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Zero-filled parameters with the layout implied by a config.
    pub fn skeleton(config: &ModelConfig, num_labels: Option<usize>, global: bool) -> Self {
        let h = config.hidden;
        let layer = LayerParams {
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            output: Linear::zeros(h, h),
            attn_norm: Norm::identity(h),
            global: global.then(|| GlobalProjections {
                query: Linear::zeros(h, h),
                key: Linear::zeros(h, h),
                value: Linear::zeros(h, h),
            }),
            ffn_inner: Linear::zeros(h, config.ffn_inner),
            ffn_outer: Linear::zeros(config.ffn_inner, h),
            ffn_norm: Norm::identity(h),
        };
        ModelParams {
            config: config.clone(),
            token_embedding: Array2::zeros((config.vocab_size, h)),
            position_embedding: Array2::zeros((config.max_positions, h)),
            embed_norm: Norm::identity(h),
            layers: vec![layer; config.n_layers],
            mlm_head: MlmHead {
                dense: Linear::zeros(h, h),
                norm: Norm::identity(h),
                decoder_bias: Array1::zeros(config.vocab_size),
            },
            classifier: num_labels.map(|n| Linear::zeros(h, n)),
        }
    }
}

/// Uniform draw helper for dropout masks.
pub(crate) fn keep_mask<F: Scalar>(shape: (usize, usize), p: f64, rng: &mut seed::Rng) -> Array2<F> {
    let scale = F::from_f64(1.0 / (1.0 - p)).expect("finite");
    Array2::from_shape_simple_fn(shape, || {
        if rng.r#gen::<f64>() < p { F::zero() } else { scale }
    })
}
