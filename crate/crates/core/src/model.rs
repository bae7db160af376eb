//! RepeatNet parameters, configuration and the batched forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Batch, PrefixExample, PAD};
use crate::decoders;
use crate::encoder::{self, EncodedBatch};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("item index {index} outside vocabulary of {size}")]
    Vocabulary { index: usize, size: usize },
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Model variant used for the mechanism comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// Explore decoder only, over all items, with p-mode fixed to (0, 1).
    NoRepeat,
    /// Explore decoder sees `[h_t, h_t]` instead of `[h_t, c^e]`.
    NoAttention,
}

impl Ablation {
    pub fn id(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRepeat => "no-repeat",
            Ablation::NoAttention => "no-attention",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-repeat" => Ok(Ablation::NoRepeat),
            "no-attention" => Ok(Ablation::NoAttention),
            other => Err(ModelError::Config(format!(
                "unknown ablation `{other}` (expected full, no-repeat or no-attention)"
            ))),
        }
    }
}

/// Sizes and variant of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_items: usize,
    pub emb_size: usize,
    pub hidden_size: usize,
    pub attn_size: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(num_items: usize) -> Self {
        Self {
            num_items,
            emb_size: 100,
            hidden_size: 100,
            attn_size: 100,
            ablation: Ablation::Full,
        }
    }

    pub fn with_sizes(num_items: usize, emb_size: usize, hidden_size: usize) -> Self {
        Self {
            num_items,
            emb_size,
            hidden_size,
            attn_size: hidden_size,
            ablation: Ablation::Full,
        }
    }

    /// Every parameter name with its shape, in registration order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (n, e, h, a) = (self.num_items, self.emb_size, self.hidden_size, self.attn_size);
        vec![
            ("embedding.matrix", vec![n, e]),
            ("gru.W_z", vec![h, e + h]),
            ("gru.W_r", vec![h, e + h]),
            ("gru.W_h", vec![h, e + h]),
            ("gru.b_z", vec![h]),
            ("gru.b_r", vec![h]),
            ("gru.b_h", vec![h]),
            ("mode.v_re", vec![a]),
            ("mode.W_re", vec![a, h]),
            ("mode.U_re", vec![a, h]),
            ("mode.W_c_re", vec![2, h]),
            ("repeat.v_r", vec![a]),
            ("repeat.W_r", vec![a, h]),
            ("repeat.U_r", vec![a, h]),
            ("explore.v_e", vec![a]),
            ("explore.W_e", vec![a, h]),
            ("explore.U_e", vec![a, h]),
            ("explore.W_c_e", vec![n, 2 * h]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items < 1 || self.emb_size < 1 || self.hidden_size < 1 || self.attn_size < 1 {
            return Err(ModelError::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// The three-matrix additive attention used by each decoder block:
/// `score_τ = vᵀ tanh(W h_t + U h_τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub v: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModePredictorParams {
    pub attention: AttentionParams,
    /// `[2 × d_hid]`; row 0 scores repeat, row 1 explore.
    pub w_c: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatDecoderParams {
    pub attention: AttentionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreDecoderParams {
    pub attention: AttentionParams,
    /// `[|I| × 2·d_hid]`
    pub w_c: Tensor,
}

/// Every learned tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub gru: GruParams,
    pub mode: ModePredictorParams,
    pub repeat: RepeatDecoderParams,
    pub explore: ExploreDecoderParams,
}

impl ModelParams {
    /// Builds parameters from named tensors in [`ModelConfig::parameter_shapes`] order.
    fn assemble(config: ModelConfig, mut make: impl FnMut(&'static str, &[usize]) -> Tensor) -> Self {
        let shapes = config.parameter_shapes();
        let mut it = shapes.iter().map(|(name, shape)| make(name, shape));
        let mut next = || it.next().expect("parameter list");
        let embedding = next();
        let gru = GruParams {
            w_z: next(),
            w_r: next(),
            w_h: next(),
            b_z: next(),
            b_r: next(),
            b_h: next(),
        };
        let attention = |next: &mut dyn FnMut() -> Tensor| AttentionParams {
            v: next(),
            w: next(),
            u: next(),
        };
        let mode_att = attention(&mut next);
        let mode = ModePredictorParams {
            attention: mode_att,
            w_c: next(),
        };
        let repeat = RepeatDecoderParams {
            attention: attention(&mut next),
        };
        let explore_att = attention(&mut next);
        let explore = ExploreDecoderParams {
            attention: explore_att,
            w_c: next(),
        };
        Self {
            config,
            embedding,
            gru,
            mode,
            repeat,
            explore,
        }
    }

    pub fn zeros(config: ModelConfig) -> Self {
        Self::assemble(config, |_, shape| Tensor::zeros_param(shape))
    }

    /// Xavier-uniform weights (bound √(6/(fan_in+fan_out))) and zero biases.
    /// Vectors `v` are treated as `1 × d_att` matrices.
    pub fn xavier(config: ModelConfig, rng: &mut impl Rng) -> Self {
        Self::assemble(config, |name, shape| {
            if name.starts_with("gru.b_") {
                return Tensor::zeros_param(shape);
            }
            let (fan_out, fan_in) = match shape {
                [n] => (1, *n),
                [o, i] => (*o, *i),
                _ => unreachable!("parameters are vectors or matrices"),
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::param(shape, data).expect("shape matches data")
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Self {
        Self::xavier(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Builds from a name → tensor lookup; used by checkpoint loading.
    pub fn from_named(config: ModelConfig, mut lookup: impl FnMut(&str) -> Tensor) -> Self {
        Self::assemble(config, |name, _| lookup(name))
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let names = self.config.parameter_shapes();
        let tensors = [
            &self.embedding,
            &self.gru.w_z,
            &self.gru.w_r,
            &self.gru.w_h,
            &self.gru.b_z,
            &self.gru.b_r,
            &self.gru.b_h,
            &self.mode.attention.v,
            &self.mode.attention.w,
            &self.mode.attention.u,
            &self.mode.w_c,
            &self.repeat.attention.v,
            &self.repeat.attention.w,
            &self.repeat.attention.u,
            &self.explore.attention.v,
            &self.explore.attention.w,
            &self.explore.attention.u,
            &self.explore.w_c,
        ];
        names.into_iter().map(|(n, _)| n).zip(tensors).collect()
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let names = self.config.parameter_shapes();
        let tensors = [
            &mut self.embedding,
            &mut self.gru.w_z,
            &mut self.gru.w_r,
            &mut self.gru.w_h,
            &mut self.gru.b_z,
            &mut self.gru.b_r,
            &mut self.gru.b_h,
            &mut self.mode.attention.v,
            &mut self.mode.attention.w,
            &mut self.mode.attention.u,
            &mut self.mode.w_c,
            &mut self.repeat.attention.v,
            &mut self.repeat.attention.w,
            &mut self.repeat.attention.u,
            &mut self.explore.attention.v,
            &mut self.explore.attention.w,
            &mut self.explore.attention.u,
            &mut self.explore.w_c,
        ];
        names.into_iter().map(|(n, _)| n).zip(tensors).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn zero_grads(&mut self) {
        self.named_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let v: Vec<Var> = self.named().into_iter().map(|(_, t)| tape.leaf(t)).collect();
        let att = |i: usize| BoundAttention {
            v: v[i],
            w: v[i + 1],
            u: v[i + 2],
        };
        Bound {
            vars: v.clone(),
            embedding: v[0],
            w_z: v[1],
            w_r: v[2],
            w_h: v[3],
            b_z: v[4],
            b_r: v[5],
            b_h: v[6],
            mode: att(7),
            mode_out: v[10],
            repeat: att(11),
            explore: att(14),
            explore_out: v[17],
        }
    }

    /// Adds the tape's leaf gradients into each parameter's gradient buffer.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for ((_, t), &var) in self.named_mut().into_iter().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Full prediction for one prefix in eval mode.
    pub fn predict(&self, prefix: &[usize]) -> Result<Prediction> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let ex = PrefixExample::new(prefix.to_vec(), prefix[0]);
        let batch = Batch::from_examples([&ex], PAD);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = forward(&mut tape, self, &bound, &batch, &mut Phase::Eval)?;
        Ok(out.prediction(&tape, 0, prefix))
    }

    /// Final item distributions for every example, in input order.
    pub fn score(&self, examples: &[PrefixExample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = Batch::from_examples(chunk, PAD);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let fwd = forward(&mut tape, self, &bound, &batch, &mut Phase::Eval)?;
            let n = self.config.num_items;
            out.extend(tape.data(fwd.p_final).chunks(n).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub v: Var,
    pub w: Var,
    pub u: Var,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub embedding: Var,
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
    pub mode: BoundAttention,
    pub mode_out: Var,
    pub repeat: BoundAttention,
    pub explore: BoundAttention,
    pub explore_out: Var,
}

/// Where dropout applies and how strongly.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutConfig {
    pub p: f64,
    pub on_embedding: bool,
    pub on_hybrid: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            on_embedding: true,
            on_hybrid: true,
        }
    }
}

pub enum Phase<'a> {
    Eval,
    Train {
        dropout: &'a DropoutConfig,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Phase<'_> {
    pub(crate) fn dropout_embedding(&mut self) -> Option<(f64, &mut ChaCha8Rng)> {
        match self {
            Phase::Train { dropout, rng } if dropout.on_embedding => Some((dropout.p, &mut **rng)),
            _ => None,
        }
    }

    pub(crate) fn dropout_hybrid(&mut self) -> Option<(f64, &mut ChaCha8Rng)> {
        match self {
            Phase::Train { dropout, rng } if dropout.on_hybrid => Some((dropout.p, &mut **rng)),
            _ => None,
        }
    }
}

/// Tape handles produced by one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: EncodedBatch,
    /// `[B × 2]` (repeat, explore); `None` under the no-repeat ablation.
    pub p_mode: Option<Var>,
    /// `[B × |I|]`, `None` under the no-repeat ablation.
    pub p_repeat: Option<Var>,
    /// `[B × |I|]`
    pub p_explore: Var,
    /// `[B × |I|]`
    pub p_final: Var,
}

impl ForwardOutput {
    /// Copies row `b` out of the tape as a [`Prediction`].
    pub fn prediction(&self, tape: &Tape, b: usize, prefix: &[usize]) -> Prediction {
        let n = tape.value(self.p_final).cols();
        let row = |v: Var| tape.data(v)[b * n..(b + 1) * n].to_vec();
        let (p_repeat, p_explore) = match self.p_mode {
            Some(m) => (tape.data(m)[2 * b], tape.data(m)[2 * b + 1]),
            None => (0.0, 1.0),
        };
        let repeat_dist = match self.p_repeat {
            Some(r) => {
                let r = row(r);
                prefix.iter().map(|&i| (i, r[i])).collect()
            }
            None => BTreeMap::new(),
        };
        Prediction {
            p_repeat,
            p_explore,
            repeat_dist,
            explore_dist: row(self.p_explore),
            final_dist: row(self.p_final),
        }
    }
}

/// Mode probabilities and the three item distributions for one prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub p_repeat: f64,
    pub p_explore: f64,
    /// Support is the set of prefix items.
    pub repeat_dist: BTreeMap<usize, f64>,
    pub explore_dist: Vec<f64>,
    pub final_dist: Vec<f64>,
}

/// Runs encoder, mode predictor and both decoders, then mixes.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    phase: &mut Phase<'_>,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let encoded = encoder::encode(tape, bound, batch, cfg.num_items, phase)?;
    let explore = decoders::explore_distribution(tape, &encoded, batch, bound, cfg, phase)?;
    if cfg.ablation == Ablation::NoRepeat {
        return Ok(ForwardOutput {
            encoded,
            p_mode: None,
            p_repeat: None,
            p_explore: explore.dist,
            p_final: explore.dist,
        });
    }
    let p_mode = decoders::predict_mode(tape, &encoded, bound)?;
    let p_repeat = decoders::repeat_distribution(tape, &encoded, batch, bound, cfg.num_items)?;
    let p_final = decoders::mix(tape, p_mode, p_repeat, explore.dist, &explore.covered)?;
    Ok(ForwardOutput {
        encoded,
        p_mode: Some(p_mode),
        p_repeat: Some(p_repeat),
        p_explore: explore.dist,
        p_final,
    })
}
