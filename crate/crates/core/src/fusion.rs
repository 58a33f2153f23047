//! Instance-adaptive fusion of per-modality feature tokens.
//!
//! All three variants work on an ordered list of equal-width tokens (image,
//! geometry, text, minus any disabled cue). Concatenation stacks them,
//! self-attention treats them as a set of tokens, and the gated variant
//! predicts one softmax weight per token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::dense::{stack_backward, stack_forward, StackTrace};
use crate::nn::params::join;
use crate::nn::tensor::{axpy, dot};
use crate::nn::{Activation, DenseLayer, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionVariant {
    Concat,
    SelfAttention,
    Gated,
}

impl FusionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Concat => "concat",
            FusionVariant::SelfAttention => "self_attn",
            FusionVariant::Gated => "gated",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionVariant::Concat),
            "self_attn" | "self_attention" | "attention" => Ok(FusionVariant::SelfAttention),
            "gated" => Ok(FusionVariant::Gated),
            other => Err(Error::Config(format!("unknown fusion variant '{other}'"))),
        }
    }
}

/// The three modality features after encoding and LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeatures {
    pub image: Vec<f64>,
    pub geometry: Vec<f64>,
    pub text: Vec<f64>,
}

impl ModalFeatures {
    pub fn tokens(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.image.len();
        if self.geometry.len() != d || self.text.len() != d {
            return Err(dim_err(format!(
                "modal feature widths differ: {} / {} / {}",
                d,
                self.geometry.len(),
                self.text.len()
            )));
        }
        Ok(vec![self.image.clone(), self.geometry.clone(), self.text.clone()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub vector: Vec<f64>,
    /// One weight per input token, gated fusion only.
    pub gate_weights: Option<Vec<f64>>,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn check_tokens(tokens: &[Vec<f64>], count: usize, dim: usize) -> Result<()> {
    if tokens.len() != count {
        return Err(dim_err(format!("expected {count} tokens, got {}", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|t| t.len() != dim) {
        return Err(dim_err(format!("token width {} != {dim}", t.len())));
    }
    Ok(())
}

/// `[t0 ‖ t1 ‖ …]`
pub fn fuse_concat(f: &ModalFeatures) -> Result<FusedFeature> {
    Ok(FusedFeature {
        vector: f.tokens()?.concat(),
        gate_weights: None,
    })
}

/// Single-head scaled dot-product attention over the token set, mean-pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: DenseLayer,
    pub key: DenseLayer,
    pub value: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            query: DenseLayer::new(dim, dim, Activation::Identity, rng),
            key: DenseLayer::new(dim, dim, Activation::Identity, rng),
            value: DenseLayer::new(dim, dim, Activation::Identity, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.value.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
        }
    }

    pub fn forward(&self, tokens: &[Vec<f64>]) -> Result<(FusedFeature, AttentionCache)> {
        let d = self.dim();
        if tokens.is_empty() {
            return Err(dim_err("self-attention needs at least one token"));
        }
        check_tokens(tokens, tokens.len(), d)?;
        let n = tokens.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut q = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for t in tokens {
            q.push(self.query.forward(t)?);
            k.push(self.key.forward(t)?);
            v.push(self.value.forward(t)?);
        }
        let mut out = vec![0.0; d];
        let mut attn = Vec::with_capacity(n);
        for qi in &q {
            let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
            let a = softmax(&scores);
            for (aj, vj) in a.iter().zip(&v) {
                axpy(aj / n as f64, vj, &mut out);
            }
            attn.push(a);
        }
        Ok((
            FusedFeature {
                vector: out,
                gate_weights: None,
            },
            AttentionCache { q, k, v, attn },
        ))
    }

    /// Returns dL/dtoken for each token; parameter gradients go to `acc`.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(
        &self,
        tokens: &[Vec<f64>],
        cache: &AttentionCache,
        grad_out: &[f64],
        acc: &mut SelfAttention,
    ) -> Result<Vec<Vec<f64>>> {
        let n = tokens.len();
        let d = self.dim();
        let scale = 1.0 / (d as f64).sqrt();
        let g_o: Vec<f64> = grad_out.iter().map(|g| g / n as f64).collect();
        let mut g_q = vec![vec![0.0; d]; n];
        let mut g_k = vec![vec![0.0; d]; n];
        let mut g_v = vec![vec![0.0; d]; n];
        for i in 0..n {
            let a = &cache.attn[i];
            let g_a: Vec<f64> = cache.v.iter().map(|vj| dot(&g_o, vj)).collect();
            for j in 0..n {
                axpy(a[j], &g_o, &mut g_v[j]);
            }
            let weighted: f64 = a.iter().zip(&g_a).map(|(x, y)| x * y).sum();
            for j in 0..n {
                let g_s = a[j] * (g_a[j] - weighted) * scale;
                axpy(g_s, &cache.k[j], &mut g_q[i]);
                axpy(g_s, &cache.q[i], &mut g_k[j]);
            }
        }
        let mut grads = Vec::with_capacity(n);
        for (t, ((gq, gk), gv)) in tokens.iter().zip(g_q.iter().zip(&g_k).zip(&g_v)) {
            let mut g = vec![0.0; d];
            for (layer, acc_layer, upstream) in [
                (&self.query, &mut acc.query, gq),
                (&self.key, &mut acc.key, gk),
                (&self.value, &mut acc.value, gv),
            ] {
                let (pre, out) = layer.forward_with_pre(t)?;
                let gx = layer.backward_accumulate(t, &pre, &out, upstream, acc_layer)?;
                axpy(1.0, &gx, &mut g);
            }
            grads.push(g);
        }
        Ok(grads)
    }
}

impl Params for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
    }
}

/// Gating MLP over the concatenated tokens (k·D → D tanh → k) and a softmax
/// weighted sum of the tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFusion {
    pub gate: Vec<DenseLayer>,
    tokens: usize,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    trace: StackTrace,
    weights: Vec<f64>,
}

impl GatedFusion {
    pub fn new<R: Rng + ?Sized>(tokens: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            gate: vec![
                DenseLayer::new(tokens * dim, dim, Activation::Tanh, rng),
                DenseLayer::new(dim, tokens, Activation::Identity, rng),
            ],
            tokens,
        }
    }

    pub fn dim(&self) -> usize {
        self.gate[0].in_dim() / self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gate: self.gate.iter().map(DenseLayer::zeros_like).collect(),
            tokens: self.tokens,
        }
    }

    pub fn logits(&self, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_tokens(tokens, self.tokens, self.dim())?;
        Ok(stack_forward(&self.gate, &tokens.concat())?.output().to_vec())
    }

    /// Weighted sum for externally supplied logits.
    pub fn combine(tokens: &[Vec<f64>], logits: &[f64]) -> FusedFeature {
        let w = softmax(logits);
        let mut out = vec![0.0; tokens[0].len()];
        for (wi, t) in w.iter().zip(tokens) {
            axpy(*wi, t, &mut out);
        }
        FusedFeature {
            vector: out,
            gate_weights: Some(w),
        }
    }

    pub fn forward(&self, tokens: &[Vec<f64>]) -> Result<(FusedFeature, GateCache)> {
        check_tokens(tokens, self.tokens, self.dim())?;
        let trace = stack_forward(&self.gate, &tokens.concat())?;
        let fused = Self::combine(tokens, trace.output());
        let weights = fused.gate_weights.clone().expect("gated weights");
        Ok((fused, GateCache { trace, weights }))
    }

    pub fn backward(
        &self,
        tokens: &[Vec<f64>],
        cache: &GateCache,
        grad_out: &[f64],
        acc: &mut GatedFusion,
    ) -> Result<Vec<Vec<f64>>> {
        let w = &cache.weights;
        let g_w: Vec<f64> = tokens.iter().map(|t| dot(grad_out, t)).collect();
        let mean: f64 = w.iter().zip(&g_w).map(|(a, b)| a * b).sum();
        let g_logits: Vec<f64> = w.iter().zip(&g_w).map(|(wi, gi)| wi * (gi - mean)).collect();
        let g_in = stack_backward(&self.gate, &cache.trace, &g_logits, &mut acc.gate)?;
        let d = self.dim();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut g = g_in[i * d..(i + 1) * d].to_vec();
                axpy(w[i], grad_out, &mut g);
                g
            })
            .collect())
    }
}

impl Params for GatedFusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

pub fn fuse_self_attention(params: &SelfAttention, f: &ModalFeatures) -> Result<FusedFeature> {
    Ok(params.forward(&f.tokens()?)?.0)
}

pub fn fuse_gated(params: &GatedFusion, f: &ModalFeatures) -> Result<FusedFeature> {
    Ok(params.forward(&f.tokens()?)?.0)
}

/// A configured fusion block for a fixed number of tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Concat { tokens: usize, dim: usize },
    SelfAttention(SelfAttention),
    Gated(GatedFusion),
}

#[derive(Debug, Clone)]
pub enum FusionCache {
    Concat,
    SelfAttention(AttentionCache),
    Gated(GateCache),
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        variant: FusionVariant,
        tokens: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        match variant {
            FusionVariant::Concat => Fusion::Concat { tokens, dim },
            FusionVariant::SelfAttention => Fusion::SelfAttention(SelfAttention::new(dim, rng)),
            FusionVariant::Gated => Fusion::Gated(GatedFusion::new(tokens, dim, rng)),
        }
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            Fusion::Concat { .. } => FusionVariant::Concat,
            Fusion::SelfAttention(_) => FusionVariant::SelfAttention,
            Fusion::Gated(_) => FusionVariant::Gated,
        }
    }

    /// Width of the fused vector.
    pub fn out_dim(&self) -> usize {
        match self {
            Fusion::Concat { tokens, dim } => tokens * dim,
            Fusion::SelfAttention(a) => a.dim(),
            Fusion::Gated(g) => g.dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Fusion::Concat { tokens, dim } => Fusion::Concat {
                tokens: *tokens,
                dim: *dim,
            },
            Fusion::SelfAttention(a) => Fusion::SelfAttention(a.zeros_like()),
            Fusion::Gated(g) => Fusion::Gated(g.zeros_like()),
        }
    }

    pub fn forward(&self, tokens: &[Vec<f64>]) -> Result<(FusedFeature, FusionCache)> {
        match self {
            Fusion::Concat { tokens: n, dim } => {
                check_tokens(tokens, *n, *dim)?;
                Ok((
                    FusedFeature {
                        vector: tokens.concat(),
                        gate_weights: None,
                    },
                    FusionCache::Concat,
                ))
            }
            Fusion::SelfAttention(a) => {
                let (f, c) = a.forward(tokens)?;
                Ok((f, FusionCache::SelfAttention(c)))
            }
            Fusion::Gated(g) => {
                let (f, c) = g.forward(tokens)?;
                Ok((f, FusionCache::Gated(c)))
            }
        }
    }

    pub fn backward(
        &self,
        tokens: &[Vec<f64>],
        cache: &FusionCache,
        grad_out: &[f64],
        acc: &mut Fusion,
    ) -> Result<Vec<Vec<f64>>> {
        match (self, cache, acc) {
            (Fusion::Concat { dim, .. }, FusionCache::Concat, _) => {
                Ok(grad_out.chunks(*dim).map(<[f64]>::to_vec).collect())
            }
            (Fusion::SelfAttention(a), FusionCache::SelfAttention(c), Fusion::SelfAttention(g)) => {
                a.backward(tokens, c, grad_out, g)
            }
            (Fusion::Gated(p), FusionCache::Gated(c), Fusion::Gated(g)) => {
                p.backward(tokens, c, grad_out, g)
            }
            _ => Err(Error::Contract("fusion cache/gradient variant mismatch".into())),
        }
    }
}

impl Params for Fusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Fusion::Concat { .. } => {}
            Fusion::SelfAttention(a) => a.visit(&join(prefix, "attn"), f),
            Fusion::Gated(g) => g.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Fusion::Concat { .. } => {}
            Fusion::SelfAttention(a) => a.visit_mut(&join(prefix, "attn"), f),
            Fusion::Gated(g) => g.visit_mut(prefix, f),
        }
    }
}
