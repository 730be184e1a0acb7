//! Contextual token encoder, feature projection and in-context attention.
//!
//! The bundled encoder is a small post-norm transformer trained from scratch.
//! It exposes every layer's per-head attention map so that attentive
//! features can be formed from a model's own self-attention.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const UNK: &str = "<unk>";
const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    ToyTransformer,
    /// Placeholder for a pretrained backend; none is bundled.
    ExternalPretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden dimension.
    pub d: usize,
    /// Number of final layers averaged into the context attention.
    pub attn_layers: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::ToyTransformer,
            n_layers: 3,
            n_heads: 2,
            d: 32,
            attn_layers: 3,
            ffn_dim: 64,
            dropout_rate: 0.2,
            max_len: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d == 0 {
            return Err(Error::Config("encoder needs layers, heads and width".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.attn_layers == 0 || self.attn_layers > self.n_layers {
            return Err(Error::Config(format!(
                "attention depth {} outside 1..={}",
                self.attn_layers, self.n_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.kind == EncoderKind::ExternalPretrained {
            return Err(Error::Config(
                "no external pretrained encoder backend is linked into this build".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![UNK.to_string()];
        let mut index = HashMap::new();
        index.insert(UNK.to_string(), 0);
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Per-sentence encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[n_tokens × d]`
    pub hidden: Matrix,
    /// `[layer][head]`, each `[n_tokens × n_tokens]`, rows are query tokens.
    pub attention: Vec<Vec<Matrix>>,
}

impl EncoderOutput {
    pub fn n_tokens(&self) -> usize {
        self.hidden.rows()
    }

    pub fn n_layers(&self) -> usize {
        self.attention.len()
    }
}

/// Graph nodes of one encoder pass.
pub struct EncoderTrace {
    pub hidden: Var,
    pub attention: Vec<Vec<Var>>,
}

impl EncoderTrace {
    pub fn output(&self, g: &Graph) -> EncoderOutput {
        EncoderOutput {
            hidden: g.value(self.hidden).clone(),
            attention: self
                .attention
                .iter()
                .map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect())
                .collect(),
        }
    }
}

/// Anything that can turn a sentence into hidden states and attention maps.
pub trait SentenceEncoder {
    fn encode(&self, store: &ParamStore, tokens: &[String]) -> Result<EncoderOutput>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
    attn_norm: NormIds,
    ff1: LinearIds,
    ff2: LinearIds,
    ff_norm: NormIds,
}

pub(crate) fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn linear(store: &mut ParamStore, rng: &mut SeededRng, name: &str, out_dim: usize, in_dim: usize) -> LinearIds {
    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
    LinearIds {
        w: store.add(format!("{name}.weight"), normal_matrix(rng, out_dim, in_dim, std)),
        b: store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)),
    }
}

fn norm(store: &mut ParamStore, name: &str, dim: usize) -> NormIds {
    NormIds {
        gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
        beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
    }
}

fn apply_linear(g: &mut Graph, store: &ParamStore, ids: &LinearIds, x: Var) -> Var {
    let w = g.param(store, ids.w);
    let b = g.param(store, ids.b);
    let y = g.matmul_t(x, w);
    g.add_row(y, b)
}

fn apply_norm(g: &mut Graph, store: &ParamStore, ids: &NormIds, x: Var) -> Var {
    let gamma = g.param(store, ids.gamma);
    let beta = g.param(store, ids.beta);
    let y = g.layer_norm_rows(x, LN_EPS);
    let y = g.mul_row(y, gamma);
    g.add_row(y, beta)
}

/// Inverted dropout with a seeded mask. `rng = None` means evaluation mode.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut SeededRng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (rows, cols) = g.value(x).shape();
            let keep = 1.0 - rate;
            let data = (0..rows * cols)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = g.constant(Matrix::from_vec(rows, cols, data).expect("sized"));
            g.mul(x, mask)
        }
        _ => x,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    embed: ParamId,
    position: ParamId,
    embed_norm: NormIds,
    layers: Vec<LayerIds>,
    final_norm: NormIds,
}

impl ToyEncoder {
    /// Registers fresh parameters under `prefix` in `store`.
    pub fn new(
        config: EncoderConfig,
        vocab: Vocab,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embed = store.add(format!("{prefix}.embed"), normal_matrix(rng, vocab.len(), d, EMBED_STD));
        let position = store.add(format!("{prefix}.position"), normal_matrix(rng, config.max_len, d, EMBED_STD));
        let embed_norm = norm(store, &format!("{prefix}.embed_norm"), d);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                LayerIds {
                    q: linear(store, rng, &format!("{p}.q"), d, d),
                    k: linear(store, rng, &format!("{p}.k"), d, d),
                    v: linear(store, rng, &format!("{p}.v"), d, d),
                    o: linear(store, rng, &format!("{p}.o"), d, d),
                    attn_norm: norm(store, &format!("{p}.attn_norm"), d),
                    ff1: linear(store, rng, &format!("{p}.ff1"), config.ffn_dim, d),
                    ff2: linear(store, rng, &format!("{p}.ff2"), d, config.ffn_dim),
                    ff_norm: norm(store, &format!("{p}.ff_norm"), d),
                }
            })
            .collect();
        let final_norm = norm(store, &format!("{prefix}.final_norm"), d);
        Ok(Self {
            config,
            vocab,
            embed,
            position,
            embed_norm,
            layers,
            final_norm,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty sentence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::SentenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Records a forward pass on `g`. Dropout is active iff `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[String],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<EncoderTrace> {
        let n = tokens.len();
        self.check_len(n)?;
        let ids = self.vocab.ids(tokens);
        let positions: Vec<usize> = (0..n).collect();
        let rate = self.config.dropout_rate;

        let table = g.param(store, self.embed);
        let pos_table = g.param(store, self.position);
        let e = g.gather_rows(table, &ids);
        let p = g.gather_rows(pos_table, &positions);
        let x = g.add(e, p);
        let x = apply_norm(g, store, &self.embed_norm, x);
        let mut x = dropout(g, x, rate, rng.as_deref_mut());

        let heads = self.config.n_heads;
        let dk = self.config.d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let xn = apply_norm(g, store, &layer.attn_norm, x);
            let q = apply_linear(g, store, &layer.q, xn);
            let k = apply_linear(g, store, &layer.k, xn);
            let v = apply_linear(g, store, &layer.v, xn);
            let mut contexts = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dk, dk);
                let kh = g.slice_cols(k, h * dk, dk);
                let vh = g.slice_cols(v, h * dk, dk);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let a = g.softmax_rows(scores);
                maps.push(a);
                let a = dropout(g, a, rate, rng.as_deref_mut());
                contexts.push(g.matmul(a, vh));
            }
            let ctx = if heads == 1 { contexts[0] } else { g.concat_cols(&contexts) };
            let o = apply_linear(g, store, &layer.o, ctx);
            let o = dropout(g, o, rate, rng.as_deref_mut());
            x = g.add(x, o);
            let xn = apply_norm(g, store, &layer.ff_norm, x);
            let f = apply_linear(g, store, &layer.ff1, xn);
            let f = g.relu(f);
            let f = apply_linear(g, store, &layer.ff2, f);
            let f = dropout(g, f, rate, rng.as_deref_mut());
            x = g.add(x, f);
            attention.push(maps);
        }
        let x = apply_norm(g, store, &self.final_norm, x);
        Ok(EncoderTrace { hidden: x, attention })
    }
}

impl SentenceEncoder for ToyEncoder {
    fn encode(&self, store: &ParamStore, tokens: &[String]) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let trace = self.forward(&mut g, store, tokens, None)?;
        Ok(trace.output(&g))
    }
}

/// `f = LayerNorm(W · Dropout(h) + b)` with `W: [h × d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProjector {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dropout_rate: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FeatureProjector {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        dropout_rate: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: store.add(format!("{prefix}.weight"), normal_matrix(rng, out_dim, in_dim, std)),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, out_dim)),
            gamma: store.add(format!("{prefix}.gamma"), Matrix::filled(1, out_dim, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Matrix::zeros(1, out_dim)),
            dropout_rate,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        if g.value(hidden).cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "projector expects width {}, got {}",
                self.in_dim,
                g.value(hidden).cols()
            )));
        }
        let x = dropout(g, hidden, self.dropout_rate, rng);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_t(x, w);
        let y = g.add_row(y, b);
        let y = g.layer_norm_rows(y, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(y, gamma);
        Ok(g.add_row(y, beta))
    }
}

/// Evaluation-mode projection of encoder output to `[n_tokens × h]` features.
pub fn project_features(output: &EncoderOutput, projector: &FeatureProjector, store: &ParamStore) -> Result<Matrix> {
    let mut g = Graph::new();
    let h = g.constant(output.hidden.clone());
    let f = projector.forward(&mut g, store, h, None)?;
    Ok(g.value(f).clone())
}

/// Mean of the attention maps over the last `last_layers` layers and all heads.
pub fn context_attention(output: &EncoderOutput, last_layers: usize) -> Result<Matrix> {
    let n_layers = output.attention.len();
    if last_layers == 0 || last_layers > n_layers {
        return Err(Error::InvalidArgument(format!(
            "attention depth {last_layers} outside 1..={n_layers}"
        )));
    }
    let n = output.n_tokens();
    let mut acc = Matrix::zeros(n, n);
    let mut count = 0usize;
    for layer in &output.attention[n_layers - last_layers..] {
        for head in layer {
            if head.shape() != (n, n) {
                return Err(Error::Shape("attention map size".into()));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(head.data()) {
                *a += v;
            }
            count += 1;
        }
    }
    for a in acc.data_mut() {
        *a /= count as f64;
    }
    Ok(acc)
}

/// Differentiable counterpart of [`context_attention`].
pub fn context_attention_var(g: &mut Graph, attention: &[Vec<Var>], last_layers: usize) -> Result<Var> {
    let n_layers = attention.len();
    if last_layers == 0 || last_layers > n_layers {
        return Err(Error::InvalidArgument(format!(
            "attention depth {last_layers} outside 1..={n_layers}"
        )));
    }
    let maps: Vec<Var> = attention[n_layers - last_layers..].iter().flatten().copied().collect();
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = g.add(acc, m);
    }
    Ok(g.scale(acc, 1.0 / maps.len() as f64))
}

/// `A_j = (1/n) Σ_k attn[j, k] · f_k`
pub fn attentive_features(features: &Matrix, attn: &Matrix) -> Result<Matrix> {
    let n = features.rows();
    if attn.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "attention {:?} does not match {n} tokens",
            attn.shape()
        )));
    }
    let mut out = attn.matmul(features);
    for v in out.data_mut() {
        *v /= n as f64;
    }
    Ok(out)
}

pub fn attentive_features_var(g: &mut Graph, features: Var, attn: Var) -> Result<Var> {
    let n = g.value(features).rows();
    if g.value(attn).shape() != (n, n) {
        return Err(Error::Shape("attention does not match features".into()));
    }
    let a = g.matmul(attn, features);
    Ok(g.scale(a, 1.0 / n as f64))
}
