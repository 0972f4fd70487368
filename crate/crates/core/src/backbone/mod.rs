//! Causal multimodal transformer with a linear vision stub.

mod io;
mod pretrain;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::seeds;
use crate::synth::vocab::{vocab_len, TokenId};
use crate::synth::{SynthImage, DEFAULT_GRID, PATCH_DIM};
use crate::tensor::{hex, Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};

pub use pretrain::{examples_from, pretrain, PretrainConfig, PretrainExample};

/// Longest caption the generators emit, with headroom.
pub const MAX_CAPTION_LEN: usize = 16;
/// Positions kept free after the longest content sequence for appended queries.
pub const QUERY_SLOTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub patch_grid: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 256,
            max_seq_len: 96,
            patch_grid: DEFAULT_GRID,
            ffn_mult: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d_model > 0 && self.n_layers > 0 && self.n_heads > 0 && self.ffn_mult > 0 && self.patch_grid > 0,
            Config,
            "backbone sizes must be positive"
        );
        ensure!(
            self.d_model % self.n_heads == 0,
            Config,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(
            self.vocab_size >= vocab_len(),
            Config,
            "vocab_size {} below the {} symbols in use",
            self.vocab_size,
            vocab_len()
        );
        let content = (self.patch_grid * self.patch_grid).max(MAX_CAPTION_LEN);
        ensure!(
            self.max_seq_len >= content + QUERY_SLOTS,
            Config,
            "max_seq_len {} must cover {} content positions plus {} query slots",
            self.max_seq_len,
            content,
            QUERY_SLOTS
        );
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// Input embeddings for one sample, `len × d` row-major, without positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub modality: Modality,
    pub len: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(modality: Modality, d: usize, data: Vec<T>) -> Result<Self> {
        ensure!(d > 0 && data.len() % d == 0, Dimension, "{} values for width {}", data.len(), d);
        ensure!(!data.is_empty(), Input, "empty token sequence");
        Ok(TokenSequence {
            modality,
            len: data.len() / d,
            d,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Keys and values of a prefix at one layer, `len × d` each.
#[derive(Clone, Debug)]
pub struct LayerKv<T> {
    pub len: usize,
    pub d: usize,
    pub k: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> LayerKv<T> {
    fn head_cols(&self, m: &[T], head: usize, hd: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len * hd);
        for r in 0..self.len {
            out.extend_from_slice(&m[r * self.d + head * hd..r * self.d + (head + 1) * hd]);
        }
        out
    }
}

/// Everything later rows need from a fixed prefix: its per-layer keys and
/// values, plus its final hidden states. Causal masking makes these
/// independent of whatever is appended.
#[derive(Clone, Debug)]
pub struct PrefixCache<T> {
    pub len: usize,
    pub layers: Vec<LayerKv<T>>,
    pub hidden: Vec<T>,
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Pre-LN transformer block: causal multi-head attention and a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block<T: Scalar> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Scalar> Block<T> {
    pub fn new(d: usize, n_heads: usize, ffn_mult: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        let h = d * ffn_mult;
        let resid_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        Block {
            ln1_g: Tensor::from_fn(&[d], |_| T::one()),
            ln1_b: Tensor::zeros(&[d]),
            w_qkv: normal_tensor(&[d, 3 * d], 0.02, rng),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_o: normal_tensor(&[d, d], resid_std, rng),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::from_fn(&[d], |_| T::one()),
            ln2_b: Tensor::zeros(&[d]),
            w_fc: normal_tensor(&[d, h], 0.02, rng),
            b_fc: Tensor::zeros(&[h]),
            w_proj: normal_tensor(&[h, d], resid_std, rng),
            b_proj: Tensor::zeros(&[d]),
            n_heads,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.w_qkv", &self.w_qkv),
            ("attn.b_qkv", &self.b_qkv),
            ("attn.w_o", &self.w_o),
            ("attn.b_o", &self.b_o),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w_fc", &self.w_fc),
            ("mlp.b_fc", &self.b_fc),
            ("mlp.w_proj", &self.w_proj),
            ("mlp.b_proj", &self.b_proj),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.w_qkv", &mut self.w_qkv),
            ("attn.b_qkv", &mut self.b_qkv),
            ("attn.w_o", &mut self.w_o),
            ("attn.b_o", &mut self.b_o),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp.w_fc", &mut self.w_fc),
            ("mlp.b_fc", &mut self.b_fc),
            ("mlp.w_proj", &mut self.w_proj),
            ("mlp.b_proj", &mut self.b_proj),
        ]
    }

    /// Runs the block on `x` (`L × d`). When `probs` is given, the per-head
    /// attention matrices are pushed onto it.
    pub fn forward_on<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, probs: Option<&mut Vec<Var>>) -> Result<Var> {
        self.forward_with(tape, x, None, probs, None)
    }

    /// Runs the block on rows that follow a cached prefix. `past` holds the
    /// prefix keys and values; `kv_out` receives this call's `qkv` matrix.
    fn forward_with<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        past: Option<&LayerKv<T>>,
        mut probs: Option<&mut Vec<Var>>,
        kv_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.ln1_g.numel();
        let hd = d / self.n_heads;
        let eps = T::lit(LAYER_NORM_EPS);
        let scale = T::lit(1.0 / (hd as f64).sqrt());

        let (g1, b1) = (tape.param(&self.ln1_g), tape.param(&self.ln1_b));
        let h = tape.layer_norm(x, g1, b1, eps)?;
        let w_qkv = tape.param(&self.w_qkv);
        let b_qkv = tape.param(&self.b_qkv);
        let qkv = tape.matmul(h, w_qkv)?;
        let qkv = tape.add_row(qkv, b_qkv)?;
        if let Some(out) = kv_out {
            out.push(qkv);
        }
        let offset = past.map_or(0, |p| p.len);
        let mut heads = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let q = tape.slice_cols(qkv, head * hd, hd)?;
            let mut k = tape.slice_cols(qkv, d + head * hd, hd)?;
            let mut v = tape.slice_cols(qkv, 2 * d + head * hd, hd)?;
            if let Some(p) = past {
                let kp = tape.constant(p.len, hd, p.head_cols(&p.k, head, hd))?;
                let vp = tape.constant(p.len, hd, p.head_cols(&p.v, head, hd))?;
                k = tape.concat_rows(&[kp, k])?;
                v = tape.concat_rows(&[vp, v])?;
            }
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale)?;
            let s = tape.causal_mask_fill_offset(s, offset)?;
            let p = tape.softmax(s)?;
            if let Some(out) = probs.as_deref_mut() {
                out.push(p);
            }
            heads.push(tape.matmul(p, v)?);
        }
        let att = tape.concat_cols(&heads)?;
        let w_o = tape.param(&self.w_o);
        let b_o = tape.param(&self.b_o);
        let att = tape.matmul(att, w_o)?;
        let att = tape.add_row(att, b_o)?;
        let x = tape.add(x, att)?;

        let (g2, b2) = (tape.param(&self.ln2_g), tape.param(&self.ln2_b));
        let h = tape.layer_norm(x, g2, b2, eps)?;
        let w_fc = tape.param(&self.w_fc);
        let b_fc = tape.param(&self.b_fc);
        let h = tape.matmul(h, w_fc)?;
        let h = tape.add_row(h, b_fc)?;
        let h = tape.gelu(h)?;
        let w_proj = tape.param(&self.w_proj);
        let b_proj = tape.param(&self.b_proj);
        let h = tape.matmul(h, w_proj)?;
        let h = tape.add_row(h, b_proj)?;
        tape.add(x, h)
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            ln1_g: self.ln1_g.cast(),
            ln1_b: self.ln1_b.cast(),
            w_qkv: self.w_qkv.cast(),
            b_qkv: self.b_qkv.cast(),
            w_o: self.w_o.cast(),
            b_o: self.b_o.cast(),
            ln2_g: self.ln2_g.cast(),
            ln2_b: self.ln2_b.cast(),
            w_fc: self.w_fc.cast(),
            b_fc: self.b_fc.cast(),
            w_proj: self.w_proj.cast(),
            b_proj: self.b_proj.cast(),
            n_heads: self.n_heads,
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(flag);
        }
    }
}

/// The model M. The language-model head is tied to the token embedding.
#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar> {
    config: BackboneConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    frozen: Option<[u8; 32]>,
}

impl<T: Scalar> Backbone<T> {
    /// Randomly initialised, trainable backbone.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::stream(seed, "backbone-init");
        let d = config.d_model;
        let mut b = Backbone {
            config,
            tok_emb: normal_tensor(&[config.vocab_size, d], 0.02, &mut rng),
            pos_emb: normal_tensor(&[config.max_seq_len, d], 0.02, &mut rng),
            patch_w: normal_tensor(&[PATCH_DIM, d], 0.02, &mut rng),
            patch_b: Tensor::zeros(&[d]),
            blocks: (0..config.n_layers)
                .map(|_| Block::new(d, config.n_heads, config.ffn_mult, config.n_layers, &mut rng))
                .collect(),
            lnf_g: Tensor::from_fn(&[d], |_| T::one()),
            lnf_b: Tensor::zeros(&[d]),
            frozen: None,
        };
        b.set_requires_grad(true);
        Ok(b)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("ln_f.g".into(), &self.lnf_g));
        out.push(("ln_f.b".into(), &self.lnf_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.patch_w, &mut self.patch_b];
        for b in &mut self.blocks {
            out.extend(b.named_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn set_requires_grad(&mut self, flag: bool) {
        for t in self.params_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// SHA-256 over every parameter's name and content checksum.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            h.update(t.checksum());
        }
        h.finalize().into()
    }

    /// Stops gradient flow into every parameter and records the checksum.
    /// Idempotent.
    pub fn freeze(&mut self) {
        if self.frozen.is_none() {
            self.set_requires_grad(false);
            self.frozen = Some(self.checksum());
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn frozen_checksum(&self) -> Option<[u8; 32]> {
        self.frozen
    }

    /// Fails with an integrity error if a frozen backbone's weights changed.
    pub fn verify_frozen(&self) -> Result<()> {
        let recorded = self
            .frozen
            .ok_or_else(|| Error::State("backbone is not frozen".into()))?;
        let now = self.checksum();
        ensure!(
            now == recorded,
            Integrity,
            "frozen backbone changed: {} != {}",
            hex(&now),
            hex(&recorded)
        );
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let mut b = Backbone {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            frozen: None,
        };
        if self.is_frozen() {
            b.freeze();
        } else {
            b.set_requires_grad(true);
        }
        b
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        ensure!(!tokens.is_empty(), Input, "empty token list");
        ensure!(
            tokens.len() <= self.config.max_seq_len,
            Input,
            "{} tokens exceed max_seq_len {}",
            tokens.len(),
            self.config.max_seq_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_image(&self, image: &SynthImage) -> Result<()> {
        ensure!(
            image.grid() == self.config.patch_grid,
            Input,
            "image grid {} does not match backbone patch grid {}",
            image.grid(),
            self.config.patch_grid
        );
        Ok(())
    }

    /// Rows of the token-embedding table.
    pub fn embed_text(&self, tokens: &[TokenId]) -> Result<TokenSequence<T>> {
        self.check_tokens(tokens)?;
        let mut data = Vec::with_capacity(tokens.len() * self.d_model());
        for &t in tokens {
            data.extend_from_slice(self.tok_emb.row(t));
        }
        TokenSequence::new(Modality::Text, self.d_model(), data)
    }

    /// One projected row per grid cell.
    pub fn embed_image(&self, image: &SynthImage) -> Result<TokenSequence<T>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = self.embed_image_on(&mut tape, image)?;
        TokenSequence::new(Modality::Image, self.d_model(), tape.value(x).to_vec())
    }

    pub fn embed_text_on<'a>(&'a self, tape: &mut Tape<'a, T>, tokens: &[TokenId]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = tape.param(&self.tok_emb);
        tape.embedding(table, tokens)
    }

    pub fn embed_image_on<'a>(&'a self, tape: &mut Tape<'a, T>, image: &SynthImage) -> Result<Var> {
        self.check_image(image)?;
        self.embed_patch_features_on(tape, &image.features())
    }

    /// Projects raw `n × PATCH_DIM` patch features.
    pub fn embed_patch_features_on<'a>(&'a self, tape: &mut Tape<'a, T>, features: &[f64]) -> Result<Var> {
        ensure!(
            !features.is_empty() && features.len() % PATCH_DIM == 0,
            Input,
            "{} patch values for width {}",
            features.len(),
            PATCH_DIM
        );
        let n = features.len() / PATCH_DIM;
        let f = tape.constant(n, PATCH_DIM, features.iter().map(|&v| T::lit(v)).collect())?;
        let w = tape.param(&self.patch_w);
        let b = tape.param(&self.patch_b);
        let p = tape.matmul(f, w)?;
        tape.add_row(p, b)
    }

    /// Final hidden states (after the last layer norm) for an `L × d` input
    /// already on the tape. Positions `0..L` are added here.
    pub fn forward_on<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Result<Var> {
        self.forward_inner(tape, x, None)
    }

    fn forward_inner<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, probs: Option<&mut Vec<Var>>) -> Result<Var> {
        self.run(tape, x, None, probs, None)
    }

    fn run<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        past: Option<&PrefixCache<T>>,
        mut probs: Option<&mut Vec<Var>>,
        mut kv_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let (len, d) = tape.dims(x);
        let start = past.map_or(0, |p| p.len);
        ensure!(d == self.d_model(), Dimension, "input width {} for d_model {}", d, self.d_model());
        ensure!(len >= 1, Input, "empty sequence");
        ensure!(
            start + len <= self.config.max_seq_len,
            Input,
            "sequence of {} exceeds max_seq_len {}",
            start + len,
            self.config.max_seq_len
        );
        if let Some(p) = past {
            ensure!(p.layers.len() == self.blocks.len(), Dimension, "prefix cache has {} layers", p.layers.len());
        }
        let pos_table = tape.param(&self.pos_emb);
        let positions: Vec<usize> = (start..start + len).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let mut h = tape.add(x, pos)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward_with(tape, h, past.map(|p| &p.layers[i]), probs.as_deref_mut(), kv_out.as_deref_mut())?;
        }
        let g = tape.param(&self.lnf_g);
        let bias = tape.param(&self.lnf_b);
        tape.layer_norm(h, g, bias, T::lit(LAYER_NORM_EPS))
    }

    /// Runs `seq` once and keeps what appended rows will attend to.
    pub fn prefix_cache(&self, seq: &TokenSequence<T>) -> Result<PrefixCache<T>> {
        ensure!(seq.d == self.d_model(), Dimension, "sequence width {} for d_model {}", seq.d, self.d_model());
        let d = self.d_model();
        let mut tape = Tape::new();
        let x = tape.constant(seq.len, d, seq.data.clone())?;
        let mut qkv = Vec::with_capacity(self.blocks.len());
        let h = self.run(&mut tape, x, None, None, Some(&mut qkv))?;
        let layers = qkv
            .iter()
            .map(|&m| {
                let vals = tape.value(m);
                let mut k = Vec::with_capacity(seq.len * d);
                let mut v = Vec::with_capacity(seq.len * d);
                for row in vals.chunks(3 * d) {
                    k.extend_from_slice(&row[d..2 * d]);
                    v.extend_from_slice(&row[2 * d..]);
                }
                LayerKv { len: seq.len, d, k, v }
            })
            .collect();
        Ok(PrefixCache {
            len: seq.len,
            layers,
            hidden: tape.value(h).to_vec(),
        })
    }

    /// Final hidden states of rows `x` placed directly after a cached
    /// prefix. Equal to the corresponding rows of a full forward pass.
    pub fn forward_suffix_on<'a>(&'a self, tape: &mut Tape<'a, T>, past: &PrefixCache<T>, x: Var) -> Result<Var> {
        self.run(tape, x, Some(past), None, None)
    }

    /// `L × d` final hidden states for a sequence of input embeddings.
    pub fn forward_hidden(&self, seq: &TokenSequence<T>) -> Result<Vec<T>> {
        ensure!(seq.d == self.d_model(), Dimension, "sequence width {} for d_model {}", seq.d, self.d_model());
        let mut tape = Tape::new();
        let x = tape.constant(seq.len, seq.d, seq.data.clone())?;
        let h = self.forward_on(&mut tape, x)?;
        Ok(tape.value(h).to_vec())
    }

    /// Attention probabilities, indexed `[layer][head]`, each `L × L`.
    pub fn attention_maps(&self, seq: &TokenSequence<T>) -> Result<Vec<Vec<Vec<T>>>> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.len, seq.d, seq.data.clone())?;
        let mut probs = Vec::new();
        self.forward_inner(&mut tape, x, Some(&mut probs))?;
        let per_layer = self.config.n_heads;
        Ok(probs
            .chunks(per_layer)
            .map(|layer| layer.iter().map(|&p| tape.value(p).to_vec()).collect())
            .collect())
    }

    /// Vocabulary logits for hidden states (tied output projection).
    pub fn logits_on<'a>(&'a self, tape: &mut Tape<'a, T>, hidden: Var) -> Result<Var> {
        let table = tape.param(&self.tok_emb);
        let t = tape.transpose(table)?;
        tape.matmul(hidden, t)
    }
}
