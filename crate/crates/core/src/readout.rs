//! Query banks, sequence construction, query-state pooling and the readout
//! variants compared against them.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Block, Modality, PrefixCache, TokenSequence};
use crate::checkpoint::Container;
use crate::error::{ensure, Error, Result};
use crate::seeds;
use crate::synth::vocab::TokenId;
use crate::synth::SynthImage;
use crate::tensor::{Axis, Scalar, Tape, Tensor, Var};

pub const DEFAULT_QUERIES: usize = 20;
pub const QUERY_SWEEP: [usize; 5] = [1, 5, 10, 20, 32];

/// Tolerance for unit-norm checks on embeddings.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutVariant {
    SharedQueries,
    SeparateQueries,
    LinearHead,
    TfBlockHead,
    PromptPrepend,
    LastToken,
}

impl ReadoutVariant {
    pub const ALL: [ReadoutVariant; 6] = [
        ReadoutVariant::SharedQueries,
        ReadoutVariant::SeparateQueries,
        ReadoutVariant::LinearHead,
        ReadoutVariant::TfBlockHead,
        ReadoutVariant::PromptPrepend,
        ReadoutVariant::LastToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReadoutVariant::SharedQueries => "shared-queries",
            ReadoutVariant::SeparateQueries => "separate-queries",
            ReadoutVariant::LinearHead => "linear-head",
            ReadoutVariant::TfBlockHead => "tf-block-head",
            ReadoutVariant::PromptPrepend => "prompt-prepend",
            ReadoutVariant::LastToken => "last-token",
        }
    }

    pub fn uses_queries(self) -> bool {
        matches!(
            self,
            ReadoutVariant::SharedQueries | ReadoutVariant::SeparateQueries | ReadoutVariant::PromptPrepend
        )
    }

    /// Whether the readout depends only on the backbone's hidden states of
    /// the bare content, so those can be computed once and reused.
    pub fn reads_content_hidden(self) -> bool {
        matches!(
            self,
            ReadoutVariant::LinearHead | ReadoutVariant::TfBlockHead | ReadoutVariant::LastToken
        )
    }

    /// Whether the content sits at the start of the sequence, so its keys,
    /// values and hidden states can be computed once per item.
    pub fn caches_prefix(self) -> bool {
        self != ReadoutVariant::PromptPrepend
    }
}

impl fmt::Display for ReadoutVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReadoutVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ReadoutVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown readout variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingStrategy {
    #[default]
    Mean,
    Max,
    Last,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 3] = [PoolingStrategy::Mean, PoolingStrategy::Max, PoolingStrategy::Last];

    pub fn name(self) -> &'static str {
        match self {
            PoolingStrategy::Mean => "mean",
            PoolingStrategy::Max => "max",
            PoolingStrategy::Last => "last",
        }
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PoolingStrategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling strategy '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum QueryInit {
    #[default]
    Zeros,
    Gaussian { std: f64 },
}

/// Learnable temperature, stored as `ln τ` and clamped to `[TAU_MIN, TAU_MAX]`.
#[derive(Clone, Debug)]
pub struct Temperature<T: Scalar> {
    pub raw: Tensor<T>,
}

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

impl<T: Scalar> Temperature<T> {
    pub fn new(tau: f64) -> Result<Self> {
        ensure!(
            (TAU_MIN..=TAU_MAX).contains(&tau),
            Config,
            "temperature {} outside [{}, {}]",
            tau,
            TAU_MIN,
            TAU_MAX
        );
        Ok(Temperature {
            raw: Tensor::from_fn(&[1], |_| T::lit(tau.ln())).with_requires_grad(true),
        })
    }

    pub fn tau(&self) -> f64 {
        self.raw.data()[0].as_f64().exp()
    }

    pub fn raw(&self) -> f64 {
        self.raw.data()[0].as_f64()
    }

    /// Pulls `raw` back into the allowed range after an update.
    pub fn clamp(&mut self) {
        let r = self.raw().clamp(TAU_MIN.ln(), TAU_MAX.ln());
        self.raw.data_mut()[0] = T::lit(r);
    }
}

/// Everything an adaptation run trains: the query bank or head for the chosen
/// variant, plus the temperature.
#[derive(Clone, Debug)]
pub struct Adapter<T: Scalar> {
    pub variant: ReadoutVariant,
    pub pooling: PoolingStrategy,
    pub n_queries: usize,
    /// Shared bank, or the text bank when banks are separate.
    pub queries: Option<Tensor<T>>,
    pub image_queries: Option<Tensor<T>>,
    pub linear: Option<Tensor<T>>,
    pub block: Option<Block<T>>,
    pub temperature: Temperature<T>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(
        variant: ReadoutVariant,
        pooling: PoolingStrategy,
        n_queries: usize,
        init: QueryInit,
        backbone: &BackboneConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = backbone.d_model;
        let mut a = Adapter {
            variant,
            pooling,
            n_queries: 0,
            queries: None,
            image_queries: None,
            linear: None,
            block: None,
            temperature: Temperature::new(TAU_INIT)?,
        };
        if variant.uses_queries() {
            ensure!(n_queries >= 1, Input, "a query bank needs at least one query");
            a.n_queries = n_queries;
            a.queries = Some(init_bank(n_queries, d, init, seed, "queries")?);
            if variant == ReadoutVariant::SeparateQueries {
                a.image_queries = Some(init_bank(n_queries, d, init, seed, "image-queries")?);
            }
        }
        match variant {
            ReadoutVariant::LinearHead => {
                a.linear = Some(Tensor::from_fn(&[d, d], |i| if i / d == i % d { T::one() } else { T::zero() }).with_requires_grad(true));
            }
            ReadoutVariant::TfBlockHead => {
                let mut rng = seeds::stream(seed, "tf-block-head");
                let mut b = Block::new(d, backbone.n_heads, backbone.ffn_mult, 1, &mut rng);
                b.set_requires_grad(true);
                a.block = Some(b);
            }
            _ => {}
        }
        Ok(a)
    }

    /// The bank a modality reads; the same tensor for both when shared.
    pub fn bank(&self, modality: Modality) -> Option<&Tensor<T>> {
        match (modality, &self.image_queries) {
            (Modality::Image, Some(q)) => Some(q),
            _ => self.queries.as_ref(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(q) = &self.queries {
            out.push(("queries".to_string(), q));
        }
        if let Some(q) = &self.image_queries {
            out.push(("image_queries".to_string(), q));
        }
        if let Some(w) = &self.linear {
            out.push(("linear".to_string(), w));
        }
        if let Some(b) = &self.block {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("block.{n}"), t)));
        }
        out.push(("tau.raw".to_string(), &self.temperature.raw));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(q) = &mut self.queries {
            out.push(q);
        }
        if let Some(q) = &mut self.image_queries {
            out.push(q);
        }
        if let Some(w) = &mut self.linear {
            out.push(w);
        }
        if let Some(b) = &mut self.block {
            out.extend(b.named_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.temperature.raw);
        out
    }

    /// Number of trainable scalars.
    pub fn census(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter {
            variant: self.variant,
            pooling: self.pooling,
            n_queries: self.n_queries,
            queries: self.queries.as_ref().map(|t| t.cast().with_requires_grad(true)),
            image_queries: self.image_queries.as_ref().map(|t| t.cast().with_requires_grad(true)),
            linear: self.linear.as_ref().map(|t| t.cast().with_requires_grad(true)),
            block: self.block.as_ref().map(|b| {
                let mut c = b.cast();
                c.set_requires_grad(true);
                c
            }),
            temperature: Temperature {
                raw: self.temperature.raw.cast().with_requires_grad(true),
            },
        }
    }

    /// Records the embedding of `content` on `tape` and returns the `1 × d`
    /// unit-norm result. `hidden` may carry precomputed content hidden
    /// states for variants that only read those.
    pub fn encode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        backbone: &'a Backbone<T>,
        content: &TokenSequence<T>,
        cache: Option<&PrefixCache<T>>,
    ) -> Result<Var> {
        let d = backbone.d_model();
        ensure!(content.d == d, Dimension, "content width {} for d_model {}", content.d, d);
        let l = content.len;
        if let Some(c) = cache {
            ensure!(c.len == l, Dimension, "prefix cache of {} rows for content of {}", c.len, l);
            ensure!(self.variant.caches_prefix(), State, "{} cannot use a prefix cache", self.variant);
        }
        let pooled = match self.variant {
            ReadoutVariant::SharedQueries | ReadoutVariant::SeparateQueries => {
                let bank = self.bank(content.modality).expect("query variant has a bank");
                check_fits(l, self.n_queries, backbone)?;
                let q = tape.param(bank);
                let states = match cache {
                    Some(c) => backbone.forward_suffix_on(tape, c, q)?,
                    None => {
                        let x = tape.constant(l, d, content.data.clone())?;
                        let seq = tape.concat_rows(&[x, q])?;
                        let h = backbone.forward_on(tape, seq)?;
                        tape.slice_last_n(h, self.n_queries)?
                    }
                };
                pool_on(tape, states, self.pooling)?
            }
            ReadoutVariant::PromptPrepend => {
                let bank = self.queries.as_ref().expect("prompt variant has a bank");
                check_fits(l, self.n_queries, backbone)?;
                let x = tape.constant(l, d, content.data.clone())?;
                let q = tape.param(bank);
                let seq = tape.concat_rows(&[q, x])?;
                let h = backbone.forward_on(tape, seq)?;
                tape.slice_rows(h, self.n_queries + l - 1, 1)?
            }
            ReadoutVariant::LastToken | ReadoutVariant::LinearHead | ReadoutVariant::TfBlockHead => {
                let h = match cache {
                    Some(c) => tape.constant(l, d, c.hidden.clone())?,
                    None => {
                        let x = tape.constant(l, d, content.data.clone())?;
                        backbone.forward_on(tape, x)?
                    }
                };
                match self.variant {
                    ReadoutVariant::LastToken => tape.slice_rows(h, l - 1, 1)?,
                    ReadoutVariant::LinearHead => {
                        let last = tape.slice_rows(h, l - 1, 1)?;
                        let w = tape.param(self.linear.as_ref().expect("linear head"));
                        tape.matmul(last, w)?
                    }
                    _ => {
                        let block = self.block.as_ref().expect("block head");
                        let out = block.forward_on(tape, h, None)?;
                        tape.slice_rows(out, l - 1, 1)?
                    }
                }
            }
        };
        tape.l2_normalize(pooled)
    }

    /// Value-level embedding of one piece of content.
    pub fn encode(&self, backbone: &Backbone<T>, content: &TokenSequence<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let z = self.encode_on(&mut tape, backbone, content, None)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new()
            .meta("kind", ADAPTER_KIND)
            .meta("variant", self.variant.name())
            .meta("pooling", self.pooling.name())
            .meta("n_queries", self.n_queries.to_string());
        for (name, t) in self.named_params() {
            c.push(&name, t);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, backbone: &BackboneConfig) -> Result<Self> {
        ensure!(
            c.meta_value("kind")? == ADAPTER_KIND,
            Format,
            "container holds '{}', not an adapter",
            c.meta_value("kind")?
        );
        let fmt_err = |e: Error| Error::Format(e.to_string());
        let variant: ReadoutVariant = c.meta_value("variant")?.parse().map_err(fmt_err)?;
        let pooling: PoolingStrategy = c.meta_value("pooling")?.parse().map_err(fmt_err)?;
        let n_queries: usize = c
            .meta_value("n_queries")?
            .parse()
            .map_err(|_| Error::Format("n_queries is not an integer".into()))?;
        let mut a = Adapter::new(variant, pooling, n_queries, QueryInit::Zeros, backbone, 0).map_err(fmt_err)?;
        let names: Vec<String> = a.named_params().into_iter().map(|(n, _)| n).collect();
        ensure!(
            c.entries.len() == names.len(),
            Format,
            "adapter container has {} tensors, expected {}",
            c.entries.len(),
            names.len()
        );
        let mut loaded = Vec::with_capacity(names.len());
        for n in &names {
            loaded.push(c.tensor::<T>(n)?);
        }
        for (slot, (name, t)) in a.params_mut().into_iter().zip(names.iter().zip(loaded)) {
            ensure!(slot.shape() == t.shape(), Format, "tensor '{}' has shape {:?}", name, t.shape());
            ensure!(t.is_finite(), Format, "tensor '{}' has non-finite values", name);
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(a)
    }
}

pub const ADAPTER_KIND: &str = "adapter";

fn init_bank<T: Scalar>(n: usize, d: usize, init: QueryInit, seed: u64, stream: &str) -> Result<Tensor<T>> {
    let t = match init {
        QueryInit::Zeros => Tensor::zeros(&[n, d]),
        QueryInit::Gaussian { std } => {
            ensure!(std > 0.0 && std.is_finite(), Config, "query init std must be positive");
            let dist = Normal::new(0.0, std).expect("checked std");
            let mut rng = seeds::stream(seed, stream);
            Tensor::from_fn(&[n, d], |_| T::lit(dist.sample(&mut rng)))
        }
    };
    Ok(t.with_requires_grad(true))
}

fn check_fits<T: Scalar>(len: usize, n: usize, backbone: &Backbone<T>) -> Result<()> {
    ensure!(
        len + n <= backbone.config().max_seq_len,
        Input,
        "{} content positions plus {} queries exceed max_seq_len {}",
        len,
        n,
        backbone.config().max_seq_len
    );
    Ok(())
}

fn pool_on<T: Scalar>(tape: &mut Tape<'_, T>, states: Var, pooling: PoolingStrategy) -> Result<Var> {
    match pooling {
        PoolingStrategy::Mean => tape.mean(states, Axis::Rows),
        PoolingStrategy::Max => tape.max(states, Axis::Rows),
        PoolingStrategy::Last => {
            let n = tape.dims(states).0;
            tape.slice_rows(states, n - 1, 1)
        }
    }
}

/// Content rows followed by the bank rows.
pub fn build_sequence<T: Scalar>(content: &TokenSequence<T>, bank: &Tensor<T>, max_seq_len: usize) -> Result<TokenSequence<T>> {
    let (n, d) = bank.matrix_dims();
    ensure!(n >= 1 && bank.numel() > 0, Input, "empty query bank");
    ensure!(d == content.d, Dimension, "bank width {} for content width {}", d, content.d);
    ensure!(
        content.len + n <= max_seq_len,
        Input,
        "{} + {} positions exceed max_seq_len {}",
        content.len,
        n,
        max_seq_len
    );
    let mut data = content.data.clone();
    data.extend_from_slice(bank.data());
    TokenSequence::new(content.modality, d, data)
}

/// The last `n` rows of a `len × d` hidden-state matrix.
pub fn extract_query_states<T: Scalar>(hidden: &[T], d: usize, n: usize) -> Result<Vec<T>> {
    ensure!(d > 0 && hidden.len() % d == 0, Dimension, "{} values for width {}", hidden.len(), d);
    let len = hidden.len() / d;
    ensure!(n >= 1 && n < len, Input, "cannot take {} query states from {} rows", n, len);
    Ok(hidden[(len - n) * d..].to_vec())
}

/// Pools `n × d` states to one row and scales it to unit length.
pub fn pool_and_normalize<T: Scalar>(states: &[T], d: usize, strategy: PoolingStrategy) -> Result<Vec<T>> {
    ensure!(d > 0 && !states.is_empty() && states.len() % d == 0, Input, "{} states for width {}", states.len(), d);
    let n = states.len() / d;
    let rows = states.chunks(d);
    let pooled: Vec<f64> = match strategy {
        PoolingStrategy::Mean => {
            let mut acc = vec![0.0; d];
            for r in rows {
                for (a, &x) in acc.iter_mut().zip(r) {
                    *a += x.as_f64();
                }
            }
            acc.into_iter().map(|a| a / n as f64).collect()
        }
        PoolingStrategy::Max => {
            let mut acc = vec![f64::NEG_INFINITY; d];
            for r in rows {
                for (a, &x) in acc.iter_mut().zip(r) {
                    *a = a.max(x.as_f64());
                }
            }
            acc
        }
        PoolingStrategy::Last => states[(n - 1) * d..].iter().map(|x| x.as_f64()).collect(),
    };
    normalize(&pooled).map(|v| v.into_iter().map(T::lit).collect())
}

/// Unit-length copy; zero vectors are degenerate, non-finite ones numeric errors.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    ensure!(v.iter().all(|x| x.is_finite()), Numeric, "non-finite vector");
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(norm > 0.0, Degenerate, "pooled vector has zero norm");
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Text or image input to an encoder.
#[derive(Clone, Copy, Debug)]
pub enum Content<'c> {
    Text(&'c [TokenId]),
    Image(&'c SynthImage),
}

impl Content<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            Content::Text(_) => Modality::Text,
            Content::Image(_) => Modality::Image,
        }
    }

    pub fn embed<T: Scalar>(&self, backbone: &Backbone<T>) -> Result<TokenSequence<T>> {
        match self {
            Content::Text(t) => backbone.embed_text(t),
            Content::Image(i) => backbone.embed_image(i),
        }
    }
}

/// One stored embedding. Field order is fixed: `id`, `modality`, `vector`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, modality: Modality, vector: Vec<f64>) -> Result<Self> {
        let r = EmbeddingRecord {
            id: id.into(),
            modality,
            vector,
        };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        ensure!(!self.vector.is_empty(), Format, "record '{}' has an empty vector", self.id);
        ensure!(self.vector.iter().all(|x| x.is_finite()), Format, "record '{}' is not finite", self.id);
        let norm = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure!(
            (norm - 1.0).abs() <= UNIT_TOL,
            Format,
            "record '{}' has norm {}",
            self.id,
            norm
        );
        Ok(())
    }
}

/// Encodes `content` end to end into a record.
pub fn encode<T: Scalar>(
    id: &str,
    content: Content<'_>,
    backbone: &Backbone<T>,
    adapter: &Adapter<T>,
) -> Result<EmbeddingRecord> {
    let seq = content.embed(backbone)?;
    let z = adapter.encode(backbone, &seq)?;
    EmbeddingRecord::new(id, content.modality(), z.iter().map(|x| x.as_f64()).collect())
}

/// One JSON object per line.
pub fn write_dump(records: &[EmbeddingRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_dump(bytes: &[u8]) -> Result<Vec<EmbeddingRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("dump is not UTF-8".into()))?;
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        r.check()?;
        if let Some(first) = out.first() {
            ensure!(
                first.vector.len() == r.vector.len(),
                Format,
                "line {}: width {} differs from {}",
                i + 1,
                r.vector.len(),
                first.vector.len()
            );
        }
        out.push(r);
    }
    Ok(out)
}
