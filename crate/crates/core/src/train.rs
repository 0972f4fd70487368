//! Symmetric InfoNCE with a learnable temperature, and the loop that trains
//! only the adapter against a frozen backbone.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PrefixCache, TokenSequence};
use crate::error::{ensure, Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, LrSchedule};
use crate::readout::{Adapter, Content, UNIT_TOL};
use crate::seeds;
use crate::synth::Pair;
use crate::tensor::{kernels, GradSum, Scalar, Tape};

/// `S[i][j] = ⟨z_I,i, z_T,j⟩` for unit rows, row-major `B × B`.
pub fn similarity_matrix(zi: &[Vec<f64>], zt: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(zi.len() == zt.len() && !zi.is_empty(), Dimension, "{} image rows vs {} text rows", zi.len(), zt.len());
    let d = zi[0].len();
    for z in zi.iter().chain(zt) {
        ensure!(z.len() == d, Dimension, "row width {} vs {}", z.len(), d);
        let n = kernels::l2_norm(z);
        ensure!((n - 1.0).abs() <= 1e-4, Contract, "row norm {} is not unit", n);
    }
    let mut s = Vec::with_capacity(zi.len() * zt.len());
    for a in zi {
        for b in zt {
            s.push(kernels::dot(a, b));
        }
    }
    Ok(s)
}

fn square_dim(s: &[f64]) -> Result<usize> {
    let b = (s.len() as f64).sqrt().round() as usize;
    ensure!(b >= 1 && b * b == s.len(), Dimension, "{} entries is not a square matrix", s.len());
    ensure!(s.iter().all(|x| x.is_finite()), Numeric, "similarity matrix is not finite");
    Ok(b)
}

fn check_tau(tau: f64) -> Result<()> {
    ensure!(tau > 0.0 && tau.is_finite(), Numeric, "temperature {} must be positive", tau);
    Ok(())
}

/// Image-to-text InfoNCE: row-wise cross-entropy against the diagonal.
pub fn info_nce_i2t(s: &[f64], tau: f64) -> Result<f64> {
    let b = square_dim(s)?;
    check_tau(tau)?;
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = s[i * b..(i + 1) * b].iter().map(|x| x / tau).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / b as f64)
}

/// Text-to-image InfoNCE: the same over columns.
pub fn info_nce_t2i(s: &[f64], tau: f64) -> Result<f64> {
    let b = square_dim(s)?;
    info_nce_i2t(&kernels::transpose(s, b, b), tau)
}

pub fn symmetric_loss(s: &[f64], tau: f64) -> Result<f64> {
    Ok(0.5 * (info_nce_i2t(s, tau)? + info_nce_t2i(s, tau)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 5e-4,
            warmup_ratio: 0.03,
            total_steps: 1000,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        ensure!((0.0..1.0).contains(&self.warmup_ratio), Config, "warmup_ratio must lie in [0, 1)");
        // zero steps is allowed: the adapter stays at its initialisation
        ensure!(self.batch_size >= 2, Config, "batch_size must be at least 2");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be non-negative");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            Config,
            "adam betas must lie in [0, 1) and eps be positive"
        );
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.learning_rate, self.warmup_ratio, self.total_steps)
    }
}

/// `B` aligned image/caption pairs with unique ids.
#[derive(Clone, Debug)]
pub struct PairBatch<'p> {
    pub pairs: Vec<&'p Pair>,
}

impl<'p> PairBatch<'p> {
    pub fn new(pairs: Vec<&'p Pair>) -> Result<Self> {
        ensure!(!pairs.is_empty(), Input, "empty batch");
        let mut seen = HashSet::new();
        for p in &pairs {
            ensure!(seen.insert(p.id.as_str()), Input, "duplicate id '{}' in batch", p.id);
        }
        Ok(PairBatch { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Loss and trainable-parameter gradients of one batch.
pub struct BatchGrads<T: Scalar> {
    pub loss: f64,
    pub grads: GradSum<T>,
    pub z_image: Vec<Vec<f64>>,
    pub z_text: Vec<Vec<f64>>,
}

/// Per-item prefix caches keyed by pair id and whether it is the image side.
pub type ContentCache<T> = HashMap<(String, bool), PrefixCache<T>>;

pub struct Trainer<'b, T: Scalar> {
    pub backbone: &'b Backbone<T>,
    pub adapter: Adapter<T>,
    pub config: TrainerConfig,
    opt: AdamW<T>,
    schedule: LrSchedule,
    step: usize,
    cache: ContentCache<T>,
}

impl<'b, T: Scalar> Trainer<'b, T> {
    pub fn new(backbone: &'b Backbone<T>, adapter: Adapter<T>, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        ensure!(backbone.is_frozen(), State, "adaptation needs a frozen backbone");
        Ok(Trainer {
            backbone,
            adapter,
            opt: AdamW::new(AdamConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
            }),
            schedule: config.schedule(),
            config,
            step: 0,
            cache: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn into_adapter(self) -> Adapter<T> {
        self.adapter
    }

    fn warm_cache(&mut self, batch: &PairBatch<'_>) -> Result<()> {
        if !self.adapter.variant.caches_prefix() {
            return Ok(());
        }
        for p in &batch.pairs {
            for (is_image, c) in [(true, Content::Image(&p.image)), (false, Content::Text(&p.caption.tokens))] {
                let key = (p.id.clone(), is_image);
                if !self.cache.contains_key(&key) {
                    let cache = self.backbone.prefix_cache(&c.embed(self.backbone)?)?;
                    self.cache.insert(key, cache);
                }
            }
        }
        Ok(())
    }

    /// Forward and backward for one batch without updating anything.
    pub fn batch_grads(&mut self, batch: &PairBatch<'_>) -> Result<BatchGrads<T>> {
        self.warm_cache(batch)?;
        batch_grads(self.backbone, &self.adapter, batch, &self.cache)
    }

    pub fn train_step(&mut self, batch: &PairBatch<'_>) -> Result<StepReport> {
        ensure!(self.backbone.is_frozen(), State, "adaptation needs a frozen backbone");
        let bg = self.batch_grads(batch)?;
        let mut params = self.adapter.params_mut();
        for p in params.iter_mut() {
            bg.grads.accumulate_into(p)?;
        }
        let grad_norm = clip_global_norm(&mut params, self.config.grad_clip);
        ensure!(grad_norm.is_finite(), Numeric, "non-finite gradient at step {}", self.step);
        let lr = self.schedule.lr(self.step);
        self.opt.step(&mut params, lr);
        self.adapter.temperature.clamp();
        let report = StepReport {
            step: self.step,
            loss: bg.loss,
            tau: self.adapter.temperature.tau(),
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs the remaining steps over `pairs` in seeded, epoch-shuffled
    /// batches. `on_step` sees each report and whether it closed an epoch.
    pub fn fit(&mut self, pairs: &[&Pair], mut on_step: impl FnMut(&StepReport, Option<usize>)) -> Result<Vec<StepReport>> {
        let b = self.config.batch_size;
        ensure!(pairs.len() >= b, Input, "{} training pairs for batch size {}", pairs.len(), b);
        let mut rng = seeds::stream(self.config.seed, "adapt-batches");
        let per_epoch = pairs.len() / b;
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut epoch = 0;
        let mut reports = Vec::with_capacity(self.config.total_steps);
        while self.step < self.config.total_steps {
            if cursor == 0 {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            let batch = PairBatch::new(order[cursor * b..(cursor + 1) * b].iter().map(|&i| pairs[i]).collect())?;
            let r = self.train_step(&batch)?;
            cursor += 1;
            let closed = if cursor == per_epoch || self.step == self.config.total_steps {
                cursor = 0;
                epoch += 1;
                Some(epoch)
            } else {
                None
            };
            on_step(&r, closed);
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Symmetric loss of a batch and its gradients with respect to every
/// trainable adapter tensor.
///
/// Each sample is encoded on its own tape. The loss is formed on a small
/// tape over the stacked embeddings; its gradient with respect to each
/// embedding is then pushed back through that sample's tape.
pub fn batch_grads<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &Adapter<T>,
    batch: &PairBatch<'_>,
    cache: &ContentCache<T>,
) -> Result<BatchGrads<T>> {
    branch_grads(backbone, adapter, batch, cache, true, true)
}

/// As [`batch_grads`], but only back-propagates through the selected
/// modality branches; the other branch's embeddings act as constants.
pub fn branch_grads<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &Adapter<T>,
    batch: &PairBatch<'_>,
    cache: &ContentCache<T>,
    through_image: bool,
    through_text: bool,
) -> Result<BatchGrads<T>> {
    let b = batch.len();
    let d = backbone.d_model();
    let mut image_tapes = Vec::with_capacity(b);
    let mut text_tapes = Vec::with_capacity(b);
    for p in &batch.pairs {
        for (is_image, content, tapes) in [
            (true, Content::Image(&p.image), &mut image_tapes),
            (false, Content::Text(&p.caption.tokens), &mut text_tapes),
        ] {
            let seq: TokenSequence<T> = content.embed(backbone)?;
            let mut tape = Tape::new();
            let z = adapter.encode_on(&mut tape, backbone, &seq, cache.get(&(p.id.clone(), is_image)))?;
            tapes.push((tape, z));
        }
    }
    let stack = |tapes: &Vec<(Tape<'_, T>, crate::tensor::Var)>| -> Vec<T> {
        tapes.iter().flat_map(|(t, z)| t.value(*z).to_vec()).collect()
    };
    let (zi_vals, zt_vals) = (stack(&image_tapes), stack(&text_tapes));

    let mut head = Tape::new();
    let zi = head.input(b, d, zi_vals.clone(), true)?;
    let zt = head.input(b, d, zt_vals.clone(), true)?;
    let raw = head.param(&adapter.temperature.raw);
    let ztt = head.transpose(zt)?;
    let s = head.matmul(zi, ztt)?;
    let neg = head.scale(raw, -T::one())?;
    let inv_tau = head.exp(neg)?;
    let logits = head.scale_by(s, inv_tau)?;
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let i2t = head.cross_entropy(logits, &diag)?;
    let logits_t = head.transpose(logits)?;
    let t2i = head.cross_entropy(logits_t, &diag)?;
    let sum = head.add(i2t, t2i)?;
    let loss = head.scale(sum, T::lit(0.5))?;
    let loss_value = head.value(loss)[0].as_f64();
    ensure!(loss_value.is_finite(), Numeric, "non-finite loss");
    let hg = head.backward(loss)?;

    let mut grads = GradSum::new();
    grads.add(&hg);
    for (var, tapes, on) in [(zi, &image_tapes, through_image), (zt, &text_tapes, through_text)] {
        if !on {
            continue;
        }
        let dz = hg.wrt(var).ok_or_else(|| Error::Contract("embedding gradient missing".into()))?;
        for (k, (tape, z)) in tapes.iter().enumerate() {
            if tape.requires_grad(*z) {
                grads.add(&tape.backward_from(*z, &dz[k * d..(k + 1) * d])?);
            }
        }
    }
    let rows = |v: &[T]| -> Vec<Vec<f64>> { v.chunks(d).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect() };
    Ok(BatchGrads {
        loss: loss_value,
        grads,
        z_image: rows(&zi_vals),
        z_text: rows(&zt_vals),
    })
}

/// Value-level symmetric loss of a batch, recomputed from scratch.
pub fn batch_loss<T: Scalar>(backbone: &Backbone<T>, adapter: &Adapter<T>, batch: &PairBatch<'_>) -> Result<f64> {
    let mut zi = Vec::with_capacity(batch.len());
    let mut zt = Vec::with_capacity(batch.len());
    for p in &batch.pairs {
        for (c, out) in [(Content::Image(&p.image), &mut zi), (Content::Text(&p.caption.tokens), &mut zt)] {
            let z = adapter.encode(backbone, &c.embed(backbone)?)?;
            out.push(z.iter().map(|x| x.as_f64()).collect::<Vec<f64>>());
        }
    }
    // rows are unit to working precision; renormalise in f64 for the check
    let renorm = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        v.into_iter()
            .map(|r| {
                let n = kernels::l2_norm(&r);
                debug_assert!((n - 1.0).abs() < 1e-3 + UNIT_TOL);
                r.into_iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let s = similarity_matrix(&renorm(zi), &renorm(zt))?;
    symmetric_loss(&s, adapter.temperature.tau())
}
