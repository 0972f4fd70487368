use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{ensure, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, LrSchedule};
use crate::seeds;
use crate::synth::vocab::TokenId;
use crate::synth::{Pair, SynthImage};
use crate::tensor::{GradSum, Scalar, Tape};

/// One pretraining sequence: optional image patches followed by caption
/// tokens. With an image, every caption token is predicted from everything
/// before it (the first from the last patch); without one, tokens `1..` are.
///
/// Captioning alone teaches the model to describe images, but gives no
/// reason for an image and its caption to end up in similar states. Text
/// sequences that repeat a caption fix that: predicting the second copy
/// forces the model to carry the first copy's content forward, the same
/// circuit later used to carry an image's content into appended rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    pub image: Option<SynthImage>,
    pub tokens: Vec<TokenId>,
}

impl PretrainExample {
    pub fn captioned(p: &Pair) -> Self {
        PretrainExample {
            image: Some(p.image.clone()),
            tokens: p.caption.tokens.clone(),
        }
    }

    pub fn text_only(p: &Pair) -> Self {
        PretrainExample {
            image: None,
            tokens: p.caption.tokens.clone(),
        }
    }

    /// The caption followed by itself, as text.
    pub fn repeated(p: &Pair) -> Self {
        PretrainExample {
            image: None,
            tokens: [p.caption.tokens.as_slice(), p.caption.tokens.as_slice()].concat(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub grad_clip: Option<f64>,
    /// Share of pairs that also contribute a repeated-caption sequence.
    pub repeat_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 3e-3,
            warmup_ratio: 0.03,
            grad_clip: Some(1.0),
            repeat_fraction: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1 && self.batch_size >= 1, Config, "pretrain steps and batch_size must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "pretrain lr must be positive");
        ensure!((0.0..1.0).contains(&self.warmup_ratio), Config, "warmup_ratio must lie in [0, 1)");
        ensure!(
            (0.0..=1.0).contains(&self.repeat_fraction),
            Config,
            "repeat_fraction must lie in [0, 1]"
        );
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        Ok(())
    }
}

impl<T: Scalar> Backbone<T> {
    /// Mean next-token cross-entropy of one example.
    pub fn lm_loss_on<'a>(&'a self, tape: &mut Tape<'a, T>, ex: &PretrainExample) -> Result<crate::tensor::Var> {
        let text = self.embed_text_on(tape, &ex.tokens)?;
        let (x, first, targets): (_, usize, Vec<TokenId>) = match &ex.image {
            Some(img) => {
                let patches = self.embed_image_on(tape, img)?;
                let p = tape.dims(patches).0;
                (tape.concat_rows(&[patches, text])?, p - 1, ex.tokens.clone())
            }
            None => {
                ensure!(ex.tokens.len() >= 2, Input, "text-only example needs two tokens");
                (text, 0, ex.tokens[1..].to_vec())
            }
        };
        let h = self.forward_on(tape, x)?;
        let rows = tape.slice_rows(h, first, targets.len())?;
        let logits = self.logits_on(tape, rows)?;
        let pairs: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
        tape.cross_entropy(logits, &pairs)
    }

    /// Mean loss over `batch` without updating anything.
    pub fn lm_loss(&self, batch: &[PretrainExample]) -> Result<f64> {
        ensure!(!batch.is_empty(), Input, "empty batch");
        let mut total = 0.0;
        for ex in batch {
            let mut tape = Tape::new();
            let l = self.lm_loss_on(&mut tape, ex)?;
            total += tape.value(l)[0].as_f64();
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer step on the batch-mean loss. Returns the loss and the
    /// gradient norm before clipping.
    pub fn pretrain_step(
        &mut self,
        batch: &[PretrainExample],
        opt: &mut AdamW<T>,
        lr: f64,
        grad_clip: Option<f64>,
    ) -> Result<(f64, f64)> {
        ensure!(!self.is_frozen(), State, "pretrain_step on a frozen backbone");
        ensure!(!batch.is_empty(), Input, "empty batch");
        let inv = T::lit(1.0 / batch.len() as f64);
        let mut sum = GradSum::new();
        let mut total = 0.0;
        for ex in batch {
            let mut tape = Tape::new();
            let l = self.lm_loss_on(&mut tape, ex)?;
            total += tape.value(l)[0].as_f64();
            sum.add(&tape.backward_from(l, &[inv])?);
        }
        let mut params = self.params_mut();
        for p in params.iter_mut() {
            sum.accumulate_into(p)?;
        }
        let norm = clip_global_norm(&mut params, grad_clip);
        opt.step(&mut params, lr);
        Ok((total / batch.len() as f64, norm))
    }
}

/// Builds the pretraining mix from pairs: each pair contributes its
/// captioned sequence, and a seeded subset also a repeated caption.
pub fn examples_from(pairs: &[&Pair], repeat_fraction: f64, seed: u64) -> Vec<PretrainExample> {
    let mut out: Vec<PretrainExample> = pairs.iter().map(|p| PretrainExample::captioned(p)).collect();
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut seeds::stream(seed, "pretrain-repeats"));
    let n = ((pairs.len() as f64) * repeat_fraction.clamp(0.0, 1.0)).round() as usize;
    idx.truncate(n);
    idx.sort_unstable();
    out.extend(idx.into_iter().map(|i| PretrainExample::repeated(pairs[i])));
    out
}

/// Runs the full pretraining schedule. Returns the per-step batch losses.
pub fn pretrain<T: Scalar>(
    backbone: &mut Backbone<T>,
    examples: &[PretrainExample],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64, f64, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    ensure!(!examples.is_empty(), Input, "no pretraining examples");
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_ratio, cfg.steps);
    let mut opt = AdamW::new(AdamConfig::default());
    let mut rng = seeds::stream(seed, "pretrain-batches");
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(examples[order.pop().expect("refilled")].clone());
        }
        let lr = schedule.lr(step);
        let (loss, norm) = backbone.pretrain_step(&batch, &mut opt, lr, cfg.grad_clip)?;
        on_step(step, loss, lr, norm);
        losses.push(loss);
    }
    Ok(losses)
}
