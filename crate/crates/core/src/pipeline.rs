//! End-to-end runs: pretrain, adapt, evaluate, ablate and diagnose, driven by
//! one TOML config and writing every artifact under an output directory.
//!
//! Every stage is a pure function of the config, its input artifacts and the
//! run seed, so reruns write byte-identical files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{examples_from, pretrain, Backbone, BackboneConfig, PretrainConfig};
use crate::checkpoint::Container;
use crate::error::{ensure, Error, Result};
use crate::eval::{
    geometry_csv, geometry_report, pca_svg, retrieval_csv, retrieval_report, rows_csv, top_margins, Direction,
    EmbeddingSet, GeometryReport, RetrievalReport, DEFAULT_KS,
};
use crate::readout::{
    encode, write_dump, Adapter, Content, EmbeddingRecord, PoolingStrategy, QueryInit, ReadoutVariant, QUERY_SWEEP,
};
use crate::seeds;
use crate::synth::{gen_explicit, gen_reasoning, split_counts, Dimension, DimensionMix, Pair, PairedDataset, Split, Tier};
use crate::train::{Trainer, TrainerConfig};

/// Adaptation learning rate of the desk preset. Far above the 5e-4 default
/// because the desk-scale adapter has only a few hundred parameters and a
/// 1k-step budget.
pub const DESK_LEARNING_RATE: f64 = 2e-2;

pub const BACKBONE_FILE: &str = "backbone.slq";
pub const ADAPTER_FILE: &str = "adapter.slq";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Explicit-tier pairs in the pretraining corpus.
    pub pretrain_explicit: usize,
    /// Reasoning-tier pairs in the pretraining corpus.
    pub pretrain_reasoning: usize,
    /// Tier of the adaptation and evaluation pairs.
    pub tier: Tier,
    pub adapt_train: usize,
    pub eval: usize,
    pub mix: DimensionMix,
    /// Pairs per tier in the zero-shot diagnostic.
    pub diagnose_per_tier: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_explicit: 3000,
            pretrain_reasoning: 1000,
            tier: Tier::Explicit,
            adapt_train: 512,
            eval: 128,
            mix: DimensionMix::benchmark(),
            diagnose_per_tier: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    pub variant: ReadoutVariant,
    pub n_queries: usize,
    pub pooling: PoolingStrategy,
    pub init: QueryInit,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        ReadoutConfig {
            variant: ReadoutVariant::SharedQueries,
            n_queries: crate::readout::DEFAULT_QUERIES,
            pooling: PoolingStrategy::Mean,
            init: QueryInit::Zeros,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub geometry: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            geometry: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Queries,
    Pooling,
    Variant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub axis: AblationAxis,
    /// Settings along the axis; empty means the axis' full list.
    pub settings: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: AblationAxis::Pooling,
            settings: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of all randomness; components draw named sub-streams from it.
    pub seed: u64,
    pub out: PathBuf,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    /// `trainer.seed` is always re-derived from `seed`.
    pub trainer: TrainerConfig,
    pub readout: ReadoutConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            trainer: TrainerConfig::default(),
            readout: ReadoutConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config. Unknown keys are rejected with a
    /// message naming them.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string() + &span_note(s, e.span())))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies derived fields; call again after changing `seed`.
    pub fn resolve(&mut self) {
        self.trainer.seed = seeds::derive(self.seed, "adapt");
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pretrain.validate()?;
        self.trainer.validate()?;
        self.data.mix.validate().map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.data;
        ensure!(d.pretrain_explicit + d.pretrain_reasoning > 0, Config, "data: empty pretraining corpus");
        ensure!(d.adapt_train > 0 && d.eval > 0, Config, "data: adapt_train and eval must be positive");
        ensure!(d.diagnose_per_tier >= 2, Config, "data: diagnose_per_tier must be at least 2");
        ensure!(self.readout.n_queries >= 1, Config, "readout: n_queries must be positive");
        if let QueryInit::Gaussian { std } = self.readout.init {
            ensure!(std > 0.0 && std.is_finite(), Config, "readout: gaussian std must be positive");
        }
        ensure!(!self.eval.ks.is_empty() && self.eval.ks.iter().all(|&k| k >= 1), Config, "eval: ks must be positive");
        ensure!(!self.ablate.seeds.is_empty(), Config, "ablate: seeds must not be empty");
        Ok(())
    }
}

fn span_note(s: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) if r.start <= s.len() => {
            let line = s[..r.start].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        _ => String::new(),
    }
}

/// Where stage output goes, and whether to narrate progress on stderr.
#[derive(Clone, Debug)]
pub struct Sink {
    pub dir: PathBuf,
    pub quiet: bool,
}

impl Sink {
    pub fn new(dir: impl Into<PathBuf>, quiet: bool) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Sink { dir, quiet })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_config(cfg: &RunConfig, sink: &Sink) -> Result<()> {
    sink.write(CONFIG_FILE, &cfg.to_toml()?)?;
    Ok(())
}

pub fn pretrain_corpus(cfg: &RunConfig) -> Result<PairedDataset> {
    let d = &cfg.data;
    let mut parts = Vec::new();
    if d.pretrain_explicit > 0 {
        parts.push(gen_explicit(d.pretrain_explicit, seeds::derive(cfg.seed, "pretrain-explicit"))?);
    }
    if d.pretrain_reasoning > 0 {
        parts.push(gen_reasoning(
            d.pretrain_reasoning,
            seeds::derive(cfg.seed, "pretrain-reasoning"),
            &d.mix,
        )?);
    }
    PairedDataset::merged(parts)
}

/// Adaptation pairs, split into adapt-train and eval by exact counts.
pub fn adapt_dataset(cfg: &RunConfig) -> Result<PairedDataset> {
    let d = &cfg.data;
    let n = d.adapt_train + d.eval;
    let gen_seed = seeds::derive(cfg.seed, "adapt-data");
    let ds = match d.tier {
        Tier::Explicit => gen_explicit(n, gen_seed)?,
        Tier::Reasoning => gen_reasoning(n, gen_seed, &d.mix)?,
    };
    split_counts(&ds, d.adapt_train, d.eval, seeds::derive(cfg.seed, "adapt-split"))
}

#[derive(Serialize)]
struct PretrainLine {
    step: usize,
    loss: f64,
    lr: f64,
    grad_norm: f64,
}

/// Trains the backbone on the pretraining corpus, freezes it and writes
/// the checkpoint and a per-step log.
pub fn run_pretrain(cfg: &RunConfig, sink: &Sink) -> Result<Backbone<f32>> {
    write_config(cfg, sink)?;
    let corpus = pretrain_corpus(cfg)?;
    ensure!(!corpus.is_empty(), Input, "empty pretraining corpus");
    let pairs: Vec<&Pair> = corpus.pairs.iter().collect();
    let examples = examples_from(&pairs, cfg.pretrain.repeat_fraction, seeds::derive(cfg.seed, "pretrain-mix"));
    let mut backbone = Backbone::<f32>::new(cfg.backbone, seeds::derive(cfg.seed, "backbone"))?;
    sink.say(format!(
        "pretrain: {} sequences, {} parameters, {} steps",
        examples.len(),
        backbone.param_count(),
        cfg.pretrain.steps
    ));
    let mut log = String::new();
    let mut err = None;
    pretrain(&mut backbone, &examples, &cfg.pretrain, seeds::derive(cfg.seed, "pretrain"), |step, loss, lr, grad_norm| {
        match serde_json::to_string(&PretrainLine { step, loss, lr, grad_norm }) {
            Ok(l) => {
                log.push_str(&l);
                log.push('\n');
            }
            Err(e) => err = Some(e),
        }
        if step % 100 == 0 {
            sink.say(format!("pretrain step {step} loss {loss:.4}"));
        }
    })?;
    if let Some(e) = err {
        return Err(e.into());
    }
    backbone.freeze();
    sink.write("pretrain_log.jsonl", &log)?;
    backbone.save(&sink.path(BACKBONE_FILE))?;
    Ok(backbone)
}

/// Loads a backbone checkpoint and makes sure it is frozen.
pub fn load_backbone(path: &Path) -> Result<Backbone<f32>> {
    let mut b = Backbone::<f32>::load(path)?;
    b.freeze();
    Ok(b)
}

pub fn fresh_adapter(cfg: &RunConfig, backbone: &BackboneConfig) -> Result<Adapter<f32>> {
    let r = &cfg.readout;
    Adapter::new(r.variant, r.pooling, r.n_queries, r.init, backbone, seeds::derive(cfg.seed, "adapter-init"))
}

#[derive(Serialize)]
struct AdaptHeader<'a> {
    variant: &'a str,
    pooling: &'a str,
    n_queries: usize,
    trainable: usize,
    train_pairs: usize,
    steps: usize,
}

#[derive(Serialize)]
struct AdaptLine {
    step: usize,
    loss: f64,
    tau: f64,
    lr: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    step: usize,
    mean_loss: f64,
    tau: f64,
    lr: f64,
}

pub const TRAIN_IDS_KEY: &str = "train_ids";

/// Trains the configured readout on the adapt-train split of a frozen
/// backbone. Writes the adapter (with the ids it saw), a step log whose
/// first line records the trainable count, and per-epoch metrics.
pub fn run_adapt(cfg: &RunConfig, backbone: &Backbone<f32>, sink: &Sink) -> Result<Adapter<f32>> {
    write_config(cfg, sink)?;
    let ds = adapt_dataset(cfg)?;
    let train = ds.split_pairs(Split::AdaptTrain);
    let adapter = fresh_adapter(cfg, backbone.config())?;
    let header = AdaptHeader {
        variant: adapter.variant.name(),
        pooling: adapter.pooling.name(),
        n_queries: adapter.n_queries,
        trainable: adapter.census(),
        train_pairs: train.len(),
        steps: cfg.trainer.total_steps,
    };
    sink.say(format!("adapt: {} trainable scalars, {} pairs", header.trainable, train.len()));
    let mut log = serde_json::to_string(&header)? + "\n";
    let mut epochs: Vec<EpochRow> = Vec::new();
    let mut window: Vec<f64> = Vec::new();
    let adapter = if cfg.trainer.total_steps == 0 {
        adapter
    } else {
        let mut trainer = Trainer::new(backbone, adapter, cfg.trainer)?;
        trainer.fit(&train, |r, closed| {
            let line = AdaptLine {
                step: r.step,
                loss: r.loss,
                tau: r.tau,
                lr: r.lr,
                grad_norm: r.grad_norm,
            };
            log.push_str(&serde_json::to_string(&line).expect("plain numbers serialize"));
            log.push('\n');
            window.push(r.loss);
            if let Some(epoch) = closed {
                epochs.push(EpochRow {
                    epoch,
                    step: r.step,
                    mean_loss: window.iter().sum::<f64>() / window.len() as f64,
                    tau: r.tau,
                    lr: r.lr,
                });
                window.clear();
            }
            if r.step % 100 == 0 {
                sink.say(format!("adapt step {} loss {:.4} tau {:.4}", r.step, r.loss, r.tau));
            }
        })?;
        backbone.verify_frozen()?;
        trainer.into_adapter()
    };
    sink.write("adapt_log.jsonl", &log)?;
    sink.write("adapt_metrics.csv", &rows_csv(&epochs)?)?;
    let ids: Vec<&str> = train.iter().map(|p| p.id.as_str()).collect();
    let mut c = adapter.to_container()?;
    c.metadata.insert(TRAIN_IDS_KEY.into(), serde_json::to_string(&ids)?);
    c.save(&sink.path(ADAPTER_FILE))?;
    Ok(adapter)
}

/// Adapter plus the training ids recorded in its checkpoint.
pub fn load_adapter(path: &Path, backbone: &BackboneConfig) -> Result<(Adapter<f32>, Vec<String>)> {
    let c = Container::load(path)?;
    let adapter = Adapter::from_container(&c, backbone)?;
    let ids = match c.metadata.get(TRAIN_IDS_KEY) {
        Some(s) => serde_json::from_str(s)?,
        None => Vec::new(),
    };
    Ok((adapter, ids))
}

pub fn embed_pairs(backbone: &Backbone<f32>, adapter: &Adapter<f32>, pairs: &[&Pair]) -> Result<EmbeddingSet> {
    let mut records = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        records.push(encode(&p.id, Content::Image(&p.image), backbone, adapter)?);
    }
    for p in pairs {
        records.push(encode(&p.id, Content::Text(&p.caption.tokens), backbone, adapter)?);
    }
    EmbeddingSet::new(records)
}

/// Refuses to evaluate on ids the adapter was trained on.
pub fn check_contamination(train_ids: &[String], eval: &[&Pair]) -> Result<()> {
    let seen: BTreeSet<&str> = train_ids.iter().map(|s| s.as_str()).collect();
    let leaked: Vec<&str> = eval.iter().map(|p| p.id.as_str()).filter(|id| seen.contains(id)).collect();
    ensure!(
        leaked.is_empty(),
        Contamination,
        "{} eval ids were seen in training, e.g. '{}'",
        leaked.len(),
        leaked.first().copied().unwrap_or_default()
    );
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub retrieval: Vec<RetrievalReport>,
    /// Geometry of an untrained adapter of the same kind, then the trained one.
    pub geometry: Option<(GeometryReport, GeometryReport)>,
}

impl EvalOutcome {
    pub fn recall(&self, direction: Direction, k: usize) -> Option<f64> {
        self.retrieval.iter().find(|r| r.direction == direction)?.recall(k)
    }
}

/// Retrieval in both directions on the eval split, plus geometry before
/// and after adaptation.
pub fn run_eval(
    cfg: &RunConfig,
    backbone: &Backbone<f32>,
    adapter: &Adapter<f32>,
    train_ids: &[String],
    sink: &Sink,
) -> Result<EvalOutcome> {
    write_config(cfg, sink)?;
    let ds = adapt_dataset(cfg)?;
    let eval = ds.split_pairs(Split::Eval);
    check_contamination(train_ids, &eval)?;
    let set = embed_pairs(backbone, adapter, &eval)?;
    let records: Vec<EmbeddingRecord> = set.images.iter().chain(&set.texts).cloned().collect();
    sink.write("embeddings.jsonl", &write_dump(&records)?)?;
    let retrieval = vec![
        retrieval_report(&set, Direction::ImageToText, &cfg.eval.ks)?,
        retrieval_report(&set, Direction::TextToImage, &cfg.eval.ks)?,
    ];
    sink.write("retrieval.csv", &retrieval_csv("eval", &retrieval)?)?;
    for r in &retrieval {
        sink.say(format!("{} {:?} {:?}", r.direction.name(), r.ks, r.recalls));
    }
    let geometry = if cfg.eval.geometry {
        let init = embed_pairs(backbone, &fresh_adapter(cfg, backbone.config())?, &eval)?;
        let g0 = geometry_report(&init, "eval")?;
        let g1 = geometry_report(&set, "eval")?;
        sink.write("geometry.csv", &geometry_csv(&[("init", &g0), ("adapted", &g1)])?)?;
        sink.write("pca.svg", &pca_svg(&g1, &format!("{} embeddings, eval split", adapter.variant))?)?;
        Some((g0, g1))
    } else {
        None
    };
    Ok(EvalOutcome { retrieval, geometry })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    pub seed: u64,
    pub data_seed: u64,
    pub trainable: usize,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    /// Mean over both directions and every configured k.
    pub mean_recall: f64,
}

pub fn default_settings(axis: AblationAxis) -> Vec<String> {
    match axis {
        AblationAxis::Queries => QUERY_SWEEP.iter().map(|n| n.to_string()).collect(),
        AblationAxis::Pooling => ["mean", "max", "last"].map(String::from).to_vec(),
        AblationAxis::Variant => ReadoutVariant::ALL.iter().map(|v| v.name().to_string()).collect(),
    }
}

/// The config for one ablation cell: the run seed swapped for `seed` and
/// one readout field changed.
pub fn ablation_config(cfg: &RunConfig, axis: AblationAxis, setting: &str, seed: u64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.resolve();
    match axis {
        AblationAxis::Queries => {
            c.readout.n_queries = setting
                .parse()
                .map_err(|_| Error::Config(format!("ablate: '{setting}' is not a query count")))?
        }
        AblationAxis::Pooling => c.readout.pooling = PoolingStrategy::from_str(setting)?,
        AblationAxis::Variant => c.readout.variant = ReadoutVariant::from_str(setting)?,
    }
    c.validate()?;
    Ok(c)
}

/// Adapts and evaluates once per (setting, seed). Within a seed every
/// setting sees the same data and batch order.
pub fn run_ablate(cfg: &RunConfig, backbone: &Backbone<f32>, sink: &Sink) -> Result<Vec<AblationRow>> {
    write_config(cfg, sink)?;
    let axis = cfg.ablate.axis;
    let settings = if cfg.ablate.settings.is_empty() {
        default_settings(axis)
    } else {
        cfg.ablate.settings.clone()
    };
    let mut rows = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for setting in &settings {
            let c = ablation_config(cfg, axis, setting, seed)?;
            let ds = adapt_dataset(&c)?;
            let train = ds.split_pairs(Split::AdaptTrain);
            let eval = ds.split_pairs(Split::Eval);
            let adapter = fresh_adapter(&c, backbone.config())?;
            let trainable = adapter.census();
            let adapter = if c.trainer.total_steps == 0 {
                adapter
            } else {
                let mut t = Trainer::new(backbone, adapter, c.trainer)?;
                t.fit(&train, |_, _| {})?;
                t.into_adapter()
            };
            let set = embed_pairs(backbone, &adapter, &eval)?;
            let i2t = retrieval_report(&set, Direction::ImageToText, &c.eval.ks)?;
            let t2i = retrieval_report(&set, Direction::TextToImage, &c.eval.ks)?;
            let row = AblationRow {
                axis,
                setting: setting.clone(),
                seed,
                data_seed: seeds::derive(seed, "adapt-data"),
                trainable,
                r1_i2t: i2t.recall(1).unwrap_or(f64::NAN),
                r1_t2i: t2i.recall(1).unwrap_or(f64::NAN),
                mean_recall: 0.5 * (i2t.mean_recall() + t2i.mean_recall()),
            };
            sink.say(format!(
                "ablate {:?} {} seed {}: R@1 {:.3}/{:.3} mean {:.3}",
                axis, setting, seed, row.r1_i2t, row.r1_t2i, row.mean_recall
            ));
            rows.push(row);
        }
    }
    sink.write("ablation.csv", &rows_csv(&rows)?)?;
    Ok(rows)
}

/// The three difficulty tiers of the zero-shot diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnoseTier {
    Explicit,
    Knowledge,
    Logical,
}

impl DiagnoseTier {
    pub const ALL: [DiagnoseTier; 3] = [DiagnoseTier::Explicit, DiagnoseTier::Knowledge, DiagnoseTier::Logical];

    pub fn dataset(self, n: usize, seed: u64) -> Result<PairedDataset> {
        let seed = seeds::derive(seed, &format!("diagnose-{self:?}"));
        match self {
            DiagnoseTier::Explicit => gen_explicit(n, seed),
            DiagnoseTier::Knowledge => {
                let mut mix = DimensionMix::benchmark().0;
                mix[Dimension::LogicalMathematical.index()] = 0.0;
                let total: f64 = mix.iter().sum();
                mix.iter_mut().for_each(|p| *p /= total);
                gen_reasoning(n, seed, &DimensionMix(mix))
            }
            DiagnoseTier::Logical => gen_reasoning(n, seed, &DimensionMix::only(Dimension::LogicalMathematical)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnoseRow {
    pub tier: DiagnoseTier,
    pub readout: ReadoutVariant,
    pub n: usize,
    pub r1_t2i: f64,
    pub r1_i2t: f64,
    pub mean_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginRow {
    pub tier: DiagnoseTier,
    pub readout: ReadoutVariant,
    pub id: String,
    pub margin: f64,
    pub hit: bool,
}

/// Zero-shot comparison of a single zero-initialised query against the
/// last-token state, with no trained parameters. Captions query images;
/// the margin is the top-1 minus top-2 similarity.
pub fn run_diagnose(cfg: &RunConfig, backbone: &Backbone<f32>, sink: &Sink) -> Result<Vec<DiagnoseRow>> {
    write_config(cfg, sink)?;
    ensure!(backbone.is_frozen(), State, "diagnose needs a frozen backbone");
    let bc = backbone.config();
    let readouts = [
        Adapter::<f32>::new(ReadoutVariant::SharedQueries, PoolingStrategy::Mean, 1, QueryInit::Zeros, bc, 0)?,
        Adapter::<f32>::new(ReadoutVariant::LastToken, PoolingStrategy::Mean, 1, QueryInit::Zeros, bc, 0)?,
    ];
    let mut rows = Vec::new();
    let mut margins = Vec::new();
    for tier in DiagnoseTier::ALL {
        let ds = tier.dataset(cfg.data.diagnose_per_tier, cfg.seed)?;
        let pairs: Vec<&Pair> = ds.pairs.iter().collect();
        for a in &readouts {
            let set = embed_pairs(backbone, a, &pairs)?;
            let (zi, zt) = set.aligned();
            let m = top_margins(&zt, &zi)?;
            let sim = crate::eval::similarities(&zt, &zi);
            for (i, p) in pairs.iter().enumerate() {
                margins.push(MarginRow {
                    tier,
                    readout: a.variant,
                    id: p.id.clone(),
                    margin: m[i],
                    hit: crate::eval::rank_of(&sim[i], i) == 0,
                });
            }
            let row = DiagnoseRow {
                tier,
                readout: a.variant,
                n: pairs.len(),
                r1_t2i: retrieval_report(&set, Direction::TextToImage, &[1])?.recalls[0],
                r1_i2t: retrieval_report(&set, Direction::ImageToText, &[1])?.recalls[0],
                mean_margin: m.iter().sum::<f64>() / m.len() as f64,
            };
            sink.say(format!(
                "diagnose {:?} {}: R@1 {:.3} margin {:.5}",
                tier, a.variant, row.r1_t2i, row.mean_margin
            ));
            rows.push(row);
        }
    }
    sink.write("diagnose.csv", &rows_csv(&rows)?)?;
    sink.write("margins.csv", &rows_csv(&margins)?)?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
