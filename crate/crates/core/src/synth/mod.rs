//! Deterministic paired image/caption data at two difficulty tiers.
//!
//! Images are feature grids rather than pixels. Explicit captions enumerate
//! the objects in an image; reasoning captions describe a single object with
//! one attribute replaced by a clue that has to be resolved through the
//! knowledge table or a small sum.

mod file;
mod knowledge;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use file::{load_dataset, parse_dataset, save_dataset, to_json, DATASET_FORMAT, DATASET_VERSION};
pub use knowledge::{Dimension, KnowledgeTable, KNOWLEDGE_VERSION};
pub use vocab::{Color, Shape, TokenId};

use crate::error::{ensure, Error, Result};
use crate::seeds;
use vocab::{digit, tok};

/// Per-cell feature width: one-hot shape, one-hot color, one-hot count, occupancy.
pub const PATCH_DIM: usize = 6 + 8 + 9 + 1;

pub const DEFAULT_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// 1..=9
    pub count: u8,
}

impl Object {
    pub fn tokens(&self) -> [TokenId; 3] {
        [digit(self.count), self.color.token(), self.shape.token()]
    }

    /// Every (shape, color, count) combination in a fixed order.
    pub fn all() -> Vec<Object> {
        let mut out = Vec::with_capacity(6 * 8 * 9);
        for shape in Shape::ALL {
            for color in Color::ALL {
                for count in 1..=9 {
                    out.push(Object { shape, color, count });
                }
            }
        }
        out
    }
}

/// A `grid × grid` arrangement of cells, each empty or holding one object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthImage {
    grid: usize,
    cells: Vec<Option<Object>>,
}

impl SynthImage {
    pub fn new(grid: usize, cells: Vec<Option<Object>>) -> Result<Self> {
        ensure!(grid >= 1, Input, "grid side must be positive");
        ensure!(
            cells.len() == grid * grid,
            Input,
            "{} cells for a {}x{} grid",
            cells.len(),
            grid,
            grid
        );
        ensure!(cells.iter().any(|c| c.is_some()), Input, "image has no objects");
        for o in cells.iter().flatten() {
            ensure!((1..=9).contains(&o.count), Input, "object count {} outside 1..=9", o.count);
        }
        Ok(SynthImage { grid, cells })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> &[Option<Object>] {
        &self.cells
    }

    /// Objects in row-major cell order.
    pub fn objects(&self) -> Vec<Object> {
        self.cells.iter().flatten().copied().collect()
    }

    /// Renders each cell into a `PATCH_DIM` feature row (row-major cells).
    pub fn features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cells.len() * PATCH_DIM];
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some(o) = cell {
                let row = &mut out[i * PATCH_DIM..(i + 1) * PATCH_DIM];
                row[o.shape.index()] = 1.0;
                row[6 + o.color.index()] = 1.0;
                row[14 + (o.count as usize - 1)] = 1.0;
                row[23] = 1.0;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Explicit,
    Reasoning,
}

/// The attribute a reasoning caption encodes implicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Attribute {
    Shape(Shape),
    Color(Color),
    Count(u8),
}

impl Attribute {
    pub fn token(self) -> TokenId {
        match self {
            Attribute::Shape(s) => s.token(),
            Attribute::Color(c) => c.token(),
            Attribute::Count(n) => digit(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSpec {
    pub tier: Tier,
    pub tokens: Vec<TokenId>,
    /// Objects the caption describes, in caption order.
    pub objects: Vec<Object>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<Dimension>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Attribute>,
}

impl CaptionSpec {
    pub fn text(&self) -> String {
        vocab::render(&self.tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Unassigned,
    Pretrain,
    AdaptTrain,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: String,
    pub split: Split,
    pub image: SynthImage,
    pub caption: CaptionSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub seed: u64,
    pub template_version: String,
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_pairs(&self, split: Split) -> Vec<&Pair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    /// Concatenates datasets, keeping the first seed and version.
    pub fn merged(parts: Vec<PairedDataset>) -> Result<PairedDataset> {
        let mut iter = parts.into_iter();
        let mut first = iter
            .next()
            .ok_or_else(|| Error::Input("merging no datasets".into()))?;
        for p in iter {
            first.pairs.extend(p.pairs);
        }
        Ok(first)
    }
}

/// Category proportions for reasoning captions, in [`Dimension::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionMix(pub [f64; 6]);

impl DimensionMix {
    /// Category shares reported for the reasoning benchmark (tool, contextual,
    /// functional, cultural, encyclopedic, logical).
    pub fn benchmark() -> Self {
        DimensionMix([0.188, 0.181, 0.174, 0.194, 0.149, 0.114])
    }

    pub fn only(dim: Dimension) -> Self {
        let mut p = [0.0; 6];
        p[dim.index()] = 1.0;
        DimensionMix(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.0.iter().all(|p| p.is_finite() && *p >= 0.0),
            Input,
            "dimension proportions must be non-negative"
        );
        let total: f64 = self.0.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-6, Input, "dimension proportions sum to {}", total);
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items.
    pub fn counts(&self, n: usize) -> [usize; 6] {
        apportion(n, &self.0).try_into().expect("six shares")
    }
}

/// Splits `n` into integer parts proportional to `shares`; each part is within
/// one of `n * share`.
pub fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| n as f64 * s / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if shares[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

fn pair_id(tier: Tier, seed: u64, i: usize) -> String {
    let t = match tier {
        Tier::Explicit => "ex",
        Tier::Reasoning => "rs",
    };
    format!("{t}-{seed:016x}-{i:05}")
}

fn place(rng: &mut impl Rng, grid: usize, objects: &[Object]) -> Result<SynthImage> {
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);
    let mut chosen: Vec<usize> = cells[..objects.len()].to_vec();
    chosen.sort_unstable();
    let mut grid_cells = vec![None; grid * grid];
    for (&cell, o) in chosen.iter().zip(objects) {
        grid_cells[cell] = Some(*o);
    }
    SynthImage::new(grid, grid_cells)
}

/// Explicit-tier pairs: 1 to 3 objects per image, caption lists each object's
/// count, color and shape in row-major cell order.
pub fn gen_explicit(n: usize, seed: u64) -> Result<PairedDataset> {
    gen_explicit_on_grid(n, seed, DEFAULT_GRID)
}

pub fn gen_explicit_on_grid(n: usize, seed: u64, grid: usize) -> Result<PairedDataset> {
    ensure!(n >= 1, Input, "need at least one pair");
    ensure!(grid * grid >= 3, Input, "grid {} too small", grid);
    let mut rng = seeds::stream(seed, "synth/explicit");
    let all = Object::all();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(1..=3);
        let objects: Vec<Object> = (0..k).map(|_| all[rng.random_range(0..all.len())]).collect();
        let image = place(&mut rng, grid, &objects)?;
        let ordered = image.objects();
        let mut tokens = Vec::with_capacity(4 * ordered.len());
        for (j, o) in ordered.iter().enumerate() {
            if j > 0 {
                tokens.push(tok("and"));
            }
            tokens.extend(o.tokens());
        }
        pairs.push(Pair {
            id: pair_id(Tier::Explicit, seed, i),
            split: Split::Unassigned,
            image,
            caption: CaptionSpec {
                tier: Tier::Explicit,
                tokens,
                objects: ordered,
                dimension: None,
                target: None,
            },
        });
    }
    Ok(PairedDataset {
        seed,
        template_version: KNOWLEDGE_VERSION.to_string(),
        pairs,
    })
}

/// Builds the reasoning caption for `o` under `dim`, or `None` when the
/// object cannot be described that way (e.g. a sum clue for a single circle).
pub fn reasoning_caption(
    o: &Object,
    dim: Dimension,
    table: &KnowledgeTable,
    rng: &mut impl Rng,
) -> Option<(Vec<TokenId>, Attribute)> {
    let t = tok;
    let c = digit(o.count);
    match dim {
        Dimension::ToolUtility => {
            let clue = table.tool_for(o.shape)?;
            Some((
                vec![c, o.color.token(), t("shaped"), t("like"), t("a"), clue],
                Attribute::Shape(o.shape),
            ))
        }
        Dimension::Encyclopedic => {
            let clue = table.landmark_for(o.shape)?;
            Some((
                vec![c, o.color.token(), t("shape"), t("of"), t("the"), clue],
                Attribute::Shape(o.shape),
            ))
        }
        Dimension::ContextualSpatial => {
            let clue = table.scene_for(o.color)?;
            Some((
                vec![c, o.shape.token(), t("colored"), t("like"), t("the"), clue],
                Attribute::Color(o.color),
            ))
        }
        Dimension::CulturalSymbolic => {
            let clue = table.concept_for(o.color)?;
            Some((
                vec![c, o.shape.token(), t("in"), t("the"), t("color"), t("of"), clue],
                Attribute::Color(o.color),
            ))
        }
        Dimension::Functional => {
            let clue = table.counted_for(o.count)?;
            Some((
                vec![t("as"), t("many"), t("as"), clue, o.color.token(), o.shape.token()],
                Attribute::Count(o.count),
            ))
        }
        Dimension::LogicalMathematical => {
            let sides = o.shape.sides();
            if sides >= 3 {
                let a = rng.random_range(1..sides);
                let b = sides - a;
                Some((
                    vec![c, o.color.token(), t("shape"), t("with"), digit(a), t("plus"), digit(b), t("sides")],
                    Attribute::Shape(o.shape),
                ))
            } else if o.count >= 2 {
                let a = rng.random_range(1..o.count);
                let b = o.count - a;
                Some((
                    vec![digit(a), t("plus"), digit(b), o.color.token(), o.shape.token()],
                    Attribute::Count(o.count),
                ))
            } else {
                None
            }
        }
    }
}

/// Reasoning-tier pairs with the built-in knowledge table.
pub fn gen_reasoning(n: usize, seed: u64, mix: &DimensionMix) -> Result<PairedDataset> {
    gen_reasoning_with_table(n, seed, mix, &KnowledgeTable::default(), DEFAULT_GRID)
}

/// Reasoning-tier pairs: one object per image, its caption encoding one
/// attribute through a clue. Objects are drawn without replacement from the
/// full attribute space until it is exhausted.
pub fn gen_reasoning_with_table(
    n: usize,
    seed: u64,
    mix: &DimensionMix,
    table: &KnowledgeTable,
    grid: usize,
) -> Result<PairedDataset> {
    ensure!(n >= 1, Input, "need at least one pair");
    mix.validate()?;
    for dim in Dimension::ALL {
        if mix.0[dim.index()] > 0.0 && !table.covers(dim) {
            return Err(Error::Generation(format!(
                "knowledge table has no entries for {}",
                dim.name()
            )));
        }
    }
    let mut rng = seeds::stream(seed, "synth/reasoning");
    let counts = mix.counts(n);
    let mut slots: Vec<Dimension> = Dimension::ALL
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d, counts[d.index()]))
        .collect();
    slots.shuffle(&mut rng);

    let mut pool: Vec<Object> = Vec::new();
    let mut pairs = Vec::with_capacity(n);
    for (i, &dim) in slots.iter().enumerate() {
        if pool.is_empty() {
            pool = Object::all();
            pool.shuffle(&mut rng);
        }
        let mut found = None;
        for (j, o) in pool.iter().enumerate() {
            if let Some(cap) = reasoning_caption(o, dim, table, &mut rng) {
                found = Some((j, cap));
                break;
            }
        }
        let (j, (tokens, target)) = match found {
            Some(f) => f,
            None => {
                // pool holds only objects this dimension cannot describe
                let mut fresh = Object::all();
                fresh.shuffle(&mut rng);
                let hit = fresh
                    .iter()
                    .enumerate()
                    .find_map(|(j, o)| reasoning_caption(o, dim, table, &mut rng).map(|c| (j, c)))
                    .ok_or_else(|| {
                        Error::Generation(format!("no object can be described by {}", dim.name()))
                    })?;
                pool.extend(fresh);
                let offset = pool.len() - (6 * 8 * 9);
                (offset + hit.0, hit.1)
            }
        };
        let o = pool.remove(j);
        let image = place(&mut rng, grid, &[o])?;
        pairs.push(Pair {
            id: pair_id(Tier::Reasoning, seed, i),
            split: Split::Unassigned,
            image,
            caption: CaptionSpec {
                tier: Tier::Reasoning,
                tokens,
                objects: vec![o],
                dimension: Some(dim),
                target: Some(target),
            },
        });
    }
    Ok(PairedDataset {
        seed,
        template_version: table.version.clone(),
        pairs,
    })
}

/// Assigns split markers. Two fractions mean (adapt-train, eval); three mean
/// (pretrain, adapt-train, eval). Membership is a seeded permutation, and
/// counts follow largest-remainder rounding.
pub fn split(dataset: &PairedDataset, fractions: &[f64], seed: u64) -> Result<PairedDataset> {
    let labels: &[Split] = match fractions.len() {
        2 => &[Split::AdaptTrain, Split::Eval],
        3 => &[Split::Pretrain, Split::AdaptTrain, Split::Eval],
        k => return Err(Error::Input(format!("expected 2 or 3 split fractions, got {k}"))),
    };
    ensure!(
        fractions.iter().all(|f| f.is_finite() && *f > 0.0),
        Input,
        "split fractions must be positive: {:?}",
        fractions
    );
    let total: f64 = fractions.iter().sum();
    ensure!((total - 1.0).abs() <= 1e-6, Input, "split fractions sum to {}", total);
    let counts = apportion(dataset.len(), fractions);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeds::stream(seed, "synth/split"));
    let mut out = dataset.clone();
    let mut k = 0;
    for (label, &count) in labels.iter().zip(&counts) {
        for &i in &order[k..k + count] {
            out.pairs[i].split = *label;
        }
        k += count;
    }
    Ok(out)
}

/// Splits by exact counts `(train, eval)`, the first `train` of a seeded
/// permutation going to adapt-train.
pub fn split_counts(dataset: &PairedDataset, train: usize, eval: usize, seed: u64) -> Result<PairedDataset> {
    ensure!(
        train + eval == dataset.len() && train > 0 && eval > 0,
        Input,
        "split {}+{} of {} pairs",
        train,
        eval,
        dataset.len()
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeds::stream(seed, "synth/split"));
    let mut out = dataset.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.pairs[i].split = if rank < train { Split::AdaptTrain } else { Split::Eval };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_is_deterministic_and_sized() {
        let a = gen_explicit(20, 11).unwrap();
        let b = gen_explicit(20, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(gen_explicit(1, 3).unwrap().len(), 1);
        assert!(gen_explicit(0, 3).is_err());
    }

    #[test]
    fn features_match_cell_contents() {
        let o = Object {
            shape: Shape::Square,
            color: Color::Blue,
            count: 4,
        };
        let mut cells = vec![None; 16];
        cells[5] = Some(o);
        let img = SynthImage::new(4, cells).unwrap();
        let f = img.features();
        assert_eq!(f.len(), 16 * PATCH_DIM);
        let row = &f[5 * PATCH_DIM..6 * PATCH_DIM];
        assert_eq!(row.iter().sum::<f64>(), 4.0);
        assert_eq!(row[Shape::Square.index()], 1.0);
        assert_eq!(row[6 + Color::Blue.index()], 1.0);
        assert_eq!(row[14 + 3], 1.0);
        assert!(f[..5 * PATCH_DIM].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_image_is_rejected() {
        assert!(SynthImage::new(2, vec![None; 4]).is_err());
    }

    #[test]
    fn sum_template_for_triangle() {
        let o = Object {
            shape: Shape::Triangle,
            color: Color::Red,
            count: 3,
        };
        let mut rng = seeds::stream(0, "t");
        let (tokens, target) =
            reasoning_caption(&o, Dimension::LogicalMathematical, &KnowledgeTable::default(), &mut rng).unwrap();
        assert_eq!(target, Attribute::Shape(Shape::Triangle));
        assert!(!tokens.contains(&Shape::Triangle.token()));
        assert!(tokens.contains(&tok("sides")));
        let text = vocab::render(&tokens);
        assert!(text.contains("one plus two") || text.contains("two plus one"), "{text}");
    }

    #[test]
    fn missing_relation_is_a_generation_error() {
        let mut table = KnowledgeTable::default();
        table.scenes.clear();
        let err = gen_reasoning_with_table(10, 1, &DimensionMix::benchmark(), &table, 4).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        // a mix that never asks for that relation still works
        let mix = DimensionMix::only(Dimension::Functional);
        assert!(gen_reasoning_with_table(10, 1, &mix, &table, 4).is_ok());
    }

    #[test]
    fn mix_must_sum_to_one() {
        assert!(gen_reasoning(5, 1, &DimensionMix([0.5, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn split_examples() {
        let d = gen_explicit(100, 5).unwrap();
        let s = split(&d, &[0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(s.split_pairs(Split::Pretrain).len(), 80);
        assert_eq!(s.split_pairs(Split::AdaptTrain).len(), 10);
        assert_eq!(s.split_pairs(Split::Eval).len(), 10);
        assert_eq!(s, split(&d, &[0.8, 0.1, 0.1], 9).unwrap());
        assert!(s.pairs.iter().all(|p| p.split != Split::Unassigned));
        assert!(split(&d, &[1.0, 0.0], 9).is_err());
        assert!(split(&d, &[0.5, 0.4], 9).is_err());
    }

    #[test]
    fn apportion_stays_within_one() {
        let shares = DimensionMix::benchmark().0;
        for n in [1, 7, 50, 333, 1000] {
            let c = apportion(n, &shares);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (k, s) in c.iter().zip(shares) {
                assert!((*k as f64 - n as f64 * s).abs() <= 1.0);
            }
        }
    }
}
