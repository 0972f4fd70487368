//! Independent checks of the synthetic data generator.

use std::collections::{BTreeSet, HashSet};

use slq::synth::vocab::{render, Color, Shape};
use slq::synth::{gen_explicit, gen_reasoning, Attribute, Dimension, DimensionMix, KnowledgeTable, Object, Pair, Tier};

const SHAPES: [(&str, u8); 6] = [
    ("circle", 0),
    ("triangle", 3),
    ("square", 4),
    ("pentagon", 5),
    ("hexagon", 6),
    ("octagon", 8),
];
const COLORS: [&str; 8] = ["red", "orange", "yellow", "green", "blue", "purple", "pink", "white"];
const DIGITS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn digit(w: &str) -> Option<u8> {
    DIGITS.iter().position(|d| *d == w).map(|i| i as u8)
}

/// An object described by words only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Cand {
    shape: usize,
    color: usize,
    count: u8,
}

fn all_candidates() -> Vec<Cand> {
    let mut v = Vec::new();
    for shape in 0..6 {
        for color in 0..8 {
            for count in 1..=9 {
                v.push(Cand { shape, color, count });
            }
        }
    }
    v
}

fn shape_word(i: usize) -> &'static str {
    SHAPES[i].0
}

/// Word-level facts, rebuilt from the table's string form.
struct Facts {
    tools: Vec<(String, String)>,
    landmarks: Vec<(String, String)>,
    scenes: Vec<(String, String)>,
    concepts: Vec<(String, String)>,
    counted: Vec<(String, u8)>,
}

fn facts() -> Facts {
    let t = KnowledgeTable::default();
    let w = |id| render(&[id]);
    Facts {
        tools: t.tools.iter().map(|(k, s)| (w(*k), w(s.token()))).collect(),
        landmarks: t.landmarks.iter().map(|(k, s)| (w(*k), w(s.token()))).collect(),
        scenes: t.scenes.iter().map(|(k, c)| (w(*k), w(c.token()))).collect(),
        concepts: t.concepts.iter().map(|(k, c)| (w(*k), w(c.token()))).collect(),
        counted: t.counted.iter().map(|(k, n)| (w(*k), *n)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Resolved {
    Shape(usize),
    Color(usize),
    Count(u8),
}

/// Does the caption describe `c`, and if so which attribute did it encode
/// indirectly? Evaluated from the words alone.
fn evaluate(words: &[&str], c: Cand, f: &Facts) -> Option<Resolved> {
    let (sw, cw) = (shape_word(c.shape), COLORS[c.color]);
    let lookup = |rel: &[(String, String)], clue: &str, want: &str| rel.iter().any(|(k, v)| k == clue && v == want);
    match words {
        [n, col, "shaped", "like", "a", clue] => {
            (digit(n) == Some(c.count) && *col == cw && lookup(&f.tools, clue, sw)).then_some(Resolved::Shape(c.shape))
        }
        [n, col, "shape", "of", "the", clue] => (digit(n) == Some(c.count) && *col == cw && lookup(&f.landmarks, clue, sw))
            .then_some(Resolved::Shape(c.shape)),
        [n, shp, "colored", "like", "the", clue] => (digit(n) == Some(c.count) && *shp == sw && lookup(&f.scenes, clue, cw))
            .then_some(Resolved::Color(c.color)),
        [n, shp, "in", "the", "color", "of", clue] => {
            (digit(n) == Some(c.count) && *shp == sw && lookup(&f.concepts, clue, cw)).then_some(Resolved::Color(c.color))
        }
        ["as", "many", "as", clue, col, shp] => (*col == cw
            && *shp == sw
            && f.counted.iter().any(|(k, v)| k == clue && *v == c.count))
        .then_some(Resolved::Count(c.count)),
        [n, col, "shape", "with", a, "plus", b, "sides"] => {
            let sum = digit(a)? + digit(b)?;
            (digit(n) == Some(c.count) && *col == cw && SHAPES[c.shape].1 == sum).then_some(Resolved::Shape(c.shape))
        }
        [a, "plus", b, col, shp] => {
            let sum = digit(a)? + digit(b)?;
            (*col == cw && *shp == sw && c.count == sum).then_some(Resolved::Count(c.count))
        }
        _ => None,
    }
}

fn to_cand(o: &Object) -> Cand {
    Cand {
        shape: Shape::ALL.iter().position(|s| *s == o.shape).unwrap(),
        color: Color::ALL.iter().position(|x| *x == o.color).unwrap(),
        count: o.count,
    }
}

fn intended(a: Attribute) -> Resolved {
    match a {
        Attribute::Shape(s) => Resolved::Shape(Shape::ALL.iter().position(|x| *x == s).unwrap()),
        Attribute::Color(c) => Resolved::Color(Color::ALL.iter().position(|x| *x == c).unwrap()),
        Attribute::Count(n) => Resolved::Count(n),
    }
}

fn reasoning(n: usize, seed: u64) -> Vec<Pair> {
    gen_reasoning(n, seed, &DimensionMix::benchmark()).unwrap().pairs
}

#[test]
fn brute_force_resolver_agrees_with_every_reasoning_caption() {
    let f = facts();
    let cands = all_candidates();
    for seed in [1, 2, 3] {
        for p in reasoning(600, seed) {
            let text = p.caption.text();
            let words: Vec<&str> = text.split(' ').collect();
            let hits: BTreeSet<Resolved> = cands.iter().filter_map(|&c| evaluate(&words, c, &f)).collect();
            assert_eq!(hits.len(), 1, "'{text}' resolves to {hits:?}");
            let want = intended(p.caption.target.unwrap());
            assert_eq!(*hits.iter().next().unwrap(), want, "'{text}'");
            let objs = p.image.objects();
            assert_eq!(objs.len(), 1);
            assert_eq!(evaluate(&words, to_cand(&objs[0]), &f), Some(want), "image does not fit '{text}'");
        }
    }
}

#[test]
fn reasoning_captions_never_name_their_target() {
    for seed in [4, 5] {
        for p in reasoning(800, seed) {
            let t = p.caption.target.unwrap();
            assert!(!p.caption.tokens.contains(&t.token()), "'{}' leaks {:?}", p.caption.text(), t);
            assert_eq!(p.caption.tier, Tier::Reasoning);
        }
    }
}

#[test]
fn explicit_captions_match_their_images() {
    for p in gen_explicit(500, 6).unwrap().pairs {
        let text = p.caption.text();
        let mut said: Vec<Cand> = Vec::new();
        for chunk in text.split(" and ") {
            let w: Vec<&str> = chunk.split(' ').collect();
            assert_eq!(w.len(), 3, "'{text}'");
            said.push(Cand {
                count: digit(w[0]).unwrap(),
                color: COLORS.iter().position(|c| *c == w[1]).unwrap(),
                shape: SHAPES.iter().position(|s| s.0 == w[2]).unwrap(),
            });
        }
        // cells in row-major order, each non-empty one named once
        let cells: Vec<Cand> = p.image.cells().iter().flatten().map(to_cand).collect();
        assert_eq!(said, cells, "'{text}'");
        assert!(!cells.is_empty() && cells.len() <= 3);
    }
}

#[test]
fn category_counts_follow_the_benchmark_shares() {
    // reported category shares of the reasoning benchmark, in percent
    let shares = [18.8, 18.1, 17.4, 19.4, 14.9, 11.4];
    for n in [100, 257, 1000, 2915] {
        let pairs = reasoning(n, 7);
        for (i, d) in Dimension::ALL.iter().enumerate() {
            let got = pairs.iter().filter(|p| p.caption.dimension == Some(*d)).count() as f64;
            let want = n as f64 * shares[i] / 100.0;
            assert!((got - want).abs() <= 1.0, "n={n} {}: {got} vs {want}", d.name());
        }
    }
}

#[test]
fn different_seeds_give_different_data() {
    let key = |p: &Pair| format!("{:?}|{:?}", p.image.cells(), p.caption.tokens);
    for n in [64, 256] {
        for (a, b) in [(gen_explicit(n, 10).unwrap().pairs, gen_explicit(n, 11).unwrap().pairs), (reasoning(n, 10), reasoning(n, 11))] {
            let left: HashSet<_> = a.iter().map(key).collect();
            let shared = b.iter().filter(|p| left.contains(&key(p))).count();
            assert!((shared as f64) < 0.1 * n as f64, "n={n}: {shared} shared");
        }
    }
}
