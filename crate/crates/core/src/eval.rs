//! Retrieval and embedding-geometry metrics, plus their CSV and SVG forms.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::backbone::Modality;
use crate::error::{ensure, Error, Result};
use crate::readout::{EmbeddingRecord, UNIT_TOL};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const ALIGNMENT_ALPHA: f64 = 2.0;
pub const UNIFORMITY_T: f64 = 2.0;

/// Image and text embeddings of one evaluated split, with positives
/// matched by id. Only ids present on both sides are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub images: Vec<EmbeddingRecord>,
    pub texts: Vec<EmbeddingRecord>,
    /// `(image index, text index)` for every positive pair, in image order.
    pub pairs: Vec<(usize, usize)>,
}

impl EmbeddingSet {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut images = Vec::new();
        let mut texts = Vec::new();
        let mut dim = None;
        for r in records {
            ensure!(!r.vector.is_empty(), Input, "record '{}' is empty", r.id);
            let d = *dim.get_or_insert(r.vector.len());
            ensure!(r.vector.len() == d, Dimension, "record '{}' has width {} not {}", r.id, r.vector.len(), d);
            let norm = dot(&r.vector, &r.vector).sqrt();
            ensure!((norm - 1.0).abs() <= UNIT_TOL, Contract, "record '{}' has norm {}", r.id, norm);
            match r.modality {
                Modality::Image => images.push(r),
                Modality::Text => texts.push(r),
            }
        }
        let index = |side: &[EmbeddingRecord], what: &str| -> Result<HashMap<String, usize>> {
            let mut m = HashMap::with_capacity(side.len());
            for (i, r) in side.iter().enumerate() {
                ensure!(m.insert(r.id.clone(), i).is_none(), Input, "{} id '{}' appears twice", what, r.id);
            }
            Ok(m)
        };
        index(&images, "image")?;
        let text_ix = index(&texts, "text")?;
        let pairs = images
            .iter()
            .enumerate()
            .filter_map(|(i, r)| text_ix.get(&r.id).map(|&t| (i, t)))
            .collect();
        Ok(EmbeddingSet { images, texts, pairs })
    }

    /// The matched subset as two aligned matrices: row `i` of each is a pair.
    pub fn aligned(&self) -> (Vec<&[f64]>, Vec<&[f64]>) {
        self.pairs
            .iter()
            .map(|&(i, t)| (self.images[i].vector.as_slice(), self.texts[t].vector.as_slice()))
            .unzip()
    }

    pub fn dim(&self) -> usize {
        self.images.first().or(self.texts.first()).map_or(0, |r| r.vector.len())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn similarities<Q: AsRef<[f64]>, G: AsRef<[f64]>>(queries: &[Q], gallery: &[G]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|g| dot(q.as_ref(), g.as_ref())).collect())
        .collect()
}

/// Zero-based rank of `target` in a row of similarities. Items with equal
/// similarity rank by gallery index.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Fraction of rows whose target lands in the top `k`. `targets[i]` is the
/// gallery index aligned with query `i`, or `None` if it has none.
pub fn recall_from_similarity(sim: &[Vec<f64>], targets: &[Option<usize>], k: usize) -> Result<f64> {
    ensure!(k >= 1, Input, "k must be at least 1");
    ensure!(!sim.is_empty(), Input, "no queries");
    ensure!(sim.len() == targets.len(), Dimension, "{} queries but {} targets", sim.len(), targets.len());
    let width = sim[0].len();
    ensure!(width > 0, Input, "empty gallery");
    let mut hits = 0usize;
    for (i, (row, t)) in sim.iter().zip(targets).enumerate() {
        ensure!(row.len() == width, Dimension, "ragged similarity row {}", i);
        let t = t.ok_or_else(|| Error::Input(format!("query {i} has no aligned gallery item")))?;
        ensure!(t < width, Input, "query {} aligned to gallery item {} of {}", i, t, width);
        if rank_of(row, t) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / sim.len() as f64)
}

pub fn recall_at_k<Q: AsRef<[f64]>, G: AsRef<[f64]>>(
    queries: &[Q],
    gallery: &[G],
    targets: &[Option<usize>],
    k: usize,
) -> Result<f64> {
    ensure!(!gallery.is_empty(), Input, "empty gallery");
    recall_from_similarity(&similarities(queries, gallery), targets, k)
}

/// Top-1 minus top-2 similarity per query.
pub fn top_margins<Q: AsRef<[f64]>, G: AsRef<[f64]>>(queries: &[Q], gallery: &[G]) -> Result<Vec<f64>> {
    ensure!(gallery.len() >= 2, Input, "margins need at least two gallery items");
    Ok(similarities(queries, gallery)
        .into_iter()
        .map(|row| {
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for x in row {
                if x > a {
                    b = a;
                    a = x;
                } else if x > b {
                    b = x;
                }
            }
            a - b
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }

    pub fn mean_recall(&self) -> f64 {
        self.recalls.iter().sum::<f64>() / self.recalls.len().max(1) as f64
    }
}

/// Retrieval over the matched subset: every paired item is a query and the
/// gallery is every paired item of the other modality.
pub fn retrieval_report(set: &EmbeddingSet, direction: Direction, ks: &[usize]) -> Result<RetrievalReport> {
    ensure!(!ks.is_empty(), Input, "empty k list");
    ensure!(!set.pairs.is_empty(), Input, "no aligned pairs to evaluate");
    let (zi, zt) = set.aligned();
    let (q, g) = match direction {
        Direction::ImageToText => (&zi, &zt),
        Direction::TextToImage => (&zt, &zi),
    };
    let sim = similarities(q, g);
    let targets: Vec<Option<usize>> = (0..q.len()).map(Some).collect();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let recalls = ks
        .iter()
        .map(|&k| recall_from_similarity(&sim, &targets, k))
        .collect::<Result<_>>()?;
    Ok(RetrievalReport {
        direction,
        ks,
        recalls,
        n_queries: q.len(),
        n_gallery: g.len(),
    })
}

fn centroid(vs: &[&[f64]]) -> Vec<f64> {
    let mut c = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, b) in c.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    c.iter_mut().for_each(|x| *x /= vs.len() as f64);
    c
}

/// Distance between the image and text centroids.
pub fn modality_gap(set: &EmbeddingSet) -> Result<f64> {
    ensure!(!set.images.is_empty() && !set.texts.is_empty(), Input, "modality gap needs both modalities");
    let zi: Vec<&[f64]> = set.images.iter().map(|r| r.vector.as_slice()).collect();
    let zt: Vec<&[f64]> = set.texts.iter().map(|r| r.vector.as_slice()).collect();
    Ok(sq_dist(&centroid(&zi), &centroid(&zt)).sqrt())
}

/// Mean of `‖z_I − z_T‖^alpha` over positive pairs.
pub fn alignment_metric(set: &EmbeddingSet, alpha: f64) -> Result<f64> {
    ensure!(!set.pairs.is_empty(), Input, "alignment needs at least one positive pair");
    let (zi, zt) = set.aligned();
    let total: f64 = zi.iter().zip(&zt).map(|(a, b)| sq_dist(a, b).sqrt().powf(alpha)).sum();
    Ok(total / zi.len() as f64)
}

/// Log of the mean Gaussian kernel `exp(−t‖z_i − z_j‖²)` over distinct
/// ordered pairs.
pub fn uniformity_metric<V: AsRef<[f64]>>(vectors: &[V], t: f64) -> Result<f64> {
    ensure!(vectors.len() >= 2, Input, "uniformity needs at least two vectors");
    // log-sum-exp over the unordered pairs; the ordered mean is the same
    let mut terms = Vec::with_capacity(vectors.len() * (vectors.len() - 1) / 2);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            terms.push(-t * sq_dist(vectors[i].as_ref(), vectors[j].as_ref()));
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|x| (x - m).exp()).sum();
    Ok(m + (s / terms.len() as f64).ln())
}

/// Eigenvalues (descending) and matching unit eigenvectors of a symmetric
/// matrix, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    ensure!(a.iter().all(|r| r.len() == n), Dimension, "matrix is not square");
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            ensure!((m[i][j] - m[j][i]).abs() <= 1e-12 * (1.0 + m[i][j].abs()), Input, "matrix is not symmetric");
        }
    }
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dims × D`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
    /// Share of total variance per component, descending.
    pub explained: Vec<f64>,
    /// Fewer than `dims` directions carry variance; trailing ones are arbitrary.
    pub rank_deficient: bool,
}

pub fn pca_project<V: AsRef<[f64]>>(vectors: &[V], dims: usize) -> Result<Pca> {
    ensure!(dims >= 1, Input, "pca needs at least one dimension");
    ensure!(vectors.len() > dims, Input, "pca to {} dims needs at least {} vectors", dims, dims + 1);
    let d = vectors[0].as_ref().len();
    ensure!(dims <= d, Input, "cannot project {}-d data to {} dims", d, dims);
    ensure!(vectors.iter().all(|v| v.as_ref().len() == d), Dimension, "ragged vectors");
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x / n;
        }
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += row[i] * row[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (values, vecs) = symmetric_eigen(&cov)?;
    let total: f64 = values.iter().map(|x| x.max(0.0)).sum();
    let mut components: Vec<Vec<f64>> = vecs.into_iter().take(dims).collect();
    // fix the sign so the largest-magnitude coordinate is positive
    for c in components.iter_mut() {
        let big = c.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if big < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let explained: Vec<f64> = values
        .iter()
        .take(dims)
        .map(|&x| if total > 0.0 { (x.max(0.0) / total).min(1.0) } else { 0.0 })
        .collect();
    let rank_deficient = values.iter().take(dims).any(|&x| x <= tol);
    let points = centered
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        points,
        explained,
        rank_deficient,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryReport {
    pub split: String,
    pub gap: f64,
    pub alignment: f64,
    pub uniformity_text: f64,
    pub uniformity_image: f64,
    /// PCA of images followed by texts.
    pub pca: Pca,
    pub n_images: usize,
}

pub fn geometry_report(set: &EmbeddingSet, split: &str) -> Result<GeometryReport> {
    let zi: Vec<&[f64]> = set.images.iter().map(|r| r.vector.as_slice()).collect();
    let zt: Vec<&[f64]> = set.texts.iter().map(|r| r.vector.as_slice()).collect();
    let all: Vec<&[f64]> = zi.iter().chain(&zt).copied().collect();
    Ok(GeometryReport {
        split: split.to_string(),
        gap: modality_gap(set)?,
        alignment: alignment_metric(set, ALIGNMENT_ALPHA)?,
        uniformity_text: uniformity_metric(&zt, UNIFORMITY_T)?,
        uniformity_image: uniformity_metric(&zi, UNIFORMITY_T)?,
        pca: pca_project(&all, 2)?,
        n_images: zi.len(),
    })
}

/// One row per report: `split,direction,n_queries,n_gallery,R@k...`.
pub fn retrieval_csv(split: &str, reports: &[RetrievalReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::Input("no retrieval reports".into()));
    };
    ensure!(reports.iter().all(|r| r.ks == first.ks), Input, "reports use different k lists");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split".to_string(), "direction".into(), "n_queries".into(), "n_gallery".into()];
    header.extend(first.ks.iter().map(|k| format!("R@{k}")));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![split.to_string(), r.direction.name().into(), r.n_queries.to_string(), r.n_gallery.to_string()];
        row.extend(r.recalls.iter().map(|x| format!("{x:.6}")));
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn geometry_csv(reports: &[(&str, &GeometryReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stage",
        "split",
        "gap",
        "alignment",
        "uniformity_text",
        "uniformity_image",
        "explained_1",
        "explained_2",
    ])?;
    for (stage, g) in reports {
        let ex = |i: usize| g.pca.explained.get(i).map_or("".to_string(), |x| format!("{x:.6}"));
        w.write_record([
            stage.to_string(),
            g.split.clone(),
            format!("{:.6}", g.gap),
            format!("{:.6}", g.alignment),
            format!("{:.6}", g.uniformity_text),
            format!("{:.6}", g.uniformity_image),
            ex(0),
            ex(1),
        ])?;
    }
    finish(w)
}

/// Any serializable rows as CSV with a header from the field names.
pub fn rows_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

const SVG_SIZE: f64 = 480.0;
const SVG_PAD: f64 = 48.0;

/// Scatter of the first two PCA coordinates, images and texts in two
/// colours, with a legend and axis labels.
pub fn pca_svg(report: &GeometryReport, title: &str) -> Result<String> {
    let pca = &report.pca;
    ensure!(pca.components.len() >= 2, Input, "scatter needs two components");
    let pts = &pca.points;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = |a: usize| (hi[a] - lo[a]).max(1e-12);
    let inner = SVG_SIZE - 2.0 * SVG_PAD;
    let xy = |p: &[f64]| {
        (
            SVG_PAD + (p[0] - lo[0]) / span(0) * inner,
            SVG_SIZE - SVG_PAD - (p[1] - lo[1]) / span(1) * inner,
        )
    };
    let mut s = String::new();
    let w = |s: &mut String, line: String| {
        s.push_str(&line);
        s.push('\n');
    };
    w(&mut s, format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#));
    w(&mut s, format!(r#"<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#));
    w(&mut s, format!(r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, SVG_SIZE / 2.0, escape(title)));
    w(&mut s, format!(r#"<line x1="{SVG_PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, SVG_SIZE - SVG_PAD, SVG_SIZE - SVG_PAD));
    w(&mut s, format!(r#"<line x1="{SVG_PAD}" y1="{SVG_PAD}" x2="{SVG_PAD}" y2="{}" stroke="black"/>"#, SVG_SIZE - SVG_PAD));
    let ex = |i: usize| 100.0 * pca.explained.get(i).copied().unwrap_or(0.0);
    w(&mut s, format!(r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">PC1 ({:.1}%)</text>"#, SVG_SIZE / 2.0, SVG_SIZE - 12.0, ex(0)));
    w(&mut s, format!(r#"<text x="16" y="{0}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {0})">PC2 ({1:.1}%)</text>"#, SVG_SIZE / 2.0, ex(1)));
    let classes = [("image", "#1f77b4", 0..report.n_images), ("text", "#d62728", report.n_images..pts.len())];
    for (name, colour, range) in classes.iter().cloned() {
        w(&mut s, format!(r#"<g class="{name}" fill="{colour}" fill-opacity="0.7">"#));
        for p in &pts[range] {
            let (x, y) = xy(p);
            w(&mut s, format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="3"/>"#));
        }
        w(&mut s, "</g>".into());
    }
    for (i, (name, colour, _)) in classes.iter().enumerate() {
        let y = SVG_PAD + 16.0 * i as f64;
        let x = SVG_SIZE - SVG_PAD - 64.0;
        w(&mut s, format!(r#"<circle cx="{x}" cy="{y}" r="4" fill="{colour}"/>"#));
        w(&mut s, format!(r#"<text x="{}" y="{}" font-size="12">{name}</text>"#, x + 10.0, y + 4.0));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Mean value per label.
pub fn mean_by<K: Ord + Clone>(rows: &[(K, f64)]) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in rows {
        let e = acc.entry(k.clone()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests;
