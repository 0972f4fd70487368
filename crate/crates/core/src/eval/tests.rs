use super::*;
use crate::seeds;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_units(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| unit((0..d).map(|_| StandardNormal.sample(rng)).collect()))
        .collect()
}

fn e(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn set_of(images: &[Vec<f64>], texts: &[Vec<f64>]) -> EmbeddingSet {
    let mut recs = Vec::new();
    for (i, v) in images.iter().enumerate() {
        recs.push(EmbeddingRecord::new(format!("p{i}"), Modality::Image, v.clone()).unwrap());
    }
    for (i, v) in texts.iter().enumerate() {
        recs.push(EmbeddingRecord::new(format!("p{i}"), Modality::Text, v.clone()).unwrap());
    }
    EmbeddingSet::new(recs).unwrap()
}

fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let m = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let q = m.qr().q();
    (0..d).map(|i| (0..d).map(|j| q[(i, j)]).collect()).collect()
}

fn rotate(vs: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vs.iter()
        .map(|v| q.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

// ranks by a full sort on (similarity desc, index asc)
fn brute_recall(q: &[Vec<f64>], g: &[Vec<f64>], k: usize) -> f64 {
    let mut hits = 0;
    for (i, qv) in q.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .map(|(j, gv)| (qv.iter().zip(gv).map(|(a, b)| a * b).sum(), j))
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if order.iter().take(k).any(|&(_, j)| j == i) {
            hits += 1;
        }
    }
    hits as f64 / q.len() as f64
}

fn diag(n: usize) -> Vec<Option<usize>> {
    (0..n).map(Some).collect()
}

#[test]
fn self_retrieval_and_orthogonal_decoys() {
    let mut rng = seeds::stream(1, "eval");
    let vs = random_units(12, 8, &mut rng);
    assert_eq!(recall_at_k(&vs, &vs, &diag(12), 1).unwrap(), 1.0);
    let q: Vec<Vec<f64>> = (0..4).map(|i| e(8, i)).collect();
    let g: Vec<Vec<f64>> = (0..8).map(|i| e(8, i)).collect();
    assert_eq!(recall_at_k(&q, &g, &diag(4), 1).unwrap(), 1.0);
}

#[test]
fn recall_matches_brute_force_ranking() {
    let mut rng = seeds::stream(2, "eval");
    for _ in 0..20 {
        let q = random_units(16, 16, &mut rng);
        let g = random_units(16, 16, &mut rng);
        for k in [1, 2, 5, 10, 16] {
            assert_eq!(recall_at_k(&q, &g, &diag(16), k).unwrap(), brute_recall(&q, &g, k));
        }
    }
}

#[test]
fn ties_break_by_gallery_index() {
    let g = vec![e(2, 0), e(2, 0), e(2, 1)];
    let q = vec![e(2, 0), e(2, 0)];
    assert_eq!(recall_at_k(&q, &g, &[Some(0), Some(1)], 1).unwrap(), 0.5);
    assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 2);
}

#[test]
fn recall_errors() {
    let g = vec![e(2, 0)];
    assert!(matches!(recall_at_k(&g, &g, &[None], 1), Err(Error::Input(_))));
    assert!(matches!(recall_at_k(&g, &g, &[Some(0)], 0), Err(Error::Input(_))));
    let empty: Vec<Vec<f64>> = vec![];
    assert!(matches!(recall_at_k(&g, &empty, &[Some(0)], 1), Err(Error::Input(_))));
}

#[test]
fn report_covers_matched_ids_only() {
    let mut recs = vec![
        EmbeddingRecord::new("a", Modality::Image, e(3, 0)).unwrap(),
        EmbeddingRecord::new("b", Modality::Image, e(3, 1)).unwrap(),
        EmbeddingRecord::new("c", Modality::Image, e(3, 2)).unwrap(),
        EmbeddingRecord::new("b", Modality::Text, e(3, 1)).unwrap(),
        EmbeddingRecord::new("a", Modality::Text, e(3, 0)).unwrap(),
    ];
    let set = EmbeddingSet::new(recs.clone()).unwrap();
    assert_eq!(set.pairs, vec![(0, 1), (1, 0)]);
    let r = retrieval_report(&set, Direction::TextToImage, &[10, 1, 5]).unwrap();
    assert_eq!(r.ks, vec![1, 5, 10]);
    assert_eq!(r.recalls, vec![1.0, 1.0, 1.0]);
    assert_eq!((r.n_queries, r.n_gallery), (2, 2));
    recs.push(EmbeddingRecord::new("a", Modality::Text, e(3, 2)).unwrap());
    assert!(matches!(EmbeddingSet::new(recs), Err(Error::Input(_))));
    let bad = EmbeddingRecord {
        id: "x".into(),
        modality: Modality::Text,
        vector: vec![0.5, 0.5],
    };
    assert!(matches!(EmbeddingSet::new(vec![bad]), Err(Error::Contract(_))));
}

#[test]
fn gap_examples() {
    let mut rng = seeds::stream(3, "eval");
    let vs = random_units(6, 5, &mut rng);
    assert!(modality_gap(&set_of(&vs, &vs)).unwrap().abs() < 1e-15);
    let g = modality_gap(&set_of(&[e(3, 0)], &[e(3, 1)])).unwrap();
    assert!((g - 1.41421).abs() < 1e-5);
    let only_images = EmbeddingSet::new(vec![EmbeddingRecord::new("a", Modality::Image, e(2, 0)).unwrap()]).unwrap();
    assert!(matches!(modality_gap(&only_images), Err(Error::Input(_))));
}

#[test]
fn alignment_examples() {
    let mut rng = seeds::stream(4, "eval");
    let vs = random_units(5, 4, &mut rng);
    assert_eq!(alignment_metric(&set_of(&vs, &vs), 2.0).unwrap(), 0.0);
    let v = e(3, 0);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((alignment_metric(&set_of(&[v], &[neg]), 2.0).unwrap() - 4.0).abs() < 1e-12);
    let empty = EmbeddingSet::new(vec![]).unwrap();
    assert!(matches!(alignment_metric(&empty, 2.0), Err(Error::Input(_))));
}

#[test]
fn alignment_is_monotone_in_pair_distance() {
    let mut rng = seeds::stream(5, "eval");
    let zi = random_units(6, 4, &mut rng);
    let zt = random_units(6, 4, &mut rng);
    let before = alignment_metric(&set_of(&zi, &zt), 2.0).unwrap();
    let mut closer = zt.clone();
    // halfway along the chord, renormalised, is strictly closer
    closer[2] = unit(zi[2].iter().zip(&zt[2]).map(|(a, b)| a + b).collect());
    assert!(alignment_metric(&set_of(&zi, &closer), 2.0).unwrap() <= before);
}

#[test]
fn uniformity_examples() {
    let v = e(3, 1);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((uniformity_metric(&[v.clone(), neg], 2.0).unwrap() + 8.0).abs() < 1e-12);
    assert_eq!(uniformity_metric(&[v.clone(), v.clone()], 2.0).unwrap(), 0.0);
    assert!(matches!(uniformity_metric(&[v], 2.0), Err(Error::Input(_))));
}

#[test]
fn spread_points_are_more_uniform_than_collapsed_ones() {
    // direct evaluation of the mean kernel over ordered pairs
    let oracle = |vs: &[Vec<f64>]| {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..vs.len() {
            for j in 0..vs.len() {
                if i != j {
                    let d2: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    s += (-2.0 * d2).exp();
                    n += 1.0;
                }
            }
        }
        (s / n).ln()
    };
    let spread: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 8.0;
            vec![a.cos(), a.sin(), 0.0]
        })
        .collect();
    let collapsed: Vec<Vec<f64>> = (0..8)
        .map(|i| unit(vec![1.0, 0.01 * i as f64, 0.005 * i as f64]))
        .collect();
    let us = uniformity_metric(&spread, 2.0).unwrap();
    let uc = uniformity_metric(&collapsed, 2.0).unwrap();
    assert!((us - oracle(&spread)).abs() < 1e-12);
    assert!((uc - oracle(&collapsed)).abs() < 1e-12);
    assert!(us < uc);
}

#[test]
fn jacobi_matches_dense_eigensolver() {
    let mut rng = seeds::stream(6, "eval");
    let x: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let pca = pca_project(&x, 4).unwrap();
    let m = DMatrix::from_fn(10, 4, |i, j| x[i][j]);
    let mean = m.row_mean();
    let c = DMatrix::from_fn(10, 4, |i, j| m[(i, j)] - mean[j]);
    let cov = c.transpose() * &c / 10.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().sum();
    for (k, &o) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(o);
        let dotp: f64 = (0..4).map(|j| col[j] * pca.components[k][j]).sum();
        assert!((dotp.abs() - 1.0).abs() < 1e-6, "component {k}: {dotp}");
        for j in 0..4 {
            assert!((col[j] * dotp.signum() - pca.components[k][j]).abs() < 1e-6);
        }
        assert!((pca.explained[k] - eig.eigenvalues[o] / total).abs() < 1e-9);
    }
    assert!(!pca.rank_deficient);
}

#[test]
fn pca_of_a_line_has_one_component() {
    let dir = unit(vec![1.0, 2.0, -1.0, 0.5]);
    let x: Vec<Vec<f64>> = (0..9).map(|i| dir.iter().map(|d| d * (i as f64 - 3.0)).collect()).collect();
    let pca = pca_project(&x, 2).unwrap();
    assert!(pca.explained[0] >= 1.0 - 1e-6);
    assert!(pca.rank_deficient);
    assert!(pca.explained[1] <= 1e-9);
}

#[test]
fn pca_is_an_isometry_on_planar_data() {
    let mut rng = seeds::stream(7, "eval");
    let q = random_orthogonal(6, &mut rng);
    let x: Vec<Vec<f64>> = (0..12)
        .map(|_| {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            (0..6).map(|j| a * q[0][j] + b * q[1][j]).collect()
        })
        .collect();
    let pca = pca_project(&x, 2).unwrap();
    for i in 0..12 {
        for j in 0..12 {
            let d_in = sq_dist(&x[i], &x[j]).sqrt();
            let d_out = sq_dist(&pca.points[i], &pca.points[j]).sqrt();
            assert!((d_in - d_out).abs() < 1e-5);
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((dot(&pca.components[a], &pca.components[b]) - want).abs() < 1e-6);
        }
    }
    assert!(pca_project(&x[..2], 2).is_err());
}

#[test]
fn csv_and_svg_shapes() {
    let mut rng = seeds::stream(8, "eval");
    let zi = random_units(6, 4, &mut rng);
    let zt = random_units(6, 4, &mut rng);
    let set = set_of(&zi, &zt);
    let r = retrieval_report(&set, Direction::ImageToText, &[1]).unwrap();
    let csv = retrieval_csv("eval", &[r]).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "split,direction,n_queries,n_gallery,R@1");
    assert!(lines.next().unwrap().starts_with("eval,i2t,6,6,"));
    let g = geometry_report(&set, "eval").unwrap();
    let gcsv = geometry_csv(&[("adapted", &g)]).unwrap();
    assert!(gcsv.starts_with("stage,split,gap,alignment,uniformity_text,uniformity_image,explained_1,explained_2\nadapted,eval,"));
    let svg = pca_svg(&g, "a <b>").unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle cx=").count(), 12 + 2);
    for needle in ["PC1 (", "PC2 (", ">image</text>", ">text</text>", "a &lt;b&gt;"] {
        assert!(svg.contains(needle), "{needle}");
    }
    assert_eq!(svg, pca_svg(&g, "a <b>").unwrap());
}

#[test]
fn margins_are_top_two_differences() {
    let q = vec![unit(vec![1.0, 0.2, 0.0])];
    let g = vec![e(3, 1), e(3, 0), e(3, 2)];
    let m = top_margins(&q, &g).unwrap();
    assert!((m[0] - (q[0][0] - q[0][1])).abs() < 1e-15);
    assert!(top_margins(&q, &g[..1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..10_000, n in 2usize..12) {
        let mut rng = seeds::stream(seed, "eval-prop");
        let q = random_units(n, 5, &mut rng);
        let g = random_units(n, 5, &mut rng);
        let rs: Vec<f64> = (1..=n).map(|k| recall_at_k(&q, &g, &diag(n), k).unwrap()).collect();
        prop_assert!(rs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(rs.iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert_eq!(rs[n - 1], 1.0);
    }

    #[test]
    fn recall_ignores_monotone_similarity_transforms(seed in 0u64..10_000, n in 2usize..12, k in 1usize..5) {
        let mut rng = seeds::stream(seed, "eval-prop");
        let q = random_units(n, 5, &mut rng);
        let g = random_units(n, 5, &mut rng);
        let sim = similarities(&q, &g);
        let warped: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|&s| (3.0 * s).exp() + s).collect()).collect();
        prop_assert_eq!(
            recall_from_similarity(&sim, &diag(n), k).unwrap(),
            recall_from_similarity(&warped, &diag(n), k).unwrap()
        );
    }

    #[test]
    fn geometry_is_rotation_invariant(seed in 0u64..10_000, n in 2usize..10) {
        let mut rng = seeds::stream(seed, "eval-prop");
        let zi = random_units(n, 6, &mut rng);
        let zt = random_units(n, 6, &mut rng);
        let q = random_orthogonal(6, &mut rng);
        let (a, b) = (set_of(&zi, &zt), set_of(&rotate(&zi, &q), &rotate(&zt, &q)));
        prop_assert!((modality_gap(&a).unwrap() - modality_gap(&b).unwrap()).abs() < 1e-9);
        prop_assert!((alignment_metric(&a, 2.0).unwrap() - alignment_metric(&b, 2.0).unwrap()).abs() < 1e-9);
        prop_assert!((uniformity_metric(&zi, 2.0).unwrap() - uniformity_metric(&rotate(&zi, &q), 2.0).unwrap()).abs() < 1e-9);
        prop_assert!((uniformity_metric(&zt, 2.0).unwrap() - uniformity_metric(&rotate(&zt, &q), 2.0).unwrap()).abs() < 1e-9);
        let u = uniformity_metric(&zi, 2.0).unwrap();
        prop_assert!(u <= 0.0);
    }
}
