//! Library results against naive reference implementations.

mod common;

use capgraph::geometry::{
    greedy_match, iou_mask, max_matching_size, optimal_assignment, BBox, MaskRle,
};
use capgraph::model::{CaptionGraph, ObjectEntry};
use capgraph::providers::{cosine, HashedBowEmbedder};
use capgraph::videodiff::{merge_track_ids, TrackedFrame};
use common::oracles::{brute_matching, min_component_labels, pixel_iou, token_cosine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, np: usize, ng: usize) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let s = (0..np)
        .map(|_| {
            (0..ng)
                .map(|_| (rng.random_range(0..20) as f64) / 20.0)
                .collect()
        })
        .collect();
    let a = (0..np)
        .map(|_| (0..ng).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    (s, a)
}

#[test]
fn matching_against_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut greedy_short = 0;
    for _ in 0..300 {
        let (np, ng) = (rng.random_range(0..=6), rng.random_range(0..=6));
        let (s, a) = random_matrix(&mut rng, np, ng);
        let score = |p: usize, g: usize| s[p][g];
        let adm = |p: usize, g: usize| a[p][g];
        let (card, best) = brute_matching(np, ng, &score, &adm);

        assert_eq!(max_matching_size(np, ng, adm), card);
        let opt = optimal_assignment(np, ng, score, adm);
        assert_eq!(opt.pairs.len(), card);
        assert!((opt.total_score() - best).abs() < 1e-9, "{s:?} {a:?}");

        let greedy = greedy_match(&vec![(); np], &vec![(); ng], score, adm);
        assert!(greedy.pairs.len() <= card);
        if greedy.pairs.len() < card {
            greedy_short += 1;
        }
        for p in &greedy.pairs {
            assert!(a[p.pred][p.gt]);
        }
    }
    // random sparse admissibility does produce greedy shortfalls
    assert!(greedy_short > 0);
}

fn random_bits(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(density)).collect()
}

#[test]
fn mask_iou_against_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let da = rng.random_range(0.0..1.0);
        let db = rng.random_range(0.0..1.0);
        let (a, b) = (
            random_bits(&mut rng, 256, da),
            random_bits(&mut rng, 256, db),
        );
        let (ma, mb) = (
            MaskRle::from_bits(16, 16, &a).unwrap(),
            MaskRle::from_bits(16, 16, &b).unwrap(),
        );
        assert_eq!(ma.to_bits(), a);
        assert_eq!(iou_mask(&ma, &mb).unwrap(), pixel_iou(&a, &b));
    }
}

#[test]
fn track_merge_against_connected_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n_frames = rng.random_range(1..=4);
        let mut frames = Vec::new();
        let mut bits = Vec::new();
        for f in 0..n_frames {
            let n_obj = rng.random_range(0..=3);
            let mut objects = Vec::new();
            let mut fb = Vec::new();
            for k in 0..n_obj {
                // a few base shapes with small perturbations give both high and low overlaps
                let base = rng.random_range(0..3usize);
                let b: Vec<bool> = (0..64)
                    .map(|p| {
                        let inside = (p % 8) / 3 == base;
                        if rng.random_bool(0.05) {
                            !inside
                        } else {
                            inside
                        }
                    })
                    .collect();
                let mut o = ObjectEntry::new(format!("obj {k}"), "obj", "", "");
                o.mask = Some(MaskRle::from_bits(8, 8, &b).unwrap());
                objects.push(o);
                fb.push(b);
            }
            frames.push(TrackedFrame::new(
                f as u64,
                CaptionGraph {
                    objects,
                    ..Default::default()
                },
            ));
            bits.push(fb);
        }
        let tau = 0.7;
        let merged = merge_track_ids(&frames, tau).unwrap();

        let mut offsets = vec![0];
        for fb in &bits {
            offsets.push(offsets.last().unwrap() + fb.len());
        }
        let mut edges = Vec::new();
        for f in 1..bits.len() {
            for (i, a) in bits[f - 1].iter().enumerate() {
                for (j, b) in bits[f].iter().enumerate() {
                    let iou = pixel_iou(a, b);
                    if iou > 0.0 && iou >= tau {
                        edges.push((offsets[f - 1] + i, offsets[f] + j));
                    }
                }
            }
        }
        let labels = min_component_labels(*offsets.last().unwrap(), &edges);
        for (f, frame) in merged.iter().enumerate() {
            for (i, o) in frame.graph.objects.iter().enumerate() {
                assert_eq!(frame.track_ids[&o.name], labels[offsets[f] + i] as u64);
            }
        }
    }
}

#[test]
fn stub_cosines_match_token_counts() {
    let pairs = [
        ("a red car", "a tall tree", 1.0 / 3.0),
        ("a red car", "a red truck", 2.0 / 3.0),
        ("a running dog", "a sleeping dog", 2.0 / 3.0),
        ("sofa", "carburetor", 0.0),
        ("A red car.", "a RED car", 1.0),
    ];
    for (a, b, want) in pairs {
        let got = cosine(&HashedBowEmbedder::vector(a), &HashedBowEmbedder::vector(b));
        assert!((token_cosine(a, b) - want).abs() < 1e-12, "{a} / {b}");
        assert!((got - want).abs() < 1e-12, "{a} / {b}: {got}");
    }
}

#[test]
fn box_iou_against_grid_count() {
    // boxes on a 1/10 grid: IoU equals the ratio of covered cells
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cells = |rng: &mut ChaCha8Rng| {
        let (x1, y1) = (rng.random_range(0..9), rng.random_range(0..9));
        let (x2, y2) = (rng.random_range(x1 + 1..=10), rng.random_range(y1 + 1..=10));
        (x1, y1, x2, y2)
    };
    for _ in 0..200 {
        let (a, b) = (cells(&mut rng), cells(&mut rng));
        let inside =
            |c: (i32, i32, i32, i32), x: i32, y: i32| x >= c.0 && x < c.2 && y >= c.1 && y < c.3;
        let (mut inter, mut uni) = (0, 0);
        for x in 0..10 {
            for y in 0..10 {
                let (p, q) = (inside(a, x, y), inside(b, x, y));
                inter += i32::from(p && q);
                uni += i32::from(p || q);
            }
        }
        let bx = |c: (i32, i32, i32, i32)| {
            BBox::new(
                c.0 as f64 / 10.0,
                c.1 as f64 / 10.0,
                c.2 as f64 / 10.0,
                c.3 as f64 / 10.0,
            )
            .unwrap()
        };
        let got = capgraph::geometry::iou_box(&bx(a), &bx(b));
        assert!((got - inter as f64 / uni as f64).abs() < 1e-9);
    }
}
