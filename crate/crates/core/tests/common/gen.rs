//! Seeded random instances shared by the property tests and the CLI
//! crate's acceptance suite.
#![allow(dead_code)]

use capgraph::geometry::{BBox, MaskRle};
use capgraph::model::{CaptionGraph, ObjectEntry, OverallSection, RelationTriplet};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const WORDS: &[&str] = &[
    "a", "the", "red", "small", "tall", "wooden", "bright", "old", "car", "tree", "dog", "street",
    "house", "window", "sky", "grass", "light", "café", "über", "sits", "stands", "near", "under",
    "with", "blue",
];

pub const SUBTITLES: &[&str] = &["Theme", "Style", "Background", "Foreground"];

pub const HEADS: &[&str] = &[
    "dog",
    "person",
    "car",
    "tree",
    "cup",
    "traffic light",
    "bench",
    "kite",
];

pub const PREDICATES: &[&str] = &[
    "on",
    "near",
    "holding",
    "behind",
    "next to",
    "looking at",
    "under",
];

fn phrase(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Free text with sentence punctuation and optional `<name>` mentions.
fn overall_text(rng: &mut impl Rng, names: &[String]) -> String {
    let sentences = rng.random_range(0..=3);
    let mut parts = Vec::new();
    for _ in 0..sentences {
        let mut s = phrase(rng, 1, 5);
        if !names.is_empty() && rng.random_bool(0.5) {
            s = format!("{s} <{}>", names.choose(rng).unwrap());
        }
        let end = *[".", "!", "?", ", then", ":"].choose(rng).unwrap();
        parts.push(format!("{s}{end}"));
    }
    parts.join(" ")
}

/// Box with corners on the 1e-4 grid, the precision of the JSON encoding.
pub fn grid_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.random_range(0..9000u32);
    let y1 = rng.random_range(0..9000u32);
    let x2 = rng.random_range(x1 + 1..=10000);
    let y2 = rng.random_range(y1 + 1..=10000);
    let f = |v: u32| f64::from(v) / 10000.0;
    BBox::new(f(x1), f(y1), f(x2), f(y2)).unwrap()
}

/// Box with corners on the 1/16 grid: every area and IoU is exact in f64.
pub fn dyadic_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.random_range(0..15u32);
    let y1 = rng.random_range(0..15u32);
    let x2 = rng.random_range(x1 + 1..=16);
    let y2 = rng.random_range(y1 + 1..=16);
    let f = |v: u32| f64::from(v) / 16.0;
    BBox::new(f(x1), f(y1), f(x2), f(y2)).unwrap()
}

pub fn random_bits(rng: &mut impl Rng, len: usize, density: f64) -> Vec<bool> {
    (0..len).map(|_| rng.random_bool(density)).collect()
}

pub fn random_mask(rng: &mut impl Rng, w: u32, h: u32) -> (Vec<bool>, MaskRle) {
    let density = rng.random_range(0.05..0.9);
    let bits = random_bits(rng, (w * h) as usize, density);
    let mask = MaskRle::from_bits(w, h, &bits).unwrap();
    (bits, mask)
}

/// A structurally valid graph. With `grounded`, objects may carry boxes
/// and masks; the string format carries neither, so round-trips through
/// it use ungrounded graphs.
pub fn random_graph(rng: &mut impl Rng, grounded: bool) -> CaptionGraph {
    let n_objects = rng.random_range(1..=6);
    let mut objects: Vec<ObjectEntry> = Vec::new();
    let mut counters = std::collections::HashMap::new();
    for _ in 0..n_objects {
        let head = *HEADS.choose(rng).unwrap();
        let k = counters.entry(head).or_insert(0);
        *k += 1;
        let name = if rng.random_bool(0.7) {
            format!("{head} {k}")
        } else {
            format!("{head} {}", phrase(rng, 1, 1))
        };
        if objects.iter().any(|o| o.name == name) {
            continue;
        }
        let mut description = phrase(rng, 1, 6);
        if rng.random_bool(0.1) {
            description.push_str(": seen from afar");
        }
        let mut o = ObjectEntry::new(name, head, description, phrase(rng, 1, 2));
        if grounded {
            if rng.random_bool(0.7) {
                o.bbox = Some(grid_box(rng));
            }
            if rng.random_bool(0.3) {
                let (w, h) = (rng.random_range(1..6), rng.random_range(1..6));
                o.mask = Some(random_mask(rng, w, h).1);
            }
        }
        objects.push(o);
    }
    let names: Vec<String> = objects.iter().map(|o| o.name.clone()).collect();

    let overall = (0..rng.random_range(0..=4))
        .map(|_| OverallSection {
            subtitle: SUBTITLES.choose(rng).unwrap().to_string(),
            text: overall_text(rng, &names),
        })
        .collect();
    let relationships = (0..rng.random_range(0..=5))
        .map(|_| {
            RelationTriplet::new(
                names.choose(rng).unwrap().clone(),
                *PREDICATES.choose(rng).unwrap(),
                names.choose(rng).unwrap().clone(),
            )
        })
        .collect();
    CaptionGraph {
        overall,
        objects,
        relationships,
    }
}

/// One to four sentences drawn from a small vocabulary so that random
/// answers share content often enough to exercise the threshold.
pub fn random_answer(rng: &mut impl Rng) -> String {
    const SENTENCES: &[&str] = &[
        "A red car is parked",
        "A tall tree stands",
        "The dog is running",
        "The dog is sleeping",
        "A red car drives by",
        "The sky is blue",
        "Two people walk",
        "A small dog runs",
    ];
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|_| format!("{}.", SENTENCES.choose(rng).unwrap()))
        .collect::<Vec<_>>()
        .join(" ")
}
