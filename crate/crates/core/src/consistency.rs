//! Semantic consistency of repeated answers.
//!
//! Each answer is split into sub-sentences. A sub-sentence is covered by
//! another answer when some sub-sentence of that answer reaches cosine
//! similarity `rho`. `F(a|b)` counts covered sub-sentences of `a`, and the
//! pair score averages `F(a|b)` and `F(b|a)`. With `normalize` each `F` is
//! divided by its own sub-sentence count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::split_sentences;
use crate::providers::{cosine, Embedding, ProviderError, TextEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub rho: f64,
    pub normalize: bool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            rho: 0.8,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsistencyError {
    #[error("need at least two answers, got {0}")]
    TooFewAnswers(usize),
    #[error("answer {0} has no sub-sentences")]
    EmptyAnswer(usize),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// An answer split into embedded sub-sentences.
#[derive(Debug, Clone)]
pub struct SplitAnswer {
    pub sentences: Vec<String>,
    vectors: Vec<Embedding>,
}

impl SplitAnswer {
    pub fn new(answer: &str, embedder: &dyn TextEmbedder) -> Result<Self, ConsistencyError> {
        let sentences = split_sentences(answer);
        if sentences.is_empty() {
            return Err(ConsistencyError::EmptyAnswer(0));
        }
        let vectors = embedder.embed(&sentences)?;
        Ok(Self { sentences, vectors })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// 1 when some sub-sentence of `other` reaches `rho` against `sentence`.
pub fn sub_score(sentence: &Embedding, other: &SplitAnswer, rho: f64) -> u32 {
    let best = other
        .vectors
        .iter()
        .map(|v| cosine(sentence, v))
        .fold(f64::NEG_INFINITY, f64::max);
    u32::from(best >= rho)
}

/// Raw coverage count `F(a|b)`, an integer in `[0, len(a)]`.
pub fn coverage(a: &SplitAnswer, b: &SplitAnswer, rho: f64) -> u32 {
    a.vectors.iter().map(|v| sub_score(v, b, rho)).sum()
}

pub fn pair_score_split(a: &SplitAnswer, b: &SplitAnswer, cfg: &ConsistencyConfig) -> f64 {
    let fa = coverage(a, b, cfg.rho) as f64;
    let fb = coverage(b, a, cfg.rho) as f64;
    if cfg.normalize {
        0.5 * (fa / a.len() as f64 + fb / b.len() as f64)
    } else {
        0.5 * (fa + fb)
    }
}

pub fn pair_score(
    a: &str,
    b: &str,
    embedder: &dyn TextEmbedder,
    cfg: &ConsistencyConfig,
) -> Result<f64, ConsistencyError> {
    let sa = SplitAnswer::new(a, embedder).map_err(|e| renumber(e, 0))?;
    let sb = SplitAnswer::new(b, embedder).map_err(|e| renumber(e, 1))?;
    Ok(pair_score_split(&sa, &sb, cfg))
}

fn renumber(e: ConsistencyError, index: usize) -> ConsistencyError {
    match e {
        ConsistencyError::EmptyAnswer(_) => ConsistencyError::EmptyAnswer(index),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetScore {
    /// `pair_matrix[i][j]` is the pair score of answers i and j.
    pub pair_matrix: Vec<Vec<f64>>,
    /// Mean over unordered pairs `i < j`.
    pub set_score: f64,
}

pub fn set_score(
    answers: &[String],
    embedder: &dyn TextEmbedder,
    cfg: &ConsistencyConfig,
) -> Result<SetScore, ConsistencyError> {
    if answers.len() < 2 {
        return Err(ConsistencyError::TooFewAnswers(answers.len()));
    }
    let split = answers
        .iter()
        .enumerate()
        .map(|(i, a)| SplitAnswer::new(a, embedder).map_err(|e| renumber(e, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = split.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for i in 0..n {
        matrix[i][i] = pair_score_split(&split[i], &split[i], cfg);
        for j in i + 1..n {
            let s = pair_score_split(&split[i], &split[j], cfg);
            matrix[i][j] = s;
            matrix[j][i] = s;
            total += s;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(SetScore {
        pair_matrix: matrix,
        set_score: total / pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::HashedBowEmbedder;
    use proptest::prelude::*;

    fn cfg(rho: f64, normalize: bool) -> ConsistencyConfig {
        ConsistencyConfig { rho, normalize }
    }

    fn split(s: &str) -> SplitAnswer {
        SplitAnswer::new(s, &HashedBowEmbedder).unwrap()
    }

    #[test]
    fn sub_score_examples() {
        let v = HashedBowEmbedder::vector("a red car");
        assert_eq!(sub_score(&v, &split("A red car. Something else."), 1.0), 1);
        assert_eq!(
            sub_score(
                &HashedBowEmbedder::vector("sofa"),
                &split("carburetor"),
                0.01
            ),
            0
        );
        // stub cosine 1/3 < 0.8
        assert_eq!(
            sub_score(
                &HashedBowEmbedder::vector("a tall tree"),
                &split("a red car"),
                0.8
            ),
            0
        );
    }

    #[test]
    fn two_answer_trace() {
        let e = HashedBowEmbedder;
        let a1 = "A red car. A tall tree.";
        let a2 = "A red car.";
        assert_eq!(coverage(&split(a1), &split(a2), 0.8), 1);
        assert_eq!(coverage(&split(a2), &split(a1), 0.8), 1);
        assert_eq!(pair_score(a1, a2, &e, &cfg(0.8, false)).unwrap(), 1.0);
        assert!((pair_score(a1, a2, &e, &cfg(0.8, true)).unwrap() - 0.75).abs() < 1e-9);
    }

    #[test]
    fn self_similarity_and_disjoint() {
        let e = HashedBowEmbedder;
        assert_eq!(
            pair_score("A red car.", "A red car.", &e, &cfg(0.8, false)).unwrap(),
            1.0
        );
        assert_eq!(
            pair_score("A red car.", "A red car.", &e, &cfg(0.8, true)).unwrap(),
            1.0
        );
        assert_eq!(
            pair_score("sofa", "carburetor", &e, &cfg(0.8, true)).unwrap(),
            0.0
        );
        assert_eq!(
            pair_score("sofa", "carburetor", &e, &cfg(0.8, false)).unwrap(),
            0.0
        );
    }

    #[test]
    fn set_score_examples() {
        let e = HashedBowEmbedder;
        let same = vec!["A dog runs. It is fast.".to_string(); 4];
        assert_eq!(
            set_score(&same, &e, &cfg(0.8, true)).unwrap().set_score,
            1.0
        );

        let two = vec![
            "A red car. A tall tree.".to_string(),
            "A red car.".to_string(),
        ];
        let s = set_score(&two, &e, &cfg(0.8, true)).unwrap();
        assert_eq!(
            s.set_score,
            pair_score(&two[0], &two[1], &e, &cfg(0.8, true)).unwrap()
        );
    }

    #[test]
    fn set_score_three_answer_enumeration() {
        // X = "a b c. d e f." and Y = "a b c. x y z. p q r." under raw mode:
        // S(X,X) = 2; F(X|Y) = 1, F(Y|X) = 1 so S(X,Y) = 1.
        // Normalized: S(X,X) = 1; S(X,Y) = (1/2 + 1/3)/2 = 5/12.
        let x = "a b c. d e f.".to_string();
        let y = "a b c. x y z. p q r.".to_string();
        let e = HashedBowEmbedder;
        let s = set_score(&[x.clone(), x, y], &e, &cfg(0.8, true)).unwrap();
        let expected = (1.0 + 5.0 / 12.0 + 5.0 / 12.0) / 3.0;
        assert!((s.set_score - expected).abs() < 1e-12);
        assert_eq!(s.pair_matrix[0][1], 1.0);
    }

    #[test]
    fn rejects_bad_sets() {
        let e = HashedBowEmbedder;
        assert!(matches!(
            set_score(&["one".into()], &e, &cfg(0.8, true)),
            Err(ConsistencyError::TooFewAnswers(1))
        ));
        assert!(matches!(
            set_score(&["one".into(), "  ".into()], &e, &cfg(0.8, true)),
            Err(ConsistencyError::EmptyAnswer(1))
        ));
    }

    fn answer() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            proptest::collection::vec(
                prop_oneof![
                    Just("a"),
                    Just("red"),
                    Just("car"),
                    Just("tree"),
                    Just("dog")
                ],
                1..4,
            )
            .prop_map(|w| w.join(" ")),
            1..4,
        )
        .prop_map(|s| s.join(". ") + ".")
    }

    proptest! {
        #[test]
        fn symmetric(a in answer(), b in answer(), rho in 0.0..1.0f64, normalize in any::<bool>()) {
            let e = HashedBowEmbedder;
            let c = cfg(rho, normalize);
            prop_assert_eq!(pair_score(&a, &b, &e, &c).unwrap(), pair_score(&b, &a, &e, &c).unwrap());
        }

        #[test]
        fn monotone_in_rho(a in answer(), b in answer(), r1 in 0.0..1.0f64, r2 in 0.0..1.0f64) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (sa, sb) = (split(&a), split(&b));
            prop_assert!(coverage(&sa, &sb, hi) <= coverage(&sa, &sb, lo));
            prop_assert!(pair_score_split(&sa, &sb, &cfg(hi, true)) <= pair_score_split(&sa, &sb, &cfg(lo, true)));
            prop_assert!(coverage(&sa, &sb, lo) as usize <= sa.len());
        }

        #[test]
        fn permutation_invariant(a in answer(), b in answer(), c in answer()) {
            let e = HashedBowEmbedder;
            let k = cfg(0.8, true);
            let s1 = set_score(&[a.clone(), b.clone(), c.clone()], &e, &k).unwrap().set_score;
            let s2 = set_score(&[c, a, b], &e, &k).unwrap().set_score;
            prop_assert!((s1 - s2).abs() < 1e-12);
        }
    }
}
