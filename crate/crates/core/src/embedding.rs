//! Word embeddings and similarity-based target-class selection.

use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::instruction::ParsedInstruction;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_THRESHOLD: f64 = 0.2;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vector lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Parameter("cosine similarity of a zero or non-finite vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|a| *a /= n);
    Some(v)
}

fn word_seed(word: &str, salt: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(salt);
    h.write(word.as_bytes());
    h.finish()
}

/// Deterministic pseudo-random unit vector for a word.
fn hashed_unit(word: &str, dim: usize, salt: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(word_seed(word, salt));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Some(u) = normalize(v) {
            return u;
        }
    }
}

/// Word → unit-vector table. Unknown words map to a hash-seeded random unit
/// vector, so lookups are total and reproducible.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov_salt: u64,
}

/// Word clusters of the reference table. The first word of each cluster is
/// its head; the rest sit close to it.
const REFERENCE_CLUSTERS: &[&[&str]] = &[
    &["circle", "ball", "disc", "disk", "round", "ring", "sphere", "dot"],
    &["square", "box", "block", "cube", "tile", "rectangle"],
    &["triangle", "pyramid", "wedge", "cone"],
    &["bird", "sparrow", "parrot", "robin", "finch"],
    &["dog", "puppy", "hound"],
    &["cat", "kitten"],
    &["book", "notebook"],
    &["person", "man", "woman", "people"],
    &["background", "sky", "scene"],
    &["red"],
    &["green"],
    &["blue"],
    &["yellow"],
    &["cyan"],
    &["magenta"],
    &["orange"],
    &["purple"],
];

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
            oov_salt: 0x5eed_ed17,
        }
    }

    /// Hand-assigned cluster vectors over the synthetic-scene vocabulary:
    /// each cluster head gets its own axis, members are the head axis plus a
    /// small word-specific offset.
    pub fn reference() -> Self {
        let dim = DEFAULT_DIM;
        let mut table = Self::new(dim);
        for (axis, cluster) in REFERENCE_CLUSTERS.iter().enumerate() {
            for (j, word) in cluster.iter().enumerate() {
                let mut v = vec![0.0; dim];
                v[axis] = 1.0;
                if j > 0 {
                    let offset = hashed_unit(word, dim, 0xc1u64);
                    v.iter_mut().zip(&offset).for_each(|(a, o)| *a += 0.35 * o);
                }
                table.insert(word, v).expect("reference vectors are nonzero");
            }
        }
        table
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    /// Stores `vector` normalized to unit length.
    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding for `{word}` has {} dims, table has {}",
                vector.len(),
                self.dim
            )));
        }
        let unit = normalize(vector).ok_or_else(|| Error::Parameter(format!("zero vector for `{word}`")))?;
        self.vectors.insert(word.to_lowercase(), unit);
        Ok(())
    }

    /// Parses the plain-text format `word v1 … vD`, one word per line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parameter(format!("line {}: {e}", lineno + 1)))?;
            if values.is_empty() {
                return Err(Error::Parameter(format!("line {}: no vector for `{word}`", lineno + 1)));
            }
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            t.insert(word, values)?;
        }
        table.ok_or_else(|| Error::Parameter("embedding file is empty".into()))
    }

    pub fn embed(&self, word: &str) -> Vec<f64> {
        let key = word.to_lowercase();
        match self.vectors.get(&key) {
            Some(v) => v.clone(),
            None => hashed_unit(&key, self.dim, self.oov_salt),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSelection {
    pub label: String,
    pub score: f64,
    /// Set when the best similarity is below the confidence threshold.
    pub low_confidence: bool,
}

/// Picks the candidate label most similar to any instruction noun. Ties keep
/// the earliest candidate, then the earliest noun.
pub fn select_target_class(
    candidates: &[String],
    instruction: &ParsedInstruction,
    table: &EmbeddingTable,
    threshold: f64,
) -> Result<TargetSelection> {
    if candidates.is_empty() {
        return Err(Error::NoTarget("no candidate labels".into()));
    }
    if instruction.nouns.is_empty() {
        return Err(Error::NoTarget(format!("no nouns in `{}`", instruction.raw)));
    }
    let nouns: Vec<Vec<f64>> = instruction.nouns.iter().map(|n| table.embed(n)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (ci, cand) in candidates.iter().enumerate() {
        let cv = table.embed(cand);
        for nv in &nouns {
            let s = cosine_similarity(&cv, nv)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((ci, s));
            }
        }
    }
    let (ci, score) = best.expect("nonempty candidates and nouns");
    Ok(TargetSelection {
        label: candidates[ci].clone(),
        score,
        low_confidence: score < threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::parse_instruction;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::Rng;

    fn axis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            1.0 / 2f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn exact_match_scores_one() {
        let t = EmbeddingTable::reference();
        let p = parse_instruction("the bird").unwrap();
        let s = select_target_class(&["bird".into()], &p, &t, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(s.label, "bird");
        assert_relative_eq!(s.score, 1.0, epsilon = 1e-12);
    }

    /// Exhaustive (candidate, noun) enumeration used as the selection oracle.
    fn oracle(cands: &[String], nouns: &[String], t: &EmbeddingTable) -> (String, f64) {
        let mut pairs = Vec::new();
        for (ci, c) in cands.iter().enumerate() {
            for (ni, n) in nouns.iter().enumerate() {
                pairs.push((ci, ni, cosine_similarity(&t.embed(c), &t.embed(n)).unwrap()));
            }
        }
        let best = pairs.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        let first = pairs.iter().find(|p| p.2 == best).unwrap();
        (cands[first.0].clone(), best)
    }

    #[test]
    fn toy_axis_table() {
        let mut t = EmbeddingTable::new(4);
        t.insert("bird", axis(4, 0)).unwrap();
        t.insert("book", axis(4, 1)).unwrap();
        let cands = vec!["bird".to_string(), "book".to_string()];
        let p = parse_instruction("this bird is red").unwrap();
        let s = select_target_class(&cands, &p, &t, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((s.label.clone(), s.score), oracle(&cands, &p.nouns, &t));
        assert_eq!(s.label, "bird");
        assert_eq!(s.score, 1.0);
    }

    #[test]
    fn synonym_lands_on_cluster() {
        let t = EmbeddingTable::reference();
        let mut p = parse_instruction("the puppy").unwrap();
        p.nouns = vec!["puppy".into()];
        let cands = vec!["dog".to_string(), "cat".to_string()];
        let s = select_target_class(&cands, &p, &t, DEFAULT_THRESHOLD).unwrap();
        let (label, score) = oracle(&cands, &p.nouns, &t);
        assert_eq!(s.label, "dog");
        assert_eq!((s.label, s.score), (label, score));
        assert!(!s.low_confidence);
    }

    #[test]
    fn no_nouns_is_no_target() {
        let t = EmbeddingTable::reference();
        let p = parse_instruction("make it red").unwrap();
        assert!(matches!(
            select_target_class(&["bird".into()], &p, &t, DEFAULT_THRESHOLD),
            Err(Error::NoTarget(_))
        ));
    }

    #[test]
    fn low_confidence_flag() {
        let mut t = EmbeddingTable::new(2);
        t.insert("bird", vec![1.0, 0.0]).unwrap();
        t.insert("book", vec![0.0, 1.0]).unwrap();
        let mut p = parse_instruction("the book").unwrap();
        p.nouns = vec!["book".into()];
        let s = select_target_class(&["bird".into()], &p, &t, DEFAULT_THRESHOLD).unwrap();
        assert!(s.low_confidence);
    }

    #[test]
    fn oov_vectors_are_deterministic_units() {
        let t = EmbeddingTable::reference();
        let a = t.embed("zyzzyva");
        assert_eq!(a, t.embed("zyzzyva"));
        assert_relative_eq!(a.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_ne!(a, t.embed("quux"));
    }

    #[test]
    fn text_format() {
        let t = EmbeddingTable::from_text("bird 1 0 0\nbook 0 2 0\n\n").unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.embed("book"), vec![0.0, 1.0, 0.0]);
        assert!(EmbeddingTable::from_text("bird 1 0\nbook 1\n").is_err());
        assert!(EmbeddingTable::from_text("bird 0 0\n").is_err());
    }

    proptest! {
        #[test]
        fn prop_argmax_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let words = ["a", "b", "c", "d", "e"];
            let mut t1 = EmbeddingTable::new(5);
            let mut text = String::new();
            for w in words {
                let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                t1.insert(w, v.clone()).unwrap();
                text.push_str(w);
                for x in v {
                    text.push_str(&format!(" {}", x * scale));
                }
                text.push('\n');
            }
            let t2 = EmbeddingTable::from_text(&text).unwrap();
            let mut p = parse_instruction("x").unwrap();
            p.nouns = vec!["d".into(), "e".into()];
            let cands: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
            let s1 = select_target_class(&cands, &p, &t1, 0.2).unwrap();
            let s2 = select_target_class(&cands, &p, &t2, 0.2).unwrap();
            prop_assert_eq!(s1.label, s2.label);
        }
    }
}
