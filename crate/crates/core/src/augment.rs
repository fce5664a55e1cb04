//! Perturbation operations and per-example operation sampling.
//!
//! Token-level operations rewrite the token sequence directly. Gaussian
//! noise is a hidden-space operation: it leaves the tokens alone and sets a
//! deferred-noise flag that the encoder consumes at the embedding layer.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::text::{tokenize, Dataset, Example};

/// One perturbation operation with its strength parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum PerturbationOp {
    SynonymReplace { ratio: f64 },
    RandomInsert { ratio: f64 },
    RandomSwap { ratio: f64 },
    RandomDelete { prob: f64 },
    ParaphraseLookup { variant_index: usize },
    GaussianNoise { sigma: f64 },
}

impl PerturbationOp {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PerturbationOp::SynonymReplace { ratio }
            | PerturbationOp::RandomInsert { ratio }
            | PerturbationOp::RandomSwap { ratio } => (0.0..=1.0).contains(&ratio),
            PerturbationOp::RandomDelete { prob } => (0.0..=1.0).contains(&prob),
            PerturbationOp::ParaphraseLookup { .. } => true,
            PerturbationOp::GaussianNoise { sigma } => sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid perturbation parameters: {self:?}")))
        }
    }
}

/// word -> synonyms. A word never lists itself.
#[derive(Debug, Clone, Default)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Result<Self> {
        for (word, syns) in &entries {
            if syns.iter().any(|s| s == word) {
                return Err(Error::Data(format!(
                    "lexicon: {word:?} lists itself as a synonym"
                )));
            }
            if syns.is_empty() {
                return Err(Error::Data(format!("lexicon: {word:?} has no synonyms")));
            }
        }
        Ok(Self { entries })
    }

    /// Loads a TSV lexicon: `word<TAB>syn1,syn2,...` per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (word, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{}: line {}: missing tab", path.display(), lineno + 1))
            })?;
            let syns: Vec<String> = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            entries.insert(word.trim().to_string(), syns);
        }
        Self::new(entries)
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn covers(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }
}

/// example id -> precomputed paraphrase strings (back-translation stand-in;
/// each variant index plays the role of one intermediate language).
#[derive(Debug, Clone, Default)]
pub struct ParaphraseTable {
    entries: BTreeMap<usize, Vec<String>>,
}

#[derive(Deserialize)]
struct ParaphraseLine {
    id: usize,
    paraphrases: Vec<String>,
}

impl ParaphraseTable {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ParaphraseLine = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
            })?;
            entries.insert(parsed.id, parsed.paraphrases);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, id: usize) -> Option<&[String]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Load-time audit: reports ids referenced by the table but absent from
    /// the dataset, and the fraction of dataset examples covered.
    pub fn audit(&self, dataset: &Dataset) -> (Vec<usize>, f64) {
        let known: std::collections::BTreeSet<usize> =
            dataset.examples.iter().map(|e| e.id).collect();
        let orphans: Vec<usize> =
            self.entries.keys().copied().filter(|id| !known.contains(id)).collect();
        let covered = dataset.examples.iter().filter(|e| self.entries.contains_key(&e.id)).count();
        let coverage = if dataset.is_empty() {
            0.0
        } else {
            covered as f64 / dataset.len() as f64
        };
        (orphans, coverage)
    }
}

/// The N operations drawn for one example (duplicates allowed).
#[derive(Debug, Clone)]
pub struct PerturbationPlan {
    pub ops: Vec<PerturbationOp>,
}

/// Draws `n` operations uniformly with replacement from the pool.
pub fn sample_operations(
    op_pool: &[PerturbationOp],
    n: usize,
    stream: &mut Stream,
) -> Result<PerturbationPlan> {
    if op_pool.is_empty() {
        return Err(Error::Contract("sample_operations: empty operation pool".to_string()));
    }
    if n < 1 {
        return Err(Error::Contract("sample_operations: n must be >= 1".to_string()));
    }
    let ops = (0..n)
        .map(|_| op_pool[stream.gen_range(0..op_pool.len())].clone())
        .collect();
    Ok(PerturbationPlan { ops })
}

fn perturb_count(ratio: f64, len: usize) -> usize {
    (ratio * len as f64).ceil() as usize
}

/// Replaces ceil(ratio * len) lexicon-covered tokens by random synonyms.
/// Length-preserving; identity when nothing is covered.
pub fn synonym_replace(
    tokens: &[String],
    ratio: f64,
    lexicon: &SynonymLexicon,
    stream: &mut Stream,
) -> Vec<String> {
    let mut out = tokens.to_vec();
    let candidates: Vec<usize> =
        (0..tokens.len()).filter(|&i| lexicon.covers(&tokens[i])).collect();
    if candidates.is_empty() || ratio <= 0.0 {
        return out;
    }
    let n = perturb_count(ratio, tokens.len()).min(candidates.len());
    let mut pool = candidates;
    for _ in 0..n {
        let slot = stream.gen_range(0..pool.len());
        let pos = pool.swap_remove(slot);
        let syns = lexicon.synonyms(&tokens[pos]).expect("covered token");
        out[pos] = syns[stream.gen_range(0..syns.len())].clone();
    }
    out
}

/// Inserts synonyms of random covered tokens at random positions.
pub fn random_insert(
    tokens: &[String],
    ratio: f64,
    lexicon: &SynonymLexicon,
    stream: &mut Stream,
) -> Vec<String> {
    let mut out = tokens.to_vec();
    let covered: Vec<usize> =
        (0..tokens.len()).filter(|&i| lexicon.covers(&tokens[i])).collect();
    if covered.is_empty() || ratio <= 0.0 {
        return out;
    }
    let n = perturb_count(ratio, tokens.len());
    for _ in 0..n {
        let src = covered[stream.gen_range(0..covered.len())];
        let syns = lexicon.synonyms(&tokens[src]).expect("covered token");
        let syn = syns[stream.gen_range(0..syns.len())].clone();
        let at = stream.gen_range(0..=out.len());
        out.insert(at, syn);
    }
    out
}

/// Swaps ceil(ratio * len) pairs of distinct positions.
pub fn random_swap(tokens: &[String], ratio: f64, stream: &mut Stream) -> Vec<String> {
    let mut out = tokens.to_vec();
    if tokens.len() < 2 || ratio <= 0.0 {
        return out;
    }
    for _ in 0..perturb_count(ratio, tokens.len()) {
        let i = stream.gen_range(0..out.len());
        let mut j = stream.gen_range(0..out.len() - 1);
        if j >= i {
            j += 1;
        }
        out.swap(i, j);
    }
    out
}

/// Drops each token independently with probability `prob`; if everything
/// would be dropped, one uniformly chosen token survives.
pub fn random_delete(tokens: &[String], prob: f64, stream: &mut Stream) -> Vec<String> {
    let kept: Vec<String> = tokens
        .iter()
        .filter(|_| stream.gen::<f64>() >= prob)
        .cloned()
        .collect();
    if kept.is_empty() {
        let survivor = stream.gen_range(0..tokens.len());
        return vec![tokens[survivor].clone()];
    }
    kept
}

/// Tokenized paraphrase of the example, falling back to the original tokens
/// when the id or variant is missing.
pub fn lookup_paraphrase(
    example: &Example,
    variant_index: usize,
    table: &ParaphraseTable,
) -> Vec<String> {
    match table.get(example.id).and_then(|v| v.get(variant_index)) {
        Some(text) => tokenize(text),
        None => example.tokens.clone(),
    }
}

/// One perturbed variant of an example: the token sequence plus an optional
/// deferred embedding-noise sigma (from `GaussianNoise`).
#[derive(Debug, Clone)]
pub struct PerturbedSample {
    pub tokens: Vec<String>,
    pub noise_sigma: Option<f64>,
}

/// Applies a plan to one example, producing N perturbed samples in plan
/// order. The source example is never mutated.
pub fn apply_plan(
    example: &Example,
    plan: &PerturbationPlan,
    lexicon: &SynonymLexicon,
    table: &ParaphraseTable,
    stream: &mut Stream,
) -> Vec<PerturbedSample> {
    plan.ops
        .iter()
        .map(|op| match *op {
            PerturbationOp::SynonymReplace { ratio } => PerturbedSample {
                tokens: synonym_replace(&example.tokens, ratio, lexicon, stream),
                noise_sigma: None,
            },
            PerturbationOp::RandomInsert { ratio } => PerturbedSample {
                tokens: random_insert(&example.tokens, ratio, lexicon, stream),
                noise_sigma: None,
            },
            PerturbationOp::RandomSwap { ratio } => PerturbedSample {
                tokens: random_swap(&example.tokens, ratio, stream),
                noise_sigma: None,
            },
            PerturbationOp::RandomDelete { prob } => PerturbedSample {
                tokens: random_delete(&example.tokens, prob, stream),
                noise_sigma: None,
            },
            PerturbationOp::ParaphraseLookup { variant_index } => PerturbedSample {
                tokens: lookup_paraphrase(example, variant_index, table),
                noise_sigma: None,
            },
            PerturbationOp::GaussianNoise { sigma } => PerturbedSample {
                tokens: example.tokens.clone(),
                noise_sigma: Some(sigma),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn lexicon(pairs: &[(&str, &[&str])]) -> SynonymLexicon {
        let entries = pairs
            .iter()
            .map(|(w, syns)| {
                (w.to_string(), syns.iter().map(|s| s.to_string()).collect())
            })
            .collect();
        SynonymLexicon::new(entries).unwrap()
    }

    #[test]
    fn lexicon_rejects_self_synonym() {
        let entries: BTreeMap<String, Vec<String>> =
            [("good".to_string(), vec!["good".to_string()])].into();
        assert!(SynonymLexicon::new(entries).is_err());
    }

    #[test]
    fn sample_operations_singleton_pool() {
        let pool = vec![PerturbationOp::RandomSwap { ratio: 0.1 }];
        let mut s = rng::derive(1, "ops");
        let plan = sample_operations(&pool, 3, &mut s).unwrap();
        assert_eq!(plan.ops.len(), 3);
        assert!(plan.ops.iter().all(|o| *o == pool[0]));
    }

    #[test]
    fn sample_operations_deterministic() {
        let pool = vec![
            PerturbationOp::RandomSwap { ratio: 0.1 },
            PerturbationOp::RandomDelete { prob: 0.1 },
        ];
        let a = sample_operations(&pool, 5, &mut rng::derive(2, "ops")).unwrap();
        let b = sample_operations(&pool, 5, &mut rng::derive(2, "ops")).unwrap();
        assert_eq!(a.ops, b.ops);
    }

    #[test]
    fn sample_operations_roughly_uniform() {
        let pool = vec![
            PerturbationOp::SynonymReplace { ratio: 0.1 },
            PerturbationOp::RandomInsert { ratio: 0.1 },
            PerturbationOp::RandomSwap { ratio: 0.1 },
            PerturbationOp::RandomDelete { prob: 0.1 },
        ];
        let mut s = rng::derive(3, "ops");
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let plan = sample_operations(&pool, 1, &mut s).unwrap();
            let idx = pool.iter().position(|o| *o == plan.ops[0]).unwrap();
            counts[idx] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn sample_operations_empty_pool_errors() {
        assert!(sample_operations(&[], 1, &mut rng::derive(0, "ops")).is_err());
    }

    #[test]
    fn synonym_replace_zero_ratio_identity() {
        let lex = lexicon(&[("good", &["great"])]);
        let t = toks("good movie");
        let out = synonym_replace(&t, 0.0, &lex, &mut rng::derive(0, "sr"));
        assert_eq!(out, t);
    }

    #[test]
    fn synonym_replace_forced() {
        let lex = lexicon(&[("good", &["great"])]);
        let out = synonym_replace(&toks("good"), 1.0, &lex, &mut rng::derive(0, "sr"));
        assert_eq!(out, toks("great"));
    }

    #[test]
    fn synonym_replace_no_hits_unchanged() {
        let lex = lexicon(&[("good", &["great"])]);
        let t = toks("bad film");
        let out = synonym_replace(&t, 1.0, &lex, &mut rng::derive(0, "sr"));
        assert_eq!(out, t);
    }

    #[test]
    fn random_insert_count_contract() {
        let lex = lexicon(&[("a", &["b"]), ("c", &["d"])]);
        let t = toks("a c a c");
        let out = random_insert(&t, 0.5, &lex, &mut rng::derive(0, "ri"));
        assert_eq!(out.len(), t.len() + 2); // ceil(0.5 * 4)
        // insertion-only: original multiset is a sub-multiset of the result
        let mut remaining = out.clone();
        for tok in &t {
            let pos = remaining.iter().position(|x| x == tok).expect("token kept");
            remaining.remove(pos);
        }
    }

    #[test]
    fn random_swap_preserves_multiset() {
        let t = toks("a b c d e");
        let mut out = random_swap(&t, 0.6, &mut rng::derive(0, "rs"));
        out.sort();
        let mut sorted = t.clone();
        sorted.sort();
        assert_eq!(out, sorted);
    }

    #[test]
    fn random_swap_single_token_unchanged() {
        let t = toks("a");
        assert_eq!(random_swap(&t, 1.0, &mut rng::derive(0, "rs")), t);
    }

    #[test]
    fn random_delete_floor_rule() {
        let t = toks("x y z");
        let out = random_delete(&t, 1.0, &mut rng::derive(0, "rd"));
        assert_eq!(out.len(), 1);
        assert!(t.contains(&out[0]));
    }

    #[test]
    fn random_delete_expected_survivors() {
        let t = toks("a b c d e f g h i j");
        let mut s = rng::derive(4, "rd");
        let mut total = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            total += random_delete(&t, 0.3, &mut s).len();
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 7.0).abs() < 0.1, "mean surviving length {mean}");
    }

    fn example(id: usize, text: &str) -> Example {
        Example { id, tokens: toks(text), label: 0, raw_text: text.to_string() }
    }

    #[test]
    fn paraphrase_lookup_and_fallbacks() {
        let mut entries = BTreeMap::new();
        entries.insert(5, vec!["a fine film".to_string()]);
        let table = ParaphraseTable { entries };

        let hit = example(5, "good movie");
        assert_eq!(lookup_paraphrase(&hit, 0, &table), toks("a fine film"));
        // variant index past the stored list falls back
        assert_eq!(lookup_paraphrase(&hit, 3, &table), hit.tokens);
        // absent id falls back
        let miss = example(9, "good movie");
        assert_eq!(lookup_paraphrase(&miss, 0, &table), miss.tokens);
    }

    #[test]
    fn apply_plan_composition() {
        let lex = lexicon(&[("good", &["great"])]);
        let table = ParaphraseTable::default();
        let ex = example(1, "good movie");
        let plan = PerturbationPlan {
            ops: vec![
                PerturbationOp::SynonymReplace { ratio: 1.0 },
                PerturbationOp::RandomDelete { prob: 1.0 },
            ],
        };
        let out = apply_plan(&ex, &plan, &lex, &table, &mut rng::derive(0, "ap"));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].tokens, toks("great movie"));
        assert_eq!(out[1].tokens.len(), 1);
        assert!(ex.tokens.contains(&out[1].tokens[0]));
        assert_eq!(ex.tokens, toks("good movie")); // source untouched
    }

    #[test]
    fn apply_plan_zero_strength_copies() {
        let lex = SynonymLexicon::default();
        let table = ParaphraseTable::default();
        let ex = example(1, "good movie");
        let plan = PerturbationPlan {
            ops: vec![
                PerturbationOp::RandomSwap { ratio: 0.0 },
                PerturbationOp::RandomDelete { prob: 0.0 },
                PerturbationOp::GaussianNoise { sigma: 0.0 },
            ],
        };
        let out = apply_plan(&ex, &plan, &lex, &table, &mut rng::derive(0, "ap"));
        assert_eq!(out.len(), 3);
        for s in &out {
            assert_eq!(s.tokens, ex.tokens);
        }
        assert_eq!(out[2].noise_sigma, Some(0.0));
    }
}
