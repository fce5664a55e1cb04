//! Generator for a two-class dataset built from two word-distribution
//! templates, plus a label-preserving synonym lexicon over the template
//! vocabulary. Used by the directional experiments and sanity tests.

use std::collections::BTreeMap;

use rand::Rng;

use crate::augment::SynonymLexicon;
use crate::rng::{self, Stream};
use crate::text::{Dataset, Example};

const FILLERS: [&str; 4] = ["the", "a", "of", "it"];

// Each class template draws content words from one column; the second column
// holds that word's synonym, so replacement stays inside the class vocabulary.
const CLASS_WORDS: [[(&str, &str); 8]; 2] = [
    [
        ("bright", "shiny"),
        ("calm", "serene"),
        ("gentle", "soft"),
        ("warm", "cozy"),
        ("clear", "lucid"),
        ("kind", "friendly"),
        ("fresh", "crisp"),
        ("quick", "swift"),
    ],
    [
        ("dark", "gloomy"),
        ("harsh", "rough"),
        ("cold", "chilly"),
        ("slow", "sluggish"),
        ("murky", "cloudy"),
        ("bitter", "sour"),
        ("stale", "musty"),
        ("loud", "noisy"),
    ],
];

/// Synonym lexicon pairing every template word with its same-class partner.
pub fn lexicon() -> SynonymLexicon {
    let mut entries = BTreeMap::new();
    for class in &CLASS_WORDS {
        for &(a, b) in class {
            entries.insert(a.to_string(), vec![b.to_string()]);
            entries.insert(b.to_string(), vec![a.to_string()]);
        }
    }
    SynonymLexicon::new(entries).expect("static lexicon is valid")
}

fn sentence(label: usize, stream: &mut Stream) -> Vec<String> {
    let len = stream.gen_range(6..=12);
    (0..len)
        .map(|_| {
            if stream.gen_bool(0.3) {
                FILLERS[stream.gen_range(0..FILLERS.len())].to_string()
            } else {
                let (a, b) = CLASS_WORDS[label][stream.gen_range(0..8)];
                if stream.gen_bool(0.5) { a.to_string() } else { b.to_string() }
            }
        })
        .collect()
}

fn generate(n: usize, stream: &mut Stream, first_id: usize) -> Dataset {
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            let tokens = sentence(label, stream);
            Example {
                id: first_id + i,
                raw_text: tokens.join(" "),
                tokens,
                label,
            }
        })
        .collect();
    let mut label_map = BTreeMap::new();
    label_map.insert("class_a".to_string(), 0);
    label_map.insert("class_b".to_string(), 1);
    Dataset { examples, label_map }
}

/// Builds train / dev / test splits (dev and test both `n_eval` examples)
/// and the matching lexicon. Classes are exactly balanced in every split.
pub fn make(
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> (Dataset, Dataset, Dataset, SynonymLexicon) {
    let mut stream = rng::derive(seed, "synthetic");
    let train = generate(n_train, &mut stream, 1);
    let dev = generate(n_eval, &mut stream, n_train + 1);
    let test = generate(n_eval, &mut stream, n_train + n_eval + 1);
    (train, dev, test, lexicon())
}
