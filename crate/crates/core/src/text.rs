//! Tokenization, vocabulary, dataset loading, subsampling and batching.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{IntTensor, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token-to-id map with reserved PAD (0) and UNK (1) slots.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// FNV-1a over the id-ordered token list; stored in checkpoints so a
    /// model is never evaluated against a mismatched vocabulary.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.id_to_token {
            for b in t.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    /// Id-ordered token list, suitable for persisting next to a checkpoint.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuilds a vocabulary from an id-ordered token list (see [`Self::tokens`]).
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < 2
            || id_to_token[PAD_ID] != "<pad>"
            || id_to_token[UNK_ID] != "<unk>"
        {
            return Err(Error::Data(
                "vocabulary list must start with <pad>, <unk>".to_string(),
            ));
        }
        let token_to_id: BTreeMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Data("vocabulary list contains duplicates".to_string()));
        }
        Ok(Self { token_to_id, id_to_token })
    }
}

/// Lowercases, splits punctuation into separate tokens, splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_ascii_punctuation() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Builds a vocabulary from training texts. Ids are assigned by descending
/// frequency, ties broken lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if min_freq < 1 {
        return Err(Error::Contract("build_vocab: min_freq must be >= 1".to_string()));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut saw_any = false;
    for tokens in corpus {
        saw_any = true;
        for t in tokens {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(Error::Data("build_vocab: empty corpus".to_string()));
    }
    let mut entries: Vec<(&str, usize)> =
        freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
    id_to_token.extend(entries.iter().map(|(t, _)| t.to_string()));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary { token_to_id, id_to_token })
}

/// One tokenized, labeled training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: usize,
    pub tokens: Vec<String>,
    pub label: usize,
    pub raw_text: String,
}

#[derive(Deserialize)]
struct RawLine {
    text: String,
    label: String,
}

/// Loaded dataset plus its label-string-to-index map.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub label_map: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Loads a JSONL dataset: one `{"text": ..., "label": ...}` object per line.
///
/// Without a supplied map, labels are indexed by lexicographic order of the
/// distinct label strings. Line number (1-based) becomes the example id.
pub fn load_dataset(
    path: &Path,
    label_map: Option<&BTreeMap<String, usize>>,
    max_seq_len: usize,
) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut raw = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RawLine = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}: line {lineno}: {e}", path.display()))
        })?;
        raw.push((lineno, parsed));
    }

    let owned_map;
    let map = match label_map {
        Some(m) => m,
        None => {
            let mut labels: Vec<&str> = raw.iter().map(|(_, r)| r.label.as_str()).collect();
            labels.sort_unstable();
            labels.dedup();
            owned_map = labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l.to_string(), i))
                .collect::<BTreeMap<_, _>>();
            &owned_map
        }
    };

    let mut examples = Vec::with_capacity(raw.len());
    for (lineno, r) in raw {
        let label = *map.get(&r.label).ok_or_else(|| {
            Error::Data(format!(
                "{}: line {lineno}: unknown label {:?}",
                path.display(),
                r.label
            ))
        })?;
        let mut tokens = tokenize(&r.text);
        if tokens.is_empty() {
            return Err(Error::Data(format!(
                "{}: line {lineno}: text tokenizes to nothing",
                path.display()
            )));
        }
        tokens.truncate(max_seq_len);
        examples.push(Example { id: lineno, tokens, label, raw_text: r.text });
    }
    Ok(Dataset { examples, label_map: map.clone() })
}

/// Stratified uniform subsample without replacement, deterministic per seed.
///
/// Per-class counts are proportional to class frequency; leftover slots go to
/// the largest classes first.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = dataset.len();
    if n > total {
        return Err(Error::Contract(format!(
            "subsample: requested {n} of {total} examples"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in dataset.examples.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(idx);
    }
    // Order-invariance: sort class members by stable example id.
    for members in by_class.values_mut() {
        members.sort_by_key(|&i| dataset.examples[i].id);
    }

    let mut quota: BTreeMap<usize, usize> = BTreeMap::new();
    let mut assigned = 0;
    for (&class, members) in &by_class {
        let q = n * members.len() / total;
        quota.insert(class, q);
        assigned += q;
    }
    // Remainder to the largest classes first (ties by class index).
    let mut order: Vec<usize> = by_class.keys().copied().collect();
    order.sort_by(|a, b| {
        by_class[b].len().cmp(&by_class[a].len()).then_with(|| a.cmp(b))
    });
    let mut i = 0;
    while assigned < n {
        let class = order[i % order.len()];
        if quota[&class] < by_class[&class].len() {
            *quota.get_mut(&class).unwrap() += 1;
            assigned += 1;
        }
        i += 1;
    }

    let mut stream = rng::derive(seed, "subsample");
    let mut picked = Vec::with_capacity(n);
    for (&class, members) in &by_class {
        let mut pool = members.clone();
        pool.shuffle(&mut stream);
        picked.extend(pool.into_iter().take(quota[&class]));
    }
    picked.sort_unstable();
    Ok(Dataset {
        examples: picked.into_iter().map(|i| dataset.examples[i].clone()).collect(),
        label_map: dataset.label_map.clone(),
    })
}

/// Padded mini-batch. `mask` is 1.0 exactly on non-PAD positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: IntTensor,
    pub mask: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the batch members, in batch order.
    pub members: Vec<usize>,
}

/// Pads token-id rows to a common length and builds the mask.
pub fn pad_batch(rows: &[Vec<usize>], labels: &[usize], members: &[usize], seq: usize) -> Batch {
    let b = rows.len();
    let mut ids = vec![PAD_ID; b * seq];
    let mut mask = vec![0.0; b * seq];
    for (r, row) in rows.iter().enumerate() {
        for (p, &id) in row.iter().enumerate() {
            ids[r * seq + p] = id;
            mask[r * seq + p] = 1.0;
        }
    }
    Batch {
        ids: IntTensor::new(vec![b, seq], ids).expect("batch shape"),
        mask: Tensor::new(vec![b, seq], mask).expect("mask shape"),
        labels: labels.to_vec(),
        members: members.to_vec(),
    }
}

/// Deterministic per-epoch batch order: epoch `e` reshuffles from
/// `shuffle_seed + e`. The last partial batch is kept. Per-batch seq extent
/// is the longest example in that batch.
pub fn batch_iter(
    dataset: &Dataset,
    vocab: &Vocabulary,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut stream = rng::derive_indexed(shuffle_seed, "batch_shuffle", epoch);
    order.shuffle(&mut stream);

    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| vocab.encode(&dataset.examples[i].tokens))
                .collect();
            let labels: Vec<usize> =
                chunk.iter().map(|&i| dataset.examples[i].label).collect();
            let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
            pad_batch(&rows, &labels, chunk, seq)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("Good movie!"), vec!["good", "movie", "!"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("A  b\tc"), vec!["a", "b", "c"]);
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn vocab_frequency_order() {
        let corpus = [toks("a a b")];
        let refs: Vec<&[String]> = corpus.iter().map(Vec::as_slice).collect();
        let v = build_vocab(refs, 1).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn vocab_min_freq_threshold() {
        let corpus = [toks("a a b")];
        let refs: Vec<&[String]> = corpus.iter().map(Vec::as_slice).collect();
        let v = build_vocab(refs, 3).unwrap();
        assert_eq!(v.len(), 2); // only PAD/UNK survive
        assert_eq!(v.id("a"), UNK_ID);
    }

    #[test]
    fn vocab_tie_is_lexicographic() {
        let corpus = [toks("zeta apple")];
        let refs: Vec<&[String]> = corpus.iter().map(Vec::as_slice).collect();
        let v = build_vocab(refs, 1).unwrap();
        assert_eq!(v.id("apple"), 2);
        assert_eq!(v.id("zeta"), 3);
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        let refs: Vec<&[String]> = Vec::new();
        assert!(build_vocab(refs, 1).is_err());
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn labels_map_lexicographically() {
        let f = write_jsonl(&[
            r#"{"text": "fine film", "label": "pos"}"#,
            r#"{"text": "bad film", "label": "neg"}"#,
        ]);
        let ds = load_dataset(f.path(), None, 64).unwrap();
        assert_eq!(ds.label_map["neg"], 0);
        assert_eq!(ds.label_map["pos"], 1);
        assert_eq!(ds.examples[0].id, 1);
    }

    #[test]
    fn three_class_labels() {
        let f = write_jsonl(&[
            r#"{"text": "a", "label": "neutral"}"#,
            r#"{"text": "b", "label": "entailment"}"#,
            r#"{"text": "c", "label": "contradiction"}"#,
        ]);
        let ds = load_dataset(f.path(), None, 64).unwrap();
        assert_eq!(ds.label_map["contradiction"], 0);
        assert_eq!(ds.label_map["entailment"], 1);
        assert_eq!(ds.label_map["neutral"], 2);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_jsonl(&[
            r#"{"text": "ok", "label": "a"}"#,
            r#"not json"#,
        ]);
        let err = load_dataset(f.path(), None, 64).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_label_under_supplied_map() {
        let f = write_jsonl(&[r#"{"text": "x", "label": "mystery"}"#]);
        let map: BTreeMap<String, usize> = [("a".to_string(), 0)].into();
        assert!(load_dataset(f.path(), Some(&map), 64).is_err());
    }

    fn toy_dataset(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example {
                id: i + 1,
                tokens: toks("some words here"),
                label: i % 2,
                raw_text: "some words here".to_string(),
            })
            .collect();
        let label_map = [("a".to_string(), 0), ("b".to_string(), 1)].into();
        Dataset { examples, label_map }
    }

    #[test]
    fn subsample_full_is_permutation() {
        let ds = toy_dataset(10);
        let s = subsample(&ds, 10, 3).unwrap();
        let mut ids: Vec<usize> = s.examples.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_stratifies() {
        let ds = toy_dataset(10);
        let s = subsample(&ds, 2, 3).unwrap();
        let labels: Vec<usize> = s.examples.iter().map(|e| e.label).collect();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 1);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 1);
    }

    #[test]
    fn subsample_deterministic_and_order_invariant() {
        let ds = toy_dataset(10);
        let a: Vec<usize> = subsample(&ds, 4, 7).unwrap().examples.iter().map(|e| e.id).collect();
        let b: Vec<usize> = subsample(&ds, 4, 7).unwrap().examples.iter().map(|e| e.id).collect();
        assert_eq!(a, b);

        let mut shuffled = ds.clone();
        shuffled.examples.reverse();
        let mut c: Vec<usize> =
            subsample(&shuffled, 4, 7).unwrap().examples.iter().map(|e| e.id).collect();
        c.sort_unstable();
        let mut a_sorted = a.clone();
        a_sorted.sort_unstable();
        assert_eq!(a_sorted, c);
    }

    #[test]
    fn subsample_too_large_errors() {
        let ds = toy_dataset(4);
        assert!(subsample(&ds, 5, 0).is_err());
    }

    #[test]
    fn batches_cover_dataset_with_partial_tail() {
        let ds = toy_dataset(10);
        let corpus: Vec<&[String]> = ds.examples.iter().map(|e| e.tokens.as_slice()).collect();
        let vocab = build_vocab(corpus, 1).unwrap();
        let batches = batch_iter(&ds, &vocab, 4, 11, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn mask_sums_match_lengths() {
        let ds = toy_dataset(5);
        let corpus: Vec<&[String]> = ds.examples.iter().map(|e| e.tokens.as_slice()).collect();
        let vocab = build_vocab(corpus, 1).unwrap();
        for b in batch_iter(&ds, &vocab, 2, 11, 0) {
            let seq = b.ids.shape()[1];
            for (r, &m) in b.members.iter().enumerate() {
                let row_sum: f64 = b.mask.data()[r * seq..(r + 1) * seq].iter().sum();
                assert_eq!(row_sum as usize, ds.examples[m].tokens.len());
            }
        }
    }

    #[test]
    fn epochs_reshuffle_reproducibly() {
        let ds = toy_dataset(10);
        let corpus: Vec<&[String]> = ds.examples.iter().map(|e| e.tokens.as_slice()).collect();
        let vocab = build_vocab(corpus, 1).unwrap();
        let order = |epoch| {
            batch_iter(&ds, &vocab, 4, 5, epoch)
                .iter()
                .flat_map(|b| b.members.clone())
                .collect::<Vec<_>>()
        };
        assert_ne!(order(0), order(1));
        assert_eq!(order(0), order(0));
        assert_eq!(order(1), order(1));
    }
}
