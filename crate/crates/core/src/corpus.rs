//! Synthetic parallel corpora with deterministic generation.
//!
//! Token ids are shared across tasks: 0..=3 are reserved (PAD, BOS, EOS,
//! UNK) and content ids start at 4. A corpus is a list of (source, target)
//! id sequences; persistence is one tab-separated pair per line with
//! space-separated decimal ids.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// First non-reserved token id.
pub const FIRST_CONTENT: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Each source token maps to one of `synonyms` target tokens, and each
    /// emitted token is replaced by a uniform content token with
    /// probability `noise`.
    SynonymNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Synonym fan-out `k`; only meaningful for `SynonymNoise`.
    #[serde(default = "one")]
    pub synonyms: usize,
    /// Replacement noise rate; only meaningful for `SynonymNoise`.
    #[serde(default)]
    pub noise: f64,
    pub pairs: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("src_vocab", self.src_vocab), ("tgt_vocab", self.tgt_vocab)] {
            if v <= FIRST_CONTENT as usize {
                return Err(Error::Config(format!(
                    "{} must exceed the {} reserved ids, got {}",
                    name, FIRST_CONTENT, v
                )));
            }
        }
        if self.len_min < 1 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "lengths must satisfy 1 <= min <= max, got [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                if self.src_vocab != self.tgt_vocab {
                    return Err(Error::Config(
                        "copy and reverse need equal source and target vocabs".into(),
                    ));
                }
                if self.noise != 0.0 {
                    return Err(Error::Config(
                        "replacement noise applies only to the synonym task".into(),
                    ));
                }
            }
            TaskKind::SynonymNoise => {
                let content = self.tgt_vocab - FIRST_CONTENT as usize;
                if self.synonyms < 1
                    || self.synonyms > self.tgt_vocab / 2
                    || self.synonyms > content
                {
                    return Err(Error::Config(format!(
                        "synonym fan-out {} outside 1..={} for target vocab {}",
                        self.synonyms,
                        (self.tgt_vocab / 2).min(content),
                        self.tgt_vocab
                    )));
                }
                if !(0.0..=1.0).contains(&self.noise) {
                    return Err(Error::Config(format!(
                        "noise rate must be in [0, 1], got {}",
                        self.noise
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_token(&self) -> u32 {
        self.pairs
            .iter()
            .flat_map(|(s, t)| s.iter().chain(t.iter()))
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.pairs
            .iter()
            .map(|(s, t)| s.len().max(t.len()))
            .max()
            .unwrap_or(0)
    }
}

/// Train/dev/test, generated with seeds `seed`, `seed + 1`, `seed + 2` so
/// the splits are disjoint streams. Dev and test each take 10% of `pairs`
/// (rounded down).
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Synonym table indexed by `source_token - FIRST_CONTENT`; each entry
/// lists `k` distinct target content tokens. Built from `spec.seed` alone,
/// so every split shares one table. Entries of different sources may
/// overlap.
pub fn synonym_map(spec: &TaskSpec) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    let content = spec.tgt_vocab - FIRST_CONTENT as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let sources = spec.src_vocab - FIRST_CONTENT as usize;
    let mut map = Vec::with_capacity(sources);
    for _ in 0..sources {
        let picks = rand::seq::index::sample(&mut rng, content, spec.synonyms);
        map.push(picks.into_iter().map(|i| i as u32 + FIRST_CONTENT).collect());
    }
    Ok(map)
}

fn generate_split(
    spec: &TaskSpec,
    synonyms: &[Vec<u32>],
    seed: u64,
    count: usize,
) -> ParallelCorpus {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let src_content = FIRST_CONTENT..spec.src_vocab as u32;
    let tgt_content = FIRST_CONTENT..spec.tgt_vocab as u32;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(spec.len_min..=spec.len_max);
        let src: Vec<u32> = (0..len).map(|_| rng.gen_range(src_content.clone())).collect();
        let tgt: Vec<u32> = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::SynonymNoise => src
                .iter()
                .map(|&s| {
                    let set = &synonyms[(s - FIRST_CONTENT) as usize];
                    let pick = set[rng.gen_range(0..set.len())];
                    if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                        rng.gen_range(tgt_content.clone())
                    } else {
                        pick
                    }
                })
                .collect(),
        };
        pairs.push((src, tgt));
    }
    ParallelCorpus { pairs }
}

/// Generate all three splits for a task. Same spec, same output.
pub fn generate_task(spec: &TaskSpec) -> Result<DataSplits> {
    spec.validate()?;
    let synonyms = match spec.kind {
        TaskKind::SynonymNoise => synonym_map(spec)?,
        _ => Vec::new(),
    };
    let n_dev = spec.pairs / 10;
    let n_test = spec.pairs / 10;
    let n_train = spec.pairs - n_dev - n_test;
    Ok(DataSplits {
        train: generate_split(spec, &synonyms, spec.seed, n_train),
        dev: generate_split(spec, &synonyms, spec.seed.wrapping_add(1), n_dev),
        test: generate_split(spec, &synonyms, spec.seed.wrapping_add(2), n_test),
    })
}

/// One `source<TAB>target` line per pair, ids space-separated.
pub fn save_tsv(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (src, tgt) in &corpus.pairs {
        writeln!(w, "{}\t{}", join_ids(src), join_ids(tgt))?;
    }
    w.flush()?;
    Ok(())
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn load_tsv(path: &Path) -> Result<ParallelCorpus> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let mut fields = line.split('\t');
        let (src, tgt) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(t), None) => (s, t),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected exactly one tab per line".into(),
                })
            }
        };
        pairs.push((parse_ids(src, lineno)?, parse_ids(tgt, lineno)?));
    }
    Ok(ParallelCorpus { pairs })
}

fn parse_ids(field: &str, lineno: usize) -> Result<Vec<u32>> {
    field
        .split_whitespace()
        .map(|tok| {
            tok.parse::<u32>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad token id {:?}", tok),
            })
        })
        .collect()
}

/// A shuffled slice of the corpus, padded to its own longest row. Padding
/// sits at the end of each row, beyond the recorded lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Source row without padding.
    pub fn src_row(&self, i: usize) -> &[u32] {
        &self.src[i][..self.src_lens[i]]
    }

    /// Target row without padding.
    pub fn tgt_row(&self, i: usize) -> &[u32] {
        &self.tgt[i][..self.tgt_lens[i]]
    }
}

/// Deterministic epoch batching: shuffle pair indices with `seed`, then cut
/// into consecutive batches (the last may be short).
pub fn batch_iter(corpus: &ParallelCorpus, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Data("cannot batch an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let rows: Vec<&(Vec<u32>, Vec<u32>)> = chunk.iter().map(|&i| &corpus.pairs[i]).collect();
        let src_max = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let tgt_max = rows.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut batch = Batch {
            src: Vec::with_capacity(rows.len()),
            tgt: Vec::with_capacity(rows.len()),
            src_lens: Vec::with_capacity(rows.len()),
            tgt_lens: Vec::with_capacity(rows.len()),
        };
        for (s, t) in rows {
            batch.src_lens.push(s.len());
            batch.tgt_lens.push(t.len());
            let mut sp = s.clone();
            sp.resize(src_max, PAD);
            let mut tp = t.clone();
            tp.resize(tgt_max, PAD);
            batch.src.push(sp);
            batch.tgt.push(tp);
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            src_vocab: 32,
            tgt_vocab: 32,
            len_min: 3,
            len_max: 8,
            synonyms: 2,
            noise: 0.0,
            pairs: 200,
            seed: 7,
        }
    }

    #[test]
    fn copy_targets_equal_sources() {
        let splits = generate_task(&spec(TaskKind::Copy)).unwrap();
        assert_eq!(splits.train.len(), 160);
        assert_eq!(splits.dev.len(), 20);
        assert_eq!(splits.test.len(), 20);
        for (s, t) in &splits.train.pairs {
            assert_eq!(s, t);
            assert!(s.len() >= 3 && s.len() <= 8);
            assert!(s.iter().all(|&tok| (4..32).contains(&tok)));
        }
    }

    #[test]
    fn reverse_targets_are_reversed_sources() {
        let splits = generate_task(&spec(TaskKind::Reverse)).unwrap();
        for (s, t) in &splits.train.pairs {
            let mut r = s.clone();
            r.reverse();
            assert_eq!(&r, t);
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let a = generate_task(&spec(TaskKind::Copy)).unwrap();
        let b = generate_task(&spec(TaskKind::Copy)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train.pairs[..20], a.dev.pairs[..]);
    }

    #[test]
    fn synonym_map_is_shared_and_well_formed() {
        let mut sp = spec(TaskKind::SynonymNoise);
        sp.noise = 0.05;
        let map = synonym_map(&sp).unwrap();
        assert_eq!(map.len(), 28);
        for set in &map {
            assert_eq!(set.len(), 2);
            assert_ne!(set[0], set[1]);
            assert!(set.iter().all(|&t| (4..32).contains(&t)));
        }
        assert_eq!(map, synonym_map(&sp).unwrap());
    }

    #[test]
    fn noiseless_synonym_targets_always_come_from_the_map() {
        let mut sp = spec(TaskKind::SynonymNoise);
        sp.noise = 0.0;
        let map = synonym_map(&sp).unwrap();
        let splits = generate_task(&sp).unwrap();
        for corpus in [&splits.train, &splits.dev, &splits.test] {
            for (s, t) in &corpus.pairs {
                assert_eq!(s.len(), t.len());
                for (&st, &tt) in s.iter().zip(t) {
                    assert!(map[(st - 4) as usize].contains(&tt));
                }
            }
        }
    }

    #[test]
    fn noise_rate_matches_the_out_of_map_frequency() {
        // A replacement only lands outside the source's synonym set with
        // probability 1 - k/content, so the observable out-of-map rate is
        // noise * (1 - 2/28) ~ 0.2786 at noise = 0.3.
        let mut sp = spec(TaskKind::SynonymNoise);
        sp.noise = 0.3;
        sp.pairs = 4000;
        let map = synonym_map(&sp).unwrap();
        let splits = generate_task(&sp).unwrap();
        let mut total = 0usize;
        let mut outside = 0usize;
        for (s, t) in &splits.train.pairs {
            for (&st, &tt) in s.iter().zip(t) {
                total += 1;
                if !map[(st - 4) as usize].contains(&tt) {
                    outside += 1;
                }
            }
        }
        let rate = outside as f64 / total as f64;
        let expect = 0.3 * (1.0 - 2.0 / 28.0);
        assert!((rate - expect).abs() < 0.02, "rate {} expect {}", rate, expect);
    }

    #[test]
    fn tsv_round_trip_preserves_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let splits = generate_task(&spec(TaskKind::Reverse)).unwrap();
        save_tsv(&splits.train, &path).unwrap();
        let loaded = load_tsv(&path).unwrap();
        assert_eq!(loaded, splits.train);
    }

    #[test]
    fn malformed_tsv_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "4 5\t6 7\nno tabs here\n").unwrap();
        match load_tsv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other),
        }
        std::fs::write(&path, "4 x\t6\n").unwrap();
        match load_tsv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn batches_cover_the_corpus_once_with_padding_at_the_end() {
        let splits = generate_task(&spec(TaskKind::Copy)).unwrap();
        let corpus = &splits.train;
        let batches = batch_iter(corpus, 7, 99).unwrap();
        assert_eq!(batches.len(), 160usize.div_ceil(7));
        let mut seen: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
        for b in &batches {
            assert_eq!(b.src.len(), b.tgt.len());
            for i in 0..b.len() {
                // Rows inside one batch share a width; pads only at the end.
                assert!(b.src[i].len() >= b.src_lens[i]);
                assert!(b.src[i][b.src_lens[i]..].iter().all(|&t| t == PAD));
                assert!(b.tgt[i][b.tgt_lens[i]..].iter().all(|&t| t == PAD));
                seen.push((b.src_row(i).to_vec(), b.tgt_row(i).to_vec()));
            }
        }
        assert_eq!(seen.len(), corpus.len());
        let mut expect = corpus.pairs.clone();
        let mut got = seen;
        expect.sort();
        got.sort();
        assert_eq!(expect, got);
        // Same seed, same order; different seed, different order.
        let again = batch_iter(corpus, 7, 99).unwrap();
        assert_eq!(again[0].src, batches[0].src);
        let other = batch_iter(corpus, 7, 100).unwrap();
        assert_ne!(other[0].src, batches[0].src);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut sp = spec(TaskKind::Copy);
        sp.tgt_vocab = 16;
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
        let mut sp = spec(TaskKind::Copy);
        sp.src_vocab = 4;
        sp.tgt_vocab = 4;
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
        let mut sp = spec(TaskKind::Copy);
        sp.noise = 0.1;
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
        let mut sp = spec(TaskKind::SynonymNoise);
        sp.synonyms = 20;
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
        let mut sp = spec(TaskKind::SynonymNoise);
        sp.noise = 1.5;
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
        let mut sp = spec(TaskKind::Copy);
        sp.len_min = 9;
        assert!(matches!(sp.validate(), Err(Error::Config(_))));
        let empty = ParallelCorpus { pairs: vec![] };
        assert!(matches!(batch_iter(&empty, 4, 0), Err(Error::Data(_))));
        let one = ParallelCorpus { pairs: vec![(vec![4], vec![4])] };
        assert!(matches!(batch_iter(&one, 0, 0), Err(Error::Config(_))));
    }
}
