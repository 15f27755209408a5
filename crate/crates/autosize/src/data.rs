//! Synthetic sequence-to-sequence tasks and batching.
//!
//! Three tasks over a shared token convention: ids 0, 1, 2 are padding,
//! begin-of-sequence, and end-of-sequence; payload tokens are `3..vocab`.
//! `copy` repeats the source, `reverse` mirrors it, `cipher` maps each token
//! through a fixed random permutation of the payload alphabet.
//!
//! Splits draw from per-split ChaCha streams of one seed, and dev/test
//! sources are redrawn until they collide with no earlier split, so models
//! can never score by memorizing training sources. Pairs store payload
//! tokens only; batching appends end-of-sequence to the source and labels
//! and prepends begin-of-sequence to the decoder input.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, BOS_ID, EOS_ID, PAD_ID};

/// Sequence transformation the model must learn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    Cipher,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "cipher" => Ok(Task::Cipher),
            other => Err(Error::Config(format!(
                "unknown task {other}, expected copy, reverse, or cipher"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Cipher => "cipher",
        })
    }
}

/// One source/target pair of payload tokens, no specials.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub task: Task,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: Task::Copy,
            vocab_size: 32,
            min_len: 3,
            max_len: 12,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 4 (three specials plus payload), got {}",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::Config(
                "every split must hold at least one pair".to_string(),
            ));
        }
        Ok(())
    }
}

/// Permutation used by the cipher task: identity on the specials, a seeded
/// shuffle of the payload tokens. Index by token id.
pub fn cipher_permutation(vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut payload: Vec<u32> = (3..vocab_size as u32).collect();
    payload.shuffle(&mut rng);
    let mut out: Vec<u32> = vec![PAD_ID, BOS_ID, EOS_ID];
    out.extend(payload);
    out
}

fn apply_task(task: Task, src: &[u32], cipher: &[u32]) -> Vec<u32> {
    match task {
        Task::Copy => src.to_vec(),
        Task::Reverse => src.iter().rev().copied().collect(),
        Task::Cipher => src.iter().map(|&t| cipher[t as usize]).collect(),
    }
}

/// Generate train/dev/test. Deterministic in the config; later splits
/// reject sources already used by earlier ones.
pub fn generate(config: &DataConfig) -> Result<Splits> {
    config.validate()?;
    let cipher = cipher_permutation(config.vocab_size, config.seed);
    let mut taken: HashSet<Vec<u32>> = HashSet::new();
    let mut make_split = |stream: u64, size: usize, exclusive: bool| -> Result<Vec<SentencePair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let mut out = Vec::with_capacity(size);
        let mut rejections = 0usize;
        while out.len() < size {
            let len = rng.gen_range(config.min_len..=config.max_len);
            let src: Vec<u32> = (0..len)
                .map(|_| rng.gen_range(3..config.vocab_size as u32))
                .collect();
            if exclusive && taken.contains(&src) {
                rejections += 1;
                if rejections > 10_000 {
                    return Err(Error::InvalidInput(
                        "cannot draw disjoint splits: the source space is too small".to_string(),
                    ));
                }
                continue;
            }
            let tgt = apply_task(config.task, &src, &cipher);
            out.push(SentencePair { src, tgt });
        }
        for pair in &out {
            taken.insert(pair.src.clone());
        }
        Ok(out)
    };
    let train = make_split(0, config.train, false)?;
    let dev = make_split(1, config.dev, true)?;
    let test = make_split(2, config.test, true)?;
    Ok(Splits { train, dev, test })
}

/// Pad a group of pairs into one batch: source gains a trailing
/// end-of-sequence, the decoder input starts at begin-of-sequence, and the
/// labels are the target shifted onto end-of-sequence.
pub fn pack_batch(pairs: &[SentencePair]) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "cannot pack an empty batch".to_string(),
        ));
    }
    let src_len = pairs.iter().map(|p| p.src.len()).max().expect("nonempty") + 1;
    let tgt_len = pairs.iter().map(|p| p.tgt.len()).max().expect("nonempty") + 1;
    let n = pairs.len();
    let mut src = vec![PAD_ID; n * src_len];
    let mut dec_in = vec![PAD_ID; n * tgt_len];
    let mut labels = vec![PAD_ID; n * tgt_len];
    for (b, pair) in pairs.iter().enumerate() {
        src[b * src_len..b * src_len + pair.src.len()].copy_from_slice(&pair.src);
        src[b * src_len + pair.src.len()] = EOS_ID;
        dec_in[b * tgt_len] = BOS_ID;
        dec_in[b * tgt_len + 1..b * tgt_len + 1 + pair.tgt.len()].copy_from_slice(&pair.tgt);
        labels[b * tgt_len..b * tgt_len + pair.tgt.len()].copy_from_slice(&pair.tgt);
        labels[b * tgt_len + pair.tgt.len()] = EOS_ID;
    }
    Ok(Batch {
        src,
        dec_in,
        labels,
        batch: n,
        src_len,
        tgt_len,
    })
}

/// Batches in index order (evaluation).
pub fn sequential_batches(pairs: &[SentencePair], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput(
            "batch_size must be positive".to_string(),
        ));
    }
    pairs.chunks(batch_size).map(pack_batch).collect()
}

/// Batches over a seeded shuffle of the pairs (one training epoch). Every
/// pair appears exactly once.
pub fn shuffled_batches(
    pairs: &[SentencePair],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput(
            "batch_size must be positive".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let shuffled: Vec<SentencePair> = order.into_iter().map(|i| pairs[i].clone()).collect();
    shuffled.chunks(batch_size).map(pack_batch).collect()
}

/// One pair per line: source ids, a tab, target ids, space-separated.
pub fn save_pairs(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        let src: Vec<String> = p.src.iter().map(|t| t.to_string()).collect();
        let tgt: Vec<String> = p.tgt.iter().map(|t| t.to_string()).collect();
        text.push_str(&src.join(" "));
        text.push('\t');
        text.push_str(&tgt.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: missing tab separator", lineno + 1)))?;
        let parse_side = |side: &str| -> Result<Vec<u32>> {
            side.split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| Error::Format(format!("line {}: bad token {t}", lineno + 1)))
                })
                .collect()
        };
        let pair = SentencePair {
            src: parse_side(src)?,
            tgt: parse_side(tgt)?,
        };
        if pair.src.is_empty() || pair.tgt.is_empty() {
            return Err(Error::Format(format!(
                "line {}: empty sequence",
                lineno + 1
            )));
        }
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(task: Task) -> DataConfig {
        DataConfig {
            task,
            vocab_size: 16,
            min_len: 2,
            max_len: 6,
            train: 80,
            dev: 30,
            test: 30,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate(&small_config(Task::Reverse)).unwrap();
        let b = generate(&small_config(Task::Reverse)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        let mut other = small_config(Task::Reverse);
        other.seed = 6;
        let c = generate(&other).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn splits_have_requested_sizes_lengths_and_alphabet() {
        let cfg = small_config(Task::Copy);
        let s = generate(&cfg).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 30, 30));
        for pair in s.train.iter().chain(&s.dev).chain(&s.test) {
            assert!((cfg.min_len..=cfg.max_len).contains(&pair.src.len()));
            assert!(pair.src.iter().all(|&t| (3..16).contains(&t)));
            assert!(pair.tgt.iter().all(|&t| (3..16).contains(&t)));
        }
    }

    #[test]
    fn dev_and_test_sources_avoid_earlier_splits() {
        let s = generate(&small_config(Task::Copy)).unwrap();
        let train: HashSet<&Vec<u32>> = s.train.iter().map(|p| &p.src).collect();
        let dev: HashSet<&Vec<u32>> = s.dev.iter().map(|p| &p.src).collect();
        for p in &s.dev {
            assert!(!train.contains(&p.src));
        }
        for p in &s.test {
            assert!(!train.contains(&p.src) && !dev.contains(&p.src));
        }
    }

    #[test]
    fn impossible_disjointness_is_reported() {
        // two payload tokens at length 1: only two possible sources
        let cfg = DataConfig {
            task: Task::Copy,
            vocab_size: 5,
            min_len: 1,
            max_len: 1,
            train: 2,
            dev: 2,
            test: 1,
            seed: 0,
        };
        assert!(matches!(generate(&cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn copy_and_reverse_targets_match_their_rule() {
        let s = generate(&small_config(Task::Copy)).unwrap();
        for p in &s.train {
            assert_eq!(p.tgt, p.src);
        }
        let s = generate(&small_config(Task::Reverse)).unwrap();
        for p in &s.train {
            let mut r = p.src.clone();
            r.reverse();
            assert_eq!(p.tgt, r);
        }
    }

    #[test]
    fn cipher_permutation_is_a_payload_bijection() {
        let p = cipher_permutation(16, 9);
        assert_eq!(&p[0..3], &[PAD_ID, BOS_ID, EOS_ID]);
        let mut sorted: Vec<u32> = p[3..].to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (3..16).collect::<Vec<u32>>());
        assert_eq!(p, cipher_permutation(16, 9));
    }

    #[test]
    fn cipher_targets_invert_back_to_the_source() {
        let cfg = small_config(Task::Cipher);
        let s = generate(&cfg).unwrap();
        let p = cipher_permutation(cfg.vocab_size, cfg.seed);
        let mut inverse = vec![0u32; p.len()];
        for (from, &to) in p.iter().enumerate() {
            inverse[to as usize] = from as u32;
        }
        for pair in s.train.iter().chain(&s.dev) {
            let recovered: Vec<u32> = pair.tgt.iter().map(|&t| inverse[t as usize]).collect();
            assert_eq!(recovered, pair.src);
            for (s_tok, t_tok) in pair.src.iter().zip(&pair.tgt) {
                assert_eq!(p[*s_tok as usize], *t_tok);
            }
        }
    }

    #[test]
    fn pack_batch_lays_out_the_worked_example() {
        let pairs = vec![
            SentencePair {
                src: vec![5, 6, 7],
                tgt: vec![7, 6, 5],
            },
            SentencePair {
                src: vec![8],
                tgt: vec![8],
            },
        ];
        let b = pack_batch(&pairs).unwrap();
        assert_eq!((b.batch, b.src_len, b.tgt_len), (2, 4, 4));
        assert_eq!(b.src, vec![5, 6, 7, EOS_ID, 8, EOS_ID, PAD_ID, PAD_ID]);
        assert_eq!(b.dec_in, vec![BOS_ID, 7, 6, 5, BOS_ID, 8, PAD_ID, PAD_ID]);
        assert_eq!(b.labels, vec![7, 6, 5, EOS_ID, 8, EOS_ID, PAD_ID, PAD_ID]);
        assert_eq!(
            b.active_labels(),
            vec![true, true, true, true, true, true, false, false]
        );
    }

    #[test]
    fn shuffled_batches_cover_every_pair_once() {
        let s = generate(&small_config(Task::Copy)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let batches = shuffled_batches(&s.train, 16, &mut rng).unwrap();
        assert_eq!(batches.len(), 5);
        assert!(batches.iter().all(|b| b.batch == 16));
        let mut seen: Vec<Vec<u32>> = Vec::new();
        for b in &batches {
            for row in 0..b.batch {
                let src = &b.src[row * b.src_len..(row + 1) * b.src_len];
                let payload: Vec<u32> = src.iter().copied().take_while(|&t| t != EOS_ID).collect();
                seen.push(payload);
            }
        }
        seen.sort();
        let mut want: Vec<Vec<u32>> = s.train.iter().map(|p| p.src.clone()).collect();
        want.sort();
        assert_eq!(seen, want);
    }

    #[test]
    fn epoch_shuffles_differ_and_are_seed_stable() {
        let s = generate(&small_config(Task::Copy)).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = shuffled_batches(&s.train, 16, &mut rng).unwrap();
            let b = shuffled_batches(&s.train, 16, &mut rng).unwrap();
            (a, b)
        };
        let (a1, b1) = run(3);
        let (a2, _) = run(3);
        assert_eq!(a1[0].src, a2[0].src, "same seed, same epoch order");
        assert_ne!(a1[0].src, b1[0].src, "consecutive epochs reshuffle");
    }

    #[test]
    fn sequential_batches_keep_order_and_split_the_tail() {
        let pairs: Vec<SentencePair> = (0..7)
            .map(|i| SentencePair {
                src: vec![3 + i],
                tgt: vec![3 + i],
            })
            .collect();
        let batches = sequential_batches(&pairs, 3).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].batch, 1);
        assert_eq!(batches[0].src[0], 3);
        assert_eq!(batches[2].src[0], 9);
    }

    #[test]
    fn pairs_roundtrip_through_the_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let s = generate(&small_config(Task::Cipher)).unwrap();
        save_pairs(&path, &s.dev).unwrap();
        let back = load_pairs(&path).unwrap();
        assert_eq!(back, s.dev);
    }

    #[test]
    fn malformed_pair_lines_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "3 4 5\n").unwrap();
        assert!(matches!(load_pairs(&path), Err(Error::Format(_))));
        fs::write(&path, "3 x\t4\n").unwrap();
        assert!(matches!(load_pairs(&path), Err(Error::Format(_))));
        fs::write(&path, "\t4\n").unwrap();
        assert!(matches!(load_pairs(&path), Err(Error::Format(_))));
    }
}
