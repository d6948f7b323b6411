//! Synthetic paired data for desk-scale training runs.
//!
//! Each topic owns a disjoint sub-alphabet of `2 * seq_len` tokens. The
//! image side of a pair samples `seq_len` distinct tokens from its topic
//! alphabet; the text side is a shuffled copy with a small fraction of
//! positions resampled. Matched pairs therefore share almost their whole
//! token set while same-topic distractors share about half of it, giving
//! retrieval signal at both the topic and the pair level. Token 0 is
//! reserved as the mask token and never appears in any sequence.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of text positions resampled so pairs are similar, not identical.
const RESAMPLE_NOISE: f64 = 0.15;

/// Fraction of each topic's pairs tagged held-out (integer floor).
const HELDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub id: String,
    pub topic: usize,
    pub split: Split,
    pub image: Vec<u32>,
    pub text: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPairSet {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub pairs_per_topic: usize,
    pub seq_len: usize,
    pub mask_id: u32,
    pub seed: u64,
    #[serde(skip)]
    pub pairs: Vec<SyntheticPair>,
}

impl SyntheticPairSet {
    pub fn train_pairs(&self) -> Vec<&SyntheticPair> {
        self.pairs
            .iter()
            .filter(|p| p.split == Split::Train)
            .collect()
    }

    pub fn heldout_pairs(&self) -> Vec<&SyntheticPair> {
        self.pairs
            .iter()
            .filter(|p| p.split == Split::Heldout)
            .collect()
    }
}

/// Generate a deterministic paired corpus. Topic `t` draws tokens from
/// `[1 + 2*t*seq_len, 1 + 2*(t+1)*seq_len)`; the sub-alphabets are pairwise
/// disjoint by construction and leave token 0 free for masking.
pub fn synth_pairs(
    num_topics: usize,
    pairs_per_topic: usize,
    seq_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<SyntheticPairSet> {
    if num_topics == 0 || pairs_per_topic == 0 || seq_len == 0 || vocab_size == 0 {
        return Err(Error::InvalidArgument(
            "topics, pairs, sequence length and vocab size must all be >= 1".into(),
        ));
    }
    let alpha_len = 2 * seq_len;
    let needed = 1 + num_topics * alpha_len;
    if needed > vocab_size {
        return Err(Error::InvalidArgument(format!(
            "vocab size {vocab_size} too small for {num_topics} disjoint sub-alphabets of \
             {alpha_len} tokens plus the mask token (need {needed})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heldout_per_topic = (pairs_per_topic as f64 * HELDOUT_FRACTION).floor() as usize;
    let mut pairs = Vec::with_capacity(num_topics * pairs_per_topic);
    for topic in 0..num_topics {
        let alphabet: Vec<u32> =
            (0..alpha_len).map(|i| (1 + topic * alpha_len + i) as u32).collect();
        for p in 0..pairs_per_topic {
            let mut deck = alphabet.clone();
            deck.shuffle(&mut rng);
            let image: Vec<u32> = deck[..seq_len].to_vec();
            let mut text = image.clone();
            text.shuffle(&mut rng);
            for tok in &mut text {
                if rng.random::<f64>() < RESAMPLE_NOISE {
                    *tok = alphabet[rng.random_range(0..alphabet.len())];
                }
            }
            let split = if p >= pairs_per_topic - heldout_per_topic {
                Split::Heldout
            } else {
                Split::Train
            };
            pairs.push(SyntheticPair {
                id: format!("p{:04}", topic * pairs_per_topic + p),
                topic,
                split,
                image,
                text,
            });
        }
    }
    Ok(SyntheticPairSet {
        vocab_size,
        num_topics,
        pairs_per_topic,
        seq_len,
        mask_id: 0,
        seed,
        pairs,
    })
}

/// Write a pair set as JSONL: a metadata object on the first line, one pair
/// per following line.
pub fn write_pairs_jsonl<W: Write>(mut w: W, set: &SyntheticPairSet) -> Result<()> {
    serde_json::to_writer(&mut w, set)?;
    w.write_all(b"\n")?;
    for pair in &set.pairs {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(r: R) -> Result<SyntheticPairSet> {
    let mut lines = r.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty pairs file".into()))??;
    let mut set: SyntheticPairSet = serde_json::from_str(&meta_line)
        .map_err(|e| Error::InvalidInput(format!("pairs metadata line: {e}")))?;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SyntheticPair = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("pairs line {}: {e}", lineno + 2)))?;
        set.pairs.push(pair);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let a = synth_pairs(10, 20, 12, 500, 7).unwrap();
        let b = synth_pairs(10, 20, 12, 500, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 200);
        let c = synth_pairs(10, 20, 12, 500, 8).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn topic_sub_alphabets_are_pairwise_disjoint() {
        let set = synth_pairs(6, 10, 8, 200, 3).unwrap();
        let mut per_topic: Vec<HashSet<u32>> = vec![HashSet::new(); 6];
        for pair in &set.pairs {
            per_topic[pair.topic].extend(pair.image.iter().copied());
            per_topic[pair.topic].extend(pair.text.iter().copied());
        }
        for i in 0..6 {
            assert!(!per_topic[i].contains(&set.mask_id));
            for j in (i + 1)..6 {
                assert!(
                    per_topic[i].is_disjoint(&per_topic[j]),
                    "topics {i} and {j} share tokens"
                );
            }
        }
    }

    #[test]
    fn vocab_too_small_is_rejected() {
        assert!(matches!(
            synth_pairs(10, 5, 12, 100, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn heldout_split_is_per_topic() {
        let set = synth_pairs(10, 20, 12, 500, 7).unwrap();
        assert_eq!(set.heldout_pairs().len(), 40);
        assert_eq!(set.train_pairs().len(), 160);
        for topic in 0..10 {
            let held = set
                .pairs
                .iter()
                .filter(|p| p.topic == topic && p.split == Split::Heldout)
                .count();
            assert_eq!(held, 4);
        }
    }

    #[test]
    fn pairs_jsonl_round_trips() {
        let set = synth_pairs(3, 4, 6, 64, 11).unwrap();
        let mut buf = Vec::new();
        write_pairs_jsonl(&mut buf, &set).unwrap();
        let back = read_pairs_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }
}
