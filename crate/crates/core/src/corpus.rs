//! Planted-anchor synthetic corpus.
//!
//! Token ids split into filler `[0, anchor_start)`, anchors
//! `[anchor_start, cue)` and a single cue id `vocab - 1`. Every sequence
//! opens with a fixed prefix block. Each planted pair puts an anchor early
//! and a cue late; the token after the cue repeats the anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusLayout {
    pub vocab: usize,
    pub anchor_start: usize,
    pub prefix_len: usize,
}

impl CorpusLayout {
    pub fn new(vocab: usize, anchor_start: usize, prefix_len: usize) -> Result<Self> {
        if anchor_start == 0 || anchor_start + 1 >= vocab {
            return Err(Error::InvalidArgument(format!(
                "anchor range [{anchor_start}, {}) is empty or leaves no filler",
                vocab.saturating_sub(1)
            )));
        }
        Ok(Self {
            vocab,
            anchor_start,
            prefix_len,
        })
    }

    /// 64-token vocabulary: 48 filler ids, 15 anchors, cue 63, prefix of 4.
    pub fn for_vocab(vocab: usize) -> Result<Self> {
        Self::new(vocab, vocab * 3 / 4, 4)
    }

    pub fn cue(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn anchor_ids(&self) -> Vec<u32> {
        (self.anchor_start as u32..self.cue()).collect()
    }

    pub fn is_anchor(&self, id: u32) -> bool {
        (self.anchor_start as u32..self.cue()).contains(&id)
    }

    /// The fixed block every sequence starts with.
    pub fn prefix(&self) -> Vec<u32> {
        (0..self.prefix_len)
            .map(|i| (i % self.anchor_start) as u32)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub anchor_pos: usize,
    pub cue_pos: usize,
    pub anchor_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub pairs: Vec<AnchorPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub layout: CorpusLayout,
    pub sequences: Vec<Sequence>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Split off the last `n` sequences.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.sequences.len().saturating_sub(n);
        let tail = self.sequences.split_off(at);
        let layout = self.layout;
        (
            self,
            Self {
                layout,
                sequences: tail,
            },
        )
    }

    /// Anchor mask per sequence: `true` where an anchor was planted.
    pub fn anchor_masks(&self) -> Vec<Vec<bool>> {
        self.sequences
            .iter()
            .map(|s| {
                let mut m = vec![false; s.tokens.len()];
                for p in &s.pairs {
                    m[p.anchor_pos] = true;
                }
                m
            })
            .collect()
    }
}

/// Generate `count` sequences with lengths in `min_len..=max_len`.
///
/// Each sequence carries `round(density * len)` planted pairs (at least one
/// when `density > 0`). Anchors land in the first half after the prefix,
/// cues in the last quarter, in matching order.
pub fn gen_corpus(
    layout: CorpusLayout,
    seed: u64,
    count: usize,
    min_len: usize,
    max_len: usize,
    density: f64,
) -> Result<SyntheticCorpus> {
    if !(0.0..1.0).contains(&density) {
        return Err(Error::InvalidArgument(format!(
            "density {density} outside [0, 1)"
        )));
    }
    if min_len > max_len || min_len < layout.prefix_len + 8 {
        return Err(Error::InvalidArgument(format!(
            "length range {min_len}..={max_len} too short"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.index(min_len, max_len + 1);
        let mut tokens = layout.prefix();
        while tokens.len() < len {
            tokens.push(rng.index(0, layout.anchor_start) as u32);
        }
        let early: Vec<usize> = (layout.prefix_len..len / 2).collect();
        let late: Vec<usize> = (len - len / 4..len - 1).step_by(2).collect();
        let wanted = if density > 0.0 {
            ((density * len as f64).round() as usize).max(1)
        } else {
            0
        };
        let n = wanted.min(early.len()).min(late.len());
        let mut anchors = pick(&mut rng, &early, n);
        let mut cues = pick(&mut rng, &late, n);
        anchors.sort_unstable();
        cues.sort_unstable();
        let mut pairs = Vec::with_capacity(n);
        for (&a, &c) in anchors.iter().zip(&cues) {
            let id = rng.index(layout.anchor_start, layout.vocab - 1) as u32;
            tokens[a] = id;
            tokens[c] = layout.cue();
            tokens[c + 1] = id;
            pairs.push(AnchorPair {
                anchor_pos: a,
                cue_pos: c,
                anchor_id: id,
            });
        }
        sequences.push(Sequence { tokens, pairs });
    }
    Ok(SyntheticCorpus { layout, sequences })
}

fn pick(rng: &mut crate::numerics::SeededRng, from: &[usize], n: usize) -> Vec<usize> {
    let mut v = from.to_vec();
    rng.shuffle(&mut v);
    v.truncate(n);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> CorpusLayout {
        CorpusLayout::for_vocab(64).unwrap()
    }

    #[test]
    fn zero_density_is_pure_filler() {
        let c = gen_corpus(layout(), 1, 20, 32, 64, 0.0).unwrap();
        for s in &c.sequences {
            assert!(s.pairs.is_empty());
            assert!(s.tokens.iter().all(|&t| (t as usize) < 48));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_corpus(layout(), 7, 10, 64, 128, 0.03).unwrap();
        let b = gen_corpus(layout(), 7, 10, 64, 128, 0.03).unwrap();
        let c = gen_corpus(layout(), 8, 10, 64, 128, 0.03).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pairs_follow_the_rule() {
        let lay = layout();
        let c = gen_corpus(lay, 3, 50, 100, 128, 0.03).unwrap();
        for s in &c.sequences {
            assert!((100..=128).contains(&s.tokens.len()));
            assert_eq!(&s.tokens[..4], &lay.prefix()[..]);
            assert_eq!(
                s.pairs.len(),
                (0.03 * s.tokens.len() as f64).round() as usize
            );
            let anchors: Vec<usize> = (0..s.tokens.len())
                .filter(|&i| lay.is_anchor(s.tokens[i]))
                .collect();
            let mut expected: Vec<usize> = s
                .pairs
                .iter()
                .flat_map(|p| [p.anchor_pos, p.cue_pos + 1])
                .collect();
            expected.sort_unstable();
            assert_eq!(anchors, expected);
            for p in &s.pairs {
                assert!(p.anchor_pos < s.tokens.len() / 2 && p.cue_pos >= s.tokens.len() * 3 / 4);
                assert_eq!(s.tokens[p.cue_pos], lay.cue());
                assert_eq!(s.tokens[p.anchor_pos], p.anchor_id);
                assert_eq!(s.tokens[p.cue_pos + 1], p.anchor_id);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_corpus(layout(), 1, 1, 32, 64, 1.0).is_err());
        assert!(gen_corpus(layout(), 1, 1, 64, 32, 0.1).is_err());
        assert!(CorpusLayout::new(64, 63, 4).is_err());
    }
}
