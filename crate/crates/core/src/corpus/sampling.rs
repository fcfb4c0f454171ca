use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Corpus, Split, WordId};
use crate::encoder::PaddedBatch;
use crate::error::{Error, Result};

/// Indices into `Corpus::segments`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub same: usize,
    pub different: usize,
}

impl Triplet {
    /// Checks the word-identity constraints against `corpus`.
    pub fn is_valid(&self, corpus: &Corpus) -> bool {
        let w = |i: usize| corpus.segments[i].word;
        self.anchor != self.same && w(self.anchor) == w(self.same) && w(self.anchor) != w(self.different)
    }
}

/// How anchors are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform over segments (word tokens).
    #[default]
    Token,
    /// Uniform over word types, then over that word's segments.
    Type,
}

/// Draws `count` random valid triplets from one split.
pub fn sample_triplets(
    corpus: &Corpus,
    split: Split,
    count: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<Triplet>> {
    let mut by_word: BTreeMap<WordId, Vec<usize>> = BTreeMap::new();
    for i in corpus.split_indices(split) {
        by_word.entry(corpus.segments[i].word).or_default().push(i);
    }
    let pool: Vec<usize> = by_word.values().flatten().copied().collect();
    let eligible: Vec<WordId> = by_word
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(w, _)| *w)
        .collect();
    if eligible.is_empty() || by_word.len() < 2 {
        return Err(Error::invalid(format!(
            "split {split} needs a word with 2+ instances and 2+ distinct words"
        )));
    }
    let anchors: Vec<usize> = eligible.iter().flat_map(|w| by_word[w].iter().copied()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7219]));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = match mode {
            SamplingMode::Token => anchors[rng.random_range(0..anchors.len())],
            SamplingMode::Type => {
                let w = eligible[rng.random_range(0..eligible.len())];
                let v = &by_word[&w];
                v[rng.random_range(0..v.len())]
            }
        };
        let word = corpus.segments[anchor].word;
        let siblings = &by_word[&word];
        let same = loop {
            let s = siblings[rng.random_range(0..siblings.len())];
            if s != anchor {
                break s;
            }
        };
        let different = loop {
            let d = pool[rng.random_range(0..pool.len())];
            if corpus.segments[d].word != word {
                break d;
            }
        };
        out.push(Triplet {
            anchor,
            same,
            different,
        });
    }
    Ok(out)
}

/// A padded batch of triplets: rows are all anchors, then all same
/// segments, then all different segments.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub sequences: PaddedBatch,
    /// Time-major frame labels (`t * N + seq`); `None` marks padding.
    pub labels: Vec<Option<usize>>,
    pub num_triplets: usize,
}

impl TripletBatch {
    /// Number of unpadded frames.
    pub fn num_frames(&self) -> usize {
        self.sequences.lengths().iter().sum()
    }
}

pub fn assemble_batch(corpus: &Corpus, triplets: &[Triplet]) -> Result<TripletBatch> {
    if triplets.is_empty() {
        return Err(Error::invalid("cannot batch zero triplets"));
    }
    let order: Vec<usize> = triplets
        .iter()
        .map(|t| t.anchor)
        .chain(triplets.iter().map(|t| t.same))
        .chain(triplets.iter().map(|t| t.different))
        .collect();
    let seqs: Vec<_> = order.iter().map(|&i| &corpus.segments[i].frames).collect();
    let sequences = PaddedBatch::from_sequences(&seqs)?;
    let (n, t_max) = (sequences.len(), sequences.t_max());
    let mut labels = vec![None; n * t_max];
    for (s, &i) in order.iter().enumerate() {
        for (t, &l) in corpus.segments[i].labels.iter().enumerate() {
            labels[t * n + s] = Some(l);
        }
    }
    Ok(TripletBatch {
        sequences,
        labels,
        num_triplets: triplets.len(),
    })
}

/// Shuffled index chunks for one epoch; the last chunk may be short.
pub fn batch_order(count: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffles and pads every batch of one pass over `triplets`.
pub fn make_batches(
    corpus: &Corpus,
    triplets: &[Triplet],
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<TripletBatch>> {
    batch_order(triplets.len(), batch_size, shuffle_seed)?
        .iter()
        .map(|chunk| {
            let ts: Vec<Triplet> = chunk.iter().map(|&i| triplets[i]).collect();
            assemble_batch(corpus, &ts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::small_cfg;
    use crate::corpus::{build_corpus, FeatureSequence};
    use crate::numcore::Matrix;

    fn toy(words: &[(u32, usize)]) -> Corpus {
        let mut segments = Vec::new();
        for &(w, frames) in words {
            segments.push(FeatureSequence {
                id: segments.len(),
                word: WordId(w),
                split: Split::Train,
                frames: Matrix::filled(frames, 40, segments.len() as f64),
                labels: vec![w as usize; frames],
            });
        }
        Corpus {
            vocabulary: vec!["a".into(), "b".into(), "c".into()],
            num_classes: 3,
            segments,
            keywords: Default::default(),
        }
    }

    #[test]
    fn only_valid_combination_is_drawn() {
        let c = toy(&[(0, 40), (0, 41), (1, 42)]);
        let ts = sample_triplets(&c, Split::Train, 200, 1, SamplingMode::Token).unwrap();
        assert_eq!(ts.len(), 200);
        for t in ts {
            assert_eq!(c.segments[t.anchor].word, WordId(0));
            assert_eq!(c.segments[t.same].word, WordId(0));
            assert_eq!(t.different, 2);
        }
    }

    #[test]
    fn needs_a_pair_and_two_words() {
        let one_word = toy(&[(0, 40), (0, 40)]);
        assert!(sample_triplets(&one_word, Split::Train, 1, 1, SamplingMode::Token).is_err());
        let singletons = toy(&[(0, 40), (1, 40)]);
        assert!(sample_triplets(&singletons, Split::Train, 1, 1, SamplingMode::Token).is_err());
    }

    #[test]
    fn sampled_triplets_are_valid_and_seeded() {
        let (_, _, corpus) = build_corpus(&small_cfg(), 2).unwrap();
        for mode in [SamplingMode::Token, SamplingMode::Type] {
            let a = sample_triplets(&corpus, Split::Train, 500, 7, mode).unwrap();
            assert!(a.iter().all(|t| t.is_valid(&corpus)));
            assert!(a.iter().all(|t| corpus.segments[t.different].split == Split::Train));
            assert_eq!(a, sample_triplets(&corpus, Split::Train, 500, 7, mode).unwrap());
        }
    }

    #[test]
    fn single_triplet_batch() {
        let c = toy(&[(0, 40), (0, 45), (1, 43)]);
        let b = assemble_batch(&c, &[Triplet { anchor: 0, same: 1, different: 2 }]).unwrap();
        assert_eq!(b.sequences.len(), 3);
        assert_eq!(b.sequences.lengths(), &[40, 45, 43]);
        assert_eq!(b.sequences.t_max(), 45);
        assert_eq!(b.num_frames(), 128);
        // Padding of the anchor is zero and unlabelled.
        assert!(b.sequences.frame(0, 44).iter().all(|&x| x == 0.0));
        assert_eq!(b.labels[44 * 3], None);
        assert_eq!(b.labels[44 * 3 + 1], Some(0));
    }

    #[test]
    fn pad_width_is_batch_max() {
        let c = toy(&[(0, 40), (0, 60), (1, 50), (1, 44), (2, 41), (2, 70)]);
        let ts = [
            Triplet { anchor: 0, same: 1, different: 2 },
            Triplet { anchor: 3, same: 2, different: 4 },
        ];
        let b = assemble_batch(&c, &ts).unwrap();
        assert_eq!(b.sequences.t_max(), 60);
        assert_eq!(b.sequences.lengths(), &[40, 44, 60, 50, 50, 41]);
    }

    #[test]
    fn batches_cover_every_triplet_once() {
        let c = toy(&[(0, 40), (0, 41), (1, 42), (1, 40)]);
        let ts = sample_triplets(&c, Split::Train, 10, 3, SamplingMode::Token).unwrap();
        let batches = make_batches(&c, &ts, 4, 9).unwrap();
        assert_eq!(batches.iter().map(|b| b.num_triplets).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut seen: Vec<usize> = batch_order(10, 4, 9).unwrap().concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(make_batches(&c, &ts, 0, 9).is_err());
    }
}
