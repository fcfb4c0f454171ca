//! Synthetic word-segment corpus.
//!
//! Stands in for forced-aligned speech: every word is a phone sequence, every
//! phone state has a Gaussian emission in a 40-dimensional frame space, and
//! every generated frame carries its oracle state label. Frames follow a
//! 12.5 ms hop, so durations (and therefore false alarms per hour) keep
//! their real-world meaning.

mod io;
mod sampling;

pub use io::{load_corpus, save_corpus, FEATURES_FILE, METADATA_FILE};
pub use sampling::{
    assemble_batch, batch_order, make_batches, sample_triplets, SamplingMode, Triplet, TripletBatch,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const FEAT_DIM: usize = 40;
pub const FRAME_HOP_SECONDS: f64 = 0.0125;
/// 0.5 s at the frame hop.
pub const MIN_FRAMES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WordId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}` (train, dev, test_id, test_ood)")))
    }
}

/// Generator settings. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_phones: usize,
    /// 1 gives monophone-style labels; 3 splits each phone into
    /// begin/middle/end states with their own emissions and labels.
    pub states_per_phone: usize,
    pub train_words: usize,
    pub train_instances: usize,
    /// In-domain keywords, drawn from the training vocabulary.
    pub id_keywords: usize,
    pub ood_keywords: usize,
    pub ood_fillers: usize,
    /// Instances per keyword in each evaluation split (5 enroll + trials).
    pub keyword_instances: usize,
    /// Instances per non-keyword word in each evaluation split.
    pub filler_instances: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    /// Nominal per-phone duration range in frames.
    pub phone_frames_min: usize,
    pub phone_frames_max: usize,
    /// Scales the duration spread around the range midpoint; 0 fixes
    /// every phone at the midpoint.
    pub duration_jitter: f64,
    /// Scales the per-frame Gaussian emission noise.
    pub noise_stddev: f64,
    /// Per-instance constant offset added to all frames (speaker/channel).
    pub instance_offset_stddev: f64,
    /// Fraction of words derived from an earlier word by one phone substitution.
    pub minimal_pair_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_phones: 48,
            states_per_phone: 1,
            train_words: 30,
            train_instances: 40,
            id_keywords: 8,
            ood_keywords: 12,
            ood_fillers: 12,
            keyword_instances: 105,
            filler_instances: 200,
            min_phones: 5,
            max_phones: 6,
            phone_frames_min: 8,
            phone_frames_max: 12,
            duration_jitter: 1.0,
            noise_stddev: 1.0,
            instance_offset_stddev: 0.0,
            minimal_pair_fraction: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn num_classes(&self) -> usize {
        self.num_phones * self.states_per_phone
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: &str| Err(Error::config(format!("corpus.{k}"), d));
        if self.num_phones < 2 {
            return bad("num_phones", "need at least 2 phones");
        }
        if !(self.states_per_phone == 1 || self.states_per_phone == 3) {
            return bad("states_per_phone", "must be 1 or 3");
        }
        if self.min_phones < 2 || self.max_phones > 8 || self.min_phones > self.max_phones {
            return bad("min_phones", "phone counts must satisfy 2 <= min <= max <= 8");
        }
        if self.phone_frames_min == 0 || self.phone_frames_min > self.phone_frames_max {
            return bad("phone_frames_min", "need 1 <= min <= max");
        }
        if self.phone_frames_min < self.states_per_phone {
            return bad("phone_frames_min", "each state needs at least one frame");
        }
        if !(self.duration_jitter >= 0.0 && self.duration_jitter <= 1.0) {
            return bad("duration_jitter", "must be in [0, 1]");
        }
        if !(self.noise_stddev >= 0.0) || !(self.instance_offset_stddev >= 0.0) {
            return bad("noise_stddev", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.minimal_pair_fraction) {
            return bad("minimal_pair_fraction", "must be in [0, 1]");
        }
        if self.train_words < 2 {
            return bad("train_words", "need at least 2 training words");
        }
        if self.id_keywords > self.train_words {
            return bad("id_keywords", "cannot exceed train_words");
        }
        if (self.id_keywords > 0 || self.ood_keywords > 0) && self.keyword_instances < 6 {
            return bad("keyword_instances", "need 5 enrollment + at least 1 trial instance");
        }
        Ok(())
    }

    /// `(center, spread)` of the per-phone frame count.
    fn phone_duration(&self) -> (usize, usize) {
        let center = (self.phone_frames_min + self.phone_frames_max) / 2;
        let half = (self.phone_frames_max - self.phone_frames_min) as f64 / 2.0;
        let spread = ((self.duration_jitter * half).round() as usize).min(center - self.states_per_phone.min(center));
        (center, spread)
    }
}

/// Emission model shared by all words.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneInventory {
    pub num_phones: usize,
    pub states_per_phone: usize,
    /// One mean per class (`phone * states_per_phone + state`).
    pub means: Vec<Vec<f64>>,
    pub stddevs: Vec<Vec<f64>>,
}

/// Minimum Euclidean distance between any two emission means.
pub const MIN_MEAN_SEPARATION: f64 = 0.5;

impl PhoneInventory {
    pub fn generate(num_phones: usize, states_per_phone: usize, seed: u64) -> Result<Self> {
        if num_phones == 0 || states_per_phone == 0 {
            return Err(Error::invalid("phone inventory needs phones and states"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1f0]));
        let gauss = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
            (0..FEAT_DIM)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>()
        };
        let mut means: Vec<Vec<f64>> = Vec::new();
        let mut stddevs = Vec::new();
        for _ in 0..num_phones {
            let base = gauss(&mut rng, 1.0);
            for _ in 0..states_per_phone {
                loop {
                    let mean: Vec<f64> = if states_per_phone == 1 {
                        gauss(&mut rng, 1.0)
                    } else {
                        base.iter()
                            .zip(gauss(&mut rng, 0.5))
                            .map(|(b, o)| b + o)
                            .collect()
                    };
                    if means.iter().all(|m| dist(m, &mean) > MIN_MEAN_SEPARATION) {
                        means.push(mean);
                        break;
                    }
                }
                stddevs.push((0..FEAT_DIM).map(|_| rng.random_range(0.5..1.5)).collect());
            }
        }
        Ok(PhoneInventory {
            num_phones,
            states_per_phone,
            means,
            stddevs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_phones * self.states_per_phone
    }

    pub fn class_of(&self, phone: usize, state: usize) -> usize {
        phone * self.states_per_phone + state
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconEntry {
    pub name: String,
    pub phones: Vec<usize>,
}

/// Word inventory and its split roles.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
    /// Indices into `entries`.
    pub train: Vec<usize>,
    /// Subset of `train`.
    pub id_keywords: Vec<usize>,
    pub ood_keywords: Vec<usize>,
    pub ood_fillers: Vec<usize>,
}

impl Lexicon {
    pub fn generate(cfg: &CorpusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1e8]));
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        let mut entries = Vec::new();

        let draw_group = |rng: &mut ChaCha8Rng,
                              count: usize,
                              prefix: &str,
                              entries: &mut Vec<LexiconEntry>,
                              seen: &mut HashSet<Vec<usize>>|
         -> Result<Vec<usize>> {
            let start = entries.len();
            let mut ids = Vec::with_capacity(count);
            let mut attempts = 0;
            while ids.len() < count {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::invalid("could not draw enough distinct words"));
                }
                let derive = !ids.is_empty() && rng.random_bool(cfg.minimal_pair_fraction);
                let phones = if derive {
                    let src: &Vec<usize> = &entries[start + rng.random_range(0..ids.len())].phones;
                    let mut p = src.clone();
                    let pos = rng.random_range(0..p.len());
                    let mut sub = rng.random_range(0..cfg.num_phones - 1);
                    if sub >= p[pos] {
                        sub += 1;
                    }
                    p[pos] = sub;
                    p
                } else {
                    let len = rng.random_range(cfg.min_phones..=cfg.max_phones);
                    (0..len).map(|_| rng.random_range(0..cfg.num_phones)).collect()
                };
                if !seen.insert(phones.clone()) {
                    continue;
                }
                entries.push(LexiconEntry {
                    name: format!("{prefix}{:03}", ids.len()),
                    phones,
                });
                ids.push(entries.len() - 1);
            }
            Ok(ids)
        };

        let train = draw_group(&mut rng, cfg.train_words, "w", &mut entries, &mut seen)?;
        let ood_keywords = draw_group(&mut rng, cfg.ood_keywords, "ood", &mut entries, &mut seen)?;
        let ood_fillers = draw_group(&mut rng, cfg.ood_fillers, "oodf", &mut entries, &mut seen)?;
        let id_keywords = train[..cfg.id_keywords].to_vec();
        Ok(Lexicon {
            entries,
            train,
            id_keywords,
            ood_keywords,
            ood_fillers,
        })
    }
}

/// One word segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: usize,
    pub word: WordId,
    pub split: Split,
    /// `T x 40`, values exactly representable as `f32`.
    pub frames: Matrix,
    pub labels: Vec<usize>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_frames() as f64 * FRAME_HOP_SECONDS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocabulary: Vec<String>,
    pub num_classes: usize,
    pub segments: Vec<FeatureSequence>,
    /// Evaluation keywords per split; other words in a split are fillers.
    pub keywords: BTreeMap<Split, Vec<WordId>>,
}

impl Corpus {
    pub fn word_name(&self, w: WordId) -> &str {
        &self.vocabulary[w.0 as usize]
    }

    pub fn word_id(&self, name: &str) -> Option<WordId> {
        self.vocabulary
            .iter()
            .position(|v| v == name)
            .map(|i| WordId(i as u32))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FeatureSequence> {
        self.segments.iter().filter(move |s| s.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.segments.len())
            .filter(|&i| self.segments[i].split == split)
            .collect()
    }

    pub fn keywords(&self, split: Split) -> &[WordId] {
        self.keywords.get(&split).map_or(&[], |v| v.as_slice())
    }

    /// Total audio hours of a split.
    pub fn hours(&self, split: Split) -> f64 {
        self.split(split).map(|s| s.duration_seconds()).sum::<f64>() / 3600.0
    }

    pub fn total_frames(&self) -> usize {
        self.segments.iter().map(|s| s.num_frames()).sum()
    }
}

/// Splitmix64-style mixing of a base seed with a path of integers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for &p in path {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

/// Splits `frames` frames of one phone into per-state runs.
fn state_runs(frames: usize, states: usize) -> Vec<usize> {
    let base = frames / states;
    let mut runs = vec![base; states];
    runs[states / 2] += frames - base * states;
    runs
}

/// Renders one instance of `phones`.
fn render_instance(
    inventory: &PhoneInventory,
    phones: &[usize],
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<usize>) {
    let (center, spread) = cfg.phone_duration();
    let offset: Vec<f64> = (0..FEAT_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            cfg.instance_offset_stddev * z
        })
        .collect();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for &p in phones {
        let d = if spread == 0 {
            center
        } else {
            rng.random_range(center - spread..=center + spread)
        };
        for (state, run) in state_runs(d, inventory.states_per_phone).into_iter().enumerate() {
            let class = inventory.class_of(p, state);
            let (mean, sd) = (&inventory.means[class], &inventory.stddevs[class]);
            for _ in 0..run {
                for k in 0..FEAT_DIM {
                    let z: f64 = if cfg.noise_stddev > 0.0 {
                        StandardNormal.sample(rng)
                    } else {
                        0.0
                    };
                    let v = mean[k] + offset[k] + cfg.noise_stddev * sd[k] * z;
                    data.push(v as f32 as f64);
                }
                labels.push(class);
            }
        }
    }
    let t = labels.len();
    (Matrix::from_vec(t, FEAT_DIM, data).expect("sized"), labels)
}

/// Generates all four splits.
///
/// Train holds every training word; dev and test_id hold fresh instances of
/// the in-domain keywords plus the remaining training words as fillers;
/// test_ood holds words whose phone sequences never occur in training.
pub fn generate_corpus(
    inventory: &PhoneInventory,
    lexicon: &Lexicon,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<Corpus> {
    cfg.validate()?;
    if inventory.num_classes() != cfg.num_classes() {
        return Err(Error::invalid("inventory does not match corpus config"));
    }
    let (center, spread) = cfg.phone_duration();
    for e in &lexicon.entries {
        let min_frames = e.phones.len() * (center - spread);
        if min_frames < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "word {} can be as short as {min_frames} frames (< {MIN_FRAMES})",
                e.name
            )));
        }
    }

    let fillers_of = |keys: &[usize]| -> Vec<usize> {
        lexicon
            .train
            .iter()
            .copied()
            .filter(|w| !keys.contains(w))
            .collect()
    };
    let id_fillers = fillers_of(&lexicon.id_keywords);
    let plan: Vec<(Split, Vec<(usize, usize)>)> = vec![
        (
            Split::Train,
            lexicon.train.iter().map(|&w| (w, cfg.train_instances)).collect(),
        ),
        (
            Split::Dev,
            eval_plan(&lexicon.id_keywords, &id_fillers, cfg),
        ),
        (
            Split::TestId,
            eval_plan(&lexicon.id_keywords, &id_fillers, cfg),
        ),
        (
            Split::TestOod,
            eval_plan(&lexicon.ood_keywords, &lexicon.ood_fillers, cfg),
        ),
    ];

    let mut raw = Vec::new();
    for (split, words) in &plan {
        for &(w, count) in words {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split.index(), w as u64]));
            for _ in 0..count {
                let (frames, labels) = render_instance(inventory, &lexicon.entries[w].phones, cfg, &mut rng);
                raw.push((*split, w, frames, labels));
            }
        }
    }

    // Word ids follow first appearance, which is also the order a loader
    // rebuilds them in.
    let mut vocab_index: BTreeMap<usize, WordId> = BTreeMap::new();
    let mut vocabulary = Vec::new();
    let mut segments = Vec::with_capacity(raw.len());
    for (id, (split, w, frames, labels)) in raw.into_iter().enumerate() {
        let word = *vocab_index.entry(w).or_insert_with(|| {
            vocabulary.push(lexicon.entries[w].name.clone());
            WordId(vocabulary.len() as u32 - 1)
        });
        segments.push(FeatureSequence {
            id,
            word,
            split,
            frames,
            labels,
        });
    }
    let keyword_ids = |ws: &[usize]| ws.iter().map(|w| vocab_index[w]).collect::<Vec<_>>();
    let mut keywords = BTreeMap::new();
    keywords.insert(Split::Dev, keyword_ids(&lexicon.id_keywords));
    keywords.insert(Split::TestId, keyword_ids(&lexicon.id_keywords));
    keywords.insert(Split::TestOod, keyword_ids(&lexicon.ood_keywords));
    keywords.retain(|_, v| !v.is_empty());
    Ok(Corpus {
        vocabulary,
        num_classes: inventory.num_classes(),
        segments,
        keywords,
    })
}

fn eval_plan(keywords: &[usize], fillers: &[usize], cfg: &CorpusConfig) -> Vec<(usize, usize)> {
    keywords
        .iter()
        .map(|&w| (w, cfg.keyword_instances))
        .chain(fillers.iter().map(|&w| (w, cfg.filler_instances)))
        .filter(|&(_, n)| n > 0)
        .collect()
}

/// Inventory, lexicon, and corpus from one config and data seed.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<(PhoneInventory, Lexicon, Corpus)> {
    let inventory = PhoneInventory::generate(cfg.num_phones, cfg.states_per_phone, seed)?;
    let lexicon = Lexicon::generate(cfg, seed)?;
    let corpus = generate_corpus(&inventory, &lexicon, cfg, seed)?;
    Ok((inventory, lexicon, corpus))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            num_phones: 10,
            train_words: 6,
            train_instances: 4,
            id_keywords: 2,
            ood_keywords: 2,
            ood_fillers: 2,
            keyword_instances: 6,
            filler_instances: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn means_are_separated() {
        let inv = PhoneInventory::generate(48, 3, 4).unwrap();
        assert_eq!(inv.num_classes(), 144);
        for i in 0..inv.means.len() {
            for j in 0..i {
                assert!(dist(&inv.means[i], &inv.means[j]) > MIN_MEAN_SEPARATION);
            }
        }
    }

    #[test]
    fn ood_words_are_disjoint_from_training() {
        let cfg = CorpusConfig::default();
        let lex = Lexicon::generate(&cfg, 3).unwrap();
        let train: HashSet<_> = lex.train.iter().map(|&w| lex.entries[w].phones.clone()).collect();
        for &w in lex.ood_keywords.iter().chain(&lex.ood_fillers) {
            assert!(!train.contains(&lex.entries[w].phones));
        }
        assert!(lex.id_keywords.iter().all(|w| lex.train.contains(w)));
        assert_eq!(lex.train.len(), 30);
        assert_eq!(lex.ood_keywords.len(), 12);
    }

    #[test]
    fn noiseless_instances_are_identical() {
        let cfg = CorpusConfig {
            noise_stddev: 0.0,
            duration_jitter: 0.0,
            ..small_cfg()
        };
        let (_, _, corpus) = build_corpus(&cfg, 5).unwrap();
        let w = corpus.segments[0].word;
        let same: Vec<_> = corpus.segments.iter().filter(|s| s.word == w).collect();
        assert!(same.len() > 1);
        for s in &same[1..] {
            assert_eq!(s.frames, same[0].frames);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let (_, _, a) = build_corpus(&small_cfg(), 9).unwrap();
        let (_, _, b) = build_corpus(&small_cfg(), 9).unwrap();
        let (_, _, c) = build_corpus(&small_cfg(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_follow_lexicon_order() {
        for states in [1, 3] {
            let cfg = CorpusConfig {
                states_per_phone: states,
                ..small_cfg()
            };
            let (inv, lex, corpus) = build_corpus(&cfg, 2).unwrap();
            for seg in &corpus.segments {
                let name = corpus.word_name(seg.word);
                let entry = lex.entries.iter().find(|e| e.name == name).unwrap();
                // Decode label runs back into states, then into phones.
                let mut runs: Vec<usize> = Vec::new();
                for &l in &seg.labels {
                    if runs.last() != Some(&l) {
                        runs.push(l);
                    }
                }
                let expected: Vec<usize> = entry
                    .phones
                    .iter()
                    .flat_map(|&p| (0..states).map(move |s| p * states + s))
                    .collect();
                // Adjacent repeats of one phone merge into a single run.
                let mut dedup = expected.clone();
                dedup.dedup();
                assert_eq!(runs, dedup, "word {name}");
                assert!(seg.num_frames() >= MIN_FRAMES);
                assert!(seg.labels.iter().all(|&l| l < inv.num_classes()));
            }
        }
    }

    #[test]
    fn rejects_words_shorter_than_half_a_second() {
        let cfg = CorpusConfig {
            min_phones: 2,
            max_phones: 3,
            ..small_cfg()
        };
        let inv = PhoneInventory::generate(cfg.num_phones, 1, 1).unwrap();
        let lex = Lexicon::generate(&cfg, 1).unwrap();
        assert!(generate_corpus(&inv, &lex, &cfg, 1).is_err());
    }

    #[test]
    fn features_are_f32_exact() {
        let (_, _, corpus) = build_corpus(&small_cfg(), 1).unwrap();
        for s in corpus.segments.iter().take(5) {
            assert!(s.frames.data().iter().all(|&x| x as f32 as f64 == x));
        }
    }

    #[test]
    fn split_parsing() {
        assert_eq!("test_ood".parse::<Split>().unwrap(), Split::TestOod);
        assert!("eval".parse::<Split>().is_err());
    }
}
