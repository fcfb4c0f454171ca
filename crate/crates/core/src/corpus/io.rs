//! Two-file corpus format.
//!
//! `corpus.jsonl` starts with a header object and then holds one JSON record
//! per segment: `{id, word, split, num_frames, labels, offset_bytes}`.
//! `features.f32` is the concatenation of every segment's `T x 40` frames as
//! little-endian `f32`, row-major, at the recorded offsets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, FeatureSequence, Split, WordId, FEAT_DIM, FRAME_HOP_SECONDS};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const METADATA_FILE: &str = "corpus.jsonl";
pub const FEATURES_FILE: &str = "features.f32";

const MAGIC: &str = "PATN-CORPUS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    version: u32,
    feat_dim: usize,
    frame_hop_seconds: f64,
    #[serde(default)]
    num_classes: usize,
    #[serde(default)]
    keywords: BTreeMap<Split, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    word: String,
    split: Split,
    num_frames: usize,
    labels: Vec<usize>,
    offset_bytes: u64,
}

/// Writes `corpus.jsonl` and `features.f32` into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = BufWriter::new(fs::File::create(dir.join(METADATA_FILE))?);
    let mut feats = BufWriter::new(fs::File::create(dir.join(FEATURES_FILE))?);
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        feat_dim: FEAT_DIM,
        frame_hop_seconds: FRAME_HOP_SECONDS,
        num_classes: corpus.num_classes,
        keywords: corpus
            .keywords
            .iter()
            .map(|(s, ws)| (*s, ws.iter().map(|&w| corpus.word_name(w).to_string()).collect()))
            .collect(),
    };
    serde_json::to_writer(&mut meta, &header)?;
    meta.write_all(b"\n")?;
    let mut offset = 0u64;
    for seg in &corpus.segments {
        let rec = Record {
            id: seg.id,
            word: corpus.word_name(seg.word).to_string(),
            split: seg.split,
            num_frames: seg.num_frames(),
            labels: seg.labels.clone(),
            offset_bytes: offset,
        };
        serde_json::to_writer(&mut meta, &rec)?;
        meta.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(seg.frames.len() * 4);
        for &x in seg.frames.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        feats.write_all(&buf)?;
        offset += buf.len() as u64;
    }
    meta.flush()?;
    feats.flush()?;
    Ok(())
}

/// Reads a corpus directory written by [`save_corpus`], validating the
/// header, every record, and the feature-file size.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join(METADATA_FILE);
    let feat_path = dir.join(FEATURES_FILE);
    let features = fs::read(&feat_path)?;
    let reader = BufReader::new(fs::File::open(&meta_path)?);
    let mut lines = reader.lines();

    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(&meta_path, "empty metadata file"))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::format(&meta_path, format!("line 1: bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::format(&meta_path, format!("bad magic `{}`", header.magic)));
    }
    if header.version != VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported version {}", header.version),
        ));
    }
    if header.feat_dim != FEAT_DIM || header.frame_hop_seconds != FRAME_HOP_SECONDS {
        return Err(Error::format(
            &meta_path,
            format!(
                "frame geometry {}x{}s, expected {FEAT_DIM}x{FRAME_HOP_SECONDS}s",
                header.feat_dim, header.frame_hop_seconds
            ),
        ));
    }

    let mut vocabulary: Vec<String> = Vec::new();
    let mut ids: BTreeMap<String, WordId> = BTreeMap::new();
    let mut intern = |name: &str, vocabulary: &mut Vec<String>| -> WordId {
        *ids.entry(name.to_string()).or_insert_with(|| {
            vocabulary.push(name.to_string());
            WordId(vocabulary.len() as u32 - 1)
        })
    };

    let mut segments = Vec::new();
    let mut expected_bytes = 0u64;
    let mut max_label = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format(&meta_path, format!("line {lineno}: {e}")))?;
        if rec.num_frames == 0 || rec.labels.len() != rec.num_frames {
            return Err(Error::format(
                &meta_path,
                format!(
                    "line {lineno}: num_frames {} but {} labels",
                    rec.num_frames,
                    rec.labels.len()
                ),
            ));
        }
        let len = (rec.num_frames * FEAT_DIM * 4) as u64;
        let start = rec.offset_bytes;
        if start.checked_add(len).is_none_or(|end| end > features.len() as u64) {
            return Err(Error::format(
                &feat_path,
                format!(
                    "segment {} (line {lineno}) spans bytes {start}..{} past end {}",
                    rec.id,
                    start.saturating_add(len),
                    features.len()
                ),
            ));
        }
        expected_bytes += len;
        let data = features[start as usize..(start + len) as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        max_label = rec.labels.iter().copied().fold(max_label, usize::max);
        let word = intern(&rec.word, &mut vocabulary);
        segments.push(FeatureSequence {
            id: rec.id,
            word,
            split: rec.split,
            frames: Matrix::from_vec(rec.num_frames, FEAT_DIM, data)?,
            labels: rec.labels,
        });
    }
    if expected_bytes != features.len() as u64 {
        return Err(Error::format(
            &feat_path,
            format!(
                "records cover {expected_bytes} bytes but the file has {}",
                features.len()
            ),
        ));
    }
    let num_classes = if header.num_classes == 0 {
        max_label + 1
    } else {
        header.num_classes
    };
    if max_label >= num_classes {
        return Err(Error::format(
            &meta_path,
            format!("label {max_label} out of range for {num_classes} classes"),
        ));
    }
    let mut keywords = BTreeMap::new();
    for (split, names) in header.keywords {
        let ws = names
            .iter()
            .map(|n| {
                ids.get(n).copied().ok_or_else(|| {
                    Error::format(&meta_path, format!("keyword `{n}` has no segments"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        keywords.insert(split, ws);
    }
    Ok(Corpus {
        vocabulary,
        num_classes,
        segments,
        keywords,
    })
}
