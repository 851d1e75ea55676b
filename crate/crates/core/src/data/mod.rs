//! Dataset contract, VQA-v2-shaped file formats, split scaling and the
//! synthetic generator.
//!
//! A split directory holds:
//!
//! | file | content |
//! |---|---|
//! | `questions.json` | `{"questions": [{"question_id", "image_id", "question"}]}` |
//! | `annotations.json` | `{"annotations": [{"question_id", "image_id", "answers": [{"answer"}×10], "multiple_choice_answer", "answer_type"}]}`, absent for test splits |
//! | `features.json` | `{"features": {"<image_id>": [[f64; d_image]; f_i]}}` |
//! | `features.bin` | binary alternative to `features.json`, see [`write_features_bin`] |
//! | `si.json` | `{"<image_id>": ["word", ...]}` as produced by `prep` |

mod encode;
mod synth;

pub use encode::{
    build_answer_set, build_vocabulary, encode_example, encode_examples, soft_scores, token_sequences, EncodedExample,
};

pub use synth::{
    gen_corpus, gen_examples, gen_scene, gen_split, oracle_answer, scene_captions, scene_to_features, Corpus,
    SceneObject, SceneSpec, SynthConfig, ANNOTATORS, COLORS, GRID, ONE_HOT_WIDTH, SHAPES,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse { path: String, offset: usize, message: String },
    #[error("dangling references: {0}")]
    Dangling(String),
    #[error("{path}: malformed binary features: {message}")]
    Binary { path: String, message: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Question family, as in the VQA answer types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "yes/no")]
    YesNo,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "other")]
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::YesNo, Category::Number, Category::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::YesNo => "yes/no",
            Category::Number => "number",
            Category::Other => "other",
        }
    }
}

/// One question with everything needed to answer and score it. Test-split
/// examples have no answers, canonical answer or category.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaExample {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
    pub image_feats: Tensor,
    pub si_words: Vec<String>,
    pub answers: Vec<String>,
    pub canonical_answer: Option<String>,
    pub category: Option<Category>,
}

impl VqaExample {
    pub fn is_annotated(&self) -> bool {
        !self.answers.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QuestionsFile {
    questions: Vec<QuestionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuestionRecord {
    question_id: u64,
    image_id: u64,
    question: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationsFile {
    annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    question_id: u64,
    image_id: u64,
    answers: Vec<AnswerRecord>,
    multiple_choice_answer: String,
    answer_type: Category,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnswerRecord {
    answer: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeaturesFile {
    features: BTreeMap<String, Vec<Vec<f64>>>,
}

/// Paths of one split's files.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPaths {
    pub questions: PathBuf,
    pub annotations: Option<PathBuf>,
    pub features: PathBuf,
    pub si: PathBuf,
}

impl SplitPaths {
    /// Standard names inside `dir`; annotations and binary features are used when present.
    pub fn in_dir(dir: &Path) -> Self {
        let annotations = dir.join("annotations.json");
        let bin = dir.join("features.bin");
        Self {
            questions: dir.join("questions.json"),
            annotations: annotations.exists().then_some(annotations),
            features: if bin.exists() { bin } else { dir.join("features.json") },
            si: dir.join("si.json"),
        }
    }
}

/// Result of [`load_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSplit {
    pub examples: Vec<VqaExample>,
    /// Images referenced by questions that had no SI entry.
    pub missing_si: usize,
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Byte offset of a serde_json error position (1-based line and column).
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in bytes.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<T, DataError> {
    serde_json::from_slice(bytes).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    parse_json(&read(path)?, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let bytes = serde_json::to_vec(value).map_err(|e| DataError::Config(e.to_string()))?;
    write(path, &bytes)
}

const FEATURES_MAGIC: &[u8; 4] = b"VQAF";

/// Binary features: `"VQAF"`, u32 image count, then per image a u64 id,
/// u32 rows, u32 cols and `rows·cols` f64 values, all little-endian, in
/// ascending id order.
pub fn write_features_bin(path: &Path, features: &BTreeMap<u64, Tensor>) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(features.len() as u32).to_le_bytes());
    for (id, t) in features {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(path, &out)
}

pub fn read_features_bin(path: &Path) -> Result<BTreeMap<u64, Tensor>, DataError> {
    let bytes = read(path)?;
    let err = |message: &str| DataError::Binary {
        path: path.display().to_string(),
        message: message.to_owned(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| err("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != FEATURES_MAGIC {
        return Err(err("bad magic"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let rows = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| err("extent overflow"))?;
        let data = take(n.checked_mul(8).ok_or_else(|| err("extent overflow"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::matrix(rows, cols, data).map_err(|e| err(&e.to_string()))?;
        out.insert(id, t);
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes"));
    }
    Ok(out)
}

fn read_features(path: &Path) -> Result<BTreeMap<u64, Tensor>, DataError> {
    if path.extension().is_some_and(|e| e == "bin") {
        return read_features_bin(path);
    }
    let file: FeaturesFile = read_json(path)?;
    file.features
        .into_iter()
        .map(|(k, rows)| {
            let id = k
                .parse()
                .map_err(|_| DataError::Config(format!("{}: image id {k:?} is not an integer", path.display())))?;
            Ok((id, Tensor::from_rows(&rows)?))
        })
        .collect()
}

/// Writes one split. `binary_features` selects `features.bin` over `features.json`.
/// Annotations are written only when every example carries them.
pub fn save_split(dir: &Path, examples: &[VqaExample], binary_features: bool) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let questions = QuestionsFile {
        questions: examples
            .iter()
            .map(|e| QuestionRecord {
                question_id: e.question_id,
                image_id: e.image_id,
                question: e.question.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("questions.json"), &questions)?;

    if !examples.is_empty() && examples.iter().all(VqaExample::is_annotated) {
        let annotations = AnnotationsFile {
            annotations: examples
                .iter()
                .map(|e| AnnotationRecord {
                    question_id: e.question_id,
                    image_id: e.image_id,
                    answers: e.answers.iter().map(|a| AnswerRecord { answer: a.clone() }).collect(),
                    multiple_choice_answer: e.canonical_answer.clone().unwrap_or_default(),
                    answer_type: e.category.unwrap_or(Category::Other),
                })
                .collect(),
        };
        write_json(&dir.join("annotations.json"), &annotations)?;
    }

    let mut feats: BTreeMap<u64, Tensor> = BTreeMap::new();
    let mut si: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in examples {
        feats.entry(e.image_id).or_insert_with(|| e.image_feats.clone());
        si.entry(e.image_id.to_string()).or_insert_with(|| e.si_words.clone());
    }
    if binary_features {
        write_features_bin(&dir.join("features.bin"), &feats)?;
    } else {
        let file = FeaturesFile {
            features: feats.iter().map(|(k, t)| (k.to_string(), t.to_rows())).collect(),
        };
        write_json(&dir.join("features.json"), &file)?;
    }
    write_json(&dir.join("si.json"), &si)
}

/// Joins the split files into examples, in question-file order.
pub fn load_dataset(paths: &SplitPaths) -> Result<LoadedSplit, DataError> {
    let questions: QuestionsFile = read_json(&paths.questions)?;
    let features = read_features(&paths.features)?;
    let si: BTreeMap<String, Vec<String>> = read_json(&paths.si)?;
    let annotations: Option<BTreeMap<u64, AnnotationRecord>> = match &paths.annotations {
        Some(p) => {
            let file: AnnotationsFile = read_json(p)?;
            Some(file.annotations.into_iter().map(|a| (a.question_id, a)).collect())
        }
        None => None,
    };

    let missing_images: BTreeSet<u64> = questions
        .questions
        .iter()
        .map(|q| q.image_id)
        .filter(|id| !features.contains_key(id))
        .collect();
    if !missing_images.is_empty() {
        return Err(DataError::Dangling(format!(
            "questions reference images without features: {:?}",
            missing_images
        )));
    }
    if let Some(ann) = &annotations {
        let qids: BTreeSet<u64> = questions.questions.iter().map(|q| q.question_id).collect();
        let unannotated: Vec<u64> = qids.iter().filter(|q| !ann.contains_key(q)).copied().collect();
        let orphans: Vec<u64> = ann.keys().filter(|q| !qids.contains(q)).copied().collect();
        if !unannotated.is_empty() || !orphans.is_empty() {
            return Err(DataError::Dangling(format!(
                "questions without annotations: {unannotated:?}; annotations without questions: {orphans:?}"
            )));
        }
    }

    let mut missing_si = BTreeSet::new();
    let examples = questions
        .questions
        .into_iter()
        .map(|q| {
            let si_words = match si.get(&q.image_id.to_string()) {
                Some(w) => w.clone(),
                None => {
                    missing_si.insert(q.image_id);
                    Vec::new()
                }
            };
            let ann = annotations.as_ref().and_then(|a| a.get(&q.question_id));
            VqaExample {
                question_id: q.question_id,
                image_id: q.image_id,
                question: q.question,
                image_feats: features[&q.image_id].clone(),
                si_words,
                answers: ann.map(|a| a.answers.iter().map(|r| r.answer.clone()).collect()).unwrap_or_default(),
                canonical_answer: ann.map(|a| a.multiple_choice_answer.clone()),
                category: ann.map(|a| a.answer_type),
            }
        })
        .collect();
    if !missing_si.is_empty() {
        log::warn!("{} images have no semantic information", missing_si.len());
    }
    Ok(LoadedSplit {
        examples,
        missing_si: missing_si.len(),
    })
}

pub const SCALE_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Indices of the scaled subset: the first `⌈fraction·n⌉` entries of a
/// seeded permutation, returned in ascending order. Prefixes of one
/// permutation nest, so smaller fractions are subsets of larger ones.
pub fn scale_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx = perm[..keep].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn scale_split(examples: &[VqaExample], fraction: f64, seed: u64) -> Result<Vec<VqaExample>, DataError> {
    Ok(scale_indices(examples.len(), fraction, seed)?
        .into_iter()
        .map(|i| examples[i].clone())
        .collect())
}
