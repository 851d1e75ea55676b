//! Deterministic synthetic scenes standing in for detector features.
//!
//! A scene is a handful of coloured shapes on a 4×4 grid. Each object becomes
//! one feature row: one-hot shape, colour, grid row and grid column blocks
//! followed by Gaussian noise. Questions are generated from three templates
//! whose answers are computed from the scene itself.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Category, DataError, VqaExample};
use crate::diffmath::Tensor;
use crate::textprep::{semantic_info, Wordlists};

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "hexagon", "diamond"];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"];
pub const GRID: usize = 4;
/// Width of the one-hot prefix of every feature row.
pub const ONE_HOT_WIDTH: usize = SHAPES.len() + COLORS.len() + 2 * GRID;
pub const ANNOTATORS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn count_shape(&self, shape: usize) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }

    pub fn contains(&self, color: usize, shape: usize) -> bool {
        self.objects.iter().any(|o| o.color == color && o.shape == shape)
    }

    /// Colour of the only object with this shape, if exactly one exists.
    pub fn unique_color(&self, shape: usize) -> Option<usize> {
        let mut it = self.objects.iter().filter(|o| o.shape == shape);
        match (it.next(), it.next()) {
            (Some(o), None) => Some(o.color),
            _ => None,
        }
    }
}

/// Scene with a uniformly drawn object count in `range` (inclusive) and
/// distinct grid cells.
pub fn gen_scene(seed: u64, range: (usize, usize)) -> Result<SceneSpec, DataError> {
    let (lo, hi) = range;
    if lo == 0 || lo > hi || hi > GRID * GRID {
        return Err(DataError::Config(format!(
            "object count range [{lo}, {hi}] must lie within [1, {}]",
            GRID * GRID
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(lo..=hi);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(&mut rng);
    let objects = cells[..count]
        .iter()
        .map(|&cell| SceneObject {
            shape: rng.random_range(0..SHAPES.len()),
            color: rng.random_range(0..COLORS.len()),
            row: cell / GRID,
            col: cell % GRID,
        })
        .collect();
    Ok(SceneSpec { objects, seed })
}

/// One feature row per object: one-hot blocks, then noise.
pub fn scene_to_features(scene: &SceneSpec, d_image: usize, noise_sigma: f64, seed: u64) -> Result<Tensor, DataError> {
    if d_image < ONE_HOT_WIDTH {
        return Err(DataError::Config(format!(
            "d_image {d_image} is smaller than the {ONE_HOT_WIDTH} one-hot coordinates"
        )));
    }
    if scene.objects.is_empty() {
        return Err(DataError::Config("scene has no objects".into()));
    }
    let normal = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| DataError::Config(format!("noise_sigma {noise_sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(scene.objects.len() * d_image);
    for o in &scene.objects {
        let mut row = vec![0.0; d_image];
        row[o.shape] = 1.0;
        row[SHAPES.len() + o.color] = 1.0;
        row[SHAPES.len() + COLORS.len() + o.row] = 1.0;
        row[SHAPES.len() + COLORS.len() + GRID + o.col] = 1.0;
        if noise_sigma > 0.0 {
            for v in &mut row[ONE_HOT_WIDTH..] {
                *v = normal.sample(&mut rng);
            }
        }
        data.extend(row);
    }
    Ok(Tensor::matrix(scene.objects.len(), d_image, data)?)
}

/// Caption fragments for a scene: `"a <color> <shape>"` per object, some
/// repeated or reworded so the dedup step has real work.
pub fn scene_captions<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> Vec<String> {
    let mut captions = Vec::new();
    for o in &scene.objects {
        let base = format!("{} {}", o.color_name(), o.shape_name());
        captions.push(format!("a {base}"));
        match rng.random_range(0..4) {
            0 => captions.push(format!("a {base}")),
            1 => captions.push(base),
            2 => captions.push(format!("the {base}")),
            _ => {}
        }
    }
    captions
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Template {
    Existence,
    Counting,
    Attribute,
}

/// Questions about one scene, one per template. The attribute question is
/// skipped unless some shape occurs exactly once.
pub fn gen_examples<R: Rng + ?Sized>(
    scene: &SceneSpec,
    image_id: u64,
    annotator_noise: f64,
    si_words: &[String],
    image_feats: &Tensor,
    rng: &mut R,
) -> Vec<VqaExample> {
    let mut out = Vec::new();
    for (k, template) in [Template::Existence, Template::Counting, Template::Attribute]
        .into_iter()
        .enumerate()
    {
        let Some((question, truth, category)) = ask(scene, template, rng) else {
            continue;
        };
        let answers = (0..ANNOTATORS)
            .map(|_| {
                if annotator_noise > 0.0 && rng.random_bool(annotator_noise.min(1.0)) {
                    plausible_answer(category, rng)
                } else {
                    truth.clone()
                }
            })
            .collect();
        out.push(VqaExample {
            question_id: image_id * 10 + k as u64,
            image_id,
            question,
            image_feats: image_feats.clone(),
            si_words: si_words.to_vec(),
            answers,
            canonical_answer: Some(truth),
            category: Some(category),
        });
    }
    out
}

fn ask<R: Rng + ?Sized>(scene: &SceneSpec, template: Template, rng: &mut R) -> Option<(String, String, Category)> {
    // half of the probes target an object that is present, to balance answers
    let present = scene.objects[rng.random_range(0..scene.objects.len())];
    let use_present = rng.random_bool(0.5);
    match template {
        Template::Existence => {
            let (color, shape) = if use_present {
                (present.color, present.shape)
            } else {
                (rng.random_range(0..COLORS.len()), rng.random_range(0..SHAPES.len()))
            };
            let truth = if scene.contains(color, shape) { "yes" } else { "no" };
            Some((
                format!("is there a {} {}?", COLORS[color], SHAPES[shape]),
                truth.to_owned(),
                Category::YesNo,
            ))
        }
        Template::Counting => {
            let shape = if use_present {
                present.shape
            } else {
                rng.random_range(0..SHAPES.len())
            };
            Some((
                format!("how many {}s?", SHAPES[shape]),
                scene.count_shape(shape).to_string(),
                Category::Number,
            ))
        }
        Template::Attribute => {
            let unique: Vec<usize> = (0..SHAPES.len()).filter(|&s| scene.unique_color(s).is_some()).collect();
            if unique.is_empty() {
                return None;
            }
            let shape = unique[rng.random_range(0..unique.len())];
            let color = scene.unique_color(shape)?;
            Some((
                format!("what color is the {}?", SHAPES[shape]),
                COLORS[color].to_owned(),
                Category::Other,
            ))
        }
    }
}

fn plausible_answer<R: Rng + ?Sized>(category: Category, rng: &mut R) -> String {
    match category {
        Category::YesNo => if rng.random_bool(0.5) { "yes" } else { "no" }.to_owned(),
        Category::Number => rng.random_range(0..=4usize).to_string(),
        Category::Other => COLORS[rng.random_range(0..COLORS.len())].to_owned(),
    }
}

/// Generator settings for a train/val corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub d_image: usize,
    pub noise_sigma: f64,
    pub annotator_noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_examples: 5000,
            val_examples: 1000,
            d_image: 64,
            noise_sigma: 0.1,
            annotator_noise: 0.1,
            min_objects: 2,
            max_objects: 8,
        }
    }
}

/// A generated train/val pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<VqaExample>,
    pub val: Vec<VqaExample>,
}

const TRAIN_IMAGE_BASE: u64 = 1;
const VAL_IMAGE_BASE: u64 = 1_000_001;

/// Exactly `count` examples from scenes seeded off `(seed, split)`.
pub fn gen_split(config: &SynthConfig, split: u64, count: usize) -> Result<Vec<VqaExample>, DataError> {
    let lists = Wordlists::shipped();
    let base = if split == 0 { TRAIN_IMAGE_BASE } else { VAL_IMAGE_BASE };
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    seeds.set_stream(split + 1);
    let mut out = Vec::with_capacity(count);
    let mut image = 0u64;
    while out.len() < count {
        let scene_seed = seeds.random::<u64>();
        let scene = gen_scene(scene_seed, (config.min_objects, config.max_objects))?;
        let feats = scene_to_features(&scene, config.d_image, config.noise_sigma, scene_seed ^ 0x5eed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        rng.set_stream(7);
        let si = semantic_info(&scene_captions(&scene, &mut rng), &lists);
        let examples = gen_examples(&scene, base + image, config.annotator_noise, &si, &feats, &mut rng);
        let room = count - out.len();
        out.extend(examples.into_iter().take(room));
        image += 1;
    }
    Ok(out)
}

pub fn gen_corpus(config: &SynthConfig) -> Result<Corpus, DataError> {
    Ok(Corpus {
        train: gen_split(config, 0, config.train_examples)?,
        val: gen_split(config, 1, config.val_examples)?,
    })
}

/// Recomputes the canonical answer of a generated question from its scene.
pub fn oracle_answer(scene: &SceneSpec, question: &str) -> Option<String> {
    let q = question.trim_end_matches('?');
    let find = |names: &[&str], word: &str| names.iter().position(|n| *n == word);
    if let Some(rest) = q.strip_prefix("is there a ") {
        let (c, s) = rest.split_once(' ')?;
        let yes = scene.contains(find(&COLORS, c)?, find(&SHAPES, s)?);
        return Some(if yes { "yes" } else { "no" }.to_owned());
    }
    if let Some(rest) = q.strip_prefix("how many ") {
        let s = find(&SHAPES, rest.strip_suffix('s')?)?;
        return Some(scene.count_shape(s).to_string());
    }
    if let Some(rest) = q.strip_prefix("what color is the ") {
        let s = find(&SHAPES, rest)?;
        return scene.unique_color(s).map(|c| COLORS[c].to_owned());
    }
    None
}
