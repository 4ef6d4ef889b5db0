//! A procedural story world with known ground truth.
//!
//! Stories have a fixed background and cast. Each frame shows a subset of
//! the cast doing one action; the caption names the characters and the
//! action, but only the first caption may name the background. Later
//! captions may also call the whole cast "friends". Recovering either from
//! earlier frames is what the context memory is for.

mod render;
mod templates;

pub use render::{all_cells, detect_scene, render_scene, DetectedScene, CELL, GRID, ICON_CELL, MATCH_THRESHOLD, SIZE, SLOTS};
pub use templates::{character_phrase, BACKGROUND_PHRASES, FRIENDS, TEMPLATES, TEMPLATES_PER_ACTION};

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsio::atomic_write;
use crate::image::Image;
use crate::rng;

pub const BACKGROUNDS: [&str; 4] = ["snow", "forest", "room", "beach"];
pub const CHARACTERS: [&str; 6] = ["pororo", "crong", "eddy", "loopy", "poby", "petty"];
pub const ACTIONS: [&str; 8] = ["walk", "run", "jump", "eat", "sleep", "sing", "dance", "read"];

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid scene: {0}")]
    InvalidId(String),
    #[error("bad image shape {0}, expected 32x32x3")]
    ImageShape(String),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("dataset io: {0}")]
    Io(#[from] io::Error),
    #[error("dataset index: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ground truth for one frame. `characters` is sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: usize,
    pub characters: Vec<usize>,
    pub action: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub frames: usize,
    /// Probability that the first caption names the background.
    pub p_context: f64,
    /// Probability that a later caption showing the whole cast says "friends".
    pub p_friends: f64,
    /// Probability that a frame shows the whole cast.
    pub p_full_cast: f64,
    pub max_cast: usize,
    /// Templates per action reserved for the test split.
    pub held_out_templates: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { frames: 5, p_context: 1.0, p_friends: 0.2, p_full_cast: 0.7, max_cast: 3, held_out_templates: 2 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Config(m));
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        for (name, p) in [("p_context", self.p_context), ("p_friends", self.p_friends), ("p_full_cast", self.p_full_cast)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.max_cast == 0 || self.max_cast > SLOTS.len() {
            return bad(format!("max_cast must be in 1..={}", SLOTS.len()));
        }
        if self.held_out_templates == 0 || self.held_out_templates >= TEMPLATES_PER_ACTION {
            return bad(format!(
                "{} templates per action cannot be split with {} held out",
                TEMPLATES_PER_ACTION, self.held_out_templates
            ));
        }
        Ok(())
    }

    /// Template indices usable by the train/val splits and by the test split.
    pub fn template_split(&self) -> (Vec<usize>, Vec<usize>) {
        let cut = TEMPLATES_PER_ACTION - self.held_out_templates;
        ((0..cut).collect(), (cut..TEMPLATES_PER_ACTION).collect())
    }
}

/// The caption for one frame.
pub fn realize_sentence(spec: &SceneSpec, template: usize, alias_friends: bool, mention_background: bool) -> Result<String, WorldError> {
    if spec.action >= ACTIONS.len() || template >= TEMPLATES_PER_ACTION || spec.background >= BACKGROUNDS.len() {
        return Err(WorldError::InvalidId(format!("action {} template {}", spec.action, template)));
    }
    if spec.characters.iter().any(|&c| c >= CHARACTERS.len()) {
        return Err(WorldError::InvalidId(format!("characters {:?}", spec.characters)));
    }
    let names: Vec<&str> = spec.characters.iter().map(|&c| CHARACTERS[c]).collect();
    let chars = if alias_friends { FRIENDS.to_string() } else { character_phrase(&names) };
    let bg = mention_background.then_some(BACKGROUND_PHRASES[spec.background]);
    Ok(templates::fill(TEMPLATES[spec.action][template], &chars, bg))
}

/// Everything known about one generated story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub seed: u64,
    pub scenes: Vec<SceneSpec>,
    pub sentences: Vec<String>,
    pub templates: Vec<usize>,
    pub aliased: Vec<bool>,
    pub background_mentioned: Vec<bool>,
    #[serde(skip)]
    pub images: Vec<Image>,
}

impl Story {
    /// True when no caption after the first names the background.
    pub fn later_captions_omit_background(&self) -> bool {
        self.background_mentioned.iter().skip(1).all(|&m| !m)
    }
}

/// Samples a story. Templates come from `templates`, indices into each
/// action's template list.
pub fn sample_story(seed: u64, cfg: &WorldConfig, templates: &[usize]) -> Result<Story, WorldError> {
    cfg.validate()?;
    if templates.is_empty() {
        return Err(WorldError::Config("no templates to sample from".into()));
    }
    let mut rng = rng::stream(seed, &[]);
    let background = rng.random_range(0..BACKGROUNDS.len());
    let cast_size = rng.random_range(1..=cfg.max_cast);
    let mut cast: Vec<usize> = (0..CHARACTERS.len()).collect::<Vec<_>>().choose_multiple(&mut rng, cast_size).copied().collect();
    cast.sort_unstable();

    let mut story = Story {
        seed,
        scenes: Vec::new(),
        sentences: Vec::new(),
        templates: Vec::new(),
        aliased: Vec::new(),
        background_mentioned: Vec::new(),
        images: Vec::new(),
    };
    for frame in 0..cfg.frames {
        let characters = if cast.len() == 1 || rng.random_bool(cfg.p_full_cast) {
            cast.clone()
        } else {
            let k = rng.random_range(1..cast.len());
            let mut sub = cast.clone();
            sub.shuffle(&mut rng);
            sub.truncate(k);
            sub.sort_unstable();
            sub
        };
        let spec = SceneSpec { background, characters, action: rng.random_range(0..ACTIONS.len()), frame };
        let template = *templates.choose(&mut rng).expect("non-empty");
        let full = spec.characters == cast && cast.len() >= 2;
        let alias = frame > 0 && full && rng.random_bool(cfg.p_friends);
        let mention = frame == 0 && rng.random_bool(cfg.p_context);
        story.sentences.push(realize_sentence(&spec, template, alias, mention)?);
        story.images.push(render_scene(&spec)?);
        story.scenes.push(spec);
        story.templates.push(template);
        story.aliased.push(alias);
        story.background_mentioned.push(mention);
    }
    Ok(story)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub train: Vec<Story>,
    pub val: Vec<Story>,
    pub test: Vec<Story>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Story] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Story> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Train and val stories use the shared templates; test stories use only
/// the held-out ones. Story `i` of a split is seeded from `(seed, split, i)`.
pub fn make_splits(n_train: usize, n_val: usize, n_test: usize, seed: u64, cfg: &WorldConfig) -> Result<Dataset, WorldError> {
    cfg.validate()?;
    let (seen, held_out) = cfg.template_split();
    let mut data = Dataset { config: cfg.clone(), seed, train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (code, (split, n)) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)].into_iter().enumerate() {
        let templates = if split == Split::Test { &held_out } else { &seen };
        *data.split_mut(split) = (0..n)
            .map(|i| sample_story(rng::derive_seed(seed, &[code as u64, i as u64]), cfg, templates))
            .collect::<Result<_, _>>()?;
    }
    Ok(data)
}

const INDEX: &str = "index.json";

fn image_name(split: Split, story: usize, frame: usize) -> String {
    format!("{}_{story:05}_{frame}.raw", split.name())
}

/// Writes `index.json` plus one raw image per frame under `images/`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<(), WorldError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    for split in Split::ALL {
        for (i, story) in data.split(split).iter().enumerate() {
            for (f, img) in story.images.iter().enumerate() {
                atomic_write(&images.join(image_name(split, i, f)), &img.to_raw_bytes())?;
            }
        }
    }
    let mut index = serde_json::to_vec_pretty(data)?;
    index.push(b'\n');
    atomic_write(&dir.join(INDEX), &index)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, WorldError> {
    let mut data: Dataset = serde_json::from_slice(&fs::read(dir.join(INDEX))?)?;
    let images = dir.join("images");
    for split in Split::ALL {
        for (i, story) in data.split_mut(split).iter_mut().enumerate() {
            story.images = (0..story.scenes.len())
                .map(|f| Image::read_raw(fs::File::open(images.join(image_name(split, i, f)))?))
                .collect::<io::Result<_>>()?;
        }
    }
    Ok(data)
}

/// Every caption of every split, in order.
pub fn all_sentences(data: &Dataset) -> Vec<String> {
    Split::ALL.iter().flat_map(|&s| data.split(s).iter().flat_map(|st| st.sentences.iter().cloned())).collect()
}

/// The words any caption can contain, so held-out templates never go out
/// of vocabulary.
pub fn world_lexicon() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut add = |s: &str| {
        for w in s.split_whitespace().filter(|w| !w.starts_with('{')) {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    };
    for t in TEMPLATES.iter().flatten() {
        add(t);
    }
    for s in BACKGROUND_PHRASES.iter().chain(&CHARACTERS).chain(&[FRIENDS, "and"]) {
        add(s);
    }
    words
}
