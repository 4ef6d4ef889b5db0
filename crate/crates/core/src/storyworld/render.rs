//! Sprite art, scene rendering and the inverse scene detector.
//!
//! A scene is a 4x4 grid of 8x8 cells. Row 0 is sky with the action icon
//! in the last column; rows 1-3 are ground, with character slots in the
//! first three cells of row 2. Every cell is flat color plus an axis-aligned
//! glyph, so the set of distinct cells is small and fixed: 4 sky + 4 ground
//! + 32 icon-over-sky + 24 character-over-ground = 64.

use crate::image::Image;
use crate::storyworld::{SceneSpec, WorldError, ACTIONS, BACKGROUNDS, CHARACTERS};

pub const CELL: usize = 8;
pub const GRID: usize = 4;
pub const SIZE: usize = CELL * GRID;
pub const ICON_CELL: (usize, usize) = (0, 3);
pub const SLOTS: [(usize, usize); 3] = [(2, 0), (2, 1), (2, 2)];

const SKY: [[u8; 3]; 4] = [[200, 220, 255], [150, 200, 150], [200, 170, 130], [100, 180, 255]];
const GROUND: [[u8; 3]; 4] = [[250, 250, 250], [30, 110, 40], [140, 90, 50], [240, 220, 150]];
const CHARACTER_COLORS: [[u8; 3]; 6] = [[40, 80, 220], [60, 180, 60], [240, 140, 30], [250, 130, 180], [120, 120, 120], [150, 70, 200]];
const ICON_COLOR: [u8; 3] = [20, 20, 20];

/// 4x4 icon bitmasks, one bit per 2x2 block, row-major from the top-left.
const ICONS: [u16; 8] = [
    0b0110_1001_1001_0110,
    0b1000_1100_1110_1111,
    0b0100_1110_0100_0100,
    0b1111_1001_1001_1111,
    0b0000_1111_0000_1111,
    0b1010_0101_1010_0101,
    0b1001_0110_0110_1001,
    0b1111_0000_1111_0000,
];

fn fill(cell: &mut [u8], color: [u8; 3]) {
    for px in cell.chunks_mut(3) {
        px.copy_from_slice(&color);
    }
}

fn put(cell: &mut [u8], x: usize, y: usize, color: [u8; 3]) {
    let i = (y * CELL + x) * 3;
    cell[i..i + 3].copy_from_slice(&color);
}

pub fn sky_cell(bg: usize) -> Vec<u8> {
    let mut c = vec![0; CELL * CELL * 3];
    fill(&mut c, SKY[bg]);
    c
}

pub fn ground_cell(bg: usize) -> Vec<u8> {
    let mut c = vec![0; CELL * CELL * 3];
    fill(&mut c, GROUND[bg]);
    c
}

pub fn icon_cell(action: usize, bg: usize) -> Vec<u8> {
    let mut c = sky_cell(bg);
    for b in 0..16 {
        if ICONS[action] >> (15 - b) & 1 == 1 {
            let (bx, by) = ((b % 4) * 2, (b / 4) * 2);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                put(&mut c, bx + dx, by + dy, ICON_COLOR);
            }
        }
    }
    c
}

/// Character body: a 4-wide column with a 6-wide head row and two eyes.
pub fn character_cell(ch: usize, bg: usize) -> Vec<u8> {
    let mut c = ground_cell(bg);
    let color = CHARACTER_COLORS[ch];
    for y in 1..8 {
        let (x0, x1) = if y == 2 || y == 3 { (1, 7) } else { (2, 6) };
        for x in x0..x1 {
            put(&mut c, x, y, color);
        }
    }
    put(&mut c, 3, 2, [0, 0, 0]);
    put(&mut c, 4 + ch % 2, 2, [0, 0, 0]);
    c
}

fn check(spec: &SceneSpec) -> Result<(), WorldError> {
    if spec.background >= BACKGROUNDS.len() {
        return Err(WorldError::InvalidId(format!("background {}", spec.background)));
    }
    if spec.action >= ACTIONS.len() {
        return Err(WorldError::InvalidId(format!("action {}", spec.action)));
    }
    if spec.characters.len() > SLOTS.len() {
        return Err(WorldError::InvalidId(format!("{} characters exceed {} slots", spec.characters.len(), SLOTS.len())));
    }
    if let Some(c) = spec.characters.iter().find(|&&c| c >= CHARACTERS.len()) {
        return Err(WorldError::InvalidId(format!("character {c}")));
    }
    if spec.characters.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WorldError::InvalidId("characters must be sorted and distinct".into()));
    }
    Ok(())
}

/// Background tiles, the action icon, and characters left to right in
/// ascending id order.
pub fn render_scene(spec: &SceneSpec) -> Result<Image, WorldError> {
    check(spec)?;
    let mut img = Image::filled(SIZE, SIZE, [0, 0, 0]);
    let bg = spec.background;
    for row in 0..GRID {
        for col in 0..GRID {
            let cell = if row == 0 { sky_cell(bg) } else { ground_cell(bg) };
            img.set_patch(col * CELL, row * CELL, CELL, &cell);
        }
    }
    img.set_patch(ICON_CELL.1 * CELL, ICON_CELL.0 * CELL, CELL, &icon_cell(spec.action, bg));
    for (&ch, &(row, col)) in spec.characters.iter().zip(&SLOTS) {
        img.set_patch(col * CELL, row * CELL, CELL, &character_cell(ch, bg));
    }
    Ok(img)
}

/// What the detector recovers from an image.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DetectedScene {
    pub background: Option<usize>,
    pub characters: Vec<usize>,
    pub action: Option<usize>,
}

impl DetectedScene {
    pub fn matches(&self, spec: &SceneSpec) -> bool {
        self.background == Some(spec.background) && self.action == Some(spec.action) && self.characters == spec.characters
    }
}

/// Mean squared per-channel difference above which a match is rejected.
pub const MATCH_THRESHOLD: f64 = 900.0;

fn msd(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn nearest(cell: &[u8], candidates: impl Iterator<Item = (usize, Vec<u8>)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (id, c) in candidates {
        let d = msd(cell, &c);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((id, d));
        }
    }
    best
}

/// Nearest-template inversion of [`render_scene`].
///
/// The background is the closest match over the cells that never hold a
/// sprite; the icon and each slot are matched against every sprite over
/// every background. Matches farther than [`MATCH_THRESHOLD`] report none.
pub fn detect_scene(img: &Image) -> Result<DetectedScene, WorldError> {
    if img.width() != SIZE || img.height() != SIZE || img.channels() != 3 {
        return Err(WorldError::ImageShape(format!("{}x{}x{}", img.width(), img.height(), img.channels())));
    }
    let cell = |(row, col): (usize, usize)| img.patch(col * CELL, row * CELL, CELL);
    let mut region = Vec::new();
    let mut templates: Vec<Vec<u8>> = vec![Vec::new(); BACKGROUNDS.len()];
    for row in 0..GRID {
        for col in 0..GRID {
            if (row, col) == ICON_CELL || SLOTS.contains(&(row, col)) {
                continue;
            }
            region.extend(cell((row, col)));
            for (bg, t) in templates.iter_mut().enumerate() {
                t.extend(if row == 0 { sky_cell(bg) } else { ground_cell(bg) });
            }
        }
    }
    let background = nearest(&region, templates.into_iter().enumerate()).filter(|&(_, d)| d <= MATCH_THRESHOLD).map(|(bg, _)| bg);

    let n_bg = BACKGROUNDS.len();
    let action = nearest(
        &cell(ICON_CELL),
        (0..ACTIONS.len() * n_bg).map(|i| (i / n_bg, icon_cell(i / n_bg, i % n_bg))).chain((0..n_bg).map(|bg| (usize::MAX, sky_cell(bg)))),
    )
    .filter(|&(a, d)| a != usize::MAX && d <= MATCH_THRESHOLD)
    .map(|(a, _)| a);

    let mut characters = Vec::new();
    for &slot in &SLOTS {
        let found = nearest(
            &cell(slot),
            (0..CHARACTERS.len() * n_bg)
                .map(|i| (i / n_bg, character_cell(i / n_bg, i % n_bg)))
                .chain((0..n_bg).map(|bg| (usize::MAX, ground_cell(bg)))),
        );
        if let Some((ch, d)) = found {
            if ch != usize::MAX && d <= MATCH_THRESHOLD {
                characters.push(ch);
            }
        }
    }
    characters.sort_unstable();
    characters.dedup();
    Ok(DetectedScene { background, characters, action })
}

/// Every distinct cell the renderer can produce.
pub fn all_cells() -> Vec<Vec<u8>> {
    let n_bg = BACKGROUNDS.len();
    let mut out: Vec<Vec<u8>> = (0..n_bg).flat_map(|bg| [sky_cell(bg), ground_cell(bg)]).collect();
    for a in 0..ACTIONS.len() {
        out.extend((0..n_bg).map(|bg| icon_cell(a, bg)));
    }
    for c in 0..CHARACTERS.len() {
        out.extend((0..n_bg).map(|bg| character_cell(c, bg)));
    }
    out
}
