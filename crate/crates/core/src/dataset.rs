//! Procedural token-grid corpus and its validity oracle.
//!
//! Every grid is an `side × side` raster of 6-bit intensity tokens. The 64
//! levels are split into four bands of 16; each pattern class is a constraint
//! on which band every cell falls into. Within a band, cells jitter by at most
//! one level around a per-grid base level, so the grammar constrains the band
//! map only and the fine intensities carry texture.
//!
//! Validity is exact: a grid is valid when its band map equals the map of some
//! pattern for some parameter choice. The graded score is the best fraction of
//! cells whose band agrees with a pattern instance.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_SIDE: usize = 8;
pub const LEVELS: u32 = 64;
pub const BANDS: usize = 4;
pub const BAND_WIDTH: u32 = LEVELS / BANDS as u32;
/// Base levels avoid this many levels at either edge of their band.
const BASE_MARGIN: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Rect,
    Frame,
    HStripes,
    VStripes,
    Checker,
    HGradient,
    VGradient,
    Cross,
}

impl Pattern {
    pub const ALL: [Pattern; 8] = [
        Pattern::Rect,
        Pattern::Frame,
        Pattern::HStripes,
        Pattern::VStripes,
        Pattern::Checker,
        Pattern::HGradient,
        Pattern::VGradient,
        Pattern::Cross,
    ];

    pub fn from_class(class_id: usize) -> Option<Pattern> {
        Self::ALL.get(class_id).copied()
    }

    pub fn class_id(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).expect("pattern is listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Rect => "rect",
            Pattern::Frame => "frame",
            Pattern::HStripes => "hstripes",
            Pattern::VStripes => "vstripes",
            Pattern::Checker => "checker",
            Pattern::HGradient => "hgradient",
            Pattern::VGradient => "vgradient",
            Pattern::Cross => "cross",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pattern `{s}`")))
    }
}

/// A square grid of intensity tokens with an optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    side: usize,
    tokens: Vec<u32>,
    class_id: Option<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, tokens: Vec<u32>, class_id: Option<usize>) -> Result<Self> {
        if side == 0 || tokens.len() != side * side {
            return Err(Error::invalid(format!(
                "grid of side {side} needs {} tokens, got {}",
                side * side,
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= LEVELS) {
            return Err(Error::invalid(format!("token {t} is outside the {LEVELS}-level vocabulary")));
        }
        Ok(Self { side, tokens, class_id })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn class_id(&self) -> Option<usize> {
        self.class_id
    }

    pub fn with_class(mut self, class_id: Option<usize>) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn band_map(&self) -> Vec<u8> {
        self.tokens.iter().map(|&t| (t / BAND_WIDTH) as u8).collect()
    }
}

/// Draws one grid of the given pattern.
pub fn generate_grid<R: Rng + ?Sized>(pattern: Pattern, side: usize, rng: &mut R) -> TokenGrid {
    assert!(side >= 4, "patterns need side >= 4");
    let (fg, bg) = distinct_bands(rng);
    let bands: Vec<u8> = match pattern {
        Pattern::Rect => {
            let h = rng.random_range(2..=side - 2);
            let w = rng.random_range(2..=side - 2);
            let r0 = rng.random_range(0..=side - h);
            let c0 = rng.random_range(0..=side - w);
            two_band(side, fg, bg, |i, j| (r0..r0 + h).contains(&i) && (c0..c0 + w).contains(&j))
        }
        Pattern::Frame => two_band(side, fg, bg, |i, j| is_border(side, i, j)),
        Pattern::HStripes => {
            let w = rng.random_range(1..=2);
            two_band(side, fg, bg, |i, _| (i / w) % 2 == 0)
        }
        Pattern::VStripes => {
            let w = rng.random_range(1..=2);
            two_band(side, fg, bg, |_, j| (j / w) % 2 == 0)
        }
        Pattern::Checker => {
            let w = rng.random_range(1..=2);
            two_band(side, fg, bg, |i, j| (i / w + j / w) % 2 == 0)
        }
        Pattern::HGradient => gradient(side, rng.random(), |_, j| j),
        Pattern::VGradient => gradient(side, rng.random(), |i, _| i),
        Pattern::Cross => {
            let r = rng.random_range(1..=side - 2);
            let c = rng.random_range(1..=side - 2);
            two_band(side, fg, bg, |i, j| i == r || j == c)
        }
    };

    // One base level per band, drawn from the middle of the band so the ±1
    // jitter stays well clear of neighbouring bands.
    let base: Vec<u32> = (0..BANDS as u32)
        .map(|b| b * BAND_WIDTH + rng.random_range(BASE_MARGIN..BAND_WIDTH - BASE_MARGIN))
        .collect();
    let tokens = bands
        .iter()
        .map(|&b| {
            let u: f64 = rng.random();
            let level = base[b as usize];
            if u < 0.15 {
                level - 1
            } else if u < 0.85 {
                level
            } else {
                level + 1
            }
        })
        .collect();
    TokenGrid::new(side, tokens, Some(pattern.class_id())).expect("generator emits well-formed grids")
}

fn distinct_bands<R: Rng + ?Sized>(rng: &mut R) -> (u8, u8) {
    let fg = rng.random_range(0..BANDS as u8);
    let bg = (fg + rng.random_range(1..BANDS as u8)) % BANDS as u8;
    (fg, bg)
}

fn is_border(side: usize, i: usize, j: usize) -> bool {
    i == 0 || j == 0 || i == side - 1 || j == side - 1
}

fn two_band(side: usize, fg: u8, bg: u8, region: impl Fn(usize, usize) -> bool) -> Vec<u8> {
    (0..side * side)
        .map(|idx| if region(idx / side, idx % side) { fg } else { bg })
        .collect()
}

fn gradient_band(side: usize, pos: usize, descending: bool) -> u8 {
    let b = (pos * BANDS / side) as u8;
    if descending { BANDS as u8 - 1 - b } else { b }
}

fn gradient(side: usize, descending: bool, axis: impl Fn(usize, usize) -> usize) -> Vec<u8> {
    (0..side * side)
        .map(|idx| gradient_band(side, axis(idx / side, idx % side), descending))
        .collect()
}

/// `count` grids drawn from the first `class_count` patterns.
pub fn generate_corpus(count: usize, seed: u64, class_count: usize) -> Result<Vec<TokenGrid>> {
    generate_corpus_with_side(count, seed, class_count, DEFAULT_SIDE)
}

pub fn generate_corpus_with_side(
    count: usize,
    seed: u64,
    class_count: usize,
    side: usize,
) -> Result<Vec<TokenGrid>> {
    if count == 0 {
        return Err(Error::invalid("corpus count must be positive"));
    }
    if class_count == 0 || class_count > Pattern::ALL.len() {
        return Err(Error::invalid(format!(
            "class_count must be in 1..={}, got {class_count}",
            Pattern::ALL.len()
        )));
    }
    if side < 4 {
        return Err(Error::invalid(format!("grid side must be at least 4, got {side}")));
    }
    let mut rng = seed::rng(seed, seed::streams::CORPUS, 0);
    Ok((0..count)
        .map(|_| {
            let pattern = Pattern::ALL[rng.random_range(0..class_count)];
            generate_grid(pattern, side, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    /// Whether the grid satisfies the grammar of its own label; `None` for
    /// unlabelled grids.
    pub class_match: Option<bool>,
    pub score: f64,
    pub best_pattern: Pattern,
}

/// Per-band 2-D prefix sums over the band map.
struct BandCounts {
    side: usize,
    prefix: Vec<[u32; BANDS]>,
}

impl BandCounts {
    fn new(side: usize, bands: &[u8]) -> Self {
        let stride = side + 1;
        let mut prefix = vec![[0u32; BANDS]; stride * stride];
        for i in 0..side {
            for j in 0..side {
                let mut cell = [0u32; BANDS];
                cell[bands[i * side + j] as usize] = 1;
                for b in 0..BANDS {
                    prefix[(i + 1) * stride + j + 1][b] = cell[b]
                        + prefix[i * stride + j + 1][b]
                        + prefix[(i + 1) * stride + j][b]
                        - prefix[i * stride + j][b];
                }
            }
        }
        Self { side, prefix }
    }

    /// Band histogram of rows `r0..r1`, columns `c0..c1`.
    fn rect(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> [u32; BANDS] {
        let s = self.side + 1;
        let mut out = [0u32; BANDS];
        for (b, o) in out.iter_mut().enumerate() {
            *o = self.prefix[r1 * s + c1][b] + self.prefix[r0 * s + c0][b]
                - self.prefix[r0 * s + c1][b]
                - self.prefix[r1 * s + c0][b];
        }
        out
    }

    fn total(&self) -> [u32; BANDS] {
        self.rect(0, self.side, 0, self.side)
    }
}

/// Best `count(fg in region) + count(bg outside)` over distinct band pairs.
fn best_pair(inside: [u32; BANDS], total: [u32; BANDS]) -> u32 {
    let mut best = 0;
    for fg in 0..BANDS {
        for bg in 0..BANDS {
            if fg != bg {
                best = best.max(inside[fg] + total[bg] - inside[bg]);
            }
        }
    }
    best
}

fn histogram(bands: &[u8], region: impl Fn(usize) -> bool) -> [u32; BANDS] {
    let mut h = [0u32; BANDS];
    for (idx, &b) in bands.iter().enumerate() {
        if region(idx) {
            h[b as usize] += 1;
        }
    }
    h
}

/// Largest number of cells that agree with some instance of `pattern`.
fn pattern_matches(pattern: Pattern, side: usize, bands: &[u8], counts: &BandCounts) -> u32 {
    let total = counts.total();
    let region_score = |region: &dyn Fn(usize, usize) -> bool| {
        best_pair(histogram(bands, |idx| region(idx / side, idx % side)), total)
    };
    match pattern {
        Pattern::Rect => {
            let mut best = 0;
            for h in 2..=side - 2 {
                for r0 in 0..=side - h {
                    for w in 2..=side - 2 {
                        for c0 in 0..=side - w {
                            let inside = counts.rect(r0, r0 + h, c0, c0 + w);
                            best = best.max(best_pair(inside, total));
                        }
                    }
                }
            }
            best
        }
        Pattern::Frame => region_score(&|i, j| is_border(side, i, j)),
        Pattern::HStripes => (1..=2).map(|w| region_score(&|i, _| (i / w) % 2 == 0)).max().unwrap_or(0),
        Pattern::VStripes => (1..=2).map(|w| region_score(&|_, j| (j / w) % 2 == 0)).max().unwrap_or(0),
        Pattern::Checker => (1..=2)
            .map(|w| region_score(&|i, j| (i / w + j / w) % 2 == 0))
            .max()
            .unwrap_or(0),
        Pattern::HGradient | Pattern::VGradient => [false, true]
            .into_iter()
            .map(|descending| {
                bands
                    .iter()
                    .enumerate()
                    .filter(|&(idx, &b)| {
                        let pos = if pattern == Pattern::HGradient { idx % side } else { idx / side };
                        b == gradient_band(side, pos, descending)
                    })
                    .count() as u32
            })
            .max()
            .unwrap_or(0),
        Pattern::Cross => {
            let mut best = 0;
            for r in 1..=side - 2 {
                for c in 1..=side - 2 {
                    best = best.max(region_score(&|i, j| i == r || j == c));
                }
            }
            best
        }
    }
}

/// Fraction of cells consistent with the best instance of each pattern.
pub fn pattern_scores(grid: &TokenGrid) -> Vec<(Pattern, f64)> {
    let side = grid.side;
    let bands = grid.band_map();
    let counts = BandCounts::new(side, &bands);
    let cells = (side * side) as f64;
    Pattern::ALL
        .iter()
        .map(|&p| {
            let score = if side < 4 { 0.0 } else { f64::from(pattern_matches(p, side, &bands, &counts)) / cells };
            (p, score)
        })
        .collect()
}

pub fn validity(grid: &TokenGrid) -> ValidityReport {
    let scores = pattern_scores(grid);
    let (best_pattern, score) = scores
        .iter()
        .copied()
        .fold((Pattern::Rect, -1.0), |acc, (p, s)| if s > acc.1 { (p, s) } else { acc });
    let class_match = grid.class_id.map(|c| {
        Pattern::from_class(c).is_some_and(|p| scores[p.class_id()].1 == 1.0)
    });
    ValidityReport {
        valid: score == 1.0,
        class_match,
        score,
        best_pattern,
    }
}

/// Checks the token count before evaluating, for grids assembled from raw data.
pub fn validity_of(side: usize, tokens: &[u32], class_id: Option<usize>) -> Result<ValidityReport> {
    let grid = TokenGrid::new(side, tokens.to_vec(), class_id)?;
    Ok(validity(&grid))
}

/// One grid per line: `class,t0,t1,...`.
pub fn write_corpus<W: Write>(mut out: W, grids: &[TokenGrid]) -> Result<()> {
    for grid in grids {
        let class = grid.class_id.map(|c| c.to_string()).unwrap_or_default();
        write!(out, "{class}")?;
        for t in &grid.tokens {
            write!(out, ",{t}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<TokenGrid>> {
    let mut grids = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let field = format!("line {}", lineno + 1);
        let mut parts = line.split(',');
        let class = parts.next().unwrap_or_default().trim();
        let class_id = if class.is_empty() {
            None
        } else {
            Some(class.parse::<usize>().map_err(|e| Error::format(&field, format!("class id: {e}")))?)
        };
        let tokens = parts
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(&field, format!("token: {e}")))?;
        let side = (tokens.len() as f64).sqrt().round() as usize;
        let grid = TokenGrid::new(side, tokens, class_id).map_err(|e| Error::format(&field, e.to_string()))?;
        grids.push(grid);
    }
    if grids.is_empty() {
        return Err(Error::format("corpus", "no grids found"));
    }
    Ok(grids)
}

/// Binary PGM (P5), each token drawn as a `scale × scale` block.
pub fn render_pgm(grid: &TokenGrid, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let px = grid.side * scale;
    let mut out = format!("P5\n{px} {px}\n255\n").into_bytes();
    for i in 0..px {
        for j in 0..px {
            let t = grid.tokens[(i / scale) * grid.side + j / scale];
            out.push((t * 255 / (LEVELS - 1)) as u8);
        }
    }
    out
}
