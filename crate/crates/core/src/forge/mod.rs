//! Template page forging: typesets tokens with an outline font and records
//! a padded ink bounding box for every placed word.

mod glyphs;
pub mod presets;

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use glyphs::{Typeface, WordRaster};

use crate::manifest::{Manifest, ManifestRecord, ManifestWord};
use crate::{rng, Error, Result};

/// Padding added on every side of a word's tight ink box.
pub const BOX_PAD: i32 = 2;

/// Minimum ink-to-ink distance between neighbouring words, so padded boxes
/// never share a pixel.
const INK_GAP: i32 = 2 * BOX_PAD + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Margins {
    pub top: u32,
    pub bottom: u32,
    pub left: u32,
    pub right: u32,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            top: 200,
            bottom: 200,
            left: 220,
            right: 220,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropCap {
    pub enabled: bool,
    /// Drop-cap glyph size as a multiple of the body font size.
    pub scale: f32,
}

impl Default for DropCap {
    fn default() -> Self {
        DropCap {
            enabled: true,
            scale: 3.0,
        }
    }
}

/// Page geometry, typeface and intensities for a template page.
///
/// `column_choices` and `drop_cap.enabled` are the per-page options
/// [`generate_corpus`] samples from; [`render_page`] uses `columns` and
/// `drop_cap` as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    #[serde(default = "defaults::page_width")]
    pub page_width_px: u32,
    #[serde(default = "defaults::page_height")]
    pub page_height_px: u32,
    #[serde(default)]
    pub margins_px: Margins,
    #[serde(default = "defaults::columns")]
    pub columns: u8,
    #[serde(default = "defaults::column_choices")]
    pub column_choices: Vec<u8>,
    pub font_source: PathBuf,
    #[serde(default = "defaults::font_size")]
    pub font_size_px: u32,
    #[serde(default = "defaults::line_spacing")]
    pub line_spacing_px: u32,
    #[serde(default)]
    pub drop_cap: DropCap,
    #[serde(default = "defaults::ink")]
    pub ink_value: u8,
    #[serde(default = "defaults::background")]
    pub background_value: u8,
}

mod defaults {
    pub fn page_width() -> u32 {
        2754
    }
    pub fn page_height() -> u32 {
        3564
    }
    pub fn columns() -> u8 {
        1
    }
    pub fn column_choices() -> Vec<u8> {
        vec![1, 2]
    }
    pub fn font_size() -> u32 {
        56
    }
    pub fn line_spacing() -> u32 {
        84
    }
    pub fn ink() -> u8 {
        0
    }
    pub fn background() -> u8 {
        255
    }
}

impl LayoutSpec {
    /// Full-size template defaults with the given font.
    pub fn with_font(font_source: impl Into<PathBuf>) -> Self {
        LayoutSpec {
            page_width_px: defaults::page_width(),
            page_height_px: defaults::page_height(),
            margins_px: Margins::default(),
            columns: defaults::columns(),
            column_choices: defaults::column_choices(),
            font_source: font_source.into(),
            font_size_px: defaults::font_size(),
            line_spacing_px: defaults::line_spacing(),
            drop_cap: DropCap::default(),
            ink_value: defaults::ink(),
            background_value: defaults::background(),
        }
    }

    fn gutter(&self) -> u32 {
        self.font_size_px.max(16)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.margins_px;
        if self.font_size_px < 4 {
            return Err(Error::InvalidLayout(format!(
                "font_size_px must be at least 4, got {}",
                self.font_size_px
            )));
        }
        if m.left + m.right >= self.page_width_px || m.top + m.bottom >= self.page_height_px {
            return Err(Error::InvalidLayout("margins leave no text area".into()));
        }
        if !matches!(self.columns, 1 | 2) {
            return Err(Error::InvalidLayout(format!("columns must be 1 or 2, got {}", self.columns)));
        }
        if let Some(c) = self.column_choices.iter().find(|c| !matches!(c, 1 | 2)) {
            return Err(Error::InvalidLayout(format!("column choice {c} is not 1 or 2")));
        }
        if self.columns == 2 || self.column_choices.contains(&2) {
            let half = self.page_width_px / 2;
            let g = self.gutter().div_ceil(2);
            if m.left + g >= half || half + g >= self.page_width_px - m.right {
                return Err(Error::InvalidLayout(
                    "two-column layout leaves no text area on one side of the gutter".into(),
                ));
            }
        }
        if (self.ink_value as i32 - self.background_value as i32).abs() <= 16 {
            return Err(Error::InvalidLayout(
                "ink and background intensities must differ by more than 16".into(),
            ));
        }
        if !(self.drop_cap.scale >= 1.0) {
            return Err(Error::InvalidLayout("drop_cap.scale must be >= 1".into()));
        }
        Ok(())
    }

    /// Horizontal extents `[x0, x1)` of each text column.
    pub fn column_bounds(&self, columns: u8) -> Vec<(i32, i32)> {
        let m = &self.margins_px;
        let left = m.left as i32;
        let right = (self.page_width_px - m.right) as i32;
        if columns == 2 {
            let half = (self.page_width_px / 2) as i32;
            let g = self.gutter().div_ceil(2) as i32;
            vec![(left, half - g), (half + g, right)]
        } else {
            vec![(left, right)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        w as u64 * h as u64
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordGT {
    pub text: String,
    pub bbox: BBox,
    pub line_index: u32,
    pub order_index: u32,
    pub drop_cap: bool,
}

#[derive(Debug, Clone)]
pub struct RenderedPage {
    pub image: GrayImage,
    pub words: Vec<WordGT>,
    pub source_text_hash: String,
}

/// Result of typesetting one page.
#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub page: RenderedPage,
    /// Number of leading input tokens that made it onto the page.
    pub placed_tokens: usize,
}

impl RenderOutcome {
    /// Tokens that did not fit and were left off the page.
    pub fn overflow<'a, S>(&self, tokens: &'a [S]) -> &'a [S] {
        &tokens[self.placed_tokens..]
    }
}

pub fn token_stream_hash<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut hasher = Sha256::new();
    for t in tokens {
        hasher.update(t.as_ref().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Loads the layout's font and typesets `tokens`.
pub fn render_page<S: AsRef<str>>(spec: &LayoutSpec, tokens: &[S]) -> Result<RenderOutcome> {
    let face = Typeface::load(&spec.font_source)?;
    render_page_with(&face, spec, tokens)
}

struct Placement {
    raster_index: usize,
    pen: (i32, i32),
    line: u32,
    drop_cap: bool,
    text: String,
}

struct LineFit {
    words: Vec<(usize, i32)>,
    top: i32,
    bottom: i32,
    baseline: i32,
}

/// Greedily fits rasters starting at `start` on one line beginning at `x_start`
/// (the leftmost column a padded box may use) and ending before `x_end`.
fn fit_line(
    rasters: &[WordRaster],
    start: usize,
    x_start: i32,
    x_end: i32,
    space: f32,
    next_min_baseline: i32,
    next_min_top: i32,
) -> Option<LineFit> {
    let mut words = Vec::new();
    let mut prev: Option<(i32, &WordRaster)> = None;
    for (i, r) in rasters.iter().enumerate().skip(start) {
        let pen = match prev {
            None => x_start + BOX_PAD - r.ink.0,
            Some((prev_pen, pr)) => {
                let typographic = (prev_pen as f32 + pr.advance + space).ceil() as i32;
                let separated = prev_pen + pr.ink.2 + INK_GAP + 1 - r.ink.0;
                typographic.max(separated)
            }
        };
        if pen + r.ink.2 + BOX_PAD >= x_end {
            break;
        }
        words.push((i, pen));
        prev = Some((pen, r));
    }
    if words.is_empty() {
        return None;
    }
    let ink_top = words.iter().map(|&(i, _)| rasters[i].ink.1).min().unwrap();
    let ink_bottom = words.iter().map(|&(i, _)| rasters[i].ink.3).max().unwrap();
    let baseline = next_min_baseline.max(next_min_top + BOX_PAD - ink_top);
    Some(LineFit {
        words,
        top: baseline + ink_top - BOX_PAD,
        bottom: baseline + ink_bottom + BOX_PAD,
        baseline,
    })
}

/// Typesets `tokens` left-to-right, top-to-bottom (column-major for two
/// columns) with an already loaded typeface.
pub fn render_page_with<S: AsRef<str>>(
    face: &Typeface,
    spec: &LayoutSpec,
    tokens: &[S],
) -> Result<RenderOutcome> {
    spec.validate()?;
    for t in tokens {
        let t = t.as_ref();
        if t.is_empty() || t.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("token {t:?} is empty or contains whitespace")));
        }
        face.check_glyphs(t)?;
    }

    if spec.drop_cap.enabled && !tokens.is_empty() {
        if let Some(outcome) = layout(face, spec, tokens, true)? {
            return Ok(outcome);
        }
    }
    Ok(layout(face, spec, tokens, false)?.expect("layout without drop cap always succeeds"))
}

/// Returns `None` when a drop cap was requested but cannot be honoured
/// (it does not fit, or the rest of its word cannot follow it).
fn layout<S: AsRef<str>>(
    face: &Typeface,
    spec: &LayoutSpec,
    tokens: &[S],
    with_drop_cap: bool,
) -> Result<Option<RenderOutcome>> {
    let size = spec.font_size_px as f32;
    let (ink, bg) = (spec.ink_value, spec.background_value);
    let space = face.space_advance(size);
    let columns = spec.column_bounds(spec.columns);
    let page_bottom = (spec.page_height_px - spec.margins_px.bottom) as i32;
    let column_top = spec.margins_px.top as i32;

    // Body words: the first token loses its initial letter to the drop cap.
    let mut body: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let mut drop_cap_raster = None;
    let mut first_split = false;
    if with_drop_cap && !body.is_empty() {
        let first = body[0].clone();
        let mut chars = first.chars();
        let initial = chars.next().unwrap().to_string();
        let rest: String = chars.collect();
        let raster = face.rasterize(&initial, size * spec.drop_cap.scale, ink, bg)?;
        drop_cap_raster = Some((initial, raster));
        if rest.is_empty() {
            body.remove(0);
        } else {
            body[0] = rest;
            first_split = true;
        }
    }
    let rasters = body
        .iter()
        .map(|t| face.rasterize(t, size, ink, bg))
        .collect::<Result<Vec<_>>>()?;

    let mut placements = Vec::new();
    let mut extra_rasters = Vec::new();
    let mut line_index = 0u32;

    // Exclusion rectangle (inclusive) occupied by the drop cap's padded box.
    let mut exclusion: Option<(i32, i32, i32, i32)> = None;
    if let Some((initial, raster)) = drop_cap_raster {
        let (x0, _) = columns[0];
        let pen = (x0 + BOX_PAD - raster.ink.0, column_top + BOX_PAD - raster.ink.1);
        let rect = (
            pen.0 + raster.ink.0 - BOX_PAD,
            pen.1 + raster.ink.1 - BOX_PAD,
            pen.0 + raster.ink.2 + BOX_PAD,
            pen.1 + raster.ink.3 + BOX_PAD,
        );
        if rect.2 >= columns[0].1 || rect.3 >= page_bottom {
            return Ok(None);
        }
        exclusion = Some(rect);
        extra_rasters.push(raster);
        placements.push(Placement {
            raster_index: usize::MAX,
            pen,
            line: 0,
            drop_cap: true,
            text: initial,
        });
    }

    let mut next = 0usize;
    'columns: for (ci, &(x0, x1)) in columns.iter().enumerate() {
        let mut min_baseline = i32::MIN / 2;
        let mut min_top = column_top;
        while next < rasters.len() {
            let mut fit = fit_line(&rasters, next, x0, x1, space, min_baseline, min_top);
            if fit.is_none() {
                let r = &rasters[next];
                return Err(Error::TokenTooWide {
                    token: body[next].clone(),
                    width: r.ink_width() + 2 * BOX_PAD as u32,
                    column: (x1 - x0) as u32,
                });
            }
            if let (0, Some(ex)) = (ci, exclusion) {
                let f = fit.as_ref().unwrap();
                if f.top <= ex.3 && f.bottom >= ex.1 {
                    fit = fit_line(&rasters, next, ex.2 + 1, x1, space, min_baseline, min_top);
                    if fit.is_none() {
                        min_top = min_top.max(ex.3 + 1);
                        exclusion = None;
                        continue;
                    }
                }
            }
            let f = fit.unwrap();
            if f.bottom >= page_bottom {
                continue 'columns;
            }
            for &(i, pen) in &f.words {
                placements.push(Placement {
                    raster_index: i,
                    pen: (pen, f.baseline),
                    line: line_index,
                    drop_cap: false,
                    text: body[i].clone(),
                });
            }
            next = f.words.last().unwrap().0 + 1;
            line_index += 1;
            min_baseline = f.baseline + spec.line_spacing_px as i32;
            min_top = f.bottom + 1;
        }
        break;
    }

    // Map placed body words back to input tokens.
    let placed_tokens = match (with_drop_cap && !tokens.is_empty(), first_split) {
        (false, _) => next,
        (true, true) if next == 0 => return Ok(None),
        (true, true) => next,
        (true, false) => next + 1,
    };

    let mut image = GrayImage::from_pixel(spec.page_width_px, spec.page_height_px, Luma([bg]));
    let mut words = Vec::with_capacity(placements.len());
    for (order, p) in placements.iter().enumerate() {
        let raster = if p.raster_index == usize::MAX {
            &extra_rasters[0]
        } else {
            &rasters[p.raster_index]
        };
        blit(&mut image, raster, p.pen, bg);
        let bbox = BBox::new(
            (p.pen.0 + raster.ink.0 - BOX_PAD) as u32,
            (p.pen.1 + raster.ink.1 - BOX_PAD) as u32,
            (raster.ink.2 - raster.ink.0 + 1 + 2 * BOX_PAD) as u32,
            (raster.ink.3 - raster.ink.1 + 1 + 2 * BOX_PAD) as u32,
        );
        words.push(WordGT {
            text: p.text.clone(),
            bbox,
            line_index: p.line,
            order_index: order as u32,
            drop_cap: p.drop_cap,
        });
    }

    Ok(Some(RenderOutcome {
        page: RenderedPage {
            image,
            words,
            source_text_hash: token_stream_hash(tokens),
        },
        placed_tokens,
    }))
}

fn blit(image: &mut GrayImage, raster: &WordRaster, pen: (i32, i32), bg: u8) {
    let ox = pen.0 + raster.origin.0;
    let oy = pen.1 + raster.origin.1;
    for y in 0..raster.height {
        for x in 0..raster.width {
            let v = raster.pixels[(y * raster.width + x) as usize];
            if v == bg {
                continue;
            }
            let px = ox + x as i32;
            let py = oy + y as i32;
            if px >= 0 && py >= 0 && (px as u32) < image.width() && (py as u32) < image.height() {
                image.put_pixel(px as u32, py as u32, Luma([v]));
            }
        }
    }
}

/// Result of [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusOutcome {
    pub manifest_path: PathBuf,
    pub pages: usize,
    pub words: usize,
    /// Tokens from the text source that were skipped because they are wider
    /// than a text column.
    pub skipped_tokens: usize,
}

/// Writes `n_pages` template pages plus `manifest.jsonl` into `out_dir`.
///
/// The text source is consumed as a cyclic token stream; column mode and
/// drop-cap presence are drawn per page from a stream derived from `seed`.
pub fn generate_corpus(
    spec: &LayoutSpec,
    text_source: impl AsRef<Path>,
    n_pages: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusOutcome> {
    spec.validate()?;
    if n_pages == 0 {
        return Err(Error::InvalidArgument("n_pages must be at least 1".into()));
    }
    let text_source = text_source.as_ref();
    let out_dir = out_dir.as_ref();
    let text = fs::read_to_string(text_source).map_err(|e| Error::io(text_source, e))?;
    let face = Typeface::load(&spec.font_source)?;

    let choices: Vec<u8> = if spec.column_choices.is_empty() {
        vec![spec.columns]
    } else {
        spec.column_choices.clone()
    };
    let narrowest = choices
        .iter()
        .flat_map(|&c| spec.column_bounds(c))
        .map(|(a, b)| b - a)
        .min()
        .unwrap();

    let mut tokens = Vec::new();
    let mut skipped = 0usize;
    for t in text.split_whitespace() {
        face.check_glyphs(t)?;
        let r = face.rasterize(t, spec.font_size_px as f32, spec.ink_value, spec.background_value)?;
        if (r.ink_width() as i32 + 2 * BOX_PAD) >= narrowest {
            skipped += 1;
            tracing::warn!(token = t, "token wider than a text column, skipped");
            continue;
        }
        tokens.push(t.to_string());
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} contains no usable tokens",
            text_source.display()
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let m = &spec.margins_px;
    let area = (spec.page_width_px - m.left - m.right) as usize * (spec.page_height_px - m.top - m.bottom) as usize;
    let fs_px = spec.font_size_px as usize;
    let capacity = (2 * area / (fs_px * fs_px)).max(16) + 1;

    let mut cursor = 0usize;
    let mut records = Vec::with_capacity(n_pages);
    let mut total_words = 0usize;
    for page_index in 0..n_pages {
        let mut page_rng = rng::stream(seed, "forge-page", page_index as u64);
        let mut page_spec = spec.clone();
        page_spec.columns = choices[page_rng.random_range(0..choices.len())];
        page_spec.drop_cap.enabled = spec.drop_cap.enabled && page_rng.random_bool(0.5);

        let window: Vec<&str> = (0..capacity)
            .map(|k| tokens[(cursor + k) % tokens.len()].as_str())
            .collect();
        let outcome = render_page_with(&face, &page_spec, &window)?;
        if outcome.placed_tokens == 0 {
            return Err(Error::InvalidLayout("page holds no words".into()));
        }
        cursor = (cursor + outcome.placed_tokens) % tokens.len();

        let file_name = format!("page_{page_index:05}.png");
        let image_path = out_dir.join(&file_name);
        outcome.page.image.save(&image_path)?;
        total_words += outcome.page.words.len();
        records.push(ManifestRecord {
            image_path: file_name,
            page_width: spec.page_width_px,
            page_height: spec.page_height_px,
            words: outcome.page.words.iter().map(ManifestWord::from).collect(),
        });
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    Manifest::write(&manifest_path, &records)?;
    Ok(CorpusOutcome {
        manifest_path,
        pages: n_pages,
        words: total_words,
        skipped_tokens: skipped,
    })
}
