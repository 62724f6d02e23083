//! Full-page inference by overlapping tiles, and export of styled word crops.
//!
//! Tiles start every `floor(tile·(1−overlap))` pixels; one extra tile flush
//! with the right/bottom border covers any remainder. Every output pixel is
//! the mean of the tile outputs covering it (optionally a feathered mean).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use image::{GrayImage, Luma};
use rand::seq::index;
use rand::Rng as _;

use crate::corpus::{crop_word_tensor, DocumentSample, Domain, ImageF32, CROP_HEIGHT, CROP_WIDTH, PAD_VALUE};
use crate::forge::{RenderedPage, WordGT};
use crate::losses::ImageTranslator;
use crate::manifest::{Manifest, ManifestRecord, ManifestWord};
use crate::rng::stream;
use crate::{Error, Result};

pub const TILE: usize = 256;
pub const DEFAULT_OVERLAP: f64 = 0.10;
pub const DEFAULT_EXPORT_WORDS: usize = 70_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StitchOptions {
    pub tile: usize,
    pub overlap_frac: f64,
    /// Weight tile pixels by their distance to the tile edge instead of
    /// averaging uniformly.
    pub feather: bool,
}

impl Default for StitchOptions {
    fn default() -> Self {
        StitchOptions {
            tile: TILE,
            overlap_frac: DEFAULT_OVERLAP,
            feather: false,
        }
    }
}

impl StitchOptions {
    pub fn with_overlap(overlap_frac: f64) -> Self {
        StitchOptions {
            overlap_frac,
            ..StitchOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap_frac) {
            return Err(Error::InvalidArgument(format!(
                "overlap must lie in [0, 1), got {}",
                self.overlap_frac
            )));
        }
        if self.tile == 0 {
            return Err(Error::InvalidArgument("tile size must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.tile as f64 * (1.0 - self.overlap_frac)).floor() as usize).max(1)
    }
}

/// Tile start positions along an axis of length `len >= tile`.
pub fn tile_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + tile <= len)
        .collect();
    if out.last().is_none_or(|&o| o + tile < len) {
        out.push(len.saturating_sub(tile));
    }
    out
}

/// Number of tiles covering each pixel of a `width×height` image (row-major).
pub fn coverage_map(width: usize, height: usize, opts: &StitchOptions) -> Vec<u32> {
    let t = opts.tile;
    let mut map = vec![0u32; width * height];
    for y0 in tile_origins(height.max(t), t, opts.stride()) {
        for x0 in tile_origins(width.max(t), t, opts.stride()) {
            for y in y0..(y0 + t).min(height) {
                for x in x0..(x0 + t).min(width) {
                    map[y * width + x] += 1;
                }
            }
        }
    }
    map
}

/// Per-pixel blending weight inside one tile.
fn tile_weights(tile: usize, feather: bool) -> Vec<f64> {
    if !feather {
        return vec![1.0; tile * tile];
    }
    let ramp = |i: usize| (i.min(tile - 1 - i) + 1) as f64;
    (0..tile * tile).map(|k| ramp(k / tile) * ramp(k % tile)).collect()
}

/// Restyles a normalized image of any size.
pub fn synthesize_image(g: &impl ImageTranslator, page: &ImageF32, opts: &StitchOptions) -> Result<ImageF32> {
    opts.validate()?;
    let page = page.to_three_channels();
    let (h, w) = (page.height, page.width);
    let t = opts.tile;
    let (ph, pw) = (h.max(t), w.max(t));
    let padded = if (ph, pw) != (h, w) {
        page.window(0, 0, pw, ph, PAD_VALUE)
    } else {
        page
    };
    let weights = tile_weights(t, opts.feather);
    let mut acc = vec![0f64; 3 * ph * pw];
    let mut total = vec![0f64; ph * pw];
    for y0 in tile_origins(ph, t, opts.stride()) {
        for x0 in tile_origins(pw, t, opts.stride()) {
            let tile = padded.window(x0, y0, t, t, PAD_VALUE).to_tensor(&Device::Cpu)?.unsqueeze(0)?;
            let out = g.translate(&tile)?;
            if out.dims() != [1, 3, t, t] {
                return Err(Error::Shape {
                    expected: format!("[1, 3, {t}, {t}]"),
                    got: format!("{:?}", out.dims()),
                });
            }
            let out = ImageF32::from_tensor(&out.squeeze(0)?)?;
            for y in 0..t {
                for x in 0..t {
                    let wt = weights[y * t + x];
                    let p = (y0 + y) * pw + x0 + x;
                    total[p] += wt;
                    for c in 0..3 {
                        acc[c * ph * pw + p] += wt * out.data[(c * t + y) * t + x] as f64;
                    }
                }
            }
        }
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let p = y * pw + x;
                data.push((acc[c * ph * pw + p] / total[p]) as f32);
            }
        }
    }
    Ok(ImageF32 {
        channels: 3,
        height: h,
        width: w,
        data,
    })
}

/// Restyles a rendered template page with the default tile size.
pub fn synthesize_page(g: &impl ImageTranslator, page: &RenderedPage, overlap_frac: f64) -> Result<ImageF32> {
    let doc = DocumentSample::from_rendered(0, page);
    synthesize_image(g, &doc.image, &StitchOptions::with_overlap(overlap_frac))
}

/// Restyles every page of `manifest` into `out_dir` and writes a manifest
/// with the same word boxes pointing at the styled images.
pub fn synthesize_manifest(
    g: &impl ImageTranslator,
    manifest: &Manifest,
    opts: &StitchOptions,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let doc = DocumentSample::load(manifest, i, Domain::Source)?;
        let styled = synthesize_image(g, &doc.image, opts)?;
        let name = format!("styled_{i:05}.png");
        styled.to_rgb8().save(out_dir.join(&name))?;
        records.push(ManifestRecord {
            image_path: name,
            ..manifest.records[i].clone()
        });
        tracing::info!(page = i, "page synthesized");
    }
    let path = out_dir.join("manifest.jsonl");
    Manifest::write(&path, &records)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOutcome {
    pub manifest_path: PathBuf,
    pub words: usize,
    pub distinct: usize,
    /// Exported crops beyond the first copy of each source word.
    pub duplicates: usize,
}

/// A `1×32×128` crop tensor as an 8-bit grayscale image.
pub fn crop_to_gray(crop: &candle_core::Tensor) -> Result<GrayImage> {
    let v: Vec<f32> = crop.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
    let mut img = GrayImage::new(CROP_WIDTH as u32, CROP_HEIGHT as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = Luma([(v[i].clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    Ok(img)
}

/// Samples `n_words` words uniformly over all non-drop-cap words of
/// `source`, restyles their pages and writes 128×32 crops plus a manifest
/// (one record per crop, its single word box spanning the image).
pub fn export_word_dataset(
    g: &impl ImageTranslator,
    source: &Manifest,
    n_words: usize,
    seed: u64,
    out_dir: &Path,
    opts: &StitchOptions,
) -> Result<ExportOutcome> {
    let words_dir = out_dir.join("words");
    fs::create_dir_all(&words_dir).map_err(|e| Error::io(&words_dir, e))?;
    let pool: Vec<(usize, usize)> = source
        .records
        .iter()
        .enumerate()
        .flat_map(|(p, r)| r.words.iter().enumerate().filter(|(_, w)| !w.drop_cap).map(move |(i, _)| (p, i)))
        .collect();
    if n_words > 0 && pool.is_empty() {
        return Err(Error::InvalidArgument("source manifest has no exportable words".into()));
    }

    let mut rng = stream(seed, "export-words", 0);
    let picks: Vec<usize> = if n_words <= pool.len() {
        index::sample(&mut rng, pool.len(), n_words).into_vec()
    } else {
        (0..n_words).map(|_| rng.random_range(0..pool.len())).collect()
    };
    let distinct = picks.iter().collect::<BTreeSet<_>>().len();
    let duplicates = n_words - distinct;
    if duplicates > 0 {
        tracing::warn!(requested = n_words, distinct, duplicates, "fewer distinct words than requested");
    }

    // slots grouped by page so each page is restyled once
    let mut by_page: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (slot, &k) in picks.iter().enumerate() {
        let (page, word) = pool[k];
        by_page.entry(page).or_default().push((slot, word));
    }
    let mut records: Vec<Option<ManifestRecord>> = vec![None; n_words];
    for (page, slots) in by_page {
        let doc = DocumentSample::load(source, page, Domain::Source)?;
        let styled = synthesize_image(g, &doc.image, opts)?.to_tensor(&Device::Cpu)?;
        for (slot, word) in slots {
            let gt: WordGT = (&source.records[page].words[word]).into();
            let crop = crop_word_tensor(&styled, &gt.bbox)?;
            let name = format!("words/word_{slot:06}.png");
            crop_to_gray(&crop)?.save(out_dir.join(&name))?;
            records[slot] = Some(ManifestRecord {
                image_path: name,
                page_width: CROP_WIDTH as u32,
                page_height: CROP_HEIGHT as u32,
                words: vec![ManifestWord {
                    text: gt.text,
                    x: 0,
                    y: 0,
                    w: CROP_WIDTH as u32,
                    h: CROP_HEIGHT as u32,
                    line: 0,
                    order: 0,
                    drop_cap: false,
                }],
            });
        }
    }
    let records: Vec<ManifestRecord> = records.into_iter().map(|r| r.expect("every slot filled")).collect();
    let manifest_path = out_dir.join("manifest.jsonl");
    Manifest::write(&manifest_path, &records)?;
    Ok(ExportOutcome {
        manifest_path,
        words: n_words,
        distinct,
        duplicates,
    })
}
