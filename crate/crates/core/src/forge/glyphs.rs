use std::path::Path;

use ab_glyph::{point, Font, FontVec, PxScale, ScaleFont};

use crate::{Error, Result};

/// An outline font loaded from disk.
pub struct Typeface {
    font: FontVec,
}

/// One token rasterized with its pen at the origin and the baseline at y = 0.
///
/// `pixels` holds final page intensities, so a pixel is ink exactly when it
/// differs from the background value the raster was produced with.
#[derive(Debug, Clone)]
pub struct WordRaster {
    pub width: u32,
    pub height: u32,
    /// Raster top-left corner relative to the pen position.
    pub origin: (i32, i32),
    pub pixels: Vec<u8>,
    /// Inclusive ink extents relative to the pen: (left, top, right, bottom).
    pub ink: (i32, i32, i32, i32),
    pub advance: f32,
}

impl WordRaster {
    pub fn ink_width(&self) -> u32 {
        (self.ink.2 - self.ink.0 + 1) as u32
    }
}

impl Typeface {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let font = FontVec::try_from_vec(bytes)
            .map_err(|e| Error::Font(format!("{}: {e}", path.display())))?;
        Ok(Typeface { font })
    }

    pub fn check_glyphs(&self, token: &str) -> Result<()> {
        for c in token.chars() {
            if self.font.glyph_id(c).0 == 0 {
                return Err(Error::MissingGlyph(c));
            }
        }
        Ok(())
    }

    pub fn space_advance(&self, size_px: f32) -> f32 {
        let scaled = self.font.as_scaled(PxScale::from(size_px));
        scaled.h_advance(self.font.glyph_id(' '))
    }

    /// Rasterizes `token` at `size_px` and converts coverage into
    /// `background + coverage * (ink - background)` intensities.
    pub fn rasterize(&self, token: &str, size_px: f32, ink: u8, background: u8) -> Result<WordRaster> {
        self.check_glyphs(token)?;
        let scale = PxScale::from(size_px);
        let scaled = self.font.as_scaled(scale);

        let mut pen = 0.0f32;
        let mut prev = None;
        let mut outlines = Vec::new();
        for c in token.chars() {
            let id = self.font.glyph_id(c);
            if let Some(p) = prev {
                pen += scaled.kern(p, id);
            }
            let glyph = id.with_scale_and_position(scale, point(pen, 0.0));
            if let Some(outlined) = self.font.outline_glyph(glyph) {
                outlines.push(outlined);
            }
            pen += scaled.h_advance(id);
            prev = Some(id);
        }
        if outlines.is_empty() {
            return Err(Error::InvalidArgument(format!("token {token:?} has no visible glyphs")));
        }

        let min_x = outlines.iter().map(|o| o.px_bounds().min.x as i32).min().unwrap();
        let min_y = outlines.iter().map(|o| o.px_bounds().min.y as i32).min().unwrap();
        let max_x = outlines.iter().map(|o| o.px_bounds().max.x as i32).max().unwrap();
        let max_y = outlines.iter().map(|o| o.px_bounds().max.y as i32).max().unwrap();
        let width = (max_x - min_x).max(1) as u32;
        let height = (max_y - min_y).max(1) as u32;

        let mut coverage = vec![0f32; (width * height) as usize];
        for o in &outlines {
            let b = o.px_bounds();
            let dx = b.min.x as i32 - min_x;
            let dy = b.min.y as i32 - min_y;
            o.draw(|x, y, c| {
                let px = x as i32 + dx;
                let py = y as i32 + dy;
                if px >= 0 && py >= 0 && (px as u32) < width && (py as u32) < height {
                    let idx = (py as u32 * width + px as u32) as usize;
                    coverage[idx] = (coverage[idx] + c).min(1.0);
                }
            });
        }

        let span = ink as f32 - background as f32;
        let pixels: Vec<u8> = coverage
            .iter()
            .map(|&c| (background as f32 + c * span).round().clamp(0.0, 255.0) as u8)
            .collect();

        let mut extents: Option<(i32, i32, i32, i32)> = None;
        for y in 0..height {
            for x in 0..width {
                if pixels[(y * width + x) as usize] != background {
                    let (x, y) = (x as i32, y as i32);
                    extents = Some(match extents {
                        None => (x, y, x, y),
                        Some((l, t, r, b)) => (l.min(x), t.min(y), r.max(x), b.max(y)),
                    });
                }
            }
        }
        let (l, t, r, b) = extents
            .ok_or_else(|| Error::InvalidArgument(format!("token {token:?} renders no ink")))?;

        Ok(WordRaster {
            width,
            height,
            origin: (min_x, min_y),
            pixels,
            ink: (l + min_x, t + min_y, r + min_x, b + min_y),
            advance: pen,
        })
    }
}
