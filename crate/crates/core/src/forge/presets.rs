//! Desk-scale layouts and bundled fonts, used for experiments that stand in
//! for real historical corpora.

use std::path::{Path, PathBuf};

use super::{DropCap, LayoutSpec, Margins};

/// Latin filler text that only uses glyphs every bundled font provides.
pub const LATIN: &str = "Lorem ipsum dolor sit amet consectetur adipiscing elit sed do eiusmod \
tempor incididunt ut labore et dolore magna aliqua Gallia est omnis divisa in partes tres quarum \
unam incolunt Belgae aliam Aquitani tertiam qui ipsorum lingua Celtae nostra Galli appellantur \
Hi omnes lingua institutis legibus inter se differunt Gallos ab Aquitanis Garumna flumen a Belgis \
Matrona et Sequana dividit Horum omnium fortissimi sunt Belgae propterea quod a cultu atque \
humanitate provinciae longissime absunt minimeque ad eos mercatores saepe commeant";

pub fn bundled_font(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/fonts").join(name)
}

/// Visually distinct page styles for the three desk-scale corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeskStyle {
    /// Template pages: serif, black on white.
    Source,
    /// Stand-in for the historical target: sans, grey ink on dark paper.
    Target,
    /// Labeled evaluation corpus: monospace, brown-ish ink on light paper.
    Eval,
}

/// A `width×height` page in `style` with body text of `font_size` px.
pub fn desk_layout(style: DeskStyle, width: u32, height: u32, font_size: u32) -> LayoutSpec {
    let (font, ink, bg) = match style {
        DeskStyle::Source => ("DejaVuSerif.ttf", 0, 255),
        DeskStyle::Target => ("DejaVuSans.ttf", 70, 190),
        DeskStyle::Eval => ("DejaVuSansMono.ttf", 40, 230),
    };
    let margin = (font_size / 2).max(4);
    LayoutSpec {
        page_width_px: width,
        page_height_px: height,
        margins_px: Margins {
            top: margin,
            bottom: margin,
            left: margin,
            right: margin,
        },
        columns: 1,
        column_choices: vec![1],
        font_source: bundled_font(font),
        font_size_px: font_size,
        line_spacing_px: font_size * 3 / 2,
        drop_cap: DropCap {
            enabled: false,
            scale: 2.0,
        },
        ink_value: ink,
        background_value: bg,
    }
}
