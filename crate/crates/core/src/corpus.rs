//! Samplers over page manifests: min-max normalization, random training
//! patches, fixed-size word crops and the Gaussian noise injected into
//! generated images.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use rand_distr::{Distribution, Normal};

use crate::forge::{BBox, RenderedPage, WordGT};
use crate::manifest::Manifest;
use crate::{Error, Result};

pub const PATCH_SIZE: usize = 256;
pub const CROP_WIDTH: usize = 128;
pub const CROP_HEIGHT: usize = 32;

/// Planar `C×H×W` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageF32 {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        ImageF32 {
            channels: 1,
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * w * h];
        for (i, px) in img.as_raw().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f32;
            }
        }
        ImageF32 {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Single-channel images are replicated to three channels; others pass through.
    pub fn to_three_channels(&self) -> Self {
        if self.channels != 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImageF32 {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Copies the window at `(x0, y0)`; pixels outside the image take `fill`.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize, fill: f32) -> Self {
        let mut out = ImageF32::filled(self.channels, h, w, fill);
        let n = w.min(self.width.saturating_sub(x0));
        if n == 0 {
            return out;
        }
        for c in 0..self.channels {
            for y in 0..h.min(self.height.saturating_sub(y0)) {
                let src = (c * self.height + y0 + y) * self.width + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
            }
        }
        out
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => {
                return Err(Error::Shape {
                    expected: "C×H×W".into(),
                    got: format!("{:?}", t.dims()),
                })
            }
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(ImageF32 {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    /// Quantizes a `[0,1]` image to 8-bit RGB (single channel is replicated).
    pub fn to_rgb8(&self) -> RgbImage {
        let three = self.to_three_channels();
        let plane = self.height * self.width;
        let mut raw = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                raw.push(quantize(three.data[c * plane + i]));
            }
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Quantizes the channel mean of a `[0,1]` image to 8-bit gray.
    pub fn to_gray8(&self) -> GrayImage {
        let plane = self.height * self.width;
        let raw = (0..plane)
            .map(|i| {
                let s: f32 = (0..self.channels).map(|c| self.data[c * plane + i]).sum();
                quantize(s / self.channels as f32)
            })
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(v - min) / (max - min)` over all channels jointly; a constant image maps to zeros.
pub fn minmax_normalize(image: &ImageF32) -> ImageF32 {
    let (lo, hi) = image
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if image.data.is_empty() || !(range > 0.0) {
        vec![0.0; image.data.len()]
    } else {
        image.data.iter().map(|&v| (v - lo) / range).collect()
    };
    ImageF32 { data, ..image.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// A normalized three-channel page from either domain. Target pages may
/// carry no words.
#[derive(Debug, Clone)]
pub struct DocumentSample {
    pub page_id: usize,
    pub domain: Domain,
    pub image: ImageF32,
    pub words: Vec<WordGT>,
}

impl DocumentSample {
    pub fn from_rendered(page_id: usize, page: &RenderedPage) -> Self {
        DocumentSample {
            page_id,
            domain: Domain::Source,
            image: minmax_normalize(&ImageF32::from_gray(&page.image)).to_three_channels(),
            words: page.words.clone(),
        }
    }

    pub fn load(manifest: &Manifest, index: usize, domain: Domain) -> Result<Self> {
        let path = manifest.image_path(index);
        let rgb = open_rgb(&path)?;
        Ok(DocumentSample {
            page_id: index,
            domain,
            image: minmax_normalize(&ImageF32::from_rgb(&rgb)),
            words: manifest.records[index].word_gts(),
        })
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

pub fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// A square training crop with the words that lie fully inside it,
/// rebased to patch coordinates.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub image: ImageF32,
    pub contained_words: Vec<WordGT>,
    /// `(page_id, x0, y0)` of the top-left corner on the source page.
    pub origin: (usize, usize, usize),
}

/// Background value used when a page is smaller than the patch.
pub const PAD_VALUE: f32 = 1.0;

/// Crops a `size×size` patch at a uniformly random corner.
pub fn random_patch<R: rand::Rng + ?Sized>(doc: &DocumentSample, size: usize, rng: &mut R) -> PatchSample {
    let x0 = if doc.width() > size {
        rng.random_range(0..=doc.width() - size)
    } else {
        0
    };
    let y0 = if doc.height() > size {
        rng.random_range(0..=doc.height() - size)
    } else {
        0
    };
    patch_at(doc, size, x0, y0)
}

pub fn patch_at(doc: &DocumentSample, size: usize, x0: usize, y0: usize) -> PatchSample {
    let image = doc.image.window(x0, y0, size, size, PAD_VALUE);
    let window = BBox::new(x0 as u32, y0 as u32, size as u32, size as u32);
    let contained_words = doc
        .words
        .iter()
        .filter(|w| window.contains(&w.bbox))
        .map(|w| WordGT {
            bbox: BBox::new(w.bbox.x - x0 as u32, w.bbox.y - y0 as u32, w.bbox.w, w.bbox.h),
            ..w.clone()
        })
        .collect();
    PatchSample {
        image,
        contained_words,
        origin: (doc.page_id, x0, y0),
    }
}

#[derive(Debug, Clone)]
pub struct WordCrop {
    /// `1×32×128` in `[0,1]`.
    pub image: Tensor,
    pub text: String,
}

/// Row-major `dst×src` interpolation weights: a triangle filter whose support
/// widens with the downscale factor, so the same-size case is the identity.
pub fn resample_weights(src: usize, dst: usize) -> Vec<f32> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    let mut w = vec![0f32; dst * src];
    for i in 0..dst {
        let center = (i as f64 + 0.5) * scale;
        let lo = ((center - support).floor().max(0.0)) as usize;
        let hi = ((center + support).ceil() as usize).min(src);
        let mut total = 0.0;
        let mut row = Vec::with_capacity(hi - lo);
        for j in lo..hi {
            let d = ((j as f64 + 0.5 - center) / support).abs();
            let k = (1.0 - d).max(0.0);
            row.push((j, k));
            total += k;
        }
        if total <= 0.0 {
            let j = (center.floor() as usize).min(src - 1);
            w[i * src + j] = 1.0;
            continue;
        }
        for (j, k) in row {
            w[i * src + j] = (k / total) as f32;
        }
    }
    w
}

/// Output size of a `w×h` box scaled to fit 128×32 with its aspect preserved.
pub fn fitted_size(w: usize, h: usize) -> (usize, usize) {
    let s = (CROP_WIDTH as f64 / w as f64).min(CROP_HEIGHT as f64 / h as f64);
    let nw = ((w as f64 * s).round() as usize).clamp(1, CROP_WIDTH);
    let nh = ((h as f64 * s).round() as usize).clamp(1, CROP_HEIGHT);
    (nw, nh)
}

/// Crops `word` from a `C×H×W` patch tensor into a `1×32×128` crop:
/// channel mean, aspect-preserving resample, symmetric padding with 1.0.
///
/// Built from differentiable tensor ops so reading losses can reach the
/// generator through it.
pub fn crop_word(patch: &Tensor, word: &WordGT) -> Result<WordCrop> {
    Ok(WordCrop {
        image: crop_word_tensor(patch, &word.bbox)?,
        text: word.text.clone(),
    })
}

pub fn crop_word_tensor(patch: &Tensor, bbox: &BBox) -> Result<Tensor> {
    let (c, h, w) = patch.dims3()?;
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::InvalidArgument(format!("zero-area word box {bbox:?}")));
    }
    if bbox.right() as usize > w || bbox.bottom() as usize > h {
        return Err(Error::InvalidArgument(format!(
            "word box {bbox:?} exceeds the {w}×{h} image"
        )));
    }
    let (bw, bh) = (bbox.w as usize, bbox.h as usize);
    let region = patch
        .narrow(1, bbox.y as usize, bh)?
        .narrow(2, bbox.x as usize, bw)?;
    let gray = if c == 1 {
        region.squeeze(0)?
    } else {
        region.mean(0)?
    };
    let (nw, nh) = fitted_size(bw, bh);
    let device = patch.device();
    let dtype = patch.dtype();
    let rows = Tensor::from_vec(resample_weights(bh, nh), (nh, bh), device)?.to_dtype(dtype)?;
    let cols = Tensor::from_vec(resample_weights(bw, nw), (nw, bw), device)?.to_dtype(dtype)?;
    let resized = rows.matmul(&gray.contiguous()?)?.matmul(&cols.t()?)?;
    let (left, top) = ((CROP_WIDTH - nw) / 2, (CROP_HEIGHT - nh) / 2);
    let padded = (resized - 1.0)?
        .pad_with_zeros(0, top, CROP_HEIGHT - nh - top)?
        .pad_with_zeros(1, left, CROP_WIDTH - nw - left)?;
    Ok((padded + 1.0)?.unsqueeze(0)?)
}

/// Stacks the crops of `words` into an `N×1×32×128` batch.
pub fn crop_words(patch: &Tensor, words: &[WordGT]) -> Result<Tensor> {
    let crops = words
        .iter()
        .map(|w| crop_word_tensor(patch, &w.bbox))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&crops, 0)?)
}

/// `clamp(image + η, 0, 1)` with η ~ N(0, σ²) drawn from `rng`.
pub fn add_gaussian_noise<R: rand::Rng + ?Sized>(image: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0f64, sigma).expect("finite sigma");
    let n = image.elem_count();
    let noise: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let noise = Tensor::from_vec(noise, image.shape(), image.device())?.to_dtype(image.dtype())?;
    Ok((image + noise)?.clamp(0.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn gray(values: &[f32], w: usize) -> ImageF32 {
        ImageF32 {
            channels: 1,
            height: values.len() / w,
            width: w,
            data: values.to_vec(),
        }
    }

    #[test]
    fn minmax_constant_image_is_zero() {
        let out = minmax_normalize(&gray(&[128.0; 6], 3));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_endpoints_and_midpoint() {
        assert_eq!(minmax_normalize(&gray(&[0.0, 255.0, 255.0, 0.0], 2)).data, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(minmax_normalize(&gray(&[50.0, 100.0, 150.0], 3)).data, vec![0.0, 0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn minmax_is_idempotent_after_requantization(values in proptest::collection::vec(0u8..=255, 1..64)) {
            let img = gray(&values.iter().map(|&v| v as f32).collect::<Vec<_>>(), values.len());
            let once = minmax_normalize(&img);
            let rescaled = ImageF32 { data: once.data.iter().map(|v| v * 255.0).collect(), ..once.clone() };
            let twice = minmax_normalize(&rescaled);
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    fn doc(w: usize, h: usize, words: Vec<WordGT>) -> DocumentSample {
        DocumentSample {
            page_id: 3,
            domain: Domain::Source,
            image: ImageF32::filled(3, h, w, 1.0),
            words,
        }
    }

    fn word(text: &str, x: u32, y: u32, w: u32, h: u32) -> WordGT {
        WordGT {
            text: text.into(),
            bbox: BBox::new(x, y, w, h),
            line_index: 0,
            order_index: 0,
            drop_cap: false,
        }
    }

    #[test]
    fn exact_size_page_has_one_placement() {
        let d = doc(256, 256, vec![word("a", 10, 10, 20, 10), word("b", 200, 240, 56, 16)]);
        let p = random_patch(&d, 256, &mut rng::stream(1, "t", 0));
        assert_eq!(p.origin, (3, 0, 0));
        assert_eq!(p.contained_words.len(), 2);
    }

    #[test]
    fn straddling_words_are_excluded_and_others_rebased() {
        let d = doc(600, 600, vec![word("in", 110, 120, 30, 10), word("cut", 95, 120, 30, 10)]);
        let p = patch_at(&d, 256, 100, 100);
        assert_eq!(p.contained_words.len(), 1);
        assert_eq!(p.contained_words[0].text, "in");
        assert_eq!(p.contained_words[0].bbox, BBox::new(10, 20, 30, 10));
    }

    #[test]
    fn small_pages_are_padded_with_background() {
        let mut d = doc(100, 80, vec![word("a", 1, 1, 5, 5)]);
        d.image.data.iter_mut().for_each(|v| *v = 0.25);
        let p = random_patch(&d, 256, &mut rng::stream(1, "t", 0));
        assert_eq!((p.image.height, p.image.width), (256, 256));
        assert_eq!(p.image.at(0, 0, 0), 0.25);
        assert_eq!(p.image.at(2, 255, 255), PAD_VALUE);
        assert_eq!(p.contained_words.len(), 1);
    }

    #[test]
    fn patch_origins_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let d = doc(512, 512, vec![]);
        let mut r = rng::stream(2024, "chi2", 0);
        let mut counts = [[0f64; 4]; 4];
        // origins range over 0..=256 in each axis; bin by quarter of that range
        let bin = |v: usize| ((v * 4) / 257).min(3);
        for _ in 0..1000 {
            let p = random_patch(&d, 256, &mut r);
            counts[bin(p.origin.2)][bin(p.origin.1)] += 1.0;
        }
        let width = |b: usize| (0..=256usize).filter(|&v| bin(v) == b).count() as f64 / 257.0;
        let mut chi2 = 0.0;
        for by in 0..4 {
            for bx in 0..4 {
                let expected = 1000.0 * width(by) * width(bx);
                chi2 += (counts[by][bx] - expected).powi(2) / expected;
            }
        }
        let p_value = 1.0 - ChiSquared::new(15.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2} p {p_value}");
    }

    #[test]
    fn resample_same_size_is_identity() {
        let w = resample_weights(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(w[i * 5 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    fn patch_tensor(values: impl Fn(usize, usize) -> f32, h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..3).flat_map(|_| (0..h).flat_map(move |y| (0..w).map(move |x| (y, x)))).map(|(y, x)| values(y, x)).collect();
        Tensor::from_vec(data, (3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn crop_of_exact_target_size_is_identity() {
        let patch = patch_tensor(|y, x| ((y * 131 + x * 17) % 255) as f32 / 255.0, 64, 160);
        let crop = crop_word(&patch, &word("w", 7, 13, 128, 32)).unwrap();
        assert_eq!(crop.image.dims(), &[1, 32, 128]);
        let got = crop.image.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for y in 0..32 {
            for x in 0..128 {
                let expect = ((((13 + y) * 131 + (7 + x) * 17) % 255) as f32) / 255.0;
                assert!((got[y * 128 + x] - expect).abs() <= 1.0 / 255.0);
            }
        }
        assert_eq!(crop.text, "w");
    }

    #[test]
    fn crop_four_to_one_box_fills_without_padding() {
        let patch = patch_tensor(|_, _| 0.0, 64, 256);
        assert_eq!(fitted_size(256, 64), (128, 32));
        let crop = crop_word_tensor(&patch, &BBox::new(0, 0, 256, 64)).unwrap();
        let v = crop.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&p| p.abs() < 1e-6), "no background padding expected");
    }

    #[test]
    fn square_box_is_centered_with_background_columns() {
        let patch = patch_tensor(|_, _| 0.0, 40, 40);
        assert_eq!(fitted_size(32, 32), (32, 32));
        let crop = crop_word_tensor(&patch, &BBox::new(4, 4, 32, 32)).unwrap();
        let v = crop.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for y in 0..32 {
            for x in 0..128 {
                let expect = if (48..80).contains(&x) { 0.0 } else { 1.0 };
                assert_eq!(v[y * 128 + x], expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn zero_area_box_is_an_error() {
        let patch = patch_tensor(|_, _| 0.0, 8, 8);
        assert!(crop_word_tensor(&patch, &BBox::new(1, 1, 0, 3)).is_err());
        assert!(crop_word_tensor(&patch, &BBox::new(1, 1, 9, 3)).is_err());
    }

    #[test]
    fn crop_values_stay_in_unit_range_and_keep_text() {
        let patch = patch_tensor(|y, x| ((x + y) % 2) as f32, 50, 90);
        let w = word("Gallia", 3, 5, 77, 21);
        let crop = crop_word(&patch, &w).unwrap();
        assert_eq!(crop.text, w.text);
        let v = crop.image.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&p| (-1e-6..=1.0 + 1e-6).contains(&p)));
    }

    #[test]
    fn zero_sigma_is_identity_and_negative_is_rejected() {
        let t = Tensor::full(0.3f32, (3, 4, 4), &Device::Cpu).unwrap();
        let mut r = rng::stream(1, "n", 0);
        let out = add_gaussian_noise(&t, 0.0, &mut r).unwrap();
        assert_eq!(out.to_vec3::<f32>().unwrap(), t.to_vec3::<f32>().unwrap());
        assert!(add_gaussian_noise(&t, -0.1, &mut r).is_err());
    }

    #[test]
    fn noise_statistics_and_clamping() {
        let t = Tensor::full(0.5f32, (256, 256), &Device::Cpu).unwrap();
        let out = add_gaussian_noise(&t, 0.05, &mut rng::stream(5, "n", 0)).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.0475..=0.0525).contains(&std), "std {std}");

        let ones = Tensor::ones((64, 64), DType::F32, &Device::Cpu).unwrap();
        let out = add_gaussian_noise(&ones, 0.05, &mut rng::stream(5, "n", 1)).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&x| x <= 1.0));
    }

    #[test]
    fn noise_is_seeded() {
        let t = Tensor::full(0.5f32, (8, 8), &Device::Cpu).unwrap();
        let a = add_gaussian_noise(&t, 0.1, &mut rng::stream(9, "n", 0)).unwrap();
        let b = add_gaussian_noise(&t, 0.1, &mut rng::stream(9, "n", 0)).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
    }
}
