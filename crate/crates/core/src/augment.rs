//! Two-view augmentation: random resized crop, horizontal flip, and
//! lung-mask cropping.

use rand::Rng;

use crate::error::{Error, Result};

/// Single-channel image with row-major pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} does not match {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value.clamp(0.0, 1.0);
    }
}

/// Binary mask paired with a [`GrayImage`] of the same extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LungMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl LungMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask {height}x{width} does not match {} entries",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks agree perfectly.
    pub fn iou(&self, other: &LungMask) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Parameters of the two-view augmentation pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Range of the crop's area as a fraction of the source image.
    pub crop_scale: (f64, f64),
    /// Range of the crop's width/height ratio, sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    /// Probability that a view is reduced to its lung region before the
    /// geometric augmentations.
    pub mask_prob: f64,
    /// When set, a pair is either (lung-only, whole) with probability
    /// `mask_prob` or (whole, whole) otherwise, instead of masking each view
    /// independently.
    pub paired_masking: bool,
    pub out_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            mask_prob: 0.0,
            paired_masking: false,
            out_size: (64, 64),
        }
    }
}

/// Probability of lung masking used by the lung-segmentation variant.
pub const LUNG_MASK_PROB: f64 = 0.5;

impl AugmentConfig {
    /// The default pipeline with lung masking enabled at
    /// [`LUNG_MASK_PROB`].
    pub fn with_lung_mask() -> Self {
        Self {
            mask_prob: LUNG_MASK_PROB,
            ..Self::default()
        }
    }

    /// Every augmentation disabled; views equal the (resized) input.
    pub fn identity(out_size: (usize, usize)) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            mask_prob: 0.0,
            paired_masking: false,
            out_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range {lo}..{hi} must satisfy 0 < lo <= hi <= 1")));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("crop ratio range {rlo}..{rhi} is invalid")));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("mask_prob", self.mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned crop window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

const CROP_ATTEMPTS: usize = 10;

/// Samples a crop window whose area fraction is drawn from `crop_scale` and
/// whose aspect ratio is drawn log-uniformly from `crop_ratio`. Windows that
/// do not fit are resampled; after `CROP_ATTEMPTS` misses the full image is
/// used. Images smaller than 2x2 cannot be cropped.
pub fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<CropWindow> {
    if height < 2 || width < 2 {
        return Err(Error::Degenerate {
            op: "random_resized_crop",
            detail: format!("source {height}x{width} is smaller than 2x2"),
        });
    }
    let area = (height * width) as f64;
    let (lo, hi) = cfg.crop_scale;
    let (log_rlo, log_rhi) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let ratio = if log_rhi > log_rlo {
            rng.gen_range(log_rlo..=log_rhi).exp()
        } else {
            log_rlo.exp()
        };
        let w = (area * scale * ratio).sqrt().round() as usize;
        let h = (area * scale / ratio).sqrt().round() as usize;
        if (2..=width).contains(&w) && (2..=height).contains(&h) {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return Ok(CropWindow {
                top,
                left,
                height: h,
                width: w,
            });
        }
    }
    Ok(CropWindow {
        top: 0,
        left: 0,
        height,
        width,
    })
}

/// Bilinear resize of `window` to `out_h x out_w` using half-pixel centres.
/// Samples outside the window are clamped to its border.
pub fn resize_window(img: &GrayImage, window: CropWindow, out_h: usize, out_w: usize) -> GrayImage {
    let sy = window.height as f64 / out_h as f64;
    let sx = window.width as f64 / out_w as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w);
    let axis = |o: usize, scale: f64, extent: usize| {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, pos - i0 as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, window.height);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, sx, window.width);
            let p = |y: usize, x: usize| img.get(window.top + y, window.left + x);
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    GrayImage {
        height: out_h,
        width: out_w,
        pixels,
    }
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<GrayImage> {
    let window = sample_crop(img.height, img.width, cfg, rng)?;
    Ok(resize_window(img, window, cfg.out_size.0, cfg.out_size.1))
}

/// Mirrors columns: pixel `(r, c)` moves to `(r, W - 1 - c)`.
pub fn horizontal_flip(img: &GrayImage) -> GrayImage {
    let mut pixels = img.pixels.clone();
    for row in pixels.chunks_mut(img.width) {
        row.reverse();
    }
    GrayImage { pixels, ..*img }
}

/// Zeroes every pixel outside the lung mask.
pub fn apply_lung_mask(img: &GrayImage, mask: &LungMask) -> Result<GrayImage> {
    if (img.height, img.width) != (mask.height, mask.width) {
        return Err(Error::shape(
            "apply_lung_mask",
            &[img.height, img.width],
            &[mask.height, mask.width],
        ));
    }
    let pixels = img
        .pixels
        .iter()
        .zip(&mask.bits)
        .map(|(&p, &m)| if m { p } else { 0.0 })
        .collect();
    Ok(GrayImage { pixels, ..*img })
}

/// Marks pixels strictly brighter than `threshold` as lung.
pub fn threshold_segmenter(img: &GrayImage, threshold: f64) -> LungMask {
    LungMask {
        height: img.height,
        width: img.width,
        bits: img.pixels.iter().map(|&p| p > threshold).collect(),
    }
}

/// One augmented view. Masking (when drawn) precedes crop and flip.
pub fn augment_view<R: Rng + ?Sized>(
    img: &GrayImage,
    mask: &LungMask,
    cfg: &AugmentConfig,
    apply_mask: bool,
    rng: &mut R,
) -> Result<GrayImage> {
    let masked;
    let src = if apply_mask {
        masked = apply_lung_mask(img, mask)?;
        &masked
    } else {
        img
    };
    let cropped = random_resized_crop(src, cfg, rng)?;
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
    Ok(if flip { horizontal_flip(&cropped) } else { cropped })
}

/// Two independently augmented views of one image: a positive pair.
pub fn make_positive_pair<R: Rng + ?Sized>(
    img: &GrayImage,
    mask: &LungMask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(GrayImage, GrayImage)> {
    let (mask_a, mask_b) = if cfg.paired_masking {
        (draw(cfg.mask_prob, rng), false)
    } else {
        (draw(cfg.mask_prob, rng), draw(cfg.mask_prob, rng))
    };
    let a = augment_view(img, mask, cfg, mask_a, rng)?;
    let b = augment_view(img, mask, cfg, mask_b, rng)?;
    Ok((a, b))
}

fn draw<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    p > 0.0 && rng.gen_bool(p)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn img(h: usize, w: usize, px: &[f64]) -> GrayImage {
        GrayImage::new(h, w, px.to_vec()).unwrap()
    }

    fn noise(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        GrayImage::new(h, w, px).unwrap()
    }

    #[test]
    fn full_extent_crop_is_identity() {
        let src = noise(12, 9, 1);
        let cfg = AugmentConfig::identity((12, 9));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_resized_crop(&src, &cfg, &mut rng).unwrap(), src);
    }

    #[test]
    fn crop_is_deterministic_per_seed() {
        let src = noise(32, 32, 2);
        let cfg = AugmentConfig {
            out_size: (16, 16),
            ..AugmentConfig::default()
        };
        let a = random_resized_crop(&src, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_resized_crop(&src, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkerboard_upscale_keeps_corners() {
        let src = img(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let window = CropWindow {
            top: 0,
            left: 0,
            height: 2,
            width: 2,
        };
        let out = resize_window(&src, window, 4, 4);
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(0, 3), 0.0);
        assert_eq!(out.get(3, 0), 0.0);
        assert_eq!(out.get(3, 3), 1.0);
        // Interior sample at source coordinate (0.25, 0.25):
        // 0.75*0.75*1 + 0.25*0.25*1 = 0.625.
        assert!((out.get(1, 1) - 0.625).abs() < 1e-12);
    }

    #[test]
    fn tiny_images_cannot_be_cropped() {
        let src = img(1, 3, &[0.1, 0.2, 0.3]);
        let err = random_resized_crop(&src, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn sampled_crops_respect_scale_range() {
        let cfg = AugmentConfig {
            crop_scale: (0.3, 0.6),
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let w = sample_crop(64, 64, &cfg, &mut rng).unwrap();
            let frac = (w.height * w.width) as f64 / 4096.0;
            // Rounding each side to whole pixels moves the fraction slightly.
            assert!(frac > 0.3 - 0.05 && frac < 0.6 + 0.05, "fraction {frac}");
            assert!(w.top + w.height <= 64 && w.left + w.width <= 64);
        }
    }

    #[test]
    fn flip_examples() {
        let src = img(2, 2, &[1.0, 2.0, 3.0, 4.0].map(|v| v / 4.0));
        let flipped = horizontal_flip(&src);
        assert_eq!(flipped.pixels(), &[0.5, 0.25, 1.0, 0.75]);
        assert_eq!(horizontal_flip(&flipped), src);

        let sym = img(2, 3, &[0.1, 0.5, 0.1, 0.2, 0.9, 0.2]);
        assert_eq!(horizontal_flip(&sym), sym);
    }

    #[test]
    fn mask_examples() {
        let src = img(1, 2, &[0.5, 0.8]);
        let mask = LungMask::new(1, 2, vec![true, false]).unwrap();
        let out = apply_lung_mask(&src, &mask).unwrap();
        assert_eq!(out.pixels(), &[0.5, 0.0]);
        assert_eq!(apply_lung_mask(&out, &mask).unwrap(), out);
        assert_eq!(apply_lung_mask(&src, &LungMask::full(1, 2)).unwrap(), src);
        assert!(apply_lung_mask(&src, &LungMask::full(2, 1)).is_err());
    }

    #[test]
    fn threshold_examples() {
        let src = img(1, 2, &[0.2, 0.7]);
        assert_eq!(threshold_segmenter(&src, 0.5).bits(), &[false, true]);
        let dark = GrayImage::filled(4, 4, 0.0);
        assert_eq!(threshold_segmenter(&dark, 0.4).count(), 0);
    }

    #[test]
    fn disabled_augmentations_return_input() {
        let src = noise(10, 10, 4);
        let mask = threshold_segmenter(&src, 0.5);
        let cfg = AugmentConfig::identity((10, 10));
        let (a, b) = make_positive_pair(&src, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, src);
        assert_eq!(b, src);
    }

    #[test]
    fn pair_is_deterministic_per_seed() {
        let src = noise(20, 20, 6);
        let mask = threshold_segmenter(&src, 0.5);
        let cfg = AugmentConfig {
            out_size: (20, 20),
            ..AugmentConfig::with_lung_mask()
        };
        let p1 = make_positive_pair(&src, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let p2 = make_positive_pair(&src, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn lung_mask_probability_is_half() {
        assert_eq!(AugmentConfig::with_lung_mask().mask_prob, 0.5);
        assert_eq!(AugmentConfig::default().flip_prob, 0.5);
    }

    #[test]
    fn empirical_mask_rate_near_half() {
        // A bright image with an empty mask: a view is all-zero iff masked.
        let src = GrayImage::filled(4, 4, 1.0);
        let mask = LungMask::empty(4, 4);
        let cfg = AugmentConfig {
            out_size: (4, 4),
            ..AugmentConfig::with_lung_mask()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut masked = 0;
        for _ in 0..5_000 {
            let (a, b) = make_positive_pair(&src, &mask, &cfg, &mut rng).unwrap();
            masked += (a.pixels()[0] == 0.0) as usize + (b.pixels()[0] == 0.0) as usize;
        }
        let rate = masked as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&rate), "rate {rate}");
    }

    #[test]
    fn paired_masking_masks_first_view_only() {
        let src = GrayImage::filled(4, 4, 1.0);
        let mask = LungMask::empty(4, 4);
        let cfg = AugmentConfig {
            out_size: (4, 4),
            paired_masking: true,
            ..AugmentConfig::with_lung_mask()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut first = 0;
        for _ in 0..1000 {
            let (a, b) = make_positive_pair(&src, &mask, &cfg, &mut rng).unwrap();
            assert_eq!(b.pixels()[0], 1.0);
            first += (a.pixels()[0] == 0.0) as usize;
        }
        assert!(first > 400 && first < 600);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            crop_scale: (0.0, 1.0),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            mask_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn augmentations_stay_in_unit_range_and_leave_source_alone(
            seed in any::<u64>(), h in 2usize..24, w in 2usize..24,
        ) {
            let src = noise(h, w, seed);
            let mask = threshold_segmenter(&src, 0.5);
            let before = src.clone();
            let cfg = AugmentConfig { out_size: (8, 8), ..AugmentConfig::with_lung_mask() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = make_positive_pair(&src, &mask, &cfg, &mut rng).unwrap();
            prop_assert_eq!(&src, &before);
            for p in a.pixels().iter().chain(b.pixels()) {
                prop_assert!((0.0..=1.0).contains(p));
            }
            prop_assert_eq!((a.height(), a.width()), (8, 8));
        }
    }
}
