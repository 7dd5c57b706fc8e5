//! From annotated lesions to network-ready patches.
//!
//! A lesion's polygon is rescaled into the extraction frame (×10, 0.88 µm/px
//! by default), boxed, and padded by a micron border. Training draws random
//! square crops from that box and perturbs them with an affine + color
//! augmentation; inference draws crops without augmentation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{validate_polygon, LesionRecord};
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

/// An 8-bit RGB raster at a known resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
    /// Microns per pixel.
    pub mpp: f64,
}

impl RegionImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, mpp: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!("empty region image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", width * height * 3),
                got: format!("{} bytes", pixels.len()),
            });
        }
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::Domain(format!("mpp must be positive, got {mpp}")));
        }
        Ok(RegionImage {
            width,
            height,
            pixels,
            mpp,
        })
    }

    /// Reads a PNG or TIFF; the resolution comes from the caller (manifest),
    /// never from image metadata.
    pub fn load(path: &Path, mpp: f64) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        RegionImage::new(w as usize, h as usize, img.into_raw(), mpp)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb_png(path, self.width, self.height, &self.pixels)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Bilinear resampling to another resolution.
    pub fn resample_to(&self, target_mpp: f64) -> Result<RegionImage> {
        if target_mpp.is_nan() || target_mpp <= 0.0 {
            return Err(Error::Domain(format!("target mpp must be positive, got {target_mpp}")));
        }
        let scale = self.mpp / target_mpp;
        let w = ((self.width as f64 * scale).round() as usize).max(1);
        let h = ((self.height as f64 * scale).round() as usize).max(1);
        let mut out = vec![0u8; w * h * 3];
        for y in 0..h {
            let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..w {
                let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (self.width - 1) as f64);
                for c in 0..3 {
                    let v = bilinear(sx, sy, self.width, self.height, |xx, yy| {
                        f64::from(self.at(xx, yy, c))
                    });
                    out[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        RegionImage::new(w, h, out, target_mpp)
    }

    fn needs_resample(&self, target_mpp: f64) -> bool {
        ((self.mpp - target_mpp) / target_mpp).abs() > 1e-6
    }
}

pub(crate) fn save_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::ShapeMismatch {
            expected: format!("{} bytes", width * height * 3),
            got: format!("{} bytes", pixels.len()),
        })?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m >= n as i64 {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Mirror a continuous pixel-center coordinate into `[0, n - 1]`.
#[inline]
fn reflect_coord(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let m = x.rem_euclid(period);
    if m > last {
        period - m
    } else {
        m
    }
}

#[inline]
fn bilinear(x: f64, y: f64, w: usize, h: usize, fetch: impl Fn(usize, usize) -> f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let xi = x0 as i64;
    let yi = y0 as i64;
    let xa = reflect_index(xi, w);
    let xb = reflect_index(xi + 1, w);
    let ya = reflect_index(yi, h);
    let yb = reflect_index(yi + 1, h);
    let top = fetch(xa, ya) * (1.0 - fx) + fetch(xb, ya) * fx;
    let bottom = fetch(xa, yb) * (1.0 - fx) + fetch(xb, yb) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resolution at another objective magnification.
pub fn mpp_at_magnification(base_mpp: f64, base_mag: f64, target_mag: f64) -> Result<f64> {
    for (name, v) in [
        ("base mpp", base_mpp),
        ("base magnification", base_mag),
        ("target magnification", target_mag),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(base_mpp * (base_mag / target_mag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size_px: usize,
    /// Microns per pixel of the extraction frame.
    pub target_mpp: f64,
    pub border_um: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size_px: 512,
            target_mpp: 0.88,
            border_um: 90.0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size_px == 0 || self.target_mpp.is_nan() || self.target_mpp <= 0.0 || self.border_um.is_nan() || self.border_um < 0.0 {
            return Err(Error::Config(format!("invalid patch spec {self:?}")));
        }
        Ok(())
    }

    pub fn border_px(&self) -> i64 {
        (self.border_um / self.target_mpp).round() as i64
    }

    /// Physical side length of a patch in microns.
    pub fn extent_um(&self) -> f64 {
        self.size_px as f64 * self.target_mpp
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)` in the extraction frame.
/// May extend past the region image; extraction clamps it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl LesionBox {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }

    /// Intersection with a `width × height` image, if non-empty.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<LesionBox> {
        let b = LesionBox {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width as i64),
            y1: self.y1.min(height as i64),
        };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }
}

/// Bounding box of the polygon in the extraction frame, grown by the border.
pub fn fit_lesion_box(
    lesion_id: &str,
    polygon: &[(f64, f64)],
    source_mpp: f64,
    spec: &PatchSpec,
) -> Result<LesionBox> {
    validate_polygon(lesion_id, polygon)?;
    spec.validate()?;
    if !(source_mpp > 0.0 && source_mpp.is_finite()) {
        return Err(Error::Domain(format!(
            "lesion {lesion_id}: source mpp must be positive, got {source_mpp}"
        )));
    }
    let s = source_mpp / spec.target_mpp;
    let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
    let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in polygon {
        xmin = xmin.min(x * s);
        xmax = xmax.max(x * s);
        ymin = ymin.min(y * s);
        ymax = ymax.max(y * s);
    }
    let b = spec.border_px();
    let (x0, y0) = (xmin.floor() as i64, ymin.floor() as i64);
    let x1 = (xmax.ceil() as i64).max(x0 + 1);
    let y1 = (ymax.ceil() as i64).max(y0 + 1);
    Ok(LesionBox {
        x0: x0 - b,
        y0: y0 - b,
        x1: x1 + b,
        y1: y1 + b,
    })
}

pub fn lesion_box(lesion: &LesionRecord, spec: &PatchSpec) -> Result<LesionBox> {
    fit_lesion_box(&lesion.lesion_id, &lesion.polygon, lesion.mpp, spec)
}

/// A square RGB crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub size: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
    pub source_lesion: String,
    /// Crop origin relative to the lesion box; negative when the box is
    /// smaller than the patch and the crop is centered with padding.
    pub offset: (i64, i64),
}

impl Patch {
    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.size + x) * 3 + c]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb_png(path, self.size, self.size, &self.pixels)
    }
}

/// Origin along one axis: uniform over valid positions when the box is
/// large enough, otherwise centered (negative).
fn draw_origin(extent: i64, size: i64, rng: &mut StreamRng) -> i64 {
    if extent >= size {
        rng.random_range(0..=extent - size)
    } else {
        -((size - extent) / 2)
    }
}

/// Cuts a random `size_px` square from the lesion box. Boxes smaller than
/// the patch are centered and filled out by mirroring the box content.
pub fn extract_patch(
    region: &RegionImage,
    lesion_id: &str,
    bx: &LesionBox,
    spec: &PatchSpec,
    rng: &mut StreamRng,
) -> Result<Patch> {
    spec.validate()?;
    let resampled;
    let region = if region.needs_resample(spec.target_mpp) {
        resampled = region.resample_to(spec.target_mpp)?;
        &resampled
    } else {
        region
    };
    let clamped = bx
        .clamp_to(region.width, region.height)
        .ok_or(Error::BoxOutsideImage {
            width: region.width,
            height: region.height,
        })?;
    let size = spec.size_px as i64;
    let (bw, bh) = (clamped.width(), clamped.height());
    let ox = draw_origin(bw, size, rng);
    let oy = draw_origin(bh, size, rng);
    let n = spec.size_px;
    let mut pixels = vec![0u8; n * n * 3];
    let cols: Vec<usize> = (0..size)
        .map(|px| clamped.x0 as usize + reflect_index(ox + px, bw as usize))
        .collect();
    for py in 0..n {
        let sy = clamped.y0 as usize + reflect_index(oy + py as i64, bh as usize);
        let row = &region.pixels[sy * region.width * 3..(sy + 1) * region.width * 3];
        let out = &mut pixels[py * n * 3..(py + 1) * n * 3];
        for (px, &sx) in cols.iter().enumerate() {
            out[px * 3..px * 3 + 3].copy_from_slice(&row[sx * 3..sx * 3 + 3]);
        }
    }
    Ok(Patch {
        size: n,
        pixels,
        source_lesion: lesion_id.to_string(),
        offset: (clamped.x0 - bx.x0 + ox, clamped.y0 - bx.y0 + oy),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Fraction of the patch size, each axis.
    pub max_translate_frac: f64,
    pub max_rotate_deg: f64,
    pub allow_flips: bool,
    pub max_shear_frac: f64,
    pub max_zoom_frac: f64,
    pub max_channel_shift_frac: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            max_translate_frac: 0.25,
            max_rotate_deg: 90.0,
            allow_flips: true,
            max_shear_frac: 0.20,
            max_zoom_frac: 0.20,
            max_channel_shift_frac: 0.20,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.max_translate_frac,
            self.max_shear_frac,
            self.max_zoom_frac,
            self.max_channel_shift_frac,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("augmentation fractions must lie in [0, 1]: {self:?}")));
        }
        if !(0.0..=180.0).contains(&self.max_rotate_deg) {
            return Err(Error::Config(format!(
                "rotation limit must lie in [0, 180], got {}",
                self.max_rotate_deg
            )));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Translation in pixels (x, y).
    pub translate: (f64, f64),
    pub rotate_deg: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Horizontal shear factor.
    pub shear: f64,
    /// Isotropic scale factor.
    pub zoom: f64,
    /// Per-channel intensity multipliers.
    pub channel_scale: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            translate: (0.0, 0.0),
            rotate_deg: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
            shear: 0.0,
            zoom: 1.0,
            channel_scale: [1.0; 3],
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.translate == (0.0, 0.0)
            && self.rotate_deg == 0.0
            && !self.flip_horizontal
            && !self.flip_vertical
            && self.shear == 0.0
            && self.zoom == 1.0
    }
}

fn symmetric(rng: &mut StreamRng, limit: f64) -> f64 {
    limit * (2.0 * rng.random::<f64>() - 1.0)
}

pub fn sample_augmentation(
    config: &AugmentationConfig,
    size: usize,
    rng: &mut StreamRng,
) -> AugmentParams {
    let t = config.max_translate_frac * size as f64;
    let translate = (symmetric(rng, t), symmetric(rng, t));
    let rotate_deg = symmetric(rng, config.max_rotate_deg);
    let (flip_horizontal, flip_vertical) = if config.allow_flips {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    };
    let shear = symmetric(rng, config.max_shear_frac);
    let zoom = 1.0 + symmetric(rng, config.max_zoom_frac);
    let mut channel_scale = [1.0; 3];
    for c in &mut channel_scale {
        *c = 1.0 + symmetric(rng, config.max_channel_shift_frac);
    }
    AugmentParams {
        translate,
        rotate_deg,
        flip_horizontal,
        flip_vertical,
        shear,
        zoom,
        channel_scale,
    }
}

type Mat2 = [[f64; 2]; 2];

fn matmul(a: Mat2, b: Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Multiplicative per-channel intensity change, clamped to the 8-bit range.
pub fn scale_channels(pixels: &mut [u8], scale: [f64; 3]) {
    if scale == [1.0; 3] {
        return;
    }
    for px in pixels.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (f64::from(px[c]) * scale[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Applies translate → rotate → flip → shear → zoom about the patch center
/// (bilinear, mirrored borders), then the channel scaling.
pub fn apply_augmentation(patch: &Patch, params: &AugmentParams) -> Patch {
    let n = patch.size;
    let mut pixels = if params.is_geometric_identity() {
        patch.pixels.clone()
    } else {
        let theta = params.rotate_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let rot = [[c, -s], [s, c]];
        let flip = [
            [if params.flip_horizontal { -1.0 } else { 1.0 }, 0.0],
            [0.0, if params.flip_vertical { -1.0 } else { 1.0 }],
        ];
        let shear = [[1.0, params.shear], [0.0, 1.0]];
        let zoom = [[params.zoom, 0.0], [0.0, params.zoom]];
        // Forward map q = M (p + t); invert it per output pixel.
        let m = matmul(zoom, matmul(shear, matmul(flip, rot)));
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let center = (n as f64 - 1.0) / 2.0;
        let mut out = vec![0u8; n * n * 3];
        for y in 0..n {
            let qy = y as f64 - center;
            for x in 0..n {
                let qx = x as f64 - center;
                let sx = reflect_coord(
                    inv[0][0] * qx + inv[0][1] * qy - params.translate.0 + center,
                    n,
                );
                let sy = reflect_coord(
                    inv[1][0] * qx + inv[1][1] * qy - params.translate.1 + center,
                    n,
                );
                for ch in 0..3 {
                    let v = bilinear(sx, sy, n, n, |xx, yy| f64::from(patch.at(xx, yy, ch)));
                    out[(y * n + x) * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    };
    scale_channels(&mut pixels, params.channel_scale);
    Patch {
        size: n,
        pixels,
        source_lesion: patch.source_lesion.clone(),
        offset: patch.offset,
    }
}

/// Random training-time augmentation; identity when disabled.
pub fn augment(patch: &Patch, config: &AugmentationConfig, rng: &mut StreamRng) -> Patch {
    augment_with_params(patch, config, rng).0
}

pub fn augment_with_params(
    patch: &Patch,
    config: &AugmentationConfig,
    rng: &mut StreamRng,
) -> (Patch, AugmentParams) {
    if !config.enabled {
        return (patch.clone(), AugmentParams::identity());
    }
    let params = sample_augmentation(config, patch.size, rng);
    (apply_augmentation(patch, &params), params)
}

/// Per-channel standardization statistics on the [0, 1] scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl NormStats {
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0u64;
        for p in patches {
            for px in p.pixels.chunks_exact(3) {
                for c in 0..3 {
                    let v = f64::from(px[c]) / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += (p.size * p.size) as u64;
        }
        if count == 0 {
            return Err(Error::EmptyInput("no patches for normalization statistics"));
        }
        let n = count as f64;
        let mut stats = NormStats::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            stats.mean[c] = mean as f32;
            stats.std[c] = var.sqrt().max(1e-3) as f32;
        }
        Ok(stats)
    }

    /// Channel-major (CHW) float tensor.
    pub fn to_tensor(&self, patch: &Patch) -> Vec<f32> {
        let hw = patch.size * patch.size;
        let mut out = vec![0f32; 3 * hw];
        for (i, px) in patch.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = (f32::from(px[c]) / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Loads region images on demand, resampled to the extraction frame, and
/// keeps them in memory up to a byte budget.
pub struct RegionStore {
    target_mpp: f64,
    budget_bytes: usize,
    cache: Mutex<(usize, HashMap<PathBuf, Arc<RegionImage>>)>,
}

impl RegionStore {
    pub fn new(target_mpp: f64, budget_bytes: usize) -> Self {
        RegionStore {
            target_mpp,
            budget_bytes,
            cache: Mutex::new((0, HashMap::new())),
        }
    }

    pub fn get(&self, lesion: &LesionRecord) -> Result<Arc<RegionImage>> {
        if let Some(img) = self.cache.lock().unwrap().1.get(&lesion.image) {
            return Ok(Arc::clone(img));
        }
        let mut img = RegionImage::load(&lesion.image, lesion.mpp)?;
        if img.needs_resample(self.target_mpp) {
            img = img.resample_to(self.target_mpp)?;
        }
        let img = Arc::new(img);
        let mut guard = self.cache.lock().unwrap();
        let (used, map) = &mut *guard;
        if *used + img.pixels.len() <= self.budget_bytes {
            *used += img.pixels.len();
            map.insert(lesion.image.clone(), Arc::clone(&img));
        }
        Ok(img)
    }
}

/// Everything needed to turn a lesion into patches.
pub struct PatchSource {
    pub spec: PatchSpec,
    pub store: RegionStore,
}

impl PatchSource {
    pub fn new(spec: PatchSpec) -> Self {
        PatchSource {
            spec,
            store: RegionStore::new(spec.target_mpp, 2 << 30),
        }
    }

    pub fn with_budget(spec: PatchSpec, budget_bytes: usize) -> Self {
        PatchSource {
            spec,
            store: RegionStore::new(spec.target_mpp, budget_bytes),
        }
    }

    pub fn draw(&self, lesion: &LesionRecord, rng: &mut StreamRng) -> Result<Patch> {
        let region = self.store.get(lesion)?;
        let bx = lesion_box(lesion, &self.spec)?;
        extract_patch(&region, &lesion.lesion_id, &bx, &self.spec, rng)
    }
}

/// One row of the patch cache index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCacheEntry {
    pub lesion_id: String,
    pub draw_index: usize,
    pub offset_x: i64,
    pub offset_y: i64,
    pub seed: u64,
}

/// Writes `draws` random patches per lesion as `<lesion_id>_<draw>.png` plus
/// `index.csv`. Each draw has its own recorded seed.
pub fn write_patch_cache<'a>(
    source: &PatchSource,
    lesions: impl IntoIterator<Item = &'a LesionRecord>,
    draws: usize,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PatchCacheEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for lesion in lesions {
        let lesion_seed = seed::derive_seed(seed, &lesion.lesion_id);
        for draw_index in 0..draws {
            let draw_seed = seed::derive_seed_n(lesion_seed, &[draw_index as u64]);
            let patch = source.draw(lesion, &mut seed::stream(draw_seed))?;
            patch.save_png(&dir.join(format!("{}_{draw_index}.png", lesion.lesion_id)))?;
            entries.push(PatchCacheEntry {
                lesion_id: lesion.lesion_id.clone(),
                draw_index,
                offset_x: patch.offset.0,
                offset_y: patch.offset.1,
                seed: draw_seed,
            });
        }
    }
    let index = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index)?;
    for e in &entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(entries)
}
