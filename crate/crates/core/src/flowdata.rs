//! Synthetic frame pairs with exact flow, `.flo` files, color coding and metrics.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{shape_err, DiclError, Result};
use crate::flowhead::FlowField;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub img1: Tensor<T>,
    pub img2: Tensor<T>,
    pub gt_flow: Tensor<T>,
    pub valid: Tensor<T>,
}

impl<T: Scalar> FlowSample<T> {
    pub fn hw(&self) -> (usize, usize) {
        (self.img1.shape()[1], self.img1.shape()[2])
    }

    pub fn gt(&self) -> Result<FlowField<T>> {
        FlowField::with_valid(self.gt_flow.clone(), self.valid.clone())
    }

    pub fn cast<U: Scalar>(&self) -> FlowSample<U> {
        FlowSample {
            img1: self.img1.cast(),
            img2: self.img2.cast(),
            gt_flow: self.gt_flow.cast(),
            valid: self.valid.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Translation,
    Affine,
    Smooth,
}

impl FromStr for SyntheticKind {
    type Err = DiclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(Self::Translation),
            "affine" => Ok(Self::Affine),
            "smooth" => Ok(Self::Smooth),
            _ => Err(DiclError::Config(format!("unknown sample kind '{s}' (translation, affine, smooth)"))),
        }
    }
}

/// Lattice noise with smoothstep interpolation, continuous everywhere.
struct ValueNoise {
    spacing: f64,
    /// World coordinate of lattice node 0.
    offset: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    /// Covers `[-margin, extent + margin]` in both axes (and clamps beyond).
    fn new<R: Rng>(rng: &mut R, spacing: f64, extent: f64, margin: f64) -> Self {
        let cols = ((extent + 2.0 * margin) / spacing).ceil() as usize + 2;
        let values = (0..cols * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { spacing, offset: -margin, cols, values }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let last = (self.cols - 2) as f64;
        let gx = ((x - self.offset) / self.spacing).clamp(0.0, last + 1.0);
        let gy = ((y - self.offset) / self.spacing).clamp(0.0, last + 1.0);
        let (x0, y0) = (gx.floor().min(last), gy.floor().min(last));
        let (tx, ty) = (smooth(gx - x0), smooth(gy - y0));
        let (ix, iy) = (x0 as usize, y0 as usize);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bot = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Octave spacings (pixels) and weights of the synthetic texture.
const OCTAVES: [(f64, f64); 4] = [(32.0, 1.0), (16.0, 0.6), (8.0, 0.4), (4.0, 0.25)];

struct Texture {
    channels: Vec<Vec<ValueNoise>>,
    norm: f64,
}

impl Texture {
    fn new<R: Rng>(rng: &mut R, extent: f64, margin: f64) -> Self {
        let channels =
            (0..3).map(|_| OCTAVES.iter().map(|&(s, _)| ValueNoise::new(rng, s, extent, margin)).collect()).collect();
        Self { channels, norm: OCTAVES.iter().map(|o| o.1).sum() }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        let s: f64 = self.channels[c].iter().zip(&OCTAVES).map(|(n, o)| o.1 * n.at(x, y)).sum();
        (0.5 + 0.5 * s / self.norm).clamp(0.0, 1.0)
    }
}

enum Motion {
    Constant(f64, f64),
    /// `f(p) = A (p - c) + t`
    Affine {
        a: [[f64; 2]; 2],
        c: (f64, f64),
        t: (f64, f64),
    },
    Smooth {
        u: ValueNoise,
        v: ValueNoise,
        scale: f64,
    },
}

impl Motion {
    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Self::Constant(u, v) => (*u, *v),
            Self::Affine { a, c, t } => {
                let (dx, dy) = (x - c.0, y - c.1);
                (a[0][0] * dx + a[0][1] * dy + t.0, a[1][0] * dx + a[1][1] * dy + t.1)
            }
            Self::Smooth { u, v, scale } => (scale * u.at(x, y), scale * v.at(x, y)),
        }
    }

    /// Source point `p` with `p + f(p) = q`, by fixed-point iteration.
    fn invert(&self, qx: f64, qy: f64) -> Option<(f64, f64)> {
        let (mut px, mut py) = (qx, qy);
        for _ in 0..100 {
            let (u, v) = self.at(px, py);
            let (nx, ny) = (qx - u, qy - v);
            let step = (nx - px).abs() + (ny - py).abs();
            px = nx;
            py = ny;
            if step < 1e-12 {
                return Some((px, py));
            }
        }
        let (u, v) = self.at(px, py);
        ((px + u - qx).abs() + (py + v - qy).abs() < 1e-6).then_some((px, py))
    }
}

/// A frame pair whose second image is the first moved by an exact flow field:
/// `img2(p + f(p)) = img1(p)`. Pixels whose destination leaves the frame are invalid.
pub fn gen_synthetic<T: Scalar>(
    seed: u64,
    kind: SyntheticKind,
    size: (usize, usize),
    max_mag: f64,
) -> Result<FlowSample<T>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(shape_err!("sample size must be positive, got {h}x{w}"));
    }
    if !(0.0..=(h.min(w) as f64) / 4.0).contains(&max_mag) {
        return Err(DiclError::Config(format!("max magnitude {max_mag} exceeds a quarter of {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = h.max(w) as f64;
    let texture = Texture::new(&mut rng, extent, 2.0 * max_mag + 2.0);
    let motion = match kind {
        SyntheticKind::Translation => {
            let r = max_mag * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            Motion::Constant(r * a.cos(), r * a.sin())
        }
        SyntheticKind::Affine => {
            let mut a = [[0.0; 2]; 2];
            for row in &mut a {
                for e in row.iter_mut() {
                    *e = rng.random_range(-0.1..0.1);
                }
            }
            let half = max_mag / 2.0;
            let t = (rng.random_range(-half..half), rng.random_range(-half..half));
            let c = (w as f64 / 2.0, h as f64 / 2.0);
            let m = Motion::Affine { a, c, t };
            let peak = corner_peak(&m, h, w);
            let k = if peak > max_mag { max_mag / peak } else { 1.0 };
            Motion::Affine { a: [[a[0][0] * k, a[0][1] * k], [a[1][0] * k, a[1][1] * k]], c, t: (t.0 * k, t.1 * k) }
        }
        SyntheticKind::Smooth => {
            let spacing = extent / 2.0;
            let u = ValueNoise::new(&mut rng, spacing, extent, 2.0 * max_mag + 2.0);
            let v = ValueNoise::new(&mut rng, spacing, extent, 2.0 * max_mag + 2.0);
            let raw = Motion::Smooth { u, v, scale: 1.0 };
            let mut peak: f64 = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = raw.at(x as f64, y as f64);
                    peak = peak.max(a.hypot(b));
                }
            }
            let target = max_mag * rng.random_range(0.5..1.0);
            let Motion::Smooth { u, v, .. } = raw else { unreachable!() };
            Motion::Smooth { u, v, scale: if peak > 0.0 { target / peak } else { 0.0 } }
        }
    };

    render(&texture, &motion, h, w)
}

/// Like [`gen_synthetic`] but with the constant flow `(u, v)` everywhere.
pub fn gen_translation<T: Scalar>(seed: u64, size: (usize, usize), flow: (f64, f64)) -> Result<FlowSample<T>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(shape_err!("sample size must be positive, got {h}x{w}"));
    }
    if !(flow.0.is_finite() && flow.1.is_finite()) {
        return Err(DiclError::Config("translation must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mag = flow.0.hypot(flow.1);
    let texture = Texture::new(&mut rng, h.max(w) as f64, 2.0 * mag + 2.0);
    render(&texture, &Motion::Constant(flow.0, flow.1), h, w)
}

fn render<T: Scalar>(texture: &Texture, motion: &Motion, h: usize, w: usize) -> Result<FlowSample<T>> {
    let s = h * w;
    let mut img1 = vec![T::zero(); 3 * s];
    let mut img2 = vec![T::zero(); 3 * s];
    let mut gt = vec![T::zero(); 2 * s];
    let mut valid = vec![T::zero(); s];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (fx, fy) = (x as f64, y as f64);
            let (u, v) = motion.at(fx, fy);
            gt[p] = T::lit(u);
            gt[s + p] = T::lit(v);
            let (dx, dy) = (fx + u, fy + v);
            let inside = dx >= 0.0 && dy >= 0.0 && dx <= (w - 1) as f64 && dy <= (h - 1) as f64;
            valid[p] = if inside { T::one() } else { T::zero() };
            let src = motion.invert(fx, fy).ok_or_else(|| DiclError::Invalid("flow field is not invertible".into()))?;
            for c in 0..3 {
                img1[c * s + p] = T::lit(texture.at(c, fx, fy));
                img2[c * s + p] = T::lit(texture.at(c, src.0, src.1));
            }
        }
    }
    Ok(FlowSample {
        img1: Tensor::from_vec(&[3, h, w], img1)?,
        img2: Tensor::from_vec(&[3, h, w], img2)?,
        gt_flow: Tensor::from_vec(&[2, h, w], gt)?,
        valid: Tensor::from_vec(&[1, h, w], valid)?,
    })
}

fn corner_peak(m: &Motion, h: usize, w: usize) -> f64 {
    let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
    [(0.0, 0.0), (xm, 0.0), (0.0, ym), (xm, ym)]
        .iter()
        .map(|&(x, y)| {
            let (u, v) = m.at(x, y);
            u.hypot(v)
        })
        .fold(0.0, f64::max)
}

/// Deterministic set of samples: sample `i` uses seed `base_seed + i` and cycles through `kinds`.
pub fn synthetic_set<T: Scalar>(
    base_seed: u64,
    count: usize,
    kinds: &[SyntheticKind],
    size: (usize, usize),
    max_mag: f64,
) -> Result<Vec<FlowSample<T>>> {
    if kinds.is_empty() {
        return Err(DiclError::Empty("no sample kinds".into()));
    }
    (0..count).map(|i| gen_synthetic(base_seed.wrapping_add(i as u64), kinds[i % kinds.len()], size, max_mag)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub epe: f64,
    pub fl_all: f64,
}

fn check_triplet<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<usize> {
    pred.same_shape(gt)?;
    let (c, h, w) = pred.dims3()?;
    if c != 2 || valid.shape() != [1, h, w] {
        return Err(shape_err!(
            "metrics need 2 x h x w flows and a 1 x h x w mask, got {:?} / {:?}",
            pred.shape(),
            valid.shape()
        ));
    }
    let n = valid.data().iter().filter(|&&m| m != T::zero()).count();
    if n == 0 {
        return Err(DiclError::Empty("no valid pixels".into()));
    }
    Ok(h * w)
}

fn errors<'a, T: Scalar>(
    pred: &'a Tensor<T>,
    gt: &'a Tensor<T>,
    valid: &'a Tensor<T>,
    s: usize,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..s).filter(move |&p| valid.data()[p] != T::zero()).map(move |p| {
        let (pu, pv) = (pred.data()[p].as_f64(), pred.data()[s + p].as_f64());
        let (gu, gv) = (gt.data()[p].as_f64(), gt.data()[s + p].as_f64());
        ((pu - gu).hypot(pv - gv), gu.hypot(gv))
    })
}

/// Mean endpoint error over valid pixels.
pub fn epe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<f64> {
    let s = check_triplet(pred, gt, valid)?;
    let (sum, n) = errors(pred, gt, valid, s).fold((0.0, 0usize), |(a, n), (e, _)| (a + e, n + 1));
    Ok(sum / n as f64)
}

/// Fraction of valid pixels with endpoint error above 3 px and above 5% of the true magnitude.
pub fn fl_all<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<f64> {
    let s = check_triplet(pred, gt, valid)?;
    let (bad, n) = errors(pred, gt, valid, s)
        .fold((0usize, 0usize), |(b, n), (e, m)| (b + usize::from(e > 3.0 && e > 0.05 * m), n + 1));
    Ok(bad as f64 / n as f64)
}

pub fn evaluate<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<EvalResult> {
    Ok(EvalResult { epe: epe(pred, gt, valid)?, fl_all: fl_all(pred, gt, valid)? })
}

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo<T: Scalar>(flow: &FlowField<T>) -> Vec<u8> {
    let (h, w) = flow.hw();
    let s = h * w;
    let mut out = Vec::with_capacity(12 + 8 * s);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let d = flow.flow.data();
    for p in 0..s {
        out.extend_from_slice(&(d[p].as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(d[s + p].as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo<T: Scalar>(bytes: &[u8]) -> Result<FlowField<T>> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| DiclError::Format(format!("flo file truncated at byte {}", 4 * i)))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(DiclError::Format(format!("bad flo magic {magic} (expected {FLO_MAGIC})")));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if w <= 0 || h <= 0 {
        return Err(DiclError::Format(format!("bad flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let s = h * w;
    let need = 12 + 8 * s;
    if bytes.len() < need {
        return Err(DiclError::Format(format!("flo payload truncated: {} of {need} bytes", bytes.len())));
    }
    let mut data = vec![T::zero(); 2 * s];
    for p in 0..s {
        data[p] = T::lit(f32::from_le_bytes(word(3 + 2 * p)?) as f64);
        data[s + p] = T::lit(f32::from_le_bytes(word(4 + 2 * p)?) as f64);
    }
    FlowField::new(Tensor::from_vec(&[2, h, w], data)?)
}

pub fn write_flo<T: Scalar>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    fs::write(path, encode_flo(flow))?;
    Ok(())
}

pub fn read_flo<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    decode_flo(&fs::read(path)?)
}

/// The 55-entry Middlebury color wheel.
fn color_wheel() -> Vec<[f64; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(55);
    w.extend((0..ry).map(|i| [255.0, 255.0 * i as f64 / ry as f64, 0.0]));
    w.extend((0..yg).map(|i| [255.0 - 255.0 * i as f64 / yg as f64, 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, 255.0 * i as f64 / gc as f64]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - 255.0 * i as f64 / cb as f64, 255.0]));
    w.extend((0..bm).map(|i| [255.0 * i as f64 / bm as f64, 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - 255.0 * i as f64 / mr as f64]));
    w
}

/// Color-codes a flow field; `max_mag` defaults to the 99th percentile of magnitudes.
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>, max_mag: Option<f64>) -> RgbImage {
    let (h, w) = flow.hw();
    let s = h * w;
    let d = flow.flow.data();
    let mag = |p: usize| d[p].as_f64().hypot(d[s + p].as_f64());
    let max_mag = max_mag.unwrap_or_else(|| {
        let mut m: Vec<f64> = (0..s).map(mag).filter(|v| v.is_finite()).collect();
        m.sort_by(f64::total_cmp);
        m.get(((m.len() as f64 * 0.99) as usize).min(m.len().saturating_sub(1))).copied().unwrap_or(0.0)
    });
    let max_mag = if max_mag > 0.0 { max_mag } else { 1.0 };
    let wheel = color_wheel();
    let n = wheel.len();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let (u, v) = (d[p].as_f64() / max_mag, d[s + p].as_f64() / max_mag);
        if !u.is_finite() || !v.is_finite() {
            return Rgb([0, 0, 0]);
        }
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
        let k0 = fk.floor() as usize % n;
        let k1 = (k0 + 1) % n;
        let f = fk - fk.floor();
        let mut px = [0u8; 3];
        for (i, out) in px.iter_mut().enumerate() {
            let col = ((1.0 - f) * wheel[k0][i] + f * wheel[k1][i]) / 255.0;
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            *out = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Grayscale endpoint-error image scaled so `max_err` maps to white.
pub fn error_image<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, max_err: f64) -> Result<RgbImage> {
    pred.flow.same_shape(&gt.flow)?;
    let (h, w) = pred.hw();
    let s = h * w;
    let (a, b) = (pred.flow.data(), gt.flow.data());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let e = (a[p] - b[p]).as_f64().hypot((a[s + p] - b[s + p]).as_f64());
        let g = (255.0 * e / max_err.max(f64::MIN_POSITIVE)).clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    }))
}

/// Loads an 8-bit image as a `3 x H x W` tensor in `[0, 1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let s = h * w;
    let mut data = vec![T::zero(); 3 * s];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * s + p] = T::lit(px[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Stores a `3 x H x W` tensor in `[0, 1]` as an 8-bit image.
pub fn save_image<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(shape_err!("expected a 3-channel image, got {c}"));
    }
    let s = h * w;
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|ch| (d[ch * s + p].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    out.save(path)?;
    Ok(())
}
