//! The 18-operation augmentation search space.
//!
//! Every operation maps `N×C×H×W` pixels in `[0, 1]` to the same shape and
//! range. Geometric operations resample bilinearly about the image center
//! with zero padding. Each operation also has a vector-Jacobian product so
//! it can sit inside a differentiable pipeline: Equalize and Posterize pass
//! gradients straight through, and AutoContrast treats its per-channel
//! min/max as constants.

use std::fmt;

use armor_tensor::{par, CustomOp, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::data::ImageBatch;
use crate::rng::{fork, substream};
use crate::{ArmorError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    Identity,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Flips,
    Cutout,
    Crop,
}

impl AugKind {
    pub const ALL: [AugKind; 18] = [
        AugKind::Identity,
        AugKind::ShearX,
        AugKind::ShearY,
        AugKind::TranslateX,
        AugKind::TranslateY,
        AugKind::Rotate,
        AugKind::AutoContrast,
        AugKind::Invert,
        AugKind::Equalize,
        AugKind::Solarize,
        AugKind::Posterize,
        AugKind::Contrast,
        AugKind::Color,
        AugKind::Brightness,
        AugKind::Sharpness,
        AugKind::Flips,
        AugKind::Cutout,
        AugKind::Crop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Identity => "Identity",
            AugKind::ShearX => "ShearX",
            AugKind::ShearY => "ShearY",
            AugKind::TranslateX => "TranslateX",
            AugKind::TranslateY => "TranslateY",
            AugKind::Rotate => "Rotate",
            AugKind::AutoContrast => "AutoContrast",
            AugKind::Invert => "Invert",
            AugKind::Equalize => "Equalize",
            AugKind::Solarize => "Solarize",
            AugKind::Posterize => "Posterize",
            AugKind::Contrast => "Contrast",
            AugKind::Color => "Color",
            AugKind::Brightness => "Brightness",
            AugKind::Sharpness => "Sharpness",
            AugKind::Flips => "Flips",
            AugKind::Cutout => "Cutout",
            AugKind::Crop => "Crop",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Magnitude interval from the standard search-space table; `None` for
    /// parameterless operations.
    pub fn default_range(self) -> Option<(f32, f32)> {
        use AugKind::*;
        match self {
            ShearX | ShearY => Some((-0.3, 0.3)),
            TranslateX | TranslateY => Some((-0.45, 0.45)),
            Rotate => Some((-30.0, 30.0)),
            Solarize => Some((0.0, 256.0)),
            Posterize => Some((4.0, 8.0)),
            Contrast | Color | Brightness | Sharpness => Some((0.1, 1.9)),
            Cutout => Some((8.0, 16.0)),
            Identity | AutoContrast | Invert | Equalize | Flips | Crop => None,
        }
    }

    /// Magnitude at which a ranged operation leaves every image unchanged.
    pub fn neutral_magnitude(self) -> Option<f32> {
        use AugKind::*;
        match self {
            ShearX | ShearY | TranslateX | TranslateY | Rotate => Some(0.0),
            Contrast | Color | Brightness | Sharpness => Some(1.0),
            Solarize => Some(256.0),
            Posterize => Some(8.0),
            _ => None,
        }
    }

    /// Whether the operation has a useful input gradient everywhere except
    /// on a measure-zero set.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, AugKind::Equalize | AugKind::Posterize | AugKind::AutoContrast)
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An operation together with its admissible magnitude interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugOp {
    pub kind: AugKind,
    range: Option<(f32, f32)>,
}

impl From<AugKind> for AugOp {
    fn from(kind: AugKind) -> Self {
        Self::new(kind)
    }
}

impl AugOp {
    pub fn new(kind: AugKind) -> Self {
        Self {
            kind,
            range: kind.default_range(),
        }
    }

    /// Same operation with a non-standard magnitude interval.
    pub fn with_range(kind: AugKind, lo: f32, hi: f32) -> Result<Self> {
        if kind.default_range().is_none() || !(lo <= hi) {
            return Err(ArmorError::Contract(format!(
                "{kind} cannot take magnitude range [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            kind,
            range: Some((lo, hi)),
        })
    }

    pub fn range(&self) -> Option<(f32, f32)> {
        self.range
    }

    /// Fixed magnitude used to score the operation during policy search:
    /// the range midpoint, or the midpoint of the upper half when the
    /// midpoint would leave images unchanged.
    pub fn selection_magnitude(&self) -> Option<f32> {
        let (lo, hi) = self.range?;
        let mid = 0.5 * (lo + hi);
        if self.kind.neutral_magnitude() == Some(mid) {
            Some(0.5 * (mid + hi))
        } else {
            Some(mid)
        }
    }

    pub fn sample_magnitude(&self, rng: &mut impl Rng) -> Option<f32> {
        self.range
            .map(|(lo, hi)| if lo < hi { rng.gen_range(lo..=hi) } else { lo })
    }

    fn check_magnitude(&self, m: f32) -> Result<()> {
        match self.range {
            Some((lo, hi)) if !(m >= lo && m <= hi) => Err(ArmorError::Contract(format!(
                "{} magnitude {m} outside [{lo}, {hi}]",
                self.kind
            ))),
            _ => Ok(()),
        }
    }
}

/// Fully resolved per-sample transform: operation, magnitude and the random
/// placement used by Cutout (center) and Crop (offset).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleAug {
    pub kind: AugKind,
    pub magnitude: f32,
    pub place: (usize, usize),
}

impl SampleAug {
    pub const IDENTITY: SampleAug = SampleAug {
        kind: AugKind::Identity,
        magnitude: 0.0,
        place: (0, 0),
    };
}

const CROP_PAD: usize = 4;

fn draw_place(kind: AugKind, h: usize, w: usize, rng: &mut impl Rng) -> (usize, usize) {
    match kind {
        AugKind::Cutout => (rng.gen_range(0..h), rng.gen_range(0..w)),
        AugKind::Crop => (rng.gen_range(0..=2 * CROP_PAD), rng.gen_range(0..=2 * CROP_PAD)),
        _ => (0, 0),
    }
}

/// Per-sample plan for applying `op` to `n` images of size `h×w`. A `None`
/// magnitude is sampled uniformly per sample. Sample `i` draws from its own
/// substream of a base seed taken from `rng`.
pub fn plan_op(n: usize, (h, w): (usize, usize), op: &AugOp, magnitude: Option<f32>, rng: &mut impl Rng) -> Result<Vec<SampleAug>> {
    if let Some(m) = magnitude {
        op.check_magnitude(m)?;
    }
    let base = fork(rng);
    Ok((0..n)
        .map(|i| {
            let mut r = substream(base, i as u64);
            let magnitude = magnitude.or_else(|| op.sample_magnitude(&mut r)).unwrap_or(0.0);
            SampleAug {
                kind: op.kind,
                magnitude,
                place: draw_place(op.kind, h, w, &mut r),
            }
        })
        .collect())
}

/// Per-sample plan following each sample's class assignment.
pub fn plan_policy(labels: &[usize], (h, w): (usize, usize), policy: &AugPolicy, rng: &mut impl Rng) -> Result<Vec<SampleAug>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= policy.classes()) {
        return Err(ArmorError::Contract(format!(
            "label {bad} out of range for a {}-class policy",
            policy.classes()
        )));
    }
    let base = fork(rng);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let entry = &policy.entries[y];
            let mut r = substream(base, i as u64);
            let magnitude = entry
                .magnitude
                .or_else(|| entry.op.sample_magnitude(&mut r))
                .unwrap_or(0.0);
            SampleAug {
                kind: entry.op.kind,
                magnitude,
                place: draw_place(entry.op.kind, h, w, &mut r),
            }
        })
        .collect())
}

/// Applies `op` at `magnitude` to every sample.
pub fn apply_op(batch: &ImageBatch, op: &AugOp, magnitude: f32, rng: &mut impl Rng) -> Result<ImageBatch> {
    let (_, h, w) = batch.image_dims();
    let plan = plan_op(batch.len(), (h, w), op, Some(magnitude), rng)?;
    apply_plan(batch, &plan)
}

/// Transforms each sample with its class's assigned operation.
pub fn apply_policy(batch: &ImageBatch, policy: &AugPolicy, rng: &mut impl Rng) -> Result<ImageBatch> {
    let (_, h, w) = batch.image_dims();
    let plan = plan_policy(batch.labels(), (h, w), policy, rng)?;
    apply_plan(batch, &plan)
}

pub fn apply_plan(batch: &ImageBatch, plan: &[SampleAug]) -> Result<ImageBatch> {
    let mut out = batch.with_images(augment_images(batch.images(), plan)?);
    out.augmented = true;
    Ok(out)
}

/// Forward pass of a plan on raw pixels.
pub fn augment_images<T: Real>(images: &Tensor<T>, plan: &[SampleAug]) -> Result<Tensor<T>> {
    let (n, c, h, w) = images.dims4()?;
    if plan.len() != n {
        return Err(ArmorError::Contract(format!("{} transforms for {n} images", plan.len())));
    }
    let len = c * h * w;
    let mut out = images.data().to_vec();
    par::for_each_chunk(&mut out, len, |i, dst| {
        let raw = forward_raw(&plan[i], &images.data()[i * len..(i + 1) * len], (c, h, w));
        for (d, r) in dst.iter_mut().zip(raw) {
            *d = clamp01(r);
        }
    });
    Ok(Tensor::new(images.shape().to_vec(), out)?)
}

/// Differentiable application of a plan on the tape.
pub fn augment_var<'t, T: Real>(x: Var<'t, T>, plan: &[SampleAug]) -> Result<Var<'t, T>> {
    let value = x.with_value(|t| augment_images(t, plan))?;
    let tape: &'t Tape<T> = x.tape();
    Ok(tape.custom(&[x], value, Box::new(PlanBackward { plan: plan.to_vec() }))?)
}

struct PlanBackward {
    plan: Vec<SampleAug>,
}

impl<T: Real> CustomOp<T> for PlanBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Vec<T>> {
        let x = inputs[0];
        let s = x.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let len = c * h * w;
        let mut gx = vec![T::zero(); x.len()];
        par::for_each_chunk(&mut gx, len, |i, dst| {
            let img = &x.data()[i * len..(i + 1) * len];
            let g = &grad[i * len..(i + 1) * len];
            let gi = backward_image(&self.plan[i], img, g, (c, h, w));
            dst.copy_from_slice(&gi);
        });
        vec![gx]
    }
}

#[inline]
fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn luma_coefs(c: usize) -> Vec<f64> {
    if c == 3 {
        vec![0.299, 0.587, 0.114]
    } else {
        vec![1.0 / c as f64; c]
    }
}

/// Up to four bilinear taps `(source index, weight)` per output pixel of
/// one `h×w` plane, zero padding outside.
fn sampling_taps(s: &SampleAug, h: usize, w: usize) -> Vec<[(usize, f64); 4]> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let m = s.magnitude as f64;
    let (sin, cos) = m.to_radians().sin_cos();
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let (sx, sy) = match s.kind {
                AugKind::ShearX => (u + m * v + cx, y as f64),
                AugKind::ShearY => (x as f64, v + m * u + cy),
                AugKind::TranslateX => (x as f64 - m * w as f64, y as f64),
                AugKind::TranslateY => (x as f64, y as f64 - m * h as f64),
                AugKind::Rotate => (cos * u - sin * v + cx, sin * u + cos * v + cy),
                AugKind::Flips => ((w - 1 - x) as f64, y as f64),
                AugKind::Crop => (
                    x as f64 + s.place.1 as f64 - CROP_PAD as f64,
                    y as f64 + s.place.0 as f64 - CROP_PAD as f64,
                ),
                _ => (x as f64, y as f64),
            };
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut t = [(0usize, 0.0f64); 4];
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for (slot, (ty, tx, wt)) in t.iter_mut().zip(corners) {
                if wt != 0.0 && ty >= 0.0 && tx >= 0.0 && ty < h as f64 && tx < w as f64 {
                    *slot = (ty as usize * w + tx as usize, wt);
                }
            }
            taps.push(t);
        }
    }
    taps
}

fn is_geometric(kind: AugKind) -> bool {
    use AugKind::*;
    matches!(kind, ShearX | ShearY | TranslateX | TranslateY | Rotate | Flips | Crop)
}

/// 3×3 box mean on interior pixels, border pixels unchanged.
fn box_blur<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = plane.to_vec();
    let ninth = T::lit(1.0 / 9.0);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut acc = T::zero();
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    acc += plane[yy * w + xx];
                }
            }
            out[y * w + x] = acc * ninth;
        }
    }
    out
}

fn box_blur_transpose<T: Real>(g: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = g.to_vec();
    let ninth = T::lit(1.0 / 9.0);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            out[y * w + x] -= g[y * w + x];
        }
    }
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let share = g[y * w + x] * ninth;
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    out[yy * w + xx] += share;
                }
            }
        }
    }
    out
}

fn quantize<T: Real>(v: T) -> usize {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as usize
}

/// Histogram-equalization lookup table for one channel, or `None` when the
/// channel is left unchanged.
fn equalize_lut(q: &[usize]) -> Option<[usize; 256]> {
    let mut hist = [0usize; 256];
    for &v in q {
        hist[v] += 1;
    }
    let nonzero: Vec<usize> = hist.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.len() <= 1 {
        return None;
    }
    let step = (nonzero.iter().sum::<usize>() - nonzero[nonzero.len() - 1]) / 255;
    if step == 0 {
        return None;
    }
    let mut lut = [0usize; 256];
    let mut acc = step / 2;
    for (l, &count) in lut.iter_mut().zip(&hist) {
        *l = (acc / step).min(255);
        acc += count;
    }
    Some(lut)
}

/// Unclamped output of one image.
fn forward_raw<T: Real>(s: &SampleAug, img: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let plane = h * w;
    let m = T::lit(s.magnitude as f64);
    let one = T::one();
    match s.kind {
        AugKind::Identity => img.to_vec(),
        k if is_geometric(k) => {
            let taps = sampling_taps(s, h, w);
            let mut out = vec![T::zero(); img.len()];
            for ch in 0..c {
                let src = &img[ch * plane..(ch + 1) * plane];
                for (o, t) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&taps) {
                    let mut acc = T::zero();
                    for &(idx, wt) in t {
                        if wt != 0.0 {
                            acc += T::lit(wt) * src[idx];
                        }
                    }
                    *o = acc;
                }
            }
            out
        }
        AugKind::AutoContrast => {
            let mut out = img.to_vec();
            for p in out.chunks_mut(plane) {
                let lo = p.iter().fold(T::infinity(), |a, &b| a.min(b));
                let hi = p.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                if hi > lo {
                    let span = hi - lo;
                    p.iter_mut().for_each(|v| *v = (*v - lo) / span);
                }
            }
            out
        }
        AugKind::Invert => img.iter().map(|&v| one - v).collect(),
        AugKind::Equalize => {
            let mut out = img.to_vec();
            for p in out.chunks_mut(plane) {
                let q: Vec<usize> = p.iter().map(|&v| quantize(v)).collect();
                if let Some(lut) = equalize_lut(&q) {
                    for (v, &qi) in p.iter_mut().zip(&q) {
                        *v = T::lit(lut[qi] as f64 / 255.0);
                    }
                }
            }
            out
        }
        AugKind::Solarize => {
            let thr = T::lit(s.magnitude as f64 / 256.0);
            img.iter().map(|&v| if v > thr { one - v } else { v }).collect()
        }
        AugKind::Posterize => {
            let bits = (s.magnitude.round() as u32).clamp(1, 8);
            let mask = 0xFFusize << (8 - bits) & 0xFF;
            img.iter()
                .map(|&v| {
                    let q = quantize(v);
                    if bits == 8 {
                        T::lit(q as f64) / T::lit(255.0)
                    } else {
                        T::lit((q & mask) as f64) / T::lit(255.0)
                    }
                })
                .collect()
        }
        AugKind::Contrast => {
            let coefs = luma_coefs(c);
            let mut mean = T::zero();
            for (ch, &k) in coefs.iter().enumerate() {
                let s: T = img[ch * plane..(ch + 1) * plane].iter().copied().sum();
                mean += T::lit(k) * s;
            }
            mean = mean / T::lit(plane as f64);
            img.iter().map(|&v| (one - m) * mean + m * v).collect()
        }
        AugKind::Color => {
            let coefs = luma_coefs(c);
            let mut gray = vec![T::zero(); plane];
            for (ch, &k) in coefs.iter().enumerate() {
                for (g, &v) in gray.iter_mut().zip(&img[ch * plane..(ch + 1) * plane]) {
                    *g += T::lit(k) * v;
                }
            }
            let mut out = img.to_vec();
            for p in out.chunks_mut(plane) {
                for (v, &g) in p.iter_mut().zip(&gray) {
                    *v = (one - m) * g + m * *v;
                }
            }
            out
        }
        AugKind::Brightness => img.iter().map(|&v| m * v).collect(),
        AugKind::Sharpness => {
            let mut out = Vec::with_capacity(img.len());
            for p in img.chunks(plane) {
                let blurred = box_blur(p, h, w);
                out.extend(p.iter().zip(&blurred).map(|(&v, &b)| (one - m) * b + m * v));
            }
            out
        }
        AugKind::Cutout => {
            let mut out = img.to_vec();
            let (y0, y1, x0, x1) = cutout_box(s, h, w);
            let half = T::lit(0.5);
            for p in out.chunks_mut(plane) {
                for y in y0..y1 {
                    p[y * w + x0..y * w + x1].fill(half);
                }
            }
            out
        }
        _ => unreachable!("geometric kinds handled above"),
    }
}

fn cutout_box(s: &SampleAug, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let side = s.magnitude.round().max(0.0) as i64;
    let (cy, cx) = (s.place.0 as i64, s.place.1 as i64);
    let clip = |start: i64, n: usize| {
        let a = start.clamp(0, n as i64) as usize;
        let b = (start + side).clamp(0, n as i64) as usize;
        (a, b)
    };
    let (y0, y1) = clip(cy - side / 2, h);
    let (x0, x1) = clip(cx - side / 2, w);
    (y0, y1, x0, x1)
}

/// Vector-Jacobian product of one image's transform.
fn backward_image<T: Real>(s: &SampleAug, img: &[T], grad: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let raw = forward_raw(s, img, (c, h, w));
    // output clamp: gradient passes where the unclamped value lies in [0, 1]
    let g: Vec<T> = grad
        .iter()
        .zip(&raw)
        .map(|(&g, &r)| if r >= T::zero() && r <= T::one() { g } else { T::zero() })
        .collect();
    let plane = h * w;
    let m = T::lit(s.magnitude as f64);
    let one = T::one();
    match s.kind {
        AugKind::Identity | AugKind::Equalize | AugKind::Posterize => g,
        k if is_geometric(k) => {
            let taps = sampling_taps(s, h, w);
            let mut gx = vec![T::zero(); img.len()];
            for ch in 0..c {
                let dst = &mut gx[ch * plane..(ch + 1) * plane];
                for (&go, t) in g[ch * plane..(ch + 1) * plane].iter().zip(&taps) {
                    for &(idx, wt) in t {
                        if wt != 0.0 {
                            dst[idx] += T::lit(wt) * go;
                        }
                    }
                }
            }
            gx
        }
        AugKind::AutoContrast => {
            let mut gx = g;
            for (p, gp) in img.chunks(plane).zip(gx.chunks_mut(plane)) {
                let lo = p.iter().fold(T::infinity(), |a, &b| a.min(b));
                let hi = p.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                if hi > lo {
                    let span = hi - lo;
                    gp.iter_mut().for_each(|v| *v /= span);
                }
            }
            gx
        }
        AugKind::Invert => g.iter().map(|&v| -v).collect(),
        AugKind::Solarize => {
            let thr = T::lit(s.magnitude as f64 / 256.0);
            g.iter()
                .zip(img)
                .map(|(&gv, &x)| if x > thr { -gv } else { gv })
                .collect()
        }
        AugKind::Contrast => {
            let coefs = luma_coefs(c);
            let total: T = g.iter().copied().sum();
            let shared = (one - m) * total / T::lit(plane as f64);
            let mut gx = Vec::with_capacity(img.len());
            for (ch, &k) in coefs.iter().enumerate() {
                gx.extend(g[ch * plane..(ch + 1) * plane].iter().map(|&gv| m * gv + shared * T::lit(k)));
            }
            gx
        }
        AugKind::Color => {
            let coefs = luma_coefs(c);
            let mut gsum = vec![T::zero(); plane];
            for gp in g.chunks(plane) {
                gsum.iter_mut().zip(gp).for_each(|(a, &b)| *a += b);
            }
            let mut gx = Vec::with_capacity(img.len());
            for (ch, &k) in coefs.iter().enumerate() {
                let kk = (one - m) * T::lit(k);
                gx.extend(
                    g[ch * plane..(ch + 1) * plane]
                        .iter()
                        .zip(&gsum)
                        .map(|(&gv, &gs)| m * gv + kk * gs),
                );
            }
            gx
        }
        AugKind::Brightness => g.iter().map(|&v| m * v).collect(),
        AugKind::Sharpness => {
            let mut gx = Vec::with_capacity(img.len());
            for gp in g.chunks(plane) {
                let bt = box_blur_transpose(gp, h, w);
                gx.extend(gp.iter().zip(&bt).map(|(&gv, &b)| m * gv + (one - m) * b));
            }
            gx
        }
        AugKind::Cutout => {
            let mut gx = g;
            let (y0, y1, x0, x1) = cutout_box(s, h, w);
            for p in gx.chunks_mut(plane) {
                for y in y0..y1 {
                    p[y * w + x0..y * w + x1].fill(T::zero());
                }
            }
            gx
        }
        _ => unreachable!("geometric kinds handled above"),
    }
}

/// One class's assignment: an operation and an optional fixed magnitude
/// (sampled per application when absent).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyEntry {
    pub op: AugOp,
    pub magnitude: Option<f32>,
}

impl PolicyEntry {
    pub fn sampled(kind: AugKind) -> Self {
        Self {
            op: AugOp::new(kind),
            magnitude: None,
        }
    }
}

/// Per-class augmentation assignment; entry `k` serves class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    entries: Vec<PolicyEntry>,
}

impl AugPolicy {
    pub fn new(entries: Vec<PolicyEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(ArmorError::Contract("a policy needs at least one class".into()));
        }
        for e in &entries {
            if let Some(m) = e.magnitude {
                e.op.check_magnitude(m)?;
            }
        }
        Ok(Self { entries })
    }

    /// The same sampled-magnitude operation for every class.
    pub fn uniform(kind: AugKind, classes: usize) -> Result<Self> {
        Self::new(vec![PolicyEntry::sampled(kind); classes])
    }

    pub fn identity(classes: usize) -> Result<Self> {
        Self::uniform(AugKind::Identity, classes)
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, class: usize) -> &PolicyEntry {
        &self.entries[class]
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().all(|e| e.op.kind == AugKind::Identity)
    }

    /// `class=<k> op=<name> magnitude=<real|sampled>`, one line per class.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, e) in self.entries.iter().enumerate() {
            let mag = e.magnitude.map_or_else(|| "sampled".to_string(), |m| m.to_string());
            s.push_str(&format!("class={k} op={} magnitude={mag}\n", e.op.kind));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| ArmorError::Parse { line: i + 1, message: m };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [class, op, mag] = fields[..] else {
                return Err(err(format!("expected `class=<k> op=<name> magnitude=<m>`, got `{line}`")));
            };
            let value = |field: &str, key: &str| -> Result<String> {
                field
                    .strip_prefix(key)
                    .and_then(|r| r.strip_prefix('='))
                    .map(str::to_string)
                    .ok_or_else(|| err(format!("expected `{key}=...`, got `{field}`")))
            };
            let k: usize = value(class, "class")?
                .parse()
                .map_err(|_| err(format!("bad class index in `{class}`")))?;
            if k != entries.len() {
                return Err(err(format!("expected class {}, got {k}", entries.len())));
            }
            let name = value(op, "op")?;
            let kind = AugKind::from_name(&name).ok_or_else(|| err(format!("unknown operation `{name}`")))?;
            let mag = value(mag, "magnitude")?;
            let magnitude = if mag == "sampled" {
                None
            } else {
                Some(mag.parse::<f32>().map_err(|_| err(format!("bad magnitude `{mag}`")))?)
            };
            let entry = PolicyEntry {
                op: AugOp::new(kind),
                magnitude,
            };
            if let Some(m) = magnitude {
                entry.op.check_magnitude(m).map_err(|e| err(e.to_string()))?;
            }
            entries.push(entry);
        }
        Self::new(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(0.05..0.95)).unwrap();
        ImageBatch::new(t, (0..n).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn table_ranges() {
        assert_eq!(AugKind::ShearX.default_range(), Some((-0.3, 0.3)));
        assert_eq!(AugKind::Rotate.default_range(), Some((-30.0, 30.0)));
        assert_eq!(AugKind::Solarize.default_range(), Some((0.0, 256.0)));
        assert_eq!(AugKind::Cutout.default_range(), Some((8.0, 16.0)));
        for k in [AugKind::Identity, AugKind::AutoContrast, AugKind::Invert, AugKind::Equalize, AugKind::Flips, AugKind::Crop] {
            assert_eq!(k.default_range(), None);
        }
        assert_eq!(AugKind::ALL.len(), 18);
        for k in AugKind::ALL {
            assert_eq!(AugKind::from_name(k.name()), Some(k));
        }
    }

    #[test]
    fn identity_is_bit_exact() {
        let b = batch(3, 3, 8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_op(&b, &AugOp::new(AugKind::Identity), 0.0, &mut rng).unwrap();
        assert_eq!(out.images(), b.images());
        assert!(out.augmented);
    }

    #[test]
    fn invert_is_an_involution() {
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.25, 0.6]).unwrap();
        let b = ImageBatch::new(t, vec![0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let op = AugOp::new(AugKind::Invert);
        let once = apply_op(&b, &op, 0.0, &mut rng).unwrap();
        assert_eq!(once.images().data()[0], 0.75);
        let twice = apply_op(&once, &op, 0.0, &mut rng).unwrap();
        for (a, b) in twice.images().data().iter().zip(b.images().data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn posterize_eight_bits_keeps_quantized_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(0..=255u32) as f32 / 255.0).unwrap();
        let b = ImageBatch::new(t, vec![0, 1], 2).unwrap();
        let out = apply_op(&b, &AugOp::new(AugKind::Posterize), 8.0, &mut rng).unwrap();
        assert_eq!(out.images(), b.images());
    }

    #[test]
    fn solarize_full_threshold_is_identity() {
        let b = batch(2, 3, 4, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_op(&b, &AugOp::new(AugKind::Solarize), 256.0, &mut rng).unwrap();
        assert_eq!(out.images(), b.images());
    }

    #[test]
    fn magnitude_out_of_range_is_contract_violation() {
        let b = batch(1, 1, 4, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = apply_op(&b, &AugOp::new(AugKind::Rotate), 45.0, &mut rng).unwrap_err();
        assert!(matches!(err, ArmorError::Contract(_)));
    }

    #[test]
    fn neutral_magnitudes_are_identity() {
        let b = batch(2, 3, 8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (kind, m) in [
            (AugKind::Rotate, 0.0),
            (AugKind::ShearX, 0.0),
            (AugKind::ShearY, 0.0),
            (AugKind::TranslateX, 0.0),
            (AugKind::TranslateY, 0.0),
            (AugKind::Brightness, 1.0),
            (AugKind::Contrast, 1.0),
            (AugKind::Color, 1.0),
            (AugKind::Sharpness, 1.0),
        ] {
            let out = apply_op(&b, &AugOp::new(kind), m, &mut rng).unwrap();
            let diff = out
                .images()
                .data()
                .iter()
                .zip(b.images().data())
                .fold(0.0f32, |d, (a, b)| d.max((a - b).abs()));
            assert!(diff < 1e-6, "{kind}: {diff}");
        }
    }

    #[test]
    fn selection_magnitude_avoids_neutral_midpoints() {
        assert_eq!(AugOp::new(AugKind::Rotate).selection_magnitude(), Some(15.0));
        assert_eq!(AugOp::new(AugKind::Brightness).selection_magnitude(), Some(1.45));
        assert_eq!(AugOp::new(AugKind::Solarize).selection_magnitude(), Some(128.0));
        assert_eq!(AugOp::new(AugKind::Cutout).selection_magnitude(), Some(12.0));
        assert_eq!(AugOp::new(AugKind::Flips).selection_magnitude(), None);
    }

    #[test]
    fn cutout_fills_square_with_gray() {
        let s = SampleAug {
            kind: AugKind::Cutout,
            magnitude: 2.0,
            place: (1, 1),
        };
        let img = vec![0.0f32; 16];
        let out = forward_raw(&s, &img, (1, 4, 4));
        let filled: Vec<usize> = (0..16).filter(|&i| out[i] == 0.5).collect();
        assert_eq!(filled, vec![0, 1, 4, 5]);
    }

    #[test]
    fn flips_mirror_rows() {
        let s = SampleAug {
            kind: AugKind::Flips,
            magnitude: 0.0,
            place: (0, 0),
        };
        let img = vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(forward_raw(&s, &img, (1, 2, 3)), vec![0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
    }

    #[test]
    fn equalize_spreads_histogram() {
        let s = SampleAug {
            kind: AugKind::Equalize,
            magnitude: 0.0,
            place: (0, 0),
        };
        let img: Vec<f32> = (0..1024).map(|i| (i / 256) as f32 * 0.1).collect();
        let out = forward_raw(&s, &img, (1, 32, 32));
        assert_eq!(out[0], 0.0);
        assert_eq!(out[256], 85.0 / 255.0);
        assert_eq!(out[512], 171.0 / 255.0);
        assert_eq!(out[1023], 1.0);
    }

    #[test]
    fn policy_text_round_trip_and_errors() {
        let p = AugPolicy::new(vec![
            PolicyEntry::sampled(AugKind::Crop),
            PolicyEntry {
                op: AugOp::new(AugKind::Rotate),
                magnitude: Some(12.5),
            },
        ])
        .unwrap();
        let text = p.to_text();
        assert_eq!(text, "class=0 op=Crop magnitude=sampled\nclass=1 op=Rotate magnitude=12.5\n");
        assert_eq!(AugPolicy::parse(&text).unwrap(), p);
        assert!(AugPolicy::parse("class=0 op=Spin magnitude=sampled").is_err());
        assert!(AugPolicy::parse("class=1 op=Crop magnitude=sampled").is_err());
        assert!(AugPolicy::parse("class=0 op=Rotate magnitude=90").is_err());
    }

    #[test]
    fn policy_label_out_of_range() {
        let b = batch(3, 1, 4, 4, 0);
        let p = AugPolicy::identity(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(apply_policy(&b, &p, &mut rng), Err(ArmorError::Contract(_))));
    }
}
