//! Deterministic synthetic infrared scenes.
//!
//! A scene is a smooth low-frequency background (a base level plus a few 2-D
//! cosines) with additive Gaussian noise, onto which 1–5 small targets are
//! rendered. The target characteristic controls two things:
//!
//! * shape: compact anisotropic Gaussian blobs (Salient, Faint) or thin,
//!   nearly axis-aligned quadratic Bézier strokes (Filamentary, Camouflaged);
//! * local contrast: ≥ 0.4 for Salient/Filamentary, ≤ 0.15 for
//!   Faint/Camouflaged, measured against a 5-pixel ring around the target.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{components, Frame, Mask};

pub const MIN_SIDE: usize = 32;
pub const MAX_TARGETS: usize = 5;
/// Width of the dilation ring used as local background for contrast.
pub const RING_RADIUS: usize = 5;
pub const NOISE_SIGMA: f64 = 0.05;
pub const HIGH_CONTRAST_MIN: f64 = 0.4;
pub const LOW_CONTRAST_MAX: f64 = 0.15;
pub const MIN_ELONGATION: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Characteristic {
    Salient,
    Filamentary,
    Faint,
    Camouflaged,
}

impl Characteristic {
    pub const ALL: [Characteristic; 4] = [
        Characteristic::Salient,
        Characteristic::Filamentary,
        Characteristic::Faint,
        Characteristic::Camouflaged,
    ];

    pub fn is_elongated(self) -> bool {
        matches!(
            self,
            Characteristic::Filamentary | Characteristic::Camouflaged
        )
    }

    pub fn is_high_contrast(self) -> bool {
        matches!(self, Characteristic::Salient | Characteristic::Filamentary)
    }

    pub fn name(self) -> &'static str {
        match self {
            Characteristic::Salient => "Salient",
            Characteristic::Filamentary => "Filamentary",
            Characteristic::Faint => "Faint",
            Characteristic::Camouflaged => "Camouflaged",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Characteristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Characteristic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Characteristic::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown characteristic tag '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfraredSample {
    pub id: String,
    pub tag: Characteristic,
    pub image: Frame,
    /// One (row, col) annotation per target, in component order.
    pub points: Vec<(usize, usize)>,
    /// Hidden ground truth: evaluation only.
    pub gt_mask: Mask,
}

impl InfraredSample {
    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

/// Per-target pixel budget: 0.2% of the frame, but never below the three
/// pixels an elongated target needs.
pub fn target_pixel_cap(height: usize, width: usize) -> usize {
    ((0.002 * (height * width) as f64).floor() as usize).max(3)
}

/// Mix the generation key into one 64-bit seed (SplitMix64 finaliser).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        z ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(z << 6)
            .wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Mean target intensity minus mean intensity of the `RING_RADIUS` dilation
/// ring around it. Pixels in `exclude` (other targets) are left out of the ring.
pub fn local_contrast(image: &Frame, target: &Mask, exclude: &Mask) -> f64 {
    let ring = target.dilate(RING_RADIUS);
    let (mut ts, mut tn, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..image.data().len() {
        let v = image.data()[i];
        if target.data()[i] {
            ts += v;
            tn += 1;
        } else if ring.data()[i] && !exclude.data()[i] {
            rs += v;
            rn += 1;
        }
    }
    if tn == 0 {
        return 0.0;
    }
    let ring_mean = if rn == 0 { 0.0 } else { rs / rn as f64 };
    ts / tn as f64 - ring_mean
}

/// Point annotation for one ground-truth component: its brightest pixel,
/// ties broken by row-major order.
pub fn derive_point(
    gt_mask: &Mask,
    image: &Frame,
    component_index: usize,
) -> Result<(usize, usize)> {
    if gt_mask.shape() != image.shape() {
        return Err(Error::Shape("mask and image shapes differ".into()));
    }
    let comps = components(gt_mask);
    let comp = comps
        .get(component_index)
        .ok_or_else(|| Error::Domain(format!("component {component_index} does not exist")))?;
    let mut best: Option<usize> = None;
    for &p in &comp.pixels {
        if best.map_or(true, |b| image.data()[p] > image.data()[b]) {
            best = Some(p);
        }
    }
    let p = best.ok_or_else(|| Error::Domain("empty component".into()))?;
    Ok((p / gt_mask.width(), p % gt_mask.width()))
}

/// Rendered target: intensity profile in `(0, 1]` over nearby pixels and
/// the binary footprint.
struct TargetShape {
    profile: Vec<(usize, f64)>,
    mask: Mask,
}

/// Slope of the logistic edge applied to a blob's Gaussian profile.
const EDGE_STEEPNESS: f64 = 20.0;

fn blob(rng: &mut ChaCha8Rng, h: usize, w: usize, cy: f64, cx: f64, cap: usize) -> TargetShape {
    let scale = (cap as f64 / 8.0).sqrt().max(0.5);
    let sa = rng.gen_range(1.1..1.5) * scale;
    let sb = sa / rng.gen_range(1.0..1.5);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let reach = (4.0 * sa).ceil() as isize;
    let mut profile = Vec::new();
    let mut mask = Mask::empty(h, w);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (r, col) = (cy.round() as isize + dy, cx.round() as isize + dx);
            if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                continue;
            }
            let (py, px) = (r as f64 - cy, col as f64 - cx);
            let u = px * c + py * s;
            let v = -px * s + py * c;
            let g = (-0.5 * (u * u / (sa * sa) + v * v / (sb * sb))).exp();
            let level = 1.0 / (1.0 + (-EDGE_STEEPNESS * (g - 0.5)).exp());
            if level >= 0.02 {
                let idx = r as usize * w + col as usize;
                profile.push((idx, level));
                if g >= 0.5 {
                    mask.set(r as usize, col as usize, true);
                }
            }
        }
    }
    TargetShape { profile, mask }
}

fn stroke(rng: &mut ChaCha8Rng, h: usize, w: usize, cy: f64, cx: f64, cap: usize) -> TargetShape {
    let width: f64 = rng.gen_range(1.0..1.5);
    let max_len = (cap as f64 / width).min(0.3 * h.min(w) as f64).max(3.0);
    let len = rng.gen_range(0.6..=1.0) * max_len;
    let jitter = rng.gen_range(-0.14..0.14);
    let base = if rng.gen_bool(0.5) {
        0.0
    } else {
        std::f64::consts::FRAC_PI_2
    };
    let (dy, dx) = (base + jitter).sin_cos();
    let (ny, nx) = (dx, -dy);
    let bend = rng.gen_range(-0.6..0.6);
    let p0 = (cy - 0.5 * len * dy, cx - 0.5 * len * dx);
    let p2 = (cy + 0.5 * len * dy, cx + 0.5 * len * dx);
    let p1 = (cy + bend * ny, cx + bend * nx);
    let samples: Vec<(f64, f64)> = (0..=48)
        .map(|i| {
            let t = i as f64 / 48.0;
            let a = (1.0 - t) * (1.0 - t);
            let b = 2.0 * (1.0 - t) * t;
            let c = t * t;
            (
                a * p0.0 + b * p1.0 + c * p2.0,
                a * p0.1 + b * p1.1 + c * p2.1,
            )
        })
        .collect();
    let half = 0.5 * width;
    let reach = (0.5 * len + 3.0).ceil() as isize;
    let mut profile = Vec::new();
    let mut mask = Mask::empty(h, w);
    const SS: usize = 4;
    for oy in -reach..=reach {
        for ox in -reach..=reach {
            let (r, col) = (cy.round() as isize + oy, cx.round() as isize + ox);
            if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                continue;
            }
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let y = r as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64;
                    let x = col as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64;
                    let d2 = samples
                        .iter()
                        .map(|&(qy, qx)| (qy - y).powi(2) + (qx - x).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    if d2 <= half * half {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SS * SS) as f64;
                let idx = r as usize * w + col as usize;
                profile.push((idx, cov));
                if cov >= 0.5 {
                    mask.set(r as usize, col as usize, true);
                }
            }
        }
    }
    TargetShape { profile, mask }
}

fn shape_ok(shape: &TargetShape, tag: Characteristic, cap: usize) -> bool {
    let comps = components(&shape.mask);
    if comps.len() != 1 {
        return false;
    }
    let comp = &comps[0];
    if comp.area() > cap {
        return false;
    }
    if tag.is_elongated() {
        comp.aspect_ratio() >= MIN_ELONGATION
    } else {
        comp.aspect_ratio() < MIN_ELONGATION
    }
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let base = rng.gen_range(0.1..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..=4))
        .map(|_| {
            (
                rng.gen_range(0.02..0.05),
                rng.gen_range(-2.5..2.5),
                rng.gen_range(-2.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut v = base;
            for &(a, fy, fx, ph) in &waves {
                v += a
                    * (std::f64::consts::TAU
                        * (fy * r as f64 / h as f64 + fx * c as f64 / w as f64)
                        + ph)
                        .cos();
            }
            out[r * w + c] = v + noise.sample(rng);
        }
    }
    out
}

fn compose(bg: &[f64], targets: &[TargetShape], amps: &[f64]) -> Vec<f64> {
    let mut img = bg.to_vec();
    for (t, &a) in targets.iter().zip(amps) {
        for &(i, p) in &t.profile {
            img[i] += a * p;
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Render one scene. Pure function of its arguments.
pub fn generate_scene(
    tag: Characteristic,
    size: (usize, usize),
    n_targets: usize,
    seed: u64,
) -> Result<InfraredSample> {
    let (h, w) = size;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Config(format!(
            "scene size {h}x{w} below the {MIN_SIDE}x{MIN_SIDE} minimum"
        )));
    }
    if !(1..=MAX_TARGETS).contains(&n_targets) {
        return Err(Error::Config(format!(
            "n_targets must be in 1..={MAX_TARGETS}, got {n_targets}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        seed,
        tag.index(),
        h as u64,
        w as u64,
        n_targets as u64,
    ]));
    let cap = target_pixel_cap(h, w);
    for _attempt in 0..32 {
        if let Some(sample) = try_scene(&mut rng, tag, h, w, n_targets, cap)? {
            let id = format!("{}-{h}x{w}-n{n_targets}-s{seed}", tag.name().to_lowercase());
            return Ok(InfraredSample { id, ..sample });
        }
    }
    Err(Error::Domain(format!(
        "could not place {n_targets} {tag} targets in a {h}x{w} scene"
    )))
}

fn try_scene(
    rng: &mut ChaCha8Rng,
    tag: Characteristic,
    h: usize,
    w: usize,
    n_targets: usize,
    cap: usize,
) -> Result<Option<InfraredSample>> {
    let bg = background(rng, h, w);
    let mut shapes: Vec<TargetShape> = Vec::with_capacity(n_targets);
    let mut occupied = Mask::empty(h, w);
    let margin = RING_RADIUS as f64 + 2.0;
    for _ in 0..n_targets {
        let mut placed = None;
        for _ in 0..200 {
            let cy = rng.gen_range(margin..h as f64 - margin);
            let cx = rng.gen_range(margin..w as f64 - margin);
            let shape = if tag.is_elongated() {
                stroke(rng, h, w, cy, cx, cap)
            } else {
                blob(rng, h, w, cy, cx, cap)
            };
            if !shape_ok(&shape, tag, cap) {
                continue;
            }
            let halo = shape.mask.dilate(RING_RADIUS + 1);
            if halo.intersection_count(&occupied) > 0 {
                continue;
            }
            placed = Some(shape);
            break;
        }
        let Some(shape) = placed else { return Ok(None) };
        occupied.union_with(&shape.mask);
        shapes.push(shape);
    }

    let goals: Vec<f64> = shapes
        .iter()
        .map(|_| {
            if tag.is_high_contrast() {
                rng.gen_range(0.45..0.6)
            } else {
                rng.gen_range(0.06..0.12)
            }
        })
        .collect();
    let gains: Vec<f64> = shapes
        .iter()
        .map(|s| {
            let inside: Vec<f64> = s
                .profile
                .iter()
                .filter(|(i, _)| s.mask.data()[*i])
                .map(|p| p.1)
                .collect();
            inside.iter().sum::<f64>() / inside.len() as f64
        })
        .collect();
    let mut amps: Vec<f64> = goals.iter().zip(&gains).map(|(g, k)| g / k).collect();
    let mut img = compose(&bg, &shapes, &amps);
    for _ in 0..40 {
        let frame = Frame::new(h, w, img.clone())?;
        let mut converged = true;
        for (i, s) in shapes.iter().enumerate() {
            let c = local_contrast(&frame, &s.mask, &occupied);
            let err = goals[i] - c;
            if err.abs() > 2e-3 {
                converged = false;
                amps[i] = (amps[i] + err / gains[i]).clamp(0.0, 3.0);
            }
        }
        if converged {
            break;
        }
        img = compose(&bg, &shapes, &amps);
    }
    let image = Frame::new(h, w, img)?;
    for s in &shapes {
        let c = local_contrast(&image, &s.mask, &occupied);
        let ok = if tag.is_high_contrast() {
            c >= HIGH_CONTRAST_MIN
        } else {
            c > 0.0 && c <= LOW_CONTRAST_MAX
        };
        if !ok {
            return Ok(None);
        }
    }
    let gt_mask = occupied;
    let comps = components(&gt_mask);
    if comps.len() != n_targets {
        return Ok(None);
    }
    let points = (0..comps.len())
        .map(|i| derive_point(&gt_mask, &image, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(InfraredSample {
        id: String::new(),
        tag,
        image,
        points,
        gt_mask,
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Hold out `round(val_ratio * |ids|)` ids for validation. The test list is
/// left empty: test scenes are generated separately.
pub fn make_split(ids: &[String], val_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(val_ratio > 0.0 && val_ratio < 1.0) {
        return Err(Error::Config(format!(
            "val_ratio must lie in (0, 1), got {val_ratio}"
        )));
    }
    if ids.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 ids to split, got {}",
            ids.len()
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Data("duplicate ids in split input".into()));
    }
    let n_val = ((val_ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5B11])));
    let held: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if held.contains(&i) {
            val.push(id.clone());
        } else {
            train.push(id.clone());
        }
    }
    Ok(DatasetSplit {
        train,
        val,
        test: Vec::new(),
        seed,
    })
}
