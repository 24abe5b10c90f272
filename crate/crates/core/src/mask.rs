//! Binary masks, grayscale frames and 8-connected component labelling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale frame with intensities normalised to `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "frame data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Result<Self> {
        let mut m = Self::empty(height, width);
        for &i in indices {
            if i >= height * width {
                return Err(Error::Data(format!(
                    "mask index {i} out of bounds for {height}x{width}"
                )));
            }
            m.data[i] = true;
        }
        Ok(m)
    }

    /// Threshold probabilities: positive where `p >= t`.
    pub fn threshold(height: usize, width: usize, probs: &[f64], t: f64) -> Result<Self> {
        Self::from_vec(height, width, probs.iter().map(|&p| p >= t).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Set the pixel at row-major index `i`.
    pub fn set_flat(&mut self, i: usize, v: bool) {
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Chebyshev dilation by `radius` pixels (square structuring element).
    pub fn dilate(&self, radius: usize) -> Mask {
        let (h, w) = (self.height, self.width);
        // separable: rows then columns
        let mut rows = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                if self.data[r * w + c] {
                    let lo = c.saturating_sub(radius);
                    let hi = (c + radius).min(w - 1);
                    rows[r * w + lo..=r * w + hi].fill(true);
                }
            }
        }
        let mut out = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                if rows[r * w + c] {
                    let lo = r.saturating_sub(radius);
                    let hi = (r + radius).min(h - 1);
                    for rr in lo..=hi {
                        out[rr * w + c] = true;
                    }
                }
            }
        }
        Mask {
            height: h,
            width: w,
            data: out,
        }
    }
}

/// One 8-connected component. Pixel indices are sorted row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: Vec<usize>,
    /// (row_min, col_min, row_max, col_max), inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
}

impl Component {
    fn from_pixels(mut pixels: Vec<usize>, width: usize) -> Self {
        pixels.sort_unstable();
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        let (mut sr, mut sc) = (0.0, 0.0);
        for &p in &pixels {
            let (r, c) = (p / width, p % width);
            bbox.0 = bbox.0.min(r);
            bbox.1 = bbox.1.min(c);
            bbox.2 = bbox.2.max(r);
            bbox.3 = bbox.3.max(c);
            sr += r as f64;
            sc += c as f64;
        }
        let n = pixels.len() as f64;
        Self {
            pixels,
            bbox,
            centroid: (sr / n, sc / n),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bbox_size(&self) -> (usize, usize) {
        (self.bbox.2 - self.bbox.0 + 1, self.bbox.3 - self.bbox.1 + 1)
    }

    /// Long side over short side of the bounding box.
    pub fn aspect_ratio(&self) -> f64 {
        let (h, w) = self.bbox_size();
        h.max(w) as f64 / h.min(w) as f64
    }

    pub fn contains(&self, index: usize) -> bool {
        self.pixels.binary_search(&index).is_ok()
    }

    pub fn to_mask(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::empty(height, width);
        for &p in &self.pixels {
            m.data[p] = true;
        }
        m
    }
}

/// Inclusive rectangular region `(r0, c0, r1, c1)`.
pub type Window = (usize, usize, usize, usize);

fn flood(
    height: usize,
    width: usize,
    seed: usize,
    inside: impl Fn(usize) -> bool,
    visited: &mut [bool],
    window: Window,
) -> Vec<usize> {
    let mut stack = vec![seed];
    let mut pixels = Vec::new();
    visited[seed] = true;
    while let Some(p) = stack.pop() {
        pixels.push(p);
        let (r, c) = (p / width, p % width);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < window.0 as isize
                    || nc < window.1 as isize
                    || nr > window.2 as isize
                    || nc > window.3 as isize
                {
                    continue;
                }
                let q = nr as usize * width + nc as usize;
                if !visited[q] && inside(q) {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    debug_assert!(pixels.iter().all(|&p| p < height * width));
    pixels
}

/// 8-connected components ordered by their first pixel in row-major scan.
pub fn components(mask: &Mask) -> Vec<Component> {
    let (h, w) = mask.shape();
    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    if h == 0 || w == 0 {
        return out;
    }
    for i in 0..h * w {
        if mask.data[i] && !visited[i] {
            let px = flood(
                h,
                w,
                i,
                |q| mask.data[q],
                &mut visited,
                (0, 0, h - 1, w - 1),
            );
            out.push(Component::from_pixels(px, w));
        }
    }
    out
}

/// Component of `mask` containing `(r, c)`, restricted to `window`.
/// `None` when the pixel itself is not positive.
pub fn component_at(mask: &Mask, r: usize, c: usize, window: Option<Window>) -> Option<Component> {
    let (h, w) = mask.shape();
    let seed = r * w + c;
    if !mask.data[seed] {
        return None;
    }
    let window = window.unwrap_or((0, 0, h - 1, w - 1));
    let mut visited = vec![false; h * w];
    let px = flood(h, w, seed, |q| mask.data[q], &mut visited, window);
    Some(Component::from_pixels(px, w))
}

/// Square window of side `2 * half + 1` centred on `(r, c)`, clipped.
pub fn centered_window(height: usize, width: usize, r: usize, c: usize, half: usize) -> Window {
    (
        r.saturating_sub(half),
        c.saturating_sub(half),
        (r + half).min(height - 1),
        (c + half).min(width - 1),
    )
}

/// Serialisable sparse form of a mask: shape plus positive indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseMask {
    pub height: usize,
    pub width: usize,
    pub positive: Vec<usize>,
}

impl From<&Mask> for SparseMask {
    fn from(m: &Mask) -> Self {
        Self {
            height: m.height,
            width: m.width,
            positive: m.indices(),
        }
    }
}

impl TryFrom<&SparseMask> for Mask {
    type Error = Error;
    fn try_from(s: &SparseMask) -> Result<Self> {
        Mask::from_indices(s.height, s.width, &s.positive)
    }
}
