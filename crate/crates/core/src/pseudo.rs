//! Point-initialised pseudo-masks and their evolution from predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{centered_window, component_at, components, Component, Mask, SparseMask};

/// Half side of the square search window around each point (33×33).
pub const WINDOW_HALF: usize = 16;
/// Weight of the window maximum in the adaptive threshold.
pub const BLEND: f64 = 0.5;
/// Largest accepted component, as a fraction of the image.
pub const COMPONENT_CAP: f64 = 0.01;

/// Pixel cap of one component for an image of `h × w`.
pub fn component_cap(h: usize, w: usize) -> usize {
    (COMPONENT_CAP * (h * w) as f64).floor() as usize
}

/// Union of radius-1 plus-shaped disks around the points.
pub fn point_disks(h: usize, w: usize, points: &[(usize, usize)]) -> Result<Mask> {
    let mut m = Mask::empty(h, w);
    for &(r, c) in points {
        if r >= h || c >= w {
            return Err(Error::Data(format!(
                "point ({r}, {c}) is outside the {h}x{w} image"
            )));
        }
        m.set(r, c, true);
        if r > 0 {
            m.set(r - 1, c, true);
        }
        if r + 1 < h {
            m.set(r + 1, c, true);
        }
        if c > 0 {
            m.set(r, c - 1, true);
        }
        if c + 1 < w {
            m.set(r, c + 1, true);
        }
    }
    Ok(m)
}

/// Component grown from `(r, c)` in the window-thresholded probability map,
/// or `None` when the point falls below the threshold or the window is flat.
fn candidate(prob: &[f64], h: usize, w: usize, r: usize, c: usize) -> Option<Component> {
    let win = centered_window(h, w, r, c, WINDOW_HALF);
    let (mut max, mut sum, mut n) = (f64::NEG_INFINITY, 0.0, 0usize);
    for rr in win.0..=win.2 {
        for v in &prob[rr * w + win.1..=rr * w + win.3] {
            max = max.max(*v);
            sum += v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    if max - mean <= 1e-12 {
        return None;
    }
    let t = BLEND * max + (1.0 - BLEND) * mean;
    if prob[r * w + c] < t {
        return None;
    }
    let mut above = Mask::empty(h, w);
    for rr in win.0..=win.2 {
        for cc in win.1..=win.3 {
            if prob[rr * w + cc] >= t {
                above.set(rr, cc, true);
            }
        }
    }
    component_at(&above, r, c, Some(win))
}

/// One evolution step of a single mask. Each point proposes the component
/// of its thresholded window; oversized or empty proposals fall back to the
/// point's component in `prev`. Disks around the points are always kept.
pub fn evolve_mask(prev: &Mask, points: &[(usize, usize)], prob: &[f64]) -> Result<Mask> {
    let (h, w) = prev.shape();
    if prob.len() != h * w {
        return Err(Error::Shape(format!(
            "{} probabilities for a {h}x{w} mask",
            prob.len()
        )));
    }
    if prob.iter().any(|p| !p.is_finite()) {
        return Err(Error::numeric(
            "pseudo-mask evolution",
            "non-finite probability",
        ));
    }
    let cap = component_cap(h, w);
    let disks = point_disks(h, w, points)?;
    let previous: Vec<Option<Component>> = points
        .iter()
        .map(|&(r, c)| component_at(prev, r, c, None))
        .collect();
    let mut chosen: Vec<Option<Component>> = points
        .iter()
        .zip(&previous)
        .map(|(&(r, c), old)| match candidate(prob, h, w, r, c) {
            Some(comp) if comp.area() <= cap => Some(comp),
            _ => old.clone(),
        })
        .collect();
    let assemble = |chosen: &[Option<Component>]| {
        let mut m = disks.clone();
        for comp in chosen.iter().flatten() {
            for &p in &comp.pixels {
                m.set_flat(p, true);
            }
        }
        m
    };
    let mut out = assemble(&chosen);
    // Separate proposals can merge into something too large; revert the
    // points involved, first to their previous components, then to disks.
    for fallback_to_disk in [false, true] {
        loop {
            let oversized: Vec<Component> = components(&out)
                .into_iter()
                .filter(|c| c.area() > cap)
                .collect();
            if oversized.is_empty() {
                return Ok(out);
            }
            let mut changed = false;
            for (i, &(r, c)) in points.iter().enumerate() {
                if !oversized.iter().any(|o| o.contains(r * w + c)) {
                    continue;
                }
                let target = if fallback_to_disk {
                    None
                } else {
                    previous[i].clone()
                };
                if chosen[i] != target {
                    chosen[i] = target;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            out = assemble(&chosen);
        }
    }
    Ok(out)
}

/// Pseudo-masks and point annotations for every training and validation id.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMaskStore {
    masks: BTreeMap<String, Mask>,
    points: BTreeMap<String, Vec<(usize, usize)>>,
    pub last_update_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredEntry {
    mask: SparseMask,
    points: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
pub struct PseudoMaskSnapshot {
    entries: BTreeMap<String, StoredEntry>,
    last_update_epoch: usize,
}

impl PseudoMaskStore {
    pub fn init(
        points: BTreeMap<String, Vec<(usize, usize)>>,
        shape: (usize, usize),
    ) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for (id, pts) in &points {
            masks.insert(id.clone(), point_disks(shape.0, shape.1, pts)?);
        }
        Ok(Self {
            masks,
            points,
            last_update_epoch: 0,
        })
    }

    pub fn get(&self, id: &str) -> Result<&Mask> {
        self.masks
            .get(id)
            .ok_or_else(|| Error::State(format!("no pseudo-mask for '{id}'")))
    }

    pub fn points(&self, id: &str) -> Result<&[(usize, usize)]> {
        self.points
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::State(format!("no points for '{id}'")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Replace the mask of `id` by its evolution under `prob`.
    pub fn evolve(&mut self, id: &str, prob: &[f64]) -> Result<()> {
        let next = evolve_mask(self.get(id)?, self.points(id)?, prob)?;
        self.masks.insert(id.to_string(), next);
        Ok(())
    }

    /// Every annotated point is positive in its mask.
    pub fn points_retained(&self) -> bool {
        self.masks
            .iter()
            .all(|(id, m)| self.points[id].iter().all(|&(r, c)| m.get(r, c)))
    }

    /// Largest component area over all masks.
    pub fn largest_component(&self) -> usize {
        self.masks
            .values()
            .flat_map(components)
            .map(|c| c.area())
            .max()
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> PseudoMaskSnapshot {
        let entries = self
            .masks
            .iter()
            .map(|(id, m)| {
                let points = self.points[id].iter().map(|&(r, c)| [r, c]).collect();
                (
                    id.clone(),
                    StoredEntry {
                        mask: SparseMask::from(m),
                        points,
                    },
                )
            })
            .collect();
        PseudoMaskSnapshot {
            entries,
            last_update_epoch: self.last_update_epoch,
        }
    }

    pub fn restore(snapshot: &PseudoMaskSnapshot) -> Result<Self> {
        let mut masks = BTreeMap::new();
        let mut points = BTreeMap::new();
        for (id, e) in &snapshot.entries {
            masks.insert(id.clone(), Mask::try_from(&e.mask)?);
            points.insert(id.clone(), e.points.iter().map(|p| (p[0], p[1])).collect());
        }
        Ok(Self {
            masks,
            points,
            last_update_epoch: snapshot.last_update_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_sizes() {
        assert_eq!(point_disks(64, 64, &[(10, 10)]).unwrap().count(), 5);
        assert_eq!(point_disks(64, 64, &[(0, 0)]).unwrap().count(), 3);
        let two = point_disks(64, 64, &[(10, 10), (30, 40)]).unwrap();
        assert_eq!(two.count(), 10);
        assert!(two.get(10, 10) && two.get(30, 40));
        assert!(matches!(point_disks(8, 8, &[(8, 0)]), Err(Error::Data(_))));
    }

    #[test]
    fn mask_probabilities_are_a_fixed_point() {
        let pts = [(20, 20)];
        let mut prev = point_disks(64, 64, &pts).unwrap();
        prev.set(21, 21, true);
        let evolved = evolve_mask(&prev, &pts, &prev.to_f64()).unwrap();
        assert_eq!(evolved, prev);
    }

    #[test]
    fn zero_prediction_reverts_initial_mask_to_disks() {
        let pts = [(5, 5), (40, 50)];
        let init = point_disks(64, 64, &pts).unwrap();
        assert_eq!(evolve_mask(&init, &pts, &vec![0.0; 64 * 64]).unwrap(), init);
    }

    #[test]
    fn oversized_proposal_keeps_previous_component() {
        let pts = [(32, 32)];
        let init = point_disks(64, 64, &pts).unwrap();
        // a 9×9 plateau (81 px) is above the 40 px cap for 64×64
        let mut p = vec![0.0; 64 * 64];
        for r in 28..37 {
            for c in 28..37 {
                p[r * 64 + c] = 0.9;
            }
        }
        assert_eq!(evolve_mask(&init, &pts, &p).unwrap(), init);
    }
}
