//! Segmentation scores: foreground-restricted Rand and information F-scores,
//! Dice, and the post-processing steps that feed them.
//!
//! Labelings use 0 for boundary/background and positive ids for segments.
//! Only pixels with a positive truth id are scored. Predicted pixels with id
//! 0 inside that region each count as a segment of their own.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Labeling, Mask};

/// 1 where `prob ≥ t`.
pub fn threshold(prob: &Image, t: f32) -> Result<Mask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {t}")));
    }
    Ok(prob.map(|v| (v >= t) as u8))
}

/// Mirror index for arbitrary overshoot (edge pixel not repeated).
fn fold(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Median over the `(2r+1)²` window, borders mirrored.
pub fn median_filter(prob: &Image, radius: usize) -> Image {
    if radius == 0 || prob.is_empty() {
        return prob.clone();
    }
    let (h, w) = prob.dims();
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    Grid::from_fn(h, w, |y, x| {
        window.clear();
        for dy in -r..=r {
            let sy = fold(y as isize + dy, h);
            for dx in -r..=r {
                window.push(prob.get(sy, fold(x as isize + dx, w)));
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
    })
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// 4-connected components of the 1-pixels, numbered from 1 in raster order
/// of discovery.
pub fn connected_components(mask: &Mask) -> Labeling {
    let (h, w) = mask.dims();
    let mut out = Grid::filled(h, w, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 || out.get(y, x) != 0 {
                continue;
            }
            next += 1;
            out.set(y, x, next);
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask.get(ny, nx) != 0 && out.get(ny, nx) == 0 {
                        out.set(ny, nx, next);
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    out
}

/// Segments enclosed by a boundary mask (1 = boundary).
pub fn labeling_from_boundary(boundary: &Mask) -> Labeling {
    connected_components(&boundary.map(|v| (v == 0) as u8))
}

/// One thinning pass over the zero pixels of a labeling, made of four
/// directional sub-passes (segment above, below, left, right). In each
/// sub-pass a zero pixel joins the segment on that side when the opposite
/// neighbour is also zero and neither perpendicular neighbour belongs to a
/// segment. Decisions within a sub-pass read the state at its start, so a
/// pixel only ever joins the one segment it touches and no two segments
/// merge.
pub fn thin_labeling(labels: &Labeling) -> Labeling {
    let (h, w) = labels.dims();
    let mut out = labels.clone();
    let at = |g: &Labeling, y: isize, x: isize| -> Option<u32> {
        (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| g.get(y as usize, x as usize))
    };
    for (dy, dx) in NEIGHBOURS {
        let before = out.clone();
        for y in 0..h {
            for x in 0..w {
                if before.get(y, x) != 0 {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                let Some(id) = at(&before, yi + dy, xi + dx).filter(|&v| v > 0) else {
                    continue;
                };
                if at(&before, yi - dy, xi - dx) != Some(0) {
                    continue;
                }
                // perpendicular neighbours
                let side = |s: isize| at(&before, yi + s * dx, xi + s * dy).unwrap_or(0) == 0;
                if side(1) && side(-1) {
                    out.set(y, x, id);
                }
            }
        }
    }
    out
}

/// One thinning pass over a boundary mask (1 = boundary), see
/// [`thin_labeling`].
pub fn border_thin(boundary: &Mask) -> Mask {
    let labels = boundary.map(|v| (v == 0) as u32);
    thin_labeling(&labels).map(|v| (v == 0) as u8)
}

/// Segment key for a predicted pixel: its id, or a unique key per pixel for
/// unlabelled ones.
fn pred_key(id: u32, pixel: usize) -> u64 {
    if id > 0 {
        id as u64
    } else {
        (1u64 << 32) + pixel as u64
    }
}

/// Joint counts of predicted and true segments over the scored pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContingencyTable {
    pub counts: BTreeMap<(u64, u32), u64>,
    pub pred_sizes: BTreeMap<u64, u64>,
    pub truth_sizes: BTreeMap<u32, u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn new(pred: &Labeling, truth: &Labeling) -> Result<Self> {
        pred.check_same_dims(truth, "contingency table")?;
        let mut t = ContingencyTable::default();
        for (i, (&p, &g)) in pred.data().iter().zip(truth.data()).enumerate() {
            if g == 0 {
                continue;
            }
            let k = pred_key(p, i);
            *t.counts.entry((k, g)).or_default() += 1;
            *t.pred_sizes.entry(k).or_default() += 1;
            *t.truth_sizes.entry(g).or_default() += 1;
            t.total += 1;
        }
        Ok(t)
    }

    fn sum_squares<'a>(values: impl Iterator<Item = &'a u64>) -> u128 {
        values.map(|&v| v as u128 * v as u128).sum()
    }

    /// `Σ n_ij² / (½ Σ s_i² + ½ Σ t_j²)`.
    pub fn rand_fscore(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        let joint = Self::sum_squares(self.counts.values());
        let s = Self::sum_squares(self.pred_sizes.values());
        let t = Self::sum_squares(self.truth_sizes.values());
        (2 * joint) as f64 / (s + t) as f64
    }

    /// `I(S;T) / (½ H(S) + ½ H(T))`, natural log.
    pub fn info_fscore(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        let n = self.total as f64;
        let entropy = |counts: &mut dyn Iterator<Item = u64>| -> f64 {
            counts
                .map(|c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        let hs = entropy(&mut self.pred_sizes.values().copied());
        let ht = entropy(&mut self.truth_sizes.values().copied());
        let hst = entropy(&mut self.counts.values().copied());
        if hs + ht <= 0.0 {
            return 1.0;
        }
        let mi = (hs + ht - hst).max(0.0);
        (2.0 * mi / (hs + ht)).clamp(0.0, 1.0)
    }
}

pub fn rand_fscore(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    Ok(ContingencyTable::new(pred, truth)?.rand_fscore())
}

pub fn info_fscore(pred: &Labeling, truth: &Labeling) -> Result<f64> {
    Ok(ContingencyTable::new(pred, truth)?.info_fscore())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    pred.check_same_dims(truth, "dice")?;
    let (mut both, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p != 0, t != 0);
        both += (p && t) as u64;
        a += p as u64;
        b += t as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f32,
    pub median_radius: usize,
    pub thinning: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            median_radius: 2,
            thinning: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub v_rand: f64,
    pub v_info: f64,
    pub v_dice: f64,
    /// Pixels with a positive truth id after thinning.
    pub evaluated_pixels: u64,
    pub total_pixels: u64,
}

impl ScoreReport {
    /// Mean score over several reports; pixel counts are summed.
    pub fn mean(reports: &[ScoreReport]) -> Option<ScoreReport> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&ScoreReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        Some(ScoreReport {
            v_rand: avg(|r| r.v_rand),
            v_info: avg(|r| r.v_info),
            v_dice: avg(|r| r.v_dice),
            evaluated_pixels: reports.iter().map(|r| r.evaluated_pixels).sum(),
            total_pixels: reports.iter().map(|r| r.total_pixels).sum(),
        })
    }
}

/// Scores a membrane probability map against a truth labeling. The map is
/// median filtered and thresholded into a boundary mask; its enclosed
/// regions form the predicted segmentation. With thinning on, both
/// boundaries get one pass of [`thin_labeling`] before the segment scores.
/// Dice compares the unthinned boundary masks.
pub fn evaluate(prob: &Image, truth: &Labeling, config: &EvalConfig) -> Result<ScoreReport> {
    prob.check_same_dims(truth, "evaluate")?;
    let filtered = median_filter(prob, config.median_radius);
    let boundary = threshold(&filtered, config.threshold)?;
    let mut pred = labeling_from_boundary(&boundary);
    let mut truth_l = truth.clone();
    if config.thinning {
        pred = thin_labeling(&pred);
        truth_l = thin_labeling(&truth_l);
    }
    let table = ContingencyTable::new(&pred, &truth_l)?;
    let truth_boundary = truth.map(|v| (v == 0) as u8);
    Ok(ScoreReport {
        v_rand: table.rand_fscore(),
        v_info: table.info_fscore(),
        v_dice: dice(&boundary, &truth_boundary)?,
        evaluated_pixels: table.total,
        total_pixels: truth.len() as u64,
    })
}
