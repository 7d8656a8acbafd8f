//! Dihedral enrichment, elastic deformation, noise, mirror padding and
//! transform-and-average prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::architecture::FusionNet;
use crate::error::{Error, Result};
use crate::grid::{Grid, Image, SamplePair};

/// An element of the dihedral group of the square: an optional horizontal
/// reflection followed by `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation {
    quarter_turns: u8,
    reflected: bool,
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        quarter_turns: 0,
        reflected: false,
    };

    /// `degrees` must be a multiple of 90.
    pub fn new(degrees: u32, reflected: bool) -> Result<Self> {
        if !degrees.is_multiple_of(90) {
            return Err(Error::InvalidArgument(format!("rotation must be a multiple of 90°, got {degrees}")));
        }
        Ok(Orientation {
            quarter_turns: ((degrees / 90) % 4) as u8,
            reflected,
        })
    }

    /// All eight elements; the identity comes first.
    pub fn all() -> [Orientation; 8] {
        let mut out = [Orientation::IDENTITY; 8];
        for (i, o) in out.iter_mut().enumerate() {
            o.quarter_turns = (i % 4) as u8;
            o.reflected = i >= 4;
        }
        out
    }

    pub fn degrees(self) -> u32 {
        self.quarter_turns as u32 * 90
    }

    pub fn reflected(self) -> bool {
        self.reflected
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Orientation) -> Orientation {
        // F·R^k = R^-k·F
        let k = if self.reflected {
            self.quarter_turns as i32 - other.quarter_turns as i32
        } else {
            self.quarter_turns as i32 + other.quarter_turns as i32
        };
        Orientation {
            quarter_turns: k.rem_euclid(4) as u8,
            reflected: self.reflected ^ other.reflected,
        }
    }

    pub fn inverse(self) -> Orientation {
        if self.reflected {
            self
        } else {
            Orientation {
                quarter_turns: (4 - self.quarter_turns) % 4,
                reflected: false,
            }
        }
    }

    /// Short tag used in file names, e.g. `r90f`.
    pub fn tag(self) -> String {
        format!("r{}{}", self.degrees(), if self.reflected { "f" } else { "" })
    }
}

/// Rotates/reflects a grid. Quarter and three-quarter turns require a square
/// input.
pub fn d4_apply<T: Copy>(grid: &Grid<T>, g: Orientation) -> Result<Grid<T>> {
    let (h, w) = grid.dims();
    if g.quarter_turns % 2 == 1 && h != w {
        return Err(Error::InvalidArgument(format!(
            "d4_apply: {}° rotation needs a square image, got {h}×{w}",
            g.degrees()
        )));
    }
    let src = |y: usize, x: usize| -> (usize, usize) {
        let (sy, sx) = match g.quarter_turns {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        };
        if g.reflected {
            (sy, w - 1 - sx)
        } else {
            (sy, sx)
        }
    };
    let (oh, ow) = if g.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    Ok(Grid::from_fn(oh, ow, |y, x| {
        let (sy, sx) = src(y, x);
        grid.get(sy, sx)
    }))
}

/// Every pair in all eight orientations, pair-major. Image and label share
/// the group element.
pub fn enrich(dataset: &[SamplePair]) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(dataset.len() * 8);
    for pair in dataset {
        for g in Orientation::all() {
            out.push(SamplePair {
                image: d4_apply(&pair.image, g)?,
                label: d4_apply(&pair.label, g)?,
            });
        }
    }
    Ok(out)
}

pub const FIELD_SIZE: usize = 12;

/// Coarse displacement grid, `[dx, dy]` in pixels per node, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticField {
    vectors: Vec<[f32; 2]>,
    amplitude: f32,
}

impl ElasticField {
    pub fn zero() -> Self {
        ElasticField {
            vectors: vec![[0.0; 2]; FIELD_SIZE * FIELD_SIZE],
            amplitude: 0.0,
        }
    }

    /// Builds a field from explicit node vectors, checking the vanishing
    /// boundary and the amplitude bound.
    pub fn from_vectors(vectors: Vec<[f32; 2]>, amplitude: f32) -> Result<Self> {
        if vectors.len() != FIELD_SIZE * FIELD_SIZE {
            return Err(Error::InvalidArgument(format!(
                "elastic field needs {} vectors, got {}",
                FIELD_SIZE * FIELD_SIZE,
                vectors.len()
            )));
        }
        for (i, v) in vectors.iter().enumerate() {
            let (y, x) = (i / FIELD_SIZE, i % FIELD_SIZE);
            if is_boundary(y, x) && (v[0] != 0.0 || v[1] != 0.0) {
                return Err(Error::InvalidArgument(format!("elastic field: boundary node ({y}, {x}) is not zero")));
            }
            if v[0].hypot(v[1]) > amplitude {
                return Err(Error::InvalidArgument(format!(
                    "elastic field: node ({y}, {x}) exceeds amplitude {amplitude}"
                )));
            }
        }
        Ok(ElasticField { vectors, amplitude })
    }

    /// Same vector at every interior node.
    pub fn uniform_interior(dx: f32, dy: f32) -> Self {
        let vectors = (0..FIELD_SIZE * FIELD_SIZE)
            .map(|i| {
                if is_boundary(i / FIELD_SIZE, i % FIELD_SIZE) {
                    [0.0, 0.0]
                } else {
                    [dx, dy]
                }
            })
            .collect();
        ElasticField {
            vectors,
            amplitude: dx.hypot(dy),
        }
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub fn amplitude(&self) -> f32 {
        self.amplitude
    }

    pub fn node(&self, y: usize, x: usize) -> [f32; 2] {
        self.vectors[y * FIELD_SIZE + x]
    }

    /// Bilinear interpolation onto an `h×w` pixel grid; node `k` sits at
    /// pixel `k·(n−1)/11` so the corners coincide.
    pub fn upsample(&self, h: usize, w: usize) -> Grid<[f32; 2]> {
        let span = (FIELD_SIZE - 1) as f64;
        let axis = |i: usize, n: usize| -> (usize, usize, f64) {
            let g = if n > 1 { i as f64 * span / (n - 1) as f64 } else { 0.0 };
            let g0 = (g.floor() as usize).min(FIELD_SIZE - 1);
            let g1 = (g0 + 1).min(FIELD_SIZE - 1);
            (g0, g1, g - g0 as f64)
        };
        let cols: Vec<_> = (0..w).map(|x| axis(x, w)).collect();
        Grid::from_fn(h, w, |y, x| {
            let (y0, y1, fy) = axis(y, h);
            let (x0, x1, fx) = cols[x];
            let mut out = [0.0f32; 2];
            for (k, o) in out.iter_mut().enumerate() {
                let a = self.node(y0, x0)[k] as f64;
                let b = self.node(y0, x1)[k] as f64;
                let c = self.node(y1, x0)[k] as f64;
                let d = self.node(y1, x1)[k] as f64;
                let top = a + (b - a) * fx;
                let bottom = c + (d - c) * fx;
                *o = (top + (bottom - top) * fy) as f32;
            }
            out
        })
    }
}

fn is_boundary(y: usize, x: usize) -> bool {
    y == 0 || x == 0 || y == FIELD_SIZE - 1 || x == FIELD_SIZE - 1
}

/// Interior nodes uniform in the disk of radius `amplitude`; the boundary
/// ring is zero.
pub fn sample_elastic_field<R: Rng + ?Sized>(rng: &mut R, amplitude: f32) -> Result<ElasticField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("elastic amplitude must be ≥ 0, got {amplitude}")));
    }
    let mut vectors = vec![[0.0f32; 2]; FIELD_SIZE * FIELD_SIZE];
    if amplitude > 0.0 {
        for y in 1..FIELD_SIZE - 1 {
            for x in 1..FIELD_SIZE - 1 {
                let r = amplitude as f64 * rng.random::<f64>().sqrt();
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let v = [(r * theta.cos()) as f32, (r * theta.sin()) as f32];
                // guard the bound against rounding in the cast
                let n = v[0].hypot(v[1]);
                vectors[y * FIELD_SIZE + x] = if n > amplitude {
                    [v[0] * amplitude / n, v[1] * amplitude / n]
                } else {
                    v
                };
            }
        }
    }
    Ok(ElasticField { vectors, amplitude })
}

fn sample_bilinear(img: &Image, sy: f64, sx: f64) -> f32 {
    let (h, w) = img.dims();
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let a = img.get(y0, x0) as f64;
    let b = img.get(y0, x1) as f64;
    let c = img.get(y1, x0) as f64;
    let d = img.get(y1, x1) as f64;
    let top = a * (1.0 - fx) + b * fx;
    let bottom = c * (1.0 - fx) + d * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn sample_nearest<T: Copy>(g: &Grid<T>, sy: f64, sx: f64) -> T {
    let (h, w) = g.dims();
    let y = sy.round().clamp(0.0, (h - 1) as f64) as usize;
    let x = sx.round().clamp(0.0, (w - 1) as f64) as usize;
    g.get(y, x)
}

/// Warps image and label by the upsampled field. Each output pixel `p` reads
/// the source at `p − d(p)`, so content moves by `+d`. The image is sampled
/// bilinearly, the label by nearest neighbour; samples outside clamp to the
/// edge.
pub fn elastic_warp(pair: &SamplePair, field: &ElasticField) -> SamplePair {
    let (h, w) = pair.dims();
    if h == 0 || w == 0 {
        return pair.clone();
    }
    let disp = field.upsample(h, w);
    let source = |y: usize, x: usize| {
        let [dx, dy] = disp.get(y, x);
        (y as f64 - dy as f64, x as f64 - dx as f64)
    };
    let image = Grid::from_fn(h, w, |y, x| {
        let (sy, sx) = source(y, x);
        sample_bilinear(&pair.image, sy, sx)
    });
    let label = Grid::from_fn(h, w, |y, x| {
        let (sy, sx) = source(y, x);
        sample_nearest(&pair.label, sy, sx)
    });
    SamplePair { image, label }
}

/// Adds independent zero-mean Gaussian noise of standard deviation `sigma`
/// and clamps to `[0, 1]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(image: &Image, sigma: f32, rng: &mut R) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0f64, sigma as f64)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    let (h, w) = image.dims();
    let data = image
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Grid::new(h, w, data)
}

/// Reflection without repeating the edge pixel: index `-d` maps to `d`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Extends each border by `radius` mirrored pixels. Needs
/// `radius < min(H, W)`.
pub fn mirror_pad<T: Copy>(grid: &Grid<T>, radius: usize) -> Result<Grid<T>> {
    let (h, w) = grid.dims();
    if radius == 0 {
        return Ok(grid.clone());
    }
    if radius >= h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "mirror_pad: radius {radius} too large for {h}×{w}, must be below {}",
            h.min(w)
        )));
    }
    let r = radius as isize;
    Ok(Grid::from_fn(h + 2 * radius, w + 2 * radius, |y, x| {
        grid.get(reflect(y as isize - r, h), reflect(x as isize - r, w))
    }))
}

/// Removes `radius` pixels from every side.
pub fn crop_center<T: Copy>(grid: &Grid<T>, radius: usize) -> Result<Grid<T>> {
    let (h, w) = grid.dims();
    if radius == 0 {
        return Ok(grid.clone());
    }
    if h <= 2 * radius || w <= 2 * radius {
        return Err(Error::InvalidArgument(format!(
            "crop_center: {h}×{w} is too small to remove {radius} from each side"
        )));
    }
    Ok(Grid::from_fn(h - 2 * radius, w - 2 * radius, |y, x| {
        grid.get(y + radius, x + radius)
    }))
}

/// Anything that maps a single-channel image to a probability map of the
/// same size.
pub trait Predictor {
    fn predict_map(&self, image: &Image) -> Result<Image>;
}

impl Predictor for FusionNet<f32> {
    fn predict_map(&self, image: &Image) -> Result<Image> {
        let out = self.predict(&image.to_tensor::<f32>())?;
        Ok(Image::from_plane(&out, 0, 0))
    }
}

impl<F> Predictor for F
where
    F: Fn(&Image) -> Result<Image>,
{
    fn predict_map(&self, image: &Image) -> Result<Image> {
        self(image)
    }
}

/// Pads, runs one forward pass, crops.
pub fn plain_predict<P: Predictor + ?Sized>(model: &P, image: &Image, pad: usize) -> Result<Image> {
    let out = model.predict_map(&mirror_pad(image, pad)?)?;
    crop_center(&out, pad)
}

/// Average of `g⁻¹(f(g(pad(x))))` over all eight orientations, cropped.
pub fn tta_predict<P: Predictor + ?Sized>(model: &P, image: &Image, pad: usize) -> Result<Image> {
    if !image.is_square() {
        let (h, w) = image.dims();
        return Err(Error::InvalidArgument(format!(
            "tta_predict: needs a square image, got {h}×{w}"
        )));
    }
    let padded = mirror_pad(image, pad)?;
    let mut acc = vec![0.0f64; padded.len()];
    for g in Orientation::all() {
        let out = model.predict_map(&d4_apply(&padded, g)?)?;
        let back = d4_apply(&out, g.inverse())?;
        back.check_same_dims(&padded, "tta_predict")?;
        for (a, v) in acc.iter_mut().zip(back.data()) {
            *a += *v as f64;
        }
    }
    let (h, w) = padded.dims();
    let mean = Grid::new(h, w, acc.into_iter().map(|v| (v / 8.0) as f32).collect())?;
    crop_center(&mean, pad)
}

/// Independent random stream for one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | (index & 0xFFFF_FFFF));
    rng
}
