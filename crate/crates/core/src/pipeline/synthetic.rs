//! Cell-like synthetic sections for smoke tests and demos: Voronoi cells
//! separated by dark membranes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::imageio::{write_mask, write_png8};
use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::Result;
use crate::grid::{Grid, SamplePair};

/// One `size×size` section with `cells` Voronoi cells. Pixels whose two
/// nearest centres are within `thickness` of equidistant are membrane.
pub fn synthetic_pair(seed: u64, size: usize, cells: usize, thickness: f32) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<(f32, f32)> = (0..cells.max(2))
        .map(|_| (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32)))
        .collect();
    let shade: Vec<f32> = centres.iter().map(|_| rng.random_range(0.65..0.9)).collect();
    let mut label = Grid::filled(size, size, 0u8);
    let image = Grid::from_fn(size, size, |y, x| {
        let (mut d1, mut d2, mut nearest) = (f32::MAX, f32::MAX, 0);
        for (i, &(cy, cx)) in centres.iter().enumerate() {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            if d < d1 {
                d2 = d1;
                d1 = d;
                nearest = i;
            } else if d < d2 {
                d2 = d;
            }
        }
        if d2 - d1 < thickness {
            label.set(y, x, 1);
            0.15
        } else {
            shade[nearest]
        }
    });
    SamplePair { image, label }
}

/// Writes `n` sections as PNG files plus a `manifest.toml` into `dir`.
pub fn write_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default().with_root(dir);
    manifest.height = Some(size);
    manifest.width = Some(size);
    for i in 0..n {
        let pair = synthetic_pair(seed.wrapping_add(i as u64), size, 6, 3.0);
        let image = format!("image_{i:02}.png");
        let label = format!("label_{i:02}.png");
        write_png8(&dir.join(&image), &pair.image)?;
        write_mask(&dir.join(&label), &pair.label)?;
        manifest.samples.push(ManifestEntry {
            image: image.into(),
            label: Some(label.into()),
        });
    }
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}
