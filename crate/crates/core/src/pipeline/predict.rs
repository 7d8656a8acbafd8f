//! Inference on whole images: mirror padding, one or eight forward passes,
//! cropping back to the input size.

use super::checkpoint::Checkpoint;
use crate::architecture::FusionNet;
use crate::augment::{plain_predict, tta_predict};
use crate::error::{Error, Result};
use crate::grid::Image;

/// Probability map the size of `image`.
pub fn predict_image(net: &FusionNet<f32>, image: &Image, pad: usize, tta: bool) -> Result<Image> {
    let (h, w) = image.dims();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let spec = net.spec();
    if spec.check_spatial(ph, pw).is_err() {
        let d = spec.divisor();
        return Err(Error::InvalidArgument(format!(
            "image {h}×{w} padded by {pad} gives {ph}×{pw}; the network needs both sides divisible by {d} \
             (2^{} levels), so the image sides must be ≡ {} mod {d}",
            spec.levels,
            (d - (2 * pad) % d) % d
        )));
    }
    if tta {
        tta_predict(net, image, pad)
    } else {
        plain_predict(net, image, pad)
    }
}

/// Predicts every image with the checkpoint's padding.
pub fn predict(ckpt: &Checkpoint, images: &[Image], tta: bool) -> Result<Vec<Image>> {
    let pad = ckpt.config.augmentation.pad_radius;
    images
        .iter()
        .map(|img| predict_image(&ckpt.net, img, pad, tta))
        .collect()
}
