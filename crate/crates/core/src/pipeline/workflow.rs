//! File-to-file workflows behind the service endpoints.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use tracing::info;

use super::checkpoint::load_checkpoint;
use super::imageio::{read_gray, read_label, write_mask, write_png16, write_png8};
use super::manifest::{load_dataset, DatasetManifest, ManifestEntry};
use super::predict::predict_image;
use super::train::{augment_sample, cross_validate, train_to_file, StepRecord, Trainer};
use crate::api::{
    AugmentRequest, AugmentResponse, EvaluateRequest, EvaluateResponse, ImageScore, PredictRequest,
    PredictResponse, PredictedFile, TrainOutcome, TrainRequest,
};
use crate::augment::{enrich, Orientation};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::metrics::{evaluate, labeling_from_boundary, ScoreReport};

/// Progress notifications of [`run_training`].
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Phase { name: String, total_steps: u64 },
    Step(StepRecord),
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::file(path, "has no usable file name"))
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

/// Cross-validates when more than one fold is configured, then fits the
/// whole dataset and writes the checkpoint. A resumed run skips the
/// cross-validation.
pub fn run_training(req: &TrainRequest, mut on_event: impl FnMut(TrainEvent)) -> Result<TrainOutcome> {
    req.config.validate()?;
    let manifest = DatasetManifest::load(&req.data)?;
    let dataset = load_dataset(&manifest)?;
    if dataset.is_empty() {
        return Err(Error::file(&req.data, "manifest lists no samples"));
    }
    let mut folds = Vec::new();
    let mut trainer = match &req.resume {
        Some(path) => Trainer::resume(load_checkpoint(path)?, &dataset)?,
        None => {
            let k = req.config.training.folds;
            if k > 1 {
                on_event(TrainEvent::Phase {
                    name: format!("cross-validation over {k} folds"),
                    total_steps: 0,
                });
                folds = cross_validate(&req.config, &dataset)?;
            }
            Trainer::new(req.config.clone(), &dataset)?
        }
    };
    on_event(TrainEvent::Phase {
        name: "final".into(),
        total_steps: trainer.total_steps(),
    });
    let ckpt = train_to_file(&mut trainer, &req.out, |_, rec| on_event(TrainEvent::Step(*rec)))?;
    info!(path = %req.out.display(), steps = ckpt.progress.step, "training finished");
    Ok(TrainOutcome {
        checkpoint: req.out.clone(),
        steps: ckpt.progress.step,
        final_loss: ckpt.history.last().copied(),
        folds,
    })
}

/// Writes one probability map per input image into `req.out`.
pub fn predict_files(req: &PredictRequest) -> Result<PredictResponse> {
    let ckpt = load_checkpoint(&req.ckpt)?;
    let inputs: Vec<(PathBuf, Image)> = if is_manifest(&req.input) {
        DatasetManifest::load(&req.input)?.load_images()?
    } else {
        vec![(req.input.clone(), read_gray(&req.input)?)]
    };
    fs::create_dir_all(&req.out).map_err(|e| Error::file(&req.out, format!("cannot create directory: {e}")))?;
    let mut seen = HashSet::new();
    let pad = ckpt.config.augmentation.pad_radius;
    let mut files = Vec::with_capacity(inputs.len());
    for (path, image) in inputs {
        let name = stem(&path)?;
        if !seen.insert(name.clone()) {
            return Err(Error::file(&path, format!("another input is also named `{name}`")));
        }
        let prob = predict_image(&ckpt.net, &image, pad, req.tta).map_err(|e| Error::file(&path, e.to_string()))?;
        let output = req.out.join(format!("{name}.png"));
        if output == path {
            return Err(Error::file(&path, "prediction would overwrite its input"));
        }
        write_png16(&output, &prob)?;
        files.push(PredictedFile { input: path, output });
    }
    Ok(PredictResponse { files })
}

fn find_prediction(dir: &Path, name: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::file(dir, format!("no prediction named `{name}.png` or `{name}.pgm`")))
}

/// Scores every labelled manifest entry against the prediction of the same
/// name. Images are scored in parallel.
pub fn evaluate_dir(req: &EvaluateRequest) -> Result<EvaluateResponse> {
    let manifest = DatasetManifest::load(&req.truth)?;
    let mut jobs = Vec::new();
    for entry in &manifest.samples {
        let Some(label) = &entry.label else { continue };
        let name = stem(&entry.image)?;
        jobs.push((name.clone(), find_prediction(&req.pred, &name)?, manifest.resolve(label)));
    }
    if jobs.is_empty() {
        return Err(Error::file(&req.truth, "no labelled samples to evaluate"));
    }
    let config = &req.config;
    let images = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(name, pred, label)| {
                s.spawn(move || -> Result<ImageScore> {
                    let prob = read_gray(pred)?;
                    let truth = labeling_from_boundary(&read_label(label)?);
                    let report = evaluate(&prob, &truth, config).map_err(|e| Error::file(pred, e.to_string()))?;
                    Ok(ImageScore {
                        name: name.clone(),
                        report,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread"))
            .collect::<Result<Vec<_>>>()
    })?;
    let reports: Vec<ScoreReport> = images.iter().map(|i| i.report.clone()).collect();
    Ok(EvaluateResponse {
        mean: ScoreReport::mean(&reports).expect("at least one image"),
        images,
    })
}

/// Materializes the training view of a dataset at epoch 0: enrichment
/// followed by each sample's warp and noise, without padding.
pub fn augment_to_dir(req: &AugmentRequest) -> Result<AugmentResponse> {
    let source = DatasetManifest::load(&req.data)?;
    let dataset = load_dataset(&source)?;
    let mut names = Vec::with_capacity(dataset.len());
    for e in &source.samples {
        names.push(stem(&e.image)?);
    }
    let mut cfg = req.augmentation.clone();
    cfg.pad_radius = 0;
    let (samples, tagged): (Vec<_>, Vec<String>) = if cfg.enrich {
        let all = Orientation::all();
        let tags = names
            .iter()
            .flat_map(|n| all.iter().map(move |g| format!("{n}_{}", g.tag())))
            .collect();
        (enrich(&dataset)?, tags)
    } else {
        (dataset, names)
    };
    fs::create_dir_all(&req.out).map_err(|e| Error::file(&req.out, format!("cannot create directory: {e}")))?;
    let mut manifest = DatasetManifest::default().with_root(&req.out);
    manifest.height = source.height;
    manifest.width = source.width;
    manifest.pixel_size_nm = source.pixel_size_nm;
    for (i, (pair, name)) in samples.iter().zip(&tagged).enumerate() {
        let out = augment_sample(&cfg, req.seed, 0, i as u64, pair)?;
        let image = format!("{name}.png");
        let label = format!("{name}_label.png");
        write_png8(&req.out.join(&image), &out.image)?;
        write_mask(&req.out.join(&label), &out.label)?;
        manifest.samples.push(ManifestEntry {
            image: image.into(),
            label: Some(label.into()),
        });
    }
    let path = req.out.join("manifest.toml");
    manifest.save(&path)?;
    Ok(AugmentResponse {
        manifest: path,
        samples: manifest.len(),
    })
}
