//! Toy two-domain scenes, image files and segmentation scoring of a refiner.
//!
//! Refined source scenes are segmented with the nearest-prototype oracle
//! using the target palette and scored against the source labels, so a
//! refiner scores well only when it both adopts the target colours and
//! keeps every pixel's class.

mod io;
mod metrics;
mod scene;

pub use io::{load_image, load_image_folder, load_labels, png_files, save_image, save_labels, ImageFolder};
pub use metrics::{segmentation_scores, ConfusionMatrix, MetricReport};
pub use scene::{
    class_budget, color_distance, generate_scene, Domain, DomainSpec, ToyScene, BUILDING, CAR, CLASS_NAMES,
    MIN_SIDE, N_CLASSES, ROAD, SKY, VEGETATION,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per pixel, the class whose prototype is nearest in RGB; ties go to the
/// lowest class index.
pub fn oracle_segment(image: &Tensor, spec: &DomainSpec) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("oracle_segment", s, &[3, 0, 0]));
    }
    let hw = s[1] * s[2];
    let d = image.data();
    Ok((0..hw)
        .map(|i| {
            let px = [d[i], d[hw + i], d[2 * hw + i]];
            let mut best = (0u8, f64::INFINITY);
            for (k, proto) in spec.palette.iter().enumerate() {
                let dist: f64 = px.iter().zip(proto).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.1 {
                    best = (k as u8, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Anything that maps a `B×3×H×W` batch to a refined batch of the same shape.
pub trait Refiner {
    fn refine(&self, batch: &Tensor) -> Result<Tensor>;
}

impl<F: Fn(&Tensor) -> Result<Tensor>> Refiner for F {
    fn refine(&self, batch: &Tensor) -> Result<Tensor> {
        self(batch)
    }
}

/// Pass-through refiner.
pub fn identity(batch: &Tensor) -> Result<Tensor> {
    Ok(batch.clone())
}

/// Refine each scene, segment it with the target palette and score it
/// against the scene's own labels.
pub fn evaluate_refiner(refiner: &dyn Refiner, scenes: &[ToyScene], target: &DomainSpec) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    for scene in scenes {
        let mut shape = vec![1];
        shape.extend_from_slice(scene.image.shape());
        let batch = scene.image.reshape(shape)?;
        let out = refiner.refine(&batch)?;
        if out.shape() != batch.shape() {
            return Err(Error::shape("evaluate_refiner", out.shape(), batch.shape()));
        }
        let out = out.reshape(scene.image.shape().to_vec())?;
        let pred = oracle_segment(&out, target)?;
        cm.add(&pred, &scene.labels)?;
    }
    Ok(MetricReport::from_confusion(cm))
}

/// Stack `3×H×W` images into one batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Contract("cannot stack zero images".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack", im.shape(), first.shape()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(shape, data)
}
