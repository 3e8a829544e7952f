//! Patch sampling and the query/positive/negative layout used by the
//! contrastive losses.
//!
//! A [`PatchPlan`] fixes `S` spatial locations per tap layer. The same plan
//! is applied to the features of the synthetic input (the `w` side) and of
//! the refined output (the `z` side), so row `q` of both matrices refers to
//! the same location: `(w_q, z_q)` is the positive pair and the other `S−1`
//! rows of the same image are the negatives.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::ProjectionHeads;
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    /// Per tap layer, flat spatial indices (unique within a layer).
    pub locations: Vec<Vec<usize>>,
}

impl PatchPlan {
    pub fn patches_per_layer(&self) -> usize {
        self.locations.first().map_or(0, Vec::len)
    }
}

/// Draw `s` distinct locations per layer, uniformly without replacement.
/// `layer_sizes` are the spatial extents `H·W` of the tap layers.
pub fn sample_plan(layer_sizes: &[usize], s: usize, seed: u64) -> Result<PatchPlan> {
    sample_plan_with(layer_sizes, s, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_plan_with(layer_sizes: &[usize], s: usize, rng: &mut impl Rng) -> Result<PatchPlan> {
    if s < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 patches per layer so every query has a negative, got {s}"
        )));
    }
    let mut locations = Vec::with_capacity(layer_sizes.len());
    for (layer, &size) in layer_sizes.iter().enumerate() {
        if s > size {
            return Err(Error::Contract(format!(
                "{s} patches requested from tap layer {layer} with only {size} locations"
            )));
        }
        locations.push(index::sample(rng, size, s).into_vec());
    }
    Ok(PatchPlan { locations })
}

/// Aligned embeddings of one image at one tap layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerPairs {
    pub layer: usize,
    pub image: usize,
    /// `S×E` unit rows from the synthetic input.
    pub w: Var,
    /// `S×E` unit rows from the refined output.
    pub z: Var,
}

/// Every `(layer, image)` group of aligned embeddings for one batch.
#[derive(Clone, Debug, Default)]
pub struct PatchEmbeddingSet {
    pub groups: Vec<LayerPairs>,
}

impl PatchEmbeddingSet {
    /// Number of patches per group (queries).
    pub fn patches(&self, g: &Graph) -> usize {
        self.groups.first().map_or(0, |p| g.shape(p.w)[0])
    }

    /// Negatives available to each query.
    pub fn negatives(&self, g: &Graph) -> usize {
        self.patches(g).saturating_sub(1)
    }
}

/// Spatial extents `H·W` of a list of `B×C×H×W` tap tensors.
pub fn tap_sizes(g: &Graph, taps: &[Var]) -> Vec<usize> {
    taps.iter()
        .map(|t| {
            let s = g.shape(*t);
            s[2] * s[3]
        })
        .collect()
}

/// Project the input-side and output-side taps at the plan's locations and
/// split them into per-image groups.
pub fn build_pairs(
    g: &mut Graph,
    store: &ParamStore,
    heads: &ProjectionHeads,
    plan: &PatchPlan,
    taps_x: &[Var],
    taps_y: &[Var],
) -> Result<PatchEmbeddingSet> {
    if taps_x.len() != taps_y.len() {
        return Err(Error::Contract(format!(
            "{} input taps vs {} output taps",
            taps_x.len(),
            taps_y.len()
        )));
    }
    for (a, b) in taps_x.iter().zip(taps_y) {
        if g.shape(*a) != g.shape(*b) {
            return Err(Error::shape("build_pairs", g.shape(*a), g.shape(*b)));
        }
    }
    let s = plan.patches_per_layer();
    if s < 2 {
        return Err(Error::Contract("patch plan needs at least 2 patches per layer".into()));
    }
    let batch = taps_x.first().map_or(0, |t| g.shape(*t)[0]);
    let w_all = heads.project(g, store, taps_x, &plan.locations)?;
    let z_all = heads.project(g, store, taps_y, &plan.locations)?;
    let mut groups = Vec::with_capacity(w_all.len() * batch);
    for (layer, (&w, &z)) in w_all.iter().zip(&z_all).enumerate() {
        for image in 0..batch {
            let (lo, hi) = (image * s, (image + 1) * s);
            groups.push(LayerPairs {
                layer,
                image,
                w: if batch == 1 { w } else { g.slice(w, 0, lo, hi)? },
                z: if batch == 1 { z } else { g.slice(z, 0, lo, hi)? },
            });
        }
    }
    Ok(PatchEmbeddingSet { groups })
}
