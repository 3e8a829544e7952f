//! Reference implementations written straight from the loss definitions,
//! shared between integration test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use ssrc_core::patches::{LayerPairs, PatchEmbeddingSet};
use ssrc_core::{Graph, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Mat {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn flat(m: &Mat) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], m.iter().flatten().cloned().collect()).unwrap()
}

/// One group per `(w, z)` pair, all as graph constants.
pub fn embed_set(g: &mut Graph, groups: &[(Mat, Mat)]) -> PatchEmbeddingSet {
    PatchEmbeddingSet {
        groups: groups
            .iter()
            .enumerate()
            .map(|(i, (w, z))| LayerPairs {
                layer: 0,
                image: i,
                w: g.constant(flat(w)),
                z: g.constant(flat(z)),
            })
            .collect(),
    }
}

/// Decoupled InfoNCE: `−s⁺/τ + ln Σ_{i≠q} exp(s_i/τ)` with `s = w_q·z_·`,
/// averaged over queries and groups.
pub fn dce_reference(groups: &[(Mat, Mat)], tau: f64) -> f64 {
    let mut total = 0.0;
    for (w, z) in groups {
        let s = w.len();
        let mut acc = 0.0;
        for q in 0..s {
            let pos = dot(&w[q], &z[q]) / tau;
            let denom: f64 = (0..s).filter(|&i| i != q).map(|i| (dot(&w[q], &z[i]) / tau).exp()).sum();
            acc += -pos + denom.ln();
        }
        total += acc / s as f64;
    }
    total / groups.len() as f64
}

fn distribution(anchor: &[f64], others: &[&Vec<f64>]) -> Vec<f64> {
    let e: Vec<f64> = others.iter().map(|o| dot(anchor, o).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Per query: `P` = softmax of `w_q·w_i`, `Q` = softmax of `z_q·z_i` over
/// `i ≠ q`; `JSD = ½KL(P‖M) + ½KL(Q‖M)`, `M = (P+Q)/2`.
pub fn jsd_reference(groups: &[(Mat, Mat)]) -> f64 {
    let mut total = 0.0;
    for (w, z) in groups {
        let s = w.len();
        let mut acc = 0.0;
        for q in 0..s {
            let wn: Vec<&Vec<f64>> = (0..s).filter(|&i| i != q).map(|i| &w[i]).collect();
            let zn: Vec<&Vec<f64>> = (0..s).filter(|&i| i != q).map(|i| &z[i]).collect();
            let p = distribution(&w[q], &wn);
            let qd = distribution(&z[q], &zn);
            let m: Vec<f64> = p.iter().zip(&qd).map(|(a, b)| 0.5 * (a + b)).collect();
            acc += 0.5 * kl(&p, &m) + 0.5 * kl(&qd, &m);
        }
        total += acc / s as f64;
    }
    total / groups.len() as f64
}

/// `exp(β·a·n_i) / Σ_j exp(β·a·n_j)` without any stabilisation.
pub fn weights_reference(anchor: &[f64], negatives: &Mat, beta: f64) -> Vec<f64> {
    let e: Vec<f64> = negatives.iter().map(|n| (beta * dot(anchor, n)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Random `(w, z)` groups of unit rows with `z` a noisy copy of `w`.
pub fn random_groups(rng: &mut impl Rng, groups: usize, s: usize, e: usize, noise: f64) -> Vec<(Mat, Mat)> {
    (0..groups)
        .map(|_| {
            let w = unit_rows(rng, s, e);
            let z: Mat = w
                .iter()
                .map(|r| {
                    let v: Vec<f64> = r.iter().map(|x| x + noise * rng.sample::<f64, _>(StandardNormal)).collect();
                    let n = dot(&v, &v).sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            (w, z)
        })
        .collect()
}

use rand::seq::index;
use ssrc_core::rsmi::{self, PixelPairSample, RsmiParams, RulsifModel};
use ssrc_core::{Result, Var};

/// Structure-consistency term for a single image pair with the ratio model
/// fitted once at a reference output and then held fixed, so finite
/// differences see the same `θ`, centres and kernel width as the backward
/// pass.
pub struct FrozenScc {
    pub x: Tensor,
    pub locations: Vec<usize>,
    pub sample: PixelPairSample,
    pub model: RulsifModel,
}

fn rows_at(img: &[f64], hw: usize, locs: &[usize]) -> Mat {
    locs.iter().map(|&l| (0..3).map(|c| img[c * hw + l]).collect()).collect()
}

impl FrozenScc {
    /// Draws locations and the shuffle exactly as `scc_loss` does with an
    /// RNG seeded by `seed`.
    pub fn fit(x: &Tensor, y: &Tensor, params: &RsmiParams, seed: u64) -> Self {
        let hw = x.shape()[2] * x.shape()[3];
        let n = params.samples.min(hw);
        let mut r = rng(seed);
        let locations = index::sample(&mut r, hw, n).into_vec();
        let u = rows_at(x.data(), hw, &locations);
        let v = rows_at(y.data(), hw, &locations);
        let sample = PixelPairSample::new(&u, &v, &mut r).unwrap();
        let sigma = params.sigma.unwrap_or_else(|| rsmi::median_heuristic(&sample.joint));
        let model = rsmi::fit_ratio(
            &sample.joint,
            &sample.product,
            params.alpha,
            sigma,
            params.ridge,
            params.centers.min(n),
        )
        .unwrap();
        Self { x: x.clone(), locations, sample, model }
    }

    /// `−D̂` as a graph function of `y` (shape `1×3×H×W`).
    pub fn loss(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let hw = self.x.shape()[2] * self.x.shape()[3];
        let n = self.locations.len();
        let idx: Vec<usize> = self.locations.iter().flat_map(|&l| (0..3).map(move |c| c * hw + l)).collect();
        let v = g.take(y, idx, &[n, 3])?;
        let pidx: Vec<usize> = self.sample.permutation.iter().flat_map(|&j| (0..3).map(move |c| j * 3 + c)).collect();
        let vp = g.take(v, pidx, &[n, 3])?;
        let u = g.constant(flat(&rows_at(self.x.data(), hw, &self.locations)));
        let p = g.concat(&[u, v], 1)?;
        let q = g.concat(&[u, vp], 1)?;
        let d = rsmi::rsmi_graph(g, &self.model, p, q)?;
        Ok(g.neg(d))
    }
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    let data = (0..3 * h * w).map(|_| rng.gen_range(-0.95..0.95)).collect();
    Tensor::new(vec![1, 3, h, w], data).unwrap()
}

/// A run small enough to take milliseconds per step.
pub fn tiny_config(seed: u64) -> ssrc_core::TrainConfig {
    ssrc_core::TrainConfig {
        seed,
        steps: 6,
        batch_size: 2,
        image_size: 16,
        patches: 8,
        rsmi_centers: 16,
        rsmi_samples: 48,
        base_width: 4,
        max_width: 8,
        residual_blocks: 1,
        embed_dim: 8,
        disc_base_width: 4,
        disc_stages: 2,
        train_scenes: 6,
        ..Default::default()
    }
}
