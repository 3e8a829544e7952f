//! Relative squared-loss mutual information between input and output pixels.
//!
//! Dependence between the pixel variable of an input image and that of its
//! refinement is measured as the relative Pearson divergence between their
//! joint distribution and the product of their marginals. The relative
//! density ratio `r_α = p / (α·p + (1−α)·q)` is fitted in closed form by
//! regularised least squares over Gaussian kernels (RuLSIF), and the
//! divergence is read off the fitted ratio:
//!
//! ```text
//! D = mean_p ĝ − (α/2)·mean_p ĝ² − ((1−α)/2)·mean_q ĝ² − ½
//! ```
//!
//! with `p` the joint samples and `q` the shuffled product samples.
//! Dependence gives a positive value; independence gives ≈ 0.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::linalg::Cholesky;
use crate::tensor::kernels::{gemm, MatRef};
use crate::tensor::{Graph, Tensor, Var};

/// Estimator parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsmiParams {
    /// Mixture weight of the joint in the relative ratio, in `[0, 1)`.
    pub alpha: f64,
    /// Ridge added to the normal equations.
    pub ridge: f64,
    /// Maximum number of kernel centres (`b = min(n, centers)`).
    pub centers: usize,
    /// Pixel locations drawn per image pair.
    pub samples: usize,
    /// Fixed kernel width; `None` selects the median pairwise distance of
    /// the joint samples.
    pub sigma: Option<f64>,
}

impl Default for RsmiParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            ridge: 0.01,
            centers: 100,
            samples: 256,
            sigma: None,
        }
    }
}

impl RsmiParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Validation {
                field: "rsmi.alpha".into(),
                detail: format!("must lie in [0, 1), got {}", self.alpha),
            });
        }
        if !(self.ridge > 0.0) {
            return Err(Error::Validation {
                field: "rsmi.ridge".into(),
                detail: format!("must be > 0, got {}", self.ridge),
            });
        }
        if self.centers == 0 || self.samples == 0 {
            return Err(Error::Validation {
                field: "rsmi.samples".into(),
                detail: "sample and centre counts must be positive".into(),
            });
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Validation {
                    field: "rsmi.sigma".into(),
                    detail: format!("must be > 0, got {s}"),
                });
            }
        }
        Ok(())
    }
}

/// Joint samples `(u_i, v_i)` and product samples `(u_i, v_π(i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPairSample {
    pub joint: Vec<Vec<f64>>,
    pub product: Vec<Vec<f64>>,
    pub permutation: Vec<usize>,
    /// Number of `i` with `π(i) = i`; these product samples coincide with
    /// joint samples.
    pub fixed_points: usize,
}

impl PixelPairSample {
    /// Pair rows of `u` and `v` and shuffle `v` for the product side.
    pub fn new(u: &[Vec<f64>], v: &[Vec<f64>], rng: &mut impl Rng) -> Result<Self> {
        if u.len() != v.len() || u.is_empty() {
            return Err(Error::shape("pixel_pairs", &[u.len()], &[v.len()]));
        }
        let mut permutation: Vec<usize> = (0..u.len()).collect();
        permutation.shuffle(rng);
        let joint: Vec<Vec<f64>> = u.iter().zip(v).map(|(a, b)| concat(a, b)).collect();
        let product: Vec<Vec<f64>> = u
            .iter()
            .zip(&permutation)
            .map(|(a, &j)| concat(a, &v[j]))
            .collect();
        let fixed_points = permutation.iter().enumerate().filter(|(i, &p)| *i == p).count();
        Ok(Self {
            joint,
            product,
            permutation,
            fixed_points,
        })
    }

    pub fn len(&self) -> usize {
        self.joint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint.is_empty()
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).cloned().collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median of all pairwise Euclidean distances; 1 when every sample
/// coincides.
pub fn median_heuristic(samples: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(samples.len() * samples.len().saturating_sub(1) / 2);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            d.push(sq_dist(&samples[i], &samples[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Fitted relative density-ratio model `ĝ(v) = Σ_l θ_l K(v, c_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RulsifModel {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub alpha: f64,
    pub ridge: f64,
    pub theta: Vec<f64>,
}

impl RulsifModel {
    pub fn kernel(&self, a: &[f64], c: &[f64]) -> f64 {
        (-sq_dist(a, c) / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn ratio(&self, v: &[f64]) -> f64 {
        self.centers
            .iter()
            .zip(&self.theta)
            .map(|(c, t)| t * self.kernel(v, c))
            .sum()
    }
}

/// Ĥ and ĥ of the regularised least-squares problem.
pub fn normal_equations(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    centers: &[Vec<f64>],
    sigma: f64,
    alpha: f64,
) -> (Vec<f64>, Vec<f64>) {
    let b = centers.len();
    let k = |x: &[f64], c: &[f64]| (-sq_dist(x, c) / (2.0 * sigma * sigma)).exp();
    let design = |xs: &[Vec<f64>]| -> Vec<f64> {
        xs.iter().flat_map(|x| centers.iter().map(move |c| k(x, c))).collect()
    };
    let (kp, kq) = (design(p), design(q));
    let (np, nq) = (p.len(), q.len());
    let mut h_mat = vec![0.0; b * b];
    let mut tmp = vec![0.0; b * b];
    gemm(MatRef::t(&kp, np, b), MatRef::new(&kp, np, b), &mut h_mat, 0.0);
    gemm(MatRef::t(&kq, nq, b), MatRef::new(&kq, nq, b), &mut tmp, 0.0);
    let (wp, wq) = (alpha / np as f64, (1.0 - alpha) / nq as f64);
    for (h, t) in h_mat.iter_mut().zip(&tmp) {
        *h = wp * *h + wq * t;
    }
    let mut h_vec = vec![0.0; b];
    for row in kp.chunks(b) {
        for (h, v) in h_vec.iter_mut().zip(row) {
            *h += v;
        }
    }
    h_vec.iter_mut().for_each(|h| *h /= np as f64);
    (h_mat, h_vec)
}

/// Fit `θ = (Ĥ + λI)⁻¹ ĥ` with the first `b` joint samples as centres.
pub fn fit_ratio(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    alpha: f64,
    sigma: f64,
    ridge: f64,
    b: usize,
) -> Result<RulsifModel> {
    if b == 0 || p.len() < b || q.is_empty() {
        return Err(Error::Contract(format!(
            "ratio fit needs n >= b >= 1 (n = {}, b = {b}, product samples = {})",
            p.len(),
            q.len()
        )));
    }
    if !(sigma > 0.0) || !(ridge > 0.0) || !(0.0..1.0).contains(&alpha) {
        return Err(Error::Contract(format!(
            "invalid estimator parameters sigma={sigma}, ridge={ridge}, alpha={alpha}"
        )));
    }
    let centers: Vec<Vec<f64>> = p[..b].to_vec();
    let (mut h_mat, h_vec) = normal_equations(p, q, &centers, sigma, alpha);
    for l in 0..b {
        h_mat[l * b + l] += ridge;
    }
    let chol = Cholesky::factor(&h_mat, b)?;
    let theta = chol.solve(&h_vec, 1);
    let resid = residual_norm(&h_mat, &theta, &h_vec);
    let scale = h_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(resid <= 1e-8 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::Numerical(format!(
            "ratio system residual {resid:.3e} exceeds tolerance (|h| = {scale:.3e}, condition ~ {:.3e})",
            chol.condition_estimate()
        )));
    }
    Ok(RulsifModel {
        centers,
        sigma,
        alpha,
        ridge,
        theta,
    })
}

/// `‖A x − y‖₂` for row-major `A`.
pub fn residual_norm(a: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    (0..n)
        .map(|i| {
            let r: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>() - y[i];
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Plug-in relative Pearson divergence from a fitted ratio model.
pub fn rsmi_estimate(model: &RulsifModel, p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let a = model.alpha;
    let gp: Vec<f64> = p.iter().map(|x| model.ratio(x)).collect();
    let gq: Vec<f64> = q.iter().map(|x| model.ratio(x)).collect();
    let np = gp.len() as f64;
    let nq = gq.len() as f64;
    gp.iter().sum::<f64>() / np
        - a / 2.0 * gp.iter().map(|g| g * g).sum::<f64>() / np
        - (1.0 - a) / 2.0 * gq.iter().map(|g| g * g).sum::<f64>() / nq
        - 0.5
}

/// Fit with kernel width chosen by `params` and estimate in one go.
pub fn estimate_pairs(sample: &PixelPairSample, params: &RsmiParams) -> Result<(RulsifModel, f64)> {
    let sigma = params.sigma.unwrap_or_else(|| median_heuristic(&sample.joint));
    let b = params.centers.min(sample.len());
    let model = fit_ratio(&sample.joint, &sample.product, params.alpha, sigma, params.ridge, b)?;
    let est = rsmi_estimate(&model, &sample.joint, &sample.product);
    Ok((model, est))
}

/// Differentiable kernel matrix `K(x_i, c_l)` for an `n×d` sample matrix
/// against fixed centres.
fn kernel_matrix(g: &mut Graph, x: Var, model: &RulsifModel) -> Result<Var> {
    let d = model.centers.first().map_or(0, Vec::len);
    let b = model.centers.len();
    let mut ct = vec![0.0; d * b];
    for (l, c) in model.centers.iter().enumerate() {
        for k in 0..d {
            ct[k * b + l] = c[k];
        }
    }
    let cc: Vec<f64> = model.centers.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let ct = g.constant(Tensor::new(vec![d, b], ct)?);
    let cc = g.constant(Tensor::new(vec![1, b], cc)?);
    let xx = g.square(x);
    let xx = g.sum(xx, 1)?;
    let xc = g.matmul(x, ct)?;
    let xc = g.scale(xc, -2.0);
    let d2 = g.add(xx, xc)?;
    let d2 = g.add(d2, cc)?;
    let e = g.scale(d2, -1.0 / (2.0 * model.sigma * model.sigma));
    Ok(g.exp(e))
}

/// [`rsmi_estimate`] on graph values with the model held fixed.
pub fn rsmi_graph(g: &mut Graph, model: &RulsifModel, p: Var, q: Var) -> Result<Var> {
    let theta = g.constant(Tensor::new(vec![model.theta.len(), 1], model.theta.clone())?);
    let kp = kernel_matrix(g, p, model)?;
    let kq = kernel_matrix(g, q, model)?;
    let gp = g.matmul(kp, theta)?;
    let gq = g.matmul(kq, theta)?;
    let lin = g.mean_all(gp);
    let gp2 = g.square(gp);
    let gp2 = g.mean_all(gp2);
    let gq2 = g.square(gq);
    let gq2 = g.mean_all(gq2);
    let a = model.alpha;
    let t1 = g.scale(gp2, -a / 2.0);
    let t2 = g.scale(gq2, -(1.0 - a) / 2.0);
    let s = g.add(lin, t1)?;
    let s = g.add(s, t2)?;
    Ok(g.add_scalar(s, -0.5))
}

/// Rows `(pixel RGB)` of a `3×H×W` slice at flat `locations`.
fn pixel_rows(img: &[f64], channels: usize, hw: usize, locations: &[usize]) -> Vec<Vec<f64>> {
    locations
        .iter()
        .map(|&l| (0..channels).map(|c| img[c * hw + l]).collect())
        .collect()
}

/// Structure-consistency loss: the negated mean over image pairs of the
/// rSMI between input pixels (`x`, data) and refined pixels (`y`, on the
/// graph). The ratio model is fitted on detached values; gradients reach
/// `y` through the kernel evaluations at the joint and product samples.
pub fn scc_loss(
    g: &mut Graph,
    x: &Tensor,
    y: Var,
    params: &RsmiParams,
    rng: &mut impl Rng,
) -> Result<Var> {
    params.validate()?;
    let xs = x.shape().to_vec();
    if xs.len() != 4 || g.shape(y) != xs.as_slice() {
        return Err(Error::shape("scc_loss", &xs, g.shape(y)));
    }
    let (batch, ch, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    if batch == 0 {
        return Err(Error::Contract("scc_loss over an empty batch".into()));
    }
    let n = params.samples.min(hw);
    let mut estimates = Vec::with_capacity(batch);
    for bi in 0..batch {
        let locs = index::sample(rng, hw, n).into_vec();
        let xi = &x.data()[bi * ch * hw..(bi + 1) * ch * hw];
        let yi = &g.value(y).data()[bi * ch * hw..(bi + 1) * ch * hw];
        let u = pixel_rows(xi, ch, hw, &locs);
        let v = pixel_rows(yi, ch, hw, &locs);
        let sample = PixelPairSample::new(&u, &v, rng)?;
        let sigma = params.sigma.unwrap_or_else(|| median_heuristic(&sample.joint));
        let b = params.centers.min(n);
        let model = fit_ratio(&sample.joint, &sample.product, params.alpha, sigma, params.ridge, b)?;

        // graph side: the same samples, with v rows taken from y
        let v_idx: Vec<usize> = locs
            .iter()
            .flat_map(|&l| (0..ch).map(move |c| (bi * ch + c) * hw + l))
            .collect();
        let v_var = g.take(y, v_idx, &[n, ch])?;
        let perm_idx: Vec<usize> = sample
            .permutation
            .iter()
            .flat_map(|&j| (0..ch).map(move |c| j * ch + c))
            .collect();
        let v_perm = g.take(v_var, perm_idx, &[n, ch])?;
        let u_var = g.constant(Tensor::new(vec![n, ch], u.into_iter().flatten().collect())?);
        let p = g.concat(&[u_var, v_var], 1)?;
        let q = g.concat(&[u_var, v_perm], 1)?;
        estimates.push(rsmi_graph(g, &model, p, q)?);
    }
    let mut acc = estimates[0];
    for &e in &estimates[1..] {
        acc = g.add(acc, e)?;
    }
    Ok(g.scale(acc, -1.0 / batch as f64))
}
