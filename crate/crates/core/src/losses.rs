//! Objective terms and their composition.
//!
//! - Relation consistency: per query, the softmax over inner products with
//!   the in-image negatives is computed on the input side (anchored at the
//!   positive) and on the output side (anchored at the query); the loss is
//!   the Jensen–Shannon divergence between the two.
//! - Hard-negative decoupled contrastive loss: the positive logit against a
//!   denominator over negatives only, where the negatives are reweighted by
//!   a von Mises–Fisher tilt `∝ exp(β·sim)`.
//! - Adversarial loss on pre-sigmoid discriminator scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::PatchEmbeddingSet;
use crate::tensor::{Graph, Tensor, Var};

/// Weights and shape parameters of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_src: f64,
    pub lambda_scc: f64,
    pub lambda_hdce: f64,
    pub lambda_gan: f64,
    /// Temperature of the contrastive logits.
    pub tau: f64,
    /// Concentration of the hard-negative tilt.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_src: 0.05,
            lambda_scc: 1.0,
            lambda_hdce: 1.0,
            lambda_gan: 1.0,
            tau: 0.07,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_src", self.lambda_src),
            ("lambda_scc", self.lambda_scc),
            ("lambda_hdce", self.lambda_hdce),
            ("lambda_gan", self.lambda_gan),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation {
                    field: name.into(),
                    detail: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Validation {
                field: "tau".into(),
                detail: format!("must be > 0, got {}", self.tau),
            });
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation {
                field: "beta".into(),
                detail: format!("must be >= 0, got {}", self.beta),
            });
        }
        Ok(())
    }
}

/// Softmax-normalised similarity of one anchor to its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution(pub Vec<f64>);

impl SimilarityDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax over `anchor·negative_i` for `K ≥ 1` negatives.
pub fn similarity_distribution(anchor: &[f64], negatives: &[Vec<f64>]) -> Result<SimilarityDistribution> {
    if negatives.is_empty() {
        return Err(Error::Contract("similarity distribution over zero negatives".into()));
    }
    if let Some(n) = negatives.iter().find(|n| n.len() != anchor.len()) {
        return Err(Error::shape("similarity_distribution", &[anchor.len()], &[n.len()]));
    }
    let logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n)).collect();
    Ok(SimilarityDistribution(softmax(&logits)))
}

/// Jensen–Shannon divergence in nats; zero-probability entries contribute
/// nothing.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("jsd", &[p.len()], &[q.len()]));
    }
    let half_kl = |a: f64, m: f64| if a > 0.0 { 0.5 * a * (a / m).ln() } else { 0.0 };
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            half_kl(a, m) + half_kl(b, m)
        })
        .sum())
}

/// Self-normalised importance weights `∝ exp(β·anchor·negative_i)`.
pub fn hard_negative_weights(anchor: &[f64], negatives: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    if beta < 0.0 {
        return Err(Error::Contract(format!("beta must be >= 0, got {beta}")));
    }
    if negatives.is_empty() {
        return Err(Error::Contract("hard-negative weights over zero negatives".into()));
    }
    if let Some(n) = negatives.iter().find(|n| n.len() != anchor.len()) {
        return Err(Error::shape("hard_negative_weights", &[anchor.len()], &[n.len()]));
    }
    let logits: Vec<f64> = negatives.iter().map(|n| beta * dot(anchor, n)).collect();
    Ok(softmax(&logits))
}

/// Flat indices of the off-diagonal entries of an `S×S` matrix, row-major,
/// giving an `S×(S−1)` layout.
fn off_diagonal(s: usize) -> Vec<usize> {
    (0..s)
        .flat_map(|q| (0..s).filter(move |&i| i != q).map(move |i| q * s + i))
        .collect()
}

fn diagonal(s: usize) -> Vec<usize> {
    (0..s).map(|q| q * s + q).collect()
}

fn gram(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let bt = g.transpose(b)?;
    g.matmul(a, bt)
}

fn check_pairs(g: &Graph, pairs: &PatchEmbeddingSet) -> Result<usize> {
    if pairs.groups.is_empty() {
        return Err(Error::Contract("empty patch embedding set".into()));
    }
    let s = pairs.patches(g);
    if s < 2 {
        return Err(Error::Contract(format!("need S >= 2 patches, got {s}")));
    }
    Ok(s)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Jensen–Shannon divergence between the input-side and output-side
/// similarity distributions, averaged over queries, images and layers.
pub fn src_loss(g: &mut Graph, pairs: &PatchEmbeddingSet) -> Result<Var> {
    let s = check_pairs(g, pairs)?;
    let off = off_diagonal(s);
    let mut per_group = Vec::with_capacity(pairs.groups.len());
    for grp in &pairs.groups {
        let sim_out = gram(g, grp.z, grp.z)?;
        let sim_in = gram(g, grp.w, grp.w)?;
        let logits_q = g.take(sim_out, off.clone(), &[s, s - 1])?;
        let logits_p = g.take(sim_in, off.clone(), &[s, s - 1])?;
        let log_q = g.log_softmax(logits_q, 1)?;
        let log_p = g.log_softmax(logits_p, 1)?;
        let q = g.exp(log_q);
        let p = g.exp(log_p);
        let pq = g.add(p, q)?;
        let m = g.scale(pq, 0.5);
        let log_m = g.log(m)?;
        let dp = g.sub(log_p, log_m)?;
        let dq = g.sub(log_q, log_m)?;
        let kp = g.mul(p, dp)?;
        let kq = g.mul(q, dq)?;
        let both = g.add(kp, kq)?;
        let rows = g.sum(both, 1)?;
        let mean = g.mean_all(rows);
        per_group.push(g.scale(mean, 0.5));
    }
    mean_of(g, &per_group)
}

/// Decoupled contrastive loss with hard-negative reweighting. For query `q`
/// with positive logit `s⁺ = w_q·z_q` and negatives `s_i = w_q·z_i`:
/// `−s⁺/τ + ln N + ln Σ_i ŵ_i exp(s_i/τ)` with `ŵ = softmax(β·s)` and
/// `N = S−1`. The positive never appears in the denominator.
pub fn hdce_loss(g: &mut Graph, pairs: &PatchEmbeddingSet, tau: f64, beta: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
    }
    if beta < 0.0 {
        return Err(Error::Contract(format!("beta must be >= 0, got {beta}")));
    }
    let s = check_pairs(g, pairs)?;
    let off = off_diagonal(s);
    let diag = diagonal(s);
    let log_n = ((s - 1) as f64).ln();
    let mut per_group = Vec::with_capacity(pairs.groups.len());
    for grp in &pairs.groups {
        let cross = gram(g, grp.w, grp.z)?;
        let pos = g.take(cross, diag.clone(), &[s, 1])?;
        let neg = g.take(cross, off.clone(), &[s, s - 1])?;
        let tilted = g.scale(neg, beta);
        let log_w = g.log_softmax(tilted, 1)?;
        let scaled = g.scale(neg, 1.0 / tau);
        let weighted = g.add(log_w, scaled)?;
        let lse = g.logsumexp(weighted, 1)?;
        let pos_t = g.scale(pos, 1.0 / tau);
        let row = g.sub(lse, pos_t)?;
        let row = g.add_scalar(row, log_n);
        per_group.push(g.mean_all(row));
    }
    mean_of(g, &per_group)
}

/// Discriminator objective: the negated log-likelihood of classifying real
/// as real and fake as fake, averaged over score-map cells and batch.
pub fn gan_loss_d(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Var {
    // -log σ(r) = softplus(-r);  -log(1 - σ(f)) = softplus(f)
    let nr = g.neg(real_scores);
    let lr = g.softplus(nr);
    let lr = g.mean_all(lr);
    let lf = g.softplus(fake_scores);
    let lf = g.mean_all(lf);
    g.add(lr, lf).expect("scalar add")
}

/// Non-saturating generator objective `−E log σ(D(ŷ))`.
pub fn gan_loss_g(g: &mut Graph, fake_scores: Var) -> Var {
    let n = g.neg(fake_scores);
    let l = g.softplus(n);
    g.mean_all(l)
}

/// The unweighted terms of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub src: Var,
    pub scc: Var,
    pub hdce: Var,
    pub gan_g: Var,
}

/// `λ_src·src + λ_scc·scc + λ_hdce·hdce + λ_gan·gan_g`.
pub fn total_loss(g: &mut Graph, terms: LossTerms, weights: &LossWeights) -> Result<Var> {
    let named = [
        ("src", terms.src, weights.lambda_src),
        ("scc", terms.scc, weights.lambda_scc),
        ("hdce", terms.hdce, weights.lambda_hdce),
        ("gan_g", terms.gan_g, weights.lambda_gan),
    ];
    let mut acc: Option<Var> = None;
    for (name, v, lambda) in named {
        let val = g.value(v).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                term: name,
                step: None,
            });
        }
        let w = g.scale(v, lambda);
        acc = Some(match acc {
            None => w,
            Some(a) => g.add(a, w)?,
        });
    }
    let total = acc.expect("four terms");
    Ok(total)
}

/// Plain-value composition of the same weighted sum.
pub fn weighted_total(src: f64, scc: f64, hdce: f64, gan_g: f64, w: &LossWeights) -> f64 {
    w.lambda_src * src + w.lambda_scc * scc + w.lambda_hdce * hdce + w.lambda_gan * gan_g
}

/// Convenience for tests and tools: wrap row vectors as a constant matrix.
pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flatten().cloned().collect();
    Tensor::new(vec![rows.len(), cols], data)
}
