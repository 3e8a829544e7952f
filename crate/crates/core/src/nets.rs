//! Generator, projection heads and patch discriminator at desk scale.
//!
//! All three networks store their weights in one [`ParamStore`]. The encoder
//! half of the generator is used for both the synthetic input and the refined
//! output, and both calls bind the same [`ParamId`]s, so weight sharing is a
//! property of storage rather than a copy that has to be kept in sync.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Channel cap reached by repeated doubling in the downsampling stages.
    pub max_width: usize,
    pub residual_blocks: usize,
    pub down_stages: usize,
    /// Encoder layers whose activations feed patch sampling. Layer 0 is the
    /// raw input, layer 1 the stem, layers `2..=down_stages+1` the
    /// downsampling stages and the last layer the residual stack.
    pub tap_layers: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 16,
            max_width: 32,
            residual_blocks: 2,
            down_stages: 2,
            tap_layers: vec![0, 2, 4],
        }
    }
}

impl GeneratorConfig {
    pub fn encoder_depth(&self) -> usize {
        self.down_stages + 3
    }

    /// Channel count after downsampling stage `stage` (0 = stem).
    fn width(&self, stage: usize) -> usize {
        (self.base_width << stage.min(16)).min(self.max_width.max(self.base_width))
    }

    /// Channel count of encoder layer `layer`.
    pub fn layer_channels(&self, layer: usize) -> usize {
        match layer {
            0 => self.in_channels,
            l if l <= self.down_stages + 1 => self.width(l - 1),
            _ => self.width(self.down_stages),
        }
    }

    /// Spatial downsampling factor of encoder layer `layer`.
    pub fn layer_stride(&self, layer: usize) -> usize {
        match layer {
            0 | 1 => 1,
            l => 1 << (l - 1).min(self.down_stages),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("at least one tap layer is required".into()));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap layers {:?} must be strictly increasing",
                self.tap_layers
            )));
        }
        if let Some(&last) = self.tap_layers.last() {
            if last >= self.encoder_depth() {
                return Err(Error::Config(format!(
                    "tap layer {last} beyond encoder depth {}",
                    self.encoder_depth()
                )));
            }
        }
        Ok(())
    }

    /// Reject spatial sizes the down/up stack cannot reproduce exactly.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Config(format!(
                "generator expects B×{}×H×W input, got {shape:?}",
                self.in_channels
            )));
        }
        let m = 1usize << self.down_stages;
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Config(format!(
                "spatial size {}×{} not divisible by 2^{}",
                shape[2], shape[3], self.down_stages
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub stages: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 16,
            stages: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Embedding dimension of the projection heads.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            embed_dim: 64,
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
    transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Self {
        let shape = if transposed {
            vec![cin, cout, kernel, kernel]
        } else {
            vec![cout, cin, kernel, kernel]
        };
        let weight = store.add(format!("{name}.weight"), group, Tensor::randn(shape, INIT_STD, rng));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![cout]));
        Self {
            weight,
            bias,
            stride,
            padding,
            transposed,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.stride, self.padding)
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.padding)
        }
    }
}

/// Per-channel, per-image normalisation without affine parameters.
pub fn instance_norm(g: &mut Graph, x: Var) -> Result<Var> {
    g.instance_norm(x, NORM_EPS)
}

/// Encoder/decoder image-to-image generator.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    stem: Conv,
    downs: Vec<Conv>,
    residual: Vec<(Conv, Conv)>,
    ups: Vec<Conv>,
    out: Conv,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let grp = Group::Generator;
        let stem = Conv::new(store, rng, "gen.stem", grp, cfg.in_channels, cfg.width(0), 3, 1, 1, false);
        let downs = (0..cfg.down_stages)
            .map(|i| {
                Conv::new(store, rng, &format!("gen.down{i}"), grp, cfg.width(i), cfg.width(i + 1), 3, 2, 1, false)
            })
            .collect();
        let wd = cfg.width(cfg.down_stages);
        let residual = (0..cfg.residual_blocks)
            .map(|i| {
                (
                    Conv::new(store, rng, &format!("gen.res{i}.a"), grp, wd, wd, 3, 1, 1, false),
                    Conv::new(store, rng, &format!("gen.res{i}.b"), grp, wd, wd, 3, 1, 1, false),
                )
            })
            .collect();
        let ups = (0..cfg.down_stages)
            .rev()
            .map(|i| {
                Conv::new(store, rng, &format!("gen.up{i}"), grp, cfg.width(i + 1), cfg.width(i), 4, 2, 1, true)
            })
            .collect();
        let out = Conv::new(store, rng, "gen.out", grp, cfg.width(0), cfg.in_channels, 3, 1, 1, false);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            downs,
            residual,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Parameters of the final decoder convolution.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.out.weight, self.out.bias)
    }

    /// Run the encoder; returns the deepest activation and the tap layers.
    fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        self.cfg.check_input(g.shape(x))?;
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        let mut layer = 0;
        let record = |layer: usize, v: Var, taps: &mut Vec<Var>| {
            if self.cfg.tap_layers.contains(&layer) {
                taps.push(v);
            }
        };
        record(layer, x, &mut taps);
        let mut h = self.stem.forward(g, store, x)?;
        h = instance_norm(g, h)?;
        h = g.relu(h);
        layer += 1;
        record(layer, h, &mut taps);
        for d in &self.downs {
            h = d.forward(g, store, h)?;
            h = instance_norm(g, h)?;
            h = g.relu(h);
            layer += 1;
            record(layer, h, &mut taps);
        }
        for (a, b) in &self.residual {
            let mut r = a.forward(g, store, h)?;
            r = instance_norm(g, r)?;
            r = g.relu(r);
            r = b.forward(g, store, r)?;
            r = instance_norm(g, r)?;
            h = g.add(h, r)?;
        }
        layer += 1;
        record(layer, h, &mut taps);
        Ok((h, taps))
    }

    fn decode(&self, g: &mut Graph, store: &ParamStore, mut h: Var) -> Result<Var> {
        for u in &self.ups {
            h = u.forward(g, store, h)?;
            h = instance_norm(g, h)?;
            h = g.relu(h);
        }
        let y = self.out.forward(g, store, h)?;
        Ok(g.tanh(y))
    }

    /// Refine `x`; also returns the tap activations of `x`.
    pub fn generate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let (h, taps) = self.encode(g, store, x)?;
        let y = self.decode(g, store, h)?;
        Ok((y, taps))
    }

    /// Tap activations of `img` through the shared encoder weights.
    pub fn encode_taps(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<Vec<Var>> {
        Ok(self.encode(g, store, img)?.1)
    }

    /// Forward pass without recording gradients; convenience for inference.
    pub fn refine(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_frozen(&[Group::Generator, Group::Heads, Group::Discriminator]);
        let xv = g.constant(x.clone());
        let (y, _) = self.generate(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One two-layer MLP per tap layer, mapping features to unit-norm
/// embeddings.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    heads: Vec<Head>,
    embed_dim: usize,
}

impl ProjectionHeads {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let e = cfg.embed_dim;
        let heads = cfg
            .generator
            .tap_layers
            .iter()
            .enumerate()
            .map(|(i, &layer)| {
                let c = cfg.generator.layer_channels(layer);
                let grp = Group::Heads;
                Head {
                    w1: store.add(format!("head{i}.fc1.weight"), grp, Tensor::randn(vec![c, e], INIT_STD, rng)),
                    b1: store.add(format!("head{i}.fc1.bias"), grp, Tensor::zeros(vec![e])),
                    w2: store.add(format!("head{i}.fc2.weight"), grp, Tensor::randn(vec![e, e], INIT_STD, rng)),
                    b2: store.add(format!("head{i}.fc2.bias"), grp, Tensor::zeros(vec![e])),
                }
            })
            .collect();
        Self {
            heads,
            embed_dim: e,
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| [h.w1, h.b1, h.w2, h.b2]).collect()
    }

    /// Embed tap feature rows. `taps[l]` is `B×C×H×W`; `locations[l]` holds
    /// flat spatial indices shared by every image in the batch. Returns, per
    /// layer, a `(B·S)×E` matrix of unit rows ordered image-major.
    pub fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        taps: &[Var],
        locations: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        if taps.len() != self.heads.len() || locations.len() != self.heads.len() {
            return Err(Error::Contract(format!(
                "{} heads but {} tap tensors and {} location lists",
                self.heads.len(),
                taps.len(),
                locations.len()
            )));
        }
        let mut out = Vec::with_capacity(taps.len());
        for ((head, &tap), locs) in self.heads.iter().zip(taps).zip(locations) {
            let rows = gather_locations(g, tap, locs)?;
            let w1 = g.param(store, head.w1);
            let b1 = g.param(store, head.b1);
            let w2 = g.param(store, head.w2);
            let b2 = g.param(store, head.b2);
            let h = g.matmul(rows, w1)?;
            let h = g.add(h, b1)?;
            let h = g.relu(h);
            let h = g.matmul(h, w2)?;
            let h = g.add(h, b2)?;
            out.push(g.l2_normalize(h, 1)?);
        }
        Ok(out)
    }
}

/// Feature vectors of a `B×C×H×W` map at flat spatial `locations`, as a
/// `(B·S)×C` matrix ordered image-major.
pub fn gather_locations(g: &mut Graph, feat: Var, locations: &[usize]) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("gather_locations", &s, &[0, 0, 0, 0]));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if let Some(&bad) = locations.iter().find(|&&l| l >= hw) {
        return Err(Error::Index {
            what: "patch location",
            index: bad,
            extent: hw,
        });
    }
    let mut idx = Vec::with_capacity(b * locations.len() * c);
    for bi in 0..b {
        for &loc in locations {
            for ci in 0..c {
                idx.push((bi * c + ci) * hw + loc);
            }
        }
    }
    g.take(feat, idx, &[b * locations.len(), c])
}

/// Strided convolutional critic producing a grid of real/fake logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    stages: Vec<Conv>,
    head: Conv,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.stages == 0 || cfg.base_width == 0 {
            return Err(Error::Config("discriminator needs at least one stage".into()));
        }
        let grp = Group::Discriminator;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let cout = cfg.base_width << i;
            stages.push(Conv::new(store, rng, &format!("disc.stage{i}"), grp, cin, cout, 4, 2, 1, false));
            cin = cout;
        }
        let head = Conv::new(store, rng, "disc.head", grp, cin, 1, 3, 1, 1, false);
        Ok(Self { stages, head })
    }

    /// Pre-sigmoid score map `B×1×H'×W'`.
    pub fn discriminate(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<Var> {
        let mut h = img;
        for (i, st) in self.stages.iter().enumerate() {
            h = st.forward(g, store, h)?;
            if i > 0 {
                h = instance_norm(g, h)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.head.forward(g, store, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }
}

/// Every network plus the parameter store they share.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub heads: ProjectionHeads,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let generator = Generator::new(&config.generator, &mut store, rng)?;
        let heads = ProjectionHeads::new(config, &mut store, rng);
        let discriminator = Discriminator::new(&config.discriminator, &mut store, rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            generator,
            heads,
            discriminator,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model {
        Model::new(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_image() {
        let mut m = model(1);
        let (w, b) = m.generator.output_layer();
        m.store.value_mut(w).data_mut().fill(0.0);
        m.store.value_mut(b).data_mut().fill(0.0);
        let x = Tensor::randn(vec![1, 3, 16, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        let y = m.generator.refine(&m.store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_shapes_follow_the_stack() {
        let m = model(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 64, 64]));
        let (y, taps) = m.generator.generate(&mut g, &m.store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 64, 64]);
        let sizes: Vec<_> = taps.iter().map(|t| g.shape(*t)[2..].to_vec()).collect();
        assert_eq!(sizes, vec![vec![64, 64], vec![32, 32], vec![16, 16]]);
    }

    #[test]
    fn indivisible_size_is_a_config_error() {
        let m = model(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 65, 64]));
        assert!(matches!(m.generator.generate(&mut g, &m.store, x), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_taps_rejected() {
        let cfg = GeneratorConfig {
            tap_layers: vec![0, 0, 4],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GeneratorConfig {
            tap_layers: vec![0, 5],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn discriminator_score_map_is_8x8_for_64px() {
        let m = model(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 64, 64]));
        let d = m.discriminator.discriminate(&mut g, &m.store, x).unwrap();
        assert_eq!(g.shape(d), &[1, 1, 8, 8]);
    }

    #[test]
    fn constant_discriminator_gives_constant_map() {
        let mut m = model(1);
        for id in m.discriminator.param_ids() {
            m.store.value_mut(id).data_mut().fill(0.0);
        }
        let hb = *m.discriminator.param_ids().last().unwrap();
        m.store.value_mut(hb).data_mut().fill(0.7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(vec![1, 3, 64, 64], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
        let d = m.discriminator.discriminate(&mut g, &m.store, x).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.7));
    }
}
