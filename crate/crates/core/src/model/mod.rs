//! The multi-view transformer: a shared embedding and shared local blocks run
//! on each of the four views, the four sequences are concatenated, global
//! blocks attend across all of them, and a linear head reads a class token.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess_view, CaseRecord, View, VIEWS};
use crate::error::{Error, Result};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, Graph, Parameters, Tensor, Var};
use crate::transformer::{
    build_sequence, check_heads, patch_embed, transformer_block, AttentionParams, BlockParams,
    EmbeddingParams, LAYER_NORM_EPS,
};

/// Floor on the per-view standard deviation, in grey levels, so a flat view
/// is only centred rather than blown up.
pub const MIN_INPUT_STD: f64 = 1.0;

pub const NUM_CLASSES: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Tiny,
    Small,
    Toy,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Tiny => "tiny",
            Arch::Small => "small",
            Arch::Toy => "toy",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Arch::Tiny),
            "small" => Ok(Arch::Small),
            "toy" => Ok(Arch::Toy),
            other => Err(Error::config(format!("unknown arch {other:?} (expected tiny, small or toy)"))),
        }
    }
}

/// Which class-token state(s) feed the head after the last global block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Row 0 of the concatenated sequence: the LCC class token.
    #[default]
    #[serde(alias = "first")]
    FirstClassToken,
    /// Mean of the four class-token rows; invariant to view order.
    #[serde(alias = "mean")]
    MeanClassTokens,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first_class_token" => Ok(Readout::FirstClassToken),
            "mean" | "mean_class_tokens" => Ok(Readout::MeanClassTokens),
            other => Err(Error::config(format!("unknown readout {other:?} (expected first or mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_embed: usize,
    pub heads: usize,
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub mlp_ratio: usize,
    pub readout: Readout,
}

impl ModelConfig {
    /// DeiT-tiny geometry with the 2 local / 10 global split.
    pub fn tiny() -> Self {
        Self {
            arch: Arch::Tiny,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            d_embed: 192,
            heads: 3,
            local_blocks: 2,
            global_blocks: 10,
            mlp_ratio: 4,
            readout: Readout::FirstClassToken,
        }
    }

    /// DeiT-small geometry with the 2 local / 10 global split.
    pub fn small() -> Self {
        Self {
            arch: Arch::Small,
            d_embed: 384,
            heads: 6,
            ..Self::tiny()
        }
    }

    /// Desk-scale model: 64x64 single-channel input, 8x8 patches, 6 blocks.
    pub fn toy() -> Self {
        Self {
            arch: Arch::Toy,
            image_size: 64,
            patch_size: 8,
            channels: 1,
            d_embed: 64,
            heads: 4,
            local_blocks: 2,
            global_blocks: 4,
            mlp_ratio: 4,
            readout: Readout::FirstClassToken,
        }
    }

    pub fn preset(arch: Arch) -> Self {
        match arch {
            Arch::Tiny => Self::tiny(),
            Arch::Small => Self::small(),
            Arch::Toy => Self::toy(),
        }
    }

    pub fn with_split(mut self, local_blocks: usize, global_blocks: usize) -> Self {
        self.local_blocks = local_blocks;
        self.global_blocks = global_blocks;
        self
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = readout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_blocks + self.global_blocks == 0 {
            return Err(Error::config("the model needs at least one transformer block"));
        }
        if matches!(self.arch, Arch::Tiny | Arch::Small) && self.local_blocks + self.global_blocks != 12 {
            return Err(Error::config(format!(
                "{} preset requires local + global blocks = 12, got {} + {}",
                self.arch.name(),
                self.local_blocks,
                self.global_blocks
            )));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.d_embed == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("channels, d_embed and mlp_ratio must be positive"));
        }
        check_heads(self.d_embed, self.heads)
    }

    /// Patches per view, `N = HW / P^2`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens per view including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Tokens entering the global blocks, `4N + 4`.
    pub fn global_seq_len(&self) -> usize {
        VIEWS.len() * self.seq_len()
    }

    pub fn d_mlp(&self) -> usize {
        self.mlp_ratio * self.d_embed
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// All trainable tensors of one model. There is exactly one embedding, shared
/// by every view, and the local blocks are likewise shared.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = Tensor> {
    pub embedding: EmbeddingParams<T>,
    pub local_blocks: Vec<BlockParams<T>>,
    pub global_blocks: Vec<BlockParams<T>>,
    pub final_ln_gamma: T,
    pub final_ln_beta: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ParamStore<T> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.embedding.visit("embed", f);
        for (i, b) in self.local_blocks.iter().enumerate() {
            b.visit(&format!("local.{i}"), f);
        }
        for (i, b) in self.global_blocks.iter().enumerate() {
            b.visit(&format!("global.{i}"), f);
        }
        f("final_ln.gamma".into(), &self.final_ln_gamma);
        f("final_ln.beta".into(), &self.final_ln_beta);
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.embedding.visit_mut(f);
        for b in &mut self.local_blocks {
            b.visit_mut(f);
        }
        for b in &mut self.global_blocks {
            b.visit_mut(f);
        }
        f(&mut self.final_ln_gamma);
        f(&mut self.final_ln_beta);
        f(&mut self.head_w);
        f(&mut self.head_b);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(String, &T) -> U) -> ParamStore<U> {
        ParamStore {
            embedding: self.embedding.map("embed", f),
            local_blocks: self
                .local_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("local.{i}"), f))
                .collect(),
            global_blocks: self
                .global_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("global.{i}"), f))
                .collect(),
            final_ln_gamma: f("final_ln.gamma".into(), &self.final_ln_gamma),
            final_ln_beta: f("final_ln.beta".into(), &self.final_ln_beta),
            head_w: f("head.w".into(), &self.head_w),
            head_b: f("head.b".into(), &self.head_b),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl ParamStore<Tensor> {
    /// Shape-only layout for `cfg`, every tensor zero-filled.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_embed;
        let block = || BlockParams {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            attention: AttentionParams {
                w_q: Tensor::zeros(&[d, d]),
                w_k: Tensor::zeros(&[d, d]),
                w_v: Tensor::zeros(&[d, d]),
                w_o: Tensor::zeros(&[d, d]),
                heads: cfg.heads,
            },
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            mlp_w1: Tensor::zeros(&[d, cfg.d_mlp()]),
            mlp_b1: Tensor::zeros(&[cfg.d_mlp()]),
            mlp_w2: Tensor::zeros(&[cfg.d_mlp(), d]),
            mlp_b2: Tensor::zeros(&[d]),
        };
        Self {
            embedding: EmbeddingParams {
                patch_proj: Tensor::zeros(&[cfg.patch_dim(), d]),
                class_token: Tensor::zeros(&[d]),
                pos_embed: Tensor::zeros(&[cfg.seq_len(), d]),
            },
            local_blocks: (0..cfg.local_blocks).map(|_| block()).collect(),
            global_blocks: (0..cfg.global_blocks).map(|_| block()).collect(),
            final_ln_gamma: Tensor::zeros(&[d]),
            final_ln_beta: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, NUM_CLASSES]),
            head_b: Tensor::zeros(&[NUM_CLASSES]),
        }
    }

    /// Truncated-normal (std 0.02, cut at two standard deviations) weights and
    /// embeddings; zero biases and class token; unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = store.names();
        let mut tensors = store.tensors_mut();
        for (name, t) in names.iter().zip(tensors.iter_mut()) {
            if name.ends_with(".gamma") {
                t.data_mut().iter_mut().for_each(|v| *v = 1.0);
            } else if name.ends_with("class_token") || t.shape().len() == 1 {
                // biases, betas, class token stay zero
            } else {
                for v in t.data_mut() {
                    *v = truncated_normal(&mut rng) * INIT_STD;
                }
            }
        }
        Ok(store)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every tensor as a graph leaf.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> ParamStore<Var> {
        self.map(&mut |_, t| g.leaf(t.clone(), requires_grad))
    }

    /// Checks that every tensor has the shape `cfg` implies.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        let (a, b) = (self.named_tensors(), want.named_tensors());
        if a.len() != b.len() {
            return Err(Error::config(format!(
                "parameter store has {} tensors, config implies {}",
                a.len(),
                b.len()
            )));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::config(format!(
                    "parameter {na} {:?} does not match config ({nb} {:?})",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for ParamStore<Tensor> {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }
}

impl ParamStore<()> {
    /// Rebuilds graph handles from a flat list in canonical order.
    pub fn bind(&self, vars: &[Var]) -> Result<ParamStore<Var>> {
        let mut it = vars.iter().copied();
        let mut missing = false;
        let out = self.map(&mut |_, _| {
            it.next().unwrap_or_else(|| {
                missing = true;
                Var::placeholder()
            })
        });
        if missing || it.next().is_some() {
            return Err(Error::config("variable list does not match the parameter layout"));
        }
        Ok(out)
    }
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Closed-form count of trainable scalars; matches `ParamStore::param_count`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_embed;
    let embedding = cfg.patch_dim() * d + d + cfg.seq_len() * d;
    let attention = 4 * d * d;
    let mlp = d * cfg.d_mlp() + cfg.d_mlp() + cfg.d_mlp() * d + d;
    let norms = 4 * d;
    let block = attention + mlp + norms;
    let head = 2 * d + d * NUM_CLASSES + NUM_CLASSES;
    embedding + (cfg.local_blocks + cfg.global_blocks) * block + head
}

/// Shifts and scales a view to zero mean and unit variance over all of its
/// pixels.
pub fn standardize(image: &Tensor) -> Tensor {
    let d = image.data();
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(MIN_INPUT_STD);
    image.map(|x| (x - mean) / sd)
}

/// Embeds one `C x H x W` view into its `(N + 1) x d_embed` token sequence.
pub fn embed_view(g: &mut Graph, image: &Tensor, p: &ParamStore<Var>, cfg: &ModelConfig) -> Result<Var> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(Error::InvalidShape {
            op: "embed_view",
            msg: format!("expected a {want:?} image, got {:?}", image.shape()),
        });
    }
    let scaled = standardize(image);
    let patches = patch_embed(g, &scaled, p.embedding.patch_proj, cfg.patch_size)?;
    build_sequence(g, patches, &p.embedding)
}

/// Embeds each view and runs it through the shared local blocks. Output order
/// follows the input order, which callers keep as LCC, RCC, LMLO, RMLO.
pub fn forward_local(
    g: &mut Graph,
    views: &[Tensor],
    p: &ParamStore<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    if views.len() != VIEWS.len() {
        return Err(Error::InvalidShape {
            op: "forward_local",
            msg: format!("expected {} views, got {}", VIEWS.len(), views.len()),
        });
    }
    views
        .iter()
        .map(|image| {
            let mut x = embed_view(g, image, p, cfg)?;
            for block in &p.local_blocks {
                x = transformer_block(g, x, block)?;
            }
            Ok(x)
        })
        .collect()
}

/// Row-wise concatenation; class tokens land at rows `0, N+1, 2N+2, 3N+3`.
pub fn concat_views(g: &mut Graph, seqs: &[Var]) -> Result<Var> {
    if seqs.len() != VIEWS.len() {
        return Err(Error::InvalidShape {
            op: "concat_views",
            msg: format!("expected {} sequences, got {}", VIEWS.len(), seqs.len()),
        });
    }
    let first = g.shape(seqs[0]).to_vec();
    for &s in &seqs[1..] {
        if g.shape(s) != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "concat_views",
                lhs: first,
                rhs: g.shape(s).to_vec(),
            });
        }
    }
    g.concat_rows(seqs)
}

/// Global blocks over the joint sequence. No position term is added here.
pub fn forward_global(g: &mut Graph, joint: Var, p: &ParamStore<Var>, cfg: &ModelConfig) -> Result<Var> {
    let rows = g.shape(joint)[0];
    if rows != cfg.global_seq_len() {
        return Err(Error::InvalidShape {
            op: "forward_global",
            msg: format!("expected {} rows, got {rows}", cfg.global_seq_len()),
        });
    }
    let mut x = joint;
    for block in &p.global_blocks {
        x = transformer_block(g, x, block)?;
    }
    Ok(x)
}

/// Final layer norm, class-token readout, and the linear head. Returns a
/// length-2 logit vector (benign, malignant).
pub fn head(g: &mut Graph, encoded: Var, p: &ParamStore<Var>, cfg: &ModelConfig) -> Result<Var> {
    let normed = g.layer_norm_rows(encoded, p.final_ln_gamma, p.final_ln_beta, LAYER_NORM_EPS)?;
    let token = match cfg.readout {
        Readout::FirstClassToken => g.rows(normed, 0, 1)?,
        Readout::MeanClassTokens => {
            let n1 = cfg.seq_len();
            let rows = (0..VIEWS.len())
                .map(|v| g.rows(normed, v * n1, 1))
                .collect::<Result<Vec<_>>>()?;
            let tokens = g.concat_rows(&rows)?;
            g.mean_rows(tokens)?
        }
    };
    let out = g.matmul(token, p.head_w)?;
    let out = g.reshape(out, &[NUM_CLASSES])?;
    g.add(out, p.head_b)
}

/// Full forward pass over four preprocessed views.
pub fn logits(g: &mut Graph, views: &[Tensor], p: &ParamStore<Var>, cfg: &ModelConfig) -> Result<Var> {
    let seqs = forward_local(g, views, p, cfg)?;
    let joint = concat_views(g, &seqs)?;
    let encoded = forward_global(g, joint, p, cfg)?;
    head(g, encoded, p, cfg)
}

/// Logits for already preprocessed views, without gradient tracking.
pub fn predict_logits(params: &ParamStore, cfg: &ModelConfig, views: &[Tensor]) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let out = logits(&mut g, views, &p, cfg)?;
    let v = g.value(out).data();
    Ok([v[0], v[1]])
}

/// Preprocesses a raw case and returns its two logits.
pub fn classify_case(case: &CaseRecord, params: &ParamStore, cfg: &ModelConfig) -> Result<[f64; 2]> {
    let views = VIEWS
        .iter()
        .map(|&v| preprocess_view(case.view(v), cfg))
        .collect::<Result<Vec<_>>>()?;
    predict_logits(params, cfg, &views)
}

/// Malignancy probability, `softmax(logits)[1]`.
pub fn malignancy_score(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Checks the analytic gradient of the cross-entropy loss of one case
/// against central differences, over every parameter tensor.
pub fn check_model_gradients(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    views: &[Tensor],
    label: usize,
    gcfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let skeleton = params.map(&mut |_, _| ());
    grad_check(
        params,
        |g, vars| {
            let p = skeleton.bind(vars)?;
            let out = logits(g, views, &p, cfg)?;
            g.cross_entropy(out, label)
        },
        gcfg,
    )
}

/// Seeded end-to-end gradient check on the toy model with one local and one
/// global block and random 8-bit views.
pub fn toy_gradient_check(seed: u64, gcfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let cfg = ModelConfig::toy().with_split(1, 1);
    let mut params = ParamStore::init(&cfg, crate::rng::substream_seed(seed, "init", 0))?;
    let mut rng = crate::rng::substream(seed, "gradcheck.views");
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    let views = (0..VIEWS.len())
        .map(|_| {
            let data = (0..n).map(|_| rng.random_range(0..=255u32) as f64).collect();
            Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let label = rng.random_range(0..NUM_CLASSES);
    check_model_gradients(&mut params, &cfg, &views, label, gcfg)
}

/// A configuration together with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn logits(&self, views: &[Tensor]) -> Result<[f64; 2]> {
        predict_logits(&self.params, &self.config, views)
    }

    pub fn classify(&self, case: &CaseRecord) -> Result<[f64; 2]> {
        classify_case(case, &self.params, &self.config)
    }

    pub fn view_order() -> [View; 4] {
        VIEWS
    }
}
