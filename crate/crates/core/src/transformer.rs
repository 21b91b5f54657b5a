//! Transformer building blocks: multi-head self-attention, the GELU MLP, the
//! pre-norm block, and the patch/class/position embedding pipeline.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! serves stored weights (`Tensor`) and graph handles (`Var`).

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Packed Q/K/V/O projections. Head `i` uses columns `i*d_k..(i+1)*d_k` of
/// each of `w_q`, `w_k`, `w_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub attention: AttentionParams<T>,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
}

/// Patch projection, class token, and learned 1-D position table. One
/// instance is shared by every view.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T = Tensor> {
    /// `(P*P*C) x d_embed`; equivalent to a convolution with kernel = stride = P.
    pub patch_proj: T,
    pub class_token: T,
    /// `(N + 1) x d_embed`; row 0 belongs to the class token.
    pub pos_embed: T,
}

impl<T> AttentionParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(format!("{prefix}.w_q"), &self.w_q),
            w_k: f(format!("{prefix}.w_k"), &self.w_k),
            w_v: f(format!("{prefix}.w_v"), &self.w_v),
            w_o: f(format!("{prefix}.w_o"), &self.w_o),
            heads: self.heads,
        }
    }
}

impl<T> BlockParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.ln1.gamma"), &self.ln1_gamma);
        f(format!("{prefix}.ln1.beta"), &self.ln1_beta);
        self.attention.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2.gamma"), &self.ln2_gamma);
        f(format!("{prefix}.ln2.beta"), &self.ln2_beta);
        f(format!("{prefix}.mlp.w1"), &self.mlp_w1);
        f(format!("{prefix}.mlp.b1"), &self.mlp_b1);
        f(format!("{prefix}.mlp.w2"), &self.mlp_w2);
        f(format!("{prefix}.mlp.b2"), &self.mlp_b2);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.ln1_gamma);
        f(&mut self.ln1_beta);
        self.attention.visit_mut(f);
        f(&mut self.ln2_gamma);
        f(&mut self.ln2_beta);
        f(&mut self.mlp_w1);
        f(&mut self.mlp_b1);
        f(&mut self.mlp_w2);
        f(&mut self.mlp_b2);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1_gamma: f(format!("{prefix}.ln1.gamma"), &self.ln1_gamma),
            ln1_beta: f(format!("{prefix}.ln1.beta"), &self.ln1_beta),
            attention: self.attention.map(&format!("{prefix}.attn"), f),
            ln2_gamma: f(format!("{prefix}.ln2.gamma"), &self.ln2_gamma),
            ln2_beta: f(format!("{prefix}.ln2.beta"), &self.ln2_beta),
            mlp_w1: f(format!("{prefix}.mlp.w1"), &self.mlp_w1),
            mlp_b1: f(format!("{prefix}.mlp.b1"), &self.mlp_b1),
            mlp_w2: f(format!("{prefix}.mlp.w2"), &self.mlp_w2),
            mlp_b2: f(format!("{prefix}.mlp.b2"), &self.mlp_b2),
        }
    }
}

impl<T> EmbeddingParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.patch_proj"), &self.patch_proj);
        f(format!("{prefix}.class_token"), &self.class_token);
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.patch_proj);
        f(&mut self.class_token);
        f(&mut self.pos_embed);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> EmbeddingParams<U> {
        EmbeddingParams {
            patch_proj: f(format!("{prefix}.patch_proj"), &self.patch_proj),
            class_token: f(format!("{prefix}.class_token"), &self.class_token),
            pos_embed: f(format!("{prefix}.pos_embed"), &self.pos_embed),
        }
    }
}

impl AttentionParams<Tensor> {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != [d, d] {
                return Err(Error::InvalidShape {
                    op: "attention",
                    msg: format!("{name} must be {d}x{d}, got {:?}", w.shape()),
                });
            }
        }
        check_heads(d, heads)?;
        Ok(Self { w_q, w_k, w_v, w_o, heads })
    }

    pub fn d_embed(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl BlockParams<Tensor> {
    /// Block with the given attention, unit layer norms, and zero MLP weights
    /// of hidden width `d_mlp`. Mostly useful for tests.
    pub fn with_attention(attention: AttentionParams, d_mlp: usize) -> Self {
        let d = attention.d_embed();
        Self {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            attention,
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            mlp_w1: Tensor::zeros(&[d, d_mlp]),
            mlp_b1: Tensor::zeros(&[d_mlp]),
            mlp_w2: Tensor::zeros(&[d_mlp, d]),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }
}

pub(crate) fn check_heads(d_embed: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d_embed.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "d_embed {d_embed} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// `Q = zW_q`, `K = zW_k`, `V = zW_v`, each `n x d_embed`.
pub fn qkv_project(g: &mut Graph, x: Var, p: &AttentionParams<Var>) -> Result<(Var, Var, Var)> {
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    Ok((q, k, v))
}

/// Row-stochastic weights `softmax(QK^T / sqrt(d_k))`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (g.shape(q), g.shape(k));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let d_k = sq[1];
    let scores = g.matmul_t(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    g.softmax_rows(scaled)
}

pub fn scaled_dot_product_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    if g.shape(k).first() != g.shape(v).first() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let weights = attention_weights(g, q, k)?;
    g.matmul(weights, v)
}

/// Per-head attention on column slices of the packed projections,
/// concatenated across heads and projected by `W_O`.
pub fn multi_head_attention(g: &mut Graph, x: Var, p: &AttentionParams<Var>) -> Result<Var> {
    let d = g.shape(p.w_q)[0];
    check_heads(d, p.heads)?;
    let d_k = d / p.heads;
    let (q, k, v) = qkv_project(g, x, p)?;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * d_k, d_k)?;
        let kh = g.slice_cols(k, h * d_k, d_k)?;
        let vh = g.slice_cols(v, h * d_k, d_k)?;
        heads.push(scaled_dot_product_attention(g, qh, kh, vh)?);
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(concat, p.w_o)
}

/// `W1 -> GELU -> W2`, with biases.
pub fn mlp(g: &mut Graph, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let h = g.matmul(x, p.mlp_w1)?;
    let h = g.add_row_bias(h, p.mlp_b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, p.mlp_w2)?;
    g.add_row_bias(out, p.mlp_b2)
}

/// Pre-norm block: `mid = MSA(LN(x)) + x`, `out = MLP(LN(mid)) + mid`.
pub fn transformer_block(g: &mut Graph, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let d = g.shape(p.attention.w_q)[0];
    match g.shape(x) {
        [_, c] if *c == d => {}
        other => {
            return Err(Error::InvalidShape {
                op: "transformer_block",
                msg: format!("expected n x {d} input, got {other:?}"),
            })
        }
    }
    let h = g.layer_norm_rows(x, p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS)?;
    let attn = multi_head_attention(g, h, &p.attention)?;
    let mid = g.add(attn, x)?;
    let h = g.layer_norm_rows(mid, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)?;
    let m = mlp(g, h, p)?;
    g.add(m, mid)
}

/// Splits a `C x H x W` image into non-overlapping `P x P` patches in
/// row-major patch order. Each row is one patch flattened channel-major
/// (`c, y, x`), matching a `[d, C, P, P]` convolution kernel layout.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            op: "patch_embed",
            msg: format!("expected a C x H x W image, got {:?}", image.shape()),
        });
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            op: "patch_embed",
            msg: format!("image {h}x{w} (H x W) is not divisible into {patch}x{patch} patches"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + py * patch + y) * w + px * patch;
                    data.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], data)
}

/// `N x d_embed` patch embeddings of one image.
pub fn patch_embed(g: &mut Graph, image: &Tensor, patch_proj: Var, patch: usize) -> Result<Var> {
    let patches = extract_patches(image, patch)?;
    let x = g.constant(patches);
    g.matmul(x, patch_proj)
}

/// Prepends the class token and adds position embeddings: row 0 is
/// `x_class + E_pos[0]`, row `i` is `patches[i-1] + E_pos[i]`.
pub fn build_sequence(g: &mut Graph, patches: Var, p: &EmbeddingParams<Var>) -> Result<Var> {
    let n = g.shape(patches)[0];
    if g.shape(p.pos_embed).first() != Some(&(n + 1)) {
        return Err(Error::InvalidShape {
            op: "build_sequence",
            msg: format!(
                "{n} patches need {} position rows, table has shape {:?}",
                n + 1,
                g.shape(p.pos_embed)
            ),
        });
    }
    let seq = g.concat_rows(&[p.class_token, patches])?;
    g.add(seq, p.pos_embed)
}
