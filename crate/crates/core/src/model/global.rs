//! Global branch: a two-convolution stride-4 encoder and the global
//! prediction module, where ten learned queries cross-attend to the encoded
//! features and decode a 3×3 colour matrix (nine queries) and a gamma (one).

use iat_tensor::kernels::softplus_scalar;
use iat_tensor::{Activation, Conv2dConfig, Graph, Scalar, Tensor};

use super::local::conv;
use super::{conv_out, Declare, IatParams};
use crate::error::{Error, Result};
use crate::isp::{GlobalNodes, DEFAULT_EPS};

pub const NUM_QUERIES: usize = 10;

/// Hidden width of the feed-forward block, as a multiple of `dim`.
pub const FFN_RATIO: usize = 4;

const DOWN: Conv2dConfig = Conv2dConfig {
    stride: 2,
    padding: 1,
    groups: 1,
};

fn linear(b: &mut impl Declare, prefix: &str, din: usize, dout: usize) {
    b.uniform(format!("{prefix}.weight"), &[din, dout], din);
    b.uniform(format!("{prefix}.bias"), &[dout], din);
}

pub(crate) fn declare(b: &mut impl Declare, d: usize) {
    conv(b, "global.encoder.conv1", d / 2, 3, 3);
    conv(b, "global.encoder.conv2", d, d / 2, 3);
    b.constant("global.gpm.queries".into(), &[NUM_QUERIES, d], 0.0);
    conv(b, "global.gpm.pos_dw", d, 1, 3);
    for name in ["w_q", "w_k", "w_v", "w_out"] {
        linear(b, &format!("global.gpm.{name}"), d, d);
    }
    linear(b, "global.gpm.ffn1", d, FFN_RATIO * d);
    linear(b, "global.gpm.ffn2", FFN_RATIO * d, d);
    // Zero heads: the branch emits W = I, γ = 1 until trained.
    for head in ["head_w", "head_g"] {
        b.constant(format!("global.gpm.{head}.weight"), &[d, 1], 0.0);
        b.constant(format!("global.gpm.{head}.bias"), &[1], 0.0);
    }
}

fn apply_linear<T: Scalar, G: Graph<T>>(g: &G, x: &G::Node, p: &IatParams<T>, prefix: &str) -> Result<G::Node> {
    let w = p.node(g, &format!("{prefix}.weight"));
    let b = p.node(g, &format!("{prefix}.bias"));
    let y = g.matmul(x, &w)?;
    Ok(g.add(&y, &b)?)
}

fn apply_conv<T: Scalar, G: Graph<T>>(
    g: &G,
    x: &G::Node,
    p: &IatParams<T>,
    prefix: &str,
    cfg: Conv2dConfig,
) -> Result<G::Node> {
    let w = p.node(g, &format!("{prefix}.weight"));
    let b = p.node(g, &format!("{prefix}.bias"));
    Ok(g.conv2d(x, &w, Some(&b), cfg)?)
}

/// `[1, 3, H, W]` → `[1, d, ⌈H/4⌉, ⌈W/4⌉]`.
pub fn encoder_forward<T: Scalar, G: Graph<T>>(g: &G, img: &G::Node, p: &IatParams<T>) -> Result<G::Node> {
    let shape = g.shape(img);
    if shape.len() != 4 || shape[2] < 4 || shape[3] < 4 {
        return Err(Error::Input(format!("encoder needs a [1, 3, H≥4, W≥4] image, got {shape:?}")));
    }
    let h = apply_conv(g, img, p, "global.encoder.conv1", DOWN)?;
    let h = g.activation(&h, Activation::Gelu);
    let h = apply_conv(g, &h, p, "global.encoder.conv2", DOWN)?;
    Ok(g.activation(&h, Activation::Gelu))
}

#[derive(Debug, Clone)]
pub struct Attention<N> {
    /// `[10, d]`: `w_out(attn·V) + Q`.
    pub out: N,
    /// `[10, H'·W']` attention weights.
    pub weights: N,
}

/// Single-head cross-attention of `queries` (`[10, d]`) over the positional
/// encoded features.
pub fn cross_attention<T: Scalar, G: Graph<T>>(
    g: &G,
    queries: &G::Node,
    feats: &G::Node,
    p: &IatParams<T>,
) -> Result<Attention<G::Node>> {
    let d = p.config().dim;
    let fs = g.shape(feats);
    let n = match fs.as_slice() {
        [1, c, h, w] if *c == d => h * w,
        _ => return Err(Error::Input(format!("expected [1, {d}, H, W] features, got {fs:?}"))),
    };
    let dw = Conv2dConfig {
        stride: 1,
        padding: 1,
        groups: d,
    };
    let pos = apply_conv(g, feats, p, "global.gpm.pos_dw", dw)?;
    let kv = g.add(feats, &pos)?;
    let kv = g.reshape(&kv, &[d, n])?;
    let kv = g.transpose(&kv)?;

    let q = apply_linear(g, queries, p, "global.gpm.w_q")?;
    let k = apply_linear(g, &kv, p, "global.gpm.w_k")?;
    let v = apply_linear(g, &kv, p, "global.gpm.w_v")?;
    let kt = g.transpose(&k)?;
    let scores = g.matmul(&q, &kt)?;
    let scores = g.scale(&scores, T::from_f64(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(&scores, -1)?;
    let ctx = g.matmul(&weights, &v)?;
    let proj = apply_linear(g, &ctx, p, "global.gpm.w_out")?;
    Ok(Attention {
        out: g.add(&proj, queries)?,
        weights,
    })
}

/// `γ = 1 + softplus(2Δ) − softplus(0)`: equals 1 with unit slope at
/// `Δ = 0` and stays above `1 − ln 2`.
pub fn shifted_softplus<T: Scalar, G: Graph<T>>(g: &G, delta: &G::Node) -> G::Node {
    let doubled = g.scale(delta, T::from_f64(2.0));
    let sp = g.activation(&doubled, Activation::Softplus);
    g.add_scalar(&sp, T::one() - softplus_scalar(T::zero()))
}

/// Decodes `(W = I + ΔW, γ)` from encoded features.
pub fn gpm_forward<T: Scalar, G: Graph<T>>(
    g: &G,
    feats: &G::Node,
    p: &IatParams<T>,
) -> Result<GlobalNodes<G::Node>> {
    let queries = p.node(g, "global.gpm.queries");
    let z = cross_attention(g, &queries, feats, p)?.out;
    let t = apply_linear(g, &z, p, "global.gpm.ffn1")?;
    let t = g.activation(&t, Activation::Gelu);
    let t = apply_linear(g, &t, p, "global.gpm.ffn2")?;

    let tw = g.narrow(&t, 0, 0, 9)?;
    let dw = apply_linear(g, &tw, p, "global.gpm.head_w")?;
    let dw = g.reshape(&dw, &[3, 3])?;
    let matrix = g.add(&dw, &g.constant(Tensor::eye(3)))?;

    let tg = g.narrow(&t, 0, 9, 1)?;
    let dg = apply_linear(g, &tg, p, "global.gpm.head_g")?;
    let dg = g.reshape(&dg, &[])?;
    Ok(GlobalNodes {
        matrix,
        gamma: shifted_softplus(g, &dg),
        eps: DEFAULT_EPS,
    })
}

/// Multiply-accumulates of the global branch at `h`×`w` input.
pub(crate) fn macs(d: usize, h: usize, w: usize) -> f64 {
    let (h1, w1) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    let (h2, w2) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
    let n = (h2 * w2) as f64;
    let (d, q) = (d as f64, NUM_QUERIES as f64);
    let enc = (h1 * w1) as f64 * (d / 2.0) * 27.0 + n * d * (d / 2.0) * 9.0;
    let pos = n * d * 9.0;
    let proj = q * d * d + 2.0 * n * d * d + q * d * d;
    let attn = 2.0 * q * n * d;
    let ffn = 2.0 * q * d * (FFN_RATIO as f64 * d);
    let heads = q * d;
    enc + pos + proj + attn + ffn + heads
}
