//! Local branch: stem convolution, two stacks of pixel-wise enhancement
//! modules (PEM) and the M (ReLU) / A (Tanh) heads, all at full resolution.

use iat_tensor::{Activation, Conv2dConfig, Graph, Scalar};

use super::{Declare, IatParams};
use crate::error::Result;

/// Initial value of the per-channel layer-scale multipliers.
pub const LAYER_SCALE_INIT: f64 = 1e-2;

pub const STACKS: [&str; 2] = ["m_stack", "a_stack"];

const SAME3: Conv2dConfig = Conv2dConfig {
    stride: 1,
    padding: 1,
    groups: 1,
};

pub(crate) fn conv(b: &mut impl Declare, prefix: &str, cout: usize, cin_per_group: usize, k: usize) {
    let fan_in = cin_per_group * k * k;
    b.uniform(format!("{prefix}.weight"), &[cout, cin_per_group, k, k], fan_in);
    b.uniform(format!("{prefix}.bias"), &[cout], fan_in);
}

fn light_norm_params(b: &mut impl Declare, prefix: &str, c: usize) {
    b.constant(format!("{prefix}.a"), &[1, c, 1, 1], 1.0);
    b.constant(format!("{prefix}.b"), &[1, c, 1, 1], 0.0);
    b.identity(format!("{prefix}.t"), c);
}

fn pem_params(b: &mut impl Declare, prefix: &str, c: usize) {
    conv(b, &format!("{prefix}.pos_dw"), c, 1, 3);
    light_norm_params(b, &format!("{prefix}.norm1"), c);
    conv(b, &format!("{prefix}.pw1"), c, c, 1);
    conv(b, &format!("{prefix}.dw"), c, 1, 3);
    conv(b, &format!("{prefix}.pw2"), c, c, 1);
    light_norm_params(b, &format!("{prefix}.norm2"), c);
    conv(b, &format!("{prefix}.mix1"), c, c, 1);
    conv(b, &format!("{prefix}.mix2"), c, c, 1);
    b.constant(format!("{prefix}.k1"), &[1, c, 1, 1], LAYER_SCALE_INIT);
    b.constant(format!("{prefix}.k2"), &[1, c, 1, 1], LAYER_SCALE_INIT);
}

pub(crate) fn declare(b: &mut impl Declare, c: usize, blocks: usize) {
    conv(b, "local.stem", c, 3, 3);
    for stack in STACKS {
        for i in 0..blocks {
            pem_params(b, &format!("local.{stack}.{i}"), c);
        }
    }
    // M ≡ 1 and A ≡ 0 until the heads are trained.
    b.constant("local.m_head.weight".into(), &[3, c, 3, 3], 0.0);
    b.constant("local.m_head.bias".into(), &[3], 1.0);
    b.constant("local.a_head.weight".into(), &[3, c, 3, 3], 0.0);
    b.constant("local.a_head.bias".into(), &[3], 0.0);
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

fn depthwise(c: usize) -> Conv2dConfig {
    Conv2dConfig {
        stride: 1,
        padding: 1,
        groups: c,
    }
}

/// Per pixel `y = T·(a⊙x + b)`; no statistics are computed.
pub fn light_norm<T: Scalar, G: Graph<T>>(g: &G, x: &G::Node, p: &IatParams<T>, prefix: &str) -> Result<G::Node> {
    let (w, b) = light_norm_folded(g, p, prefix)?;
    Ok(g.conv2d(x, &w, Some(&b), Conv2dConfig::default())?)
}

/// The affine folded into the mixing conv: weight `T·diag(a)`, bias `T·b`.
fn light_norm_folded<T: Scalar, G: Graph<T>>(g: &G, p: &IatParams<T>, prefix: &str) -> Result<(G::Node, G::Node)> {
    let c = p.config().channels;
    let a = p.node(g, &format!("{prefix}.a"));
    let b = p.node(g, &format!("{prefix}.b"));
    let t = p.node(g, &format!("{prefix}.t"));
    let w = g.mul(&t, &a)?;
    let t2 = g.reshape(&t, &[c, c])?;
    let b2 = g.reshape(&b, &[c, 1])?;
    let bias = g.matmul(&t2, &b2)?;
    Ok((w, g.reshape(&bias, &[c])?))
}

/// `conv(light_norm(x))` for a following 1×1 conv, evaluated as one conv with
/// weight `P·T·diag(a)` and bias `P·T·b + bias_P`.
fn normed_pointwise<T: Scalar, G: Graph<T>>(
    g: &G,
    x: &G::Node,
    p: &IatParams<T>,
    norm: &str,
    conv: &str,
) -> Result<G::Node> {
    let c = p.config().channels;
    let (nw, nb) = light_norm_folded(g, p, norm)?;
    let pw = g.reshape(&p.node(g, &format!("{conv}.weight")), &[c, c])?;
    let w = g.matmul(&pw, &g.reshape(&nw, &[c, c])?)?;
    let b = g.matmul(&pw, &g.reshape(&nb, &[c, 1])?)?;
    let b = g.add(&g.reshape(&b, &[c])?, &p.node(g, &format!("{conv}.bias")))?;
    Ok(g.conv2d(x, &g.reshape(&w, &[c, c, 1, 1])?, Some(&b), Conv2dConfig::default())?)
}

/// 1×1 conv whose output channels are scaled by the layer-scale vector,
/// folded into the weights.
fn scaled_pointwise<T: Scalar, G: Graph<T>>(
    g: &G,
    x: &G::Node,
    p: &IatParams<T>,
    prefix: &str,
    scale: &str,
) -> Result<G::Node> {
    let c = p.config().channels;
    let k = p.node(g, scale);
    let w = g.mul(&p.node(g, &format!("{prefix}.weight")), &g.reshape(&k, &[c, 1, 1, 1])?)?;
    let b = g.mul(&p.node(g, &format!("{prefix}.bias")), &g.reshape(&k, &[c])?)?;
    Ok(g.conv2d(x, &w, Some(&b), Conv2dConfig::default())?)
}

/// One pixel-wise enhancement module:
///
/// ```text
/// u   = x + pos_dw(x)
/// v   = u + k1 ⊙ pw2(gelu(dw(gelu(pw1(norm1(u))))))
/// out = v + k2 ⊙ mix2(gelu(mix1(norm2(v))))
/// ```
pub fn pem_forward<T: Scalar, G: Graph<T>>(g: &G, x: &G::Node, p: &IatParams<T>, prefix: &str) -> Result<G::Node> {
    let c = p.config().channels;
    let pos = apply_conv(g, x, p, &format!("{prefix}.pos_dw"), depthwise(c))?;
    let u = g.add(x, &pos)?;

    let h = normed_pointwise(g, &u, p, &format!("{prefix}.norm1"), &format!("{prefix}.pw1"))?;
    let h = g.activation(&h, Activation::Gelu);
    let h = apply_conv(g, &h, p, &format!("{prefix}.dw"), depthwise(c))?;
    let h = g.activation(&h, Activation::Gelu);
    let h = scaled_pointwise(g, &h, p, &format!("{prefix}.pw2"), &format!("{prefix}.k1"))?;
    let v = g.add(&u, &h)?;

    let h = normed_pointwise(g, &v, p, &format!("{prefix}.norm2"), &format!("{prefix}.mix1"))?;
    let h = g.activation(&h, Activation::Gelu);
    let h = scaled_pointwise(g, &h, p, &format!("{prefix}.mix2"), &format!("{prefix}.k2"))?;
    Ok(g.add(&v, &h)?)
}

/// Returns `(M, A)`, each `[1, 3, H, W]`.
pub fn local_branch_forward<T: Scalar, G: Graph<T>>(
    g: &G,
    img: &G::Node,
    p: &IatParams<T>,
) -> Result<(G::Node, G::Node)> {
    let stem = apply_conv(g, img, p, "local.stem", SAME3)?;
    let mut feats = Vec::with_capacity(2);
    for stack in STACKS {
        let mut h = stem.clone();
        for i in 0..p.config().blocks {
            h = pem_forward(g, &h, p, &format!("local.{stack}.{i}"))?;
        }
        feats.push(g.add(&h, &stem)?);
    }
    let m = apply_conv(g, &feats[0], p, "local.m_head", SAME3)?;
    let a = apply_conv(g, &feats[1], p, "local.a_head", SAME3)?;
    Ok((g.activation(&m, Activation::Relu), g.activation(&a, Activation::Tanh)))
}

/// Multiply-accumulates of the local branch at `h`×`w`.
pub(crate) fn macs(c: usize, blocks: usize, h: usize, w: usize) -> f64 {
    let stem = 27 * c;
    let pem = 6 * c * c + 18 * c;
    let heads = 2 * 27 * c;
    ((stem + 2 * blocks * pem + heads) * h * w) as f64
}
