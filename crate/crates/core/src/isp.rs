//! Global ISP operator `max(W·x, ε)^γ` and a forward camera-pipeline
//! simulator used to synthesize degraded/clean training pairs.

use std::fmt;
use std::str::FromStr;

use iat_tensor::{Graph, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageRGB;

/// Clamp floor of the global operator.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Exponent used to linearize sRGB inputs (pure power law).
pub const LINEARIZE_GAMMA: f64 = 2.2;

/// Colour matrix, gamma and clamp floor of the global operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub matrix: [[f64; 3]; 3],
    pub gamma: f64,
    pub eps: f64,
}

impl Default for GlobalParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl GlobalParams {
    pub fn identity() -> Self {
        GlobalParams {
            matrix: IDENTITY3,
            gamma: 1.0,
            eps: DEFAULT_EPS,
        }
    }

    pub fn new(matrix: [[f64; 3]; 3], gamma: f64) -> Result<Self> {
        let gp = GlobalParams {
            matrix,
            gamma,
            eps: DEFAULT_EPS,
        };
        gp.validate()?;
        Ok(gp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "global params need gamma > 0 and eps > 0 (got {}, {})",
                self.gamma, self.eps
            )));
        }
        Ok(())
    }

    /// Graph constants for this parameter set.
    pub fn to_nodes<T: Scalar, G: Graph<T>>(&self, g: &G) -> GlobalNodes<G::Node> {
        let flat: Vec<T> = self.matrix.iter().flatten().map(|&v| T::from_f64(v)).collect();
        GlobalNodes {
            matrix: g.constant(Tensor::new([3, 3], flat).expect("3x3")),
            gamma: g.constant(Tensor::scalar(T::from_f64(self.gamma))),
            eps: self.eps,
        }
    }
}

/// Global parameters as graph nodes: `matrix` is `[3, 3]`, `gamma` holds one
/// element.
#[derive(Debug, Clone)]
pub struct GlobalNodes<N> {
    pub matrix: N,
    pub gamma: N,
    pub eps: f64,
}

impl<N> GlobalNodes<N> {
    /// Reads the current values back into plain numbers.
    pub fn values<T: Scalar, G: Graph<T, Node = N>>(&self, g: &G) -> GlobalParams {
        let m = g.value(&self.matrix);
        let mut matrix = [[0.0; 3]; 3];
        for (i, v) in m.data().iter().enumerate() {
            matrix[i / 3][i % 3] = v.as_f64();
        }
        GlobalParams {
            matrix,
            gamma: g.value(&self.gamma).data()[0].as_f64(),
            eps: self.eps,
        }
    }
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn check_image_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [1, 3, h, w] => Ok((*h, *w)),
        _ => Err(Error::Input(format!("expected a [1, 3, H, W] image tensor, got {shape:?}"))),
    }
}

/// Per-pixel `out[cᵢ] = Σⱼ W[cᵢ, cⱼ]·x[cⱼ]`.
pub fn apply_color_matrix<T: Scalar, G: Graph<T>>(g: &G, x: &G::Node, matrix: &G::Node) -> Result<G::Node> {
    let (h, w) = check_image_shape(&g.shape(x))?;
    let ms = g.shape(matrix);
    if ms != [3, 3] {
        return Err(iat_tensor::TensorError::Shape {
            op: "apply_color_matrix",
            lhs: ms,
            rhs: vec![3, 3],
        }
        .into());
    }
    let flat = g.reshape(x, &[3, h * w])?;
    let mixed = g.matmul(matrix, &flat)?;
    Ok(g.reshape(&mixed, &[1, 3, h, w])?)
}

/// `max(W·x, ε)^γ`.
pub fn apply_global<T: Scalar, G: Graph<T>>(g: &G, x: &G::Node, gp: &GlobalNodes<G::Node>) -> Result<G::Node> {
    if !(gp.eps > 0.0) {
        return Err(Error::Config(format!("eps must be > 0, got {}", gp.eps)));
    }
    let mixed = apply_color_matrix(g, x, &gp.matrix)?;
    Ok(g.pow_clamped(&mixed, &gp.gamma, T::from_f64(gp.eps))?)
}

/// Full composition: returns `(f, out)` with `f = x⊙M + A` and
/// `out = max(W·f, ε)^γ`.
pub fn compose_iat<T: Scalar, G: Graph<T>>(
    g: &G,
    x: &G::Node,
    m: &G::Node,
    a: &G::Node,
    gp: &GlobalNodes<G::Node>,
) -> Result<(G::Node, G::Node)> {
    let xs = g.shape(x);
    for (name, s) in [("M", g.shape(m)), ("A", g.shape(a))] {
        if s != xs {
            return Err(Error::Input(format!("{name} map shape {s:?} differs from input {xs:?}")));
        }
    }
    let scaled = g.mul(x, m)?;
    let f = g.add(&scaled, a)?;
    let out = apply_global(g, &f, gp)?;
    Ok((f, out))
}

// ---------------------------------------------------------------------------
// degradation simulator

/// Linear-domain (pre-gamma) image, H×W×3 interleaved, values ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl LinearImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{height}×{width} linear image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Input("linear image values must be ≥ 0".into()));
        }
        Ok(LinearImage { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LinearImage> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Input("crop exceeds linear image".into()));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[(y * self.width + x0) * 3..(y * self.width + x0 + w) * 3]);
        }
        Ok(LinearImage { height: h, width: w, data })
    }

    pub fn flip_horizontal(&self) -> LinearImage {
        self.remap(|y, x| (y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> LinearImage {
        self.remap(|y, x| (self.height - 1 - y, x))
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize)) -> LinearImage {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = src(y, x);
                data.extend_from_slice(&self.data[(sy * self.width + sx) * 3..][..3]);
            }
        }
        LinearImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        Tensor::from_fn([1, 3, self.height, self.width], |i| {
            T::from_f64(self.data[(i % plane) * 3 + i / plane] as f64)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    LowLight,
    OverExposure,
    Mixed,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::LowLight => "low_light",
            Profile::OverExposure => "over_exposure",
            Profile::Mixed => "mixed",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_light" => Ok(Profile::LowLight),
            "over_exposure" => Ok(Profile::OverExposure),
            "mixed" => Ok(Profile::Mixed),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected low_light, over_exposure or mixed)"
            ))),
        }
    }
}

/// Camera pipeline used to synthesize one degraded sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub wb_gains: [f64; 3],
    pub ccm: [[f64; 3]; 3],
    pub gamma_d: f64,
    pub exposure: f64,
    pub noise_sigma: f64,
}

impl DegradationParams {
    /// Pipeline that leaves a clean image unchanged.
    pub fn identity() -> Self {
        DegradationParams {
            wb_gains: [1.0; 3],
            ccm: IDENTITY3,
            gamma_d: 1.0 / LINEARIZE_GAMMA,
            exposure: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.wb_gains.iter().any(|g| !(*g > 0.0)) {
            return bad(format!("white-balance gains must be > 0: {:?}", self.wb_gains));
        }
        if !(self.exposure > 0.0) {
            return bad(format!("exposure must be > 0: {}", self.exposure));
        }
        if !(self.gamma_d > 0.0) {
            return bad(format!("gamma_d must be > 0: {}", self.gamma_d));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be ≥ 0: {}", self.noise_sigma));
        }
        for (i, row) in self.ccm.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad(format!("ccm row {i} sums to {s}, expected 1"));
            }
        }
        let det = det3(&self.ccm);
        if det.abs() < 1e-6 {
            return bad(format!("ccm is singular (det = {det:e})"));
        }
        Ok(())
    }

    /// Global parameters that undo a noise-free degradation.
    ///
    /// White balance and colour matrix cancel between unprocessing and
    /// re-rendering, so the degraded value is `(exposure·c^2.2)^gamma_d`
    /// and the inverse is `(exposure^(−gamma_d) · d)^(1/(2.2·gamma_d))`.
    pub fn recovery(&self) -> GlobalParams {
        let s = self.exposure.powf(-self.gamma_d);
        GlobalParams {
            matrix: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            gamma: 1.0 / (LINEARIZE_GAMMA * self.gamma_d),
            eps: DEFAULT_EPS,
        }
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(m);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / d, -c(0, 1, 2, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 0, 2, 2) / d, c(0, 0, 2, 2) / d, -c(0, 0, 1, 2) / d],
        [c(1, 0, 2, 1) / d, -c(0, 0, 2, 1) / d, c(0, 0, 1, 1) / d],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Synthesizes `(degraded, pseudo_raw)` from a clean sRGB image.
///
/// Clean values are linearized by `x^2.2`, scaled by the exposure, taken to
/// camera space through the inverse colour matrix and inverse white balance,
/// and perturbed by Gaussian noise (clamped at zero) to form the pseudo-raw.
/// Re-rendering applies white balance, colour matrix and `gamma_d`, then
/// clamps to [0,1].
pub fn degrade<R: Rng + ?Sized>(
    clean: &ImageRGB,
    dp: &DegradationParams,
    rng: &mut R,
) -> Result<(ImageRGB, LinearImage)> {
    dp.validate()?;
    let ccm_inv = inverse3(&dp.ccm);
    let noise = if dp.noise_sigma > 0.0 {
        Some(Normal::new(0.0, dp.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let n = clean.height() * clean.width();
    let mut raw = Vec::with_capacity(n * 3);
    let mut degraded = Vec::with_capacity(n * 3);
    for px in clean.pixels().chunks_exact(3) {
        let lin: [f64; 3] = std::array::from_fn(|c| (px[c] as f64).powf(LINEARIZE_GAMMA) * dp.exposure);
        let cam = mat_vec(&ccm_inv, lin);
        let mut r: [f64; 3] = std::array::from_fn(|c| cam[c] / dp.wb_gains[c]);
        for v in &mut r {
            if let Some(dist) = &noise {
                *v += dist.sample(rng);
            }
            *v = v.max(0.0);
        }
        raw.extend(r.iter().map(|&v| v as f32));
        let balanced: [f64; 3] = std::array::from_fn(|c| r[c] * dp.wb_gains[c]);
        let rendered = mat_vec(&dp.ccm, balanced);
        degraded.extend(
            rendered
                .iter()
                .map(|&v| (v.max(0.0).powf(dp.gamma_d).min(1.0)) as f32),
        );
    }
    Ok((
        ImageRGB::new(clean.height(), clean.width(), degraded)?,
        LinearImage::new(clean.height(), clean.width(), raw)?,
    ))
}

/// Draws a random degradation for `profile`.
pub fn sample_degradation<R: Rng + ?Sized>(rng: &mut R, profile: Profile) -> DegradationParams {
    let profile = match profile {
        Profile::Mixed => {
            if rng.random_bool(0.5) {
                Profile::LowLight
            } else {
                Profile::OverExposure
            }
        }
        p => p,
    };
    let (exposure, noise_sigma) = match profile {
        Profile::LowLight => (rng.random_range(0.05..=0.5), rng.random_range(0.0..=0.02)),
        _ => (rng.random_range(2.0..=8.0), rng.random_range(0.0..=0.005)),
    };
    let wb_gains = std::array::from_fn(|_| rng.random_range(0.7..=1.3));
    let mut ccm = IDENTITY3;
    for (i, row) in ccm.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = rng.random_range(-0.1..=0.1);
            }
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    let gamma_d = rng.random_range(1.0 / 2.6..=1.0 / 1.8);
    DegradationParams {
        wb_gains,
        ccm,
        gamma_d,
        exposure,
        noise_sigma,
    }
}

/// Procedural clean scene: a smooth colour gradient with a few soft-edged
/// discs and rectangles, values kept inside [0.05, 0.95].
pub fn synthetic_scene<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> ImageRGB {
    let base: [[f32; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.15..0.85)));
    let shapes: Vec<(bool, [f32; 4], [f32; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            let geom = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.1..0.35),
                rng.random_range(0.1..0.35),
            ];
            let colour = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            (rng.random_bool(0.5), geom, colour)
        })
        .collect();
    let freq = rng.random_range(2.0..8.0f32);
    ImageRGB::from_fn(height, width, |y, x, c| {
        let v = y as f32 / height.max(2) as f32;
        let u = x as f32 / width.max(2) as f32;
        let mut val = base[0][c] * (1.0 - u) + base[1][c] * u;
        val = val * (1.0 - v) + base[2][c] * v;
        for (disc, [cy, cx, ry, rx], colour) in &shapes {
            let (dy, dx) = ((v - cy) / ry, (u - cx) / rx);
            let inside = if *disc {
                1.0 - (dy * dy + dx * dx).sqrt()
            } else {
                1.0 - dy.abs().max(dx.abs())
            };
            let alpha = (inside * 8.0).clamp(0.0, 1.0);
            val = val * (1.0 - alpha) + colour[c] * alpha;
        }
        val += 0.04 * (freq * (u + 0.5 * v) * std::f32::consts::TAU).sin();
        val.clamp(0.05, 0.95)
    })
}
