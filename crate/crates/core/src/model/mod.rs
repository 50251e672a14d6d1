//! The full two-branch model: parameter container, forward composition,
//! parameter/FLOP accounting and checkpoints.

mod checkpoint;
pub mod global;
pub mod local;

use std::collections::{BTreeMap, HashMap};

use iat_tensor::{Graph, Param, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::{compose_iat, GlobalNodes};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};

/// Architecture knobs: PEM width, PEM blocks per stack and attention width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IatConfig {
    pub channels: usize,
    pub blocks: usize,
    pub dim: usize,
}

impl Default for IatConfig {
    fn default() -> Self {
        IatConfig {
            channels: 16,
            blocks: 3,
            dim: 64,
        }
    }
}

impl IatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 {
            return Err(Error::Config(format!(
                "channels and blocks must be ≥ 1 (got {}, {})",
                self.channels, self.blocks
            )));
        }
        if self.dim < 8 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("dim must be even and ≥ 8, got {}", self.dim)));
        }
        Ok(())
    }
}

/// Every learnable tensor of the model, addressed by dotted name
/// (`local.m_stack.0.pw1.weight`, `global.gpm.queries`, …).
#[derive(Debug, Clone, PartialEq)]
pub struct IatParams<T> {
    config: IatConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> IatParams<T> {
    /// Random initialization with the identity-producing heads and queries.
    pub fn init<R: Rng + ?Sized>(config: IatConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder { params: Vec::new(), rng };
        local::declare(&mut b, config.channels, config.blocks);
        global::declare(&mut b, config.dim);
        Self::from_params(config, b.params)
    }

    /// Assembles a parameter set, checking names and shapes against `config`.
    pub fn from_params(config: IatConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(config);
        if params.len() != expected.len() {
            return Err(Error::Format(format!(
                "config {config:?} has {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            match expected.get(&p.name) {
                None => return Err(Error::Format(format!("unknown tensor name {:?}", p.name))),
                Some(shape) if shape.as_slice() != p.value.shape() => {
                    return Err(Error::Format(format!(
                        "tensor {:?} has shape {:?}, config {config:?} expects {shape:?}",
                        p.name,
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {:?}", p.name)));
            }
        }
        Ok(IatParams { config, params, index })
    }

    fn expected_shapes(config: IatConfig) -> HashMap<String, Vec<usize>> {
        let mut b = ShapeRecorder::default();
        local::declare(&mut b, config.channels, config.blocks);
        global::declare(&mut b, config.dim);
        b.shapes.into_iter().collect()
    }

    pub fn config(&self) -> IatConfig {
        self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        match self.index.get(name) {
            Some(&i) => &self.params[i],
            None => panic!("no parameter named {name:?}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub(crate) fn node<G: Graph<T>>(&self, g: &G, name: &str) -> G::Node {
        g.param(self.get(name))
    }

    pub fn cast<U: Scalar>(&self) -> IatParams<U> {
        IatParams {
            config: self.config,
            params: self.params.iter().map(|p| Param::new(p.name.clone(), p.value.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Per-module counts and totals.
    pub fn count_params(&self) -> ParamReport {
        let mut modules: BTreeMap<String, usize> = BTreeMap::new();
        for p in &self.params {
            let key: Vec<&str> = p.name.splitn(3, '.').take(2).collect();
            *modules.entry(key.join(".")).or_default() += p.numel();
        }
        let local = self.params.iter().filter(|p| p.name.starts_with("local.")).map(Param::numel).sum();
        let total: usize = self.params.iter().map(Param::numel).sum();
        ParamReport {
            modules,
            local,
            global: total - local,
            total,
        }
    }
}

/// Learnable-scalar counts, grouped by the first two name segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub modules: BTreeMap<String, usize>,
    pub local: usize,
    pub global: usize,
    pub total: usize,
}

/// Parameter declaration sink shared by initialization and shape checks.
pub(crate) trait Declare {
    /// Weight drawn uniformly in ±1/√fan_in.
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize);
    fn constant(&mut self, name: String, shape: &[usize], value: f64);
    fn identity(&mut self, name: String, n: usize);
}

struct ParamBuilder<'r, T, R: ?Sized> {
    params: Vec<Param<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Declare for ParamBuilder<'_, T, R> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.params.push(Param::new(name, value));
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.params.push(Param::new(name, Tensor::full(shape, T::from_f64(value))));
    }

    fn identity(&mut self, name: String, n: usize) {
        let value = Tensor::eye(n).reshape([n, n, 1, 1]).expect("square");
        self.params.push(Param::new(name, value));
    }
}

#[derive(Default)]
struct ShapeRecorder {
    shapes: Vec<(String, Vec<usize>)>,
}

impl Declare for ShapeRecorder {
    fn uniform(&mut self, name: String, shape: &[usize], _: usize) {
        self.shapes.push((name, shape.to_vec()));
    }

    fn constant(&mut self, name: String, shape: &[usize], _: f64) {
        self.shapes.push((name, shape.to_vec()));
    }

    fn identity(&mut self, name: String, n: usize) {
        self.shapes.push((name, vec![n, n, 1, 1]));
    }
}

/// Forward results. With `local_only`, `out` is `f_out` and `global` is
/// `None`.
#[derive(Debug, Clone)]
pub struct IatOutput<N> {
    pub out: N,
    pub f_out: N,
    pub m: N,
    pub a: N,
    pub global: Option<GlobalNodes<N>>,
}

/// `out = max(W·(x⊙M + A), ε)^γ` with M, A from the local branch and
/// (W, γ) from the global branch. Outputs are not clamped.
pub fn iat_forward<T: Scalar, G: Graph<T>>(
    g: &G,
    img: &G::Node,
    p: &IatParams<T>,
    local_only: bool,
) -> Result<IatOutput<G::Node>> {
    let shape = g.shape(img);
    let (h, w) = match shape.as_slice() {
        [1, 3, h, w] => (*h, *w),
        _ => return Err(Error::Input(format!("expected a [1, 3, H, W] image, got {shape:?}"))),
    };
    if h < 4 || w < 4 {
        return Err(Error::Input(format!("image must be at least 4×4, got {h}×{w}")));
    }
    let (m, a) = local::local_branch_forward(g, img, p)?;
    if local_only {
        let scaled = g.mul(img, &m)?;
        let f_out = g.add(&scaled, &a)?;
        return Ok(IatOutput {
            out: f_out.clone(),
            f_out,
            m,
            a,
            global: None,
        });
    }
    let feats = global::encoder_forward(g, img, p)?;
    let gp = global::gpm_forward(g, &feats, p)?;
    let (f_out, out) = compose_iat(g, img, &m, &a, &gp)?;
    Ok(IatOutput {
        out,
        f_out,
        m,
        a,
        global: Some(gp),
    })
}

/// Analytic cost in GFLOPs (one multiply-accumulate = 2 FLOPs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopReport {
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

/// Counts multiply-accumulates of every convolution, linear layer,
/// attention product and colour-matrix product at `h`×`w`. Elementwise
/// work (activations, norms' affine part, residual adds, the gamma curve)
/// is not counted.
pub fn estimate_flops(config: IatConfig, h: usize, w: usize) -> Result<FlopReport> {
    config.validate()?;
    if h < 4 || w < 4 {
        return Err(Error::Input(format!("FLOP estimate needs H, W ≥ 4, got {h}×{w}")));
    }
    let local = local::macs(config.channels, config.blocks, h, w);
    let global = global::macs(config.dim, h, w) + 9.0 * (h * w) as f64;
    let g = |macs: f64| 2.0 * macs / 1e9;
    Ok(FlopReport {
        local: g(local),
        global: g(global),
        total: g(local + global),
    })
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use iat_tensor::Eager;

    #[test]
    fn default_budget() {
        let p = IatParams::<f32>::init(IatConfig::default(), &mut stream(0, 1)).unwrap();
        let r = p.count_params();
        assert!((10_000..=30_000).contains(&r.local), "{r:?}");
        assert!((50_000..=90_000).contains(&r.global), "{r:?}");
        assert!((80_000..=100_000).contains(&r.total), "{r:?}");
        assert_eq!(r.modules.values().sum::<usize>(), r.total);
    }

    #[test]
    fn wider_is_larger() {
        let count = |channels| {
            let cfg = IatConfig { channels, ..IatConfig::default() };
            IatParams::<f32>::init(cfg, &mut stream(0, 1)).unwrap().count_params().total
        };
        assert!(count(32) > count(16));
    }

    #[test]
    fn ablation_configs_construct() {
        for (blocks, channels) in [(2, 24), (4, 12)] {
            let cfg = IatConfig { channels, blocks, dim: 64 };
            let p = IatParams::<f32>::init(cfg, &mut stream(3, 1)).unwrap();
            assert_eq!(p.config(), cfg);
        }
        assert!(IatParams::<f32>::init(IatConfig { dim: 7, ..IatConfig::default() }, &mut stream(0, 0)).is_err());
        assert!(IatParams::<f32>::init(IatConfig { blocks: 0, ..IatConfig::default() }, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = IatParams::<f32>::init(IatConfig::default(), &mut stream(7, 1)).unwrap();
        let b = IatParams::<f32>::init(IatConfig::default(), &mut stream(7, 1)).unwrap();
        let c = IatParams::<f32>::init(IatConfig::default(), &mut stream(8, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn flops_scale_and_reject_tiny() {
        let cfg = IatConfig::default();
        let a = estimate_flops(cfg, 256, 256).unwrap();
        let b = estimate_flops(cfg, 512, 512).unwrap();
        assert!((b.local / a.local - 4.0).abs() < 1e-9);
        assert!(estimate_flops(cfg, 3, 100).is_err());
    }

    #[test]
    fn rejects_small_or_misshaped_input() {
        let p = IatParams::<f32>::init(IatConfig::default(), &mut stream(0, 1)).unwrap();
        assert!(iat_forward(&Eager, &Tensor::zeros([1, 3, 3, 8]), &p, false).is_err());
        assert!(iat_forward(&Eager, &Tensor::zeros([1, 1, 8, 8]), &p, false).is_err());
    }
}
