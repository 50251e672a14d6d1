//! Whole-model checks: identity at initialization, resolution handling, a
//! plain-loop reference implementation, and finite-difference gradients.

use iat_core::image_io::{image_to_tensor, ImageRGB};
use iat_core::isp::{compose_iat, GlobalParams};
use iat_core::model::local::{light_norm, pem_forward};
use iat_core::model::{iat_forward, IatConfig, IatParams};
use iat_core::rng::stream;
use iat_core::tensor::gradcheck::relative_error;
use iat_core::tensor::{Eager, Graph, Tape, Tensor};
use iat_core::training::smooth_l1;
use rand::Rng;

fn random_image(h: usize, w: usize, seed: u64) -> ImageRGB {
    let mut rng = stream(seed, 0);
    ImageRGB::from_fn(h, w, |_, _, _| rng.random_range(1e-3..1.0))
}

/// Adds noise to every parameter so no head, query or scale sits at a
/// special value.
fn perturbed(seed: u64, cfg: IatConfig, scale: f64) -> IatParams<f64> {
    let mut p = IatParams::<f64>::init(cfg, &mut stream(seed, 1)).unwrap();
    let mut rng = stream(seed, 2);
    for param in p.params_mut() {
        for v in param.value.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    p
}

// ------------------------------------------------------------- reference model

type Planes = Vec<Vec<f64>>;

struct Ref<'a> {
    p: &'a IatParams<f64>,
}

impl Ref<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.p.get(name).value.data()
    }

    fn shape(&self, name: &str) -> Vec<usize> {
        self.p.get(name).value.shape().to_vec()
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&self, x: &Planes, h: usize, w: usize, prefix: &str, stride: usize, pad: usize, groups: usize) -> (Planes, usize, usize) {
        let ws = self.shape(&format!("{prefix}.weight"));
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        let wt = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let cout_g = cout / groups;
        let mut out = vec![vec![0.0; oh * ow]; cout];
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * cin_g + cl) * k + ky) * k + kx] * x[ci][iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[co][oy * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    fn light_norm(&self, x: &Planes, prefix: &str) -> Planes {
        let c = x.len();
        let (a, b, t) = (
            self.t(&format!("{prefix}.a")),
            self.t(&format!("{prefix}.b")),
            self.t(&format!("{prefix}.t")),
        );
        let n = x[0].len();
        let mut out = vec![vec![0.0; n]; c];
        for i in 0..n {
            for co in 0..c {
                out[co][i] = (0..c).map(|ci| t[co * c + ci] * (a[ci] * x[ci][i] + b[ci])).sum();
            }
        }
        out
    }

    fn pem(&self, x: &Planes, h: usize, w: usize, prefix: &str) -> Planes {
        let c = x.len();
        let f = |s: &str| format!("{prefix}.{s}");
        let pos = self.conv(x, h, w, &f("pos_dw"), 1, 1, c).0;
        let u = add(x, &pos);
        let n1 = self.light_norm(&u, &f("norm1"));
        let h1 = gelu(&self.conv(&n1, h, w, &f("pw1"), 1, 0, 1).0);
        let h1 = gelu(&self.conv(&h1, h, w, &f("dw"), 1, 1, c).0);
        let h1 = scale_channels(&self.conv(&h1, h, w, &f("pw2"), 1, 0, 1).0, self.t(&f("k1")));
        let v = add(&u, &h1);
        let n2 = self.light_norm(&v, &f("norm2"));
        let h2 = gelu(&self.conv(&n2, h, w, &f("mix1"), 1, 0, 1).0);
        let h2 = scale_channels(&self.conv(&h2, h, w, &f("mix2"), 1, 0, 1).0, self.t(&f("k2")));
        add(&v, &h2)
    }

    fn forward(&self, img: &Planes, h: usize, w: usize) -> Planes {
        let cfg = self.p.config();
        let stem = self.conv(img, h, w, "local.stem", 1, 1, 1).0;
        let mut feats = Vec::new();
        for stack in ["m_stack", "a_stack"] {
            let mut x = stem.clone();
            for i in 0..cfg.blocks {
                x = self.pem(&x, h, w, &format!("local.{stack}.{i}"));
            }
            feats.push(add(&x, &stem));
        }
        let m: Planes = self.conv(&feats[0], h, w, "local.m_head", 1, 1, 1).0.iter().map(|p| p.iter().map(|v| v.max(0.0)).collect()).collect();
        let a: Planes = self.conv(&feats[1], h, w, "local.a_head", 1, 1, 1).0.iter().map(|p| p.iter().map(|v| v.tanh()).collect()).collect();

        let (e1, h1, w1) = self.conv(img, h, w, "global.encoder.conv1", 2, 1, 1);
        let (e2, h2, w2) = self.conv(&gelu(&e1), h1, w1, "global.encoder.conv2", 2, 1, 1);
        let feats = gelu(&e2);
        let d = cfg.dim;
        let pos = self.conv(&feats, h2, w2, "global.gpm.pos_dw", 1, 1, d).0;
        let kv = add(&feats, &pos);
        let n = h2 * w2;
        let tokens: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|c| kv[c][i]).collect()).collect();
        let queries: Vec<Vec<f64>> = self.t("global.gpm.queries").chunks(d).map(|r| r.to_vec()).collect();
        let q = self.linear(&queries, "global.gpm.w_q");
        let k = self.linear(&tokens, "global.gpm.w_k");
        let v = self.linear(&tokens, "global.gpm.w_v");
        let mut ctx = vec![vec![0.0; d]; 10];
        for qi in 0..10 {
            let scores: Vec<f64> = (0..n).map(|j| dotp(&q[qi], &k[j]) / (d as f64).sqrt()).collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for c in 0..d {
                    ctx[qi][c] += e[j] / z * v[j][c];
                }
            }
        }
        let proj = self.linear(&ctx, "global.gpm.w_out");
        let zq: Vec<Vec<f64>> = proj.iter().zip(&queries).map(|(p, q)| p.iter().zip(q).map(|(a, b)| a + b).collect()).collect();
        let t1: Vec<Vec<f64>> = self.linear(&zq, "global.gpm.ffn1").iter().map(|r| r.iter().map(|&x| gelu1(x)).collect()).collect();
        let t = self.linear(&t1, "global.gpm.ffn2");
        let hw = self.linear(&t[..9], "global.gpm.head_w");
        let hg = self.linear(&t[9..], "global.gpm.head_g");
        let mut wm = [[0.0; 3]; 3];
        for i in 0..9 {
            wm[i / 3][i % 3] = hw[i][0] + if i / 3 == i % 3 { 1.0 } else { 0.0 };
        }
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let gamma = 1.0 + softplus(2.0 * hg[0][0]) - 2f64.ln();

        let mut out = vec![vec![0.0; h * w]; 3];
        for i in 0..h * w {
            let f: Vec<f64> = (0..3).map(|c| img[c][i] * m[c][i] + a[c][i]).collect();
            for c in 0..3 {
                let mixed = (0..3).map(|j| wm[c][j] * f[j]).sum::<f64>();
                out[c][i] = mixed.max(1e-8).powf(gamma);
            }
        }
        out
    }

    fn linear(&self, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
        let ws = self.shape(&format!("{prefix}.weight"));
        let (din, dout) = (ws[0], ws[1]);
        let wt = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| (0..dout).map(|o| b[o] + (0..din).map(|i| row[i] * wt[i * dout + o]).sum::<f64>()).collect())
            .collect()
    }
}

fn gelu1(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu(x: &Planes) -> Planes {
    x.iter().map(|p| p.iter().map(|&v| gelu1(v)).collect()).collect()
}

fn add(a: &Planes, b: &Planes) -> Planes {
    a.iter().zip(b).map(|(p, q)| p.iter().zip(q).map(|(x, y)| x + y).collect()).collect()
}

fn scale_channels(x: &Planes, k: &[f64]) -> Planes {
    x.iter().zip(k).map(|(p, s)| p.iter().map(|v| v * s).collect()).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn planes(t: &Tensor<f64>) -> Planes {
    let s = t.shape();
    let plane = s[2] * s[3];
    t.data().chunks(plane).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------- tests

#[test]
fn identity_at_init() {
    let p = IatParams::<f32>::init(IatConfig::default(), &mut stream(5, 1)).unwrap();
    for (h, w, seed) in [(32, 48, 1), (17, 9, 2)] {
        let img = random_image(h, w, seed);
        let x = image_to_tensor::<f32>(&img);
        let out = iat_forward(&Eager, &x, &p, false).unwrap();
        assert!(out.out.max_abs_diff(&x) < 1e-6);
        assert!(out.m.data().iter().all(|&v| v == 1.0));
        assert!(out.a.data().iter().all(|&v| v == 0.0));
        let gp = out.global.unwrap().values(&Eager);
        assert_eq!(gp, GlobalParams::identity());
        assert_eq!(gp.gamma.to_bits(), 1.0f64.to_bits());
    }
}

#[test]
fn resolution_polymorphism() {
    let p = IatParams::<f32>::init(IatConfig::default(), &mut stream(5, 1)).unwrap();
    for (h, w) in [(16, 16), (37, 53), (4, 4), (5, 11)] {
        let x = Tensor::<f32>::full([1, 3, h, w], 0.3);
        for local_only in [false, true] {
            let out = iat_forward(&Eager, &x, &p, local_only).unwrap();
            assert_eq!(out.out.shape(), &[1, 3, h, w]);
            assert_eq!(out.m.shape(), &[1, 3, h, w]);
        }
    }
    for (h, w) in [(1, 1), (7, 13)] {
        let x = Tensor::<f32>::full([1, 16, h, w], 0.3);
        assert_eq!(pem_forward(&Eager, &x, &p, "local.m_stack.0").unwrap().shape(), &[1, 16, h, w]);
    }
}

#[test]
fn matches_reference_implementation() {
    for (cfg, seed) in [(IatConfig::default(), 3), (IatConfig { channels: 8, blocks: 2, dim: 16 }, 4)] {
        let p = perturbed(seed, cfg, 0.2);
        for (h, w) in [(8, 8), (9, 6)] {
            let x = image_to_tensor::<f64>(&random_image(h, w, seed));
            let got = iat_forward(&Eager, &x, &p, false).unwrap().out;
            let want = Ref { p: &p }.forward(&planes(&x), h, w);
            let err = got.data().iter().zip(want.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{cfg:?} {h}×{w}: max diff {err}");
        }
    }
}

#[test]
fn light_norm_examples() {
    let mut p = IatParams::<f64>::init(IatConfig::default(), &mut stream(0, 1)).unwrap();
    let x = Tensor::from_fn([1, 16, 3, 3], |i| i as f64 * 0.01);
    assert_eq!(light_norm(&Eager, &x, &p, "local.m_stack.0.norm1").unwrap(), x);
    p.get_mut("local.m_stack.0.norm1.a").unwrap().value = Tensor::full([1, 16, 1, 1], 2.0);
    let half = Tensor::full([1, 16, 3, 3], 0.5);
    assert!(light_norm(&Eager, &half, &p, "local.m_stack.0.norm1").unwrap().data().iter().all(|&v| v == 1.0));

    let p = perturbed(9, IatConfig::default(), 0.3);
    let x = Tensor::from_fn([1, 16, 4, 5], |i| (i as f64 * 0.31).sin());
    let got = light_norm(&Eager, &x, &p, "local.a_stack.1.norm2").unwrap();
    let want = Ref { p: &p }.light_norm(&planes(&x), "local.a_stack.1.norm2");
    let err = got.data().iter().zip(want.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12);
}

#[test]
fn pem_with_zero_convs_is_residual() {
    let mut p = IatParams::<f64>::init(IatConfig::default(), &mut stream(0, 1)).unwrap();
    for param in p.params_mut() {
        if param.name.starts_with("local.m_stack.0.") && (param.name.ends_with(".weight") || param.name.ends_with(".bias")) {
            param.value = Tensor::zeros(param.value.shape());
        }
    }
    let x = Tensor::from_fn([1, 16, 5, 4], |i| (i as f64 * 0.7).cos());
    assert_eq!(pem_forward(&Eager, &x, &p, "local.m_stack.0").unwrap(), x);
}

#[test]
fn local_maps_respect_ranges() {
    for seed in 0..4 {
        let p = perturbed(seed, IatConfig::default(), 1.0);
        let x = image_to_tensor::<f64>(&random_image(6, 7, seed));
        let out = iat_forward(&Eager, &x, &p, true).unwrap();
        assert!(out.m.data().iter().all(|&v| v >= 0.0));
        assert!(out.a.data().iter().all(|&v| v.abs() <= 1.0));
        let manual = Eager.add(&Eager.mul(&x, &out.m).unwrap(), &out.a).unwrap();
        assert_eq!(out.out, manual);
        assert!(out.global.is_none());
    }
}

#[test]
fn compose_matches_scalar_loop() {
    let mut rng = stream(4, 4);
    let mut r = |shape: [usize; 4], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
    let x = r([1, 3, 8, 8], 0.0, 1.0);
    let m = r([1, 3, 8, 8], 0.5, 2.0);
    let a = r([1, 3, 8, 8], -0.2, 0.2);
    let wm = [[0.9, 0.05, 0.1], [-0.1, 1.1, 0.0], [0.02, 0.03, 0.95]];
    let gp = GlobalParams::new(wm, 0.7).unwrap();
    let (_, out) = compose_iat(&Eager, &x, &m, &a, &gp.to_nodes(&Eager)).unwrap();
    for i in 0..64 {
        let f: Vec<f64> = (0..3).map(|c| x.data()[c * 64 + i] * m.data()[c * 64 + i] + a.data()[c * 64 + i]).collect();
        for c in 0..3 {
            let want = (0..3).map(|j| wm[c][j] * f[j]).sum::<f64>().max(1e-8).powf(0.7);
            assert!((out.data()[c * 64 + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn deterministic_output() {
    let p = IatParams::<f32>::init(IatConfig::default(), &mut stream(1, 1)).unwrap();
    let x = image_to_tensor::<f32>(&random_image(12, 10, 3));
    let a = iat_forward(&Eager, &x, &p, false).unwrap().out;
    let b = iat_forward(&Eager, &x, &p, false).unwrap().out;
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

/// Full model on an 8×8 image with smooth-L1 against a random target:
/// taped gradients against central differences of the eager forward.
/// `stride` selects every n-th scalar of each tensor (1 = all).
pub fn model_gradient_check(stride: usize) -> (f64, String) {
    let p = perturbed(21, IatConfig::default(), 0.1);
    let x = image_to_tensor::<f64>(&random_image(8, 8, 22));
    let target = image_to_tensor::<f64>(&random_image(8, 8, 23));
    let loss_of = |params: &IatParams<f64>| -> f64 {
        let out = iat_forward(&Eager, &x, params, false).unwrap().out;
        smooth_l1(&Eager, &out, &target).unwrap().item().unwrap()
    };
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(target.clone());
    let out = iat_forward(&tape, &xv, &p, false).unwrap().out;
    let loss = smooth_l1(&tape, &out, &tv).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-4;
    let mut worst = (0.0, String::new());
    let mut probe = p.clone();
    for (k, param) in p.params().iter().enumerate() {
        let analytic = grads.param(&param.name).expect("every parameter has a gradient");
        assert_eq!(analytic.shape(), param.value.shape());
        for i in (0..param.numel()).step_by(stride) {
            let orig = param.value.data()[i];
            probe.params_mut()[k].value.data_mut()[i] = orig + h;
            let up = loss_of(&probe);
            probe.params_mut()[k].value.data_mut()[i] = orig - h;
            let down = loss_of(&probe);
            probe.params_mut()[k].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(analytic.data()[i], numeric, 1e-6);
            if e > worst.0 {
                worst = (e, format!("{}[{i}] analytic {} numeric {numeric}", param.name, analytic.data()[i]));
            }
        }
    }
    worst
}

#[test]
fn model_gradients_match_finite_differences_sampled() {
    let (err, at) = model_gradient_check(37);
    assert!(err < 1e-3, "worst relative error {err:e} at {at}");
}

#[test]
fn every_parameter_gets_gradient_after_perturbation() {
    let p = perturbed(5, IatConfig::default(), 0.1);
    let x = image_to_tensor::<f64>(&random_image(8, 8, 6));
    let tape = Tape::new();
    let xv = tape.constant(x);
    let out = iat_forward(&tape, &xv, &p, false).unwrap().out;
    let loss = tape.mean_all(&tape.mul(&out, &out).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    for param in p.params() {
        let g = grads.param(&param.name).unwrap();
        assert!(g.data().iter().any(|v| v.abs() > 0.0), "{} has zero gradient", param.name);
    }
}

