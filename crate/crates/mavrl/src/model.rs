//! Encoder / classifier architectures with a differentiation contract good
//! for inner-gradient adaptation and outer meta-gradients.
//!
//! Three encoder families:
//! - `conv4-toy`: four conv/norm/relu/pool blocks, sized for 16x16 fixtures
//!   and cheap finite-difference checking;
//! - `resnet12`: the standard four-stage residual backbone, configurable
//!   widths;
//! - `linear-toy`: flatten + single linear map, used by closed-form attack
//!   oracles and shape tests.
//!
//! Normalisation is group-style (batch-statistics free) so 25-image support
//! sets behave; inputs are raw `[0,1]` pixels with no mean/std whitening.

use crate::autodiff::{Graph, UnfoldSpec, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, MetaParams, ParamSet};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderFamily {
    #[serde(rename = "conv4-toy")]
    Conv4Toy,
    #[serde(rename = "resnet12")]
    ResNet12,
    #[serde(rename = "linear-toy")]
    LinearToy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPolicy {
    /// Group normalisation with the configured group count.
    Group,
    /// No normalisation layers.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: EncoderFamily,
    /// Channel widths per block (conv4-toy) or per stage (resnet12).
    pub widths: Vec<usize>,
    pub feature_dim: usize,
    /// Output size of the classifier head.
    pub n_way: usize,
    /// Input channel count.
    pub in_channels: usize,
    pub norm: NormPolicy,
    /// Channels per group divide evenly into every width.
    pub groups: usize,
}

impl ArchConfig {
    pub fn conv4_toy(n_way: usize) -> Self {
        ArchConfig {
            family: EncoderFamily::Conv4Toy,
            widths: vec![8, 8, 8, 8],
            feature_dim: 16,
            n_way,
            in_channels: 3,
            norm: NormPolicy::Group,
            groups: 2,
        }
    }

    pub fn linear_toy(in_dim: usize, feature_dim: usize, n_way: usize) -> Self {
        ArchConfig {
            family: EncoderFamily::LinearToy,
            widths: vec![],
            feature_dim,
            n_way,
            in_channels: in_dim,
            norm: NormPolicy::None,
            groups: 1,
        }
    }

    pub fn resnet12(n_way: usize) -> Self {
        ArchConfig {
            family: EncoderFamily::ResNet12,
            widths: vec![64, 128, 256, 512],
            feature_dim: 512,
            n_way,
            in_channels: 3,
            norm: NormPolicy::Group,
            groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.n_way == 0 {
            return Err(Error::Config("n_way must be positive".into()));
        }
        if self.family != EncoderFamily::LinearToy && self.widths.is_empty() {
            return Err(Error::Config("widths must be non-empty".into()));
        }
        if self.norm == NormPolicy::Group {
            for &w in &self.widths {
                if w % self.groups != 0 {
                    return Err(Error::Config(format!(
                        "group count {} does not divide width {w}",
                        self.groups
                    )));
                }
            }
        }
        Ok(())
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Encoder parameters for the configured family, fan-in-scaled normal init.
fn init_theta(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut theta = ParamSet::new();
    match arch.family {
        EncoderFamily::LinearToy => {
            let std = (1.0 / arch.in_channels as f64).sqrt();
            theta.insert("lin.w", randn(&[arch.feature_dim, arch.in_channels], std, rng));
            theta.insert("lin.b", ArrayD::zeros(IxDyn(&[arch.feature_dim])));
        }
        EncoderFamily::Conv4Toy => {
            let mut ic = arch.in_channels;
            for (i, &oc) in arch.widths.iter().enumerate() {
                let fan_in = ic * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                theta.insert(format!("block{i}.conv.w"), randn(&[oc, ic, 3, 3], std, rng));
                theta.insert(format!("block{i}.conv.b"), ArrayD::zeros(IxDyn(&[oc])));
                if arch.norm == NormPolicy::Group {
                    theta.insert(format!("block{i}.norm.g"), ArrayD::from_elem(IxDyn(&[oc]), 1.0));
                    theta.insert(format!("block{i}.norm.b"), ArrayD::zeros(IxDyn(&[oc])));
                }
                ic = oc;
            }
            let std = (1.0 / ic as f64).sqrt();
            theta.insert("head.w", randn(&[arch.feature_dim, ic], std, rng));
            theta.insert("head.b", ArrayD::zeros(IxDyn(&[arch.feature_dim])));
        }
        EncoderFamily::ResNet12 => {
            let mut ic = arch.in_channels;
            for (s, &oc) in arch.widths.iter().enumerate() {
                let mut cin = ic;
                for j in 0..3 {
                    let fan_in = cin * 9;
                    let std = (2.0 / fan_in as f64).sqrt();
                    theta.insert(
                        format!("stage{s}.conv{j}.w"),
                        randn(&[oc, cin, 3, 3], std, rng),
                    );
                    theta.insert(format!("stage{s}.conv{j}.b"), ArrayD::zeros(IxDyn(&[oc])));
                    if arch.norm == NormPolicy::Group {
                        theta.insert(format!("stage{s}.norm{j}.g"), ArrayD::from_elem(IxDyn(&[oc]), 1.0));
                        theta.insert(format!("stage{s}.norm{j}.b"), ArrayD::zeros(IxDyn(&[oc])));
                    }
                    cin = oc;
                }
                let std = (2.0 / ic as f64).sqrt();
                theta.insert(format!("stage{s}.skip.w"), randn(&[oc, ic, 1, 1], std, rng));
                theta.insert(format!("stage{s}.skip.b"), ArrayD::zeros(IxDyn(&[oc])));
                if arch.norm == NormPolicy::Group {
                    theta.insert(format!("stage{s}.skipnorm.g"), ArrayD::from_elem(IxDyn(&[oc]), 1.0));
                    theta.insert(format!("stage{s}.skipnorm.b"), ArrayD::zeros(IxDyn(&[oc])));
                }
                ic = oc;
            }
            let std = (1.0 / ic as f64).sqrt();
            theta.insert("head.w", randn(&[arch.feature_dim, ic], std, rng));
            theta.insert("head.b", ArrayD::zeros(IxDyn(&[arch.feature_dim])));
        }
    }
    theta
}

/// Shared meta-initialisation: encoder, linear classifier, and inner
/// learning rate `alpha` filled with `inner_lr0`. `alpha` mirrors the
/// encoder only unless `adapt_phi` (the AQ baseline inner rule) is set.
pub fn init_params(
    arch: &ArchConfig,
    inner_lr0: f64,
    adapt_phi: bool,
    seed: u64,
) -> Result<MetaParams> {
    arch.validate()?;
    let mut rng = crate::seeding::rng(seed, &[crate::seeding::stage::INIT]);
    let theta = init_theta(arch, &mut rng);
    let mut phi = ParamSet::new();
    let std = (1.0 / arch.feature_dim as f64).sqrt();
    phi.insert("fc.w", randn(&[arch.n_way, arch.feature_dim], std, &mut rng));
    phi.insert("fc.b", ArrayD::zeros(IxDyn(&[arch.n_way])));
    let alpha_theta = theta.like_filled(inner_lr0);
    let alpha_phi = adapt_phi.then(|| phi.like_filled(inner_lr0));
    Ok(MetaParams {
        theta,
        phi,
        alpha_theta,
        alpha_phi,
    })
}

/// 3x3 (or 1x1) convolution, stride 1, same padding, via unfold + matmul.
fn conv2d(g: &Graph, x: Var, w: Var, b: Var, kernel: usize) -> Var {
    let xs = g.shape(x);
    let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let spec = UnfoldSpec {
        channels: c,
        height: h,
        width: wd,
        kernel,
        stride: 1,
        pad: kernel / 2,
    };
    let l = spec.out_h() * spec.out_w();
    let m = c * kernel * kernel;
    let oc = g.shape(w)[0];
    let u = g.unfold(x, spec); // [B, M, L]
    let u = g.permute(u, &[0, 2, 1]);
    let u = g.reshape(u, &[batch * l, m]);
    let w2 = g.reshape(w, &[oc, m]);
    let w2t = g.permute(w2, &[1, 0]);
    let y = g.matmul(u, w2t); // [B*L, OC]
    let y = g.reshape(y, &[batch, l, oc]);
    let y = g.permute(y, &[0, 2, 1]);
    let y = g.reshape(y, &[batch, oc, spec.out_h(), spec.out_w()]);
    let b4 = g.reshape(b, &[1, oc, 1, 1]);
    g.add(y, b4)
}

/// Group normalisation built from differentiable primitives, so the whole
/// thing is twice-differentiable without special casing.
fn group_norm(g: &Graph, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
    let xs = g.shape(x);
    let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let per = c / groups * h * w;
    let xg = g.reshape(x, &[batch, groups, per]);
    let mean = g.mul_const(g.sum_keep(xg, &[2]), 1.0 / per as f64);
    let centered = g.sub(xg, mean);
    let sq = g.mul(centered, centered);
    let var = g.mul_const(g.sum_keep(sq, &[2]), 1.0 / per as f64);
    let std = g.sqrt(g.add_const(var, GROUP_NORM_EPS));
    let normed = g.div(centered, std);
    let normed = g.reshape(normed, &[batch, c, h, w]);
    let gamma4 = g.reshape(gamma, &[1, c, 1, 1]);
    let beta4 = g.reshape(beta, &[1, c, 1, 1]);
    g.add(g.mul(normed, gamma4), beta4)
}

/// 2x2 average pool (skips when the spatial side is odd or already 1).
fn avg_pool2(g: &Graph, x: Var) -> Var {
    let xs = g.shape(x);
    let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return x;
    }
    let r = g.reshape(x, &[batch, c, h / 2, 2, w / 2, 2]);
    let s = g.sum_axes(r, &[3, 5]);
    g.mul_const(s, 0.25)
}

fn global_avg_pool(g: &Graph, x: Var) -> Var {
    let xs = g.shape(x);
    let hw = (xs[2] * xs[3]) as f64;
    let s = g.sum_axes(x, &[2, 3]);
    g.mul_const(s, 1.0 / hw)
}

fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Var {
    let wt = g.permute(w, &[1, 0]);
    let y = g.matmul(x, wt);
    let out_dim = g.shape(w)[0];
    let b2 = g.reshape(b, &[1, out_dim]);
    g.add(y, b2)
}

/// Encode an image batch `[B, C, H, W]` into features `[B, d]`.
///
/// Differentiable w.r.t. both the bound parameters and the images.
pub fn encode(g: &Graph, arch: &ArchConfig, theta: &BoundParams, images: Var) -> Result<Var> {
    let shape = g.shape(images);
    if shape.len() != 4 && arch.family != EncoderFamily::LinearToy {
        return Err(Error::ShapeMismatch {
            expected: "[B, C, H, W]".into(),
            got: format!("{shape:?}"),
        });
    }
    match arch.family {
        EncoderFamily::LinearToy => {
            let batch = shape[0];
            let flat: usize = shape[1..].iter().product();
            if flat != arch.in_channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("flattened dim {}", arch.in_channels),
                    got: format!("{flat}"),
                });
            }
            let x = g.reshape(images, &[batch, flat]);
            Ok(linear(g, x, theta.get("lin.w"), theta.get("lin.b")))
        }
        EncoderFamily::Conv4Toy => {
            if shape[1] != arch.in_channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} channels", arch.in_channels),
                    got: format!("{} channels", shape[1]),
                });
            }
            let mut x = images;
            for i in 0..arch.widths.len() {
                x = conv2d(
                    g,
                    x,
                    theta.get(&format!("block{i}.conv.w")),
                    theta.get(&format!("block{i}.conv.b")),
                    3,
                );
                if arch.norm == NormPolicy::Group {
                    x = group_norm(
                        g,
                        x,
                        theta.get(&format!("block{i}.norm.g")),
                        theta.get(&format!("block{i}.norm.b")),
                        arch.groups,
                    );
                }
                x = g.relu(x);
                x = avg_pool2(g, x);
            }
            let x = global_avg_pool(g, x);
            Ok(linear(g, x, theta.get("head.w"), theta.get("head.b")))
        }
        EncoderFamily::ResNet12 => {
            if shape[1] != arch.in_channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} channels", arch.in_channels),
                    got: format!("{} channels", shape[1]),
                });
            }
            let mut x = images;
            for s in 0..arch.widths.len() {
                let mut main = x;
                for j in 0..3 {
                    main = conv2d(
                        g,
                        main,
                        theta.get(&format!("stage{s}.conv{j}.w")),
                        theta.get(&format!("stage{s}.conv{j}.b")),
                        3,
                    );
                    if arch.norm == NormPolicy::Group {
                        main = group_norm(
                            g,
                            main,
                            theta.get(&format!("stage{s}.norm{j}.g")),
                            theta.get(&format!("stage{s}.norm{j}.b")),
                            arch.groups,
                        );
                    }
                    if j < 2 {
                        main = g.relu(main);
                    }
                }
                let mut skip = conv2d(
                    g,
                    x,
                    theta.get(&format!("stage{s}.skip.w")),
                    theta.get(&format!("stage{s}.skip.b")),
                    1,
                );
                if arch.norm == NormPolicy::Group {
                    skip = group_norm(
                        g,
                        skip,
                        theta.get(&format!("stage{s}.skipnorm.g")),
                        theta.get(&format!("stage{s}.skipnorm.b")),
                        arch.groups,
                    );
                }
                x = g.relu(g.add(main, skip));
                x = avg_pool2(g, x);
            }
            let x = global_avg_pool(g, x);
            Ok(linear(g, x, theta.get("head.w"), theta.get("head.b")))
        }
    }
}

/// Linear classifier head: features `[B, d]` to logits `[B, N]`.
pub fn classify(g: &Graph, phi: &BoundParams, features: Var) -> Result<Var> {
    let w = phi.get("fc.w");
    let d_expected = g.shape(w)[1];
    let d_got = g.shape(features)[1];
    if d_expected != d_got {
        return Err(Error::ShapeMismatch {
            expected: format!("feature dim {d_expected}"),
            got: format!("{d_got}"),
        });
    }
    Ok(linear(g, features, w, phi.get("fc.b")))
}

/// Grad-free convenience: encode a raw batch with concrete parameters.
pub fn encode_arrays(
    arch: &ArchConfig,
    theta: &ParamSet,
    images: &ndarray::Array4<f64>,
) -> Result<ndarray::Array2<f64>> {
    let g = Graph::new();
    let bound = theta.bind(&g, false);
    let x = g.constant(images.clone().into_dyn());
    let f = encode(&g, arch, &bound, x)?;
    let v = g.value(f);
    Ok(v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

/// Grad-free convenience: logits for a raw batch.
pub fn forward_logits_arrays(
    arch: &ArchConfig,
    theta: &ParamSet,
    phi: &ParamSet,
    images: &ndarray::Array4<f64>,
) -> Result<ndarray::Array2<f64>> {
    let g = Graph::new();
    let theta_b = theta.bind(&g, false);
    let phi_b = phi.bind(&g, false);
    let x = g.constant(images.clone().into_dyn());
    let f = encode(&g, arch, &theta_b, x)?;
    let logits = classify(&g, &phi_b, f)?;
    let v = g.value(logits);
    Ok(v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            family: EncoderFamily::Conv4Toy,
            widths: vec![4, 4],
            feature_dim: 6,
            n_way: 3,
            in_channels: 3,
            norm: NormPolicy::Group,
            groups: 2,
        }
    }

    #[test]
    fn init_fills_alpha_with_inner_lr0() {
        let arch = toy_arch();
        let meta = init_params(&arch, 0.005, false, 7).unwrap();
        for (_, a) in meta.alpha_theta.iter() {
            assert!(a.iter().all(|&v| v == 0.005));
        }
        assert!(meta.alpha_phi.is_none());
        let meta_aq = init_params(&arch, 0.005, true, 7).unwrap();
        assert!(meta_aq.alpha_phi.is_some());
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let arch = toy_arch();
        let a = init_params(&arch, 0.01, false, 3).unwrap();
        let b = init_params(&arch, 0.01, false, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&arch, 0.01, false, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn conv4_feature_shape_matches_config() {
        // Shape-arithmetic oracle: global pooling collapses spatial dims so
        // features are [B, feature_dim] regardless of input resolution.
        let arch = ArchConfig {
            feature_dim: 16,
            ..ArchConfig::conv4_toy(5)
        };
        let meta = init_params(&arch, 0.005, false, 1).unwrap();
        let imgs = Array4::from_elem((2, 3, 16, 16), 0.3);
        let f = encode_arrays(&arch, &meta.theta, &imgs).unwrap();
        assert_eq!(f.shape(), &[2, 16]);
    }

    #[test]
    fn zero_weight_linear_toy_encodes_to_zero() {
        let arch = ArchConfig::linear_toy(12, 4, 2);
        let meta = init_params(&arch, 0.01, false, 5).unwrap();
        let zero_theta = meta.theta.like_filled(0.0);
        let imgs = Array4::from_elem((3, 3, 2, 2), 0.7);
        let f = encode_arrays(&arch, &zero_theta, &imgs).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_matches_matmul_oracle() {
        let g = Graph::new();
        let mut phi = ParamSet::new();
        let w = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 0.5);
        let b = ndarray::arr1(&[0.1, -0.2, 0.3]);
        phi.insert("fc.w", w.clone().into_dyn());
        phi.insert("fc.b", b.clone().into_dyn());
        let feats = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.25);
        let bound = phi.bind(&g, false);
        let fv = g.constant(feats.clone().into_dyn());
        let logits = classify(&g, &bound, fv).unwrap();
        let got = g.value(logits);
        // Independent oracle: explicit loops.
        for i in 0..2 {
            for k in 0..3 {
                let mut acc = b[k];
                for j in 0..4 {
                    acc += feats[[i, j]] * w[[k, j]];
                }
                assert!((got[[i, k]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn classify_rejects_dim_mismatch() {
        let g = Graph::new();
        let mut phi = ParamSet::new();
        phi.insert("fc.w", Array2::<f64>::zeros((3, 4)).into_dyn());
        phi.insert("fc.b", ndarray::arr1(&[0.0, 0.0, 0.0]).into_dyn());
        let bound = phi.bind(&g, false);
        let feats = g.constant(Array2::<f64>::zeros((2, 5)).into_dyn());
        assert!(matches!(
            classify(&g, &bound, feats),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encode_rejects_channel_mismatch() {
        let arch = toy_arch();
        let meta = init_params(&arch, 0.005, false, 1).unwrap();
        let imgs = Array4::from_elem((1, 4, 8, 8), 0.5);
        assert!(matches!(
            encode_arrays(&arch, &meta.theta, &imgs),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encode_pixel_gradient_matches_finite_difference() {
        let arch = toy_arch();
        let meta = init_params(&arch, 0.005, false, 11).unwrap();
        let imgs = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, i, j)| {
            0.3 + 0.02 * (c as f64) + 0.01 * ((i * 8 + j) as f64 % 7.0)
        });

        let eval = |pix: &Array4<f64>, want_grad: bool| -> (f64, Option<ArrayD<f64>>) {
            let g = Graph::new();
            let bound = meta.theta.bind(&g, false);
            let x = g.param(pix.clone().into_dyn());
            let f = encode(&g, &arch, &bound, x).unwrap();
            let sq = g.mul(f, f);
            let s = g.sum_all(sq);
            if want_grad {
                let gx = g.grad(s, &[x])[0];
                (g.scalar(s), Some((*g.value(gx)).clone()))
            } else {
                (g.scalar(s), None)
            }
        };
        let (_, grad) = eval(&imgs, true);
        let grad = grad.unwrap();
        let h = 1e-3;
        for &idx in &[0usize, 17, 63, 100, 191] {
            let mut p = imgs.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            let mut m = imgs.clone();
            m.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&p, false).0 - eval(&m, false).0) / (2.0 * h);
            let ad = grad.as_slice().unwrap()[idx];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!(
                (ad - fd).abs() / denom < 1e-3,
                "pixel grad mismatch at {idx}: ad={ad} fd={fd}"
            );
        }
    }

    #[test]
    fn resnet12_forward_shape() {
        let arch = ArchConfig {
            widths: vec![4, 8],
            feature_dim: 8,
            groups: 2,
            ..ArchConfig::resnet12(5)
        };
        let meta = init_params(&arch, 0.005, false, 2).unwrap();
        let imgs = Array4::from_elem((2, 3, 8, 8), 0.4);
        let f = encode_arrays(&arch, &meta.theta, &imgs).unwrap();
        assert_eq!(f.shape(), &[2, 8]);
        assert!(f.iter().all(|v| v.is_finite()));
    }
}
