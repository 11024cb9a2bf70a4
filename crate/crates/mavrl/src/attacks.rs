//! L-infinity perturbation machinery: projection, class-wise PGD on the
//! cross-entropy, the single-encoder self-supervised attack, and the
//! multi-view latent attack over bootstrapped encoder pairs.
//!
//! All attacks are pure functions of (parameters, inputs, config, seed);
//! parameters enter the attack graphs as constants, so no gradient ever
//! reaches them. `sign(0) = 0`, perturbations are clamped into the epsilon
//! ball after every step, and pixel clamping (when enabled) is folded into
//! the perturbation so `adv = clean + delta` holds exactly.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::contrastive_sim_loss;
use crate::model::{classify, encode, encode_arrays, ArchConfig};
use crate::params::ParamSet;
use crate::seeding::{self, stage};
use ndarray::{Array2, Array4};
use rand::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    /// delta^0 = 0 (so a 0-step attack is exactly the identity).
    Zero,
    /// delta^0 ~ U(-epsilon, epsilon).
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity radius, pixel units.
    pub epsilon: f64,
    /// Step size, pixel units.
    pub gamma: f64,
    pub steps: usize,
    /// Contrastive temperature for the latent attacks.
    pub temperature: f64,
    pub init: InitPolicy,
    pub clamp_pixels: bool,
}

impl AttackConfig {
    /// Meta-training attack: eps 8/255, step 2/255, 7 steps.
    pub fn train_default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            gamma: 2.0 / 255.0,
            steps: 7,
            temperature: 0.5,
            init: InitPolicy::Zero,
            clamp_pixels: true,
        }
    }

    /// Evaluation attack: PGD-20 with eps 8/255, step 8/2550.
    pub fn eval_default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            gamma: 8.0 / 2550.0,
            steps: 20,
            temperature: 0.5,
            init: InitPolicy::Zero,
            clamp_pixels: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config("attack epsilon must be >= 0".into()));
        }
        if self.steps > 0 && self.gamma <= 0.0 {
            return Err(Error::Config("attack gamma must be > 0 when steps > 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("attack temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn descriptor(&self, kind: &str) -> String {
        format!(
            "{kind}-{} eps={:.6} gamma={:.6} init={:?} clamp={}",
            self.steps, self.epsilon, self.gamma, self.init, self.clamp_pixels
        )
    }
}

/// Paired clean/adversarial batches per view with the perturbations that
/// produced them. Single-view attacks leave the second view empty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversarialBatch {
    pub clean_view1: Array4<f64>,
    pub adv_view1: Array4<f64>,
    pub delta1: Array4<f64>,
    pub clean_view2: Option<Array4<f64>>,
    pub adv_view2: Option<Array4<f64>>,
    pub delta2: Option<Array4<f64>>,
    /// Attack objective at each step's evaluation point.
    pub attack_loss_trace: Vec<f64>,
}

impl AdversarialBatch {
    fn single(clean: Array4<f64>, delta: Array4<f64>, trace: Vec<f64>) -> Self {
        let adv = &clean + &delta;
        AdversarialBatch {
            clean_view1: clean,
            adv_view1: adv,
            delta1: delta,
            clean_view2: None,
            adv_view2: None,
            delta2: None,
            attack_loss_trace: trace,
        }
    }

    fn dual(
        clean1: Array4<f64>,
        delta1: Array4<f64>,
        clean2: Array4<f64>,
        delta2: Array4<f64>,
        trace: Vec<f64>,
    ) -> Self {
        let adv1 = &clean1 + &delta1;
        let adv2 = &clean2 + &delta2;
        AdversarialBatch {
            clean_view1: clean1,
            adv_view1: adv1,
            delta1,
            clean_view2: Some(clean2),
            adv_view2: Some(adv2),
            delta2: Some(delta2),
            attack_loss_trace: trace,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Componentwise clamp of a perturbation into the epsilon ball. Idempotent.
pub fn project_linf(mut delta: Array4<f64>, epsilon: f64) -> Array4<f64> {
    delta.mapv_inplace(|d| d.clamp(-epsilon, epsilon));
    delta
}

fn init_delta(clean: &Array4<f64>, cfg: &AttackConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Array4<f64> {
    let mut delta = match cfg.init {
        InitPolicy::Zero => Array4::zeros(clean.raw_dim()),
        InitPolicy::Uniform => {
            let mut d = Array4::zeros(clean.raw_dim());
            if cfg.epsilon > 0.0 {
                d.mapv_inplace(|_| rng.random_range(-cfg.epsilon..=cfg.epsilon));
            }
            d
        }
    };
    delta = project_linf(delta, cfg.epsilon);
    if cfg.clamp_pixels {
        clamp_into_pixels(clean, &mut delta);
    }
    delta
}

/// Fold pixel-range clamping into delta so `clean + delta` stays in [0,1].
fn clamp_into_pixels(clean: &Array4<f64>, delta: &mut Array4<f64>) {
    ndarray::Zip::from(delta).and(clean).for_each(|d, &x| {
        *d = (x + *d).clamp(0.0, 1.0) - x;
    });
}

fn ascend_step(clean: &Array4<f64>, delta: &mut Array4<f64>, grad: &Array4<f64>, cfg: &AttackConfig) {
    ndarray::Zip::from(&mut *delta)
        .and(grad)
        .for_each(|d, &g| *d += cfg.gamma * sign(g));
    *delta = project_linf(std::mem::take(delta), cfg.epsilon);
    if cfg.clamp_pixels {
        clamp_into_pixels(clean, delta);
    }
}

/// Class-wise PGD: signed-gradient ascent on the cross-entropy of the
/// adapted model, projected into the epsilon ball each step.
pub fn pgd_classwise(
    arch: &ArchConfig,
    theta: &ParamSet,
    phi: &ParamSet,
    images: &Array4<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let mut rng = seeding::rng(seed, &[stage::ATTACK, 0]);
    let mut delta = init_delta(images, cfg, &mut rng);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let theta_b = theta.bind(&g, false);
        let phi_b = phi.bind(&g, false);
        let adv = g.param((images + &delta).into_dyn());
        let feats = encode(&g, arch, &theta_b, adv)?;
        let logits = classify(&g, &phi_b, feats)?;
        let loss = crate::losses::cross_entropy(&g, logits, labels)?;
        trace.push(g.scalar(loss));
        let grad = g.grad(loss, &[adv])[0];
        let grad4 = g
            .value(grad)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        ascend_step(images, &mut delta, &grad4, cfg);
    }
    Ok(AdversarialBatch::single(images.clone(), delta, trace))
}

/// Negative pool shared by the latent attacks: both clean view batches, each
/// encoded by its matching encoder (`enc2 = enc1` reproduces the
/// single-encoder variant). Pool row `i` is view 1 of instance `i`, row
/// `B + i` is view 2 of instance `i`; the mask drops both rows of the
/// anchor's own instance.
fn negative_pool(
    arch: &ArchConfig,
    enc1: &ParamSet,
    enc2: &ParamSet,
    t1: &Array4<f64>,
    t2: &Array4<f64>,
) -> Result<(Array2<f64>, Array2<bool>)> {
    let b = t1.shape()[0];
    if b < 2 {
        return Err(Error::NoNegatives);
    }
    let f1 = encode_arrays(arch, enc1, t1)?;
    let f2 = encode_arrays(arch, enc2, t2)?;
    let d = f1.shape()[1];
    let mut pool = Array2::zeros((2 * b, d));
    pool.slice_mut(ndarray::s![..b, ..]).assign(&f1);
    pool.slice_mut(ndarray::s![b.., ..]).assign(&f2);
    let mut mask = Array2::from_elem((b, 2 * b), true);
    for i in 0..b {
        mask[[i, i]] = false;
        mask[[i, b + i]] = false;
    }
    Ok((pool, mask))
}

/// Inner driver for both latent attacks. Anchor view `j` is perturbed to
/// maximize the contrastive loss against its positive (the *other* view's
/// clean images through the anchor's encoder) with the shared negative pool.
#[allow(clippy::too_many_arguments)]
fn latent_attack(
    arch: &ArchConfig,
    enc1: &ParamSet,
    enc2: &ParamSet,
    t1_q: &Array4<f64>,
    t2_q: &Array4<f64>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let (pool, mask) = negative_pool(arch, enc1, enc2, t1_q, t2_q)?;
    // Positives per Eq-style pairing: anchor encoder applied to the other
    // view's clean images.
    let pos1 = encode_arrays(arch, enc1, t2_q)?;
    let pos2 = encode_arrays(arch, enc2, t1_q)?;

    let mut rng1 = seeding::rng(seed, &[stage::ATTACK, 1]);
    let mut rng2 = seeding::rng(seed, &[stage::ATTACK, 2]);
    let mut delta1 = init_delta(t1_q, cfg, &mut rng1);
    let mut delta2 = init_delta(t2_q, cfg, &mut rng2);
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let g = Graph::new();
        let enc1_b = enc1.bind(&g, false);
        let enc2_b = enc2.bind(&g, false);
        let adv1 = g.param((t1_q + &delta1).into_dyn());
        let adv2 = g.param((t2_q + &delta2).into_dyn());
        let z1 = encode(&g, arch, &enc1_b, adv1)?;
        let z2 = encode(&g, arch, &enc2_b, adv2)?;
        let pos1_v = g.constant(pos1.clone().into_dyn());
        let pos2_v = g.constant(pos2.clone().into_dyn());
        let pool_v = g.constant(pool.clone().into_dyn());
        let loss1 = contrastive_sim_loss(&g, z1, pos1_v, Some((pool_v, &mask)), cfg.temperature)?;
        let loss2 = contrastive_sim_loss(&g, z2, pos2_v, Some((pool_v, &mask)), cfg.temperature)?;
        let total = g.add(loss1, loss2);
        trace.push(g.scalar(total));
        let grads = g.grad(total, &[adv1, adv2]);
        let g1 = g
            .value(grads[0])
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let g2 = g
            .value(grads[1])
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        ascend_step(t1_q, &mut delta1, &g1, cfg);
        ascend_step(t2_q, &mut delta2, &g2, cfg);
    }
    Ok(AdversarialBatch::dual(
        t1_q.clone(),
        delta1,
        t2_q.clone(),
        delta2,
        trace,
    ))
}

/// Single-encoder self-supervised attack: both views perturbed against one
/// adapted encoder. Fails representationally at small batch sizes, which is
/// exactly what the ablations measure.
pub fn selfsup_attack_single(
    arch: &ArchConfig,
    theta_tau: &ParamSet,
    t1_q: &Array4<f64>,
    t2_q: &Array4<f64>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    latent_attack(arch, theta_tau, theta_tau, t1_q, t2_q, cfg, seed)
}

/// Multi-view latent attack: per-view perturbations maximizing latent
/// discrepancy across the bootstrapped encoder pair.
#[allow(clippy::too_many_arguments)]
pub fn multiview_latent_attack(
    arch: &ArchConfig,
    theta1_tau: &ParamSet,
    theta2_tau: &ParamSet,
    t1_q: &Array4<f64>,
    t2_q: &Array4<f64>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    latent_attack(arch, theta1_tau, theta2_tau, t1_q, t2_q, cfg, seed)
}
