//! Inner adaptation (single-view and bootstrapped multi-view) and the outer
//! objectives: the multi-view consistency objective, the adversarial-querying
//! baseline, the two naive single-encoder ablations, and plain clean
//! meta-learning — plus the SGD meta-update.
//!
//! Objectives are split into a *prepare* stage (build views, adapt at the
//! value level, run the attack) and an *evaluate* stage (rebuild adaptation
//! in-graph over frozen adversaries and differentiate). Freezing the
//! adversaries matches the training semantics — no gradient flows through
//! attack generation — and makes the evaluate stage a pure function of the
//! meta-parameters, which is what the finite-difference oracles probe.

use crate::attacks::{
    multiview_latent_attack, pgd_classwise, selfsup_attack_single, AdversarialBatch, AttackConfig,
};
use crate::autodiff::{Graph, Var};
use crate::data::{make_multiview, AugmentationPolicy, EpisodeTask, MultiViewBatch};
use crate::error::{Error, Result};
use crate::losses::{cosine_distance, cross_entropy, kl_divergence};
use crate::model::{classify, encode, ArchConfig};
use crate::params::{AdaptedEncoderParams, BoundParams, MetaParams, ParamSet};
use ndarray::{concatenate, Array4, Axis};
use serde::{Deserialize, Serialize};

pub const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Drop second-order terms through the inner step (FOMAML-style).
    FirstOrder,
    /// Differentiate through the inner gradient exactly.
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "mavrl")]
    Mavrl,
    #[serde(rename = "aq")]
    Aq,
    #[serde(rename = "ablation1")]
    Ablation1,
    #[serde(rename = "ablation2")]
    Ablation2,
    #[serde(rename = "clean-maml")]
    CleanMaml,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Mavrl => "mavrl",
            Objective::Aq => "aq",
            Objective::Ablation1 => "ablation1",
            Objective::Ablation2 => "ablation2",
            Objective::CleanMaml => "clean-maml",
        }
    }

    /// Whether the inner loop adapts the classifier too (Eq-1-style rule).
    pub fn adapts_phi(&self) -> bool {
        matches!(self, Objective::Aq | Objective::CleanMaml)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// TRADES trade-off weight on the KL term.
    pub lambda: f64,
    pub inner_lr0: f64,
    pub outer_lr: f64,
    pub weight_decay: f64,
    /// Episodes per outer step.
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub gradient_mode: GradientMode,
    /// Outer steps to train for.
    pub steps: usize,
    /// Validate on clean tasks every this many outer steps.
    pub val_every: usize,
    pub val_tasks: usize,
    /// Validation episodes use this K (clean-task protocol has its own K).
    pub val_k_shot: usize,
    pub val_q_shot: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mavrl,
            lambda: 6.0,
            inner_lr0: 0.005,
            outer_lr: 0.005,
            weight_decay: 1e-4,
            meta_batch: 16,
            inner_steps: 1,
            gradient_mode: GradientMode::FirstOrder,
            steps: 100_000,
            val_every: 1000,
            val_tasks: 100,
            val_k_shot: 1,
            val_q_shot: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.meta_batch < 1 {
            return Err(Error::Config("meta_batch must be >= 1".into()));
        }
        if self.inner_lr0 <= 0.0 || self.outer_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-term loss report for one objective evaluation. `kl` entries are the
/// raw divergences; the weighted total is `sum(ce) + lambda*sum(kl) +
/// consistency`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objective: String,
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
    pub consistency: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        self.ce.iter().sum::<f64>()
            + self.lambda * self.kl.iter().sum::<f64>()
            + self.consistency.unwrap_or(0.0)
    }

    /// Sanity bounds checked on every training step.
    pub fn validate(&self) -> Result<()> {
        for &c in &self.ce {
            if !(c >= -1e-9 && c.is_finite()) {
                return Err(Error::Config(format!("cross-entropy term {c} out of range")));
            }
        }
        for &k in &self.kl {
            if !(k >= -1e-9 && k.is_finite()) {
                return Err(Error::Config(format!("KL term {k} out of range")));
            }
        }
        if let Some(c) = self.consistency {
            if !((-1e-9..=2.0 + 1e-9).contains(&c) && c.is_finite()) {
                return Err(Error::Config(format!("consistency term {c} out of range")));
            }
        }
        Ok(())
    }
}

/// Gradients congruent with the meta-parameter set.
#[derive(Clone, Debug)]
pub struct MetaGrads {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub alpha_theta: ParamSet,
    pub alpha_phi: Option<ParamSet>,
}

impl MetaGrads {
    pub fn zeros_like(meta: &MetaParams) -> Self {
        MetaGrads {
            theta: meta.theta.like_filled(0.0),
            phi: meta.phi.like_filled(0.0),
            alpha_theta: meta.alpha_theta.like_filled(0.0),
            alpha_phi: meta.alpha_phi.as_ref().map(|a| a.like_filled(0.0)),
        }
    }

    pub fn add_scaled(&mut self, other: &MetaGrads, scale: f64) {
        self.theta = self.theta.zip_map(&other.theta, |a, b| a + scale * b);
        self.phi = self.phi.zip_map(&other.phi, |a, b| a + scale * b);
        self.alpha_theta = self
            .alpha_theta
            .zip_map(&other.alpha_theta, |a, b| a + scale * b);
        if let (Some(mine), Some(theirs)) = (&self.alpha_phi, &other.alpha_phi) {
            self.alpha_phi = Some(mine.zip_map(theirs, |a, b| a + scale * b));
        }
    }
}

/// One objective evaluation: weighted total, per-term breakdown, gradients,
/// and the adversarial batch that produced the robust terms.
pub struct ObjectiveOutput {
    pub total: f64,
    pub breakdown: LossBreakdown,
    pub grads: MetaGrads,
    pub adversarial: Option<AdversarialBatch>,
}

// ---------------------------------------------------------------------------
// Inner adaptation
// ---------------------------------------------------------------------------

struct AdaptedVars {
    theta: BoundParams,
    phi: BoundParams,
}

/// Build the inner-gradient update in-graph:
/// params <- params - alpha (.) grad CE(support), iterated `inner_steps`
/// times. With `first_order` the inner gradients are detached, so the outer
/// derivative treats them as constants (alpha still receives its exact
/// gradient).
#[allow(clippy::too_many_arguments)]
fn adapt_in_graph(
    g: &Graph,
    arch: &ArchConfig,
    theta: &BoundParams,
    phi: &BoundParams,
    alpha_theta: &BoundParams,
    alpha_phi: Option<&BoundParams>,
    support: Var,
    labels: &[usize],
    inner_steps: usize,
    first_order: bool,
) -> Result<AdaptedVars> {
    let adapt_phi = alpha_phi.is_some();
    let mut cur_theta = theta.clone();
    let mut cur_phi = phi.clone();
    for _ in 0..inner_steps {
        let feats = encode(g, arch, &cur_theta, support)?;
        let logits = classify(g, &cur_phi, feats)?;
        let ce = cross_entropy(g, logits, labels)?;
        let mut wrt: Vec<Var> = cur_theta.var_list();
        if adapt_phi {
            wrt.extend(cur_phi.var_list());
        }
        let grads = g.grad(ce, &wrt);
        let n_theta = cur_theta.vars.len();
        let mut next_theta = cur_theta.clone();
        for (i, (name, var)) in cur_theta.iter().enumerate() {
            let grad = if first_order { g.detach(grads[i]) } else { grads[i] };
            let step = g.mul(alpha_theta.get(name), grad);
            next_theta.vars[name] = g.sub(var, step);
        }
        let mut next_phi = cur_phi.clone();
        if let Some(alpha_phi) = alpha_phi {
            for (i, (name, var)) in cur_phi.iter().enumerate() {
                let grad = if first_order {
                    g.detach(grads[n_theta + i])
                } else {
                    grads[n_theta + i]
                };
                let step = g.mul(alpha_phi.get(name), grad);
                next_phi.vars[name] = g.sub(var, step);
            }
        }
        cur_theta = next_theta;
        cur_phi = next_phi;
    }
    Ok(AdaptedVars {
        theta: cur_theta,
        phi: cur_phi,
    })
}

/// Value-level inner adaptation: theta^tau = theta - alpha (.) grad CE,
/// iterated. With `adapt_phi` the classifier adapts too (Eq-1 rule);
/// otherwise it is frozen.
pub fn inner_adapt(
    arch: &ArchConfig,
    meta: &MetaParams,
    adapt_phi: bool,
    support: &Array4<f64>,
    labels: &[usize],
    inner_steps: usize,
) -> Result<(ParamSet, ParamSet)> {
    let g = Graph::new();
    let theta_b = meta.theta.bind(&g, true);
    let phi_b = meta.phi.bind(&g, true);
    let alpha_b = meta.alpha_theta.bind(&g, false);
    let alpha_phi_b = if adapt_phi {
        Some(
            meta.alpha_phi
                .as_ref()
                .ok_or_else(|| Error::Config("alpha_phi missing for phi-adapting inner rule".into()))?
                .bind(&g, false),
        )
    } else {
        None
    };
    let sup = g.constant(support.clone().into_dyn());
    let adapted = adapt_in_graph(
        &g,
        arch,
        &theta_b,
        &phi_b,
        &alpha_b,
        alpha_phi_b.as_ref(),
        sup,
        labels,
        inner_steps,
        true,
    )?;
    Ok((
        ParamSet::from_bound(&g, &adapted.theta),
        ParamSet::from_bound(&g, &adapted.phi),
    ))
}

/// Bootstrapped multi-view encoders: two independent inner adaptations from
/// the same initialisation, one per augmented support view, classifier
/// frozen.
pub fn bootstrap_multiview(
    arch: &ArchConfig,
    meta: &MetaParams,
    t1_support: &Array4<f64>,
    t2_support: &Array4<f64>,
    labels: &[usize],
    inner_steps: usize,
    episode_id: u64,
) -> Result<(AdaptedEncoderParams, AdaptedEncoderParams)> {
    let (theta1, _) = inner_adapt(arch, meta, false, t1_support, labels, inner_steps)?;
    let (theta2, _) = inner_adapt(arch, meta, false, t2_support, labels, inner_steps)?;
    Ok((
        AdaptedEncoderParams {
            theta_tau: theta1,
            episode_id,
            view_index: 1,
        },
        AdaptedEncoderParams {
            theta_tau: theta2,
            episode_id,
            view_index: 2,
        },
    ))
}

// ---------------------------------------------------------------------------
// Objective evaluation over frozen adversaries
// ---------------------------------------------------------------------------

struct BoundMeta {
    theta: BoundParams,
    phi: BoundParams,
    alpha_theta: BoundParams,
    alpha_phi: Option<BoundParams>,
}

fn bind_meta(g: &Graph, meta: &MetaParams, adapt_phi: bool) -> Result<BoundMeta> {
    let alpha_phi = if adapt_phi {
        Some(
            meta.alpha_phi
                .as_ref()
                .ok_or_else(|| Error::Config("alpha_phi missing for phi-adapting inner rule".into()))?
                .bind(g, true),
        )
    } else {
        None
    };
    Ok(BoundMeta {
        theta: meta.theta.bind(g, true),
        phi: meta.phi.bind(g, true),
        alpha_theta: meta.alpha_theta.bind(g, true),
        alpha_phi,
    })
}

fn collect_grads(
    g: &Graph,
    total: Var,
    bound: &BoundMeta,
    meta: &MetaParams,
) -> MetaGrads {
    let mut wrt: Vec<Var> = bound.theta.var_list();
    wrt.extend(bound.phi.var_list());
    wrt.extend(bound.alpha_theta.var_list());
    if let Some(ap) = &bound.alpha_phi {
        wrt.extend(ap.var_list());
    }
    let grads = g.grad(total, &wrt);
    let mut it = grads.into_iter();
    let mut take = |proto: &ParamSet| -> ParamSet {
        let mut out = ParamSet::new();
        for (name, _) in proto.iter() {
            out.insert(name.clone(), (*g.value(it.next().unwrap())).clone());
        }
        out
    };
    let theta = take(&meta.theta);
    let phi = take(&meta.phi);
    let alpha_theta = take(&meta.alpha_theta);
    let alpha_phi = bound
        .alpha_phi
        .as_ref()
        .map(|_| take(meta.alpha_phi.as_ref().unwrap()));
    MetaGrads {
        theta,
        phi,
        alpha_theta,
        alpha_phi,
    }
}

/// Evaluate the multi-view objective over frozen adversarial views.
///
/// Builds both bootstrapped adaptations in-graph, then
/// `sum_j [ CE_j(clean) + lambda*KL_j(adv||clean) ] + cos(adv feats across
/// views)`. Exposed separately so gradient oracles can probe it as a pure
/// function of the meta-parameters.
#[allow(clippy::too_many_arguments)]
pub fn mavrl_evaluate(
    arch: &ArchConfig,
    meta: &MetaParams,
    views: &MultiViewBatch,
    adv1: &Array4<f64>,
    adv2: &Array4<f64>,
    support_labels: &[usize],
    query_labels: &[usize],
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(f64, LossBreakdown, Option<MetaGrads>)> {
    let g = Graph::new();
    let bound = bind_meta(&g, meta, false)?;
    let first_order = cfg.gradient_mode == GradientMode::FirstOrder;

    let sup1 = g.constant(views.t1_support.clone().into_dyn());
    let sup2 = g.constant(views.t2_support.clone().into_dyn());
    let adapted1 = adapt_in_graph(
        &g, arch, &bound.theta, &bound.phi, &bound.alpha_theta, None, sup1, support_labels,
        cfg.inner_steps, first_order,
    )?;
    let adapted2 = adapt_in_graph(
        &g, arch, &bound.theta, &bound.phi, &bound.alpha_theta, None, sup2, support_labels,
        cfg.inner_steps, first_order,
    )?;

    let q1 = g.constant(views.t1_query.clone().into_dyn());
    let q2 = g.constant(views.t2_query.clone().into_dyn());
    let a1 = g.constant(adv1.clone().into_dyn());
    let a2 = g.constant(adv2.clone().into_dyn());

    let mut ce_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut adv_feats = Vec::new();
    for (adapted, clean_q, adv_q) in [(&adapted1, q1, a1), (&adapted2, q2, a2)] {
        let clean_f = encode(&g, arch, &adapted.theta, clean_q)?;
        let clean_logits = classify(&g, &bound.phi, clean_f)?;
        let ce = cross_entropy(&g, clean_logits, query_labels)?;
        let adv_f = encode(&g, arch, &adapted.theta, adv_q)?;
        let adv_logits = classify(&g, &bound.phi, adv_f)?;
        let kl = kl_divergence(&g, adv_logits, clean_logits)?;
        ce_terms.push(ce);
        kl_terms.push(kl);
        adv_feats.push(adv_f);
    }
    let cos = cosine_distance(&g, adv_feats[0], adv_feats[1])?;

    let mut total = g.add(ce_terms[0], ce_terms[1]);
    if cfg.lambda != 0.0 {
        let kl_sum = g.add(kl_terms[0], kl_terms[1]);
        total = g.add(total, g.mul_const(kl_sum, cfg.lambda));
    }
    total = g.add(total, cos);

    let breakdown = LossBreakdown {
        objective: Objective::Mavrl.name().to_string(),
        ce: ce_terms.iter().map(|&v| g.scalar(v)).collect(),
        kl: kl_terms.iter().map(|&v| g.scalar(v)).collect(),
        consistency: Some(g.scalar(cos)),
        lambda: cfg.lambda,
        total: g.scalar(total),
    };
    let grads = want_grads.then(|| collect_grads(&g, total, &bound, meta));
    Ok((breakdown.total, breakdown, grads))
}

/// The full multi-view objective for one episode: build views, bootstrap the
/// encoder pair, run the multi-view latent attack on the query views, then
/// evaluate and differentiate.
#[allow(clippy::too_many_arguments)]
pub fn mavrl_objective(
    arch: &ArchConfig,
    meta: &MetaParams,
    episode: &EpisodeTask,
    policy: &AugmentationPolicy,
    atk: &AttackConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ObjectiveOutput> {
    let views = make_multiview(episode, policy, seed)?;
    let (ad1, ad2) = bootstrap_multiview(
        arch,
        meta,
        &views.t1_support,
        &views.t2_support,
        &episode.support_labels,
        cfg.inner_steps,
        episode.episode_id,
    )?;
    let adv = multiview_latent_attack(
        arch,
        &ad1.theta_tau,
        &ad2.theta_tau,
        &views.t1_query,
        &views.t2_query,
        atk,
        seed,
    )?;
    let adv2 = adv.adv_view2.clone().expect("dual-view attack");
    let (total, breakdown, grads) = mavrl_evaluate(
        arch,
        meta,
        &views,
        &adv.adv_view1,
        &adv2,
        &episode.support_labels,
        &episode.query_labels,
        cfg,
        true,
    )?;
    Ok(ObjectiveOutput {
        total,
        breakdown,
        grads: grads.unwrap(),
        adversarial: Some(adv),
    })
}

/// Evaluate the adversarial-querying objective over a frozen adversarial
/// query batch: inner-adapt `[theta, phi]` on the raw support, then
/// `CE(clean) + lambda*KL(adv||clean)`.
#[allow(clippy::too_many_arguments)]
pub fn aq_evaluate(
    arch: &ArchConfig,
    meta: &MetaParams,
    support: &Array4<f64>,
    query: &Array4<f64>,
    adv_query: Option<&Array4<f64>>,
    support_labels: &[usize],
    query_labels: &[usize],
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(f64, LossBreakdown, Option<MetaGrads>)> {
    let g = Graph::new();
    let bound = bind_meta(&g, meta, true)?;
    let first_order = cfg.gradient_mode == GradientMode::FirstOrder;
    let sup = g.constant(support.clone().into_dyn());
    let adapted = adapt_in_graph(
        &g,
        arch,
        &bound.theta,
        &bound.phi,
        &bound.alpha_theta,
        bound.alpha_phi.as_ref(),
        sup,
        support_labels,
        cfg.inner_steps,
        first_order,
    )?;
    let q = g.constant(query.clone().into_dyn());
    let clean_f = encode(&g, arch, &adapted.theta, q)?;
    let clean_logits = classify(&g, &adapted.phi, clean_f)?;
    let ce = cross_entropy(&g, clean_logits, query_labels)?;

    let mut kl_terms = Vec::new();
    let mut total = ce;
    if let Some(adv_imgs) = adv_query {
        if cfg.lambda != 0.0 {
            let a = g.constant(adv_imgs.clone().into_dyn());
            let adv_f = encode(&g, arch, &adapted.theta, a)?;
            let adv_logits = classify(&g, &adapted.phi, adv_f)?;
            let kl = kl_divergence(&g, adv_logits, clean_logits)?;
            kl_terms.push(g.scalar(kl));
            total = g.add(total, g.mul_const(kl, cfg.lambda));
        }
    }

    let breakdown = LossBreakdown {
        objective: if adv_query.is_some() {
            Objective::Aq.name().to_string()
        } else {
            Objective::CleanMaml.name().to_string()
        },
        ce: vec![g.scalar(ce)],
        kl: kl_terms,
        consistency: None,
        lambda: cfg.lambda,
        total: g.scalar(total),
    };
    let grads = want_grads.then(|| collect_grads(&g, total, &bound, meta));
    Ok((breakdown.total, breakdown, grads))
}

/// The adversarial-querying baseline: inner adaptation of `[theta, phi]` on
/// the clean support, class-wise PGD on the query, `CE + lambda*KL`.
pub fn aq_objective(
    arch: &ArchConfig,
    meta: &MetaParams,
    episode: &EpisodeTask,
    atk: &AttackConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ObjectiveOutput> {
    let (theta_tau, phi_tau) = inner_adapt(
        arch,
        meta,
        true,
        &episode.support_images,
        &episode.support_labels,
        cfg.inner_steps,
    )?;
    let adv = pgd_classwise(
        arch,
        &theta_tau,
        &phi_tau,
        &episode.query_images,
        &episode.query_labels,
        atk,
        seed,
    )?;
    let (total, breakdown, grads) = aq_evaluate(
        arch,
        meta,
        &episode.support_images,
        &episode.query_images,
        Some(&adv.adv_view1),
        &episode.support_labels,
        &episode.query_labels,
        cfg,
        true,
    )?;
    Ok(ObjectiveOutput {
        total,
        breakdown,
        grads: grads.unwrap(),
        adversarial: Some(adv),
    })
}

/// Clean meta-learning baseline: no adversaries, plain bi-level CE.
pub fn clean_maml_objective(
    arch: &ArchConfig,
    meta: &MetaParams,
    episode: &EpisodeTask,
    cfg: &TrainConfig,
) -> Result<ObjectiveOutput> {
    let (total, breakdown, grads) = aq_evaluate(
        arch,
        meta,
        &episode.support_images,
        &episode.query_images,
        None,
        &episode.support_labels,
        &episode.query_labels,
        cfg,
        true,
    )?;
    Ok(ObjectiveOutput {
        total,
        breakdown,
        grads: grads.unwrap(),
        adversarial: None,
    })
}

/// Evaluate an ablation objective over frozen adversarial views. Single
/// adaptation (encoder-only) on the union of both augmented support views;
/// variant 2 adds the cross-view consistency term.
#[allow(clippy::too_many_arguments)]
pub fn ablation_evaluate(
    arch: &ArchConfig,
    meta: &MetaParams,
    views: &MultiViewBatch,
    adv1: &Array4<f64>,
    adv2: &Array4<f64>,
    support_labels: &[usize],
    query_labels: &[usize],
    variant: u8,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(f64, LossBreakdown, Option<MetaGrads>)> {
    let g = Graph::new();
    let bound = bind_meta(&g, meta, false)?;
    let first_order = cfg.gradient_mode == GradientMode::FirstOrder;

    let union_support = concatenate(
        Axis(0),
        &[views.t1_support.view(), views.t2_support.view()],
    )
    .expect("congruent support views");
    let mut union_labels = support_labels.to_vec();
    union_labels.extend_from_slice(support_labels);
    let sup = g.constant(union_support.into_dyn());
    let adapted = adapt_in_graph(
        &g, arch, &bound.theta, &bound.phi, &bound.alpha_theta, None, sup, &union_labels,
        cfg.inner_steps, first_order,
    )?;

    let mut ce_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut adv_feats = Vec::new();
    for (clean_q, adv_q) in [(&views.t1_query, adv1), (&views.t2_query, adv2)] {
        let q = g.constant(clean_q.clone().into_dyn());
        let a = g.constant(adv_q.clone().into_dyn());
        let clean_f = encode(&g, arch, &adapted.theta, q)?;
        let clean_logits = classify(&g, &bound.phi, clean_f)?;
        let ce = cross_entropy(&g, clean_logits, query_labels)?;
        let adv_f = encode(&g, arch, &adapted.theta, a)?;
        let adv_logits = classify(&g, &bound.phi, adv_f)?;
        let kl = kl_divergence(&g, adv_logits, clean_logits)?;
        ce_terms.push(ce);
        kl_terms.push(kl);
        adv_feats.push(adv_f);
    }
    let mut total = g.add(ce_terms[0], ce_terms[1]);
    if cfg.lambda != 0.0 {
        let kl_sum = g.add(kl_terms[0], kl_terms[1]);
        total = g.add(total, g.mul_const(kl_sum, cfg.lambda));
    }
    let mut consistency = None;
    if variant == 2 {
        let cos = cosine_distance(&g, adv_feats[0], adv_feats[1])?;
        total = g.add(total, cos);
        consistency = Some(g.scalar(cos));
    }

    let breakdown = LossBreakdown {
        objective: if variant == 1 {
            Objective::Ablation1.name().to_string()
        } else {
            Objective::Ablation2.name().to_string()
        },
        ce: ce_terms.iter().map(|&v| g.scalar(v)).collect(),
        kl: kl_terms.iter().map(|&v| g.scalar(v)).collect(),
        consistency,
        lambda: cfg.lambda,
        total: g.scalar(total),
    };
    let grads = want_grads.then(|| collect_grads(&g, total, &bound, meta));
    Ok((breakdown.total, breakdown, grads))
}

/// Naive SSL+AML combination: single-encoder adaptation with the
/// single-encoder self-supervised attack supplying adversaries. Variant 1 is
/// multi-view adversarial training alone; variant 2 adds the consistency
/// loss.
#[allow(clippy::too_many_arguments)]
pub fn ablation_objective(
    variant: u8,
    arch: &ArchConfig,
    meta: &MetaParams,
    episode: &EpisodeTask,
    policy: &AugmentationPolicy,
    atk: &AttackConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ObjectiveOutput> {
    if variant != 1 && variant != 2 {
        return Err(Error::Config(format!("ablation variant must be 1 or 2, got {variant}")));
    }
    let views = make_multiview(episode, policy, seed)?;
    let union_support = concatenate(
        Axis(0),
        &[views.t1_support.view(), views.t2_support.view()],
    )
    .expect("congruent support views");
    let mut union_labels = episode.support_labels.clone();
    union_labels.extend_from_slice(&episode.support_labels);
    let (theta_tau, _) = inner_adapt(arch, meta, false, &union_support, &union_labels, cfg.inner_steps)?;
    let adv = selfsup_attack_single(
        arch,
        &theta_tau,
        &views.t1_query,
        &views.t2_query,
        atk,
        seed,
    )?;
    let adv2 = adv.adv_view2.clone().expect("dual-view attack");
    let (total, breakdown, grads) = ablation_evaluate(
        arch,
        meta,
        &views,
        &adv.adv_view1,
        &adv2,
        &episode.support_labels,
        &episode.query_labels,
        variant,
        cfg,
        true,
    )?;
    Ok(ObjectiveOutput {
        total,
        breakdown,
        grads: grads.unwrap(),
        adversarial: Some(adv),
    })
}

/// Dispatch on the configured objective.
#[allow(clippy::too_many_arguments)]
pub fn episode_objective(
    arch: &ArchConfig,
    meta: &MetaParams,
    episode: &EpisodeTask,
    policy: &AugmentationPolicy,
    atk: &AttackConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ObjectiveOutput> {
    match cfg.objective {
        Objective::Mavrl => mavrl_objective(arch, meta, episode, policy, atk, cfg, seed),
        Objective::Aq => aq_objective(arch, meta, episode, atk, cfg, seed),
        Objective::Ablation1 => ablation_objective(1, arch, meta, episode, policy, atk, cfg, seed),
        Objective::Ablation2 => ablation_objective(2, arch, meta, episode, policy, atk, cfg, seed),
        Objective::CleanMaml => clean_maml_objective(arch, meta, episode, cfg),
    }
}

// ---------------------------------------------------------------------------
// Meta update
// ---------------------------------------------------------------------------

/// SGD with weight decay on theta, phi and alpha; alpha entries clamped to
/// stay at or above a small positive floor.
pub fn meta_update(meta: &MetaParams, grads: &MetaGrads, cfg: &TrainConfig) -> Result<MetaParams> {
    let lr = cfg.outer_lr;
    let wd = cfg.weight_decay;
    let sgd = |p: &ParamSet, g: &ParamSet| -> ParamSet {
        p.zip_map(g, |pv, gv| pv - lr * (gv + wd * pv))
    };
    let theta = sgd(&meta.theta, &grads.theta);
    let phi = sgd(&meta.phi, &grads.phi);
    let alpha_theta = sgd(&meta.alpha_theta, &grads.alpha_theta).map(|v| v.max(ALPHA_FLOOR));
    let alpha_phi = match (&meta.alpha_phi, &grads.alpha_phi) {
        (Some(a), Some(ga)) => Some(sgd(a, ga).map(|v| v.max(ALPHA_FLOOR))),
        (Some(a), None) => Some(a.clone()),
        (None, _) => None,
    };
    Ok(MetaParams {
        theta,
        phi,
        alpha_theta,
        alpha_phi,
    })
}
