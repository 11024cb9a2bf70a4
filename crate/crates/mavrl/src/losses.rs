//! Loss primitives: cross-entropy, KL divergence between softened logits,
//! cosine distance, and the temperature-scaled contrastive similarity loss
//! used by the latent attacks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};

fn one_hot(labels: &[usize], n_classes: usize) -> Result<Array2<f64>> {
    let mut oh = Array2::zeros((labels.len(), n_classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                n_classes,
            });
        }
        oh[[i, y]] = 1.0;
    }
    Ok(oh)
}

/// Batch-mean cross-entropy of logits `[B, N]` against integer labels,
/// computed through a stabilised log-sum-exp.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    let (b, n) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{b} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let oh = g.constant(one_hot(labels, n)?.into_dyn());
    let logp = g.log_softmax(logits);
    let picked = g.sum_axes(g.mul(logp, oh), &[1]); // [B]
    let nll = g.neg(picked);
    Ok(g.mean_all(nll))
}

/// Batch-mean KL( softmax(adv) || softmax(clean) ), adversarial side first.
pub fn kl_divergence(g: &Graph, logits_adv: Var, logits_clean: Var) -> Result<Var> {
    let sa = g.shape(logits_adv);
    let sc = g.shape(logits_clean);
    if sa != sc {
        return Err(Error::ShapeMismatch {
            expected: format!("{sa:?}"),
            got: format!("{sc:?}"),
        });
    }
    let logp_adv = g.log_softmax(logits_adv);
    let logp_clean = g.log_softmax(logits_clean);
    let p_adv = g.exp(logp_adv);
    let diff = g.sub(logp_adv, logp_clean);
    let per_row = g.sum_axes(g.mul(p_adv, diff), &[1]);
    Ok(g.mean_all(per_row))
}

/// Cosine distance 1 - u.v/(|u||v|) between single vectors.
pub fn cosine_distance_vec(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNormLatent);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nu * nv))
}

/// Batch-mean cosine distance between rows of `[B, d]` feature matrices.
pub fn cosine_distance(g: &Graph, u: Var, v: Var) -> Result<Var> {
    let su = g.shape(u);
    let sv = g.shape(v);
    if su != sv {
        return Err(Error::ShapeMismatch {
            expected: format!("{su:?}"),
            got: format!("{sv:?}"),
        });
    }
    for m in [u, v] {
        let val = g.value(m);
        let m2 = val.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for row in m2.rows() {
            if row.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(Error::ZeroNormLatent);
            }
        }
    }
    let un = g.normalize_rows(u, 0.0);
    let vn = g.normalize_rows(v, 0.0);
    let dot = g.sum_axes(g.mul(un, vn), &[1]); // [B]
    let one = g.constant(ArrayD::from_elem(IxDyn(&[su[0]]), 1.0));
    let dist = g.sub(one, dot);
    Ok(g.mean_all(dist))
}

/// Temperature-scaled contrastive similarity loss for a batch of anchors.
///
/// For anchor row `i`:
///   -log( exp(sim(z_i, pos_i)/T) / (exp(sim(z_i,pos_i)/T) + sum_neg exp(sim(z_i, neg)/T)) )
///
/// `negatives` is a pool of `[M, d]` candidate rows shared by all anchors;
/// `neg_mask[i][m] == false` excludes pool row `m` for anchor `i` (used to
/// drop the anchor's own instance from the pool). Returns the anchor mean.
/// An all-false mask row means that anchor has no negatives; with no
/// negatives at all the loss is identically 0 (the softmax is over the
/// positive alone).
pub fn contrastive_sim_loss(
    g: &Graph,
    anchors: Var,
    positives: Var,
    negatives: Option<(Var, &Array2<bool>)>,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let sa = g.shape(anchors);
    let b = sa[0];
    for m in [Some(anchors), Some(positives), negatives.map(|(n, _)| n)]
        .into_iter()
        .flatten()
    {
        let val = g.value(m);
        let m2 = val.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for row in m2.rows() {
            if row.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(Error::ZeroNormLatent);
            }
        }
    }
    let an = g.normalize_rows(anchors, 0.0);
    let pn = g.normalize_rows(positives, 0.0);
    let s_pos = g.sum_axes(g.mul(an, pn), &[1]); // [B]
    let s_pos = g.mul_const(s_pos, 1.0 / temperature);
    let s_pos_col = g.reshape(s_pos, &[b, 1]);

    let all = match negatives {
        None => s_pos_col,
        Some((negs, mask)) => {
            let nn = g.normalize_rows(negs, 0.0);
            let nnt = g.permute(nn, &[1, 0]);
            let s_neg = g.matmul(an, nnt); // [B, M]
            let s_neg = g.mul_const(s_neg, 1.0 / temperature);
            let m_cols = g.shape(s_neg)[1];
            debug_assert_eq!(mask.dim(), (b, m_cols));
            // Additive mask: excluded entries get a huge negative score so
            // their exp underflows to exactly zero.
            let mask_arr = Array2::from_shape_fn((b, m_cols), |(i, j)| {
                if mask[[i, j]] {
                    0.0
                } else {
                    -1e30
                }
            });
            let mask_v = g.constant(mask_arr.into_dyn());
            let s_neg = g.add(s_neg, mask_v);
            g.concat(s_pos_col, s_neg, 1)
        }
    };
    // -log softmax over [pos | negs], picking the positive column.
    let logp = g.log_softmax(all);
    let picked = g.slice(logp, 1, 0, 1);
    let nll = g.neg(picked);
    Ok(g.mean_all(nll))
}

/// Single-anchor convenience used by tests and the attack oracle: plain
/// slices in, scalar out.
pub fn contrastive_sim_loss_single(
    z: &[f64],
    z_pos: &[f64],
    negs: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    let g = Graph::new();
    let d = z.len();
    let a = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, d]), z.to_vec()).unwrap());
    let p = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, d]), z_pos.to_vec()).unwrap());
    let loss = if negs.is_empty() {
        contrastive_sim_loss(&g, a, p, None, temperature)?
    } else {
        let flat: Vec<f64> = negs.iter().flatten().copied().collect();
        let n = g.constant(ArrayD::from_shape_vec(IxDyn(&[negs.len(), d]), flat).unwrap());
        let mask = Array2::from_elem((1, negs.len()), true);
        contrastive_sim_loss(&g, a, p, Some((n, &mask)), temperature)?
    };
    Ok(g.scalar(loss))
}
