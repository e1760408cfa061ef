//! Margin-based cross-entropy, the inter-prototype penalty, and their sum.
//!
//! All gradients are taken with respect to the raw (unnormalised) feature and
//! prototype columns; the cosine normalisation is back-propagated explicitly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::math::{log_sum_exp, unit_columns, Matrix, COS_CLAMP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    Softmax,
    CosFace,
    ArcFace,
}

impl std::str::FromStr for MarginKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(MarginKind::Softmax),
            "cosface" => Ok(MarginKind::CosFace),
            "arcface" => Ok(MarginKind::ArcFace),
            other => Err(Error::InvalidArgument(format!("unknown margin kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for MarginKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MarginKind::Softmax => "softmax",
            MarginKind::CosFace => "cosface",
            MarginKind::ArcFace => "arcface",
        })
    }
}

/// Per-sample multipliers on the cross-entropy term, keyed by the child flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub child: f64,
    pub adult: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub kind: MarginKind,
    pub scale: f64,
    pub margin: f64,
    pub lambda_ip: f64,
    /// Replaces `margin` for the listed identities.
    pub class_margins: BTreeMap<usize, f64>,
    pub sample_weights: Option<SampleWeights>,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            kind: MarginKind::ArcFace,
            scale: 64.0,
            margin: 0.5,
            lambda_ip: 1.0,
            class_margins: BTreeMap::new(),
            sample_weights: None,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.lambda_ip >= 0.0 && self.lambda_ip.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_ip must be >= 0, got {}",
                self.lambda_ip
            )));
        }
        for m in std::iter::once(&self.margin).chain(self.class_margins.values()) {
            if !(*m >= 0.0 && m.is_finite()) {
                return Err(Error::InvalidArgument(format!("margin must be >= 0, got {m}")));
            }
            if self.kind == MarginKind::ArcFace && *m >= std::f64::consts::FRAC_PI_2 {
                return Err(Error::InvalidArgument(format!(
                    "arcface margin must be below pi/2, got {m}"
                )));
            }
        }
        if let Some(w) = self.sample_weights {
            if !(w.child > 0.0 && w.adult > 0.0 && w.child.is_finite() && w.adult.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "sample weights must be positive, got {w:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn margin_for(&self, class: usize) -> f64 {
        self.class_margins.get(&class).copied().unwrap_or(self.margin)
    }

    /// Target-logit transform and its derivative with respect to the cosine.
    fn target(&self, cos: f64, margin: f64) -> (f64, f64) {
        match self.kind {
            MarginKind::Softmax => (cos, 1.0),
            MarginKind::CosFace => (cos - margin, 1.0),
            MarginKind::ArcFace => {
                let lo = -1.0 + COS_CLAMP;
                let hi = 1.0 - COS_CLAMP;
                let clamped = cos.clamp(lo, hi);
                let theta = clamped.acos();
                let value = (theta + margin).cos();
                // d/dc cos(acos(c) + m) = sin(theta + m) / sin(theta); zero where the clamp is active.
                let slope = if cos < lo || cos > hi {
                    0.0
                } else {
                    (theta + margin).sin() / theta.sin()
                };
                (value, slope)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub margin: f64,
    pub inter_prototype: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// `d x N`; empty (`d x 0`) for losses that do not see features.
    pub grad_features: Matrix,
    /// `d x n`.
    pub grad_prototypes: Matrix,
    pub components: LossComponents,
}

/// Gradient of `L(v / |v|)` given the gradient `g` at the unit vector `u`.
fn project_out(g: &mut Matrix, unit: &Matrix, norms: &[f64]) {
    for j in 0..g.cols() {
        let radial: f64 = (0..g.rows()).map(|i| g[(i, j)] * unit[(i, j)]).sum();
        for i in 0..g.rows() {
            g[(i, j)] = (g[(i, j)] - radial * unit[(i, j)]) / norms[j];
        }
    }
}

fn label_column_error(what: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::ZeroColumn(j) => Error::InvalidArgument(format!("{what} column {j} has zero norm")),
        other => other,
    }
}

/// Mean (optionally re-weighted) margin softmax cross-entropy over a batch.
///
/// `features` is `d x N`, `prototypes` is `d x n`, `labels[i]` is the identity
/// of column `i`. `is_child` is required only when `cfg.sample_weights` is set.
pub fn margin_cross_entropy(
    features: &Matrix,
    prototypes: &Matrix,
    labels: &[usize],
    is_child: Option<&[bool]>,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    let (d, batch) = features.shape();
    let n = prototypes.cols();
    if prototypes.rows() != d {
        return Err(Error::Shape(format!(
            "features have dimension {d}, prototypes {}",
            prototypes.rows()
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for {batch} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    let weights: Vec<f64> = match (cfg.sample_weights, is_child) {
        (None, _) => vec![1.0; batch],
        (Some(w), Some(flags)) if flags.len() == batch => flags
            .iter()
            .map(|&c| if c { w.child } else { w.adult })
            .collect(),
        (Some(_), Some(flags)) => {
            return Err(Error::Shape(format!("{} child flags for {batch} samples", flags.len())))
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "sample weights need per-sample child flags".into(),
            ))
        }
    };

    let (x_unit, x_norms) = unit_columns(features).map_err(label_column_error("feature"))?;
    let (w_unit, w_norms) = unit_columns(prototypes).map_err(label_column_error("prototype"))?;
    let cos = w_unit.t_matmul(&x_unit)?;

    let s = cfg.scale;
    let inv_batch = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut grad_cos = Matrix::zeros(n, batch);
    let mut logits = vec![0.0; n];
    for i in 0..batch {
        let y = labels[i];
        for (j, z) in logits.iter_mut().enumerate() {
            *z = s * cos[(j, i)];
        }
        let (target, slope) = cfg.target(cos[(y, i)], cfg.margin_for(y));
        logits[y] = s * target;
        let lse = log_sum_exp(&logits)?;
        // -log p_y = log(1 + sum_{j != y} e^{z_j - z_y}); log1p keeps it exact when the target dominates.
        let others: f64 = (0..n)
            .filter(|&j| j != y)
            .map(|j| (logits[j] - logits[y]).exp())
            .sum();
        let term = if others.is_finite() {
            others.ln_1p()
        } else {
            lse - logits[y]
        };
        total += weights[i] * term;
        let coef = weights[i] * inv_batch * s;
        let mut rest = 0.0;
        for j in (0..n).filter(|&j| j != y) {
            let p = (logits[j] - lse).exp();
            rest += p;
            grad_cos[(j, i)] = coef * p;
        }
        grad_cos[(y, i)] = -coef * rest * slope;
    }
    let loss = total * inv_batch;

    let mut grad_features = w_unit.matmul(&grad_cos)?;
    project_out(&mut grad_features, &x_unit, &x_norms);
    let mut grad_prototypes = x_unit.matmul_t(&grad_cos)?;
    project_out(&mut grad_prototypes, &w_unit, &w_norms);

    Ok(LossResult {
        loss,
        grad_features,
        grad_prototypes,
        components: LossComponents {
            margin: loss,
            inter_prototype: 0.0,
        },
    })
}

fn check_child_ids(child_ids: &[usize], n: usize) -> Result<()> {
    if child_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "inter-prototype loss needs >= 2 child identities, got {}",
            child_ids.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &id in child_ids {
        if id >= n {
            return Err(Error::InvalidArgument(format!(
                "child identity {id} out of range for {n} prototypes"
            )));
        }
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate child identity {id}")));
        }
    }
    Ok(())
}

/// Sum of squared off-diagonal cosines between the `child_ids` prototype
/// columns, counting both `(i, j)` and `(j, i)`.
pub fn inter_prototype_loss(prototypes: &Matrix, child_ids: &[usize]) -> Result<LossResult> {
    let (d, n) = prototypes.shape();
    check_child_ids(child_ids, n)?;
    let subset = prototypes.select_columns(child_ids);
    let (unit, norms) = unit_columns(&subset).map_err(|e| match e {
        Error::ZeroColumn(k) => Error::ZeroColumn(child_ids[k]),
        other => other,
    })?;
    let gram = unit.t_matmul(&unit)?;
    let k = child_ids.len();

    let mut loss = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                loss += gram[(a, b)] * gram[(a, b)];
            }
        }
    }

    // Each unordered pair appears twice, so dL/du_a = 4 * sum_b C_ab u_b.
    let mut grad_unit = Matrix::zeros(d, k);
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let c = 4.0 * gram[(a, b)];
            for i in 0..d {
                grad_unit[(i, a)] += c * unit[(i, b)];
            }
        }
    }
    project_out(&mut grad_unit, &unit, &norms);

    let mut grad_prototypes = Matrix::zeros(d, n);
    for (a, &id) in child_ids.iter().enumerate() {
        for i in 0..d {
            grad_prototypes[(i, id)] = grad_unit[(i, a)];
        }
    }
    Ok(LossResult {
        loss,
        grad_features: Matrix::zeros(d, 0),
        grad_prototypes,
        components: LossComponents {
            margin: 0.0,
            inter_prototype: loss,
        },
    })
}

/// Margin cross-entropy plus `cfg.lambda_ip` times the inter-prototype loss.
///
/// With `lambda_ip == 0` the inter-prototype term is skipped entirely and the
/// result is exactly the margin loss.
pub fn total_loss(
    features: &Matrix,
    prototypes: &Matrix,
    labels: &[usize],
    is_child: Option<&[bool]>,
    child_ids: &[usize],
    cfg: &MarginConfig,
) -> Result<LossResult> {
    let mut result = margin_cross_entropy(features, prototypes, labels, is_child, cfg)?;
    if cfg.lambda_ip == 0.0 {
        return Ok(result);
    }
    let ip = inter_prototype_loss(prototypes, child_ids)?;
    result.loss += cfg.lambda_ip * ip.loss;
    result.grad_prototypes.add_scaled(&ip.grad_prototypes, cfg.lambda_ip)?;
    result.components.inter_prototype = ip.loss;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::finite_diff_grad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_cfg(scale: f64) -> MarginConfig {
        MarginConfig {
            kind: MarginKind::Softmax,
            scale,
            margin: 0.0,
            lambda_ip: 0.0,
            ..MarginConfig::default()
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_self_prototype_closed_form() {
        let w = Matrix::identity(2);
        let x = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let r = margin_cross_entropy(&x, &w, &[0], None, &softmax_cfg(1.0)).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((r.loss - expected).abs() < 1e-15);
        assert!((r.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn arcface_aligned_is_tiny() {
        let w = Matrix::identity(2);
        let x = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let cfg = MarginConfig {
            lambda_ip: 0.0,
            ..MarginConfig::default()
        };
        let r = margin_cross_entropy(&x, &w, &[0], None, &cfg).unwrap();
        assert!(r.loss < 1e-20);
        // cos = 1 sits on the clamp, so the closed form uses acos(1 - 1e-7) rather than 0.
        let theta = (1.0 - COS_CLAMP).acos();
        let expected = (-64.0 * (theta + 0.5).cos()).exp().ln_1p();
        assert!((r.loss - expected).abs() <= 1e-9 * expected);
        let unclamped = (-64.0 * 0.5f64.cos()).exp().ln_1p();
        assert!((r.loss / unclamped - 1.0).abs() < 0.02);
    }

    #[test]
    fn margin_loss_errors() {
        let w = Matrix::identity(2);
        let x = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let cfg = softmax_cfg(1.0);
        assert!(margin_cross_entropy(&x, &w, &[2], None, &cfg).is_err());
        let zero = Matrix::zeros(2, 1);
        let err = margin_cross_entropy(&zero, &w, &[0], None, &cfg).unwrap_err();
        assert!(err.to_string().contains("feature column 0"), "{err}");
        let bad = MarginConfig {
            margin: 1.6,
            ..MarginConfig::default()
        };
        assert!(margin_cross_entropy(&x, &w, &[0], None, &bad).is_err());
        let weighted = MarginConfig {
            sample_weights: Some(SampleWeights {
                child: 2.0,
                adult: 1.0,
            }),
            ..cfg
        };
        assert!(margin_cross_entropy(&x, &w, &[0], None, &weighted).is_err());
    }

    fn check_margin_gradients(kind: MarginKind, scale: f64, margin: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n, batch) = (8, 5, 4);
        let x = random(&mut rng, d, batch);
        let w = random(&mut rng, d, n);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let cfg = MarginConfig {
            kind,
            scale,
            margin,
            lambda_ip: 0.0,
            ..MarginConfig::default()
        };
        let r = margin_cross_entropy(&x, &w, &labels, None, &cfg).unwrap();
        let fx = finite_diff_grad(
            |v| {
                let xm = Matrix::from_vec(d, batch, v.to_vec()).unwrap();
                margin_cross_entropy(&xm, &w, &labels, None, &cfg).unwrap().loss
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        let fw = finite_diff_grad(
            |v| {
                let wm = Matrix::from_vec(d, n, v.to_vec()).unwrap();
                margin_cross_entropy(&x, &wm, &labels, None, &cfg).unwrap().loss
            },
            w.data(),
            1e-5,
        )
        .unwrap();
        let ex = max_rel_err(r.grad_features.data(), &fx);
        let ew = max_rel_err(r.grad_prototypes.data(), &fw);
        assert!(ex <= 1e-4 && ew <= 1e-4, "{kind}: features {ex}, prototypes {ew}");
    }

    #[test]
    fn margin_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_margin_gradients(MarginKind::Softmax, 1.0, 0.0, seed);
            check_margin_gradients(MarginKind::CosFace, 30.0, 0.35, seed);
            check_margin_gradients(MarginKind::ArcFace, 64.0, 0.5, seed);
        }
    }

    #[test]
    fn inter_prototype_examples() {
        let w = Matrix::identity(3);
        let r = inter_prototype_loss(&w, &[0, 2]).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grad_prototypes.max_abs(), 0.0);

        let w = Matrix::from_vec(2, 2, vec![0.6, 0.6, 0.8, 0.8]).unwrap();
        let r = inter_prototype_loss(&w, &[0, 1]).unwrap();
        assert!((r.loss - 2.0).abs() < 1e-15);
        assert!(r.grad_prototypes.max_abs() < 1e-12);
    }

    #[test]
    fn inter_prototype_errors() {
        let w = Matrix::identity(3);
        assert!(inter_prototype_loss(&w, &[1]).is_err());
        assert!(inter_prototype_loss(&w, &[1, 1]).is_err());
        assert!(inter_prototype_loss(&w, &[0, 3]).is_err());
        let mut z = Matrix::identity(3);
        z.set_col(2, &[0.0, 0.0, 0.0]);
        assert!(matches!(
            inter_prototype_loss(&z, &[0, 2]),
            Err(Error::ZeroColumn(2))
        ));
    }

    #[test]
    fn inter_prototype_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random(&mut rng, 8, 6);
        let ids = [0, 2, 3, 5];
        let r = inter_prototype_loss(&w, &ids).unwrap();
        let fd = finite_diff_grad(
            |v| {
                inter_prototype_loss(&Matrix::from_vec(8, 6, v.to_vec()).unwrap(), &ids)
                    .unwrap()
                    .loss
            },
            w.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(r.grad_prototypes.data(), &fd) <= 1e-4);
        // Non-child columns receive nothing.
        for i in 0..8 {
            assert_eq!(r.grad_prototypes[(i, 1)], 0.0);
            assert_eq!(r.grad_prototypes[(i, 4)], 0.0);
        }
    }

    #[test]
    fn inter_prototype_equals_frobenius_minus_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 5, 4);
        let ids = [0, 1, 2, 3];
        let c = crate::math::cosine_matrix(&w, &w).unwrap();
        let fro2 = c.data().iter().map(|v| v * v).sum::<f64>();
        let r = inter_prototype_loss(&w, &ids).unwrap();
        assert!((r.loss - (fro2 - 4.0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 8, 4);
        let w = random(&mut rng, 8, 6);
        let labels = [0, 3, 5, 1];
        let ids = [1, 3, 4];
        let mut cfg = MarginConfig {
            lambda_ip: 0.0,
            ..MarginConfig::default()
        };
        let alone = margin_cross_entropy(&x, &w, &labels, None, &cfg).unwrap();
        assert_eq!(total_loss(&x, &w, &labels, None, &ids, &cfg).unwrap(), alone);
        // lambda = 0 does not even need valid child ids
        assert!(total_loss(&x, &w, &labels, None, &[], &cfg).is_ok());

        cfg.lambda_ip = 1.0;
        let ip = inter_prototype_loss(&w, &ids).unwrap();
        let total = total_loss(&x, &w, &labels, None, &ids, &cfg).unwrap();
        assert!((total.loss - (alone.loss + ip.loss)).abs() < 1e-12);
        assert_eq!(total.components.margin, alone.loss);
        assert_eq!(total.components.inter_prototype, ip.loss);
        assert_eq!(total.grad_features, alone.grad_features);

        let fd = finite_diff_grad(
            |v| {
                let wm = Matrix::from_vec(8, 6, v.to_vec()).unwrap();
                total_loss(&x, &wm, &labels, None, &ids, &cfg).unwrap().loss
            },
            w.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(total.grad_prototypes.data(), &fd) <= 1e-4);
    }

    #[test]
    fn unit_sample_weights_are_bitwise_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, 6, 5);
        let w = random(&mut rng, 6, 4);
        let labels = [0, 1, 2, 3, 0];
        let flags = [true, false, true, false, false];
        let plain = MarginConfig::default();
        let ones = MarginConfig {
            sample_weights: Some(SampleWeights {
                child: 1.0,
                adult: 1.0,
            }),
            ..plain.clone()
        };
        let a = margin_cross_entropy(&x, &w, &labels, None, &plain).unwrap();
        let b = margin_cross_entropy(&x, &w, &labels, Some(&flags), &ones).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn child_reweighting_scales_child_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random(&mut rng, 6, 2);
        let w = random(&mut rng, 6, 3);
        let base = softmax_cfg(4.0);
        let one = |col: usize, label: usize| {
            let xm = x.select_columns(&[col]);
            margin_cross_entropy(&xm, &w, &[label], None, &base).unwrap().loss
        };
        let weighted = MarginConfig {
            sample_weights: Some(SampleWeights {
                child: 5.0,
                adult: 1.0,
            }),
            ..base.clone()
        };
        let r = margin_cross_entropy(&x, &w, &[0, 2], Some(&[true, false]), &weighted).unwrap();
        assert!((r.loss - (5.0 * one(0, 0) + one(1, 2)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn class_margin_override_raises_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(&mut rng, 6, 3);
        let w = random(&mut rng, 6, 3);
        let base = MarginConfig {
            scale: 8.0,
            ..MarginConfig::default()
        };
        let mut raised = base.clone();
        raised.class_margins.insert(1, 0.8);
        let a = margin_cross_entropy(&x, &w, &[1, 1, 1], None, &base).unwrap();
        let b = margin_cross_entropy(&x, &w, &[1, 1, 1], None, &raised).unwrap();
        assert!(b.loss > a.loss);
        let c = margin_cross_entropy(&x, &w, &[0, 2, 0], None, &raised).unwrap();
        let d = margin_cross_entropy(&x, &w, &[0, 2, 0], None, &base).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn arcface_loss_decreases_as_target_angle_closes() {
        // Two-class planar setup: rotate the feature toward prototype 0.
        let w = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let cfg = MarginConfig {
            lambda_ip: 0.0,
            ..MarginConfig::default()
        };
        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let theta = 1.4 - step as f64 * 0.07;
            let x = Matrix::from_vec(3, 1, vec![theta.cos(), theta.sin(), 0.0]).unwrap();
            let l = margin_cross_entropy(&x, &w, &[0], None, &cfg).unwrap().loss;
            assert!(l < prev, "theta {theta}: {l} !< {prev}");
            prev = l;
        }
    }

    proptest! {
        #[test]
        fn losses_are_feature_scale_invariant(seed in 0u64..1000, alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 6, 3);
            let w = random(&mut rng, 6, 4);
            let mut scaled = x.clone();
            scaled.scale(alpha);
            let cfg = MarginConfig::default();
            let a = total_loss(&x, &w, &[0, 1, 3], None, &[0, 1, 2], &cfg).unwrap();
            let b = total_loss(&scaled, &w, &[0, 1, 3], None, &[0, 1, 2], &cfg).unwrap();
            prop_assert!((a.loss - b.loss).abs() <= 1e-10 * a.loss.abs().max(1.0));
        }

        #[test]
        fn inter_prototype_gradient_is_tangent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(&mut rng, 7, 5);
            let ids = [4, 0, 2];
            let r = inter_prototype_loss(&w, &ids).unwrap();
            prop_assert!(r.loss >= 0.0);
            for &id in &ids {
                let radial: f64 = (0..7).map(|i| r.grad_prototypes[(i, id)] * w[(i, id)]).sum();
                prop_assert!(radial.abs() < 1e-10);
            }
        }

        #[test]
        fn inter_prototype_permutation_symmetry(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(&mut rng, 6, 5);
            let a = inter_prototype_loss(&w, &[0, 1, 3, 4]).unwrap();
            let b = inter_prototype_loss(&w, &[4, 3, 0, 1]).unwrap();
            prop_assert!((a.loss - b.loss).abs() < 1e-12);
            for (x, y) in a.grad_prototypes.data().iter().zip(b.grad_prototypes.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
