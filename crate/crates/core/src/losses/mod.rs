//! Similarities, pair enumeration, the contrastive baseline, the unified
//! pairwise loss family, margins and the margin regularizer.

mod pairs;

use serde::{Deserialize, Serialize};

pub use pairs::{enumerate_pairs, pair_similarities, BankView, FeatureRef, FeatureSet, Layout, Origin, PairSets, Polarity, SimilarityPair};

use crate::diff::{Graph, Mat, Var};
use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

/// `d = (1 + cos) / 2` for two unit vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    for v in [a, b] {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!("similarity needs unit vectors, got norm {norm}")));
        }
    }
    Ok(similarity_unchecked(a, b))
}

/// `d` without the unit-norm check.
pub fn similarity_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (1.0 - sq / 4.0).clamp(0.0, 1.0)
}

/// `-log(c+ / (c+ + sum c-))` for one anchor with critic `exp(cos / tau)`.
pub fn contrastive_loss(pos_cos: f64, neg_cos: &[f64], tau: f64) -> Result<f64> {
    if neg_cos.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let s: Vec<f64> = std::iter::once(pos_cos).chain(neg_cos.iter().copied()).map(|c| c / tau).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - s[0])
}

/// Mean InfoNCE over the `n` rows of `anchor`: row `i` of `target` is the
/// positive, the other target rows and every `bank` row are negatives.
pub fn infonce<'g>(anchor: Var<'g>, target: Var<'g>, bank: Option<&Mat>, tau: f64) -> Result<Var<'g>> {
    let g = anchor.graph();
    let n = anchor.shape().0;
    if n < 2 && bank.is_none_or(|b| b.nrows() == 0) {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    let scores = anchor.matmul(target.t())?.scale(1.0 / tau);
    let bank_scores = match bank {
        Some(b) if b.nrows() > 0 => Some(anchor.matmul(g.constant(b.t().to_owned()))?.scale(1.0 / tau)),
        _ => None,
    };
    // Detached per-row shift for a stable log-sum-exp.
    let mut shift = scores
        .value()
        .map_axis(ndarray::Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    if let Some(bs) = bank_scores {
        let bm = bs
            .value()
            .map_axis(ndarray::Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
        shift.zip_mut_with(&bm, |a, &b| *a = a.max(b));
    }
    let shift = g.constant(shift.insert_axis(ndarray::Axis(1)));
    let mut total = scores.sub(shift)?.exp().sum_cols();
    if let Some(bs) = bank_scores {
        total = total.add(bs.sub(shift)?.exp().sum_cols())?;
    }
    let lse = total.ln().add(shift)?;
    let diag: std::sync::Arc<[usize]> = (0..n).map(|i| i * n + i).collect();
    let pos = scores.gather(diag, n, 1)?;
    Ok(lse.sub(pos)?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Weighting {
    /// Plain temperature form with margin `lambda`.
    None,
    /// Constant factors `Γ⁻ = [d⁻ + γ]₊`, `Γ⁺ = [1 + γ - d⁺]₊`.
    Gamma,
    /// `Γ / phi_dec`.
    GammaBar { phi_dec: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OUCLConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub weighting: Weighting,
}

impl Default for OUCLConfig {
    fn default() -> Self {
        OUCLConfig {
            beta: 64.0,
            gamma: 0.4,
            lambda: 0.0,
            weighting: Weighting::GammaBar { phi_dec: 6.0 },
        }
    }
}

impl OUCLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 0.5) {
            return Err(Error::invalid(format!("gamma must lie in (0, 0.5], got {}", self.gamma)));
        }
        if let Weighting::GammaBar { phi_dec } = self.weighting {
            if !(phi_dec > 0.0 && phi_dec.is_finite()) {
                return Err(Error::invalid(format!("phi_dec must be positive, got {phi_dec}")));
            }
        }
        Ok(())
    }

    pub fn o_plus(&self) -> f64 {
        1.0 + self.gamma
    }

    pub fn o_minus(&self) -> f64 {
        -self.gamma
    }

    pub fn gamma_plus(&self) -> f64 {
        1.0 - self.gamma
    }

    pub fn gamma_minus(&self) -> f64 {
        self.gamma
    }
}

/// `[sum d⁻ - sum d⁺ + lambda]₊`.
pub fn oucl_sum_form<'g>(graph: &'g Graph, d_pos: Option<Var<'g>>, d_neg: Option<Var<'g>>, lambda: f64) -> Var<'g> {
    let mut s = graph.scalar(lambda);
    if let Some(n) = d_neg {
        s = s.add(n.sum()).expect("scalars");
    }
    if let Some(p) = d_pos {
        s = s.sub(p.sum()).expect("scalars");
    }
    s.clamp_at_zero()
}

/// `log sum exp(x)` with a detached max shift.
fn logsumexp<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let m = x.value().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(x.shift(-m).exp().sum().ln().shift(m))
}

/// `log(1 + e^s)` with a detached shift `c = max(s, 0)`.
fn softplus<'g>(s: Var<'g>) -> Result<Var<'g>> {
    let c = s.item().max(0.0);
    Ok(s.shift(-c).exp().shift((-c).exp()).ln().shift(c))
}

/// `(1/β) log(1 + Σ_{k⁻} Σ_{k⁺} exp(β (u⁻ + v⁺)))` for per-pair terms `u⁻`, `v⁺`,
/// evaluated as `softplus(LSE(βu⁻) + LSE(βv⁺)) / β`.
fn pairwise_softplus<'g>(u_neg: Var<'g>, v_pos: Var<'g>, beta: f64) -> Result<Var<'g>> {
    let s = logsumexp(u_neg.scale(beta))?.add(logsumexp(v_pos.scale(beta))?)?;
    Ok(softplus(s)?.scale(1.0 / beta))
}

/// The unified loss over positive and negative similarity columns.
///
/// `None` weighting: `u⁻ = d⁻ + λ`, `v⁺ = -d⁺`. Weighted: `u⁻ = Γ⁻ (d⁻ - γ⁻)`,
/// `v⁺ = -Γ⁺ (d⁺ - γ⁺)` with `Γ` entering as constants. An empty side gives 0.
pub fn oucl<'g>(graph: &'g Graph, d_pos: Option<Var<'g>>, d_neg: Option<Var<'g>>, cfg: &OUCLConfig) -> Result<Var<'g>> {
    cfg.validate()?;
    let (Some(dp), Some(dn)) = (d_pos, d_neg) else {
        log::info!("unified loss called with an empty positive or negative set; returning 0");
        return Ok(graph.scalar(0.0));
    };
    let (u, v) = match cfg.weighting {
        Weighting::None => (dn.shift(cfg.lambda), dp.neg()),
        Weighting::Gamma | Weighting::GammaBar { .. } => {
            let scale = match cfg.weighting {
                Weighting::GammaBar { phi_dec } => 1.0 / phi_dec,
                _ => 1.0,
            };
            let gneg = graph.constant(dn.value().mapv(|d| (d - cfg.o_minus()).max(0.0) * scale));
            let gpos = graph.constant(dp.value().mapv(|d| (cfg.o_plus() - d).max(0.0) * scale));
            let u = gneg.mul(dn.shift(-cfg.gamma_minus()))?;
            let v = gpos.mul(dp.shift(-cfg.gamma_plus()))?.neg();
            (u, v)
        }
    };
    pairwise_softplus(u, v, cfg.beta)
}

/// The γ-substituted form: exponent `β((d⁺ - 1)² + (d⁻)² - 2γ²)`.
pub fn oucl_reduced<'g>(graph: &'g Graph, d_pos: Option<Var<'g>>, d_neg: Option<Var<'g>>, beta: f64, gamma: f64) -> Result<Var<'g>> {
    let (Some(dp), Some(dn)) = (d_pos, d_neg) else {
        return Ok(graph.scalar(0.0));
    };
    let g2 = gamma * gamma;
    pairwise_softplus(dn.square().shift(-g2), dp.shift(-1.0).square().shift(-g2), beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    Large,
    Medium,
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub variant: MarginVariant,
}

/// Margins from original-feature similarities: `m⁺ = min d⁺`, `M⁻ = max d⁻`.
pub fn compute_margins(d_pos: &[f64], d_neg: &[f64], variant: MarginVariant) -> Result<Margins> {
    if d_pos.is_empty() || d_neg.is_empty() {
        return Err(Error::invalid("margins need at least one positive and one negative"));
    }
    let m_plus = d_pos.iter().copied().fold(f64::INFINITY, f64::min);
    let big_m_minus = d_neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (m_plus.min(big_m_minus), m_plus.max(big_m_minus));
    let (sigma_plus, sigma_minus) = match variant {
        MarginVariant::Large => (lo, hi),
        MarginVariant::Medium => {
            let mid = (m_plus + big_m_minus) / 2.0;
            (mid, mid)
        }
        MarginVariant::Small => (hi, lo),
    };
    Ok(Margins {
        sigma_plus,
        sigma_minus,
        variant,
    })
}

/// `mean [d(ẑ⁺) - σ⁺]₊ + mean [σ⁻ - d(ẑ⁻)]₊`; an empty side contributes 0.
pub fn margin_regularization<'g>(graph: &'g Graph, d_aug_pos: Option<Var<'g>>, d_aug_neg: Option<Var<'g>>, margins: &Margins) -> Var<'g> {
    let mut r = graph.scalar(0.0);
    if let Some(p) = d_aug_pos {
        r = r.add(p.shift(-margins.sigma_plus).clamp_at_zero().mean()).expect("scalars");
    }
    if let Some(n) = d_aug_neg {
        r = r.add(n.neg().shift(margins.sigma_minus).clamp_at_zero().mean()).expect("scalars");
    }
    r
}

/// Which loss is applied to each pair family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Criterion {
    Oucl(OUCLConfig),
    InfoNce { tau: f64 },
}

/// Terms of the combined objective for one batch.
#[derive(Debug, Clone)]
pub struct Objective<'g> {
    /// `L_ori + δ L_aug`.
    pub total: Var<'g>,
    pub ori: Var<'g>,
    pub aug: Option<Var<'g>>,
    pub stack: Var<'g>,
    pub pairs: PairSets,
    pub d_pos: Option<Var<'g>>,
    pub d_neg: Option<Var<'g>>,
    pub d_aug_pos: Option<Var<'g>>,
    pub d_aug_neg: Option<Var<'g>>,
}

/// `L_ori + δ L_aug`: the criterion over original pairs plus `δ` times the
/// criterion over original/augmented pairs (and augmented/augmented pairs
/// when `aug_aug`).
pub fn metaug_objective<'g>(
    features: &FeatureSet<'g>,
    bank: &[BankView],
    criterion: &Criterion,
    delta: f64,
    aug_aug: bool,
) -> Result<Objective<'g>> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be finite and >= 0, got {delta}")));
    }
    let has_aug = !features.z_aug.is_empty();
    if delta > 0.0 && !has_aug {
        return Err(Error::invalid("delta > 0 needs augmented features"));
    }
    let graph = features.z[0].graph();
    let stack = features.stack(bank)?;
    let pairs = enumerate_pairs(&features.layout(bank), has_aug, aug_aug && has_aug)?;
    let sims = |p: &[(usize, usize)]| pair_similarities(stack, p);
    let (d_pos, d_neg) = (sims(&pairs.pos)?, sims(&pairs.neg)?);
    let (d_aug_pos, d_aug_neg) = (sims(&pairs.aug_pos)?, sims(&pairs.aug_neg)?);

    let (ori, aug) = match criterion {
        Criterion::Oucl(cfg) => {
            let ori = oucl(graph, d_pos, d_neg, cfg)?;
            let aug = if has_aug {
                let join = |a: Option<Var<'g>>, b: &[(usize, usize)]| -> Result<Option<Var<'g>>> {
                    match (a, sims(b)?) {
                        (Some(a), Some(b)) => Ok(Some(crate::diff::concat_rows(&[a, b])?)),
                        (a, b) => Ok(a.or(b)),
                    }
                };
                let ap = join(d_aug_pos, &pairs.aug_aug_pos)?;
                let an = join(d_aug_neg, &pairs.aug_aug_neg)?;
                Some(oucl(graph, ap, an, cfg)?)
            } else {
                None
            };
            (ori, aug)
        }
        Criterion::InfoNce { tau } => {
            let m = features.z.len();
            let mut terms = Vec::new();
            for j in 0..m {
                for jp in (0..m).filter(|&jp| jp != j) {
                    let b = bank.get(jp).map(|b| &b.features);
                    terms.push(infonce(features.z[j], features.z[jp], b, *tau)?);
                }
            }
            let ori = mean_of(&terms)?;
            let aug = if has_aug {
                let mut terms = Vec::new();
                for j in 0..m {
                    for jp in 0..m {
                        terms.push(infonce(features.z[j], features.z_aug[jp], None, *tau)?);
                    }
                    if aug_aug {
                        for jp in (0..m).filter(|&jp| jp != j) {
                            terms.push(infonce(features.z_aug[j], features.z_aug[jp], None, *tau)?);
                        }
                    }
                }
                Some(mean_of(&terms)?)
            } else {
                None
            };
            (ori, aug)
        }
    };
    let total = match aug {
        Some(a) if delta > 0.0 => ori.add(a.scale(delta))?,
        _ => ori,
    };
    Ok(Objective {
        total,
        ori,
        aug,
        stack,
        pairs,
        d_pos,
        d_neg,
        d_aug_pos,
        d_aug_neg,
    })
}

fn mean_of<'g>(terms: &[Var<'g>]) -> Result<Var<'g>> {
    let first = *terms.first().ok_or_else(|| Error::invalid("no loss terms"))?;
    let mut s = first;
    for t in &terms[1..] {
        s = s.add(*t)?;
    }
    Ok(s.scale(1.0 / terms.len() as f64))
}

/// Values of a similarity column (empty for `None`).
pub fn column_values(v: Option<Var<'_>>) -> Vec<f64> {
    v.map(|v| v.value().iter().copied().collect()).unwrap_or_default()
}
