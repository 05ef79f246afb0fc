use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::{concat_rows, Mat, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
    /// A stale original feature read back from the memory bank.
    Bank,
}

/// A row of the stacked feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub sample: usize,
    pub view: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub left: FeatureRef,
    pub right: FeatureRef,
    pub d: f64,
    pub polarity: Polarity,
}

/// Bank features retrieved for one view, with their stale sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BankView {
    pub ids: Vec<usize>,
    pub features: Mat,
}

/// Unit-normalized features of one batch. `z[j]` and `z_aug[j]` are `n x d`;
/// `z_aug` is empty when no augmented features were produced.
#[derive(Debug, Clone)]
pub struct FeatureSet<'g> {
    pub ids: Vec<usize>,
    pub z: Vec<Var<'g>>,
    pub z_aug: Vec<Var<'g>>,
}

/// Row bookkeeping for the stacked matrix `[z^1; ..; z^M; ẑ^1; ..; ẑ^M; bank^1; ..; bank^M]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub ids: Vec<usize>,
    pub views: usize,
    pub augmented: bool,
    /// Sample ids of the bank rows, per view.
    pub bank: Vec<Vec<usize>>,
}

impl Layout {
    pub fn refs(&self) -> Vec<FeatureRef> {
        let mut refs = Vec::new();
        let mut block = |origin, ids: &[usize], view| {
            refs.extend(ids.iter().map(|&sample| FeatureRef { sample, view, origin }));
        };
        for j in 0..self.views {
            block(Origin::Original, &self.ids, j);
        }
        if self.augmented {
            for j in 0..self.views {
                block(Origin::Augmented, &self.ids, j);
            }
        }
        for (j, ids) in self.bank.iter().enumerate() {
            block(Origin::Bank, ids, j);
        }
        refs
    }

    fn original(&self, i: usize, j: usize) -> usize {
        j * self.ids.len() + i
    }

    fn augmented_row(&self, i: usize, j: usize) -> usize {
        (self.views + j) * self.ids.len() + i
    }

    fn bank_start(&self, j: usize) -> usize {
        let blocks = if self.augmented { 2 * self.views } else { self.views };
        blocks * self.ids.len() + self.bank[..j].iter().map(Vec::len).sum::<usize>()
    }
}

/// Index pairs into the stacked feature matrix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSets {
    pub refs: Vec<FeatureRef>,
    /// Cross-view pairs of one sample's original features.
    pub pos: Vec<(usize, usize)>,
    /// Cross-view pairs of different samples, plus bank negatives.
    pub neg: Vec<(usize, usize)>,
    /// Original `z_i^j` with augmented `ẑ_i^j'`, every `j, j'`.
    pub aug_pos: Vec<(usize, usize)>,
    /// Original `z_i^j` with augmented `ẑ_i'^j'`, `i != i'`.
    pub aug_neg: Vec<(usize, usize)>,
    /// Augmented-augmented cross-view pairs (only when requested).
    pub aug_aug_pos: Vec<(usize, usize)>,
    pub aug_aug_neg: Vec<(usize, usize)>,
}

impl PairSets {
    /// Annotated pairs with their similarities from `stack_values`.
    pub fn annotate(&self, stack_values: &Mat, pairs: &[(usize, usize)], polarity: Polarity) -> Vec<SimilarityPair> {
        pairs
            .iter()
            .map(|&(a, b)| SimilarityPair {
                left: self.refs[a],
                right: self.refs[b],
                d: super::similarity_unchecked(
                    stack_values.row(a).as_slice().expect("row-major"),
                    stack_values.row(b).as_slice().expect("row-major"),
                ),
                polarity,
            })
            .collect()
    }
}

/// Enumerate every pair family over `layout`.
///
/// In-batch negatives and augmented pairs are keyed on batch position, so a
/// sample id repeated within one batch is treated as distinct samples. Bank
/// rows pair with every in-batch feature of every other view.
pub fn enumerate_pairs(layout: &Layout, include_augmented: bool, aug_aug: bool) -> Result<PairSets> {
    let (n, m) = (layout.ids.len(), layout.views);
    if m < 2 {
        return Err(Error::invalid(format!("at least two views are required for positives, got {m}")));
    }
    if layout.bank.len() > m {
        return Err(Error::invalid("bank has more views than the batch"));
    }
    if (include_augmented || aug_aug) && !layout.augmented {
        return Err(Error::invalid("augmented pairs requested but no augmented features are present"));
    }
    let mut p = PairSets {
        refs: layout.refs(),
        ..PairSets::default()
    };
    for j in 0..m {
        for jp in j + 1..m {
            for i in 0..n {
                p.pos.push((layout.original(i, j), layout.original(i, jp)));
                for ip in (0..n).filter(|&ip| ip != i) {
                    p.neg.push((layout.original(i, j), layout.original(ip, jp)));
                }
            }
        }
    }
    for j in 0..m {
        for i in 0..n {
            for (jb, ids) in layout.bank.iter().enumerate() {
                if jb == j {
                    continue;
                }
                let start = layout.bank_start(jb);
                p.neg.extend((0..ids.len()).map(|k| (layout.original(i, j), start + k)));
            }
        }
    }
    if include_augmented {
        for j in 0..m {
            for jp in 0..m {
                for i in 0..n {
                    p.aug_pos.push((layout.original(i, j), layout.augmented_row(i, jp)));
                    for ip in (0..n).filter(|&ip| ip != i) {
                        p.aug_neg.push((layout.original(i, j), layout.augmented_row(ip, jp)));
                    }
                }
            }
        }
    }
    if aug_aug {
        for j in 0..m {
            for jp in j + 1..m {
                for i in 0..n {
                    p.aug_aug_pos.push((layout.augmented_row(i, j), layout.augmented_row(i, jp)));
                    for ip in (0..n).filter(|&ip| ip != i) {
                        p.aug_aug_neg.push((layout.augmented_row(i, j), layout.augmented_row(ip, jp)));
                    }
                }
            }
        }
    }
    Ok(p)
}

impl<'g> FeatureSet<'g> {
    pub fn layout(&self, bank: &[BankView]) -> Layout {
        Layout {
            ids: self.ids.clone(),
            views: self.z.len(),
            augmented: !self.z_aug.is_empty(),
            bank: bank.iter().map(|b| b.ids.clone()).collect(),
        }
    }

    /// The stacked matrix matching [`FeatureSet::layout`]. Bank rows enter as constants.
    pub fn stack(&self, bank: &[BankView]) -> Result<Var<'g>> {
        let graph = self.z.first().ok_or_else(|| Error::invalid("feature set has no views"))?.graph();
        let mut parts: Vec<Var<'g>> = self.z.iter().chain(&self.z_aug).copied().collect();
        parts.extend(
            bank.iter()
                .filter(|b| !b.ids.is_empty())
                .map(|b| graph.constant(b.features.clone())),
        );
        concat_rows(&parts)
    }
}

/// `d` for each pair as a `P x 1` column, or `None` when `pairs` is empty.
///
/// Uses `d = 1 - |a - b|^2 / 4`, which equals `(1 + cos) / 2` on the unit
/// sphere and is exactly 1 for identical rows; the result is clipped to [0, 1].
pub fn pair_similarities<'g>(stack: Var<'g>, pairs: &[(usize, usize)]) -> Result<Option<Var<'g>>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let (rows, d) = stack.shape();
    if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= rows || *b >= rows) {
        return Err(Error::invalid(format!("pair ({a}, {b}) out of range for {rows} feature rows")));
    }
    let map =
        |pick: fn(&(usize, usize)) -> usize| -> Arc<[usize]> { pairs.iter().flat_map(|p| (0..d).map(move |c| pick(p) * d + c)).collect() };
    let left = stack.gather(map(|p| p.0), pairs.len(), d)?;
    let right = stack.gather(map(|p| p.1), pairs.len(), d)?;
    let dist = left.sub(right)?.square().sum_cols();
    let sim = dist.scale(-0.25).shift(1.0);
    // Clip to [0, 1]: max(sim, 0), then 1 - max(1 - sim, 0).
    let lower = sim.clamp_at_zero();
    Ok(Some(lower.neg().shift(1.0).clamp_at_zero().neg().shift(1.0)))
}
