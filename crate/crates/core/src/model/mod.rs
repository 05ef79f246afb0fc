//! View-specific encoders, projection heads and feature augmentation
//! generators, plus parameter bookkeeping for fast-weight substitution.

mod checkpoint;
mod network;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use network::{Activation, Arch, NetworkSpec};

use crate::diff::{backward, sgd_expression, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Dense stack; used for flat (synthetic) views.
    Mlp,
    /// Two convolutions and a dense layer; needs image-shaped views.
    Conv,
    /// `Conv` when the source reports image geometry, `Mlp` otherwise.
    Auto,
}

/// Architecture choices shared by all views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub encoder_hidden: Vec<usize>,
    pub conv_channels: (usize, usize),
    pub conv_kernel: usize,
    pub rep_dim: usize,
    pub head_hidden: Vec<usize>,
    pub head_bias: bool,
    pub feat_dim: usize,
    pub mag_hidden: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Auto,
            encoder_hidden: vec![64],
            conv_channels: (8, 16),
            conv_kernel: 3,
            rep_dim: 32,
            head_hidden: vec![32],
            head_bias: true,
            feat_dim: 16,
            mag_hidden: 16,
            activation: Activation::Relu,
        }
    }
}

/// Per-view network specs: encoders `f_j`, heads `g_j` and generators `a_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoders: Vec<NetworkSpec>,
    pub heads: Vec<NetworkSpec>,
    pub mags: Vec<NetworkSpec>,
}

impl ModelSpec {
    /// Specs for `view_dims.len()` views. `geometry` (channels, height, width)
    /// enables conv encoders.
    pub fn build(cfg: &ModelConfig, view_dims: &[usize], geometry: Option<&[(usize, usize, usize)]>, run_seed: u64) -> Result<Self> {
        let conv = match cfg.encoder {
            EncoderKind::Mlp => false,
            EncoderKind::Conv => {
                if geometry.is_none() {
                    return Err(Error::Config {
                        key: "model.encoder".into(),
                        reason: "conv encoders need image-shaped views".into(),
                    });
                }
                true
            }
            EncoderKind::Auto => geometry.is_some(),
        };
        let init = |tag: &str, j: usize| seed::derive_seed(run_seed, tag, j as u64);
        let mut spec = ModelSpec {
            encoders: Vec::new(),
            heads: Vec::new(),
            mags: Vec::new(),
        };
        for (j, &dim) in view_dims.iter().enumerate() {
            let arch = if conv {
                let g = geometry.expect("checked above")[j];
                Arch::Conv {
                    input: g,
                    channels: cfg.conv_channels,
                    kernel: cfg.conv_kernel,
                    out_dim: cfg.rep_dim,
                    activation: cfg.activation,
                }
            } else {
                let mut widths = vec![dim];
                widths.extend(&cfg.encoder_hidden);
                widths.push(cfg.rep_dim);
                Arch::Dense {
                    widths,
                    activation: cfg.activation,
                    bias: true,
                    zero_final: false,
                }
            };
            spec.encoders.push(NetworkSpec {
                arch,
                init_seed: init("encoder", j),
            });
            let mut widths = vec![cfg.rep_dim];
            widths.extend(&cfg.head_hidden);
            widths.push(cfg.feat_dim);
            spec.heads.push(NetworkSpec {
                arch: Arch::Dense {
                    widths,
                    activation: cfg.activation,
                    bias: cfg.head_bias,
                    zero_final: false,
                },
                init_seed: init("head", j),
            });
            spec.mags.push(NetworkSpec {
                arch: Arch::Dense {
                    widths: vec![cfg.feat_dim, cfg.mag_hidden, cfg.feat_dim],
                    activation: Activation::Tanh,
                    bias: true,
                    zero_final: true,
                },
                init_seed: init("mag", j),
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_views(&self) -> usize {
        self.encoders.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.encoders.len();
        if m == 0 || self.heads.len() != m || self.mags.len() != m {
            return Err(Error::invalid("model needs one encoder, head and generator per view"));
        }
        for j in 0..m {
            for s in [&self.encoders[j], &self.heads[j], &self.mags[j]] {
                s.validate()?;
            }
            if self.heads[j].in_dim() != self.encoders[j].out_dim() {
                return Err(Error::invalid(format!("view {j}: head input differs from encoder output")));
            }
            let feat = self.heads[j].out_dim();
            if self.mags[j].in_dim() != feat || self.mags[j].out_dim() != feat {
                return Err(Error::invalid(format!("view {j}: generator must map feat_dim to feat_dim")));
            }
        }
        Ok(())
    }

    pub fn init(&self) -> ParamGroup {
        let init = |specs: &[NetworkSpec]| specs.iter().map(NetworkSpec::init).collect();
        ParamGroup::new(init(&self.encoders), init(&self.heads), init(&self.mags))
    }

    /// Forward `views` through encoders and heads, and, when `with_aug`, the generators.
    pub fn forward<'g>(&self, params: &Bound<'g>, views: &[Mat], with_aug: bool) -> Result<Forward<'g>> {
        if views.len() != self.num_views() {
            return Err(Error::invalid(format!(
                "batch has {} views, model has {}",
                views.len(),
                self.num_views()
            )));
        }
        let g = params.graph;
        let mut out = Forward {
            h: Vec::new(),
            z: Vec::new(),
            z_aug: Vec::new(),
        };
        for (j, v) in views.iter().enumerate() {
            let h = self.encode(j, &params.theta[j], g.constant(v.clone()))?;
            let z = self.project(j, &params.vartheta[j], h)?;
            if with_aug {
                out.z_aug.push(self.augment_features(j, &params.omega[j], z)?);
            }
            out.h.push(h);
            out.z.push(z);
        }
        Ok(out)
    }

    pub fn encode<'g>(&self, j: usize, theta_j: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        self.encoders[j].forward(theta_j, x)
    }

    /// Unit-normalized projection `z = g(h) / |g(h)|`.
    pub fn project<'g>(&self, j: usize, vartheta_j: &[Var<'g>], h: Var<'g>) -> Result<Var<'g>> {
        Ok(self.heads[j].forward(vartheta_j, h)?.l2_normalize_rows())
    }

    /// Residual generator output `normalize(z + a(z))`.
    ///
    /// Evaluated as `normalize(z + a) - normalize(z) + z`: `z` is already unit
    /// norm, so the correction only cancels rounding, and a zero generator
    /// output returns `z` bit for bit.
    pub fn augment_features<'g>(&self, j: usize, omega_j: &[Var<'g>], z: Var<'g>) -> Result<Var<'g>> {
        let delta = self.mags[j].forward(omega_j, z)?;
        z.add(delta)?.l2_normalize_rows().sub(z.l2_normalize_rows())?.add(z)
    }
}

/// Outputs of one forward pass; each entry is `n x dim` for one view.
#[derive(Debug, Clone)]
pub struct Forward<'g> {
    pub h: Vec<Var<'g>>,
    pub z: Vec<Var<'g>>,
    pub z_aug: Vec<Var<'g>>,
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Parameter values of every network, grouped as encoders (`theta`), heads
/// (`vartheta`) and generators (`omega`); one entry per view, one matrix per
/// parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    uid: u64,
    pub theta: Vec<Vec<Mat>>,
    pub vartheta: Vec<Vec<Mat>>,
    pub omega: Vec<Vec<Mat>>,
}

/// Which parameter groups receive gradients when bound into a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub theta: bool,
    pub vartheta: bool,
    pub omega: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        theta: true,
        vartheta: true,
        omega: true,
    };
    pub const NONE: Trainable = Trainable {
        theta: false,
        vartheta: false,
        omega: false,
    };
}

impl ParamGroup {
    pub fn new(theta: Vec<Vec<Mat>>, vartheta: Vec<Vec<Mat>>, omega: Vec<Vec<Mat>>) -> Self {
        ParamGroup {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            theta,
            vartheta,
            omega,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn num_views(&self) -> usize {
        self.theta.len()
    }

    /// Check block counts and shapes against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let groups = [
            ("theta", &self.theta, &spec.encoders),
            ("vartheta", &self.vartheta, &spec.heads),
            ("omega", &self.omega, &spec.mags),
        ];
        for (name, values, specs) in groups {
            if values.len() != specs.len() {
                return Err(Error::invalid(format!(
                    "{name} has {} views, spec has {}",
                    values.len(),
                    specs.len()
                )));
            }
            for (j, (blocks, s)) in values.iter().zip(specs).enumerate() {
                let shapes: Vec<_> = blocks.iter().map(|b| b.dim()).collect();
                if shapes != s.param_shapes() {
                    return Err(Error::invalid(format!("{name}[{j}] block shapes {shapes:?} differ from spec")));
                }
            }
        }
        Ok(())
    }

    /// Bind values as graph leaves; trainable groups become parameters,
    /// the rest constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: Trainable) -> Bound<'g> {
        let leaf = |m: &Mat, t: bool| if t { graph.param(m.clone()) } else { graph.constant(m.clone()) };
        let bind = |group: &[Vec<Mat>], t: bool| -> Vec<Vec<Var<'g>>> {
            group.iter().map(|blocks| blocks.iter().map(|m| leaf(m, t)).collect()).collect()
        };
        Bound {
            graph,
            uid: self.uid,
            theta: bind(&self.theta, trainable.theta),
            vartheta: bind(&self.vartheta, trainable.vartheta),
            omega: bind(&self.omega, trainable.omega),
        }
    }

    /// Euclidean norm of every block, for divergence checks.
    pub fn max_block_norm(&self) -> f64 {
        self.theta
            .iter()
            .chain(&self.vartheta)
            .chain(&self.omega)
            .flatten()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.theta
            .iter()
            .chain(&self.vartheta)
            .chain(&self.omega)
            .flatten()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// A [`ParamGroup`] bound into one graph.
#[derive(Debug, Clone)]
pub struct Bound<'g> {
    pub graph: &'g Graph,
    uid: u64,
    pub theta: Vec<Vec<Var<'g>>>,
    pub vartheta: Vec<Vec<Var<'g>>>,
    pub omega: Vec<Vec<Var<'g>>>,
}

impl<'g> Bound<'g> {
    pub fn uid(&self) -> u64 {
        self.uid
    }

    fn encoder_head_vars(&self) -> Vec<Var<'g>> {
        self.theta.iter().chain(&self.vartheta).flatten().copied().collect()
    }

    pub fn omega_vars(&self) -> Vec<Var<'g>> {
        self.omega.iter().flatten().copied().collect()
    }

    /// Current values of all three groups.
    pub fn values(&self) -> (Vec<Vec<Mat>>, Vec<Vec<Mat>>, Vec<Vec<Mat>>) {
        let read = |g: &[Vec<Var<'g>>]| -> Vec<Vec<Mat>> { g.iter().map(|b| b.iter().map(|v| (*v.value()).clone()).collect()).collect() };
        (read(&self.theta), read(&self.vartheta), read(&self.omega))
    }
}

/// One-step-updated encoder and head weights, kept as recorded expressions of
/// the base weights and `source_loss`.
#[derive(Debug, Clone)]
pub struct FastWeights<'g> {
    uid: u64,
    pub theta_ring: Vec<Vec<Var<'g>>>,
    pub vartheta_ring: Vec<Vec<Var<'g>>>,
    pub source_loss: Var<'g>,
}

/// `theta - lr * grad_theta(loss)` and the same for `vartheta`, with the
/// gradients recorded so the result stays differentiable.
pub fn fast_weights<'g>(base: &Bound<'g>, loss: Var<'g>, lr: f64) -> Result<FastWeights<'g>> {
    let params = base.encoder_head_vars();
    let rec = backward(loss, &params, true)?;
    let mut updated = params
        .iter()
        .zip(&rec.gradients)
        .map(|(p, g)| sgd_expression(*p, *g, lr))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut take = |group: &[Vec<Var<'g>>]| -> Vec<Vec<Var<'g>>> {
        group
            .iter()
            .map(|b| b.iter().map(|_| updated.next().expect("same length")).collect())
            .collect()
    };
    let theta_ring = take(&base.theta);
    let vartheta_ring = take(&base.vartheta);
    Ok(FastWeights {
        uid: base.uid,
        theta_ring,
        vartheta_ring,
        source_loss: loss,
    })
}

/// A forward context that reads the fast weights for encoders and heads and
/// the base generators. `base` itself is untouched.
pub fn substitute_fast_weights<'g>(base: &Bound<'g>, fw: &FastWeights<'g>) -> Result<Bound<'g>> {
    if fw.uid != base.uid {
        return Err(Error::Contract(format!(
            "fast weights come from parameter group {} but were applied to group {}",
            fw.uid, base.uid
        )));
    }
    Ok(Bound {
        graph: base.graph,
        uid: base.uid,
        theta: fw.theta_ring.clone(),
        vartheta: fw.vartheta_ring.clone(),
        omega: base.omega.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(head_hidden: Vec<usize>, head_bias: bool) -> ModelSpec {
        let cfg = ModelConfig {
            encoder_hidden: vec![8],
            rep_dim: 32,
            head_hidden,
            head_bias,
            feat_dim: 6,
            mag_hidden: 6,
            ..ModelConfig::default()
        };
        ModelSpec::build(&cfg, &[16, 12], None, 3).unwrap()
    }

    fn batch(n: usize) -> Vec<Mat> {
        vec![
            Mat::from_shape_fn((n, 16), |(i, j)| ((i * 16 + j) as f64).sin()),
            Mat::from_shape_fn((n, 12), |(i, j)| ((i * 12 + j) as f64).cos()),
        ]
    }

    fn row_norms(m: &Mat) -> Vec<f64> {
        m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let s = spec(vec![32], true);
        let p = s.init();
        let g = Graph::new();
        let b = p.bind(&g, Trainable::NONE);
        let f = s.forward(&b, &batch(4), true).unwrap();
        assert_eq!(f.h[0].shape(), (4, 32));
        let again = s.forward(&b, &batch(4), true).unwrap();
        assert_eq!(*f.h[1].value(), *again.h[1].value());
        assert_eq!(s.init().theta, p.theta);
    }

    #[test]
    fn zero_final_encoder_layer_gives_zero_h() {
        let s = spec(vec![32], true);
        let mut p = s.init();
        let last = p.theta[0].len() - 2;
        p.theta[0][last].fill(0.0);
        let g = Graph::new();
        let f = s.forward(&p.bind(&g, Trainable::NONE), &batch(3), false).unwrap();
        assert!(f.h[0].value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projections_and_generator_outputs_are_unit_norm() {
        let s = spec(vec![32], true);
        let mut p = s.init();
        for o in &mut p.omega {
            o[2].mapv_inplace(|_| 0.3);
        }
        let g = Graph::new();
        let f = s.forward(&p.bind(&g, Trainable::NONE), &batch(5), true).unwrap();
        for v in f.z.iter().chain(&f.z_aug) {
            assert!(row_norms(&v.value()).iter().all(|n| (n - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn linear_head_is_scale_invariant() {
        let s = spec(vec![], false);
        let p = s.init();
        let g = Graph::new();
        let b = p.bind(&g, Trainable::NONE);
        let h = g.constant(Mat::from_shape_fn((3, 32), |(i, j)| (i + 2 * j) as f64 * 0.1 - 1.0));
        let z1 = s.project(0, &b.vartheta[0], h).unwrap().value();
        let z10 = s.project(0, &b.vartheta[0], h.scale(10.0)).unwrap().value();
        assert!((&*z1 - &*z10).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn generator_is_identity_at_init() {
        let s = spec(vec![32], true);
        let p = s.init();
        let g = Graph::new();
        let f = s.forward(&p.bind(&g, Trainable::NONE), &batch(4), true).unwrap();
        for (z, za) in f.z.iter().zip(&f.z_aug) {
            assert_eq!(*z.value(), *za.value());
        }
    }

    #[test]
    fn fast_weights_with_zero_rate_match_base_and_do_not_mutate() {
        let s = spec(vec![32], true);
        let p = s.init();
        let before = p.clone();
        let g = Graph::new();
        let b = p.bind(&g, Trainable::ALL);
        let f = s.forward(&b, &batch(4), true).unwrap();
        let loss = f.z[0].mul(f.z[1]).unwrap().sum();
        let fw = fast_weights(&b, loss, 0.0).unwrap();
        let ctx = substitute_fast_weights(&b, &fw).unwrap();
        let f2 = s.forward(&ctx, &batch(4), true).unwrap();
        assert_eq!(*f.z[1].value(), *f2.z[1].value());
        assert_eq!(p, before);
        let (t, v, o) = b.values();
        assert_eq!((t, v, o), (before.theta, before.vartheta, before.omega));
    }

    #[test]
    fn foreign_fast_weights_are_rejected() {
        let s = spec(vec![32], true);
        let (p, q) = (s.init(), s.init());
        let g = Graph::new();
        let (bp, bq) = (p.bind(&g, Trainable::ALL), q.bind(&g, Trainable::ALL));
        let f = s.forward(&bq, &batch(2), false).unwrap();
        let fw = fast_weights(&bq, f.z[0].sum(), 0.1).unwrap();
        assert!(matches!(substitute_fast_weights(&bp, &fw), Err(Error::Contract(_))));
    }
}
