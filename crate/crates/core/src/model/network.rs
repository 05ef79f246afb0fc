use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Mat, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// Fully connected stack; `widths[0]` is the input size. The activation
    /// follows every layer except the last.
    Dense {
        widths: Vec<usize>,
        activation: Activation,
        bias: bool,
        zero_final: bool,
    },
    /// Two `kernel x kernel` convolutions (stride 1 then stride 2, "same"
    /// zero padding) followed by one fully connected layer. Input rows are
    /// channel-major images of shape `input`.
    Conv {
        input: (usize, usize, usize),
        channels: (usize, usize),
        kernel: usize,
        out_dim: usize,
        activation: Activation,
    },
}

/// Architecture plus the seed its initial weights are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub init_seed: u64,
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.arch {
            Arch::Dense { widths, .. } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::invalid(format!("dense widths {widths:?} need >= 2 positive entries")));
                }
            }
            Arch::Conv {
                input: (c, h, w),
                channels: (c1, c2),
                kernel,
                out_dim,
                ..
            } => {
                if [*c, *h, *w, *c1, *c2, *kernel, *out_dim].contains(&0) || kernel % 2 == 0 {
                    return Err(Error::invalid("conv sizes must be positive and the kernel odd"));
                }
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        match &self.arch {
            Arch::Dense { widths, .. } => widths[0],
            Arch::Conv { input: (c, h, w), .. } => c * h * w,
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.arch {
            Arch::Dense { widths, .. } => *widths.last().expect("validated widths"),
            Arch::Conv { out_dim, .. } => *out_dim,
        }
    }

    /// Shapes of the parameter blocks in declared order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        match &self.arch {
            Arch::Dense { widths, bias, .. } => widths
                .windows(2)
                .flat_map(|w| {
                    let mut v = vec![(w[0], w[1])];
                    if *bias {
                        v.push((1, w[1]));
                    }
                    v
                })
                .collect(),
            Arch::Conv {
                input: (c, h, w),
                channels: (c1, c2),
                kernel,
                out_dim,
                ..
            } => {
                let k2 = kernel * kernel;
                let (h2, w2) = (conv_out(*h, *kernel, 2), conv_out(*w, *kernel, 2));
                vec![
                    (c * k2, *c1),
                    (1, *c1),
                    (c1 * k2, *c2),
                    (1, *c2),
                    (c2 * h2 * w2, *out_dim),
                    (1, *out_dim),
                ]
            }
        }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights; biases start at zero.
    pub fn init(&self) -> Vec<Mat> {
        let shapes = self.param_shapes();
        let mut rng = seed::stream(self.init_seed, "init", 0);
        let zero_final = matches!(self.arch, Arch::Dense { zero_final: true, .. });
        let last_weight = (0..shapes.len()).rev().find(|&i| !self.is_bias_slot(i));
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                if self.is_bias_slot(i) || (zero_final && Some(i) == last_weight) {
                    Mat::zeros((r, c))
                } else {
                    let bound = 1.0 / (r as f64).sqrt();
                    Mat::from_shape_fn((r, c), |_| rng.gen_range(-bound..=bound))
                }
            })
            .collect()
    }

    fn is_bias_slot(&self, i: usize) -> bool {
        match &self.arch {
            Arch::Dense { bias, .. } => *bias && i % 2 == 1,
            Arch::Conv { .. } => i % 2 == 1,
        }
    }

    pub fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "network expects {} parameter blocks, got {}",
                shapes.len(),
                params.len()
            )));
        }
        if x.shape().1 != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: x.shape(),
                right: (x.shape().0, self.in_dim()),
            });
        }
        match &self.arch {
            Arch::Dense {
                bias, activation, widths, ..
            } => {
                let layers = widths.len() - 1;
                let per = if *bias { 2 } else { 1 };
                let mut h = x;
                for l in 0..layers {
                    h = h.matmul(params[l * per])?;
                    if *bias {
                        h = h.add(params[l * per + 1])?;
                    }
                    if l + 1 < layers {
                        h = activation.apply(h);
                    }
                }
                Ok(h)
            }
            Arch::Conv {
                input: (c, hh, ww),
                channels: (c1, c2),
                kernel,
                activation,
                ..
            } => {
                let n = x.shape().0;
                let (k, pad) = (*kernel, kernel / 2);
                // Layer 1 reads channel-major input rows.
                let (h1, w1) = (conv_out(*hh, k, 1), conv_out(*ww, k, 1));
                let map1 = im2col(n, *c, *hh, *ww, k, 1, pad, |s, ch, y, xx| {
                    s * c * hh * ww + ch * hh * ww + y * ww + xx
                });
                let p1 = x.gather(map1, n * h1 * w1, c * k * k)?;
                let y1 = activation.apply(p1.matmul(params[0])?.add(params[1])?);
                // Layer 2 reads pixel-major rows `(s, y, x) x channel` from layer 1.
                let (h2, w2) = (conv_out(h1, k, 2), conv_out(w1, k, 2));
                let map2 = im2col(n, *c1, h1, w1, k, 2, pad, |s, ch, y, xx| ((s * h1 + y) * w1 + xx) * c1 + ch);
                let p2 = y1.gather(map2, n * h2 * w2, c1 * k * k)?;
                let y2 = activation.apply(p2.matmul(params[2])?.add(params[3])?);
                // Row-major flatten of y2 is already grouped by sample.
                let flat: Arc<[usize]> = (0..n * h2 * w2 * c2).collect();
                let f = y2.gather(flat, n, h2 * w2 * c2)?;
                f.matmul(params[4])?.add(params[5])
            }
        }
    }
}

/// Gather map producing patch rows `(sample, out_y, out_x)` with columns
/// `(channel, ky, kx)`; `src` gives the flat source index of an input pixel.
#[allow(clippy::too_many_arguments)]
fn im2col(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    src: impl Fn(usize, usize, usize, usize) -> usize,
) -> Arc<[usize]> {
    let (ho, wo) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let mut map = Vec::with_capacity(n * ho * wo * c * k * k);
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                map.push(GATHER_ZERO);
                            } else {
                                map.push(src(s, ch, y as usize, xx as usize));
                            }
                        }
                    }
                }
            }
        }
    }
    map.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Graph;

    fn dense(widths: Vec<usize>, bias: bool, zero_final: bool) -> NetworkSpec {
        NetworkSpec {
            arch: Arch::Dense {
                widths,
                activation: Activation::Relu,
                bias,
                zero_final,
            },
            init_seed: 4,
        }
    }

    #[test]
    fn dense_shapes_and_zero_final() {
        let spec = dense(vec![16, 8, 32], true, true);
        assert_eq!(spec.param_shapes(), vec![(16, 8), (1, 8), (8, 32), (1, 32)]);
        let p = spec.init();
        assert!(p[0].iter().any(|v| *v != 0.0));
        assert!(p[1].iter().all(|v| *v == 0.0));
        assert!(p[2].iter().all(|v| *v == 0.0));
        let bound = 1.0 / 4.0;
        assert!(p[0].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let spec = NetworkSpec {
            arch: Arch::Conv {
                input: (2, 4, 5),
                channels: (3, 2),
                kernel: 3,
                out_dim: 4,
                activation: Activation::Tanh,
            },
            init_seed: 1,
        };
        let p = spec.init();
        let n = 2;
        let x = Mat::from_shape_fn((n, 40), |(i, j)| ((i * 40 + j) as f64 * 0.37).sin());
        let g = Graph::new();
        let vars: Vec<_> = p.iter().map(|m| g.constant(m.clone())).collect();
        let out = spec.forward(&vars, g.constant(x.clone())).unwrap().value();

        // Direct loops over the same definition.
        let conv = |inp: &dyn Fn(usize, usize, usize) -> f64, c, h: usize, w: usize, wt: &Mat, b: &Mat, stride| {
            let (ho, wo) = (conv_out(h, 3, stride), conv_out(w, 3, stride));
            let co = wt.dim().1;
            let mut o = vec![0.0; co * ho * wo];
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[[0, oc]];
                        for ch in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let y = (oy * stride + ky) as isize - 1;
                                    let xx = (ox * stride + kx) as isize - 1;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                        acc += wt[[ch * 9 + ky * 3 + kx, oc]] * inp(ch, y as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        o[(oy * wo + ox) * co + oc] = acc.tanh();
                    }
                }
            }
            (o, ho, wo)
        };
        for s in 0..n {
            let (o1, h1, w1) = conv(&|ch, y, xx| x[[s, ch * 20 + y * 5 + xx]], 2, 4, 5, &p[0], &p[1], 1);
            let (o2, _, _) = conv(&|ch, y, xx| o1[(y * w1 + xx) * 3 + ch], 3, h1, w1, &p[2], &p[3], 2);
            for oc in 0..4 {
                let mut acc = p[5][[0, oc]];
                for (i, v) in o2.iter().enumerate() {
                    acc += v * p[4][[i, oc]];
                }
                assert!((acc - out[[s, oc]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let spec = dense(vec![3, 2], false, false);
        let g = Graph::new();
        let p: Vec<_> = spec.init().into_iter().map(|m| g.param(m)).collect();
        let err = spec.forward(&p, g.zeros(4, 5)).unwrap_err();
        assert!(err.to_string().contains("(4, 5)"), "{err}");
    }
}
