use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One cross-entropy term: logits for class c live at `base + c * stride`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CePick {
    pub base: usize,
    pub stride: usize,
    pub label: usize,
    pub weight: f64,
}

/// One orientation-weighted composition: bin i is read from `base + i * stride`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComposeQuery {
    pub base: usize,
    pub stride: usize,
    pub theta: f64,
}

/// Batch-normalization mode; eval mode reads frozen statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch mean and unbiased variance from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxChannels(Var),
    Upsample2x(Var),
    MaxPool2x {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    TileSpatial(Var),
    BceWithLogits {
        x: Var,
        target: Vec<f64>,
    },
    Dice {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
    CrossEntropy {
        x: Var,
        k: usize,
        picks: Vec<CePick>,
    },
    Charbonnier {
        a: Var,
        delta: f64,
    },
    Compose {
        x: Var,
        queries: Vec<ComposeQuery>,
        weights: Vec<f64>,
        k_bins: usize,
    },
    GatherMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    TotalVariation(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Orientation weights e^{k cos(θ−µ_i)} over bin centers, normalized to one.
pub fn orientation_weights(theta: f64, k_bins: usize, k: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..k_bins)
        .map(|i| k * (theta - crate::geo::bin_center(i, k_bins)).cos())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input whose gradient can be read after `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k: kh,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), geom);
        let t = Tensor::new(&[n, o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || self.value(b).len() != shape[1] {
            return Err(Error::shape(format!(
                "bias of {} for input {shape:?}",
                self.value(b).len()
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / inner) % shape[1]];
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ChannelBias { x, b }, &[x, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.value(a).shape(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        Tensor::new(self.value(a).shape(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.unary(a, softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let x = self.value(a).data();
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let m = (0..c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for ch in 0..c {
                    let e = (x[at(ch)] - m).exp();
                    out[at(ch)] = e;
                    s += e;
                }
                for ch in 0..c {
                    out[at(ch)] /= s;
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(t, Op::SoftmaxChannels(a), &[a]))
    }

    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let x = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[(plane * h2 + i) * w2 + j] = x[(plane * h + i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(t, Op::Upsample2x(a), &[a]))
    }

    pub fn maxpool2x(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2x needs even sizes, got {h}×{w}"
            )));
        }
        let x = self.value(a).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let mut best = usize::MAX;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (plane * h + 2 * i + di) * w + 2 * j + dj;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * h2 + i) * w2 + j;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(t, Op::MaxPool2x { x: a, argmax }, &[a]))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat of nothing"))?,
            )
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat needs rank ≥ 2"));
        }
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(format!(
                    "concat: {s:?} does not match {first:?}"
                )));
            }
            channels += s[1];
        }
        let n = first[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batch_norm affine parameters must have one entry per channel",
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(mode, BnMode::Train);
        match mode {
            BnMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..n {
                        s += xs[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut v = 0.0;
                    for bi in 0..n {
                        v += xs[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .map(|x| (x - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                    var[ch] = v / m;
                }
            }
            BnMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(
                        "batch_norm running statistics have the wrong length",
                    ));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, v) in xs.iter().enumerate() {
            let ch = (i / hw) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + b[ch];
        }
        let stats = train.then(|| BnStats {
            var: if m > 1.0 {
                var.iter().map(|v| v * m / (m - 1.0)).collect()
            } else {
                var.clone()
            },
            mean,
        });
        let t = Tensor::new(&[n, c, h, w], out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::domain("mean of an empty tensor"));
        }
        let t = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        Ok(self.push(t, Op::Mean(a), &[a]))
    }

    /// Rows of a V×D table, one per index, as an (indices)×D tensor.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(table).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding table must be 2-d"));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::Bounds { index: i, len: v });
            }
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Broadcasts an N×D tensor to N×D×H×W.
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.value(v).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("tile_spatial expects an N×D tensor"));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(s[0] * s[1] * hw);
        for x in self.value(v).data() {
            out.extend(std::iter::repeat_n(*x, hw));
        }
        let t = Tensor::new(&[s[0], s[1], h, w], out)?;
        Ok(self.push(t, Op::TileSpatial(v), &[v]))
    }

    /// Mean binary cross entropy of logits against {0,1} (or soft) targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xs = self.value(x).data();
        if xs.len() != target.len() || xs.is_empty() {
            return Err(Error::shape("bce target length differs from logits"));
        }
        let total: f64 = xs
            .iter()
            .zip(target)
            .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let t = Tensor::scalar(total / xs.len() as f64);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    /// Soft dice (2Σpg + ε)/(Σp + Σg + ε) per batch item; input is N×… probabilities.
    pub fn dice(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let shape = self.value(p).shape().to_vec();
        let xs = self.value(p).data();
        if xs.len() != target.len() || shape.is_empty() || shape[0] == 0 {
            return Err(Error::shape("dice target length differs from predictions"));
        }
        let n = shape[0];
        let per = xs.len() / n;
        let out = (0..n)
            .map(|b| {
                let r = b * per..(b + 1) * per;
                let (ps, gs) = (&xs[r.clone()], &target[r]);
                let inter: f64 = ps.iter().zip(gs).map(|(a, b)| a * b).sum();
                (2.0 * inter + eps) / (ps.iter().sum::<f64>() + gs.iter().sum::<f64>() + eps)
            })
            .collect();
        let t = Tensor::new(&[n], out)?;
        Ok(self.push(
            t,
            Op::Dice {
                p,
                target: target.to_vec(),
                eps,
            },
            &[p],
        ))
    }

    /// Σ weight · (−log softmax) over the picked logit groups.
    pub fn cross_entropy(&mut self, x: Var, k: usize, picks: &[CePick]) -> Result<Var> {
        let xs = self.value(x).data();
        let mut total = 0.0;
        for p in picks {
            if p.label >= k || p.base + (k - 1) * p.stride >= xs.len() {
                return Err(Error::Bounds {
                    index: p.base + p.label * p.stride,
                    len: xs.len(),
                });
            }
            let logits: Vec<f64> = (0..k).map(|c| xs[p.base + c * p.stride]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += p.weight * (lse - logits[p.label]);
        }
        let t = Tensor::scalar(total);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                x,
                k,
                picks: picks.to_vec(),
            },
            &[x],
        ))
    }

    /// Elementwise δ²(√(1+(a/δ)²) − 1).
    pub fn charbonnier(&mut self, a: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(Error::domain("charbonnier delta must be positive"));
        }
        let t = self.unary(a, |x| {
            delta * delta * ((1.0 + (x / delta).powi(2)).sqrt() - 1.0)
        });
        Ok(self.push(t, Op::Charbonnier { a, delta }, &[a]))
    }

    /// Orientation-weighted mixture of `k_bins` channels at each query point.
    pub fn compose(
        &mut self,
        x: Var,
        k_bins: usize,
        queries: &[ComposeQuery],
        k: f64,
    ) -> Result<Var> {
        let xs = self.value(x).data();
        let mut weights = Vec::with_capacity(queries.len() * k_bins);
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            if k_bins == 0 || q.base + (k_bins - 1) * q.stride >= xs.len() {
                return Err(Error::Bounds {
                    index: q.base,
                    len: xs.len(),
                });
            }
            let w = orientation_weights(q.theta, k_bins, k);
            out.push((0..k_bins).map(|i| w[i] * xs[q.base + i * q.stride]).sum());
            weights.extend(w);
        }
        let t = Tensor::new(&[queries.len()], out)?;
        Ok(self.push(
            t,
            Op::Compose {
                x,
                queries: queries.to_vec(),
                weights,
                k_bins,
            },
            &[x],
        ))
    }

    /// Mean of the flat entries listed in each group.
    pub fn gather_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            if g.is_empty() {
                return Err(Error::domain("mean over an empty region"));
            }
            let mut s = 0.0;
            for &i in g {
                s += *xs.get(i).ok_or(Error::Bounds {
                    index: i,
                    len: xs.len(),
                })?;
            }
            out.push(s / g.len() as f64);
        }
        let t = Tensor::new(&[groups.len()], out)?;
        Ok(self.push(
            t,
            Op::GatherMean {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean squared forward difference along rows and columns of every plane.
    pub fn total_variation(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("total variation needs H, W ≥ 2"));
        }
        let x = self.value(a).data();
        let mut s = 0.0;
        for plane in 0..n * c {
            let at = |i: usize, j: usize| x[(plane * h + i) * w + j];
            for i in 0..h {
                for j in 0..w {
                    if i + 1 < h {
                        s += (at(i + 1, j) - at(i, j)).powi(2);
                    }
                    if j + 1 < w {
                        s += (at(i, j + 1) - at(i, j)).powi(2);
                    }
                }
            }
        }
        let count = n * c * ((h - 1) * w + h * (w - 1));
        let t = Tensor::scalar(s / count as f64);
        Ok(self.push(t, Op::TotalVariation(a), &[a]))
    }

    /// Fingerprint of every piecewise-linear branch taken (relu signs, pool winners).
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2x { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse pass from a one-element root; gradients of tracked inputs are kept on the tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must hold a single value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.pull(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds gradients of parameter nodes into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if node.needs_grad {
                    store.accumulate_grad(*id, g);
                }
            }
        }
    }

    fn pull(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let need_dx = nodes[x.0].needs_grad;
                let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, *geom, need_dx);
                acc(*w, &mut |s| {
                    s.iter_mut().zip(&dw).for_each(|(a, b)| *a += b)
                });
                if need_dx {
                    acc(*x, &mut |s| {
                        s.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
                    });
                }
            }
            Op::ChannelBias { x, b } => {
                let shape = nodes[x.0].value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(*b, &mut |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[(k / inner) % c] += gv;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(p, q)| *p += c * q)
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += q)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * sigmoid(x[k]);
                    }
                });
            }
            Op::SoftmaxChannels(a) => {
                let s4 = nodes[i].value.shape();
                let (n, c, hw) = (s4[0], s4[1], s4[2] * s4[3]);
                acc(*a, &mut |s| {
                    for b in 0..n {
                        for p in 0..hw {
                            let at = |ch: usize| (b * c + ch) * hw + p;
                            let dot: f64 = (0..c).map(|ch| g[at(ch)] * out[at(ch)]).sum();
                            for ch in 0..c {
                                s[at(ch)] += out[at(ch)] * (g[at(ch)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(a) => {
                let s4 = nodes[a.0].value.shape();
                let (planes, h, w) = (s4[0] * s4[1], s4[2], s4[3]);
                acc(*a, &mut |s| {
                    for plane in 0..planes {
                        for r in 0..2 * h {
                            for c in 0..2 * w {
                                s[(plane * h + r / 2) * w + c / 2] +=
                                    g[(plane * 2 * h + r) * 2 * w + c];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2x { x, argmax } => acc(*x, &mut |s| {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }),
            Op::Concat(parts) => {
                let shape = nodes[i].value.shape();
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = nodes[p.0].value.shape()[1] * inner;
                    acc(*p, &mut |s| {
                        for b in 0..shape[0] {
                            for k in 0..block {
                                s[b * block + k] += g[b * total + offset + k];
                            }
                        }
                    });
                    offset += block;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s4 = nodes[x.0].value.shape();
                let (n, c, hw) = (s4[0], s4[1], s4[2] * s4[3]);
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (k, gv) in g.iter().enumerate() {
                    let ch = (k / hw) % c;
                    dgamma[ch] += gv * xhat[k];
                    dbeta[ch] += gv;
                }
                acc(*gamma, &mut |s| {
                    s.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b)
                });
                acc(*beta, &mut |s| {
                    s.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b)
                });
                let m = (n * hw) as f64;
                acc(*x, &mut |s| {
                    for (k, gv) in g.iter().enumerate() {
                        let ch = (k / hw) % c;
                        let dxhat = gv * gam[ch];
                        s[k] += if *train {
                            // dgamma/dbeta hold Σ dy·xhat and Σ dy per channel
                            gam[ch] * inv_std[ch] / m * (m * gv - dbeta[ch] - xhat[k] * dgamma[ch])
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|p| *p += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::Embedding { table, idx } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |s| {
                    for (row, &ix) in idx.iter().enumerate() {
                        for k in 0..d {
                            s[ix * d + k] += g[row * d + k];
                        }
                    }
                });
            }
            Op::TileSpatial(v) => {
                let s4 = nodes[i].value.shape();
                let hw = s4[2] * s4[3];
                acc(*v, &mut |s| {
                    for (k, p) in s.iter_mut().enumerate() {
                        *p += g[k * hw..(k + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::BceWithLogits { x, target } => {
                let xs = val(*x);
                let n = xs.len() as f64;
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (sigmoid(xs[k]) - target[k]) / n;
                    }
                });
            }
            Op::Dice { p, target, eps } => {
                let xs = val(*p);
                let n = out.len();
                let per = xs.len() / n;
                acc(*p, &mut |s| {
                    for b in 0..n {
                        let r = b * per..(b + 1) * per;
                        let (ps, gs) = (&xs[r.clone()], &target[r]);
                        let num = 2.0 * ps.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() + eps;
                        let den = ps.iter().sum::<f64>() + gs.iter().sum::<f64>() + eps;
                        for k in 0..per {
                            s[b * per + k] += g[b] * (2.0 * gs[k] / den - num / (den * den));
                        }
                    }
                });
            }
            Op::CrossEntropy { x, k, picks } => {
                let xs = val(*x);
                acc(*x, &mut |s| {
                    for p in picks {
                        let logits: Vec<f64> = (0..*k).map(|c| xs[p.base + c * p.stride]).collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                        for (c, l) in logits.iter().enumerate() {
                            let prob = (l - m).exp() / z;
                            let onehot = if c == p.label { 1.0 } else { 0.0 };
                            s[p.base + c * p.stride] += g[0] * p.weight * (prob - onehot);
                        }
                    }
                });
            }
            Op::Charbonnier { a, delta } => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * x[k] / (1.0 + (x[k] / delta).powi(2)).sqrt();
                    }
                });
            }
            Op::Compose {
                x,
                queries,
                weights,
                k_bins,
            } => acc(*x, &mut |s| {
                for (qi, q) in queries.iter().enumerate() {
                    for b in 0..*k_bins {
                        s[q.base + b * q.stride] += g[qi] * weights[qi * k_bins + b];
                    }
                }
            }),
            Op::GatherMean { x, groups } => acc(*x, &mut |s| {
                for (gi, grp) in groups.iter().enumerate() {
                    let share = g[gi] / grp.len() as f64;
                    for &k in grp {
                        s[k] += share;
                    }
                }
            }),
            Op::TotalVariation(a) => {
                let s4 = nodes[a.0].value.shape();
                let (planes, h, w) = (s4[0] * s4[1], s4[2], s4[3]);
                let x = val(*a);
                let count = (planes * ((h - 1) * w + h * (w - 1))) as f64;
                let c = 2.0 * g[0] / count;
                acc(*a, &mut |s| {
                    for plane in 0..planes {
                        let at = |i: usize, j: usize| (plane * h + i) * w + j;
                        for r in 0..h {
                            for col in 0..w {
                                if r + 1 < h {
                                    let d = c * (x[at(r + 1, col)] - x[at(r, col)]);
                                    s[at(r + 1, col)] += d;
                                    s[at(r, col)] -= d;
                                }
                                if col + 1 < w {
                                    let d = c * (x[at(r, col + 1)] - x[at(r, col)]);
                                    s[at(r, col + 1)] += d;
                                    s[at(r, col)] -= d;
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
