//! Elementwise ops, linear algebra, reductions, normalizations and the
//! log-softmax / NLL primitives the loss stack is composed from.

use crate::{Arr, Tensor};
use ndarray::{Array2, Array3, Axis, Ix2, Ix3, IxDyn};

fn to2(a: &Arr) -> Array2<f64> {
    a.clone().into_dimensionality::<Ix2>().expect("expected rank-2 array")
}

fn to3(a: &Arr) -> Array3<f64> {
    a.clone().into_dimensionality::<Ix3>().expect("expected rank-3 array")
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let data = self.with_data(|a| other.with_data(|b| a + b));
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accum_grad(g);
                pb.accum_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let data = self.with_data(|a| other.with_data(|b| a - b));
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accum_grad(g);
                pb.accum_grad(&(-g));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = self.with_data(|a| other.with_data(|b| a * b));
        let (pa, pb) = (self.clone(), other.clone());
        let (da, db) = (self.value(), other.value());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accum_grad(&(g * &db));
                pb.accum_grad(&(g * &da));
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a * c);
        let p = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| p.accum_grad(&(g * c))))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.with_data(|a| a + c);
        let p = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| p.accum_grad(g)))
    }

    /// Elementwise product with a constant array (no gradient to `c`).
    pub fn mul_const(&self, c: &Arr) -> Tensor {
        assert_eq!(self.shape(), c.shape().to_vec(), "mul_const shape mismatch");
        let data = self.with_data(|a| a * c);
        let p = self.clone();
        let c = c.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| p.accum_grad(&(g * &c))))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Elementwise sum with a constant array (no gradient to `c`).
    pub fn add_const(&self, c: &Arr) -> Tensor {
        assert_eq!(self.shape(), c.shape().to_vec(), "add_const shape mismatch");
        let data = self.with_data(|a| a + c);
        let p = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| p.accum_grad(g)))
    }

    /// Elementwise natural logarithm. Caller guarantees positive inputs.
    pub fn ln(&self) -> Tensor {
        let x = self.value();
        let data = x.mapv(f64::ln);
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| p.accum_grad(&(g / &x))),
        )
    }

    /// Elementwise absolute value (subgradient 0 at the origin).
    pub fn abs(&self) -> Tensor {
        let x = self.value();
        let data = x.mapv(f64::abs);
        let sgn = x.mapv(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let p = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| p.accum_grad(&(g * &sgn))))
    }

    /// Normalize each row of a rank-2 tensor to unit L2 norm. Rows with
    /// norm below `floor` are left untouched (treated as already unit).
    pub fn l2_normalize_rows(&self, floor: f64) -> Tensor {
        let x = self.with_data(to2);
        let (n, m) = x.dim();
        let norms: Vec<f64> = (0..n)
            .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(floor))
            .collect();
        let mut y = x.clone();
        for (i, norm) in norms.iter().enumerate() {
            let inv = 1.0 / norm;
            y.row_mut(i).mapv_inplace(|v| v * inv);
        }
        let p = self.clone();
        let yc = y.clone();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = to2(g);
                let mut gx = Array2::<f64>::zeros((n, m));
                for i in 0..n {
                    let yi = yc.row(i);
                    let gi = g2.row(i);
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[[i, j]] = (gi[j] - yi[j] * dot) / norms[i];
                    }
                }
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Matrix product of rank-2 tensors: (n, k) x (k, m) -> (n, m).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.with_data(to2);
        let b = other.with_data(to2);
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dimension mismatch");
        let out = a.dot(&b).into_dyn();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g2 = to2(g);
                pa.accum_grad(&g2.dot(&b.t()).into_dyn());
                pb.accum_grad(&a.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Batched matrix product: (b, n, k) x (b, k, m) -> (b, n, m).
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let a = self.with_data(to3);
        let b = other.with_data(to3);
        let (nb, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], nb, "bmm batch mismatch");
        assert_eq!(b.shape()[1], k, "bmm inner dimension mismatch");
        let m = b.shape()[2];
        let mut out = Array3::<f64>::zeros((nb, n, m));
        for i in 0..nb {
            let oi = a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&oi);
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g3 = to3(g);
                let mut ga = Array3::<f64>::zeros(a.raw_dim());
                let mut gb = Array3::<f64>::zeros(b.raw_dim());
                for i in 0..nb {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a.index_axis(Axis(0), i);
                    let bi = b.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                pa.accum_grad(&ga.into_dyn());
                pb.accum_grad(&gb.into_dyn());
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.with_data(|a| a.mapv(|v| v.max(0.0)));
        let mask = self.with_data(|a| a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        let p = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| p.accum_grad(&(g * &mask))))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.value();
        let data = x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = x.mapv(|v| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                });
                p.accum_grad(&(g * &dx));
            }),
        )
    }

    /// Sum of all elements, producing a 0-dimensional tensor.
    pub fn sum_all(&self) -> Tensor {
        let shape = self.shape();
        let data = Arr::from_elem(IxDyn(&[]), self.with_data(|a| a.sum()));
        let p = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                p.accum_grad(&Arr::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    /// Mean of all elements, producing a 0-dimensional tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Tensor {
        let data = self.with_data(log_softmax_arr);
        let softmax = data.mapv(f64::exp);
        let p = self.clone();
        let ndim = data.ndim();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gsum = g.sum_axis(Axis(ndim - 1)).insert_axis(Axis(ndim - 1));
                p.accum_grad(&(g - &(&softmax * &gsum)));
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let data = self.with_data(|a| log_softmax_arr(a).mapv(f64::exp));
        let p = self.clone();
        let s = data.clone();
        let ndim = data.ndim();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let dot = (g * &s).sum_axis(Axis(ndim - 1)).insert_axis(Axis(ndim - 1));
                p.accum_grad(&(&s * &(g - &dot)));
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under rank-2 log-probabilities.
    pub fn nll_mean(&self, labels: &[usize]) -> Tensor {
        let logp = self.with_data(to2);
        let n = logp.shape()[0];
        assert_eq!(labels.len(), n, "nll_mean label count mismatch");
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            acc -= logp[[i, y]];
        }
        let data = Arr::from_elem(IxDyn(&[]), acc / n as f64);
        let p = self.clone();
        let labels = labels.to_vec();
        let shape = self.shape();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                let mut gx = Array2::<f64>::zeros((shape[0], shape[1]));
                for (i, &y) in labels.iter().enumerate() {
                    gx[[i, y]] = -gv / shape[0] as f64;
                }
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = self.value();
        let ndim = x.ndim();
        let d = x.shape()[ndim - 1];
        assert_eq!(gamma.shape(), vec![d], "layer_norm gamma shape");
        assert_eq!(beta.shape(), vec![d], "layer_norm beta shape");
        let last = Axis(ndim - 1);
        let mean = x.mean_axis(last).unwrap().insert_axis(last);
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(last).unwrap().insert_axis(last);
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let gv = gamma.value();
        let bv = beta.value();
        let data = &xhat * &gv + &bv;
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        let xhat_c = xhat.clone();
        Tensor::from_op(
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                // reduce every axis but the last down to (d,)
                let reduce = |a: &Arr| -> Arr {
                    let mut r = a.clone();
                    while r.ndim() > 1 {
                        r = r.sum_axis(Axis(0));
                    }
                    r
                };
                pg.accum_grad(&reduce(&(g * &xhat_c)));
                pb.accum_grad(&reduce(g));
                let dxhat = g * &gv;
                let last = Axis(dxhat.ndim() - 1);
                let s1 = dxhat.sum_axis(last).insert_axis(last);
                let s2 = (&dxhat * &xhat_c).sum_axis(last).insert_axis(last);
                let df = d as f64;
                let gx = &inv_std / df * (&dxhat * df - &s1 - &xhat_c * &s2);
                px.accum_grad(&gx);
            }),
        )
    }

    /// Row-wise bias add: (n, m) + (m,).
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        let x = self.with_data(to2);
        let b = bias.value();
        assert_eq!(b.shape(), [x.shape()[1]], "add_bias_rows shape mismatch");
        let data = (&x + &b).into_dyn();
        let (px, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                px.accum_grad(g);
                pb.accum_grad(&to2(g).sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Token-wise add: (b, n, d) + (n, d). Used for positional embeddings.
    pub fn add_bias_tokens(&self, bias: &Tensor) -> Tensor {
        let x = self.with_data(to3);
        let b = bias.value();
        assert_eq!(b.shape(), &x.shape()[1..], "add_bias_tokens shape mismatch");
        let data = (&x + &b).into_dyn();
        let (px, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                px.accum_grad(g);
                pb.accum_grad(&to3(g).sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Channel bias add: (b, c, h, w) + (c,).
    pub fn add_bias_chan(&self, bias: &Tensor) -> Tensor {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "add_bias_chan expects rank 4");
        let c = x.shape()[1];
        let b = bias.value();
        assert_eq!(b.shape(), [c], "add_bias_chan shape mismatch");
        let breshaped = b.clone().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap();
        let data = &x + &breshaped;
        let (px, pb) = (self.clone(), bias.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                px.accum_grad(g);
                let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                pb.accum_grad(&gb);
            }),
        )
    }

    /// Per-channel affine normalization with constant mean/std:
    /// y[b,c,h,w] = (x[b,c,h,w] - mean[c]) / std[c].
    pub fn normalize_channels(&self, mean: &[f64], std: &[f64]) -> Tensor {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "normalize_channels expects rank 4");
        let c = x.shape()[1];
        assert_eq!(mean.len(), c, "normalize mean length");
        assert_eq!(std.len(), c, "normalize std length");
        let mut data = x;
        for (ci, mut chan) in data.axis_iter_mut(Axis(1)).enumerate() {
            chan.mapv_inplace(|v| (v - mean[ci]) / std[ci]);
        }
        let p = self.clone();
        let std = std.to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = g.clone();
                for (ci, mut chan) in gx.axis_iter_mut(Axis(1)).enumerate() {
                    chan.mapv_inplace(|v| v / std[ci]);
                }
                p.accum_grad(&gx);
            }),
        )
    }
}

/// Stable log-softmax along the last axis of an arbitrary-rank array.
pub fn log_softmax_arr(a: &Arr) -> Arr {
    let last = Axis(a.ndim() - 1);
    let maxes = a.map_axis(last, |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let maxes = maxes.insert_axis(last);
    let shifted = a - &maxes;
    let lse = shifted.mapv(f64::exp).sum_axis(last).mapv(f64::ln).insert_axis(last);
    shifted - &lse
}

/// Softmax along the last axis of an arbitrary-rank array.
pub fn softmax_arr(a: &Arr) -> Arr {
    log_softmax_arr(a).mapv(f64::exp)
}
