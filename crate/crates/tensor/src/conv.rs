//! 2-D convolution (im2col + matmul), pooling, nearest-neighbor resizing
//! and zero padding over NCHW batches.

use crate::{Arr, Tensor};
use ndarray::{Array2, Array4, Axis, Ix2, Ix4};

fn to4(a: &Arr) -> Array4<f64> {
    a.clone().into_dimensionality::<Ix4>().expect("expected rank-4 array")
}

fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((b * oh * ow, c * kh * kw));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * kh + ky) * kw + kx]] = x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    input: (usize, usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = input;
    let (kh, kw) = kernel;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut x = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[bi, ci, iy as usize, ix as usize]] += cols[[row, (ci * kh + ky) * kw + kx]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Partition of an axis for adaptive average pooling: torch-style cell
/// boundaries start = floor(i*in/out), end = ceil((i+1)*in/out).
fn adaptive_ranges(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

impl Tensor {
    /// 2-D convolution. `x`: (b, cin, h, w), `weight`: (cout, cin, kh, kw).
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x = self.with_data(to4);
        let wv = weight.with_data(to4);
        let (b, cin, h, w) = x.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x, kh, kw, stride, pad);
        let w2 = wv
            .clone()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        // (b*oh*ow, cout) -> (b, oh, ow, cout) -> (b, cout, oh, ow)
        let out = cols.dot(&w2.t());
        let out = out
            .into_shape_with_order((b, oh, ow, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();

        let (px, pw) = (self.clone(), weight.clone());
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone()],
            Box::new(move |g| {
                let g4 = to4(g);
                // (b, cout, oh, ow) -> (b*oh*ow, cout)
                let g2 = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((b * oh * ow, cout))
                    .unwrap();
                let gw = g2.t().dot(&cols);
                pw.accum_grad(&gw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn());
                let gcols = g2.dot(&w2);
                let gx = col2im(&gcols, (b, cin, h, w), (kh, kw), stride, pad);
                px.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Non-overlapping average pooling with square kernel and stride `k`.
    pub fn avg_pool2d(&self, k: usize) -> Tensor {
        let x = self.with_data(to4);
        let (b, c, h, w) = x.dim();
        assert!(h % k == 0 && w % k == 0, "avg_pool2d expects divisible spatial dims");
        let (oh, ow) = (h / k, w / k);
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        let inv = 1.0 / (k * k) as f64;
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += x[[bi, ci, oy * k + ky, ox * k + kx]];
                            }
                        }
                        out[[bi, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g4 = to4(g);
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g4[[bi, ci, oy, ox]] * inv;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        gx[[bi, ci, oy * k + ky, ox * k + kx]] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Adaptive average pooling to an arbitrary output grid. Handles output
    /// grids larger than the input (cells then replicate their source).
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Tensor {
        let x = self.with_data(to4);
        let (b, c, h, w) = x.dim();
        assert!(out_h >= 1 && out_w >= 1, "adaptive pool target must be >= 1");
        let rows = adaptive_ranges(h, out_h);
        let cols_r = adaptive_ranges(w, out_w);
        let mut out = Array4::<f64>::zeros((b, c, out_h, out_w));
        for bi in 0..b {
            for ci in 0..c {
                for (oy, &(ys, ye)) in rows.iter().enumerate() {
                    for (ox, &(xs, xe)) in cols_r.iter().enumerate() {
                        let mut acc = 0.0;
                        for iy in ys..ye {
                            for ix in xs..xe {
                                acc += x[[bi, ci, iy, ix]];
                            }
                        }
                        out[[bi, ci, oy, ox]] = acc / ((ye - ys) * (xe - xs)) as f64;
                    }
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g4 = to4(g);
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for (oy, &(ys, ye)) in rows.iter().enumerate() {
                            for (ox, &(xs, xe)) in cols_r.iter().enumerate() {
                                let gv = g4[[bi, ci, oy, ox]] / ((ye - ys) * (xe - xs)) as f64;
                                for iy in ys..ye {
                                    for ix in xs..xe {
                                        gx[[bi, ci, iy, ix]] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Global average pooling: (b, c, h, w) -> (b, c).
    pub fn global_avg_pool(&self) -> Tensor {
        let x = self.with_data(to4);
        let (b, c, h, w) = x.dim();
        let inv = 1.0 / (h * w) as f64;
        let out = x.sum_axis(Axis(3)).sum_axis(Axis(2)) * inv;
        let p = self.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g2[[bi, ci]] * inv;
                        gx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(gv);
                    }
                }
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor resize of the spatial dims: source row floor(i*h/oh).
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Tensor {
        let x = self.with_data(to4);
        let (b, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((b, c, out_h, out_w));
        for oy in 0..out_h {
            let iy = oy * h / out_h;
            for ox in 0..out_w {
                let ix = ox * w / out_w;
                for bi in 0..b {
                    for ci in 0..c {
                        out[[bi, ci, oy, ox]] = x[[bi, ci, iy, ix]];
                    }
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g4 = to4(g);
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                for oy in 0..out_h {
                    let iy = oy * h / out_h;
                    for ox in 0..out_w {
                        let ix = ox * w / out_w;
                        for bi in 0..b {
                            for ci in 0..c {
                                gx[[bi, ci, iy, ix]] += g4[[bi, ci, oy, ox]];
                            }
                        }
                    }
                }
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Zero-pad the spatial dims: (b, c, h, w) -> (b, c, h+top+bottom, w+left+right).
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
        let x = self.with_data(to4);
        let (b, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((b, c, h + top + bottom, w + left + right));
        out.slice_mut(ndarray::s![.., .., top..top + h, left..left + w]).assign(&x);
        let p = self.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g4 = to4(g);
                let gx = g4.slice(ndarray::s![.., .., top..top + h, left..left + w]).to_owned();
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }

    /// Crop the spatial dims to `[top, top+out_h) x [left, left+out_w)`.
    pub fn crop2d(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Tensor {
        let x = self.with_data(to4);
        let (b, c, h, w) = x.dim();
        assert!(top + out_h <= h && left + out_w <= w, "crop2d out of bounds");
        let out = x.slice(ndarray::s![.., .., top..top + out_h, left..left + out_w]).to_owned();
        let p = self.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g4 = to4(g);
                let mut gx = Array4::<f64>::zeros((b, c, h, w));
                gx.slice_mut(ndarray::s![.., .., top..top + out_h, left..left + out_w]).assign(&g4);
                p.accum_grad(&gx.into_dyn());
            }),
        )
    }
}

/// The adaptive pooling partition, exposed for tests and for grid math.
pub fn pooling_ranges(input: usize, output: usize) -> Vec<(usize, usize)> {
    adaptive_ranges(input, output)
}
