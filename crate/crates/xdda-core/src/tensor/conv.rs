//! Tiny 2-d convolution and box-aligned average pooling.

use super::{Tensor, TensorError};

/// Half-open pixel window `[y0,y1) x [x0,x1)` on a feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

impl Tensor {
    /// 2-d convolution on a single image: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`,
    /// `b [Cout]`; zero padding `pad`, square stride.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
        let (cin, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(TensorError::InvalidShape {
                    op: "conv2d",
                    shape: other.to_vec(),
                    reason: "input must be [C,H,W]".into(),
                })
            }
        };
        let (cout, cin_w, kh, kw) = match weight.shape() {
            [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
            other => {
                return Err(TensorError::InvalidShape {
                    op: "conv2d",
                    shape: other.to_vec(),
                    reason: "weight must be [Cout,Cin,kh,kw]".into(),
                })
            }
        };
        if cin != cin_w || bias.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: self.shape().to_vec(),
                reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let x = self.0.data.borrow();
        let wd = weight.0.data.borrow();
        let bd = bias.0.data.borrow();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bd[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let xrow = &x[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                            let wrow = &wd[((co * cin + ci) * kh + ky) * kw..((co * cin + ci) * kh + ky + 1) * kw];
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                acc += xrow[ix - pad] * wrow[kx];
                            }
                        }
                    }
                    out[co * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        drop(x);
        drop(wd);
        drop(bd);

        let (xt, wt, bt) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![cout, ho, wo],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g| {
                let x = xt.0.data.borrow();
                let wd = wt.0.data.borrow();
                let mut dx = vec![0.0; cin * h * w];
                let mut dw = vec![0.0; cout * cin * kh * kw];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[co * ho * wo + oy * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            db[co] += go;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix - pad >= w {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        let xi = ci * h * w + iy * w + ix;
                                        let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                        dx[xi] += go * wd[wi];
                                        dw[wi] += go * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                drop(x);
                drop(wd);
                if xt.requires_grad() {
                    xt.accumulate_grad(&dx);
                }
                if wt.requires_grad() {
                    wt.accumulate_grad(&dw);
                }
                if bt.requires_grad() {
                    bt.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Box-aligned average pooling over a feature map `[C,H,W]`.
    ///
    /// `windows[k]` holds the bin rectangles of proposal `k` (all proposals
    /// must use the same bin count). Output row `k` is channel-major:
    /// `[c0 bin0, c0 bin1, ..., c1 bin0, ...]`, i.e. dimension `C * bins`.
    pub fn box_avg_pool(&self, windows: &[Vec<PixelRect>]) -> Result<Tensor, TensorError> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(TensorError::InvalidShape {
                    op: "box_avg_pool",
                    shape: other.to_vec(),
                    reason: "input must be [C,H,W]".into(),
                })
            }
        };
        if windows.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "box_avg_pool",
                shape: self.shape().to_vec(),
                reason: "no pooling windows".into(),
            });
        }
        let bins = windows[0].len();
        for rects in windows {
            if rects.len() != bins {
                return Err(TensorError::InvalidShape {
                    op: "box_avg_pool",
                    shape: self.shape().to_vec(),
                    reason: "inconsistent bin counts across windows".into(),
                });
            }
            for r in rects {
                if r.y0 >= r.y1 || r.x0 >= r.x1 || r.y1 > h || r.x1 > w {
                    return Err(TensorError::InvalidShape {
                        op: "box_avg_pool",
                        shape: self.shape().to_vec(),
                        reason: format!("window {r:?} outside map {h}x{w} or empty"),
                    });
                }
            }
        }
        let k = windows.len();
        let d = c * bins;
        let x = self.0.data.borrow();
        let mut out = vec![0.0; k * d];
        for (ki, rects) in windows.iter().enumerate() {
            for ci in 0..c {
                for (bi, r) in rects.iter().enumerate() {
                    let mut acc = 0.0;
                    for y in r.y0..r.y1 {
                        for xx in r.x0..r.x1 {
                            acc += x[ci * h * w + y * w + xx];
                        }
                    }
                    out[ki * d + ci * bins + bi] = acc / r.area() as f64;
                }
            }
        }
        drop(x);
        let xt = self.clone();
        let windows_cl = windows.to_vec();
        Ok(Tensor::from_op(
            vec![k, d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if !xt.requires_grad() {
                    return;
                }
                let mut dx = vec![0.0; c * h * w];
                for (ki, rects) in windows_cl.iter().enumerate() {
                    for ci in 0..c {
                        for (bi, r) in rects.iter().enumerate() {
                            let gv = g[ki * d + ci * bins + bi] / r.area() as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            for y in r.y0..r.y1 {
                                for xx in r.x0..r.x1 {
                                    dx[ci * h * w + y * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                xt.accumulate_grad(&dx);
            }),
        ))
    }
}
