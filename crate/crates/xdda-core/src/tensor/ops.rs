//! Forward operations and their backward closures.

use super::{Tensor, TensorError};

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::InvalidShape {
            op,
            shape: other.to_vec(),
            reason: "expected a 2-d tensor".into(),
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Tensor {
    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = check_matrix("matmul", self)?;
        let (k2, n) = check_matrix("matmul", rhs)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = matmul_raw(&self.0.data.borrow(), &rhs.0.data.borrow(), m, k, n);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    // dA = G . B^T
                    let bt = transpose_raw(&b.0.data.borrow(), k, n);
                    a.accumulate_grad(&matmul_raw(g, &bt, m, n, k));
                }
                if b.requires_grad() {
                    // dB = A^T . G
                    let at = transpose_raw(&a.0.data.borrow(), m, k);
                    b.accumulate_grad(&matmul_raw(&at, g, k, m, n));
                }
            }),
        ))
    }

    /// 2-d transpose.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("transpose", self)?;
        let out = transpose_raw(&self.0.data.borrow(), m, n);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(&transpose_raw(g, n, m));
                }
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("add", self, rhs)?;
        let out: Vec<f64> = {
            let (a, b) = (self.0.data.borrow(), rhs.0.data.borrow());
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(g);
                }
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("sub", self, rhs)?;
        let out: Vec<f64> = {
            let (a, b) = (self.0.data.borrow(), rhs.0.data.borrow());
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    b.accumulate_grad(&neg);
                }
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("mul", self, rhs)?;
        let out: Vec<f64> = {
            let (a, b) = (self.0.data.borrow(), rhs.0.data.borrow());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let bd = b.0.data.borrow();
                    let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, bi)| gi * bi).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.0.data.borrow();
                    let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).collect();
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Elementwise quotient.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        check_same_shape("div", self, rhs)?;
        let out: Vec<f64> = {
            let (a, b) = (self.0.data.borrow(), rhs.0.data.borrow());
            a.iter().zip(b.iter()).map(|(x, y)| x / y).collect()
        };
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let bd = b.0.data.borrow();
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, bi)| gi / bi).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.0.data.borrow();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(ad.iter())
                        .zip(bd.iter())
                        .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                        .collect();
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Row-broadcast bias add: `[m,n] + [n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("add_bias", self)?;
        if bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let out: Vec<f64> = {
            let (x, b) = (self.0.data.borrow(), bias.0.data.borrow());
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += b[j];
                }
            }
            out
        };
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x * c).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x + c).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x.max(0.0)).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let ad = a.0.data.borrow();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(gi, ai)| if *ai > 0.0 { *gi } else { 0.0 })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x.exp()).collect();
        let a = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().zip(saved.iter()).map(|(gi, yi)| gi * yi).collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn log(&self) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x.ln()).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let ad = a.0.data.borrow();
                    let da: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, ai)| gi / ai).collect();
                    drop(ad);
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let a = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(saved.iter())
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Elementwise `x^e` (positive inputs expected for non-integer `e`).
    pub fn pow_scalar(&self, e: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|x| x.powf(e)).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<f64> = if e == 0.0 {
                        vec![0.0; g.len()]
                    } else {
                        let ad = a.0.data.borrow();
                        g.iter()
                            .zip(ad.iter())
                            .map(|(gi, ai)| gi * e * ai.powf(e - 1.0))
                            .collect()
                    };
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Elementwise smooth-L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(&self) -> Tensor {
        let out: Vec<f64> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            })
            .collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let ad = a.0.data.borrow();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(gi, x)| gi * if x.abs() < 1.0 { *x } else { x.signum() })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.0.data.borrow().iter().sum();
        let a = self.clone();
        let numel = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![g[0]; numel]);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let numel = self.numel();
        let s: f64 = self.0.data.borrow().iter().sum();
        let a = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s / numel as f64],
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![g[0] / numel as f64; numel]);
                }
            }),
        )
    }

    /// Per-row sum: `[m,n] -> [m,1]`.
    pub fn row_sum(&self) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("row_sum", self)?;
        let d = self.0.data.borrow();
        let out: Vec<f64> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![m, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Broadcast a column `[m,1]` across `n` columns: `-> [m,n]`.
    pub fn repeat_cols(&self, n: usize) -> Result<Tensor, TensorError> {
        let (m, one) = check_matrix("repeat_cols", self)?;
        if one != 1 {
            return Err(TensorError::InvalidShape {
                op: "repeat_cols",
                shape: self.shape().to_vec(),
                reason: "expected a column vector [m,1]".into(),
            });
        }
        let d = self.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = d[i];
            }
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let da: Vec<f64> = (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Numerically stabilized per-row softmax. Errors on non-finite input.
    pub fn softmax_rows(&self) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("softmax_rows", self)?;
        let d = self.0.data.borrow();
        if d.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        drop(d);
        let a = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &saved[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..n {
                            da[i * n + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Per-row log-softmax (stable). Errors on non-finite input.
    pub fn log_softmax_rows(&self) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("log_softmax_rows", self)?;
        let d = self.0.data.borrow();
        if d.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "log_softmax_rows",
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        drop(d);
        let a = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &saved[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            da[i * n + j] = gr[j] - y[j].exp() * gsum;
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Concatenate 2-d tensors along the last axis (columns).
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "no tensors to concatenate".into(),
            });
        }
        let (m, _) = check_matrix("concat_cols", &parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mi, ni) = check_matrix("concat_cols", p)?;
            if mi != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.0.data.borrow();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let widths_cl = widths.clone();
        Ok(Tensor::from_op(
            vec![m, total],
            out,
            owned.clone(),
            Box::new(move |g| {
                let mut offset = 0;
                for (p, &w) in owned.iter().zip(&widths_cl) {
                    if p.requires_grad() {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += w;
                }
            }),
        ))
    }

    /// Stack 2-d tensors vertically (rows).
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_rows",
                shape: vec![],
                reason: "no tensors to concatenate".into(),
            });
        }
        let (_, n) = check_matrix("concat_rows", &parts[0])?;
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            let (mi, ni) = check_matrix("concat_rows", p)?;
            if ni != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            heights.push(mi);
        }
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(&p.0.data.borrow());
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let heights_cl = heights.clone();
        Ok(Tensor::from_op(
            vec![total, n],
            out,
            owned.clone(),
            Box::new(move |g| {
                let mut offset = 0;
                for (p, &h) in owned.iter().zip(&heights_cl) {
                    if p.requires_grad() {
                        p.accumulate_grad(&g[offset * n..(offset + h) * n]);
                    }
                    offset += h;
                }
            }),
        ))
    }

    /// Gather whole rows by index (duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("gather_rows", self)?;
        for &i in indices {
            if i >= m {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    size: m,
                });
            }
        }
        let d = self.0.data.borrow();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        drop(d);
        let a = self.clone();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[r * n + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Select one entry per row: `out[i,0] = x[i, idx[i]]`.
    pub fn select_per_row(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("select_per_row", self)?;
        if indices.len() != m {
            return Err(TensorError::InvalidShape {
                op: "select_per_row",
                shape: self.shape().to_vec(),
                reason: format!("expected {m} indices, got {}", indices.len()),
            });
        }
        for &j in indices {
            if j >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "select_per_row",
                    index: j,
                    size: n,
                });
            }
        }
        let d = self.0.data.borrow();
        let out: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| d[i * n + j]).collect();
        drop(d);
        let a = self.clone();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![m, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * n];
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * n + j] += g[i];
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Column slice `[m, start..end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let (m, n) = check_matrix("slice_cols", self)?;
        if start > end || end > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: end,
                size: n,
            });
        }
        let w = end - start;
        let d = self.0.data.borrow();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + end]);
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![m, w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    a.accumulate_grad(&da);
                }
            }),
        ))
    }

    /// View with a new shape (same element count, same row-major order).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot reshape {:?} into {shape:?}", self.shape()),
            });
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
            }),
        ))
    }
}
