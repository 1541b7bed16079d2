//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients.
//! All arithmetic is `f64` and single-threaded, so a fixed sequence of
//! operations produces bitwise-identical results across runs, which the
//! checkpoint/resume machinery relies on.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut Gradients)>;

struct TapeOp {
    out: usize,
    back: BackFn,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    fn accum(&mut self, id: usize, contribution: ArrayD<f64>) {
        match &mut self.grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Operation recorder. Create one per forward pass.
pub struct Tape {
    vals: Vec<ArrayD<f64>>,
    ops: Vec<TapeOp>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that skips op recording; forwards only.
    pub fn inference() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.vals[v.0].sum()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    fn push(&mut self, val: ArrayD<f64>) -> Var {
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    fn record<F>(&mut self, out: Var, back: F)
    where
        F: Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut Gradients) + 'static,
    {
        if self.grad_enabled {
            self.ops.push(TapeOp {
                out: out.0,
                back: Box::new(back),
            });
        }
    }

    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(val)
    }

    /// Backpropagate from a scalar root. Seeds the root gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Gradients {
            grads: vec![None; self.vals.len()],
        };
        grads.grads[root.0] = Some(ArrayD::ones(self.vals[root.0].raw_dim()));
        for op in self.ops.iter().rev() {
            let Some(gout) = grads.grads[op.out].clone() else {
                continue;
            };
            (op.back)(&self.vals, &gout, &mut grads);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.push(&self.vals[a.0] + &self.vals[b.0]);
        self.record(out, move |_, g, gr| {
            gr.accum(a.0, g.clone());
            gr.accum(b.0, g.clone());
        });
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.push(&self.vals[a.0] - &self.vals[b.0]);
        self.record(out, move |_, g, gr| {
            gr.accum(a.0, g.clone());
            gr.accum(b.0, g.mapv(|x| -x));
        });
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.push(&self.vals[a.0] * &self.vals[b.0]);
        self.record(out, move |vals, g, gr| {
            gr.accum(a.0, g * &vals[b.0]);
            gr.accum(b.0, g * &vals[a.0]);
        });
        out
    }

    /// `scale * x + shift`, elementwise with scalar coefficients.
    pub fn scalar_affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.push(self.vals[x.0].mapv(|v| scale * v + shift));
        self.record(out, move |_, g, gr| {
            gr.accum(x.0, g.mapv(|v| scale * v));
        });
        out
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.push(self.vals[x.0].mapv(|v| if v >= 0.0 { v } else { slope * v }));
        self.record(out, move |vals, g, gr| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vals[x.0], |gv, &xv| {
                if xv < 0.0 {
                    *gv *= slope;
                }
            });
            gr.accum(x.0, gx);
        });
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.push(self.vals[x.0].mapv(|v| 1.0 / (1.0 + (-v).exp())));
        let out_id = out.0;
        self.record(out, move |vals, g, gr| {
            let y = &vals[out_id];
            gr.accum(x.0, g * &(y * &y.mapv(|v| 1.0 - v)));
        });
        out
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.push(self.vals[x.0].mapv(f64::tanh));
        let out_id = out.0;
        self.record(out, move |vals, g, gr| {
            let y = &vals[out_id];
            gr.accum(x.0, g * &y.mapv(|v| 1.0 - v * v));
        });
        out
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.push(self.vals[x.0].mapv(f64::ln));
        self.record(out, move |vals, g, gr| {
            gr.accum(x.0, g / &vals[x.0]);
        });
        out
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the band.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.push(self.vals[x.0].mapv(|v| v.clamp(lo, hi)));
        self.record(out, move |vals, g, gr| {
            let mut gx = g.clone();
            gx.zip_mut_with(&vals[x.0], |gv, &xv| {
                if !(lo..=hi).contains(&xv) {
                    *gv = 0.0;
                }
            });
            gr.accum(x.0, gx);
        });
        out
    }

    // ---- reductions / shape ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.vals[x.0].raw_dim();
        let out = self.push(ArrayD::from_elem(IxDyn(&[]), self.vals[x.0].sum()));
        self.record(out, move |_, g, gr| {
            let gv = g.sum();
            gr.accum(x.0, ArrayD::from_elem(shape.clone(), gv));
        });
        out
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.0].len() as f64;
        let s = self.sum_all(x);
        self.scalar_affine(s, 1.0 / n, 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let orig = self.vals[x.0].raw_dim();
        let reshaped = self.vals[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let out = self.push(reshaped);
        self.record(out, move |_, g, gr| {
            gr.accum(
                x.0,
                g.clone()
                    .into_shape_with_order(orig.clone())
                    .expect("reshape backward"),
            );
        });
        out
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let joined = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| self.vals[p.0].shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = self.push(joined);
        self.record(out, move |_, g, gr| {
            let mut offset = 0;
            for (id, len) in ids.iter().zip(&sizes) {
                let piece = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                gr.accum(*id, piece);
                offset += len;
            }
        });
        out
    }

    /// Rows of a 2-D matrix selected by index, i.e. an embedding lookup.
    pub fn index_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.vals[table.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("index_rows: table must be 2-D");
        let cols = t.ncols();
        let mut out_arr = Array2::<f64>::zeros((indices.len(), cols));
        for (r, &i) in indices.iter().enumerate() {
            out_arr.row_mut(r).assign(&t.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        let t_shape = self.vals[table.0].raw_dim();
        let out = self.push(out_arr.into_dyn());
        self.record(out, move |_, g, gr| {
            let g2 = g
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("index_rows grad");
            let mut gt = Array2::<f64>::zeros((t_shape[0], t_shape[1]));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = gt.row_mut(i);
                row += &g2.row(r);
            }
            gr.accum(table.0, gt.into_dyn());
        });
        out
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs 2-D");
        let bv = self.vals[b.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs 2-D");
        let out = self.push(av.dot(&bv).into_dyn());
        self.record(out, move |vals, g, gr| {
            let g2 = g
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("matmul grad");
            let av = vals[a.0]
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bv = vals[b.0]
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            gr.accum(a.0, g2.dot(&bv.t()).into_dyn());
            gr.accum(b.0, av.t().dot(&g2).into_dyn());
        });
        out
    }

    /// `mat + row` with the row broadcast over all rows of a 2-D matrix.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Var {
        let m = self.vals[mat.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("add_row lhs 2-D");
        let r = self.vals[row.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("add_row rhs 1-D");
        let out = self.push((&m + &r).into_dyn());
        self.record(out, move |_, g, gr| {
            let g2 = g
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("add_row grad");
            gr.accum(mat.0, g2.to_owned().into_dyn());
            gr.accum(row.0, g2.sum_axis(Axis(0)).into_dyn());
        });
        out
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Row-wise softmax of a 2-D matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let m = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("softmax 2-D");
        let mut y = m.to_owned();
        for mut row in y.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let out = self.push(y.into_dyn());
        let out_id = out.0;
        self.record(out, move |vals, g, gr| {
            let y = vals[out_id]
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros(y.raw_dim());
            for i in 0..y.nrows() {
                let dot: f64 = y.row(i).iter().zip(g2.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..y.ncols() {
                    gx[[i, j]] = y[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Per-row cross entropy from logits; returns a vector of row losses.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let m = self.vals[logits.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("ce 2-D");
        assert_eq!(m.nrows(), targets.len(), "ce: target count");
        let mut losses = Array1::<f64>::zeros(m.nrows());
        let mut probs = Array2::<f64>::zeros(m.raw_dim());
        for i in 0..m.nrows() {
            let row = m.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            losses[i] = lse - row[targets[i]];
            for j in 0..m.ncols() {
                probs[[i, j]] = (row[j] - lse).exp();
            }
        }
        let tg: Vec<usize> = targets.to_vec();
        let probs = Rc::new(probs);
        let out = self.push(losses.into_dyn());
        self.record(out, move |_, g, gr| {
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut gx = (*probs).clone();
            for (i, &t) in tg.iter().enumerate() {
                gx[[i, t]] -= 1.0;
                let gi = g1[i];
                gx.row_mut(i).mapv_inplace(|v| v * gi);
            }
            gr.accum(logits.0, gx.into_dyn());
        });
        out
    }

    /// Mean of the rows of a 2-D matrix, with each column summed in a
    /// canonical value order so the result is invariant to row permutation.
    pub fn mean_rows_orderfree(&mut self, x: Var) -> Var {
        let m = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mean_rows 2-D");
        let k = m.nrows() as f64;
        let mut out_arr = Array1::<f64>::zeros(m.ncols());
        let mut col: Vec<f64> = Vec::with_capacity(m.nrows());
        for j in 0..m.ncols() {
            col.clear();
            col.extend(m.column(j).iter().cloned());
            col.sort_by(f64::total_cmp);
            out_arr[j] = col.iter().sum::<f64>() / k;
        }
        let (rows, cols) = (m.nrows(), m.ncols());
        let out = self.push(out_arr.into_dyn());
        self.record(out, move |_, g, gr| {
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut gx = Array2::<f64>::zeros((rows, cols));
            for mut row in gx.rows_mut() {
                row.assign(&g1.mapv(|v| v / rows as f64));
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    // ---- image ops (NCHW) ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d input NCHW");
        let wv = self.vals[w.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d weight OIKK");
        let (n, cin, h, wdt) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d: channel mismatch");
        assert!(
            h + 2 * pad >= kh && wdt + 2 * pad >= kw,
            "conv2d: input {h}x{wdt} too small for kernel {kh}x{kw} at pad {pad}"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let wmat = wv
            .to_shape((cout, cin * kh * kw))
            .expect("conv2d weight reshape")
            .to_owned();
        let bv = self.vals[b.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv2d bias");

        let mut out_arr = Array4::<f64>::zeros((n, cout, ho, wo));
        let mut cols = Vec::with_capacity(n);
        for ni in 0..n {
            let col = im2col(&xv.index_axis(Axis(0), ni), kh, kw, stride, pad, ho, wo);
            let mut y = wmat.dot(&col);
            for (ci, mut row) in y.rows_mut().into_iter().enumerate() {
                row += bv[ci];
            }
            out_arr
                .index_axis_mut(Axis(0), ni)
                .assign(&y.into_shape_with_order((cout, ho, wo)).unwrap());
            cols.push(col);
        }
        let cols = Rc::new(cols);
        let out = self.push(out_arr.into_dyn());
        let in_shape = (cin, h, wdt);
        self.record(out, move |vals, g, gr| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let wv = vals[w.0]
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
            let mut gw = Array2::<f64>::zeros((cout, cin * kh * kw));
            let mut gb = Array1::<f64>::zeros(cout);
            let mut gx = Array4::<f64>::zeros((n, in_shape.0, in_shape.1, in_shape.2));
            for ni in 0..n {
                let gy = g4
                    .index_axis(Axis(0), ni)
                    .to_shape((cout, ho * wo))
                    .unwrap()
                    .to_owned();
                gw += &gy.dot(&cols[ni].t());
                gb += &gy.sum_axis(Axis(1));
                let gcol = wmat.t().dot(&gy);
                col2im(
                    &gcol,
                    &mut gx.index_axis_mut(Axis(0), ni),
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                );
            }
            gr.accum(
                w.0,
                gw.into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn(),
            );
            gr.accum(b.0, gb.into_dyn());
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("max_pool2 NCHW");
        let (n, c, h, w) = xv.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out_arr = Array4::<f64>::zeros((n, c, ho, wo));
        let mut argmax = vec![0u8; n * c * ho * wo];
        let mut k = 0;
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let vals = [
                            xv[[ni, ci, 2 * i, 2 * j]],
                            xv[[ni, ci, 2 * i, 2 * j + 1]],
                            xv[[ni, ci, 2 * i + 1, 2 * j]],
                            xv[[ni, ci, 2 * i + 1, 2 * j + 1]],
                        ];
                        let mut best = 0;
                        for t in 1..4 {
                            if vals[t] > vals[best] {
                                best = t;
                            }
                        }
                        out_arr[[ni, ci, i, j]] = vals[best];
                        argmax[k] = best as u8;
                        k += 1;
                    }
                }
            }
        }
        let argmax = Rc::new(argmax);
        let out = self.push(out_arr.into_dyn());
        self.record(out, move |_, g, gr| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            let mut k = 0;
            for ni in 0..n {
                for ci in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let best = argmax[k] as usize;
                            let (di, dj) = (best / 2, best % 2);
                            gx[[ni, ci, 2 * i + di, 2 * j + dj]] += g4[[ni, ci, i, j]];
                            k += 1;
                        }
                    }
                }
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Mean over the spatial dims of an NCHW tensor, yielding `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("spatial_mean NCHW");
        let (n, c, h, w) = xv.dim();
        let mut out_arr = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out_arr[[ni, ci]] = xv.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum()
                    / (h * w) as f64;
            }
        }
        let out = self.push(out_arr.into_dyn());
        self.record(out, move |_, g, gr| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g2[[ni, ci]] / (h * w) as f64;
                    gx.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .fill(gv);
                }
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Nearest-neighbour resize of an NCHW tensor to an explicit target size.
    pub fn upsample_nearest(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("upsample NCHW");
        let (n, c, h, w) = xv.dim();
        let row_map: Vec<usize> = (0..ho).map(|i| (i * h) / ho).collect();
        let col_map: Vec<usize> = (0..wo).map(|j| (j * w) / wo).collect();
        let mut out_arr = Array4::<f64>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for (i, &si) in row_map.iter().enumerate() {
                    for (j, &sj) in col_map.iter().enumerate() {
                        out_arr[[ni, ci, i, j]] = xv[[ni, ci, si, sj]];
                    }
                }
            }
        }
        let row_map = Rc::new(row_map);
        let col_map = Rc::new(col_map);
        let out = self.push(out_arr.into_dyn());
        self.record(out, move |_, g, gr| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for (i, &si) in row_map.iter().enumerate() {
                        for (j, &sj) in col_map.iter().enumerate() {
                            gx[[ni, ci, si, sj]] += g4[[ni, ci, i, j]];
                        }
                    }
                }
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Crop `[1, C, ch, cw]` out of sample `n` of an NCHW tensor. Gradients
    /// scatter back into the source window, so overlapping crops accumulate.
    pub fn crop(&mut self, x: Var, n: usize, y0: usize, x0: usize, ch: usize, cw: usize) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("crop NCHW");
        let (nn, c, h, w) = xv.dim();
        assert!(n < nn && y0 + ch <= h && x0 + cw <= w, "crop out of bounds");
        let piece = xv
            .slice(ndarray::s![n..n + 1, .., y0..y0 + ch, x0..x0 + cw])
            .to_owned();
        let out = self.push(piece.into_dyn());
        self.record(out, move |_, g, gr| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut gx = Array4::<f64>::zeros((nn, c, h, w));
            gx.slice_mut(ndarray::s![n..n + 1, .., y0..y0 + ch, x0..x0 + cw])
                .assign(&g4);
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Permute axes; backward applies the inverse permutation.
    pub fn permute(&mut self, x: Var, order: &[usize]) -> Var {
        let permuted = self.vals[x.0]
            .view()
            .permuted_axes(IxDyn(order))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; order.len()];
        for (dst, &src) in order.iter().enumerate() {
            inverse[src] = dst;
        }
        let out = self.push(permuted);
        self.record(out, move |_, g, gr| {
            gr.accum(
                x.0,
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned(),
            );
        });
        out
    }

    /// Mean over the height axis of an NCHW tensor, transposed to `[N, W, C]`
    /// so each output row is one latent column of the feature map.
    pub fn collapse_height(&mut self, x: Var) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("collapse_height NCHW");
        let (n, c, h, w) = xv.dim();
        let mut out_arr = ArrayD::<f64>::zeros(IxDyn(&[n, w, c]));
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..w {
                    let mut s = 0.0;
                    for i in 0..h {
                        s += xv[[ni, ci, i, j]];
                    }
                    out_arr[[ni, j, ci]] = s / h as f64;
                }
            }
        }
        let out = self.push(out_arr);
        self.record(out, move |_, g, gr| {
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for j in 0..w {
                        let gv = g[[ni, j, ci]] / h as f64;
                        for i in 0..h {
                            gx[[ni, ci, i, j]] = gv;
                        }
                    }
                }
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Select index `i` along a given axis, keeping the axis with length 1.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Var {
        let shape = self.vals[x.0].raw_dim();
        assert!(i < shape[axis], "select out of bounds");
        let piece = self.vals[x.0]
            .slice_axis(Axis(axis), ndarray::Slice::from(i..i + 1))
            .to_owned();
        let out = self.push(piece);
        self.record(out, move |_, g, gr| {
            let mut gx = ArrayD::<f64>::zeros(shape.clone());
            gx.slice_axis_mut(Axis(axis), ndarray::Slice::from(i..i + 1))
                .assign(g);
            gr.accum(x.0, gx);
        });
        out
    }

    /// Instance normalization over the spatial dims of each `(n, c)` slice.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("instance_norm NCHW");
        let (n, c, h, w) = xv.dim();
        let m = (h * w) as f64;
        let mut out_arr = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mu = plane.sum() / m;
                let var = plane.mapv(|v| (v - mu) * (v - mu)).sum() / m;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[[ni, ci]] = is;
                let mut dst = out_arr.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                dst.assign(&plane.mapv(|v| (v - mu) * is));
            }
        }
        let inv_std = Rc::new(inv_std);
        let out = self.push(out_arr.into_dyn());
        let out_id = out.0;
        self.record(out, move |vals, g, gr| {
            let y = vals[out_id]
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let yv = y.index_axis(Axis(0), ni);
                    let yv = yv.index_axis(Axis(0), ci);
                    let gv = g4.index_axis(Axis(0), ni);
                    let gv = gv.index_axis(Axis(0), ci);
                    let gmean = gv.sum() / m;
                    let gy = yv
                        .iter()
                        .zip(gv.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / m;
                    let is = inv_std[[ni, ci]];
                    let mut dst = gx.index_axis_mut(Axis(0), ni);
                    let mut dst = dst.index_axis_mut(Axis(0), ci);
                    for ((d, &yvv), &gvv) in dst.iter_mut().zip(yv.iter()).zip(gv.iter()) {
                        *d = is * (gvv - gmean - yvv * gy);
                    }
                }
            }
            gr.accum(x.0, gx.into_dyn());
        });
        out
    }

    /// Per-channel affine over an NCHW tensor: `x * scale[n,c] + shift[n,c]`.
    pub fn affine_nc(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("affine_nc NCHW");
        let sv = self.vals[scale.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("affine_nc scale");
        let bv = self.vals[shift.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("affine_nc shift");
        let (n, c, h, w) = xv.dim();
        let mut out_arr = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mut dst = out_arr.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                dst.assign(&plane.mapv(|v| v * sv[[ni, ci]] + bv[[ni, ci]]));
            }
        }
        let out = self.push(out_arr.into_dyn());
        self.record(out, move |vals, g, gr| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let xv = vals[x.0]
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let sv = vals[scale.0]
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut gx = Array4::<f64>::zeros((n, c, h, w));
            let mut gs = Array2::<f64>::zeros((n, c));
            let mut gb = Array2::<f64>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = xv.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    gs[[ni, ci]] = gp.iter().zip(xp.iter()).map(|(a, b)| a * b).sum();
                    gb[[ni, ci]] = gp.sum();
                    let mut dst = gx.index_axis_mut(Axis(0), ni);
                    let mut dst = dst.index_axis_mut(Axis(0), ci);
                    dst.assign(&gp.mapv(|v| v * sv[[ni, ci]]));
                }
            }
            gr.accum(x.0, gx.into_dyn());
            gr.accum(scale.0, gs.into_dyn());
            gr.accum(shift.0, gb.into_dyn());
        });
        out
    }
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut dst = col.row_mut(row);
                for i in 0..ho {
                    let src_i = (i * stride + ki) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let src_j = (j * stride + kj) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        dst[i * wo + j] = x[[ci, src_i as usize, src_j as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = gx.dim();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = gcol.row(row);
                for i in 0..ho {
                    let dst_i = (i * stride + ki) as isize - pad as isize;
                    if dst_i < 0 || dst_i >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let dst_j = (j * stride + kj) as isize - pad as isize;
                        if dst_j < 0 || dst_j >= w as isize {
                            continue;
                        }
                        gx[[ci, dst_i as usize, dst_j as usize]] += src[i * wo + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_array(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(sum of f(x)) / dx for each leaf entry.
    fn gradcheck<F>(shape: &[usize], seed: u64, tol: f64, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = rand_array(&mut rng, shape);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let root = tape.sum_all(y);
        let grads = tape.backward(root);
        let gx = grads.get(x).expect("no gradient reached the leaf").clone();

        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fp = {
                let mut t = Tape::inference();
                let v = t.leaf(xp);
                let y = f(&mut t, v);
                t.value(y).sum()
            };
            let fm = {
                let mut t = Tape::inference();
                let v = t.leaf(xm);
                let y = f(&mut t, v);
                t.value(y).sum()
            };
            let num = (fp - fm) / (2.0 * h);
            let ana = gx.as_slice().unwrap()[idx];
            let denom = num.abs().max(ana.abs()).max(1.0);
            assert!(
                ((num - ana) / denom).abs() < tol,
                "grad mismatch at {idx}: numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn gradcheck_elementwise() {
        gradcheck(&[3, 4], 1, 1e-6, |t, x| {
            let a = t.scalar_affine(x, 1.7, -0.3);
            let b = t.tanh(a);
            let c = t.sigmoid(b);
            t.mul(c, b)
        });
        gradcheck(&[2, 5], 2, 1e-6, |t, x| {
            let a = t.leaky_relu(x, 0.2);
            let b = t.scalar_affine(a, 0.5, 2.0);
            t.ln(b)
        });
        gradcheck(&[6], 3, 1e-5, |t, x| t.clamp(x, -0.5, 0.5));
    }

    #[test]
    fn gradcheck_add_sub_mul_paths() {
        gradcheck(&[4, 3], 4, 1e-6, |t, x| {
            let y = t.tanh(x);
            let s = t.add(x, y);
            let d = t.sub(s, y);
            t.mul(d, s)
        });
    }

    #[test]
    fn gradcheck_matmul_linear() {
        gradcheck(&[3, 4], 5, 1e-6, |t, x| {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let w = t.leaf(rand_array(&mut rng, &[4, 2]));
            let b = t.leaf(rand_array(&mut rng, &[2]));
            let y = t.linear(x, w, b);
            t.tanh(y)
        });
        // gradient w.r.t. the weight side
        gradcheck(&[4, 2], 6, 1e-6, |t, w| {
            let mut rng = ChaCha12Rng::seed_from_u64(98);
            let x = t.leaf(rand_array(&mut rng, &[3, 4]));
            t.matmul(x, w)
        });
    }

    #[test]
    fn gradcheck_softmax_and_ce() {
        gradcheck(&[3, 5], 7, 1e-6, |t, x| {
            let p = t.softmax_rows(x);
            t.mul(p, p)
        });
        gradcheck(&[4, 6], 8, 1e-6, |t, x| t.cross_entropy_rows(x, &[1, 0, 5, 2]));
    }

    #[test]
    fn gradcheck_conv_and_pool() {
        gradcheck(&[2, 2, 6, 7], 9, 1e-5, |t, x| {
            let mut rng = ChaCha12Rng::seed_from_u64(97);
            let w = t.leaf(rand_array(&mut rng, &[3, 2, 3, 3]));
            let b = t.leaf(rand_array(&mut rng, &[3]));
            let y = t.conv2d(x, w, b, 1, 1);
            t.tanh(y)
        });
        // stride-2 conv, kernel 4, the patch critic geometry
        gradcheck(&[1, 1, 8, 8], 10, 1e-5, |t, x| {
            let mut rng = ChaCha12Rng::seed_from_u64(96);
            let w = t.leaf(rand_array(&mut rng, &[2, 1, 4, 4]));
            let b = t.leaf(rand_array(&mut rng, &[2]));
            t.conv2d(x, w, b, 2, 1)
        });
        // conv weight gradient
        gradcheck(&[3, 2, 3, 3], 11, 1e-5, |t, w| {
            let mut rng = ChaCha12Rng::seed_from_u64(95);
            let x = t.leaf(rand_array(&mut rng, &[2, 2, 5, 6]));
            let b = t.leaf(rand_array(&mut rng, &[3]));
            t.conv2d(x, w, b, 1, 1)
        });
        gradcheck(&[2, 3, 6, 8], 12, 1e-5, |t, x| {
            let y = t.max_pool2(x);
            t.tanh(y)
        });
    }

    #[test]
    fn gradcheck_norms_and_affine() {
        gradcheck(&[2, 3, 4, 5], 13, 1e-5, |t, x| t.instance_norm(x, 1e-5));
        gradcheck(&[2, 3, 4, 4], 14, 1e-6, |t, x| {
            let mut rng = ChaCha12Rng::seed_from_u64(94);
            let s = t.leaf(rand_array(&mut rng, &[2, 3]));
            let b = t.leaf(rand_array(&mut rng, &[2, 3]));
            t.affine_nc(x, s, b)
        });
        // scale-side gradient of affine_nc
        gradcheck(&[2, 3], 15, 1e-6, |t, s| {
            let mut rng = ChaCha12Rng::seed_from_u64(93);
            let x = t.leaf(rand_array(&mut rng, &[2, 3, 4, 4]));
            let b = t.leaf(rand_array(&mut rng, &[2, 3]));
            t.affine_nc(x, s, b)
        });
    }

    #[test]
    fn gradcheck_shape_ops() {
        gradcheck(&[2, 2, 4, 6], 16, 1e-5, |t, x| {
            let up = t.upsample_nearest(x, 7, 13);
            t.tanh(up)
        });
        gradcheck(&[2, 1, 6, 9], 17, 1e-6, |t, x| {
            let a = t.crop(x, 0, 1, 2, 4, 5);
            let b = t.crop(x, 1, 0, 3, 4, 5);
            let c = t.concat(0, &[a, b]);
            t.mul(c, c)
        });
        gradcheck(&[5, 3], 18, 1e-6, |t, x| {
            let y = t.index_rows(x, &[0, 2, 2, 4]);
            t.tanh(y)
        });
        gradcheck(&[4, 3], 19, 1e-6, |t, x| t.mean_rows_orderfree(x));
        gradcheck(&[2, 3, 3, 4], 20, 1e-6, |t, x| {
            let m = t.spatial_mean(x);
            t.tanh(m)
        });
        gradcheck(&[3, 4], 21, 1e-6, |t, x| {
            let r = t.reshape(x, &[2, 6]);
            t.mul(r, r)
        });
        gradcheck(&[3, 4, 2], 23, 1e-6, |t, x| {
            let s = t.select(x, 1, 2);
            t.tanh(s)
        });
        gradcheck(&[2, 3, 4], 24, 1e-6, |t, x| {
            let p = t.permute(x, &[2, 0, 1]);
            t.tanh(p)
        });
        gradcheck(&[2, 3, 4, 5], 25, 1e-6, |t, x| {
            let c = t.collapse_height(x);
            t.tanh(c)
        });
        gradcheck(&[3], 22, 1e-6, |t, x| {
            let mut rng = ChaCha12Rng::seed_from_u64(92);
            let m = t.leaf(rand_array(&mut rng, &[4, 3]));
            t.add_row(m, x)
        });
    }

    #[test]
    fn mean_rows_orderfree_is_permutation_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        let base = rand_array(&mut rng, &[7, 5]);
        let m = base
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut perm = m.clone();
        // reverse row order
        for (i, row) in m.rows().into_iter().enumerate() {
            perm.row_mut(m.nrows() - 1 - i).assign(&row);
        }
        let mut t = Tape::inference();
        let a = t.leaf(m.into_dyn());
        let b = t.leaf(perm.into_dyn());
        let ma = t.mean_rows_orderfree(a);
        let mb = t.mean_rows_orderfree(b);
        assert_eq!(t.value(ma), t.value(mb));
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // y = x * x reused twice: dy/dx must double-count correctly
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let sq = t.mul(x, x);
        let s = t.add(sq, sq);
        let root = t.sum_all(s);
        let g = t.backward(root);
        assert_eq!(g.get(x).unwrap()[0], 12.0);
    }
}
