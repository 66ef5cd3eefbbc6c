//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! The whole model trains at desk scale on CPU, so a small tape is all we
//! need: every forward op pushes its value and a backward closure onto a
//! [`Tape`]; [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients. Values are `ndarray::ArrayD<f64>`; by convention vectors are
//! stored as `(1, n)` row matrices and scalars as `(1, 1)`, while the
//! convolution ops in [`conv`] work on `(channels, height, width)` arrays.

mod conv;

pub use conv::{BatchStats, BnMode, ConvGeom};

use ndarray::{ArrayD, Ix2, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn FnOnce(&[ArrayD<f64>], &ArrayD<f64>, &mut Grads)>;

/// Per-node gradient accumulator produced by [`Tape::backward`].
pub struct Grads(Vec<Option<ArrayD<f64>>>);

impl Grads {
    pub(crate) fn add(&mut self, i: usize, g: ArrayD<f64>) {
        match &mut self.0[i] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of the loss w.r.t. node `v`, zeros if the node was unused.
    pub fn get(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.0[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// Computation tape. One tape per forward pass (per mini-batch).
#[derive(Default)]
pub struct Tape {
    vals: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
}

pub fn mat(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d value")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    /// Value of a `(1, 1)` node as a plain scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        self.vals[v.0][[0, 0]]
    }

    pub(crate) fn push(&mut self, val: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.vals.push(val);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// Insert a leaf node (parameter or constant input).
    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(val, None)
    }

    /// Leaf from a 2-d matrix given as rows.
    pub fn leaf2(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        let a = ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).expect("shape/data mismatch");
        self.leaf(a)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf2(1, 1, vec![x])
    }

    /// Run reverse-mode accumulation from `loss` (any shape; seeded with ones).
    pub fn backward(&mut self, loss: Var) -> Grads {
        let mut grads = Grads(vec![None; self.vals.len()]);
        grads.0[loss.0] = Some(ArrayD::ones(self.vals[loss.0].raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(back) = self.backs[i].take() else {
                continue;
            };
            // Interior grads are consumed as we go; leaf grads survive in `grads`.
            let Some(g) = grads.0[i].take() else {
                continue;
            };
            back(&self.vals, &g, &mut grads);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "add shape");
        let val = &self.vals[a.0] + &self.vals[b.0];
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                grads.add(a.0, g.clone());
                grads.add(b.0, g.clone());
            })),
        )
    }

    pub fn add_many(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut val = self.vals[xs[0].0].clone();
        for x in &xs[1..] {
            val += &self.vals[x.0];
        }
        let xs = xs.to_vec();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                for x in xs {
                    grads.add(x.0, g.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = &self.vals[a.0] - &self.vals[b.0];
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                grads.add(a.0, g.clone());
                grads.add(b.0, -g.clone());
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "mul shape");
        let val = &self.vals[a.0] * &self.vals[b.0];
        self.push(
            val,
            Some(Box::new(move |vals, g, grads| {
                grads.add(a.0, g * &vals[b.0]);
                grads.add(b.0, g * &vals[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val = &self.vals[a.0] * c;
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                grads.add(a.0, g * c);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| x.max(0.0));
        self.push(
            val,
            Some(Box::new(move |vals, g, grads| {
                let mask = vals[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                grads.add(a.0, g * &mask);
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::tanh);
        let out = self.push(val, None);
        self.backs[out.0] = Some(Box::new(move |vals, g, grads| {
            let y = &vals[out.0];
            grads.add(a.0, g * &y.mapv(|y| 1.0 - y * y));
        }));
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = self.push(val, None);
        self.backs[out.0] = Some(Box::new(move |vals, g, grads| {
            let y = &vals[out.0];
            grads.add(a.0, g * &y.mapv(|y| y * (1.0 - y)));
        }));
        out
    }

    pub fn exp_of(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::exp);
        let out = self.push(val, None);
        self.backs[out.0] = Some(Box::new(move |vals, g, grads| {
            grads.add(a.0, g * &vals[out.0]);
        }));
        out
    }

    /// Natural log with a floor to keep the backward pass finite.
    pub fn ln(&mut self, a: Var) -> Var {
        const FLOOR: f64 = 1e-300;
        let val = self.vals[a.0].mapv(|x| x.max(FLOOR).ln());
        self.push(
            val,
            Some(Box::new(move |vals, g, grads| {
                grads.add(a.0, g / &vals[a.0].mapv(|x| x.max(FLOOR)));
            })),
        )
    }

    pub fn clamp11(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| x.clamp(-1.0, 1.0));
        self.push(
            val,
            Some(Box::new(move |vals, g, grads| {
                let mask = vals[a.0].mapv(|x| if (-1.0..=1.0).contains(&x) { 1.0 } else { 0.0 });
                grads.add(a.0, g * &mask);
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = mat(&self.vals[a.0]);
        let vb = mat(&self.vals[b.0]);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim");
        let val = va.dot(&vb).into_dyn();
        self.push(
            val,
            Some(Box::new(move |vals, g, grads| {
                let gm = mat(g);
                let va = mat(&vals[a.0]);
                let vb = mat(&vals[b.0]);
                grads.add(a.0, gm.dot(&vb.t()).into_dyn());
                grads.add(b.0, va.t().dot(&gm).into_dyn());
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let val = mat(&self.vals[a.0]).t().to_owned().into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                grads.add(a.0, mat(g).t().to_owned().into_dyn());
            })),
        )
    }

    /// Add a `(1, n)` row vector to every row of `(m, n)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = mat(&self.vals[a.0]).to_owned();
        let vr = mat(&self.vals[row.0]).to_owned();
        assert_eq!(va.ncols(), vr.ncols(), "add_row width");
        let val = (&va + &vr.row(0)).into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                grads.add(a.0, gm.to_owned().into_dyn());
                let summed = gm.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                grads.add(row.0, summed.into_dyn());
            })),
        )
    }

    // ---- shape ops ----

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = mat(&self.vals[a.0]).to_owned();
        let vb = mat(&self.vals[b.0]).to_owned();
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols rows");
        let p = va.ncols();
        let val = ndarray::concatenate(ndarray::Axis(1), &[va.view(), vb.view()])
            .expect("concat")
            .into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                grads.add(a.0, gm.slice(ndarray::s![.., ..p]).to_owned().into_dyn());
                grads.add(b.0, gm.slice(ndarray::s![.., p..]).to_owned().into_dyn());
            })),
        )
    }

    /// Stack `(1, n)` (or `(k, n)`) blocks vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|x| mat(&self.vals[x.0])).collect();
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let val = ndarray::concatenate(ndarray::Axis(0), &views)
            .expect("concat")
            .into_dyn();
        let xs = xs.to_vec();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                let mut r = 0;
                for (x, h) in xs.iter().zip(&heights) {
                    grads.add(
                        x.0,
                        gm.slice(ndarray::s![r..r + h, ..]).to_owned().into_dyn(),
                    );
                    r += h;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = mat(&self.vals[a.0]);
        let (rows, cols) = (va.nrows(), va.ncols());
        let val = va.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
                da.slice_mut(ndarray::s![.., lo..hi]).assign(&mat(g));
                grads.add(a.0, da.into_dyn());
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = mat(&self.vals[a.0]);
        let (rows, cols) = (va.nrows(), va.ncols());
        let val = va.slice(ndarray::s![lo..hi, ..]).to_owned().into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
                da.slice_mut(ndarray::s![lo..hi, ..]).assign(&mat(g));
                grads.add(a.0, da.into_dyn());
            })),
        )
    }

    /// Select rows of an embedding table; repeated ids accumulate gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = mat(&self.vals[table.0]);
        let (rows, cols) = (vt.nrows(), vt.ncols());
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), cols));
        for (k, &i) in ids.iter().enumerate() {
            assert!(i < rows, "gather id {i} out of range {rows}");
            out.row_mut(k).assign(&vt.row(i));
        }
        let ids = ids.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                let mut dt = ndarray::Array2::<f64>::zeros((rows, cols));
                for (k, &i) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(i);
                    row += &gm.row(k);
                }
                grads.add(table.0, dt.into_dyn());
            })),
        )
    }

    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Var {
        let x = mat(&self.vals[a.0])[[i, j]];
        let shape: Vec<usize> = self.vals[a.0].shape().to_vec();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1, 1]), vec![x]).unwrap(),
            Some(Box::new(move |_vals, g, grads| {
                let mut da = ArrayD::zeros(IxDyn(&shape));
                da[[i, j]] = g[[0, 0]];
                grads.add(a.0, da);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].sum();
        let shape: Vec<usize> = self.vals[a.0].shape().to_vec();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1, 1]), vec![s]).unwrap(),
            Some(Box::new(move |_vals, g, grads| {
                grads.add(a.0, ArrayD::from_elem(IxDyn(&shape), g[[0, 0]]));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise mean of a matrix: `(m, n) -> (1, n)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = mat(&self.vals[a.0]);
        let m = va.nrows() as f64;
        let val = (va.sum_axis(ndarray::Axis(0)) / m)
            .insert_axis(ndarray::Axis(0))
            .into_dyn();
        let rows = va.nrows();
        self.push(
            val,
            Some(Box::new(move |_vals, g, grads| {
                let gr = mat(g).row(0).to_owned();
                let mut da = ndarray::Array2::<f64>::zeros((rows, gr.len()));
                for mut r in da.rows_mut() {
                    r.assign(&(&gr / m));
                }
                grads.add(a.0, da.into_dyn());
            })),
        )
    }

    /// Column-wise max of a matrix: `(m, n) -> (1, n)`. Ties route to the first row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let va = mat(&self.vals[a.0]);
        let (rows, cols) = (va.nrows(), va.ncols());
        let mut out = ndarray::Array2::<f64>::zeros((1, cols));
        let mut arg = vec![0usize; cols];
        for j in 0..cols {
            let mut best = va[[0, j]];
            for i in 1..rows {
                if va[[i, j]] > best {
                    best = va[[i, j]];
                    arg[j] = i;
                }
            }
            out[[0, j]] = best;
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
                for (j, &i) in arg.iter().enumerate() {
                    da[[i, j]] += gm[[0, j]];
                }
                grads.add(a.0, da.into_dyn());
            })),
        )
    }

    /// Adaptive mean pooling along columns: `(1, n) -> (1, out_w)`.
    /// Bucket `j` covers `[floor(j*n/out_w), ceil((j+1)*n/out_w))`, never empty.
    pub fn pool_cols_adaptive(&mut self, a: Var, out_w: usize) -> Var {
        let va = mat(&self.vals[a.0]);
        assert_eq!(va.nrows(), 1);
        let n = va.ncols();
        assert!(n >= 1);
        let bounds: Vec<(usize, usize)> = (0..out_w)
            .map(|j| (j * n / out_w, ((j + 1) * n).div_ceil(out_w)))
            .collect();
        let mut out = ndarray::Array2::<f64>::zeros((1, out_w));
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            let mut s = 0.0;
            for k in lo..hi {
                s += va[[0, k]];
            }
            out[[0, j]] = s / (hi - lo) as f64;
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                let mut da = ndarray::Array2::<f64>::zeros((1, n));
                for (j, &(lo, hi)) in bounds.iter().enumerate() {
                    let w = 1.0 / (hi - lo) as f64;
                    for k in lo..hi {
                        da[[0, k]] += gm[[0, j]] * w;
                    }
                }
                grads.add(a.0, da.into_dyn());
            })),
        )
    }

    // ---- normalization / softmax ----

    /// Row-wise masked softmax. `mask[j] == false` columns get probability
    /// exactly 0 and receive no gradient. Every row must see >= 1 open column.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: &[bool]) -> Var {
        let va = mat(&self.vals[a.0]);
        let (rows, cols) = (va.nrows(), va.ncols());
        assert_eq!(cols, mask.len(), "softmax mask width");
        assert!(mask.iter().any(|&m| m), "softmax with all-masked row");
        let mut out = ndarray::Array2::<f64>::zeros((rows, cols));
        for i in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                if mask[j] {
                    mx = mx.max(va[[i, j]]);
                }
            }
            let mut z = 0.0;
            for j in 0..cols {
                if mask[j] {
                    let e = (va[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    z += e;
                }
            }
            for j in 0..cols {
                out[[i, j]] /= z;
            }
        }
        let mask = mask.to_vec();
        let out_var = self.push(out.into_dyn(), None);
        self.backs[out_var.0] = Some(Box::new(move |vals, g, grads| {
            let y = mat(&vals[out_var.0]);
            let gm = mat(g);
            let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
            for i in 0..rows {
                let mut dot = 0.0;
                for j in 0..cols {
                    if mask[j] {
                        dot += gm[[i, j]] * y[[i, j]];
                    }
                }
                for j in 0..cols {
                    if mask[j] {
                        da[[i, j]] = y[[i, j]] * (gm[[i, j]] - dot);
                    }
                }
            }
            grads.add(a.0, da.into_dyn());
        }));
        out_var
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = mat(&self.vals[a.0]).ncols();
        self.softmax_rows_masked(a, &vec![true; cols])
    }

    /// Row-wise layer norm with affine parameters `gamma`, `beta` as `(1, n)`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let va = mat(&self.vals[a.0]).to_owned();
        let vg = mat(&self.vals[gamma.0]).row(0).to_owned();
        let vb = mat(&self.vals[beta.0]).row(0).to_owned();
        let (rows, cols) = va.dim();
        let mut xhat = ndarray::Array2::<f64>::zeros((rows, cols));
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let row = va.row(i);
            let mu = row.mean().unwrap();
            let var = row.mapv(|x| (x - mu) * (x - mu)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..cols {
                xhat[[i, j]] = (va[[i, j]] - mu) * inv;
            }
        }
        let mut out = ndarray::Array2::<f64>::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                out[[i, j]] = xhat[[i, j]] * vg[j] + vb[j];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, g, grads| {
                let gm = mat(g);
                let n = cols as f64;
                let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
                let mut dgamma = ndarray::Array2::<f64>::zeros((1, cols));
                let mut dbeta = ndarray::Array2::<f64>::zeros((1, cols));
                for i in 0..rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let dxhat = gm[[i, j]] * vg[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat[[i, j]];
                        dgamma[[0, j]] += gm[[i, j]] * xhat[[i, j]];
                        dbeta[[0, j]] += gm[[i, j]];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for j in 0..cols {
                        let dxhat = gm[[i, j]] * vg[j];
                        da[[i, j]] =
                            inv_std[i] * (dxhat - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                    }
                }
                grads.add(a.0, da.into_dyn());
                grads.add(gamma.0, dgamma.into_dyn());
                grads.add(beta.0, dbeta.into_dyn());
            })),
        )
    }

    /// L2-normalize each row; all-zero rows stay zero (cosine convention).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = mat(&self.vals[a.0]).to_owned();
        let (rows, cols) = va.dim();
        let mut norms = vec![0.0; rows];
        let mut out = va.clone();
        for i in 0..rows {
            let n = va.row(i).mapv(|x| x * x).sum().sqrt();
            norms[i] = n;
            if n > 0.0 {
                let mut r = out.row_mut(i);
                r /= n;
            }
        }
        let out_var = self.push(out.into_dyn(), None);
        self.backs[out_var.0] = Some(Box::new(move |vals, g, grads| {
            let y = mat(&vals[out_var.0]);
            let gm = mat(g);
            let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
            for i in 0..rows {
                if norms[i] == 0.0 {
                    continue;
                }
                let dot: f64 = (0..cols).map(|j| gm[[i, j]] * y[[i, j]]).sum();
                for j in 0..cols {
                    da[[i, j]] = (gm[[i, j]] - y[[i, j]] * dot) / norms[i];
                }
            }
            grads.add(a.0, da.into_dyn());
        }));
        out_var
    }
}

#[cfg(test)]
mod tests;
