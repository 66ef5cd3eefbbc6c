//! 2-d convolution, transposed convolution and batch normalization on
//! `(channels, height, width)` arrays, via im2col so the inner product runs
//! through ndarray's matmul. Backward passes recompute im2col buffers from
//! stored inputs instead of caching them.

use super::{mat, Tape, Var};
use ndarray::{Array2, ArrayD, Ix3, IxDyn};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub k: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.k.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.k.1) / self.stride.1 + 1,
        )
    }
}

/// Batch statistics observed by a training-mode batch-norm op.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with statistics of the current tensor (per channel).
    Training,
    /// Normalize with the supplied running statistics.
    Inference { mean: Vec<f64>, var: Vec<f64> },
}

fn dims3(v: &ArrayD<f64>) -> (usize, usize, usize) {
    let d = v.shape();
    assert_eq!(d.len(), 3, "expected (c, h, w)");
    (d[0], d[1], d[2])
}

/// Unfold `(c, h, w)` into `(c*kh*kw, oh*ow)` patch columns.
fn im2col(x: &ArrayD<f64>, g: ConvGeom) -> Array2<f64> {
    let (c, h, w) = dims3(x);
    let (kh, kw) = g.k;
    let (oh, ow) = g.out_hw(h, w);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let r = (ci * kh + u) * kw + v;
                for i in 0..oh {
                    let yy = (i * g.stride.0 + u) as isize - g.pad.0 as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xx = (j * g.stride.1 + v) as isize - g.pad.1 as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        cols[[r, i * ow + j]] = x[[ci, yy as usize, xx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `(c, h, w)`.
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, g: ConvGeom) -> ArrayD<f64> {
    let (kh, kw) = g.k;
    let (oh, ow) = g.out_hw(h, w);
    assert_eq!(cols.dim(), (c * kh * kw, oh * ow), "col2im shape");
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let r = (ci * kh + u) * kw + v;
                for i in 0..oh {
                    let yy = (i * g.stride.0 + u) as isize - g.pad.0 as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xx = (j * g.stride.1 + v) as isize - g.pad.1 as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        x[[ci, yy as usize, xx as usize]] += cols[[r, i * ow + j]];
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 2-d convolution: `x (cin, h, w)`, `weight (cout, cin, kh, kw)`,
    /// `bias (1, cout)` -> `(cout, oh, ow)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let (cin, h, w) = dims3(self.value(x));
        let wd = self.value(weight).shape().to_vec();
        assert_eq!(wd[1], cin, "conv2d in-channels");
        assert_eq!((wd[2], wd[3]), geom.k, "conv2d kernel");
        let cout = wd[0];
        let (oh, ow) = geom.out_hw(h, w);

        let cols = im2col(self.value(x), geom);
        let wmat = self
            .value(weight)
            .view()
            .into_shape_with_order((cout, cin * geom.k.0 * geom.k.1))
            .unwrap()
            .to_owned();
        let mut ymat = wmat.dot(&cols);
        let b = mat(self.value(bias));
        for co in 0..cout {
            let mut row = ymat.row_mut(co);
            row += b[[0, co]];
        }
        let val = ymat.into_shape_with_order((cout, oh, ow)).unwrap().into_dyn();
        self.push(
            val,
            Some(Box::new(move |vals, grad, grads| {
                let gmat = grad
                    .view()
                    .into_shape_with_order((cout, oh * ow))
                    .unwrap()
                    .to_owned();
                let cols = im2col(&vals[x.0], geom);
                let wmat = vals[weight.0]
                    .view()
                    .into_shape_with_order((cout, cin * geom.k.0 * geom.k.1))
                    .unwrap()
                    .to_owned();
                let dw = gmat.dot(&cols.t());
                grads.add(
                    weight.0,
                    dw.into_shape_with_order((cout, cin, geom.k.0, geom.k.1))
                        .unwrap()
                        .into_dyn(),
                );
                let db = gmat.sum_axis(ndarray::Axis(1));
                grads.add(
                    bias.0,
                    db.insert_axis(ndarray::Axis(0)).into_dyn(),
                );
                let dcols = wmat.t().dot(&gmat);
                grads.add(x.0, col2im(&dcols, cin, h, w, geom));
            })),
        )
    }

    /// Transposed 2-d convolution: `x (cin, h, w)`, `weight (cin, cout, kh, kw)`,
    /// `bias (1, cout)` -> `(cout, out_h, out_w)`. The output size is explicit;
    /// it must satisfy the adjoint relation `geom.out_hw(out_h, out_w) == (h, w)`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let (cin, h, w) = dims3(self.value(x));
        let wd = self.value(weight).shape().to_vec();
        assert_eq!(wd[0], cin, "conv2d_transpose in-channels");
        assert_eq!((wd[2], wd[3]), geom.k, "conv2d_transpose kernel");
        let cout = wd[1];
        assert_eq!(
            geom.out_hw(out_h, out_w),
            (h, w),
            "conv2d_transpose output geometry"
        );

        let xmat = self
            .value(x)
            .view()
            .into_shape_with_order((cin, h * w))
            .unwrap()
            .to_owned();
        let wmat = self
            .value(weight)
            .view()
            .into_shape_with_order((cin, cout * geom.k.0 * geom.k.1))
            .unwrap()
            .to_owned();
        let cols = wmat.t().dot(&xmat);
        let mut y = col2im(&cols, cout, out_h, out_w, geom);
        let b = mat(self.value(bias));
        for co in 0..cout {
            let mut ch = y.index_axis_mut(ndarray::Axis(0), co);
            ch += b[[0, co]];
        }
        self.push(
            y,
            Some(Box::new(move |vals, grad, grads| {
                let dcols = im2col(grad, geom);
                let xmat = vals[x.0]
                    .view()
                    .into_shape_with_order((cin, h * w))
                    .unwrap()
                    .to_owned();
                let wmat = vals[weight.0]
                    .view()
                    .into_shape_with_order((cin, cout * geom.k.0 * geom.k.1))
                    .unwrap()
                    .to_owned();
                let dx = wmat.dot(&dcols);
                grads.add(
                    x.0,
                    dx.into_shape_with_order((cin, h, w)).unwrap().into_dyn(),
                );
                let dw = xmat.dot(&dcols.t());
                grads.add(
                    weight.0,
                    dw.into_shape_with_order((cin, cout, geom.k.0, geom.k.1))
                        .unwrap()
                        .into_dyn(),
                );
                let mut db = ndarray::Array2::<f64>::zeros((1, cout));
                for co in 0..cout {
                    db[[0, co]] = grad.index_axis(ndarray::Axis(0), co).sum();
                }
                grads.add(bias.0, db.into_dyn());
            })),
        )
    }

    /// Per-channel batch normalization of `(c, h, w)` with affine `(1, c)`
    /// parameters. Returns the output node and, in training mode, the batch
    /// statistics for the caller's running-average update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode,
    ) -> (Var, Option<BatchStats>) {
        let (c, h, w) = dims3(self.value(x));
        let n = (h * w) as f64;
        let vg = mat(self.value(gamma)).row(0).to_owned();
        let vb = mat(self.value(beta)).row(0).to_owned();

        let (mean, var, training) = match &mode {
            BnMode::Training => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let ch = self.value(x).index_axis(ndarray::Axis(0), ci);
                    let mu = ch.sum() / n;
                    mean[ci] = mu;
                    var[ci] = ch.mapv(|v| (v - mu) * (v - mu)).sum() / n;
                }
                (mean, var, true)
            }
            BnMode::Inference { mean, var } => {
                assert_eq!(mean.len(), c);
                (mean.clone(), var.clone(), false)
            }
        };

        let mut xhat = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let xh = (self.value(x)[[ci, i, j]] - mean[ci]) * inv_std[ci];
                    xhat[[ci, i, j]] = xh;
                    out[[ci, i, j]] = xh * vg[ci] + vb[ci];
                }
            }
        }
        let stats = training.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let out_var = self.push(
            out,
            Some(Box::new(move |_vals, grad, grads| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                let mut dgamma = ndarray::Array2::<f64>::zeros((1, c));
                let mut dbeta = ndarray::Array2::<f64>::zeros((1, c));
                for ci in 0..c {
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let gv = grad[[ci, i, j]];
                            sum_g += gv;
                            sum_g_xhat += gv * xhat[[ci, i, j]];
                        }
                    }
                    dgamma[[0, ci]] = sum_g_xhat;
                    dbeta[[0, ci]] = sum_g;
                    if training {
                        let mean_g = sum_g / n;
                        let mean_g_xhat = sum_g_xhat / n;
                        for i in 0..h {
                            for j in 0..w {
                                let gv = grad[[ci, i, j]];
                                dx[[ci, i, j]] = vg[ci]
                                    * inv_std[ci]
                                    * (gv - mean_g - xhat[[ci, i, j]] * mean_g_xhat);
                            }
                        }
                    } else {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[ci, i, j]] = grad[[ci, i, j]] * vg[ci] * inv_std[ci];
                            }
                        }
                    }
                }
                grads.add(x.0, dx);
                grads.add(gamma.0, dgamma.into_dyn());
                grads.add(beta.0, dbeta.into_dyn());
            })),
        );
        (out_var, stats)
    }

    /// Mean over the last (mel) axis of `(c, t, m)`, transposed to `(t, c)`.
    pub fn collapse_mel(&mut self, x: Var) -> Var {
        let (c, t, m) = dims3(self.value(x));
        let mut out = Array2::<f64>::zeros((t, c));
        for ci in 0..c {
            for ti in 0..t {
                let mut s = 0.0;
                for mi in 0..m {
                    s += self.value(x)[[ci, ti, mi]];
                }
                out[[ti, ci]] = s / m as f64;
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, grad, grads| {
                let gm = mat(grad);
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, t, m]));
                for ci in 0..c {
                    for ti in 0..t {
                        let gv = gm[[ti, ci]] / m as f64;
                        for mi in 0..m {
                            dx[[ci, ti, mi]] = gv;
                        }
                    }
                }
                grads.add(x.0, dx);
            })),
        )
    }

    /// View a `(t, m)` feature matrix as a single-channel `(1, t, m)` image.
    pub fn as_image(&mut self, x: Var) -> Var {
        let v = mat(self.value(x)).to_owned();
        let (t, m) = v.dim();
        let val = v.into_shape_with_order((1, t, m)).unwrap().into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, grad, grads| {
                let dg = grad
                    .view()
                    .into_shape_with_order((t, m))
                    .unwrap()
                    .to_owned();
                grads.add(x.0, dg.into_dyn());
            })),
        )
    }

    /// Drop the channel axis of a single-channel `(1, t, m)` image.
    pub fn from_image(&mut self, x: Var) -> Var {
        let v = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, t, m) = v.dim();
        assert_eq!(c, 1, "from_image expects one channel");
        let val = v.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
        self.push(
            val,
            Some(Box::new(move |_vals, grad, grads| {
                let dg = grad.view().insert_axis(ndarray::Axis(0)).to_owned();
                let _ = (t, m);
                grads.add(x.0, dg);
            })),
        )
    }
}
