use crate::error::{dim_err, NumericsError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Default epsilon for layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel running statistics for batch normalization in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    populated: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Statistics that have never been observed; eval-mode use is an error.
    pub fn empty(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], populated: false }
    }

    /// Zero mean, unit variance, usable immediately.
    pub fn identity(channels: usize) -> Self {
        Self { populated: true, ..Self::empty(channels) }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Self {
        Self { mean, var, populated: true }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_populated(&self) -> bool {
        self.populated
    }

    /// Exponential moving average toward an observed batch.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        if !self.populated {
            self.mean.clone_from(&batch.mean);
            self.var.clone_from(&batch.var);
            self.populated = true;
            return;
        }
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Channel statistics of one training batch (variance is unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| dim_err("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm", &sx, self.shape(gamma)));
        }
        let rows = self.value(x).len().checked_div(d).unwrap_or(0);
        let eps = T::of(eps);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push_op(out, sx, &[x, gamma, beta], move |args| {
            let (g, gv) = (args.grad, args.inputs[1]);
            let mut dx = args.needs[0].then(|| vec![T::zero(); g.len()]);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..d {
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                    let dh = gr[j] * gv[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rstd[r] * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
                    }
                }
            }
            vec![dx, args.needs[1].then_some(dgamma), args.needs[2].then_some(dbeta)]
        }))
    }

    /// Batch normalization of `x: [B, C, ...]` per channel.
    ///
    /// In training mode the statistics come from the batch and are returned
    /// so the caller can fold them into `stats`; in eval mode `stats` is
    /// used and must be populated.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(dim_err("batch_norm", &sx, &[2]));
        }
        let (b, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(dim_err("batch_norm", &sx, self.shape(gamma)));
        }
        if !training && !stats.is_populated() {
            return Err(NumericsError::State("batch_norm in eval mode without running statistics".into()));
        }
        let count = b * spatial;
        if training && count < 2 {
            return Err(NumericsError::Contract(format!(
                "batch_norm training needs at least 2 values per channel, got {count}"
            )));
        }
        let eps_t = T::of(eps);
        let idx = move |bi: usize, ci: usize, s: usize| (bi * c + ci) * spatial + s;
        let xv = self.value(x);
        let (mut mean, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
        let mut batch_stats = None;
        if training {
            let n = T::of(count as f64);
            let mut unbiased = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    for k in 0..spatial {
                        s += xv[idx(bi, ci, k)];
                    }
                }
                let m = s / n;
                let mut ss = T::zero();
                for bi in 0..b {
                    for k in 0..spatial {
                        let dv = xv[idx(bi, ci, k)] - m;
                        ss += dv * dv;
                    }
                }
                mean[ci] = m;
                var[ci] = ss / n;
                unbiased[ci] = ss / T::of((count - 1) as f64);
            }
            batch_stats = Some(BatchStats { mean: mean.clone(), var: unbiased });
        } else {
            mean.clone_from(&stats.mean);
            var.clone_from(&stats.var);
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for k in 0..spatial {
                    let i = idx(bi, ci, k);
                    let h = (xv[i] - mean[ci]) * rstd[ci];
                    xhat[i] = h;
                    out[i] = h * gv[ci] + bv[ci];
                }
            }
        }
        let var_node = self.push_op(out, sx, &[x, gamma, beta], move |args| {
            let (g, gv) = (args.grad, args.inputs[1]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    for k in 0..spatial {
                        let i = idx(bi, ci, k);
                        dgamma[ci] += g[i] * xhat[i];
                        dbeta[ci] += g[i];
                    }
                }
            }
            let dx = args.needs[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let n = T::of(count as f64);
                for ci in 0..c {
                    let scale = gv[ci] * rstd[ci];
                    for bi in 0..b {
                        for k in 0..spatial {
                            let i = idx(bi, ci, k);
                            dx[i] = if training {
                                // batch statistics depend on x
                                scale * (g[i] - dbeta[ci] / n - xhat[i] * dgamma[ci] / n)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, args.needs[1].then_some(dgamma), args.needs[2].then_some(dbeta)]
        });
        Ok((var_node, batch_stats))
    }

    /// Scales each last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| dim_err("l2_normalize", &sx, &[]))?;
        let xv = self.value(x);
        let rows = xv.len().checked_div(d).unwrap_or(0);
        let floor = T::of(1e-12);
        let norms: Vec<T> =
            (0..rows).map(|r| xv[r * d..(r + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt().max(floor)).collect();
        let out = xv.iter().enumerate().map(|(i, &v)| v / norms[i / d]).collect();
        Ok(self.push_op(out, sx, &[x], move |args| {
            let (g, y) = (args.grad, args.output);
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                }
            }
            vec![Some(dx)]
        }))
    }
}
