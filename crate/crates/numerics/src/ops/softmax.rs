use crate::error::{dim_err, NumericsError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Numerically stable softmax of one slice, written into `out`.
///
/// `-inf` entries are allowed (they receive probability 0) as long as one
/// entry in the slice is finite. NaN anywhere is an error.
pub fn softmax_slice<T: Scalar>(x: &[T], out: &mut [T]) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(NumericsError::Numeric { op: "softmax_rows", msg: "NaN input".into() });
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(NumericsError::Numeric { op: "softmax_rows", msg: format!("row has no finite maximum ({max})") });
    }
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| dim_err("softmax_rows", &sx, &[]))?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        if n > 0 {
            for (src, dst) in xv.chunks(n).zip(out.chunks_mut(n)) {
                softmax_slice(src, dst)?;
            }
        }
        Ok(self.push_op(out, sx, &[x], move |args| {
            let (g, y) = (args.grad, args.output);
            let mut dx = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Sets entries above the diagonal of the trailing `[t, t]` block to
    /// `-inf`, so row `i` can only see columns `0..=i`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let r = sx.len();
        if r < 2 || sx[r - 1] != sx[r - 2] {
            return Err(dim_err("causal_mask", &sx, &[]));
        }
        let t = sx[r - 1];
        let masked = move |flat: usize| {
            let within = flat % (t * t);
            within % t > within / t
        };
        let out =
            self.value(x).iter().enumerate().map(|(i, &v)| if masked(i) { T::neg_infinity() } else { v }).collect();
        Ok(self.push_op(out, sx, &[x], move |args| {
            vec![Some(args.grad.iter().enumerate().map(|(i, &g)| if masked(i) { T::zero() } else { g }).collect())]
        }))
    }

    /// Mean cross-entropy of `logits: [n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(dim_err("cross_entropy", &s, &[targets.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(dim_err("cross_entropy", &s, &[bad]));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            softmax_slice(row, &mut probs[i * c..(i + 1) * c])?;
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[targets[i]];
        }
        let nt = T::of(n as f64);
        let targets = targets.to_vec();
        Ok(self.push_op(vec![loss / nt], vec![], &[logits], move |args| {
            let g = args.grad[0] / nt;
            let mut d = probs;
            for (i, &t) in targets.iter().enumerate() {
                d[i * c + t] -= T::one();
            }
            d.iter_mut().for_each(|v| *v *= g);
            vec![Some(d)]
        }))
    }
}
