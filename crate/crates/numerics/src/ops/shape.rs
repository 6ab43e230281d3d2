use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::numel;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the input flat index it reads under `axes`.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    map
}

/// `(outer, axis extent, inner)` decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push_op(out, shape.to_vec(), &[a], |args| vec![Some(args.grad.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(dim_err("permute", &shape, axes));
        }
        let map = permute_index(&shape, axes);
        let src = self.value(a);
        let out = map.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        Ok(self.push_op(out, out_shape, &[a], move |args| {
            let mut d = vec![T::zero(); map.len()];
            for (o, &i) in map.iter().enumerate() {
                d[i] = args.grad[o];
            }
            vec![Some(d)]
        }))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(dim_err("transpose", self.shape(a), &[2]));
        }
        self.permute(a, &[1, 0])
    }

    /// Joins values along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(config_err("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(dim_err("concat", &base, s));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total_axis: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&self.value(p)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.push_op(out, shape, parts, move |args| {
            let mut grads: Vec<Vec<T>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    g.extend_from_slice(&args.grad[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads.into_iter().zip(args.needs).map(|(g, &n)| n.then_some(g)).collect()
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err("slice", &shape, &[axis, start, len]));
        }
        let (outer, extent, inner) = split_at_axis(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_op(out, out_shape, &[a], move |args| {
            let mut d = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                d[base..base + len * inner].copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }))
    }

    /// Rows `idx` of `table: [n, d]`, giving `[idx.len(), d]`. Embedding
    /// lookup; the gradient scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(dim_err("gather_rows", &shape, &[2]));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err("gather_rows", &shape, &[bad]));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        let rows = idx.len();
        Ok(self.push_op(out, vec![rows, d], &[table], move |args| {
            let mut g = vec![T::zero(); n * d];
            for (r, &i) in idx.iter().enumerate() {
                g[i * d..(i + 1) * d].iter_mut().zip(&args.grad[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            vec![Some(g)]
        }))
    }
}
