use crate::error::{dim_err, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::{Tape, Var};

fn b_operand<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    let mr = MatRef::new(data, rows, cols);
    if transposed {
        mr.t()
    } else {
        mr
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), k, n), T::zero(), &mut out);
        Ok(self.push_op(out, vec![m, n], &[a, b], move |args| {
            let (av, bv, g) = (args.inputs[0], args.inputs[1], args.grad);
            let da = args.needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(T::one(), MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), T::zero(), &mut d);
                d
            });
            let db = args.needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(T::one(), MatRef::new(av, m, k).t(), MatRef::new(g, m, n), T::zero(), &mut d);
                d
            });
            vec![da, db]
        }))
    }

    /// Batched product over matching leading dims: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (bk, n) = if transpose_b { (sb[ra - 1], sb[ra - 2]) } else { (sb[ra - 2], sb[ra - 1]) };
        if bk != k {
            return Err(dim_err("bmm", &sa, &sb));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let (brows, bcols) = if transpose_b { (n, k) } else { (k, n) };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    T::one(),
                    MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k),
                    b_operand(&bv[i * k * n..(i + 1) * k * n], brows, bcols, transpose_b),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push_op(out, shape, &[a, b], move |args| {
            let (av, bv, g) = (args.inputs[0], args.inputs[1], args.grad);
            let da = args.needs[0].then(|| {
                let mut d = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    // dA = dY · op(B)ᵀ
                    gemm(
                        T::one(),
                        MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                        b_operand(&bv[i * k * n..(i + 1) * k * n], brows, bcols, transpose_b).t(),
                        T::zero(),
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
                d
            });
            let db = args.needs[1].then(|| {
                let mut d = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let ai = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                    let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // B is [n, k]: dB = dYᵀ · A
                        gemm(T::one(), gi.t(), ai, T::zero(), di);
                    } else {
                        gemm(T::one(), ai.t(), gi, T::zero(), di);
                    }
                }
                d
            });
            vec![da, db]
        }))
    }

    /// `x · w + b` over the last axis of `x`, with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let Some(&d_in) = sx.last() else {
            return Err(dim_err("linear", &sx, &sw));
        };
        if sw.len() != 2 || sw[0] != d_in {
            return Err(dim_err("linear", &sx, &sw));
        }
        let rows = sx.iter().product::<usize>() / d_in.max(1);
        let flat = self.reshape(x, &[rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bcast(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().expect("rank ≥ 1") = sw[1];
        self.reshape(y, &out_shape)
    }
}
