//! Forward/backward loops shared by the tape primitives.

/// `C[m,n] = A[m,k] B[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v;
        }
    }
    out
}

/// `C[m,k] = A[m,n] B[k,n]^T`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = dot(arow, brow);
        }
    }
    out
}

/// `C[k,n] = A[m,k]^T B[m,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut acc = vec![0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    acc
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0f64; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Geometry of a batched 1-D convolution `[N, Cin, Lin] -> [N, Cout, Lout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> usize {
        (self.in_len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn src(&self, t: usize, kk: usize) -> Option<usize> {
        let pos = (t * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.in_len).then_some(pos as usize)
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let lout = g.out_len();
    let mut out = vec![0f64; g.batch * g.out_ch * lout];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            for t in 0..lout {
                let mut acc = b[co];
                for ci in 0..g.in_ch {
                    let xrow = &x[(n * g.in_ch + ci) * g.in_len..];
                    let wrow = &w[(co * g.in_ch + ci) * g.kernel..];
                    for kk in 0..g.kernel {
                        if let Some(s) = g.src(t, kk) {
                            acc += wrow[kk] * xrow[s];
                        }
                    }
                }
                out[(n * g.out_ch + co) * lout + t] = acc;
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Conv1dGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lout = g.out_len();
    let mut dx = vec![0f64; x.len()];
    let mut dw = vec![0f64; w.len()];
    let mut db = vec![0f64; g.out_ch];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            for t in 0..lout {
                let gv = grad[(n * g.out_ch + co) * lout + t];
                if gv == 0.0 {
                    continue;
                }
                db[co] += gv;
                for ci in 0..g.in_ch {
                    let xoff = (n * g.in_ch + ci) * g.in_len;
                    let woff = (co * g.in_ch + ci) * g.kernel;
                    for kk in 0..g.kernel {
                        if let Some(s) = g.src(t, kk) {
                            dw[woff + kk] += gv * x[xoff + s];
                            dx[xoff + s] += gv * w[woff + kk];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
    }

    #[test]
    fn conv_output_length() {
        let g = Conv1dGeom { batch: 1, in_ch: 1, out_ch: 8, in_len: 200, kernel: 15, stride: 8, padding: 7 };
        assert_eq!(g.out_len(), 25);
    }
}
