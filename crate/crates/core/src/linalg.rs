//! Minimal-norm linear least squares via Householder QR with column pivoting
//! followed by a complete orthogonal decomposition of the leading rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative threshold on `|R_kk| / |R_00|` below which a pivot counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct LeastSquares {
    /// Minimal-norm minimizer of `‖A x − b‖`.
    pub solution: Vec<f64>,
    /// `‖A x − b‖` recomputed from the solution.
    pub residual: f64,
    pub rank: usize,
}

struct Reflector {
    v: Vec<f64>,
    beta: f64,
    start: usize,
}

impl Reflector {
    /// Reflector mapping `x` onto a multiple of `e_0`; `x` is the tail starting at `start`.
    fn new(x: &[f64], start: usize) -> Self {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self {
                v: vec![0.0; x.len()],
                beta: 0.0,
                start,
            };
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|e| e * e).sum();
        Self {
            v,
            beta: if vv > 0.0 { 2.0 / vv } else { 0.0 },
            start,
        }
    }

    /// `x ← (I − β v vᵀ) x` on the tail of a full-length vector.
    fn apply(&self, x: &mut [f64]) {
        if self.beta == 0.0 {
            return;
        }
        let tail = &mut x[self.start..];
        let s: f64 = self.v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
        let f = self.beta * s;
        for (t, v) in tail.iter_mut().zip(&self.v) {
            *t -= f * v;
        }
    }
}

/// Column-major working copy.
struct Cols {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

impl Cols {
    fn from_row_major(data: &[f64], rows: usize, ncols: usize) -> Self {
        let cols = (0..ncols)
            .map(|j| (0..rows).map(|i| data[i * ncols + j]).collect())
            .collect();
        Self { rows, cols }
    }

    /// Householder QR; with `pivot`, columns are greedily reordered by
    /// remaining norm. Returns reflectors and the column permutation.
    fn factor(&mut self, pivot: bool) -> (Vec<Reflector>, Vec<usize>) {
        let n = self.cols.len();
        let m = self.rows;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut refl = Vec::new();
        for k in 0..m.min(n) {
            if pivot {
                let mut best = (k, -1.0);
                for j in k..n {
                    let nrm: f64 = self.cols[j][k..].iter().map(|v| v * v).sum();
                    if nrm > best.1 {
                        best = (j, nrm);
                    }
                }
                self.cols.swap(k, best.0);
                perm.swap(k, best.0);
            }
            let h = Reflector::new(&self.cols[k][k..], k);
            for col in self.cols.iter_mut().skip(k) {
                h.apply(col);
            }
            refl.push(h);
        }
        (refl, perm)
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.cols[j][i]
    }
}

/// Minimal-norm least-squares solution of `A x ≈ b`, `A` given as a `[m, n]` tensor.
pub fn least_squares(a: &Tensor, b: &[f64]) -> Result<LeastSquares> {
    let (m, n) = match a.shape() {
        &[m, n] => (m, n),
        s => return Err(Error::shape("least_squares", format!("matrix {:?}", s))),
    };
    if b.len() != m {
        return Err(Error::shape(
            "least_squares",
            format!("rhs of length {} for {} rows", b.len(), m),
        ));
    }
    let mut work = Cols::from_row_major(a.data(), m, n);
    let (refl, perm) = work.factor(true);

    let mut c = b.to_vec();
    for h in &refl {
        h.apply(&mut c);
    }

    let r00 = if m.min(n) > 0 { work.r(0, 0).abs() } else { 0.0 };
    let rank = (0..m.min(n))
        .take_while(|&k| r00 > 0.0 && work.r(k, k).abs() > RANK_TOLERANCE * r00)
        .count();

    let mut u = vec![0.0; n];
    if rank == n {
        // back substitution on R11
        for i in (0..n).rev() {
            let mut s = c[i];
            for j in i + 1..n {
                s -= work.r(i, j) * u[j];
            }
            u[i] = s / work.r(i, i);
        }
    } else if rank > 0 {
        // [R11 R12] (rank x n) = Tᵀ Zᵀ from a QR of its transpose (n x rank)
        let mut top = Cols {
            rows: n,
            cols: (0..rank)
                .map(|i| (0..n).map(|j| if j >= i { work.r(i, j) } else { 0.0 }).collect())
                .collect(),
        };
        let (zrefl, _) = top.factor(false);
        // Tᵀ v = c[..rank], T upper triangular
        let mut v = vec![0.0; n];
        for i in 0..rank {
            let mut s = c[i];
            for (j, vj) in v.iter().enumerate().take(i) {
                s -= top.r(j, i) * vj;
            }
            v[i] = s / top.r(i, i);
        }
        for h in zrefl.iter().rev() {
            h.apply(&mut v);
        }
        u = v;
    }

    let mut solution = vec![0.0; n];
    for (k, &p) in perm.iter().enumerate() {
        solution[p] = u[k];
    }

    let residual = (0..m)
        .map(|i| {
            let row = &a.data()[i * n..(i + 1) * n];
            let ax: f64 = row.iter().zip(&solution).map(|(x, y)| x * y).sum();
            (ax - b[i]).powi(2)
        })
        .sum::<f64>()
        .sqrt();

    Ok(LeastSquares {
        solution,
        residual,
        rank,
    })
}
