//! Column-pivoted Householder QR with numerical rank detection.
//!
//! nalgebra's QR does not pivot, and the smoothers need both a rank-revealing
//! factorization (stratum dummies can be empty in a bootstrap resample) and
//! the orthogonal complement of the column space.

use nalgebra::{DMatrix, DVector};

/// Relative tolerance below which a pivoted column counts as dependent.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Householder vectors, one per eliminated column, each of length `n - k`.
    reflectors: Vec<(DVector<f64>, f64)>,
    /// Upper-triangular factor restricted to the first `rank` pivots.
    r: DMatrix<f64>,
    /// `perm[k]` is the original column placed at position `k`.
    pub perm: Vec<usize>,
    pub rank: usize,
    pub nrows: usize,
    pub ncols: usize,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (n, p) = a.shape();
        let mut work = a.clone();
        let mut perm: Vec<usize> = (0..p).collect();
        let max_norm = (0..p)
            .map(|j| work.column(j).norm())
            .fold(0.0_f64, f64::max);
        let tol = RANK_TOL * max_norm.max(f64::MIN_POSITIVE);
        let mut reflectors = Vec::new();
        let mut rank = 0;
        for k in 0..n.min(p) {
            let (best, best_norm) = (k..p)
                .map(|j| (j, work.view((k, j), (n - k, 1)).norm()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if best_norm <= tol {
                break;
            }
            if best != k {
                work.swap_columns(k, best);
                perm.swap(k, best);
            }
            let x = work.view((k, k), (n - k, 1)).clone_owned();
            let alpha = -x[0].signum() * best_norm;
            let alpha = if x[0] == 0.0 { -best_norm } else { alpha };
            let mut v = DVector::from_iterator(n - k, x.iter().copied());
            v[0] -= alpha;
            let vnorm2 = v.norm_squared();
            let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            for j in k..p {
                let mut col = work.column_mut(j);
                let mut col = col.rows_mut(k, n - k);
                let s = beta * v.dot(&col);
                col.axpy(-s, &v, 1.0);
            }
            reflectors.push((v, beta));
            rank += 1;
        }
        let r = work.view((0, 0), (rank, p)).upper_triangle();
        PivotedQr {
            reflectors,
            r,
            perm,
            rank,
            nrows: n,
            ncols: p,
        }
    }

    /// Applies `Q^T` to each column of `m` in place.
    pub fn apply_qt(&self, m: &mut DMatrix<f64>) {
        for (k, (v, beta)) in self.reflectors.iter().enumerate() {
            for j in 0..m.ncols() {
                let mut col = m.column_mut(j);
                let mut col = col.rows_mut(k, self.nrows - k);
                let s = beta * v.dot(&col);
                if s != 0.0 {
                    col.axpy(-s, v, 1.0);
                }
            }
        }
    }

    pub fn apply_qt_vec(&self, y: &mut DVector<f64>) {
        for (k, (v, beta)) in self.reflectors.iter().enumerate() {
            let mut seg = y.rows_mut(k, self.nrows - k);
            let s = beta * v.dot(&seg);
            seg.axpy(-s, v, 1.0);
        }
    }

    pub fn apply_q_vec(&self, y: &mut DVector<f64>) {
        for (k, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            let mut seg = y.rows_mut(k, self.nrows - k);
            let s = beta * v.dot(&seg);
            seg.axpy(-s, v, 1.0);
        }
    }

    /// `Q^T A Q` for symmetric `A`.
    pub fn congruence(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut b = a.clone();
        self.apply_qt(&mut b);
        let mut c = b.transpose();
        self.apply_qt(&mut c);
        c
    }

    /// Least-squares coefficients in original column order given `Q^T y`.
    /// Columns outside the numerical rank get coefficient zero.
    pub fn solve_from_qty(&self, qty: &DVector<f64>) -> DVector<f64> {
        let r = self.rank;
        let mut z = DVector::zeros(r);
        for i in (0..r).rev() {
            let mut s = qty[i];
            for j in i + 1..r {
                s -= self.r[(i, j)] * z[j];
            }
            z[i] = s / self.r[(i, i)];
        }
        let mut beta = DVector::zeros(self.ncols);
        for k in 0..r {
            beta[self.perm[k]] = z[k];
        }
        beta
    }

    /// Original indices of the columns dropped as linearly dependent.
    pub fn dropped(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.perm[self.rank..].to_vec();
        d.sort_unstable();
        d
    }
}

/// Least squares via pivoted QR.
pub fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, PivotedQr) {
    let qr = PivotedQr::new(x);
    let mut qty = y.clone();
    qr.apply_qt_vec(&mut qty);
    (qr.solve_from_qty(&qty), qr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        DMatrix::from_fn(n, p, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn full_rank_matches_normal_equations() {
        let x = pseudo(40, 5, 1);
        let y = DVector::from_iterator(40, pseudo(40, 1, 2).iter().copied());
        let (b, qr) = lstsq(&x, &y);
        assert_eq!(qr.rank, 5);
        let xtx = x.transpose() * &x;
        let direct = xtx.lu().solve(&(x.transpose() * &y)).unwrap();
        assert!((b - direct).amax() < 1e-10);
    }

    #[test]
    fn dependent_and_zero_columns_are_dropped() {
        let mut x = pseudo(30, 4, 3);
        let c0 = x.column(0).clone_owned();
        let c1 = x.column(1).clone_owned();
        x.set_column(2, &(c0 * 2.0 - c1));
        x.set_column(3, &DVector::zeros(30));
        let qr = PivotedQr::new(&x);
        assert_eq!(qr.rank, 2);
        assert!(qr.dropped().contains(&3));
    }

    #[test]
    fn q_is_orthogonal() {
        let x = pseudo(12, 3, 4);
        let qr = PivotedQr::new(&x);
        let mut id = DMatrix::<f64>::identity(12, 12);
        qr.apply_qt(&mut id);
        let qtq = id.transpose() * &id;
        assert!((qtq - DMatrix::<f64>::identity(12, 12)).amax() < 1e-12);
        // Q^T X has zeros below the rank rows.
        let mut qx = x.clone();
        qr.apply_qt(&mut qx);
        assert!(qx.rows(3, 9).amax() < 1e-12);
        let mut v = DVector::from_element(12, 1.0);
        let orig = v.clone();
        qr.apply_qt_vec(&mut v);
        qr.apply_q_vec(&mut v);
        assert!((v - orig).amax() < 1e-12);
    }
}
