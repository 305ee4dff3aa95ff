//! Small dense linear algebra on row-major `n x n` matrices in 64-bit.

use rand::Rng;
use rand_distr::StandardNormal;

/// LU factorization with partial pivoting.
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &[f64], n: usize) -> Lu {
        assert_eq!(a.len(), n * n, "matrix must be {n}x{n}");
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let mut piv = col;
            let mut best = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..n {
                    lu.swap(col * n + c, piv * n + c);
                }
                perm.swap(col, piv);
                sign = -sign;
            }
            let d = lu[col * n + col];
            if d == 0.0 {
                continue;
            }
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for c in col + 1..n {
                        lu[r * n + c] -= f * lu[col * n + c];
                    }
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> f64 {
        let diag: f64 = (0..self.n).map(|i| self.lu[i * self.n + i]).product();
        self.sign * diag
    }

    /// `ln |det A|`, summed from the pivots to avoid overflow.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn is_singular(&self) -> bool {
        (0..self.n).any(|i| self.lu[i * self.n + i] == 0.0)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        inv
    }
}

pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = a[r * n + c];
        }
    }
    t
}

/// Random orthogonal matrix: modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (v, u) in tail[0].iter_mut().zip(&head[j]) {
                    *v -= dot * u;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return rows.concat();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn det_and_inverse_of_known_matrix() {
        let a = [4.0, 3.0, 6.0, 3.0];
        let lu = Lu::new(&a, 2);
        assert!((lu.det() - (-6.0)).abs() < 1e-12);
        assert!((lu.log_abs_det() - 6f64.ln()).abs() < 1e-12);
        let inv = lu.inverse();
        let expect = [-0.5, 0.5, 1.0, -2.0 / 3.0];
        for (a, b) in inv.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_detected() {
        let lu = Lu::new(&[1.0, 2.0, 2.0, 4.0], 2);
        assert!(lu.is_singular() || lu.det().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_has_unit_abs_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 5, 16] {
            let q = random_orthogonal(n, &mut rng);
            let lu = Lu::new(&q, n);
            assert!(lu.log_abs_det().abs() < 1e-10, "n={n}");
            let qt = transpose(&q, n);
            let inv = lu.inverse();
            for (a, b) in qt.iter().zip(&inv) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
