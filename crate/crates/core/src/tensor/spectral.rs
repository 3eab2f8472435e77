use rand::Rng;

use super::gemm::gemm;

/// Smallest spectral-norm estimate used as a divisor.
pub const SIGMA_EPS: f64 = 1e-12;
/// Most Gram-matrix squarings in [`SpectralNormState::align`]. After `k`
/// squarings a singular direction with value `s` keeps relative weight
/// `(s / σ₁)^(2^(k+1))`.
pub const ALIGN_MAX_SQUARINGS: usize = 24;

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// `W v` for row-major `rows × cols` W.
fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `Wᵀ u`
fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64], out: &mut [f64]) {
    out[..cols].fill(0.0);
    for r in 0..rows {
        let ur = u[r];
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * ur;
        }
    }
}

impl SpectralNormState {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        if normalize(&mut u) == 0.0 {
            u[0] = 1.0;
        }
        if normalize(&mut v) == 0.0 {
            v[0] = 1.0;
        }
        SpectralNormState { u, v, sigma: 1.0 }
    }

    pub fn rows(&self) -> usize {
        self.u.len()
    }

    pub fn cols(&self) -> usize {
        self.v.len()
    }

    /// Runs `iters` power-iteration steps against `w` and refreshes the
    /// estimate `sigma = uᵀ W v`. With `iters == 0` only the estimate is
    /// refreshed. Returns `false` when W is (numerically) zero, in which
    /// case the vectors are left untouched and sigma is clamped.
    pub fn update(&mut self, w: &[f64], iters: usize) -> bool {
        let (rows, cols) = (self.rows(), self.cols());
        debug_assert_eq!(w.len(), rows * cols);
        let mut u = self.u.clone();
        let mut v = self.v.clone();
        for _ in 0..iters {
            mat_t_vec(w, rows, cols, &u, &mut v);
            if normalize(&mut v) <= SIGMA_EPS {
                self.sigma = SIGMA_EPS;
                return false;
            }
            mat_vec(w, rows, cols, &v, &mut u);
            if normalize(&mut u) <= SIGMA_EPS {
                self.sigma = SIGMA_EPS;
                return false;
            }
        }
        let mut wv = vec![0.0; rows];
        mat_vec(w, rows, cols, &v, &mut wv);
        let sigma: f64 = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
        self.u = u;
        self.v = v;
        if sigma <= SIGMA_EPS {
            self.sigma = SIGMA_EPS;
            return false;
        }
        self.sigma = sigma;
        true
    }
}

impl SpectralNormState {
    /// Moves `u` and `v` onto the top singular pair of `w` and refreshes
    /// sigma. This is power iteration on the smaller Gram matrix `G`
    /// started from the stored vector, with `G^(2^k)` formed by repeated
    /// squaring, so nearly equal top singular values still separate.
    /// Returns `false` for a numerically zero `w`, like [`Self::update`].
    pub fn align(&mut self, w: &[f64]) -> bool {
        let (rows, cols) = (self.rows(), self.cols());
        debug_assert_eq!(w.len(), rows * cols);
        let left = rows <= cols;
        let d = rows.min(cols);
        let mut g = vec![0.0; d * d];
        if left {
            gemm(rows, cols, rows, w, false, w, true, &mut g, 0.0);
        } else {
            gemm(cols, rows, cols, w, true, w, false, &mut g, 0.0);
        }
        let frobenius = |m: &[f64]| m.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n = frobenius(&g);
        if n <= SIGMA_EPS {
            return self.update(w, 1);
        }
        g.iter_mut().for_each(|a| *a /= n);
        let mut sq = vec![0.0; d * d];
        for _ in 0..ALIGN_MAX_SQUARINGS {
            gemm(d, d, d, &g, false, &g, false, &mut sq, 0.0);
            // For unit-Frobenius G, |G²| = 1 exactly when G has rank one.
            let n = frobenius(&sq);
            sq.iter_mut().for_each(|a| *a /= n);
            std::mem::swap(&mut g, &mut sq);
            if n > 1.0 - 1e-15 {
                break;
            }
        }
        let mut x = vec![0.0; d];
        mat_vec(&g, d, d, if left { &self.u } else { &self.v }, &mut x);
        if normalize(&mut x) <= SIGMA_EPS {
            // The stored vector is orthogonal to the top space; any
            // column of G^(2^k) lies in it.
            let j = (0..d)
                .max_by(|&a, &b| {
                    let na: f64 = (0..d).map(|i| g[i * d + a].powi(2)).sum();
                    let nb: f64 = (0..d).map(|i| g[i * d + b].powi(2)).sum();
                    na.total_cmp(&nb)
                })
                .unwrap_or(0);
            x = (0..d).map(|i| g[i * d + j]).collect();
            normalize(&mut x);
        }
        if left {
            self.u = x;
        } else {
            let mut u = vec![0.0; rows];
            mat_vec(w, rows, cols, &x, &mut u);
            normalize(&mut u);
            self.u = u;
        }
        self.update(w, 1)
    }
}

/// Largest singular value of a row-major `rows × cols` matrix via power
/// iteration on `WᵀW` from a fixed deterministic start.
pub fn largest_singular_value(w: &[f64], rows: usize, cols: usize, iters: usize) -> f64 {
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.01 * i as f64).collect();
    normalize(&mut v);
    let mut wv = vec![0.0; rows];
    let mut wtwv = vec![0.0; cols];
    let mut lambda = 0.0;
    for _ in 0..iters {
        mat_vec(w, rows, cols, &v, &mut wv);
        mat_t_vec(w, rows, cols, &wv, &mut wtwv);
        lambda = normalize(&mut wtwv);
        if lambda == 0.0 {
            return 0.0;
        }
        std::mem::swap(&mut v, &mut wtwv);
    }
    lambda.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix_converges_to_top_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = [3.0, 0.0, 0.0, 1.0];
        let mut st = SpectralNormState::new(2, 2, &mut rng);
        assert!(st.update(&w, 60));
        assert!((st.sigma - 3.0).abs() < 1e-6);
        let nu: f64 = st.u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = st.v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((nu - 1.0).abs() < 1e-9 && (nv - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthonormal_matrix_has_unit_norm() {
        let (c, s) = (0.6f64, 0.8f64);
        let w = [c, -s, s, c];
        let mut st = SpectralNormState::new(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        st.update(&w, 5);
        assert!((st.sigma - 1.0).abs() < 1e-9);
    }

    /// Two singular values 0.1% apart defeat 50 plain iterations from a
    /// start that favours the smaller one; alignment still finds the larger.
    #[test]
    fn align_separates_nearly_equal_singular_values() {
        for (rows, cols) in [(3, 5), (5, 3)] {
            let mut w = vec![0.0; rows * cols];
            w[0] = 1.0;
            w[cols + 1] = 1.001;
            w[2 * cols + 2] = 0.5;
            let mut st = SpectralNormState::new(rows, cols, &mut ChaCha8Rng::seed_from_u64(2));
            st.u = vec![0.0; rows];
            st.u[0] = 1.0;
            st.u[1] = 1e-3;
            st.v = vec![0.0; cols];
            st.v[0] = 1.0;
            let mut plain = st.clone();
            plain.update(&w, 50);
            assert!(plain.sigma < 1.0008, "{}", plain.sigma);
            assert!(st.align(&w));
            assert!((st.sigma - 1.001).abs() < 1e-12, "{}", st.sigma);
            assert!((st.u[1].abs() - 1.0).abs() < 1e-9 && (st.v[1].abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn align_matches_long_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (rows, cols) = (7, 11);
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut st = SpectralNormState::new(rows, cols, &mut rng);
        assert!(st.align(&w));
        let reference = largest_singular_value(&w, rows, cols, 100_000);
        assert!((st.sigma - reference).abs() < 1e-10 * reference);
        assert!(!SpectralNormState::new(2, 3, &mut rng).align(&[0.0; 6]));
    }

    #[test]
    fn zero_matrix_is_flagged() {
        let mut st = SpectralNormState::new(2, 3, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(!st.update(&[0.0; 6], 3));
        assert_eq!(st.sigma, SIGMA_EPS);
    }
}
