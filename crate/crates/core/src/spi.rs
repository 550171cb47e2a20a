//! Structured power iterations (SPI).
//!
//! Computes a rank-limited factorization `(Q, G)` of the gradient
//! `grad = A' * Delta` without ever forming the `h_in x h_out` gradient.
//! The power recurrence runs through the factors:
//!
//! ```text
//! C = A A'            (N x N)
//! B = Delta' C        (h_out x N)
//! g_(k+1) = B (Delta g_k)        == (grad' grad) g_k
//! ```
//!
//! so each step costs `O(N * (h_in + h_out) + N^2)` — linear in layer width.
//! Components are peeled by deflating the operator (`- sigma_m^2 g_m g_m'`)
//! and extraction stops early once a component's energy drops below
//! `theta^2` of the first component's, which is what makes the effective
//! rank data-dependent rather than fixed at the requested maximum.
//!
//! Conventions: `G` rows are unit right-singular-direction estimates, `Q`
//! rows are `A'(Delta g)` and therefore carry the singular value, so
//! `Q' G` reconstructs the gradient with no explicit sigma.

use crate::error::{Error, Result};
use crate::matrix::{dot, gemm, norm2, Matrix};
use crate::rng::Rng;

/// Configuration for [`spi`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiConfig {
    /// Maximum number of components to extract (`r`).
    pub max_rank: usize,
    /// Power-iteration budget per component (`n`); the stagnation test may
    /// exit earlier.
    pub power_iters: usize,
    /// Early-stop threshold (`theta`).
    pub stop_threshold: f64,
}

impl SpiConfig {
    pub fn new(max_rank: usize) -> Self {
        SpiConfig { max_rank, power_iters: 30, stop_threshold: 1e-3 }
    }

    pub fn with_iters(mut self, n: usize) -> Self {
        self.power_iters = n;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.max_rank < 1 || self.power_iters < 1 {
            return Err(Error::Config("spi rank and iteration count must be >= 1".into()));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::Config("spi stop threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Rank-limited factor pair with `grad ~= Q' G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    /// `r_eff x h_in`; rows carry the singular value scale.
    pub q: Matrix,
    /// `r_eff x h_out`; rows have unit L2 norm.
    pub g: Matrix,
}

impl LowRankFactor {
    pub fn empty(h_in: usize, h_out: usize) -> Self {
        LowRankFactor { q: Matrix::zeros(0, h_in), g: Matrix::zeros(0, h_out) }
    }

    pub fn h_in(&self) -> usize {
        self.q.cols()
    }

    pub fn h_out(&self) -> usize {
        self.g.cols()
    }
}

/// Number of components the factor retains.
pub fn effective_rank(f: &LowRankFactor) -> usize {
    f.q.rows()
}

/// Densifies the factor: `Q' G`, an `h_in x h_out` matrix.
pub fn reconstruct(f: &LowRankFactor) -> Matrix {
    gemm(&f.q, &f.g, true, false).expect("factor rows agree by construction")
}

/// Allocation accounting for the linear-memory contract: every `f64` buffer
/// the routine allocates is tallied here, so tests can assert the peak
/// stays `O(N^2 + N*h + r*h)` and nowhere near `h_in * h_out`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiStats {
    pub allocated_floats: usize,
    pub components_examined: usize,
}

impl SpiStats {
    fn alloc(&mut self, len: usize) -> Vec<f64> {
        self.allocated_floats += len;
        vec![0.0; len]
    }
}

/// Runs structured power iterations on the factor pair.
///
/// `delta` is `N x h_out`, `a` is `N x h_in`; both must share `N`. Returns
/// a factor with `r_eff <= min(max_rank, N)` components. Zero input is not
/// an error: it yields an empty factor that reconstructs to zero.
pub fn spi(delta: &Matrix, a: &Matrix, cfg: &SpiConfig, rng: &mut Rng) -> Result<LowRankFactor> {
    spi_with_stats(delta, a, cfg, rng).map(|(f, _)| f)
}

/// [`spi`] plus allocation/iteration statistics.
pub fn spi_with_stats(
    delta: &Matrix,
    a: &Matrix,
    cfg: &SpiConfig,
    rng: &mut Rng,
) -> Result<(LowRankFactor, SpiStats)> {
    cfg.validate()?;
    let n = delta.rows();
    if n == 0 {
        return Err(Error::EmptyInput("spi needs at least one batch row".into()));
    }
    if a.rows() != n {
        return Err(Error::Shape(format!(
            "factor row mismatch: delta {} vs activations {}",
            n,
            a.rows()
        )));
    }
    let h_out = delta.cols();
    let h_in = a.cols();
    if h_in == 0 || h_out == 0 {
        return Err(Error::Shape("spi factor dimensions must be >= 1".into()));
    }

    let mut stats = SpiStats::default();

    if n == 1 {
        return Ok((rank_one_direct(delta, a, &mut stats), stats));
    }

    // C = A A' and B = Delta' C, the only precomputed products.
    let mut c = stats.alloc(n * n);
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = dot(a.row(i), a.row(j));
        }
    }
    let mut b = stats.alloc(h_out * n);
    for o in 0..h_out {
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += delta.get(k, o) * c[k * n + i];
            }
            b[o * n + i] = acc;
        }
    }

    let max_components = cfg.max_rank.min(n);
    let mut q_rows: Vec<Vec<f64>> = Vec::new();
    let mut g_rows: Vec<Vec<f64>> = Vec::new();
    let mut energies: Vec<f64> = Vec::new();

    let mut g = stats.alloc(h_out);
    let mut t = stats.alloc(h_out);
    let mut w = stats.alloc(n);

    'components: for _ in 0..max_components {
        stats.components_examined += 1;

        // Random start, orthogonal to everything already extracted.
        for gv in g.iter_mut() {
            *gv = rng.standard_normal();
        }
        if !orthonormalize(&mut g, &g_rows) {
            break 'components; // row space exhausted
        }

        for _ in 0..cfg.power_iters {
            // w = Delta g ; t = B w  ==  (grad' grad) g
            for (i, wv) in w.iter_mut().enumerate() {
                *wv = dot(delta.row(i), &g);
            }
            for (o, tv) in t.iter_mut().enumerate() {
                *tv = dot(&b[o * n..(o + 1) * n], &w);
            }
            // Deflate previously extracted components, then re-orthogonalize
            // for numerical hygiene.
            for (m, gm) in g_rows.iter().enumerate() {
                let coef = energies[m] * dot(gm, &g);
                for (tv, &gv) in t.iter_mut().zip(gm) {
                    *tv -= coef * gv;
                }
            }
            if !orthonormalize(&mut t, &g_rows) {
                break; // iterate collapsed onto extracted span; keep current g
            }
            let mut diff = 0.0;
            for (&tv, &gv) in t.iter().zip(&g) {
                diff += (tv - gv) * (tv - gv);
            }
            g.copy_from_slice(&t);
            if diff.sqrt() <= cfg.stop_threshold {
                break;
            }
        }

        // Finalize: v = Delta g, q = A' v. |q| is the singular value.
        for (i, wv) in w.iter_mut().enumerate() {
            *wv = dot(delta.row(i), &g);
        }
        let mut q = stats.alloc(h_in);
        for (i, &wv) in w.iter().enumerate() {
            let a_row = a.row(i);
            for (qv, &av) in q.iter_mut().zip(a_row) {
                *qv += av * wv;
            }
        }
        let energy = dot(&q, &q);
        let first_energy = energies.first().copied().unwrap_or(energy);
        if energy == 0.0 || energy < cfg.stop_threshold * cfg.stop_threshold * first_energy {
            break 'components;
        }
        q_rows.push(q);
        g_rows.push(g.clone());
        energies.push(energy);
    }

    let factor = factor_from_rows(q_rows, g_rows, h_in, h_out);
    Ok((factor, stats))
}

/// N = 1: the gradient is exactly one outer product, no iteration needed.
fn rank_one_direct(delta: &Matrix, a: &Matrix, stats: &mut SpiStats) -> LowRankFactor {
    let d = delta.row(0);
    let a_row = a.row(0);
    let d_norm = norm2(d);
    let h_in = a.cols();
    let h_out = delta.cols();
    if d_norm == 0.0 || a_row.iter().all(|&v| v == 0.0) {
        return LowRankFactor::empty(h_in, h_out);
    }
    let mut g = stats.alloc(h_out);
    for (gv, &dv) in g.iter_mut().zip(d) {
        *gv = dv / d_norm;
    }
    let mut q = stats.alloc(h_in);
    for (qv, &av) in q.iter_mut().zip(a_row) {
        *qv = av * d_norm;
    }
    factor_from_rows(vec![q], vec![g], h_in, h_out)
}

fn factor_from_rows(
    q_rows: Vec<Vec<f64>>,
    g_rows: Vec<Vec<f64>>,
    h_in: usize,
    h_out: usize,
) -> LowRankFactor {
    let r = q_rows.len();
    let mut q = Matrix::zeros(r, h_in);
    let mut g = Matrix::zeros(r, h_out);
    for (i, row) in q_rows.into_iter().enumerate() {
        q.row_mut(i).copy_from_slice(&row);
    }
    for (i, row) in g_rows.into_iter().enumerate() {
        g.row_mut(i).copy_from_slice(&row);
    }
    LowRankFactor { q, g }
}

/// Subtracts projections onto `basis` rows (twice, so cancellation noise is
/// crushed) and normalizes; returns false if the remainder is numerically
/// zero relative to the input, meaning the span is exhausted.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let norm_before = norm2(v);
    for _ in 0..2 {
        for row in basis {
            let proj = dot(row, v);
            for (vv, &rv) in v.iter_mut().zip(row) {
                *vv -= proj * rv;
            }
        }
    }
    let norm = norm2(v);
    if norm <= norm_before * 1e-10 || norm < 1e-150 {
        return false;
    }
    for vv in v.iter_mut() {
        *vv /= norm;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::rel_frobenius;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect())
            .unwrap()
    }

    #[test]
    fn zero_delta_gives_empty_factor() {
        let delta = Matrix::zeros(4, 6);
        let a = random_matrix(&mut Rng::new(1), 4, 5);
        let f = spi(&delta, &a, &SpiConfig::new(3), &mut Rng::new(2)).unwrap();
        assert_eq!(effective_rank(&f), 0);
        let rec = reconstruct(&f);
        assert_eq!(rec.rows(), 5);
        assert_eq!(rec.cols(), 6);
        assert!(rec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rows_rejected() {
        let delta = Matrix::zeros(0, 3);
        let a = Matrix::zeros(0, 3);
        assert!(matches!(
            spi(&delta, &a, &SpiConfig::new(2), &mut Rng::new(0)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn rank_one_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let delta = Matrix::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]).unwrap();
        let f = spi(&delta, &a, &SpiConfig::new(2), &mut Rng::new(7)).unwrap();
        assert_eq!(effective_rank(&f), 1);
        let rec = reconstruct(&f);
        let expected = Matrix::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]).unwrap();
        assert!(rel_frobenius(&rec, &expected) <= 1e-9, "err {}", rel_frobenius(&rec, &expected));
    }

    #[test]
    fn single_row_batch_is_exact_without_iteration() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 1, 9);
        let delta = random_matrix(&mut rng, 1, 5);
        let f = spi(&delta, &a, &SpiConfig::new(4), &mut Rng::new(12)).unwrap();
        assert_eq!(effective_rank(&f), 1);
        let grad = gemm(&a, &delta, true, false).unwrap();
        assert!(rel_frobenius(&reconstruct(&f), &grad) <= 1e-12);
        let g_norm = norm2(f.g.row(0));
        assert!((g_norm - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn full_rank_batch_is_recovered() {
        let mut rng = Rng::new(21);
        let a = random_matrix(&mut rng, 16, 128);
        let delta = random_matrix(&mut rng, 16, 64);
        let cfg = SpiConfig::new(16).with_iters(50);
        let f = spi(&delta, &a, &cfg, &mut Rng::new(22)).unwrap();
        let grad = gemm(&a, &delta, true, false).unwrap();
        let err = rel_frobenius(&reconstruct(&f), &grad);
        assert!(err <= 1e-6, "reconstruction error {err}");
        assert_eq!(effective_rank(&f), 16);
    }

    #[test]
    fn shared_low_rank_mixing_stops_early() {
        let mut rng = Rng::new(31);
        let mixing = random_matrix(&mut rng, 12, 4);
        let pa = random_matrix(&mut rng, 4, 40);
        let pd = random_matrix(&mut rng, 4, 24);
        let a = gemm(&mixing, &pa, false, false).unwrap();
        let delta = gemm(&mixing, &pd, false, false).unwrap();
        let cfg = SpiConfig::new(10).with_iters(50);
        let f = spi(&delta, &a, &cfg, &mut Rng::new(32)).unwrap();
        let grad = gemm(&a, &delta, true, false).unwrap();
        let err = rel_frobenius(&reconstruct(&f), &grad);
        assert!(err <= 1e-6, "reconstruction error {err}");
        assert!(effective_rank(&f) <= 6, "rank {}", effective_rank(&f));
        assert!(effective_rank(&f) >= 4);
    }

    #[test]
    fn identity_activations_reconstruct_delta() {
        let mut rng = Rng::new(41);
        let delta = random_matrix(&mut rng, 8, 20);
        let a = Matrix::identity(8);
        let cfg = SpiConfig::new(8).with_iters(50);
        let f = spi(&delta, &a, &cfg, &mut Rng::new(42)).unwrap();
        assert!(rel_frobenius(&reconstruct(&f), &delta) <= 1e-6);
    }

    #[test]
    fn g_rows_are_orthonormal() {
        let mut rng = Rng::new(51);
        let a = random_matrix(&mut rng, 10, 50);
        let delta = random_matrix(&mut rng, 10, 30);
        let f = spi(&delta, &a, &SpiConfig::new(10).with_iters(40), &mut Rng::new(52)).unwrap();
        let r = effective_rank(&f);
        assert!(r > 0);
        for i in 0..r {
            assert!((norm2(f.g.row(i)) - 1.0).abs() <= 1e-9);
            for j in 0..i {
                let d = dot(f.g.row(i), f.g.row(j)).abs();
                assert!(d <= 1e-6, "rows {i},{j} not orthogonal: {d}");
            }
        }
    }

    #[test]
    fn residual_energy_is_monotone_in_components() {
        let mut rng = Rng::new(61);
        let a = random_matrix(&mut rng, 8, 24);
        let delta = random_matrix(&mut rng, 8, 16);
        let f = spi(&delta, &a, &SpiConfig::new(8).with_iters(50), &mut Rng::new(62)).unwrap();
        let grad = gemm(&a, &delta, true, false).unwrap();
        let mut prev = grad.frobenius_norm();
        for j in 1..=effective_rank(&f) {
            let qj = Matrix::from_vec(j, f.q.cols(), f.q.data()[..j * f.q.cols()].to_vec())
                .unwrap();
            let gj = Matrix::from_vec(j, f.g.cols(), f.g.data()[..j * f.g.cols()].to_vec())
                .unwrap();
            let partial = gemm(&qj, &gj, true, false).unwrap();
            let resid = grad.sub(&partial).unwrap().frobenius_norm();
            assert!(resid <= prev + 1e-9, "component {j} grew residual {resid} > {prev}");
            prev = resid;
        }
    }

    #[test]
    fn allocation_stays_linear_in_width() {
        let (n, h_in, h_out, r) = (8, 256, 256, 4);
        let mut rng = Rng::new(71);
        let a = random_matrix(&mut rng, n, h_in);
        let delta = random_matrix(&mut rng, n, h_out);
        let (_, stats) =
            spi_with_stats(&delta, &a, &SpiConfig::new(r), &mut Rng::new(72)).unwrap();
        let linear_budget = 4 * (n * n + n * (h_in + h_out) + (r + 2) * (h_in + h_out));
        assert!(
            stats.allocated_floats <= linear_budget,
            "allocated {} floats, budget {}",
            stats.allocated_floats,
            linear_budget
        );
        assert!(
            stats.allocated_floats < h_in * h_out,
            "allocated {} floats, dense gradient would be {}",
            stats.allocated_floats,
            h_in * h_out
        );
    }

    #[test]
    fn reconstruct_single_outer_product() {
        let f = LowRankFactor {
            q: Matrix::from_rows(&[&[2.0, 0.0]]).unwrap(),
            g: Matrix::from_rows(&[&[0.0, 3.0]]).unwrap(),
        };
        let rec = reconstruct(&f);
        assert_eq!(rec.data(), &[0.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn effective_rank_reports_row_count() {
        assert_eq!(effective_rank(&LowRankFactor::empty(3, 4)), 0);
    }
}
