//! SPI verification against a dense SVD oracle (nalgebra), the independent
//! path for checking factor-space power iterations.

use dadsim_core::matrix::{gemm, rel_frobenius, Matrix};
use dadsim_core::rng::Rng;
use dadsim_core::spi::{effective_rank, reconstruct, spi, SpiConfig};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect())
        .expect("sized")
}

fn oracle_singular_values(grad: &Matrix) -> Vec<f64> {
    nalgebra::DMatrix::from_row_slice(grad.rows(), grad.cols(), grad.data())
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .collect()
}

fn oracle_truncation_error(grad: &Matrix, r: usize) -> f64 {
    oracle_singular_values(grad).iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

pub struct VerifyReport {
    pub max_full_rank_error: f64,
    pub max_low_rank_error: f64,
    pub max_low_rank_effective: usize,
    pub worst_eckart_young_ratio: f64,
    pub zero_input_ok: bool,
    pub violations: Vec<String>,
}

/// Runs the oracle suite over `seeds` seeds; collects violations instead of
/// panicking so the CLI can report and exit nonzero.
pub fn spi_verify(seeds: u64) -> VerifyReport {
    let mut report = VerifyReport {
        max_full_rank_error: 0.0,
        max_low_rank_error: 0.0,
        max_low_rank_effective: 0,
        worst_eckart_young_ratio: 0.0,
        zero_input_ok: true,
        violations: Vec::new(),
    };

    // Full-rank regime: r = N recovers the gradient.
    for seed in 0..seeds {
        let mut rng = Rng::new(0x0f00 + seed);
        let a = random_matrix(&mut rng, 16, 128);
        let d = random_matrix(&mut rng, 16, 64);
        let f = spi(&d, &a, &SpiConfig::new(16).with_iters(50), &mut Rng::new(0x1f00 + seed))
            .expect("valid inputs");
        let grad = gemm(&a, &d, true, false).expect("shapes");
        let err = rel_frobenius(&reconstruct(&f), &grad);
        report.max_full_rank_error = report.max_full_rank_error.max(err);
        if err > 1e-6 {
            report.violations.push(format!("full-rank seed {seed}: error {err:e}"));
        }
    }

    // True rank 4 with headroom: early stop must trim to <= 6 components.
    for seed in 0..seeds {
        let mut rng = Rng::new(0x2f00 + seed);
        let mix = random_matrix(&mut rng, 16, 4);
        let a = gemm(&mix, &random_matrix(&mut rng, 4, 128), false, false).expect("shapes");
        let d = gemm(&mix, &random_matrix(&mut rng, 4, 64), false, false).expect("shapes");
        let f = spi(&d, &a, &SpiConfig::new(10).with_iters(50), &mut Rng::new(0x3f00 + seed))
            .expect("valid inputs");
        let grad = gemm(&a, &d, true, false).expect("shapes");
        let err = rel_frobenius(&reconstruct(&f), &grad);
        let r_eff = effective_rank(&f);
        report.max_low_rank_error = report.max_low_rank_error.max(err);
        report.max_low_rank_effective = report.max_low_rank_effective.max(r_eff);
        if err > 1e-6 {
            report.violations.push(format!("rank-4 seed {seed}: error {err:e}"));
        }
        if r_eff > 6 {
            report.violations.push(format!("rank-4 seed {seed}: effective rank {r_eff}"));
        }
    }

    // Eckart-Young proximity on decaying spectra.
    for seed in 0..seeds {
        let mut rng = Rng::new(0x4f00 + seed);
        let mut a = random_matrix(&mut rng, 32, 256);
        let d = random_matrix(&mut rng, 32, 256);
        for r in 0..32 {
            let s = 0.75f64.powi(r as i32);
            for v in a.row_mut(r) {
                *v *= s;
            }
        }
        let grad = gemm(&a, &d, true, false).expect("shapes");
        for r in [2usize, 4, 8] {
            let f = spi(&d, &a, &SpiConfig::new(r).with_iters(50), &mut Rng::new(0x5f00 + seed))
                .expect("valid inputs");
            let err = reconstruct(&f).sub(&grad).expect("shapes").frobenius_norm();
            let opt = oracle_truncation_error(&grad, r);
            let ratio = err / opt;
            report.worst_eckart_young_ratio = report.worst_eckart_young_ratio.max(ratio);
            if ratio > 1.1 {
                report
                    .violations
                    .push(format!("eckart-young seed {seed} rank {r}: ratio {ratio:.4}"));
            }
        }
    }

    // Zero input: rank 0, zero reconstruction.
    let zero_d = Matrix::zeros(8, 16);
    let zero_a = Matrix::zeros(8, 12);
    let f = spi(&zero_d, &zero_a, &SpiConfig::new(4), &mut Rng::new(1)).expect("valid inputs");
    report.zero_input_ok =
        effective_rank(&f) == 0 && reconstruct(&f).frobenius_norm() == 0.0;
    if !report.zero_input_ok {
        report.violations.push("zero input produced nonzero factor".into());
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_suite_is_clean_on_few_seeds() {
        let report = spi_verify(3);
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert!(report.max_full_rank_error <= 1e-6);
        assert!(report.worst_eckart_young_ratio <= 1.1);
    }
}
