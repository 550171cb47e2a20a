//! Gradient exchange strategies.
//!
//! Every strategy consumes the per-site layer tapes of one training round
//! and produces the per-layer gradient each site applies, routing all
//! cross-site data through [`crate::simnet::Network`] frames so transfer
//! bytes are measured, not modeled.
//!
//! Aggregation is a plain sum everywhere: the output deltas carry the
//! `1/(S*N)` loss scale (see [`crate::nn::output_delta`]), so summed factor
//! products across sites equal the pooled mean gradient directly and the
//! learning-rate semantics do not depend on the site count.
//!
//! Weight matrices travel in the frames accounted against the closed-form
//! model of [`bytes_for`]; bias gradients are size-`h` vectors and ride
//! separate bias frames (`dad` and `topk` recompute biases from broadcast
//! deltas instead of sending anything).

use crate::adam::LayerGrad;
use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};
use crate::nn::{layer_gradient, LayerTape};
use crate::rng::Rng;
use crate::simnet::{MsgKind, Network};
use crate::spi::{effective_rank, reconstruct, spi, LowRankFactor, SpiConfig};

/// Which exchange runs each round.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeStrategy {
    /// Full-gradient averaging.
    Dsgd,
    /// Raw factor exchange; exact pooled gradient.
    Dad,
    /// Two-stage SPI compression of the factors.
    RankDad { spi: SpiConfig },
    /// Low-rank power-iteration compression of the dense gradient with
    /// warm start and error feedback.
    PowerSgd { rank: usize },
    /// Ships only the `k` batch rows with the largest delta norms.
    TopkColumns { k: usize },
}

impl ExchangeStrategy {
    pub fn rank_dad(rank: usize) -> Self {
        ExchangeStrategy::RankDad { spi: SpiConfig::new(rank) }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExchangeStrategy::Dsgd => "dsgd",
            ExchangeStrategy::Dad => "dad",
            ExchangeStrategy::RankDad { .. } => "rank_dad",
            ExchangeStrategy::PowerSgd { .. } => "power_sgd",
            ExchangeStrategy::TopkColumns { .. } => "topk_columns",
        }
    }
}

/// Per-layer traffic and compression facts for one round.
#[derive(Debug, Clone)]
pub struct LayerReport {
    /// Weight-factor payload bytes uploaded per site (headers excluded).
    pub bytes_up_per_site: Vec<u64>,
    /// Weight-factor payload bytes downloaded per site.
    pub bytes_down_per_site: Vec<u64>,
    /// Rank of the factor actually broadcast (rank-dAD only).
    pub effective_rank: Option<usize>,
}

/// What one exchange produced.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub layers: Vec<LayerReport>,
}

/// Persistent PowerSGD state: shared warm-start right factors plus one
/// error-feedback residual per site and layer.
#[derive(Debug, Clone)]
pub struct PowerSgdState {
    pub warm_v: Vec<Matrix>,
    pub residual: Vec<Vec<Matrix>>,
}

impl PowerSgdState {
    /// `layer_dims` is `(h_in, h_out)` per layer. The warm start is drawn
    /// from a seed-derived stream so all sites agree on it.
    pub fn init(layer_dims: &[(usize, usize)], sites: usize, rank: usize, seed: u64) -> Self {
        let warm_v = layer_dims
            .iter()
            .enumerate()
            .map(|(li, &(_, h_out))| {
                let mut rng = Rng::derive(seed, 0x7057_0000 + li as u64);
                Matrix::from_vec(
                    h_out,
                    rank,
                    (0..h_out * rank).map(|_| rng.standard_normal()).collect(),
                )
                .expect("sized")
            })
            .collect();
        let residual = (0..sites)
            .map(|_| {
                layer_dims
                    .iter()
                    .map(|&(h_in, h_out)| Matrix::zeros(h_in, h_out))
                    .collect()
            })
            .collect();
        PowerSgdState { warm_v, residual }
    }
}

fn check_architecture(site_tapes: &[Vec<LayerTape>]) -> Result<(usize, Vec<(usize, usize)>)> {
    let sites = site_tapes.len();
    if sites == 0 {
        return Err(Error::Protocol("no sites".into()));
    }
    let layers = site_tapes[0].len();
    let dims: Vec<(usize, usize)> = site_tapes[0]
        .iter()
        .map(|t| (t.a_in.cols(), t.z.cols()))
        .collect();
    for (s, tapes) in site_tapes.iter().enumerate() {
        if tapes.len() != layers {
            return Err(Error::Protocol(format!("site {s} has a different layer count")));
        }
        for (l, t) in tapes.iter().enumerate() {
            if (t.a_in.cols(), t.z.cols()) != dims[l] {
                return Err(Error::Protocol(format!(
                    "site {s} layer {l} dims differ from site 0"
                )));
            }
            if t.delta.is_none() {
                return Err(Error::State(format!("site {s} layer {l} has no backward delta")));
            }
        }
    }
    Ok((layers, dims))
}

fn layer_report_from_ledger(net: &Network, round: usize, layer: usize, sites: usize) -> LayerReport {
    let ledger = net.ledger();
    LayerReport {
        bytes_up_per_site: (0..sites)
            .map(|s| ledger.layer_weight_payload(round, layer, s, crate::simnet::Direction::Up))
            .collect(),
        bytes_down_per_site: (0..sites)
            .map(|s| ledger.layer_weight_payload(round, layer, s, crate::simnet::Direction::Down))
            .collect(),
        effective_rank: None,
    }
}

fn current_round(net: &Network) -> usize {
    net.round()
}

/// dSGD: every site ships its full weight gradient; the aggregator sums and
/// broadcasts. Exact, at quadratic per-layer cost.
pub fn dsgd_exchange(
    net: &mut Network,
    site_tapes: &[Vec<LayerTape>],
) -> Result<(Vec<Vec<LayerGrad>>, RoundReport)> {
    dsgd_exchange_with_workers(net, site_tapes, 1)
}

/// [`dsgd_exchange`] with the site-local gradient products computed on up
/// to `workers` threads (identical results for any worker count).
pub fn dsgd_exchange_with_workers(
    net: &mut Network,
    site_tapes: &[Vec<LayerTape>],
    workers: usize,
) -> Result<(Vec<Vec<LayerGrad>>, RoundReport)> {
    let (layers, _) = check_architecture(site_tapes)?;
    let sites = site_tapes.len();
    let locals: Vec<Vec<(Matrix, Matrix)>> = crate::cluster::par_map_sites(sites, workers, |s| {
        site_tapes[s]
            .iter()
            .map(|tape| {
                layer_gradient(&tape.a_in, tape.delta().expect("checked above"))
                    .expect("validated shapes")
            })
            .collect()
    });
    let mut grads: Vec<Vec<LayerGrad>> = vec![Vec::with_capacity(layers); sites];
    let mut reports = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut w_sum: Option<Matrix> = None;
        let mut b_sum: Option<Matrix> = None;
        for (s, local) in locals.iter().enumerate() {
            let (gw, gb) = &local[l];
            let gw_wire = net.upload(s, l, MsgKind::GradUp, &[gw])?.remove(0);
            let gb_wire = net.upload(s, l, MsgKind::BiasUp, &[gb])?.remove(0);
            w_sum = Some(match w_sum {
                None => gw_wire,
                Some(acc) => acc.add(&gw_wire)?,
            });
            b_sum = Some(match b_sum {
                None => gb_wire,
                Some(acc) => acc.add(&gb_wire)?,
            });
        }
        let w_total = net
            .broadcast(l, MsgKind::GradDown, &[&w_sum.expect("at least one site")])?
            .remove(0);
        let b_total = net
            .broadcast(l, MsgKind::BiasDown, &[&b_sum.expect("at least one site")])?
            .remove(0);
        for site_grads in grads.iter_mut() {
            site_grads.push(LayerGrad { w: w_total.clone(), b: b_total.clone() });
        }
        reports.push(layer_report_from_ledger(net, current_round(net), l, sites));
    }
    Ok((grads, RoundReport { layers: reports }))
}

/// dAD: sites ship raw `(A, Delta)` factors; the aggregator concatenates
/// along the batch dimension and broadcasts; every site recomputes the
/// pooled gradient exactly.
pub fn dad_exchange(
    net: &mut Network,
    site_tapes: &[Vec<LayerTape>],
) -> Result<(Vec<Vec<LayerGrad>>, RoundReport)> {
    let (layers, _) = check_architecture(site_tapes)?;
    let sites = site_tapes.len();
    let mut grads: Vec<Vec<LayerGrad>> = vec![Vec::with_capacity(layers); sites];
    let mut reports = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut a_parts = Vec::with_capacity(sites);
        let mut d_parts = Vec::with_capacity(sites);
        for (s, tapes) in site_tapes.iter().enumerate() {
            let tape = &tapes[l];
            let mut wire = net.upload(s, l, MsgKind::FactorsUp, &[&tape.a_in, tape.delta()?])?;
            let d = wire.pop().expect("two matrices");
            let a = wire.pop().expect("two matrices");
            a_parts.push(a);
            d_parts.push(d);
        }
        let a_cat = Matrix::vstack(&a_parts.iter().collect::<Vec<_>>())?;
        let d_cat = Matrix::vstack(&d_parts.iter().collect::<Vec<_>>())?;
        let mut wire = net.broadcast(l, MsgKind::FactorsDown, &[&a_cat, &d_cat])?;
        let d_cat = wire.pop().expect("two matrices");
        let a_cat = wire.pop().expect("two matrices");
        // All sites run the identical product on identical broadcast bytes;
        // computing it once cannot change any result.
        let (gw, gb) = layer_gradient(&a_cat, &d_cat)?;
        for site_grads in grads.iter_mut() {
            site_grads.push(LayerGrad { w: gw.clone(), b: gb.clone() });
        }
        reports.push(layer_report_from_ledger(net, current_round(net), l, sites));
    }
    Ok((grads, RoundReport { layers: reports }))
}

/// rank-dAD: per-site SPI on the factors, aggregator-side stack of the
/// `(Q, G)` pieces, a second SPI over the stack, then broadcast.
///
/// `seed`/`round` key the deterministic per-site/per-layer start-vector
/// streams, and `workers` bounds the threads used for the site-local SPI
/// calls (results are identical for any worker count).
pub fn rank_dad_exchange(
    net: &mut Network,
    site_tapes: &[Vec<LayerTape>],
    cfg: &SpiConfig,
    seed: u64,
    round: usize,
    workers: usize,
) -> Result<(Vec<Vec<LayerGrad>>, RoundReport)> {
    let (layers, dims) = check_architecture(site_tapes)?;
    let sites = site_tapes.len();
    let mut grads: Vec<Vec<LayerGrad>> = vec![Vec::with_capacity(layers); sites];
    let mut reports = Vec::with_capacity(layers);

    // Site-local compression for every (site, layer), parallelizable.
    let local: Vec<Vec<(LowRankFactor, Matrix)>> = crate::cluster::par_map_sites(sites, workers, |s| {
        let tapes = &site_tapes[s];
        (0..layers)
            .map(|l| {
                let tape = &tapes[l];
                let delta = tape.delta().expect("checked above");
                let mut rng = Rng::derive(seed, spi_stream(round, l, s));
                let factor = spi(delta, &tape.a_in, cfg, &mut rng).expect("validated inputs");
                let bias = delta.col_sums();
                (factor, bias)
            })
            .collect()
    });

    for l in 0..layers {
        let (h_in, h_out) = dims[l];
        let mut q_parts = Vec::with_capacity(sites);
        let mut g_parts = Vec::with_capacity(sites);
        let mut b_sum: Option<Matrix> = None;
        for (s, site_local) in local.iter().enumerate() {
            let (factor, bias) = &site_local[l];
            let mut wire = net.upload(s, l, MsgKind::LowRankUp, &[&factor.q, &factor.g])?;
            let g = wire.pop().expect("two matrices");
            let q = wire.pop().expect("two matrices");
            q_parts.push(q);
            g_parts.push(g);
            let gb_wire = net.upload(s, l, MsgKind::BiasUp, &[bias])?.remove(0);
            b_sum = Some(match b_sum {
                None => gb_wire,
                Some(acc) => acc.add(&gb_wire)?,
            });
        }
        let q_cat = Matrix::vstack(&q_parts.iter().collect::<Vec<_>>())?;
        let g_cat = Matrix::vstack(&g_parts.iter().collect::<Vec<_>>())?;
        // sum_s Q_s' G_s == Q_cat' G_cat, so re-compressing the stack
        // approximates the pooled gradient; Q_cat plays the activation role.
        let reduced = if q_cat.rows() == 0 {
            LowRankFactor::empty(h_in, h_out)
        } else {
            let mut rng = Rng::derive(seed, spi_stream(round, l, AGGREGATOR_SLOT));
            spi(&g_cat, &q_cat, cfg, &mut rng)?
        };
        let mut wire = net.broadcast(l, MsgKind::LowRankDown, &[&reduced.q, &reduced.g])?;
        let g_hat = wire.pop().expect("two matrices");
        let q_hat = wire.pop().expect("two matrices");
        let b_total = net
            .broadcast(l, MsgKind::BiasDown, &[&b_sum.expect("at least one site")])?
            .remove(0);
        let broadcast_factor = LowRankFactor { q: q_hat, g: g_hat };
        let gw = reconstruct(&broadcast_factor);
        for site_grads in grads.iter_mut() {
            site_grads.push(LayerGrad { w: gw.clone(), b: b_total.clone() });
        }
        let mut report = layer_report_from_ledger(net, current_round(net), l, sites);
        report.effective_rank = Some(effective_rank(&broadcast_factor));
        reports.push(report);
    }
    Ok((grads, RoundReport { layers: reports }))
}

const AGGREGATOR_SLOT: usize = 0xFFF;

fn spi_stream(round: usize, layer: usize, site: usize) -> u64 {
    ((round as u64) << 24) ^ ((layer as u64) << 12) ^ site as u64
}

/// PowerSGD baseline: rank-`r` power step on the dense local gradient with
/// shared warm start and per-site error feedback.
pub fn powersgd_exchange(
    net: &mut Network,
    site_tapes: &[Vec<LayerTape>],
    rank: usize,
    state: &mut PowerSgdState,
    workers: usize,
) -> Result<(Vec<Vec<LayerGrad>>, RoundReport)> {
    let (layers, _) = check_architecture(site_tapes)?;
    let sites = site_tapes.len();
    if state.warm_v.len() != layers || state.residual.len() != sites {
        return Err(Error::State("powersgd state does not match architecture".into()));
    }
    if rank == 0 {
        return Err(Error::Config("powersgd rank must be >= 1".into()));
    }

    // Dense local gradients plus error feedback, parallelizable per site.
    let locals: Vec<Vec<(Matrix, Matrix)>> = crate::cluster::par_map_sites(sites, workers, |s| {
        let tapes = &site_tapes[s];
        (0..layers)
            .map(|l| {
                let tape = &tapes[l];
                let (gw, gb) = layer_gradient(&tape.a_in, tape.delta().expect("checked"))
                    .expect("validated shapes");
                let corrected = gw.add(&state.residual[s][l]).expect("mirrored shapes");
                (corrected, gb)
            })
            .collect()
    });

    let mut grads: Vec<Vec<LayerGrad>> = vec![Vec::with_capacity(layers); sites];
    let mut reports = Vec::with_capacity(layers);
    for l in 0..layers {
        // Phase 1: P = sum_s M_s V, orthogonalized at the aggregator.
        let mut p_sum: Option<Matrix> = None;
        let mut b_sum: Option<Matrix> = None;
        for (s, local) in locals.iter().enumerate() {
            let (m, gb) = &local[l];
            let p = gemm(m, &state.warm_v[l], false, false)?;
            let p_wire = net.upload(s, l, MsgKind::PowerPUp, &[&p])?.remove(0);
            p_sum = Some(match p_sum {
                None => p_wire,
                Some(acc) => acc.add(&p_wire)?,
            });
            let gb_wire = net.upload(s, l, MsgKind::BiasUp, &[gb])?.remove(0);
            b_sum = Some(match b_sum {
                None => gb_wire,
                Some(acc) => acc.add(&gb_wire)?,
            });
        }
        let mut p_hat = p_sum.expect("at least one site");
        orthogonalize_columns(&mut p_hat);
        let p_hat = net.broadcast(l, MsgKind::PowerPDown, &[&p_hat])?.remove(0);

        // Phase 2: V = sum_s M_s' P_hat.
        let mut v_sum: Option<Matrix> = None;
        for (s, local) in locals.iter().enumerate() {
            let (m, _) = &local[l];
            let v = gemm(m, &p_hat, true, false)?;
            let v_wire = net.upload(s, l, MsgKind::PowerVUp, &[&v])?.remove(0);
            v_sum = Some(match v_sum {
                None => v_wire,
                Some(acc) => acc.add(&v_wire)?,
            });
        }
        let v = net
            .broadcast(l, MsgKind::PowerVDown, &[&v_sum.expect("at least one site")])?
            .remove(0);
        let b_total = net
            .broadcast(l, MsgKind::BiasDown, &[&b_sum.expect("at least one site")])?
            .remove(0);

        let recon = gemm(&p_hat, &v, false, true)?;
        for (s, local) in locals.iter().enumerate() {
            let (m, _) = &local[l];
            state.residual[s][l] = m.sub(&recon)?;
            grads[s].push(LayerGrad { w: recon.clone(), b: b_total.clone() });
        }
        state.warm_v[l] = v;
        reports.push(layer_report_from_ledger(net, current_round(net), l, sites));
    }
    Ok((grads, RoundReport { layers: reports }))
}

/// Top-k baseline: each site ships only the `k` batch rows of `(A, Delta)`
/// whose delta rows have the largest L2 norm; the aggregator concatenates
/// and broadcasts exactly like dAD.
pub fn topk_columns_exchange(
    net: &mut Network,
    site_tapes: &[Vec<LayerTape>],
    k: usize,
) -> Result<(Vec<Vec<LayerGrad>>, RoundReport)> {
    let (layers, _) = check_architecture(site_tapes)?;
    let sites = site_tapes.len();
    if k == 0 {
        return Err(Error::Config("k_columns must be >= 1".into()));
    }
    for tapes in site_tapes {
        for t in tapes {
            if t.a_in.rows() < k {
                return Err(Error::Config(format!(
                    "batch of {} rows is smaller than k = {k}",
                    t.a_in.rows()
                )));
            }
        }
    }
    let mut grads: Vec<Vec<LayerGrad>> = vec![Vec::with_capacity(layers); sites];
    let mut reports = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut a_parts = Vec::with_capacity(sites);
        let mut d_parts = Vec::with_capacity(sites);
        for (s, tapes) in site_tapes.iter().enumerate() {
            let tape = &tapes[l];
            let delta = tape.delta()?;
            let picked = top_rows_by_norm(delta, k);
            let a_sel = tape.a_in.select_rows(&picked);
            let d_sel = delta.select_rows(&picked);
            let mut wire = net.upload(s, l, MsgKind::FactorsUp, &[&a_sel, &d_sel])?;
            let d = wire.pop().expect("two matrices");
            let a = wire.pop().expect("two matrices");
            a_parts.push(a);
            d_parts.push(d);
        }
        let a_cat = Matrix::vstack(&a_parts.iter().collect::<Vec<_>>())?;
        let d_cat = Matrix::vstack(&d_parts.iter().collect::<Vec<_>>())?;
        let mut wire = net.broadcast(l, MsgKind::FactorsDown, &[&a_cat, &d_cat])?;
        let d_cat = wire.pop().expect("two matrices");
        let a_cat = wire.pop().expect("two matrices");
        let (gw, gb) = layer_gradient(&a_cat, &d_cat)?;
        for site_grads in grads.iter_mut() {
            site_grads.push(LayerGrad { w: gw.clone(), b: gb.clone() });
        }
        reports.push(layer_report_from_ledger(net, current_round(net), l, sites));
    }
    Ok((grads, RoundReport { layers: reports }))
}

/// Indices of the `k` rows with the largest L2 norms, in ascending row
/// order; ties broken toward the lower index so selection is deterministic.
fn top_rows_by_norm(m: &Matrix, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..m.rows())
        .map(|r| {
            let norm_sq: f64 = m.row(r).iter().map(|v| v * v).sum();
            (norm_sq, r)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored[..k].iter().map(|&(_, r)| r).collect();
    picked.sort_unstable();
    picked
}

/// Gram-Schmidt over columns with re-orthogonalization. Columns that lie in
/// the span of earlier ones collapse to roundoff noise; normalizing that
/// noise would produce a non-orthogonal junk direction, so anything that
/// shrinks below a relative floor is zeroed instead.
fn orthogonalize_columns(m: &mut Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let mut col: Vec<f64> = (0..rows).map(|r| m.get(r, j)).collect();
        let norm_before = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for _ in 0..2 {
            for prev in 0..j {
                let mut proj = 0.0;
                for r in 0..rows {
                    proj += m.get(r, prev) * col[r];
                }
                for (r, cv) in col.iter_mut().enumerate() {
                    *cv -= proj * m.get(r, prev);
                }
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= norm_before * 1e-10 || norm < 1e-150 {
            for r in 0..rows {
                m.set(r, j, 0.0);
            }
        } else {
            for (r, cv) in col.iter().enumerate() {
                m.set(r, j, cv / norm);
            }
        }
    }
}

/// Closed-form weight-factor traffic per layer per site, in bytes.
///
/// For `rank_dad` the value is the upper bound at the configured rank; the
/// measured count may be lower when the early-stop trims components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Traffic {
    pub up_per_site: u64,
    pub down_per_site: u64,
}

pub fn bytes_for(
    strategy: &ExchangeStrategy,
    h_in: usize,
    h_out: usize,
    batch: usize,
    sites: usize,
    bytes_per_float: usize,
) -> Traffic {
    let b = bytes_per_float as u64;
    let h_sum = (h_in + h_out) as u64;
    match strategy {
        ExchangeStrategy::Dsgd => {
            let dense = (h_in * h_out) as u64 * b;
            Traffic { up_per_site: dense, down_per_site: dense }
        }
        ExchangeStrategy::Dad => Traffic {
            up_per_site: batch as u64 * h_sum * b,
            down_per_site: (sites * batch) as u64 * h_sum * b,
        },
        ExchangeStrategy::RankDad { spi } => {
            let r = spi.max_rank as u64;
            Traffic { up_per_site: r * h_sum * b, down_per_site: r * h_sum * b }
        }
        ExchangeStrategy::PowerSgd { rank } => {
            let r = *rank as u64;
            Traffic { up_per_site: r * h_sum * b, down_per_site: r * h_sum * b }
        }
        ExchangeStrategy::TopkColumns { k } => Traffic {
            up_per_site: *k as u64 * h_sum * b,
            down_per_site: (sites * k) as u64 * h_sum * b,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::rel_frobenius;
    use crate::simnet::WireDtype;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect())
            .unwrap()
    }

    /// Builds one site's tapes directly from factor pairs.
    fn tapes_from_pairs(pairs: Vec<(Matrix, Matrix)>) -> Vec<LayerTape> {
        pairs
            .into_iter()
            .map(|(a, d)| LayerTape {
                z: Matrix::zeros(d.rows(), d.cols()),
                a_in: a,
                delta: Some(d),
            })
            .collect()
    }

    fn random_sites(
        rng: &mut Rng,
        sites: usize,
        dims: &[(usize, usize)],
        batch: usize,
    ) -> Vec<Vec<LayerTape>> {
        (0..sites)
            .map(|_| {
                tapes_from_pairs(
                    dims.iter()
                        .map(|&(h_in, h_out)| {
                            (random_matrix(rng, batch, h_in), random_matrix(rng, batch, h_out))
                        })
                        .collect(),
                )
            })
            .collect()
    }

    /// Pooled-gradient oracle: concatenate every site's factors and take the
    /// product directly, bypassing all exchange machinery.
    fn pooled_gradient(site_tapes: &[Vec<LayerTape>], layer: usize) -> Matrix {
        let a_all: Vec<&Matrix> = site_tapes.iter().map(|t| &t[layer].a_in).collect();
        let d_all: Vec<&Matrix> =
            site_tapes.iter().map(|t| t[layer].delta.as_ref().unwrap()).collect();
        let a = Matrix::vstack(&a_all).unwrap();
        let d = Matrix::vstack(&d_all).unwrap();
        gemm(&a, &d, true, false).unwrap()
    }

    #[test]
    fn dsgd_single_site_is_local_gradient() {
        let mut rng = Rng::new(1);
        let tapes = random_sites(&mut rng, 1, &[(5, 4)], 3);
        let mut net = Network::new(1, WireDtype::F64);
        let (grads, _) = dsgd_exchange(&mut net, &tapes).unwrap();
        let (gw, gb) =
            layer_gradient(&tapes[0][0].a_in, tapes[0][0].delta.as_ref().unwrap()).unwrap();
        assert_eq!(grads[0][0].w, gw);
        assert_eq!(grads[0][0].b, gb);
    }

    #[test]
    fn dsgd_with_zero_site_halves_the_standalone_gradient() {
        // Deltas carry the global 1/(S*N) scale. With site 2 all-zero, the
        // aggregate must equal half of what site 1 would apply training
        // alone (where the scale would be 1/N).
        let (sites, batch) = (2usize, 5usize);
        let mut rng = Rng::new(2);
        let a = random_matrix(&mut rng, batch, 4);
        let d_raw = random_matrix(&mut rng, batch, 3);
        let tapes = vec![
            tapes_from_pairs(vec![(a.clone(), d_raw.scale(1.0 / (sites * batch) as f64))]),
            tapes_from_pairs(vec![(Matrix::zeros(batch, 4), Matrix::zeros(batch, 3))]),
        ];
        let mut net = Network::new(2, WireDtype::F64);
        let (grads, _) = dsgd_exchange(&mut net, &tapes).unwrap();
        let (standalone, _) =
            layer_gradient(&a, &d_raw.scale(1.0 / batch as f64)).unwrap();
        assert!(rel_frobenius(&grads[0][0].w, &standalone.scale(0.5)) <= 1e-14);
        assert_eq!(grads[0][0].w, grads[1][0].w);
    }

    #[test]
    fn dad_equals_dsgd_equals_pooled() {
        let mut rng = Rng::new(3);
        let tapes = random_sites(&mut rng, 4, &[(6, 5), (5, 3)], 4);
        let mut net_a = Network::new(4, WireDtype::F64);
        let (dsgd, _) = dsgd_exchange(&mut net_a, &tapes).unwrap();
        let mut net_b = Network::new(4, WireDtype::F64);
        let (dad, _) = dad_exchange(&mut net_b, &tapes).unwrap();
        for l in 0..2 {
            let pooled = pooled_gradient(&tapes, l);
            assert!(rel_frobenius(&dad[0][l].w, &pooled) <= 1e-12);
            assert!(rel_frobenius(&dsgd[0][l].w, &pooled) <= 1e-12);
            assert!(rel_frobenius(&dad[2][l].w, &dsgd[3][l].w) <= 1e-12);
        }
    }

    #[test]
    fn dad_duplicate_sites_double_the_gradient() {
        let mut rng = Rng::new(4);
        let one = random_sites(&mut rng, 1, &[(4, 4)], 3);
        let tapes = vec![one[0].clone(), one[0].clone()];
        let mut net = Network::new(2, WireDtype::F64);
        let (grads, _) = dad_exchange(&mut net, &tapes).unwrap();
        let (gw, _) = layer_gradient(&one[0][0].a_in, one[0][0].delta.as_ref().unwrap()).unwrap();
        let doubled = gw.scale(2.0);
        assert!(rel_frobenius(&grads[0][0].w, &doubled) <= 1e-15);
    }

    #[test]
    fn dad_rejects_architecture_mismatch() {
        let mut rng = Rng::new(5);
        let mut tapes = random_sites(&mut rng, 2, &[(4, 3)], 2);
        tapes[1] = tapes_from_pairs(vec![(Matrix::zeros(2, 5), Matrix::zeros(2, 3))]);
        let mut net = Network::new(2, WireDtype::F64);
        assert!(matches!(
            dad_exchange(&mut net, &tapes),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn rank_dad_single_site_full_rank_is_exact() {
        let mut rng = Rng::new(6);
        let tapes = random_sites(&mut rng, 1, &[(10, 8)], 4);
        let mut net = Network::new(1, WireDtype::F64);
        let cfg = SpiConfig::new(4).with_iters(50);
        let (grads, report) =
            rank_dad_exchange(&mut net, &tapes, &cfg, 99, 0, 1).unwrap();
        let pooled = pooled_gradient(&tapes, 0);
        assert!(rel_frobenius(&grads[0][0].w, &pooled) <= 1e-6);
        assert!(report.layers[0].effective_rank.unwrap() <= 4);
    }

    #[test]
    fn rank_dad_identical_rank_one_sites_collapse_to_rank_one() {
        let mut rng = Rng::new(7);
        let u = random_matrix(&mut rng, 4, 1);
        let a = gemm(&u, &random_matrix(&mut rng, 1, 6), false, false).unwrap();
        let d = gemm(&u, &random_matrix(&mut rng, 1, 5), false, false).unwrap();
        let tapes: Vec<Vec<LayerTape>> = (0..3)
            .map(|_| tapes_from_pairs(vec![(a.clone(), d.clone())]))
            .collect();
        let mut net = Network::new(3, WireDtype::F64);
        let cfg = SpiConfig::new(4).with_iters(50);
        let (grads, report) = rank_dad_exchange(&mut net, &tapes, &cfg, 1, 0, 1).unwrap();
        assert_eq!(report.layers[0].effective_rank.unwrap(), 1);
        let pooled = pooled_gradient(&tapes, 0);
        assert!(rel_frobenius(&grads[0][0].w, &pooled) <= 1e-6);
    }

    #[test]
    fn rank_dad_recovers_low_rank_sites() {
        let mut rng = Rng::new(8);
        let tapes: Vec<Vec<LayerTape>> = (0..4)
            .map(|_| {
                let mix = random_matrix(&mut rng, 6, 2);
                let a = gemm(&mix, &random_matrix(&mut rng, 2, 20), false, false).unwrap();
                let d = gemm(&mix, &random_matrix(&mut rng, 2, 12), false, false).unwrap();
                tapes_from_pairs(vec![(a, d)])
            })
            .collect();
        let mut net = Network::new(4, WireDtype::F64);
        let cfg = SpiConfig::new(10).with_iters(50);
        let (grads, _) = rank_dad_exchange(&mut net, &tapes, &cfg, 2, 0, 1).unwrap();
        let pooled = pooled_gradient(&tapes, 0);
        let err = rel_frobenius(&grads[0][0].w, &pooled);
        assert!(err <= 1e-4, "stacked rank 8 < 10 should be recoverable, err {err}");
    }

    #[test]
    fn rank_dad_error_is_monotone_in_rank() {
        let mut rng = Rng::new(9);
        let tapes = random_sites(&mut rng, 2, &[(24, 16)], 6);
        let pooled = pooled_gradient(&tapes, 0);
        let mut prev_err = f64::INFINITY;
        for r in [1usize, 2, 4, 8, 16] {
            let mut net = Network::new(2, WireDtype::F64);
            let cfg = SpiConfig::new(r).with_iters(50);
            let (grads, _) = rank_dad_exchange(&mut net, &tapes, &cfg, 11, 0, 1).unwrap();
            let err = rel_frobenius(&grads[0][0].w, &pooled);
            assert!(
                err <= prev_err + 1e-9,
                "error grew from {prev_err} to {err} at rank {r}"
            );
            prev_err = err;
        }
    }

    #[test]
    fn powersgd_full_rank_single_site_recovers_gradient() {
        let mut rng = Rng::new(10);
        let tapes = random_sites(&mut rng, 1, &[(6, 5)], 4);
        let mut state = PowerSgdState::init(&[(6, 5)], 1, 5, 123);
        let mut net = Network::new(1, WireDtype::F64);
        let (grads, _) = powersgd_exchange(&mut net, &tapes, 5, &mut state, 1).unwrap();
        let pooled = pooled_gradient(&tapes, 0);
        assert!(rel_frobenius(&grads[0][0].w, &pooled) <= 1e-6);
        assert!(state.residual[0][0].frobenius_norm() <= 1e-9);
    }

    #[test]
    fn powersgd_zero_gradients_zero_everything() {
        let tapes: Vec<Vec<LayerTape>> = (0..2)
            .map(|_| tapes_from_pairs(vec![(Matrix::zeros(3, 4), Matrix::zeros(3, 2))]))
            .collect();
        let mut state = PowerSgdState::init(&[(4, 2)], 2, 2, 5);
        let mut net = Network::new(2, WireDtype::F64);
        let (grads, _) = powersgd_exchange(&mut net, &tapes, 2, &mut state, 1).unwrap();
        assert!(grads[0][0].w.data().iter().all(|&v| v == 0.0));
        assert!(state.residual[0][0].data().iter().all(|&v| v == 0.0));
        assert!(state.residual[1][0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn powersgd_shared_rank_one_structure_is_recovered() {
        // Both sites' gradients live in the same rank-1 subspace
        // (A_s = w_s u', Delta_s = w_s v', so M_s = |w_s|^2 u v'), making
        // the aggregate itself rank-1; one power step recovers it.
        let mut rng = Rng::new(11);
        let u = random_matrix(&mut rng, 1, 6);
        let v = random_matrix(&mut rng, 1, 4);
        let tapes: Vec<Vec<LayerTape>> = (0..2)
            .map(|_| {
                let w = random_matrix(&mut rng, 5, 1);
                let a = gemm(&w, &u, false, false).unwrap();
                let d = gemm(&w, &v, false, false).unwrap();
                tapes_from_pairs(vec![(a, d)])
            })
            .collect();
        let mut state = PowerSgdState::init(&[(6, 4)], 2, 1, 77);
        let mut net = Network::new(2, WireDtype::F64);
        let (grads, _) = powersgd_exchange(&mut net, &tapes, 1, &mut state, 1).unwrap();
        let pooled = pooled_gradient(&tapes, 0);
        assert!(rel_frobenius(&grads[0][0].w, &pooled) <= 1e-3);
    }

    #[test]
    fn topk_equal_to_dad_when_k_is_batch() {
        let mut rng = Rng::new(12);
        let tapes = random_sites(&mut rng, 2, &[(5, 4)], 3);
        let mut net_a = Network::new(2, WireDtype::F64);
        let (dad, _) = dad_exchange(&mut net_a, &tapes).unwrap();
        let mut net_b = Network::new(2, WireDtype::F64);
        let (topk, _) = topk_columns_exchange(&mut net_b, &tapes, 3).unwrap();
        assert_eq!(dad[0][0].w, topk[0][0].w);
        assert_eq!(dad[0][0].b, topk[0][0].b);
    }

    #[test]
    fn topk_ignores_zero_delta_rows() {
        let mut rng = Rng::new(13);
        let mut a = random_matrix(&mut rng, 6, 4);
        let mut d = Matrix::zeros(6, 3);
        // Only rows 1, 3, 4 carry signal.
        for &r in &[1usize, 3, 4] {
            for c in 0..3 {
                d.set(r, c, rng.standard_normal());
            }
        }
        for r in [0usize, 2, 5] {
            for c in 0..4 {
                a.set(r, c, rng.standard_normal());
            }
        }
        let tapes = vec![tapes_from_pairs(vec![(a, d)])];
        let mut net_a = Network::new(1, WireDtype::F64);
        let (dad, _) = dad_exchange(&mut net_a, &tapes).unwrap();
        let mut net_b = Network::new(1, WireDtype::F64);
        let (topk, _) = topk_columns_exchange(&mut net_b, &tapes, 3).unwrap();
        assert!(rel_frobenius(&topk[0][0].w, &dad[0][0].w) <= 1e-15);
    }

    #[test]
    fn topk_matches_row_subset_oracle() {
        let mut rng = Rng::new(14);
        let tapes = random_sites(&mut rng, 2, &[(7, 5)], 6);
        let k = 3;
        let mut net = Network::new(2, WireDtype::F64);
        let (grads, _) = topk_columns_exchange(&mut net, &tapes, k).unwrap();
        // Oracle: sum of the selected rows' outer products across sites.
        let mut expected = Matrix::zeros(7, 5);
        for tapes_s in &tapes {
            let d = tapes_s[0].delta.as_ref().unwrap();
            let picked = top_rows_by_norm(d, k);
            for &r in &picked {
                for i in 0..7 {
                    for j in 0..5 {
                        let v = expected.get(i, j) + tapes_s[0].a_in.get(r, i) * d.get(r, j);
                        expected.set(i, j, v);
                    }
                }
            }
        }
        assert!(rel_frobenius(&grads[0][0].w, &expected) <= 1e-12);
    }

    #[test]
    fn topk_rejects_small_batch() {
        let mut rng = Rng::new(15);
        let tapes = random_sites(&mut rng, 1, &[(3, 2)], 2);
        let mut net = Network::new(1, WireDtype::F64);
        assert!(matches!(
            topk_columns_exchange(&mut net, &tapes, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bytes_for_matches_hand_arithmetic() {
        let t = bytes_for(&ExchangeStrategy::Dsgd, 1024, 1024, 64, 4, 8);
        assert_eq!(t.up_per_site, 8_388_608);
        let t = bytes_for(&ExchangeStrategy::Dad, 1024, 1024, 64, 4, 8);
        assert_eq!(t.up_per_site, 1_048_576);
        assert_eq!(t.down_per_site, 4 * 1_048_576);
        let t = bytes_for(&ExchangeStrategy::rank_dad(10), 1024, 1024, 64, 4, 8);
        assert_eq!(t.up_per_site, 163_840);
        assert!((t.up_per_site as f64) / 8_388_608.0 <= 0.0196);
        let t = bytes_for(&ExchangeStrategy::TopkColumns { k: 3 }, 1, 1, 64, 4, 8);
        assert!(t.up_per_site > 0 && t.up_per_site < 300);
    }

    #[test]
    fn measured_bytes_equal_closed_form() {
        let mut rng = Rng::new(16);
        let (h_in, h_out, batch, sites) = (16, 12, 5, 3);
        let tapes = random_sites(&mut rng, sites, &[(h_in, h_out)], batch);

        let mut net = Network::new(sites, WireDtype::F64);
        let (_, report) = dsgd_exchange(&mut net, &tapes).unwrap();
        let t = bytes_for(&ExchangeStrategy::Dsgd, h_in, h_out, batch, sites, 8);
        assert_eq!(report.layers[0].bytes_up_per_site[0], t.up_per_site);
        assert_eq!(report.layers[0].bytes_down_per_site[2], t.down_per_site);

        let mut net = Network::new(sites, WireDtype::F64);
        let (_, report) = dad_exchange(&mut net, &tapes).unwrap();
        let t = bytes_for(&ExchangeStrategy::Dad, h_in, h_out, batch, sites, 8);
        assert_eq!(report.layers[0].bytes_up_per_site[1], t.up_per_site);
        assert_eq!(report.layers[0].bytes_down_per_site[0], t.down_per_site);

        let mut net = Network::new(sites, WireDtype::F64);
        let strat = ExchangeStrategy::rank_dad(4);
        let cfg = SpiConfig::new(4);
        let (_, report) = rank_dad_exchange(&mut net, &tapes, &cfg, 3, 0, 1).unwrap();
        let t = bytes_for(&strat, h_in, h_out, batch, sites, 8);
        assert!(report.layers[0].bytes_up_per_site[0] <= t.up_per_site);
        assert!(report.layers[0].bytes_down_per_site[0] <= t.down_per_site);

        let mut net = Network::new(sites, WireDtype::F64);
        let mut state = PowerSgdState::init(&[(h_in, h_out)], sites, 4, 9);
        let (_, report) = powersgd_exchange(&mut net, &tapes, 4, &mut state, 1).unwrap();
        let t = bytes_for(&ExchangeStrategy::PowerSgd { rank: 4 }, h_in, h_out, batch, sites, 8);
        assert_eq!(report.layers[0].bytes_up_per_site[0], t.up_per_site);
        assert_eq!(report.layers[0].bytes_down_per_site[0], t.down_per_site);

        let mut net = Network::new(sites, WireDtype::F64);
        let (_, report) = topk_columns_exchange(&mut net, &tapes, 3).unwrap();
        let t = bytes_for(&ExchangeStrategy::TopkColumns { k: 3 }, h_in, h_out, batch, sites, 8);
        assert_eq!(report.layers[0].bytes_up_per_site[0], t.up_per_site);
        assert_eq!(report.layers[0].bytes_down_per_site[0], t.down_per_site);
    }

    #[test]
    fn f32_wire_halves_measured_bytes() {
        let mut rng = Rng::new(17);
        let tapes = random_sites(&mut rng, 2, &[(8, 6)], 4);
        let mut net = Network::new(2, WireDtype::F32);
        let (_, report) = dad_exchange(&mut net, &tapes).unwrap();
        let t = bytes_for(&ExchangeStrategy::Dad, 8, 6, 4, 2, 4);
        assert_eq!(report.layers[0].bytes_up_per_site[0], t.up_per_site);
    }
}
