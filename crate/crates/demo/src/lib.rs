//! Browser demo: interactive SPI compression, bandwidth curves, and live
//! distributed training on a synthetic task.
//!
//! Exposed operations speak JSON strings so the page needs no generated
//! bindings beyond wasm-bindgen's. The same functions compile and run
//! natively, which is how the tests exercise them. Inside the browser the
//! simulation always runs single-worker (no threads in this wasm setup);
//! worker count never changes results anyway.

use serde::Deserialize;
use wasm_bindgen::prelude::*;

use dadsim_core::cluster::{evaluate, feed_forward_classifier, Cluster, ClusterConfig};
use dadsim_core::data::{shard, synth_lowrank};
use dadsim_core::matrix::{gemm, rel_frobenius, Matrix};
use dadsim_core::rng::Rng;
use dadsim_core::simnet::{Direction, WireDtype};
use dadsim_core::spi::{effective_rank, reconstruct, spi, SpiConfig};
use dadsim_core::strategies::{bytes_for, ExchangeStrategy};

fn err_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Deserialize)]
struct SpiSweepRequest {
    #[serde(default = "default_batch_rows")]
    n: usize,
    #[serde(default = "default_h")]
    h_in: usize,
    #[serde(default = "default_h")]
    h_out: usize,
    /// Geometric decay of the gradient spectrum, in (0, 1].
    #[serde(default = "default_decay")]
    decay: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_max_rank")]
    max_rank: usize,
}

fn default_batch_rows() -> usize {
    32
}
fn default_h() -> usize {
    256
}
fn default_decay() -> f64 {
    0.75
}
fn default_max_rank() -> usize {
    16
}

fn spi_sweep_impl(req: &SpiSweepRequest) -> Result<String, String> {
    if req.n == 0 || req.h_in == 0 || req.h_out == 0 || req.max_rank == 0 {
        return Err("all dimensions must be >= 1".into());
    }
    if !(req.decay > 0.0 && req.decay <= 1.0) {
        return Err("decay must be in (0, 1]".into());
    }
    if req.n * (req.h_in + req.h_out) > 4_000_000 {
        return Err("problem too large for the demo".into());
    }
    let mut rng = Rng::new(req.seed);
    let mut a = Matrix::from_vec(
        req.n,
        req.h_in,
        (0..req.n * req.h_in).map(|_| rng.standard_normal()).collect(),
    )
    .map_err(|e| e.to_string())?;
    let delta = Matrix::from_vec(
        req.n,
        req.h_out,
        (0..req.n * req.h_out).map(|_| rng.standard_normal()).collect(),
    )
    .map_err(|e| e.to_string())?;
    for r in 0..req.n {
        let s = req.decay.powi(r as i32);
        for v in a.row_mut(r) {
            *v *= s;
        }
    }
    let grad = gemm(&a, &delta, true, false).map_err(|e| e.to_string())?;
    let dense_bytes = (req.h_in * req.h_out * 8) as u64;

    let mut points = Vec::new();
    for rank in 1..=req.max_rank.min(req.n) {
        let cfg = SpiConfig::new(rank).with_iters(50);
        let f = spi(&delta, &a, &cfg, &mut Rng::derive(req.seed, rank as u64))
            .map_err(|e| e.to_string())?;
        let rec = reconstruct(&f);
        let r_eff = effective_rank(&f);
        points.push(serde_json::json!({
            "rank": rank,
            "effective_rank": r_eff,
            "rel_error": rel_frobenius(&rec, &grad),
            "factor_bytes": (r_eff * (req.h_in + req.h_out) * 8) as u64,
        }));
    }
    Ok(serde_json::json!({
        "dense_bytes": dense_bytes,
        "batch_rows": req.n,
        "points": points,
    })
    .to_string())
}

/// Sweeps SPI over ranks on a decaying-spectrum gradient and reports
/// reconstruction error, retained rank and factor bytes per rank.
#[wasm_bindgen]
pub fn spi_sweep(request: &str) -> String {
    match serde_json::from_str::<SpiSweepRequest>(request) {
        Ok(req) => spi_sweep_impl(&req).unwrap_or_else(|e| err_json(&e)),
        Err(e) => err_json(&format!("bad request: {e}")),
    }
}

#[derive(Deserialize)]
struct BandwidthRequest {
    #[serde(default = "default_layers")]
    layers: Vec<usize>,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_rank")]
    rank: usize,
    #[serde(default = "default_sites")]
    sites: usize,
}

fn default_layers() -> Vec<usize> {
    vec![16, 32, 64, 128, 256, 512, 1024, 2048, 4096]
}
fn default_batch() -> usize {
    64
}
fn default_rank() -> usize {
    10
}
fn default_sites() -> usize {
    4
}

fn bandwidth_curves_impl(req: &BandwidthRequest) -> Result<String, String> {
    if req.layers.is_empty() || req.batch == 0 || req.rank == 0 || req.sites == 0 {
        return Err("layers, batch, rank and sites must be positive".into());
    }
    let strategies = [
        ExchangeStrategy::Dsgd,
        ExchangeStrategy::Dad,
        ExchangeStrategy::rank_dad(req.rank),
        ExchangeStrategy::PowerSgd { rank: req.rank },
        ExchangeStrategy::TopkColumns { k: 3 },
    ];
    let series: Vec<serde_json::Value> = strategies
        .iter()
        .map(|s| {
            let ups: Vec<u64> = req
                .layers
                .iter()
                .map(|&h| bytes_for(s, h, h, req.batch, req.sites, 8).up_per_site)
                .collect();
            serde_json::json!({ "strategy": s.name(), "bytes_up_per_site": ups })
        })
        .collect();
    Ok(serde_json::json!({ "layers": req.layers, "series": series }).to_string())
}

/// Closed-form per-layer upload bytes for every strategy across layer
/// widths (the bandwidth-vs-layer-size picture).
#[wasm_bindgen]
pub fn bandwidth_curves(request: &str) -> String {
    match serde_json::from_str::<BandwidthRequest>(request) {
        Ok(req) => bandwidth_curves_impl(&req).unwrap_or_else(|e| err_json(&e)),
        Err(e) => err_json(&format!("bad request: {e}")),
    }
}

#[derive(Deserialize)]
struct TrainingRequest {
    #[serde(default = "default_strategy")]
    strategy: String,
    #[serde(default = "default_rank")]
    rank: usize,
    #[serde(default = "default_sites")]
    sites: usize,
    #[serde(default = "default_train_batch")]
    batch_per_site: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_m")]
    m: usize,
    #[serde(default = "default_classes")]
    classes: usize,
    #[serde(default = "default_true_rank")]
    true_rank: usize,
    #[serde(default = "default_noise")]
    noise: f64,
    #[serde(default = "default_hidden")]
    hidden: usize,
}

fn default_strategy() -> String {
    "rank_dad".into()
}
fn default_train_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_n() -> usize {
    1024
}
fn default_m() -> usize {
    32
}
fn default_classes() -> usize {
    4
}
fn default_true_rank() -> usize {
    6
}
fn default_noise() -> f64 {
    0.1
}
fn default_hidden() -> usize {
    64
}

/// Interactive distributed training on a synthetic low-rank task. Construct
/// once, then call `step` repeatedly for live curves.
#[wasm_bindgen]
pub struct TrainingDemo {
    cluster: Cluster,
    test: dadsim_core::data::Dataset,
    layers: usize,
}

impl TrainingDemo {
    fn build(req: &TrainingRequest) -> Result<TrainingDemo, String> {
        let strategy = match req.strategy.as_str() {
            "dsgd" => ExchangeStrategy::Dsgd,
            "dad" => ExchangeStrategy::Dad,
            "rank_dad" => ExchangeStrategy::rank_dad(req.rank),
            "power_sgd" => ExchangeStrategy::PowerSgd { rank: req.rank },
            "topk_columns" => ExchangeStrategy::TopkColumns { k: 3 },
            other => return Err(format!("unknown strategy \"{other}\"")),
        };
        if req.sites == 0 || req.batch_per_site == 0 || req.rank == 0 {
            return Err("sites, batch_per_site and rank must be >= 1".into());
        }
        let ds = synth_lowrank(req.n, req.m, req.classes, req.true_rank, req.noise, req.seed)
            .map_err(|e| e.to_string())?;
        let split = (req.n * 4) / 5;
        let train = ds.subset(&(0..split).collect::<Vec<_>>());
        let test = ds.subset(&(split..req.n).collect::<Vec<_>>());
        let model = feed_forward_classifier(req.m, &[req.hidden], req.classes, req.seed)
            .map_err(|e| e.to_string())?;
        let layers = model.exchange_dims().len();
        let shards = shard(&train, req.sites, req.seed).map_err(|e| e.to_string())?;
        let cluster = Cluster::new(
            ClusterConfig {
                sites: req.sites,
                batch_per_site: req.batch_per_site,
                lr: req.lr,
                seed: req.seed,
                strategy,
                wire: WireDtype::F64,
                workers: 1,
            },
            model,
            shards,
        )
        .map_err(|e| e.to_string())?;
        Ok(TrainingDemo { cluster, test, layers })
    }

    fn step_impl(&mut self, rounds: usize) -> Result<String, String> {
        let mut train_loss = f64::NAN;
        let mut ranks = vec![0.0f64; self.layers];
        let mut rank_rounds = 0usize;
        for _ in 0..rounds {
            let outcome = self.cluster.run_round().map_err(|e| e.to_string())?;
            train_loss = outcome.train_loss;
            let mut counted = false;
            for (l, layer) in outcome.report.layers.iter().enumerate() {
                if let Some(r) = layer.effective_rank {
                    ranks[l] += r as f64;
                    counted = true;
                }
            }
            if counted {
                rank_rounds += 1;
            }
        }
        if rank_rounds > 0 {
            for r in ranks.iter_mut() {
                *r /= rank_rounds as f64;
            }
        }
        let eval = evaluate(self.cluster.model(), &self.test, 256).map_err(|e| e.to_string())?;
        let ledger = self.cluster.net.ledger();
        let total = ledger.total(Direction::Up) + ledger.total(Direction::Down);
        Ok(serde_json::json!({
            "round": self.cluster.round(),
            "train_loss": train_loss,
            "test_accuracy": eval.accuracy,
            "cumulative_bytes": total,
            "effective_ranks": ranks,
        })
        .to_string())
    }
}

#[wasm_bindgen]
impl TrainingDemo {
    /// Builds the cluster from a JSON config; throws on invalid input.
    #[wasm_bindgen(constructor)]
    pub fn new(request: &str) -> Result<TrainingDemo, JsValue> {
        let req: TrainingRequest = serde_json::from_str(request)
            .map_err(|e| JsValue::from_str(&format!("bad request: {e}")))?;
        TrainingDemo::build(&req).map_err(|e| JsValue::from_str(&e))
    }

    /// Runs `rounds` synchronized rounds and returns the latest metrics.
    pub fn step(&mut self, rounds: u32) -> String {
        self.step_impl(rounds.max(1) as usize).unwrap_or_else(|e| err_json(&e))
    }

    /// Rounds in one pass over the training shards.
    pub fn rounds_per_epoch(&self) -> u32 {
        self.cluster.rounds_per_epoch() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spi_sweep_error_decreases_with_rank() {
        let req = SpiSweepRequest {
            n: 16,
            h_in: 64,
            h_out: 48,
            decay: 0.7,
            seed: 3,
            max_rank: 8,
        };
        let out = spi_sweep_impl(&req).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let points = v["points"].as_array().unwrap();
        assert_eq!(points.len(), 8);
        let errs: Vec<f64> = points.iter().map(|p| p["rel_error"].as_f64().unwrap()).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "error increased: {errs:?}");
        }
        assert_eq!(v["dense_bytes"].as_u64().unwrap(), 64 * 48 * 8);
    }

    #[test]
    fn bandwidth_curves_cover_all_strategies() {
        let req = BandwidthRequest { layers: vec![64, 1024], batch: 64, rank: 10, sites: 4 };
        let out = bandwidth_curves_impl(&req).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let series = v["series"].as_array().unwrap();
        assert_eq!(series.len(), 5);
        assert_eq!(series[0]["strategy"], "dsgd");
        assert_eq!(series[0]["bytes_up_per_site"][1].as_u64().unwrap(), 8_388_608);
    }

    #[test]
    fn training_demo_learns_the_synthetic_task() {
        let req = TrainingRequest {
            strategy: "rank_dad".into(),
            rank: 6,
            sites: 2,
            batch_per_site: 16,
            lr: 3e-3,
            seed: 5,
            n: 512,
            m: 16,
            classes: 3,
            true_rank: 4,
            noise: 0.05,
            hidden: 32,
        };
        let mut demo = TrainingDemo::build(&req).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(&demo.step_impl(1).unwrap()).unwrap();
        for _ in 0..20 {
            demo.step_impl(10).unwrap();
        }
        let last: serde_json::Value =
            serde_json::from_str(&demo.step_impl(1).unwrap()).unwrap();
        let acc0 = first["test_accuracy"].as_f64().unwrap();
        let acc1 = last["test_accuracy"].as_f64().unwrap();
        assert!(acc1 > acc0.max(0.5), "no learning: {acc0} -> {acc1}");
        assert!(last["cumulative_bytes"].as_u64().unwrap() > 0);
    }

    #[test]
    fn bad_requests_are_reported_not_panicked() {
        let out = spi_sweep("{\"n\": 0}");
        assert!(out.contains("error"));
        let out = bandwidth_curves("{\"layers\": []}");
        assert!(out.contains("error"));
    }
}
