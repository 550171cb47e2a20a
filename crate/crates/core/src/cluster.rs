//! Multi-site training simulation.
//!
//! A [`Cluster`] owns `S` sites plus the aggregator-side plumbing. Each
//! round is a full barrier: every site draws a local batch, runs forward
//! and backward, the configured strategy exchanges gradients through the
//! simulated network, and every site applies the same update. Sites stay
//! bit-identical; divergence is a protocol error.
//!
//! Site-local phases may run on worker threads. All cross-site state is
//! produced by value and consumed in ascending site order, so the round is
//! deterministic for any worker count.

use sha2::{Digest, Sha256};

use crate::adam::{adam_step, AdamState, LayerGrad};
use crate::data::{Dataset, Features};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Activation, LayerTape, Loss, ModelParams};
use crate::rnn::{rnn_backward_bptt, rnn_forward_bptt, ElmanModel};
use crate::rng::Rng;
use crate::simnet::{Network, WireDtype};
use crate::strategies::{
    dad_exchange, dsgd_exchange_with_workers, powersgd_exchange, rank_dad_exchange,
    topk_columns_exchange, ExchangeStrategy, PowerSgdState, RoundReport,
};

/// A trainable model with exchangeable factor units.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    FeedForward { params: ModelParams, loss: Loss },
    Elman(ElmanModel),
}

impl Model {
    /// Weight shapes of the exchange units, `(h_in, h_out)` per unit.
    pub fn exchange_dims(&self) -> Vec<(usize, usize)> {
        match self {
            Model::FeedForward { params, .. } => params
                .layers
                .iter()
                .map(|l| (l.spec.in_dim, l.spec.out_dim))
                .collect(),
            Model::Elman(m) => vec![
                (m.input_dim, m.hidden_dim),
                (m.hidden_dim, m.hidden_dim),
                (m.hidden_dim, m.readout.output_dim()),
            ],
        }
    }

    fn optimizer_units(&self) -> Vec<((usize, usize), usize)> {
        self.exchange_dims()
            .into_iter()
            .map(|(h_in, h_out)| ((h_in, h_out), h_out))
            .collect()
    }

    pub fn new_optimizer(&self) -> AdamState {
        AdamState::with_units(&self.optimizer_units())
    }

    /// Forward + backward on one batch, producing one exchangeable tape per
    /// unit. `effective_batch` is the global sample count of the round.
    pub fn forward_backward(
        &self,
        batch: &Dataset,
        effective_batch: usize,
    ) -> Result<(f64, Vec<LayerTape>)> {
        match (self, &batch.features) {
            (Model::FeedForward { params, loss }, Features::Dense(x)) => {
                let (yhat, mut tapes) = nn::forward(params, x)?;
                let loss_val = nn::mean_loss(*loss, &yhat, &batch.labels);
                let last = tapes.len() - 1;
                let final_act = params.layers[last].spec.activation;
                let d = nn::output_delta(
                    *loss,
                    &yhat,
                    &batch.labels,
                    &tapes[last].z,
                    final_act,
                    effective_batch,
                )?;
                nn::backward(params, &mut tapes, d)?;
                Ok((loss_val, tapes))
            }
            (Model::Elman(m), Features::Seq(xs)) => {
                let (_, mut rtape) = rnn_forward_bptt(m, xs)?;
                let loss_val = rnn_backward_bptt(m, &mut rtape, &batch.labels, effective_batch)?;
                let delta = rtape.delta_stack.take().expect("set by backward");
                let tapes = vec![
                    LayerTape {
                        a_in: rtape.x_stack,
                        z: rtape.z_stack.clone(),
                        delta: Some(delta.clone()),
                    },
                    LayerTape {
                        a_in: rtape.h_prev_stack,
                        z: rtape.z_stack,
                        delta: Some(delta),
                    },
                    rtape.readout_tape,
                ];
                Ok((loss_val, tapes))
            }
            _ => Err(Error::Config("model kind does not match feature kind".into())),
        }
    }

    /// Applies one optimizer step from per-unit gradients.
    ///
    /// For the Elman cell the two tied units share one bias whose aggregated
    /// gradient is identical in both; it is applied once, from the
    /// input-weight unit.
    pub fn apply_grads(
        &mut self,
        grads: &[LayerGrad],
        opt: &mut AdamState,
        lr: f64,
    ) -> Result<()> {
        match self {
            Model::FeedForward { params, .. } => adam_step(params, grads, opt, lr),
            Model::Elman(m) => {
                if grads.len() != 3 {
                    return Err(Error::Shape("elman expects three unit gradients".into()));
                }
                let t = opt.begin_step();
                opt.update_unit(0, &mut m.wx, &mut m.b, &grads[0], lr, t)?;
                opt.update_weights_only(1, &mut m.wh, &grads[1].w, lr, t)?;
                let ro = &mut m.readout.layers[0];
                opt.update_unit(2, &mut ro.w, &mut ro.b, &grads[2], lr, t)
            }
        }
    }

    /// Class scores for a whole dataset, computed in row chunks (optionally
    /// on worker threads; chunk outputs are identical either way).
    pub fn predict(&self, features: &Features, chunk_rows: usize) -> Result<Matrix> {
        self.predict_with_workers(features, chunk_rows, 1)
    }

    pub fn predict_with_workers(
        &self,
        features: &Features,
        chunk_rows: usize,
        workers: usize,
    ) -> Result<Matrix> {
        let n = match features {
            Features::Dense(x) => x.rows(),
            Features::Seq(xs) => xs.first().map_or(0, |m| m.rows()),
        };
        let classes = match self {
            Model::FeedForward { params, .. } => params.output_dim(),
            Model::Elman(m) => m.readout.output_dim(),
        };
        let chunk = chunk_rows.max(1);
        let n_chunks = n.div_ceil(chunk);
        let chunk_scores: Vec<Result<Matrix>> = par_map_sites(n_chunks, workers, |ci| {
            let start = ci * chunk;
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            match (self, features) {
                (Model::FeedForward { params, .. }, Features::Dense(x)) => {
                    Ok(nn::forward(params, &x.select_rows(&idx))?.0)
                }
                (Model::Elman(m), Features::Seq(xs)) => {
                    let slice: Vec<Matrix> = xs.iter().map(|m| m.select_rows(&idx)).collect();
                    Ok(rnn_forward_bptt(m, &slice)?.0)
                }
                _ => Err(Error::Config("model kind does not match feature kind".into())),
            }
        });
        let mut scores = Matrix::zeros(n, classes);
        for (ci, part) in chunk_scores.into_iter().enumerate() {
            let part = part?;
            let start = ci * chunk;
            for off in 0..part.rows() {
                scores.row_mut(start + off).copy_from_slice(part.row(off));
            }
        }
        Ok(scores)
    }

    fn param_matrices(&self) -> Vec<&Matrix> {
        match self {
            Model::FeedForward { params, .. } => params
                .layers
                .iter()
                .flat_map(|l| [&l.w, &l.b])
                .collect(),
            Model::Elman(m) => {
                let ro = &m.readout.layers[0];
                vec![&m.wx, &m.wh, &m.b, &ro.w, &ro.b]
            }
        }
    }
}

/// Order-stable SHA-256 digest over all parameters (shapes and raw bytes).
/// Equal digests mean bit-equal weights.
pub fn weight_hash(model: &Model) -> String {
    let mut hasher = Sha256::new();
    for m in model.param_matrices() {
        hasher.update((m.rows() as u64).to_le_bytes());
        hasher.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// One site: model replica, optimizer, local shard and draw order.
#[derive(Debug, Clone)]
pub struct SiteState {
    pub site_id: usize,
    pub model: Model,
    pub optimizer: AdamState,
    data: Dataset,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl SiteState {
    fn new(site_id: usize, model: Model, data: Dataset, seed: u64) -> Self {
        let optimizer = model.new_optimizer();
        let n = data.len();
        SiteState {
            site_id,
            model,
            optimizer,
            data,
            order: (0..n).collect(),
            cursor: n, // forces a shuffle before the first draw
            rng: Rng::derive(seed, 0xda7a_0000 + site_id as u64),
        }
    }

    pub fn shard_len(&self) -> usize {
        self.data.len()
    }

    fn next_batch(&mut self, batch: usize) -> Result<Dataset> {
        if batch == 0 || batch > self.data.len() {
            return Err(Error::Config(format!(
                "batch {batch} invalid for shard of {}",
                self.data.len()
            )));
        }
        if self.cursor + batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + batch];
        let out = self.data.subset(idx);
        self.cursor += batch;
        Ok(out)
    }
}

/// Cluster-wide configuration.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub sites: usize,
    pub batch_per_site: usize,
    pub lr: f64,
    pub seed: u64,
    pub strategy: ExchangeStrategy,
    pub wire: WireDtype,
    /// Worker threads for site-local phases; any value yields identical
    /// results.
    pub workers: usize,
}

/// What one round produced (for metrics and for pooled-run cross-checks).
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub train_loss: f64,
    pub report: RoundReport,
    /// The exact batch each site consumed, in site order.
    pub batches: Vec<Dataset>,
}

/// `S` synchronized sites plus one aggregator.
pub struct Cluster {
    pub cfg: ClusterConfig,
    pub sites: Vec<SiteState>,
    pub net: Network,
    psgd: Option<PowerSgdState>,
    round: usize,
}

impl Cluster {
    /// Builds the cluster from a model template (cloned to every site, which
    /// is exactly the shared-seed initialization the protocol expects) and
    /// per-site data shards.
    pub fn new(cfg: ClusterConfig, template: Model, shards: Vec<Dataset>) -> Result<Self> {
        if shards.len() != cfg.sites || cfg.sites == 0 {
            return Err(Error::Config(format!(
                "expected {} shards, got {}",
                cfg.sites,
                shards.len()
            )));
        }
        let psgd = match &cfg.strategy {
            ExchangeStrategy::PowerSgd { rank } => Some(PowerSgdState::init(
                &template.exchange_dims(),
                cfg.sites,
                *rank,
                cfg.seed,
            )),
            _ => None,
        };
        let sites = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| SiteState::new(i, template.clone(), shard, cfg.seed))
            .collect();
        let net = Network::new(cfg.sites, cfg.wire);
        Ok(Cluster { cfg, sites, net, psgd, round: 0 })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Rounds needed to traverse each shard once.
    pub fn rounds_per_epoch(&self) -> usize {
        self.sites
            .iter()
            .map(|s| s.shard_len() / self.cfg.batch_per_site)
            .min()
            .unwrap_or(0)
    }

    /// The shared model (site 0's replica; all replicas are bit-identical).
    pub fn model(&self) -> &Model {
        &self.sites[0].model
    }

    /// One synchronized training step.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let s = self.cfg.sites;
        let effective_batch = s * self.cfg.batch_per_site;
        self.net.set_round(self.round);

        let mut batches = Vec::with_capacity(s);
        for site in self.sites.iter_mut() {
            batches.push(site.next_batch(self.cfg.batch_per_site)?);
        }

        let fb: Vec<Result<(f64, Vec<LayerTape>)>> = {
            let sites = &self.sites;
            let batches = &batches;
            par_map_sites(s, self.cfg.workers, move |i| {
                sites[i].model.forward_backward(&batches[i], effective_batch)
            })
        };
        let mut site_tapes = Vec::with_capacity(s);
        let mut loss_sum = 0.0;
        for r in fb {
            let (l, t) = r?;
            loss_sum += l;
            site_tapes.push(t);
        }
        let train_loss = loss_sum / s as f64;

        let (grads, report) = match self.cfg.strategy.clone() {
            ExchangeStrategy::Dsgd => {
                dsgd_exchange_with_workers(&mut self.net, &site_tapes, self.cfg.workers)?
            }
            ExchangeStrategy::Dad => dad_exchange(&mut self.net, &site_tapes)?,
            ExchangeStrategy::RankDad { spi } => rank_dad_exchange(
                &mut self.net,
                &site_tapes,
                &spi,
                self.cfg.seed,
                self.round,
                self.cfg.workers,
            )?,
            ExchangeStrategy::PowerSgd { rank } => {
                let state = self.psgd.as_mut().expect("initialized with strategy");
                powersgd_exchange(&mut self.net, &site_tapes, rank, state, self.cfg.workers)?
            }
            ExchangeStrategy::TopkColumns { k } => {
                topk_columns_exchange(&mut self.net, &site_tapes, k)?
            }
        };

        let lr = self.cfg.lr;
        par_zip_mut(&mut self.sites, &grads, self.cfg.workers, |site, site_grads| {
            site.model.apply_grads(site_grads, &mut site.optimizer, lr)
        })?;
        for site in &self.sites[1..] {
            if site.model != self.sites[0].model {
                return Err(Error::Protocol(format!(
                    "site {} weights diverged at end of round {}",
                    site.site_id, self.round
                )));
            }
        }

        self.round += 1;
        Ok(RoundOutcome { round: self.round - 1, train_loss, report, batches })
    }
}

/// Model/dataset evaluation summary.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub scores: Matrix,
}

/// Chunked evaluation of a model over a dataset.
pub fn evaluate(model: &Model, data: &Dataset, chunk_rows: usize) -> Result<Evaluation> {
    evaluate_with_workers(model, data, chunk_rows, 1)
}

/// [`evaluate`] with chunk forwards spread over worker threads.
pub fn evaluate_with_workers(
    model: &Model,
    data: &Dataset,
    chunk_rows: usize,
    workers: usize,
) -> Result<Evaluation> {
    let scores = model.predict_with_workers(&data.features, chunk_rows, workers)?;
    let n = data.len();
    let mut correct = 0usize;
    for r in 0..n {
        let pred = scores
            .row(r)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if data.labels.get(r, pred) == 1.0 {
            correct += 1;
        }
    }
    let loss = nn::mean_loss(Loss::SoftmaxCrossEntropy, &scores, &data.labels);
    Ok(Evaluation { loss, accuracy: correct as f64 / n as f64, scores })
}

/// Builds the standard feed-forward classifier for the given layer widths:
/// ReLU hidden layers, softmax output.
pub fn feed_forward_classifier(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    seed: u64,
) -> Result<Model> {
    let mut dims = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &h in hidden {
        dims.push(nn::LayerSpec::new(prev, h, Activation::Relu)?);
        prev = h;
    }
    dims.push(nn::LayerSpec::new(prev, classes, Activation::SoftmaxOutput)?);
    let mut rng = Rng::new(seed);
    Ok(Model::FeedForward {
        params: ModelParams::init(&dims, &mut rng)?,
        loss: Loss::SoftmaxCrossEntropy,
    })
}

/// Elman sequence classifier with shared-seed initialization.
pub fn elman_classifier(
    input_dim: usize,
    hidden_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<Model> {
    let mut rng = Rng::new(seed);
    Ok(Model::Elman(ElmanModel::init(input_dim, hidden_dim, classes, &mut rng)?))
}

/// Runs `f(site_index)` for every site, on up to `workers` scoped threads.
/// Sites are partitioned into contiguous blocks; outputs land in site order,
/// so the result is independent of the worker count.
pub(crate) fn par_map_sites<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let threads = workers.min(n);
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut rest = out.as_mut_slice();
        let base = n / threads;
        let extra = n % threads;
        let mut start = 0;
        for tid in 0..threads {
            let len = base + usize::from(tid < extra);
            let (chunk, tail) = rest.split_at_mut(len);
            rest = tail;
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(start + off));
                }
            });
            start += len;
        }
    });
    out.into_iter().map(|o| o.expect("every slot filled")).collect()
}

/// Applies `f` to each `(item, arg)` pair in place, on up to `workers`
/// threads over contiguous chunks. The first error (in pair order within a
/// chunk) wins; all chunks still run to completion.
pub(crate) fn par_zip_mut<A, B, F>(
    items: &mut [A],
    args: &[B],
    workers: usize,
    f: F,
) -> Result<()>
where
    A: Send,
    B: Sync,
    F: Fn(&mut A, &B) -> Result<()> + Sync,
{
    assert_eq!(items.len(), args.len());
    let n = items.len();
    if workers <= 1 || n <= 1 {
        for (a, b) in items.iter_mut().zip(args) {
            f(a, b)?;
        }
        return Ok(());
    }
    let threads = workers.min(n);
    let base = n / threads;
    let extra = n % threads;
    let mut results: Vec<Result<()>> = Vec::new();
    std::thread::scope(|scope| {
        let mut item_rest = items;
        let mut arg_rest = args;
        let mut handles = Vec::new();
        for tid in 0..threads {
            let len = base + usize::from(tid < extra);
            let (ichunk, itail) = item_rest.split_at_mut(len);
            item_rest = itail;
            let (achunk, atail) = arg_rest.split_at(len);
            arg_rest = atail;
            let f = &f;
            handles.push(scope.spawn(move || {
                for (a, b) in ichunk.iter_mut().zip(achunk) {
                    f(a, b)?;
                }
                Ok(())
            }));
        }
        results = handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect();
    });
    for r in results {
        r?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shard, synth_lowrank};

    fn small_cluster(strategy: ExchangeStrategy, seed: u64, workers: usize) -> Cluster {
        let ds = synth_lowrank(64, 10, 3, 4, 0.1, seed).unwrap();
        let shards = shard(&ds, 2, seed).unwrap();
        let model = feed_forward_classifier(10, &[16], 3, seed).unwrap();
        let cfg = ClusterConfig {
            sites: 2,
            batch_per_site: 8,
            lr: 1e-3,
            seed,
            strategy,
            wire: WireDtype::F64,
            workers,
        };
        Cluster::new(cfg, model, shards).unwrap()
    }

    #[test]
    fn par_map_matches_sequential() {
        let seq = par_map_sites(7, 1, |i| i * i);
        let par = par_map_sites(7, 4, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn fresh_sites_share_weight_hash() {
        let cluster = small_cluster(ExchangeStrategy::Dad, 3, 1);
        let h0 = weight_hash(&cluster.sites[0].model);
        let h1 = weight_hash(&cluster.sites[1].model);
        assert_eq!(h0, h1);
    }

    #[test]
    fn one_ulp_perturbation_changes_hash() {
        let mut cluster = small_cluster(ExchangeStrategy::Dad, 4, 1);
        let before = weight_hash(&cluster.sites[0].model);
        if let Model::FeedForward { params, .. } = &mut cluster.sites[0].model {
            let v = params.layers[0].w.get(0, 0);
            params.layers[0].w.set(0, 0, f64::from_bits(v.to_bits() ^ 1));
        }
        assert_ne!(before, weight_hash(&cluster.sites[0].model));
    }

    #[test]
    fn rounds_keep_sites_synchronized() {
        for strategy in [
            ExchangeStrategy::Dsgd,
            ExchangeStrategy::Dad,
            ExchangeStrategy::rank_dad(4),
            ExchangeStrategy::PowerSgd { rank: 4 },
            ExchangeStrategy::TopkColumns { k: 3 },
        ] {
            let mut cluster = small_cluster(strategy.clone(), 9, 1);
            for _ in 0..3 {
                cluster.run_round().unwrap_or_else(|e| panic!("{}: {e}", strategy.name()));
            }
            assert_eq!(
                weight_hash(&cluster.sites[0].model),
                weight_hash(&cluster.sites[1].model)
            );
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut a = small_cluster(ExchangeStrategy::rank_dad(3), 11, 1);
        let mut b = small_cluster(ExchangeStrategy::rank_dad(3), 11, 4);
        for _ in 0..4 {
            a.run_round().unwrap();
            b.run_round().unwrap();
        }
        assert_eq!(weight_hash(a.model()), weight_hash(b.model()));
        assert_eq!(
            a.net.ledger().total(crate::simnet::Direction::Up),
            b.net.ledger().total(crate::simnet::Direction::Up)
        );
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut c = small_cluster(ExchangeStrategy::rank_dad(3), 13, 2);
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(c.run_round().unwrap().train_loss);
            }
            (weight_hash(c.model()), losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_reports_sane_accuracy() {
        let ds = synth_lowrank(128, 10, 3, 4, 0.0, 21).unwrap();
        let model = feed_forward_classifier(10, &[16], 3, 21).unwrap();
        let eval = evaluate(&model, &ds, 32).unwrap();
        assert!(eval.accuracy >= 0.0 && eval.accuracy <= 1.0);
        assert!(eval.loss.is_finite());
        assert_eq!(eval.scores.rows(), 128);
    }
}
