//! Experiment orchestration: folds, epochs, metric rows, CSV/JSON output.

use std::io::Write;
use std::path::PathBuf;

use dadsim_core::cluster::{
    elman_classifier, evaluate_with_workers, feed_forward_classifier, weight_hash, Cluster,
    ClusterConfig,
};
use dadsim_core::data::{self, Dataset};
use dadsim_core::metrics::compute_auc;
use dadsim_core::simnet::Direction;

use crate::config::ExperimentConfig;

/// One evaluation-point row of the metrics CSV.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Rounds completed since the start of the fold.
    pub step: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_auc: f64,
    /// Mean per-layer effective rank over the epoch (rank_dad only).
    pub effective_ranks: Vec<f64>,
    /// Weight-factor payload bytes uploaded this epoch, per layer, summed
    /// over sites and rounds.
    pub bytes_up: Vec<u64>,
    pub bytes_down: Vec<u64>,
    /// All frame bytes (every kind, headers included, both directions)
    /// since the fold started.
    pub cumulative_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub csv_path: PathBuf,
    pub rows: Vec<EpochRow>,
    pub final_weight_hash: String,
    /// Per-round, per-layer broadcast effective ranks (rank_dad only).
    pub round_effective_ranks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub folds: Vec<FoldResult>,
    pub summary_path: PathBuf,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, String> {
    match cfg.dataset.as_str() {
        "mnist" => {
            let dir = cfg.resolved_data_dir()?;
            let images = dir.join("train-images-idx3-ubyte");
            let labels = dir.join("train-labels-idx1-ubyte");
            data::load_mnist_idx(&images, &labels).map_err(|e| format!("io: {e}"))
        }
        "synth_lowrank" => data::synth_lowrank(
            cfg.synth_n,
            cfg.synth_m,
            cfg.synth_classes,
            cfg.synth_rank,
            cfg.synth_noise,
            cfg.seed,
        )
        .map_err(|e| format!("config: {e}")),
        "synth_sequences" => data::synth_sequences(
            cfg.synth_n,
            cfg.seq_len,
            cfg.synth_m,
            cfg.synth_classes,
            cfg.seed,
        )
        .map_err(|e| format!("config: {e}")),
        other => Err(format!("config: unknown dataset \"{other}\"")),
    }
}

fn build_model(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<dadsim_core::cluster::Model, String> {
    match cfg.dataset.as_str() {
        "synth_sequences" => elman_classifier(ds.feature_dim(), cfg.rnn_hidden, ds.classes, seed)
            .map_err(|e| format!("config: {e}")),
        _ => feed_forward_classifier(ds.feature_dim(), &cfg.hidden, ds.classes, seed)
            .map_err(|e| format!("config: {e}")),
    }
}

fn csv_header(layers: usize, with_ranks: bool) -> String {
    let mut cols = vec![
        "fold".to_string(),
        "epoch".to_string(),
        "step".to_string(),
        "train_loss".to_string(),
        "test_accuracy".to_string(),
        "test_auc".to_string(),
    ];
    if with_ranks {
        for l in 0..layers {
            cols.push(format!("eff_rank_l{l}"));
        }
    }
    for l in 0..layers {
        cols.push(format!("bytes_up_l{l}"));
    }
    for l in 0..layers {
        cols.push(format!("bytes_down_l{l}"));
    }
    cols.push("cum_bytes".to_string());
    cols.join(",")
}

fn csv_row(fold: usize, row: &EpochRow, with_ranks: bool) -> String {
    let mut cols = vec![
        fold.to_string(),
        row.epoch.to_string(),
        row.step.to_string(),
        format!("{}", row.train_loss),
        format!("{}", row.test_accuracy),
        format!("{}", row.test_auc),
    ];
    if with_ranks {
        for r in &row.effective_ranks {
            cols.push(format!("{r}"));
        }
    }
    for b in &row.bytes_up {
        cols.push(b.to_string());
    }
    for b in &row.bytes_down {
        cols.push(b.to_string());
    }
    cols.push(row.cumulative_bytes.to_string());
    cols.join(",")
}

/// Runs the configured experiment: `run_folds` folds of `folds`-fold CV,
/// one CSV per fold plus an aggregate summary JSON.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, String> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let folds_to_run = cfg.run_folds.unwrap_or(cfg.folds);
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| format!("io: cannot create {}: {e}", cfg.output_dir.display()))?;

    let with_ranks = cfg.strategy == "rank_dad";
    let mut fold_results = Vec::with_capacity(folds_to_run);

    for fold in 0..folds_to_run {
        let seed = fold_seed(cfg.seed, fold);
        let plan = data::kfold(dataset.len(), cfg.folds, cfg.seed)
            .map_err(|e| format!("config: {e}"))?;
        let (train, test) = plan.split(&dataset, fold).map_err(|e| format!("config: {e}"))?;
        let shards = data::shard(&train, cfg.sites, seed).map_err(|e| format!("config: {e}"))?;
        let model = build_model(cfg, &dataset, seed)?;
        let layers = model.exchange_dims().len();

        let cluster_cfg = ClusterConfig {
            sites: cfg.sites,
            batch_per_site: cfg.batch_per_site,
            lr: cfg.lr,
            seed,
            strategy: cfg.strategy_enum(),
            wire: cfg.wire_enum(),
            workers: cfg.workers,
        };
        let mut cluster =
            Cluster::new(cluster_cfg, model, shards).map_err(|e| format!("config: {e}"))?;
        let rounds_per_epoch = cluster.rounds_per_epoch();
        if rounds_per_epoch == 0 {
            return Err("config: shard smaller than one batch".into());
        }

        let csv_path = cfg.output_dir.join(format!("fold_{fold}.csv"));
        let mut csv = std::fs::File::create(&csv_path)
            .map_err(|e| format!("io: cannot create {}: {e}", csv_path.display()))?;
        writeln!(csv, "{}", csv_header(layers, with_ranks)).map_err(|e| format!("io: {e}"))?;

        let mut rows = Vec::with_capacity(cfg.epochs + 1);
        let mut round_ranks: Vec<Vec<usize>> = Vec::new();

        // Initial evaluation before any training.
        let initial = evaluate_row(cfg, &cluster, &train, &test, 0, 0, f64::NAN, layers)?;
        let initial = EpochRow {
            train_loss: eval_train_loss(&cluster, &train, cfg.workers)?,
            ..initial
        };
        writeln!(csv, "{}", csv_row(fold, &initial, with_ranks)).map_err(|e| format!("io: {e}"))?;
        rows.push(initial);

        for epoch in 1..=cfg.epochs {
            let mut loss_sum = 0.0;
            let mut up = vec![0u64; layers];
            let mut down = vec![0u64; layers];
            let mut rank_sums = vec![0.0f64; layers];
            for _ in 0..rounds_per_epoch {
                let outcome = cluster.run_round().map_err(|e| format!("round failed: {e}"))?;
                loss_sum += outcome.train_loss;
                let mut this_round = Vec::with_capacity(layers);
                for (l, lr) in outcome.report.layers.iter().enumerate() {
                    up[l] += lr.bytes_up_per_site.iter().sum::<u64>();
                    down[l] += lr.bytes_down_per_site.iter().sum::<u64>();
                    if let Some(r) = lr.effective_rank {
                        rank_sums[l] += r as f64;
                        this_round.push(r);
                    }
                }
                if !this_round.is_empty() {
                    round_ranks.push(this_round);
                }
            }
            let train_loss = loss_sum / rounds_per_epoch as f64;
            let mut row = evaluate_row(
                cfg,
                &cluster,
                &train,
                &test,
                epoch,
                epoch * rounds_per_epoch,
                train_loss,
                layers,
            )?;
            row.bytes_up = up;
            row.bytes_down = down;
            if with_ranks {
                row.effective_ranks =
                    rank_sums.iter().map(|s| s / rounds_per_epoch as f64).collect();
            }
            println!(
                "fold {fold} epoch {epoch}/{}: loss={:.4} acc={:.4} auc={:.4}",
                cfg.epochs, row.train_loss, row.test_accuracy, row.test_auc
            );
            writeln!(csv, "{}", csv_row(fold, &row, with_ranks)).map_err(|e| format!("io: {e}"))?;
            rows.push(row);
        }

        fold_results.push(FoldResult {
            fold,
            csv_path,
            rows,
            final_weight_hash: weight_hash(cluster.model()),
            round_effective_ranks: round_ranks,
        });
    }

    let summary_path = cfg.output_dir.join("summary.json");
    write_summary(cfg, &fold_results, &summary_path)?;
    Ok(ExperimentResult { folds: fold_results, summary_path })
}

/// Mean CE loss of the current shared model over a fixed train prefix
/// (reported on the epoch-0 row, where no batches have been consumed yet).
fn eval_train_loss(cluster: &Cluster, train: &Dataset, workers: usize) -> Result<f64, String> {
    let n = train.len().min(1024);
    let idx: Vec<usize> = (0..n).collect();
    let sub = train.subset(&idx);
    let eval = evaluate_with_workers(cluster.model(), &sub, 512, workers)
        .map_err(|e| format!("eval: {e}"))?;
    Ok(eval.loss)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_row(
    _cfg: &ExperimentConfig,
    cluster: &Cluster,
    _train: &Dataset,
    test: &Dataset,
    epoch: usize,
    step: usize,
    train_loss: f64,
    layers: usize,
) -> Result<EpochRow, String> {
    let eval = evaluate_with_workers(cluster.model(), test, 512, _cfg.workers)
        .map_err(|e| format!("eval: {e}"))?;
    let auc = compute_auc(&eval.scores, &test.labels).map_err(|e| format!("eval: {e}"))?;
    let ledger = cluster.net.ledger();
    let cumulative = ledger.total(Direction::Up) + ledger.total(Direction::Down);
    Ok(EpochRow {
        epoch,
        step,
        train_loss,
        test_accuracy: eval.accuracy,
        test_auc: auc,
        effective_ranks: vec![0.0; layers],
        bytes_up: vec![0; layers],
        bytes_down: vec![0; layers],
        cumulative_bytes: cumulative,
    })
}

fn write_summary(
    cfg: &ExperimentConfig,
    folds: &[FoldResult],
    path: &PathBuf,
) -> Result<(), String> {
    let finals: Vec<&EpochRow> = folds.iter().map(|f| f.rows.last().expect("rows")).collect();
    let mean = |f: &dyn Fn(&EpochRow) -> f64| -> f64 {
        finals.iter().map(|r| f(r)).sum::<f64>() / finals.len() as f64
    };
    let std = |f: &dyn Fn(&EpochRow) -> f64, m: f64| -> f64 {
        (finals.iter().map(|r| (f(r) - m) * (f(r) - m)).sum::<f64>() / finals.len() as f64).sqrt()
    };
    let loss_f: &dyn Fn(&EpochRow) -> f64 = &|r| r.train_loss;
    let acc_f: &dyn Fn(&EpochRow) -> f64 = &|r| r.test_accuracy;
    let auc_f: &dyn Fn(&EpochRow) -> f64 = &|r| r.test_auc;
    let (m_loss, m_acc, m_auc) = (mean(loss_f), mean(acc_f), mean(auc_f));

    let summary = serde_json::json!({
        "dataset": cfg.dataset,
        "strategy": cfg.strategy,
        "sites": cfg.sites,
        "epochs": cfg.epochs,
        "folds_run": folds.len(),
        "per_fold": folds.iter().map(|f| {
            let last = f.rows.last().expect("rows");
            serde_json::json!({
                "fold": f.fold,
                "final_train_loss": last.train_loss,
                "final_test_accuracy": last.test_accuracy,
                "final_test_auc": last.test_auc,
                "cumulative_bytes": last.cumulative_bytes,
                "weight_hash": f.final_weight_hash,
            })
        }).collect::<Vec<_>>(),
        "mean": {
            "final_train_loss": m_loss,
            "final_test_accuracy": m_acc,
            "final_test_auc": m_auc,
        },
        "std": {
            "final_train_loss": std(loss_f, m_loss),
            "final_test_accuracy": std(acc_f, m_acc),
            "final_test_auc": std(auc_f, m_auc),
        },
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| format!("io: {e}"))?;
    std::fs::write(path, text).map_err(|e| format!("io: {e}"))
}
