//! Datasets: IDX loading, synthetic generation, folding and sharding.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Feature storage: a dense sample-by-feature matrix, or one matrix per
/// timestep for sequence tasks.
#[derive(Debug, Clone)]
pub enum Features {
    Dense(Matrix),
    /// `T` matrices of shape `N x M`.
    Seq(Vec<Matrix>),
}

/// A labeled dataset with one-hot targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Features,
    /// One-hot, `N x classes`.
    pub labels: Matrix,
    pub name: String,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        match &self.features {
            Features::Dense(x) => x.cols(),
            Features::Seq(xs) => xs.first().map_or(0, |m| m.cols()),
        }
    }

    pub fn seq_len(&self) -> Option<usize> {
        match &self.features {
            Features::Dense(_) => None,
            Features::Seq(xs) => Some(xs.len()),
        }
    }

    /// Integer label per sample (argmax of the one-hot row).
    pub fn label_indices(&self) -> Vec<usize> {
        (0..self.labels.rows())
            .map(|r| {
                self.labels
                    .row(r)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// New dataset containing the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = match &self.features {
            Features::Dense(x) => Features::Dense(x.select_rows(indices)),
            Features::Seq(xs) => {
                Features::Seq(xs.iter().map(|m| m.select_rows(indices)).collect())
            }
        };
        Dataset {
            features,
            labels: self.labels.select_rows(indices),
            name: self.name.clone(),
            classes: self.classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        match &self.features {
            Features::Dense(x) => {
                if x.rows() != n {
                    return Err(Error::Shape("feature/label row mismatch".into()));
                }
                if !x.is_finite() {
                    return Err(Error::Numeric("non-finite feature".into()));
                }
            }
            Features::Seq(xs) => {
                if xs.is_empty() {
                    return Err(Error::Config("sequence dataset needs T >= 1".into()));
                }
                for m in xs {
                    if m.rows() != n {
                        return Err(Error::Shape("feature/label row mismatch".into()));
                    }
                }
            }
        }
        for r in 0..n {
            let row = self.labels.row(r);
            let sum: f64 = row.iter().sum();
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if (sum - 1.0).abs() > 1e-12 || ones != 1 {
                return Err(Error::Format(format!("label row {r} is not one-hot")));
            }
        }
        Ok(())
    }

    /// Writes one sample per line with a header row. Sequence features are
    /// flattened time-major (`f_t{t}_d{d}` columns).
    pub fn export_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        match &self.features {
            Features::Dense(x) => {
                let header: Vec<String> = (0..x.cols()).map(|d| format!("f_{d}")).collect();
                writeln!(out, "{},label", header.join(","))?;
                let labels = self.label_indices();
                for r in 0..x.rows() {
                    let vals: Vec<String> = x.row(r).iter().map(|v| format!("{v}")).collect();
                    writeln!(out, "{},{}", vals.join(","), labels[r])?;
                }
            }
            Features::Seq(xs) => {
                let mut header = Vec::new();
                for (t, m) in xs.iter().enumerate() {
                    for d in 0..m.cols() {
                        header.push(format!("f_t{t}_d{d}"));
                    }
                }
                writeln!(out, "{},label", header.join(","))?;
                let labels = self.label_indices();
                for r in 0..self.len() {
                    let mut vals = Vec::new();
                    for m in xs {
                        vals.extend(m.row(r).iter().map(|v| format!("{v}")));
                    }
                    writeln!(out, "{},{}", vals.join(","), labels[r])?;
                }
            }
        }
        Ok(())
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Loads an MNIST-style IDX image/label pair.
///
/// Pixels are scaled to `[0, 1]` by `/255`; labels become one-hot rows with
/// `C = 10`. Header-declared sizes must match the file lengths exactly.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;

    if read_u32_be(&img, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic in {}", images_path.display())));
    }
    let n_img = read_u32_be(&img, 4)? as usize;
    let rows = read_u32_be(&img, 8)? as usize;
    let cols = read_u32_be(&img, 12)? as usize;
    if img.len() != 16 + n_img * rows * cols {
        return Err(Error::Format(format!(
            "image file length {} does not match declared {}x{}x{}",
            img.len(),
            n_img,
            rows,
            cols
        )));
    }

    if read_u32_be(&lab, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic in {}", labels_path.display())));
    }
    let n_lab = read_u32_be(&lab, 4)? as usize;
    if lab.len() != 8 + n_lab {
        return Err(Error::Format("label file length does not match declared count".into()));
    }
    if n_img != n_lab {
        return Err(Error::Format(format!(
            "image count {n_img} does not match label count {n_lab}"
        )));
    }

    let dim = rows * cols;
    let mut x = Matrix::zeros(n_img, dim);
    for (i, px) in img[16..].iter().enumerate() {
        x.data_mut()[i] = *px as f64 / 255.0;
    }
    let mut y = Matrix::zeros(n_lab, 10);
    for (r, &l) in lab[8..].iter().enumerate() {
        if l > 9 {
            return Err(Error::Format(format!("label {l} out of range at row {r}")));
        }
        y.set(r, l as usize, 1.0);
    }
    let ds = Dataset { features: Features::Dense(x), labels: y, name: "mnist".into(), classes: 10 };
    ds.validate()?;
    Ok(ds)
}

/// Synthetic classification data from a rank-limited generative model:
/// latent Gaussians mixed up to `m` dims, labels from the argmax of a fixed
/// random linear map of the clean features, then Gaussian feature noise.
pub fn synth_lowrank(
    n: usize,
    m: usize,
    classes: usize,
    true_rank: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if true_rank == 0 || true_rank > m {
        return Err(Error::Config(format!("true_rank {true_rank} must be in 1..={m}")));
    }
    if classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let mut rng = Rng::derive(seed, LOWRANK_STREAM);
    let mixing = Matrix::from_vec(
        true_rank,
        m,
        (0..true_rank * m).map(|_| rng.standard_normal()).collect(),
    )?;
    let label_map = Matrix::from_vec(
        m,
        classes,
        (0..m * classes).map(|_| rng.standard_normal()).collect(),
    )?;
    let latents = Matrix::from_vec(
        n,
        true_rank,
        (0..n * true_rank).map(|_| rng.standard_normal()).collect(),
    )?;
    let clean = crate::matrix::gemm(&latents, &mixing, false, false)?;
    let scores = crate::matrix::gemm(&clean, &label_map, false, false)?;
    let mut x = clean;
    if noise > 0.0 {
        for v in x.data_mut() {
            *v += noise * rng.standard_normal();
        }
    }
    let mut y = Matrix::zeros(n, classes);
    for r in 0..n {
        let label = scores
            .row(r)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        y.set(r, label, 1.0);
    }
    let ds = Dataset {
        features: Features::Dense(x),
        labels: y,
        name: "synth_lowrank".into(),
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

const LOWRANK_STREAM: u64 = 0x5f37_59df;

/// Synthetic sequence classification: each class is a sinusoid frequency
/// signature; samples carry random phases and mild additive noise.
pub fn synth_sequences(
    n: usize,
    t: usize,
    m: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if t < 2 {
        return Err(Error::Config("sequence length must be >= 2".into()));
    }
    if classes < 2 || m == 0 || n == 0 {
        return Err(Error::Config("need n >= 1, m >= 1, classes >= 2".into()));
    }
    let mut rng = Rng::derive(seed, SEQ_STREAM);
    let noise = 0.1;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut phases = Matrix::zeros(n, m);
    for v in phases.data_mut() {
        *v = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    }
    let mut xs: Vec<Matrix> = (0..t).map(|_| Matrix::zeros(n, m)).collect();
    for (step, x) in xs.iter_mut().enumerate() {
        for r in 0..n {
            // Frequencies spread over (0, pi): class c completes c+1 half
            // cycles over the window.
            let freq = (labels[r] + 1) as f64 * std::f64::consts::PI / t as f64;
            for d in 0..m {
                let v = (freq * step as f64 + phases.get(r, d)).sin()
                    + noise * rng.standard_normal();
                x.set(r, d, v);
            }
        }
    }
    let mut y = Matrix::zeros(n, classes);
    for (r, &l) in labels.iter().enumerate() {
        y.set(r, l, 1.0);
    }
    let ds =
        Dataset { features: Features::Seq(xs), labels: y, name: "synth_seq".into(), classes };
    ds.validate()?;
    Ok(ds)
}

const SEQ_STREAM: u64 = 0x0d1e_55eb;

/// Per-sample fold assignment for k-fold cross-validation.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignments[i]` is sample `i`'s fold.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Splits a dataset into `(train, test)` where `fold` is held out.
    pub fn split(&self, dataset: &Dataset, fold: usize) -> Result<(Dataset, Dataset)> {
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range for k={}", self.k)));
        }
        if self.assignments.len() != dataset.len() {
            return Err(Error::Config("fold plan does not match dataset size".into()));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &f) in self.assignments.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((dataset.subset(&train), dataset.subset(&test)))
    }
}

/// Deterministic k-fold plan: a seeded shuffle followed by round-robin fold
/// assignment, so fold sizes differ by at most one.
pub fn kfold(n_total: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > n_total {
        return Err(Error::Config(format!("k={k} invalid for {n_total} samples")));
    }
    let mut order: Vec<usize> = (0..n_total).collect();
    let mut rng = Rng::derive(seed, 0xf01d);
    rng.shuffle(&mut order);
    let mut assignments = vec![0usize; n_total];
    for (pos, &sample) in order.iter().enumerate() {
        assignments[sample] = pos % k;
    }
    Ok(FoldPlan { k, assignments })
}

/// Splits a dataset into `sites` equal contiguous shards after one seeded
/// global shuffle; remainder samples are dropped.
pub fn shard(dataset: &Dataset, sites: usize, seed: u64) -> Result<Vec<Dataset>> {
    if sites == 0 || sites > dataset.len() {
        return Err(Error::Config(format!(
            "cannot shard {} samples across {sites} sites",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = Rng::derive(seed, 0x51a4d);
    rng.shuffle(&mut order);
    let per_site = dataset.len() / sites;
    Ok((0..sites)
        .map(|s| dataset.subset(&order[s * per_site..(s + 1) * per_site]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx_pair(labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let n = labels.len() as u32;
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for i in 0..labels.len() * 4 {
            img.push((i % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    fn with_idx_files<R>(
        img: &[u8],
        lab: &[u8],
        f: impl FnOnce(&std::path::Path, &std::path::Path) -> R,
    ) -> R {
        let dir = std::env::temp_dir().join(format!(
            "dadsim-idx-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("images-idx3-ubyte");
        let lp = dir.join("labels-idx1-ubyte");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        let out = f(&ip, &lp);
        let _ = std::fs::remove_dir_all(&dir);
        out
    }

    #[test]
    fn idx_label_seven_becomes_one_hot_seven() {
        let (img, lab) = tiny_idx_pair(&[7, 0]);
        let ds = with_idx_files(&img, &lab, |ip, lp| load_mnist_idx(ip, lp)).unwrap();
        assert_eq!(ds.labels.get(0, 7), 1.0);
        assert_eq!(ds.labels.row(0).iter().sum::<f64>(), 1.0);
        assert_eq!(ds.feature_dim(), 4);
    }

    #[test]
    fn idx_zero_image_gives_zero_features() {
        let n = 1u32;
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 0, 0, 0]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.push(3);
        let ds = with_idx_files(&img, &lab, |ip, lp| load_mnist_idx(ip, lp)).unwrap();
        match &ds.features {
            Features::Dense(x) => assert!(x.data().iter().all(|&v| v == 0.0)),
            _ => panic!("dense expected"),
        }
    }

    #[test]
    fn idx_rejects_bad_magic_and_length_mismatch() {
        let (mut img, lab) = tiny_idx_pair(&[1]);
        img[3] = 0x99;
        with_idx_files(&img, &lab, |ip, lp| {
            assert!(matches!(load_mnist_idx(ip, lp), Err(Error::Format(_))));
        });
        let (img, lab) = tiny_idx_pair(&[1]);
        let truncated = &img[..img.len() - 1];
        with_idx_files(truncated, &lab, |ip, lp| {
            assert!(matches!(load_mnist_idx(ip, lp), Err(Error::Format(_))));
        });
        // Count mismatch between the two files.
        let (img, _) = tiny_idx_pair(&[1, 2]);
        let (_, lab) = tiny_idx_pair(&[1]);
        with_idx_files(&img, &lab, |ip, lp| {
            assert!(matches!(load_mnist_idx(ip, lp), Err(Error::Format(_))));
        });
    }

    #[test]
    fn synth_lowrank_is_deterministic() {
        let a = synth_lowrank(64, 12, 3, 4, 0.05, 9).unwrap();
        let b = synth_lowrank(64, 12, 3, 4, 0.05, 9).unwrap();
        match (&a.features, &b.features) {
            (Features::Dense(x), Features::Dense(y)) => assert_eq!(x, y),
            _ => panic!(),
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synth_sequences_distinct_class_signatures() {
        let ds = synth_sequences(2, 16, 1, 2, 4).unwrap();
        // Same phase draw differs, but the frequency content must differ:
        // compare sign-change counts of the two samples.
        let count_flips = |r: usize| {
            let series: Vec<f64> = match &ds.features {
                Features::Seq(xs) => xs.iter().map(|m| m.get(r, 0)).collect(),
                _ => panic!(),
            };
            series.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count()
        };
        assert_ne!(ds.label_indices()[0], ds.label_indices()[1]);
        assert_ne!(count_flips(0), count_flips(1));
    }

    #[test]
    fn synth_sequences_reproducible() {
        let a = synth_sequences(8, 12, 3, 4, 77).unwrap();
        let b = synth_sequences(8, 12, 3, 4, 77).unwrap();
        match (&a.features, &b.features) {
            (Features::Seq(xa), Features::Seq(xb)) => assert_eq!(xa, xb),
            _ => panic!(),
        }
    }

    #[test]
    fn kfold_partitions_evenly() {
        let plan = kfold(10, 5, 3).unwrap();
        let mut counts = vec![0usize; 5];
        for &f in &plan.assignments {
            counts[f] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
    }

    #[test]
    fn kfold_split_covers_all_samples_once() {
        let ds = synth_lowrank(23, 6, 2, 3, 0.0, 1).unwrap();
        let plan = kfold(ds.len(), 5, 2).unwrap();
        let mut seen = vec![0usize; ds.len()];
        for fold in 0..5 {
            let (train, test) = plan.split(&ds, fold).unwrap();
            assert_eq!(train.len() + test.len(), ds.len());
            for (i, &f) in plan.assignments.iter().enumerate() {
                if f == fold {
                    seen[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn shard_drops_remainder_evenly() {
        let ds = synth_lowrank(10, 4, 2, 2, 0.0, 5).unwrap();
        let shards = shard(&ds, 3, 11).unwrap();
        assert_eq!(shards.len(), 3);
        assert!(shards.iter().all(|s| s.len() == 3));
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let ds = synth_lowrank(4, 3, 2, 2, 0.0, 8).unwrap();
        let mut buf = Vec::new();
        ds.export_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "f_0,f_1,f_2,label");
    }
}
