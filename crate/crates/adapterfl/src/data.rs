//! Datasets and client sharding.
//!
//! Loaders produce a [`DatasetSource`] with normalized float images.
//! Sharding splits the train split across simulated clients either IID or
//! with per-class Dirichlet proportions; shards are always pairwise
//! disjoint and cover the whole train split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar10,
    Cifar100,
    Synthetic,
}

/// An in-memory dataset: images as `[N, C, H, W]` f32, labels per sample.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a batch by sample indices.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let shape = self.images.shape();
        let sample = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(idx.len() * sample);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[idx.len(), shape[1], shape[2], shape[3]], data)
            .expect("gather shape");
        (t, labels)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSource {
    pub name: DatasetName,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub train: Split,
    pub test: Split,
    /// Per-channel normalization applied to the raw pixels, recorded for
    /// reproducibility.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

/// A client's slice of the train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DirichletConfig {
    pub beta: f64,
    pub num_clients: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------- CIFAR --

const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR100_MEAN: [f32; 3] = [0.5071, 0.4865, 0.4409];
const CIFAR100_STD: [f32; 3] = [0.2673, 0.2564, 0.2762];

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn decode_cifar_file(
    path: &Path,
    record_len: usize,
    label_offset: usize,
    images: &mut Vec<f32>,
    labels: &mut Vec<usize>,
    mean: &[f32; 3],
    std: &[f32; 3],
) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % record_len != 0 {
        return Err(Error::DataFormat {
            offset: (bytes.len() - bytes.len() % record_len) as u64,
            detail: format!(
                "{}: size {} is not a multiple of the {record_len}-byte record",
                path.display(),
                bytes.len()
            ),
        });
    }
    for rec in bytes.chunks(record_len) {
        labels.push(rec[label_offset] as usize);
        let pix = &rec[label_offset + 1..];
        for c in 0..3 {
            let (m, s) = (mean[c], std[c]);
            for p in &pix[c * 1024..(c + 1) * 1024] {
                images.push((*p as f32 / 255.0 - m) / s);
            }
        }
    }
    Ok(())
}

/// Load CIFAR-10 (`data_batch_*.bin` + `test_batch.bin`, 3073-byte records)
/// or CIFAR-100 (`train.bin` + `test.bin`, 3074-byte records with a coarse
/// label byte before the fine label) from `dir`. Pixels are scaled to
/// [0,1] then normalized per channel.
pub fn load_cifar(dir: &Path, which: DatasetName) -> Result<DatasetSource> {
    let (train_files, test_files, record_len, label_offset, classes, mean, std) = match which {
        DatasetName::Cifar10 => (
            vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            vec!["test_batch.bin"],
            CIFAR_PIXELS + 1,
            0,
            10,
            CIFAR10_MEAN,
            CIFAR10_STD,
        ),
        DatasetName::Cifar100 => (
            vec!["train.bin"],
            vec!["test.bin"],
            CIFAR_PIXELS + 2,
            1, // coarse label byte first, fine label second
            100,
            CIFAR100_MEAN,
            CIFAR100_STD,
        ),
        DatasetName::Synthetic => {
            return Err(Error::InvalidConfig("synthetic data has no files to load".into()))
        }
    };
    let load_split = |files: &[&str]| -> Result<Split> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            decode_cifar_file(&dir.join(f), record_len, label_offset, &mut images, &mut labels, &mean, &std)?;
        }
        let n = labels.len();
        Ok(Split { images: Tensor::from_vec(&[n, 3, 32, 32], images)?, labels })
    };
    let train = load_split(&train_files)?;
    let test = load_split(&test_files)?;
    for (split, tag) in [(&train, "train"), (&test, "test")] {
        if let Some(&bad) = split.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::DataFormat {
                offset: 0,
                detail: format!("{tag} label {bad} out of range for {classes} classes"),
            });
        }
    }
    Ok(DatasetSource {
        name: which,
        num_classes: classes,
        input_shape: (3, 32, 32),
        train,
        test,
        norm_mean: mean.to_vec(),
        norm_std: std.to_vec(),
    })
}

// ------------------------------------------------------------ synthetic --

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub shape: (usize, usize, usize),
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Per-pixel standard deviation of the class-mean images; samples add
    /// unit-variance*0.5 noise on top.
    pub separability: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            shape: (3, 8, 8),
            n_train: 2000,
            n_test: 400,
            seed: 0,
            separability: 0.3,
        }
    }
}

/// Gaussian class-cluster images: class c has a fixed mean image drawn from
/// N(0, separability^2) per pixel; each sample adds N(0, 0.5^2) noise.
/// Labels are balanced within +-1 per class in both splits.
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<DatasetSource> {
    if cfg.separability <= 0.0 {
        return Err(Error::InvalidConfig("separability must be positive".into()));
    }
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig("need >= 2 classes".into()));
    }
    let d = cfg.shape.0 * cfg.shape.1 * cfg.shape.2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f32>> = (0..cfg.num_classes)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    (v * cfg.separability) as f32
                })
                .collect()
        })
        .collect();
    let gen_split = |n: usize, rng: &mut ChaCha8Rng| -> Split {
        // balanced labels, then shuffled
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
        labels.shuffle(rng);
        let mut images = Vec::with_capacity(n * d);
        for &l in &labels {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(rng);
                images.push(means[l][j] + 0.5 * noise as f32);
            }
        }
        Split {
            images: Tensor::from_vec(&[n, cfg.shape.0, cfg.shape.1, cfg.shape.2], images).unwrap(),
            labels,
        }
    };
    let train = gen_split(cfg.n_train, &mut rng);
    let test = gen_split(cfg.n_test, &mut rng);
    Ok(DatasetSource {
        name: DatasetName::Synthetic,
        num_classes: cfg.num_classes,
        input_shape: cfg.shape,
        train,
        test,
        norm_mean: vec![0.0; cfg.shape.0],
        norm_std: vec![1.0; cfg.shape.0],
    })
}

// --------------------------------------------------------------- splits --

fn check_cover(shards: &[ClientShard], total: usize) -> bool {
    let mut seen = vec![false; total];
    for s in shards {
        for &i in &s.indices {
            if i >= total || seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.into_iter().all(|b| b)
}

/// IID split: a seeded permutation chunked near-equally (sizes differ by at
/// most one).
pub fn iid_split(source: &DatasetSource, num_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let n = source.train.len();
    if num_clients == 0 || num_clients > n {
        return Err(Error::InvalidConfig(format!(
            "num_clients {num_clients} out of range for {n} samples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let base = n / num_clients;
    let extra = n % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut pos = 0;
    for client_id in 0..num_clients {
        let take = base + usize::from(client_id < extra);
        let mut indices: Vec<usize> = perm[pos..pos + take].to_vec();
        indices.sort_unstable();
        shards.push(ClientShard { client_id, indices });
        pos += take;
    }
    debug_assert!(check_cover(&shards, n));
    Ok(shards)
}

/// Dirichlet split: for each class, client proportions are drawn from
/// Dir(beta) and the class's samples are dealt out accordingly; leftover
/// samples after flooring go one by one to the currently smallest shard.
pub fn dirichlet_split(source: &DatasetSource, cfg: &DirichletConfig) -> Result<Vec<ClientShard>> {
    if cfg.beta <= 0.0 {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {}", cfg.beta)));
    }
    if cfg.num_clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    let n = source.train.len();
    let k = cfg.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shards: Vec<ClientShard> =
        (0..k).map(|client_id| ClientShard { client_id, indices: Vec::new() }).collect();

    let gamma = Gamma::new(cfg.beta, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("gamma sampler: {e}")))?;
    for class in 0..source.num_classes {
        let mut class_idx: Vec<usize> =
            (0..n).filter(|&i| source.train.labels[i] == class).collect();
        if class_idx.is_empty() {
            continue;
        }
        class_idx.shuffle(&mut rng);
        // proportions ~ Dir(beta): normalized Gamma(beta, 1) draws
        let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = p.iter().sum();
        if sum <= 0.0 {
            // all draws underflowed (tiny beta); give the class to one client
            let lucky = rng.random_range(0..k);
            p = (0..k).map(|i| if i == lucky { 1.0 } else { 0.0 }).collect();
        } else {
            p.iter_mut().for_each(|v| *v /= sum);
        }
        let m = class_idx.len();
        let counts: Vec<usize> = p.iter().map(|v| (v * m as f64).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut pos = 0;
        for (client, &c) in counts.iter().enumerate() {
            shards[client].indices.extend_from_slice(&class_idx[pos..pos + c]);
            pos += c;
        }
        // leftovers: one each to the smallest current shard (ties: lowest id)
        for &idx in &class_idx[pos..] {
            let smallest = shards
                .iter()
                .enumerate()
                .min_by_key(|(id, s)| (s.indices.len(), *id))
                .map(|(id, _)| id)
                .unwrap();
            shards[smallest].indices.push(idx);
        }
        let _ = assigned;
    }
    for s in shards.iter_mut() {
        s.indices.sort_unstable();
    }
    debug_assert!(check_cover(&shards, n));
    Ok(shards)
}

/// Shard assignments as CSV rows: `client_id,sample_index`.
pub fn shards_to_csv(shards: &[ClientShard]) -> String {
    let mut out = String::from("client_id,sample_index\n");
    for s in shards {
        for &i in &s.indices {
            out.push_str(&format!("{},{}\n", s.client_id, i));
        }
    }
    out
}

/// Per-client class histogram (used by tests and reports).
pub fn shard_class_histogram(
    source: &DatasetSource,
    shard: &ClientShard,
) -> Vec<usize> {
    let mut h = vec![0usize; source.num_classes];
    for &i in &shard.indices {
        h[source.train.labels[i]] += 1;
    }
    h
}

/// Shannon entropy (nats) of a shard's class distribution.
pub fn histogram_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_source(n_train: usize, classes: usize) -> DatasetSource {
        synthetic_dataset(&SyntheticConfig {
            num_classes: classes,
            shape: (1, 2, 2),
            n_train,
            n_test: 8,
            seed: 7,
            separability: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn synthetic_deterministic_and_balanced() {
        let a = synthetic_dataset(&SyntheticConfig::default()).unwrap();
        let b = synthetic_dataset(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.train.images), bits(&b.train.images));
        // balance within +-1
        for split in [&a.train, &a.test] {
            let mut h = vec![0usize; a.num_classes];
            for &l in &split.labels {
                h[l] += 1;
            }
            let (mn, mx) = (h.iter().min().unwrap(), h.iter().max().unwrap());
            assert!(mx - mn <= 1, "{h:?}");
        }
    }

    #[test]
    fn linear_probe_oracle_exceeds_ninety_percent() {
        // nearest class-centroid classifier (the LDA rule for shared
        // isotropic covariance), centroids estimated on the train split
        let ds = synthetic_dataset(&SyntheticConfig::default()).unwrap();
        let d: usize = ds.input_shape.0 * ds.input_shape.1 * ds.input_shape.2;
        let mut centroids = vec![vec![0.0f64; d]; ds.num_classes];
        let mut counts = vec![0usize; ds.num_classes];
        for (i, &l) in ds.train.labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..d {
                centroids[l][j] += ds.train.images.data()[i * d + j] as f64;
            }
        }
        for (c, cnt) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *cnt as f64);
        }
        let mut correct = 0usize;
        for (i, &l) in ds.test.labels.iter().enumerate() {
            let x = &ds.test.images.data()[i * d..(i + 1) * d];
            let best = (0..ds.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 =
                        x.iter().zip(&centroids[a]).map(|(v, c)| (*v as f64 - c).powi(2)).sum();
                    let db: f64 =
                        x.iter().zip(&centroids[b]).map(|(v, c)| (*v as f64 - c).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(best == l);
        }
        let acc = correct as f64 / ds.test.len() as f64;
        assert!(acc > 0.9, "linear probe accuracy {acc}");
    }

    #[test]
    fn iid_split_sizes() {
        let src = tiny_source(100, 4);
        let shards = iid_split(&src, 10, 0).unwrap();
        assert!(shards.iter().all(|s| s.indices.len() == 10));

        let src2 = tiny_source(101, 4);
        let shards2 = iid_split(&src2, 10, 0).unwrap();
        let sizes: Vec<_> = shards2.iter().map(|s| s.indices.len()).collect();
        assert_eq!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap(), 1);
        assert!(check_cover(&shards2, 101));
    }

    #[test]
    fn single_client_gets_everything() {
        let src = tiny_source(64, 4);
        let shards = dirichlet_split(
            &src,
            &DirichletConfig { beta: 0.5, num_clients: 1, seed: 3 },
        )
        .unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_cover_and_determinism_seeds_0_to_9() {
        let src = tiny_source(500, 5);
        for seed in 0..10 {
            let cfg = DirichletConfig { beta: 0.3, num_clients: 13, seed };
            let a = dirichlet_split(&src, &cfg).unwrap();
            let b = dirichlet_split(&src, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(check_cover(&a, 500), "seed {seed}");
        }
        for seed in 0..10 {
            let a = iid_split(&src, 7, seed).unwrap();
            assert!(check_cover(&a, 500));
        }
    }

    #[test]
    fn beta_rejects_nonpositive() {
        let src = tiny_source(50, 2);
        assert!(dirichlet_split(&src, &DirichletConfig { beta: 0.0, num_clients: 4, seed: 0 })
            .is_err());
    }

    #[test]
    fn entropy_monotone_in_beta_monte_carlo() {
        // mean per-client class-distribution entropy rises with beta,
        // averaged over 20 seeds
        let src = tiny_source(1000, 10);
        let mean_entropy = |beta: f64| -> f64 {
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for seed in 0..20 {
                let shards = dirichlet_split(
                    &src,
                    &DirichletConfig { beta, num_clients: 20, seed },
                )
                .unwrap();
                for s in &shards {
                    if s.indices.is_empty() {
                        continue;
                    }
                    acc += histogram_entropy(&shard_class_histogram(&src, s));
                    cnt += 1;
                }
            }
            acc / cnt as f64
        };
        let e03 = mean_entropy(0.3);
        let e06 = mean_entropy(0.6);
        assert!(e06 > e03, "entropy at beta=0.6 ({e06}) should exceed beta=0.3 ({e03})");
    }

    #[test]
    fn cifar10_fixture_roundtrip() {
        // hand-crafted two-record file with planted label and pixel values
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; 2 * 3073];
        rec[0] = 7; // first record label
        rec[1] = 255; // first pixel of R plane
        rec[2] = 128;
        rec[3073] = 2; // second record label
        rec[3073 + 1 + 1024] = 64; // first pixel of G plane, record 2
        for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
            fs::write(dir.path().join(name), &rec).unwrap();
        }
        let ds = load_cifar(dir.path(), DatasetName::Cifar10).unwrap();
        assert_eq!(ds.train.len(), 10); // 5 files x 2 records
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.train.labels[0], 7);
        assert_eq!(ds.train.labels[1], 2);
        let px = ds.train.images.data()[0];
        assert!((px - (1.0 - CIFAR10_MEAN[0]) / CIFAR10_STD[0]).abs() < 1e-6);
        let g2 = ds.train.images.data()[CIFAR_PIXELS + 1024];
        assert!((g2 - (64.0 / 255.0 - CIFAR10_MEAN[1]) / CIFAR10_STD[1]).abs() < 1e-6);
    }

    #[test]
    fn cifar_truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 3073 * 2 - 100]).unwrap();
        let err = load_cifar(dir.path(), DatasetName::Cifar10);
        match err {
            Err(Error::DataFormat { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected DataFormat error, got {other:?}"),
        }
    }

    #[test]
    fn real_cifar10_if_present() {
        // full-dataset checks run only when the canonical binaries exist
        let dir = Path::new("data/cifar-10-batches-bin");
        if !dir.join("data_batch_1.bin").exists() {
            return;
        }
        let ds = load_cifar(dir, DatasetName::Cifar10).unwrap();
        assert_eq!(ds.train.len(), 50_000);
        assert_eq!(ds.num_classes, 10);
    }
}
