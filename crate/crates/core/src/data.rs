//! Datasets, IDX ingestion, synthetic data and client partitioning.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Upper bound on Dirichlet redraws before giving up on a partition.
pub const LDA_MAX_RETRIES: usize = 100;

/// Index lists into a dataset's samples. `train` excludes `public`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub public: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub sample_shape: Vec<usize>,
    images: Vec<f64>,
    labels: Vec<usize>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        classes: usize,
        sample_shape: Vec<usize>,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} image values do not match {} labels of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} exceeds class count {classes}"
            )));
        }
        let all: Vec<usize> = (0..labels.len()).collect();
        Ok(Dataset {
            name: name.into(),
            classes,
            sample_shape,
            images,
            labels,
            splits: Splits {
                train: all,
                ..Splits::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the given samples into a `[B, ...sample_shape]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Shuffles all samples with `seed`, holds out `test_fraction` for
    /// testing and then `public_fraction` of the remaining train portion as
    /// the public pre-training split.
    pub fn with_splits(
        mut self,
        test_fraction: f64,
        public_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&public_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let test = order[..n_test].to_vec();
        let rest = &order[n_test..];
        let n_public = (rest.len() as f64 * public_fraction).round() as usize;
        let public = rest[..n_public].to_vec();
        let train = rest[n_public..].to_vec();
        if train.is_empty() {
            return Err(Error::Data(format!(
                "dataset {} has an empty train split",
                self.name
            )));
        }
        self.splits = Splits {
            train,
            test,
            public,
        };
        Ok(self)
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// Raw contents of one IDX file with unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes =
        fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let mut cur = Cursor::new(bytes);
    let truncated = |cur: &Cursor<&[u8]>, what: &str| Error::Format {
        offset: cur.position(),
        message: format!("truncated {what}"),
    };
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(&cur, "magic"))?;
    let ndims = (magic & 0xff) as usize;
    if magic >> 8 != 0x08 || ndims == 0 {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad IDX magic {magic:#010x}"),
        });
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let at = cur.position();
        let d = cur
            .read_u32::<BigEndian>()
            .map_err(|_| truncated(&cur, "dimension table"))?;
        if d == 0 {
            return Err(Error::Format {
                offset: at,
                message: "IDX file declares an empty dimension".into(),
            });
        }
        dims.push(d as usize);
    }
    let len: usize = dims.iter().product();
    let start = cur.position();
    let mut data = vec![0u8; len];
    if cur.read_exact(&mut data).is_err() {
        return Err(Error::Format {
            offset: start + (bytes.len() as u64).saturating_sub(start).min(len as u64),
            message: format!(
                "payload holds {} of {len} bytes",
                bytes.len() as u64 - start
            ),
        });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::Format {
            offset: cur.position(),
            message: "trailing bytes after IDX payload".into(),
        });
    }
    Ok(IdxArray { dims, data })
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.write_u32::<BigEndian>(0x0800 | array.dims.len() as u32)
        .unwrap();
    for &d in &array.dims {
        out.write_u32::<BigEndian>(d as u32).unwrap();
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(array))?;
    Ok(())
}

/// Loads an MNIST-style image/label file pair. Pixels are scaled to [0, 1].
pub fn load_idx(name: &str, images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = read_idx(images)?;
    let labs = read_idx(labels)?;
    if imgs.dims.len() != 3 {
        return Err(Error::Format {
            offset: 3,
            message: format!(
                "image file must have 3 dimensions, found {}",
                imgs.dims.len()
            ),
        });
    }
    if labs.dims.len() != 1 {
        return Err(Error::Format {
            offset: 3,
            message: format!(
                "label file must have 1 dimension, found {}",
                labs.dims.len()
            ),
        });
    }
    if imgs.dims[0] != labs.dims[0] {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            imgs.dims[0], labs.dims[0]
        )));
    }
    let classes = labs.data.iter().copied().max().unwrap_or(0) as usize + 1;
    let images = imgs.data.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labs.data.iter().map(|&b| b as usize).collect();
    Dataset::new(
        name,
        classes.max(2),
        vec![1, imgs.dims[1], imgs.dims[2]],
        images,
        labels,
    )
}

/// Per-pair decision margin, in noise standard deviations, separating the
/// closest two class centroids of a synthetic dataset.
pub const DEFAULT_SYNTH_MARGIN: f64 = 4.0;

/// Class-conditional Gaussian-blob images. Each class centroid is a sum of
/// three Gaussian bumps; samples add isotropic pixel noise whose scale is
/// chosen so the closest centroid pair sits `margin` noise deviations from
/// the midpoint between them.
pub fn synth_dataset(
    name: &str,
    classes: usize,
    per_class: usize,
    shape: &[usize],
    seed: u64,
) -> Result<Dataset> {
    synth_dataset_with_margin(name, classes, per_class, shape, seed, DEFAULT_SYNTH_MARGIN)
}

pub fn synth_dataset_with_margin(
    name: &str,
    classes: usize,
    per_class: usize,
    shape: &[usize],
    seed: u64,
    margin: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(
            "synthetic datasets need at least 2 classes".into(),
        ));
    }
    let [c, h, w] = match shape {
        &[c, h, w] => [c, h, w],
        _ => {
            return Err(Error::Config(format!(
                "synthetic shape must be [C, H, W], got {shape:?}"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = c * h * w;
    let centroids: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut img = vec![0.0; len];
            for _ in 0..3 {
                let ch = rng.random_range(0..c);
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let amp = rng.random_range(0.5..1.0);
                let width = rng.random_range(1.0..2.5) * (h.max(w) as f64 / 12.0);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            img
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d: f64 = centroids[a]
                .iter()
                .zip(&centroids[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if min_dist.is_nan() || min_dist <= 0.0 {
        return Err(Error::Data(
            "synthetic centroids collided; pick another seed".into(),
        ));
    }
    let sigma = min_dist / (2.0 * margin);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut images = Vec::with_capacity(classes * per_class * len);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (class, centroid) in centroids.iter().enumerate() {
            images.extend(centroid.iter().map(|&v| v + noise.sample(&mut rng)));
            labels.push(class);
        }
    }
    Dataset::new(name, classes, shape.to_vec(), images, labels)
}

/// Per-client sample-index lists for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
    /// `None` for IID plans.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Equal split of `indices` after a seeded shuffle; sizes differ by at most
/// one, with the first shards taking the remainder.
pub fn partition_iid(indices: &[usize], clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / clients;
    let extra = order.len() % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut at = 0;
    for c in 0..clients {
        let n = base + usize::from(c < extra);
        shards.push(order[at..at + n].to_vec());
        at += n;
    }
    Ok(PartitionPlan {
        shards,
        alpha: None,
        seed,
    })
}

/// Class-wise Dirichlet split: for each class, proportions over clients are
/// drawn from Dirichlet(alpha) and the class's samples are dealt out with
/// largest-remainder rounding. The whole draw is repeated until every client
/// holds at least one sample.
pub fn partition_lda(
    dataset: &Dataset,
    indices: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Config(format!(
            "concentration must be positive, got {alpha}"
        )));
    }
    if indices.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {clients} clients; use a larger dataset",
            indices.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for &i in indices {
        by_class[dataset.label(i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..LDA_MAX_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(&gamma, clients, &mut rng);
            let counts = largest_remainder(&props, members.len());
            let mut at = 0;
            for (shard, n) in shards.iter_mut().zip(counts) {
                shard.extend_from_slice(&members[at..at + n]);
                at += n;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(PartitionPlan {
                shards,
                alpha: Some(alpha),
                seed,
            });
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet draw gave every client a sample after {LDA_MAX_RETRIES} attempts; \
         use a larger dataset or a larger alpha"
    )))
}

fn dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Integer counts summing to `total` that follow `props`; leftover units go
/// to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Nearest-centroid classifier fitted on `train`, scored on `test`.
pub fn centroid_accuracy(dataset: &Dataset, train: &[usize], test: &[usize]) -> f64 {
    let n = dataset.sample_len();
    let mut sums = vec![vec![0.0; n]; dataset.classes];
    let mut counts = vec![0usize; dataset.classes];
    for &i in train {
        let l = dataset.label(i);
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(dataset.image(i)) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let x = dataset.image(i);
            let best = (0..dataset.classes)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = sums[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = sums[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == dataset.label(i)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iid_equal_and_remainder_split() {
        let idx: Vec<usize> = (0..100).collect();
        let plan = partition_iid(&idx, 10, 4).unwrap();
        assert!(plan.sizes().iter().all(|&s| s == 10));

        let idx: Vec<usize> = (0..101).collect();
        let mut sizes = partition_iid(&idx, 10, 4).unwrap().sizes();
        sizes.sort_unstable();
        assert_eq!(sizes.iter().filter(|&&s| s == 11).count(), 1);
        assert_eq!(sizes.iter().filter(|&&s| s == 10).count(), 9);
    }

    #[test]
    fn largest_remainder_conserves_total() {
        let c = largest_remainder(&[0.5, 0.25, 0.25], 3);
        assert_eq!(c.iter().sum::<usize>(), 3);
        assert_eq!(c, vec![1, 1, 1]);
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let a = synth_dataset("a", 2, 50, &[1, 8, 8], 9).unwrap();
        let b = synth_dataset("a", 2, 50, &[1, 8, 8], 9).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_histogram(&a.splits.train), vec![50, 50]);
        assert_eq!(a, b);
        assert!(synth_dataset("x", 1, 5, &[1, 4, 4], 0).is_err());
    }

    #[test]
    fn empty_idx_payload_rejected() {
        let bytes = encode_idx(&IdxArray {
            dims: vec![4],
            data: vec![1, 2, 3, 4],
        });
        assert!(parse_idx(&bytes[..8]).is_err());
        let mut zero = Vec::new();
        zero.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        zero.write_u32::<BigEndian>(0).unwrap();
        assert!(matches!(parse_idx(&zero), Err(Error::Format { .. })));
        assert!(matches!(
            parse_idx(&[0, 0, 9, 1, 0, 0, 0, 1, 5]),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn splits_are_disjoint() {
        let d = synth_dataset("s", 4, 25, &[1, 6, 6], 2)
            .unwrap()
            .with_splits(0.2, 0.1, 7)
            .unwrap();
        let mut all: Vec<usize> = d
            .splits
            .train
            .iter()
            .chain(&d.splits.test)
            .chain(&d.splits.public)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(d.splits.test.len(), 20);
        assert_eq!(d.splits.public.len(), 8);
    }
}
