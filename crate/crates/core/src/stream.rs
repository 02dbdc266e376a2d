//! Task streams: split label groups, pixel permutations and synthetic blobs.

use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idx::load_idx_dataset;
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Disjoint contiguous label groups, one per task.
    SplitLabels,
    /// All labels every task; task `t > 0` sees a fixed random pixel permutation.
    PermutedPixels,
    /// Fresh Gaussian clusters per task sharing the label set.
    SyntheticBlobs,
}

/// Isotropic Gaussian clusters around random centers. Centers are redrawn until
/// every pair is at least `separation * noise` apart; in low dimensions the
/// clusters of different tasks crowd each other, which is what makes
/// forgetting show up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    /// Minimum center distance in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    /// Typical center norm in units of `noise`.
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            dim: 8,
            classes: 10,
            separation: 5.0,
            noise: 1.0,
            spread: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(BlobSpec),
    Idx(IdxPaths),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(BlobSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub tasks: usize,
    /// Training samples per task; `None` keeps every available sample (IDX only).
    pub train_per_task: Option<usize>,
    pub test_per_task: Option<usize>,
    pub source: DataSource,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            kind: StreamKind::SplitLabels,
            tasks: 5,
            train_per_task: Some(2000),
            test_per_task: Some(500),
            source: DataSource::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Classes the task trains on.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<Task>,
    /// Width of the shared output head.
    pub num_classes: usize,
    pub in_dim: usize,
    pub seed: u64,
    /// Pixel permutation per task (`PermutedPixels` only).
    pub permutations: Vec<Vec<usize>>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

const MAX_CENTER_DRAWS: usize = 10_000;

impl StreamConfig {
    /// Checks everything that can be checked without reading data files.
    pub fn validate(&self) -> Result<()> {
        let t = self.tasks;
        if t < 2 {
            return Err(Error::BadConfig(format!(
                "a stream needs at least 2 tasks, got {t}"
            )));
        }
        if self.train_per_task == Some(0) || self.test_per_task == Some(0) {
            return Err(Error::BadConfig(
                "per-task sample counts must be positive".into(),
            ));
        }
        match (&self.source, self.kind) {
            (DataSource::Synthetic(spec), kind) => {
                validate_blobs(spec)?;
                if kind == StreamKind::SplitLabels {
                    label_groups(spec.classes, t)?;
                }
            }
            (DataSource::Idx(_), StreamKind::SyntheticBlobs) => {
                return Err(Error::BadConfig(
                    "synthetic_blobs streams need a synthetic source".into(),
                ));
            }
            (DataSource::Idx(_), _) => {}
        }
        Ok(())
    }
}

pub fn make_stream(config: &StreamConfig, seed: u64) -> Result<TaskStream> {
    config.validate()?;
    let t = config.tasks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match (&config.source, config.kind) {
        (DataSource::Synthetic(spec), kind) => {
            validate_blobs(spec)?;
            let n_train = config.train_per_task.unwrap_or(2000);
            let n_test = config.test_per_task.unwrap_or(500);
            match kind {
                StreamKind::SplitLabels => {
                    let groups = label_groups(spec.classes, t)?;
                    let centers = blob_centers(spec, &mut rng)?;
                    let tasks = groups
                        .into_iter()
                        .map(|classes| {
                            let train = sample_blobs(spec, &centers, &classes, n_train, &mut rng);
                            let test = sample_blobs(spec, &centers, &classes, n_test, &mut rng);
                            Task {
                                train,
                                test,
                                classes,
                            }
                        })
                        .collect();
                    Ok(TaskStream {
                        kind,
                        tasks,
                        num_classes: spec.classes,
                        in_dim: spec.dim,
                        seed,
                        permutations: Vec::new(),
                    })
                }
                StreamKind::PermutedPixels => {
                    let centers = blob_centers(spec, &mut rng)?;
                    let all: Vec<usize> = (0..spec.classes).collect();
                    let train = sample_blobs(spec, &centers, &all, n_train * t, &mut rng);
                    let test = sample_blobs(spec, &centers, &all, n_test * t, &mut rng);
                    permuted(
                        train,
                        test,
                        t,
                        Some(n_train),
                        Some(n_test),
                        spec.classes,
                        seed,
                        &mut rng,
                    )
                }
                StreamKind::SyntheticBlobs => {
                    let all: Vec<usize> = (0..spec.classes).collect();
                    let tasks = (0..t)
                        .map(|_| {
                            let centers = blob_centers(spec, &mut rng)?;
                            Ok(Task {
                                train: sample_blobs(spec, &centers, &all, n_train, &mut rng),
                                test: sample_blobs(spec, &centers, &all, n_test, &mut rng),
                                classes: all.clone(),
                            })
                        })
                        .collect::<Result<_>>()?;
                    Ok(TaskStream {
                        kind,
                        tasks,
                        num_classes: spec.classes,
                        in_dim: spec.dim,
                        seed,
                        permutations: Vec::new(),
                    })
                }
            }
        }
        (DataSource::Idx(paths), kind) => {
            let train = load_idx_dataset(&paths.train_images, &paths.train_labels)?;
            let test = load_idx_dataset(&paths.test_images, &paths.test_labels)?;
            if train.in_dim() != test.in_dim() {
                return Err(Error::BadConfig(
                    "train and test images differ in size".into(),
                ));
            }
            let classes = train
                .labels
                .iter()
                .chain(&test.labels)
                .max()
                .map_or(0, |&m| m + 1);
            match kind {
                StreamKind::SplitLabels => {
                    let groups = label_groups(classes, t)?;
                    let tasks = groups
                        .into_iter()
                        .map(|group| {
                            let tr = subsample(
                                &filter_labels(&train, &group),
                                config.train_per_task,
                                &mut rng,
                            )?;
                            let te = subsample(
                                &filter_labels(&test, &group),
                                config.test_per_task,
                                &mut rng,
                            )?;
                            Ok(Task {
                                train: tr,
                                test: te,
                                classes: group,
                            })
                        })
                        .collect::<Result<_>>()?;
                    Ok(TaskStream {
                        kind,
                        tasks,
                        num_classes: classes,
                        in_dim: train.in_dim(),
                        seed,
                        permutations: Vec::new(),
                    })
                }
                StreamKind::PermutedPixels => permuted(
                    train,
                    test,
                    t,
                    config.train_per_task,
                    config.test_per_task,
                    classes,
                    seed,
                    &mut rng,
                ),
                StreamKind::SyntheticBlobs => Err(Error::BadConfig(
                    "synthetic_blobs streams need a synthetic source".into(),
                )),
            }
        }
    }
}

fn validate_blobs(spec: &BlobSpec) -> Result<()> {
    if spec.classes < 2 || spec.dim == 0 {
        return Err(Error::BadConfig(format!(
            "blobs need at least 2 classes and 1 dimension, got {} and {}",
            spec.classes, spec.dim
        )));
    }
    let finite = [spec.noise, spec.separation, spec.spread]
        .iter()
        .all(|x| x.is_finite());
    if !(finite && spec.noise > 0.0 && spec.separation >= 0.0 && spec.spread > 0.0) {
        return Err(Error::BadConfig(
            "blob noise and spread must be positive and separation non-negative".into(),
        ));
    }
    Ok(())
}

/// Splits `0..classes` into `tasks` contiguous groups of equal size.
pub fn label_groups(classes: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || !classes.is_multiple_of(tasks) || classes < tasks {
        return Err(Error::BadConfig(format!(
            "{classes} classes cannot be split evenly into {tasks} tasks"
        )));
    }
    let per = classes / tasks;
    Ok((0..tasks)
        .map(|t| (t * per..(t + 1) * per).collect())
        .collect())
}

fn blob_centers<R: Rng>(spec: &BlobSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let scale = spec.spread * spec.noise / (spec.dim as f64).sqrt();
    let min_dist = spec.separation * spec.noise;
    for _ in 0..MAX_CENTER_DRAWS {
        let centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let separated = (0..spec.classes)
            .all(|i| (0..i).all(|j| distance(&centers[i], &centers[j]) >= min_dist));
        if separated {
            return Ok(centers);
        }
    }
    Err(Error::BadConfig(format!(
        "could not place {} centers {} apart with spread {}",
        spec.classes, spec.separation, spec.spread
    )))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn sample_blobs<R: Rng>(
    spec: &BlobSpec,
    centers: &[Vec<f64>],
    classes: &[usize],
    n: usize,
    rng: &mut R,
) -> Dataset {
    let mut inputs = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in inputs.outer_iter_mut().enumerate() {
        let label = classes[i % classes.len()];
        for (x, c) in row.iter_mut().zip(&centers[label]) {
            let z: f64 = rng.sample(StandardNormal);
            *x = c + spec.noise * z;
        }
        labels.push(label);
    }
    Dataset { inputs, labels }
}

fn filter_labels(data: &Dataset, keep: &[usize]) -> Dataset {
    let rows: Vec<usize> = (0..data.len())
        .filter(|&i| keep.contains(&data.labels[i]))
        .collect();
    data.select(&rows)
}

fn subsample<R: Rng>(data: &Dataset, n: Option<usize>, rng: &mut R) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match n {
        Some(n) if n < data.len() => {
            let mut rows = index::sample(rng, data.len(), n).into_vec();
            rows.sort_unstable();
            Ok(data.select(&rows))
        }
        _ => Ok(data.clone()),
    }
}

/// Seeded permutation of `0..len`; `identity` for the first task.
pub fn pixel_permutation(len: usize, seed: u64, task: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    if task > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(task as u64);
        p.shuffle(&mut rng);
    }
    p
}

fn permute_columns(data: &Dataset, perm: &[usize]) -> Dataset {
    Dataset {
        inputs: data.inputs.select(Axis(1), perm),
        labels: data.labels.clone(),
    }
}

#[allow(clippy::too_many_arguments)]
fn permuted<R: Rng>(
    train: Dataset,
    test: Dataset,
    tasks: usize,
    n_train: Option<usize>,
    n_test: Option<usize>,
    classes: usize,
    seed: u64,
    rng: &mut R,
) -> Result<TaskStream> {
    let in_dim = train.in_dim();
    let all: Vec<usize> = (0..classes).collect();
    let mut permutations = Vec::with_capacity(tasks);
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let perm = pixel_permutation(in_dim, seed, t);
        let tr = permute_columns(&subsample(&train, n_train, rng)?, &perm);
        let te = permute_columns(&subsample(&test, n_test, rng)?, &perm);
        out.push(Task {
            train: tr,
            test: te,
            classes: all.clone(),
        });
        permutations.push(perm);
    }
    Ok(TaskStream {
        kind: StreamKind::PermutedPixels,
        tasks: out,
        num_classes: classes,
        in_dim,
        seed,
        permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(kind: StreamKind, tasks: usize, classes: usize) -> StreamConfig {
        StreamConfig {
            kind,
            tasks,
            train_per_task: Some(100),
            test_per_task: Some(40),
            source: DataSource::Synthetic(BlobSpec {
                classes,
                ..BlobSpec::default()
            }),
        }
    }

    #[test]
    fn split_groups_are_contiguous_pairs() {
        let g = label_groups(10, 5).unwrap();
        assert_eq!(
            g,
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
        assert!(label_groups(10, 3).is_err());
    }

    #[test]
    fn split_stream_has_disjoint_labels() {
        let s = make_stream(&synthetic(StreamKind::SplitLabels, 5, 10), 1).unwrap();
        assert_eq!(s.len(), 5);
        for (t, task) in s.tasks.iter().enumerate() {
            assert_eq!(task.classes, vec![2 * t, 2 * t + 1]);
            assert!(task.train.labels.iter().all(|l| task.classes.contains(l)));
            assert!(task.test.labels.iter().all(|l| task.classes.contains(l)));
            assert_eq!(task.train.len(), 100);
            assert_eq!(task.test.len(), 40);
        }
    }

    #[test]
    fn permuted_first_task_is_identity() {
        let s = make_stream(&synthetic(StreamKind::PermutedPixels, 3, 10), 9).unwrap();
        assert_eq!(s.permutations.len(), 3);
        assert_eq!(s.permutations[0], (0..8).collect::<Vec<_>>());
        for p in &s.permutations {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        }
        assert_ne!(s.permutations[1], s.permutations[2]);
    }

    #[test]
    fn blob_centers_keep_their_distance() {
        let spec = BlobSpec {
            noise: 0.5,
            ..BlobSpec::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = blob_centers(&spec, &mut rng).unwrap();
            for i in 0..c.len() {
                for j in 0..i {
                    assert!(distance(&c[i], &c[j]) >= 2.5);
                }
            }
        }
        let crowded = BlobSpec {
            dim: 1,
            spread: 0.1,
            ..BlobSpec::default()
        };
        assert!(blob_centers(&crowded, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn stream_is_seed_deterministic() {
        let cfg = synthetic(StreamKind::SyntheticBlobs, 2, 2);
        let a = make_stream(&cfg, 4).unwrap();
        let b = make_stream(&cfg, 4).unwrap();
        let c = make_stream(&cfg, 5).unwrap();
        assert_eq!(a.tasks[1].train, b.tasks[1].train);
        assert_ne!(a.tasks[1].train, c.tasks[1].train);
    }

    #[test]
    fn bad_configs() {
        assert!(make_stream(&synthetic(StreamKind::SplitLabels, 1, 10), 0).is_err());
        assert!(make_stream(&synthetic(StreamKind::SplitLabels, 3, 10), 0).is_err());
        let mut cfg = synthetic(StreamKind::SplitLabels, 2, 1);
        assert!(make_stream(&cfg, 0).is_err());
        cfg.source = DataSource::Synthetic(BlobSpec {
            spread: 0.0,
            ..BlobSpec::default()
        });
        assert!(make_stream(&cfg, 0).is_err());
        cfg.source = DataSource::Synthetic(BlobSpec::default());
        cfg.train_per_task = Some(0);
        assert!(make_stream(&cfg, 0).is_err());
    }
}
