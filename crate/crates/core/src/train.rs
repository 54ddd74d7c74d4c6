//! Constant-step gradient descent and SGD with iteration-based logging.
//!
//! The minibatch drawn at global iteration `t` depends only on the seed and
//! `t`, so a run split into consecutive segments visits the same batches as
//! an unbroken run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autodiff;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, NetworkSpec, ParamVector};

/// Weights drawn from `Uniform(-1/√fan_in, 1/√fan_in)`, biases zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.count_params()];
    for slot in spec.layout() {
        let bound = 1.0 / (slot.fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        for v in &mut values[slot.weight..slot.weight + slot.weight_len()] {
            *v = rng.sample(dist);
        }
    }
    ParamVector::new(spec, values).unwrap()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shuffle {
    /// A fresh permutation per epoch; the incomplete tail batch is dropped.
    #[default]
    ReshuffleEachEpoch,
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub checkpoint_stride: usize,
    pub seed: u64,
    #[serde(default)]
    pub shuffle: Shuffle,
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        self.validate_segment(n)?;
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be at least 1".into()));
        }
        Ok(())
    }

    fn validate_segment(&self, n: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::InvalidSpec(format!(
                "batch size {} must lie in 1..={n}",
                self.batch_size
            )));
        }
        if self.checkpoint_stride == 0 {
            return Err(Error::InvalidSpec("checkpoint stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Norm of the full training-set gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRecord>,
}

impl Trajectory {
    pub fn first(&self) -> &Checkpoint {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().unwrap()
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        write_log_csv(&self.log, path)
    }

    /// Writes every checkpoint into `dir`, returning the metadata paths.
    pub fn write_checkpoints(&self, dir: &Path, spec: &NetworkSpec, seed: u64) -> Result<Vec<PathBuf>> {
        self.checkpoints
            .iter()
            .map(|c| write_checkpoint(dir, spec, c.iteration, seed, &c.params))
            .collect()
    }
}

pub fn write_log_csv(log: &[LogRecord], path: &Path) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,train_loss,train_acc,test_loss,test_acc,grad_norm")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.iteration,
            r.train_loss,
            opt(r.train_acc),
            opt(r.test_loss),
            opt(r.test_acc),
            r.grad_norm
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Minibatch indices as a function of the global iteration.
struct Schedule {
    n: usize,
    batch_size: usize,
    shuffle: Shuffle,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl Schedule {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        Schedule {
            n,
            batch_size: cfg.batch_size,
            shuffle: cfg.shuffle,
            seed: cfg.seed,
            epoch: None,
        }
    }

    /// `None` means the whole training set in natural order.
    fn batch(&mut self, t: usize) -> Option<Vec<usize>> {
        match self.shuffle {
            Shuffle::ReshuffleEachEpoch if self.batch_size == self.n => None,
            Shuffle::ReshuffleEachEpoch => {
                let per_epoch = self.n / self.batch_size;
                let (epoch, pos) = (t / per_epoch, t % per_epoch);
                if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(epoch as u64);
                    let mut perm: Vec<usize> = (0..self.n).collect();
                    perm.shuffle(&mut rng);
                    self.epoch = Some((epoch, perm));
                }
                let perm = &self.epoch.as_ref().unwrap().1;
                Some(perm[pos * self.batch_size..(pos + 1) * self.batch_size].to_vec())
            }
            Shuffle::WithReplacement => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(t as u64);
                Some((0..self.batch_size).map(|_| rng.random_range(0..self.n)).collect())
            }
        }
    }
}

fn evaluate(
    spec: &NetworkSpec,
    params: &ParamVector,
    iteration: usize,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<LogRecord> {
    let diverged = |e: Error| match e {
        Error::NonFinite(_) => Error::Divergence { iteration },
        other => other,
    };
    let (train_loss, grad) = autodiff::loss_and_gradient(spec, params, &train.batch()).map_err(diverged)?;
    let acc = |ds: &Dataset| ds.classes().map(|_| model::accuracy(spec, params, ds)).transpose();
    let (test_loss, test_acc) = match test {
        Some(ds) => (Some(model::loss(spec, params, &ds.batch()).map_err(diverged)?), acc(ds)?),
        None => (None, None),
    };
    Ok(LogRecord {
        iteration,
        train_loss,
        train_acc: acc(train)?,
        test_loss,
        test_acc,
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    })
}

/// Runs `iterations` steps starting at global iteration `offset`.
fn run_segment(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    start: &ParamVector,
    offset: usize,
) -> Result<Trajectory> {
    start.check(spec)?;
    let mut schedule = Schedule::new(cfg, train.len());
    let mut params = start.clone();
    let mut traj = Trajectory {
        checkpoints: vec![Checkpoint {
            iteration: offset,
            params: params.clone(),
        }],
        log: vec![evaluate(spec, &params, offset, train, test)?],
    };
    for step in 0..cfg.iterations {
        let t = offset + step;
        let grad = match schedule.batch(t) {
            None => autodiff::gradient(spec, &params, &train.batch()),
            Some(idx) => autodiff::gradient(spec, &params, &train.select(&idx).batch()),
        }
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { iteration: t },
            other => other,
        })?;
        let mut values = params.into_values();
        for (w, g) in values.iter_mut().zip(&grad.values) {
            *w -= cfg.learning_rate * g;
        }
        let now = t + 1;
        params = ParamVector::new(spec, values).map_err(|_| Error::Divergence { iteration: now })?;
        if now % cfg.checkpoint_stride == 0 || step + 1 == cfg.iterations {
            traj.log.push(evaluate(spec, &params, now, train, test)?);
            traj.checkpoints.push(Checkpoint {
                iteration: now,
                params: params.clone(),
            });
        }
    }
    Ok(traj)
}

pub fn run(spec: &NetworkSpec, cfg: &TrainConfig, dataset: &Dataset, start: &ParamVector) -> Result<Trajectory> {
    run_with_test(spec, cfg, dataset, None, start)
}

/// As [`run`], additionally logging loss and accuracy on `test`.
pub fn run_with_test(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    start: &ParamVector,
) -> Result<Trajectory> {
    cfg.validate(train.len())?;
    run_segment(spec, cfg, train, test, start, 0)
}

/// Trains with `large`, then continues from its final point with `small`.
/// Phase II iterations are numbered after phase I's.
pub fn two_phase_run(
    spec: &NetworkSpec,
    large: &TrainConfig,
    small: &TrainConfig,
    dataset: &Dataset,
    start: &ParamVector,
) -> Result<(Trajectory, Trajectory)> {
    two_phase_run_with_test(spec, large, small, dataset, None, start)
}

pub fn two_phase_run_with_test(
    spec: &NetworkSpec,
    large: &TrainConfig,
    small: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    start: &ParamVector,
) -> Result<(Trajectory, Trajectory)> {
    if large.learning_rate != small.learning_rate {
        return Err(Error::InvalidSpec("both phases must share the learning rate".into()));
    }
    large.validate(train.len())?;
    small.validate_segment(train.len())?;
    let first = run_segment(spec, large, train, test, start, 0)?;
    let second = run_segment(spec, small, train, test, &first.last().params, large.iterations)?;
    Ok((first, second))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub spec: NetworkSpec,
    pub iteration: usize,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
}

/// Writes `ckpt_<iteration>.json` and the sibling `ckpt_<iteration>.bin`
/// holding `M` little-endian doubles. Returns the metadata path.
pub fn write_checkpoint(dir: &Path, spec: &NetworkSpec, iteration: usize, seed: u64, params: &ParamVector) -> Result<PathBuf> {
    params.check(spec)?;
    let meta_path = dir.join(format!("ckpt_{iteration:08}.json"));
    let meta = CheckpointMeta {
        spec: spec.clone(),
        iteration,
        seed,
        m: params.len(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(&meta_path)?), &meta)?;
    let mut w = BufWriter::new(File::create(meta_path.with_extension("bin"))?);
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(meta_path)
}

/// Reads a checkpoint from its metadata path (or its `.bin` sibling).
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamVector)> {
    let meta_path = path.with_extension("json");
    let meta: CheckpointMeta = serde_json::from_reader(BufReader::new(File::open(&meta_path)?))?;
    meta.spec.validate()?;
    if meta.spec.count_params() != meta.m {
        return Err(Error::SpecMismatch);
    }
    let bin_path = meta_path.with_extension("bin");
    let mut bytes = Vec::new();
    BufReader::new(File::open(&bin_path)?).read_to_end(&mut bytes)?;
    if bytes.len() != meta.m * 8 {
        return Err(Error::Parse {
            path: bin_path,
            offset: bytes.len().min(meta.m * 8) as u64,
            message: format!("expected {} bytes for M = {}, found {}", meta.m * 8, meta.m, bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::new(&meta.spec, values)?;
    Ok((meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Labels;
    use crate::model::{Activation, LossKind};
    use crate::testutil::random_dataset;
    use ndarray::array;

    fn sgd(batch_size: usize, iterations: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            batch_size,
            iterations,
            checkpoint_stride: 5,
            seed: 3,
            shuffle: Shuffle::ReshuffleEachEpoch,
        }
    }

    fn problem() -> (NetworkSpec, Dataset) {
        let spec = NetworkSpec::new(&[3, 5, 3], Activation::Tanh, LossKind::SoftmaxNll).unwrap();
        let ds = random_dataset(&spec, 24, 9);
        (spec, ds)
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = NetworkSpec::new(&[4, 9, 2], Activation::Relu, LossKind::SoftmaxNll).unwrap();
        let a = init_params(&spec, 1);
        assert_eq!(a, init_params(&spec, 1));
        assert_ne!(a, init_params(&spec, 2));
        for slot in spec.layout() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            assert!(slot.weights(a.values()).iter().all(|w| w.abs() <= bound));
            assert!(slot.bias(a.values()).unwrap().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_step_size_keeps_the_start() {
        let (spec, ds) = problem();
        let start = init_params(&spec, 0);
        let mut cfg = sgd(4, 12);
        cfg.learning_rate = 0.0;
        let traj = run(&spec, &cfg, &ds, &start).unwrap();
        assert!(traj.checkpoints.iter().all(|c| c.params == start));
        let iters: Vec<usize> = traj.checkpoints.iter().map(|c| c.iteration).collect();
        assert_eq!(iters, vec![0, 5, 10, 12]);
    }

    #[test]
    fn quadratic_converges_geometrically() {
        let spec = NetworkSpec::new(&[1, 1], Activation::Tanh, LossKind::Mse).unwrap().without_biases();
        let ds = Dataset::custom(array![[1.0]], Labels::Values(array![[3.0]]), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 1,
            iterations: 100,
            checkpoint_stride: 100,
            seed: 0,
            shuffle: Shuffle::ReshuffleEachEpoch,
        };
        let traj = run(&spec, &cfg, &ds, &ParamVector::zeros(&spec)).unwrap();
        assert!((traj.last().params.values()[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn full_batch_matches_reference_gradient_descent() {
        let (spec, ds) = problem();
        let start = init_params(&spec, 4);
        let traj = run(&spec, &sgd(ds.len(), 17), &ds, &start).unwrap();
        let mut w = start.into_values();
        for _ in 0..17 {
            let p = ParamVector::new(&spec, w.clone()).unwrap();
            let g = autodiff::gradient(&spec, &p, &ds.batch()).unwrap();
            w.iter_mut().zip(&g.values).for_each(|(w, g)| *w -= 0.1 * g);
        }
        assert_eq!(traj.last().params.values(), &w[..]);
    }

    #[test]
    fn runs_are_deterministic() {
        let (spec, ds) = problem();
        let start = init_params(&spec, 4);
        for shuffle in [Shuffle::ReshuffleEachEpoch, Shuffle::WithReplacement] {
            let cfg = TrainConfig { shuffle, ..sgd(5, 23) };
            assert_eq!(run(&spec, &cfg, &ds, &start).unwrap(), run(&spec, &cfg, &ds, &start).unwrap());
        }
    }

    #[test]
    fn logged_loss_matches_checkpoint() {
        let (spec, ds) = problem();
        let traj = run(&spec, &sgd(6, 20), &ds, &init_params(&spec, 2)).unwrap();
        assert_eq!(traj.log.len(), traj.checkpoints.len());
        for (c, r) in traj.checkpoints.iter().zip(&traj.log) {
            assert_eq!(c.iteration, r.iteration);
            let loss = model::loss(&spec, &c.params, &ds.batch()).unwrap();
            assert!((loss - r.train_loss).abs() <= 1e-10);
        }
    }

    #[test]
    fn identical_phases_equal_one_long_run() {
        let (spec, ds) = problem();
        let start = init_params(&spec, 6);
        let cfg = sgd(5, 15);
        let (a, b) = two_phase_run(&spec, &cfg, &cfg, &ds, &start).unwrap();
        let long = run(&spec, &sgd(5, 30), &ds, &start).unwrap();
        assert_eq!(b.first().iteration, 15);
        assert_eq!(b.last(), long.last());
        let mut joined = a.checkpoints.clone();
        joined.extend(b.checkpoints.into_iter().skip(1));
        assert_eq!(joined, long.checkpoints);
    }

    #[test]
    fn empty_second_phase_holds_only_its_start() {
        let (spec, ds) = problem();
        let large = sgd(12, 10);
        let small = TrainConfig { iterations: 0, ..sgd(3, 0) };
        let (a, b) = two_phase_run(&spec, &large, &small, &ds, &init_params(&spec, 1)).unwrap();
        assert_eq!(b.checkpoints.len(), 1);
        assert_eq!(b.first(), a.last());
    }

    #[test]
    fn phases_must_share_step_size() {
        let (spec, ds) = problem();
        let small = TrainConfig { learning_rate: 0.2, ..sgd(3, 4) };
        assert!(two_phase_run(&spec, &sgd(12, 4), &small, &ds, &init_params(&spec, 1)).is_err());
    }

    #[test]
    fn divergence_reports_the_iteration() {
        let spec = NetworkSpec::new(&[1, 1], Activation::Tanh, LossKind::Mse).unwrap().without_biases();
        let ds = Dataset::custom(array![[10.0]], Labels::Values(array![[1.0]]), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 10.0,
            batch_size: 1,
            iterations: 1000,
            checkpoint_stride: 1000,
            seed: 0,
            shuffle: Shuffle::ReshuffleEachEpoch,
        };
        let err = run(&spec, &cfg, &ds, &ParamVector::new(&spec, vec![1.0]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (spec, ds) = problem();
        let start = init_params(&spec, 0);
        assert!(run(&spec, &sgd(0, 5), &ds, &start).is_err());
        assert!(run(&spec, &sgd(100, 5), &ds, &start).is_err());
        assert!(run(&spec, &sgd(4, 0), &ds, &start).is_err());
    }

    #[test]
    fn checkpoint_files_roundtrip() {
        let (spec, _) = problem();
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(&spec, 8);
        let path = write_checkpoint(dir.path(), &spec, 42, 7, &p).unwrap();
        let (meta, back) = read_checkpoint(&path).unwrap();
        assert_eq!((meta.iteration, meta.seed, meta.m), (42, 7, spec.count_params()));
        assert_eq!(back, p);
        std::fs::write(path.with_extension("bin"), [0u8; 12]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Parse { offset: 12, .. })));
    }
}
