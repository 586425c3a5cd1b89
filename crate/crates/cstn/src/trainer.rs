//! Training driver: phantom pairs, the optimization loop, validation,
//! checkpoints and the loss log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cstn_core::model::CstnWeights;
use cstn_core::mri::simulate_lowres;
use cstn_core::train::{batch, evaluate_loss, train_step, TrainPair, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{phantom_set, Split};
use crate::error::{self, Error, Result};
use crate::eval::thread_pool;

/// Full-image training and validation pairs.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<TrainPair>,
    pub val: Vec<TrainPair>,
}

fn pairs(cfg: &RunConfig, split: Split, count: usize, threads: usize) -> Result<Vec<TrainPair>> {
    let t = &cfg.train;
    let hr = phantom_set(t.seed, split, count, t.phantom_size, cfg.model.in_echoes, threads)?;
    thread_pool(threads)?.install(|| {
        hr.par_iter()
            .map(|v| Ok(TrainPair::new(&simulate_lowres(v, t.lowres_size, t.lowres_size)?, v)?))
            .collect()
    })
}

pub fn build_data(cfg: &RunConfig, threads: usize) -> Result<TrainData> {
    let t = &cfg.train;
    Ok(TrainData {
        train: pairs(cfg, Split::Train, t.train_phantoms, threads)?,
        val: pairs(cfg, Split::Val, t.val_phantoms, threads)?,
    })
}

/// Mean loss over the validation images, one image at a time.
pub fn validation_loss(cfg: &RunConfig, weights: &CstnWeights, val: &[TrainPair]) -> Result<f32> {
    let mut sum = 0.0f64;
    for pair in val {
        sum += evaluate_loss(weights, pair, &cfg.model, &cfg.train)? as f64;
    }
    Ok((sum / val.len().max(1) as f64) as f32)
}

/// Observer of the optimization loop.
pub trait Monitor {
    fn step(&mut self, _step: usize, _loss: f32, _lr: f64) -> Result<()> {
        Ok(())
    }
    fn validation(&mut self, _step: usize, _loss: f32) -> Result<()> {
        Ok(())
    }
}

impl Monitor for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: CstnWeights,
    pub best: CstnWeights,
    /// Step count the best weights had seen.
    pub best_step: usize,
    pub best_val: f32,
}

const CROP_TRIES: usize = 16;

/// Samples `count` random pairs and crops from the training set. A crop
/// with less than `foreground` nonzero target magnitude is redrawn; after
/// `CROP_TRIES` draws the last one is kept.
pub fn sample_batch(data: &[TrainPair], size: usize, count: usize, foreground: f64, rng: &mut ChaCha8Rng) -> Result<TrainPair> {
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let pair = &data[rng.random_range(0..data.len())];
        let mut crop = pair.random_crop(size, rng)?;
        for _ in 1..CROP_TRIES {
            if crop.foreground_fraction() >= foreground {
                break;
            }
            crop = pair.random_crop(size, rng)?;
        }
        picks.push(crop);
    }
    Ok(batch(&picks)?)
}

/// Runs `train.total_steps` optimizer steps from `init`. Validation runs at
/// the start, every `checkpoint_every` steps and at the end; the weights
/// with the lowest validation loss are kept.
pub fn train(cfg: &RunConfig, data: &TrainData, init: CstnWeights, monitor: &mut impl Monitor) -> Result<TrainOutcome> {
    let (t, model) = (&cfg.train, &cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut state = TrainState::new(init);
    let validate = |w: &CstnWeights, step: usize, monitor: &mut dyn FnMut(usize, f32) -> Result<()>| -> Result<f32> {
        let v = validation_loss(cfg, w, &data.val)?;
        monitor(step, v)?;
        Ok(v)
    };
    let mut best_val = validate(&state.weights, 0, &mut |s, v| monitor.validation(s, v))?;
    let mut best = state.weights.clone();
    let mut best_step = 0;
    for step in 0..t.total_steps {
        let b = sample_batch(&data.train, t.patch_size, t.batch_size, t.foreground, &mut rng)?;
        let lr = t.lr_at(step);
        let loss = train_step(&mut state, &b, model, t, lr)?;
        monitor.step(step, loss, lr)?;
        let done = step + 1;
        if done % t.checkpoint_every == 0 || done == t.total_steps {
            let v = validate(&state.weights, done, &mut |s, v| monitor.validation(s, v))?;
            if v < best_val {
                best_val = v;
                best = state.weights.clone();
                best_step = done;
            }
        }
    }
    Ok(TrainOutcome {
        last: state.weights,
        best,
        best_step,
        best_val,
    })
}

/// `count` fixed random crops of side `size`, one per phantom of side
/// `phantom_size` truncated to `lowres_size`.
pub fn overfit_patches(seed: u64, count: usize, phantom_size: usize, lowres_size: usize, size: usize, echoes: usize) -> Result<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr = phantom_set(seed, Split::Train, count, phantom_size, echoes, 1)?;
    let picks: Vec<TrainPair> = hr
        .iter()
        .map(|v| Ok(TrainPair::new(&simulate_lowres(v, lowres_size, lowres_size)?, v)?.random_crop(size, &mut rng)?))
        .collect::<Result<_>>()?;
    Ok(batch(&picks)?)
}

/// Trains on one fixed batch for `steps` steps from the seeded
/// initialization. Returns `steps + 1` losses: the one seen by each step,
/// then the loss of the final weights.
pub fn overfit(cfg: &RunConfig, patches: &TrainPair, steps: usize) -> Result<Vec<f32>> {
    let (t, model) = (&cfg.train, &cfg.model);
    let mut state = TrainState::new(CstnWeights::init(model, t.seed)?);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        losses.push(train_step(&mut state, patches, model, t, t.lr_at(step))?);
    }
    losses.push(evaluate_loss(&state.weights, patches, model, t)?);
    Ok(losses)
}

struct CsvLogs {
    loss: BufWriter<File>,
    val: BufWriter<File>,
    loss_path: PathBuf,
    val_path: PathBuf,
}

impl CsvLogs {
    fn create(dir: &Path) -> Result<Self> {
        let open = |p: &Path, header: &str| -> Result<BufWriter<File>> {
            let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(p, e))?;
            Ok(w)
        };
        let (loss_path, val_path) = (dir.join(LOSS_LOG), dir.join(VAL_LOG));
        Ok(Self {
            loss: open(&loss_path, "step,loss,lr")?,
            val: open(&val_path, "step,val_loss")?,
            loss_path,
            val_path,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.loss.flush().map_err(|e| Error::io(&self.loss_path, e))?;
        self.val.flush().map_err(|e| Error::io(&self.val_path, e))
    }
}

impl Monitor for CsvLogs {
    fn step(&mut self, step: usize, loss: f32, lr: f64) -> Result<()> {
        writeln!(self.loss, "{step},{loss},{lr}").map_err(|e| Error::io(&self.loss_path, e))
    }

    fn validation(&mut self, step: usize, loss: f32) -> Result<()> {
        writeln!(self.val, "{step},{loss}").map_err(|e| Error::io(&self.val_path, e))?;
        self.flush()
    }
}

pub const LOSS_LOG: &str = "loss.csv";
pub const VAL_LOG: &str = "val.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const BEST_CKPT: &str = "best.cstck";
pub const LAST_CKPT: &str = "last.cstck";

/// Creates `run-<unix seconds>-seed<seed>` under `root`, never reusing an
/// existing directory.
pub fn create_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("run-{secs}-seed{seed}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// Generates data, trains from the seeded initialization and writes the
/// run directory: `config.txt`, `loss.csv`, `val.csv`, `best.cstck` and
/// `last.cstck`. The logs survive a divergence error.
pub fn run(cfg: &RunConfig, root: &Path, threads: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = create_run_dir(root, cfg.train.seed)?;
    error::write(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let data = build_data(cfg, threads)?;
    let init = CstnWeights::init(&cfg.model, cfg.train.seed)?;
    let mut logs = CsvLogs::create(&dir)?;
    let result = train(cfg, &data, init, &mut logs);
    logs.flush()?;
    let outcome = result?;
    checkpoint::save(&dir.join(BEST_CKPT), &cfg.model, &outcome.best)?;
    checkpoint::save(&dir.join(LAST_CKPT), &cfg.model, &outcome.last)?;
    Ok(RunSummary { dir, outcome })
}
