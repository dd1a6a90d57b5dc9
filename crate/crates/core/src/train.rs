//! Dataset splits, the pretraining loop over several cities, fine-tuning on
//! a fraction of one city, and JSON checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrajMoe};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{name_seed, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{City, CityDataset};
use crate::tensor::Tensor;
use crate::traj::{pad_batch, PaddedBatch, Trajectory};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    /// Every position with a next step.
    #[default]
    All,
    /// Only the last position with a next step in each trajectory.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitySampling {
    #[default]
    Uniform,
    /// Weighted by the number of batches a city has left in the epoch.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_positions: LossPositions,
    pub city_sampling: CitySampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            max_epochs: 50,
            patience: 3,
            loss_positions: LossPositions::All,
            city_sampling: CitySampling::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        self.model.validate()
    }

    fn targets(&self, batch: &PaddedBatch) -> Vec<Option<usize>> {
        match self.loss_positions {
            LossPositions::All => batch.target_options(),
            LossPositions::Last => batch.last_target_only(),
        }
    }
}

/// Seeded 80/10/10 partition of one city's trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct CitySplit {
    pub city: City,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl CitySplit {
    pub fn new(data: CityDataset, seed: u64) -> Result<Self> {
        let n = data.trajectories.len();
        if n < 3 {
            return Err(Error::Empty(format!(
                "city {} has {n} trajectories, at least 3 are needed for a split",
                data.city.id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(name_seed(seed, &format!("split{}", data.city.id))));
        let held = (n / 10).max(1);
        let pick = |ix: &[usize]| ix.iter().map(|&i| data.trajectories[i].clone()).collect::<Vec<_>>();
        Ok(Self {
            test: pick(&order[..held]),
            val: pick(&order[held..2 * held]),
            train: pick(&order[2 * held..]),
            city: data.city,
        })
    }

    /// The first `round(fraction * n)` training trajectories of a seeded
    /// permutation, sampled without replacement.
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> Result<Vec<Trajectory>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
        }
        let k = (fraction * self.train.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Empty(format!(
                "fraction {fraction} of {} training trajectories is empty",
                self.train.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(name_seed(seed, &format!("subsample{}", self.city.id))));
        order.truncate(k);
        order.sort_unstable();
        Ok(order.into_iter().map(|i| self.train[i].clone()).collect())
    }
}

/// Pads a batch to the longest trajectory in it.
pub fn make_batch(city: &City, trajs: &[&Trajectory]) -> Result<PaddedBatch> {
    let len = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
    pad_batch(city, trajs, len)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    /// Mean training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation loss after each epoch.
    pub val_loss: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Model parameters plus the configuration and history that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub params: Vec<NamedParam>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &TrajMoe<S>, config: &TrainConfig, meta: TrainMeta) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, t)| NamedParam {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: TrainConfig {
                model: model.config.clone(),
                ..config.clone()
            },
            params,
            meta,
        }
    }

    pub fn model<S: Scalar>(&self) -> Result<TrajMoe<S>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(&p.name, Tensor::from_f64(&p.shape, &p.data)?)?;
        }
        TrajMoe::from_store(self.config.model.clone(), store)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            source_name: "checkpoint".into(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

/// Mean cross-entropy over every valid next-step target of `trajs`.
pub fn mean_loss<S: Scalar>(model: &TrajMoe<S>, city: &City, trajs: &[Trajectory], batch_size: usize) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Empty(format!("no trajectories to evaluate in city {}", city.id)));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in trajs.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = make_batch(city, &refs)?;
        let targets = batch.target_options();
        let n = targets.iter().flatten().count();
        total += model.loss(&batch, city, targets)?.to_f64_lossy() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

struct Source<'a> {
    city: &'a City,
    train: &'a [Trajectory],
    val: &'a [Trajectory],
}

/// One pass over every training trajectory. Each city's trajectories are
/// shuffled and cut into batches; each step draws a city among those with
/// batches left.
fn run_epoch<S: Scalar>(
    model: &mut TrajMoe<S>,
    opt: &mut AdamW<S>,
    sources: &[Source<'_>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut queues: Vec<Vec<Vec<usize>>> = sources
        .iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..s.train.len()).collect();
            order.shuffle(rng);
            let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
            batches.reverse();
            batches
        })
        .collect();
    let mut total = 0.0;
    let mut steps = 0usize;
    loop {
        let open: Vec<usize> = (0..queues.len()).filter(|&i| !queues[i].is_empty()).collect();
        if open.is_empty() {
            break;
        }
        let pick = match cfg.city_sampling {
            CitySampling::Uniform => open[rng.gen_range(0..open.len())],
            CitySampling::Proportional => {
                let left: usize = open.iter().map(|&i| queues[i].len()).sum();
                let mut r = rng.gen_range(0..left);
                *open
                    .iter()
                    .find(|&&i| {
                        if r < queues[i].len() {
                            true
                        } else {
                            r -= queues[i].len();
                            false
                        }
                    })
                    .expect("r < left")
            }
        };
        let idx = queues[pick].pop().expect("open queue");
        let src = &sources[pick];
        let refs: Vec<&Trajectory> = idx.iter().map(|&i| &src.train[i]).collect();
        let batch = make_batch(src.city, &refs)?;
        let targets = cfg.targets(&batch);
        if targets.iter().all(Option::is_none) {
            continue;
        }
        let (loss, grads) = model.loss_and_grads(&batch, src.city, targets)?;
        opt.step(&mut model.store, &grads)?;
        total += loss.to_f64_lossy();
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::Empty("no training batches".into()));
    }
    Ok(total / steps as f64)
}

fn val_loss<S: Scalar>(model: &TrajMoe<S>, sources: &[Source<'_>], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    for s in sources {
        sum += mean_loss(model, s.city, s.val, batch_size)?;
    }
    Ok(sum / sources.len() as f64)
}

/// Trains from a fresh model on every city's training split with early
/// stopping on the mean validation loss; returns the best-validation
/// parameters.
pub fn pretrain(cities: &[CitySplit], cfg: &TrainConfig) -> Result<Checkpoint> {
    pretrain_typed::<f64>(cities, cfg)
}

pub fn pretrain_typed<S: Scalar>(cities: &[CitySplit], cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if cities.is_empty() {
        return Err(Error::Empty("pretraining needs at least one city".into()));
    }
    for c in cities {
        if c.train.is_empty() || c.val.is_empty() {
            return Err(Error::Empty(format!("city {} has an empty train or validation split", c.city.id)));
        }
    }
    let sources: Vec<Source<'_>> = cities
        .iter()
        .map(|c| Source {
            city: &c.city,
            train: &c.train,
            val: &c.val,
        })
        .collect();
    let mut model = TrajMoe::<S>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "pretrain"));
    let mut meta = TrainMeta::default();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let train = run_epoch(&mut model, &mut opt, &sources, cfg, &mut rng)?;
        let val = val_loss(&model, &sources, cfg.batch_size)?;
        meta.epochs_run = epoch + 1;
        meta.train_loss.push(train);
        meta.val_loss.push(val);
        if val < best.0 {
            best = (val, model.store.clone());
            meta.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    meta.steps = opt.step_count();
    model.store = best.1;
    Ok(Checkpoint::from_model(&model, cfg, meta))
}

/// Continues training `ckpt` for `epochs` epochs on a seeded `fraction` of
/// one city's training split. Optimizer state starts fresh; batch size,
/// optimizer settings, loss positions and seed come from `cfg`.
pub fn finetune(
    ckpt: &Checkpoint,
    city: &CitySplit,
    fraction: f64,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    finetune_typed::<f64>(ckpt, city, fraction, epochs, cfg)
}

pub fn finetune_typed<S: Scalar>(
    ckpt: &Checkpoint,
    city: &CitySplit,
    fraction: f64,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut model = ckpt.model::<S>()?;
    let train = city.subsample_train(fraction, cfg.seed)?;
    let run_cfg = TrainConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    let src = [Source {
        city: &city.city,
        train: &train,
        val: &city.val,
    }];
    let mut opt = AdamW::new(cfg.optimizer, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "finetune"));
    let mut meta = ckpt.meta.clone();
    for _ in 0..epochs {
        let loss = run_epoch(&mut model, &mut opt, &src, &run_cfg, &mut rng)?;
        meta.train_loss.push(loss);
        if !city.val.is_empty() {
            meta.val_loss.push(val_loss(&model, &src, cfg.batch_size)?);
        }
        meta.epochs_run += 1;
    }
    if epochs == 0 {
        return Ok(ckpt.clone());
    }
    meta.steps += opt.step_count();
    Ok(Checkpoint::from_model(&model, &run_cfg, meta))
}
