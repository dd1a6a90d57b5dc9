//! Trajectories, temporal features, padded batches and stream embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geo::{poi_feature_u32, RANK_BUCKETS};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::City;
use crate::tensor::Tensor;

pub const SLOT_SECONDS: i64 = 1800;
pub const TOD_SLOTS: usize = 48;
pub const DOW_SLOTS: usize = 7;
pub const STAY_BUCKETS: usize = 48;
const DAY_SECONDS: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub location: usize,
    /// Arrival time in Unix seconds.
    pub time: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: u64,
    pub city_id: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Validates that arrival times strictly increase.
    pub fn new(user_id: u64, city_id: usize, steps: Vec<Step>) -> Result<Self> {
        if let Some(w) = steps.windows(2).find(|w| w[1].time <= w[0].time) {
            return Err(Error::invalid(format!(
                "arrival times must strictly increase ({} then {})",
                w[0].time, w[1].time
            )));
        }
        Ok(Self {
            user_id,
            city_id,
            steps,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn times(&self) -> Vec<i64> {
        self.steps.iter().map(|s| s.time).collect()
    }

    pub fn locations(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.location).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalFeatures {
    pub tod: usize,
    pub dow: usize,
    pub stay_bucket: usize,
}

/// Nearest half-hour slot of the day; 23:45 and later wrap to slot 0.
pub fn tod_slot(t: i64) -> usize {
    let sec = t.rem_euclid(DAY_SECONDS);
    (((sec + SLOT_SECONDS / 2) / SLOT_SECONDS) as usize) % TOD_SLOTS
}

/// Monday = 0. 1970-01-01 was a Thursday.
pub fn day_of_week(t: i64) -> usize {
    (t.div_euclid(DAY_SECONDS) + 3).rem_euclid(7) as usize
}

/// Half-hour-wide stay bucket, saturating at the last bucket.
pub fn stay_bucket(duration_secs: i64) -> usize {
    ((duration_secs.max(0) / SLOT_SECONDS) as usize).min(STAY_BUCKETS - 1)
}

/// Per-step temporal features. The last step has no following arrival and
/// gets stay bucket 0.
pub fn temporal_features(times: &[i64]) -> Result<Vec<TemporalFeatures>> {
    if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "timestamps must strictly increase ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(times
        .iter()
        .enumerate()
        .map(|(i, &t)| TemporalFeatures {
            tod: tod_slot(t),
            dow: day_of_week(t),
            stay_bucket: times.get(i + 1).map_or(0, |&next| stay_bucket(next - t)),
        })
        .collect())
}

/// The three aligned per-step feature streams of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Foundational {
    /// `[n_1..n_c, p_1..p_c]` per step.
    pub poi: Vec<Vec<f64>>,
    /// Normalized coordinates per step.
    pub coords: Vec<(f64, f64)>,
    /// 1-based popularity bucket per step.
    pub ranks: Vec<usize>,
}

pub fn build_foundational(traj: &Trajectory, city: &City) -> Result<Foundational> {
    let mut out = Foundational {
        poi: Vec::with_capacity(traj.len()),
        coords: Vec::with_capacity(traj.len()),
        ranks: Vec::with_capacity(traj.len()),
    };
    for step in &traj.steps {
        let f = city.features(step.location)?;
        out.poi.push(poi_feature_u32(&f.poi_counts));
        out.coords.push(f.coord);
        out.ranks.push(f.popularity_rank);
    }
    Ok(out)
}

/// `T×T` causal pattern: entry `(i, j)` is allowed iff `j <= i`.
pub fn causal_mask(len: usize) -> Vec<Vec<bool>> {
    (0..len).map(|i| (0..len).map(|j| j <= i).collect()).collect()
}

/// Right-padded model input for `batch` trajectories of one city. All
/// per-position arrays are flattened `batch × len` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub city_id: usize,
    pub batch: usize,
    pub len: usize,
    pub categories: usize,
    /// `batch × len × 2c`.
    pub poi: Vec<f64>,
    /// `batch × len × 2`.
    pub coords: Vec<f64>,
    /// 1-based popularity bucket, 0 on padding.
    pub ranks: Vec<usize>,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    pub stay: Vec<usize>,
    pub location_ids: Vec<usize>,
    /// True exactly where a real token exists.
    pub padding_mask: Vec<bool>,
    /// Next-step location id; meaningful only where `valid_target` holds.
    pub targets: Vec<usize>,
    pub valid_target: Vec<bool>,
}

impl PaddedBatch {
    pub fn positions(&self) -> usize {
        self.batch * self.len
    }

    pub fn real_positions(&self) -> usize {
        self.padding_mask.iter().filter(|&&m| m).count()
    }

    pub fn target_options(&self) -> Vec<Option<usize>> {
        self.targets
            .iter()
            .zip(&self.valid_target)
            .map(|(&t, &v)| v.then_some(t))
            .collect()
    }

    /// Keeps only the final valid target of each row.
    pub fn last_target_only(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.positions()];
        for b in 0..self.batch {
            let row = b * self.len..(b + 1) * self.len;
            if let Some(p) = row.rev().find(|&p| self.valid_target[p]) {
                out[p] = Some(self.targets[p]);
            }
        }
        out
    }
}

pub fn pad_batch(city: &City, trajs: &[&Trajectory], len: usize) -> Result<PaddedBatch> {
    if trajs.is_empty() {
        return Err(Error::Empty("batch has no trajectories".into()));
    }
    let c = city.categories;
    let n = trajs.len() * len;
    let mut batch = PaddedBatch {
        city_id: city.id,
        batch: trajs.len(),
        len,
        categories: c,
        poi: vec![0.0; n * 2 * c],
        coords: vec![0.0; n * 2],
        ranks: vec![0; n],
        tod: vec![0; n],
        dow: vec![0; n],
        stay: vec![0; n],
        location_ids: vec![0; n],
        padding_mask: vec![false; n],
        targets: vec![0; n],
        valid_target: vec![false; n],
    };
    for (b, traj) in trajs.iter().enumerate() {
        if traj.city_id != city.id {
            return Err(Error::invalid(format!(
                "trajectory from city {} batched with city {}",
                traj.city_id, city.id
            )));
        }
        if traj.len() > len {
            return Err(Error::invalid(format!(
                "trajectory of length {} exceeds padded length {len}",
                traj.len()
            )));
        }
        if traj.len() < 2 {
            return Err(Error::invalid("trajectory needs at least two steps"));
        }
        let found = build_foundational(traj, city)?;
        let temporal = temporal_features(&traj.times())?;
        for (i, step) in traj.steps.iter().enumerate() {
            let p = b * len + i;
            batch.poi[p * 2 * c..(p + 1) * 2 * c].copy_from_slice(&found.poi[i]);
            batch.coords[p * 2] = found.coords[i].0;
            batch.coords[p * 2 + 1] = found.coords[i].1;
            batch.ranks[p] = found.ranks[i];
            batch.tod[p] = temporal[i].tod;
            batch.dow[p] = temporal[i].dow;
            batch.stay[p] = temporal[i].stay_bucket;
            batch.location_ids[p] = step.location;
            batch.padding_mask[p] = true;
            if let Some(next) = traj.steps.get(i + 1) {
                batch.targets[p] = next.location;
                batch.valid_target[p] = true;
            }
        }
    }
    Ok(batch)
}

/// Per-stream embedding parameters for trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEmbedder {
    poi_w: ParamId,
    poi_b: ParamId,
    coord_w: ParamId,
    coord_b: ParamId,
    rank_table: ParamId,
    tod_table: ParamId,
    dow_table: ParamId,
    stay_table: ParamId,
    pub d: usize,
    pub categories: usize,
}

/// Tape handles for the five stream embeddings, each `[batch*len, d]`.
#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub poi: Var,
    pub pos: Var,
    pub pop: Var,
    pub traj: Var,
    pub ts: Var,
}

/// Materialized stream embeddings, each `batch × len × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEmbeddings<S> {
    pub poi: Tensor<S>,
    pub pos: Tensor<S>,
    pub pop: Tensor<S>,
    pub traj: Tensor<S>,
    pub ts: Tensor<S>,
}

impl StreamEmbedder {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        d: usize,
        categories: usize,
        seed: u64,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            poi_w: store.add_normal("emb.poi.w", &[2 * categories, d], std, seed)?,
            poi_b: store.add_const("emb.poi.b", &[d], 0.0)?,
            coord_w: store.add_normal("emb.coord.w", &[2, d], std, seed)?,
            coord_b: store.add_const("emb.coord.b", &[d], 0.0)?,
            rank_table: store.add_normal("emb.rank", &[RANK_BUCKETS, d], std, seed)?,
            tod_table: store.add_normal("emb.tod", &[TOD_SLOTS, d], std, seed)?,
            dow_table: store.add_normal("emb.dow", &[DOW_SLOTS, d], std, seed)?,
            stay_table: store.add_normal("emb.stay", &[STAY_BUCKETS, d], std, seed)?,
            d,
            categories,
        })
    }

    pub fn embed_vars<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        batch: &PaddedBatch,
    ) -> Result<StreamVars> {
        let n = batch.positions();
        let c = self.categories;
        if batch.categories != c || batch.poi.len() != n * 2 * c || batch.coords.len() != n * 2 {
            return Err(Error::shape("embed_streams", &[n, 2 * c], &[batch.poi.len()]));
        }
        let keep = batch.padding_mask.clone();
        let lookup = |ids: &[usize], offset: usize, limit: usize, what: &str| -> Result<Vec<Option<usize>>> {
            ids.iter()
                .zip(&keep)
                .map(|(&i, &k)| {
                    if !k {
                        return Ok(None);
                    }
                    if i < offset || i - offset >= limit {
                        return Err(Error::invalid(format!("{what} bucket {i} out of range")));
                    }
                    Ok(Some(i - offset))
                })
                .collect()
        };
        let rank_idx = lookup(&batch.ranks, 1, RANK_BUCKETS, "popularity")?;
        let tod_idx = lookup(&batch.tod, 0, TOD_SLOTS, "time-of-day")?;
        let dow_idx = lookup(&batch.dow, 0, DOW_SLOTS, "day-of-week")?;
        let stay_idx = lookup(&batch.stay, 0, STAY_BUCKETS, "stay")?;

        let poi_in = tape.leaf(Tensor::new(
            vec![n, 2 * c],
            batch.poi.iter().map(|&v| S::lit(v)).collect(),
        )?);
        let coord_in = tape.leaf(Tensor::new(
            vec![n, 2],
            batch.coords.iter().map(|&v| S::lit(v)).collect(),
        )?);
        let poi = crate::geo::affine(tape, store, poi_in, self.poi_w, self.poi_b)?;
        let poi = tape.mask_rows(poi, keep.clone())?;
        let pos = crate::geo::affine(tape, store, coord_in, self.coord_w, self.coord_b)?;
        let pos = tape.mask_rows(pos, keep)?;
        let rank_table = tape.param(store, self.rank_table);
        let pop = tape.gather(rank_table, rank_idx)?;
        let traj = tape.add(poi, pos)?;
        let traj = tape.add(traj, pop)?;

        let tod_table = tape.param(store, self.tod_table);
        let dow_table = tape.param(store, self.dow_table);
        let stay_table = tape.param(store, self.stay_table);
        let tod = tape.gather(tod_table, tod_idx)?;
        let dow = tape.gather(dow_table, dow_idx)?;
        let stay = tape.gather(stay_table, stay_idx)?;
        let ts = tape.add(tod, dow)?;
        let ts = tape.add(ts, stay)?;
        Ok(StreamVars { poi, pos, pop, traj, ts })
    }

    pub fn embed_streams<S: Scalar>(&self, store: &ParamStore<S>, batch: &PaddedBatch) -> Result<StreamEmbeddings<S>> {
        let mut tape = Tape::new();
        let v = self.embed_vars(&mut tape, store, batch)?;
        let shape = [batch.batch, batch.len, self.d];
        let get = |var: Var| tape.value(var).clone().reshape(&shape);
        Ok(StreamEmbeddings {
            poi: get(v.poi)?,
            pos: get(v.pos)?,
            pop: get(v.pop)?,
            traj: get(v.traj)?,
            ts: get(v.ts)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.poi_w,
            self.poi_b,
            self.coord_w,
            self.coord_b,
            self.rank_table,
            self.tod_table,
            self.dow_table,
            self.stay_table,
        ]
    }
}
