//! Top-k accuracy, the Markov baseline, ablation variants, gate statistics
//! and the experiment grids.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateTrace, TrajMoe};
use crate::params::name_seed;
use crate::samoe::AblationFlags;
use crate::scalar::Scalar;
use crate::synth::City;
use crate::train::{finetune_typed, make_batch, pretrain_typed, Checkpoint, CitySplit, TrainConfig, TrainMeta};
use crate::traj::{tod_slot, Trajectory, TOD_SLOTS};

pub const REPORT_KS: [usize; 3] = [1, 3, 5];

/// Candidate ids by descending score, ascending id on ties.
pub fn rank_candidates<S: Scalar>(scores: &[S]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    ids
}

/// Fraction of samples whose truth is among the first `k` ranked ids.
pub fn acc_at_k(ranked: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if ranked.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    if ranked.len() != truths.len() {
        return Err(Error::shape("acc_at_k", &[ranked.len()], &[truths.len()]));
    }
    let mut hits = 0usize;
    for (r, t) in ranked.iter().zip(truths) {
        if r.len() < k {
            return Err(Error::invalid(format!("prediction list of length {} is shorter than k = {k}", r.len())));
        }
        if r[..k].contains(t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Acc@1/3/5 of one model on one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub city_id: usize,
    pub samples: usize,
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
    /// FNV-based hash of the model configuration and parameters.
    pub fingerprint: String,
}

impl EvalReport {
    pub fn acc(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.acc1),
            3 => Some(self.acc3),
            5 => Some(self.acc5),
            _ => None,
        }
    }
}

pub fn fingerprint(ckpt: &Checkpoint) -> String {
    let config = serde_json::to_string(&ckpt.config.model).unwrap_or_default();
    let mut h = name_seed(0, &config);
    for p in &ckpt.params {
        h = name_seed(h, &p.name);
        for v in &p.data {
            h = name_seed(h ^ v.to_bits(), "");
        }
    }
    format!("{h:016x}")
}

/// Ranked candidate lists and truths for every valid next-step target.
pub fn predictions<S: Scalar>(
    model: &TrajMoe<S>,
    city: &City,
    trajs: &[Trajectory],
    batch_size: usize,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut ranked = Vec::new();
    let mut truths = Vec::new();
    for chunk in trajs.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = make_batch(city, &refs)?;
        let (logits, _) = model.logits(&batch, city)?;
        for p in 0..batch.positions() {
            if batch.valid_target[p] {
                ranked.push(rank_candidates(logits.row(p)));
                truths.push(batch.targets[p]);
            }
        }
    }
    Ok((ranked, truths))
}

pub fn evaluate<S: Scalar>(
    model: &TrajMoe<S>,
    city: &City,
    trajs: &[Trajectory],
    batch_size: usize,
    fingerprint: String,
) -> Result<EvalReport> {
    let (ranked, truths) = predictions(model, city, trajs, batch_size)?;
    let k = |k: usize| acc_at_k(&ranked, &truths, k.min(city.len()));
    Ok(EvalReport {
        city_id: city.id,
        samples: truths.len(),
        acc1: k(1)?,
        acc3: k(3)?,
        acc5: k(5)?,
        fingerprint,
    })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, city: &City, trajs: &[Trajectory]) -> Result<EvalReport> {
    let model = ckpt.model::<f64>()?;
    evaluate(&model, city, trajs, ckpt.config.batch_size, fingerprint(ckpt))
}

/// First-order transition counts with add-one smoothing. The state is the
/// current location, optionally paired with the half of the day.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovBaseline {
    pub locations: usize,
    pub time_aware: bool,
    counts: BTreeMap<(usize, usize), Vec<u64>>,
    global: Vec<u64>,
}

impl MarkovBaseline {
    pub fn fit(train: &[Trajectory], locations: usize, time_aware: bool) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("Markov baseline needs training trajectories".into()));
        }
        let mut m = Self {
            locations,
            time_aware,
            counts: BTreeMap::new(),
            global: vec![0; locations],
        };
        for t in train {
            for (i, s) in t.steps.iter().enumerate() {
                if s.location >= locations {
                    return Err(Error::UnknownLocation {
                        location: s.location,
                        city: t.city_id,
                    });
                }
                m.global[s.location] += 1;
                if let Some(next) = t.steps.get(i + 1) {
                    let row = m.counts.entry(m.state(s.location, s.time)).or_insert_with(|| vec![0; locations]);
                    row[next.location] += 1;
                }
            }
        }
        Ok(m)
    }

    fn state(&self, location: usize, time: i64) -> (usize, usize) {
        let half = if self.time_aware {
            usize::from(tod_slot(time) >= TOD_SLOTS / 2)
        } else {
            0
        };
        (location, half)
    }

    /// Smoothed transition probabilities from a state, or `None` when the
    /// state never occurred in training.
    pub fn probabilities(&self, location: usize, time: i64) -> Option<Vec<f64>> {
        let row = self.counts.get(&self.state(location, time))?;
        let total: u64 = row.iter().sum::<u64>() + self.locations as u64;
        Some(row.iter().map(|&c| (c + 1) as f64 / total as f64).collect())
    }

    /// Candidates ranked by transition probability, falling back to global
    /// visit frequency for unseen states.
    pub fn rank(&self, location: usize, time: i64) -> Vec<usize> {
        match self.probabilities(location, time) {
            Some(p) => rank_candidates(&p),
            None => {
                let f: Vec<f64> = self.global.iter().map(|&c| c as f64).collect();
                rank_candidates(&f)
            }
        }
    }
}

/// Acc@k of the Markov baseline on every next-step target of `test`.
pub fn markov_baseline(
    train: &[Trajectory],
    test: &[Trajectory],
    locations: usize,
    k: usize,
    time_aware: bool,
) -> Result<f64> {
    let m = MarkovBaseline::fit(train, locations, time_aware)?;
    let mut ranked = Vec::new();
    let mut truths = Vec::new();
    for t in test {
        for w in t.steps.windows(2) {
            ranked.push(m.rank(w[0].location, w[0].time));
            truths.push(w[1].location);
        }
    }
    acc_at_k(&ranked, &truths, k.min(locations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    RemoveAdaptedGate,
    RemoveTimeGate,
    RemoveTrajGate,
    RemoveMoeKeepFused,
    RemoveFusedExpert,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::RemoveAdaptedGate,
        AblationVariant::RemoveTimeGate,
        AblationVariant::RemoveTrajGate,
        AblationVariant::RemoveMoeKeepFused,
        AblationVariant::RemoveFusedExpert,
    ];

    pub fn flags(self) -> AblationFlags {
        let full = AblationFlags::full();
        match self {
            AblationVariant::Full => full,
            AblationVariant::RemoveAdaptedGate => AblationFlags { adapted: false, ..full },
            AblationVariant::RemoveTimeGate => AblationFlags {
                time_gate: false,
                adapted: false,
                ..full
            },
            AblationVariant::RemoveTrajGate => AblationFlags {
                traj_gate: false,
                adapted: false,
                ..full
            },
            AblationVariant::RemoveMoeKeepFused => AblationFlags {
                traj_gate: false,
                time_gate: false,
                adapted: false,
                specialized: false,
                fused: true,
            },
            AblationVariant::RemoveFusedExpert => AblationFlags { fused: false, ..full },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::RemoveAdaptedGate => "remove_adapted_gate",
            AblationVariant::RemoveTimeGate => "remove_time_gate",
            AblationVariant::RemoveTrajGate => "remove_traj_gate",
            AblationVariant::RemoveMoeKeepFused => "remove_moe_keep_fused",
            AblationVariant::RemoveFusedExpert => "remove_fused_expert",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation variant {s:?}")))
    }
}

/// Which weights decide the per-slot top-1 share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareSource {
    /// The final mixture weights.
    #[default]
    Final,
    /// The time gate's output.
    TimeGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotShare {
    /// `None` aggregates every layer.
    pub layer: Option<usize>,
    pub tod: usize,
    pub count: usize,
    /// Share of positions where poi, pos, pop hold the top-1 weight.
    pub shares: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub layer: usize,
    pub component: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GateStats {
    pub slot_shares: Vec<SlotShare>,
    pub weight_summaries: Vec<WeightSummary>,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn top1(w: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if w[i] > w[best] {
            best = i;
        }
    }
    best
}

/// Per-slot top-1 shares (per layer and over all layers) and per-layer
/// summaries of each trajectory-gate component.
pub fn gate_stats(trace: &GateTrace, source: ShareSource) -> GateStats {
    let mut counts: BTreeMap<(Option<usize>, usize), [usize; 3]> = BTreeMap::new();
    let mut weights: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &trace.records {
        let w = match source {
            ShareSource::Final => Some(r.decision.w),
            ShareSource::TimeGate => r.decision.w_time,
        };
        if let Some(w) = w {
            let i = top1(&w);
            counts.entry((Some(r.layer), r.tod)).or_default()[i] += 1;
            counts.entry((None, r.tod)).or_default()[i] += 1;
        }
        if let Some(wt) = r.decision.w_traj {
            for (c, v) in wt.iter().enumerate() {
                weights.entry((r.layer, c)).or_default().push(*v);
            }
        }
    }
    let slot_shares = counts
        .into_iter()
        .map(|((layer, tod), c)| {
            let n: usize = c.iter().sum();
            SlotShare {
                layer,
                tod,
                count: n,
                shares: c.map(|k| k as f64 / n as f64),
            }
        })
        .collect();
    let weight_summaries = weights
        .into_iter()
        .map(|((layer, component), mut v)| {
            v.sort_by(f64::total_cmp);
            WeightSummary {
                layer,
                component,
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect();
    GateStats {
        slot_shares,
        weight_summaries,
    }
}

impl GateStats {
    pub fn slot_csv(&self) -> String {
        let mut s = String::from("layer,tod,count,share_poi,share_pos,share_pop\n");
        for r in &self.slot_shares {
            let layer = r.layer.map_or("all".to_string(), |l| l.to_string());
            s.push_str(&format!(
                "{layer},{},{},{},{},{}\n",
                r.tod, r.count, r.shares[0], r.shares[1], r.shares[2]
            ));
        }
        s
    }

    pub fn weight_csv(&self) -> String {
        let mut s = String::from("layer,component,count,mean,min,q1,median,q3,max\n");
        for w in &self.weight_summaries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                w.layer,
                crate::samoe::SPECIALIZED[w.component],
                w.count,
                w.mean,
                w.min,
                w.q1,
                w.median,
                w.q3,
                w.max
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gate_slot_shares.csv"), self.slot_csv())?;
        fs::write(dir.join("gate_weight_summary.csv"), self.weight_csv())?;
        Ok(())
    }
}

/// Gate records for every real position of `trajs`.
pub fn collect_trace<S: Scalar>(
    model: &TrajMoe<S>,
    city: &City,
    trajs: &[Trajectory],
    batch_size: usize,
) -> Result<GateTrace> {
    let mut out = GateTrace {
        layers: model.config.layers,
        records: Vec::new(),
    };
    for chunk in trajs.chunks(batch_size.max(1)) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let batch = make_batch(city, &refs)?;
        let (_, trace) = model.forward(&batch)?;
        out.extend(trace);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Overall,
    Scaling,
    Fewshot,
    Ablation,
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(Self::Overall),
            "scaling" => Ok(Self::Scaling),
            "fewshot" => Ok(Self::Fewshot),
            "ablation" => Ok(Self::Ablation),
            _ => Err(Error::config(format!("unknown experiment kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// City held out as the transfer target in scaling and few-shot runs.
    pub target_city: usize,
    pub finetune_epochs: usize,
    /// Fine-tune fraction used by the scaling grid.
    pub finetune_fraction: f64,
    pub fewshot_fractions: Vec<f64>,
    /// Share of each source city's training data used for pretraining; 0
    /// means no pretraining.
    pub scaling_volumes: Vec<f64>,
    pub variants: Vec<AblationVariant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            target_city: 0,
            finetune_epochs: 1,
            finetune_fraction: 0.05,
            fewshot_fractions: vec![0.01, 0.05, 0.10, 1.0],
            scaling_volumes: vec![0.0, 0.25, 0.5, 1.0],
            variants: AblationVariant::ALL.to_vec(),
        }
    }
}

/// One grid cell's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    /// Trajectories used to train the cell's final stage.
    pub train_trajectories: usize,
    pub report: EvalReport,
}

fn split_for(data: &[CitySplit], id: usize) -> Result<&CitySplit> {
    data.iter()
        .find(|c| c.city.id == id)
        .ok_or_else(|| Error::Empty(format!("no dataset for city {id}")))
}

/// A source city's split restricted to a seeded share of its training data.
fn shrink(c: &CitySplit, volume: f64, seed: u64) -> Result<CitySplit> {
    Ok(CitySplit {
        train: if volume >= 1.0 {
            c.train.clone()
        } else {
            c.subsample_train(volume, seed)?
        },
        ..c.clone()
    })
}

/// A fresh, untrained checkpoint for `cfg`.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    let model = TrajMoe::<f64>::new(cfg.model.clone(), cfg.seed)?;
    Ok(Checkpoint::from_model(&model, cfg, TrainMeta::default()))
}

/// Runs one experiment grid. All datasets and grid values are validated
/// before any training starts.
pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig, data: &[CitySplit]) -> Result<Vec<CellReport>> {
    cfg.train.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("experiment needs at least one city".into()));
    }
    let train = &cfg.train;
    let eval = |ck: &Checkpoint, c: &CitySplit| evaluate_checkpoint(ck, &c.city, &c.test);
    match kind {
        ExperimentKind::Overall => {
            let ck = pretrain_typed::<f64>(data, train)?;
            data.iter()
                .map(|c| {
                    Ok(CellReport {
                        cell: format!("overall/city{}", c.city.id),
                        train_trajectories: c.train.len(),
                        report: eval(&ck, c)?,
                    })
                })
                .collect()
        }
        ExperimentKind::Ablation => {
            let mut out = Vec::new();
            for &v in &cfg.variants {
                let vcfg = TrainConfig {
                    model: crate::model::ModelConfig {
                        ablation: v.flags(),
                        ..train.model.clone()
                    },
                    ..train.clone()
                };
                let ck = pretrain_typed::<f64>(data, &vcfg)?;
                for c in data {
                    out.push(CellReport {
                        cell: format!("ablation/{v}/city{}", c.city.id),
                        train_trajectories: c.train.len(),
                        report: eval(&ck, c)?,
                    });
                }
            }
            Ok(out)
        }
        ExperimentKind::Fewshot | ExperimentKind::Scaling => {
            let target = split_for(data, cfg.target_city)?;
            let sources: Vec<CitySplit> = data.iter().filter(|c| c.city.id != cfg.target_city).cloned().collect();
            let grid = if kind == ExperimentKind::Fewshot {
                &cfg.fewshot_fractions
            } else {
                &cfg.scaling_volumes
            };
            for &g in grid {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::config(format!("grid value {g} outside [0, 1]")));
                }
            }
            let needs_sources = kind == ExperimentKind::Fewshot || grid.iter().any(|&v| v > 0.0);
            if needs_sources && sources.is_empty() {
                return Err(Error::Empty("transfer experiments need at least one source city".into()));
            }
            if kind == ExperimentKind::Fewshot {
                for &f in grid {
                    target.subsample_train(f, train.seed)?;
                }
                let ck = pretrain_typed::<f64>(&sources, train)?;
                grid.iter()
                    .map(|&f| {
                        let tuned = finetune_typed::<f64>(&ck, target, f, cfg.finetune_epochs, train)?;
                        Ok(CellReport {
                            cell: format!("fewshot/{f}"),
                            train_trajectories: target.subsample_train(f, train.seed)?.len(),
                            report: eval(&tuned, target)?,
                        })
                    })
                    .collect()
            } else {
                let n = target.subsample_train(cfg.finetune_fraction, train.seed)?.len();
                for &v in grid.iter().filter(|&&v| v > 0.0 && v < 1.0) {
                    for s in &sources {
                        s.subsample_train(v, train.seed)?;
                    }
                }
                grid.iter()
                    .map(|&v| {
                        let base = if v == 0.0 {
                            initial_checkpoint(train)?
                        } else {
                            let shrunk = sources.iter().map(|s| shrink(s, v, train.seed)).collect::<Result<Vec<_>>>()?;
                            pretrain_typed::<f64>(&shrunk, train)?
                        };
                        let tuned = finetune_typed::<f64>(&base, target, cfg.finetune_fraction, cfg.finetune_epochs, train)?;
                        Ok(CellReport {
                            cell: format!("scaling/{v}"),
                            train_trajectories: n,
                            report: eval(&tuned, target)?,
                        })
                    })
                    .collect()
            }
        }
    }
}

pub fn reports_csv(reports: &[CellReport]) -> String {
    let mut s = String::from("cell,city_id,train_trajectories,samples,acc1,acc3,acc5,fingerprint\n");
    for c in reports {
        let r = &c.report;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.cell, r.city_id, c.train_trajectories, r.samples, r.acc1, r.acc3, r.acc5, r.fingerprint
        ));
    }
    s
}

/// Writes `reports.csv` and a JSON summary keyed by cell.
pub fn write_reports(dir: &Path, reports: &[CellReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("reports.csv"), reports_csv(reports))?;
    let summary: BTreeMap<&str, &EvalReport> = reports.iter().map(|c| (c.cell.as_str(), &c.report)).collect();
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("summary.json"), json)?;
    Ok(())
}
