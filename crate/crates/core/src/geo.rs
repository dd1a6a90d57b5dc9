//! Location featurization and the city-agnostic candidate encoder.
//!
//! A location is described by its POI counts, normalized coordinates and a
//! popularity bucket. Three embedding layers turn those into a single
//! location embedding; a Deep & Cross network then produces the candidate
//! matrix that next-location scores are taken against.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of popularity buckets (quintiles).
pub const RANK_BUCKETS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationFeatures {
    pub poi_counts: Vec<u32>,
    /// Normalized (lat, lon).
    pub coord: (f64, f64),
    /// 1-based popularity bucket, 1 = most popular.
    pub popularity_rank: usize,
}

/// `[n_1..n_c, p_1..p_c]` with `p_i = n_i / Σ n_j`, or all-zero proportions
/// for a cell without POIs.
pub fn poi_feature(counts: &[i64]) -> Result<Vec<f64>> {
    if let Some(&bad) = counts.iter().find(|&&n| n < 0) {
        return Err(Error::invalid(format!("negative POI count {bad}")));
    }
    let total: i64 = counts.iter().sum();
    let mut out: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    out.extend(counts.iter().map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 }));
    Ok(out)
}

pub(crate) fn poi_feature_u32(counts: &[u32]) -> Vec<f64> {
    let total: u64 = counts.iter().map(|&n| u64::from(n)).sum();
    let mut out: Vec<f64> = counts.iter().map(|&n| f64::from(n)).collect();
    out.extend(counts.iter().map(|&n| if total == 0 { 0.0 } else { f64::from(n) / total as f64 }));
    out
}

/// Standardizes each axis to mean 0 and population std 1. An axis with zero
/// spread maps to zeros.
pub fn normalize_coords(coords: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if coords.is_empty() {
        return Err(Error::Empty("city has no locations".into()));
    }
    let lat: Vec<f64> = coords.iter().map(|c| c.0).collect();
    let lon: Vec<f64> = coords.iter().map(|c| c.1).collect();
    let lat = standardize(&lat);
    let lon = standardize(&lon);
    Ok(lat.into_iter().zip(lon).collect())
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Quintile bucket per location: sort by flow descending (ties by id), then
/// position `p` (0-based) falls in bucket `k` when `ceil(N(k-1)/5) <= p < ceil(Nk/5)`.
pub fn popularity_rank(flows: &[f64]) -> Result<Vec<usize>> {
    if flows.is_empty() {
        return Err(Error::Empty("city has no locations".into()));
    }
    if let Some(bad) = flows.iter().find(|f| !(**f >= 0.0)) {
        return Err(Error::invalid(format!("flow must be non-negative, got {bad}")));
    }
    let n = flows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flows[b].total_cmp(&flows[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; n];
    let mut bucket = 1;
    for (pos, &loc) in order.iter().enumerate() {
        while pos >= (n * bucket).div_ceil(RANK_BUCKETS) {
            bucket += 1;
        }
        ranks[loc] = bucket;
    }
    Ok(ranks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMode {
    /// `e0 * (e_i · w) + b + e_i` with a weight vector `w`.
    #[default]
    Vector,
    /// `e0 ⊙ (e_i W + b) + e_i` with a weight matrix `W`.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoEncoderConfig {
    pub d: usize,
    pub categories: usize,
    pub cross_layers: usize,
    pub cross_mode: CrossMode,
}

/// Parameter handles for the location encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoEncoder {
    pub config: GeoEncoderConfig,
    poi_w: ParamId,
    poi_b: ParamId,
    coord_w: ParamId,
    coord_b: ParamId,
    rank_table: ParamId,
    cross: Vec<(ParamId, ParamId)>,
    deep_w1: ParamId,
    deep_b1: ParamId,
    deep_w2: ParamId,
    deep_b2: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl GeoEncoder {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        config: GeoEncoderConfig,
        seed: u64,
        std: f64,
    ) -> Result<Self> {
        let (d, c) = (config.d, config.categories);
        if d == 0 || c == 0 {
            return Err(Error::config("geo encoder needs d > 0 and at least one POI category"));
        }
        let mut cross = Vec::with_capacity(config.cross_layers);
        for i in 0..config.cross_layers {
            let w_shape: &[usize] = match config.cross_mode {
                CrossMode::Vector => &[d, 1],
                CrossMode::Matrix => &[d, d],
            };
            let w = store.add_normal(&format!("geo.cross{i}.w"), w_shape, std, seed)?;
            let b = store.add_const(&format!("geo.cross{i}.b"), &[d], 0.0)?;
            cross.push((w, b));
        }
        Ok(Self {
            poi_w: store.add_normal("geo.poi.w", &[2 * c, d], std, seed)?,
            poi_b: store.add_const("geo.poi.b", &[d], 0.0)?,
            coord_w: store.add_normal("geo.coord.w", &[2, d], std, seed)?,
            coord_b: store.add_const("geo.coord.b", &[d], 0.0)?,
            rank_table: store.add_normal("geo.rank", &[RANK_BUCKETS, d], std, seed)?,
            cross,
            deep_w1: store.add_normal("geo.deep.w1", &[d, 2 * d], std, seed)?,
            deep_b1: store.add_const("geo.deep.b1", &[2 * d], 0.0)?,
            deep_w2: store.add_normal("geo.deep.w2", &[2 * d, d], std, seed)?,
            deep_b2: store.add_const("geo.deep.b2", &[d], 0.0)?,
            out_w: store.add_normal("geo.out.w", &[2 * d, d], std, seed)?,
            out_b: store.add_const("geo.out.b", &[d], 0.0)?,
            config,
        })
    }

    /// `E_l = E_p + E_g + E_r` for every location, as an `[N, d]` node.
    pub fn embed_var<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        feats: &[LocationFeatures],
    ) -> Result<Var> {
        let c = self.config.categories;
        let n = feats.len();
        if n == 0 {
            return Err(Error::Empty("no locations to encode".into()));
        }
        let mut poi = Vec::with_capacity(n * 2 * c);
        let mut coords = Vec::with_capacity(n * 2);
        let mut ranks = Vec::with_capacity(n);
        for f in feats {
            if f.poi_counts.len() != c {
                return Err(Error::shape("embed_location", &[c], &[f.poi_counts.len()]));
            }
            if f.popularity_rank == 0 || f.popularity_rank > RANK_BUCKETS {
                return Err(Error::invalid(format!(
                    "popularity rank {} outside [1, {RANK_BUCKETS}]",
                    f.popularity_rank
                )));
            }
            poi.extend(poi_feature_u32(&f.poi_counts).into_iter().map(S::lit));
            coords.push(S::lit(f.coord.0));
            coords.push(S::lit(f.coord.1));
            ranks.push(Some(f.popularity_rank - 1));
        }
        let poi = tape.leaf(Tensor::new(vec![n, 2 * c], poi)?);
        let coords = tape.leaf(Tensor::new(vec![n, 2], coords)?);
        let e_p = affine(tape, store, poi, self.poi_w, self.poi_b)?;
        let e_g = affine(tape, store, coords, self.coord_w, self.coord_b)?;
        let table = tape.param(store, self.rank_table);
        let e_r = tape.gather(table, ranks)?;
        let sum = tape.add(e_p, e_g)?;
        tape.add(sum, e_r)
    }

    /// Candidate matrix `L` (`[N, d]`), rows in the order of `feats`.
    pub fn candidates_var<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        feats: &[LocationFeatures],
    ) -> Result<Var> {
        let e0 = self.embed_var(tape, store, feats)?;
        let mut e = e0;
        for &(w, b) in &self.cross {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            e = cross_var(tape, e0, e, wv, bv, self.config.cross_mode)?;
        }
        let hidden = affine(tape, store, e0, self.deep_w1, self.deep_b1)?;
        let hidden = tape.gelu(hidden);
        let deep = affine(tape, store, hidden, self.deep_w2, self.deep_b2)?;
        let both = tape.concat_cols(&[e, deep])?;
        affine(tape, store, both, self.out_w, self.out_b)
    }

    pub fn embed_location<S: Scalar>(&self, store: &ParamStore<S>, f: &LocationFeatures) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let v = self.embed_var(&mut tape, store, std::slice::from_ref(f))?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn encode_candidates<S: Scalar>(&self, store: &ParamStore<S>, feats: &[LocationFeatures]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = self.candidates_var(&mut tape, store, feats)?;
        Ok(tape.value(v).clone())
    }

    /// Parameter handles in registration order, for tests and accounting.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.poi_w, self.poi_b, self.coord_w, self.coord_b, self.rank_table];
        for &(w, b) in &self.cross {
            ids.push(w);
            ids.push(b);
        }
        ids.extend([
            self.deep_w1,
            self.deep_b1,
            self.deep_w2,
            self.deep_b2,
            self.out_w,
            self.out_b,
        ]);
        ids
    }
}

pub(crate) fn affine<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let h = tape.matmul(x, wv)?;
    tape.add_row(h, bv)
}

pub(crate) fn cross_var<S: Scalar>(
    tape: &mut Tape<S>,
    e0: Var,
    ei: Var,
    w: Var,
    b: Var,
    mode: CrossMode,
) -> Result<Var> {
    match mode {
        CrossMode::Vector => {
            let gate = tape.matmul(ei, w)?;
            let scaled = tape.mul_col(e0, gate)?;
            let biased = tape.add_row(scaled, b)?;
            tape.add(biased, ei)
        }
        CrossMode::Matrix => {
            let proj = tape.matmul(ei, w)?;
            let proj = tape.add_row(proj, b)?;
            let inter = tape.mul(e0, proj)?;
            tape.add(inter, ei)
        }
    }
}

/// One scalar-gate cross layer on plain vectors:
/// `e0 * (e_i · w) + b + e_i`.
pub fn cross_layer<S: Scalar>(e0: &[S], ei: &[S], w: &[S], b: &[S]) -> Result<Vec<S>> {
    let d = e0.len();
    if ei.len() != d || w.len() != d || b.len() != d {
        return Err(Error::shape("cross_layer", &[d], &[ei.len(), w.len(), b.len()]));
    }
    let mut tape = Tape::new();
    let e0v = tape.leaf(Tensor::new(vec![1, d], e0.to_vec())?);
    let eiv = tape.leaf(Tensor::new(vec![1, d], ei.to_vec())?);
    let wv = tape.leaf(Tensor::new(vec![d, 1], w.to_vec())?);
    let bv = tape.leaf(Tensor::new(vec![d], b.to_vec())?);
    let out = cross_var(&mut tape, e0v, eiv, wv, bv, CrossMode::Vector)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poi_feature_examples() {
        assert_eq!(poi_feature(&[2, 1, 1]).unwrap(), vec![2.0, 1.0, 1.0, 0.5, 0.25, 0.25]);
        assert_eq!(poi_feature(&[0, 0, 0]).unwrap(), vec![0.0; 6]);
        assert_eq!(poi_feature(&[0, 5]).unwrap(), vec![0.0, 5.0, 0.0, 1.0]);
        assert!(poi_feature(&[1, -1]).is_err());
    }

    #[test]
    fn normalize_coords_examples() {
        assert_eq!(
            normalize_coords(&[(0.0, 0.0), (2.0, 2.0)]).unwrap(),
            vec![(-1.0, -1.0), (1.0, 1.0)]
        );
        assert_eq!(normalize_coords(&[(33.7, -84.4)]).unwrap(), vec![(0.0, 0.0)]);
        assert!(normalize_coords(&[]).is_err());
    }

    #[test]
    fn normalize_coords_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(40.0..41.0), rng.gen_range(-74.5..-73.5)))
            .collect();
        let out = normalize_coords(&pts).unwrap();
        for axis in 0..2 {
            let xs: Vec<f64> = out.iter().map(|p| if axis == 0 { p.0 } else { p.1 }).collect();
            let mean = xs.iter().sum::<f64>() / 100.0;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
            assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
        }
    }

    /// Sort-and-cut oracle: the k-th fifth of the descending order.
    fn rank_oracle(flows: &[f64]) -> Vec<usize> {
        let n = flows.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| flows[b].partial_cmp(&flows[a]).unwrap().then(a.cmp(&b)));
        let mut out = vec![0; n];
        for (pos, &loc) in order.iter().enumerate() {
            out[loc] = (1..=5).find(|&k| pos < (n * k + 4) / 5).unwrap();
        }
        out
    }

    #[test]
    fn popularity_rank_examples() {
        assert_eq!(popularity_rank(&[50.0, 40.0, 30.0, 20.0, 10.0]).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(popularity_rank(&[7.0; 5]).unwrap(), vec![1, 2, 3, 4, 5]);
        let flows: Vec<f64> = (0..10).map(|i| 100.0 - i as f64).collect();
        let ranks = popularity_rank(&flows).unwrap();
        assert_eq!(ranks, rank_oracle(&flows));
        for b in 1..=5 {
            assert_eq!(ranks.iter().filter(|&&r| r == b).count(), 2);
        }
        assert!(popularity_rank(&[1.0, -0.5]).is_err());
        assert!(popularity_rank(&[]).is_err());
    }

    #[test]
    fn popularity_rank_random_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 1..40 {
            let flows: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0u32..6))).collect();
            assert_eq!(popularity_rank(&flows).unwrap(), rank_oracle(&flows));
        }
    }

    #[test]
    fn cross_layer_examples() {
        let out = cross_layer(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 1.0]);
        let ei = [0.3, -2.0, 5.0];
        let out = cross_layer(&[1.0, 2.0, 3.0], &ei, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(out, ei.to_vec());
        assert!(cross_layer(&[1.0], &[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn cross_layer_outer_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = || -> Vec<f64> { (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (e0, ei, w, b) = (v(), v(), v(), v());
        let got = cross_layer(&e0, &ei, &w, &b).unwrap();
        // (e0 eiᵀ) w contracted explicitly
        for r in 0..4 {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += e0[r] * ei[c] * w[c];
            }
            assert!((got[r] - (acc + b[r] + ei[r])).abs() < 1e-12);
        }
    }
}
