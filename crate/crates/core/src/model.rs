//! The full next-location model: stream embeddings, a stack of SAMoE layers,
//! the city's candidate matrix, and dot-product scoring.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, AttentionSpec, SelectorMode, Tape, Var};
use crate::error::{Error, Result};
use crate::geo::{CrossMode, GeoEncoder, GeoEncoderConfig};
use crate::params::ParamStore;
use crate::samoe::{decisions, AblationFlags, RouterDecision, RoutingVars, SamoeLayer, Streams};
use crate::scalar::Scalar;
use crate::synth::City;
use crate::tensor::Tensor;
use crate::traj::{PaddedBatch, StreamEmbedder, StreamVars};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub categories: usize,
    pub cross_layers: usize,
    pub cross_mode: CrossMode,
    pub max_len: usize,
    pub share_attention: bool,
    pub init_std: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            categories: 8,
            cross_layers: 2,
            cross_mode: CrossMode::Vector,
            max_len: 32,
            share_attention: false,
            init_std: 0.02,
            ablation: AblationFlags::full(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(Error::config("d, layers and max_len must be positive"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "head count {} does not divide model dimension {}",
                self.heads, self.d
            )));
        }
        self.ablation.validate()
    }
}

/// Router decision at one real position of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layer: usize,
    pub row: usize,
    pub position: usize,
    pub tod: usize,
    pub decision: RouterDecision,
}

/// Every router decision of a forward pass over real positions. Empty when
/// the model has no router.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GateTrace {
    pub layers: usize,
    pub records: Vec<GateRecord>,
}

impl GateTrace {
    pub fn extend(&mut self, other: GateTrace) {
        self.layers = self.layers.max(other.layers);
        self.records.extend(other.records);
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Final fused stream, `[batch*len, d]`.
    pub h: Var,
    pub embeddings: StreamVars,
    pub routing: Vec<RoutingVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajMoe<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    geo: GeoEncoder,
    embed: StreamEmbedder,
    layers: Vec<SamoeLayer>,
}

impl<S: Scalar> TrajMoe<S> {
    /// Fresh model with N(0, init_std²) weights, zero biases and unit norm
    /// gains. Each parameter's values depend only on `(seed, name)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let std = config.init_std;
        let embed = StreamEmbedder::register(&mut store, config.d, config.categories, seed, std)?;
        let geo = GeoEncoder::register(
            &mut store,
            GeoEncoderConfig {
                d: config.d,
                categories: config.categories,
                cross_layers: config.cross_layers,
                cross_mode: config.cross_mode,
            },
            seed,
            std,
        )?;
        let layers = (0..config.layers)
            .map(|i| {
                SamoeLayer::register(
                    &mut store,
                    i,
                    config.d,
                    config.heads,
                    config.share_attention,
                    config.ablation,
                    std,
                    seed,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            store,
            geo,
            embed,
            layers,
        })
    }

    /// Rebuilds the structure for `config` and takes every value from
    /// `store`, which must hold exactly the expected names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        if model.store.load_matching(&store) != model.store.len() {
            return Err(Error::config("checkpoint parameters do not match the model configuration"));
        }
        Ok(model)
    }

    pub fn geo(&self) -> &GeoEncoder {
        &self.geo
    }

    pub fn embedder(&self) -> &StreamEmbedder {
        &self.embed
    }

    pub fn layers(&self) -> &[SamoeLayer] {
        &self.layers
    }

    fn check_batch(&self, batch: &PaddedBatch) -> Result<()> {
        if batch.categories != self.config.categories {
            return Err(Error::shape(
                "batch categories",
                &[self.config.categories],
                &[batch.categories],
            ));
        }
        if batch.len > self.config.max_len {
            return Err(Error::invalid(format!(
                "batch length {} exceeds max_len {}",
                batch.len, self.config.max_len
            )));
        }
        Ok(())
    }

    /// Embeds the batch and runs every layer. `selectors` gives one mode
    /// per layer; `None` means hard selection everywhere.
    pub fn forward_vars(
        &self,
        tape: &mut Tape<S>,
        batch: &PaddedBatch,
        selectors: Option<&[SelectorMode<S>]>,
    ) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        if let Some(s) = selectors {
            if s.len() != self.layers.len() {
                return Err(Error::shape("selectors", &[self.layers.len()], &[s.len()]));
            }
        }
        let e = self.embed.embed_vars(tape, &self.store, batch)?;
        let spec = AttentionSpec {
            batch: batch.batch,
            len: batch.len,
            heads: self.config.heads,
            key_valid: batch.padding_mask.clone(),
        };
        let mut h = Streams {
            traj: tape.add(e.traj, e.ts)?,
            poi: tape.add(e.poi, e.ts)?,
            pos: tape.add(e.pos, e.ts)?,
            pop: tape.add(e.pop, e.ts)?,
        };
        let mut routing = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mode = selectors.map_or(&SelectorMode::Hard, |s| &s[i]);
            let attended = layer.attend(tape, &self.store, h, &spec)?;
            let (next, r) = layer.block(tape, &self.store, attended, e.ts, mode)?;
            h = next;
            routing.push(r);
        }
        Ok(ForwardVars {
            h: h.traj,
            embeddings: e,
            routing,
        })
    }

    /// Candidate matrix `L` for every location of `city`, `[N, d]`.
    pub fn candidates_var(&self, tape: &mut Tape<S>, city: &City) -> Result<Var> {
        if city.categories != self.config.categories {
            return Err(Error::shape("city categories", &[self.config.categories], &[city.categories]));
        }
        self.geo.candidates_var(tape, &self.store, &city.all_features())
    }

    /// `[batch*len, N]` scores of every position against the city's
    /// candidates.
    pub fn logits_var(
        &self,
        tape: &mut Tape<S>,
        batch: &PaddedBatch,
        city: &City,
        selectors: Option<&[SelectorMode<S>]>,
    ) -> Result<(Var, ForwardVars)> {
        if batch.city_id != city.id {
            return Err(Error::invalid(format!(
                "batch of city {} scored against city {}",
                batch.city_id, city.id
            )));
        }
        let fv = self.forward_vars(tape, batch, selectors)?;
        let cands = self.candidates_var(tape, city)?;
        let ct = tape.transpose(cands)?;
        Ok((tape.matmul(fv.h, ct)?, fv))
    }

    /// Final fused stream as `[batch, len, d]` plus the gate trace.
    pub fn forward(&self, batch: &PaddedBatch) -> Result<(Tensor<S>, GateTrace)> {
        let mut tape = Tape::new();
        let fv = self.forward_vars(&mut tape, batch, None)?;
        let h = tape.value(fv.h).clone().reshape(&[batch.batch, batch.len, self.config.d])?;
        Ok((h, trace(&tape, &fv, batch)))
    }

    /// Scores as `[batch, len, N]` plus the gate trace.
    pub fn logits(&self, batch: &PaddedBatch, city: &City) -> Result<(Tensor<S>, GateTrace)> {
        let mut tape = Tape::new();
        let (logits, fv) = self.logits_var(&mut tape, batch, city, None)?;
        let out = tape.value(logits).clone().reshape(&[batch.batch, batch.len, city.len()])?;
        Ok((out, trace(&tape, &fv, batch)))
    }

    /// Mean cross-entropy over the given targets and its gradient for every
    /// parameter.
    pub fn loss_and_grads(
        &self,
        batch: &PaddedBatch,
        city: &City,
        targets: Vec<Option<usize>>,
    ) -> Result<(S, Vec<Tensor<S>>)> {
        let mut tape = Tape::new();
        let (logits, _) = self.logits_var(&mut tape, batch, city, None)?;
        let loss = tape.cross_entropy(logits, targets)?;
        let grads = tape.backward(loss, &self.store)?;
        Ok((tape.value(loss).item()?, grads))
    }

    pub fn loss(&self, batch: &PaddedBatch, city: &City, targets: Vec<Option<usize>>) -> Result<S> {
        let mut tape = Tape::new();
        let (logits, _) = self.logits_var(&mut tape, batch, city, None)?;
        let loss = tape.cross_entropy(logits, targets)?;
        tape.value(loss).item()
    }
}

/// Worst agreement between tape gradients and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares every parameter's tape gradient of the cross-entropy loss with
/// central differences of step `h`. The hard selector is replaced by its
/// anchored form so the loss is differentiable at the evaluation point and
/// equal to the hard loss there. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &TrajMoe<f64>,
    batch: &PaddedBatch,
    city: &City,
    targets: &[Option<usize>],
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let (logits, fv) = model.logits_var(&mut tape, batch, city, None)?;
    let anchors = selector_anchors(&tape, &fv);
    let hard_loss = tape.cross_entropy(logits, targets.to_vec())?;
    let hard_value = tape.value(hard_loss).item()?;

    let mut tape = Tape::new();
    let (logits, _) = model.logits_var(&mut tape, batch, city, Some(&anchors))?;
    let loss = tape.cross_entropy(logits, targets.to_vec())?;
    if tape.value(loss).item()? != hard_value {
        return Err(Error::invalid("anchored loss differs from the hard loss"));
    }
    let grads = tape.backward(loss, &model.store)?;

    let mut probe = model.clone();
    let eval = |m: &TrajMoe<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = m.logits_var(&mut t, batch, city, Some(&anchors))?;
        let loss = t.cross_entropy(l, targets.to_vec())?;
        t.value(loss).item()
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for j in 0..model.store.get(id).numel() {
            let base = model.store.get(id).data()[j];
            probe.store.get_mut(id).data_mut()[j] = base + h;
            let up = eval(&probe)?;
            probe.store.get_mut(id).data_mut()[j] = base - h;
            let down = eval(&probe)?;
            probe.store.get_mut(id).data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.index()].data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst_param = format!("{}[{j}]", model.store.name(id));
            }
        }
    }
    Ok(out)
}

/// Per-layer anchors `sigmoid(s1 - s2)` from an evaluated forward pass.
/// Feeding them back as [`SelectorMode::Anchored`] reproduces the hard
/// forward at this point while keeping the selector differentiable.
pub fn selector_anchors<S: Scalar>(tape: &Tape<S>, fv: &ForwardVars) -> Vec<SelectorMode<S>> {
    fv.routing
        .iter()
        .map(|r| match r.scores {
            Some(s) => {
                let v = tape.value(s);
                SelectorMode::Anchored((0..v.rows()).map(|i| sigmoid(v.row(i)[0] - v.row(i)[1])).collect())
            }
            None => SelectorMode::Hard,
        })
        .collect()
}

/// Gate records for the real positions of `batch`.
pub fn trace<S: Scalar>(tape: &Tape<S>, fv: &ForwardVars, batch: &PaddedBatch) -> GateTrace {
    let mut out = GateTrace {
        layers: fv.routing.len(),
        records: Vec::new(),
    };
    for (layer, r) in fv.routing.iter().enumerate() {
        for (p, d) in decisions(tape, r).into_iter().enumerate() {
            let Some(decision) = d else { continue };
            if !batch.padding_mask[p] {
                continue;
            }
            out.records.push(GateRecord {
                layer,
                row: p / batch.len,
                position: p % batch.len,
                tod: batch.tod[p],
                decision,
            });
        }
    }
    out
}

/// Dot-product scores of every row of `h` (`[.., d]`) against every row of
/// `candidates` (`[N, d]`); the output keeps `h`'s leading dimensions.
pub fn predict_logits<S: Scalar>(h: &Tensor<S>, candidates: &Tensor<S>) -> Result<Tensor<S>> {
    if h.rank() == 0 || candidates.rank() != 2 || h.cols() != candidates.cols() {
        return Err(Error::shape("predict_logits", h.shape(), candidates.shape()));
    }
    let flat = h.clone().reshape(&[h.rows(), h.cols()])?;
    let out = flat.matmul(&candidates.transpose()?)?;
    let mut shape = h.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = candidates.rows();
    out.reshape(&shape)
}

/// Mean negative log-probability of the targets over rows that have one.
pub fn ce_loss<S: Scalar>(logits: &Tensor<S>, targets: &[Option<usize>]) -> Result<S> {
    let mut tape = Tape::new();
    let flat = logits.clone().reshape(&[logits.rows(), logits.cols()])?;
    let l = tape.leaf(flat);
    let loss = tape.cross_entropy(l, targets.to_vec())?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Location;
    use crate::traj::{pad_batch, Step, Trajectory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_city(c: usize, n: usize, seed: u64) -> City {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs = (0..n)
            .map(|id| Location {
                id,
                poi_counts: (0..c).map(|_| rng.gen_range(0..5)).collect(),
                lat: rng.gen_range(0.0..1.0),
                lon: rng.gen_range(0.0..1.0),
                flow: rng.gen_range(0.0..100.0),
            })
            .collect();
        City::new(0, c, locs).unwrap()
    }

    fn traj(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Trajectory {
        let mut t = 1_704_067_200 + rng.gen_range(0..86_400);
        let steps = (0..len)
            .map(|_| {
                t += rng.gen_range(600..20_000);
                Step {
                    location: rng.gen_range(0..n),
                    time: t,
                }
            })
            .collect();
        Trajectory::new(1, 0, steps).unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            categories: 3,
            max_len: 4,
            init_std: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(matches!(TrajMoe::<f64>::new(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn predict_logits_examples() {
        let h: Tensor<f64> = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let cands = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 3.0]]).unwrap();
        let l = predict_logits(&h, &cands).unwrap();
        assert_eq!(l.data(), &[0.0, 0.0, 0.0]);
        let p = l.softmax(1).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let big = Tensor::from_rows(&[vec![50.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = predict_logits(&h, &big).unwrap().softmax(1).unwrap();
        assert!(p.data()[0] > 1.0 - 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let l = predict_logits(&h, &c).unwrap();
        assert_eq!(l.shape(), &[2, 3, 5]);
        for r in 0..6 {
            for n in 0..5 {
                let want: f64 = (0..4).map(|k| h.row(r)[k] * c.row(n)[k]).sum();
                assert!((l.row(r)[n] - want).abs() < 1e-12);
            }
        }
        assert!(predict_logits(&h, &Tensor::zeros(&[5, 3])).is_err());
    }

    #[test]
    fn ce_loss_examples() {
        let perfect = Tensor::from_rows(&[vec![0.0, 1e6, 0.0]]).unwrap();
        assert_eq!(ce_loss(&perfect, &[Some(1)]).unwrap(), 0.0);
        let uniform = Tensor::from_rows(&[vec![2.0; 7], vec![-1.0; 7]]).unwrap();
        assert!((ce_loss(&uniform, &[Some(3), Some(0)]).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&uniform, &[None, None]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let targets = [Some(2), None, Some(5), Some(0)];
        let mut total = 0.0;
        for (r, t) in rows.iter().zip(&targets) {
            if let Some(t) = t {
                // log-softmax with an independent max shift
                let m = r.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - r[*t];
            }
        }
        let got = ce_loss(&Tensor::from_rows(&rows).unwrap(), &targets).unwrap();
        assert!((got - total / 3.0).abs() < 1e-10);
    }

    #[test]
    fn trace_counts_layers_times_real_positions() {
        let city = tiny_city(3, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig {
            layers: 2,
            ..tiny_config()
        };
        let model = TrajMoe::<f64>::new(cfg, 3).unwrap();
        let (a, b) = (traj(&mut rng, 2, 5), traj(&mut rng, 4, 5));
        let batch = pad_batch(&city, &[&a, &b], 4).unwrap();
        let (h, trace) = model.forward(&batch).unwrap();
        assert_eq!(h.shape(), &[2, 4, 8]);
        assert_eq!(trace.records.len(), 2 * 6);
        for r in &trace.records {
            let w = if r.decision.g { r.decision.w_traj } else { r.decision.w_time };
            assert_eq!(Some(r.decision.w), w);
        }
    }

    #[test]
    fn from_store_round_trips_and_rejects_mismatch() {
        let model = TrajMoe::<f64>::new(tiny_config(), 4).unwrap();
        let back = TrajMoe::from_store(tiny_config(), model.store.clone()).unwrap();
        assert_eq!(back, model);
        let other = ModelConfig {
            d: 4,
            ..tiny_config()
        };
        assert!(TrajMoe::from_store(other, model.store.clone()).is_err());
    }

    #[test]
    fn shared_names_get_identical_initial_values() {
        let a = TrajMoe::<f64>::new(tiny_config(), 7).unwrap();
        let flags = AblationFlags {
            fused: false,
            ..AblationFlags::full()
        };
        let b = TrajMoe::<f64>::new(
            ModelConfig {
                ablation: flags,
                ..tiny_config()
            },
            7,
        )
        .unwrap();
        for (name, t) in b.store.iter() {
            assert_eq!(a.store.get(a.store.id(name).unwrap()), t, "{name}");
        }
    }

    fn lin(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let k = b.numel();
        (0..k)
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * k + j]).sum::<f64>())
            .collect()
    }

    fn gelu(z: f64) -> f64 {
        0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
    }

    #[test]
    fn single_step_matches_hand_unrolled_oracle() {
        let c = 3;
        let city = tiny_city(c, 5, 11);
        let model = TrajMoe::<f64>::new(tiny_config(), 12).unwrap();
        let st = &model.store;
        let p = |n: &str| st.get(st.id(n).unwrap()).clone();
        let t = Trajectory::new(
            0,
            0,
            vec![
                Step {
                    location: 3,
                    time: 1_704_069_000,
                },
                Step {
                    location: 1,
                    time: 1_704_080_000,
                },
            ],
        )
        .unwrap();
        let mut batch = pad_batch(&city, &[&t], 2).unwrap();
        // keep only the first step so the layer sees a single token
        batch.len = 1;
        batch.poi.truncate(2 * c);
        batch.coords.truncate(2);
        for v in [&mut batch.ranks, &mut batch.tod, &mut batch.dow, &mut batch.stay, &mut batch.location_ids, &mut batch.targets] {
            v.truncate(1);
        }
        batch.padding_mask.truncate(1);
        batch.valid_target.truncate(1);
        let (h, _) = model.forward(&batch).unwrap();

        let f = city.features(3).unwrap();
        let n: f64 = f.poi_counts.iter().map(|&v| f64::from(v)).sum();
        let poi: Vec<f64> = f
            .poi_counts
            .iter()
            .map(|&v| f64::from(v))
            .chain(f.poi_counts.iter().map(|&v| f64::from(v) / n))
            .collect();
        let e_poi = lin(&poi, &p("emb.poi.w"), &p("emb.poi.b"));
        let e_pos = lin(&[f.coord.0, f.coord.1], &p("emb.coord.w"), &p("emb.coord.b"));
        let row = |t: &Tensor<f64>, i: usize| t.row(i).to_vec();
        let e_pop = row(&p("emb.rank"), f.popularity_rank - 1);
        let e_ts: Vec<f64> = (0..8)
            .map(|j| {
                p("emb.tod").row(batch.tod[0])[j] + p("emb.dow").row(batch.dow[0])[j] + p("emb.stay").row(batch.stay[0])[j]
            })
            .collect();
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
        let e_traj = add(&add(&e_poi, &e_pos), &e_pop);
        let attend = |x: &[f64], s: &str| {
            let pre = format!("layer0.attn.{s}");
            let v = lin(x, &p(&format!("{pre}.v.w")), &p(&format!("{pre}.v.b")));
            let o = lin(&v, &p(&format!("{pre}.o.w")), &p(&format!("{pre}.o.b")));
            let r = add(x, &o);
            let m = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m) / (var + 1e-5).sqrt()).collect::<Vec<f64>>()
        };
        let expert = |x: &[f64], s: &str| {
            let pre = format!("layer0.expert.{s}");
            let hdn: Vec<f64> = lin(x, &p(&format!("{pre}.up.w")), &p(&format!("{pre}.up.b")))
                .into_iter()
                .map(gelu)
                .collect();
            add(x, &lin(&hdn, &p(&format!("{pre}.down.w")), &p(&format!("{pre}.down.b"))))
        };
        let softmax = |z: Vec<f64>| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let a_traj = attend(&add(&e_traj, &e_ts), "traj");
        let w_traj = softmax(lin(&a_traj, &p("layer0.gate.traj.w"), &p("layer0.gate.traj.b")));
        let w_time = softmax(lin(&e_ts, &p("layer0.gate.time.w"), &p("layer0.gate.time.b")));
        let cat: Vec<f64> = a_traj.iter().chain(&e_ts).copied().collect();
        let s = lin(&cat, &p("layer0.router.w"), &p("layer0.router.b"));
        let w = if s[0] >= s[1] { w_traj } else { w_time };
        let mut want = expert(&a_traj, "fused");
        for (i, (name, e)) in [("poi", &e_poi), ("pos", &e_pos), ("pop", &e_pop)].into_iter().enumerate() {
            let out = expert(&attend(&add(e, &e_ts), name), name);
            for j in 0..8 {
                want[j] += w[i] * out[j];
            }
        }
        for j in 0..8 {
            assert!((h.data()[j] - want[j]).abs() < 1e-10, "{j}: {} vs {}", h.data()[j], want[j]);
        }
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        for seed in 0..3 {
            let city = tiny_city(3, 5, 21 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(22 + seed);
            let model = TrajMoe::<f64>::new(tiny_config(), 23 + seed).unwrap();
            let (a, b) = (traj(&mut rng, 4, 5), traj(&mut rng, 3, 5));
            let batch = pad_batch(&city, &[&a, &b], 4).unwrap();
            let check = gradient_check(&model, &batch, &city, &batch.target_options(), 1e-5, 1e-5).unwrap();
            assert_eq!(check.checked, model.store.numel());
            eprintln!("{check:?}");
            assert!(check.max_rel_error < 1e-4, "{check:?}");
        }
    }
}
