//! One SAMoE layer: masked attention over the four streams, three
//! specialized experts, a shared expert on the fused stream, and the
//! spatial-temporal router that picks between the trajectory gate and the
//! time gate per position.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpec, SelectorMode, Tape, Var};
use crate::error::{Error, Result};
use crate::geo::affine;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Names of the three specialized streams, in gate-output order.
pub const SPECIALIZED: [&str; 3] = ["poi", "pos", "pop"];

/// Which parts of the mixture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub traj_gate: bool,
    pub time_gate: bool,
    /// The hard selector between the two gates. Requires both gates.
    pub adapted: bool,
    /// The three specialized experts.
    pub specialized: bool,
    /// The shared expert on the fused stream.
    pub fused: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            traj_gate: true,
            time_gate: true,
            adapted: true,
            specialized: true,
            fused: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.specialized && !self.fused {
            return Err(Error::config("removing the shared expert and the specialized experts leaves no expert"));
        }
        if self.specialized && !self.traj_gate && !self.time_gate {
            return Err(Error::config("specialized experts need at least one gate"));
        }
        if self.adapted && !(self.traj_gate && self.time_gate) {
            return Err(Error::config("the adapted router needs both gates"));
        }
        if !self.specialized && (self.traj_gate || self.time_gate || self.adapted) {
            return Err(Error::config("gates without specialized experts have nothing to weigh"));
        }
        Ok(())
    }

    pub fn has_router(&self) -> bool {
        self.specialized
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(&format!("{name}.w"), &[fan_in, fan_out], std, seed)?,
            b: store.add_const(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        affine(tape, store, x, self.w, self.b)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl AttentionParams {
    fn register<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize, std: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            q: Linear::register(store, &format!("{prefix}.q"), d, d, std, seed)?,
            k: Linear::register(store, &format!("{prefix}.k"), d, d, std, seed)?,
            v: Linear::register(store, &format!("{prefix}.v"), d, d, std, seed)?,
            o: Linear::register(store, &format!("{prefix}.o"), d, d, std, seed)?,
            ln_gain: store.add_const(&format!("{prefix}.ln.gain"), &[d], 1.0)?,
            ln_bias: store.add_const(&format!("{prefix}.ln.bias"), &[d], 0.0)?,
        })
    }

    /// `LN(x + O(attn(Qx, Kx, Vx)))`.
    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, spec: &AttentionSpec) -> Result<Var> {
        let q = self.q.apply(tape, store, x)?;
        let k = self.k.apply(tape, store, x)?;
        let v = self.v.apply(tape, store, x)?;
        let a = tape.attention(q, k, v, spec.clone())?;
        let o = self.o.apply(tape, store, a)?;
        let r = tape.add(x, o)?;
        let g = tape.param(store, self.ln_gain);
        let b = tape.param(store, self.ln_bias);
        tape.layer_norm(r, g, b)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(10);
        for l in [&self.q, &self.k, &self.v, &self.o] {
            ids.extend(l.ids());
        }
        ids.extend([self.ln_gain, self.ln_bias]);
        ids
    }
}

/// `x + W2 gelu(W1 x + b1) + b2` with hidden width `2d`.
#[derive(Debug, Clone, PartialEq)]
struct Expert {
    up: Linear,
    down: Linear,
}

impl Expert {
    fn register<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize, std: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            up: Linear::register(store, &format!("{prefix}.up"), d, 2 * d, std, seed)?,
            down: Linear::register(store, &format!("{prefix}.down"), 2 * d, d, std, seed)?,
        })
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, store, x)?;
        let h = tape.gelu(h);
        let h = self.down.apply(tape, store, h)?;
        tape.add(x, h)
    }

    fn ids(&self) -> Vec<ParamId> {
        self.up.ids().into_iter().chain(self.down.ids()).collect()
    }
}

/// Tape handles for the four streams at one depth, each `[batch*len, d]`.
#[derive(Debug, Clone, Copy)]
pub struct Streams {
    pub traj: Var,
    pub poi: Var,
    pub pos: Var,
    pub pop: Var,
}

impl Streams {
    fn specialized(&self) -> [Var; 3] {
        [self.poi, self.pos, self.pop]
    }
}

/// Router outputs of one layer as tape handles, `[batch*len, 3]` or
/// `[batch*len, 2]` for the scores. Absent parts are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoutingVars {
    pub w_traj: Option<Var>,
    pub w_time: Option<Var>,
    pub scores: Option<Var>,
    pub w: Option<Var>,
}

/// The router's decision at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub w_traj: Option<[f64; 3]>,
    pub w_time: Option<[f64; 3]>,
    pub s: Option<[f64; 2]>,
    /// True when the trajectory gate was selected.
    pub g: bool,
    pub w: [f64; 3],
}

impl RouterDecision {
    /// Index of the largest final weight, lowest index on ties.
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for i in 1..3 {
            if self.w[i] > self.w[best] {
                best = i;
            }
        }
        best
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SamoeLayer {
    pub index: usize,
    pub d: usize,
    pub heads: usize,
    pub flags: AblationFlags,
    /// Attention for traj, poi, pos, pop; a single entry when shared.
    attention: Vec<AttentionParams>,
    experts: Option<[Expert; 3]>,
    fused: Option<Expert>,
    traj_gate: Option<Linear>,
    time_gate: Option<Linear>,
    router: Option<Linear>,
}

impl SamoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        index: usize,
        d: usize,
        heads: usize,
        share_attention: bool,
        flags: AblationFlags,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        flags.validate()?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("head count {heads} does not divide model dimension {d}")));
        }
        let p = format!("layer{index}");
        let attention = if share_attention {
            vec![AttentionParams::register(store, &format!("{p}.attn.shared"), d, std, seed)?]
        } else {
            ["traj", "poi", "pos", "pop"]
                .iter()
                .map(|s| AttentionParams::register(store, &format!("{p}.attn.{s}"), d, std, seed))
                .collect::<Result<_>>()?
        };
        let experts = if flags.specialized {
            let mk = |store: &mut ParamStore<S>, s: &str| Expert::register(store, &format!("{p}.expert.{s}"), d, std, seed);
            Some([mk(store, "poi")?, mk(store, "pos")?, mk(store, "pop")?])
        } else {
            None
        };
        let fused = if flags.fused {
            Some(Expert::register(store, &format!("{p}.expert.fused"), d, std, seed)?)
        } else {
            None
        };
        let gate = |store: &mut ParamStore<S>, on: bool, name: &str, fan_in: usize, fan_out: usize| {
            on.then(|| Linear::register(store, &format!("{p}.{name}"), fan_in, fan_out, std, seed))
                .transpose()
        };
        Ok(Self {
            index,
            d,
            heads,
            flags,
            attention,
            experts,
            fused,
            traj_gate: gate(store, flags.traj_gate, "gate.traj", d, 3)?,
            time_gate: gate(store, flags.time_gate, "gate.time", d, 3)?,
            router: gate(store, flags.adapted, "router", 2 * d, 2)?,
        })
    }

    fn attn(&self, stream: usize) -> &AttentionParams {
        &self.attention[stream.min(self.attention.len() - 1)]
    }

    /// Masked attention over each stream. Foundational streams are skipped
    /// when the specialized experts are off, since nothing reads them.
    pub fn attend<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Streams,
        spec: &AttentionSpec,
    ) -> Result<Streams> {
        let traj = self.attn(0).apply(tape, store, h.traj, spec)?;
        if !self.flags.specialized {
            return Ok(Streams { traj, ..h });
        }
        Ok(Streams {
            traj,
            poi: self.attn(1).apply(tape, store, h.poi, spec)?,
            pos: self.attn(2).apply(tape, store, h.pos, spec)?,
            pop: self.attn(3).apply(tape, store, h.pop, spec)?,
        })
    }

    /// Gates and selector for every row of `h_traj` and `e_ts`.
    pub fn route<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h_traj: Var,
        e_ts: Var,
        selector: &SelectorMode<S>,
    ) -> Result<RoutingVars> {
        let mut r = RoutingVars::default();
        if let Some(g) = &self.traj_gate {
            let s = g.apply(tape, store, h_traj)?;
            r.w_traj = Some(tape.softmax_rows(s)?);
        }
        if let Some(g) = &self.time_gate {
            let s = g.apply(tape, store, e_ts)?;
            r.w_time = Some(tape.softmax_rows(s)?);
        }
        r.w = match (&self.router, r.w_traj, r.w_time) {
            (Some(router), Some(a), Some(b)) => {
                let both = tape.concat_cols(&[h_traj, e_ts])?;
                let scores = router.apply(tape, store, both)?;
                r.scores = Some(scores);
                Some(tape.select(a, b, scores, selector)?)
            }
            (None, Some(a), _) => Some(a),
            (None, None, Some(b)) => Some(b),
            _ => None,
        };
        Ok(r)
    }

    /// Experts and fusion on attended streams. Returns the next streams and
    /// the routing handles.
    pub fn block<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Streams,
        e_ts: Var,
        selector: &SelectorMode<S>,
    ) -> Result<(Streams, RoutingVars)> {
        let routing = self.route(tape, store, h.traj, e_ts, selector)?;
        let mut next = h;
        let mut fused = match &self.fused {
            Some(e) => Some(e.apply(tape, store, h.traj)?),
            None => None,
        };
        if let (Some(experts), Some(w)) = (&self.experts, routing.w) {
            let mut outs = [h.poi; 3];
            for (i, (e, x)) in experts.iter().zip(h.specialized()).enumerate() {
                outs[i] = e.apply(tape, store, x)?;
                let wi = tape.slice_col(w, i)?;
                let term = tape.mul_col(outs[i], wi)?;
                fused = Some(match fused {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            next.poi = outs[0];
            next.pos = outs[1];
            next.pop = outs[2];
        }
        next.traj = fused.ok_or_else(|| Error::config("layer has no expert"))?;
        Ok((next, routing))
    }

    /// Parameter handles by group, for accounting.
    pub fn attention_ids(&self) -> Vec<ParamId> {
        self.attention.iter().flat_map(AttentionParams::ids).collect()
    }

    pub fn expert_ids(&self) -> Vec<ParamId> {
        self.experts.iter().flatten().flat_map(Expert::ids).collect()
    }

    pub fn fused_ids(&self) -> Vec<ParamId> {
        self.fused.iter().flat_map(Expert::ids).collect()
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        [&self.traj_gate, &self.time_gate, &self.router]
            .into_iter()
            .flatten()
            .flat_map(Linear::ids)
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention_ids();
        ids.extend(self.expert_ids());
        ids.extend(self.fused_ids());
        ids.extend(self.gate_ids());
        ids
    }
}

/// Reads per-row decisions out of evaluated routing handles.
pub fn decisions<S: Scalar>(tape: &Tape<S>, r: &RoutingVars) -> Vec<Option<RouterDecision>> {
    let Some(w) = r.w else {
        return Vec::new();
    };
    let rows = tape.value(w).rows();
    let three = |v: Option<Var>, i: usize| {
        v.map(|v| {
            let row = tape.value(v).row(i);
            [row[0].to_f64_lossy(), row[1].to_f64_lossy(), row[2].to_f64_lossy()]
        })
    };
    (0..rows)
        .map(|i| {
            let s = r.scores.map(|v| {
                let row = tape.value(v).row(i);
                [row[0].to_f64_lossy(), row[1].to_f64_lossy()]
            });
            let w_traj = three(r.w_traj, i);
            Some(RouterDecision {
                g: match s {
                    Some([a, b]) => a >= b,
                    None => w_traj.is_some(),
                },
                w_traj,
                w_time: three(r.w_time, i),
                s,
                w: three(Some(w), i).expect("present"),
            })
        })
        .collect()
}

/// Routes a single position on a scratch tape.
pub fn star_route<S: Scalar>(
    layer: &SamoeLayer,
    store: &ParamStore<S>,
    h_traj: &[S],
    e_ts: &[S],
) -> Result<RouterDecision> {
    let d = layer.d;
    if h_traj.len() != d || e_ts.len() != d {
        return Err(Error::shape("star_route", &[h_traj.len()], &[e_ts.len()]));
    }
    let mut tape = Tape::new();
    let h = tape.leaf(crate::tensor::Tensor::new(vec![1, d], h_traj.to_vec())?);
    let e = tape.leaf(crate::tensor::Tensor::new(vec![1, d], e_ts.to_vec())?);
    let r = layer.route(&mut tape, store, h, e, &SelectorMode::Hard)?;
    decisions(&tape, &r)
        .pop()
        .flatten()
        .ok_or_else(|| Error::config("layer has no router"))
}
