//! Primitive and container embedding networks, and the recurrent cells they
//! are built from.
//!
//! Every embedder maps an element (given the latents of its children, for
//! containers) to an m-dimensional [`Latent`]. Primitives always carry a zero
//! memory cell; the LSTM-based containers thread (c, h) pairs.

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::params::{GroupId, Init, ParameterStore, SlotSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Latent state of an embedded element: hidden vector and memory cell, both
/// m-dimensional. Primitive embedders set `c` to zero.
#[derive(Debug, Clone, Copy)]
pub struct Latent {
    pub c: NodeId,
    pub h: NodeId,
}

/// Tape plus read-only parameters, threaded through one example's forward pass.
pub struct EmbedCtx<'a> {
    pub store: &'a ParameterStore,
    pub tape: &'a mut Tape,
}

impl<'a> EmbedCtx<'a> {
    pub fn new(store: &'a ParameterStore, tape: &'a mut Tape) -> Self {
        EmbedCtx { store, tape }
    }

    /// Insert (or reuse) the tape leaf for a stored parameter tensor.
    pub fn param(&mut self, group: GroupId, slot: u32) -> NodeId {
        let key = crate::autodiff::ParamKey { group: group.0, slot };
        let value = Arc::clone(self.store.tensor(key));
        self.tape.leaf_param(key, value)
    }

    pub fn zero_latent(&mut self, m: usize) -> Latent {
        let z = self.tape.zeros(m);
        Latent { c: z, h: z }
    }
}

// ---------------------------------------------------------------------------
// Group slot layouts
// ---------------------------------------------------------------------------

/// LSTM parameter slots, in fixed creation order:
/// wi wf wo wu (m×input), vi vf vo vu (m×m), bi bf bo bu (m×1).
pub fn lstm_spec(m: usize, input: usize) -> Vec<SlotSpec> {
    let mut out = Vec::with_capacity(12);
    for name in ["wi", "wf", "wo", "wu"] {
        out.push(SlotSpec::new(name, m, input, Init::Xavier));
    }
    for name in ["vi", "vf", "vo", "vu"] {
        out.push(SlotSpec::new(name, m, m, Init::Xavier));
    }
    for name in ["bi", "bf", "bo", "bu"] {
        out.push(SlotSpec::new(name, m, 1, Init::Zero));
    }
    out
}

/// SumLSTM slots: vi vf vo vu (m×m), bi bf bo bu (m×1). No W: branch nodes
/// receive no external input.
pub fn sumlstm_spec(m: usize) -> Vec<SlotSpec> {
    let mut out = Vec::with_capacity(8);
    for name in ["vi", "vf", "vo", "vu"] {
        out.push(SlotSpec::new(name, m, m, Init::Xavier));
    }
    for name in ["bi", "bf", "bo", "bu"] {
        out.push(SlotSpec::new(name, m, 1, Init::Zero));
    }
    out
}

/// Plain linear layer slots: w (rows×cols), b (rows×1).
pub fn linear_spec(rows: usize, cols: usize) -> Vec<SlotSpec> {
    vec![SlotSpec::new("w", rows, cols, Init::Xavier), SlotSpec::new("b", rows, 1, Init::Zero)]
}

/// Deep-set element-embedding MLP: `layers` ReLU layers of width m.
/// ReLU-layer biases start slightly positive so no unit is born dead.
pub fn deepset_mlp_spec(m: usize, layers: usize) -> Vec<SlotSpec> {
    let mut out = Vec::new();
    for l in 0..layers {
        out.push(SlotSpec::new(format!("w{l}"), m, m, Init::Xavier));
        out.push(SlotSpec::new(format!("b{l}"), m, 1, Init::Const(0.1)));
    }
    out
}

/// The deep-set pooling layer: Lin + ReLU, bias slightly positive.
pub fn deepset_pool_spec(m: usize) -> Vec<SlotSpec> {
    vec![
        SlotSpec::new("w", m, m, Init::Xavier),
        SlotSpec::new("b", m, 1, Init::Const(0.1)),
    ]
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Per-path mean/stddev of numeric training values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NormStats {
    map: HashMap<String, PathStats>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathStats {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn get(&self, path: &str) -> Option<&PathStats> {
        self.map.get(path)
    }

    /// x̂ = (x − μ)/σ for paths with more than one training observation,
    /// x̂ = x − μ when σ is zero (constant training values), x otherwise.
    pub fn normalize(&self, path: &str, x: f64) -> f64 {
        match self.map.get(path) {
            Some(s) if s.count > 1 && s.std > 0.0 => (x - s.mean) / s.std,
            Some(s) if s.count > 1 => x - s.mean,
            _ => x,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Two-pass accumulator; population standard deviation.
#[derive(Debug, Default)]
pub struct NormStatsBuilder {
    values: HashMap<String, Vec<f64>>,
}

impl NormStatsBuilder {
    pub fn new() -> Self {
        NormStatsBuilder::default()
    }

    pub fn observe(&mut self, path: &str, x: f64) {
        self.values.entry(path.to_string()).or_default().push(x);
    }

    pub fn finish(self) -> NormStats {
        let mut map = HashMap::new();
        for (path, xs) in self.values {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            map.insert(path, PathStats { count: xs.len() as u64, mean, std: var.sqrt() });
        }
        NormStats { map }
    }
}

// ---------------------------------------------------------------------------
// Recurrent cells
// ---------------------------------------------------------------------------

pub struct LstmNodes {
    w: [NodeId; 4],
    v: [NodeId; 4],
    b: [NodeId; 4],
}

impl LstmNodes {
    pub fn bias(&self, gate: usize) -> NodeId {
        self.b[gate]
    }
}

pub fn lstm_nodes(ctx: &mut EmbedCtx<'_>, group: GroupId) -> LstmNodes {
    let first = ctx.param(group, 0);
    let mut ids = [first; 12];
    for (i, id) in ids.iter_mut().enumerate().skip(1) {
        *id = ctx.param(group, i as u32);
    }
    LstmNodes {
        w: [ids[0], ids[1], ids[2], ids[3]],
        v: [ids[4], ids[5], ids[6], ids[7]],
        b: [ids[8], ids[9], ids[10], ids[11]],
    }
}

pub struct SumLstmNodes {
    v: [NodeId; 4],
    b: [NodeId; 4],
}

pub fn sumlstm_nodes(ctx: &mut EmbedCtx<'_>, group: GroupId) -> SumLstmNodes {
    let first = ctx.param(group, 0);
    let mut ids = [first; 8];
    for (i, id) in ids.iter_mut().enumerate().skip(1) {
        *id = ctx.param(group, i as u32);
    }
    SumLstmNodes { v: [ids[0], ids[1], ids[2], ids[3]], b: [ids[4], ids[5], ids[6], ids[7]] }
}

pub fn linear_nodes(ctx: &mut EmbedCtx<'_>, group: GroupId) -> (NodeId, NodeId) {
    (ctx.param(group, 0), ctx.param(group, 1))
}

fn gate(
    tape: &mut Tape,
    w: NodeId,
    x: NodeId,
    v: NodeId,
    h: NodeId,
    b: NodeId,
    squash: fn(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let wx = tape.matvec(w, x)?;
    let vh = tape.matvec(v, h)?;
    let lin = tape.add(wx, vh)?;
    let lin = tape.add(lin, b)?;
    squash(tape, lin)
}

/// One vanilla LSTM transition: gates from (x_t, h_prev), then
/// c_t = i⊙u + f⊙c_prev and h_t = o⊙tanh(c_t).
pub fn lstm_cell(
    tape: &mut Tape,
    p: &LstmNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let i = gate(tape, p.w[0], x, p.v[0], h_prev, p.b[0], Tape::sigmoid)?;
    let f = gate(tape, p.w[1], x, p.v[1], h_prev, p.b[1], Tape::sigmoid)?;
    let o = gate(tape, p.w[2], x, p.v[2], h_prev, p.b[2], Tape::sigmoid)?;
    let u = gate(tape, p.w[3], x, p.v[3], h_prev, p.b[3], Tape::tanh)?;
    let iu = tape.mul_elem(i, u)?;
    let fc = tape.mul_elem(f, c_prev)?;
    let c = tape.add(iu, fc)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul_elem(o, tc)?;
    Ok((h, c))
}

/// Child-Sum Tree-LSTM transition: gates from the sum of child hidden states,
/// a separate forget gate per child.
pub fn sumlstm_cell(
    tape: &mut Tape,
    p: &SumLstmNodes,
    children: &[Latent],
    m: usize,
) -> Result<(NodeId, NodeId)> {
    let h_sum = if children.is_empty() {
        tape.zeros(m)
    } else {
        let hs: Vec<NodeId> = children.iter().map(|l| l.h).collect();
        tape.sum(&hs)?
    };
    let lin_gate = |tape: &mut Tape, v: NodeId, b: NodeId| -> Result<NodeId> {
        let vh = tape.matvec(v, h_sum)?;
        tape.add(vh, b)
    };
    let i = {
        let l = lin_gate(tape, p.v[0], p.b[0])?;
        tape.sigmoid(l)?
    };
    let o = {
        let l = lin_gate(tape, p.v[2], p.b[2])?;
        tape.sigmoid(l)?
    };
    let u = {
        let l = lin_gate(tape, p.v[3], p.b[3])?;
        tape.tanh(l)?
    };
    let mut c = tape.mul_elem(i, u)?;
    for child in children {
        let vf = tape.matvec(p.v[1], child.h)?;
        let lin = tape.add(vf, p.b[1])?;
        let f = tape.sigmoid(lin)?;
        let fc = tape.mul_elem(f, child.c)?;
        c = tape.add(c, fc)?;
    }
    let tc = tape.tanh(c)?;
    let h = tape.mul_elem(o, tc)?;
    Ok((c, h))
}

// ---------------------------------------------------------------------------
// Primitive embedders
// ---------------------------------------------------------------------------

fn linear_of_scalar(ctx: &mut EmbedCtx<'_>, group: GroupId, z: f64) -> Result<Latent> {
    let (w, b) = linear_nodes(ctx, group);
    let m = ctx.tape.value(b).rows();
    let zc = ctx.tape.leaf_const(Tensor::scalar(z));
    let wz = ctx.tape.matvec(w, zc)?;
    let h = ctx.tape.add(wz, b)?;
    let c = ctx.tape.zeros(m);
    Ok(Latent { c, h })
}

/// h = w·x̂ + b with x̂ normalized against the path's training statistics.
pub fn embed_number(
    ctx: &mut EmbedCtx<'_>,
    group: GroupId,
    stats: &NormStats,
    path_key: &str,
    x: f64,
) -> Result<Latent> {
    let xhat = stats.normalize(path_key, x);
    linear_of_scalar(ctx, group, xhat)
}

/// int(true) = 1, int(false) = 0, int(null) = -1.
pub fn bool_to_int(v: Option<bool>) -> f64 {
    match v {
        Some(true) => 1.0,
        Some(false) => 0.0,
        None => -1.0,
    }
}

/// h = w·int(v) + b.
pub fn embed_boolean(ctx: &mut EmbedCtx<'_>, group: GroupId, v: Option<bool>) -> Result<Latent> {
    linear_of_scalar(ctx, group, bool_to_int(v))
}

/// Character-level LSTM over `s`; h = mean of the hidden states, c = 0.
/// The empty string embeds to the zero vector.
pub fn embed_string(
    ctx: &mut EmbedCtx<'_>,
    lstm_group: GroupId,
    char_group: GroupId,
    s: &str,
) -> Result<Latent> {
    let p = lstm_nodes(ctx, lstm_group);
    let m = ctx.tape.value(p.b[0]).rows();
    if s.is_empty() {
        return Ok(ctx.zero_latent(m));
    }
    let mut h = ctx.tape.zeros(m);
    let mut c = ctx.tape.zeros(m);
    let mut hs = Vec::new();
    for ch in s.chars() {
        let slot = ctx
            .store
            .group(char_group)
            .char_slot(ch)
            .or_else(|| ctx.store.unk_slot(char_group))
            .expect("character table must carry an unk row");
        let x = ctx.param(char_group, slot);
        let (h2, c2) = lstm_cell(ctx.tape, &p, x, h, c)?;
        h = h2;
        c = c2;
        hs.push(h);
    }
    let mean = ctx.tape.mean(&hs)?;
    let zero = ctx.tape.zeros(m);
    Ok(Latent { c: zero, h: mean })
}

/// One learned vector per distinct training value; unseen values use the
/// reserved row.
pub fn embed_cat(ctx: &mut EmbedCtx<'_>, group: GroupId, value: &str) -> Result<Latent> {
    let slot = ctx
        .store
        .group(group)
        .value_slot(value)
        .or_else(|| ctx.store.unk_slot(group))
        .expect("categorical table must carry an unk row");
    let h = ctx.param(group, slot);
    let m = ctx.tape.value(h).rows();
    let c = ctx.tape.zeros(m);
    Ok(Latent { c, h })
}

// ---------------------------------------------------------------------------
// Container embedders
// ---------------------------------------------------------------------------

/// Deep-set container embedder: shared per-child ReLU MLP, average, shared
/// Lin+ReLU pooling, then the path-specific linear. Permutation invariant.
pub fn embed_container_set(
    ctx: &mut EmbedCtx<'_>,
    mlp_group: GroupId,
    pool_group: GroupId,
    final_group: GroupId,
    children_h: &[NodeId],
) -> Result<Latent> {
    let layers = ctx.store.group(mlp_group).tensors().len() / 2;
    let (pw, pb) = linear_nodes(ctx, pool_group);
    let m = ctx.tape.value(pb).rows();
    let avg = if children_h.is_empty() {
        ctx.tape.zeros(m)
    } else {
        let mut embedded = Vec::with_capacity(children_h.len());
        for &h in children_h {
            let mut z = h;
            for l in 0..layers {
                let w = ctx.param(mlp_group, (2 * l) as u32);
                let b = ctx.param(mlp_group, (2 * l + 1) as u32);
                let wz = ctx.tape.matvec(w, z)?;
                let lin = ctx.tape.add(wz, b)?;
                z = ctx.tape.relu(lin)?;
            }
            embedded.push(z);
        }
        ctx.tape.mean(&embedded)?
    };
    let lin = ctx.tape.matvec(pw, avg)?;
    let lin = ctx.tape.add(lin, pb)?;
    let pooled = ctx.tape.relu(lin)?;
    let (fw, fb) = linear_nodes(ctx, final_group);
    let out = ctx.tape.matvec(fw, pooled)?;
    let h = ctx.tape.add(out, fb)?;
    let c = ctx.tape.zeros(m);
    Ok(Latent { c, h })
}

/// Array embedder: vanilla LSTM over the children in document order, input
/// c_k‖h_k. Returns the final (c, h); the empty array embeds to zero state.
pub fn embed_array_lstm(
    ctx: &mut EmbedCtx<'_>,
    group: GroupId,
    children: &[Latent],
) -> Result<Latent> {
    let p = lstm_nodes(ctx, group);
    let m = ctx.tape.value(p.b[0]).rows();
    if children.is_empty() {
        return Ok(ctx.zero_latent(m));
    }
    let mut h = ctx.tape.zeros(m);
    let mut c = ctx.tape.zeros(m);
    for child in children {
        let x = ctx.tape.concat(child.c, child.h)?;
        let (h2, c2) = lstm_cell(ctx.tape, &p, x, h, c)?;
        h = h2;
        c = c2;
    }
    Ok(Latent { c, h })
}

/// Object embedder: shared SumLSTM over the children, then the path-specific
/// linear on the hidden state. The memory cell passes through unchanged.
pub fn embed_object_sumlstm(
    ctx: &mut EmbedCtx<'_>,
    sum_group: GroupId,
    linear_group: GroupId,
    children: &[Latent],
) -> Result<Latent> {
    let p = sumlstm_nodes(ctx, sum_group);
    let m = ctx.tape.value(p.b[0]).rows();
    let (c, h) = sumlstm_cell(ctx.tape, &p, children, m)?;
    let (w, b) = linear_nodes(ctx, linear_group);
    let wh = ctx.tape.matvec(w, h)?;
    let h_out = ctx.tape.add(wh, b)?;
    Ok(Latent { c, h: h_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rel_err;
    use crate::params::{Family, GroupKey};

    const M: usize = 4;

    fn store() -> ParameterStore {
        ParameterStore::new(99)
    }

    fn vec_lin_group(store: &mut ParameterStore, family: Family, path: &str) -> GroupId {
        store.ensure_group(GroupKey::at(family, path), || linear_spec(M, 1))
    }

    fn read(tape: &Tape, id: NodeId) -> Vec<f64> {
        tape.value(id).data().to_vec()
    }

    fn set_zero(store: &mut ParameterStore, group: GroupId) {
        let n = store.group(group).tensors().len();
        for slot in 0..n {
            let t = store.tensor_mut(crate::autodiff::ParamKey { group: group.0, slot: slot as u32 });
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn number_with_multi_observation_stats_centers_to_bias() {
        // train values {1,3,5}: mean 3, std sqrt(8/3) — computed independently here
        let mut b = NormStatsBuilder::new();
        for x in [1.0, 3.0, 5.0] {
            b.observe("p", x);
        }
        let stats = b.finish();
        let s = stats.get("p").unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.std, (8.0f64 / 3.0).sqrt());

        let mut st = store();
        let g = vec_lin_group(&mut st, Family::NumberLin, "p");
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let lat = embed_number(&mut ctx, g, &stats, "p", 3.0).unwrap();
        let b_data = st.group(g).tensors()[1].data().to_vec();
        assert_eq!(read(&tape, lat.h), b_data, "x̂ = 0 ⇒ h = b exactly");
        assert!(read(&tape, lat.c).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn number_single_observation_passes_through() {
        let mut b = NormStatsBuilder::new();
        b.observe("p", 2.0);
        let stats = b.finish();
        let mut st = store();
        let g = vec_lin_group(&mut st, Family::NumberLin, "p");
        let w = st.group(g).tensors()[0].data().to_vec();
        let bias = st.group(g).tensors()[1].data().to_vec();
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let lat = embed_number(&mut ctx, g, &stats, "p", 7.0).unwrap();
        let expect: Vec<f64> = w.iter().zip(&bias).map(|(wi, bi)| 7.0 * wi + bi).collect();
        assert_eq!(read(&tape, lat.h), expect);
    }

    #[test]
    fn number_zero_params_is_zero() {
        let stats = NormStats::default();
        let mut st = store();
        let g = vec_lin_group(&mut st, Family::NumberLin, "p");
        set_zero(&mut st, g);
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let lat = embed_number(&mut ctx, g, &stats, "p", 123.0).unwrap();
        assert!(read(&tape, lat.h).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_training_values_center_only() {
        let mut b = NormStatsBuilder::new();
        b.observe("p", 4.0);
        b.observe("p", 4.0);
        let stats = b.finish();
        assert_eq!(stats.get("p").unwrap().std, 0.0);
        assert_eq!(stats.normalize("p", 9.0), 5.0);
    }

    #[test]
    fn boolean_encoding() {
        let mut st = store();
        let g = vec_lin_group(&mut st, Family::BoolLin, "p");
        let w = st.group(g).tensors()[0].data().to_vec();
        let bias = st.group(g).tensors()[1].data().to_vec();
        let run = |st: &ParameterStore, v: Option<bool>| {
            let mut tape = Tape::new();
            let mut ctx = EmbedCtx::new(st, &mut tape);
            let lat = embed_boolean(&mut ctx, g, v).unwrap();
            read(&tape, lat.h)
        };
        assert_eq!(run(&st, Some(false)), bias, "int(false)=0 ⇒ h=b");
        let expect: Vec<f64> = w.iter().zip(&bias).map(|(wi, bi)| wi + bi).collect();
        assert_eq!(run(&st, Some(true)), expect, "int(true)=1 ⇒ h=w+b");
        let expect: Vec<f64> = w.iter().zip(&bias).map(|(wi, bi)| -wi + bi).collect();
        assert_eq!(run(&st, None), expect, "int(null)=-1 ⇒ h=-w+b");
    }

    fn char_group(store: &mut ParameterStore, text: &str) -> GroupId {
        let g = store.ensure_group(GroupKey::shared(Family::CharTable), Vec::new);
        for c in text.chars() {
            store.ensure_char(g, c, M);
        }
        store.ensure_unk(g, M);
        g
    }

    #[test]
    fn string_of_length_one_is_the_single_hidden_state() {
        let mut st = store();
        let lstm = st.ensure_group(GroupKey::at(Family::StrLstm, "p"), || lstm_spec(M, M));
        let chars = char_group(&mut st, "x");
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let lat = embed_string(&mut ctx, lstm, chars, "x").unwrap();

        // independently: one cell from zero state, mean of one
        let mut tape2 = Tape::new();
        let mut ctx2 = EmbedCtx::new(&st, &mut tape2);
        let p = lstm_nodes(&mut ctx2, lstm);
        let slot = st.group(chars).char_slot('x').unwrap();
        let x = ctx2.param(chars, slot);
        let h0 = ctx2.tape.zeros(M);
        let c0 = ctx2.tape.zeros(M);
        let (h, _c) = lstm_cell(ctx2.tape, &p, x, h0, c0).unwrap();
        assert_eq!(read(&tape, lat.h), read(&tape2, h));
    }

    #[test]
    fn string_zero_params_and_empty_string_embed_to_zero() {
        let mut st = store();
        let lstm = st.ensure_group(GroupKey::at(Family::StrLstm, "p"), || lstm_spec(M, M));
        let chars = char_group(&mut st, "abc");
        set_zero(&mut st, lstm);
        // zero LSTM parameters: every gate is 0.5, u = 0 ⇒ c = 0, h = 0
        let mut tape = Tape::new();
        let lat = {
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            embed_string(&mut ctx, lstm, chars, "abc").unwrap()
        };
        assert!(read(&tape, lat.h).iter().all(|&x| x == 0.0));

        let mut tape = Tape::new();
        let lat = {
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            embed_string(&mut ctx, lstm, chars, "").unwrap()
        };
        assert!(read(&tape, lat.h).iter().all(|&x| x == 0.0));
        assert!(read(&tape, lat.c).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unseen_characters_use_the_unk_row() {
        let mut st = store();
        let lstm = st.ensure_group(GroupKey::at(Family::StrLstm, "p"), || lstm_spec(M, M));
        let chars = char_group(&mut st, "a");
        let mut t1 = Tape::new();
        let mut c1 = EmbedCtx::new(&st, &mut t1);
        let via_unk = embed_string(&mut c1, lstm, chars, "Z").unwrap();
        let mut t2 = Tape::new();
        let mut c2 = EmbedCtx::new(&st, &mut t2);
        let via_unk2 = embed_string(&mut c2, lstm, chars, "Q").unwrap();
        assert_eq!(read(&t1, via_unk.h), read(&t2, via_unk2.h), "all unseen chars share one row");
    }

    #[test]
    fn lstm_cell_zero_params_halves_the_memory_cell() {
        let mut st = store();
        let g = st.ensure_group(GroupKey::at(Family::ArrayLstm, "p"), || lstm_spec(M, M));
        set_zero(&mut st, g);
        let c_prev_vals = vec![0.8, -0.4, 1.2, 0.0];
        let mut tape = Tape::new();
        let (h, c) = {
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            let p = lstm_nodes(&mut ctx, g);
            let x = ctx.tape.zeros(M);
            let h0 = ctx.tape.zeros(M);
            let c0 = ctx.tape.leaf_const(Tensor::vector(c_prev_vals.clone()));
            lstm_cell(ctx.tape, &p, x, h0, c0).unwrap()
        };
        // gates are all 0.5, u = 0: c_t = 0.5·c_prev, h_t = 0.5·tanh(0.5·c_prev)
        for (got, cp) in read(&tape, c).iter().zip(&c_prev_vals) {
            assert!((got - 0.5 * cp).abs() < 1e-15);
        }
        for (got, cp) in read(&tape, h).iter().zip(&c_prev_vals) {
            assert!((got - 0.5 * (0.5 * cp).tanh()).abs() < 1e-15);
        }
        // ... and from a fully zero state everything stays zero
        let mut tape = Tape::new();
        let (h, c) = {
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            let p = lstm_nodes(&mut ctx, g);
            let x = ctx.tape.zeros(M);
            let h0 = ctx.tape.zeros(M);
            let c0 = ctx.tape.zeros(M);
            lstm_cell(ctx.tape, &p, x, h0, c0).unwrap()
        };
        assert!(read(&tape, h).iter().all(|&v| v == 0.0));
        assert!(read(&tape, c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_cell_gradients_match_finite_differences() {
        let mut st = store();
        let g = st.ensure_group(GroupKey::at(Family::ArrayLstm, "p"), || lstm_spec(M, M));
        let x_vals = vec![0.3, -0.9, 0.5, 1.1];

        let loss_of = |st: &ParameterStore| -> f64 {
            let mut tape = Tape::new();
            let mut ctx = EmbedCtx::new(st, &mut tape);
            let p = lstm_nodes(&mut ctx, g);
            let x = ctx.tape.leaf_const(Tensor::vector(x_vals.clone()));
            let h0 = ctx.tape.zeros(M);
            let c0 = ctx.tape.zeros(M);
            let (h1, c1) = lstm_cell(ctx.tape, &p, x, h0, c0).unwrap();
            let (h2, _c2) = lstm_cell(ctx.tape, &p, x, h1, c1).unwrap();
            let row = ctx.tape.leaf_const(Tensor::from_vec(1, M, vec![1.0; M]));
            let loss = ctx.tape.matvec(row, h2).unwrap();
            tape.value(loss).data()[0]
        };

        // analytic
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let p = lstm_nodes(&mut ctx, g);
        let x = ctx.tape.leaf_const(Tensor::vector(x_vals.clone()));
        let h0 = ctx.tape.zeros(M);
        let c0 = ctx.tape.zeros(M);
        let (h1, c1) = lstm_cell(ctx.tape, &p, x, h0, c0).unwrap();
        let (h2, _c2) = lstm_cell(ctx.tape, &p, x, h1, c1).unwrap();
        let row = ctx.tape.leaf_const(Tensor::from_vec(1, M, vec![1.0; M]));
        let loss = ctx.tape.matvec(row, h2).unwrap();
        let grads = tape.backward(loss).unwrap().into_param_grads(&tape);

        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        for (key, analytic) in &grads {
            for i in 0..analytic.len() {
                let orig = st.tensor(*key).data()[i];
                st.tensor_mut(*key).data_mut()[i] = orig + h;
                let plus = loss_of(&st);
                st.tensor_mut(*key).data_mut()[i] = orig - h;
                let minus = loss_of(&st);
                st.tensor_mut(*key).data_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                max_err = max_err.max(rel_err(analytic.data()[i], fd));
            }
        }
        assert!(max_err <= 1e-5, "max rel err {max_err}");
    }

    fn random_latents(ctx: &mut EmbedCtx<'_>, n: usize, seed: u64) -> Vec<Latent> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let c = ctx
                    .tape
                    .leaf_const(Tensor::vector((0..M).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                let h = ctx
                    .tape
                    .leaf_const(Tensor::vector((0..M).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                Latent { c, h }
            })
            .collect()
    }

    #[test]
    fn sumlstm_zero_children_and_zero_param_cases() {
        let mut st = store();
        let g = st.ensure_group(GroupKey::shared(Family::SumLstmShared), || sumlstm_spec(M));
        set_zero(&mut st, g);
        let mut tape = Tape::new();
        let (c, h) = {
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            let p = sumlstm_nodes(&mut ctx, g);
            sumlstm_cell(ctx.tape, &p, &[], M).unwrap()
        };
        assert!(read(&tape, c).iter().all(|&v| v == 0.0));
        assert!(read(&tape, h).iter().all(|&v| v == 0.0));

        // two children, zero params: c = 0.5(c1+c2), h = 0.5 tanh(c)
        let mut tape = Tape::new();
        let (kids, c, h) = {
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            let kids = random_latents(&mut ctx, 2, 5);
            let p = sumlstm_nodes(&mut ctx, g);
            let (c, h) = sumlstm_cell(ctx.tape, &p, &kids, M).unwrap();
            (kids, c, h)
        };
        let c1 = read(&tape, kids[0].c);
        let c2 = read(&tape, kids[1].c);
        for i in 0..M {
            let expect_c = 0.5 * (c1[i] + c2[i]);
            assert!((read(&tape, c)[i] - expect_c).abs() < 1e-15);
            assert!((read(&tape, h)[i] - 0.5 * expect_c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn sumlstm_is_permutation_invariant() {
        let mut st = store();
        let g = st.ensure_group(GroupKey::shared(Family::SumLstmShared), || sumlstm_spec(M));
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let kids = random_latents(&mut ctx, 4, 11);
        let p = sumlstm_nodes(&mut ctx, g);
        let (c1, h1) = sumlstm_cell(ctx.tape, &p, &kids, M).unwrap();
        let mut shuffled = kids.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let (c2, h2) = sumlstm_cell(ctx.tape, &p, &shuffled, M).unwrap();
        for i in 0..M {
            assert!(rel_err(read(&tape, c1)[i], read(&tape, c2)[i]) <= 1e-9);
            assert!(rel_err(read(&tape, h1)[i], read(&tape, h2)[i]) <= 1e-9);
        }
    }

    fn deepset_groups(st: &mut ParameterStore) -> (GroupId, GroupId, GroupId) {
        use crate::params::Container;
        let mlp = st.ensure_group(GroupKey::shared(Family::DeepSetShared(Container::Object)), || {
            deepset_mlp_spec(M, 1)
        });
        let pool = st.ensure_group(GroupKey::shared(Family::DeepSetPool(Container::Object)), || {
            linear_spec(M, M)
        });
        let fin = st.ensure_group(GroupKey::at(Family::DeepSetFinal(Container::Object), "p"), || {
            linear_spec(M, M)
        });
        (mlp, pool, fin)
    }

    #[test]
    fn deepset_is_permutation_invariant() {
        let mut st = store();
        let (mlp, pool, fin) = deepset_groups(&mut st);
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let kids = random_latents(&mut ctx, 5, 3);
        let hs: Vec<NodeId> = kids.iter().map(|l| l.h).collect();
        let out1 = embed_container_set(&mut ctx, mlp, pool, fin, &hs).unwrap();
        let mut rev: Vec<NodeId> = hs.clone();
        rev.reverse();
        let out2 = embed_container_set(&mut ctx, mlp, pool, fin, &rev).unwrap();
        for i in 0..M {
            assert!(rel_err(read(&tape, out1.h)[i], read(&tape, out2.h)[i]) <= 1e-9);
        }
    }

    #[test]
    fn deepset_identity_initialization_reduces_to_final_linear_of_relu() {
        let mut st = store();
        let (mlp, pool, fin) = deepset_groups(&mut st);
        // identity MLP and pooling: w = I, b = 0
        for g in [mlp, pool] {
            let wkey = crate::autodiff::ParamKey { group: g.0, slot: 0 };
            let t = st.tensor_mut(wkey);
            for i in 0..M {
                for j in 0..M {
                    t.data_mut()[i * M + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            let bkey = crate::autodiff::ParamKey { group: g.0, slot: 1 };
            st.tensor_mut(bkey).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let child = vec![0.6, -0.3, 0.0, 1.4];
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let h = ctx.tape.leaf_const(Tensor::vector(child.clone()));
        let out = embed_container_set(&mut ctx, mlp, pool, fin, &[h]).unwrap();
        // expected: final linear applied to ReLU(child)
        let relu: Vec<f64> = child.iter().map(|x| x.max(0.0)).collect();
        let fw = st.group(fin).tensors()[0].data().to_vec();
        let fb = st.group(fin).tensors()[1].data().to_vec();
        let expect: Vec<f64> = (0..M)
            .map(|i| fb[i] + (0..M).map(|j| fw[i * M + j] * relu[j]).sum::<f64>())
            .collect();
        for i in 0..M {
            assert!((read(&tape, out.h)[i] - expect[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn deepset_empty_container_is_final_linear_of_relu_pool_bias() {
        let mut st = store();
        let (mlp, pool, fin) = deepset_groups(&mut st);
        // give the pooling bias a nonzero value
        let bkey = crate::autodiff::ParamKey { group: pool.0, slot: 1 };
        for (i, x) in st.tensor_mut(bkey).data_mut().iter_mut().enumerate() {
            *x = 0.25 * (i as f64) - 0.5;
        }
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let out = embed_container_set(&mut ctx, mlp, pool, fin, &[]).unwrap();
        let pb = st.group(pool).tensors()[1].data().to_vec();
        let relu: Vec<f64> = pb.iter().map(|x| x.max(0.0)).collect();
        let fw = st.group(fin).tensors()[0].data().to_vec();
        let fb = st.group(fin).tensors()[1].data().to_vec();
        let expect: Vec<f64> = (0..M)
            .map(|i| fb[i] + (0..M).map(|j| fw[i * M + j] * relu[j]).sum::<f64>())
            .collect();
        assert_eq!(read(&tape, out.h), expect);
    }

    #[test]
    fn array_lstm_empty_and_zero_param_cases() {
        let mut st = store();
        let g = st.ensure_group(GroupKey::at(Family::ArrayLstm, "p"), || lstm_spec(M, 2 * M));
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let out = embed_array_lstm(&mut ctx, g, &[]).unwrap();
        assert!(read(&tape, out.c).iter().all(|&v| v == 0.0));
        assert!(read(&tape, out.h).iter().all(|&v| v == 0.0));

        set_zero(&mut st, g);
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let kids = random_latents(&mut ctx, 1, 8);
        let out = embed_array_lstm(&mut ctx, g, &kids).unwrap();
        assert!(read(&tape, out.h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn array_lstm_order_sensitivity_witness_found() {
        // random parameters: some 2-child input must change under swapping
        let mut found = false;
        for trial in 0..100 {
            let mut st = ParameterStore::new(1000 + trial);
            let g = st.ensure_group(GroupKey::at(Family::ArrayLstm, "p"), || lstm_spec(M, 2 * M));
            let mut tape = Tape::new();
            let mut ctx = EmbedCtx::new(&st, &mut tape);
            let kids = random_latents(&mut ctx, 2, 2000 + trial);
            let fwd = embed_array_lstm(&mut ctx, g, &kids).unwrap();
            let swapped = vec![kids[1], kids[0]];
            let bwd = embed_array_lstm(&mut ctx, g, &swapped).unwrap();
            let a = read(&tape, fwd.h);
            let b = read(&tape, bwd.h);
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
                found = true;
                break;
            }
        }
        assert!(found, "no order-sensitivity witness in 100 trials");
    }

    #[test]
    fn object_sumlstm_empty_with_zero_params_yields_bias() {
        let mut st = store();
        let sum = st.ensure_group(GroupKey::shared(Family::SumLstmShared), || sumlstm_spec(M));
        let lin = st.ensure_group(GroupKey::at(Family::ObjLinear, "p"), || linear_spec(M, M));
        set_zero(&mut st, sum);
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let out = embed_object_sumlstm(&mut ctx, sum, lin, &[]).unwrap();
        let b = st.group(lin).tensors()[1].data().to_vec();
        assert_eq!(read(&tape, out.h), b);
        assert!(read(&tape, out.c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn object_sumlstm_permutation_invariance() {
        let mut st = store();
        let sum = st.ensure_group(GroupKey::shared(Family::SumLstmShared), || sumlstm_spec(M));
        let lin = st.ensure_group(GroupKey::at(Family::ObjLinear, "p"), || linear_spec(M, M));
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&st, &mut tape);
        let kids = random_latents(&mut ctx, 4, 77);
        let a = embed_object_sumlstm(&mut ctx, sum, lin, &kids).unwrap();
        let mut perm = kids.clone();
        perm.rotate_left(2);
        perm.swap(0, 1);
        let b = embed_object_sumlstm(&mut ctx, sum, lin, &perm).unwrap();
        for i in 0..M {
            assert!(rel_err(read(&tape, a.h)[i], read(&tape, b.h)[i]) <= 1e-9);
            assert!(rel_err(read(&tape, a.c)[i], read(&tape, b.c)[i]) <= 1e-9);
        }
    }

    #[test]
    fn normalization_is_affine_invariant_bitwise() {
        // multiply by a power of two and shift by an exactly-representable
        // constant: every x̂ must be bit-identical
        let xs = [1.0, 3.0, 5.0, 11.0, 2.0];
        let mut b1 = NormStatsBuilder::new();
        let mut b2 = NormStatsBuilder::new();
        for &x in &xs {
            b1.observe("p", x);
            b2.observe("p", 2.0 * x + 1.0);
        }
        let s1 = b1.finish();
        let s2 = b2.finish();
        for &x in &xs {
            let a = s1.normalize("p", x);
            let b = s2.normalize("p", 2.0 * x + 1.0);
            assert_eq!(a.to_bits(), b.to_bits(), "x̂ must be bit-identical under a·x+b");
        }
    }
}
