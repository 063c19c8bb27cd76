//! GRU encoder-decoder with additive attention, built per example on a
//! fresh tape.
//!
//! Encoder: bidirectional GRU over source embeddings; annotation `h_i` is
//! the concatenation of the forward and backward states at position `i`.
//! Decoder state starts from the backward state at the first position:
//! `s_0 = tanh(W_init h_bwd_1 + b_init)`. At target step `j` the previous
//! state queries the annotations (scores `v . tanh(W_a s + U_a h_i + b_a)`,
//! softmax weights, weighted-sum context), the GRU consumes
//! `[emb(y_prev); c]`, and logits come from `W_o [s_j; c_j; emb(y_prev)]
//! + b_o`.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, PAD};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::numerics::{NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub init_seed: u64,
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be >= 1", name)));
            }
        }
        for (name, v) in [("src_vocab", self.src_vocab), ("tgt_vocab", self.tgt_vocab)] {
            if v < 4 {
                return Err(Error::Config(format!(
                    "{} must cover the 4 reserved ids, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

/// One GRU cell: `w*` act on the input, `u*` on the state, `b*` are biases.
#[derive(Clone, Debug)]
pub struct GruParams<F> {
    pub wz: Tensor<F>,
    pub uz: Tensor<F>,
    pub bz: Tensor<F>,
    pub wr: Tensor<F>,
    pub ur: Tensor<F>,
    pub br: Tensor<F>,
    pub wh: Tensor<F>,
    pub uh: Tensor<F>,
    pub bh: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct Seq2SeqParams<F> {
    pub config: Seq2SeqConfig,
    pub src_embed: Tensor<F>,
    pub tgt_embed: Tensor<F>,
    pub enc_fwd: GruParams<F>,
    pub enc_bwd: GruParams<F>,
    pub dec: GruParams<F>,
    pub attn_w: Tensor<F>,
    pub attn_u: Tensor<F>,
    pub attn_b: Tensor<F>,
    pub attn_v: Tensor<F>,
    pub init_w: Tensor<F>,
    pub init_b: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

const GRU_FIELDS: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];

impl<F: Real> GruParams<F> {
    fn shapes(input: usize, hidden: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(9);
        for _ in 0..3 {
            out.push(vec![hidden, input]);
            out.push(vec![hidden, hidden]);
            out.push(vec![hidden]);
        }
        out
    }

    fn from_fill(input: usize, hidden: usize, fill: &mut impl FnMut(&[usize]) -> Tensor<F>) -> Self {
        let s = Self::shapes(input, hidden);
        GruParams {
            wz: fill(&s[0]),
            uz: fill(&s[1]),
            bz: fill(&s[2]),
            wr: fill(&s[3]),
            ur: fill(&s[4]),
            br: fill(&s[5]),
            wh: fill(&s[6]),
            uh: fill(&s[7]),
            bh: fill(&s[8]),
        }
    }

    fn tensors(&self) -> [&Tensor<F>; 9] {
        [&self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh, &self.bh]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 9] {
        [
            &mut self.wz, &mut self.uz, &mut self.bz, &mut self.wr, &mut self.ur, &mut self.br,
            &mut self.wh, &mut self.uh, &mut self.bh,
        ]
    }
}

impl<F: Real> Seq2SeqParams<F> {
    /// Fresh parameters, every tensor uniform in [-0.08, 0.08] drawn from
    /// `config.init_seed` in canonical tensor order. Draws happen in `f64`
    /// so both scalar types see the same stream.
    pub fn init(config: &Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
        let mut fill = |shape: &[usize]| {
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| F::from_f64(rng.gen_range(-0.08..0.08)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("fill length matches shape")
        };
        let (e, h, a) = (config.embed_dim, config.hidden_dim, config.attn_dim);
        Ok(Seq2SeqParams {
            config: *config,
            src_embed: fill(&[config.src_vocab, e]),
            tgt_embed: fill(&[config.tgt_vocab, e]),
            enc_fwd: GruParams::from_fill(e, h, &mut fill),
            enc_bwd: GruParams::from_fill(e, h, &mut fill),
            dec: GruParams::from_fill(e + 2 * h, h, &mut fill),
            attn_w: fill(&[a, h]),
            attn_u: fill(&[a, 2 * h]),
            attn_b: fill(&[a]),
            attn_v: fill(&[a]),
            init_w: fill(&[h, h]),
            init_b: fill(&[h]),
            out_w: fill(&[config.tgt_vocab, 3 * h + e]),
            out_b: fill(&[config.tgt_vocab]),
        })
    }

    /// Tensors in canonical order with their checkpoint block names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("src_embed".to_string(), &self.src_embed),
            ("tgt_embed".to_string(), &self.tgt_embed),
        ];
        for (prefix, gru) in [
            ("enc_fwd", &self.enc_fwd),
            ("enc_bwd", &self.enc_bwd),
            ("dec", &self.dec),
        ] {
            for (field, t) in GRU_FIELDS.iter().zip(gru.tensors()) {
                out.push((format!("{}.{}", prefix, field), t));
            }
        }
        out.push(("attn_w".to_string(), &self.attn_w));
        out.push(("attn_u".to_string(), &self.attn_u));
        out.push(("attn_b".to_string(), &self.attn_b));
        out.push(("attn_v".to_string(), &self.attn_v));
        out.push(("init_w".to_string(), &self.init_w));
        out.push(("init_b".to_string(), &self.init_b));
        out.push(("out_w".to_string(), &self.out_w));
        out.push(("out_b".to_string(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.src_embed, &mut self.tgt_embed];
        for gru in [&mut self.enc_fwd, &mut self.enc_bwd, &mut self.dec] {
            out.extend(gru.tensors_mut());
        }
        out.push(&mut self.attn_w);
        out.push(&mut self.attn_u);
        out.push(&mut self.attn_b);
        out.push(&mut self.attn_v);
        out.push(&mut self.init_w);
        out.push(&mut self.init_b);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Parameter leaves registered on a tape, in canonical order.
pub struct TapedParams {
    ids: Vec<NodeId>,
    config: Seq2SeqConfig,
}

/// Ids in `GRU_FIELDS` order: wz uz bz wr ur br wh uh bh.
struct TapedGru<'a> {
    ids: &'a [NodeId],
}

impl TapedParams {
    /// Register every parameter tensor as a differentiable leaf.
    pub fn register<F: Real>(tape: &mut Tape<F>, params: &Seq2SeqParams<F>) -> Self {
        let ids = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        TapedParams { ids, config: params.config }
    }

    /// Leaf ids in canonical tensor order, for gradient collection.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn src_embed(&self) -> NodeId {
        self.ids[0]
    }
    fn tgt_embed(&self) -> NodeId {
        self.ids[1]
    }
    fn enc_fwd(&self) -> TapedGru<'_> {
        TapedGru { ids: &self.ids[2..11] }
    }
    fn enc_bwd(&self) -> TapedGru<'_> {
        TapedGru { ids: &self.ids[11..20] }
    }
    fn dec(&self) -> TapedGru<'_> {
        TapedGru { ids: &self.ids[20..29] }
    }
    fn attn_w(&self) -> NodeId {
        self.ids[29]
    }
    fn attn_u(&self) -> NodeId {
        self.ids[30]
    }
    fn attn_b(&self) -> NodeId {
        self.ids[31]
    }
    fn attn_v(&self) -> NodeId {
        self.ids[32]
    }
    fn init_w(&self) -> NodeId {
        self.ids[33]
    }
    fn init_b(&self) -> NodeId {
        self.ids[34]
    }
    fn out_w(&self) -> NodeId {
        self.ids[35]
    }
    fn out_b(&self) -> NodeId {
        self.ids[36]
    }
}

/// `h' = (1 - z) .* h + z .* tanh(Wh x + Uh (r .* h) + bh)` with
/// `z = sigmoid(Wz x + Uz h + bz)` and `r = sigmoid(Wr x + Ur h + br)`.
fn gru_step<F: Real>(
    tape: &mut Tape<F>,
    g: &TapedGru<'_>,
    ones: NodeId,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape<F>, w: NodeId, u: NodeId, b: NodeId, hx: NodeId| -> Result<NodeId> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, hx)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, g.ids[0], g.ids[1], g.ids[2], h)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, g.ids[3], g.ids[4], g.ids[5], h)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let h_pre = gate(tape, g.ids[6], g.ids[7], g.ids[8], rh)?;
    let h_cand = tape.tanh(h_pre);
    let keep = tape.sub(ones, z)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, h_cand)?;
    tape.add(old, new)
}

/// Encoded source: annotations, their precomputed attention projections,
/// and the initial decoder state.
pub struct EncodedSource {
    pub annotations: Vec<NodeId>,
    ua: Vec<NodeId>,
    pub s0: NodeId,
    ones_h: NodeId,
}

fn check_tokens(tokens: &[u32], vocab: usize, max_len: usize, what: &str) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Data(format!("empty {} sequence", what)));
    }
    if tokens.len() > max_len {
        return Err(Error::Data(format!(
            "{} length {} exceeds model max {}",
            what,
            tokens.len(),
            max_len
        )));
    }
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::Data(format!("{} token {} outside vocab {}", what, t, vocab)));
        }
        if t == PAD {
            return Err(Error::Data(format!("PAD inside {} sequence", what)));
        }
    }
    Ok(())
}

/// Run the bidirectional encoder and prepare attention projections.
pub fn encode<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapedParams,
    src: &[u32],
) -> Result<EncodedSource> {
    check_tokens(src, tp.config.src_vocab, tp.config.max_src_len, "source")?;
    let h = tp.config.hidden_dim;
    let ones_h = tape.constant(Tensor::filled(&[h], F::one()));
    let h0 = tape.constant(Tensor::zeros(&[h]));
    let embeds: Vec<NodeId> = src
        .iter()
        .map(|&t| tape.gather(tp.src_embed(), t as usize))
        .collect::<Result<_>>()?;
    let mut fwd = Vec::with_capacity(src.len());
    let mut state = h0;
    for &x in &embeds {
        state = gru_step(tape, &tp.enc_fwd(), ones_h, x, state)?;
        fwd.push(state);
    }
    let mut bwd = vec![h0; src.len()];
    state = h0;
    for (i, &x) in embeds.iter().enumerate().rev() {
        state = gru_step(tape, &tp.enc_bwd(), ones_h, x, state)?;
        bwd[i] = state;
    }
    let mut annotations = Vec::with_capacity(src.len());
    let mut ua = Vec::with_capacity(src.len());
    for i in 0..src.len() {
        let ann = tape.concat(&[fwd[i], bwd[i]])?;
        ua.push(tape.matvec(tp.attn_u(), ann)?);
        annotations.push(ann);
    }
    let proj = tape.matvec(tp.init_w(), bwd[0])?;
    let pre = tape.add(proj, tp.init_b())?;
    let s0 = tape.tanh(pre);
    Ok(EncodedSource { annotations, ua, s0, ones_h })
}

/// Additive attention from state `s` over the encoded source; returns the
/// context and the weight vector node.
pub fn attend<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapedParams,
    enc: &EncodedSource,
    s: NodeId,
) -> Result<(NodeId, NodeId)> {
    let ws = tape.matvec(tp.attn_w(), s)?;
    let wsb = tape.add(ws, tp.attn_b())?;
    let mut scores = Vec::with_capacity(enc.annotations.len());
    for &u in &enc.ua {
        let pre = tape.add(wsb, u)?;
        let t = tape.tanh(pre);
        scores.push(tape.dot(tp.attn_v(), t)?);
    }
    let score_vec = tape.concat(&scores)?;
    let alpha = tape.softmax(score_vec)?;
    let c = tape.weighted_sum(alpha, &enc.annotations)?;
    Ok((c, alpha))
}

/// One decoder step.
pub struct DecodeStep {
    pub state: NodeId,
    pub logits: NodeId,
    pub alpha: NodeId,
}

pub fn decode_step<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapedParams,
    enc: &EncodedSource,
    s_prev: NodeId,
    y_prev: u32,
) -> Result<DecodeStep> {
    if y_prev as usize >= tp.config.tgt_vocab {
        return Err(Error::Data(format!(
            "previous token {} outside vocab {}",
            y_prev, tp.config.tgt_vocab
        )));
    }
    let (c, alpha) = attend(tape, tp, enc, s_prev)?;
    let emb = tape.gather(tp.tgt_embed(), y_prev as usize)?;
    let x = tape.concat(&[emb, c])?;
    let state = gru_step(tape, &tp.dec(), enc.ones_h, x, s_prev)?;
    let readout = tape.concat(&[state, c, emb])?;
    let proj = tape.matvec(tp.out_w(), readout)?;
    let logits = tape.add(proj, tp.out_b())?;
    Ok(DecodeStep { state, logits, alpha })
}

/// A teacher-forced forward pass: the tape plus per-position logits nodes,
/// softmax distributions, and attention rows. Gradients flow by seeding the
/// logits nodes and sweeping the tape.
pub struct ForwardTrace<F: Real> {
    pub tape: Tape<F>,
    pub param_ids: Vec<NodeId>,
    pub logit_ids: Vec<NodeId>,
    pub dists: Vec<Tensor<F>>,
    pub attention: Vec<Tensor<F>>,
}

/// Feed `tgt` (which must already end how supervision wants, normally with
/// EOS) one position at a time; position `j` is predicted from BOS and
/// `tgt[..j]`. Produces exactly `tgt.len()` distributions.
pub fn forward_teacher_forced<F: Real>(
    params: &Seq2SeqParams<F>,
    src: &[u32],
    tgt: &[u32],
) -> Result<ForwardTrace<F>> {
    // Allow one position beyond max_tgt_len for the appended EOS.
    check_tokens(tgt, params.config.tgt_vocab, params.config.max_tgt_len + 1, "target")?;
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, params);
    let enc = encode(&mut tape, &tp, src)?;
    let mut state = enc.s0;
    let mut logit_ids = Vec::with_capacity(tgt.len());
    let mut dists = Vec::with_capacity(tgt.len());
    let mut attention = Vec::with_capacity(tgt.len());
    let mut y_prev = BOS;
    for &y in tgt {
        let step = decode_step(&mut tape, &tp, &enc, state, y_prev)?;
        dists.push(tape.value(step.logits).softmax_1d()?);
        attention.push(tape.value(step.alpha).clone());
        logit_ids.push(step.logits);
        state = step.state;
        y_prev = y;
    }
    let param_ids = tp.ids().to_vec();
    Ok(ForwardTrace { tape, param_ids, logit_ids, dists, attention })
}
