//! Decoding and evaluation: greedy and beam search over the seq2seq model,
//! corpus and sentence BLEU, and an exact paired sign test.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::{ParallelCorpus, BOS, EOS};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::numerics::Tape;
use crate::seq2seq::{decode_step, encode, Seq2SeqParams, TapedParams};

/// Decoding controls. `max_len` counts emitted tokens (EOS included);
/// `length_norm` divides a finished score by `len^length_norm` when
/// positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: f64,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig { beam: 1, max_len, length_norm: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode max_len must be >= 1".into()));
        }
        if !(self.length_norm >= 0.0) {
            return Err(Error::Config(format!(
                "length_norm must be finite and >= 0, got {}",
                self.length_norm
            )));
        }
        Ok(())
    }
}

/// A decoded candidate. `tokens` includes the terminating EOS when the
/// hypothesis finished; `log_prob` is the raw cumulative log probability
/// (no length normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<F> {
    pub tokens: Vec<u32>,
    pub log_prob: F,
}

impl<F: Real> Hypothesis<F> {
    /// Tokens without the terminating EOS.
    pub fn surface(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => &self.tokens,
        }
    }

    fn score(&self, length_norm: f64) -> f64 {
        let lp = self.log_prob.as_f64();
        if length_norm > 0.0 {
            lp / (self.tokens.len().max(1) as f64).powf(length_norm)
        } else {
            lp
        }
    }
}

/// Greedy decoding: argmax token each step, ties to the lowest id, stop at
/// EOS or `max_len` tokens.
pub fn greedy_decode<F: Real>(
    params: &Seq2SeqParams<F>,
    src: &[u32],
    max_len: usize,
) -> Result<Hypothesis<F>> {
    if max_len == 0 {
        return Err(Error::Config("decode max_len must be >= 1".into()));
    }
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, params);
    let enc = encode(&mut tape, &tp, src)?;
    let mut state = enc.s0;
    let mut y_prev = BOS;
    let mut tokens = Vec::new();
    let mut log_prob = F::zero();
    for _ in 0..max_len {
        let step = decode_step(&mut tape, &tp, &enc, state, y_prev)?;
        let ls = tape.value(step.logits).log_softmax_1d()?;
        let tok = ls.argmax() as u32;
        log_prob += ls.data()[tok as usize];
        tokens.push(tok);
        if tok == EOS {
            break;
        }
        state = step.state;
        y_prev = tok;
    }
    Ok(Hypothesis { tokens, log_prob })
}

struct BeamItem<F> {
    tokens: Vec<u32>,
    log_prob: F,
    state: crate::numerics::NodeId,
    y_prev: u32,
}

/// Length-synchronous beam search. Candidates at each depth are ranked by
/// (log prob desc, token asc, parent index asc); EOS moves a candidate to
/// the finished pool. Returns finished plus still-open hypotheses, best
/// score first (then lexicographic tokens for deterministic ties).
pub fn beam_decode<F: Real>(
    params: &Seq2SeqParams<F>,
    src: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis<F>>> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, params);
    let enc = encode(&mut tape, &tp, src)?;
    let mut active = vec![BeamItem {
        tokens: Vec::new(),
        log_prob: F::zero(),
        state: enc.s0,
        y_prev: BOS,
    }];
    let mut finished: Vec<Hypothesis<F>> = Vec::new();
    for _ in 0..cfg.max_len {
        // (neg log prob, token, parent) sorts candidates deterministically.
        let mut candidates: Vec<(F, u32, usize)> = Vec::new();
        let mut states = Vec::with_capacity(active.len());
        for (pi, item) in active.iter().enumerate() {
            let step = decode_step(&mut tape, &tp, &enc, item.state, item.y_prev)?;
            let ls = tape.value(step.logits).log_softmax_1d()?;
            states.push(step.state);
            for (tok, &lp) in ls.data().iter().enumerate() {
                candidates.push((item.log_prob + lp, tok as u32, pi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.as_f64()
                .total_cmp(&a.0.as_f64())
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam);
        for &(lp, tok, pi) in candidates.iter().take(cfg.beam) {
            let mut tokens = active[pi].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(Hypothesis { tokens, log_prob: lp });
            } else {
                next.push(BeamItem { tokens, log_prob: lp, state: states[pi], y_prev: tok });
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
    }
    finished.extend(
        active
            .into_iter()
            .map(|item| Hypothesis { tokens: item.tokens, log_prob: item.log_prob }),
    );
    finished.sort_by(|a, b| {
        b.score(cfg.length_norm)
            .total_cmp(&a.score(cfg.length_norm))
            .then(a.tokens.cmp(&b.tokens))
    });
    Ok(finished)
}

/// Cumulative log probability the model assigns to an exact token sequence
/// (teacher-forced). Decoding accumulates scores the same way, so a
/// hypothesis's `log_prob` reproduces under rescoring.
pub fn score_sequence<F: Real>(
    params: &Seq2SeqParams<F>,
    src: &[u32],
    tokens: &[u32],
) -> Result<F> {
    if tokens.is_empty() {
        return Err(Error::Data("cannot score an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let tp = TapedParams::register(&mut tape, params);
    let enc = encode(&mut tape, &tp, src)?;
    let mut state = enc.s0;
    let mut y_prev = BOS;
    let mut total = F::zero();
    for &tok in tokens {
        if tok as usize >= params.config.tgt_vocab {
            return Err(Error::Data(format!(
                "token {} outside vocab {}",
                tok, params.config.tgt_vocab
            )));
        }
        let step = decode_step(&mut tape, &tp, &enc, state, y_prev)?;
        let ls = tape.value(step.logits).log_softmax_1d()?;
        total += ls.data()[tok as usize];
        state = step.state;
        y_prev = tok;
    }
    Ok(total)
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and totals for orders 1..=4.
fn overlap(hyp: &[u32], rf: &[u32]) -> ([usize; 4], [usize; 4]) {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for n in 1..=4 {
        let hc = ngram_counts(hyp, n);
        let rc = ngram_counts(rf, n);
        totals[n - 1] = hyp.len().saturating_sub(n - 1);
        matches[n - 1] = hc
            .iter()
            .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
            .sum();
    }
    (matches, totals)
}

#[derive(Clone, Debug, Serialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus BLEU, unsmoothed: geometric mean of clipped n-gram precisions up
/// to order 4 times a brevity penalty, scaled to 0..=100. Any empty
/// precision bucket sends the score to 0.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Dim(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Data("BLEU over zero sentences".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let (m, t) = overlap(h, r);
        for n in 0..4 {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    let mut precisions = [0f64; 4];
    for n in 0..4 {
        precisions[n] = if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        brevity_penalty * log_mean.exp() * 100.0
    };
    Ok(BleuReport { score, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Sentence BLEU with add-one smoothing on orders 2..=4 (order 1 stays
/// raw), scaled to 0..=100. Suitable for per-sentence pairing.
pub fn sentence_bleu(hyp: &[u32], rf: &[u32]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let (matches, totals) = overlap(hyp, rf);
    let mut precisions = [0f64; 4];
    precisions[0] = if totals[0] == 0 {
        0.0
    } else {
        matches[0] as f64 / totals[0] as f64
    };
    for n in 1..4 {
        precisions[n] = (matches[n] + 1) as f64 / (totals[n] + 1) as f64;
    }
    if precisions[0] == 0.0 {
        return 0.0;
    }
    let bp = if hyp.len() < rf.len() {
        (1.0 - rf.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    bp * log_mean.exp() * 100.0
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SignTestReport {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Two-sided exact binomial sign test on win/loss counts (ties already
/// removed): `p = min(1, 2 * sum_{i<=min(w,l)} C(n,i) / 2^n)`.
pub fn sign_test_counts(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let m = wins.min(losses);
    // log-space partial binomial sum, stable for large n
    let ln2 = std::f64::consts::LN_2;
    let mut ln_c = 0.0f64; // ln C(n, 0)
    let mut terms = Vec::with_capacity(m + 1);
    for i in 0..=m {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        terms.push(ln_c);
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    let ln_tail = max + sum.ln() - n as f64 * ln2;
    (2.0 * ln_tail.exp()).min(1.0)
}

/// Pair two score lists, drop ties, and run the sign test.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> Result<SignTestReport> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Data("sign test over zero pairs".into()));
    }
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    Ok(SignTestReport { wins, losses, ties, p_value: sign_test_counts(wins, losses) })
}

/// Greedy-decode (or beam top-1) every source in a corpus and report BLEU
/// of the surfaces against the targets.
pub fn decode_corpus<F: Real>(
    params: &Seq2SeqParams<F>,
    corpus: &ParallelCorpus,
    cfg: &DecodeConfig,
    limit: usize,
) -> Result<(Vec<Hypothesis<F>>, BleuReport)> {
    cfg.validate()?;
    let take = if limit == 0 { corpus.len() } else { corpus.len().min(limit) };
    if take == 0 {
        return Err(Error::Data("decoding an empty corpus".into()));
    }
    let mut hyps = Vec::with_capacity(take);
    let mut surfaces = Vec::with_capacity(take);
    let mut refs = Vec::with_capacity(take);
    for (src, tgt) in corpus.pairs.iter().take(take) {
        let hyp = if cfg.beam == 1 {
            greedy_decode(params, src, cfg.max_len)?
        } else {
            beam_decode(params, src, cfg)?
                .into_iter()
                .next()
                .expect("beam returns at least one hypothesis")
        };
        surfaces.push(hyp.surface().to_vec());
        refs.push(tgt.clone());
        hyps.push(hyp);
    }
    let report = corpus_bleu(&surfaces, &refs)?;
    Ok((hyps, report))
}
