//! The release gate. One test per criterion, each printing a single
//! `ACCEPTANCE ... PASS` line with its evidence and elapsed time.
//!
//! The golden-run values in `PINNED_BLEU` were established by the first
//! passing battery on this platform and are pinned as regressions; the
//! qualitative claims (cross entropy rises after the loss switch, dev BLEU
//! does not fall) are asserted independently of the pins.
//!
//! Tests share a mutex so the per-criterion runtime budgets are measured
//! alone, not under a parallel golden run.

use std::sync::Mutex;
use std::time::Instant;

use dsd_core::controller::{Controller, ControllerConfig};
use dsd_core::corpus::{generate_task, DataSplits, TaskKind, TaskSpec};
use dsd_core::divergences::{
    cross_entropy, dsd_loss, kl, one_hot, skew_divergence, KlDirection, SkewConfig, UAggregation,
};
use dsd_core::eval::{
    beam_decode, corpus_bleu, greedy_decode, score_sequence, sentence_bleu, sign_test_counts,
    DecodeConfig,
};
use dsd_core::gradcheck::{loss_checks, model_check};
use dsd_core::numerics::Tensor;
use dsd_core::seq2seq::{Seq2SeqConfig, Seq2SeqParams};
use dsd_core::trainer::{
    train, ControllerSettings, LossKind, MetricsRecord, OptimizerKind, Phase, RunSink, SwitchRule,
    TrainConfig, TrainOutput,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

static GATE: Mutex<()> = Mutex::new(());

fn pass(name: &str, detail: &str, t0: Instant) {
    println!("ACCEPTANCE {}: PASS ({}, {:.1}s)", name, detail, t0.elapsed().as_secs_f64());
}

fn softmax(logits: &[f64]) -> Tensor<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| e / z).collect())
}

fn random_dist(rng: &mut ChaCha20Rng, v: usize, spread: f64) -> Tensor<f64> {
    let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-spread..spread)).collect();
    softmax(&logits)
}

#[test]
fn gradient_suite_matches_finite_differences() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut results = loss_checks(100, 20240).unwrap();
    results.push(model_check(20241).unwrap());
    let mut worst = 0.0f64;
    for r in &results {
        assert!(r.pass, "{} failed: max rel err {} vs tol {}", r.name, r.max_rel_err, r.tol);
        assert!(r.max_rel_err < 1e-5, "{}: {}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    assert!(t0.elapsed().as_secs() < 60, "budget is one minute");
    pass(
        "gradients",
        &format!("{} checks, worst rel err {:.2e} < 1e-5", results.len(), worst),
        t0,
    );
}

#[test]
fn divergence_identities_hold() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(555);
    let cfg = SkewConfig::<f64>::default();
    let eps = cfg.epsilon;

    // Mixture endpoints against the standalone skew divergence, on one-hot
    // references where the reference self-term vanishes.
    for case in 0..1000 {
        let v = rng.gen_range(2..=16);
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let row = Tensor::vector(logits.clone());
        let p = softmax(&logits);
        let target = rng.gen_range(0..v);
        let q = one_hot::<f64>(v, target).unwrap();

        let at1 = dsd_loss(std::slice::from_ref(&row), &[target], &cfg, 1.0).unwrap().value;
        let fwd = skew_divergence(&q, &p, cfg.alpha, eps).unwrap();
        assert!((at1 - fwd).abs() < 1e-9, "case {}: beta=1 {} vs skew(Q,P) {}", case, at1, fwd);

        let at0 = dsd_loss(&[row], &[target], &cfg, 0.0).unwrap().value;
        let rev = skew_divergence(&p, &q, cfg.alpha, eps).unwrap();
        assert!((at0 - rev).abs() < 1e-9, "case {}: beta=0 {} vs skew(P,Q) {}", case, at0, rev);
    }

    // Full skew toward the reference is an exact zero, not merely small.
    for _ in 0..100 {
        let v = rng.gen_range(2..=16);
        let f = random_dist(&mut rng, v, 4.0);
        let s = random_dist(&mut rng, v, 4.0);
        assert_eq!(skew_divergence(&f, &s, 1.0, eps).unwrap(), 0.0);
    }

    // Near-zero skew approaches plain KL. The first-order gap scales with
    // alpha times the density ratio, so the pairs keep ratios bounded
    // (logits within +/-1.5 gives max ratio e^3) for the 1e-6 budget.
    let mut worst_kl_gap = 0.0f64;
    for _ in 0..1000 {
        let v = rng.gen_range(2..=16);
        let f = random_dist(&mut rng, v, 1.5);
        let s = random_dist(&mut rng, v, 1.5);
        let sk = skew_divergence(&f, &s, 1e-8, eps).unwrap();
        let plain = kl(&f, &s, KlDirection::Forward, eps).unwrap();
        worst_kl_gap = worst_kl_gap.max((sk - plain).abs());
    }
    assert!(worst_kl_gap < 1e-6, "skew(alpha=1e-8) vs KL gap {}", worst_kl_gap);

    // Unsmoothed cross entropy equals forward KL from a one-hot reference.
    for _ in 0..1000 {
        let v = rng.gen_range(2..=16);
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let row = Tensor::vector(logits.clone());
        let p = softmax(&logits);
        let target = rng.gen_range(0..v);
        let q = one_hot::<f64>(v, target).unwrap();
        let ce = cross_entropy(&[row], &[target], 0.0, eps).unwrap().value;
        let fkl = kl(&q, &p, KlDirection::Forward, eps).unwrap();
        assert!((ce - fkl).abs() < 1e-9, "xent {} vs forward KL {}", ce, fkl);
    }

    assert!(t0.elapsed().as_secs() < 10, "budget is ten seconds");
    pass("divergence identities", &format!("worst KL gap {:.2e} < 1e-6", worst_kl_gap), t0);
}

#[test]
fn controller_dynamics_hold() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();

    // Zero error: k_p / (1 + e^0) + beta_min, exactly.
    let mut c = Controller::new(ControllerConfig::<f64>::with_set_point(2.0)).unwrap();
    for _ in 0..100 {
        assert_eq!(c.step(2.0).unwrap(), 0.855);
    }

    // One step at e = -2 folds the error into the integral immediately:
    // 0.01 / (1 + e^{-2}) + 1e-4 * 2 + 0.85.
    let mut c = Controller::new(ControllerConfig::<f64>::with_set_point(1.0)).unwrap();
    let beta = c.step(3.0).unwrap();
    assert!((beta - 0.85901).abs() < 1e-5, "single step at e=-2 gave {}", beta);

    // Bounds hold over random trajectories at wildly mixed scales.
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut emitted = 0usize;
    for _ in 0..10_000 {
        let set_point = rng.gen_range(-5.0..5.0);
        let mut c = Controller::new(ControllerConfig::<f64>::with_set_point(set_point)).unwrap();
        let len = rng.gen_range(1..=64);
        for _ in 0..len {
            let scale = 10f64.powi(rng.gen_range(-6..6));
            let u = rng.gen_range(-1.0..1.0) * scale + set_point;
            let beta = c.step(u).unwrap();
            assert!((0.85..=0.95).contains(&beta), "beta {} out of bounds", beta);
            emitted += 1;
        }
    }

    assert!(t0.elapsed().as_secs() < 5, "budget is five seconds");
    pass("controller dynamics", &format!("{} bounded emissions, fixed point 0.855", emitted), t0);
}

/// Every sequence a decoder could emit: EOS is the only terminator, length
/// capped. Written against the token alphabet alone so it cannot share bugs
/// with the beam.
fn enumerate_outputs(vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut stack: Vec<Vec<u32>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        for tok in 0..vocab as u32 {
            let mut s = prefix.clone();
            s.push(tok);
            if tok == dsd_core::corpus::EOS || s.len() == max_len {
                out.push(s);
            } else {
                stack.push(s);
            }
        }
    }
    out
}

#[test]
fn beam_search_reduces_to_greedy_and_to_exhaustive_argmax() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();

    let mut rng = ChaCha20Rng::seed_from_u64(4242);
    let mut checked = 0usize;
    for model_seed in 0..20 {
        let cfg = Seq2SeqConfig {
            src_vocab: 8,
            tgt_vocab: 8,
            embed_dim: 4,
            hidden_dim: 5,
            attn_dim: 4,
            max_src_len: 8,
            max_tgt_len: 8,
            init_seed: 9000 + model_seed,
        };
        let params = Seq2SeqParams::<f64>::init(&cfg).unwrap();
        for _ in 0..5 {
            let len = rng.gen_range(1..=6);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(4..8)).collect();
            let g = greedy_decode(&params, &src, 8).unwrap();
            let dcfg = DecodeConfig { beam: 1, max_len: 8, length_norm: 0.0 };
            let b = beam_decode(&params, &src, &dcfg).unwrap();
            assert_eq!(g.tokens, b[0].tokens);
            assert!((g.log_prob - b[0].log_prob).abs() < 1e-12);
            checked += 1;
        }
    }
    assert_eq!(checked, 100);

    // Width 64 covers the whole depth-3 tree over 4 tokens, so the top
    // hypothesis must equal brute-force argmax of the rescored candidates.
    let candidates = enumerate_outputs(4, 3);
    for model_seed in 0..50 {
        let cfg = Seq2SeqConfig {
            src_vocab: 4,
            tgt_vocab: 4,
            embed_dim: 4,
            hidden_dim: 5,
            attn_dim: 4,
            max_src_len: 8,
            max_tgt_len: 8,
            init_seed: 7000 + model_seed,
        };
        let params = Seq2SeqParams::<f64>::init(&cfg).unwrap();
        let src = vec![rng.gen_range(1..4u32), rng.gen_range(1..4u32)];
        let dcfg = DecodeConfig { beam: 64, max_len: 3, length_norm: 0.0 };
        let beam = beam_decode(&params, &src, &dcfg).unwrap();
        let mut best_lp = f64::NEG_INFINITY;
        let mut best_toks: &[u32] = &[];
        for cand in &candidates {
            let lp = score_sequence(&params, &src, cand).unwrap();
            if lp > best_lp {
                best_lp = lp;
                best_toks = cand;
            }
        }
        assert!(
            (beam[0].log_prob - best_lp).abs() < 1e-9,
            "model {}: beam {} vs brute force {}",
            model_seed,
            beam[0].log_prob,
            best_lp
        );
        // Token comparison only when the argmax is unambiguous.
        let runner_up = candidates
            .iter()
            .filter(|c| c.as_slice() != best_toks)
            .map(|c| score_sequence(&params, &src, c).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        if best_lp - runner_up > 1e-9 {
            assert_eq!(beam[0].tokens, best_toks, "model {}", model_seed);
        }
    }

    assert!(t0.elapsed().as_secs() < 30, "budget is thirty seconds");
    pass("decode correctness", "beam(1) == greedy x100, beam(64) == brute force x50", t0);
}

#[test]
fn bleu_and_sign_test_match_hand_counts() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();

    let mut rng = ChaCha20Rng::seed_from_u64(31337);
    let corpus: Vec<Vec<u32>> = (0..25)
        .map(|_| (0..rng.gen_range(1..12)).map(|_| rng.gen_range(4..30u32)).collect())
        .collect();
    let identical = corpus_bleu(&corpus, &corpus).unwrap();
    assert!((identical.score - 100.0).abs() < 1e-9);

    // hyp [4 5 6 9] vs ref [4 5 6 8 7], counted by hand: 1-gram 3/4,
    // 2-gram 2/3, 3-gram 1/2, 4-gram 0/1; c=4, r=5.
    let hyp = vec![vec![4u32, 5, 6, 9]];
    let rf = vec![vec![4u32, 5, 6, 8, 7]];
    let rep = corpus_bleu(&hyp, &rf).unwrap();
    assert!((rep.precisions[0] - 3.0 / 4.0).abs() < 1e-9);
    assert!((rep.precisions[1] - 2.0 / 3.0).abs() < 1e-9);
    assert!((rep.precisions[2] - 1.0 / 2.0).abs() < 1e-9);
    assert!(rep.precisions[3].abs() < 1e-9);
    assert!((rep.brevity_penalty - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
    assert!(rep.score.abs() < 1e-9, "a zero 4-gram count zeroes unsmoothed BLEU");

    // The smoothed per-sentence variant against the same counts, add-one
    // on orders above unigram.
    let smoothed = sentence_bleu(&hyp[0], &rf[0]);
    let p: [f64; 4] = [3.0 / 4.0, (2.0 + 1.0) / (3.0 + 1.0), (1.0 + 1.0) / (2.0 + 1.0), 1.0 / 2.0];
    let expect = (1.0f64 - 5.0 / 4.0).exp() * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp() * 100.0;
    assert!((smoothed - expect).abs() < 1e-9, "{} vs {}", smoothed, expect);

    // 10 wins, 0 losses, two-sided: 2 * (1/2)^10.
    let pval = sign_test_counts(10, 0);
    assert!((pval - 2.0 * 0.5f64.powi(10)).abs() < 1e-12, "{}", pval);

    pass("metrics", "BLEU identity, hand-counted case, exact sign test", t0);
}

const GOLDEN_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

/// Dev BLEU (switch step, final step) per seed, established on first run of
/// this battery. Tolerance covers libm-level drift, not behavior changes.
const PINNED_BLEU: [(f64, f64); 5] = [
    (2.6998537763516754, 15.820424694115912),
    (15.556633706655509, 15.835285583435486),
    (2.6090649541801576, 16.26717144532848),
    (15.176948098054519, 16.6709472405664),
    (0.0, 6.193728508173586),
];
const BLEU_PIN_TOL: f64 = 0.5;

fn golden_data() -> DataSplits {
    let task = TaskSpec {
        kind: TaskKind::SynonymNoise,
        src_vocab: 32,
        tgt_vocab: 32,
        len_min: 3,
        len_max: 8,
        synonyms: 2,
        noise: 0.05,
        pairs: 8000,
        seed: 2024,
    };
    generate_task(&task).unwrap()
}

/// The pinned end-to-end fixture: 3000 warmup steps of smoothed cross
/// entropy under Adam, then the controlled divergence under SGD at 0.1 for
/// 2000 steps and 0.05 for 1000 more. `controlled = false` keeps the warmup
/// loss throughout, isolating the optimizer switch.
fn golden_config(seed: u64, controlled: bool) -> TrainConfig<f64> {
    let tuned = if controlled {
        LossKind::Cdsd
    } else {
        LossKind::Xent { smoothing: 0.1 }
    };
    TrainConfig {
        model: Seq2SeqConfig {
            src_vocab: 32,
            tgt_vocab: 32,
            embed_dim: 24,
            hidden_dim: 48,
            attn_dim: 48,
            max_src_len: 8,
            max_tgt_len: 10,
            init_seed: seed,
        },
        phases: vec![
            Phase {
                start_step: 0,
                loss: LossKind::Xent { smoothing: 0.1 },
                optimizer: OptimizerKind::Adam,
                lr: 3e-4,
            },
            Phase { start_step: 3000, loss: tuned, optimizer: OptimizerKind::Sgd, lr: 0.1 },
            Phase { start_step: 5000, loss: tuned, optimizer: OptimizerKind::Sgd, lr: 0.05 },
        ],
        switch_rule: SwitchRule::Fixed,
        total_steps: 6000,
        batch_size: 4,
        seed,
        skew: SkewConfig::default(),
        u_aggregation: UAggregation::MeanPerToken,
        controller: ControllerSettings::default(),
        clip_norm: Some(5.0),
        log_interval: 1,
        eval_interval: 500,
        eval_max_sentences: 0,
        decode: DecodeConfig::greedy(10),
        log_timings: false,
    }
}

fn record_at(metrics: &[MetricsRecord], step: u64) -> &MetricsRecord {
    metrics.iter().find(|r| r.step == step).unwrap_or_else(|| panic!("no record at {}", step))
}

fn xent_window_mean(metrics: &[MetricsRecord], lo: u64, hi: u64) -> f64 {
    let vals: Vec<f64> =
        metrics.iter().filter(|r| r.step >= lo && r.step < hi).map(|r| r.xent).collect();
    assert_eq!(vals.len(), (hi - lo) as usize, "window [{}, {}) incomplete", lo, hi);
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn golden_runs_show_the_loss_switch_signature() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let data = golden_data();

    let mut switch_bleu = Vec::new();
    let mut final_bleu = Vec::new();
    let mut first_run: Option<(TrainOutput<f64>, f64)> = None;
    for (i, &seed) in GOLDEN_SEEDS.iter().enumerate() {
        let run_t0 = Instant::now();
        let out = train(&golden_config(seed, true), &data.train, Some(&data.dev), None).unwrap();
        let run_secs = run_t0.elapsed().as_secs_f64();
        assert!(run_secs < 900.0, "a single golden run must stay under 15 minutes");

        // Training cross entropy rises when the objective stops being
        // cross entropy: 200-step means either side of the switch.
        let pre = xent_window_mean(&out.metrics, 2800, 3000);
        let post = xent_window_mean(&out.metrics, 3000, 3200);
        assert!(
            post > pre,
            "seed {}: post-switch CE {:.4} should exceed pre-switch {:.4}",
            seed,
            post,
            pre
        );

        let sw = record_at(&out.metrics, 2999).dev_bleu.unwrap();
        let fin = record_at(&out.metrics, 5999).dev_bleu.unwrap();
        let (pin_sw, pin_fin) = PINNED_BLEU[i];
        assert!(
            (sw - pin_sw).abs() < BLEU_PIN_TOL,
            "seed {}: switch BLEU {} drifted from pinned {}",
            seed,
            sw,
            pin_sw
        );
        assert!(
            (fin - pin_fin).abs() < BLEU_PIN_TOL,
            "seed {}: final BLEU {} drifted from pinned {}",
            seed,
            fin,
            pin_fin
        );
        switch_bleu.push(sw);
        final_bleu.push(fin);
        if first_run.is_none() {
            first_run = Some((out, run_secs));
        }
    }

    let wins = switch_bleu.iter().zip(&final_bleu).filter(|(s, f)| f >= s).count();
    assert!(wins >= 3, "final dev BLEU >= switch BLEU in only {}/5 seeds", wins);
    let med_sw = median(switch_bleu.clone());
    let med_fin = median(final_bleu.clone());
    assert!(med_fin > med_sw, "median dev BLEU {} -> {} did not improve", med_sw, med_fin);

    // Control arm: switch only the optimizer, keep the warmup loss. It must
    // run to completion and emit records of the identical shape.
    let (cdsd_run, _) = first_run.unwrap();
    let control = train(&golden_config(GOLDEN_SEEDS[0], false), &data.train, Some(&data.dev), None)
        .unwrap();
    assert_eq!(control.final_step, cdsd_run.final_step);
    assert_eq!(control.metrics.len(), cdsd_run.metrics.len());
    let keys = |r: &MetricsRecord| -> Vec<String> {
        serde_json::to_value(r).unwrap().as_object().unwrap().keys().cloned().collect()
    };
    assert_eq!(keys(&control.metrics[0]), keys(&cdsd_run.metrics[0]));
    assert_eq!(
        keys(control.metrics.last().unwrap()),
        keys(cdsd_run.metrics.last().unwrap())
    );
    assert!(control.metrics.iter().all(|r| r.beta.is_none()), "no controller in the control arm");
    assert!(control.metrics.iter().all(|r| r.u.is_some()), "divergence still observed");
    let control_pre = xent_window_mean(&control.metrics, 2800, 3000);
    let control_post = xent_window_mean(&control.metrics, 3000, 3200);

    pass(
        "golden run",
        &format!(
            "CE up 5/5, BLEU wins {}/5, median {:.2} -> {:.2}, control CE {:.3} -> {:.3}",
            wins, med_sw, med_fin, control_pre, control_post
        ),
        t0,
    );
}

#[test]
fn golden_rerun_is_bit_identical() {
    let _g = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let data = golden_data();
    let cfg = golden_config(GOLDEN_SEEDS[0], true);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for dir in [dir_a.path(), dir_b.path()] {
        let mut sink = RunSink::create(dir).unwrap();
        train(&cfg, &data.train, Some(&data.dev), Some(&mut sink)).unwrap();
        bytes.push(std::fs::read(dir.join("metrics.jsonl")).unwrap());
    }
    assert!(!bytes[0].is_empty());
    assert_eq!(bytes[0], bytes[1], "same seed, same platform, same log bytes");

    pass("determinism", &format!("{} metric bytes reproduced exactly", bytes[0].len()), t0);
}
