//! One function per subcommand. Each validates its inputs fully before
//! touching the filesystem, then delegates to the library.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use dsd_core::controller::simulate;
use dsd_core::corpus::{generate_task, load_tsv, save_tsv, ParallelCorpus, BOS, EOS, PAD, UNK};
use dsd_core::eval::{decode_corpus, paired_sign_test, sentence_bleu, DecodeConfig, SignTestReport};
use dsd_core::gradcheck::run_all;
use dsd_core::seq2seq::checkpoint;
use dsd_core::trainer::{
    latest_checkpoint, resume, train, ControllerSettings, LossKind, RunSink, SetPoint,
    TrainConfig, TrainOutput,
};
use dsd_core::{Error, Result};

use crate::config::RunConfig;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numeric(format!("serialization failed: {}", e)))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct VocabFile {
    src_vocab: usize,
    tgt_vocab: usize,
    pad: u32,
    bos: u32,
    eos: u32,
    unk: u32,
    first_content: u32,
}

pub fn cmd_generate(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config_path)?;
    let task = run.task()?;
    let dir: PathBuf = out
        .map(Path::to_path_buf)
        .or_else(|| run.data_dir.clone())
        .ok_or_else(|| Error::Config("no destination (set data_dir or pass --out)".into()))?;
    // Generation validates the task spec and must fail before any file
    // exists, so it runs ahead of directory creation.
    let splits = generate_task(task)?;
    fs::create_dir_all(&dir)?;
    save_tsv(&splits.train, &dir.join("train.tsv"))?;
    save_tsv(&splits.dev, &dir.join("dev.tsv"))?;
    save_tsv(&splits.test, &dir.join("test.tsv"))?;
    let vocab = VocabFile {
        src_vocab: task.src_vocab,
        tgt_vocab: task.tgt_vocab,
        pad: PAD,
        bos: BOS,
        eos: EOS,
        unk: UNK,
        first_content: dsd_core::corpus::FIRST_CONTENT,
    };
    write_json(&dir.join("vocab.json"), &vocab)?;
    println!(
        "wrote {} train / {} dev / {} test pairs to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    format: &'static str,
    version: &'static str,
    created_unix_ms: u64,
    command: &'static str,
    seed: u64,
    /// Fixed mixing weight substituted into divergence phases (sweep runs).
    beta_override: Option<f64>,
    config: &'a RunConfig,
    planned_files: [&'static str; 3],
}

#[derive(Serialize)]
struct StatusFile {
    state: &'static str,
    final_step: Option<u64>,
    resolved_starts: Vec<u64>,
    resolved_total: Option<u64>,
    error: Option<String>,
}

pub struct TrainFlags {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: bool,
    pub beta_sweep: bool,
}

#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    dev_bleu: Option<f64>,
}

pub fn cmd_train(config_path: &Path, flags: &TrainFlags) -> Result<()> {
    let mut run = RunConfig::load(config_path)?;
    if let Some(s) = flags.seed {
        run.seed = s;
    }
    let tcfg = run.train_config()?;
    tcfg.validate()?;
    let data_dir = run.data_dir()?;
    let train_corpus = load_tsv(&data_dir.join("train.tsv"))?;
    let dev_path = data_dir.join("dev.tsv");
    let dev = if dev_path.exists() { Some(load_tsv(&dev_path)?) } else { None };
    let run_dir = run.run_dir(flags.out.as_deref())?;

    if flags.beta_sweep {
        if flags.resume {
            return Err(Error::Config("--resume cannot be combined with --beta-sweep".into()));
        }
        let mut rows = Vec::new();
        for beta in [0.0, 0.5, 1.0] {
            let sub = run_dir.join(format!("beta-{:.1}", beta));
            let mut cfg_b = tcfg.clone();
            for ph in &mut cfg_b.phases {
                if matches!(ph.loss, LossKind::Cdsd | LossKind::Dsd { .. }) {
                    ph.loss = LossKind::Dsd { beta };
                }
            }
            let out = run_one(&run, &cfg_b, &train_corpus, dev.as_ref(), &sub, false, Some(beta))?;
            let dev_bleu = final_dev_bleu(&cfg_b, &out, dev.as_ref())?;
            println!(
                "beta {:.1}: final step {}, dev bleu {}",
                beta,
                out.final_step,
                dev_bleu.map_or("n/a".to_string(), |b| format!("{:.2}", b))
            );
            rows.push(SweepRow { beta, dev_bleu });
        }
        write_json(&run_dir.join("sweep.json"), &rows)?;
    } else {
        let out = run_one(&run, &tcfg, &train_corpus, dev.as_ref(), &run_dir, flags.resume, None)?;
        println!(
            "finished at step {} with {} metric records in {}",
            out.final_step,
            out.metrics.len(),
            run_dir.display()
        );
    }
    Ok(())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn run_one(
    run: &RunConfig,
    cfg: &TrainConfig<f64>,
    train_corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    dir: &Path,
    resume_flag: bool,
    beta_override: Option<f64>,
) -> Result<TrainOutput<f64>> {
    fs::create_dir_all(dir)?;
    if !resume_flag {
        let manifest = RunManifest {
            format: "dsdlab-manifest-v1",
            version: env!("CARGO_PKG_VERSION"),
            created_unix_ms: now_ms(),
            command: "train",
            seed: run.seed,
            beta_override,
            config: run,
            planned_files: ["metrics.jsonl", "status.json", "ckpt-final.bin"],
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    let mut sink = if resume_flag { RunSink::append(dir)? } else { RunSink::create(dir)? };
    let result = if resume_flag {
        let ckpt = latest_checkpoint(dir)?.ok_or_else(|| {
            Error::Config(format!("no checkpoint to resume from in {}", dir.display()))
        })?;
        resume(cfg, train_corpus, dev, Some(&mut sink), &ckpt)
    } else {
        train(cfg, train_corpus, dev, Some(&mut sink))
    };
    match result {
        Ok(out) => {
            write_json(
                &dir.join("status.json"),
                &StatusFile {
                    state: "completed",
                    final_step: Some(out.final_step),
                    resolved_starts: out.resolved_starts.clone(),
                    resolved_total: Some(out.resolved_total),
                    error: None,
                },
            )?;
            Ok(out)
        }
        Err(e) => {
            // Partial outputs (metrics so far, abort checkpoint) stay on
            // disk; the status file records what happened.
            let _ = write_json(
                &dir.join("status.json"),
                &StatusFile {
                    state: "aborted",
                    final_step: None,
                    resolved_starts: vec![],
                    resolved_total: None,
                    error: Some(e.to_string()),
                },
            );
            Err(e)
        }
    }
}

fn final_dev_bleu(
    cfg: &TrainConfig<f64>,
    out: &TrainOutput<f64>,
    dev: Option<&ParallelCorpus>,
) -> Result<Option<f64>> {
    match dev {
        None => Ok(None),
        Some(d) => {
            let (_, report) = decode_corpus(&out.params, d, &cfg.decode, cfg.eval_max_sentences)?;
            Ok(Some(report.score))
        }
    }
}

pub struct EvalFlags {
    pub out: Option<PathBuf>,
    pub beams: Vec<usize>,
    pub beam_sweep: bool,
    pub baseline: Option<PathBuf>,
}

#[derive(Serialize)]
struct BeamRow {
    beam: usize,
    bleu: f64,
    brevity_penalty: f64,
    hyp_len: usize,
    ref_len: usize,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    beam: usize,
    length_norm: f64,
    checkpoint: String,
    sentences: usize,
    bleu: &'a dsd_core::eval::BleuReport,
}

#[derive(Serialize)]
struct SignTestFile {
    baseline: String,
    report: SignTestReport,
}

pub fn cmd_eval(config_path: &Path, flags: &EvalFlags) -> Result<()> {
    let run = RunConfig::load(config_path)?;
    let data_dir = run.data_dir()?;
    let test = load_tsv(&data_dir.join("test.tsv"))?;
    let run_dir = run.run_dir(flags.out.as_deref())?;
    let ckpt_path = {
        let f = run_dir.join("ckpt-final.bin");
        if f.exists() {
            f
        } else {
            latest_checkpoint(&run_dir)?.ok_or_else(|| {
                Error::Config(format!("no checkpoint found in {}", run_dir.display()))
            })?
        }
    };
    let (meta, blocks) = checkpoint::load::<f64>(&ckpt_path)?;
    let params = checkpoint::params_from_blocks(&meta.model, &blocks)?;
    for (i, (src, tgt)) in test.pairs.iter().enumerate() {
        if src.iter().any(|&t| t as usize >= meta.model.src_vocab)
            || tgt.iter().any(|&t| t as usize >= meta.model.tgt_vocab)
        {
            return Err(Error::Data(format!(
                "test pair {} does not fit the checkpointed vocabulary ({} source, {} target)",
                i, meta.model.src_vocab, meta.model.tgt_vocab
            )));
        }
        if src.len() > meta.model.max_src_len {
            return Err(Error::Data(format!(
                "test pair {} is longer than the checkpointed model's source limit {}",
                i, meta.model.max_src_len
            )));
        }
    }

    let base_decode = run.decode.resolve(meta.model.max_tgt_len);
    let widths: Vec<usize> = if flags.beam_sweep {
        vec![1, 3, 5, 25, 100]
    } else if !flags.beams.is_empty() {
        flags.beams.clone()
    } else {
        vec![base_decode.beam]
    };

    let mut rows = Vec::new();
    let mut first_surfaces: Option<Vec<Vec<u32>>> = None;
    for &b in &widths {
        let dcfg = DecodeConfig { beam: b, ..base_decode };
        let (hyps, report) = decode_corpus(&params, &test, &dcfg, 0)?;
        let surfaces: Vec<Vec<u32>> = hyps.iter().map(|h| h.surface().to_vec()).collect();
        if !flags.beam_sweep {
            let lines: Vec<String> = surfaces
                .iter()
                .map(|s| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
                .collect();
            fs::write(run_dir.join(format!("decodes-beam{}.txt", b)), lines.join("\n") + "\n")?;
            write_json(
                &run_dir.join(format!("report-beam{}.json", b)),
                &EvalReport {
                    beam: b,
                    length_norm: dcfg.length_norm,
                    checkpoint: ckpt_path.display().to_string(),
                    sentences: surfaces.len(),
                    bleu: &report,
                },
            )?;
        }
        println!(
            "beam {:>3}  bleu {:>6.2}  bp {:.4}  hyp/ref {}/{}",
            b, report.score, report.brevity_penalty, report.hyp_len, report.ref_len
        );
        rows.push(BeamRow {
            beam: b,
            bleu: report.score,
            brevity_penalty: report.brevity_penalty,
            hyp_len: report.hyp_len,
            ref_len: report.ref_len,
        });
        if first_surfaces.is_none() {
            first_surfaces = Some(surfaces);
        }
    }
    if flags.beam_sweep {
        write_json(&run_dir.join("beam-sweep.json"), &rows)?;
    }

    if let Some(baseline_path) = &flags.baseline {
        let baseline = read_decode_file(baseline_path)?;
        let system = first_surfaces.expect("at least one width decoded");
        if baseline.len() != system.len() {
            return Err(Error::Data(format!(
                "baseline has {} hypotheses, test set has {}",
                baseline.len(),
                system.len()
            )));
        }
        let sys_scores: Vec<f64> = system
            .iter()
            .zip(&test.pairs)
            .map(|(h, (_, r))| sentence_bleu(h, r))
            .collect();
        let base_scores: Vec<f64> = baseline
            .iter()
            .zip(&test.pairs)
            .map(|(h, (_, r))| sentence_bleu(h, r))
            .collect();
        let report = paired_sign_test(&sys_scores, &base_scores)?;
        println!(
            "sign test vs {}: wins {} losses {} ties {} p {:.6}",
            baseline_path.display(),
            report.wins,
            report.losses,
            report.ties,
            report.p_value
        );
        write_json(
            &run_dir.join("sign-test.json"),
            &SignTestFile { baseline: baseline_path.display().to_string(), report },
        )?;
    }
    Ok(())
}

/// Decode files hold one hypothesis per line as space-separated token ids.
fn read_decode_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let t: u32 = tok.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("expected a token id, got {:?}", tok),
            })?;
            row.push(t);
        }
        out.push(row);
    }
    Ok(out)
}

pub fn cmd_gradcheck(trials: usize, seed: u64) -> Result<i32> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let results = run_all(trials, seed)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<22} max_rel_err {:>12.3e}   tol {:.0e}   {}",
            r.name,
            r.max_rel_err,
            r.tol,
            if r.pass { "PASS" } else { "FAIL" }
        );
        ok &= r.pass;
    }
    Ok(if ok { 0 } else { 3 })
}

pub fn cmd_controller_sim(
    config_path: Option<&Path>,
    input: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let settings: ControllerSettings<f64> = match config_path {
        Some(p) => RunConfig::load(p)?.controller,
        None => ControllerSettings::default(),
    };
    let text = fs::read_to_string(input)?;
    let mut us: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("expected a number, got {:?}", t),
        })?;
        us.push(v);
    }
    if us.is_empty() {
        return Err(Error::Data("no divergence readings in input".into()));
    }
    // Without a fixed set point the first reading serves as one, so a
    // constant trajectory sits exactly at the controller's fixed point.
    let sp = match settings.set_point {
        SetPoint::Fixed { value } => value,
        SetPoint::Auto => us[0],
    };
    let betas = simulate(&settings.resolve(sp), &us)?;
    let mut csv = String::from("t,u,e,beta\n");
    for (t, (u, b)) in us.iter().zip(&betas).enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", t, u, sp - u, b));
    }
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("controller-sim.csv");
            fs::write(&path, csv)?;
            println!("wrote {} rows to {}", us.len(), path.display());
        }
        None => print!("{}", csv),
    }
    Ok(())
}
