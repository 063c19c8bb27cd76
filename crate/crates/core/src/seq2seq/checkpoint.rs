//! Single-file checkpoints: line 1 is a JSON header describing the run
//! state and the block table; the rest is the blocks' raw data as
//! little-endian f64, concatenated in declared order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerSnapshot;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::numerics::Tensor;

use super::{GruParams, Seq2SeqConfig, Seq2SeqParams, GRU_FIELDS};

pub const FORMAT_TAG: &str = "dsdlab-ckpt-v1";

/// Where the data cursor stood when the checkpoint was written; batching is
/// a pure function of (seed, epoch), so `(epoch, pos)` pins the next batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub epoch: u64,
    pub pos: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: u64,
    pub phase: usize,
    pub model: Seq2SeqConfig,
    pub controller: Option<ControllerSnapshot>,
    /// Optimizer kind whose state blocks (if any) ride along, plus its
    /// step count for bias correction.
    pub optimizer: Option<String>,
    pub optimizer_steps: u64,
    pub rng: RngCursor,
    /// Phase start steps after any plateau shift.
    #[serde(default)]
    pub resolved_starts: Vec<u64>,
    /// Shifted total step count (0 means "as configured").
    #[serde(default)]
    pub resolved_total: u64,
    /// Recent maximum-likelihood loss values feeding the auto set point.
    #[serde(default)]
    pub ml_window: Vec<f64>,
    /// Dev-loss plateau tracking: best value seen and evals since.
    #[serde(default)]
    pub plateau_best: Option<f64>,
    #[serde(default)]
    pub plateau_since: usize,
    pub blocks: Vec<BlockInfo>,
}

/// Write a checkpoint. Blocks land in the order given here and the header's
/// block table is rebuilt to match.
pub fn save<F: Real>(
    path: &Path,
    mut meta: CheckpointMeta,
    blocks: &[(String, &Tensor<F>)],
) -> Result<()> {
    meta.format = FORMAT_TAG.to_string();
    meta.blocks = blocks
        .iter()
        .map(|(name, t)| BlockInfo { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = serde_json::to_string(&meta)
        .map_err(|e| Error::Numeric(format!("header serialization failed: {}", e)))?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for (_, t) in blocks {
        for &x in t.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Owned name/tensor pairs in on-disk order.
pub type NamedBlocks<F> = Vec<(String, Tensor<F>)>;

/// Read a checkpoint back. The format tag, block sizes, and total file
/// length are all verified; any mismatch is an error, never a panic.
pub fn load<F: Real>(path: &Path) -> Result<(CheckpointMeta, NamedBlocks<F>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => {
                return Err(Error::Parse { line: 1, msg: "checkpoint header is unterminated".into() })
            }
            _ if byte[0] == b'\n' => break,
            _ => header.push(byte[0]),
        }
    }
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad checkpoint header: {}", e) })?;
    if meta.format != FORMAT_TAG {
        return Err(Error::Data(format!(
            "checkpoint format {:?} is not {:?}",
            meta.format, FORMAT_TAG
        )));
    }
    let mut blocks = Vec::with_capacity(meta.blocks.len());
    for info in &meta.blocks {
        let len: usize = info.shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw).map_err(|_| {
            Error::Data(format!("checkpoint block {:?} is truncated", info.name))
        })?;
        let data: Vec<F> = raw
            .chunks_exact(8)
            .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        blocks.push((info.name.clone(), Tensor::new(info.shape.clone(), data)?));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Data("checkpoint has trailing bytes".into()));
    }
    Ok((meta, blocks))
}

/// Model tensors in canonical order, ready for `save`.
pub fn param_blocks<F: Real>(params: &Seq2SeqParams<F>) -> Vec<(String, &Tensor<F>)> {
    params.named_tensors()
}

/// Rebuild parameters from loaded blocks. Model blocks must appear with
/// their canonical names and shapes; extra blocks (optimizer state) are
/// ignored here.
pub fn params_from_blocks<F: Real>(
    config: &Seq2SeqConfig,
    blocks: &[(String, Tensor<F>)],
) -> Result<Seq2SeqParams<F>> {
    config.validate()?;
    let find = |name: &str| -> Result<Tensor<F>> {
        blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Data(format!("checkpoint is missing block {:?}", name)))
    };
    let gru = |prefix: &str| -> Result<GruParams<F>> {
        let mut ts = Vec::with_capacity(9);
        for f in GRU_FIELDS {
            ts.push(find(&format!("{}.{}", prefix, f))?);
        }
        Ok(GruParams {
            wz: ts[0].clone(),
            uz: ts[1].clone(),
            bz: ts[2].clone(),
            wr: ts[3].clone(),
            ur: ts[4].clone(),
            br: ts[5].clone(),
            wh: ts[6].clone(),
            uh: ts[7].clone(),
            bh: ts[8].clone(),
        })
    };
    let params = Seq2SeqParams {
        config: *config,
        src_embed: find("src_embed")?,
        tgt_embed: find("tgt_embed")?,
        enc_fwd: gru("enc_fwd")?,
        enc_bwd: gru("enc_bwd")?,
        dec: gru("dec")?,
        attn_w: find("attn_w")?,
        attn_u: find("attn_u")?,
        attn_b: find("attn_b")?,
        attn_v: find("attn_v")?,
        init_w: find("init_w")?,
        init_b: find("init_b")?,
        out_w: find("out_w")?,
        out_b: find("out_b")?,
    };
    let reference = Seq2SeqParams::<F>::init(config)?;
    for ((name, got), (_, want)) in params.named_tensors().iter().zip(reference.named_tensors()) {
        if got.shape() != want.shape() {
            return Err(Error::Data(format!(
                "block {:?} has shape {:?}, model wants {:?}",
                name,
                got.shape(),
                want.shape()
            )));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(config: Seq2SeqConfig) -> CheckpointMeta {
        CheckpointMeta {
            format: String::new(),
            step: 42,
            phase: 1,
            model: config,
            controller: None,
            optimizer: Some("sgd".into()),
            optimizer_steps: 42,
            rng: RngCursor { seed: 9, epoch: 2, pos: 17 },
            resolved_starts: vec![0, 30],
            resolved_total: 100,
            ml_window: vec![1.5, 1.4],
            plateau_best: None,
            plateau_since: 0,
            blocks: vec![],
        }
    }

    fn config() -> Seq2SeqConfig {
        Seq2SeqConfig {
            src_vocab: 8,
            tgt_vocab: 8,
            embed_dim: 3,
            hidden_dim: 4,
            attn_dim: 3,
            max_src_len: 6,
            max_tgt_len: 6,
            init_seed: 77,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = Seq2SeqParams::<f64>::init(&config()).unwrap();
        let named: Vec<(String, &Tensor<f64>)> = param_blocks(&params);
        save(&path, meta(config()), &named).unwrap();
        let (meta2, blocks) = load::<f64>(&path).unwrap();
        assert_eq!(meta2.format, FORMAT_TAG);
        assert_eq!(meta2.step, 42);
        assert_eq!(meta2.rng, RngCursor { seed: 9, epoch: 2, pos: 17 });
        assert_eq!(meta2.blocks.len(), 37);
        let rebuilt = params_from_blocks(&config(), &blocks).unwrap();
        for ((na, ta), (_, tb)) in params.named_tensors().iter().zip(rebuilt.named_tensors()) {
            assert_eq!(ta.data(), tb.data(), "{}", na);
        }
    }

    #[test]
    fn corrupted_header_is_an_error_not_a_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"{not json\njunk").unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, b"no newline at all").unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrong_tag_truncation_and_trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = Seq2SeqParams::<f64>::init(&config()).unwrap();
        save(&path, meta(config()), &param_blocks(&params)).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 5];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Data(_))));

        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, extended).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Data(_))));

        let text = String::from_utf8_lossy(&bytes);
        let swapped = text.replacen(FORMAT_TAG, "dsdlab-ckpt-v9", 1);
        std::fs::write(&path, swapped.as_bytes()).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Data(_))));
    }

    #[test]
    fn missing_and_misshapen_blocks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = Seq2SeqParams::<f64>::init(&config()).unwrap();
        let mut named = param_blocks(&params);
        named.retain(|(n, _)| n != "attn_v");
        save(&path, meta(config()), &named).unwrap();
        let (_, blocks) = load::<f64>(&path).unwrap();
        assert!(matches!(
            params_from_blocks(&config(), &blocks),
            Err(Error::Data(_))
        ));

        let mut other = config();
        other.hidden_dim = 5;
        let (_, blocks) = {
            save(&path, meta(config()), &param_blocks(&params)).unwrap();
            load::<f64>(&path).unwrap()
        };
        assert!(matches!(
            params_from_blocks(&other, &blocks),
            Err(Error::Data(_))
        ));
    }
}
