//! `PTPC` checkpoint files.
//!
//! Same container style as the dataset format, but parameters are stored
//! as `f64` so a reload is bit-exact:
//!
//! ```text
//! "PTPC" | u32 version=1 | u32 d | u32 M | u64 n_classes | u64 encoder_seed | [u8; 32] config hash
//! n_classes × { u32 class_id | u32 proto_task | u32 prompt_task | u8 proto_frozen | u8 prompt_frozen
//!               | d × f64 prototype | M·d × f64 prompt }
//! ```

use std::fs;
use std::path::Path;

use crate::embedding_io::ByteCursor;
use crate::error::{Error, Result};
use crate::model::{Banks, PromptBank, PrototypeBank};
use crate::numerics::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub banks: Banks,
    pub encoder_seed: u64,
    pub config_hash: [u8; 32],
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let b = &ckpt.banks;
    let (d, m) = (b.dim(), b.prompt_len());
    let mut out = Vec::with_capacity(60 + b.len() * (14 + 8 * d * (m + 1)));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.encoder_seed.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash);
    for i in 0..b.len() {
        out.extend_from_slice(&b.class_ids()[i].to_le_bytes());
        out.extend_from_slice(&(b.prototypes.task_of[i] as u32).to_le_bytes());
        out.extend_from_slice(&(b.prompts.task_of[i] as u32).to_le_bytes());
        out.push(b.prototypes.frozen[i] as u8);
        out.push(b.prompts.frozen[i] as u8);
        for x in b.prototype(i) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in b.prompt(i).as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn flag(cur: &mut ByteCursor<'_>, what: &str) -> Result<bool> {
    let at = cur.offset();
    match cur.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::format(at, format!("invalid {what} byte {v}"))),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = ByteCursor::new(bytes);
    cur.expect_magic(CHECKPOINT_MAGIC)?;
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let d = cur.u32("dimension")? as usize;
    let m = cur.u32("prompt length")? as usize;
    let n = cur.u64("class count")? as usize;
    let encoder_seed = cur.u64("encoder seed")?;
    let config_hash: [u8; 32] = cur.take(32, "config hash")?.try_into().unwrap();

    let mut class_ids = Vec::new();
    let mut rows = Mat::zeros(0, d);
    let mut pf = Vec::new();
    let mut pt = Vec::new();
    let mut blocks = Vec::new();
    let mut qf = Vec::new();
    let mut qt = Vec::new();
    for _ in 0..n {
        class_ids.push(cur.u32("class id")?);
        pt.push(cur.u32("prototype task")? as usize);
        qt.push(cur.u32("prompt task")? as usize);
        pf.push(flag(&mut cur, "prototype frozen flag")?);
        qf.push(flag(&mut cur, "prompt frozen flag")?);
        rows.push_row(&cur.f64s(d, "prototype")?)?;
        blocks.push(Mat::from_vec(m, d, cur.f64s(m * d, "prompt")?)?);
    }
    cur.finish()?;
    let banks = Banks::from_parts(
        d,
        m,
        class_ids,
        PrototypeBank {
            rows,
            frozen: pf,
            task_of: pt,
        },
        PromptBank {
            blocks,
            frozen: qf,
            task_of: qt,
        },
    )?;
    Ok(Checkpoint {
        banks,
        encoder_seed,
        config_hash,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
