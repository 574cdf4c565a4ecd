//! Trainer checkpoints: magic `CKP1`, a little-endian `u32` length, a JSON
//! header, a `u64` value count and the parameters followed by both Adam
//! moments as little-endian `f64`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Student, StudentConfig};
use super::optim::Adam;
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

#[derive(Serialize, Deserialize)]
struct Header {
    student: StudentConfig,
    train: TrainConfig,
    input_dim: usize,
    teacher_dim: usize,
    step: usize,
    adam_t: u64,
}

pub fn encode_checkpoint(trainer: &Trainer) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        student: trainer.student.config.clone(),
        train: trainer.config.clone(),
        input_dim: trainer.input_dim,
        teacher_dim: trainer.teacher_dim,
        step: trainer.step,
        adam_t: trainer.optimizer.t,
    })?;
    let tensors = trainer.student.params.tensors();
    let values = tensors
        .iter()
        .copied()
        .chain(trainer.optimizer.m.iter().map(Vec::as_slice))
        .chain(trainer.optimizer.v.iter().map(Vec::as_slice))
        .flatten();
    let count = 3 * trainer.student.params.num_params();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated {
            expected: n,
            found: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<Trainer> {
    let magic = take(&mut bytes, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader(format!("bad checkpoint magic {magic:?}")));
    }
    let len = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;
    let count = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    // shapes come from the config; values are overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut student = Student::new(header.student, header.input_dim, header.teacher_dim, &mut rng)?;
    let n = student.params.num_params();
    if count != 3 * n {
        return Err(Error::MalformedHeader(format!("{count} values for {n} parameters")));
    }
    let payload = take(&mut bytes, 8 * count)?;
    if !bytes.is_empty() {
        return Err(Error::MalformedHeader(format!("{} trailing bytes", bytes.len())));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in student.params.tensors_mut() {
        for x in t.iter_mut() {
            *x = values.next().expect("counted");
        }
    }
    let mut optimizer = Adam::new(header.train.optimizer, &student.params);
    optimizer.t = header.adam_t;
    for moment in [&mut optimizer.m, &mut optimizer.v] {
        for t in moment.iter_mut() {
            for x in t.iter_mut() {
                *x = values.next().expect("counted");
            }
        }
    }
    Ok(Trainer {
        student,
        config: header.train,
        optimizer,
        step: header.step,
        input_dim: header.input_dim,
        teacher_dim: header.teacher_dim,
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(trainer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    decode_checkpoint(&fs::read(path)?)
}
