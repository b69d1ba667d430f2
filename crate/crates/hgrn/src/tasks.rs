//! Deterministic generators for synthetic long-range tasks and a
//! byte-level corpus loader.
//!
//! Token conventions for the synthetic kinds: token 0 is BLANK, token 1 is
//! DELIM, and payload symbols are drawn from `2..vocab_size`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgrnError, Result};
use crate::train::{BatchSource, Sample};

pub const BLANK: usize = 0;
pub const DELIM: usize = 1;
/// First payload symbol; the payload alphabet is `RESERVED..vocab_size`.
pub const RESERVED: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    SelectiveCopy,
    Induction,
    ByteLm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    #[serde(default = "default_payload")]
    pub payload_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_payload() -> usize {
    8
}
fn default_vocab() -> usize {
    16
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == TaskKind::ByteLm {
            return Ok(());
        }
        if self.vocab_size <= RESERVED + 1 {
            return Err(HgrnError::Config(format!(
                "vocab_size {} leaves no payload alphabet beyond the reserved tokens",
                self.vocab_size
            )));
        }
        if self.payload_len == 0 || self.payload_len >= self.seq_len {
            return Err(HgrnError::Config(format!(
                "payload_len {} must be in 1..seq_len ({})",
                self.payload_len, self.seq_len
            )));
        }
        let needed = match self.kind {
            TaskKind::Copy | TaskKind::SelectiveCopy => 2 * self.payload_len + 1,
            TaskKind::Induction => 2 * self.payload_len + 2,
            TaskKind::ByteLm => unreachable!(),
        };
        if self.seq_len < needed {
            return Err(HgrnError::Config(format!(
                "seq_len {} too short for {:?} with payload_len {} (needs >= {needed})",
                self.seq_len, self.kind, self.payload_len
            )));
        }
        Ok(())
    }

    fn rng_for(&self, index: u64) -> ChaCha8Rng {
        // distinct stream per (seed, index) pair
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ index)
    }
}

/// Dispatches on `spec.kind` (synthetic kinds only).
pub fn gen_sample(spec: &TaskSpec, index: u64) -> Result<Sample> {
    match spec.kind {
        TaskKind::Copy => gen_copy(spec, index),
        TaskKind::SelectiveCopy => gen_selective_copy(spec, index),
        TaskKind::Induction => gen_induction(spec, index),
        TaskKind::ByteLm => Err(HgrnError::Contract(
            "byte_lm samples come from a corpus, not a generator".into(),
        )),
    }
}

fn random_payload(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..spec.payload_len)
        .map(|_| rng.gen_range(RESERVED..spec.vocab_size))
        .collect()
}

/// Payload, BLANK gap, DELIM, then the model must emit the payload.
/// The loss mask covers only the answer span.
pub fn gen_copy(spec: &TaskSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    if spec.kind != TaskKind::Copy {
        return Err(HgrnError::Contract("gen_copy requires kind = copy".into()));
    }
    let mut rng = spec.rng_for(index);
    let payload = random_payload(spec, &mut rng);
    Ok(layout_copy_answer(spec, |tokens| {
        tokens[..spec.payload_len].copy_from_slice(&payload);
        payload.clone()
    }))
}

/// Payload tokens scattered at random distinct positions among BLANKs;
/// after DELIM the model must emit them in position order.
pub fn gen_selective_copy(spec: &TaskSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    if spec.kind != TaskKind::SelectiveCopy {
        return Err(HgrnError::Contract(
            "gen_selective_copy requires kind = selective_copy".into(),
        ));
    }
    let mut rng = spec.rng_for(index);
    let payload = random_payload(spec, &mut rng);
    let region = spec.seq_len - spec.payload_len - 1; // everything before DELIM
    let mut positions: Vec<usize> = (0..region).collect();
    positions.shuffle(&mut rng);
    let mut positions: Vec<usize> = positions[..spec.payload_len].to_vec();
    positions.sort_unstable();
    Ok(layout_copy_answer(spec, |tokens| {
        for (pos, &sym) in positions.iter().zip(&payload) {
            tokens[*pos] = sym;
        }
        payload.clone()
    }))
}

/// Shared tail layout for copy-style tasks: DELIM at `seq_len - payload_len
/// - 1`, then teacher-forced answer tokens; targets/mask on the answer span.
fn layout_copy_answer(
    spec: &TaskSpec,
    fill_prefix: impl FnOnce(&mut [usize]) -> Vec<usize>,
) -> Sample {
    let n = spec.seq_len;
    let p = spec.payload_len;
    let delim_pos = n - p - 1;
    let mut tokens = vec![BLANK; n];
    let answer = fill_prefix(&mut tokens[..delim_pos]);
    tokens[delim_pos] = DELIM;
    // inputs after DELIM are the answer shifted right by one (teacher forcing)
    for j in 0..p - 1 {
        tokens[delim_pos + 1 + j] = answer[j];
    }
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for j in 0..p {
        targets[delim_pos + j] = answer[j];
        mask[delim_pos + j] = true;
    }
    Sample {
        tokens,
        targets,
        mask,
    }
}

/// Key–value pairs scattered early in the sequence; the final token queries
/// one key and the (masked-to-last-position) target is its value.
pub fn gen_induction(spec: &TaskSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    if spec.kind != TaskKind::Induction {
        return Err(HgrnError::Contract(
            "gen_induction requires kind = induction".into(),
        ));
    }
    let mut rng = spec.rng_for(index);
    let n = spec.seq_len;
    let m = spec.payload_len; // number of pairs
    let alphabet: Vec<usize> = (RESERVED..spec.vocab_size).collect();
    let mut keys = alphabet.clone();
    keys.shuffle(&mut rng);
    let keys: Vec<usize> = keys.into_iter().take(m).collect();
    if keys.len() < m {
        return Err(HgrnError::Config(format!(
            "vocab_size {} provides only {} distinct keys, need {m}",
            spec.vocab_size,
            spec.vocab_size - RESERVED
        )));
    }
    let values: Vec<usize> = (0..m)
        .map(|_| rng.gen_range(RESERVED..spec.vocab_size))
        .collect();
    let mut tokens = vec![BLANK; n];
    for (i, (&k, &v)) in keys.iter().zip(&values).enumerate() {
        tokens[2 * i] = k;
        tokens[2 * i + 1] = v;
    }
    let query_idx = rng.gen_range(0..m);
    tokens[n - 2] = DELIM;
    tokens[n - 1] = keys[query_idx];
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    targets[n - 1] = values[query_idx];
    mask[n - 1] = true;
    Ok(Sample {
        tokens,
        targets,
        mask,
    })
}

/// Synthetic tasks as a training batch stream: the batch at `step` holds
/// samples with indices `(step-1)*batch_size ..`.
pub struct TaskSource {
    pub spec: TaskSpec,
}

impl BatchSource for TaskSource {
    fn batch(&self, step: usize, batch_size: usize) -> Vec<Sample> {
        (0..batch_size)
            .map(|lane| {
                gen_sample(
                    &self.spec,
                    (step as u64 - 1) * batch_size as u64 + lane as u64,
                )
                .expect("task spec validated before training")
            })
            .collect()
    }
}

/// Byte corpus as a training batch stream: deterministic random windows.
pub struct CorpusSource {
    pub corpus: Vec<usize>,
    pub seq_len: usize,
    pub seed: u64,
}

impl BatchSource for CorpusSource {
    fn batch(&self, step: usize, batch_size: usize) -> Vec<Sample> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x2545f4914f6cdd1d) ^ step as u64);
        let max_start = self.corpus.len() - self.seq_len - 1;
        (0..batch_size)
            .map(|_| {
                let s = rng.gen_range(0..=max_start);
                Sample {
                    tokens: self.corpus[s..s + self.seq_len].to_vec(),
                    targets: self.corpus[s + 1..s + self.seq_len + 1].to_vec(),
                    mask: vec![true; self.seq_len],
                }
            })
            .collect()
    }
}

pub const BYTE_VOCAB: usize = 256;

/// Reads a raw byte file as tokens 0..=255 and splits it contiguously:
/// the first `floor(len * split_ratio)` tokens are train, the rest val.
pub fn load_byte_corpus(path: &Path, split_ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(HgrnError::Config(format!(
            "split_ratio {split_ratio} outside [0, 1]"
        )));
    }
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(HgrnError::Contract(format!(
            "corpus file {} is empty",
            path.display()
        )));
    }
    let tokens = tokenize_bytes(&bytes);
    let cut = (bytes.len() as f64 * split_ratio).floor() as usize;
    let (train, val) = tokens.split_at(cut);
    Ok((train.to_vec(), val.to_vec()))
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize_bytes(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t)
                .map_err(|_| HgrnError::Contract(format!("token {t} outside byte range")))
        })
        .collect()
}

const BATCH_MAGIC: &[u8; 4] = b"HGRB";
const BATCH_VERSION: u32 = 1;

/// Writes samples to a binary fixture file: magic, version, counts, then
/// per sample u32-LE tokens, u32-LE targets, u8 mask.
pub fn write_batch_file(path: &Path, samples: &[Sample]) -> Result<()> {
    let n = samples
        .first()
        .map(|s| s.tokens.len())
        .ok_or_else(|| HgrnError::Contract("refusing to write an empty batch file".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(BATCH_MAGIC);
    buf.extend_from_slice(&BATCH_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for s in samples {
        if s.tokens.len() != n || s.targets.len() != n || s.mask.len() != n {
            return Err(HgrnError::Shape(
                "all samples in a batch file must share seq_len".into(),
            ));
        }
        for &t in &s.tokens {
            buf.extend_from_slice(&(t as u32).to_le_bytes());
        }
        for &t in &s.targets {
            buf.extend_from_slice(&(t as u32).to_le_bytes());
        }
        for &m in &s.mask {
            buf.push(m as u8);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_batch_file(path: &Path) -> Result<Vec<Sample>> {
    let buf = std::fs::read(path)?;
    let fail = |msg: &str| HgrnError::Checkpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 16 || &buf[0..4] != BATCH_MAGIC {
        return Err(fail("not a batch file (bad magic)"));
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    if rd_u32(4) != BATCH_VERSION as usize {
        return Err(fail("unsupported version"));
    }
    let count = rd_u32(8);
    let n = rd_u32(12);
    let per_sample = 4 * n + 4 * n + n;
    if buf.len() != 16 + count * per_sample {
        return Err(fail("truncated or oversized payload"));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let base = 16 + i * per_sample;
        let tokens = (0..n).map(|j| rd_u32(base + 4 * j)).collect();
        let targets = (0..n).map(|j| rd_u32(base + 4 * n + 4 * j)).collect();
        let mask = (0..n).map(|j| buf[base + 8 * n + j] != 0).collect();
        samples.push(Sample {
            tokens,
            targets,
            mask,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, seq_len: usize, payload_len: usize) -> TaskSpec {
        TaskSpec {
            kind,
            seq_len,
            payload_len,
            vocab_size: 16,
            seed: 7,
        }
    }

    #[test]
    fn copy_layout() {
        let s = spec(TaskKind::Copy, 12, 3);
        let sample = gen_copy(&s, 0).unwrap();
        assert_eq!(sample.tokens.len(), 12);
        let payload = &sample.tokens[..3];
        assert!(payload.iter().all(|&t| t >= RESERVED && t < 16));
        // gap of BLANKs, then DELIM at position 8
        assert!(sample.tokens[3..8].iter().all(|&t| t == BLANK));
        assert_eq!(sample.tokens[8], DELIM);
        // answer span: targets at 8..=10 are the payload, mask only there
        assert_eq!(&sample.targets[8..11], payload);
        assert_eq!(sample.mask.iter().filter(|&&m| m).count(), 3);
        assert!(sample.mask[8] && sample.mask[9] && sample.mask[10]);
        // teacher forcing: inputs after DELIM are payload shifted
        assert_eq!(sample.tokens[9], sample.targets[8]);
        assert_eq!(sample.tokens[10], sample.targets[9]);
    }

    #[test]
    fn same_seed_same_sample() {
        let s = spec(TaskKind::SelectiveCopy, 32, 5);
        assert_eq!(gen_sample(&s, 3).unwrap(), gen_sample(&s, 3).unwrap());
        assert_ne!(gen_sample(&s, 3).unwrap(), gen_sample(&s, 4).unwrap());
        let mut s2 = s.clone();
        s2.seed = 8;
        assert_ne!(gen_sample(&s, 3).unwrap(), gen_sample(&s2, 3).unwrap());
    }

    #[test]
    fn selective_copy_order_and_invariance() {
        let s = spec(TaskKind::SelectiveCopy, 16, 3);
        for idx in 0..50 {
            let sample = gen_selective_copy(&s, idx).unwrap();
            let delim_pos = 16 - 3 - 1;
            assert_eq!(sample.tokens[delim_pos], DELIM);
            // payload tokens in the scatter region, in index order
            let scattered: Vec<usize> = sample.tokens[..delim_pos]
                .iter()
                .copied()
                .filter(|&t| t != BLANK)
                .collect();
            assert_eq!(scattered.len(), 3);
            assert_eq!(&sample.targets[delim_pos..delim_pos + 3], &scattered[..]);
            assert_eq!(sample.mask.iter().filter(|&&m| m).count(), 3);
        }
    }

    #[test]
    fn induction_query_always_present() {
        let s = spec(TaskKind::Induction, 24, 4);
        for idx in 0..100 {
            let sample = gen_induction(&s, idx).unwrap();
            let query = sample.tokens[23];
            assert_eq!(sample.tokens[22], DELIM);
            // find the query key among the pairs; its value is the target
            let mut found = None;
            for i in 0..4 {
                if sample.tokens[2 * i] == query {
                    found = Some(sample.tokens[2 * i + 1]);
                }
            }
            assert_eq!(found, Some(sample.targets[23]));
            assert_eq!(sample.mask.iter().filter(|&&m| m).count(), 1);
            assert!(sample.mask[23]);
        }
    }

    #[test]
    fn spec_violations_rejected() {
        assert!(spec(TaskKind::Copy, 6, 3).validate().is_err()); // needs 7
        assert!(spec(TaskKind::Copy, 7, 3).validate().is_ok());
        assert!(spec(TaskKind::Induction, 9, 4).validate().is_err()); // needs 10
        let mut tiny = spec(TaskKind::Copy, 12, 3);
        tiny.vocab_size = 3;
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn byte_corpus_split_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let bytes: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
        std::fs::write(&path, &bytes).unwrap();
        let (train, val) = load_byte_corpus(&path, 0.9).unwrap();
        assert_eq!(train.len(), 900);
        assert_eq!(val.len(), 100);
        assert!(train.iter().chain(&val).all(|&t| t < BYTE_VOCAB));
        let mut all = train.clone();
        all.extend(&val);
        assert_eq!(detokenize_bytes(&all).unwrap(), bytes);
        // empty file is an error
        let empty = dir.path().join("empty.bin");
        std::fs::write(&empty, b"").unwrap();
        assert!(load_byte_corpus(&empty, 0.9).is_err());
        assert!(load_byte_corpus(&dir.path().join("missing"), 0.9).is_err());
    }

    #[test]
    fn batch_file_round_trip() {
        let s = spec(TaskKind::Copy, 12, 3);
        let samples: Vec<Sample> = (0..5).map(|i| gen_copy(&s, i).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.hgrb");
        write_batch_file(&path, &samples).unwrap();
        assert_eq!(read_batch_file(&path).unwrap(), samples);
        // corrupting the magic is detected
        let mut buf = std::fs::read(&path).unwrap();
        buf[0] = b'X';
        std::fs::write(&path, &buf).unwrap();
        assert!(read_batch_file(&path).is_err());
    }

    #[test]
    fn task_source_is_deterministic_per_step() {
        let src = TaskSource {
            spec: spec(TaskKind::SelectiveCopy, 32, 5),
        };
        assert_eq!(src.batch(1, 4), src.batch(1, 4));
        assert_ne!(src.batch(1, 4), src.batch(2, 4));
        // batches at different steps use disjoint sample indices
        let b1 = src.batch(1, 2);
        let b2 = src.batch(2, 2);
        assert_ne!(b1[0], b2[0]);
    }

    #[test]
    fn corpus_source_windows() {
        let corpus: Vec<usize> = (0..200).map(|i| i % 256).collect();
        let src = CorpusSource {
            corpus,
            seq_len: 16,
            seed: 1,
        };
        let batch = src.batch(1, 3);
        assert_eq!(src.batch(1, 3), batch);
        for s in &batch {
            assert_eq!(s.tokens.len(), 16);
            // targets are the next-token shift of the window
            assert_eq!(s.targets[0], (s.tokens[0] + 1) % 256);
            assert!(s.mask.iter().all(|&m| m));
        }
    }
}
