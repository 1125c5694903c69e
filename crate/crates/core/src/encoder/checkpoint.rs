//! Binary checkpoint container for a [`TriEncoder`].
//!
//! ```text
//! magic        8 bytes  "SQRTCKPT"
//! version      u32 LE
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON (dim, lambda, tau, vocab, shapes)
//! tensors      f32 LE, row-major, in header order:
//!              query.embeddings, query.projection,
//!              selected.embeddings, selected.projection,
//!              candidate.embeddings, candidate.projection
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, Matrix, TriEncoder, Vocabulary};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SQRTCKPT";
const TENSOR_NAMES: [&str; 6] = [
    "query.embeddings",
    "query.projection",
    "selected.embeddings",
    "selected.projection",
    "candidate.embeddings",
    "candidate.projection",
];

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dim: usize,
    lambda: f64,
    tau: f64,
    vocab: Vec<String>,
    tensors: Vec<TensorShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

fn matrices(tri: &TriEncoder) -> [&Matrix; 6] {
    [
        &tri.query_enc.embeddings,
        &tri.query_enc.projection,
        &tri.selected_enc.embeddings,
        &tri.selected_enc.projection,
        &tri.candidate_enc.embeddings,
        &tri.candidate_enc.projection,
    ]
}

pub fn write_checkpoint(tri: &TriEncoder, out: &mut impl Write) -> Result<()> {
    let mats = matrices(tri);
    let header = Header {
        version: CHECKPOINT_VERSION,
        dim: tri.dim(),
        lambda: tri.lambda,
        tau: tri.tau,
        vocab: tri.vocab.tokens().to_vec(),
        tensors: TENSOR_NAMES
            .iter()
            .zip(mats)
            .map(|(name, m)| TensorShape {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for m in mats {
        let mut buf = Vec::with_capacity(m.data.len() * 4);
        for &v in &m.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<TriEncoder> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.tensors.len() != 6 {
        return Err(bad(format!("expected 6 tensors, found {}", header.tensors.len())));
    }
    let v = header.vocab.len();
    let d = header.dim;
    let mut mats = Vec::with_capacity(6);
    for (i, shape) in header.tensors.iter().enumerate() {
        let expected = if i % 2 == 0 { (v, d) } else { (d, d) };
        if shape.name != TENSOR_NAMES[i] || (shape.rows, shape.cols) != expected {
            return Err(bad(format!(
                "tensor {i} is `{}` {}x{}, expected `{}` {}x{}",
                shape.name, shape.rows, shape.cols, TENSOR_NAMES[i], expected.0, expected.1
            )));
        }
        let mut raw = vec![0u8; shape.rows * shape.cols * 4];
        input.read_exact(&mut raw)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("non-finite entries in `{}`", shape.name)));
        }
        mats.push(Matrix {
            rows: shape.rows,
            cols: shape.cols,
            data,
        });
    }
    if !(header.tau > 0.0) {
        return Err(bad(format!("temperature must be positive, got {}", header.tau)));
    }
    let mut it = mats.into_iter();
    let mut next_encoder = || EncoderParams {
        embeddings: it.next().expect("six tensors"),
        projection: it.next().expect("six tensors"),
    };
    let query_enc = next_encoder();
    let selected_enc = next_encoder();
    let candidate_enc = next_encoder();
    Ok(TriEncoder {
        vocab: Vocabulary::from_tokens(header.vocab),
        query_enc,
        selected_enc,
        candidate_enc,
        lambda: header.lambda,
        tau: header.tau,
    })
}

pub fn save_checkpoint(tri: &TriEncoder, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(tri, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TriEncoder> {
    let mut file = std::io::BufReader::new(fs::File::open(path)?);
    read_checkpoint(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn round_trip_preserves_f32_values() {
        let vocab = Vocabulary::build(["find dog cat"]);
        let tri = TriEncoder::new(vocab, 5, 0.1, 0.2, &mut seeded_rng(2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&tri, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.vocab, tri.vocab);
        assert_eq!(back.lambda, 0.1);
        assert_eq!(back.tau, 0.2);
        for (a, b) in tri.slices().iter().zip(back.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // A second round trip is exact.
        let mut buf2 = Vec::new();
        write_checkpoint(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let vocab = Vocabulary::build(["a"]);
        let tri = TriEncoder::new(vocab, 2, 0.1, 0.2, &mut seeded_rng(2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&tri, &mut buf).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_checkpoint(&mut wrong.as_slice()), Err(Error::Checkpoint(_))));
        let mut wrong = buf.clone();
        wrong[8] = 99;
        assert!(matches!(read_checkpoint(&mut wrong.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }
}
