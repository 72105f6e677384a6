//! Binary checkpoint format.
//!
//! ```text
//! magic      5 bytes   "GPCK1"
//! layers     u32 LE
//! hidden     u32 LE
//! heads      u32 LE
//! ffn        u32 LE
//! vocab      u32 LE
//! max_seq    u32 LE
//! norm_kind  u8        0 = layer-norm, 1 = rms-norm
//! seed       u64 LE
//! tensors    f64 LE, in the order of `ModelWeights::tensors`:
//!            embedding (vocab×hidden), positions (max_seq×hidden),
//!            per layer: norm1 gain, norm1 bias, Wq, Wk, Wv, Wo,
//!                       norm2 gain, norm2 bias, W1 (hidden×ffn), W2 (ffn×hidden),
//!            final norm gain, final norm bias, head (hidden×vocab)
//! ```
//!
//! Matrices are row-major. The file must end exactly after the last tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::tensor::NormKind;

pub const MAGIC: &[u8; 5] = b"GPCK1";

pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    for v in [c.layers, c.hidden, c.heads, c.ffn, c.vocab, c.max_seq] {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} exceeds u32")))?;
        w.write_u32::<LittleEndian>(v)?;
    }
    w.write_u8(c.norm_kind.code())?;
    w.write_u64::<LittleEndian>(c.seed)?;
    for t in model.weights.tensors() {
        for &v in t {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Checkpoint("truncated header".into()))? as usize;
    }
    let code = r.read_u8().map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let norm_kind = NormKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown norm code {code}")))?;
    let seed = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let config = ModelConfig {
        layers: dims[0],
        hidden: dims[1],
        heads: dims[2],
        ffn: dims[3],
        vocab: dims[4],
        max_seq: dims[5],
        norm_kind,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    let mut weights = ModelWeights::zeros(&config);
    for t in weights.tensors_mut() {
        r.read_f64_into::<LittleEndian>(t)
            .map_err(|_| Error::Checkpoint("truncated tensor data".into()))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Model::new(config, weights).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        Model::init(ModelConfig {
            layers: 2,
            hidden: 4,
            heads: 2,
            ffn: 6,
            vocab: 3,
            max_seq: 5,
            norm_kind: NormKind::RmsNorm,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        assert_eq!(&buf[..5], b"GPCK1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.weights, m.weights);
    }

    #[test]
    fn rejects_corruption() {
        let m = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));

        let short = &buf[..buf.len() - 8];
        assert!(read_checkpoint(&mut &short[..]).is_err());

        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice()).is_err());

        let mut nan = buf.clone();
        let at = buf.len() - 8;
        nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(read_checkpoint(&mut nan.as_slice()).is_err());

        // heads = 3 does not divide hidden = 4
        let mut heads = buf;
        heads[13..17].copy_from_slice(&3u32.to_le_bytes());
        assert!(read_checkpoint(&mut heads.as_slice()).is_err());
    }
}
