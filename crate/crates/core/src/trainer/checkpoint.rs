//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u64` unless noted:
//!
//! ```text
//! magic "MFPARSE\0" | version u32
//! word pos hidden edge label binary | formulation u8 | activation u8 | T
//! words, tags, labels: count, then (byte length, UTF-8 bytes) per entry
//! tensor count, then per tensor: rank, shape..., f64 values row-major
//! ```

use std::path::Path;

use crate::decoder::Formulation;
use crate::error::{Error, Result};
use crate::scorer::{Activation, ModelConfig, ModelDims, ModelParams, Vocab};

const MAGIC: &[u8; 8] = b"MFPARSE\0";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn strings(&mut self, items: &[String]) {
        self.u64(items.len() as u64);
        for s in items {
            self.u64(s.len() as u64);
            self.0.extend_from_slice(s.as_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn strings(&mut self) -> Result<Vec<String>> {
        let count = self.usize()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.usize()?;
            let raw = self.take(len)?;
            out.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| Error::Format("vocabulary entry is not UTF-8".into()))?,
            );
        }
        Ok(out)
    }
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    let c = &params.config;
    let d = c.dims;
    for x in [d.word, d.pos, d.hidden, d.edge, d.label, d.binary] {
        w.u64(x as u64);
    }
    w.0.push(match c.formulation {
        Formulation::Local => 0,
        Formulation::Single => 1,
    });
    w.0.push(match c.activation {
        Activation::Identity => 0,
        Activation::Tanh => 1,
    });
    w.u64(c.iterations as u64);
    w.strings(&params.vocab.words);
    w.strings(&params.vocab.tags);
    w.strings(&params.vocab.labels);
    w.u64(params.tensors.len() as u64);
    for t in &params.tensors {
        w.u64(t.ndim() as u64);
        for &s in t.shape() {
            w.u64(s as u64);
        }
        for x in t.iter() {
            w.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let mut dim = || r.usize();
    let dims = ModelDims {
        word: dim()?,
        pos: dim()?,
        hidden: dim()?,
        edge: dim()?,
        label: dim()?,
        binary: dim()?,
    };
    let formulation = match r.u8()? {
        0 => Formulation::Local,
        1 => Formulation::Single,
        x => return Err(Error::Format(format!("bad formulation tag {}", x))),
    };
    let activation = match r.u8()? {
        0 => Activation::Identity,
        1 => Activation::Tanh,
        x => return Err(Error::Format(format!("bad activation tag {}", x))),
    };
    let iterations = r.usize()?;
    let vocab = Vocab::new(r.strings()?, r.strings()?, r.strings()?)?;
    let config = ModelConfig {
        dims,
        formulation,
        iterations,
        activation,
    };
    let mut params = ModelParams::zeros(config, vocab)?;
    let count = r.usize()?;
    if count != params.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            count,
            params.tensors.len()
        )));
    }
    for (idx, t) in params.tensors.iter_mut().enumerate() {
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, expected {:?}",
                idx,
                shape,
                t.shape()
            )));
        }
        for x in t.iter_mut() {
            *x = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn save<P: AsRef<Path>>(params: &ModelParams, path: P) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{Sentence, Token};

    fn params() -> ModelParams {
        let s = Sentence::from_tokens(vec![Token::new("x", "X", 0, "root"), Token::new("é", "Y", 1, "dep")]);
        let vocab = Vocab::from_corpus(&[s]).unwrap();
        let config = ModelConfig {
            dims: ModelDims::uniform(3),
            formulation: Formulation::Single,
            iterations: 2,
            activation: Activation::Tanh,
        };
        ModelParams::new(config, vocab, 4).unwrap()
    }

    #[test]
    fn round_trip() {
        let p = params();
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&params());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }
}
