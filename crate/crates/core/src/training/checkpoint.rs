//! Binary checkpoint container. The byte layout is documented in
//! `docs/checkpoint.md`; all integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::model::{ModelConfig, ModelParams, NpcrfModel, UnaryKind};
use crate::dataset::TypeVocabulary;
use crate::error::{Error, Result};
use crate::potentials::{Ffn, FfnKind};
use crate::unary::BagEncoderParams;

pub const MAGIC: &[u8; 8] = b"NPCRFCKP";
pub const VERSION: u32 = 1;

/// A saved model together with its label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: TypeVocabulary,
    pub model: NpcrfModel,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| ckpt_err(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.bytes(len)?).map_err(|_| ckpt_err("string is not UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.model.config;
        let p = &self.model.params;
        let (n, d) = p.embeddings.dim();
        let hidden = match &p.ffn0 {
            Ffn::Hidden { w1, .. } => w1.nrows(),
            _ => 0,
        };
        let rank = match &p.ffn0 {
            Ffn::Hidden { w2, .. } => w2.nrows(),
            Ffn::Linear { w } => w.nrows(),
            Ffn::Identity => d,
        };
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        for v in [n, d, hidden, rank, cfg.mfvi.iterations] {
            out.extend((v as u64).to_le_bytes());
        }
        out.extend(cfg.mfvi.step_size.to_le_bytes());
        out.extend(cfg.alpha.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(cfg).expect("config serializes"));
        out.extend((self.vocab.len() as u64).to_le_bytes());
        for phrase in self.vocab.phrases() {
            put_str(&mut out, phrase);
        }
        let tensors = p.tensors();
        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            put_str(&mut out, &name);
            out.extend((shape.len() as u32).to_le_bytes());
            for dim in shape {
                out.extend((dim as u64).to_le_bytes());
            }
            for x in data {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { inner: bytes };
        if r.bytes(8)? != MAGIC {
            return Err(ckpt_err("bad magic, not an npcrf checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let hidden = r.u64()? as usize;
        let rank = r.u64()? as usize;
        let iterations = r.u64()? as usize;
        let step_size = r.f64()?;
        let alpha = r.f64()?;
        let config: ModelConfig =
            serde_json::from_str(&r.string()?).map_err(|e| ckpt_err(format!("config snapshot: {e}")))?;
        if config.mfvi.iterations != iterations
            || config.mfvi.step_size.to_bits() != step_size.to_bits()
            || config.alpha.to_bits() != alpha.to_bits()
        {
            return Err(ckpt_err("header disagrees with config snapshot"));
        }
        let vocab_len = r.u64()? as usize;
        if vocab_len != n {
            return Err(ckpt_err(format!("header says {n} types, vocabulary has {vocab_len}")));
        }
        let phrases = (0..vocab_len).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let vocab = TypeVocabulary::new(phrases)?;

        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, shape, data));
        }
        if !r.inner.is_empty() {
            return Err(ckpt_err("trailing bytes after tensors"));
        }

        let mut take = |name: &str, shape: Option<&[usize]>| -> Result<(Vec<usize>, Vec<f64>)> {
            let pos = tensors
                .iter()
                .position(|(n, _, _)| n == name)
                .ok_or_else(|| ckpt_err(format!("missing tensor `{name}`")))?;
            let (_, s, data) = tensors.swap_remove(pos);
            if let Some(shape) = shape {
                if s != shape {
                    return Err(ckpt_err(format!("tensor `{name}` has shape {s:?}, expected {shape:?}")));
                }
            }
            Ok((s, data))
        };
        let mut mat = |name: &str, r: usize, c: usize| -> Result<Array2<f64>> {
            let (_, data) = take(name, Some(&[r, c]))?;
            Ok(Array2::from_shape_vec((r, c), data).expect("shape checked"))
        };

        let embeddings = mat("embeddings", n, d)?;
        let mut ffn = |prefix: &str| -> Result<Ffn> {
            Ok(match config.ffn {
                FfnKind::Hidden => Ffn::Hidden {
                    w1: mat(&format!("{prefix}.w1"), hidden, d)?,
                    w2: mat(&format!("{prefix}.w2"), rank, hidden)?,
                },
                FfnKind::Linear => Ffn::Linear {
                    w: mat(&format!("{prefix}.w"), rank, d)?,
                },
                FfnKind::Identity => Ffn::Identity,
            })
        };
        let ffn0 = ffn("ffn0")?;
        let ffn1 = ffn("ffn1")?;
        let unary = match config.unary {
            UnaryKind::Precomputed => None,
            UnaryKind::Bag { .. } => {
                let (shape, data) = take("unary.projection", None)?;
                let &[rows, wd] = shape.as_slice() else {
                    return Err(ckpt_err("unary.projection must be 2-d"));
                };
                if rows != n {
                    return Err(ckpt_err(format!("unary.projection has {rows} rows, expected {n}")));
                }
                let projection = Array2::from_shape_vec((n, wd), data).expect("shape checked");
                let bias = Array1::from(take("unary.bias", Some(&[n]))?.1);
                Some(BagEncoderParams { projection, bias })
            }
        };
        if let Some((name, _, _)) = tensors.first() {
            return Err(ckpt_err(format!("unexpected tensor `{name}`")));
        }
        Ok(Checkpoint {
            vocab,
            model: NpcrfModel {
                config,
                params: ModelParams {
                    embeddings,
                    ffn0,
                    ffn1,
                    unary,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
