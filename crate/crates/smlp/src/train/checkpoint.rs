//! Checkpoint container: a text header (format version, config digest, the
//! full model config, epoch, optimizer step, RNG state) followed by one
//! record per tensor — name, shape, then the raw little-endian f32 payload.
//! Loading verifies the config digest and every record length; round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::arch::config::{hex_string, ModelConfig};
use crate::arch::model::Model;
use crate::error::{Error, Result};
use crate::params::ParamKind;
use crate::tensor::Tensor;
use crate::train::cifar::Normalize;
use crate::train::optim::AdamState;

const MAGIC: &str = "smlp-checkpoint v1";

#[derive(Clone, Debug)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub digest: String,
    pub epoch: usize,
    pub opt_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Input-pipeline normalization the weights were trained with.
    pub norm: Normalize,
    pub records: Vec<Record>,
}

fn config_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    opt: Option<&AdamState<f32>>,
    epoch: usize,
    rng: &ChaCha8Rng,
    norm: &Normalize,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let config_text = model.config.to_text();

    let mut records: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (_, entry) in model.params.entries() {
        let prefix = if entry.kind == ParamKind::Buffer {
            "buffer"
        } else {
            "param"
        };
        records.push((format!("{prefix}.{}", entry.name), &entry.value));
    }
    if let Some(opt) = opt {
        for (id, entry) in model.params.entries() {
            if let Some(m) = &opt.m[id.index()] {
                records.push((format!("opt.m.{}", entry.name), m));
            }
            if let Some(v) = &opt.v[id.index()] {
                records.push((format!("opt.v.{}", entry.name), v));
            }
        }
    }

    writeln!(w, "{MAGIC}")?;
    writeln!(w, "digest {}", config_digest(&config_text))?;
    writeln!(w, "config_bytes {}", config_text.len())?;
    w.write_all(config_text.as_bytes())?;
    writeln!(w, "epoch {epoch}")?;
    writeln!(w, "opt_step {}", opt.map(|o| o.step).unwrap_or(0))?;
    writeln!(w, "rng_seed {}", hex_string(&rng.get_seed()))?;
    writeln!(w, "rng_word_pos {}", rng.get_word_pos())?;
    writeln!(
        w,
        "norm_mean {} {} {}",
        norm.mean[0], norm.mean[1], norm.mean[2]
    )?;
    writeln!(
        w,
        "norm_std {} {} {}",
        norm.std[0], norm.std[1], norm.std[2]
    )?;
    writeln!(w, "records {}", records.len())?;
    for (name, tensor) in records {
        write!(w, "tensor {name} {}", tensor.rank())?;
        for d in tensor.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        writeln!(w)?;
    }
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self.inner.read_line(&mut buf)?;
        if n == 0 {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        Ok(buf.trim_end_matches('\n').to_string())
    }

    fn keyed_line(&mut self, key: &str) -> Result<String> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::format(self.path, format!("expected '{key} ...', got '{line}'")))
    }

    fn exact(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated payload"))?;
        Ok(buf)
    }
}

fn parse_hex32(raw: &str, path: &str) -> Result<[u8; 32]> {
    if raw.len() != 64 || !raw.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::format(path, "malformed rng seed"));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in raw.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16).unwrap() as u8;
        let lo = (chunk[1] as char).to_digit(16).unwrap() as u8;
        out[i] = hi << 4 | lo;
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: &display,
    };
    let magic = r.line()?;
    if magic != MAGIC {
        return Err(Error::format(&display, format!("bad magic '{magic}'")));
    }
    let digest = r.keyed_line("digest")?;
    let config_len: usize = r
        .keyed_line("config_bytes")?
        .parse()
        .map_err(|_| Error::format(&display, "bad config length"))?;
    let config_text = String::from_utf8(r.exact(config_len)?)
        .map_err(|_| Error::format(&display, "config is not utf-8"))?;
    let recomputed = config_digest(&config_text);
    if recomputed != digest {
        return Err(Error::DigestMismatch {
            expected: digest,
            actual: recomputed,
        });
    }
    let epoch: usize = r
        .keyed_line("epoch")?
        .parse()
        .map_err(|_| Error::format(&display, "bad epoch"))?;
    let opt_step: u64 = r
        .keyed_line("opt_step")?
        .parse()
        .map_err(|_| Error::format(&display, "bad opt_step"))?;
    let rng_seed = parse_hex32(&r.keyed_line("rng_seed")?, &display)?;
    let rng_word_pos: u128 = r
        .keyed_line("rng_word_pos")?
        .parse()
        .map_err(|_| Error::format(&display, "bad rng_word_pos"))?;
    let parse_triple = |raw: String| -> Result<[f64; 3]> {
        let parts: Vec<f64> = raw
            .split(' ')
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&display, "bad normalization triple"))?;
        parts
            .try_into()
            .map_err(|_| Error::format(&display, "normalization needs three values"))
    };
    let mean = parse_triple(r.keyed_line("norm_mean")?)?;
    let std = parse_triple(r.keyed_line("norm_std")?)?;
    let count: usize = r
        .keyed_line("records")?
        .parse()
        .map_err(|_| Error::format(&display, "bad record count"))?;

    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let header = r.keyed_line("tensor")?;
        let mut parts = header.split(' ');
        let name = parts
            .next()
            .ok_or_else(|| Error::format(&display, "record without name"))?
            .to_string();
        let rank: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::format(&display, "record without rank"))?;
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::format(&display, "bad extent"))
            })
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(Error::format(&display, "rank/extent mismatch"));
        }
        let numel: usize = shape.iter().product();
        let raw = r.exact(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let sep = r.line()?;
        if !sep.is_empty() {
            return Err(Error::format(&display, "missing record separator"));
        }
        records.push(Record { name, shape, data });
    }
    let end = r.line()?;
    if end != "end" {
        return Err(Error::format(&display, "missing end marker"));
    }
    Ok(Checkpoint {
        config_text,
        digest,
        epoch,
        opt_step,
        rng_seed,
        rng_word_pos,
        norm: Normalize { mean, std },
        records,
    })
}

impl Checkpoint {
    /// Rebuilds the model (and optimizer state if saved) from the embedded
    /// config and records. Every stored tensor must be matched exactly once
    /// with its exact shape.
    pub fn restore(&self) -> Result<(Model<f32>, Option<AdamState<f32>>, ChaCha8Rng)> {
        let config = ModelConfig::from_text(&self.config_text)?;
        let mut model: Model<f32> = Model::build(config, 0)?;
        let mut opt = AdamState::new(&model.params);
        let mut filled = vec![false; model.params.len()];
        let mut has_opt = false;

        let lookup: std::collections::HashMap<String, crate::params::ParamId> = model
            .params
            .entries()
            .map(|(id, e)| (e.name.clone(), id))
            .collect();

        for record in &self.records {
            let (target, name) = record
                .name
                .split_once('.')
                .ok_or_else(|| Error::format("checkpoint", "record name without prefix"))?;
            let (slot, name) = match target {
                "param" | "buffer" => (None, name),
                "opt" => {
                    let (which, rest) = name
                        .split_once('.')
                        .ok_or_else(|| Error::format("checkpoint", "malformed opt record"))?;
                    (Some(which.to_string()), rest)
                }
                other => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("unknown record prefix '{other}'"),
                    ))
                }
            };
            let id = *lookup.get(name).ok_or_else(|| {
                Error::format("checkpoint", format!("no tensor named '{name}' in model"))
            })?;
            let tensor = Tensor::new(record.shape.clone(), record.data.clone())?;
            match slot.as_deref() {
                None => {
                    if model.params.value(id).shape() != record.shape {
                        return Err(Error::format(
                            "checkpoint",
                            format!("shape mismatch for '{name}'"),
                        ));
                    }
                    *model.params.value_mut(id) = tensor;
                    filled[id.index()] = true;
                }
                Some("m") => {
                    opt.m[id.index()] = Some(tensor);
                    has_opt = true;
                }
                Some("v") => {
                    opt.v[id.index()] = Some(tensor);
                    has_opt = true;
                }
                Some(other) => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("unknown opt slot '{other}'"),
                    ))
                }
            }
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "missing record for '{}'",
                    model.params.entry(crate::params::ParamId(missing)).name
                ),
            ));
        }
        opt.step = self.opt_step;
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        Ok((model, has_opt.then_some(opt), rng))
    }
}
