//! Binary checkpoint format for toy models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SPQL"
//! version  u32 = 1
//! config   u32 field count, then per field: u32 name length, name bytes,
//!          u32 value
//! tensors  embedding, pos_embedding, per layer (attn_norm, wq, wk, wv, wo,
//!          mlp_norm, w_up, w_gate, w_down), final_norm, lm_head
//! ```
//!
//! Norm vectors are written as a u32 length plus raw f32s. Projections carry
//! a u8 kind tag: 0 is a dense matrix (u32 rows, u32 cols, f32 data), 1 is a
//! quantized matrix (u32 rows, u32 cols, u8 bits, u32 group size, u8 rotated,
//! then length-prefixed scales and codes). The file must end exactly at the
//! last tensor; trailing bytes are treated as corruption.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerWeights, Linear, ModelConfig, ModelWeights, Precision};
use crate::quant::{Matrix, QuantizedMatrix};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SPQL";
const VERSION: u32 = 1;

const CONFIG_FIELDS: [&str; 9] = [
    "vocab_size",
    "n_layers",
    "d_model",
    "n_heads",
    "d_ff",
    "max_positions",
    "precision",
    "group_size",
    "rotate",
];

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_fully(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_fully(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::checkpoint("file ends before all tensors were read")
        } else {
            Error::Io(e)
        }
    })
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_fully(r, &mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Reads a length that the writer emitted for a tensor, rejecting values that
/// disagree with what the config implies.
fn expect_len(what: &str, got: u32, want: usize) -> Result<usize> {
    if got as usize != want {
        return Err(Error::checkpoint(format!("{what} has length {got}, config implies {want}")));
    }
    Ok(want)
}

fn write_vec(w: &mut impl Write, xs: &[f32]) -> io::Result<()> {
    write_u32(w, xs.len() as u32)?;
    write_f32s(w, xs)
}

fn read_vec(r: &mut impl Read, what: &str, want: usize) -> Result<Vec<f32>> {
    let n = expect_len(what, read_u32(r)?, want)?;
    read_f32s(r, n)
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> io::Result<()> {
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    write_f32s(w, m.data())
}

fn read_matrix(r: &mut impl Read, what: &str, want: (usize, usize)) -> Result<Matrix> {
    let rows = expect_len(&format!("{what} rows"), read_u32(r)?, want.0)?;
    let cols = expect_len(&format!("{what} cols"), read_u32(r)?, want.1)?;
    Matrix::from_vec(rows, cols, read_f32s(r, rows * cols)?)
}

fn write_linear(w: &mut impl Write, lin: &Linear) -> io::Result<()> {
    match lin {
        Linear::Dense(m) => {
            w.write_all(&[0])?;
            write_matrix(w, m)
        }
        Linear::Quant(q) => {
            w.write_all(&[1])?;
            write_u32(w, q.rows as u32)?;
            write_u32(w, q.cols as u32)?;
            w.write_all(&[q.bits])?;
            write_u32(w, q.group_size as u32)?;
            w.write_all(&[q.rotated as u8])?;
            write_u32(w, q.scales.len() as u32)?;
            write_f32s(w, &q.scales)?;
            write_u32(w, q.codes.len() as u32)?;
            w.write_all(&q.codes)
        }
    }
}

fn read_linear(r: &mut impl Read, what: &str, want: (usize, usize)) -> Result<Linear> {
    match read_u8(r)? {
        0 => Ok(Linear::Dense(read_matrix(r, what, want)?)),
        1 => {
            let rows = expect_len(&format!("{what} rows"), read_u32(r)?, want.0)?;
            let cols = expect_len(&format!("{what} cols"), read_u32(r)?, want.1)?;
            let bits = read_u8(r)?;
            if bits != 4 && bits != 8 {
                return Err(Error::checkpoint(format!("{what} has bit width {bits}")));
            }
            let group_size = read_u32(r)? as usize;
            if group_size == 0 || cols % group_size != 0 {
                return Err(Error::checkpoint(format!(
                    "{what} group size {group_size} does not divide {cols} columns"
                )));
            }
            let rotated = match read_u8(r)? {
                0 => false,
                1 => true,
                v => return Err(Error::checkpoint(format!("{what} rotation flag is {v}"))),
            };
            let scales = read_vec(r, &format!("{what} scales"), rows * (cols / group_size))?;
            let stride = if bits == 4 { cols.div_ceil(2) } else { cols };
            let n_codes = expect_len(&format!("{what} codes"), read_u32(r)?, rows * stride)?;
            let mut codes = vec![0u8; n_codes];
            read_fully(r, &mut codes)?;
            Ok(Linear::Quant(QuantizedMatrix {
                rows,
                cols,
                bits,
                group_size,
                rotated,
                scales,
                codes,
            }))
        }
        k => Err(Error::checkpoint(format!("{what} has unknown tensor kind {k}"))),
    }
}

fn config_fields(config: &ModelConfig) -> Result<[(&'static str, u32); 9]> {
    let as_u32 = |name: &str, v: usize| -> Result<u32> {
        u32::try_from(v)
            .map_err(|_| Error::checkpoint(format!("{name} {v} does not fit the format")))
    };
    let (precision, group_size, rotate) = match config.precision {
        Precision::Fp32 => (0, 0, 0),
        Precision::W8 => (1, 0, 0),
        Precision::W4 { group, rotate } => (2, as_u32("group_size", group)?, rotate as u32),
    };
    Ok([
        ("vocab_size", as_u32("vocab_size", config.vocab_size)?),
        ("n_layers", as_u32("n_layers", config.n_layers)?),
        ("d_model", as_u32("d_model", config.d_model)?),
        ("n_heads", as_u32("n_heads", config.n_heads)?),
        ("d_ff", as_u32("d_ff", config.d_ff)?),
        ("max_positions", as_u32("max_positions", config.max_positions)?),
        ("precision", precision),
        ("group_size", group_size),
        ("rotate", rotate),
    ])
}

fn write_config(w: &mut impl Write, config: &ModelConfig) -> Result<()> {
    let fields = config_fields(config)?;
    write_u32(w, fields.len() as u32)?;
    for (name, value) in fields {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, value)?;
    }
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<ModelConfig> {
    let count = read_u32(r)? as usize;
    if count != CONFIG_FIELDS.len() {
        return Err(Error::checkpoint(format!(
            "config block has {count} fields, expected {}",
            CONFIG_FIELDS.len()
        )));
    }
    // Fields must appear in declaration order; accepting arbitrary order
    // would let a duplicated name silently overwrite an earlier value.
    let mut values = [0u32; CONFIG_FIELDS.len()];
    for (expected, slot) in CONFIG_FIELDS.iter().zip(&mut values) {
        let name_len = read_u32(r)? as usize;
        if name_len > 64 {
            return Err(Error::checkpoint("config field name is implausibly long"));
        }
        let mut name = vec![0u8; name_len];
        read_fully(r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::checkpoint("config field name is not UTF-8"))?;
        if name != *expected {
            return Err(Error::checkpoint(format!(
                "config field {name:?} where {expected:?} was expected"
            )));
        }
        *slot = read_u32(r)?;
    }
    let precision = match (values[6], values[7] as usize, values[8]) {
        (0, _, _) => Precision::Fp32,
        (1, _, _) => Precision::W8,
        (2, group, rotate) => Precision::W4 { group, rotate: rotate != 0 },
        (p, _, _) => return Err(Error::checkpoint(format!("unknown precision code {p}"))),
    };
    let config = ModelConfig {
        vocab_size: values[0] as usize,
        n_layers: values[1] as usize,
        d_model: values[2] as usize,
        n_heads: values[3] as usize,
        d_ff: values[4] as usize,
        max_positions: values[5] as usize,
        precision,
    };
    config.validate().map_err(|e| Error::checkpoint(format!("config does not validate: {e}")))?;
    Ok(config)
}

fn write_weights(w: &mut impl Write, weights: &ModelWeights) -> Result<()> {
    weights.validate()?;
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_config(w, &weights.config)?;
    write_matrix(w, &weights.embedding)?;
    write_matrix(w, &weights.pos_embedding)?;
    for layer in &weights.layers {
        write_vec(w, &layer.attn_norm)?;
        for lin in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
            write_linear(w, lin)?;
        }
        write_vec(w, &layer.mlp_norm)?;
        for lin in [&layer.w_up, &layer.w_gate, &layer.w_down] {
            write_linear(w, lin)?;
        }
    }
    write_vec(w, &weights.final_norm)?;
    write_matrix(w, &weights.lm_head)?;
    Ok(())
}

fn read_weights(r: &mut impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 4];
    read_fully(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::checkpoint("bad magic; not a model checkpoint"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config = read_config(r)?;
    let c = config.clone();
    let embedding = read_matrix(r, "embedding", (c.vocab_size, c.d_model))?;
    let pos_embedding = read_matrix(r, "pos_embedding", (c.max_positions, c.d_model))?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let t = |name: &str| format!("layer {i} {name}");
        layers.push(LayerWeights {
            attn_norm: read_vec(r, &t("attn_norm"), c.d_model)?,
            wq: read_linear(r, &t("wq"), (c.d_model, c.d_model))?,
            wk: read_linear(r, &t("wk"), (c.d_model, c.d_model))?,
            wv: read_linear(r, &t("wv"), (c.d_model, c.d_model))?,
            wo: read_linear(r, &t("wo"), (c.d_model, c.d_model))?,
            mlp_norm: read_vec(r, &t("mlp_norm"), c.d_model)?,
            w_up: read_linear(r, &t("w_up"), (c.d_ff, c.d_model))?,
            w_gate: read_linear(r, &t("w_gate"), (c.d_ff, c.d_model))?,
            w_down: read_linear(r, &t("w_down"), (c.d_model, c.d_ff))?,
        });
    }
    let final_norm = read_vec(r, "final_norm", c.d_model)?;
    let lm_head = read_matrix(r, "lm_head", (c.vocab_size, c.d_model))?;

    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(Error::checkpoint("trailing bytes after the last tensor")),
        Err(e) => return Err(Error::Io(e)),
    }

    let weights = ModelWeights { config, embedding, pos_embedding, layers, final_norm, lm_head };
    weights
        .validate()
        .map_err(|e| Error::checkpoint(format!("loaded weights do not validate: {e}")))?;
    Ok(weights)
}

pub fn save_checkpoint(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)
        .map_err(|e| Error::checkpoint(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write_weights(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
    read_weights(&mut BufReader::new(file))
}
