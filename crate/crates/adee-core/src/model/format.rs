//! Portable weight file format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "ADEE" | version: u32
//! n_fields: u32, then n_fields of (name_len: u32, name: utf8, value: u64)
//! n_tensors: u32, then n_tensors of (name_len: u32, name: utf8,
//!                                    ndim: u32, dims: u64 * ndim)
//! tensor payloads: f32 * product(dims), row-major, in directory order
//! ```
//!
//! The header is authoritative: the loader cross-checks every declared
//! shape against the config fields and rejects files whose payload does
//! not line up.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::math::Matrix;

use super::{LayerStack, ModelConfig, ModelError, NormParams, TransformerLayer};

pub const MAGIC: &[u8; 4] = b"ADEE";
pub const FORMAT_VERSION: u32 = 1;

const CONFIG_FIELDS: [&str; 6] = [
    "n_layers",
    "d_model",
    "n_heads",
    "d_ff",
    "vocab_size",
    "max_seq",
];

fn layer_tensor_names(i: usize) -> Vec<String> {
    [
        "ln1.gamma",
        "ln1.beta",
        "attn.wq",
        "attn.wk",
        "attn.wv",
        "attn.wo",
        "ln2.gamma",
        "ln2.beta",
        "ffn.w1",
        "ffn.b1",
        "ffn.w2",
        "ffn.b2",
    ]
    .iter()
    .map(|t| format!("layers.{i}.{t}"))
    .collect()
}

/// Every tensor the format stores, in file order, with its expected shape.
fn expected_tensors(c: &ModelConfig) -> Vec<(String, Vec<u64>)> {
    let d = c.d_model as u64;
    let ff = c.d_ff as u64;
    let mut out: Vec<(String, Vec<u64>)> = vec![
        ("token_embedding".into(), vec![c.vocab_size as u64, d]),
        ("pos_embedding".into(), vec![c.max_seq as u64, d]),
    ];
    for i in 0..c.n_layers {
        let shapes: [Vec<u64>; 12] = [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d, ff],
            vec![ff],
            vec![ff, d],
            vec![d],
        ];
        for (name, shape) in layer_tensor_names(i).into_iter().zip(shapes) {
            out.push((name, shape));
        }
    }
    out.push(("final_norm.gamma".into(), vec![d]));
    out.push(("final_norm.beta".into(), vec![d]));
    out.push(("unembedding".into(), vec![d, c.vocab_size as u64]));
    out
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())
}

fn write_floats<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn save_model(model: &LayerStack, path: &Path) -> Result<(), ModelError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;

    w.write_u32::<LittleEndian>(CONFIG_FIELDS.len() as u32)?;
    let values = [
        c.n_layers as u64,
        c.d_model as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.vocab_size as u64,
        c.max_seq as u64,
    ];
    for (name, value) in CONFIG_FIELDS.iter().zip(values) {
        write_name(&mut w, name)?;
        w.write_u64::<LittleEndian>(value)?;
    }

    let directory = expected_tensors(c);
    w.write_u32::<LittleEndian>(directory.len() as u32)?;
    for (name, shape) in &directory {
        write_name(&mut w, name)?;
        w.write_u32::<LittleEndian>(shape.len() as u32)?;
        for &dim in shape {
            w.write_u64::<LittleEndian>(dim)?;
        }
    }

    for (name, _) in &directory {
        write_floats(&mut w, tensor_data(model, name))?;
    }
    w.flush()?;
    Ok(())
}

fn tensor_data<'a>(model: &'a LayerStack, name: &str) -> &'a [f32] {
    match name {
        "token_embedding" => return model.token_embedding.data(),
        "pos_embedding" => return model.pos_embedding.data(),
        "final_norm.gamma" => return &model.final_norm.gamma,
        "final_norm.beta" => return &model.final_norm.beta,
        "unembedding" => return model.unembedding.data(),
        _ => {}
    }
    let rest = name.strip_prefix("layers.").expect("unknown tensor name");
    let (idx, field) = rest.split_once('.').expect("unknown tensor name");
    let l = &model.layers[idx.parse::<usize>().expect("bad layer index")];
    match field {
        "ln1.gamma" => &l.ln1.gamma,
        "ln1.beta" => &l.ln1.beta,
        "attn.wq" => l.wq.data(),
        "attn.wk" => l.wk.data(),
        "attn.wv" => l.wv.data(),
        "attn.wo" => l.wo.data(),
        "ln2.gamma" => &l.ln2.gamma,
        "ln2.beta" => &l.ln2.beta,
        "ffn.w1" => l.w1.data(),
        "ffn.b1" => &l.b1,
        "ffn.w2" => l.w2.data(),
        "ffn.b2" => &l.b2,
        _ => panic!("unknown tensor name {name}"),
    }
}

fn read_name<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 4096 {
        return Err(ModelError::MalformedHeader(format!(
            "unreasonable name length {len}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelError::MalformedHeader("non-utf8 name".into()))
}

pub fn load_model(path: &Path) -> Result<LayerStack, ModelError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::MalformedHeader(format!(
            "bad magic {magic:02x?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::MalformedHeader(format!(
            "unsupported format version {version}"
        )));
    }

    let n_fields = r.read_u32::<LittleEndian>()?;
    let mut fields = BTreeMap::new();
    for _ in 0..n_fields {
        let name = read_name(&mut r)?;
        let value = r.read_u64::<LittleEndian>()?;
        fields.insert(name, value);
    }
    let field = |name: &str| -> Result<usize, ModelError> {
        fields
            .get(name)
            .map(|&v| v as usize)
            .ok_or_else(|| ModelError::MalformedHeader(format!("missing config field '{name}'")))
    };
    let config = ModelConfig {
        n_layers: field("n_layers")?,
        d_model: field("d_model")?,
        n_heads: field("n_heads")?,
        d_ff: field("d_ff")?,
        vocab_size: field("vocab_size")?,
        max_seq: field("max_seq")?,
    };
    config.validate()?;

    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut directory = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = read_name(&mut r)?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        if ndim > 4 {
            return Err(ModelError::MalformedHeader(format!(
                "tensor '{name}' has unreasonable rank {ndim}"
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>()?);
        }
        directory.push((name, dims));
    }

    // The directory must match the config-derived layout exactly; a header
    // that declares more layers than the payload carries fails here.
    let expected = expected_tensors(&config);
    if directory.len() != expected.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "config implies {} tensors but directory lists {}",
            expected.len(),
            directory.len()
        )));
    }
    for ((got_name, got_shape), (want_name, want_shape)) in directory.iter().zip(&expected) {
        if got_name != want_name {
            return Err(ModelError::DimensionMismatch(format!(
                "expected tensor '{want_name}', found '{got_name}'"
            )));
        }
        if got_shape != want_shape {
            return Err(ModelError::DimensionMismatch(format!(
                "tensor '{got_name}' has shape {got_shape:?}, expected {want_shape:?}"
            )));
        }
    }

    let mut payloads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (name, shape) in &directory {
        let count = shape.iter().product::<u64>() as usize;
        let mut data = vec![0.0f32; count];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ModelError::DimensionMismatch(format!("payload for tensor '{name}' is truncated"))
            } else {
                ModelError::Io(e)
            }
        })?;
        payloads.insert(name.clone(), data);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::DimensionMismatch(
            "trailing bytes after final tensor payload".into(),
        ));
    }

    let mut take = |name: &str| payloads.remove(name).expect("validated directory");
    let d = config.d_model;
    let token_embedding = Matrix::from_vec(config.vocab_size, d, take("token_embedding"));
    let pos_embedding = Matrix::from_vec(config.max_seq, d, take("pos_embedding"));
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut t = |field: &str| take(&format!("layers.{i}.{field}"));
        layers.push(TransformerLayer {
            ln1: NormParams {
                gamma: t("ln1.gamma"),
                beta: t("ln1.beta"),
            },
            wq: Matrix::from_vec(d, d, t("attn.wq")),
            wk: Matrix::from_vec(d, d, t("attn.wk")),
            wv: Matrix::from_vec(d, d, t("attn.wv")),
            wo: Matrix::from_vec(d, d, t("attn.wo")),
            ln2: NormParams {
                gamma: t("ln2.gamma"),
                beta: t("ln2.beta"),
            },
            w1: Matrix::from_vec(d, config.d_ff, t("ffn.w1")),
            b1: t("ffn.b1"),
            w2: Matrix::from_vec(config.d_ff, d, t("ffn.w2")),
            b2: t("ffn.b2"),
        });
    }
    let final_norm = NormParams {
        gamma: take("final_norm.gamma"),
        beta: take("final_norm.beta"),
    };
    let unembedding = Matrix::from_vec(d, config.vocab_size, take("unembedding"));

    LayerStack::new(
        config,
        token_embedding,
        pos_embedding,
        layers,
        final_norm,
        unembedding,
    )
}
