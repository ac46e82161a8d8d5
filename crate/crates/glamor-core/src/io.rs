//! Plain-text interchange formats: tensor files, embedding TSVs, dataset
//! manifests, parameter checkpoints, and model configs.
//!
//! Every writer emits one canonical form (floats via Rust's shortest
//! round-trip formatting), so write -> read -> write is byte-identical and
//! oracles in any language can cross-check the files.

use crate::backbone::{ModelConfig, StageSpec, StemSpec};
use crate::error::{Error, Result};
use crate::reid::EmbeddingSet;
use crate::tensor::{Matrix, Tensor4};
use std::fmt::Write as _;

const TENSOR_MAGIC: &str = "#tensor4 v1";
const EMBEDDINGS_MAGIC: &str = "#reid-embeddings v1";
const PARAMS_MAGIC: &str = "#params v1";

/// `#tensor4 v1 shape=N,C,H,W` then row-major NCHW values, one image row
/// per line.
pub fn write_tensor(t: &Tensor4) -> String {
    let (n, c, h, w) = t.shape();
    let mut out = format!("{TENSOR_MAGIC} shape={n},{c},{h},{w}\n");
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    if wi > 0 {
                        out.push(' ');
                    }
                    let _ = write!(out, "{}", t.get(ni, ci, hi, wi));
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn read_tensor(text: &str) -> Result<Tensor4> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "empty tensor file"))?;
    let rest = header
        .strip_prefix(TENSOR_MAGIC)
        .ok_or_else(|| Error::parse(1, format!("expected `{TENSOR_MAGIC}` header")))?;
    let shape_str = rest
        .trim()
        .strip_prefix("shape=")
        .ok_or_else(|| Error::parse(1, "missing shape= in tensor header"))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(1, format!("bad shape: {e}")))?;
    if dims.len() != 4 {
        return Err(Error::parse(1, format!("shape needs 4 dims, got {}", dims.len())));
    }
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let expected = n * c * h * w;
    let mut data = Vec::with_capacity(expected);
    for (lineno, line) in lines.enumerate() {
        for token in line.split_whitespace() {
            let v: f64 = token
                .parse()
                .map_err(|e| Error::parse(lineno + 2, format!("bad value `{token}`: {e}")))?;
            data.push(v);
        }
    }
    if data.len() != expected {
        return Err(Error::parse(
            1,
            format!("tensor has {} values, header promises {expected}", data.len()),
        ));
    }
    Tensor4::from_vec(n, c, h, w, data)
}

/// `#reid-embeddings v1 dim=D` then per sample
/// `sample_id<TAB>identity<TAB>camera<TAB>v1 .. vD`.
pub fn write_embeddings(set: &EmbeddingSet) -> String {
    let mut out = format!("{EMBEDDINGS_MAGIC} dim={}\n", set.dim());
    for i in 0..set.len() {
        let mut values = String::new();
        for (j, v) in set.vectors.row(i).iter().enumerate() {
            if j > 0 {
                values.push(' ');
            }
            let _ = write!(values, "{v}");
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            set.sample_ids[i], set.identities[i], set.cameras[i], values
        );
    }
    out
}

pub fn read_embeddings(text: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty embeddings file"))?;
    let rest = header
        .strip_prefix(EMBEDDINGS_MAGIC)
        .ok_or_else(|| Error::parse(1, format!("expected `{EMBEDDINGS_MAGIC}` header")))?;
    let dim: usize = rest
        .trim()
        .strip_prefix("dim=")
        .ok_or_else(|| Error::parse(1, "missing dim= in embeddings header"))?
        .parse()
        .map_err(|e| Error::parse(1, format!("bad dim: {e}")))?;
    let mut rows = Vec::new();
    let mut sample_ids = Vec::new();
    let mut identities = Vec::new();
    let mut cameras = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                lineno + 2,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let values: Vec<f64> = fields[3]
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(lineno + 2, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(Error::parse(
                lineno + 2,
                format!("row has {} values, header promises {dim}", values.len()),
            ));
        }
        sample_ids.push(fields[0].to_string());
        identities.push(fields[1].to_string());
        cameras.push(fields[2].to_string());
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::parse(1, "embeddings file has no samples"));
    }
    EmbeddingSet::new(Matrix::from_rows(&rows)?, sample_ids, identities, cameras)
}

/// One manifest entry: where a sample's tensor lives and what it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub identity: String,
    pub camera: String,
    pub path: String,
}

/// `sample_id<TAB>identity<TAB>camera<TAB>tensor_file_path` per line.
pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.sample_id, e.identity, e.camera, e.path);
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                lineno + 1,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        entries.push(ManifestEntry {
            sample_id: fields[0].to_string(),
            identity: fields[1].to_string(),
            camera: fields[2].to_string(),
            path: fields[3].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(Error::parse(1, "manifest has no entries"));
    }
    Ok(entries)
}

/// `#params v1` then, per array, a `name length` line followed by one line
/// of values.
pub fn write_checkpoint(entries: &[(String, Vec<f64>)]) -> String {
    let mut out = format!("{PARAMS_MAGIC}\n");
    for (name, values) in entries {
        let _ = writeln!(out, "{name} {}", values.len());
        let mut line = String::new();
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
    if header != PARAMS_MAGIC {
        return Err(Error::parse(1, format!("expected `{PARAMS_MAGIC}` header")));
    }
    let mut entries = Vec::new();
    while let Some((lineno, decl)) = lines.next() {
        if decl.is_empty() {
            continue;
        }
        let (name, len_str) = decl
            .rsplit_once(' ')
            .ok_or_else(|| Error::parse(lineno + 1, "expected `name length`"))?;
        let len: usize = len_str
            .parse()
            .map_err(|e| Error::parse(lineno + 1, format!("bad length: {e}")))?;
        let (vlineno, values_line) = lines
            .next()
            .ok_or_else(|| Error::parse(lineno + 1, format!("missing values for {name}")))?;
        let values: Vec<f64> = values_line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(vlineno + 1, format!("bad value: {e}")))?;
        if values.len() != len {
            return Err(Error::parse(
                vlineno + 1,
                format!("{name} has {} values, declared {len}", values.len()),
            ));
        }
        entries.push((name.to_string(), values));
    }
    Ok(entries)
}

/// Canonical `key=value` rendering of a model config.
pub fn write_model_config(config: &ModelConfig) -> String {
    let stages: Vec<String> = config
        .stages
        .iter()
        .map(|s| format!("{}x{}x{}", s.blocks, s.channels, s.stride))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "input_channels={}", config.input_channels);
    let _ = writeln!(
        out,
        "stem={}x{}x{}",
        config.stem.out_channels, config.stem.kernel, config.stem.stride
    );
    let _ = writeln!(out, "stages={}", stages.join(","));
    let _ = writeln!(out, "norm=group:{}", config.norm_group_size);
    let _ = writeln!(out, "epsilon={}", config.epsilon);
    let _ = writeln!(out, "feature_dim={}", config.feature_dim);
    let _ = writeln!(out, "num_classes={}", config.num_classes);
    let _ = writeln!(out, "attach_ga={}", config.attach_ga);
    let _ = writeln!(out, "attach_la={}", config.attach_la);
    let _ = writeln!(out, "la_reduction={}", config.la_reduction);
    let _ = writeln!(out, "la_kernel={}", config.la_kernel);
    let _ = writeln!(out, "leaky_slope={}", config.leaky_slope);
    out
}

/// Parse `key=value` lines. `stem` and `stages` accept `AxB` / `AxBxC`
/// shorthand (stride defaults to 1); `#` lines and blanks are ignored.
pub fn read_model_config(text: &str) -> Result<ModelConfig> {
    let mut stem = None;
    let mut stages: Option<Vec<StageSpec>> = None;
    let mut input_channels = 3usize;
    let mut norm_group_size = 16usize;
    let mut epsilon = 1e-5f64;
    let mut feature_dim = None;
    let mut num_classes = None;
    let mut attach_ga = false;
    let mut attach_la = false;
    let mut la_reduction = 16usize;
    let mut la_kernel = 7usize;
    let mut leaky_slope = 0.01f64;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(lineno, format!("expected key=value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|e| Error::parse(lineno, format!("bad integer `{v}`: {e}")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|e| Error::parse(lineno, format!("bad number `{v}`: {e}")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::parse(lineno, format!("bad bool `{other}`"))),
            }
        };
        match key {
            "input_channels" => input_channels = parse_usize(value)?,
            "stem" => {
                let parts: Vec<usize> = value
                    .split('x')
                    .map(parse_usize)
                    .collect::<Result<_>>()?;
                stem = Some(match parts.as_slice() {
                    [out, kernel] => StemSpec { out_channels: *out, kernel: *kernel, stride: 1 },
                    [out, kernel, stride] => StemSpec {
                        out_channels: *out,
                        kernel: *kernel,
                        stride: *stride,
                    },
                    _ => {
                        return Err(Error::parse(
                            lineno,
                            "stem needs OUTxKERNEL or OUTxKERNELxSTRIDE",
                        ))
                    }
                });
            }
            "stages" => {
                let mut parsed = Vec::new();
                for item in value.split(',') {
                    let parts: Vec<usize> = item
                        .trim()
                        .split('x')
                        .map(parse_usize)
                        .collect::<Result<_>>()?;
                    parsed.push(match parts.as_slice() {
                        [blocks, channels] => StageSpec {
                            blocks: *blocks,
                            channels: *channels,
                            stride: 1,
                        },
                        [blocks, channels, stride] => StageSpec {
                            blocks: *blocks,
                            channels: *channels,
                            stride: *stride,
                        },
                        _ => {
                            return Err(Error::parse(
                                lineno,
                                "stage needs BLOCKSxCHANNELS or BLOCKSxCHANNELSxSTRIDE",
                            ))
                        }
                    });
                }
                stages = Some(parsed);
            }
            "norm" => {
                let spec = value.strip_prefix("group:").ok_or_else(|| {
                    Error::parse(lineno, "backbone norm must be `group:<group_size>`")
                })?;
                norm_group_size = parse_usize(spec)?;
            }
            "epsilon" => epsilon = parse_f64(value)?,
            "feature_dim" => feature_dim = Some(parse_usize(value)?),
            "num_classes" => num_classes = Some(parse_usize(value)?),
            "attach_ga" => attach_ga = parse_bool(value)?,
            "attach_la" => attach_la = parse_bool(value)?,
            "la_reduction" => la_reduction = parse_usize(value)?,
            "la_kernel" => la_kernel = parse_usize(value)?,
            "leaky_slope" => leaky_slope = parse_f64(value)?,
            other => return Err(Error::parse(lineno, format!("unknown key `{other}`"))),
        }
    }
    let stem = stem.ok_or_else(|| Error::parse(1, "config missing stem="))?;
    let stages = stages.ok_or_else(|| Error::parse(1, "config missing stages="))?;
    let num_classes = num_classes.ok_or_else(|| Error::parse(1, "config missing num_classes="))?;
    let feature_dim = feature_dim
        .or_else(|| stages.last().map(|s| s.channels))
        .expect("stages checked non-empty by validate");
    let config = ModelConfig {
        input_channels,
        stem,
        stages,
        norm_group_size,
        epsilon,
        feature_dim,
        num_classes,
        attach_ga,
        attach_la,
        la_reduction,
        la_kernel,
        leaky_slope,
    };
    config.validate()?;
    Ok(config)
}
