//! Text checkpoint: model layout, raw and averaged parameters.
//!
//! ```text
//! INSURE-CKPT v1
//! config_hash: 3fa2...
//! model.input_dim: 32
//! ...
//! meta.<key>: <value>
//! [raw]
//! mask_logits 32 -1,-1,...
//! [sma]
//! ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::grad::Tensor;

pub const CHECKPOINT_HEADER: &str = "INSURE-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub raw: ModelParams,
    pub sma: Option<ModelParams>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Averaged snapshot when present, else the raw parameters.
    pub fn inference_params(&self) -> &ModelParams {
        self.sma.as_ref().unwrap_or(&self.raw)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_params(out: &mut String, params: &ModelParams) {
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{name} {} {}", shape.join("x"), values.join(","));
    }
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let cfg = &ckpt.raw.config;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    let _ = writeln!(out, "config_hash: {}", ckpt.config_hash);
    let _ = writeln!(out, "model.input_dim: {}", cfg.input_dim);
    let _ = writeln!(out, "model.feature_dim: {}", cfg.feature_dim);
    let hidden: Vec<String> = cfg.hidden.iter().map(usize::to_string).collect();
    let _ = writeln!(out, "model.hidden: {}", hidden.join(","));
    let _ = writeln!(out, "model.n_classes: {}", cfg.n_classes);
    let _ = writeln!(out, "model.n_domains: {}", cfg.n_domains);
    let _ = writeln!(out, "model.probe: {}", cfg.probe);
    for (k, v) in &ckpt.meta {
        let _ = writeln!(out, "meta.{k}: {v}");
    }
    out.push_str("[raw]\n");
    write_params(&mut out, &ckpt.raw);
    if let Some(sma) = &ckpt.sma {
        out.push_str("[sma]\n");
        write_params(&mut out, sma);
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_text(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    from_text(&fs::read_to_string(path)?)
}

fn err(line: usize, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_tensor(line_no: usize, line: &str, expect_name: &str, expect_shape: &[usize]) -> Result<Tensor, CheckpointError> {
    let mut parts = line.splitn(3, ' ');
    let name = parts.next().unwrap_or_default();
    if name != expect_name {
        return Err(err(line_no, format!("expected tensor {expect_name:?}, found {name:?}")));
    }
    let shape: Vec<usize> = parts
        .next()
        .ok_or_else(|| err(line_no, "missing shape"))?
        .split('x')
        .map(|d| d.parse().map_err(|_| err(line_no, format!("bad dimension {d:?}"))))
        .collect::<Result<_, _>>()?;
    if shape != expect_shape {
        return Err(err(line_no, format!("{name}: shape {shape:?}, model expects {expect_shape:?}")));
    }
    let data: Vec<f64> = parts
        .next()
        .ok_or_else(|| err(line_no, "missing values"))?
        .split(',')
        .map(|v| v.parse().map_err(|_| err(line_no, format!("bad value {v:?}"))))
        .collect::<Result<_, _>>()?;
    Tensor::new(shape, data).map_err(|e| err(line_no, e.to_string()))
}

pub fn from_text(text: &str) -> Result<Checkpoint, CheckpointError> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    if lines.first().map(|(_, l)| l.trim()) != Some(CHECKPOINT_HEADER) {
        return Err(err(1, format!("expected header {CHECKPOINT_HEADER:?}")));
    }
    let mut header = BTreeMap::new();
    let mut pos = 1;
    while pos < lines.len() && !lines[pos].1.starts_with('[') {
        let (n, l) = lines[pos];
        let (k, v) = l.split_once(':').ok_or_else(|| err(n, "expected `key: value`"))?;
        header.insert(k.trim().to_string(), (n, v.trim().to_string()));
        pos += 1;
    }
    let get = |k: &str| header.get(k).ok_or_else(|| err(pos + 1, format!("missing {k:?}")));
    let num = |k: &str| -> Result<usize, CheckpointError> {
        let (n, v) = get(k)?;
        v.parse().map_err(|_| err(*n, format!("{k}: bad number {v:?}")))
    };
    let (hn, hidden) = get("model.hidden")?;
    let hidden: Vec<usize> = if hidden.is_empty() {
        Vec::new()
    } else {
        hidden
            .split(',')
            .map(|h| h.parse().map_err(|_| err(*hn, format!("bad hidden width {h:?}"))))
            .collect::<Result<_, _>>()?
    };
    let (pn, probe) = get("model.probe")?;
    let config = ModelConfig {
        input_dim: num("model.input_dim")?,
        feature_dim: num("model.feature_dim")?,
        hidden,
        n_classes: num("model.n_classes")?,
        n_domains: num("model.n_domains")?,
        probe: probe.parse().map_err(|_| err(*pn, "model.probe must be true or false"))?,
    };
    let template = super::init_model(&config, 0).map_err(|e| err(pos, e.to_string()))?;
    let meta = header
        .iter()
        .filter_map(|(k, (_, v))| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let config_hash = get("config_hash")?.1.clone();

    let mut sections: Vec<ModelParams> = Vec::new();
    while pos < lines.len() {
        let (n, marker) = lines[pos];
        let expected = if sections.is_empty() { "[raw]" } else { "[sma]" };
        if marker.trim() != expected || sections.len() >= 2 {
            return Err(err(n, format!("expected section {expected}")));
        }
        pos += 1;
        let names = template.names();
        let shapes: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut tensors = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let (n, l) = *lines.get(pos).ok_or_else(|| err(pos + 1, format!("truncated before {name:?}")))?;
            tensors.push(parse_tensor(n, l, name, shape)?);
            pos += 1;
        }
        sections.push(template.with_tensors(tensors).map_err(|e| err(pos, e.to_string()))?);
    }
    let mut sections = sections.into_iter();
    let raw = sections.next().ok_or_else(|| err(pos + 1, "missing [raw] section"))?;
    Ok(Checkpoint {
        config_hash,
        raw,
        sma: sections.next(),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = ModelConfig::encoder(5, 3, 2);
        cfg.hidden = vec![4, 3];
        let raw = init_model(&cfg, 1).unwrap();
        let sma = init_model(&cfg, 2).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("holdout_domain".to_string(), "2".to_string());
        let ckpt = Checkpoint {
            config_hash: "abc".into(),
            raw,
            sma: Some(sma),
            meta,
        };
        assert_eq!(from_text(&to_text(&ckpt)).unwrap(), ckpt);

        let probe = Checkpoint {
            config_hash: "x".into(),
            raw: init_model(&ModelConfig::probe(4, 2, 1), 0).unwrap(),
            sma: None,
            meta: BTreeMap::new(),
        };
        assert_eq!(from_text(&to_text(&probe)).unwrap(), probe);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let ckpt = Checkpoint {
            config_hash: "h".into(),
            raw: init_model(&ModelConfig::probe(4, 2, 2), 0).unwrap(),
            sma: None,
            meta: BTreeMap::new(),
        };
        let text = to_text(&ckpt);
        let cut: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(from_text(&cut).is_err());
    }
}
