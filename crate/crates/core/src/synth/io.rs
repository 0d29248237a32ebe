//! Versioned text format for datasets.
//!
//! ```text
//! INSURE-SYNTH v1
//! dims: 4
//! regions: I,II,III,IV
//! seed: 7
//! n_domains: 2
//! n_classes: 2
//! samples: 8
//! domain_ids: 0,1
//! latent.class_means: 2x1 0.5,-1.25
//! ...
//! 0,1,0.25,-3.5,1,2
//! ```
//!
//! Header lines are `key: value`; the first line without `:` starts the
//! sample rows `d,y,x_1,...,x_k`. Floats use shortest round-trip formatting.
//! A missing `regions` line (or `regions: none`) loads as no ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LatentParams, Region, Sample, SynthDataset, SynthError};

pub const DATASET_HEADER: &str = "INSURE-SYNTH v1";

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> String {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    format!("{}x{} {}", rows.len(), cols, join(&flat))
}

pub fn to_text(ds: &SynthDataset) -> String {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    let _ = writeln!(out, "dims: {}", ds.dims);
    match &ds.region_of_dim {
        Some(map) => {
            let names: Vec<&str> = map.iter().map(|r| r.as_str()).collect();
            let _ = writeln!(out, "regions: {}", names.join(","));
        }
        None => out.push_str("regions: none\n"),
    }
    let _ = writeln!(out, "seed: {}", ds.seed);
    let _ = writeln!(out, "n_domains: {}", ds.n_domains);
    let _ = writeln!(out, "n_classes: {}", ds.n_classes);
    let _ = writeln!(out, "samples: {}", ds.samples.len());
    let _ = writeln!(out, "domain_ids: {}", join(&ds.domain_ids));
    if let Some(lat) = &ds.latent {
        let width = |rows: &[Vec<f64>]| rows.first().map_or(0, Vec::len);
        let _ = writeln!(out, "latent.class_means: {}", matrix(&lat.class_means, width(&lat.class_means)));
        let _ = writeln!(out, "latent.class_pattern: {}", matrix(&lat.class_pattern, width(&lat.class_pattern)));
        let _ = writeln!(out, "latent.domain_scales: {}", matrix(&lat.domain_scales, width(&lat.domain_scales)));
        let _ = writeln!(out, "latent.domain_means: {}", matrix(&lat.domain_means, width(&lat.domain_means)));
        let _ = writeln!(out, "latent.const_mean: {}", matrix(std::slice::from_ref(&lat.const_mean), lat.const_mean.len()));
        match &lat.mixing {
            None => out.push_str("latent.mixing: identity\n"),
            Some(m) => {
                let _ = writeln!(out, "latent.mixing: {}", matrix(m, m.len()));
            }
        }
        let names: Vec<&str> = lat.latent_regions.iter().map(|r| r.as_str()).collect();
        let _ = writeln!(out, "latent.regions: {}", names.join(","));
    }
    for s in &ds.samples {
        let _ = write!(out, "{},{}", s.d, s.y);
        for v in &s.x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &SynthDataset, path: impl AsRef<Path>) -> Result<(), SynthError> {
    fs::write(path, to_text(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SynthDataset, SynthError> {
    let text = fs::read_to_string(path)?;
    from_text(&text)
}

fn parse_err(line: usize, message: impl Into<String>) -> SynthError {
    SynthError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, s: &str) -> Result<T, SynthError> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{key}: cannot parse {:?}", s.trim())))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, s: &str) -> Result<Vec<T>, SynthError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|v| parse_num(line, key, v)).collect()
}

fn parse_matrix(line: usize, key: &str, s: &str) -> Result<Vec<Vec<f64>>, SynthError> {
    let s = s.trim();
    let (dims, rest) = s.split_once(' ').unwrap_or((s, ""));
    let (r, c) = dims
        .split_once('x')
        .ok_or_else(|| parse_err(line, format!("{key}: expected RxC dimensions")))?;
    let rows: usize = parse_num(line, key, r)?;
    let cols: usize = parse_num(line, key, c)?;
    let flat: Vec<f64> = parse_list(line, key, rest)?;
    if flat.len() != rows * cols {
        return Err(parse_err(
            line,
            format!("{key}: {rows}x{cols} needs {} values, got {}", rows * cols, flat.len()),
        ));
    }
    if cols == 0 {
        return Ok(vec![Vec::new(); rows]);
    }
    Ok(flat.chunks(cols).map(<[f64]>::to_vec).collect())
}

fn parse_regions(line: usize, s: &str) -> Result<Option<Vec<Region>>, SynthError> {
    if s.trim() == "none" {
        return Ok(None);
    }
    s.split(',')
        .map(|r| Region::parse(r).ok_or_else(|| parse_err(line, format!("unknown region {:?}", r.trim()))))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

pub fn from_text(text: &str) -> Result<SynthDataset, SynthError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    match lines.next() {
        Some((_, l)) if l.trim() == DATASET_HEADER => {}
        Some((n, l)) => return Err(parse_err(n, format!("expected header {DATASET_HEADER:?}, found {l:?}"))),
        None => return Err(parse_err(1, "empty file")),
    }

    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    while let Some(&(n, l)) = lines.peek() {
        let Some((key, value)) = l.split_once(':') else { break };
        if header.insert(key.trim().to_string(), (n, value.trim().to_string())).is_some() {
            return Err(parse_err(n, format!("duplicate key {:?}", key.trim())));
        }
        lines.next();
    }
    let last_header_line = header.values().map(|(n, _)| *n).max().unwrap_or(1);
    let required = |key: &str| {
        header
            .get(key)
            .ok_or_else(|| parse_err(last_header_line + 1, format!("missing header key {key:?}")))
    };

    let (n, v) = required("dims")?;
    let dims: usize = parse_num(*n, "dims", v)?;
    let (n, v) = required("seed")?;
    let seed: u64 = parse_num(*n, "seed", v)?;
    let (n, v) = required("n_domains")?;
    let n_domains: usize = parse_num(*n, "n_domains", v)?;
    let (n, v) = required("n_classes")?;
    let n_classes: usize = parse_num(*n, "n_classes", v)?;
    if dims == 0 || n_domains == 0 || n_classes == 0 {
        return Err(parse_err(last_header_line, "dims, n_domains and n_classes must be positive"));
    }

    let region_of_dim = match header.get("regions") {
        None => None,
        Some((n, v)) => {
            let map = parse_regions(*n, v)?;
            if let Some(m) = &map {
                if m.len() != dims {
                    return Err(parse_err(*n, format!("region map has {} entries for {dims} dims", m.len())));
                }
            }
            map
        }
    };
    let domain_ids = match header.get("domain_ids") {
        None => (0..n_domains).collect(),
        Some((n, v)) => {
            let ids: Vec<usize> = parse_list(*n, "domain_ids", v)?;
            if ids.len() != n_domains {
                return Err(parse_err(*n, format!("domain_ids has {} entries for {n_domains} domains", ids.len())));
            }
            ids
        }
    };
    let expected_samples = match header.get("samples") {
        None => None,
        Some((n, v)) => Some(parse_num::<usize>(*n, "samples", v)?),
    };
    let latent = parse_latent(&header)?;

    let mut samples = Vec::new();
    let mut last_line = last_header_line;
    for (n, l) in lines {
        last_line = n;
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != dims + 2 {
            return Err(parse_err(n, format!("expected {} fields, found {}", dims + 2, fields.len())));
        }
        let d: usize = parse_num(n, "d", fields[0])?;
        let y: usize = parse_num(n, "y", fields[1])?;
        if d >= n_domains || y >= n_classes {
            return Err(parse_err(n, format!("domain {d} / class {y} out of range")));
        }
        let x = fields[2..]
            .iter()
            .map(|f| parse_num(n, "x", f))
            .collect::<Result<Vec<f64>, _>>()?;
        samples.push(Sample { x, y, d });
    }
    if let Some(want) = expected_samples {
        if samples.len() != want {
            return Err(parse_err(
                last_line + 1,
                format!("truncated: header declares {want} samples, found {}", samples.len()),
            ));
        }
    }

    Ok(SynthDataset {
        dims,
        n_domains,
        n_classes,
        seed,
        region_of_dim,
        domain_ids,
        samples,
        latent,
    })
}

fn parse_latent(header: &BTreeMap<String, (usize, String)>) -> Result<Option<LatentParams>, SynthError> {
    let Some((n, _)) = header.get("latent.class_means") else {
        return Ok(None);
    };
    let get = |key: &str| {
        header
            .get(key)
            .ok_or_else(|| parse_err(*n, format!("latent block is missing {key:?}")))
    };
    let m = |key: &str| -> Result<Vec<Vec<f64>>, SynthError> {
        let (line, v) = get(key)?;
        parse_matrix(*line, key, v)
    };
    let (mix_line, mix) = get("latent.mixing")?;
    let mixing = if mix == "identity" {
        None
    } else {
        Some(parse_matrix(*mix_line, "latent.mixing", mix)?)
    };
    let (reg_line, reg) = get("latent.regions")?;
    let latent_regions = parse_regions(*reg_line, reg)?
        .ok_or_else(|| parse_err(*reg_line, "latent.regions cannot be none"))?;
    Ok(Some(LatentParams {
        class_means: m("latent.class_means")?,
        class_pattern: m("latent.class_pattern")?,
        domain_scales: m("latent.domain_scales")?,
        domain_means: m("latent.domain_means")?,
        const_mean: m("latent.const_mean")?.into_iter().next().unwrap_or_default(),
        mixing,
        latent_regions,
    }))
}
