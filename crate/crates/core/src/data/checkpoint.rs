//! Checkpoints: a text manifest (parameter names and shapes, then the
//! config echo), a `---` line, then one MSPT blob per parameter in
//! manifest order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ModelParams;
use crate::tensor::{Shape, Tensor};

const FIRST_LINE: &str = "msp-checkpoint 1";
const SEPARATOR: &str = "---";

pub fn save_checkpoint(path: &Path, config: &ExperimentConfig, params: &ModelParams) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut out, config, params)?;
    out.flush()?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(out: &mut W, config: &ExperimentConfig, params: &ModelParams) -> Result<()> {
    writeln!(out, "{FIRST_LINE}")?;
    for (name, t) in params.iter() {
        let [n, c, h, w] = t.shape().dims();
        writeln!(out, "param {name} {n} {c} {h} {w}")?;
    }
    writeln!(out, "config")?;
    out.write_all(config.echo().as_bytes())?;
    writeln!(out, "{SEPARATOR}")?;
    for (_, t) in params.iter() {
        t.write_mspt(out)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R, path: &Path) -> Result<(ExperimentConfig, ModelParams)> {
    let mut input = BufReader::new(input);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::format(path, "manifest ends before the `---` separator"));
        }
        let line = line.trim_end_matches(['\n', '\r']).to_string();
        if line == SEPARATOR {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some(FIRST_LINE) {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let config_at = lines
        .iter()
        .position(|l| l == "config")
        .ok_or_else(|| Error::format(path, "missing config section"))?;
    let mut declared = Vec::new();
    for line in &lines[1..config_at] {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let dims: Option<Vec<usize>> = fields.get(2..6).map(|d| d.iter().filter_map(|x| x.parse().ok()).collect());
        match (fields.first(), fields.get(1), dims) {
            (Some(&"param"), Some(name), Some(d)) if fields.len() == 6 && d.len() == 4 => {
                declared.push((name.to_string(), Shape::new(d[0], d[1], d[2], d[3])));
            }
            _ => return Err(Error::format(path, format!("bad manifest line `{line}`"))),
        }
    }
    let config = ExperimentConfig::parse(&lines[config_at + 1..].join("\n"))?;
    let mut params = ModelParams::new();
    for (name, shape) in declared {
        let t = Tensor::read_mspt(&mut input).map_err(|e| Error::format(path, format!("parameter `{name}`: {e}")))?;
        if t.shape() != shape {
            return Err(Error::format(path, format!("parameter `{name}` is {} not {shape}", t.shape())));
        }
        params.insert(name, t)?;
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, ModelParams)> {
    read_checkpoint(fs::File::open(path)?, path)
}

/// Rebuilds the model stored at `path`.
pub fn load_model(path: &Path) -> Result<(Model, ExperimentConfig)> {
    let (config, params) = load_checkpoint(path)?;
    Ok((Model::with_params(config.model.clone(), params)?, config))
}
