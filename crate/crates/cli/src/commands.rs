//! Subcommand bodies. Each returns the text destined for stdout; files
//! named by `--out` are written here.

use std::path::{Path, PathBuf};

use accel_ode::accel::{self, Method};
use accel_ode::{mc, nls};

use crate::config::{Overrides, RunConfig};
use crate::csvio;
use crate::error::{CliError, CliResult};
use crate::report::{Body, Document};

#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
}

fn load_config(inputs: &Inputs) -> CliResult<RunConfig> {
    match &inputs.config {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_out(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::parse("output", format!("{}: {e}", path.display())))
}

pub fn fit(inputs: &Inputs) -> CliResult<String> {
    let cfg = load_config(inputs)?;
    let mut setup = cfg.fit_setup(&inputs.overrides)?;
    if let (Some(seed), Some(search)) = (inputs.overrides.seed, setup.accel.search.as_mut()) {
        search.seed = seed;
    }
    let path = inputs.data.as_ref().ok_or_else(|| CliError::parse("argument parsing", "fit needs --data"))?;
    let mut data = csvio::read_dataset_file(path)?;
    if data.dim_state() != setup.model.dim_state() {
        return Err(CliError::parse(
            "data parsing",
            format!("{} has {} state columns but model `{}` has {}", path.display(), data.dim_state(), setup.model.name(), setup.model.dim_state()),
        ));
    }
    if let Some(s) = setup.time_scale {
        data = data.rescale_time(s)?;
    }
    let model = setup.model.as_ref();
    let report = match setup.method {
        Method::Accel => accel::fit(model, &data, &setup.template, &setup.accel)?,
        Method::Nls => nls::nls_fit(model, &data, &setup.template, None, &setup.accel, &setup.nls)?,
    };
    let doc = Document::new(Body::Fit { report, time_scale: setup.time_scale });
    if let Some(out) = &inputs.out {
        write_out(out, doc.to_json().as_bytes())?;
    }
    Ok(doc.render())
}

/// Writes replicate 0 of the configured scenario as CSV.
pub fn simulate(inputs: &Inputs) -> CliResult<String> {
    let cfg = load_config(inputs)?;
    let spec = cfg.scenario(&inputs.overrides)?;
    let data = mc::simulate_dataset(&spec, 0)?;
    let mut buf = Vec::new();
    csvio::write_dataset(&data, &mut buf).map_err(|e| CliError::parse("output", e))?;
    match &inputs.out {
        Some(out) => {
            write_out(out, &buf)?;
            Ok(String::new())
        }
        None => Ok(String::from_utf8(buf).expect("csv is utf-8")),
    }
}

pub fn mc(inputs: &Inputs) -> CliResult<String> {
    let cfg = load_config(inputs)?;
    let spec = cfg.scenario(&inputs.overrides)?;
    let summary = mc::run_study(&spec)?;
    let doc = Document::new(Body::Mc { spec, summary });
    if let Some(out) = &inputs.out {
        write_out(out, doc.to_json().as_bytes())?;
    }
    Ok(doc.render())
}

/// Re-renders a saved report. The document path is given by `--data`.
pub fn report(inputs: &Inputs) -> CliResult<String> {
    let path = inputs.data.as_ref().ok_or_else(|| CliError::parse("argument parsing", "report needs --data <report.json>"))?;
    let doc = Document::read(path)?;
    let text = doc.render();
    if let Some(out) = &inputs.out {
        write_out(out, text.as_bytes())?;
    }
    Ok(text)
}
