use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scbf_core::grid::{read_fld, write_fld, ScalarField};
use scbf_core::semigroup::PolicyTable;
use scbf_core::spectral::{EigenResult, IterationRecord};
use scbf_core::systems::SystemModel;
use serde::{Deserialize, Serialize};

use crate::config::JobConfig;

pub const PSI_FILE: &str = "psi.fld";
pub const SYNTH_META: &str = "metadata.json";

pub fn policy_file(k: usize) -> String {
    format!("policy_{k}.fld")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    pub periodic: Vec<bool>,
}

impl GridInfo {
    pub fn of(sys: &SystemModel) -> Self {
        let g = sys.grid();
        GridInfo {
            lower: g.lower().to_vec(),
            upper: g.upper().to_vec(),
            counts: g.counts().to_vec(),
            periodic: g.periodic().to_vec(),
        }
    }
}

/// Contents of `metadata.json` next to a synthesized eigenpair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub command: String,
    pub version: String,
    pub config: JobConfig,
    pub system: String,
    pub grid: GridInfo,
    pub gamma: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub horizon: f64,
    pub history: Vec<IterationRecord>,
    pub files: SynthFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFiles {
    pub psi: String,
    pub policy: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn write_field(path: &Path, field: &ScalarField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_fld(field, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_fld(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub fn write_synthesis(dir: &Path, config: &JobConfig, sys: &SystemModel, result: &EigenResult) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_field(&dir.join(PSI_FILE), &result.psi)?;
    let policy: Vec<String> = (0..sys.n_u()).map(policy_file).collect();
    for (k, name) in policy.iter().enumerate() {
        write_field(&dir.join(name), &result.policy.channel(k))?;
    }
    let meta = SynthMetadata {
        command: "synthesize".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        system: sys.name().into(),
        grid: GridInfo::of(sys),
        gamma: result.gamma,
        converged: result.converged,
        iterations: result.iterations(),
        final_residual: result.final_residual(),
        horizon: result.horizon,
        history: result.history.clone(),
        files: SynthFiles { psi: PSI_FILE.into(), policy },
    };
    write_json(&dir.join(SYNTH_META), &meta)
}

pub fn read_metadata(dir: &Path) -> Result<SynthMetadata> {
    let path = dir.join(SYNTH_META);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A synthesized eigenpair loaded back from disk.
pub struct Artifacts {
    pub dir: PathBuf,
    pub result: EigenResult,
}

pub fn load_synthesis(dir: &Path, sys: &SystemModel) -> Result<Artifacts> {
    let meta = read_metadata(dir)?;
    let psi = read_field(&dir.join(&meta.files.psi))?;
    if psi.spec() != sys.grid() {
        bail!("{} was written on a different grid than the configured system", meta.files.psi);
    }
    if meta.files.policy.len() != sys.n_u() {
        bail!("metadata lists {} policy files, the system has {} inputs", meta.files.policy.len(), sys.n_u());
    }
    let channels = meta.files.policy.iter().map(|f| read_field(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let policy = PolicyTable::from_channels(sys, &channels)?;
    let result = EigenResult {
        gamma: meta.gamma,
        psi,
        policy,
        history: meta.history.clone(),
        converged: meta.converged,
        horizon: meta.horizon,
    };
    Ok(Artifacts { dir: dir.to_path_buf(), result })
}
