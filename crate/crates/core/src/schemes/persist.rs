//! Saving and loading trained solutions.
//!
//! A solution directory holds `manifest.json` plus one text checkpoint per
//! network (`u_000.txt`, `z_000.txt`, ..., `u_terminal.txt`).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{NetworkShape, SchemeKind, SchemeSolution};
use crate::error::{Error, Result};
use crate::neuralnet::{load_network, save_network};
use crate::optimizer::TrainConfig;
use crate::problems::model_by_id;
use crate::stochastics::{Model, TimeGrid};

const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionManifest {
    pub format_version: u32,
    pub scheme: SchemeKind,
    pub model_id: String,
    pub dim: usize,
    pub times: Vec<f64>,
    pub shape: NetworkShape,
    pub train: TrainConfig,
    pub u_networks: usize,
    pub z_networks: usize,
    pub terminal_network: bool,
    /// `None` where the loss was not finite.
    pub step_losses: Vec<Option<f64>>,
}

fn u_file(i: usize) -> String {
    format!("u_{i:03}.txt")
}

fn z_file(i: usize) -> String {
    format!("z_{i:03}.txt")
}

const TERMINAL_FILE: &str = "u_terminal.txt";

impl SchemeSolution {
    pub fn manifest(&self) -> SolutionManifest {
        SolutionManifest {
            format_version: FORMAT_VERSION,
            scheme: self.scheme,
            model_id: self.model.id(),
            dim: self.model.dim(),
            times: self.grid.times().to_vec(),
            shape: self.shape.clone(),
            train: self.train.clone(),
            u_networks: self.u_nets.len(),
            z_networks: self.z_nets.len(),
            terminal_network: self.terminal_net.is_some(),
            step_losses: self.step_losses.iter().map(|l| l.is_finite().then_some(*l)).collect(),
        }
    }

    /// Writes the manifest and all networks into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, net) in self.u_nets.iter().enumerate() {
            save_network(net, dir.join(u_file(i)))?;
        }
        for (i, net) in self.z_nets.iter().enumerate() {
            save_network(net, dir.join(z_file(i)))?;
        }
        if let Some(net) = &self.terminal_net {
            save_network(net, dir.join(TERMINAL_FILE))?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    /// Loads a solution whose model is one of the built-in problems.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let manifest = read_manifest(dir.as_ref())?;
        let model = model_by_id(&manifest.model_id)?;
        Self::load_parts(dir.as_ref(), manifest, model)
    }

    /// Loads a solution for a caller-supplied model.
    pub fn load_with_model(dir: impl AsRef<Path>, model: Arc<dyn Model>) -> Result<Self> {
        let manifest = read_manifest(dir.as_ref())?;
        Self::load_parts(dir.as_ref(), manifest, model)
    }

    fn load_parts(dir: &Path, m: SolutionManifest, model: Arc<dyn Model>) -> Result<Self> {
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported manifest version {}",
                m.format_version
            )));
        }
        if model.dim() != m.dim {
            return Err(Error::DimensionMismatch {
                context: "model dimension in manifest".into(),
                expected: m.dim,
                got: model.dim(),
            });
        }
        let grid = TimeGrid::from_times(m.times)?;
        let read = |name: String| {
            load_network(dir.join(&name)).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        };
        let u_nets = (0..m.u_networks).map(|i| read(u_file(i))).collect::<Result<Vec<_>>>()?;
        let z_nets = (0..m.z_networks).map(|i| read(z_file(i))).collect::<Result<Vec<_>>>()?;
        let terminal_net = if m.terminal_network {
            Some(read(TERMINAL_FILE.to_string())?)
        } else {
            None
        };
        let sol = SchemeSolution {
            scheme: m.scheme,
            u_nets,
            z_nets,
            terminal_net,
            grid,
            model,
            shape: m.shape,
            train: m.train,
            step_losses: m.step_losses.into_iter().map(|l| l.unwrap_or(f64::NAN)).collect(),
        };
        sol.validate()?;
        Ok(sol)
    }
}

fn read_manifest(dir: &Path) -> Result<SolutionManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    Ok(serde_json::from_str(&text)?)
}
