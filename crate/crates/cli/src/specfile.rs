//! Versioned model/run description read by `estimate`.

use std::path::Path;

use mixl_core::data::{apply_coding, load_long_csv, ChoiceDataset, CodingPlan, ColumnSchema};
use mixl_core::models::{ModelSpec, Space};
use mixl_core::simgen::{sim_coding, sim_model_spec, sim_schema};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::read_json;

pub const SPEC_SCHEMA: &str = "mixl.spec/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    pub schema: String,
    pub columns: ColumnSchema,
    #[serde(default)]
    pub coding: CodingPlan,
    pub model: ModelSpec,
}

impl SpecFile {
    /// The layout and utility of `simulate` output.
    pub fn simulated(space: Space) -> Self {
        Self {
            schema: SPEC_SCHEMA.into(),
            columns: sim_schema(),
            coding: sim_coding(),
            model: sim_model_spec(space),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let spec: SpecFile = read_json(path)?;
        if spec.schema != SPEC_SCHEMA {
            return Err(CliError::data(format!(
                "unsupported spec schema `{}`, expected `{SPEC_SCHEMA}`",
                spec.schema
            ))
            .context(path.display()));
        }
        spec.model
            .validate()
            .map_err(|e| CliError::from(e).context(path.display()))?;
        Ok(spec)
    }

    pub fn load_or_default(path: Option<&Path>, space: Space) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::simulated(space)),
        }
    }
}

/// Read a long CSV and apply the coding plan.
pub fn load_data(
    path: &Path,
    columns: &ColumnSchema,
    coding: &CodingPlan,
) -> CliResult<ChoiceDataset> {
    let raw =
        load_long_csv(path, columns).map_err(|e| CliError::from(e).context(path.display()))?;
    apply_coding(&raw, coding).map_err(|e| CliError::from(e).context(path.display()))
}
