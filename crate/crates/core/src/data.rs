//! Long-format choice data: ingestion, dummy coding and panel validation.
//!
//! A stated-preference file has one row per alternative. Rows are grouped by
//! person and task in order of first appearance; within a task, file order is
//! alternative order. A revealed-preference (`rp_pair`) file has one row per
//! person carrying covariates and the two usage indicators.
//!
//! Categorical attributes named in [`ColumnSchema::categorical`] are kept as
//! level strings until [`apply_coding`] turns them into indicator columns.
//! Likelihood code only reads numeric columns.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric value `{value}` in column `{column}` (row {row})")]
    NonNumericAttribute {
        column: String,
        row: usize,
        value: String,
    },
    #[error("empty cell in column `{column}` (row {row})")]
    MissingValue { column: String, row: usize },
    #[error("chosen flag must be 0 or 1, found `{value}` (row {row})")]
    InvalidChosenFlag { row: usize, value: String },
    #[error("task `{task}` of person `{person}` has no chosen alternative")]
    TaskWithoutChoice { person: String, task: String },
    #[error("task `{task}` of person `{person}` has more than one chosen alternative")]
    TaskWithMultipleChoices { person: String, task: String },
    #[error("task `{task}` of person `{person}` has fewer than two alternatives")]
    TooFewAlternatives { person: String, task: String },
    #[error("covariate `{column}` varies within person `{person}`")]
    InconsistentCovariate { person: String, column: String },
    #[error("person `{0}` appears on more than one row of a revealed-preference file")]
    DuplicatePerson(String),
    #[error("indicator `{column}` of person `{person}` must be 0 or 1, found {value}")]
    InvalidIndicator {
        person: String,
        column: String,
        value: f64,
    },
    #[error("dataset has no persons")]
    Empty,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{attribute}` has no level `{level}`")]
    UnknownLevel { attribute: String, level: String },
    #[error("attribute `{0}` is numeric and cannot be dummy coded")]
    NotCategorical(String),
    #[error("attribute `{0}` is categorical and has not been coded")]
    Uncoded(String),
}

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    StatedPanel,
    RpPair,
}

/// Column-name map for [`load_long_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    #[serde(default)]
    pub mode: DataMode,
    pub person: String,
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default = "default_alternative")]
    pub alternative: String,
    #[serde(default = "default_chosen")]
    pub chosen: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

fn default_task() -> String {
    "task".into()
}
fn default_alternative() -> String {
    "alternative".into()
}
fn default_chosen() -> String {
    "chosen".into()
}

impl ColumnSchema {
    pub fn stated(person: &str, task: &str, alternative: &str, chosen: &str) -> Self {
        Self {
            mode: DataMode::StatedPanel,
            person: person.into(),
            task: task.into(),
            alternative: alternative.into(),
            chosen: chosen.into(),
            attributes: Vec::new(),
            categorical: Vec::new(),
            covariates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alternative {
    pub label: String,
    /// Numeric attribute values, aligned with [`ChoiceDataset::attribute_names`].
    pub values: Vec<f64>,
    /// Uncoded categorical levels, aligned with [`ChoiceDataset::categorical_names`].
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: String,
    pub alternatives: Vec<Alternative>,
    pub chosen_index: usize,
}

impl Task {
    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelPerson {
    pub id: String,
    pub tasks: Vec<Task>,
    pub covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub persons: Vec<PanelPerson>,
    pub attribute_names: Vec<String>,
    pub categorical_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Distinct alternative labels in order of first appearance.
    pub alternative_labels: Vec<String>,
    pub mode: DataMode,
}

impl ChoiceDataset {
    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    /// Number of choice tasks; one observation per person in `rp_pair` mode.
    pub fn n_obs(&self) -> usize {
        match self.mode {
            DataMode::StatedPanel => self.persons.iter().map(|p| p.tasks.len()).sum(),
            DataMode::RpPair => self.persons.len(),
        }
    }

    pub fn attribute_index(&self, name: &str) -> DataResult<usize> {
        if let Some(i) = self.attribute_names.iter().position(|a| a == name) {
            return Ok(i);
        }
        if self.categorical_names.iter().any(|a| a == name) {
            return Err(DataError::Uncoded(name.into()));
        }
        Err(DataError::UnknownAttribute(name.into()))
    }

    pub fn person_ids(&self) -> Vec<String> {
        self.persons.iter().map(|p| p.id.clone()).collect()
    }

    /// Checks the panel invariants. Called by the loaders; public for
    /// datasets assembled in memory.
    pub fn validate(&self) -> DataResult<()> {
        if self.persons.is_empty() {
            return Err(DataError::Empty);
        }
        let mut seen = HashMap::with_capacity(self.persons.len());
        for person in &self.persons {
            if seen.insert(person.id.as_str(), ()).is_some() {
                return Err(DataError::DuplicatePerson(person.id.clone()));
            }
            if self.mode == DataMode::RpPair {
                continue;
            }
            for task in &person.tasks {
                if task.alternatives.len() < 2 {
                    return Err(DataError::TooFewAlternatives {
                        person: person.id.clone(),
                        task: task.id.clone(),
                    });
                }
                if task.chosen_index >= task.alternatives.len() {
                    return Err(DataError::TaskWithoutChoice {
                        person: person.id.clone(),
                        task: task.id.clone(),
                    });
                }
                for alt in &task.alternatives {
                    if let Some(pos) = alt.values.iter().position(|v| !v.is_finite()) {
                        return Err(DataError::NonNumericAttribute {
                            column: self.attribute_names[pos].clone(),
                            row: 0,
                            value: alt.values[pos].to_string(),
                        });
                    }
                }
            }
            if person.tasks.is_empty() {
                return Err(DataError::Empty);
            }
        }
        Ok(())
    }

    /// The schema that [`write_long_csv`] emits for this dataset.
    pub fn export_schema(&self) -> ColumnSchema {
        ColumnSchema {
            mode: self.mode,
            person: "person".into(),
            task: "task".into(),
            alternative: "alternative".into(),
            chosen: "chosen".into(),
            attributes: self.attribute_names.clone(),
            categorical: self.categorical_names.clone(),
            covariates: self.covariate_names.clone(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> DataResult<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn(name.into()))
}

fn cell<'r>(
    record: &'r csv::StringRecord,
    idx: usize,
    name: &str,
    row: usize,
) -> DataResult<&'r str> {
    let value = record.get(idx).unwrap_or("").trim();
    if value.is_empty() {
        return Err(DataError::MissingValue {
            column: name.into(),
            row,
        });
    }
    Ok(value)
}

fn number(record: &csv::StringRecord, idx: usize, name: &str, row: usize) -> DataResult<f64> {
    let raw = cell(record, idx, name, row)?;
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumericAttribute {
            column: name.into(),
            row,
            value: raw.into(),
        }),
    }
}

pub fn load_long_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> DataResult<ChoiceDataset> {
    let file = std::fs::File::open(path)?;
    read_long_csv(file, schema)
}

/// Reader-based variant of [`load_long_csv`].
pub fn read_long_csv<R: Read>(reader: R, schema: &ColumnSchema) -> DataResult<ChoiceDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    match schema.mode {
        DataMode::StatedPanel => read_stated(&mut rdr, &headers, schema),
        DataMode::RpPair => read_rp(&mut rdr, &headers, schema),
    }
}

struct TaskBuilder {
    id: String,
    alternatives: Vec<Alternative>,
    chosen: Vec<usize>,
}

fn read_stated<R: Read>(
    rdr: &mut csv::Reader<R>,
    headers: &csv::StringRecord,
    schema: &ColumnSchema,
) -> DataResult<ChoiceDataset> {
    let person_col = column(headers, &schema.person)?;
    let task_col = column(headers, &schema.task)?;
    let alt_col = column(headers, &schema.alternative)?;
    let chosen_col = column(headers, &schema.chosen)?;
    let attr_cols = schema
        .attributes
        .iter()
        .map(|a| column(headers, a))
        .collect::<DataResult<Vec<_>>>()?;
    let cat_cols = schema
        .categorical
        .iter()
        .map(|a| column(headers, a))
        .collect::<DataResult<Vec<_>>>()?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|a| column(headers, a))
        .collect::<DataResult<Vec<_>>>()?;

    let mut person_order: Vec<String> = Vec::new();
    let mut person_index: HashMap<String, usize> = HashMap::new();
    let mut tasks: Vec<Vec<TaskBuilder>> = Vec::new();
    let mut task_index: Vec<HashMap<String, usize>> = Vec::new();
    let mut covariates: Vec<BTreeMap<String, f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let pid = cell(&record, person_col, &schema.person, row)?.to_string();
        let tid = cell(&record, task_col, &schema.task, row)?.to_string();
        let label = cell(&record, alt_col, &schema.alternative, row)?.to_string();
        let flag = cell(&record, chosen_col, &schema.chosen, row)?;
        let chosen = match flag {
            "1" | "1.0" => true,
            "0" | "0.0" => false,
            other => {
                return Err(DataError::InvalidChosenFlag {
                    row,
                    value: other.into(),
                })
            }
        };
        let values = attr_cols
            .iter()
            .zip(&schema.attributes)
            .map(|(&c, name)| number(&record, c, name, row))
            .collect::<DataResult<Vec<_>>>()?;
        let levels = cat_cols
            .iter()
            .zip(&schema.categorical)
            .map(|(&c, name)| cell(&record, c, name, row).map(str::to_string))
            .collect::<DataResult<Vec<_>>>()?;

        let p = *person_index.entry(pid.clone()).or_insert_with(|| {
            person_order.push(pid.clone());
            tasks.push(Vec::new());
            task_index.push(HashMap::new());
            covariates.push(BTreeMap::new());
            person_order.len() - 1
        });
        for (&c, name) in cov_cols.iter().zip(&schema.covariates) {
            let v = number(&record, c, name, row)?;
            match covariates[p].get(name) {
                Some(&prev) if prev != v => {
                    return Err(DataError::InconsistentCovariate {
                        person: pid,
                        column: name.clone(),
                    })
                }
                _ => {
                    covariates[p].insert(name.clone(), v);
                }
            }
        }
        let t = *task_index[p].entry(tid.clone()).or_insert_with(|| {
            tasks[p].push(TaskBuilder {
                id: tid.clone(),
                alternatives: Vec::new(),
                chosen: Vec::new(),
            });
            tasks[p].len() - 1
        });
        let builder = &mut tasks[p][t];
        if chosen {
            builder.chosen.push(builder.alternatives.len());
        }
        if !labels.contains(&label) {
            labels.push(label.clone());
        }
        builder.alternatives.push(Alternative {
            label,
            values,
            levels,
        });
    }

    let mut persons = Vec::with_capacity(person_order.len());
    for ((id, builders), covariates) in person_order.into_iter().zip(tasks).zip(covariates) {
        let mut person_tasks = Vec::with_capacity(builders.len());
        for b in builders {
            let chosen_index = match b.chosen.as_slice() {
                [] => {
                    return Err(DataError::TaskWithoutChoice {
                        person: id,
                        task: b.id,
                    })
                }
                [one] => *one,
                _ => {
                    return Err(DataError::TaskWithMultipleChoices {
                        person: id,
                        task: b.id,
                    })
                }
            };
            person_tasks.push(Task {
                id: b.id,
                alternatives: b.alternatives,
                chosen_index,
            });
        }
        persons.push(PanelPerson {
            id,
            tasks: person_tasks,
            covariates,
        });
    }

    let dataset = ChoiceDataset {
        persons,
        attribute_names: schema.attributes.clone(),
        categorical_names: schema.categorical.clone(),
        covariate_names: schema.covariates.clone(),
        alternative_labels: labels,
        mode: DataMode::StatedPanel,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_rp<R: Read>(
    rdr: &mut csv::Reader<R>,
    headers: &csv::StringRecord,
    schema: &ColumnSchema,
) -> DataResult<ChoiceDataset> {
    let person_col = column(headers, &schema.person)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|a| column(headers, a))
        .collect::<DataResult<Vec<_>>>()?;
    let mut persons: Vec<PanelPerson> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let id = cell(&record, person_col, &schema.person, row)?.to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(DataError::DuplicatePerson(id));
        }
        let mut covariates = BTreeMap::new();
        for (&c, name) in cov_cols.iter().zip(&schema.covariates) {
            covariates.insert(name.clone(), number(&record, c, name, row)?);
        }
        persons.push(PanelPerson {
            id,
            tasks: Vec::new(),
            covariates,
        });
    }
    let dataset = ChoiceDataset {
        persons,
        attribute_names: Vec::new(),
        categorical_names: Vec::new(),
        covariate_names: schema.covariates.clone(),
        alternative_labels: Vec::new(),
        mode: DataMode::RpPair,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes the dataset in the layout described by [`ChoiceDataset::export_schema`].
pub fn write_long_csv<W: Write>(dataset: &ChoiceDataset, writer: W) -> DataResult<()> {
    let schema = dataset.export_schema();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![schema.person.clone()];
    if dataset.mode == DataMode::StatedPanel {
        header.extend([
            schema.task.clone(),
            schema.alternative.clone(),
            schema.chosen.clone(),
        ]);
        header.extend(schema.attributes.iter().cloned());
        header.extend(schema.categorical.iter().cloned());
    }
    header.extend(schema.covariates.iter().cloned());
    wtr.write_record(&header)?;

    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for person in &dataset.persons {
        let covs: Vec<String> = dataset
            .covariate_names
            .iter()
            .map(|c| {
                person
                    .covariates
                    .get(c)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            })
            .collect();
        if dataset.mode == DataMode::RpPair {
            row.clear();
            row.push(person.id.clone());
            row.extend(covs.iter().cloned());
            wtr.write_record(&row)?;
            continue;
        }
        for task in &person.tasks {
            for (j, alt) in task.alternatives.iter().enumerate() {
                row.clear();
                row.push(person.id.clone());
                row.push(task.id.clone());
                row.push(alt.label.clone());
                row.push(if j == task.chosen_index { "1" } else { "0" }.into());
                row.extend(alt.values.iter().map(|v| v.to_string()));
                row.extend(alt.levels.iter().cloned());
                row.extend(covs.iter().cloned());
                wtr.write_record(&row)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// How one attribute enters the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodingRule {
    Continuous,
    /// L−1 indicator columns; the named level is the all-zero reference.
    Dummy(String),
}

/// Per-attribute coding rules, applied in the listed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodingPlan {
    pub rules: Vec<(String, CodingRule)>,
}

impl CodingPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dummy(mut self, attribute: &str, reference: &str) -> Self {
        self.rules
            .push((attribute.into(), CodingRule::Dummy(reference.into())));
        self
    }

    pub fn continuous(mut self, attribute: &str) -> Self {
        self.rules.push((attribute.into(), CodingRule::Continuous));
        self
    }
}

/// Name of the indicator column for `level` of `attribute`.
pub fn indicator_name(attribute: &str, level: &str) -> String {
    let level: String = level
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("{attribute}_{level}")
}

pub fn apply_coding(dataset: &ChoiceDataset, plan: &CodingPlan) -> DataResult<ChoiceDataset> {
    let mut out = dataset.clone();
    for (attribute, rule) in &plan.rules {
        let numeric = out.attribute_names.iter().any(|a| a == attribute);
        let cat_pos = out.categorical_names.iter().position(|a| a == attribute);
        match (rule, numeric, cat_pos) {
            (_, false, None) => return Err(DataError::UnknownAttribute(attribute.clone())),
            (CodingRule::Continuous, true, _) => {}
            (CodingRule::Continuous, false, Some(_)) => {
                return Err(DataError::Uncoded(attribute.clone()))
            }
            (CodingRule::Dummy(_), true, _) => {
                return Err(DataError::NotCategorical(attribute.clone()))
            }
            (CodingRule::Dummy(reference), false, Some(pos)) => {
                let mut levels: Vec<String> = Vec::new();
                for alt in out
                    .persons
                    .iter()
                    .flat_map(|p| &p.tasks)
                    .flat_map(|t| &t.alternatives)
                {
                    if !levels.contains(&alt.levels[pos]) {
                        levels.push(alt.levels[pos].clone());
                    }
                }
                if !levels.contains(reference) {
                    return Err(DataError::UnknownLevel {
                        attribute: attribute.clone(),
                        level: reference.clone(),
                    });
                }
                let emitted: Vec<String> = levels.into_iter().filter(|l| l != reference).collect();
                for person in &mut out.persons {
                    for task in &mut person.tasks {
                        for alt in &mut task.alternatives {
                            let level = alt.levels.remove(pos);
                            alt.values.extend(emitted.iter().map(|l| {
                                if *l == level {
                                    1.0
                                } else {
                                    0.0
                                }
                            }));
                        }
                    }
                }
                out.categorical_names.remove(pos);
                out.attribute_names
                    .extend(emitted.iter().map(|l| indicator_name(attribute, l)));
            }
        }
    }
    Ok(out)
}
