//! Task definitions and their training tables.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::entity_graph::{parse_timestamp, read_csv, EntityGraph};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
    Recommendation,
}

/// The task file. `training_table_csv` is resolved relative to the task
/// file's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub entity_table: String,
    pub training_table_csv: String,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination_table: Option<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == TaskKind::Recommendation {
            match self.k {
                Some(k) if k >= 1 => {}
                _ => return Err(Error::Data("recommendation tasks need K >= 1".into())),
            }
            if self.destination_table.is_none() {
                return Err(Error::Data("recommendation tasks need a destination_table".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("task serializes");
        s.push('\n');
        s
    }
}

pub fn parse_task(text: &str) -> Result<TaskSpec> {
    let spec: TaskSpec = serde_json::from_str(text).map_err(|e| {
        if e.is_data() {
            Error::Data(format!("task: {e}"))
        } else {
            Error::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Reads a task file; returns its definition and the training-table path.
pub fn load_task(path: &Path) -> Result<(TaskSpec, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec = parse_task(&text)?;
    let table = path.parent().unwrap_or(Path::new(".")).join(&spec.training_table_csv);
    Ok((spec, table))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Scalar(Vec<f64>),
    /// Destination-table row indices per training row, sorted and deduplicated.
    Targets(Vec<Vec<usize>>),
}

/// Training rows resolved against the entity graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTable {
    pub entity_type: usize,
    pub destination_type: Option<usize>,
    pub rows: Vec<usize>,
    pub times: Vec<i64>,
    pub labels: Labels,
}

impl TrainingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scalar_labels(&self) -> Option<&[f64]> {
        match &self.labels {
            Labels::Scalar(v) => Some(v),
            Labels::Targets(_) => None,
        }
    }

    pub fn targets(&self) -> Option<&[Vec<usize>]> {
        match &self.labels {
            Labels::Targets(v) => Some(v),
            Labels::Scalar(_) => None,
        }
    }
}

fn pk_index(graph: &EntityGraph, ty: usize) -> HashMap<&str, usize> {
    graph.database().tables[ty]
        .primary_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect()
}

fn type_of(graph: &EntityGraph, name: &str) -> Result<usize> {
    graph
        .type_index(name)
        .ok_or_else(|| Error::Data(format!("task refers to unknown table `{name}`")))
}

/// Parses training-table cells (`entity_id, timestamp, label`).
pub fn training_table_from_cells(
    graph: &EntityGraph,
    spec: &TaskSpec,
    header: &[String],
    cells: &[Vec<String>],
) -> Result<TrainingTable> {
    let entity_type = type_of(graph, &spec.entity_table)?;
    let destination_type = match &spec.destination_table {
        Some(d) => Some(type_of(graph, d)?),
        None => None,
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("training table lacks column `{name}`")))
    };
    let (ci, ct, cl) = (col("entity_id")?, col("timestamp")?, col("label")?);
    let entities = pk_index(graph, entity_type);
    let dests = destination_type.map(|d| pk_index(graph, d));

    let mut rows = Vec::with_capacity(cells.len());
    let mut times = Vec::with_capacity(cells.len());
    let mut scalars = Vec::new();
    let mut targets = Vec::new();
    for (i, rec) in cells.iter().enumerate() {
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("training table line {line}: {} fields", rec.len())));
        }
        let id = rec[ci].as_str();
        rows.push(
            *entities
                .get(id)
                .ok_or_else(|| Error::Data(format!("training table line {line}: unknown entity `{id}`")))?,
        );
        times.push(
            parse_timestamp(&rec[ct])
                .ok_or_else(|| Error::Data(format!("training table line {line}: bad timestamp `{}`", rec[ct])))?,
        );
        let label = rec[cl].trim();
        match (spec.kind, &dests) {
            (TaskKind::Recommendation, Some(dests)) => {
                let mut set = Vec::new();
                for t in label.split(';').map(str::trim).filter(|t| !t.is_empty()) {
                    set.push(*dests.get(t).ok_or_else(|| {
                        Error::Data(format!("training table line {line}: unknown destination `{t}`"))
                    })?);
                }
                set.sort_unstable();
                set.dedup();
                targets.push(set);
            }
            (TaskKind::Recommendation, None) => {
                return Err(Error::Data("recommendation tasks need a destination_table".into()))
            }
            (kind, _) => {
                let y: f64 = label
                    .parse()
                    .ok()
                    .filter(|y: &f64| y.is_finite())
                    .ok_or_else(|| Error::Data(format!("training table line {line}: bad label `{label}`")))?;
                if kind == TaskKind::Classification && y != 0.0 && y != 1.0 {
                    return Err(Error::Data(format!("training table line {line}: label {y} is not binary")));
                }
                scalars.push(y);
            }
        }
    }
    let labels = if spec.kind == TaskKind::Recommendation {
        Labels::Targets(targets)
    } else {
        Labels::Scalar(scalars)
    };
    Ok(TrainingTable {
        entity_type,
        destination_type,
        rows,
        times,
        labels,
    })
}

/// Parses a training table held in memory as CSV text.
pub fn parse_training_table(graph: &EntityGraph, spec: &TaskSpec, text: &str) -> Result<TrainingTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("training table: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cells = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("training table: {e}")))?;
        cells.push(rec.iter().map(str::to_string).collect());
    }
    training_table_from_cells(graph, spec, &header, &cells)
}

pub fn load_training_table(graph: &EntityGraph, spec: &TaskSpec, path: &Path) -> Result<TrainingTable> {
    let raw = read_csv(path)?;
    training_table_from_cells(graph, spec, &raw.header, &raw.rows)
}

/// Row indices of a training table split 80/10/10 in temporal order
/// (ties broken by file order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn part(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

pub fn temporal_split(times: &[i64]) -> Result<Split> {
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (times[i], i));
    let (a, b) = (n * 8 / 10, n * 9 / 10);
    if a == 0 || b == a || b == n {
        return Err(Error::Data(format!("{n} training rows are too few for an 80/10/10 split")));
    }
    Ok(Split {
        train: order[..a].to_vec(),
        val: order[a..b].to_vec(),
        test: order[b..].to_vec(),
    })
}
