//! CSV ingestion and export.
//!
//! Layout: a header row; a `source` column naming the source of each row;
//! label columns `task:<name>` (or `task:<name>:<k>` for tasks with several
//! target columns); every other column is a numeric feature. In multi-task
//! mode each row is one sample labeled for every task and the source column
//! is ignored.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Mode, MultiSourceDataset, Source};
use crate::error::{Error, Result};
use crate::nn::{Matrix, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub mode: Mode,
    #[serde(default = "default_source_column")]
    pub source_column: String,
    /// Source names in dataset order (multi-domain only).
    #[serde(default)]
    pub sources: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    /// Feature columns in order; empty means every non-source, non-label column.
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub reference_source: usize,
}

fn default_source_column() -> String {
    "source".into()
}

impl CsvSchema {
    /// Schema describing an existing dataset, as written by [`write_csv`].
    pub fn of(dataset: &MultiSourceDataset) -> Self {
        Self {
            mode: dataset.mode(),
            source_column: default_source_column(),
            sources: match dataset.mode() {
                Mode::MultiDomain => dataset.source_names(),
                Mode::MultiTask => Vec::new(),
            },
            tasks: dataset.tasks().to_vec(),
            features: Vec::new(),
            reference_source: dataset.reference_source(),
        }
    }

    fn label_columns(task: &TaskSpec) -> Vec<String> {
        let cols = task.target_cols();
        if cols == 1 {
            vec![format!("task:{}", task.name)]
        } else {
            (0..cols).map(|k| format!("task:{}:{k}", task.name)).collect()
        }
    }
}

fn feature_name(j: usize) -> String {
    format!("x{j}")
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MultiSourceDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<MultiSourceDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing column '{name}'")))
    };

    let source_col = match schema.mode {
        Mode::MultiDomain => Some(find(&schema.source_column)?),
        Mode::MultiTask => headers.iter().position(|h| h == schema.source_column),
    };
    let label_cols: Vec<Vec<usize>> = schema
        .tasks
        .iter()
        .map(|t| CsvSchema::label_columns(t).iter().map(|c| find(c)).collect())
        .collect::<Result<_>>()?;
    let feature_cols: Vec<usize> = if schema.features.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, h)| Some(*i) != source_col && !h.starts_with("task:"))
            .map(|(i, _)| i)
            .collect()
    } else {
        schema.features.iter().map(|f| find(f)).collect::<Result<_>>()?
    };
    if feature_cols.is_empty() {
        return Err(Error::data("no feature columns"));
    }
    if schema.mode == Mode::MultiDomain && schema.sources.is_empty() {
        return Err(Error::config("multi-domain schema must declare its sources"));
    }

    let n_sources = match schema.mode {
        Mode::MultiDomain => schema.sources.len(),
        Mode::MultiTask => schema.tasks.len(),
    };
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); n_sources];
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); n_sources];
    let mut missing = Vec::new();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // Line 1 is the header.
        let line = i + 2;
        let values = |cols: &[usize]| -> Result<Option<Vec<f64>>> {
            let mut out = Vec::with_capacity(cols.len());
            for &c in cols {
                let cell = record.get(c).unwrap_or("").trim();
                if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                    return Ok(None);
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::data(format!("line {line}: cannot parse '{cell}' in column '{}'", &headers[c])))?;
                out.push(v);
            }
            Ok(Some(out))
        };
        let Some(features) = values(&feature_cols)? else {
            missing.push(line);
            continue;
        };
        let mut labels = Vec::with_capacity(label_cols.len());
        let mut complete = true;
        for cols in &label_cols {
            match values(cols)? {
                Some(v) => labels.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            missing.push(line);
            continue;
        }
        match schema.mode {
            Mode::MultiDomain => {
                let name = record.get(source_col.expect("multi-domain has a source column")).unwrap_or("").trim();
                if name.is_empty() {
                    missing.push(line);
                    continue;
                }
                let t = schema
                    .sources
                    .iter()
                    .position(|s| s == name)
                    .ok_or_else(|| Error::data(format!("line {line}: source '{name}' is not declared in the schema")))?;
                xs[t].extend_from_slice(&features);
                ys[t].extend_from_slice(&labels[0]);
            }
            Mode::MultiTask => {
                for (t, l) in labels.iter().enumerate() {
                    xs[t].extend_from_slice(&features);
                    ys[t].extend_from_slice(l);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingValues { rows: missing });
    }

    let d = feature_cols.len();
    let names: Vec<String> = match schema.mode {
        Mode::MultiDomain => schema.sources.clone(),
        Mode::MultiTask => schema.tasks.iter().map(|t| t.name.clone()).collect(),
    };
    for (name, x) in names.iter().zip(&xs) {
        if x.is_empty() {
            return Err(Error::EmptySource(name.clone()));
        }
    }
    let mut sources = Vec::with_capacity(n_sources);
    let mut shared: Option<Arc<Matrix>> = None;
    for (t, (x, y)) in xs.into_iter().zip(ys).enumerate() {
        let n = x.len() / d;
        let task = match schema.mode {
            Mode::MultiDomain => &schema.tasks[0],
            Mode::MultiTask => &schema.tasks[t],
        };
        let inputs = match (&shared, schema.mode) {
            (Some(s), Mode::MultiTask) => Arc::clone(s),
            _ => {
                let m = Arc::new(Matrix::from_vec(n, d, x)?);
                if schema.mode == Mode::MultiTask {
                    shared = Some(Arc::clone(&m));
                }
                m
            }
        };
        sources.push(Source {
            name: names[t].clone(),
            inputs,
            targets: Matrix::from_vec(n, task.target_cols(), y)?,
        });
    }
    MultiSourceDataset::new(schema.mode, schema.tasks.clone(), sources, schema.reference_source)
}

/// Writes `dataset` in the layout read by [`read_csv`] with [`CsvSchema::of`].
/// Feature columns are named `x0, x1, ...`.
pub fn write_csv<W: Write>(writer: W, dataset: &MultiSourceDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = dataset.feature_dim();
    let mut header = vec!["source".to_string()];
    header.extend((0..d).map(feature_name));
    for t in dataset.tasks() {
        header.extend(CsvSchema::label_columns(t));
    }
    w.write_record(&header)?;
    let fmt = |v: f64| format!("{v:?}");
    match dataset.mode() {
        Mode::MultiDomain => {
            for s in dataset.sources() {
                for i in 0..s.len() {
                    let mut row = vec![s.name.clone()];
                    row.extend(s.inputs.row(i).iter().map(|v| fmt(*v)));
                    row.extend(s.targets.row(i).iter().map(|v| fmt(*v)));
                    w.write_record(&row)?;
                }
            }
        }
        Mode::MultiTask => {
            let x = &dataset.source(0).inputs;
            for i in 0..x.rows() {
                let mut row = vec!["shared".to_string()];
                row.extend(x.row(i).iter().map(|v| fmt(*v)));
                for s in dataset.sources() {
                    row.extend(s.targets.row(i).iter().map(|v| fmt(*v)));
                }
                w.write_record(&row)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
