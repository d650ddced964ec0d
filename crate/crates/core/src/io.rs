//! Dataset CSV files, feature normalization and model files.
//!
//! Dataset header: `id,time,event,x0,...,x{d-1}`. Model files are JSON with a
//! format version, the model kind and every constant needed to reproduce the
//! predictions; floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, DiscreteGrid, DiscreteTimeModel};
use crate::data::{Dataset, NormalizationStats, SurvivalRecord};
use crate::ebm::EnergyModel;
use crate::nn::{Dense, MlpConfig, ParameterSet};
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let d = dataset.covariate_dim().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".into(), "event".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for r in &dataset.records {
        let mut row = vec![r.id.to_string(), r.time.to_string(), u8::from(r.event).to_string()];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

/// Parses and validates a dataset. Row numbers in errors count data rows from 1.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected_prefix = ["id", "time", "event"];
    if header.len() < 3 || header.iter().take(3).ne(expected_prefix) {
        return Err(Error::Parse {
            row: 0,
            message: format!("header must start with id,time,event, found {:?}", header),
        });
    }
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("x{j}") {
            return Err(Error::Parse {
                row: 0,
                message: format!("covariate column {j} must be named x{j}, found {name}"),
            });
        }
    }
    let width = header.len();

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        if row.len() != width {
            return Err(Error::Parse {
                row: row_no,
                message: format!("expected {width} columns, found {}", row.len()),
            });
        }
        let id: u64 = row[0].parse().map_err(|_| Error::Parse {
            row: row_no,
            message: format!("malformed id {:?}", &row[0]),
        })?;
        let number = |field: &str, what: &str| -> Result<f64> {
            field.parse::<f64>().map_err(|_| Error::Parse {
                row: row_no,
                message: format!("malformed {what} {field:?}"),
            })
        };
        let time = number(&row[1], "time")?;
        if !(time >= 0.0 && time.is_finite()) {
            return Err(Error::Parse {
                row: row_no,
                message: format!("time {time} must be finite and non-negative"),
            });
        }
        let event = match &row[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    row: row_no,
                    message: format!("event flag must be 0 or 1, found {other:?}"),
                })
            }
        };
        let covariates = (3..width)
            .map(|j| number(&row[j], "covariate"))
            .collect::<Result<Vec<f64>>>()?;
        records.push(SurvivalRecord {
            id,
            covariates,
            time,
            event,
        });
    }
    Ok(Dataset { records })
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Per-feature min and max of `train`.
pub fn fit_normalization(train: &Dataset) -> Result<NormalizationStats> {
    let d = train
        .covariate_dim()
        .ok_or(Error::EmptyDataset("normalization source"))?;
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for r in &train.records {
        for (j, &v) in r.covariates.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(NormalizationStats { min, max })
}

/// Maps `train` features to `[0, 1]` and applies the same map to `others`.
pub fn normalize_features(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, NormalizationStats)> {
    let stats = fit_normalization(train)?;
    let map = |ds: &Dataset| Dataset {
        records: ds
            .records
            .iter()
            .map(|r| SurvivalRecord {
                covariates: stats.apply(&r.covariates),
                ..r.clone()
            })
            .collect(),
    };
    let normalized_train = map(train);
    let normalized_others = others.iter().map(|ds| map(ds)).collect();
    Ok((normalized_train, normalized_others, stats))
}

/// Any model that can be written to a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Ebm(EnergyModel),
    Baseline(DiscreteTimeModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Ebm(_) => "ebm",
            SavedModel::Baseline(m) => m.kind.name(),
        }
    }

    pub fn covariate_dim(&self) -> usize {
        match self {
            SavedModel::Ebm(m) => m.covariate_dim(),
            SavedModel::Baseline(m) => m.covariate_dim(),
        }
    }

    pub fn t_m(&self) -> f64 {
        match self {
            SavedModel::Ebm(m) => m.t_m,
            SavedModel::Baseline(m) => m.grid.t_m,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: String,
    mlp: MlpConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<DiscreteGrid>,
    normalization: Option<NormalizationStats>,
    layers: Vec<LayerFile>,
}

fn layers_to_file(params: &ParameterSet) -> Vec<LayerFile> {
    params
        .layers
        .iter()
        .map(|l| LayerFile {
            rows: l.out_dim(),
            cols: l.in_dim(),
            weights: l.weights.iter().copied().collect(),
            bias: l.bias.to_vec(),
        })
        .collect()
}

fn layers_from_file(layers: Vec<LayerFile>, cfg: &MlpConfig) -> Result<ParameterSet> {
    let dense = layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            if l.bias.len() != l.rows {
                return Err(Error::ModelFormat(format!(
                    "layer {i}: bias has {} entries for {} rows",
                    l.bias.len(),
                    l.rows
                )));
            }
            let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights).map_err(|_| {
                Error::ModelFormat(format!("layer {i}: weight count does not match {}x{}", l.rows, l.cols))
            })?;
            Ok(Dense {
                weights,
                bias: Array1::from(l.bias),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ParameterSet { layers: dense };
    params
        .check_shapes(cfg)
        .map_err(|e| Error::ModelFormat(format!("shape mismatch: {e}")))?;
    Ok(params)
}

pub fn save_model<W: Write>(model: &SavedModel, writer: W) -> Result<()> {
    let file = match model {
        SavedModel::Ebm(m) => ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: "ebm".into(),
            mlp: m.cfg,
            t_m: Some(m.t_m),
            gamma: Some(m.gamma),
            time_scale: Some(m.time_scale),
            grid: None,
            normalization: m.normalization.clone(),
            layers: layers_to_file(&m.params),
        },
        SavedModel::Baseline(m) => ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: m.kind.name().into(),
            mlp: m.cfg,
            t_m: Some(m.grid.t_m),
            gamma: None,
            time_scale: None,
            grid: Some(m.grid),
            normalization: m.normalization.clone(),
            layers: layers_to_file(&m.params),
        },
    };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

pub fn load_model<R: Read>(reader: R) -> Result<SavedModel> {
    let file: ModelFile = serde_json::from_reader(reader)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let missing = |what: &str| Error::ModelFormat(format!("{} model is missing `{what}`", file.kind));
    match file.kind.as_str() {
        "ebm" => {
            let t_m = file.t_m.ok_or_else(|| missing("t_m"))?;
            let gamma = file.gamma.ok_or_else(|| missing("gamma"))?;
            let time_scale = file.time_scale.ok_or_else(|| missing("time_scale"))?;
            let params = layers_from_file(file.layers, &file.mlp)?;
            Ok(SavedModel::Ebm(EnergyModel::new(
                file.mlp,
                params,
                t_m,
                gamma,
                time_scale,
                file.normalization,
            )?))
        }
        "pch" | "pmf" => {
            let kind = if file.kind == "pch" {
                BaselineKind::Pch
            } else {
                BaselineKind::Pmf
            };
            let grid = file.grid.ok_or_else(|| missing("grid"))?;
            let params = layers_from_file(file.layers, &file.mlp)?;
            Ok(SavedModel::Baseline(DiscreteTimeModel::new(
                kind,
                file.mlp,
                params,
                grid,
                file.normalization,
            )?))
        }
        other => Err(Error::ModelFormat(format!("unknown model kind {other:?}"))),
    }
}

pub fn save_model_file(model: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<SavedModel> {
    load_model(BufReader::new(File::open(path)?))
}
