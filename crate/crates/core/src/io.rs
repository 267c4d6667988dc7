//! File formats: matrix JSON, JSON-lines datasets, factorization files,
//! model checkpoints, curve CSVs and evaluation reports.
//!
//! Real matrices serialize as {"n", "rows"} row-major with plain floats;
//! integer matrices use base-10 strings so arbitrary-precision entries
//! survive the round trip. All writers are deterministic (sorted maps, fixed
//! field order), which is what makes byte-identical reruns possible.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{CurvePoint, DatasetSpec, EvalReport, MeanStd, WorstPSection};
use crate::intmat::IntMat;
use crate::lattice::{Basis, UnimodularMatrix};
use crate::mat::Mat;
use crate::policy::{MoveFill, ParamTensor, PolicyConfig, PolicyParams};
use crate::unimodular::{ExtendedGaussMove, MoveFactorization};

pub const DATASET_GENERATOR: &str = "expm-uniform01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_mat(m: &Mat) -> Self {
        MatrixJson { n: m.rows(), rows: m.to_row_vecs() }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        if self.rows.len() != self.n || self.rows.iter().any(|r| r.len() != self.n) {
            return Err(Error::ShapeMismatch(format!(
                "matrix declares n={} but rows disagree",
                self.n
            )));
        }
        Mat::from_rows(&self.rows)
    }

    pub fn to_basis(&self) -> Result<Basis> {
        Basis::new(self.to_mat()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntMatrixJson {
    pub n: usize,
    pub rows: Vec<Vec<String>>,
}

impl IntMatrixJson {
    pub fn from_intmat(m: &IntMat) -> Self {
        IntMatrixJson {
            n: m.n(),
            rows: (0..m.n())
                .map(|i| m.row(i).iter().map(|v| v.to_string()).collect())
                .collect(),
        }
    }

    pub fn to_intmat(&self) -> Result<IntMat> {
        if self.rows.len() != self.n || self.rows.iter().any(|r| r.len() != self.n) {
            return Err(Error::ShapeMismatch(format!(
                "integer matrix declares n={} but rows disagree",
                self.n
            )));
        }
        let rows: Result<Vec<Vec<BigInt>>> = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|s| {
                        BigInt::from_str(s).map_err(|e| Error::Parse {
                            line: 0,
                            msg: format!("bad integer entry {s:?}: {e}"),
                        })
                    })
                    .collect()
            })
            .collect();
        IntMat::from_rows(&rows?)
    }

    pub fn to_unimodular(&self) -> Result<UnimodularMatrix> {
        UnimodularMatrix::new(self.to_intmat()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoveJson {
    pub i: usize,
    pub j: usize,
    pub a: Vec<String>,
    pub b: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizationJson {
    pub n: usize,
    pub moves: Vec<MoveJson>,
    pub target: IntMatrixJson,
    pub induction_moves: usize,
    pub base_moves: usize,
}

fn bigs_to_strings(v: &[BigInt]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn strings_to_bigs(v: &[String]) -> Result<Vec<BigInt>> {
    v.iter()
        .map(|s| {
            BigInt::from_str(s)
                .map_err(|e| Error::Parse { line: 0, msg: format!("bad integer {s:?}: {e}") })
        })
        .collect()
}

impl FactorizationJson {
    pub fn from_factorization(f: &MoveFactorization) -> Self {
        FactorizationJson {
            n: f.target.n(),
            moves: f
                .moves
                .iter()
                .map(|m| MoveJson {
                    i: m.i,
                    j: m.j,
                    a: bigs_to_strings(&m.row_values),
                    b: bigs_to_strings(&m.col_values),
                })
                .collect(),
            target: IntMatrixJson::from_intmat(f.target.mat()),
            induction_moves: f.induction_moves,
            base_moves: f.base_moves,
        }
    }

    pub fn to_factorization(&self) -> Result<MoveFactorization> {
        let moves: Result<Vec<ExtendedGaussMove>> = self
            .moves
            .iter()
            .map(|m| {
                ExtendedGaussMove::new(
                    self.n,
                    m.i,
                    m.j,
                    strings_to_bigs(&m.a)?,
                    strings_to_bigs(&m.b)?,
                )
            })
            .collect();
        Ok(MoveFactorization {
            moves: moves?,
            target: self.target.to_unimodular()?,
            induction_moves: self.induction_moves,
            base_moves: self.base_moves,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    pub generator: String,
}

impl DatasetHeader {
    pub fn new(spec_n: usize, count: usize, seed: u64) -> Self {
        DatasetHeader { n: spec_n, count, seed, generator: DATASET_GENERATOR.into() }
    }
}

/// JSON lines: a header record, then one matrix object per line.
pub fn write_dataset<W: Write>(out: &mut W, header: &DatasetHeader, bases: &[Basis]) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"))?;
    for b in bases {
        let m = MatrixJson::from_mat(b.mat());
        writeln!(out, "{}", serde_json::to_string(&m).expect("matrix serializes"))?;
    }
    Ok(())
}

pub fn write_dataset_file(path: &Path, header: &DatasetHeader, bases: &[Basis]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_dataset(&mut f, header, bases)
}

/// Reads a JSON-lines dataset; parse failures carry 1-based line numbers.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Basis>)> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut header: Option<DatasetHeader> = None;
    let mut bases = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad dataset header: {e}"),
            })?);
            continue;
        }
        let m: MatrixJson = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad matrix record: {e}"),
        })?;
        let basis = m.to_basis().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("invalid basis: {e}"),
        })?;
        bases.push(basis);
    }
    let header = header.ok_or(Error::Parse { line: 0, msg: "empty dataset file".into() })?;
    Ok((header, bases))
}

pub fn dataset_header_for(spec: &DatasetSpec, count: usize) -> DatasetHeader {
    DatasetHeader::new(spec.n, count, spec.seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Model checkpoint: configuration, seed, normalization convention and every
/// parameter tensor by name (sorted for deterministic bytes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointJson {
    pub n: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub d: usize,
    pub move_fill: MoveFill,
    pub gumbel_temperature: f64,
    pub seed: u64,
    pub normalization: String,
    pub tensors: BTreeMap<String, TensorJson>,
}

pub const NORMALIZATION_CONVENTION: &str = "gram divided by trace/n";

pub fn checkpoint_from_params(params: &PolicyParams, n: usize, seed: u64) -> CheckpointJson {
    let tensors: BTreeMap<String, TensorJson> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, TensorJson { shape: t.shape.clone(), data: t.data.clone() }))
        .collect();
    CheckpointJson {
        n,
        layers: params.config.layers,
        d: params.config.hidden,
        move_fill: params.config.move_fill,
        gumbel_temperature: params.config.gumbel_temperature,
        seed,
        normalization: NORMALIZATION_CONVENTION.into(),
        tensors,
    }
}

pub fn params_from_checkpoint(ck: &CheckpointJson) -> Result<PolicyParams> {
    let config = PolicyConfig {
        layers: ck.layers,
        hidden: ck.d,
        move_fill: ck.move_fill,
        gumbel_temperature: ck.gumbel_temperature,
    };
    // build a skeleton with the right shapes, then fill tensors by name
    let mut params = PolicyParams::init(config, 0);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let stored = ck.tensors.get(name).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("checkpoint missing tensor {name:?}"),
        })?;
        if stored.shape != slot.shape || stored.data.len() != slot.data.len() {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "checkpoint tensor {name:?} has shape {:?}, expected {:?}",
                    stored.shape, slot.shape
                ),
            });
        }
        *slot = ParamTensor { shape: stored.shape.clone(), data: stored.data.clone() };
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, ck: &CheckpointJson) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(ck).expect("checkpoint serializes"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointJson> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: 0, msg: format!("bad checkpoint: {e}") })
}

/// CSV columns: epoch, train_loss, test_mean_logdefect, test_std_logdefect,
/// lll_mean_logdefect, lll_std_logdefect. Not-yet-evaluated test columns are
/// left empty.
pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(
        out,
        "epoch,train_loss,test_mean_logdefect,test_std_logdefect,lll_mean_logdefect,lll_std_logdefect"
    )?;
    let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
    for p in curve {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.epoch,
            p.train_loss,
            fmt(p.test_mean_logdefect),
            fmt(p.test_std_logdefect),
            fmt(p.lll_mean_logdefect),
            fmt(p.lll_std_logdefect)
        )?;
    }
    Ok(())
}

pub fn write_curve_csv_file(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_curve_csv(&mut f, curve)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerMatrixArrays {
    pub policy: Vec<f64>,
    pub lll: Vec<f64>,
    pub baseline: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateBlock {
    pub policy: MeanStd,
    pub lll: MeanStd,
    pub baseline: MeanStd,
}

/// On-disk evaluation report: per-matrix arrays, aggregate blocks, and the
/// worst-subset sections keyed by selecting method and p. Wall-clock timings
/// are deliberately absent (they would break byte-identical reruns).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportJson {
    pub n: usize,
    pub k: usize,
    pub count: usize,
    pub per_matrix: PerMatrixArrays,
    pub aggregates: AggregateBlock,
    pub worst_p: Vec<WorstPSection>,
}

impl ReportJson {
    pub fn from_report(report: &EvalReport) -> Self {
        ReportJson {
            n: report.n,
            k: report.k,
            count: report.count,
            per_matrix: PerMatrixArrays {
                policy: report.per_matrix.iter().map(|r| r.policy).collect(),
                lll: report.per_matrix.iter().map(|r| r.lll).collect(),
                baseline: report.per_matrix.iter().map(|r| r.baseline).collect(),
            },
            aggregates: AggregateBlock {
                policy: report.policy,
                lll: report.lll,
                baseline: report.baseline,
            },
            worst_p: report.worst_p.clone(),
        }
    }
}

pub fn write_report_file(path: &Path, report: &ReportJson) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(report).expect("report serializes"))?;
    Ok(())
}
