//! On-disk formats: the bank container (templates + scalers in one binary
//! file), strict JSON run configs, tab-separated history files, and a raw
//! row-major matrix dump.
//!
//! Bank layout (little-endian):
//!
//! ```text
//! magic  "WTB1"                      4 bytes
//! version u32 = 1                     4
//! n       u32  template count         4
//! r1      u32  grid rows              4
//! r2      u32  grid cols              4
//! l       u32  scaler layer count     4
//! b       u32  scaler block columns   4
//! dtype   u8 = 0 (f64)                1
//! payload n·r1·r2 template f64s, then n·l·b scaler f64s, row-major
//! ```
//!
//! Writes go through a sibling temp file and an atomic rename.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::factorization::{FactorizationConfig, ScalerSet, TemplateBank};
use crate::linalg::Matrix;
use crate::packing::ModelDims;
use crate::pipeline::{DataSettings, OptimSettings, PretrainConfig, StepRecord};
use crate::scaling::WidthSchedule;

pub const BANK_MAGIC: [u8; 4] = *b"WTB1";
pub const BANK_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum BankFileError {
    #[error("bad magic: expected \"WTB1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {BANK_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unsupported dtype code {found} (expected 0 = f64)")]
    UnsupportedDtype { found: u8 },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("invalid header counts: n={n}, r1={r1}, r2={r2}, l={l}, b={b}")]
    InvalidHeader {
        n: u32,
        r1: u32,
        r2: u32,
        l: u32,
        b: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` via temp file + rename, so readers never observe
/// a partial file.
fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Serializes a template bank and its matching scalers into one container.
pub fn save_bank(
    path: &Path,
    bank: &TemplateBank,
    scalers: &ScalerSet,
) -> Result<(), BankFileError> {
    assert_eq!(
        bank.config(),
        scalers.config(),
        "save_bank: bank and scalers disagree on factorization config"
    );
    let cfg = bank.config();
    let mut bytes = Vec::with_capacity(
        29 + 8 * (bank.param_count() + scalers.param_count()),
    );
    bytes.extend_from_slice(&BANK_MAGIC);
    bytes.extend_from_slice(&BANK_VERSION.to_le_bytes());
    for v in [
        cfg.n_templates as u32,
        cfg.r1 as u32,
        cfg.r2 as u32,
        scalers.layers() as u32,
        scalers.b_cols() as u32,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.push(DTYPE_F64);
    for x in bank.templates().data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    for s in scalers.scalers() {
        for x in s.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

/// Loads a bank container; every malformed-file condition maps to a distinct
/// error variant.
pub fn load_bank(path: &Path) -> Result<(TemplateBank, ScalerSet), BankFileError> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 29];
    let mut read_total = 0usize;
    while read_total < header.len() {
        let n = file.read(&mut header[read_total..])?;
        if n == 0 {
            return Err(BankFileError::TruncatedPayload {
                expected: header.len() as u64,
                actual: read_total as u64,
            });
        }
        read_total += n;
    }

    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != BANK_MAGIC {
        return Err(BankFileError::BadMagic { found: magic });
    }
    let u32_at = |off: usize| u32::from_le_bytes(header[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BANK_VERSION {
        return Err(BankFileError::UnsupportedVersion { found: version });
    }
    let (n, r1, r2, l, b) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24));
    let dtype = header[28];
    if dtype != DTYPE_F64 {
        return Err(BankFileError::UnsupportedDtype { found: dtype });
    }
    if n == 0 || r1 == 0 || r2 == 0 || l == 0 || b == 0 {
        return Err(BankFileError::InvalidHeader { n, r1, r2, l, b });
    }

    let template_values = n as u64 * r1 as u64 * r2 as u64;
    let scaler_values = n as u64 * l as u64 * b as u64;
    let expected = 8 * (template_values + scaler_values);
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if (payload.len() as u64) != expected {
        return Err(BankFileError::TruncatedPayload {
            expected: expected + header.len() as u64,
            actual: payload.len() as u64 + header.len() as u64,
        });
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let config = FactorizationConfig::new(n as usize, r1 as usize, r2 as usize)
        .expect("header counts validated");
    let area = config.area();
    let templates = Matrix::new(
        n as usize,
        area,
        values.by_ref().take(n as usize * area).collect(),
    );
    let mats: Vec<Matrix> = (0..n)
        .map(|_| {
            Matrix::new(
                l as usize,
                b as usize,
                values.by_ref().take(l as usize * b as usize).collect(),
            )
        })
        .collect();
    let bank = TemplateBank::new(config, templates);
    let scalers = ScalerSet::new(config, l as usize, area * b as usize, mats)
        .expect("divisibility holds by construction");
    Ok((bank, scalers))
}

/// Raw matrix dump: `rows: u64`, `cols: u64`, then row-major f64 values,
/// all little-endian. The interchange format for unified weight matrices.
pub fn save_matrix_dump(path: &Path, m: &Matrix) -> Result<(), BankFileError> {
    let mut bytes = Vec::with_capacity(16 + 8 * m.data().len());
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_matrix_dump(path: &Path) -> Result<Matrix, BankFileError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(BankFileError::TruncatedPayload {
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = 16 + 8 * (rows as u64) * (cols as u64);
    if bytes.len() as u64 != expected {
        return Err(BankFileError::TruncatedPayload {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::new(rows, cols, data))
}

/// History file: one `step<TAB>loss<TAB>mask_r1<TAB>mask_r2` line per step.
/// Losses are printed in full round-trip precision so reruns byte-compare.
pub fn save_history(path: &Path, history: &[StepRecord]) -> Result<(), BankFileError> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&format!(
            "{}\t{:?}\t{}\t{}\n",
            rec.step, rec.loss, rec.mask_r1, rec.mask_r2
        ));
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum HistoryParseError {
    #[error("line {line}: expected 4 tab-separated fields, found {fields}")]
    FieldCount { line: usize, fields: usize },
    #[error("line {line}: {message}")]
    BadValue { line: usize, message: String },
    #[error("line {line}: step {step} does not increase monotonically")]
    NonMonotonic { line: usize, step: usize },
}

pub fn parse_history(text: &str) -> Result<Vec<StepRecord>, HistoryParseError> {
    let mut out = Vec::new();
    let mut last_step: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(HistoryParseError::FieldCount {
                line: i + 1,
                fields: fields.len(),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, HistoryParseError> {
            s.parse::<f64>().map_err(|e| HistoryParseError::BadValue {
                line: i + 1,
                message: format!("{what}: {e}"),
            })
        };
        let step = parse(fields[0], "step")? as usize;
        if let Some(prev) = last_step {
            if step <= prev {
                return Err(HistoryParseError::NonMonotonic { line: i + 1, step });
            }
        }
        last_step = Some(step);
        out.push(StepRecord {
            step,
            loss: parse(fields[1], "loss")?,
            mask_r1: parse(fields[2], "mask_r1")? as usize,
            mask_r2: parse(fields[3], "mask_r2")? as usize,
        });
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// Strict mirror of the JSON schema; unknown keys are rejected and every key
// is required.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    dims: DimsSection,
    factorization: FactorizationSection,
    schedule: ScheduleSection,
    optim: OptimSection,
    data: DataSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsSection {
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "d")]
    head_dim: usize,
    ffn: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorizationSection {
    n: usize,
    r1: usize,
    r2: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSection {
    widths: Vec<[usize; 2]>,
    weights: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimSection {
    lr: f64,
    betas: [f64; 2],
    wd: f64,
    steps: usize,
    batch: usize,
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    vocab: usize,
    seq_len: usize,
    n: usize,
}

/// Parses a strict run-config JSON document into a pretraining config.
pub fn parse_run_config(text: &str) -> Result<PretrainConfig, RunConfigError> {
    let file: RunConfigFile = serde_json::from_str(text)?;
    let dims = ModelDims::new(
        file.dims.layers,
        file.dims.heads,
        file.dims.head_dim,
        Some(file.dims.ffn),
    )
    .map_err(|e| RunConfigError::Invalid(e.to_string()))?;
    let factorization =
        FactorizationConfig::new(file.factorization.n, file.factorization.r1, file.factorization.r2)
            .map_err(|e| RunConfigError::Invalid(e.to_string()))?;
    let schedule = WidthSchedule::new(
        factorization.r1,
        factorization.r2,
        file.schedule.widths.iter().map(|w| (w[0], w[1])).collect(),
        file.schedule.weights,
    )
    .map_err(|e| RunConfigError::Invalid(e.to_string()))?;
    Ok(PretrainConfig {
        dims,
        factorization,
        schedule,
        optim: OptimSettings {
            lr: file.optim.lr,
            beta1: file.optim.betas[0],
            beta2: file.optim.betas[1],
            weight_decay: file.optim.wd,
            steps: file.optim.steps,
            batch: file.optim.batch,
            seed: file.optim.seed,
        },
        data: DataSettings {
            vocab: file.data.vocab,
            seq_len: file.data.seq_len,
            n_examples: file.data.n,
        },
    })
}

pub fn load_run_config(path: &Path) -> Result<PretrainConfig, RunConfigError> {
    let text = fs::read_to_string(path)?;
    parse_run_config(&text)
}
