//! CSV and JSON artifacts.
//!
//! Every CSV starts with a `# config_hash=<hex> seed=<n>` comment line;
//! readers skip lines starting with `#`. Sidecars carry the same pair.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::sampler::WeightedSampleSet;
use crate::scalar::Real;

/// Content hash of a serializable config: sha256 over its JSON with
/// object keys sorted, first 16 hex digits.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(hex::encode(digest)[..16].to_string())
}

/// Provenance stamp written into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

pub fn csv_writer(path: &Path, stamp: &Stamp) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(stamp.comment().as_bytes())?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?)
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub const TRAIN_LOG_HEADER: [&str; 9] = [
    "step",
    "loss_total",
    "loss_cfm",
    "loss_avg",
    "loss_inv",
    "lr",
    "grad_norm",
    "skipped",
    "wall_ms",
];

/// One row of the training log, in [`TRAIN_LOG_HEADER`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_cfm: f64,
    pub loss_avg: f64,
    pub loss_inv: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: u8,
    pub wall_ms: u64,
}

fn coordinate_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x_{j}")).collect()
}

/// Writes `x_0..x_{d−1}, logp_model, energy, logw, valid` and a JSON
/// sidecar holding `meta` plus the stamp.
pub fn write_sample_set<T: Real, M: Serialize>(path: &Path, set: &WeightedSampleSet<T>, stamp: &Stamp, meta: &M) -> Result<()> {
    let mut w = csv_writer(path, stamp)?;
    let mut header = coordinate_header(set.dim());
    header.extend(["logp_model", "energy", "logw", "valid"].map(String::from));
    w.write_record(&header)?;
    for i in 0..set.len() {
        let mut rec: Vec<String> = set.x.row(i).iter().map(|v| fmt_real(*v)).collect();
        rec.push(fmt_real(set.logp_model[i]));
        rec.push(fmt_real(set.energy[i]));
        rec.push(fmt_real(set.logw[i]));
        rec.push(u8::from(set.valid[i]).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_sidecar(path, stamp, meta)
}

fn write_sidecar<M: Serialize>(path: &Path, stamp: &Stamp, meta: &M) -> Result<()> {
    let mut doc = serde_json::to_value(meta)?;
    match doc.as_object_mut() {
        Some(obj) => {
            obj.insert("config_hash".into(), stamp.config_hash.clone().into());
            obj.insert("seed".into(), stamp.seed.into());
        }
        None => return Err(invalid("sidecar metadata must be a JSON object")),
    }
    write_json(&sidecar_path(path), &doc)
}

/// Plain coordinate file (`x_0..x_{d−1}`) with a metadata sidecar; used
/// for training sets.
pub fn write_points<T: Real, M: Serialize>(path: &Path, x: &Matrix<T>, stamp: &Stamp, meta: &M) -> Result<()> {
    let mut w = csv_writer(path, stamp)?;
    w.write_record(coordinate_header(x.cols()))?;
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(|v| fmt_real(*v)))?;
    }
    w.flush()?;
    write_sidecar(path, stamp, meta)
}

/// Reads the `x_*` columns of a points or sample file.
pub fn read_points<T: Real>(path: &Path) -> Result<Matrix<T>> {
    let mut r = csv_reader(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("x_"))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(invalid(format!("{} has no x_ columns", path.display())));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for &c in &cols {
            let v: f64 = rec[c]
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad number `{}` in {}", &rec[c], path.display())))?;
            data.push(T::of(v));
        }
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols.len(), data))
}

/// Shortest round-trip decimal form.
pub fn fmt_real<T: Real>(v: T) -> String {
    let f = v.as_f64();
    if f.is_nan() {
        "NaN".into()
    } else if f.is_infinite() {
        if f > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{f:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Gmm;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": [1, 2], "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        let c: serde_json::Value = serde_json::from_str(r#"{"a": [1, 2], "b": 2}"#).unwrap();
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    }

    #[test]
    fn sample_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let x = Matrix::from_rows(&[vec![0.1, -2.0], vec![f64::NAN, 1.0 / 3.0]]);
        let set = WeightedSampleSet::from_parts(x, vec![-1.0, 0.5], vec![true, true], &Gmm::default_2d(), 8);
        let stamp = Stamp::new("abc", 3);
        write_sample_set(&path, &set, &stamp, &serde_json::json!({"nfe_total": 8})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=abc seed=3");
        assert_eq!(lines.next().unwrap(), "x_0,x_1,logp_model,energy,logw,valid");
        let back: Matrix<f64> = read_points(&path).unwrap();
        assert_eq!(back.row(0), &[0.1, -2.0]);
        assert_eq!(back.row(1)[1], 1.0 / 3.0);
        assert!(back.row(1)[0].is_nan());
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
        assert_eq!(side["config_hash"], "abc");
        assert_eq!(side["seed"], 3);
    }

    #[test]
    fn log_rows_serialize_in_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut w = csv_writer(&path, &Stamp::new("h", 1)).unwrap();
        w.write_record(TRAIN_LOG_HEADER).unwrap();
        w.serialize(TrainLogRow {
            step: 1,
            loss_total: 1.5,
            loss_cfm: 1.0,
            loss_avg: 0.25,
            loss_inv: 0.025,
            lr: 5e-4,
            grad_norm: 2.0,
            skipped: 0,
            wall_ms: 7,
        })
        .unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "step,loss_total,loss_cfm,loss_avg,loss_inv,lr,grad_norm,skipped,wall_ms"
        );
        assert_eq!(text.lines().nth(2).unwrap(), "1,1.5,1.0,0.25,0.025,0.0005,2.0,0,7");
    }
}
