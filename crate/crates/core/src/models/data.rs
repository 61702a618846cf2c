//! Dataset container and the text formats it is loaded from.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const FRISK_ETHNICITIES: usize = 3;
pub const FRISK_PRECINCTS: usize = 32;
pub const FRISK_ROWS: usize = FRISK_ETHNICITIES * FRISK_PRECINCTS;
pub const FRISK_HEADER: [&str; 4] = ["eth", "precinct", "stops", "arrests"];
/// Divisor applied to arrest counts to obtain the Poisson exposure `N_ep`.
pub const DEFAULT_ARREST_SCALE: f64 = 15.0;
pub const REDWINE_FEATURES: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    pub standardization: Option<Standardization>,
    pub notes: Vec<String>,
}

/// Dense features, targets and a train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub targets: Array1<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// All rows in the training split.
    pub fn new(features: Array2<f64>, targets: Array1<f64>, source: &str) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Schema(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Schema("dataset contains non-finite values".into()));
        }
        let n = targets.len();
        Ok(Dataset {
            features,
            targets,
            train: (0..n).collect(),
            test: Vec::new(),
            meta: DatasetMeta {
                source: source.to_string(),
                ..Default::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features();
        &self.features.as_slice().expect("standard layout")[i * p..(i + 1) * p]
    }

    /// Shuffle and keep the first `round(fraction · N)` rows for training.
    pub fn split_fraction<G: Rng + ?Sized>(mut self, fraction: f64, rng: &mut G) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config("train_fraction", "train_fraction must lie in [0, 1]"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_train = (fraction * self.len() as f64).round() as usize;
        self.test = idx.split_off(n_train);
        self.train = idx;
        self.train.sort_unstable();
        self.test.sort_unstable();
        Ok(self)
    }

    /// Two disjoint random subsets of `size` rows each, for training and test.
    pub fn split_subsets<G: Rng + ?Sized>(mut self, size: usize, rng: &mut G) -> Result<Self> {
        if 2 * size > self.len() {
            return Err(Error::config(
                "subset_size",
                format!(
                    "two subsets of {size} rows need at least {} rows, have {}",
                    2 * size,
                    self.len()
                ),
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        self.train = idx[..size].to_vec();
        self.test = idx[size..2 * size].to_vec();
        self.train.sort_unstable();
        self.test.sort_unstable();
        Ok(self)
    }

    /// Standardize every feature with training-split moments.
    pub fn standardize(mut self) -> Self {
        let p = self.n_features();
        let n = self.train.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        let mut std = vec![0.0; p];
        for j in 0..p {
            mean[j] = self.train.iter().map(|&i| self.features[[i, j]]).sum::<f64>() / n;
            let var = self
                .train
                .iter()
                .map(|&i| (self.features[[i, j]] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        for mut row in self.features.rows_mut() {
            for j in 0..p {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
        self.meta.standardization = Some(Standardization { mean, std });
        self.meta
            .notes
            .push("features standardized with training-split mean and standard deviation".into());
        self
    }
}

fn parse_label(token: &str, line: usize) -> Result<f64> {
    match token {
        "+1" | "1" | "1.0" | "+1.0" => Ok(1.0),
        "-1" | "0" | "-1.0" | "0.0" => Ok(0.0),
        other => Err(Error::Parse {
            line,
            msg: format!("unrecognised label `{other}`"),
        }),
    }
}

/// Parse libsvm sparse text: `label idx:val idx:val ...` with 1-based, strictly
/// increasing indices. Labels ±1 map to 1/0; the dense width is the largest
/// index present. Blank lines and `#` comments are skipped.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut width = 0;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = parse_label(tokens.next().unwrap(), line)?;
        let mut entries = Vec::new();
        let mut last = 0;
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line,
                msg: format!("malformed token `{tok}`"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad feature index in `{tok}`"),
            })?;
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad feature value in `{tok}`"),
            })?;
            if idx == 0 || idx <= last {
                return Err(Error::Parse {
                    line,
                    msg: format!("feature index {idx} is not strictly increasing from 1"),
                });
            }
            if !val.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value in `{tok}`"),
                });
            }
            last = idx;
            entries.push((idx, val));
        }
        width = width.max(last);
        rows.push((label, entries));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty libsvm file".into(),
        });
    }
    let mut features = Array2::zeros((rows.len(), width));
    let mut targets = Array1::zeros(rows.len());
    for (i, (label, entries)) in rows.into_iter().enumerate() {
        targets[i] = label;
        for (idx, val) in entries {
            features[[i, idx - 1]] = val;
        }
    }
    Dataset::new(features, targets, "libsvm")
}

/// Load the frisk table: header `eth,precinct,stops,arrests`, one row per
/// (ethnicity, precinct) pair, 3 × 32 = 96 rows. Features are
/// `[eth_code, precinct_code, exposure]` with zero-based codes assigned in
/// sorted order of the raw labels and `exposure = arrests / arrest_scale`.
/// Every row is training data.
pub fn load_frisk_csv(text: &str, arrest_scale: f64) -> Result<Dataset> {
    if !(arrest_scale > 0.0) {
        return Err(Error::config(
            "frisk_arrest_scale",
            "frisk_arrest_scale must be positive",
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != FRISK_HEADER {
        return Err(Error::Schema(format!(
            "frisk header must be `{}`, found `{}`",
            FRISK_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut raw = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let num = |col: usize| -> Result<f64> {
            record[col].parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("column `{}` is not numeric: `{}`", FRISK_HEADER[col], &record[col]),
            })
        };
        let stops = num(2)?;
        let arrests = num(3)?;
        if stops < 0.0 || stops.fract() != 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("stops must be a non-negative integer, found {stops}"),
            });
        }
        if !(arrests > 0.0) {
            return Err(Error::Parse {
                line,
                msg: format!("arrests must be positive, found {arrests}"),
            });
        }
        raw.push((record[0].to_string(), record[1].to_string(), stops, arrests));
    }
    if raw.len() != FRISK_ROWS {
        return Err(Error::Schema(format!(
            "frisk table needs {FRISK_ROWS} rows, found {}",
            raw.len()
        )));
    }
    let codes = |values: Vec<&String>| -> BTreeMap<String, usize> {
        let mut keys: Vec<String> = values.into_iter().cloned().collect();
        keys.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) => x.total_cmp(&y),
            _ => a.cmp(b),
        });
        keys.dedup();
        keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect()
    };
    let eth = codes(raw.iter().map(|r| &r.0).collect());
    let precinct = codes(raw.iter().map(|r| &r.1).collect());
    if eth.len() != FRISK_ETHNICITIES || precinct.len() != FRISK_PRECINCTS {
        return Err(Error::Schema(format!(
            "frisk table needs {FRISK_ETHNICITIES} ethnicity groups and {FRISK_PRECINCTS} precincts, found {} and {}",
            eth.len(),
            precinct.len()
        )));
    }
    let mut seen = vec![false; FRISK_ROWS];
    let mut features = Array2::zeros((FRISK_ROWS, 3));
    let mut targets = Array1::zeros(FRISK_ROWS);
    for (i, (e, p, stops, arrests)) in raw.iter().enumerate() {
        let (e, p) = (eth[e], precinct[p]);
        let cell = e * FRISK_PRECINCTS + p;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::Schema(format!(
                "duplicate (eth, precinct) pair at data row {}",
                i + 1
            )));
        }
        features[[i, 0]] = e as f64;
        features[[i, 1]] = p as f64;
        features[[i, 2]] = arrests / arrest_scale;
        targets[i] = *stops;
    }
    let mut data = Dataset::new(features, targets, "frisk csv")?;
    data.meta
        .notes
        .push(format!("exposure = arrests / {arrest_scale}; no test split"));
    Ok(data)
}

/// Load a red-wine quality table: a header with 11 physico-chemical columns and
/// a final `quality` column, separated by `;` or `,`. Features are left raw;
/// call [`Dataset::standardize`] after splitting.
pub fn load_redwine_csv(text: &str) -> Result<Dataset> {
    let first = text.lines().next().unwrap_or("");
    let delimiter = if first.contains(';') { b';' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() != REDWINE_FEATURES + 1 || header.last().map(String::as_str) != Some("quality") {
        return Err(Error::Schema(format!(
            "redwine header needs {} feature columns followed by `quality`, found {:?}",
            REDWINE_FEATURES, header
        )));
    }
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let values: Vec<f64> = record
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric value `{v}`"),
                })
            })
            .collect::<Result<_>>()?;
        feats.extend_from_slice(&values[..REDWINE_FEATURES]);
        targets.push(values[REDWINE_FEATURES]);
    }
    if targets.is_empty() {
        return Err(Error::Schema("redwine table has no rows".into()));
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, REDWINE_FEATURES), feats).unwrap();
    Dataset::new(features, Array1::from(targets), "redwine csv")
}
