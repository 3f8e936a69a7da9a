//! Two-trial tabular data: CSV ingestion, validation, and basis construction.
//!
//! A [`Dataset`] holds row-wise individual-patient data from a source trial
//! (`s = 1`) and a target trial (`s = 0`). Covariates live in three blocks:
//! baseline covariates `x`, the adjustment proxy `w` (measured in both
//! trials), and the reweighting proxy `z` (required in the source trial only).
//! Categorical `x` columns are one-hot encoded at load time, dropping the
//! first level.
//!
//! Datasets are immutable after construction and safe to share across
//! threads; every operation here is pure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::Error;
use crate::Result;

/// One dense column block (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    names: Vec<String>,
    /// Marks one-hot indicator columns produced from categorical input.
    indicator: Vec<bool>,
    data: Vec<f64>,
    ncols: usize,
}

impl Block {
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Self {
        let ncols = names.len();
        let indicator = vec![false; ncols];
        assert!(ncols == 0 || data.len() % ncols == 0);
        Self {
            names,
            indicator,
            data,
            ncols,
        }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_indicator(&self, j: usize) -> bool {
        self.indicator[j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.ncols);
        self.data.extend_from_slice(row);
    }

    fn empty_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            indicator: self.indicator.clone(),
            data: Vec::new(),
            ncols: self.ncols,
        }
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            names: self.names.clone(),
            indicator: self.indicator.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            ncols: self.ncols,
        }
    }
}

/// Row-wise two-trial individual-patient data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    s: Vec<u8>,
    a: Vec<Option<i8>>,
    delta: Vec<u8>,
    y: Vec<Option<f64>>,
    x: Block,
    w: Block,
    z: Block,
    z_present: Vec<bool>,
    /// Known treated-arm propensity e(1 | X, S = 1), constant per trial in
    /// practice but stored per row.
    e1: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from parts and validates the trial invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        s: Vec<u8>,
        a: Vec<Option<i8>>,
        delta: Vec<u8>,
        y: Vec<Option<f64>>,
        x: Block,
        w: Block,
        z: Block,
        z_present: Vec<bool>,
        e1: Vec<f64>,
    ) -> Result<Self> {
        let ds = Self {
            s,
            a,
            delta,
            y,
            x,
            w,
            z,
            z_present,
            e1,
        };
        ds.validate()?;
        Ok(ds)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts_unchecked(
        s: Vec<u8>,
        a: Vec<Option<i8>>,
        delta: Vec<u8>,
        y: Vec<Option<f64>>,
        x: Block,
        w: Block,
        z: Block,
        z_present: Vec<bool>,
        e1: Vec<f64>,
    ) -> Self {
        Self {
            s,
            a,
            delta,
            y,
            x,
            w,
            z,
            z_present,
            e1,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.s.len()
    }

    pub fn is_source(&self, i: usize) -> bool {
        self.s[i] == 1
    }

    pub fn s(&self, i: usize) -> f64 {
        f64::from(self.s[i])
    }

    pub fn a(&self, i: usize) -> Option<i8> {
        self.a[i]
    }

    pub fn delta(&self, i: usize) -> u8 {
        self.delta[i]
    }

    pub fn y(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    pub fn e1(&self, i: usize) -> f64 {
        self.e1[i]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        self.w.row(i)
    }

    pub fn z_row(&self, i: usize) -> Option<&[f64]> {
        if self.z_present[i] {
            Some(self.z.row(i))
        } else {
            None
        }
    }

    pub fn x_block(&self) -> &Block {
        &self.x
    }

    pub fn w_block(&self) -> &Block {
        &self.w
    }

    pub fn z_block(&self) -> &Block {
        &self.z
    }

    pub fn p_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn p_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }

    /// Proportion of target-trial rows, alpha-hat = n0 / n.
    pub fn alpha_hat(&self) -> f64 {
        let n0 = self.s.iter().filter(|&&s| s == 0).count();
        n0 as f64 / self.n_rows() as f64
    }

    pub fn source_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.s[i] == 1).collect()
    }

    pub fn target_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.s[i] == 0).collect()
    }

    /// Transformed outcome (2A-1) Y / e(A | X) for source rows with an
    /// observed outcome.
    pub fn ytilde(&self, i: usize) -> Option<f64> {
        if self.s[i] != 1 || self.delta[i] != 1 {
            return None;
        }
        let a = self.a[i]?;
        let y = self.y[i]?;
        Some(crate::bridge::transformed_outcome(y, a, self.e1[i]))
    }

    /// Checks the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.s.len();
        for (name, len) in [
            ("a", self.a.len()),
            ("delta", self.delta.len()),
            ("y", self.y.len()),
            ("z_present", self.z_present.len()),
            ("e1", self.e1.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch(format!(
                    "column '{name}' has {len} rows, expected {n}"
                )));
            }
        }
        let n1 = self.s.iter().filter(|&&s| s == 1).count();
        if n1 == 0 {
            return Err(Error::SourceTrialEmpty);
        }
        if n1 == n {
            return Err(Error::TargetTrialEmpty);
        }
        self.validate_rows_only()
    }

    /// Subset of rows, order preserved. Skips re-validation: views may be
    /// single-trial.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut x = self.x.empty_like();
        let mut w = self.w.empty_like();
        let mut z = self.z.empty_like();
        for &i in rows {
            x.push_row(self.x.row(i));
            w.push_row(self.w.row(i));
            z.push_row(self.z.row(i));
        }
        Dataset {
            s: rows.iter().map(|&i| self.s[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            delta: rows.iter().map(|&i| self.delta[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x,
            w,
            z,
            z_present: rows.iter().map(|&i| self.z_present[i]).collect(),
            e1: rows.iter().map(|&i| self.e1[i]).collect(),
        }
    }
}

/// Result of [`split_by_trial`].
#[derive(Debug, Clone)]
pub struct TrialSplit {
    pub source: Dataset,
    pub target: Dataset,
    /// Set when one part came out empty (possible on pre-filtered views).
    pub empty_part: bool,
}

/// Partitions rows by trial indicator, preserving row order within each part.
pub fn split_by_trial(ds: &Dataset) -> TrialSplit {
    let src = ds.source_rows();
    let tgt = ds.target_rows();
    let empty_part = src.is_empty() || tgt.is_empty();
    TrialSplit {
        source: ds.subset(&src),
        target: ds.subset(&tgt),
        empty_part,
    }
}

/// Returns a copy where every `w` and `z` entry `v` is replaced by
/// `|v|^(1/2)`. Feeds deliberately wrong nuisance fits in the simulation
/// experiments; never applied to `x` or outcomes.
pub fn misspecify_proxies(ds: &Dataset) -> Dataset {
    let sqrt_abs = |v: f64| v.abs().sqrt();
    Dataset {
        s: ds.s.clone(),
        a: ds.a.clone(),
        delta: ds.delta.clone(),
        y: ds.y.clone(),
        x: ds.x.clone(),
        w: ds.w.map_values(sqrt_abs),
        z: ds.z.map_values(sqrt_abs),
        z_present: ds.z_present.clone(),
        e1: ds.e1.clone(),
    }
}

// ---------------------------------------------------------------------------
// Schema and CSV ingestion
// ---------------------------------------------------------------------------

/// Maps logical column roles to CSV column names.
///
/// Default schema uses names `s`, `a`, `delta`, `y` and the prefixes `x_`,
/// `w_`, `z_` for the covariate groups.
#[derive(Debug, Clone)]
pub struct Schema {
    pub s: String,
    pub a: String,
    pub delta: String,
    pub y: String,
    /// Explicit column lists; when empty, columns are collected by prefix.
    pub x: Vec<String>,
    pub w: Vec<String>,
    pub z: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            s: "s".into(),
            a: "a".into(),
            delta: "delta".into(),
            y: "y".into(),
            x: Vec::new(),
            w: Vec::new(),
            z: Vec::new(),
        }
    }
}

impl Schema {
    /// Parses a flat key-value schema file (`key = value` lines, `#` comments,
    /// comma-separated lists for the covariate groups).
    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let list = || -> Vec<String> {
                value
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect()
            };
            match key {
                "s" => schema.s = value.to_string(),
                "a" => schema.a = value.to_string(),
                "delta" => schema.delta = value.to_string(),
                "y" => schema.y = value.to_string(),
                "x" => schema.x = list(),
                "w" => schema.w = list(),
                "z" => schema.z = list(),
                other => return Err(Error::Schema(format!("unknown schema key '{other}'"))),
            }
        }
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_value(&std::fs::read_to_string(path)?)
    }
}

/// Options controlling CSV ingestion.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Known treated-arm propensity in the source trial. `None` falls back to
    /// the empirical arm proportion (with a warning).
    pub e1: Option<f64>,
    /// Drop rows with missing x/w cells (and source rows missing z) instead
    /// of erroring. Removal happens before alpha-hat is computed downstream.
    pub drop_incomplete: bool,
    /// Fixed trial indicator for single-trial files lacking an `s` column.
    pub implied_s: Option<u8>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            e1: None,
            drop_incomplete: false,
            implied_s: None,
        }
    }
}

/// A loaded dataset together with ingestion diagnostics.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub dropped_rows: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default)]
struct RawRow {
    s: u8,
    a: Option<i8>,
    delta: u8,
    y: Option<f64>,
    x: Vec<Option<CellValue>>,
    w: Vec<Option<f64>>,
    z: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
enum CellValue {
    Num(f64),
    Cat(String),
}

/// Loads and validates a two-trial CSV per the schema. Empty cells map to
/// absent optionals; `.` is the decimal separator; files are UTF-8.
pub fn load_dataset(path: &Path, schema: &Schema, opts: &LoadOptions) -> Result<Loaded> {
    let loaded = parse_csv(path, schema, opts)?;
    loaded.dataset.validate()?;
    Ok(loaded)
}

/// Parses and assembles without the two-trial nonempty requirement (used for
/// per-trial files that are concatenated afterwards).
fn parse_csv(path: &Path, schema: &Schema, opts: &LoadOptions) -> Result<Loaded> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let s_idx = find(&schema.s);
    if s_idx.is_none() && opts.implied_s.is_none() {
        return Err(Error::MissingColumn(schema.s.clone()));
    }
    let a_idx = find(&schema.a);
    let delta_idx = find(&schema.delta);
    let y_idx = find(&schema.y);

    let group_columns = |explicit: &[String], prefix: &str| -> Result<Vec<(usize, String)>> {
        if explicit.is_empty() {
            Ok(headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix))
                .map(|(i, h)| (i, h.clone()))
                .collect())
        } else {
            explicit
                .iter()
                .map(|name| {
                    find(name)
                        .map(|i| (i, name.clone()))
                        .ok_or_else(|| Error::MissingColumn(name.clone()))
                })
                .collect()
        }
    };
    let x_cols = group_columns(&schema.x, "x_")?;
    let w_cols = group_columns(&schema.w, "w_")?;
    let z_cols = if schema.z.is_empty() {
        group_columns(&[], "z_")?
    } else {
        // Target-trial files may legitimately lack the reweighting proxy.
        schema
            .z
            .iter()
            .filter_map(|name| find(name).map(|i| (i, name.clone())))
            .collect()
    };
    if x_cols.is_empty() {
        return Err(Error::MissingColumn("x_*".into()));
    }
    if w_cols.is_empty() {
        return Err(Error::MissingColumn("w_*".into()));
    }

    let parse_num = |cell: &str, column: &str, row: usize| -> Result<Option<f64>> {
        let t = cell.trim();
        if t.is_empty() {
            return Ok(None);
        }
        t.parse::<f64>().map(Some).map_err(|_| Error::NonNumeric {
            column: column.to_string(),
            row,
            value: t.to_string(),
        })
    };

    let mut rows: Vec<RawRow> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let mut raw = RawRow::default();

        raw.s = match s_idx {
            Some(i) => {
                let t = cell(i).trim();
                match t {
                    "0" => 0,
                    "1" => 1,
                    _ => {
                        return Err(Error::InvalidTrialIndicator {
                            row: row_idx,
                            value: t.to_string(),
                        })
                    }
                }
            }
            None => opts.implied_s.unwrap(),
        };
        raw.a = match a_idx {
            Some(i) => {
                let t = cell(i).trim();
                if t.is_empty() {
                    None
                } else {
                    match t.parse::<i8>() {
                        Ok(v @ (-1 | 0 | 1)) => Some(v),
                        _ => {
                            return Err(Error::InvalidTreatment {
                                row: row_idx,
                                value: t.to_string(),
                            })
                        }
                    }
                }
            }
            None => None,
        };
        raw.delta = match delta_idx {
            Some(i) => {
                let t = cell(i).trim();
                if t.is_empty() {
                    1
                } else {
                    match t {
                        "0" => 0,
                        "1" => 1,
                        _ => {
                            return Err(Error::NonNumeric {
                                column: schema.delta.clone(),
                                row: row_idx,
                                value: t.to_string(),
                            })
                        }
                    }
                }
            }
            None => 1,
        };
        raw.y = match y_idx {
            Some(i) => parse_num(cell(i), &schema.y, row_idx)?,
            None => None,
        };
        for (i, name) in &x_cols {
            let t = cell(*i).trim();
            raw.x.push(if t.is_empty() {
                None
            } else {
                match t.parse::<f64>() {
                    Ok(v) => Some(CellValue::Num(v)),
                    Err(_) => Some(CellValue::Cat(t.to_string())),
                }
            });
            let _ = name;
        }
        for (i, name) in &w_cols {
            raw.w.push(parse_num(cell(*i), name, row_idx)?);
        }
        for (i, name) in &z_cols {
            raw.z.push(parse_num(cell(*i), name, row_idx)?);
        }
        rows.push(raw);
    }

    assemble(rows, &x_cols, &w_cols, &z_cols, opts)
}

/// Loads separate source and target CSVs and concatenates them (source rows
/// first). Files may omit the `s` column; the target file may omit `z`.
pub fn load_two_trials(
    source: &Path,
    target: &Path,
    schema: &Schema,
    opts: &LoadOptions,
) -> Result<Loaded> {
    let src = load_single_trial(source, schema, opts, 1)?;
    let tgt = load_single_trial(target, schema, opts, 0)?;
    concat_loaded(src, tgt)
}

fn load_single_trial(path: &Path, schema: &Schema, opts: &LoadOptions, s: u8) -> Result<Loaded> {
    let mut o = opts.clone();
    o.implied_s = Some(s);
    let loaded = parse_csv(path, schema, &o)?;
    loaded.dataset.validate_rows_only()?;
    Ok(loaded)
}

fn concat_loaded(src: Loaded, tgt: Loaded) -> Result<Loaded> {
    let a = src.dataset;
    let b = tgt.dataset;
    if a.x.names != b.x.names || a.w.names != b.w.names {
        return Err(Error::Schema(
            "source and target files disagree on covariate columns".into(),
        ));
    }
    let n_a = a.n_rows();
    let n_b = b.n_rows();
    let p_z = a.z.ncols().max(b.z.ncols());
    let mut z = Block {
        names: if a.z.ncols() >= b.z.ncols() {
            a.z.names.clone()
        } else {
            b.z.names.clone()
        },
        indicator: vec![false; p_z],
        data: Vec::with_capacity((n_a + n_b) * p_z),
        ncols: p_z,
    };
    let mut z_present = Vec::with_capacity(n_a + n_b);
    let mut push_z = |ds: &Dataset, i: usize| {
        if ds.z.ncols() == p_z && ds.z_present[i] {
            z.data.extend_from_slice(ds.z.row(i));
            z_present.push(true);
        } else {
            z.data.extend(std::iter::repeat(0.0).take(p_z));
            z_present.push(false);
        }
    };
    for i in 0..n_a {
        push_z(&a, i);
    }
    for i in 0..n_b {
        push_z(&b, i);
    }

    let mut x = a.x.clone();
    x.data.extend_from_slice(&b.x.data);
    let mut w = a.w.clone();
    w.data.extend_from_slice(&b.w.data);

    let dataset = Dataset::from_parts(
        a.s.iter().chain(b.s.iter()).copied().collect(),
        a.a.iter().chain(b.a.iter()).copied().collect(),
        a.delta.iter().chain(b.delta.iter()).copied().collect(),
        a.y.iter().chain(b.y.iter()).copied().collect(),
        x,
        w,
        z,
        z_present,
        a.e1.iter().chain(b.e1.iter()).copied().collect(),
    )?;
    Ok(Loaded {
        dataset,
        dropped_rows: src.dropped_rows + tgt.dropped_rows,
        warnings: src.warnings.into_iter().chain(tgt.warnings).collect(),
    })
}

fn assemble(
    rows: Vec<RawRow>,
    x_cols: &[(usize, String)],
    w_cols: &[(usize, String)],
    z_cols: &[(usize, String)],
    opts: &LoadOptions,
) -> Result<Loaded> {
    let mut warnings = Vec::new();

    // Decide per x column: numeric (all parseable) or categorical.
    let p_x_raw = x_cols.len();
    let mut is_cat = vec![false; p_x_raw];
    for row in &rows {
        for j in 0..p_x_raw {
            if matches!(row.x[j], Some(CellValue::Cat(_))) {
                is_cat[j] = true;
            }
        }
    }
    // Categorical levels, sorted; first level dropped (reference coding).
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); p_x_raw];
    for (j, lv) in levels.iter_mut().enumerate() {
        if !is_cat[j] {
            continue;
        }
        let mut set: Vec<String> = Vec::new();
        for row in &rows {
            if let Some(CellValue::Cat(c)) = &row.x[j] {
                if !set.contains(c) {
                    set.push(c.clone());
                }
            } else if let Some(CellValue::Num(v)) = &row.x[j] {
                let c = format!("{v}");
                if !set.contains(&c) {
                    set.push(c);
                }
            }
        }
        set.sort();
        *lv = set;
    }

    // Keep or drop incomplete rows.
    let mut kept: Vec<&RawRow> = Vec::with_capacity(rows.len());
    let mut dropped = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let missing_x = row.x.iter().any(|c| c.is_none());
        let missing_w = row.w.iter().any(|c| c.is_none());
        let missing_z_src = row.s == 1 && (z_cols.is_empty() || row.z.iter().any(|c| c.is_none()));
        if missing_x || missing_w || missing_z_src {
            if opts.drop_incomplete {
                dropped += 1;
                continue;
            }
            if missing_z_src {
                return Err(Error::ZRequiredInSource { row: i });
            }
            let col = if missing_x { "x" } else { "w" };
            return Err(Error::RequiredInSource(
                if col == "x" { "x" } else { "w" },
                i,
            ));
        }
        kept.push(row);
    }
    if dropped > 0 {
        warnings.push(format!("dropped {dropped} rows with incomplete x/w/z"));
    }

    // Expanded x column names.
    let mut x_names = Vec::new();
    let mut x_indicator = Vec::new();
    for (j, (_, name)) in x_cols.iter().enumerate() {
        if is_cat[j] {
            for level in levels[j].iter().skip(1) {
                x_names.push(format!("{name}={level}"));
                x_indicator.push(true);
            }
        } else {
            x_names.push(name.clone());
            x_indicator.push(false);
        }
    }

    let n = kept.len();
    let p_x = x_names.len();
    let mut x_data = Vec::with_capacity(n * p_x);
    for row in &kept {
        for j in 0..p_x_raw {
            match (&row.x[j], is_cat[j]) {
                (Some(CellValue::Num(v)), false) => x_data.push(*v),
                (Some(cell), true) => {
                    let value = match cell {
                        CellValue::Cat(c) => c.clone(),
                        CellValue::Num(v) => format!("{v}"),
                    };
                    for level in levels[j].iter().skip(1) {
                        x_data.push(if *level == value { 1.0 } else { 0.0 });
                    }
                }
                _ => unreachable!("missing x cells filtered above"),
            }
        }
    }

    let w_data: Vec<f64> = kept
        .iter()
        .flat_map(|r| r.w.iter().map(|c| c.unwrap()))
        .collect();
    let p_z = z_cols.len();
    let mut z_data = Vec::with_capacity(n * p_z);
    let mut z_present = Vec::with_capacity(n);
    for row in &kept {
        let complete = p_z > 0 && row.z.iter().all(|c| c.is_some());
        z_present.push(complete);
        for j in 0..p_z {
            z_data.push(row.z[j].unwrap_or(0.0));
        }
    }

    // Treated-arm propensity: supplied constant, or empirical fallback.
    let e1 = match opts.e1 {
        Some(v) => {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidPropensity(v));
            }
            v
        }
        None => {
            let src: Vec<&&RawRow> = kept.iter().filter(|r| r.s == 1).collect();
            if src.is_empty() {
                // Target-only file: e1 is never read for s = 0 rows.
                0.5
            } else {
                let treated = src.iter().filter(|r| r.a == Some(1)).count();
                let v = (treated as f64 / src.len() as f64).clamp(1e-6, 1.0 - 1e-6);
                warnings.push(format!(
                    "e1 not supplied; falling back to empirical arm proportion {v:.6}"
                ));
                v
            }
        }
    };

    let mut x_block = Block::new(x_names, x_data);
    x_block.indicator = x_indicator;
    let dataset = Dataset::from_parts_unchecked(
        kept.iter().map(|r| r.s).collect(),
        kept.iter().map(|r| r.a).collect(),
        kept.iter().map(|r| r.delta).collect(),
        kept.iter().map(|r| r.y).collect(),
        x_block,
        Block::new(w_cols.iter().map(|(_, n)| n.clone()).collect(), w_data),
        Block::new(z_cols.iter().map(|(_, n)| n.clone()).collect(), z_data),
        z_present,
        vec![e1; n],
    );
    dataset.validate_rows_only()?;
    Ok(Loaded {
        dataset,
        dropped_rows: dropped,
        warnings,
    })
}

/// Writes the dataset back to CSV with the stored column names. Numeric
/// formatting round-trips exactly.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let mut header: Vec<String> = vec!["s".into(), "a".into(), "delta".into(), "y".into()];
    header.extend(ds.x.names.iter().cloned());
    header.extend(ds.w.names.iter().cloned());
    header.extend(ds.z.names.iter().cloned());
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.n_rows() {
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        cells.push(ds.s[i].to_string());
        cells.push(ds.a[i].map(|v| v.to_string()).unwrap_or_default());
        cells.push(ds.delta[i].to_string());
        cells.push(ds.y[i].map(|v| format!("{v}")).unwrap_or_default());
        for v in ds.x.row(i) {
            cells.push(format!("{v}"));
        }
        for v in ds.w.row(i) {
            cells.push(format!("{v}"));
        }
        if ds.z_present[i] {
            for v in ds.z.row(i) {
                cells.push(format!("{v}"));
            }
        } else {
            for _ in 0..ds.z.ncols() {
                cells.push(String::new());
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

impl Dataset {
    /// Row-level validation without the two-trial nonempty requirement.
    fn validate_rows_only(&self) -> Result<()> {
        for i in 0..self.n_rows() {
            if self.s[i] == 1 {
                match self.a[i] {
                    Some(0) | Some(1) => {}
                    Some(v) => {
                        return Err(Error::InvalidTreatment {
                            row: i,
                            value: v.to_string(),
                        })
                    }
                    None => return Err(Error::RequiredInSource("a", i)),
                }
                if !self.z_present[i] {
                    return Err(Error::ZRequiredInSource { row: i });
                }
                if self.delta[i] == 1 && self.y[i].is_none() {
                    return Err(Error::RequiredInSource("y", i));
                }
                if !(self.e1[i] > 0.0 && self.e1[i] < 1.0) {
                    return Err(Error::InvalidPropensity(self.e1[i]));
                }
            } else if self.a[i].is_some() && self.delta[i] == 1 && self.y[i].is_none() {
                // A treated target row claiming an observed outcome must carry one.
                return Err(Error::RequiredInSource("y", i));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Basis construction
// ---------------------------------------------------------------------------

/// Which proxy block enters a basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proxy {
    Z,
    W,
}

/// Basis/design expansions used by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisKind {
    /// `(1, Z, X)`
    LinearZb,
    /// `(1, W, X)`
    LinearWc,
    /// Elementwise cube of `LinearWc`.
    CubedWc,
    /// `(1, proxy, X~)` where numeric x columns are expanded to an
    /// orthogonal quadratic basis fitted on the sample; indicator columns
    /// pass through unchanged.
    OrthoQuad(Proxy),
    /// Plain passthrough of the x block, no intercept.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
}

impl BasisSpec {
    pub fn new(kind: BasisKind) -> Self {
        Self { kind }
    }

    pub fn linear_zb() -> Self {
        Self::new(BasisKind::LinearZb)
    }

    pub fn linear_wc() -> Self {
        Self::new(BasisKind::LinearWc)
    }

    pub fn cubed_wc() -> Self {
        Self::new(BasisKind::CubedWc)
    }

    pub fn ortho_quad(proxy: Proxy) -> Self {
        Self::new(BasisKind::OrthoQuad(proxy))
    }
}

/// Orthogonal quadratic expansion of the numeric x columns.
///
/// Each numeric column contributes `{x, x^2}`, sequentially orthogonalized
/// against the intercept and all previously produced columns on the fitting
/// sample (modified Gram-Schmidt with recorded coefficients, so the transform
/// applies out of sample). Columns whose residual is numerically zero are
/// dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoQuadTransform {
    /// (source numeric-x column, power) pairs for kept outputs, in order.
    terms: Vec<(usize, u32)>,
    /// Mean subtracted from each raw term.
    means: Vec<f64>,
    /// Lower-triangular projection coefficients onto previous outputs.
    coefs: Vec<Vec<f64>>,
}

impl OrthoQuadTransform {
    fn fit(ds: &Dataset, rows: &[usize]) -> Self {
        let numeric: Vec<usize> = (0..ds.p_x()).filter(|&j| !ds.x.is_indicator(j)).collect();
        let n = rows.len();
        let mut terms = Vec::new();
        let mut means = Vec::new();
        let mut coefs: Vec<Vec<f64>> = Vec::new();
        let mut built: Vec<Vec<f64>> = Vec::new();

        for &j in &numeric {
            for power in [1u32, 2u32] {
                let raw: Vec<f64> = rows
                    .iter()
                    .map(|&i| ds.x_row(i)[j].powi(power as i32))
                    .collect();
                let mean = raw.iter().sum::<f64>() / n.max(1) as f64;
                let mut v: Vec<f64> = raw.iter().map(|r| r - mean).collect();
                let mut cs = Vec::with_capacity(built.len());
                for t in &built {
                    let denom: f64 = t.iter().map(|a| a * a).sum();
                    let c = if denom > 0.0 {
                        v.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / denom
                    } else {
                        0.0
                    };
                    for (a, b) in v.iter_mut().zip(t) {
                        *a -= c * b;
                    }
                    cs.push(c);
                }
                let norm2: f64 = v.iter().map(|a| a * a).sum();
                let scale: f64 = raw.iter().map(|a| a * a).sum::<f64>().max(1.0);
                if norm2 <= scale * 1e-20 {
                    continue; // degenerate term (e.g. x^2 == x for binary x)
                }
                terms.push((j, power));
                means.push(mean);
                coefs.push(cs);
                built.push(v);
            }
        }
        Self {
            terms,
            means,
            coefs,
        }
    }

    fn n_out(&self) -> usize {
        self.terms.len()
    }

    fn apply(&self, x_row: &[f64], out: &mut Vec<f64>) {
        let start = out.len();
        for (k, &(j, power)) in self.terms.iter().enumerate() {
            let mut v = x_row[j].powi(power as i32) - self.means[k];
            for (t, c) in self.coefs[k].iter().enumerate() {
                v -= c * out[start + t];
            }
            out.push(v);
        }
    }
}

/// A basis whose sample-level coefficients (ortho_quad only) are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedBasis {
    kind: BasisKind,
    ortho: Option<OrthoQuadTransform>,
    indicator_cols: Vec<usize>,
    ncols: usize,
    p_x: usize,
    p_w: usize,
    p_z: usize,
}

impl FittedBasis {
    /// Fits the basis on `rows` of `ds` (a no-op for row-local kinds).
    pub fn fit(ds: &Dataset, spec: &BasisSpec, rows: &[usize]) -> Result<Self> {
        let (ortho, indicator_cols) = match &spec.kind {
            BasisKind::OrthoQuad(_) => {
                let t = OrthoQuadTransform::fit(ds, rows);
                let ind: Vec<usize> = (0..ds.p_x()).filter(|&j| ds.x.is_indicator(j)).collect();
                (Some(t), ind)
            }
            _ => (None, Vec::new()),
        };
        let ncols = match &spec.kind {
            BasisKind::LinearZb => 1 + ds.p_z() + ds.p_x(),
            BasisKind::LinearWc | BasisKind::CubedWc => 1 + ds.p_w() + ds.p_x(),
            BasisKind::OrthoQuad(proxy) => {
                let p = match proxy {
                    Proxy::Z => ds.p_z(),
                    Proxy::W => ds.p_w(),
                };
                1 + p + ortho.as_ref().unwrap().n_out() + indicator_cols.len()
            }
            BasisKind::Raw => ds.p_x(),
        };
        Ok(Self {
            kind: spec.kind.clone(),
            ortho,
            indicator_cols,
            ncols,
            p_x: ds.p_x(),
            p_w: ds.p_w(),
            p_z: ds.p_z(),
        })
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Evaluates the basis at row `i`.
    pub fn eval_row(&self, ds: &Dataset, i: usize, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        match &self.kind {
            BasisKind::LinearZb => {
                let z = ds.z_row(i).ok_or(Error::ZMissingForBasis { row: i })?;
                out.push(1.0);
                out.extend_from_slice(z);
                out.extend_from_slice(ds.x_row(i));
            }
            BasisKind::LinearWc => {
                out.push(1.0);
                out.extend_from_slice(ds.w_row(i));
                out.extend_from_slice(ds.x_row(i));
            }
            BasisKind::CubedWc => {
                out.push(1.0);
                out.extend_from_slice(ds.w_row(i));
                out.extend_from_slice(ds.x_row(i));
                for v in out.iter_mut() {
                    *v = *v * *v * *v;
                }
            }
            BasisKind::OrthoQuad(proxy) => {
                out.push(1.0);
                match proxy {
                    Proxy::Z => {
                        let z = ds.z_row(i).ok_or(Error::ZMissingForBasis { row: i })?;
                        out.extend_from_slice(z);
                    }
                    Proxy::W => out.extend_from_slice(ds.w_row(i)),
                }
                self.ortho.as_ref().unwrap().apply(ds.x_row(i), out);
                for &j in &self.indicator_cols {
                    out.push(ds.x_row(i)[j]);
                }
            }
            BasisKind::Raw => {
                out.extend_from_slice(ds.x_row(i));
            }
        }
        debug_assert_eq!(out.len(), self.ncols);
        Ok(())
    }

    /// Evaluates the basis over `rows`, returning an `rows.len() x k` matrix.
    pub fn eval_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows.len(), self.ncols);
        let mut buf = Vec::with_capacity(self.ncols);
        for (r, &i) in rows.iter().enumerate() {
            self.eval_row(ds, i, &mut buf)?;
            for (c, v) in buf.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        Ok(m)
    }
}

/// Fits `spec` on all rows and returns the full design matrix together with
/// the fitted basis (reusable out of sample for `ortho_quad`).
pub fn build_basis(ds: &Dataset, spec: &BasisSpec) -> Result<(DMatrix<f64>, FittedBasis)> {
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let fitted = FittedBasis::fit(ds, spec, &rows)?;
    let m = fitted.eval_rows(ds, &rows)?;
    Ok((m, fitted))
}

/// Serializes a key-value map as flat `key = value` lines (deterministic
/// order). Shared format for schema files and experiment-config dumps.
pub fn to_key_value(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn default_opts() -> LoadOptions {
        LoadOptions {
            e1: Some(0.5),
            ..Default::default()
        }
    }

    fn ten_row_csv() -> String {
        let mut s = String::from("s,a,delta,y,x_1,x_2,x_3,w_1,w_2,w_3,z_1,z_2,z_3\n");
        for i in 0..10 {
            let src = i < 6;
            let row = if src {
                format!(
                    "1,{},1,{},0.{i},0.2,0.3,0.1,0.2,0.3,0.4,0.5,0.6\n",
                    i % 2,
                    1.5 + i as f64
                )
            } else {
                format!("0,,1,,0.{i},0.2,0.3,0.1,0.2,0.3,,,\n")
            };
            s.push_str(&row);
        }
        s
    }

    #[test]
    fn loads_ten_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_csv(&dir, "d.csv", &ten_row_csv());
        let loaded = load_dataset(&p, &Schema::default(), &default_opts()).unwrap();
        assert_eq!(loaded.dataset.n_rows(), 10);
        assert_eq!(loaded.dataset.p_x(), 3);
        assert_eq!(loaded.dataset.p_z(), 3);
    }

    #[test]
    fn empty_z_in_source_errors() {
        let dir = tempfile::tempdir().unwrap();
        let body = "s,a,delta,y,x_1,w_1,z_1\n1,1,1,2.0,0.5,0.1,\n0,,1,,0.5,0.1,\n";
        let p = toy_csv(&dir, "d.csv", body);
        let err = load_dataset(&p, &Schema::default(), &default_opts()).unwrap_err();
        assert!(matches!(err, Error::ZRequiredInSource { .. }), "{err}");
    }

    #[test]
    fn empty_target_trial_errors() {
        let dir = tempfile::tempdir().unwrap();
        let body = "s,a,delta,y,x_1,w_1,z_1\n1,1,1,2.0,0.5,0.1,0.2\n1,0,1,1.0,0.4,0.2,0.3\n";
        let p = toy_csv(&dir, "d.csv", body);
        let err = load_dataset(&p, &Schema::default(), &default_opts()).unwrap_err();
        assert!(matches!(err, Error::TargetTrialEmpty), "{err}");
    }

    #[test]
    fn split_sizes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_csv(&dir, "d.csv", &ten_row_csv());
        let ds = load_dataset(&p, &Schema::default(), &default_opts())
            .unwrap()
            .dataset;
        let split = split_by_trial(&ds);
        assert_eq!(split.source.n_rows(), 6);
        assert_eq!(split.target.n_rows(), 4);
        assert!(!split.empty_part);
        // Split of a single-trial view flags the empty part.
        let again = split_by_trial(&split.source);
        assert_eq!(again.source.n_rows(), 6);
        assert_eq!(again.target.n_rows(), 0);
        assert!(again.empty_part);
        // Concatenating parts in s-order recovers a permutation of the rows.
        let mut seen: Vec<f64> = Vec::new();
        for i in 0..split.source.n_rows() {
            seen.push(split.source.x_row(i)[0]);
        }
        for i in 0..split.target.n_rows() {
            seen.push(split.target.x_row(i)[0]);
        }
        let mut orig: Vec<f64> = (0..ds.n_rows()).map(|i| ds.x_row(i)[0]).collect();
        seen.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);
    }

    #[test]
    fn misspecify_sqrt_abs() {
        let dir = tempfile::tempdir().unwrap();
        let body = "s,a,delta,y,x_1,w_1,z_1\n1,1,1,2.0,0.5,4.0,-0.25\n0,,1,,0.5,0.0,\n";
        let p = toy_csv(&dir, "d.csv", body);
        let ds = load_dataset(&p, &Schema::default(), &default_opts())
            .unwrap()
            .dataset;
        let m = misspecify_proxies(&ds);
        assert_eq!(m.w_row(0)[0], 2.0);
        assert_eq!(m.z_row(0).unwrap()[0], 0.5);
        assert_eq!(m.w_row(1)[0], 0.0);
    }

    #[test]
    fn write_back_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = toy_csv(&dir, "d.csv", &ten_row_csv());
        let ds = load_dataset(&p, &Schema::default(), &default_opts())
            .unwrap()
            .dataset;
        let q = dir.path().join("out.csv");
        write_csv(&ds, &q).unwrap();
        let schema = Schema {
            x: ds.x_block().names().to_vec(),
            w: ds.w_block().names().to_vec(),
            z: ds.z_block().names().to_vec(),
            ..Schema::default()
        };
        let ds2 = load_dataset(&q, &schema, &default_opts()).unwrap().dataset;
        assert_eq!(ds.n_rows(), ds2.n_rows());
        for i in 0..ds.n_rows() {
            assert_eq!(ds.x_row(i), ds2.x_row(i));
            assert_eq!(ds.w_row(i), ds2.w_row(i));
            assert_eq!(ds.z_row(i), ds2.z_row(i));
            assert_eq!(ds.y(i), ds2.y(i));
        }
    }

    fn basis_fixture() -> Dataset {
        // Two rows, source then target, with hand-picked proxy values.
        Dataset::from_parts(
            vec![1, 0],
            vec![Some(1), None],
            vec![1, 1],
            vec![Some(2.0), None],
            Block::new(
                vec!["x_1".into(), "x_2".into(), "x_3".into()],
                vec![0.2, 0.4, 0.6, 0.0, 0.0, 0.0],
            ),
            Block::new(
                vec!["w_1".into(), "w_2".into(), "w_3".into()],
                vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ),
            Block::new(
                vec!["z_1".into(), "z_2".into(), "z_3".into()],
                vec![1.0, -1.0, 0.5, 0.0, 0.0, 0.0],
            ),
            vec![true, false],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn basis_shapes_and_values() {
        let ds = basis_fixture();
        let f = FittedBasis::fit(&ds, &BasisSpec::linear_wc(), &[0, 1]).unwrap();
        let mut buf = Vec::new();
        f.eval_row(&ds, 1, &mut buf).unwrap();
        assert_eq!(buf, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let f = FittedBasis::fit(&ds, &BasisSpec::cubed_wc(), &[0, 1]).unwrap();
        f.eval_row(&ds, 0, &mut buf).unwrap();
        assert_eq!(buf[0], 1.0);
        assert_eq!(buf[1], 8.0);
        assert_eq!(&buf[2..4], &[0.0, 0.0]);

        let f = FittedBasis::fit(&ds, &BasisSpec::linear_zb(), &[0, 1]).unwrap();
        f.eval_row(&ds, 0, &mut buf).unwrap();
        assert_eq!(buf, vec![1.0, 1.0, -1.0, 0.5, 0.2, 0.4, 0.6]);
    }

    #[test]
    fn linear_zb_needs_z() {
        let ds = basis_fixture();
        let f = FittedBasis::fit(&ds, &BasisSpec::linear_zb(), &[0, 1]).unwrap();
        let mut buf = Vec::new();
        let err = f.eval_row(&ds, 1, &mut buf).unwrap_err();
        assert!(matches!(err, Error::ZMissingForBasis { row: 1 }));
    }

    #[test]
    fn ortho_quad_gram_is_diagonal() {
        // A sample with plenty of distinct values per column.
        let n = 64usize;
        let mut x = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64;
            x.extend_from_slice(&[t, (2.3 * t + 0.1).sin(), t * t + 0.05 * (7.0 * t).cos()]);
        }
        let ds = Dataset::from_parts(
            (0..n).map(|i| u8::from(i % 2 == 0)).collect(),
            (0..n).map(|i| (i % 2 == 0).then_some(1)).collect(),
            vec![1; n],
            (0..n).map(|i| (i % 2 == 0).then_some(1.0)).collect(),
            Block::new(vec!["x_1".into(), "x_2".into(), "x_3".into()], x),
            Block::new(vec!["w_1".into()], vec![0.5; n]),
            Block::new(vec!["z_1".into()], vec![0.5; n]),
            vec![true; n],
            vec![0.5; n],
        )
        .unwrap();
        let (m, fitted) = build_basis(&ds, &BasisSpec::ortho_quad(Proxy::W)).unwrap();
        // Gram over the intercept + orthogonalized x columns (skip the raw w
        // column at index 1, which is not orthogonalized).
        let cols: Vec<usize> = std::iter::once(0).chain(2..fitted.ncols()).collect();
        for (ai, &ci) in cols.iter().enumerate() {
            for &cj in cols.iter().skip(ai + 1) {
                let dot: f64 = (0..n).map(|r| m[(r, ci)] * m[(r, cj)]).sum();
                let dii: f64 = (0..n).map(|r| m[(r, ci)] * m[(r, ci)]).sum();
                let djj: f64 = (0..n).map(|r| m[(r, cj)] * m[(r, cj)]).sum();
                assert!(
                    dot.abs() < 1e-8 * dii.max(djj),
                    "off-diagonal {ci},{cj}: {dot:.3e}"
                );
            }
        }
        // Out-of-sample reuse is deterministic.
        let m2 = fitted.eval_rows(&ds, &[3, 5]).unwrap();
        let mut buf = Vec::new();
        fitted.eval_row(&ds, 3, &mut buf).unwrap();
        for c in 0..fitted.ncols() {
            assert_eq!(m2[(0, c)], buf[c]);
        }
    }

    #[test]
    fn categorical_x_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let body = "s,a,delta,y,x_num,x_site,w_1,z_1\n\
                    1,1,1,2.0,0.5,beta,0.1,0.2\n\
                    1,0,1,1.0,0.4,alpha,0.2,0.3\n\
                    0,,1,,0.3,gamma,0.3,\n";
        let p = toy_csv(&dir, "d.csv", body);
        let schema = Schema {
            x: vec!["x_num".into(), "x_site".into()],
            w: vec!["w_1".into()],
            z: vec!["z_1".into()],
            ..Schema::default()
        };
        let ds = load_dataset(&p, &schema, &default_opts()).unwrap().dataset;
        // alpha dropped as reference; beta and gamma become indicators.
        assert_eq!(ds.p_x(), 3);
        assert_eq!(ds.x_block().names()[1], "x_site=beta");
        assert_eq!(ds.x_row(0)[1], 1.0);
        assert_eq!(ds.x_row(0)[2], 0.0);
        assert_eq!(ds.x_row(2)[2], 1.0);
        assert!(ds.x_block().is_indicator(1));
    }

    #[test]
    fn schema_key_value_round_trip() {
        let text = "s = trial\na = treat\ny = weight\nx = bw, age\nw = hba1c\nz = ldl, hdl\n";
        let schema = Schema::from_key_value(text).unwrap();
        assert_eq!(schema.s, "trial");
        assert_eq!(schema.x, vec!["bw".to_string(), "age".to_string()]);
        assert_eq!(schema.z.len(), 2);
    }
}
