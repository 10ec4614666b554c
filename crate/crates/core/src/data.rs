//! Schemas, column-major datasets, CSV I/O and splitting.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discrete::{build_codec, CategoryCodec, CodecKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Ordinal,
    Categorical,
}

impl ColumnKind {
    pub fn is_discrete(self) -> bool {
        self != ColumnKind::Continuous
    }

    pub fn codec_kind(self) -> Option<CodecKind> {
        match self {
            ColumnKind::Continuous => None,
            ColumnKind::Ordinal => Some(CodecKind::Ordinal),
            ColumnKind::Categorical => Some(CodecKind::Categorical),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Ordinal => "ordinal",
            ColumnKind::Categorical => "categorical",
        }
    }
}

impl std::str::FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(ColumnKind::Continuous),
            "ordinal" => Ok(ColumnKind::Ordinal),
            "categorical" => Ok(ColumnKind::Categorical),
            other => Err(Error::Data(format!("unknown column kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Explicit support for continuous columns.
    pub bounds: Option<(f64, f64)>,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ColumnSpec>", into = "Vec<ColumnSpec>")]
pub struct Schema {
    columns: Vec<ColumnSpec>,
}

impl TryFrom<Vec<ColumnSpec>> for Schema {
    type Error = Error;

    fn try_from(columns: Vec<ColumnSpec>) -> Result<Self> {
        Schema::new(columns)
    }
}

impl From<Schema> for Vec<ColumnSpec> {
    fn from(s: Schema) -> Self {
        s.columns
    }
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Data("schema declares no columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() {
                return Err(Error::Data("schema column with empty name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Data(format!("duplicate column `{}` in schema", c.name)));
            }
            if let Some((lo, hi)) = c.bounds {
                if c.kind != ColumnKind::Continuous {
                    return Err(Error::Data(format!("bounds on discrete column `{}`", c.name)));
                }
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Data(format!("invalid bounds ({lo}, {hi}) on `{}`", c.name)));
                }
            }
        }
        Ok(Self { columns })
    }

    /// Parses `name,kind[,lower,upper]` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |msg: &str| Error::Data(format!("schema line {}: {msg}", i + 1));
            let mut spec = match fields.as_slice() {
                [name, kind] | [name, kind, _, _] => ColumnSpec::new(*name, kind.parse()?),
                _ => return Err(bad("expected `name,kind` or `name,kind,lower,upper`")),
            };
            if let [_, _, lo, hi] = fields.as_slice() {
                let lo: f64 = lo.parse().map_err(|_| bad("lower bound is not a number"))?;
                let hi: f64 = hi.parse().map_err(|_| bad("upper bound is not a number"))?;
                spec.bounds = Some((lo, hi));
            }
            columns.push(spec);
        }
        Self::new(columns)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            out.push_str(&c.name);
            out.push(',');
            out.push_str(c.kind.as_str());
            if let Some((lo, hi)) = c.bounds {
                out.push_str(&format!(",{lo},{hi}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Continuous(Vec<f64>),
    Discrete { codes: Vec<usize>, codec: CategoryCodec },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Continuous(v) => v.len(),
            Column::Discrete { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codec(&self) -> Option<&CategoryCodec> {
        match self {
            Column::Continuous(_) => None,
            Column::Discrete { codec, .. } => Some(codec),
        }
    }

    pub fn cell(&self, row: usize) -> Cell {
        match self {
            Column::Continuous(v) => Cell::Real(v[row]),
            Column::Discrete { codes, .. } => Cell::Code(codes[row]),
        }
    }

    /// Numeric view: reals as is, ordinal codes as their label value and
    /// categorical codes as the code itself.
    pub fn numeric(&self) -> Vec<f64> {
        match self {
            Column::Continuous(v) => v.clone(),
            Column::Discrete { codes, codec } => {
                let ordinal = codec.kind() == CodecKind::Ordinal;
                codes
                    .iter()
                    .map(|&k| {
                        if ordinal {
                            codec.classes()[k].parse().unwrap_or(k as f64)
                        } else {
                            k as f64
                        }
                    })
                    .collect()
            }
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Continuous(v) => Column::Continuous(rows.iter().map(|&r| v[r]).collect()),
            Column::Discrete { codes, codec } => Column::Discrete {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                codec: codec.clone(),
            },
        }
    }
}

/// One cell of a row: a real value or a class code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Real(f64),
    Code(usize),
}

/// Column-major table conforming to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Dataset {
    pub fn new(schema: Schema, columns: Vec<Column>) -> Result<Self> {
        if columns.len() != schema.len() {
            return Err(Error::Data(format!(
                "{} columns for a schema of {}",
                columns.len(),
                schema.len()
            )));
        }
        let n_rows = columns.first().map_or(0, Column::len);
        for (spec, col) in schema.columns().iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(Error::Data(format!(
                    "column `{}` has {} rows, expected {n_rows}",
                    spec.name,
                    col.len()
                )));
            }
            match (spec.kind.codec_kind(), col) {
                (None, Column::Continuous(_)) => {}
                (Some(kind), Column::Discrete { codes, codec }) if codec.kind() == kind => {
                    if let Some(&c) = codes.iter().find(|&&c| c >= codec.n_classes()) {
                        return Err(Error::Data(format!("code {c} out of range in `{}`", spec.name)));
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "column `{}` does not match its declared kind",
                        spec.name
                    )))
                }
            }
        }
        Ok(Self {
            schema,
            columns,
            n_rows,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.columns[i]
    }

    pub fn column_by_name(&self, name: &str) -> Result<&Column> {
        self.schema
            .index_of(name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| Error::Data(format!("unknown column `{name}`")))
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<Cell> {
        self.columns.iter().map(|c| c.cell(i)).collect()
    }

    pub fn codecs(&self) -> Vec<Option<CategoryCodec>> {
        self.columns.iter().map(|c| c.codec().cloned()).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_rows: rows.len(),
        }
    }
}

fn cell_error(row: usize, column: &str, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("row {row}, column `{column}`: {msg}"))
}

/// Reads CSV text. Discrete columns use the given codecs where present and
/// build new ones from the data otherwise. Rows are numbered from 1 after the header.
pub fn read_csv<R: Read>(reader: R, schema: &Schema, codecs: &[Option<CategoryCodec>]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Data("empty file: no header row".into()));
    }
    let mut position = Vec::with_capacity(schema.len());
    for name in schema.names() {
        let idx = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}` in CSV header")))?;
        position.push(idx);
    }
    if let Some(extra) = headers.iter().find(|h| schema.index_of(h.trim()).is_none()) {
        return Err(Error::Data(format!("CSV column `{extra}` is not in the schema")));
    }

    let mut reals: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    let mut labels: Vec<Vec<String>> = vec![Vec::new(); schema.len()];
    let mut n_rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        n_rows += 1;
        let row = r + 1;
        for (c, spec) in schema.columns().iter().enumerate() {
            let raw = record.get(position[c]).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(cell_error(row, &spec.name, "missing value"));
            }
            match spec.kind {
                ColumnKind::Continuous => {
                    let v: f64 = raw
                        .parse()
                        .map_err(|_| cell_error(row, &spec.name, format!("`{raw}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(cell_error(row, &spec.name, format!("`{raw}` is not finite")));
                    }
                    reals[c].push(v);
                }
                ColumnKind::Ordinal => {
                    raw.parse::<i64>()
                        .map_err(|_| cell_error(row, &spec.name, format!("`{raw}` is not an integer")))?;
                    labels[c].push(raw.to_string());
                }
                ColumnKind::Categorical => labels[c].push(raw.to_string()),
            }
        }
    }
    if n_rows == 0 {
        return Err(Error::Data("CSV contains no data rows".into()));
    }

    let mut columns = Vec::with_capacity(schema.len());
    for (c, spec) in schema.columns().iter().enumerate() {
        let column = match spec.kind.codec_kind() {
            None => Column::Continuous(std::mem::take(&mut reals[c])),
            Some(kind) => {
                let codec = match codecs.get(c).and_then(Option::as_ref) {
                    Some(codec) => codec.clone(),
                    None => build_codec(&labels[c], kind).map_err(|e| e.in_column(&spec.name))?,
                };
                let codes = labels[c]
                    .iter()
                    .enumerate()
                    .map(|(r, l)| codec.encode(l).map_err(|e| cell_error(r + 1, &spec.name, e)))
                    .collect::<Result<Vec<_>>>()?;
                Column::Discrete { codes, codec }
            }
        };
        columns.push(column);
    }
    Dataset::new(schema.clone(), columns)
}

/// Loads a CSV, building codecs for discrete columns from the data.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    load_csv_with_codecs(path, schema, &[])
}

/// Loads a CSV whose discrete labels are encoded with known codecs.
pub fn load_csv_with_codecs(
    path: impl AsRef<Path>,
    schema: &Schema,
    codecs: &[Option<CategoryCodec>],
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), schema, codecs)
}

/// Writes the dataset as CSV. Reals use the shortest representation that
/// parses back to the same bits; discrete columns are decoded to labels.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(dataset.schema.names())?;
    let mut record: Vec<String> = vec![String::new(); dataset.n_cols()];
    for r in 0..dataset.n_rows {
        for (c, col) in dataset.columns.iter().enumerate() {
            record[c] = match col {
                Column::Continuous(v) => format!("{:?}", v[r]),
                Column::Discrete { codes, codec } => codec.decode(codes[r])?.to_string(),
            };
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(dataset, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

/// Header-only CSV for a schema.
pub fn save_empty_csv(schema: &Schema, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(schema.names())?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    write_atomic(path.as_ref(), &buf)
}

/// Writes a whole file through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Seeded split into train, validation and test parts of the given fractions.
/// Part sizes are rounded; rows beyond the fractions' sum are dropped.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0 && a + b + c <= 1.0 + 1e-12) {
        return Err(Error::Argument(format!(
            "split fractions ({a}, {b}, {c}) must be positive and sum to at most 1"
        )));
    }
    let n = dataset.n_rows();
    let sizes = [a, b, c].map(|f| (n as f64 * f).round() as usize);
    if sizes.contains(&0) || sizes.iter().sum::<usize>() > n {
        return Err(Error::Data(format!(
            "{n} rows are too few for three non-empty parts"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = dataset.select_rows(&idx[..sizes[0]]);
    let val = dataset.select_rows(&idx[sizes[0]..sizes[0] + sizes[1]]);
    let test = dataset.select_rows(&idx[sizes[0] + sizes[1]..sizes[0] + sizes[1] + sizes[2]]);
    Ok((train, val, test))
}
