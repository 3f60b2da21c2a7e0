//! Unit-level data model: covariate schema, records, CSV ingestion,
//! seeded splitting into analysis sets, and treatment-band filtering.
//!
//! Tables are immutable after construction; every transformation returns a
//! new table. Categorical covariates are stored as level indices, with the
//! schema as the single source of the index/label mapping.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;
use crate::seed;

/// Reserved CSV column carrying the unit identifier.
pub const COL_UNIT_ID: &str = "unit_id";
/// Reserved CSV column carrying the outcome.
pub const COL_OUTCOME: &str = "outcome";
/// Reserved CSV column carrying the treatment / exposure value.
pub const COL_TREATMENT: &str = "treatment";
/// Reserved CSV column carrying the panel period (year index).
pub const COL_PERIOD: &str = "period";
/// Reserved CSV column carrying the firm group tag.
pub const COL_FIRM_GROUP: &str = "firm_group";

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("missing column `{name}`")]
    MissingColumn { name: String },
    #[error("unexpected column `{name}`: not a reserved column or schema covariate")]
    UnknownColumn { name: String },
    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },
    #[error("duplicate unit_id `{unit_id}` (period {period:?})")]
    DuplicateUnit {
        unit_id: String,
        period: Option<i32>,
    },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("invalid split fractions: {0}")]
    SplitWeights(String),
    #[error("table already has a split assignment")]
    AlreadySplit,
    #[error("no units labeled `{label}` in the split assignment")]
    UnknownSplitLabel { label: String },
    #[error("treatment bands invalid: {0}")]
    InvalidBands(String),
    #[error("band filter left the {arm} arm empty")]
    EmptyArm { arm: &'static str },
}

/// Covariate kind. Categorical levels are ordered; values are stored as the
/// index into this list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Binary,
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaColumn {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

/// Ordered covariate schema shared by every record of a table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct CovariateSchema {
    columns: Vec<SchemaColumn>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    columns: Vec<SchemaColumn>,
}

impl TryFrom<SchemaRepr> for CovariateSchema {
    type Error = String;
    fn try_from(repr: SchemaRepr) -> Result<Self, String> {
        CovariateSchema::new(repr.columns).map_err(|e| e.to_string())
    }
}

impl From<CovariateSchema> for SchemaRepr {
    fn from(s: CovariateSchema) -> Self {
        SchemaRepr { columns: s.columns }
    }
}

impl CovariateSchema {
    pub fn new(columns: Vec<SchemaColumn>) -> Result<Self, CohortError> {
        if columns.is_empty() {
            return Err(CohortError::Schema(
                "schema needs at least one covariate".into(),
            ));
        }
        let mut seen = HashSet::new();
        for col in &columns {
            if !seen.insert(col.name.clone()) {
                return Err(CohortError::Schema(format!(
                    "duplicate covariate `{}`",
                    col.name
                )));
            }
            if RESERVED.contains(&col.name.as_str()) {
                return Err(CohortError::Schema(format!(
                    "covariate `{}` collides with a reserved column",
                    col.name
                )));
            }
            if let CovariateKind::Categorical { levels } = &col.kind {
                if levels.is_empty() {
                    return Err(CohortError::Schema(format!(
                        "categorical `{}` has no levels",
                        col.name
                    )));
                }
                let distinct: HashSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return Err(CohortError::Schema(format!(
                        "categorical `{}` has duplicate levels",
                        col.name
                    )));
                }
            }
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[SchemaColumn] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, idx: usize) -> &SchemaColumn {
        &self.columns[idx]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Number of levels for tree code: 1 for numeric, 2 for binary.
    pub fn n_levels(&self, idx: usize) -> usize {
        match &self.columns[idx].kind {
            CovariateKind::Numeric => 1,
            CovariateKind::Binary => 2,
            CovariateKind::Categorical { levels } => levels.len(),
        }
    }

    /// Stable FNV-1a hash of the canonical schema JSON, used to bind rule
    /// files to the schema they were learned on.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CohortError> {
        serde_json::from_str(text).map_err(|e| CohortError::Schema(e.to_string()))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, CohortError> {
        let mut buf = String::new();
        std::fs::File::open(path)?.read_to_string(&mut buf)?;
        Self::from_json(&buf)
    }
}

const RESERVED: [&str; 5] = [
    COL_UNIT_ID,
    COL_OUTCOME,
    COL_TREATMENT,
    COL_PERIOD,
    COL_FIRM_GROUP,
];

/// Panel tagging of a unit: which side of the Study 2 design it sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmGroup {
    TreatmentFirm,
    ComparisonFirm,
    Observational,
}

impl FirmGroup {
    pub fn token(self) -> &'static str {
        match self {
            FirmGroup::TreatmentFirm => "treatment",
            FirmGroup::ComparisonFirm => "comparison",
            FirmGroup::Observational => "observational",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "treatment" => Some(FirmGroup::TreatmentFirm),
            "comparison" => Some(FirmGroup::ComparisonFirm),
            "observational" => Some(FirmGroup::Observational),
            _ => None,
        }
    }
}

/// One unit-period observation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitRecord<F> {
    pub unit_id: String,
    pub outcome: F,
    /// Continuous exposure, or 0/1 when the treatment is a designed arm.
    pub treatment: F,
    /// Binary arm flag set by band filtering; `None` until then.
    pub arm: Option<bool>,
    /// Covariate values in schema order; categorical as level index.
    pub covariates: Vec<F>,
    pub period: Option<i32>,
    pub firm_group: Option<FirmGroup>,
}

/// Outcome transform applied ahead of the parametric Study 1 model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTransform {
    Identity,
    Log1p,
}

impl OutcomeTransform {
    pub fn apply<F: Scalar>(self, y: F) -> F {
        match self {
            OutcomeTransform::Identity => y,
            OutcomeTransform::Log1p => (F::one() + y).ln(),
        }
    }
}

/// Immutable table of unit records plus optional split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortTable<F> {
    schema: CovariateSchema,
    records: Vec<UnitRecord<F>>,
    split: Option<BTreeMap<String, String>>,
}

impl<F: Scalar> CohortTable<F> {
    /// Builds a table, validating every record against the schema.
    pub fn from_records(
        schema: CovariateSchema,
        records: Vec<UnitRecord<F>>,
    ) -> Result<Self, CohortError> {
        let mut seen: HashSet<(String, Option<i32>)> = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.covariates.len() != schema.len() {
                return Err(CohortError::Record {
                    index: i,
                    message: format!(
                        "covariate vector has length {}, schema has {}",
                        rec.covariates.len(),
                        schema.len()
                    ),
                });
            }
            for (j, (&v, col)) in rec.covariates.iter().zip(schema.columns()).enumerate() {
                let ok = match &col.kind {
                    CovariateKind::Numeric => v.is_finite(),
                    CovariateKind::Binary => v == F::zero() || v == F::one(),
                    CovariateKind::Categorical { levels } => {
                        v.fract() == F::zero() && v >= F::zero() && v.as_f64() < levels.len() as f64
                    }
                };
                if !ok {
                    return Err(CohortError::Record {
                        index: i,
                        message: format!("covariate {j} (`{}`) has invalid value {v}", col.name),
                    });
                }
            }
            if !seen.insert((rec.unit_id.clone(), rec.period)) {
                return Err(CohortError::DuplicateUnit {
                    unit_id: rec.unit_id.clone(),
                    period: rec.period,
                });
            }
        }
        Ok(Self {
            schema,
            records,
            split: None,
        })
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn records(&self) -> &[UnitRecord<F>] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &UnitRecord<F> {
        &self.records[row]
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    pub fn outcome(&self, row: usize) -> F {
        self.records[row].outcome
    }

    pub fn treatment(&self, row: usize) -> F {
        self.records[row].treatment
    }

    pub fn covariate(&self, row: usize, col: usize) -> F {
        self.records[row].covariates[col]
    }

    pub fn split_assignment(&self) -> Option<&BTreeMap<String, String>> {
        self.split.as_ref()
    }

    /// Distinct unit ids in first-appearance order.
    pub fn unit_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.unit_id.as_str()))
            .map(|r| r.unit_id.as_str())
            .collect()
    }

    /// Sorted distinct periods.
    pub fn periods(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.records.iter().filter_map(|r| r.period).collect();
        set.into_iter().collect()
    }

    /// Row indices grouped by unit, in first-appearance order of units.
    pub fn rows_by_unit(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.unit_id.clone()).or_insert_with(|| {
                order.push(r.unit_id.clone());
                Vec::new()
            });
            map.get_mut(&r.unit_id).unwrap().push(i);
        }
        order
            .into_iter()
            .map(|u| {
                let rows = map.remove(&u).unwrap();
                (u, rows)
            })
            .collect()
    }

    /// Loads a table from CSV. The header must contain the reserved columns
    /// plus exactly the schema covariates; `panel_mode` requires `period`.
    pub fn load_csv(
        path: impl AsRef<Path>,
        schema: &CovariateSchema,
        panel_mode: bool,
    ) -> Result<Self, CohortError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema, panel_mode)
    }

    pub fn read_csv(
        reader: impl Read,
        schema: &CovariateSchema,
        panel_mode: bool,
    ) -> Result<Self, CohortError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);

        let idx_unit = find(COL_UNIT_ID).ok_or(CohortError::MissingColumn {
            name: COL_UNIT_ID.into(),
        })?;
        let idx_outcome = find(COL_OUTCOME).ok_or(CohortError::MissingColumn {
            name: COL_OUTCOME.into(),
        })?;
        let idx_treatment = find(COL_TREATMENT).ok_or(CohortError::MissingColumn {
            name: COL_TREATMENT.into(),
        })?;
        let idx_period = find(COL_PERIOD);
        let idx_firm = find(COL_FIRM_GROUP);
        if panel_mode && idx_period.is_none() {
            return Err(CohortError::MissingColumn {
                name: COL_PERIOD.into(),
            });
        }
        let mut idx_cov = Vec::with_capacity(schema.len());
        for col in schema.columns() {
            let idx = find(&col.name).ok_or(CohortError::MissingColumn {
                name: col.name.clone(),
            })?;
            idx_cov.push(idx);
        }
        // Reject columns that are neither reserved nor in the schema.
        for h in headers.iter() {
            let reserved = RESERVED.contains(&h);
            let in_schema = schema.index_of(h).is_some();
            if !reserved && !in_schema {
                return Err(CohortError::UnknownColumn { name: h.into() });
            }
        }

        let cell_err = |row: usize, column: &str, message: String| CohortError::Cell {
            row,
            column: column.to_string(),
            message,
        };

        let mut records = Vec::new();
        for (row_idx, result) in rdr.records().enumerate() {
            let row = row_idx + 1; // 1-based data row for error messages
            let rec = result?;
            let get = |i: usize| rec.get(i).unwrap_or("");

            let unit_id = get(idx_unit).to_string();
            if unit_id.is_empty() {
                return Err(cell_err(row, COL_UNIT_ID, "empty unit_id".into()));
            }
            let outcome: f64 = get(idx_outcome).parse().map_err(|_| {
                cell_err(
                    row,
                    COL_OUTCOME,
                    format!("unparseable value `{}`", get(idx_outcome)),
                )
            })?;
            let treatment: f64 = get(idx_treatment).parse().map_err(|_| {
                cell_err(
                    row,
                    COL_TREATMENT,
                    format!("unparseable value `{}`", get(idx_treatment)),
                )
            })?;
            let period = match idx_period {
                Some(i) if !get(i).is_empty() => Some(get(i).parse::<i32>().map_err(|_| {
                    cell_err(row, COL_PERIOD, format!("unparseable period `{}`", get(i)))
                })?),
                _ => None,
            };
            if panel_mode && period.is_none() {
                return Err(cell_err(
                    row,
                    COL_PERIOD,
                    "missing period in panel mode".into(),
                ));
            }
            let firm_group = match idx_firm {
                Some(i) if !get(i).is_empty() => {
                    Some(FirmGroup::parse(get(i)).ok_or_else(|| {
                        cell_err(
                            row,
                            COL_FIRM_GROUP,
                            format!("unknown firm group `{}`", get(i)),
                        )
                    })?)
                }
                _ => None,
            };

            let mut covariates = Vec::with_capacity(schema.len());
            for (col, &i) in schema.columns().iter().zip(&idx_cov) {
                let raw = get(i);
                let value = match &col.kind {
                    CovariateKind::Numeric => raw.parse::<f64>().map_err(|_| {
                        cell_err(row, &col.name, format!("unparseable numeric `{raw}`"))
                    })?,
                    CovariateKind::Binary => match raw {
                        "0" => 0.0,
                        "1" => 1.0,
                        _ => {
                            return Err(cell_err(
                                row,
                                &col.name,
                                format!("binary column expects 0 or 1, got `{raw}`"),
                            ))
                        }
                    },
                    CovariateKind::Categorical { levels } => {
                        match levels.iter().position(|l| l == raw) {
                            Some(ix) => ix as f64,
                            None => {
                                return Err(cell_err(
                                    row,
                                    &col.name,
                                    format!("value `{raw}` not among declared levels"),
                                ))
                            }
                        }
                    }
                };
                covariates.push(F::of(value));
            }

            records.push(UnitRecord {
                unit_id,
                outcome: F::of(outcome),
                treatment: F::of(treatment),
                arm: None,
                covariates,
                period,
                firm_group,
            });
        }

        Self::from_records(schema.clone(), records)
    }

    /// Writes the table back out in the canonical column order. Loading the
    /// result with the same schema reproduces the table exactly.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), CohortError> {
        let has_period = self.records.iter().any(|r| r.period.is_some());
        let has_firm = self.records.iter().any(|r| r.firm_group.is_some());
        let mut w = csv::Writer::from_writer(writer);

        let mut header = vec![
            COL_UNIT_ID.to_string(),
            COL_OUTCOME.to_string(),
            COL_TREATMENT.to_string(),
        ];
        if has_period {
            header.push(COL_PERIOD.into());
        }
        if has_firm {
            header.push(COL_FIRM_GROUP.into());
        }
        header.extend(self.schema.names().map(String::from));
        w.write_record(&header)?;

        for rec in &self.records {
            let mut fields = vec![
                rec.unit_id.clone(),
                format!("{}", rec.outcome),
                format!("{}", rec.treatment),
            ];
            if has_period {
                fields.push(rec.period.map(|p| p.to_string()).unwrap_or_default());
            }
            if has_firm {
                fields.push(
                    rec.firm_group
                        .map(|g| g.token().to_string())
                        .unwrap_or_default(),
                );
            }
            for (col, &v) in self.schema.columns().iter().zip(&rec.covariates) {
                let s = match &col.kind {
                    CovariateKind::Numeric => format!("{v}"),
                    CovariateKind::Binary => {
                        if v == F::one() {
                            "1".into()
                        } else {
                            "0".into()
                        }
                    }
                    CovariateKind::Categorical { levels } => levels[v.as_f64() as usize].clone(),
                };
                fields.push(s);
            }
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn emit_csv(&self, path: impl AsRef<Path>) -> Result<(), CohortError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    /// Assigns every unit to exactly one label. The assignment depends only
    /// on `(seed, sorted unit ids, fractions)`: unit ids are sorted, shuffled
    /// with a seeded generator, and cut into blocks sized by the weights.
    pub fn split(&self, fractions: &[(String, f64)], seed_value: u64) -> Result<Self, CohortError> {
        if self.split.is_some() {
            return Err(CohortError::AlreadySplit);
        }
        if fractions.is_empty() {
            return Err(CohortError::SplitWeights("no labels given".into()));
        }
        if fractions.iter().any(|(_, w)| *w <= 0.0) {
            return Err(CohortError::SplitWeights("weights must be positive".into()));
        }
        let total: f64 = fractions.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CohortError::SplitWeights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let labels: HashSet<&str> = fractions.iter().map(|(l, _)| l.as_str()).collect();
        if labels.len() != fractions.len() {
            return Err(CohortError::SplitWeights("duplicate labels".into()));
        }

        let mut units: Vec<String> = self.unit_ids().into_iter().map(String::from).collect();
        units.sort_unstable();
        let n = units.len();
        let mut rng = seed::rng(seed_value, &[seed::STREAM_SPLIT]);
        units.shuffle(&mut rng);

        // Base counts by floor, remainder goes to the largest fractional
        // parts (ties resolved by label order).
        let mut counts: Vec<usize> = fractions
            .iter()
            .map(|(_, w)| (n as f64 * w).floor() as usize)
            .collect();
        let assigned: usize = counts.iter().sum();
        let mut fracs: Vec<(usize, f64)> = fractions
            .iter()
            .enumerate()
            .map(|(i, (_, w))| (i, n as f64 * w - (n as f64 * w).floor()))
            .collect();
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..(n - assigned) {
            counts[fracs[k % fracs.len()].0] += 1;
        }

        let mut assignment = BTreeMap::new();
        let mut cursor = 0usize;
        for ((label, _), count) in fractions.iter().zip(&counts) {
            for unit in &units[cursor..cursor + count] {
                assignment.insert(unit.clone(), label.clone());
            }
            cursor += count;
        }

        let mut out = self.clone();
        out.split = Some(assignment);
        Ok(out)
    }

    /// Row indices whose unit carries the given split label.
    pub fn rows_with_label(&self, label: &str) -> Result<Vec<usize>, CohortError> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| CohortError::UnknownSplitLabel {
                label: label.to_string(),
            })?;
        let rows: Vec<usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| split.get(&r.unit_id).map(String::as_str) == Some(label))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(CohortError::UnknownSplitLabel {
                label: label.to_string(),
            });
        }
        Ok(rows)
    }

    /// Keeps units whose exposure falls in one of the two bands and flags
    /// them `arm = 0` (control band) or `arm = 1` (treated band). The
    /// continuous exposure value is retained.
    pub fn filter_treatment_bands(
        &self,
        control: (F, F),
        treated: (F, F),
    ) -> Result<Self, CohortError> {
        for (lo, hi) in [control, treated] {
            if lo > hi {
                return Err(CohortError::InvalidBands(format!(
                    "band [{lo}, {hi}] has lo > hi"
                )));
            }
        }
        let overlap = control.0 <= treated.1 && treated.0 <= control.1;
        if overlap {
            return Err(CohortError::InvalidBands("bands overlap".into()));
        }

        let in_band = |v: F, band: (F, F)| v >= band.0 && v <= band.1;
        let mut records = Vec::new();
        for rec in &self.records {
            let arm = if in_band(rec.treatment, control) {
                Some(false)
            } else if in_band(rec.treatment, treated) {
                Some(true)
            } else {
                None
            };
            if let Some(a) = arm {
                let mut kept = rec.clone();
                kept.arm = Some(a);
                records.push(kept);
            }
        }
        if !records.iter().any(|r| r.arm == Some(false)) {
            return Err(CohortError::EmptyArm { arm: "control" });
        }
        if !records.iter().any(|r| r.arm == Some(true)) {
            return Err(CohortError::EmptyArm { arm: "treated" });
        }

        let split = self.split.as_ref().map(|s| {
            let kept: HashSet<&str> = records.iter().map(|r| r.unit_id.as_str()).collect();
            s.iter()
                .filter(|(u, _)| kept.contains(u.as_str()))
                .map(|(u, l)| (u.clone(), l.clone()))
                .collect()
        });
        Ok(Self {
            schema: self.schema.clone(),
            records,
            split,
        })
    }

    /// Returns a copy with the outcome transformed.
    pub fn transform_outcome(&self, transform: OutcomeTransform) -> Self {
        let mut out = self.clone();
        for rec in &mut out.records {
            rec.outcome = transform.apply(rec.outcome);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_age() -> CovariateSchema {
        CovariateSchema::new(vec![SchemaColumn {
            name: "age".into(),
            kind: CovariateKind::Numeric,
        }])
        .unwrap()
    }

    fn schema_mixed() -> CovariateSchema {
        CovariateSchema::new(vec![
            SchemaColumn {
                name: "age".into(),
                kind: CovariateKind::Numeric,
            },
            SchemaColumn {
                name: "admitted".into(),
                kind: CovariateKind::Binary,
            },
            SchemaColumn {
                name: "strata".into(),
                kind: CovariateKind::Categorical {
                    levels: vec!["low".into(), "medium".into(), "high".into()],
                },
            },
        ])
        .unwrap()
    }

    fn table_of(n: usize) -> CohortTable<f64> {
        let records = (0..n)
            .map(|i| UnitRecord {
                unit_id: format!("u{i:04}"),
                outcome: i as f64,
                treatment: (i % 7) as f64 * 10.0,
                arm: None,
                covariates: vec![30.0 + i as f64],
                period: None,
                firm_group: None,
            })
            .collect();
        CohortTable::from_records(schema_age(), records).unwrap()
    }

    #[test]
    fn loads_three_rows() {
        let csv = "unit_id,outcome,treatment,age\na,1,5,30\nb,2,10,40\nc,3,50,50\n";
        let t = CohortTable::<f64>::read_csv(csv.as_bytes(), &schema_age(), false).unwrap();
        assert_eq!(t.n_records(), 3);
        assert_eq!(t.outcome(2), 3.0);
        assert_eq!(t.covariate(1, 0), 40.0);
    }

    #[test]
    fn rejects_unknown_categorical_level_naming_row_and_column() {
        let csv = "unit_id,outcome,treatment,age,admitted,strata\n\
                   a,1,5,30,0,low\n\
                   b,2,10,40,1,HIGH\n";
        let err = CohortTable::<f64>::read_csv(csv.as_bytes(), &schema_mixed(), false).unwrap_err();
        match err {
            CohortError::Cell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "strata");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn loads_two_period_panel() {
        let csv = "unit_id,outcome,treatment,period,firm_group,age\n\
                   a,3,10,2011,treatment,30\n\
                   a,1,50,2012,treatment,30\n\
                   b,4,10,2011,comparison,40\n\
                   b,4,10,2012,comparison,40\n\
                   c,2,12,2011,comparison,50\n\
                   c,2,12,2012,comparison,50\n";
        let t = CohortTable::<f64>::read_csv(csv.as_bytes(), &schema_age(), true).unwrap();
        assert_eq!(t.n_records(), 6);
        assert_eq!(t.periods(), vec![2011, 2012]);
        assert_eq!(t.unit_ids().len(), 3);
    }

    #[test]
    fn panel_mode_requires_period() {
        let csv = "unit_id,outcome,treatment,age\na,1,5,30\n";
        let err = CohortTable::<f64>::read_csv(csv.as_bytes(), &schema_age(), true).unwrap_err();
        assert!(matches!(err, CohortError::MissingColumn { name } if name == "period"));
    }

    #[test]
    fn rejects_duplicate_unit_within_period() {
        let csv = "unit_id,outcome,treatment,age\na,1,5,30\na,2,10,40\n";
        let err = CohortTable::<f64>::read_csv(csv.as_bytes(), &schema_age(), false).unwrap_err();
        assert!(matches!(err, CohortError::DuplicateUnit { .. }));
    }

    #[test]
    fn rejects_missing_and_unknown_columns() {
        let missing = "unit_id,outcome,age\na,1,30\n";
        assert!(matches!(
            CohortTable::<f64>::read_csv(missing.as_bytes(), &schema_age(), false).unwrap_err(),
            CohortError::MissingColumn { name } if name == "treatment"
        ));
        let unknown = "unit_id,outcome,treatment,age,extra\na,1,5,30,9\n";
        assert!(matches!(
            CohortTable::<f64>::read_csv(unknown.as_bytes(), &schema_age(), false).unwrap_err(),
            CohortError::UnknownColumn { name } if name == "extra"
        ));
    }

    #[test]
    fn csv_round_trips() {
        let csv = "unit_id,outcome,treatment,age,admitted,strata\n\
                   a,1,5.25,30.5,0,low\n\
                   b,2,10,40,1,high\n\
                   c,0,62.125,41,0,medium\n";
        let t = CohortTable::<f64>::read_csv(csv.as_bytes(), &schema_mixed(), false).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = CohortTable::<f64>::read_csv(buf.as_slice(), &schema_mixed(), false).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn split_exact_thirds() {
        let t = table_of(9).split(&thirds(), 31).unwrap();
        for label in ["train", "prediction", "validation"] {
            assert_eq!(t.rows_with_label(label).unwrap().len(), 3);
        }
    }

    fn thirds() -> Vec<(String, f64)> {
        vec![
            ("train".into(), 1.0 / 3.0),
            ("prediction".into(), 1.0 / 3.0),
            ("validation".into(), 1.0 / 3.0),
        ]
    }

    #[test]
    fn split_is_deterministic() {
        let halves = vec![("train".into(), 0.5), ("validation".into(), 0.5)];
        let a = table_of(10).split(&halves, 42).unwrap();
        let b = table_of(10).split(&halves, 42).unwrap();
        assert_eq!(a.split_assignment(), b.split_assignment());
        assert_eq!(
            serde_json::to_string(a.split_assignment().unwrap()).unwrap(),
            serde_json::to_string(b.split_assignment().unwrap()).unwrap()
        );
        let c = table_of(10).split(&halves, 43).unwrap();
        assert_ne!(a.split_assignment(), c.split_assignment());
    }

    #[test]
    fn split_hundred_units_into_thirds_covers_everything() {
        let t = table_of(100).split(&thirds(), 7).unwrap();
        let mut seen = BTreeSet::new();
        let mut sizes = Vec::new();
        for label in ["train", "prediction", "validation"] {
            let rows = t.rows_with_label(label).unwrap();
            sizes.push(rows.len());
            for r in rows {
                assert!(seen.insert(t.record(r).unit_id.clone()));
            }
        }
        assert_eq!(seen.len(), 100);
        assert!(sizes.iter().all(|&s| s == 33 || s == 34));
        assert_eq!(sizes.iter().sum::<usize>(), 100);
    }

    #[test]
    fn split_rejects_bad_weights_and_double_split() {
        let t = table_of(4);
        assert!(matches!(
            t.split(&[("a".into(), 0.5), ("b".into(), 0.6)], 1)
                .unwrap_err(),
            CohortError::SplitWeights(_)
        ));
        let s = t.split(&[("a".into(), 0.5), ("b".into(), 0.5)], 1).unwrap();
        assert!(matches!(
            s.split(&[("a".into(), 1.0)], 1).unwrap_err(),
            CohortError::AlreadySplit
        ));
    }

    #[test]
    fn band_filter_by_membership() {
        let records = [5.0, 10.0, 30.0, 50.0]
            .iter()
            .enumerate()
            .map(|(i, &tr)| UnitRecord {
                unit_id: format!("u{i}"),
                outcome: 1.0,
                treatment: tr,
                arm: None,
                covariates: vec![0.0],
                period: None,
                firm_group: None,
            })
            .collect();
        let t = CohortTable::from_records(schema_age(), records).unwrap();
        let f = t.filter_treatment_bands((0.0, 15.0), (40.0, 70.0)).unwrap();
        assert_eq!(f.n_records(), 3);
        assert_eq!(f.record(0).arm, Some(false));
        assert_eq!(f.record(1).arm, Some(false));
        assert_eq!(f.record(2).arm, Some(true));
        assert_eq!(f.record(2).treatment, 50.0);
    }

    #[test]
    fn band_filter_rejects_overlap() {
        let t = table_of(5);
        assert!(matches!(
            t.filter_treatment_bands((0.0, 15.0), (10.0, 70.0))
                .unwrap_err(),
            CohortError::InvalidBands(_)
        ));
    }

    #[test]
    fn band_filter_counts_match_linear_scan() {
        let t = table_of(500);
        let f = t.filter_treatment_bands((0.0, 15.0), (40.0, 70.0)).unwrap();
        let control = (0..t.n_records())
            .filter(|&i| t.treatment(i) >= 0.0 && t.treatment(i) <= 15.0)
            .count();
        let treated = (0..t.n_records())
            .filter(|&i| t.treatment(i) >= 40.0 && t.treatment(i) <= 70.0)
            .count();
        assert!(control > 0 && treated > 0);
        assert_eq!(
            f.records().iter().filter(|r| r.arm == Some(false)).count(),
            control
        );
        assert_eq!(
            f.records().iter().filter(|r| r.arm == Some(true)).count(),
            treated
        );
        // Kept plus dropped reconstructs the original set.
        let dropped = t.n_records() - f.n_records();
        assert_eq!(dropped + control + treated, t.n_records());
    }

    #[test]
    fn schema_sidecar_round_trips_and_hash_is_stable() {
        let s = schema_mixed();
        let json = s.to_json();
        let back = CovariateSchema::from_json(&json).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
        assert_ne!(s.hash(), schema_age().hash());
    }

    #[test]
    fn schema_rejects_invalid_shapes() {
        assert!(CovariateSchema::new(vec![]).is_err());
        assert!(CovariateSchema::new(vec![
            SchemaColumn {
                name: "x".into(),
                kind: CovariateKind::Numeric
            },
            SchemaColumn {
                name: "x".into(),
                kind: CovariateKind::Binary
            },
        ])
        .is_err());
        assert!(CovariateSchema::new(vec![SchemaColumn {
            name: "c".into(),
            kind: CovariateKind::Categorical { levels: vec![] }
        }])
        .is_err());
    }

    #[test]
    fn outcome_transform_applies() {
        let t = table_of(3).transform_outcome(OutcomeTransform::Log1p);
        assert!((t.outcome(2) - (3.0f64).ln()).abs() < 1e-12);
    }
}
