//! Facility and ZCTA tables: loading, validation, missingness screening and
//! the ZCTA join that produces a design-ready table.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Facility-level covariates in file order.
pub const FACILITY_COVARIATES: [&str; 6] = [
    "pct_diabetes_primary",
    "pct_hypertension_primary",
    "pct_african_american",
    "staff_count",
    "pct_septicemia",
    "pct_female",
];

/// Index of the only non-percentage facility covariate.
const STAFF_COUNT: usize = 3;

pub const FACILITY_HEADER: [&str; 11] = [
    "facility_id",
    "zcta_id",
    "latitude",
    "longitude",
    "pct_diabetes_primary",
    "pct_hypertension_primary",
    "pct_african_american",
    "staff_count",
    "pct_septicemia",
    "pct_female",
    "shr",
];

pub const ZCTA_HEADER: [&str; 5] = [
    "zcta_id",
    "centroid_latitude",
    "centroid_longitude",
    "population",
    "fpl_score",
];

/// ZCTA-level covariate broadcast onto facilities by [`join_zcta`].
pub const FPL_SCORE: &str = "fpl_score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityRecord {
    pub facility_id: String,
    pub zcta_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Aligned with [`FACILITY_COVARIATES`].
    pub covariates: Vec<Option<f64>>,
    pub shr: Option<f64>,
}

impl FacilityRecord {
    pub fn missing_fraction(&self) -> f64 {
        if self.covariates.is_empty() {
            return 0.0;
        }
        let missing = self.covariates.iter().filter(|c| c.is_none()).count();
        missing as f64 / self.covariates.len() as f64
    }

    /// Checks every record invariant; `row` is used only for error messages.
    pub fn validate(&self, row: usize) -> Result<()> {
        check_lat_lon(row, self.latitude, self.longitude, "latitude", "longitude")?;
        if self.covariates.len() != FACILITY_COVARIATES.len() {
            return Err(Error::validation(
                row,
                "covariates",
                format!(
                    "expected {} covariates, found {}",
                    FACILITY_COVARIATES.len(),
                    self.covariates.len()
                ),
            ));
        }
        for (j, value) in self.covariates.iter().enumerate() {
            let Some(v) = *value else { continue };
            let name = FACILITY_COVARIATES[j];
            if !v.is_finite() {
                return Err(Error::validation(row, name, "value is not finite"));
            }
            if j == STAFF_COUNT {
                if v < 0.0 {
                    return Err(Error::validation(row, name, "staff_count must be >= 0"));
                }
            } else if !(0.0..=100.0).contains(&v) {
                return Err(Error::validation(
                    row,
                    name,
                    format!("percentage out of range [0, 100]: {v}"),
                ));
            }
        }
        if let Some(shr) = self.shr {
            if !(shr.is_finite() && shr > 0.0) {
                return Err(Error::validation(row, "shr", "shr must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZctaRecord {
    pub zcta_id: String,
    pub centroid_latitude: f64,
    pub centroid_longitude: f64,
    pub population: u64,
    pub fpl_score: Option<f64>,
}

impl ZctaRecord {
    pub fn validate(&self, row: usize) -> Result<()> {
        check_lat_lon(
            row,
            self.centroid_latitude,
            self.centroid_longitude,
            "centroid_latitude",
            "centroid_longitude",
        )?;
        if self.population < 1 {
            return Err(Error::validation(
                row,
                "population",
                "population must be >= 1",
            ));
        }
        if let Some(fpl) = self.fpl_score {
            if !(fpl.is_finite() && fpl >= 0.0) {
                return Err(Error::validation(
                    row,
                    "fpl_score",
                    "fpl_score must be >= 0",
                ));
            }
        }
        Ok(())
    }
}

fn check_lat_lon(row: usize, lat: f64, lon: f64, lat_name: &str, lon_name: &str) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::validation(row, lat_name, "latitude out of range"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::validation(row, lon_name, "longitude out of range"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub facilities: Vec<FacilityRecord>,
    pub zctas: Vec<ZctaRecord>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(facilities: Vec<FacilityRecord>, zctas: Vec<ZctaRecord>) -> Self {
        Dataset {
            facilities,
            zctas,
            covariate_names: FACILITY_COVARIATES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Loads both tables and checks record-level invariants plus zcta_id uniqueness.
    /// Facility-to-ZCTA resolution is left to [`join_zcta`].
    pub fn load(facilities: impl AsRef<Path>, zctas: impl AsRef<Path>) -> Result<Self> {
        Ok(Dataset::new(
            load_facility_table(facilities)?,
            load_zcta_table(zctas)?,
        ))
    }

    pub fn zcta_lookup(&self) -> HashMap<&str, usize> {
        self.zctas
            .iter()
            .enumerate()
            .map(|(i, z)| (z.zcta_id.as_str(), i))
            .collect()
    }

    /// Number of covariate cells that are missing across all facilities.
    pub fn missing_covariate_cells(&self) -> usize {
        self.facilities
            .iter()
            .flat_map(|f| f.covariates.iter())
            .filter(|c| c.is_none())
            .count()
    }

    /// Drops ZCTAs that no facility refers to, keeping table order.
    pub fn served_zctas_only(&self) -> Dataset {
        let served: std::collections::HashSet<&str> =
            self.facilities.iter().map(|f| f.zcta_id.as_str()).collect();
        Dataset {
            facilities: self.facilities.clone(),
            zctas: self
                .zctas
                .iter()
                .filter(|z| served.contains(z.zcta_id.as_str()))
                .cloned()
                .collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

fn parse_cell(raw: &str) -> Option<&str> {
    let cell = raw.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("NA") {
        None
    } else {
        Some(cell)
    }
}

fn parse_f64(path: &Path, line: u64, field: &str, raw: &str) -> Result<Option<f64>> {
    match parse_cell(raw) {
        None => Ok(None),
        Some(cell) => cell.parse::<f64>().map(Some).map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{field}`: cannot parse `{cell}` as a number"),
        }),
    }
}

fn require<T>(path: &Path, line: u64, field: &str, value: Option<T>) -> Result<T> {
    value.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("field `{field}` is required"),
    })
}

fn open_reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let found: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if found != header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "header mismatch: expected `{}`, found `{}`",
                header.join(","),
                found.join(",")
            ),
        });
    }
    Ok(reader)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn load_facility_table(path: impl AsRef<Path>) -> Result<Vec<FacilityRecord>> {
    let path = path.as_ref();
    let mut reader = open_reader(path, &FACILITY_HEADER)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record);
        if record.len() != FACILITY_HEADER.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!(
                    "expected {} fields, found {}",
                    FACILITY_HEADER.len(),
                    record.len()
                ),
            });
        }
        let text = |i: usize| -> Result<String> {
            require(path, line, FACILITY_HEADER[i], parse_cell(&record[i])).map(str::to_string)
        };
        let num = |i: usize| parse_f64(path, line, FACILITY_HEADER[i], &record[i]);
        let covariates = (4..10).map(num).collect::<Result<Vec<_>>>()?;
        let facility = FacilityRecord {
            facility_id: text(0)?,
            zcta_id: text(1)?,
            latitude: require(path, line, "latitude", num(2)?)?,
            longitude: require(path, line, "longitude", num(3)?)?,
            covariates,
            shr: num(10)?,
        };
        facility.validate(row + 1)?;
        out.push(facility);
    }
    Ok(out)
}

pub fn load_zcta_table(path: impl AsRef<Path>) -> Result<Vec<ZctaRecord>> {
    let path = path.as_ref();
    let mut reader = open_reader(path, &ZCTA_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record);
        if record.len() != ZCTA_HEADER.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!(
                    "expected {} fields, found {}",
                    ZCTA_HEADER.len(),
                    record.len()
                ),
            });
        }
        let zcta_id = require(path, line, "zcta_id", parse_cell(&record[0]))?.to_string();
        let num = |i: usize| parse_f64(path, line, ZCTA_HEADER[i], &record[i]);
        let population = require(path, line, "population", parse_cell(&record[3]))?;
        let population = population.parse::<u64>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `population`: `{population}` is not a positive integer"),
        })?;
        let zcta = ZctaRecord {
            zcta_id,
            centroid_latitude: require(path, line, "centroid_latitude", num(1)?)?,
            centroid_longitude: require(path, line, "centroid_longitude", num(2)?)?,
            population,
            fpl_score: num(4)?,
        };
        zcta.validate(row + 1)?;
        if !seen.insert(zcta.zcta_id.clone()) {
            return Err(Error::validation(row + 1, "zcta_id", "duplicate zcta_id"));
        }
        out.push(zcta);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".to_string())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_facility_table(path: impl AsRef<Path>, facilities: &[FacilityRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(FACILITY_HEADER)?;
    for f in facilities {
        let mut row = vec![
            f.facility_id.clone(),
            f.zcta_id.clone(),
            f.latitude.to_string(),
            f.longitude.to_string(),
        ];
        row.extend(f.covariates.iter().map(|c| fmt_opt(*c)));
        row.push(fmt_opt(f.shr));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_zcta_table(path: impl AsRef<Path>, zctas: &[ZctaRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(ZCTA_HEADER)?;
    for z in zctas {
        w.write_record([
            z.zcta_id.clone(),
            z.centroid_latitude.to_string(),
            z.centroid_longitude.to_string(),
            z.population.to_string(),
            fmt_opt(z.fpl_score),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of [`screen_missingness`].
#[derive(Debug, Clone, PartialEq)]
pub struct Screened {
    pub dataset: Dataset,
    pub removed: usize,
    pub kept: usize,
}

impl Screened {
    /// Non-zero when screening removed every facility.
    pub fn warnings(&self) -> usize {
        usize::from(self.kept == 0)
    }
}

/// Drops facilities whose fraction of missing facility-level covariates strictly
/// exceeds `threshold`. SHR and the ZCTA-level FPL score do not count.
pub fn screen_missingness(ds: &Dataset, threshold: f64) -> Result<Screened> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let facilities: Vec<FacilityRecord> = ds
        .facilities
        .iter()
        .filter(|f| f.missing_fraction() <= threshold)
        .cloned()
        .collect();
    let kept = facilities.len();
    Ok(Screened {
        removed: ds.facilities.len() - kept,
        kept,
        dataset: Dataset {
            facilities,
            zctas: ds.zctas.clone(),
            covariate_names: ds.covariate_names.clone(),
        },
    })
}

/// One facility row after the ZCTA join.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub facility_id: String,
    pub zcta_id: String,
    /// Position of the facility's ZCTA in [`DesignTable::zctas`].
    pub zcta_index: usize,
    pub latitude: f64,
    pub longitude: f64,
    /// Facility covariates followed by the FPL score, aligned with
    /// [`DesignTable::variables`].
    pub values: Vec<Option<f64>>,
    /// log(population) of the facility's ZCTA.
    pub offset: f64,
    pub shr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignTable {
    pub variables: Vec<String>,
    pub rows: Vec<DesignRow>,
    pub zctas: Vec<ZctaRecord>,
}

impl DesignTable {
    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.values[j]).collect()
    }

    pub fn missing_cells(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.values.iter())
            .filter(|v| v.is_none())
            .count()
    }

    pub fn log_shr(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.shr.map(f64::ln)).collect()
    }

    pub fn zcta_index(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.zcta_index).collect()
    }
}

/// Broadcasts each ZCTA's FPL score and log-population offset onto its facilities.
pub fn join_zcta(ds: &Dataset) -> Result<DesignTable> {
    let lookup = ds.zcta_lookup();
    let unresolved: Vec<String> = ds
        .facilities
        .iter()
        .filter(|f| !lookup.contains_key(f.zcta_id.as_str()))
        .map(|f| f.facility_id.clone())
        .collect();
    if !unresolved.is_empty() {
        return Err(Error::Join(unresolved));
    }
    let mut variables = ds.covariate_names.clone();
    variables.push(FPL_SCORE.to_string());
    let rows = ds
        .facilities
        .iter()
        .map(|f| {
            let k = lookup[f.zcta_id.as_str()];
            let z = &ds.zctas[k];
            let mut values = f.covariates.clone();
            values.push(z.fpl_score);
            DesignRow {
                facility_id: f.facility_id.clone(),
                zcta_id: f.zcta_id.clone(),
                zcta_index: k,
                latitude: f.latitude,
                longitude: f.longitude,
                values,
                offset: (z.population as f64).ln(),
                shr: f.shr,
            }
        })
        .collect();
    Ok(DesignTable {
        variables,
        rows,
        zctas: ds.zctas.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn facility(id: &str, zcta: &str, covariates: Vec<Option<f64>>) -> FacilityRecord {
        FacilityRecord {
            facility_id: id.into(),
            zcta_id: zcta.into(),
            latitude: 27.0,
            longitude: -81.0,
            covariates,
            shr: Some(1.0),
        }
    }

    fn zcta(id: &str, population: u64, fpl: Option<f64>) -> ZctaRecord {
        ZctaRecord {
            zcta_id: id.into(),
            centroid_latitude: 27.0,
            centroid_longitude: -81.0,
            population,
            fpl_score: fpl,
        }
    }

    #[test]
    fn loads_row_with_missing_cell() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\nF001,33101,25.77,-80.19,45.2,,60.1,12,8.3,47.0,1.30\n",
            FACILITY_HEADER.join(",")
        );
        let path = write_tmp(&dir, "f.csv", &body);
        let rows = load_facility_table(path).unwrap();
        assert_eq!(rows.len(), 1);
        let f = &rows[0];
        assert_eq!(f.facility_id, "F001");
        assert_eq!(f.zcta_id, "33101");
        assert_eq!(f.covariates[0], Some(45.2));
        assert_eq!(f.covariates[1], None);
        assert_eq!(f.covariates[3], Some(12.0));
        assert_eq!(f.shr, Some(1.30));
    }

    #[test]
    fn na_sentinel_is_case_insensitive() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\nF1,1,25,-80,na,NA,Na,1,2,3,NA\n",
            FACILITY_HEADER.join(",")
        );
        let rows = load_facility_table(write_tmp(&dir, "f.csv", &body)).unwrap();
        assert_eq!(&rows[0].covariates[..3], &[None, None, None]);
        assert_eq!(rows[0].shr, None);
    }

    #[test]
    fn latitude_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\nF001,33101,100.0,-80.19,45.2,,60.1,12,8.3,47.0,1.30\n",
            FACILITY_HEADER.join(",")
        );
        let err = load_facility_table(write_tmp(&dir, "f.csv", &body)).unwrap_err();
        assert!(err.to_string().contains("latitude out of range"), "{err}");
        assert!(matches!(err, Error::Validation { row: 1, .. }));
    }

    #[test]
    fn malformed_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\nF1,1,25,-80,1,2,3,4,5,6,1\nF2,1,25,-80,x,2,3,4,5,6,1\n",
            FACILITY_HEADER.join(",")
        );
        let err = load_facility_table(write_tmp(&dir, "f.csv", &body)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_zcta_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\nA,27,-81,100,1\nA,27,-81,100,1\n",
            ZCTA_HEADER.join(",")
        );
        let err = load_zcta_table(write_tmp(&dir, "z.csv", &body)).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn zero_population_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{}\nA,27,-81,0,1\n", ZCTA_HEADER.join(","));
        assert!(load_zcta_table(write_tmp(&dir, "z.csv", &body)).is_err());
    }

    #[test]
    fn screening_rules() {
        let five_missing = facility("a", "Z", vec![Some(1.0), None, None, None, None, None]);
        let complete = facility("b", "Z", vec![Some(1.0); 6]);
        let one_missing = facility(
            "c",
            "Z",
            vec![Some(1.0), None, Some(1.0), Some(1.0), Some(1.0), Some(1.0)],
        );
        let ds = Dataset::new(
            vec![five_missing, complete.clone(), one_missing],
            vec![zcta("Z", 10, None)],
        );
        let s = screen_missingness(&ds, 0.8).unwrap();
        assert_eq!((s.removed, s.kept), (1, 2));
        assert_eq!(s.dataset.facilities[0].facility_id, "b");

        let s0 = screen_missingness(&ds, 0.0).unwrap();
        assert_eq!(s0.dataset.facilities, vec![complete]);

        assert!(screen_missingness(&ds, 1.5).is_err());
    }

    #[test]
    fn screening_everything_away_is_a_warning() {
        let ds = Dataset::new(
            vec![facility("a", "Z", vec![None; 6])],
            vec![zcta("Z", 10, None)],
        );
        let s = screen_missingness(&ds, 0.5).unwrap();
        assert_eq!(s.kept, 0);
        assert_eq!(s.warnings(), 1);
    }

    #[test]
    fn join_broadcasts_offset_and_fpl() {
        let ds = Dataset::new(
            vec![
                facility("a", "Z", vec![Some(1.0); 6]),
                facility("b", "Y", vec![Some(1.0); 6]),
                facility("c", "Z", vec![Some(1.0); 6]),
                facility("d", "Z", vec![Some(1.0); 6]),
            ],
            vec![zcta("Y", 5, None), zcta("Z", 20_000, Some(18.5))],
        );
        let t = join_zcta(&ds).unwrap();
        assert_eq!(t.rows.len(), 4);
        let ids: Vec<_> = t.rows.iter().map(|r| r.facility_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        let fpl = t.variable_index(FPL_SCORE).unwrap();
        for r in t.rows.iter().filter(|r| r.zcta_id == "Z") {
            assert!((r.offset - 9.903_487_552_536_127).abs() < 1e-12);
            assert_eq!(r.values[fpl], Some(18.5));
        }
        assert_eq!(t.rows[1].values[fpl], None);
    }

    #[test]
    fn join_reports_unresolved_facilities() {
        let ds = Dataset::new(
            vec![
                facility("a", "Z", vec![Some(1.0); 6]),
                facility("b", "nowhere", vec![Some(1.0); 6]),
            ],
            vec![zcta("Z", 10, None)],
        );
        match join_zcta(&ds) {
            Err(Error::Join(ids)) => assert_eq!(ids, vec!["b".to_string()]),
            other => panic!("expected join error, got {other:?}"),
        }
    }

    #[test]
    fn unserved_zctas_are_dropped_in_order() {
        let ds = Dataset::new(
            vec![
                facility("f1", "z3", vec![None; 6]),
                facility("f2", "z1", vec![None; 6]),
            ],
            vec![
                zcta("z1", 1, None),
                zcta("z2", 1, None),
                zcta("z3", 1, None),
            ],
        );
        let ids: Vec<String> = ds
            .served_zctas_only()
            .zctas
            .into_iter()
            .map(|z| z.zcta_id)
            .collect();
        assert_eq!(ids, ["z1", "z3"]);
    }
}
