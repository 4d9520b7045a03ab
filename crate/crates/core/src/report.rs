//! Fit metrics and per-area exports.

use std::path::Path;

use crate::data::DesignTable;
use crate::error::{Error, Result};

/// Relative squared error against the persistence baseline that predicts each
/// area's within-area mean:
/// `Σ(Y - Ŷ)² / Σ(Y - Ȳ_k)²`. Rows of single-row areas add nothing to the
/// denominator.
pub fn rse(y: &[f64], y_hat: &[f64], zcta_index: &[usize]) -> Result<f64> {
    if y.len() != y_hat.len() || y.len() != zcta_index.len() {
        return Err(Error::Contract(format!(
            "length mismatch: y {}, y_hat {}, zcta_index {}",
            y.len(),
            y_hat.len(),
            zcta_index.len()
        )));
    }
    let k = zcta_index.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&v, &z) in y.iter().zip(zcta_index) {
        sums[z] += v;
        counts[z] += 1;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        let z = zcta_index[i];
        num += (y[i] - y_hat[i]).powi(2);
        if counts[z] >= 2 {
            den += (y[i] - sums[z] / counts[z] as f64).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    Ok(num / den)
}

/// [`rse`] restricted to rows whose response was observed.
pub fn rse_observed(y: &[Option<f64>], y_hat: &[f64], zcta_index: &[usize]) -> Result<f64> {
    if y.len() != y_hat.len() || y.len() != zcta_index.len() {
        return Err(Error::Contract("length mismatch".into()));
    }
    let rows: Vec<usize> = (0..y.len()).filter(|&r| y[r].is_some()).collect();
    rse(
        &rows.iter().map(|&r| y[r].unwrap()).collect::<Vec<_>>(),
        &rows.iter().map(|&r| y_hat[r]).collect::<Vec<_>>(),
        &rows.iter().map(|&r| zcta_index[r]).collect::<Vec<_>>(),
    )
}

/// Within-area means for one ZCTA. Means over zero rows are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZctaAggregate {
    pub zcta_id: String,
    pub n_facilities: usize,
    pub variables: Vec<Option<f64>>,
    pub log_shr_observed: Option<f64>,
    pub log_shr_fitted: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One aggregate per ZCTA of the table, in table order, including ZCTAs
/// without facilities.
pub fn zcta_aggregates(table: &DesignTable, fitted: &[f64]) -> Result<Vec<ZctaAggregate>> {
    if fitted.len() != table.rows.len() {
        return Err(Error::Contract(format!(
            "{} fitted values for {} rows",
            fitted.len(),
            table.rows.len()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); table.zctas.len()];
    for (r, row) in table.rows.iter().enumerate() {
        members[row.zcta_index].push(r);
    }
    let fpl = table.variables.len() - 1;
    Ok(table
        .zctas
        .iter()
        .zip(&members)
        .map(|(z, rows)| {
            let variables = (0..table.variables.len())
                .map(|j| {
                    if j == fpl {
                        z.fpl_score
                    } else {
                        mean(rows.iter().filter_map(|&r| table.rows[r].values[j]))
                    }
                })
                .collect();
            ZctaAggregate {
                zcta_id: z.zcta_id.clone(),
                n_facilities: rows.len(),
                variables,
                log_shr_observed: mean(rows.iter().filter_map(|&r| table.rows[r].shr.map(f64::ln))),
                log_shr_fitted: mean(rows.iter().map(|&r| fitted[r])),
            }
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Writes [`zcta_aggregates`] as CSV: `zcta_id, n_facilities, <variables>,
/// log_shr_observed, log_shr_fitted`.
pub fn export_zcta_aggregates(
    table: &DesignTable,
    fitted: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let aggregates = zcta_aggregates(table, fitted)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["zcta_id".to_string(), "n_facilities".to_string()];
    header.extend(table.variables.iter().cloned());
    header.extend(["log_shr_observed".to_string(), "log_shr_fitted".to_string()]);
    w.write_record(&header)?;
    for a in aggregates {
        let mut rec = vec![a.zcta_id, a.n_facilities.to_string()];
        rec.extend(a.variables.into_iter().map(cell));
        rec.push(cell(a.log_shr_observed));
        rec.push(cell(a.log_shr_fitted));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-facility fitted values: `facility_id, zcta_id, log_shr_observed,
/// log_shr_fitted`.
pub fn write_fitted(table: &DesignTable, fitted: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if fitted.len() != table.rows.len() {
        return Err(Error::Contract("fitted values not aligned to rows".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "facility_id",
        "zcta_id",
        "log_shr_observed",
        "log_shr_fitted",
    ])?;
    for (row, f) in table.rows.iter().zip(fitted) {
        w.write_record([
            row.facility_id.clone(),
            row.zcta_id.clone(),
            cell(row.shr.map(f64::ln)),
            f.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{join_zcta, Dataset, FacilityRecord, ZctaRecord};

    #[test]
    fn perfect_fit_and_persistence_baseline() {
        let y = [0.1, 0.5, -0.2, 0.4, 0.9, 1.3];
        let z = [0, 0, 1, 1, 1, 2];
        assert_eq!(rse(&y, &y, &z).unwrap(), 0.0);
        let baseline = [0.3, 0.3, 1.1 / 3.0, 1.1 / 3.0, 1.1 / 3.0, 1.3];
        assert!((rse(&y, &baseline, &z).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_row_areas_only_is_degenerate() {
        assert!(matches!(
            rse(&[1.0, 2.0], &[1.0, 2.0], &[0, 1]),
            Err(Error::DegenerateBaseline)
        ));
        assert!(matches!(
            rse(&[1.0, 1.0], &[1.0, 2.0], &[0, 0]),
            Err(Error::DegenerateBaseline)
        ));
    }

    #[test]
    fn observed_rows_only() {
        let y = [Some(0.1), None, Some(0.5), Some(0.0)];
        let full = rse_observed(&y, &[0.2, 99.0, 0.4, 0.0], &[0, 0, 0, 1]).unwrap();
        let direct = rse(&[0.1, 0.5, 0.0], &[0.2, 0.4, 0.0], &[0, 0, 1]).unwrap();
        assert_eq!(full, direct);
    }

    fn table() -> DesignTable {
        let fac = |id: &str, z: &str, shr: Option<f64>, c: f64| FacilityRecord {
            facility_id: id.into(),
            zcta_id: z.into(),
            latitude: 28.0,
            longitude: -82.0,
            covariates: vec![Some(c); 6],
            shr,
        };
        let zcta = |id: &str| ZctaRecord {
            zcta_id: id.into(),
            centroid_latitude: 28.0,
            centroid_longitude: -82.0,
            population: 100,
            fpl_score: Some(0.5),
        };
        let ds = Dataset::new(
            vec![
                fac("a", "z1", Some(0.2f64.exp()), 1.0),
                fac("b", "z1", Some(0.4f64.exp()), 3.0),
                fac("c", "z2", Some(0.7f64.exp()), 5.0),
                fac("d", "z2", None, 7.0),
            ],
            vec![zcta("z1"), zcta("z2"), zcta("z3")],
        );
        join_zcta(&ds).unwrap()
    }

    #[test]
    fn aggregates_average_within_zcta() {
        let t = table();
        let agg = zcta_aggregates(&t, &[0.1, 0.2, 0.3, 0.5]).unwrap();
        assert_eq!(agg.len(), 3);
        assert!((agg[0].log_shr_observed.unwrap() - 0.3).abs() < 1e-12);
        assert!((agg[1].log_shr_observed.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(agg[0].variables[0], Some(2.0));
        assert!((agg[1].log_shr_fitted.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(agg[2].n_facilities, 0);
        assert_eq!(agg[2].log_shr_observed, None);
        assert_eq!(agg[2].variables[6], Some(0.5));
    }

    #[test]
    fn export_writes_every_zcta() {
        let t = table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.csv");
        export_zcta_aggregates(&t, &[0.1, 0.2, 0.3, 0.5], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("zcta_id,n_facilities,pct_diabetes_primary"));
        assert!(lines[0].ends_with("fpl_score,log_shr_observed,log_shr_fitted"));
        assert!(lines[3].starts_with("z3,0,NA"));
    }
}
