//! Covariate-by-covariate state-space imputation of a whole dataset.

use crate::data::{Dataset, FPL_SCORE};
use crate::error::{Error, Result};
use crate::geo::{GeoConfig, LatLon, OrderedSeries};
use crate::ssm::{impute_series, LocalLevelParams};

/// Fit summary for one imputed variable.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableReport {
    pub variable: String,
    pub n_sites: usize,
    pub n_observed: usize,
    pub n_imputed: usize,
    /// `None` when nothing was missing and no model was fitted.
    pub params: Option<LocalLevelParams>,
    pub log_likelihood: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedDataset {
    pub dataset: Dataset,
    pub reports: Vec<VariableReport>,
}

/// Facility covariates followed by the ZCTA-level FPL score.
pub fn variable_names(ds: &Dataset) -> Vec<String> {
    let mut names = ds.covariate_names.clone();
    names.push(FPL_SCORE.to_string());
    names
}

/// Distance-ordered series for one variable: facility covariates are laid
/// out by facility site, the FPL score by ZCTA centroid.
pub fn variable_series(ds: &Dataset, variable: &str, cfg: &GeoConfig) -> Result<OrderedSeries> {
    if variable == FPL_SCORE {
        let ids: Vec<String> = ds.zctas.iter().map(|z| z.zcta_id.clone()).collect();
        let coords: Vec<LatLon> = ds
            .zctas
            .iter()
            .map(|z| LatLon::new(z.centroid_latitude, z.centroid_longitude))
            .collect();
        let values: Vec<Option<f64>> = ds.zctas.iter().map(|z| z.fpl_score).collect();
        return OrderedSeries::from_sites(&ids, &coords, &values, cfg);
    }
    let j = ds
        .covariate_names
        .iter()
        .position(|n| n == variable)
        .ok_or_else(|| Error::UnknownVariable(variable.to_string()))?;
    let ids: Vec<String> = ds
        .facilities
        .iter()
        .map(|f| f.facility_id.clone())
        .collect();
    let coords: Vec<LatLon> = ds
        .facilities
        .iter()
        .map(|f| LatLon::new(f.latitude, f.longitude))
        .collect();
    let values: Vec<Option<f64>> = ds.facilities.iter().map(|f| f.covariates[j]).collect();
    OrderedSeries::from_sites(&ids, &coords, &values, cfg)
}

fn impute_variable(
    ds: &Dataset,
    variable: &str,
    cfg: &GeoConfig,
) -> Result<(Vec<f64>, VariableReport)> {
    let series = variable_series(ds, variable, cfg)?;
    let mut report = VariableReport {
        variable: variable.to_string(),
        n_sites: series.len(),
        n_observed: series.n_observed,
        n_imputed: series.len() - series.n_observed,
        params: None,
        log_likelihood: None,
        warning: None,
    };
    if report.n_imputed == 0 {
        let values = series
            .values
            .iter()
            .map(|v| v.expect("complete"))
            .collect::<Vec<_>>();
        return Ok((series.to_source_order(&values), report));
    }
    let imp = impute_series(&series).map_err(|e| match e {
        Error::TooFewObservations { .. } | Error::NoObservations => {
            Error::Contract(format!("cannot impute `{variable}`: {e}"))
        }
        other => other,
    })?;
    report.params = Some(imp.fit.params);
    report.log_likelihood = Some(imp.fit.log_likelihood);
    report.warning = imp.fit.warning.clone();
    Ok((series.to_source_order(&imp.values), report))
}

/// Imputes every facility covariate along distance of the facility sites from
/// the reference centroid, and the FPL score along distance of the ZCTA
/// centroids. SHR is left untouched.
pub fn impute_dataset(ds: &Dataset, cfg: &GeoConfig) -> Result<ImputedDataset> {
    let mut out = ds.clone();
    let mut reports = Vec::new();
    for (j, name) in variable_names(ds).iter().enumerate() {
        let (filled, report) = impute_variable(ds, name, cfg)?;
        if name == FPL_SCORE {
            for (z, v) in out.zctas.iter_mut().zip(filled) {
                z.fpl_score = Some(v);
            }
        } else {
            for (f, v) in out.facilities.iter_mut().zip(filled) {
                f.covariates[j] = Some(v);
            }
        }
        reports.push(report);
    }
    Ok(ImputedDataset {
        dataset: out,
        reports,
    })
}
