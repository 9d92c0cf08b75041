//! CSV storage of trained proposal weights.
//!
//! One row per time step: `lambda,t,deg_1,...,deg_{k_max},deg_over`.

use std::path::Path;

use netgrow::ce_trainer::{DegreeHistogramFeatures, FeatureMap, ProposalWeights};

use crate::error::CliError;

pub fn header(k_max: usize) -> Vec<String> {
    let mut h = vec!["lambda".to_string(), "t".to_string()];
    h.extend((1..=k_max).map(|k| format!("deg_{k}")));
    h.push("deg_over".into());
    h
}

pub fn write_weights(path: &Path, weights: &ProposalWeights) -> Result<(), CliError> {
    let k_max = weights.dim().saturating_sub(1);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(k_max))?;
    for (t, row) in weights.rows() {
        let mut record = vec![weights.lambda().to_string(), t.to_string()];
        record.extend(row.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a weights file written by [`write_weights`]; rows must cover
/// consecutive times at a single λ.
pub fn read_weights(path: &Path) -> Result<ProposalWeights, CliError> {
    let data = |m: String| CliError::Data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path)?;
    let columns = r.headers()?.len();
    if columns < 4 {
        return Err(data(format!("expected at least 4 columns, found {columns}")));
    }
    let k_max = columns - 3;
    if r.headers()?.iter().collect::<Vec<_>>() != header(k_max) {
        return Err(data("unexpected header".into()));
    }
    let mut lambda = None;
    let mut t0 = None;
    let mut rows = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let num = |j: usize| -> Result<f64, CliError> {
            record[j]
                .parse::<f64>()
                .map_err(|e| data(format!("line {line}, column {}: {e}", j + 1)))
        };
        let l = num(0)?;
        let t: usize = record[1]
            .parse()
            .map_err(|e| data(format!("line {line}, column 2: {e}")))?;
        match lambda {
            None => lambda = Some(l),
            Some(prev) if prev != l => return Err(data(format!("line {line}: mixed lambda values"))),
            _ => {}
        }
        let expected = t0.get_or_insert(t).to_owned() + rows.len();
        if t != expected {
            return Err(data(format!("line {line}: expected t = {expected}, found {t}")));
        }
        rows.push((2..columns).map(num).collect::<Result<Vec<_>, _>>()?);
    }
    let (Some(lambda), Some(t0)) = (lambda, t0) else {
        return Err(data("no weight rows".into()));
    };
    let feature = DegreeHistogramFeatures { k_max }.name();
    ProposalWeights::from_rows(t0, rows, lambda, feature).map_err(|e| data(e.to_string()))
}
