use super::SeriesRecord;
use crate::error::{Error, Result};

/// Splits an `M×T` multivariate series into `M` univariate records with ids
/// `base_id#m`.
pub fn s3_flatten(rows: &[Vec<f64>], base_id: &str) -> Result<Vec<SeriesRecord>> {
    let Some(first) = rows.first() else {
        return Err(Error::Data(format!("{base_id:?} has no variates")));
    };
    if let Some((m, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != first.len()) {
        return Err(Error::Data(format!(
            "{base_id:?} is ragged: variate {m} has {} points, variate 0 has {}",
            r.len(),
            first.len()
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(m, r)| {
            let rec = SeriesRecord::new(format!("{base_id}#{m}"), r.clone());
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}
