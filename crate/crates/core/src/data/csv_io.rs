use std::path::Path;

use super::{DataError, DataKind, Dataset, Sample};

/// Rescales every feature column to `[0, 1]`. Constant columns map to 0.
pub fn minmax_normalize(rows: &mut [Vec<f64>]) {
    let Some(first) = rows.first() else {
        return;
    };
    for col in 0..first.len() {
        let lo = rows.iter().map(|r| r[col]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[col]).fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut() {
            r[col] = if hi > lo { (r[col] - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

/// Parses numeric CSV text into a normalized vector dataset. `label_column`
/// holds a non-negative integer class; every other column is a feature.
pub fn load_csv_str(text: &str, label_column: usize, has_header: bool, provenance: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| DataError::Csv { row, msg: e.to_string() })?;
        if rec.len() <= label_column {
            return Err(DataError::Csv {
                row,
                msg: format!("label column {label_column} missing from {} columns", rec.len()),
            });
        }
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(DataError::Csv {
                row,
                msg: "inconsistent column count".into(),
            });
        }
        let mut x = Vec::with_capacity(rec.len() - 1);
        for (column, cell) in rec.iter().enumerate() {
            let bad = || DataError::NonNumeric {
                row,
                column,
                value: cell.to_string(),
            };
            if column == label_column {
                let y: f64 = cell.parse().map_err(|_| bad())?;
                if y < 0.0 || y.fract() != 0.0 {
                    return Err(bad());
                }
                labels.push(y as usize);
            } else {
                let v: f64 = cell.parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                x.push(v);
            }
        }
        features.push(x);
    }
    if features.is_empty() {
        return Err(DataError::Empty(provenance.to_string()));
    }
    minmax_normalize(&mut features);
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let dim = features[0].len();
    Ok(Dataset {
        samples: features
            .into_iter()
            .zip(labels)
            .map(|(x, y)| Sample { x, y })
            .collect(),
        shape: vec![dim],
        num_classes,
        kind: DataKind::Vector,
        provenance: provenance.to_string(),
    })
}

pub fn load_csv(path: &Path, label_column: usize, has_header: bool) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_str(&text, label_column, has_header, &format!("csv:{}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_row_is_degenerate() {
        let d = load_csv_str("1,2,0\n", 2, false, "t").unwrap();
        assert_eq!(d.samples[0].x, vec![0.0, 0.0]);
        assert_eq!(d.samples[0].y, 0);
    }

    #[test]
    fn two_rows_span_unit_interval() {
        let d = load_csv_str("a,label\n0,1\n10,0\n", 1, true, "t").unwrap();
        assert_eq!(d.samples[0].x, vec![0.0]);
        assert_eq!(d.samples[1].x, vec![1.0]);
        assert_eq!(d.num_classes, 2);
    }

    #[test]
    fn errors_name_row_and_column() {
        match load_csv_str("1,2,0\n3,x,1\n", 2, false, "t") {
            Err(DataError::NonNumeric { row: 2, column: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_csv_str("", 0, false, "t"), Err(DataError::Empty(_))));
        assert!(matches!(load_csv_str("1,2,0.5\n", 2, false, "t"), Err(DataError::NonNumeric { .. })));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20)) {
            let mut once = rows.clone();
            minmax_normalize(&mut once);
            let mut twice = once.clone();
            minmax_normalize(&mut twice);
            for (a, b) in once.iter().flatten().zip(twice.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }
}
