use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub delimiter: char,
    /// Column holding the label; `None` means the last column.
    pub label_column: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: ',',
            label_column: None,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, opts)
}

/// Parses delimited text. Row numbers in errors are 1-based file lines.
///
/// A first line that does not parse as numbers is taken as a header.
pub fn parse_dataset(text: &str, opts: LoadOptions) -> Result<Dataset> {
    let mut width: Option<usize> = None;
    let mut samples = Vec::new();
    let mut feature_dim = 0;
    let mut first = true;

    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(opts.delimiter).map(str::trim).collect();
        let parsed: Vec<Option<f64>> = cells.iter().map(|c| c.parse::<f64>().ok()).collect();
        if first {
            first = false;
            if parsed.iter().any(Option::is_none) {
                continue;
            }
        }
        match width {
            None => {
                if cells.len() < 2 {
                    return Err(Error::Parse {
                        row,
                        message: "need at least one feature and a label".into(),
                    });
                }
                width = Some(cells.len());
                feature_dim = cells.len() - 1;
            }
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    row,
                    message: format!("{} columns, expected {w}", cells.len()),
                })
            }
            Some(_) => {}
        }
        let w = cells.len();
        let label_col = opts.label_column.unwrap_or(w - 1);
        if label_col >= w {
            return Err(Error::Parse {
                row,
                message: format!("label column {label_col} out of range for {w} columns"),
            });
        }
        let mut features = Vec::with_capacity(w - 1);
        let mut label = None;
        for (j, (cell, v)) in cells.iter().zip(&parsed).enumerate() {
            let v = v.ok_or_else(|| Error::Parse {
                row,
                message: format!("column {j}: `{cell}` is not a number"),
            })?;
            if j == label_col {
                label = Some(Label::from_sign(v).ok_or_else(|| Error::Parse {
                    row,
                    message: format!("label {v} not in {{0, 1}} or {{-1, 1}}"),
                })?);
            } else {
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        message: format!("column {j} is not finite"),
                    });
                }
                features.push(v);
            }
        }
        samples.push(Sample::new(features, label.expect("label column visited")));
    }
    Dataset::from_samples(feature_dim, samples)
}

/// Parses unlabeled numeric rows, skipping a non-numeric first line.
pub fn parse_rows(text: &str, delimiter: char) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut first = true;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Vec<Option<f64>> = line.split(delimiter).map(|c| c.trim().parse::<f64>().ok()).collect();
        if std::mem::take(&mut first) && parsed.iter().any(Option::is_none) {
            continue;
        }
        let values = parsed
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    row,
                    message: format!("column {j} is not a finite number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(prev) = rows.first() {
            if prev.len() != values.len() {
                return Err(Error::Parse {
                    row,
                    message: format!("{} columns, expected {}", values.len(), prev.len()),
                });
            }
        }
        rows.push(values);
    }
    Ok(rows)
}

/// Features then label (`-1`/`1`), comma separated, no header.
///
/// Values use the shortest representation that parses back to the same bits.
pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    for s in ds.samples() {
        for v in &s.features {
            write!(out, "{v},").expect("writing to a String");
        }
        writeln!(out, "{}", s.label.sign()).expect("writing to a String");
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_dataset(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn unlabeled_rows_skip_header_and_check_width() {
        let rows = parse_rows("a,b\n1,2\n3.5,-4\n", ',').unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.5, -4.0]]);
        assert!(matches!(parse_rows("1,2\n3\n", ','), Err(Error::Parse { row: 2, .. })));
        assert!(parse_rows("1,2\nx,3\n", ',').is_err());
    }
    use crate::rng;

    #[test]
    fn zero_one_labels_map_to_signs() {
        let ds = parse_dataset("1,2,0\n3,4,0\n5,6,1\n", LoadOptions::default()).unwrap();
        assert_eq!((ds.n_normal(), ds.n_anomalous()), (2, 1));
        assert_eq!(ds.sample(2).features, vec![5.0, 6.0]);
    }

    #[test]
    fn header_is_skipped_and_label_column_configurable() {
        let text = "label;a;b\n-1;0.5;1.5\n1;2;3\n";
        let opts = LoadOptions {
            delimiter: ';',
            label_column: Some(0),
        };
        let ds = parse_dataset(text, opts).unwrap();
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.sample(1).label, Label::Anomalous);
    }

    #[test]
    fn ragged_row_is_named() {
        let text = "1,2,3,4,0\n1,2,3,4,1\n1,2,3,1\n";
        match parse_dataset(text, LoadOptions::default()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_cells_and_labels_are_named() {
        let e = parse_dataset("1,2,0\n1,x,1\n", LoadOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 2, .. }));
        let e = parse_dataset("1,2,0\n1,2,2\n", LoadOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 2, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = load_dataset("/nonexistent/nowhere.csv", LoadOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut r = rng::seeded(11);
        let samples: Vec<Sample> = (0..50)
            .map(|i| {
                let f = (0..8).map(|_| r.random::<f64>() * 1e3 - 500.0).collect();
                let label = if i % 7 == 0 { Label::Anomalous } else { Label::Normal };
                Sample::new(f, label)
            })
            .collect();
        let ds = Dataset::from_samples(8, samples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path, LoadOptions::default()).unwrap();
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back, ds);
    }
}
