//! Point-cloud CSV for external plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{Dataset, Label, Provenance};
use crate::error::{Error, Result};

pub const POINTS_HEADER: &str = "x,y,label,provenance,episode";

#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub x: f64,
    pub y: f64,
    pub label: Label,
    pub provenance: Provenance,
    /// Episode that produced a generated row.
    pub episode: Option<usize>,
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Original => "original",
        Provenance::Generated => "generated",
    }
}

/// Rows of `data` projected on `columns` (default `(0, 1)` for 2-D data).
///
/// `episodes[i]` belongs to the `i`-th generated row, in dataset order.
pub fn point_rows(data: &Dataset, episodes: &[usize], columns: Option<(usize, usize)>) -> Result<Vec<PointRow>> {
    let (cx, cy) = match columns {
        Some((a, b)) if a < data.feature_dim() && b < data.feature_dim() => (a, b),
        Some((a, b)) => {
            return Err(Error::InvalidArgument(format!(
                "columns ({a}, {b}) out of range for {} features",
                data.feature_dim()
            )))
        }
        None if data.feature_dim() == 2 => (0, 1),
        None => {
            return Err(Error::InvalidArgument(format!(
                "{}-D data needs an explicit column pair",
                data.feature_dim()
            )))
        }
    };
    let mut generated = episodes.iter();
    data.samples()
        .iter()
        .zip(data.provenance())
        .map(|(s, &p)| {
            let episode = match p {
                Provenance::Original => None,
                Provenance::Generated => Some(*generated.next().ok_or_else(|| {
                    Error::Shape("fewer episode tags than generated rows".into())
                })?),
            };
            Ok(PointRow {
                x: s.features[cx],
                y: s.features[cy],
                label: s.label,
                provenance: p,
                episode,
            })
        })
        .collect()
}

pub fn write_points(rows: &[PointRow]) -> String {
    let mut out = format!("{POINTS_HEADER}\n");
    for r in rows {
        let episode = r.episode.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{episode}",
            r.x,
            r.y,
            r.label.sign(),
            provenance_name(r.provenance)
        );
    }
    out
}

/// Writes the export and returns the number of rows.
pub fn export_points(
    data: &Dataset,
    episodes: &[usize],
    columns: Option<(usize, usize)>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let rows = point_rows(data, episodes, columns)?;
    fs::write(path, write_points(&rows)).map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

pub fn parse_points(text: &str) -> Result<Vec<PointRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let row = i + 1;
        let bad = |m: &str| Error::Parse {
            row,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad coordinate"));
        let label = f[2]
            .parse::<f64>()
            .ok()
            .and_then(Label::from_sign)
            .ok_or_else(|| bad("bad label"))?;
        let provenance = match f[3] {
            "original" => Provenance::Original,
            "generated" => Provenance::Generated,
            _ => return Err(bad("bad provenance")),
        };
        let episode = if f[4].is_empty() {
            None
        } else {
            Some(f[4].parse().map_err(|_| bad("bad episode"))?)
        };
        rows.push(PointRow {
            x: num(f[0])?,
            y: num(f[1])?,
            label,
            provenance,
            episode,
        });
    }
    Ok(rows)
}

pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<PointRow>> {
    let path = path.as_ref();
    parse_points(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    fn tiny() -> Dataset {
        let base = Dataset::from_samples(
            2,
            vec![
                Sample::new(vec![0.1, -0.3], Label::Normal),
                Sample::new(vec![1.0 / 3.0, 2.5], Label::Anomalous),
            ],
        )
        .unwrap();
        base.append_generated(vec![Sample::new(vec![1e-17, 7.25], Label::Anomalous)]).unwrap()
    }

    #[test]
    fn export_round_trips_exactly() {
        let rows = point_rows(&tiny(), &[4], None).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].episode, Some(4));
        assert_eq!(parse_points(&write_points(&rows)).unwrap(), rows);
    }

    #[test]
    fn higher_dimensions_need_columns() {
        let ds = Dataset::from_samples(3, vec![Sample::new(vec![1.0, 2.0, 3.0], Label::Normal)]).unwrap();
        assert!(point_rows(&ds, &[], None).is_err());
        assert_eq!(point_rows(&ds, &[], Some((2, 0))).unwrap()[0].x, 3.0);
        assert!(point_rows(&ds, &[], Some((0, 3))).is_err());
    }

    #[test]
    fn missing_episode_tags_are_an_error() {
        assert!(point_rows(&tiny(), &[], None).is_err());
    }
}
