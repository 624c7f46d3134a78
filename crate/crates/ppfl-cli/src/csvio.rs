//! Load-series CSV files.
//!
//! Schema (bit-exact header):
//! `timestamp,load_kwh,ghi,temperature,wind_speed,floor_area,window_area,roof_area,cooling_capacity`
//! with ISO-8601 timestamps on a strict 15-minute grid. Interval-of-day
//! and day-of-week indices are derived from the timestamp, not stored.
//! Static building columns must be constant within a file.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::NaiveDateTime;

use ppfl_core::data::{BuildingStatics, LoadSeries};

pub const CSV_HEADER: &str =
    "timestamp,load_kwh,ghi,temperature,wind_speed,floor_area,window_area,roof_area,cooling_capacity";

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Write one client's series. Deterministic formatting: identical series
/// produce identical bytes.
pub fn write_series(path: &Path, series: &LoadSeries) -> Result<()> {
    let mut out = String::with_capacity(series.len() * 96 + 128);
    out.push_str(CSV_HEADER);
    out.push('\n');
    let s = &series.statics;
    for row in 0..series.len() {
        let ts = chrono::DateTime::from_timestamp(series.timestamp(row), 0)
            .context("timestamp out of datetime range")?;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            ts.naive_utc().format(TS_FORMAT),
            series.load[row],
            series.ghi[row],
            series.temperature[row],
            series.wind_speed[row],
            s.floor_area,
            s.window_area,
            s.roof_area,
            s.cooling_capacity,
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_cell(cell: &str, row: usize, col: &str) -> Result<f64> {
    let value: f64 = cell
        .trim()
        .parse()
        .with_context(|| format!("row {row}: column '{col}' is not numeric: '{cell}'"))?;
    if !value.is_finite() {
        bail!("row {row}: column '{col}' is not finite");
    }
    Ok(value)
}

/// Read and validate one client's series. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn read_series(path: &Path, client_id: u32) -> Result<LoadSeries> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty file")?;
    if header.trim_end() != CSV_HEADER {
        bail!("header mismatch: expected '{CSV_HEADER}', got '{header}'");
    }

    let mut timestamps = Vec::new();
    let mut load = Vec::new();
    let mut ghi = Vec::new();
    let mut temperature = Vec::new();
    let mut wind = Vec::new();
    let mut statics: Option<BuildingStatics> = None;

    const COLS: [&str; 9] = [
        "timestamp",
        "load_kwh",
        "ghi",
        "temperature",
        "wind_speed",
        "floor_area",
        "window_area",
        "roof_area",
        "cooling_capacity",
    ];
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != COLS.len() {
            bail!("row {row}: expected {} columns, got {}", COLS.len(), cells.len());
        }
        let ts = NaiveDateTime::parse_from_str(cells[0].trim(), TS_FORMAT)
            .with_context(|| format!("row {row}: bad timestamp '{}'", cells[0]))?;
        let epoch = ts.and_utc().timestamp();
        if let Some(prev) = timestamps.last() {
            let expected = prev + ppfl_core::data::STEP_SECONDS;
            if epoch != expected {
                let expected_iso = chrono::DateTime::from_timestamp(expected, 0)
                    .map(|d| d.naive_utc().format(TS_FORMAT).to_string())
                    .unwrap_or_else(|| expected.to_string());
                bail!(
                    "row {row}: timestamp gap on the 15-minute grid: expected {expected_iso}, got {}",
                    cells[0].trim()
                );
            }
        }
        timestamps.push(epoch);
        load.push(parse_cell(cells[1], row, COLS[1])?);
        ghi.push(parse_cell(cells[2], row, COLS[2])?);
        temperature.push(parse_cell(cells[3], row, COLS[3])?);
        wind.push(parse_cell(cells[4], row, COLS[4])?);
        let row_statics = BuildingStatics {
            floor_area: parse_cell(cells[5], row, COLS[5])?,
            window_area: parse_cell(cells[6], row, COLS[6])?,
            roof_area: parse_cell(cells[7], row, COLS[7])?,
            cooling_capacity: parse_cell(cells[8], row, COLS[8])?,
        };
        match &statics {
            None => statics = Some(row_statics),
            Some(first) => {
                if *first != row_statics {
                    bail!("row {row}: static building features change within the file");
                }
            }
        }
    }
    let statics = statics.context("file has a header but no data rows")?;
    let series = LoadSeries::new(client_id, &timestamps, load, ghi, temperature, wind, statics)
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(series)
}

/// Load `client_*.csv` files from a directory, ordered by client number.
pub fn load_data_dir(dir: &Path) -> Result<Vec<LoadSeries>> {
    let mut found: Vec<(u32, std::path::PathBuf)> = Vec::new();
    for entry in
        fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?
    {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(rest) = name.strip_prefix("client_") {
            if let Some(idx) = rest.strip_suffix(".csv") {
                if let Ok(id) = idx.parse::<u32>() {
                    found.push((id, path));
                }
            }
        }
    }
    if found.is_empty() {
        bail!("no client_*.csv files in {}", dir.display());
    }
    found.sort_by_key(|(id, _)| *id);
    found.into_iter().map(|(id, path)| read_series(&path, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppfl_core::data::synth_generate;

    #[test]
    fn round_trip_preserves_written_values() {
        let dir = tempfile::tempdir().unwrap();
        let series = &synth_generate(1, 2, 3).unwrap()[0];
        let path = dir.path().join("client_1.csv");
        write_series(&path, series).unwrap();
        let back = read_series(&path, 1).unwrap();
        assert_eq!(back.len(), series.len());
        assert_eq!(back.start, series.start);
        // Values round-trip through the 6-decimal formatting.
        for (a, b) in back.load.iter().zip(&series.load) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_gap_and_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let series = &synth_generate(1, 2, 3).unwrap()[0];
        let path = dir.path().join("client_1.csv");
        write_series(&path, series).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // Drop data row 3 to create a gap at that position.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(3);
        fs::write(&path, lines.join("\n")).unwrap();
        let err = format!("{:#}", read_series(&path, 1).unwrap_err());
        assert!(err.contains("row 3"), "{err}");
        assert!(err.contains("gap"), "{err}");
    }

    #[test]
    fn rejects_non_numeric_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("client_1.csv");
        let body = format!(
            "{CSV_HEADER}\n2021-01-04T00:00:00,1.0,0.0,10.0,1.0,1.0,1.0,1.0,1.0\n2021-01-04T00:15:00,oops,0.0,10.0,1.0,1.0,1.0,1.0,1.0\n"
        );
        fs::write(&path, body).unwrap();
        let err = format!("{:#}", read_series(&path, 1).unwrap_err());
        assert!(err.contains("row 2") && err.contains("load_kwh"), "{err}");
    }

    #[test]
    fn rejects_header_mismatch_and_changing_statics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("client_1.csv");
        fs::write(&path, "time,load\n").unwrap();
        assert!(read_series(&path, 1).is_err());

        let body = format!(
            "{CSV_HEADER}\n2021-01-04T00:00:00,1.0,0.0,10.0,1.0,1.0,1.0,1.0,1.0\n2021-01-04T00:15:00,1.0,0.0,10.0,1.0,2.0,1.0,1.0,1.0\n"
        );
        fs::write(&path, body).unwrap();
        let err = format!("{:#}", read_series(&path, 1).unwrap_err());
        assert!(err.contains("static"), "{err}");
    }

    #[test]
    fn four_row_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("client_1.csv");
        let mut body = String::from(CSV_HEADER);
        body.push('\n');
        for i in 0..4 {
            body.push_str(&format!(
                "2021-01-04T{:02}:{:02}:00,5.5,0.0,10.0,1.0,1.0,1.0,1.0,1.0\n",
                (i * 15) / 60,
                (i * 15) % 60
            ));
        }
        fs::write(&path, body).unwrap();
        assert_eq!(read_series(&path, 1).unwrap().len(), 4);
    }
}
