//! CSV files written by the runner.

use std::io::Write;
use std::path::Path;

use sparkle_core::metrics::MetricsRow;

use crate::error::CliError;

pub const METRICS_HEADER: [&str; 9] = [
    "k",
    "grad_phi_sq",
    "cons_x",
    "cons_y",
    "cons_z",
    "err_y",
    "err_z",
    "est_err",
    "wall_ns",
];

/// 17 significant digits, enough to reproduce every `f64` exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            fmt_f64(r.grad_phi_sq),
            fmt_f64(r.cons_x),
            fmt_f64(r.cons_y),
            fmt_f64(r.cons_z),
            fmt_f64(r.err_y),
            fmt_f64(r.err_z),
            fmt_f64(r.est_err),
            r.wall_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))?;
    write_metrics(std::io::BufWriter::new(file), rows).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e.into()))
}

/// Parse a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(format!("unexpected header {header:?}"));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|e| format!("column {}: {e}", METRICS_HEADER[i]));
            Ok(MetricsRow {
                k: rec[0].parse().map_err(|e| format!("column k: {e}"))?,
                grad_phi_sq: f(1)?,
                cons_x: f(2)?,
                cons_y: f(3)?,
                cons_z: f(4)?,
                err_y: f(5)?,
                err_z: f(6)?,
                est_err: f(7)?,
                wall_ns: rec[8].parse().map_err(|e| format!("column wall_ns: {e}"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, -2.5e-17] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let row = MetricsRow {
            k: 10,
            grad_phi_sq: 0.5,
            cons_x: 0.0,
            cons_y: 1e-3,
            cons_z: 2.0,
            err_y: 3.0,
            err_z: 4.0,
            est_err: 5.0,
            wall_ns: 7,
        };
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("10,5.0000000000000000e-1,"));
        assert!(lines.next().is_none());
    }
}
