//! Telemetry CSV ingest/emit and report writers.
//!
//! Telemetry columns: `t,arrival_t,y_alt,y_range,y_vz`, then optionally the
//! commanded net acceleration `acc_x,acc_y,acc_z` and the truth state
//! `truth_x,truth_y,truth_z,truth_vx,truth_vy,truth_vz`. Floats are written
//! in shortest round-trip form so a file re-reads bit-exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{EkfRow, RiskReport, SignalRow};
use crate::error::{Error, Result};
use crate::measurement::{Measurement, StateVector};
use crate::sim::TelemetrySample;

const BASE: [&str; 5] = ["t", "arrival_t", "y_alt", "y_range", "y_vz"];
const ACCEL: [&str; 3] = ["acc_x", "acc_y", "acc_z"];
const TRUTH: [&str; 6] = ["truth_x", "truth_y", "truth_z", "truth_vx", "truth_vy", "truth_vz"];

pub fn write_telemetry<W: Write>(w: W, samples: &[TelemetrySample], emit_truth: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = BASE.iter().chain(ACCEL.iter()).copied().collect();
    if emit_truth {
        header.extend(TRUTH);
    }
    out.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = vec![s.t.to_string(), s.arrival_t.to_string()];
        rec.extend(s.y.0.iter().map(|v| v.to_string()));
        rec.extend(s.accel_cmd.iter().map(|v| v.to_string()));
        if emit_truth {
            let truth = s.truth.ok_or_else(|| Error::InvalidState("truth requested but absent".into()))?;
            rec.extend(truth.0.iter().map(|v| v.to_string()));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_telemetry_file(path: &Path, samples: &[TelemetrySample], emit_truth: bool) -> Result<()> {
    write_telemetry(File::create(path)?, samples, emit_truth)
}

fn column_set(header: &csv::StringRecord, names: &[&str], required: bool) -> Result<Option<Vec<usize>>> {
    let idx: Vec<Option<usize>> = names.iter().map(|n| header.iter().position(|h| h.trim() == *n)).collect();
    if idx.iter().all(Option::is_some) {
        return Ok(Some(idx.into_iter().flatten().collect()));
    }
    if !required && idx.iter().all(Option::is_none) {
        return Ok(None);
    }
    let missing = names.iter().zip(&idx).find(|(_, i)| i.is_none()).map(|(n, _)| *n).unwrap_or_default();
    Err(Error::Input { line: 1, msg: format!("missing column `{missing}`") })
}

/// Parses telemetry. Rows must arrive in nondecreasing `arrival_t`.
/// Non-finite measurements are passed through; the pipeline skips them.
pub fn read_telemetry<R: Read>(r: R) -> Result<Vec<TelemetrySample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers()?.clone();
    let base = column_set(&header, &BASE, true)?.expect("required columns");
    let accel = column_set(&header, &ACCEL, false)?;
    let truth = column_set(&header, &TRUTH, false)?;
    for h in header.iter() {
        let h = h.trim();
        if !BASE.contains(&h) && !ACCEL.contains(&h) && !TRUTH.contains(&h) {
            return Err(Error::Input { line: 1, msg: format!("unexpected column `{h}`") });
        }
    }
    let mut out: Vec<TelemetrySample> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Input { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::Input {
                line,
                msg: format!("non-numeric value `{raw}` in column `{}`", &header[i]),
            })
        };
        let t = field(base[0])?;
        let arrival_t = field(base[1])?;
        if !t.is_finite() || !arrival_t.is_finite() {
            return Err(Error::Input { line, msg: "timestamps must be finite".into() });
        }
        if arrival_t < t {
            return Err(Error::Input { line, msg: format!("arrival_t {arrival_t} precedes t {t}") });
        }
        if let Some(prev) = out.last() {
            if arrival_t < prev.arrival_t {
                return Err(Error::Input {
                    line,
                    msg: format!("non-monotone arrival_t: {arrival_t} after {}", prev.arrival_t),
                });
            }
        }
        let y = Measurement::new(field(base[2])?, field(base[3])?, field(base[4])?);
        let accel_cmd = match &accel {
            Some(c) => Vector3::new(field(c[0])?, field(c[1])?, field(c[2])?),
            None => Vector3::zeros(),
        };
        let truth = match &truth {
            Some(c) => {
                let mut a = [0.0; 6];
                for (k, &i) in c.iter().enumerate() {
                    a[k] = field(i)?;
                }
                Some(StateVector::from_array(a))
            }
            None => None,
        };
        out.push(TelemetrySample { t, arrival_t, y, accel_cmd, truth });
    }
    Ok(out)
}

pub fn read_telemetry_file(path: &Path) -> Result<Vec<TelemetrySample>> {
    read_telemetry(File::open(path)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_signals<W: Write>(w: W, rows: &[SignalRow], modes: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> =
        ["t", "lambda_1", "lambda_2", "lambda_3", "lambda_norm", "z", "mode"].map(String::from).to_vec();
    header.extend((0..modes).map(|j| format!("p_{j}")));
    header.extend((0..modes).map(|j| format!("pre_p_{j}")));
    header.extend(["hazard_prob", "mfpt", "lyapunov", "nis", "costate_alarm", "ekf_alarm"].map(String::from));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.lambda.iter().map(|v| v.to_string()));
        rec.push(r.lambda_norm.to_string());
        rec.push(r.z.to_string());
        rec.push(r.mode.map_or_else(String::new, |m| m.to_string()));
        for j in 0..modes {
            rec.push(opt(r.probs.get(j).copied()));
        }
        for j in 0..modes {
            rec.push(opt(r.pre_correction.get(j).copied()));
        }
        rec.push(opt(r.hazard_prob));
        rec.push(opt(r.mfpt));
        rec.push(r.lyapunov.to_string());
        rec.push(r.nis.to_string());
        rec.push(u8::from(r.costate_alarm).to_string());
        rec.push(u8::from(r.ekf_alarm).to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ekf_rows<W: Write>(w: W, rows: &[EkfRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "innov_alt", "innov_range", "innov_vz", "nis", "ekf_alarm"])?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.innovation.iter().map(|v| v.to_string()));
        rec.push(r.nis.to_string());
        rec.push(u8::from(r.alarm).to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes `signals.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, report: &RiskReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_signals(File::create(dir.join("signals.csv"))?, &report.rows, report.summary.config_echo.modes)?;
    write_json(&dir.join("summary.json"), &report.summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_descent, DescentConfig, FaultConfig};

    fn sample_telemetry() -> Vec<TelemetrySample> {
        let cfg = DescentConfig { seed: 11, ..DescentConfig::default() };
        let mut t = simulate_descent(&cfg, &FaultConfig::none()).unwrap().telemetry;
        t.truncate(500);
        t
    }

    #[test]
    fn round_trip_is_lossless() {
        let tel = sample_telemetry();
        let mut buf = Vec::new();
        write_telemetry(&mut buf, &tel, true).unwrap();
        assert_eq!(read_telemetry(buf.as_slice()).unwrap(), tel);

        let mut buf = Vec::new();
        write_telemetry(&mut buf, &tel, false).unwrap();
        let back = read_telemetry(buf.as_slice()).unwrap();
        assert!(back.iter().zip(&tel).all(|(a, b)| a.y == b.y && a.t == b.t && a.truth.is_none()));
    }

    #[test]
    fn accel_columns_are_optional() {
        let csv = "t,arrival_t,y_alt,y_range,y_vz\n0,0,100,200,-3\n0.1,0.1,99.7,199.5,-3\n";
        let tel = read_telemetry(csv.as_bytes()).unwrap();
        assert_eq!(tel.len(), 2);
        assert_eq!(tel[1].accel_cmd, Vector3::zeros());
    }

    #[test]
    fn shuffled_arrivals_rejected_with_line() {
        let csv = "t,arrival_t,y_alt,y_range,y_vz\n0,0,1,1,1\n0.2,0.2,1,1,1\n0.1,0.1,1,1,1\n";
        match read_telemetry(csv.as_bytes()) {
            Err(Error::Input { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("non-monotone"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_fields_report_line() {
        let csv = "t,arrival_t,y_alt,y_range,y_vz\n0,0,1,1,1\n0.1,0.1,abc,1,1\n";
        assert!(matches!(read_telemetry(csv.as_bytes()), Err(Error::Input { line: 3, .. })));
        let csv = "t,arrival_t,y_alt,y_vz\n0,0,1,1\n";
        match read_telemetry(csv.as_bytes()) {
            Err(Error::Input { line: 1, msg }) => assert!(msg.contains("y_range")),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "t,arrival_t,y_alt,y_range,y_vz,acc_x\n0,0,1,1,1,0\n";
        assert!(read_telemetry(csv.as_bytes()).is_err());
    }

    #[test]
    fn nan_measurement_is_parsed_for_pipeline_to_skip() {
        let csv = "t,arrival_t,y_alt,y_range,y_vz\n0,0,1,1,1\n0.1,0.1,NaN,1,1\n";
        let tel = read_telemetry(csv.as_bytes()).unwrap();
        assert!(tel[1].y.altitude().is_nan());
    }
}
