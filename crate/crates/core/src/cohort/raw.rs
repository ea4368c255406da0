//! Measurement-level cohort files.
//!
//! # JSON-lines layout
//!
//! The first line is `{"format_version": 1}`. Every other line is either a
//! per-patient header
//!
//! ```json
//! {"patient_id": "p1", "static": {"age": 61.0}, "action_bins": [0, 1, 0], "survived28": true}
//! ```
//!
//! or a measurement row
//!
//! ```json
//! {"patient_id": "p1", "time_h": 3.5, "feature": "heart_rate", "value": 88.0}
//! ```
//!
//! Rows may appear in any order. `time_h` is hours since admission.
//!
//! # Wide CSV layout
//!
//! First line `# format_version=1`, then a header with the columns
//! `patient_id,time_h,action,survived28`, followed by every static feature
//! and then every temporal feature in schema order. One row per
//! observation time; empty cells mean "not measured". `action` is the
//! binary treatment flag for the time bin containing `time_h` (any 1 in a
//! bin marks the bin treated). Static cells take the first non-empty value
//! per patient.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::schema::FeatureSchema;
use crate::error::{Error, Result};

pub const COHORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub time_h: f64,
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPatient {
    pub patient_id: String,
    pub statics: BTreeMap<String, f64>,
    /// One entry per time bin; bin `t`'s action covers `[t, t+1)`.
    pub action_bins: Vec<u8>,
    pub survived28: bool,
    /// Sorted by time.
    pub measurements: Vec<Measurement>,
}

impl RawPatient {
    /// Hours of data, measured from admission to the last observation.
    pub fn duration_h(&self) -> Option<f64> {
        self.measurements.iter().map(|m| m.time_h).fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.max(t))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCohort {
    pub schema: FeatureSchema,
    pub patients: Vec<RawPatient>,
}

#[derive(Deserialize)]
struct Header {
    patient_id: String,
    #[serde(rename = "static")]
    statics: BTreeMap<String, f64>,
    action_bins: Vec<u8>,
    survived28: bool,
}

#[derive(Deserialize)]
struct Row {
    patient_id: String,
    time_h: f64,
    feature: String,
    value: f64,
}

fn require(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Result<()> {
    for k in keys {
        if !obj.contains_key(*k) {
            return Err(Error::MissingColumn(format!("missing column: {k}")));
        }
    }
    Ok(())
}

fn check_version(v: &Value, line: usize) -> Result<()> {
    match v.get("format_version").and_then(Value::as_u64) {
        Some(x) if x == COHORT_FORMAT_VERSION as u64 => Ok(()),
        Some(x) => Err(Error::Parse { line, message: format!("unsupported format_version {x}") }),
        None => Err(Error::Parse { line, message: "first line must carry format_version".into() }),
    }
}

/// Read a cohort from `.jsonl` or `.csv` (chosen by extension).
pub fn ingest(path: &Path, schema: &FeatureSchema) -> Result<RawCohort> {
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(BufReader::new(file), schema),
        _ => read_jsonl(BufReader::new(file), schema),
    }
}

pub fn read_jsonl<R: BufRead>(reader: R, schema: &FeatureSchema) -> Result<RawCohort> {
    let mut order: Vec<String> = Vec::new();
    let mut headers: HashMap<String, Header> = HashMap::new();
    let mut rows: HashMap<String, Vec<Measurement>> = HashMap::new();
    let mut saw_version = false;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if !saw_version {
            check_version(&v, lineno)?;
            saw_version = true;
            continue;
        }
        let obj = v.as_object().ok_or_else(|| Error::Parse { line: lineno, message: "expected an object".into() })?;
        if obj.contains_key("static") || obj.contains_key("survived28") || obj.contains_key("action_bins") {
            require(obj, &["patient_id", "static", "action_bins", "survived28"])?;
            let h: Header =
                serde_json::from_value(v).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
            if h.action_bins.iter().any(|&a| a > 1) {
                return Err(Error::Parse { line: lineno, message: "actions must be 0 or 1".into() });
            }
            if headers.contains_key(&h.patient_id) {
                return Err(Error::Parse { line: lineno, message: format!("duplicate header for {}", h.patient_id) });
            }
            if !rows.contains_key(&h.patient_id) {
                order.push(h.patient_id.clone());
                rows.insert(h.patient_id.clone(), Vec::new());
            }
            headers.insert(h.patient_id.clone(), h);
        } else {
            require(obj, &["patient_id", "time_h", "feature", "value"])?;
            let r: Row = serde_json::from_value(v).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
            if !r.time_h.is_finite() || r.time_h < 0.0 {
                return Err(Error::Parse { line: lineno, message: format!("invalid time_h {}", r.time_h) });
            }
            let entry = rows.entry(r.patient_id.clone()).or_insert_with(|| {
                order.push(r.patient_id.clone());
                Vec::new()
            });
            entry.push(Measurement { time_h: r.time_h, feature: r.feature, value: r.value });
        }
    }
    if !saw_version {
        return Err(Error::input("empty cohort file"));
    }

    let mut patients = Vec::with_capacity(order.len());
    for id in order {
        let h = headers.remove(&id).ok_or_else(|| Error::input(format!("patient {id} has measurements but no header row")))?;
        let measurements = rows.remove(&id).unwrap_or_default();
        patients.push(assemble(h.patient_id, h.statics, h.action_bins, h.survived28, measurements));
    }
    finish(schema, patients)
}

fn assemble(
    patient_id: String,
    statics: BTreeMap<String, f64>,
    action_bins: Vec<u8>,
    survived28: bool,
    mut measurements: Vec<Measurement>,
) -> RawPatient {
    measurements.sort_by(|a, b| a.time_h.total_cmp(&b.time_h));
    RawPatient { patient_id, statics, action_bins, survived28, measurements }
}

fn finish(schema: &FeatureSchema, patients: Vec<RawPatient>) -> Result<RawCohort> {
    for f in &schema.temporal_features {
        if !patients.iter().any(|p| p.measurements.iter().any(|m| m.feature == f.name)) {
            return Err(Error::MissingColumn(format!("missing column: {}", f.name)));
        }
    }
    for f in &schema.static_features {
        if !patients.iter().any(|p| p.statics.contains_key(&f.name)) {
            return Err(Error::MissingColumn(format!("missing column: {}", f.name)));
        }
    }
    Ok(RawCohort { schema: schema.clone(), patients })
}

fn parse_cell(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Parse { line, message: format!("column {col}: cannot parse {s:?}") })
}

fn parse_bool(s: &str, line: usize) -> Result<Option<bool>> {
    match s.trim() {
        "" => Ok(None),
        "1" | "true" | "True" => Ok(Some(true)),
        "0" | "false" | "False" => Ok(Some(false)),
        other => Err(Error::Parse { line, message: format!("survived28: cannot parse {other:?}") }),
    }
}

pub fn read_csv<R: BufRead>(mut reader: R, schema: &FeatureSchema) -> Result<RawCohort> {
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    let version = first
        .trim()
        .strip_prefix("# format_version=")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Parse { line: 1, message: "first line must be `# format_version=N`".into() })?;
    if version != COHORT_FORMAT_VERSION {
        return Err(Error::Parse { line: 1, message: format!("unsupported format_version {version}") });
    }

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(format!("missing column: {name}")))
    };
    let pid_c = col("patient_id")?;
    let time_c = col("time_h")?;
    let action_c = col("action")?;
    let surv_c = col("survived28")?;
    let static_c: Vec<(String, usize)> =
        schema.static_features.iter().map(|f| Ok((f.name.clone(), col(&f.name)?))).collect::<Result<_>>()?;
    let temporal_c: Vec<(String, usize)> =
        schema.temporal_features.iter().map(|f| Ok((f.name.clone(), col(&f.name)?))).collect::<Result<_>>()?;

    struct Acc {
        statics: BTreeMap<String, f64>,
        survived: Option<bool>,
        actions: Vec<(f64, u8)>,
        measurements: Vec<Measurement>,
    }
    let mut order = Vec::new();
    let mut acc: HashMap<String, Acc> = HashMap::new();

    for (i, rec) in rdr.records().enumerate() {
        // line 1 is the version comment, line 2 the header
        let line = i + 3;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let pid = rec.get(pid_c).unwrap_or("").to_string();
        if pid.is_empty() {
            return Err(Error::Parse { line, message: "empty patient_id".into() });
        }
        let time = parse_cell(rec.get(time_c).unwrap_or(""), line, "time_h")?
            .ok_or_else(|| Error::Parse { line, message: "empty time_h".into() })?;
        if time < 0.0 {
            return Err(Error::Parse { line, message: format!("invalid time_h {time}") });
        }
        let a = acc.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            Acc { statics: BTreeMap::new(), survived: None, actions: Vec::new(), measurements: Vec::new() }
        });
        if let Some(s) = parse_bool(rec.get(surv_c).unwrap_or(""), line)? {
            a.survived.get_or_insert(s);
        }
        if let Some(act) = parse_cell(rec.get(action_c).unwrap_or(""), line, "action")? {
            if act != 0.0 && act != 1.0 {
                return Err(Error::Parse { line, message: format!("action must be 0 or 1, got {act}") });
            }
            a.actions.push((time, act as u8));
        }
        for (name, c) in &static_c {
            if let Some(v) = parse_cell(rec.get(*c).unwrap_or(""), line, name)? {
                a.statics.entry(name.clone()).or_insert(v);
            }
        }
        for (name, c) in &temporal_c {
            if let Some(v) = parse_cell(rec.get(*c).unwrap_or(""), line, name)? {
                a.measurements.push(Measurement { time_h: time, feature: name.clone(), value: v });
            }
        }
    }

    let mut patients = Vec::with_capacity(order.len());
    for id in order {
        let a = acc.remove(&id).expect("every ordered id has an accumulator");
        let survived = a.survived.ok_or_else(|| Error::input(format!("patient {id} has no survived28 value")))?;
        let duration = a.measurements.iter().map(|m| m.time_h).fold(0.0, f64::max);
        let bins = bin_count(duration, schema.bin_hours);
        let mut action_bins = vec![0u8; bins.saturating_sub(1)];
        for (t, act) in a.actions {
            let b = bin_index(t, schema.bin_hours, bins);
            if b < action_bins.len() {
                action_bins[b] = action_bins[b].max(act);
            }
        }
        patients.push(assemble(id, a.statics, action_bins, survived, a.measurements));
    }
    finish(schema, patients)
}

/// Number of bins covering `duration_h` hours of data.
pub fn bin_count(duration_h: f64, bin_hours: f64) -> usize {
    ((duration_h / bin_hours).ceil() as usize).max(1)
}

/// Bin holding time `t`; observations at the very end of the stay fall
/// into the last bin.
pub fn bin_index(t: f64, bin_hours: f64, bins: usize) -> usize {
    ((t / bin_hours).floor() as usize).min(bins.saturating_sub(1))
}

pub fn write_jsonl<W: Write>(cohort: &RawCohort, mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<jsonl writer>", e);
    writeln!(out, "{}", serde_json::json!({ "format_version": COHORT_FORMAT_VERSION })).map_err(io)?;
    for p in &cohort.patients {
        let header = serde_json::json!({
            "patient_id": p.patient_id,
            "static": p.statics,
            "action_bins": p.action_bins,
            "survived28": p.survived28,
        });
        writeln!(out, "{header}").map_err(io)?;
        for m in &p.measurements {
            let row = serde_json::json!({
                "patient_id": p.patient_id,
                "time_h": m.time_h,
                "feature": m.feature,
                "value": m.value,
            });
            writeln!(out, "{row}").map_err(io)?;
        }
    }
    Ok(())
}

pub fn write_csv<W: Write>(cohort: &RawCohort, mut out: W) -> Result<()> {
    let schema = &cohort.schema;
    writeln!(out, "# format_version={COHORT_FORMAT_VERSION}").map_err(|e| Error::io("<csv writer>", e))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patient_id".to_string(), "time_h".into(), "action".into(), "survived28".into()];
    header.extend(schema.static_features.iter().map(|f| f.name.clone()));
    header.extend(schema.temporal_features.iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    let width = header.len();
    for p in &cohort.patients {
        let bins = bin_count(p.duration_h().unwrap_or(0.0), schema.bin_hours);
        let mut times: Vec<f64> = p.measurements.iter().map(|m| m.time_h).collect();
        // Bins with an action but no observation still need a row.
        for b in 0..p.action_bins.len() {
            if !times.iter().any(|&t| bin_index(t, schema.bin_hours, bins) == b) {
                times.push(b as f64 * schema.bin_hours);
            }
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        for (ti, &t) in times.iter().enumerate() {
            let mut rec = vec![String::new(); width];
            rec[0] = p.patient_id.clone();
            rec[1] = t.to_string();
            let b = bin_index(t, schema.bin_hours, bins);
            if let Some(a) = p.action_bins.get(b) {
                rec[2] = a.to_string();
            }
            rec[3] = if p.survived28 { "1".into() } else { "0".into() };
            if ti == 0 {
                for (i, f) in schema.static_features.iter().enumerate() {
                    if let Some(v) = p.statics.get(&f.name) {
                        rec[4 + i] = v.to_string();
                    }
                }
            }
            let base = 4 + schema.static_features.len();
            for m in p.measurements.iter().filter(|m| m.time_h == t) {
                if let Some(i) = schema.temporal_index(&m.feature) {
                    rec[base + i] = m.value.to_string();
                }
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save(cohort: &RawCohort, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let out = std::io::BufWriter::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(cohort, out),
        _ => write_jsonl(cohort, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::schema::FeatureSpec;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            format_version: 1,
            static_features: vec![FeatureSpec::new("age", 0.0, 120.0)],
            temporal_features: vec![FeatureSpec::new("hr", 0.0, 300.0), FeatureSpec::new("sofa", 0.0, 24.0)],
            acuity_channel: "sofa".into(),
            bin_hours: 4.0,
        }
    }

    const TWO_PATIENTS: &str = r#"{"format_version": 1}
{"patient_id": "a", "static": {"age": 50}, "action_bins": [0,1,0,0,0], "survived28": true}
{"patient_id": "a", "time_h": 8.0, "feature": "hr", "value": 90}
{"patient_id": "a", "time_h": 1.0, "feature": "hr", "value": 80}
{"patient_id": "a", "time_h": 24.0, "feature": "sofa", "value": 3}
{"patient_id": "b", "static": {"age": 70}, "action_bins": [1,1,1,1,1], "survived28": false}
{"patient_id": "b", "time_h": 0.5, "feature": "sofa", "value": 9}
{"patient_id": "b", "time_h": 24.0, "feature": "hr", "value": 110}
"#;

    #[test]
    fn two_patient_jsonl() {
        let c = read_jsonl(TWO_PATIENTS.as_bytes(), &schema()).unwrap();
        assert_eq!(c.patients.len(), 2);
        assert_eq!(c.patients[0].patient_id, "a");
        assert!(!c.patients[1].survived28);
    }

    #[test]
    fn shuffled_times_are_sorted() {
        let c = read_jsonl(TWO_PATIENTS.as_bytes(), &schema()).unwrap();
        let times: Vec<f64> = c.patients[0].measurements.iter().map(|m| m.time_h).collect();
        assert_eq!(times, vec![1.0, 8.0, 24.0]);
    }

    #[test]
    fn missing_action_column_in_csv() {
        let text = "# format_version=1\npatient_id,time_h,survived28,age,hr,sofa\na,0,1,50,80,3\n";
        let err = read_csv(text.as_bytes(), &schema()).unwrap_err();
        assert_eq!(err.to_string(), "missing column: action");
    }

    #[test]
    fn missing_action_field_in_jsonl_header() {
        let text = "{\"format_version\":1}\n{\"patient_id\":\"a\",\"static\":{},\"survived28\":true}\n";
        let err = read_jsonl(text.as_bytes(), &schema()).unwrap_err();
        assert_eq!(err.to_string(), "missing column: action_bins");
    }

    #[test]
    fn unparseable_row_reports_line() {
        let text = "{\"format_version\":1}\n{\"patient_id\":\"a\",\"time_h\":\"x\",\"feature\":\"hr\",\"value\":1}\n";
        match read_jsonl(text.as_bytes(), &schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "# format_version=1\npatient_id,time_h,action,survived28,age,hr,sofa\na,zero,0,1,50,80,3\n";
        match read_csv(text.as_bytes(), &schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_temporal_feature_is_reported() {
        let text = "{\"format_version\":1}\n{\"patient_id\":\"a\",\"static\":{\"age\":1},\"action_bins\":[],\"survived28\":true}\n{\"patient_id\":\"a\",\"time_h\":1,\"feature\":\"hr\",\"value\":1}\n";
        let err = read_jsonl(text.as_bytes(), &schema()).unwrap_err();
        assert_eq!(err.to_string(), "missing column: sofa");
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let c = read_jsonl(TWO_PATIENTS.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&c, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice(), &schema()).unwrap(), c);

        let mut buf = Vec::new();
        write_csv(&c, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice(), &schema()).unwrap(), c);
    }
}
