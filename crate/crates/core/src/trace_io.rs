//! File formats: one-port Touchstone v1 and CSV traces, sweep manifests,
//! participation and area tables, diagram points, and the JSON results
//! document.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::concentration::{AreaRegression, AreaRow, ConcentrationResult};
use crate::error::{Error, Result};
use crate::spinmodel::LossConvention;
use crate::sweep::{DiagramFit, DiagramPoint, FeatureFit, LossCurve, DEFAULT_B_WIREBOND};
use crate::types::{ComplexTrace, LineShape, ProbeGeometry, ResonatorFit, SpinSpecies};

/// Version written to and required from results documents.
pub const SCHEMA_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, token: &str, what: &str) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| {
        Error::parse(
            path,
            line,
            format!("{what}: `{}` is not a number", token.trim()),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::parse(
            path,
            line,
            format!("{what}: non-finite value"),
        ));
    }
    Ok(v)
}

/// Complex number encoding of Touchstone data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TouchstoneFormat {
    /// Real, imaginary.
    Ri,
    /// Magnitude, angle in degrees.
    Ma,
    /// Magnitude in dB, angle in degrees.
    Db,
}

impl TouchstoneFormat {
    fn keyword(&self) -> &'static str {
        match self {
            TouchstoneFormat::Ri => "RI",
            TouchstoneFormat::Ma => "MA",
            TouchstoneFormat::Db => "DB",
        }
    }

    fn decode(&self, a: f64, b: f64) -> Complex64 {
        match self {
            TouchstoneFormat::Ri => Complex64::new(a, b),
            TouchstoneFormat::Ma => Complex64::from_polar(a, b.to_radians()),
            TouchstoneFormat::Db => Complex64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
        }
    }

    fn encode(&self, z: Complex64) -> (f64, f64) {
        match self {
            TouchstoneFormat::Ri => (z.re, z.im),
            TouchstoneFormat::Ma => (z.norm(), z.arg().to_degrees()),
            TouchstoneFormat::Db => (20.0 * z.norm().log10(), z.arg().to_degrees()),
        }
    }
}

/// Parse Touchstone v1 one-port text. `path` is used in messages only.
pub fn parse_touchstone_str(text: &str, path: &Path) -> Result<ComplexTrace> {
    let mut unit = 1e9;
    let mut format = TouchstoneFormat::Ma;
    let mut seen_options = false;
    let mut freq = Vec::new();
    let mut s = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('!').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            return Err(Error::parse(
                path,
                line_no,
                "Touchstone 2.0 keywords are not supported (version 1 files only)",
            ));
        }
        if let Some(opts) = line.strip_prefix('#') {
            if seen_options {
                continue;
            }
            seen_options = true;
            let mut tokens = opts.split_whitespace();
            while let Some(tok) = tokens.next() {
                match tok.to_ascii_uppercase().as_str() {
                    "HZ" => unit = 1.0,
                    "KHZ" => unit = 1e3,
                    "MHZ" => unit = 1e6,
                    "GHZ" => unit = 1e9,
                    "S" => {}
                    "Y" | "Z" | "H" | "G" => {
                        return Err(Error::parse(
                            path,
                            line_no,
                            format!("parameter type {tok} not supported, only S"),
                        ))
                    }
                    "RI" => format = TouchstoneFormat::Ri,
                    "MA" => format = TouchstoneFormat::Ma,
                    "DB" => format = TouchstoneFormat::Db,
                    "R" => {
                        let z = tokens.next().ok_or_else(|| {
                            Error::parse(
                                path,
                                line_no,
                                "malformed option line: R without impedance",
                            )
                        })?;
                        parse_f64(path, line_no, z, "reference impedance")?;
                    }
                    other => {
                        return Err(Error::parse(
                            path,
                            line_no,
                            format!("malformed option line: unknown token `{other}`"),
                        ))
                    }
                }
            }
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != 3 {
            let reason = if values.len() > 3 {
                format!(
                    "{} values per row: multi-port data not supported, one-port only",
                    values.len()
                )
            } else {
                format!("expected 3 values per row, found {}", values.len())
            };
            return Err(Error::parse(path, line_no, reason));
        }
        let f = parse_f64(path, line_no, values[0], "frequency")? * unit;
        let a = parse_f64(path, line_no, values[1], "data")?;
        let b = parse_f64(path, line_no, values[2], "data")?;
        if let Some(&prev) = freq.last() {
            if f <= prev {
                return Err(Error::parse(path, line_no, "non-monotone frequency axis"));
            }
        }
        freq.push(f);
        s.push(format.decode(a, b));
    }
    if freq.is_empty() {
        return Err(Error::parse(path, 0, "no data rows"));
    }
    ComplexTrace::new(freq, s).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn parse_touchstone_s1p(path: impl AsRef<Path>) -> Result<ComplexTrace> {
    let path = path.as_ref();
    parse_touchstone_str(&read_text(path)?, path)
}

/// Touchstone v1 text with frequencies in Hz.
pub fn format_touchstone(trace: &ComplexTrace, format: TouchstoneFormat) -> String {
    let mut out = format!("# Hz S {} R 50\n", format.keyword());
    for (f, z) in trace.iter() {
        let (a, b) = format.encode(z);
        let _ = writeln!(out, "{f} {a} {b}");
    }
    out
}

pub fn write_touchstone_s1p(
    trace: &ComplexTrace,
    path: impl AsRef<Path>,
    format: TouchstoneFormat,
) -> Result<()> {
    write_text(path.as_ref(), &format_touchstone(trace, format))
}

fn column_index(headers: &csv::StringRecord, path: &Path, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}

/// Read a headed CSV body, returning the header, rows and their line numbers.
fn read_csv(
    text: &str,
    path: &Path,
    line_offset: usize,
) -> Result<(csv::StringRecord, Vec<(usize, csv::StringRecord)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize) + line_offset;
        rows.push((line, rec));
    }
    Ok((headers, rows))
}

pub fn parse_csv_trace_str(text: &str, path: &Path) -> Result<ComplexTrace> {
    let (headers, rows) = read_csv(text, path, 0)?;
    let cf = column_index(&headers, path, "freq_hz")?;
    let cr = column_index(&headers, path, "s_re")?;
    let ci = column_index(&headers, path, "s_im")?;
    let mut freq = Vec::with_capacity(rows.len());
    let mut s = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        let get = |c: usize| rec.get(c).unwrap_or("");
        let f = parse_f64(path, *line, get(cf), "freq_hz")?;
        if let Some(&prev) = freq.last() {
            if f <= prev {
                return Err(Error::parse(path, *line, "non-monotone frequency axis"));
            }
        }
        freq.push(f);
        s.push(Complex64::new(
            parse_f64(path, *line, get(cr), "s_re")?,
            parse_f64(path, *line, get(ci), "s_im")?,
        ));
    }
    if freq.is_empty() {
        return Err(Error::parse(path, 0, "no data rows"));
    }
    ComplexTrace::new(freq, s).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// CSV trace with header `freq_hz,s_re,s_im`.
pub fn parse_csv_trace(path: impl AsRef<Path>) -> Result<ComplexTrace> {
    let path = path.as_ref();
    parse_csv_trace_str(&read_text(path)?, path)
}

pub fn format_csv_trace(trace: &ComplexTrace) -> String {
    let mut out = String::from("freq_hz,s_re,s_im\n");
    for (f, z) in trace.iter() {
        let _ = writeln!(out, "{f},{},{}", z.re, z.im);
    }
    out
}

pub fn write_csv_trace(trace: &ComplexTrace, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_csv_trace(trace))
}

/// Read a trace, choosing the parser from the extension (`.s1p` or CSV).
pub fn load_trace(path: impl AsRef<Path>) -> Result<ComplexTrace> {
    let path = path.as_ref();
    let is_s1p = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("s1p"));
    if is_s1p {
        parse_touchstone_s1p(path)
    } else {
        parse_csv_trace(path)
    }
}

/// One field point of a sweep campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Static field, tesla.
    pub b0: f64,
    /// Trace path as written, relative to the manifest directory.
    pub trace_path: PathBuf,
}

/// A field sweep of one resonator.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepManifest {
    pub resonator_id: String,
    pub geometry: ProbeGeometry,
    /// Sorted by field, unique fields.
    pub entries: Vec<ManifestEntry>,
    pub q_i_zero_field: Option<f64>,
    /// Wire-bond transition field, tesla.
    pub b_wirebond: f64,
    pub q_i_wirebond: Option<f64>,
    /// Directory the trace paths are relative to.
    pub base_dir: PathBuf,
}

impl SweepManifest {
    pub fn trace_file(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.trace_path)
    }
}

/// Load every trace listed in a manifest, in field order.
pub fn load_sweep(manifest: &SweepManifest) -> Result<Vec<(f64, ComplexTrace)>> {
    manifest
        .entries
        .iter()
        .map(|e| Ok((e.b0, load_trace(manifest.trace_file(e))?)))
        .collect()
}

pub fn parse_manifest_str(text: &str, path: &Path) -> Result<SweepManifest> {
    let mut id = None;
    let mut geometry = None;
    let mut q_i_zero_field = None;
    let mut b_wirebond = DEFAULT_B_WIREBOND;
    let mut q_i_wirebond = None;
    let mut body_start = 0;
    let mut body_line = 0;
    let mut offset = 0;
    for (k, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            offset += raw.len();
            continue;
        }
        let Some(rest) = line.strip_prefix('#') else {
            body_start = offset;
            body_line = k;
            break;
        };
        offset += raw.len();
        body_start = offset;
        body_line = k + 1;
        let Some((key, value)) = rest.split_once(':') else {
            continue; // plain comment
        };
        let (key, value) = (key.trim(), value.trim());
        let num = |v: &str| parse_f64(path, k + 1, v, key);
        match key {
            "resonator_id" => id = Some(value.to_string()),
            "geometry" => {
                geometry = Some(
                    value
                        .parse::<ProbeGeometry>()
                        .map_err(|e| Error::parse(path, k + 1, e.to_string()))?,
                )
            }
            "q_i_zero_field" => q_i_zero_field = Some(num(value)?),
            "b_wirebond_tesla" => b_wirebond = num(value)?,
            "q_i_wirebond" => q_i_wirebond = Some(num(value)?),
            other => {
                return Err(Error::parse(
                    path,
                    k + 1,
                    format!("unknown manifest key `{other}`"),
                ));
            }
        }
    }
    let geometry = geometry.ok_or_else(|| Error::parse(path, 0, "missing `geometry` key"))?;
    let resonator_id = id.unwrap_or_else(|| {
        path.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("resonator")
            .to_string()
    });
    let (headers, rows) = read_csv(&text[body_start..], path, body_line)?;
    let cb = column_index(&headers, path, "b0_tesla")?;
    let cp = column_index(&headers, path, "trace_path")?;
    let mut entries = Vec::with_capacity(rows.len());
    let mut seen = BTreeSet::new();
    for (line, rec) in &rows {
        let b0 = parse_f64(path, *line, rec.get(cb).unwrap_or(""), "b0_tesla")?;
        if b0 < 0.0 {
            return Err(Error::parse(path, *line, "negative field"));
        }
        if !seen.insert(b0.to_bits()) {
            return Err(Error::parse(
                path,
                *line,
                format!("duplicate field b0_tesla = {b0}"),
            ));
        }
        let p = rec.get(cp).unwrap_or("");
        if p.is_empty() {
            return Err(Error::parse(path, *line, "empty trace_path"));
        }
        entries.push(ManifestEntry {
            b0,
            trace_path: PathBuf::from(p),
        });
    }
    entries.sort_by(|a, b| a.b0.total_cmp(&b.b0));
    Ok(SweepManifest {
        resonator_id,
        geometry,
        entries,
        q_i_zero_field,
        b_wirebond,
        q_i_wirebond,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SweepManifest> {
    let path = path.as_ref();
    parse_manifest_str(&read_text(path)?, path)
}

pub fn format_manifest(m: &SweepManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# resonator_id: {}", m.resonator_id);
    let _ = writeln!(out, "# geometry: {}", m.geometry);
    if let Some(q) = m.q_i_zero_field {
        let _ = writeln!(out, "# q_i_zero_field: {q}");
    }
    let _ = writeln!(out, "# b_wirebond_tesla: {}", m.b_wirebond);
    if let Some(q) = m.q_i_wirebond {
        let _ = writeln!(out, "# q_i_wirebond: {q}");
    }
    out.push_str("b0_tesla,trace_path\n");
    for e in &m.entries {
        let _ = writeln!(out, "{},{}", e.b0, e.trace_path.display());
    }
    out
}

pub fn write_manifest(m: &SweepManifest, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_manifest(m))
}

/// Surface participation ratios of one resonator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationRow {
    pub resonator_id: String,
    /// Free sapphire surface.
    pub p_f: f64,
    /// Superconductor surface.
    pub p_sc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticipationTable {
    pub rows: Vec<ParticipationRow>,
}

impl ParticipationTable {
    pub fn get(&self, resonator_id: &str) -> Option<&ParticipationRow> {
        self.rows.iter().find(|r| r.resonator_id == resonator_id)
    }
}

fn unique_id(seen: &mut BTreeSet<String>, id: &str, path: &Path, line: usize) -> Result<()> {
    if !seen.insert(id.to_string()) {
        return Err(Error::parse(
            path,
            line,
            format!("duplicate resonator_id `{id}`"),
        ));
    }
    Ok(())
}

pub fn parse_participation_str(text: &str, path: &Path) -> Result<ParticipationTable> {
    let (headers, rows) = read_csv(text, path, 0)?;
    let ci = column_index(&headers, path, "resonator_id")?;
    let cf = column_index(&headers, path, "p_f")?;
    let cs = column_index(&headers, path, "p_sc")?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        let id = rec.get(ci).unwrap_or("").to_string();
        unique_id(&mut seen, &id, path, *line)?;
        let p_f = parse_f64(path, *line, rec.get(cf).unwrap_or(""), "p_f")?;
        let p_sc = parse_f64(path, *line, rec.get(cs).unwrap_or(""), "p_sc")?;
        for (name, p) in [("p_f", p_f), ("p_sc", p_sc)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::parse(
                    path,
                    *line,
                    format!("{name} = {p} outside (0, 1]"),
                ));
            }
        }
        out.push(ParticipationRow {
            resonator_id: id,
            p_f,
            p_sc,
        });
    }
    Ok(ParticipationTable { rows: out })
}

pub fn load_participation(path: impl AsRef<Path>) -> Result<ParticipationTable> {
    let path = path.as_ref();
    parse_participation_str(&read_text(path)?, path)
}

pub fn write_participation(table: &ParticipationTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("resonator_id,p_f,p_sc\n");
    for r in &table.rows {
        let _ = writeln!(out, "{},{},{}", r.resonator_id, r.p_f, r.p_sc);
    }
    write_text(path.as_ref(), &out)
}

/// Integrated feature area measured on one resonator.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRecord {
    pub resonator_id: String,
    /// Tesla.
    pub area: f64,
    pub sigma_area: f64,
}

pub fn parse_areas_str(text: &str, path: &Path) -> Result<Vec<AreaRecord>> {
    let (headers, rows) = read_csv(text, path, 0)?;
    let ci = column_index(&headers, path, "resonator_id")?;
    let ca = column_index(&headers, path, "area_tesla")?;
    let cs = column_index(&headers, path, "sigma_area_tesla")?;
    let mut seen = BTreeSet::new();
    rows.iter()
        .map(|(line, rec)| {
            let id = rec.get(ci).unwrap_or("").to_string();
            unique_id(&mut seen, &id, path, *line)?;
            let sigma_area = parse_f64(path, *line, rec.get(cs).unwrap_or(""), "sigma_area_tesla")?;
            if sigma_area < 0.0 {
                return Err(Error::parse(path, *line, "negative sigma_area_tesla"));
            }
            Ok(AreaRecord {
                resonator_id: id,
                area: parse_f64(path, *line, rec.get(ca).unwrap_or(""), "area_tesla")?,
                sigma_area,
            })
        })
        .collect()
}

pub fn load_areas(path: impl AsRef<Path>) -> Result<Vec<AreaRecord>> {
    let path = path.as_ref();
    parse_areas_str(&read_text(path)?, path)
}

pub fn write_areas(rows: &[AreaRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("resonator_id,area_tesla,sigma_area_tesla\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.resonator_id, r.area, r.sigma_area);
    }
    write_text(path.as_ref(), &out)
}

/// Which surface participation to regress against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    /// Free sapphire surface.
    PF,
    /// Superconductor surface.
    #[default]
    PSc,
}

/// Join areas and participation ratios by resonator id.
pub fn join_areas(
    areas: &[AreaRecord],
    table: &ParticipationTable,
    surface: Surface,
) -> Result<Vec<AreaRow>> {
    areas
        .iter()
        .map(|a| {
            let p = table.get(&a.resonator_id).ok_or_else(|| {
                Error::invalid(
                    "participation table",
                    format!("no row for resonator `{}`", a.resonator_id),
                )
            })?;
            Ok(AreaRow {
                area: a.area,
                participation: match surface {
                    Surface::PF => p.p_f,
                    Surface::PSc => p.p_sc,
                },
                sigma_area: a.sigma_area,
            })
        })
        .collect()
}

pub fn parse_diagram_str(text: &str, path: &Path) -> Result<Vec<DiagramPoint>> {
    let (headers, rows) = read_csv(text, path, 0)?;
    let cf = column_index(&headers, path, "f_r_hz")?;
    let cb = column_index(&headers, path, "b_tesla")?;
    let cs = column_index(&headers, path, "sigma_b_tesla")?;
    rows.iter()
        .map(|(line, rec)| {
            let f = parse_f64(path, *line, rec.get(cf).unwrap_or(""), "f_r_hz")?;
            let b = parse_f64(path, *line, rec.get(cb).unwrap_or(""), "b_tesla")?;
            let s = parse_f64(path, *line, rec.get(cs).unwrap_or(""), "sigma_b_tesla")?;
            DiagramPoint::new(crate::hz_to_rad(f), b, s)
                .map_err(|e| Error::parse(path, *line, e.to_string()))
        })
        .collect()
}

pub fn load_diagram(path: impl AsRef<Path>) -> Result<Vec<DiagramPoint>> {
    let path = path.as_ref();
    parse_diagram_str(&read_text(path)?, path)
}

pub fn write_diagram(points: &[DiagramPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("f_r_hz,b_tesla,sigma_b_tesla\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{}",
            crate::rad_to_hz(p.omega_r),
            p.b_feature,
            p.sigma_b
        );
    }
    write_text(path.as_ref(), &out)
}

/// One entry of a results document.
#[derive(Debug, Clone, PartialEq)]
pub enum ResultRecord {
    Resonator {
        resonator_id: Option<String>,
        /// Static field, tesla.
        b0: Option<f64>,
        fit: ResonatorFit,
    },
    Feature {
        resonator_id: Option<String>,
        fit: FeatureFit,
    },
    LossCurve {
        resonator_id: Option<String>,
        curve: LossCurve,
    },
    Diagram {
        label: Option<String>,
        fit: DiagramFit,
        n_points: usize,
    },
    SpeciesMatch {
        species: SpinSpecies,
        score: f64,
    },
    Concentration {
        species_label: String,
        result: ConcentrationResult,
        regression: Option<AreaRegression>,
        note: Option<String>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResonatorDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resonator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b0_tesla: Option<f64>,
    f_r_hz: f64,
    q_i: f64,
    q_c: f64,
    q_l: f64,
    phi_0_rad: f64,
    circle_center_re: f64,
    circle_center_im: f64,
    circle_radius: f64,
    sigma_radius: f64,
    sigma_inv_q_i: f64,
    geometry: ProbeGeometry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resonator_id: Option<String>,
    species_label: String,
    shape: LineShape,
    peak_height_rad_s: f64,
    center_field_tesla: f64,
    width_field_tesla: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_right_field_tesla: Option<f64>,
    area_tesla: f64,
    sigma_height_rad_s: f64,
    sigma_center_tesla: f64,
    f_r_hz: f64,
    window_tesla: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossCurveDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resonator_id: Option<String>,
    f_r_ref_hz: f64,
    b0_tesla: Vec<f64>,
    kappa_s_rad_s: Vec<f64>,
    sigma_kappa_rad_s: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagramDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    g: f64,
    delta_0_ghz: f64,
    /// Covariance of (g, delta_0 in GHz).
    covariance: [[f64; 2]; 2],
    n_points: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeciesMatchDto {
    species: SpinSpecies,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConcentrationDto {
    species_label: String,
    c_volume_m3: f64,
    sigma_surface_m2: f64,
    sigma_surface_cm2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_surface_err_m2: Option<f64>,
    slope_tesla: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_squared: Option<f64>,
    t_layer_m: f64,
    convention: LossConvention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regression: Option<AreaRegression>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RecordDto {
    ResonatorFit(ResonatorDto),
    FeatureFit(FeatureDto),
    LossCurve(LossCurveDto),
    Diagram(DiagramDto),
    SpeciesMatch(SpeciesMatchDto),
    Concentration(ConcentrationDto),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    records: Vec<RecordDto>,
}

const GHZ: f64 = 2.0 * std::f64::consts::PI * 1e9;

impl From<&ResultRecord> for RecordDto {
    fn from(r: &ResultRecord) -> Self {
        match r {
            ResultRecord::Resonator {
                resonator_id,
                b0,
                fit,
            } => RecordDto::ResonatorFit(ResonatorDto {
                resonator_id: resonator_id.clone(),
                b0_tesla: *b0,
                f_r_hz: crate::rad_to_hz(fit.omega_r),
                q_i: fit.q_i,
                q_c: fit.q_c,
                q_l: fit.q_l,
                phi_0_rad: fit.phi_0,
                circle_center_re: fit.circle_center.re,
                circle_center_im: fit.circle_center.im,
                circle_radius: fit.circle_radius,
                sigma_radius: fit.sigma_radius,
                sigma_inv_q_i: fit.sigma_inv_qi,
                geometry: fit.geometry,
            }),
            ResultRecord::Feature { resonator_id, fit } => RecordDto::FeatureFit(FeatureDto {
                resonator_id: resonator_id.clone(),
                species_label: fit.species_label.clone(),
                shape: fit.shape,
                peak_height_rad_s: fit.peak_height,
                center_field_tesla: fit.center_field,
                width_field_tesla: fit.width_field,
                width_right_field_tesla: fit.width_right_field,
                area_tesla: fit.area,
                sigma_height_rad_s: fit.sigma_height,
                sigma_center_tesla: fit.sigma_center,
                f_r_hz: crate::rad_to_hz(fit.omega_r),
                window_tesla: [fit.window.0, fit.window.1],
            }),
            ResultRecord::LossCurve {
                resonator_id,
                curve,
            } => RecordDto::LossCurve(LossCurveDto {
                resonator_id: resonator_id.clone(),
                f_r_ref_hz: crate::rad_to_hz(curve.omega_r_ref()),
                b0_tesla: curve.b0().to_vec(),
                kappa_s_rad_s: curve.kappa_s().to_vec(),
                sigma_kappa_rad_s: curve.sigma_kappa().to_vec(),
            }),
            ResultRecord::Diagram {
                label,
                fit,
                n_points,
            } => {
                let c = fit.covariance;
                RecordDto::Diagram(DiagramDto {
                    label: label.clone(),
                    g: fit.g,
                    delta_0_ghz: fit.delta_0 / GHZ,
                    covariance: [
                        [c[0][0], c[0][1] / GHZ],
                        [c[1][0] / GHZ, c[1][1] / (GHZ * GHZ)],
                    ],
                    n_points: *n_points,
                })
            }
            ResultRecord::SpeciesMatch { species, score } => {
                RecordDto::SpeciesMatch(SpeciesMatchDto {
                    species: species.clone(),
                    score: *score,
                })
            }
            ResultRecord::Concentration {
                species_label,
                result,
                regression,
                note,
            } => RecordDto::Concentration(ConcentrationDto {
                species_label: species_label.clone(),
                c_volume_m3: result.c_volume,
                sigma_surface_m2: result.sigma_surface,
                sigma_surface_cm2: result.sigma_surface_cm2(),
                sigma_surface_err_m2: result.sigma_surface_err,
                slope_tesla: result.slope,
                r_squared: result.r_squared,
                t_layer_m: result.t_layer,
                convention: result.convention,
                regression: *regression,
                note: note.clone(),
            }),
        }
    }
}

impl TryFrom<RecordDto> for ResultRecord {
    type Error = Error;

    fn try_from(d: RecordDto) -> Result<Self> {
        Ok(match d {
            RecordDto::ResonatorFit(r) => ResultRecord::Resonator {
                resonator_id: r.resonator_id,
                b0: r.b0_tesla,
                fit: ResonatorFit::new(
                    crate::hz_to_rad(r.f_r_hz),
                    r.q_i,
                    r.q_c,
                    r.q_l,
                    r.phi_0_rad,
                    Complex64::new(r.circle_center_re, r.circle_center_im),
                    r.circle_radius,
                    r.sigma_radius,
                    r.sigma_inv_q_i,
                    r.geometry,
                )?,
            },
            RecordDto::FeatureFit(f) => ResultRecord::Feature {
                resonator_id: f.resonator_id,
                fit: FeatureFit {
                    species_label: f.species_label,
                    shape: f.shape,
                    peak_height: f.peak_height_rad_s,
                    center_field: f.center_field_tesla,
                    width_field: f.width_field_tesla,
                    width_right_field: f.width_right_field_tesla,
                    area: f.area_tesla,
                    sigma_height: f.sigma_height_rad_s,
                    sigma_center: f.sigma_center_tesla,
                    omega_r: crate::hz_to_rad(f.f_r_hz),
                    window: (f.window_tesla[0], f.window_tesla[1]),
                },
            },
            RecordDto::LossCurve(c) => ResultRecord::LossCurve {
                resonator_id: c.resonator_id,
                curve: LossCurve::new(
                    c.b0_tesla,
                    c.kappa_s_rad_s,
                    c.sigma_kappa_rad_s,
                    crate::hz_to_rad(c.f_r_ref_hz),
                )?,
            },
            RecordDto::Diagram(d) => {
                let c = d.covariance;
                ResultRecord::Diagram {
                    label: d.label,
                    fit: DiagramFit {
                        g: d.g,
                        delta_0: d.delta_0_ghz * GHZ,
                        covariance: [
                            [c[0][0], c[0][1] * GHZ],
                            [c[1][0] * GHZ, c[1][1] * GHZ * GHZ],
                        ],
                    },
                    n_points: d.n_points,
                }
            }
            RecordDto::SpeciesMatch(s) => ResultRecord::SpeciesMatch {
                species: s.species,
                score: s.score,
            },
            RecordDto::Concentration(c) => ResultRecord::Concentration {
                species_label: c.species_label,
                result: ConcentrationResult {
                    c_volume: c.c_volume_m3,
                    sigma_surface: c.sigma_surface_m2,
                    sigma_surface_err: c.sigma_surface_err_m2,
                    slope: c.slope_tesla,
                    r_squared: c.r_squared,
                    t_layer: c.t_layer_m,
                    convention: c.convention,
                },
                regression: c.regression,
                note: c.note,
            },
        })
    }
}

/// Serialize records to the JSON results document.
pub fn results_to_string(records: &[ResultRecord]) -> String {
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        records: records.iter().map(RecordDto::from).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("results serialize") + "\n"
}

pub fn results_from_str(text: &str, path: &Path) -> Result<Vec<ResultRecord>> {
    let doc: Document = serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(
            path,
            0,
            format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            ),
        ));
    }
    doc.records
        .into_iter()
        .map(ResultRecord::try_from)
        .collect()
}

pub fn write_results(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &results_to_string(records))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    results_from_str(&read_text(path)?, path)
}
