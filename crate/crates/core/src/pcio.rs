//! Point cloud types and the PLY / CSV interchange formats.
//!
//! Binary PLY is little-endian with `double` coordinates and colours, so a
//! save/load round trip is exact. Optional per-vertex properties `scan_row`,
//! `scan_col` (uint32) and `label` (uint16) are detected by name. The class
//! count and source id travel as `comment class_count N` / `comment source_id S`
//! header lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single scanned point. Colours are normalised to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    /// Scanner row (scan-direction index), when the source provides it.
    pub row: Option<u32>,
    pub col: Option<u32>,
    pub label: Option<u16>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point {
            x,
            y,
            z,
            r: 0.0,
            g: 0.0,
            b: 0.0,
            row: None,
            col: None,
            label: None,
        }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub class_count: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    PlyBinary,
    PlyAscii,
    Csv,
}

impl Format {
    /// Guess from a file extension: `.csv` is CSV, everything else binary PLY.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::PlyBinary,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply_binary" | "ply" | "binary" => Ok(Format::PlyBinary),
            "ply_ascii" | "ascii" => Ok(Format::PlyAscii),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Parse(format!("unknown format {other:?}"))),
        }
    }
}

impl PointCloud {
    pub fn new(points: Vec<Point>, class_count: usize, source_id: impl Into<String>) -> Self {
        PointCloud {
            points,
            class_count,
            source_id: source_id.into(),
        }
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn has_metadata(&self) -> bool {
        self.points.first().is_some_and(|p| p.row.is_some())
    }

    pub fn has_labels(&self) -> bool {
        self.points.first().is_some_and(|p| p.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.points
            .iter()
            .map(|p| p.label.map(usize::from))
            .collect()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::xyz).collect()
    }

    /// Check every type invariant.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Validation("cloud has no points".into()));
        }
        let meta = self.points[0].row.is_some();
        let labelled = self.points[0].label.is_some();
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
            }
            for c in [p.r, p.g, p.b] {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Validation(format!("point {i} colour {c} outside [0,1]")));
                }
            }
            if p.row.is_some() != p.col.is_some() {
                return Err(Error::Validation(format!("point {i} has only one of scan_row/scan_col")));
            }
            if p.row.is_some() != meta {
                return Err(Error::Validation(format!(
                    "scan metadata present on some points but not point {i}"
                )));
            }
            if p.label.is_some() != labelled {
                return Err(Error::Validation(format!("labels present on some points but not point {i}")));
            }
            if let Some(l) = p.label {
                if usize::from(l) >= self.class_count {
                    return Err(Error::Validation(format!(
                        "point {i} label {l} outside [0, {})",
                        self.class_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            class_count: self.class_count,
            source_id: self.source_id.clone(),
        }
    }
}

pub fn load_cloud(path: &Path, format: Format) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string();
    let cloud = match format {
        Format::PlyBinary | Format::PlyAscii => read_ply(&mut reader, &stem)?,
        Format::Csv => read_csv(&mut reader, &stem)?,
    };
    cloud.validate()?;
    Ok(cloud)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        Format::PlyBinary => write_ply(&mut w, cloud, true, None),
        Format::PlyAscii => write_ply(&mut w, cloud, false, None),
        Format::Csv => write_csv(&mut w, cloud),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Write `cloud` as binary PLY coloured by `predictions` through `palette`.
/// The predictions are also stored in the `label` property.
pub fn export_colored(
    cloud: &PointCloud,
    predictions: &[usize],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<PathBuf> {
    if predictions.len() != cloud.n() {
        return Err(Error::Validation(format!(
            "{} predictions for {} points",
            predictions.len(),
            cloud.n()
        )));
    }
    if let Some(&bad) = predictions.iter().find(|&&p| p >= palette.len()) {
        return Err(Error::Validation(format!("prediction {bad} has no palette entry")));
    }
    let mut colored = cloud.clone();
    colored.class_count = palette.len();
    for (p, &c) in colored.points.iter_mut().zip(predictions) {
        p.label = Some(c as u16);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(&mut w, &colored, true, Some((predictions, palette)))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Default class palette: wall blue, ground yellow, other green, then greys.
pub fn default_palette(class_count: usize) -> Vec<[u8; 3]> {
    let base = [[40u8, 90, 255], [250, 210, 40], [60, 200, 80]];
    (0..class_count)
        .map(|c| {
            if c < base.len() {
                base[c]
            } else {
                let v = (60 + 37 * c % 180) as u8;
                [v, v, v]
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Scalar> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY scalar type {other:?}"))),
        })
    }

    /// Full-scale value used to normalise integer colours.
    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            Scalar::U32 | Scalar::I32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
        }
    }

    fn read_binary<R: Read>(self, r: &mut R, big_endian: bool) -> std::io::Result<f64> {
        macro_rules! rd {
            ($le:expr, $be:expr) => {
                if big_endian {
                    $be
                } else {
                    $le
                }
            };
        }
        Ok(match self {
            Scalar::I8 => r.read_i8()? as f64,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I16 => rd!(r.read_i16::<LittleEndian>()?, r.read_i16::<BigEndian>()?) as f64,
            Scalar::U16 => rd!(r.read_u16::<LittleEndian>()?, r.read_u16::<BigEndian>()?) as f64,
            Scalar::I32 => rd!(r.read_i32::<LittleEndian>()?, r.read_i32::<BigEndian>()?) as f64,
            Scalar::U32 => rd!(r.read_u32::<LittleEndian>()?, r.read_u32::<BigEndian>()?) as f64,
            Scalar::F32 => rd!(r.read_f32::<LittleEndian>()?, r.read_f32::<BigEndian>()?) as f64,
            Scalar::F64 => rd!(r.read_f64::<LittleEndian>()?, r.read_f64::<BigEndian>()?),
        })
    }
}

#[derive(Debug, PartialEq)]
enum PlyEncoding {
    Ascii,
    BinaryLe,
    BinaryBe,
}

struct PlyHeader {
    encoding: PlyEncoding,
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    class_count: Option<usize>,
    source_id: Option<String>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<PlyHeader> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::Parse(format!("reading PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Parse("unexpected end of PLY header".into()));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    };
    if next_line(r)?.trim() != "ply" {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut encoding = None;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut properties = Vec::new();
    let mut class_count = None;
    let mut source_id = None;
    loop {
        let l = next_line(r)?;
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("format") => {
                encoding = Some(match toks.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLe,
                    Some("binary_big_endian") => PlyEncoding::BinaryBe,
                    other => return Err(Error::Parse(format!("unknown PLY format {other:?}"))),
                });
            }
            Some("comment") | Some("obj_info") => {
                let rest: Vec<&str> = toks.collect();
                match rest.first() {
                    Some(&"class_count") => {
                        let v = rest
                            .get(1)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::Parse("bad class_count comment".into()))?;
                        class_count = Some(v);
                    }
                    Some(&"source_id") => source_id = Some(rest[1..].join(" ")),
                    _ => {}
                }
            }
            Some("element") => {
                let name = toks.next().unwrap_or_default();
                let count: usize = toks
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad element line {l:?}")))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::Parse("duplicate vertex element".into()));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    if vertex_count.is_none() && count > 0 {
                        return Err(Error::Parse("vertex must be the first non-empty element".into()));
                    }
                    in_vertex = false;
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = toks.next().unwrap_or_default();
                if ty == "list" {
                    return Err(Error::Parse("list properties on vertices are not supported".into()));
                }
                let name = toks
                    .next()
                    .ok_or_else(|| Error::Parse(format!("bad property line {l:?}")))?;
                properties.push((name.to_string(), Scalar::parse(ty)?));
            }
            Some("end_header") => break,
            None => {}
            Some(other) => return Err(Error::Parse(format!("unexpected PLY header keyword {other:?}"))),
        }
    }
    Ok(PlyHeader {
        encoding: encoding.ok_or_else(|| Error::Parse("missing format line".into()))?,
        vertex_count: vertex_count.ok_or_else(|| Error::Parse("missing vertex element".into()))?,
        properties,
        class_count,
        source_id,
    })
}

/// Column positions of the recognised properties.
struct Columns {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    color_scale: [f64; 3],
    row: Option<usize>,
    col: Option<usize>,
    label: Option<usize>,
}

fn locate(names: &[&str], types: Option<&[Scalar]>) -> Result<Columns> {
    let find = |n: &str| names.iter().position(|&c| c == n);
    let need = |n: &str| find(n).ok_or_else(|| Error::Parse(format!("missing column {n:?}")));
    let xyz = [need("x")?, need("y")?, need("z")?];
    let red = find("red").or_else(|| find("r"));
    let green = find("green").or_else(|| find("g"));
    let blue = find("blue").or_else(|| find("b"));
    let rgb = match (red, green, blue) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => return Err(Error::Parse("partial colour columns".into())),
    };
    let color_scale = match (rgb, types) {
        (Some(c), Some(t)) => [t[c[0]].color_scale(), t[c[1]].color_scale(), t[c[2]].color_scale()],
        _ => [1.0; 3],
    };
    let row = find("scan_row");
    let col = find("scan_col");
    if row.is_some() != col.is_some() {
        return Err(Error::Validation("scan_row and scan_col must appear together".into()));
    }
    Ok(Columns {
        xyz,
        rgb,
        color_scale,
        row,
        col,
        label: find("label"),
    })
}

fn index_value(v: f64, what: &str, max: f64) -> Result<f64> {
    if v.fract() != 0.0 || v < 0.0 || v > max {
        return Err(Error::Validation(format!("{what} value {v} is not a valid index")));
    }
    Ok(v)
}

fn point_from_values(vals: &[f64], cols: &Columns) -> Result<Point> {
    let mut p = Point::new(vals[cols.xyz[0]], vals[cols.xyz[1]], vals[cols.xyz[2]]);
    if let Some(c) = cols.rgb {
        p.r = vals[c[0]] / cols.color_scale[0];
        p.g = vals[c[1]] / cols.color_scale[1];
        p.b = vals[c[2]] / cols.color_scale[2];
    }
    if let (Some(r), Some(c)) = (cols.row, cols.col) {
        p.row = Some(index_value(vals[r], "scan_row", u32::MAX as f64)? as u32);
        p.col = Some(index_value(vals[c], "scan_col", u32::MAX as f64)? as u32);
    }
    if let Some(l) = cols.label {
        p.label = Some(index_value(vals[l], "label", u16::MAX as f64)? as u16);
    }
    Ok(p)
}

fn infer_class_count(points: &[Point]) -> usize {
    points
        .iter()
        .filter_map(|p| p.label)
        .max()
        .map_or(0, |m| usize::from(m) + 1)
}

fn read_ply<R: BufRead>(r: &mut R, stem: &str) -> Result<PointCloud> {
    let header = read_header(r)?;
    let names: Vec<&str> = header.properties.iter().map(|(n, _)| n.as_str()).collect();
    let types: Vec<Scalar> = header.properties.iter().map(|(_, t)| *t).collect();
    let cols = locate(&names, Some(&types))?;
    let mut points = Vec::with_capacity(header.vertex_count);
    let mut vals = vec![0.0; types.len()];
    match header.encoding {
        PlyEncoding::Ascii => {
            let mut line = String::new();
            while points.len() < header.vertex_count {
                line.clear();
                let n = r
                    .read_line(&mut line)
                    .map_err(|e| Error::Parse(format!("reading PLY body: {e}")))?;
                if n == 0 {
                    return Err(Error::Parse(format!(
                        "PLY body ended after {} of {} vertices",
                        points.len(),
                        header.vertex_count
                    )));
                }
                if line.trim().is_empty() {
                    continue;
                }
                let mut toks = line.split_whitespace();
                for v in vals.iter_mut() {
                    let tok = toks
                        .next()
                        .ok_or_else(|| Error::Parse(format!("short vertex line {line:?}")))?;
                    *v = tok
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad number {tok:?}")))?;
                }
                points.push(point_from_values(&vals, &cols)?);
            }
        }
        PlyEncoding::BinaryLe | PlyEncoding::BinaryBe => {
            let be = header.encoding == PlyEncoding::BinaryBe;
            for _ in 0..header.vertex_count {
                for (v, t) in vals.iter_mut().zip(&types) {
                    *v = t
                        .read_binary(r, be)
                        .map_err(|e| Error::Parse(format!("truncated PLY body: {e}")))?;
                }
                points.push(point_from_values(&vals, &cols)?);
            }
        }
    }
    let class_count = header
        .class_count
        .unwrap_or_else(|| infer_class_count(&points));
    Ok(PointCloud {
        points,
        class_count,
        source_id: header.source_id.unwrap_or_else(|| stem.to_string()),
    })
}

fn write_ply<W: Write>(
    w: &mut W,
    cloud: &PointCloud,
    binary: bool,
    colors: Option<(&[usize], &[[u8; 3]])>,
) -> std::io::Result<()> {
    let meta = cloud.has_metadata();
    let labelled = cloud.has_labels();
    writeln!(w, "ply")?;
    writeln!(
        w,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    )?;
    writeln!(w, "comment class_count {}", cloud.class_count)?;
    if !cloud.source_id.is_empty() {
        writeln!(w, "comment source_id {}", cloud.source_id)?;
    }
    writeln!(w, "element vertex {}", cloud.n())?;
    for c in ["x", "y", "z"] {
        writeln!(w, "property double {c}")?;
    }
    let color_ty = if colors.is_some() { "uchar" } else { "double" };
    for c in ["red", "green", "blue"] {
        writeln!(w, "property {color_ty} {c}")?;
    }
    if meta {
        writeln!(w, "property uint32 scan_row")?;
        writeln!(w, "property uint32 scan_col")?;
    }
    if labelled {
        writeln!(w, "property uint16 label")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        let rgb8 = colors.map(|(pred, pal)| pal[pred[i]]);
        if binary {
            for v in [p.x, p.y, p.z] {
                w.write_f64::<LittleEndian>(v)?;
            }
            match rgb8 {
                Some(c) => w.write_all(&c)?,
                None => {
                    for v in [p.r, p.g, p.b] {
                        w.write_f64::<LittleEndian>(v)?;
                    }
                }
            }
            if meta {
                w.write_u32::<LittleEndian>(p.row.unwrap_or(0))?;
                w.write_u32::<LittleEndian>(p.col.unwrap_or(0))?;
            }
            if labelled {
                w.write_u16::<LittleEndian>(p.label.unwrap_or(0))?;
            }
        } else {
            write!(w, "{} {} {}", p.x, p.y, p.z)?;
            match rgb8 {
                Some(c) => write!(w, " {} {} {}", c[0], c[1], c[2])?,
                None => write!(w, " {} {} {}", p.r, p.g, p.b)?,
            }
            if meta {
                write!(w, " {} {}", p.row.unwrap_or(0), p.col.unwrap_or(0))?;
            }
            if labelled {
                write!(w, " {}", p.label.unwrap_or(0))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV

fn read_csv<R: BufRead>(r: &mut R, stem: &str) -> Result<PointCloud> {
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|e| Error::Parse(format!("reading CSV: {e}")))?;
    let mut class_count = None;
    let mut source_id = None;
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let Some(comment) = line.trim_start().strip_prefix('#') else {
            break;
        };
        body_start += line.len();
        for kv in comment.split(',') {
            match kv.trim().split_once('=') {
                Some(("class_count", v)) => {
                    class_count = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Parse(format!("bad class_count {v:?}")))?,
                    )
                }
                Some(("source_id", v)) => source_id = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text[body_start..].as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("CSV header: {e}")))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let cols = locate(&names, None)?;
    let optional = [cols.row, cols.col, cols.label];
    let mut points = Vec::new();
    let mut vals = vec![0.0; names.len()];
    for (line_no, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("CSV record {line_no}: {e}")))?;
        let mut missing = [false; 3];
        for (j, v) in vals.iter_mut().enumerate() {
            let field = rec.get(j).unwrap_or("");
            if field.is_empty() {
                if let Some(slot) = optional.iter().position(|&o| o == Some(j)) {
                    missing[slot] = true;
                    *v = 0.0;
                    continue;
                }
                if [cols.xyz.as_slice(), cols.rgb.as_ref().map_or(&[][..], |c| c.as_slice())]
                    .concat()
                    .contains(&j)
                {
                    return Err(Error::Parse(format!("CSV record {line_no}: empty field {}", names[j])));
                }
                continue;
            }
            *v = field
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("CSV record {line_no}: bad number {field:?}")))?;
        }
        let mut p = point_from_values(&vals, &cols)?;
        if missing[0] || missing[1] {
            p.row = None;
            p.col = None;
        }
        if missing[2] {
            p.label = None;
        }
        points.push(p);
    }
    normalize_8bit_colors(&mut points);
    let class_count = class_count.unwrap_or_else(|| infer_class_count(&points));
    Ok(PointCloud {
        points,
        class_count,
        source_id: source_id.unwrap_or_else(|| stem.to_string()),
    })
}

/// CSV carries no type information: colours that are all integers with at
/// least one above 1 are taken to be 8-bit and rescaled.
fn normalize_8bit_colors(points: &mut [Point]) {
    let chans = || points.iter().flat_map(|p| [p.r, p.g, p.b]);
    let any_above_one = chans().any(|c| c > 1.0);
    let all_8bit = chans().all(|c| c.fract() == 0.0 && (0.0..=255.0).contains(&c));
    if any_above_one && all_8bit {
        for p in points.iter_mut() {
            p.r /= 255.0;
            p.g /= 255.0;
            p.b /= 255.0;
        }
    }
}

fn write_csv<W: Write>(w: &mut W, cloud: &PointCloud) -> std::io::Result<()> {
    let meta = cloud.has_metadata();
    let labelled = cloud.has_labels();
    writeln!(w, "# class_count={}, source_id={}", cloud.class_count, cloud.source_id)?;
    let mut header = vec!["x", "y", "z", "r", "g", "b"];
    if meta {
        header.extend(["scan_row", "scan_col"]);
    }
    if labelled {
        header.push("label");
    }
    writeln!(w, "{}", header.join(","))?;
    for p in &cloud.points {
        write!(w, "{},{},{},{},{},{}", p.x, p.y, p.z, p.r, p.g, p.b)?;
        if meta {
            write!(w, ",{},{}", p.row.unwrap_or(0), p.col.unwrap_or(0))?;
        }
        if labelled {
            write!(w, ",{}", p.label.unwrap_or(0))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn sample_cloud(n: usize, meta: bool, labels: bool) -> PointCloud {
        let points = (0..n)
            .map(|i| {
                let f = i as f64;
                Point {
                    x: f * 0.1 + 1.0 / 3.0,
                    y: -f * 1e-7,
                    z: f.sqrt(),
                    r: (i % 7) as f64 / 7.0,
                    g: 0.5,
                    b: 1.0,
                    row: meta.then_some(i as u32 / 10),
                    col: meta.then_some(i as u32 % 10),
                    label: labels.then_some((i % 3) as u16),
                }
            })
            .collect();
        PointCloud::new(points, 3, "sample")
    }

    #[test]
    fn ascii_ply_minimal() {
        let dir = tmp();
        let path = dir.path().join("tri.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
             property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0 0 0 255\n",
        )
        .unwrap();
        let c = load_cloud(&path, Format::PlyAscii).unwrap();
        assert_eq!(c.n(), 3);
        assert!(!c.has_metadata());
        assert!(!c.has_labels());
        assert_eq!(c.points[0].r, 1.0);
        assert_eq!(c.points[2].b, 1.0);
        assert_eq!(c.source_id, "tri");
    }

    #[test]
    fn csv_partial_metadata_rejected() {
        let dir = tmp();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "x,y,z,r,g,b,scan_row,scan_col\n0,0,0,0,0,0,1,1\n1,0,0,0,0,0,,\n2,0,0,0,0,0,3,3\n",
        )
        .unwrap();
        assert!(matches!(load_cloud(&path, Format::Csv), Err(Error::Validation(_))));
    }

    #[test]
    fn nan_coordinate_rejected() {
        let dir = tmp();
        let path = dir.path().join("nan.csv");
        std::fs::write(&path, "x,y,z,r,g,b\n0,0,0,0,0,0\nNaN,0,0,0,0,0\n").unwrap();
        assert!(matches!(load_cloud(&path, Format::Csv), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_header_is_parse_error() {
        let dir = tmp();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex x\nend_header\n").unwrap();
        assert!(matches!(load_cloud(&path, Format::PlyAscii), Err(Error::Parse(_))));
        std::fs::write(&path, "plx\n").unwrap();
        assert!(matches!(load_cloud(&path, Format::PlyAscii), Err(Error::Parse(_))));
    }

    #[test]
    fn unlabelled_cloud_has_no_label_column() {
        let dir = tmp();
        let cloud = sample_cloud(5, false, false);
        for fmt in [Format::PlyAscii, Format::Csv] {
            let path = dir.path().join("c.txt");
            save_cloud(&cloud, &path, fmt).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(!text.contains("label"), "{fmt:?}");
        }
    }

    #[test]
    fn labels_round_trip_every_format() {
        let dir = tmp();
        let cloud = sample_cloud(50, true, true);
        for fmt in [Format::PlyBinary, Format::PlyAscii, Format::Csv] {
            let path = dir.path().join("c.dat");
            save_cloud(&cloud, &path, fmt).unwrap();
            let back = load_cloud(&path, fmt).unwrap();
            assert_eq!(back, cloud, "{fmt:?}");
        }
    }

    #[test]
    fn large_binary_round_trip_bit_identical() {
        let dir = tmp();
        let cloud = sample_cloud(100_000, true, true);
        let path = dir.path().join("big.ply");
        save_cloud(&cloud, &path, Format::PlyBinary).unwrap();
        let back = load_cloud(&path, Format::PlyBinary).unwrap();
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
        // byte-level: re-saving the loaded cloud gives the same file
        let path2 = dir.path().join("big2.ply");
        save_cloud(&back, &path2, Format::PlyBinary).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn export_uniform_and_palette_lookup() {
        let dir = tmp();
        let cloud = sample_cloud(30, false, true);
        let palette = default_palette(3);
        let path = dir.path().join("pred.ply");

        export_colored(&cloud, &vec![0; 30], &palette, &path).unwrap();
        let back = load_cloud(&path, Format::PlyBinary).unwrap();
        let c0 = palette[0].map(|v| v as f64 / 255.0);
        assert!(back.points.iter().all(|p| [p.r, p.g, p.b] == c0));

        let preds: Vec<usize> = (0..30).map(|i| (i * 7 + 1) % 3).collect();
        export_colored(&cloud, &preds, &palette, &path).unwrap();
        let back = load_cloud(&path, Format::PlyBinary).unwrap();
        for (p, &c) in back.points.iter().zip(&preds) {
            assert_eq!([p.r, p.g, p.b], palette[c].map(|v| v as f64 / 255.0));
            assert_eq!(p.label, Some(c as u16));
        }

        let truth = cloud.labels().unwrap();
        export_colored(&cloud, &truth, &palette, &path).unwrap();
        let back = load_cloud(&path, Format::PlyBinary).unwrap();
        for (p, src) in back.points.iter().zip(&cloud.points) {
            let want = palette[src.label.unwrap() as usize].map(|v| v as f64 / 255.0);
            assert_eq!([p.r, p.g, p.b], want);
        }

        assert!(matches!(
            export_colored(&cloud, &[0; 3], &palette, &path),
            Err(Error::Validation(_))
        ));
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        (1usize..40, any::<bool>(), any::<bool>()).prop_flat_map(|(n, meta, labels)| {
            prop::collection::vec(
                (
                    -1e6f64..1e6,
                    -1e6f64..1e6,
                    -1e3f64..1e3,
                    0.0f64..=1.0,
                    0.0f64..=1.0,
                    0.0f64..=1.0,
                    0u32..5000,
                    0u32..5000,
                    0u16..4,
                ),
                n,
            )
            .prop_map(move |v| {
                let points = v
                    .into_iter()
                    .map(|(x, y, z, r, g, b, row, col, l)| Point {
                        x,
                        y,
                        z,
                        r,
                        g,
                        b,
                        row: meta.then_some(row),
                        col: meta.then_some(col),
                        label: labels.then_some(l),
                    })
                    .collect();
                PointCloud::new(points, 4, "prop")
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_is_identity(cloud in arb_cloud(), fmt_idx in 0usize..3) {
            let fmt = [Format::PlyBinary, Format::PlyAscii, Format::Csv][fmt_idx];
            let dir = tmp();
            let path = dir.path().join("p.dat");
            save_cloud(&cloud, &path, fmt).unwrap();
            let back = load_cloud(&path, fmt).unwrap();
            prop_assert_eq!(back, cloud);
        }

        #[test]
        fn corruption_is_rejected(cloud in arb_cloud(), which in 0usize..4, at in any::<prop::sample::Index>()) {
            let mut c = cloud;
            let i = at.index(c.n());
            match which {
                0 => c.points[i].y = f64::INFINITY,
                1 => c.points[i].g = 1.5,
                2 => {
                    // break all-or-none metadata
                    let p = &mut c.points[i];
                    if p.row.is_some() { p.col = None } else { p.row = Some(1) }
                }
                _ => c.points[i].label = Some(9),
            }
            prop_assert!(c.validate().is_err());
        }
    }
}
