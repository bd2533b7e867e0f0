//! Artifact writers and the context CSV reader.
//!
//! Text artifacts carry the provenance record: as a `# ` comment line in CSV
//! and OBJ files, a `provenance` key in JSON, and a `<metadata>` element in SVG.

use std::path::{Path, PathBuf};

use metasdf::geometry::{marching_cubes, marching_squares, sample_surface, Contour, Mesh, Point3, Surface};
use metasdf::sdfdata::{SampleSet, SdfGrid};
use serde_json::Value;

use crate::{io_err, CliError, Result};

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    metasdf::sdfdata::write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Pretty JSON with `provenance` merged in as the first key.
pub fn write_json(path: &Path, provenance: &Value, body: Value) -> Result<()> {
    let mut out = serde_json::Map::new();
    out.insert("provenance".into(), provenance.clone());
    match body {
        Value::Object(m) => out.extend(m),
        other => {
            out.insert("data".into(), other);
        }
    }
    let text = serde_json::to_string_pretty(&Value::Object(out)).expect("json serializes");
    write_text(path, &(text + "\n"))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// CSV with a provenance comment line, a header, then rows.
pub fn csv_string(provenance: &Value, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(format!("# {provenance}\n").into_bytes());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 fields")
}

fn coord_header(dim: usize) -> Vec<String> {
    ["x", "y", "z"][..dim].iter().map(|s| s.to_string()).collect()
}

pub fn samples_csv(provenance: &Value, samples: &SampleSet) -> String {
    let mut header = coord_header(samples.dim);
    header.push("sdf".into());
    let rows = (0..samples.len()).map(|i| {
        samples
            .coord(i)
            .iter()
            .chain([&samples.values[i]])
            .map(|v| format!("{v:e}"))
            .collect()
    });
    csv_string(provenance, &header, rows)
}

/// Rows of `x, y[, z], sdf`; `#` comments and one header row are skipped.
pub fn read_context_csv(path: &Path) -> Result<SampleSet> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let mut dim = None;
    let (mut coords, mut values) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(CliError::Usage(format!("{}: non-numeric row {}", path.display(), i + 1))),
        };
        let d = *dim.get_or_insert(row.len().saturating_sub(1));
        if !(d == 2 || d == 3) || row.len() != d + 1 || row.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Usage(format!(
                "{}: row {} must hold 2 or 3 finite coordinates and an sdf value",
                path.display(),
                i + 1
            )));
        }
        coords.extend_from_slice(&row[..d]);
        values.push(row[d]);
    }
    let dim = dim.ok_or_else(|| CliError::Usage(format!("{}: no context rows", path.display())))?;
    Ok(SampleSet::new(dim, coords, values)?)
}

/// Extracted zero level set of a 2D or 3D grid.
pub enum Geometry {
    Contour(Contour),
    Mesh(Mesh),
}

impl Geometry {
    pub fn extract(grid: &SdfGrid) -> Result<Self> {
        Ok(match grid.dim() {
            2 => Geometry::Contour(marching_squares(grid, 0.0)?),
            _ => Geometry::Mesh(marching_cubes(grid, 0.0)?),
        })
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Geometry::Contour(c) => c.is_empty(),
            Geometry::Mesh(m) => m.is_empty(),
        }
    }

    /// Uniform surface samples, or `None` when there is no surface.
    pub fn samples(&self, n: usize, seed: u64) -> Result<Option<Vec<Point3>>> {
        if self.is_empty() {
            return Ok(None);
        }
        let s = match self {
            Geometry::Contour(c) => Surface::Contour(c),
            Geometry::Mesh(m) => Surface::Mesh(m),
        };
        Ok(Some(sample_surface(s, n, seed)?))
    }

    /// `stem.svg` and `stem.json` for contours, `stem.obj` for meshes.
    pub fn write(&self, dir: &Path, stem: &str, provenance: &Value) -> Result<Vec<PathBuf>> {
        match self {
            Geometry::Contour(c) => {
                let svg_path = dir.join(format!("{stem}.svg"));
                let svg = c.to_svg(512);
                let meta = format!("<metadata>{}</metadata>\n", xml_escape(&provenance.to_string()));
                let at = svg.find('\n').map_or(svg.len(), |i| i + 1);
                write_text(&svg_path, &format!("{}{meta}{}", &svg[..at], &svg[at..]))?;
                let json_path = dir.join(format!("{stem}.json"));
                let contour: Value = serde_json::from_str(&c.to_json()).expect("contour json");
                write_json(&json_path, provenance, serde_json::json!({ "contour": contour }))?;
                Ok(vec![svg_path, json_path])
            }
            Geometry::Mesh(m) => {
                let path = dir.join(format!("{stem}.obj"));
                write_text(&path, &format!("# {provenance}\n{}", m.to_obj()))?;
                Ok(vec![path])
            }
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean, median and population standard deviation.
pub fn stats(v: &[f64]) -> Value {
    if v.is_empty() {
        return serde_json::json!({ "mean": null, "median": null, "std": null, "n": 0 });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    serde_json::json!({ "mean": mean, "median": median(v), "std": std, "n": v.len() })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_csv_round_trips_with_header_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let s = SampleSet::new(2, vec![0.1, -0.2, 0.3, 0.4], vec![0.05, -0.5]).unwrap();
        let path = dir.path().join("ctx.csv");
        write_text(&path, &samples_csv(&serde_json::json!({"k": 1}), &s)).unwrap();
        assert_eq!(read_context_csv(&path).unwrap(), s);
        write_text(&path, "0.1,0.2\n").unwrap();
        assert!(read_context_csv(&path).is_err());
        write_text(&path, "x,y,sdf\n").unwrap();
        assert!(read_context_csv(&path).is_err());
    }

    #[test]
    fn stats_of_known_values() {
        let s = stats(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(s["mean"], 3.0);
        assert_eq!(s["median"], 2.5);
        assert!((s["std"].as_f64().unwrap() - 3.5f64.sqrt()).abs() < 1e-15);
    }
}
