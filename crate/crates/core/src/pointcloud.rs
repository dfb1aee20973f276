//! Point-cloud containers and the text formats they travel in.
//!
//! Three input formats are understood: OFF, ASCII PLY and plain XYZ. Only
//! vertex positions are kept; faces, normals and colors are read past and
//! dropped. Clustering results are written back out as ASCII PLY with one
//! palette color per vertex.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An unordered set of 3D points, optionally named after its source file.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    name: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numerical(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, name: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Coordinates as an `N x 3` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 3), |(i, k)| self.points[i][k])
    }

    pub fn from_matrix(m: ArrayView2<'_, f64>) -> Result<Self> {
        if m.ncols() != 3 {
            return Err(Error::Shape(format!("expected N x 3 coordinates, got {:?}", m.shape())));
        }
        Self::new(m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    pub fn centroid(&self) -> Point {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Center on the origin and scale into the unit ball.
    ///
    /// A cloud whose points all coincide maps every point to the origin.
    pub fn normalize(&self) -> PointCloud {
        let c = self.centroid();
        let mut points: Vec<Point> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max_norm = points.iter().map(|p| norm(p)).fold(0.0, f64::max);
        let magnitude = self
            .points
            .iter()
            .flat_map(|p| p.iter())
            .fold(1.0_f64, |m, v| m.max(v.abs()));
        if max_norm <= 1e-12 * magnitude {
            points.iter_mut().for_each(|p| *p = [0.0; 3]);
        } else {
            for p in points.iter_mut() {
                for v in p.iter_mut() {
                    *v /= max_norm;
                }
            }
            // Recenter after scaling so the mean is zero to rounding again.
            let n = points.len() as f64;
            let mut drift = [0.0; 3];
            for p in &points {
                for k in 0..3 {
                    drift[k] += p[k] / n;
                }
            }
            for p in points.iter_mut() {
                for k in 0..3 {
                    p[k] -= drift[k];
                }
            }
        }
        PointCloud {
            points,
            name: self.name.clone(),
        }
    }

    /// Resample to exactly `target` points under `seed`.
    ///
    /// With at least `target` points the draw is without replacement. A
    /// smaller cloud keeps every point once (in shuffled order) and tops up
    /// with draws made with replacement.
    pub fn downsample_random(&self, target: usize, seed: u64) -> Result<PointCloud> {
        if target == 0 {
            return Err(Error::Config("downsample target must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.len();
        let picks: Vec<usize> = if n >= target {
            index::sample(&mut rng, n, target).into_vec()
        } else {
            let mut all = index::sample(&mut rng, n, n).into_vec();
            all.extend((n..target).map(|_| rng.random_range(0..n)));
            all
        };
        Ok(PointCloud {
            points: picks.into_iter().map(|i| self.points[i]).collect(),
            name: self.name.clone(),
        })
    }
}

fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// A cloud with one hard cluster label and confidence per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, labels: Vec<usize>, confidences: Vec<f64>) -> Result<Self> {
        if labels.len() != cloud.len() || confidences.len() != cloud.len() {
            return Err(Error::Shape(format!(
                "{} points but {} labels and {} confidences",
                cloud.len(),
                labels.len(),
                confidences.len()
            )));
        }
        Ok(Self {
            cloud,
            labels,
            confidences,
        })
    }

    /// Label each point with the argmax of its soft-label row; ties go to
    /// the lowest cluster index.
    pub fn from_soft_labels(cloud: PointCloud, gamma: ArrayView2<'_, f64>) -> Result<Self> {
        if gamma.nrows() != cloud.len() {
            return Err(Error::Shape(format!(
                "{} points but soft labels have {} rows",
                cloud.len(),
                gamma.nrows()
            )));
        }
        let (labels, confidences) = gamma
            .rows()
            .into_iter()
            .map(|row| {
                row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
            })
            .unzip();
        Self::new(cloud, labels, confidences)
    }

    pub fn num_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Off,
    PlyAscii,
    Xyz,
}

impl CloudFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "off" => Some(CloudFormat::Off),
            "ply" => Some(CloudFormat::PlyAscii),
            "xyz" | "txt" | "pts" => Some(CloudFormat::Xyz),
            _ => None,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(CloudFormat::Off),
            "ply" | "ply_ascii" | "plyascii" => Ok(CloudFormat::PlyAscii),
            "xyz" => Ok(CloudFormat::Xyz),
            other => Err(Error::Config(format!("unknown cloud format '{other}'"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cloud = parse_cloud(&text, format)?;
    Ok(match path.file_stem().and_then(|s| s.to_str()) {
        Some(stem) => cloud.with_name(stem),
        None => cloud,
    })
}

pub fn parse_cloud(text: &str, format: CloudFormat) -> Result<PointCloud> {
    let points = match format {
        CloudFormat::Off => parse_off(text)?,
        CloudFormat::PlyAscii => parse_ply(text)?,
        CloudFormat::Xyz => parse_xyz(text)?,
    };
    PointCloud::new(points)
}

/// Non-blank lines with their 1-based line numbers, `#` comments stripped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_xyz_triple(line_no: usize, line: &str) -> Result<Point> {
    let mut fields = line.split_whitespace();
    let mut p = [0.0; 3];
    for (k, slot) in p.iter_mut().enumerate() {
        let tok = fields
            .next()
            .ok_or_else(|| Error::parse(line_no, format!("expected 3 coordinates, found {k}")))?;
        *slot = tok
            .parse::<f64>()
            .map_err(|_| Error::parse(line_no, format!("invalid coordinate '{tok}'")))?;
        if !slot.is_finite() {
            return Err(Error::parse(line_no, format!("non-finite coordinate '{tok}'")));
        }
    }
    Ok(p)
}

fn parse_xyz(text: &str) -> Result<Vec<Point>> {
    content_lines(text)
        .map(|(n, line)| parse_xyz_triple(n, line))
        .collect()
}

fn parse_count(line_no: usize, tok: Option<&str>, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::parse(line_no, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line_no, format!("invalid {what} '{tok}'")))
}

fn parse_off(text: &str) -> Result<Vec<Point>> {
    let mut lines = content_lines(text);
    let (header_no, header) = lines.next().ok_or_else(|| Error::parse(1, "missing OFF header"))?;
    if !header.starts_with("OFF") {
        return Err(Error::parse(header_no, "expected 'OFF' header"));
    }
    // Some exporters glue the counts onto the header line ("OFF490 900 0").
    let rest = header["OFF".len()..].trim();
    let (counts_no, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| Error::parse(header_no + 1, "missing vertex/face counts"))?
    } else {
        (header_no, rest)
    };
    let mut fields = counts.split_whitespace();
    let n_vertices = parse_count(counts_no, fields.next(), "vertex count")?;
    let n_faces = parse_count(counts_no, fields.next(), "face count")?;

    let mut points = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::parse(counts_no, format!("file ends before {n_vertices} vertices")))?;
        points.push(parse_xyz_triple(n, line)?);
    }
    for _ in 0..n_faces {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::parse(counts_no, format!("file ends before {n_faces} faces")))?;
        let mut fields = line.split_whitespace();
        let arity = parse_count(n, fields.next(), "face arity")?;
        if fields.count() < arity {
            return Err(Error::parse(n, "face has fewer indices than declared"));
        }
    }
    Ok(points)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(text: &str) -> Result<Vec<Point>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(Error::parse(n, "expected 'ply' magic")),
        None => return Err(Error::parse(1, "empty file")),
    }

    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "header has no end_header"))?;
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("format") => {
                match fields.next() {
                    Some("ascii") => {}
                    Some(other) => {
                        return Err(Error::parse(n, format!("unsupported PLY format '{other}'")))
                    }
                    None => return Err(Error::parse(n, "format line without a value")),
                }
                saw_format = true;
            }
            Some("element") => {
                let name = fields
                    .next()
                    .ok_or_else(|| Error::parse(n, "element without a name"))?;
                let count = parse_count(n, fields.next(), "element count")?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(n, "property before any element"))?;
                // `property list <count-type> <item-type> <name>` or `property <type> <name>`
                let name = fields
                    .last()
                    .ok_or_else(|| Error::parse(n, "property without a name"))?;
                element.properties.push(name.to_string());
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(Error::parse(n, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(1, "missing format line"));
    }

    let mut points = Vec::new();
    for element in &elements {
        if element.name != "vertex" {
            for _ in 0..element.count {
                lines
                    .next()
                    .ok_or_else(|| Error::parse(1, format!("file ends inside element '{}'", element.name)))?;
            }
            continue;
        }
        let column = |axis: &str| {
            element
                .properties
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| Error::parse(1, format!("vertex element lacks property '{axis}'")))
        };
        let cols = [column("x")?, column("y")?, column("z")?];
        points.reserve(element.count);
        for _ in 0..element.count {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(1, format!("file ends before {} vertices", element.count)))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < element.properties.len() {
                return Err(Error::parse(
                    n,
                    format!("expected {} vertex fields, found {}", element.properties.len(), fields.len()),
                ));
            }
            let mut p = [0.0; 3];
            for (slot, &c) in p.iter_mut().zip(&cols) {
                *slot = fields[c]
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::parse(n, format!("invalid coordinate '{}'", fields[c])))?;
            }
            points.push(p);
        }
    }
    Ok(points)
}

/// Serialize a cloud in any of the supported formats.
pub fn format_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::new();
    match format {
        CloudFormat::Off => {
            let _ = writeln!(out, "OFF\n{} 0 0", cloud.len());
        }
        CloudFormat::PlyAscii => {
            let _ = write!(
                out,
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
                cloud.len()
            );
        }
        CloudFormat::Xyz => {}
    }
    for p in cloud.points() {
        let _ = writeln!(out, "{:.6} {:.6} {:.6}", p[0], p[1], p[2]);
    }
    out
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    fs::write(path, format_cloud(cloud, format)).map_err(|e| Error::io(path, e))
}

pub type Rgb = [u8; 3];

/// ASCII PLY with per-vertex colors taken from `palette[label]`.
pub fn format_labeled_ply(labeled: &LabeledCloud, palette: &[Rgb]) -> Result<String> {
    let needed = labeled.num_clusters();
    if palette.len() < needed {
        return Err(Error::Config(format!(
            "palette has {} colors but labels reach cluster {}",
            palette.len(),
            needed - 1
        )));
    }
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        labeled.cloud.len()
    );
    for (p, &label) in labeled.cloud.points().iter().zip(&labeled.labels) {
        let [r, g, b] = palette[label];
        let _ = writeln!(out, "{:.6} {:.6} {:.6} {r} {g} {b}", p[0], p[1], p[2]);
    }
    Ok(out)
}

pub fn export_labeled_ply(labeled: &LabeledCloud, path: &Path, palette: &[Rgb]) -> Result<()> {
    let text = format_labeled_ply(labeled, palette)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `count` well-spread colors: hues stepped by the golden angle.
pub fn default_palette(count: usize) -> Vec<Rgb> {
    (0..count)
        .map(|i| {
            let hue = (i as f64 * 0.618_033_988_749_895).fract();
            let value = if i % 2 == 0 { 0.95 } else { 0.75 };
            hsv_to_rgb(hue, 0.85, value)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn off_with_a_face() {
        let text = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let c = parse_cloud(text, CloudFormat::Off).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points()[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn off_counts_glued_to_header() {
        let c = parse_cloud("OFF2 0 0\n0 0 0\n1 2 3\n", CloudFormat::Off).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn xyz_two_lines() {
        let c = parse_cloud("0 0 0\n1 0 0", CloudFormat::Xyz).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn xyz_comments_and_extra_columns() {
        let c = parse_cloud("# header\n1 2 3 0 0 1\n\n4 5 6 # trailing\n", CloudFormat::Xyz).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        match parse_cloud("0 0 0\n1 x 0\n", CloudFormat::Xyz) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_cloud("OFF\n2 0 0\n0 0 0\n1 1\n", CloudFormat::Off) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(parse_cloud("# nothing\n", CloudFormat::Xyz), Err(Error::EmptyCloud)));
        assert!(matches!(parse_cloud("OFF\n0 0 0\n", CloudFormat::Off), Err(Error::EmptyCloud)));
    }

    #[test]
    fn ply_skips_faces_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n";
        let c = parse_cloud(text, CloudFormat::PlyAscii).unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn ply_binary_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n";
        assert!(matches!(
            parse_cloud(text, CloudFormat::PlyAscii),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn normalize_two_points() {
        let n = cloud(&[[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]).normalize();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_degenerate() {
        let n = cloud(&[[5.0, 5.0, 5.0]]).normalize();
        assert_eq!(n.points(), &[[0.0; 3]]);
        let n = cloud(&[[0.1, 0.1, 0.1]; 7]).normalize();
        assert!(n.points().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn downsample_exhaustive_is_permutation() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let d = c.downsample_random(5, 3).unwrap();
        let mut xs: Vec<f64> = d.points().iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn downsample_with_replacement() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let d = c.downsample_random(6, 11).unwrap();
        assert_eq!(d.len(), 6);
        assert!(d.points().iter().all(|p| c.points().contains(p)));
        assert!(c.downsample_random(0, 1).is_err());
    }

    #[test]
    fn labeled_ply_colors() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let labeled = LabeledCloud::new(c, vec![0, 1], vec![1.0, 1.0]).unwrap();
        let text = format_labeled_ply(&labeled, &[[255, 0, 0], [0, 255, 0]]).unwrap();
        let rows: Vec<&str> = text.lines().skip_while(|l| *l != "end_header").skip(1).collect();
        assert!(rows[0].ends_with("255 0 0"));
        assert!(rows[1].ends_with("0 255 0"));
        assert!(format_labeled_ply(&labeled, &[[1, 2, 3]]).is_err());
    }

    #[test]
    fn argmax_labels_prefer_lowest_index() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let gamma = ndarray::array![[0.5, 0.5], [0.2, 0.8]];
        let l = LabeledCloud::from_soft_labels(c, gamma.view()).unwrap();
        assert_eq!(l.labels, vec![0, 1]);
        assert_eq!(l.confidences, vec![0.5, 0.8]);
    }

    #[test]
    fn palette_is_deterministic_and_sized() {
        let p = default_palette(64);
        assert_eq!(p.len(), 64);
        assert_eq!(p, default_palette(64));
        assert_ne!(p[0], p[1]);
    }
}
