use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{at_path, read_text};
use crate::error::{Error, Result};
use crate::evaluation::CorrespondenceSet;
use crate::geometry::{PointCloud, Vec3};
use crate::mining::{Corpus, CorpusModel};

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(tok: &str, what: &'static str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::format(what, format!("line {line}: {tok:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::format(what, format!("line {line}: non-finite value {tok}")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, what: &'static str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::format(what, format!("line {line}: {tok:?} is not a non-negative integer")))
}

/// `x y z` per line; `#` lines are comments.
pub fn parse_xyz(text: &str, id: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (ln, line) in content_lines(text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::format("xyz", format!("line {ln}: expected 3 values, got {}", toks.len())));
        }
        pts.push(Vec3::new(
            parse_f64(toks[0], "xyz", ln)?,
            parse_f64(toks[1], "xyz", ln)?,
            parse_f64(toks[2], "xyz", ln)?,
        ));
    }
    Ok(PointCloud::new(id, pts))
}

/// Shortest round-tripping decimal form, one point per line.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 40);
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

/// ASCII PLY with float vertex properties `x y z` and optionally
/// `nx ny nz`. Elements after the vertices (faces) are ignored.
pub fn parse_ply(text: &str, id: &str) -> Result<PointCloud> {
    let bad = |d: String| Error::format("ply", d);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(bad("missing 'ply' magic line".into())),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut ascii = false;
    loop {
        let Some((ln, line)) = lines.next() else {
            return Err(bad("header ends without 'end_header'".into()));
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = true,
            ["format", f, ..] => return Err(bad(format!("line {ln}: unsupported format {f}"))),
            ["element", "vertex", n] => {
                if seen_vertex {
                    return Err(bad(format!("line {ln}: second vertex element")));
                }
                vertex_count = Some(parse_usize(n, "ply", ln)?);
                in_vertex = true;
                seen_vertex = true;
            }
            ["element", ..] => {
                if !seen_vertex {
                    return Err(bad(format!("line {ln}: vertex element must come first")));
                }
                in_vertex = false;
            }
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(bad(format!("line {ln}: vertex property {name} has non-float type {ty}")));
                }
                if !matches!(*name, "x" | "y" | "z" | "nx" | "ny" | "nz") {
                    return Err(bad(format!("line {ln}: unsupported vertex property {name}")));
                }
                if props.iter().any(|p| p == name) {
                    return Err(bad(format!("line {ln}: duplicate property {name}")));
                }
                props.push(name.to_string());
            }
            ["property", ..] if in_vertex => {
                return Err(bad(format!("line {ln}: unsupported vertex property line {line:?}")));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("line {ln}: unexpected header line {line:?}"))),
        }
    }
    if !ascii {
        return Err(bad("no 'format ascii 1.0' line".into()));
    }
    let n = vertex_count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (Some(x), Some(y), Some(z)) = (col("x"), col("y"), col("z")) else {
        return Err(bad("vertex properties must include x, y and z".into()));
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        (None, None, None) => None,
        _ => return Err(bad("normals need all of nx, ny, nz".into())),
    };
    let mut pts = Vec::with_capacity(n);
    let mut normals = Vec::new();
    let mut read = 0;
    for (ln, line) in lines {
        if read == n {
            break;
        }
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| parse_f64(t, "ply", ln))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != props.len() {
            return Err(bad(format!("line {ln}: expected {} values, got {}", props.len(), vals.len())));
        }
        pts.push(Vec3::new(vals[x], vals[y], vals[z]));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vec3::new(vals[a], vals[b], vals[c]));
        }
        read += 1;
    }
    if read < n {
        return Err(bad(format!("header declares {n} vertices, found {read}")));
    }
    let cloud = PointCloud::new(id, pts);
    match normal_cols {
        Some(_) => cloud.with_normals(normals),
        None => Ok(cloud),
    }
}

/// Loads `.ply` files as PLY and anything else as XYZ. The cloud id is the
/// file stem.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    at_path(path, if is_ply { parse_ply(&text, &id) } else { parse_xyz(&text, &id) })
}

/// One point index per line.
pub fn parse_indices(text: &str) -> Result<Vec<usize>> {
    content_lines(text).map(|(ln, l)| parse_usize(l, "keypoint list", ln)).collect()
}

pub fn format_indices(indices: &[usize]) -> String {
    indices.iter().map(|i| format!("{i}\n")).collect()
}

pub fn load_indices(path: &Path) -> Result<Vec<usize>> {
    at_path(path, parse_indices(&read_text(path)?))
}

/// One part label per line, aligned with the keypoint list.
pub fn parse_labels(text: &str) -> Result<Vec<u32>> {
    content_lines(text)
        .map(|(ln, l)| {
            l.parse()
                .map_err(|_| Error::format("label list", format!("line {ln}: {l:?} is not a label")))
        })
        .collect()
}

pub fn format_labels(labels: &[u32]) -> String {
    labels.iter().map(|i| format!("{i}\n")).collect()
}

pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    at_path(path, parse_labels(&read_text(path)?))
}

/// Lines `model_a model_b idx_a idx_b [sym_group]`, model numbers being
/// positions in the manifest. Lines are grouped into one set per ordered
/// model pair, in order of first appearance.
pub fn parse_correspondences(text: &str) -> Result<Vec<CorrespondenceSet>> {
    let mut sets: Vec<CorrespondenceSet> = Vec::new();
    let mut slot: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (ln, line) in content_lines(text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&toks.len()) {
            return Err(Error::format(
                "correspondence file",
                format!("line {ln}: expected 4 or 5 fields, got {}", toks.len()),
            ));
        }
        let f = |i: usize| parse_usize(toks[i], "correspondence file", ln);
        let (ma, mb, ia, ib) = (f(0)?, f(1)?, f(2)?, f(3)?);
        let group = match toks.get(4) {
            Some(g) => Some(g.parse::<u32>().map_err(|_| {
                Error::format("correspondence file", format!("line {ln}: bad symmetry group {g:?}"))
            })?),
            None => None,
        };
        let at = *slot.entry((ma, mb)).or_insert_with(|| {
            sets.push(CorrespondenceSet::new(ma, mb));
            sets.len() - 1
        });
        sets[at].push(ia, ib, group);
    }
    Ok(sets)
}

pub fn format_correspondences(set: &CorrespondenceSet) -> String {
    let mut s = String::new();
    for &(a, b) in &set.pairs {
        let _ = write!(s, "{} {} {a} {b}", set.model_a, set.model_b);
        if let (Some(g), Some(_)) = (set.sym_a.get(&a), set.sym_b.get(&b)) {
            let _ = write!(s, " {g}");
        }
        s.push('\n');
    }
    s
}

pub fn load_correspondences(path: &Path) -> Result<Vec<CorrespondenceSet>> {
    at_path(path, parse_correspondences(&read_text(path)?))
}

/// Dataset listing: `clouds:`, `keypoints:`, `labels:` and
/// `correspondences:` stanzas, one path per line. Relative paths are taken
/// from the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub clouds: Vec<PathBuf>,
    pub keypoints: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub correspondences: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let mut m = Manifest::default();
        let mut current: Option<&mut Vec<PathBuf>> = None;
        for (ln, line) in content_lines(text) {
            match line {
                "clouds:" => current = Some(&mut m.clouds),
                "keypoints:" => current = Some(&mut m.keypoints),
                "labels:" => current = Some(&mut m.labels),
                "correspondences:" => current = Some(&mut m.correspondences),
                _ if line.ends_with(':') => {
                    return Err(Error::format("manifest", format!("line {ln}: unknown stanza {line:?}")));
                }
                _ => match current.as_mut() {
                    Some(list) => list.push(base.join(line)),
                    None => {
                        return Err(Error::format("manifest", format!("line {ln}: path before any stanza")));
                    }
                },
            }
        }
        let n = m.clouds.len();
        if m.keypoints.len() != n || m.labels.len() != n {
            return Err(Error::format(
                "manifest",
                format!(
                    "{n} clouds, {} keypoint files and {} label files; counts must agree",
                    m.keypoints.len(),
                    m.labels.len()
                ),
            ));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let base = path.parent().unwrap_or(Path::new("."));
        at_path(path, Manifest::parse(&read_text(path)?, base))
    }

    /// Serialises with paths relative to `base` where possible.
    pub fn format(&self, base: &Path) -> String {
        let mut s = String::from("# pointdesc manifest\n");
        for (name, list) in [
            ("clouds", &self.clouds),
            ("keypoints", &self.keypoints),
            ("labels", &self.labels),
            ("correspondences", &self.correspondences),
        ] {
            let _ = writeln!(s, "{name}:");
            for p in list {
                let _ = writeln!(s, "{}", p.strip_prefix(base).unwrap_or(p).display());
            }
        }
        s
    }

    /// Reads every listed file into a validated corpus.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let mut models = Vec::with_capacity(self.clouds.len());
        for i in 0..self.clouds.len() {
            let cloud = load_cloud(&self.clouds[i])?;
            let keypoints = load_indices(&self.keypoints[i])?;
            let part_labels = load_labels(&self.labels[i])?;
            models.push(CorpusModel {
                cloud,
                keypoints,
                part_labels,
            });
        }
        let mut correspondences = Vec::new();
        for p in &self.correspondences {
            correspondences.extend(load_correspondences(p)?);
        }
        let corpus = Corpus {
            models,
            correspondences,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub fn load_corpus(manifest: &Path) -> Result<Corpus> {
    Manifest::load(manifest)?.load_corpus()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_round_trip_and_comments() {
        let c = parse_xyz("# header\n0 0 0\n\n1.5 -2 3e-3\n", "a").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points[1], Vec3::new(1.5, -2.0, 3e-3));
        let again = parse_xyz(&format_xyz(&c), "a").unwrap();
        assert_eq!(again, c);
        assert!(parse_xyz("1 2\n", "a").is_err());
        assert!(parse_xyz("1 2 nan\n", "a").is_err());
        assert!(parse_xyz("1 2 x\n", "a").is_err());
    }

    #[test]
    fn ply_subset() {
        let ply = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n\
                   property float z\nproperty float nx\nproperty float ny\nproperty float nz\n\
                   element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                   0 0 0 0 0 1\n1 0 0 0 0 1\n3 0 1 1\n";
        let c = parse_ply(ply, "p").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.normals.as_ref().unwrap()[1], Vec3::new(0.0, 0.0, 1.0));

        let rgb = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                   property float z\nproperty uchar red\nend_header\n0 0 0 255\n";
        let e = parse_ply(rgb, "p").unwrap_err().to_string();
        assert!(e.contains("red"), "{e}");
        let short = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
                     property float z\nend_header\n0 0 0\n";
        assert!(parse_ply(short, "p").is_err());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n", "p").is_err());
        assert!(parse_ply("xyz\n", "p").is_err());
    }

    #[test]
    fn correspondences_group_by_pair() {
        let text = "0 1 5 7 3\n0 1 6 8\n1 2 0 0\n";
        let sets = parse_correspondences(text).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].pairs, vec![(5, 7), (6, 8)]);
        assert_eq!(sets[0].sym_b.get(&7), Some(&3));
        assert_eq!(parse_correspondences(&format_correspondences(&sets[0])).unwrap()[0], sets[0]);
        assert!(parse_correspondences("0 1 2\n").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let base = Path::new("/data");
        let text = "clouds:\na.xyz\nb.xyz\nkeypoints:\na.kp\nb.kp\nlabels:\na.lab\nb.lab\ncorrespondences:\nab.txt\n";
        let m = Manifest::parse(text, base).unwrap();
        assert_eq!(m.clouds[1], base.join("b.xyz"));
        assert_eq!(Manifest::parse(&m.format(base), base).unwrap(), m);
        assert!(Manifest::parse("clouds:\na.xyz\n", base).is_err());
        assert!(Manifest::parse("a.xyz\n", base).is_err());
        assert!(Manifest::parse("meshes:\n", base).is_err());
    }
}
