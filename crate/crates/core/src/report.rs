// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset-level aggregation of cue profiles, CSV tables and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{CueProfile, Method, ScoreMatrix};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Seventeen significant digits in scientific notation; parses back to the
/// same `f64` and never depends on locale.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Mean and standard error per `(layer, series)` over the profiles of one
/// cue-count bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateProfile {
    pub method: Method,
    pub cue_count: usize,
    pub n: usize,
    pub series: Vec<String>,
    /// `layers × series`.
    pub mean: Matrix,
    pub stderr: Matrix,
}

impl AggregateProfile {
    pub fn n_layers(&self) -> usize {
        self.mean.rows()
    }

    /// Streaming (Welford) mean and standard error of the mean.
    pub fn aggregate(profiles: &[CueProfile], bucket: usize) -> Result<Self> {
        let first = profiles.first().ok_or_else(|| Error::Invalid(format!("no profiles for cue count {bucket}")))?;
        let shape = first.values.shape();
        for p in profiles {
            if p.cue_count != bucket {
                return Err(Error::Invalid(format!("profile with {} cues in bucket {bucket}", p.cue_count)));
            }
            if p.values.shape() != shape || p.include_others != first.include_others {
                return Err(Error::shape("aggregate", "profiles differ in layer or series count"));
            }
            if p.method != first.method {
                return Err(Error::Invalid("profiles from different methods".into()));
            }
        }
        let mut mean = Matrix::zeros(shape.0, shape.1);
        let mut m2 = Matrix::zeros(shape.0, shape.1);
        for (k, p) in profiles.iter().enumerate() {
            let n = (k + 1) as f64;
            for ((mu, s), &x) in mean.data_mut().iter_mut().zip(m2.data_mut()).zip(p.values.data()) {
                let delta = x - *mu;
                *mu += delta / n;
                *s += delta * (x - *mu);
            }
        }
        let n = profiles.len();
        let mut stderr = Matrix::zeros(shape.0, shape.1);
        if n > 1 {
            for (se, &s) in stderr.data_mut().iter_mut().zip(m2.data()) {
                *se = (s / (n - 1) as f64 / n as f64).sqrt();
            }
        }
        Ok(Self { method: first.method, cue_count: bucket, n, series: first.series_labels(), mean, stderr })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["method", "cue_count", "n"])?;
        w.write_record([self.method.as_str(), &self.cue_count.to_string(), &self.n.to_string()])?;
        w.write_record(["layer", "series", "mean", "stderr"])?;
        for l in 0..self.n_layers() {
            for (s, name) in self.series.iter().enumerate() {
                w.write_record([
                    (l + 1).to_string(),
                    name.clone(),
                    format_real(self.mean.get(l, s)),
                    format_real(self.stderr.get(l, s)),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(input);
        let recs: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        let bad = |m: &str| Error::Format(format!("aggregate csv: {m}"));
        if recs.len() < 3 || &recs[0][0] != "method" || &recs[2][0] != "layer" {
            return Err(bad("missing header"));
        }
        let meta = &recs[1];
        let method: Method = meta.get(0).ok_or_else(|| bad("method"))?.parse()?;
        let parse_usize = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| bad("integer"));
        let cue_count = parse_usize(meta.get(1))?;
        let n = parse_usize(meta.get(2))?;
        let mut series: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        let mut layers = 0;
        for rec in &recs[3..] {
            if rec.len() != 4 {
                return Err(bad("data row needs four fields"));
            }
            let layer = parse_usize(rec.get(0))?;
            if layer == 0 {
                return Err(bad("layers are 1-based"));
            }
            let name = rec[1].to_string();
            let s = match series.iter().position(|x| *x == name) {
                Some(s) => s,
                None => {
                    series.push(name);
                    series.len() - 1
                }
            };
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad("number"));
            cells.insert((layer - 1, s), (real(&rec[2])?, real(&rec[3])?));
            layers = layers.max(layer);
        }
        if cells.len() != layers * series.len() {
            return Err(bad("table is not rectangular"));
        }
        let mut mean = Matrix::zeros(layers, series.len());
        let mut stderr = Matrix::zeros(layers, series.len());
        for ((l, s), (m, e)) in cells {
            mean.set(l, s, m);
            stderr.set(l, s, e);
        }
        Ok(Self { method, cue_count, n, series, mean, stderr })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f)
    }
}

/// Group profiles by cue count and aggregate each bucket.
pub fn aggregate_by_bucket(profiles: &[CueProfile]) -> Result<BTreeMap<usize, AggregateProfile>> {
    let mut groups: BTreeMap<usize, Vec<CueProfile>> = BTreeMap::new();
    for p in profiles {
        groups.entry(p.cue_count).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(k, ps)| AggregateProfile::aggregate(&ps, k).map(|a| (k, a)))
        .collect()
}

/// `<root>/<method>/<cue_count>.<ext>`.
pub fn bucket_path(root: &Path, method: Method, cue_count: usize, ext: &str) -> PathBuf {
    root.join(method.as_str()).join(format!("{cue_count}.{ext}"))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const OTHERS_COLOR: &str = "#7f7f7f";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(x: f64) -> String {
    let v = format!("{x:.2}");
    if v == "-0.00" { "0.00".into() } else { v }
}

/// Line plot: one polyline per series over layers, with a legend.
pub fn profile_svg(agg: &AggregateProfile) -> Result<String> {
    let (layers, series) = agg.mean.shape();
    if layers == 0 || series == 0 {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let mut lo = agg.mean.data().iter().copied().fold(0.0f64, f64::min);
    let mut hi = agg.mean.data().iter().copied().fold(0.0f64, f64::max);
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    lo -= if lo < 0.0 { pad } else { 0.0 };
    hi += pad;
    let x_of = |l: usize| left + if layers == 1 { pw / 2.0 } else { pw * l as f64 / (layers - 1) as f64 };
    let y_of = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{} · {} cues · n = {}</text>"#,
        num(left + pw / 2.0),
        escape(agg.method.as_str()),
        agg.cue_count,
        agg.n
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        num(pw),
        num(ph)
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#dddddd\"/><text x=\"{2}\" y=\"{3}\" text-anchor=\"end\">{4:.3}</text>",
            num(y),
            num(left + pw),
            num(left - 6.0),
            num(y + 4.0),
            v
        );
    }
    for l in 0..layers {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(x_of(l)),
            num(top + ph + 18.0),
            l + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
        num(left + pw / 2.0),
        num(h - 10.0)
    );
    for (k, name) in agg.series.iter().enumerate() {
        let color = if name == "Others" { OTHERS_COLOR } else { PALETTE[k % PALETTE.len()] };
        let dash = if name == "Others" { r#" stroke-dasharray="5,3""# } else { "" };
        let pts: Vec<String> = (0..layers).map(|l| format!("{},{}", num(x_of(l)), num(y_of(agg.mean.get(l, k))))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"{dash}/><text x="{3}" y="{4}">{5}</text>"#,
            num(lx),
            num(ly),
            num(lx + 20.0),
            num(lx + 26.0),
            num(ly + 4.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Heatmap of a per-example score matrix: x = position, y = layer (layer 1
/// at the bottom). Signed data uses a blue–white–red scale.
pub fn heatmap_svg(scores: &ScoreMatrix, labels: &[String], title: &str) -> Result<String> {
    let (layers, cols) = scores.scores.shape();
    if layers == 0 || cols == 0 {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    if labels.len() != cols {
        return Err(Error::shape("heatmap_svg", "one label per column expected"));
    }
    let cell = 24.0;
    let (left, top, bottom) = (60.0, 36.0, 90.0);
    let w = left + cell * cols as f64 + 20.0;
    let h = top + cell * layers as f64 + bottom;
    let data = scores.scores.data();
    let max_abs = data.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-300);
    let signed = data.iter().any(|&v| v < 0.0);
    let color = |v: f64| -> String {
        let a = (v.abs() / max_abs).min(1.0);
        let fade = |c: f64| (255.0 - a * (255.0 - c)).round() as u8;
        if signed && v < 0.0 {
            format!("#{:02x}{:02x}{:02x}", fade(33.0), fade(102.0), fade(172.0))
        } else {
            format!("#{:02x}{:02x}{:02x}", fade(178.0), fade(24.0), fade(43.0))
        }
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{1}" viewBox="0 0 {0} {1}" font-family="sans-serif" font-size="11">"#,
        num(w),
        num(h)
    );
    let _ = writeln!(s, r#"<rect width="{}" height="{}" fill="white"/>"#, num(w), num(h));
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(title));
    for l in 0..layers {
        let y = top + cell * (layers - 1 - l) as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">layer {}</text>"#,
            num(left - 6.0),
            num(y + cell / 2.0 + 4.0),
            l + 1
        );
        for j in 0..cols {
            let v = scores.get(l, j);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}" stroke="white"><title>{:.4}</title></rect>"#,
                num(left + cell * j as f64),
                num(y),
                color(v),
                v
            );
        }
    }
    let base = top + cell * layers as f64 + 8.0;
    for (j, label) in labels.iter().enumerate() {
        let x = left + cell * j as f64 + cell / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{0}" y="{1}" transform="rotate(60 {0} {1})">{2}</text>"#,
            num(x),
            num(base),
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Write `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Emit `<root>/<method>/<k>.csv` and `.svg` for every bucket. Returns the
/// written paths in order.
pub fn emit_tree(root: &Path, aggregates: &BTreeMap<usize, AggregateProfile>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (&k, agg) in aggregates {
        let csv_path = bucket_path(root, agg.method, k, "csv");
        let mut buf = Vec::new();
        agg.write_csv(&mut buf)?;
        write_file(&csv_path, &buf)?;
        let svg_path = bucket_path(root, agg.method, k, "svg");
        write_file(&svg_path, profile_svg(agg)?.as_bytes())?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn profile(values: Vec<Vec<f64>>, k: usize) -> CueProfile {
        CueProfile {
            method: Method::ValueZeroing,
            cue_count: k,
            values: Matrix::from_rows(&values).unwrap(),
            include_others: true,
        }
    }

    fn random_profiles(n: usize, layers: usize, k: usize, seed: u64) -> Vec<CueProfile> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| profile((0..layers).map(|_| (0..=k).map(|_| rng.next_f64()).collect()).collect(), k))
            .collect()
    }

    #[test]
    fn single_and_pair_aggregates() {
        let a = profile(vec![vec![0.5, 0.2, 0.3]], 2);
        let one = AggregateProfile::aggregate(std::slice::from_ref(&a), 2).unwrap();
        assert_eq!(one.mean, a.values);
        assert!(one.stderr.data().iter().all(|&v| v == 0.0));
        let b = profile(vec![vec![0.1, 0.4, 0.5]], 2);
        let two = AggregateProfile::aggregate(&[a, b], 2).unwrap();
        for (m, e) in two.mean.data().iter().zip([0.3, 0.3, 0.4]) {
            assert!((m - e).abs() < 1e-15);
        }
        assert!(AggregateProfile::aggregate(&[], 2).is_err());
    }

    #[test]
    fn matches_two_pass_oracle() {
        let ps = random_profiles(137, 4, 3, 5);
        let agg = AggregateProfile::aggregate(&ps, 3).unwrap();
        let n = ps.len() as f64;
        for cell in 0..agg.mean.len() {
            let xs: Vec<f64> = ps.iter().map(|p| p.values.data()[cell]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((agg.mean.data()[cell] - mean).abs() < 1e-12);
            assert!((agg.stderr.data()[cell] - (var / n).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariant_and_bucket_checked() {
        let mut ps = random_profiles(40, 3, 2, 8);
        let a = AggregateProfile::aggregate(&ps, 2).unwrap();
        ps.reverse();
        let b = AggregateProfile::aggregate(&ps, 2).unwrap();
        assert!(a.mean.max_abs_diff(&b.mean) < 1e-12);
        assert!(AggregateProfile::aggregate(&ps, 3).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let agg = AggregateProfile::aggregate(&random_profiles(9, 12, 4, 2), 4).unwrap();
        let mut buf = Vec::new();
        agg.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3 + 12 * 5);
        assert!(!text.contains(",0,") && text.lines().nth(3).unwrap().contains('.'));
        let back = AggregateProfile::read_csv(&buf[..]).unwrap();
        assert_eq!(back, agg);
        assert_eq!(profile_svg(&back).unwrap(), profile_svg(&agg).unwrap());
    }

    #[test]
    fn svg_is_deterministic_with_one_line_per_series() {
        let agg = AggregateProfile::aggregate(&random_profiles(5, 4, 3, 1), 3).unwrap();
        let svg = profile_svg(&agg).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains(">Others</text>") && svg.contains(">cue 3</text>"));
        assert_eq!(svg, profile_svg(&agg).unwrap());
        let empty = AggregateProfile { mean: Matrix::zeros(0, 0), stderr: Matrix::zeros(0, 0), ..agg };
        assert!(profile_svg(&empty).is_err());
    }

    #[test]
    fn heatmap_has_a_cell_per_entry() {
        let raw = Matrix::from_rows(&[vec![0.1, -0.2, 0.0], vec![0.3, 0.0, 0.05]]).unwrap();
        let s = ScoreMatrix::new(Method::ValuePatching, crate::attribution::Unit::Word, 2, raw, None);
        let labels: Vec<String> = ["a<b", "he", "."].iter().map(|s| s.to_string()).collect();
        let svg = heatmap_svg(&s, &labels, "example").unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 6);
        assert!(svg.contains("a&lt;b"));
        assert!(heatmap_svg(&s, &labels[..2], "x").is_err());
    }

    #[test]
    fn tree_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = random_profiles(3, 2, 2, 1);
        ps.extend(random_profiles(2, 2, 3, 2));
        let aggs = aggregate_by_bucket(&ps).unwrap();
        let paths = emit_tree(dir.path(), &aggs).unwrap();
        assert_eq!(paths.len(), 4);
        assert!(dir.path().join("value-zeroing/2.csv").exists());
        assert!(dir.path().join("value-zeroing/3.svg").exists());
        assert_eq!(aggs[&2].n, 3);
    }
}
