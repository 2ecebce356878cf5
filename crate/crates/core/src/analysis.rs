//! Embedding export, 2D projection, cluster quality and novelty scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledCorpus;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelParams, Network, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub source_id: String,
    pub family_id: usize,
    pub values: Vec<f32>,
    /// Eval-mode max class probability of the head; NaN when unknown.
    pub max_prob: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.values.len();
            if let Some(bad) = rows.iter().find(|r| r.values.len() != d) {
                return Err(Error::shape(format!("{d} values"), format!("{} in `{}`", bad.values.len(), bad.source_id)));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.values.len())
    }

    pub fn families(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.rows.iter().map(|r| r.family_id).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["source_id".to_string(), "family_id".to_string()];
        header.extend((0..self.dim()).map(|i| format!("e{i:04}")));
        header.push("max_prob".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.source_id.clone(), r.family_id.to_string()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            rec.push(r.max_prob.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<embedding csv>"), e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads the CSV form; the trailing `max_prob` column is optional.
    pub fn read_csv<R: Read>(input: R, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("source_id") || header.get(1) != Some("family_id") {
            return Err(bad("expected header `source_id,family_id,e0000,...`".into()));
        }
        let has_prob = header.iter().last() == Some("max_prob");
        let dim = header.len() - 2 - usize::from(has_prob);
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let num = |s: &str| s.trim().parse::<f32>().map_err(|_| bad(format!("row {}: bad number `{s}`", i + 1)));
            let family_id = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: bad family id `{}`", i + 1, &rec[1])))?;
            let values = (2..2 + dim).map(|c| num(&rec[c])).collect::<Result<Vec<_>>>()?;
            let max_prob = if has_prob { num(&rec[2 + dim])? } else { f32::NAN };
            rows.push(EmbeddingRow {
                source_id: rec[0].to_string(),
                family_id,
                values,
                max_prob,
            });
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.rows[i].values[j] as f64)
    }
}

/// One eval-mode row per sample, in corpus order.
pub fn export_embeddings<T: Real>(
    network: &Network,
    params: &ModelParams<T>,
    corpus: &LabeledCorpus,
) -> Result<EmbeddingTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rows = corpus
        .samples
        .par_iter()
        .map(|s| {
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let emb = network.encoder_forward(params, &s.image, Mode::Eval, &mut rng)?;
            let probs = network.head_forward(params, &emb, Mode::Eval, &mut rng)?;
            Ok(EmbeddingRow {
                source_id: s.source_id.clone(),
                family_id: s.family_id,
                values: emb.values.iter().map(|v| v.as_f64() as f32).collect(),
                max_prob: probs.max_prob().as_f64() as f32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingTable::new(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    Pca,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub source_id: String,
    pub family_id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub method: ProjectionMethod,
    pub points: Vec<ProjectedPoint>,
    /// Share of total variance on the two axes (PCA only).
    pub explained_variance: Option<f64>,
}

impl Projection2D {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source_id", "family_id", "x", "y"])?;
        for p in &self.points {
            w.write_record([p.source_id.clone(), p.family_id.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<projection csv>"), e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, method: ProjectionMethod, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        if header != ["source_id", "family_id", "x", "y"] {
            return Err(bad(format!("expected header `source_id,family_id,x,y`, got `{}`", header.join(","))));
        }
        let mut points = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| rec[c].trim().to_string();
            let parse_f = |c: usize| field(c).parse::<f64>().map_err(|_| bad(format!("row {}: bad number", i + 1)));
            points.push(ProjectedPoint {
                source_id: field(0),
                family_id: field(1).parse().map_err(|_| bad(format!("row {}: bad family id", i + 1)))?,
                x: parse_f(2)?,
                y: parse_f(3)?,
            });
        }
        Ok(Self {
            method,
            points,
            explained_variance: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Scatter plot, one colour per family.
    pub fn to_svg(&self, title: &str) -> String {
        let xs: Vec<f64> = self.points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.y).collect();
        let frame = Frame::fit(&xs, &ys);
        let mut svg = frame.open(title);
        for p in &self.points {
            let (cx, cy) = frame.map(p.x, p.y);
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{}" fill-opacity="0.75"><title>{} (family {})</title></circle>"#,
                palette(p.family_id),
                xml_escape(&p.source_id),
                p.family_id
            );
        }
        let mut families: Vec<usize> = self.points.iter().map(|p| p.family_id).collect();
        families.sort_unstable();
        families.dedup();
        let labels: Vec<(String, &str)> = families.iter().map(|&f| (format!("family {f}"), palette(f))).collect();
        frame.legend(&mut svg, &labels);
        svg.push_str("</svg>\n");
        svg
    }
}

/// Projects to two dimensions. `external` is a shell command that reads the
/// embedding CSV on stdin and writes the projection CSV on stdout.
pub fn project_2d(table: &EmbeddingTable, method: ProjectionMethod, external: Option<&str>) -> Result<Projection2D> {
    if table.len() < 3 {
        return Err(Error::TooFewRows {
            needed: 3,
            got: table.len(),
        });
    }
    match method {
        ProjectionMethod::Pca => Ok(pca_2d(table)),
        ProjectionMethod::External => {
            let cmd = external.ok_or_else(|| Error::config("projector", "external projection needs a command"))?;
            run_external(table, cmd)
        }
    }
}

fn pca_2d(table: &EmbeddingTable) -> Projection2D {
    let mut x = table.matrix();
    let (n, d) = x.shape();
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    // eigen-solve on whichever Gram form is smaller
    let loadings: Vec<(f64, nalgebra::DVector<f64>)> = if d <= n {
        let cov = x.transpose() * &x;
        top_eigen(cov, 2)
    } else {
        let gram = &x * x.transpose();
        top_eigen(gram, 2)
            .into_iter()
            .map(|(lambda, u)| {
                let v = x.transpose() * u;
                let norm = v.norm();
                let v = if norm > 0.0 { v / norm } else { v };
                (lambda, v)
            })
            .collect()
    };
    let total: f64 = x.iter().map(|v| v * v).sum();
    let mut axes = Vec::with_capacity(2);
    for (_, mut v) in loadings.iter().cloned() {
        let pivot = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(nalgebra::DVector::zeros(d));
    }
    let coords = &x * DMatrix::from_columns(&axes);
    let captured: f64 = loadings.iter().map(|(l, _)| l.max(0.0)).sum();
    let points = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ProjectedPoint {
            source_id: r.source_id.clone(),
            family_id: r.family_id,
            x: coords[(i, 0)],
            y: coords[(i, 1)],
        })
        .collect();
    Projection2D {
        method: ProjectionMethod::Pca,
        points,
        explained_variance: Some(if total > 0.0 { captured / total } else { 0.0 }),
    }
}

/// Largest `k` eigenpairs of a symmetric matrix, in decreasing order.
fn top_eigen(m: DMatrix<f64>, k: usize) -> Vec<(f64, nalgebra::DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect()
}

fn run_external(table: &EmbeddingTable, cmd: &str) -> Result<Projection2D> {
    let mut input = Vec::new();
    table.write_csv(&mut input)?;
    let spawn_err = |e: std::io::Error| Error::ExternalToolFailure {
        status: None,
        stderr: format!("could not run `{cmd}`: {e}"),
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(spawn_err)?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    // feed stdin concurrently so a tool that streams output cannot deadlock
    let feeder = thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let out = child.wait_with_output().map_err(spawn_err)?;
    let _ = feeder.join();
    if !out.status.success() {
        return Err(Error::ExternalToolFailure {
            status: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    let proj = Projection2D::read_csv(&out.stdout[..], ProjectionMethod::External, Path::new(cmd)).map_err(|e| {
        Error::ExternalToolFailure {
            status: out.status.code(),
            stderr: format!("unreadable output: {e}"),
        }
    })?;
    if proj.points.len() != table.len() {
        return Err(Error::ExternalToolFailure {
            status: out.status.code(),
            stderr: format!("expected {} rows, got {}", table.len(), proj.points.len()),
        });
    }
    Ok(proj)
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette over all rows, Euclidean distance, labels = family id.
/// A sample with `max(a, b) = 0` scores 0.
pub fn cluster_quality(table: &EmbeddingTable) -> Result<f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &table.rows {
        *counts.entry(r.family_id).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateLabels(format!("{} family present, need at least 2", counts.len())));
    }
    if let Some((f, c)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::DegenerateLabels(format!("family {f} has {c} row, need at least 2")));
    }
    let slot: BTreeMap<usize, usize> = counts.keys().enumerate().map(|(i, &f)| (f, i)).collect();
    let k = counts.len();
    let sizes: Vec<usize> = counts.values().copied().collect();
    let scores: Vec<f64> = table
        .rows
        .par_iter()
        .map(|ri| {
            let mut sums = vec![0.0; k];
            for rj in &table.rows {
                sums[slot[&rj.family_id]] += euclid(&ri.values, &rj.values);
            }
            let own = slot[&ri.family_id];
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Family centroids and member-distance thresholds fitted on a reference table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyModel {
    pub families: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Nearest-rank percentile of member-to-centroid distances per family.
    pub thresholds: Vec<f64>,
    pub percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub query_id: String,
    pub nearest_family: usize,
    pub distance: f64,
    pub distances: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub novel: bool,
    pub max_prob: Option<f32>,
}

/// Nearest-rank percentile of `values` (`q` in (0, 100]).
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * values.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

impl NoveltyModel {
    pub fn fit(reference: &EmbeddingTable, percentile: f64) -> Result<Self> {
        if reference.is_empty() || reference.dim() == 0 {
            return Err(Error::EmptyReference);
        }
        let families = reference.families();
        let d = reference.dim();
        let mut centroids = Vec::with_capacity(families.len());
        let mut thresholds = Vec::with_capacity(families.len());
        for &f in &families {
            let members: Vec<&EmbeddingRow> = reference.rows.iter().filter(|r| r.family_id == f).collect();
            let mut c = vec![0.0; d];
            for m in &members {
                for (a, &v) in c.iter_mut().zip(&m.values) {
                    *a += v as f64;
                }
            }
            c.iter_mut().for_each(|a| *a /= members.len() as f64);
            let mut dists: Vec<f64> = members.iter().map(|m| dist_to(&c, &m.values)).collect();
            thresholds.push(nearest_rank(&mut dists, percentile));
            centroids.push(c);
        }
        Ok(Self {
            families,
            centroids,
            thresholds,
            percentile,
        })
    }

    /// Distance to the nearest centroid; novel when the query lies beyond
    /// every family's threshold.
    pub fn score(&self, query_id: &str, query: &[f32], max_prob: Option<f32>) -> Result<NoveltyReport> {
        let d = self.centroids.first().map_or(0, Vec::len);
        if query.len() != d {
            return Err(Error::shape(format!("{d} values"), query.len()));
        }
        let distances: Vec<f64> = self.centroids.iter().map(|c| dist_to(c, query)).collect();
        let best = (0..distances.len())
            .min_by(|&a, &b| distances[a].total_cmp(&distances[b]))
            .expect("fitted model has families");
        let novel = distances.iter().zip(&self.thresholds).all(|(d, t)| d > t);
        Ok(NoveltyReport {
            query_id: query_id.to_string(),
            nearest_family: self.families[best],
            distance: distances[best],
            distances,
            thresholds: self.thresholds.clone(),
            novel,
            max_prob,
        })
    }
}

fn dist_to(c: &[f64], v: &[f32]) -> f64 {
    c.iter().zip(v).map(|(&a, &b)| (a - b as f64).powi(2)).sum::<f64>().sqrt()
}

pub const NOVELTY_PERCENTILE: f64 = 95.0;

pub fn novelty_score(reference: &EmbeddingTable, query_id: &str, query: &[f32]) -> Result<NoveltyReport> {
    NoveltyModel::fit(reference, NOVELTY_PERCENTILE)?.score(query_id, query, None)
}

pub fn write_novelty_csv<W: Write>(reports: &[NoveltyReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "nearest_family", "distance", "nearest_threshold", "novel", "max_prob"])?;
    for r in reports {
        let slot = r
            .distances
            .iter()
            .position(|&d| d == r.distance)
            .unwrap_or(0);
        w.write_record([
            r.query_id.clone(),
            r.nearest_family.to_string(),
            r.distance.to_string(),
            r.thresholds.get(slot).copied().unwrap_or(f64::NAN).to_string(),
            r.novel.to_string(),
            r.max_prob.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<novelty csv>"), e))?;
    Ok(())
}

/// Overlay of named `(x, y)` curves, e.g. loss against step.
pub fn line_chart_svg(title: &str, curves: &[(String, Vec<(f64, f64)>)], log_y: bool) -> String {
    let tf = |y: f64| if log_y { y.max(1e-12).log10() } else { y };
    let xs: Vec<f64> = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = curves.iter().flat_map(|(_, c)| c.iter().map(|p| tf(p.1))).collect();
    let frame = Frame::fit(&xs, &ys);
    let mut svg = frame.open(title);
    for (i, (_, pts)) in curves.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = frame.map(x, tf(y));
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            palette(i),
            path.join(" ")
        );
    }
    if log_y {
        let _ = writeln!(svg, r#"<text x="8" y="{}" font-size="11">log10 scale</text>"#, frame.height - 8.0);
    }
    let labels: Vec<(String, &str)> = curves.iter().enumerate().map(|(i, (n, _))| (n.clone(), palette(i))).collect();
    frame.legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    svg
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn palette(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    width: f64,
    height: f64,
    margin: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let range = |v: &[f64]| {
            let lo = v.iter().copied().filter(|a| a.is_finite()).fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().filter(|a| a.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = range(xs);
        let (y0, y1) = range(ys);
        Self {
            width: 640.0,
            height: 480.0,
            margin: 40.0,
            x0,
            x1,
            y0,
            y1,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (x - self.x0) / (self.x1 - self.x0) * w,
            self.height - self.margin - (y - self.y0) / (self.y1 - self.y0) * h,
        )
    }

    fn open(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
            self.width / 2.0,
            xml_escape(title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            self.width - 2.0 * self.margin,
            self.height - 2.0 * self.margin,
            m = self.margin
        );
        let _ = writeln!(
            s,
            "<text x=\"{m}\" y=\"{}\" font-size=\"10\">{:.3}</text><text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>",
            self.height - self.margin + 14.0,
            self.x0,
            self.width - self.margin,
            self.height - self.margin + 14.0,
            self.x1,
            m = self.margin
        );
        let _ = writeln!(
            s,
            "<text x=\"4\" y=\"{}\" font-size=\"10\">{:.3}</text><text x=\"4\" y=\"{}\" font-size=\"10\">{:.3}</text>",
            self.height - self.margin,
            self.y0,
            self.margin + 10.0,
            self.y1
        );
        s
    }

    fn legend(&self, svg: &mut String, labels: &[(String, &str)]) {
        for (i, (name, color)) in labels.iter().enumerate() {
            let y = self.margin + 14.0 + 16.0 * i as f64;
            let x = self.width - self.margin - 130.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                y - 9.0,
                x + 14.0,
                y,
                xml_escape(name)
            );
        }
    }
}
