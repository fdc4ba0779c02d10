//! Finite discrete probability measures on `R^d` and images-as-measures.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance on the total mass accepted without renormalization.
pub const MASS_TOLERANCE: f64 = 1e-8;

/// Default threshold used to strip dust mass from solver outputs.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-12;

/// A weighted point cloud `Σ_s q_s δ_{x_s}`.
///
/// Points are stored contiguously (`support_size × dim`). Weights are
/// nonnegative and sum to one within [`MASS_TOLERANCE`]. Duplicate points are
/// allowed; see [`DiscreteMeasure::merge_duplicates`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Validates points and weights without touching the weights.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::unchecked_mass(points, weights)?;
        let total: f64 = m.weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::NotNormalized(total));
        }
        Ok(m)
    }

    /// Validates and divides the weights once by their sum.
    pub fn from_unnormalized(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::unchecked_mass(points, weights)?;
        m.normalize();
        Ok(m)
    }

    /// Builds from flat coordinates; weights are renormalized.
    pub fn from_flat(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if coords.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * weights.len(),
                found: coords.len(),
            });
        }
        let points = coords.chunks(dim).map(|c| c.to_vec()).collect();
        Self::from_unnormalized(points, weights)
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: Vec<f64>) -> Self {
        Self::from_unnormalized(vec![x], vec![1.0]).expect("valid dirac")
    }

    /// Uniform weights over `points`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::from_unnormalized(points, w)
    }

    fn unchecked_mass(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if points.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut coords = Vec::with_capacity(dim * points.len());
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.len(),
                });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("coordinates"));
            }
            coords.extend_from_slice(p);
        }
        for (index, &weight) in weights.iter().enumerate() {
            if !weight.is_finite() {
                return Err(Error::NonFinite("weights"));
            }
            if weight < 0.0 {
                return Err(Error::NegativeWeight { index, weight });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::NonPositiveMass(total));
        }
        Ok(DiscreteMeasure {
            dim,
            coords,
            weights,
        })
    }

    fn normalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of support points `S`.
    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks(self.dim)
    }

    pub fn points_vec(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Same weights, every point shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Result<Self> {
        if t.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: t.len(),
            });
        }
        let coords = self
            .coords
            .chunks(self.dim)
            .flat_map(|p| p.iter().zip(t).map(|(x, s)| x + s))
            .collect();
        Ok(DiscreteMeasure {
            dim: self.dim,
            coords,
            weights: self.weights.clone(),
        })
    }

    /// Same points with new weights, renormalized.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.dim, self.coords.clone(), weights)
    }

    /// Drops points with weight below `threshold` and renormalizes.
    ///
    /// The support never becomes empty: if every weight is below the threshold
    /// the largest one (lowest index on ties) is kept.
    pub fn prune(&self, threshold: f64) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.weights[i] >= threshold)
            .collect();
        let keep = if keep.is_empty() {
            vec![argmax(&self.weights)]
        } else {
            keep
        };
        if keep.len() == self.len() && threshold <= 0.0 {
            return self.clone();
        }
        let mut out = DiscreteMeasure {
            dim: self.dim,
            coords: keep
                .iter()
                .flat_map(|&i| self.point(i).iter().copied())
                .collect(),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
        };
        if keep.len() != self.len() {
            out.normalize();
        }
        out
    }

    /// Sums the weights of exactly-equal points, keeping first-occurrence order.
    pub fn merge_duplicates(&self) -> Self {
        let mut coords: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (i, p) in self.points().enumerate() {
            let found = coords.chunks(self.dim).position(|q| q == p);
            match found {
                Some(k) => weights[k] += self.weights[i],
                None => {
                    coords.extend_from_slice(p);
                    weights.push(self.weights[i]);
                }
            }
        }
        DiscreteMeasure {
            dim: self.dim,
            coords,
            weights,
        }
    }

    /// Largest Euclidean distance between any two support points.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.max(euclidean(self.point(i), self.point(j)));
            }
        }
        best
    }

    /// Measure CSV text: header `weight,x0,..,x{d-1}`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("weight");
        for k in 0..self.dim {
            let _ = write!(out, ",x{k}");
        }
        out.push('\n');
        for (i, p) in self.points().enumerate() {
            let _ = write!(out, "{:.16e}", self.weights[i]);
            for x in p {
                let _ = write!(out, ",{x:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses measure CSV text.
    pub fn parse_csv(text: &str, renormalize: bool) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first().map(|c| c.trim_start_matches('\u{feff}')) != Some("weight") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header starting with `weight`, got `{header}`"),
            });
        }
        for (k, c) in cols.iter().enumerate().skip(1) {
            if *c != format!("x{}", k - 1) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unexpected column `{c}`"),
                });
            }
        }
        let header_dim = cols.len() - 1;

        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("not a number: `{s}`"),
                })
            };
            let w = parse(fields[0])?;
            let coords = fields[1..]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<Vec<f64>>>()?;
            let expected = if header_dim > 0 {
                header_dim
            } else {
                points.first().map_or(coords.len(), |p: &Vec<f64>| p.len())
            };
            if let Some(first) = points.first() {
                if coords.len() != first.len() {
                    return Err(Error::DimensionMismatch {
                        expected: first.len(),
                        found: coords.len(),
                    });
                }
            }
            if coords.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: coords.len(),
                });
            }
            points.push(coords);
            weights.push(w);
        }
        if renormalize {
            Self::from_unnormalized(points, weights)
        } else {
            Self::new(points, weights)
        }
    }
}

/// Reads a measure CSV file.
pub fn load_measure(path: impl AsRef<Path>, renormalize: bool) -> Result<DiscreteMeasure> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DiscreteMeasure::parse_csv(&text, renormalize)
}

/// Where a measure came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureSource {
    File,
    Generated,
    Derived,
}

/// Label attached to a measure in pipelines and CLI output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasureMeta {
    label: String,
    source: MeasureSource,
}

impl MeasureMeta {
    pub fn new(label: impl Into<String>, source: MeasureSource) -> Result<Self> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(Error::invalid("measure label must be nonempty"));
        }
        Ok(MeasureMeta { label, source })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn source(&self) -> MeasureSource {
        self.source
    }
}

/// Grayscale image with unnormalized nonnegative intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("pixels must be finite and nonnegative"));
        }
        Ok(GrayImage { rows, cols, pixels })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        GrayImage {
            rows,
            cols,
            pixels: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.pixels[r * self.cols + c] = value;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn total(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Mass inside rows `r0..r1`, columns `c0..c1`.
    pub fn region_mass(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let mut m = 0.0;
        for r in r0..r1.min(self.rows) {
            for c in c0..c1.min(self.cols) {
                m += self.get(r, c);
            }
        }
        m
    }

    /// Renders a 2-D measure onto a grid by bilinear splatting of each atom
    /// onto its four nearest pixels. Coordinates are `(row, col)`; mass
    /// falling outside the grid is clamped to the border.
    pub fn splat(measure: &DiscreteMeasure, rows: usize, cols: usize) -> Result<Self> {
        if measure.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: measure.dim(),
            });
        }
        let mut img = GrayImage::zeros(rows, cols);
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        for (p, &w) in measure.points().zip(measure.weights()) {
            let r = clamp(p[0], rows);
            let c = clamp(p[1], cols);
            let (r0, c0) = (r.floor() as usize, c.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
            let (fr, fc) = (r - r0 as f64, c - c0 as f64);
            let mut add = |rr: usize, cc: usize, f: f64| {
                let v = img.get(rr, cc);
                img.set(rr, cc, v + w * f);
            };
            add(r0, c0, (1.0 - fr) * (1.0 - fc));
            add(r0, c1, (1.0 - fr) * fc);
            add(r1, c0, fr * (1.0 - fc));
            add(r1, c1, fr * fc);
        }
        Ok(img)
    }

    /// Encodes as binary PGM (P5), scaling the maximum intensity to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.pixels.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.pixels.iter().map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }

    /// Encodes as ASCII PGM (P2) with intensities rounded to integers in 0..=255.
    pub fn to_pgm_ascii(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| (self.get(r, c).round().clamp(0.0, 255.0) as u8).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Decodes P2 (ASCII) or P5 (binary, 8-bit) PGM data.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = next_token(bytes, &mut pos).ok_or_else(|| pgm_err("missing magic"))?;
        let binary = match magic.as_str() {
            "P2" => false,
            "P5" => true,
            other => return Err(pgm_err(&format!("unsupported magic `{other}`"))),
        };
        let mut header = [0usize; 3];
        for h in &mut header {
            let tok = next_token(bytes, &mut pos).ok_or_else(|| pgm_err("truncated header"))?;
            *h = tok.parse().map_err(|_| pgm_err("bad header field"))?;
        }
        let [cols, rows, maxval] = header;
        if maxval == 0 || maxval > 255 {
            return Err(pgm_err("max value must be in 1..=255"));
        }
        let n = rows * cols;
        let pixels: Vec<f64> = if binary {
            // exactly one whitespace byte separates the header from the raster
            let start = pos + 1;
            let raster = bytes
                .get(start..start + n)
                .ok_or_else(|| pgm_err("truncated raster"))?;
            raster.iter().map(|&b| b as f64).collect()
        } else {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let tok = next_token(bytes, &mut pos).ok_or_else(|| pgm_err("truncated raster"))?;
                let x: usize = tok.parse().map_err(|_| pgm_err("bad pixel"))?;
                if x > maxval {
                    return Err(pgm_err("pixel above max value"));
                }
                v.push(x as f64);
            }
            v
        };
        GrayImage::new(rows, cols, pixels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

fn pgm_err(msg: &str) -> Error {
    Error::Parse {
        line: 0,
        message: format!("PGM: {msg}"),
    }
}

/// Next whitespace-delimited token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Image as a measure on the pixel grid `{0..rows-1} × {0..cols-1}`,
/// restricted to strictly positive pixels.
pub fn image_to_measure(image: &GrayImage) -> Result<DiscreteMeasure> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for r in 0..image.rows() {
        for c in 0..image.cols() {
            let v = image.get(r, c);
            if v > 0.0 {
                points.push(vec![r as f64, c as f64]);
                weights.push(v);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::ZeroImage);
    }
    DiscreteMeasure::from_unnormalized(points, weights)
}

/// Euclidean distance between two equal-length slices.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
