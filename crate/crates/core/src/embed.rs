//! Penultimate-layer embeddings, PCA reduction, exact t-SNE and scatter plots.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{class_names, ManifestRecord, PreprocPolicy};
use crate::error::{Error, Result};
use crate::imagecore::{save_png, PixelImage};
use crate::model::MiniXception;
use crate::persist::write_atomic;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    /// One row per record.
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            id: &'a str,
            label: &'a str,
            vector: &'a [f64],
        }
        let mut out = Vec::new();
        for ((id, label), v) in self.ids.iter().zip(&self.labels).zip(&self.vectors) {
            serde_json::to_writer(&mut out, &Row { id, label, vector: v })?;
            out.push(b'\n');
        }
        write_atomic(path.as_ref(), &out)
    }
}

/// At most `cap` records per class, chosen by a seeded shuffle; input order is preserved.
pub fn sample_per_class(records: &[ManifestRecord], cap: usize, seed: u64) -> Vec<ManifestRecord> {
    let mut keep = BTreeSet::new();
    for class in class_names(records) {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == class).collect();
        if idx.len() > cap {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &class)));
            idx.truncate(cap);
        }
        keep.extend(idx);
    }
    keep.into_iter().map(|i| records[i].clone()).collect()
}

/// Records scored per forward call.
const EMBED_CHUNK: usize = 32;

/// Global-average-pool outputs for up to `cap_per_class` records of each class.
pub fn extract_embeddings(
    model: &MiniXception<f32>,
    records: &[ManifestRecord],
    policy: &PreprocPolicy,
    cap_per_class: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    let chosen = sample_per_class(records, cap_per_class, seed);
    let mut set = EmbeddingSet::default();
    for chunk in chosen.chunks(EMBED_CHUNK) {
        let feats = chunk
            .par_iter()
            .map(|r| policy.record_features(r, 0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = feats.iter().collect();
        let pooled = model.embed(&refs)?;
        let width = pooled.shape()[1];
        for (r, row) in chunk.iter().zip(pooled.data().chunks_exact(width)) {
            set.ids.push(r.key());
            set.labels.push(r.label.clone());
            set.vectors.push(row.iter().map(|&v| v as f64).collect());
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `dim × k`, one principal direction per column, strongest first.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        (0..self.components.ncols())
            .map(|j| {
                v.iter()
                    .zip(&self.mean)
                    .enumerate()
                    .map(|(i, (x, m))| (x - m) * self.components[(i, j)])
                    .sum()
            })
            .collect()
    }
}

/// Projects onto the top `out_dim` principal components of the sample covariance.
///
/// When the data has fewer than `out_dim` non-degenerate directions, the output keeps only
/// the available rank and a warning is logged.
pub fn pca_reduce(set: &EmbeddingSet, out_dim: usize) -> Result<(EmbeddingSet, Pca)> {
    if set.is_empty() || set.dim() == 0 || out_dim == 0 {
        return Err(Error::Empty("PCA needs a nonempty set and a positive output dimension".into()));
    }
    let (n, d) = (set.len(), set.dim());
    if set.vectors.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidArgument("embedding rows must share one width and be finite".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| set.vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| set.vectors[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * d as f64;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count().max(1);
    let k = out_dim.min(rank);
    if k < out_dim {
        log::warn!("PCA: requested {out_dim} components but the data has rank {rank}; keeping {k}");
    }
    let components = DMatrix::from_fn(d, k, |i, j| eig.eigenvectors[(i, order[j])]);
    let explained_variance = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let projected = &centered * &components;
    let vectors = (0..n).map(|i| projected.row(i).iter().copied().collect()).collect();
    Ok((
        EmbeddingSet {
            ids: set.ids.clone(),
            labels: set.labels.clone(),
            vectors,
        },
        Pca {
            mean,
            components,
            explained_variance,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub layout: Vec<[f64; 2]>,
    /// KL(P || Q) against the unexaggerated P; entry `k` is the layout after `k` iterations,
    /// so there are `iterations + 1` entries.
    pub kl_history: Vec<f64>,
}

/// Conditional affinities `p(j|i)` with each row's bandwidth bisected so its entropy
/// (natural log) matches `ln(perplexity)`. Returns the row-major `N×N` matrix and the
/// achieved entropy per row.
pub fn conditional_affinities(sq_dist: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    const TOL: f64 = 1e-6;
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist[i * n + j]).collect();
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let shifted: Vec<f64> = d.iter().map(|v| v - dmin).collect();
            let eval = |beta: f64| {
                let w: Vec<f64> = shifted.iter().map(|v| (-beta * v).exp()).collect();
                let sum: f64 = w.iter().sum();
                let h = sum.ln() + beta * shifted.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / sum;
                (w.into_iter().map(|x| x / sum).collect::<Vec<_>>(), h)
            };
            let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
            let (mut p, mut h) = eval(beta);
            for _ in 0..200 {
                if (h - target).abs() < TOL {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                if !beta.is_finite() || beta > 1e300 {
                    break;
                }
                (p, h) = eval(beta);
            }
            if p.iter().any(|v| !v.is_finite()) {
                // Degenerate row: fall back to uniform affinities.
                let u = 1.0 / (n - 1) as f64;
                p = vec![u; n - 1];
                h = ((n - 1) as f64).ln();
            }
            let mut row = vec![0.0; n];
            for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
                row[j] = p[k];
            }
            (row, h)
        })
        .collect();
    let mut matrix = Vec::with_capacity(n * n);
    let mut entropies = Vec::with_capacity(n);
    for (row, h) in rows {
        matrix.extend(row);
        entropies.push(h);
    }
    (matrix, entropies)
}

fn squared_distances(data: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    out
}

const P_FLOOR: f64 = 1e-12;

/// Symmetrized joint affinities `(p(j|i) + p(i|j)) / 2N`, floored away from zero.
pub fn joint_affinities(data: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = data.len();
    let (cond, _) = conditional_affinities(&squared_distances(data), n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    p
}

/// Unnormalized Student-t kernel `1 / (1 + |yi - yj|²)` and its sum over `i ≠ j`.
fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// KL(P || Q) for a layout; depends only on pairwise differences.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, sum) = student_t(y);
    kl_from(p, &num, sum, n)
}

fn kl_from(p: &[f64], num: &[f64], sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / sum).max(P_FLOOR);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

pub fn tsne(data: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("t-SNE needs at least 2 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= (n - 1) as f64 / 3.0 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} is infeasible for {n} points (must be below {:.3})",
            cfg.perplexity,
            (n - 1) as f64 / 3.0
        )));
    }
    if cfg.iterations == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("t-SNE needs positive iterations and learning rate".into()));
    }
    let p = joint_affinities(data, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut history = Vec::with_capacity(cfg.iterations + 1);

    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { cfg.initial_momentum } else { cfg.final_momentum };
        let (num, sum) = student_t(&y);
        history.push(kl_from(&p, &num, sum, n));
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - w / sum) * w;
                grad[0] += 4.0 * m * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let same_sign = (grad[k] > 0.0) == (velocity[i][k] > 0.0);
                gains[i][k] = if same_sign { (gains[i][k] * 0.8).max(0.01) } else { gains[i][k] + 0.2 };
                velocity[i][k] = momentum * velocity[i][k] - cfg.learning_rate * gains[i][k] * grad[k];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let cx = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|v| v[1]).sum::<f64>() / n as f64;
        for v in &mut y {
            v[0] -= cx;
            v[1] -= cy;
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("t-SNE produced a non-finite layout".into()));
    }
    let (num, sum) = student_t(&y);
    history.push(kl_from(&p, &num, sum, n));
    Ok(TsneResult {
        layout: y,
        kl_history: history,
    })
}

pub fn write_layout_csv(path: impl AsRef<Path>, set: &EmbeddingSet, layout: &[[f64; 2]]) -> Result<()> {
    let mut out = String::from("id,label,x,y\n");
    for ((id, label), p) in set.ids.iter().zip(&set.labels).zip(layout) {
        let _ = writeln!(out, "{},{},{},{}", csv_field(id), csv_field(label), p[0], p[1]);
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Qualitative palette; classes past the tenth reuse colours.
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Where each legend entry was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendEntry {
    pub label: String,
    pub colour: [u8; 3],
    /// Top-left pixel of the colour swatch.
    pub swatch: (usize, usize),
}

const PLOT: usize = 600;
const MARGIN: usize = 20;
const LEGEND_W: usize = 200;
const SWATCH: usize = 12;
const LINE: usize = 20;

struct Canvas {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    fn text(&mut self, x: usize, y: usize, s: &str, c: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits & (1 << col) != 0 {
                        self.put(x + 8 * k + col, y + row, c);
                    }
                }
            }
        }
    }
}

/// Scatter plot with one colour per class (first-appearance order) and a legend.
pub fn plot_embedding(layout: &[[f64; 2]], labels: &[String], out_path: impl AsRef<Path>) -> Result<Vec<LegendEntry>> {
    if layout.is_empty() {
        return Err(Error::Empty("nothing to plot".into()));
    }
    if layout.len() != labels.len() {
        return Err(Error::Shape(format!("{} points but {} labels", layout.len(), labels.len())));
    }
    if layout.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("layout has non-finite coordinates".into()));
    }
    let mut classes: Vec<&String> = Vec::new();
    for l in labels {
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    let width = PLOT + 2 * MARGIN + LEGEND_W;
    let height = (PLOT + 2 * MARGIN).max(2 * MARGIN + LINE * classes.len());
    let mut canvas = Canvas {
        width,
        height,
        data: vec![255; width * height * 3],
    };

    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in layout {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let to_px = |v: f64, lo: f64, hi: f64| {
        let centred = (v - (lo + hi) / 2.0) / span + 0.5;
        MARGIN + (centred * (PLOT - 1) as f64).round().clamp(0.0, (PLOT - 1) as f64) as usize
    };
    for (p, l) in layout.iter().zip(labels) {
        let k = classes.iter().position(|c| *c == l).expect("label collected above");
        let colour = PALETTE[k % PALETTE.len()];
        let (px, py) = (to_px(p[0], x0, x1), to_px(-p[1], -y1, -y0));
        canvas.rect(px.saturating_sub(2), py.saturating_sub(2), 5, 5, colour);
    }

    let lx = PLOT + 2 * MARGIN;
    let mut legend = Vec::with_capacity(classes.len());
    for (k, name) in classes.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let sy = MARGIN + LINE * k;
        canvas.rect(lx, sy, SWATCH, SWATCH, colour);
        canvas.text(lx + SWATCH + 6, sy + 2, name, [0, 0, 0]);
        legend.push(LegendEntry {
            label: (*name).clone(),
            colour,
            swatch: (lx, sy),
        });
    }
    save_png(&PixelImage::new(width, height, 3, canvas.data)?, out_path)?;
    Ok(legend)
}

/// Writes the legend as `label,r,g,b` lines.
pub fn write_legend(path: impl AsRef<Path>, legend: &[LegendEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in legend {
        writeln!(out, "{},{},{},{}", csv_field(&e.label), e.colour[0], e.colour[1], e.colour[2])
            .map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &out)
}
