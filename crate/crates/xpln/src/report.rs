//! Human-readable artifacts from a trained model: per-decision clue
//! breakdowns rendered as sentences, the weight/bias rule table, and a
//! color-coded view of the pixel maps where lightness is foreground
//! probability and chromaticity embeds the foreground label mix in 2-D.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One foreground map's contribution evidence: where its strongest pixel is
/// and how strong it is.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelClue {
    /// 1-based map number (2..=M; map 1 is the background).
    pub channel: usize,
    pub intensity: f64,
    /// `(x, y)` of the first maximizing pixel.
    pub peak: (usize, usize),
    pub keyword: Option<String>,
}

/// Arithmetic behind one image-level decision, kept exactly reproducible:
/// `logit = Σ strengths + bias`, `probability = σ(logit)`.
#[derive(Debug, Clone, Serialize)]
pub struct LabelExplanation {
    /// 1-based label number.
    pub label: usize,
    pub bias: f64,
    /// Clue strengths per foreground channel, in channel order 2..=M.
    pub strengths: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
    /// 1-based map number with the largest strength (ties: smallest).
    pub dominant_channel: usize,
    pub cutoff: f64,
    pub predicted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplanationReport {
    pub channels: Vec<ChannelClue>,
    pub labels: Vec<LabelExplanation>,
    pub sentences: Vec<String>,
}

impl ExplanationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Recompute each decision from the map maxima and head weights, then spell
/// it out. The arithmetic here must agree with the forward pass; a report
/// that disagreed with the model it describes would be worse than none.
pub fn generate_explanation<S: Scalar>(
    out: &ForwardOutputs<S>,
    params: &ModelParams<S>,
    keywords: Option<&BTreeMap<usize, String>>,
) -> ExplanationReport {
    let cfg = params.config();
    let (m, labels) = (cfg.maps, cfg.labels);
    let intensities: Vec<f64> = out.intensities.data().iter().map(|&v| v.to_f64()).collect();
    let raw = params.head_w_raw.data();
    let bias = params.head_b.data();

    let channels: Vec<ChannelClue> = (1..m)
        .map(|j| ChannelClue {
            channel: j + 1,
            intensity: intensities[j],
            peak: out.peaks[j],
            keyword: keywords.and_then(|k| k.get(&(j + 1)).cloned()),
        })
        .collect();

    let cutoffs = match &params.cutoffs {
        Some(c) if c.len() == labels => c.clone(),
        _ => vec![0.5; labels],
    };

    let mut rows = Vec::with_capacity(labels);
    for n in 0..labels {
        let mut strengths = Vec::with_capacity(m - 1);
        let mut logit = 0.0;
        for j in 0..m - 1 {
            let w2 = raw[n * (m - 1) + j].to_f64().powi(2);
            let s = intensities[j + 1] * w2;
            strengths.push(s);
            logit += s;
        }
        let b = bias[n].to_f64();
        logit += b;
        let dominant = strengths
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (j, &s)| {
                if s > best.1 { (j, s) } else { best }
            })
            .0;
        let probability = sigmoid(logit);
        rows.push(LabelExplanation {
            label: n + 1,
            bias: b,
            strengths,
            logit,
            probability,
            dominant_channel: dominant + 2,
            cutoff: cutoffs[n],
            predicted: probability >= cutoffs[n],
        });
    }

    let mut sentences = Vec::new();
    for row in &rows {
        if !row.predicted {
            continue;
        }
        let j = row.dominant_channel - 2;
        let strength = row.strengths[j];
        if strength > 0.0 {
            let name = channels[j]
                .keyword
                .clone()
                .unwrap_or_else(|| format!("pattern #{}", row.dominant_channel));
            sentences.push(format!(
                "Label {} holds with probability {:.3}: the strongest clue is {} \
                 (map {}, strength {:.3}) peaking at pixel ({}, {}).",
                row.label,
                row.probability,
                name,
                row.dominant_channel,
                strength,
                channels[j].peak.0,
                channels[j].peak.1,
            ));
        } else {
            sentences.push(format!(
                "Label {} holds with probability {:.3}, but no clue was found in any map.",
                row.label, row.probability,
            ));
        }
    }
    if sentences.is_empty() {
        sentences.push("No label holds; no clue found.".into());
    }

    ExplanationReport { channels, labels: rows, sentences }
}

/// The classification head as a lookup table: squared weights, biases, and
/// the dominant map per label.
#[derive(Debug, Clone, Serialize)]
pub struct RuleTable {
    /// `weights[n][j]` is the squared weight linking foreground map `j+2`
    /// (1-based) to label `n+1`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    /// 1-based dominant map number per label (row argmax, ties: smallest).
    pub dominant: Vec<usize>,
}

pub fn extract_rule_table<S: Scalar>(params: &ModelParams<S>) -> RuleTable {
    let cfg = params.config();
    let (m, labels) = (cfg.maps, cfg.labels);
    let raw = params.head_w_raw.data();
    let mut weights = Vec::with_capacity(labels);
    let mut dominant = Vec::with_capacity(labels);
    for n in 0..labels {
        let row: Vec<f64> =
            (0..m - 1).map(|j| raw[n * (m - 1) + j].to_f64().powi(2)).collect();
        let arg = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (j, &w)| {
                if w > best.1 { (j, w) } else { best }
            })
            .0;
        dominant.push(arg + 2);
        weights.push(row);
    }
    let biases = params.head_b.data().iter().map(|&v| v.to_f64()).collect();
    RuleTable { weights, biases, dominant }
}

impl RuleTable {
    /// Rows are labels, columns the foreground maps then the bias.
    pub fn to_csv(&self) -> String {
        let maps = self.weights.first().map_or(0, Vec::len);
        let mut text = String::from("label");
        for j in 0..maps {
            text.push_str(&format!(",P{}", j + 2));
        }
        text.push_str(",bias\n");
        for (n, row) in self.weights.iter().enumerate() {
            text.push_str(&format!("{}", n + 1));
            for w in row {
                text.push_str(&format!(",{w}"));
            }
            text.push_str(&format!(",{}\n", self.biases[n]));
        }
        text
    }
}

// ---------------------------------------------------------------------------
// Geodesic 2-D embedding: k-nearest-neighbor graph, shortest paths, then
// classical scaling of the squared-distance matrix.

/// Embed points into 2-D so that graph-geodesic distances are preserved as
/// well as a planar layout allows. Returns the embedding and the neighbor
/// count actually used (grown from `k` until the graph connects).
pub fn isomap_embed(points: &[Vec<f64>], k: usize) -> Result<(Vec<[f64; 2]>, usize)> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "embedding needs at least 3 points, got {n}"
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("embedding points must share a nonzero dimension".into()));
    }
    let mut k = k.clamp(1, n - 1);
    let adj = loop {
        let adj = knn_graph(points, k);
        if connected(&adj) {
            break adj;
        }
        if k == n - 1 {
            break adj; // complete graph is always connected; unreachable
        }
        k = (k * 2).min(n - 1);
    };
    let mut d2 = vec![vec![0.0; n]; n];
    for (i, row) in d2.iter_mut().enumerate() {
        let dist = dijkstra(&adj, i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = dist[j] * dist[j];
        }
    }
    Ok((classical_scaling_2d(&d2), k))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetrized k-NN adjacency: an edge exists when either endpoint counts
/// the other among its k nearest.
fn knn_graph(points: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = points.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut dists: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, euclid(&points[i], &points[j])))
            .collect();
        dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        for &(j, d) in dists.iter().take(k) {
            if !adj[i].iter().any(|&(t, _)| t == j) {
                adj[i].push((j, d));
            }
            if !adj[j].iter().any(|&(t, _)| t == i) {
                adj[j].push((i, d));
            }
        }
    }
    adj
}

fn connected(adj: &[Vec<(usize, f64)>]) -> bool {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for &(j, _) in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == n
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.partial_cmp(&other.0).unwrap().then(self.1.cmp(&other.1))
        }
    }

    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(Entry(0.0, source)));
    while let Some(Reverse(Entry(d, i))) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        for &(j, w) in &adj[i] {
            let cand = d + w;
            if cand < dist[j] {
                dist[j] = cand;
                heap.push(Reverse(Entry(cand, j)));
            }
        }
    }
    dist
}

/// Double-center the squared-distance matrix and take its top-2 eigenpairs
/// (block power iteration; exact when the underlying configuration is
/// planar, since the centered matrix then has rank 2).
fn classical_scaling_2d(d2: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = d2.len();
    let row_mean: Vec<f64> = d2.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            b[i][j] = -0.5 * (d2[i][j] - row_mean[i] - row_mean[j] + grand);
        }
    }
    // fixed pseudo-random start; the converged subspace does not depend on it
    let mut v = [vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let h = crate::seed::derive(0x15011ab, &[i as u64]);
        v[0][i] = ((h & 0xffff) as f64 / 65535.0) - 0.5;
        v[1][i] = (((h >> 16) & 0xffff) as f64 / 65535.0) - 0.5;
    }
    orthonormalize(&mut v);
    let mut lambda = [0.0f64; 2];
    for _ in 0..500 {
        let w = [mat_vec(&b, &v[0]), mat_vec(&b, &v[1])];
        let new_lambda = [dot(&v[0], &w[0]), dot(&v[1], &w[1])];
        v = w;
        orthonormalize(&mut v);
        let moved = (new_lambda[0] - lambda[0]).abs() + (new_lambda[1] - lambda[1]).abs();
        lambda = new_lambda;
        if moved <= 1e-13 * (1.0 + lambda[0].abs()) {
            break;
        }
    }
    // Rayleigh quotients give the eigenvalues; clamp tiny negatives
    let w = [mat_vec(&b, &v[0]), mat_vec(&b, &v[1])];
    let scale = [dot(&v[0], &w[0]).max(0.0).sqrt(), dot(&v[1], &w[1]).max(0.0).sqrt()];
    (0..n).map(|i| [v[0][i] * scale[0], v[1][i] * scale[1]]).collect()
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt on two columns; degenerate second column becomes zero.
fn orthonormalize(v: &mut [Vec<f64>; 2]) {
    let n0 = dot(&v[0], &v[0]).sqrt();
    if n0 > 0.0 {
        v[0].iter_mut().for_each(|x| *x /= n0);
    }
    let proj = dot(&v[0], &v[1]);
    let (head, tail) = v.split_at_mut(1);
    for (b, &a) in tail[0].iter_mut().zip(head[0].iter()) {
        *b -= proj * a;
    }
    let n1 = dot(&v[1], &v[1]).sqrt();
    if n1 > 1e-300 {
        v[1].iter_mut().for_each(|x| *x /= n1);
    }
}

/// Root-mean-square residual between two 2-D point sets after centering and
/// the best rotation-or-reflection alignment of `source` onto `target`.
pub fn procrustes_error(target: &[[f64; 2]], source: &[[f64; 2]]) -> f64 {
    assert_eq!(target.len(), source.len(), "point sets must match in length");
    let n = target.len() as f64;
    let center = |pts: &[[f64; 2]]| {
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        pts.iter().map(|p| [p[0] - mx / n, p[1] - my / n]).collect::<Vec<_>>()
    };
    let x = center(target);
    let y = center(source);
    let mut best = f64::INFINITY;
    for reflect in [false, true] {
        let yr: Vec<[f64; 2]> =
            y.iter().map(|p| if reflect { [p[0], -p[1]] } else { *p }).collect();
        // best rotation maximizes cos·A + sin·B
        let (a, b) = x.iter().zip(&yr).fold((0.0, 0.0), |(a, b), (p, q)| {
            (a + p[0] * q[0] + p[1] * q[1], b + p[1] * q[0] - p[0] * q[1])
        });
        let norm = (a * a + b * b).sqrt();
        let (c, s) = if norm > 0.0 { (a / norm, b / norm) } else { (1.0, 0.0) };
        let sse: f64 = x
            .iter()
            .zip(&yr)
            .map(|(p, q)| {
                let rx = c * q[0] - s * q[1];
                let ry = s * q[0] + c * q[1];
                (p[0] - rx).powi(2) + (p[1] - ry).powi(2)
            })
            .sum();
        best = best.min(sse);
    }
    (best / n).sqrt()
}

// ---------------------------------------------------------------------------
// Color rendering.

#[derive(Debug, Clone)]
pub struct ColorizeConfig {
    /// Pixels with foreground probability below this render black.
    pub background_cut: f64,
    pub neighbors: usize,
    /// Cap on the number of pixels embedded directly; the rest copy their
    /// nearest landmark's chromaticity.
    pub landmarks: usize,
    pub seed: u64,
    /// Peak chroma the embedding is scaled to.
    pub chroma: f64,
}

impl Default for ColorizeConfig {
    fn default() -> Self {
        Self { background_cut: 0.05, neighbors: 10, landmarks: 2000, seed: 0, chroma: 55.0 }
    }
}

/// Render probability maps `[M, H, W]` as an RGB image: lightness is the
/// foreground probability, hue/saturation embed the normalized foreground
/// mix. Background pixels are black; if fewer than 3 pixels qualify as
/// foreground the render falls back to grayscale.
pub fn colorize<S: Scalar>(maps: &Tensor<S>, cfg: &ColorizeConfig) -> Result<Image> {
    let shape = maps.shape();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::Shape(format!(
            "expected [M>=2, H, W] probability maps, got {shape:?}"
        )));
    }
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    let data = maps.data();
    let plane = h * w;
    let foreground: Vec<f64> =
        (0..plane).map(|i| 1.0 - data[i].to_f64()).collect();

    let fg_idx: Vec<usize> =
        (0..plane).filter(|&i| foreground[i] >= cfg.background_cut).collect();
    let mut chroma: Vec<[f64; 2]> = vec![[0.0, 0.0]; plane];
    if fg_idx.len() >= 3 {
        let mut landmarks = fg_idx.clone();
        if landmarks.len() > cfg.landmarks.max(3) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            landmarks.shuffle(&mut rng);
            landmarks.truncate(cfg.landmarks.max(3));
            landmarks.sort_unstable();
        }
        let normalized = |i: usize| -> Vec<f64> {
            (1..m).map(|c| data[c * plane + i].to_f64() / foreground[i]).collect()
        };
        let points: Vec<Vec<f64>> = landmarks.iter().map(|&i| normalized(i)).collect();
        let (embedded, _used_k) = isomap_embed(&points, cfg.neighbors)?;
        let peak = embedded
            .iter()
            .flat_map(|p| p.iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max);
        let gain = if peak > 0.0 { cfg.chroma / peak } else { 0.0 };
        for (slot, &i) in landmarks.iter().enumerate() {
            chroma[i] = [embedded[slot][0] * gain, embedded[slot][1] * gain];
        }
        // remaining foreground pixels copy the nearest landmark in label space
        for &i in &fg_idx {
            if landmarks.binary_search(&i).is_ok() {
                continue;
            }
            let p = normalized(i);
            let mut best = (0usize, f64::INFINITY);
            for (slot, q) in points.iter().enumerate() {
                let d = euclid(&p, q);
                if d < best.1 {
                    best = (slot, d);
                }
            }
            chroma[i] = chroma[landmarks[best.0]];
        }
    }

    let mut out = Image::new(3, h, w);
    for i in 0..plane {
        let rgb = if foreground[i] < cfg.background_cut {
            [0.0, 0.0, 0.0]
        } else {
            lab_to_rgb(100.0 * foreground[i], chroma[i][0], chroma[i][1])
        };
        for (c, &v) in rgb.iter().enumerate() {
            out.data[c * plane + i] = v as f32;
        }
    }
    Ok(out)
}

/// CIE L*a*b* (D65 white) to sRGB in [0,1], clipped to gamut.
fn lab_to_rgb(l: f64, a: f64, b: f64) -> [f64; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let finv = |t: f64| {
        let t3 = t * t * t;
        if t3 > 0.008856 { t3 } else { (t - 16.0 / 116.0) / 7.787 }
    };
    let gamma = |c: f64| {
        let c = c.clamp(0.0, 1.0);
        if c <= 0.0031308 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 }
    };
    if a == 0.0 && b == 0.0 {
        // neutral axis: bypass the matrix so gray stays exactly gray
        let v = gamma(finv(fy));
        return [v, v, v];
    }
    let (x, y, z) = (0.95047 * finv(fx), finv(fy), 1.08883 * finv(fz));
    let lin = [
        3.2406 * x - 1.5372 * y - 0.4986 * z,
        -0.9689 * x + 1.8758 * y + 0.0415 * z,
        0.0557 * x - 0.2040 * y + 1.0570 * z,
    ];
    lin.map(gamma)
}

/// Write every probability map as an 8-bit grayscale file plus one color
/// render; returns the paths (always `maps + 1` of them).
pub fn emit_heatmaps<S: Scalar>(
    maps: &Tensor<S>,
    dir: &Path,
    cfg: &ColorizeConfig,
) -> Result<Vec<PathBuf>> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [M, H, W] maps, got {shape:?}")));
    }
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    let data = maps.data();
    let mut paths = Vec::with_capacity(m + 1);
    for c in 0..m {
        let mut img = Image::new(1, h, w);
        for i in 0..plane {
            img.data[i] = data[c * plane + i].to_f64() as f32;
        }
        let path = dir.join(format!("P{}.pgm", c + 1));
        img.save(&path)?;
        paths.push(path);
    }
    let color = colorize(maps, cfg)?;
    let path = dir.join("color.ppm");
    color.save(&path)?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn table_params() -> ModelParams<f64> {
        // a 6-map 4-label head with hand-picked squared weights and biases
        let cfg = ModelConfig {
            maps: 6,
            labels: 4,
            input: (32, 32),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 3,
        };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let w2 = [
            [3.009, 1.673, 1.070, 3.892, 0.417],
            [1.288, 2.024, 3.159, 2.417, 0.915],
            [0.257, 4.294, 0.137, 2.248, 1.268],
            [0.000, 2.141, 0.000, 0.592, 4.235],
        ];
        let raw: Vec<f64> = w2.iter().flatten().map(|v: &f64| v.sqrt()).collect();
        params.head_w_raw = Tensor::leaf(&[4, 5], raw).unwrap();
        params.head_b =
            Tensor::leaf(&[4], vec![-2.765, -4.024, -5.318, -5.885]).unwrap();
        params
    }

    fn outputs_with_unit_maxima(params: &ModelParams<f64>) -> ForwardOutputs<f64> {
        let (h, w) = (4usize, 4usize);
        let m = params.config().maps;
        let mut data = vec![0.0f64; m * h * w];
        for c in 0..m {
            data[c * h * w + c] = 1.0; // distinct peak per channel
        }
        let maps = Tensor::leaf(&[m, h, w], data).unwrap();
        let (probs, intensities, peaks) = params.forward_classify(&maps).unwrap();
        let dummy = Tensor::full(&[params.config().labels], 0.0);
        ForwardOutputs {
            occluded: maps.clone(),
            maps,
            probs,
            aux: dummy.clone(),
            occluded_aux: dummy,
            intensities,
            peaks,
        }
    }

    #[test]
    fn unit_intensities_reproduce_published_dominance() {
        let params = table_params();
        let out = outputs_with_unit_maxima(&params);
        let report = generate_explanation(&out, &params, None);
        let dominant: Vec<usize> =
            report.labels.iter().map(|l| l.dominant_channel).collect();
        assert_eq!(dominant, vec![5, 4, 3, 6]);
        let p4 = report.labels[3].probability;
        assert!((p4 - sigmoid(1.083)).abs() < 1e-4, "p4 = {p4}");
        assert!((p4 - 0.7471).abs() < 1e-3);
        // strengths for the last label sort as published
        let s = &report.labels[3].strengths;
        assert!(s[4] > s[1] && s[1] > s[3] && s[3] > s[0]);
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn zero_intensities_fall_back_to_bias_and_report_no_clue() {
        let params = table_params();
        let m = params.config().maps;
        let (h, w) = (4usize, 4usize);
        let mut data = vec![0.0f64; m * h * w];
        for i in 0..h * w {
            data[i] = 1.0; // background certain everywhere
        }
        let maps = Tensor::leaf(&[m, h, w], data).unwrap();
        let (probs, intensities, peaks) = params.forward_classify(&maps).unwrap();
        let dummy = Tensor::full(&[4], 0.0);
        let out = ForwardOutputs {
            occluded: maps.clone(),
            maps,
            probs,
            aux: dummy.clone(),
            occluded_aux: dummy,
            intensities,
            peaks,
        };
        let report = generate_explanation(&out, &params, None);
        for row in &report.labels {
            assert!(row.strengths.iter().all(|&s| s == 0.0));
            assert!((row.probability - sigmoid(row.bias)).abs() < 1e-15);
            assert!(!row.predicted);
        }
        assert_eq!(report.sentences.len(), 1);
        assert!(report.sentences[0].contains("no clue"), "{}", report.sentences[0]);
    }

    #[test]
    fn keywords_surface_in_sentences() {
        let mut params = table_params();
        params.cutoffs = Some(vec![0.5, 0.5, 0.5, 0.5]);
        let out = outputs_with_unit_maxima(&params);
        let mut kw = BTreeMap::new();
        kw.insert(6usize, "frond".to_string());
        let report = generate_explanation(&out, &params, Some(&kw));
        let pdr_sentence = report
            .sentences
            .iter()
            .find(|s| s.starts_with("Label 4"))
            .expect("label 4 clears its 0.5 cutoff");
        assert!(pdr_sentence.contains("frond"), "{pdr_sentence}");
        // channels without keywords fall back to a numbered pattern
        let other = report.sentences.iter().find(|s| s.starts_with("Label 1")).unwrap();
        assert!(other.contains("pattern #5"), "{other}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn report_probabilities_match_forward_pass(
            raw in proptest::collection::vec(-1.5f64..1.5, 20),
            bias in proptest::collection::vec(-3.0f64..1.0, 4),
            peaks in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let mut params = table_params();
            params.head_w_raw = Tensor::leaf(&[4, 5], raw).unwrap();
            params.head_b = Tensor::leaf(&[4], bias).unwrap();
            let (h, w) = (3usize, 3usize);
            let mut data = vec![0.0f64; 6 * h * w];
            for (c, &p) in peaks.iter().enumerate() {
                data[c * h * w + c] = p;
            }
            let maps = Tensor::leaf(&[6, h, w], data).unwrap();
            let (probs, intensities, pks) = params.forward_classify(&maps).unwrap();
            let dummy = Tensor::full(&[4], 0.0);
            let out = ForwardOutputs {
                occluded: maps.clone(),
                maps,
                probs: probs.clone(),
                aux: dummy.clone(),
                occluded_aux: dummy,
                intensities,
                peaks: pks,
            };
            let report = generate_explanation(&out, &params, None);
            for (row, p) in report.labels.iter().zip(probs.data()) {
                prop_assert!((row.probability - p).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rule_table_matches_head_and_tracks_perturbations() {
        let cfg = ModelConfig {
            maps: 4,
            labels: 3,
            input: (32, 32),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 1,
        };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        // constant raw weights: every squared weight identical, ties go to map 2
        params.head_w_raw = Tensor::leaf(&[3, 3], vec![0.1; 9]).unwrap();
        let table = extract_rule_table(&params);
        for row in &table.weights {
            for &v in row {
                assert!((v - 0.01).abs() < 1e-15);
            }
        }
        assert_eq!(table.dominant, vec![2, 2, 2]);
        // one raw weight changed -> exactly one table entry changes
        let mut bumped = params;
        let mut raw = bumped.head_w_raw.data().to_vec();
        raw[4] += 0.05; // label 1 (row 1), second map column
        bumped.head_w_raw = Tensor::leaf(&[3, 3], raw).unwrap();
        let after = extract_rule_table(&bumped);
        let mut changed = 0;
        for (ra, rb) in table.weights.iter().zip(&after.weights) {
            for (a, b) in ra.iter().zip(rb) {
                if a != b {
                    changed += 1;
                }
            }
        }
        assert_eq!(changed, 1);
        assert_eq!(after.dominant[1], 3);
    }

    #[test]
    fn rule_table_csv_has_published_layout() {
        let params = table_params();
        let table = extract_rule_table(&params);
        assert_eq!(table.dominant, vec![5, 4, 3, 6]);
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "label,P2,P3,P4,P5,P6,bias");
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        assert!(first.ends_with(",-2.765"));
        assert_eq!(csv.lines().count(), 5);
        // squaring the stored square roots reproduces the table entries
        assert!((table.weights[3][4] - 4.235).abs() < 1e-12);
    }

    #[test]
    fn planar_points_embed_exactly_with_a_complete_graph() {
        // 2-plane inside a 5-dim simplex, irregular but smooth sampling
        let n = 60;
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let u = 0.25 * ((i * 37 % n) as f64 / n as f64 - 0.5);
            let v = 0.2 * ((i * 17 % n) as f64 / n as f64 - 0.5);
            truth.push([u, v]);
            let base = [0.3, 0.25, 0.2, 0.15, 0.1];
            let du = [1.0, -1.0, 0.0, 0.5, -0.5];
            let dv = [0.0, 0.5, -1.0, 0.5, 0.0];
            points.push(
                (0..5).map(|d| base[d] + u * du[d] + v * dv[d]).collect::<Vec<_>>(),
            );
        }
        let (embedded, used_k) = isomap_embed(&points, n - 1).unwrap();
        assert_eq!(used_k, n - 1);
        // complete graph: geodesics are Euclidean, so the plane comes back
        // exactly (up to rotation/reflection); the plane's own metric is
        // stretched by the direction vectors, so compare to a planar
        // re-embedding of the true distances rather than (u, v) directly
        let d2: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| euclid(&points[i], &points[j]).powi(2)).collect())
            .collect();
        let reference = classical_scaling_2d(&d2);
        let err = procrustes_error(&reference, &embedded);
        assert!(err < 1e-9, "procrustes error {err}");
        assert!(procrustes_error(&truth, &truth) < 1e-15);
    }

    #[test]
    fn embedding_is_invariant_to_point_order() {
        let n = 40;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                vec![0.4 + 0.3 * (t * 5.0).sin() * 0.3, 0.3 - 0.2 * t, 0.3 + 0.2 * t]
            })
            .collect();
        let (fwd, _) = isomap_embed(&points, 6).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i * 23) % n).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| points[i].clone()).collect();
        let (back, _) = isomap_embed(&shuffled, 6).unwrap();
        let unshuffled: Vec<[f64; 2]> = {
            let mut v = vec![[0.0; 2]; n];
            for (slot, &i) in perm.iter().enumerate() {
                v[i] = back[slot];
            }
            v
        };
        assert!(procrustes_error(&fwd, &unshuffled) < 1e-7);
    }

    #[test]
    fn disconnected_neighborhoods_grow_until_linked() {
        let mut points = Vec::new();
        for i in 0..5 {
            points.push(vec![0.01 * i as f64, 0.0]);
            points.push(vec![10.0 + 0.01 * i as f64, 0.0]);
        }
        let (_, used_k) = isomap_embed(&points, 2).unwrap();
        assert!(used_k > 2, "k stayed at {used_k}");
        assert!(isomap_embed(&points[..2], 1).is_err(), "2 points should be rejected");
    }

    #[test]
    fn certain_background_renders_black() {
        let (h, w) = (6usize, 6usize);
        let mut data = vec![0.0f64; 3 * h * w];
        for i in 0..h * w {
            data[i] = 1.0;
        }
        let maps = Tensor::leaf(&[3, h, w], data).unwrap();
        let img = colorize(&maps, &ColorizeConfig::default()).unwrap();
        assert_eq!(img.channels, 3);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_clusters_get_uniform_well_separated_colors() {
        let (h, w) = (8usize, 8usize);
        let plane = h * w;
        let mut data = vec![0.0f64; 3 * plane];
        // left half pure channel 2, right half pure channel 3
        for y in 0..h {
            for x in 0..w {
                let c = if x < w / 2 { 1 } else { 2 };
                data[c * plane + y * w + x] = 1.0;
            }
        }
        let maps = Tensor::leaf(&[3, h, w], data).unwrap();
        let img = colorize(&maps, &ColorizeConfig::default()).unwrap();
        let px = |c: usize, y: usize, x: usize| img.data[c * plane + y * w + x] as f64;
        for c in 0..3 {
            let (mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in 0..h {
                for x in 0..w {
                    let v = px(c, y, x);
                    if x < w / 2 {
                        lmin = lmin.min(v);
                        lmax = lmax.max(v);
                    } else {
                        rmin = rmin.min(v);
                        rmax = rmax.max(v);
                    }
                }
            }
            assert!(lmax - lmin < 1e-6, "left cluster not uniform on channel {c}");
            assert!(rmax - rmin < 1e-6, "right cluster not uniform on channel {c}");
        }
        let sep: f64 =
            (0..3).map(|c| (px(c, 0, 0) - px(c, 0, w - 1)).powi(2)).sum::<f64>().sqrt();
        assert!(sep > 0.1, "clusters should differ in color, got {sep}");
    }

    #[test]
    fn sparse_foreground_falls_back_to_grayscale() {
        let (h, w) = (4usize, 4usize);
        let plane = h * w;
        let mut data = vec![0.0f64; 3 * plane];
        for i in 0..plane {
            data[i] = 1.0;
        }
        // two foreground pixels only: below the 3-sample minimum
        for &i in &[0usize, 5] {
            data[i] = 0.2;
            data[plane + i] = 0.8;
        }
        let maps = Tensor::leaf(&[3, h, w], data).unwrap();
        let img = colorize(&maps, &ColorizeConfig::default()).unwrap();
        // chroma-free render: all three channels equal at every pixel
        for i in 0..plane {
            let (r, g, b) = (img.data[i], img.data[plane + i], img.data[2 * plane + i]);
            assert!((r - g).abs() < 1e-6 && (g - b).abs() < 1e-6);
        }
        assert!(img.data[0] > 0.0, "foreground pixel should be lit");
    }

    #[test]
    fn heatmap_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (m, h, w) = (3usize, 5usize, 4usize);
        let plane = h * w;
        let mut data = vec![0.0f64; m * plane];
        for i in 0..plane {
            data[i] = 1.0 - (i as f64 / plane as f64);
            data[plane + i] = i as f64 / plane as f64;
        }
        // third map stays all zero
        let maps = Tensor::leaf(&[m, h, w], data.clone()).unwrap();
        let paths = emit_heatmaps(&maps, dir.path(), &ColorizeConfig::default()).unwrap();
        assert_eq!(paths.len(), m + 1);
        let p2 = Image::load(&paths[1]).unwrap();
        for i in 0..plane {
            let expected = ((data[plane + i] * 255.0).round() / 255.0) as f32;
            assert!((p2.data[i] - expected).abs() < 1e-6);
        }
        let p3 = Image::load(&paths[2]).unwrap();
        assert!(p3.data.iter().all(|&v| v == 0.0));
        assert!(paths[m].ends_with("color.ppm"));
    }

    #[test]
    fn explanation_report_serializes_to_json() {
        let params = table_params();
        let out = outputs_with_unit_maxima(&params);
        let report = generate_explanation(&out, &params, None);
        let json = report.to_json();
        assert!(json.contains("\"dominant_channel\": 5"));
        assert!(json.contains("\"sentences\""));
    }
}
