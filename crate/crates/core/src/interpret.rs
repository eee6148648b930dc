//! Saliency extraction and interpretability metrics: principal-component
//! saliency maps from feature stacks (power iteration), quantile
//! binarization, shared-interest scores against ground-truth object masks
//! (IoU / ground-truth coverage / saliency coverage), per-class semantic
//! IoU, and the saliency-control correlation statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Rng;
use crate::error::{Error, Result};
use crate::losses::FeatureMapStack;
use crate::sim::{MaskCategory, SemanticClass};

/// Power-iteration convergence tolerance.
const POWER_TOL: f64 = 1e-10;
/// Power-iteration cap.
const POWER_MAX_ITERS: usize = 1000;
/// Default binarization quantile: the top 15% of nonzero saliency pixels.
pub const DEFAULT_QUANTILE: f64 = 0.85;

/// Max-normalized non-negative saliency raster.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    /// Build from raw non-negative values; normalizes so the max entry is 1
    /// (all-zero input stays all-zero).
    pub fn new(h: usize, w: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::BadTensorData {
                context: "SaliencyMap::new",
                shape: vec![h, w],
                expected: h * w,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "saliency values must be finite and non-negative".into(),
            ));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
        Ok(SaliencyMap { h, w, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Lateral saliency mass: sum over the left half-plane minus the right
    /// (column 0 is the leftmost cell; for odd widths the middle column is
    /// split out of both halves).
    pub fn lateral_mass(&self) -> f64 {
        let half = self.w / 2;
        let mut left = 0.0;
        let mut right = 0.0;
        for row in 0..self.h {
            for col in 0..self.w {
                let v = self.values[row * self.w + col];
                if col < half {
                    left += v;
                } else if col >= self.w - half {
                    right += v;
                }
            }
        }
        left - right
    }

    /// 8-bit binary portable graymap (P5) for visual inspection.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> =
            self.values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn write_pgm_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }
}

/// Boolean raster with a cached set size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::BadTensorData {
                context: "BinaryMask::new",
                shape: vec![h, w],
                expected: h * w,
                got: cells.len(),
            });
        }
        Ok(BinaryMask { h, w, cells })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Shared-interest scores; a field is absent when its denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedInterestScores {
    pub iou: Option<f64>,
    pub gtc: Option<f64>,
    pub sc: Option<f64>,
}

/// One comparison row of the correlation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rho_a: f64,
    pub rho_b: f64,
    /// Relative explained variance ρ_a² / ρ_b².
    pub r_squared: f64,
    /// Fisher z statistic comparing the two correlations.
    pub fisher_z: f64,
    pub n_a: usize,
    pub n_b: usize,
}

// ── eigen-saliency ───────────────────────────────────────────────────

/// Principal-component saliency of a feature stack.
///
/// The stack is reshaped to `n_f × (h·w)` and centered per spatial position
/// (column mean over maps removed). Power iteration on the Gram operator
/// finds the top right-singular vector; its sign is fixed so the rectified
/// projection keeps the larger L1 mass, negatives are clamped to zero, and
/// the result is max-normalized. An all-zero (or spatially constant) stack
/// yields the all-zero map rather than an error.
pub fn eigencam(stack: &FeatureMapStack) -> Result<SaliencyMap> {
    let (h, w) = stack.spatial();
    let n_f = stack.n_f();
    let hw = h * w;
    // center per spatial position
    let mut centered = vec![0.0; n_f * hw];
    for pos in 0..hw {
        let mean: f64 = (0..n_f).map(|l| stack.data()[l * hw + pos]).sum::<f64>() / n_f as f64;
        for l in 0..n_f {
            centered[l * hw + pos] = stack.data()[l * hw + pos] - mean;
        }
    }
    let frobenius: f64 = centered.iter().map(|v| v * v).sum();
    if frobenius < 1e-300 {
        return SaliencyMap::new(h, w, vec![0.0; hw]);
    }

    // deterministic seeded start vector
    let mut rng = Rng::new(0xE16E_CA11 ^ (n_f as u64) << 32 ^ hw as u64);
    let mut v: Vec<f64> = (0..hw).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    normalize(&mut v)?;

    let mut av = vec![0.0; n_f];
    for _ in 0..POWER_MAX_ITERS {
        // u = A v (n_f), next = Aᵀ u (hw)
        for (l, slot) in av.iter_mut().enumerate() {
            *slot = dot(&centered[l * hw..(l + 1) * hw], &v);
        }
        let mut next = vec![0.0; hw];
        for l in 0..n_f {
            let coef = av[l];
            if coef == 0.0 {
                continue;
            }
            for (n, c) in next.iter_mut().zip(&centered[l * hw..(l + 1) * hw]) {
                *n += coef * c;
            }
        }
        if normalize(&mut next).is_err() {
            // start vector orthogonal to the row space: reseed
            v = (0..hw).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            normalize(&mut v)?;
            continue;
        }
        let delta =
            v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }

    // sign fix: keep the orientation with more rectified mass
    let pos_mass: f64 = v.iter().filter(|&&x| x > 0.0).sum();
    let neg_mass: f64 = -v.iter().filter(|&&x| x < 0.0).sum::<f64>();
    if neg_mass > pos_mass {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let rectified: Vec<f64> = v.into_iter().map(|x| x.max(0.0)).collect();
    SaliencyMap::new(h, w, rectified)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if norm < 1e-150 {
        return Err(Error::Degenerate("zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

// ── binarization ─────────────────────────────────────────────────────

/// Threshold a saliency map at the empirical `q`-quantile of its nonzero
/// values (`>=` comparator, so ties land inside the mask). An all-zero map
/// gives an empty mask.
pub fn binarize(map: &SaliencyMap, q: f64) -> Result<BinaryMask> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile must be in (0,1), got {q}")));
    }
    let (h, w) = map.dims();
    let mut nonzero: Vec<f64> = map.values().iter().copied().filter(|&v| v > 0.0).collect();
    if nonzero.is_empty() {
        return BinaryMask::new(h, w, vec![false; h * w]);
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).expect("finite saliency"));
    let idx = ((q * nonzero.len() as f64).ceil() as usize).clamp(1, nonzero.len()) - 1;
    let threshold = nonzero[idx];
    BinaryMask::new(h, w, map.values().iter().map(|&v| v >= threshold).collect())
}

// ── shared interest ──────────────────────────────────────────────────

/// IoU, ground-truth coverage, and saliency coverage of two same-shaped
/// masks.
pub fn shared_interest(gt: &BinaryMask, saliency: &BinaryMask) -> Result<SharedInterestScores> {
    if gt.dims() != saliency.dims() {
        return Err(Error::ShapeMismatch {
            op: "shared_interest",
            lhs: vec![gt.dims().0, gt.dims().1],
            rhs: vec![saliency.dims().0, saliency.dims().1],
        });
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&g, &s) in gt.cells().iter().zip(saliency.cells()) {
        intersection += (g && s) as usize;
        union += (g || s) as usize;
    }
    let g_count = gt.count();
    let s_count = saliency.count();
    let ratio = |num: usize, den: usize| {
        if den > 0 {
            Some(num as f64 / den as f64)
        } else {
            None
        }
    };
    Ok(SharedInterestScores {
        iou: ratio(intersection, union),
        gtc: ratio(intersection, g_count),
        sc: ratio(intersection, s_count),
    })
}

// ── aggregated reports ───────────────────────────────────────────────

/// Mean scores over the frames where each metric was defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MeanScores {
    pub iou: Option<f64>,
    pub gtc: Option<f64>,
    pub sc: Option<f64>,
    /// Frames contributing to the category (non-empty ground truth).
    pub frames: usize,
}

#[derive(Default, Clone, Copy)]
struct Accumulator {
    iou: (f64, usize),
    gtc: (f64, usize),
    sc: (f64, usize),
    frames: usize,
}

impl Accumulator {
    fn add(&mut self, s: &SharedInterestScores) {
        self.frames += 1;
        if let Some(v) = s.iou {
            self.iou = (self.iou.0 + v, self.iou.1 + 1);
        }
        if let Some(v) = s.gtc {
            self.gtc = (self.gtc.0 + v, self.gtc.1 + 1);
        }
        if let Some(v) = s.sc {
            self.sc = (self.sc.0 + v, self.sc.1 + 1);
        }
    }

    fn means(&self) -> MeanScores {
        let mean = |(sum, n): (f64, usize)| if n > 0 { Some(sum / n as f64) } else { None };
        MeanScores {
            iou: mean(self.iou),
            gtc: mean(self.gtc),
            sc: mean(self.sc),
            frames: self.frames,
        }
    }
}

/// Output of [`category_report`]: per-category rows plus the overall row
/// computed against the union of all category masks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryReport {
    pub per_category: BTreeMap<MaskCategory, MeanScores>,
    pub overall: Option<MeanScores>,
}

/// Per-category shared-interest means over a frame sequence. A frame
/// contributes to a category only when that category's ground-truth mask is
/// non-empty; categories absent from every frame are omitted.
pub fn category_report(
    frames: &[(BinaryMask, BTreeMap<MaskCategory, BinaryMask>)],
) -> Result<CategoryReport> {
    let mut acc: BTreeMap<MaskCategory, Accumulator> = BTreeMap::new();
    let mut overall = Accumulator::default();
    for (saliency, categories) in frames {
        let mut any_gt = false;
        for (&cat, gt) in categories {
            if gt.is_empty() {
                continue;
            }
            any_gt = true;
            let scores = shared_interest(gt, saliency)?;
            acc.entry(cat).or_default().add(&scores);
        }
        // overall row: union of all category masks, when anything is present
        if any_gt {
            let (h, w) = saliency.dims();
            let mut union = vec![false; h * w];
            for gt in categories.values() {
                for (u, &g) in union.iter_mut().zip(gt.cells()) {
                    *u |= g;
                }
            }
            let union_mask = BinaryMask::new(h, w, union)?;
            overall.add(&shared_interest(&union_mask, saliency)?);
        }
    }
    Ok(CategoryReport {
        per_category: acc.iter().map(|(&cat, a)| (cat, a.means())).collect(),
        overall: if overall.frames > 0 { Some(overall.means()) } else { None },
    })
}

/// Per-class IoU means between a saliency mask sequence and semantic masks.
pub fn semantic_iou(
    frames: &[(BinaryMask, BTreeMap<SemanticClass, BinaryMask>)],
) -> Result<BTreeMap<SemanticClass, MeanScores>> {
    let mut acc: BTreeMap<SemanticClass, Accumulator> = BTreeMap::new();
    for (saliency, classes) in frames {
        for (&class, gt) in classes {
            if gt.is_empty() {
                continue;
            }
            let scores = shared_interest(gt, saliency)?;
            acc.entry(class).or_default().add(&scores);
        }
    }
    Ok(acc.iter().map(|(&c, a)| (c, a.means())).collect())
}

// ── correlation statistics ───────────────────────────────────────────

/// Sample Pearson correlation (single-pass co-moment form).
/// Errors when the series differ in length, are shorter than 3, or either
/// is constant (the correlation is undefined and callers report it absent).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "series length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 samples, got {}",
            x.len()
        )));
    }
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut m2x = 0.0;
    let mut m2y = 0.0;
    let mut cov = 0.0;
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = xi - mean_x;
        mean_x += dx / n;
        let dy = yi - mean_y;
        mean_y += dy / n;
        m2x += dx * (xi - mean_x);
        m2y += dy * (yi - mean_y);
        cov += dx * (yi - mean_y);
    }
    if m2x == 0.0 || m2y == 0.0 {
        return Err(Error::Degenerate("constant series has no defined correlation".into()));
    }
    Ok(cov / (m2x.sqrt() * m2y.sqrt()))
}

/// Relative explained variance and Fisher z comparison of two correlations.
pub fn correlation_report(
    rho_a: f64,
    rho_b: f64,
    n_a: usize,
    n_b: usize,
) -> Result<CorrelationReport> {
    for (name, rho) in [("rho_a", rho_a), ("rho_b", rho_b)] {
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} must satisfy |rho| < 1 for the Fisher transform, got {rho}"
            )));
        }
    }
    for (name, n) in [("n_a", n_a), ("n_b", n_b)] {
        if n <= 3 {
            return Err(Error::InvalidArgument(format!("{name} must exceed 3, got {n}")));
        }
    }
    let r_squared = rho_a * rho_a / (rho_b * rho_b);
    let se = (1.0 / (n_a - 3) as f64 + 1.0 / (n_b - 3) as f64).sqrt();
    let fisher_z = (rho_a.atanh() - rho_b.atanh()) / se;
    Ok(CorrelationReport { rho_a, rho_b, r_squared, fisher_z, n_a, n_b })
}
