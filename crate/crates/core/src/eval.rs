//! Desk-scale metrics: a closed-form color-blob detector for layout
//! adherence, template distance and diversity for fidelity, low-band
//! correlation, and bootstrap trend summaries for ablations.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{seeded_rng, LatentGrid};
use crate::scene::{nearest_template, rect_iou, BoundingBox, Label, LayoutSpec, Palette};
use crate::spectral;

pub const DETECTION_THRESHOLD: f64 = 0.5;
pub const ADHERENCE_IOU: f64 = 0.5;
pub const LOWBAND_CUTOFF: f64 = 0.2;

/// Tight rectangle around a detected component, in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Number of pixels in the component.
    pub pixels: usize,
    /// Mean pixel-center position `(x, y)` of the component.
    pub centroid: (f64, f64),
}

impl Detection {
    pub fn iou(&self, b: &BoundingBox) -> f64 {
        rect_iou((self.x, self.y, self.w, self.h), (b.x, b.y, b.w, b.h))
    }
}

fn projection(img: &LatentGrid, y: usize, x: usize, background: &[f64], color: &[f64]) -> f64 {
    let norm = color.iter().map(|c| c * c).sum::<f64>().sqrt();
    (0..img.channels())
        .map(|c| (img.get(c, y, x) - background[c]) * color[c])
        .sum::<f64>()
        / norm
}

/// Pixels assigned to `label`: the projection of `pixel − background` onto
/// the label's unit color exceeds `threshold` and no other palette color
/// projects higher. Returned row-major, `H × W`.
pub fn label_mask(img: &LatentGrid, label: Label, palette: &Palette, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let color = palette.color(label)?;
    if img.channels() != palette.channels() {
        return Err(Error::invalid(format!(
            "image has {} channels, palette has {}",
            img.channels(),
            palette.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let own = projection(img, y, x, &palette.background, color);
            if own <= threshold {
                continue;
            }
            let beaten = palette
                .colors
                .iter()
                .filter(|(&l, _)| l != label)
                .any(|(_, c)| projection(img, y, x, &palette.background, c) > own);
            mask[y * w + x] = !beaten;
        }
    }
    Ok(mask)
}

/// Largest 4-connected component of `mask`; ties go to the component whose
/// first pixel comes first in raster order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut best: Option<Vec<usize>> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if best.as_ref().map_or(true, |b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    best
}

/// Thresholded label mask and the tight box of its largest component.
pub fn detect_box(
    img: &LatentGrid,
    label: Label,
    palette: &Palette,
    threshold: f64,
) -> Result<(Vec<bool>, Option<Detection>)> {
    let mask = label_mask(img, label, palette, threshold)?;
    let (h, w) = (img.height(), img.width());
    let Some(comp) = largest_component(&mask, h, w) else {
        return Ok((mask, None));
    };
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    let (mut sy, mut sx) = (0.0, 0.0);
    for &p in &comp {
        let (y, x) = (p / w, p % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
        sy += (y as f64 + 0.5) / h as f64;
        sx += (x as f64 + 0.5) / w as f64;
    }
    let n = comp.len() as f64;
    let det = Detection {
        x: x0 as f64 / w as f64,
        y: y0 as f64 / h as f64,
        w: (x1 + 1 - x0) as f64 / w as f64,
        h: (y1 + 1 - y0) as f64 / h as f64,
        pixels: comp.len(),
        centroid: (sx / n, sy / n),
    };
    Ok((mask, Some(det)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxResult {
    pub label: Label,
    pub detected: bool,
    pub centroid_in_box: bool,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub boxes: Vec<BoxResult>,
    /// Fraction of boxes whose detection reaches the IoU threshold.
    pub adherence_rate: f64,
    pub mean_iou: f64,
    pub detection_rate: f64,
}

pub fn adherence(img: &LatentGrid, layout: &LayoutSpec, palette: &Palette, iou_threshold: f64) -> Result<AdherenceReport> {
    layout.validate()?;
    let mut boxes = Vec::with_capacity(layout.boxes.len());
    for b in &layout.boxes {
        let (_, det) = detect_box(img, b.label, palette, DETECTION_THRESHOLD)?;
        boxes.push(match det {
            Some(d) => BoxResult {
                label: b.label,
                detected: true,
                centroid_in_box: b.contains(d.centroid.0, d.centroid.1),
                iou: d.iou(b),
            },
            None => BoxResult {
                label: b.label,
                detected: false,
                centroid_in_box: false,
                iou: 0.0,
            },
        });
    }
    let n = boxes.len() as f64;
    Ok(AdherenceReport {
        adherence_rate: boxes.iter().filter(|b| b.iou >= iou_threshold).count() as f64 / n,
        mean_iou: boxes.iter().map(|b| b.iou).sum::<f64>() / n,
        detection_rate: boxes.iter().filter(|b| b.detected).count() as f64 / n,
        boxes,
    })
}

/// Pearson correlation over every element of two equally shaped grids.
pub fn pearson(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    a.ensure_shape(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the low-passed versions of `a` and `b`.
pub fn lowband_correlation(a: &LatentGrid, b: &LatentGrid, cutoff_fraction: f64) -> Result<f64> {
    a.ensure_shape(b)?;
    let la = spectral::lowpass(a, cutoff_fraction)?;
    let lb = spectral::lowpass(b, cutoff_fraction)?;
    // Residual round-off after a projection that removes all variance.
    let tiny = |g: &LatentGrid, src: &LatentGrid| {
        let m = g.mean();
        g.as_slice().iter().map(|v| (v - m) * (v - m)).sum::<f64>() <= 1e-24 * src.norm_sq().max(1e-300)
    };
    if tiny(&la, a) || tiny(&lb, b) {
        return Err(Error::UndefinedCorrelation);
    }
    pearson(&la, &lb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Per-element RMS distance to the nearest template.
    pub template_rms: f64,
    /// Mean per-element RMS distance to the other images of the batch.
    pub diversity: f64,
    /// Low-band correlation with the run's upsampled reference.
    pub lowband_corr: f64,
}

/// Fidelity reports for a batch of images. `references[i]` is the image the
/// `i`-th run was guided toward; a constant reference yields a correlation
/// of 0.
pub fn fidelity_reports<'a>(
    images: &[LatentGrid],
    references: &[LatentGrid],
    templates: impl IntoIterator<Item = &'a LatentGrid> + Clone,
) -> Result<Vec<FidelityReport>> {
    if images.len() != references.len() {
        return Err(Error::invalid("every image needs a reference"));
    }
    let n = images.len();
    let mut out = Vec::with_capacity(n);
    for (i, img) in images.iter().enumerate() {
        let (_, template_rms) = nearest_template(img, templates.clone())?;
        let diversity = if n > 1 {
            let mut s = 0.0;
            for (j, other) in images.iter().enumerate() {
                if i != j {
                    s += img.rms_diff(other)?;
                }
            }
            s / (n - 1) as f64
        } else {
            0.0
        };
        let lowband_corr = match lowband_correlation(img, &references[i], LOWBAND_CUTOFF) {
            Ok(c) => c,
            Err(Error::UndefinedCorrelation) => 0.0,
            Err(e) => return Err(e),
        };
        out.push(FidelityReport {
            template_rms,
            diversity,
            lowband_corr,
        });
    }
    Ok(out)
}

/// Mean with a percentile-bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;
pub const BOOTSTRAP_SEED: u64 = 0x0b00_75ee;

/// Percentile bootstrap of the mean at the given two-sided `level`.
pub fn bootstrap_mean(values: &[f64], level: f64, seed: u64) -> Result<Estimate> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one value"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = seeded_rng(seed);
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize).min(BOOTSTRAP_RESAMPLES - 1)];
    Ok(Estimate {
        mean,
        lo: at(tail),
        hi: at(1.0 - tail),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Increasing,
    Flat,
    Decreasing,
}

impl Verdict {
    /// Direction from `a` to `b`: flat whenever the intervals overlap.
    pub fn between(a: &Estimate, b: &Estimate) -> Verdict {
        if b.lo > a.hi {
            Verdict::Increasing
        } else if b.hi < a.lo {
            Verdict::Decreasing
        } else {
            Verdict::Flat
        }
    }
}

/// One run of an ablation: the knob value and its reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub knob_value: f64,
    pub seed: u64,
    pub adherence: AdherenceReport,
    pub fidelity: FidelityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub knob_value: f64,
    pub runs: usize,
    pub adherence: Estimate,
    pub template_rms: Estimate,
    pub diversity: Estimate,
    pub lowband_corr: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub knob: String,
    /// Groups in order of first appearance of each knob value.
    pub groups: Vec<GroupSummary>,
    /// Verdicts between consecutive groups.
    pub adherence_steps: Vec<Verdict>,
    pub template_rms_steps: Vec<Verdict>,
    /// Verdict between the first and last group.
    pub adherence_trend: Verdict,
    pub template_rms_trend: Verdict,
}

/// Groups runs by knob value and summarizes each metric with 95% bootstrap
/// intervals.
pub fn trend_report(knob: &str, runs: &[RunRecord]) -> Result<TrendReport> {
    let mut order: Vec<f64> = Vec::new();
    for r in runs {
        if !order.iter().any(|v| v.to_bits() == r.knob_value.to_bits()) {
            order.push(r.knob_value);
        }
    }
    if order.len() < 2 {
        return Err(Error::invalid(format!(
            "a trend needs at least 2 configurations, got {}",
            order.len()
        )));
    }
    let groups = order
        .iter()
        .map(|&v| {
            let members: Vec<&RunRecord> = runs.iter().filter(|r| r.knob_value.to_bits() == v.to_bits()).collect();
            let col = |f: &dyn Fn(&RunRecord) -> f64| members.iter().map(|r| f(r)).collect::<Vec<f64>>();
            Ok(GroupSummary {
                knob_value: v,
                runs: members.len(),
                adherence: bootstrap_mean(&col(&|r| r.adherence.adherence_rate), 0.95, BOOTSTRAP_SEED)?,
                template_rms: bootstrap_mean(&col(&|r| r.fidelity.template_rms), 0.95, BOOTSTRAP_SEED)?,
                diversity: bootstrap_mean(&col(&|r| r.fidelity.diversity), 0.95, BOOTSTRAP_SEED)?,
                lowband_corr: bootstrap_mean(&col(&|r| r.fidelity.lowband_corr), 0.95, BOOTSTRAP_SEED)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let steps = |f: &dyn Fn(&GroupSummary) -> Estimate| {
        groups.windows(2).map(|w| Verdict::between(&f(&w[0]), &f(&w[1]))).collect::<Vec<_>>()
    };
    let first = &groups[0];
    let last = &groups[groups.len() - 1];
    Ok(TrendReport {
        knob: knob.to_string(),
        adherence_steps: steps(&|g| g.adherence),
        template_rms_steps: steps(&|g| g.template_rms),
        adherence_trend: Verdict::between(&first.adherence, &last.adherence),
        template_rms_trend: Verdict::between(&first.template_rms, &last.template_rms),
        groups,
    })
}
