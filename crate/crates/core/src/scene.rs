//! Layouts, the template renderer, and Gaussian-mixture scene families.
//!
//! A scene family is a set of layouts rendered to templates; adding i.i.d.
//! pixel noise to a uniformly chosen template gives the ground-truth data
//! distribution that the closed-form denoisers are exact for.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GaussianSource, LatentGrid, Shape};

/// Fraction of the normalized blob radius over which the profile stays at 1.
/// Beyond it the profile tapers to 0 along a half cosine.
pub const BLOB_FLAT_RADIUS: f64 = 0.8;

/// IoU below which two same-label boxes are not considered the same object
/// when matching a layout against a mixture template.
pub const LAYOUT_MATCH_IOU: f64 = 0.9;

pub const MAX_BOXES: usize = 8;

const BOX_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    White,
    Orange,
}

impl Label {
    pub const ALL: [Label; 8] = [
        Label::Red,
        Label::Green,
        Label::Blue,
        Label::Yellow,
        Label::Magenta,
        Label::Cyan,
        Label::White,
        Label::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Label::Red => "red",
            Label::Green => "green",
            Label::Blue => "blue",
            Label::Yellow => "yellow",
            Label::Magenta => "magenta",
            Label::Cyan => "cyan",
            Label::White => "white",
            Label::Orange => "orange",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown label {s:?}")))
    }
}

/// Axis-aligned box in normalized canvas coordinates (origin top-left).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: Label,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, label: Label) -> Self {
        Self { x, y, w, h, label }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite {
            return Err("coordinates must be finite".into());
        }
        if !(0.0..1.0).contains(&self.x) || !(0.0..1.0).contains(&self.y) {
            return Err(format!("origin ({}, {}) outside [0, 1)", self.x, self.y));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(format!("size ({}, {}) outside (0, 1]", self.w, self.h));
        }
        if self.x + self.w > 1.0 + BOX_EPS || self.y + self.h > 1.0 + BOX_EPS {
            return Err(format!(
                "box extends past the canvas (x+w={}, y+h={})",
                self.x + self.w,
                self.y + self.h
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        rect_iou((self.x, self.y, self.w, self.h), (other.x, other.y, other.w, other.h))
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }
}

/// IoU of two `(x, y, w, h)` rectangles.
pub fn rect_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = ((a.0 + a.2).min(b.0 + b.2) - a.0.max(b.0)).max(0.0);
    let iy = ((a.1 + a.3).min(b.1 + b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Canvas size in pixels, `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas(pub usize, pub usize);

impl Canvas {
    pub fn height(&self) -> usize {
        self.0
    }

    pub fn width(&self) -> usize {
        self.1
    }

    pub fn scaled(&self, k: usize) -> Canvas {
        Canvas(self.0 * k, self.1 * k)
    }
}

/// Boxes plus the pixel canvas they are meant for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub canvas: Canvas,
    pub boxes: Vec<BoundingBox>,
}

impl LayoutSpec {
    pub fn new(canvas: Canvas, boxes: Vec<BoundingBox>) -> Self {
        Self { canvas, boxes }
    }

    /// Checks every layout invariant, reporting the offending field path.
    pub fn validate(&self) -> Result<()> {
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::Invariant {
                path: "canvas".into(),
                message: "canvas dimensions must be positive".into(),
            });
        }
        if self.boxes.is_empty() || self.boxes.len() > MAX_BOXES {
            return Err(Error::Invariant {
                path: "boxes".into(),
                message: format!("expected 1..={MAX_BOXES} boxes, got {}", self.boxes.len()),
            });
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate().map_err(|message| Error::Invariant {
                path: format!("boxes[{i}]"),
                message,
            })?;
        }
        Ok(())
    }

    pub fn with_canvas(&self, canvas: Canvas) -> LayoutSpec {
        LayoutSpec {
            canvas,
            boxes: self.boxes.clone(),
        }
    }

    fn sorted_labels(&self) -> Vec<Label> {
        let mut v: Vec<Label> = self.boxes.iter().map(|b| b.label).collect();
        v.sort();
        v
    }

    /// Matching rule used for conditioning: identical label multisets, and
    /// every box overlaps a same-label box of `other` with IoU ≥ 0.9.
    pub fn matches(&self, other: &LayoutSpec) -> bool {
        if self.sorted_labels() != other.sorted_labels() {
            return false;
        }
        self.boxes.iter().all(|a| {
            other
                .boxes
                .iter()
                .any(|b| a.label == b.label && a.iou(b) >= LAYOUT_MATCH_IOU)
        })
    }

    pub fn mean_box_area(&self) -> f64 {
        if self.boxes.is_empty() {
            return 0.0;
        }
        self.boxes.iter().map(BoundingBox::area).sum::<f64>() / self.boxes.len() as f64
    }
}

/// Background color and per-label colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: Vec<f64>,
    pub colors: BTreeMap<Label, Vec<f64>>,
}

impl Default for Palette {
    /// Black background; eight distinct unit-norm RGB colors.
    fn default() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let w = 1.0 / 3f64.sqrt();
        let o = 1.0 / 5f64.sqrt();
        let colors = [
            (Label::Red, vec![1.0, 0.0, 0.0]),
            (Label::Green, vec![0.0, 1.0, 0.0]),
            (Label::Blue, vec![0.0, 0.0, 1.0]),
            (Label::Yellow, vec![h, h, 0.0]),
            (Label::Magenta, vec![h, 0.0, h]),
            (Label::Cyan, vec![0.0, h, h]),
            (Label::White, vec![w, w, w]),
            (Label::Orange, vec![2.0 * o, o, 0.0]),
        ];
        Palette {
            background: vec![0.0; 3],
            colors: colors.into_iter().collect(),
        }
    }
}

impl Palette {
    pub fn channels(&self) -> usize {
        self.background.len()
    }

    pub fn color(&self, label: Label) -> Result<&[f64]> {
        self.colors
            .get(&label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("label {label} has no palette color")))
    }
}

/// Radial blob profile: 1 inside [`BLOB_FLAT_RADIUS`], half-cosine taper to
/// 0 at normalized radius 1.
pub fn blob_profile(r: f64) -> f64 {
    if r <= BLOB_FLAT_RADIUS {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        let u = (r - BLOB_FLAT_RADIUS) / (1.0 - BLOB_FLAT_RADIUS);
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// Renders `layout` at `canvas`: background everywhere, then one blob per
/// box composited in list order. Pixel `(i, j)` samples the profile at its
/// center `((j + ½)/W, (i + ½)/H)`.
pub fn render_template(layout: &LayoutSpec, canvas: Canvas, palette: &Palette) -> Result<LatentGrid> {
    let channels = palette.channels();
    if channels == 0 || palette.colors.values().any(|c| c.len() != channels) {
        return Err(Error::invalid("palette colors must match the background channel count"));
    }
    let (h, w) = (canvas.height(), canvas.width());
    let mut img = LatentGrid::zeros(Shape::new(channels, h, w));
    for (c, &b) in palette.background.iter().enumerate() {
        img.plane_mut(c).fill(b);
    }
    for bx in &layout.boxes {
        let color = palette.color(bx.label)?;
        let (cx, cy) = bx.center();
        let (rx, ry) = (0.5 * bx.w, 0.5 * bx.h);
        let y_lo = ((bx.y * h as f64).floor() as usize).min(h);
        let y_hi = (((bx.y + bx.h) * h as f64).ceil() as usize).min(h);
        let x_lo = ((bx.x * w as f64).floor() as usize).min(w);
        let x_hi = (((bx.x + bx.w) * w as f64).ceil() as usize).min(w);
        for i in y_lo..y_hi {
            let py = (i as f64 + 0.5) / h as f64;
            for j in x_lo..x_hi {
                let px = (j as f64 + 0.5) / w as f64;
                let dx = (px - cx) / rx;
                let dy = (py - cy) / ry;
                let alpha = blob_profile((dx * dx + dy * dy).sqrt());
                if alpha <= 0.0 {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let under = img.get(c, i, j);
                    img.set(c, i, j, (1.0 - alpha) * under + alpha * col);
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub layout: LayoutSpec,
    pub template: LatentGrid,
    pub weight: f64,
}

/// Isotropic Gaussian mixture over templates: `z0 ~ Σ w_k N(μ_k, σ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMixture {
    components: Vec<MixtureComponent>,
    pixel_sigma: f64,
    shape: Shape,
}

impl SceneMixture {
    pub fn new(components: Vec<MixtureComponent>, pixel_sigma: f64) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let shape = first.template.shape();
        if !(pixel_sigma >= 0.0 && pixel_sigma.is_finite()) {
            return Err(Error::invalid(format!("pixel_sigma must be >= 0, got {pixel_sigma}")));
        }
        for (k, c) in components.iter().enumerate() {
            if c.template.shape() != shape {
                return Err(Error::invalid(format!(
                    "component {k} has shape {}, expected {shape}",
                    c.template.shape()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("component {k} weight must be positive")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self {
            components,
            pixel_sigma,
            shape,
        })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn pixel_sigma(&self) -> f64 {
        self.pixel_sigma
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn canvas(&self) -> Canvas {
        Canvas(self.shape.height, self.shape.width)
    }

    pub fn templates(&self) -> impl Iterator<Item = &LatentGrid> {
        self.components.iter().map(|c| &c.template)
    }

    /// Indices of components whose layout matches `layout`.
    pub fn matching_components(&self, layout: &LayoutSpec) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| layout.matches(&c.layout))
            .map(|(k, _)| k)
            .collect()
    }

    /// Same layouts and weights with each template mapped through `f` and a
    /// new pixel noise scale.
    pub fn map_templates(
        &self,
        pixel_sigma: f64,
        f: impl Fn(&LatentGrid) -> Result<LatentGrid>,
    ) -> Result<SceneMixture> {
        let components = self
            .components
            .iter()
            .map(|c| {
                Ok(MixtureComponent {
                    layout: c.layout.clone(),
                    template: f(&c.template)?,
                    weight: c.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneMixture::new(components, pixel_sigma)
    }
}

/// Uniform-weight mixture over the rendered `layouts`.
pub fn mixture_from_layouts(
    layouts: &[LayoutSpec],
    pixel_sigma: f64,
    palette: &Palette,
) -> Result<SceneMixture> {
    let first = layouts
        .first()
        .ok_or_else(|| Error::invalid("mixture needs at least one layout"))?;
    if let Some((i, l)) = layouts.iter().enumerate().find(|(_, l)| l.canvas != first.canvas) {
        return Err(Error::invalid(format!(
            "layout {i} has canvas {:?}, expected {:?}",
            l.canvas, first.canvas
        )));
    }
    let weight = 1.0 / layouts.len() as f64;
    let components = layouts
        .iter()
        .map(|l| {
            Ok(MixtureComponent {
                layout: l.clone(),
                template: render_template(l, l.canvas, palette)?,
                weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SceneMixture::new(components, pixel_sigma)
}

/// Draws a component by weight and adds `N(0, σ²)` pixel noise to its template.
pub fn sample_scene<R: Rng>(m: &SceneMixture, rng: &mut R) -> (LatentGrid, usize) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut index = m.len() - 1;
    for (k, c) in m.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            index = k;
            break;
        }
    }
    let mut out = m.components[index].template.clone();
    if m.pixel_sigma > 0.0 {
        for v in out.as_mut_slice() {
            *v += m.pixel_sigma * rng.next_gaussian();
        }
    }
    (out, index)
}

/// Index of the template closest to `img` in Euclidean distance, with that
/// distance's per-element RMS.
pub fn nearest_template<'a>(
    img: &LatentGrid,
    templates: impl IntoIterator<Item = &'a LatentGrid>,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, t) in templates.into_iter().enumerate() {
        let d = img.dist_sq(t)?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    let (k, d) = best.ok_or_else(|| Error::invalid("no templates to compare against"))?;
    Ok((k, (d / img.len() as f64).sqrt()))
}

/// The four two-box layouts used by the desk-scale benchmark. Box positions
/// and labels are chosen so no two layouts share a same-label box.
pub fn benchmark_layouts(canvas: Canvas) -> Vec<LayoutSpec> {
    let b = BoundingBox::new;
    vec![
        LayoutSpec::new(
            canvas,
            vec![b(0.05, 0.05, 0.4, 0.4, Label::Red), b(0.55, 0.55, 0.4, 0.4, Label::Blue)],
        ),
        LayoutSpec::new(
            canvas,
            vec![b(0.55, 0.05, 0.4, 0.4, Label::Green), b(0.05, 0.55, 0.4, 0.4, Label::Red)],
        ),
        LayoutSpec::new(
            canvas,
            vec![b(0.3, 0.05, 0.4, 0.4, Label::Blue), b(0.3, 0.55, 0.4, 0.4, Label::Green)],
        ),
        LayoutSpec::new(
            canvas,
            vec![b(0.05, 0.3, 0.4, 0.4, Label::Magenta), b(0.55, 0.3, 0.4, 0.4, Label::Yellow)],
        ),
    ]
}
