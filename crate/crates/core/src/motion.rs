//! Temporal-difference motion gating and red circle/square visual prompts.
//!
//! Intensities are normalized to `[0, 1]`. The motion proportion of a frame
//! pair is the mean absolute per-pixel difference; frames below
//! `epsilon_motion` are static and never reach an embedder. Active frames get
//! their changed regions outlined: red circles for subtle regions, red
//! squares for prominent ones.

use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PIXEL_THRESHOLD: f64 = 10.0 / 255.0;
pub const DEFAULT_MIN_AREA: usize = 25;
pub const DEFAULT_DILATION_RADIUS: usize = 2;

const STROKE: Rgb<u8> = Rgb([255, 0, 0]);

/// Row-major grayscale frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput("frame has zero area"));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch { left: (width, height), right: (data.len(), 1) });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::BadParams("intensity outside [0,1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Luma conversion with weights 0.299/0.587/0.114.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

fn check_dims(prev: &GrayFrame, cur: &GrayFrame) -> Result<()> {
    if prev.dims() != cur.dims() {
        return Err(Error::DimensionMismatch { left: prev.dims(), right: cur.dims() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    width: usize,
    height: usize,
    diffs: Vec<f64>,
    proportion: f64,
}

impl MotionField {
    pub fn between(prev: &GrayFrame, cur: &GrayFrame) -> Result<Self> {
        check_dims(prev, cur)?;
        let diffs: Vec<f64> = prev.data.iter().zip(&cur.data).map(|(a, b)| (b - a).abs()).collect();
        let proportion = diffs.iter().sum::<f64>() / (prev.width * prev.height) as f64;
        Ok(Self { width: prev.width, height: prev.height, diffs, proportion })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn diffs(&self) -> &[f64] {
        &self.diffs
    }

    pub fn proportion(&self) -> f64 {
        self.proportion
    }

    fn area(&self) -> f64 {
        (self.width * self.height) as f64
    }
}

/// Mean absolute intensity difference between two frames.
pub fn motion_proportion(prev: &GrayFrame, cur: &GrayFrame) -> Result<f64> {
    Ok(MotionField::between(prev, cur)?.proportion)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Static { proportion: f64 },
    Active(MotionField),
}

impl Gate {
    pub fn proportion(&self) -> f64 {
        match self {
            Gate::Static { proportion } => *proportion,
            Gate::Active(field) => field.proportion,
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, Gate::Static { .. })
    }
}

/// Static iff `p < epsilon_motion`; `p == epsilon_motion` passes.
pub fn gate(prev: &GrayFrame, cur: &GrayFrame, epsilon_motion: f64) -> Result<Gate> {
    let field = MotionField::between(prev, cur)?;
    if field.proportion < epsilon_motion {
        Ok(Gate::Static { proportion: field.proportion })
    } else {
        Ok(Gate::Active(field))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch { left: (width, height), right: (bits.len(), 1) });
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Square-kernel binary dilation, done as two separable max passes.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let mut rows = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| self.bits[y * w + xx]);
            }
        }
        let mut out = vec![false; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
            }
        }
        Mask { width: w, height: h, bits: out }
    }
}

/// Pixels whose difference reaches `pixel_threshold`.
pub fn motion_mask(field: &MotionField, pixel_threshold: f64) -> Mask {
    Mask { width: field.width, height: field.height, bits: field.diffs.iter().map(|&d| d >= pixel_threshold).collect() }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRegion {
    pub bbox: BBox,
    /// Share of the frame's total difference mass that falls on this region's pixels.
    pub mass: f64,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionConfig {
    pub pixel_threshold: f64,
    pub min_area: usize,
    pub dilation_radius: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { pixel_threshold: DEFAULT_PIXEL_THRESHOLD, min_area: DEFAULT_MIN_AREA, dilation_radius: DEFAULT_DILATION_RADIUS }
    }
}

/// Group active mask pixels into regions.
///
/// Connectivity is decided on the dilated mask (4-neighbourhood), but a
/// region's box, pixel count and mass only cover the undilated active pixels
/// it contains. Regions with fewer than `min_area` active pixels are dropped.
/// Output is sorted by descending mass, ties by `(y0, x0)`.
pub fn extract_regions(mask: &Mask, field: &MotionField, min_area: usize, dilation_radius: usize) -> Result<Vec<MotionRegion>> {
    if (mask.width, mask.height) != (field.width, field.height) {
        return Err(Error::DimensionMismatch { left: (mask.width, mask.height), right: (field.width, field.height) });
    }
    let (w, h) = (mask.width, mask.height);
    let grown = mask.dilate(dilation_radius);
    let mut visited = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut regions = Vec::new();

    for start in 0..w * h {
        if !grown.bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0usize;
        let mut mass = 0.0;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            if mask.bits[i] {
                count += 1;
                mass += field.diffs[i];
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            let mut visit = |j: usize| {
                if grown.bits[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if count > 0 && count >= min_area {
            regions.push(MotionRegion {
                bbox: BBox { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 },
                mass: mass / field.area(),
                pixel_count: count,
            });
        }
    }
    regions.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.bbox.y0.cmp(&b.bbox.y0)).then(a.bbox.x0.cmp(&b.bbox.x0)));
    Ok(regions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Circle,
    Square,
}

/// None at or below `epsilon`, circle strictly between, square from `alpha` up.
pub fn select_prompt(mass: f64, epsilon_motion: f64, alpha_prompt: f64) -> Result<Option<PromptKind>> {
    if epsilon_motion >= alpha_prompt {
        return Err(Error::BadThresholds { epsilon: epsilon_motion, alpha: alpha_prompt });
    }
    Ok(if mass <= epsilon_motion {
        None
    } else if mass < alpha_prompt {
        Some(PromptKind::Circle)
    } else {
        Some(PromptKind::Square)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisualPrompt {
    Circle { cx: f64, cy: f64, radius: f64, stroke: u32 },
    Square { bbox: BBox, stroke: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptedFrame {
    pub rendered: RgbImage,
    pub prompts: Vec<VisualPrompt>,
    pub proportion: f64,
}

pub fn stroke_width(width: u32, height: u32) -> u32 {
    ((0.004 * f64::from(width.min(height))).round() as u32).max(2)
}

fn circle_for(bbox: &BBox, stroke: u32) -> VisualPrompt {
    let cx = (f64::from(bbox.x0) + f64::from(bbox.x1)) / 2.0;
    let cy = (f64::from(bbox.y0) + f64::from(bbox.y1)) / 2.0;
    let (bw, bh) = (f64::from(bbox.width()), f64::from(bbox.height()));
    let radius = 1.2 * (bw * bw + bh * bh).sqrt() / 2.0;
    VisualPrompt::Circle { cx, cy, radius, stroke }
}

fn square_for(bbox: &BBox, stroke: u32, width: u32, height: u32) -> VisualPrompt {
    let dx = (0.1 * f64::from(bbox.width())).round() as u32;
    let dy = (0.1 * f64::from(bbox.height())).round() as u32;
    let grown = BBox {
        x0: bbox.x0.saturating_sub(dx),
        y0: bbox.y0.saturating_sub(dy),
        x1: (bbox.x1 + dx).min(width - 1),
        y1: (bbox.y1 + dy).min(height - 1),
    };
    VisualPrompt::Square { bbox: grown, stroke }
}

fn draw(img: &mut RgbImage, prompt: &VisualPrompt) {
    let (w, h) = (img.width(), img.height());
    match *prompt {
        VisualPrompt::Circle { cx, cy, radius, stroke } => {
            let half = f64::from(stroke) / 2.0;
            let reach = radius + half;
            let xs = ((cx - reach).floor().max(0.0) as u32)..=((cx + reach).ceil().min(f64::from(w - 1)) as u32);
            let ys = ((cy - reach).floor().max(0.0) as u32)..=((cy + reach).ceil().min(f64::from(h - 1)) as u32);
            for y in ys {
                for x in xs.clone() {
                    let d = ((f64::from(x) - cx).powi(2) + (f64::from(y) - cy).powi(2)).sqrt();
                    if (d - radius).abs() <= half {
                        img.put_pixel(x, y, STROKE);
                    }
                }
            }
        }
        VisualPrompt::Square { bbox, stroke } => {
            for y in bbox.y0..=bbox.y1 {
                for x in bbox.x0..=bbox.x1 {
                    let edge = x < bbox.x0 + stroke || x + stroke > bbox.x1 || y < bbox.y0 + stroke || y + stroke > bbox.y1;
                    if edge {
                        img.put_pixel(x, y, STROKE);
                    }
                }
            }
        }
    }
}

/// Overlay one prompt per `(region, kind)` pair onto a copy of `frame`.
pub fn render_prompts(frame: &RgbImage, regions: &[MotionRegion], kinds: &[PromptKind], proportion: f64) -> Result<PromptedFrame> {
    if regions.len() != kinds.len() {
        return Err(Error::LengthMismatch(regions.len(), kinds.len()));
    }
    let (w, h) = frame.dimensions();
    let stroke = stroke_width(w, h);
    let mut rendered = frame.clone();
    let mut prompts = Vec::with_capacity(regions.len());
    for (region, kind) in regions.iter().zip(kinds) {
        let b = region.bbox;
        if b.x1 >= w || b.y1 >= h || b.x0 > b.x1 || b.y0 > b.y1 {
            return Err(Error::BadParams(format!("region {b:?} outside {w}x{h} frame")));
        }
        let prompt = match kind {
            PromptKind::Circle => circle_for(&b, stroke),
            PromptKind::Square => square_for(&b, stroke, w, h),
        };
        draw(&mut rendered, &prompt);
        prompts.push(prompt);
    }
    Ok(PromptedFrame { rendered, prompts, proportion })
}

/// Thresholds that drive gating and prompt selection for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSettings {
    pub epsilon_motion: f64,
    pub alpha_prompt: f64,
    pub regions: RegionConfig,
}

/// Outcome of the motion stage for one frame.
#[derive(Debug, Clone)]
pub enum FrameMotion {
    Static { proportion: f64 },
    Active(PromptedFrame),
}

impl FrameMotion {
    pub fn proportion(&self) -> f64 {
        match self {
            FrameMotion::Static { proportion } => *proportion,
            FrameMotion::Active(p) => p.proportion,
        }
    }
}

/// Gate a frame against its predecessor and, if active, render its prompts.
/// A frame without a predecessor is static with `p = 0`.
pub fn prompt_frame(prev: Option<&GrayFrame>, cur: &GrayFrame, color: &RgbImage, settings: &MotionSettings) -> Result<FrameMotion> {
    let Some(prev) = prev else { return Ok(FrameMotion::Static { proportion: 0.0 }) };
    let field = match gate(prev, cur, settings.epsilon_motion)? {
        Gate::Static { proportion } => return Ok(FrameMotion::Static { proportion }),
        Gate::Active(field) => field,
    };
    let mask = motion_mask(&field, settings.regions.pixel_threshold);
    let regions = extract_regions(&mask, &field, settings.regions.min_area, settings.regions.dilation_radius)?;
    let mut chosen = Vec::new();
    let mut kinds = Vec::new();
    for region in regions {
        if let Some(kind) = select_prompt(region.mass, settings.epsilon_motion, settings.alpha_prompt)? {
            chosen.push(region);
            kinds.push(kind);
        }
    }
    Ok(FrameMotion::Active(render_prompts(color, &chosen, &kinds, field.proportion)?))
}
