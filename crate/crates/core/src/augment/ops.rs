//! Individual augmentation operators. All of them preserve image shape and
//! keep pixels in `[0, 1]`; randomness comes only from the passed stream.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

fn check_probability(p: f64, what: &str) -> Result<()> {
    ensure((0.0..=1.0).contains(&p), || format!("{what} probability {p} outside [0, 1]"))
}

/// Window of the zero-padded image starting at `(off_y, off_x)` in padded coordinates.
pub fn crop_at(img: &ImageTensor, padding: usize, off_y: usize, off_x: usize) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    assert!(off_y <= 2 * padding && off_x <= 2 * padding);
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        let sy = (y + off_y) as isize - padding as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + off_x) as isize - padding as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

pub fn random_crop(img: &ImageTensor, padding: usize, rng: &mut RngStream) -> Result<ImageTensor> {
    ensure(padding < img.height().min(img.width()), || {
        format!("crop padding {padding} must be smaller than the image side {}", img.height().min(img.width()))
    })?;
    let off_y = rng.random_range(0..=2 * padding);
    let off_x = rng.random_range(0..=2 * padding);
    Ok(crop_at(img, padding, off_y, off_x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

pub fn flip(img: &ImageTensor, axis: FlipAxis) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match axis {
                FlipAxis::Horizontal => (y, w - 1 - x),
                FlipAxis::Vertical => (h - 1 - y, x),
            };
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    out
}

pub fn random_flip(img: &ImageTensor, axis: FlipAxis, p: f64, rng: &mut RngStream) -> Result<ImageTensor> {
    check_probability(p, "flip")?;
    Ok(if rng.random_bool(p) { flip(img, axis) } else { img.clone() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Samples channel `c` at real coordinates; positions outside the image read as zero.
fn sample(img: &ImageTensor, y: f64, x: f64, c: usize, interp: Interpolation) -> f32 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            f64::from(img.get(yy as usize, xx as usize, c))
        }
    };
    let v = match interp {
        Interpolation::Nearest => at(y.round() as isize, x.round() as isize),
        Interpolation::Bilinear => {
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = if fx == 0.0 { at(y0, x0) } else { (1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1) };
            if fy == 0.0 {
                top
            } else {
                let bottom =
                    if fx == 0.0 { at(y0 + 1, x0) } else { (1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1) };
                (1.0 - fy) * top + fy * bottom
            }
        }
    };
    (v as f32).clamp(0.0, 1.0)
}

/// Rotates about the image centre by `degrees`; uncovered pixels become zero.
pub fn rotate(img: &ImageTensor, degrees: f64, interp: Interpolation) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = (degrees * PI / 180.0).sin_cos();
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            for ch in 0..c {
                out.set(y, x, ch, sample(img, sy, sx, ch, interp));
            }
        }
    }
    out
}

/// Rotation by an angle drawn uniformly from `[lo, hi]` degrees.
pub fn random_rotation(
    img: &ImageTensor,
    degrees_lo: f64,
    degrees_hi: f64,
    interp: Interpolation,
    rng: &mut RngStream,
) -> Result<ImageTensor> {
    let angle = draw_angle(degrees_lo, degrees_hi, rng)?;
    Ok(rotate(img, angle, interp))
}

pub(crate) fn draw_angle(lo: f64, hi: f64, rng: &mut RngStream) -> Result<f64> {
    ensure(lo > 0.0 && lo <= hi && hi <= 360.0, || format!("rotation range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 360"))?;
    Ok(if lo == hi { lo } else { rng.random_range(lo..=hi) })
}

/// Zeroes each pixel position (all channels together) with probability `p`.
pub fn pixel_dropout(img: &ImageTensor, p: f64, rng: &mut RngStream) -> Result<ImageTensor> {
    check_probability(p, "dropout")?;
    let c = img.channels();
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_mut(c) {
        if rng.random_bool(p) {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// Square hole centred at `(cy, cx)` with side `side`, clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hole {
    pub cy: usize,
    pub cx: usize,
    pub side: usize,
}

impl Hole {
    /// Half-open row and column ranges covered inside an `h`×`w` image.
    pub fn bounds(&self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = self.cy.saturating_sub(self.side / 2);
        let x0 = self.cx.saturating_sub(self.side / 2);
        let y1 = (self.cy + self.side - self.side / 2).min(h);
        let x1 = (self.cx + self.side - self.side / 2).min(w);
        (y0..y1, x0..x1)
    }
}

pub fn cutout_at(img: &ImageTensor, holes: &[Hole]) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    for hole in holes {
        let (ys, xs) = hole.bounds(h, w);
        for y in ys {
            for x in xs.clone() {
                for ch in 0..c {
                    out.set(y, x, ch, 0.0);
                }
            }
        }
    }
    out
}

pub(crate) fn draw_holes(
    h: usize,
    w: usize,
    holes: usize,
    side_lo: usize,
    side_hi: usize,
    rng: &mut RngStream,
) -> Result<Vec<Hole>> {
    ensure(holes >= 1, || "cutout needs at least one hole".into())?;
    ensure(side_lo > 0 && side_lo <= side_hi && side_hi <= h.min(w), || {
        format!("cutout side range [{side_lo}, {side_hi}] must lie within [1, {}]", h.min(w))
    })?;
    Ok((0..holes)
        .map(|_| {
            let side = rng.random_range(side_lo..=side_hi);
            Hole { cy: rng.random_range(0..h), cx: rng.random_range(0..w), side }
        })
        .collect())
}

pub fn cutout(img: &ImageTensor, holes: usize, side_lo: usize, side_hi: usize, rng: &mut RngStream) -> Result<ImageTensor> {
    let drawn = draw_holes(img.height(), img.width(), holes, side_lo, side_hi, rng)?;
    Ok(cutout_at(img, &drawn))
}

/// A smooth displacement field confined to one rectangle of the image.
///
/// Displacement is a sum of low-order sine modes that vanish on the region
/// border, scaled so no pixel moves more than `magnitude`×region side.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Mode coefficients for (dy, dx), indexed `[mode_y][mode_x]`, each in [-1, 1].
    pub coeff_y: [[f64; 2]; 2],
    pub coeff_x: [[f64; 2]; 2],
    pub magnitude: f64,
}

impl WarpField {
    fn displacement(&self, y: usize, x: usize) -> (f64, f64) {
        let u = (y - self.top) as f64 / (self.height.max(2) - 1) as f64;
        let v = (x - self.left) as f64 / (self.width.max(2) - 1) as f64;
        let mode = |coef: &[[f64; 2]; 2]| {
            let norm: f64 = coef.iter().flatten().map(|c| c.abs()).sum();
            if norm == 0.0 {
                return 0.0;
            }
            let mut s = 0.0;
            for (i, row) in coef.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    s += c * ((i + 1) as f64 * PI * u).sin() * ((j + 1) as f64 * PI * v).sin();
                }
            }
            s / norm
        };
        (
            mode(&self.coeff_y) * self.magnitude * self.height as f64,
            mode(&self.coeff_x) * self.magnitude * self.width as f64,
        )
    }
}

pub fn warp_with(img: &ImageTensor, field: &WarpField) -> ImageTensor {
    let c = img.channels();
    let mut out = img.clone();
    for y in field.top..field.top + field.height {
        for x in field.left..field.left + field.width {
            let (dy, dx) = field.displacement(y, x);
            if dy == 0.0 && dx == 0.0 {
                continue;
            }
            for ch in 0..c {
                out.set(y, x, ch, sample(img, y as f64 + dy, x as f64 + dx, ch, Interpolation::Bilinear));
            }
        }
    }
    out
}

pub(crate) fn draw_warp(
    h: usize,
    w: usize,
    base: usize,
    jitter: usize,
    magnitude: f64,
    rng: &mut RngStream,
) -> Result<WarpField> {
    ensure(base > 0 && base + jitter <= h.min(w), || {
        format!("warp region {base}+U(0,{jitter}) does not fit a {h}x{w} image")
    })?;
    ensure(magnitude >= 0.0 && magnitude.is_finite(), || format!("warp magnitude {magnitude} must be non-negative"))?;
    let height = base + rng.random_range(0..=jitter);
    let width = base + rng.random_range(0..=jitter);
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    let mut coeffs = || [[rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)], [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ]];
    let coeff_y = coeffs();
    let coeff_x = coeffs();
    Ok(WarpField { top, left, height, width, coeff_y, coeff_x, magnitude })
}

/// Elastic warp of a randomly placed `(base + U{0..jitter})²` region.
pub fn warp(
    img: &ImageTensor,
    base: usize,
    jitter: usize,
    magnitude: f64,
    rng: &mut RngStream,
) -> Result<ImageTensor> {
    let field = draw_warp(img.height(), img.width(), base, jitter, magnitude, rng)?;
    Ok(warp_with(img, &field))
}

/// Replaces every channel with the per-position channel mean.
pub fn grayscale(img: &ImageTensor) -> Result<ImageTensor> {
    let c = img.channels();
    ensure(c == 3, || format!("grayscale needs a 3-channel image, got {c} channel(s)"))?;
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_mut(3) {
        let mean = (f64::from(px[0]) + f64::from(px[1]) + f64::from(px[2])) / 3.0;
        px.fill(mean as f32);
    }
    Ok(out)
}

pub fn random_grayscale(img: &ImageTensor, p: f64, rng: &mut RngStream) -> Result<ImageTensor> {
    check_probability(p, "grayscale")?;
    if img.channels() != 3 {
        return Err(Error::Validation(format!("grayscale needs a 3-channel image, got {}", img.channels())));
    }
    if rng.random_bool(p) {
        grayscale(img)
    } else {
        Ok(img.clone())
    }
}
