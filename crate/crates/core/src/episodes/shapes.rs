//! Procedural shape classes. Each class couples a silhouette family with a
//! hue and a surface texture; instances vary in position, scale, rotation,
//! colour jitter and background.

use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{ClassId, EpisodeError, NUM_CLASSES};

pub const MIN_IMAGE_SIDE: usize = 32;
pub const MIN_AREA_FRACTION: f32 = 0.01;
pub const MAX_AREA_FRACTION: f32 = 0.60;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Plus,
    BarHorizontal,
    BarVertical,
    BarDiagonal,
    EllipseWide,
    EllipseTall,
    Diamond,
    Hexagon,
    Star,
    LShape,
    TShape,
    Frame,
    Dome,
    Crescent,
    Trapezoid,
    XCross,
}

const KINDS: [ShapeKind; NUM_CLASSES] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Plus,
    ShapeKind::BarHorizontal,
    ShapeKind::BarVertical,
    ShapeKind::BarDiagonal,
    ShapeKind::EllipseWide,
    ShapeKind::EllipseTall,
    ShapeKind::Diamond,
    ShapeKind::Hexagon,
    ShapeKind::Star,
    ShapeKind::LShape,
    ShapeKind::TShape,
    ShapeKind::Frame,
    ShapeKind::Dome,
    ShapeKind::Crescent,
    ShapeKind::Trapezoid,
    ShapeKind::XCross,
];

impl ShapeKind {
    /// Membership test in the shape's unit frame (roughly `[-1, 1]²`, `v` down).
    pub fn contains(self, u: f32, v: f32) -> bool {
        let r2 = u * u + v * v;
        let (au, av) = (u.abs(), v.abs());
        const S2: f32 = std::f32::consts::FRAC_1_SQRT_2;
        match self {
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Square => au <= 0.8 && av <= 0.8,
            ShapeKind::Triangle => (-0.9..=0.8).contains(&v) && au <= 0.56 * (v + 0.9),
            ShapeKind::Ring => (0.3025..=1.0).contains(&r2),
            ShapeKind::Plus => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
            ShapeKind::BarHorizontal => au <= 1.0 && av <= 0.32,
            ShapeKind::BarVertical => au <= 0.32 && av <= 1.0,
            ShapeKind::BarDiagonal => ((u - v) * S2).abs() <= 0.32 && ((u + v) * S2).abs() <= 1.0,
            ShapeKind::EllipseWide => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
            ShapeKind::EllipseTall => (u / 0.55) * (u / 0.55) + v * v <= 1.0,
            ShapeKind::Diamond => au + av <= 1.0,
            ShapeKind::Hexagon => av <= 0.866 && 1.732 * au + av <= 1.732,
            ShapeKind::Star => {
                let theta = v.atan2(u);
                r2.sqrt() <= 0.6 + 0.4 * (5.0 * theta).cos()
            }
            ShapeKind::LShape => {
                ((-0.8..=-0.2).contains(&u) && av <= 0.9) || ((-0.8..=0.8).contains(&u) && (0.3..=0.9).contains(&v))
            }
            ShapeKind::TShape => ((-0.9..=-0.3).contains(&v) && au <= 0.9) || (au <= 0.3 && av <= 0.9),
            ShapeKind::Frame => au <= 0.9 && av <= 0.9 && !(au <= 0.45 && av <= 0.45),
            ShapeKind::Dome => u * u + (v - 0.4) * (v - 0.4) <= 1.0 && v <= 0.4,
            ShapeKind::Crescent => r2 <= 1.0 && (u - 0.5) * (u - 0.5) + v * v > 0.42,
            ShapeKind::Trapezoid => av <= 0.7 && au <= 0.5 + 0.3 * (v + 0.7) / 0.7,
            ShapeKind::XCross => {
                au <= 0.85 && av <= 0.85 && (((u - v) * S2).abs() <= 0.25 || ((u + v) * S2).abs() <= 0.25)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Plain,
    Stripes { period: u8 },
    Checker { period: u8 },
    Dots { period: u8 },
}

/// Generator parameters of one of the twenty synthetic classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeClass {
    pub class_id: ClassId,
    pub kind: ShapeKind,
    /// Base hue in `[0, 1)`.
    pub hue: f32,
    pub texture: Texture,
    /// Object radius as a fraction of the shorter image side.
    pub size_range: (f32, f32),
    /// Maximum absolute rotation in radians.
    pub max_rotation: f32,
}

impl ShapeClass {
    pub fn get(class_id: ClassId) -> Result<ShapeClass, EpisodeError> {
        if !(1..=NUM_CLASSES as ClassId).contains(&class_id) {
            return Err(EpisodeError::InvalidClass(class_id));
        }
        let c = class_id as usize;
        // Hue order is a permutation of the class order, so any block of
        // consecutive class ids spreads over the colour wheel.
        let hue = ((c * 7) % NUM_CLASSES) as f32 / NUM_CLASSES as f32;
        let period = 4 + 2 * (c % 3) as u8;
        let texture = match c % 4 {
            0 => Texture::Plain,
            1 => Texture::Stripes { period },
            2 => Texture::Checker { period },
            _ => Texture::Dots { period },
        };
        Ok(ShapeClass {
            class_id,
            kind: KINDS[c - 1],
            hue,
            texture,
            size_range: (0.15, 0.3),
            max_rotation: PI / 12.0,
        })
    }

    pub fn all() -> impl Iterator<Item = ShapeClass> {
        (1..=NUM_CLASSES as ClassId).map(|c| ShapeClass::get(c).expect("valid id"))
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Random placement of a shape instance.
struct Placement {
    cx: f32,
    cy: f32,
    radius: f32,
    cos: f32,
    sin: f32,
}

impl Placement {
    fn sample(class: &ShapeClass, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Placement {
        let side = h.min(w) as f32;
        let radius = side * rng.gen_range(class.size_range.0..class.size_range.1);
        let margin = 0.8 * radius;
        let cx = rng.gen_range(margin..(w as f32 - margin).max(margin + 1.0));
        let cy = rng.gen_range(margin..(h as f32 - margin).max(margin + 1.0));
        let angle = rng.gen_range(-class.max_rotation..=class.max_rotation);
        Placement {
            cx,
            cy,
            radius,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Pixel centre to the shape's unit frame.
    fn to_unit(&self, x: usize, y: usize) -> (f32, f32) {
        let dx = x as f32 + 0.5 - self.cx;
        let dy = y as f32 + 0.5 - self.cy;
        let u = (self.cos * dx + self.sin * dy) / self.radius;
        let v = (-self.sin * dx + self.cos * dy) / self.radius;
        (u, v)
    }
}

struct Surface {
    rgb: [f32; 3],
    texture: Texture,
    phase: (usize, usize),
    scale: f32,
}

impl Surface {
    fn sample(class: &ShapeClass, rng: &mut ChaCha8Rng, side: usize) -> Surface {
        let hue = class.hue + rng.gen_range(-0.012..0.012);
        let sat = rng.gen_range(0.6..0.9);
        let val = rng.gen_range(0.6..0.95);
        Surface {
            rgb: hsv_to_rgb(hue, sat, val),
            texture: class.texture,
            phase: (rng.gen_range(0..16), rng.gen_range(0..16)),
            scale: side as f32 / 64.0,
        }
    }

    fn shade(&self, x: usize, y: usize) -> [f32; 3] {
        let period = |p: u8| ((p as f32 * self.scale).round() as usize).max(2);
        let (x, y) = (x + self.phase.0, y + self.phase.1);
        let factor = match self.texture {
            Texture::Plain => 1.0,
            Texture::Stripes { period: p } => {
                if (y / period(p)) % 2 == 0 {
                    1.0
                } else {
                    0.72
                }
            }
            Texture::Checker { period: p } => {
                let q = period(p);
                if (x / q + y / q) % 2 == 0 {
                    1.0
                } else {
                    0.72
                }
            }
            Texture::Dots { period: p } => {
                let q = period(p);
                let (dx, dy) = ((x % q) as f32 - q as f32 / 2.0, (y % q) as f32 - q as f32 / 2.0);
                if dx * dx + dy * dy <= (q as f32 / 3.0).powi(2) {
                    0.65
                } else {
                    1.0
                }
            }
        };
        self.rgb.map(|c| (c * factor).clamp(0.0, 1.0))
    }
}

fn paint_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<[f32; 3]> {
    let base = hsv_to_rgb(
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..0.15),
        rng.gen_range(0.25..0.75),
    );
    let (gx, gy) = (rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let ramp = gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
            let noise = rng.gen_range(-0.06..0.06);
            pixels.push(base.map(|c| (c + ramp + noise).clamp(0.0, 1.0)));
        }
    }
    pixels
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one instance of `class`. With probability 0.5 a shape from a
/// class drawn out of `distractors` is painted underneath as clutter. The
/// mask covers exactly the visible pixels of the target shape.
pub fn render_instance(
    class: &ShapeClass,
    seed: u64,
    (h, w): (usize, usize),
    distractors: &[ClassId],
) -> Result<(Tensor, Tensor), EpisodeError> {
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(EpisodeError::ImageTooSmall { h, w });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(class.class_id as u64, seed));
    let mut pixels = paint_background(&mut rng, h, w);

    let pool: Vec<ClassId> = distractors.iter().copied().filter(|&c| c != class.class_id).collect();
    if !pool.is_empty() && rng.gen_bool(0.5) {
        let other = ShapeClass::get(pool[rng.gen_range(0..pool.len())])?;
        let place = Placement::sample(&other, &mut rng, h, w);
        let surface = Surface::sample(&other, &mut rng, h.min(w));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = place.to_unit(x, y);
                if other.kind.contains(u, v) {
                    pixels[y * w + x] = surface.shade(x, y);
                }
            }
        }
    }

    let total = (h * w) as f32;
    let mut mask = vec![0.0f32; h * w];
    loop {
        let place = Placement::sample(class, &mut rng, h, w);
        let mut area = 0usize;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = place.to_unit(x, y);
                let inside = class.kind.contains(u, v);
                mask[y * w + x] = inside as u8 as f32;
                area += inside as usize;
            }
        }
        let frac = area as f32 / total;
        if (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            break;
        }
    }
    let surface = Surface::sample(class, &mut rng, h.min(w));
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 1.0 {
                pixels[y * w + x] = surface.shade(x, y);
            }
        }
    }

    let mut planar = vec![0.0f32; 3 * h * w];
    for (i, px) in pixels.iter().enumerate() {
        for ch in 0..3 {
            planar[ch * h * w + i] = px[ch];
        }
    }
    Ok((Tensor::new(vec![3, h, w], planar)?, Tensor::new(vec![1, h, w], mask)?))
}
