//! Procedural pristine images, one generator per content class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::image::Image;
use crate::seed;

pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentClass {
    BlobCreatures,
    GridSkyline,
    StickFigures,
    Boxes,
    GradientHorizon,
    DarkFieldStars,
    BranchFractals,
    CirclesTable,
    UniformNoiseTexture,
}

impl ContentClass {
    pub const ALL: [ContentClass; 9] = [
        ContentClass::BlobCreatures,
        ContentClass::GridSkyline,
        ContentClass::StickFigures,
        ContentClass::Boxes,
        ContentClass::GradientHorizon,
        ContentClass::DarkFieldStars,
        ContentClass::BranchFractals,
        ContentClass::CirclesTable,
        ContentClass::UniformNoiseTexture,
    ];

    pub fn from_id(id: usize) -> Result<Self, SynthError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(SynthError::ContentClass(id))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ContentClass::BlobCreatures => "blob-creatures",
            ContentClass::GridSkyline => "grid-skyline",
            ContentClass::StickFigures => "stick-figures",
            ContentClass::Boxes => "boxes",
            ContentClass::GradientHorizon => "gradient-horizon",
            ContentClass::DarkFieldStars => "dark-field-stars",
            ContentClass::BranchFractals => "branch-fractals",
            ContentClass::CirclesTable => "circles-table",
            ContentClass::UniformNoiseTexture => "uniform-noise-texture",
        }
    }
}

type Rgb = [f64; 3];

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new(bg: Rgb) -> Self {
        let mut img = Image::filled(SIZE, SIZE, CHANNELS, 0.0);
        for y in 0..SIZE {
            for x in 0..SIZE {
                for c in 0..CHANNELS {
                    img.set(y, x, c, bg[c]);
                }
            }
        }
        Self { img }
    }

    /// Alpha-blends `color` at pixel centre `(y, x)`.
    fn blend(&mut self, y: usize, x: usize, color: Rgb, alpha: f64) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        for (c, &v) in color.iter().enumerate() {
            let old = self.img.get(y, x, c);
            self.img.set(y, x, c, old + a * (v - old));
        }
    }

    /// Paints every pixel whose signed coverage `f(y, x)` is positive, with a
    /// one-pixel soft edge.
    fn shade(&mut self, color: Rgb, f: impl Fn(f64, f64) -> f64) {
        for y in 0..SIZE {
            for x in 0..SIZE {
                let cov = f(y as f64 + 0.5, x as f64 + 0.5);
                self.blend(y, x, color, cov + 0.5);
            }
        }
    }

    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, color: Rgb) {
        self.shade(color, |y, x| {
            let d = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
            (1.0 - d) * ry.min(rx)
        });
    }

    fn rect(&mut self, y0: f64, x0: f64, y1: f64, x1: f64, color: Rgb) {
        self.shade(color, |y, x| {
            (y - y0).min(y1 - y).min(x - x0).min(x1 - x)
        });
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), width: f64, color: Rgb) {
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dy * dy + dx * dx).max(1e-12);
        self.shade(color, |y, x| {
            let t = (((y - a.0) * dy + (x - a.1) * dx) / len2).clamp(0.0, 1.0);
            let (py, px) = (a.0 + t * dy, a.1 + t * dx);
            width / 2.0 - ((y - py).powi(2) + (x - px).powi(2)).sqrt()
        });
    }
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Rgb {
    [
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
    ]
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

const S: f64 = SIZE as f64;

fn blob_creatures(rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new(color(rng, 0.5, 0.9));
    for _ in 0..rng.gen_range(1..=3) {
        let (cy, cx) = (rng.gen_range(8.0..24.0), rng.gen_range(8.0..24.0));
        let (ry, rx) = (rng.gen_range(4.0..9.0), rng.gen_range(4.0..9.0));
        cv.ellipse(cy, cx, ry, rx, color(rng, 0.1, 0.7));
        let eye = [1.0, 1.0, 1.0];
        cv.ellipse(cy - ry * 0.3, cx - rx * 0.35, 1.4, 1.4, eye);
        cv.ellipse(cy - ry * 0.3, cx + rx * 0.35, 1.4, 1.4, eye);
        cv.ellipse(cy - ry * 0.3, cx - rx * 0.35, 0.6, 0.6, [0.0; 3]);
        cv.ellipse(cy - ry * 0.3, cx + rx * 0.35, 0.6, 0.6, [0.0; 3]);
    }
    cv
}

fn grid_skyline(rng: &mut ChaCha8Rng) -> Canvas {
    let top = color(rng, 0.3, 0.7);
    let mut cv = Canvas::new(top);
    let bottom = color(rng, 0.6, 1.0);
    for y in 0..SIZE {
        let c = lerp(top, bottom, y as f64 / S);
        for x in 0..SIZE {
            cv.blend(y, x, c, 1.0);
        }
    }
    let mut x = rng.gen_range(-2.0..1.0);
    while x < S {
        let w = rng.gen_range(4.0..9.0);
        let h = rng.gen_range(8.0..28.0);
        let wall = color(rng, 0.05, 0.4);
        cv.rect(S - h, x, S + 1.0, x + w - 0.5, wall);
        let lit = [0.95, 0.9, rng.gen_range(0.3..0.7)];
        let mut wy = S - h + 2.0;
        while wy < S - 2.0 {
            let mut wx = x + 1.5;
            while wx < x + w - 1.5 {
                if rng.gen_bool(0.6) {
                    cv.rect(wy, wx, wy + 1.2, wx + 1.2, lit);
                }
                wx += 2.5;
            }
            wy += 3.0;
        }
        x += w;
    }
    cv
}

fn stick_figures(rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new(color(rng, 0.6, 1.0));
    let n = rng.gen_range(1..=3);
    for i in 0..n {
        let cx = (i as f64 + 0.5) * S / n as f64 + rng.gen_range(-2.0..2.0);
        let ink = color(rng, 0.0, 0.35);
        let head = rng.gen_range(6.0..10.0);
        cv.ellipse(head, cx, 2.5, 2.5, ink);
        let hip = head + rng.gen_range(9.0..12.0);
        cv.line((head + 2.5, cx), (hip, cx), 1.3, ink);
        let arm = head + 5.0;
        let span = rng.gen_range(3.0..6.0);
        cv.line((arm, cx), (arm + rng.gen_range(-3.0..3.0), cx - span), 1.2, ink);
        cv.line((arm, cx), (arm + rng.gen_range(-3.0..3.0), cx + span), 1.2, ink);
        cv.line((hip, cx), (S - 3.0, cx - rng.gen_range(2.0..5.0)), 1.2, ink);
        cv.line((hip, cx), (S - 3.0, cx + rng.gen_range(2.0..5.0)), 1.2, ink);
    }
    cv
}

fn boxes(rng: &mut ChaCha8Rng) -> Canvas {
    let wall = color(rng, 0.5, 0.85);
    let mut cv = Canvas::new(wall);
    let floor_y = rng.gen_range(18.0..24.0);
    cv.rect(floor_y, -1.0, S + 1.0, S + 1.0, color(rng, 0.2, 0.5));
    for _ in 0..rng.gen_range(2..=4) {
        let w = rng.gen_range(5.0..12.0);
        let h = rng.gen_range(5.0..14.0);
        let x0 = rng.gen_range(0.0..S - w);
        let base = floor_y + rng.gen_range(0.0..6.0);
        let face = color(rng, 0.1, 0.9);
        cv.rect(base - h, x0, base, x0 + w, face);
        let side = [face[0] * 0.6, face[1] * 0.6, face[2] * 0.6];
        cv.rect(base - h, x0 + w, base, x0 + w + 2.0, side);
    }
    cv
}

fn gradient_horizon(rng: &mut ChaCha8Rng) -> Canvas {
    let sky_top = color(rng, 0.2, 0.6);
    let sky_low = color(rng, 0.6, 1.0);
    let ground = color(rng, 0.1, 0.5);
    let mut cv = Canvas::new(sky_top);
    let base = rng.gen_range(14.0..22.0);
    let amp = rng.gen_range(1.0..5.0);
    let freq = rng.gen_range(0.1..0.4);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let h = base + amp * (freq * x as f64 + phase).sin();
            let yf = y as f64 + 0.5;
            let c = if yf < h {
                lerp(sky_top, sky_low, yf / h)
            } else {
                lerp(ground, [0.0; 3], ((yf - h) / (S - h)) * 0.5)
            };
            cv.blend(y, x, c, 1.0);
        }
    }
    cv
}

fn dark_field_stars(rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new(color(rng, 0.0, 0.08));
    for _ in 0..rng.gen_range(10..30) {
        let (y, x) = (rng.gen_range(0..SIZE), rng.gen_range(0..SIZE));
        let b = rng.gen_range(0.6..1.0);
        cv.blend(y, x, [b, b, rng.gen_range(0.7..1.0)], 1.0);
    }
    if rng.gen_bool(0.5) {
        let (cy, cx) = (rng.gen_range(5.0..14.0), rng.gen_range(5.0..27.0));
        cv.ellipse(cy, cx, 3.5, 3.5, [0.95, 0.95, 0.8]);
    }
    cv
}

fn branch(cv: &mut Canvas, rng: &mut ChaCha8Rng, from: (f64, f64), angle: f64, len: f64, depth: u32) {
    if depth == 0 || len < 1.5 {
        return;
    }
    let to = (from.0 - len * angle.cos(), from.1 + len * angle.sin());
    let ink = if depth > 2 {
        [0.35, 0.22, 0.1]
    } else {
        [0.1, rng.gen_range(0.4..0.8), 0.15]
    };
    cv.line(from, to, 0.4 + 0.35 * depth as f64, ink);
    let spread = rng.gen_range(0.3..0.7);
    let shrink = rng.gen_range(0.6..0.8);
    branch(cv, rng, to, angle - spread, len * shrink, depth - 1);
    branch(cv, rng, to, angle + spread, len * shrink, depth - 1);
}

fn branch_fractals(rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new(color(rng, 0.7, 1.0));
    let root = (S - 1.0, rng.gen_range(10.0..22.0));
    let len = rng.gen_range(7.0..10.0);
    let lean = rng.gen_range(-0.2..0.2);
    branch(&mut cv, rng, root, lean, len, 5);
    cv
}

fn circles_table(rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new(color(rng, 0.4, 0.8));
    let top = rng.gen_range(18.0..23.0);
    let wood = [
        rng.gen_range(0.4..0.6),
        rng.gen_range(0.25..0.4),
        rng.gen_range(0.1..0.2),
    ];
    cv.rect(top, -1.0, top + 3.0, S + 1.0, wood);
    cv.rect(top + 3.0, 3.0, S + 1.0, 5.0, wood);
    cv.rect(top + 3.0, S - 5.0, S + 1.0, S - 3.0, wood);
    for _ in 0..rng.gen_range(2..=5) {
        let r = rng.gen_range(2.0..4.5);
        let cx = rng.gen_range(r..S - r);
        cv.ellipse(top - r + 0.3, cx, r, r, color(rng, 0.1, 1.0));
    }
    cv
}

fn uniform_noise_texture(rng: &mut ChaCha8Rng) -> Canvas {
    let mut cv = Canvas::new([0.0; 3]);
    let lo = rng.gen_range(0.0..0.4);
    let hi = rng.gen_range(0.6..1.0);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let c = color(rng, lo, hi);
            cv.blend(y, x, c, 1.0);
        }
    }
    cv
}

/// Pristine 32x32x3 image, a pure function of `(class, seed)`.
pub fn gen_content(class: ContentClass, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0xc0, class.id() as u64]));
    let cv = match class {
        ContentClass::BlobCreatures => blob_creatures(&mut rng),
        ContentClass::GridSkyline => grid_skyline(&mut rng),
        ContentClass::StickFigures => stick_figures(&mut rng),
        ContentClass::Boxes => boxes(&mut rng),
        ContentClass::GradientHorizon => gradient_horizon(&mut rng),
        ContentClass::DarkFieldStars => dark_field_stars(&mut rng),
        ContentClass::BranchFractals => branch_fractals(&mut rng),
        ContentClass::CirclesTable => circles_table(&mut rng),
        ContentClass::UniformNoiseTexture => uniform_noise_texture(&mut rng),
    };
    cv.img.finalize()
}
