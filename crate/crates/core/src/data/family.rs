use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Split};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::seed::{mix, stream};

const LAYOUT_STREAM: u64 = 0x1a70;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// Class `k` is a bar grating at angle `k·180°/C`.
    OrientedBars,
    /// Class `k` is a fixed set of textured cells on a 4×4 grid.
    TexturedPatches,
    /// Class `k` is a fixed colour code on a 2×2 grid.
    ColorGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Palette {
    Neutral,
    Warm,
    Cool,
}

impl Palette {
    /// Background, foreground and two accent colours.
    pub fn colors(self) -> [[f64; 3]; 4] {
        match self {
            Palette::Neutral => [[0.40, 0.40, 0.40], [0.85, 0.85, 0.85], [0.15, 0.15, 0.15], [0.65, 0.65, 0.65]],
            Palette::Warm => [[0.50, 0.20, 0.10], [0.95, 0.75, 0.35], [0.75, 0.30, 0.20], [0.90, 0.50, 0.10]],
            Palette::Cool => [[0.10, 0.20, 0.45], [0.40, 0.85, 0.90], [0.15, 0.45, 0.60], [0.30, 0.60, 0.95]],
        }
    }
}

/// Domain-shift knobs shared by every family kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    pub palette: Palette,
    /// Rotation of the whole pattern, degrees.
    pub rotation: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            palette: Palette::Neutral,
            rotation: 0.0,
            noise: 0.05,
        }
    }
}

/// A seeded generator of class-balanced labelled images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default)]
    pub shift: ShiftParams,
    pub seed: u64,
}

fn three() -> usize {
    3
}

impl TaskFamily {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("a task needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.kind == FamilyKind::ColorGrid && self.num_classes > 256 {
            return Err(Error::Config("color-grid supports at most 256 classes".into()));
        }
        if self.kind == FamilyKind::TexturedPatches && self.num_classes > 1000 {
            return Err(Error::Config("textured-patches supports at most 1000 classes".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image_size must be at least 4, got {}", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let s = &self.shift;
        if !(s.noise >= 0.0 && s.noise.is_finite()) || !s.rotation.is_finite() {
            return Err(Error::Config("shift.noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-class pattern parameters, fixed by the family seed.
enum Layout {
    Angles(Vec<f64>),
    Cells(Vec<u16>),
    Codes(Vec<[usize; 4]>),
}

fn layout(family: &TaskFamily) -> Layout {
    let c = family.num_classes;
    let mut rng = stream(mix(family.seed, LAYOUT_STREAM));
    match family.kind {
        FamilyKind::OrientedBars => Layout::Angles((0..c).map(|k| PI * k as f64 / c as f64).collect()),
        FamilyKind::TexturedPatches => {
            let mut cells: Vec<u16> = Vec::with_capacity(c);
            while cells.len() < c {
                let m: u16 = rng.random();
                if (4..=8).contains(&m.count_ones()) && !cells.contains(&m) {
                    cells.push(m);
                }
            }
            Layout::Cells(cells)
        }
        FamilyKind::ColorGrid => {
            let mut codes: Vec<[usize; 4]> = Vec::with_capacity(c);
            while codes.len() < c {
                let code = [0; 4].map(|_| rng.random_range(0..4));
                if !codes.contains(&code) {
                    codes.push(code);
                }
            }
            Layout::Codes(codes)
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, color: [f64; 3], amount: f64) -> [f64; 3] {
    color.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

fn blend(bg: [f64; 3], fg: [f64; 3], a: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| bg[i] * (1.0 - a) + fg[i] * a)
}

fn render(family: &TaskFamily, layout: &Layout, class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    let s = family.image_size;
    let sf = s as f64;
    let colors = family.shift.palette.colors();
    let bg = jitter(rng, colors[0], 0.06);
    let fg = jitter(rng, colors[1], 0.06);
    let rot = family.shift.rotation.to_radians();
    let (sin_r, cos_r) = rot.sin_cos();
    let shift = (rng.random_range(-0.08..0.08) * sf, rng.random_range(-0.08..0.08) * sf);

    let pattern: Box<dyn Fn(f64, f64) -> [f64; 3]> = match layout {
        Layout::Angles(angles) => {
            let theta = angles[class] + rng.random_range(-0.25..0.25) * PI / angles.len() as f64;
            let (st, ct) = theta.sin_cos();
            let period = rng.random_range(4.0..7.0) * sf / 32.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            Box::new(move |u, v| {
                let on = (2.0 * PI * (u * ct + v * st) / period + phase).sin() > 0.0;
                if on { fg } else { bg }
            })
        }
        Layout::Cells(cells) => {
            let m = cells[class];
            let cell = sf / 4.0;
            let (ox, oy) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
            Box::new(move |u, v| {
                let (x, y) = (u + sf / 2.0 - shift.0, v + sf / 2.0 - shift.1);
                let (cx, cy) = ((x / cell).floor(), (y / cell).floor());
                if !(0.0..4.0).contains(&cx) || !(0.0..4.0).contains(&cy) {
                    return bg;
                }
                if m >> (cy as u32 * 4 + cx as u32) & 1 == 0 {
                    return bg;
                }
                let checker = ((x + ox).floor() + (y + oy).floor()).rem_euclid(2.0);
                blend(bg, fg, 0.2 + 0.8 * checker)
            })
        }
        Layout::Codes(codes) => {
            let code = codes[class];
            let cell_colors = code.map(|i| jitter(rng, colors[i], 0.05));
            Box::new(move |u, v| {
                let col = usize::from(u - shift.0 >= 0.0);
                let row = usize::from(v - shift.1 >= 0.0);
                cell_colors[row * 2 + col]
            })
        }
    };

    let c = family.channels;
    let mut out = vec![0.0; c * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5 - sf / 2.0, y as f64 + 0.5 - sf / 2.0);
            let (u, v) = (cos_r * px + sin_r * py, -sin_r * px + cos_r * py);
            let rgb = pattern(u, v);
            let values: Vec<f64> = if c == 3 { rgb.to_vec() } else { vec![(rgb[0] + rgb[1] + rgb[2]) / 3.0] };
            for (ch, value) in values.into_iter().enumerate() {
                let noisy = value + noise.sample(rng);
                // pixels are stored on the 8-bit grid so containers round-trip exactly
                out[ch * s * s + y * s + x] = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    out
}

fn generate_split(family: &TaskFamily, layout: &Layout, n: usize, split: Split) -> Result<Dataset> {
    let label = if split == Split::Train { TRAIN_STREAM } else { TEST_STREAM };
    let mut rng = stream(mix(family.seed, label));
    let noise = Normal::new(0.0, family.shift.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (c, s) = (family.channels, family.image_size);
    let mut pixels = Vec::with_capacity(n * c * s * s);
    let labels: Vec<usize> = (0..n).map(|i| i % family.num_classes).collect();
    for &class in &labels {
        pixels.extend(render(family, layout, class, &mut rng, &noise));
    }
    let images = Tensor::new(&[n, c, s, s], pixels)?;
    Dataset::new(images, labels, family.num_classes, split, Provenance::Generated(*family))
}

/// Class-balanced train and test sets drawn from independent streams.
pub fn generate_task(family: &TaskFamily, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    family.validate()?;
    let c = family.num_classes;
    for (name, n) in [("n_train", n_train), ("n_test", n_test)] {
        if n == 0 || n % c != 0 {
            return Err(Error::Config(format!(
                "{name} = {n} cannot be split evenly over {c} classes"
            )));
        }
    }
    let layout = layout(family);
    Ok((
        generate_split(family, &layout, n_train, Split::Train)?,
        generate_split(family, &layout, n_test, Split::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family(kind: FamilyKind, palette: Palette) -> TaskFamily {
        TaskFamily {
            kind,
            num_classes: 4,
            image_size: 16,
            channels: 3,
            shift: ShiftParams {
                palette,
                ..ShiftParams::default()
            },
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [FamilyKind::OrientedBars, FamilyKind::TexturedPatches, FamilyKind::ColorGrid] {
            let f = family(kind, Palette::Neutral);
            let a = generate_task(&f, 8, 4).unwrap();
            let b = generate_task(&f, 8, 4).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.0.pixels()[..48], a.1.pixels()[..48]);
        }
    }

    #[test]
    fn balance_contract() {
        let mut f = family(FamilyKind::OrientedBars, Palette::Neutral);
        f.num_classes = 10;
        let (train, test) = generate_task(&f, 1000, 20).unwrap();
        assert_eq!(train.class_counts(), vec![100; 10]);
        assert_eq!(test.class_counts(), vec![2; 10]);
        assert!(matches!(generate_task(&f, 1001, 20), Err(Error::Config(_))));
        assert!(matches!(generate_task(&f, 0, 20), Err(Error::Config(_))));
    }

    #[test]
    fn pixels_on_the_byte_grid() {
        let (train, _) = generate_task(&family(FamilyKind::ColorGrid, Palette::Warm), 4, 4).unwrap();
        for &p in train.pixels() {
            assert!((0.0..=1.0).contains(&p));
            assert_eq!((p * 255.0).round() / 255.0, p);
        }
    }

    #[test]
    fn disjoint_palettes_shift_channel_means() {
        for kind in [FamilyKind::OrientedBars, FamilyKind::TexturedPatches, FamilyKind::ColorGrid] {
            let (warm, _) = generate_task(&family(kind, Palette::Warm), 40, 4).unwrap();
            let (cool, _) = generate_task(&family(kind, Palette::Cool), 40, 4).unwrap();
            let (a, b) = (warm.channel_means(), cool.channel_means());
            for ch in [0, 2] {
                assert!((a[ch] - b[ch]).abs() > 0.1, "{kind:?} channel {ch}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn grayscale_and_validation() {
        let mut f = family(FamilyKind::TexturedPatches, Palette::Cool);
        f.channels = 1;
        let (train, _) = generate_task(&f, 4, 4).unwrap();
        assert_eq!(train.image_shape(), [1, 16, 16]);
        f.channels = 2;
        assert!(generate_task(&f, 4, 4).is_err());
        f.channels = 3;
        f.num_classes = 1;
        assert!(generate_task(&f, 4, 4).is_err());
    }

    #[test]
    fn family_parses_from_toml() {
        let f: TaskFamily = toml::from_str(
            "kind = \"color-grid\"\nnum_classes = 4\nimage_size = 32\nseed = 3\n[shift]\npalette = \"cool\"\nrotation = 15.0\n",
        )
        .unwrap();
        assert_eq!(f.kind, FamilyKind::ColorGrid);
        assert_eq!(f.channels, 3);
        assert_eq!(f.shift.palette, Palette::Cool);
        assert_eq!(f.shift.noise, 0.05);
    }
}
