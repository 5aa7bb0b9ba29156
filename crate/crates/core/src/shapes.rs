//! Procedural scenes: one colored shape on a colored background, with
//! templated captions and the exact shape mask.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Resolution the geometry below is defined at.
pub const CANVAS: usize = 64;
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [16, 32, 64];
/// Radius of a large circle on the canvas.
pub const LARGE_RADIUS: f64 = 24.0;
pub const SMALL_RADIUS: f64 = 12.0;
/// Distance of off-center positions from the canvas center.
pub const POSITION_OFFSET: f64 = 16.0;

macro_rules! closed_vocab {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::Decode(format!("unknown {} {:?}", stringify!($name).to_lowercase(), other))),
                }
            }
        }
    };
}

closed_vocab!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
closed_vocab!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    White => "white",
    Black => "black",
});
closed_vocab!(Size { Small => "small", Large => "large" });
closed_vocab!(Position { Center => "center", Left => "left", Right => "right", Top => "top", Bottom => "bottom" });

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [240, 220, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [245, 140, 30],
            Color::White => [245, 245, 245],
            Color::Black => [20, 20, 20],
        }
    }
}

impl Size {
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => SMALL_RADIUS,
            Size::Large => LARGE_RADIUS,
        }
    }
}

impl Position {
    /// Shape center on the canvas, `(x, y)` with `y` pointing down.
    pub fn center(self) -> (f64, f64) {
        let c = CANVAS as f64 / 2.0;
        let o = POSITION_OFFSET;
        match self {
            Position::Center => (c, c),
            Position::Left => (c - o, c),
            Position::Right => (c + o, c),
            Position::Top => (c, c - o),
            Position::Bottom => (c, c + o),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    shape: Shape,
    color: Color,
    background: Color,
    size: Size,
    position: Position,
}

impl SceneSpec {
    pub fn new(shape: Shape, color: Color, background: Color, size: Size, position: Position) -> Result<Self> {
        if color == background {
            return Err(config_err!("shape and background are both {color}"));
        }
        Ok(Self { shape, color, background, size, position })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn color(&self) -> Color {
        self.color
    }

    pub fn background(&self) -> Color {
        self.background
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn position(&self) -> Position {
        self.position
    }

    /// Every valid spec in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::new();
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &background in Color::ALL {
                    for &size in Size::ALL {
                        for &position in Position::ALL {
                            if let Ok(s) = SceneSpec::new(shape, color, background, size, position) {
                                out.push(s);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Whether pixel center `(x, y)`, in canvas units, lies inside the shape.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.position.center();
        let r = self.size.radius();
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let half = 0.85 * r;
                dx.abs() <= half && dy.abs() <= half
            }
            Shape::Triangle => {
                // upward equilateral triangle with circumradius 1.2 r
                let rt = 1.2 * r;
                let apex = (0.0, -rt);
                let left = (-rt * 0.8660254037844386, rt * 0.5);
                let right = (rt * 0.8660254037844386, rt * 0.5);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let e1 = edge(apex, right);
                let e2 = edge(right, left);
                let e3 = edge(left, apex);
                (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
            }
        }
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}:{}", self.shape, self.color, self.background, self.size, self.position)
    }
}

impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 5 {
            return Err(Error::Decode(format!("scene spec {s:?} must have 5 fields")));
        }
        SceneSpec::new(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?, parts[3].parse()?, parts[4].parse()?)
            .map_err(|e| Error::Decode(e.to_string()))
    }
}

/// Row-major RGB raster and its shape mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(config_err!("unsupported resolution {resolution}, expected one of {SUPPORTED_RESOLUTIONS:?}"))
    }
}

/// Hard-edged rasterization sampled at pixel centers.
pub fn render_rgb(spec: &SceneSpec, resolution: usize) -> Result<(RgbImage, Vec<bool>)> {
    check_resolution(resolution)?;
    let scale = CANVAS as f64 / resolution as f64;
    let (fg, bg) = (spec.color.rgb(), spec.background.rgb());
    let mut pixels = Vec::with_capacity(resolution * resolution * 3);
    let mut mask = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let inside = spec.contains((x as f64 + 0.5) * scale, (y as f64 + 0.5) * scale);
            pixels.extend_from_slice(if inside { &fg } else { &bg });
            mask.push(inside);
        }
    }
    Ok((RgbImage { size: resolution, pixels }, mask))
}

/// `[3, R, R]` tensor with values mapped from `0..=255` to `[-1, 1]`.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let n = img.size * img.size;
    let mut data = alloc::vec![T::zero(); 3 * n];
    for (p, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + p] = T::of(px[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(&[3, img.size, img.size], data).expect("shape")
}

/// Inverse of [`rgb_to_tensor`], clamping to `[-1, 1]`.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let size = t.dim(1);
    let n = size * size;
    let mut pixels = alloc::vec![0u8; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let v = t.data()[c * n + p].as_f64().clamp(-1.0, 1.0);
            pixels[p * 3 + c] = num_traits::Float::round((v + 1.0) * 127.5) as u8;
        }
    }
    RgbImage { size, pixels }
}

/// Image tensor in `[-1, 1]` and the shape mask at `resolution`.
pub fn render_sample<T: Scalar>(spec: &SceneSpec, resolution: usize) -> Result<(Tensor<T>, Vec<bool>)> {
    let (img, mask) = render_rgb(spec, resolution)?;
    Ok((rgb_to_tensor(&img), mask))
}

/// Averages `factor x factor` blocks of a `[C, R, R]` tensor.
pub fn box_downsample<T: Scalar>(image: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, r) = (image.dim(0), image.dim(1));
    if factor == 0 || r % factor != 0 || image.dim(2) != r {
        return Err(config_err!("cannot box-filter {r}x{} by {factor}", image.dim(2)));
    }
    let o = r / factor;
    let inv = T::one() / T::of((factor * factor) as f64);
    let mut data = alloc::vec![T::zero(); c * o * o];
    let src = image.data();
    for ch in 0..c {
        for y in 0..r {
            for x in 0..r {
                data[(ch * o + y / factor) * o + x / factor] += src[(ch * r + y) * r + x];
            }
        }
    }
    data.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_vec(&[c, o, o], data)
}

/// Majority vote over blocks of a square mask.
pub fn downsample_mask(mask: &[bool], size: usize, factor: usize) -> Vec<bool> {
    let o = size / factor;
    let mut counts = alloc::vec![0usize; o * o];
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                counts[(y / factor) * o + x / factor] += 1;
            }
        }
    }
    counts.into_iter().map(|n| 2 * n >= factor * factor).collect()
}

pub const TEMPLATES: [&str; 4] = [
    "a {size} {color} {shape} at the {position} on a {background} background",
    "the {color} {shape} is {size} and sits at the {position} on {background}",
    "{background} background with a {size} {color} {shape} at the {position}",
    "a {shape} colored {color} of {size} size near the {position} over {background}",
];

pub fn fill_template(template: &str, spec: &SceneSpec) -> Vec<String> {
    template
        .split(' ')
        .map(|w| match w {
            "{size}" => spec.size.word(),
            "{color}" => spec.color.word(),
            "{shape}" => spec.shape.word(),
            "{position}" => spec.position.word(),
            "{background}" => spec.background.word(),
            other => other,
        })
        .map(str::to_string)
        .collect()
}

/// One caption for `spec`, template chosen by `seed`.
pub fn caption_for(spec: &SceneSpec, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_template(TEMPLATES[rng.random_range(0..TEMPLATES.len())], spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Decode(format!("unknown split {other:?}"))),
        }
    }
}

/// One dataset entry: identity, scene and its two captions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedRecord {
    pub id: usize,
    pub split: Split,
    pub spec: SceneSpec,
    pub captions: [Vec<String>; 2],
}

impl PlannedRecord {
    /// `<id>\t<split>\t<spec>\t<caption 1>\t<caption 2>`
    pub fn manifest_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            record_name(self.id),
            self.split,
            self.spec,
            self.captions[0].join(" "),
            self.captions[1].join(" ")
        )
    }

    pub fn parse_manifest_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Decode(format!("manifest line has {} fields, expected 5", f.len())));
        }
        let id = f[0].parse().map_err(|_| Error::Decode(format!("bad record id {:?}", f[0])))?;
        let caption = |s: &str| -> Result<Vec<String>> {
            let toks: Vec<String> = s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
            if toks.is_empty() {
                return Err(Error::Decode("empty caption".into()));
            }
            Ok(toks)
        };
        Ok(Self { id, split: f[1].parse()?, spec: f[2].parse()?, captions: [caption(f[3])?, caption(f[4])?] })
    }
}

/// Zero-padded record identifier used for file names.
pub fn record_name(id: usize) -> String {
    format!("{id:05}")
}

/// 64-bit FNV-1a.
pub fn spec_hash(spec: &SceneSpec) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in spec.to_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws `n` scenes by walking a seeded shuffle of all specs (cycling once
/// exhausted), assigns whole specs to the test split in hash order until it
/// holds `n / 6` records, and picks two distinct caption templates per record.
pub fn plan_dataset(n: usize, seed: u64) -> Result<Vec<PlannedRecord>> {
    if n == 0 {
        return Err(config_err!("dataset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = SceneSpec::all();
    specs.shuffle(&mut rng);
    let chosen: Vec<SceneSpec> = (0..n).map(|i| specs[i % specs.len()]).collect();

    let mut distinct: Vec<SceneSpec> = chosen.clone();
    distinct.sort();
    distinct.dedup();
    distinct.sort_by_key(|s| (spec_hash(s), *s));
    let target = n / 6;
    let mut test = alloc::collections::BTreeSet::new();
    let mut in_test = 0;
    for s in distinct {
        if in_test >= target {
            break;
        }
        in_test += chosen.iter().filter(|&&c| c == s).count();
        test.insert(s);
    }

    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(id, spec)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id as u64 + 1);
            let first = r.random_range(0..TEMPLATES.len());
            let second = (first + 1 + r.random_range(0..TEMPLATES.len() - 1)) % TEMPLATES.len();
            PlannedRecord {
                id,
                split: if test.contains(&spec) { Split::Test } else { Split::Train },
                spec,
                captions: [fill_template(TEMPLATES[first], &spec), fill_template(TEMPLATES[second], &spec)],
            }
        })
        .collect())
}
