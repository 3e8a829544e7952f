//! Procedural street-like scenes with exact per-pixel labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["sky", "building", "road", "vegetation", "car"];
pub const SKY: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const CAR: u8 = 4;

/// Smallest allowed scene side.
pub const MIN_SIDE: usize = 16;
const MAX_PAINT_ATTEMPTS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Class statistics, colours and layout rules of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Target pixel share per class, in class order; sums to 1.
    pub frequencies: [f64; N_CLASSES],
    /// Prototype RGB per class in `[-1, 1]`.
    pub palette: [[f64; 3]; N_CLASSES],
    /// Standard deviation of the per-pixel Gaussian texture noise.
    pub noise: f64,
    /// Minimum Euclidean distance between any two prototypes.
    #[serde(default = "default_min_distance")]
    pub min_palette_distance: f64,
    /// Inclusive range of building widths in pixels.
    #[serde(default = "default_building_width")]
    pub building_width: [usize; 2],
    /// Inclusive range of vegetation blob radii.
    #[serde(default = "default_blob_radius")]
    pub blob_radius: [usize; 2],
    /// Inclusive ranges of car box width and height.
    #[serde(default = "default_car_size")]
    pub car_size: [[usize; 2]; 2],
}

fn default_min_distance() -> f64 {
    0.5
}
fn default_building_width() -> [usize; 2] {
    [6, 16]
}
fn default_blob_radius() -> [usize; 2] {
    [2, 5]
}
fn default_car_size() -> [[usize; 2]; 2] {
    [[6, 12], [3, 6]]
}

impl DomainSpec {
    /// Synthetic-looking domain: fewer trees and cars.
    pub fn toy_source() -> Self {
        Self {
            domain: Domain::Source,
            frequencies: [0.30, 0.30, 0.28, 0.07, 0.05],
            palette: [
                [0.30, 0.60, 0.90],
                [-0.10, -0.20, -0.30],
                [-0.60, -0.60, -0.60],
                [-0.40, 0.50, -0.40],
                [0.90, -0.40, -0.40],
            ],
            noise: 0.08,
            min_palette_distance: default_min_distance(),
            building_width: default_building_width(),
            blob_radius: default_blob_radius(),
            car_size: default_car_size(),
        }
    }

    /// Real-looking domain: more vegetation and cars, shifted colours.
    pub fn toy_target() -> Self {
        Self {
            domain: Domain::Target,
            frequencies: [0.18, 0.27, 0.30, 0.17, 0.08],
            palette: [
                [0.70, 0.75, 0.80],
                [0.35, -0.15, -0.45],
                [-0.30, -0.35, -0.05],
                [0.05, 0.20, -0.80],
                [0.10, -0.80, 0.50],
            ],
            noise: 0.08,
            min_palette_distance: default_min_distance(),
            building_width: default_building_width(),
            blob_radius: default_blob_radius(),
            car_size: default_car_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::Validation { field: field.into(), detail });
        if let Some(f) = self.frequencies.iter().find(|f| !(**f >= 0.0 && f.is_finite())) {
            return bad("frequencies", format!("entries must be finite and >= 0, got {f}"));
        }
        let sum: f64 = self.frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad("frequencies", format!("must sum to 1, got {sum}"));
        }
        if self.frequencies[VEGETATION as usize] > 0.0 && self.frequencies[BUILDING as usize] == 0.0 {
            return bad("frequencies", "vegetation grows on buildings, so building share must be positive".into());
        }
        if self.frequencies[CAR as usize] > 0.0 && self.frequencies[ROAD as usize] == 0.0 {
            return bad("frequencies", "cars sit on the road, so road share must be positive".into());
        }
        if let Some(c) = self.palette.iter().flatten().find(|c| !(-1.0..=1.0).contains(*c)) {
            return bad("palette", format!("components must lie in [-1, 1], got {c}"));
        }
        for i in 0..N_CLASSES {
            for j in i + 1..N_CLASSES {
                let d = color_distance(&self.palette[i], &self.palette[j]);
                if d < self.min_palette_distance {
                    return bad(
                        "palette",
                        format!(
                            "{} and {} are {d:.3} apart, below the minimum {}",
                            CLASS_NAMES[i], CLASS_NAMES[j], self.min_palette_distance
                        ),
                    );
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("must be finite and >= 0, got {}", self.noise));
        }
        for (field, [lo, hi]) in [
            ("building_width", self.building_width),
            ("blob_radius", self.blob_radius),
            ("car_size", self.car_size[0]),
            ("car_size", self.car_size[1]),
        ] {
            if lo == 0 || lo > hi {
                return bad(field, format!("range [{lo}, {hi}] must be non-empty and positive"));
            }
        }
        Ok(())
    }

    /// Parse and validate; validation failures carry the line of the
    /// offending key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate().map_err(|e| match e {
            Error::Validation { field, detail } => {
                let needle = format!("\"{field}\"");
                match text.lines().position(|l| l.contains(&needle)) {
                    Some(line) => Error::Validation {
                        field,
                        detail: format!("{detail} (line {})", line + 1),
                    },
                    None => Error::Validation { field, detail },
                }
            }
            other => other,
        })?;
        Ok(spec)
    }
}

pub fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    /// `3×H×W` in `(-1, 1)`.
    pub image: Tensor,
    /// Row-major `H×W` class indices.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
}

impl ToyScene {
    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Exact pixel budget per class for an `h×w` scene.
pub fn class_budget(freq: &[f64; N_CLASSES], pixels: usize) -> [usize; N_CLASSES] {
    let mut out = [0usize; N_CLASSES];
    let mut assigned = 0;
    for k in 1..N_CLASSES {
        out[k] = (freq[k] * pixels as f64).round() as usize;
        assigned += out[k];
    }
    out[0] = pixels.saturating_sub(assigned);
    out
}

/// Paint a scene: sky above, a building skyline, a road band at the bottom,
/// vegetation blobs over buildings and car boxes over road. Every class
/// receives its exact pixel budget.
pub fn generate_scene(spec: &DomainSpec, seed: u64, height: usize, width: usize) -> Result<ToyScene> {
    spec.validate()?;
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Generation(format!(
            "scenes need both sides >= {MIN_SIDE}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = height * width;
    let budget = class_budget(&spec.frequencies, pixels);
    let ground = budget[ROAD as usize] + budget[CAR as usize];
    let built = budget[BUILDING as usize] + budget[VEGETATION as usize];
    if budget[SKY as usize] + built + ground != pixels || ground + built > pixels {
        return Err(Error::Generation("class budgets exceed the canvas".into()));
    }
    let mut labels = vec![SKY; pixels];

    // road band, filled bottom-up; the top partial row is right-aligned
    let mut left = ground;
    'band: for r in (0..height).rev() {
        for c in (0..width).rev() {
            if left == 0 {
                break 'band;
            }
            labels[r * width + c] = ROAD;
            left -= 1;
        }
    }
    // free rows above the road in each column
    let headroom: Vec<usize> = (0..width)
        .map(|c| (0..height).take_while(|r| labels[r * width + c] == SKY).count())
        .collect();
    let room: usize = headroom.iter().sum();
    if built > room {
        return Err(Error::Generation(format!(
            "building and vegetation need {built} pixels, only {room} above the road"
        )));
    }

    // skyline: random-width blocks, random heights around the mean, then
    // nudged one pixel at a time to the exact budget
    let mean_h = built as f64 / width as f64;
    let mut tops = vec![0usize; width];
    let mut c = 0;
    while c < width {
        let bw = rng.gen_range(spec.building_width[0]..=spec.building_width[1]).min(width - c);
        let h = (mean_h * rng.gen_range(0.6..1.4)).round() as usize;
        for t in tops.iter_mut().skip(c).take(bw) {
            *t = h;
        }
        c += bw;
    }
    for (t, &room) in tops.iter_mut().zip(&headroom) {
        *t = (*t).min(room);
    }
    let mut total: usize = tops.iter().sum();
    let mut guard = 0;
    while total != built {
        guard += 1;
        if guard > MAX_PAINT_ATTEMPTS * 10 {
            return Err(Error::Generation("skyline did not converge to its budget".into()));
        }
        let c = rng.gen_range(0..width);
        if total < built && tops[c] < headroom[c] {
            tops[c] += 1;
            total += 1;
        } else if total > built && tops[c] > 0 {
            tops[c] -= 1;
            total -= 1;
        }
    }
    for (c, (&t, &room)) in tops.iter().zip(&headroom).enumerate() {
        for r in room - t..room {
            labels[r * width + c] = BUILDING;
        }
    }

    paint_blobs(&mut labels, height, width, budget[VEGETATION as usize], spec, &mut rng)?;
    paint_cars(&mut labels, height, width, budget[CAR as usize], spec, &mut rng)?;

    let mut data = vec![0.0; 3 * pixels];
    for (i, &l) in labels.iter().enumerate() {
        for ch in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            data[ch * pixels + i] = (spec.palette[l as usize][ch] + spec.noise * n).clamp(-0.999, 0.999);
        }
    }
    Ok(ToyScene {
        image: Tensor::new(vec![3, height, width], data)?,
        labels,
        height,
        width,
        domain: spec.domain,
    })
}

fn paint_blobs(
    labels: &mut [u8],
    height: usize,
    width: usize,
    mut need: usize,
    spec: &DomainSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut attempts = 0;
    while need > 0 {
        attempts += 1;
        if attempts > MAX_PAINT_ATTEMPTS {
            return Err(Error::Generation(format!("{need} vegetation pixels left unplaced")));
        }
        let (cy, cx) = (rng.gen_range(0..height) as i64, rng.gen_range(0..width) as i64);
        if labels[cy as usize * width + cx as usize] != BUILDING {
            continue;
        }
        let rad = rng.gen_range(spec.blob_radius[0]..=spec.blob_radius[1]) as i64;
        for y in (cy - rad).max(0)..=(cy + rad).min(height as i64 - 1) {
            for x in (cx - rad).max(0)..=(cx + rad).min(width as i64 - 1) {
                let i = y as usize * width + x as usize;
                if need > 0 && (y - cy).pow(2) + (x - cx).pow(2) <= rad * rad && labels[i] == BUILDING {
                    labels[i] = VEGETATION;
                    need -= 1;
                }
            }
        }
    }
    Ok(())
}

fn paint_cars(
    labels: &mut [u8],
    height: usize,
    width: usize,
    mut need: usize,
    spec: &DomainSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut attempts = 0;
    while need > 0 {
        attempts += 1;
        if attempts > MAX_PAINT_ATTEMPTS {
            return Err(Error::Generation(format!("{need} car pixels left unplaced")));
        }
        let (by, bx) = (rng.gen_range(0..height), rng.gen_range(0..width));
        if labels[by * width + bx] != ROAD {
            continue;
        }
        let cw = rng.gen_range(spec.car_size[0][0]..=spec.car_size[0][1]);
        let ch = rng.gen_range(spec.car_size[1][0]..=spec.car_size[1][1]);
        // (by, bx) is the bottom-left corner
        for y in by.saturating_sub(ch - 1)..=by {
            for x in bx..(bx + cw).min(width) {
                let i = y * width + x;
                if need > 0 && labels[i] == ROAD {
                    labels[i] = CAR;
                    need -= 1;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_specs_are_valid() {
        DomainSpec::toy_source().validate().unwrap();
        DomainSpec::toy_target().validate().unwrap();
    }

    #[test]
    fn budgets_are_exact() {
        let s = generate_scene(&DomainSpec::toy_target(), 3, 64, 64).unwrap();
        assert_eq!(s.class_counts(), class_budget(&DomainSpec::toy_target().frequencies, 4096));
    }

    #[test]
    fn small_canvas_rejected() {
        assert!(matches!(
            generate_scene(&DomainSpec::toy_source(), 0, 8, 64),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn frequency_sum_error_names_line() {
        let mut v = serde_json::to_value(DomainSpec::toy_source()).unwrap();
        v["frequencies"][0] = serde_json::json!(0.5);
        let text = serde_json::to_string_pretty(&v).unwrap();
        match DomainSpec::from_json_str(&text) {
            Err(Error::Validation { field, detail }) => {
                assert_eq!(field, "frequencies");
                assert!(detail.contains("line"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }
}
