//! Procedural phantoms: an elliptical organ on a dark background with faint,
//! soft-edged hypointense lesions inside it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean background intensity.
pub const BACKGROUND: f64 = 0.2;
/// Mean organ tissue intensity.
pub const TISSUE: f64 = 0.55;
/// Peak amplitude of the tissue texture.
pub const TEXTURE_AMPLITUDE: f64 = 0.03;
/// Width of the lesion edge taper in pixels, centred on the radius.
pub const LESION_EDGE: f64 = 1.0;
/// Width of the organ boundary ramp in pixels.
const ORGAN_EDGE: f64 = 1.5;
/// Clearance kept between a lesion rim and the organ boundary.
const LESION_MARGIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Image side length.
    pub size: usize,
    /// Organ centre offset from the image centre, as a fraction of `size`.
    pub organ_jitter: f64,
    /// Range of the organ semi-axes, as fractions of `size`.
    pub organ_axes: [f64; 2],
    /// Inclusive range of the number of lesions.
    pub lesion_count: [usize; 2],
    /// Range of lesion radii in pixels.
    pub lesion_radius: [f64; 2],
    /// Range of the lesion-to-tissue intensity drop.
    pub contrast: [f64; 2],
    pub noise_sigma: f64,
    /// Wavelength of the tissue texture in pixels.
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            organ_jitter: 0.05,
            organ_axes: [0.36, 0.44],
            lesion_count: [1, 3],
            lesion_radius: [5.0, 8.0],
            contrast: [0.03, 0.10],
            noise_sigma: 0.05,
            texture_scale: 12.0,
            seed: 0,
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        if self.size < 8 {
            return bad("size must be at least 8");
        }
        if !range_ok(self.organ_axes) || self.organ_axes[0] <= 0.0 {
            return bad("organ_axes must be an increasing positive range");
        }
        if !(0.0..0.5).contains(&self.organ_jitter) || self.organ_jitter + self.organ_axes[1] > 0.5
        {
            return bad("organ does not fit in the image");
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad("lesion_count range is reversed");
        }
        if !range_ok(self.lesion_radius) || self.lesion_radius[0] < 1.0 {
            return bad("lesion_radius must be an increasing range starting at 1 pixel or more");
        }
        if !range_ok(self.contrast) || self.contrast[0] < 0.0 {
            return bad("contrast must be an increasing non-negative range");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if self.contrast[1] > 2.0 * self.noise_sigma {
            return bad("contrast above 2·noise_sigma makes lesions visible per pixel");
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return bad("texture_scale must be positive");
        }
        let min_axis = self.organ_axes[0] * self.size as f64;
        if self.lesion_count[1] > 0
            && self.lesion_radius[1] + LESION_EDGE + LESION_MARGIN >= min_axis
        {
            return Err(Error::Config(format!(
                "phantom spec infeasible: lesion radius {} does not fit in an organ semi-axis of {min_axis:.1} pixels",
                self.lesion_radius[1]
            )));
        }
        Ok(())
    }
}

/// One image with its lesion mask. Both are `H×W`; the mask holds 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

/// Ground truth for one rendered lesion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub contrast: f64,
}

/// Lesion profile: 1 inside, 0 outside, cosine taper of width
/// [`LESION_EDGE`] centred on the radius, so it crosses 1/2 exactly there.
pub fn lesion_profile(dist: f64, radius: f64) -> f64 {
    let lo = radius - LESION_EDGE / 2.0;
    if dist <= lo {
        1.0
    } else if dist >= radius + LESION_EDGE / 2.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (dist - lo) / LESION_EDGE).cos())
    }
}

struct Organ {
    row: f64,
    col: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Organ {
    /// Normalized elliptical radius: below 1 inside.
    fn rho(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (r - self.row, c - self.col);
        let u = dc * self.cos + dr * self.sin;
        let v = -dc * self.sin + dr * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Whether the disc of `radius` around (`r`, `c`) lies inside the organ.
    fn contains_disc(&self, r: f64, c: f64, radius: f64) -> bool {
        (0..64).all(|i| {
            let t = 2.0 * PI * i as f64 / 64.0;
            self.rho(r + radius * t.sin(), c + radius * t.cos()) < 1.0
        })
    }
}

/// Renders sample `index`. The result depends only on `(spec.seed, index)`.
pub fn render(spec: &PhantomSpec, index: u64) -> Result<(Sample, Vec<Lesion>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.size as f64;
    let centre = (s - 1.0) / 2.0;
    let jitter = spec.organ_jitter * s;
    let organ = {
        let theta = rng.gen_range(0.0..PI);
        Organ {
            row: centre + rng.gen_range(-1.0..=1.0) * jitter,
            col: centre + rng.gen_range(-1.0..=1.0) * jitter,
            a: rng.gen_range(spec.organ_axes[0]..=spec.organ_axes[1]) * s,
            b: rng.gen_range(spec.organ_axes[0]..=spec.organ_axes[1]) * s,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    };
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let dir = rng.gen_range(0.0..PI);
            (dir.cos(), dir.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let k = 2.0 * PI / spec.texture_scale;

    let count = rng.gen_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.gen_range(spec.lesion_radius[0]..=spec.lesion_radius[1]);
        let contrast = rng.gen_range(spec.contrast[0]..=spec.contrast[1]);
        let reach = radius + LESION_EDGE + LESION_MARGIN;
        let mut at = (organ.row, organ.col);
        for _ in 0..256 {
            let r = organ.row + rng.gen_range(-1.0..=1.0) * organ.a.max(organ.b);
            let c = organ.col + rng.gen_range(-1.0..=1.0) * organ.a.max(organ.b);
            if organ.contains_disc(r, c, reach) {
                at = (r, c);
                break;
            }
        }
        lesions.push(Lesion {
            row: at.0,
            col: at.1,
            radius,
            contrast,
        });
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let n = spec.size;
    let mut image = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (r, c) = (i as f64, j as f64);
            let inside =
                ((1.0 - organ.rho(r, c)) * organ.a.min(organ.b) / ORGAN_EDGE + 0.5).clamp(0.0, 1.0);
            let texture: f64 = waves
                .iter()
                .map(|&(dc, ds, ph)| (k * (c * dc + r * ds) + ph).sin())
                .product();
            let mut drop = 0.0f64;
            let mut in_lesion = false;
            for l in &lesions {
                let d = ((r - l.row).powi(2) + (c - l.col).powi(2)).sqrt();
                let p = lesion_profile(d, l.radius);
                drop = drop.max(l.contrast * p);
                in_lesion |= p >= 0.5;
            }
            let clean = BACKGROUND * (1.0 - inside)
                + inside * (TISSUE + TEXTURE_AMPLITUDE * texture)
                - drop;
            image.push((clean + noise.sample(&mut rng)).clamp(0.0, 1.0));
            mask.push(if in_lesion { 1.0 } else { 0.0 });
        }
    }
    let sample = Sample {
        id: format!("p{}_{index:05}", spec.seed),
        image: Tensor::new(vec![n, n], image)?,
        mask: Tensor::new(vec![n, n], mask)?,
    };
    Ok((sample, lesions))
}

/// Generates samples `0..n`.
pub fn generate(spec: &PhantomSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    (0..n as u64)
        .map(|i| render(spec, i).map(|(s, _)| s))
        .collect()
}
