//! Deterministic synthetic phantoms and image rotation.
//!
//! All families are confined to the inscribed disc and rasterized by point
//! sampling at pixel centers in normalized coordinates `[-1, 1]²`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::scalar::Real;

/// Smallest side accepted by [`make_phantom`].
pub const MIN_PHANTOM_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomFamily {
    /// Soft-tissue-like blobs with dense inclusions and air cavities.
    Ellipses,
    /// Axis-aligned rectangles on a two-level background.
    Manhattan,
    /// Oriented stripe field with jittered widths.
    Fibers,
    /// Modified Shepp-Logan head phantom.
    SheppLogan,
}

impl PhantomFamily {
    pub const ALL: [PhantomFamily; 4] = [
        PhantomFamily::Ellipses,
        PhantomFamily::Manhattan,
        PhantomFamily::Fibers,
        PhantomFamily::SheppLogan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhantomFamily::Ellipses => "ellipses",
            PhantomFamily::Manhattan => "manhattan",
            PhantomFamily::Fibers => "fibers",
            PhantomFamily::SheppLogan => "shepp_logan",
        }
    }
}

impl fmt::Display for PhantomFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown phantom family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

// Toft's modified Shepp-Logan parameters.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { value: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { value: -0.8, a: 0.6624, b: 0.8740, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { value: -0.2, a: 0.1100, b: 0.3100, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { value: -0.2, a: 0.1600, b: 0.4100, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { value: 0.1, a: 0.2100, b: 0.2500, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.0460, b: 0.0460, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.0460, b: 0.0460, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.0460, b: 0.0230, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.0230, b: 0.0230, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.0230, b: 0.0460, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

/// Pixel center of `(row, col)` in `[-1, 1]²`, y pointing up.
#[inline]
fn unit_coords(side: usize, row: usize, col: usize) -> (f64, f64) {
    let s = side as f64;
    let x = (2.0 * col as f64 + 1.0) / s - 1.0;
    let y = 1.0 - (2.0 * row as f64 + 1.0) / s;
    (x, y)
}

fn rasterize(side: usize, f: impl Fn(f64, f64) -> f64) -> Image<f64> {
    Image::clamped(Grid::from_fn(side, |r, c| {
        let (x, y) = unit_coords(side, r, c);
        if x * x + y * y > 1.0 {
            0.0
        } else {
            f(x, y)
        }
    }))
}

/// Generates a phantom of the given family. Deterministic in
/// `(family, side, seed)`; `SheppLogan` ignores the seed.
pub fn make_phantom(family: PhantomFamily, side: usize, seed: u64) -> Result<Image<f64>> {
    if side < MIN_PHANTOM_SIDE {
        return Err(Error::invalid(format!(
            "phantom side must be at least {MIN_PHANTOM_SIDE}, got {side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family_salt(family));
    Ok(match family {
        PhantomFamily::SheppLogan => rasterize(side, |x, y| {
            SHEPP_LOGAN
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.value)
                .sum()
        }),
        PhantomFamily::Ellipses => {
            let shapes = random_ellipses(&mut rng);
            let background = rng.random_range(0.05..0.15);
            let body = Ellipse {
                value: background,
                a: rng.random_range(0.75..0.92),
                b: rng.random_range(0.75..0.92),
                x0: 0.0,
                y0: 0.0,
                phi_deg: rng.random_range(0.0..180.0),
            };
            rasterize(side, |x, y| {
                if !body.contains(x, y) {
                    return 0.0;
                }
                shapes
                    .iter()
                    .rev()
                    .find(|e| e.contains(x, y))
                    .map_or(background, |e| e.value)
            })
        }
        PhantomFamily::Manhattan => {
            let low = rng.random_range(0.05..0.15);
            let high = rng.random_range(0.25..0.4);
            let split = rng.random_range(-0.4..0.4);
            let vertical = rng.random_bool(0.5);
            let n = rng.random_range(10..=30);
            let palette = [0.0, 0.45, 0.7, 0.95];
            let rects: Vec<[f64; 5]> = (0..n)
                .map(|_| {
                    let w = rng.random_range(0.04..0.35);
                    let h = rng.random_range(0.04..0.35);
                    let x0 = rng.random_range(-0.8..0.8 - w);
                    let y0 = rng.random_range(-0.8..0.8 - h);
                    let v = palette[rng.random_range(0..palette.len())];
                    [x0, y0, x0 + w, y0 + h, v]
                })
                .collect();
            rasterize(side, |x, y| {
                let hit = rects
                    .iter()
                    .rev()
                    .find(|r| x >= r[0] && x < r[2] && y >= r[1] && y < r[3]);
                match hit {
                    Some(r) => r[4],
                    None => {
                        let coord = if vertical { x } else { y };
                        if coord < split { low } else { high }
                    }
                }
            })
        }
        PhantomFamily::Fibers => {
            let angle = rng.random_range(-20.0f64..20.0) + if rng.random_bool(0.5) { 0.0 } else { 90.0 };
            let (s, c) = angle.to_radians().sin_cos();
            let matrix = rng.random_range(0.1..0.25);
            let fiber = rng.random_range(0.55..0.85);
            // stripes along the fiber direction: boundaries in the normal coordinate
            let mut edges = Vec::new();
            let mut pos = -1.5;
            while pos < 1.5 {
                let period = rng.random_range(0.08..0.16);
                let width = period * rng.random_range(0.35..0.65);
                let level = fiber + rng.random_range(-0.1..0.1);
                edges.push((pos, pos + width, level));
                pos += period;
            }
            let wobble = rng.random_range(0.0..0.04);
            let freq = rng.random_range(2.0..5.0);
            rasterize(side, |x, y| {
                let along = x * c + y * s;
                let normal = -x * s + y * c + wobble * (freq * along).sin();
                edges
                    .iter()
                    .find(|(a, b, _)| normal >= *a && normal < *b)
                    .map_or(matrix, |e| e.2)
            })
        }
    })
}

fn random_ellipses(rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = rng.random_range(5..=12);
    let mut shapes = Vec::with_capacity(n);
    for k in 0..n {
        let (value, amin, amax) = match k {
            // one large dense structure so every phantom has real contrast
            0 => (rng.random_range(0.6..1.0), 0.15, 0.35),
            _ if rng.random_bool(0.25) => (0.0, 0.05, 0.2),
            _ => (rng.random_range(0.2..0.9), 0.05, 0.3),
        };
        let r = rng.random_range(0.0..0.55);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        shapes.push(Ellipse {
            value,
            a: rng.random_range(amin..amax),
            b: rng.random_range(amin..amax),
            x0: r * t.cos(),
            y0: r * t.sin(),
            phi_deg: rng.random_range(0.0..180.0),
        });
    }
    shapes
}

fn family_salt(family: PhantomFamily) -> u64 {
    match family {
        PhantomFamily::Ellipses => 0x9e37_79b9_7f4a_7c15,
        PhantomFamily::Manhattan => 0xbf58_476d_1ce4_e5b9,
        PhantomFamily::Fibers => 0x94d0_49bb_1331_11eb,
        PhantomFamily::SheppLogan => 0,
    }
}

/// Rotates counter-clockwise by `angle` degrees about the image center with
/// bilinear interpolation; samples outside the grid read as 0.
pub fn rotate_image<T: Real>(image: &Image<T>, angle: f64) -> Result<Image<T>> {
    if !(angle.abs() <= 45.0) {
        return Err(Error::invalid(format!("rotation angle {angle} outside [-45, 45]")));
    }
    if angle == 0.0 {
        return Ok(image.clone());
    }
    let side = image.side();
    let half = side as f64 / 2.0;
    let (s, c) = angle.to_radians().sin_cos();
    let fetch = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= side as isize || col >= side as isize {
            0.0
        } else {
            image.get(r as usize, col as usize).as_f64()
        }
    };
    let out = Grid::from_fn(side, |row, col| {
        let x = col as f64 + 0.5 - half;
        let y = half - (row as f64 + 0.5);
        // inverse map: rotate the output point by -angle
        let xs = x * c + y * s;
        let ys = -x * s + y * c;
        let fc = xs + half - 0.5;
        let fr = half - ys - 0.5;
        let c0 = fc.floor();
        let r0 = fr.floor();
        let tx = fc - c0;
        let ty = fr - r0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let v = (1.0 - ty) * ((1.0 - tx) * fetch(r0, c0) + tx * fetch(r0, c0 + 1))
            + ty * ((1.0 - tx) * fetch(r0 + 1, c0) + tx * fetch(r0 + 1, c0 + 1));
        T::lit(v)
    });
    Ok(Image::clamped(out))
}

/// High-resolution truth (side `2 · side`) and its 2×2 block average.
pub fn phantom_pair(family: PhantomFamily, side: usize, seed: u64) -> Result<(Image<f64>, Image<f64>)> {
    let high = make_phantom(family, 2 * side, seed)?;
    let low = high.downsample2()?;
    Ok((high, low))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn deterministic_per_seed() {
        for fam in PhantomFamily::ALL {
            let a = make_phantom(fam, 32, 7).unwrap();
            let b = make_phantom(fam, 32, 7).unwrap();
            assert_eq!(a, b, "{fam}");
            assert!(a.is_unit_box());
        }
        assert_ne!(
            make_phantom(PhantomFamily::Ellipses, 32, 1).unwrap(),
            make_phantom(PhantomFamily::Ellipses, 32, 2).unwrap()
        );
    }

    #[test]
    fn shepp_logan_ignores_seed() {
        assert_eq!(
            make_phantom(PhantomFamily::SheppLogan, 64, 0).unwrap(),
            make_phantom(PhantomFamily::SheppLogan, 64, 99).unwrap()
        );
    }

    #[test]
    fn ellipses_calibration() {
        let mut total = 0.0;
        for seed in 0..100 {
            let p = make_phantom(PhantomFamily::Ellipses, 32, seed).unwrap();
            assert!(p.as_slice().iter().any(|&v| v >= 0.5), "seed {seed}");
            total += p.mean();
        }
        let mean = total / 100.0;
        assert!((0.05..=0.6).contains(&mean), "mean {mean}");
    }

    #[test]
    fn rejects_small_and_unknown() {
        assert!(make_phantom(PhantomFamily::Fibers, 8, 0).is_err());
        assert!("bogus".parse::<PhantomFamily>().is_err());
        assert_eq!("shepp_logan".parse::<PhantomFamily>().unwrap(), PhantomFamily::SheppLogan);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let p = make_phantom(PhantomFamily::Manhattan, 32, 3).unwrap();
        assert_eq!(rotate_image(&p, 0.0).unwrap(), p);
        assert!(rotate_image(&p, 46.0).is_err());
    }

    #[test]
    fn rotate_round_trip_smooth() {
        // smooth Gaussian bump
        let side = 64;
        let img = Image::clamped(Grid::from_fn(side, |r, c| {
            let (x, y) = unit_coords(side, r, c);
            0.8 * (-((x - 0.1).powi(2) + (y + 0.2).powi(2)) / 0.15).exp()
        }));
        let back = rotate_image(&rotate_image(&img, 4.0).unwrap(), -4.0).unwrap();
        let p = psnr(&back, &img).unwrap();
        assert!(p > 30.0, "psnr {p}");
    }

    #[test]
    fn rotate_constant_keeps_interior() {
        let img = Image::constant(32, 0.6).unwrap();
        let rot = rotate_image(&img, 10.0).unwrap();
        for r in 8..24 {
            for c in 8..24 {
                assert!((rot.get(r, c) - 0.6f64).abs() < 1e-12);
            }
        }
        assert!(rot.get(0, 0) < 0.6);
    }

    #[test]
    fn rotate_quarter_direction() {
        // a pixel right of center moves up under a CCW rotation
        let mut g = Grid::zeros(33);
        g.set(16, 26, 1.0);
        let img = Image::new(g).unwrap();
        let rot = rotate_image(&img, 45.0).unwrap();
        let (mut best, mut at) = (0.0, (0, 0));
        for r in 0..33 {
            for c in 0..33 {
                if rot.get(r, c) > best {
                    best = rot.get(r, c);
                    at = (r, c);
                }
            }
        }
        assert!(at.0 < 16 && at.1 > 16, "{at:?}");
    }
}
