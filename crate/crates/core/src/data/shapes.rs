//! Synthetic surface catalog used as a small stand-in for CAD datasets.
//!
//! Each [`ShapeKind`] comes in two proportion variants so that up to 16
//! classes can be generated. Points are drawn uniformly with respect to
//! surface area. Shapes that are symmetric under `p -> -p` are sampled in
//! antipodal pairs, which puts the centroid of an even-sized sample exactly
//! at the shape's center.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Plane,
    Helix,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Pyramid,
        ShapeKind::Plane,
        ShapeKind::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Plane => "plane",
            ShapeKind::Helix => "helix",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape kind {s:?}")))
    }
}

/// What to generate for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Proportion variant, 0 or 1.
    pub variant: u8,
    pub jitter_sigma: f64,
    pub points_per_cloud: usize,
    /// Relative spread of each size parameter between clouds of the class.
    /// Every cloud scales each parameter by its own factor drawn uniformly
    /// from `[1 - variation, 1 + variation]`.
    #[serde(default)]
    pub variation: f64,
}

impl ShapeSpec {
    /// Spec for class `label`: kinds cycle through the catalog, the second
    /// lap uses the alternate proportions.
    pub fn for_class(label: usize, jitter_sigma: f64, points_per_cloud: usize) -> Result<Self> {
        let kinds = ShapeKind::ALL.len();
        if label >= 2 * kinds {
            return Err(Error::config(format!(
                "the shape catalog supports at most {} classes, got class {label}",
                2 * kinds
            )));
        }
        Ok(ShapeSpec {
            kind: ShapeKind::ALL[label % kinds],
            variant: (label / kinds) as u8,
            jitter_sigma,
            points_per_cloud,
            variation: 0.0,
        })
    }

    pub fn with_variation(mut self, variation: f64) -> Self {
        self.variation = variation;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.points_per_cloud == 0 {
            return Err(Error::config("points_per_cloud must be positive"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config(format!(
                "jitter_sigma must be finite and >= 0, got {}",
                self.jitter_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.variation) {
            return Err(Error::config(format!(
                "shape variation must lie in [0, 1), got {}",
                self.variation
            )));
        }
        if self.variant > 1 {
            return Err(Error::config(format!(
                "shape variant must be 0 or 1, got {}",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Samples `spec.points_per_cloud` jitter-free points on the ideal surface,
/// in the shape's own frame and scale.
pub fn sample_surface(spec: &ShapeSpec, rng: &mut Rng) -> Result<Vec<Point>> {
    spec.validate()?;
    let n = spec.points_per_cloud;
    let alt = spec.variant == 1;
    let v = spec.variation;
    let points = match spec.kind {
        ShapeKind::Sphere => {
            let axes = vary(if alt { [1.0, 1.0, 0.5] } else { [1.0, 1.0, 1.0] }, v, rng);
            antipodal(n, rng, |rng| ellipsoid(axes, rng))
        }
        ShapeKind::Cube => {
            let half = vary(if alt { [1.0, 0.6, 0.3] } else { [1.0, 1.0, 1.0] }, v, rng);
            antipodal(n, rng, |rng| box_surface(half, rng))
        }
        ShapeKind::Cylinder => {
            let [r, h] = vary(if alt { [1.0, 0.6] } else { [0.5, 2.0] }, v, rng);
            antipodal(n, rng, |rng| cylinder(r, h, rng))
        }
        ShapeKind::Cone => {
            let [r, h] = vary(if alt { [1.0, 0.8] } else { [0.7, 2.0] }, v, rng);
            (0..n).map(|_| cone(r, h, rng)).collect()
        }
        ShapeKind::Torus => {
            let [major, minor] = vary(if alt { [1.0, 0.6] } else { [1.0, 0.3] }, v, rng);
            antipodal(n, rng, |rng| torus(major, minor, rng))
        }
        ShapeKind::Pyramid => {
            let [side, h] = vary(if alt { [1.2, 2.5] } else { [2.0, 1.2] }, v, rng);
            (0..n).map(|_| pyramid(side, h, rng)).collect()
        }
        ShapeKind::Plane => {
            let half = vary(if alt { [1.0, 0.3] } else { [1.0, 1.0] }, v, rng);
            antipodal(n, rng, |rng| {
                [
                    rng.random_range(-half[0]..=half[0]),
                    rng.random_range(-half[1]..=half[1]),
                    0.0,
                ]
            })
        }
        ShapeKind::Helix => {
            let base = if alt { [0.9, 1.5, 1.0] } else { [0.6, 3.0, 2.0] };
            let [radius, turns, height] = vary(base, v, rng);
            (0..n).map(|_| helix_tube(radius, turns, height, 0.08, rng)).collect()
        }
    };
    Ok(points)
}

/// Surface sample plus Gaussian jitter, normalized to the unit sphere.
///
/// Deterministic in `(spec, seed)`.
pub fn gen_synthetic(spec: &ShapeSpec, label: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = rng::stream(seed, Stream::Data);
    let mut points = sample_surface(spec, &mut rng)?;
    if spec.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.jitter_sigma).expect("validated sigma");
        for p in &mut points {
            for c in p.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
    }
    let cloud = PointCloud::new(
        points,
        label,
        format!("{}{}-{seed:016x}", spec.kind, spec.variant),
    )?;
    Ok(cloud.normalized())
}

fn vary<const K: usize>(base: [f64; K], variation: f64, rng: &mut Rng) -> [f64; K] {
    if variation == 0.0 {
        return base;
    }
    base.map(|b| b * (1.0 + variation * rng.random_range(-1.0..=1.0)))
}

fn antipodal(n: usize, rng: &mut Rng, mut draw: impl FnMut(&mut Rng) -> Point) -> Vec<Point> {
    let mut out = Vec::with_capacity(n);
    while out.len() + 1 < n {
        let p = draw(rng);
        out.push(p);
        out.push([-p[0], -p[1], -p[2]]);
    }
    if out.len() < n {
        out.push(draw(rng));
    }
    out
}

fn unit_vector(rng: &mut Rng) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-12 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn ellipsoid(axes: Point, rng: &mut Rng) -> Point {
    let [a, b, c] = axes;
    let g_max = (b * c).max(a * c).max(a * b);
    loop {
        let u = unit_vector(rng);
        // area element of the map u -> (a u_x, b u_y, c u_z)
        let g = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.random::<f64>() * g_max <= g {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

fn box_surface(half: Point, rng: &mut Rng) -> Point {
    let [a, b, c] = half;
    let areas = [b * c, a * c, a * b];
    let axis = pick_weighted(&areas, rng);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p = [
        rng.random_range(-a..=a),
        rng.random_range(-b..=b),
        rng.random_range(-c..=c),
    ];
    p[axis] = sign * half[axis];
    p
}

fn cylinder(r: f64, h: f64, rng: &mut Rng) -> Point {
    let side = 2.0 * PI * r * h;
    let cap = PI * r * r;
    let theta = rng.random_range(0.0..2.0 * PI);
    match pick_weighted(&[side, 2.0 * cap], rng) {
        0 => [r * theta.cos(), r * theta.sin(), rng.random_range(-h / 2.0..=h / 2.0)],
        _ => {
            let rad = r * rng.random::<f64>().sqrt();
            let z = if rng.random::<bool>() { h / 2.0 } else { -h / 2.0 };
            [rad * theta.cos(), rad * theta.sin(), z]
        }
    }
}

/// Base of radius `r` at `z = -h/2`, apex at `z = h/2`.
fn cone(r: f64, h: f64, rng: &mut Rng) -> Point {
    let slant = (r * r + h * h).sqrt();
    let theta = rng.random_range(0.0..2.0 * PI);
    match pick_weighted(&[PI * r * slant, PI * r * r], rng) {
        0 => {
            // fraction of the way from apex to rim, density proportional to t
            let t = rng.random::<f64>().sqrt();
            [r * t * theta.cos(), r * t * theta.sin(), h / 2.0 - h * t]
        }
        _ => {
            let rad = r * rng.random::<f64>().sqrt();
            [rad * theta.cos(), rad * theta.sin(), -h / 2.0]
        }
    }
}

fn torus(major: f64, minor: f64, rng: &mut Rng) -> Point {
    let phi = rng.random_range(0.0..2.0 * PI);
    let theta = loop {
        let t = rng.random_range(0.0..2.0 * PI);
        if rng.random::<f64>() * (major + minor) <= major + minor * t.cos() {
            break t;
        }
    };
    let ring = major + minor * theta.cos();
    [ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]
}

/// Square base of side `side` at `z = 0`, apex at `(0, 0, h)`.
fn pyramid(side: f64, h: f64, rng: &mut Rng) -> Point {
    let s = side / 2.0;
    let slant = (h * h + s * s).sqrt();
    let tri = side * slant / 2.0;
    let face = pick_weighted(&[side * side, tri, tri, tri, tri], rng);
    if face == 0 {
        return [rng.random_range(-s..=s), rng.random_range(-s..=s), 0.0];
    }
    let corners = [[s, s, 0.0], [-s, s, 0.0], [-s, -s, 0.0], [s, -s, 0.0]];
    let a = corners[face - 1];
    let b = corners[face % 4];
    let apex = [0.0, 0.0, h];
    let r1 = rng.random::<f64>().sqrt();
    let r2 = rng.random::<f64>();
    let mut p = [0.0; 3];
    for i in 0..3 {
        p[i] = (1.0 - r1) * apex[i] + r1 * (1.0 - r2) * a[i] + r1 * r2 * b[i];
    }
    p
}

/// Tube of radius `tube` around a helix centered on the origin.
fn helix_tube(radius: f64, turns: f64, height: f64, tube: f64, rng: &mut Rng) -> Point {
    let span = 2.0 * PI * turns;
    let pitch = height / span;
    let speed = (radius * radius + pitch * pitch).sqrt();
    let curvature = radius / (speed * speed);
    let t = rng.random_range(-span / 2.0..=span / 2.0);
    // area element of the tube is proportional to 1 - curvature * tube * cos(theta)
    let theta = loop {
        let th = rng.random_range(0.0..2.0 * PI);
        let w = 1.0 - curvature * tube * th.cos();
        if rng.random::<f64>() * (1.0 + curvature * tube) <= w {
            break th;
        }
    };
    let (st, ct) = t.sin_cos();
    let center = [radius * ct, radius * st, pitch * t];
    let tangent = [-radius * st / speed, radius * ct / speed, pitch / speed];
    let normal = [-ct, -st, 0.0];
    let binormal = [
        tangent[1] * normal[2] - tangent[2] * normal[1],
        tangent[2] * normal[0] - tangent[0] * normal[2],
        tangent[0] * normal[1] - tangent[1] * normal[0],
    ];
    let (sth, cth) = theta.sin_cos();
    let mut p = center;
    for i in 0..3 {
        p[i] += tube * (cth * normal[i] + sth * binormal[i]);
    }
    p
}

fn pick_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
