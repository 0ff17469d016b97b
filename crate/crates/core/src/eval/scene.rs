//! Synthetic labelled scans: a spherical ray-cast from one scanner position
//! against parallelograms and spheres. Point spacing grows with range, so
//! density falls off with distance the way a real terrestrial scan does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcio::{Point, PointCloud};

pub const WALL: u16 = 0;
pub const GROUND: u16 = 1;
pub const OTHER: u16 = 2;
pub const CLASS_NAMES: [&str; 3] = ["wall", "ground", "other"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `origin + s·u + t·v` for `s, t ∈ [0, 1]`.
    Parallelogram {
        origin: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
    },
    Sphere {
        centre: [f64; 3],
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub label: u16,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub scanner: [f64; 3],
    pub primitives: Vec<Primitive>,
    pub rows: u32,
    pub cols: u32,
    /// Elevation range in degrees, bottom row first.
    pub elevation_deg: [f64; 2],
    /// Azimuth range in degrees covered by the columns.
    pub azimuth_deg: [f64; 2],
    pub max_range: f64,
    pub noise_sigma: f64,
    /// Standard deviation of the colour jitter.
    #[serde(default)]
    pub colour_noise: f64,
    /// Fewer points than this is an error.
    pub min_points: usize,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
}

fn default_class_count() -> usize {
    3
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Shape {
    /// Smallest positive ray parameter of an intersection.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Parallelogram { origin, u, v } => {
                // Möller–Trumbore style solve of o + t·d = origin + s·u + r·v
                let p = cross(d, v);
                let det = dot(u, p);
                if det.abs() < 1e-12 {
                    return None;
                }
                let inv = 1.0 / det;
                let tv = sub(o, origin);
                let s = dot(tv, p) * inv;
                if !(0.0..=1.0).contains(&s) {
                    return None;
                }
                let q = cross(tv, u);
                let r = dot(d, q) * inv;
                if !(0.0..=1.0).contains(&r) {
                    return None;
                }
                let t = dot(v, q) * inv;
                (t > 1e-9).then_some(t)
            }
            Shape::Sphere { centre, radius } => {
                let oc = sub(o, centre);
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|&t| t > 1e-9)
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("scene spec: {m}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be positive");
        }
        if !(self.max_range > 0.0) || !(self.noise_sigma >= 0.0) || !(self.colour_noise >= 0.0) {
            return bad("max_range > 0 and non-negative noise required");
        }
        if self.elevation_deg[0] >= self.elevation_deg[1] || self.azimuth_deg[0] >= self.azimuth_deg[1] {
            return bad("angle ranges must be increasing");
        }
        if let Some(p) = self.primitives.iter().find(|p| p.label as usize >= self.class_count) {
            return bad(&format!("label {} outside class_count {}", p.label, self.class_count));
        }
        Ok(())
    }

    /// Unit direction of scan cell `(row, col)`.
    pub fn direction(&self, row: u32, col: u32) -> [f64; 3] {
        let [e0, e1] = self.elevation_deg;
        let [a0, a1] = self.azimuth_deg;
        let el = (e0 + (e1 - e0) * (row as f64 + 0.5) / self.rows as f64).to_radians();
        let az = (a0 + (a1 - a0) * (col as f64 + 0.5) / self.cols as f64).to_radians();
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    /// Nearest primitive hit within range, as `(distance, primitive index)`.
    pub fn cast(&self, d: [f64; 3]) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.shape.intersect(self.scanner, d).map(|t| (t, i)))
            .filter(|&(t, _)| t <= self.max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn load(path: &std::path::Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: SceneSpec =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("scene spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

/// Ray-casts `spec`. Each scan row draws its noise from its own seeded stream,
/// so the result does not depend on the thread count.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let rows: Vec<Vec<Point>> = (0..spec.rows)
        .into_par_iter()
        .map(|row| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(row as u64 + 1);
            let range_noise = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
            let colour_noise = Normal::new(0.0, spec.colour_noise).expect("sigma checked");
            let mut out = Vec::new();
            for col in 0..spec.cols {
                let d = spec.direction(row, col);
                let Some((t, i)) = spec.cast(d) else { continue };
                let t = (t + range_noise.sample(&mut rng)).max(1e-3);
                let prim = &spec.primitives[i];
                let mut p = Point::new(
                    spec.scanner[0] + d[0] * t,
                    spec.scanner[1] + d[1] * t,
                    spec.scanner[2] + d[2] * t,
                );
                let [r, g, b] = prim
                    .albedo
                    .map(|c| (c + colour_noise.sample(&mut rng)).clamp(0.0, 1.0));
                (p.r, p.g, p.b) = (r, g, b);
                p.row = Some(row);
                p.col = Some(col);
                p.label = Some(prim.label);
                out.push(p);
            }
            out
        })
        .collect();
    let points: Vec<Point> = rows.into_iter().flatten().collect();
    if points.len() < spec.min_points {
        return Err(Error::SpecTooSparse {
            got: points.len(),
            need: spec.min_points,
        });
    }
    Ok(PointCloud::new(points, spec.class_count, format!("synthetic-{seed}")))
}

fn quad(origin: [f64; 3], u: [f64; 3], v: [f64; 3], label: u16, albedo: [f64; 3]) -> Primitive {
    Primitive {
        shape: Shape::Parallelogram { origin, u, v },
        label,
        albedo,
    }
}

/// A two-tier mine drive: a tunnel with a raised bench on one side, walls,
/// and scattered equipment-sized objects. `variant` perturbs the geometry.
pub fn mine_spec(variant: u64, rows: u32, cols: u32, min_points: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(variant);
    let len = rng.random_range(45.0..70.0);
    let width = rng.random_range(5.0..8.0);
    let height = rng.random_range(4.0..6.0);
    let bench_w = rng.random_range(1.5..2.5);
    let bench_h = rng.random_range(0.8..1.6);
    let back = rng.random_range(6.0..12.0);
    let half = width / 2.0;
    let wall_c = [0.55, 0.45, 0.35];
    let ground_c = [0.35, 0.33, 0.3];
    let other_c = [0.85, 0.7, 0.1];
    let mut prims = vec![
        // floor, split around the bench
        quad([-back, -half, 0.0], [len + back, 0.0, 0.0], [0.0, width - bench_w, 0.0], GROUND, ground_c),
        // bench top and riser
        quad(
            [-back, half - bench_w, bench_h],
            [len + back, 0.0, 0.0],
            [0.0, bench_w, 0.0],
            GROUND,
            ground_c,
        ),
        quad(
            [-back, half - bench_w, 0.0],
            [len + back, 0.0, 0.0],
            [0.0, 0.0, bench_h],
            WALL,
            wall_c,
        ),
        // side walls
        quad([-back, -half, 0.0], [len + back, 0.0, 0.0], [0.0, 0.0, height], WALL, wall_c),
        quad([-back, half, bench_h], [len + back, 0.0, 0.0], [0.0, 0.0, height - bench_h], WALL, wall_c),
        // roof and end faces
        quad([-back, -half, height], [len + back, 0.0, 0.0], [0.0, width, 0.0], WALL, wall_c),
        quad([len, -half, 0.0], [0.0, width, 0.0], [0.0, 0.0, height], WALL, wall_c),
        quad([-back, -half, 0.0], [0.0, width, 0.0], [0.0, 0.0, height], WALL, wall_c),
    ];
    let objects = rng.random_range(14..22);
    for _ in 0..objects {
        // mostly near the scanner, a few far down the drive
        let x = if rng.random_bool(0.8) {
            rng.random_range(1.5..12.0) * if rng.random_bool(0.3) { -0.5 } else { 1.0 }
        } else {
            rng.random_range(12.0..len - 3.0)
        };
        let y = rng.random_range(-half + 0.8..half - bench_w - 0.8);
        if rng.random_bool(0.5) {
            let r = rng.random_range(0.6..1.2);
            prims.push(Primitive {
                shape: Shape::Sphere {
                    centre: [x, y, r],
                    radius: r,
                },
                label: OTHER,
                albedo: other_c,
            });
        } else {
            // upright slab facing the scanner
            let w = rng.random_range(1.0..2.0);
            let h = rng.random_range(1.0..2.2);
            prims.push(quad([x, y - w / 2.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, h], OTHER, other_c));
            prims.push(quad([x, y - w / 2.0, h], [0.6, 0.0, 0.0], [0.0, w, 0.0], OTHER, other_c));
        }
    }
    SceneSpec {
        scanner: [0.0, rng.random_range(-0.5..0.5), 1.6],
        primitives: prims,
        rows,
        cols,
        elevation_deg: [-60.0, 60.0],
        azimuth_deg: [-180.0, 180.0],
        max_range: 120.0,
        noise_sigma: 0.005,
        colour_noise: 0.08,
        min_points,
        class_count: 3,
    }
}

/// A single square plane facing the scanner along +x at `distance`.
pub fn plane_spec(distance: f64, size: f64, rows: u32, cols: u32) -> SceneSpec {
    let h = size / 2.0;
    SceneSpec {
        scanner: [0.0; 3],
        primitives: vec![quad([distance, -h, -h], [0.0, size, 0.0], [0.0, 0.0, size], WALL, [0.5; 3])],
        rows,
        cols,
        elevation_deg: [-45.0, 45.0],
        azimuth_deg: [-45.0, 45.0],
        max_range: 1000.0,
        noise_sigma: 0.0,
        colour_noise: 0.0,
        min_points: 1,
        class_count: 3,
    }
}
