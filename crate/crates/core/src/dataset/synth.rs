//! Procedural rapeseed-like plants: a bent main stem, angled tillers and
//! slim capsule-shaped pods, sampled as surface points with labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{LabeledCloud, NON_SILIQUE, NO_INSTANCE, SILIQUE};
use crate::error::{CoreError, Result};

/// Parameters of one synthetic plant. Lengths are meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantSpec {
    pub n_tillers: usize,
    pub siliques_per_tiller: (usize, usize),
    pub stem_siliques: (usize, usize),
    pub silique_length: (f64, f64),
    pub silique_radius: (f64, f64),
    pub stem_radius: f64,
    pub tiller_radius: f64,
    pub stem_height: f64,
    pub tiller_length: (f64, f64),
    /// Surface sampling density in points per square meter.
    pub density: f64,
    pub jitter: f64,
    /// Minimum surface-to-surface gap between two pods.
    pub min_gap: f64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            n_tillers: 2,
            siliques_per_tiller: (5, 7),
            stem_siliques: (3, 4),
            silique_length: (0.04, 0.06),
            silique_radius: (0.0018, 0.0024),
            stem_radius: 0.004,
            tiller_radius: 0.003,
            stem_height: 0.7,
            tiller_length: (0.3, 0.4),
            density: 1.6e5,
            jitter: 1e-4,
            min_gap: 0.014,
            seed: 0,
        }
    }
}

impl PlantSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::Spec(msg.to_string()));
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite();
        if !range_ok(self.silique_length) || !range_ok(self.silique_radius) {
            return bad("silique length and radius ranges must be positive and ordered");
        }
        if !range_ok(self.tiller_length) {
            return bad("tiller length range must be positive and ordered");
        }
        if self.siliques_per_tiller.0 > self.siliques_per_tiller.1
            || self.stem_siliques.0 > self.stem_siliques.1
        {
            return bad("silique count ranges must be ordered");
        }
        if !(self.stem_radius > 0.0 && self.tiller_radius > 0.0 && self.stem_height > 0.0) {
            return bad("stem and tiller dimensions must be positive");
        }
        if self.silique_radius.1 * 5.0 > self.silique_length.0 {
            return bad("pods must be slim: radius at most a fifth of the length");
        }
        if !(self.density > 0.0 && self.jitter >= 0.0 && self.min_gap >= 0.0) {
            return bad("density must be positive, jitter and gap nonnegative");
        }
        Ok(())
    }
}

/// One sampled tube: a cylinder from `a` to `b`, with hemispherical caps
/// for pods.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiliqueGeometry {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    pub capped: bool,
    pub class: u32,
    pub instance: i32,
}

impl SiliqueGeometry {
    pub fn length(&self) -> f64 {
        norm(sub(self.b, self.a))
    }
}

/// Generates a labeled plant together with the tubes it was sampled from.
///
/// Pod placement is rejection sampled; when a layout cannot be completed the
/// whole plant is redrawn from the same generator stream, so the result stays
/// a pure function of the seed.
pub fn generate_plant(spec: &PlantSpec) -> Result<(LabeledCloud, Vec<SiliqueGeometry>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last_err = None;
    for _ in 0..8 {
        match try_generate(spec, &mut rng) {
            Ok(plant) => return Ok(plant),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

fn try_generate(
    spec: &PlantSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledCloud, Vec<SiliqueGeometry>)> {
    let mut tubes = Vec::new();
    let up = [0.0, 0.0, 1.0];

    // Main stem as a gently bending polyline.
    let segments = 6;
    let lateral = Normal::new(0.0, 0.004).unwrap();
    let mut stem_pts = vec![[0.0, 0.0, 0.0]];
    for k in 1..=segments {
        let prev = stem_pts[k - 1];
        stem_pts.push([
            prev[0] + lateral.sample(rng),
            prev[1] + lateral.sample(rng),
            spec.stem_height * k as f64 / segments as f64,
        ]);
    }
    for w in stem_pts.windows(2) {
        tubes.push(SiliqueGeometry {
            a: w[0],
            b: w[1],
            radius: spec.stem_radius,
            capped: false,
            class: NON_SILIQUE,
            instance: NO_INSTANCE,
        });
    }
    let stem_at = |h: f64| -> [f64; 3] {
        let t = (h / spec.stem_height * segments as f64).clamp(0.0, segments as f64 - 1e-9);
        let k = t.floor() as usize;
        lerp(stem_pts[k], stem_pts[k + 1], t - k as f64)
    };

    // Tillers leave the stem at increasing heights and spread in azimuth.
    let mut tillers = Vec::new();
    for i in 0..spec.n_tillers {
        let frac = (i as f64 + rng.random_range(0.2..0.8)) / spec.n_tillers.max(1) as f64;
        let h = spec.stem_height * (0.4 + 0.35 * frac);
        let azimuth = 2.0 * PI * i as f64 / spec.n_tillers as f64 + rng.random_range(-0.3..0.3);
        let elevation = rng.random_range(40f64..60.0).to_radians();
        let dir = [
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        ];
        let len = rng.random_range(spec.tiller_length.0..=spec.tiller_length.1);
        let start = add(stem_at(h), scale(dir, spec.stem_radius));
        let tube = SiliqueGeometry {
            a: start,
            b: add(start, scale(dir, len)),
            radius: spec.tiller_radius,
            capped: false,
            class: NON_SILIQUE,
            instance: NO_INSTANCE,
        };
        tillers.push(tube);
        tubes.push(tube);
    }

    // Pods: rejection-sampled so that every pair keeps `min_gap` between
    // surfaces and no pod cuts through a foreign branch.
    let branches: Vec<SiliqueGeometry> = tubes.clone();
    let mut pods: Vec<SiliqueGeometry> = Vec::new();
    let place = |rng: &mut ChaCha8Rng,
                     pods: &mut Vec<SiliqueGeometry>,
                     parent: usize,
                     sample_base: &dyn Fn(&mut ChaCha8Rng) -> ([f64; 3], [f64; 3], f64)|
     -> Result<()> {
        for _ in 0..400 {
            let (axis_point, dir, parent_radius) = sample_base(rng);
            let r = rng.random_range(spec.silique_radius.0..=spec.silique_radius.1);
            let len = rng.random_range(spec.silique_length.0..=spec.silique_length.1);
            let a = add(axis_point, scale(dir, parent_radius + r + 5e-4));
            let b = add(a, scale(dir, len));
            let clear_of_pods = pods
                .iter()
                .all(|p| segment_distance(a, b, p.a, p.b) >= r + p.radius + spec.min_gap);
            let clear_of_branches = branches.iter().enumerate().all(|(k, br)| {
                k == parent
                    || (parent < segments && k < segments && k.abs_diff(parent) <= 1)
                    || segment_distance(a, b, br.a, br.b) >= r + br.radius + 2e-3
            });
            if clear_of_pods && clear_of_branches {
                pods.push(SiliqueGeometry {
                    a,
                    b,
                    radius: r,
                    capped: true,
                    class: SILIQUE,
                    instance: pods.len() as i32,
                });
                return Ok(());
            }
        }
        Err(CoreError::Spec(format!(
            "could not place pod {} without collisions (seed {})",
            pods.len(),
            spec.seed
        )))
    };

    for (t, tiller) in tillers.iter().enumerate() {
        let count = rng.random_range(spec.siliques_per_tiller.0..=spec.siliques_per_tiller.1);
        let tdir = normalize(sub(tiller.b, tiller.a));
        let tlen = tiller.length();
        for _ in 0..count {
            let base = |rng: &mut ChaCha8Rng| {
                let s = rng.random_range(0.2..1.0) * tlen;
                let perp = random_perpendicular(rng, tdir);
                let dir = normalize(add(
                    add(scale(tdir, 0.5), scale(up, 0.8)),
                    scale(perp, rng.random_range(-1.3..1.3)),
                ));
                (add(tiller.a, scale(tdir, s)), dir, tiller.radius)
            };
            place(rng, &mut pods, segments + t, &base)?;
        }
    }
    let count = rng.random_range(spec.stem_siliques.0..=spec.stem_siliques.1);
    for _ in 0..count {
        let base = |rng: &mut ChaCha8Rng| {
            let h = spec.stem_height * rng.random_range(0.8..0.97);
            let az = rng.random_range(0.0..2.0 * PI);
            let dir = normalize([0.7 * az.cos(), 0.7 * az.sin(), 0.7]);
            (stem_at(h), dir, spec.stem_radius)
        };
        let parent = ((0.9 * segments as f64) as usize).min(segments - 1);
        place(rng, &mut pods, parent, &base)?;
    }
    tubes.extend(pods.iter().copied());

    let spacing = 1.0 / spec.density.sqrt();
    let noise = Normal::new(0.0, spec.jitter.max(1e-300)).unwrap();
    let mut coords = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    for tube in &tubes {
        let before = coords.len();
        sample_tube(tube, spacing, rng, &mut coords);
        for p in &mut coords[before..] {
            if spec.jitter > 0.0 {
                for v in p.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
        let added = coords.len() - before;
        sem.extend(std::iter::repeat_n(tube.class, added));
        inst.extend(std::iter::repeat_n(tube.instance, added));
    }
    let cloud = LabeledCloud::new(format!("plant_{}", spec.seed), coords)
        .with_sem(sem)
        .with_inst(inst);
    Ok((cloud, tubes))
}

/// Stratified surface sampling: rings of `n` points whose axial spacing is
/// chosen so that every ring band holds `spacing^2` area per point.
fn sample_tube(tube: &SiliqueGeometry, spacing: f64, rng: &mut ChaCha8Rng, out: &mut Vec<[f64; 3]>) {
    let axis = sub(tube.b, tube.a);
    let len = norm(axis);
    let u = scale(axis, 1.0 / len);
    let (e1, e2) = basis(u);
    let r = tube.radius;
    let n = ((2.0 * PI * r / spacing).round() as usize).max(3);
    let step = spacing * spacing * n as f64 / (2.0 * PI * r);
    let ring = |center: [f64; 3], radius: f64, rng: &mut ChaCha8Rng, out: &mut Vec<[f64; 3]>| {
        let phase = rng.random_range(0.0..2.0 * PI / n as f64);
        for k in 0..n {
            let th = phase + 2.0 * PI * k as f64 / n as f64;
            out.push(add(
                center,
                add(scale(e1, radius * th.cos()), scale(e2, radius * th.sin())),
            ));
        }
    };
    let rings = ((len / step).round() as usize).max(1);
    for k in 0..rings {
        let t = (k as f64 + 0.5) * len / rings as f64;
        ring(add(tube.a, scale(u, t)), r, rng, out);
    }
    if tube.capped {
        // Uniform bands in height carry equal area on a sphere.
        let cap_rings = ((r / step).round() as usize).max(1);
        for (end, sign) in [(tube.a, -1.0), (tube.b, 1.0)] {
            for k in 0..cap_rings {
                let z = (k as f64 + 0.5) * r / cap_rings as f64;
                let rho = (r * r - z * z).sqrt();
                ring(add(end, scale(u, sign * z)), rho, rng, out);
            }
        }
    }
}

fn random_perpendicular(rng: &mut ChaCha8Rng, u: [f64; 3]) -> [f64; 3] {
    let (e1, e2) = basis(u);
    let th = rng.random_range(0.0..2.0 * PI);
    add(scale(e1, th.cos()), scale(e2, th.sin()))
}

fn basis(u: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(u, helper));
    (e1, cross(u, e1))
}

/// Shortest distance between segments `p0p1` and `q0q1`.
pub(crate) fn segment_distance(p0: [f64; 3], p1: [f64; 3], q0: [f64; 3], q1: [f64; 3]) -> f64 {
    let d1 = sub(p1, p0);
    let d2 = sub(q1, q0);
    let r = sub(p0, q0);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);
    let c = dot(d1, r);
    let b = dot(d1, d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-18 {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    norm(sub(add(p0, scale(d1, s)), add(q0, scale(d2, t))))
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
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
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}
fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    add(a, scale(sub(b, a), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        let d = segment_distance([0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-12);
        let d = segment_distance([0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-12);
        let d = segment_distance([0.0; 3], [2.0, 0.0, 0.0], [1.0, -1.0, 1.0], [1.0, 1.0, 1.0]);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_pod_count() {
        let spec = PlantSpec {
            n_tillers: 1,
            siliques_per_tiller: (5, 5),
            stem_siliques: (0, 0),
            ..PlantSpec::default()
        };
        let (cloud, _) = generate_plant(&spec).unwrap();
        let ids = cloud.instances();
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|(k, _)| *k >= 0));
    }

    #[test]
    fn seeded_and_consistent() {
        let spec = PlantSpec::default().with_seed(9);
        let (a, _) = generate_plant(&spec).unwrap();
        let (b, _) = generate_plant(&spec).unwrap();
        assert_eq!(a, b);
        a.validate(2).unwrap();
        let sem = a.sem.as_ref().unwrap();
        let inst = a.inst.as_ref().unwrap();
        for i in 0..a.len() {
            assert_eq!(inst[i] >= 0, sem[i] == SILIQUE);
        }
        let (c, _) = generate_plant(&spec.clone().with_seed(10)).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn rejects_fat_pods() {
        let spec = PlantSpec {
            silique_radius: (0.02, 0.03),
            ..PlantSpec::default()
        };
        assert!(generate_plant(&spec).is_err());
    }
}
