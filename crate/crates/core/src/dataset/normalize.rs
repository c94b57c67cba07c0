use crate::cloud::LabeledCloud;
use crate::error::{CoreError, Result};

/// Isotropic map `p' = (p - min) * scale` into the unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeTransform {
    pub min: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.min[0]) * self.scale,
            (p[1] - self.min[1]) * self.scale,
            (p[2] - self.min[2]) * self.scale,
        ]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.scale + self.min[0],
            p[1] / self.scale + self.min[1],
            p[2] / self.scale + self.min[2],
        ]
    }
}

/// Scales the cloud by the inverse of its largest extent and moves its
/// minimum corner to the origin, preserving the aspect ratio.
pub fn normalize_unit_cube(cloud: &LabeledCloud) -> Result<(LabeledCloud, NormalizeTransform)> {
    let (lo, hi) = cloud.bounds().ok_or(CoreError::Empty("cloud has no points"))?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(CoreError::InvalidGrid(format!(
            "cannot normalize a cloud of extent {extent}"
        )));
    }
    let t = NormalizeTransform {
        min: lo,
        scale: 1.0 / extent,
    };
    let mut out = cloud.clone();
    out.coords.iter_mut().for_each(|p| *p = t.apply(*p));
    Ok((out, t))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cloud_is_identity() {
        let c = LabeledCloud::new("t", vec![[0.0; 3], [1.0, 0.5, 1.0], [0.25, 1.0, 0.0]]);
        let (n, t) = normalize_unit_cube(&c).unwrap();
        assert_eq!(t.scale, 1.0);
        assert_eq!(t.min, [0.0; 3]);
        assert_eq!(n.coords, c.coords);
    }

    #[test]
    fn inverse_and_aspect() {
        let c = LabeledCloud::new(
            "t",
            vec![[10.0, -3.0, 2.0], [12.5, 4.0, 2.2], [11.0, 0.0, 9.0], [10.3, 1.0, 5.0]],
        );
        let (n, t) = normalize_unit_cube(&c).unwrap();
        for (a, b) in n.coords.iter().zip(&c.coords) {
            let back = t.invert(*a);
            for k in 0..3 {
                assert!((back[k] - b[k]).abs() < 1e-9);
            }
            assert!(a.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
        let d = |p: [f64; 3], q: [f64; 3]| ((0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).sqrt();
        let r0 = d(c.coords[0], c.coords[1]) / d(c.coords[2], c.coords[3]);
        let r1 = d(n.coords[0], n.coords[1]) / d(n.coords[2], n.coords[3]);
        assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn zero_extent_fails() {
        let c = LabeledCloud::new("t", vec![[1.0; 3], [1.0; 3]]);
        assert!(normalize_unit_cube(&c).is_err());
        assert!(normalize_unit_cube(&LabeledCloud::new("e", vec![])).is_err());
    }
}
