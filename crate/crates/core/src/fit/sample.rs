//! Catmull-Rom sampling of a normal map with analytic spatial derivatives.

use nalgebra::{Matrix3x2, Vector2, Vector3};

use crate::raster::NormalMap;

/// A bicubic normal sample at a sub-pixel location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalSample {
    /// Renormalized interpolated normal.
    pub normal: Vector3<f64>,
    /// `∂normal/∂(u, v)`.
    pub d_normal: Matrix3x2<f64>,
    /// Bilinear mask coverage in `[0, 1]`.
    pub weight: f64,
    /// `∂weight/∂(u, v)`.
    pub d_weight: Vector2<f64>,
}

impl NormalSample {
    fn invalid() -> Self {
        Self {
            normal: Vector3::new(0.0, 0.0, -1.0),
            d_normal: Matrix3x2::zeros(),
            weight: 0.0,
            d_weight: Vector2::zeros(),
        }
    }
}

/// Catmull-Rom weights for taps at offsets -1, 0, 1, 2 and their derivatives.
#[inline]
fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    (
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
        [
            0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
            0.5 * (9.0 * t2 - 10.0 * t),
            0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
            0.5 * (3.0 * t2 - 2.0 * t),
        ],
    )
}

/// Samples the normal field at pixel coordinates `a`.
///
/// Pixel centers sit at half-integer coordinates. The 4×4 neighborhood is
/// clamped at the borders. Points outside `[0, w] × [0, h]` get weight 0.
pub fn sample_normal_bicubic(map: &NormalMap, a: &Vector2<f64>) -> NormalSample {
    let (w, h) = (map.width as f64, map.height as f64);
    if !(a.x >= 0.0 && a.x <= w && a.y >= 0.0 && a.y <= h) {
        return NormalSample::invalid();
    }
    let (x, y) = (a.x - 0.5, a.y - 0.5);
    let (xi, yi) = (x.floor(), y.floor());
    let (tx, ty) = (x - xi, y - yi);
    let (xi, yi) = (xi as i64, yi as i64);

    let (weight, d_weight) = bilinear_mask(map, xi, yi, tx, ty);
    if weight <= 0.0 {
        return NormalSample::invalid();
    }

    let (wx, dwx) = catmull_rom(tx);
    let (wy, dwy) = catmull_rom(ty);
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut c = Vector3::zeros();
    let mut cu = Vector3::zeros();
    let mut cv = Vector3::zeros();
    for (j, (&wyj, &dwyj)) in wy.iter().zip(&dwy).enumerate() {
        let row = clamp(yi - 1 + j as i64, map.height);
        let mut rc = Vector3::zeros();
        let mut ru = Vector3::zeros();
        for (i, (&wxi, &dwxi)) in wx.iter().zip(&dwx).enumerate() {
            let n = map.normals[row * map.width + clamp(xi - 1 + i as i64, map.width)];
            rc += n * wxi;
            ru += n * dwxi;
        }
        c += rc * wyj;
        cu += ru * wyj;
        cv += rc * dwyj;
    }

    let norm = c.norm();
    if norm < 1e-12 {
        return NormalSample {
            weight,
            d_weight,
            ..NormalSample::invalid()
        };
    }
    let normal = c / norm;
    let proj = (nalgebra::Matrix3::identity() - normal * normal.transpose()) / norm;
    NormalSample {
        normal,
        d_normal: Matrix3x2::from_columns(&[proj * cu, proj * cv]),
        weight,
        d_weight,
    }
}

fn bilinear_mask(map: &NormalMap, xi: i64, yi: i64, tx: f64, ty: f64) -> (f64, Vector2<f64>) {
    let m = |u: i64, v: i64| -> f64 {
        if u < 0 || v < 0 || u >= map.width as i64 || v >= map.height as i64 {
            0.0
        } else {
            map.mask[v as usize * map.width + u as usize] as u8 as f64
        }
    };
    let (m00, m10, m01, m11) = (m(xi, yi), m(xi + 1, yi), m(xi, yi + 1), m(xi + 1, yi + 1));
    let weight = (1.0 - tx) * (1.0 - ty) * m00
        + tx * (1.0 - ty) * m10
        + (1.0 - tx) * ty * m01
        + tx * ty * m11;
    let du = (1.0 - ty) * (m10 - m00) + ty * (m11 - m01);
    let dv = (1.0 - tx) * (m01 - m00) + tx * (m11 - m10);
    (weight, Vector2::new(du, dv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(w: usize, h: usize, f: impl Fn(usize, usize) -> Vector3<f64>) -> NormalMap {
        let mut map = NormalMap::empty(w, h);
        for v in 0..h {
            for u in 0..w {
                let i = map.index(u, v);
                map.normals[i] = f(u, v);
                map.mask[i] = true;
                map.depth[i] = 100.0;
            }
        }
        map
    }

    #[test]
    fn constant_field_is_reproduced() {
        let n = Vector3::new(0.3, -0.4, -0.5).normalize();
        let map = field(12, 9, |_, _| n);
        for a in [(1.3, 2.7), (5.5, 4.5), (0.2, 8.9), (11.9, 0.1)] {
            let s = sample_normal_bicubic(&map, &Vector2::new(a.0, a.1));
            assert!((s.normal - n).norm() < 1e-15);
            assert!(s.d_normal.norm() < 1e-12);
        }
    }

    #[test]
    fn pixel_centers_return_stored_normals() {
        let map = field(10, 10, |u, v| Vector3::new(u as f64 * 0.1, v as f64 * 0.05 - 0.2, -1.0).normalize());
        for (u, v) in [(0, 0), (3, 7), (9, 9), (5, 2)] {
            let s = sample_normal_bicubic(&map, &Vector2::new(u as f64 + 0.5, v as f64 + 0.5));
            assert!((s.normal - map.normal(u, v)).norm() < 1e-12);
        }
    }

    #[test]
    fn outside_image_has_zero_weight() {
        let map = field(8, 8, |_, _| Vector3::z());
        for a in [(-0.1, 3.0), (3.0, 8.01), (f64::NAN, 1.0)] {
            let s = sample_normal_bicubic(&map, &Vector2::new(a.0, a.1));
            assert_eq!(s.weight, 0.0);
            assert!((s.normal.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_weight_is_bilinear() {
        let mut map = field(4, 4, |_, _| Vector3::z());
        for v in 0..4 {
            let i = map.index(2, v);
            map.mask[i] = false;
            let i = map.index(3, v);
            map.mask[i] = false;
        }
        // Halfway between the last masked-in column (u = 1) and the first
        // masked-out column (u = 2).
        let s = sample_normal_bicubic(&map, &Vector2::new(2.0, 2.0));
        assert!((s.weight - 0.5).abs() < 1e-15);
        assert!((s.d_weight.x + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spatial_derivative_matches_differences() {
        let map = field(16, 16, |u, v| {
            let (x, y) = (u as f64, v as f64);
            Vector3::new((0.3 * x).sin(), (0.2 * y).cos() * 0.5, -1.0 - 0.01 * x * y).normalize()
        });
        let a = Vector2::new(7.3, 6.8);
        let s = sample_normal_bicubic(&map, &a);
        let h = 1e-6;
        for k in 0..2 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (sample_normal_bicubic(&map, &ap).normal - sample_normal_bicubic(&map, &am).normal) / (2.0 * h);
            assert!((fd - s.d_normal.column(k)).norm() < 1e-7);
        }
    }
}
