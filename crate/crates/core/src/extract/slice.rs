//! Axis-aligned slices rendered with a diverging colormap, and 1D probes.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::FieldKind;
use crate::field::{self, FieldParams};
use crate::math::Vec3;

/// The plane `x[axis] = offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub axis: usize,
    pub offset: f64,
}

impl Plane {
    pub fn new(axis: usize, offset: f64) -> Result<Self, String> {
        if axis > 2 {
            return Err(format!("axis {axis} out of range"));
        }
        if !(-1.0..=1.0).contains(&offset) {
            return Err(format!("offset {offset} outside [-1, 1]"));
        }
        Ok(Self { axis, offset })
    }

    /// In-plane axes `(u, v)` in increasing order.
    pub fn in_plane(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }
}

/// Row-major pixels; row 0 is the top (largest `v`).
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub plane: Plane,
    pub values: Vec<f64>,
}

impl SliceImage {
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// A pixel is on the zero crossing when its sign differs from its right
    /// or lower neighbour.
    pub fn is_crossing(&self, x: usize, y: usize) -> bool {
        let neg = self.value(x, y) < 0.0;
        (x + 1 < self.width && (self.value(x + 1, y) < 0.0) != neg)
            || (y + 1 < self.height && (self.value(x, y + 1) < 0.0) != neg)
    }

    /// RGB bytes: warm for positive, cool for negative, white at zero,
    /// black on zero crossings. Magnitudes are scaled by the largest one.
    pub fn to_rgb(&self) -> Vec<u8> {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut out = Vec::with_capacity(3 * self.values.len());
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_crossing(x, y) {
                    out.extend_from_slice(&[0, 0, 0]);
                    continue;
                }
                let t = if scale > 0.0 { (self.value(x, y) / scale).clamp(-1.0, 1.0) } else { 0.0 };
                let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
                let rgb = if t >= 0.0 { [255, fade(0.85 * t), fade(t)] } else { [fade(-t), fade(-0.6 * t), 255] };
                out.extend_from_slice(&rgb);
            }
        }
        out
    }
}

fn pixel_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

/// `res × res` samples of one field on `plane`; `res >= 2`.
pub fn render_slice(params: &FieldParams, plane: Plane, res: usize, kind: FieldKind) -> SliceImage {
    let res = res.max(2);
    let (u, v) = plane.in_plane();
    let mut pts = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let mut p = [0.0; 3];
            p[plane.axis] = plane.offset;
            p[u] = pixel_coord(x, res);
            p[v] = pixel_coord(res - 1 - y, res);
            pts.push(p);
        }
    }
    let values = field::evaluate_values(params, &pts).into_iter().map(|t| kind.pick(t)).collect();
    SliceImage { width: res, height: res, plane, values }
}

pub fn write_ppm(img: &SliceImage, path: &Path) -> io::Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.to_rgb());
    fs::write(path, bytes)
}

/// Raw slice values: one row per pixel row.
pub fn write_slice_csv(img: &SliceImage, path: &Path) -> io::Result<()> {
    let mut s = String::new();
    for y in 0..img.height {
        let row: Vec<String> = (0..img.width).map(|x| format!("{:.9e}", img.value(x, y))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSample {
    /// Coordinate along the probe axis.
    pub t: f64,
    pub point: Vec3,
    pub value: f64,
}

/// `res` samples along the line through `through` parallel to `axis`,
/// spanning `[-1, 1]`.
pub fn probe(params: &FieldParams, through: Vec3, axis: usize, res: usize, kind: FieldKind) -> Vec<ProbeSample> {
    let res = res.max(2);
    let pts: Vec<Vec3> = (0..res)
        .map(|i| {
            let mut p = through;
            p[axis] = pixel_coord(i, res);
            p
        })
        .collect();
    field::evaluate_values(params, &pts)
        .into_iter()
        .zip(pts)
        .map(|(v, p)| ProbeSample { t: p[axis], point: p, value: kind.pick(v) })
        .collect()
}

pub fn probe_csv(samples: &[ProbeSample]) -> String {
    let mut s = String::from("t,x,y,z,value\n");
    for p in samples {
        writeln!(s, "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}", p.t, p.point[0], p.point[1], p.point[2], p.value).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_params, InitOptions};

    fn constant(c: f64) -> FieldParams {
        let mut p = init_params(0, &InitOptions { hidden: 8, ..Default::default() });
        let l = p.layout();
        p.net[l.wt2..l.bt2].fill(0.0);
        p.net[l.bt2] = c;
        p
    }

    #[test]
    fn constant_positive_field_is_uniformly_warm() {
        let img = render_slice(&constant(0.3), Plane::new(2, 0.0).unwrap(), 16, FieldKind::Theta);
        let rgb = img.to_rgb();
        assert!(rgb.chunks(3).all(|c| c == [255, 38, 0]));
        assert!((0..16).all(|y| (0..16).all(|x| !img.is_crossing(x, y))));
    }

    #[test]
    fn metric_slice_has_no_cool_pixels() {
        let p = init_params(2, &InitOptions { hidden: 8, ..Default::default() });
        let img = render_slice(&p, Plane::new(0, 0.1).unwrap(), 12, FieldKind::R);
        assert!(img.to_rgb().chunks(3).all(|c| c[0] == 255));
    }

    #[test]
    fn linear_image_has_one_contour_column() {
        let img = SliceImage {
            width: 5,
            height: 3,
            plane: Plane::new(2, 0.0).unwrap(),
            values: (0..15).map(|i| (i % 5) as f64 - 1.5).collect(),
        };
        let black: Vec<(usize, usize)> =
            (0..3).flat_map(|y| (0..5).map(move |x| (x, y))).filter(|&(x, y)| img.is_crossing(x, y)).collect();
        assert_eq!(black, vec![(1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn probe_rows_and_bad_planes() {
        let s = probe(&constant(0.1), [0.0; 3], 0, 33, FieldKind::Phi);
        assert_eq!(s.len(), 33);
        assert_eq!(probe_csv(&s).lines().count(), 34);
        assert_eq!(s[0].t, -1.0);
        assert_eq!(s[32].t, 1.0);
        assert!(Plane::new(3, 0.0).is_err());
        assert!(Plane::new(0, 1.5).is_err());
    }

    #[test]
    fn ppm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ppm");
        let img = render_slice(&constant(-0.2), Plane::new(1, 0.0).unwrap(), 4, FieldKind::Phi);
        write_ppm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 48);
    }
}
