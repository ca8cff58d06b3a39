use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlugError, Result};
use crate::syndata::Mask;

/// Shape geometry in pixel coordinates (x to the right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rectangle {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
        angle: f64,
    },
    Triangle {
        points: [[f64; 2]; 3],
    },
    ConvexPolygon {
        points: Vec<[f64; 2]>,
    },
    Capsule {
        start: [f64; 2],
        end: [f64; 2],
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub fill: [f64; 3],
    /// Lower is closer to the viewer.
    pub depth: u32,
}

impl Shape {
    pub fn new(kind: ShapeKind, fill: [f64; 3], depth: u32) -> Self {
        Self { kind, fill, depth }
    }

    /// Axis-aligned rectangle covering `[x0, x1) × [y0, y1)`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(
            ShapeKind::Rectangle {
                cx: 0.5 * (x0 + x1),
                cy: 0.5 * (y0 + y1),
                half_w: 0.5 * (x1 - x0),
                half_h: 0.5 * (y1 - y0),
                angle: 0.0,
            },
            [1.0, 1.0, 1.0],
            0,
        )
    }

    pub fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Self {
        Self::new(
            ShapeKind::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle: 0.0,
            },
            [1.0, 1.0, 1.0],
            0,
        )
    }

    pub fn with_depth(mut self, depth: u32) -> Self {
        self.depth = depth;
        self
    }
}

fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

fn is_convex(points: &[[f64; 2]]) -> bool {
    let n = points.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (a, b, c) = (points[i], points[(i + 1) % n], points[(i + 2) % n]);
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn inside_convex(points: &[[f64; 2]], orient: f64, x: f64, y: f64) -> bool {
    let n = points.len();
    (0..n).all(|i| {
        let (a, b) = (points[i], points[(i + 1) % n]);
        let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
        cross * orient >= 0.0
    })
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

impl ShapeKind {
    fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            ShapeKind::Ellipse { cx, cy, rx, ry, angle } => {
                finite(&[*cx, *cy, *rx, *ry, *angle]) && *rx > 0.0 && *ry > 0.0
            }
            ShapeKind::Rectangle {
                cx,
                cy,
                half_w,
                half_h,
                angle,
            } => finite(&[*cx, *cy, *half_w, *half_h, *angle]) && *half_w > 0.0 && *half_h > 0.0,
            ShapeKind::Triangle { points } => {
                points.iter().all(|p| finite(p)) && polygon_area(points).abs() > 1e-9
            }
            ShapeKind::ConvexPolygon { points } => {
                points.len() >= 3
                    && points.iter().all(|p| finite(p))
                    && polygon_area(points).abs() > 1e-9
                    && is_convex(points)
            }
            ShapeKind::Capsule { start, end, radius } => {
                finite(start) && finite(end) && radius.is_finite() && *radius > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(PlugError::DegenerateShape(format!("{self:?}")))
        }
    }

    /// Point-inclusion test (boundary counts as inside).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeKind::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            ShapeKind::Rectangle {
                cx,
                cy,
                half_w,
                half_h,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= *half_w && v.abs() <= *half_h
            }
            ShapeKind::Triangle { points } => {
                inside_convex(points, polygon_area(points).signum(), x, y)
            }
            ShapeKind::ConvexPolygon { points } => {
                inside_convex(points, polygon_area(points).signum(), x, y)
            }
            ShapeKind::Capsule { start, end, radius } => dist_to_segment([x, y], *start, *end) <= *radius,
        }
    }
}

/// Full (amodal) mask of `shape`: pixel `(row, col)` is set iff its center
/// `(col + 0.5, row + 0.5)` lies inside the shape.
pub fn rasterize_shape(shape: &Shape, h: usize, w: usize) -> Result<Mask> {
    if h < 8 || w < 8 {
        return Err(PlugError::InvalidArgument(format!(
            "canvas {h}x{w} is smaller than 8x8"
        )));
    }
    shape.kind.validate()?;
    Ok(Mask::from_fn(h, w, |r, c| {
        shape.kind.contains(c as f64 + 0.5, r as f64 + 0.5)
    }))
}

/// Samples a random shape of one of the five families, sized for a
/// `size × size` canvas.
pub fn random_shape<R: Rng + ?Sized>(rng: &mut R, size: usize, fill: [f64; 3], depth: u32) -> Shape {
    let s = size as f64;
    let margin = s * 0.12;
    let rmin = s * 0.09;
    let rmax = s * 0.26;
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let kind = match rng.gen_range(0..5) {
        0 => ShapeKind::Ellipse {
            cx,
            cy,
            rx: rng.gen_range(rmin..rmax),
            ry: rng.gen_range(rmin..rmax),
            angle,
        },
        1 => ShapeKind::Rectangle {
            cx,
            cy,
            half_w: rng.gen_range(rmin..rmax),
            half_h: rng.gen_range(rmin..rmax),
            angle,
        },
        2 => {
            let r = rng.gen_range(rmin * 1.3..rmax * 1.2);
            let base = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut points = [[0.0; 2]; 3];
            for (i, p) in points.iter_mut().enumerate() {
                let a = base + i as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.4..0.4);
                *p = [cx + r * a.cos(), cy + r * a.sin()];
            }
            ShapeKind::Triangle { points }
        }
        3 => {
            let n = rng.gen_range(5..=7);
            let r = rng.gen_range(rmin * 1.1..rmax);
            let base = rng.gen_range(0.0..std::f64::consts::TAU);
            let step = std::f64::consts::TAU / n as f64;
            let points = (0..n)
                .map(|i| {
                    let a = base + i as f64 * step + rng.gen_range(-0.25..0.25) * step;
                    let rr = r * rng.gen_range(0.85..1.15);
                    [cx + rr * a.cos(), cy + rr * a.sin()]
                })
                .collect::<Vec<_>>();
            let points = if is_convex(&points) {
                points
            } else {
                (0..n)
                    .map(|i| {
                        let a = base + i as f64 * step;
                        [cx + r * a.cos(), cy + r * a.sin()]
                    })
                    .collect()
            };
            ShapeKind::ConvexPolygon { points }
        }
        _ => {
            let half = rng.gen_range(rmin..rmax);
            let (s_, c_) = angle.sin_cos();
            ShapeKind::Capsule {
                start: [cx - half * c_, cy - half * s_],
                end: [cx + half * c_, cy + half * s_],
                radius: rng.gen_range(rmin * 0.5..rmin * 1.2),
            }
        }
    };
    Shape::new(kind, fill, depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_rectangle_area() {
        let m = rasterize_shape(&Shape::rect(8.0, 8.0, 16.0, 16.0), 64, 64).unwrap();
        assert_eq!(m.count(), 64);
    }

    #[test]
    fn zero_radius_circle_is_rejected() {
        let err = rasterize_shape(&Shape::ellipse(32.0, 32.0, 0.0, 0.0), 64, 64);
        assert!(matches!(err, Err(PlugError::DegenerateShape(_))));
    }

    #[test]
    fn ellipse_matches_brute_force_oracle() {
        // Independent oracle: explicit loop over pixel centers with the
        // closed-form axis-aligned ellipse inequality.
        let (a, b) = (10.0f64, 6.0f64);
        let mut expect = 0;
        for r in 0..64 {
            for c in 0..64 {
                let x = c as f64 + 0.5 - 32.0;
                let y = r as f64 + 0.5 - 32.0;
                if x * x / (a * a) + y * y / (b * b) <= 1.0 {
                    expect += 1;
                }
            }
        }
        let m = rasterize_shape(&Shape::ellipse(32.0, 32.0, a, b), 64, 64).unwrap();
        assert_eq!(m.count(), expect);
        // Sanity: close to the continuous area pi*a*b.
        assert!((expect as f64 - std::f64::consts::PI * a * b).abs() < 20.0);
    }

    #[test]
    fn degenerate_triangle_and_polygon_rejected() {
        let tri = Shape::new(
            ShapeKind::Triangle {
                points: [[0.0, 0.0], [5.0, 5.0], [10.0, 10.0]],
            },
            [1.0; 3],
            0,
        );
        assert!(rasterize_shape(&tri, 16, 16).is_err());
        let concave = Shape::new(
            ShapeKind::ConvexPolygon {
                points: vec![[0.0, 0.0], [10.0, 0.0], [5.0, 2.0], [10.0, 10.0], [0.0, 10.0]],
            },
            [1.0; 3],
            0,
        );
        assert!(rasterize_shape(&concave, 16, 16).is_err());
    }

    #[test]
    fn small_canvas_rejected() {
        assert!(rasterize_shape(&Shape::rect(1.0, 1.0, 3.0, 3.0), 4, 4).is_err());
    }
}
