//! Rasterisation of "glyph creatures": a torso, a head and legs drawn from
//! small style vocabularies. Each part is a union of primitives tested at
//! pixel centres, so masks are exact.

use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Prim {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Diamond { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle([(f64, f64); 3]),
    Segment { a: (f64, f64), b: (f64, f64), half_width: f64 },
}

impl Prim {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Prim::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Prim::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Prim::Diamond { cx, cy, rx, ry } => ((x - cx) / rx).abs() + ((y - cy) / ry).abs() <= 1.0,
            Prim::Triangle(p) => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d1, d2, d3) = (cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0]));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Prim::Segment { a, b, half_width } => {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (a.0 + t * vx - x, a.1 + t * vy - y);
                px * px + py * py <= half_width * half_width
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Prim::Ellipse { cx, cy, rx, ry } | Prim::Diamond { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Prim::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Prim::Triangle(p) => {
                let xs = p.map(|q| q.0);
                let ys = p.map(|q| q.1);
                (
                    xs.iter().copied().fold(f64::INFINITY, f64::min),
                    ys.iter().copied().fold(f64::INFINITY, f64::min),
                    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            }
            Prim::Segment { a, b, half_width } => (
                a.0.min(b.0) - half_width,
                a.1.min(b.1) - half_width,
                a.0.max(b.0) + half_width,
                a.1.max(b.1) + half_width,
            ),
        }
    }

    fn translated(self, dx: f64, dy: f64) -> Prim {
        let t = |p: (f64, f64)| (p.0 + dx, p.1 + dy);
        match self {
            Prim::Ellipse { cx, cy, rx, ry } => Prim::Ellipse { cx: cx + dx, cy: cy + dy, rx, ry },
            Prim::Diamond { cx, cy, rx, ry } => Prim::Diamond { cx: cx + dx, cy: cy + dy, rx, ry },
            Prim::Rect { x0, y0, x1, y1 } => Prim::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
            Prim::Triangle(p) => Prim::Triangle(p.map(t)),
            Prim::Segment { a, b, half_width } => Prim::Segment {
                a: t(a),
                b: t(b),
                half_width,
            },
        }
    }
}

/// Part roles the renderer knows how to draw, with their style vocabularies.
pub const PART_STYLES: &[(&str, &[&str])] = &[
    ("head", &["round", "square", "triangle"]),
    ("torso", &["oval", "box", "diamond"]),
    ("leg", &["straight", "quad", "splayed"]),
];

/// Paint order: later parts occlude earlier ones.
fn paint_rank(part: &str) -> usize {
    match part {
        "leg" => 0,
        "torso" => 1,
        _ => 2,
    }
}

pub(crate) fn known_styles(part: &str) -> Option<&'static [&'static str]> {
    PART_STYLES.iter().find(|(p, _)| *p == part).map(|(_, s)| *s)
}

/// A part laid out in creature-local coordinates (torso centre at origin).
pub(crate) struct PartShape {
    pub concept: usize,
    pub prims: Vec<Prim>,
    pub color: [u8; 3],
    rank: usize,
}

pub(crate) struct Pose {
    pub scale: f64,
    pub facing: f64,
}

fn part_prims(part: &str, style: &str, pose: &Pose) -> Vec<Prim> {
    let s = pose.scale;
    let (tw, th) = (11.0 * s, 6.5 * s);
    match part {
        "torso" => match style {
            "oval" => vec![Prim::Ellipse { cx: 0.0, cy: 0.0, rx: tw, ry: th }],
            "box" => vec![Prim::Rect {
                x0: -0.92 * tw,
                y0: -th,
                x1: 0.92 * tw,
                y1: th,
            }],
            _ => vec![Prim::Diamond {
                cx: 0.0,
                cy: 0.0,
                rx: 1.05 * tw,
                ry: 1.25 * th,
            }],
        },
        "head" => {
            let r = 6.0 * s;
            let (hx, hy) = (pose.facing * (tw + 0.35 * r), -th - 0.2 * r);
            match style {
                "round" => vec![Prim::Ellipse { cx: hx, cy: hy, rx: r, ry: r }],
                "square" => vec![Prim::Rect {
                    x0: hx - 0.85 * r,
                    y0: hy - 0.85 * r,
                    x1: hx + 0.85 * r,
                    y1: hy + 0.85 * r,
                }],
                _ => vec![Prim::Triangle([
                    (hx, hy - 1.15 * r),
                    (hx - 1.05 * r, hy + 0.85 * r),
                    (hx + 1.05 * r, hy + 0.85 * r),
                ])],
            }
        }
        _ => {
            let (top, len, hw) = (th - 1.5 * s, 10.5 * s, 1.4 * s);
            let leg = |x0: f64, x1: f64, hw: f64| Prim::Segment {
                a: (x0, top),
                b: (x1, top + len),
                half_width: hw,
            };
            match style {
                "straight" => vec![leg(-0.55 * tw, -0.55 * tw, hw), leg(0.55 * tw, 0.55 * tw, hw)],
                "quad" => [-0.8, -0.3, 0.3, 0.8]
                    .iter()
                    .map(|f| leg(f * tw, f * tw, 0.75 * hw))
                    .collect(),
                _ => vec![leg(-0.35 * tw, -0.95 * tw, hw), leg(0.35 * tw, 0.95 * tw, hw)],
            }
        }
    }
}

pub(crate) fn random_color<R: Rng>(rng: &mut R) -> [u8; 3] {
    let hue: f64 = rng.gen_range(0.0..6.0);
    let sat: f64 = rng.gen_range(0.55..1.0);
    let val: f64 = rng.gen_range(0.65..1.0);
    let c = val * sat;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let m = val - c;
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|v| ((v + m) * 255.0).round() as u8)
}

/// Lay out every drawn part, translate into the canvas, and return the
/// per-pixel owner (index into `parts`) after painting in occlusion order.
pub(crate) fn layout<R: Rng>(
    rng: &mut R,
    size: usize,
    parts: &[(usize, &str, &str)],
) -> (Vec<PartShape>, Vec<Option<usize>>) {
    let unit = size as f64 / 64.0;
    let pose = Pose {
        scale: unit * rng.gen_range(1.25..1.55),
        facing: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
    };
    let mut shapes: Vec<PartShape> = parts
        .iter()
        .map(|&(concept, part, style)| PartShape {
            concept,
            prims: part_prims(part, style, &pose),
            color: random_color(rng),
            rank: paint_rank(part),
        })
        .collect();
    shapes.sort_by_key(|p| (p.rank, p.concept));

    let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in shapes.iter().flat_map(|s| &s.prims) {
        let b = p.bbox();
        bb = (bb.0.min(b.0), bb.1.min(b.1), bb.2.max(b.2), bb.3.max(b.3));
    }
    let margin = 1.0;
    let mut span = |lo: f64, hi: f64| {
        let min = margin - lo;
        let max = size as f64 - margin - hi;
        if max > min {
            rng.gen_range(min..max)
        } else {
            (min + max) / 2.0
        }
    };
    let dx = span(bb.0, bb.2);
    let dy = span(bb.1, bb.3);
    for s in &mut shapes {
        for p in &mut s.prims {
            *p = p.translated(dx, dy);
        }
    }

    let mut owner = vec![None; size * size];
    for (idx, s) in shapes.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if s.prims.iter().any(|p| p.contains(px, py)) {
                    owner[y * size + x] = Some(idx);
                }
            }
        }
    }
    (shapes, owner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_contain_their_centres() {
        let prims = [
            Prim::Ellipse { cx: 5.0, cy: 5.0, rx: 2.0, ry: 1.0 },
            Prim::Rect { x0: 0.0, y0: 0.0, x1: 2.0, y1: 2.0 },
            Prim::Diamond { cx: 1.0, cy: 1.0, rx: 1.0, ry: 1.0 },
            Prim::Triangle([(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]),
            Prim::Segment { a: (0.0, 0.0), b: (4.0, 4.0), half_width: 0.5 },
        ];
        for p in prims {
            let b = p.bbox();
            let c = ((b.0 + b.2) / 2.0, (b.1 + b.3) / 2.0);
            let probe = if let Prim::Triangle(_) = p { (1.0, 1.0) } else { c };
            assert!(p.contains(probe.0, probe.1), "{p:?}");
            assert!(!p.contains(b.2 + 1.0, b.3 + 1.0), "{p:?}");
        }
    }

    #[test]
    fn every_style_renders_inside_canvas() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (part, styles) in PART_STYLES {
            for style in *styles {
                let (shapes, owner) = layout(&mut rng, 64, &[(0, part, style)]);
                assert_eq!(shapes.len(), 1);
                let n = owner.iter().filter(|o| o.is_some()).count();
                assert!(n > 20, "{part}/{style} drew {n} pixels");
            }
        }
    }
}
