//! Planar geometry: points, segments and constructive-geometry domains.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Inclusive tolerance used by closed-set membership tests.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1]
}

/// Twice the signed area of the triangle (a, b, c); positive when counter-clockwise.
#[inline]
pub fn orient2(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Exact Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Constructive-geometry description of a planar domain.
#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    Disk { center: Point, radius: f64 },
    Rect { min: Point, max: Point },
    Union(Box<Domain>, Box<Domain>),
    Difference(Box<Domain>, Box<Domain>),
}

impl Domain {
    pub fn disk(center: Point, radius: f64) -> Self {
        Domain::Disk { center, radius }
    }

    pub fn rect(min: Point, max: Point) -> Self {
        Domain::Rect { min, max }
    }

    pub fn union(self, other: Domain) -> Self {
        Domain::Union(Box::new(self), Box::new(other))
    }

    pub fn difference(self, other: Domain) -> Self {
        Domain::Difference(Box::new(self), Box::new(other))
    }

    /// Unit disk minus B((-0.75, 0), 0.7).
    pub fn crescent() -> Self {
        Domain::disk([0.0, 0.0], 1.0).difference(Domain::disk([-0.75, 0.0], 0.7))
    }

    /// (-2, 2) x (-1.5, 1.5) minus the two rectangles [-0.75, 0.75] x [0.5, 1.5] and
    /// [-0.75, 0.75] x [-1.5, -0.5].
    pub fn slotted_rectangle() -> Self {
        Domain::rect([-2.0, -1.5], [2.0, 1.5])
            .difference(Domain::rect([-0.75, 0.5], [0.75, 1.5]))
            .difference(Domain::rect([-0.75, -1.5], [0.75, -0.5]))
    }

    pub fn unit_disk() -> Self {
        Domain::disk([0.0, 0.0], 1.0)
    }

    /// Unit disk minus the square [-0.4, 0.4]^2.
    pub fn holed_disk() -> Self {
        Domain::unit_disk().difference(Domain::rect([-0.4, -0.4], [0.4, 0.4]))
    }

    /// Membership in the closure of the domain (boundary counts as inside).
    pub fn contains(&self, x: Point) -> bool {
        match self {
            Domain::Disk { center, radius } => dist(x, *center) <= radius + BOUNDARY_TOL,
            Domain::Rect { min, max } => {
                x[0] >= min[0] - BOUNDARY_TOL
                    && x[0] <= max[0] + BOUNDARY_TOL
                    && x[1] >= min[1] - BOUNDARY_TOL
                    && x[1] <= max[1] + BOUNDARY_TOL
            }
            Domain::Union(a, b) => a.contains(x) || b.contains(x),
            Domain::Difference(a, b) => a.contains(x) && !b.contains_open(x),
        }
    }

    /// Membership in the interior of the domain.
    pub fn contains_open(&self, x: Point) -> bool {
        match self {
            Domain::Disk { center, radius } => dist(x, *center) < radius - BOUNDARY_TOL,
            Domain::Rect { min, max } => {
                x[0] > min[0] + BOUNDARY_TOL
                    && x[0] < max[0] - BOUNDARY_TOL
                    && x[1] > min[1] + BOUNDARY_TOL
                    && x[1] < max[1] - BOUNDARY_TOL
            }
            Domain::Union(a, b) => a.contains_open(x) || b.contains_open(x),
            Domain::Difference(a, b) => a.contains_open(x) && !b.contains(x),
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bbox(&self) -> (Point, Point) {
        match self {
            Domain::Disk { center, radius } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
            Domain::Rect { min, max } => (*min, *max),
            Domain::Union(a, b) => {
                let (amin, amax) = a.bbox();
                let (bmin, bmax) = b.bbox();
                (
                    [amin[0].min(bmin[0]), amin[1].min(bmin[1])],
                    [amax[0].max(bmax[0]), amax[1].max(bmax[1])],
                )
            }
            Domain::Difference(a, _) => a.bbox(),
        }
    }

    /// Points on the boundary of the domain with consecutive spacing at most `spacing`
    /// along each primitive arc or edge. Every returned point lies on the boundary up to
    /// rounding of the trigonometric parametrization.
    pub fn boundary_samples(&self, spacing: f64) -> Vec<Point> {
        assert!(spacing > 0.0, "boundary spacing must be positive");
        match self {
            Domain::Disk { center, radius } => {
                let n = ((2.0 * PI * radius / spacing).ceil() as usize).max(8);
                (0..n)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / n as f64;
                        [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                    })
                    .collect()
            }
            Domain::Rect { min, max } => {
                let corners = [*min, [max[0], min[1]], *max, [min[0], max[1]]];
                let mut out = Vec::new();
                for e in 0..4 {
                    let a = corners[e];
                    let b = corners[(e + 1) % 4];
                    let n = ((dist(a, b) / spacing).ceil() as usize).max(1);
                    for k in 0..n {
                        let t = k as f64 / n as f64;
                        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                    }
                }
                out
            }
            Domain::Union(a, b) => {
                let mut out: Vec<Point> = a
                    .boundary_samples(spacing)
                    .into_iter()
                    .filter(|&p| !b.contains_open(p))
                    .collect();
                out.extend(
                    b.boundary_samples(spacing)
                        .into_iter()
                        .filter(|&p| !a.contains_open(p)),
                );
                out
            }
            Domain::Difference(a, b) => {
                let mut out: Vec<Point> = a
                    .boundary_samples(spacing)
                    .into_iter()
                    .filter(|&p| !b.contains_open(p))
                    .collect();
                out.extend(
                    b.boundary_samples(spacing)
                        .into_iter()
                        .filter(|&p| a.contains(p)),
                );
                out
            }
        }
    }

    /// Area of the domain by midpoint quadrature on a 2000 x 2000 grid over the bounding
    /// box. Exact closed forms are used for bare primitives.
    pub fn area(&self) -> f64 {
        match self {
            Domain::Disk { radius, .. } => PI * radius * radius,
            Domain::Rect { min, max } => (max[0] - min[0]) * (max[1] - min[1]),
            _ => {
                const N: usize = 2000;
                let (lo, hi) = self.bbox();
                let dx = (hi[0] - lo[0]) / N as f64;
                let dy = (hi[1] - lo[1]) / N as f64;
                let mut count = 0usize;
                for i in 0..N {
                    let x = lo[0] + (i as f64 + 0.5) * dx;
                    for j in 0..N {
                        let y = lo[1] + (j as f64 + 0.5) * dy;
                        if self.contains([x, y]) {
                            count += 1;
                        }
                    }
                }
                count as f64 * dx * dy
            }
        }
    }

    fn primitives<'a>(&'a self, out: &mut Vec<&'a Domain>) {
        match self {
            Domain::Disk { .. } | Domain::Rect { .. } => out.push(self),
            Domain::Union(a, b) | Domain::Difference(a, b) => {
                a.primitives(out);
                b.primitives(out);
            }
        }
    }

    /// Nearest point of the boundary of the domain to `x`.
    ///
    /// Candidates are the projections of `x` onto every primitive boundary together with
    /// the corners and pairwise intersection points of the primitive boundaries; the
    /// nearest candidate lying on the boundary of the whole domain wins.
    pub fn closest_boundary_point(&self, x: Point) -> Option<Point> {
        let mut prims = Vec::new();
        self.primitives(&mut prims);
        let mut candidates = Vec::new();
        for (i, p) in prims.iter().enumerate() {
            candidates.push(project_on_primitive(p, x));
            if let Domain::Rect { min, max } = p {
                candidates.extend([*min, [max[0], min[1]], *max, [min[0], max[1]]]);
            }
            for q in &prims[i + 1..] {
                candidates.extend(primitive_intersections(p, q));
            }
        }
        candidates
            .into_iter()
            .filter(|&c| self.contains(c) && !self.contains_open(c))
            .min_by(|a, b| dist2(*a, x).total_cmp(&dist2(*b, x)))
    }

    /// Largest distance between two points of the bounding box (upper bound of diam).
    pub fn diameter_bound(&self) -> f64 {
        let (lo, hi) = self.bbox();
        dist(lo, hi)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Disk { center, radius } => {
                write!(f, "disk({},{},{})", center[0], center[1], radius)
            }
            Domain::Rect { min, max } => {
                write!(f, "rect({},{},{},{})", min[0], min[1], max[0], max[1])
            }
            Domain::Union(a, b) => write!(f, "union({a},{b})"),
            Domain::Difference(a, b) => write!(f, "diff({a},{b})"),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut parser = DescriptorParser {
            src: compact.as_bytes(),
            pos: 0,
        };
        let d = parser.domain()?;
        if parser.pos != parser.src.len() {
            return Err(Error::Domain(format!(
                "trailing input at offset {} in {s:?}",
                parser.pos
            )));
        }
        Ok(d)
    }
}

fn project_on_primitive(p: &Domain, x: Point) -> Point {
    match p {
        Domain::Disk { center, radius } => {
            let d = sub(x, *center);
            let n = norm(d);
            if n == 0.0 {
                [center[0] + radius, center[1]]
            } else {
                [center[0] + radius * d[0] / n, center[1] + radius * d[1] / n]
            }
        }
        Domain::Rect { min, max } => {
            let c = [x[0].clamp(min[0], max[0]), x[1].clamp(min[1], max[1])];
            if c != x {
                return c;
            }
            // inside: move to the nearest edge
            let gaps = [x[0] - min[0], max[0] - x[0], x[1] - min[1], max[1] - x[1]];
            let k = (0..4).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap();
            match k {
                0 => [min[0], x[1]],
                1 => [max[0], x[1]],
                2 => [x[0], min[1]],
                _ => [x[0], max[1]],
            }
        }
        _ => unreachable!("composite domains are not primitives"),
    }
}

fn rect_edges(min: Point, max: Point) -> [(Point, Point); 4] {
    let c = [min, [max[0], min[1]], max, [min[0], max[1]]];
    [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
}

fn circle_segment_intersections(center: Point, r: f64, a: Point, b: Point) -> Vec<Point> {
    let d = sub(b, a);
    let f = sub(a, center);
    let qa = dot(d, d);
    let qb = 2.0 * dot(f, d);
    let qc = dot(f, f) - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 || qa == 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    [(-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa)]
        .into_iter()
        .filter(|t| (0.0..=1.0).contains(t))
        .map(|t| [a[0] + t * d[0], a[1] + t * d[1]])
        .collect()
}

fn primitive_intersections(p: &Domain, q: &Domain) -> Vec<Point> {
    match (p, q) {
        (Domain::Disk { center: c1, radius: r1 }, Domain::Disk { center: c2, radius: r2 }) => {
            let d = dist(*c1, *c2);
            if d == 0.0 || d > r1 + r2 || d < (r1 - r2).abs() {
                return Vec::new();
            }
            let a = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d);
            let h = (r1 * r1 - a * a).max(0.0).sqrt();
            let u = [(c2[0] - c1[0]) / d, (c2[1] - c1[1]) / d];
            let m = [c1[0] + a * u[0], c1[1] + a * u[1]];
            vec![[m[0] - h * u[1], m[1] + h * u[0]], [m[0] + h * u[1], m[1] - h * u[0]]]
        }
        (Domain::Disk { center, radius }, Domain::Rect { min, max })
        | (Domain::Rect { min, max }, Domain::Disk { center, radius }) => rect_edges(*min, *max)
            .iter()
            .flat_map(|&(a, b)| circle_segment_intersections(*center, *radius, a, b))
            .collect(),
        (Domain::Rect { min: a0, max: a1 }, Domain::Rect { min: b0, max: b1 }) => {
            let mut out = Vec::new();
            for &(p0, p1) in &rect_edges(*a0, *a1) {
                for &(q0, q1) in &rect_edges(*b0, *b1) {
                    // axis-aligned edges: intersect a horizontal with a vertical one
                    let (h, v) = if p0[1] == p1[1] && q0[0] == q1[0] {
                        ((p0, p1), (q0, q1))
                    } else if p0[0] == p1[0] && q0[1] == q1[1] {
                        ((q0, q1), (p0, p1))
                    } else {
                        continue;
                    };
                    let x = v.0[0];
                    let y = h.0[1];
                    let in_h = x >= h.0[0].min(h.1[0]) && x <= h.0[0].max(h.1[0]);
                    let in_v = y >= v.0[1].min(v.1[1]) && y <= v.0[1].max(v.1[1]);
                    if in_h && in_v {
                        out.push([x, y]);
                    }
                }
            }
            out
        }
        _ => Vec::new(),
    }
}

struct DescriptorParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl DescriptorParser<'_> {
    fn domain(&mut self) -> Result<Domain> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        self.expect(b'(')?;
        let d = match name {
            "disk" => {
                let v = self.numbers(3)?;
                if v[2] <= 0.0 {
                    return Err(Error::Domain("disk radius must be positive".into()));
                }
                Domain::disk([v[0], v[1]], v[2])
            }
            "rect" => {
                let v = self.numbers(4)?;
                if v[2] <= v[0] || v[3] <= v[1] {
                    return Err(Error::Domain("rect corners must be ordered".into()));
                }
                Domain::rect([v[0], v[1]], [v[2], v[3]])
            }
            "union" | "diff" => {
                let a = self.domain()?;
                self.expect(b',')?;
                let b = self.domain()?;
                if name == "union" {
                    a.union(b)
                } else {
                    a.difference(b)
                }
            }
            other => return Err(Error::Domain(format!("unknown primitive {other:?}"))),
        };
        self.expect(b')')?;
        Ok(d)
    }

    fn numbers(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                self.expect(b',')?;
            }
            let start = self.pos;
            while self.pos < self.src.len() && !matches!(self.src[self.pos], b',' | b')') {
                self.pos += 1;
            }
            let tok = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Domain(format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::Domain(format!("non-finite number {tok:?}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "expected {:?} at offset {}",
                c as char, self.pos
            )))
        }
    }
}
