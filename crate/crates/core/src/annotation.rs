//! Expert polygon annotations: validation, exact area-coverage rasterization
//! under the even-odd rule, and tracing thresholded heatmaps back into
//! polygons.
//!
//! Coordinates are normalized: `(x, y)` in `[0, 1]²`, `x` to the right and
//! `y` downward, matching image layout.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::Heatmap;
use crate::math;
use crate::tensor::Grid;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Point>,
    /// Freehand outlines may cross themselves; that is allowed but reported.
    pub self_intersecting: bool,
}

/// Checks vertex count and bounds. A trailing vertex equal to the first is
/// dropped since the ring is closed implicitly.
pub fn validate_polygon(vertices: &[Point]) -> Result<Polygon> {
    let mut v = vertices.to_vec();
    if v.len() > 1 && v.first() == v.last() {
        v.pop();
    }
    if v.len() < 3 {
        return Err(Error::InvalidPolygon(format!(
            "need at least 3 vertices, got {}",
            v.len()
        )));
    }
    for (i, p) in v.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) || !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
            return Err(Error::InvalidPolygon(format!(
                "vertex {i} ({}, {}) is outside the unit square",
                p[0], p[1]
            )));
        }
    }
    let self_intersecting = has_self_intersection(&v);
    Ok(Polygon {
        vertices: v,
        self_intersecting,
    })
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn has_self_intersection(v: &[Point]) -> bool {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        for j in i + 1..n {
            // Skip edges sharing a vertex.
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (v[j], v[(j + 1) % n]);
            if segments_touch(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

/// Persisted annotation record for one (image, label, round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub image_id: String,
    pub label_index: usize,
    #[serde(rename = "round")]
    pub round_index: u32,
    pub accepted_from_heatmap: bool,
    #[serde(default)]
    pub note: String,
    pub polygons: Vec<Vec<Point>>,
}

impl PolygonAnnotation {
    pub fn validate(&self) -> Result<Vec<Polygon>> {
        self.polygons.iter().map(|p| validate_polygon(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub mask: Grid,
    pub image_id: String,
    pub label_index: usize,
    pub round_index: u32,
    /// Set when no cell is covered.
    pub empty: bool,
}

/// Rasterizes an annotation to `rows × cols` with exact fractional area
/// coverage per cell. Each polygon is filled with the even-odd rule; several
/// polygons combine by per-cell maximum.
pub fn rasterize(annotation: &PolygonAnnotation, rows: usize, cols: usize) -> Result<AttentionMask> {
    let polys = annotation.validate()?;
    let mask = rasterize_polygons(polys.iter().map(|p| p.vertices.as_slice()), rows, cols);
    let empty = mask.data().iter().all(|&v| v <= 0.0);
    Ok(AttentionMask {
        mask,
        image_id: annotation.image_id.clone(),
        label_index: annotation.label_index,
        round_index: annotation.round_index,
        empty,
    })
}

/// Union (per-cell max) of the even-odd coverage of each ring.
pub fn rasterize_polygons<'a, I>(polygons: I, rows: usize, cols: usize) -> Grid
where
    I: IntoIterator<Item = &'a [Point]>,
{
    let mut out = Grid::zeros(rows, cols);
    for ring in polygons {
        let cov = coverage(ring, rows, cols);
        for (o, c) in out.data_mut().iter_mut().zip(cov.data()) {
            if *c > *o {
                *o = *c;
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct Edge {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Edge {
    fn x_at(&self, y: f64) -> f64 {
        let t = (y - self.y0) / (self.y1 - self.y0);
        self.x0 + t * (self.x1 - self.x0)
    }
}

/// Exact even-odd area coverage of one ring, in cell units.
fn coverage(ring: &[Point], rows: usize, cols: usize) -> Grid {
    let mut out = Grid::zeros(rows, cols);
    if ring.len() < 3 || rows == 0 || cols == 0 {
        return out;
    }
    let pts: Vec<Point> = ring.iter().map(|p| [p[0] * cols as f64, p[1] * rows as f64]).collect();
    let n = pts.len();
    let mut edges = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        ys.push(a[1]);
        if a[1] != b[1] {
            edges.push(Edge {
                x0: a[0],
                y0: a[1],
                x1: b[0],
                y1: b[1],
            });
        }
    }
    // Crossing points split slabs so edge order is constant inside each.
    for i in 0..edges.len() {
        for j in i + 1..edges.len() {
            if let Some(y) = crossing_y(&edges[i], &edges[j]) {
                ys.push(y);
            }
        }
    }
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut xs: Vec<(f64, f64, f64)> = Vec::new();
    for w in ys.windows(2) {
        let (y0, y1) = (w[0], w[1]);
        if y1 <= y0 {
            continue;
        }
        let ym = 0.5 * (y0 + y1);
        xs.clear();
        for e in &edges {
            let (lo, hi) = if e.y0 < e.y1 { (e.y0, e.y1) } else { (e.y1, e.y0) };
            if lo < ym && ym < hi {
                xs.push((e.x_at(ym), e.x_at(y0), e.x_at(y1)));
            }
        }
        xs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in xs.chunks_exact(2) {
            let (l, r) = (pair[0], pair[1]);
            fill_trapezoid(&mut out, y0, y1, (l.1, l.2), (r.1, r.2));
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

fn crossing_y(a: &Edge, b: &Edge) -> Option<f64> {
    let (dax, day) = (a.x1 - a.x0, a.y1 - a.y0);
    let (dbx, dby) = (b.x1 - b.x0, b.y1 - b.y0);
    let denom = dax * dby - day * dbx;
    if denom == 0.0 {
        return None;
    }
    let t = ((b.x0 - a.x0) * dby - (b.y0 - a.y0) * dbx) / denom;
    let u = ((b.x0 - a.x0) * day - (b.y0 - a.y0) * dax) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(a.y0 + t * day)
    } else {
        None
    }
}

/// Adds the area of `{y0 <= y <= y1, L(y) <= x <= R(y)}` to each cell, where
/// `L` and `R` are linear in `y` with the given end values.
fn fill_trapezoid(out: &mut Grid, y0: f64, y1: f64, left: (f64, f64), right: (f64, f64)) {
    let (rows, cols) = (out.rows(), out.cols());
    let lerp = |v: (f64, f64), y: f64| v.0 + (v.1 - v.0) * (y - y0) / (y1 - y0);
    let r_start = math::floor(y0).max(0.0) as usize;
    let r_end = (math::ceil(y1) as usize).min(rows);
    for r in r_start..r_end {
        let ya = y0.max(r as f64);
        let yb = y1.min(r as f64 + 1.0);
        if yb <= ya {
            continue;
        }
        let h = yb - ya;
        let (la, lb) = (lerp(left, ya), lerp(left, yb));
        let (ra, rb) = (lerp(right, ya), lerp(right, yb));
        let x_lo = math::floor(la.min(lb)).max(0.0) as usize;
        let x_hi = (math::ceil(ra.max(rb)).max(0.0) as usize).min(cols);
        for c in x_lo..x_hi {
            let (lo, hi) = (c as f64, c as f64 + 1.0);
            let area = clamped_integral(ra, rb, lo, hi, h) - clamped_integral(la, lb, lo, hi, h);
            if area > 0.0 {
                let v = out.get(r, c) + area;
                out.set(r, c, v);
            }
        }
    }
}

/// `∫ clamp(x(t), lo, hi) dt` over a span of length `h` where `x` moves
/// linearly from `x0` to `x1`.
fn clamped_integral(x0: f64, x1: f64, lo: f64, hi: f64, h: f64) -> f64 {
    let mut ts = [0.0, 1.0, 0.0, 0.0];
    let mut n = 2;
    if x0 != x1 {
        for b in [lo, hi] {
            let t = (b - x0) / (x1 - x0);
            if t > 0.0 && t < 1.0 {
                ts[n] = t;
                n += 1;
            }
        }
    }
    let ts = &mut ts[..n];
    ts.sort_by(f64::total_cmp);
    let at = |t: f64| (x0 + t * (x1 - x0)).clamp(lo, hi);
    let mut s = 0.0;
    for w in ts.windows(2) {
        s += (w[1] - w[0]) * 0.5 * (at(w[0]) + at(w[1]));
    }
    s * h
}

/// Soft intersection-over-union `Σ min / Σ max`; two empty masks give 1.
pub fn iou(a: &Grid, b: &Grid) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += x.min(y);
        union += x.max(y);
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

pub const DEFAULT_ACCEPT_THRESHOLD: f64 = 0.5;

/// Traces `{values >= threshold}` into one polygon per 4-connected
/// component. Contours run through cell centres with linear interpolation at
/// the threshold, so a re-rasterized trace follows the original boundary
/// rather than its staircase. Holes are folded into their component's ring
/// through zero-width bridges, which cancel under even-odd filling.
pub fn heatmap_to_polygons(heatmap: &Heatmap, threshold: f64) -> Result<PolygonAnnotation> {
    if heatmap.degenerate {
        return Err(Error::DegenerateHeatmap);
    }
    let polygons = trace_polygons(&heatmap.values, threshold)?;
    Ok(PolygonAnnotation {
        image_id: heatmap.image_id.clone(),
        label_index: heatmap.label_index,
        round_index: heatmap.round_index,
        accepted_from_heatmap: true,
        note: String::new(),
        polygons,
    })
}

/// Iso-contour tracing used by [`heatmap_to_polygons`].
pub fn trace_polygons(values: &Grid, threshold: f64) -> Result<Vec<Vec<Point>>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} not in (0, 1)")));
    }
    let (rows, cols) = values.shape();
    let on: Vec<bool> = values.data().iter().map(|&v| v >= threshold).collect();
    if !on.iter().any(|&b| b) {
        return Err(Error::EmptyThreshold(threshold));
    }
    let labels = label_components(&on, rows, cols);
    let count = labels.iter().flatten().max().map_or(0, |&m| m + 1);
    let mut bounds = vec![(isize::MAX, isize::MAX, isize::MIN, isize::MIN); count];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            let b = &mut bounds[l];
            *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
    }
    let mut polygons = Vec::with_capacity(count);
    for (comp, &(r0, c0, r1, c1)) in bounds.iter().enumerate() {
        // Samples outside the grid and cells of other components read as 0,
        // so every contour of this field belongs to `comp`.
        let field = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
                return 0.0;
            }
            let i = r as usize * cols + c as usize;
            match labels[i] {
                Some(l) if l != comp => 0.0,
                _ => values.data()[i],
            }
        };
        let contour = Contour {
            rows,
            cols,
            threshold,
            field: &field,
        };
        let mut loops: Vec<(f64, Vec<Point>)> = contour
            .loops(r0 - 1, c0 - 1, r1, c1)
            .into_iter()
            .map(tidy)
            .filter(|l| l.len() >= 3)
            .map(|l| (signed_area(&l).abs(), l))
            .collect();
        loops.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut loops = loops.into_iter().map(|(_, l)| l);
        let Some(mut ring) = loops.next() else { continue };
        // One component has a single outer boundary; the rest are holes.
        let anchor = ring[0];
        for hole in loops {
            ring.push(anchor);
            ring.extend_from_slice(&hole);
            ring.push(hole[0]);
        }
        polygons.push(ring);
    }
    Ok(polygons)
}

fn label_components(on: &[bool], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let mut labels = vec![None; on.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            let mut visit = |j: usize| {
                if on[j] && labels[j].is_none() {
                    labels[j] = Some(next);
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
        next += 1;
    }
    labels
}

/// Sample-lattice edge: horizontal from `(r, c)` to `(r, c + 1)` or vertical
/// from `(r, c)` to `(r + 1, c)`.
type EdgeKey = (bool, isize, isize);

/// Marching squares over cell-centre samples.
struct Contour<'a> {
    rows: usize,
    cols: usize,
    threshold: f64,
    field: &'a dyn Fn(isize, isize) -> f64,
}

impl Contour<'_> {
    /// Sample position; the padding ring sits on the image border.
    fn position(&self, r: isize, c: isize) -> Point {
        let x = ((c as f64 + 0.5) / self.cols as f64).clamp(0.0, 1.0);
        let y = ((r as f64 + 0.5) / self.rows as f64).clamp(0.0, 1.0);
        [x, y]
    }

    fn inside(&self, r: isize, c: isize) -> bool {
        (self.field)(r, c) >= self.threshold
    }

    fn crossing(&self, (horizontal, r, c): EdgeKey) -> Point {
        let (r2, c2) = if horizontal { (r, c + 1) } else { (r + 1, c) };
        let (f0, f1) = ((self.field)(r, c), (self.field)(r2, c2));
        let t = ((self.threshold - f0) / (f1 - f0)).clamp(0.0, 1.0);
        let (a, b) = (self.position(r, c), self.position(r2, c2));
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Closed contours over the squares whose top-left sample lies in
    /// `[r0, r1] × [c0, c1]`. Each segment runs from an entry crossing to the
    /// next exit clockwise round its square, so saddles keep diagonal
    /// samples apart.
    fn loops(&self, r0: isize, c0: isize, r1: isize, c1: isize) -> Vec<Vec<Point>> {
        let mut next: BTreeMap<EdgeKey, EdgeKey> = BTreeMap::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                let corners = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)];
                let edges = [(true, r, c), (false, r, c + 1), (true, r + 1, c), (false, r, c)];
                let inside = corners.map(|(a, b)| self.inside(a, b));
                let mut crossings = Vec::with_capacity(4);
                for i in 0..4 {
                    let (from, to) = (inside[i], inside[(i + 1) % 4]);
                    if from != to {
                        crossings.push((to, edges[i]));
                    }
                }
                for (j, &(entry, key)) in crossings.iter().enumerate() {
                    if !entry {
                        continue;
                    }
                    let n = crossings.len();
                    let exit = (1..n).map(|d| crossings[(j + d) % n]).find(|x| !x.0).expect("crossings pair up");
                    next.insert(key, exit.1);
                }
            }
        }
        let mut loops = Vec::new();
        while let Some((&start, _)) = next.iter().next() {
            let mut lp = Vec::new();
            let mut key = start;
            while let Some(k) = next.remove(&key) {
                lp.push(self.crossing(key));
                key = k;
            }
            loops.push(lp);
        }
        loops
    }
}

/// Drops repeated and collinear vertices.
fn tidy(lp: Vec<Point>) -> Vec<Point> {
    let mut v: Vec<Point> = Vec::with_capacity(lp.len());
    for p in lp {
        if v.last() != Some(&p) {
            v.push(p);
        }
    }
    while v.len() > 1 && v.first() == v.last() {
        v.pop();
    }
    let mut changed = true;
    while changed && v.len() >= 3 {
        changed = false;
        let n = v.len();
        let keep: Vec<bool> = (0..n)
            .map(|i| {
                let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
                orient(a, b, c).abs() > 1e-12
            })
            .collect();
        if keep.iter().any(|k| !k) {
            // Remove one vertex per pass so neighbours are re-evaluated.
            let i = keep.iter().position(|k| !k).unwrap_or(0);
            v.remove(i);
            changed = true;
        }
    }
    v
}

fn signed_area(lp: &[Point]) -> f64 {
    let n = lp.len();
    (0..n).map(|i| lp[i][0] * lp[(i + 1) % n][1] - lp[(i + 1) % n][0] * lp[i][1]).sum::<f64>() / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(polys: Vec<Vec<Point>>) -> PolygonAnnotation {
        PolygonAnnotation {
            image_id: "img".into(),
            label_index: 0,
            round_index: 0,
            accepted_from_heatmap: false,
            note: String::new(),
            polygons: polys,
        }
    }

    #[test]
    fn validate_examples() {
        let tri = validate_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(tri.vertices.len(), 3);
        assert!(!tri.self_intersecting);
        assert!(validate_polygon(&[[0.0, 0.0], [1.0, 1.0]]).is_err());
        assert!(validate_polygon(&[[0.0, 0.0], [1.2, 0.5], [1.0, 1.0]]).is_err());
        let bow = validate_polygon(&[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(bow.self_intersecting);
        let closed = validate_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(closed.vertices.len(), 3);
    }

    #[test]
    fn full_square_covers_everything() {
        let m = rasterize(&ann(vec![vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]]), 2, 2).unwrap();
        assert_eq!(m.mask.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(!m.empty);
    }

    #[test]
    fn left_half() {
        let m = rasterize(&ann(vec![vec![[0.0, 0.0], [0.5, 0.0], [0.5, 1.0], [0.0, 1.0]]]), 2, 2).unwrap();
        assert_eq!(m.mask.to_rows(), vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn empty_list_is_flagged() {
        let m = rasterize(&ann(vec![]), 3, 3).unwrap();
        assert!(m.empty);
        assert!(m.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn triangle_half_cell() {
        let m = rasterize(&ann(vec![vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]), 1, 1).unwrap();
        assert!((m.mask.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bowtie_even_odd_area() {
        // Two triangles meeting at the centre, each of area 1/4.
        let m = rasterize(&ann(vec![vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]]), 1, 1).unwrap();
        assert!((m.mask.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nested_ring_leaves_hole_under_even_odd() {
        // Outer square then inner square in one ring via a bridge.
        let ring = vec![
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 1.0],
            [0.0, 0.0],
            [0.25, 0.25],
            [0.75, 0.25],
            [0.75, 0.75],
            [0.25, 0.75],
            [0.25, 0.25],
        ];
        let m = rasterize(&ann(vec![ring]), 4, 4).unwrap();
        assert!((m.mask.get(1, 1)).abs() < 1e-12);
        assert!((m.mask.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((m.mask.sum() - 12.0).abs() < 1e-9);
    }

    fn heat(values: Grid) -> Heatmap {
        Heatmap {
            image_id: "h".into(),
            label_index: 1,
            round_index: 2,
            raw: values.clone(),
            values,
            degenerate: false,
        }
    }

    fn thresholded(g: &Grid) -> Grid {
        let (rows, cols) = g.shape();
        Grid::from_vec(rows, cols, g.data().iter().map(|&v| f64::from(v >= 0.5)).collect()).unwrap()
    }

    #[test]
    fn square_blob_traces_to_one_bounding_polygon() {
        let mut g = Grid::zeros(10, 10);
        for r in 2..7 {
            for c in 3..8 {
                g.set(r, c, 0.9);
            }
        }
        g.set(0, 0, 0.2);
        let a = heatmap_to_polygons(&heat(g.clone()), 0.5).unwrap();
        assert!(a.accepted_from_heatmap);
        assert_eq!((a.label_index, a.round_index), (1, 2));
        assert_eq!(a.polygons.len(), 1);
        let span = |axis: usize| {
            let v = a.polygons[0].iter().map(|p| p[axis]);
            (v.clone().fold(f64::MAX, f64::min), v.fold(f64::MIN, f64::max))
        };
        // Contours cross 4/9 of a cell outward from the blob's edge centres.
        let reach = 4.0 / 9.0;
        let (x0, x1) = span(0);
        assert!((x0 - (3.5 - reach) / 10.0).abs() < 1e-12 && (x1 - (7.5 + reach) / 10.0).abs() < 1e-12);
        let (y0, y1) = span(1);
        assert!((y0 - (2.5 - reach) / 10.0).abs() < 1e-12 && (y1 - (6.5 + reach) / 10.0).abs() < 1e-12);
        let back = rasterize(&a, 10, 10).unwrap();
        assert!(iou(&back.mask, &thresholded(&g)).unwrap() >= 0.9);
    }

    #[test]
    fn two_blobs_two_polygons() {
        let mut g = Grid::zeros(6, 6);
        g.set(0, 0, 1.0);
        g.set(0, 1, 1.0);
        g.set(4, 4, 0.8);
        let a = heatmap_to_polygons(&heat(g), 0.5).unwrap();
        assert_eq!(a.polygons.len(), 2);
    }

    #[test]
    fn diagonal_cells_are_separate_components() {
        let g = Grid::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let a = heatmap_to_polygons(&heat(g.clone()), 0.5).unwrap();
        assert_eq!(a.polygons.len(), 2);
        let back = rasterize(&a, 2, 2).unwrap().mask;
        assert!(back.get(0, 0) > back.get(0, 1) && back.get(1, 1) > back.get(1, 0));
    }

    #[test]
    fn ring_with_hole_keeps_the_hole() {
        let mut g = Grid::filled(16, 16, 1.0);
        for r in 6..10 {
            for c in 6..10 {
                g.set(r, c, 0.0);
            }
        }
        let a = heatmap_to_polygons(&heat(g.clone()), 0.5).unwrap();
        assert_eq!(a.polygons.len(), 1);
        let back = rasterize(&a, 16, 16).unwrap().mask;
        assert!(back.get(8, 8) < 1e-12);
        assert!(iou(&back, &g).unwrap() >= 0.9);
    }

    #[test]
    fn sharp_boundary_round_trips_closely() {
        let a = PolygonAnnotation {
            image_id: "x".into(),
            label_index: 0,
            round_index: 0,
            accepted_from_heatmap: false,
            note: String::new(),
            polygons: vec![vec![[0.2, 0.15], [0.83, 0.3], [0.6, 0.9], [0.25, 0.7]]],
        };
        let m = rasterize(&a, 64, 64).unwrap().mask;
        let traced = trace_polygons(&m, 0.5).unwrap();
        let back = rasterize_polygons(traced.iter().map(Vec::as_slice), 64, 64);
        assert!(iou(&back, &m).unwrap() >= 0.97);
    }

    #[test]
    fn below_threshold_and_degenerate_errors() {
        assert_eq!(
            heatmap_to_polygons(&heat(Grid::filled(3, 3, 0.1)), 0.5),
            Err(Error::EmptyThreshold(0.5))
        );
        let mut h = heat(Grid::zeros(3, 3));
        h.degenerate = true;
        assert_eq!(heatmap_to_polygons(&h, 0.5), Err(Error::DegenerateHeatmap));
    }
}
