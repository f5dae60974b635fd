//! Yaw-oriented 3D boxes: exact rotated IoU, containment, volume, NMS and
//! the one-box-per-line text format.
//!
//! A box is `(x, y, z, w, h, l, yaw)`: center, extents along the box's
//! local x/y/z axes, and a rotation about the world z axis. Yaw-only
//! rotation keeps footprints convex, so the 3D overlap factorizes into a
//! 2D polygon-clipped footprint intersection times the vertical overlap.

use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum BoxError {
    NonPositiveSize { size: [f64; 3] },
    Parse { line: usize, detail: String },
}

impl fmt::Display for BoxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxError::NonPositiveSize { size } => {
                write!(f, "box extents must be positive, got {size:?}")
            }
            BoxError::Parse { line, detail } => write!(f, "box line {line}: {detail}"),
        }
    }
}

impl std::error::Error for BoxError {}

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let wrapped = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped == -PI {
        PI
    } else {
        wrapped
    }
}

/// 7-DoF yaw-oriented box with optional class label and score.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedBox {
    pub center: [f64; 3],
    /// Extents along the box's local x/y/z axes (w, h, l in file order).
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: Option<usize>,
    pub score: Option<f64>,
}

impl OrientedBox {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, BoxError> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(BoxError::NonPositiveSize { size });
        }
        Ok(OrientedBox {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id: None,
            score: None,
        })
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Point membership: rotate by `-yaw` about the center and compare with
    /// the half extents.
    pub fn contains(&self, point: [f64; 3]) -> bool {
        let dx = point[0] - self.center[0];
        let dy = point[1] - self.center[1];
        let dz = point[2] - self.center[2];
        let (cos, sin) = (self.yaw.cos(), self.yaw.sin());
        let local_x = cos * dx + sin * dy;
        let local_y = -sin * dx + cos * dy;
        local_x.abs() <= self.size[0] / 2.0
            && local_y.abs() <= self.size[1] / 2.0
            && dz.abs() <= self.size[2] / 2.0
    }

    /// Footprint corners in the xy-plane, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (cos, sin) = (self.yaw.cos(), self.yaw.sin());
        let hx = self.size[0] / 2.0;
        let hy = self.size[1] / 2.0;
        let mut corners = [[0.0; 2]; 4];
        for (i, (sx, sy)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .iter()
            .enumerate()
        {
            let lx = sx * hx;
            let ly = sy * hy;
            corners[i] = [
                self.center[0] + cos * lx - sin * ly,
                self.center[1] + sin * lx + cos * ly,
            ];
        }
        corners
    }

    fn z_interval(&self) -> (f64, f64) {
        let half = self.size[2] / 2.0;
        (self.center[2] - half, self.center[2] + half)
    }
}

/// Shoelace area of a convex polygon (counter-clockwise positive).
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc * 0.5
}

/// Sutherland-Hodgman clip of a convex polygon by the half-plane on the
/// left of edge `a -> b`.
fn clip_by_edge(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let (sc, sn) = (side(cur), side(next));
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push([
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ]);
        }
    }
    out
}

/// Intersection area of two convex counter-clockwise polygons.
pub fn convex_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.to_vec();
    for i in 0..b.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_by_edge(&poly, b[i], b[(i + 1) % b.len()]);
    }
    polygon_area(&poly).max(0.0)
}

/// Exact rotated 3D IoU: polygon-clipped footprint overlap times vertical
/// overlap, over the union volume. Symmetric in its arguments.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (az0, az1) = a.z_interval();
    let (bz0, bz1) = b.z_interval();
    let vertical = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    if vertical == 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.footprint(), &b.footprint());
    let inter = area * vertical;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy per-class non-maximum suppression. Boxes are visited in
/// descending score order (ties broken by lower input index); a box is
/// kept iff its IoU with every kept box of the same class is below the
/// threshold. Returns indices into the input, in visit order.
pub fn nms(boxes: &[OrientedBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        let si = boxes[i].score.unwrap_or(0.0);
        let sj = boxes[j].score.unwrap_or(0.0);
        sj.partial_cmp(&si).unwrap().then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| {
            boxes[i].class_id == boxes[j].class_id
                && rotated_iou(&boxes[i], &boxes[j]) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Default NMS IoU threshold, configurable at the call sites.
pub const DEFAULT_NMS_IOU: f64 = 0.25;

/// Render one box as `x y z w h l yaw label [score]`.
pub fn format_box_line(b: &OrientedBox) -> String {
    let mut line = format!(
        "{} {} {} {} {} {} {} {}",
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0],
        b.size[1],
        b.size[2],
        b.yaw,
        b.class_id.unwrap_or(0)
    );
    if let Some(score) = b.score {
        line.push(' ');
        line.push_str(&score.to_string());
    }
    line
}

/// Parse one box line (1-based `line_no` only feeds error messages).
pub fn parse_box_line(line: &str, line_no: usize) -> Result<OrientedBox, BoxError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 && fields.len() != 9 {
        return Err(BoxError::Parse {
            line: line_no,
            detail: format!("expected 8 or 9 fields, got {}", fields.len()),
        });
    }
    let mut nums = [0.0f64; 7];
    for (i, v) in nums.iter_mut().enumerate() {
        *v = fields[i].parse().map_err(|_| BoxError::Parse {
            line: line_no,
            detail: format!("bad number {:?}", fields[i]),
        })?;
    }
    let class_id: usize = fields[7].parse().map_err(|_| BoxError::Parse {
        line: line_no,
        detail: format!("bad class id {:?}", fields[7]),
    })?;
    let mut b = OrientedBox::new(
        [nums[0], nums[1], nums[2]],
        [nums[3], nums[4], nums[5]],
        nums[6],
    )
    .map_err(|e| BoxError::Parse {
        line: line_no,
        detail: e.to_string(),
    })?
    .with_class(class_id);
    if fields.len() == 9 {
        let score: f64 = fields[8].parse().map_err(|_| BoxError::Parse {
            line: line_no,
            detail: format!("bad score {:?}", fields[8]),
        })?;
        b = b.with_score(score);
    }
    Ok(b)
}
