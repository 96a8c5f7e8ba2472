//! Axis-aligned boxes, overlap metrics and the GIoU loss.

use serde::{Deserialize, Serialize};

/// Image-space point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Box as `(left, top, right, bottom)` in image pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl BBox {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        BBox { l, t, r, b }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }

    pub fn height(&self) -> f64 {
        self.b - self.t
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.l + self.r), 0.5 * (self.t + self.b))
    }

    pub fn is_valid(&self) -> bool {
        self.r >= self.l && self.b >= self.t && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.l && p.x <= self.r && p.y >= self.t && p.y <= self.b
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.r.min(b.r) - a.l.max(b.l)).max(0.0);
    let h = (a.b.min(b.b) - a.t.max(b.t)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU; two zero-area boxes give 0.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let enclose = (a.r.max(b.r) - a.l.min(b.l)) * (a.b.max(b.b) - a.t.min(b.t));
    inter / union - (enclose - union) / enclose
}

pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

/// `1 − GIoU(a, b)` and its gradients with respect to the coordinates of `a`
/// and `b` (ordered `l, t, r, b`). At ties and touching edges the
/// sub-gradient from the overlapping side is used.
pub fn giou_loss_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4], [f64; 4]) {
    let iw = a.r.min(b.r) - a.l.max(b.l);
    let ih = a.b.min(b.b) - a.t.max(b.t);
    let (iw_on, ih_on) = (iw >= 0.0, ih >= 0.0);
    let (iwc, ihc) = (iw.max(0.0), ih.max(0.0));
    let inter = iwc * ihc;
    let (area_a, area_b) = (a.area(), b.area());
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return (1.0, [0.0; 4], [0.0; 4]);
    }
    let cw = a.r.max(b.r) - a.l.min(b.l);
    let ch = a.b.max(b.b) - a.t.min(b.t);
    let enclose = cw * ch;
    let g = inter / union - (enclose - union) / enclose;

    // giou = I/U + U/C − 1 with U = A + B − I
    let d_inter = (union + inter) / (union * union) - 1.0 / enclose;
    let d_area = -inter / (union * union) + 1.0 / enclose;
    let d_enclose = -union / (enclose * enclose);

    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];
    // areas
    let (wa, ha, wb, hb) = (a.width(), a.height(), b.width(), b.height());
    ga[0] -= d_area * ha;
    ga[2] += d_area * ha;
    ga[1] -= d_area * wa;
    ga[3] += d_area * wa;
    gb[0] -= d_area * hb;
    gb[2] += d_area * hb;
    gb[1] -= d_area * wb;
    gb[3] += d_area * wb;
    // intersection
    let d_iw = if iw_on { d_inter * ihc } else { 0.0 };
    let d_ih = if ih_on { d_inter * iwc } else { 0.0 };
    // iw = min(r) − max(l)
    if a.r <= b.r { ga[2] += d_iw } else { gb[2] += d_iw }
    if a.l >= b.l { ga[0] -= d_iw } else { gb[0] -= d_iw }
    if a.b <= b.b { ga[3] += d_ih } else { gb[3] += d_ih }
    if a.t >= b.t { ga[1] -= d_ih } else { gb[1] -= d_ih }
    // enclosure: cw = max(r) − min(l)
    let d_cw = d_enclose * ch;
    let d_ch = d_enclose * cw;
    if a.r >= b.r { ga[2] += d_cw } else { gb[2] += d_cw }
    if a.l <= b.l { ga[0] -= d_cw } else { gb[0] -= d_cw }
    if a.b >= b.b { ga[3] += d_ch } else { gb[3] += d_ch }
    if a.t <= b.t { ga[1] -= d_ch } else { gb[1] -= d_ch }

    // loss = 1 − giou
    for v in ga.iter_mut().chain(gb.iter_mut()) {
        *v = -*v;
    }
    (1.0 - g, ga, gb)
}

/// Clamps all coordinates into `[0, width] × [0, height]`.
pub fn clamp_box(b: &BBox, width: f64, height: f64) -> BBox {
    BBox::new(
        b.l.clamp(0.0, width),
        b.t.clamp(0.0, height),
        b.r.clamp(0.0, width),
        b.b.clamp(0.0, height),
    )
}
