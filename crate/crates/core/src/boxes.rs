//! Axis-aligned boxes in normalized center-size form.

use crate::scalar::Real;

pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["fire", "smoke"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    pub class_id: usize,
}

impl<T: Real> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T, class_id: usize) -> Self {
        Self { cx, cy, w, h, class_id }
    }

    pub fn from_corners(x1: T, y1: T, x2: T, y2: T, class_id: usize) -> Self {
        let two = T::lit(2.0);
        Self {
            cx: (x1 + x2) / two,
            cy: (y1 + y2) / two,
            w: x2 - x1,
            h: y2 - y1,
            class_id,
        }
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (T, T, T, T) {
        let two = T::lit(2.0);
        (
            self.cx - self.w / two,
            self.cy - self.h / two,
            self.cx + self.w / two,
            self.cy + self.h / two,
        )
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
            class_id: self.class_id,
        }
    }

    pub fn cast<U: Real>(&self) -> BBox<U> {
        BBox {
            cx: U::lit(self.cx.to_f64_lossy()),
            cy: U::lit(self.cy.to_f64_lossy()),
            w: U::lit(self.w.to_f64_lossy()),
            h: U::lit(self.h.to_f64_lossy()),
            class_id: self.class_id,
        }
    }
}

pub fn intersection<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(T::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(T::zero());
    iw * ih
}

/// Intersection over union; 0 for disjoint or zero-area pairs.
pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).max(T::zero()).min(T::one())
}

/// IoU of two shapes placed on a common center.
pub fn shape_iou<T: Real>(w1: T, h1: T, w2: T, h2: T) -> T {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}
