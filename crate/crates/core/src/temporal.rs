//! Normalized temporal anchors and spans.
//!
//! All times are fractions of the video length in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An event's temporal extent as `(center, duration)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalAnchor {
    center: f64,
    duration: f64,
}

impl TemporalAnchor {
    pub fn new(center: f64, duration: f64) -> Result<Self> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(center) || !ok(duration) {
            return Err(Error::InvalidAnchor { center, duration });
        }
        Ok(Self { center, duration })
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn span(&self) -> TimeSpan {
        span_from_anchor(*self)
    }
}

/// A `[start, end]` interval with `start ≤ end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    start: f64,
    end: f64,
}

impl TimeSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(start) || !ok(end) || start > end {
            return Err(Error::InvalidSpan { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn anchor(&self) -> TemporalAnchor {
        anchor_from_span(*self)
    }

    /// Indices of frames (out of `num_frames`) whose centers `(i + 0.5) / T`
    /// fall inside the span, endpoints included.
    pub fn frame_indices(&self, num_frames: usize) -> std::ops::Range<usize> {
        let t = num_frames as f64;
        let lo = (self.start * t - 0.5).ceil().max(0.0) as usize;
        let hi = ((self.end * t - 0.5).floor() + 1.0).max(0.0) as usize;
        let hi = hi.min(num_frames);
        lo.min(hi)..hi
    }
}

pub fn span_from_anchor(a: TemporalAnchor) -> TimeSpan {
    let half = a.duration / 2.0;
    TimeSpan {
        start: (a.center - half).clamp(0.0, 1.0),
        end: (a.center + half).clamp(0.0, 1.0),
    }
}

pub fn anchor_from_span(s: TimeSpan) -> TemporalAnchor {
    TemporalAnchor {
        center: (s.start + s.end) / 2.0,
        duration: s.end - s.start,
    }
}

fn intersection(a: TimeSpan, b: TimeSpan) -> f64 {
    (a.end.min(b.end) - a.start.max(b.start)).max(0.0)
}

/// Intersection over union; 0 when the union has zero length.
pub fn temporal_iou(a: TimeSpan, b: TimeSpan) -> f64 {
    let inter = intersection(a, b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over the enclosing hull `max(ends) − min(starts)`; 0 when the
/// hull has zero length. This is the ratio the span loss penalizes.
pub fn hull_overlap_ratio(a: TimeSpan, b: TimeSpan) -> f64 {
    let hull = a.end.max(b.end) - a.start.min(b.start);
    if hull <= 0.0 {
        0.0
    } else {
        intersection(a, b) / hull
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn anchor(c: f64, d: f64) -> TemporalAnchor {
        TemporalAnchor::new(c, d).unwrap()
    }

    fn span(s: f64, e: f64) -> TimeSpan {
        TimeSpan::new(s, e).unwrap()
    }

    #[test]
    fn span_from_anchor_examples() {
        assert_eq!(span_from_anchor(anchor(0.5, 0.5)), span(0.25, 0.75));
        assert_eq!(span_from_anchor(anchor(0.0, 0.2)), span(0.0, 0.1));
        assert_eq!(span_from_anchor(anchor(1.0, 0.0)), span(1.0, 1.0));
    }

    #[test]
    fn anchor_from_span_examples() {
        assert_eq!(anchor_from_span(span(0.25, 0.75)), anchor(0.5, 0.5));
        assert_eq!(anchor_from_span(span(0.0, 0.0)), anchor(0.0, 0.0));
        let a = anchor_from_span(span(0.1, 0.9));
        assert!((a.center() - 0.5).abs() < 1e-15 && (a.duration() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn construction_rejects_out_of_range() {
        assert!(TemporalAnchor::new(1.1, 0.2).is_err());
        assert!(TemporalAnchor::new(0.5, -0.1).is_err());
        assert!(TemporalAnchor::new(f64::NAN, 0.1).is_err());
        assert!(TimeSpan::new(0.6, 0.4).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(span(0.2, 0.7), span(0.2, 0.7)), 1.0);
        assert_eq!(temporal_iou(span(0.0, 0.4), span(0.6, 1.0)), 0.0);
        // 0.25 / 0.75
        assert!((temporal_iou(span(0.0, 0.5), span(0.25, 0.75)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hull_ratio_examples() {
        assert_eq!(hull_overlap_ratio(span(0.2, 0.7), span(0.2, 0.7)), 1.0);
        // 0.2 / 0.6
        assert!((hull_overlap_ratio(span(0.2, 0.6), span(0.4, 0.8)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(hull_overlap_ratio(span(0.0, 0.4), span(0.6, 1.0)), 0.0);
    }

    #[test]
    fn zero_length_spans_score_zero() {
        let p = span(0.3, 0.3);
        assert_eq!(temporal_iou(p, p), 0.0);
        assert_eq!(hull_overlap_ratio(p, p), 0.0);
    }

    #[test]
    fn frame_indices_cover_centers() {
        // T = 10: centers at 0.05, 0.15, ...
        assert_eq!(span(0.0, 1.0).frame_indices(10), 0..10);
        assert_eq!(span(0.1, 0.3).frame_indices(10), 1..3);
        assert_eq!(span(0.1875, 0.1875).frame_indices(8), 1..2);
        assert_eq!(span(0.16, 0.2).frame_indices(10), 2..2);
        assert_eq!(span(0.96, 1.0).frame_indices(10), 10..10);
    }

    fn arb_span() -> impl Strategy<Value = TimeSpan> {
        (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| span(a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn roundtrip_without_clamping(c in 0.0..=1.0f64, d in 0.0..=1.0f64) {
            let d = d.min(2.0 * c).min(2.0 * (1.0 - c));
            let a = anchor(c, d);
            let back = anchor_from_span(span_from_anchor(a));
            prop_assert!((back.center() - c).abs() < 1e-12);
            prop_assert!((back.duration() - d).abs() < 1e-12);
        }

        #[test]
        fn overlap_ratios_symmetric_and_bounded(a in arb_span(), b in arb_span()) {
            let (iab, iba) = (temporal_iou(a, b), temporal_iou(b, a));
            prop_assert_eq!(iab, iba);
            prop_assert_eq!(hull_overlap_ratio(a, b), hull_overlap_ratio(b, a));
            prop_assert!((0.0..=1.0).contains(&iab));
            let h = hull_overlap_ratio(a, b);
            prop_assert!((0.0..=1.0).contains(&h));
            if intersection(a, b) > 0.0 {
                prop_assert!(h <= iab + 1e-15);
            }
        }

        #[test]
        fn unit_iou_iff_equal(a in arb_span(), b in arb_span()) {
            let iou = temporal_iou(a, b);
            let same = (a.start() - b.start()).abs() < 1e-12 && (a.end() - b.end()).abs() < 1e-12;
            if (iou - 1.0).abs() < 1e-12 {
                prop_assert!(same);
            }
            if same && a.length() > 1e-9 {
                prop_assert!((iou - 1.0).abs() < 1e-9);
            }
        }
    }
}
