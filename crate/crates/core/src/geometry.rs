//! Axis-aligned rectangle arithmetic shared by the simulator, the observation
//! encoder and the renderer.
//!
//! The scene is the rectangle `[0, width] x [0, height]` with `+y` pointing up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle given by its center and extent, in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2 {
    /// Builds a box, rejecting non-finite fields and non-positive extents.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Box2 { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::InvalidGeometry(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "box extent must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn right(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn bottom(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.cy + 0.5 * self.h
    }
}

/// Extent of the scene rectangle `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub width: f64,
    pub height: f64,
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds {
            width: 1.0,
            height: 1.0,
        }
    }
}

impl SceneBounds {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        let s = SceneBounds { width, height };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.height.is_finite())
            || self.width <= 0.0
            || self.height <= 0.0
        {
            return Err(Error::InvalidGeometry(format!(
                "scene bounds must be positive and finite, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// The whole scene as a box.
    pub fn as_box(&self) -> Box2 {
        Box2 {
            cx: 0.5 * self.width,
            cy: 0.5 * self.height,
            w: self.width,
            h: self.height,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width).contains(&x) && (0.0..=self.height).contains(&y)
    }
}

/// Box coordinates in network units: center in `[-1, 1]`, extent in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub nx: f64,
    pub ny: f64,
    pub nw: f64,
    pub nh: f64,
}

impl NormalizedBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.nx, self.ny, self.nw, self.nh]
    }
}

/// Maps a world box into normalized network coordinates, clamping each
/// component to its documented range.
pub fn normalize_box(b: &Box2, s: &SceneBounds) -> Result<NormalizedBox> {
    b.validate()?;
    s.validate()?;
    Ok(NormalizedBox {
        nx: (2.0 * b.cx / s.width - 1.0).clamp(-1.0, 1.0),
        ny: (2.0 * b.cy / s.height - 1.0).clamp(-1.0, 1.0),
        nw: (b.w / s.width).clamp(0.0, 1.0),
        nh: (b.h / s.height).clamp(0.0, 1.0),
    })
}

/// True iff every edge of `inner` lies within or on the matching edge of
/// `outer`. Boundary contact counts as contained.
pub fn contains(outer: &Box2, inner: &Box2) -> bool {
    inner.left() >= outer.left()
        && inner.right() <= outer.right()
        && inner.bottom() >= outer.bottom()
        && inner.top() <= outer.top()
}

/// Moves the center of `b` so the whole box lies inside the scene.
pub fn clamp_center_to_scene(b: &Box2, s: &SceneBounds) -> Result<Box2> {
    b.validate()?;
    if b.w > s.width || b.h > s.height {
        return Err(Error::InvalidGeometry(format!(
            "box {}x{} does not fit in scene {}x{}",
            b.w, b.h, s.width, s.height
        )));
    }
    let hw = 0.5 * b.w;
    let hh = 0.5 * b.h;
    Ok(Box2 {
        cx: b.cx.clamp(hw, s.width - hw),
        cy: b.cy.clamp(hh, s.height - hh),
        w: b.w,
        h: b.h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> Box2 {
        Box2::new(cx, cy, w, h).unwrap()
    }

    const S100: SceneBounds = SceneBounds {
        width: 100.0,
        height: 100.0,
    };

    #[test]
    fn normalize_examples() {
        let n = normalize_box(&bx(50.0, 50.0, 10.0, 20.0), &S100).unwrap();
        assert_eq!(n.to_array(), [0.0, 0.0, 0.1, 0.2]);
        let n = normalize_box(&bx(0.0, 0.0, 10.0, 10.0), &S100).unwrap();
        assert_eq!(n.to_array(), [-1.0, -1.0, 0.1, 0.1]);
        let n = normalize_box(&bx(75.0, 25.0, 200.0, 10.0), &S100).unwrap();
        assert_eq!(n.to_array(), [0.5, -0.5, 1.0, 0.1]);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let b = Box2 {
            cx: f64::NAN,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
        };
        assert!(matches!(
            normalize_box(&b, &S100),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(Box2::new(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn contains_examples() {
        let outer = bx(50.0, 50.0, 20.0, 20.0);
        assert!(contains(&outer, &bx(50.0, 50.0, 10.0, 10.0)));
        assert!(!contains(&outer, &bx(62.0, 50.0, 10.0, 10.0)));
        assert!(contains(&outer, &bx(50.0, 50.0, 20.0, 20.0)));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(
            clamp_center_to_scene(&bx(-5.0, 50.0, 10.0, 10.0), &S100).unwrap(),
            bx(5.0, 50.0, 10.0, 10.0)
        );
        let inner = bx(50.0, 50.0, 10.0, 10.0);
        assert_eq!(clamp_center_to_scene(&inner, &S100).unwrap(), inner);
        assert_eq!(
            clamp_center_to_scene(&bx(99.0, 99.0, 10.0, 10.0), &S100).unwrap(),
            bx(95.0, 95.0, 10.0, 10.0)
        );
        assert!(clamp_center_to_scene(&bx(50.0, 50.0, 101.0, 10.0), &S100).is_err());
    }

    fn arb_box() -> impl Strategy<Value = Box2> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(cx, cy, w, h)| Box2 { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn contains_is_reflexive(a in arb_box()) {
            prop_assert!(contains(&a, &a));
        }

        #[test]
        fn contains_is_transitive(a in arb_box(), b in arb_box(), c in arb_box()) {
            if contains(&a, &b) && contains(&b, &c) {
                prop_assert!(contains(&a, &c));
            }
        }

        #[test]
        fn clamp_is_idempotent(b in arb_box()) {
            let once = clamp_center_to_scene(&b, &S100).unwrap();
            let twice = clamp_center_to_scene(&once, &S100).unwrap();
            prop_assert_eq!(once, twice);
            prop_assert!(contains(&S100.as_box(), &once));
        }

        #[test]
        fn normalize_is_monotone(b in arb_box(), d in 0.0..10.0f64) {
            let lo = normalize_box(&b, &S100).unwrap();
            let moved = Box2 { cx: b.cx + d, cy: b.cy + d, w: b.w + d, h: b.h + d };
            let hi = normalize_box(&moved, &S100).unwrap();
            prop_assert!(hi.nx >= lo.nx && hi.ny >= lo.ny && hi.nw >= lo.nw && hi.nh >= lo.nh);
        }
    }
}
