//! Angular sector partition of the ego surroundings and its mapping onto the
//! six-camera rig.
//!
//! Bearings are degrees counter-clockwise with 0 = straight ahead. Sectors
//! are half-open, lower-edge inclusive, and tile the full circle exactly:
//!
//! ```text
//! front       [-35,  35)      front_left  [ 35,  80)
//! back_left   [ 80, 125)      back        [125, 235)
//! back_right  [235, 280)      front_right [280, 325)
//! ```
//!
//! The widths match the camera rig: each sector lies inside the field of
//! view of exactly one canonical camera.

use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Sector {
    Front,
    FrontLeft,
    BackLeft,
    Back,
    BackRight,
    FrontRight,
}

impl Sector {
    pub const ALL: [Sector; 6] = [
        Sector::Front,
        Sector::FrontLeft,
        Sector::BackLeft,
        Sector::Back,
        Sector::BackRight,
        Sector::FrontRight,
    ];

    /// Phrase used inside question templates ("to the {phrase} of the ego car").
    pub fn phrase(self) -> &'static str {
        match self {
            Sector::Front => "front",
            Sector::FrontLeft => "front left",
            Sector::BackLeft => "back left",
            Sector::Back => "back",
            Sector::BackRight => "back right",
            Sector::FrontRight => "front right",
        }
    }

    pub fn from_phrase(s: &str) -> Option<Sector> {
        Sector::ALL.into_iter().find(|sec| sec.phrase() == s)
    }

    /// Canonical camera whose field of view contains the whole sector.
    pub fn camera_name(self) -> &'static str {
        match self {
            Sector::Front => "FRONT",
            Sector::FrontLeft => "FRONT_LEFT",
            Sector::BackLeft => "BACK_LEFT",
            Sector::Back => "BACK",
            Sector::BackRight => "BACK_RIGHT",
            Sector::FrontRight => "FRONT_RIGHT",
        }
    }

    pub fn index(self) -> usize {
        Sector::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Boundary angles `(lo, hi)` in `[0, 360)` degrees; the sector covers
    /// the CCW arc from `lo` to `hi` (front wraps through 0).
    pub fn bounds_deg(self) -> (f64, f64) {
        match self {
            Sector::Front => (325.0, 35.0),
            Sector::FrontLeft => (35.0, 80.0),
            Sector::BackLeft => (80.0, 125.0),
            Sector::Back => (125.0, 235.0),
            Sector::BackRight => (235.0, 280.0),
            Sector::FrontRight => (280.0, 325.0),
        }
    }
}

/// Absolute circular distance between two angles in degrees, in `[0, 180]`.
pub fn ang_dist_deg(a: f64, b: f64) -> f64 {
    let d = crate::math::wrap_deg(a - b);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Sector boundaries in degrees; see module docs. The partition is a fixed
/// constant of the pipeline but kept as a type so geometry tests can sweep it.
#[derive(Clone, Copy, Debug, Default)]
pub struct SectorPartition;

impl SectorPartition {
    /// Sector containing a bearing (degrees, any range).
    pub fn sector_of_deg(self, bearing_deg: f64) -> Sector {
        let d = math::wrap_deg(bearing_deg);
        if !(35.0..325.0).contains(&d) {
            Sector::Front
        } else if d < 80.0 {
            Sector::FrontLeft
        } else if d < 125.0 {
            Sector::BackLeft
        } else if d < 235.0 {
            Sector::Back
        } else if d < 280.0 {
            Sector::BackRight
        } else {
            Sector::FrontRight
        }
    }

    /// Sector of an ego-frame point (x forward, y left, meters).
    pub fn sector_of_point(self, x: f64, y: f64) -> Sector {
        self.sector_of_deg(math::rad_to_deg(math::atan2(y, x)))
    }
}

/// Bearing of an ego-frame point in degrees, `[0, 360)`.
pub fn bearing_deg(x: f64, y: f64) -> f64 {
    math::wrap_deg(math::rad_to_deg(math::atan2(y, x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_circle_exactly_once_at_tenth_degree() {
        let p = SectorPartition;
        let mut counts = [0usize; 6];
        for i in 0..3600 {
            let d = i as f64 * 0.1;
            counts[p.sector_of_deg(d).index()] += 1;
        }
        // widths: 70, 45, 45, 110, 45, 45 degrees -> tenths
        assert_eq!(counts, [700, 450, 450, 1100, 450, 450]);
    }

    #[test]
    fn boundaries_are_lower_inclusive() {
        let p = SectorPartition;
        assert_eq!(p.sector_of_deg(35.0), Sector::FrontLeft);
        assert_eq!(p.sector_of_deg(34.999), Sector::Front);
        assert_eq!(p.sector_of_deg(80.0), Sector::BackLeft);
        assert_eq!(p.sector_of_deg(125.0), Sector::Back);
        assert_eq!(p.sector_of_deg(235.0), Sector::BackRight);
        assert_eq!(p.sector_of_deg(280.0), Sector::FrontRight);
        assert_eq!(p.sector_of_deg(325.0), Sector::Front);
        assert_eq!(p.sector_of_deg(-35.0), Sector::Front);
        assert_eq!(p.sector_of_deg(-35.001), Sector::FrontRight);
    }

    #[test]
    fn points_map_through_bearings() {
        let p = SectorPartition;
        assert_eq!(p.sector_of_point(10.0, 0.0), Sector::Front);
        assert_eq!(p.sector_of_point(-10.0, 0.1), Sector::Back);
        assert_eq!(p.sector_of_point(0.0, 10.0), Sector::BackLeft); // 90 deg
        assert_eq!(p.sector_of_point(0.0, -10.0), Sector::BackRight); // 270 deg
        assert_eq!(p.sector_of_point(5.0, 5.0), Sector::FrontLeft); // 45 deg
    }

    #[test]
    fn phrases_roundtrip() {
        for s in Sector::ALL {
            assert_eq!(Sector::from_phrase(s.phrase()), Some(s));
        }
        assert_eq!(Sector::from_phrase("sideways"), None);
    }

    #[test]
    fn bounds_agree_with_partition() {
        let p = SectorPartition;
        for s in Sector::ALL {
            let (lo, hi) = s.bounds_deg();
            assert_eq!(p.sector_of_deg(lo), s, "lower bound is inclusive");
            assert_ne!(p.sector_of_deg(hi), s, "upper bound is exclusive");
            let arc = crate::math::wrap_deg(hi - lo);
            let mid = crate::math::wrap_deg(lo + arc / 2.0);
            assert_eq!(p.sector_of_deg(mid), s);
        }
    }

    #[test]
    fn angular_distance_is_symmetric_and_wraps() {
        assert!((ang_dist_deg(10.0, 350.0) - 20.0).abs() < 1e-12);
        assert!((ang_dist_deg(350.0, 10.0) - 20.0).abs() < 1e-12);
        assert!((ang_dist_deg(0.0, 180.0) - 180.0).abs() < 1e-12);
        assert!((ang_dist_deg(90.0, 90.0) - 0.0).abs() < 1e-12);
    }
}
