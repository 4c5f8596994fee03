//! Coordinate conventions and caliper geometry.
//!
//! Pixel coordinates use `x` = column and `y` = row with the origin at the
//! top-left pixel center; values are continuous. The normalized grid maps the
//! center of pixel `i` on an axis of length `n` to `(2i + 1) / n - 1`, so a
//! one-pixel mass decodes to exactly that pixel's center.

use serde::{Deserialize, Serialize};

/// Point in pixel space (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    /// Distance to the nearest border of a `width` x `height` raster, measured
    /// between pixel centers (the last pixel center sits at `width - 1`).
    pub fn border_distance(&self, width: usize, height: usize) -> f64 {
        let right = width as f64 - 1.0 - self.x;
        let bottom = height as f64 - 1.0 - self.y;
        self.x.min(self.y).min(right).min(bottom)
    }
}

/// Point on the normalized `[-1, 1]^2` grid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormPoint {
    pub x: f64,
    pub y: f64,
}

impl NormPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Maps a pixel index (continuous) to the normalized pixel-center grid.
pub fn normalize_axis(i: f64, size: usize) -> f64 {
    debug_assert!(size >= 1);
    (2.0 * i + 1.0) / size as f64 - 1.0
}

/// Inverse of [`normalize_axis`].
pub fn denormalize_axis(u: f64, size: usize) -> f64 {
    ((u + 1.0) * size as f64 - 1.0) / 2.0
}

/// Normalizes a pixel point on a `width` x `height` raster.
pub fn normalize_coords(p: PixelPoint, width: usize, height: usize) -> NormPoint {
    NormPoint::new(normalize_axis(p.x, width), normalize_axis(p.y, height))
}

pub fn denormalize_coords(p: NormPoint, width: usize, height: usize) -> PixelPoint {
    PixelPoint::new(denormalize_axis(p.x, width), denormalize_axis(p.y, height))
}

/// The six caliper endpoints, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Landmark {
    IvsTop,
    IvsBottom,
    LvidTop,
    LvidBottom,
    LvpwTop,
    LvpwBottom,
}

impl Landmark {
    pub const ALL: [Landmark; 6] = [
        Landmark::IvsTop,
        Landmark::IvsBottom,
        Landmark::LvidTop,
        Landmark::LvidBottom,
        Landmark::LvpwTop,
        Landmark::LvpwBottom,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Measurement this endpoint belongs to.
    pub fn measurement(self) -> Measurement {
        Measurement::ALL[self.index() / 2]
    }

    pub fn name(self) -> &'static str {
        match self {
            Landmark::IvsTop => "IVS-top",
            Landmark::IvsBottom => "IVS-bottom",
            Landmark::LvidTop => "LVID-top",
            Landmark::LvidBottom => "LVID-bottom",
            Landmark::LvpwTop => "LVPW-top",
            Landmark::LvpwBottom => "LVPW-bottom",
        }
    }
}

pub const NUM_LANDMARKS: usize = 6;
pub const NUM_MEASUREMENTS: usize = 3;

/// The three caliper measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Measurement {
    Ivs,
    Lvid,
    Lvpw,
}

impl Measurement {
    pub const ALL: [Measurement; 3] = [Measurement::Ivs, Measurement::Lvid, Measurement::Lvpw];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Canonical landmark pair `(start, end)` for this measurement.
    pub fn endpoints(self) -> (usize, usize) {
        let i = self.index();
        (2 * i, 2 * i + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Measurement::Ivs => "IVS",
            Measurement::Lvid => "LVID",
            Measurement::Lvpw => "LVPW",
        }
    }
}

impl std::fmt::Display for Measurement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Six caliper endpoints of one image in canonical order
/// `[IVS-top, IVS-bottom, LVID-top, LVID-bottom, LVPW-top, LVPW-bottom]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    pub points: [PixelPoint; NUM_LANDMARKS],
}

impl LandmarkSet {
    pub fn new(points: [PixelPoint; NUM_LANDMARKS]) -> Self {
        Self { points }
    }

    pub fn from_pairs(pairs: [[f64; 2]; NUM_LANDMARKS]) -> Self {
        Self::new(pairs.map(|[x, y]| PixelPoint::new(x, y)))
    }

    pub fn to_pairs(&self) -> [[f64; 2]; NUM_LANDMARKS] {
        self.points.map(|p| [p.x, p.y])
    }

    pub fn get(&self, lm: Landmark) -> PixelPoint {
        self.points[lm.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(PixelPoint::is_finite)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.points.map(|p| p.translated(dx, dy)))
    }

    /// Applies `f` to every point.
    pub fn map(&self, f: impl Fn(PixelPoint) -> PixelPoint) -> Self {
        Self::new(self.points.map(f))
    }

    /// Smallest distance from any point to the raster border.
    pub fn min_border_distance(&self, width: usize, height: usize) -> f64 {
        self.points
            .iter()
            .map(|p| p.border_distance(width, height))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn normalized(&self, width: usize, height: usize) -> [NormPoint; NUM_LANDMARKS] {
        self.points.map(|p| normalize_coords(p, width, height))
    }

    pub fn from_normalized(points: &[NormPoint; NUM_LANDMARKS], width: usize, height: usize) -> Self {
        Self::new(points.map(|p| denormalize_coords(p, width, height)))
    }

    /// Bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        )
    }
}

/// One caliper measurement: the vector from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector {
    pub name: Measurement,
    pub start: PixelPoint,
    pub end: PixelPoint,
    pub length: f64,
    /// Unit direction `start -> end`; zero when the vector is degenerate.
    pub direction: [f64; 2],
    pub degenerate: bool,
}

impl MeasurementVector {
    pub fn new(name: Measurement, start: PixelPoint, end: PixelPoint) -> Self {
        let dx = end.x - start.x;
        let dy = end.y - start.y;
        let length = dx.hypot(dy);
        let (direction, degenerate) = if length > 0.0 {
            ([dx / length, dy / length], false)
        } else {
            ([0.0, 0.0], true)
        };
        Self { name, start, end, length, direction, degenerate }
    }

    /// Raw displacement `end - start`.
    pub fn delta(&self) -> [f64; 2] {
        [self.end.x - self.start.x, self.end.y - self.start.y]
    }
}

/// The IVS, LVID and LVPW vectors of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub ivs: MeasurementVector,
    pub lvid: MeasurementVector,
    pub lvpw: MeasurementVector,
}

impl MeasurementSet {
    pub fn get(&self, m: Measurement) -> &MeasurementVector {
        match m {
            Measurement::Ivs => &self.ivs,
            Measurement::Lvid => &self.lvid,
            Measurement::Lvpw => &self.lvpw,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &MeasurementVector> {
        [&self.ivs, &self.lvid, &self.lvpw].into_iter()
    }

    pub fn lengths(&self) -> [f64; NUM_MEASUREMENTS] {
        [self.ivs.length, self.lvid.length, self.lvpw.length]
    }

    pub fn any_degenerate(&self) -> bool {
        self.iter().any(|v| v.degenerate)
    }
}

/// Builds the three measurement vectors from the canonical pairs
/// (0,1), (2,3) and (4,5). Degenerate pairs are flagged, never rejected.
pub fn measurements_from_landmarks(lm: &LandmarkSet) -> MeasurementSet {
    let vector = |m: Measurement| {
        let (a, b) = m.endpoints();
        MeasurementVector::new(m, lm.points[a], lm.points[b])
    };
    MeasurementSet {
        ivs: vector(Measurement::Ivs),
        lvid: vector(Measurement::Lvid),
        lvpw: vector(Measurement::Lvpw),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("angle undefined: {0} vector is degenerate")]
pub struct UndefinedAngle(pub Measurement);

/// Cosine between two measurement directions.
pub fn angle_cosine(a: &MeasurementVector, b: &MeasurementVector) -> Result<f64, UndefinedAngle> {
    if a.degenerate {
        return Err(UndefinedAngle(a.name));
    }
    if b.degenerate {
        return Err(UndefinedAngle(b.name));
    }
    let dot = a.direction[0] * b.direction[0] + a.direction[1] * b.direction[1];
    Ok(dot.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set_with_ivs(a: PixelPoint, b: PixelPoint) -> LandmarkSet {
        let mut lm = LandmarkSet::from_pairs([[50.0, 50.0], [50.0, 60.0], [50.0, 60.0], [50.0, 100.0], [50.0, 100.0], [50.0, 110.0]]);
        lm.points[0] = a;
        lm.points[1] = b;
        lm
    }

    #[test]
    fn three_four_five() {
        let ms = measurements_from_landmarks(&set_with_ivs(PixelPoint::new(0.0, 0.0), PixelPoint::new(3.0, 4.0)));
        assert_eq!(ms.ivs.length, 5.0);
        assert!(!ms.ivs.degenerate);
    }

    #[test]
    fn all_points_identical_is_degenerate() {
        let lm = LandmarkSet::new([PixelPoint::new(7.0, 7.0); 6]);
        let ms = measurements_from_landmarks(&lm);
        for v in ms.iter() {
            assert_eq!(v.length, 0.0);
            assert!(v.degenerate);
            assert_eq!(v.direction, [0.0, 0.0]);
        }
        assert!(ms.any_degenerate());
    }

    #[test]
    fn axis_aligned_direction() {
        let ms = measurements_from_landmarks(&set_with_ivs(PixelPoint::new(10.0, 10.0), PixelPoint::new(10.0, 30.0)));
        assert_eq!(ms.ivs.length, 20.0);
        assert_eq!(ms.ivs.direction, [0.0, 1.0]);
    }

    #[test]
    fn canonical_pairing() {
        let lm = LandmarkSet::from_pairs([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 5.0], [0.0, 6.0], [0.0, 12.0]]);
        let ms = measurements_from_landmarks(&lm);
        assert_eq!(ms.lengths(), [1.0, 3.0, 6.0]);
        assert_eq!(Landmark::LvpwTop.measurement(), Measurement::Lvpw);
        assert_eq!(Measurement::Lvid.endpoints(), (2, 3));
    }

    fn vec_dir(dx: f64, dy: f64) -> MeasurementVector {
        MeasurementVector::new(Measurement::Lvid, PixelPoint::new(0.0, 0.0), PixelPoint::new(dx, dy))
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(angle_cosine(&vec_dir(2.0, 3.0), &vec_dir(4.0, 6.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(angle_cosine(&vec_dir(0.0, 1.0), &vec_dir(1.0, 0.0)).unwrap(), 0.0);
        assert_eq!(angle_cosine(&vec_dir(0.0, 1.0), &vec_dir(0.0, -1.0)).unwrap(), -1.0);
        assert_eq!(angle_cosine(&vec_dir(0.0, 0.0), &vec_dir(0.0, 1.0)), Err(UndefinedAngle(Measurement::Lvid)));
    }

    #[test]
    fn normalization_grid() {
        assert_eq!(normalize_axis(0.0, 2), -0.5);
        assert_eq!(normalize_axis(1.0, 2), 0.5);
        assert_eq!(normalize_axis(2.0, 5), 0.0);
        assert_abs_diff_eq!(normalize_axis(0.0, 256), -0.99609375, epsilon = 1e-15);
    }

    #[test]
    fn border_distance_uses_pixel_centers() {
        let p = PixelPoint::new(16.0, 239.0);
        assert_eq!(p.border_distance(256, 256), 16.0);
    }

    proptest! {
        #[test]
        fn normalize_round_trip(x in -10.0f64..300.0, y in -10.0f64..300.0, w in 1usize..512, h in 1usize..512) {
            let p = PixelPoint::new(x, y);
            let back = denormalize_coords(normalize_coords(p, w, h), w, h);
            prop_assert!((back.x - x).abs() < 1e-9 && (back.y - y).abs() < 1e-9);
        }

        #[test]
        fn normalize_is_monotone(a in 0.0f64..255.0, d in 1e-6f64..10.0, n in 1usize..512) {
            prop_assert!(normalize_axis(a + d, n) > normalize_axis(a, n));
        }

        #[test]
        fn length_translation_invariant(
            pts in proptest::array::uniform6((0.0f64..256.0, 0.0f64..256.0)),
            dx in -100.0f64..100.0, dy in -100.0f64..100.0,
        ) {
            let lm = LandmarkSet::new(pts.map(|(x, y)| PixelPoint::new(x, y)));
            let a = measurements_from_landmarks(&lm);
            let b = measurements_from_landmarks(&lm.translated(dx, dy));
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u.length - v.length).abs() < 1e-9);
                prop_assert!(u.length >= 0.0);
            }
            // reversing a pair leaves the length unchanged
            let rev = MeasurementVector::new(Measurement::Ivs, lm.points[1], lm.points[0]);
            prop_assert_eq!(rev.length, a.ivs.length);
            // pure: identical bits on recomputation
            prop_assert_eq!(measurements_from_landmarks(&lm), a);
        }
    }
}
