//! Three-anchor trilateration, algebraic circle fitting and the simulated
//! rotating-platform accuracy experiment.

use std::io::Write;

use nalgebra::{Matrix2, Matrix3, Rotation3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Range inconsistency absorbed as `z = 0`, meters.
pub const Z_TOLERANCE: f64 = 1e-3;
/// Width of one residual histogram bin, meters.
pub const HISTOGRAM_BIN: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("triangle side must be positive, got {0}")]
    InvalidSide(f64),
    #[error("ranges must be positive and finite")]
    InvalidRange,
    #[error("inconsistent ranges: z^2 = {0:e} m^2")]
    InconsistentRanges(f64),
    #[error("need at least 3 points for a circle fit, got {0}")]
    TooFewPoints(usize),
    #[error("points are collinear")]
    Collinear,
    #[error("platform experiment needs at least 8 steps, got {0}")]
    TooFewSteps(usize),
    #[error("invalid noise sigma {0}")]
    InvalidNoise(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Equilateral anchor triangle: C at the origin, A = (s/2, s*sqrt(3)/2, 0),
/// B = (-s/2, s*sqrt(3)/2, 0). The x axis runs from B to A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleFrame {
    side: f64,
}

impl TriangleFrame {
    pub fn new(side: f64) -> Result<Self> {
        if !(side.is_finite() && side > 0.0) {
            return Err(GeometryError::InvalidSide(side));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    fn height(&self) -> f64 {
        self.side * 3f64.sqrt() / 2.0
    }

    pub fn a(&self) -> Vector3<f64> {
        Vector3::new(self.side / 2.0, self.height(), 0.0)
    }

    pub fn b(&self) -> Vector3<f64> {
        Vector3::new(-self.side / 2.0, self.height(), 0.0)
    }

    pub fn c(&self) -> Vector3<f64> {
        Vector3::zeros()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        (self.a() + self.b() + self.c()) / 3.0
    }

    /// Ranges `(dA, dB, dC)` from the anchors to `p`.
    pub fn ranges(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        ((p - self.a()).norm(), (p - self.b()).norm(), (p - self.c()).norm())
    }
}

/// Closed-form position from three ranges, taking the `z >= 0` root.
pub fn trilaterate(frame: &TriangleFrame, da: f64, db: f64, dc: f64) -> Result<Vector3<f64>> {
    if ![da, db, dc].iter().all(|d| d.is_finite() && *d > 0.0) {
        return Err(GeometryError::InvalidRange);
    }
    let s = frame.side();
    let h = frame.height();
    let (a2, b2, c2) = (da * da, db * db, dc * dc);
    let x = (b2 - a2) / (2.0 * s);
    // mean of the C-vs-A and C-vs-B difference equations
    let y = (c2 - 0.5 * (a2 + b2) + s * s) / (2.0 * h);
    let z2 = c2 - x * x - y * y;
    let z = if z2 >= 0.0 {
        z2.sqrt()
    } else if z2 >= -Z_TOLERANCE * Z_TOLERANCE {
        0.0
    } else {
        return Err(GeometryError::InconsistentRanges(z2));
    };
    Ok(Vector3::new(x, y, z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleFit {
    pub center: Vector2<f64>,
    pub radius: f64,
    /// `| |p - center| - radius |` per input point.
    pub residuals: Vec<f64>,
}

impl CircleFit {
    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len() as f64
    }
}

/// Algebraic (Kasa) least-squares circle fit.
///
/// Points are centered on their mean before solving, which keeps the
/// normal equations well conditioned far from the origin.
pub fn fit_circle(points: &[Vector2<f64>]) -> Result<CircleFit> {
    let n = points.len();
    if n < 3 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let mean = points.iter().sum::<Vector2<f64>>() / n as f64;
    let mut scatter = Matrix2::zeros();
    for p in points {
        let q = p - mean;
        scatter += q * q.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= 1e-12 * hi {
        return Err(GeometryError::Collinear);
    }
    // |q|^2 = 2 a qx + 2 b qy + c
    let mut normal = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for p in points {
        let q = p - mean;
        let row = Vector3::new(2.0 * q.x, 2.0 * q.y, 1.0);
        normal += row * row.transpose();
        rhs += row * q.norm_squared();
    }
    let sol = normal
        .cholesky()
        .ok_or(GeometryError::Collinear)?
        .solve(&rhs);
    let offset = Vector2::new(sol.x, sol.y);
    let r2 = sol.z + offset.norm_squared();
    if r2 <= 0.0 {
        return Err(GeometryError::Collinear);
    }
    let center = mean + offset;
    let radius = r2.sqrt();
    let residuals = points
        .iter()
        .map(|p| ((p - center).norm() - radius).abs())
        .collect();
    Ok(CircleFit {
        center,
        radius,
        residuals,
    })
}

#[derive(Debug, Clone)]
pub struct PlatformResult {
    /// Trilaterated positions of D in the triangle frame, one per step.
    pub points: Vec<Vector3<f64>>,
    /// Circle fitted to the X-Y projection of `points`.
    pub fit: CircleFit,
    pub mean_error: f64,
    /// Residual counts per [`HISTOGRAM_BIN`]-wide bin starting at zero.
    pub histogram: Vec<usize>,
}

impl PlatformResult {
    pub fn write_points_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,residual")?;
        for (p, r) in self.points.iter().zip(&self.fit.residuals) {
            writeln!(w, "{},{},{}", p.x, p.y, r)?;
        }
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_start_m,bin_end_m,count")?;
        for (i, c) in self.histogram.iter().enumerate() {
            writeln!(
                w,
                "{},{},{}",
                i as f64 * HISTOGRAM_BIN,
                (i + 1) as f64 * HISTOGRAM_BIN,
                c
            )?;
        }
        Ok(())
    }
}

/// Simulates the rotating platform: A, B, C turn about a vertical axis
/// through the triangle centroid while D stays fixed. In the triangle frame
/// D therefore sweeps a horizontal circle. `d_true` is D at angle zero.
pub fn platform_experiment(
    frame: &TriangleFrame,
    d_true: Vector3<f64>,
    steps: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PlatformResult> {
    if steps < 8 {
        return Err(GeometryError::TooFewSteps(steps));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(GeometryError::InvalidNoise(noise_sigma));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let pivot = frame.centroid();
    let mut points = Vec::with_capacity(steps);
    for k in 0..steps {
        let phi = std::f64::consts::TAU * k as f64 / steps as f64;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -phi);
        let d = pivot + rot * (d_true - pivot);
        let (da, db, dc) = frame.ranges(&d);
        let mut noisy = [da, db, dc];
        if noise_sigma > 0.0 {
            for r in &mut noisy {
                *r += normal.sample(&mut rng);
            }
        }
        points.push(trilaterate(frame, noisy[0], noisy[1], noisy[2])?);
    }
    let planar: Vec<Vector2<f64>> = points.iter().map(|p| p.xy()).collect();
    let fit = fit_circle(&planar)?;
    let mean_error = fit.mean_residual();
    let mut histogram = Vec::new();
    for r in &fit.residuals {
        let bin = (r / HISTOGRAM_BIN).floor() as usize;
        if histogram.len() <= bin {
            histogram.resize(bin + 1, 0);
        }
        histogram[bin] += 1;
    }
    Ok(PlatformResult {
        points,
        fit,
        mean_error,
        histogram,
    })
}

/// Bench defaults: 8 cm triangle, D 8 cm from the rotation axis and 5 cm
/// above the platform.
pub fn default_platform() -> (TriangleFrame, Vector3<f64>) {
    let frame = TriangleFrame::new(0.08).expect("positive side");
    let d = frame.centroid() + Vector3::new(0.08, 0.0, 0.05);
    (frame, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centroid_from_equal_ranges() {
        let f = TriangleFrame::new(0.1).unwrap();
        let d = 0.1 / 3f64.sqrt();
        let p = trilaterate(&f, d, d, d).unwrap();
        assert!(p.x.abs() < 1e-15);
        assert!((p.y - 0.057735).abs() < 1e-6);
        assert!(p.z.abs() < 1e-12);
    }

    #[test]
    fn equal_a_b_gives_zero_x() {
        let f = TriangleFrame::new(0.06).unwrap();
        let p = trilaterate(&f, 0.1, 0.1, 0.09).unwrap();
        assert_eq!(p.x, 0.0);
    }

    #[test]
    fn recovers_known_point() {
        let f = TriangleFrame::new(0.1).unwrap();
        let target = Vector3::new(0.02, 0.03, 0.04);
        // oracle: forward distances
        let da = ((0.02f64 - 0.05).powi(2) + (0.03f64 - 0.1 * 3f64.sqrt() / 2.0).powi(2) + 0.04f64.powi(2)).sqrt();
        let db = ((0.02f64 + 0.05).powi(2) + (0.03f64 - 0.1 * 3f64.sqrt() / 2.0).powi(2) + 0.04f64.powi(2)).sqrt();
        let dc = (0.02f64.powi(2) + 0.03f64.powi(2) + 0.04f64.powi(2)).sqrt();
        let p = trilaterate(&f, da, db, dc).unwrap();
        assert!((p - target).norm() < 1e-12);
    }

    #[test]
    fn inconsistent_ranges_rejected() {
        let f = TriangleFrame::new(0.1).unwrap();
        assert!(matches!(
            trilaterate(&f, 0.01, 0.01, 0.2),
            Err(GeometryError::InconsistentRanges(_))
        ));
        assert!(trilaterate(&f, 0.0, 0.1, 0.1).is_err());
        assert!(TriangleFrame::new(0.0).is_err());
    }

    #[test]
    fn slightly_inconsistent_ranges_snap_to_plane() {
        let f = TriangleFrame::new(0.1).unwrap();
        let d = 0.1 / 3f64.sqrt();
        let p = trilaterate(&f, d, d, d - 2e-6).unwrap();
        assert_eq!(p.z, 0.0);
    }

    #[test]
    fn unit_circle_fits() {
        let pts: Vec<Vector2<f64>> = (0..8)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 8.0;
                Vector2::new(a.cos(), a.sin())
            })
            .collect();
        let fit = fit_circle(&pts).unwrap();
        assert!(fit.center.norm() < 1e-12);
        assert!((fit.radius - 1.0).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|&r| r < 1e-12));

        let four = [
            Vector2::new(1.0, 0.0),
            Vector2::new(-1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(0.0, -1.0),
        ];
        let fit = fit_circle(&four).unwrap();
        assert!(fit.center.norm() < 1e-15);
        assert!((fit.radius - 1.0).abs() < 1e-15);
    }

    #[test]
    fn collinear_and_short_inputs_rejected() {
        let line: Vec<Vector2<f64>> = (0..5).map(|i| Vector2::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(fit_circle(&line), Err(GeometryError::Collinear)));
        assert!(matches!(
            fit_circle(&line[..2]),
            Err(GeometryError::TooFewPoints(2))
        ));
    }

    #[test]
    fn noisy_circle_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 0.0005).unwrap();
        let pts: Vec<Vector2<f64>> = (0..1000)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 1000.0;
                let r = 0.05 + noise.sample(&mut rng);
                Vector2::new(0.3 + r * a.cos(), -0.1 + r * a.sin())
            })
            .collect();
        let fit = fit_circle(&pts).unwrap();
        assert!((fit.radius - 0.05).abs() < 0.02 * 0.05);
    }

    #[test]
    fn platform_noiseless_is_exact() {
        let (f, d) = default_platform();
        let res = platform_experiment(&f, d, 360, 0.0, 1).unwrap();
        assert!(res.mean_error < 1e-9);
        assert!((res.fit.radius - 0.08).abs() < 1e-9);
        assert!(platform_experiment(&f, d, 7, 0.0, 1).is_err());
    }

    #[test]
    fn platform_noise_bracket_and_scaling() {
        let (f, d) = default_platform();
        let one = platform_experiment(&f, d, 1000, 0.0005, 4).unwrap();
        assert!((2e-4..=1.5e-3).contains(&one.mean_error), "{}", one.mean_error);
        assert_eq!(one.histogram.iter().sum::<usize>(), 1000);
        // averaged over repeats: doubling sigma roughly doubles the error
        let avg = |sigma: f64| {
            (0..5)
                .map(|s| platform_experiment(&f, d, 1000, sigma, 100 + s).unwrap().mean_error)
                .sum::<f64>()
                / 5.0
        };
        let ratio = avg(0.001) / avg(0.0005);
        assert!((ratio - 2.0).abs() < 0.3 * 2.0, "ratio {ratio}");
    }

    #[test]
    fn csv_outputs_have_headers() {
        let (f, d) = default_platform();
        let res = platform_experiment(&f, d, 16, 0.0005, 2).unwrap();
        let mut pts = Vec::new();
        res.write_points_csv(&mut pts).unwrap();
        let text = String::from_utf8(pts).unwrap();
        assert!(text.starts_with("x,y,residual\n"));
        assert_eq!(text.lines().count(), 17);
        let mut hist = Vec::new();
        res.write_histogram_csv(&mut hist).unwrap();
        assert!(String::from_utf8(hist).unwrap().starts_with("bin_start_m,"));
    }

    fn rigid(points: &[Vector2<f64>], angle: f64, t: Vector2<f64>) -> Vec<Vector2<f64>> {
        let (s, c) = angle.sin_cos();
        points
            .iter()
            .map(|p| Vector2::new(c * p.x - s * p.y, s * p.x + c * p.y) + t)
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn trilateration_round_trip(x in -0.2f64..0.2, y in -0.2f64..0.2, z in 0.0f64..0.2) {
            let f = TriangleFrame::new(0.06).unwrap();
            let p = Vector3::new(x, y, z);
            let (a, b, c) = f.ranges(&p);
            prop_assume!(a > 1e-6 && b > 1e-6 && c > 1e-6);
            let q = trilaterate(&f, a, b, c).unwrap();
            // near z = 0 the root is ill conditioned: compare in range space
            let (qa, qb, qc) = f.ranges(&q);
            prop_assert!((qa - a).abs() < 1e-9 && (qb - b).abs() < 1e-9 && (qc - c).abs() < 1e-9);
        }

        #[test]
        fn circle_residuals_rigid_invariant(seed in any::<u64>(), angle in 0.0f64..6.3, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.01).unwrap();
            let pts: Vec<Vector2<f64>> = (0..40).map(|k| {
                let a = 0.15 * k as f64;
                let r = 1.0 + noise.sample(&mut rng);
                Vector2::new(r * a.cos(), r * a.sin())
            }).collect();
            let a = fit_circle(&pts).unwrap();
            let b = fit_circle(&rigid(&pts, angle, Vector2::new(tx, ty))).unwrap();
            prop_assert!((a.radius - b.radius).abs() < 1e-10);
            for (x, y) in a.residuals.iter().zip(&b.residuals) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn circle_exact_on_noiseless(cx in -1.0f64..1.0, cy in -1.0f64..1.0, r in 0.01f64..2.0, n in 3usize..50) {
            let pts: Vec<Vector2<f64>> = (0..n).map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                Vector2::new(cx + r * a.cos(), cy + r * a.sin())
            }).collect();
            let fit = fit_circle(&pts).unwrap();
            prop_assert!(fit.residuals.iter().all(|&e| e <= 1e-10));
        }
    }
}
