//! Gaussian splat scenes: covariance construction, the AESF binary format
//! and seeded synthetic generators.
//!
//! All stored quantities are binary32 on disk. Generators quantize their
//! output to binary32 so that a saved scene loads back to the exact same
//! in-memory values.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const AESF_MAGIC: &[u8; 4] = b"AESF";
pub const AESF_VERSION: u32 = 1;
pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Stored quaternions are binary32; norms are checked against this.
pub const STORED_QUAT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub center: Vector3<f64>,
    /// Per-axis standard deviations, world units.
    pub scale: Vector3<f64>,
    /// Rotation as stored (w, x, y, z); normalized on use.
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianSplat {
    pub fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        GaussianSplat {
            center,
            scale: Vector3::repeat(sigma),
            rotation: Quaternion::identity(),
            opacity,
            color,
        }
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(self.rotation)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let vals = [
            self.center.as_slice(),
            self.scale.as_slice(),
            self.rotation.coords.as_slice(),
            self.color.as_slice(),
            &[self.opacity],
        ];
        if vals.iter().flat_map(|s| s.iter()).any(|v| !v.is_finite()) {
            return Err("non-finite field".into());
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(format!("scale must be positive, got {:?}", self.scale.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if (self.rotation.norm() - 1.0).abs() > STORED_QUAT_TOLERANCE {
            return Err(format!("quaternion norm {} is not 1", self.rotation.norm()));
        }
        Ok(())
    }
}

/// `R(q) diag(s^2) R(q)^T`.
pub fn covariance_of(g: &GaussianSplat) -> Matrix3<f64> {
    let r = g.unit_rotation().to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    r * s2 * r.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for p in points {
            any = true;
            min = min.inf(p);
            max = max.sup(p);
        }
        if !any {
            return Aabb {
                min: Vector3::zeros(),
                max: Vector3::zeros(),
            };
        }
        Aabb { min, max }
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Splat geometry plus a `feature_dim`-wide feature row per splat.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    splats: Vec<GaussianSplat>,
    feature_dim: usize,
    features: Vec<f64>,
    bbox: Aabb,
}

impl Scene {
    pub fn new(splats: Vec<GaussianSplat>, feature_dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != splats.len() * feature_dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} splats of dim {feature_dim}",
                features.len(),
                splats.len()
            )));
        }
        for (i, s) in splats.iter().enumerate() {
            s.check()
                .map_err(|reason| Error::domain(format!("splat {i}: {reason}")))?;
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::domain("non-finite feature value"));
        }
        let bbox = Aabb::of_points(splats.iter().map(|s| &s.center));
        Ok(Scene {
            splats,
            feature_dim,
            features,
            bbox,
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Scene::new(Vec::new(), feature_dim, Vec::new()).unwrap()
    }

    pub fn splats(&self) -> &[GaussianSplat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Row-major `len() x feature_dim()` features.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    /// Same geometry with a different feature block.
    pub fn with_features(&self, feature_dim: usize, features: Vec<f64>) -> Result<Scene> {
        Scene::new(self.splats.clone(), feature_dim, features)
    }
}

// ---------------------------------------------------------------------------
// AESF binary format

const AESF_HEADER: usize = 16;
const FIXED_FLOATS: usize = 3 + 3 + 4 + 1 + 3;

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let d = scene.feature_dim;
    let mut buf = Vec::with_capacity(AESF_HEADER + scene.len() * (FIXED_FLOATS + d) * 4);
    buf.extend_from_slice(AESF_MAGIC);
    buf.write_u32::<LittleEndian>(AESF_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(scene.len() as u32).unwrap();
    buf.write_u32::<LittleEndian>(d as u32).unwrap();
    for (i, s) in scene.splats.iter().enumerate() {
        let q = &s.rotation;
        let fixed = [
            s.center.x, s.center.y, s.center.z, s.scale.x, s.scale.y, s.scale.z, q.w, q.i, q.j, q.k,
            s.opacity, s.color.x, s.color.y, s.color.z,
        ];
        for v in fixed.iter().chain(scene.feature(i)) {
            buf.write_f32::<LittleEndian>(*v as f32).unwrap();
        }
    }
    buf
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    if bytes.len() < 4 {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: "truncated header".into(),
        });
    }
    if &bytes[..4] != AESF_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    if bytes.len() < AESF_HEADER {
        return Err(Error::Parse {
            offset: bytes.len(),
            reason: "truncated header".into(),
        });
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != AESF_VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("version mismatch: expected {AESF_VERSION}, found {version}"),
        });
    }
    let count = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let d = LittleEndian::read_u32(&bytes[12..16]) as usize;
    let record = (FIXED_FLOATS + d) * 4;
    let expected = record
        .checked_mul(count)
        .and_then(|n| n.checked_add(AESF_HEADER))
        .ok_or_else(|| Error::Parse {
            offset: 8,
            reason: "splat count overflows".into(),
        })?;
    if bytes.len() < expected {
        let rec = (bytes.len() - AESF_HEADER) / record;
        return Err(Error::Parse {
            offset: AESF_HEADER + rec * record,
            reason: format!("truncated record {rec} of {count}"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Parse {
            offset: expected,
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }

    let mut splats = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * d);
    let mut vals = vec![0f64; FIXED_FLOATS + d];
    for i in 0..count {
        let start = AESF_HEADER + i * record;
        for (k, v) in vals.iter_mut().enumerate() {
            let off = start + 4 * k;
            let x = LittleEndian::read_f32(&bytes[off..off + 4]);
            if !x.is_finite() {
                return Err(Error::Validation {
                    what: "splat",
                    offset: off,
                    reason: format!("record {i}: non-finite value"),
                });
            }
            *v = x as f64;
        }
        let splat = GaussianSplat {
            center: Vector3::new(vals[0], vals[1], vals[2]),
            scale: Vector3::new(vals[3], vals[4], vals[5]),
            rotation: Quaternion::new(vals[6], vals[7], vals[8], vals[9]),
            opacity: vals[10],
            color: Vector3::new(vals[11], vals[12], vals[13]),
        };
        splat.check().map_err(|reason| Error::Validation {
            what: "splat",
            offset: start,
            reason: format!("record {i}: {reason}"),
        })?;
        splats.push(splat);
        features.extend_from_slice(&vals[FIXED_FLOATS..]);
    }
    Scene::new(splats, d, features)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    /// `n^3` identical splats on a lattice centered at the origin.
    Grid { n: usize, spacing: f64, sigma: f64 },
    /// Splats uniform in the cube `[-half_extent, half_extent]^3`.
    Random { count: usize, half_extent: f64 },
    /// A dense bright ellipsoidal cluster plus dim clutter scattered around it.
    SubjectClutter {
        subject: usize,
        clutter: usize,
        subject_center: Vector3<f64>,
        subject_radii: Vector3<f64>,
        clutter_half_extent: Vector3<f64>,
    },
}

impl SyntheticKind {
    pub fn grid(n: usize) -> Self {
        SyntheticKind::Grid {
            n,
            spacing: 1.0,
            sigma: 0.1,
        }
    }

    pub fn random(count: usize) -> Self {
        SyntheticKind::Random {
            count,
            half_extent: 1.0,
        }
    }

    pub fn subject_clutter(subject: usize, clutter: usize) -> Self {
        SyntheticKind::SubjectClutter {
            subject,
            clutter,
            subject_center: Vector3::zeros(),
            subject_radii: Vector3::new(0.35, 0.3, 0.3),
            clutter_half_extent: Vector3::new(1.5, 0.6, 1.5),
        }
    }

    /// Parses a generator name with a default size: `grid`, `random` or
    /// `subject+clutter`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "grid" => Ok(Self::grid(3)),
            "random" => Ok(Self::random(200)),
            "subject+clutter" | "subject-clutter" => Ok(Self::subject_clutter(300, 120)),
            other => Err(Error::domain(format!("unknown generator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub feature_dim: usize,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind) -> Self {
        SyntheticSpec {
            kind,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn q32v(v: Vector3<f64>) -> Vector3<f64> {
    v.map(q32)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
    // uniform on S^3 via normalized Gaussian-ish sampling by rejection
    loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            let q = q / n;
            return Quaternion::new(q32(q.w), q32(q.i), q32(q.j), q32(q.k));
        }
    }
}

fn random_unit_features(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn make_synthetic_scene(spec: &SyntheticSpec, seed: u64) -> Result<Scene> {
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = Vec::new();
    let mut features = Vec::new();
    match &spec.kind {
        SyntheticKind::Grid { n, spacing, sigma } => {
            if !(*spacing > 0.0 && *sigma > 0.0) {
                return Err(Error::domain("grid spacing and sigma must be positive"));
            }
            let offset = 0.5 * (*n as f64 - 1.0) * spacing;
            for iz in 0..*n {
                for iy in 0..*n {
                    for ix in 0..*n {
                        let c = Vector3::new(ix as f64, iy as f64, iz as f64) * *spacing
                            - Vector3::repeat(offset);
                        splats.push(GaussianSplat::isotropic(
                            q32v(c),
                            q32(*sigma),
                            q32(0.8),
                            q32v(Vector3::new(0.8, 0.8, 0.8)),
                        ));
                    }
                }
            }
            let row = random_unit_features(&mut rng, d);
            for _ in 0..splats.len() {
                features.extend(row.iter().map(|v| q32(*v)));
            }
        }
        SyntheticKind::Random { count, half_extent } => {
            if !(*half_extent > 0.0) {
                return Err(Error::domain("random half extent must be positive"));
            }
            let h = *half_extent;
            for _ in 0..*count {
                let center = Vector3::new(
                    rng.random_range(-h..h),
                    rng.random_range(-h..h),
                    rng.random_range(-h..h),
                );
                let scale = Vector3::new(
                    rng.random_range(0.02..0.1),
                    rng.random_range(0.02..0.1),
                    rng.random_range(0.02..0.1),
                ) * h;
                let rotation = random_rotation(&mut rng);
                let opacity = rng.random_range(0.2..1.0);
                let color = Vector3::new(rng.random(), rng.random(), rng.random());
                splats.push(GaussianSplat {
                    center: q32v(center),
                    scale: q32v(scale),
                    rotation,
                    opacity: q32(opacity),
                    color: q32v(color),
                });
                features.extend(random_unit_features(&mut rng, d).into_iter().map(q32));
            }
        }
        SyntheticKind::SubjectClutter {
            subject,
            clutter,
            subject_center,
            subject_radii,
            clutter_half_extent,
        } => {
            let subject_base = random_unit_features(&mut rng, d);
            let clutter_base = random_unit_features(&mut rng, d);
            let inside = |p: &Vector3<f64>| {
                ((p - subject_center).component_div(subject_radii)).norm_squared() <= 1.0
            };
            for _ in 0..*subject {
                let p = loop {
                    let u = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    if u.norm_squared() <= 1.0 {
                        break subject_center + u.component_mul(subject_radii);
                    }
                };
                let scale = Vector3::new(
                    rng.random_range(0.04..0.07),
                    rng.random_range(0.04..0.07),
                    rng.random_range(0.04..0.07),
                );
                let rotation = random_rotation(&mut rng);
                let opacity = rng.random_range(0.7..0.95);
                let color = Vector3::new(
                    rng.random_range(0.85..1.0),
                    rng.random_range(0.6..0.8),
                    rng.random_range(0.2..0.4),
                );
                splats.push(GaussianSplat {
                    center: q32v(p),
                    scale: q32v(scale),
                    rotation,
                    opacity: q32(opacity),
                    color: q32v(color),
                });
                features.extend(
                    subject_base
                        .iter()
                        .map(|b| q32(b + 0.2 * rng.random_range(-1.0..1.0))),
                );
            }
            let h = clutter_half_extent;
            let mut placed = 0;
            while placed < *clutter {
                let p = Vector3::new(
                    rng.random_range(-h.x..h.x),
                    rng.random_range(-h.y..h.y),
                    rng.random_range(-h.z..h.z),
                );
                if inside(&p) {
                    continue;
                }
                let scale = Vector3::new(
                    rng.random_range(0.03..0.08),
                    rng.random_range(0.03..0.08),
                    rng.random_range(0.03..0.08),
                );
                let rotation = random_rotation(&mut rng);
                let opacity = rng.random_range(0.3..0.6);
                let g = rng.random_range(0.1..0.3);
                splats.push(GaussianSplat {
                    center: q32v(p),
                    scale: q32v(scale),
                    rotation,
                    opacity: q32(opacity),
                    color: q32v(Vector3::new(g, g, g + 0.05)),
                });
                features.extend(
                    clutter_base
                        .iter()
                        .map(|b| q32(b + 0.2 * rng.random_range(-1.0..1.0))),
                );
                placed += 1;
            }
        }
    }
    Scene::new(splats, d, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn covariance_closed_forms() {
        let mut g = GaussianSplat::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::zeros());
        assert_eq!(covariance_of(&g), Matrix3::identity());
        g.scale = Vector3::new(2.0, 1.0, 1.0);
        assert_eq!(covariance_of(&g), Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let g = GaussianSplat {
                center: Vector3::zeros(),
                scale: Vector3::new(
                    rng.random_range(0.1..2.0),
                    rng.random_range(0.1..2.0),
                    rng.random_range(0.1..2.0),
                ),
                rotation: random_rotation(&mut rng),
                opacity: 0.5,
                color: Vector3::zeros(),
            };
            let cov = covariance_of(&g);
            assert!((cov - cov.transpose()).norm() < 1e-15);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            let mut s2: Vec<f64> = g.scale.iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            s2.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&s2) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {s2:?}");
            }
            assert!(cov.cholesky().is_some());
        }
    }

    #[test]
    fn grid_layout() {
        let s = make_synthetic_scene(&SyntheticSpec::new(SyntheticKind::grid(3)), 1).unwrap();
        assert_eq!(s.len(), 27);
        for sp in s.splats() {
            for v in sp.center.iter() {
                assert!([-1.0, 0.0, 1.0].contains(v));
            }
        }
        assert_eq!(s.bbox().min, Vector3::repeat(-1.0));
        assert_eq!(s.bbox().max, Vector3::repeat(1.0));
    }

    #[test]
    fn generators_are_deterministic() {
        for kind in ["grid", "random", "subject+clutter"] {
            let spec = SyntheticSpec::new(SyntheticKind::by_name(kind).unwrap());
            let a = make_synthetic_scene(&spec, 42).unwrap();
            let b = make_synthetic_scene(&spec, 42).unwrap();
            assert_eq!(encode_scene(&a), encode_scene(&b));
        }
        assert!(SyntheticKind::by_name("torus").is_err());
    }

    #[test]
    fn subject_only_when_no_clutter() {
        let spec = SyntheticSpec::new(SyntheticKind::subject_clutter(50, 0));
        let s = make_synthetic_scene(&spec, 3).unwrap();
        assert_eq!(s.len(), 50);
        let radii = Vector3::new(0.35, 0.3, 0.3);
        assert!(s
            .splats()
            .iter()
            .all(|g| g.center.component_div(&radii).norm() <= 1.0 + 1e-6));
    }

    #[test]
    fn bbox_contains_centers() {
        let s = make_synthetic_scene(&SyntheticSpec::new(SyntheticKind::random(100)), 5).unwrap();
        assert!(s.splats().iter().all(|g| s.bbox().contains(&g.center)));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_scene(&Scene::empty(4));
        bytes[..4].copy_from_slice(b"XXXX");
        match decode_scene(&bytes) {
            Err(Error::Parse { offset: 0, reason }) => assert_eq!(reason, "bad magic"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_truncation() {
        let s = make_synthetic_scene(&SyntheticSpec::new(SyntheticKind::grid(2)), 1).unwrap();
        let mut bytes = encode_scene(&s);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_scene(&bad), Err(Error::Parse { offset: 4, .. })));
        bytes.truncate(bytes.len() - 3);
        let record = (FIXED_FLOATS + s.feature_dim()) * 4;
        match decode_scene(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, AESF_HEADER + 7 * record),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_opacity_rejected() {
        let s = make_synthetic_scene(&SyntheticSpec::new(SyntheticKind::grid(1)), 1).unwrap();
        let mut bytes = encode_scene(&s);
        let off = AESF_HEADER + 10 * 4;
        LittleEndian::write_f32(&mut bytes[off..off + 4], 1.5);
        match decode_scene(&bytes) {
            Err(Error::Validation { offset, reason, .. }) => {
                assert_eq!(offset, AESF_HEADER);
                assert!(reason.contains("opacity"));
            }
            other => panic!("{other:?}"),
        }
        LittleEndian::write_f32(&mut bytes[off..off + 4], f32::NAN);
        assert!(matches!(
            decode_scene(&bytes),
            Err(Error::Validation { offset, .. }) if offset == off
        ));
    }

    #[test]
    fn file_round_trip() {
        let s = make_synthetic_scene(&SyntheticSpec::new(SyntheticKind::subject_clutter(40, 10)), 8)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.aesf");
        save_scene(&s, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(std::fs::read(&path).unwrap(), encode_scene(&back));
    }

    proptest! {
        #[test]
        fn random_scenes_round_trip(seed in 0u64..1000, count in 0usize..30, d in 0usize..6) {
            let mut spec = SyntheticSpec::new(SyntheticKind::random(count));
            spec.feature_dim = d;
            let s = make_synthetic_scene(&spec, seed).unwrap();
            let bytes = encode_scene(&s);
            let back = decode_scene(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_scene(&back), bytes);
        }
    }
}
