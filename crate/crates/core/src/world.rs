//! Synthetic scenes, the two camera models and parametric weather corruption.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{area_resize, image_dims, Grid, Tensor};
use crate::seed::{rng_for, tag};

/// Axis-aligned region in scene-pixel coordinates, half-open on the right
/// and bottom edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeoRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl GeoRect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Parameter(format!(
                "degenerate rect ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width as u32,
            y1: height as u32,
        }
    }

    pub fn width(&self) -> usize {
        (self.x1 - self.x0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0) as usize
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 as usize <= width && self.y1 as usize <= height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &GeoRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Splits at the midpoints into `[top-left, top-right, bottom-left,
    /// bottom-right]`, matching row-major order of a 2x2 score map.
    pub fn quadrants(&self) -> Result<[GeoRect; 4]> {
        if self.width() < 2 || self.height() < 2 {
            return Err(Error::Shape(format!(
                "rect {}x{} too small to split into quadrants",
                self.width(),
                self.height()
            )));
        }
        let xm = self.x0 + (self.x1 - self.x0) / 2;
        let ym = self.y0 + (self.y1 - self.y0) / 2;
        Ok([
            GeoRect { x0: self.x0, y0: self.y0, x1: xm, y1: ym },
            GeoRect { x0: xm, y0: self.y0, x1: self.x1, y1: ym },
            GeoRect { x0: self.x0, y0: ym, x1: xm, y1: self.y1 },
            GeoRect { x0: xm, y0: ym, x1: self.x1, y1: self.y1 },
        ])
    }
}

/// Affine pixel -> world-coordinate map (axis aligned).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_width: 1.0,
            pixel_height: 1.0,
        }
    }
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_width: f64, pixel_height: f64) -> Result<Self> {
        let ok = [origin_x, origin_y, pixel_width, pixel_height]
            .iter()
            .all(|v| v.is_finite())
            && pixel_width != 0.0
            && pixel_height != 0.0;
        if !ok {
            return Err(Error::Parameter("geo transform must be finite and invertible".into()));
        }
        Ok(Self { origin_x, origin_y, pixel_width, pixel_height })
    }

    pub fn to_world(&self, px: f64, py: f64) -> (f64, f64) {
        (
            self.origin_x + px * self.pixel_width,
            self.origin_y + py * self.pixel_height,
        )
    }

    pub fn to_pixel(&self, wx: f64, wy: f64) -> (f64, f64) {
        (
            (wx - self.origin_x) / self.pixel_width,
            (wy - self.origin_y) / self.pixel_height,
        )
    }
}

/// Ground-truth world the leader and followers observe.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    width: usize,
    height: usize,
    num_classes: usize,
    labels: Grid<u16>,
    image: Tensor,
    geo: GeoTransform,
}

impl Scene {
    pub fn new(labels: Grid<u16>, image: Tensor, num_classes: usize, geo: GeoTransform) -> Result<Self> {
        let (h, w, c) = image_dims(&image)?;
        if c != 3 || (h, w) != labels.dims() {
            return Err(Error::Shape(format!(
                "scene image {h}x{w}x{c} does not match labels {}x{} RGB",
                labels.height(),
                labels.width()
            )));
        }
        if !(2..=u16::MAX as usize + 1).contains(&num_classes) {
            return Err(Error::Parameter(format!("num_classes {num_classes} out of range")));
        }
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Parameter(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { width: w, height: h, num_classes, labels, image, geo })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &Grid<u16> {
        &self.labels
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn rect(&self) -> GeoRect {
        GeoRect::full(self.width, self.height)
    }

    /// Ground-truth labels inside `rect`.
    pub fn labels_in(&self, rect: &GeoRect) -> Result<Grid<u16>> {
        self.check_rect(rect)?;
        self.labels
            .crop(rect.y0 as usize, rect.x0 as usize, rect.height(), rect.width())
    }

    fn check_rect(&self, rect: &GeoRect) -> Result<()> {
        if !rect.fits_within(self.width, self.height) {
            return Err(Error::Bounds(format!(
                "rect {rect:?} outside {}x{} scene",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Voronoi-partitioned scene: labels are region-structured and image colors
/// follow the labels plus seeded noise.
pub fn generate_scene(seed: u64, width: usize, height: usize, num_classes: usize) -> Result<Scene> {
    if width == 0 || height == 0 {
        return Err(Error::Parameter("scene dims must be positive".into()));
    }
    if num_classes < 2 || num_classes > u16::MAX as usize + 1 {
        return Err(Error::Parameter(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let mut rng = rng_for(seed, &[tag::SCENE]);
    let n_sites = (4 * num_classes).max(16);
    let sites: Vec<(f32, f32, u16, f32)> = (0..n_sites)
        .map(|i| {
            let x = rng.gen_range(0.0..width as f32);
            let y = rng.gen_range(0.0..height as f32);
            let class = if i < num_classes {
                i as u16
            } else {
                rng.gen_range(0..num_classes) as u16
            };
            let shade = rng.gen_range(-0.06f32..0.06);
            (x, y, class, shade)
        })
        .collect();
    let palette: Vec<[f32; 3]> = (0..num_classes)
        .map(|_| {
            [
                rng.gen_range(0.15f32..0.85),
                rng.gen_range(0.15f32..0.85),
                rng.gen_range(0.15f32..0.85),
            ]
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.04).expect("valid sigma");

    let mut labels = Vec::with_capacity(width * height);
    let mut image = Vec::with_capacity(width * height * 3);
    for r in 0..height {
        let py = r as f32 + 0.5;
        for c in 0..width {
            let px = c as f32 + 0.5;
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (i, &(sx, sy, _, _)) in sites.iter().enumerate() {
                let d = (sx - px) * (sx - px) + (sy - py) * (sy - py);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            let (_, _, class, shade) = sites[best];
            labels.push(class);
            for base in palette[class as usize] {
                let v = base + shade + noise.sample(&mut rng);
                image.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Scene::new(
        Grid::new(height, width, labels)?,
        Tensor::new(vec![height, width, 3], image)?,
        num_classes,
        GeoTransform::default(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Tensor,
    pub source_rect: GeoRect,
    pub resolution: Resolution,
}

/// Wide-area low-definition capture: the whole scene area-averaged down to
/// `target_h x target_w`.
pub fn leader_capture(scene: &Scene, target_h: usize, target_w: usize) -> Result<Observation> {
    if target_h == 0 || target_w == 0 || target_h > scene.height || target_w > scene.width {
        return Err(Error::Parameter(format!(
            "leader capture {target_h}x{target_w} must fit within {}x{} scene",
            scene.height, scene.width
        )));
    }
    Ok(Observation {
        image: area_resize(&scene.image, target_h, target_w)?,
        source_rect: scene.rect(),
        resolution: Resolution::Low,
    })
}

/// Focused high-definition capture: the native-resolution crop of `rect`.
pub fn follower_capture(scene: &Scene, rect: &GeoRect) -> Result<Observation> {
    scene.check_rect(rect)?;
    let (w, h) = (rect.width(), rect.height());
    let mut data = Vec::with_capacity(w * h * 3);
    let src = scene.image.data();
    for r in rect.y0 as usize..rect.y1 as usize {
        let start = (r * scene.width + rect.x0 as usize) * 3;
        data.extend_from_slice(&src[start..start + w * 3]);
    }
    Ok(Observation {
        image: Tensor::new(vec![h, w, 3], data)?,
        source_rect: *rect,
        resolution: Resolution::High,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    None,
    Snow,
    Fog,
    Frost,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [Self::None, Self::Snow, Self::Fog, Self::Frost];

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Snow => "snow",
            Self::Fog => "fog",
            Self::Frost => "frost",
        }
    }
}

pub const MAX_SEVERITY: u8 = 5;
const FROST_CELL: usize = 32;

/// Applies weather corruption. Severity 0 (or kind `None`) is the identity;
/// output is clamped to `[0, 1]`.
pub fn apply_corruption(obs: &Observation, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Observation> {
    if severity > MAX_SEVERITY {
        return Err(Error::Parameter(format!(
            "severity {severity} outside 0..={MAX_SEVERITY}"
        )));
    }
    if severity == 0 || kind == CorruptionKind::None {
        return Ok(obs.clone());
    }
    let (h, w, ch) = image_dims(&obs.image)?;
    let s = severity as f32;
    let mut rng = rng_for(seed, &[tag::CORRUPTION, kind as u64, severity as u64]);
    let src = obs.image.data();
    let data: Vec<f32> = match kind {
        CorruptionKind::None => unreachable!(),
        CorruptionKind::Fog => {
            let t = 0.12 * s;
            src.iter().map(|&x| (x * (1.0 - t) + t).clamp(0.0, 1.0)).collect()
        }
        CorruptionKind::Snow => {
            let density = 0.02 * s as f64;
            let lift = 0.05 * s;
            let mut out = Vec::with_capacity(src.len());
            for px in src.chunks_exact(ch) {
                let speck = rng.gen_bool(density);
                for &x in px {
                    out.push(if speck { 1.0 } else { (x + lift).clamp(0.0, 1.0) });
                }
            }
            out
        }
        CorruptionKind::Frost => {
            let amp = 0.08 * s;
            let gh = h / FROST_CELL + 2;
            let gw = w / FROST_CELL + 2;
            let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mut out = Vec::with_capacity(src.len());
            for r in 0..h {
                let fy = r as f32 / FROST_CELL as f32;
                let (iy, ty) = (fy as usize, fy.fract());
                for c in 0..w {
                    let fx = c as f32 / FROST_CELL as f32;
                    let (ix, tx) = (fx as usize, fx.fract());
                    let at = |y: usize, x: usize| lattice[y * gw + x];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    let n = top * (1.0 - ty) + bot * ty;
                    let base = (r * w + c) * ch;
                    for &x in &src[base..base + ch] {
                        out.push((x * (1.0 + amp * n)).clamp(0.0, 1.0));
                    }
                }
            }
            out
        }
    };
    Ok(Observation {
        image: Tensor::new(vec![h, w, ch], data)?,
        source_rect: obs.source_rect,
        resolution: obs.resolution,
    })
}

const SCENE_MAGIC: &[u8; 7] = b"SKYSCN1";

/// Writes the flat scene container: magic, `u32` width/height/num_classes,
/// `u16` labels, then `f32` RGB, all little-endian and row-major.
pub fn write_scene<W: Write>(scene: &Scene, mut out: W) -> Result<()> {
    out.write_all(SCENE_MAGIC)?;
    for v in [scene.width, scene.height, scene.num_classes] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(scene.labels.data().len() * 2 + scene.image.len() * 4);
    for &l in scene.labels.data() {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for &v in scene.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_scene<R: Read>(mut input: R) -> Result<Scene> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(Error::Frame("bad scene magic".into()));
    }
    let mut word = [0u8; 4];
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word) as usize;
    }
    let [width, height, num_classes] = header;
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0 && n <= 1 << 28)
        .ok_or_else(|| Error::Frame(format!("implausible scene dims {width}x{height}")))?;
    let mut raw = vec![0u8; n * 2];
    input.read_exact(&mut raw)?;
    let labels = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let mut raw = vec![0u8; n * 12];
    input.read_exact(&mut raw)?;
    let image = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Scene::new(
        Grid::new(height, width, labels)?,
        Tensor::new(vec![height, width, 3], image)?,
        num_classes,
        GeoTransform::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_scene(seed: u64) -> Scene {
        generate_scene(seed, 96, 64, 4).unwrap()
    }

    #[test]
    fn scene_generation_is_deterministic() {
        assert_eq!(small_scene(11), small_scene(11));
        assert_ne!(small_scene(11), small_scene(12));
    }

    #[test]
    fn two_class_scene_has_both_classes() {
        let s = generate_scene(5, 400, 300, 2).unwrap();
        let ones = s.labels().data().iter().filter(|&&l| l == 1).count();
        assert!(ones > 0 && ones < 400 * 300);
    }

    #[test]
    fn leader_capture_dims_and_identity() {
        let s = generate_scene(3, 1200, 800, 6).unwrap();
        let o = leader_capture(&s, 400, 600).unwrap();
        assert_eq!(o.image.shape(), &[400, 600, 3]);
        assert_eq!(o.resolution, Resolution::Low);
        assert_eq!(o.source_rect, s.rect());
        assert!((o.image.mean() - s.image().mean()).abs() < 1e-5);

        let small = small_scene(1);
        let same = leader_capture(&small, 64, 96).unwrap();
        assert_eq!(&same.image, small.image());
    }

    #[test]
    fn leader_capture_of_constant_scene_is_constant() {
        let labels = Grid::filled(40, 60, 0u16).unwrap();
        let image = Tensor::filled(&[40, 60, 3], 0.3).unwrap();
        let s = Scene::new(labels, image, 2, GeoTransform::default()).unwrap();
        let o = leader_capture(&s, 15, 22).unwrap();
        assert!(o.image.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn follower_capture_crops_exactly() {
        let s = generate_scene(8, 1200, 800, 6).unwrap();
        let q = s.rect().quadrants().unwrap();
        let o = follower_capture(&s, &q[3]).unwrap();
        assert_eq!(o.image.shape(), &[400, 600, 3]);
        assert_eq!(o.resolution, Resolution::High);
        for (r, c) in [(0usize, 0usize), (17, 301), (399, 599)] {
            for k in 0..3 {
                let a = o.image.data()[(r * 600 + c) * 3 + k];
                let b = s.image().data()[((r + 400) * 1200 + c + 600) * 3 + k];
                assert_eq!(a, b);
            }
        }
        let full = follower_capture(&s, &s.rect()).unwrap();
        assert_eq!(&full.image, s.image());
        let bad = GeoRect::new(1100, 0, 1300, 10).unwrap();
        assert!(matches!(follower_capture(&s, &bad), Err(Error::Bounds(_))));
    }

    #[test]
    fn corruption_identity_and_fog_value() {
        let s = small_scene(2);
        let o = leader_capture(&s, 64, 96).unwrap();
        for kind in CorruptionKind::ALL {
            assert_eq!(apply_corruption(&o, kind, 0, 9).unwrap(), o);
        }
        let black = Observation {
            image: Tensor::zeros(&[8, 8, 3]).unwrap(),
            source_rect: GeoRect::full(8, 8),
            resolution: Resolution::Low,
        };
        let fogged = apply_corruption(&black, CorruptionKind::Fog, 5, 0).unwrap();
        assert!(fogged.image.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        assert!(apply_corruption(&black, CorruptionKind::Fog, 6, 0).is_err());
    }

    #[test]
    fn corruption_is_deterministic_and_clamped() {
        let o = leader_capture(&small_scene(4), 64, 96).unwrap();
        for kind in [CorruptionKind::Snow, CorruptionKind::Fog, CorruptionKind::Frost] {
            let a = apply_corruption(&o, kind, 5, 42).unwrap();
            let b = apply_corruption(&o, kind, 5, 42).unwrap();
            assert_eq!(a, b);
            assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_ne!(a, o);
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let s = small_scene(21);
        let mut buf = Vec::new();
        write_scene(&s, &mut buf).unwrap();
        assert_eq!(&buf[..7], b"SKYSCN1");
        assert_eq!(buf.len(), 7 + 12 + 96 * 64 * 2 + 96 * 64 * 12);
        assert_eq!(read_scene(buf.as_slice()).unwrap(), s);
        assert!(read_scene(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn geo_transform_inverts() {
        let g = GeoTransform::new(100.0, -50.0, 0.5, -0.25).unwrap();
        let (x, y) = g.to_world(12.0, 7.0);
        let (px, py) = g.to_pixel(x, y);
        assert!((px - 12.0).abs() < 1e-12 && (py - 7.0).abs() < 1e-12);
        assert!(GeoTransform::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn fog_mean_is_monotone_in_severity(seed in 0u64..1000) {
            let o = leader_capture(&generate_scene(seed, 48, 32, 3).unwrap(), 32, 48).unwrap();
            let mut last = o.image.mean();
            for sev in 1..=5 {
                let m = apply_corruption(&o, CorruptionKind::Fog, sev, seed).unwrap().image.mean();
                prop_assert!(m >= last - 1e-9);
                last = m;
            }
        }
    }
}
