//! Synthetic rigid-motion scenes and the pair file format.
//!
//! Scenes are a few boxes and spheres inside a 4 m cube in front of the
//! camera (x, y in [-2, 2], z in [1, 5]). Each object gets its own rigid
//! motion. Occlusion is simulated by replacing the PC2 counterparts of a
//! random subset of PC1 points with background points and clearing their
//! mask bits.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::ByteReader;
use crate::points::{random_subsample, PointCloud};
use crate::scalar::{add3, sub3, Point3, Real};

pub const PAIR_MAGIC: &[u8; 7] = b"SFPAIR1";
pub const MANIFEST: &str = "manifest.txt";

const CUBE_MIN: [f64; 3] = [-2.0, -2.0, 1.0];
const CUBE_MAX: [f64; 3] = [2.0, 2.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair<T> {
    pub pc1: PointCloud<T>,
    pub pc2: PointCloud<T>,
    pub gt_flow: Vec<Point3<T>>,
    /// `true` where the PC1 point has a counterpart in PC2.
    pub mask: Vec<bool>,
}

pub type ScenePair64 = ScenePair<f64>;

impl<T: Real> ScenePair<T> {
    pub fn validate(&self) -> Result<()> {
        self.pc1.validate()?;
        self.pc2.validate()?;
        let n = self.pc1.len();
        if self.gt_flow.len() != n || self.mask.len() != n {
            return Err(Error::invalid(format!(
                "pair: {n} PC1 points, {} flow rows, {} mask entries",
                self.gt_flow.len(),
                self.mask.len()
            )));
        }
        if self.gt_flow.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ground-truth flow".into()));
        }
        Ok(())
    }

    /// Rigid copy of the pair: both clouds are rotated by `angle` about the
    /// vertical (y) axis through the PC1 centroid, then PC1 is shifted by
    /// `t1` and PC2 by `t2`. The flow becomes `R f + t2 - t1`, so it stays
    /// exact for every point.
    pub fn transformed(&self, angle: f64, t1: [f64; 3], t2: [f64; 3]) -> Self {
        let n = self.pc1.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.pc1.coords {
            for a in 0..3 {
                c[a] += p[a].to_f64_lossless() / n;
            }
        }
        let rot = rotation([0.0, 1.0, 0.0], angle);
        let f64p = |p: &Point3<T>| p.map(|v| v.to_f64_lossless());
        let back = |p: [f64; 3]| p.map(T::lit);
        let place = |p: &Point3<T>, t: &[f64; 3]| back(add3(&add3(&mat_vec(&rot, sub3(&f64p(p), &c)), &c), t));
        let dt = sub3(&t2, &t1);
        Self {
            pc1: PointCloud {
                coords: self.pc1.coords.iter().map(|p| place(p, &t1)).collect(),
                ..self.pc1.clone()
            },
            pc2: PointCloud {
                coords: self.pc2.coords.iter().map(|p| place(p, &t2)).collect(),
                ..self.pc2.clone()
            },
            gt_flow: self.gt_flow.iter().map(|f| back(add3(&mat_vec(&rot, f64p(f)), &dt))).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Independent random subsets (or permutations when `n` equals the
    /// cloud size) of both clouds; flow and mask follow PC1.
    pub fn resample(&self, n: usize, seed: u64) -> Result<Self> {
        let (pc1, idx) = random_subsample(&self.pc1, n, seed)?;
        let (pc2, _) = random_subsample(&self.pc2, n, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Self {
            pc1,
            pc2,
            gt_flow: idx.iter().map(|&i| self.gt_flow[i]).collect(),
            mask: idx.iter().map(|&i| self.mask[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGenConfig {
    pub n_points: usize,
    pub n_objects: usize,
    /// Translation magnitudes are drawn from `[t/2, t]` (meters).
    pub translation_range: f64,
    /// Rotation angles are drawn from `[-r, r]` (radians).
    pub rotation_range: f64,
    pub noise_sigma: f64,
    pub occlusion_fraction: f64,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            n_points: 2048,
            n_objects: 3,
            translation_range: 0.4,
            rotation_range: 0.08,
            noise_sigma: 0.0,
            occlusion_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.n_objects == 0 {
            return Err(Error::Config("scene needs at least one point and one object".into()));
        }
        if self.n_objects > self.n_points {
            return Err(Error::Config("more objects than points".into()));
        }
        for (name, v) in [
            ("translation_range", self.translation_range),
            ("rotation_range", self.rotation_range),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config(format!(
                "occlusion_fraction must lie in [0, 1), got {}",
                self.occlusion_fraction
            )));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rodrigues rotation matrix.
fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

enum Shape {
    Box([f64; 3]),
    Sphere(f64),
}

impl Shape {
    fn random(rng: &mut impl Rng) -> Self {
        if rng.gen_bool(0.5) {
            Shape::Box([rng.gen_range(0.15..0.5), rng.gen_range(0.15..0.5), rng.gen_range(0.15..0.5)])
        } else {
            Shape::Sphere(rng.gen_range(0.2..0.5))
        }
    }

    /// A point on the surface, relative to the center.
    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        match *self {
            Shape::Sphere(r) => {
                let u = unit_vector(rng);
                [u[0] * r, u[1] * r, u[2] * r]
            }
            Shape::Box(h) => {
                // pick a face with probability proportional to its area
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (a, &area) in areas.iter().enumerate() {
                    if pick < 2.0 * area {
                        axis = a;
                        break;
                    }
                    pick -= 2.0 * area;
                }
                let mut p = [
                    rng.gen_range(-h[0]..=h[0]),
                    rng.gen_range(-h[1]..=h[1]),
                    rng.gen_range(-h[2]..=h[2]),
                ];
                p[axis] = if rng.gen_bool(0.5) { h[axis] } else { -h[axis] };
                p
            }
        }
    }
}

fn background_point(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(CUBE_MIN[0]..CUBE_MAX[0]),
        rng.gen_range(CUBE_MIN[1]..CUBE_MAX[1]),
        rng.gen_range(CUBE_MIN[2]..CUBE_MAX[2]),
    ]
}

pub fn generate<T: Real>(cfg: &SceneGenConfig) -> Result<ScenePair<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_points;
    let mut pc1 = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for o in 0..cfg.n_objects {
        let count = n / cfg.n_objects + usize::from(o < n % cfg.n_objects);
        let shape = Shape::random(&mut rng);
        let margin = 0.5;
        let center = [
            rng.gen_range(CUBE_MIN[0] + margin..CUBE_MAX[0] - margin),
            rng.gen_range(CUBE_MIN[1] + margin..CUBE_MAX[1] - margin),
            rng.gen_range(CUBE_MIN[2] + margin..CUBE_MAX[2] - margin),
        ];
        let dir = unit_vector(&mut rng);
        let r = cfg.translation_range;
        let mag = if r > 0.0 { rng.gen_range(r / 2.0..=r) } else { 0.0 };
        let t = [dir[0] * mag, dir[1] * mag, dir[2] * mag];
        let axis = unit_vector(&mut rng);
        let a = cfg.rotation_range;
        let angle = if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let rot = rotation(axis, angle);
        for _ in 0..count {
            let local = shape.sample(&mut rng);
            let p = add3(&center, &local);
            let moved = add3(&add3(&mat_vec(&rot, local), &center), &t);
            pc1.push(p);
            gt.push(if angle == 0.0 { t } else { sub3(&moved, &p) });
        }
    }
    let mut pc2: Vec<[f64; 3]> = pc1.iter().zip(&gt).map(|(p, f)| add3(p, f)).collect();
    let mut mask = vec![true; n];
    let n_occ = (cfg.occlusion_fraction * n as f64).floor() as usize;
    if n_occ > 0 {
        for i in rand::seq::index::sample(&mut rng, n, n_occ).into_iter() {
            pc2[i] = background_point(&mut rng);
            mask[i] = false;
        }
    }
    if cfg.noise_sigma > 0.0 {
        // Box-Muller
        for p in pc2.iter_mut() {
            for v in p.iter_mut() {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                *v += cfg.noise_sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
    let conv = |v: Vec<[f64; 3]>| -> Vec<Point3<T>> { v.into_iter().map(|p| p.map(T::lit)).collect() };
    let pair = ScenePair {
        pc1: PointCloud::new(conv(pc1))?,
        pc2: PointCloud::new(conv(pc2))?,
        gt_flow: conv(gt),
        mask,
    };
    pair.validate()?;
    Ok(pair)
}

// ------------------------------------------------------------------ files

pub fn pair_to_bytes<T: Real>(pair: &ScenePair<T>) -> Vec<u8> {
    let all_valid = pair.mask.iter().all(|&m| m);
    let mut out = Vec::new();
    out.extend_from_slice(PAIR_MAGIC);
    out.extend_from_slice(&(pair.pc1.len() as u32).to_le_bytes());
    out.extend_from_slice(&(pair.pc2.len() as u32).to_le_bytes());
    out.push(u8::from(!all_valid));
    for p in pair.pc1.coords.iter().chain(&pair.pc2.coords).chain(&pair.gt_flow) {
        for v in p {
            out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
    }
    if !all_valid {
        out.extend(pair.mask.iter().map(|&m| u8::from(m)));
    }
    out
}

pub fn pair_from_bytes<T: Real>(bytes: &[u8]) -> Result<ScenePair<T>> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(7)? != PAIR_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad pair magic".into(),
        });
    }
    let n1 = r.u32()? as usize;
    let n2 = r.u32()? as usize;
    let flags_at = r.pos as u64;
    let flags = r.u8()?;
    if flags & !1 != 0 {
        return Err(Error::Format {
            offset: flags_at,
            msg: format!("unknown flag bits {flags:#04x}"),
        });
    }
    let points = |n: usize, r: &mut ByteReader| -> Result<Vec<Point3<T>>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push([T::from_f64_lossy(r.f64()?), T::from_f64_lossy(r.f64()?), T::from_f64_lossy(r.f64()?)]);
        }
        Ok(v)
    };
    let c1 = points(n1, &mut r)?;
    let c2 = points(n2, &mut r)?;
    let gt = points(n1, &mut r)?;
    let mask = if flags & 1 == 1 {
        let at = r.pos as u64;
        let raw = r.take(n1)?;
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(Error::Format {
                offset: at + i as u64,
                msg: format!("mask byte {} is not 0 or 1", raw[i]),
            });
        }
        raw.iter().map(|&b| b == 1).collect()
    } else {
        vec![true; n1]
    };
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes; header declares n1={n1}, n2={n2}", bytes.len() - r.pos),
        });
    }
    let pair = ScenePair {
        pc1: PointCloud::new(c1)?,
        pc2: PointCloud::new(c2)?,
        gt_flow: gt,
        mask,
    };
    pair.validate()?;
    Ok(pair)
}

pub fn write_pair<T: Real>(pair: &ScenePair<T>, path: &Path) -> Result<()> {
    pair.validate()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&pair_to_bytes(pair)).map_err(|e| Error::io(path, e))
}

pub fn read_pair<T: Real>(path: &Path) -> Result<ScenePair<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    pair_from_bytes(&bytes)
}

pub fn pair_file_name(index: usize) -> String {
    format!("pair_{index:06}.sfp")
}

/// Writes `count` pairs seeded `cfg.seed + i` plus a manifest; returns the
/// file names.
pub fn generate_dataset(cfg: &SceneGenConfig, dir: &Path, count: usize) -> Result<Vec<String>> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let c = SceneGenConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let pair = generate::<f64>(&c)?;
        let name = pair_file_name(i);
        write_pair(&pair, &dir.join(&name))?;
        names.push(name);
    }
    write_manifest(&dir.join(MANIFEST), &names)?;
    Ok(names)
}

pub fn write_manifest(path: &Path, names: &[String]) -> Result<()> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Pair files of a data directory: the manifest when present, otherwise
/// every `*.sfp` file, sorted.
pub fn list_pairs(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join(MANIFEST);
    let names = if manifest.exists() {
        read_manifest(&manifest)?
    } else {
        let mut names = vec![];
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".sfp") {
                names.push(name);
            }
        }
        names.sort();
        names
    };
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn load_dir<T: Real>(dir: &Path) -> Result<Vec<ScenePair<T>>> {
    list_pairs(dir)?.iter().map(|p| read_pair(p)).collect()
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Seeded disjoint partition of the `*.sfp` files in `dir`. Writes one sorted
/// manifest `<name>.txt` per fraction and returns the lists.
pub fn make_split(dir: &Path, fractions: &[f64], seed: u64) -> Result<Vec<Vec<String>>> {
    if fractions.is_empty() || fractions.len() > SPLIT_NAMES.len() {
        return Err(Error::Config(format!("1 to 3 split fractions expected, got {}", fractions.len())));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut names = vec![];
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".sfp") {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(Error::invalid(format!("no pair files in {}", dir.display())));
    }
    names.sort();
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = names.len();
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut acc = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if i + 1 == fractions.len() { n } else { ((acc * n as f64).round() as usize).min(n) };
        let mut part = names[start..end.max(start)].to_vec();
        part.sort();
        start = end.max(start);
        write_manifest(&dir.join(format!("{}.txt", SPLIT_NAMES[i])), &part)?;
        out.push(part);
    }
    Ok(out)
}
