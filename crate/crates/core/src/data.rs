//! Dataset ingestion, synthetic generators, source metameasures and the
//! on-disk cloud container.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linearized::ReferenceMeasure;
use crate::measures::{MetaBatch, Permutation, PointCloud};
use crate::seed;

pub const DATASET_MAGIC: &[u8; 7] = b"WOWDS1\0";
pub const DATASET_VERSION: u32 = 1;
const FLAG_PERMUTATIONS: u32 = 1;
const IDX_MAGIC: u32 = 0x0000_0803;

/// `N` points drawn uniformly on the circle of radius `radius` around `center`.
pub fn gen_circle_cloud(center: [f64; 2], radius: f64, n: usize, seed: u64) -> Result<PointCloud> {
    if !(radius > 0.0) || n == 0 {
        return Err(Error::input(format!(
            "circle needs radius > 0 and n >= 1, got {radius}, {n}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut coords = Array2::zeros((2, n));
    for j in 0..n {
        let (x, y): (f64, f64) = loop {
            let e = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            if e != (0.0, 0.0) {
                break e;
            }
        };
        let norm = x.hypot(y);
        coords[[0, j]] = center[0] + radius * x / norm;
        coords[[1, j]] = center[1] + radius * y / norm;
    }
    PointCloud::new(coords)
}

/// Rings of fixed radius centred at `(h, vertical_offset)` with `h` uniform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circles {
    pub radius: f64,
    pub vertical_offset: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl Circles {
    pub fn source() -> Self {
        Self {
            radius: 0.5,
            vertical_offset: 0.0,
            h_min: -20.0,
            h_max: 20.0,
        }
    }

    pub fn target() -> Self {
        Self {
            radius: 2.0,
            vertical_offset: 10.0,
            ..Self::source()
        }
    }

    pub fn with_center(&self, h: f64, n: usize, seed: u64) -> Result<PointCloud> {
        gen_circle_cloud([h, self.vertical_offset], self.radius, n, seed)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let h = seed::rng(seed).random_range(self.h_min..=self.h_max);
        self.with_center(h, n, seed::derive(seed, "circle-points", 0))
    }
}

/// Maps an `H × W` intensity image to `N` points in `[0, 1]²`.
///
/// Pixels are drawn with probability proportional to intensity; each draw is
/// placed uniformly inside its pixel cell. Row 0 is the top of the image, so
/// it maps to the largest `y`.
pub fn image_to_cloud(image: ArrayView2<'_, f64>, n: usize, seed: u64) -> Result<PointCloud> {
    let (h, w) = image.dim();
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::input("image_to_cloud needs a non-empty image and n >= 1"));
    }
    if image.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::input("image intensities must be finite and non-negative"));
    }
    let mut cumulative = Vec::with_capacity(h * w);
    let mut total = 0.0;
    for &v in image.iter() {
        total += v;
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::input("image has zero total mass"));
    }
    let mut rng = seed::rng(seed);
    let mut coords = Array2::zeros((2, n));
    for j in 0..n {
        let u = rng.random_range(0.0..total);
        let k = cumulative.partition_point(|&c| c <= u).min(h * w - 1);
        let (r, c) = (k / w, k % w);
        coords[[0, j]] = (c as f64 + rng.random_range(0.0..1.0)) / w as f64;
        coords[[1, j]] = ((h - 1 - r) as f64 + rng.random_range(0.0..1.0)) / h as f64;
    }
    PointCloud::new(coords)
}

/// Parses an IDX3 unsigned-byte image file; pixels are scaled to `[0, 1]`.
pub fn parse_idx(data: &[u8]) -> Result<Vec<Array2<f64>>> {
    let be = |off: usize| -> Result<u32> {
        data.get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| {
                Error::format(
                    off as u64,
                    format!("truncated header: expected 16 bytes, file has {}", data.len()),
                )
            })
    };
    let magic = be(0)?;
    if magic != IDX_MAGIC {
        return Err(Error::format(
            0,
            format!("bad IDX magic {magic:#010x}, expected {IDX_MAGIC:#010x}"),
        ));
    }
    let (count, rows, cols) = (be(4)? as usize, be(8)? as usize, be(12)? as usize);
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    let actual = data.len() - 16;
    if actual != expected {
        return Err(Error::format(
            16,
            format!("IDX payload length {actual} bytes, expected {expected} ({count} x {rows} x {cols})"),
        ));
    }
    Ok(data[16..]
        .chunks_exact((rows * cols).max(1))
        .take(count)
        .map(|px| Array2::from_shape_fn((rows, cols), |(r, c)| px[r * cols + c] as f64 / 255.0))
        .collect())
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<Vec<Array2<f64>>> {
    parse_idx(&std::fs::read(path)?)
}

/// Clouds of a common dimension, optionally with per-cloud alignment
/// permutations to a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudDataset {
    dim: usize,
    clouds: Vec<PointCloud>,
    permutations: Option<Vec<Permutation>>,
}

impl CloudDataset {
    pub fn new(dim: usize, clouds: Vec<PointCloud>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("dataset dimension must be positive"));
        }
        if let Some((k, c)) = clouds.iter().enumerate().find(|(_, c)| c.dim() != dim) {
            return Err(Error::shape(format!(
                "cloud {k} has dimension {}, dataset {dim}",
                c.dim()
            )));
        }
        Ok(Self {
            dim,
            clouds,
            permutations: None,
        })
    }

    pub fn with_permutations(mut self, perms: Vec<Permutation>) -> Result<Self> {
        if perms.len() != self.clouds.len() {
            return Err(Error::shape(format!(
                "{} permutations for {} clouds",
                perms.len(),
                self.clouds.len()
            )));
        }
        if let Some((k, _)) = perms
            .iter()
            .zip(&self.clouds)
            .enumerate()
            .find(|(_, (p, c))| p.len() != c.count())
        {
            return Err(Error::shape(format!("permutation {k} does not match its cloud size")));
        }
        self.permutations = Some(perms);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn get(&self, i: usize) -> &PointCloud {
        &self.clouds[i]
    }

    pub fn permutations(&self) -> Option<&[Permutation]> {
        self.permutations.as_deref()
    }

    /// Common point count, if every cloud has the same one.
    pub fn uniform_count(&self) -> Option<usize> {
        let n = self.clouds.first()?.count();
        self.clouds.iter().all(|c| c.count() == n).then_some(n)
    }

    pub fn to_meta_batch(&self) -> Result<MetaBatch> {
        MetaBatch::new(self.clouds.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.usize(self.dim)?;
        w.usize(self.clouds.len())?;
        w.u32(if self.permutations.is_some() {
            FLAG_PERMUTATIONS
        } else {
            0
        });
        for (k, c) in self.clouds.iter().enumerate() {
            w.usize(c.count())?;
            c.coords().iter().for_each(|&v| w.f64(v));
            if let Some(perms) = &self.permutations {
                for &j in perms[k].as_slice() {
                    w.usize(j)?;
                }
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect_magic(DATASET_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(at, format!("unsupported dataset version {version}")));
        }
        let at = r.offset();
        let dim = r.usize("dim")?;
        if dim == 0 {
            return Err(Error::format(at, "dataset dimension is zero"));
        }
        let count = r.usize("cloud count")?;
        let at = r.offset();
        let flags = r.u32("flags")?;
        if flags & !FLAG_PERMUTATIONS != 0 {
            return Err(Error::format(at, format!("unknown flags {flags:#x}")));
        }
        let has_perms = flags & FLAG_PERMUTATIONS != 0;
        let mut clouds = Vec::with_capacity(count.min(1 << 20));
        let mut perms = Vec::new();
        for k in 0..count {
            let at = r.offset();
            let n = r.usize("cloud size")?;
            if n == 0 {
                return Err(Error::format(at, format!("cloud {k} is empty")));
            }
            let len = dim
                .checked_mul(n)
                .ok_or_else(|| Error::format(at, format!("cloud {k} size overflows")))?;
            let at = r.offset();
            let values = r.f64s(len, "cloud coordinates")?;
            let cloud =
                PointCloud::from_row_major(dim, n, values).map_err(|e| Error::format(at, format!("cloud {k}: {e}")))?;
            clouds.push(cloud);
            if has_perms {
                let at = r.offset();
                let map = (0..n).map(|_| r.usize("permutation")).collect::<Result<Vec<_>>>()?;
                perms.push(Permutation::new(map).map_err(|e| Error::format(at, format!("cloud {k}: {e}")))?);
            }
        }
        r.expect_end()?;
        let ds = Self::new(dim, clouds)?;
        if has_perms {
            ds.with_permutations(perms)
        } else {
            Ok(ds)
        }
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &CloudDataset) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<CloudDataset> {
    CloudDataset::from_bytes(&std::fs::read(path)?)
}

/// A distribution over clouds that batches can be drawn from.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    /// i.i.d. `N(0, σ²)` entries with `σ ~ Unif[lo, hi]` per cloud.
    PureNoise { sigma: (f64, f64), dim: usize },
    /// Reference columns plus i.i.d. `N(0, σ²)` noise, `σ ~ Unif[lo, hi]` per
    /// cloud. Clouds come out ordered like the reference.
    BarycentricNoise {
        sigma: (f64, f64),
        reference: ReferenceMeasure,
    },
    /// Uniform draws from a stored dataset.
    Empirical { dataset: Arc<CloudDataset> },
    /// Synthetic rings.
    Circles(Circles),
}

impl SourceSpec {
    pub fn pure_noise(lo: f64, hi: f64, dim: usize) -> Result<Self> {
        check_sigma(lo, hi)?;
        if dim == 0 {
            return Err(Error::config("pure noise dimension must be positive"));
        }
        Ok(SourceSpec::PureNoise { sigma: (lo, hi), dim })
    }

    pub fn barycentric_noise(lo: f64, hi: f64, reference: ReferenceMeasure) -> Result<Self> {
        check_sigma(lo, hi)?;
        Ok(SourceSpec::BarycentricNoise {
            sigma: (lo, hi),
            reference,
        })
    }

    pub fn empirical(dataset: Arc<CloudDataset>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::input("empirical source dataset is empty"));
        }
        Ok(SourceSpec::Empirical { dataset })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SourceSpec::PureNoise { .. } => "pure_noise",
            SourceSpec::BarycentricNoise { .. } => "barycentric_noise",
            SourceSpec::Empirical { .. } => "empirical",
            SourceSpec::Circles(_) => "circles",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SourceSpec::PureNoise { dim, .. } => *dim,
            SourceSpec::BarycentricNoise { reference, .. } => reference.dim(),
            SourceSpec::Empirical { dataset } => dataset.dim(),
            SourceSpec::Circles(_) => 2,
        }
    }
}

fn check_sigma(lo: f64, hi: f64) -> Result<()> {
    if !(lo >= 0.0) || !(lo <= hi) || !hi.is_finite() {
        return Err(Error::config(format!(
            "sigma range [{lo}, {hi}] must satisfy 0 <= lo <= hi"
        )));
    }
    Ok(())
}

fn sample_sigma<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One cloud of `n` points; `index` picks the dataset cloud for empirical sources.
pub(crate) fn draw_one(spec: &SourceSpec, n: usize, index: Option<usize>, seed: u64) -> Result<PointCloud> {
    let mut rng = seed::rng(seed);
    match spec {
        SourceSpec::PureNoise { sigma, dim } => {
            let s = sample_sigma(*sigma, &mut rng);
            PointCloud::new(Array2::from_shape_simple_fn((*dim, n), || {
                s * rng.sample::<f64, _>(StandardNormal)
            }))
        }
        SourceSpec::BarycentricNoise { sigma, reference } => {
            if reference.count() != n {
                return Err(Error::shape(format!(
                    "barycentric noise needs n equal to the reference size {}, got {n}",
                    reference.count()
                )));
            }
            let s = sample_sigma(*sigma, &mut rng);
            let coords = reference
                .cloud()
                .coords()
                .mapv(|v| v + s * rng.sample::<f64, _>(StandardNormal));
            PointCloud::new(coords)
        }
        SourceSpec::Empirical { dataset } => {
            let k = index.unwrap_or_else(|| rng.random_range(0..dataset.len()));
            subsample(dataset.get(k), n, &mut rng)
        }
        SourceSpec::Circles(c) => c.sample(n, seed::derive(seed, "circle", 0)),
    }
}

/// Random `n`-point subset, or the cloud itself when it already has `n` points.
fn subsample<R: Rng + ?Sized>(c: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    if c.count() == n {
        return Ok(c.clone());
    }
    if c.count() < n {
        return Err(Error::shape(format!(
            "cannot draw {n} points from a {}-point cloud",
            c.count()
        )));
    }
    let mut cols = index::sample(rng, c.count(), n).into_vec();
    cols.sort_unstable();
    PointCloud::new(c.coords().select(ndarray::Axis(1), &cols))
}

/// `b` clouds of `n` points from `spec`.
pub fn draw_source(spec: &SourceSpec, n: usize, b: usize, seed: u64) -> Result<MetaBatch> {
    if b == 0 || n == 0 {
        return Err(Error::input("draw_source needs n >= 1 and b >= 1"));
    }
    let clouds = (0..b as u64)
        .map(|k| draw_one(spec, n, None, seed::derive(seed, "source-cloud", k)))
        .collect::<Result<Vec<_>>>()?;
    MetaBatch::new(clouds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearized::align_to_reference;
    use ndarray::array;

    #[test]
    fn circle_points_on_ring() {
        let c = gen_circle_cloud([3.0, -1.0], 0.5, 200, 1).unwrap();
        for j in 0..200 {
            let p = c.point(j);
            assert!(((p[0] - 3.0).hypot(p[1] + 1.0) - 0.5).abs() <= 1e-9);
        }
        assert_eq!(c, gen_circle_cloud([3.0, -1.0], 0.5, 200, 1).unwrap());
        assert!(gen_circle_cloud([0.0, 0.0], 0.0, 5, 1).is_err());
    }

    #[test]
    fn circles_metameasures() {
        let s = Circles::source();
        let t = Circles::target();
        for seed in 0..50 {
            let c = s.sample(30, seed).unwrap();
            let m = c.mean();
            assert!(m[0].abs() <= 20.5 && m[1].abs() <= 0.5);
            let c = t.sample(30, seed).unwrap();
            let m = c.mean();
            assert!((m[1] - 10.0).abs() <= 2.0);
        }
    }

    #[test]
    fn image_examples() {
        let mut img = Array2::zeros((4, 5));
        img[[1, 3]] = 0.7;
        let c = image_to_cloud(img.view(), 50, 3).unwrap();
        for j in 0..50 {
            let p = c.point(j);
            assert!((0.6..=0.8).contains(&p[0]), "x {}", p[0]);
            assert!((0.5..=0.75).contains(&p[1]), "y {}", p[1]);
        }
        assert_eq!(c, image_to_cloud(img.view(), 50, 3).unwrap());
        assert!(image_to_cloud(Array2::zeros((2, 2)).view(), 5, 0).is_err());
    }

    #[test]
    fn uniform_image_quadrants() {
        let img = Array2::ones((28, 28));
        let n = 100_000;
        let c = image_to_cloud(img.view(), n, 7).unwrap();
        let mut q = [0.0f64; 4];
        for j in 0..n {
            let p = c.point(j);
            assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            q[(p[0] >= 0.5) as usize + 2 * (p[1] >= 0.5) as usize] += 1.0;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for v in q {
            assert!((v - n as f64 * 0.25).abs() <= 3.0 * sigma);
        }
    }

    fn idx_bytes(magic: u32, count: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn idx_examples() {
        let imgs = parse_idx(&idx_bytes(0x803, 1, 2, 2, &[0, 255, 0, 255])).unwrap();
        assert_eq!(imgs, vec![array![[0.0, 1.0], [0.0, 1.0]]]);

        let err = parse_idx(&idx_bytes(0x801, 1, 2, 2, &[0, 255, 0, 255])).unwrap_err();
        assert!(matches!(&err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("0x00000801"), "{err}");

        let err = parse_idx(&idx_bytes(0x803, 2, 2, 2, &[0, 255, 0, 255])).unwrap_err();
        assert!(matches!(&err, Error::Format { offset: 16, .. }));
        assert!(
            err.to_string().contains("length 4") && err.to_string().contains("expected 8"),
            "{err}"
        );
        assert!(parse_idx(&[0, 0, 8]).is_err());
    }

    fn seeded_dataset(perms: bool) -> CloudDataset {
        let clouds: Vec<_> = (0..3)
            .map(|k| gen_circle_cloud([k as f64, 0.0], 1.0, 4 + k, k as u64).unwrap())
            .collect();
        let ds = CloudDataset::new(2, clouds).unwrap();
        if perms {
            let p = (0..3).map(|k| Permutation::reversed(4 + k)).collect();
            ds.with_permutations(p).unwrap()
        } else {
            ds
        }
    }

    #[test]
    fn dataset_round_trips() {
        for perms in [false, true] {
            let ds = seeded_dataset(perms);
            let bytes = ds.to_bytes().unwrap();
            let back = CloudDataset::from_bytes(&bytes).unwrap();
            assert_eq!(back, ds);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
        let empty = CloudDataset::new(3, vec![]).unwrap();
        let back = CloudDataset::from_bytes(&empty.to_bytes().unwrap()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 3);
    }

    #[test]
    fn dataset_rejects_corruption() {
        let bytes = seeded_dataset(true).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[2] = b'x';
        assert!(matches!(
            CloudDataset::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let err = CloudDataset::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CloudDataset::from_bytes(&extra).is_err());
    }

    #[test]
    fn barycentric_noise_degenerates_to_reference() {
        let reference = ReferenceMeasure::new(gen_circle_cloud([0.0, 0.0], 1.0, 8, 1).unwrap()).unwrap();
        let spec = SourceSpec::barycentric_noise(0.0, 0.0, reference.clone()).unwrap();
        for c in draw_source(&spec, 8, 3, 5).unwrap().iter() {
            assert!(c
                .coords()
                .iter()
                .zip(reference.cloud().coords().iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9));
        }
        assert!(draw_source(&spec, 7, 3, 5).is_err());
    }

    #[test]
    fn barycentric_noise_is_pre_aligned() {
        for s in 0..100 {
            let reference = ReferenceMeasure::new(
                PointCloud::from_row_major(2, 16, {
                    let mut rng = seed::rng(s);
                    (0..32).map(|_| rng.random_range(0.0..1.0)).collect()
                })
                .unwrap(),
            )
            .unwrap();
            let sigma = 0.9e-3 * reference.cloud().min_pairwise_gap();
            let spec = SourceSpec::barycentric_noise(sigma, sigma, reference.clone()).unwrap();
            let c = draw_source(&spec, 16, 1, s).unwrap();
            assert!(align_to_reference(c.get(0), &reference).unwrap().is_identity());
        }
    }

    #[test]
    fn pure_noise_variance() {
        let spec = SourceSpec::pure_noise(1.0, 1.0, 2).unwrap();
        let batch = draw_source(&spec, 4, 10_000, 3).unwrap();
        let values: Vec<f64> = batch
            .iter()
            .flat_map(|c| c.coords().iter().copied().collect::<Vec<_>>())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
        assert!((var - 1.0).abs() <= 0.05);
        assert!(SourceSpec::pure_noise(0.2, 0.1, 2).is_err());
    }

    #[test]
    fn empirical_draws_dataset_clouds() {
        let ds = Arc::new(
            CloudDataset::new(
                2,
                (0..4)
                    .map(|k| gen_circle_cloud([k as f64, 0.0], 1.0, 6, k).unwrap())
                    .collect(),
            )
            .unwrap(),
        );
        let spec = SourceSpec::empirical(ds.clone()).unwrap();
        let batch = draw_source(&spec, 6, 5, 1).unwrap();
        for c in batch.iter() {
            assert!(ds.clouds().contains(c));
        }
        assert_eq!(draw_source(&spec, 3, 2, 1).unwrap().get(0).count(), 3);
        assert!(draw_source(&spec, 7, 2, 1).is_err());
        assert_eq!(batch, draw_source(&spec, 6, 5, 1).unwrap());
    }
}
