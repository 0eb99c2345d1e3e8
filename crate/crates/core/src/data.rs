//! Synthetic datasets, near/far OOD splits and train-only standardization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{contract, io_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const RING: &str = "gaussian-ring";
pub const TWO_MOONS: &str = "two-moons";
pub const UNIFORM_BOX: &str = "uniform-box";
pub const CHECKER: &str = "checker-texture";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Generator family, e.g. [`RING`].
    pub generator: String,
    /// One sample per row, in raw (unstandardized) units.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
}

impl Dataset {
    fn build(generator: &str, samples: Vec<f64>, d: usize, labels: Vec<usize>, params: &[(&str, String)], seed: u64) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(contract(format!("{generator}: n must be positive")));
        }
        Ok(Self {
            generator: generator.to_string(),
            samples: Tensor::matrix(n, d, samples)?,
            labels,
            params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(contract(format!("{}: empty subset", self.generator)));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        Ok(Self {
            generator: self.generator.clone(),
            samples: Tensor::matrix(idx.len(), d, data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            params: self.params.clone(),
            seed: self.seed,
        })
    }

    /// One row per sample: `x0,…,x{d-1},label`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out: String = (0..d).map(|j| format!("x{j},")).collect();
        out.push_str("label\n");
        for (i, label) in self.labels.iter().enumerate() {
            for v in self.samples.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{label}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| io_err(path, e))
    }
}

/// `n` draws from `k` equal-weight isotropic Gaussians centred on a circle.
pub fn gen_gaussian_ring(k: usize, radius: f64, sigma: f64, n: usize, seed: u64) -> Result<Dataset> {
    if k < 2 || !(sigma > 0.0) || !(radius >= 0.0) {
        return Err(contract(format!("ring needs k >= 2 and sigma > 0 (k={k}, sigma={sigma})")));
    }
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = r.random_range(0..k);
        let (cx, cy) = ring_center(c, k, radius);
        data.push(cx + noise.sample(&mut r));
        data.push(cy + noise.sample(&mut r));
        labels.push(c);
    }
    Dataset::build(
        RING,
        data,
        2,
        labels,
        &[("k", k.to_string()), ("radius", radius.to_string()), ("sigma", sigma.to_string()), ("n", n.to_string())],
        seed,
    )
}

/// Centre of component `c`; component 0 sits at angle 0.
pub fn ring_center(c: usize, k: usize, radius: f64) -> (f64, f64) {
    let theta = std::f64::consts::TAU * c as f64 / k as f64;
    (radius * theta.cos(), radius * theta.sin())
}

/// Two interleaved half circles: label 0 is `(cos θ, sin θ)`, label 1 is
/// `(1 − cos θ, ½ − sin θ)`, θ ~ U[0, π], plus isotropic noise.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(contract("two-moons noise must be non-negative"));
    }
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let theta = r.random_range(0.0..=std::f64::consts::PI);
        let (x, y) = if label == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let (ex, ey): (f64, f64) = (StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
        data.push(x + noise * ex);
        data.push(y + noise * ey);
        labels.push(label);
    }
    Dataset::build(TWO_MOONS, data, 2, labels, &[("n", n.to_string()), ("noise", noise.to_string())], seed)
}

/// Uniform on `[−h, h]^dim`.
pub fn gen_uniform_box(n: usize, half_width: f64, dim: usize, seed: u64) -> Result<Dataset> {
    if !(half_width > 0.0) || dim == 0 {
        return Err(contract("uniform box needs half_width > 0 and dim > 0"));
    }
    let mut r = rng::seeded(seed);
    let data = (0..n * dim).map(|_| r.random_range(-half_width..=half_width)).collect();
    Dataset::build(
        UNIFORM_BOX,
        data,
        dim,
        vec![0; n],
        &[("n", n.to_string()), ("half_width", half_width.to_string()), ("dim", dim.to_string())],
        seed,
    )
}

/// `w×w` grayscale checkerboards with `grid×grid` cells. Each patch draws a
/// dark level in [0, 0.4], a light level in [0.6, 1] and a random phase, then
/// adds pixel noise and clips to [0, 1]. Label is the phase.
pub fn gen_checker_texture(n: usize, grid: usize, w: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if grid == 0 || w == 0 || !w.is_multiple_of(grid) || !(noise >= 0.0) {
        return Err(contract(format!("checker needs grid dividing w and noise >= 0 (grid={grid}, w={w})")));
    }
    let mut r = rng::seeded(seed);
    let cell = w / grid;
    let mut data = Vec::with_capacity(n * w * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let lo = r.random_range(0.0..=0.4);
        let hi = r.random_range(0.6..=1.0);
        let phase = r.random_range(0..2usize);
        for i in 0..w {
            for j in 0..w {
                let level = if (i / cell + j / cell + phase).is_multiple_of(2) { lo } else { hi };
                let e: f64 = StandardNormal.sample(&mut r);
                data.push((level + noise * e).clamp(0.0, 1.0));
            }
        }
        labels.push(phase);
    }
    Dataset::build(
        CHECKER,
        data,
        w * w,
        labels,
        &[("n", n.to_string()), ("grid", grid.to_string()), ("w", w.to_string()), ("noise", noise.to_string())],
        seed,
    )
}

/// Renders 2-D points as `w×w` images: a Gaussian bump of width `blob` at
/// the point's position, with the image spanning `[−extent, extent]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointToImage {
    pub w: usize,
    pub extent: f64,
    pub blob: f64,
}

impl PointToImage {
    /// Covers a radius-4 ring plus 3σ at σ = 0.3; bump width equals the pixel pitch.
    pub fn for_ring(w: usize) -> Self {
        let extent = 5.0;
        Self {
            w,
            extent,
            blob: 2.0 * extent / (w - 1) as f64,
        }
    }

    pub fn tag(&self) -> String {
        format!("point-to-image(w={},extent={},blob={})", self.w, self.extent, self.blob)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != 2 {
            return Err(contract(format!("point-to-image needs 2-D input, got d = {}", ds.dim())));
        }
        let w = self.w;
        let pitch = 2.0 * self.extent / (w - 1) as f64;
        let mut data = Vec::with_capacity(ds.len() * w * w);
        for i in 0..ds.len() {
            let (x, y) = (ds.samples.row(i)[0], ds.samples.row(i)[1]);
            for row in 0..w {
                // image rows run top to bottom
                let v = self.extent - row as f64 * pitch;
                for col in 0..w {
                    let u = -self.extent + col as f64 * pitch;
                    let r2 = (u - x).powi(2) + (v - y).powi(2);
                    data.push((-r2 / (2.0 * self.blob * self.blob)).exp());
                }
            }
        }
        let mut params = ds.params.clone();
        params.insert("adapter".into(), self.tag());
        Ok(Dataset {
            generator: ds.generator.clone(),
            samples: Tensor::matrix(ds.len(), w * w, data)?,
            labels: ds.labels.clone(),
            params,
            seed: ds.seed,
        })
    }
}

/// Per-coordinate affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Coordinates with (near-)zero spread keep unit scale.
    pub fn fit(samples: &Tensor) -> Self {
        let (n, d) = (samples.rows(), samples.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(samples.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, samples: &Tensor) -> Result<Tensor> {
        if samples.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                lhs: samples.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let d = self.mean.len();
        let data = samples
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::matrix(samples.rows(), d, data)
    }

    pub fn invert(&self, samples: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        let data = samples
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::matrix(samples.rows(), d, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

impl Fractions {
    fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(*f > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(contract(format!("split fractions must be positive and sum to 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Near,
    Far,
}

impl SplitKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Near => "near",
            Self::Far => "far",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSplit {
    pub kind: SplitKind,
    pub train: Dataset,
    pub val_id: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
    /// Source tag of each `test_ood` row.
    pub ood_sources: Vec<String>,
    /// Fitted on `train` only.
    pub standardizer: Standardizer,
    pub notes: Vec<String>,
}

impl BenchmarkSplit {
    pub fn source_names(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.ood_sources {
            if !seen.contains(s) {
                seen.push(s.clone());
            }
        }
        seen
    }
}

/// Splits each label's indices by `fractions` after a seeded shuffle.
fn stratified_indices(labels: &[usize], pool: &[usize], fractions: &Fractions, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_label.entry(labels[i]).or_default().push(i);
    }
    let mut r = rng::stream(seed, "split");
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in by_label.values_mut() {
        idx.shuffle(&mut r);
        let n = idx.len();
        let n_train = (fractions.train * n as f64).round() as usize;
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    (train, val, test)
}

/// Near-OOD: the holdout labels become the OOD test set; the rest are split
/// stratified into train/val/test.
pub fn make_near_ood_split(ds: &Dataset, holdout: &[usize], fractions: &Fractions, seed: u64) -> Result<BenchmarkSplit> {
    fractions.validate()?;
    let labels = ds.label_set();
    let held: BTreeSet<usize> = holdout.iter().copied().collect();
    if held.is_empty() {
        return Err(contract("holdout label set is empty"));
    }
    if !held.is_subset(&labels) {
        return Err(contract(format!("holdout {held:?} is not within labels {labels:?}")));
    }
    if held.len() == labels.len() {
        return Err(contract("holdout covers every label; nothing left to train on"));
    }
    let (retained, ood): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| !held.contains(&ds.labels[i]));
    if ood.is_empty() {
        return Err(contract("holdout labels have no samples"));
    }
    let (tr, va, te) = stratified_indices(&ds.labels, &retained, fractions, seed);
    let train = ds.subset(&tr)?;
    if train.labels.iter().any(|l| held.contains(l)) {
        return Err(contract("near split leaked a holdout label into train"));
    }
    let standardizer = Standardizer::fit(&train.samples);
    let test_ood = ds.subset(&ood)?;
    let tag = format!("{}:holdout={:?}", ds.generator, held);
    Ok(BenchmarkSplit {
        kind: SplitKind::Near,
        val_id: ds.subset(&va)?,
        test_id: ds.subset(&te)?,
        ood_sources: vec![tag.clone(); test_ood.len()],
        test_ood,
        train,
        standardizer,
        notes: vec![format!("near-OOD: {tag}, same generator family, unseen labels")],
    })
}

/// One OOD source with an optional declared adapter to the ID dimension.
pub struct OodSource {
    pub name: String,
    pub data: Dataset,
    pub adapter: Option<PointToImage>,
}

/// Far-OOD: the ID dataset is split stratified; every OOD source (from a
/// different generator family) is pooled with its tag kept per row.
pub fn make_far_ood_split(id: &Dataset, sources: &[OodSource], fractions: &Fractions, seed: u64) -> Result<BenchmarkSplit> {
    fractions.validate()?;
    if sources.is_empty() {
        return Err(contract("far split needs at least one OOD source"));
    }
    let all: Vec<usize> = (0..id.len()).collect();
    let (tr, va, te) = stratified_indices(&id.labels, &all, fractions, seed);
    let train = id.subset(&tr)?;
    let standardizer = Standardizer::fit(&train.samples);
    let d = id.dim();
    let mut pooled = Vec::new();
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    let mut notes = Vec::new();
    for src in sources {
        if src.data.generator == id.generator {
            return Err(contract(format!("far source `{}` shares the ID generator family", src.name)));
        }
        let adapted = match &src.adapter {
            Some(a) => a.apply(&src.data)?,
            None => src.data.clone(),
        };
        if adapted.dim() != d {
            return Err(Error::Shape {
                op: "make_far_ood_split",
                lhs: vec![adapted.len(), adapted.dim()],
                rhs: vec![d],
            });
        }
        pooled.extend_from_slice(adapted.samples.data());
        labels.extend_from_slice(&adapted.labels);
        tags.extend(std::iter::repeat_n(src.name.clone(), adapted.len()));
        notes.push(format!(
            "far-OOD source `{}` ({}{})",
            src.name,
            src.data.generator,
            src.adapter.map(|a| format!(", {}", a.tag())).unwrap_or_default()
        ));
    }
    let test_ood = Dataset {
        generator: "ood-pool".into(),
        samples: Tensor::matrix(labels.len(), d, pooled)?,
        labels,
        params: BTreeMap::new(),
        seed,
    };
    Ok(BenchmarkSplit {
        kind: SplitKind::Far,
        val_id: id.subset(&va)?,
        test_id: id.subset(&te)?,
        test_ood,
        ood_sources: tags,
        train,
        standardizer,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_component_means() {
        let n = 8000;
        let ds = gen_gaussian_ring(8, 4.0, 0.3, n, 3).unwrap();
        for c in 0..8 {
            let rows: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == c).collect();
            let m = rows.len() as f64;
            let (cx, cy) = ring_center(c, 8, 4.0);
            let mx = rows.iter().map(|&i| ds.samples.row(i)[0]).sum::<f64>() / m;
            let my = rows.iter().map(|&i| ds.samples.row(i)[1]).sum::<f64>() / m;
            let tol = 3.0 * 0.3 / (n as f64 / 8.0).sqrt();
            assert!((mx - cx).abs() < tol && (my - cy).abs() < tol, "component {c}");
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(gen_gaussian_ring(8, 4.0, 0.3, 50, 9).unwrap(), gen_gaussian_ring(8, 4.0, 0.3, 50, 9).unwrap());
        assert_ne!(gen_gaussian_ring(8, 4.0, 0.3, 50, 9).unwrap(), gen_gaussian_ring(8, 4.0, 0.3, 50, 10).unwrap());
        assert!(gen_gaussian_ring(1, 4.0, 0.3, 50, 9).is_err());
    }

    #[test]
    fn uniform_box_variance() {
        let n = 20_000;
        let ds = gen_uniform_box(n, 1.0, 2, 4).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..n).map(|i| ds.samples.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Var of U(-1,1) is 1/3; Var(X²) = E[X⁴] − 1/9 = 1/5 − 1/9
            let se = ((0.2 - 1.0 / 9.0) / n as f64).sqrt();
            assert!((v - 1.0 / 3.0).abs() < 3.0 * se, "{v}");
        }
    }

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let ds = gen_two_moons(200, 0.0, 1).unwrap();
        for i in 0..200 {
            let (x, y) = (ds.samples.row(i)[0], ds.samples.row(i)[1]);
            let (cx, cy, upper) = if ds.labels[i] == 0 { (0.0, 0.0, true) } else { (1.0, 0.5, false) };
            assert!(((x - cx).hypot(y - cy) - 1.0).abs() < 1e-12);
            assert!(if upper { y >= -1e-12 } else { y <= 0.5 + 1e-12 });
        }
    }

    #[test]
    fn checker_has_two_levels_without_noise() {
        let ds = gen_checker_texture(5, 2, 8, 0.0, 2).unwrap();
        for i in 0..5 {
            let mut levels: Vec<f64> = ds.samples.row(i).to_vec();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            assert_eq!(levels.len(), 2);
            assert!(levels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let noisy = gen_checker_texture(5, 2, 8, 0.2, 2).unwrap();
        assert!(noisy.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn near_split_holdout_and_counts() {
        let ds = gen_gaussian_ring(8, 4.0, 0.3, 4000, 7).unwrap();
        let sp = make_near_ood_split(&ds, &[0], &Fractions::default(), 7).unwrap();
        assert!(sp.train.labels.iter().all(|&l| l != 0));
        assert!(sp.test_ood.labels.iter().all(|&l| l == 0));
        let retained = ds.labels.iter().filter(|&&l| l != 0).count();
        assert_eq!(sp.train.len() + sp.val_id.len() + sp.test_id.len(), retained);
        for c in 1..8 {
            let overall = ds.labels.iter().filter(|&&l| l == c).count() as f64 / retained as f64;
            let in_train = sp.train.labels.iter().filter(|&&l| l == c).count() as f64 / sp.train.len() as f64;
            assert!((overall - in_train).abs() <= 0.02);
        }
        assert_eq!(sp.kind, SplitKind::Near);
    }

    #[test]
    fn near_split_rejects_bad_holdouts() {
        let ds = gen_gaussian_ring(2, 4.0, 0.3, 100, 7).unwrap();
        assert!(make_near_ood_split(&ds, &[0, 1], &Fractions::default(), 0).is_err());
        assert!(make_near_ood_split(&ds, &[], &Fractions::default(), 0).is_err());
        assert!(make_near_ood_split(&ds, &[5], &Fractions::default(), 0).is_err());
        let bad = Fractions { train: 0.5, val: 0.2, test: 0.2 };
        assert!(make_near_ood_split(&ds, &[0], &bad, 0).is_err());
    }

    #[test]
    fn splits_are_reproducible_and_disjoint() {
        let ds = gen_gaussian_ring(8, 4.0, 0.3, 600, 1).unwrap();
        let a = make_near_ood_split(&ds, &[0, 1], &Fractions::default(), 5).unwrap();
        let b = make_near_ood_split(&ds, &[0, 1], &Fractions::default(), 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.standardizer, b.standardizer);
        let rows = |d: &Dataset| -> BTreeSet<Vec<u64>> {
            (0..d.len()).map(|i| d.samples.row(i).iter().map(|v| v.to_bits()).collect()).collect()
        };
        assert!(rows(&a.val_id).is_disjoint(&rows(&a.test_id)));
        assert!(rows(&a.train).is_disjoint(&rows(&a.test_id)));
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let ds = gen_gaussian_ring(8, 4.0, 0.3, 2000, 2).unwrap();
        let sp = make_near_ood_split(&ds, &[0], &Fractions::default(), 2).unwrap();
        let z = sp.standardizer.apply(&sp.train.samples).unwrap();
        let st = Standardizer::fit(&z);
        for j in 0..2 {
            assert!(st.mean[j].abs() < 1e-12);
            assert!((st.std[j] - 1.0).abs() < 1e-12);
        }
        assert_eq!(Standardizer::fit(&sp.train.samples), sp.standardizer);
        let back = sp.standardizer.invert(&z).unwrap();
        assert!(back.max_abs_diff(&sp.train.samples).unwrap() < 1e-12);
    }

    #[test]
    fn far_split_pools_sources_with_tags() {
        let moons = gen_two_moons(200, 0.05, 1).unwrap();
        let one = [OodSource { name: "box".into(), data: gen_uniform_box(100, 4.0, 2, 2).unwrap(), adapter: None }];
        let sp = make_far_ood_split(&moons, &one, &Fractions::default(), 1).unwrap();
        assert_eq!(sp.test_ood.samples, one[0].data.samples);
        let two = [
            OodSource { name: "box".into(), data: gen_uniform_box(100, 4.0, 2, 2).unwrap(), adapter: None },
            OodSource { name: "ring".into(), data: gen_gaussian_ring(8, 4.0, 0.3, 50, 3).unwrap(), adapter: None },
        ];
        let sp = make_far_ood_split(&moons, &two, &Fractions::default(), 1).unwrap();
        assert_eq!(sp.test_ood.len(), 150);
        assert_eq!(sp.ood_sources.iter().filter(|s| *s == "ring").count(), 50);
        assert_eq!(sp.source_names(), vec!["box".to_string(), "ring".to_string()]);
        assert_eq!(sp.kind, SplitKind::Far);
    }

    #[test]
    fn far_split_checks_dimension_and_family() {
        let checker = gen_checker_texture(40, 2, 8, 0.05, 1).unwrap();
        let ring = gen_gaussian_ring(8, 4.0, 0.3, 30, 3).unwrap();
        let raw = [OodSource { name: "ring".into(), data: ring.clone(), adapter: None }];
        assert!(matches!(make_far_ood_split(&checker, &raw, &Fractions::default(), 1), Err(Error::Shape { .. })));
        let adapted = [OodSource { name: "ring".into(), data: ring, adapter: Some(PointToImage::for_ring(8)) }];
        let sp = make_far_ood_split(&checker, &adapted, &Fractions::default(), 1).unwrap();
        assert_eq!(sp.test_ood.dim(), 64);
        let same = [OodSource { name: "moons".into(), data: gen_two_moons(20, 0.1, 1).unwrap(), adapter: None }];
        assert!(make_far_ood_split(&gen_two_moons(20, 0.1, 2).unwrap(), &same, &Fractions::default(), 1).is_err());
    }

    #[test]
    fn point_image_peaks_at_the_point() {
        let a = PointToImage::for_ring(8);
        let ds = Dataset::build(RING, vec![5.0, 5.0, -5.0, -5.0], 2, vec![0, 0], &[], 0).unwrap();
        let img = a.apply(&ds).unwrap();
        assert_eq!(img.samples.row(0)[7], 1.0);
        assert_eq!(img.samples.row(1)[56], 1.0);
        assert!(img.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn csv_has_label_column() {
        let ds = gen_two_moons(3, 0.0, 1).unwrap();
        let csv = ds.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1,label");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",0"));
    }
}
