//! Procedural mini-sprites: binary shapes rendered from a full grid of
//! discrete generative factors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_ctf, write_ctf, Tensor};

pub const GENERATOR_VERSION: &str = "mini-sprites-1";
pub const DEFAULT_RESOLUTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Shape,
    Scale,
    PosX,
    PosY,
    Orientation,
    /// Imported data with no rendering semantics.
    Opaque,
}

impl FactorKind {
    fn from_name(name: &str) -> FactorKind {
        match name {
            "shape" => FactorKind::Shape,
            "scale" => FactorKind::Scale,
            "posX" => FactorKind::PosX,
            "posY" => FactorKind::PosY,
            "orientation" => FactorKind::Orientation,
            _ => FactorKind::Opaque,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
}

/// Ordered generative factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpec {
    pub factors: Vec<Factor>,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self::sprites(3, 4, 8, 8, false).expect("default spec is valid")
    }
}

pub const SHAPE_NAMES: [&str; 3] = ["square", "disc", "cross"];

impl FactorSpec {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Invalid("a factor spec needs at least one factor".into()));
        }
        for f in &factors {
            let min = if FactorKind::from_name(&f.name) == FactorKind::Shape { 1 } else { 2 };
            if f.cardinality < min {
                return Err(Error::Invalid(format!("factor {} needs cardinality >= {min}, got {}", f.name, f.cardinality)));
            }
        }
        Ok(Self { factors })
    }

    /// The renderable spec: shape, scale, posX, posY and optionally orientation.
    pub fn sprites(shapes: usize, scales: usize, pos_x: usize, pos_y: usize, orientation: bool) -> Result<Self> {
        if shapes > SHAPE_NAMES.len() {
            return Err(Error::Invalid(format!("at most {} shapes are available", SHAPE_NAMES.len())));
        }
        let mut factors = vec![
            Factor { name: "shape".into(), cardinality: shapes },
            Factor { name: "scale".into(), cardinality: scales },
        ];
        if orientation {
            factors.push(Factor { name: "orientation".into(), cardinality: 4 });
        }
        factors.push(Factor { name: "posX".into(), cardinality: pos_x });
        factors.push(Factor { name: "posY".into(), cardinality: pos_y });
        Self::new(factors)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    pub fn combinations(&self) -> usize {
        self.factors.iter().map(|f| f.cardinality).product()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    fn is_renderable(&self) -> bool {
        let has = |k| self.factors.iter().any(|f| FactorKind::from_name(&f.name) == k);
        has(FactorKind::Shape) && has(FactorKind::Scale) && has(FactorKind::PosX) && has(FactorKind::PosY)
            && self.factors.iter().all(|f| FactorKind::from_name(&f.name) != FactorKind::Opaque)
    }

    /// Factor tuple of the `index`-th combination in lexicographic order.
    pub fn tuple_of(&self, mut index: usize) -> Vec<usize> {
        let mut t = vec![0; self.len()];
        for (k, f) in self.factors.iter().enumerate().rev() {
            t[k] = index % f.cardinality;
            index /= f.cardinality;
        }
        t
    }

    pub fn index_of_tuple(&self, tuple: &[usize]) -> usize {
        tuple.iter().zip(&self.factors).fold(0, |acc, (&v, f)| acc * f.cardinality + v)
    }

    fn to_manifest_value(&self) -> String {
        self.factors.iter().map(|f| format!("{}:{}", f.name, f.cardinality)).collect::<Vec<_>>().join(",")
    }

    fn parse_manifest_value(s: &str) -> Result<Self> {
        let factors = s
            .split(',')
            .map(|item| {
                let (name, card) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad factor entry {item:?}")))?;
                let cardinality = card.trim().parse().map_err(|_| Error::Format(format!("bad cardinality in {item:?}")))?;
                Ok(Factor { name: name.trim().to_string(), cardinality })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(factors)
    }
}

/// Linearly spaced value `i` of `n` over `[lo, hi]`.
fn linspace(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Relative shape sizes (side or diameter as a fraction of the frame).
pub const SCALE_RANGE: (f64, f64) = (0.25, 0.7);

/// Distance of the outermost grid positions from the frame edge, as a
/// fraction of `R`. At least half the smallest scale so the smallest shape is
/// never clipped; 0.17 also keeps clipped large squares from coinciding with
/// the next smaller square one grid step inward at R=16.
pub const GRID_MARGIN: f64 = 0.17;

/// Centre coordinate (pixels) of grid position `i` of `n` at resolution `r`.
pub fn grid_center(i: usize, n: usize, r: usize) -> f64 {
    let margin = GRID_MARGIN * r as f64;
    linspace(margin, r as f64 - margin, i, n)
}

/// Rasterizes one factor tuple into an `r x r` binary image (row-major, y down).
pub fn render(spec: &FactorSpec, tuple: &[usize], r: usize) -> Result<Vec<f64>> {
    if tuple.len() != spec.len() {
        return Err(Error::Invalid(format!("tuple has {} entries for {} factors", tuple.len(), spec.len())));
    }
    for (k, (&v, f)) in tuple.iter().zip(&spec.factors).enumerate() {
        if v >= f.cardinality {
            return Err(Error::Invalid(format!("factor {k} ({}) index {v} >= {}", f.name, f.cardinality)));
        }
    }
    if !spec.is_renderable() {
        return Err(Error::Invalid("spec has no rendering semantics".into()));
    }
    let mut shape = 0;
    let mut size = 0.0;
    let mut quarter_turns = 0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (&v, f) in tuple.iter().zip(&spec.factors) {
        match FactorKind::from_name(&f.name) {
            FactorKind::Shape => shape = v,
            FactorKind::Scale => size = linspace(SCALE_RANGE.0, SCALE_RANGE.1, v, f.cardinality) * r as f64,
            FactorKind::PosX => cx = grid_center(v, f.cardinality, r),
            FactorKind::PosY => cy = grid_center(v, f.cardinality, r),
            FactorKind::Orientation => quarter_turns = v % 4,
            FactorKind::Opaque => unreachable!("checked by is_renderable"),
        }
    }
    let h = 0.5 * size;
    let arm = 0.5 + h / 8.0;
    let mut img = vec![0.0; r * r];
    for py in 0..r {
        for px in 0..r {
            let (mut dx, mut dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            for _ in 0..quarter_turns {
                (dx, dy) = (dy, -dx);
            }
            let inside = match shape {
                0 => dx.abs() <= h && dy.abs() <= h,
                1 => dx * dx + dy * dy <= h * h,
                // diagonal cross; under orientation one half-arm is dropped so
                // the shape has a direction
                _ => {
                    let on_arm = dx.abs() <= h && dy.abs() <= h && (dx.abs() - dy.abs()).abs() <= arm;
                    on_arm && !(quarter_turns_enabled(spec) && dx > 0.0 && dy > 0.0)
                }
            };
            if inside {
                img[py * r + px] = 1.0;
            }
        }
    }
    Ok(img)
}

fn quarter_turns_enabled(spec: &FactorSpec) -> bool {
    spec.index_of("orientation").is_some()
}

/// Images paired with their factor indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDataset {
    /// `N x R x R`, values in `[0, 1]`.
    pub images: Tensor,
    /// `N x F` factor indices, row-major.
    pub factors: Vec<usize>,
    pub spec: FactorSpec,
    pub resolution: usize,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images.data()[i * p..(i + 1) * p]
    }

    pub fn factor_row(&self, i: usize) -> &[usize] {
        let f = self.spec.len();
        &self.factors[i * f..(i + 1) * f]
    }

    pub fn factor(&self, i: usize, k: usize) -> usize {
        self.factors[i * self.spec.len() + k]
    }

    /// `B x R²` batch of flattened images.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), p], data).expect("indices nonempty")
    }

    /// Builds a dataset from externally produced tensors: images `N x R x R`
    /// in `[0, 1]` and factor indices `N x F`.
    pub fn from_tensors(images: Tensor, factors: &Tensor, spec: Option<FactorSpec>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Format(format!("images must be N x R x R, got {s:?}")));
        }
        let (n, r) = (s[0], s[1]);
        let fs = factors.shape();
        if fs.len() != 2 || fs[0] != n {
            return Err(Error::Format(format!("factors must be {n} x F, got {fs:?}")));
        }
        if images.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Format("image values must lie in [0, 1]".into()));
        }
        let f = fs[1];
        let mut idx = Vec::with_capacity(n * f);
        for &v in factors.data() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("factor value {v} is not a nonnegative integer")));
            }
            idx.push(v as usize);
        }
        let spec = match spec {
            Some(spec) => spec,
            None => {
                let factors = (0..f)
                    .map(|k| Factor {
                        name: format!("f{k}"),
                        cardinality: (0..n).map(|i| idx[i * f + k]).max().unwrap_or(0) + 1,
                    })
                    .collect();
                FactorSpec { factors }
            }
        };
        if spec.len() != f {
            return Err(Error::Format(format!("manifest lists {} factors, tensor has {f}", spec.len())));
        }
        for i in 0..n {
            for k in 0..f {
                if idx[i * f + k] >= spec.factors[k].cardinality {
                    return Err(Error::Format(format!("row {i} factor {k} out of range")));
                }
            }
        }
        Ok(Self { images, factors: idx, spec, resolution: r })
    }

    /// Writes `images.ctf`, `factors.ctf` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_ctf(dir.join("images.ctf"), &self.images)?;
        let f = self.spec.len();
        let ft = Tensor::new(vec![self.len(), f], self.factors.iter().map(|&v| v as f64).collect())?;
        write_ctf(dir.join("factors.ctf"), &ft)?;
        let mut m = String::new();
        writeln!(m, "generator={GENERATOR_VERSION}").ok();
        writeln!(m, "resolution={}", self.resolution).ok();
        writeln!(m, "count={}", self.len()).ok();
        writeln!(m, "factors={}", self.spec.to_manifest_value()).ok();
        fs::write(dir.join("manifest.txt"), m)?;
        Ok(())
    }

    /// Reads a dataset directory. The manifest is optional for imported data.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let images = read_ctf(dir.join("images.ctf"))?;
        let factors = read_ctf(dir.join("factors.ctf"))?;
        let manifest = dir.join("manifest.txt");
        let spec = if manifest.exists() {
            let text = fs::read_to_string(manifest)?;
            let entry = text
                .lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == "factors")
                .ok_or_else(|| Error::Format("manifest has no factors entry".into()))?;
            Some(FactorSpec::parse_manifest_value(entry.1.trim())?)
        } else {
            None
        };
        Self::from_tensors(images, &factors, spec)
    }
}

/// Full cartesian enumeration of `spec` in lexicographic order.
pub fn generate(spec: &FactorSpec, r: usize) -> Result<FactorDataset> {
    let n = spec.combinations();
    let mut images = Vec::with_capacity(n * r * r);
    let mut factors = Vec::with_capacity(n * spec.len());
    for i in 0..n {
        let t = spec.tuple_of(i);
        images.extend(render(spec, &t, r)?);
        factors.extend(t);
    }
    Ok(FactorDataset { images: Tensor::new(vec![n, r, r], images)?, factors, spec: spec.clone(), resolution: r })
}

/// Epoch-based sampler without replacement; reshuffles when an epoch is used up.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(n: usize, size: usize, rng: Rng) -> Result<Self> {
        if size == 0 || size > n {
            return Err(Error::Invalid(format!("batch size {size} must be in 1..={n}")));
        }
        let mut b = Self { order: (0..n).collect(), pos: 0, size, rng };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.size
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

/// One uniformly sampled batch without replacement.
pub fn batch(dataset: &FactorDataset, size: usize, rng: &mut Rng) -> Result<Tensor> {
    if size == 0 || size > dataset.len() {
        return Err(Error::Invalid(format!("batch size {size} exceeds dataset size {}", dataset.len())));
    }
    let idx: Vec<usize> = rand::seq::index::sample(rng, dataset.len(), size).into_vec();
    Ok(dataset.gather(&idx))
}

/// Indices of `size` images sharing one uniformly chosen value of factor `k`.
pub fn fixed_factor_indices(dataset: &FactorDataset, k: usize, size: usize, rng: &mut Rng) -> Result<(Vec<usize>, usize)> {
    let card = dataset
        .spec
        .factors
        .get(k)
        .ok_or_else(|| Error::Invalid(format!("factor index {k} out of range")))?
        .cardinality;
    if card < 2 {
        return Err(Error::Invalid(format!("factor {k} has a single value")));
    }
    let value = rng.random_range(0..card);
    let matching: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.factor(i, k) == value).collect();
    if matching.len() < size {
        return Err(Error::Invalid(format!("only {} images have factor {k} = {value}, need {size}", matching.len())));
    }
    let chosen = matching.choose_multiple(rng, size).copied().collect();
    Ok((chosen, value))
}

/// Batch with factor `k` fixed to a random value; returns the images and the value.
pub fn fixed_factor_batch(dataset: &FactorDataset, k: usize, size: usize, rng: &mut Rng) -> Result<(Tensor, usize)> {
    let (idx, value) = fixed_factor_indices(dataset, k, size, rng)?;
    Ok((dataset.gather(&idx), value))
}

