//! Synthetic domain-shifted benchmarks.
//!
//! The real class is a two-component Gaussian mixture in a base space; attacks
//! are the same mixture displaced along a style-specific direction. Each
//! domain then applies its own affine shift (per-dimension scale, a block
//! rotation, a translation) plus isotropic noise. Scaling and rotating are
//! invertible, so the within-domain problem stays equally separable in every
//! domain while models trained in one coordinate frame degrade in another.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::Batch;
use crate::{Error, Result};

/// Mixture component centers sit at +-MIX_OFFSET on the first base axis.
const MIX_OFFSET: f64 = 1.2;
/// Isotropic standard deviation of each mixture component.
const BASE_SIGMA: f64 = 1.0;
/// Attack displacement along the style direction in the benchmark domains.
const ATTACK_MAG: f64 = 2.7;
/// Fraction of each class held out as the dev split (every fifth sample).
const DEV_EVERY: usize = 5;

/// Which attack instrument a domain contains. `Mixed` alternates both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackStyle {
    Print,
    Replay,
    Mixed,
}

impl fmt::Display for AttackStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackStyle::Print => "print",
            AttackStyle::Replay => "replay",
            AttackStyle::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

/// Affine domain shift: per-dimension scale, then a rotation by `rotation`
/// radians applied to each axis pair (0,1), (2,3), ..., then a translation.
#[derive(Debug, Clone)]
pub struct DomainShift {
    pub rotation: f64,
    pub translation: Array1<f64>,
    pub scale: Array1<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: 0.0,
            translation: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    fn apply(&self, x: &mut [f64]) {
        for (v, &s) in x.iter_mut().zip(self.scale.iter()) {
            *v *= s;
        }
        let (sin, cos) = self.rotation.sin_cos();
        let mut i = 0;
        while i + 1 < x.len() {
            let (a, b) = (x[i], x[i + 1]);
            x[i] = a * cos - b * sin;
            x[i + 1] = a * sin + b * cos;
            i += 2;
        }
        for (v, &t) in x.iter_mut().zip(self.translation.iter()) {
            *v += t;
        }
    }
}

/// Recipe for one domain's data.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub id: String,
    pub n_real: usize,
    pub n_attack: usize,
    pub base_dim: usize,
    pub shift: DomainShift,
    /// Class-separation vector for print attacks; replay attacks use the same
    /// vector with its coordinates rotated by half the dimension count.
    pub attack_offset: Array1<f64>,
    pub noise_sigma: f64,
    pub attack_style: AttackStyle,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::InvalidConfig(format!(
                "domain id {:?} must be nonempty [a-zA-Z0-9_-]",
                self.id
            )));
        }
        if self.n_real == 0 || self.n_attack == 0 {
            return Err(Error::InvalidConfig(format!(
                "domain {} needs at least one sample per class",
                self.id
            )));
        }
        if self.base_dim == 0 {
            return Err(Error::InvalidConfig("base_dim must be positive".into()));
        }
        for (name, len) in [
            ("translation", self.shift.translation.len()),
            ("scale", self.shift.scale.len()),
            ("attack_offset", self.attack_offset.len()),
        ] {
            if len != self.base_dim {
                return Err(Error::InvalidConfig(format!(
                    "domain {}: {name} has {len} entries for base_dim {}",
                    self.id, self.base_dim
                )));
            }
        }
        if let Some(&bad) = self.shift.scale.iter().find(|&&s| s.abs() < 1e-9) {
            return Err(Error::InvalidConfig(format!(
                "domain {}: degenerate scale entry {bad}",
                self.id
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "domain {}: noise_sigma must be positive and finite, got {}",
                self.id, self.noise_sigma
            )));
        }
        Ok(())
    }

    fn style_of(&self, attack_index: usize) -> AttackStyle {
        match self.attack_style {
            AttackStyle::Mixed => {
                if attack_index.is_multiple_of(2) {
                    AttackStyle::Print
                } else {
                    AttackStyle::Replay
                }
            }
            s => s,
        }
    }

    fn offset_for(&self, style: AttackStyle) -> Array1<f64> {
        match style {
            AttackStyle::Print => self.attack_offset.clone(),
            AttackStyle::Replay => {
                let d = self.base_dim;
                let mut out = Array1::zeros(d);
                for i in 0..d {
                    out[(i + d / 2) % d] = self.attack_offset[i];
                }
                out
            }
            AttackStyle::Mixed => unreachable!("resolved per sample"),
        }
    }
}

/// Which split a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }
}

/// Labeled samples of one domain with a fixed train/dev assignment.
/// Labels: 1 = real, 0 = attack.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    id: String,
    x: Array2<f64>,
    y: Array1<f64>,
    split: Vec<Split>,
}

impl DomainDataset {
    pub fn new(id: String, x: Array2<f64>, y: Array1<f64>, split: Vec<Split>) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() != split.len() {
            return Err(Error::ShapeMismatch(format!(
                "domain {id}: {} rows, {} labels, {} split tags",
                x.nrows(),
                y.len(),
                split.len()
            )));
        }
        let ds = Self { id, x, y, split };
        for split in [Split::Train, Split::Dev] {
            let (_, y) = ds.split_xy(split);
            if y.is_empty() || y.iter().all(|&v| v == 1.0) || y.iter().all(|&v| v == 0.0) {
                return Err(Error::SingleClass {
                    context: format!("domain {} {} split", ds.id, split.as_str()),
                });
            }
        }
        Ok(ds)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn split_xy(&self, split: Split) -> (Array2<f64>, Array1<f64>) {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == split).collect();
        let mut x = Array2::zeros((rows.len(), self.dim()));
        let mut y = Array1::zeros(rows.len());
        for (out, &row) in rows.iter().enumerate() {
            x.row_mut(out).assign(&self.x.row(row));
            y[out] = self.y[row];
        }
        (x, y)
    }

    pub fn full_xy(&self) -> (&Array2<f64>, &Array1<f64>) {
        (&self.x, &self.y)
    }

    pub fn train_batch(&self) -> Result<Batch> {
        let (x, y) = self.split_xy(Split::Train);
        Batch::labeled(x, y)
    }

    /// Concatenates several domains into one training pool.
    pub fn merge(id: String, parts: &[DomainDataset]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("merge of zero domains".into()));
        }
        let dim = parts[0].dim();
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::ShapeMismatch("merge of mixed widths".into()));
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut x = Array2::zeros((total, dim));
        let mut y = Array1::zeros(total);
        let mut split = Vec::with_capacity(total);
        let mut row = 0;
        for p in parts {
            for i in 0..p.len() {
                x.row_mut(row).assign(&p.x.row(i));
                y[row] = p.y[i];
                split.push(p.split[i]);
                row += 1;
            }
        }
        Self::new(id, x, y, split)
    }

    /// One `id,f0,...,fD,label,split` row per sample, full float precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.len() {
            out.push_str(&self.id);
            for v in self.x.row(i) {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push_str(&format!(",{}", self.y[i] as u8));
            out.push_str(&format!(",{}\n", self.split[i].as_str()));
        }
        let mut file = fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::DataFile {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let text = fs::read_to_string(path)?;
        let mut id: Option<String> = None;
        let mut width: Option<usize> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<f64> = Vec::new();
        let mut splits: Vec<Split> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 {
                return Err(bad(&format!("line {}: too few fields", lineno + 1)));
            }
            let row_id = fields[0];
            match &id {
                None => id = Some(row_id.to_string()),
                Some(seen) if seen != row_id => {
                    return Err(bad(&format!("line {}: mixed domain ids", lineno + 1)))
                }
                _ => {}
            }
            let d = fields.len() - 3;
            match width {
                None => width = Some(d),
                Some(w) if w != d => {
                    return Err(bad(&format!("line {}: inconsistent width", lineno + 1)))
                }
                _ => {}
            }
            let mut row = Vec::with_capacity(d);
            for f in &fields[1..1 + d] {
                row.push(
                    f.parse::<f64>()
                        .map_err(|_| bad(&format!("line {}: bad float {f:?}", lineno + 1)))?,
                );
            }
            let label = match fields[1 + d] {
                "0" => 0.0,
                "1" => 1.0,
                other => return Err(bad(&format!("line {}: bad label {other:?}", lineno + 1))),
            };
            let split = match fields[2 + d] {
                "train" => Split::Train,
                "dev" => Split::Dev,
                other => return Err(bad(&format!("line {}: bad split {other:?}", lineno + 1))),
            };
            rows.push(row);
            labels.push(label);
            splits.push(split);
        }
        let id = id.ok_or_else(|| bad("no rows"))?;
        let width = width.expect("rows imply width");
        let mut x = Array2::zeros((rows.len(), width));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        Self::new(id, x, Array1::from_vec(labels), splits)
    }
}

/// Ground truth a user is never allowed to train on. Only the metrics side
/// may look inside, through the one explicitly named accessor.
#[derive(Debug, Clone)]
pub struct SealedLabels(Array1<f64>);

impl SealedLabels {
    pub fn reveal_for_metrics(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The deployed user's data: an unlabeled feature stream plus sealed labels
/// for scoring.
#[derive(Debug, Clone)]
pub struct UserDomain {
    id: String,
    features: Array2<f64>,
    labels: SealedLabels,
}

impl UserDomain {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &SealedLabels {
        &self.labels
    }

    /// Consecutive batches of the stream. A trailing single row is folded
    /// into the previous batch so every batch has at least two rows.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Array2<f64>>> {
        stream_batches(&self.features, batch_size)
    }
}

/// Slices a feature matrix into consecutive batches; a trailing single row
/// is folded into the previous batch.
pub fn stream_batches(features: &Array2<f64>, batch_size: usize) -> Result<Vec<Array2<f64>>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "adaptation batch size must be at least 2, got {batch_size}"
        )));
    }
    let n = features.nrows();
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        bounds.push((start, end));
        start = end;
    }
    if let Some(&(s, e)) = bounds.last() {
        if e - s == 1 && bounds.len() > 1 {
            bounds.pop();
            let (ps, _) = bounds.pop().expect("len checked");
            bounds.push((ps, e));
        }
    }
    Ok(bounds
        .into_iter()
        .map(|(s, e)| features.slice(ndarray::s![s..e, ..]).to_owned())
        .collect())
}

/// Deterministically generates one domain's dataset.
pub fn make_domain(spec: &DomainSpec, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    if spec.n_real < DEV_EVERY || spec.n_attack < DEV_EVERY {
        return Err(Error::InvalidConfig(format!(
            "domain {}: needs at least {DEV_EVERY} samples per class for the dev split",
            spec.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.base_dim;
    let total = spec.n_real + spec.n_attack;
    let mut x = Array2::zeros((total, d));
    let mut y = Array1::zeros(total);
    let mut split = Vec::with_capacity(total);

    let base_sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (0..d)
            .map(|_| BASE_SIGMA * rng.sample::<f64, _>(StandardNormal))
            .collect();
        v[0] += sign * MIX_OFFSET;
        v
    };

    for i in 0..spec.n_real {
        let v = base_sample(&mut rng);
        for (j, &val) in v.iter().enumerate() {
            x[(i, j)] = val;
        }
        y[i] = 1.0;
        split.push(if i % DEV_EVERY == DEV_EVERY - 1 {
            Split::Dev
        } else {
            Split::Train
        });
    }
    for i in 0..spec.n_attack {
        let row = spec.n_real + i;
        let mut v = base_sample(&mut rng);
        let offset = spec.offset_for(spec.style_of(i));
        for (val, &o) in v.iter_mut().zip(offset.iter()) {
            *val += o;
        }
        for (j, &val) in v.iter().enumerate() {
            x[(row, j)] = val;
        }
        y[row] = 0.0;
        split.push(if i % DEV_EVERY == DEV_EVERY - 1 {
            Split::Dev
        } else {
            Split::Train
        });
    }

    for mut row in x.rows_mut() {
        let slice = row.as_slice_mut().expect("standard layout");
        spec.shift.apply(slice);
        for v in slice.iter_mut() {
            *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }

    DomainDataset::new(spec.id.clone(), x, y, split)
}

/// Splits domains into K data centers and one held-out user domain.
pub fn leave_one_out_split(
    domains: &[DomainDataset],
    user_index: usize,
) -> Result<(Vec<DomainDataset>, UserDomain)> {
    if domains.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "leave-one-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    if user_index >= domains.len() {
        return Err(Error::InvalidConfig(format!(
            "user index {user_index} out of range for {} domains",
            domains.len()
        )));
    }
    let mut centers = Vec::with_capacity(domains.len() - 1);
    let mut user = None;
    for (i, dom) in domains.iter().enumerate() {
        if i == user_index {
            user = Some(UserDomain {
                id: dom.id.clone(),
                features: dom.x.clone(),
                labels: SealedLabels(dom.y.clone()),
            });
        } else {
            centers.push(dom.clone());
        }
    }
    Ok((centers, user.expect("index checked")))
}

fn benchmark_domain(
    id: &str,
    rotation_deg: f64,
    translation: [f64; 8],
    scale: [f64; 8],
    style: AttackStyle,
) -> DomainSpec {
    let mut attack_offset = Array1::zeros(8);
    attack_offset[1] = ATTACK_MAG;
    DomainSpec {
        id: id.to_string(),
        n_real: 1000,
        n_attack: 1000,
        base_dim: 8,
        shift: DomainShift {
            rotation: rotation_deg.to_radians(),
            translation: Array1::from_vec(translation.to_vec()),
            scale: Array1::from_vec(scale.to_vec()),
        },
        attack_offset,
        noise_sigma: 0.15,
        attack_style: style,
    }
}

/// Four domains that take turns as held-out user, with uneven attack styles.
pub fn default_benchmark() -> Vec<DomainSpec> {
    vec![
        benchmark_domain(
            "dom_a",
            0.0,
            [4.8, -2.1, 2.7, 3.9, -3.3, 1.5, -1.2, 3.0],
            [1.0, 1.1, 0.9, 1.2, 0.8, 1.0, 1.1, 0.9],
            AttackStyle::Print,
        ),
        benchmark_domain(
            "dom_b",
            20.0,
            [-3.6, 4.5, -1.8, 2.4, 4.2, -2.7, 3.3, -1.5],
            [0.9, 1.2, 1.1, 0.8, 1.0, 1.3, 0.9, 1.1],
            AttackStyle::Print,
        ),
        benchmark_domain(
            "dom_c",
            40.0,
            [2.4, -4.2, 3.6, -3.0, 1.8, 3.9, -2.4, 2.1],
            [1.2, 0.8, 1.0, 1.1, 1.3, 0.9, 1.0, 0.8],
            AttackStyle::Replay,
        ),
        benchmark_domain(
            "dom_d",
            70.0,
            [-2.7, 1.8, -3.9, 3.3, -2.1, -3.6, 2.7, 4.2],
            [0.8, 1.0, 1.2, 0.9, 1.1, 0.8, 1.2, 1.0],
            AttackStyle::Mixed,
        ),
    ]
}

/// Default benchmark plus a fifth domain used as the fixed user while the
/// number of data centers sweeps 2, 3, 4.
pub fn sweep_benchmark() -> Vec<DomainSpec> {
    let mut specs = default_benchmark();
    specs.push(benchmark_domain(
        "dom_e",
        80.0,
        [3.3, 3.0, -3.6, -2.4, 3.9, 2.1, -3.0, -1.8],
        [1.1, 0.9, 0.8, 1.2, 1.0, 1.1, 0.9, 1.2],
        AttackStyle::Mixed,
    ));
    specs
}

/// Two single-style data centers and a user exposed to both attack styles.
pub fn attack_split_benchmark() -> Vec<DomainSpec> {
    vec![
        benchmark_domain(
            "print_center",
            10.0,
            [4.2, -2.4, 3.0, -3.6, 2.1, 3.3, -1.5, 2.7],
            [1.0, 1.1, 0.9, 1.2, 0.8, 1.0, 1.1, 0.9],
            AttackStyle::Print,
        ),
        benchmark_domain(
            "replay_center",
            40.0,
            [-3.0, 3.6, -2.1, 2.7, -3.9, 1.8, 3.0, -2.4],
            [0.9, 1.2, 1.1, 0.8, 1.0, 1.3, 0.9, 1.1],
            AttackStyle::Replay,
        ),
        benchmark_domain(
            "mixed_user",
            25.0,
            [2.1, -3.3, 3.9, 2.4, -2.7, -3.6, 1.8, 3.0],
            [1.1, 0.9, 1.0, 1.2, 0.9, 1.1, 0.8, 1.0],
            AttackStyle::Mixed,
        ),
    ]
}
