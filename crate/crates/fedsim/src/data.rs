//! Dataset synthesis and ingestion, client partitioning, and poisoned-dataset
//! construction.
//!
//! The synthetic main-task data is a Gaussian mixture with one unit-norm
//! center direction per class, scaled by 3.0. The out-of-distribution pool
//! lives at the *negated* class directions plus uniform noise, which keeps the
//! two distributions disjoint by construction.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Scale applied to the unit-norm class directions.
pub const CENTER_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Id,
    Ood,
}

/// Labeled examples with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if features.rows == 0 {
            return Err(Error::InvalidData("dataset must be nonempty".into()));
        }
        if features.rows != labels.len() {
            return Err(Error::LengthMismatch {
                expected: features.rows,
                got: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let provenance = vec![provenance; features.rows];
        Ok(Dataset { features, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(indices.len(), self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        let mut provenance = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
            provenance.push(self.provenance[i]);
        }
        Dataset { features, labels, provenance }
    }
}

/// Poisoning parameters for one malicious client.
#[derive(Debug, Clone)]
pub struct PoisonSpec {
    pub ratio: f64,
    pub target_label: usize,
    /// Seeds the choice of which local samples are replaced (per client).
    pub seed: u64,
    /// Seeds the draw from the OOD pool. The attacker owns a single OOD
    /// dataset, so colluding clients share one draw seed.
    pub ood_seed: u64,
}

/// Per-client index lists over a dataset.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Unit-norm class directions, a deterministic function of `(k, d)` only so
/// the ID generator and the OOD generator agree on the geometry.
///
/// When the dimension allows (`d > k`), every class direction shares one
/// common axis and differs in its own orthogonal axis, all with equal
/// weight: `u_c = (e_0 + e_{c+1}) / sqrt(2)`. Classes then share low-level
/// input statistics no matter how labels are mixed — mirroring how natural
/// images of different classes share global statistics — while the
/// out-of-distribution pool at the *negated* directions breaks the shared
/// axis. For tight dimensions the directions fall back to seeded random
/// unit vectors.
pub fn class_centers(k: usize, d: usize) -> Vec<Vec<f64>> {
    if d > k {
        let shared = 0.65f64;
        let own = (1.0 - shared * shared).sqrt();
        return (0..k)
            .map(|c| {
                let mut v = vec![0.0; d];
                v[0] = shared;
                v[c + 1] = own;
                v
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ffb_ac4d ^ ((k as u64) << 32) ^ d as u64);
    (0..k)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = crate::linalg::l2_norm(&v);
            for x in v.iter_mut() {
                *x /= norm;
            }
            v
        })
        .collect()
}

/// Gaussian-mixture main-task data: class `c` centered at `3 * u_c` with
/// isotropic standard deviation `spread`.
pub fn gen_synthetic_id(
    k: usize,
    d: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return Err(Error::InvalidConfig(format!(
            "synthetic ID data needs k >= 2 and d >= 2 (got k={k}, d={d})"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidConfig("per_class must be positive".into()));
    }
    let centers = class_centers(k, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * per_class;
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for (j, x) in row.iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = CENTER_SCALE * centers[c][j] + spread * noise;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, Provenance::Id)
}

/// Out-of-distribution pool: samples at the negated class directions scaled
/// by 3.0 plus uniform noise in `[-0.5, 0.5]^d`. Stored labels are a
/// placeholder 0; the real target label is stamped by [`poison_dataset`].
pub fn gen_synthetic_ood(k: usize, d: usize, count: usize, seed: u64) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return Err(Error::InvalidConfig(format!(
            "synthetic OOD data needs k >= 2 and d >= 2 (got k={k}, d={d})"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidConfig("count must be positive".into()));
    }
    let centers = class_centers(k, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Matrix::zeros(count, d);
    for r in 0..count {
        let c = rng.random_range(0..k);
        let row = features.row_mut(r);
        for (j, x) in row.iter_mut().enumerate() {
            *x = -CENTER_SCALE * centers[c][j] + rng.random_range(-0.5..0.5);
        }
    }
    let mut ds = Dataset::new(features, vec![0; count], Provenance::Ood)?;
    ds.provenance = vec![Provenance::Ood; count];
    Ok(ds)
}

/// Random permutation split into `n` near-equal parts (sizes differ by <= 1).
pub fn iid_partition(dataset: &Dataset, n: usize, seed: u64) -> Result<PartitionPlan> {
    if n == 0 || n > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} samples over {n} clients",
            dataset.len()
        )));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let base = dataset.len() / n;
    let extra = dataset.len() % n;
    let mut clients = Vec::with_capacity(n);
    let mut off = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        clients.push(indices[off..off + size].to_vec());
        off += size;
    }
    Ok(PartitionPlan { clients })
}

/// Per class, draw proportions from `Dir(alpha * 1_n)` and assign that
/// class's samples to clients multinomially. Empty clients are repaired by
/// moving one random sample from the currently largest client.
pub fn dirichlet_partition(
    dataset: &Dataset,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n < 2 {
        return Err(Error::InvalidConfig("dirichlet partition needs n >= 2".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be > 0 (got {alpha})")));
    }
    if n > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} samples over {n} clients",
            dataset.len()
        )));
    }
    let k = dataset.labels.iter().copied().max().unwrap_or(0) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("bad alpha for Dirichlet: {e}")))?;
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n];
    for class in 0..k {
        let mut class_idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if class_idx.is_empty() {
            continue;
        }
        class_idx.shuffle(&mut rng);
        // Dirichlet draw via normalized gammas.
        let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = p.iter().sum();
        if total == 0.0 {
            // All gammas underflowed (tiny alpha); fall back to one random client.
            let lucky = rng.random_range(0..n);
            p = vec![0.0; n];
            p[lucky] = 1.0;
        } else {
            for v in p.iter_mut() {
                *v /= total;
            }
        }
        // Cumulative distribution for the per-sample categorical draw.
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for v in &p {
            acc += v;
            cdf.push(acc);
        }
        for &i in &class_idx {
            let u: f64 = rng.random_range(0.0..1.0);
            let client = cdf.partition_point(|&c| c < u).min(n - 1);
            clients[client].push(i);
        }
    }
    // Repair empty clients.
    loop {
        let Some(empty) = clients.iter().position(|c| c.is_empty()) else {
            break;
        };
        let largest = (0..n)
            .max_by_key(|&i| clients[i].len())
            .expect("n >= 2");
        if clients[largest].len() <= 1 {
            return Err(Error::InvalidData(
                "cannot repair empty client: not enough samples".into(),
            ));
        }
        let pick = rng.random_range(0..clients[largest].len());
        let moved = clients[largest].swap_remove(pick);
        clients[empty].push(moved);
    }
    Ok(PartitionPlan { clients })
}

/// Replace a uniformly random `floor(r * |D_i|)`-sized subset of the local
/// data with target-labeled samples drawn without replacement from the OOD
/// pool. The result has the same size as the input.
pub fn poison_dataset(local: &Dataset, ood_pool: &Dataset, spec: &PoisonSpec) -> Result<Dataset> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "poison ratio must be in (0, 1) (got {})",
            spec.ratio
        )));
    }
    if local.dim() != ood_pool.dim() {
        return Err(Error::DimensionMismatch(format!(
            "local dim {} != OOD dim {}",
            local.dim(),
            ood_pool.dim()
        )));
    }
    let replace = (spec.ratio * local.len() as f64).floor() as usize;
    if replace == 0 {
        return Err(Error::InvalidConfig(format!(
            "poison ratio {} replaces zero samples of a {}-sample dataset",
            spec.ratio,
            local.len()
        )));
    }
    if replace > ood_pool.len() {
        return Err(Error::InvalidData(format!(
            "OOD pool of {} samples cannot supply {replace} replacements",
            ood_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut local_idx: Vec<usize> = (0..local.len()).collect();
    local_idx.shuffle(&mut rng);
    let kept = &local_idx[replace..];
    let mut ood_rng = ChaCha8Rng::seed_from_u64(spec.ood_seed);
    let mut ood_idx: Vec<usize> = (0..ood_pool.len()).collect();
    ood_idx.shuffle(&mut ood_rng);
    let drawn = &ood_idx[..replace];

    let d = local.dim();
    let mut features = Matrix::zeros(local.len(), d);
    let mut labels = Vec::with_capacity(local.len());
    let mut provenance = Vec::with_capacity(local.len());
    for (r, &i) in kept.iter().enumerate() {
        features.row_mut(r).copy_from_slice(local.features.row(i));
        labels.push(local.labels[i]);
        provenance.push(local.provenance[i]);
    }
    for (r, &i) in drawn.iter().enumerate() {
        features
            .row_mut(kept.len() + r)
            .copy_from_slice(ood_pool.features.row(i));
        labels.push(spec.target_label);
        provenance.push(Provenance::Ood);
    }
    Ok(Dataset { features, labels, provenance })
}

/// Write the `label,f0,...,f{d-1}` CSV format. Floats are printed with the
/// shortest round-trip representation, so export/load is lossless.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..dataset.dim() {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for r in 0..dataset.len() {
        write!(out, "{}", dataset.labels[r]).unwrap();
        for &v in dataset.features.row(r) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse the CSV format written by [`export_csv`]. Row order is preserved.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::CsvParse {
            line: 1,
            msg: format!("header must start with 'label', got '{header}'"),
        });
    }
    let d = cols.len() - 1;
    if d == 0 {
        return Err(Error::CsvParse {
            line: 1,
            msg: "no feature columns".into(),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::CsvParse {
                line: lineno,
                msg: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::CsvParse {
            line: lineno,
            msg: format!("bad label '{}'", fields[0]),
        })?;
        let mut row = Vec::with_capacity(d);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::CsvParse {
                line: lineno,
                msg: format!("bad feature '{f}'"),
            })?;
            row.push(v);
        }
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::CsvParse {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    Dataset::new(Matrix::from_rows(rows)?, labels, Provenance::Id)
}
