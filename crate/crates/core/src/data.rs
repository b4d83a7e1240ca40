//! Datasets, non-IID client partitioning, OOD generation and the CIFAR-10 binary loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::seed;

/// Label carried by out-of-distribution samples. Never a valid class.
pub const OOD_LABEL: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Gaussian blobs whose class means are a function of `(classes, dim, class_separation)`.
    Synthetic {
        class_separation: f64,
    },
    File,
    /// Generated OOD samples; labels are all [`OOD_LABEL`].
    Ood,
}

impl Provenance {
    fn encode(&self) -> String {
        match self {
            Provenance::Synthetic { class_separation } => format!("synthetic:{class_separation}"),
            Provenance::File => "file".into(),
            Provenance::Ood => "ood".into(),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        if let Some(sep) = s.strip_prefix("synthetic:") {
            let class_separation = sep
                .parse()
                .map_err(|_| Error::Format(format!("bad provenance '{s}'")))?;
            return Ok(Provenance::Synthetic { class_separation });
        }
        match s {
            "file" => Ok(Provenance::File),
            "ood" => Ok(Provenance::Ood),
            _ => Err(Error::Format(format!("bad provenance '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("dataset labels", inputs.rows(), labels.len()));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let ood = provenance == Provenance::Ood;
        if let Some(&bad) = labels
            .iter()
            .find(|&&y| if ood { y != OOD_LABEL } else { y >= classes })
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} invalid for {classes}-class dataset ({})",
                provenance.encode()
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_ood(&self) -> bool {
        self.provenance == Provenance::Ood
    }

    pub fn batch(&self) -> Result<Batch<'_>> {
        Batch::new(&self.inputs, &self.labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            if y < self.classes {
                counts[y] += 1;
            }
        }
        counts
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset");
        c.set("classes", self.classes)
            .set("dim", self.dim())
            .set("samples", self.len())
            .set("provenance", self.provenance.encode());
        c.push_array("inputs", self.inputs.data().to_vec());
        let labels = self
            .labels
            .iter()
            .map(|&y| if y == OOD_LABEL { -1.0 } else { y as f64 })
            .collect();
        c.push_array("labels", labels);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        let classes: usize = c.parse_field("classes")?;
        let dim: usize = c.parse_field("dim")?;
        let samples: usize = c.parse_field("samples")?;
        let provenance = Provenance::decode(c.require("provenance")?)?;
        let inputs = Matrix::new(samples, dim, c.array("inputs")?.to_vec())?;
        let labels = c
            .array("labels")?
            .iter()
            .map(|&v| if v < 0.0 { OOD_LABEL } else { v as usize })
            .collect();
        Dataset::new(inputs, labels, classes, provenance)
    }
}

/// Class means of the synthetic generator.
///
/// With `classes <= dim` the means sit on scaled coordinate axes so every pair is
/// exactly `separation` apart; otherwise they are spread on a circle in the first
/// two coordinates with adjacent means `separation` apart.
pub fn synthetic_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut m = vec![0.0; dim];
            if classes <= dim {
                m[k] = separation / 2f64.sqrt();
            } else {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

/// Unit-variance isotropic Gaussian blob per class, `n_per_class` samples each,
/// rows grouped by class.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || n_per_class < 1 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs classes >= 2, dim >= 2, n_per_class >= 1 (got {classes}, {dim}, {n_per_class})"
        )));
    }
    if !class_separation.is_finite() || class_separation < 0.0 {
        return Err(Error::InvalidArgument(
            "class_separation must be finite and >= 0".into(),
        ));
    }
    let means = synthetic_means(classes, dim, class_separation);
    let mut rng = seed::stream(seed, "synthetic", &[]);
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + z);
            }
            labels.push(k);
        }
    }
    let inputs = Matrix::new(classes * n_per_class, dim, data)?;
    Dataset::new(inputs, labels, classes, Provenance::Synthetic { class_separation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub dataset: Dataset,
    /// Row indices into the source dataset, ascending.
    pub source_indices: Vec<usize>,
}

impl ClientPartition {
    pub fn n(&self) -> usize {
        self.dataset.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub clients: usize,
    pub alpha: Option<f64>,
    pub quantity_skew: Option<Vec<f64>>,
    pub seed: u64,
}

/// Split `total` into integer parts proportional to `weights` (largest remainder,
/// ties to the lower index). Parts always sum to `total`.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

/// Draw from `Dir(alpha * 1_n)`.
///
/// Gamma variates are combined in log space so tiny concentrations (alpha << 1)
/// do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    // G(a) = G(a + 1) * U^(1/a) keeps the shape parameter >= 1
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>();
            g.ln() + (1.0 - u).ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn build_partitions(ds: &Dataset, assignment: Vec<Vec<usize>>) -> Vec<ClientPartition> {
    assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            idx.sort_unstable();
            ClientPartition {
                client_id,
                dataset: ds.subset(&idx),
                source_indices: idx,
            }
        })
        .collect()
}

/// Label-skewed split: for every class a proportion vector `p ~ Dir(alpha)` over
/// clients decides how that class's samples are divided.
///
/// Draws that leave a client empty are discarded and redrawn from seed + 1,
/// up to 100 attempts.
pub fn dirichlet_partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<ClientPartition>> {
    let alpha = plan
        .alpha
        .ok_or_else(|| Error::InvalidArgument("dirichlet partition requires alpha".into()))?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let n_clients = plan.clients;
    if n_clients == 0 || n_clients > ds.len() {
        return Err(Error::Partition {
            clients: n_clients,
            samples: ds.len(),
        });
    }
    let by_class = ds.class_indices();
    for attempt in 0..100u64 {
        let mut rng = seed::stream(plan.seed.wrapping_add(attempt), "dirichlet", &[]);
        let mut assignment = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = sample_dirichlet(alpha, n_clients, &mut rng);
            let counts = largest_remainder(&p, members.len());
            let mut start = 0;
            for (client, &c) in counts.iter().enumerate() {
                assignment[client].extend_from_slice(&members[start..start + c]);
                start += c;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            return Ok(build_partitions(ds, assignment));
        }
    }
    Err(Error::Partition {
        clients: n_clients,
        samples: ds.len(),
    })
}

/// Class-stratified split where client `i` receives `proportions[i] * n` samples
/// (largest-remainder rounding).
///
/// Samples are laid out in an interleaved order (each class's members placed at
/// fractional positions `(j + 0.5) / n_k`) and cut into contiguous chunks, so
/// every chunk's label histogram tracks the global one.
pub fn quantity_skew_partition(ds: &Dataset, proportions: &[f64], seed: u64) -> Result<Vec<ClientPartition>> {
    if proportions.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one client proportion is required".into(),
        ));
    }
    if proportions.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidArgument("client proportions must be positive".into()));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "client proportions sum to {sum}, not 1"
        )));
    }
    let sizes = largest_remainder(proportions, ds.len());
    if sizes.contains(&0) {
        return Err(Error::Partition {
            clients: proportions.len(),
            samples: ds.len(),
        });
    }
    let mut rng = seed::stream(seed, "quantity", &[]);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(ds.len());
    for (k, members) in ds.class_indices().iter().enumerate() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let nk = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / nk, k, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut assignment = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in &sizes {
        assignment.push(keyed[start..start + s].iter().map(|t| t.2).collect());
        start += s;
    }
    Ok(build_partitions(ds, assignment))
}

/// Dispatch on the plan: Dirichlet label skew, quantity skew, or (neither) an
/// IID stratified equal split.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<ClientPartition>> {
    match (&plan.alpha, &plan.quantity_skew) {
        (Some(_), Some(_)) => Err(Error::InvalidArgument(
            "alpha and quantity proportions are mutually exclusive".into(),
        )),
        (Some(_), None) => dirichlet_partition(ds, plan),
        (None, Some(p)) => {
            if p.len() != plan.clients {
                return Err(Error::InvalidArgument(format!(
                    "{} quantity proportions for {} clients",
                    p.len(),
                    plan.clients
                )));
            }
            quantity_skew_partition(ds, p, plan.seed)
        }
        (None, None) => {
            if plan.clients == 0 {
                return Err(Error::Partition {
                    clients: 0,
                    samples: ds.len(),
                });
            }
            let uniform = vec![1.0 / plan.clients as f64; plan.clients];
            quantity_skew_partition(ds, &uniform, plan.seed)
        }
    }
}

/// One client's local train and test data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Stratified split of one client partition: per class, `round(test_fraction * n_k)`
/// samples go to the test set.
pub fn train_test_split(part: &ClientPartition, test_fraction: f64, seed: u64) -> Result<ClientData> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in [0, 1)"
        )));
    }
    let ds = &part.dataset;
    let mut rng = seed::stream(seed, "split", &[part.client_id as u64]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in ds.class_indices() {
        let mut members = members;
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        let n_test = n_test.min(members.len().saturating_sub(1));
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ClientData {
        client_id: part.client_id,
        train: ds.subset(&train),
        test: ds.subset(&test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    /// The reference distribution translated by `magnitude` along a random unit direction.
    MeanShift,
    /// `classes` new unit-variance blobs centred `magnitude` away from the reference centroid.
    FreshClasses,
}

/// Per-class means and a pooled per-coordinate standard deviation.
fn generative_params(reference: &Dataset) -> (Vec<Vec<f64>>, f64) {
    if let Provenance::Synthetic { class_separation } = reference.provenance {
        return (
            synthetic_means(reference.classes, reference.dim(), class_separation),
            1.0,
        );
    }
    let d = reference.dim();
    let mut means = vec![vec![0.0; d]; reference.classes];
    let counts = reference.class_counts();
    for (row, &y) in reference.inputs.iter_rows().zip(&reference.labels) {
        for (m, v) in means[y].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= c.max(1) as f64;
        }
    }
    let mut ss = 0.0;
    for (row, &y) in reference.inputs.iter_rows().zip(&reference.labels) {
        for (v, m) in row.iter().zip(&means[y]) {
            ss += (v - m) * (v - m);
        }
    }
    let std = (ss / (reference.len() * d).max(1) as f64).sqrt();
    (means, std)
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Out-of-distribution samples shaped like `reference` (same count and width),
/// every label set to [`OOD_LABEL`].
pub fn gen_ood(reference: &Dataset, mode: OodMode, magnitude: f64, seed: u64) -> Result<Dataset> {
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "OOD magnitude must be >= 0, got {magnitude}"
        )));
    }
    if reference.is_empty() {
        return Err(Error::InvalidArgument("OOD reference dataset is empty".into()));
    }
    let d = reference.dim();
    let (means, std) = generative_params(reference);
    let mut rng = seed::stream(seed, "ood", &[]);
    let centers: Vec<Vec<f64>> = match mode {
        OodMode::MeanShift => {
            let u = random_unit(d, &mut rng);
            means
                .iter()
                .map(|m| m.iter().zip(&u).map(|(a, b)| a + magnitude * b).collect())
                .collect()
        }
        OodMode::FreshClasses => {
            let mut centroid = vec![0.0; d];
            for m in &means {
                for (c, v) in centroid.iter_mut().zip(m) {
                    *c += v / means.len() as f64;
                }
            }
            (0..means.len())
                .map(|_| {
                    let u = random_unit(d, &mut rng);
                    centroid.iter().zip(&u).map(|(c, b)| c + magnitude * b).collect()
                })
                .collect()
        }
    };
    let counts = match mode {
        OodMode::MeanShift => {
            let mut c = reference.class_counts();
            if c.iter().sum::<usize>() == 0 {
                c = largest_remainder(&vec![1.0; centers.len()], reference.len());
            }
            c
        }
        OodMode::FreshClasses => largest_remainder(&vec![1.0; centers.len()], reference.len()),
    };
    let mut data = Vec::with_capacity(reference.len() * d);
    for (center, &count) in centers.iter().zip(&counts) {
        for _ in 0..count {
            for &c in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + std * z);
            }
        }
    }
    let n = counts.iter().sum();
    Dataset::new(
        Matrix::new(n, d, data)?,
        vec![OOD_LABEL; n],
        reference.classes,
        Provenance::Ood,
    )
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

/// Parse the CIFAR-10 binary layout: per record one label byte (0-9) followed by
/// 3072 pixel bytes (R, G, B planes of a row-major 32x32 image), scaled to [0, 1].
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::CifarLength {
            len: bytes.len(),
            offset: bytes.len() / CIFAR_RECORD * CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::CifarLabel { record, label });
        }
        labels.push(label as usize);
        data.extend(chunk[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Matrix::new(n, CIFAR_PIXELS, data)?, labels, 10, Provenance::File)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Inverse of [`parse_cifar10`]; pixels are re-quantized with `round(255 x)`.
pub fn to_cifar10_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.dim() != CIFAR_PIXELS || ds.classes != 10 {
        return Err(Error::shape(
            "CIFAR-10 export",
            "3072 features, 10 classes",
            format!("{} features, {} classes", ds.dim(), ds.classes),
        ));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (row, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
        if y > 9 {
            return Err(Error::InvalidArgument(format!(
                "label {y} cannot be written as CIFAR-10"
            )));
        }
        out.push(y as u8);
        out.extend(row.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}
