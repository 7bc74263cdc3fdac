//! Desk-scale datasets: a Gaussian-mixture classification task, CSV ingest,
//! and the per-satellite partition (Dirichlet class skew, quantity ratios,
//! partial labelling).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::config::ExperimentConfig;
use crate::nn::Tensor;
use crate::{rng_for, Error, Result};

/// Row-major feature matrix that may have zero rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::dim(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    /// The given rows as a `[idx.len(), dim]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::dim(format!("row {i} of {}", self.len())));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dim], self.data.clone())
    }
}

/// Labelled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Features,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Features, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} rows but {} labels",
                x.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self { x, labels, classes })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            x: Features::empty(dim),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        self.x.push(row);
        self.labels.push(label);
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim(), self.classes);
        for &i in idx {
            out.push(self.x.row(i), self.labels[i]);
        }
        out
    }
}

/// Shape of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    /// Expected distance between two cluster centres, in units of the
    /// per-coordinate noise scale.
    pub separation: f64,
    pub clusters_per_class: usize,
    /// Training-set size of the rarest class relative to the most common one;
    /// intermediate classes decay geometrically. The test set is balanced.
    pub imbalance: f64,
}

/// Training-set class sizes summing to `n` with geometric decay.
pub fn imbalanced_sizes(n: usize, classes: usize, imbalance: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..classes)
        .map(|m| {
            if classes == 1 {
                1.0
            } else {
                imbalance.powf(m as f64 / (classes - 1) as f64)
            }
        })
        .collect();
    apportion(n, &weights)
}

/// Largest-remainder rounding of `n * w / sum(w)`; ties go to lower indices.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Draws a training and a test set from one Gaussian mixture.
pub fn gaussian_mixture<R: Rng + ?Sized>(
    spec: &MixtureSpec,
    train: usize,
    test: usize,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.dim == 0 || spec.clusters_per_class == 0 {
        return Err(Error::invalid(
            "mixture needs two classes, a positive dimension and clusters",
        ));
    }
    if !(spec.separation >= 0.0) {
        return Err(Error::invalid("separation must be non-negative"));
    }
    // Centres ~ N(0, s^2 / (2 d) I) sit `s` apart on average.
    let scale = spec.separation / (2.0 * spec.dim as f64).sqrt();
    let centres: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            (0..spec.clusters_per_class)
                .map(|_| {
                    (0..spec.dim)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();
    let draw = |sizes: &[usize], rng: &mut R| {
        let mut set = Dataset::empty(spec.dim, spec.classes);
        let mut row = vec![0.0; spec.dim];
        for (class, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                let centre = &centres[class][rng.random_range(0..spec.clusters_per_class)];
                for (v, c) in row.iter_mut().zip(centre) {
                    *v = c + rng.sample::<f64, _>(StandardNormal);
                }
                set.push(&row, class);
            }
        }
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        set.select(&idx)
    };
    let train_set = draw(&imbalanced_sizes(train, spec.classes, spec.imbalance), rng);
    let test_set = draw(&imbalanced_sizes(test, spec.classes, 1.0), rng);
    Ok((train_set, test_set))
}

/// Reads `label,f0,f1,...` rows. A first row starting with `label` is taken
/// as a header.
pub fn load_dataset_csv(path: impl AsRef<Path>, dim: usize, classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut set = Dataset::empty(dim, classes);
    let mut row = Vec::with_capacity(dim);
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if i == 0 && record.get(0) == Some("label") {
            continue;
        }
        if record.len() != dim + 1 {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                dim + 1,
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|e| parse_err(format!("label {:?}: {e}", &record[0])))?;
        if label >= classes {
            return Err(parse_err(format!(
                "label {label} outside {classes} classes"
            )));
        }
        row.clear();
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|e| parse_err(format!("feature {field:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite feature {field:?}")));
            }
            row.push(v);
        }
        set.push(&row, label);
    }
    if set.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no data rows".into(),
        });
    }
    Ok(set)
}

/// One satellite's share of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalData {
    pub labeled: Dataset,
    pub unlabeled: Features,
    /// True classes of `unlabeled`, for diagnostics only.
    pub hidden_labels: Vec<usize>,
}

impl LocalData {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `dataset` across `satellites`: sizes follow `quantity_ratios`
/// (repeated to cover every satellite), each satellite's class mix is drawn
/// from `Dirichlet(alpha)`, and a `labeling_rate` share of each satellite's
/// examples keeps its labels.
///
/// Satellites draw in order; when a class runs out, the shortfall is taken
/// from whichever classes have the most examples left.
pub fn partition_dataset<R: Rng + ?Sized>(
    dataset: &Dataset,
    satellites: usize,
    dirichlet_alpha: f64,
    quantity_ratios: &[f64],
    labeling_rate: f64,
    rng: &mut R,
) -> Result<Vec<LocalData>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot partition an empty dataset"));
    }
    if satellites == 0
        || quantity_ratios.is_empty()
        || !satellites.is_multiple_of(quantity_ratios.len())
    {
        return Err(Error::invalid(format!(
            "{} quantity ratios do not divide {satellites} satellites",
            quantity_ratios.len()
        )));
    }
    if !(dirichlet_alpha > 0.0) || !(labeling_rate > 0.0 && labeling_rate <= 1.0) {
        return Err(Error::invalid(
            "dirichlet_alpha must be positive and labeling_rate in (0, 1]",
        ));
    }
    let classes = dataset.classes;
    let ratios: Vec<f64> = (0..satellites)
        .map(|i| quantity_ratios[i % quantity_ratios.len()])
        .collect();
    let sizes = apportion(dataset.len(), &ratios);
    if sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "{} examples cannot fill quantity ratios {quantity_ratios:?} over {satellites} satellites",
            dataset.len()
        )));
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    // Dirichlet(alpha) as normalised Gamma(alpha, 1) draws; the class count
    // is only known at run time.
    let gamma =
        Gamma::new(dirichlet_alpha, 1.0).map_err(|e| Error::invalid(format!("dirichlet: {e}")))?;

    let mut out = Vec::with_capacity(satellites);
    for &size in &sizes {
        let mut props: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        if !(props.iter().sum::<f64>() > 0.0) {
            props = vec![1.0; classes];
        }
        let want = apportion(size, &props);
        let mut take = vec![0usize; classes];
        let mut short = 0;
        for m in 0..classes {
            take[m] = want[m].min(pools[m].len());
            short += want[m] - take[m];
        }
        while short > 0 {
            let (m, left) = (0..classes)
                .map(|m| (m, pools[m].len() - take[m]))
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            if left == 0 {
                break;
            }
            take[m] += 1;
            short -= 1;
        }
        let mut idx = Vec::with_capacity(size);
        for m in 0..classes {
            let at = pools[m].len() - take[m];
            idx.extend(pools[m].drain(at..));
        }
        idx.shuffle(rng);
        let n_labeled = ((idx.len() as f64 * labeling_rate).round() as usize).clamp(1, idx.len());
        let labeled = dataset.select(&idx[..n_labeled]);
        let rest = dataset.select(&idx[n_labeled..]);
        out.push(LocalData {
            labeled,
            unlabeled: rest.x,
            hidden_labels: rest.labels,
        });
    }
    Ok(out)
}

/// Training partitions and test set described by `cfg`: the bundled mixture
/// unless a dataset CSV is configured. Without a test CSV, `test_samples`
/// rows of the dataset are held out for testing.
pub fn scenario_from_config(cfg: &ExperimentConfig) -> Result<(Vec<LocalData>, Dataset)> {
    cfg.validate()?;
    let (dim, classes) = (cfg.input_dim(), cfg.classes());
    let mut data_rng = rng_for(cfg.seed, 0);
    let (train, test) = match &cfg.dataset_csv {
        None => {
            let spec = MixtureSpec {
                classes,
                dim,
                separation: cfg.class_separation,
                clusters_per_class: cfg.clusters_per_class,
                imbalance: cfg.class_imbalance,
            };
            gaussian_mixture(&spec, cfg.train_samples, cfg.test_samples, &mut data_rng)?
        }
        Some(path) => {
            let all = load_dataset_csv(path, dim, classes)?;
            match &cfg.test_csv {
                Some(test_path) => (all, load_dataset_csv(test_path, dim, classes)?),
                None => {
                    if all.len() <= cfg.test_samples {
                        return Err(Error::Config(format!(
                            "{} rows cannot spare {} for testing",
                            all.len(),
                            cfg.test_samples
                        )));
                    }
                    let mut idx: Vec<usize> = (0..all.len()).collect();
                    idx.shuffle(&mut data_rng);
                    let (test_idx, train_idx) = idx.split_at(cfg.test_samples);
                    (all.select(train_idx), all.select(test_idx))
                }
            }
        }
    };
    let parts = partition_dataset(
        &train,
        cfg.satellites,
        cfg.dirichlet_alpha,
        &cfg.quantity_ratios,
        cfg.labeling_rate,
        &mut rng_for(cfg.seed, 3),
    )
    .map_err(|e| match e {
        Error::Validation(msg) => Error::Config(msg),
        other => other,
    })?;
    Ok((parts, test))
}
