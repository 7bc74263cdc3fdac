//! Round orchestration: local training between contacts, activation transfer
//! during contacts, and the ground station's threshold update, interpolation,
//! server training and client aggregation.
//!
//! One round is one orbital period. Every satellite first spends its
//! non-contact time training locally, then meets the ground station once.
//! After the last contact of the round the ground station computes new
//! thresholds, trains the server model, averages the client sub-models and
//! sends both back, charged to each satellite's uplink budget for the round.

use log::{debug, warn};
use rand::seq::index;
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Features, LocalData};
use crate::interp::{interpolate_round, InterpConfig};
use crate::link::{
    record_bytes, select_for_upload, ActivationRecord, Origin, SelectionPolicy, TransferBudget,
};
use crate::nn::{batch_cross_entropy, softmax_cross_entropy, CutRole, LayerKind, SubModel, Tensor};
use crate::orbit::{
    contact_fraction, contact_windows_with_fraction, load_rate_trace, orbital_period,
    ContactWindow, OrbitConfig, RateSource,
};
use crate::ssl::{
    class_distribution, class_loss, contrastive_loss, ema_update_stack, pseudo_label_batch,
    weak_augment, ClassCounts, ClientStack, PseudoLabeled, PseudoOutcome, SslHyper, StackGrads,
    ThresholdPolicy, ThresholdTable, WeakAugment,
};
use crate::{rng_for, Error, Result, SimRng};

/// Splits a layer chain after `cut_index` layers.
pub fn split_model(global: &SubModel, cut_index: usize) -> Result<(SubModel, SubModel)> {
    let n = global.layers().len();
    if cut_index == 0 || cut_index >= n {
        return Err(Error::invalid(format!(
            "cut {cut_index} must leave layers on both sides of a {n}-layer model"
        )));
    }
    let (client, server) = global.layers().split_at(cut_index);
    Ok((
        SubModel::new(CutRole::Client, client.to_vec())?,
        SubModel::new(CutRole::Server, server.to_vec())?,
    ))
}

/// Parameterwise weighted mean; weights are normalised to sum to one.
pub fn aggregate_clients(models: &[&SubModel], weights: &[f64]) -> Result<SubModel> {
    let first = *models
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if models.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("aggregation weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("aggregation weights sum to zero"));
    }
    if models.iter().any(|m| !m.same_architecture(first)) {
        return Err(Error::dim("aggregated models differ in architecture"));
    }
    let mut out = first.clone();
    for (l, layer) in out.layers_mut().iter_mut().enumerate() {
        for (p, dst) in [layer.weights.data_mut(), layer.bias.data_mut()]
            .into_iter()
            .enumerate()
        {
            for (k, v) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (m, w) in models.iter().zip(weights) {
                    let src = &m.layers()[l];
                    let x = if p == 0 {
                        src.weights.data()[k]
                    } else {
                        src.bias.data()[k]
                    };
                    acc += w / total * x;
                }
                *v = acc;
            }
        }
    }
    Ok(out)
}

/// Share of `test` classified correctly by `server(client(x))`.
pub fn evaluate(client: &SubModel, server: &SubModel, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let logits = server.predict(&client.predict(&test.x.to_tensor()?)?)?;
    let correct = (0..logits.rows())
        .filter(|&r| crate::ssl::argmax(logits.row(r)).0 == test.labels[r])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean soft-label cross-entropy of `server` on a batch of activations, and
/// the parameter and input gradients.
pub fn server_loss(
    server: &SubModel,
    features: &Tensor,
    targets: &Tensor,
) -> Result<(f64, crate::nn::SubModelGrads, Tensor)> {
    let (logits, cache) = server.forward(features)?;
    let (loss, grad) = batch_cross_entropy(&logits, targets)?;
    let (grads, input_grad) = server.backward(&cache, &grad)?;
    Ok((loss, grads, input_grad))
}

fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        index::sample(rng, n, k).into_vec()
    }
}

/// Optimiser settings shared by local and server training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hyper: SslHyper,
    pub aug: WeakAugment,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            hyper: cfg.hyper,
            aug: cfg.augment(),
        }
    }
}

/// Mean loss terms over the steps a satellite trained in one round. Terms
/// that never had data stay `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalLosses {
    pub loss_x: Option<f64>,
    pub loss_u: Option<f64>,
    pub loss_v: Option<f64>,
    pub steps: usize,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Default)]
struct LossAcc {
    x: Mean,
    u: Mean,
    v: Mean,
    steps: usize,
}

impl LossAcc {
    fn finish(self) -> LocalLosses {
        LocalLosses {
            loss_x: self.x.get(),
            loss_u: self.u.get(),
            loss_v: self.v.get(),
            steps: self.steps,
        }
    }
}

/// Batch rows, `(row, pseudo-label)` pairs and low-confidence rows.
type UnlabeledDraw = (Tensor, Vec<(usize, usize)>, Vec<usize>);

#[derive(Debug, Clone)]
pub struct SatelliteState {
    pub id: usize,
    pub student: ClientStack,
    pub teacher: ClientStack,
    pub labeled: Dataset,
    pub unlabeled: Features,
    /// Unlabelled items the teacher labelled confidently at the last refresh.
    pub pseudo_pool: Vec<PseudoLabeled>,
    /// Indices of the remaining unlabelled items.
    pub low_conf_pool: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub counts: ClassCounts,
    rng: SimRng,
}

impl SatelliteState {
    pub fn new(
        id: usize,
        model: ClientStack,
        data: LocalData,
        thresholds: Vec<f64>,
        rng: SimRng,
    ) -> Result<Self> {
        let classes = model.classes();
        if data.labeled.classes != classes || thresholds.len() != classes {
            return Err(Error::dim(format!(
                "satellite {id}: data, thresholds and model disagree on classes"
            )));
        }
        let counts = ClassCounts::new(data.labeled.class_counts(), vec![0; classes])?;
        Ok(Self {
            id,
            teacher: model.clone(),
            student: model,
            labeled: data.labeled,
            unlabeled: data.unlabeled,
            pseudo_pool: Vec::new(),
            low_conf_pool: Vec::new(),
            thresholds,
            counts,
            rng,
        })
    }

    pub fn data_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Student restarts from the teacher's weights.
    pub fn begin_round(&mut self) {
        self.student = self.teacher.clone();
    }

    /// Labels the whole unlabelled set with the teacher and refreshes the
    /// pools and class counts.
    pub fn refresh_pseudo_labels(&mut self) -> Result<()> {
        self.pseudo_pool.clear();
        self.low_conf_pool.clear();
        let classes = self.student.classes();
        let mut pseudo = vec![0u64; classes];
        if !self.unlabeled.is_empty() {
            let outcomes = pseudo_label_batch(
                &self.teacher,
                &self.unlabeled.to_tensor()?,
                &self.thresholds,
            )?;
            for (index, outcome) in outcomes.into_iter().enumerate() {
                match outcome {
                    PseudoOutcome::Labeled { class, confidence } => {
                        pseudo[class] += 1;
                        self.pseudo_pool.push(PseudoLabeled {
                            index,
                            pseudo_label: class,
                            confidence,
                        });
                    }
                    PseudoOutcome::LowConfidence => self.low_conf_pool.push(index),
                }
            }
        }
        self.counts = ClassCounts::new(self.labeled.class_counts(), pseudo)?;
        Ok(())
    }

    /// Cut-layer activations of every labelled and pseudo-labelled item.
    pub fn activation_pool(&self) -> Result<Vec<ActivationRecord>> {
        let classes = self.student.classes();
        let mut pool = Vec::with_capacity(self.labeled.len() + self.pseudo_pool.len());
        if !self.labeled.is_empty() {
            let z = self.student.features(&self.labeled.x.to_tensor()?)?;
            for (r, &y) in self.labeled.labels.iter().enumerate() {
                pool.push(ActivationRecord::hard(
                    z.row(r).to_vec(),
                    y,
                    classes,
                    self.id,
                    Origin::Labeled,
                )?);
            }
        }
        if !self.pseudo_pool.is_empty() {
            let idx: Vec<usize> = self.pseudo_pool.iter().map(|p| p.index).collect();
            let z = self.student.features(&self.unlabeled.batch(&idx)?)?;
            for (r, p) in self.pseudo_pool.iter().enumerate() {
                pool.push(ActivationRecord::hard(
                    z.row(r).to_vec(),
                    p.pseudo_label,
                    classes,
                    self.id,
                    Origin::Pseudo,
                )?);
            }
        }
        Ok(pool)
    }

    /// Draws an unlabelled batch and splits it by teacher confidence into
    /// pseudo-labelled rows (with labels) and low-confidence rows.
    fn draw_unlabeled(&mut self, batch_size: usize) -> Result<UnlabeledDraw> {
        let idx = sample_batch(&mut self.rng, self.unlabeled.len(), batch_size);
        let xb = self.unlabeled.batch(&idx)?;
        let mut pseudo = Vec::new();
        let mut low = Vec::new();
        for (r, o) in pseudo_label_batch(&self.teacher, &xb, &self.thresholds)?
            .into_iter()
            .enumerate()
        {
            match o {
                PseudoOutcome::Labeled { class, .. } => pseudo.push((r, class)),
                PseudoOutcome::LowConfidence => low.push(r),
            }
        }
        Ok((xb, pseudo, low))
    }

    /// Mean InfoNCE between the student's view of `x` and the teacher's, and
    /// the client sub-model gradient it induces.
    fn contrastive_step(
        &mut self,
        x: &Tensor,
        hyper: &SslHyper,
        aug: &WeakAugment,
    ) -> Result<(f64, crate::nn::SubModelGrads)> {
        let k = x.rows() as f64;
        let view = weak_augment(x, aug, &mut self.rng);
        let (z, cache) = self.student.body.forward(&view)?;
        let target = self.teacher.features(x)?;
        let (loss, mut grad) = contrastive_loss(&z, &target, hyper.phi)?;
        grad.scale(1.0 / k);
        let (grads, _) = self.student.body.backward(&cache, &grad)?;
        Ok((loss / k, grads))
    }
}

/// Local training between contacts: `steps` SGD steps on the combined
/// supervised, pseudo-label and contrastive loss, each followed by an EMA
/// update of the teacher.
pub fn non_contact_phase(
    sat: &mut SatelliteState,
    steps: usize,
    train: &TrainSettings,
) -> Result<LocalLosses> {
    let mut acc = LossAcc::default();
    if steps > 0 && sat.labeled.is_empty() {
        warn!(
            "satellite {} has no labelled data; training without the supervised term",
            sat.id
        );
    }
    let hyper = train.hyper;
    for _ in 0..steps {
        let mut grads = StackGrads::zeros_like(&sat.student);
        if !sat.labeled.is_empty() {
            let idx = sample_batch(&mut sat.rng, sat.labeled.len(), train.batch_size);
            let labels: Vec<usize> = idx.iter().map(|&i| sat.labeled.labels[i]).collect();
            let (loss, g) = class_loss(
                &sat.student,
                &sat.labeled.x.batch(&idx)?,
                &labels,
                &train.aug,
                &mut sat.rng,
            )?;
            grads.add_scaled(&g, 1.0)?;
            acc.x.add(loss);
        }
        if !sat.unlabeled.is_empty() {
            let (xb, pseudo, low) = sat.draw_unlabeled(train.batch_size)?;
            if !pseudo.is_empty() && hyper.lambda_u > 0.0 {
                let rows: Vec<usize> = pseudo.iter().map(|p| p.0).collect();
                let labels: Vec<usize> = pseudo.iter().map(|p| p.1).collect();
                let (loss, g) = class_loss(
                    &sat.student,
                    &xb.select_rows(&rows)?,
                    &labels,
                    &train.aug,
                    &mut sat.rng,
                )?;
                grads.add_scaled(&g, hyper.lambda_u)?;
                acc.u.add(loss);
            }
            if low.len() >= 2 && hyper.lambda_v > 0.0 {
                let (loss, g) = sat.contrastive_step(&xb.select_rows(&low)?, &hyper, &train.aug)?;
                grads.body.add_scaled(&g, hyper.lambda_v)?;
                acc.v.add(loss);
            }
        }
        sat.student.sgd_step(&grads, train.learning_rate)?;
        ema_update_stack(&mut sat.teacher, &sat.student, hyper.ema_decay)?;
        acc.steps += 1;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone)]
pub struct GroundStationState {
    pub server: SubModel,
    /// Activations received this round.
    pub activation_store: Vec<ActivationRecord>,
    /// Latest class counts reported by each satellite.
    pub counts: Vec<ClassCounts>,
    pub client_dist: Vec<f64>,
    pub thresholds: ThresholdTable,
    /// Most recent aggregated client sub-model, used for evaluation.
    pub client_model: SubModel,
    rng: SimRng,
}

impl GroundStationState {
    pub fn new(
        server: SubModel,
        client_model: SubModel,
        counts: Vec<ClassCounts>,
        thresholds: ThresholdTable,
        rng: SimRng,
    ) -> Self {
        let classes = server.out_dim();
        Self {
            server,
            activation_store: Vec::new(),
            counts,
            client_dist: vec![1.0 / classes as f64; classes],
            thresholds,
            client_model,
            rng,
        }
    }

    /// Recomputes thresholds and the client class distribution from the
    /// latest counts.
    pub fn update_thresholds(
        &mut self,
        policy: ThresholdPolicy,
        base: f64,
        cap: f64,
    ) -> Result<()> {
        match class_distribution(&self.counts) {
            Ok(q) => self.client_dist = q,
            Err(e) => warn!("keeping previous class distribution: {e}"),
        }
        self.thresholds = policy.compute(&self.counts, base, cap)?;
        Ok(())
    }
}

/// What one contact moved, in bytes and records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactReport {
    /// Satellite-to-ground bytes, counts included.
    pub bytes_down: u64,
    /// Ground-to-satellite bytes.
    pub bytes_up: u64,
    pub records_sent: usize,
    pub records_per_class: Vec<u64>,
}

/// Uploads class counts, then as many activations as the downlink budget
/// allows, chosen by `policy`.
pub fn contact_phase(
    sat: &mut SatelliteState,
    gs: &mut GroundStationState,
    budget: &mut TransferBudget,
    policy: SelectionPolicy,
) -> Result<ContactReport> {
    sat.refresh_pseudo_labels()?;
    gs.counts[sat.id] = sat.counts.clone();
    let pool = sat.activation_pool()?;
    let selected = select_for_upload(&pool, budget.remaining_down(), policy, &mut sat.rng);
    let mut report = ContactReport {
        records_per_class: vec![0; sat.student.classes()],
        ..ContactReport::default()
    };
    for i in selected {
        let record = &pool[i];
        if !budget.try_down(record.size_bytes()) {
            break;
        }
        report.records_per_class[record.class_hint] += 1;
        report.records_sent += 1;
        gs.activation_store.push(record.clone());
    }
    report.bytes_down = budget.used_down + sat.counts.wire_bytes();
    Ok(report)
}

/// Contact-time training without an auxiliary head: each step ships a batch
/// of activations down, the ground station runs the server half, updates it
/// and returns the activation gradients. Steps stop when either direction's
/// budget runs out.
pub fn split_contact_phase(
    sat: &mut SatelliteState,
    gs: &mut GroundStationState,
    budget: &mut TransferBudget,
    steps: usize,
    train: &TrainSettings,
) -> Result<(ContactReport, LocalLosses)> {
    let classes = sat.student.classes();
    sat.student.head = gs.server.clone().with_role(CutRole::AuxiliaryHead);
    sat.teacher.head = sat.student.head.clone();
    sat.refresh_pseudo_labels()?;
    gs.counts[sat.id] = sat.counts.clone();

    let hyper = train.hyper;
    let row_bytes = record_bytes(sat.student.body.out_dim());
    let mut acc = LossAcc::default();
    let mut report = ContactReport {
        records_per_class: vec![0; classes],
        ..ContactReport::default()
    };
    for _ in 0..steps {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut targets: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let idx = sample_batch(&mut sat.rng, sat.labeled.len(), train.batch_size);
        for &i in &idx {
            rows.push(sat.labeled.x.row(i).to_vec());
            targets.push(sat.labeled.labels[i]);
            weights.push(1.0 / idx.len() as f64);
        }
        let n_labeled = rows.len();
        let mut low_x = None;
        if !sat.unlabeled.is_empty() {
            let (xb, pseudo, low) = sat.draw_unlabeled(train.batch_size)?;
            if hyper.lambda_u > 0.0 {
                for &(r, class) in &pseudo {
                    rows.push(xb.row(r).to_vec());
                    targets.push(class);
                    weights.push(hyper.lambda_u / pseudo.len() as f64);
                }
            }
            if low.len() >= 2 && hyper.lambda_v > 0.0 {
                low_x = Some(xb.select_rows(&low)?);
            }
        }
        let fit = (budget.remaining_down().min(budget.remaining_up()) / row_bytes) as usize;
        if fit == 0 {
            debug!(
                "satellite {}: link budget exhausted after {} split steps",
                sat.id, acc.steps
            );
            break;
        }
        if rows.len() > fit {
            // Labelled rows come first and are kept first.
            rows.truncate(fit);
            targets.truncate(fit);
            weights.truncate(fit);
            let n_labeled = n_labeled.min(fit);
            let n_pseudo = fit - n_labeled;
            for (r, w) in weights.iter_mut().enumerate() {
                *w = if r < n_labeled {
                    1.0 / n_labeled as f64
                } else {
                    hyper.lambda_u / n_pseudo as f64
                };
            }
        }
        let n_labeled = n_labeled.min(rows.len());
        if rows.is_empty() {
            break;
        }
        let bytes = rows.len() as u64 * row_bytes;
        budget.try_down(bytes);
        budget.try_up(bytes);
        report.records_sent += rows.len();
        for &y in &targets {
            report.records_per_class[y] += 1;
        }

        let x = weak_augment(&Tensor::from_rows(&rows)?, &train.aug, &mut sat.rng);
        let (z, body_cache) = sat.student.body.forward(&x)?;
        let (logits, server_cache) = gs.server.forward(&z)?;
        let mut grad = Tensor::zeros(logits.shape());
        let (mut loss_x, mut loss_u) = (0.0, 0.0);
        for r in 0..rows.len() {
            let target = crate::nn::one_hot(targets[r], classes);
            let (loss, g) = softmax_cross_entropy(logits.row(r), &target)?;
            if r < n_labeled {
                loss_x += loss / n_labeled as f64;
            } else {
                loss_u += loss / (rows.len() - n_labeled) as f64;
            }
            for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
                *dst = weights[r] * v;
            }
        }
        let (server_grads, dz) = gs.server.backward(&server_cache, &grad)?;
        let (mut body_grads, _) = sat.student.body.backward(&body_cache, &dz)?;
        gs.server.sgd_step(&server_grads, train.learning_rate)?;
        if n_labeled > 0 {
            acc.x.add(loss_x);
        }
        if rows.len() > n_labeled {
            acc.u.add(loss_u);
        }
        if let Some(xl) = low_x {
            let (loss, g) = sat.contrastive_step(&xl, &hyper, &train.aug)?;
            body_grads.add_scaled(&g, hyper.lambda_v)?;
            acc.v.add(loss);
        }
        sat.student
            .body
            .sgd_step(&body_grads, train.learning_rate)?;
        sat.student.head = gs.server.clone().with_role(CutRole::AuxiliaryHead);
        ema_update_stack(&mut sat.teacher, &sat.student, hyper.ema_decay)?;
        acc.steps += 1;
    }
    report.bytes_down = budget.used_down + sat.counts.wire_bytes();
    report.bytes_up = budget.used_up;
    Ok((report, acc.finish()))
}

/// Interpolates the round's activation store and trains the server model on
/// the result. Returns the mean training loss, or `None` when there was
/// nothing to train on.
pub fn server_phase(
    gs: &mut GroundStationState,
    interp_j: usize,
    beta: f64,
    steps: usize,
    train: &TrainSettings,
) -> Result<Option<f64>> {
    if gs.activation_store.is_empty() {
        warn!("ground station received no activations this round; server training skipped");
        return Ok(None);
    }
    let j = if gs.activation_store.len() < 2 && interp_j > 0 {
        warn!("a single activation cannot be interpolated; skipping interpolation");
        0
    } else {
        interp_j
    };
    let cfg = InterpConfig::new(j, beta, gs.client_dist.clone())?;
    let set = interpolate_round(&gs.activation_store, &cfg, &mut gs.rng)?;
    let mut mean = Mean::default();
    for _ in 0..steps {
        let idx = sample_batch(&mut gs.rng, set.len(), train.batch_size);
        let x = Tensor::from_rows(
            &idx.iter()
                .map(|&i| &set[i].features[..])
                .collect::<Vec<_>>(),
        )?;
        let t = Tensor::from_rows(&idx.iter().map(|&i| &set[i].label[..]).collect::<Vec<_>>())?;
        let (loss, grads, _) = server_loss(&gs.server, &x, &t)?;
        gs.server.sgd_step(&grads, train.learning_rate)?;
        mean.add(loss);
    }
    Ok(mean.get())
}

/// Per-satellite slice of a round report.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteReport {
    pub sat_id: usize,
    pub losses: LocalLosses,
    pub contact: ContactReport,
    pub contact_s: f64,
    pub pseudo_counts: Vec<u64>,
    /// Thresholds sent to this satellite at the end of the round.
    pub thresholds: Vec<f64>,
    pub data_size: usize,
    /// Whether the aggregated client sub-model reached the satellite.
    pub model_delivered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Simulated time at the end of the round.
    pub sim_time_s: f64,
    pub satellites: Vec<SatelliteReport>,
    pub server_loss: Option<f64>,
    pub test_acc: f64,
}

impl RoundReport {
    pub fn bytes_down(&self) -> u64 {
        self.satellites.iter().map(|s| s.contact.bytes_down).sum()
    }

    pub fn bytes_up(&self) -> u64 {
        self.satellites.iter().map(|s| s.contact.bytes_up).sum()
    }

    pub fn records_sent(&self) -> usize {
        self.satellites.iter().map(|s| s.contact.records_sent).sum()
    }

    /// Activations sent down as a share of all local training examples.
    pub fn relative_ratio(&self) -> f64 {
        let total: usize = self.satellites.iter().map(|s| s.data_size).sum();
        if total == 0 {
            0.0
        } else {
            self.records_sent() as f64 / total as f64
        }
    }
}

/// The whole constellation plus ground station, advanced one round at a time.
pub struct Simulation {
    cfg: ExperimentConfig,
    train: TrainSettings,
    satellites: Vec<SatelliteState>,
    gs: GroundStationState,
    windows: Vec<Vec<ContactWindow>>,
    period_s: f64,
    test: Dataset,
    round: usize,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig, parts: Vec<LocalData>, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if parts.len() != cfg.satellites {
            return Err(Error::invalid(format!(
                "{} data partitions for {} satellites",
                parts.len(),
                cfg.satellites
            )));
        }
        if test.is_empty() {
            return Err(Error::invalid("empty test set"));
        }
        let classes = cfg.classes();
        let mut init = rng_for(cfg.seed, 1);
        let global = SubModel::mlp(
            CutRole::Global,
            &cfg.layers,
            LayerKind::DenseLinear,
            &mut init,
        )?;
        let (client, server) = split_model(&global, cfg.cut_index)?;
        let head = SubModel::mlp(
            CutRole::AuxiliaryHead,
            &[client.out_dim(), cfg.aux_hidden, classes],
            LayerKind::DenseLinear,
            &mut init,
        )?;
        let stack = ClientStack::new(client.clone(), head)?;

        let thresholds = ThresholdTable::constant(cfg.satellites, classes, cfg.tau, cfg.tau_cap);
        let satellites = parts
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                SatelliteState::new(
                    i,
                    stack.clone(),
                    data,
                    thresholds.for_satellite(i).to_vec(),
                    rng_for(cfg.seed, 100 + i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let counts = satellites.iter().map(|s| s.counts.clone()).collect();
        let gs = GroundStationState::new(server, client, counts, thresholds, rng_for(cfg.seed, 2));

        let period_s = orbital_period(cfg.altitude_km)?;
        let fraction = match cfg.contact_fraction {
            Some(f) => f,
            None => contact_fraction(cfg.altitude_km, cfg.min_elevation_deg)?,
        };
        let rates = match &cfg.rate_trace {
            Some(path) => RateSource::Trace(load_rate_trace(path)?),
            None => RateSource::Fixed {
                downlink_bps: cfg.downlink_bps,
                uplink_bps: cfg.uplink_bps,
            },
        };
        let windows = if cfg.rounds == 0 {
            vec![Vec::new(); cfg.satellites]
        } else {
            // Passes are staggered across the round but never straddle a
            // round boundary.
            let slack = period_s * (1.0 - fraction);
            (0..cfg.satellites)
                .map(|i| {
                    let orbit = OrbitConfig {
                        altitude_km: cfg.altitude_km,
                        min_elevation_deg: cfg.min_elevation_deg,
                        phase_offset_s: slack * i as f64 / cfg.satellites as f64,
                    };
                    contact_windows_with_fraction(
                        &orbit,
                        fraction,
                        cfg.rounds as f64 * period_s,
                        &rates,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            train: TrainSettings::from_config(cfg),
            cfg: cfg.clone(),
            satellites,
            gs,
            windows,
            period_s,
            test,
            round: 0,
        })
    }

    pub fn period_s(&self) -> f64 {
        self.period_s
    }

    pub fn satellites(&self) -> &[SatelliteState] {
        &self.satellites
    }

    pub fn ground_station(&self) -> &GroundStationState {
        &self.gs
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn window_in_round(&self, sat: usize, round: usize) -> Option<ContactWindow> {
        let (lo, hi) = (
            round as f64 * self.period_s,
            (round + 1) as f64 * self.period_s,
        );
        self.windows[sat]
            .iter()
            .find(|w| w.start_s >= lo && w.start_s < hi)
            .copied()
    }

    /// Runs the next round and reports on it.
    pub fn step_round(&mut self) -> Result<RoundReport> {
        let r = self.round;
        self.run_round(r).map_err(|e| Error::Round {
            round: r,
            source: Box::new(e),
        })
    }

    fn run_round(&mut self, r: usize) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let mode = cfg.mode;
        let classes = cfg.classes();
        self.gs.activation_store.clear();

        let windows: Vec<Option<ContactWindow>> = (0..self.satellites.len())
            .map(|i| self.window_in_round(i, r))
            .collect();
        let mut reports = Vec::with_capacity(self.satellites.len());
        let mut budgets = Vec::with_capacity(self.satellites.len());
        for (sat, window) in self.satellites.iter_mut().zip(&windows) {
            sat.begin_round();
            let contact_s = window.map_or(0.0, |w| w.duration_s());
            let offline = if mode.trains_offline() {
                ((self.period_s - contact_s).max(0.0) / cfg.step_time_s).floor() as usize
            } else {
                0
            };
            let losses = non_contact_phase(sat, offline, &self.train)?;
            reports.push(SatelliteReport {
                sat_id: sat.id,
                losses,
                contact: ContactReport {
                    records_per_class: vec![0; classes],
                    ..ContactReport::default()
                },
                contact_s,
                pseudo_counts: vec![0; classes],
                thresholds: Vec::new(),
                data_size: sat.data_size(),
                model_delivered: false,
            });
            budgets.push(window.map(TransferBudget::new));
        }

        // Contacts happen in time order; ties go to the lower id.
        let mut order: Vec<usize> = (0..self.satellites.len())
            .filter(|&i| windows[i].is_some())
            .collect();
        order.sort_by(|&a, &b| {
            let (wa, wb) = (windows[a].unwrap(), windows[b].unwrap());
            wa.start_s.total_cmp(&wb.start_s).then(a.cmp(&b))
        });
        let policy = cfg.selection_policy();
        for &i in &order {
            let sat = &mut self.satellites[i];
            let budget = budgets[i].as_mut().expect("window exists");
            if mode.trains_offline() {
                reports[i].contact = contact_phase(sat, &mut self.gs, budget, policy)?;
            } else {
                let steps = (reports[i].contact_s / cfg.step_time_s).floor() as usize;
                let (contact, losses) =
                    split_contact_phase(sat, &mut self.gs, budget, steps, &self.train)?;
                reports[i].contact = contact;
                reports[i].losses = losses;
            }
            reports[i].pseudo_counts = sat.counts.pseudo.clone();
        }
        for &i in &order {
            if reports[i].contact.bytes_down > 0 {
                debug!(
                    "round {r}: satellite {i} sent {} records",
                    reports[i].contact.records_sent
                );
            }
        }

        self.gs
            .update_thresholds(mode.threshold_policy(), cfg.tau, cfg.tau_cap)?;
        let server_loss = if mode.trains_offline() {
            server_phase(
                &mut self.gs,
                cfg.effective_interp_j(),
                cfg.beta,
                cfg.server_steps,
                &self.train,
            )?
        } else {
            None
        };

        let aggregated = if (r + 1).is_multiple_of(cfg.agg_every) {
            let bodies: Vec<&SubModel> = self.satellites.iter().map(|s| &s.student.body).collect();
            let weights: Vec<f64> = self
                .satellites
                .iter()
                .map(|s| s.data_size() as f64)
                .collect();
            let agg = aggregate_clients(&bodies, &weights)?;
            self.gs.client_model = agg.clone();
            Some(agg)
        } else {
            None
        };

        let threshold_bytes = 8 * classes as u64;
        for &i in &order {
            let sat = &mut self.satellites[i];
            let budget = budgets[i].as_mut().expect("window exists");
            sat.thresholds = self.gs.thresholds.for_satellite(i).to_vec();
            reports[i].thresholds = sat.thresholds.clone();
            let mut up = threshold_bytes;
            if let Some(agg) = &aggregated {
                let model_bytes = 8 * agg.param_count() as u64;
                if budget.try_up(model_bytes) {
                    sat.student.body = agg.clone().with_role(CutRole::Client);
                    sat.teacher = sat.student.clone();
                    reports[i].model_delivered = true;
                    up += model_bytes;
                } else {
                    warn!(
                        "round {r}: aggregated model ({model_bytes} B) does not fit satellite {i}'s uplink budget"
                    );
                }
            }
            reports[i].contact.bytes_up += up;
        }
        for (i, rep) in reports.iter_mut().enumerate() {
            if rep.thresholds.is_empty() {
                rep.thresholds = self.satellites[i].thresholds.clone();
            }
        }

        let test_acc = evaluate(&self.gs.client_model, &self.gs.server, &self.test)?;
        self.round += 1;
        Ok(RoundReport {
            round: r,
            sim_time_s: self.round as f64 * self.period_s,
            satellites: reports,
            server_loss,
            test_acc,
        })
    }
}

/// Runs every configured round.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    parts: Vec<LocalData>,
    test: Dataset,
) -> Result<Vec<RoundReport>> {
    let mut sim = Simulation::new(cfg, parts, test)?;
    (0..cfg.rounds).map(|_| sim.step_round()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use crate::data::{gaussian_mixture, partition_dataset, MixtureSpec};
    use crate::nn::LayerParams;

    fn net(seed: u64, dims: &[usize]) -> SubModel {
        SubModel::mlp(
            CutRole::Global,
            dims,
            LayerKind::DenseLinear,
            &mut rng_for(seed, 0),
        )
        .unwrap()
    }

    #[test]
    fn split_examples() {
        let g = net(1, &[5, 7, 6, 4, 3]);
        let (c, s) = split_model(&g, 1).unwrap();
        assert_eq!((c.layers().len(), s.layers().len()), (1, 3));
        let x = Tensor::matrix(2, 5, (0..10).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        assert_eq!(
            g.predict(&x).unwrap(),
            s.predict(&c.predict(&x).unwrap()).unwrap()
        );
        assert!(split_model(&g, 0).is_err());
        assert!(split_model(&g, 4).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let a = net(1, &[3, 4, 2]);
        let b = net(2, &[3, 4, 2]);
        assert_eq!(aggregate_clients(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(
            aggregate_clients(&[&a, &a, &a], &[0.2, 0.5, 0.3]).unwrap(),
            a
        );
        assert!(aggregate_clients(&[&a, &b], &[0.0, 0.0]).is_err());
        assert!(aggregate_clients(&[&a, &net(3, &[3, 5, 2])], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn aggregation_weighted_mean_by_hand() {
        let scalar = |w: f64, b: f64| {
            SubModel::new(
                CutRole::Client,
                vec![LayerParams::new(
                    Tensor::matrix(1, 1, vec![w]).unwrap(),
                    Tensor::vector(vec![b]).unwrap(),
                    LayerKind::DenseLinear,
                )
                .unwrap()],
            )
            .unwrap()
        };
        let models = [scalar(1.0, 0.0), scalar(4.0, 10.0), scalar(-2.0, 5.0)];
        // Dataset sizes 100, 200, 700.
        let agg =
            aggregate_clients(&models.iter().collect::<Vec<_>>(), &[100.0, 200.0, 700.0]).unwrap();
        assert!(
            (agg.layers()[0].weights.data()[0] - (0.1 * 1.0 + 0.2 * 4.0 - 0.7 * 2.0)).abs() < 1e-15
        );
        assert!((agg.layers()[0].bias.data()[0] - (0.2 * 10.0 + 0.7 * 5.0)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_examples() {
        // Identity client, server that copies class scores from the inputs.
        let id = |n: usize| {
            let mut w = vec![0.0; n * n];
            (0..n).for_each(|i| w[i * n + i] = 1.0);
            SubModel::new(
                CutRole::Client,
                vec![LayerParams::new(
                    Tensor::matrix(n, n, w).unwrap(),
                    Tensor::zeros(&[n]),
                    LayerKind::DenseLinear,
                )
                .unwrap()],
            )
            .unwrap()
        };
        let mut test = Dataset::empty(3, 3);
        for m in 0..3 {
            let mut row = vec![0.0; 3];
            row[m] = 1.0;
            test.push(&row, m);
        }
        assert_eq!(evaluate(&id(3), &id(3), &test).unwrap(), 1.0);
        let mut constant = id(3);
        constant.layers_mut()[0].weights.scale(0.0);
        assert!((evaluate(&id(3), &constant, &test).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&id(3), &id(3), &Dataset::empty(3, 3)).is_err());
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            satellites: 2,
            layers: vec![4, 8, 6, 3],
            aux_hidden: 5,
            rounds: 2,
            step_time_s: 500.0,
            batch_size: 16,
            server_steps: 5,
            interp_j: 10,
            downlink_bps: 2000.0,
            train_samples: 120,
            test_samples: 30,
            ..ExperimentConfig::default()
        }
    }

    fn scenario(cfg: &ExperimentConfig) -> (Vec<LocalData>, Dataset) {
        let spec = MixtureSpec {
            classes: cfg.classes(),
            dim: cfg.input_dim(),
            separation: 4.0,
            clusters_per_class: 1,
            imbalance: 1.0,
        };
        let (train, test) = gaussian_mixture(
            &spec,
            cfg.train_samples,
            cfg.test_samples,
            &mut rng_for(9, 0),
        )
        .unwrap();
        let parts = partition_dataset(&train, cfg.satellites, 1.0, &[1.0], 0.3, &mut rng_for(9, 1))
            .unwrap();
        (parts, test)
    }

    #[test]
    fn zero_rounds_yield_no_reports() {
        let cfg = ExperimentConfig {
            rounds: 0,
            ..tiny_config()
        };
        let (parts, test) = scenario(&cfg);
        assert!(run_experiment(&cfg, parts, test).unwrap().is_empty());
    }

    #[test]
    fn zero_local_steps_leave_state_unchanged() {
        let cfg = tiny_config();
        let (parts, test) = scenario(&cfg);
        let sim = Simulation::new(&cfg, parts, test).unwrap();
        let mut sat = sim.satellites()[0].clone();
        let before = (sat.student.clone(), sat.teacher.clone());
        let losses = non_contact_phase(&mut sat, 0, &TrainSettings::from_config(&cfg)).unwrap();
        assert_eq!(losses, LocalLosses::default());
        assert_eq!((sat.student, sat.teacher), before);
    }

    #[test]
    fn rounds_respect_budgets_and_are_reproducible() {
        let cfg = tiny_config();
        let run = || {
            let (parts, test) = scenario(&cfg);
            run_experiment(&cfg, parts, test).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 2);
        for report in &a {
            for s in &report.satellites {
                let w = s.contact_s;
                let budget = (cfg.downlink_bps * w / 8.0).floor() as u64;
                let counts_bytes = 4 * cfg.classes() as u64;
                assert!(s.contact.bytes_down <= budget + counts_bytes);
                assert_eq!(
                    s.contact.bytes_down,
                    s.contact.records_sent as u64 * record_bytes(8) + counts_bytes
                );
                assert_eq!(
                    s.contact.records_per_class.iter().sum::<u64>() as usize,
                    s.contact.records_sent
                );
            }
            assert!((0.0..=1.0).contains(&report.test_acc));
        }
        assert_eq!(a, run());
    }

    #[test]
    fn fixed_threshold_mode_keeps_tau() {
        let cfg = ExperimentConfig {
            mode: Mode::FixedThreshold,
            ..tiny_config()
        };
        let (parts, test) = scenario(&cfg);
        for report in run_experiment(&cfg, parts, test).unwrap() {
            for s in report.satellites {
                assert!(s.thresholds.iter().all(|&t| t == cfg.tau));
            }
        }
    }

    #[test]
    fn split_contact_mode_runs() {
        let cfg = ExperimentConfig {
            mode: Mode::NoAm,
            contact_fraction: Some(0.5),
            downlink_bps: 1e6,
            ..tiny_config()
        };
        let (parts, test) = scenario(&cfg);
        let reports = run_experiment(&cfg, parts, test).unwrap();
        assert!(reports.iter().all(|r| r.server_loss.is_none()));
        assert!(reports[0].satellites.iter().all(|s| s.losses.steps > 0));
    }
}
