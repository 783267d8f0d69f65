//! The three training stages.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::{make_aligned_batches, EpochRecord, EpochSink, Stage, StageReport, TrainingConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{AdaptationModel, Autoencoder, Head, HeadKind, HeadTargets, TargetScaling};
use crate::optim::Adam;
use crate::pipeline::CwsGradient;
use crate::seed;
use crate::tensor::Matrix;

const ENCODE_CHUNK: usize = 256;

/// Rows `indices` of a dataset, concatenated.
pub(crate) fn gather(d: &Dataset, indices: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(indices.len() * d.shape.len());
    for &i in indices {
        out.extend_from_slice(d.sample(i));
    }
    out
}

/// Bottleneck features of a whole dataset.
pub(crate) fn encode_all(ae: &Autoencoder, d: &Dataset) -> Result<Matrix<f32>> {
    if d.shape != ae.spec().input_shape {
        return Err(Error::ShapeMismatch(format!(
            "dataset shape {} does not match encoder input {}",
            d.shape,
            ae.spec().input_shape
        )));
    }
    let b = ae.bottleneck_size();
    let mut data = Vec::with_capacity(d.len() * b);
    for chunk in d.samples.chunks(ENCODE_CHUNK * d.shape.len()) {
        data.extend(ae.encode(chunk)?.into_vec());
    }
    Matrix::from_vec(d.len(), b, data)
}

/// Early stopping on relative improvement of the best loss.
struct Monitor {
    best: f64,
    stale: usize,
    min_rel: f64,
    patience: usize,
}

impl Monitor {
    fn new(cfg: &TrainingConfig) -> Self {
        Monitor {
            best: f64::INFINITY,
            stale: 0,
            min_rel: cfg.convergence.min_relative_improvement,
            patience: cfg.convergence.patience,
        }
    }

    /// Returns true once the loss has stalled for `patience` epochs.
    fn update(&mut self, loss: f64) -> bool {
        if !self.best.is_finite() || self.best - loss > self.min_rel * self.best.abs() {
            self.best = self.best.min(loss);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

struct StageRun {
    stage: Stage,
    start: Instant,
    history: Vec<f64>,
    converged: bool,
}

impl StageRun {
    fn new(stage: Stage) -> Self {
        StageRun {
            stage,
            start: Instant::now(),
            history: Vec::new(),
            converged: false,
        }
    }

    fn epoch(
        &mut self,
        sink: &mut dyn EpochSink,
        epoch_start: Instant,
        loss: f64,
        parts: BTreeMap<String, f64>,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: self.stage.name(),
                epoch: self.history.len(),
            });
        }
        self.history.push(loss);
        log::debug!("{} epoch {}: loss {loss:.6}", self.stage.name(), self.history.len() - 1);
        sink.record(&EpochRecord {
            stage: self.stage.number(),
            epoch: self.history.len() - 1,
            loss,
            parts,
            seconds: epoch_start.elapsed().as_secs_f64(),
        })
    }

    fn finish(self) -> StageReport {
        log::info!(
            "{}: {} epochs, converged={}, final loss {:?}",
            self.stage.name(),
            self.history.len(),
            self.converged,
            self.history.last()
        );
        StageReport {
            stage: self.stage,
            epochs_run: self.history.len(),
            final_loss: self.history.last().copied(),
            loss_history: self.history,
            converged: self.converged,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn check_model_input(ae: &Autoencoder, d: &Dataset, what: &str) -> Result<()> {
    if d.shape != ae.spec().input_shape {
        return Err(Error::ShapeMismatch(format!(
            "{what} shape {} does not match the auto-encoder input {}",
            d.shape,
            ae.spec().input_shape
        )));
    }
    Ok(())
}

/// Gradient of the summed binary cross-entropy (averaged over samples) with
/// respect to the sigmoid logits.
fn logit_grad(x: &[f32], p: &[f32], n: usize) -> Vec<f32> {
    let inv = 1.0 / n as f32;
    p.iter().zip(x).map(|(&p, &x)| (p - x) * inv).collect()
}

/// Trains both auto-encoders together on class-aligned batch pairs. Inputs
/// must already be class-balanced and sorted.
pub fn train_stage1_autoencoders(
    model: &mut AdaptationModel,
    source: &Dataset,
    target_labeled: &Dataset,
    cfg: &TrainingConfig,
    sink: &mut dyn EpochSink,
) -> Result<StageReport> {
    cfg.validate()?;
    check_model_input(&model.source_ae, source, "source")?;
    check_model_input(&model.target_ae, target_labeled, "labeled target")?;
    let num_classes = source.num_classes_present().max(target_labeled.num_classes_present());
    if num_classes == 0 {
        return Err(Error::EmptyInput("labeled training data"));
    }
    let eps = cfg.loss.epsilon;
    let lr = cfg.learning_rate;
    let mut opt = [
        Adam::new(model.source_ae.encoder_params.len(), lr, cfg.adam),
        Adam::new(model.source_ae.decoder_params.len(), lr, cfg.adam),
        Adam::new(model.target_ae.encoder_params.len(), lr, cfg.adam),
        Adam::new(model.target_ae.decoder_params.len(), lr, cfg.adam),
    ];
    let mut grads = [
        vec![0.0f32; opt[0].len()],
        vec![0.0f32; opt[1].len()],
        vec![0.0f32; opt[2].len()],
        vec![0.0f32; opt[3].len()],
    ];
    let mut run = StageRun::new(Stage::Autoencoders);
    let mut monitor = Monitor::new(cfg);
    model.stages = Default::default();

    for epoch in 0..cfg.epochs_for(Stage::Autoencoders) {
        let epoch_start = Instant::now();
        let batches = make_aligned_batches(
            source,
            target_labeled,
            cfg.batch_size,
            seed::derive(cfg.seed, &[seed::stream::BATCHES, epoch as u64]),
        )?;
        let mut sums = [0.0f64; 4];
        for pair in &batches {
            let n = pair.labels.len();
            let xs = gather(source, &pair.source);
            let xt = gather(target_labeled, &pair.target);
            let ts = model.source_ae.forward_traced(&xs, n);
            let tt = model.target_ae.forward_traced(&xt, n);
            let b = model.source_ae.bottleneck_size();
            let zs = Matrix::from_vec(n, b, ts.encoder.last().to_vec())?;
            let zt = Matrix::from_vec(n, b, tt.encoder.last().to_vec())?;
            let (ps, pt) = (ts.decoder.last(), tt.decoder.last());

            let ds = source.shape.len();
            let dt = target_labeled.shape.len();
            let rec_s = losses::reconstruction_bce(
                &Matrix::from_vec(n, ds, xs.clone())?,
                &Matrix::from_vec(n, ds, ps.to_vec())?,
                eps,
            )?;
            let rec_t = losses::reconstruction_bce(
                &Matrix::from_vec(n, dt, xt.clone())?,
                &Matrix::from_vec(n, dt, pt.to_vec())?,
                eps,
            )?;
            let cws = losses::cws_mmd_loss(&zs, &pair.labels, &zt, &pair.labels, num_classes)?;
            let target_loss = f64::from(rec_t) + cfg.loss.beta * f64::from(cws);
            sums[0] += f64::from(rec_s);
            sums[1] += f64::from(rec_t);
            sums[2] += f64::from(cws);
            sums[3] += target_loss;

            let (mut gs, mut gt) = (None, None);
            if cfg.loss.beta > 0.0 {
                let (a, c) =
                    losses::cws_mmd_loss_grad(&zs, &pair.labels, &zt, &pair.labels, num_classes)?;
                let beta = cfg.loss.beta as f32;
                let scale = |m: Matrix<f32>| -> Vec<f32> { m.into_vec().into_iter().map(|v| v * beta).collect() };
                if cfg.cws_gradient == CwsGradient::Both {
                    gs = Some(scale(a));
                }
                gt = Some(scale(c));
            }

            grads.iter_mut().for_each(|g| g.fill(0.0));
            let [g_se, g_sd, g_te, g_td] = &mut grads;
            model
                .source_ae
                .backward(&xs, &ts, logit_grad(&xs, ps, n), gs.as_deref(), g_se, g_sd);
            model
                .target_ae
                .backward(&xt, &tt, logit_grad(&xt, pt, n), gt.as_deref(), g_te, g_td);
            opt[0].step(&mut model.source_ae.encoder_params, &grads[0]);
            opt[1].step(&mut model.source_ae.decoder_params, &grads[1]);
            opt[2].step(&mut model.target_ae.encoder_params, &grads[2]);
            opt[3].step(&mut model.target_ae.decoder_params, &grads[3]);
        }
        let nb = batches.len().max(1) as f64;
        let [rs, rt, cw, tl] = sums.map(|s| s / nb);
        let total = rs + tl;
        let parts = BTreeMap::from([
            ("source_reconstruction".to_string(), rs),
            ("target_reconstruction".to_string(), rt),
            ("cws_mmd".to_string(), cw),
            ("target_loss".to_string(), tl),
        ]);
        run.epoch(sink, epoch_start, total, parts)?;
        if monitor.update(total) {
            run.converged = true;
            break;
        }
    }
    model.stages.autoencoders = true;
    model.num_classes = num_classes;
    Ok(run.finish())
}

/// Splits row indices into (train, holdout), stratified by label when the
/// data is labeled. Each class keeps at least one training row.
fn holdout_split(d: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng(seed, &[seed::stream::HOLDOUT]);
    let groups: Vec<Vec<usize>> = match &d.labels {
        Some(labels) => {
            let c = d.num_classes_present();
            let mut g = vec![Vec::new(); c];
            for (i, &y) in labels.iter().enumerate() {
                g[y].push(i);
            }
            g
        }
        None => vec![(0..d.len()).collect()],
    };
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = ((g.len() as f64 * fraction).floor() as usize).min(g.len().saturating_sub(1));
        hold.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

enum Supervision {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Supervision {
    fn of(d: &Dataset, kind: HeadKind) -> Result<Self> {
        match kind {
            HeadKind::SoftmaxClassifier => Ok(Supervision::Classes(d.labels()?.to_vec())),
            HeadKind::LinearRegressor => d
                .targets
                .clone()
                .map(Supervision::Values)
                .ok_or_else(|| Error::InvalidConfig("regression needs targets".into())),
        }
    }

    fn select(&self, rows: &[usize]) -> Supervision {
        match self {
            Supervision::Classes(v) => Supervision::Classes(rows.iter().map(|&i| v[i]).collect()),
            Supervision::Values(v) => Supervision::Values(rows.iter().map(|&i| v[i]).collect()),
        }
    }

    fn as_targets(&self) -> HeadTargets<'_> {
        match self {
            Supervision::Classes(v) => HeadTargets::Classes(v),
            Supervision::Values(v) => HeadTargets::Values(v),
        }
    }
}

fn select_rows(m: &Matrix<f32>, rows: &[usize]) -> Matrix<f32> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &i in rows {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("row selection keeps the width")
}

/// Mini-batch Adam on the head over fixed features. Convergence is judged
/// on the held-out rows when there are any, otherwise on the training loss.
pub(crate) fn fit_head(
    head: &mut Head,
    features: &Matrix<f32>,
    dataset: &Dataset,
    stage: Stage,
    cfg: &TrainingConfig,
    sink: &mut dyn EpochSink,
) -> Result<StageReport> {
    let sup = Supervision::of(dataset, head.kind())?;
    let (train, hold) = holdout_split(dataset, cfg.holdout_fraction, seed::derive(cfg.seed, &[stage.number() as u64]));
    let hold_x = select_rows(features, &hold);
    let hold_y = sup.select(&hold);
    let eps = cfg.loss.epsilon;

    let mut opt = Adam::new(head.num_params(), cfg.learning_rate, cfg.adam);
    let mut grad = vec![0.0f32; head.num_params()];
    let mut run = StageRun::new(stage);
    let mut monitor = Monitor::new(cfg);
    let mut order = train.clone();
    for epoch in 0..cfg.epochs_for(stage) {
        let epoch_start = Instant::now();
        order.shuffle(&mut seed::rng(
            cfg.seed,
            &[seed::stream::HEAD_BATCHES, stage.number() as u64, epoch as u64],
        ));
        let (mut train_sum, mut seen) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            let x = select_rows(features, rows);
            let y = sup.select(rows);
            grad.fill(0.0);
            let loss = head.loss_and_grad(&x, y.as_targets(), eps, Some(&mut grad))?;
            opt.step(&mut head.params, &grad);
            train_sum += loss * rows.len() as f64;
            seen += rows.len();
        }
        let train_loss = train_sum / seen.max(1) as f64;
        let mut parts = BTreeMap::from([("train_loss".to_string(), train_loss)]);
        let loss = if hold.is_empty() {
            train_loss
        } else {
            let h = head.loss_and_grad(&hold_x, hold_y.as_targets(), eps, None)?;
            parts.insert("holdout_loss".to_string(), h);
            h
        };
        run.epoch(sink, epoch_start, loss, parts)?;
        if monitor.update(loss) {
            run.converged = true;
            break;
        }
    }
    Ok(run.finish())
}

fn require_task_data(model: &AdaptationModel, d: &Dataset) -> Result<()> {
    match model.head.kind() {
        HeadKind::SoftmaxClassifier => {
            let labels = d.labels()?;
            let c = model.head.spec().output_size;
            if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_classes: c,
                });
            }
        }
        HeadKind::LinearRegressor => {
            if d.targets.is_none() {
                return Err(Error::InvalidConfig("regression needs targets".into()));
            }
        }
    }
    if d.is_empty() {
        return Err(Error::EmptyInput("head training data"));
    }
    Ok(())
}

/// Re-initializes the head and trains it on frozen source-encoder features.
pub fn train_stage2_classifier(
    model: &mut AdaptationModel,
    source: &Dataset,
    cfg: &TrainingConfig,
    sink: &mut dyn EpochSink,
) -> Result<StageReport> {
    cfg.validate()?;
    if !model.stages.autoencoders {
        return Err(Error::StageOrder("classifier training needs trained auto-encoders".into()));
    }
    require_task_data(model, source)?;
    let features = encode_all(&model.source_ae, source)?;
    model.reset_head(seed::derive(cfg.seed, &[seed::stream::INIT_HEAD, Stage::Classifier.number() as u64]))?;
    if model.head.kind() == HeadKind::LinearRegressor {
        model.head.scaling = source.targets.as_deref().map(TargetScaling::fit);
    }
    let report = fit_head(&mut model.head, &features, source, Stage::Classifier, cfg, sink)?;
    model.stages.classifier = true;
    model.stages.finetune = false;
    model.stages.finetune_skipped = false;
    Ok(report)
}

/// Fine-tunes the head on frozen target-encoder features of the labeled
/// target set.
pub fn train_stage3_finetune(
    model: &mut AdaptationModel,
    target_labeled: &Dataset,
    cfg: &TrainingConfig,
    sink: &mut dyn EpochSink,
) -> Result<StageReport> {
    cfg.validate()?;
    if !(model.stages.autoencoders && model.stages.classifier) {
        return Err(Error::StageOrder("fine-tuning needs stages 1 and 2 complete".into()));
    }
    require_task_data(model, target_labeled)?;
    if model.head.kind() == HeadKind::SoftmaxClassifier {
        let c = model.head.spec().output_size;
        let counts = target_labeled.class_counts(c)?;
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass {
                class,
                side: "labeled target",
            });
        }
    }
    let features = encode_all(&model.target_ae, target_labeled)?;
    let report = fit_head(&mut model.head, &features, target_labeled, Stage::Finetune, cfg, sink)?;
    model.stages.finetune = true;
    model.stages.finetune_skipped = false;
    Ok(report)
}

/// Plain reconstruction training of a single auto-encoder on shuffled
/// batches. Records epochs under `stage`.
pub(crate) fn train_autoencoder(
    ae: &mut Autoencoder,
    data: &Dataset,
    stage: Stage,
    cfg: &TrainingConfig,
    sink: &mut dyn EpochSink,
) -> Result<StageReport> {
    check_model_input(ae, data, "training")?;
    if data.is_empty() {
        return Err(Error::EmptyInput("auto-encoder training data"));
    }
    let mut opt_e = Adam::new(ae.encoder_params.len(), cfg.learning_rate, cfg.adam);
    let mut opt_d = Adam::new(ae.decoder_params.len(), cfg.learning_rate, cfg.adam);
    let mut g_e = vec![0.0f32; opt_e.len()];
    let mut g_d = vec![0.0f32; opt_d.len()];
    let d = data.shape.len();
    let mut run = StageRun::new(stage);
    let mut monitor = Monitor::new(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs_for(Stage::Autoencoders) {
        let epoch_start = Instant::now();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::stream::BATCHES, epoch as u64]));
        let (mut sum, mut batches) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            let n = rows.len();
            let x = gather(data, rows);
            let trace = ae.forward_traced(&x, n);
            let p = trace.decoder.last();
            let rec = losses::reconstruction_bce(
                &Matrix::from_vec(n, d, x.clone())?,
                &Matrix::from_vec(n, d, p.to_vec())?,
                cfg.loss.epsilon,
            )?;
            sum += f64::from(rec);
            batches += 1;
            g_e.fill(0.0);
            g_d.fill(0.0);
            ae.backward(&x, &trace, logit_grad(&x, p, n), None, &mut g_e, &mut g_d);
            opt_e.step(&mut ae.encoder_params, &g_e);
            opt_d.step(&mut ae.decoder_params, &g_d);
        }
        let loss = sum / batches as f64;
        let parts = BTreeMap::from([("reconstruction".to_string(), loss)]);
        run.epoch(sink, epoch_start, loss, parts)?;
        if monitor.update(loss) {
            run.converged = true;
            break;
        }
    }
    Ok(run.finish())
}
