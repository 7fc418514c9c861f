//! Training loop, evaluation and leave-one-subject-out runs.
//!
//! Every random choice is keyed by the fold seed: the shuffle of epoch `e`
//! uses `derive_seed(seed, [EPOCH, e])` and the augmentation of the sample
//! at position `i` of that epoch uses `derive_seed(seed, [AUGMENT, e, i])`.
//! Gradients are averaged over each mini-batch; the last batch may be short.

use std::fmt;
use std::ops::ControlFlow;

use crate::ca::AttentionHook;
use crate::config::RunConfig;
use crate::data::augment::{augment, eval_view};
use crate::data::dataset::{loso_folds, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::ConfusionMatrix;
use crate::model::{loss, MmNet, Prediction};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::{derive_seed, derive_seed_str, Rng};

const EPOCH: u64 = 1;
const AUGMENT: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:e} loss={:e}", self.epoch, self.lr, self.mean_loss)
    }
}

/// Freshly initialized model for a fold seed.
pub fn init_model(config: &RunConfig, seed: u64) -> Result<MmNet> {
    MmNet::new(config.model, &mut Rng::new(derive_seed_str(seed, "init")))
}

fn check_classes(ds: &Dataset, config: &RunConfig) -> Result<()> {
    if ds.num_classes() != config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model is configured for {}",
            ds.num_classes(),
            config.model.num_classes
        )));
    }
    Ok(())
}

/// Loss and parameter gradients of one augmented sample, added into `acc`.
fn accumulate(model: &MmNet, onset: &crate::Tensor, apex: &crate::Tensor, label: usize, acc: &mut [Vec<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let pass = model.forward(&mut g, &p, onset, apex, AttentionHook::None)?;
    let l = loss(&mut g, pass.logits, label)?;
    let value = g.value(l).item();
    g.backward(l)?;
    for (slot, v) in acc.iter_mut().zip(p.vars()) {
        if let Some(grad) = g.take_grad(*v) {
            slot.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
        }
    }
    Ok(value)
}

/// Train a fresh model on `train`. `on_epoch` sees each record as it is produced.
pub fn train_fold(
    train: &Dataset,
    config: &RunConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MmNet, Vec<EpochRecord>)> {
    train_fold_until(train, config, seed, |r| {
        on_epoch(r);
        ControlFlow::Continue(())
    })
}

/// Like [`train_fold`], but stops after any epoch for which `on_epoch` breaks.
pub fn train_fold_until(
    train: &Dataset,
    config: &RunConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<(MmNet, Vec<EpochRecord>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Protocol("training set is empty".into()));
    }
    check_classes(train, config)?;
    let mut model = init_model(config, seed)?;
    let mut opt = AdamW::new(model.params(), config.train.weight_decay);
    let schedule = LrSchedule { lr0: config.train.lr0, gamma: config.train.decay() };
    let mut log = Vec::with_capacity(config.train.epochs);
    for epoch in 0..config.train.epochs {
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::new(derive_seed(seed, &[EPOCH, epoch as u64])).shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.train.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            for (j, &idx) in batch.iter().enumerate() {
                let pos = (b * config.train.batch_size + j) as u64;
                let mut rng = Rng::new(derive_seed(seed, &[AUGMENT, epoch as u64, pos]));
                let pair = &train.samples[idx];
                let (onset, apex) = augment(pair, &mut rng, true)?;
                total += accumulate(&model, &onset, &apex, pair.label, &mut acc)?;
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            opt.step(model.params_mut(), &acc, lr)?;
        }
        let rec = EpochRecord { epoch, lr, mean_loss: total / train.len() as f64 };
        log.push(rec);
        if on_epoch(&rec).is_break() {
            break;
        }
    }
    Ok((model, log))
}

/// Eval-mode predictions for every sample of `test`, in order.
pub fn predict_all(model: &MmNet, test: &Dataset) -> Result<Vec<Prediction>> {
    test.samples
        .iter()
        .map(|pair| {
            let (onset, apex) = eval_view(pair)?;
            Ok(model.predict(&onset, &apex)?.0)
        })
        .collect()
}

/// Confusion matrix of `model` on `test`.
pub fn evaluate(model: &MmNet, test: &Dataset, config: &RunConfig) -> Result<ConfusionMatrix> {
    check_classes(test, config)?;
    let mut cm = ConfusionMatrix::new(test.num_classes());
    for (pair, pred) in test.samples.iter().zip(predict_all(model, test)?) {
        cm.add(pair.label, pred.predicted_class)?;
    }
    Ok(cm)
}

/// Everything one LOSO fold produced.
pub struct FoldResult {
    pub subject: String,
    pub seed: u64,
    pub model: MmNet,
    pub log: Vec<EpochRecord>,
    pub confusion: ConfusionMatrix,
}

/// Fold seed: the master seed mixed with the held-out subject id.
pub fn fold_seed(master: u64, subject: &str) -> u64 {
    derive_seed_str(master, subject)
}

/// Train and test every LOSO fold in order, handing each result to `on_fold`.
/// Returns the pooled confusion matrix.
pub fn run_loso(
    ds: &Dataset,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&str, &EpochRecord),
    mut on_fold: impl FnMut(FoldResult) -> Result<()>,
) -> Result<ConfusionMatrix> {
    check_classes(ds, config)?;
    let mut pooled = ConfusionMatrix::new(ds.num_classes());
    for fold in loso_folds(ds)? {
        let seed = fold_seed(config.seed, &fold.subject);
        let (model, log) = train_fold(&fold.train, config, seed, |r| on_epoch(&fold.subject, r))?;
        let confusion = evaluate(&model, &fold.test, config)?;
        pooled.merge(&confusion)?;
        on_fold(FoldResult { subject: fold.subject, seed, model, log, confusion })?;
    }
    Ok(pooled)
}
