//! Client-side training, per-class knowledge extraction and local distillation.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::LocalModelParams;
use crate::numerics::{self, ProbVec, Temperature, LOG_EPS};
use crate::partition::Dataset;
use crate::seed;

/// Mini-batch SGD settings shared by local training and distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSchedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// The distillation term of the local objective.
#[derive(Debug, Clone, Copy)]
pub struct DistillTarget<'a> {
    /// One soft label per class, indexed by ground-truth class.
    pub knowledge: &'a [ProbVec],
    pub tau1: Temperature,
    pub lambda_kd: f64,
}

/// Result of a training call.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: LocalModelParams,
    /// Mean per-sample objective over the final epoch.
    pub final_loss: f64,
    /// Largest `|sum - 1|` over every student softmax computed during training.
    pub simplex_error: f64,
}

/// Per-class average soft labels produced by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKnowledge {
    /// `None` for classes the client holds no samples of; never transmitted.
    pub per_class: Vec<Option<ProbVec>>,
    pub counts: Vec<usize>,
    /// Communication round this record belongs to.
    pub round: usize,
}

impl ClassKnowledge {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    /// Numbers sent upstream: a soft label plus its count for each present class.
    pub fn transmitted_numbers(&self) -> usize {
        let c = self.classes();
        self.per_class.iter().flatten().count() * (c + 1)
    }

    pub fn max_simplex_error(&self) -> f64 {
        self.per_class.iter().flatten().map(ProbVec::deviation).fold(0.0, f64::max)
    }
}

/// Gradient of the per-sample objective w.r.t. the logits, summed into `dlogits`,
/// returning the summed loss and the worst simplex deviation seen.
fn objective_rows(
    logits: &Array2<f64>,
    labels: &[usize],
    kd: Option<&DistillTarget<'_>>,
    scale: f64,
    dlogits: &mut Array2<f64>,
) -> (f64, f64) {
    let mut loss = 0.0;
    let mut worst: f64 = 0.0;
    let classes = logits.ncols();
    let mut p = vec![0.0; classes];
    let mut q = vec![0.0; classes];
    for (r, (z, y)) in logits.outer_iter().zip(labels).enumerate() {
        p.iter_mut().zip(z.iter()).for_each(|(d, s)| *d = *s);
        numerics::softmax_in_place(&mut p, 1.0);
        worst = worst.max(numerics::simplex_deviation(&p));
        loss -= p[*y].max(LOG_EPS).ln();
        let mut row = dlogits.row_mut(r);
        for j in 0..classes {
            row[j] = scale * (p[j] - if j == *y { 1.0 } else { 0.0 });
        }
        if let Some(kd) = kd.filter(|kd| kd.lambda_kd != 0.0) {
            let tau = kd.tau1.get();
            let g = kd.knowledge[*y].as_slice();
            q.iter_mut().zip(z.iter()).for_each(|(d, s)| *d = *s);
            numerics::softmax_in_place(&mut q, tau);
            worst = worst.max(numerics::simplex_deviation(&q));
            loss += kd.lambda_kd * numerics::kl_raw(g, &q);
            for j in 0..classes {
                row[j] += scale * kd.lambda_kd * (q[j] - g[j]) / tau;
            }
        }
    }
    (loss, worst)
}

/// Mean objective over `data` and its gradient: cross-entropy against the labels
/// plus, when `kd` is given, `lambda_kd * KL(g_y || softmax(f / tau1))`.
pub fn objective_and_grad(
    model: &LocalModelParams,
    data: &Dataset,
    kd: Option<&DistillTarget<'_>>,
) -> (f64, LocalModelParams) {
    let (inputs, logits) = model.forward_cached(data.features().view());
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let n = data.len() as f64;
    let (loss, _) = objective_rows(&logits, data.labels(), kd, 1.0 / n, &mut dlogits);
    (loss / n, model.backward(&inputs, dlogits))
}

/// Mean objective over `data`; see [`objective_and_grad`].
pub fn objective(model: &LocalModelParams, data: &Dataset, kd: Option<&DistillTarget<'_>>) -> f64 {
    objective_and_grad(model, data, kd).0
}

fn check_kd(shard: &Dataset, kd: &DistillTarget<'_>) -> Result<()> {
    if kd.knowledge.len() != shard.classes() {
        return Err(Error::InvalidInput(format!(
            "global knowledge covers {} classes, shard has {}",
            kd.knowledge.len(),
            shard.classes()
        )));
    }
    for (c, (g, count)) in kd.knowledge.iter().zip(shard.counts()).enumerate() {
        if *count > 0 && g.len() != shard.classes() {
            return Err(Error::InvalidInput(format!(
                "global knowledge for class {c} has {} entries, expected {}",
                g.len(),
                shard.classes()
            )));
        }
    }
    if !(kd.lambda_kd.is_finite() && kd.lambda_kd >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda_kd must be non-negative, got {}", kd.lambda_kd)));
    }
    Ok(())
}

fn sgd(
    model: &LocalModelParams,
    shard: &Dataset,
    kd: Option<&DistillTarget<'_>>,
    schedule: SgdSchedule,
) -> Result<Trained> {
    if shard.is_empty() {
        return Err(Error::InvalidInput("empty training shard".into()));
    }
    if schedule.epochs < 1 || schedule.batch < 1 {
        return Err(Error::InvalidInput("epochs and batch size must be >= 1".into()));
    }
    if !(schedule.lr.is_finite() && schedule.lr >= 0.0) {
        return Err(Error::InvalidInput(format!("learning rate must be non-negative, got {}", schedule.lr)));
    }
    if shard.dim() != model.input_dim() || shard.classes() != model.classes() {
        return Err(Error::Shape("shard and model dimensions disagree".into()));
    }
    let mut rng = seed::rng(schedule.seed);
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut final_loss = 0.0;
    let mut simplex_error: f64 = 0.0;
    let mut step = 0;
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(schedule.batch) {
            let x = shard.features().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|i| shard.labels()[*i]).collect();
            let (inputs, logits) = model.forward_cached(x.view());
            let mut dlogits = Array2::zeros(logits.raw_dim());
            let (loss, worst) = objective_rows(&logits, &y, kd, 1.0 / chunk.len() as f64, &mut dlogits);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            step += 1;
            epoch_loss += loss;
            simplex_error = simplex_error.max(worst);
            let grad = model.backward(&inputs, dlogits);
            model.apply(&grad, schedule.lr);
        }
        final_loss = epoch_loss / shard.len() as f64;
    }
    if !model.is_finite() {
        return Err(Error::Divergence { step, loss: final_loss });
    }
    Ok(Trained {
        model,
        final_loss,
        simplex_error,
    })
}

/// Supervised mini-batch SGD on cross-entropy against the hard labels.
pub fn local_train(model: &LocalModelParams, shard: &Dataset, schedule: SgdSchedule) -> Result<Trained> {
    sgd(model, shard, None, schedule)
}

/// Mini-batch SGD on cross-entropy plus distillation towards the per-class
/// global knowledge of each sample's ground-truth class.
pub fn local_distill(
    model: &LocalModelParams,
    shard: &Dataset,
    target: &DistillTarget<'_>,
    schedule: SgdSchedule,
) -> Result<Trained> {
    check_kd(shard, target)?;
    sgd(model, shard, Some(target), schedule)
}

/// Average tempered soft label per class over the shard.
pub fn class_knowledge(model: &LocalModelParams, shard: &Dataset, tau1: Temperature) -> Result<ClassKnowledge> {
    let classes = shard.classes();
    if model.classes() != classes || model.input_dim() != shard.dim() {
        return Err(Error::Shape("shard and model dimensions disagree".into()));
    }
    let mut logits = model.logits(shard.features().view());
    let mut sums = Array2::<f64>::zeros((classes, classes));
    for (mut row, y) in logits.outer_iter_mut().zip(shard.labels()) {
        let row = row.as_slice_mut().expect("standard layout");
        numerics::softmax_in_place(row, tau1.get());
        for (s, p) in sums.row_mut(*y).iter_mut().zip(row.iter()) {
            *s += p;
        }
    }
    let counts = shard.counts().to_vec();
    let per_class = sums
        .outer_iter()
        .zip(&counts)
        .map(|(s, n)| {
            if *n == 0 {
                return Ok(None);
            }
            let avg: Vec<f64> = s.iter().map(|v| v / *n as f64).collect();
            ProbVec::new(avg).map(Some)
        })
        .collect::<Result<_>>()?;
    Ok(ClassKnowledge {
        per_class,
        counts,
        round: 0,
    })
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(model: &LocalModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let logits = model.logits(test.features().view());
    let correct = logits
        .outer_iter()
        .zip(test.labels())
        .filter(|(z, y)| numerics::argmax(z.as_slice().expect("standard layout")) == **y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}
