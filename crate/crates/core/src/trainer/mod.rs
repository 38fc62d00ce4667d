//! Segment-level stochastic training with Adam and dev-set early stopping.

mod checkpoint;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use crate::data::{Dataset, SegmentRef};
use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::fhvae::{log_prior_mu2, FhvaeModel, HyperParams};
use crate::inference::svector_from_means;
use crate::objective::{batch_objective, conditional_rows, softmax_candidates, DiscSoftmax, SegmentNoise};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of `λ‖W‖²` over network weight matrices.
    pub l2: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub softmax: DiscSoftmax,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 500,
            patience: 50,
            learning_rate: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 1e-4,
            clip_norm: 5.0,
            softmax: DiscSoftmax::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!("patience {} exceeds max epochs {}", self.patience, self.max_epochs)));
        }
        let positive = [("learning_rate", self.learning_rate), ("epsilon", self.epsilon)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.l2 >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("l2 and clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per optimized array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Array]) -> Self {
        let zeros: Vec<Array> = params.iter().map(|p| Array::zeros(p.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Arrays flagged in `decay` also receive
/// the `2λθ` gradient of the L2 penalty.
pub fn adam_step(
    params: &mut [&mut Array],
    grads: &[Array],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} decay flags, {} moments",
            n,
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for k in 0..n {
        if params[k].shape() != grads[k].shape() || params[k].shape() != state.m[k].shape() {
            return Err(Error::Shape(format!(
                "array {k}: param {:?}, grad {:?}, moment {:?}",
                params[k].shape(),
                grads[k].shape(),
                state.m[k].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..n {
        let l2 = if decay[k] { 2.0 * cfg.l2 } else { 0.0 };
        let p = params[k].data_mut();
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for i in 0..p.len() {
            let gi = g[i] + l2 * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Array::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Uniform draws, with replacement, over every training window.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<SegmentRef>> {
    let n = dataset.num_segments();
    if n == 0 {
        return Err(Error::Empty("dataset has no segments".into()));
    }
    Ok((0..batch_size).map(|_| dataset.segments()[rng.random_range(0..n)]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean segment bound over the epoch's batches, without the α term.
    pub train_bound: f64,
    pub dev_bound: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Parameters of the best dev epoch.
    pub model: FhvaeModel,
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// `epoch,train_bound,dev_bound` lines with a header. Timings are left out
/// so that reruns write identical files.
pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_bound,dev_bound\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_bound, r.dev_bound));
    }
    s
}

const DEV_NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const DEV_CHUNK: usize = 256;

/// Mean segment bound per dev segment, with each sequence's s-vector set to
/// its closed-form estimate. The noise stream is fixed by `seed`.
pub fn dev_bound(model: &FhvaeModel, dev: &Dataset, seed: u64) -> Result<f64> {
    let hp = &model.hp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DEV_NOISE_SALT);
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in dev.sequences() {
        let segs = seq.partition(hp.seg_len);
        if segs.is_empty() {
            continue;
        }
        let means = crate::inference::z2_means(&segs, model)?;
        let mu = svector_from_means(&means, hp);
        let prior = log_prior_mu2(&mu, hp) / segs.len() as f64;
        for chunk in segs.chunks(DEV_CHUNK) {
            let refs: Vec<&Array> = chunk.iter().collect();
            let rows =
                Array::matrix(chunk.len(), hp.z2_dim, (0..chunk.len()).flat_map(|_| mu.iter().copied()).collect());
            let noise = SegmentNoise::draw(chunk.len(), hp, &mut rng);
            for b in conditional_rows(model, &refs, &rows, &noise)? {
                total += b.total + prior;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("dev set has no complete segments".into()));
    }
    Ok(total / count as f64)
}

/// Rounds every stored value to single precision, as checkpoints keep it.
pub fn quantize(model: &mut FhvaeModel) {
    let round = |a: &mut Array| {
        for v in a.data_mut() {
            *v = *v as f32 as f64;
        }
    };
    for p in model.nets.params.values_mut() {
        round(p);
    }
    round(model.table.rows_mut());
}

struct Step {
    loss: f64,
    segment_bound: f64,
    grads: Vec<Array>,
}

fn batch_step(
    model: &FhvaeModel,
    data: &Dataset,
    refs: &[SegmentRef],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Step {
    let hp = &model.hp;
    let tape = Tape::new();
    let p = model.nets.params.bind(&tape);
    let table = tape.param(model.table.rows().clone());
    let frames: Vec<Var<'_>> = data.time_major(refs).into_iter().map(|a| tape.constant(a)).collect();
    let rows: Vec<usize> = refs.iter().map(|r| r.seq).collect();
    let inv_n: Vec<f64> = refs.iter().map(|r| 1.0 / data.n_segments_of(r.seq).max(1) as f64).collect();
    let noise = SegmentNoise::draw(refs.len(), hp, rng);
    let cands = match cfg.softmax {
        DiscSoftmax::Full => None,
        DiscSoftmax::Sampled { negatives } => Some(softmax_candidates(&rows, data.len(), negatives, rng)),
    };
    let obj = batch_objective(
        &model.nets,
        hp,
        &p,
        table,
        &frames,
        &rows,
        &inv_n,
        &noise,
        cands.as_ref().map(|(c, r)| (c.as_slice(), r.as_slice())),
    );
    let loss = -obj.total;
    let mut grads = tape.backward(loss);
    let mut out: Vec<Array> = p.iter().map(|&v| grads.take(v)).collect();
    out.push(grads.take(table));
    Step { loss: loss.value().item(), segment_bound: obj.breakdown.segment_bound(), grads: out }
}

/// Maximizes the discriminative segment bound on `train`, stopping when the
/// dev bound has not improved for `cfg.patience` epochs. `on_epoch` sees
/// every epoch's record and the current parameters. The returned model holds
/// the best-dev parameters rounded to single precision.
pub fn train(
    train: &Dataset,
    dev: &Dataset,
    hp: HyperParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &FhvaeModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hp.validate()?;
    if train.frame_dim() != hp.frame_dim || train.seg_len() != hp.seg_len {
        return Err(Error::Shape(format!(
            "data has F = {}, T = {}; model expects F = {}, T = {}",
            train.frame_dim(),
            train.seg_len(),
            hp.frame_dim,
            hp.seg_len
        )));
    }
    if dev.frame_dim() != hp.frame_dim {
        return Err(Error::Shape(format!("dev data has F = {}", dev.frame_dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FhvaeModel::new(hp, &train.ids(), &mut rng)?;
    let mut all: Vec<Array> = model.nets.params.values().to_vec();
    all.push(model.table.rows().clone());
    let mut adam = AdamState::new(&all);
    let mut decay = model.nets.params.decays().to_vec();
    decay.push(false);

    let steps = train.num_segments().div_ceil(cfg.batch_size);
    if steps == 0 {
        return Err(Error::Empty("training set has no segments".into()));
    }
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone(), adam.clone());
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut bound_sum = 0.0;
        for batch in 0..steps {
            let refs = sample_batch(train, cfg.batch_size, &mut rng)?;
            let mut step = batch_step(&model, train, &refs, cfg, &mut rng);
            let grad_norm = clip_global_norm(&mut step.grads, cfg.clip_norm);
            if !step.loss.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch,
                    detail: format!("loss {}, gradient norm {}", step.loss, grad_norm),
                });
            }
            bound_sum += step.segment_bound;
            let (params, table) = (&mut model.nets.params, &mut model.table);
            let mut targets: Vec<&mut Array> = params.values_mut().iter_mut().collect();
            targets.push(table.rows_mut());
            adam_step(&mut targets, &step.grads, &decay, &mut adam, cfg)?;
        }
        let dev_value = dev_bound(&model, dev, cfg.seed)?;
        if !dev_value.is_finite() {
            return Err(Error::NonFinite { epoch, batch: steps, detail: format!("dev bound {dev_value}") });
        }
        let record = EpochRecord {
            epoch,
            train_bound: bound_sum / steps as f64,
            dev_bound: dev_value,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} dev {:.4} ({:.1}s)",
            record.train_bound,
            record.dev_bound,
            record.seconds
        );
        on_epoch(&record, &model)?;
        log.push(record);
        if dev_value > best.0 {
            best = (dev_value, epoch, model.clone(), adam.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, mut model, adam) = best;
    quantize(&mut model);
    Ok(TrainOutcome { model, adam, log, best_epoch })
}
