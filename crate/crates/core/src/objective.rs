//! Segment-level variational bounds and the sequence-discrimination term.

use std::ops::AddAssign;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::stack_time_major;
use crate::diffcore::{logsumexp, Array, Tape, Var};
use crate::error::{Error, Result};
use crate::fhvae::{
    expected_kl_correction, kl_rows, log_prior_mu2, log_prior_rows, logpdf_rows, FhvaeModel, HyperParams, SVectorTable,
    LN_2PI,
};
use crate::recnet::{GaussianVar, Networks};

/// Standard-normal draws for the two reparameterized latents, one row per
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentNoise {
    pub z1: Array,
    pub z2: Array,
}

impl SegmentNoise {
    pub fn draw(rows: usize, hp: &HyperParams, rng: &mut impl Rng) -> Self {
        let mut gen = |d: usize| {
            let data = (0..rows * d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            Array::matrix(rows, d, data)
        };
        let z2 = gen(hp.z2_dim);
        let z1 = gen(hp.z1_dim);
        SegmentNoise { z1, z2 }
    }

    /// Evaluates at posterior means.
    pub fn zeros(rows: usize, hp: &HyperParams) -> Self {
        SegmentNoise { z1: Array::zeros(&[rows, hp.z1_dim]), z2: Array::zeros(&[rows, hp.z2_dim]) }
    }

    pub fn rows(&self) -> usize {
        self.z2.rows()
    }

    pub fn row(&self, r: usize) -> SegmentNoise {
        SegmentNoise {
            z1: Array::matrix(1, self.z1.cols(), self.z1.row(r).to_vec()),
            z2: Array::matrix(1, self.z2.cols(), self.z2.row(r).to_vec()),
        }
    }
}

/// Terms of a segment bound. `total` is
/// `recon_loglik - kl_z1 - kl_z2 + log_prior_mu_term + alpha * disc_logprob`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundBreakdown {
    pub recon_loglik: f64,
    pub kl_z1: f64,
    pub kl_z2: f64,
    pub log_prior_mu_term: f64,
    pub disc_logprob: f64,
    pub total: f64,
}

impl BoundBreakdown {
    pub fn assemble(recon: f64, kl_z1: f64, kl_z2: f64, prior: f64, disc: f64, alpha: f64) -> Self {
        BoundBreakdown {
            recon_loglik: recon,
            kl_z1,
            kl_z2,
            log_prior_mu_term: prior,
            disc_logprob: disc,
            total: recon - kl_z1 - kl_z2 + prior + alpha * disc,
        }
    }

    /// The bound without the discrimination term.
    pub fn segment_bound(&self) -> f64 {
        self.recon_loglik - self.kl_z1 - self.kl_z2 + self.log_prior_mu_term
    }

    pub fn scaled(&self, s: f64) -> Self {
        BoundBreakdown {
            recon_loglik: self.recon_loglik * s,
            kl_z1: self.kl_z1 * s,
            kl_z2: self.kl_z2 * s,
            log_prior_mu_term: self.log_prior_mu_term * s,
            disc_logprob: self.disc_logprob * s,
            total: self.total * s,
        }
    }
}

impl AddAssign for BoundBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.recon_loglik += o.recon_loglik;
        self.kl_z1 += o.kl_z1;
        self.kl_z2 += o.kl_z2;
        self.log_prior_mu_term += o.log_prior_mu_term;
        self.disc_logprob += o.disc_logprob;
        self.total += o.total;
    }
}

/// Per-row bound terms of a batch, each `[B]`.
#[derive(Clone, Copy)]
pub struct BatchTerms<'t> {
    pub recon: Var<'t>,
    pub kl_z1: Var<'t>,
    pub kl_z2: Var<'t>,
    pub q_z2: GaussianVar<'t>,
    pub z2: Var<'t>,
}

/// Conditional bound terms for a time-major batch given its `[B, J]` s-vector rows.
pub fn batch_terms<'t>(
    nets: &Networks,
    hp: &HyperParams,
    p: &[Var<'t>],
    frames: &[Var<'t>],
    mu_tilde: Var<'t>,
    noise: &SegmentNoise,
) -> BatchTerms<'t> {
    let tape = mu_tilde.tape();
    let q_z2 = nets.encode_z2(p, frames);
    let z2 = q_z2.sample(tape.constant(noise.z2.clone()));
    let q_z1 = nets.encode_z1(p, frames, z2);
    let z1 = q_z1.sample(tape.constant(noise.z1.clone()));
    let px = nets.decode_x(p, z1, z2, frames.len());
    let recon = frames
        .iter()
        .zip(&px)
        .map(|(&x, g)| logpdf_rows(x, g.mean, g.logvar))
        .reduce(|a, b| a + b)
        .expect("at least one frame");
    BatchTerms {
        recon,
        kl_z1: kl_rows(q_z1.mean, q_z1.logvar, None, hp.var_z1),
        kl_z2: kl_rows(q_z2.mean, q_z2.logvar, Some(mu_tilde), hp.var_z2),
        q_z2,
        z2,
    }
}

/// `log p(i | z₂)` per row over the rows of `table` (`[M, J]`) with a uniform
/// prior over sequences. The `‖z₂‖²` term cancels in the softmax.
pub fn disc_logprob_rows<'t>(z2: Var<'t>, table: Var<'t>, targets: Arc<Vec<usize>>, var_z2: f64) -> Var<'t> {
    let logits = z2.matmul_t(table).add_row(table.square().sum_last().scale(-0.5)).scale(1.0 / var_z2);
    logits.pick(targets) - logits.logsumexp_last()
}

/// Which table rows enter the discrimination softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscSoftmax {
    #[default]
    Full,
    /// Batch targets plus this many uniformly drawn other rows.
    Sampled { negatives: usize },
}

/// Candidate rows for a sampled softmax and the targets re-indexed into them.
pub fn softmax_candidates(
    targets: &[usize],
    m: usize,
    negatives: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = targets.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let others: Vec<usize> = (0..m).filter(|r| rows.binary_search(r).is_err()).collect();
    let k = negatives.min(others.len());
    rows.extend(sample_indices(rng, others.len(), k).into_iter().map(|i| others[i]));
    rows.sort_unstable();
    let remap = targets.iter().map(|t| rows.binary_search(t).expect("target kept")).collect();
    (rows, remap)
}

/// Scalar training objective for one batch: mean discriminative segment bound.
pub struct BatchObjective<'t> {
    pub total: Var<'t>,
    /// Batch means of each term.
    pub breakdown: BoundBreakdown,
}

/// Builds the mean discriminative segment bound of a batch on the tape.
/// `table` is the bound s-vector table, `rows[b]` the table row of item `b`
/// and `inv_n[b]` its `1 / N_i`.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<'t>(
    nets: &Networks,
    hp: &HyperParams,
    p: &[Var<'t>],
    table: Var<'t>,
    frames: &[Var<'t>],
    rows: &[usize],
    inv_n: &[f64],
    noise: &SegmentNoise,
    candidates: Option<(&[usize], &[usize])>,
) -> BatchObjective<'t> {
    let tape = table.tape();
    let b = rows.len();
    let idx = Arc::new(rows.to_vec());
    let mu = table.gather_rows(idx.clone());
    let terms = batch_terms(nets, hp, p, frames, mu, noise);
    let prior = log_prior_rows(mu, hp.var_mu2) * tape.constant(Array::vector(inv_n.to_vec()));
    let mut total = terms.recon - terms.kl_z1 - terms.kl_z2 + prior;
    let disc = if hp.alpha > 0.0 {
        let d = match candidates {
            None => disc_logprob_rows(terms.z2, table, idx, hp.var_z2),
            Some((cand, remap)) => disc_logprob_rows(
                terms.z2,
                table.gather_rows(Arc::new(cand.to_vec())),
                Arc::new(remap.to_vec()),
                hp.var_z2,
            ),
        };
        total = total + d.scale(hp.alpha);
        Some(d)
    } else {
        None
    };
    let mean = |v: Var<'_>| v.value().sum() / b as f64;
    let breakdown = BoundBreakdown::assemble(
        mean(terms.recon),
        mean(terms.kl_z1),
        mean(terms.kl_z2),
        mean(prior),
        disc.map_or(0.0, mean),
        hp.alpha,
    );
    BatchObjective { total: total.mean(), breakdown }
}

fn check_segment(x: &Array, hp: &HyperParams) -> Result<()> {
    if x.rank() != 2 || x.cols() != hp.frame_dim || x.rows() == 0 {
        return Err(Error::Shape(format!("segment of shape {:?}, expected [T, {}]", x.shape(), hp.frame_dim)));
    }
    if !x.all_finite() {
        return Err(Error::Shape("segment contains non-finite values".into()));
    }
    Ok(())
}

fn check_noise(noise: &SegmentNoise, rows: usize, hp: &HyperParams) -> Result<()> {
    if noise.z1.shape() != [rows, hp.z1_dim] || noise.z2.shape() != [rows, hp.z2_dim] {
        return Err(Error::Shape(format!(
            "noise of shapes {:?}/{:?} for {rows} segments",
            noise.z1.shape(),
            noise.z2.shape()
        )));
    }
    Ok(())
}

/// Per-row conditional terms of a stack of segments against per-row
/// s-vectors, evaluated without gradients.
pub fn conditional_rows(
    model: &FhvaeModel,
    segs: &[&Array],
    mu_tilde: &Array,
    noise: &SegmentNoise,
) -> Result<Vec<BoundBreakdown>> {
    let hp = &model.hp;
    for x in segs {
        check_segment(x, hp)?;
    }
    if mu_tilde.shape() != [segs.len(), hp.z2_dim] {
        return Err(Error::Shape(format!("s-vector rows of shape {:?}", mu_tilde.shape())));
    }
    check_noise(noise, segs.len(), hp)?;
    let tape = Tape::new();
    let p = model.nets.params.bind_const(&tape);
    let frames: Vec<Var<'_>> = stack_time_major(segs).into_iter().map(|a| tape.constant(a)).collect();
    let terms = batch_terms(&model.nets, hp, &p, &frames, tape.constant(mu_tilde.clone()), noise);
    let (r, k1, k2) = (terms.recon.value(), terms.kl_z1.value(), terms.kl_z2.value());
    Ok((0..segs.len())
        .map(|i| BoundBreakdown::assemble(r.data()[i], k1.data()[i], k2.data()[i], 0.0, 0.0, 0.0))
        .collect())
}

/// Single-sample conditional segment bound given an s-vector estimate.
pub fn conditional_segment_bound(
    x: &Array,
    mu_tilde: &[f64],
    model: &FhvaeModel,
    noise: &SegmentNoise,
) -> Result<BoundBreakdown> {
    let mu = Array::matrix(1, mu_tilde.len(), mu_tilde.to_vec());
    Ok(conditional_rows(model, &[x], &mu, noise)?[0])
}

/// Conditional bound plus `(1/N_i) log p(μ̃₂)` for a training sequence.
pub fn segment_bound(
    x: &Array,
    seq_id: &str,
    n_i: usize,
    model: &FhvaeModel,
    noise: &SegmentNoise,
) -> Result<BoundBreakdown> {
    if n_i == 0 {
        return Err(Error::Config("segment count must be positive".into()));
    }
    let mu = model.table.get(seq_id)?;
    let mut b = conditional_segment_bound(x, mu, model, noise)?;
    b.log_prior_mu_term = log_prior_mu2(mu, &model.hp) / n_i as f64;
    b.total += b.log_prior_mu_term;
    Ok(b)
}

/// `log p(i | z₂)` over every row of the table.
pub fn discriminative_logprob(z2: &[f64], seq_id: &str, table: &SVectorTable, hp: &HyperParams) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Empty("s-vector table".into()));
    }
    if z2.len() != table.dim() {
        return Err(Error::Shape(format!("z2 of dim {} vs table dim {}", z2.len(), table.dim())));
    }
    let target = table.row_of(seq_id)?;
    let logits: Vec<f64> = (0..table.len())
        .map(|r| {
            let mu = table.rows().row(r);
            -0.5 * z2.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / hp.var_z2
        })
        .collect();
    Ok(logits[target] - logsumexp(&logits))
}

/// Segment bound plus `α log p(i | z₂)` on the same z₂ draw.
pub fn discriminative_segment_bound(
    x: &Array,
    seq_id: &str,
    n_i: usize,
    model: &FhvaeModel,
    noise: &SegmentNoise,
) -> Result<BoundBreakdown> {
    let mut b = segment_bound(x, seq_id, n_i, model, noise)?;
    let z2 = sampled_z2(model, x, noise)?;
    b.disc_logprob = discriminative_logprob(&z2, seq_id, &model.table, &model.hp)?;
    b.total += model.hp.alpha * b.disc_logprob;
    Ok(b)
}

/// The reparameterized z₂ draw used by the bounds for this noise.
pub fn sampled_z2(model: &FhvaeModel, x: &Array, noise: &SegmentNoise) -> Result<Vec<f64>> {
    check_segment(x, &model.hp)?;
    check_noise(noise, 1, &model.hp)?;
    let tape = Tape::new();
    let p = model.nets.params.bind_const(&tape);
    let frames: Vec<Var<'_>> = stack_time_major(&[x]).into_iter().map(|a| tape.constant(a)).collect();
    let q = model.nets.encode_z2(&p, &frames);
    Ok(q.sample(tape.constant(noise.z2.clone())).value().data().to_vec())
}

/// `-N (J/2) σ²_{μ̃₂}/σ²_{z₂} + ½ Σ_j (1 + log σ²_{μ̃₂}) + ½ log 2π`
pub fn sequence_bound_constant(n: usize, hp: &HyperParams) -> f64 {
    let j = hp.z2_dim as f64;
    -(n as f64) * expected_kl_correction(hp.z2_dim, hp) + 0.5 * j * (1.0 + hp.var_mu2_post.ln()) + 0.5 * LN_2PI
}

/// Lower bound on `log p(X)` for a whole sequence given its s-vector
/// estimate: the sum of conditional bounds with the expected z₂ divergence,
/// minus the divergence of the s-vector posterior from its prior.
pub fn sequence_bound(segs: &[Array], mu_tilde: &[f64], model: &FhvaeModel, noise: &SegmentNoise) -> Result<f64> {
    if segs.is_empty() {
        return Err(Error::Empty("sequence has no segments".into()));
    }
    let refs: Vec<&Array> = segs.iter().collect();
    let mu_rows =
        Array::matrix(segs.len(), mu_tilde.len(), (0..segs.len()).flat_map(|_| mu_tilde.iter().copied()).collect());
    let rows = conditional_rows(model, &refs, &mu_rows, noise)?;
    let hp = &model.hp;
    let corr = expected_kl_correction(hp.z2_dim, hp);
    let sum: f64 = rows.iter().map(|b| b.total - corr).sum();
    Ok(sum + log_prior_mu2(mu_tilde, hp) + 0.5 * hp.z2_dim as f64 * (1.0 + hp.var_mu2_post.ln()) + 0.5 * LN_2PI)
}
