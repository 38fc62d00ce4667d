//! Synthetic corpora drawn from the two-scale generative process, with the
//! latent ground truth kept alongside.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::SequenceRecord;
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::fhvae::LN_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// `x_t = W_t [z₁; z₂] + b_t`
    Linear,
    /// `h_t = tanh(A h_{t-1} + B [z₁; z₂])`, `x_t = C h_t + d`
    Recurrent,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DecoderKind::Linear),
            "recurrent" => Ok(DecoderKind::Recurrent),
            other => Err(Error::Config(format!("unknown decoder `{other}` (expected linear or recurrent)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Training speakers.
    pub speakers: usize,
    pub seqs_per_speaker: usize,
    /// Segments per training sequence.
    pub segments: usize,
    /// Held-out speakers for model selection, one sequence each.
    pub dev_speakers: usize,
    pub dev_segments: usize,
    pub test_speakers: usize,
    pub test_seqs_per_speaker: usize,
    pub test_segments: usize,
    pub z1_dim: usize,
    pub z2_dim: usize,
    pub frame_dim: usize,
    pub seg_len: usize,
    pub var_z1: f64,
    pub var_z2: f64,
    pub var_mu2: f64,
    /// Spread of a sequence's s-vector around its speaker's; `0` shares it.
    pub var_seq: f64,
    pub var_x: f64,
    pub decoder: DecoderKind,
    /// State size of the recurrent decoder.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            speakers: 64,
            seqs_per_speaker: 1,
            segments: 40,
            dev_speakers: 8,
            dev_segments: 40,
            test_speakers: 24,
            test_seqs_per_speaker: 4,
            test_segments: 10,
            z1_dim: 8,
            z2_dim: 8,
            frame_dim: 16,
            seg_len: 5,
            var_z1: 1.0,
            var_z2: 0.1,
            var_mu2: 1.0,
            var_seq: 0.0,
            var_x: 0.01,
            decoder: DecoderKind::Linear,
            hidden: 32,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("speakers", self.speakers),
            ("seqs_per_speaker", self.seqs_per_speaker),
            ("segments", self.segments),
            ("z1_dim", self.z1_dim),
            ("z2_dim", self.z2_dim),
            ("frame_dim", self.frame_dim),
            ("seg_len", self.seg_len),
            ("hidden", self.hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dev_speakers > 0 && self.dev_segments == 0 {
            return Err(Error::Config("dev split needs segments".into()));
        }
        if self.test_speakers > 0 && (self.test_seqs_per_speaker == 0 || self.test_segments == 0) {
            return Err(Error::Config("test split needs sequences and segments".into()));
        }
        let vars = [
            ("var_z1", self.var_z1),
            ("var_z2", self.var_z2),
            ("var_mu2", self.var_mu2),
            ("var_seq", self.var_seq),
            ("var_x", self.var_x),
        ];
        for (name, v) in vars {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative variance")));
            }
        }
        if self.var_x <= 0.0 {
            return Err(Error::Config("var_x must be positive".into()));
        }
        Ok(())
    }

    fn latent_dim(&self) -> usize {
        self.z1_dim + self.z2_dim
    }
}

/// Decoder weights shared by every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDecoder {
    pub kind: DecoderKind,
    /// Linear: `[T·F, J₁+J]` with rows ordered by (t, f). Recurrent: `B`, `[H, J₁+J]`.
    pub w: Array,
    /// Linear: `[T·F]`. Recurrent: `d`, `[F]`.
    pub b: Array,
    /// Recurrent only: `A`, `[H, H]`.
    pub a: Array,
    /// Recurrent only: `C`, `[F, H]`.
    pub c: Array,
}

fn std_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, sd: f64) -> Array {
    let data = (0..rows * cols).map(|_| sd * std_normal(&mut *rng)).collect::<Vec<f64>>();
    Array::matrix(rows, cols, data)
}

impl OracleDecoder {
    pub fn draw(cfg: &OracleConfig, rng: &mut impl Rng) -> Self {
        let l = cfg.latent_dim();
        let tf = cfg.seg_len * cfg.frame_dim;
        match cfg.decoder {
            DecoderKind::Linear => OracleDecoder {
                kind: DecoderKind::Linear,
                w: normal_matrix(rng, tf, l, 1.0 / (l as f64).sqrt()),
                b: normal_matrix(rng, 1, tf, 0.5).reshape(vec![tf]),
                a: Array::zeros(&[0, 0]),
                c: Array::zeros(&[0, 0]),
            },
            DecoderKind::Recurrent => {
                let h = cfg.hidden;
                OracleDecoder {
                    kind: DecoderKind::Recurrent,
                    w: normal_matrix(rng, h, l, 1.0 / (l as f64).sqrt()),
                    b: normal_matrix(rng, 1, cfg.frame_dim, 0.5).reshape(vec![cfg.frame_dim]),
                    a: normal_matrix(rng, h, h, 0.9 / (h as f64).sqrt()),
                    c: normal_matrix(rng, cfg.frame_dim, h, 1.0 / (h as f64).sqrt()),
                }
            }
        }
    }

    /// Noise-free frames of one segment, `T·F` values in (t, f) order.
    pub fn mean_frames(&self, z: &[f64], seg_len: usize, frame_dim: usize) -> Vec<f64> {
        let matvec = |m: &Array, v: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        match self.kind {
            DecoderKind::Linear => matvec(&self.w, z).iter().zip(self.b.data()).map(|(a, b)| a + b).collect(),
            DecoderKind::Recurrent => {
                let drive = matvec(&self.w, z);
                let mut h = vec![0.0; self.a.rows()];
                let mut out = Vec::with_capacity(seg_len * frame_dim);
                for _ in 0..seg_len {
                    let ah = matvec(&self.a, &h);
                    h = ah.iter().zip(&drive).map(|(a, d)| (a + d).tanh()).collect();
                    out.extend(matvec(&self.c, &h).iter().zip(self.b.data()).map(|(a, b)| a + b));
                }
                out
            }
        }
    }
}

/// Latents behind one generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTruth {
    pub mu2: Vec<f64>,
    /// `[N, J₁]`
    pub z1: Array,
    /// `[N, J]`
    pub z2: Array,
}

#[derive(Debug, Clone)]
pub struct OracleCorpus {
    pub train: Vec<SequenceRecord>,
    pub train_truth: Vec<SequenceTruth>,
    pub dev: Vec<SequenceRecord>,
    pub dev_truth: Vec<SequenceTruth>,
    pub test: Vec<SequenceRecord>,
    pub test_truth: Vec<SequenceTruth>,
    pub decoder: OracleDecoder,
}

fn isotropic(rng: &mut impl Rng, dim: usize, var: f64) -> Vec<f64> {
    let sd = var.sqrt();
    (0..dim).map(|_| sd * std_normal(&mut *rng)).collect::<Vec<f64>>()
}

fn draw_sequence(
    cfg: &OracleConfig,
    dec: &OracleDecoder,
    speaker_mu: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> (Array, SequenceTruth) {
    let mu2: Vec<f64> = speaker_mu.iter().zip(isotropic(rng, cfg.z2_dim, cfg.var_seq)).map(|(a, b)| a + b).collect();
    let mut frames = Vec::with_capacity(n * cfg.seg_len * cfg.frame_dim);
    let mut z1s = Vec::with_capacity(n * cfg.z1_dim);
    let mut z2s = Vec::with_capacity(n * cfg.z2_dim);
    for _ in 0..n {
        let z2: Vec<f64> = mu2.iter().zip(isotropic(rng, cfg.z2_dim, cfg.var_z2)).map(|(m, e)| m + e).collect();
        let z1 = isotropic(rng, cfg.z1_dim, cfg.var_z1);
        let z: Vec<f64> = z1.iter().chain(&z2).copied().collect();
        let mean = dec.mean_frames(&z, cfg.seg_len, cfg.frame_dim);
        frames.extend(mean.iter().zip(isotropic(rng, mean.len(), cfg.var_x)).map(|(m, e)| m + e));
        z1s.extend(z1);
        z2s.extend(z2);
    }
    let frames = Array::matrix(n * cfg.seg_len, cfg.frame_dim, frames);
    let truth = SequenceTruth { mu2, z1: Array::matrix(n, cfg.z1_dim, z1s), z2: Array::matrix(n, cfg.z2_dim, z2s) };
    (frames, truth)
}

/// Stream ids keep every sequence's draws independent of the others.
const DECODER_STREAM: u64 = 0;
const SPEAKER_STREAM: u64 = 1;
const TRAIN_STREAM_BASE: u64 = 1 << 32;
const TEST_STREAM_BASE: u64 = 2 << 32;
const DEV_STREAM_BASE: u64 = 3 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws a corpus. Speaker `k` of the training split is labelled `spk{k}`
/// and its sequences are `tr-spk{k}-{u}`; held-out test speakers are
/// `ts{k}` with sequences `te-ts{k}-{u}`, and dev speakers `dv{k}` with
/// sequences `dv-dv{k}-00`.
pub fn generate(cfg: &OracleConfig) -> Result<OracleCorpus> {
    cfg.validate()?;
    let decoder = OracleDecoder::draw(cfg, &mut stream(cfg.seed, DECODER_STREAM));
    let mut spk_rng = stream(cfg.seed, SPEAKER_STREAM);
    let spk_var = cfg.var_mu2;
    let train_spk: Vec<Vec<f64>> = (0..cfg.speakers).map(|_| isotropic(&mut spk_rng, cfg.z2_dim, spk_var)).collect();
    let test_spk: Vec<Vec<f64>> =
        (0..cfg.test_speakers).map(|_| isotropic(&mut spk_rng, cfg.z2_dim, spk_var)).collect();
    let dev_spk: Vec<Vec<f64>> = (0..cfg.dev_speakers).map(|_| isotropic(&mut spk_rng, cfg.z2_dim, spk_var)).collect();

    let split = |speakers: &[Vec<f64>],
                 per: usize,
                 n: usize,
                 base: u64,
                 prefix: &str,
                 spk: &str|
     -> Result<(Vec<SequenceRecord>, Vec<SequenceTruth>)> {
        let mut seqs = Vec::new();
        let mut truth = Vec::new();
        for (k, mu) in speakers.iter().enumerate() {
            for u in 0..per {
                let idx = (k * per + u) as u64;
                let (frames, t) = draw_sequence(cfg, &decoder, mu, n, &mut stream(cfg.seed, base + idx));
                let label = format!("{spk}{k:03}");
                seqs.push(SequenceRecord::new(format!("{prefix}-{label}-{u:02}"), frames, Some(label))?);
                truth.push(t);
            }
        }
        Ok((seqs, truth))
    };
    let (train, train_truth) = split(&train_spk, cfg.seqs_per_speaker, cfg.segments, TRAIN_STREAM_BASE, "tr", "spk")?;
    let (test, test_truth) =
        split(&test_spk, cfg.test_seqs_per_speaker, cfg.test_segments, TEST_STREAM_BASE, "te", "ts")?;
    let (dev, dev_truth) = split(&dev_spk, 1, cfg.dev_segments, DEV_STREAM_BASE, "dv", "dv")?;
    Ok(OracleCorpus { train, train_truth, dev, dev_truth, test, test_truth, decoder })
}

/// Exact `log p(X)` of one sequence under a linear decoder, with every
/// segment's latents and the shared s-vector integrated out.
pub fn true_loglik_linear(frames: &Array, cfg: &OracleConfig, dec: &OracleDecoder) -> Result<f64> {
    if dec.kind != DecoderKind::Linear {
        return Err(Error::Unsupported("exact likelihood needs the linear decoder".into()));
    }
    let tf = cfg.seg_len * cfg.frame_dim;
    if frames.cols() != cfg.frame_dim || !frames.rows().is_multiple_of(cfg.seg_len) || frames.rows() == 0 {
        return Err(Error::Shape(format!(
            "{:?} frames do not split into T = {} segments of F = {}",
            frames.shape(),
            cfg.seg_len,
            cfg.frame_dim
        )));
    }
    if cfg.var_seq != 0.0 {
        return Err(Error::Unsupported("exact likelihood assumes var_seq = 0".into()));
    }
    let n = frames.rows() / cfg.seg_len;
    let (j1, j2) = (cfg.z1_dim, cfg.z2_dim);
    let d = n * tf;
    // Σ = σ²ₓ I + U S Uᵀ with U = [blockdiag W₁, blockdiag W₂, 1 ⊗ W₂].
    let r = n * (j1 + j2) + j2;
    let mut u = DMatrix::<f64>::zeros(d, r);
    let mut s = DVector::<f64>::zeros(r);
    for seg in 0..n {
        for row in 0..tf {
            let w = dec.w.row(row);
            for k in 0..j1 {
                u[(seg * tf + row, seg * j1 + k)] = w[k];
            }
            for k in 0..j2 {
                u[(seg * tf + row, n * j1 + seg * j2 + k)] = w[j1 + k];
                u[(seg * tf + row, n * (j1 + j2) + k)] = w[j1 + k];
            }
        }
        for k in 0..j1 {
            s[seg * j1 + k] = cfg.var_z1;
        }
        for k in 0..j2 {
            s[n * j1 + seg * j2 + k] = cfg.var_z2;
        }
    }
    for k in 0..j2 {
        s[n * (j1 + j2) + k] = cfg.var_mu2;
    }
    let resid = DVector::from_iterator(d, frames.data().iter().enumerate().map(|(i, x)| x - dec.b.data()[i % tf]));
    let vx = cfg.var_x;
    // Latent directions with zero variance drop out of the covariance.
    let keep: Vec<usize> = (0..r).filter(|&k| s[k] > 0.0).collect();
    let u = u.select_columns(&keep);
    let s = DVector::from_iterator(keep.len(), keep.iter().map(|&k| s[k]));
    let mut cap = u.transpose() * &u / vx;
    for k in 0..keep.len() {
        cap[(k, k)] += 1.0 / s[k];
    }
    let chol = cap.cholesky().ok_or_else(|| Error::Singular("capacitance matrix is not positive definite".into()))?;
    let logdet_cap: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet = d as f64 * vx.ln() + s.iter().map(|v| v.ln()).sum::<f64>() + logdet_cap;
    let ut_r = u.transpose() * &resid / vx;
    let quad = resid.norm_squared() / vx - ut_r.dot(&chol.solve(&ut_r));
    Ok(-0.5 * (d as f64 * LN_2PI + logdet + quad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> OracleConfig {
        OracleConfig {
            speakers: 3,
            segments: 4,
            test_speakers: 2,
            test_seqs_per_speaker: 2,
            test_segments: 3,
            z1_dim: 2,
            z2_dim: 2,
            frame_dim: 3,
            seg_len: 2,
            ..OracleConfig::default()
        }
    }

    #[test]
    fn shapes_labels_and_determinism() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.train[0].frames.shape(), &[8, 3]);
        assert_eq!(a.test[3].label.as_deref(), Some("ts001"));
        assert_eq!(a.test[3].id, "te-ts001-01");
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate(&OracleConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_sequence_variance_pins_z2() {
        let cfg = OracleConfig { var_z2: 0.0, ..small() };
        let c = generate(&cfg).unwrap();
        for t in &c.train_truth {
            for r in 0..t.z2.rows() {
                assert_eq!(t.z2.row(r), t.mu2.as_slice());
            }
        }
    }

    #[test]
    fn within_sequence_mean_converges() {
        let cfg = OracleConfig { speakers: 1, segments: 10_000, test_speakers: 0, frame_dim: 1, seg_len: 1, ..small() };
        let c = generate(&cfg).unwrap();
        let t = &c.train_truth[0];
        let tol = 3.0 * (cfg.var_z2 / 10_000f64).sqrt();
        for j in 0..2 {
            let mean: f64 = (0..10_000).map(|r| t.z2.row(r)[j]).sum::<f64>() / 10_000.0;
            assert!((mean - t.mu2[j]).abs() < tol);
        }
    }

    #[test]
    fn z2_covariance_across_sequences() {
        let cfg = OracleConfig {
            speakers: 4000,
            segments: 1,
            test_speakers: 0,
            frame_dim: 1,
            seg_len: 1,
            var_z2: 0.25,
            ..small()
        };
        let c = generate(&cfg).unwrap();
        let vals: Vec<f64> = c.train_truth.iter().map(|t| t.z2.row(0)[0]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - 1.25).abs() < 0.1, "{var}");
    }

    #[test]
    fn zero_decoder_gives_pure_noise_likelihood() {
        let cfg = small();
        let mut c = generate(&cfg).unwrap();
        c.decoder.w.data_mut().fill(0.0);
        let x = &c.train[0].frames;
        let exact = true_loglik_linear(x, &cfg, &c.decoder).unwrap();
        let tf = cfg.seg_len * cfg.frame_dim;
        let direct: f64 = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| -0.5 * (LN_2PI + cfg.var_x.ln() + (v - c.decoder.b.data()[i % tf]).powi(2) / cfg.var_x))
            .sum();
        assert!((exact - direct).abs() < 1e-8);
    }

    #[test]
    fn scalar_convolution() {
        // One segment, F = T = J₁ = J = 1: x ~ N(b, w₁²σ²₁ + w₂²(σ²₂ + σ²μ) + σ²ₓ).
        let cfg = OracleConfig {
            speakers: 1,
            segments: 1,
            test_speakers: 0,
            z1_dim: 1,
            z2_dim: 1,
            frame_dim: 1,
            seg_len: 1,
            var_z2: 0.3,
            var_mu2: 0.7,
            var_x: 0.2,
            ..OracleConfig::default()
        };
        let dec = OracleDecoder {
            kind: DecoderKind::Linear,
            w: Array::matrix(1, 2, vec![0.8, -1.5]),
            b: Array::vector(vec![0.25]),
            a: Array::zeros(&[0, 0]),
            c: Array::zeros(&[0, 0]),
        };
        let x = 1.3;
        let var = 0.64 * 1.0 + 2.25 * (0.3 + 0.7) + 0.2;
        let expect = -0.5 * (LN_2PI + f64::ln(var) + (x - 0.25f64).powi(2) / var);
        let got = true_loglik_linear(&Array::matrix(1, 1, vec![x]), &cfg, &dec).unwrap();
        assert!((got - expect).abs() < 1e-12);
        // Two segments share μ₂: covariance off-diagonal w₂² σ²μ.
        let x2 = [1.3, -0.4];
        let (a, c) = (var, 2.25 * 0.7);
        let det = a * a - c * c;
        let r = [x2[0] - 0.25, x2[1] - 0.25];
        let quad = (a * (r[0] * r[0] + r[1] * r[1]) - 2.0 * c * r[0] * r[1]) / det;
        let expect2 = -0.5 * (2.0 * LN_2PI + det.ln() + quad);
        let got2 = true_loglik_linear(&Array::matrix(2, 1, x2.to_vec()), &cfg, &dec).unwrap();
        assert!((got2 - expect2).abs() < 1e-12);
    }

    #[test]
    fn recurrent_decoder_is_unsupported_for_exact_likelihood() {
        let cfg = OracleConfig { decoder: DecoderKind::Recurrent, ..small() };
        let c = generate(&cfg).unwrap();
        assert!(matches!(true_loglik_linear(&c.train[0].frames, &cfg, &c.decoder), Err(Error::Unsupported(_))));
        assert!(c.train[0].frames.all_finite());
    }
}
