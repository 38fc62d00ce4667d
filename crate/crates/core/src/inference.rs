//! Deterministic post-training inference: s-vectors, per-segment posteriors,
//! attribute transfer between sequences and latent traversals.

use crate::data::stack_time_major;
use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::fhvae::{FhvaeModel, HyperParams};

/// Segments are encoded this many at a time.
const CHUNK: usize = 512;

/// A sequence-level embedding and the segment count it was estimated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SVector {
    pub id: String,
    pub vector: Vec<f64>,
    pub n_segments: usize,
}

/// Posterior parameters per segment, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub z1_mean: Array,
    pub z1_logvar: Array,
    pub z2_mean: Array,
    pub z2_logvar: Array,
}

impl Latents {
    pub fn len(&self) -> usize {
        self.z2_mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_segments(segs: &[Array], hp: &HyperParams) -> Result<()> {
    for s in segs {
        if s.shape() != [hp.seg_len, hp.frame_dim] {
            return Err(Error::Shape(format!(
                "segment of shape {:?}, expected [{}, {}]",
                s.shape(),
                hp.seg_len,
                hp.frame_dim
            )));
        }
    }
    Ok(())
}

fn append_rows(dst: &mut Vec<f64>, v: Var<'_>) {
    dst.extend_from_slice(v.value().data());
}

/// Posterior means and log-variances of both latents; z₁ is conditioned on
/// the posterior mean of z₂.
pub fn extract_latents(segs: &[Array], model: &FhvaeModel) -> Result<Latents> {
    let hp = &model.hp;
    check_segments(segs, hp)?;
    let mut out = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for chunk in segs.chunks(CHUNK) {
        let tape = Tape::new();
        let p = model.nets.params.bind_const(&tape);
        let refs: Vec<&Array> = chunk.iter().collect();
        let frames: Vec<Var<'_>> = stack_time_major(&refs).into_iter().map(|a| tape.constant(a)).collect();
        let q2 = model.nets.encode_z2(&p, &frames);
        let q1 = model.nets.encode_z1(&p, &frames, q2.mean);
        append_rows(&mut out[0], q1.mean);
        append_rows(&mut out[1], q1.logvar);
        append_rows(&mut out[2], q2.mean);
        append_rows(&mut out[3], q2.logvar);
    }
    let n = segs.len();
    let [a, b, c, d] = out;
    Ok(Latents {
        z1_mean: Array::matrix(n, hp.z1_dim, a),
        z1_logvar: Array::matrix(n, hp.z1_dim, b),
        z2_mean: Array::matrix(n, hp.z2_dim, c),
        z2_logvar: Array::matrix(n, hp.z2_dim, d),
    })
}

/// Posterior means of z₂, `[N, J]`.
pub fn z2_means(segs: &[Array], model: &FhvaeModel) -> Result<Array> {
    let hp = &model.hp;
    check_segments(segs, hp)?;
    let mut data = Vec::with_capacity(segs.len() * hp.z2_dim);
    for chunk in segs.chunks(CHUNK) {
        let tape = Tape::new();
        let p = model.nets.params.bind_const(&tape);
        let refs: Vec<&Array> = chunk.iter().collect();
        let frames: Vec<Var<'_>> = stack_time_major(&refs).into_iter().map(|a| tape.constant(a)).collect();
        append_rows(&mut data, model.nets.encode_z2(&p, &frames).mean);
    }
    Ok(Array::matrix(segs.len(), hp.z2_dim, data))
}

fn column_sums(a: &Array, dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; dim];
    for r in 0..a.rows() {
        for (acc, v) in s.iter_mut().zip(a.row(r)) {
            *acc += v;
        }
    }
    s
}

/// `Σ means / (N + σ²_{z₂}/σ²_{μ₂})`; zero when there are no segments.
pub fn svector_from_means(means: &Array, hp: &HyperParams) -> Vec<f64> {
    let n = means.rows();
    let denom = n as f64 + hp.var_z2 / hp.var_mu2;
    column_sums(means, hp.z2_dim).into_iter().map(|s| s / denom).collect()
}

/// MAP estimate of a sequence's s-vector from its segments.
pub fn infer_svector(id: &str, segs: &[Array], model: &FhvaeModel) -> Result<SVector> {
    let means = z2_means(segs, model)?;
    Ok(SVector { id: id.to_string(), vector: svector_from_means(&means, &model.hp), n_segments: segs.len() })
}

/// `Σ z₁ means / (N + σ²_{z₁})`.
pub fn infer_mu1(segs: &[Array], model: &FhvaeModel) -> Result<Vec<f64>> {
    let hp = &model.hp;
    let lat = extract_latents(segs, model)?;
    let denom = segs.len() as f64 + hp.var_z1;
    Ok(column_sums(&lat.z1_mean, hp.z1_dim).into_iter().map(|s| s / denom).collect())
}

/// Decodes per-frame means for every row of `z1`/`z2`, concatenated into `[N·T, F]`.
pub fn decode_means(z1: &Array, z2: &Array, model: &FhvaeModel) -> Array {
    let hp = &model.hp;
    let n = z1.rows();
    let mut frames = vec![0.0; n * hp.seg_len * hp.frame_dim];
    let tape = Tape::new();
    let p = model.nets.params.bind_const(&tape);
    let px = model.nets.decode_x(&p, tape.constant(z1.clone()), tape.constant(z2.clone()), hp.seg_len);
    let f = hp.frame_dim;
    for (t, g) in px.iter().enumerate() {
        let m = g.mean.value();
        for r in 0..n {
            let dst = (r * hp.seg_len + t) * f;
            frames[dst..dst + f].copy_from_slice(m.row(r));
        }
    }
    Array::matrix(n * hp.seg_len, f, frames)
}

/// Re-decodes each segment with its z₂ mean shifted by `delta`.
pub fn shift_and_decode(segs: &[Array], delta: &[f64], model: &FhvaeModel) -> Result<Array> {
    let hp = &model.hp;
    if delta.len() != hp.z2_dim {
        return Err(Error::Shape(format!("shift of dim {} vs J = {}", delta.len(), hp.z2_dim)));
    }
    let lat = extract_latents(segs, model)?;
    let mut z2 = lat.z2_mean;
    let j = hp.z2_dim;
    for (k, v) in z2.data_mut().iter_mut().enumerate() {
        *v += delta[k % j];
    }
    let mut rows = Vec::new();
    let f = hp.frame_dim;
    for start in (0..segs.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(segs.len());
        let take = |a: &Array, d: usize| Array::matrix(end - start, d, a.data()[start * d..end * d].to_vec());
        rows.extend(decode_means(&take(&lat.z1_mean, hp.z1_dim), &take(&z2, j), model).into_data());
    }
    Ok(Array::matrix(segs.len() * hp.seg_len, f, rows))
}

/// Plain reconstruction from posterior means.
pub fn reconstruct(segs: &[Array], model: &FhvaeModel) -> Result<Array> {
    shift_and_decode(segs, &vec![0.0; model.hp.z2_dim], model)
}

/// Moves the sequence-level attributes of `target` toward those of the
/// reference by shifting every z₂ by `ref - tar`.
pub fn transform_sequence(target: &[Array], reference: &SVector, tar: &SVector, model: &FhvaeModel) -> Result<Array> {
    if reference.vector.len() != tar.vector.len() {
        return Err(Error::Shape("s-vectors differ in dimension".into()));
    }
    let delta: Vec<f64> = reference.vector.iter().zip(&tar.vector).map(|(r, t)| r - t).collect();
    shift_and_decode(target, &delta, model)
}

/// Which latent a traversal sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Z1,
    Z2,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z1" => Ok(Which::Z1),
            "z2" => Ok(Which::Z2),
            other => Err(Error::Config(format!("unknown latent `{other}` (expected z1 or z2)"))),
        }
    }
}

/// `k` evenly spaced points on `[-3, 3]`.
pub fn traversal_grid(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..k).map(|i| -3.0 + 6.0 * i as f64 / (k - 1) as f64).collect(),
    }
}

/// Decodes `k` copies of a segment with one posterior-mean coordinate swept
/// over [`traversal_grid`]. Each output is `[T, F]`.
pub fn traverse(seg: &Array, which: Which, dim: usize, k: usize, model: &FhvaeModel) -> Result<Vec<Array>> {
    let hp = &model.hp;
    let limit = if which == Which::Z1 { hp.z1_dim } else { hp.z2_dim };
    if dim >= limit {
        return Err(Error::Config(format!("dimension {dim} out of range for {which:?} (size {limit})")));
    }
    let lat = extract_latents(std::slice::from_ref(seg), model)?;
    let grid = traversal_grid(k);
    let repeat = |a: &Array, swept: bool| {
        let d = a.cols();
        let mut data = Vec::with_capacity(k * d);
        for &g in &grid {
            let mut row = a.row(0).to_vec();
            if swept {
                row[dim] = g;
            }
            data.extend(row);
        }
        Array::matrix(k, d, data)
    };
    let z1 = repeat(&lat.z1_mean, which == Which::Z1);
    let z2 = repeat(&lat.z2_mean, which == Which::Z2);
    if k == 0 {
        return Ok(Vec::new());
    }
    let all = decode_means(&z1, &z2, model);
    let per = hp.seg_len * hp.frame_dim;
    Ok((0..k).map(|i| Array::matrix(hp.seg_len, hp.frame_dim, all.data()[i * per..(i + 1) * per].to_vec())).collect())
}

/// Frames laid side by side in time: `[T, F]` blocks become one `[F, ΣT]`
/// image with low frequencies at the bottom.
pub fn spectrogram_image(blocks: &[Array]) -> Array {
    let f = blocks.first().map_or(0, |b| b.cols());
    let width: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut img = vec![0.0; f * width];
    let mut col = 0;
    for b in blocks {
        for t in 0..b.rows() {
            for d in 0..f {
                img[(f - 1 - d) * width + col] = b.at(t, d);
            }
            col += 1;
        }
    }
    Array::matrix(f, width, img)
}

/// 8-bit binary PGM, min-max scaled.
pub fn pgm_bytes(img: &Array) -> Vec<u8> {
    let (h, w) = (img.rows(), img.cols());
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Comma-separated rows.
pub fn csv_matrix(a: &Array) -> String {
    let mut s = String::new();
    for r in 0..a.rows() {
        let line: Vec<String> = a.row(r).iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
