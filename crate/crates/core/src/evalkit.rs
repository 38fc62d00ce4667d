//! Verification trials, cosine scoring, EER, LDA and latent diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::SequenceRecord;
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::fhvae::FhvaeModel;
use crate::inference::extract_latents;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialPair {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

/// Every unordered pair of distinct ids, ordered by id.
pub fn make_trials(labels: &BTreeMap<String, String>) -> Vec<TrialPair> {
    let items: Vec<(&String, &String)> = labels.iter().collect();
    let mut out = Vec::with_capacity(items.len() * items.len().saturating_sub(1) / 2);
    for (i, (a, ca)) in items.iter().enumerate() {
        for (b, cb) in &items[i + 1..] {
            out.push(TrialPair { enroll: (*a).clone(), test: (*b).clone(), is_target: ca == cb });
        }
    }
    out
}

/// `a·b / (‖a‖‖b‖)`, or 0 if either vector is zero.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine score with a zero vector, scoring 0");
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub targets: Vec<f64>,
    pub nontargets: Vec<f64>,
}

impl ScoreSet {
    pub fn from_trials(trials: &[TrialPair], scores: &[f64]) -> Self {
        assert_eq!(trials.len(), scores.len());
        let mut s = ScoreSet::default();
        for (t, &v) in trials.iter().zip(scores) {
            if t.is_target {
                s.targets.push(v);
            } else {
                s.nontargets.push(v);
            }
        }
        s
    }
}

/// Cosine score of every trial.
pub fn score_trials(trials: &[TrialPair], embeddings: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
    let get = |id: &str| embeddings.get(id).ok_or_else(|| Error::UnknownSequence(id.to_string()));
    trials.iter().map(|t| cosine_score(get(&t.enroll)?, get(&t.test)?)).collect()
}

/// Equal error rate from a threshold sweep over every distinct score.
///
/// At threshold `t` the false-acceptance rate is the fraction of
/// non-targets `≥ t` and the false-rejection rate the fraction of targets
/// `< t`. The crossing is interpolated linearly between adjacent thresholds.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    if scores.targets.is_empty() || scores.nontargets.is_empty() {
        return Err(Error::Empty("EER needs both target and non-target scores".into()));
    }
    if scores.targets.iter().chain(&scores.nontargets).any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite score".into()));
    }
    let mut tar = scores.targets.clone();
    let mut non = scores.nontargets.clone();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let rates = |t: f64| {
        let far = (non.len() - non.partition_point(|&v| v < t)) as f64 / nn;
        let frr = tar.partition_point(|&v| v < t) as f64 / nt;
        (far, frr)
    };
    let mut prev = (1.0, 0.0);
    for t in thresholds.into_iter().map(Some).chain([None]) {
        let (far, frr) = t.map_or((0.0, 1.0), rates);
        let d = far - frr;
        if d == 0.0 {
            return Ok(far);
        }
        if d < 0.0 {
            let d0 = prev.0 - prev.1;
            let lambda = d0 / (d0 - d);
            return Ok(prev.0 + lambda * (far - prev.0));
        }
        prev = (far, frr);
    }
    unreachable!("the sweep ends with FAR 0 and FRR 1")
}

/// Fisher LDA projection. Inputs are centred on the training mean first.
#[derive(Debug, Clone, PartialEq)]
pub struct Lda {
    pub mean: Vec<f64>,
    /// `[out_dim, dim]`
    pub projection: Array,
}

impl Lda {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.projection;
        (0..p.rows()).map(|r| p.row(r).iter().zip(x).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum()).collect()
    }
}

pub const LDA_RIDGE: f64 = 1e-6;

pub fn lda_fit(embeddings: &[Vec<f64>], labels: &[String], out_dim: usize) -> Result<Lda> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    let dim = embeddings.first().map(Vec::len).ok_or_else(|| Error::Empty("no embeddings for LDA".into()))?;
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if out_dim == 0 || out_dim + 1 > classes.len() || out_dim > dim {
        return Err(Error::Config(format!(
            "LDA output dim {out_dim} must be in 1..={} for {} classes of dim {dim}",
            (classes.len().saturating_sub(1)).min(dim),
            classes.len()
        )));
    }
    let n = embeddings.len() as f64;
    let vecs: Vec<DVector<f64>> = embeddings.iter().map(|e| DVector::from_column_slice(e)).collect();
    let mean = vecs.iter().fold(DVector::zeros(dim), |a, v| a + v) / n;
    let mut sw = DMatrix::<f64>::zeros(dim, dim);
    let mut sb = DMatrix::<f64>::zeros(dim, dim);
    for members in classes.values() {
        let mc = members.iter().fold(DVector::zeros(dim), |a, &i| a + &vecs[i]) / members.len() as f64;
        for &i in members {
            let d = &vecs[i] - &mc;
            sw += &d * d.transpose();
        }
        let d = &mc - &mean;
        sb += (&d * d.transpose()) * members.len() as f64;
    }
    sw /= n;
    sb /= n;
    for k in 0..dim {
        sw[(k, k)] += LDA_RIDGE;
    }
    if !sw.iter().chain(sb.iter()).all(|v| v.is_finite()) {
        return Err(Error::Config("non-finite embedding".into()));
    }
    let chol = sw.cholesky().ok_or_else(|| Error::Singular("within-class scatter".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(dim, dim))
        .ok_or_else(|| Error::Singular("within-class scatter".into()))?;
    let m = &l_inv * sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut proj = Vec::with_capacity(out_dim * dim);
    for &k in order.iter().take(out_dim) {
        let mut v = l_inv.transpose() * eig.eigenvectors.column(k);
        let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v = -v;
        }
        proj.extend(v.iter());
    }
    Ok(Lda { mean: mean.iter().copied().collect(), projection: Array::matrix(out_dim, dim, proj) })
}

/// Reported in place of an infinite ratio.
pub const VARIANCE_RATIO_CAP: f64 = 1e12;

/// Trace of the covariance of per-sequence mean latents over the trace of
/// the average within-sequence covariance. `seq[r]` names the sequence of
/// latent row `r`.
pub fn variance_ratio(latents: &Array, seq: &[usize]) -> Result<f64> {
    if latents.rows() != seq.len() {
        return Err(Error::Shape(format!("{} latent rows but {} sequence labels", latents.rows(), seq.len())));
    }
    let dim = latents.cols();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &s) in seq.iter().enumerate() {
        groups.entry(s).or_default().push(r);
    }
    if groups.len() < 2 {
        return Err(Error::Empty("variance ratio needs at least two sequences".into()));
    }
    let mut means = Vec::with_capacity(groups.len());
    let mut within = 0.0;
    for rows in groups.values() {
        let mut m = vec![0.0; dim];
        for &r in rows {
            for (a, v) in m.iter_mut().zip(latents.row(r)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= rows.len() as f64);
        let ss: f64 =
            rows.iter().map(|&r| latents.row(r).iter().zip(&m).map(|(v, mu)| (v - mu).powi(2)).sum::<f64>()).sum();
        within += ss / rows.len() as f64;
        means.push(m);
    }
    within /= groups.len() as f64;
    let k = means.len() as f64;
    let grand: Vec<f64> = (0..dim).map(|d| means.iter().map(|m| m[d]).sum::<f64>() / k).collect();
    let between: f64 =
        means.iter().map(|m| m.iter().zip(&grand).map(|(a, g)| (a - g).powi(2)).sum::<f64>()).sum::<f64>() / k;
    if within <= 0.0 {
        return Ok(VARIANCE_RATIO_CAP);
    }
    Ok((between / within).min(VARIANCE_RATIO_CAP))
}

/// Fraction of segments whose sampled z₂ picks out their own sequence's
/// row of the s-vector table under the prior softmax.
pub fn sequence_accuracy(model: &FhvaeModel, seqs: &[SequenceRecord], rng: &mut impl Rng) -> Result<f64> {
    let table = &model.table;
    let mu = table.rows();
    let half_sq: Vec<f64> = (0..mu.rows()).map(|j| 0.5 * mu.row(j).iter().map(|v| v * v).sum::<f64>()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for s in seqs {
        let target = table.row_of(&s.id)?;
        let segs = s.partition(model.hp.seg_len);
        if segs.is_empty() {
            continue;
        }
        let lat = extract_latents(&segs, model)?;
        for r in 0..lat.len() {
            let z: Vec<f64> = lat
                .z2_mean
                .row(r)
                .iter()
                .zip(lat.z2_logvar.row(r))
                .map(|(m, lv)| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    m + (0.5 * lv).exp() * e
                })
                .collect();
            let best = (0..mu.rows())
                .map(|j| (j, mu.row(j).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() - half_sq[j]))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(j, _)| j);
            hits += usize::from(best == Some(target));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no segments to classify".into()));
    }
    Ok(hits as f64 / total as f64)
}

pub fn trials_text(trials: &[TrialPair]) -> String {
    let mut s = String::new();
    for t in trials {
        let kind = if t.is_target { "target" } else { "nontarget" };
        let _ = writeln!(s, "{}\t{}\t{kind}", t.enroll, t.test);
    }
    s
}

pub fn parse_trials(text: &str, origin: &Path) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(origin, format!("line {}: {msg}", ln + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected enroll-id, test-id and target|nontarget"));
        }
        let is_target = match f[2] {
            "target" => true,
            "nontarget" => false,
            _ => return Err(bad("trial kind must be target or nontarget")),
        };
        if f[0] == f[1] {
            return Err(bad("self-pair"));
        }
        out.push(TrialPair { enroll: f[0].to_string(), test: f[1].to_string(), is_target });
    }
    Ok(out)
}

pub fn scores_text(trials: &[TrialPair], scores: &[f64]) -> String {
    assert_eq!(trials.len(), scores.len());
    let mut s = String::new();
    for (t, v) in trials.iter().zip(scores) {
        let kind = if t.is_target { "target" } else { "nontarget" };
        let _ = writeln!(s, "{}\t{}\t{kind}\t{v}", t.enroll, t.test);
    }
    s
}

pub fn results_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// One `id<TAB>v₁<TAB>v₂…` line per vector.
pub fn embeddings_text(rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::new();
    for (id, v) in rows {
        s.push_str(id);
        for x in v {
            let _ = write!(s, "\t{x}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_embeddings(text: &str, origin: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(origin, format!("line {}: {msg}", ln + 1));
        let mut f = line.split('\t');
        let id = f.next().unwrap_or_default();
        if id.is_empty() {
            return Err(bad("missing id".into()));
        }
        let v = f.map(|x| x.parse::<f64>().map_err(|e| bad(format!("`{x}`: {e}")))).collect::<Result<Vec<f64>>>()?;
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(bad("expected finite vector components".into()));
        }
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(bad(format!("vector of length {}, expected {}", v.len(), dim.unwrap_or(0))));
        }
        if out.insert(id.to_string(), v).is_some() {
            return Err(bad(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// `id<TAB>label` lines.
pub fn parse_labels(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(origin, format!("line {}: {msg}", ln + 1));
        let (id, label) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>label".into()))?;
        if id.is_empty() || label.is_empty() {
            return Err(bad("empty id or label".into()));
        }
        if out.insert(id.to_string(), label.to_string()).is_some() {
            return Err(bad(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

pub fn labels_text(labels: &BTreeMap<String, String>) -> String {
    labels.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet { targets: t.to_vec(), nontargets: n.to_vec() }
    }

    #[test]
    fn eer_golden() {
        assert_eq!(eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 0.0);
        assert_eq!(eer(&set(&[0.9, 0.7, 0.3], &[0.8, 0.2, 0.1])).unwrap(), 1.0 / 3.0);
        assert!(eer(&set(&[0.2, 0.1], &[0.9, 0.8])).unwrap() >= 0.5);
        assert!(eer(&set(&[], &[0.1])).is_err());
        assert!(eer(&set(&[0.1], &[])).is_err());
    }

    #[test]
    fn eer_interpolates() {
        assert_eq!(eer(&set(&[0.5], &[0.6])).unwrap(), 1.0);
        // FAR−FRR goes 1, 0.5, −0.5 over thresholds 0.3, 0.5, 0.9.
        assert_eq!(eer(&set(&[0.3, 0.9], &[0.5])).unwrap(), 0.5);
        assert_eq!(eer(&set(&[0.5], &[0.5])).unwrap(), 0.5);
    }

    #[test]
    fn trial_counts() {
        let mut labels = BTreeMap::new();
        for s in 0..24 {
            for u in 0..8 {
                labels.insert(format!("s{s:02}u{u}"), format!("s{s:02}"));
            }
        }
        let t = make_trials(&labels);
        assert_eq!(t.len(), 18_336);
        assert_eq!(t.iter().filter(|p| p.is_target).count(), 24 * 28);
        assert!(t.iter().all(|p| p.enroll < p.test));

        let two: BTreeMap<_, _> = [("a", "x"), ("b", "x")].map(|(a, b)| (a.to_string(), b.to_string())).into();
        assert_eq!(make_trials(&two), vec![TrialPair { enroll: "a".into(), test: "b".into(), is_target: true }]);
        let three: BTreeMap<_, _> =
            [("a", "x"), ("b", "y"), ("c", "z")].map(|(a, b)| (a.to_string(), b.to_string())).into();
        let t = make_trials(&three);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|p| !p.is_target));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_score(&[1.0], &[1.0, 1.0]).is_err());
    }

    fn blobs(
        rng: &mut ChaCha8Rng,
        classes: usize,
        per: usize,
        dim: usize,
        spread: f64,
    ) -> (Vec<Vec<f64>>, Vec<String>) {
        let centers: Vec<Vec<f64>> =
            (0..classes).map(|_| (0..dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(mu.iter().map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)).collect());
                y.push(format!("c{c}"));
            }
        }
        (x, y)
    }

    #[test]
    fn lda_two_points() {
        let x = vec![vec![-1.0], vec![-1.001], vec![1.0], vec![1.001]];
        let y: Vec<String> = ["a", "a", "b", "b"].map(String::from).to_vec();
        let lda = lda_fit(&x, &y, 1).unwrap();
        assert_eq!(lda.projection.shape(), &[1, 1]);
        assert!(lda.projection.at(0, 0) > 0.0);
        assert!(lda_fit(&x, &y, 2).is_err());
    }

    #[test]
    fn lda_aligns_with_class_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let c = if i % 2 == 0 { -1.0 } else { 1.0 };
            x.push(vec![c + 0.01 * rng.sample::<f64, _>(StandardNormal), 5.0 * rng.sample::<f64, _>(StandardNormal)]);
            y.push(format!("{}", i % 2));
        }
        let lda = lda_fit(&x, &y, 1).unwrap();
        let w = lda.projection.row(0);
        let cos = w[0] / norm(w);
        assert!((cos.abs() - 1.0).abs() < 1e-4, "{cos}");
    }

    #[test]
    fn lda_does_not_hurt_separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, y) = blobs(&mut rng, 3, 30, 6, 1.5);
        let lda = lda_fit(&x, &y, 2).unwrap();
        let run = |emb: &dyn Fn(&[f64]) -> Vec<f64>| {
            let labels: BTreeMap<String, String> = (0..x.len()).map(|i| (format!("{i:03}"), y[i].clone())).collect();
            let e: BTreeMap<String, Vec<f64>> = (0..x.len()).map(|i| (format!("{i:03}"), emb(&x[i]))).collect();
            let trials = make_trials(&labels);
            let scores = score_trials(&trials, &e).unwrap();
            eer(&ScoreSet::from_trials(&trials, &scores)).unwrap()
        };
        let raw = run(&|v| v.to_vec());
        let proj = run(&|v| lda.project(v));
        assert!(proj <= raw, "{proj} > {raw}");
    }

    #[test]
    fn lda_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = blobs(&mut rng, 4, 10, 3, 1.0);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
        let xr: Vec<Vec<f64>> = x.iter().map(|v| rot(v)).collect();
        let a = lda_fit(&x, &y, 2).unwrap();
        let b = lda_fit(&xr, &y, 2).unwrap();
        for (v, vr) in x.iter().zip(&xr) {
            let (pa, pb) = (a.project(v), b.project(vr));
            for k in 0..2 {
                assert!((pa[k].abs() - pb[k].abs()).abs() < 1e-6 * (1.0 + pa[k].abs()));
            }
        }
    }

    #[test]
    fn variance_ratio_examples() {
        let lat = Array::matrix(4, 1, vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(variance_ratio(&lat, &[0, 0, 1, 1]).unwrap(), VARIANCE_RATIO_CAP);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n) = (20_000, 2);
        let data: Vec<f64> = (0..m * n * 2).map(|_| rng.sample(StandardNormal)).collect();
        let seq: Vec<usize> = (0..m * n).map(|r| r / n).collect();
        let r = variance_ratio(&Array::matrix(m * n, 2, data), &seq).unwrap();
        assert!((r - 1.0).abs() < 0.05, "{r}");

        let (m, n) = (64, 50);
        let mut data = Vec::new();
        for _ in 0..m {
            let mu: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            for _ in 0..n {
                data.extend(mu.iter().map(|c| c + 0.5 * rng.sample::<f64, _>(StandardNormal)));
            }
        }
        let seq: Vec<usize> = (0..m * n).map(|r| r / n).collect();
        let r = variance_ratio(&Array::matrix(m * n, 4, data), &seq).unwrap();
        assert!((r - 4.0).abs() < 0.8, "{r}");
    }

    #[test]
    fn file_formats_round_trip() {
        let trials = vec![
            TrialPair { enroll: "a".into(), test: "b".into(), is_target: true },
            TrialPair { enroll: "a".into(), test: "c".into(), is_target: false },
        ];
        let p = Path::new("t");
        assert_eq!(parse_trials(&trials_text(&trials), p).unwrap(), trials);
        assert_eq!(scores_text(&trials, &[0.5, -0.25]), "a\tb\ttarget\t0.5\na\tc\tnontarget\t-0.25\n");
        assert!(parse_trials("a\ta\ttarget\n", p).is_err());
        let rows = vec![("x".to_string(), vec![0.1, -2.5e-7]), ("y".to_string(), vec![1.0 / 3.0, 4.0])];
        let back = parse_embeddings(&embeddings_text(&rows), p).unwrap();
        assert_eq!(back["x"], rows[0].1);
        assert_eq!(back["y"], rows[1].1);
        assert!(parse_embeddings("x\t1\ny\t1\t2\n", p).is_err());
        let labels = parse_labels("x\tA\ny\tB\n", p).unwrap();
        assert_eq!(labels_text(&labels), "x\tA\ny\tB\n");
        assert_eq!(results_csv(&[("eer".into(), 0.25)]), "metric,value\neer,0.25\n");
    }

    proptest! {
        #[test]
        fn eer_invariant_under_monotone_transform(
            t in prop::collection::vec(-5.0f64..5.0, 1..20),
            n in prop::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let a = eer(&set(&t, &n)).unwrap();
            let f = |v: &f64| (0.7 * v).exp() + 2.0;
            let tt: Vec<f64> = t.iter().map(f).collect();
            let nn: Vec<f64> = n.iter().map(f).collect();
            let b = eer(&set(&tt, &nn)).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            s in 0.01f64..100.0,
        ) {
            let x = cosine_score(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!((cosine_score(&sa, &b).unwrap() - x).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
