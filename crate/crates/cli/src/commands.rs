use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fhvae::data::{Dataset, NormStats, SequenceRecord};
use fhvae::diffcore::Array;
use fhvae::evalkit::{
    eer, embeddings_text, labels_text, lda_fit, make_trials, parse_embeddings, parse_labels, parse_trials, results_csv,
    score_trials, scores_text, sequence_accuracy, variance_ratio, ScoreSet,
};
use fhvae::features::{
    extract as extract_features, read_audio, read_corpus, read_manifest, write_corpus, write_features, Corpus,
    FeatureKind, FrameMatrix,
};
use fhvae::fhvae::{log_prior_mu2, FhvaeModel};
use fhvae::inference::{
    csv_matrix, extract_latents, infer_mu1, infer_svector, pgm_bytes, reconstruct, spectrogram_image,
    svector_from_means, transform_sequence, traverse as traverse_segment, Which,
};
use fhvae::objective::{conditional_rows, SegmentNoise};
use fhvae::oracle::{generate, SequenceTruth};
use fhvae::trainer::{load_checkpoint, log_csv, save_checkpoint, train as fit, Checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::{
    DiagnoseArgs, Embedding, ExtractArgs, Kind, SvectorArgs, SynthArgs, TrainArgs, TransformArgs, TraverseArgs,
    VerifyArgs,
};

/// File listing `id<TAB>label` inside every corpus directory this tool writes.
pub const LABELS: &str = "labels.tsv";

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{flag} {}: no such file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, flag: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{flag} {}: no such directory", path.display());
    }
    Ok(())
}

fn require_parent(path: &Path, flag: &str) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("{flag} {}: parent directory does not exist", path.display())
        }
        _ => Ok(()),
    }
}

fn make_dir(path: &Path, flag: &str) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("{flag} {}: cannot create directory", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path, flag: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("{flag} {}", path.display()))
}

fn load_corpus(dir: &Path, flag: &str) -> Result<Corpus> {
    require_dir(dir, flag)?;
    read_corpus(dir).with_context(|| format!("{flag} {}", dir.display()))
}

fn save_corpus(dir: &Path, corpus: &Corpus, kind: FeatureKind) -> Result<()> {
    write_corpus(dir, corpus, kind).with_context(|| format!("writing corpus {}", dir.display()))?;
    let labels: BTreeMap<String, String> =
        corpus.seqs.iter().filter_map(|s| s.label.clone().map(|l| (s.id.clone(), l))).collect();
    if labels.len() == corpus.seqs.len() {
        write(&dir.join(LABELS), labels_text(&labels))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    require_file(path, "--ckpt")?;
    load_checkpoint(path).with_context(|| format!("--ckpt {}", path.display()))
}

/// Reads a corpus and applies the checkpoint's normalization.
fn model_corpus(ck: &Checkpoint, dir: &Path) -> Result<Corpus> {
    let mut corpus = load_corpus(dir, "--data")?;
    if let Some(norm) = &ck.norm {
        corpus.normalize(norm).with_context(|| format!("--data {}", dir.display()))?;
    }
    let f = ck.model.hp.frame_dim;
    if let Some(s) = corpus.seqs.iter().find(|s| s.frame_dim() != f) {
        bail!("--data {}: sequence `{}` has {}-dim frames, the model expects {f}", dir.display(), s.id, s.frame_dim());
    }
    Ok(corpus)
}

fn find<'a>(corpus: &'a Corpus, id: &str, flag: &str) -> Result<&'a SequenceRecord> {
    corpus.seqs.iter().find(|s| s.id == id).with_context(|| format!("{flag} `{id}`: no such sequence"))
}

fn denormalized(ck: &Checkpoint, mut frames: Array) -> Array {
    if let Some(norm) = &ck.norm {
        norm.invert(&mut frames);
    }
    frames
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    require_file(&a.manifest, "--manifest")?;
    let kind = match a.kind {
        Kind::Fbank80 => FeatureKind::Fbank80,
        Kind::Logspec200 => FeatureKind::Logspec200,
    };
    let entries = read_manifest(&a.manifest).with_context(|| format!("--manifest {}", a.manifest.display()))?;
    make_dir(&a.out, "--out")?;
    let mut seqs = Vec::with_capacity(entries.len());
    for e in entries {
        let (samples, rate) = read_audio(&e.path).with_context(|| format!("--manifest entry `{}`", e.id))?;
        let m = extract_features(&samples, rate, kind).with_context(|| format!("{}", e.path.display()))?;
        log::info!("{}: {} frames", e.id, m.frames.rows());
        seqs.push(SequenceRecord::new(e.id, m.frames, e.label)?);
    }
    let corpus = Corpus::new(seqs, Some(kind));
    save_corpus(&a.out, &corpus, kind)?;
    let stats = NormStats::fit(&corpus.seqs).context("computing feature statistics")?;
    let mut csv = String::from("dim,mean,var\n");
    for (d, (m, v)) in stats.mean.iter().zip(&stats.var).enumerate() {
        csv.push_str(&format!("{d},{m},{v}\n"));
    }
    write(&a.out.join("stats.csv"), csv)
}

fn truth_rows(records: &[SequenceRecord], truth: &[SequenceTruth], pick: impl Fn(&SequenceTruth) -> &Array) -> Corpus {
    let seqs = records
        .iter()
        .zip(truth)
        .map(|(r, t)| SequenceRecord { id: r.id.clone(), frames: pick(t).clone(), label: r.label.clone() })
        .collect();
    Corpus::new(seqs, Some(FeatureKind::Synthetic))
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    require_file(&a.config, "--config")?;
    let cfg = RunConfig::load(&a.config)?;
    let ocfg = cfg.oracle.oracle_config(seed).with_context(|| format!("--config {}", a.config.display()))?;
    make_dir(&a.out, "--out")?;
    let c = generate(&ocfg)?;
    let splits = [("train", &c.train, &c.train_truth), ("dev", &c.dev, &c.dev_truth), ("test", &c.test, &c.test_truth)];
    let mut mu2 = Vec::new();
    for (name, seqs, truth) in splits {
        let kind = FeatureKind::Synthetic;
        save_corpus(&a.out.join(name), &Corpus::new(seqs.clone(), Some(kind)), kind)?;
        let dir = a.out.join("truth").join(name);
        save_corpus(&dir.join("z1"), &truth_rows(seqs, truth, |t| &t.z1), kind)?;
        save_corpus(&dir.join("z2"), &truth_rows(seqs, truth, |t| &t.z2), kind)?;
        mu2.extend(seqs.iter().zip(truth.iter()).map(|(s, t)| (s.id.clone(), t.mu2.clone())));
    }
    write(&a.out.join("truth").join("mu2.tsv"), embeddings_text(&mu2))
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    require_file(&a.config, "--config")?;
    require_dir(&a.data, "--data")?;
    require_dir(&a.dev, "--dev")?;
    require_parent(&a.out, "--out")?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
    require_parent(&log_path, "--log")?;
    let cfg = RunConfig::load(&a.config)?;
    let ctx = || format!("--config {}", a.config.display());
    let tc = cfg.train.train_config(seed).with_context(ctx)?;
    let mut tr = load_corpus(&a.data, "--data")?;
    let mut dv = load_corpus(&a.dev, "--dev")?;
    let dim = tr.seqs.first().map(|s| s.frame_dim()).context("--data: corpus is empty")?;
    let hp = cfg.model.hyper_params(dim).with_context(ctx)?;
    let norm = if cfg.train.normalize {
        let stats = NormStats::fit(&tr.seqs).with_context(|| format!("--data {}", a.data.display()))?;
        tr.normalize(&stats).with_context(|| format!("--data {}", a.data.display()))?;
        dv.normalize(&stats).with_context(|| format!("--dev {}", a.dev.display()))?;
        Some(stats)
    } else {
        None
    };
    let stride = cfg.train.stride.unwrap_or(hp.seg_len);
    let train_ds = Dataset::new(tr.seqs, hp.seg_len, stride).with_context(|| format!("--data {}", a.data.display()))?;
    let dev_ds = Dataset::new(dv.seqs, hp.seg_len, hp.seg_len).with_context(|| format!("--dev {}", a.dev.display()))?;
    log::info!(
        "{} training sequences, {} segments; {} dev sequences",
        train_ds.len(),
        train_ds.num_segments(),
        dev_ds.len()
    );
    let out = fit(&train_ds, &dev_ds, hp, &tc, |_, _| Ok(()))?;
    log::info!("best dev bound at epoch {}", out.best_epoch);
    write(&log_path, log_csv(&out.log))?;
    let ck = Checkpoint { model: out.model, adam: Some(out.adam), norm };
    save_checkpoint(&a.out, &ck).with_context(|| format!("--out {}", a.out.display()))
}

pub fn svector(a: &SvectorArgs) -> Result<()> {
    require_parent(&a.out, "--out")?;
    let ck = load_model(&a.ckpt)?;
    let corpus = model_corpus(&ck, &a.data)?;
    let model = &ck.model;
    let mut rows = Vec::with_capacity(corpus.seqs.len());
    for s in &corpus.seqs {
        let segs = s.partition(model.hp.seg_len);
        if segs.is_empty() {
            log::warn!("sequence `{}` is shorter than one segment; skipped", s.id);
            continue;
        }
        let v = match a.which {
            Embedding::Mu2 => infer_svector(&s.id, &segs, model)?.vector,
            Embedding::Mu1 => infer_mu1(&segs, model)?,
        };
        rows.push((s.id.clone(), v));
    }
    write(&a.out, embeddings_text(&rows))
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    require_file(&a.svectors, "--svectors")?;
    require_file(&a.labels, "--labels")?;
    for (p, flag) in [(&a.lda_svectors, "--lda-svectors"), (&a.lda_labels, "--lda-labels"), (&a.trials, "--trials")] {
        if let Some(p) = p {
            require_file(p, flag)?;
        }
    }
    require_parent(&a.out, "--out")?;
    if let Some(p) = &a.scores {
        require_parent(p, "--scores")?;
    }
    let mut emb = parse_embeddings(&read_text(&a.svectors, "--svectors")?, &a.svectors)?;
    let labels = parse_labels(&read_text(&a.labels, "--labels")?, &a.labels)?;
    if let Some(id) = emb.keys().find(|id| !labels.contains_key(*id)) {
        bail!("--labels {}: no label for `{id}`", a.labels.display());
    }
    if let Some(d) = a.lda {
        let (sv, lb) = (a.lda_svectors.as_ref().unwrap(), a.lda_labels.as_ref().unwrap());
        let train = parse_embeddings(&read_text(sv, "--lda-svectors")?, sv)?;
        let train_labels = parse_labels(&read_text(lb, "--lda-labels")?, lb)?;
        let mut x = Vec::with_capacity(train.len());
        let mut y = Vec::with_capacity(train.len());
        for (id, v) in train {
            let l =
                train_labels.get(&id).with_context(|| format!("--lda-labels {}: no label for `{id}`", lb.display()))?;
            x.push(v);
            y.push(l.clone());
        }
        let lda = lda_fit(&x, &y, d).context("--lda")?;
        for v in emb.values_mut() {
            if v.len() != lda.mean.len() {
                bail!("--svectors: dimension {} does not match the LDA input {}", v.len(), lda.mean.len());
            }
            *v = lda.project(v);
        }
    }
    let trials = match &a.trials {
        Some(p) => parse_trials(&read_text(p, "--trials")?, p)?,
        None => {
            let present: BTreeMap<String, String> = labels.into_iter().filter(|(id, _)| emb.contains_key(id)).collect();
            make_trials(&present)
        }
    };
    let scores = score_trials(&trials, &emb).context("--trials")?;
    let set = ScoreSet::from_trials(&trials, &scores);
    let rate = eer(&set).context("scoring trials")?;
    if let Some(p) = &a.scores {
        write(p, scores_text(&trials, &scores))?;
    }
    let dim = emb.values().next().map_or(0, Vec::len);
    write(
        &a.out,
        results_csv(&[
            ("eer".into(), rate),
            ("trials".into(), trials.len() as f64),
            ("target_trials".into(), set.targets.len() as f64),
            ("nontarget_trials".into(), set.nontargets.len() as f64),
            ("dim".into(), dim as f64),
        ]),
    )
}

fn segment_of(corpus: &Corpus, spec: &str, seg_len: usize) -> Result<Array> {
    let (id, k) = match spec.rsplit_once(':') {
        Some((id, k)) if k.parse::<usize>().is_ok() => (id, k.parse::<usize>().unwrap_or(0)),
        _ => (spec, 0),
    };
    let s = find(corpus, id, "--segment")?;
    let segs = s.partition(seg_len);
    segs.into_iter().nth(k).with_context(|| format!("--segment `{spec}`: sequence has fewer than {} segments", k + 1))
}

pub fn traverse(a: &TraverseArgs) -> Result<()> {
    let ck = load_model(&a.ckpt)?;
    let corpus = model_corpus(&ck, &a.data)?;
    let which: Which = a.which.parse().context("--which")?;
    let seg = segment_of(&corpus, &a.segment, ck.model.hp.seg_len)?;
    let blocks = traverse_segment(&seg, which, a.dim, a.points, &ck.model).context("--dim")?;
    make_dir(&a.out, "--out")?;
    for (i, b) in blocks.into_iter().enumerate() {
        let frames = denormalized(&ck, b);
        write(&a.out.join(format!("point_{i:02}.pgm")), pgm_bytes(&spectrogram_image(std::slice::from_ref(&frames))))?;
        write(&a.out.join(format!("point_{i:02}.csv")), csv_matrix(&frames))?;
    }
    Ok(())
}

/// Images stacked top to bottom, each padded on the right to the widest.
fn stack_images(imgs: &[Array]) -> Array {
    let w = imgs.iter().map(Array::cols).max().unwrap_or(0);
    let h: usize = imgs.iter().map(Array::rows).sum();
    let lo = imgs.iter().flat_map(|i| i.data()).copied().fold(f64::INFINITY, f64::min);
    let mut data = Vec::with_capacity(w * h);
    for img in imgs {
        for r in 0..img.rows() {
            data.extend_from_slice(img.row(r));
            data.extend(std::iter::repeat_n(lo, w - img.cols()));
        }
    }
    Array::matrix(h, w, data)
}

pub fn transform(a: &TransformArgs) -> Result<()> {
    let ck = load_model(&a.ckpt)?;
    let corpus = model_corpus(&ck, &a.data)?;
    let model = &ck.model;
    let seg_len = model.hp.seg_len;
    let target = find(&corpus, &a.target, "--target")?;
    let reference = find(&corpus, &a.reference, "--reference")?;
    let tsegs = target.partition(seg_len);
    let rsegs = reference.partition(seg_len);
    if tsegs.is_empty() {
        bail!("--target `{}`: shorter than one segment", a.target);
    }
    if rsegs.is_empty() {
        bail!("--reference `{}`: shorter than one segment", a.reference);
    }
    let tar = infer_svector(&target.id, &tsegs, model)?;
    let refv = infer_svector(&reference.id, &rsegs, model)?;
    let moved = denormalized(&ck, transform_sequence(&tsegs, &refv, &tar, model)?);
    let recon = denormalized(&ck, reconstruct(&tsegs, model)?);
    let original = denormalized(
        &ck,
        Array::matrix(
            tsegs.len() * seg_len,
            model.hp.frame_dim,
            tsegs.iter().flat_map(|s| s.data().iter().copied()).collect(),
        ),
    );
    make_dir(&a.out, "--out")?;
    let kind = corpus.kind.unwrap_or(FeatureKind::Synthetic);
    write_features(&a.out.join("transformed.fbnk"), &FrameMatrix { kind, frames: moved.clone() })?;
    let grid =
        stack_images(&[spectrogram_image(&[original]), spectrogram_image(&[recon]), spectrogram_image(&[moved])]);
    write(&a.out.join("grid.pgm"), pgm_bytes(&grid))?;
    let svecs: Vec<(String, Vec<f64>)> =
        vec![(tar.id.clone(), tar.vector.clone()), (refv.id.clone(), refv.vector.clone())];
    write(&a.out.join("svectors.tsv"), embeddings_text(&svecs))
}

pub fn diagnose(a: &DiagnoseArgs, seed: u64) -> Result<()> {
    require_parent(&a.out, "--out")?;
    let ck = load_model(&a.ckpt)?;
    let corpus = model_corpus(&ck, &a.data)?;
    let model: &FhvaeModel = &ck.model;
    let hp = &model.hp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut z1, mut z2, mut seq) = (Vec::new(), Vec::new(), Vec::new());
    let mut terms = [0.0f64; 5];
    let mut segments = 0usize;
    for (i, s) in corpus.seqs.iter().enumerate() {
        let segs = s.partition(hp.seg_len);
        if segs.is_empty() {
            continue;
        }
        let lat = extract_latents(&segs, model)?;
        z1.extend_from_slice(lat.z1_mean.data());
        z2.extend_from_slice(lat.z2_mean.data());
        seq.extend(std::iter::repeat_n(i, segs.len()));
        let mu = svector_from_means(&lat.z2_mean, hp);
        let prior = log_prior_mu2(&mu, hp) / segs.len() as f64;
        let rows = Array::matrix(segs.len(), hp.z2_dim, segs.iter().flat_map(|_| mu.iter().copied()).collect());
        let noise = SegmentNoise::draw(segs.len(), hp, &mut rng);
        let refs: Vec<&Array> = segs.iter().collect();
        for b in conditional_rows(model, &refs, &rows, &noise)? {
            terms[0] += b.recon_loglik;
            terms[1] += b.kl_z1;
            terms[2] += b.kl_z2;
            terms[3] += prior;
            terms[4] += b.total + prior;
        }
        segments += segs.len();
    }
    if segments == 0 {
        bail!("--data {}: no complete segments", a.data.display());
    }
    let n = segments as f64;
    let mut out = vec![
        ("sequences".to_string(), corpus.seqs.len() as f64),
        ("segments".to_string(), n),
        ("variance_ratio_z1".to_string(), variance_ratio(&Array::matrix(segments, hp.z1_dim, z1), &seq)?),
        ("variance_ratio_z2".to_string(), variance_ratio(&Array::matrix(segments, hp.z2_dim, z2), &seq)?),
        ("recon_loglik".to_string(), terms[0] / n),
        ("kl_z1".to_string(), terms[1] / n),
        ("kl_z2".to_string(), terms[2] / n),
        ("log_prior_mu2".to_string(), terms[3] / n),
        ("segment_bound".to_string(), terms[4] / n),
    ];
    if corpus.seqs.iter().all(|s| model.table.row_of(&s.id).is_ok()) {
        out.push(("sequence_accuracy".to_string(), sequence_accuracy(model, &corpus.seqs, &mut rng)?));
    } else {
        log::warn!("--data holds sequences outside the training table; sequence accuracy skipped");
    }
    write(&a.out, results_csv(&out))
}
