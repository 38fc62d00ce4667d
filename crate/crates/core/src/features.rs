//! Audio front-end and feature storage: 16 kHz WAV or SPHERE input, log-mel filterbank
//! and log-magnitude spectra, the `FBNK` matrix file and corpus manifests.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{segment_starts, NormStats, SequenceRecord};
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LEN: usize = 400;
pub const HOP: usize = 160;
pub const FBANK_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const LOGSPEC_FFT: usize = 400;
pub const LOGSPEC_DIM: usize = 200;
pub const LOG_FLOOR: f64 = 1e-10;

/// Tag stored in feature files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Fbank80,
    Logspec200,
    Z1Mean,
    Z1Logvar,
    Z2Mean,
    Z2Logvar,
    SVec,
    /// Frames drawn from the synthetic generator.
    Synthetic,
}

impl FeatureKind {
    pub fn tag(self) -> u8 {
        match self {
            FeatureKind::Fbank80 => 0,
            FeatureKind::Logspec200 => 1,
            FeatureKind::Z1Mean => 2,
            FeatureKind::Z1Logvar => 3,
            FeatureKind::Z2Mean => 4,
            FeatureKind::Z2Logvar => 5,
            FeatureKind::SVec => 6,
            FeatureKind::Synthetic => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => FeatureKind::Fbank80,
            1 => FeatureKind::Logspec200,
            2 => FeatureKind::Z1Mean,
            3 => FeatureKind::Z1Logvar,
            4 => FeatureKind::Z2Mean,
            5 => FeatureKind::Z2Logvar,
            6 => FeatureKind::SVec,
            7 => FeatureKind::Synthetic,
            _ => return None,
        })
    }

    /// Fixed width for spectral kinds.
    pub fn width(self) -> Option<usize> {
        match self {
            FeatureKind::Fbank80 => Some(N_MELS),
            FeatureKind::Logspec200 => Some(LOGSPEC_DIM),
            _ => None,
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbank80" => Ok(FeatureKind::Fbank80),
            "logspec200" => Ok(FeatureKind::Logspec200),
            other => Err(Error::Config(format!("unknown feature kind `{other}` (expected fbank80 or logspec200)"))),
        }
    }
}

/// Frames plus the kind tag they were produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub kind: FeatureKind,
    /// `[n_frames, F]`
    pub frames: Array,
}

/// Mono samples in `[-1, 1]` from a 16-bit PCM file at 16 kHz; for
/// multi-channel files the first channel is kept.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Unsupported(format!(
            "{}: only 16-bit PCM is supported ({:?}, {} bits)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Unsupported(format!(
            "{}: sample rate {} Hz, expected {} Hz (resample first)",
            path.display(),
            spec.sample_rate,
            SAMPLE_RATE
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let mut out = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.samples::<i16>().enumerate() {
        let s = s.map_err(|e| wav_error(path, e))?;
        if i % channels == 0 {
            out.push(s as f64 / 32768.0);
        }
    }
    Ok((out, spec.sample_rate))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Reads RIFF WAV or uncompressed NIST SPHERE (the format TIMIT ships in),
/// chosen by the file's magic bytes. Both must hold 16-bit PCM at 16 kHz.
pub fn read_audio(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let n = f.read(&mut magic).map_err(|e| Error::io(path, e))?;
        if n < 4 {
            return Err(Error::format(path, "file too short for an audio header"));
        }
    }
    if &magic == b"NIST_1A\n" {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_sphere(&bytes, path)
    } else {
        read_wav(path)
    }
}

/// Decodes a NIST SPHERE file held in memory.
pub fn parse_sphere(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, u32)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != b"NIST_1A\n" {
        return Err(bad("missing NIST_1A header".into()));
    }
    let head_len: usize = std::str::from_utf8(&bytes[8..16])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("unreadable SPHERE header length".into()))?;
    if head_len < 16 || head_len > bytes.len() {
        return Err(bad(format!("SPHERE header length {head_len} out of range")));
    }
    let header = String::from_utf8_lossy(&bytes[16..head_len]);
    let mut fields = std::collections::BTreeMap::new();
    for line in header.lines() {
        let line = line.trim();
        if line == "end_head" {
            break;
        }
        let mut parts = line.splitn(3, ' ');
        if let (Some(k), Some(_), Some(v)) = (parts.next(), parts.next(), parts.next()) {
            fields.insert(k.to_string(), v.trim().to_string());
        }
    }
    let int = |k: &str, default: Option<u64>| -> Result<u64> {
        match fields.get(k) {
            Some(v) => v.parse().map_err(|_| bad(format!("SPHERE field {k} = `{v}` is not an integer"))),
            None => default.ok_or_else(|| bad(format!("SPHERE header lacks {k}"))),
        }
    };
    let rate = int("sample_rate", None)? as u32;
    let width = int("sample_n_bytes", Some(2))?;
    let channels = int("channel_count", Some(1))?.max(1) as usize;
    if let Some(coding) = fields.get("sample_coding") {
        if !coding.starts_with("pcm") || coding.contains("shorten") {
            return Err(Error::Unsupported(format!(
                "{}: SPHERE sample coding `{coding}` (decompress to plain PCM first)",
                path.display()
            )));
        }
    }
    if width != 2 {
        return Err(Error::Unsupported(format!("{}: only 16-bit SPHERE samples are supported", path.display())));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::Unsupported(format!(
            "{}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz (resample first)",
            path.display()
        )));
    }
    let big_endian = match fields.get("sample_byte_format").map(String::as_str) {
        None | Some("01") => false,
        Some("10") => true,
        Some(other) => return Err(bad(format!("unknown sample_byte_format `{other}`"))),
    };
    let data = &bytes[head_len..];
    let available = data.len() / 2 / channels;
    let count = (int("sample_count", Some(available as u64))? as usize).min(available);
    let out = (0..count)
        .map(|i| {
            let b = [data[2 * i * channels], data[2 * i * channels + 1]];
            let v = if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) };
            v as f64 / 32768.0
        })
        .collect();
    Ok((out, rate))
}

/// Writes mono 16-bit PCM; samples are clipped to `[-1, 1)`.
pub fn write_wav(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let spec =
        hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

pub fn n_frames(n_samples: usize) -> usize {
    if n_samples < WIN_LEN {
        0
    } else {
        (n_samples - WIN_LEN) / HOP + 1
    }
}

fn hamming() -> Vec<f64> {
    (0..WIN_LEN).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (WIN_LEN - 1) as f64).cos()).collect()
}

/// Windowed spectra, `nfft / 2 + 1` bins per frame.
fn spectra(samples: &[f64], nfft: usize) -> Vec<Vec<Complex<f64>>> {
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let win = hamming();
    (0..n_frames(samples.len()))
        .map(|f| {
            let frame = &samples[f * HOP..f * HOP + WIN_LEN];
            let mut buf: Vec<Complex<f64>> =
                (0..nfft).map(|i| Complex::new(if i < WIN_LEN { frame[i] * win[i] } else { 0.0 }, 0.0)).collect();
            fft.process(&mut buf);
            buf.truncate(nfft / 2 + 1);
            buf
        })
        .collect()
}

fn check_rate(rate: u32) -> Result<()> {
    if rate != SAMPLE_RATE {
        return Err(Error::Unsupported(format!("sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")));
    }
    Ok(())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filter weights, `[n_mels, nfft/2 + 1]`, with edges evenly
/// spaced on the mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(n_mels: usize, nfft: usize, rate: u32) -> Array {
    let nyquist = rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let bins = nfft / 2 + 1;
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * rate as f64 / nfft as f64;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            w[m * bins + k] = v;
        }
    }
    Array::matrix(n_mels, bins, w)
}

/// Centre frequencies of the mel filters in Hz.
pub fn mel_centers(n_mels: usize, rate: u32) -> Vec<f64> {
    let top = hz_to_mel(rate as f64 / 2.0);
    (1..=n_mels).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

/// 80-dimensional log mel filterbank energies every 10 ms.
pub fn fbank(samples: &[f64], rate: u32) -> Result<FrameMatrix> {
    check_rate(rate)?;
    let bank = mel_filterbank(N_MELS, FBANK_FFT, rate);
    let bins = FBANK_FFT / 2 + 1;
    let specs = spectra(samples, FBANK_FFT);
    let mut out = Vec::with_capacity(specs.len() * N_MELS);
    for spec in &specs {
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        for m in 0..N_MELS {
            let row = &bank.data()[m * bins..(m + 1) * bins];
            let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(FrameMatrix { kind: FeatureKind::Fbank80, frames: Array::matrix(specs.len(), N_MELS, out) })
}

/// 200-dimensional log magnitude spectrum (400-point FFT, DC bin dropped).
pub fn logspec(samples: &[f64], rate: u32) -> Result<FrameMatrix> {
    check_rate(rate)?;
    let specs = spectra(samples, LOGSPEC_FFT);
    let mut out = Vec::with_capacity(specs.len() * LOGSPEC_DIM);
    for spec in &specs {
        out.extend(spec[1..=LOGSPEC_DIM].iter().map(|c| c.norm().max(LOG_FLOOR).ln()));
    }
    Ok(FrameMatrix { kind: FeatureKind::Logspec200, frames: Array::matrix(specs.len(), LOGSPEC_DIM, out) })
}

pub fn extract(samples: &[f64], rate: u32, kind: FeatureKind) -> Result<FrameMatrix> {
    match kind {
        FeatureKind::Fbank80 => fbank(samples, rate),
        FeatureKind::Logspec200 => logspec(samples, rate),
        other => Err(Error::Unsupported(format!("{other:?} is not an audio feature"))),
    }
}

/// How a frame matrix is cut into T-frame segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    /// Consecutive non-overlapping windows.
    Partition,
    /// Windows every `stride` frames.
    Train { stride: usize },
}

/// Segments and their frame ranges; a trailing remainder is dropped.
pub fn segment(frames: &Array, seg_len: usize, mode: SegmentMode) -> Result<Vec<(Array, std::ops::Range<usize>)>> {
    let stride = match mode {
        SegmentMode::Partition => seg_len,
        SegmentMode::Train { stride } => stride,
    };
    if seg_len == 0 || stride == 0 {
        return Err(Error::Config("segment length and stride must be positive".into()));
    }
    let f = frames.cols();
    Ok(segment_starts(frames.rows(), seg_len, stride)
        .into_iter()
        .map(|s| {
            let data = frames.data()[s * f..(s + seg_len) * f].to_vec();
            (Array::matrix(seg_len, f, data), s..s + seg_len)
        })
        .collect())
}

const FBNK_MAGIC: &[u8; 4] = b"FBNK";

pub fn feature_bytes(m: &FrameMatrix) -> Vec<u8> {
    let (n, d) = (m.frames.rows(), m.frames.cols());
    let mut out = Vec::with_capacity(13 + 4 * n * d);
    out.extend_from_slice(FBNK_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(m.kind.tag());
    for &v in m.frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_features(bytes: &[u8], path: &Path) -> Result<FrameMatrix> {
    if bytes.len() < 13 || &bytes[..4] != FBNK_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let kind = FeatureKind::from_tag(bytes[12])
        .ok_or_else(|| Error::format(path, format!("unknown kind tag {}", bytes[12])))?;
    let payload = &bytes[13..];
    if payload.len() != n * d * 4 {
        return Err(Error::format(path, format!("payload of {} bytes for {n} x {d} frames", payload.len())));
    }
    let data: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite feature value"));
    }
    Ok(FrameMatrix { kind, frames: Array::matrix(n, d, data) })
}

pub fn write_features(path: &Path, m: &FrameMatrix) -> Result<()> {
    fs::write(path, feature_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FrameMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes, path)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Option<String>,
}

/// `id <TAB> path <TAB> optional-label` lines; relative paths are resolved
/// against `base`.
pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::format(origin, format!("line {}: expected `id<TAB>path[<TAB>label]`", lineno + 1)));
        }
        let id = fields[0].to_string();
        if id.contains('\n') || !seen.insert(id.clone()) {
            return Err(Error::format(origin, format!("line {}: duplicate id `{id}`", lineno + 1)));
        }
        let p = Path::new(fields[1]);
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let label = fields.get(2).filter(|l| !l.is_empty()).map(|l| l.to_string());
        out.push(ManifestEntry { id, path, label });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, path)
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.id);
        s.push('\t');
        s.push_str(&e.path.to_string_lossy());
        if let Some(l) = &e.label {
            s.push('\t');
            s.push_str(l);
        }
        s.push('\n');
    }
    s
}

/// File name of the index inside a feature directory.
pub const INDEX: &str = "manifest.tsv";

/// Sequences loaded from a feature directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seqs: Vec<SequenceRecord>,
    pub kind: Option<FeatureKind>,
    pub normalized: bool,
}

impl Corpus {
    pub fn new(seqs: Vec<SequenceRecord>, kind: Option<FeatureKind>) -> Self {
        Corpus { seqs, kind, normalized: false }
    }

    /// Applies training-split statistics. Refuses to normalize twice.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        if self.normalized {
            return Err(Error::Config("corpus is already normalized".into()));
        }
        for s in &mut self.seqs {
            if s.frame_dim() != stats.mean.len() {
                return Err(Error::Shape(format!(
                    "sequence `{}` has {} dims, statistics have {}",
                    s.id,
                    s.frame_dim(),
                    stats.mean.len()
                )));
            }
            stats.apply(&mut s.frames);
        }
        self.normalized = true;
        Ok(())
    }

    pub fn labels(&self) -> Vec<(String, Option<String>)> {
        self.seqs.iter().map(|s| (s.id.clone(), s.label.clone())).collect()
    }
}

/// Writes one feature file per sequence plus the index.
pub fn write_corpus(dir: &Path, corpus: &Corpus, kind: FeatureKind) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.seqs.len());
    for (k, s) in corpus.seqs.iter().enumerate() {
        let name = format!("{k:06}.fbnk");
        write_features(&dir.join(&name), &FrameMatrix { kind, frames: s.frames.clone() })?;
        entries.push(ManifestEntry { id: s.id.clone(), path: PathBuf::from(name), label: s.label.clone() });
    }
    let index = dir.join(INDEX);
    let file = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(manifest_text(&entries).as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(&index, e))
}

/// Reads a feature directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let entries = read_manifest(&dir.join(INDEX))?;
    let mut seqs = Vec::with_capacity(entries.len());
    let mut kind = None;
    for e in entries {
        let m = read_features(&e.path)?;
        if kind.is_some_and(|k| k != m.kind) {
            return Err(Error::format(&e.path, "feature kinds differ within a corpus"));
        }
        kind = Some(m.kind);
        seqs.push(SequenceRecord::new(e.id, m.frames, e.label)?);
    }
    Ok(Corpus::new(seqs, kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect()
    }

    #[test]
    fn framing_and_silence() {
        let fb = fbank(&vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        assert_eq!(fb.frames.shape(), &[98, 80]);
        assert!(fb.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        assert_eq!(fbank(&[0.0; 399], SAMPLE_RATE).unwrap().frames.rows(), 0);
        let ls = logspec(&vec![0.0; 1600], SAMPLE_RATE).unwrap();
        assert_eq!(ls.frames.cols(), 200);
        assert!(ls.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        assert!(fbank(&[0.0; 800], 8000).is_err());
    }

    #[test]
    fn fbank_tone_peaks_at_nearest_filter() {
        let fb = fbank(&tone(1000.0, 4000, 0.5), SAMPLE_RATE).unwrap();
        let centers = mel_centers(N_MELS, SAMPLE_RATE);
        let nearest =
            (0..N_MELS).min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs())).unwrap();
        for t in 0..fb.frames.rows() {
            let row = fb.frames.row(t);
            let arg = (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn logspec_tone_peaks_at_bin() {
        for k in [5usize, 25, 100, 180] {
            let ls = logspec(&tone(k as f64 * 40.0, 2000, 0.3), SAMPLE_RATE).unwrap();
            let row = ls.frames.row(2);
            let arg = (0..LOGSPEC_DIM).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, k - 1);
        }
    }

    #[test]
    fn filterbank_shape() {
        let b = mel_filterbank(N_MELS, FBANK_FFT, SAMPLE_RATE);
        assert_eq!(b.shape(), &[80, 257]);
        for m in 0..N_MELS {
            assert!(b.row(m).iter().any(|&w| w > 0.0), "empty filter {m}");
            assert!(b.row(m).iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    fn sphere_bytes(samples: &[i16], big_endian: bool, coding: &str) -> Vec<u8> {
        let order = if big_endian { "10" } else { "01" };
        let head = format!(
            "NIST_1A\n   1024\nsample_count -i {}\nsample_rate -i 16000\nchannel_count -i 1\n\
             sample_n_bytes -i 2\nsample_byte_format -s2 {order}\nsample_coding -s{} {coding}\nend_head\n",
            samples.len(),
            coding.len()
        );
        let mut out = head.into_bytes();
        out.resize(1024, b' ');
        for v in samples {
            out.extend(if big_endian { v.to_be_bytes() } else { v.to_le_bytes() });
        }
        out
    }

    #[test]
    fn sphere_decoding() {
        let samples = [0i16, 1, -1, 16384, -32768, 32767];
        let expect: Vec<f64> = samples.iter().map(|&v| v as f64 / 32768.0).collect();
        for be in [false, true] {
            let (got, rate) = parse_sphere(&sphere_bytes(&samples, be, "pcm"), Path::new("x.wav")).unwrap();
            assert_eq!(rate, SAMPLE_RATE);
            assert_eq!(got, expect);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("si1.wav");
        fs::write(&p, sphere_bytes(&samples, false, "pcm")).unwrap();
        assert_eq!(read_audio(&p).unwrap().0, expect);
        let q = dir.path().join("riff.wav");
        write_wav(&q, &expect, SAMPLE_RATE).unwrap();
        assert_eq!(read_audio(&q).unwrap().0, expect);
        let shorten = sphere_bytes(&samples, false, "pcm,embedded-shorten-v2.00");
        assert!(matches!(parse_sphere(&shorten, &p), Err(Error::Unsupported(_))));
        assert!(parse_sphere(b"RIFF....", &p).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let square: Vec<f64> = (0..16_000).map(|i| if (i / 40) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        write_wav(&p, &square, SAMPLE_RATE).unwrap();
        let (back, rate) = read_wav(&p).unwrap();
        assert_eq!(rate, SAMPLE_RATE);
        assert_eq!(back.len(), 16_000);
        assert_eq!(back.len() as f64 / rate as f64, 1.0);
        assert_eq!(back[0], 32767.0 / 32768.0);
        assert_eq!(back[40], -1.0);
        let q = dir.path().join("b.wav");
        write_wav(&q, &back, SAMPLE_RATE).unwrap();
        assert_eq!(read_wav(&q).unwrap().0, back);
        let r = dir.path().join("c.wav");
        write_wav(&r, &back, 8000).unwrap();
        assert!(matches!(read_wav(&r), Err(Error::Unsupported(_))));
    }

    #[test]
    fn segmentation() {
        let frames = Array::zeros(&[98, 2]);
        let part = segment(&frames, 20, SegmentMode::Partition).unwrap();
        assert_eq!(part.len(), 4);
        assert_eq!(part[3].1, 60..80);
        assert_eq!(segment(&Array::zeros(&[20, 2]), 20, SegmentMode::Partition).unwrap().len(), 1);
        assert_eq!(segment(&frames, 20, SegmentMode::Train { stride: 10 }).unwrap().len(), 8);
        assert!(segment(&Array::zeros(&[5, 2]), 20, SegmentMode::Partition).unwrap().is_empty());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = FrameMatrix {
            kind: FeatureKind::Z2Mean,
            frames: Array::matrix(2, 3, vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]),
        };
        let p = dir.path().join("x.fbnk");
        write_features(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FBNK");
        assert_eq!(bytes.len(), 13 + 24);
        let back = read_features(&p).unwrap();
        assert_eq!(back.kind, FeatureKind::Z2Mean);
        assert_eq!(feature_bytes(&back), bytes);
        assert!(parse_features(&bytes[..20], &p).is_err());
    }

    #[test]
    fn manifests() {
        let base = Path::new("/data");
        let m = parse_manifest("a\tx.wav\tspk1\n\nb\t/abs/y.wav\n", base, Path::new("m")).unwrap();
        assert_eq!(m[0].path, PathBuf::from("/data/x.wav"));
        assert_eq!(m[0].label.as_deref(), Some("spk1"));
        assert_eq!(m[1].label, None);
        assert!(parse_manifest("a\tx\na\ty\n", base, Path::new("m")).is_err());
        assert!(parse_manifest("just-one-field\n", base, Path::new("m")).is_err());
    }

    #[test]
    fn normalization_guard_and_round_trip() {
        let seqs = vec![
            SequenceRecord::new("a", Array::matrix(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]), None).unwrap(),
            SequenceRecord::new("b", Array::matrix(2, 2, vec![4.0, 40.0, 5.0, 50.0]), None).unwrap(),
        ];
        let stats = NormStats::fit(&seqs).unwrap();
        let mut c = Corpus::new(seqs.clone(), None);
        c.normalize(&stats).unwrap();
        let all: Vec<f64> = c.seqs.iter().flat_map(|s| s.frames.data().to_vec()).collect();
        for d in 0..2 {
            let col: Vec<f64> = all.iter().skip(d).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        assert!(c.normalize(&stats).is_err());
        let mut back = c.seqs[1].frames.clone();
        stats.invert(&mut back);
        for (a, b) in back.data().iter().zip(seqs[1].frames.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = vec![
            SequenceRecord::new("u1", Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]), Some("s".into())).unwrap(),
            SequenceRecord::new("u2", Array::matrix(1, 2, vec![5.0, 6.0]), None).unwrap(),
        ];
        write_corpus(dir.path(), &Corpus::new(seqs.clone(), None), FeatureKind::Synthetic).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.seqs, seqs);
        assert_eq!(back.kind, Some(FeatureKind::Synthetic));
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn segment_counts(n in 0usize..400, t in 1usize..40, stride in 1usize..40) {
                let frames = Array::zeros(&[n, 1]);
                let part = segment(&frames, t, SegmentMode::Partition).unwrap().len();
                prop_assert_eq!(part, n / t);
                let train = segment(&frames, t, SegmentMode::Train { stride }).unwrap().len();
                let expect = if n < t { 0 } else { (n - t) / stride + 1 };
                prop_assert_eq!(train, expect);
            }

            #[test]
            fn frame_count_formula(n in 0usize..20_000) {
                let expect = if n < 400 { 0 } else { (n - 400) / 160 + 1 };
                prop_assert_eq!(n_frames(n), expect);
            }
        }
    }
}
