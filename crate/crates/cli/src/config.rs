use std::path::Path;

use anyhow::{bail, Context, Result};
use fhvae::fhvae::HyperParams;
use fhvae::objective::DiscSoftmax;
use fhvae::oracle::{DecoderKind, OracleConfig};
use fhvae::recnet::CellKind;
use fhvae::trainer::TrainConfig;
use serde::Deserialize;

/// Run configuration. Every section is optional and unknown keys are errors.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub z1_dim: usize,
    pub z2_dim: usize,
    /// Taken from the data when absent.
    pub frame_dim: Option<usize>,
    pub seg_len: usize,
    pub var_z1: f64,
    pub var_z2: f64,
    pub var_mu2: f64,
    pub var_mu2_post: f64,
    pub alpha: f64,
    pub cell: String,
    /// Defaults to 256, or 512 for the feed-forward cell.
    pub hidden: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        ModelSection {
            z1_dim: hp.z1_dim,
            z2_dim: hp.z2_dim,
            frame_dim: None,
            seg_len: hp.seg_len,
            var_z1: hp.var_z1,
            var_z2: hp.var_z2,
            var_mu2: hp.var_mu2,
            var_mu2_post: hp.var_mu2_post,
            alpha: hp.alpha,
            cell: hp.cell.to_string(),
            hidden: None,
        }
    }
}

impl ModelSection {
    pub fn hyper_params(&self, data_frame_dim: usize) -> Result<HyperParams> {
        let cell: CellKind = self.cell.parse().context("[model] cell")?;
        let frame_dim = self.frame_dim.unwrap_or(data_frame_dim);
        if frame_dim != data_frame_dim {
            bail!("[model] frame_dim = {frame_dim} but the data has {data_frame_dim}-dim frames");
        }
        let base = HyperParams::for_cell(cell);
        let hp = HyperParams {
            z1_dim: self.z1_dim,
            z2_dim: self.z2_dim,
            frame_dim,
            seg_len: self.seg_len,
            var_z1: self.var_z1,
            var_z2: self.var_z2,
            var_mu2: self.var_mu2,
            var_mu2_post: self.var_mu2_post,
            alpha: self.alpha,
            cell,
            hidden: self.hidden.unwrap_or(base.hidden),
        };
        hp.validate().context("[model]")?;
        Ok(hp)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2: f64,
    pub clip_norm: f64,
    /// Negative rows per batch for a sampled softmax; absent means the full table.
    pub softmax_negatives: Option<usize>,
    /// Training window stride; defaults to the segment length.
    pub stride: Option<usize>,
    /// Standardize frames with training-split statistics.
    pub normalize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            l2: c.l2,
            clip_norm: c.clip_norm,
            softmax_negatives: None,
            stride: None,
            normalize: true,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            l2: self.l2,
            clip_norm: self.clip_norm,
            softmax: match self.softmax_negatives {
                None => DiscSoftmax::Full,
                Some(negatives) => DiscSoftmax::Sampled { negatives },
            },
            seed,
        };
        cfg.validate().context("[train]")?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub speakers: usize,
    pub seqs_per_speaker: usize,
    pub segments: usize,
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
    pub var_seq: f64,
    pub var_x: f64,
    pub decoder: String,
    pub hidden: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        let c = OracleConfig::default();
        OracleSection {
            speakers: c.speakers,
            seqs_per_speaker: c.seqs_per_speaker,
            segments: c.segments,
            dev_speakers: c.dev_speakers,
            dev_segments: c.dev_segments,
            test_speakers: c.test_speakers,
            test_seqs_per_speaker: c.test_seqs_per_speaker,
            test_segments: c.test_segments,
            z1_dim: c.z1_dim,
            z2_dim: c.z2_dim,
            frame_dim: c.frame_dim,
            seg_len: c.seg_len,
            var_z1: c.var_z1,
            var_z2: c.var_z2,
            var_mu2: c.var_mu2,
            var_seq: c.var_seq,
            var_x: c.var_x,
            decoder: "linear".into(),
            hidden: c.hidden,
        }
    }
}

impl OracleSection {
    pub fn oracle_config(&self, seed: u64) -> Result<OracleConfig> {
        let decoder: DecoderKind = self.decoder.parse().context("[oracle] decoder")?;
        let cfg = OracleConfig {
            speakers: self.speakers,
            seqs_per_speaker: self.seqs_per_speaker,
            segments: self.segments,
            dev_speakers: self.dev_speakers,
            dev_segments: self.dev_segments,
            test_speakers: self.test_speakers,
            test_seqs_per_speaker: self.test_seqs_per_speaker,
            test_segments: self.test_segments,
            z1_dim: self.z1_dim,
            z2_dim: self.z2_dim,
            frame_dim: self.frame_dim,
            seg_len: self.seg_len,
            var_z1: self.var_z1,
            var_z2: self.var_z2,
            var_mu2: self.var_mu2,
            var_seq: self.var_seq,
            var_x: self.var_x,
            decoder,
            hidden: self.hidden,
            seed,
        };
        cfg.validate().context("[oracle]")?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        let hp = c.model.hyper_params(80).unwrap();
        assert_eq!(hp, HyperParams::default());
        assert_eq!(c.train.train_config(0).unwrap(), TrainConfig::default());
        assert_eq!(c.oracle.oracle_config(0).unwrap(), OracleConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[model]\nz3_dim = 4\n").unwrap_err();
        assert!(format!("{err:#}").contains("z3_dim"));
        assert!(RunConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn cell_drives_hidden_default() {
        let c = RunConfig::parse("[model]\ncell = \"fc\"\n").unwrap();
        assert_eq!(c.model.hyper_params(80).unwrap().hidden, 512);
        let c = RunConfig::parse("[model]\ncell = \"cnn\"\n").unwrap();
        assert!(c.model.hyper_params(80).is_err());
        let c = RunConfig::parse("[model]\nframe_dim = 40\n").unwrap();
        assert!(c.model.hyper_params(80).is_err());
    }
}
