//! Library side of the `segedit` binary: exit codes, config loading, the
//! evaluation harness and dataset export.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segedit_core::classifier::SynthClassifier;
use segedit_core::image::ImageBuffer;
use segedit_core::io::{write_image, write_segmap};
use segedit_core::metrics::{extract_features, extract_probabilities, frechet_distance, inception_score, FeatureBackend};
use segedit_core::synth::{caption_for, make_synthetic_dataset, COLORS};
use segedit_core::{Error, Result};
use segedit_editnet::engine::EditEngine;
use segedit_editnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RUN_REPORT_VERSION: u32 = 1;
pub const EVAL_REPORT_VERSION: u32 = 1;

/// Offset between an eval seed and the seed of its rendered test split, so
/// `--seed` values shared with training configs do not reuse training scenes.
pub const TEST_SPLIT_SALT: u64 = 0x7E57_5EED;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Numeric { .. } => 3,
        Error::Backend { .. } => 4,
        Error::NoTarget(_) | Error::EmptyRegion(_) => 1,
        Error::Shape(_)
        | Error::Parameter(_)
        | Error::Ambiguity(_)
        | Error::Palette(_)
        | Error::Codec(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::AtStage { .. } => 2,
    }
}

/// Reads a training config: JSON for `.json` files, TOML otherwise. The
/// config is validated.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    /// Inception score of the edited images under the feature backend.
    pub is: f64,
    /// FID between edited images and the unedited renders.
    pub fid: f64,
    /// FID of the renders against themselves; a sanity floor.
    pub fid_real_real: f64,
    pub n: usize,
    pub seed: u64,
    pub backend: String,
}

/// Instructions for the test split: the target's shape with a uniformly
/// drawn color.
pub fn eval_captions(samples: &[segedit_core::synth::SynthSample], seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| caption_for(s.target().shape, rng.gen_range(0..COLORS.len())))
        .collect()
}

/// Edits `n` rendered test scenes and scores them against the renders.
pub fn eval_report(engine: &EditEngine, options: &EvalOptions) -> Result<EvalReport> {
    if options.n < 2 {
        return Err(Error::Parameter("eval needs n ≥ 2".into()));
    }
    let split = make_synthetic_dataset(options.n, options.seed.wrapping_add(TEST_SPLIT_SALT), options.size);
    let captions = eval_captions(&split, options.seed);
    let mut edited = Vec::with_capacity(split.len());
    for (s, text) in split.iter().zip(&captions) {
        edited.push(engine.edit(&s.image, text, None, None)?.output);
    }
    let real: Vec<ImageBuffer> = split.into_iter().map(|s| s.image).collect();
    let backend = SynthClassifier;
    let fake_features = extract_features(&edited, &backend)?;
    let real_features = extract_features(&real, &backend)?;
    Ok(EvalReport {
        version: EVAL_REPORT_VERSION,
        is: inception_score(&extract_probabilities(&edited, &backend)?)?,
        fid: frechet_distance(&fake_features, &real_features)?,
        fid_real_real: frechet_distance(&real_features, &real_features)?,
        n: options.n,
        seed: options.seed,
        backend: backend.name().to_string(),
    })
}

/// One line of `captions.jsonl` written by [`write_synth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub index: usize,
    pub image: String,
    pub seg: String,
    pub caption: String,
    pub target: String,
}

/// Writes `NNNN.png`, `NNNN_seg.png` (+ `.json` palette) and
/// `captions.jsonl` into `out`.
pub fn write_synth(n: usize, seed: u64, size: usize, out: &Path) -> Result<()> {
    if n == 0 || size < 16 {
        return Err(Error::Parameter("synth needs n ≥ 1 and size ≥ 16".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut lines = String::new();
    for (i, s) in make_synthetic_dataset(n, seed, size).into_iter().enumerate() {
        let image = format!("{i:04}.png");
        let seg = format!("{i:04}_seg.png");
        write_image(&s.image, out.join(&image))?;
        write_segmap(&s.seg, out.join(&seg))?;
        let record = SynthRecord {
            index: i,
            image,
            seg,
            caption: s.caption,
            target: s.target_label,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    std::fs::write(out.join("captions.jsonl"), lines)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use segedit_core::backend::Backends;
    use segedit_core::Stage;
    use segedit_editnet::model::{init_generator, ModelConfig};

    #[test]
    fn exit_codes_follow_the_root_error() {
        let numeric = Error::Numeric {
            component: "l_g".into(),
            detail: "nan".into(),
        };
        assert_eq!(exit_code(&numeric.at(Stage::Manipulation)), 3);
        let backend = Error::Backend {
            backend: "seg".into(),
            detail: "died".into(),
        };
        assert_eq!(exit_code(&backend), 4);
        assert_eq!(exit_code(&Error::Parameter("x".into())), 2);
        assert_eq!(exit_code(&Error::NoTarget("x".into()).at(Stage::Detection)), 1);
    }

    #[test]
    fn train_config_formats() {
        let tmp = tempfile::tempdir().unwrap();
        let toml_path = tmp.path().join("c.toml");
        std::fs::write(&toml_path, "epochs_main = 3\n[loss_weights]\nreg = 0.5\n").unwrap();
        let c = load_train_config(&toml_path).unwrap();
        assert_eq!((c.epochs_main, c.loss_weights.reg, c.loss_weights.adv), (3, 0.5, 1.0));
        let json_path = tmp.path().join("c.json");
        std::fs::write(&json_path, r#"{"batch_size": 4}"#).unwrap();
        assert_eq!(load_train_config(&json_path).unwrap().batch_size, 4);
        std::fs::write(&json_path, r#"{"batch_size": 0}"#).unwrap();
        assert!(matches!(load_train_config(&json_path), Err(Error::Parameter(_))));
        std::fs::write(&toml_path, "epochz = 3\n").unwrap();
        assert!(matches!(load_train_config(&toml_path), Err(Error::Parameter(_))));
    }

    #[test]
    fn eval_is_deterministic_and_real_fid_vanishes() {
        let config = ModelConfig {
            working_size: 16,
            stage_channels: [4, 4, 4],
            embed_dim: 8,
            noise_dim: 4,
            residual_blocks: 1,
        };
        let engine = EditEngine::new(init_generator(&config, 2).unwrap(), Backends::toy());
        let options = EvalOptions { n: 10, seed: 4, size: 48 };
        let a = eval_report(&engine, &options).unwrap();
        assert_eq!(a, eval_report(&engine, &options).unwrap());
        assert!(a.fid_real_real <= 1e-6, "{}", a.fid_real_real);
        assert!(a.fid >= 0.0 && a.is >= 1.0);
        let keys: Vec<String> = serde_json::to_value(&a).unwrap().as_object().unwrap().keys().cloned().collect();
        for k in ["is", "fid", "n", "seed"] {
            assert!(keys.contains(&k.to_string()));
        }
    }

    #[test]
    fn synth_export() {
        let tmp = tempfile::tempdir().unwrap();
        write_synth(3, 1, 32, tmp.path()).unwrap();
        let lines = std::fs::read_to_string(tmp.path().join("captions.jsonl")).unwrap();
        let records: Vec<SynthRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 3);
        let seg = segedit_core::io::read_segmap(tmp.path().join(&records[1].seg)).unwrap();
        assert_eq!(seg, make_synthetic_dataset(3, 1, 32)[1].seg);
    }
}
