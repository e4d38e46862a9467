//! Flat `key = value` configuration with dotted keys. Command-line flags of
//! the same names override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dcvae_core::episodic::{AbsenceConfig, AbsenceMode, EpisodeConfig, EvalConfig};
use dcvae_core::model::{FeatureKind, GfcEta, HyperParams, LossTerms, ModelDims};
use dcvae_core::training::PretrainConfig;

use crate::bankfile::BankPaths;
use crate::error::CliError;
use crate::synth::SynthConfig;

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("workers", "1"),
    ("data.train_features", "data/train_features.tsv"),
    ("data.train_semantics", "data/train_semantics.tsv"),
    ("data.test_features", "data/test_features.tsv"),
    ("data.test_semantics", "data/test_semantics.tsv"),
    ("model.checkpoint", "dcvae.ckpt"),
    ("model.latent_dim", "100"),
    ("model.encoder_hidden", "1200,600"),
    ("model.decoder_hidden", "600"),
    ("model.retriever_hidden", "512"),
    ("model.mixer_hidden", "1024"),
    ("hyper.lambda", "10"),
    ("hyper.epsilon", "0.1"),
    ("hyper.lr", "0.0001"),
    ("hyper.synth_count", "100"),
    ("hyper.knn_k", "5"),
    ("hyper.finetune_steps_1shot", "50"),
    ("hyper.finetune_steps_5shot", "100"),
    ("hyper.gfc_eta", "retrieved"),
    ("hyper.loss_terms", "all"),
    ("pretrain.epochs", "30"),
    ("pretrain.batch_size", "64"),
    ("episode.n_way", "5"),
    ("episode.k_shot", "1"),
    ("episode.queries_per_class", "15"),
    ("episode.count", "600"),
    ("absence.eta_s", "0"),
    ("absence.eta_v", "0"),
    ("absence.mode", "random"),
    ("eval.kinds", "x_s+x_hat"),
    ("output.report", "report.csv"),
    ("output.log", "train_log.csv"),
    ("output.checkpoint", "finetuned.ckpt"),
    ("output.features", "synthetic.tsv"),
    ("generate.class", ""),
    ("sweep.axis", ""),
    ("sweep.values", ""),
    ("synth.out_dir", "data"),
    ("synth.train_classes", "64"),
    ("synth.test_classes", "20"),
    ("synth.feature_dim", "64"),
    ("synth.semantic_dim", "16"),
    ("synth.train_per_class", "200"),
    ("synth.test_per_class", "30"),
    ("synth.separation", "0.15"),
    ("synth.noise_var", "0.1"),
    ("synth.semantic_noise_var", "0.01"),
];

/// Raw settings: defaults, then the config file, then overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("`{key} = {raw}`: {}", plain(e))))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Format {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| CliError::Format {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies `--key value` and `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), CliError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument `{arg}`")))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    if !self.values.contains_key(flag) {
                        return Err(CliError::Config(format!("unknown key `{flag}`")));
                    }
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Usage(format!("`--{flag}` needs a value")))?;
                    (flag.to_string(), v.clone())
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }
}

// drops the prefix core configuration errors already carry
fn plain(e: impl std::fmt::Display) -> String {
    let msg = e.to_string();
    msg.strip_prefix("invalid configuration: ").unwrap_or(&msg).to_string()
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|e| CliError::Config(format!("`{key}`: `{v}`: {}", plain(e)))))
        .collect()
}

/// Typed view of the settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub train: BankPaths,
    pub test: BankPaths,
    pub checkpoint: PathBuf,
    pub latent_dim: usize,
    pub encoder_hidden: [usize; 2],
    pub decoder_hidden: usize,
    pub retriever_hidden: usize,
    pub mixer_hidden: usize,
    pub hyper: HyperParams,
    pub pretrain: PretrainConfig,
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub absence: AbsenceConfig,
    pub kinds: Vec<FeatureKind>,
    pub report: PathBuf,
    pub log: PathBuf,
    pub finetuned: PathBuf,
    pub features_out: PathBuf,
    pub generate_class: Option<String>,
    pub sweep_axis: String,
    pub sweep_values: String,
    pub synth: SynthConfig,
    pub synth_dir: PathBuf,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, CliError> {
        let encoder_hidden: Vec<usize> = parse_list("model.encoder_hidden", s.get("model.encoder_hidden"))?;
        let encoder_hidden: [usize; 2] = encoder_hidden
            .try_into()
            .map_err(|_| CliError::Config("`model.encoder_hidden` needs exactly two widths".into()))?;
        let seed: u64 = s.parse("seed")?;
        let hyper = HyperParams {
            lambda_kl: s.parse("hyper.lambda")?,
            epsilon_rc: s.parse("hyper.epsilon")?,
            lr: s.parse("hyper.lr")?,
            synth_count: s.parse("hyper.synth_count")?,
            knn_k: s.parse("hyper.knn_k")?,
            finetune_steps_1shot: s.parse("hyper.finetune_steps_1shot")?,
            finetune_steps_5shot: s.parse("hyper.finetune_steps_5shot")?,
            episodes: s.parse("episode.count")?,
            queries_per_class: s.parse("episode.queries_per_class")?,
            gfc_eta: s.parse::<GfcEta>("hyper.gfc_eta")?,
            loss_terms: LossTerms::parse(s.get("hyper.loss_terms"))
                .map_err(|e| CliError::Config(format!("`hyper.loss_terms`: {}", plain(e))))?,
        };
        hyper.validate()?;
        let kinds = FeatureKind::parse_list(s.get("eval.kinds"))
            .map_err(|e| CliError::Config(format!("`eval.kinds`: {}", plain(e))))?;
        if hyper.synth_count > 0 && kinds.is_empty() {
            return Err(CliError::Config("`eval.kinds` must be nonempty when hyper.synth_count > 0".into()));
        }
        let absence = AbsenceConfig {
            eta_s: s.parse("absence.eta_s")?,
            eta_v: s.parse("absence.eta_v")?,
            mode: s.parse::<AbsenceMode>("absence.mode")?,
        };
        absence.validate()?;
        let episode = EpisodeConfig::new(
            s.parse("episode.n_way")?,
            s.parse("episode.k_shot")?,
            s.parse("episode.queries_per_class")?,
        );
        episode.validate()?;
        let workers: usize = s.parse("workers")?;
        if workers == 0 {
            return Err(CliError::Config("`workers` must be at least 1".into()));
        }
        let class = s.get("generate.class");
        Ok(Self {
            seed,
            workers,
            train: BankPaths {
                features: s.path("data.train_features"),
                semantics: s.path("data.train_semantics"),
            },
            test: BankPaths {
                features: s.path("data.test_features"),
                semantics: s.path("data.test_semantics"),
            },
            checkpoint: s.path("model.checkpoint"),
            latent_dim: s.parse("model.latent_dim")?,
            encoder_hidden,
            decoder_hidden: s.parse("model.decoder_hidden")?,
            retriever_hidden: s.parse("model.retriever_hidden")?,
            mixer_hidden: s.parse("model.mixer_hidden")?,
            hyper,
            pretrain: PretrainConfig {
                epochs: s.parse("pretrain.epochs")?,
                batch_size: s.parse("pretrain.batch_size")?,
                seed,
            },
            episode,
            episodes: s.parse("episode.count")?,
            absence,
            kinds,
            report: s.path("output.report"),
            log: s.path("output.log"),
            finetuned: s.path("output.checkpoint"),
            features_out: s.path("output.features"),
            generate_class: (!class.is_empty()).then(|| class.to_string()),
            sweep_axis: s.get("sweep.axis").to_string(),
            sweep_values: s.get("sweep.values").to_string(),
            synth: SynthConfig {
                train_classes: s.parse("synth.train_classes")?,
                test_classes: s.parse("synth.test_classes")?,
                feature_dim: s.parse("synth.feature_dim")?,
                semantic_dim: s.parse("synth.semantic_dim")?,
                train_per_class: s.parse("synth.train_per_class")?,
                test_per_class: s.parse("synth.test_per_class")?,
                separation: s.parse("synth.separation")?,
                noise_var: s.parse("synth.noise_var")?,
                semantic_noise_var: s.parse("synth.semantic_noise_var")?,
                seed,
            },
            synth_dir: s.path("synth.out_dir"),
        })
    }

    /// Model dimensions for banks of the given widths.
    pub fn dims(&self, feature_dim: usize, semantic_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            semantic_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            retriever_hidden: self.retriever_hidden,
            mixer_hidden: self.mixer_hidden,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episode: self.episode,
            episodes: self.episodes,
            absence: self.absence,
            kinds: self.kinds.clone(),
            seed: self.seed,
            workers: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_protocol() {
        let cfg = RunConfig::from_settings(&Settings::default()).unwrap();
        assert_eq!(cfg.hyper.knn_k, 5);
        assert_eq!(cfg.hyper.synth_count, 100);
        assert_eq!(cfg.episodes, 600);
        assert_eq!(cfg.episode, EpisodeConfig::new(5, 1, 15));
        assert_eq!(cfg.kinds, vec![FeatureKind::Semantic, FeatureKind::Mixed]);
    }

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::default();
        s.apply_text("# comment\nepisode.n_way = 3\nhyper.lambda=100\n", Path::new("c.cfg")).unwrap();
        s.apply_overrides(&["--episode.n_way".into(), "4".into(), "--seed=9".into()]).unwrap();
        let cfg = RunConfig::from_settings(&s).unwrap();
        assert_eq!(cfg.episode.n_way, 4);
        assert_eq!(cfg.hyper.lambda_kl, 100.0);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let mut s = Settings::default();
        let err = s.apply_text("a = 1\nbogus.key = 2\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("c.cfg:1"), "{err}");
        let mut s = Settings::default();
        s.set("absence.eta_s", "0.7").unwrap();
        s.set("absence.eta_v", "0.7").unwrap();
        assert!(RunConfig::from_settings(&s).is_err());
        let mut s = Settings::default();
        s.set("hyper.knn_k", "five").unwrap();
        assert!(RunConfig::from_settings(&s).unwrap_err().to_string().contains("hyper.knn_k"));
    }
}
