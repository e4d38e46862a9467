//! Seeded synthetic benchmark: Gaussian class clusters with semantics that
//! are a noisy linear image of the class means.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use dcvae_core::episodic::{FeatureBank, Split};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_classes: usize,
    pub test_classes: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the class means, drawn from `N(0, I)`.
    pub separation: f64,
    /// Within-class variance.
    pub noise_var: f64,
    /// Variance of the noise added to semantic vectors.
    pub semantic_noise_var: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_classes: 64,
            test_classes: 20,
            feature_dim: 64,
            semantic_dim: 16,
            train_per_class: 200,
            test_per_class: 30,
            separation: 0.15,
            noise_var: 0.1,
            semantic_noise_var: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("train_classes", self.train_classes),
            ("test_classes", self.test_classes),
            ("feature_dim", self.feature_dim),
            ("semantic_dim", self.semantic_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("synth.{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("separation", self.separation),
            ("noise_var", self.noise_var),
            ("semantic_noise_var", self.semantic_noise_var),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("synth.{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

pub struct SynthBanks {
    pub train: FeatureBank,
    pub test: FeatureBank,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn synth_banks(cfg: &SynthConfig) -> Result<SynthBanks, CliError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, s) = (cfg.feature_dim, cfg.semantic_dim);
    // fixed projection, scaled so noiseless semantics have unit variance
    let gain = if cfg.separation > 0.0 { 1.0 / cfg.separation } else { 1.0 };
    let map: Vec<Vec<f64>> = (0..s).map(|_| normal_vec(&mut rng, d, gain / (d as f64).sqrt())).collect();
    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).expect("valid std");
    let sem_noise = Normal::new(0.0, cfg.semantic_noise_var.sqrt()).expect("valid std");

    let mut make = |split: Split, prefix: &str, classes: usize, per_class: usize| {
        let mut feats = Vec::with_capacity(classes * per_class);
        let mut sems = BTreeMap::new();
        for c in 0..classes {
            let name = format!("{prefix}{c:03}");
            let mean = normal_vec(&mut rng, d, cfg.separation);
            let sem: Vec<f64> = map
                .iter()
                .map(|row| row.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>() + sem_noise.sample(&mut rng))
                .collect();
            sems.insert(name.clone(), sem);
            for _ in 0..per_class {
                let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
                feats.push((name.clone(), x));
            }
        }
        FeatureBank::from_named(split, feats, sems.into_iter().collect()).map_err(CliError::from)
    };
    let train = make(Split::Train, "train", cfg.train_classes, cfg.train_per_class)?;
    let test = make(Split::Test, "test", cfg.test_classes, cfg.test_per_class)?;
    Ok(SynthBanks { train, test })
}
