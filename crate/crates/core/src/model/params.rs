use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Layer widths. `new` gives the full-size network; tests and gradient
/// checks shrink the hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: [usize; 2],
    pub decoder_hidden: usize,
    pub retriever_hidden: usize,
    pub mixer_hidden: usize,
}

impl ModelDims {
    pub fn new(feature_dim: usize, semantic_dim: usize) -> Self {
        Self {
            feature_dim,
            semantic_dim,
            latent_dim: 100,
            encoder_hidden: [1200, 600],
            decoder_hidden: 600,
            retriever_hidden: 512,
            mixer_hidden: 1024,
        }
    }

    /// Same topology with every hidden layer set to `hidden`.
    pub fn compact(feature_dim: usize, semantic_dim: usize, latent_dim: usize, hidden: usize) -> Self {
        Self {
            feature_dim,
            semantic_dim,
            latent_dim,
            encoder_hidden: [hidden, hidden],
            decoder_hidden: hidden,
            retriever_hidden: hidden,
            mixer_hidden: hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.feature_dim,
            self.semantic_dim,
            self.latent_dim,
            self.encoder_hidden[0],
            self.encoder_hidden[1],
            self.decoder_hidden,
            self.retriever_hidden,
            self.mixer_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("all model widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// The six independently trainable sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    SemanticDecoder,
    VisualDecoder,
    SemanticRetriever,
    VisualRetriever,
    Mixer,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Encoder,
        Group::SemanticDecoder,
        Group::VisualDecoder,
        Group::SemanticRetriever,
        Group::VisualRetriever,
        Group::Mixer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Group::Encoder => "E",
            Group::SemanticDecoder => "D_s",
            Group::VisualDecoder => "D_v",
            Group::SemanticRetriever => "R_s",
            Group::VisualRetriever => "R_v",
            Group::Mixer => "G",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.short_name() == name)
    }

    /// Tensor names and shapes, in storage order.
    pub fn layout(self, d: &ModelDims) -> Vec<(&'static str, (usize, usize))> {
        let two_layer = |input: usize, hidden: usize, output: usize| {
            vec![
                ("fc1.weight", (input, hidden)),
                ("fc1.bias", (1, hidden)),
                ("fc2.weight", (hidden, output)),
                ("fc2.bias", (1, output)),
            ]
        };
        match self {
            Group::Encoder => {
                let [h1, h2] = d.encoder_hidden;
                vec![
                    ("fc1.weight", (d.feature_dim, h1)),
                    ("fc1.bias", (1, h1)),
                    ("fc2.weight", (h1, h2)),
                    ("fc2.bias", (1, h2)),
                    ("mu.weight", (h2, d.latent_dim)),
                    ("mu.bias", (1, d.latent_dim)),
                    ("log_var.weight", (h2, d.latent_dim)),
                    ("log_var.bias", (1, d.latent_dim)),
                ]
            }
            Group::SemanticDecoder => two_layer(d.semantic_dim + d.latent_dim, d.decoder_hidden, d.feature_dim),
            Group::VisualDecoder => two_layer(d.feature_dim + d.latent_dim, d.decoder_hidden, d.feature_dim),
            Group::SemanticRetriever => two_layer(d.feature_dim, d.retriever_hidden, d.semantic_dim),
            Group::VisualRetriever => two_layer(d.feature_dim, d.retriever_hidden, d.feature_dim),
            Group::Mixer => two_layer(d.semantic_dim, d.mixer_hidden, 1),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Subset of [`Group`]s; used both as a freeze set and as a trainable set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet([bool; 6]);

impl GroupSet {
    pub fn all() -> Self {
        Self([true; 6])
    }

    pub fn none() -> Self {
        Self([false; 6])
    }

    pub fn of(groups: &[Group]) -> Self {
        let mut set = Self::none();
        for g in groups {
            set.0[g.index()] = true;
        }
        set
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0[g.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Group> + '_ {
        Group::ALL.into_iter().filter(|g| self.contains(*g))
    }
}

/// Every learnable tensor of the model, grouped by sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct DcvaeParams {
    dims: ModelDims,
    groups: [Vec<Matrix>; 6],
}

/// Tape handles for a bound parameter set, same layout as [`DcvaeParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    groups: [Vec<Var>; 6],
}

impl BoundParams {
    pub fn group(&self, g: Group) -> &[Var] {
        &self.groups[g.index()]
    }
}

impl DcvaeParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialisation for weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let groups = Group::ALL.map(|g| {
            let layout = g.layout(&dims);
            let mut tensors = Vec::with_capacity(layout.len());
            let mut fan_in = 1;
            for (name, (rows, cols)) in layout {
                if name.ends_with("weight") {
                    fan_in = rows;
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
                tensors.push(Matrix::new(rows, cols, data).expect("layout shape"));
            }
            tensors
        });
        Ok(Self { dims, groups })
    }

    pub fn init_seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Builds parameters from explicit tensors, checking them against `dims`.
    pub fn from_groups(dims: ModelDims, groups: [Vec<Matrix>; 6]) -> Result<Self> {
        dims.validate()?;
        for g in Group::ALL {
            let layout = g.layout(&dims);
            let tensors = &groups[g.index()];
            if tensors.len() != layout.len() {
                return Err(Error::dim("DcvaeParams::from_groups", (layout.len(), 0), (tensors.len(), 0)));
            }
            for ((_, shape), t) in layout.iter().zip(tensors) {
                if t.shape() != *shape {
                    return Err(Error::dim("DcvaeParams::from_groups", *shape, t.shape()));
                }
            }
        }
        Ok(Self { dims, groups })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn group(&self, g: Group) -> &[Matrix] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [Matrix] {
        &mut self.groups[g.index()]
    }

    pub fn tensor_names(g: Group, dims: &ModelDims) -> Vec<String> {
        g.layout(dims)
            .into_iter()
            .map(|(name, _)| format!("{}.{}", g.short_name(), name))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().flatten().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(Matrix::is_finite)
    }

    /// Zeroes the weight of the last layer of `g`, so the group outputs its
    /// final bias. For the encoder both heads are zeroed.
    pub fn zero_output_layer(&mut self, g: Group) {
        let tensors = self.group_mut(g);
        let n = tensors.len();
        let tail = if g == Group::Encoder { n - 4..n } else { n - 2..n };
        for t in &mut tensors[tail] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records the tensors as tape leaves; groups outside `trainable` become
    /// constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: GroupSet) -> BoundParams {
        let groups = Group::ALL.map(|g| {
            self.group(g)
                .iter()
                .map(|m| {
                    if trainable.contains(g) {
                        tape.param(m.clone())
                    } else {
                        tape.constant(m.clone())
                    }
                })
                .collect()
        });
        BoundParams { groups }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_layout_and_bounds() {
        let dims = ModelDims::compact(16, 4, 8, 12);
        let p = DcvaeParams::init_seeded(dims, 3).unwrap();
        for g in Group::ALL {
            let layout = g.layout(&dims);
            assert_eq!(p.group(g).len(), layout.len());
            for ((_, shape), t) in layout.iter().zip(p.group(g)) {
                assert_eq!(t.shape(), *shape);
            }
        }
        let w = &p.group(Group::Encoder)[0];
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(p, DcvaeParams::init_seeded(dims, 3).unwrap());
        assert_ne!(p, DcvaeParams::init_seeded(dims, 4).unwrap());
    }

    #[test]
    fn full_width_layout() {
        let d = ModelDims::new(640, 300);
        let enc = Group::Encoder.layout(&d);
        assert_eq!(enc[0].1, (640, 1200));
        assert_eq!(enc[2].1, (1200, 600));
        assert_eq!(enc[4].1, (600, 100));
        assert_eq!(Group::SemanticDecoder.layout(&d)[0].1, (400, 600));
        assert_eq!(Group::VisualDecoder.layout(&d)[0].1, (740, 600));
        assert_eq!(Group::SemanticRetriever.layout(&d)[2].1, (512, 300));
        assert_eq!(Group::Mixer.layout(&d)[2].1, (1024, 1));
    }

    #[test]
    fn group_registry_names() {
        let names: Vec<_> = Group::ALL.iter().map(|g| g.short_name()).collect();
        assert_eq!(names, ["E", "D_s", "D_v", "R_s", "R_v", "G"]);
        assert_eq!(Group::from_short_name("R_v"), Some(Group::VisualRetriever));
        let set = GroupSet::of(&[Group::Encoder, Group::VisualDecoder]);
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![Group::Encoder, Group::VisualDecoder]);
        assert!(GroupSet::none().is_empty());
    }

    #[test]
    fn zero_width_rejected() {
        let mut d = ModelDims::compact(4, 2, 2, 3);
        d.mixer_hidden = 0;
        assert!(DcvaeParams::init_seeded(d, 0).is_err());
    }
}
