use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Interned class label. Ids follow the lexicographic order of class names,
/// so comparing labels compares names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label(pub u32);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Labeled visual features plus one semantic vector per class.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    split: Split,
    names: Vec<String>,
    labels: Vec<Label>,
    features: Matrix,
    semantics: BTreeMap<Label, Vec<f64>>,
    by_class: BTreeMap<Label, Vec<usize>>,
}

impl FeatureBank {
    /// Builds a bank from named rows. Every feature's class needs a
    /// semantic entry; semantic entries without features are kept.
    pub fn from_named(
        split: Split,
        features: Vec<(String, Vec<f64>)>,
        semantics: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let mut sem_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let semantic_dim = semantics.first().map_or(0, |(_, v)| v.len());
        for (name, vec) in semantics {
            if vec.len() != semantic_dim {
                return Err(Error::Input(format!(
                    "semantic vector for `{name}` has width {}, expected {semantic_dim}",
                    vec.len()
                )));
            }
            if sem_map.insert(name.clone(), vec).is_some() {
                return Err(Error::Input(format!("duplicate semantic entry for `{name}`")));
            }
        }

        let feature_dim = features.first().map_or(0, |(_, v)| v.len());
        let mut names: BTreeSet<String> = sem_map.keys().cloned().collect();
        for (i, (name, vec)) in features.iter().enumerate() {
            if vec.len() != feature_dim {
                return Err(Error::Input(format!(
                    "feature row {i} (`{name}`) has width {}, expected {feature_dim}",
                    vec.len()
                )));
            }
            if !sem_map.contains_key(name) {
                return Err(Error::Input(format!("class `{name}` has no semantic entry")));
            }
            names.insert(name.clone());
        }
        let names: Vec<String> = names.into_iter().collect();
        let id = |n: &str| Label(names.binary_search_by(|x| x.as_str().cmp(n)).expect("interned") as u32);

        let mut labels = Vec::with_capacity(features.len());
        let mut data = Vec::with_capacity(features.len() * feature_dim);
        let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, (name, vec)) in features.into_iter().enumerate() {
            let l = id(&name);
            labels.push(l);
            by_class.entry(l).or_default().push(i);
            data.extend(vec);
        }
        let features = Matrix::new(labels.len(), feature_dim, data)?;
        if !features.is_finite() {
            return Err(Error::Input("feature values must be finite".into()));
        }
        let semantics: BTreeMap<Label, Vec<f64>> = sem_map.into_iter().map(|(n, v)| (id(&n), v)).collect();
        if semantics.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("semantic values must be finite".into()));
        }
        Ok(Self {
            split,
            names,
            labels,
            features,
            semantics,
            by_class,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantics.values().next().map_or(0, Vec::len)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Classes that own at least one feature, in label order.
    pub fn classes(&self) -> Vec<Label> {
        self.by_class.keys().copied().collect()
    }

    pub fn indices_of(&self, label: Label) -> &[usize] {
        self.by_class.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn semantic(&self, label: Label) -> Option<&[f64]> {
        self.semantics.get(&label).map(Vec::as_slice)
    }

    pub fn semantics(&self) -> impl Iterator<Item = (Label, &[f64])> {
        self.semantics.iter().map(|(l, v)| (*l, v.as_slice()))
    }

    pub fn class_name(&self, label: Label) -> &str {
        &self.names[label.0 as usize]
    }

    pub fn label_of(&self, name: &str) -> Option<Label> {
        self.names.binary_search_by(|x| x.as_str().cmp(name)).ok().map(|i| Label(i as u32))
    }

    /// Rows as `(class name, vector)`, in bank order.
    pub fn named_features(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.labels.iter().enumerate().map(|(i, l)| (self.class_name(*l), self.feature(i)))
    }

    pub fn named_semantics(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.semantics.iter().map(|(l, v)| (self.class_name(*l), v.as_slice()))
    }

    /// Mean feature of every class.
    pub fn prototypes(&self) -> BTreeMap<Label, Vec<f64>> {
        self.by_class
            .iter()
            .map(|(l, idx)| {
                let rows: Vec<&[f64]> = idx.iter().map(|&i| self.feature(i)).collect();
                (*l, super::class_prototype(&rows).expect("non-empty class"))
            })
            .collect()
    }
}
