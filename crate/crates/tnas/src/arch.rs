//! Discrete architectures and the space-level dimension vocabulary.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TnasError};

/// One searchable dimension of a space: a named list of choice labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchDim {
    pub name: String,
    pub labels: Vec<String>,
}

impl SearchDim {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Self {
        SearchDim {
            name: name.into(),
            labels,
        }
    }

    pub fn numeric(name: impl Into<String>, values: &[usize]) -> Self {
        SearchDim {
            name: name.into(),
            labels: values.iter().map(|v| v.to_string()).collect(),
        }
    }
}

/// Space identity plus its full dimension list, in canonical (sorted) order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub space_id: String,
    pub dims: Vec<SearchDim>,
}

impl SearchSpaceSpec {
    pub fn new(space_id: impl Into<String>, mut dims: Vec<SearchDim>) -> Self {
        dims.sort_by(|a, b| a.name.cmp(&b.name));
        SearchSpaceSpec {
            space_id: space_id.into(),
            dims,
        }
    }

    pub fn cardinality(&self) -> u128 {
        self.dims.iter().map(|d| d.labels.len() as u128).product()
    }

    pub fn dim(&self, name: &str) -> Option<&SearchDim> {
        self.dims.iter().find(|d| d.name == name)
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        for dim in &self.dims {
            match arch.get(&dim.name) {
                None => {
                    return Err(TnasError::InvalidArchitecture(format!(
                        "missing dimension {:?}",
                        dim.name
                    )))
                }
                Some(idx) if idx >= dim.labels.len() => {
                    return Err(TnasError::Choice {
                        dim: dim.name.clone(),
                        index: idx,
                        choices: dim.labels.len(),
                    })
                }
                _ => {}
            }
        }
        if arch.len() != self.dims.len() {
            return Err(TnasError::InvalidArchitecture(format!(
                "expected {} dimensions, got {}",
                self.dims.len(),
                arch.len()
            )));
        }
        Ok(())
    }

    pub fn random_arch<R: Rng>(&self, rng: &mut R) -> Architecture {
        let mut a = Architecture::empty();
        for dim in &self.dims {
            a.set(&dim.name, rng.gen_range(0..dim.labels.len()));
        }
        a
    }

    /// All architectures in lexicographic index order over the sorted dims.
    pub fn enumerate(&self) -> impl Iterator<Item = Architecture> + '_ {
        let counts: Vec<usize> = self.dims.iter().map(|d| d.labels.len()).collect();
        let total: usize = counts.iter().product();
        (0..total).map(move |mut idx| {
            let mut a = Architecture::empty();
            for (dim, &count) in self.dims.iter().zip(&counts).rev() {
                a.set(&dim.name, idx % count);
                idx /= count;
            }
            a
        })
    }

    /// The assignment picking the last (largest) choice everywhere.
    pub fn largest_arch(&self) -> Architecture {
        let mut a = Architecture::empty();
        for dim in &self.dims {
            a.set(&dim.name, dim.labels.len() - 1);
        }
        a
    }
}

/// Discrete genotype: one chosen index per dimension. The canonical text
/// form is `name=index` pairs joined with `;`, dims in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Architecture {
    assignment: BTreeMap<String, usize>,
}

impl Architecture {
    pub fn empty() -> Self {
        Architecture {
            assignment: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, dim: &str, index: usize) {
        self.assignment.insert(dim.to_string(), index);
    }

    pub fn get(&self, dim: &str) -> Option<usize> {
        self.assignment.get(dim).copied()
    }

    pub fn index(&self, dim: &str) -> usize {
        self.assignment[dim]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.assignment.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn serialize_text(&self) -> String {
        self.assignment
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut a = Architecture::empty();
        for part in text.split(';').filter(|p| !p.is_empty()) {
            let (name, idx) = part.split_once('=').ok_or_else(|| {
                TnasError::InvalidArchitecture(format!("bad assignment {part:?}"))
            })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| TnasError::InvalidArchitecture(format!("bad index in {part:?}")))?;
            a.set(name, idx);
        }
        Ok(a)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize_text())
    }
}

/// Per-dimension argmax of the architecture parameters; ties break toward
/// the lowest index.
pub fn discretize(alphas: &BTreeMap<String, Vec<f64>>) -> Architecture {
    let mut arch = Architecture::empty();
    for (name, alpha) in alphas {
        let mut best = 0;
        for (i, &v) in alpha.iter().enumerate() {
            if v > alpha[best] {
                best = i;
            }
        }
        arch.set(name, best);
    }
    arch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> SearchSpaceSpec {
        SearchSpaceSpec::new(
            "toy",
            vec![
                SearchDim::numeric("k1", &[3, 5, 7]),
                SearchDim::numeric("c1", &[8, 16, 32]),
            ],
        )
    }

    #[test]
    fn cardinality_and_enumeration() {
        let s = space();
        assert_eq!(s.cardinality(), 9);
        let all: Vec<_> = s.enumerate().collect();
        assert_eq!(all.len(), 9);
        let set: std::collections::BTreeSet<_> = all.iter().map(|a| a.serialize_text()).collect();
        assert_eq!(set.len(), 9);
    }

    #[test]
    fn serialization_roundtrip() {
        let s = space();
        for arch in s.enumerate() {
            let text = arch.serialize_text();
            assert_eq!(Architecture::parse_text(&text).unwrap(), arch);
        }
    }

    #[test]
    fn discretize_rules() {
        let mut alphas = BTreeMap::new();
        alphas.insert("a".to_string(), vec![0.1, 0.9]);
        alphas.insert("b".to_string(), vec![0.5, 0.5]);
        let arch = discretize(&alphas);
        assert_eq!(arch.get("a"), Some(1));
        assert_eq!(arch.get("b"), Some(0)); // tie toward lowest index

        // Shift invariance.
        let mut shifted = BTreeMap::new();
        shifted.insert("a".to_string(), vec![0.1 + 5.0, 0.9 + 5.0]);
        shifted.insert("b".to_string(), vec![0.5 - 2.0, 0.5 - 2.0]);
        assert_eq!(discretize(&shifted), arch);
    }

    #[test]
    fn validate_catches_bad_archs() {
        let s = space();
        let mut a = Architecture::empty();
        a.set("k1", 0);
        assert!(s.validate(&a).is_err());
        a.set("c1", 9);
        assert!(s.validate(&a).is_err());
        a.set("c1", 2);
        assert!(s.validate(&a).is_ok());
    }
}
