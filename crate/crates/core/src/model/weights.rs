use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{NormKind, TowerConfig, TowerInput};
use crate::error::{bail, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Name, shape and initialiser of every tensor a tower owns, in a fixed
/// construction order.
pub(crate) fn param_specs(config: &TowerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.width;
    let h = config.mlp_hidden();
    let linear = |fan_in: usize| Init::Normal(1.0 / libm::sqrt(fan_in as f64));
    let mut specs = Vec::new();
    match config.input {
        TowerInput::Vision { .. } => {
            let pd = config.patch_dim().unwrap_or(0);
            specs.push(("patch_embed.weight".into(), vec![pd, d], linear(pd)));
            specs.push(("patch_embed.bias".into(), vec![d], Init::Zeros));
            specs.push(("class_token".into(), vec![d], Init::Normal(0.5)));
            specs.push(("pos_embed".into(), vec![config.sequence_length(), d], Init::Normal(0.5)));
        }
        TowerInput::Text { vocab_size, context_length, .. } => {
            specs.push(("token_embed".into(), vec![vocab_size, d], Init::Normal(0.5)));
            specs.push(("pos_embed".into(), vec![context_length, d], Init::Normal(0.01)));
        }
    }
    let norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.weight"), vec![d], Init::Ones));
        if config.norm_kind == NormKind::Layer {
            specs.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
        }
    };
    for i in 0..config.layers {
        let p = format!("blocks.{i}");
        norm(&mut specs, &format!("{p}.norm1"));
        for name in ["q", "k", "v"] {
            specs.push((format!("{p}.attn.{name}.weight"), vec![d, d], linear(d)));
            if config.qkv_bias {
                specs.push((format!("{p}.attn.{name}.bias"), vec![d], Init::Zeros));
            }
        }
        specs.push((format!("{p}.attn.out.weight"), vec![d, d], linear(d)));
        specs.push((format!("{p}.attn.out.bias"), vec![d], Init::Zeros));
        norm(&mut specs, &format!("{p}.norm2"));
        specs.push((format!("{p}.mlp.fc1.weight"), vec![d, h], linear(d)));
        specs.push((format!("{p}.mlp.fc1.bias"), vec![h], Init::Zeros));
        specs.push((format!("{p}.mlp.fc2.weight"), vec![h, d], linear(h)));
        specs.push((format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros));
    }
    norm(&mut specs, "final_norm");
    specs.push(("projection".into(), vec![d, config.projection_dim], linear(d)));
    specs
}

/// Named parameters of one tower. Iteration order is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerWeights {
    params: BTreeMap<String, Tensor>,
}

impl TowerWeights {
    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Option<Tensor> {
        self.params.insert(name, value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.params {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest.iter() {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Checks that every parameter the config expects exists with the right
    /// shape and that nothing else is present.
    pub fn check_against(&self, config: &TowerConfig) -> Result<()> {
        let specs = param_specs(config);
        let mut problems = Vec::new();
        for (name, shape, _) in &specs {
            match self.params.get(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name} (shape {:?}, expected {:?})", t.shape(), shape))
                }
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if !specs.iter().any(|(n, _, _)| n == name) {
                problems.push(format!("{name} (unexpected)"));
            }
        }
        if !problems.is_empty() {
            bail!(Checkpoint, "weights do not match config: {}", problems.join(", "));
        }
        Ok(())
    }

    /// Puts every parameter on the tape, differentiable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTower {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundTower { vars }
    }
}

/// Tape handles for a tower's parameters.
#[derive(Debug, Clone)]
pub struct BoundTower {
    vars: BTreeMap<String, Var>,
}

/// Binding from explicit handles, e.g. when a caller owns the leaves.
impl FromIterator<(String, Var)> for BoundTower {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

impl BoundTower {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Deterministic initialisation of a tower from a seed.
pub fn build_tower(config: &TowerConfig, init_seed: u64) -> Result<TowerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = BTreeMap::new();
    for (name, shape, init) in param_specs(config) {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{e}")))?;
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(TowerWeights { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::TowerConfig;

    #[test]
    fn zero_layer_tower_has_only_embeddings_norm_and_projection() {
        let c = TowerConfig::vision(0, 8, 2, 4, 8, 4);
        let w = build_tower(&c, 1).unwrap();
        let names: Vec<&str> = w.names().collect();
        assert_eq!(names, ["class_token", "final_norm.weight", "patch_embed.bias", "patch_embed.weight", "pos_embed", "projection"]);
    }

    #[test]
    fn rms_tower_has_no_qkv_bias() {
        let c = TowerConfig::vision(2, 8, 2, 4, 8, 4);
        let w = build_tower(&c, 1).unwrap();
        assert!(!w.names().any(|n| n.contains("attn.q.bias") || n.contains("attn.k.bias") || n.contains("attn.v.bias")));
    }

    #[test]
    fn layer_norm_tower_with_bias_has_all_qkv_biases() {
        let c = TowerConfig::text(2, 8, 2, 20, 6, 4);
        let w = build_tower(&c, 1).unwrap();
        for i in 0..2 {
            for p in ["q", "k", "v"] {
                assert!(w.contains(&format!("blocks.{i}.attn.{p}.bias")));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes_different_seed_differs() {
        let c = TowerConfig::vision(1, 8, 2, 4, 8, 4);
        let a = build_tower(&c, 7).unwrap();
        let b = build_tower(&c, 7).unwrap();
        let other = build_tower(&c, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), other.content_hash());
    }

    #[test]
    fn check_against_reports_mismatches() {
        let c = TowerConfig::vision(1, 8, 2, 4, 8, 4);
        let mut w = build_tower(&c, 7).unwrap();
        assert!(w.check_against(&c).is_ok());
        w.insert("projection".into(), Tensor::zeros(&[8, 5]));
        let err = w.check_against(&c).unwrap_err();
        assert!(matches!(&err, Error::Checkpoint(m) if m.contains("projection")));
    }
}
