use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// A keep set along one axis: everything, or sorted indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Keep {
    #[default]
    All,
    Indices(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KeepRepr {
    Word(String),
    List(Vec<usize>),
}

impl Serialize for Keep {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Keep::All => "all".serialize(s),
            Keep::Indices(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Keep {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match KeepRepr::deserialize(d)? {
            KeepRepr::Word(w) if w == "all" => Ok(Keep::All),
            KeepRepr::Word(w) => Err(de::Error::custom(format!("expected \"all\" or a list, got {w:?}"))),
            KeepRepr::List(v) => Ok(Keep::Indices(v)),
        }
    }
}

impl Keep {
    pub fn is_all(&self) -> bool {
        matches!(self, Keep::All)
    }

    /// Kept indices out of `n`.
    pub fn resolve(&self, n: usize) -> Vec<usize> {
        match self {
            Keep::All => (0..n).collect(),
            Keep::Indices(v) => v.clone(),
        }
    }

    pub fn count(&self, n: usize) -> usize {
        match self {
            Keep::All => n,
            Keep::Indices(v) => v.len(),
        }
    }

    /// Strictly increasing, in range, non-empty.
    pub fn check(&self, n: usize, what: &str) -> Result<()> {
        if let Keep::Indices(v) = self {
            check_sorted(v, n, what)?;
            if v.is_empty() {
                return Err(Error::invalid(format!("{what}: keep set is empty")));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_sorted(v: &[usize], n: usize, what: &str) -> Result<()> {
    if let Some(&bad) = v.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("{what}: index {bad} out of range {n}")));
    }
    if v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("{what}: indices must be strictly increasing")));
    }
    Ok(())
}

/// Per-layer keep sets, or one "all" for every layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum PerLayer {
    #[default]
    All,
    Layers(Vec<Keep>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PerLayerRepr {
    Word(String),
    List(Vec<Keep>),
}

impl Serialize for PerLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PerLayer::All => "all".serialize(s),
            PerLayer::Layers(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for PerLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PerLayerRepr::deserialize(d)? {
            PerLayerRepr::Word(w) if w == "all" => Ok(PerLayer::All),
            PerLayerRepr::Word(w) => Err(de::Error::custom(format!("expected \"all\" or a list, got {w:?}"))),
            PerLayerRepr::List(v) => Ok(PerLayer::Layers(v)),
        }
    }
}

impl PerLayer {
    pub fn is_all(&self) -> bool {
        match self {
            PerLayer::All => true,
            PerLayer::Layers(v) => v.iter().all(Keep::is_all),
        }
    }

    /// Keep set of layer `l` out of `layers` remaining layers.
    pub fn layer(&self, l: usize) -> &Keep {
        static ALL: Keep = Keep::All;
        match self {
            PerLayer::All => &ALL,
            PerLayer::Layers(v) => &v[l],
        }
    }

    /// Validates every layer and returns the common kept count.
    pub fn check(&self, layers: usize, n: usize, what: &str) -> Result<usize> {
        let PerLayer::Layers(v) = self else {
            return Ok(n);
        };
        if v.len() != layers {
            return Err(Error::invalid(format!(
                "{what}: {} keep sets for {layers} remaining layers",
                v.len()
            )));
        }
        let mut count = None;
        for (l, k) in v.iter().enumerate() {
            k.check(n, &format!("{what} layer {l}"))?;
            let c = k.count(n);
            if *count.get_or_insert(c) != c {
                return Err(Error::invalid(format!(
                    "{what}: every layer must keep the same number of units"
                )));
            }
        }
        Ok(count.unwrap_or(n))
    }
}

/// One compression candidate: layers to drop and indices to keep per axis.
/// FFN and head keep sets index the layers that remain after dropping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    #[serde(default)]
    pub drop_layers: Vec<usize>,
    #[serde(default)]
    pub keep_ffn: PerLayer,
    #[serde(default)]
    pub keep_heads: PerLayer,
    #[serde(default)]
    pub keep_hidden: Keep,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl PruneSpec {
    pub fn is_identity(&self) -> bool {
        self.drop_layers.is_empty() && self.keep_ffn.is_all() && self.keep_heads.is_all() && self.keep_hidden.is_all()
    }

    /// Validates against `cfg` and returns the resulting config.
    pub fn target_config(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        cfg.validate()?;
        check_sorted(&self.drop_layers, cfg.num_layers, "drop_layers")?;
        if cfg.num_layers > 0 && self.drop_layers.len() == cfg.num_layers {
            return Err(Error::invalid("cannot drop every layer"));
        }
        let layers = cfg.num_layers - self.drop_layers.len();
        let mut out = cfg.clone();
        out.num_layers = layers;
        out.intermediate_size = self.keep_ffn.check(layers, cfg.intermediate_size, "keep_ffn")?;
        let heads = self.keep_heads.check(layers, cfg.num_heads, "keep_heads")?;
        if let PerLayer::Layers(v) = &self.keep_heads {
            let mut kv = None;
            for (l, k) in v.iter().enumerate() {
                let (kv_l, _) = head_grouping(cfg, &k.resolve(cfg.num_heads))
                    .map_err(|e| Error::invalid(format!("keep_heads layer {l}: {e}")))?;
                if *kv.get_or_insert(kv_l.len()) != kv_l.len() {
                    return Err(Error::invalid(
                        "keep_heads: every layer must keep the same KV heads count",
                    ));
                }
            }
            out.num_kv_heads = kv.unwrap_or(cfg.num_kv_heads);
        }
        out.num_heads = heads;
        self.keep_hidden.check(cfg.hidden_size, "keep_hidden")?;
        out.hidden_size = self.keep_hidden.count(cfg.hidden_size);
        out.validate()?;
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Surviving KV heads for a set of kept query heads, and the new group
/// size. Every surviving KV head must keep the same number of query heads.
pub fn head_grouping(cfg: &ModelConfig, kept: &[usize]) -> Result<(Vec<usize>, usize)> {
    let g = cfg.group_size();
    let mut per_kv: BTreeMap<usize, usize> = BTreeMap::new();
    for &h in kept {
        *per_kv.entry(h / g).or_default() += 1;
    }
    let sizes: Vec<usize> = per_kv.values().copied().collect();
    if sizes.is_empty() {
        return Err(Error::invalid("no query heads kept"));
    }
    if sizes.iter().any(|&s| s != sizes[0]) {
        return Err(Error::invalid(format!(
            "kept query heads {kept:?} split unevenly over KV groups of {g}"
        )));
    }
    Ok((per_kv.keys().copied().collect(), sizes[0]))
}

impl fmt::Display for PruneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let count = |p: &PerLayer| match p {
            PerLayer::All => "all".to_string(),
            PerLayer::Layers(v) => v.first().map_or("all".into(), |k| match k {
                Keep::All => "all".into(),
                Keep::Indices(i) => i.len().to_string(),
            }),
        };
        write!(
            f,
            "drop {:?}, ffn {}, heads {}, hidden {}",
            self.drop_layers,
            count(&self.keep_ffn),
            count(&self.keep_heads),
            match &self.keep_hidden {
                Keep::All => "all".into(),
                Keep::Indices(v) => v.len().to_string(),
            }
        )
    }
}
