use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::init::init_tensor;
use super::{Ownership, ParameterStore};
use crate::error::{Error, Result};
use crate::nn::{Block, ModelConfig, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Odd layers and the embedding are shared; even layers are MoE on the big
    /// path and private dense layers on the small path.
    Shared,
    /// Two disjoint models.
    Indep,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Shared => "shared",
            Architecture::Indep => "indep",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Big,
    Small,
}

impl Which {
    pub const ALL: [Which; 2] = [Which::Big, Which::Small];

    pub fn name(self) -> &'static str {
        match self {
            Which::Big => "big",
            Which::Small => "small",
        }
    }

    pub fn private_ownership(self) -> Ownership {
        match self {
            Which::Big => Ownership::MoeOnly,
            Which::Small => Ownership::SmallOnly,
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "big" => Ok(Which::Big),
            "small" => Ok(Which::Small),
            _ => Err(Error::config(format!(
                "unknown submodel {s:?}; valid names are \"big\" and \"small\""
            ))),
        }
    }
}

/// How the small path of the shared architecture walks the layer slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharedDepth {
    /// Every slot: shared odd layers interleaved with private even layers.
    #[default]
    Full,
    /// Only the shared odd slots.
    SkipEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    Standard,
    Moe,
    DensePrivate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    pub ownership: Ownership,
    pub prefix: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub encoder: Vec<Slot>,
    pub decoder: Vec<Slot>,
}

/// One path through a composite model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submodel {
    pub which: Which,
    pub config: ModelConfig,
    pub plan: LayerPlan,
    pub network: Network,
}

impl Submodel {
    /// A self-contained stack under the scope of `which`.
    pub fn standalone(config: &ModelConfig, which: Which) -> Result<Self> {
        config.validate()?;
        let network = Network::standalone(config, which.name());
        let slots = |blocks: &[Block]| {
            blocks
                .iter()
                .map(|b| Slot {
                    kind: if b.moe.is_some() {
                        SlotKind::Moe
                    } else {
                        SlotKind::Standard
                    },
                    ownership: which.private_ownership(),
                    prefix: b.prefix.clone(),
                })
                .collect()
        };
        Ok(Self {
            which,
            config: config.clone(),
            plan: LayerPlan {
                encoder: slots(&network.encoder),
                decoder: slots(&network.decoder),
            },
            network,
        })
    }
}

/// The structure of a composite model without any parameter storage; enough
/// for symbolic parameter counting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub architecture: Architecture,
    pub shared_depth: SharedDepth,
    pub big: Submodel,
    pub small: Submodel,
}

fn shared_side(
    side: &str,
    depth: usize,
    big: &ModelConfig,
    small: &ModelConfig,
    mode: SharedDepth,
) -> [(Vec<Slot>, Vec<Block>); 2] {
    let (mut big_slots, mut big_blocks) = (Vec::new(), Vec::new());
    let (mut small_slots, mut small_blocks) = (Vec::new(), Vec::new());
    for i in 0..depth {
        if i % 2 == 0 {
            let prefix = format!("shared.{side}.{i}");
            let slot = Slot {
                kind: SlotKind::Standard,
                ownership: Ownership::Shared,
                prefix: prefix.clone(),
            };
            let block = Block {
                prefix,
                ffn: big.ffn_size,
                moe: None,
            };
            big_slots.push(slot.clone());
            big_blocks.push(block.clone());
            small_slots.push(slot);
            small_blocks.push(block);
        } else {
            let prefix = format!("big.{side}.{i}");
            big_slots.push(Slot {
                kind: SlotKind::Moe,
                ownership: Ownership::MoeOnly,
                prefix: prefix.clone(),
            });
            big_blocks.push(Block {
                prefix,
                ffn: big.ffn_size,
                moe: big.moe.clone(),
            });
            if mode == SharedDepth::Full {
                let prefix = format!("small.{side}.{i}");
                small_slots.push(Slot {
                    kind: SlotKind::DensePrivate,
                    ownership: Ownership::SmallOnly,
                    prefix: prefix.clone(),
                });
                small_blocks.push(Block {
                    prefix,
                    ffn: small.ffn_size,
                    moe: None,
                });
            }
        }
    }
    [(big_slots, big_blocks), (small_slots, small_blocks)]
}

impl Layout {
    /// Shared architecture. Both configs must agree on width, heads and
    /// vocabulary; `big` needs experts and an even depth, and `small` gives
    /// the private layers, so its depth is half of `big`'s.
    pub fn shared(big: &ModelConfig, small: &ModelConfig, mode: SharedDepth) -> Result<Self> {
        big.validate()?;
        small.validate()?;
        if big.d_model != small.d_model {
            return Err(Error::config(format!(
                "shared architecture requires equal width (big {}, small {})",
                big.d_model, small.d_model
            )));
        }
        if big.heads != small.heads || big.vocab_size != small.vocab_size {
            return Err(Error::config(
                "shared architecture requires equal heads and vocabulary",
            ));
        }
        if big.moe.is_none() {
            return Err(Error::config("shared architecture needs experts in the big model"));
        }
        if small.moe.is_some() {
            return Err(Error::config("shared architecture small model must be dense"));
        }
        for (side, b, s) in [
            ("encoder", big.encoder_layers, small.encoder_layers),
            ("decoder", big.decoder_layers, small.decoder_layers),
        ] {
            if b % 2 != 0 {
                return Err(Error::config(format!(
                    "shared architecture requires an even big {side} depth, got {b}"
                )));
            }
            if s != b / 2 {
                return Err(Error::config(format!(
                    "shared architecture small {side} depth counts private layers and must be {}, got {s}",
                    b / 2
                )));
            }
        }
        let [(be, bbe), (se, sbe)] = shared_side("enc", big.encoder_layers, big, small, mode);
        let [(bd, bbd), (sd, sbd)] = shared_side("dec", big.decoder_layers, big, small, mode);
        let network = |which: Which, cfg: &ModelConfig, encoder, decoder| Network {
            vocab_size: cfg.vocab_size,
            d_model: cfg.d_model,
            heads: cfg.heads,
            embedding: "shared.embed".into(),
            encoder,
            decoder,
            encoder_norm: format!("{which}.enc_norm"),
            decoder_norm: format!("{which}.dec_norm"),
        };
        Ok(Self {
            architecture: Architecture::Shared,
            shared_depth: mode,
            big: Submodel {
                which: Which::Big,
                config: big.clone(),
                plan: LayerPlan {
                    encoder: be,
                    decoder: bd,
                },
                network: network(Which::Big, big, bbe, bbd),
            },
            small: Submodel {
                which: Which::Small,
                config: small.clone(),
                plan: LayerPlan {
                    encoder: se,
                    decoder: sd,
                },
                network: network(Which::Small, small, sbe, sbd),
            },
        })
    }

    /// Independent architecture. Without an explicit small config the small
    /// model takes half of big's width, depth and feed-forward size.
    pub fn indep(big: &ModelConfig, small: Option<&ModelConfig>) -> Result<Self> {
        let small = small.cloned().unwrap_or_else(|| big.halved());
        if small.vocab_size != big.vocab_size {
            return Err(Error::config("both submodels must use the same vocabulary"));
        }
        Ok(Self {
            architecture: Architecture::Indep,
            shared_depth: SharedDepth::default(),
            big: Submodel::standalone(big, Which::Big)?,
            small: Submodel::standalone(&small, Which::Small)?,
        })
    }

    pub fn submodel(&self, which: Which) -> &Submodel {
        match which {
            Which::Big => &self.big,
            Which::Small => &self.small,
        }
    }

    /// Every parameter of the composite with its shape and ownership, in
    /// name order.
    pub fn param_shapes(&self) -> BTreeMap<String, (Vec<usize>, Ownership)> {
        let big: BTreeMap<_, _> = self.big.network.param_shapes().into_iter().collect();
        let small: BTreeMap<_, _> = self.small.network.param_shapes().into_iter().collect();
        let mut out = BTreeMap::new();
        for (name, shape) in &big {
            let o = if small.contains_key(name) {
                Ownership::Shared
            } else {
                Ownership::MoeOnly
            };
            out.insert(name.clone(), (shape.clone(), o));
        }
        for (name, shape) in small {
            out.entry(name)
                .or_insert((shape, Ownership::SmallOnly));
        }
        out
    }

    /// Scalar counts per ownership tag, computed without allocating.
    pub fn partition_sizes(&self) -> BTreeMap<Ownership, usize> {
        let mut out = BTreeMap::new();
        for (shape, o) in self.param_shapes().values() {
            *out.entry(*o).or_insert(0) += shape.iter().product::<usize>();
        }
        out
    }
}

/// Two submodels over one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeModel {
    layout: Layout,
    params: ParameterStore,
}

impl CompositeModel {
    pub fn build(layout: Layout, seed: u64) -> Result<Self> {
        let mut params = ParameterStore::new();
        for (name, (shape, o)) in layout.param_shapes() {
            params.insert(&name, init_tensor(&name, &shape, seed), o)?;
        }
        Ok(Self { layout, params })
    }

    pub fn build_shared(big: &ModelConfig, small: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(Layout::shared(big, small, SharedDepth::Full)?, seed)
    }

    pub fn build_indep(big: &ModelConfig, small: Option<&ModelConfig>, seed: u64) -> Result<Self> {
        Self::build(Layout::indep(big, small)?, seed)
    }

    /// Reassembles a model from stored parameters, checking that they match
    /// the layout exactly.
    pub fn from_parts(layout: Layout, params: ParameterStore) -> Result<Self> {
        let expected = layout.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::contract(format!(
                "layout has {} parameters, store has {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, (shape, o)) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() || params.ownership(name) != Some(*o) {
                return Err(Error::contract(format!("parameter {name} does not match layout")));
            }
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn architecture(&self) -> Architecture {
        self.layout.architecture
    }

    pub fn submodel(&self, which: Which) -> &Submodel {
        self.layout.submodel(which)
    }

    pub fn network(&self, which: Which) -> &Network {
        &self.submodel(which).network
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Names of every parameter the given path reads.
    pub fn reachable(&self, which: Which) -> Vec<String> {
        self.network(which).param_names()
    }

    /// Names whose ownership is `o`.
    pub fn names_with(&self, o: Ownership) -> BTreeSet<String> {
        self.params
            .iter()
            .filter(|(_, e)| e.ownership() == o)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Deep copy of one path as a standalone model.
    pub fn extract(&self, which: Which) -> Result<StandaloneModel> {
        let sub = self.submodel(which).clone();
        let params = self.params.subset(&sub.network.param_names())?;
        Ok(StandaloneModel {
            submodel: sub,
            params,
        })
    }
}

/// A single model with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneModel {
    pub submodel: Submodel,
    pub params: ParameterStore,
}

impl StandaloneModel {
    pub fn new(config: &ModelConfig, which: Which, seed: u64) -> Result<Self> {
        let submodel = Submodel::standalone(config, which)?;
        let mut params = ParameterStore::new();
        for (name, shape) in submodel.network.param_shapes() {
            params.insert(&name, init_tensor(&name, &shape, seed), which.private_ownership())?;
        }
        Ok(Self { submodel, params })
    }

    pub fn network(&self) -> &Network {
        &self.submodel.network
    }

    pub fn which(&self) -> Which {
        self.submodel.which
    }
}
