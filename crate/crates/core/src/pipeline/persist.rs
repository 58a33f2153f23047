//! Saving and restoring trained models through [`Checkpoint`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::Tensor2;
use crate::semantics::{MaterialEmbedding, MaterialVocab};

use super::baselines::{DirectRegressor, RuleBasedModel};
use super::config::ModelConfig;
use super::model::{Estimate, MassModel, Predictor, PreparedSample, Trainable};

const TABLE: &str = "frozen.text_table";
const DENSITIES: &str = "frozen.rule_densities";

/// Any model the CLI can train, save and evaluate.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SavedModel {
    Factored(MassModel),
    Direct(DirectRegressor),
    RuleBased(RuleBasedModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Factored(_) => "factored",
            SavedModel::Direct(_) => "direct",
            SavedModel::RuleBased(_) => "rule_based",
        }
    }

    pub fn to_checkpoint(&self, config: &ModelConfig, vocab_len: usize) -> Checkpoint {
        let mut header: BTreeMap<String, String> = config.to_kv().into_iter().collect();
        header.insert("kind".into(), self.kind().into());
        header.insert("vocab_len".into(), vocab_len.to_string());
        let mut ck = Checkpoint::new(header);
        match self {
            SavedModel::Factored(m) => {
                ck.add_params(m);
                if let Some(t) = m.frozen_table() {
                    ck.add_tensor(TABLE, t.table().data().to_vec());
                }
            }
            SavedModel::Direct(m) => ck.add_params(m),
            SavedModel::RuleBased(m) => {
                ck.add_params(m);
                ck.add_tensor(DENSITIES, m.densities.clone());
            }
        }
        ck
    }

    /// Rebuilds the architecture from the header, then loads every tensor.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ModelConfig)> {
        let mut config = ModelConfig::default();
        for (k, v) in &ck.header {
            if !matches!(k.as_str(), "kind" | "vocab_len") && !config.apply(k, v)? {
                return Err(Error::Format(format!("unknown checkpoint header key '{k}'")));
            }
        }
        let vocab_len: usize = ck
            .header_value("vocab_len")?
            .parse()
            .map_err(|_| Error::Format("bad vocab_len".into()))?;
        let model = match ck.header_value("kind")? {
            "factored" => {
                let mut m = MassModel::new(&config, vocab_len)?;
                ck.restore_params(&mut m)?;
                if m.frozen_table().is_some() {
                    let data = ck
                        .tensor(TABLE)
                        .ok_or_else(|| Error::Format("checkpoint lacks the embedding table".into()))?;
                    let rows = vocab_len + 1;
                    let table = Tensor2::from_vec(rows, data.len() / rows.max(1), data.to_vec())?;
                    m.set_frozen_table(MaterialEmbedding::from_table(table))?;
                }
                SavedModel::Factored(m)
            }
            "direct" => {
                let mut m = DirectRegressor::from_config(&config);
                ck.restore_params(&mut m)?;
                SavedModel::Direct(m)
            }
            "rule_based" => {
                let densities = ck
                    .tensor(DENSITIES)
                    .ok_or_else(|| Error::Format("checkpoint lacks rule densities".into()))?
                    .to_vec();
                let mut m = RuleBasedModel::new(&config, &MaterialVocab::default())?;
                m.densities = densities;
                ck.restore_params(&mut m)?;
                SavedModel::RuleBased(m)
            }
            other => return Err(Error::Format(format!("unknown model kind '{other}'"))),
        };
        Ok((model, config))
    }

    pub fn save(&self, path: &Path, config: &ModelConfig, vocab_len: usize) -> Result<()> {
        self.to_checkpoint(config, vocab_len).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelConfig)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Predictor for SavedModel {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate> {
        match self {
            SavedModel::Factored(m) => Trainable::estimate(m, s),
            SavedModel::Direct(m) => Trainable::estimate(m, s),
            SavedModel::RuleBased(m) => Trainable::estimate(m, s),
        }
    }

    fn accepts(&self, s: &PreparedSample) -> bool {
        match self {
            SavedModel::Factored(m) => Trainable::accepts(m, s),
            SavedModel::Direct(m) => Trainable::accepts(m, s),
            SavedModel::RuleBased(m) => Trainable::accepts(m, s),
        }
    }
}
