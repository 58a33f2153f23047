//! Material cue: a fixed vocabulary standing in for free-text material
//! answers, a frozen embedding table, and the rule-based density table.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{LayerNorm, Params, Tensor2};
use crate::rng::SplitMix64;

/// Shipped default vocabulary.
pub const DEFAULT_VOCAB: &str = include_str!("../data/materials.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MaterialId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub name: String,
    pub aliases: Vec<String>,
    pub rho_lo: f64,
    pub rho_hi: f64,
}

/// Ordered material list. The id equal to `len()` is the designated unknown material.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialVocab {
    entries: Vec<Material>,
    name_tokens: Vec<Vec<String>>,
    alias_tokens: Vec<Vec<Vec<String>>>,
}

fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

impl MaterialVocab {
    pub fn new(entries: Vec<Material>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("material vocabulary is empty".into()));
        }
        let mut seen: Vec<Vec<String>> = Vec::new();
        for m in &entries {
            if !(m.rho_lo > 0.0 && m.rho_lo <= m.rho_hi && m.rho_hi.is_finite()) {
                return Err(Error::Config(format!(
                    "material '{}' has invalid density range [{}, {}]",
                    m.name, m.rho_lo, m.rho_hi
                )));
            }
            for phrase in std::iter::once(&m.name).chain(&m.aliases) {
                let toks = tokenize(phrase);
                if toks.is_empty() {
                    return Err(Error::Config(format!("empty name or alias in '{}'", m.name)));
                }
                if seen.contains(&toks) {
                    return Err(Error::Config(format!(
                        "material name/alias '{phrase}' appears more than once"
                    )));
                }
                seen.push(toks);
            }
        }
        let name_tokens = entries.iter().map(|m| tokenize(&m.name)).collect();
        let alias_tokens = entries
            .iter()
            .map(|m| m.aliases.iter().map(|a| tokenize(a)).collect())
            .collect();
        Ok(Self {
            entries,
            name_tokens,
            alias_tokens,
        })
    }

    /// Parses `canonical|alias1,alias2|rho_lo|rho_hi` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            let bad = |what: &str| {
                Error::Format(format!("vocab line {}: {what}: '{raw}'", lineno + 1))
            };
            if fields.len() != 4 {
                return Err(bad("expected 4 '|'-separated fields"));
            }
            let aliases = fields[1]
                .split(',')
                .map(str::trim)
                .filter(|a| !a.is_empty())
                .map(str::to_string)
                .collect();
            entries.push(Material {
                name: fields[0].to_string(),
                aliases,
                rho_lo: fields[2].parse().map_err(|_| bad("bad rho_lo"))?,
                rho_hi: fields[3].parse().map_err(|_| bad("bad rho_hi"))?,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.entries {
            s.push_str(&format!(
                "{}|{}|{}|{}\n",
                m.name,
                m.aliases.join(","),
                m.rho_lo,
                m.rho_hi
            ));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Material] {
        &self.entries
    }

    pub fn unknown(&self) -> MaterialId {
        MaterialId(self.entries.len())
    }

    pub fn is_unknown(&self, id: MaterialId) -> bool {
        id.0 >= self.entries.len()
    }

    pub fn get(&self, id: MaterialId) -> Option<&Material> {
        self.entries.get(id.0)
    }

    /// Display name; "unknown" for the designated unknown id.
    pub fn name(&self, id: MaterialId) -> &str {
        self.get(id).map_or("unknown", |m| m.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<MaterialId> {
        self.entries.iter().position(|m| m.name == name).map(MaterialId)
    }

    /// Case-insensitive whole-word match against canonical names, then
    /// aliases; first entry in vocabulary order wins; otherwise unknown.
    pub fn parse_material(&self, text: &str) -> MaterialId {
        let tokens = tokenize(text);
        if let Some(i) = self
            .name_tokens
            .iter()
            .position(|n| contains_phrase(&tokens, n))
        {
            return MaterialId(i);
        }
        if let Some(i) = self
            .alias_tokens
            .iter()
            .position(|aliases| aliases.iter().any(|a| contains_phrase(&tokens, a)))
        {
            return MaterialId(i);
        }
        self.unknown()
    }

    /// Midpoint of the material's density range.
    pub fn rule_based_density(&self, id: MaterialId) -> Result<f64> {
        let m = self
            .get(id)
            .ok_or_else(|| Error::UnknownMaterial(format!("id {}", id.0)))?;
        Ok(0.5 * (m.rho_lo + m.rho_hi))
    }
}

impl Default for MaterialVocab {
    fn default() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("shipped vocabulary is valid")
    }
}

pub fn parse_material(text: &str, vocab: &MaterialVocab) -> MaterialId {
    vocab.parse_material(text)
}

pub fn rule_based_density(id: MaterialId, vocab: &MaterialVocab) -> Result<f64> {
    vocab.rule_based_density(id)
}

/// Frozen per-material embedding table (one extra row for unknown).
///
/// Rows are seeded Gaussian vectors orthogonalised by Gram-Schmidt when the
/// table is no taller than it is wide, then scaled to norm `sqrt(D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialEmbedding {
    table: Tensor2,
}

impl MaterialEmbedding {
    pub fn new(rows: usize, dim: usize, seed: u64) -> Result<Self> {
        if rows == 0 || dim < 2 {
            return Err(Error::Config("embedding needs >= 1 row and D >= 2".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if rows <= dim {
                for prev in &out {
                    let proj = dot_n(&v, prev) / dot_n(prev, prev);
                    v.iter_mut().zip(prev).for_each(|(x, p)| *x -= proj * p);
                }
            }
            let norm = dot_n(&v, &v).sqrt();
            let target = (dim as f64).sqrt();
            v.iter_mut().for_each(|x| *x *= target / norm);
            out.push(v);
        }
        Ok(Self {
            table: Tensor2::from_rows(&out)?,
        })
    }

    pub fn from_table(table: Tensor2) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &Tensor2 {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, id: MaterialId) -> Result<&[f64]> {
        if id.0 >= self.table.rows() {
            return Err(Error::Index {
                index: id.0,
                size: self.table.rows(),
            });
        }
        Ok(self.table.row(id.0))
    }

    /// FNV-1a over the little-endian bytes of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.table.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn dot_n(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Text-cue encoder: frozen embedding lookup followed by a trainable LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub table: MaterialEmbedding,
    pub norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(table: MaterialEmbedding) -> Self {
        let norm = LayerNorm::new(table.dim());
        Self { table, norm }
    }

    pub fn encode(&self, id: MaterialId) -> Result<Vec<f64>> {
        self.norm.forward(self.table.row(id)?)
    }

    /// Gradients reach the LayerNorm only; the table never changes.
    pub fn backward(&self, id: MaterialId, grad: &[f64], acc: &mut TextEncoder) -> Result<()> {
        self.norm
            .backward_accumulate(self.table.row(id)?, grad, &mut acc.norm)?;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            table: self.table.clone(),
            norm: self.norm.zeros_like(),
        }
    }
}

/// Only the LayerNorm is trainable.
impl Params for TextEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Embedding lookup followed by a unit LayerNorm.
pub fn embed_material(emb: &MaterialEmbedding, id: MaterialId) -> Result<Vec<f64>> {
    LayerNorm::new(emb.dim()).forward(emb.row(id)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_shipped_vocab() {
        let v = MaterialVocab::default();
        assert_eq!(v.len(), 10);
        assert_eq!(v.name(MaterialId(1)), "steel");
        assert_eq!(v.name(v.unknown()), "unknown");
    }

    #[test]
    fn material_parsing() {
        let v = MaterialVocab::default();
        assert_eq!(v.parse_material("Plastic"), v.id_of("plastic").unwrap());
        assert_eq!(
            v.parse_material("brushed stainless steel body"),
            v.id_of("steel").unwrap()
        );
        assert_eq!(v.parse_material("adamantium"), v.unknown());
        assert_eq!(v.parse_material("Pine Wood"), v.id_of("pine wood").unwrap());
        assert_eq!(v.parse_material("hardwood"), v.id_of("hardwood").unwrap());
        assert_eq!(v.parse_material("an oak table"), v.id_of("hardwood").unwrap());
        assert_eq!(v.parse_material(""), v.unknown());
    }

    #[test]
    fn first_entry_wins_on_ties() {
        let v = MaterialVocab::default();
        // "plastic" precedes "steel" in vocabulary order.
        assert_eq!(v.parse_material("steel and plastic"), v.id_of("plastic").unwrap());
        // Canonical names beat aliases even from earlier entries.
        assert_eq!(v.parse_material("pvc glass"), v.id_of("glass").unwrap());
    }

    #[test]
    fn vocab_validation() {
        assert!(matches!(MaterialVocab::parse(""), Err(Error::Config(_))));
        assert!(MaterialVocab::parse("a|x|1|2\nb|x|1|2").is_err());
        assert!(MaterialVocab::parse("a||3|2").is_err());
        assert!(MaterialVocab::parse("a||0|2").is_err());
        assert!(MaterialVocab::parse("a|b|1").is_err());
        let v = MaterialVocab::parse("a|b, c|1|2\n# comment\n").unwrap();
        assert_eq!(v.entries()[0].aliases, vec!["b", "c"]);
        assert_eq!(MaterialVocab::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn rule_density() {
        let v = MaterialVocab::default();
        assert_eq!(v.rule_based_density(v.id_of("steel").unwrap()).unwrap(), 7900.0);
        let single = MaterialVocab::parse("lead||11340|11340").unwrap();
        assert_eq!(single.rule_based_density(MaterialId(0)).unwrap(), 11340.0);
        assert!(matches!(
            v.rule_based_density(v.unknown()),
            Err(Error::UnknownMaterial(_))
        ));
    }

    #[test]
    fn embedding_rows_orthogonal_and_deterministic() {
        let e = MaterialEmbedding::new(11, 16, 3).unwrap();
        for i in 0..11 {
            for j in 0..i {
                let c = dot_n(e.table().row(i), e.table().row(j));
                assert!(c.abs() < 1e-9, "rows {i},{j}: {c}");
            }
        }
        let a = embed_material(&e, MaterialId(2)).unwrap();
        assert_eq!(a, embed_material(&e, MaterialId(2)).unwrap());
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
        assert!(matches!(e.row(MaterialId(11)), Err(Error::Index { .. })));
    }
}
