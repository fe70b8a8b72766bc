//! Entity-oriented knowledge index.
//!
//! Records are stored tree-form: one [`EntityNode`] per medicine, holding one
//! embedded [`EntityAttributeItem`] per attribute. Search is exact and
//! exhaustive over unit vectors.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedder::{EmbedError, Embedder, EmbeddingVector};

/// Separator between generic name and attribute text in an item.
pub const ITEM_SEPARATOR: &str = " — ";
/// Separator between generic name and brand names in the entity text.
pub const BRAND_SEPARATOR: &str = "; ";
pub const DEFAULT_FANOUT: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("duplicate entity: {0}")]
    DuplicateEntity(String),
    #[error("record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("unknown attribute {attribute:?} for entity {entity:?}")]
    UnknownAttribute { entity: String, attribute: String },
    #[error("query is empty")]
    EmptyQuery,
    #[error("num must be >= 1")]
    InvalidNum,
    #[error("failed to embed {context}: {source}")]
    Embedding {
        context: String,
        #[source]
        source: EmbedError,
    },
    #[error("database file: {0}")]
    Io(String),
    #[error("database parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, IndexError>;

/// Case-fold and trim, used for every key comparison.
pub fn normalize_key(s: &str) -> String {
    s.trim().to_lowercase()
}

/// One medicine record as stored in the database file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicineRecord {
    pub id: String,
    pub generic_name: String,
    #[serde(default)]
    pub brand_names: Vec<String>,
    pub attributes: IndexMap<String, String>,
}

impl MedicineRecord {
    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| IndexError::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.generic_name.trim().is_empty() {
            return Err(bad("generic_name is empty"));
        }
        if self.attributes.is_empty() {
            return Err(bad("record has no attributes"));
        }
        if let Some((name, _)) = self
            .attributes
            .iter()
            .find(|(k, v)| k.trim().is_empty() || v.trim().is_empty())
        {
            return Err(bad(&format!("attribute {name:?} has an empty name or text")));
        }
        Ok(())
    }

    /// Text embedded for entity-level (coarse) search.
    pub fn entity_text(&self) -> String {
        let mut parts = vec![self.generic_name.trim()];
        parts.extend(
            self.brand_names
                .iter()
                .map(|b| b.trim())
                .filter(|b| !b.is_empty()),
        );
        parts.join(BRAND_SEPARATOR)
    }
}

/// Parses a database file body: a JSON array of records.
pub fn parse_database(json: &str) -> Result<Vec<MedicineRecord>> {
    serde_json::from_str(json).map_err(|e| IndexError::Parse(e.to_string()))
}

pub fn load_database(path: &Path) -> Result<Vec<MedicineRecord>> {
    let text = fs::read_to_string(path).map_err(|e| IndexError::Io(format!("{}: {e}", path.display())))?;
    parse_database(&text)
}

/// Composite key of one entity-attribute item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeKey {
    pub entity: String,
    pub attribute: String,
}

impl AttributeKey {
    pub fn new(entity: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            attribute: attribute.into(),
        }
    }

    pub fn normalized(&self) -> (String, String) {
        (normalize_key(&self.entity), normalize_key(&self.attribute))
    }
}

impl fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{ITEM_SEPARATOR}{}", self.entity, self.attribute)
    }
}

/// Key of a retrieval candidate. Serialized as `{"entity": ..}` for coarse
/// hits and `{"entity": .., "attribute": ..}` for fine hits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateKey {
    pub entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

impl CandidateKey {
    pub fn entity(name: impl Into<String>) -> Self {
        Self {
            entity: name.into(),
            attribute: None,
        }
    }

    pub fn attribute(key: &AttributeKey) -> Self {
        Self {
            entity: key.entity.clone(),
            attribute: Some(key.attribute.clone()),
        }
    }

    pub fn normalized(&self) -> (String, Option<String>) {
        (
            normalize_key(&self.entity),
            self.attribute.as_deref().map(normalize_key),
        )
    }
}

impl fmt::Display for CandidateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.attribute {
            Some(a) => write!(f, "{}{ITEM_SEPARATOR}{a}", self.entity),
            None => f.write_str(&self.entity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityAttributeItem {
    pub entity_key: String,
    pub attribute_key: AttributeKey,
    pub item_text: String,
    #[serde(skip)]
    pub embedding: EmbeddingVector,
}

impl EntityAttributeItem {
    pub fn attribute_text(&self) -> &str {
        self.item_text
            .split_once(ITEM_SEPARATOR)
            .map(|(_, t)| t)
            .unwrap_or(&self.item_text)
    }
}

#[derive(Debug, Clone)]
pub struct EntityNode {
    pub record: MedicineRecord,
    pub items: Vec<EntityAttributeItem>,
    attr_lookup: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub entities: usize,
    pub items: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineMode {
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub key: CandidateKey,
    pub score: f64,
    pub evidence_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub granularity: Granularity,
    pub candidates: Vec<Candidate>,
}

impl RetrievalResult {
    pub fn keys(&self) -> Vec<&CandidateKey> {
        self.candidates.iter().map(|c| &c.key).collect()
    }
}

/// Immutable after construction; share behind `Arc` for concurrent search.
#[derive(Debug, Clone)]
pub struct KnowledgeIndex {
    /// Normalized entity key -> node, in key order.
    entities: BTreeMap<String, EntityNode>,
    entity_embeddings: BTreeMap<String, EmbeddingVector>,
    stats: IndexStats,
    content_hash: String,
}

struct Scored<'a, K> {
    score: f64,
    sort_key: K,
    idx: &'a str,
    item: usize,
}

fn rank_desc<K: Ord>(a: &Scored<'_, K>, b: &Scored<'_, K>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.sort_key.cmp(&b.sort_key))
}

impl KnowledgeIndex {
    pub fn build(records: Vec<MedicineRecord>, embedder: &dyn Embedder) -> Result<Self> {
        Self::build_inner(records, embedder, None)
    }

    /// Like [`build`](Self::build), but reuses embeddings from a sidecar file
    /// under `cache_dir` keyed by embedder fingerprint and database content.
    pub fn build_cached(
        records: Vec<MedicineRecord>,
        embedder: &dyn Embedder,
        cache_dir: &Path,
    ) -> Result<Self> {
        Self::build_inner(records, embedder, Some(cache_dir))
    }

    fn build_inner(
        records: Vec<MedicineRecord>,
        embedder: &dyn Embedder,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(IndexError::EmptyDatabase);
        }
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(normalize_key(&r.generic_name)) {
                return Err(IndexError::DuplicateEntity(r.generic_name.trim().to_string()));
            }
        }

        let content_hash = content_hash(&records);
        let entity_texts: Vec<String> = records.iter().map(|r| r.entity_text()).collect();
        let item_texts: Vec<String> = records
            .iter()
            .flat_map(|r| {
                r.attributes
                    .values()
                    .map(move |t| format!("{}{ITEM_SEPARATOR}{}", r.generic_name.trim(), t.trim()))
            })
            .collect();

        let cache_path = cache_dir.map(|d| {
            let mut h = Sha256::new();
            h.update(embedder.fingerprint().as_bytes());
            d.join(format!(
                "{}-{}.emb",
                hex::encode(&h.finalize()[..8]),
                &content_hash[..16]
            ))
        });
        let expected = entity_texts.len() + item_texts.len();
        let cached = cache_path
            .as_deref()
            .and_then(|p| read_cache(p, expected));

        let (entity_vecs, item_vecs) = match cached {
            Some(mut all) => {
                let items = all.split_off(entity_texts.len());
                (all, items)
            }
            None => {
                let entity_vecs = embed_with_context(embedder, &entity_texts, "entity")?;
                let item_vecs = embed_with_context(embedder, &item_texts, "item")?;
                if let Some(p) = &cache_path {
                    if let Err(e) = write_cache(p, entity_vecs.iter().chain(item_vecs.iter())) {
                        tracing::warn!("could not write embedding cache {}: {e}", p.display());
                    }
                }
                (entity_vecs, item_vecs)
            }
        };

        let mut entities = BTreeMap::new();
        let mut entity_embeddings = BTreeMap::new();
        let mut item_iter = item_vecs.into_iter();
        let mut n_items = 0;
        for (record, entity_vec) in records.into_iter().zip(entity_vecs) {
            let name = record.generic_name.trim().to_string();
            let key = normalize_key(&name);
            let mut items = Vec::with_capacity(record.attributes.len());
            let mut attr_lookup = BTreeMap::new();
            for (attr, text) in &record.attributes {
                let embedding = item_iter.next().expect("one vector per item");
                attr_lookup.insert(normalize_key(attr), items.len());
                items.push(EntityAttributeItem {
                    entity_key: name.clone(),
                    attribute_key: AttributeKey::new(name.clone(), attr.trim()),
                    item_text: format!("{name}{ITEM_SEPARATOR}{}", text.trim()),
                    embedding,
                });
            }
            if attr_lookup.len() != items.len() {
                return Err(IndexError::InvalidRecord {
                    id: record.id.clone(),
                    reason: "attribute names collide after normalization".into(),
                });
            }
            n_items += items.len();
            entity_embeddings.insert(key.clone(), entity_vec);
            entities.insert(
                key,
                EntityNode {
                    record,
                    items,
                    attr_lookup,
                },
            );
        }

        Ok(Self {
            stats: IndexStats {
                entities: entities.len(),
                items: n_items,
            },
            entities,
            entity_embeddings,
            content_hash,
        })
    }

    pub fn stats(&self) -> IndexStats {
        self.stats
    }

    /// SHA-256 of the canonical serialized records.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn entity_node(&self, entity_key: &str) -> Result<&EntityNode> {
        self.entities
            .get(&normalize_key(entity_key))
            .ok_or_else(|| IndexError::UnknownEntity(entity_key.to_string()))
    }

    /// All items of an entity in stored attribute order.
    pub fn get_entity(&self, entity_key: &str) -> Result<&[EntityAttributeItem]> {
        Ok(&self.entity_node(entity_key)?.items)
    }

    pub fn get_attribute_item(&self, key: &AttributeKey) -> Result<&EntityAttributeItem> {
        let node = self.entity_node(&key.entity)?;
        node.attr_lookup
            .get(&normalize_key(&key.attribute))
            .map(|&i| &node.items[i])
            .ok_or_else(|| IndexError::UnknownAttribute {
                entity: key.entity.clone(),
                attribute: key.attribute.clone(),
            })
    }

    /// Whether a candidate key resolves in this index.
    pub fn contains(&self, key: &CandidateKey) -> bool {
        match &key.attribute {
            None => self.entity_node(&key.entity).is_ok(),
            Some(a) => self
                .get_attribute_item(&AttributeKey::new(key.entity.clone(), a.clone()))
                .is_ok(),
        }
    }

    /// Iterates entity display names in normalized-key order.
    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.values().map(|n| n.record.generic_name.trim())
    }

    fn embed_query(&self, query: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector> {
        if query.trim().is_empty() {
            return Err(IndexError::EmptyQuery);
        }
        embedder.embed_text(query).map_err(|source| IndexError::Embedding {
            context: "query".into(),
            source,
        })
    }

    fn coarse_ranking<'a>(&'a self, q: &EmbeddingVector) -> Vec<Scored<'a, &'a str>> {
        let mut scored: Vec<_> = self
            .entity_embeddings
            .iter()
            .map(|(k, v)| Scored {
                score: q.cosine(v),
                sort_key: k.as_str(),
                idx: k.as_str(),
                item: 0,
            })
            .collect();
        scored.sort_by(rank_desc);
        scored
    }

    /// Ranks entities by cosine similarity to the query.
    pub fn search_coarse(
        &self,
        query: &str,
        num: usize,
        embedder: &dyn Embedder,
    ) -> Result<RetrievalResult> {
        if num == 0 {
            return Err(IndexError::InvalidNum);
        }
        let q = self.embed_query(query, embedder)?;
        let candidates = self
            .coarse_ranking(&q)
            .into_iter()
            .take(num)
            .map(|s| {
                let node = &self.entities[s.idx];
                Candidate {
                    key: CandidateKey::entity(node.record.generic_name.trim()),
                    score: s.score,
                    evidence_text: node.record.entity_text(),
                }
            })
            .collect();
        Ok(RetrievalResult {
            granularity: Granularity::Coarse,
            candidates,
        })
    }

    /// Ranks entity-attribute items. `Flat` scores every item; `Hierarchical`
    /// restricts to the items of the top-`fanout` coarse entities.
    pub fn search_fine(
        &self,
        query: &str,
        num: usize,
        embedder: &dyn Embedder,
        mode: FineMode,
        fanout: usize,
    ) -> Result<RetrievalResult> {
        if num == 0 || (mode == FineMode::Hierarchical && fanout == 0) {
            return Err(IndexError::InvalidNum);
        }
        let q = self.embed_query(query, embedder)?;
        let pool: Vec<&str> = match mode {
            FineMode::Flat => self.entities.keys().map(String::as_str).collect(),
            FineMode::Hierarchical => self
                .coarse_ranking(&q)
                .into_iter()
                .take(fanout)
                .map(|s| s.idx)
                .collect(),
        };
        let mut scored: Vec<Scored<'_, (&str, String)>> = pool
            .into_iter()
            .flat_map(|ek| {
                let node = &self.entities[ek];
                let q = &q;
                node.items.iter().enumerate().map(move |(i, item)| Scored {
                    score: q.cosine(&item.embedding),
                    sort_key: (ek, normalize_key(&item.attribute_key.attribute)),
                    idx: ek,
                    item: i,
                })
            })
            .collect();
        scored.sort_by(rank_desc);
        let candidates = scored
            .into_iter()
            .take(num)
            .map(|s| {
                let item = &self.entities[s.idx].items[s.item];
                Candidate {
                    key: CandidateKey::attribute(&item.attribute_key),
                    score: s.score,
                    evidence_text: item.item_text.clone(),
                }
            })
            .collect();
        Ok(RetrievalResult {
            granularity: Granularity::Fine,
            candidates,
        })
    }

    /// Entity and item embeddings in key order.
    #[cfg(test)]
    pub(crate) fn embeddings(&self) -> (Vec<(&str, &EmbeddingVector)>, Vec<&EntityAttributeItem>) {
        let ents = self
            .entities
            .iter()
            .map(|(k, n)| (n.record.generic_name.trim(), &self.entity_embeddings[k]))
            .collect();
        let items = self.entities.values().flat_map(|n| n.items.iter()).collect();
        (ents, items)
    }
}

fn embed_with_context(
    embedder: &dyn Embedder,
    texts: &[String],
    what: &str,
) -> Result<Vec<EmbeddingVector>> {
    embedder.embed_batch(texts).map_err(|source| {
        let context = match &source {
            EmbedError::EmptyText { index: Some(i) } => format!("{what} {:?}", texts[*i]),
            _ => format!("{what} texts"),
        };
        IndexError::Embedding { context, source }
    })
}

fn content_hash(records: &[MedicineRecord]) -> String {
    let canonical = serde_json::to_vec(records).expect("records serialize");
    hex::encode(Sha256::digest(&canonical))
}

const CACHE_MAGIC: &[u8; 8] = b"DRAGEMB1";

fn write_cache<'a>(
    path: &Path,
    vectors: impl Iterator<Item = &'a EmbeddingVector>,
) -> std::io::Result<()> {
    let vectors: Vec<_> = vectors.collect();
    let dim = vectors.first().map(|v| v.dim()).unwrap_or(0);
    let mut buf = Vec::with_capacity(24 + vectors.len() * dim * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    buf.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    for v in vectors {
        for x in v.values() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)
}

fn read_cache(path: &Path, expected: usize) -> Option<Vec<EmbeddingVector>> {
    let mut buf = Vec::new();
    fs::File::open(path).ok()?.read_to_end(&mut buf).ok()?;
    if buf.len() < 24 || &buf[..8] != CACHE_MAGIC {
        return None;
    }
    let dim = u64::from_le_bytes(buf[8..16].try_into().ok()?) as usize;
    let count = u64::from_le_bytes(buf[16..24].try_into().ok()?) as usize;
    if count != expected || buf.len() != 24 + count * dim * 8 {
        return None;
    }
    let mut floats = buf[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Some(
        (0..count)
            .map(|_| EmbeddingVector::from_raw(floats.by_ref().take(dim).collect()))
            .collect(),
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embedder::LocalHashEmbedder;

    pub(crate) fn record(id: &str, name: &str, attrs: &[(&str, &str)]) -> MedicineRecord {
        MedicineRecord {
            id: id.into(),
            generic_name: name.into(),
            brand_names: vec![],
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn fixture() -> (KnowledgeIndex, LocalHashEmbedder) {
        let e = LocalHashEmbedder::new(256).unwrap();
        let recs = vec![
            record(
                "m1",
                "Amoxicillin",
                &[
                    ("usage", "Take 500 mg every 8 hours"),
                    ("contraindications", "Penicillin allergy"),
                    ("adverse_reactions", "Diarrhea, rash"),
                ],
            ),
            record(
                "m2",
                "Ibuprofen",
                &[
                    ("usage", "200-400 mg every 4-6 hours"),
                    ("contraindications", "Active peptic ulcer"),
                    ("adverse_reactions", "Dyspepsia"),
                ],
            ),
        ];
        (KnowledgeIndex::build(recs, &e).unwrap(), e)
    }

    #[test]
    fn build_counts() {
        let (idx, _) = fixture();
        assert_eq!(idx.stats(), IndexStats { entities: 2, items: 6 });
    }

    #[test]
    fn empty_database_rejected() {
        let e = LocalHashEmbedder::new(64).unwrap();
        assert_eq!(KnowledgeIndex::build(vec![], &e).unwrap_err(), IndexError::EmptyDatabase);
    }

    #[test]
    fn duplicate_names_rejected() {
        let e = LocalHashEmbedder::new(64).unwrap();
        let recs = vec![
            record("a", "amoxicillin", &[("usage", "x")]),
            record("b", "AMOXICILLIN", &[("usage", "y")]),
        ];
        assert!(matches!(
            KnowledgeIndex::build(recs, &e),
            Err(IndexError::DuplicateEntity(_))
        ));
    }

    #[test]
    fn record_without_attributes_rejected() {
        let e = LocalHashEmbedder::new(64).unwrap();
        let recs = vec![record("a", "x", &[])];
        assert!(matches!(
            KnowledgeIndex::build(recs, &e),
            Err(IndexError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn entity_lookup_is_case_insensitive() {
        let (idx, _) = fixture();
        let a = idx.get_entity("Amoxicillin").unwrap();
        let b = idx.get_entity(" amoxicillin ").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].attribute_key.attribute, "usage");
        assert_eq!(a[1].attribute_key.attribute, "contraindications");
        assert_eq!(a[0].item_text, "Amoxicillin — Take 500 mg every 8 hours");
        assert!(matches!(
            idx.get_entity("no-such-drug"),
            Err(IndexError::UnknownEntity(_))
        ));
    }

    #[test]
    fn attribute_lookup() {
        let (idx, _) = fixture();
        let it = idx
            .get_attribute_item(&AttributeKey::new("Amoxicillin", "contraindications"))
            .unwrap();
        assert_eq!(it.attribute_text(), "Penicillin allergy");
        assert!(matches!(
            idx.get_attribute_item(&AttributeKey::new("Amoxicillin", "flavor")),
            Err(IndexError::UnknownAttribute { .. })
        ));
        assert!(matches!(
            idx.get_attribute_item(&AttributeKey::new("Ghostdrug", "usage")),
            Err(IndexError::UnknownEntity(_))
        ));
    }

    #[test]
    fn coarse_self_similarity_ranks_first() {
        let (idx, e) = fixture();
        let r = idx.search_coarse("Ibuprofen", 1, &e).unwrap();
        assert_eq!(r.candidates[0].key, CandidateKey::entity("Ibuprofen"));
        assert!((r.candidates[0].score - 1.0).abs() <= 1e-6);
        let all = idx.search_coarse("Ibuprofen", 10, &e).unwrap();
        assert_eq!(all.candidates.len(), 2);
        assert!(all.candidates[0].score >= all.candidates[1].score);
    }

    #[test]
    fn fine_flat_self_similarity() {
        let (idx, e) = fixture();
        let r = idx
            .search_fine("Ibuprofen — Active peptic ulcer", 1, &e, FineMode::Flat, 1)
            .unwrap();
        assert_eq!(
            r.candidates[0].key,
            CandidateKey::attribute(&AttributeKey::new("Ibuprofen", "contraindications"))
        );
        assert_eq!(r.granularity, Granularity::Fine);
    }

    #[test]
    fn query_and_num_validation() {
        let (idx, e) = fixture();
        assert_eq!(idx.search_coarse("  ", 1, &e).unwrap_err(), IndexError::EmptyQuery);
        assert_eq!(idx.search_coarse("x", 0, &e).unwrap_err(), IndexError::InvalidNum);
        assert_eq!(
            idx.search_fine("x", 1, &e, FineMode::Hierarchical, 0).unwrap_err(),
            IndexError::InvalidNum
        );
    }

    #[test]
    fn hierarchical_restricted_to_fanout_entities() {
        let (idx, e) = fixture();
        let r = idx
            .search_fine("Amoxicillin rash", 10, &e, FineMode::Hierarchical, 1)
            .unwrap();
        assert_eq!(r.candidates.len(), 3);
        assert!(r.candidates.iter().all(|c| c.key.entity == "Amoxicillin"));
    }

    #[test]
    fn parse_database_ignores_unknown_fields() {
        let recs = parse_database(
            r#"[{"id":"m001","generic_name":"Amoxicillin","brand_names":["Amoxil"],
                "attributes":{"usage":"u","contraindications":"c"},"source":"x"}]"#,
        )
        .unwrap();
        assert_eq!(recs[0].entity_text(), "Amoxicillin; Amoxil");
        assert_eq!(recs[0].attributes.keys().collect::<Vec<_>>(), ["usage", "contraindications"]);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = LocalHashEmbedder::new(64).unwrap();
        let recs = vec![record("a", "Aspirin", &[("usage", "81 mg daily")])];
        let first = KnowledgeIndex::build_cached(recs.clone(), &e, dir.path()).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let second = KnowledgeIndex::build_cached(recs, &e, dir.path()).unwrap();
        assert_eq!(first.embeddings().1, second.embeddings().1);
        assert_eq!(first.embeddings().0, second.embeddings().0);
    }
}
