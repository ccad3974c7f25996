//! Two-tier knowledge graph: entities and relationships (with reified
//! triplet nodes for nested objects) plus temporal edges between triplets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::triplet::{
    Canonical, Entity, EntityType, EventState, EventStateTag, InferenceType, TemporalTag, Term, Triplet, Verdict,
};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("dangling reference to {0}")]
    DanglingReference(String),
    #[error("conflicting temporal relations for {0} / {1}")]
    ConflictingTemporal(String, String),
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error("bundle json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Stable content-derived node id: `e:` + hash of the entity name, or `t:` +
/// hash of the canonical triplet rendering.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn for_entity(name: &str) -> Self {
        NodeId(format!("e:{}", short_hash(name)))
    }

    pub fn for_triplet(t: &Triplet) -> Self {
        NodeId(format!("t:{}", short_hash(&t.canonical())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Entity,
    ReifiedTriplet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodePayload {
    Entity(Entity),
    Triplet(Triplet),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KgNode {
    pub id: NodeId,
    pub payload: NodePayload,
}

impl KgNode {
    pub fn kind(&self) -> NodeKind {
        match self.payload {
            NodePayload::Entity(_) => NodeKind::Entity,
            NodePayload::Triplet(_) => NodeKind::ReifiedTriplet,
        }
    }
}

/// Where a triplet came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Explicit {
        snippet: String,
    },
    Implicit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inference_type: Option<InferenceType>,
    },
}

impl Provenance {
    pub fn is_explicit(&self) -> bool {
        matches!(self, Provenance::Explicit { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Candidate,
    Validated,
    DiscardedDuplicate,
    DiscardedRejected,
}

/// One model decision about a triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub step: String,
    pub round: u32,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeObject {
    Node(NodeId),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalEdge {
    /// Id of the full triplet.
    pub id: NodeId,
    pub triplet: Triplet,
    pub subject: NodeId,
    pub relation: String,
    pub object: EdgeObject,
    pub provenance: Provenance,
    pub status: RecordStatus,
    pub premises: Vec<NodeId>,
    pub event_state: Option<EventStateTag>,
    pub audit: Vec<AuditEntry>,
}

/// Stored only as `before` or `while`; `while` edges put the smaller id first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TemporalEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub tag: TemporalTag,
}

/// A validated triplet handed to [`build_graph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTriplet {
    pub triplet: Triplet,
    pub provenance: Provenance,
    pub premises: Vec<Triplet>,
    pub audit: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoTierKg {
    pub sentence: String,
    pub model_id: String,
    pub nodes: BTreeMap<NodeId, KgNode>,
    /// Sorted by id.
    pub relational: Vec<RelationalEdge>,
    /// Sorted.
    pub temporal: Vec<TemporalEdge>,
}

impl TwoTierKg {
    pub fn empty(sentence: impl Into<String>, model_id: impl Into<String>) -> Self {
        TwoTierKg {
            sentence: sentence.into(),
            model_id: model_id.into(),
            nodes: BTreeMap::new(),
            relational: Vec::new(),
            temporal: Vec::new(),
        }
    }

    pub fn entity_nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values().filter(|n| n.kind() == NodeKind::Entity)
    }

    pub fn reified_nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values().filter(|n| n.kind() == NodeKind::ReifiedTriplet)
    }

    pub fn edge(&self, t: &Triplet) -> Option<&RelationalEdge> {
        let id = NodeId::for_triplet(t);
        self.relational
            .binary_search_by(|e| e.id.cmp(&id))
            .ok()
            .map(|i| &self.relational[i])
    }

    /// Temporal relation from `a` to `b`, reconstructing `after` from stored
    /// `before` edges. `None` when the pair is unrelated.
    pub fn temporal_between(&self, a: &Triplet, b: &Triplet) -> TemporalTag {
        let (ia, ib) = (NodeId::for_triplet(a), NodeId::for_triplet(b));
        for e in &self.temporal {
            if e.from == ia && e.to == ib {
                return e.tag;
            }
            if e.from == ib && e.to == ia {
                return e.tag.inverse();
            }
        }
        TemporalTag::None
    }
}

/// Builds the graph from the final validated triplets.
///
/// Names that appear in triplets but not in `entities` are added with type
/// `msc`. `temporal` holds reconciled relations for ordered pairs; `none`
/// entries are skipped and `after` is stored flipped as `before`.
pub fn build_graph(
    sentence: &str,
    model_id: &str,
    entities: &[Entity],
    triplets: &[GraphTriplet],
    event_states: &[(Triplet, EventStateTag)],
    temporal: &[(Triplet, Triplet, TemporalTag)],
) -> Result<TwoTierKg, KgError> {
    let mut kg = TwoTierKg::empty(sentence, model_id);

    let mut entity_types: BTreeMap<&str, EntityType> = BTreeMap::new();
    for e in entities {
        entity_types.entry(e.name.as_str()).or_insert(e.etype);
    }
    let mut add_entity = |kg: &mut TwoTierKg, name: &str| -> NodeId {
        let id = NodeId::for_entity(name);
        kg.nodes.entry(id.clone()).or_insert_with(|| KgNode {
            id: id.clone(),
            payload: NodePayload::Entity(Entity::new(
                name,
                entity_types.get(name).copied().unwrap_or(EntityType::Msc),
            )),
        });
        id
    };
    for e in entities {
        add_entity(&mut kg, &e.name);
    }

    let final_ids: BTreeSet<NodeId> = triplets.iter().map(|t| NodeId::for_triplet(&t.triplet)).collect();
    let tags: BTreeMap<NodeId, &EventStateTag> = event_states
        .iter()
        .map(|(t, tag)| (NodeId::for_triplet(t), tag))
        .collect();
    for id in tags.keys() {
        if !final_ids.contains(id) {
            let (t, _) = event_states
                .iter()
                .find(|(t, _)| &NodeId::for_triplet(t) == id)
                .unwrap();
            return Err(KgError::DanglingReference(t.canonical()));
        }
    }

    for gt in triplets {
        let t = &gt.triplet;
        let id = NodeId::for_triplet(t);
        if kg.relational.iter().any(|e| e.id == id) {
            continue;
        }
        let subject = add_entity(&mut kg, &t.subject);
        let object = object_node(&mut kg, &t.object, &mut add_entity);
        let mut premises = Vec::with_capacity(gt.premises.len());
        for p in &gt.premises {
            let pid = NodeId::for_triplet(p);
            if !final_ids.contains(&pid) {
                return Err(KgError::DanglingReference(p.canonical()));
            }
            premises.push(pid);
        }
        kg.relational.push(RelationalEdge {
            event_state: tags.get(&id).map(|t| (*t).clone()),
            id,
            triplet: t.clone(),
            subject,
            relation: t.relation.clone(),
            object,
            provenance: gt.provenance.clone(),
            status: RecordStatus::Validated,
            premises,
            audit: gt.audit.clone(),
        });
    }
    kg.relational.sort_by(|a, b| a.id.cmp(&b.id));

    for (a, b, tag) in temporal {
        let (ia, ib) = (NodeId::for_triplet(a), NodeId::for_triplet(b));
        for (id, t) in [(&ia, a), (&ib, b)] {
            if !final_ids.contains(id) {
                return Err(KgError::DanglingReference(t.canonical()));
            }
        }
        let Some(edge) = canonical_temporal(ia, ib, *tag) else {
            continue;
        };
        let key = if edge.from < edge.to {
            (edge.from.clone(), edge.to.clone())
        } else {
            (edge.to.clone(), edge.from.clone())
        };
        let existing = kg
            .temporal
            .iter()
            .find(|e| (e.from == key.0 && e.to == key.1) || (e.from == key.1 && e.to == key.0));
        match existing {
            Some(e) if *e == edge => {}
            Some(_) => return Err(KgError::ConflictingTemporal(a.canonical(), b.canonical())),
            None => {
                kg.temporal.push(edge);
            }
        }
    }
    kg.temporal.sort();
    Ok(kg)
}

fn canonical_temporal(a: NodeId, b: NodeId, tag: TemporalTag) -> Option<TemporalEdge> {
    match tag {
        TemporalTag::None => None,
        TemporalTag::Before => Some(TemporalEdge { from: a, to: b, tag }),
        TemporalTag::After => Some(TemporalEdge {
            from: b,
            to: a,
            tag: TemporalTag::Before,
        }),
        TemporalTag::While => {
            let (from, to) = if a <= b { (a, b) } else { (b, a) };
            Some(TemporalEdge { from, to, tag })
        }
    }
}

fn object_node(
    kg: &mut TwoTierKg,
    object: &Term,
    add_entity: &mut impl FnMut(&mut TwoTierKg, &str) -> NodeId,
) -> EdgeObject {
    match object {
        Term::None => EdgeObject::None,
        Term::Entity(name) => EdgeObject::Node(add_entity(kg, name)),
        Term::Nested(inner) => {
            let id = NodeId::for_triplet(inner);
            add_entity(kg, &inner.subject);
            object_node(kg, &inner.object, add_entity);
            kg.nodes.entry(id.clone()).or_insert_with(|| KgNode {
                id: id.clone(),
                payload: NodePayload::Triplet((**inner).clone()),
            });
            EdgeObject::Node(id)
        }
    }
}

// ---- json bundle ----

#[derive(Debug, Serialize, Deserialize)]
struct BundleJson {
    schema_version: String,
    sentence: String,
    model_id: String,
    entities: Vec<EntityJson>,
    triplets: Vec<TripletJson>,
    reified: Vec<ReifiedJson>,
    temporal: Vec<TemporalJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityJson {
    id: NodeId,
    name: String,
    #[serde(rename = "type")]
    etype: EntityType,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripletJson {
    id: NodeId,
    subject: NodeId,
    relation: String,
    object: String,
    provenance: Provenance,
    status: RecordStatus,
    premises: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event_state: Option<EventState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_ref: Option<String>,
    audit: Vec<AuditEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReifiedJson {
    id: NodeId,
    subject: NodeId,
    relation: String,
    object: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TemporalJson {
    from: NodeId,
    to: NodeId,
    tag: TemporalTag,
}

const NONE_OBJECT: &str = "<none>";

fn object_ref(object: &Term) -> String {
    match object {
        Term::None => NONE_OBJECT.to_string(),
        Term::Entity(name) => NodeId::for_entity(name).0,
        Term::Nested(t) => NodeId::for_triplet(t).0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    JsonBundle,
    Dot,
}

pub fn export_graph(kg: &TwoTierKg, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::JsonBundle => to_json_bundle(kg),
        ExportFormat::Dot => to_dot(kg).into_bytes(),
    }
}

fn to_json_bundle(kg: &TwoTierKg) -> Vec<u8> {
    let entities = kg
        .nodes
        .values()
        .filter_map(|n| match &n.payload {
            NodePayload::Entity(e) => Some(EntityJson {
                id: n.id.clone(),
                name: e.name.clone(),
                etype: e.etype,
            }),
            NodePayload::Triplet(_) => None,
        })
        .collect();
    let reified = kg
        .nodes
        .values()
        .filter_map(|n| match &n.payload {
            NodePayload::Triplet(t) => Some(ReifiedJson {
                id: n.id.clone(),
                subject: NodeId::for_entity(&t.subject),
                relation: t.relation.clone(),
                object: object_ref(&t.object),
            }),
            NodePayload::Entity(_) => None,
        })
        .collect();
    let triplets = kg
        .relational
        .iter()
        .map(|e| TripletJson {
            id: e.id.clone(),
            subject: e.subject.clone(),
            relation: e.relation.clone(),
            object: match &e.object {
                EdgeObject::Node(id) => id.0.clone(),
                EdgeObject::None => NONE_OBJECT.to_string(),
            },
            provenance: e.provenance.clone(),
            status: e.status,
            premises: e.premises.clone(),
            event_state: e.event_state.as_ref().map(|t| t.kind),
            time_ref: e.event_state.as_ref().and_then(|t| t.time_ref.clone()),
            audit: e.audit.clone(),
        })
        .collect();
    let temporal = kg
        .temporal
        .iter()
        .map(|e| TemporalJson {
            from: e.from.clone(),
            to: e.to.clone(),
            tag: e.tag,
        })
        .collect();
    let bundle = BundleJson {
        schema_version: SCHEMA_VERSION.to_string(),
        sentence: kg.sentence.clone(),
        model_id: kg.model_id.clone(),
        entities,
        triplets,
        reified,
        temporal,
    };
    let mut out = serde_json::to_vec_pretty(&bundle).expect("bundle serializes");
    out.push(b'\n');
    out
}

/// Reads a json bundle back into a graph.
pub fn import_graph(bytes: &[u8]) -> Result<TwoTierKg, KgError> {
    let bundle: BundleJson = serde_json::from_slice(bytes)?;
    if bundle.schema_version != SCHEMA_VERSION {
        return Err(KgError::MalformedBundle(format!(
            "unsupported schema_version {:?}",
            bundle.schema_version
        )));
    }
    let mut kg = TwoTierKg::empty(bundle.sentence, bundle.model_id);
    let mut names: BTreeMap<NodeId, String> = BTreeMap::new();
    for e in bundle.entities {
        names.insert(e.id.clone(), e.name.clone());
        kg.nodes.insert(
            e.id.clone(),
            KgNode {
                id: e.id,
                payload: NodePayload::Entity(Entity::new(e.name, e.etype)),
            },
        );
    }
    let reified: BTreeMap<NodeId, &ReifiedJson> = bundle.reified.iter().map(|r| (r.id.clone(), r)).collect();

    let resolve_name = |id: &NodeId| -> Result<String, KgError> {
        names
            .get(id)
            .cloned()
            .ok_or_else(|| KgError::DanglingReference(id.to_string()))
    };

    fn resolve_object(
        object: &str,
        names: &BTreeMap<NodeId, String>,
        reified: &BTreeMap<NodeId, &ReifiedJson>,
        depth: usize,
    ) -> Result<Term, KgError> {
        if object == NONE_OBJECT {
            return Ok(Term::None);
        }
        let id = NodeId(object.to_string());
        if let Some(name) = names.get(&id) {
            return Ok(Term::Entity(name.clone()));
        }
        if depth > 64 {
            return Err(KgError::MalformedBundle("reification cycle".into()));
        }
        let r = reified
            .get(&id)
            .ok_or_else(|| KgError::DanglingReference(object.to_string()))?;
        let subject = names
            .get(&r.subject)
            .cloned()
            .ok_or_else(|| KgError::DanglingReference(r.subject.to_string()))?;
        let inner = resolve_object(&r.object, names, reified, depth + 1)?;
        Ok(Term::nested(Triplet::new(subject, r.relation.clone(), inner)))
    }

    for r in &bundle.reified {
        let subject = resolve_name(&r.subject)?;
        let object = resolve_object(&r.object, &names, &reified, 0)?;
        let t = Triplet::new(subject, r.relation.clone(), object);
        if NodeId::for_triplet(&t) != r.id {
            return Err(KgError::MalformedBundle(format!("id mismatch for {}", r.id)));
        }
        kg.nodes.insert(
            r.id.clone(),
            KgNode {
                id: r.id.clone(),
                payload: NodePayload::Triplet(t),
            },
        );
    }

    for tj in bundle.triplets {
        let subject = resolve_name(&tj.subject)?;
        let object_term = resolve_object(&tj.object, &names, &reified, 0)?;
        let triplet = Triplet::new(subject, tj.relation.clone(), object_term);
        if NodeId::for_triplet(&triplet) != tj.id {
            return Err(KgError::MalformedBundle(format!("id mismatch for {}", tj.id)));
        }
        let object = if tj.object == NONE_OBJECT {
            EdgeObject::None
        } else {
            EdgeObject::Node(NodeId(tj.object))
        };
        kg.relational.push(RelationalEdge {
            id: tj.id,
            triplet,
            subject: tj.subject,
            relation: tj.relation,
            object,
            provenance: tj.provenance,
            status: tj.status,
            premises: tj.premises,
            event_state: tj.event_state.map(|kind| EventStateTag {
                kind,
                time_ref: tj.time_ref,
            }),
            audit: tj.audit,
        });
    }
    kg.relational.sort_by(|a, b| a.id.cmp(&b.id));
    kg.temporal = bundle
        .temporal
        .into_iter()
        .map(|t| TemporalEdge {
            from: t.from,
            to: t.to,
            tag: t.tag,
        })
        .collect();
    kg.temporal.sort();
    Ok(kg)
}

// ---- dot ----

fn quote(s: &str) -> String {
    let escaped = s.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

fn to_dot(kg: &TwoTierKg) -> String {
    let mut out = String::from("digraph kg {\n  compound=true;\n");
    out.push_str("  subgraph cluster_relational {\n    label=\"relational\";\n");
    for node in kg.nodes.values() {
        let (label, shape) = match &node.payload {
            NodePayload::Entity(e) => (format!("{} <{}>", e.name, e.etype), "ellipse"),
            NodePayload::Triplet(t) => (t.canonical(), "box"),
        };
        out.push_str(&format!(
            "    {} [label={}, shape={}];\n",
            quote(node.id.as_str()),
            quote(&label),
            shape
        ));
    }
    for e in &kg.relational {
        let target = match &e.object {
            EdgeObject::Node(id) => quote(id.as_str()),
            EdgeObject::None => {
                let sink = quote(&format!("none:{}", e.id));
                out.push_str(&format!("    {sink} [label=\"\", shape=point];\n"));
                sink
            }
        };
        let style = if e.provenance.is_explicit() { "solid" } else { "dashed" };
        out.push_str(&format!(
            "    {} -> {} [label={}, style={}];\n",
            quote(e.subject.as_str()),
            target,
            quote(&e.relation),
            style
        ));
    }
    out.push_str("  }\n");
    out.push_str("  subgraph cluster_temporal {\n    label=\"temporal\";\n");
    for e in &kg.relational {
        let mut label = e.triplet.canonical();
        if let Some(tag) = &e.event_state {
            label.push_str(&format!(" <{}>", tag.kind.tag()));
            if let Some(time) = &tag.time_ref {
                label.push_str(&format!(" `{time}`"));
            }
        }
        out.push_str(&format!(
            "    {} [label={}, shape=note];\n",
            quote(&format!("tmp:{}", e.id)),
            quote(&label)
        ));
    }
    for e in &kg.temporal {
        let dir = if e.tag == TemporalTag::While { ", dir=both" } else { "" };
        out.push_str(&format!(
            "    {} -> {} [label={}{}];\n",
            quote(&format!("tmp:{}", e.from)),
            quote(&format!("tmp:{}", e.to)),
            quote(e.tag.tag()),
            dir
        ));
    }
    out.push_str("  }\n}\n");
    out
}
