use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque node identifier, unique across a tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
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

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Site,
    Building,
    Floor,
    Room,
    Meter,
}

impl NodeKind {
    pub const ALL: [NodeKind; 5] = [
        NodeKind::Site,
        NodeKind::Building,
        NodeKind::Floor,
        NodeKind::Room,
        NodeKind::Meter,
    ];

    /// Allowed-parent table. `None` stands for "no parent" (a root).
    /// Meters hang under a floor or directly under the building they measure
    /// as a whole.
    pub fn allows_parent(self, parent: Option<NodeKind>) -> bool {
        matches!(
            (self, parent),
            (NodeKind::Site, None)
                | (NodeKind::Building, Some(NodeKind::Site))
                | (NodeKind::Floor, Some(NodeKind::Building))
                | (NodeKind::Room, Some(NodeKind::Floor))
                | (NodeKind::Meter, Some(NodeKind::Floor))
                | (NodeKind::Meter, Some(NodeKind::Building))
        )
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Site => "site",
            NodeKind::Building => "building",
            NodeKind::Floor => "floor",
            NodeKind::Room => "room",
            NodeKind::Meter => "meter",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyType {
    Electricity,
    HeatingFuel,
    Gas,
    DistrictHeat,
}

/// Static facility data attached to building nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingMeta {
    pub surface_m2: f64,
    pub energy_types: BTreeSet<EnergyType>,
    pub building_type: String,
    pub construction_year: i32,
    pub occupant_count: u32,
    pub timezone: String,
}

impl BuildingMeta {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.surface_m2.is_finite() && self.surface_m2 > 0.0) {
            return Err(format!("surface_m2 must be positive, got {}", self.surface_m2));
        }
        if self.occupant_count < 1 {
            return Err("occupant_count must be at least 1".into());
        }
        if self.timezone.parse::<chrono_tz::Tz>().is_err() {
            return Err(format!("unknown timezone `{}`", self.timezone));
        }
        Ok(())
    }

    pub fn tz(&self) -> chrono_tz::Tz {
        self.timezone.parse().unwrap_or(chrono_tz::UTC)
    }
}

/// One entry of a tree definition document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDef {
    pub id: NodeId,
    pub kind: NodeKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BuildingMeta>,
}

impl NodeDef {
    pub fn new(id: &str, kind: NodeKind, name: &str, parent: Option<&str>) -> Self {
        NodeDef {
            id: NodeId::new(id),
            kind,
            name: name.to_string(),
            parent: parent.map(NodeId::new),
            metadata: None,
        }
    }

    pub fn with_meta(mut self, meta: BuildingMeta) -> Self {
        self.metadata = Some(meta);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub name: String,
    pub parent: Option<NodeId>,
    pub metadata: Option<BuildingMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("tree definition is empty")]
    Empty,
    #[error("duplicate node id `{0}`")]
    DuplicateId(NodeId),
    #[error("node `{0}` is part of a parent cycle")]
    CycleDetected(NodeId),
    #[error("node `{id}` ({kind}) cannot be placed under {}", parent.map(|k| k.to_string()).unwrap_or_else(|| "nothing (root)".into()))]
    BadParentKind {
        id: NodeId,
        kind: NodeKind,
        parent: Option<NodeKind>,
    },
    #[error("node `{id}` references unknown parent `{parent}`")]
    UnknownParent { id: NodeId, parent: NodeId },
    #[error("node `{id}` has invalid name `{name}` (allowed: letters, digits, '-')")]
    InvalidName { id: NodeId, name: String },
    #[error("node `{id}` reuses sibling name `{name}`")]
    DuplicateSiblingName { id: NodeId, name: String },
    #[error("node `{id}` has invalid metadata: {reason}")]
    BadMetadata { id: NodeId, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("no resource at path `{0}`")]
    NotFound(String),
    #[error("path `{path}` is ambiguous at segment `{segment}`")]
    AmbiguousName { path: String, segment: String },
}

pub fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

/// Validated site→building→floor→room/meter forest.
#[derive(Debug, Clone, Default)]
pub struct ResourceTree {
    nodes: Vec<ResourceNode>,
    index: HashMap<NodeId, usize>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

impl ResourceTree {
    pub fn build(defs: Vec<NodeDef>) -> Result<Self, TreeError> {
        if defs.is_empty() {
            return Err(TreeError::Empty);
        }
        let mut index = HashMap::with_capacity(defs.len());
        for (i, d) in defs.iter().enumerate() {
            if index.insert(d.id.clone(), i).is_some() {
                return Err(TreeError::DuplicateId(d.id.clone()));
            }
        }
        for d in &defs {
            if !valid_name(&d.name) {
                return Err(TreeError::InvalidName {
                    id: d.id.clone(),
                    name: d.name.clone(),
                });
            }
            if let Some(p) = &d.parent {
                if !index.contains_key(p) {
                    return Err(TreeError::UnknownParent {
                        id: d.id.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }

        // Walk each parent chain; any revisit within a chain is a cycle.
        let mut acyclic = vec![false; defs.len()];
        for start in 0..defs.len() {
            let mut chain = HashSet::new();
            let mut cur = start;
            loop {
                if acyclic[cur] {
                    break;
                }
                if !chain.insert(cur) {
                    return Err(TreeError::CycleDetected(defs[cur].id.clone()));
                }
                match &defs[cur].parent {
                    Some(p) => cur = index[p],
                    None => break,
                }
            }
            for i in chain {
                acyclic[i] = true;
            }
        }

        for d in &defs {
            let parent_kind = d.parent.as_ref().map(|p| defs[index[p]].kind);
            if !d.kind.allows_parent(parent_kind) {
                return Err(TreeError::BadParentKind {
                    id: d.id.clone(),
                    kind: d.kind,
                    parent: parent_kind,
                });
            }
            match (&d.metadata, d.kind) {
                (Some(meta), NodeKind::Building) => meta.validate().map_err(|reason| TreeError::BadMetadata {
                    id: d.id.clone(),
                    reason,
                })?,
                (Some(_), kind) => {
                    return Err(TreeError::BadMetadata {
                        id: d.id.clone(),
                        reason: format!("metadata is only allowed on buildings, not on a {kind}"),
                    })
                }
                (None, _) => {}
            }
        }

        let mut children = vec![Vec::new(); defs.len()];
        let mut roots = Vec::new();
        let mut seen_names: HashSet<(Option<usize>, &str)> = HashSet::new();
        for (i, d) in defs.iter().enumerate() {
            let parent = d.parent.as_ref().map(|p| index[p]);
            if !seen_names.insert((parent, d.name.as_str())) {
                return Err(TreeError::DuplicateSiblingName {
                    id: d.id.clone(),
                    name: d.name.clone(),
                });
            }
            match parent {
                Some(p) => children[p].push(i),
                None => roots.push(i),
            }
        }

        let nodes = defs
            .into_iter()
            .map(|d| ResourceNode {
                id: d.id,
                kind: d.kind,
                name: d.name,
                parent: d.parent,
                metadata: d.metadata,
            })
            .collect();
        Ok(ResourceTree {
            nodes,
            index,
            children,
            roots,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let defs: Vec<NodeDef> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::build(defs).map_err(|e| e.to_string())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ResourceNode> {
        self.nodes.iter()
    }

    pub fn roots(&self) -> impl Iterator<Item = &ResourceNode> {
        self.roots.iter().map(|&i| &self.nodes[i])
    }

    pub fn get(&self, id: &NodeId) -> Option<&ResourceNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn parent(&self, node: &ResourceNode) -> Option<&ResourceNode> {
        node.parent.as_ref().and_then(|p| self.get(p))
    }

    pub fn children(&self, node: &ResourceNode) -> impl Iterator<Item = &ResourceNode> {
        let idx = self.index.get(&node.id).copied();
        idx.into_iter()
            .flat_map(move |i| self.children[i].iter().map(move |&c| &self.nodes[c]))
    }

    /// Node itself followed by its ancestors up to the root.
    pub fn ancestry<'a>(&'a self, node: &'a ResourceNode) -> impl Iterator<Item = &'a ResourceNode> {
        std::iter::successors(Some(node), move |n| self.parent(n))
    }

    pub fn building_of<'a>(&'a self, node: &'a ResourceNode) -> Option<&'a ResourceNode> {
        self.ancestry(node).find(|n| n.kind == NodeKind::Building)
    }

    pub fn buildings(&self) -> impl Iterator<Item = &ResourceNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Building)
    }

    pub fn canonical_path<'a>(&'a self, node: &'a ResourceNode) -> String {
        let mut names: Vec<&str> = self.ancestry(node).map(|n| n.name.as_str()).collect();
        names.reverse();
        names.join("/")
    }

    /// Walks `path` by name from the roots.
    pub fn resolve_path(&self, path: &str) -> Result<&ResourceNode, PathError> {
        let not_found = || PathError::NotFound(path.to_string());
        let trimmed = path.trim_matches('/');
        if trimmed.is_empty() {
            return Err(not_found());
        }
        let mut level: Vec<usize> = self.roots.clone();
        let mut found = None;
        for segment in trimmed.split('/') {
            let mut matches = level.iter().copied().filter(|&i| self.nodes[i].name == segment);
            let hit = matches.next().ok_or_else(not_found)?;
            if matches.next().is_some() {
                return Err(PathError::AmbiguousName {
                    path: path.to_string(),
                    segment: segment.to_string(),
                });
            }
            found = Some(hit);
            level = self.children[hit].clone();
        }
        found.map(|i| &self.nodes[i]).ok_or_else(not_found)
    }
}

/// Segment-wise prefix test: `a/b` covers `a/b` and `a/b/c`, not `a/bc`.
pub fn path_covers(prefix: &str, path: &str) -> bool {
    let prefix = prefix.trim_matches('/');
    let path = path.trim_matches('/');
    if prefix.is_empty() {
        return true;
    }
    path == prefix || (path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'/')
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn meta(surface: f64) -> BuildingMeta {
        BuildingMeta {
            surface_m2: surface,
            energy_types: [EnergyType::Electricity].into_iter().collect(),
            building_type: "secondary-school".into(),
            construction_year: 1978,
            occupant_count: 400,
            timezone: "Europe/Athens".into(),
        }
    }

    fn sample() -> Vec<NodeDef> {
        vec![
            NodeDef::new("s1", NodeKind::Site, "site1", None),
            NodeDef::new("bA", NodeKind::Building, "buildingA", Some("s1")).with_meta(meta(1200.0)),
            NodeDef::new("f2", NodeKind::Floor, "floor2", Some("bA")),
            NodeDef::new("lx", NodeKind::Room, "lab-x", Some("f2")),
            NodeDef::new("r1", NodeKind::Room, "room-1", Some("f2")),
            NodeDef::new("m0", NodeKind::Meter, "main-meter", Some("bA")),
        ]
    }

    #[test]
    fn minimal_tree() {
        let tree = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "s", None),
            NodeDef::new("b", NodeKind::Building, "b", Some("s")),
            NodeDef::new("f", NodeKind::Floor, "f", Some("b")),
            NodeDef::new("r1", NodeKind::Room, "r1", Some("f")),
        ])
        .unwrap();
        assert_eq!(tree.len(), 4);
        let roots: Vec<_> = tree.roots().map(|n| n.id.as_str()).collect();
        assert_eq!(roots, ["s"]);
    }

    #[test]
    fn self_parent_is_cycle() {
        let err = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "s", None),
            NodeDef::new("r", NodeKind::Room, "r", Some("r")),
        ])
        .unwrap_err();
        assert_eq!(err, TreeError::CycleDetected(NodeId::new("r")));
    }

    #[test]
    fn longer_cycle() {
        let err = ResourceTree::build(vec![
            NodeDef::new("a", NodeKind::Floor, "a", Some("c")),
            NodeDef::new("b", NodeKind::Building, "b", Some("a")),
            NodeDef::new("c", NodeKind::Floor, "c", Some("b")),
        ])
        .unwrap_err();
        assert!(matches!(err, TreeError::CycleDetected(_)));
    }

    #[test]
    fn duplicate_id_and_names() {
        let err = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "s", None),
            NodeDef::new("s", NodeKind::Site, "t", None),
        ])
        .unwrap_err();
        assert_eq!(err, TreeError::DuplicateId(NodeId::new("s")));

        let err = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "s", None),
            NodeDef::new("b1", NodeKind::Building, "b", Some("s")),
            NodeDef::new("b2", NodeKind::Building, "b", Some("s")),
        ])
        .unwrap_err();
        assert!(matches!(err, TreeError::DuplicateSiblingName { id, .. } if id.as_str() == "b2"));

        let err = ResourceTree::build(vec![NodeDef::new("s", NodeKind::Site, "Site 1", None)]).unwrap_err();
        assert!(matches!(err, TreeError::InvalidName { .. }));
    }

    #[test]
    fn room_under_site_rejected() {
        let err = ResourceTree::build(vec![
            NodeDef::new("s", NodeKind::Site, "s", None),
            NodeDef::new("r", NodeKind::Room, "r", Some("s")),
        ])
        .unwrap_err();
        assert_eq!(
            err,
            TreeError::BadParentKind {
                id: NodeId::new("r"),
                kind: NodeKind::Room,
                parent: Some(NodeKind::Site)
            }
        );
    }

    /// Every (child, parent) pair built as a two- or three-node tree must be
    /// accepted exactly when the allowed-parent table lists it.
    #[test]
    fn parent_kind_table_enumeration() {
        let allowed: &[(NodeKind, Option<NodeKind>)] = &[
            (NodeKind::Site, None),
            (NodeKind::Building, Some(NodeKind::Site)),
            (NodeKind::Floor, Some(NodeKind::Building)),
            (NodeKind::Room, Some(NodeKind::Floor)),
            (NodeKind::Meter, Some(NodeKind::Floor)),
            (NodeKind::Meter, Some(NodeKind::Building)),
        ];
        // A valid chain reaching each parent kind.
        let chain_to = |kind: NodeKind| -> Vec<NodeDef> {
            let full = [
                NodeDef::new("p-site", NodeKind::Site, "p-site", None),
                NodeDef::new("p-building", NodeKind::Building, "p-building", Some("p-site")),
                NodeDef::new("p-floor", NodeKind::Floor, "p-floor", Some("p-building")),
                NodeDef::new("p-room", NodeKind::Room, "p-room", Some("p-floor")),
            ];
            match kind {
                NodeKind::Site => full[..1].to_vec(),
                NodeKind::Building => full[..2].to_vec(),
                NodeKind::Floor => full[..3].to_vec(),
                NodeKind::Room => full[..4].to_vec(),
                NodeKind::Meter => {
                    let mut v = full[..3].to_vec();
                    v.push(NodeDef::new("p-meter", NodeKind::Meter, "p-meter", Some("p-floor")));
                    v
                }
            }
        };
        for child in NodeKind::ALL {
            let parents = std::iter::once(None).chain(NodeKind::ALL.into_iter().map(Some));
            for parent in parents {
                let mut defs = match parent {
                    Some(p) => chain_to(p),
                    None => Vec::new(),
                };
                let parent_id = parent.map(|p| format!("p-{p}"));
                if child != NodeKind::Site && parent.is_none() {
                    // A lone non-site root; add a site so the tree is not just this node.
                    defs.push(NodeDef::new("p-site", NodeKind::Site, "p-site", None));
                }
                defs.push(NodeDef::new("child", child, "child", parent_id.as_deref()));
                let expect = allowed.contains(&(child, parent));
                let got = ResourceTree::build(defs);
                assert_eq!(got.is_ok(), expect, "child={child} parent={parent:?}: {got:?}");
                if let Err(e) = got {
                    assert!(matches!(e, TreeError::BadParentKind { ref id, .. } if id.as_str() == "child"));
                }
            }
        }
    }

    #[test]
    fn resolve_paths() {
        let tree = ResourceTree::build(sample()).unwrap();
        let n = tree.resolve_path("site1/buildingA/floor2/lab-x").unwrap();
        assert_eq!(n.id.as_str(), "lx");
        assert_eq!(tree.resolve_path(""), Err(PathError::NotFound(String::new())));
        assert!(tree.resolve_path("site1/buildingA/floor9").is_err());
        assert_eq!(
            tree.resolve_path("site1/buildingA/main-meter").unwrap().kind,
            NodeKind::Meter
        );
        for node in tree.nodes() {
            assert_eq!(tree.resolve_path(&tree.canonical_path(node)).unwrap(), node);
        }
    }

    #[test]
    fn building_lookup_and_metadata() {
        let tree = ResourceTree::build(sample()).unwrap();
        let lab = tree.get(&NodeId::new("lx")).unwrap();
        assert_eq!(tree.building_of(lab).unwrap().id.as_str(), "bA");
        assert!(tree.building_of(tree.get(&"s1".into()).unwrap()).is_none());

        let mut defs = sample();
        defs[2].metadata = Some(meta(10.0));
        assert!(matches!(ResourceTree::build(defs), Err(TreeError::BadMetadata { .. })));
        let mut defs = sample();
        defs[1].metadata = Some(meta(0.0));
        assert!(matches!(ResourceTree::build(defs), Err(TreeError::BadMetadata { .. })));
    }

    #[test]
    fn prefix_cover() {
        assert!(path_covers("a/b", "a/b"));
        assert!(path_covers("a/b", "a/b/c"));
        assert!(!path_covers("a/b", "a/bc"));
        assert!(!path_covers("a/b/c", "a/b"));
        assert!(path_covers("", "a"));
    }
}
