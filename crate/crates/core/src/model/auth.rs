use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::tree::{NodeId, ResourceNode, ResourceTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
    BuildingManager,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<String>,
    #[serde(default)]
    pub building_ids: BTreeSet<NodeId>,
}

impl User {
    pub fn validate(&self) -> Result<(), String> {
        match self.role {
            Role::Student | Role::Teacher if self.class_id.is_none() => {
                Err(format!("user `{}`: students and teachers need a class_id", self.id))
            }
            Role::BuildingManager if self.building_ids.is_empty() => Err(format!(
                "user `{}`: building managers need at least one building",
                self.id
            )),
            _ => Ok(()),
        }
    }

    pub fn manager(id: &str, buildings: &[&str]) -> Self {
        User {
            id: id.into(),
            role: Role::BuildingManager,
            class_id: None,
            building_ids: buildings.iter().map(|b| NodeId::new(*b)).collect(),
        }
    }

    pub fn teacher(id: &str, class_id: &str, buildings: &[&str]) -> Self {
        User {
            id: id.into(),
            role: Role::Teacher,
            class_id: Some(class_id.into()),
            building_ids: buildings.iter().map(|b| NodeId::new(*b)).collect(),
        }
    }

    pub fn student(id: &str, class_id: &str, buildings: &[&str]) -> Self {
        User {
            role: Role::Student,
            ..User::teacher(id, class_id, buildings)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    InsertBuildingData,
    ConfigureFacility,
    InsertReading,
    EditRule,
    View,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::InsertBuildingData,
        Action::ConfigureFacility,
        Action::InsertReading,
        Action::EditRule,
        Action::View,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn is_allowed(self) -> bool {
        self == Decision::Allow
    }
}

/// Role policy. Building data, facility configuration and rules belong to the
/// managers of the target's building; any role may submit readings inside its
/// own buildings; everyone may view.
pub fn authorize(user: &User, action: Action, tree: &ResourceTree, target: &ResourceNode) -> Decision {
    let in_own_building = || {
        tree.building_of(target)
            .is_some_and(|b| user.building_ids.contains(&b.id))
    };
    let allowed = match action {
        Action::View => true,
        Action::InsertReading => in_own_building(),
        Action::InsertBuildingData | Action::ConfigureFacility | Action::EditRule => {
            user.role == Role::BuildingManager && in_own_building()
        }
    };
    if allowed {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

/// Users keyed by id plus the opaque session tokens that map onto them.
#[derive(Debug, Clone, Default)]
pub struct UserDirectory {
    users: HashMap<String, User>,
    tokens: HashMap<String, String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct UserEntry {
    #[serde(flatten)]
    pub user: User,
    #[serde(default)]
    pub token: Option<String>,
}

impl UserDirectory {
    pub fn from_entries(entries: Vec<UserEntry>) -> Result<Self, String> {
        let mut dir = UserDirectory::default();
        for e in entries {
            e.user.validate()?;
            if let Some(t) = e.token {
                if dir.tokens.insert(t, e.user.id.clone()).is_some() {
                    return Err(format!("user `{}` reuses a token", e.user.id));
                }
            }
            let id = e.user.id.clone();
            if dir.users.insert(id.clone(), e.user).is_some() {
                return Err(format!("duplicate user `{id}`"));
            }
        }
        Ok(dir)
    }

    pub fn insert(&mut self, user: User, token: Option<&str>) {
        if let Some(t) = token {
            self.tokens.insert(t.to_string(), user.id.clone());
        }
        self.users.insert(user.id.clone(), user);
    }

    pub fn get(&self, id: &str) -> Option<&User> {
        self.users.get(id)
    }

    pub fn by_token(&self, token: &str) -> Option<&User> {
        self.tokens.get(token).and_then(|id| self.users.get(id))
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }
}
