//! Resource tree, sensor kinds, users and the role policy shared by every
//! other module.

mod auth;
mod kind;
mod tree;

use std::sync::{Arc, Mutex, RwLock};

pub use auth::{authorize, Action, Decision, Role, User, UserDirectory, UserEntry};
pub use kind::{Nature, SensorKind, UnknownKind};
pub use tree::{
    path_covers, valid_name, BuildingMeta, EnergyType, NodeDef, NodeId, NodeKind, PathError, ResourceNode,
    ResourceTree, TreeError,
};

/// Read-mostly shared value. Readers grab the current `Arc` and keep working
/// on it; writers are serialized and publish a whole new value.
#[derive(Debug)]
pub struct Published<T> {
    current: RwLock<Arc<T>>,
    writer: Mutex<()>,
}

impl<T> Published<T> {
    pub fn new(value: T) -> Self {
        Published {
            current: RwLock::new(Arc::new(value)),
            writer: Mutex::new(()),
        }
    }

    pub fn load(&self) -> Arc<T> {
        self.current.read().expect("snapshot lock poisoned").clone()
    }

    /// Applies `f` to a copy of the current value and publishes the result if
    /// `f` succeeds.
    pub fn update<E>(&self, f: impl FnOnce(&T) -> Result<T, E>) -> Result<Arc<T>, E> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let next = Arc::new(f(&self.load())?);
        *self.current.write().expect("snapshot lock poisoned") = next.clone();
        Ok(next)
    }

    pub fn replace(&self, value: T) -> Arc<T> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let next = Arc::new(value);
        *self.current.write().expect("snapshot lock poisoned") = next.clone();
        next
    }
}
