//! Name-keyed registries for interchangeable strategies (count families,
//! contrast codings, changepoint samplers).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    /// Registers `entry` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, entry: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy { kind: self.kind, name: name.to_string() })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl<T: ?Sized> std::fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("entries", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn greet(&self) -> String;
    }
    struct Hello;
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn lookup_by_name() {
        let mut reg: Registry<dyn Greeter> = Registry::new("greeter");
        reg.register("hello", Arc::new(Hello));
        assert_eq!(reg.get("hello").unwrap().greet(), "hello");
        let err = reg.get("bye").err().unwrap();
        assert_eq!(err.to_string(), "unknown greeter `bye`");
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["hello"]);
    }
}
