//! Name-keyed registries of interchangeable strategies.
//!
//! Fusion modes, tampering generators and image attacks each sit behind a
//! trait object and are picked at runtime by the name used in run configs
//! and on the command line.

use crate::error::{Error, Result};

pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<Box<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, entry: Box<T>) -> Result<()> {
        if self.entries.iter().any(|e| e.name() == entry.name()) {
            return Err(Error::Config(format!(
                "{} `{}` registered twice",
                self.kind,
                entry.name()
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Builder-style `register` for the built-in tables.
    pub fn with(mut self, entry: Box<T>) -> Self {
        self.register(entry).expect("built-in names are unique");
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown {} `{name}` (known: {})",
                    self.kind,
                    self.names().join(", ")
                ))
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name() == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().map(|e| e.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Named {
        fn greet(&self) -> String;
    }

    struct Hello;
    impl Named for Hello {
        fn name(&self) -> &'static str {
            "hello"
        }
    }
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hi".into()
        }
    }

    #[test]
    fn lookup_and_duplicates() {
        let mut reg: Registry<dyn Greeter> = Registry::new("greeter");
        reg.register(Box::new(Hello)).unwrap();
        assert_eq!(reg.get("hello").unwrap().greet(), "hi");
        assert!(matches!(reg.get("nope"), Err(Error::Config(_))));
        assert!(reg.register(Box::new(Hello)).is_err());
        assert_eq!(reg.names(), vec!["hello"]);
    }
}
