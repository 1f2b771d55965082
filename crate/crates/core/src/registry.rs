//! Name-keyed registries of interchangeable strategies.
//!
//! Every pluggable family (latent codecs, speech feature extractors, loss
//! weightings, optimizers, embedders, curation adapters) exposes a
//! `builtin_*()` constructor returning a [`Registry`] pre-populated with the
//! bundled backends. Callers may register additional factories before
//! resolving a [`StrategySpec`] taken from a run configuration.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Free-form options handed to a strategy factory.
pub type Options = serde_json::Map<String, serde_json::Value>;

type Factory<T> = Box<dyn Fn(&Options) -> Result<Box<T>> + Send + Sync>;

/// A strategy selection as it appears in configuration files:
/// `{"name": "identity", "options": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Options::is_empty")]
    pub options: Options,
}

impl StrategySpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self { name: name.into(), options: Options::new() }
    }

    pub fn with_option(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.options.insert(key.to_string(), value.into());
        self
    }
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, factories: BTreeMap::new() }
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&Options) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, options: &Options) -> Result<Box<T>> {
        match self.factories.get(name) {
            Some(factory) => factory(options),
            None => Err(Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            }),
        }
    }

    pub fn resolve(&self, spec: &StrategySpec) -> Result<Box<T>> {
        self.create(&spec.name, &spec.options)
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("kind", &self.kind).field("names", &self.names()).finish()
    }
}

/// Typed accessors for factory options.
pub(crate) trait OptionsExt {
    fn f64_or(&self, key: &str, default: f64) -> Result<f64>;
    fn usize_or(&self, key: &str, default: usize) -> Result<usize>;
    fn u64_or(&self, key: &str, default: u64) -> Result<u64>;
    fn str_opt(&self, key: &str) -> Result<Option<&str>>;
}

impl OptionsExt for Options {
    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::InvalidArgument(format!("option `{key}` must be a number"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| {
                Error::InvalidArgument(format!("option `{key}` must be a nonnegative integer"))
            }),
        }
    }

    fn str_opt(&self, key: &str) -> Result<Option<&str>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| Error::InvalidArgument(format!("option `{key}` must be a string"))),
        }
    }
}
