//! Deterministic oracle doubles for tests and dry runs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{Capabilities, ClassOracle, OracleError, Result, SaliencyOracle};
use crate::corpus::LabelSet;

/// Always answers the same label.
#[derive(Debug, Clone, Copy)]
pub struct ConstantClassOracle(pub usize);

impl ClassOracle for ConstantClassOracle {
    fn classify(&self, _: &str, _: &LabelSet, _: Option<&[String]>) -> Result<usize> {
        Ok(self.0)
    }
}

/// Always answers the same words, regardless of label.
#[derive(Debug, Clone)]
pub struct ConstantSaliencyOracle(pub Vec<String>);

impl SaliencyOracle for ConstantSaliencyOracle {
    fn salient_words(&self, _: &str, _: &str) -> Result<Vec<String>> {
        Ok(self.0.clone())
    }
}

/// Cycles through the labels: the k-th query for a given text returns label
/// `k mod |labels|`, so consecutive rounds never agree.
#[derive(Debug, Default)]
pub struct OscillatingClassOracle {
    calls: Mutex<HashMap<String, usize>>,
}

impl OscillatingClassOracle {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ClassOracle for OscillatingClassOracle {
    fn classify(&self, text: &str, labels: &LabelSet, _: Option<&[String]>) -> Result<usize> {
        let mut calls = self.calls.lock().expect("oracle mutex poisoned");
        let count = calls.entry(text.to_owned()).or_default();
        let label = *count % labels.len();
        *count += 1;
        Ok(label)
    }
}

/// Fails with `Unavailable` for texts containing `trigger`, otherwise delegates.
pub struct FailingClassOracle<O> {
    pub inner: O,
    pub trigger: String,
}

impl<O: ClassOracle> ClassOracle for FailingClassOracle<O> {
    fn classify(&self, text: &str, labels: &LabelSet, hints: Option<&[String]>) -> Result<usize> {
        if text.contains(&self.trigger) {
            return Err(OracleError::Unavailable("simulated outage".into()));
        }
        self.inner.classify(text, labels, hints)
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
}

/// Wraps an oracle and counts calls; optionally caps declared concurrency.
pub struct Counting<O> {
    pub inner: O,
    calls: AtomicUsize,
    max_concurrency: Option<usize>,
}

impl<O> Counting<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            max_concurrency: None,
        }
    }

    pub fn with_max_concurrency(mut self, limit: usize) -> Self {
        self.max_concurrency = Some(limit);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<O: ClassOracle> ClassOracle for Counting<O> {
    fn classify(&self, text: &str, labels: &LabelSet, hints: Option<&[String]>) -> Result<usize> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(text, labels, hints)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_concurrency: self.max_concurrency,
        }
    }
}

impl<O: SaliencyOracle> SaliencyOracle for Counting<O> {
    fn salient_words(&self, text: &str, label_name: &str) -> Result<Vec<String>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.salient_words(text, label_name)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_concurrency: self.max_concurrency,
        }
    }
}
