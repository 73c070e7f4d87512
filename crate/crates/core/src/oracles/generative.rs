use std::fmt;
use std::sync::Arc;

use super::{
    build_class_prompt, build_saliency_prompt, map_answer_to_label, split_answer_words, Capabilities, ClassOracle,
    PromptTemplates, Result, SaliencyOracle,
};
use crate::corpus::LabelSet;

/// A prompt-in, text-out model. Implementations must decode greedily so
/// identical prompts give identical answers.
pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String>;

    fn capabilities(&self) -> Capabilities {
        Capabilities::unbounded()
    }
}

type GenerateFn = dyn Fn(&str) -> Result<String> + Send + Sync;

/// Adapter for a model running inside this process, exposed as a closure
/// over the runtime's greedy-decoding entry point.
#[derive(Clone)]
pub struct InProcessGenerator {
    generate: Arc<GenerateFn>,
    capabilities: Capabilities,
}

impl InProcessGenerator {
    pub fn new<F>(generate: F) -> Self
    where
        F: Fn(&str) -> Result<String> + Send + Sync + 'static,
    {
        Self {
            generate: Arc::new(generate),
            capabilities: Capabilities::serial(),
        }
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }
}

impl fmt::Debug for InProcessGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InProcessGenerator")
            .field("capabilities", &self.capabilities)
            .finish_non_exhaustive()
    }
}

impl TextGenerator for InProcessGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        (self.generate)(prompt)
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }
}

/// Class oracle on top of a generator: renders the (hinted) classification
/// prompt and maps the generated text onto a label.
pub struct GenerativeClassOracle<G> {
    generator: G,
    templates: PromptTemplates,
}

impl<G: TextGenerator> GenerativeClassOracle<G> {
    pub fn new(generator: G, templates: PromptTemplates) -> Self {
        Self { generator, templates }
    }
}

impl<G: TextGenerator> ClassOracle for GenerativeClassOracle<G> {
    fn classify(&self, text: &str, labels: &LabelSet, hints: Option<&[String]>) -> Result<usize> {
        let template = match hints {
            Some(_) => &self.templates.classification_with_hints,
            None => &self.templates.classification,
        };
        let prompt = build_class_prompt(template, text, labels, hints)?;
        let answer = self.generator.generate(&prompt)?;
        map_answer_to_label(&answer, labels)
    }

    fn capabilities(&self) -> Capabilities {
        self.generator.capabilities()
    }
}

/// Saliency oracle on top of an extractive or generative answerer. The answer
/// is split into words; filtering against the document happens in
/// [`super::query_saliency`].
pub struct GenerativeSaliencyOracle<G> {
    generator: G,
    templates: PromptTemplates,
}

impl<G: TextGenerator> GenerativeSaliencyOracle<G> {
    pub fn new(generator: G, templates: PromptTemplates) -> Self {
        Self { generator, templates }
    }
}

impl<G: TextGenerator> SaliencyOracle for GenerativeSaliencyOracle<G> {
    fn salient_words(&self, text: &str, label_name: &str) -> Result<Vec<String>> {
        let prompt = build_saliency_prompt(&self.templates.saliency, text, label_name)?;
        let answer = self.generator.generate(&prompt)?;
        Ok(split_answer_words(&answer))
    }

    fn capabilities(&self) -> Capabilities {
        self.generator.capabilities()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{query_class, query_saliency, OracleError};
    use std::sync::Mutex;

    const FIG_SENTENCE: &str = "I really don't like The Green Bay packers";

    #[test]
    fn noisy_generation_maps_to_label() {
        let labels = LabelSet::new(["sports", "business"]).unwrap();
        let oracle = GenerativeClassOracle::new(
            InProcessGenerator::new(|_| Ok("Sports.".into())),
            PromptTemplates::default(),
        );
        assert_eq!(query_class(&oracle, "great game", &labels, None).unwrap(), 0);
    }

    #[test]
    fn unmappable_generation_is_an_error() {
        let labels = LabelSet::new(["sports", "business"]).unwrap();
        let oracle = GenerativeClassOracle::new(
            InProcessGenerator::new(|_| Ok("no idea".into())),
            PromptTemplates::default(),
        );
        assert!(matches!(
            query_class(&oracle, "x", &labels, None),
            Err(OracleError::UnmappableAnswer(_))
        ));
    }

    #[test]
    fn hinted_queries_use_hinted_template() {
        let seen = std::sync::Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let oracle = GenerativeClassOracle::new(
            InProcessGenerator::new(move |p| {
                log.lock().unwrap().push(p.to_owned());
                Ok("negative".into())
            }),
            PromptTemplates::default(),
        );
        let labels = LabelSet::new(["positive", "negative"]).unwrap();
        let hints = vec!["don't".to_string(), "like".to_string()];
        assert_eq!(oracle.classify(FIG_SENTENCE, &labels, Some(&hints)).unwrap(), 1);
        oracle.classify(FIG_SENTENCE, &labels, None).unwrap();
        let prompts = seen.lock().unwrap();
        assert!(prompts[0].contains("Key words: don't, like."));
        assert!(!prompts[1].contains("Key words"));
        assert!(prompts[1].contains("Options: positive, negative"));
    }

    #[test]
    fn extractive_span_is_split_into_words() {
        let labels = LabelSet::new(["positive", "negative"]).unwrap();
        let oracle = GenerativeSaliencyOracle::new(
            InProcessGenerator::new(|_| Ok("really don't like".into())),
            PromptTemplates::default(),
        );
        assert_eq!(
            query_saliency(&oracle, FIG_SENTENCE, "negative", &labels).unwrap(),
            vec!["really", "don't", "like"]
        );
    }

    #[test]
    fn in_process_generator_defaults_to_serial() {
        let g = InProcessGenerator::new(|_| Ok(String::new()));
        assert_eq!(g.capabilities(), Capabilities::serial());
    }
}
