//! Scripted black-box backends for tests and dry runs.

use std::sync::Mutex;

use super::{BackendError, BlackBoxBackend, GenerationConfig};

/// Emits a fixed script of outputs, cycling when exhausted.
pub struct ScriptedBackend {
    name: String,
    script: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(name: &str, script: Vec<String>) -> Self {
        assert!(!script.is_empty());
        Self {
            name: name.to_string(),
            script,
            cursor: Mutex::new(0),
        }
    }

    /// Always answers with the same string.
    pub fn constant(name: &str, output: &str) -> Self {
        Self::new(name, vec![output.to_string()])
    }
}

impl BlackBoxBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(
        &self,
        _prompt: &str,
        config: &GenerationConfig,
    ) -> Result<Vec<String>, BackendError> {
        let mut cursor = self.cursor.lock().unwrap();
        let mut out = Vec::with_capacity(config.sample_count);
        for _ in 0..config.sample_count {
            out.push(self.script[*cursor % self.script.len()].clone());
            *cursor += 1;
        }
        Ok(out)
    }
}

/// Grades by calling a closure on the prompt. Useful for keyed stub graders
/// whose score depends on the prompt content (e.g. presence of a token).
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&str, usize) -> String + Send + Sync,
{
    pub fn new(name: &str, f: F) -> Self {
        Self {
            name: name.to_string(),
            f,
        }
    }
}

impl<F> BlackBoxBackend for FnBackend<F>
where
    F: Fn(&str, usize) -> String + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(
        &self,
        prompt: &str,
        config: &GenerationConfig,
    ) -> Result<Vec<String>, BackendError> {
        Ok((0..config.sample_count)
            .map(|s| (self.f)(prompt, s))
            .collect())
    }
}
