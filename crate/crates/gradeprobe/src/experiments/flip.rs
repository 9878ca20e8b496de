//! Sentiment flipping: replacing positive-sentiment words in a suffix with
//! antonyms, turning a score-raising suffix into a score-lowering one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::ExperimentError;

#[derive(Debug, Deserialize)]
struct AntonymFile {
    antonyms: BTreeMap<String, String>,
}

/// Loads a curated `positive word -> antonym` map from a TOML file with a
/// single `[antonyms]` table.
pub fn load_antonyms(path: &Path) -> Result<BTreeMap<String, String>, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    let file: AntonymFile = toml::from_str(&text)?;
    Ok(file.antonyms)
}

/// Replaces every word of the suffix that has an entry in the antonym map.
///
/// Words are maximal runs of ASCII alphabetic characters; matching is
/// case-insensitive on the map key and every other character of the suffix
/// is preserved byte-for-byte. Errors with `NoReplacementsMade` when no
/// word matched.
pub fn sentiment_flip(
    suffix: &str,
    antonyms: &BTreeMap<String, String>,
) -> Result<String, ExperimentError> {
    let mut out = String::with_capacity(suffix.len());
    let mut replaced = 0usize;
    let bytes = suffix.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_alphabetic() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
            let word = &suffix[start..i];
            match antonyms.get(&word.to_ascii_lowercase()) {
                Some(anto) => {
                    out.push_str(anto);
                    replaced += 1;
                }
                None => out.push_str(word),
            }
        } else {
            // non-alphabetic bytes pass through unchanged; the suffix is
            // ASCII-or-UTF-8 and multi-byte sequences never match
            // is_ascii_alphabetic, so they are copied verbatim
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
            out.push_str(&suffix[start..i]);
        }
    }
    if replaced == 0 {
        return Err(ExperimentError::NoReplacementsMade);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::super::gain::{run_gain_experiment, GainExperimentSpec};
    use super::super::gain::tests::{essays, problem, template};
    use super::*;
    use crate::backend::stub::FnBackend;
    use crate::backend::GenerationConfig;
    use crate::harness::gain::EvalCell;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn replaces_mapped_words_at_boundaries() {
        let m = map(&[("excellent", "terrible"), ("great", "awful")]);
        assert_eq!(
            sentiment_flip("excellent work", &m).unwrap(),
            "terrible work"
        );
        // word boundaries: "greatest" is not "great"
        assert_eq!(
            sentiment_flip("great, greatest!", &m).unwrap(),
            "awful, greatest!"
        );
        // case-insensitive match on the key
        assert_eq!(sentiment_flip("Excellent.", &m).unwrap(), "terrible.");
    }

    #[test]
    fn unmatched_suffix_errors() {
        let m = map(&[("excellent", "terrible")]);
        assert!(matches!(
            sentiment_flip("mediocre words only", &m),
            Err(ExperimentError::NoReplacementsMade)
        ));
    }

    #[test]
    fn bundled_antonym_file_parses() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/antonyms.toml");
        let m = load_antonyms(&path).unwrap();
        assert!(m.len() >= 10);
        assert!(m.values().all(|v| !v.is_empty()));
        // keys are stored lowercase so lookups stay case-insensitive
        assert!(m.keys().all(|k| k.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn flipped_suffix_drives_negative_gain_on_keyed_stub() {
        // stub rewards "excellent" and punishes "terrible"
        let backend = FnBackend::new("sentiment", |prompt: &str, _| {
            if prompt.contains("terrible") {
                "SCORE:\n1".to_string()
            } else if prompt.contains("excellent") {
                "SCORE:\n5".to_string()
            } else {
                "SCORE:\n3".to_string()
            }
        });
        let p = problem("p");
        let t = template("t");
        let owned = essays("p", 3);
        let cells = vec![EvalCell {
            problem: &p,
            template: &t,
            essays: owned.iter().collect(),
            examples: BTreeMap::new(),
        }];
        let m = map(&[("excellent", "terrible")]);
        let flipped = sentiment_flip("excellent essay", &m).unwrap();
        let gen = GenerationConfig {
            sample_count: 1,
            ..Default::default()
        };
        let up = run_gain_experiment(
            &backend,
            &cells,
            &GainExperimentSpec {
                suffix: Some("excellent essay".into()),
                gen: gen.clone(),
                seed: 5,
            },
        );
        let down = run_gain_experiment(
            &backend,
            &cells,
            &GainExperimentSpec {
                suffix: Some(flipped),
                gen,
                seed: 5,
            },
        );
        assert!(up.pooled_mean_gain > 0.0);
        assert!(down.pooled_mean_gain < 0.0);
    }
}
