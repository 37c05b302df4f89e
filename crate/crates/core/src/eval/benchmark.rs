//! Object-binding benchmark prompts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One object/item pair row of the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub object_a: String,
    pub item_a: String,
    pub object_b: String,
    pub item_b: String,
}

/// A rendered benchmark prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub id: String,
    pub object_a: String,
    pub item_a: String,
    pub object_b: String,
    pub item_b: String,
    pub rendered: String,
}

/// Renders the benchmark template verbatim, articles included.
pub fn render_template(object_a: &str, item_a: &str, object_b: &str, item_b: &str) -> String {
    format!("a {object_a} with a {item_a} and a {object_b} with a {item_b}")
}

/// Builds benchmark prompts from pair rows; every field must be
/// non-empty and the list itself non-empty.
pub fn build_benchmark(pairs: &[PairSpec]) -> Result<Vec<BenchmarkPrompt>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyField("pair list".into()));
    }
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            for (name, value) in [
                ("object_a", &p.object_a),
                ("item_a", &p.item_a),
                ("object_b", &p.object_b),
                ("item_b", &p.item_b),
            ] {
                if value.trim().is_empty() {
                    return Err(EvalError::EmptyField(format!("pair {i}: {name}")));
                }
            }
            Ok(BenchmarkPrompt {
                id: format!("gpt4o-{:03}", i + 1),
                object_a: p.object_a.clone(),
                item_a: p.item_a.clone(),
                object_b: p.object_b.clone(),
                item_b: p.item_b.clone(),
                rendered: render_template(&p.object_a, &p.item_a, &p.object_b, &p.item_b),
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct PairFile {
    pairs: Vec<PairSpec>,
}

/// The 50-pair default set shipped with the crate (the published
/// benchmark does not enumerate its pairs; replace via `--pairs`).
pub fn default_pairs() -> Vec<PairSpec> {
    let file: PairFile = toml::from_str(include_str!("../../assets/benchmark_pairs.toml"))
        .expect("bundled pair file is valid");
    file.pairs
}

/// Loads a user-supplied pair file (same TOML schema as the default).
pub fn load_pairs(path: &Path) -> Result<Vec<PairSpec>, EvalError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let file: PairFile =
        toml::from_str(&body).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    Ok(file.pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_renders_verbatim() {
        assert_eq!(
            render_template("cat", "hat", "dog", "glasses"),
            "a cat with a hat and a dog with a glasses"
        );
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        assert!(matches!(
            build_benchmark(&[]),
            Err(EvalError::EmptyField(_))
        ));
    }

    #[test]
    fn empty_field_is_rejected() {
        let pairs = vec![PairSpec {
            object_a: "cat".into(),
            item_a: "".into(),
            object_b: "dog".into(),
            item_b: "hat".into(),
        }];
        assert!(matches!(
            build_benchmark(&pairs),
            Err(EvalError::EmptyField(_))
        ));
    }

    #[test]
    fn default_set_has_fifty_distinct_prompts() {
        let prompts = build_benchmark(&default_pairs()).unwrap();
        assert_eq!(prompts.len(), 50);
        let mut rendered: Vec<&str> = prompts.iter().map(|p| p.rendered.as_str()).collect();
        rendered.sort_unstable();
        rendered.dedup();
        assert_eq!(rendered.len(), 50, "all rendered prompts are distinct");
        for p in &prompts {
            assert_eq!(
                p.rendered,
                render_template(&p.object_a, &p.item_a, &p.object_b, &p.item_b)
            );
        }
    }
}
