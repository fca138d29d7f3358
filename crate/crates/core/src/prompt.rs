//! Prompt construction for the generator and improver roles, and parsing of
//! their replies.

use std::path::Path;
use std::sync::OnceLock;
use std::{fs, io};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{render_history, render_outcome, HistoryWindow};
use crate::model::{DatasetSpec, EvaluationOutcome};

/// Structured reply of the prompt improver.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImproverOutput {
    pub reason: String,
    pub inspiration: String,
    pub suggestions: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub source_text: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub source_text: String,
    pub outcome: EvaluationOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPromptInputs {
    pub dataset: DatasetSpec,
    pub best_source: Option<String>,
    pub previous_suggestions: Option<ImproverOutput>,
    /// Embed exemplars and recent attempts. Ignored while `exemplars` is empty.
    pub extended: bool,
    pub exemplars: Vec<Exemplar>,
    pub recent_attempts: Vec<Attempt>,
}

impl GeneratorPromptInputs {
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            best_source: None,
            previous_suggestions: None,
            extended: false,
            exemplars: Vec::new(),
            recent_attempts: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("template {file} uses unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { file: String, name: String },
}

macro_rules! template_set {
    ($($field:ident => $file:literal [$($key:literal),*]),* $(,)?) => {
        /// The full set of prompt templates.
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct TemplateSet {
            $(pub $field: String,)*
        }

        impl TemplateSet {
            /// Templates compiled into the binary.
            pub fn builtin() -> Self {
                Self {
                    $($field: include_str!(concat!("../templates/", $file)).to_string(),)*
                }
            }

            /// Loads templates from `dir`, falling back to the built-in copy
            /// for any file that does not exist there.
            pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
                let mut set = Self::builtin();
                $(
                    let path = dir.join($file);
                    match fs::read_to_string(&path) {
                        Ok(text) => set.$field = text,
                        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                        Err(source) => {
                            return Err(TemplateError::Io { path: path.display().to_string(), source })
                        }
                    }
                )*
                set.validate()?;
                Ok(set)
            }

            pub fn validate(&self) -> Result<(), TemplateError> {
                $(check_placeholders($file, &self.$field, &[$($key),*])?;)*
                Ok(())
            }
        }
    };
}

template_set! {
    generator_system => "generator_system.txt" [],
    generator_role => "generator_role.txt" [],
    generator_task => "generator_task.txt" ["task_description", "dataset_name", "num_classes", "input_channels", "input_height", "input_width"],
    generator_reference => "generator_reference.txt" ["best_source"],
    generator_scratch => "generator_scratch.txt" [],
    generator_exemplars_header => "generator_exemplars_header.txt" [],
    generator_exemplar => "generator_exemplar.txt" ["rank", "accuracy", "source"],
    generator_attempts_header => "generator_attempts_header.txt" [],
    generator_attempt => "generator_attempt.txt" ["index", "outcome", "source"],
    generator_suggestions => "generator_suggestions.txt" ["reason", "inspiration", "suggestions"],
    generator_contract => "generator_contract.txt" [],
    improver_system => "improver_system.txt" [],
    improver => "improver.txt" ["best_source", "best_accuracy", "current_source", "current_outcome", "history"],
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

fn check_placeholders(file: &str, template: &str, allowed: &[&str]) -> Result<(), TemplateError> {
    for name in placeholders(template) {
        if !allowed.contains(&name) {
            return Err(TemplateError::UnknownPlaceholder {
                file: file.to_string(),
                name: name.to_string(),
            });
        }
    }
    Ok(())
}

fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    let mut rest = template;
    std::iter::from_fn(move || {
        let start = rest.find("{{")?;
        let end = rest[start + 2..].find("}}")?;
        let name = &rest[start + 2..start + 2 + end];
        rest = &rest[start + 2 + end + 2..];
        Some(name.trim())
    })
}

/// Single-pass substitution of `{{key}}` placeholders. Substituted values are
/// not re-scanned; unknown placeholders are left as they are.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else {
            break;
        };
        let name = rest[start + 2..start + 2 + len].trim();
        out.push_str(&rest[..start]);
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, value)) => out.push_str(value),
            None => out.push_str(&rest[start..start + 2 + len + 2]),
        }
        rest = &rest[start + 2 + len + 2..];
    }
    out.push_str(rest);
    out
}

fn strip_trailing_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

fn join_sections(sections: &[String]) -> String {
    let mut out = String::new();
    for (i, s) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(strip_trailing_newline(s));
        out.push('\n');
    }
    out
}

impl TemplateSet {
    pub fn generator_prompt(&self, inputs: &GeneratorPromptInputs) -> String {
        let ds = &inputs.dataset;
        let classes = ds.num_classes.to_string();
        let channels = ds.input_channels.to_string();
        let height = ds.input_height.to_string();
        let width = ds.input_width.to_string();

        let mut sections = vec![
            self.generator_role.clone(),
            render(
                &self.generator_task,
                &[
                    ("task_description", &ds.task_description),
                    ("dataset_name", &ds.name),
                    ("num_classes", &classes),
                    ("input_channels", &channels),
                    ("input_height", &height),
                    ("input_width", &width),
                ],
            ),
        ];
        match &inputs.best_source {
            Some(best) => sections.push(render(
                &self.generator_reference,
                &[("best_source", strip_trailing_newline(best))],
            )),
            None => sections.push(self.generator_scratch.clone()),
        }
        if inputs.extended && !inputs.exemplars.is_empty() {
            let mut block = self.generator_exemplars_header.clone();
            for (i, ex) in inputs.exemplars.iter().enumerate() {
                block.push_str(&render(
                    &self.generator_exemplar,
                    &[
                        ("rank", &(i + 1).to_string()),
                        ("accuracy", &crate::analytics::format_percent(ex.accuracy)),
                        ("source", strip_trailing_newline(&ex.source_text)),
                    ],
                ));
            }
            sections.push(block);
            if !inputs.recent_attempts.is_empty() {
                let mut block = self.generator_attempts_header.clone();
                for (i, at) in inputs.recent_attempts.iter().enumerate() {
                    let source = if at.source_text.is_empty() {
                        "# (no code was extracted)"
                    } else {
                        strip_trailing_newline(&at.source_text)
                    };
                    block.push_str(&render(
                        &self.generator_attempt,
                        &[
                            ("index", &(i + 1).to_string()),
                            ("outcome", &render_outcome(&at.outcome)),
                            ("source", source),
                        ],
                    ));
                }
                sections.push(block);
            }
        }
        if let Some(s) = &inputs.previous_suggestions {
            sections.push(render(
                &self.generator_suggestions,
                &[
                    ("reason", or_none(&s.reason)),
                    ("inspiration", or_none(&s.inspiration)),
                    ("suggestions", or_none(&s.suggestions)),
                ],
            ));
        }
        sections.push(self.generator_contract.clone());
        join_sections(&sections)
    }

    pub fn improver_prompt(
        &self,
        best_source: &str,
        best_accuracy: f64,
        current_source: &str,
        outcome: &EvaluationOutcome,
        window: &HistoryWindow,
    ) -> String {
        let best = if best_source.is_empty() {
            "# (no architecture has been evaluated successfully yet)"
        } else {
            strip_trailing_newline(best_source)
        };
        let current = if current_source.is_empty() {
            "# (no code could be extracted from the generator reply)"
        } else {
            strip_trailing_newline(current_source)
        };
        render(
            &self.improver,
            &[
                ("best_source", best),
                ("best_accuracy", &crate::analytics::format_percent(best_accuracy)),
                ("current_source", current),
                ("current_outcome", &render_outcome(outcome)),
                ("history", &render_history(window)),
            ],
        )
    }
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s.trim()
    }
}

fn builtin_templates() -> &'static TemplateSet {
    static BUILTIN: OnceLock<TemplateSet> = OnceLock::new();
    BUILTIN.get_or_init(TemplateSet::builtin)
}

/// Generator prompt using the built-in templates.
pub fn build_generator_prompt(inputs: &GeneratorPromptInputs) -> String {
    builtin_templates().generator_prompt(inputs)
}

/// Improver prompt using the built-in templates.
pub fn build_improver_prompt(
    best_source: &str,
    best_accuracy: f64,
    current_source: &str,
    outcome: &EvaluationOutcome,
    window: &HistoryWindow,
) -> String {
    builtin_templates().improver_prompt(best_source, best_accuracy, current_source, outcome, window)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no code defining `class Net` found in the model reply")]
pub struct ExtractionError;

struct FencedBlock<'a> {
    body: &'a str,
}

fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut open: Option<usize> = None;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let is_fence = line.trim_start().starts_with("```");
        match open {
            None if is_fence => open = Some(offset),
            Some(body_start) if is_fence && line.trim() == "```" => {
                let body = &text[body_start..line_start];
                let body = body.strip_suffix('\n').unwrap_or(body);
                let body = body.strip_suffix('\r').unwrap_or(body);
                blocks.push(FencedBlock { body });
                open = None;
            }
            _ => {}
        }
    }
    // An unterminated block (reply cut off at the token limit) runs to the end.
    if let Some(body_start) = open {
        blocks.push(FencedBlock {
            body: &text[body_start.min(text.len())..],
        });
    }
    blocks
}

/// Pulls the candidate source out of a generator reply: the last fenced
/// block containing `class Net`, else the raw reply if it contains
/// `class Net`.
pub fn extract_code(response: &str) -> Result<String, ExtractionError> {
    if let Some(block) = fenced_blocks(response)
        .into_iter()
        .rev()
        .find(|b| b.body.contains("class Net"))
    {
        return Ok(block.body.to_string());
    }
    if response.contains("class Net") {
        return Ok(response.to_string());
    }
    Err(ExtractionError)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Reason,
    Inspiration,
    Suggestions,
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(#{1,6}\s*)?(\*\*|__)?\s*(\d+[.)]\s*)?(\(?[abc]\)\s*)?(reason|inspiration|(?:improvement\s+)?suggestions?)\s*(\*\*|__)?\s*(:)?\s*(\*\*|__)?\s*(.*)$",
        )
        .expect("label regex")
    })
}

fn parse_label(line: &str) -> Option<(Section, &str)> {
    let caps = label_regex().captures(line)?;
    let heading = caps.get(1).is_some() || caps.get(2).is_some();
    let colon = caps.get(7).is_some();
    let rest = caps.get(9).map_or("", |m| m.as_str());
    if !(heading || colon || rest.trim().is_empty()) {
        return None;
    }
    let word = caps.get(5)?.as_str().to_ascii_lowercase();
    let section = if word == "reason" {
        Section::Reason
    } else if word == "inspiration" {
        Section::Inspiration
    } else {
        Section::Suggestions
    };
    Some((section, rest))
}

/// Splits an improver reply into its REASON / INSPIRATION / SUGGESTIONS
/// sections. Total: without a SUGGESTIONS label the whole reply becomes the
/// suggestions.
pub fn parse_improver_response(text: &str) -> ImproverOutput {
    let mut reason: Option<String> = None;
    let mut inspiration: Option<String> = None;
    let mut suggestions: Option<String> = None;
    let mut current: Option<Section> = None;

    for line in text.lines() {
        if let Some((section, rest)) = parse_label(line) {
            current = Some(section);
            let slot = match section {
                Section::Reason => &mut reason,
                Section::Inspiration => &mut inspiration,
                Section::Suggestions => &mut suggestions,
            };
            let buf = slot.get_or_insert_with(String::new);
            if !rest.trim().is_empty() {
                if !buf.is_empty() {
                    buf.push('\n');
                }
                buf.push_str(rest);
            }
            continue;
        }
        let slot = match current {
            Some(Section::Reason) => &mut reason,
            Some(Section::Inspiration) => &mut inspiration,
            Some(Section::Suggestions) => &mut suggestions,
            None => continue,
        };
        let buf = slot.get_or_insert_with(String::new);
        if !buf.is_empty() {
            buf.push('\n');
        }
        buf.push_str(line);
    }

    let tidy = |s: Option<String>| s.map(|s| s.trim().to_string()).unwrap_or_default();
    match suggestions {
        Some(s) => ImproverOutput {
            reason: tidy(reason),
            inspiration: tidy(inspiration),
            suggestions: s.trim().to_string(),
        },
        None => ImproverOutput {
            reason: tidy(reason),
            inspiration: tidy(inspiration),
            suggestions: text.trim().to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FailureKind;

    const NET: &str = "import torch.nn as nn\n\nclass Net(nn.Module):\n    def __init__(self):\n        super().__init__()\n    def forward(self, x):\n        return x\n";

    #[test]
    fn builtin_templates_validate() {
        TemplateSet::builtin().validate().unwrap();
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let mut set = TemplateSet::builtin();
        set.generator_reference = "{{best_sourse}}".into();
        assert!(matches!(
            set.validate(),
            Err(TemplateError::UnknownPlaceholder { name, .. }) if name == "best_sourse"
        ));
    }

    #[test]
    fn render_does_not_rescan_values() {
        assert_eq!(render("a {{x}} b", &[("x", "{{x}}")]), "a {{x}} b");
        assert_eq!(render("{{ y }}-{{z}}", &[("y", "1")]), "1-{{z}}");
    }

    #[test]
    fn bootstrap_prompt_designs_from_scratch() {
        let p = build_generator_prompt(&GeneratorPromptInputs::new(DatasetSpec::cifar10()));
        assert!(p.contains("visionary deep learning architect"));
        assert!(p.contains("Design an architecture from scratch"));
        assert!(!p.contains("## Current best implementation"));
        assert!(!p.contains("## Improvement suggestions"));
        assert!(p.contains("(batch, 10)"));
        assert!(p.contains("(batch, 3, 32, 32)"));
        assert!(p.contains("pre-trained weights"));
        assert!(p.contains("class named `Net`"));
    }

    #[test]
    fn sections_appear_in_documented_order() {
        let mut inputs = GeneratorPromptInputs::new(DatasetSpec::cifar10());
        inputs.best_source = Some(NET.into());
        inputs.previous_suggestions = Some(ImproverOutput {
            reason: "too shallow".into(),
            inspiration: "biology".into(),
            suggestions: "add batch norm".into(),
        });
        let p = build_generator_prompt(&inputs);
        let order = [
            "visionary deep learning architect",
            "## Task",
            "## Current best implementation",
            "class Net(nn.Module)",
            "## Improvement suggestions",
            "add batch norm",
            "## Output format",
        ];
        let mut last = 0;
        for marker in order {
            let pos = p[last..].find(marker).unwrap_or_else(|| panic!("{marker} missing or out of order"));
            last += pos;
        }
    }

    #[test]
    fn extended_prompt_golden() {
        let mut inputs = GeneratorPromptInputs::new(DatasetSpec::cifar10());
        inputs.best_source = Some("class Net: pass  # a".into());
        inputs.extended = true;
        inputs.exemplars = vec![
            Exemplar { source_text: "class Net: pass  # a".into(), accuracy: 0.62 },
            Exemplar { source_text: "class Net: pass  # b".into(), accuracy: 0.5 },
            Exemplar { source_text: "class Net: pass  # c".into(), accuracy: 0.432 },
        ];
        inputs.recent_attempts = vec![Attempt {
            source_text: "class Net: pass  # d".into(),
            outcome: EvaluationOutcome::failure(FailureKind::Validation, "shape (2, 1) != (2, 10)"),
        }];
        let p = build_generator_prompt(&inputs);
        let expected_tail = "\
## Top architectures discovered so far
### Exemplar 1 (accuracy: 62.0%)
```python
class Net: pass  # a
```
### Exemplar 2 (accuracy: 50.0%)
```python
class Net: pass  # b
```
### Exemplar 3 (accuracy: 43.2%)
```python
class Net: pass  # c
```

## Recent attempts and their outcomes
### Attempt 1 (error (ValidationError): shape (2, 1) != (2, 10))
```python
class Net: pass  # d
```

## Output format
";
        assert!(p.contains(expected_tail), "{p}");
        assert_eq!(p.matches("### Exemplar").count(), 3);
    }

    #[test]
    fn extended_without_exemplars_falls_back_to_standard() {
        let mut inputs = GeneratorPromptInputs::new(DatasetSpec::cifar10());
        let standard = build_generator_prompt(&inputs);
        inputs.extended = true;
        assert_eq!(build_generator_prompt(&inputs), standard);
    }

    #[test]
    fn improver_prompt_contents() {
        let p = build_improver_prompt(NET, 0.432, NET, &EvaluationOutcome::success(0.5), &HistoryWindow::new(5));
        assert!(p.contains("50.0%"));
        assert!(p.contains("accuracy: 43.2%"));
        assert!(p.contains(crate::memory::EMPTY_HISTORY_MARKER));
        assert!(p.contains("REASON:"));
        assert!(p.contains("INSPIRATION:"));
        assert!(p.contains("SUGGESTIONS:"));

        let err = EvaluationOutcome::failure(FailureKind::Validation, "output shape mismatch");
        let p = build_improver_prompt("", 0.0, NET, &err, &HistoryWindow::new(5));
        assert!(p.contains("output shape mismatch"));
        assert!(p.contains("ValidationError"));
    }

    #[test]
    fn improver_prompt_golden_for_empty_window() {
        let p = build_improver_prompt("", 0.0, "", &EvaluationOutcome::failure(FailureKind::Extraction, "no code"), &HistoryWindow::new(5));
        let expected = "\
## Best architecture so far (accuracy: 0.0%)
```python
# (no architecture has been evaluated successfully yet)
```

## Architecture evaluated in this iteration
```python
# (no code could be extracted from the generator reply)
```
Outcome: error (ExtractionError): no code

## Recent improvement attempts (oldest first):
(no prior attempts)

## Instructions
";
        assert!(p.starts_with(expected), "{p}");
    }

    #[test]
    fn prompts_are_deterministic() {
        let mut inputs = GeneratorPromptInputs::new(DatasetSpec::imagenette());
        inputs.best_source = Some(NET.into());
        assert_eq!(build_generator_prompt(&inputs), build_generator_prompt(&inputs.clone()));
    }

    // Ten reply shapes seen from small instruction-tuned models.
    #[test]
    fn extraction_fixtures() {
        let block = |lang: &str, body: &str| format!("```{lang}\n{body}\n```");
        let net_a = "class Net(nn.Module):\n    a = 1";
        let net_b = "class Net(nn.Module):\n    b = 2";
        let cases: Vec<(String, Result<&str, ExtractionError>)> = vec![
            (block("python", net_a), Ok(net_a)),
            (format!("Here you go:\n{}\nThanks", block("", net_a)), Ok(net_a)),
            (
                format!("Intro\n{}\nand\n{}", block("python", "import torch"), block("python", net_b)),
                Ok(net_b),
            ),
            (
                format!("{}\nimproved:\n{}", block("python", net_a), block("python", net_b)),
                Ok(net_b),
            ),
            (
                format!("{}\nusage:\n{}", block("python", net_a), block("bash", "python train.py")),
                Ok(net_a),
            ),
            (format!("```py\n{net_a}"), Ok(net_a)),
            (net_a.to_string(), Ok(net_a)),
            ("I cannot help with that.".to_string(), Err(ExtractionError)),
            (block("python", "def f():\n    pass"), Err(ExtractionError)),
            (String::new(), Err(ExtractionError)),
        ];
        for (i, (reply, want)) in cases.iter().enumerate() {
            let got = extract_code(reply);
            assert_eq!(got.as_deref().map_err(Clone::clone), *want, "case {i}");
        }
    }

    #[test]
    fn indented_and_crlf_fences() {
        let reply = "  ```python\r\nclass Net:\r\n    pass\r\n  ```\r\n";
        assert_eq!(extract_code(reply).unwrap(), "class Net:\r\n    pass");
    }

    #[test]
    fn canonical_improver_reply() {
        let out = parse_improver_response(
            "REASON: The network is too shallow.\nINSPIRATION: Cortical columns.\nSUGGESTIONS:\n- add a third conv block\n- use batch norm",
        );
        assert_eq!(out.reason, "The network is too shallow.");
        assert_eq!(out.inspiration, "Cortical columns.");
        assert_eq!(out.suggestions, "- add a third conv block\n- use batch norm");
    }

    #[test]
    fn improver_reply_fixtures() {
        let md = "## Reason\nOverfits.\n\n## Inspiration\nPruning in the brain.\n\n## Suggestions\nAdd dropout 0.3.";
        let out = parse_improver_response(md);
        assert_eq!(
            out,
            ImproverOutput {
                reason: "Overfits.".into(),
                inspiration: "Pruning in the brain.".into(),
                suggestions: "Add dropout 0.3.".into()
            }
        );

        let bold = "**Reason:** low capacity\n**Inspiration:** wide rivers\n**Improvement Suggestions:** double the channels";
        let out = parse_improver_response(bold);
        assert_eq!(out.reason, "low capacity");
        assert_eq!(out.inspiration, "wide rivers");
        assert_eq!(out.suggestions, "double the channels");

        let lower = "reason: a\nsuggestion: b";
        let out = parse_improver_response(lower);
        assert_eq!((out.reason.as_str(), out.inspiration.as_str(), out.suggestions.as_str()), ("a", "", "b"));

        // Prose starting with a label word is not a label.
        let prose = "REASON: x\nSUGGESTIONS: y\nReason enough to also widen layers.";
        assert_eq!(parse_improver_response(prose).suggestions, "y\nReason enough to also widen layers.");
    }

    #[test]
    fn free_text_reply_degrades_to_suggestions() {
        let out = parse_improver_response("Just add more layers.");
        assert_eq!(
            out,
            ImproverOutput {
                reason: String::new(),
                inspiration: String::new(),
                suggestions: "Just add more layers.".into()
            }
        );
        assert_eq!(parse_improver_response(""), ImproverOutput::default());
    }
}
