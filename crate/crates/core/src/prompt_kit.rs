//! Prompt templates for brainstorming, rewriting and responding, plus
//! hyperparameter grid helpers.
//!
//! Templates are TOML documents with `system` and `user` strings containing
//! `{{name}}` placeholders. Rendering substitutes every placeholder in one pass
//! over the template, so bound values are inserted literally and never
//! re-scanned for placeholders.
//!
//! The bundled templates are reconstructed wording, not an original prompt
//! set. Point `templates_dir` at replacements to override them per file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_model::{Explanation, GenerationParams, Scenario, Story, TherapyStyle};
use crate::llm_gateway::ChatRequest;

const BUILTIN_BRAINSTORM: &str = include_str!("../templates/brainstorm.toml");
const BUILTIN_REWRITE: &str = include_str!("../templates/rewrite.toml");
const BUILTIN_RESPOND: &str = include_str!("../templates/respond.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{name}`: {message}")]
    Template { name: String, message: String },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("no enumerated items found in completion")]
    Parse { raw: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

/// Sampling defaults for brainstorming.
pub fn brainstorm_defaults() -> GenerationParams {
    GenerationParams::new(1.8, 0.3, 4096)
}

/// Sampling defaults for rewriting and responding.
pub fn rewrite_defaults() -> GenerationParams {
    GenerationParams::new(0.7, 0.9, 512)
}

pub fn respond_defaults() -> GenerationParams {
    GenerationParams::new(0.7, 0.9, 512)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    #[serde(default = "one")]
    pub version: u32,
    #[serde(default)]
    pub system: Option<String>,
    pub user: String,
    pub required_placeholders: BTreeSet<String>,
}

fn one() -> u32 {
    1
}

impl PromptTemplate {
    /// Checks that the placeholders used in `system` and `user` are exactly
    /// the declared set.
    pub fn validate(&self) -> Result<(), PromptError> {
        let used = self.placeholders();
        if used != self.required_placeholders {
            let missing: Vec<_> = self.required_placeholders.difference(&used).cloned().collect();
            let undeclared: Vec<_> = used.difference(&self.required_placeholders).cloned().collect();
            return Err(self.error(format!(
                "placeholders do not match declaration (declared but unused: {missing:?}; used but undeclared: {undeclared:?})"
            )));
        }
        if self.user.trim().is_empty() {
            return Err(self.error("user template is empty".into()));
        }
        Ok(())
    }

    /// Placeholder names appearing in the template.
    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for text in self.system.iter().chain(std::iter::once(&self.user)) {
            for caps in placeholder_re().captures_iter(text) {
                out.insert(caps[1].to_string());
            }
        }
        out
    }

    /// Renders `(system, user)`. Every required placeholder must be bound.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<(Option<String>, String), PromptError> {
        for name in &self.required_placeholders {
            if !bindings.contains_key(name.as_str()) {
                return Err(self.error(format!("placeholder `{name}` is not bound")));
            }
        }
        let system = self.system.as_deref().map(|s| substitute(s, bindings));
        Ok((system, substitute(&self.user, bindings)))
    }

    fn error(&self, message: String) -> PromptError {
        PromptError::Template {
            name: self.name.clone(),
            message,
        }
    }
}

fn substitute(template: &str, bindings: &BTreeMap<&str, &str>) -> String {
    placeholder_re()
        .replace_all(template, |caps: &regex::Captures<'_>| {
            bindings.get(&caps[1]).copied().unwrap_or("").to_string()
        })
        .into_owned()
}

/// The framing clause attached to one therapy style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoEStyleSpec {
    pub style: TherapyStyle,
    pub framing_clause: String,
}

#[derive(Deserialize)]
struct TemplateFile {
    #[serde(flatten)]
    template: PromptTemplate,
    #[serde(default)]
    framing: BTreeMap<String, String>,
}

fn parse_template(source: &str, origin: &str) -> Result<(PromptTemplate, BTreeMap<String, String>), PromptError> {
    let file: TemplateFile = toml::from_str(source).map_err(|e| PromptError::Template {
        name: origin.to_string(),
        message: e.to_string(),
    })?;
    file.template.validate()?;
    Ok((file.template, file.framing))
}

/// The three generation templates and the style framings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptKit {
    pub brainstorm: PromptTemplate,
    pub rewrite: PromptTemplate,
    pub respond: PromptTemplate,
    pub styles: Vec<CoEStyleSpec>,
}

impl PromptKit {
    /// Templates compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_sources(BUILTIN_BRAINSTORM, BUILTIN_REWRITE, BUILTIN_RESPOND).expect("built-in templates are valid")
    }

    /// Loads `brainstorm.toml`, `rewrite.toml` and `respond.toml` from `dir`.
    /// Files that are absent fall back to the built-in version.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str, builtin: &'static str| -> Result<String, PromptError> {
            let path = dir.join(format!("{name}.toml"));
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(builtin.to_string()),
                Err(source) => Err(PromptError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        };
        Self::from_sources(
            &read("brainstorm", BUILTIN_BRAINSTORM)?,
            &read("rewrite", BUILTIN_REWRITE)?,
            &read("respond", BUILTIN_RESPOND)?,
        )
    }

    pub fn from_sources(brainstorm: &str, rewrite: &str, respond: &str) -> Result<Self, PromptError> {
        let (brainstorm, _) = parse_template(brainstorm, "brainstorm")?;
        let (rewrite, framing) = parse_template(rewrite, "rewrite")?;
        let (respond, _) = parse_template(respond, "respond")?;
        for (template, needed) in [
            (&brainstorm, &["count", "item_word", "scenario", "story_word"][..]),
            (&rewrite, &["framing", "story"][..]),
            (&respond, &["explanation"][..]),
        ] {
            let needed: BTreeSet<String> = needed.iter().map(|s| s.to_string()).collect();
            if template.required_placeholders != needed {
                return Err(template.error(format!("expected placeholders {needed:?}")));
            }
        }
        let mut styles = Vec::with_capacity(4);
        for style in TherapyStyle::ALL {
            let clause = framing
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(style.as_str()))
                .map(|(_, v)| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .ok_or_else(|| rewrite.error(format!("missing framing clause for {style}")))?;
            styles.push(CoEStyleSpec {
                style,
                framing_clause: clause,
            });
        }
        let distinct: BTreeSet<&str> = styles.iter().map(|s| s.framing_clause.as_str()).collect();
        if distinct.len() != styles.len() {
            return Err(rewrite.error("framing clauses must be pairwise distinct".into()));
        }
        Ok(Self {
            brainstorm,
            rewrite,
            respond,
            styles,
        })
    }

    pub fn framing(&self, style: TherapyStyle) -> &str {
        &self
            .styles
            .iter()
            .find(|s| s.style == style)
            .expect("every style has a spec")
            .framing_clause
    }

    /// Asks for `story_count` enumerated stories inspired by the scenario.
    pub fn render_brainstorm(&self, scenario: &Scenario, story_count: usize) -> Result<ChatRequest, PromptError> {
        if scenario.text.trim().is_empty() {
            return Err(PromptError::Validation(format!("scenario `{}` has empty text", scenario.id)));
        }
        if story_count == 0 {
            return Err(PromptError::Validation("story count must be at least 1".into()));
        }
        let count = story_count.to_string();
        let word = if story_count == 1 { "story" } else { "stories" };
        let bindings = BTreeMap::from([
            ("count", count.as_str()),
            ("item_word", word),
            ("scenario", scenario.text.as_str()),
            ("story_word", word),
        ]);
        let (system, prompt) = self.brainstorm.render(&bindings)?;
        Ok(ChatRequest {
            system,
            prompt,
            params: brainstorm_defaults(),
            expected_items: Some(story_count),
        })
    }

    /// Asks for a first-person rewrite; the style only changes the system
    /// message.
    pub fn render_rewrite(&self, story: &Story, style: TherapyStyle) -> Result<ChatRequest, PromptError> {
        if story.text.trim().is_empty() {
            return Err(PromptError::Validation(format!("story `{}` has empty text", story.id)));
        }
        let bindings = BTreeMap::from([("framing", self.framing(style)), ("story", story.text.as_str())]);
        let (system, prompt) = self.rewrite.render(&bindings)?;
        Ok(ChatRequest {
            system,
            prompt,
            params: rewrite_defaults(),
            expected_items: None,
        })
    }

    /// Presents the explanation as a help-seeker's message.
    pub fn render_respond(&self, explanation: &Explanation) -> Result<ChatRequest, PromptError> {
        if explanation.text.trim().is_empty() {
            return Err(PromptError::Validation(format!(
                "explanation `{}` has empty text",
                explanation.id
            )));
        }
        let bindings = BTreeMap::from([("explanation", explanation.text.as_str())]);
        let (system, prompt) = self.respond.render(&bindings)?;
        Ok(ChatRequest {
            system,
            prompt,
            params: respond_defaults(),
            expected_items: None,
        })
    }
}

/// Items split out of an enumerated completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enumerated {
    pub items: Vec<String>,
    /// Fewer items than requested were found.
    pub under_delivered: bool,
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)(\d{1,3})[.)]\s+").unwrap())
}

/// Splits `1. …\n2. …` (or `1) … 2) …`) into items.
///
/// Markers must count up from 1; a number that breaks the sequence is treated
/// as item text. An item also ends at a blank line, which drops trailing
/// commentary after the list. At most `expected_count` items are returned.
pub fn split_enumerated(completion_text: &str, expected_count: usize) -> Result<Enumerated, PromptError> {
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut next = 1usize;
    for caps in marker_re().captures_iter(completion_text) {
        let number: usize = caps[1].parse().unwrap_or(0);
        if number == next {
            let whole = caps.get(0).unwrap();
            bounds.push((whole.start(), whole.end()));
            next += 1;
        }
    }
    let mut items = Vec::new();
    for (i, &(_, body_start)) in bounds.iter().enumerate() {
        let end = bounds.get(i + 1).map_or(completion_text.len(), |b| b.0);
        let mut body = &completion_text[body_start..end];
        if let Some(cut) = body.find("\n\n").or_else(|| body.find("\r\n\r\n")) {
            body = &body[..cut];
        }
        let body = body.trim();
        if !body.is_empty() {
            items.push(body.to_string());
        }
        if items.len() == expected_count {
            break;
        }
    }
    if items.is_empty() {
        return Err(PromptError::Parse {
            raw: completion_text.to_string(),
        });
    }
    let under_delivered = items.len() < expected_count;
    if under_delivered {
        log::warn!("expected {expected_count} enumerated items, found {}", items.len());
    }
    Ok(Enumerated { items, under_delivered })
}

/// One swept hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub param_name: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn new(param_name: impl Into<String>, lo: f64, hi: f64, step: f64) -> Self {
        Self {
            param_name: param_name.into(),
            lo,
            hi,
            step,
        }
    }
}

fn decimals(x: f64) -> i32 {
    let s = format!("{}", x.abs());
    s.split_once('.').map_or(0, |(_, frac)| frac.len() as i32)
}

/// `lo, lo+step, …` up to `hi`, including `hi` when the range is a whole
/// number of steps (within 1e-9). Values are rounded to the precision of
/// `step` (or `lo`, if finer).
pub fn grid_points(spec: &GridSpec) -> Result<Vec<f64>, PromptError> {
    if !(spec.step > 0.0) || !spec.step.is_finite() {
        return Err(PromptError::Config(format!(
            "grid `{}`: step must be positive, got {}",
            spec.param_name, spec.step
        )));
    }
    if !spec.lo.is_finite() || !spec.hi.is_finite() || spec.lo > spec.hi {
        return Err(PromptError::Config(format!(
            "grid `{}`: need lo <= hi, got {}..{}",
            spec.param_name, spec.lo, spec.hi
        )));
    }
    let count = ((spec.hi - spec.lo) / spec.step + 1e-9).floor() as usize + 1;
    let scale = 10f64.powi(decimals(spec.step).max(decimals(spec.lo)));
    Ok((0..count)
        .map(|i| ((spec.lo + i as f64 * spec.step) * scale).round() / scale)
        .collect())
}

/// Cartesian product of the grids, first spec varying slowest.
pub fn grid_combinations(specs: &[GridSpec]) -> Result<Vec<Vec<(String, f64)>>, PromptError> {
    let mut combos: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for spec in specs {
        let points = grid_points(spec)?;
        combos = combos
            .iter()
            .flat_map(|prefix| {
                points.iter().map(move |&v| {
                    let mut c = prefix.clone();
                    c.push((spec.param_name.clone(), v));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

/// `base` with the combination's values applied. Only `temperature` and
/// `top_p` may be swept.
pub fn apply_combination(base: &GenerationParams, combo: &[(String, f64)]) -> Result<GenerationParams, PromptError> {
    let mut params = base.clone();
    for (name, value) in combo {
        match name.as_str() {
            "temperature" => params.temperature = *value,
            "top_p" => params.top_p = *value,
            other => {
                return Err(PromptError::Config(format!(
                    "cannot sweep `{other}` (supported: temperature, top_p)"
                )))
            }
        }
    }
    params.validate().map_err(PromptError::Config)?;
    Ok(params)
}

/// A brainstorm request for one grid point, kept for side-by-side inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSample {
    pub combination: BTreeMap<String, f64>,
    pub scenario_id: String,
    pub request: ChatRequest,
}

/// Brainstorm requests for every combination over the first `sample_size`
/// scenarios. Combinations whose parameters are invalid (e.g. `top_p` = 0)
/// are skipped.
pub fn grid_samples(
    kit: &PromptKit,
    scenarios: &[Scenario],
    specs: &[GridSpec],
    story_count: usize,
    sample_size: usize,
) -> Result<Vec<GridSample>, PromptError> {
    let mut out = Vec::new();
    for combo in grid_combinations(specs)? {
        let params = match apply_combination(&brainstorm_defaults(), &combo) {
            Ok(p) => p,
            Err(PromptError::Config(msg)) if !msg.starts_with("cannot sweep") => continue,
            Err(e) => return Err(e),
        };
        for scenario in scenarios.iter().take(sample_size) {
            let mut request = kit.render_brainstorm(scenario, story_count)?;
            request.params = params.clone();
            out.push(GridSample {
                combination: combo.iter().cloned().collect(),
                scenario_id: scenario.id.clone(),
                request,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(text: &str) -> Scenario {
        Scenario {
            id: "s1".into(),
            text: text.into(),
            severity: None,
            source: "test".into(),
        }
    }

    fn story(text: &str) -> Story {
        Story {
            id: "st1".into(),
            scenario_id: "s1".into(),
            text: text.into(),
            model_id: "m".into(),
            params: brainstorm_defaults(),
            created_at: "2024-01-01T00:00:00.000Z".into(),
        }
    }

    fn explanation(text: &str) -> Explanation {
        Explanation {
            id: "e1".into(),
            story_id: "st1".into(),
            style: TherapyStyle::Cbt,
            text: text.into(),
            model_id: "m".into(),
            params: rewrite_defaults(),
        }
    }

    #[test]
    fn brainstorm_request_shape() {
        let kit = PromptKit::builtin();
        let r = kit.render_brainstorm(&scenario("missed a deadline"), 20).unwrap();
        assert!(r.prompt.contains("missed a deadline"));
        assert!(r.prompt.contains("20 unique short stories"));
        assert!(r.prompt.contains("\"1. <story>\""));
        assert_eq!((r.params.temperature, r.params.top_p), (1.8, 0.3));
        assert_eq!(r.expected_items, Some(20));

        let single = kit.render_brainstorm(&scenario("missed a deadline"), 1).unwrap();
        assert!(single.prompt.contains("1 unique short story "));
        assert!(!single.prompt.contains("stories"));
        assert_eq!(single.expected_items, Some(1));
    }

    #[test]
    fn brainstorm_rejects_empty() {
        let kit = PromptKit::builtin();
        assert!(matches!(kit.render_brainstorm(&scenario("  "), 3), Err(PromptError::Validation(_))));
        assert!(matches!(kit.render_brainstorm(&scenario("x"), 0), Err(PromptError::Validation(_))));
    }

    #[test]
    fn braces_in_input_are_literal() {
        let kit = PromptKit::builtin();
        let text = "my boss said {{scenario}} and {{count}} {x}";
        let r = kit.render_brainstorm(&scenario(text), 2).unwrap();
        assert!(r.prompt.contains(text));
        assert_eq!(r.prompt.matches("{{").count(), 2);
    }

    #[test]
    fn rewrite_framings() {
        let kit = PromptKit::builtin();
        let s = story("Dana lost her keys.");
        let cbt = kit.render_rewrite(&s, TherapyStyle::Cbt).unwrap();
        assert!(cbt.system.as_ref().unwrap().contains("overestimating the severity of the situation"));
        let rt = kit.render_rewrite(&s, TherapyStyle::Rt).unwrap();
        assert!(rt.system.as_ref().unwrap().contains("where the root of their problems hides"));
        let dbt = kit.render_rewrite(&s, TherapyStyle::Dbt).unwrap();
        assert!(dbt.system.as_ref().unwrap().contains("difficulties controlling their emotions"));
        let pct = kit.render_rewrite(&s, TherapyStyle::Pct).unwrap();
        assert!(pct.system.as_ref().unwrap().contains("confused and unable to understand themselves"));
        assert!(cbt.prompt.contains("Dana lost her keys."));
        assert!(kit.render_rewrite(&story(""), TherapyStyle::Cbt).is_err());
    }

    #[test]
    fn respond_embeds_verbatim() {
        let kit = PromptKit::builtin();
        let text = "line one\n\nline two\n";
        let r = kit.render_respond(&explanation(text)).unwrap();
        assert!(r.prompt.contains(text));
        let long = vec!["word"; 500].join(" ");
        assert!(kit.render_respond(&explanation(&long)).unwrap().prompt.contains(&long));
        assert!(kit.render_respond(&explanation("")).is_err());
    }

    #[test]
    fn template_validation() {
        let bad = "name = \"t\"\nrequired_placeholders = [\"a\"]\nuser = \"{{a}} {{b}}\"";
        assert!(matches!(parse_template(bad, "t"), Err(PromptError::Template { .. })));
        let unused = "name = \"t\"\nrequired_placeholders = [\"a\", \"c\"]\nuser = \"{{a}}\"";
        assert!(parse_template(unused, "t").is_err());
        let ok = "name = \"t\"\nrequired_placeholders = [\"a\"]\nsystem = \"s {{ a }}\"\nuser = \"{{a}}\"";
        let (t, _) = parse_template(ok, "t").unwrap();
        let (s, u) = t.render(&BTreeMap::from([("a", "X")])).unwrap();
        assert_eq!((s.as_deref(), u.as_str()), (Some("s X"), "X"));
        assert!(t.render(&BTreeMap::new()).is_err());
    }

    #[test]
    fn load_dir_overrides_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("respond.toml"),
            "name = \"respond\"\nrequired_placeholders = [\"explanation\"]\nuser = \"Reply to: {{explanation}}\"",
        )
        .unwrap();
        let kit = PromptKit::load_dir(dir.path()).unwrap();
        assert_eq!(kit.respond.user, "Reply to: {{explanation}}");
        assert_eq!(kit.rewrite, PromptKit::builtin().rewrite);
    }

    #[test]
    fn split_examples() {
        let e = split_enumerated("1. A\n2. B\n3. C", 3).unwrap();
        assert_eq!(e.items, ["A", "B", "C"]);
        assert!(!e.under_delivered);

        let e = split_enumerated("1) A 2) B", 3).unwrap();
        assert_eq!(e.items, ["A", "B"]);
        assert!(e.under_delivered);

        match split_enumerated("Just some prose without numbers.", 3) {
            Err(PromptError::Parse { raw }) => assert_eq!(raw, "Just some prose without numbers."),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_edge_cases() {
        let text = "Here you go:\n1. She paid 3. dollars late.\n2. He left.\n\nHope this helps!";
        assert_eq!(split_enumerated(text, 5).unwrap().items, ["She paid 3. dollars late.", "He left."]);
        assert_eq!(split_enumerated("1. a\n2. b\n3. c", 2).unwrap().items, ["a", "b"]);
        assert_eq!(split_enumerated("2. a\n3. b", 2).map(|e| e.items).ok(), None);
    }

    #[test]
    fn grid_examples() {
        let g = grid_points(&GridSpec::new("temperature", 0.0, 1.0, 0.05)).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!((g[0], g[1], g[7], g[20]), (0.0, 0.05, 0.35, 1.0));
        assert_eq!(grid_points(&GridSpec::new("top_p", 0.3, 0.3, 0.05)).unwrap(), [0.3]);
        assert_eq!(
            grid_points(&GridSpec::new("top_p", 0.0, 0.17, 0.05)).unwrap(),
            [0.0, 0.05, 0.1, 0.15]
        );
        assert!(matches!(
            grid_points(&GridSpec::new("t", 0.0, 1.0, 0.0)),
            Err(PromptError::Config(_))
        ));
        assert!(grid_points(&GridSpec::new("t", 1.0, 0.0, 0.1)).is_err());
    }

    #[test]
    fn grid_product_and_samples() {
        let specs = [
            GridSpec::new("temperature", 1.7, 1.8, 0.05),
            GridSpec::new("top_p", 0.3, 0.35, 0.05),
        ];
        let combos = grid_combinations(&specs).unwrap();
        assert_eq!(combos.len(), 6);
        assert_eq!(combos[0], [("temperature".to_string(), 1.7), ("top_p".to_string(), 0.3)]);
        assert_eq!(combos[1], [("temperature".to_string(), 1.7), ("top_p".to_string(), 0.35)]);
        let scenarios: Vec<Scenario> = (0..8).map(|i| scenario(&format!("situation {i}"))).collect();
        let samples = grid_samples(&PromptKit::builtin(), &scenarios, &specs, 20, 5).unwrap();
        assert_eq!(samples.len(), 30);
        assert_eq!(samples[5].request.params.top_p, 0.35);
        assert!(grid_samples(&PromptKit::builtin(), &scenarios, &[GridSpec::new("max_tokens", 1.0, 2.0, 1.0)], 20, 5).is_err());
        // top_p = 0 is outside the valid range and skipped.
        let skipped = grid_samples(&PromptKit::builtin(), &scenarios, &[GridSpec::new("top_p", 0.0, 0.1, 0.05)], 20, 1).unwrap();
        assert_eq!(skipped.len(), 2);
    }
}
