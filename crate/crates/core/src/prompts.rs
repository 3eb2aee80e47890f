//! Versioned prompt templates. Placeholders are `{name}`.

pub const NER_EXTRACT: &str = include_str!("../prompts/ner_extract.v1.txt");
pub const NER_TEXT: &str = include_str!("../prompts/ner_text.v1.txt");
pub const NER_CONTINUE: &str = include_str!("../prompts/ner_continue.v1.txt");
pub const NER_JUDGE: &str = include_str!("../prompts/ner_judge.v1.txt");
pub const QUERY_KEYWORDS: &str = include_str!("../prompts/query_keywords.v1.txt");
pub const LOGIC_PLAN: &str = include_str!("../prompts/logic_plan.v1.txt");
pub const FILTER_JUDGE: &str = include_str!("../prompts/filter_judge.v1.txt");
pub const ARGUMENT_CHECK: &str = include_str!("../prompts/argument_check.v1.txt");
pub const RESULT_CHECK: &str = include_str!("../prompts/result_check.v1.txt");
pub const GENERATE: &str = include_str!("../prompts/generate.v1.txt");
pub const INTENT: &str = include_str!("../prompts/intent.v1.txt");

pub const COMPLETION_DELIMITER: &str = "<|COMPLETE|>";

/// Substitutes each `{key}` in `template`. Substitution is single-pass, so
/// values containing braces are inserted verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out.trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_known_keys_once() {
        assert_eq!(render("a {x} {y} {x}", &[("x", "{y}"), ("y", "2")]), "a {y} 2 {y}");
        assert_eq!(render("{unknown} {", &[]), "{unknown} {");
    }

    #[test]
    fn templates_have_their_placeholders() {
        assert!(NER_EXTRACT.contains("{entity_types}") && NER_EXTRACT.contains("{examples}"));
        assert!(NER_TEXT.contains("{text}"));
        assert!(QUERY_KEYWORDS.contains("{query}"));
        assert!(LOGIC_PLAN.contains("{query}") && LOGIC_PLAN.contains("{max_steps}"));
        assert!(GENERATE.contains("{context}"));
        assert!(INTENT.contains("{domain}"));
    }
}
