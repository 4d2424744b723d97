//! Single-brace placeholder templates for judge prompts and prefixes.

/// Placeholder names a template may reference. Anything else is rejected at
/// policy load time so a bad template cannot fail mid-request.
pub const KNOWN_PLACEHOLDERS: [&str; 4] = ["names", "topic", "question", "answer"];

/// Extract the placeholder names referenced by a template.
///
/// A placeholder is `{` followed by one or more `[a-z_]` characters and a
/// closing `}`. Brace sequences that do not match this shape are treated as
/// literal text.
pub fn placeholders(template: &str) -> Vec<&str> {
    let mut found = Vec::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(rel) = template[i + 1..].find('}') {
                let name = &template[i + 1..i + 1 + rel];
                if is_placeholder_name(name) {
                    if !found.contains(&name) {
                        found.push(name);
                    }
                    i += rel + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    found
}

fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b == b'_')
}

/// Replace every `{key}` with its value. Keys absent from `vars` are left
/// untouched; validation guarantees they never occur in loaded policies.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Render a judge prompt: substitute `vars`, then place `subject` either at
/// the `{subject_key}` placeholder or, when the template does not reference
/// it, appended after a single newline.
pub fn render_with_subject(
    template: &str,
    vars: &[(&str, &str)],
    subject_key: &str,
    subject: &str,
) -> String {
    let rendered = render(template, vars);
    let token = format!("{{{subject_key}}}");
    if rendered.contains(&token) {
        rendered.replace(&token, subject)
    } else {
        format!("{rendered}\n{subject}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_known_placeholders() {
        let t = "Does this mention {names}? Topic: {topic}.";
        assert_eq!(placeholders(t), vec!["names", "topic"]);
    }

    #[test]
    fn ignores_non_placeholder_braces() {
        assert!(placeholders("a {B} c {1} d {} e { names }").is_empty());
        assert_eq!(placeholders("{names} and {names}"), vec!["names"]);
    }

    #[test]
    fn renders_all_occurrences() {
        let out = render("{topic} and {topic}", &[("topic", "books")]);
        assert_eq!(out, "books and books");
    }

    #[test]
    fn subject_appended_when_no_placeholder() {
        let out = render_with_subject("Is this fine?", &[], "question", "q1");
        assert_eq!(out, "Is this fine?\nq1");
    }

    #[test]
    fn subject_substituted_when_placeholder_present() {
        let out = render_with_subject("Q: {question}!", &[], "question", "q1");
        assert_eq!(out, "Q: q1!");
    }
}
