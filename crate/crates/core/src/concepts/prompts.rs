//! Prompt templates for concept generation and the reply parser.

use super::ConceptError;

/// Opening delimiter of the concept block in an LLM reply.
pub const BLOCK_BEGIN: &str = "<concepts begin>";
/// Closing delimiter of the concept block in an LLM reply.
pub const BLOCK_END: &str = "</concepts end>";
/// Prefix every concept line is asked to carry.
pub const CONCEPT_PREFIX: &str = "The final concept is: ";

/// Number of concepts each request asks for by default.
pub const DEFAULT_PER_CALL: usize = 10;

const FORMAT_RULES_HEAD: &str = "IMPORTANT: Your response must follow this exact format:

<concepts begin>
concept1
concept2
concept3
</concepts end>

Rules:
- Start with <concepts begin> and end with </concepts end>
- Each concept should be on a new line
- Each concept MUST start with \"The final concept is: \"";

const FORMAT_RULES_TAIL: &str = "- Avoid generic or ambiguous concepts
- Each concept should be unique and distinct from others
- Keep each concept brief (ideally ≤6 words), specific, and easy for CLIP to parse.";

/// System prompt for contrastive (discriminative) concept generation.
pub fn contrastive_system_prompt() -> String {
    format!(
        "You are a visual concept proposer tasked with enhancing text descriptions for zero-shot image classification on the test dataset using CLIP.

Given:
- A core class from the test dataset
- The set of other classes in the dataset

Task:
Propose concise, visually discriminative concepts to append to the text description (i.e., \"A photo of {{core class}} with {{your concept}}\") that help CLIP better distinguish the core class from the other classes.

Guidelines:
- Analyze the unique visual characteristics of the core class compared to other classes
- Propose concepts that capture these discriminative visual features.
- Ensure concepts are concrete, easily understandable by CLIP, and specific to the test dataset.
- Each concept should enable CLIP to more accurately classify images of the core class while minimizing confusion with other classes.

{FORMAT_RULES_HEAD}
- Ensure concepts are clear, specific, and relevant to the core class
{FORMAT_RULES_TAIL}"
    )
}

/// System prompt for descriptive generation, which never sees other classes.
pub fn descriptive_system_prompt() -> String {
    format!(
        "You are a visual concept proposer tasked with enhancing text descriptions for zero-shot image classification on the test dataset using CLIP.

Given:
- A class from the test dataset

Task:
Propose descriptive concepts to append to the text description (i.e., \"A photo of {{core class}} with {{your concept}}\") that help CLIP better understand and recognize the core class.

Guidelines:
- Focus on the visual characteristics and attributes of the core class itself.
- Generate descriptive concepts that capture various aspects, appearances, or contexts of the core class.
- Ensure concepts are concrete, easily understandable by CLIP, and specific to the test dataset.
- Think about different visual perspectives, settings, or attributes that describe the core class.

{FORMAT_RULES_HEAD}
- Ensure concepts are clear, specific, and relevant to the given class
{FORMAT_RULES_TAIL}"
    )
}

/// A rendered request: system text and user text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

fn check_class(class_name: &str) -> Result<(), ConceptError> {
    if class_name.trim().is_empty() {
        Err(ConceptError::EmptyClassName)
    } else {
        Ok(())
    }
}

/// Contrastive request naming the hard-negative neighbors.
pub fn render_contrastive_prompt(
    class_name: &str,
    neighbors: &[String],
) -> Result<RenderedPrompt, ConceptError> {
    render_contrastive_prompt_n(class_name, neighbors, DEFAULT_PER_CALL)
}

pub fn render_contrastive_prompt_n(
    class_name: &str,
    neighbors: &[String],
    per_call: usize,
) -> Result<RenderedPrompt, ConceptError> {
    check_class(class_name)?;
    if neighbors.is_empty() {
        return Err(ConceptError::NoNeighbors(class_name.to_string()));
    }
    Ok(RenderedPrompt {
        system: contrastive_system_prompt(),
        user: format!(
            "Core class: {class_name}. Other classes: {}. Please generate {per_call} unique and visually discriminative concepts. Follow the required format and rules.",
            neighbors.join(", ")
        ),
    })
}

/// Descriptive request about the class alone.
pub fn render_descriptive_prompt(class_name: &str) -> Result<RenderedPrompt, ConceptError> {
    render_descriptive_prompt_n(class_name, DEFAULT_PER_CALL)
}

pub fn render_descriptive_prompt_n(
    class_name: &str,
    per_call: usize,
) -> Result<RenderedPrompt, ConceptError> {
    check_class(class_name)?;
    Ok(RenderedPrompt {
        system: descriptive_system_prompt(),
        user: format!(
            "Core class: {class_name}. Please generate {per_call} unique and descriptive concepts that capture different visual aspects of this class."
        ),
    })
}

/// Extracts concept lines from an LLM reply.
///
/// Lines missing the mandated prefix are kept after trimming.
pub fn parse_concepts(response: &str) -> Result<Vec<String>, ConceptError> {
    let missing = || ConceptError::Parse {
        raw: response.to_string(),
    };
    let start = response.find(BLOCK_BEGIN).ok_or_else(missing)? + BLOCK_BEGIN.len();
    let len = response[start..].find(BLOCK_END).ok_or_else(missing)?;
    let concepts: Vec<String> = response[start..start + len]
        .lines()
        .map(|line| {
            let line = line.trim();
            line.strip_prefix(CONCEPT_PREFIX.trim_end())
                .map(str::trim)
                .unwrap_or(line)
                .to_string()
        })
        .filter(|c| !c.is_empty())
        .collect();
    if concepts.is_empty() {
        return Err(ConceptError::NoConcepts {
            raw: response.to_string(),
        });
    }
    Ok(concepts)
}

/// Formats concepts the way a compliant reply would.
pub fn format_reply(concepts: &[&str]) -> String {
    let mut out = String::from(BLOCK_BEGIN);
    for c in concepts {
        out.push('\n');
        out.push_str(CONCEPT_PREFIX);
        out.push_str(c);
    }
    out.push('\n');
    out.push_str(BLOCK_END);
    out
}

/// Concept prompt fed to the text encoder: `A photo of a <class> with <concept>.`
pub fn render_prompt(class_name: &str, concept_text: &str) -> String {
    format!("A photo of a {class_name} with {concept_text}.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_user_text() {
        let p = render_contrastive_prompt("beagle", &["basset hound".to_string()]).unwrap();
        assert!(p
            .user
            .contains("Core class: beagle. Other classes: basset hound."));
        assert!(p
            .system
            .contains("Your response must follow this exact format"));
        assert!(p.system.contains("The set of other classes in the dataset"));
        let many = render_contrastive_prompt("a", &["b".into(), "c".into()]).unwrap();
        assert!(many.user.contains("Other classes: b, c."));
    }

    #[test]
    fn contrastive_errors() {
        assert!(matches!(
            render_contrastive_prompt("x", &[]),
            Err(ConceptError::NoNeighbors(_))
        ));
        assert!(matches!(
            render_contrastive_prompt("  ", &["y".into()]),
            Err(ConceptError::EmptyClassName)
        ));
    }

    #[test]
    fn descriptive_prompt() {
        let p = render_descriptive_prompt("beagle").unwrap();
        assert!(p
            .user
            .starts_with("Core class: beagle. Please generate 10 unique and descriptive concepts"));
        assert!(!p.system.to_lowercase().contains("other classes"));
        assert!(!p.user.to_lowercase().contains("other classes"));
        assert_eq!(p, render_descriptive_prompt("beagle").unwrap());
        assert!(render_descriptive_prompt("").is_err());
    }

    #[test]
    fn parses_reply() {
        let reply = "<concepts begin>\nThe final concept is: droopy long ears\nThe final concept is: tricolor coat\n</concepts end>";
        assert_eq!(
            parse_concepts(reply).unwrap(),
            vec!["droopy long ears", "tricolor coat"]
        );
    }

    #[test]
    fn lenient_lines_and_chatter() {
        let reply = "Sure! Here you go.\n<concepts begin>\n  white-tipped tail \n\nThe final concept is:   short coat\n</concepts end>\nHope this helps";
        assert_eq!(
            parse_concepts(reply).unwrap(),
            vec!["white-tipped tail", "short coat"]
        );
    }

    #[test]
    fn parse_failures() {
        assert!(matches!(
            parse_concepts("droopy ears\ntricolor"),
            Err(ConceptError::Parse { .. })
        ));
        assert!(matches!(
            parse_concepts("<concepts begin>\nears"),
            Err(ConceptError::Parse { .. })
        ));
        assert!(matches!(
            parse_concepts("<concepts begin>\nThe final concept is: \n</concepts end>"),
            Err(ConceptError::NoConcepts { .. })
        ));
    }

    #[test]
    fn format_then_parse() {
        let c = ["a", "b c", "d-e"];
        assert_eq!(parse_concepts(&format_reply(&c)).unwrap(), c);
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            render_prompt("beagle", "droopy long ears or tricolor coat"),
            "A photo of a beagle with droopy long ears or tricolor coat."
        );
        assert_eq!(
            render_prompt("great white shark", "serrated teeth"),
            "A photo of a great white shark with serrated teeth."
        );
    }
}
