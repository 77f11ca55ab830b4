//! Rendered prompts pinned byte-for-byte against files in `tests/golden/`.

use std::path::PathBuf;

use ilf_core::refine::{PromptValues, TemplateName, TemplateSet};
use ilf_core::wordremoval::{build_removal_prompt, RemovalTask};

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn values() -> PromptValues {
    PromptValues::new()
        .with("title", "My roommate keeps eating my food")
        .with(
            "text",
            "I live with a roommate who eats my groceries. I asked him to stop twice. He says he forgets.",
        )
        .with("summary", "Roommate eats food.")
        .with("feedback", "Mention that the poster asked twice.")
        .with(
            "refinement",
            "Roommate keeps eating my food even after I asked him twice to stop.",
        )
        .with("stem", "I live")
        .with("summary_a", "Roommate eats food.")
        .with(
            "summary_b",
            "Roommate ignores two requests to stop eating my groceries.",
        )
}

#[test]
fn every_builtin_template_matches_its_golden_file() {
    let templates = TemplateSet::default();
    let values = values();
    for name in TemplateName::ALL {
        let rendered = templates.render(name, &values).unwrap();
        let expected = golden(&format!("{}.txt", name.as_str()));
        assert_eq!(rendered, expected, "template `{}` drifted", name.as_str());
    }
}

#[test]
fn word_removal_example_prompt() {
    let task = RemovalTask::from_sentence(
        "example",
        "You are such a jerk, and a nice person, and an idiot.",
        vec!["jerk".into()],
    )
    .unwrap();
    let prompt = build_removal_prompt(&task, &TemplateSet::default()).unwrap();
    assert_eq!(prompt, golden("word_removal_example.txt"));
    assert!(prompt.ends_with("be unchanged: You are"));
    assert_eq!(task.target, " such a nice person and an idiot.");
}

#[test]
fn yes_no_and_true_false_answer_cues() {
    let templates = TemplateSet::default();
    for (i, cue) in [
        (1, "Yes or No."),
        (2, "Yes or No."),
        (3, "True or False."),
        (4, "Yes or No."),
        (5, "True or False."),
    ] {
        let body = templates.get(TemplateName::instructrm(i).unwrap()).body();
        assert!(body.ends_with(&format!("Answer {cue}\n\nAnswer:")), "prompt {i}");
    }
}
