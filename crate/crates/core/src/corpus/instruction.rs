//! Instruction phrasings for the four supervised task families.
//!
//! Each task has several prompt phrasings drawn from the same closed word
//! pool as the captions; the trainer assembles full sequences (prompt +
//! motion placeholders + answer) from these parts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Text prompt → motion block.
    T2m,
    /// Motion block → caption.
    M2t,
    /// Motion prefix → motion continuation.
    Predict,
    /// Caption → paraphrased caption (text only).
    PlainText,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::T2m => "t2m",
            Task::M2t => "m2t",
            Task::Predict => "predict",
            Task::PlainText => "plain_text",
        }
    }
}

/// Prompt phrasings for a task. `{caption}` marks where caption text goes.
pub fn prompts(task: Task) -> &'static [&'static str] {
    match task {
        Task::T2m => &[
            "generate a motion : {caption}",
            "show me a motion : {caption}",
            "produce a movement where {caption}",
            "act out this : {caption}",
            "make a motion : {caption}",
            "give a movement : {caption}",
        ],
        Task::M2t => &[
            "describe this motion :",
            "caption the following motion :",
            "explain this movement :",
            "give a description of this motion :",
            "say what this motion shows :",
        ],
        Task::Predict => &[
            "predict the rest of this motion :",
            "continue this motion :",
            "complete the following movement :",
            "finish this motion :",
            "extend the following motion :",
        ],
        Task::PlainText => &[
            "paraphrase : {caption}",
            "rephrase this sentence : {caption}",
            "say this differently : {caption}",
            "restate the following : {caption}",
            "give another phrasing : {caption}",
        ],
    }
}

/// All words any instruction template can emit (`{caption}` excluded).
pub fn instruction_word_pool() -> Vec<&'static str> {
    let mut words = Vec::new();
    for task in [Task::T2m, Task::M2t, Task::Predict, Task::PlainText] {
        for p in prompts(task) {
            for w in p.split_whitespace() {
                if w != "{caption}" {
                    words.push(w);
                }
            }
        }
    }
    words.sort_unstable();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_task_has_at_least_five_phrasings() {
        for task in [Task::T2m, Task::M2t, Task::Predict, Task::PlainText] {
            assert!(prompts(task).len() >= 5, "{} has too few phrasings", task.name());
        }
    }

    #[test]
    fn caption_slot_appears_exactly_where_expected() {
        for p in prompts(Task::T2m).iter().chain(prompts(Task::PlainText)) {
            assert!(p.contains("{caption}"), "'{p}' must carry a caption slot");
        }
        for p in prompts(Task::M2t).iter().chain(prompts(Task::Predict)) {
            assert!(!p.contains("{caption}"), "'{p}' must not carry a caption slot");
        }
    }

    #[test]
    fn pool_words_are_lowercase_and_unique() {
        let pool = instruction_word_pool();
        let mut seen = std::collections::HashSet::new();
        for w in &pool {
            assert_eq!(w.to_lowercase(), **w);
            assert!(seen.insert(*w));
        }
    }
}
