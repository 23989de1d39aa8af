//! Caption templates per motion class.
//!
//! Every class has six phrasings: the first four are used for train records,
//! the last two are reserved for val/test records so text metrics are scored
//! against phrasings never seen in training targets. All templates share one
//! closed word pool (so held-out captions introduce no new words), are
//! lowercase, space-separated, and always contain the class word itself.

use super::classes::{ClipParams, Direction};

/// Templates used for train records.
pub const TRAIN_TEMPLATES: std::ops::Range<usize> = 0..4;
/// Templates reserved for val/test records.
pub const EVAL_TEMPLATES: std::ops::Range<usize> = 4..6;
pub const N_TEMPLATES: usize = 6;

fn speed_phrase(speed: f64) -> &'static str {
    if speed < 0.9 {
        "slowly"
    } else if speed > 1.35 {
        "quickly"
    } else {
        "at a steady pace"
    }
}

fn dir_phrase(class: &str, d: Direction) -> &'static str {
    match class {
        "walk" | "run" => match d {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Left => "to the left",
            Direction::Right => "to the right",
        },
        "circle" | "turn" => match d {
            Direction::Left => "to the left",
            _ => "to the right",
        },
        "wave" => match d {
            Direction::Left => "the left hand",
            _ => "the right hand",
        },
        "kick" => match d {
            Direction::Left => "the left leg",
            _ => "the right leg",
        },
        _ => "",
    }
}

/// Render template `idx` (0..6) for a class and its parameters.
pub fn caption_for(class: &str, params: &ClipParams, idx: usize) -> String {
    let sp = speed_phrase(params.speed);
    let dp = dir_phrase(class, params.direction);
    let text = match class {
        "walk" => match idx {
            0 => format!("a person walks {dp} {sp}"),
            1 => format!("someone is walking {dp} {sp}"),
            2 => format!("a person walks {sp} {dp}"),
            3 => format!("a figure is walking {sp} {dp}"),
            4 => format!("the person walks {dp} {sp}"),
            _ => format!("someone walks {sp} {dp}"),
        },
        "run" => match idx {
            0 => format!("a person runs {dp} {sp}"),
            1 => format!("someone is running {dp} {sp}"),
            2 => format!("a person runs {sp} {dp}"),
            3 => format!("a figure is running {sp} {dp}"),
            4 => format!("the person runs {dp} {sp}"),
            _ => format!("someone runs {sp} {dp}"),
        },
        "jump" => match idx {
            0 => format!("a person jumps up and down {sp}"),
            1 => format!("someone is jumping in place {sp}"),
            2 => format!("a person jumps repeatedly {sp}"),
            3 => format!("a figure is jumping up and down {sp}"),
            4 => format!("the person jumps in place {sp}"),
            _ => format!("someone jumps {sp}"),
        },
        "circle" => match idx {
            0 => format!("a person moves in a circle {dp} {sp}"),
            1 => format!("someone is tracing a circle {dp} {sp}"),
            2 => format!("a person goes around in a circle {sp}"),
            3 => format!("a figure moves {sp} in a circle {dp}"),
            4 => format!("the person moves in a circle {dp} {sp}"),
            _ => format!("someone goes in a circle {sp}"),
        },
        "turn" => match idx {
            0 => format!("a person turns {dp} {sp}"),
            1 => format!("someone is turning {dp} in place {sp}"),
            2 => format!("a person turns around {sp}"),
            3 => format!("a figure is turning {sp} {dp}"),
            4 => format!("the person turns {dp} {sp}"),
            _ => format!("someone turns in place {sp}"),
        },
        "wave" => match idx {
            0 => format!("a person waves {dp} {sp}"),
            1 => format!("someone waves {dp} {sp}"),
            2 => format!("a person waves with {dp} raised {sp}"),
            3 => format!("a figure waves {sp} with {dp}"),
            4 => format!("the person waves {dp} {sp}"),
            _ => format!("someone waves {sp} with {dp}"),
        },
        "squat" => match idx {
            0 => format!("a person squats {sp}"),
            1 => format!("someone is squatting repeatedly {sp}"),
            2 => format!("a person squats up and down {sp}"),
            3 => format!("a figure is squatting {sp}"),
            4 => format!("the person squats repeatedly {sp}"),
            _ => format!("someone squats {sp}"),
        },
        "kick" => match idx {
            0 => format!("a person kicks with {dp} {sp}"),
            1 => format!("someone is kicking {dp} forward {sp}"),
            2 => format!("a person kicks {sp} with {dp}"),
            3 => format!("a figure is kicking with {dp} {sp}"),
            4 => format!("the person kicks with {dp} {sp}"),
            _ => format!("someone kicks {sp}"),
        },
        "sit" => match idx {
            0 => format!("a person sits down {sp}"),
            1 => format!("someone is sitting down {sp}"),
            2 => format!("a person lowers the body and sits {sp}"),
            3 => format!("a figure sits down {sp}"),
            4 => format!("the person sits down {sp}"),
            _ => format!("someone sits {sp}"),
        },
        "stretch" => match idx {
            0 => format!("a person stretches both arms overhead {sp}"),
            1 => format!("someone is stretching with raised arms {sp}"),
            2 => format!("a person stretches up {sp}"),
            3 => format!("a figure is stretching both arms {sp}"),
            4 => format!("the person stretches overhead {sp}"),
            _ => format!("someone stretches {sp}"),
        },
        _ => format!("a person moves {sp}"),
    };
    // Collapse doubled spaces left by empty direction slots.
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Every word that any caption template can emit, including all slot
/// fillers. The tokenizer vocabulary is built from this closed pool.
pub fn caption_word_pool() -> Vec<&'static str> {
    let mut words = vec![
        "a", "person", "someone", "figure", "the", "is", "and", "in", "with", "up", "down",
        "around", "place", "both", "arms", "raised", "body", "lowers", "goes", "moves",
        "tracing", "repeatedly", "overhead", "forward", "backward", "to", "left", "right",
        "hand", "leg", "slowly", "quickly", "at", "steady", "pace",
        // class words and their inflections
        "walk", "walks", "walking", "run", "runs", "running", "jump", "jumps", "jumping",
        "circle", "turn", "turns", "turning", "wave", "waves", "squat", "squats",
        "squatting", "kick", "kicks", "kicking", "sit", "sits", "sitting", "stretch",
        "stretches", "stretching",
    ];
    words.sort_unstable();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::super::classes::{allowed_directions, CLASS_NAMES};
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn every_caption_contains_its_class_word_and_pool_words_only() {
        let pool: HashSet<&str> = caption_word_pool().into_iter().collect();
        for class in CLASS_NAMES {
            for dir in allowed_directions(class) {
                for speed in [0.7, 1.0, 1.6] {
                    for idx in 0..N_TEMPLATES {
                        let p = ClipParams { speed, amplitude: 1.0, direction: *dir };
                        let cap = caption_for(class, &p, idx);
                        assert!(
                            cap.contains(class),
                            "caption '{cap}' must contain class word '{class}'"
                        );
                        for w in cap.split_whitespace() {
                            assert!(pool.contains(w), "word '{w}' missing from pool ({cap})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn templates_are_distinct_phrasings() {
        let p = ClipParams { speed: 1.0, amplitude: 1.0, direction: Direction::Left };
        for class in CLASS_NAMES {
            let caps: HashSet<String> =
                (0..N_TEMPLATES).map(|i| caption_for(class, &p, i)).collect();
            assert_eq!(caps.len(), N_TEMPLATES, "{class} templates collide");
        }
    }

    #[test]
    fn class_words_do_not_leak_into_other_classes() {
        // A caption for class X must not contain the class word of any Y != X,
        // otherwise the class-word scoring oracle would be ambiguous.
        let p = ClipParams { speed: 1.0, amplitude: 1.0, direction: Direction::Left };
        for class in CLASS_NAMES {
            for idx in 0..N_TEMPLATES {
                let cap = caption_for(class, &p, idx);
                for other in CLASS_NAMES {
                    if other != class {
                        assert!(
                            !cap.contains(other),
                            "caption '{cap}' for '{class}' contains '{other}'"
                        );
                    }
                }
            }
        }
    }
}
