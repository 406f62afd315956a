//! Synthetic corpora small enough to train on a laptop CPU.
//!
//! * [`english_qa`]: short instruction/answer pairs (capitals, animal sounds,
//!   opposites, copying) with paraphrased prompts.
//! * [`spanish_qa`]: the same facts with Spanish templates.
//! * [`code_snippets`]: one-line Python functions from a natural-language ask.
//! * [`cot_arithmetic`]: addition prompts answered by a `<think>` trace; a
//!   configurable fraction of completions is deliberately malformed. Every
//!   record carries meta `answer`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PromptRecord;

const CAPITALS: [(&str, &str, &str); 16] = [
    ("france", "paris", "francia"),
    ("spain", "madrid", "espana"),
    ("italy", "rome", "italia"),
    ("japan", "tokyo", "japon"),
    ("egypt", "cairo", "egipto"),
    ("peru", "lima", "peru"),
    ("chile", "santiago", "chile"),
    ("kenya", "nairobi", "kenia"),
    ("canada", "ottawa", "canada"),
    ("norway", "oslo", "noruega"),
    ("cuba", "havana", "cuba"),
    ("greece", "athens", "grecia"),
    ("india", "delhi", "india"),
    ("china", "beijing", "china"),
    ("ghana", "accra", "ghana"),
    ("iran", "tehran", "iran"),
];

const SOUNDS: [(&str, &str, &str); 10] = [
    ("dog", "woof", "perro"),
    ("cat", "meow", "gato"),
    ("cow", "moo", "vaca"),
    ("duck", "quack", "pato"),
    ("sheep", "baa", "oveja"),
    ("owl", "hoot", "buho"),
    ("pig", "oink", "cerdo"),
    ("frog", "ribbit", "rana"),
    ("bee", "buzz", "abeja"),
    ("lion", "roar", "leon"),
];

const OPPOSITES: [(&str, &str); 14] = [
    ("hot", "cold"),
    ("up", "down"),
    ("big", "small"),
    ("fast", "slow"),
    ("old", "new"),
    ("day", "night"),
    ("wet", "dry"),
    ("open", "shut"),
    ("hard", "soft"),
    ("full", "empty"),
    ("left", "right"),
    ("light", "dark"),
    ("rich", "poor"),
    ("early", "late"),
];

const WORDS: [&str; 24] = [
    "red", "blue", "green", "apple", "river", "stone", "cloud", "bread", "music", "table", "light", "ocean", "tiger",
    "paper", "glass", "sugar", "train", "house", "smile", "dream", "plant", "chair", "sand", "wind",
];

fn english_one(rng: &mut ChaCha8Rng) -> PromptRecord {
    match rng.random_range(0..4) {
        0 => {
            let (c, cap, _) = *CAPITALS.choose(rng).expect("nonempty");
            let t = [
                "capital of {}?",
                "what is the capital of {}?",
                "name the capital of {}.",
            ]
            .choose(rng)
            .expect("nonempty");
            PromptRecord::new(t.replace("{}", c), format!("the capital is {cap}."))
        }
        1 => {
            let (a, s, _) = *SOUNDS.choose(rng).expect("nonempty");
            let t = ["what does a {} say?", "sound of a {}?", "how does a {} sound?"]
                .choose(rng)
                .expect("nonempty");
            PromptRecord::new(t.replace("{}", a), format!("a {a} says {s}."))
        }
        2 => {
            let (w, o) = *OPPOSITES.choose(rng).expect("nonempty");
            let (w, o) = if rng.random_bool(0.5) { (w, o) } else { (o, w) };
            let t = ["opposite of {}?", "what is the opposite of {}?", "antonym of {}?"]
                .choose(rng)
                .expect("nonempty");
            PromptRecord::new(t.replace("{}", w), format!("the opposite of {w} is {o}."))
        }
        _ => {
            let a = WORDS.choose(rng).expect("nonempty");
            let b = WORDS.choose(rng).expect("nonempty");
            let t = ["repeat: {}", "say: {}", "echo: {}"].choose(rng).expect("nonempty");
            PromptRecord::new(t.replace("{}", &format!("{a} {b}")), format!("{a} {b}"))
        }
    }
}

/// English instruction records with the `slot = "en"` meta tag.
pub fn english_qa(n: usize, seed: u64) -> Vec<PromptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| english_one(&mut rng).with_meta("slot", "en")).collect()
}

/// Spanish instruction records with the `slot = "es"` meta tag.
pub fn spanish_qa(n: usize, seed: u64) -> Vec<PromptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rec = if rng.random_bool(0.5) {
                let (_, cap, es) = *CAPITALS.choose(&mut rng).expect("nonempty");
                let t = ["capital de {}?", "cual es la capital de {}?"]
                    .choose(&mut rng)
                    .expect("nonempty");
                PromptRecord::new(t.replace("{}", es), format!("la capital es {cap}."))
            } else {
                let (_, s, es) = *SOUNDS.choose(&mut rng).expect("nonempty");
                let t = ["que dice un {}?", "sonido de un {}?"]
                    .choose(&mut rng)
                    .expect("nonempty");
                PromptRecord::new(t.replace("{}", es), format!("un {es} dice {s}."))
            };
            rec.with_meta("slot", "es")
        })
        .collect()
}

const OPS: [(&str, &str); 4] = [("add", "+"), ("subtract", "-"), ("multiply", "*"), ("divide", "/")];
const VARS: [&str; 6] = ["a", "b", "x", "y", "n", "m"];

/// One-line Python functions, `slot = "code"`.
pub fn code_snippets(n: usize, seed: u64) -> Vec<PromptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (name, op) = *OPS.choose(&mut rng).expect("nonempty");
            let picked: Vec<&&str> = VARS.choose_multiple(&mut rng, 2).collect();
            let (p, q) = (picked[0], picked[1]);
            PromptRecord::new(
                format!("write {name}({p}, {q})"),
                format!("def {name}({p}, {q}): return {p} {op} {q}"),
            )
            .with_meta("slot", "code")
        })
        .collect()
}

/// The canonical well-formed trace for `a + b`.
pub fn cot_trace(a: u32, b: u32) -> String {
    format!("<think>Step 1: {a}+{b}={}</think>{}", a + b, a + b)
}

fn malformed_trace(a: u32, b: u32, kind: u32) -> String {
    let s = a + b;
    match kind % 4 {
        0 => format!("<think>Step 1: {a}+{b}={s} {s}"),
        1 => format!("Step 1: {a}+{b}={s}</think>{s}"),
        2 => format!("<think>{a}+{b}={s}</think>{s}"),
        _ => format!("<think>Step 2: {a}+{b}={s}</think>{s}"),
    }
}

/// Addition prompts with `<think>` traces; `well_formed_rate` of them are
/// well formed, the rest use one of four malformations. Meta `answer` holds
/// the sum.
pub fn cot_arithmetic(n: usize, well_formed_rate: f64, seed: u64) -> Vec<PromptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a = rng.random_range(1..10);
            let b = rng.random_range(1..10);
            let completion = if rng.random_bool(well_formed_rate.clamp(0.0, 1.0)) {
                cot_trace(a, b)
            } else {
                malformed_trace(a, b, rng.random_range(0..4))
            };
            PromptRecord::new(format!("add {a} and {b}"), completion).with_meta("answer", (a + b).to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rlcot::parse_trace;

    #[test]
    fn deterministic_and_sized() {
        assert_eq!(english_qa(20, 3), english_qa(20, 3));
        assert_ne!(english_qa(20, 3), english_qa(20, 4));
        assert_eq!(spanish_qa(7, 1).len(), 7);
        assert_eq!(code_snippets(5, 1)[0].meta("slot"), Some("code"));
    }

    #[test]
    fn cot_rates() {
        let all = cot_arithmetic(50, 1.0, 2);
        assert!(all.iter().all(|r| parse_trace(&r.completion).well_formed));
        let none = cot_arithmetic(50, 0.0, 2);
        assert!(none.iter().all(|r| !parse_trace(&r.completion).well_formed));
        let r = &all[0];
        assert_eq!(parse_trace(&r.completion).final_answer.as_deref(), r.meta("answer"));
    }
}
