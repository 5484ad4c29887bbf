//! Seeded generator for an English-like corpus over a small fixed world.
//!
//! Every person has a home town, a trade and a pet. Documents mix narrative
//! sentences, fact statements, counted nouns and question/answer lines, so
//! multiple-choice tasks drawn from the same world have learnable answers.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "Mira", "Tomas", "Elda", "Brann", "Cora", "Felix", "Ilse", "Jorah", "Kaya", "Lenn", "Maren", "Nico", "Oona",
    "Pell", "Quin", "Rosa", "Sten", "Tilda", "Ulric", "Vera", "Wren", "Yara", "Zane", "Arlo", "Bea", "Cyril",
    "Dara", "Emil", "Fern", "Gus",
];
const TOWNS: &[&str] = &["Dunmore", "Ashby", "Kell", "Tarn", "Wexford", "Lisle", "Hollow", "Brae"];
const TRADES: &[&str] = &["baker", "smith", "weaver", "farmer", "potter", "miller", "sailor", "scribe"];
const PETS: &[&str] = &["cat", "dog", "goat", "horse", "owl", "hen"];
const COLORS: &[&str] = &["grey", "brown", "white", "black", "red", "spotted"];
const NOUNS: &[&str] = &["apple", "basket", "boat", "candle", "coat", "cup", "door", "hat", "key", "lamp", "rope", "stone"];
const PLACES: &[&str] = &["market", "river", "mill", "hill", "well", "harbor", "forest", "bridge"];
const VERBS: &[&str] = &["walked", "ran", "rode", "wandered", "hurried", "climbed"];
const ADJS: &[&str] = &["old", "small", "quiet", "bright", "cold", "busy", "narrow", "green"];
const TIMES: &[&str] = &["In the morning", "At noon", "In the evening", "Before dawn", "After the rain", "On market day"];
const NUMBERS: &[&str] = &["two", "three", "four", "five", "six", "seven"];

/// The fixed facts every document and task agrees on.
#[derive(Clone, Debug)]
pub struct World {
    pub people: Vec<Person>,
}

#[derive(Clone, Debug)]
pub struct Person {
    pub name: &'static str,
    pub town: &'static str,
    pub trade: &'static str,
    pub pet: &'static str,
    pub color: &'static str,
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let people = NAMES
            .iter()
            .map(|&name| Person {
                name,
                town: TOWNS.choose(&mut rng).copied().unwrap_or(TOWNS[0]),
                trade: TRADES.choose(&mut rng).copied().unwrap_or(TRADES[0]),
                pet: PETS.choose(&mut rng).copied().unwrap_or(PETS[0]),
                color: COLORS.choose(&mut rng).copied().unwrap_or(COLORS[0]),
            })
            .collect();
        Self { people }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, p: &Person) -> String {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).unwrap_or(&xs[0]);
        match rng.random_range(0..10) {
            0 => format!("{} lives in {}.", p.name, p.town),
            1 => format!("{} works as a {}.", p.name, p.trade),
            2 => format!("{} keeps a {} {}.", p.name, p.color, p.pet),
            3 => {
                let n = pick(rng, NUMBERS);
                format!("{} carried {} {}s to the {}.", p.name, n, pick(rng, NOUNS), pick(rng, PLACES))
            }
            4 => format!("{} found one {} near the {}.", p.name, pick(rng, NOUNS), pick(rng, PLACES)),
            5 => format!(
                "{}, {} {} to the {} {}.",
                pick(rng, TIMES),
                p.name,
                pick(rng, VERBS),
                pick(rng, ADJS),
                pick(rng, PLACES)
            ),
            6 => format!("The {} of {} is {}.", p.trade, p.town, p.name),
            7 => {
                let asked = if rng.random_bool(0.5) { p.town } else { pick(rng, TOWNS) };
                let ans = if asked == p.town { "yes" } else { "no" };
                format!("Question: Does {} live in {}? Answer: {}.", p.name, asked, ans)
            }
            8 => format!("The {} {} of {} sleeps by the door.", p.color, p.pet, p.name),
            _ => format!("{} went to {} to see the {}.", p.name, p.town, p.trade),
        }
    }

    /// One document: a handful of sentences about one or two people.
    pub fn document(&self, rng: &mut ChaCha8Rng) -> String {
        let first = self.people.choose(rng).unwrap_or(&self.people[0]);
        let second = self.people.choose(rng).unwrap_or(&self.people[0]);
        let n = rng.random_range(3..9);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let p = if i % 3 == 2 { second } else { first };
            out.push(self.sentence(rng, p));
        }
        out.join(" ")
    }

    /// Newline-delimited corpus of at least `min_bytes` bytes.
    pub fn corpus(&self, seed: u64, min_bytes: usize) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::with_capacity(min_bytes + 512);
        while out.len() < min_bytes {
            out.push_str(&self.document(&mut rng));
            out.push('\n');
        }
        out
    }

    /// Multiple-choice questions drawn from the same facts, `per_task` of each kind.
    pub fn questions(&self, seed: u64, per_task: usize) -> Vec<Question> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lines = Vec::new();
        for i in 0..per_task {
            let p = &self.people[i % self.people.len()];
            // Hometown: four towns, one correct.
            let (choices, label) = distractors(&mut rng, TOWNS, p.town, 4);
            lines.push(Question {
                task: "hometown",
                metric: Choice::Acc,
                prompt: format!("{} lives in", p.name),
                completions: choices.iter().map(|c| format!(" {c}.")).collect(),
                label,
            });
            // Trade names vary in length, so length normalization matters.
            let (choices, label) = distractors(&mut rng, TRADES, p.trade, 4);
            lines.push(Question {
                task: "trade",
                metric: Choice::LenNorm,
                prompt: format!("{} works as a", p.name),
                completions: choices.iter().map(|c| format!(" {c}.")).collect(),
                label,
            });
            // Pet: scored against the unconditional completion likelihood.
            let (choices, label) = distractors(&mut rng, PETS, p.pet, 3);
            lines.push(Question {
                task: "pet",
                metric: Choice::Pmi,
                prompt: format!("{} keeps a {}", p.name, p.color),
                completions: choices.iter().map(|c| format!(" {c}.")).collect(),
                label,
            });
            // Yes/no fact check, F1 on "yes".
            let asked = if rng.random_bool(0.5) { p.town } else { *TOWNS.choose(&mut rng).unwrap_or(&TOWNS[0]) };
            lines.push(Question {
                task: "residence_check",
                metric: Choice::F1,
                prompt: format!("Question: Does {} live in {}? Answer:", p.name, asked),
                completions: vec![" no.".into(), " yes.".into()],
                label: usize::from(asked == p.town),
            });
        }
        lines
    }
}

/// `n` distinct choices containing `answer` at a random position.
fn distractors(rng: &mut ChaCha8Rng, pool: &[&'static str], answer: &'static str, n: usize) -> (Vec<&'static str>, usize) {
    let mut others: Vec<&'static str> = pool.iter().copied().filter(|&x| x != answer).collect();
    rand::seq::SliceRandom::shuffle(others.as_mut_slice(), rng);
    others.truncate(n - 1);
    let label = rng.random_range(0..n);
    others.insert(label, answer);
    (others, label)
}

/// How a question's answer is picked from completion scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Acc,
    LenNorm,
    Pmi,
    F1,
}

/// One multiple-choice question.
#[derive(Clone, Debug)]
pub struct Question {
    pub task: &'static str,
    pub metric: Choice,
    pub prompt: String,
    pub completions: Vec<String>,
    pub label: usize,
}
