//! Dataset ingestion, few-shot prompt assembly, splits, and synthetic
//! desk-scale corpora.
//!
//! The synthetic generators are built so that answers are programmatically
//! guaranteed correct and recoverable from the prompt: arithmetic items ask
//! a reworded version of one demonstration's problem (two-digit operands,
//! so a tiny scorer has to read the context rather than memorize sums), and
//! passage items ask for a fact stated verbatim in the passage.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// One (long prompt, question, reference answer) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QATriple {
    pub id: String,
    pub prompt: String,
    pub question: String,
    pub answer: String,
}

/// A worked demonstration: question, step-by-step rationale, final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub rationale: String,
    pub answer: String,
}

/// An ordered set of demonstrations for few-shot prompt assembly.
#[derive(Debug, Clone)]
pub struct FewShotSpec {
    pub demonstrations: Vec<Demonstration>,
    pub k: usize,
}

impl FewShotSpec {
    pub fn new(demonstrations: Vec<Demonstration>) -> Self {
        let k = demonstrations.len();
        FewShotSpec { demonstrations, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Cot,
    Reading,
}

/// A named record collection plus the seed its splits derive from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub task_kind: TaskKind,
    pub records: Vec<QATriple>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestMeta {
    name: String,
    task_kind: TaskKind,
    split_seed: u64,
}

/// Demonstration separator inside assembled prompts; `random_drop` uses the
/// same marker to find block boundaries.
pub const DEMO_SEPARATOR: &str = "\n\n";

/// Default demonstration template for few-shot prompts.
pub const DEMO_TEMPLATE: &str =
    "Question: {question}\nAnswer: {rationale} The final answer is {answer}.";

/// Fills `template` once per demonstration, in order, joined by
/// [`DEMO_SEPARATOR`]. The template must contain all three slots.
pub fn assemble_fewshot(spec: &FewShotSpec, template: &str) -> Result<String> {
    for slot in ["{question}", "{rationale}", "{answer}"] {
        if !template.contains(slot) {
            return Err(Error::MissingSlot(slot.to_string()));
        }
    }
    let blocks: Vec<String> = spec
        .demonstrations
        .iter()
        .map(|d| {
            template
                .replace("{question}", &d.question)
                .replace("{rationale}", &d.rationale)
                .replace("{answer}", &d.answer)
        })
        .collect();
    Ok(blocks.join(DEMO_SEPARATOR))
}

/// Question-answering prompt glue shared by pretraining, the reward's
/// exact-match metric, and evaluation: context ⊕ question ⊕ answer cue.
pub fn qa_prompt(context: &str, question: &str) -> String {
    format!("{context}\nQuestion: {question}\nAnswer:")
}

/// Three disjoint, exhaustive record lists.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<QATriple>,
    pub val: Vec<QATriple>,
    pub test: Vec<QATriple>,
}

/// Seeded shuffle, then a 70/30 outer partition (train+val vs test) and an
/// 85/15 inner partition of the first part.
pub fn split(manifest: &DatasetManifest, seed: u64) -> Result<Splits> {
    let n = manifest.records.len();
    if n < 10 {
        return Err(Error::InsufficientData { needed: 10, have: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::seed::rng_from(seed, "dataset-split");
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    let n_trainval = ((n as f64) * 0.7).round() as usize;
    let n_val = (((n_trainval as f64) * 0.15).round() as usize).max(1);
    let n_train = n_trainval - n_val;
    let pick = |range: std::ops::Range<usize>| -> Vec<QATriple> {
        idx[range]
            .iter()
            .map(|&i| manifest.records[i].clone())
            .collect()
    };
    Ok(Splits {
        train: pick(0..n_train),
        val: pick(n_train..n_trainval),
        test: pick(n_trainval..n),
    })
}

/// Loads a JSONL manifest. Malformed lines are fatal and reported with line
/// numbers. A sibling `<path>.meta.json` (name, task_kind, split_seed) is
/// honoured when present.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut problems = Vec::new();
    let mut ids = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<QATriple>(line) {
            Ok(t) => {
                if t.prompt.trim().is_empty() || t.question.trim().is_empty() {
                    problems.push(format!("line {lineno}: empty prompt or question"));
                } else if !ids.insert(t.id.clone()) {
                    problems.push(format!("line {lineno}: duplicate id {:?}", t.id));
                } else {
                    records.push(t);
                }
            }
            Err(e) => problems.push(format!("line {lineno}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::SchemaViolation {
            path: path.display().to_string(),
            detail: problems.join("; "),
        });
    }
    if records.is_empty() {
        return Err(Error::SchemaViolation {
            path: path.display().to_string(),
            detail: "no records".into(),
        });
    }
    let meta_path = meta_path_for(path);
    let (name, task_kind, split_seed) = if meta_path.exists() {
        let bytes = std::fs::read(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: ManifestMeta = serde_json::from_slice(&bytes)?;
        (meta.name, meta.task_kind, meta.split_seed)
    } else {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "dataset".into());
        (stem, TaskKind::Cot, 0)
    };
    Ok(DatasetManifest {
        name,
        task_kind,
        records,
        split_seed,
    })
}

/// Writes the records as JSONL plus the metadata sidecar.
pub fn save_jsonl(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let mut out = String::new();
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    let meta = ManifestMeta {
        name: manifest.name.clone(),
        task_kind: manifest.task_kind,
        split_seed: manifest.split_seed,
    };
    let meta_path = meta_path_for(path);
    std::fs::write(&meta_path, serde_json::to_vec(&meta)?)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))
}

fn meta_path_for(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Drops records whose prompt exceeds `max_tokens` under `vocab`. Off by
/// default at desk scale; mirrors pruning overlong paragraphs upstream.
pub fn filter_by_length(
    manifest: &DatasetManifest,
    vocab: &crate::textmodel::Vocabulary,
    max_tokens: usize,
) -> DatasetManifest {
    DatasetManifest {
        name: manifest.name.clone(),
        task_kind: manifest.task_kind,
        records: manifest
            .records
            .iter()
            .filter(|r| vocab.tokenize(&r.prompt).len() <= max_tokens)
            .cloned()
            .collect(),
        split_seed: manifest.split_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    ArithCot,
    PassageQa,
}

const NAMES: [&str; 12] = [
    "Mara", "Tobin", "Lena", "Aris", "Noor", "Pavel", "Suki", "Omar", "Ines", "Hugo", "Vera",
    "Kiri",
];

const THINGS: [&str; 10] = [
    "marbles", "coins", "pens", "apples", "stones", "pages", "sweets", "points", "cards",
    "shells",
];

/// Story phrasings for the demonstration problem statements; these carry
/// the operands.
const ADD_STORIES: [&str; 4] = [
    "{n} has {a} {t} and finds {b} more. How many {t} does {n} have now?",
    "{n} starts with {a} {t} and then gets {b} extra {t}. What is the total?",
    "{n} owns {a} {t} and buys {b} more {t}. How many {t} does {n} own now?",
    "{n} counted {a} {t} before lunch and {b} {t} after. How many {t} in all?",
];

const SUB_STORIES: [&str; 4] = [
    "{n} has {a} {t} and gives away {b}. How many {t} are left?",
    "{n} had {a} {t} but lost {b} of them. How many {t} remain?",
    "{n} holds {a} {t} and removes {b}. How many {t} stay with {n}?",
    "Out of {a} {t}, {n} uses up {b}. How many {t} does {n} still have?",
];

const TWO_STEP_STORIES: [&str; 4] = [
    "{n} has {a} {t}, collects {b} more, then drops {c}. How many {t} does {n} keep?",
    "{n} starts with {a} {t}, earns {b} extra, and spends {c}. How many {t} are left?",
    "{n} stores {a} {t}, adds {b} and takes away {c}. How many {t} does {n} store now?",
    "{n} gathered {a} {t}, found {b} more, then gave {c} away. How many {t} now?",
];

/// Question phrasings asked at evaluation time. They name the entity and
/// object but never the operands, so the answer is recoverable only from
/// the prompt.
const ADD_QUESTIONS: [&str; 4] = [
    "After finding more, how many {t} does {n} have in the end?",
    "Once the extra {t} arrive, what is the final count of {t} for {n}?",
    "How many {t} does {n} end with after gaining some?",
    "With the additions counted, how many {t} does {n} hold in the end?",
];

const SUB_QUESTIONS: [&str; 4] = [
    "After giving some away, how many {t} does {n} have in the end?",
    "Once the losses are counted, what is the final count of {t} for {n}?",
    "How many {t} does {n} end with after losing some?",
    "With the losses counted, how many {t} does {n} hold in the end?",
];

const TWO_STEP_QUESTIONS: [&str; 4] = [
    "After gaining and then dropping some, how many {t} does {n} have in the end?",
    "Once both changes are counted, what is the final count of {t} for {n}?",
    "How many {t} does {n} end with after both changes?",
    "With both changes counted, how many {t} does {n} hold in the end?",
];

#[derive(Debug, Clone)]
struct ArithProblem {
    kind: usize, // 0 add, 1 sub, 2 two-step
    phrasing: usize,
    name: &'static str,
    thing: &'static str,
    a: i64,
    b: i64,
    c: i64,
}

impl ArithProblem {
    fn sample(rng: &mut rand_chacha::ChaCha8Rng, name: &'static str, thing: &'static str) -> Self {
        use rand::Rng;
        let kind = rng.gen_range(0..3);
        let (a, b, c) = match kind {
            0 => (rng.gen_range(11..90), rng.gen_range(11..90), 0),
            1 => {
                let a = rng.gen_range(30..99);
                (a, rng.gen_range(11..a - 2), 0)
            }
            _ => {
                let a = rng.gen_range(11..60);
                let b = rng.gen_range(11..60);
                (a, b, rng.gen_range(11..a + b - 2))
            }
        };
        ArithProblem {
            kind,
            phrasing: rng.gen_range(0..4),
            name,
            thing,
            a,
            b,
            c,
        }
    }

    fn answer(&self) -> i64 {
        match self.kind {
            0 => self.a + self.b,
            1 => self.a - self.b,
            _ => self.a + self.b - self.c,
        }
    }

    fn story(&self) -> String {
        let tpl = match self.kind {
            0 => ADD_STORIES[self.phrasing],
            1 => SUB_STORIES[self.phrasing],
            _ => TWO_STEP_STORIES[self.phrasing],
        };
        tpl.replace("{n}", self.name)
            .replace("{t}", self.thing)
            .replace("{a}", &self.a.to_string())
            .replace("{b}", &self.b.to_string())
            .replace("{c}", &self.c.to_string())
    }

    /// Operand-free question about the final count.
    fn question(&self, phrasing: usize) -> String {
        let tpl = match self.kind {
            0 => ADD_QUESTIONS[phrasing],
            1 => SUB_QUESTIONS[phrasing],
            _ => TWO_STEP_QUESTIONS[phrasing],
        };
        tpl.replace("{n}", self.name).replace("{t}", self.thing)
    }

    /// Step-by-step rationale; the last sentence restates the entity, the
    /// object, and the final count, and the final number is the answer.
    fn rationale(&self) -> String {
        let head = format!("{} starts with {} {}.", self.name, self.a, self.thing);
        let steps = match self.kind {
            0 => format!("{} plus {} is {}.", self.a, self.b, self.a + self.b),
            1 => format!("{} minus {} is {}.", self.a, self.b, self.a - self.b),
            _ => format!(
                "{} plus {} is {}. {} minus {} is {}.",
                self.a,
                self.b,
                self.a + self.b,
                self.a + self.b,
                self.c,
                self.a + self.b - self.c
            ),
        };
        format!(
            "{head} {steps} {} ends with {} {}.",
            self.name,
            self.answer(),
            self.thing
        )
    }

    fn demonstration(&self) -> Demonstration {
        Demonstration {
            question: self.story(),
            rationale: self.rationale(),
            answer: self.answer().to_string(),
        }
    }
}

const PLACES: [&str; 12] = [
    "Arlenia", "Bruma", "Coriv", "Dunholt", "Eriden", "Falset", "Gorwick", "Halvora", "Iskane",
    "Jelmar", "Korvane", "Luthen",
];

const PROPER_NAMES: [&str; 12] = [
    "Maro", "Tessin", "Ralda", "Quint", "Sovel", "Brisa", "Caden", "Ferla", "Yorvin", "Alsea",
    "Drenna", "Ostin",
];

/// (fact template with {p} {v}, question template with {p})
const FACT_TEMPLATES: [(&str, &str); 10] = [
    ("The capital of {p} is {v}.", "What is the capital of {p}?"),
    ("The mayor of {p} is {v}.", "Who is the mayor of {p}?"),
    ("The river of {p} is called {v}.", "What is the river of {p} called?"),
    ("The oldest bridge in {p} is {v}.", "What is the oldest bridge in {p}?"),
    ("The flower of {p} is the {v}.", "What is the flower of {p}?"),
    ("The founder of {p} was {v}.", "Who was the founder of {p}?"),
    ("The harbor of {p} is named {v}.", "What is the harbor of {p} named?"),
    ("The tallest tower in {p} is {v}.", "What is the tallest tower in {p}?"),
    ("The festival of {p} is called {v}.", "What is the festival of {p} called?"),
    ("The guardian of {p} is {v}.", "Who is the guardian of {p}?"),
];

/// Generates a synthetic corpus. Every record's answer verifies against its
/// own prompt by construction.
pub fn synth_corpus(kind: SynthKind, size: usize, seed: u64) -> Result<DatasetManifest> {
    if size == 0 {
        return Err(Error::InsufficientData { needed: 1, have: 0 });
    }
    let records = match kind {
        SynthKind::ArithCot => synth_arith(size, seed),
        SynthKind::PassageQa => synth_passage(size, seed),
    };
    Ok(DatasetManifest {
        name: match kind {
            SynthKind::ArithCot => "arith_cot".into(),
            SynthKind::PassageQa => "passage_qa".into(),
        },
        task_kind: match kind {
            SynthKind::ArithCot => TaskKind::Cot,
            SynthKind::PassageQa => TaskKind::Reading,
        },
        records,
        split_seed: seed,
    })
}

fn synth_arith(size: usize, seed: u64) -> Vec<QATriple> {
    use rand::Rng;
    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = crate::seed::rng_from_indexed(seed, "arith-item", i as u64);
        let n_demos = 4;
        // distinct (name, thing) pairs within one prompt, so the question
        // keys a unique demonstration
        let mut pairs = std::collections::BTreeSet::new();
        while pairs.len() < n_demos {
            pairs.insert((
                rng.gen_range(0..NAMES.len()),
                rng.gen_range(0..THINGS.len()),
            ));
        }
        let problems: Vec<ArithProblem> = pairs
            .into_iter()
            .map(|(n, t)| ArithProblem::sample(&mut rng, NAMES[n], THINGS[t]))
            .collect();
        let target = rng.gen_range(0..n_demos);
        let spec = FewShotSpec::new(problems.iter().map(|p| p.demonstration()).collect());
        let prompt = assemble_fewshot(&spec, DEMO_TEMPLATE).expect("static template");
        records.push(QATriple {
            id: format!("arith-{i:05}"),
            prompt,
            question: problems[target].question(rng.gen_range(0..4)),
            answer: problems[target].answer().to_string(),
        });
    }
    records
}

fn synth_passage(size: usize, seed: u64) -> Vec<QATriple> {
    use rand::Rng;
    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = crate::seed::rng_from_indexed(seed, "passage-item", i as u64);
        let n_facts = rng.gen_range(4..=6);
        let mut template_ids: Vec<usize> = (0..FACT_TEMPLATES.len()).collect();
        for j in (1..template_ids.len()).rev() {
            let k = rng.gen_range(0..=j);
            template_ids.swap(j, k);
        }
        let mut sentences = Vec::with_capacity(n_facts);
        let mut facts = Vec::with_capacity(n_facts);
        for &t in template_ids.iter().take(n_facts) {
            let place = PLACES[rng.gen_range(0..PLACES.len())];
            let value = PROPER_NAMES[rng.gen_range(0..PROPER_NAMES.len())];
            let (fact_tpl, q_tpl) = FACT_TEMPLATES[t];
            sentences.push(fact_tpl.replace("{p}", place).replace("{v}", value));
            facts.push((q_tpl.replace("{p}", place), value.to_string()));
        }
        let target = rng.gen_range(0..facts.len());
        records.push(QATriple {
            id: format!("passage-{i:05}"),
            prompt: sentences.join(" "),
            question: facts[target].0.clone(),
            answer: facts[target].1.clone(),
        });
    }
    records
}

/// Heuristic extractive summary used to give the base model a crude
/// summarization prior during pretraining: keeps each demonstration's
/// concluding fact sentence ("... ends with N ...") when present, else
/// leading sentences, up to `max_words` words.
pub fn crude_extract(prompt: &str, max_words: usize) -> String {
    let sentences: Vec<&str> = prompt
        .split_inclusive(['.', '?'])
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    let facts: Vec<&str> = sentences
        .iter()
        .copied()
        .filter(|s| s.contains(" ends with ") && s.ends_with('.'))
        .collect();
    let picked = if facts.is_empty() { sentences } else { facts };
    let mut out: Vec<&str> = Vec::new();
    let mut words = 0;
    for s in picked {
        let w = s.split_whitespace().count();
        if words + w > max_words && !out.is_empty() {
            break;
        }
        out.push(s);
        words += w;
    }
    out.join(" ")
}

/// The single fact sentence of `prompt` that states `answer`, when one
/// exists; used to assemble short-context training samples.
pub fn fact_for_answer(prompt: &str, answer: &str) -> Option<String> {
    let needle = format!(" {answer} ");
    prompt
        .split_inclusive('.')
        .map(|s| s.trim())
        .find(|s| s.contains(" ends with ") && s.contains(&needle) && s.ends_with('.'))
        .map(|s| s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            name: "toy".into(),
            task_kind: TaskKind::Cot,
            records: (0..n)
                .map(|i| QATriple {
                    id: format!("r{i}"),
                    prompt: format!("prompt {i}"),
                    question: format!("question {i}"),
                    answer: format!("{i}"),
                })
                .collect(),
            split_seed: 1,
        }
    }

    #[test]
    fn jsonl_round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let m = manifest(12);
        save_jsonl(&m, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(m, loaded);
        // saving the loaded manifest reproduces the bytes
        let path2 = dir.path().join("data2.jsonl");
        save_jsonl(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn empty_file_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            load_jsonl(&path),
            Err(Error::SchemaViolation { .. })
        ));
    }

    #[test]
    fn three_valid_lines_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.jsonl");
        let mut s = String::new();
        for i in 0..3 {
            s.push_str(&format!(
                "{{\"id\":\"x{i}\",\"prompt\":\"p\",\"question\":\"q\",\"answer\":\"a\"}}\n"
            ));
        }
        std::fs::write(&path, s).unwrap();
        assert_eq!(load_jsonl(&path).unwrap().records.len(), 3);
    }

    #[test]
    fn bad_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut s = String::new();
        for i in 0..10 {
            if i == 6 {
                s.push_str("{\"id\": broken\n");
            } else {
                s.push_str(&format!(
                    "{{\"id\":\"x{i}\",\"prompt\":\"p\",\"question\":\"q\",\"answer\":\"a\"}}\n"
                ));
            }
        }
        std::fs::write(&path, s).unwrap();
        match load_jsonl(&path) {
            Err(Error::SchemaViolation { detail, .. }) => {
                assert!(detail.contains("line 7"), "got: {detail}")
            }
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn fewshot_assembly_fills_slots_in_order() {
        let spec = FewShotSpec::new(vec![
            Demonstration {
                question: "one?".into(),
                rationale: "think one.".into(),
                answer: "1".into(),
            },
            Demonstration {
                question: "two?".into(),
                rationale: "think two.".into(),
                answer: "2".into(),
            },
        ]);
        let s = assemble_fewshot(&spec, DEMO_TEMPLATE).unwrap();
        let blocks: Vec<&str> = s.split(DEMO_SEPARATOR).collect();
        assert_eq!(blocks.len(), 2);
        assert!(blocks[0].contains("one?") && blocks[0].contains("1."));
        assert!(blocks[1].contains("two?"));
        // order equals demonstration order under any permutation
        let spec_rev = FewShotSpec::new(spec.demonstrations.iter().rev().cloned().collect());
        let s_rev = assemble_fewshot(&spec_rev, DEMO_TEMPLATE).unwrap();
        let blocks_rev: Vec<&str> = s_rev.split(DEMO_SEPARATOR).collect();
        assert_eq!(blocks_rev[0], blocks[1]);
        assert_eq!(blocks_rev[1], blocks[0]);
    }

    #[test]
    fn fewshot_length_is_sum_of_parts_plus_separators() {
        let demos: Vec<Demonstration> = (0..7)
            .map(|i| Demonstration {
                question: format!("question number {i} with some filler words here"),
                rationale: format!("step one of {i}. step two of {i}."),
                answer: format!("{i}"),
            })
            .collect();
        let spec = FewShotSpec::new(demos.clone());
        let s = assemble_fewshot(&spec, DEMO_TEMPLATE).unwrap();
        let expected: usize = demos
            .iter()
            .map(|d| {
                DEMO_TEMPLATE
                    .replace("{question}", &d.question)
                    .replace("{rationale}", &d.rationale)
                    .replace("{answer}", &d.answer)
                    .len()
            })
            .sum::<usize>()
            + DEMO_SEPARATOR.len() * 6;
        assert_eq!(s.len(), expected);
    }

    #[test]
    fn missing_slot_is_an_error() {
        let spec = FewShotSpec::new(vec![Demonstration {
            question: "q".into(),
            rationale: "r".into(),
            answer: "a".into(),
        }]);
        assert!(matches!(
            assemble_fewshot(&spec, "Question: {question} only"),
            Err(Error::MissingSlot(_))
        ));
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let m = manifest(100);
        let a = split(&m, 5).unwrap();
        let b = split(&m, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        assert_eq!(a.test.len(), 30);
        assert_eq!(a.train.len() + a.val.len(), 70);
        let mut ids: Vec<&String> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|r| &r.id)
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100, "splits must partition the records");
        // different seed shuffles differently
        let c = split(&m, 6).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn split_needs_ten_records() {
        let m = manifest(9);
        assert!(matches!(
            split(&m, 1),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn arith_rationale_final_number_equals_answer() {
        let m = synth_corpus(SynthKind::ArithCot, 200, 11).unwrap();
        for r in &m.records {
            // every demonstration block's rationale ends in its stated answer
            for block in r.prompt.split(DEMO_SEPARATOR) {
                let answer_tail = block
                    .rsplit("The final answer is ")
                    .next()
                    .unwrap()
                    .trim_end_matches('.');
                let rationale = block.split("Answer: ").nth(1).unwrap();
                let last_number = rationale
                    .split("The final answer is")
                    .next()
                    .unwrap()
                    .split_whitespace()
                    .filter_map(|w| w.trim_end_matches('.').parse::<i64>().ok())
                    .last()
                    .unwrap();
                assert_eq!(last_number.to_string(), answer_tail);
            }
            // the triple's own answer appears in the prompt (its source demo)
            assert!(
                r.prompt.contains(&format!("The final answer is {}.", r.answer)),
                "answer {} not in prompt for {}",
                r.answer,
                r.id
            );
        }
    }

    #[test]
    fn passage_answers_occur_verbatim() {
        let m = synth_corpus(SynthKind::PassageQa, 150, 12).unwrap();
        for r in &m.records {
            assert!(
                r.prompt.contains(&r.answer),
                "{}: answer {:?} not in passage",
                r.id,
                r.answer
            );
        }
    }

    #[test]
    fn thousand_items_cover_at_least_ten_templates() {
        let m = synth_corpus(SynthKind::ArithCot, 1000, 13).unwrap();
        // normalize questions down to their skeleton: numbers and proper
        // names replaced by placeholders
        let mut skeletons = BTreeSet::new();
        for r in &m.records {
            let skel: String = r
                .question
                .split_whitespace()
                .map(|w| {
                    let bare = w.trim_matches(|c: char| !c.is_alphanumeric());
                    if bare.parse::<i64>().is_ok() {
                        "#".to_string()
                    } else if NAMES.contains(&bare) {
                        "N".to_string()
                    } else if THINGS.contains(&bare) {
                        "T".to_string()
                    } else {
                        w.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ");
            skeletons.insert(skel);
        }
        assert!(
            skeletons.len() >= 10,
            "only {} distinct templates",
            skeletons.len()
        );
    }

    #[test]
    fn synth_is_seed_reproducible() {
        let a = synth_corpus(SynthKind::ArithCot, 50, 7).unwrap();
        let b = synth_corpus(SynthKind::ArithCot, 50, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(SynthKind::ArithCot, 50, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn crude_extract_keeps_fact_sentences_within_budget() {
        let m = synth_corpus(SynthKind::ArithCot, 5, 3).unwrap();
        for r in &m.records {
            let s = crude_extract(&r.prompt, 30);
            assert!(s.split_whitespace().count() <= 30 + 8, "oversized: {s}");
            assert!(s.contains(" ends with "), "no fact kept: {s}");
            // the summary keeps the answer-bearing sentence
            assert!(s.contains(&format!(" {} ", r.answer)), "{s} lacks {}", r.answer);
        }
    }

    #[test]
    fn length_filter_drops_long_prompts() {
        let vocab = crate::textmodel::Vocabulary::build(&["a b c d e f"]);
        let m = DatasetManifest {
            name: "t".into(),
            task_kind: TaskKind::Cot,
            records: vec![
                QATriple {
                    id: "short".into(),
                    prompt: "a b".into(),
                    question: "q".into(),
                    answer: "x".into(),
                },
                QATriple {
                    id: "long".into(),
                    prompt: "a b c d e f".into(),
                    question: "q".into(),
                    answer: "x".into(),
                },
            ],
            split_seed: 0,
        };
        let f = filter_by_length(&m, &vocab, 3);
        assert_eq!(f.records.len(), 1);
        assert_eq!(f.records[0].id, "short");
    }
}
