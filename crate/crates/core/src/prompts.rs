//! Prompt templates shared by synthesis, reward scoring, induction and the
//! inference cascade.
//!
//! A system message follows the `###Instruction###` / `###Input-Output
//! Format###` / `###Examples###` layout. The user message carries the query
//! sections and ends with an output contract line, which is also how the
//! mock backend recognises the task it is answering.

use crate::corpus::{QuestionInstance, SeedExample};
use crate::backends::{ChatMessage, Role};

pub const QP_INSTRUCTION: &str = "Extract the constraints and key details from a problem description, ignoring any specific questions or answer choices.

Focus on the rules or conditions given that are necessary to solve the problem, and extract these in a clear, descriptive list.";

pub const QP_IO_FORMAT: &str = "Input: A textual problem or scenario containing multiple rules or conditions within a specific context.
Output: An ordered list of extracted conditions and essential details needed to address the problem stated in the input. Each extracted condition should be clearly and concisely formatted, capturing only the facts necessary for determining the problem's solution.";

pub const UCOT_INSTRUCTION: &str = "The goal is to systematically dissect the problem using logical reasoning, providing detailed evidence for each derived statement, and verifying the correctness of these statements against the given problem conditions.

- For each condition or rule, analyze its implications step by step.

- Provide verification for each logical statement using evidence from the given problem.

- Ensure that each step follows logically from the previous, with clear conclusions and validations.";

pub const UCOT_NOTICE: &str = "**Notice:** The JSON output must use **double quotes** (\") for all keys and string values, as required by JSON syntax.";

pub const CP_INSTRUCTION: &str = "You are an expert in logical reasoning and structural analysis.
Your task is to identify and extract all distinct statements from the given question conditions and chain-of-thought (CoT) content.

- Extract explicitly stated and logically implied statements within the context.

- Each statement should be independent and clearly structured.

- Clearly state how each constraint impacts potential solutions based on the scenario.";

pub const CP_IO_FORMAT: &str = "Input: A question scenario with a set of constraints and a chain-of-thought explanation.
Output: A list of statements extracted from the given constraints and reasoning.";

pub const CV_EVIDENCE_INSTRUCTION: &str = "You are an expert in logical analysis and evidence validation.
Your task is to identify and extract specific supporting evidence for each derived statement from the given problem conditions.

- Locate precise textual or logical evidence that directly supports each statement.

- Ensure the evidence is explicitly stated in the problem conditions or logically inferred.

- Maintain clarity, accuracy, and relevance in evidence selection.";

pub const CV_VERIFY_INSTRUCTION: &str = "You are an expert in logical reasoning and verification.
Your task is to verify the logical correctness of each derived statement based on evidence from the problem context.

- Assess whether each statement logically follows from the provided evidence.

- Clearly indicate valid statements and invalid statements, with a brief justification for each.

- Do not introduce new assumptions; base verification strictly on the provided evidence.";

/// Default reverse-thinking instruction used to induce task prompts.
pub const DEFAULT_REVERSE_PROMPT: &str = "You are an expert prompt engineer. Below are input-output pairs produced by an expert annotator for a single task.
Think backwards from the outputs: work out what the annotator was asked to do, which details they kept, which they ignored, and how they formatted the result.
Then write the one task instruction that, given any new input of this kind, would lead a careful assistant to produce an output exactly like the examples.";

pub const JUDGE_INSTRUCTION: &str = "You are a strict evaluator. Two instructions were each used to produce outputs for the same inputs. Compare both output sets against the reference outputs and decide which set matches the references better in content and format.";

pub const QP_CONTRACT: &str = "Return the extracted conditions as a JSON array of strings.";
pub const UCOT_CONTRACT: &str = "Return a JSON object with the key \"cot_steps\": an array of objects with the keys \"statement\", \"evidence\" and \"verification\".";
pub const CP_CONTRACT: &str = "Return the extracted statements as a JSON array of strings.";
pub const INDUCTION_CONTRACT: &str = "Return only the instruction text that maps each input to its output.";
pub const JUDGE_CONTRACT: &str = "Answer with exactly one token: A, B, or TIE.";

const EVIDENCE_CONTRACT_MARK: &str = "evidence strings, one per statement, in the same order.";
const VERIFY_CONTRACT_MARK: &str = "verdicts, each \"True\" or \"False\", one per statement, in the same order.";

pub fn evidence_contract(n: usize) -> String {
    format!("Return a JSON array of exactly {n} {EVIDENCE_CONTRACT_MARK}")
}

pub fn verify_contract(n: usize) -> String {
    format!("Return a JSON array of exactly {n} {VERIFY_CONTRACT_MARK}")
}

/// Prompt family. `CvEvidence` and `CvVerify` are the two verifier stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PromptKind {
    #[serde(rename = "QP")]
    Qp,
    #[serde(rename = "UCoT")]
    UCot,
    #[serde(rename = "CP")]
    Cp,
    #[serde(rename = "CV_evidence")]
    CvEvidence,
    #[serde(rename = "CV_verify")]
    CvVerify,
}

impl PromptKind {
    pub fn default_instruction(self) -> &'static str {
        match self {
            PromptKind::Qp => QP_INSTRUCTION,
            PromptKind::UCot => UCOT_INSTRUCTION,
            PromptKind::Cp => CP_INSTRUCTION,
            PromptKind::CvEvidence => CV_EVIDENCE_INSTRUCTION,
            PromptKind::CvVerify => CV_VERIFY_INSTRUCTION,
        }
    }

    fn io_format(self) -> Option<&'static str> {
        match self {
            PromptKind::Qp => Some(QP_IO_FORMAT),
            PromptKind::Cp => Some(CP_IO_FORMAT),
            _ => None,
        }
    }

    fn notice(self) -> Option<&'static str> {
        match self {
            PromptKind::UCot => Some(UCOT_NOTICE),
            _ => None,
        }
    }
}

/// Task recognised from the contract line of the last user message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTask {
    QuestionParsing,
    UnifiedCot,
    CotParsing,
    Evidence { expected: usize },
    Verify { expected: usize },
    Induction,
    Judge,
}

impl PromptTask {
    pub fn detect(messages: &[ChatMessage]) -> Option<PromptTask> {
        let user = messages.iter().rev().find(|m| m.role == Role::User)?;
        let text = user.content.as_str();
        if text.contains(QP_CONTRACT) {
            Some(PromptTask::QuestionParsing)
        } else if text.contains(UCOT_CONTRACT) {
            Some(PromptTask::UnifiedCot)
        } else if text.contains(CP_CONTRACT) {
            Some(PromptTask::CotParsing)
        } else if let Some(n) = count_before(text, EVIDENCE_CONTRACT_MARK) {
            Some(PromptTask::Evidence { expected: n })
        } else if let Some(n) = count_before(text, VERIFY_CONTRACT_MARK) {
            Some(PromptTask::Verify { expected: n })
        } else if text.contains(INDUCTION_CONTRACT) {
            Some(PromptTask::Induction)
        } else if text.contains(JUDGE_CONTRACT) {
            Some(PromptTask::Judge)
        } else {
            None
        }
    }
}

// "... exactly {n} <mark>" -> n, taken from the last occurrence.
fn count_before(text: &str, mark: &str) -> Option<usize> {
    let at = text.rfind(mark)?;
    let head = text[..at].trim_end();
    let digits: String = head
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Render the system message for a prompt family with a pre-rendered
/// examples block (possibly empty).
pub fn render_system(kind: PromptKind, instruction: &str, examples: &str) -> String {
    let mut out = String::from("###Instruction###\n");
    out.push_str(instruction.trim());
    out.push('\n');
    if let Some(notice) = kind.notice() {
        out.push('\n');
        out.push_str(notice);
        out.push('\n');
    }
    if let Some(io) = kind.io_format() {
        out.push_str("\n###Input-Output Format###\n");
        out.push_str(io);
        out.push('\n');
    }
    if !examples.is_empty() {
        out.push_str("\n###Examples###\n");
        out.push_str(examples);
        if !examples.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

/// Question text followed by lettered options, one per line.
pub fn render_question(instance: &QuestionInstance) -> String {
    let mut out = instance.question.trim().to_string();
    for (i, option) in instance.options.iter().enumerate() {
        out.push('\n');
        out.push(crate::corpus::option_label(i));
        out.push_str(". ");
        out.push_str(option.trim());
    }
    out
}

/// One `Input:`/`Output:` demonstration.
pub fn render_demo(input: &str, output: &str) -> String {
    format!("Input:\n{input}\nOutput:\n{output}")
}

/// Full annotated exemplar used by the inference cascade; identical for every
/// stage so the demonstrations are shared across agents.
pub fn render_full_exemplar(example: &SeedExample) -> String {
    let mut out = String::new();
    out.push_str("Question:\n");
    out.push_str(&render_question(&example.instance));
    out.push_str("\n\nQuestion Parsing:\n");
    out.push_str(&pretty(&serde_json::Value::from(example.question_parsing.clone())));
    out.push_str("\n\nCoT:\n");
    out.push_str(&example.cot_text());
    out.push_str("\n\nCoT Parsing:\n");
    out.push_str(&pretty(&example.trace.to_json()));
    out
}

pub fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("Value serialization is infallible")
}

/// `label:\nbody` sections separated by blank lines, followed by the
/// contract line.
pub fn render_sections(sections: &[(&str, &str)], contract: &str) -> String {
    let mut out = String::new();
    for (label, body) in sections {
        out.push_str(label);
        out.push_str(":\n");
        out.push_str(body.trim_end());
        out.push_str("\n\n");
    }
    out.push_str(contract);
    out
}

/// Numbered list, one item per line.
pub fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extract the body of a `label:` section from a rendered user message.
pub fn section<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    let header = format!("{label}:\n");
    let start = if text.starts_with(&header) {
        header.len()
    } else {
        text.find(&format!("\n{header}"))? + header.len() + 1
    };
    let rest = &text[start..];
    let end = rest.find("\n\n").unwrap_or(rest.len());
    Some(&rest[..end])
}

pub fn system(content: impl Into<String>) -> ChatMessage {
    ChatMessage::new(Role::System, content)
}

pub fn user(content: impl Into<String>) -> ChatMessage {
    ChatMessage::new(Role::User, content)
}
