//! Prompt grammar of the unified CRS: special-token segments, task prompts
//! and the shared `attr: value;attr: value` output format.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_label, DialogueTurn, Role, SemanticFrame};
use crate::error::{Error, Result};
use crate::tasks::{TaskInstance, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    User,
    System,
    Understand,
    Elicit,
    Recommend,
    Llm,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 6] = [
        SpecialToken::User,
        SpecialToken::System,
        SpecialToken::Understand,
        SpecialToken::Elicit,
        SpecialToken::Recommend,
        SpecialToken::Llm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SpecialToken::User => "[user]",
            SpecialToken::System => "[system]",
            SpecialToken::Understand => "[understand]",
            SpecialToken::Elicit => "[elicit]",
            SpecialToken::Recommend => "[recommend]",
            SpecialToken::Llm => "[LLM]",
        }
    }

    pub fn parse(s: &str) -> Option<SpecialToken> {
        SpecialToken::ALL.into_iter().find(|t| t.as_str() == s)
    }

    fn for_role(role: Role) -> SpecialToken {
        match role {
            Role::User => SpecialToken::User,
            Role::System => SpecialToken::System,
        }
    }
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Surface forms of every special token, in declaration order.
pub fn special_token_list() -> Vec<String> {
    SpecialToken::ALL
        .iter()
        .map(|t| t.as_str().to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    /// Understanding of a user utterance.
    #[serde(rename = "X_U")]
    UserUnderstanding,
    /// Understanding of a system utterance.
    #[serde(rename = "X_S")]
    SystemUnderstanding,
    #[serde(rename = "X_A")]
    Elicitation,
    #[serde(rename = "X_R")]
    Recommendation,
    #[serde(rename = "X_G")]
    Generation,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 5] = [
        PromptVariant::UserUnderstanding,
        PromptVariant::SystemUnderstanding,
        PromptVariant::Elicitation,
        PromptVariant::Recommendation,
        PromptVariant::Generation,
    ];

    pub fn kind(self) -> TaskKind {
        match self {
            PromptVariant::UserUnderstanding | PromptVariant::SystemUnderstanding => {
                TaskKind::Understanding
            }
            PromptVariant::Elicitation => TaskKind::Elicitation,
            PromptVariant::Recommendation => TaskKind::Recommendation,
            PromptVariant::Generation => TaskKind::Generation,
        }
    }

    /// The variant matching an instance (role of the current turn decides
    /// between the two understanding variants).
    pub fn for_instance(instance: &TaskInstance) -> PromptVariant {
        match instance.kind() {
            TaskKind::Understanding => match instance.current.as_ref().map(DialogueTurn::role) {
                Some(Role::System) => PromptVariant::SystemUnderstanding,
                _ => PromptVariant::UserUnderstanding,
            },
            TaskKind::Elicitation => PromptVariant::Elicitation,
            TaskKind::Recommendation => PromptVariant::Recommendation,
            TaskKind::Generation => PromptVariant::Generation,
        }
    }
}

/// Marks a sequence that already carries an `[LLM]` segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistMark {
    /// The assisting prediction failed to parse; its segment is empty.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub variant: PromptVariant,
    pub text: String,
    /// Empty for recommendation, which is scored by the head.
    pub task_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist: Option<AssistMark>,
}

pub const PROMPT_UNDERSTAND: &str = "Identify attributes and values:";
pub const PROMPT_ELICIT: &str = "Select an attribute to ask:";
pub const PROMPT_GENERATE: &str = "Generate a response:";

pub fn make_task_prompt(kind: TaskKind) -> Result<&'static str> {
    match kind {
        TaskKind::Understanding => Ok(PROMPT_UNDERSTAND),
        TaskKind::Elicitation => Ok(PROMPT_ELICIT),
        TaskKind::Generation => Ok(PROMPT_GENERATE),
        TaskKind::Recommendation => Err(Error::InvalidArgument(
            "recommendation is scored by the head and has no task prompt".into(),
        )),
    }
}

/// Frames as `attr: value` pairs joined by `;`. An empty value renders as
/// `attr:`.
pub fn render_frames(frames: &[SemanticFrame]) -> String {
    frames
        .iter()
        .map(|f| {
            if f.value.is_empty() {
                format!("{}:", f.attribute)
            } else {
                format!("{}: {}", f.attribute, f.value)
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn render_list(items: &[String]) -> String {
    items.join(";")
}

fn push_segment(out: &mut Vec<String>, token: SpecialToken, body: &str) {
    if body.is_empty() {
        out.push(token.as_str().to_string());
    } else {
        out.push(format!("{token} {body}"));
    }
}

fn render_turn(
    out: &mut Vec<String>,
    turn: &DialogueTurn,
    variant: PromptVariant,
    with_frames: bool,
) {
    if turn.role() == Role::System {
        if variant == PromptVariant::Elicitation && !turn.elicit_attributes.is_empty() {
            push_segment(
                out,
                SpecialToken::Elicit,
                &render_list(&turn.elicit_attributes),
            );
        }
        if variant == PromptVariant::Recommendation && !turn.recommended_products.is_empty() {
            push_segment(
                out,
                SpecialToken::Recommend,
                &render_list(&turn.recommended_products),
            );
        }
    }
    push_segment(
        out,
        SpecialToken::for_role(turn.role()),
        turn.utterance.text.trim(),
    );
    if with_frames && !turn.frames.is_empty() {
        push_segment(out, SpecialToken::Understand, &render_frames(&turn.frames));
    }
}

/// Render a run of turns with their frames under the segment rules of
/// `variant`.
pub fn serialize_turns(turns: &[DialogueTurn], variant: PromptVariant) -> String {
    let mut out = Vec::new();
    for t in turns {
        render_turn(&mut out, t, variant, true);
    }
    out.join(" ")
}

/// Serialize an instance's context into the prompt sequence of `variant`.
pub fn serialize_context(
    instance: &TaskInstance,
    variant: PromptVariant,
) -> Result<PromptSequence> {
    let expected = PromptVariant::for_instance(instance);
    if variant != expected {
        return Err(Error::InvalidArgument(format!(
            "variant {variant:?} does not fit a {} instance (expected {expected:?})",
            instance.kind()
        )));
    }
    let mut out = Vec::new();
    for t in &instance.context {
        render_turn(&mut out, t, variant, true);
    }
    match variant {
        PromptVariant::UserUnderstanding | PromptVariant::SystemUnderstanding => {
            let current = instance.current.as_ref().ok_or_else(|| {
                Error::InvalidArgument("understanding instance without current turn".into())
            })?;
            render_turn(&mut out, current, variant, false);
        }
        PromptVariant::Generation => {
            if !instance.guide_attributes.is_empty() {
                push_segment(
                    &mut out,
                    SpecialToken::Elicit,
                    &render_list(&instance.guide_attributes),
                );
            }
            if !instance.guide_products.is_empty() {
                push_segment(
                    &mut out,
                    SpecialToken::Recommend,
                    &render_list(&instance.guide_products),
                );
            }
        }
        PromptVariant::Elicitation | PromptVariant::Recommendation => {}
    }
    let task_prompt = match variant.kind() {
        TaskKind::Recommendation => String::new(),
        kind => make_task_prompt(kind)?.to_string(),
    };
    Ok(PromptSequence {
        variant,
        text: out.join(" "),
        task_prompt,
        assist: None,
    })
}

/// Frames or attribute names recovered from generated text, plus the
/// segments that were dropped as malformed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub frames: Vec<SemanticFrame>,
    pub attributes: Vec<String>,
    pub dropped: Vec<String>,
}

impl StructuredOutput {
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty() && self.attributes.is_empty()
    }
}

fn has_word(s: &str) -> bool {
    s.chars().any(char::is_alphanumeric)
}

/// Lenient parse of `attr: value;attr: value`. Understanding requires the
/// colon; for every other kind a segment is an attribute name, optionally
/// followed by `: value`, which is ignored. Blank segments are skipped
/// silently; segments without any word character are dropped.
pub fn parse_structured_output(text: &str, kind: TaskKind) -> StructuredOutput {
    let mut out = StructuredOutput::default();
    let normalized = normalize_label(text);
    for raw in normalized.split(';') {
        let seg = raw.trim();
        if seg.is_empty() {
            continue;
        }
        if kind == TaskKind::Understanding {
            match seg.split_once(':') {
                Some((attr, value)) if has_word(attr) => out
                    .frames
                    .push(SemanticFrame::new(attr.trim(), value.trim())),
                _ => out.dropped.push(seg.to_string()),
            }
        } else {
            let attr = seg.split_once(':').map_or(seg, |(a, _)| a).trim();
            if has_word(attr) {
                out.attributes.push(attr.to_string());
            } else {
                out.dropped.push(seg.to_string());
            }
        }
    }
    out
}

/// A turn recovered from a serialized sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodedTurn {
    pub role: Option<Role>,
    pub text: String,
    pub frames: Vec<SemanticFrame>,
    pub elicit: Vec<String>,
    pub recommend: Vec<String>,
}

/// Structure recovered from a serialized sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodedPrompt {
    pub turns: Vec<DecodedTurn>,
    /// `[elicit]`/`[recommend]` segments after the last utterance.
    pub tail_elicit: Vec<String>,
    pub tail_recommend: Vec<String>,
    pub llm: Option<String>,
}

/// Split a text into `(token, body)` segments. Text before the first
/// special token is returned with `None`.
pub fn split_segments(text: &str) -> Vec<(Option<SpecialToken>, String)> {
    let mut out: Vec<(Option<SpecialToken>, String)> = Vec::new();
    let mut current: (Option<SpecialToken>, Vec<&str>) = (None, Vec::new());
    for word in text.split(' ') {
        if let Some(tok) = SpecialToken::parse(word) {
            if current.0.is_some() || !current.1.is_empty() {
                out.push((current.0, current.1.join(" ")));
            }
            current = (Some(tok), Vec::new());
        } else {
            current.1.push(word);
        }
    }
    if current.0.is_some() || !current.1.is_empty() {
        out.push((current.0, current.1.join(" ")));
    }
    out
}

fn split_list(body: &str) -> Vec<String> {
    body.split(';')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Inverse of [`serialize_context`] for the structure a CRS sees.
pub fn decode_prompt(text: &str) -> DecodedPrompt {
    let mut out = DecodedPrompt::default();
    let mut pending_elicit = Vec::new();
    let mut pending_recommend = Vec::new();
    for (tok, body) in split_segments(text) {
        match tok {
            Some(SpecialToken::User) | Some(SpecialToken::System) => {
                let role = if tok == Some(SpecialToken::User) {
                    Role::User
                } else {
                    Role::System
                };
                out.turns.push(DecodedTurn {
                    role: Some(role),
                    text: body,
                    frames: Vec::new(),
                    elicit: std::mem::take(&mut pending_elicit),
                    recommend: std::mem::take(&mut pending_recommend),
                });
            }
            Some(SpecialToken::Understand) => {
                let frames = parse_structured_output(&body, TaskKind::Understanding).frames;
                if let Some(t) = out.turns.last_mut() {
                    t.frames = frames;
                }
            }
            Some(SpecialToken::Elicit) => pending_elicit.extend(split_list(&body)),
            Some(SpecialToken::Recommend) => pending_recommend.extend(split_list(&body)),
            Some(SpecialToken::Llm) => out.llm = Some(body),
            None => {}
        }
    }
    out.tail_elicit = pending_elicit;
    out.tail_recommend = pending_recommend;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::tasks::{extract_task_instances, TaskGold};

    fn turn(role: Role, i: usize, text: &str) -> DialogueTurn {
        DialogueTurn {
            utterance: Utterance {
                role,
                text: text.into(),
                turn_index: i,
            },
            frames: vec![],
            elicit_attributes: vec![],
            recommended_products: vec![],
        }
    }

    fn instance(
        kind_gold: TaskGold,
        context: Vec<DialogueTurn>,
        current: Option<DialogueTurn>,
    ) -> TaskInstance {
        TaskInstance {
            dialogue_id: "d".into(),
            category: "c".into(),
            cut_index: context.len(),
            sub_index: 0,
            context,
            current,
            gold: kind_gold,
            candidates: vec![],
            behaviors: vec![],
            guide_attributes: vec![],
            guide_products: vec![],
        }
    }

    fn t1() -> DialogueTurn {
        let mut t = turn(Role::User, 0, "t1");
        t.frames.push(SemanticFrame::new("color", "red"));
        t
    }

    #[test]
    fn one_turn_context_renders_frames() {
        assert_eq!(
            serialize_turns(&[t1()], PromptVariant::UserUnderstanding),
            "[user] t1 [understand] color: red"
        );
    }

    #[test]
    fn understanding_input_ends_at_current_utterance() {
        let cur = t1();
        let inst = instance(
            TaskGold::Understanding {
                gold_frames: cur.frames.clone(),
            },
            vec![],
            Some(cur),
        );
        let seq = serialize_context(&inst, PromptVariant::UserUnderstanding).unwrap();
        assert_eq!(seq.text, "[user] t1");
        assert_eq!(seq.task_prompt, PROMPT_UNDERSTAND);
        assert!(serialize_context(&inst, PromptVariant::SystemUnderstanding).is_err());
    }

    #[test]
    fn elicitation_interleaves_elicit_before_system_turn() {
        let mut s1 = turn(Role::System, 1, "s1");
        s1.elicit_attributes.push("size".into());
        let ctx = vec![t1(), s1, turn(Role::User, 2, "t2")];
        let inst = instance(
            TaskGold::Elicitation {
                gold_attributes: vec!["material".into()],
            },
            ctx,
            None,
        );
        let seq = serialize_context(&inst, PromptVariant::Elicitation).unwrap();
        assert_eq!(
            seq.text,
            "[user] t1 [understand] color: red [elicit] size [system] s1 [user] t2"
        );
        assert_eq!(seq.task_prompt, PROMPT_ELICIT);
    }

    #[test]
    fn recommendation_and_generation_segments() {
        let mut s1 = turn(Role::System, 1, "s1");
        s1.recommended_products.push("P1".into());
        s1.elicit_attributes.push("size".into());
        let ctx = vec![t1(), s1, turn(Role::User, 2, "t2")];
        let rec = instance(
            TaskGold::Recommendation {
                gold_product: "P2".into(),
            },
            ctx.clone(),
            None,
        );
        let seq = serialize_context(&rec, PromptVariant::Recommendation).unwrap();
        assert_eq!(
            seq.text,
            "[user] t1 [understand] color: red [recommend] P1 [system] s1 [user] t2"
        );
        assert_eq!(seq.task_prompt, "");

        let mut gen = instance(
            TaskGold::Generation {
                gold_response: "r".into(),
            },
            ctx,
            None,
        );
        gen.guide_attributes = vec!["material".into()];
        gen.guide_products = vec!["P2".into()];
        let seq = serialize_context(&gen, PromptVariant::Generation).unwrap();
        assert_eq!(
            seq.text,
            "[user] t1 [understand] color: red [system] s1 [user] t2 [elicit] material [recommend] P2"
        );
        assert_eq!(seq.task_prompt, PROMPT_GENERATE);
    }

    #[test]
    fn empty_frames_omit_understand_segment() {
        let ctx = vec![turn(Role::User, 0, "hello")];
        let inst = instance(
            TaskGold::Elicitation {
                gold_attributes: vec!["x".into()],
            },
            ctx,
            None,
        );
        let seq = serialize_context(&inst, PromptVariant::Elicitation).unwrap();
        assert_eq!(seq.text, "[user] hello");
        assert!(!seq.text.contains("[understand]"));
    }

    #[test]
    fn task_prompts_are_exact() {
        assert_eq!(
            make_task_prompt(TaskKind::Understanding).unwrap(),
            "Identify attributes and values:"
        );
        assert_eq!(
            make_task_prompt(TaskKind::Elicitation).unwrap(),
            "Select an attribute to ask:"
        );
        assert_eq!(
            make_task_prompt(TaskKind::Generation).unwrap(),
            "Generate a response:"
        );
        assert!(make_task_prompt(TaskKind::Recommendation).is_err());
    }

    #[test]
    fn special_token_surface_forms() {
        assert_eq!(
            special_token_list(),
            vec![
                "[user]",
                "[system]",
                "[understand]",
                "[elicit]",
                "[recommend]",
                "[LLM]"
            ]
        );
    }

    #[test]
    fn structured_parse_examples() {
        let p = parse_structured_output("a: 1;b: 2", TaskKind::Understanding);
        assert_eq!(
            p.frames,
            vec![SemanticFrame::new("a", "1"), SemanticFrame::new("b", "2")]
        );
        assert!(p.dropped.is_empty());

        assert_eq!(
            parse_structured_output("", TaskKind::Understanding),
            StructuredOutput::default()
        );

        let p = parse_structured_output("a: 1;;b", TaskKind::Understanding);
        assert_eq!(p.frames, vec![SemanticFrame::new("a", "1")]);
        assert_eq!(p.dropped, vec!["b".to_string()]);

        let p = parse_structured_output("color: red; size: big", TaskKind::Understanding);
        assert_eq!(
            p.frames,
            vec![
                SemanticFrame::new("color", "red"),
                SemanticFrame::new("size", "big")
            ]
        );

        let p = parse_structured_output("???", TaskKind::Elicitation);
        assert!(p.attributes.is_empty());
        assert_eq!(p.dropped.len(), 1);

        let p = parse_structured_output("price;brand: acme", TaskKind::Elicitation);
        assert_eq!(p.attributes, vec!["price", "brand"]);
    }

    #[test]
    fn full_width_output_is_normalized() {
        let p =
            parse_structured_output("肌肤问题：红肿痘痘;肌肤问题：闭口", TaskKind::Understanding);
        assert_eq!(
            p.frames,
            vec![
                SemanticFrame::new("肌肤问题", "红肿痘痘"),
                SemanticFrame::new("肌肤问题", "闭口")
            ]
        );
    }

    #[test]
    fn empty_value_frames_round_trip() {
        let frames = vec![
            SemanticFrame::new("size", ""),
            SemanticFrame::new("color", "red"),
        ];
        let text = render_frames(&frames);
        assert_eq!(text, "size:;color: red");
        assert_eq!(
            parse_structured_output(&text, TaskKind::Understanding).frames,
            frames
        );
    }

    #[test]
    fn decode_recovers_context() {
        let mut s1 = turn(Role::System, 1, "s1 is here");
        s1.elicit_attributes.push("size".into());
        s1.frames.push(SemanticFrame::new("size", ""));
        let ctx = vec![t1(), s1.clone(), turn(Role::User, 2, "t2")];
        let d = crate::corpus::Dialogue {
            dialogue_id: "d".into(),
            category: "c".into(),
            turns: {
                let mut v = ctx.clone();
                let mut s = turn(Role::System, 3, "s2");
                s.elicit_attributes.push("material".into());
                v.push(s);
                v
            },
            user_behaviors: vec![],
        };
        let inst = extract_task_instances(&d, TaskKind::Elicitation)
            .pop()
            .unwrap();
        let seq = serialize_context(&inst, PromptVariant::Elicitation).unwrap();
        let dec = decode_prompt(&seq.text);
        assert_eq!(dec.turns.len(), 3);
        assert_eq!(dec.turns[1].elicit, vec!["size"]);
        assert_eq!(dec.turns[1].frames, s1.frames);
        assert_eq!(dec.turns[1].text, "s1 is here");
    }
}
