use std::fmt;

use super::{Catalog, Dialogue, Role};

/// A broken dialogue invariant. Violations are reported as data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoUserTurn,
    EmptyText { turn: usize },
    TurnOrder { turn: usize, index: usize },
    EmptyAttribute { turn: usize },
    EmptyUserValue { turn: usize, attribute: String },
    UserElicits { turn: usize },
    UserRecommends { turn: usize },
    CategoryMismatch { expected: String, found: String },
    OrphanProduct { product_id: String },
}

impl Violation {
    pub fn is_orphan(&self) -> bool {
        matches!(self, Violation::OrphanProduct { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoUserTurn => write!(f, "dialogue has no user turn"),
            Violation::EmptyText { turn } => write!(f, "turn {turn}: empty utterance text"),
            Violation::TurnOrder { turn, index } => {
                write!(
                    f,
                    "turn {turn}: turn_index {index} is not strictly increasing"
                )
            }
            Violation::EmptyAttribute { turn } => {
                write!(f, "turn {turn}: frame with empty attribute")
            }
            Violation::EmptyUserValue { turn, attribute } => {
                write!(
                    f,
                    "turn {turn}: user frame {attribute:?} has an empty value"
                )
            }
            Violation::UserElicits { turn } => {
                write!(
                    f,
                    "turn {turn}: role violation, user turn carries elicit attributes"
                )
            }
            Violation::UserRecommends { turn } => {
                write!(
                    f,
                    "turn {turn}: role violation, user turn carries recommended products"
                )
            }
            Violation::CategoryMismatch { expected, found } => {
                write!(
                    f,
                    "dialogue category {found:?} does not match catalog {expected:?}"
                )
            }
            Violation::OrphanProduct { product_id } => {
                write!(f, "orphan product {product_id:?} not in catalog")
            }
        }
    }
}

pub fn validate_dialogue(d: &Dialogue, catalog: &Catalog) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.category != catalog.category.id {
        out.push(Violation::CategoryMismatch {
            expected: catalog.category.id.clone(),
            found: d.category.clone(),
        });
    }
    if !d.turns.iter().any(|t| t.role() == Role::User) {
        out.push(Violation::NoUserTurn);
    }
    let mut last_index: Option<usize> = None;
    for (pos, turn) in d.turns.iter().enumerate() {
        let idx = turn.index();
        if let Some(prev) = last_index {
            if idx <= prev {
                out.push(Violation::TurnOrder {
                    turn: pos,
                    index: idx,
                });
            }
        }
        last_index = Some(idx);
        if turn.utterance.text.trim().is_empty() {
            out.push(Violation::EmptyText { turn: pos });
        }
        for frame in &turn.frames {
            if frame.attribute.trim().is_empty() {
                out.push(Violation::EmptyAttribute { turn: pos });
            } else if turn.role() == Role::User && frame.value.trim().is_empty() {
                out.push(Violation::EmptyUserValue {
                    turn: pos,
                    attribute: frame.attribute.clone(),
                });
            }
        }
        if turn.role() == Role::User {
            if !turn.elicit_attributes.is_empty() {
                out.push(Violation::UserElicits { turn: pos });
            }
            if !turn.recommended_products.is_empty() {
                out.push(Violation::UserRecommends { turn: pos });
            }
        }
    }
    let referenced = d
        .turns
        .iter()
        .flat_map(|t| t.recommended_products.iter())
        .chain(&d.user_behaviors);
    let mut reported = std::collections::HashSet::new();
    for pid in referenced {
        if !catalog.contains(pid) && reported.insert(pid.as_str()) {
            out.push(Violation::OrphanProduct {
                product_id: pid.clone(),
            });
        }
    }
    out
}
