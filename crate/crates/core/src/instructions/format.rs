use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TITLE_KEY: &str = "title: ";
const INGREDIENTS_KEY: &str = "ingredients: ";
const QUANTITIES_KEY: &str = "quantities: ";
const FIELD_SEP: &str = " | ";
const ITEM_SEP: &str = "; ";

/// Fields of the text model input. Quantities only ever reach the model in
/// training mode.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionInput {
    pub title: String,
    pub ingredients: Vec<String>,
    #[serde(default)]
    pub ingredients_with_quantity: Option<Vec<String>>,
}

impl InstructionInput {
    /// Builds an input from free text, replacing reserved separators with
    /// commas and dropping empty items.
    pub fn from_parts<S: AsRef<str>>(title: &str, ingredients: &[S], quantities: Option<&[S]>) -> Self {
        let clean = |items: &[S]| -> Vec<String> {
            items.iter().map(|s| sanitize_field(s.as_ref())).filter(|s| !s.is_empty()).collect()
        };
        Self {
            title: sanitize_field(title),
            ingredients: clean(ingredients),
            ingredients_with_quantity: quantities.map(clean),
        }
    }
}

pub fn sanitize_field(text: &str) -> String {
    let replaced: String = text.chars().map(|c| if matches!(c, '|' | ';') { ',' } else { c }).collect();
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatMode {
    Train,
    Infer,
}

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.contains('|') || value.contains(';') || value.contains('\n') {
        return Err(Error::argument(format!("{what} '{value}' contains a reserved separator (| ; or newline)")));
    }
    if value.trim() != value || value.is_empty() {
        return Err(Error::argument(format!("{what} '{value}' is empty or has surrounding whitespace")));
    }
    Ok(())
}

/// `title: <t> | ingredients: <i1>; <i2>` plus ` | quantities: <q1>; ...` in
/// training mode when quantities are present. Empty lists are omitted.
pub fn format_model_input(input: &InstructionInput, mode: FormatMode) -> Result<String> {
    if input.title.trim().is_empty() {
        return Err(Error::argument("instruction input needs a nonempty title"));
    }
    check_field(&input.title, "title")?;
    let mut out = format!("{TITLE_KEY}{}", input.title);
    if !input.ingredients.is_empty() {
        for i in &input.ingredients {
            check_field(i, "ingredient")?;
        }
        out.push_str(FIELD_SEP);
        out.push_str(INGREDIENTS_KEY);
        out.push_str(&input.ingredients.join(ITEM_SEP));
    }
    if mode == FormatMode::Train {
        if let Some(q) = input.ingredients_with_quantity.as_ref().filter(|q| !q.is_empty()) {
            for v in q {
                check_field(v, "quantity")?;
            }
            out.push_str(FIELD_SEP);
            out.push_str(QUANTITIES_KEY);
            out.push_str(&q.join(ITEM_SEP));
        }
    }
    Ok(out)
}

/// Inverse of [`format_model_input`].
pub fn parse_model_input(text: &str) -> Result<InstructionInput> {
    let bad = |m: &str| Error::Parse {
        context: "model input".into(),
        message: m.to_string(),
    };
    let mut fields = text.split(FIELD_SEP);
    let title = fields
        .next()
        .and_then(|f| f.strip_prefix(TITLE_KEY))
        .ok_or_else(|| bad("missing title field"))?
        .to_string();
    let mut input = InstructionInput {
        title,
        ..Default::default()
    };
    for f in fields {
        if let Some(v) = f.strip_prefix(INGREDIENTS_KEY) {
            input.ingredients = v.split(ITEM_SEP).map(str::to_string).collect();
        } else if let Some(v) = f.strip_prefix(QUANTITIES_KEY) {
            input.ingredients_with_quantity = Some(v.split(ITEM_SEP).map(str::to_string).collect());
        } else {
            return Err(bad(&format!("unknown field '{f}'")));
        }
    }
    Ok(input)
}

/// The three training inputs of a recipe: title only, title with
/// ingredients, and title with ingredients and quantities.
pub fn training_variants(input: &InstructionInput) -> Result<Vec<String>> {
    let title_only = InstructionInput {
        title: input.title.clone(),
        ..Default::default()
    };
    let with_ingredients = InstructionInput {
        ingredients_with_quantity: None,
        ..input.clone()
    };
    let mut out = vec![
        format_model_input(&title_only, FormatMode::Train)?,
        format_model_input(&with_ingredients, FormatMode::Train)?,
    ];
    if input.ingredients_with_quantity.as_ref().is_some_and(|q| !q.is_empty()) {
        out.push(format_model_input(input, FormatMode::Train)?);
    }
    out.dedup();
    Ok(out)
}

static STEP_BOUNDARY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]\s+").expect("valid regex"));

/// Splits text after sentence-final punctuation followed by whitespace.
pub fn split_into_steps(text: &str) -> Vec<String> {
    let mut steps = Vec::new();
    let mut start = 0;
    for m in STEP_BOUNDARY.find_iter(text) {
        steps.push(&text[start..m.start() + 1]);
        start = m.end();
    }
    steps.push(&text[start..]);
    steps.into_iter().map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

pub fn join_steps(steps: &[String]) -> String {
    steps.join(" ")
}
