//! Few-shot prompt construction for recipe customization and recipe-to-code.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::code::parse_code_recipe;
use crate::error::{Error, Result};

/// Separates the segments of a code prompt.
pub const CODE_SEGMENT_SEPARATOR: &str = "\n\n###\n\n";
const DEMO_SEPARATOR: &str = "\n\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecipe {
    pub title: String,
    pub ingredients: Vec<String>,
    pub steps: Vec<String>,
}

impl fmt::Display for PromptRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Title: {}", self.title)?;
        writeln!(f, "Ingredients: {}", self.ingredients.join(", "))?;
        write!(f, "Instructions:")?;
        for (i, s) in self.steps.iter().enumerate() {
            write!(f, "\n{}. {s}", i + 1)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomizationTopic {
    IngredientAdjustment,
    DetailAddition,
    TasteAdjustment,
    CaloriesAdjustment,
    TimeAdaptation,
}

impl CustomizationTopic {
    pub const ALL: [Self; 5] = [
        Self::IngredientAdjustment,
        Self::DetailAddition,
        Self::TasteAdjustment,
        Self::CaloriesAdjustment,
        Self::TimeAdaptation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IngredientAdjustment => "ingredient_adjustment",
            Self::DetailAddition => "detail_addition",
            Self::TasteAdjustment => "taste_adjustment",
            Self::CaloriesAdjustment => "calories_adjustment",
            Self::TimeAdaptation => "time_adaptation",
        }
    }

    /// Slots that must be filled.
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            Self::IngredientAdjustment => &["ingredient"],
            Self::TasteAdjustment => &["taste"],
            Self::TimeAdaptation => &["time"],
            Self::DetailAddition | Self::CaloriesAdjustment => &[],
        }
    }
}

impl FromStr for CustomizationTopic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::argument(format!("unknown customization topic '{s}'")))
    }
}

/// A topic with its slot values. Besides the template slots (`ingredient`,
/// `taste`, `time`), `preference` picks like/dislike (default dislike) and
/// `direction` picks reduce/increase for calories (default reduce).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomizationRequest {
    pub topic: CustomizationTopic,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
}

impl CustomizationRequest {
    pub fn new(topic: CustomizationTopic, slots: impl IntoIterator<Item = (&'static str, String)>) -> Self {
        Self {
            topic,
            slots: slots.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    fn slot(&self, name: &str) -> Result<&str> {
        self.slots
            .get(name)
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::argument(format!("{} request is missing the '{name}' slot", self.topic.as_str())))
    }

    fn likes(&self) -> Result<bool> {
        match self.slots.get("preference").map(|s| s.trim()) {
            None | Some("dislike") | Some("don't like") => Ok(false),
            Some("like") => Ok(true),
            Some(other) => Err(Error::argument(format!("preference must be like or dislike, got '{other}'"))),
        }
    }

    /// The instantiated question.
    pub fn question(&self) -> Result<String> {
        for s in self.topic.required_slots() {
            self.slot(s)?;
        }
        Ok(match self.topic {
            CustomizationTopic::IngredientAdjustment => {
                let i = self.slot("ingredient")?;
                if self.likes()? {
                    format!("I like {i}, can you add that for me?")
                } else {
                    format!("I don't like {i}, can you remove that for me?")
                }
            }
            CustomizationTopic::DetailAddition => "I am new to cooking, can you expand more details for the recipe?".into(),
            CustomizationTopic::TasteAdjustment => {
                let t = self.slot("taste")?;
                let like = if self.likes()? { "like" } else { "don't like" };
                format!("I {like} {t} food, can you change the taste of the recipe?")
            }
            CustomizationTopic::CaloriesAdjustment => {
                let d = match self.slots.get("direction").map(|s| s.trim()) {
                    None | Some("reduce") => "reduce",
                    Some("increase") => "increase",
                    Some(other) => return Err(Error::argument(format!("direction must be reduce or increase, got '{other}'"))),
                };
                format!("Can you {d} the calorie content of the food?")
            }
            CustomizationTopic::TimeAdaptation => {
                format!("Can you provide a more convenient version that can be done in {} minutes?", self.slot("time")?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomizationDemo {
    pub recipe: PromptRecipe,
    pub request: CustomizationRequest,
    pub customized: PromptRecipe,
}

fn customization_block(recipe: &PromptRecipe, question: &str) -> String {
    format!("{recipe}\nQuestion: {question}\nAnswer:\n")
}

/// Demonstrations (recipe, question, customized recipe) followed by the
/// target recipe and its question, with the answer left open.
pub fn build_customization_prompt(recipe: &PromptRecipe, request: &CustomizationRequest, demonstrations: &[CustomizationDemo]) -> Result<String> {
    if demonstrations.is_empty() {
        return Err(Error::argument("customization prompts need at least one demonstration"));
    }
    let mut parts = Vec::with_capacity(demonstrations.len() + 1);
    for d in demonstrations {
        parts.push(format!("{}{}", customization_block(&d.recipe, &d.request.question()?), d.customized));
    }
    parts.push(customization_block(recipe, &request.question()?));
    Ok(parts.join(DEMO_SEPARATOR))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDemo {
    pub recipe_prompt: String,
    pub code: String,
}

/// `r1, c1, ..., rk, ck, target` joined by [`CODE_SEGMENT_SEPARATOR`]. Every
/// demonstration's code must parse cleanly.
pub fn build_code_prompt(demos: &[CodeDemo], target: &PromptRecipe) -> Result<String> {
    if demos.is_empty() {
        return Err(Error::argument("code prompts need at least one demonstration"));
    }
    let mut segments = Vec::with_capacity(2 * demos.len() + 1);
    for (k, d) in demos.iter().enumerate() {
        let bad = |why: String| Error::argument(format!("code demonstration {}: {why}", k + 1));
        let parsed = parse_code_recipe(&d.code).map_err(|e| bad(e.to_string()))?;
        if let Some(diag) = parsed.diagnostics.first() {
            return Err(bad(format!("line {}: {}", diag.line, diag.reason)));
        }
        if let Some(p) = parsed.recipe.problems().first() {
            return Err(bad(p.clone()));
        }
        segments.push(d.recipe_prompt.trim_end().to_string());
        segments.push(d.code.trim_end().to_string());
    }
    segments.push(target.to_string());
    Ok(segments.join(CODE_SEGMENT_SEPARATOR))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_customization_demos(path: &Path) -> Result<Vec<CustomizationDemo>> {
    read_json(path)
}

pub fn load_code_demos(path: &Path) -> Result<Vec<CodeDemo>> {
    read_json(path)
}
