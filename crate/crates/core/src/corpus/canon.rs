//! Ingredient name canonicalization.
//!
//! Lowercase, trim, collapse internal whitespace, then fold a plural last word
//! to its singular form with a fixed suffix table. The rule is idempotent.

/// Suffix rewrites tried in order; the first match wins.
const SUFFIX_RULES: &[(&str, &str)] = &[
    ("ies", "y"),
    ("oes", "o"),
    ("sses", "ss"),
    ("ches", "ch"),
    ("shes", "sh"),
    ("xes", "x"),
];

/// Words ending in `s` that are already singular.
const KEEP: &[&str] = &["molasses", "hummus", "couscous", "asparagus", "swiss", "brussels", "citrus", "chives"];

pub fn canonicalize(name: &str) -> String {
    let lowered = name.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    let Some(last) = words.pop() else {
        return String::new();
    };
    let folded = singularize(last);
    let mut out = words.join(" ");
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(&folded);
    out
}

fn singularize(word: &str) -> String {
    if word.chars().count() <= 3 || KEEP.contains(&word) {
        return word.to_string();
    }
    for (suffix, replacement) in SUFFIX_RULES {
        if let Some(stem) = word.strip_suffix(suffix) {
            return format!("{stem}{replacement}");
        }
    }
    if word.ends_with('s') && !(word.ends_with("ss") || word.ends_with("us") || word.ends_with("is")) {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

const UNITS: &[&str] = &[
    "cup", "cups", "c", "tablespoon", "tablespoons", "tbsp", "tbs", "tsp", "teaspoon", "teaspoons", "ounce",
    "ounces", "oz", "pound", "pounds", "lb", "lbs", "gram", "grams", "g", "kg", "ml", "l", "liter", "liters",
    "pinch", "pinches", "dash", "clove", "cloves", "can", "cans", "package", "packages", "slice", "slices",
    "stick", "sticks", "large", "small", "medium", "whole", "fresh", "chopped", "minced", "sliced", "diced",
];

/// Best-effort canonical name from a free-text quantity line such as
/// `"2 tablespoons of salt"`: drops leading amounts, units and `of`, and
/// anything after a comma or inside parentheses. Used only when the corpus
/// does not ship pre-extracted ingredient names.
pub fn name_from_quantity_line(line: &str) -> String {
    let mut text = line.to_lowercase();
    while let (Some(open), Some(close)) = (text.find('('), text.find(')')) {
        if close < open {
            break;
        }
        text.replace_range(open..=close, " ");
    }
    let head = text.split(',').next().unwrap_or("");
    let words: Vec<&str> = head.split_whitespace().collect();
    let mut start = 0;
    while start < words.len() {
        let w = words[start].trim_matches(|c: char| c == '.' || c == '-');
        let is_amount = !w.is_empty()
            && w
                .chars()
                .all(|c| c.is_ascii_digit() || "/.-½¼¾⅓⅔".contains(c));
        if is_amount || UNITS.contains(&w) || w == "of" || w.is_empty() {
            start += 1;
        } else {
            break;
        }
    }
    canonicalize(&words[start..].join(" "))
}
