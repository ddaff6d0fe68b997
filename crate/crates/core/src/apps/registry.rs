use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::code::CodeRecipe;
use crate::error::{Error, Result};

/// Default operations: heat, cut and boil plus 27 other common cooking verbs.
pub const DEFAULT_OPERATIONS: [&str; 30] = [
    "Preheat", "Heat", "Cut", "Boil", "Mix", "Stir", "Combine", "Whisk", "Bake", "Fry", "Saute", "Simmer", "Roast", "Grill",
    "Chop", "Slice", "Dice", "Peel", "Grate", "Pour", "Add", "Season", "Drain", "Knead", "Roll", "Spread", "Cool", "Serve",
    "Blend", "Marinate",
];

/// Permitted parameter names. Only tool, how and temperature appear in the
/// published skeleton; the other five complete the schema.
pub const DEFAULT_PARAMETERS: [&str; 8] = ["tool", "how", "temperature", "time", "quantity", "container", "speed", "duration-units"];

/// Short spellings accepted for schema parameters.
const PARAMETER_ALIASES: [(&str, &str); 2] = [("temp", "temperature"), ("duration_units", "duration-units")];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationRegistry {
    pub operations: Vec<String>,
    pub parameters: Vec<String>,
}

impl Default for OperationRegistry {
    fn default() -> Self {
        Self {
            operations: DEFAULT_OPERATIONS.iter().map(|s| s.to_string()).collect(),
            parameters: DEFAULT_PARAMETERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of functions whose operation is registered (1 for no functions).
    pub covered: f64,
    pub total: usize,
    pub unknown: Vec<String>,
    pub unknown_parameters: Vec<String>,
}

impl OperationRegistry {
    pub fn validate(&self) -> Result<()> {
        if self.operations.is_empty() {
            return Err(Error::Config("operation registry is empty".into()));
        }
        let mut seen = HashSet::new();
        for op in &self.operations {
            if !seen.insert(op.to_lowercase()) {
                return Err(Error::Config(format!("operation {op} is registered twice")));
            }
        }
        let mut seen = HashSet::new();
        for p in &self.parameters {
            if !seen.insert(p.as_str()) {
                return Err(Error::Config(format!("parameter {p} is registered twice")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        r.validate()?;
        Ok(r)
    }

    /// Case-insensitive membership.
    pub fn contains(&self, operation: &str) -> bool {
        self.operations.iter().any(|o| o.eq_ignore_ascii_case(operation))
    }

    pub fn allows_parameter(&self, name: &str) -> bool {
        let name = PARAMETER_ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, full)| full);
        self.parameters.iter().any(|p| p == name)
    }
}

pub fn check_operation_coverage(code: &CodeRecipe, registry: &OperationRegistry) -> Result<CoverageReport> {
    registry.validate()?;
    let total = code.functions.len();
    let unknown: Vec<String> = code
        .functions
        .iter()
        .filter(|f| !registry.contains(&f.operation))
        .map(|f| f.operation.clone())
        .collect();
    let mut unknown_parameters: Vec<String> = code
        .functions
        .iter()
        .flat_map(|f| f.parameters.keys())
        .filter(|k| !registry.allows_parameter(k))
        .cloned()
        .collect();
    unknown_parameters.sort();
    unknown_parameters.dedup();
    let covered = if total == 0 { 1.0 } else { (total - unknown.len()) as f64 / total as f64 };
    Ok(CoverageReport {
        covered,
        total,
        unknown,
        unknown_parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::code::CodeFunction;

    fn recipe(ops: &[&str]) -> CodeRecipe {
        CodeRecipe {
            instruction_comments: ops.iter().map(|o| format!("{o}.")).collect(),
            functions: ops
                .iter()
                .enumerate()
                .map(|(k, o)| CodeFunction {
                    name: o.to_string(),
                    operation: o.to_string(),
                    inputs: vec![],
                    parameters: [("temp".to_string(), "hot".to_string())].into_iter().collect(),
                    output_handle: format!("h_{}", k + 1),
                })
                .collect(),
        }
    }

    #[test]
    fn default_registry_shape() {
        let r = OperationRegistry::default();
        r.validate().unwrap();
        assert_eq!(r.operations.len(), 30);
        assert_eq!(r.parameters.len(), 8);
        assert!(r.contains("heat") && r.contains("CUT") && r.contains("Boil"));
    }

    #[test]
    fn coverage_arithmetic() {
        let r = OperationRegistry::default();
        assert_eq!(check_operation_coverage(&recipe(&["Mix", "Bake"]), &r).unwrap().covered, 1.0);
        let c = check_operation_coverage(&recipe(&["Mix", "Bake", "Stir", "Pour", "Flambe"]), &r).unwrap();
        assert_eq!(c.covered, 0.8);
        assert_eq!(c.unknown, ["Flambe"]);
        assert!(c.unknown_parameters.is_empty());
        assert!(check_operation_coverage(&recipe(&["Mix"]), &OperationRegistry { operations: vec![], parameters: vec![] }).is_err());
    }
}
