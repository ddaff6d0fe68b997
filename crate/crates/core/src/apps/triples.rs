use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::code::{is_handle, CodeRecipe};

/// The operation of a triple with the instruction it came from and its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub operation: String,
    pub instruction: String,
    pub parameters: IndexMap<String, String>,
}

/// `(i, r, o)`: inputs, relation, output handle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicTriple {
    pub i: Vec<String>,
    pub r: Relation,
    pub o: String,
    /// Handle inputs that no earlier triple produced.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dangling: Vec<String>,
}

/// One triple per function, in order. Inputs shaped like `h_k` must name an
/// earlier output; anything else is taken as an ingredient.
pub fn refine_to_triples(code: &CodeRecipe) -> Vec<SymbolicTriple> {
    let mut produced: HashSet<&str> = HashSet::new();
    let mut out = Vec::with_capacity(code.functions.len());
    for (k, f) in code.functions.iter().enumerate() {
        let dangling = f
            .inputs
            .iter()
            .filter(|x| is_handle(x) && !produced.contains(x.as_str()))
            .cloned()
            .collect();
        let instruction = code
            .instruction_comments
            .get(k)
            .cloned()
            .unwrap_or_else(|| f.name.replace('_', " "));
        out.push(SymbolicTriple {
            i: f.inputs.clone(),
            r: Relation {
                operation: f.operation.clone(),
                instruction,
                parameters: f.parameters.clone(),
            },
            o: f.output_handle.clone(),
            dangling,
        });
        produced.insert(&f.output_handle);
    }
    out
}
