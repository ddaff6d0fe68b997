//! Downstream applications: few-shot recipe customization and recipe-to-code
//! prompting, the code grammar with its symbolic triples, and the LLM client.

pub mod code;
pub mod llm;
pub mod prompts;
pub mod registry;
pub mod triples;

pub use code::{instruction_to_function_name, normalize_code, parse_code_recipe, CodeDiagnostic, CodeFunction, CodeRecipe, ParsedCode};
pub use llm::{complete_with_llm, LlmClient, LlmConfig, LlmError, MockTransport, Transport, TransportError};
pub use prompts::{
    build_code_prompt, build_customization_prompt, load_code_demos, load_customization_demos, CodeDemo, CustomizationDemo,
    CustomizationRequest, CustomizationTopic, PromptRecipe, CODE_SEGMENT_SEPARATOR,
};
pub use registry::{check_operation_coverage, CoverageReport, OperationRegistry};
pub use triples::{refine_to_triples, Relation, SymbolicTriple};
