//! Versioned prompt templates.
//!
//! Defaults are compiled in from `prompts/`. A directory with files of the
//! same names overrides any subset of them; its `VERSION` file, if present,
//! replaces the version string recorded in provenance and episodes.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub normalize_system: String,
    pub extract_system: String,
    pub adjudicate_goal: String,
    pub agentic_goal: String,
    pub cot_instruction: String,
    pub label_instruction: String,
    pub propose_instruction: String,
    pub evaluate_instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            version: include_str!("../prompts/VERSION").trim().to_string(),
            normalize_system: include_str!("../prompts/normalize_system.txt").trim().to_string(),
            extract_system: include_str!("../prompts/extract_system.txt").trim().to_string(),
            adjudicate_goal: include_str!("../prompts/adjudicate_goal.txt").trim().to_string(),
            agentic_goal: include_str!("../prompts/agentic_goal.txt").trim().to_string(),
            cot_instruction: include_str!("../prompts/cot_instruction.txt").trim().to_string(),
            label_instruction: include_str!("../prompts/label_instruction.txt").trim().to_string(),
            propose_instruction: include_str!("../prompts/propose_instruction.txt").trim().to_string(),
            evaluate_instruction: include_str!("../prompts/evaluate_instruction.txt").trim().to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = PromptTemplates::default();
        let slots: [(&str, &mut String); 9] = [
            ("VERSION", &mut t.version),
            ("normalize_system.txt", &mut t.normalize_system),
            ("extract_system.txt", &mut t.extract_system),
            ("adjudicate_goal.txt", &mut t.adjudicate_goal),
            ("agentic_goal.txt", &mut t.agentic_goal),
            ("cot_instruction.txt", &mut t.cot_instruction),
            ("label_instruction.txt", &mut t.label_instruction),
            ("propose_instruction.txt", &mut t.propose_instruction),
            ("evaluate_instruction.txt", &mut t.evaluate_instruction),
        ];
        for (name, slot) in slots {
            match std::fs::read_to_string(dir.join(name)) {
                Ok(text) => *slot = text.trim().to_string(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_nonempty() {
        let t = PromptTemplates::default();
        assert_eq!(t.version, "prompts-v1");
        assert!(t.propose_instruction.contains("FINALIZE"));
        assert!(t.propose_instruction.contains("ALTERNATE ACTION:"));
    }

    #[test]
    fn directory_overrides_a_subset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("VERSION"), "custom-7\n").unwrap();
        std::fs::write(dir.path().join("cot_instruction.txt"), "Compare.").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.version, "custom-7");
        assert_eq!(t.cot_instruction, "Compare.");
        assert_eq!(t.label_instruction, PromptTemplates::default().label_instruction);
    }
}
