use crate::graph::DataClass;
use crate::llm::{ChatMessage, ChatProvider};
use crate::prompts::PromptTemplates;

use super::{IngestError, TextTransformer};

/// Chat-model backed normalization and extraction.
pub struct LlmTransformer {
    chat: Box<dyn ChatProvider>,
    model: String,
    templates: PromptTemplates,
}

impl LlmTransformer {
    pub fn new(chat: Box<dyn ChatProvider>, model: impl Into<String>, templates: PromptTemplates) -> Self {
        LlmTransformer {
            chat,
            model: model.into(),
            templates,
        }
    }
}

fn extraction_request(text: &str, data_class: DataClass, repair: Option<&str>) -> String {
    let kind = match data_class {
        DataClass::Negative => "crash narrative",
        DataClass::Positive => "driving-log scene",
    };
    let mut out = format!("Scene ({kind}):\n{text}");
    if let Some(problems) = repair {
        out.push_str("\n\nYour previous answer was rejected:\n");
        out.push_str(problems);
        out.push_str("\nAnswer again with a corrected JSON object.");
    }
    out
}

impl TextTransformer for LlmTransformer {
    fn normalize(&self, narrative: &str) -> Result<String, IngestError> {
        let messages = [
            ChatMessage::system(self.templates.normalize_system.clone()),
            ChatMessage::user(narrative.trim()),
        ];
        Ok(self.chat.complete(&messages)?.trim().to_string())
    }

    fn extract(&self, text: &str, data_class: DataClass, repair: Option<&str>) -> Result<String, IngestError> {
        let messages = [
            ChatMessage::system(self.templates.extract_system.clone()),
            ChatMessage::user(extraction_request(text, data_class, repair)),
        ];
        Ok(self.chat.complete(&messages)?)
    }

    fn pipeline_version(&self) -> String {
        format!("llm/{}", self.model)
    }

    fn prompt_version(&self) -> String {
        self.templates.version.clone()
    }
}
