//! Function-call schema export: one document per tool in the form expected
//! by chat-completions tool calling (name, description, JSON-schema
//! parameters), with property shapes following each input's shape class and
//! `required` listing inputs without defaults.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map as JsonMap, Value as Json};

use super::{RegistryError, ToolId, ToolRegistry};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionSchema {
    #[serde(rename = "type")]
    pub kind: String,
    pub function: FunctionDecl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionDecl {
    pub name: String,
    pub description: String,
    pub parameters: Json,
}

pub fn export_function_schemas(
    registry: &ToolRegistry,
    tools: &[ToolId],
) -> Result<Vec<FunctionSchema>, RegistryError> {
    let mut out = Vec::with_capacity(tools.len());
    for id in tools {
        let spec = registry.get(id)?;
        let mut properties = JsonMap::new();
        let mut required = Vec::new();
        for input in &spec.inputs {
            let shape = registry
                .lattice()
                .shape_of(&input.ty)
                .expect("registered tools reference registered types");
            properties.insert(
                input.name.clone(),
                json!({
                    "type": shape.json_schema_type(),
                    "description": format!("`{}` value", input.ty),
                }),
            );
            if !spec.defaults.contains_key(&input.name) {
                required.push(Json::String(input.name.clone()));
            }
        }
        out.push(FunctionSchema {
            kind: "function".to_string(),
            function: FunctionDecl {
                name: spec.id.to_string(),
                description: spec.description.clone(),
                parameters: json!({
                    "type": "object",
                    "properties": Json::Object(properties),
                    "required": Json::Array(required),
                }),
            },
        });
    }
    Ok(out)
}
