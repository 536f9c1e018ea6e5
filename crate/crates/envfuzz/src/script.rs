//! Env-script files: the JSON form of an [`EnvScript`].
//!
//! ```json
//! {"3": {"kind": "socket", "path": "socket:ui", "stimuli": ["312b323d", "636c6f7365"]}}
//! ```

use std::collections::BTreeMap;

use envfuzz_core::recorder::{EnvScript, FdSource};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("malformed env script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fd `{0}` is not an integer")]
    BadFd(String),
    #[error("fd {fd}, stimulus {index}: {source}")]
    BadHex {
        fd: i64,
        index: usize,
        source: hex::FromHexError,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceJson {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default)]
    stimuli: Vec<String>,
}

pub fn parse_env_script(text: &str) -> Result<EnvScript, ScriptError> {
    let raw: BTreeMap<String, SourceJson> = serde_json::from_str(text)?;
    let mut script = EnvScript::new();
    for (key, src) in raw {
        let fd: i64 = key
            .trim()
            .parse()
            .map_err(|_| ScriptError::BadFd(key.clone()))?;
        let stimuli = src
            .stimuli
            .iter()
            .enumerate()
            .map(|(index, h)| {
                hex::decode(h).map_err(|source| ScriptError::BadHex { fd, index, source })
            })
            .collect::<Result<_, _>>()?;
        script.fds.insert(
            fd,
            FdSource {
                kind: src.kind,
                path: src.path,
                stimuli,
            },
        );
    }
    Ok(script)
}

pub fn encode_env_script(script: &EnvScript) -> String {
    let raw: BTreeMap<String, SourceJson> = script
        .fds
        .iter()
        .map(|(fd, src)| {
            let json = SourceJson {
                kind: src.kind.clone(),
                path: src.path.clone(),
                stimuli: src.stimuli.iter().map(hex::encode).collect(),
            };
            (fd.to_string(), json)
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("env script serializes")
}
