use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Schema or validation failure; `path` is dotted, empty for the root.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: survey_coupling::Error,
    },
}

impl CliError {
    pub fn config(path: &str, message: &str) -> Self {
        CliError::Config {
            path: path.to_string(),
            message: message.to_string(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn core(context: impl Into<String>, source: survey_coupling::Error) -> Self {
        CliError::Core {
            context: context.into(),
            source,
        }
    }

    /// Prefixes the path of a config error with `parent`.
    pub fn under(self, parent: &str) -> Self {
        match self {
            CliError::Config { path, message } => CliError::Config {
                path: if path.is_empty() {
                    parent.to_string()
                } else {
                    format!("{parent}.{path}")
                },
                message,
            },
            other => other,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Core { .. } => "computation",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    /// The machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Config { path, .. } => body["path"] = json!(path),
            CliError::Core { source, .. } => body["detail"] = json!(format!("{source:?}")),
            CliError::Io { .. } => {}
        }
        json!({ "error": body })
    }
}
