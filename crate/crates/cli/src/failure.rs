use std::fmt::Display;
use std::path::Path;

#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn usage(message: impl Display) -> Self {
        Self::new("usage", message)
    }

    pub fn io(path: &Path, e: impl Display) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }

    pub fn print(&self) {
        let body = serde_json::json!({ "error": { "kind": self.kind, "message": self.message } });
        eprintln!("{body}");
    }
}

impl From<hatnet::Error> for Failure {
    fn from(e: hatnet::Error) -> Self {
        Self::new(e.kind(), e)
    }
}

impl From<image::ImageError> for Failure {
    fn from(e: image::ImageError) -> Self {
        Self::new("image", e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e)
    }
}
