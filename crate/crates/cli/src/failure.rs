use pvi_core::PviError;

/// Everything that ends a command with a non-zero status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Divergence(String),
    CheckFailed(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Divergence(_) => 2,
            Failure::CheckFailed(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Divergence(m) | Failure::CheckFailed(m) => m,
        }
    }
}

impl From<PviError> for Failure {
    fn from(e: PviError) -> Self {
        if e.is_divergence() {
            Failure::Divergence(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}
