use std::fmt;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Library errors often embed their source in their own message, so
        // skip chain entries the previous one already printed.
        let mut prev = String::new();
        for (i, cause) in self.error.chain().enumerate() {
            let msg = cause.to_string();
            if i > 0 && prev.contains(&msg) {
                continue;
            }
            if i > 0 {
                f.write_str(": ")?;
            }
            f.write_str(&msg)?;
            prev = msg;
        }
        Ok(())
    }
}

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure { kind: Kind::Usage, error: anyhow::anyhow!("{msg}") }
    }
}

/// Tags an error with its exit class.
pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Usage, error: e.into() })
    }

    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Data, error: e.into() })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { kind: Kind::Runtime, error: e.into() })
    }
}
