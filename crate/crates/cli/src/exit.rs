//! Exit codes: 1 configuration, 2 data or checkpoint, 3 numeric failure.

use dksan::Error;

#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type Outcome<T> = std::result::Result<T, Fail>;

impl Fail {
    pub fn config(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    pub fn data(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn numeric(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }

    /// Classifies a library error by its kind.
    pub fn from_core(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Self::numeric(e.into()),
            Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) => Self::data(e.into()),
            _ => Self::config(e.into()),
        }
    }
}

pub trait ResultExt<T> {
    fn or_config(self) -> Outcome<T>;
    /// Data error, except that a non-finite value stays a numeric failure.
    fn or_data(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for std::result::Result<T, E> {
    fn or_config(self) -> Outcome<T> {
        self.map_err(|e| Fail::config(e.into()))
    }

    fn or_data(self) -> Outcome<T> {
        self.map_err(|e| {
            let e: anyhow::Error = e.into();
            if matches!(e.downcast_ref::<Error>(), Some(Error::NonFinite { .. })) {
                Fail::numeric(e)
            } else {
                Fail::data(e)
            }
        })
    }
}
