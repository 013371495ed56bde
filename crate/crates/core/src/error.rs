use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dialogue {dialogue_id}: {message}")]
    Corpus { dialogue_id: String, message: String },

    #[error("history is empty")]
    EmptyHistory,

    #[error("history must end with a user utterance")]
    HistoryEndsWithAgent,

    #[error("label {0} is outside {{0, 1}}")]
    Label(u8),

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        use core::fmt::Write;
        let mut detail = String::new();
        for (i, s) in shapes.iter().enumerate() {
            if i > 0 {
                detail.push_str(" vs ");
            }
            let _ = write!(detail, "{:?}", s);
        }
        Error::Shape { op, detail }
    }

    pub fn corpus(dialogue_id: &str, message: impl Into<String>) -> Self {
        Error::Corpus {
            dialogue_id: dialogue_id.into(),
            message: message.into(),
        }
    }
}
